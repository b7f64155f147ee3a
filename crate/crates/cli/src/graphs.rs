use std::path::Path;

use polyboot::levelplan::{build_graph, NetGraph, BUILTIN_GRAPHS};
use polyboot::tinynet::Arch;
use polyboot::{Error, Result};

/// Level-planning graph from a built-in name, a tinynet architecture name,
/// or a JSON file.
pub fn resolve(name: &str) -> Result<NetGraph> {
    if BUILTIN_GRAPHS.contains(&name) || name.trim_start().starts_with('{') {
        return build_graph(name);
    }
    if let Ok(arch) = Arch::builtin(name) {
        return arch.graph();
    }
    let path = Path::new(name);
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        return NetGraph::from_json(&text);
    }
    Err(Error::InvalidInput(format!("'{name}' is neither a known graph nor a graph file")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_all_name_forms() {
        assert_eq!(resolve("resnet20").unwrap().num_acts(), 19);
        assert_eq!(resolve("desk-resnet").unwrap().num_acts(), 8);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.json");
        std::fs::write(&p, r#"{"ops": [{"kind": "convbn"}, {"kind": "act", "slot": 0}, {"kind": "fc"}]}"#).unwrap();
        assert_eq!(resolve(p.to_str().unwrap()).unwrap().num_acts(), 1);
        assert!(matches!(resolve("nope"), Err(Error::InvalidInput(_))));
    }
}
