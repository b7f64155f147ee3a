//! Modelled (not measured) CKKS latency: `a * bootstraps + b * linear ops`.
//! `a` and `b` are calibrated on published per-image timings of ResNet and
//! VGG backbones; nothing here runs encrypted.

use polyboot::levelplan::build_graph;
use polyboot::Result;
use serde::Serialize;

pub const LABEL: &str = "modelled, not measured";

/// One published timing row: backbone, method, bootstraps, seconds spent
/// in linear layers and in bootstrapping.
pub struct Timing {
    pub backbone: &'static str,
    pub method: &'static str,
    pub boots: u32,
    pub linear_s: f64,
    pub boot_s: f64,
}

const fn t(backbone: &'static str, method: &'static str, boots: u32, linear_s: f64, boot_s: f64) -> Timing {
    Timing { backbone, method, boots, linear_s, boot_s }
}

pub const TIMINGS: [Timing; 22] = [
    t("resnet20", "mpcnn", 18, 1180.0, 7138.0),
    t("resnet20", "aespa", 5, 2344.0, 2108.0),
    t("resnet20", "searched", 5, 2014.0, 2092.0),
    t("resnet20", "searched", 11, 2142.0, 4473.0),
    t("resnet32", "mpcnn", 30, 2104.0, 12304.0),
    t("resnet32", "aespa", 8, 3582.0, 3234.0),
    t("resnet32", "searched", 8, 3540.0, 3107.0),
    t("resnet32", "searched", 19, 2962.0, 8185.0),
    t("resnet44", "mpcnn", 42, 3084.0, 18071.0),
    t("resnet44", "aespa", 11, 4683.0, 4393.0),
    t("resnet44", "searched", 8, 4595.0, 3265.0),
    t("resnet44", "searched", 22, 4447.0, 10256.0),
    t("vgg11", "mpcnn", 9, 676.0, 3809.0),
    t("vgg11", "aespa", 2, 1281.0, 835.0),
    t("vgg11", "searched", 1, 1056.0, 402.0),
    t("vgg11", "searched", 4, 1019.0, 1661.0),
    // 100-class runs
    t("resnet32", "mpcnn", 30, 2062.0, 11815.0),
    t("resnet32", "aespa", 8, 3754.0, 3225.0),
    t("resnet32", "searched", 16, 3602.0, 6528.0),
    t("vgg11", "mpcnn", 9, 685.0, 3752.0),
    t("vgg11", "aespa", 2, 1330.0, 835.0),
    t("vgg11", "searched", 7, 1145.0, 3027.0),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyModel {
    /// Seconds per bootstrap.
    pub a: f64,
    /// Seconds per linear op.
    pub b: f64,
}

impl LatencyModel {
    /// Mean per-bootstrap and per-linear-op cost over [`TIMINGS`].
    pub fn calibrated() -> Result<Self> {
        let n = TIMINGS.len() as f64;
        let a = TIMINGS.iter().map(|r| r.boot_s / r.boots as f64).sum::<f64>() / n;
        let mut b = 0.0;
        for r in &TIMINGS {
            b += r.linear_s / build_graph(r.backbone)?.linear_op_count() as f64;
        }
        Ok(Self { a, b: b / n })
    }

    pub fn seconds(&self, boots: usize, linear_ops: usize) -> f64 {
        self.a * boots as f64 + self.b * linear_ops as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_is_in_the_published_range() {
        let m = LatencyModel::calibrated().unwrap();
        assert!((380.0..450.0).contains(&m.a), "a = {}", m.a);
        assert!(m.b > 0.0);
        // bootstraps dominate the model for a deep uniform placement
        assert!(m.seconds(18, 0) > m.seconds(0, 22));
    }
}
