//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when a criterion fails that is not on the known-red list.
//!
//! Run with `cargo test -p polyboot --test acceptance`. Criteria 11 and 12
//! train the desk-scale search twice and take about half an hour on one core.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use polyboot::baselines::{herpn_cast, herpn_eval, HerPNParams};
use polyboot::chebcore::{self, ChebPoly, CompositeSpec, SLOTS};
use polyboot::desk::{train_teacher, uniform_high_degree_boots, DeskConfig, DeskEvaluator, TEACHER_EPOCHS};
use polyboot::evorelu::{scale_fold, unfolded_forward, EvoReluSpec, LinearOp};
use polyboot::levelplan::{build_graph, place_greedy, place_policy, simulate_levels, LevelParams, NetGraph, OpKind, Policy};
use polyboot::moea::{crowding, dominates, mos_run, nds, MosConfig};
use polyboot::rccde::{rccde_optimize, RccdeConfig};
use polyboot::seed;
use polyboot::tinynet::data::{DeskDataset, ImageParams};
use polyboot::tinynet::train::{pat_backward, KdConfig};
use polyboot::tinynet::{backward, forward, ActBinding, Arch, Mode, Model, Role};
use rand::Rng;

type Outcome = Result<String, String>;

/// Criteria left failing on purpose; see the decisions ledger.
const KNOWN_RED: [u32; 1] = [6];

/// Minival accuracy of the committed desk teacher (seed 0, 30 epochs).
const TEACHER_BASELINE: f64 = 0.957;

/// Linf threshold for the (7, 7, 7) fit.
const CRIT6_LINF: f64 = 0.05;
/// Joint-DE oracle result on the same grid, committed with the threshold.
const JOINT_DE_L1: f64 = 0.186;
const JOINT_DE_LINF: f64 = 1.256;

const BACKBONES: [&str; 4] = ["resnet20", "resnet32", "resnet44", "vgg11"];

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn crit1() -> Outcome {
    let d = chebcore::depth(&[15, 15, 27, 0, 0, 0]).map_err(|e| e.to_string())?;
    check(d == 14, format!("depth(15,15,27) = {d}"))?;
    let id = EvoReluSpec::identity().depth();
    let quad = EvoReluSpec::quadratic(vec![1, 0, 0, 0, 0, 0], 0.5, 1).map_err(|e| e.to_string())?.depth();
    check(id == 0 && quad == 2, format!("identity {id}, quadratic {quad}"))?;
    Ok(format!("depth(15,15,27) = {d}, identity {id}, quadratic {quad}"))
}

fn crit2() -> Outcome {
    let want = [(114, 80.0), (186, 130.0), (258, 180.0), (60, 42.0)];
    let mut got = Vec::new();
    for (name, (dim, exp)) in BACKBONES.iter().zip(want) {
        let g = build_graph(name).map_err(|e| e.to_string())?;
        let l = g.search_space_log10();
        check(g.genome_dim() == dim, format!("{name}: genome dim {} != {dim}", g.genome_dim()))?;
        check((l - exp).abs() <= 0.5, format!("{name}: log10 size {l:.2} vs {exp}"))?;
        got.push(format!("{name} {} / 10^{l:.1}", g.genome_dim()));
    }
    Ok(got.join(", "))
}

fn crit3() -> Outcome {
    let p = LevelParams::default();
    let mut got = Vec::new();
    for (name, want) in BACKBONES.iter().zip([18, 30, 42, 9]) {
        let g = build_graph(name).map_err(|e| e.to_string())?;
        let depths = vec![14; g.num_acts()];
        let pl = place_policy(&g, Policy::Mpcnn, &depths, &p).map_err(|e| format!("{name}: {e}"))?;
        simulate_levels(&g, &depths, &pl.bootstrap_positions, &p).map_err(|e| format!("{name}: {e}"))?;
        check(pl.count == want, format!("{name}: {} bootstraps, want {want}", pl.count))?;
        got.push(format!("{name} {}", pl.count));
    }
    Ok(got.join(", "))
}

fn crit4() -> Outcome {
    let p = LevelParams::default();
    let mut got = Vec::new();
    for (name, published) in BACKBONES.iter().zip([5usize, 8, 11, 2]) {
        let g = build_graph(name).map_err(|e| e.to_string())?;
        let depths = vec![2; g.num_acts()];
        let c = place_greedy(&g, &depths, &p).map_err(|e| format!("{name}: {e}"))?.count;
        check(c <= published && published - c <= 1, format!("{name}: greedy {c} vs published {published}"))?;
        let pol = place_policy(&g, Policy::Aespa, &depths, &p).map_err(|e| format!("{name} policy: {e}"))?;
        got.push(format!("{name} greedy {c} (published {published}, policy {})", pol.count));
    }
    Ok(got.join(", "))
}

fn random_chain<R: Rng>(rng: &mut R) -> (NetGraph, Vec<u32>) {
    let len = rng.gen_range(1..=12);
    let mut ops = Vec::new();
    let mut depths = Vec::new();
    for _ in 0..len {
        ops.push(match rng.gen_range(0..5) {
            0 => OpKind::ConvBn,
            1 => OpKind::Fc,
            2 => OpKind::AvgPool,
            3 => OpKind::Downsample,
            _ => {
                depths.push(rng.gen_range(0..=16));
                OpKind::Act { slot: depths.len() - 1 }
            }
        });
    }
    (NetGraph::chain(ops).expect("chain"), depths)
}

/// Fewest bootstraps over every subset of anchor positions.
fn brute_force_min(g: &NetGraph, depths: &[u32], p: &LevelParams) -> Option<usize> {
    let anchors: Vec<usize> = (0..g.ops().len()).filter(|&i| g.ops()[i].is_anchor()).collect();
    (0..1u32 << anchors.len())
        .filter(|mask| {
            let pos: Vec<usize> = anchors.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, &a)| a).collect();
            simulate_levels(g, depths, &pos, p).is_ok()
        })
        .map(|mask| mask.count_ones() as usize)
        .min()
}

fn crit5() -> Outcome {
    let p = LevelParams::default();
    let mut rng = seed::rng(5);
    let (mut feasible, mut boots) = (0, 0);
    for i in 0..1000 {
        let (g, d) = random_chain(&mut rng);
        let greedy = place_greedy(&g, &d, &p).ok().map(|pl| pl.count);
        let brute = brute_force_min(&g, &d, &p);
        check(greedy == brute, format!("chain {i} {:?} depths {d:?}: greedy {greedy:?}, brute force {brute:?}", g.ops()))?;
        if let Some(b) = brute {
            feasible += 1;
            boots += b;
        }
    }
    Ok(format!("1000/1000 chains agree ({feasible} feasible, {boots} bootstraps in total)"))
}

fn fit777(threads: usize) -> Result<polyboot::rccde::RccdeOutcome, String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
    pool.install(|| rccde_optimize(&[7, 7, 7], &RccdeConfig::default())).map_err(|e| e.to_string())
}

fn crit6(fit: &polyboot::rccde::RccdeOutcome) -> Outcome {
    for ev in &fit.best.trace {
        check(ev.reg_after <= ev.reg_before, format!("objective rose at an install step: {ev:?}"))?;
    }
    let c = &fit.certificate;
    let detail = format!(
        "Linf {:.4} (threshold {CRIT6_LINF}), L1 {:.5}; joint-DE oracle L1 {JOINT_DE_L1}, Linf {JOINT_DE_LINF}; objective non-increasing over {} installs",
        c.linf,
        c.l1,
        fit.best.trace.len()
    );
    check(c.linf <= CRIT6_LINF, detail.clone())?;
    Ok(detail)
}

fn brute_fronts(points: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let mut left: Vec<usize> = (0..points.len()).collect();
    let mut fronts = Vec::new();
    while !left.is_empty() {
        let front: Vec<usize> = left.iter().copied().filter(|&i| !left.iter().any(|&j| dominates(&points[j], &points[i]))).collect();
        left.retain(|i| !front.contains(i));
        fronts.push(front);
    }
    fronts
}

fn crit7() -> Outcome {
    let mut rng = seed::rng(7);
    for set in 0..200 {
        // integer second objective, like bootstrap counts, so ties occur
        let points: Vec<Vec<f64>> = (0..64).map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0..12) as f64]).collect();
        let fronts = nds(&points);
        check(fronts == brute_fronts(&points), format!("set {set}: partitions differ"))?;
        for front in &fronts {
            let d = crowding(&points, front);
            for m in 0..2 {
                for pick in [f64::min as fn(f64, f64) -> f64, f64::max] {
                    let edge = front.iter().map(|&i| points[i][m]).fold(points[front[0]][m], pick);
                    let covered = front.iter().zip(&d).any(|(&i, v)| points[i][m] == edge && v.is_infinite());
                    check(covered, format!("set {set}: boundary of objective {m} not infinite"))?;
                }
            }
        }
    }
    Ok("200 sets of 64 points match the brute-force partition".into())
}

fn crit8() -> Outcome {
    let mut rng = seed::rng(8);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = HerPNParams {
            mu: [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
            var: [rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)],
            gamma: rng.gen_range(-2.0..2.0),
            beta: rng.gen_range(-2.0..2.0),
            eps: rng.gen_range(1e-6..1e-2),
        };
        let x = rng.gen_range(-4.0..4.0);
        let [a, b, c] = herpn_cast(&p);
        let want = herpn_eval(&p, x);
        let rel = ((a * x + b) * x + c - want).abs() / want.abs().max(1.0);
        worst = worst.max(rel);
    }
    check(worst <= 1e-6, format!("worst relative error {worst:e}"))?;
    Ok(format!("worst relative error {worst:.1e} over 1000 draws"))
}

fn random_affine<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> LinearOp {
    let w = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = (0..rows).map(|_| rng.gen_range(-0.5..0.5)).collect();
    LinearOp::affine(w, b, rows, cols).expect("shape")
}

fn random_spec<R: Rng>(rng: &mut R, channels: usize) -> EvoReluSpec {
    let (b_in, b_out) = (rng.gen_range(0.5..8.0), rng.gen_range(0.5..8.0));
    let spec = match rng.gen_range(0..3) {
        0 => EvoReluSpec::identity(),
        1 => {
            let quad = (0..channels).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(-0.2..0.2)]).collect();
            EvoReluSpec::quadratic_with(vec![1, 0, 0, 0, 0, 0], quad).expect("quadratic")
        }
        _ => {
            let mut row = [0u32; SLOTS];
            for r in row.iter_mut().take(rng.gen_range(1..=3)) {
                *r = [1, 3, 5, 7][rng.gen_range(0..4)];
            }
            // a lone degree-1 stage is the quadratic branch
            if chebcore::total_degree(&row) == 1 {
                row[0] = 3;
            }
            let stages = chebcore::merge(&row)
                .iter()
                .map(|&d| {
                    let a = (0..d).map(|k| if k % 2 == 0 { rng.gen_range(-1.0..1.0) / d as f64 } else { 0.0 }).collect();
                    ChebPoly::new(a, rng.gen_range(1.0..3.0)).expect("stage")
                })
                .collect();
            EvoReluSpec::composite(CompositeSpec::new(row.to_vec(), stages).expect("composite"), b_in, b_out).expect("spec")
        }
    };
    spec.with_bounds(b_in, b_out).expect("bounds")
}

fn crit9() -> Outcome {
    let mut rng = seed::rng(9);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (n_in, ch, n_out) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let prev = random_affine(&mut rng, ch, n_in);
        let next = random_affine(&mut rng, n_out, ch);
        let spec = random_spec(&mut rng, ch);
        let folded = scale_fold(&spec, &prev, &next).map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let x: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let want = unfolded_forward(&prev, &spec, &next, &x).map_err(|e| e.to_string())?;
            let got = folded.forward(&x).map_err(|e| e.to_string())?;
            for (g, w) in got.iter().zip(&want) {
                worst = worst.max((g - w).abs() / w.abs().max(1.0));
            }
        }
    }
    check(worst <= 1e-5, format!("worst relative difference {worst:e}"))?;
    Ok(format!("worst relative difference {worst:.1e} over 50 pipelines x 20 inputs"))
}

fn worst_fd_error(model: &Model, x: &[f64], y: &[u32], teacher: &[f64]) -> f64 {
    let kd = KdConfig { tau: 0.5, ..KdConfig::default() };
    let (_, grads, _) = pat_backward(model, x, y, Some(teacher), &kd, Mode::PAT).expect("backward");
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (ei, e) in model.params().entries.iter().enumerate() {
        if e.role == Role::Buffer {
            continue;
        }
        for k in 0..e.data.len() {
            let loss = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().get_mut(ei)[k] += delta;
                pat_backward(&m, x, y, Some(teacher), &kd, Mode::PAT).expect("loss").0
            };
            let fd = (loss(h) - loss(-h)) / (2.0 * h);
            let g = grads[ei][k];
            worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-3));
        }
    }
    worst
}

fn crit10() -> Outcome {
    let mut rng = seed::rng(10);
    let teacher = Model::new(Arch::desk_chain(), 101).map_err(|e| e.to_string())?;
    let quad = |a2| ActBinding::Evo { spec: EvoReluSpec::quadratic(vec![1, 0, 0, 0, 0, 0], a2, 1).expect("quadratic") };
    let identity = ActBinding::Evo { spec: EvoReluSpec::identity() };
    let student = teacher.rebind(vec![quad(0.4), identity, quad(0.6)]).map_err(|e| e.to_string())?;
    let x: Vec<f64> = (0..4 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = [1u32, 4, 7, 9];
    let tl = teacher.logits(&x, 4).map_err(|e| e.to_string())?;
    let worst = worst_fd_error(&student, &x, &y, &tl);
    check(worst < 1e-4, format!("worst relative gradient error {worst:e}"))?;

    // composite slots backpropagate exactly like ReLU at the same pre-activations
    let c = CompositeSpec::new(vec![3, 0, 0, 0, 0, 0], vec![ChebPoly::new(vec![0.6, 0.0, -0.1], 1.0).expect("stage")]).expect("composite");
    let spec = EvoReluSpec::composite(c, 3.0, 3.0).map_err(|e| e.to_string())?;
    let comp = teacher.rebind(vec![ActBinding::Evo { spec }; 3]).map_err(|e| e.to_string())?;
    let relu = teacher.rebind(vec![ActBinding::Relu; 3]).map_err(|e| e.to_string())?;
    let cache = forward(&comp, &x, 4, Mode::PAT).map_err(|e| e.to_string())?;
    let g: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let gc = backward(&comp, &cache, &g).map_err(|e| e.to_string())?;
    let gr = backward(&relu, &cache, &g).map_err(|e| e.to_string())?;
    check(gc == gr, "composite backward differs from the ReLU indicator rule")?;
    Ok(format!("worst relative gradient error {worst:.1e}; composite backward equals ReLU rule"))
}

struct DeskRun {
    teacher_acc: f64,
    max_acc: f64,
    min_boot: usize,
    uniform_boots: usize,
    archive: String,
    certificates: Vec<String>,
}

fn desk_run(threads: usize) -> Result<DeskRun, String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let data = DeskDataset::images(0, &ImageParams::default())?;
        let (teacher, rep) = train_teacher(Arch::desk_resnet(), &data, TEACHER_EPOCHS, 0)?;
        let eval = DeskEvaluator::new(teacher, data, DeskConfig::default())?;
        let uniform_boots = uniform_high_degree_boots(eval.graph(), &eval.config().level)?;
        let cfg = MosConfig { population: 8, generations: 5, hv_reference_boot: uniform_boots as f64 + 1.0, ..MosConfig::default() };
        let st = mos_run(&cfg, &eval, |_| Ok(()))?;
        let members = st.archive.members();
        let certificates = members
            .iter()
            .flat_map(|s| s.coeffs.iter().filter_map(polyboot::desk::slot_certificate).map(|c| c.checksum.clone()))
            .collect();
        Ok(DeskRun {
            teacher_acc: rep.best_acc,
            max_acc: members.iter().map(|s| s.accuracy()).fold(0.0, f64::max),
            min_boot: members.iter().map(|s| s.boot).min().unwrap_or(usize::MAX),
            uniform_boots,
            archive: st.archive.to_jsonl()?,
            certificates,
        })
    })
    .map_err(|e: polyboot::Error| e.to_string())
}

fn crit11(r: &DeskRun) -> Outcome {
    check((r.teacher_acc - TEACHER_BASELINE).abs() < 1e-9, format!("teacher minival {:.4}, committed {TEACHER_BASELINE}", r.teacher_acc))?;
    let detail = format!(
        "teacher {:.4}; best archive accuracy {:.4}; min bootstraps {} vs uniform high-degree {}",
        r.teacher_acc, r.max_acc, r.min_boot, r.uniform_boots
    );
    check(r.teacher_acc - r.max_acc <= 0.02, format!("(a) fails: {detail}"))?;
    check(2 * r.min_boot <= r.uniform_boots, format!("(b) fails: {detail}"))?;
    Ok(detail)
}

fn crit12(fit1: &polyboot::rccde::RccdeOutcome, fit2: &polyboot::rccde::RccdeOutcome, d1: &DeskRun, d2: &DeskRun) -> Outcome {
    let c1 = serde_json::to_string(&fit1.certificate).map_err(|e| e.to_string())?;
    let c2 = serde_json::to_string(&fit2.certificate).map_err(|e| e.to_string())?;
    check(c1 == c2, "certificates differ between 1 and 2 threads")?;
    check(d1.archive == d2.archive, "archives differ between 1 and 2 threads")?;
    check(d1.certificates == d2.certificates, "archive certificates differ")?;
    Ok(format!(
        "certificate {} and archive checksum {} identical at 1 and 2 threads",
        &fit1.certificate.checksum[..12],
        &polyboot::persist::sha256_hex(d1.archive.as_bytes())[..12]
    ))
}

fn main() {
    let mut unexpected = Vec::new();
    let mut report = |n: u32, t: Instant, r: std::thread::Result<Outcome>| {
        let r = r.unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("criterion {n:>2}: PASS ({secs:.1}s) {d}"),
            Err(d) => {
                let known = KNOWN_RED.contains(&n);
                println!("criterion {n:>2}: FAIL ({secs:.1}s){} {d}", if known { " [known, see decisions ledger]" } else { "" });
                if !known {
                    unexpected.push(n);
                }
            }
        }
    };
    let quick: [(u32, fn() -> Outcome); 4] = [(1, crit1), (2, crit2), (3, crit3), (4, crit4)];
    for (n, f) in quick {
        let t = Instant::now();
        report(n, t, catch_unwind(f));
    }
    let t = Instant::now();
    report(5, t, catch_unwind(crit5));

    let t = Instant::now();
    let fit1 = catch_unwind(|| fit777(1));
    let fit1 = match fit1 {
        Ok(Ok(f)) => Some(f),
        Ok(Err(e)) => {
            report(6, t, Ok(Err(e)));
            None
        }
        Err(p) => {
            report(6, t, Err(p));
            None
        }
    };
    if let Some(f) = &fit1 {
        report(6, t, catch_unwind(AssertUnwindSafe(|| crit6(f))));
    }

    let rest: [(u32, fn() -> Outcome); 4] = [(7, crit7), (8, crit8), (9, crit9), (10, crit10)];
    for (n, f) in rest {
        let t = Instant::now();
        report(n, t, catch_unwind(f));
    }

    let t = Instant::now();
    let desk1 = catch_unwind(|| desk_run(1));
    let desk1 = match desk1 {
        Ok(Ok(d)) => {
            report(11, t, Ok(crit11(&d)));
            Some(d)
        }
        Ok(Err(e)) => {
            report(11, t, Ok(Err(e)));
            None
        }
        Err(p) => {
            report(11, t, Err(p));
            None
        }
    };

    let t = Instant::now();
    let r12 = catch_unwind(AssertUnwindSafe(|| -> Outcome {
        let fit1 = fit1.as_ref().ok_or("criterion 6 fit did not complete")?;
        let desk1 = desk1.as_ref().ok_or("criterion 11 run did not complete")?;
        let fit2 = fit777(2)?;
        let desk2 = desk_run(2)?;
        crit12(fit1, &fit2, desk1, &desk2)
    }));
    report(12, t, r12);

    if unexpected.is_empty() {
        println!("acceptance: no unexpected failures (known red: {KNOWN_RED:?})");
    } else {
        println!("acceptance: unexpected failures in criteria {unexpected:?}");
        std::process::exit(1);
    }
}
