//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criterion 13 runs MDM on real recordings when `$SEMG_DATA_ROOT/audible-words`
//! holds one subject's session manifests; otherwise it is skipped.

#[path = "../../core/tests/support/gradchecks.rs"]
#[allow(dead_code)]
mod gradchecks;

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use spdsemg::analysis::{electrode_importance, BasisMatrix, ColumnSelection};
use spdsemg::decoders::{adjusted_rand_index, k_medoids, mdm_fit, mdm_predict, pairwise_distances};
use spdsemg::geometry::{
    chart_exp, chart_log, frechet_mean_uniform, geodesic_distance, strict_len, TriangularTangent,
};
use spdsemg::graph::{edge_matrix, regularize};
use spdsemg::gru::{gru_train, rk4_integrate, GruModelConfig};
use spdsemg::linalg::{expm, lstsq, orthogonality_error, sym_eig, SymMatrix};
use spdsemg::rng::{normal, normal_matrix, random_spd, random_stiefel, random_symmetric, seeded, shuffle, Pcg};
use spdsemg::spdnet::{reeig_forward, spdnet_train, stiefel_grad, stiefel_step, SpdNetConfig, StiefelParameter};
use spdsemg::synth::{chart_clusters, drift_sequences, spd_clusters};
use spdsemg::CholeskyPoint;
use spdsemg_cli::manifest::DATA_ROOT_ENV;
use spdsemg_cli::{build_dataset, run_experiment, ExperimentConfig, Manifest};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Verdict::{Fail, Pass, Skip};

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn verdict(r: Result<String, String>) -> Verdict {
    match r {
        Ok(d) => Pass(d),
        Err(e) => Fail(e),
    }
}

fn random_point(rng: &mut Pcg, d: usize) -> CholeskyPoint {
    let strict: Vec<f64> = (0..strict_len(d)).map(|_| normal(rng)).collect();
    let log_diag: Vec<f64> = (0..d).map(|_| 0.5 * normal(rng)).collect();
    CholeskyPoint::from_parts(d, &strict, &log_diag).unwrap()
}

fn geometry_axioms() -> Verdict {
    verdict((|| {
        let mut rng = seeded(9001);
        let mut worst_self: f64 = 0.0;
        let mut worst_slack = f64::NEG_INFINITY;
        for i in 0..1000 {
            let d = 2 + i % 21;
            let (x, y, z) = (random_point(&mut rng, d), random_point(&mut rng, d), random_point(&mut rng, d));
            let dist = |a: &CholeskyPoint, b: &CholeskyPoint| geodesic_distance(a, b).unwrap();
            let (xy, yx) = (dist(&x, &y), dist(&y, &x));
            ensure(xy.to_bits() == yx.to_bits(), || format!("triple {i}: d(x,y) {xy:e} != d(y,x) {yx:e}"))?;
            let xx = dist(&x, &x);
            worst_self = worst_self.max(xx);
            ensure(xx <= 1e-12, || format!("triple {i}: d(x,x) = {xx:e}"))?;
            let slack = dist(&x, &z) - xy - dist(&y, &z);
            worst_slack = worst_slack.max(slack);
            ensure(slack <= 1e-12, || format!("triple {i}: triangle violated by {slack:e}"))?;
        }
        Ok(format!("1000 triples, max d(x,x) {worst_self:.1e}, max triangle excess {worst_slack:.1e}"))
    })())
}

fn frechet_objective(points: &[CholeskyPoint], m: &CholeskyPoint) -> f64 {
    points.iter().map(|p| geodesic_distance(m, p).unwrap().powi(2)).sum()
}

fn frechet_mean_matches_descent() -> Verdict {
    verdict((|| {
        let mut rng = seeded(9002);
        let mut worst: f64 = 0.0;
        for set in 0..10 {
            let d = 2 + set % 5;
            let n = 5 + 2 * set;
            let points: Vec<CholeskyPoint> = (0..n).map(|_| random_point(&mut rng, d)).collect();
            let closed = frechet_mean_uniform(&points).unwrap();
            let f = |t: &[f64]| frechet_objective(&points, &chart_exp(&TriangularTangent::from_vec(d, t).unwrap()));
            let mut t = chart_log(&CholeskyPoint::identity(d)).to_vec();
            let h = 1e-6;
            let lr = 0.25 / n as f64;
            for _ in 0..200 {
                let grad: Vec<f64> = (0..t.len())
                    .map(|k| {
                        let mut up = t.clone();
                        let mut dn = t.clone();
                        up[k] += h;
                        dn[k] -= h;
                        (f(&up) - f(&dn)) / (2.0 * h)
                    })
                    .collect();
                for (tk, gk) in t.iter_mut().zip(&grad) {
                    *tk -= lr * gk;
                }
            }
            let descent = f(&t);
            let gap = (frechet_objective(&points, &closed) - descent) / descent;
            worst = worst.max(gap.abs());
            ensure(gap.abs() <= 1e-6, || format!("set {set}: relative objective gap {gap:e}"))?;
        }
        Ok(format!("10 sets, max relative gap {worst:.1e}"))
    })())
}

fn regularization() -> Verdict {
    verdict((|| {
        let mut rng = seeded(9003);
        let mut min_eig = f64::INFINITY;
        for i in 0..100 {
            let c = 4 + i % 8;
            let w = 2 + i % (c - 2);
            let e = edge_matrix(&normal_matrix(&mut rng, c, w), false).unwrap();
            let same = regularize(&e, 0.0).unwrap();
            ensure(
                same.matrix().iter().zip(e.matrix().iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
                || format!("matrix {i}: eta = 0 changed the input"),
            )?;
            for eta in [0.1, 0.15, 0.2] {
                let r = regularize(&e, eta).unwrap();
                let tr = e.trace();
                for a in 0..c {
                    for b in 0..c {
                        let want = (1.0 - eta) * e.get(a, b) + if a == b { eta * tr } else { 0.0 };
                        ensure((r.get(a, b) - want).abs() <= 1e-12 * tr, || {
                            format!("matrix {i}, eta {eta}: entry ({a},{b}) {} vs {want}", r.get(a, b))
                        })?;
                    }
                }
                let lo = sym_eig(&r).unwrap().values.min();
                min_eig = min_eig.min(lo / tr);
                ensure(lo > 0.0, || format!("matrix {i}, eta {eta}: min eigenvalue {lo:e}"))?;
            }
        }
        Ok(format!("100 rank-deficient Gram matrices, min eigenvalue/trace {min_eig:.3}"))
    })())
}

fn gradient_checks() -> Verdict {
    let checks: [(&str, fn()); 10] = [
        ("bimap", gradchecks::bimap_input_and_weight),
        ("reeig/logeig", gradchecks::reeig_and_logeig),
        ("head", gradchecks::classifier_head),
        ("spdnet", gradchecks::spdnet_end_to_end),
        ("gates", gradchecks::gru_gates),
        ("candidate", gradchecks::gru_candidate),
        ("output_combine", gradchecks::gru_output_combine),
        ("ode_evolve", gradchecks::gru_ode_evolve),
        ("cholesky", gradchecks::cholesky_pullback),
        ("gru model", gradchecks::gru_model_end_to_end),
    ];
    for (name, f) in checks {
        if let Err(e) = panic::catch_unwind(f) {
            return Fail(format!("{name}: {}", panic_message(e)));
        }
    }
    Pass("10 layer groups at d = 4 and 6".into())
}

fn stiefel_invariant() -> Verdict {
    verdict((|| {
        let mut rng = seeded(9005);
        let mut worst: f64 = 0.0;
        for (rows, cols) in [(22, 22), (8, 5), (6, 3), (4, 4)] {
            let mut w = StiefelParameter::new(random_stiefel(&mut rng, rows, cols)).unwrap();
            for step in 0..100 {
                let g = normal_matrix(&mut rng, rows, cols);
                w = stiefel_step(&w, &stiefel_grad(&g, w.matrix()), 0.1).unwrap();
                let err = orthogonality_error(w.matrix());
                worst = worst.max(err);
                ensure(err <= 1e-6, || format!("{rows}x{cols} step {step}: ‖WᵀW − I‖∞ = {err:e}"))?;
            }
        }
        Ok(format!("4 shapes × 100 steps, max ‖WᵀW − I‖∞ {worst:.1e}"))
    })())
}

fn reeig_floor() -> Verdict {
    verdict((|| {
        let mut rng = seeded(9006);
        for i in 0..100 {
            let d = 2 + i % 9;
            let eps = [1e-4, 1e-2, 0.5][i % 3];
            let x = random_symmetric(&mut rng, d);
            let lo = sym_eig(&reeig_forward(&x, eps).unwrap()).unwrap().values.min();
            ensure(lo >= eps - 1e-12, || format!("input {i}: min eigenvalue {lo:e} below eps {eps:e}"))?;
        }
        Ok("100 random symmetric inputs".into())
    })())
}

fn mdm_synthetic() -> Verdict {
    verdict((|| {
        let mut accs = Vec::new();
        for seed in 0..5 {
            let mut rng = seeded(9700 + seed);
            let mut data = chart_clusters(&mut rng, 5, 3, 40, 1.0, 0.25).unwrap();
            shuffle(&mut rng, &mut data);
            let test = data.split_off(60);
            let model = mdm_fit(&data).unwrap();
            let hits = test.iter().filter(|(p, c)| mdm_predict(&model, p).unwrap() == *c).count();
            let acc = hits as f64 / test.len() as f64;
            ensure(acc >= 0.95, || format!("seed {seed}: held-out accuracy {acc}"))?;
            accs.push(acc);
        }
        Ok(format!("held-out accuracy {accs:?}"))
    })())
}

fn kmedoids_synthetic() -> Verdict {
    verdict((|| {
        let mut aris = Vec::new();
        for seed in 0..5 {
            let data = chart_clusters(&mut seeded(9800 + seed), 4, 3, 20, 2.0, 0.1).unwrap();
            let pts: Vec<_> = data.iter().map(|(p, _)| p.clone()).collect();
            let labels: Vec<usize> = data.iter().map(|(_, c)| *c).collect();
            let d = pairwise_distances(&pts).unwrap();
            let ari = adjusted_rand_index(&k_medoids(&d, 3, seed).unwrap().assignments, &labels).unwrap();
            ensure(ari >= 0.9, || format!("seed {seed}: ARI {ari}"))?;
            aris.push((ari * 1000.0).round() / 1000.0);

            let one = k_medoids(&d, 1, seed).unwrap();
            let cost = |i: usize| (0..d.len()).map(|j| d.get(i, j)).sum::<f64>();
            let best = (0..d.len()).map(cost).fold(f64::INFINITY, f64::min);
            let got = cost(one.medoids[0]);
            ensure(got <= best, || format!("seed {seed}: k=1 medoid cost {got} vs brute-force {best}"))?;
        }
        Ok(format!("ARI {aris:?}; k=1 medoid is the brute-force minimizer"))
    })())
}

fn spdnet_overfit() -> Verdict {
    verdict((|| {
        let data = spd_clusters(&mut seeded(9009), 6, 5, 10, 0.6, 0.1).unwrap();
        ensure(data.len() == 50, || format!("{} samples", data.len()))?;
        let config = SpdNetConfig { dims: vec![6, 6], classes: 5, learning_rate: 0.1, epochs: 300, seed: 1, ..Default::default() };
        let (_, report) = spdnet_train(&config, &data, &[]).unwrap();
        let first = report.epochs.iter().position(|e| e.train_accuracy == 1.0);
        let first = first.ok_or_else(|| {
            format!("train accuracy {} after 300 epochs", report.epochs.last().unwrap().train_accuracy)
        })?;
        let params = SpdNetConfig::default().parameter_count();
        ensure((5000..=11000).contains(&params), || format!("default parameter count {params}"))?;
        Ok(format!("train accuracy 1.0 at epoch {first}; default config has {params} parameters"))
    })())
}

fn manifold_gru() -> Verdict {
    verdict((|| {
        let mut accs = Vec::new();
        for seed in 0..5 {
            let mut rng = seeded(9100 + seed);
            let mut data = drift_sequences(&mut rng, 4, 3, 30, 6, 0.25).unwrap();
            shuffle(&mut rng, &mut data);
            let test = data.split_off(60);
            let config = GruModelConfig {
                frontend_dims: vec![4, 4],
                ode_hidden: 12,
                ode_steps: 10,
                classes: 3,
                learning_rate: 0.5,
                epochs: 60,
                seed,
                ..Default::default()
            };
            let (model, _) = gru_train(&config, &data, &data).unwrap();
            let acc = model.evaluate(&test).unwrap();
            ensure(acc >= 0.9, || format!("seed {seed}: held-out accuracy {acc}"))?;
            accs.push((acc * 1000.0).round() / 1000.0);
            for (k, (seq, _)) in test.iter().enumerate() {
                for (t, s) in model.forward_trace(seq).unwrap().states.iter().enumerate() {
                    let p = s.to_point().map_err(|e| format!("seed {seed} seq {k} step {t}: {e}"))?;
                    let l = p.matrix();
                    let valid = l.iter().all(|v| v.is_finite())
                        && (0..l.nrows()).all(|i| l[(i, i)] > 0.0 && (i + 1..l.ncols()).all(|j| l[(i, j)] == 0.0));
                    ensure(valid, || format!("seed {seed} seq {k} step {t}: invalid Cholesky factor"))?;
                }
            }
        }

        let mut rng = seeded(9101);
        let a = random_spd(&mut rng, 5).scale(-0.5);
        let x0 = DVector::from_fn(5, |_, _| normal(&mut rng));
        let exact = expm(&a).unwrap().matrix() * &x0;
        let err = |steps| (rk4_integrate(|x| a.matrix() * x, &x0, 0.0, 1.0, steps).unwrap() - &exact).norm();
        let ratio = err(10) / err(20);
        ensure((14.0..=18.0).contains(&ratio), || format!("RK4 error ratio {ratio} when halving the step"))?;
        Ok(format!("held-out accuracy {accs:?}; states valid; RK4 halving ratio {ratio:.2}"))
    })())
}

/// SPD matrix whose diagonal peaks at `node`, with small off-diagonal noise.
fn dominated_edge(rng: &mut Pcg, d: usize, node: usize) -> SymMatrix {
    let mut m = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 + 0.1 * i as f64 } else { 0.0 });
    m[(node, node)] = 10.0;
    m += random_spd(rng, d).matrix() * 0.01;
    SymMatrix::new(m).unwrap()
}

fn importance_recovery() -> Verdict {
    verdict((|| {
        let mut rng = seeded(9011);
        let mut worst: f64 = 0.0;
        for trial in 0..20 {
            let d = 4 + trial % 19;
            let e = random_spd(&mut rng, d);
            let kappa = DVector::from_fn(d, |i, _| (i as f64 + 1.0) * if i % 2 == 0 { 1.0 } else { -1.0 });
            let got = lstsq(e.matrix(), &(e.matrix() * &kappa)).unwrap();
            let err = (&got - &kappa).amax();
            worst = worst.max(err);
            ensure(err <= 1e-8, || format!("trial {trial}: κ recovered to {err:e}"))?;
        }

        let q = BasisMatrix::new(DMatrix::identity(8, 8)).unwrap();
        let edges: Vec<SymMatrix> = (0..10).map(|_| dominated_edge(&mut rng, 8, 5)).collect();
        let report = electrode_importance(&edges, &q, ColumnSelection::MeanEdge).unwrap();
        ensure(report.rank1_frequencies() == vec![(5, 10)], || {
            format!("all-node-5 fixture gave {:?}", report.rank1_frequencies())
        })?;
        let edges: Vec<SymMatrix> =
            (0..10).map(|i| dominated_edge(&mut rng, 8, if i < 6 { 2 } else { 5 })).collect();
        let report = electrode_importance(&edges, &q, ColumnSelection::PerTrial).unwrap();
        ensure(report.rank1_frequencies() == vec![(2, 6), (5, 4)], || {
            format!("6/4 fixture gave {:?}", report.rank1_frequencies())
        })?;
        let top3 = &report.top3_counts;
        ensure(top3.iter().sum::<usize>() == 30 && top3[2] >= 6 && top3[5] >= 4, || {
            format!("top-3 counts {:?}", report.top3_counts)
        })?;
        Ok(format!("max κ error {worst:.1e}; aggregation fixtures match"))
    })())
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn run_binary(config: &Path, out: &Path) -> Result<Vec<u8>, String> {
    let f = fixtures();
    let status = Command::new(env!("CARGO_BIN_EXE_spdsemg"))
        .arg("run")
        .arg("--config")
        .arg(config)
        .arg("--manifest")
        .arg(f.join("s1.json"))
        .arg("--manifest")
        .arg(f.join("s2.json"))
        .arg("--out")
        .arg(out)
        .status()
        .map_err(|e| e.to_string())?;
    ensure(status.success(), || format!("run exited with {status}"))?;
    std::fs::read(out).map_err(|e| e.to_string())
}

fn determinism() -> Verdict {
    verdict((|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut sizes = Vec::new();
        for name in ["mdm", "spdnet", "gru"] {
            let config = fixtures().join(format!("{name}.json"));
            let a = run_binary(&config, &dir.path().join(format!("{name}-a.json")))?;
            let b = run_binary(&config, &dir.path().join(format!("{name}-b.json")))?;
            ensure(a == b, || format!("{name}: metrics JSON differs between runs"))?;
            sizes.push(format!("{name} {} bytes", a.len()));
        }
        Ok(format!("identical metrics: {}", sizes.join(", ")))
    })())
}

fn dataset_smoke() -> Verdict {
    let Some(root) = std::env::var_os(DATA_ROOT_ENV) else {
        return Skip(format!("{DATA_ROOT_ENV} not set"));
    };
    let dir = Path::new(&root).join("audible-words");
    let mut paths: Vec<PathBuf> = match std::fs::read_dir(&dir) {
        Ok(it) => it
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => return Skip(format!("{} not found", dir.display())),
    };
    if paths.is_empty() {
        return Skip(format!("no manifests in {}", dir.display()));
    }
    paths.sort();
    verdict((|| {
        let manifests = paths.iter().map(|p| Manifest::load(p)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
        let config = ExperimentConfig::preset("words-1.5s").map_err(|e| e.to_string())?;
        let data = build_dataset(&manifests, &config.features()).map_err(|e| e.to_string())?;
        let report = run_experiment(&config, &data).map_err(|e| e.to_string())?.report;
        let classes = report.labels.len();
        ensure(report.accuracy >= 0.2, || {
            format!("accuracy {:.3} over {} test trials ({classes} classes)", report.accuracy, report.test_items)
        })?;
        Ok(format!(
            "accuracy {:.3} over {} test trials, {classes} classes, chance {:.3}",
            report.accuracy,
            report.test_items,
            1.0 / classes as f64
        ))
    })())
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

fn main() {
    let criteria: [(&str, Option<u64>, fn() -> Verdict); 13] = [
        ("geometry axioms", Some(10), geometry_axioms),
        ("Fréchet mean vs descent", Some(30), frechet_mean_matches_descent),
        ("regularization", None, regularization),
        ("gradient checks", Some(120), gradient_checks),
        ("Stiefel invariant", None, stiefel_invariant),
        ("ReEig floor", None, reeig_floor),
        ("MDM synthetic", None, mdm_synthetic),
        ("k-medoids synthetic", None, kmedoids_synthetic),
        ("SPDNet overfit", None, spdnet_overfit),
        ("manifold GRU", None, manifold_gru),
        ("importance recovery", None, importance_recovery),
        ("determinism", None, determinism),
        ("dataset smoke test", Some(600), dataset_smoke),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let mut v = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| Fail(panic_message(e)));
        let elapsed = start.elapsed();
        if let (Pass(_), Some(b)) = (&v, budget) {
            if elapsed > Duration::from_secs(b) {
                v = Fail(format!("took {:.1} s, budget {b} s", elapsed.as_secs_f64()));
            }
        }
        let (tag, detail) = match v {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!("criterion {:2} {tag} {name}: {detail} [{:.2} s]", i + 1, elapsed.as_secs_f64());
    }
    let _ = panic::take_hook();
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
