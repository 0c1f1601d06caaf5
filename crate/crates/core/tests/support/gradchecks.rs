//! Central finite-difference checks of every hand-written backward pass.
//! Each check panics on the first mismatch.
//!
//! Each check compares the analytic directional derivative `⟨∇f, v⟩` with
//! `(f(x + hv) − f(x − hv)) / 2h` for a few random directions, `h = 1e-5`.

use nalgebra::{DMatrix, DVector};
use spdsemg::geometry::{lower_indices, strict_len, to_cholesky, tri_len};
use spdsemg::gru::{
    candidate_eval, candidate_vjp, cholesky_backward, gate_eval, gate_vjp, ode_evolve_vjp,
    output_combine_eval, output_combine_vjp, Gate, GateParams, GruModel, GruModelConfig, GruParams,
    OdeField, SplitLog,
};
use spdsemg::linalg::{gram_schmidt, SymMatrix};
use spdsemg::nn::{halfvec, softmax_cross_entropy, LinearHead};
use spdsemg::rng::{normal, random_spd, random_stiefel, random_symmetric, seeded, Pcg};
use spdsemg::spdnet::{layer_backward, Layer, SpdNetConfig, SpdNetModel, StiefelParameter};

const H: f64 = 1e-5;
const REL: f64 = 1e-4;

fn randn(rng: &mut Pcg, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], a: f64, v: &[f64]) -> Vec<f64> {
    x.iter().zip(v).map(|(xi, vi)| xi + a * vi).collect()
}

fn assert_close(name: &str, fd: f64, an: f64) {
    let err = (fd - an).abs();
    assert!(
        err <= REL * fd.abs().max(an.abs()) + 1e-9,
        "{name}: finite difference {fd:.10e} vs analytic {an:.10e}"
    );
}

/// Directional checks of `grad` for scalar `f` at `x`.
fn check(name: &str, rng: &mut Pcg, x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) {
    assert_eq!(x.len(), grad.len(), "{name}: gradient length");
    for _ in 0..3 {
        let v = randn(rng, x.len());
        let fd = (f(&axpy(x, H, &v)) - f(&axpy(x, -H, &v))) / (2.0 * H);
        assert_close(name, fd, dot(grad, &v));
    }
}

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

fn sym_weight(rng: &mut Pcg, d: usize) -> SymMatrix {
    random_symmetric(rng, d)
}

pub fn bimap_input_and_weight() {
    let mut rng = seeded(1001);
    for d in [4, 6] {
        let e = random_spd(&mut rng, d);
        let w = random_stiefel(&mut rng, d, d - 1);
        let g = sym_weight(&mut rng, d - 1);
        let layer = Layer::BiMap(StiefelParameter::new(w.clone()).unwrap());
        let (_, cache) = layer.forward(&e).unwrap();
        let (g_in, g_w) = layer_backward(&layer, &cache, &g).unwrap();
        let g_w = g_w.unwrap();
        check("bimap input", &mut rng, &flat(e.matrix()), &flat(g_in.matrix()), |x| {
            let m = symmetrize_raw(d, x);
            g.frobenius_inner(&SymMatrix::new(w.transpose() * m * &w).unwrap())
        });
        check("bimap weight", &mut rng, &flat(&w), &flat(&g_w), |x| {
            let wm = DMatrix::from_column_slice(d, d - 1, x);
            g.frobenius_inner(&SymMatrix::new(wm.transpose() * e.matrix() * &wm).unwrap())
        });
    }
}

/// Symmetric part of a raw perturbation; the loss only sees symmetric input.
fn symmetrize_raw(d: usize, x: &[f64]) -> DMatrix<f64> {
    let m = DMatrix::from_column_slice(d, d, x);
    (&m + m.transpose()) * 0.5
}

pub fn reeig_and_logeig() {
    let mut rng = seeded(1002);
    for d in [4, 6] {
        let g = sym_weight(&mut rng, d);
        let x = random_symmetric(&mut rng, d);
        let layer = Layer::ReEig { eps: 0.05 };
        let (_, cache) = layer.forward(&x).unwrap();
        let (g_in, _) = layer_backward(&layer, &cache, &g).unwrap();
        check("reeig", &mut rng, &flat(x.matrix()), &flat(g_in.matrix()), |v| {
            let m = SymMatrix::new(symmetrize_raw(d, v)).unwrap();
            g.frobenius_inner(&layer.forward(&m).unwrap().0)
        });

        let x = random_spd(&mut rng, d);
        let layer = Layer::LogEig;
        let (_, cache) = layer.forward(&x).unwrap();
        let (g_in, _) = layer_backward(&layer, &cache, &g).unwrap();
        check("logeig", &mut rng, &flat(x.matrix()), &flat(g_in.matrix()), |v| {
            let m = SymMatrix::new(symmetrize_raw(d, v)).unwrap();
            g.frobenius_inner(&layer.forward(&m).unwrap().0)
        });
    }
}

pub fn classifier_head() {
    let mut rng = seeded(1003);
    for d in [4, 6] {
        let n = tri_len(d);
        let head = LinearHead::init(&mut rng, n, 5);
        let m = random_symmetric(&mut rng, d);
        let x = halfvec(&m);
        let logits = head.forward(&x).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, 2);
        let (gx, gw, gb) = head.backward(&x, &g);
        let loss = |h: &LinearHead, x: &DVector<f64>| softmax_cross_entropy(&h.forward(x).unwrap(), 2).0;
        check("head input", &mut rng, x.as_slice(), gx.as_slice(), |v| {
            loss(&head, &DVector::from_column_slice(v))
        });
        check("head weights", &mut rng, &flat(&head.weights), &flat(&gw), |v| {
            let mut h = head.clone();
            h.weights = DMatrix::from_column_slice(5, n, v);
            loss(&h, &x)
        });
        check("head bias", &mut rng, head.bias.as_slice(), gb.as_slice(), |v| {
            let mut h = head.clone();
            h.bias = DVector::from_column_slice(v);
            loss(&h, &x)
        });
    }
}

/// Derivative along the Gram-Schmidt retraction equals `⟨G, V⟩` for a
/// tangent direction `V`.
fn tangent(rng: &mut Pcg, w: &DMatrix<f64>) -> DMatrix<f64> {
    let a = DMatrix::from_fn(w.nrows(), w.ncols(), |_, _| normal(rng));
    let wta = w.transpose() * &a;
    &a - w * ((&wta + wta.transpose()) * 0.5)
}

pub fn spdnet_end_to_end() {
    let mut rng = seeded(1004);
    for d in [4, 6] {
        let config = SpdNetConfig { dims: vec![d, d - 1, d - 2], classes: 3, seed: d as u64, ..Default::default() };
        let model = SpdNetModel::new(config).unwrap();
        let x = random_spd(&mut rng, d);
        let label = 1;
        let trace = model.forward_trace(&x).unwrap();
        let (_, g_logits) = softmax_cross_entropy(&trace.logits, label);
        let grads = model.backward(&trace, &g_logits).unwrap();
        let loss = |m: &SpdNetModel| softmax_cross_entropy(&m.forward(&x).unwrap(), label).0;

        let bimap_slots: Vec<usize> =
            model.layers.iter().enumerate().filter(|(_, l)| matches!(l, Layer::BiMap(_))).map(|(i, _)| i).collect();
        for (k, &slot) in bimap_slots.iter().enumerate() {
            let Layer::BiMap(w) = &model.layers[slot] else { unreachable!() };
            let w = w.matrix().clone();
            for _ in 0..3 {
                let v = tangent(&mut rng, &w);
                let at = |s: f64| {
                    let mut m = model.clone();
                    m.layers[slot] = Layer::BiMap(StiefelParameter::new(gram_schmidt(&(&w + &v * s)).unwrap()).unwrap());
                    loss(&m)
                };
                let fd = (at(H) - at(-H)) / (2.0 * H);
                assert_close("spdnet bimap", fd, grads.bimap[k].dot(&v));
            }
        }
        check("spdnet head", &mut rng, &flat(&model.head.weights), &flat(&grads.head_weights), |v| {
            let mut m = model.clone();
            m.head.weights = DMatrix::from_column_slice(3, model.head.inputs(), v);
            loss(&m)
        });
        check("spdnet bias", &mut rng, model.head.bias.as_slice(), grads.head_bias.as_slice(), |v| {
            let mut m = model.clone();
            m.head.bias = DVector::from_column_slice(v);
            loss(&m)
        });
    }
}

fn random_split(rng: &mut Pcg, d: usize) -> SplitLog {
    SplitLog {
        strict: DVector::from_vec(randn(rng, strict_len(d))),
        log_diag: DVector::from_vec(randn(rng, d)).map(|v| 0.5 * v),
    }
}

fn split_flat(s: &SplitLog) -> Vec<f64> {
    s.pack().as_slice().to_vec()
}

fn split_from(d: usize, v: &[f64]) -> SplitLog {
    SplitLog::unpack(d, &DVector::from_column_slice(v))
}

fn gate_flat(g: &Gate) -> Vec<f64> {
    [g.strict.as_slice(), g.diag.as_slice()].concat()
}

fn gate_from(d: usize, v: &[f64]) -> Gate {
    let m = strict_len(d);
    Gate { strict: DVector::from_column_slice(&v[..m]), diag: DVector::from_column_slice(&v[m..]) }
}

fn random_gate_params(rng: &mut Pcg, d: usize) -> GateParams {
    let mut p = GruParams::zeros(d);
    p.set_flat(&randn(rng, GruParams::parameter_count(d)).iter().map(|v| 0.5 * v).collect::<Vec<_>>());
    p.update
}

fn gate_params_flat(p: &GateParams) -> Vec<f64> {
    let d = p.beta.len();
    let mut all = GruParams::zeros(d);
    all.update = p.clone();
    all.to_flat()[..3 * tri_len(d)].to_vec()
}

fn gate_params_from(d: usize, v: &[f64]) -> GateParams {
    let mut all = GruParams::zeros(d);
    let mut full = v.to_vec();
    full.resize(GruParams::parameter_count(d), 0.0);
    all.set_flat(&full);
    all.update
}

pub fn gru_gates() {
    let mut rng = seeded(1005);
    for d in [4, 6] {
        let l = random_split(&mut rng, d);
        let h = random_split(&mut rng, d);
        let p = random_gate_params(&mut rng, d);
        let g = gate_from(d, &randn(&mut rng, tri_len(d)));
        let gf = gate_flat(&g);
        let (gl, gh, gp) = gate_vjp(&l, &h, &p, &g);
        check("gate l", &mut rng, &split_flat(&l), &split_flat(&gl), |v| {
            dot(&gf, &gate_flat(&gate_eval(&split_from(d, v), &h, &p)))
        });
        check("gate h", &mut rng, &split_flat(&h), &split_flat(&gh), |v| {
            dot(&gf, &gate_flat(&gate_eval(&l, &split_from(d, v), &p)))
        });
        check("gate params", &mut rng, &gate_params_flat(&p), &gate_params_flat(&gp), |v| {
            dot(&gf, &gate_flat(&gate_eval(&l, &h, &gate_params_from(d, v))))
        });
    }
}

pub fn gru_candidate() {
    let mut rng = seeded(1006);
    for d in [4, 6] {
        let l = random_split(&mut rng, d);
        let h = random_split(&mut rng, d);
        let r = gate_eval(&l, &h, &random_gate_params(&mut rng, d));
        let p = random_gate_params(&mut rng, d);
        let g = random_split(&mut rng, d);
        let gf = split_flat(&g);
        let (gl, gr, gh, gp) = candidate_vjp(&l, &r, &h, &p, &g);
        check("candidate l", &mut rng, &split_flat(&l), &split_flat(&gl), |v| {
            dot(&gf, &split_flat(&candidate_eval(&split_from(d, v), &r, &h, &p)))
        });
        check("candidate r", &mut rng, &gate_flat(&r), &gate_flat(&gr), |v| {
            dot(&gf, &split_flat(&candidate_eval(&l, &gate_from(d, v), &h, &p)))
        });
        check("candidate h", &mut rng, &split_flat(&h), &split_flat(&gh), |v| {
            dot(&gf, &split_flat(&candidate_eval(&l, &r, &split_from(d, v), &p)))
        });
        check("candidate params", &mut rng, &gate_params_flat(&p), &gate_params_flat(&gp), |v| {
            dot(&gf, &split_flat(&candidate_eval(&l, &r, &h, &gate_params_from(d, v))))
        });
    }
}

pub fn gru_output_combine() {
    let mut rng = seeded(1007);
    for d in [4, 6] {
        let z = gate_eval(&random_split(&mut rng, d), &random_split(&mut rng, d), &random_gate_params(&mut rng, d));
        let c = random_split(&mut rng, d);
        let h = random_split(&mut rng, d);
        let g = random_split(&mut rng, d);
        let gf = split_flat(&g);
        let (gz, gc, gh) = output_combine_vjp(&z, &c, &h, &g);
        check("combine z", &mut rng, &gate_flat(&z), &gate_flat(&gz), |v| {
            dot(&gf, &split_flat(&output_combine_eval(&gate_from(d, v), &c, &h)))
        });
        check("combine candidate", &mut rng, &split_flat(&c), &split_flat(&gc), |v| {
            dot(&gf, &split_flat(&output_combine_eval(&z, &split_from(d, v), &h)))
        });
        check("combine h", &mut rng, &split_flat(&h), &split_flat(&gh), |v| {
            dot(&gf, &split_flat(&output_combine_eval(&z, &c, &split_from(d, v))))
        });
    }
}

fn flow(field: &OdeField, x0: &[f64], steps: usize) -> DVector<f64> {
    spdsemg::gru::rk4_integrate(|x| field.eval(x), &DVector::from_column_slice(x0), 0.0, 1.0, steps).unwrap()
}

pub fn gru_ode_evolve() {
    let mut rng = seeded(1008);
    for d in [4, 6] {
        let n = tri_len(d);
        let field = OdeField::init(&mut rng, n, 7);
        let mut field = field;
        field.w2 *= 10.0;
        let x0 = randn(&mut rng, n);
        let g = randn(&mut rng, n);
        let (gx, gf) = ode_evolve_vjp(&DVector::from_vec(x0.clone()), &field, 0.0, 1.0, 10, &DVector::from_vec(g.clone())).unwrap();
        check("ode state", &mut rng, &x0, gx.as_slice(), |v| dot(&g, flow(&field, v, 10).as_slice()));
        check("ode field", &mut rng, &field.to_flat(), &gf.to_flat(), |v| {
            let mut f = field.clone();
            f.set_flat(v);
            dot(&g, flow(&f, &x0, 10).as_slice())
        });
    }
}

pub fn cholesky_pullback() {
    let mut rng = seeded(1009);
    for d in [4, 6] {
        let x = random_spd(&mut rng, d);
        let l = to_cholesky(&x).unwrap().matrix().clone();
        let mut g_l = DMatrix::zeros(d, d);
        for (i, j) in lower_indices(d) {
            g_l[(i, j)] = normal(&mut rng);
        }
        let g_x = cholesky_backward(&l, &g_l).unwrap();
        check("cholesky", &mut rng, &flat(x.matrix()), &flat(g_x.matrix()), |v| {
            let m = SymMatrix::new(symmetrize_raw(d, v)).unwrap();
            g_l.dot(to_cholesky(&m).unwrap().matrix())
        });
    }
}

pub fn gru_model_end_to_end() {
    let mut rng = seeded(1010);
    for d in [4, 6] {
        let config = GruModelConfig {
            frontend_dims: vec![d + 1, d],
            ode_hidden: 6,
            ode_steps: 3,
            classes: 3,
            seed: d as u64,
            ..Default::default()
        };
        let mut model = GruModel::new(config).unwrap();
        model.field.w2 *= 10.0;
        let seq: Vec<SymMatrix> = (0..3).map(|_| random_spd(&mut rng, d + 1)).collect();
        let label = 2;
        let (_, grads) = model.sequence_grads(&seq, label).unwrap();
        let loss = |m: &GruModel| softmax_cross_entropy(&m.forward(&seq).unwrap(), label).0;
        check("gru parameters", &mut rng, &model.euclidean_params(), &grads.euclidean(), |v| {
            let mut m = model.clone();
            m.set_euclidean_params(v);
            loss(&m)
        });
        let Layer::BiMap(w) = &model.frontend[0] else { unreachable!() };
        let w = w.matrix().clone();
        for _ in 0..3 {
            let v = tangent(&mut rng, &w);
            let at = |s: f64| {
                let mut m = model.clone();
                m.frontend[0] = Layer::BiMap(StiefelParameter::new(gram_schmidt(&(&w + &v * s)).unwrap()).unwrap());
                loss(&m)
            };
            let fd = (at(H) - at(-H)) / (2.0 * H);
            assert_close("gru frontend", fd, grads.frontend[0].dot(&v));
        }
    }
}
