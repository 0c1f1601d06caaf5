use nalgebra::DMatrix;
use proptest::prelude::*;
use spdsemg::analysis::{basis_angle, diag_ratio, group_collapse, topk_accuracy, BasisMatrix, PhonemeGroups};
use spdsemg::geometry::{chart_exp, chart_log, frechet_mean, geodesic_distance, strict_len, to_cholesky};
use spdsemg::graph::{edge_matrix, regularize};
use spdsemg::linalg::{orthogonality_error, sym_eig};
use spdsemg::rng::{normal, normal_matrix, random_spd, random_stiefel, seeded, Pcg};
use spdsemg::spdnet::{stiefel_grad, stiefel_step, StiefelParameter};
use spdsemg::CholeskyPoint;

fn point(rng: &mut Pcg, d: usize) -> CholeskyPoint {
    let strict: Vec<f64> = (0..strict_len(d)).map(|_| normal(rng)).collect();
    let log_diag: Vec<f64> = (0..d).map(|_| 0.5 * normal(rng)).collect();
    CholeskyPoint::from_parts(d, &strict, &log_diag).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_axioms(d in 1usize..9, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let (x, y, z) = (point(&mut rng, d), point(&mut rng, d), point(&mut rng, d));
        let dist = |a, b| geodesic_distance(a, b).unwrap();
        prop_assert_eq!(dist(&x, &y), dist(&y, &x));
        prop_assert!(dist(&x, &x) <= 1e-12);
        prop_assert!(dist(&x, &z) <= dist(&x, &y) + dist(&y, &z) + 1e-12);
    }

    #[test]
    fn chart_round_trip(d in 1usize..9, seed in any::<u64>()) {
        let x = point(&mut seeded(seed), d);
        let back = chart_exp(&chart_log(&x));
        prop_assert!((back.matrix() - x.matrix()).amax() <= 1e-12 * x.matrix().amax().max(1.0));
    }

    #[test]
    fn frechet_mean_ignores_order_and_fixes_repeats(d in 1usize..6, n in 2usize..8, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let pts: Vec<CholeskyPoint> = (0..n).map(|_| point(&mut rng, d)).collect();
        let total = (n * (n + 1) / 2) as f64;
        let w: Vec<f64> = (0..n).map(|k| n as f64 * (1.0 + k as f64) / total).collect();
        let m = frechet_mean(&pts, &w).unwrap();
        let (rp, rw): (Vec<_>, Vec<_>) = pts.iter().cloned().zip(w.iter().copied()).rev().unzip();
        let r = frechet_mean(&rp, &rw).unwrap();
        prop_assert_eq!(m.matrix(), r.matrix());
        let same = frechet_mean(&vec![pts[0].clone(); n], &w).unwrap();
        prop_assert!(geodesic_distance(&same, &pts[0]).unwrap() <= 1e-12);
    }

    #[test]
    fn regularized_gram_is_spd(c in 3usize..10, eta in 0.01f64..0.99, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let e = edge_matrix(&normal_matrix(&mut rng, c, 2), false).unwrap();
        let r = regularize(&e, eta).unwrap();
        prop_assert!(sym_eig(&r).unwrap().values.min() > 0.0);
        prop_assert!(to_cholesky(&r).is_ok());
    }

    #[test]
    fn topk_is_monotone(classes in 2usize..10, rows in 1usize..30, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let scores: Vec<Vec<f64>> = (0..rows).map(|_| (0..classes).map(|_| normal(&mut rng)).collect()).collect();
        let labels: Vec<usize> = (0..rows).map(|i| (i * 7 + 3) % classes).collect();
        let accs: Vec<f64> = (1..=classes).map(|k| topk_accuracy(&scores, &labels, k).unwrap()).collect();
        prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(accs[classes - 1], 1.0);
    }

    #[test]
    fn collapse_bounds(counts in proptest::collection::vec(0u64..5, 23 * 23)) {
        let labels = PhonemeGroups::consonant_labels();
        let confusion: Vec<Vec<u64>> = counts.chunks(23).map(|r| r.to_vec()).collect();
        prop_assume!(counts.iter().sum::<u64>() > 0);
        let singles = group_collapse(&confusion, &labels, &PhonemeGroups::singleton_groups(&labels).unwrap()).unwrap();
        prop_assert_eq!(singles.collapsed_accuracy, singles.raw_accuracy);
        let grouped = group_collapse(&confusion, &labels, &PhonemeGroups::articulatory()).unwrap();
        prop_assert!(grouped.collapsed_accuracy >= grouped.raw_accuracy);
        prop_assert_eq!(grouped.raw_accuracy, singles.raw_accuracy);
    }

    #[test]
    fn basis_diagnostics(d in 2usize..9, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let e = random_spd(&mut rng, d);
        let eig = BasisMatrix::new(sym_eig(&e).unwrap().vectors).unwrap();
        prop_assert!(diag_ratio(&e, &eig).unwrap() <= 1e-9);
        let a = BasisMatrix::new(random_stiefel(&mut rng, d, d)).unwrap();
        let b = BasisMatrix::new(random_stiefel(&mut rng, d, d)).unwrap();
        let ab = basis_angle(&a, &b).unwrap();
        prop_assert_eq!(ab, basis_angle(&b, &a).unwrap());
        prop_assert!((0.0..=std::f64::consts::PI).contains(&ab));
        prop_assert!(basis_angle(&a, &a).unwrap() <= 1e-7);
    }

    #[test]
    fn stiefel_steps_stay_orthonormal(rows in 2usize..10, seed in any::<u64>(), lr in 0.001f64..1.0) {
        let mut rng = seeded(seed);
        let cols = 1 + rows / 2;
        let mut w = StiefelParameter::new(random_stiefel(&mut rng, rows, cols)).unwrap();
        for _ in 0..20 {
            let g: DMatrix<f64> = normal_matrix(&mut rng, rows, cols);
            w = stiefel_step(&w, &stiefel_grad(&g, w.matrix()), lr).unwrap();
        }
        prop_assert!(orthogonality_error(w.matrix()) <= 1e-6);
    }
}
