//! Training-free decoders on the manifold: minimum distance to mean and
//! geodesic k-medoids, plus the pairwise-distance matrix they share.

use std::collections::BTreeMap;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix as PfMatrix;

use crate::error::{invalid, Result};
use crate::geometry::{frechet_mean_uniform, geodesic_distance, CholeskyPoint};
use crate::rng::{sample_without_replacement, seeded};

/// Class centroids, sorted by class id.
#[derive(Clone, Debug, PartialEq)]
pub struct MdmModel {
    class_ids: Vec<usize>,
    centroids: Vec<CholeskyPoint>,
}

impl MdmModel {
    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn centroids(&self) -> &[CholeskyPoint] {
        &self.centroids
    }

    pub fn centroid(&self, class_id: usize) -> Option<&CholeskyPoint> {
        self.class_ids
            .iter()
            .position(|&c| c == class_id)
            .map(|i| &self.centroids[i])
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].dim()
    }

    /// Distances from `x` to every centroid, in class-id order.
    pub fn distances(&self, x: &CholeskyPoint) -> Result<Vec<f64>> {
        self.centroids.iter().map(|c| geodesic_distance(x, c)).collect()
    }
}

/// One centroid per class: the uniform-weight Fréchet mean of its samples.
pub fn mdm_fit(train: &[(CholeskyPoint, usize)]) -> Result<MdmModel> {
    if train.is_empty() {
        return Err(invalid("mdm_fit: no training samples"));
    }
    let dim = train[0].0.dim();
    let mut by_class: BTreeMap<usize, Vec<CholeskyPoint>> = BTreeMap::new();
    for (p, c) in train {
        if p.dim() != dim {
            return Err(invalid("mdm_fit: training points differ in dimension"));
        }
        by_class.entry(*c).or_default().push(p.clone());
    }
    let mut class_ids = Vec::with_capacity(by_class.len());
    let mut centroids = Vec::with_capacity(by_class.len());
    for (c, pts) in by_class {
        class_ids.push(c);
        centroids.push(frechet_mean_uniform(&pts)?);
    }
    Ok(MdmModel { class_ids, centroids })
}

/// Nearest centroid; ties go to the smallest class id.
pub fn mdm_predict(model: &MdmModel, x: &CholeskyPoint) -> Result<usize> {
    if x.dim() != model.dim() {
        return Err(invalid(format!(
            "mdm_predict: point has dim {}, model has dim {}",
            x.dim(),
            model.dim()
        )));
    }
    let dists = model.distances(x)?;
    let mut best = 0;
    for (i, &d) in dists.iter().enumerate().skip(1) {
        if d < dists[best] {
            best = i;
        }
    }
    Ok(model.class_ids[best])
}

/// Dense symmetric matrix of pairwise distances, zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let d = f(i, j);
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        Self { n, data }
    }

    /// Validates symmetry, zero diagonal and non-negativity.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for r in &rows {
            if r.len() != n {
                return Err(invalid("distance matrix must be square"));
            }
            data.extend_from_slice(r);
        }
        for i in 0..n {
            if data[i * n + i] != 0.0 {
                return Err(invalid("distance matrix must have a zero diagonal"));
            }
            for j in 0..n {
                let v = data[i * n + j];
                if !(v >= 0.0) || v != data[j * n + i] {
                    return Err(invalid("distance matrix must be symmetric and non-negative"));
                }
            }
        }
        Ok(Self { n, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

pub fn pairwise_distances(points: &[CholeskyPoint]) -> Result<DistanceMatrix> {
    if let Some(p) = points.first() {
        if points.iter().any(|q| q.dim() != p.dim()) {
            return Err(invalid("pairwise_distances: points differ in dimension"));
        }
    }
    Ok(DistanceMatrix::from_fn(points.len(), |i, j| {
        geodesic_distance(&points[i], &points[j]).expect("dims checked")
    }))
}

pub const KMEDOIDS_MAX_ITER: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KMedoids {
    /// Cluster index (position in `medoids`) for every point.
    pub assignments: Vec<usize>,
    /// Point index of each medoid.
    pub medoids: Vec<usize>,
    /// Total cost after each assignment step.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
}

impl KMedoids {
    pub fn total_cost(&self) -> f64 {
        *self.cost_history.last().expect("at least one assignment")
    }
}

fn assign(d: &DistanceMatrix, medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut cost = 0.0;
    let assignments = (0..d.len())
        .map(|i| {
            let mut best = 0;
            for (c, &m) in medoids.iter().enumerate().skip(1) {
                if d.get(i, m) < d.get(i, medoids[best]) {
                    best = c;
                }
            }
            cost += d.get(i, medoids[best]);
            best
        })
        .collect();
    (assignments, cost)
}

/// Alternating (Voronoi-iteration) k-medoids on a precomputed distance
/// matrix. Initial medoids are drawn without replacement from a PCG stream
/// seeded with `seed`; iteration stops when the medoid set is unchanged or
/// after [`KMEDOIDS_MAX_ITER`] rounds.
pub fn k_medoids(d: &DistanceMatrix, k: usize, seed: u64) -> Result<KMedoids> {
    let n = d.len();
    if k == 0 || k > n {
        return Err(invalid(format!("k_medoids: k = {k} must lie in [1, {n}]")));
    }
    let mut rng = seeded(seed);
    let mut medoids = sample_without_replacement(&mut rng, n, k);
    let (mut assignments, cost) = assign(d, &medoids);
    let mut cost_history = vec![cost];
    let mut iterations = 0;
    while iterations < KMEDOIDS_MAX_ITER {
        iterations += 1;
        let mut changed = false;
        for (c, medoid) in medoids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == c).collect();
            let within = |cand: usize| members.iter().map(|&i| d.get(cand, i)).sum::<f64>();
            let mut best = *medoid;
            let mut best_cost = within(best);
            for &cand in &members {
                let cc = within(cand);
                if cc < best_cost {
                    best = cand;
                    best_cost = cc;
                }
            }
            if best != *medoid {
                *medoid = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let (a, cost) = assign(d, &medoids);
        debug_assert!(cost <= cost_history.last().unwrap() + 1e-9 * cost.abs().max(1.0));
        assignments = a;
        cost_history.push(cost);
    }
    Ok(KMedoids { assignments, medoids, cost_history, iterations })
}

fn dense_ids(ids: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for &v in ids {
        let next = map.len();
        map.entry(v).or_insert(next);
    }
    // re-number in sorted order so the mapping is independent of input order
    let sorted: BTreeMap<usize, usize> = map.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    (ids.iter().map(|v| sorted[v]).collect(), sorted.len())
}

/// Accuracy under the best one-to-one cluster→label mapping (Hungarian
/// assignment on the contingency table).
pub fn clustering_accuracy(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(invalid(format!(
            "clustering_accuracy: {} assignments but {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(invalid("clustering_accuracy: empty input"));
    }
    let (a, ka) = dense_ids(assignments);
    let (l, kl) = dense_ids(labels);
    if ka != kl {
        return Err(invalid(format!(
            "clustering_accuracy: {ka} clusters but {kl} distinct labels"
        )));
    }
    let mut table = PfMatrix::new(ka, kl, 0i64);
    for (&ci, &li) in a.iter().zip(&l) {
        table[(ci, li)] += 1;
    }
    let (matched, _) = kuhn_munkres(&table);
    Ok(matched as f64 / labels.len() as f64)
}

/// Adjusted Rand index between two partitions.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid("adjusted_rand_index: partitions differ in length"));
    }
    let n = a.len();
    let (a, ka) = dense_ids(a);
    let (b, kb) = dense_ids(b);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(&b) {
        table[x * kb + y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().map(|&v| c2(v)).sum();
    let rows: f64 = (0..ka).map(|i| c2(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = c2(n as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::strict_len;
    use crate::rng::{normal, seeded, Pcg};
    use rand::RngExt;

    fn point_near(rng: &mut Pcg, d: usize, center: &[f64], spread: f64) -> CholeskyPoint {
        let strict: Vec<f64> = (0..strict_len(d)).map(|_| spread * normal(rng)).collect();
        let logd: Vec<f64> = center.iter().map(|c| c + spread * normal(rng)).collect();
        CholeskyPoint::from_parts(d, &strict, &logd).unwrap()
    }

    #[test]
    fn mdm_single_sample_and_duplicates() {
        let mut rng = seeded(41);
        let a = point_near(&mut rng, 3, &[0.0, 0.0, 0.0], 1.0);
        let b = point_near(&mut rng, 3, &[1.0, 1.0, 1.0], 1.0);
        let m = mdm_fit(&[(a.clone(), 0), (b.clone(), 4)]).unwrap();
        assert_eq!(m.class_ids(), &[0, 4]);
        assert!(crate::linalg::max_abs(&(m.centroid(4).unwrap().matrix() - b.matrix())) < 1e-14);

        let m = mdm_fit(&[(a.clone(), 2), (a.clone(), 2)]).unwrap();
        assert!(crate::linalg::max_abs(&(m.centroid(2).unwrap().matrix() - a.matrix())) < 1e-14);
        assert_eq!(mdm_predict(&m, &a).unwrap(), 2);
        assert!(mdm_fit(&[]).is_err());
    }

    #[test]
    fn mdm_diagonal_centroid_is_geometric_mean() {
        let pts = [[1.0, 4.0], [4.0, 1.0], [2.0, 2.0]];
        let train: Vec<_> = pts
            .iter()
            .map(|p| (CholeskyPoint::from_diagonal(p).unwrap(), 0))
            .collect();
        let m = mdm_fit(&train).unwrap();
        let diag = m.centroid(0).unwrap().diag_entries();
        assert!((diag[0] - 8f64.cbrt()).abs() < 1e-12);
        assert!((diag[1] - 8f64.cbrt()).abs() < 1e-12);
    }

    #[test]
    fn mdm_separated_clusters_and_ties() {
        let mut rng = seeded(42);
        let centers = [[0.0, 0.0, 0.0], [3.0, -3.0, 0.0]];
        let mut train = Vec::new();
        for (c, ctr) in centers.iter().enumerate() {
            for _ in 0..10 {
                train.push((point_near(&mut rng, 3, ctr, 0.1), c));
            }
        }
        let model = mdm_fit(&train).unwrap();
        for (c, ctr) in centers.iter().enumerate() {
            for _ in 0..20 {
                assert_eq!(mdm_predict(&model, &point_near(&mut rng, 3, ctr, 0.1)).unwrap(), c);
            }
        }
        // relabeling by a constant offset shifts predictions by the same offset
        let shifted: Vec<_> = train.iter().map(|(p, c)| (p.clone(), c + 7)).collect();
        let model2 = mdm_fit(&shifted).unwrap();
        let x = point_near(&mut rng, 3, &centers[1], 0.5);
        assert_eq!(mdm_predict(&model2, &x).unwrap(), mdm_predict(&model, &x).unwrap() + 7);

        // symmetric tie: x halfway between diag(e^-1) and diag(e^1)
        let lo = CholeskyPoint::from_diagonal(&[(-1f64).exp()]).unwrap();
        let hi = CholeskyPoint::from_diagonal(&[1f64.exp()]).unwrap();
        let tie = mdm_fit(&[(hi, 3), (lo, 5)]).unwrap();
        assert_eq!(mdm_predict(&tie, &CholeskyPoint::identity(1)).unwrap(), 3);
        assert!(mdm_predict(&tie, &CholeskyPoint::identity(2)).is_err());
    }

    #[test]
    fn pairwise_examples() {
        let mut rng = seeded(43);
        let p = point_near(&mut rng, 3, &[0.0; 3], 1.0);
        let d = pairwise_distances(std::slice::from_ref(&p)).unwrap();
        assert_eq!(d.row(0), &[0.0]);
        let d = pairwise_distances(&[p.clone(), p.clone(), p.clone()]).unwrap();
        assert!((0..3).all(|i| d.row(i).iter().all(|&v| v == 0.0)));
        let pts: Vec<_> = (0..3).map(|_| point_near(&mut rng, 3, &[0.0; 3], 1.0)).collect();
        let d = pairwise_distances(&pts).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let direct = geodesic_distance(&pts[i], &pts[j]).unwrap();
                assert_eq!(d.get(i, j).to_bits(), direct.to_bits());
            }
        }
    }

    fn random_distance_matrix(rng: &mut Pcg, n: usize) -> DistanceMatrix {
        let pts: Vec<_> = (0..n).map(|_| point_near(rng, 2, &[0.0, 0.0], 1.0)).collect();
        pairwise_distances(&pts).unwrap()
    }

    #[test]
    fn kmedoids_k_equals_n_and_k_one() {
        let mut rng = seeded(44);
        let d = random_distance_matrix(&mut rng, 12);
        let r = k_medoids(&d, 12, 1).unwrap();
        assert_eq!(r.total_cost(), 0.0);
        let mut m = r.medoids.clone();
        m.sort();
        assert_eq!(m, (0..12).collect::<Vec<_>>());

        for seed in 0..5 {
            let r = k_medoids(&d, 1, seed).unwrap();
            let brute = (0..12)
                .min_by(|&a, &b| {
                    let ca: f64 = d.row(a).iter().sum();
                    let cb: f64 = d.row(b).iter().sum();
                    ca.total_cmp(&cb)
                })
                .unwrap();
            assert_eq!(r.medoids, vec![brute]);
        }
        assert!(k_medoids(&d, 13, 0).is_err());
        assert!(k_medoids(&d, 0, 0).is_err());
    }

    #[test]
    fn kmedoids_cost_non_increasing_and_deterministic() {
        let mut rng = seeded(45);
        let d = random_distance_matrix(&mut rng, 60);
        for seed in 0..10 {
            let r = k_medoids(&d, 4, seed).unwrap();
            for w in r.cost_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
            assert_eq!(r, k_medoids(&d, 4, seed).unwrap());
        }
    }

    #[test]
    fn kmedoids_recovers_separated_clusters() {
        let mut rng = seeded(46);
        let centers = [[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (c, ctr) in centers.iter().enumerate() {
            for _ in 0..15 {
                pts.push(point_near(&mut rng, 2, ctr, 0.2));
                labels.push(c);
            }
        }
        let d = pairwise_distances(&pts).unwrap();
        let best = (0..5)
            .map(|seed| k_medoids(&d, 3, seed).unwrap())
            .min_by(|a, b| a.total_cost().total_cmp(&b.total_cost()))
            .unwrap();
        assert_eq!(adjusted_rand_index(&best.assignments, &labels).unwrap(), 1.0);
        assert_eq!(clustering_accuracy(&best.assignments, &labels).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_examples() {
        let labels = [0, 0, 1, 1, 2, 2];
        assert_eq!(clustering_accuracy(&[5, 5, 3, 3, 9, 9], &labels).unwrap(), 1.0);

        let labels = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let assign = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        assert!((clustering_accuracy(&assign, &labels).unwrap() - 0.9).abs() < 1e-15);

        assert!(clustering_accuracy(&[0, 1, 2], &[0, 1, 1]).is_err());
        assert!(clustering_accuracy(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn random_assignment_near_chance() {
        let mut rng = seeded(47);
        let k = 13;
        let n = k * 10_000;
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let assign: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let acc = clustering_accuracy(&assign, &labels).unwrap();
        assert!((acc - 0.077).abs() < 0.01, "acc = {acc}");
        assert!(acc >= 1.0 / k as f64);
    }

    #[test]
    fn ari_basics() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert!(adjusted_rand_index(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap() < 0.0);
    }
}
