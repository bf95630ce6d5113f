//! Nonparametric particle-entropy intrinsic rewards. The estimator scores a
//! point by the mean log distance to its K nearest neighbors inside a batch;
//! grouped variants sum the estimate across per-object latent groups.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

fn check_particle_set(points: &Array2<f64>, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::contract("neighbor count k must be at least 1"));
    }
    if points.nrows() <= k {
        return Err(Error::contract(format!(
            "need more than k={k} points, got {}",
            points.nrows()
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("particle set contains non-finite values"));
    }
    Ok(())
}

/// For every point, the indices of its k nearest neighbors (self excluded),
/// nearest first; distance ties broken by row index.
pub fn knn_neighbor_indices(points: &Array2<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    check_particle_set(points, k)?;
    let m = points.nrows();
    let mut out = Vec::with_capacity(m);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(m - 1);
    for i in 0..m {
        order.clear();
        let pi = points.row(i);
        for j in 0..m {
            if j == i {
                continue;
            }
            let d2: f64 = pi
                .iter()
                .zip(points.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            order.push((d2, j));
        }
        order.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.push(order[..k].iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// Per-point entropy reward: mean over the k nearest neighbors of
/// ln(distance + epsilon). Distances are exact Euclidean norms.
pub fn knn_entropy_reward(points: &Array2<f64>, k: usize, epsilon: f64) -> Result<Vec<f64>> {
    let neighbors = knn_neighbor_indices(points, k)?;
    let rewards = neighbors
        .iter()
        .enumerate()
        .map(|(i, nbrs)| {
            let pi = points.row(i);
            let total: f64 = nbrs
                .iter()
                .map(|&j| {
                    let d2: f64 = pi
                        .iter()
                        .zip(points.row(j).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d2.sqrt() + epsilon).ln()
                })
                .sum();
            total / k as f64
        })
        .collect();
    Ok(rewards)
}

/// Sum of per-group entropy rewards: groups hold the same states' latents for
/// different objects, so rewards add elementwise across groups.
pub fn grouped_entropy_reward(
    groups: &[Array2<f64>],
    k: usize,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if groups.is_empty() {
        return Err(Error::contract("entropy reward needs at least one group"));
    }
    let m = groups[0].nrows();
    let mut total = vec![0.0; m];
    for g in groups {
        if g.nrows() != m {
            return Err(Error::contract("all groups must cover the same states"));
        }
        for (t, r) in total.iter_mut().zip(knn_entropy_reward(g, k, epsilon)?) {
            *t += r;
        }
    }
    Ok(total)
}

/// Differentiable estimator: neighbor selection comes from the current values
/// (no gradient through the selection), the log-distance terms are autodiff
/// ops. Returns a length-M vector tensor; 1e-12 inside the sqrt keeps the
/// gradient finite for coincident points.
pub fn knn_entropy_reward_tensor(points: &Tensor, k: usize, epsilon: f64) -> Result<Tensor> {
    let data = points.data().clone();
    let m2 = data
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::contract("entropy reward expects an M x D matrix"))?;
    let neighbors = knn_neighbor_indices(&m2, k)?;
    let m = m2.nrows();

    let mut left = Vec::with_capacity(m * k);
    let mut right = Vec::with_capacity(m * k);
    for (i, nbrs) in neighbors.iter().enumerate() {
        for &j in nbrs {
            left.push(i);
            right.push(j);
        }
    }
    let diff = points.gather_rows(&left).sub(&points.gather_rows(&right));
    let log_dist = diff
        .square()
        .sum_rows()
        .sqrt_eps(1e-12)
        .ln_eps(epsilon)
        .reshape(&[m, k]);
    Ok(log_dist.sum_rows().mul_scalar(1.0 / k as f64))
}

/// Differentiable grouped sum; see [`grouped_entropy_reward`].
pub fn grouped_entropy_reward_tensor(
    groups: &[Tensor],
    k: usize,
    epsilon: f64,
) -> Result<Tensor> {
    if groups.is_empty() {
        return Err(Error::contract("entropy reward needs at least one group"));
    }
    let mut total = knn_entropy_reward_tensor(&groups[0], k, epsilon)?;
    for g in &groups[1..] {
        total = total.add(&knn_entropy_reward_tensor(g, k, epsilon)?);
    }
    Ok(total)
}

/// Streaming mean/variance (Welford) used to standardize intrinsic rewards.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunningMoments {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Default for RunningMoments {
    fn default() -> Self {
        RunningMoments {
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
        }
    }
}

impl RunningMoments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, x: f64) {
        self.count += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.count;
        self.m2 += delta * (x - self.mean);
    }

    pub fn update_batch(&mut self, xs: &[f64]) {
        for &x in xs {
            self.update(x);
        }
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count < 2.0 {
            0.0
        } else {
            (self.m2 / self.count).sqrt()
        }
    }

    /// Standardize a value by the statistics accumulated so far. Callers
    /// update with the current batch first, so the stream is never empty.
    pub fn normalize(&self, x: f64) -> f64 {
        if self.count < 1.0 {
            return x;
        }
        (x - self.mean) / (self.std() + 1e-8)
    }

    pub fn state(&self) -> [f64; 3] {
        [self.count, self.mean, self.m2]
    }

    pub fn restore(state: [f64; 3]) -> Self {
        RunningMoments {
            count: state[0],
            mean: state[1],
            m2: state[2],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: full pairwise distance matrix, full sort per row,
    /// then the mean log distance over the first k entries.
    fn brute_force_oracle(points: &Array2<f64>, k: usize, eps: f64) -> Vec<f64> {
        let m = points.nrows();
        let mut dist = Array2::<f64>::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                let mut s = 0.0;
                for d in 0..points.ncols() {
                    let diff = points[[i, d]] - points[[j, d]];
                    s += diff * diff;
                }
                dist[[i, j]] = s.sqrt();
            }
        }
        (0..m)
            .map(|i| {
                let mut row: Vec<(f64, usize)> =
                    (0..m).filter(|&j| j != i).map(|j| (dist[[i, j]], j)).collect();
                row.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                row[..k].iter().map(|(d, _)| (d + eps).ln()).sum::<f64>() / k as f64
            })
            .collect()
    }

    fn random_points(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn two_points_at_distance_e_score_exactly_one() {
        let e = std::f64::consts::E;
        let points = array![[0.0, 0.0], [e, 0.0]];
        let r = knn_entropy_reward(&points, 1, 0.0).unwrap();
        assert_eq!(r, vec![1.0, 1.0]);
    }

    #[test]
    fn duplicate_points_score_log_epsilon() {
        let points = array![[0.5, -0.25], [0.5, -0.25]];
        let r = knn_entropy_reward(&points, 1, 1e-3).unwrap();
        let expect = (1e-3f64).ln();
        assert_eq!(r, vec![expect, expect]);
        assert!((expect + 6.9078).abs() < 1e-4);
    }

    #[test]
    fn too_few_points_is_a_contract_error() {
        let points = array![[0.0], [1.0], [2.0]];
        assert!(matches!(
            knn_entropy_reward(&points, 3, 1e-3),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            knn_entropy_reward(&points, 0, 1e-3),
            Err(Error::Contract(_))
        ));
        assert!(knn_entropy_reward(&points, 2, 1e-3).is_ok());
    }

    #[test]
    fn non_finite_points_are_rejected() {
        let points = array![[0.0], [f64::NAN]];
        assert!(matches!(
            knn_entropy_reward(&points, 1, 1e-3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..20 {
            let m = rng.gen_range(8..60);
            let d = rng.gen_range(1..8);
            let k = rng.gen_range(1..(m - 1).min(12));
            let points = random_points(&mut rng, m, d);
            let got = knn_entropy_reward(&points, k, 1e-3).unwrap();
            let want = brute_force_oracle(&points, k, 1e-3);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9, "case {case}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn nearest_first_with_index_tiebreak() {
        // 0 and 2 are equidistant from 1; the lower index wins the tie.
        let points = array![[0.0], [1.0], [2.0], [10.0]];
        let idx = knn_neighbor_indices(&points, 2).unwrap();
        assert_eq!(idx[1], vec![0, 2]);
        assert_eq!(idx[0], vec![1, 2]);
        assert_eq!(idx[3], vec![2, 1]);
    }

    #[test]
    fn grouped_reward_adds_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_points(&mut rng, 20, 4);
        let b = random_points(&mut rng, 20, 4);
        let ra = knn_entropy_reward(&a, 3, 1e-3).unwrap();
        let rb = knn_entropy_reward(&b, 3, 1e-3).unwrap();
        let total = grouped_entropy_reward(&[a.clone(), b], 3, 1e-3).unwrap();
        for i in 0..20 {
            assert_eq!(total[i], ra[i] + rb[i]);
        }

        // one group: exactly the single-group reward
        let single = grouped_entropy_reward(&[a.clone()], 3, 1e-3).unwrap();
        assert_eq!(single, ra);

        // identical copies double the reward
        let twice = grouped_entropy_reward(&[a.clone(), a], 3, 1e-3).unwrap();
        for i in 0..20 {
            assert_eq!(twice[i], 2.0 * ra[i]);
        }
    }

    #[test]
    fn grouped_reward_rejects_misaligned_groups() {
        let a = Array2::zeros((5, 2));
        let b = Array2::zeros((6, 2));
        assert!(matches!(
            grouped_entropy_reward(&[a, b], 1, 1e-3),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            grouped_entropy_reward(&[], 1, 1e-3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn tensor_path_matches_pure_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let points = random_points(&mut rng, 32, 6);
        let want = knn_entropy_reward(&points, 5, 1e-3).unwrap();
        let t = Tensor::param(points.into_dyn());
        let got = knn_entropy_reward_tensor(&t, 5, 1e-3).unwrap();
        assert_eq!(got.shape(), &[32]);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-8, "{g} vs {w}");
        }
    }

    #[test]
    fn tensor_path_gradient_matches_finite_differences() {
        // Well-separated points so the neighbor sets are stable under the
        // finite-difference probes.
        let points = array![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 3.0]];
        let t = Tensor::param(points.clone().into_dyn());
        knn_entropy_reward_tensor(&t, 2, 1e-3)
            .unwrap()
            .sum_all()
            .backward();
        let grad = t.grad().unwrap();

        let f = |p: &Array2<f64>| -> f64 {
            knn_entropy_reward(p, 2, 1e-3).unwrap().iter().sum::<f64>()
        };
        let h = 1e-6;
        for r in 0..4 {
            for c in 0..2 {
                let mut plus = points.clone();
                plus[[r, c]] += h;
                let mut minus = points.clone();
                minus[[r, c]] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let g = grad[[r, c]];
                assert!(
                    (fd - g).abs() < 1e-5,
                    "grad[{r},{c}]: fd {fd} vs autodiff {g}"
                );
            }
        }
    }

    #[test]
    fn grouped_tensor_path_adds_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_points(&mut rng, 12, 3);
        let b = random_points(&mut rng, 12, 3);
        let want = grouped_entropy_reward(&[a.clone(), b.clone()], 2, 1e-3).unwrap();
        let ta = Tensor::constant(a.into_dyn());
        let tb = Tensor::constant(b.into_dyn());
        let got = grouped_entropy_reward_tensor(&[ta, tb], 2, 1e-3).unwrap();
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-8);
        }
    }

    #[test]
    fn running_moments_match_direct_statistics() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64) * 0.1 - 3.0).collect();
        let mut rm = RunningMoments::new();
        rm.update_batch(&xs);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((rm.mean() - mean).abs() < 1e-12);
        assert!((rm.std() - var.sqrt()).abs() < 1e-12);

        let z = rm.normalize(mean + var.sqrt());
        assert!((z - 1.0).abs() < 1e-6);

        let restored = RunningMoments::restore(rm.state());
        assert_eq!(restored, rm);
    }

    #[test]
    fn normalize_before_any_update_is_identity() {
        let rm = RunningMoments::new();
        assert_eq!(rm.normalize(4.2), 4.2);
    }

    fn separated_points() -> impl Strategy<Value = Array2<f64>> {
        // Distinct lattice points, jittered less than half the spacing, so all
        // pairwise distances stay positive.
        proptest::collection::vec((0i32..6, 0i32..6), 5..24).prop_map(|cells| {
            let mut uniq: Vec<(i32, i32)> = Vec::new();
            for c in cells {
                if !uniq.contains(&c) {
                    uniq.push(c);
                }
            }
            while uniq.len() < 5 {
                let c = (uniq.len() as i32, 7);
                uniq.push(c);
            }
            Array2::from_shape_fn((uniq.len(), 2), |(i, j)| {
                if j == 0 {
                    uniq[i].0 as f64
                } else {
                    uniq[i].1 as f64
                }
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scaling_up_strictly_increases_rewards(points in separated_points(), lambda in 1.05f64..8.0) {
            let k = 2.min(points.nrows() - 1).max(1);
            let base = knn_entropy_reward(&points, k, 1e-3).unwrap();
            let scaled_points = points.mapv(|v| v * lambda);
            let scaled = knn_entropy_reward(&scaled_points, k, 1e-3).unwrap();
            for (b, s) in base.iter().zip(&scaled) {
                prop_assert!(s > b, "scaling by {lambda} must increase the reward: {b} -> {s}");
            }
        }

        #[test]
        fn rewards_are_permutation_invariant(points in separated_points(), seed in 0u64..1000) {
            let m = points.nrows();
            let k = 2.min(m - 1).max(1);
            let base = knn_entropy_reward(&points, k, 1e-3).unwrap();

            let mut perm: Vec<usize> = (0..m).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..m).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let shuffled = Array2::from_shape_fn((m, points.ncols()), |(i, j)| points[[perm[i], j]]);
            let r = knn_entropy_reward(&shuffled, k, 1e-3).unwrap();
            for i in 0..m {
                prop_assert!((r[i] - base[perm[i]]).abs() < 1e-12);
            }
        }
    }
}
