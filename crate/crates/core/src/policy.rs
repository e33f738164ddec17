//! Behavior-policy space: dueling heads, tempered-softmax mixtures and the
//! index <-> search-coordinate transform.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{GdiError, Result};

/// Largest inverse temperature a softmax is evaluated at.
pub const MAX_INV_TEMP: f64 = 50.0;

/// Per-dimension search box for (x1, x2, x3).
pub const SEARCH_LOWER: [f64; 3] = [0.0, 0.0, 0.0];
pub const SEARCH_UPPER: [f64; 3] = [50.0, 50.0, 1.0];

/// λ = (τ₁, τ₂, ε). An infinite temperature stands for the uniform policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexPoint {
    pub tau1: f64,
    pub tau2: f64,
    pub epsilon: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(GdiError::InvalidArgument(format!("temperature {tau} must be positive")))
    }
}

fn inv(tau: f64) -> f64 {
    if tau.is_infinite() {
        0.0
    } else {
        1.0 / tau
    }
}

impl IndexPoint {
    pub fn new(tau1: f64, tau2: f64, epsilon: f64) -> Result<Self> {
        check_tau(tau1)?;
        check_tau(tau2)?;
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(GdiError::InvalidArgument(format!("epsilon {epsilon} outside [0,1]")));
        }
        Ok(Self { tau1, tau2, epsilon })
    }

    /// Builds λ from inverse temperatures; 0 maps to τ = ∞.
    pub fn from_inverse(inv_tau1: f64, inv_tau2: f64, epsilon: f64) -> Result<Self> {
        let tau = |x: f64| {
            if x >= 0.0 {
                Ok(if x == 0.0 { f64::INFINITY } else { 1.0 / x })
            } else {
                Err(GdiError::InvalidArgument(format!("inverse temperature {x} is negative")))
            }
        };
        Self::new(tau(inv_tau1)?, tau(inv_tau2)?, epsilon)
    }

    pub fn inv_tau1(&self) -> f64 {
        inv(self.tau1)
    }

    pub fn inv_tau2(&self) -> f64 {
        inv(self.tau2)
    }
}

/// Bandit coordinates: x₁,₂ = log(1 + 1/τ₁,₂), x₃ = ε.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchCoordinates {
    pub x: [f64; 3],
}

pub fn index_to_search(lambda: &IndexPoint) -> SearchCoordinates {
    SearchCoordinates { x: [lambda.inv_tau1().ln_1p(), lambda.inv_tau2().ln_1p(), lambda.epsilon] }
}

/// Inverse of [`index_to_search`]; coordinates outside the box are clamped.
pub fn search_to_index(x: &SearchCoordinates) -> IndexPoint {
    let c = |i: usize| x.x[i].clamp(SEARCH_LOWER[i], SEARCH_UPPER[i]);
    IndexPoint { tau1: tau_from_search(c(0)), tau2: tau_from_search(c(1)), epsilon: c(2) }
}

pub(crate) fn tau_from_search(x: f64) -> f64 {
    if x <= 0.0 {
        f64::INFINITY
    } else {
        1.0 / x.exp_m1()
    }
}

/// Softmax of `logits * inv_temp` after max subtraction; `inv_temp == 0` is exactly uniform.
pub(crate) fn softmax_scaled(logits: &[f64], inv_temp: f64) -> Vec<f64> {
    let n = logits.len();
    if inv_temp == 0.0 {
        return vec![1.0 / n as f64; n];
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| ((l - m) * inv_temp).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub(crate) fn clamped_inv_temp(tau: f64) -> f64 {
    inv(tau).min(MAX_INV_TEMP)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    softmax_scaled(logits, 1.0)
}

pub fn tempered_softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if logits.is_empty() {
        return Err(GdiError::InvalidArgument("no logits".into()));
    }
    Ok(softmax_scaled(logits, clamped_inv_temp(tau)))
}

/// Fixed linear features φ(s), one row per state.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl FeatureMap {
    pub fn one_hot(n_states: usize) -> Self {
        let rows = (0..n_states)
            .map(|s| {
                let mut r = vec![0.0; n_states];
                r[s] = 1.0;
                r
            })
            .collect();
        Self { dim: n_states, rows }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(GdiError::InvalidArgument("feature rows must be non-empty and equal length".into()));
        }
        Ok(Self { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_states(&self) -> usize {
        self.rows.len()
    }

    pub fn features(&self, state: usize) -> &[f64] {
        &self.rows[state]
    }
}

/// Linear advantage and value weights. `advantage[f * n_actions + a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub advantage: Vec<f64>,
    pub value: Vec<f64>,
}

impl Head {
    pub fn zeros(dim: usize, n_actions: usize) -> Self {
        Self { advantage: vec![0.0; dim * n_actions], value: vec![0.0; dim] }
    }

    pub fn n_params(&self) -> usize {
        self.advantage.len() + self.value.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadLayout {
    /// θ₁ = θ₂: both mixture components read one head.
    Isomorphic,
    Heterogeneous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    feature_map: Arc<FeatureMap>,
    n_actions: usize,
    heads: Vec<Head>,
    pub version: u64,
}

impl PolicyParams {
    pub fn new(feature_map: Arc<FeatureMap>, n_actions: usize, layout: HeadLayout) -> Result<Self> {
        if n_actions == 0 {
            return Err(GdiError::InvalidArgument("need at least one action".into()));
        }
        let n_heads = match layout {
            HeadLayout::Isomorphic => 1,
            HeadLayout::Heterogeneous => 2,
        };
        let heads = vec![Head::zeros(feature_map.dim(), n_actions); n_heads];
        Ok(Self { feature_map, n_actions, heads, version: 0 })
    }

    pub fn layout(&self) -> HeadLayout {
        if self.heads.len() == 1 {
            HeadLayout::Isomorphic
        } else {
            HeadLayout::Heterogeneous
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.feature_map
    }

    /// Number of distinct parameter heads (1 or 2).
    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Head used by mixture component `k` (0 or 1).
    pub fn head(&self, k: usize) -> &Head {
        &self.heads[k.min(self.heads.len() - 1)]
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [Head] {
        &mut self.heads
    }

    pub fn advantages(&self, k: usize, state: usize) -> Vec<f64> {
        let head = self.head(k);
        let na = self.n_actions;
        let mut out = vec![0.0; na];
        for (f, &phi) in self.feature_map.features(state).iter().enumerate() {
            if phi != 0.0 {
                for (o, w) in out.iter_mut().zip(&head.advantage[f * na..(f + 1) * na]) {
                    *o += phi * w;
                }
            }
        }
        out
    }

    pub fn value(&self, k: usize, state: usize) -> f64 {
        self.feature_map.features(state).iter().zip(&self.head(k).value).map(|(p, w)| p * w).sum()
    }
}

/// Dueling decomposition at one state: Ā = A − E_{softmax(A)}[A], Q = Ā + V.
#[derive(Debug, Clone, PartialEq)]
pub struct Dueling {
    pub advantage: Vec<f64>,
    pub centered: Vec<f64>,
    pub value: f64,
    pub q: Vec<f64>,
    /// Reference policy used for centering.
    pub reference: Vec<f64>,
}

pub fn dueling_from_parts(advantage: Vec<f64>, value: f64) -> Dueling {
    let reference = softmax(&advantage);
    let mean: f64 = reference.iter().zip(&advantage).map(|(p, a)| p * a).sum();
    let centered: Vec<f64> = advantage.iter().map(|a| a - mean).collect();
    let q = centered.iter().map(|c| c + value).collect();
    Dueling { advantage, centered, value, q, reference }
}

pub fn dueling_q(params: &PolicyParams, head: usize, state: usize) -> Dueling {
    dueling_from_parts(params.advantages(head, state), params.value(head, state))
}

/// π = ε·softmax(A₁/τ₁) + (1−ε)·softmax(A₂/τ₂).
pub fn mixture_policy(params: &PolicyParams, lambda: &IndexPoint, state: usize) -> Vec<f64> {
    mixture_from_advantages(&params.advantages(0, state), &params.advantages(1, state), lambda)
}

pub fn mixture_from_advantages(a1: &[f64], a2: &[f64], lambda: &IndexPoint) -> Vec<f64> {
    let eps = lambda.epsilon;
    let p1 = softmax_scaled(a1, clamped_inv_temp(lambda.tau1));
    let p2 = softmax_scaled(a2, clamped_inv_temp(lambda.tau2));
    p1.iter().zip(&p2).map(|(x, y)| eps * x + (1.0 - eps) * y).collect()
}

/// Versioned parameter store shared by the learner (writer) and actors (readers).
#[derive(Debug, Default)]
pub struct SnapshotStore {
    latest: Mutex<Option<Arc<PolicyParams>>>,
}

impl SnapshotStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Publishes an immutable copy; the version must exceed the last published one.
    pub fn publish(&self, params: &PolicyParams) -> Result<Arc<PolicyParams>> {
        let mut slot = self.latest.lock().expect("snapshot lock poisoned");
        if let Some(prev) = slot.as_ref() {
            if params.version <= prev.version {
                return Err(GdiError::Precondition(format!(
                    "snapshot version {} does not exceed {}",
                    params.version, prev.version
                )));
            }
        }
        let snap = Arc::new(params.clone());
        *slot = Some(snap.clone());
        Ok(snap)
    }

    pub fn fetch(&self) -> Result<Arc<PolicyParams>> {
        self.latest.lock().expect("snapshot lock poisoned").clone().ok_or(GdiError::NoSnapshot)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, n_s: usize, n_a: usize, layout: HeadLayout) -> PolicyParams {
        let mut p = PolicyParams::new(Arc::new(FeatureMap::one_hot(n_s)), n_a, layout).unwrap();
        for h in p.heads_mut() {
            h.advantage.iter_mut().for_each(|w| *w = rng.gen_range(-3.0..3.0));
            h.value.iter_mut().for_each(|w| *w = rng.gen_range(-3.0..3.0));
        }
        p
    }

    #[test]
    fn softmax_examples() {
        let p = tempered_softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
        p.iter().for_each(|x| assert_abs_diff_eq!(*x, 1.0 / 3.0, epsilon = 1e-15));
        let p = tempered_softmax(&[1.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 0.73106, epsilon = 5e-6);
        assert_abs_diff_eq!(p[1], 0.26894, epsilon = 5e-6);
        assert_eq!(tempered_softmax(&[5.0, 1.0], f64::INFINITY).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(tempered_softmax(&[1.0], 0.0).is_err());
        assert!(tempered_softmax(&[1.0], -2.0).is_err());
        assert!(tempered_softmax(&[1.0], f64::NAN).is_err());
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = tempered_softmax(&[1e300, -1e300, 0.0], 1e-9).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn dueling_constant_advantage() {
        let d = dueling_from_parts(vec![2.5; 4], 1.5);
        assert!(d.centered.iter().all(|&c| c.abs() < 1e-15));
        assert!(d.q.iter().all(|&q| (q - 1.5).abs() < 1e-15));
    }

    #[test]
    fn dueling_centering_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a: Vec<f64> = (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let d = dueling_from_parts(a, 0.3);
            let e: f64 = d.reference.iter().zip(&d.centered).map(|(p, c)| p * c).sum();
            assert!(e.abs() < 1e-12);
        }
    }

    #[test]
    fn mean_subtraction_under_uniform_reference() {
        // with a uniform reference the centering is plain mean subtraction
        let a = [1.0, 0.0];
        let uniform = [0.5, 0.5];
        let mean: f64 = a.iter().zip(uniform).map(|(x, p)| x * p).sum();
        let centered: Vec<f64> = a.iter().map(|x| x - mean).collect();
        assert_eq!(centered, vec![0.5, -0.5]);
    }

    #[test]
    fn mixture_degenerate_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, 3, 4, HeadLayout::Heterogeneous);
        let lam1 = IndexPoint::new(0.7, 2.0, 1.0).unwrap();
        let lam0 = IndexPoint::new(0.7, 2.0, 0.0).unwrap();
        for s in 0..3 {
            assert_eq!(mixture_policy(&p, &lam1, s), tempered_softmax(&p.advantages(0, s), 0.7).unwrap());
            assert_eq!(mixture_policy(&p, &lam0, s), tempered_softmax(&p.advantages(1, s), 2.0).unwrap());
        }
    }

    #[test]
    fn mixture_example() {
        let lam = IndexPoint::new(1.0, 0.5, 0.5).unwrap();
        let p = mixture_from_advantages(&[1.0, 0.0], &[1.0, 0.0], &lam);
        assert_abs_diff_eq!(p[0], 0.805927828303944, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.194072171696056, epsilon = 1e-12);
    }

    #[test]
    fn search_transform_examples() {
        let lam = IndexPoint::new(1.0, f64::INFINITY, 0.3).unwrap();
        let x = index_to_search(&lam);
        assert_abs_diff_eq!(x.x[0], std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(x.x[1], 0.0);
        assert_eq!(x.x[2], 0.3);
        let back = search_to_index(&SearchCoordinates { x: [std::f64::consts::LN_2, 0.0, 0.3] });
        assert_abs_diff_eq!(back.tau1, 1.0, epsilon = 1e-15);
        assert!(back.tau2.is_infinite());
    }

    #[test]
    fn search_clamps_out_of_box() {
        let lam = search_to_index(&SearchCoordinates { x: [-1.0, 80.0, 1.5] });
        assert!(lam.tau1.is_infinite());
        assert_abs_diff_eq!(lam.inv_tau2(), 50f64.exp_m1(), epsilon = 1e8);
        assert_eq!(lam.epsilon, 1.0);
    }

    #[test]
    fn round_trip_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let x = [rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0), rng.gen_range(0.0..1.0)];
            let y = index_to_search(&search_to_index(&SearchCoordinates { x }));
            for i in 0..3 {
                worst = worst.max((x[i] - y.x[i]).abs());
            }
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn index_point_validation() {
        assert!(IndexPoint::new(1.0, 1.0, 1.2).is_err());
        assert!(IndexPoint::new(0.0, 1.0, 0.5).is_err());
        assert!(IndexPoint::from_inverse(-1.0, 0.0, 0.5).is_err());
        let lam = IndexPoint::from_inverse(1.0, 0.0, 1.0).unwrap();
        assert_eq!((lam.tau1, lam.inv_tau2()), (1.0, 0.0));
    }

    #[test]
    fn snapshot_store_contract() {
        let store = SnapshotStore::new();
        assert!(matches!(store.fetch(), Err(GdiError::NoSnapshot)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_params(&mut rng, 2, 2, HeadLayout::Isomorphic);
        store.publish(&p).unwrap();
        assert_eq!(*store.fetch().unwrap(), p);
        assert!(store.publish(&p).is_err());
        p.version = 1;
        p.heads_mut()[0].value[0] = 9.0;
        store.publish(&p).unwrap();
        assert_eq!(store.fetch().unwrap().head(0).value[0], 9.0);
    }

    #[test]
    fn isomorphic_heads_alias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&mut rng, 2, 3, HeadLayout::Isomorphic);
        assert_eq!(p.head(0), p.head(1));
        assert_eq!(p.n_heads(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2500))]

        #[test]
        fn mixture_is_distribution(
            seed in any::<u64>(),
            x1 in 0.0f64..50.0, x2 in 0.0f64..50.0, eps in 0.0f64..=1.0,
            hetero in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layout = if hetero { HeadLayout::Heterogeneous } else { HeadLayout::Isomorphic };
            let p = random_params(&mut rng, 4, 5, layout);
            let lam = search_to_index(&SearchCoordinates { x: [x1, x2, eps] });
            for s in 0..4 {
                let pi = mixture_policy(&p, &lam, s);
                prop_assert!(pi.iter().all(|&x| x >= 0.0));
                prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn clamped_softmax_keeps_argmax(logits in prop::collection::vec(-10.0f64..10.0, 2..6)) {
            let p = tempered_softmax(&logits, 1.0 / MAX_INV_TEMP).unwrap();
            let best = (0..logits.len()).max_by(|&i, &j| logits[i].total_cmp(&logits[j])).unwrap();
            let gap = logits.iter().enumerate().filter(|(i, _)| *i != best)
                .map(|(_, l)| logits[best] - l).fold(f64::INFINITY, f64::min);
            prop_assume!(gap > 1e-9);
            let arg = (0..p.len()).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap();
            prop_assert_eq!(arg, best);
        }

        #[test]
        fn isomorphic_equal_temperatures_ignore_epsilon(
            seed in any::<u64>(), x in 0.0f64..50.0, e1 in 0.0f64..=1.0, e2 in 0.0f64..=1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, 3, 4, HeadLayout::Isomorphic);
            let a = search_to_index(&SearchCoordinates { x: [x, x, e1] });
            let b = search_to_index(&SearchCoordinates { x: [x, x, e2] });
            for s in 0..3 {
                let (pa, pb) = (mixture_policy(&p, &a, s), mixture_policy(&p, &b, s));
                for (u, v) in pa.iter().zip(&pb) {
                    prop_assert!((u - v).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn search_round_trip(x1 in 1e-6f64..50.0, x2 in 1e-6f64..50.0, x3 in 0.0f64..=1.0) {
            let y = index_to_search(&search_to_index(&SearchCoordinates { x: [x1, x2, x3] }));
            prop_assert!((y.x[0] - x1).abs() < 1e-12 && (y.x[1] - x2).abs() < 1e-12 && y.x[2] == x3);
        }
    }
}
