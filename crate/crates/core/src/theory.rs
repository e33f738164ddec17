//! Finite-instance checks of the exponential-tilt and transport arguments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::env::{discounted_visitation, exact_policy_q, exact_policy_value, make_random_mdp, random_policy, TabularMdp};
use crate::error::{GdiError, Result};

/// Largest support the O(n²) checks accept.
pub const MAX_SUPPORT: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    pub points: Vec<Vec<f64>>,
    pub masses: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Vec<f64>>, masses: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != masses.len() {
            return Err(GdiError::InvalidArgument("need one mass per support point".into()));
        }
        if points.len() > MAX_SUPPORT {
            return Err(GdiError::InvalidArgument(format!("support larger than {MAX_SUPPORT}")));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(GdiError::InvalidArgument("support points differ in dimension".into()));
        }
        if masses.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(GdiError::InvalidArgument("masses must be finite and non-negative".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(GdiError::InvalidArgument(format!("masses sum to {total}")));
        }
        Ok(Self { points, masses })
    }

    /// Masses on an abstract support 0..n.
    pub fn on_indices(masses: Vec<f64>) -> Result<Self> {
        let points = (0..masses.len()).map(|i| vec![i as f64]).collect();
        Self::new(points, masses)
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn expectation(&self, f: &[f64]) -> f64 {
        self.masses.iter().zip(f).map(|(m, f)| m * f).sum()
    }
}

fn check_values(measure: &DiscreteMeasure, v: &[f64], name: &str) -> Result<()> {
    if v.len() != measure.len() {
        return Err(GdiError::InvalidArgument(format!("{name} has {} values for {} points", v.len(), measure.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(GdiError::NonFinite(format!("{name} on the support")));
    }
    Ok(())
}

/// β(x) = μ(x)·e^{ηg(x)} / Z.
pub fn exp_tilt(measure: &DiscreteMeasure, g: &[f64], eta: f64) -> Result<DiscreteMeasure> {
    check_values(measure, g, "g")?;
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(GdiError::InvalidArgument(format!("eta {eta}")));
    }
    let top = g
        .iter()
        .zip(&measure.masses)
        .filter(|(_, &m)| m > 0.0)
        .map(|(&g, _)| eta * g)
        .fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = g.iter().zip(&measure.masses).map(|(&g, &m)| if m > 0.0 { m * (eta * g - top).exp() } else { 0.0 }).collect();
    let z: f64 = raw.iter().sum();
    Ok(DiscreteMeasure { points: measure.points.clone(), masses: raw.into_iter().map(|x| x / z).collect() })
}

/// Joint masses, `gamma[i][j]` from source point i to target point j.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub gamma: Vec<Vec<f64>>,
}

/// Builds a coupling of μ and exp_tilt(μ, g, 1) that never moves mass to a
/// point with lower g.
///
/// Points are processed in increasing g. At step m the measure still lumps all
/// mass of the points ≥ m onto point m; splitting off point m+1 rescales the
/// existing plan and divides the freed column mass between m and m+1.
pub fn uttc_coupling(measure: &DiscreteMeasure, g: &[f64]) -> Result<Coupling> {
    check_values(measure, g, "g")?;
    let n = measure.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| g[i].total_cmp(&g[j]).then(i.cmp(&j)));
    let a: Vec<f64> = order.iter().map(|&i| measure.masses[i]).collect();
    let top = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = order.iter().map(|&i| (g[i] - top).exp()).collect();
    // tail[m] = Σ_{i ≥ m} a_i
    let mut tail = vec![0.0; n + 1];
    for m in (0..n).rev() {
        tail[m] = tail[m + 1] + a[m];
    }

    let mut plan = vec![vec![0.0; n]; n];
    plan[0][0] = 1.0;
    let mut z = e[0];
    for m in 0..n - 1 {
        let z_next = z + tail[m + 1] * (e[m + 1] - e[m]);
        let s = if z_next > 0.0 { z / z_next } else { 1.0 };
        let bm = a[m] * e[m];
        let bm1 = tail[m + 1] * e[m + 1];
        let frac = if bm + bm1 > 0.0 { bm / (bm + bm1) } else { 0.0 };
        for i in 0..m {
            let free = s * plan[i][m] + (1.0 - s) * a[i];
            for cell in &mut plan[i][..m] {
                *cell *= s;
            }
            plan[i][m] = free * frac;
            plan[i][m + 1] = free * (1.0 - frac);
        }
        let u = tail[m] * frac;
        plan[m][m] = u;
        plan[m][m + 1] = (a[m] - u).max(0.0);
        plan[m + 1][m + 1] = tail[m + 1];
        z = z_next;
    }

    let mut gamma = vec![vec![0.0; n]; n];
    for (si, &oi) in order.iter().enumerate() {
        for (sj, &oj) in order.iter().enumerate() {
            gamma[oi][oj] = plan[si][sj];
        }
    }
    Ok(Coupling { gamma })
}

/// μ ⊗ β, which ignores the order of g; kept as a negative control.
pub fn independent_coupling(measure: &DiscreteMeasure, tilted: &DiscreteMeasure) -> Coupling {
    let gamma = measure.masses.iter().map(|&m| tilted.masses.iter().map(|&b| m * b).collect()).collect();
    Coupling { gamma }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CouplingReport {
    pub max_marginal_residual: f64,
    /// Total mass on pairs with g(x_i) > g(y_j).
    pub violating_mass: f64,
}

pub fn verify_coupling(
    coupling: &Coupling,
    measure: &DiscreteMeasure,
    tilted: &DiscreteMeasure,
    g: &[f64],
) -> Result<CouplingReport> {
    let n = measure.len();
    check_values(measure, g, "g")?;
    if tilted.len() != n || coupling.gamma.len() != n || coupling.gamma.iter().any(|r| r.len() != n) {
        return Err(GdiError::InvalidArgument("coupling shape does not match the measures".into()));
    }
    let mut resid: f64 = 0.0;
    let mut violating = 0.0;
    for i in 0..n {
        let row: f64 = coupling.gamma[i].iter().sum();
        resid = resid.max((row - measure.masses[i]).abs());
        let col: f64 = coupling.gamma.iter().map(|r| r[i]).sum();
        resid = resid.max((col - tilted.masses[i]).abs());
        for j in 0..n {
            let x = coupling.gamma[i][j];
            if x < 0.0 {
                resid = resid.max(-x);
            }
            if g[i] > g[j] {
                violating += x.abs();
            }
        }
    }
    Ok(CouplingReport { max_marginal_residual: resid, violating_mass: violating })
}

fn check_comonotone(f: &[f64], g: &[f64]) -> Result<()> {
    for i in 0..f.len() {
        for j in i + 1..f.len() {
            if (f[i] - f[j]) * (g[i] - g[j]) < 0.0 {
                return Err(GdiError::Precondition(format!("f and g are not co-monotone at points {i} and {j}")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TiltCheck {
    pub e_mu: f64,
    pub e_beta: f64,
    pub holds: bool,
}

/// E_μ[f] ≤ E_β[f] for β = exp_tilt(μ, g, η) and co-monotone (f, g).
pub fn tilt_inequality_check(measure: &DiscreteMeasure, f: &[f64], g: &[f64], eta: f64) -> Result<TiltCheck> {
    check_values(measure, f, "f")?;
    check_values(measure, g, "g")?;
    check_comonotone(f, g)?;
    let beta = exp_tilt(measure, g, eta)?;
    let e_mu = measure.expectation(f);
    let e_beta = beta.expectation(f);
    Ok(TiltCheck { e_mu, e_beta, holds: e_mu <= e_beta + 1e-12 })
}

/// |V^π(s₀) − V^{π'}(s₀) − (1/(1−γ)) E_{s∼d^π_{s₀}} E_{a∼π}[A^{π'}(s,a)]|.
pub fn perf_diff_residual(env: &TabularMdp, pi: &[Vec<f64>], pi_prime: &[Vec<f64>], start_state: usize) -> Result<f64> {
    if start_state >= env.n_states() {
        return Err(GdiError::InvalidArgument(format!("start state {start_state} out of range")));
    }
    let v = exact_policy_value(env, pi)?;
    let v_prime = exact_policy_value(env, pi_prime)?;
    let q_prime = exact_policy_q(env, pi_prime)?;
    let mut start = vec![0.0; env.n_states()];
    start[start_state] = 1.0;
    let d = discounted_visitation(env, pi, &start)?;
    let mut rhs = 0.0;
    for s in 0..env.n_states() {
        let adv: f64 = (0..env.n_actions()).map(|a| pi[s][a] * (q_prime[s][a] - v_prime[s])).sum();
        rhs += d[s] * adv;
    }
    rhs /= 1.0 - env.gamma();
    Ok((v[start_state] - v_prime[start_state] - rhs).abs())
}

/// A finite index set with a prior, the values the tilt favours, and the quantity to improve.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteInstance {
    pub prior: Vec<f64>,
    pub l_e: Vec<f64>,
    pub f: Vec<f64>,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuperiorTarget {
    pub baseline: f64,
    pub improved: f64,
    pub holds: bool,
}

/// Expected f under the prior versus under the prior tilted by η·L_E.
pub fn superior_target_check(instance: &FiniteInstance) -> Result<SuperiorTarget> {
    let prior = DiscreteMeasure::on_indices(instance.prior.clone())?;
    let t = tilt_inequality_check(&prior, &instance.f, &instance.l_e, instance.eta)?;
    Ok(SuperiorTarget { baseline: t.e_mu, improved: t.e_beta, holds: t.holds })
}

/// Counts and worst cases of the randomized sweeps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub couplings: usize,
    pub max_marginal_residual: f64,
    pub max_violating_mass: f64,
    pub tilt_instances: usize,
    pub tilt_violations: usize,
    /// Smallest E_β[f] − E_μ[f] seen.
    pub min_tilt_gap: f64,
    pub superior_instances: usize,
    pub superior_violations: usize,
    pub min_superior_gap: f64,
    pub perf_diff_instances: usize,
    pub max_perf_diff_residual: f64,
    pub passed: bool,
}

/// How the sweep builds its couplings; swapping in a faulty builder must fail the suite.
pub type CouplingBuilder = fn(&DiscreteMeasure, &[f64]) -> Result<Coupling>;

pub fn faulty_coupling(measure: &DiscreteMeasure, g: &[f64]) -> Result<Coupling> {
    let tilted = exp_tilt(measure, g, 1.0)?;
    Ok(independent_coupling(measure, &tilted))
}

pub const COUPLING_TOL: f64 = 1e-9;
pub const PERF_DIFF_TOL: f64 = 1e-8;

fn random_masses<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut m: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..1.0) }).collect();
    if m.iter().all(|&x| x == 0.0) {
        m[0] = 1.0;
    }
    let total: f64 = m.iter().sum();
    m.iter_mut().for_each(|x| *x /= total);
    m
}

fn random_points<R: Rng>(n: usize, p: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..p).map(|_| rng.gen::<f64>()).collect()).collect()
}

/// g(x) = c·x + amplitude·sin(ω·Σx), occasionally rounded to force ties.
fn random_g<R: Rng>(points: &[Vec<f64>], rng: &mut R) -> Vec<f64> {
    let p = points[0].len();
    let c: Vec<f64> = (0..p).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let amp = rng.gen_range(0.0..2.0);
    let omega = rng.gen_range(0.0..10.0);
    let ties = rng.gen_bool(0.3);
    points
        .iter()
        .map(|x| {
            let v = c.iter().zip(x).map(|(c, x)| c * x).sum::<f64>() + amp * (omega * x.iter().sum::<f64>()).sin();
            if ties {
                (v * 2.0).round() / 2.0
            } else {
                v
            }
        })
        .collect()
}

/// Random non-decreasing map applied to g.
fn comonotone_f<R: Rng>(g: &[f64], rng: &mut R) -> Vec<f64> {
    let kind = rng.gen_range(0..3);
    let (a, b) = (rng.gen_range(0.0..2.0), rng.gen_range(-1.0..1.0));
    g.iter()
        .map(|&t| match kind {
            0 => a * t + b,
            1 => a * (t - b).tanh() + t.powi(3),
            _ => {
                if t >= b {
                    1.0
                } else {
                    0.0
                }
            }
        })
        .collect()
}

pub fn random_coupling_instance<R: Rng>(rng: &mut R) -> (DiscreteMeasure, Vec<f64>) {
    let n = rng.gen_range(1..=20);
    let p = rng.gen_range(1..=2);
    let points = random_points(n, p, rng);
    let g = random_g(&points, rng);
    let masses = random_masses(n, rng);
    (DiscreteMeasure { points, masses }, g)
}

pub fn random_tilt_instance<R: Rng>(rng: &mut R) -> (DiscreteMeasure, Vec<f64>, Vec<f64>, f64) {
    let n = rng.gen_range(1..=30);
    let p = rng.gen_range(1..=3);
    let points = random_points(n, p, rng);
    let g = random_g(&points, rng);
    let f = comonotone_f(&g, rng);
    let eta = [0.1, 1.0, 10.0][rng.gen_range(0..3)] * rng.gen_range(0.5..2.0);
    (DiscreteMeasure { points, masses: random_masses(n, rng) }, f, g, eta)
}

pub fn random_finite_instance<R: Rng>(rng: &mut R) -> FiniteInstance {
    let n = rng.gen_range(1..=12);
    let l_e: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let f = comonotone_f(&l_e, rng);
    FiniteInstance { prior: random_masses(n, rng), l_e, f, eta: [0.1, 1.0, 10.0][rng.gen_range(0..3)] }
}

pub struct SuiteSizes {
    pub couplings: usize,
    pub tilts: usize,
    pub superior: usize,
    pub perf_diff: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self { couplings: 200, tilts: 500, superior: 500, perf_diff: 100 }
    }
}

/// Runs every randomized sweep with fixed seeds derived from `seed`.
pub fn run_suite(seed: u64, sizes: &SuiteSizes, build: CouplingBuilder) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport {
        couplings: sizes.couplings,
        max_marginal_residual: 0.0,
        max_violating_mass: 0.0,
        tilt_instances: sizes.tilts,
        tilt_violations: 0,
        min_tilt_gap: f64::INFINITY,
        superior_instances: sizes.superior,
        superior_violations: 0,
        min_superior_gap: f64::INFINITY,
        perf_diff_instances: sizes.perf_diff,
        max_perf_diff_residual: 0.0,
        passed: false,
    };
    for _ in 0..sizes.couplings {
        let (mu, g) = random_coupling_instance(&mut rng);
        let tilted = exp_tilt(&mu, &g, 1.0)?;
        let c = build(&mu, &g)?;
        let r = verify_coupling(&c, &mu, &tilted, &g)?;
        report.max_marginal_residual = report.max_marginal_residual.max(r.max_marginal_residual);
        report.max_violating_mass = report.max_violating_mass.max(r.violating_mass);
    }
    for _ in 0..sizes.tilts {
        let (mu, f, g, eta) = random_tilt_instance(&mut rng);
        let t = tilt_inequality_check(&mu, &f, &g, eta)?;
        report.tilt_violations += usize::from(!t.holds);
        report.min_tilt_gap = report.min_tilt_gap.min(t.e_beta - t.e_mu);
    }
    for _ in 0..sizes.superior {
        let inst = random_finite_instance(&mut rng);
        let t = superior_target_check(&inst)?;
        report.superior_violations += usize::from(!t.holds);
        report.min_superior_gap = report.min_superior_gap.min(t.improved - t.baseline);
    }
    for _ in 0..sizes.perf_diff {
        let ns = rng.gen_range(1..=6);
        let na = rng.gen_range(1..=4);
        let env = make_random_mdp(ns, na, &mut rng)?;
        let pi = random_policy(ns, na, &mut rng);
        let pi_prime = random_policy(ns, na, &mut rng);
        let s0 = rng.gen_range(0..ns);
        report.max_perf_diff_residual = report.max_perf_diff_residual.max(perf_diff_residual(&env, &pi, &pi_prime, s0)?);
    }
    report.passed = report.max_marginal_residual < COUPLING_TOL
        && report.max_violating_mass == 0.0
        && report.tilt_violations == 0
        && report.superior_violations == 0
        && report.max_perf_diff_residual < PERF_DIFF_TOL;
    Ok(report)
}
