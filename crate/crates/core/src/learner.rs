//! Off-policy targets (V-trace, ReTrace), the combined loss and plain SGD.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::TabularMdp;
use crate::error::{GdiError, Result};
use crate::policy::{clamped_inv_temp, dueling_q, mixture_policy, softmax, softmax_scaled, Head, HeadLayout, IndexPoint, PolicyParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// ξ
    pub v_scale: f64,
    /// α
    pub q_scale: f64,
    /// β
    pub pi_scale: f64,
    /// ρ̄
    pub rho_bar: f64,
    /// c̄
    pub c_bar: f64,
    pub discount: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { v_scale: 1.0, q_scale: 10.0, pi_scale: 10.0, rho_bar: 1.05, c_bar: 1.05, discount: 0.997 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_bar > 0.0 && self.rho_bar >= self.c_bar) {
            return Err(GdiError::Config(format!("need rho_bar >= c_bar > 0, got {} / {}", self.rho_bar, self.c_bar)));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(GdiError::Config(format!("discount {} outside (0,1)", self.discount)));
        }
        if [self.v_scale, self.q_scale, self.pi_scale].iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(GdiError::Config("loss scalings must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Fixed-length slice of experience with the behavior distribution at every step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSegment {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    /// Log-shaped rewards.
    pub rewards: Vec<f64>,
    pub raw_rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub behavior_probs: Vec<Vec<f64>>,
    /// State after the last step; only read when the last step is not terminal.
    pub bootstrap_state: usize,
}

impl SampleSegment {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if [self.states.len(), self.rewards.len(), self.raw_rewards.len(), self.dones.len(), self.behavior_probs.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(GdiError::InvalidArgument("segment arrays are misaligned".into()));
        }
        for (t, (mu, &a)) in self.behavior_probs.iter().zip(&self.actions).enumerate() {
            if mu.get(a).copied().unwrap_or(0.0) <= 0.0 {
                return Err(GdiError::ZeroBehaviorProb(t));
            }
        }
        Ok(())
    }
}

pub fn reward_shape_log(r: f64) -> f64 {
    let sign = if r >= 0.0 { 1.0 } else { -1.0 };
    (r.abs() + 1.0).ln() * sign
}

pub fn reward_shape_pow(r: f64) -> f64 {
    r.signum() * ((r.abs() + 1.0).powf(0.25) - 1.0) + 0.001 * r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardShape {
    Identity,
    Log,
    Pow,
}

impl RewardShape {
    pub fn apply(self, r: f64) -> f64 {
        match self {
            RewardShape::Identity => r,
            RewardShape::Log => reward_shape_log(r),
            RewardShape::Pow => reward_shape_pow(r),
        }
    }
}

/// Reward shape trained by each head: the first head on log, the second on pow.
pub fn head_shape(head: usize) -> RewardShape {
    if head == 0 {
        RewardShape::Log
    } else {
        RewardShape::Pow
    }
}

/// π̃ ∝ min(ρ̄μ, π), the policy whose value V-trace converges to.
pub fn vtrace_target_policy(pi: &[f64], mu: &[f64], rho_bar: f64) -> Vec<f64> {
    let raw: Vec<f64> = pi.iter().zip(mu).map(|(&p, &m)| p.min(rho_bar * m)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / z).collect()
}

fn ratio(pi: f64, mu: f64, clip: f64) -> f64 {
    (pi / mu).min(clip)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VtraceTargets {
    /// v_s at every step.
    pub values: Vec<f64>,
    /// ρ_t(r_t + γ v_{t+1} − V(s_t)).
    pub advantages: Vec<f64>,
}

fn check_targets_input(seg: &SampleSegment, rewards: &[f64], pi: &[Vec<f64>], estimates: &[f64]) -> Result<()> {
    seg.validate()?;
    let n = seg.len();
    if rewards.len() != n || pi.len() != n || estimates.len() != n + 1 {
        return Err(GdiError::InvalidArgument(format!(
            "need {n} rewards and policies and {} estimates (last one for the bootstrap)",
            n + 1
        )));
    }
    Ok(())
}

/// V-trace targets for the segment's own (shaped) rewards.
///
/// `values` holds V(s_t) for every step followed by V(bootstrap_state).
pub fn vtrace_values(seg: &SampleSegment, pi: &[Vec<f64>], values: &[f64], w: &LossWeights) -> Result<VtraceTargets> {
    vtrace_values_with(seg, &seg.rewards, pi, values, w)
}

pub fn vtrace_values_with(
    seg: &SampleSegment,
    rewards: &[f64],
    pi: &[Vec<f64>],
    values: &[f64],
    w: &LossWeights,
) -> Result<VtraceTargets> {
    check_targets_input(seg, rewards, pi, values)?;
    let n = seg.len();
    let g = w.discount;
    let mut vs = vec![0.0; n + 1];
    vs[n] = values[n];
    let mut adv = vec![0.0; n];
    for t in (0..n).rev() {
        let a = seg.actions[t];
        let (p, m) = (pi[t][a], seg.behavior_probs[t][a]);
        let rho = ratio(p, m, w.rho_bar);
        let c = ratio(p, m, w.c_bar);
        // v_t = V_t + ρδ_t + γc(v_{t+1} − V_{t+1}), regrouped so that ρ = c = 1
        // reduces exactly to r_t + γ v_{t+1}
        let own = (1.0 - rho) * values[t] + rho * rewards[t];
        let (next_v, next_vs) = if seg.dones[t] { (0.0, 0.0) } else { (values[t + 1], vs[t + 1]) };
        vs[t] = own + g * (c * next_vs + (rho - c) * next_v);
        adv[t] = rho * (rewards[t] + g * next_vs - values[t]);
    }
    vs.truncate(n);
    Ok(VtraceTargets { values: vs, advantages: adv })
}

/// ReTrace targets for Q(s_t, a_t).
///
/// `q` holds Q(s_t, a_t) for every step followed by the bootstrap estimate.
pub fn retrace_values(seg: &SampleSegment, pi: &[Vec<f64>], q: &[f64], w: &LossWeights) -> Result<Vec<f64>> {
    retrace_values_with(seg, &seg.rewards, pi, q, w)
}

pub fn retrace_values_with(
    seg: &SampleSegment,
    rewards: &[f64],
    pi: &[Vec<f64>],
    q: &[f64],
    w: &LossWeights,
) -> Result<Vec<f64>> {
    check_targets_input(seg, rewards, pi, q)?;
    let n = seg.len();
    let g = w.discount;
    let mut out = vec![0.0; n];
    for t in (0..n).rev() {
        out[t] = if seg.dones[t] {
            rewards[t]
        } else if t + 1 == n {
            rewards[t] + g * q[n]
        } else {
            let a = seg.actions[t + 1];
            let c = ratio(pi[t + 1][a], seg.behavior_probs[t + 1][a], w.c_bar);
            // Q_t + δ_t + γc(target_{t+1} − Q_{t+1}) regrouped
            rewards[t] + g * (c * out[t + 1] + (1.0 - c) * q[t + 1])
        };
    }
    Ok(out)
}

/// Expected V-trace operator on a tabular MDP (discount taken from `env`).
pub fn vtrace_operator(env: &TabularMdp, pi: &[Vec<f64>], mu: &[Vec<f64>], v: &[f64], w: &LossWeights) -> Vec<f64> {
    let n = env.n_states();
    let g = env.gamma();
    let mut b = DVector::zeros(n);
    let mut c = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..env.n_actions() {
            let row = env.transition_row(s, a);
            let mu_rho = pi[s][a].min(w.rho_bar * mu[s][a]);
            let mu_c = pi[s][a].min(w.c_bar * mu[s][a]);
            let next: f64 = row.iter().zip(v).map(|(p, v)| p * v).sum();
            b[s] += mu_rho * (env.reward(s, a) + g * next - v[s]);
            for (s2, p) in row.iter().enumerate() {
                c[(s, s2)] += mu_c * p;
            }
        }
    }
    let d = (DMatrix::identity(n, n) - c * g).lu().solve(&b).expect("trace kernel is substochastic");
    v.iter().zip(d.iter()).map(|(v, d)| v + d).collect()
}

/// Expected ReTrace operator on a tabular MDP, next actions drawn from μ.
pub fn retrace_operator(env: &TabularMdp, pi: &[Vec<f64>], mu: &[Vec<f64>], q: &[Vec<f64>], w: &LossWeights) -> Vec<Vec<f64>> {
    let (ns, na) = (env.n_states(), env.n_actions());
    let g = env.gamma();
    let idx = |s: usize, a: usize| s * na + a;
    let mu_q: Vec<f64> = (0..ns).map(|s| (0..na).map(|a| mu[s][a] * q[s][a]).sum()).collect();
    let mut delta = DVector::zeros(ns * na);
    let mut k = DMatrix::zeros(ns * na, ns * na);
    for s in 0..ns {
        for a in 0..na {
            let row = env.transition_row(s, a);
            let next: f64 = row.iter().zip(&mu_q).map(|(p, v)| p * v).sum();
            delta[idx(s, a)] = env.reward(s, a) + g * next - q[s][a];
            for (s2, p) in row.iter().enumerate() {
                for a2 in 0..na {
                    k[(idx(s, a), idx(s2, a2))] = p * pi[s2][a2].min(w.c_bar * mu[s2][a2]);
                }
            }
        }
    }
    let d = (DMatrix::identity(ns * na, ns * na) - k * g).lu().solve(&delta).expect("trace kernel is substochastic");
    (0..ns).map(|s| (0..na).map(|a| q[s][a] + d[idx(s, a)]).collect()).collect()
}

/// Regression targets and policy-gradient weights for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTargets {
    pub v: Vec<f64>,
    pub pg_advantage: Vec<f64>,
    pub q: Vec<f64>,
}

/// Target policy trained by `head` at `state`.
///
/// A single shared head learns the acting mixture at λ; separate heads each
/// learn their own temperature-1 softmax.
pub fn learning_policy(params: &PolicyParams, head: usize, lambda: &IndexPoint, state: usize) -> Vec<f64> {
    match params.layout() {
        HeadLayout::Isomorphic => mixture_policy(params, lambda, state),
        HeadLayout::Heterogeneous => softmax(&params.advantages(head, state)),
    }
}

pub fn compute_targets(
    params: &PolicyParams,
    seg: &SampleSegment,
    lambda: &IndexPoint,
    w: &LossWeights,
) -> Result<Vec<HeadTargets>> {
    seg.validate()?;
    let n = seg.len();
    (0..params.n_heads())
        .map(|k| {
            let rewards: Vec<f64> = if k == 0 {
                seg.rewards.clone()
            } else {
                seg.raw_rewards.iter().map(|&r| head_shape(k).apply(r)).collect()
            };
            let mut states = seg.states.clone();
            states.push(seg.bootstrap_state);
            let pi: Vec<Vec<f64>> = states.iter().map(|&s| learning_policy(params, k, lambda, s)).collect();
            let duel: Vec<_> = states.iter().map(|&s| dueling_q(params, k, s)).collect();
            let values: Vec<f64> = duel.iter().map(|d| d.value).collect();
            let mut q: Vec<f64> = (0..n).map(|t| duel[t].q[seg.actions[t]]).collect();
            q.push(pi[n].iter().zip(&duel[n].q).map(|(p, q)| p * q).sum());
            let vt = vtrace_values_with(seg, &rewards, &pi[..n], &values, w)?;
            let qt = retrace_values_with(seg, &rewards, &pi[..n], &q, w)?;
            Ok(HeadTargets { v: vt.values, pg_advantage: vt.advantages, q: qt })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    /// −(1/n) Σ adv·log π, before the β scaling.
    pub pg: f64,
    /// (1/n) Σ ½(v − V)², before ξ.
    pub v: f64,
    /// (1/n) Σ ½(q − Q)², before α.
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub components: Vec<LossComponents>,
    /// One gradient per parameter head, shaped like the head.
    pub gradients: Vec<Head>,
}

/// ∂ log π_a / ∂A for the learning policy of `head` at advantages `adv`.
fn dlogpi(params: &PolicyParams, lambda: &IndexPoint, adv: &[f64], a: usize) -> Vec<f64> {
    let na = adv.len();
    match params.layout() {
        HeadLayout::Heterogeneous => {
            let p = softmax(adv);
            (0..na).map(|b| f64::from(u8::from(a == b)) - p[b]).collect()
        }
        HeadLayout::Isomorphic => {
            let (k1, k2) = (clamped_inv_temp(lambda.tau1), clamped_inv_temp(lambda.tau2));
            let (p1, p2) = (softmax_scaled(adv, k1), softmax_scaled(adv, k2));
            let eps = lambda.epsilon;
            let pi_a = eps * p1[a] + (1.0 - eps) * p2[a];
            (0..na)
                .map(|b| {
                    let kd = f64::from(u8::from(a == b));
                    (eps * k1 * p1[a] * (kd - p1[b]) + (1.0 - eps) * k2 * p2[a] * (kd - p2[b])) / pi_a
                })
                .collect()
        }
    }
}

/// β·PG surrogate + ξ·V regression + α·Q regression, averaged over steps, with
/// gradients for every head. Targets are held fixed.
pub fn compute_losses(
    params: &PolicyParams,
    seg: &SampleSegment,
    lambda: &IndexPoint,
    targets: &[HeadTargets],
    w: &LossWeights,
) -> Result<LossOutput> {
    seg.validate()?;
    let n = seg.len();
    if n == 0 {
        return Err(GdiError::InvalidArgument("empty segment".into()));
    }
    if targets.len() != params.n_heads() || targets.iter().any(|t| t.v.len() != n || t.q.len() != n || t.pg_advantage.len() != n) {
        return Err(GdiError::InvalidArgument("targets do not match the segment and heads".into()));
    }
    let na = params.n_actions();
    let fm = params.feature_map();
    let inv_n = 1.0 / n as f64;
    let mut components = Vec::with_capacity(params.n_heads());
    let mut gradients = Vec::with_capacity(params.n_heads());
    let mut total = 0.0;
    for (k, tg) in targets.iter().enumerate() {
        let mut comp = LossComponents::default();
        let mut grad = Head::zeros(fm.dim(), na);
        for t in 0..n {
            let (s, a) = (seg.states[t], seg.actions[t]);
            let d = dueling_q(params, k, s);
            let pi = learning_policy(params, k, lambda, s);
            comp.pg -= inv_n * tg.pg_advantage[t] * pi[a].ln();
            let v_err = tg.v[t] - d.value;
            let q_err = tg.q[t] - d.q[a];
            comp.v += inv_n * 0.5 * v_err * v_err;
            comp.q += inv_n * 0.5 * q_err * q_err;

            // gradients w.r.t. the advantage vector A(s) and value V(s)
            let mut g_adv = vec![0.0; na];
            let dl = dlogpi(params, lambda, &d.advantage, a);
            for b in 0..na {
                g_adv[b] -= w.pi_scale * inv_n * tg.pg_advantage[t] * dl[b];
            }
            let mean_a: f64 = d.reference.iter().zip(&d.advantage).map(|(p, x)| p * x).sum();
            let dq = -w.q_scale * inv_n * q_err;
            for b in 0..na {
                let kd = f64::from(u8::from(a == b));
                g_adv[b] += dq * (kd - d.reference[b] * (1.0 + d.advantage[b] - mean_a));
            }
            let g_val = -w.v_scale * inv_n * v_err + dq;
            for (f, &phi) in fm.features(s).iter().enumerate() {
                if phi == 0.0 {
                    continue;
                }
                for b in 0..na {
                    grad.advantage[f * na + b] += phi * g_adv[b];
                }
                grad.value[f] += phi * g_val;
            }
        }
        total += w.pi_scale * comp.pg + w.v_scale * comp.v + w.q_scale * comp.q;
        components.push(comp);
        gradients.push(grad);
    }
    Ok(LossOutput { total, components, gradients })
}

/// params ← params − step·grad, then bumps the version.
pub fn apply_sgd(params: &mut PolicyParams, gradients: &[Head], step_size: f64) -> Result<u64> {
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(GdiError::InvalidArgument(format!("step size {step_size}")));
    }
    if gradients.len() != params.n_heads() {
        return Err(GdiError::InvalidArgument("one gradient per head required".into()));
    }
    for g in gradients {
        if g.advantage.iter().chain(&g.value).any(|x| !x.is_finite()) {
            return Err(GdiError::NonFinite("gradient".into()));
        }
    }
    for (h, g) in params.heads_mut().iter_mut().zip(gradients) {
        if h.advantage.len() != g.advantage.len() || h.value.len() != g.value.len() {
            return Err(GdiError::InvalidArgument("gradient shape mismatch".into()));
        }
        h.advantage.iter_mut().zip(&g.advantage).for_each(|(p, d)| *p -= step_size * d);
        h.value.iter_mut().zip(&g.value).for_each(|(p, d)| *p -= step_size * d);
    }
    params.version += 1;
    Ok(params.version)
}

/// Summary of one SGD step over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub total: f64,
    /// Batch-mean components, one per head.
    pub components: Vec<LossComponents>,
    pub version: u64,
}

/// Averages the per-segment gradients over `batch` and takes one SGD step.
pub fn sgd_batch(
    params: &mut PolicyParams,
    batch: &[(SampleSegment, IndexPoint)],
    w: &LossWeights,
    step_size: f64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(GdiError::InvalidArgument("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let dim = params.feature_map().dim();
    let mut grads = vec![Head::zeros(dim, params.n_actions()); params.n_heads()];
    let mut components = vec![LossComponents::default(); params.n_heads()];
    let mut total = 0.0;
    for (seg, lambda) in batch {
        let targets = compute_targets(params, seg, lambda, w)?;
        let out = compute_losses(params, seg, lambda, &targets, w)?;
        total += scale * out.total;
        for k in 0..grads.len() {
            let (g, o) = (&mut grads[k], &out.gradients[k]);
            g.advantage.iter_mut().zip(&o.advantage).for_each(|(a, b)| *a += scale * b);
            g.value.iter_mut().zip(&o.value).for_each(|(a, b)| *a += scale * b);
            let c = &mut components[k];
            c.pg += scale * out.components[k].pg;
            c.v += scale * out.components[k].v;
            c.q += scale * out.components[k].q;
        }
    }
    let version = apply_sgd(params, &grads, step_size)?;
    Ok(StepReport { total, components, version })
}
