//! Tabular MDPs, trajectory generation and exact dynamic-programming oracles.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{GdiError, Result};
use crate::util::{check_distribution, sample_categorical};

const ROW_TOL: f64 = 1e-12;

/// Finite MDP with deterministic expected rewards.
///
/// Terminal states are absorbing and pay nothing; `new` enforces that.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `transition[(s * n_actions + a) * n_states + s2]`
    transition: Vec<f64>,
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
    terminal: Vec<bool>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
        terminal: Vec<bool>,
        gamma: f64,
    ) -> Result<Self> {
        let bad = |m: String| Err(GdiError::InvalidEnv(m));
        if n_states == 0 || n_actions == 0 {
            return bad("need at least one state and one action".into());
        }
        if transition.len() != n_states * n_actions * n_states {
            return bad(format!("transition has {} entries", transition.len()));
        }
        if reward.len() != n_states * n_actions || initial_dist.len() != n_states || terminal.len() != n_states {
            return bad("reward/initial/terminal shape mismatch".into());
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return bad(format!("discount {gamma} outside (0,1)"));
        }
        if let Some(r) = reward.iter().find(|r| !r.is_finite()) {
            return bad(format!("reward {r}"));
        }
        for sa in 0..n_states * n_actions {
            let row = &transition[sa * n_states..(sa + 1) * n_states];
            check_distribution(row, ROW_TOL, &format!("P(.|s,a) row {sa}")).map_err(GdiError::InvalidEnv)?;
        }
        check_distribution(&initial_dist, ROW_TOL, "initial distribution").map_err(GdiError::InvalidEnv)?;
        for s in (0..n_states).filter(|&s| terminal[s]) {
            for a in 0..n_actions {
                let sa = s * n_actions + a;
                if reward[sa] != 0.0 || transition[sa * n_states + s] != 1.0 {
                    return bad(format!("terminal state {s} must be absorbing with zero reward"));
                }
            }
        }
        Ok(Self { n_states, n_actions, transition, reward, initial_dist, terminal, gamma })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let sa = s * self.n_actions + a;
        &self.transition[sa * self.n_states..(sa + 1) * self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// Copy of the MDP with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut env = self.clone();
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(GdiError::InvalidEnv(format!("discount {gamma} outside (0,1)")));
        }
        env.gamma = gamma;
        Ok(env)
    }

    /// Copy of the MDP with a different start distribution.
    pub fn with_initial_dist(&self, initial_dist: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward.clone(),
            initial_dist,
            self.terminal.clone(),
            self.gamma,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub next_state: usize,
    pub reward: f64,
    pub done: bool,
}

/// One episode (or a truncated prefix of one).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub behavior_probs: Vec<Vec<f64>>,
    /// State reached after the last action.
    pub final_state: usize,
    pub episode_return: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

pub fn reset<R: Rng + ?Sized>(env: &TabularMdp, rng: &mut R) -> usize {
    sample_categorical(&env.initial_dist, rng)
}

pub fn step<R: Rng + ?Sized>(env: &TabularMdp, state: usize, action: usize, rng: &mut R) -> Result<Transition> {
    if state >= env.n_states {
        return Err(GdiError::InvalidArgument(format!("state {state} out of range")));
    }
    if action >= env.n_actions {
        return Err(GdiError::ActionOutOfRange { action, n_actions: env.n_actions });
    }
    if env.terminal[state] {
        return Err(GdiError::TerminalState(state));
    }
    let next_state = sample_categorical(env.transition_row(state, action), rng);
    Ok(Transition { next_state, reward: env.reward(state, action), done: env.terminal[next_state] })
}

/// Runs `policy` from a fresh start state until termination or `max_steps`.
pub fn rollout<R, P>(env: &TabularMdp, mut policy: P, max_steps: usize, rng: &mut R) -> Result<Trajectory>
where
    R: Rng + ?Sized,
    P: FnMut(usize) -> Vec<f64>,
{
    if max_steps == 0 {
        return Err(GdiError::InvalidArgument("max_steps must be positive".into()));
    }
    let mut traj = Trajectory::default();
    let mut s = reset(env, rng);
    while traj.len() < max_steps && !env.terminal[s] {
        let probs = policy(s);
        if probs.len() != env.n_actions {
            return Err(GdiError::InvalidArgument(format!("policy returned {} probabilities", probs.len())));
        }
        let a = sample_categorical(&probs, rng);
        let t = step(env, s, a, rng)?;
        traj.states.push(s);
        traj.actions.push(a);
        traj.rewards.push(t.reward);
        traj.dones.push(t.done);
        traj.behavior_probs.push(probs);
        traj.episode_return += t.reward;
        s = t.next_state;
    }
    traj.final_state = s;
    Ok(traj)
}

pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, &r| r + gamma * acc)
}

fn check_policy(env: &TabularMdp, policy: &[Vec<f64>]) -> Result<()> {
    if policy.len() != env.n_states {
        return Err(GdiError::InvalidArgument(format!("policy has {} rows", policy.len())));
    }
    for (s, row) in policy.iter().enumerate() {
        if row.len() != env.n_actions {
            return Err(GdiError::InvalidArgument(format!("policy row {s} has {} entries", row.len())));
        }
        check_distribution(row, 1e-9, &format!("policy row {s}")).map_err(GdiError::InvalidArgument)?;
    }
    Ok(())
}

/// State-to-state kernel and expected reward under `policy`.
pub fn policy_kernel(env: &TabularMdp, policy: &[Vec<f64>]) -> (DMatrix<f64>, DVector<f64>) {
    let n = env.n_states;
    let mut p = DMatrix::zeros(n, n);
    let mut r = DVector::zeros(n);
    for s in 0..n {
        for a in 0..env.n_actions {
            let w = policy[s][a];
            if w == 0.0 {
                continue;
            }
            r[s] += w * env.reward(s, a);
            for (s2, &q) in env.transition_row(s, a).iter().enumerate() {
                p[(s, s2)] += w * q;
            }
        }
    }
    (p, r)
}

fn solve(m: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    m.lu().solve(&b).ok_or_else(|| GdiError::InvalidEnv("singular policy-evaluation system".into()))
}

/// V^π from the linear system (I − γP_π)V = r_π.
pub fn exact_policy_value(env: &TabularMdp, policy: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_policy(env, policy)?;
    let (p, r) = policy_kernel(env, policy);
    let n = env.n_states;
    let v = solve(DMatrix::identity(n, n) - p * env.gamma, r)?;
    Ok(v.iter().copied().collect())
}

/// Q^π(s,a) = r(s,a) + γ Σ P(s'|s,a) V^π(s'), row-major by state.
pub fn exact_policy_q(env: &TabularMdp, policy: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let v = exact_policy_value(env, policy)?;
    Ok(q_from_v(env, &v))
}

pub fn q_from_v(env: &TabularMdp, v: &[f64]) -> Vec<Vec<f64>> {
    (0..env.n_states)
        .map(|s| {
            (0..env.n_actions)
                .map(|a| {
                    let next: f64 = env.transition_row(s, a).iter().zip(v).map(|(p, v)| p * v).sum();
                    env.reward(s, a) + env.gamma * next
                })
                .collect()
        })
        .collect()
}

/// Normalized discounted visitation d = (1−γ)(I − γP_πᵀ)⁻¹ρ₀.
pub fn discounted_visitation(env: &TabularMdp, policy: &[Vec<f64>], start_dist: &[f64]) -> Result<Vec<f64>> {
    check_policy(env, policy)?;
    if start_dist.len() != env.n_states {
        return Err(GdiError::InvalidArgument("start distribution has wrong length".into()));
    }
    check_distribution(start_dist, 1e-10, "start distribution").map_err(GdiError::InvalidArgument)?;
    let (p, _) = policy_kernel(env, policy);
    let n = env.n_states;
    let rho = DVector::from_column_slice(start_dist);
    let d = solve(DMatrix::identity(n, n) - p.transpose() * env.gamma, rho)?;
    Ok(d.iter().map(|x| (1.0 - env.gamma) * x).collect())
}

/// Corridor of `length + 1` states with the exit at the right end.
///
/// Action 0 moves left, action 1 moves right but slips left with probability
/// `slip`. Only the step into the exit pays: its expected reward is
/// `CHAIN_REWARD * (1 - slip)`.
pub fn make_chain_env(length: usize, slip: f64) -> Result<TabularMdp> {
    make_chain_env_with(length, slip, 0.997, CHAIN_REWARD)
}

pub const CHAIN_REWARD: f64 = 10.0;

pub fn make_chain_env_with(length: usize, slip: f64, gamma: f64, goal_reward: f64) -> Result<TabularMdp> {
    if length == 0 {
        return Err(GdiError::InvalidEnv("chain length must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&slip) {
        return Err(GdiError::InvalidEnv(format!("slip {slip} outside [0,1)")));
    }
    let n = length + 1;
    let (na, goal) = (2, length);
    let mut p = vec![0.0; n * na * n];
    let mut r = vec![0.0; n * na];
    for s in 0..n {
        let base = |a: usize| (s * na + a) * n;
        if s == goal {
            p[base(0) + s] = 1.0;
            p[base(1) + s] = 1.0;
            continue;
        }
        let left = s.saturating_sub(1);
        p[base(0) + left] += 1.0;
        p[base(1) + s + 1] += 1.0 - slip;
        p[base(1) + left] += slip;
        if s + 1 == goal {
            r[s * na + 1] = goal_reward * (1.0 - slip);
        }
    }
    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut terminal = vec![false; n];
    terminal[goal] = true;
    TabularMdp::new(n, na, p, r, rho, terminal, gamma)
}

/// `w × h` grid (row-major cells) plus an absorbing exit state.
///
/// Actions are up, down, left, right; bumping a wall stays put. Any action in
/// the bottom-right cell pays 1 and moves to the exit.
pub fn make_grid_env(w: usize, h: usize) -> Result<TabularMdp> {
    if w == 0 || h == 0 {
        return Err(GdiError::InvalidEnv("grid sides must be at least 1".into()));
    }
    let cells = w * h;
    let (n, na, exit, goal) = (cells + 1, 4, cells, cells - 1);
    let mut p = vec![0.0; n * na * n];
    let mut r = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            let base = (s * na + a) * n;
            let next = if s == exit || s == goal {
                exit
            } else {
                let (x, y) = (s % w, s / w);
                match a {
                    0 if y > 0 => s - w,
                    1 if y + 1 < h => s + w,
                    2 if x > 0 => s - 1,
                    3 if x + 1 < w => s + 1,
                    _ => s,
                }
            };
            p[base + next] = 1.0;
            if s == goal {
                r[s * na + a] = 1.0;
            }
        }
    }
    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut terminal = vec![false; n];
    terminal[exit] = true;
    TabularMdp::new(n, na, p, r, rho, terminal, 0.99)
}

/// Dense random MDP without terminal states, γ = 0.9.
pub fn make_random_mdp<R: Rng + ?Sized>(n_s: usize, n_a: usize, rng: &mut R) -> Result<TabularMdp> {
    if n_s == 0 || n_a == 0 {
        return Err(GdiError::InvalidEnv("sizes must be at least 1".into()));
    }
    let mut p = Vec::with_capacity(n_s * n_a * n_s);
    for _ in 0..n_s * n_a {
        p.extend(random_distribution(n_s, rng));
    }
    let r = (0..n_s * n_a).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let rho = random_distribution(n_s, rng);
    TabularMdp::new(n_s, n_a, p, r, rho, vec![false; n_s], 0.9)
}

/// Strictly positive random distribution, normalized so the entries sum to 1.
pub fn random_distribution<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

/// Random policy table with full support.
pub fn random_policy<R: Rng + ?Sized>(n_s: usize, n_a: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n_s).map(|_| random_distribution(n_a, rng)).collect()
}

pub fn uniform_policy(n_s: usize, n_a: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0 / n_a as f64; n_a]; n_s]
}
