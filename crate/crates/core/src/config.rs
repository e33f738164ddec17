//! Run configuration read from a JSON document.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected so typos do not silently fall back to defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::BanditConfig;
use crate::env::{make_chain_env, make_grid_env, make_random_mdp, TabularMdp};
use crate::error::{GdiError, Result};
use crate::learner::LossWeights;
use crate::policy::IndexPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Chain,
    Grid,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One shared head, bandit over (τ₁, τ₂, ε).
    GdiI3,
    /// Two heads trained on different reward shapes, bandit over (τ₁, τ₂, ε).
    GdiH3,
    /// One shared head, bandit over τ only.
    GdiI1,
    /// One shared head, λ never changes.
    FixedLambda,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::GdiI3, Mode::GdiH3, Mode::GdiI1, Mode::FixedLambda];

    pub fn name(self) -> &'static str {
        match self {
            Mode::GdiI3 => "gdi_i3",
            Mode::GdiH3 => "gdi_h3",
            Mode::GdiI1 => "gdi_i1",
            Mode::FixedLambda => "fixed_lambda",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = GdiError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| GdiError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvKind,
    pub chain_length: usize,
    pub chain_slip: f64,
    pub grid_width: usize,
    pub grid_height: usize,
    pub random_states: usize,
    pub random_actions: usize,
    pub random_seed: u64,
    /// Episodes are cut after this many steps; the partial return still counts.
    pub max_episode_steps: usize,

    pub mode: Mode,
    pub total_frames: u64,
    pub segment_length: usize,
    pub batch_size: usize,
    /// Learner publishes parameters every `d_push` updates.
    pub d_push: u64,
    /// Actors fetch parameters every `d_pull` steps.
    pub d_pull: u64,
    pub actors: usize,
    pub seed: u64,
    /// SGD passes over each batch.
    pub replay: usize,
    pub step_size: f64,
    /// Single thread, round-robin actors; byte-for-byte reproducible.
    pub deterministic: bool,
    /// Fraction of the run, measured in frames, whose episodes form the final window.
    pub final_window: f64,

    pub learner: LossWeights,
    pub bandit: BanditConfig,
    /// [1/τ₁, 1/τ₂, ε] used by `fixed_lambda`.
    pub fixed_lambda: [f64; 3],
    /// Seeds swept by ablations.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::Chain,
            chain_length: 8,
            chain_slip: 0.1,
            grid_width: 4,
            grid_height: 4,
            random_states: 6,
            random_actions: 3,
            random_seed: 0,
            max_episode_steps: 200,
            mode: Mode::GdiI3,
            total_frames: 200_000,
            segment_length: 16,
            batch_size: 8,
            d_push: 25,
            d_pull: 64,
            actors: 4,
            seed: 0,
            replay: 2,
            step_size: 0.05,
            deterministic: true,
            final_window: 0.1,
            learner: LossWeights::default(),
            bandit: BanditConfig::default(),
            fixed_lambda: [1.0, 0.0, 1.0],
            seeds: (0..5).collect(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| GdiError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GdiError::Config(m));
        if self.d_push == 0 || self.d_pull == 0 {
            return bad("d_push and d_pull must be at least 1".into());
        }
        if self.segment_length == 0 || self.batch_size == 0 || self.actors == 0 || self.replay == 0 {
            return bad("segment_length, batch_size, actors and replay must be positive".into());
        }
        if self.total_frames < self.segment_length as u64 {
            return bad(format!("total_frames {} below segment_length {}", self.total_frames, self.segment_length));
        }
        if self.max_episode_steps == 0 {
            return bad("max_episode_steps must be positive".into());
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step_size {}", self.step_size));
        }
        if !(self.final_window > 0.0 && self.final_window <= 1.0) {
            return bad(format!("final_window {} outside (0,1]", self.final_window));
        }
        self.learner.validate()?;
        self.bandit.validate()?;
        self.fixed_index()?;
        Ok(())
    }

    pub fn fixed_index(&self) -> Result<IndexPoint> {
        let [a, b, e] = self.fixed_lambda;
        IndexPoint::from_inverse(a, b, e).map_err(|e| GdiError::Config(format!("fixed_lambda: {e}")))
    }

    pub fn build_env(&self) -> Result<TabularMdp> {
        match self.env {
            EnvKind::Chain => make_chain_env(self.chain_length, self.chain_slip),
            EnvKind::Grid => make_grid_env(self.grid_width, self.grid_height),
            EnvKind::Random => {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.random_seed);
                make_random_mdp(self.random_states, self.random_actions, &mut rng)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_and_nested_sections() {
        let cfg = RunConfig::from_json(
            r#"{"mode": "gdi_h3", "total_frames": 1000, "learner": {"q_scale": 2.0}, "bandit": {"members": 3}}"#,
        )
        .unwrap();
        assert_eq!(cfg.mode, Mode::GdiH3);
        assert_eq!(cfg.learner.q_scale, 2.0);
        assert_eq!(cfg.learner.rho_bar, 1.05);
        assert_eq!(cfg.bandit.members, 3);
        assert_eq!(cfg.bandit.candidates, 3);
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(RunConfig::from_json(r#"{"d_push": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"totl_frames": 10}"#).is_err());
        assert!(RunConfig::from_json(r#"{"total_frames": 4, "segment_length": 16}"#).is_err());
        assert!(RunConfig::from_json(r#"{"mode": "gdi_x"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"fixed_lambda": [1.0, 0.0, 2.0]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"learner": {"rho_bar": 0.5}}"#).is_err());
    }

    #[test]
    fn fixed_lambda_default_is_plain_softmax() {
        let l = RunConfig::default().fixed_index().unwrap();
        assert_eq!(l.tau1, 1.0);
        assert!(l.tau2.is_infinite());
        assert_eq!(l.epsilon, 1.0);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
    }
}
