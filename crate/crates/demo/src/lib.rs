//! WebAssembly bindings for the static page in `www/`.

use gdi_core::controller::{BanditMode, TileBandit, TileBanditSpec};
use gdi_core::policy::{mixture_from_advantages, IndexPoint};
use gdi_core::theory::{exp_tilt, uttc_coupling, verify_coupling, DiscreteMeasure};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Action probabilities of the (1/τ₁, 1/τ₂, ε) mixture over two advantage vectors.
#[wasm_bindgen]
pub fn mixture(a1: &[f64], a2: &[f64], inv_tau1: f64, inv_tau2: f64, epsilon: f64) -> Result<Vec<f64>, JsError> {
    if a1.len() != a2.len() || a1.is_empty() {
        return Err(js_err("advantage vectors must be non-empty and of equal length"));
    }
    let lambda = IndexPoint::from_inverse(inv_tau1, inv_tau2, epsilon).map_err(js_err)?;
    Ok(mixture_from_advantages(a1, a2, &lambda))
}

/// One-dimensional tile bandit on [0, 50] chasing the peak of −(x − peak)².
#[wasm_bindgen]
pub struct BanditDemo {
    bandit: TileBandit,
    rng: ChaCha8Rng,
    peak: f64,
    last: Vec<f64>,
}

#[wasm_bindgen]
impl BanditDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, peak: f64, random_mode: bool, ucb_c: f64) -> Result<BanditDemo, JsError> {
        let spec = TileBanditSpec {
            mode: if random_mode { BanditMode::Random } else { BanditMode::Argmax },
            lower: vec![0.0],
            upper: vec![50.0],
            lr: 0.1,
            candidates: 1,
            acc: vec![1.0],
            ta: vec![2.0],
            to: vec![0.0],
            ucb_c,
        };
        Ok(BanditDemo {
            bandit: TileBandit::new(spec).map_err(js_err)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            peak,
            last: Vec::new(),
        })
    }

    /// Runs `n` sample/update cycles and returns the last sampled points.
    pub fn step(&mut self, n: u32) -> Result<Vec<f64>, JsError> {
        self.last.clear();
        for _ in 0..n {
            let xs = self.bandit.sample_candidates(&mut self.rng).map_err(js_err)?;
            for x in xs {
                let g = -(x[0] - self.peak).powi(2);
                self.bandit.update(&x, g).map_err(js_err)?;
                self.last.push(x[0]);
            }
        }
        Ok(self.last.iter().rev().take(32).copied().collect())
    }

    pub fn scores(&self) -> Vec<f64> {
        self.bandit.score_blocks()
    }

    pub fn values(&self) -> Result<Vec<f64>, JsError> {
        (0..self.bandit.n_blocks()).map(|b| self.bandit.evaluate_block(b).map_err(js_err)).collect()
    }

    pub fn counts(&self) -> Result<Vec<f64>, JsError> {
        (0..self.bandit.n_blocks()).map(|b| self.bandit.block_count(b).map(|c| c as f64).map_err(js_err)).collect()
    }

    pub fn draws(&self) -> f64 {
        self.bandit.total_count() as f64
    }
}

#[derive(Serialize)]
struct CouplingView {
    tilted: Vec<f64>,
    gamma: Vec<Vec<f64>>,
    max_marginal_residual: f64,
    violating_mass: f64,
    e_mu: f64,
    e_beta: f64,
}

/// Tilts `masses` by exp(g) and couples the two; returns a JSON document.
#[wasm_bindgen]
pub fn tilt_coupling(masses: &[f64], g: &[f64]) -> Result<String, JsError> {
    let mu = DiscreteMeasure::on_indices(masses.to_vec()).map_err(js_err)?;
    let beta = exp_tilt(&mu, g, 1.0).map_err(js_err)?;
    let coupling = uttc_coupling(&mu, g).map_err(js_err)?;
    let report = verify_coupling(&coupling, &mu, &beta, g).map_err(js_err)?;
    let view = CouplingView {
        e_mu: mu.expectation(g),
        e_beta: beta.expectation(g),
        tilted: beta.masses,
        gamma: coupling.gamma,
        max_marginal_residual: report.max_marginal_residual,
        violating_mass: report.violating_mass,
    };
    serde_json::to_string(&view).map_err(js_err)
}
