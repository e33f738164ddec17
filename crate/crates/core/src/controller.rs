//! Tile-coded bandit ensemble over the search box.
//!
//! Each bandit keeps one tiling (weights `w`, counts `N`) and scores a coarser
//! grid of blocks; a block's value is the mean weight of the tiles it overlaps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GdiError, Result};
use crate::policy::{index_to_search, search_to_index, tau_from_search, IndexPoint, SearchCoordinates};

const SIGMA_FLOOR: f64 = 1e-12;
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BanditMode {
    Argmax,
    Random,
}

/// Constructor arguments for [`TileBandit`]; all vectors have one entry per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TileBanditSpec {
    pub mode: BanditMode,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub lr: f64,
    pub candidates: usize,
    /// Block width.
    pub acc: Vec<f64>,
    /// Tile width.
    pub ta: Vec<f64>,
    /// Tile offset.
    pub to: Vec<f64>,
    pub ucb_c: f64,
}

/// Floor that forgives quotients a few ulps below an integer.
fn snap_floor(q: f64) -> f64 {
    let r = q.round();
    if (q - r).abs() < SNAP {
        r
    } else {
        q.floor()
    }
}

fn snap_ceil(q: f64) -> f64 {
    let r = q.round();
    if (q - r).abs() < SNAP {
        r
    } else {
        q.ceil()
    }
}

#[derive(Debug, Clone)]
struct Axis {
    lower: f64,
    upper: f64,
    acc: f64,
    ta: f64,
    to: f64,
    n_tiles: usize,
    n_blocks: usize,
    /// Inclusive tile range overlapped by each block.
    block_tiles: Vec<(usize, usize)>,
    /// Inclusive block range overlapping each tile, if any.
    tile_blocks: Vec<Option<(usize, usize)>>,
}

impl Axis {
    fn new(lower: f64, upper: f64, acc: f64, ta: f64, to: f64) -> Result<Self> {
        let bad = |m: String| Err(GdiError::InvalidArgument(m));
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return bad(format!("bounds [{lower}, {upper}]"));
        }
        let width = upper - lower;
        if !(ta > 0.0 && ta <= width * (1.0 + SNAP)) {
            return bad(format!("tile width {ta} for range {width}"));
        }
        if !(acc > 0.0 && acc <= width * (1.0 + SNAP)) {
            return bad(format!("block width {acc} for range {width}"));
        }
        if !(to >= 0.0 && to.is_finite()) {
            return bad(format!("tile offset {to}"));
        }
        let n_tiles = (snap_ceil(width / ta) as usize).max(1);
        let n_blocks = (snap_ceil(width / acc) as usize).max(1);
        let mut axis = Self {
            lower,
            upper,
            acc,
            ta,
            to,
            n_tiles,
            n_blocks,
            block_tiles: Vec::with_capacity(n_blocks),
            tile_blocks: vec![None; n_tiles],
        };
        for i in 0..n_blocks {
            let (a, b) = axis.block_interval(i);
            let lo = axis.tile(a);
            let y = b - to;
            let hi = if y <= lower {
                0
            } else if y > upper {
                n_tiles - 1
            } else {
                (snap_ceil((y - lower) / ta) as usize).saturating_sub(1).min(n_tiles - 1)
            };
            axis.block_tiles.push((lo, hi.max(lo)));
        }
        for (i, &(lo, hi)) in axis.block_tiles.iter().enumerate() {
            for slot in &mut axis.tile_blocks[lo..=hi] {
                *slot = Some(match *slot {
                    None => (i, i),
                    Some((first, _)) => (first, i),
                });
            }
        }
        Ok(axis)
    }

    fn tile(&self, x: f64) -> usize {
        let y = (x - self.to).max(self.lower).min(self.upper);
        (snap_floor((y - self.lower) / self.ta) as usize).min(self.n_tiles - 1)
    }

    fn block(&self, x: f64) -> usize {
        let y = x.max(self.lower).min(self.upper);
        (snap_floor((y - self.lower) / self.acc) as usize).min(self.n_blocks - 1)
    }

    fn block_interval(&self, i: usize) -> (f64, f64) {
        let a = self.lower + i as f64 * self.acc;
        let b = (self.lower + (i + 1) as f64 * self.acc).min(self.upper);
        (a, b)
    }
}

fn flatten(index: &[usize], dims: impl Iterator<Item = usize>) -> usize {
    index.iter().zip(dims).fold(0, |acc, (&i, n)| acc * n + i)
}

fn unflatten(mut flat: usize, dims: &[usize]) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for (o, &n) in out.iter_mut().zip(dims).rev() {
        *o = flat % n;
        flat /= n;
    }
    out
}

/// Calls `f` on every multi-index in the inclusive box `ranges`.
fn for_each_in_box(ranges: &[(usize, usize)], mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = ranges.iter().map(|r| r.0).collect();
    loop {
        f(&idx);
        let mut d = ranges.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            if idx[d] < ranges[d].1 {
                idx[d] += 1;
                break;
            }
            idx[d] = ranges[d].0;
        }
    }
}

/// One tile-coded bandit.
#[derive(Debug, Clone)]
pub struct TileBandit {
    pub mode: BanditMode,
    pub lr: f64,
    pub candidates: usize,
    pub ucb_c: f64,
    axes: Vec<Axis>,
    w: Vec<f64>,
    n: Vec<u64>,
    total_count: u64,
    block_value: Vec<f64>,
    block_count: Vec<u64>,
}

impl TileBandit {
    pub fn new(spec: TileBanditSpec) -> Result<Self> {
        let p = spec.lower.len();
        if p == 0 || [spec.upper.len(), spec.acc.len(), spec.ta.len(), spec.to.len()].iter().any(|&l| l != p) {
            return Err(GdiError::InvalidArgument("bandit geometry vectors must share one non-zero length".into()));
        }
        if !(spec.lr > 0.0 && spec.lr.is_finite()) || !(spec.ucb_c >= 0.0) || spec.candidates == 0 {
            return Err(GdiError::InvalidArgument("lr > 0, ucb_c >= 0 and d >= 1 required".into()));
        }
        let axes = (0..p)
            .map(|d| Axis::new(spec.lower[d], spec.upper[d], spec.acc[d], spec.ta[d], spec.to[d]))
            .collect::<Result<Vec<_>>>()?;
        let n_tiles: usize = axes.iter().map(|a| a.n_tiles).product();
        let n_blocks: usize = axes.iter().map(|a| a.n_blocks).product();
        if spec.candidates > n_blocks {
            return Err(GdiError::InvalidArgument(format!(
                "{} candidates requested from {n_blocks} blocks",
                spec.candidates
            )));
        }
        Ok(Self {
            mode: spec.mode,
            lr: spec.lr,
            candidates: spec.candidates,
            ucb_c: spec.ucb_c,
            axes,
            w: vec![0.0; n_tiles],
            n: vec![0; n_tiles],
            total_count: 0,
            block_value: vec![0.0; n_blocks],
            block_count: vec![0; n_blocks],
        })
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn n_tiles(&self) -> usize {
        self.w.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.block_value.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn counts(&self) -> &[u64] {
        &self.n
    }

    pub fn total_count(&self) -> u64 {
        self.total_count
    }

    fn block_dims(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.n_blocks).collect()
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims() {
            return Err(GdiError::InvalidArgument(format!("point has {} coordinates, bandit has {}", x.len(), self.dims())));
        }
        Ok(())
    }

    /// Per-dimension tile index of `x` (clamped into range).
    pub fn tile_of(&self, x: &[f64]) -> Result<Vec<usize>> {
        self.check_point(x)?;
        Ok(self.axes.iter().zip(x).map(|(a, &v)| a.tile(v)).collect())
    }

    pub fn flat_tile(&self, tile: &[usize]) -> usize {
        flatten(tile, self.axes.iter().map(|a| a.n_tiles))
    }

    /// Flat index of the block containing `x` (clamped into the box).
    pub fn block_of(&self, x: &[f64]) -> Result<usize> {
        self.check_point(x)?;
        let idx: Vec<usize> = self.axes.iter().zip(x).map(|(a, &v)| a.block(v)).collect();
        Ok(flatten(&idx, self.axes.iter().map(|a| a.n_blocks)))
    }

    /// Box `[lo, hi)` of a block, per dimension.
    pub fn block_bounds(&self, block: usize) -> Result<Vec<(f64, f64)>> {
        self.check_block(block)?;
        let idx = unflatten(block, &self.block_dims());
        Ok(self.axes.iter().zip(idx).map(|(a, i)| a.block_interval(i)).collect())
    }

    fn check_block(&self, block: usize) -> Result<()> {
        if block >= self.n_blocks() {
            return Err(GdiError::InvalidArgument(format!("block {block} out of range ({} blocks)", self.n_blocks())));
        }
        Ok(())
    }

    fn block_tile_ranges(&self, block: usize) -> Vec<(usize, usize)> {
        let idx = unflatten(block, &self.block_dims());
        self.axes.iter().zip(idx).map(|(a, i)| a.block_tiles[i]).collect()
    }

    /// Flat indices of the tiles whose interval meets the block, in every dimension.
    pub fn block_tiles(&self, block: usize) -> Result<Vec<usize>> {
        self.check_block(block)?;
        let mut out = Vec::new();
        for_each_in_box(&self.block_tile_ranges(block), |t| out.push(self.flat_tile(t)));
        Ok(out)
    }

    /// Mean tile weight over the block, recomputed from `w`.
    pub fn evaluate_block(&self, block: usize) -> Result<f64> {
        let tiles = self.block_tiles(block)?;
        Ok(tiles.iter().map(|&t| self.w[t]).sum::<f64>() / tiles.len() as f64)
    }

    /// Sum of tile counts over the block.
    pub fn block_count(&self, block: usize) -> Result<u64> {
        self.check_block(block)?;
        Ok(self.block_count[block])
    }

    fn refresh_block(&mut self, block: usize) {
        let mut sum = 0.0;
        let mut count = 0;
        let mut len = 0usize;
        for_each_in_box(&self.block_tile_ranges(block), |t| {
            let j = flatten(t, self.axes.iter().map(|a| a.n_tiles));
            sum += self.w[j];
            count += self.n[j];
            len += 1;
        });
        self.block_value[block] = sum / len as f64;
        self.block_count[block] = count;
    }

    /// w_j += lr·(g − V_i) for the tile j under `x`, where V_i is the value of `x`'s block.
    pub fn update(&mut self, x: &[f64], g: f64) -> Result<()> {
        if !g.is_finite() {
            return Err(GdiError::NonFinite(format!("bandit reward {g}")));
        }
        let block = self.block_of(x)?;
        let block_idx = unflatten(block, &self.block_dims());
        // keep the tile inside the block's own tile range so boundary points stay consistent
        let tile: Vec<usize> = self
            .axes
            .iter()
            .zip(x)
            .zip(&block_idx)
            .map(|((a, &v), &i)| {
                let (lo, hi) = a.block_tiles[i];
                a.tile(v).clamp(lo, hi)
            })
            .collect();
        let j = self.flat_tile(&tile);
        let v_i = self.block_value[block];
        self.w[j] += self.lr * (g - v_i);
        self.n[j] += 1;
        self.total_count += 1;
        let affected: Vec<(usize, usize)> = self
            .axes
            .iter()
            .zip(&tile)
            .map(|(a, &t)| a.tile_blocks[t].expect("tile under a block overlaps it"))
            .collect();
        let dims = self.block_dims();
        let mut blocks = Vec::new();
        for_each_in_box(&affected, |b| blocks.push(flatten(b, dims.iter().copied())));
        for b in blocks {
            self.refresh_block(b);
        }
        Ok(())
    }

    /// z-scored block values plus the UCB bonus c·sqrt(log(1+ΣN)/(1+N_i)).
    pub fn score_blocks(&self) -> Vec<f64> {
        let n = self.block_value.len() as f64;
        let mu = self.block_value.iter().sum::<f64>() / n;
        let var = self.block_value.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let sigma = var.sqrt();
        let log_total = (self.total_count as f64).ln_1p();
        self.block_value
            .iter()
            .zip(&self.block_count)
            .map(|(&v, &c)| {
                let z = if sigma < SIGMA_FLOOR { 0.0 } else { (v - mu) / sigma };
                z + self.ucb_c * (log_total / (1.0 + c as f64)).sqrt()
            })
            .collect()
    }

    /// Blocks chosen by one draw: top-d by score, or d softmax draws without replacement.
    pub fn select_blocks<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let scores = self.score_blocks();
        let d = self.candidates;
        match self.mode {
            BanditMode::Argmax => {
                let mut top: Vec<usize> = Vec::with_capacity(d + 1);
                for i in 0..scores.len() {
                    // stable insertion keeps the lower index ahead on ties
                    let pos = top.iter().position(|&j| scores[i] > scores[j]).unwrap_or(top.len());
                    if pos < d {
                        top.insert(pos, i);
                        top.truncate(d);
                    }
                }
                top
            }
            BanditMode::Random => {
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut weights: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let mut chosen = Vec::with_capacity(d);
                for _ in 0..d {
                    let total: f64 = weights.iter().sum();
                    let mut u = rng.gen::<f64>() * total;
                    let mut pick = None;
                    for (i, &w) in weights.iter().enumerate() {
                        if w > 0.0 {
                            pick = Some(i);
                            if u < w {
                                break;
                            }
                            u -= w;
                        }
                    }
                    let i = pick.expect("at least d blocks carry weight");
                    weights[i] = 0.0;
                    chosen.push(i);
                }
                chosen
            }
        }
    }

    /// d points, one uniform inside each selected block.
    pub fn sample_candidates<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let blocks = self.select_blocks(rng);
        blocks
            .into_iter()
            .map(|b| {
                Ok(self
                    .block_bounds(b)?
                    .into_iter()
                    .map(|(lo, hi)| lo + rng.gen::<f64>() * (hi - lo))
                    .collect())
            })
            .collect()
    }
}

/// Distributions the ensemble members are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BanditConfig {
    pub members: usize,
    pub candidates: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Block width per dimension.
    pub accuracy: Vec<f64>,
    /// Tile width as a multiple of the block width, drawn once per member.
    pub tile_multipliers: Vec<f64>,
    /// Tile offsets are drawn from `[0, offset_max]` block widths, then wrapped into one tile.
    pub offset_max: f64,
    pub learning_rates: Vec<f64>,
    /// Probability that a member runs in argmax mode.
    pub argmax_probability: f64,
    pub ucb_c: f64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            members: 7,
            candidates: 3,
            lower: vec![0.0, 0.0, 0.0],
            upper: vec![50.0, 50.0, 1.0],
            accuracy: vec![1.0, 1.0, 0.1],
            tile_multipliers: vec![2.0, 3.0, 4.0],
            offset_max: 60.0,
            learning_rates: vec![0.05, 0.1, 0.2],
            argmax_probability: 0.5,
            ucb_c: 1.0,
        }
    }
}

impl BanditConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GdiError::Config(m.to_string()));
        if self.members == 0 || self.candidates == 0 {
            return bad("bandit members and candidates must be positive");
        }
        if self.lower.len() != 3 || self.upper.len() != 3 || self.accuracy.len() != 3 {
            return bad("bandit lower/upper/accuracy need three entries (x1, x2, x3)");
        }
        if self.tile_multipliers.is_empty() || self.learning_rates.is_empty() {
            return bad("bandit tile_multipliers and learning_rates must be non-empty");
        }
        if !(0.0..=1.0).contains(&self.argmax_probability) || !(self.offset_max >= 0.0) || !(self.ucb_c >= 0.0) {
            return bad("bandit argmax_probability in [0,1], offset_max >= 0, ucb_c >= 0");
        }
        if self.upper[2] > 1.0 || self.lower.iter().any(|&l| l < 0.0) {
            return bad("bandit box must stay inside x >= 0 and x3 <= 1");
        }
        Ok(())
    }
}

/// Which coordinates the ensemble searches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchSpace {
    /// (x1, x2, x3) → (τ₁, τ₂, ε).
    Full,
    /// x1 only → (τ₁, ∞, 1), i.e. π = softmax(A/τ₁).
    Temperature,
}

impl SearchSpace {
    fn dims(self) -> usize {
        match self {
            SearchSpace::Full => 3,
            SearchSpace::Temperature => 1,
        }
    }

    pub fn to_index(self, x: &[f64]) -> IndexPoint {
        match self {
            SearchSpace::Full => search_to_index(&SearchCoordinates { x: [x[0], x[1], x[2]] }),
            SearchSpace::Temperature => {
                let x1 = x[0].max(0.0);
                IndexPoint { tau1: tau_from_search(x1), tau2: f64::INFINITY, epsilon: 1.0 }
            }
        }
    }

    pub fn to_search(self, lambda: &IndexPoint) -> Vec<f64> {
        let x = index_to_search(lambda).x;
        x[..self.dims()].to_vec()
    }
}

#[derive(Debug, Clone)]
pub struct BanditEnsemble {
    bandits: Vec<TileBandit>,
    space: SearchSpace,
    rng: ChaCha8Rng,
}

impl BanditEnsemble {
    /// Draws `members` bandits from `config`; the same seed drives later sampling.
    pub fn new(config: &BanditConfig, space: SearchSpace, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = space.dims();
        let mut bandits = Vec::with_capacity(config.members);
        for _ in 0..config.members {
            let mode = if rng.gen::<f64>() < config.argmax_probability { BanditMode::Argmax } else { BanditMode::Random };
            let lr = *config.learning_rates.choose(&mut rng).expect("non-empty");
            let k = *config.tile_multipliers.choose(&mut rng).expect("non-empty");
            let mut ta = Vec::with_capacity(p);
            let mut to = Vec::with_capacity(p);
            for d in 0..p {
                let width = config.upper[d] - config.lower[d];
                let t = (k * config.accuracy[d]).min(width);
                let raw = rng.gen_range(0.0..=config.offset_max) * config.accuracy[d];
                ta.push(t);
                to.push(raw % t);
            }
            bandits.push(TileBandit::new(TileBanditSpec {
                mode,
                lower: config.lower[..p].to_vec(),
                upper: config.upper[..p].to_vec(),
                lr,
                candidates: config.candidates,
                acc: config.accuracy[..p].to_vec(),
                ta,
                to,
                ucb_c: config.ucb_c,
            })?);
        }
        Ok(Self { bandits, space, rng })
    }

    pub fn from_bandits(bandits: Vec<TileBandit>, space: SearchSpace, seed: u64) -> Result<Self> {
        if bandits.is_empty() || bandits.iter().any(|b| b.dims() != space.dims()) {
            return Err(GdiError::InvalidArgument("ensemble needs bandits matching the search space".into()));
        }
        Ok(Self { bandits, space, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn bandits(&self) -> &[TileBandit] {
        &self.bandits
    }

    pub fn space(&self) -> SearchSpace {
        self.space
    }

    /// All M·d candidates of one draw, in member order.
    pub fn candidates(&mut self) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for b in &self.bandits {
            out.extend(b.sample_candidates(&mut self.rng)?);
        }
        Ok(out)
    }

    /// One λ, picked uniformly among the M·d candidates.
    pub fn sample(&mut self) -> Result<IndexPoint> {
        let cands = self.candidates()?;
        let pick = self.rng.gen_range(0..cands.len());
        Ok(self.space.to_index(&cands[pick]))
    }

    /// Feeds the episode return `g` obtained under `lambda` to every member.
    pub fn update(&mut self, lambda: &IndexPoint, g: f64) -> Result<()> {
        if !g.is_finite() {
            return Err(GdiError::NonFinite(format!("episode return {g}")));
        }
        let x = self.space.to_search(lambda);
        for b in &mut self.bandits {
            b.update(&x, g)?;
        }
        Ok(())
    }

    /// ΣN summed over members.
    pub fn total_count(&self) -> u64 {
        self.bandits.iter().map(TileBandit::total_count).sum()
    }
}
