//! Actor/learner loop: actors act under a λ drawn once per episode, the learner
//! trains on their segments and publishes snapshots, and finished episodes feed
//! their returns back to the bandit controller.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::controller::{BanditEnsemble, SearchSpace};
use crate::env::{self, TabularMdp};
use crate::error::{GdiError, Result};
use crate::learner::{reward_shape_log, sgd_batch, LossComponents, LossWeights, SampleSegment};
use crate::policy::{mixture_policy, FeatureMap, HeadLayout, IndexPoint, PolicyParams, SnapshotStore};
use crate::util::{mean, median, sample_categorical};

pub const LOG_HEADER: [&str; 10] =
    ["frame", "episode", "actor_id", "param_version", "inv_tau1", "inv_tau2", "epsilon", "return_raw", "return_shaped", "coverage"];

/// Independent seed for one role (0 = controller, 1.. = actors).
fn role_seed(seed: u64, role: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role);
    rng.gen()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    seen: Vec<bool>,
    count: usize,
}

impl Coverage {
    pub fn new(n_states: usize) -> Self {
        Self { seen: vec![false; n_states], count: 0 }
    }

    pub fn visit(&mut self, s: usize) {
        if !self.seen[s] {
            self.seen[s] = true;
            self.count += 1;
        }
    }

    pub fn visited(&self) -> usize {
        self.count
    }

    pub fn fraction(&self) -> f64 {
        if self.seen.is_empty() {
            0.0
        } else {
            self.count as f64 / self.seen.len() as f64
        }
    }
}

/// Source of λ for new episodes: the bandit ensemble, or a constant.
#[derive(Debug, Clone)]
pub struct Controller {
    ensemble: BanditEnsemble,
    fixed: Option<IndexPoint>,
    updates: u64,
}

impl Controller {
    pub fn for_config(cfg: &RunConfig) -> Result<Self> {
        let space = if cfg.mode == Mode::GdiI1 { SearchSpace::Temperature } else { SearchSpace::Full };
        let ensemble = BanditEnsemble::new(&cfg.bandit, space, role_seed(cfg.seed, 0))?;
        let fixed = (cfg.mode == Mode::FixedLambda).then(|| cfg.fixed_index()).transpose()?;
        Ok(Self { ensemble, fixed, updates: 0 })
    }

    pub fn sample(&mut self) -> Result<IndexPoint> {
        match self.fixed {
            Some(l) => Ok(l),
            None => self.ensemble.sample(),
        }
    }

    /// Feeds one finished episode back; a fixed controller ignores it.
    pub fn update(&mut self, lambda: &IndexPoint, g: f64) -> Result<()> {
        if self.fixed.is_none() {
            self.ensemble.update(lambda, g)?;
            self.updates += 1;
        }
        Ok(())
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn ensemble(&self) -> &BanditEnsemble {
        &self.ensemble
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorSettings {
    pub segment_length: usize,
    pub max_episode_steps: usize,
    pub d_pull: u64,
}

impl From<&RunConfig> for ActorSettings {
    fn from(cfg: &RunConfig) -> Self {
        Self { segment_length: cfg.segment_length, max_episode_steps: cfg.max_episode_steps, d_pull: cfg.d_pull }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeEnd {
    pub actor_id: usize,
    pub lambda: IndexPoint,
    pub return_raw: f64,
    pub return_shaped: f64,
    pub param_version: u64,
    pub steps: usize,
}

/// What one environment step produced.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActorStep {
    /// States touched by the step (start state on reset, then the next state).
    pub visited: Vec<usize>,
    pub segment: Option<(SampleSegment, IndexPoint)>,
    pub episode: Option<EpisodeEnd>,
}

pub struct Actor {
    pub id: usize,
    rng: ChaCha8Rng,
    params: Arc<PolicyParams>,
    state: usize,
    lambda: Option<IndexPoint>,
    episode_steps: usize,
    since_pull: u64,
    return_raw: f64,
    return_shaped: f64,
    segment: SampleSegment,
}

impl Actor {
    pub fn new(id: usize, seed: u64, params: Arc<PolicyParams>) -> Self {
        Self {
            id,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params,
            state: 0,
            lambda: None,
            episode_steps: 0,
            since_pull: 0,
            return_raw: 0.0,
            return_shaped: 0.0,
            segment: SampleSegment::default(),
        }
    }

    pub fn param_version(&self) -> u64 {
        self.params.version
    }

    /// λ of the running episode, if one is in progress.
    pub fn lambda(&self) -> Option<IndexPoint> {
        self.lambda
    }

    /// Takes one action, starting an episode with a fresh λ from `sample_lambda` when needed.
    pub fn step<F>(&mut self, env: &TabularMdp, settings: &ActorSettings, store: &SnapshotStore, sample_lambda: F) -> Result<ActorStep>
    where
        F: FnOnce() -> Result<IndexPoint>,
    {
        let mut out = ActorStep::default();
        let lambda = match self.lambda {
            Some(l) => l,
            None => {
                self.state = env::reset(env, &mut self.rng);
                if env.is_terminal(self.state) {
                    return Err(GdiError::InvalidEnv(format!("episode starts in terminal state {}", self.state)));
                }
                let l = sample_lambda()?;
                self.lambda = Some(l);
                self.episode_steps = 0;
                self.return_raw = 0.0;
                self.return_shaped = 0.0;
                out.visited.push(self.state);
                l
            }
        };
        if self.since_pull >= settings.d_pull {
            self.params = store.fetch()?;
            self.since_pull = 0;
        }

        let s = self.state;
        let probs = mixture_policy(&self.params, &lambda, s);
        let a = sample_categorical(&probs, &mut self.rng);
        let t = env::step(env, s, a, &mut self.rng)?;
        let shaped = reward_shape_log(t.reward);
        let seg = &mut self.segment;
        seg.states.push(s);
        seg.actions.push(a);
        seg.rewards.push(shaped);
        seg.raw_rewards.push(t.reward);
        seg.dones.push(t.done);
        seg.behavior_probs.push(probs);
        self.return_raw += t.reward;
        self.return_shaped += shaped;
        self.episode_steps += 1;
        self.since_pull += 1;
        self.state = t.next_state;
        out.visited.push(t.next_state);

        let over = t.done || self.episode_steps >= settings.max_episode_steps;
        if over || self.segment.len() >= settings.segment_length {
            out.segment = self.take_partial();
        }
        if over {
            out.episode = Some(EpisodeEnd {
                actor_id: self.id,
                lambda,
                return_raw: self.return_raw,
                return_shaped: self.return_shaped,
                param_version: self.params.version,
                steps: self.episode_steps,
            });
            self.lambda = None;
        }
        Ok(out)
    }

    /// Hands over the unfinished segment, if any, bootstrapping from the current state.
    pub fn take_partial(&mut self) -> Option<(SampleSegment, IndexPoint)> {
        if self.segment.is_empty() {
            return None;
        }
        let mut seg = std::mem::take(&mut self.segment);
        seg.bootstrap_state = self.state;
        Some((seg, self.lambda.expect("segment implies a running episode")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateRecord {
    pub update: u64,
    pub frame: u64,
    pub param_version: u64,
    pub total: f64,
    /// Loss components of the last replay pass, one entry per head.
    pub components: Vec<LossComponents>,
}

pub struct Learner {
    params: PolicyParams,
    store: Arc<SnapshotStore>,
    pending: Vec<(SampleSegment, IndexPoint)>,
    weights: LossWeights,
    batch_size: usize,
    replay: usize,
    step_size: f64,
    d_push: u64,
    updates: u64,
    published: u64,
    records: Vec<UpdateRecord>,
}

impl Learner {
    /// Publishes `params` as the first snapshot.
    pub fn new(params: PolicyParams, store: Arc<SnapshotStore>, cfg: &RunConfig) -> Result<Self> {
        store.publish(&params)?;
        Ok(Self {
            params,
            store,
            pending: Vec::with_capacity(cfg.batch_size),
            weights: cfg.learner,
            batch_size: cfg.batch_size,
            replay: cfg.replay,
            step_size: cfg.step_size,
            d_push: cfg.d_push,
            updates: 0,
            published: 1,
            records: Vec::new(),
        })
    }

    /// Queues a segment and trains once a full batch is waiting.
    pub fn push(&mut self, segment: SampleSegment, lambda: IndexPoint, frame: u64) -> Result<()> {
        self.pending.push((segment, lambda));
        if self.pending.len() >= self.batch_size {
            self.train(frame)?;
        }
        Ok(())
    }

    /// Trains on whatever is left over.
    pub fn flush(&mut self, frame: u64) -> Result<()> {
        if !self.pending.is_empty() {
            self.train(frame)?;
        }
        Ok(())
    }

    fn train(&mut self, frame: u64) -> Result<()> {
        let batch = std::mem::take(&mut self.pending);
        let mut last = None;
        for _ in 0..self.replay {
            last = Some(sgd_batch(&mut self.params, &batch, &self.weights, self.step_size)?);
        }
        let report = last.expect("replay >= 1");
        self.updates += 1;
        if self.updates % self.d_push == 0 {
            self.store.publish(&self.params)?;
            self.published += 1;
        }
        self.records.push(UpdateRecord {
            update: self.updates,
            frame,
            param_version: report.version,
            total: report.total,
            components: report.components,
        });
        Ok(())
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Snapshots published so far, counting the initial one.
    pub fn published_versions(&self) -> u64 {
        self.published
    }

    pub fn records(&self) -> &[UpdateRecord] {
        &self.records
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub frame: u64,
    pub episode: u64,
    pub actor_id: usize,
    pub param_version: u64,
    pub lambda: IndexPoint,
    pub return_raw: f64,
    pub return_shaped: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub mode: Mode,
    pub seed: u64,
    pub total_frames: u64,
    pub episodes: Vec<EpisodeRecord>,
    pub updates: Vec<UpdateRecord>,
    pub coverage: Coverage,
    pub heads: usize,
    pub param_version: u64,
    pub published_versions: u64,
    pub controller_updates: u64,
    /// ΣN over the ensemble members.
    pub controller_count: u64,
    pub segments: u64,
    pub segment_frames: u64,
    /// Fraction of frames used by [`final_window_return`] in the summary.
    pub final_window: f64,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(LOG_HEADER)?;
        for e in &self.episodes {
            w.write_record([
                e.frame.to_string(),
                e.episode.to_string(),
                e.actor_id.to_string(),
                e.param_version.to_string(),
                e.lambda.inv_tau1().to_string(),
                e.lambda.inv_tau2().to_string(),
                e.lambda.epsilon.to_string(),
                e.return_raw.to_string(),
                e.return_shaped.to_string(),
                e.coverage.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per (update, head).
    pub fn write_losses_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["update", "frame", "param_version", "head", "pg", "v", "q", "total"])?;
        for u in &self.updates {
            for (k, c) in u.components.iter().enumerate() {
                w.write_record([
                    u.update.to_string(),
                    u.frame.to_string(),
                    u.param_version.to_string(),
                    k.to_string(),
                    c.pg.to_string(),
                    c.v.to_string(),
                    c.q.to_string(),
                    u.total.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            mode: self.mode,
            seed: self.seed,
            frames: self.total_frames,
            episodes: self.episodes.len() as u64,
            final_mean_return: final_window_return(self, self.final_window),
            mean_return: (!self.episodes.is_empty())
                .then(|| mean(&self.episodes.iter().map(|e| e.return_raw).collect::<Vec<_>>())),
            coverage: state_coverage(self),
            updates: self.updates.len() as u64,
            param_version: self.param_version,
            published_versions: self.published_versions,
            controller_updates: self.controller_updates,
            controller_count: self.controller_count,
            heads: self.heads,
            final_losses: self.updates.last().map(|u| u.components.clone()).unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub frames: u64,
    pub episodes: u64,
    /// Mean raw return of episodes ending in the final window.
    pub final_mean_return: Option<f64>,
    pub mean_return: Option<f64>,
    pub coverage: f64,
    pub updates: u64,
    pub param_version: u64,
    pub published_versions: u64,
    pub controller_updates: u64,
    pub controller_count: u64,
    pub heads: usize,
    pub final_losses: Vec<LossComponents>,
}

/// Fraction of states seen by any actor during the run.
pub fn state_coverage(log: &TrainingLog) -> f64 {
    log.coverage.fraction()
}

/// Mean raw return of episodes that ended in the last `fraction` of the frames.
pub fn final_window_return(log: &TrainingLog, fraction: f64) -> Option<f64> {
    let start = log.total_frames as f64 * (1.0 - fraction);
    let r: Vec<f64> = log.episodes.iter().filter(|e| e.frame as f64 > start).map(|e| e.return_raw).collect();
    (!r.is_empty()).then(|| mean(&r))
}

pub fn initial_params(cfg: &RunConfig, env: &TabularMdp) -> Result<PolicyParams> {
    let layout = if cfg.mode == Mode::GdiH3 { HeadLayout::Heterogeneous } else { HeadLayout::Isomorphic };
    PolicyParams::new(Arc::new(FeatureMap::one_hot(env.n_states())), env.n_actions(), layout)
}

/// Episode bookkeeping shared by all actors.
pub struct Books {
    controller: Controller,
    coverage: Coverage,
    episodes: Vec<EpisodeRecord>,
    segments: u64,
    segment_frames: u64,
}

impl Books {
    fn record(&mut self, out: &ActorStep, frame: u64) -> Result<()> {
        for &s in &out.visited {
            self.coverage.visit(s);
        }
        if let Some((seg, _)) = &out.segment {
            self.segments += 1;
            self.segment_frames += seg.len() as u64;
        }
        if let Some(e) = &out.episode {
            self.controller.update(&e.lambda, e.return_raw)?;
            self.episodes.push(EpisodeRecord {
                frame,
                episode: self.episodes.len() as u64,
                actor_id: e.actor_id,
                param_version: e.param_version,
                lambda: e.lambda,
                return_raw: e.return_raw,
                return_shaped: e.return_shaped,
                coverage: self.coverage.fraction(),
            });
        }
        Ok(())
    }

    fn count_partial(&mut self, seg: &SampleSegment) {
        self.segments += 1;
        self.segment_frames += seg.len() as u64;
    }
}

fn finish(cfg: &RunConfig, books: Books, learner: &Learner) -> TrainingLog {
    TrainingLog {
        mode: cfg.mode,
        seed: cfg.seed,
        total_frames: cfg.total_frames,
        episodes: books.episodes,
        updates: learner.records().to_vec(),
        coverage: books.coverage,
        heads: learner.params().n_heads(),
        param_version: learner.params().version,
        published_versions: learner.published_versions(),
        controller_updates: books.controller.updates(),
        controller_count: books.controller.ensemble().total_count(),
        segments: books.segments,
        segment_frames: books.segment_frames,
        final_window: cfg.final_window,
    }
}

/// Runs the configured mode to `total_frames`.
pub fn run(cfg: &RunConfig) -> Result<TrainingLog> {
    cfg.validate()?;
    let env = cfg.build_env()?;
    let store = Arc::new(SnapshotStore::new());
    let learner = Learner::new(initial_params(cfg, &env)?, store.clone(), cfg)?;
    let books = Books {
        controller: Controller::for_config(cfg)?,
        coverage: Coverage::new(env.n_states()),
        episodes: Vec::new(),
        segments: 0,
        segment_frames: 0,
    };
    let first = store.fetch()?;
    let actors: Vec<Actor> =
        (0..cfg.actors).map(|i| Actor::new(i, role_seed(cfg.seed, i as u64 + 1), first.clone())).collect();
    if cfg.deterministic {
        run_round_robin(cfg, &env, &store, learner, books, actors)
    } else {
        run_threaded(cfg, &env, &store, learner, books, actors)
    }
}

/// Runs a bandit-driven mode.
pub fn run_gdi(cfg: &RunConfig) -> Result<TrainingLog> {
    if cfg.mode == Mode::FixedLambda {
        return Err(GdiError::Config("run_gdi needs a gdi_* mode".into()));
    }
    run(cfg)
}

/// Same pipeline with λ pinned to `cfg.fixed_lambda`.
pub fn run_fixed_lambda(cfg: &RunConfig) -> Result<TrainingLog> {
    run(&RunConfig { mode: Mode::FixedLambda, ..cfg.clone() })
}

fn run_round_robin(
    cfg: &RunConfig,
    env: &TabularMdp,
    store: &SnapshotStore,
    mut learner: Learner,
    mut books: Books,
    mut actors: Vec<Actor>,
) -> Result<TrainingLog> {
    let settings = ActorSettings::from(cfg);
    let mut frame = 0u64;
    'run: loop {
        for actor in &mut actors {
            if frame >= cfg.total_frames {
                break 'run;
            }
            let controller = &mut books.controller;
            let out = actor.step(env, &settings, store, || controller.sample())?;
            frame += 1;
            books.record(&out, frame)?;
            if let Some((seg, lambda)) = out.segment {
                learner.push(seg, lambda, frame)?;
            }
        }
    }
    for actor in &mut actors {
        if let Some((seg, lambda)) = actor.take_partial() {
            books.count_partial(&seg);
            learner.push(seg, lambda, frame)?;
        }
    }
    learner.flush(frame)?;
    Ok(finish(cfg, books, &learner))
}

/// Body of one actor thread; stops once the shared frame budget is spent or the learner hangs up.
pub fn actor_loop(
    mut actor: Actor,
    env: &TabularMdp,
    settings: ActorSettings,
    store: &SnapshotStore,
    sink: SyncSender<(SampleSegment, IndexPoint)>,
    books: &Mutex<Books>,
    frames: &AtomicU64,
    total_frames: u64,
) -> Result<()> {
    loop {
        if frames.fetch_add(1, Ordering::SeqCst) >= total_frames {
            break;
        }
        let out = actor.step(env, &settings, store, || books.lock().expect("books lock").controller.sample())?;
        {
            let mut b = books.lock().expect("books lock");
            let frame = frames.load(Ordering::SeqCst).min(total_frames);
            b.record(&out, frame)?;
        }
        if let Some(item) = out.segment {
            if sink.send(item).is_err() {
                return Ok(());
            }
        }
    }
    if let Some(item) = actor.take_partial() {
        books.lock().expect("books lock").count_partial(&item.0);
        let _ = sink.send(item);
    }
    Ok(())
}

/// Trains on segments until every actor has dropped its sender, then flushes.
pub fn learner_loop(
    source: Receiver<(SampleSegment, IndexPoint)>,
    learner: &mut Learner,
    frames: &AtomicU64,
    total_frames: u64,
) -> Result<()> {
    for (seg, lambda) in source {
        learner.push(seg, lambda, frames.load(Ordering::SeqCst).min(total_frames))?;
    }
    learner.flush(total_frames)
}

fn run_threaded(
    cfg: &RunConfig,
    env: &TabularMdp,
    store: &SnapshotStore,
    mut learner: Learner,
    books: Books,
    actors: Vec<Actor>,
) -> Result<TrainingLog> {
    let settings = ActorSettings::from(cfg);
    let books = Mutex::new(books);
    let frames = AtomicU64::new(0);
    let (tx, rx) = sync_channel(4 * cfg.batch_size);
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = actors
            .into_iter()
            .map(|actor| {
                let tx = tx.clone();
                let (books, frames) = (&books, &frames);
                scope.spawn(move || actor_loop(actor, env, settings, store, tx, books, frames, cfg.total_frames))
            })
            .collect();
        drop(tx);
        let learned = learner_loop(rx, &mut learner, &frames, cfg.total_frames);
        for h in handles {
            h.join().map_err(|_| GdiError::Precondition("actor thread panicked".into()))??;
        }
        learned
    })?;
    Ok(finish(cfg, books.into_inner().expect("books lock"), &learner))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationGroup {
    pub mode: Mode,
    pub seeds: usize,
    pub mean_final_return: f64,
    pub median_coverage: f64,
    /// Mean final return divided by the gdi_i3 group's; `None` when that is zero.
    pub normalized_return: Option<f64>,
    pub normalized_coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ablation {
    pub runs: Vec<RunSummary>,
    pub groups: Vec<AblationGroup>,
}

pub const ABLATION_MODES: [Mode; 3] = [Mode::GdiI3, Mode::GdiI1, Mode::FixedLambda];

/// Runs every ablation mode on every seed in `cfg.seeds`, with paired seeds across modes.
pub fn ablate(cfg: &RunConfig) -> Result<Ablation> {
    if cfg.seeds.is_empty() {
        return Err(GdiError::Config("ablation needs at least one seed".into()));
    }
    let mut runs = Vec::new();
    let mut by_mode: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (k, &mode) in ABLATION_MODES.iter().enumerate() {
        for &seed in &cfg.seeds {
            let s = run(&RunConfig { mode, seed, ..cfg.clone() })?.summary();
            let entry = by_mode.entry(k).or_default();
            entry.0.push(s.final_mean_return.unwrap_or(0.0));
            entry.1.push(s.coverage);
            runs.push(s);
        }
    }
    let stats: Vec<(f64, f64)> = by_mode.values().map(|(r, c)| (mean(r), median(c))).collect();
    let (base_r, base_c) = stats[0];
    let ratio = |x: f64, b: f64| (b != 0.0).then(|| x / b);
    let groups = ABLATION_MODES
        .iter()
        .zip(&stats)
        .map(|(&mode, &(r, c))| AblationGroup {
            mode,
            seeds: cfg.seeds.len(),
            mean_final_return: r,
            median_coverage: c,
            normalized_return: ratio(r, base_r),
            normalized_coverage: ratio(c, base_c),
        })
        .collect();
    Ok(Ablation { runs, groups })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl Ablation {
    pub fn write_groups_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mode", "seeds", "mean_final_return", "median_coverage", "normalized_return", "normalized_coverage"])?;
        for g in &self.groups {
            w.write_record([
                g.mode.to_string(),
                g.seeds.to_string(),
                g.mean_final_return.to_string(),
                g.median_coverage.to_string(),
                opt(g.normalized_return),
                opt(g.normalized_coverage),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_runs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mode", "seed", "episodes", "final_mean_return", "coverage"])?;
        for r in &self.runs {
            w.write_record([
                r.mode.to_string(),
                r.seed.to_string(),
                r.episodes.to_string(),
                opt(r.final_mean_return),
                r.coverage.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::LossComponents;

    fn tiny(mode: Mode) -> RunConfig {
        RunConfig {
            mode,
            total_frames: 2000,
            max_episode_steps: 30,
            actors: 2,
            batch_size: 4,
            segment_length: 8,
            d_push: 2,
            d_pull: 16,
            ..RunConfig::default()
        }
    }

    fn csv_of(log: &TrainingLog) -> String {
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn smallest_run_trains_once() {
        let cfg = RunConfig { total_frames: 16, segment_length: 16, actors: 1, max_episode_steps: 1000, ..RunConfig::default() };
        let log = run(&cfg).unwrap();
        assert_eq!(log.updates.len(), 1);
        assert_eq!(log.segment_frames, 16);
        assert_eq!(log.controller_updates, log.episodes.len() as u64);
    }

    #[test]
    fn deterministic_runs_repeat_byte_for_byte() {
        for mode in Mode::ALL {
            let a = run(&tiny(mode)).unwrap();
            let b = run(&tiny(mode)).unwrap();
            assert_eq!(csv_of(&a), csv_of(&b));
            assert_eq!(a.updates, b.updates);
        }
        let other = run(&RunConfig { seed: 9, ..tiny(Mode::GdiI3) }).unwrap();
        assert_ne!(csv_of(&run(&tiny(Mode::GdiI3)).unwrap()), csv_of(&other));
    }

    #[test]
    fn log_invariants() {
        for mode in Mode::ALL {
            let cfg = tiny(mode);
            let log = run(&cfg).unwrap();
            assert!(!log.episodes.is_empty());
            assert!(log.episodes.windows(2).all(|w| w[0].frame <= w[1].frame));
            assert!(log.episodes.windows(2).all(|w| w[0].coverage <= w[1].coverage));
            assert_eq!(log.segment_frames, cfg.total_frames);
            assert_eq!(log.controller_count, log.controller_updates * cfg.bandit.members as u64);
            if mode == Mode::FixedLambda {
                assert_eq!(log.controller_updates, 0);
                assert_eq!(log.controller_count, 0);
                let l = cfg.fixed_index().unwrap();
                assert!(log.episodes.iter().all(|e| e.lambda == l));
            } else {
                assert_eq!(log.controller_updates, log.episodes.len() as u64);
            }
            if mode == Mode::GdiI1 {
                assert!(log.episodes.iter().all(|e| e.lambda.epsilon == 1.0 && e.lambda.tau2.is_infinite()));
            }
            let published = log.updates.len() as u64 / cfg.d_push + 1;
            assert_eq!(log.published_versions, published);
            assert_eq!(log.param_version, log.updates.len() as u64 * cfg.replay as u64);
        }
    }

    #[test]
    fn two_heads_log_two_loss_streams() {
        let log = run(&tiny(Mode::GdiH3)).unwrap();
        assert_eq!(log.heads, 2);
        assert!(log.updates.iter().all(|u| u.components.len() == 2));
        let s = log.summary();
        assert_eq!(s.final_losses.len(), 2);
        assert_ne!(s.final_losses[0], LossComponents::default());
    }

    #[test]
    fn threaded_mode_keeps_accounting() {
        let cfg = RunConfig { deterministic: false, actors: 3, ..tiny(Mode::GdiI3) };
        let log = run(&cfg).unwrap();
        assert_eq!(log.segment_frames, cfg.total_frames);
        assert_eq!(log.controller_updates, log.episodes.len() as u64);
        assert_eq!(log.controller_count, log.controller_updates * cfg.bandit.members as u64);
        assert!(log.episodes.windows(2).all(|w| w[0].frame <= w[1].frame));
        assert!(log.episodes.iter().all(|e| e.frame <= cfg.total_frames));
    }

    #[test]
    fn behavior_probs_match_the_acting_snapshot() {
        let cfg = RunConfig::default();
        let env = cfg.build_env().unwrap();
        let mut params = initial_params(&cfg, &env).unwrap();
        for (i, a) in params.heads_mut()[0].advantage.iter_mut().enumerate() {
            *a = (i as f64 * 0.37).sin();
        }
        let store = SnapshotStore::new();
        params.version = 3;
        let snap = store.publish(&params).unwrap();
        let mut actor = Actor::new(0, 1, snap.clone());
        let settings = ActorSettings { segment_length: 4, max_episode_steps: 50, d_pull: 1000 };
        let lambda = IndexPoint::from_inverse(2.0, 0.5, 0.3).unwrap();
        let mut seen = 0;
        while seen < 5 {
            let out = actor.step(&env, &settings, &store, || Ok(lambda)).unwrap();
            if let Some((seg, l)) = out.segment {
                assert_eq!(l, lambda);
                for (t, &s) in seg.states.iter().enumerate() {
                    assert_eq!(seg.behavior_probs[t], mixture_policy(&snap, &l, s));
                }
                seen += 1;
            }
        }
    }

    #[test]
    fn short_episodes_use_one_version_and_lambda_per_episode() {
        let cfg = RunConfig::default();
        let env = cfg.build_env().unwrap();
        let store = SnapshotStore::new();
        let snap = store.publish(&initial_params(&cfg, &env).unwrap()).unwrap();
        let mut actor = Actor::new(0, 5, snap);
        let settings = ActorSettings { segment_length: 3, max_episode_steps: 5, d_pull: 64 };
        let mut draws = 0;
        let mut episodes = 0;
        let mut current = None;
        for _ in 0..200 {
            let out = actor
                .step(&env, &settings, &store, || {
                    draws += 1;
                    IndexPoint::from_inverse(draws as f64, 0.0, 1.0)
                })
                .unwrap();
            if let Some((_, l)) = &out.segment {
                if let Some(c) = current {
                    assert_eq!(*l, c);
                }
                current = Some(*l);
            }
            if let Some(e) = out.episode {
                assert_eq!(Some(e.lambda), current);
                assert!(e.steps <= 5);
                assert_eq!(e.param_version, 0);
                current = None;
                episodes += 1;
            }
        }
        assert_eq!(draws, episodes + usize::from(actor.lambda().is_some()));
    }

    #[test]
    fn learner_publish_cadence() {
        let cfg = RunConfig { batch_size: 1, d_push: 25, ..RunConfig::default() };
        let env = cfg.build_env().unwrap();
        let store = Arc::new(SnapshotStore::new());
        let mut learner = Learner::new(initial_params(&cfg, &env).unwrap(), store.clone(), &cfg).unwrap();
        learner.flush(0).unwrap();
        assert_eq!(learner.params().version, 0);
        let seg = SampleSegment {
            states: vec![0, 1],
            actions: vec![1, 1],
            rewards: vec![0.0, 0.5],
            raw_rewards: vec![0.0, 1.0],
            dones: vec![false, false],
            behavior_probs: vec![vec![0.5, 0.5]; 2],
            bootstrap_state: 2,
        };
        let lambda = cfg.fixed_index().unwrap();
        for k in 1..=60u64 {
            learner.push(seg.clone(), lambda, k).unwrap();
            assert_eq!(learner.published_versions(), k / 25 + 1);
        }
        assert_eq!(store.fetch().unwrap().version, 50 * cfg.replay as u64);

        let cfg1 = RunConfig { d_push: 1, ..cfg };
        let store1 = Arc::new(SnapshotStore::new());
        let mut every = Learner::new(initial_params(&cfg1, &env).unwrap(), store1.clone(), &cfg1).unwrap();
        for _ in 0..3 {
            every.push(seg.clone(), lambda, 0).unwrap();
            assert_eq!(store1.fetch().unwrap().version, every.params().version);
        }
    }

    #[test]
    fn coverage_examples() {
        let mut c = Coverage::new(3);
        assert_eq!(c.fraction(), 0.0);
        c.visit(1);
        c.visit(1);
        assert_eq!(c.visited(), 1);
        let mut one = Coverage::new(1);
        one.visit(0);
        assert_eq!(one.fraction(), 1.0);
    }

    #[test]
    fn ablation_groups_normalize_to_i3() {
        let cfg = RunConfig { seeds: vec![3], ..tiny(Mode::GdiI3) };
        let ab = ablate(&cfg).unwrap();
        assert_eq!(ab.groups.len(), 3);
        assert_eq!(ab.runs.len(), 3);
        assert_eq!(ab.groups[0].mode, Mode::GdiI3);
        if let Some(r) = ab.groups[0].normalized_return {
            assert_eq!(r, 1.0);
        }
        assert!(ablate(&RunConfig { seeds: vec![], ..cfg }).is_err());
    }
}
