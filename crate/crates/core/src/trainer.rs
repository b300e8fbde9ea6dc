//! Full-batch training loop.
//!
//! Patch affinities are computed once up front. Every epoch then draws two
//! views, encodes both, evaluates the contrastive loss and its gradients,
//! back-propagates through both encoder passes and applies one Adam update.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, TStatSnapshot};
use crate::augment::{make_views_from, AugmentConfig};
use crate::dataset::GraphDataset;
use crate::encoder::{forward_layers, init_params, save_checkpoint, Activation, EncoderParams, EncoderShape};
use crate::error::{Error, Result};
use crate::loss::{loss_and_gradients, LossConfig, LossMode, Objective};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::pae::{
    compute_patch_embeddings, default_omega_min, AffinityMode, AffinityTable, Node2VecConfig, PatchTopoEmbeddings,
    TopoBackend, TopoConfig, VgaeConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output width of each GCN layer.
    pub hidden: Vec<usize>,
    pub contrast_dim: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: vec![128, 128],
            contrast_dim: 128,
            activation: Activation::Relu,
        }
    }
}

impl EncoderConfig {
    pub fn shape(&self, input_dim: usize) -> EncoderShape {
        EncoderShape {
            input_dim,
            hidden: self.hidden.clone(),
            contrast_dim: self.contrast_dim,
            activation: self.activation,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len()
    }
}

/// Patch affinity estimation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PaeConfig {
    /// When false, mux mode uses `ω ≡ 1`.
    pub enabled: bool,
    pub backend: TopoBackend,
    pub affinity: AffinityMode,
    pub memory_budget_mb: u64,
    pub node2vec: Node2VecConfig,
    pub vgae: VgaeConfig,
}

impl Default for PaeConfig {
    fn default() -> Self {
        PaeConfig {
            enabled: true,
            backend: TopoBackend::Node2vec,
            affinity: AffinityMode::Auto,
            memory_budget_mb: 1024,
            node2vec: Node2VecConfig::default(),
            vgae: VgaeConfig::default(),
        }
    }
}

impl PaeConfig {
    pub fn topo(&self) -> TopoConfig {
        TopoConfig {
            backend: self.backend,
            node2vec: self.node2vec.clone(),
            vgae: self.vgae.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub pae: PaeConfig,
    /// Write a checkpoint every this many epochs (CLI only).
    pub checkpoint_every: Option<usize>,
    /// Record T statistics every this many epochs.
    pub tstat_every: Option<usize>,
    pub tstat_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            seed: 0,
            optimizer: AdamConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            pae: PaeConfig::default(),
            checkpoint_every: None,
            tstat_every: None,
            tstat_samples: 100_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config(
                "optimizer needs lr >= 0, eps > 0, weight_decay >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.encoder.hidden.is_empty() || self.encoder.hidden.contains(&0) || self.encoder.contrast_dim == 0 {
            return Err(Error::Config(
                "encoder needs at least one layer and positive widths".into(),
            ));
        }
        if self.checkpoint_every == Some(0) || self.tstat_every == Some(0) {
            return Err(Error::Config("cadences must be positive".into()));
        }
        self.augment.validate()?;
        self.loss.validate(self.encoder.num_layers())?;
        if self.uses_pae() {
            self.pae.topo().validate()?;
        }
        Ok(())
    }

    /// Whether the run needs patch embeddings.
    pub fn uses_pae(&self) -> bool {
        self.loss.mode == LossMode::Mux && self.pae.enabled
    }
}

/// Per-epoch record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Minimised objective `−L`.
    pub loss: f64,
    pub seconds: f64,
    pub tstats: Option<TStatSnapshot>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn snapshots(&self) -> Vec<(usize, TStatSnapshot)> {
        self.records
            .iter()
            .filter_map(|r| r.tstats.map(|t| (r.epoch, t)))
            .collect()
    }

    /// `epoch,loss,seconds`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,seconds\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.seconds));
        }
        s
    }
}

/// Wall-clock seconds per training stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub augment: f64,
    pub forward: f64,
    pub loss: f64,
    pub backward: f64,
    pub update: f64,
}

impl StageTimes {
    pub fn sum(&self) -> f64 {
        self.augment + self.forward + self.loss + self.backward + self.update
    }
}

/// What the per-epoch hook sees.
pub struct EpochEvent<'a> {
    pub record: &'a EpochRecord,
    pub params: &'a EncoderParams<f32>,
}

pub struct TrainOutcome {
    pub params: EncoderParams<f32>,
    pub history: TrainHistory,
    /// Patch embeddings used (computed or supplied), if any.
    pub topo: Option<Arc<PatchTopoEmbeddings>>,
    pub pae_seconds: f64,
}

const AUGMENT_SALT: u64 = 0xA5A5_0F0F_3C3C_9696;

struct Session<'d> {
    dataset: &'d GraphDataset,
    cfg: &'d TrainConfig,
    features: Array2<f32>,
    params: EncoderParams<f32>,
    state: AdamState<f32>,
    rng: ChaCha8Rng,
    table: AffinityTable,
    lambda: Vec<f64>,
}

struct StepResult {
    loss: f64,
    times: StageTimes,
    tstats: Option<TStatSnapshot>,
}

/// Builds the ω table for `cfg`, computing patch embeddings unless supplied.
pub fn affinity_for(
    dataset: &GraphDataset,
    cfg: &TrainConfig,
    topo: Option<Arc<PatchTopoEmbeddings>>,
) -> Result<(AffinityTable, Option<Arc<PatchTopoEmbeddings>>)> {
    let n = dataset.num_nodes();
    let l = cfg.encoder.num_layers();
    if !cfg.uses_pae() {
        return Ok((AffinityTable::uniform(n, l), None));
    }
    let h = match topo {
        Some(h) => {
            if h.num_nodes() != n || h.num_layers() != l {
                return Err(Error::Shape(format!(
                    "patch embeddings cover {} nodes / {} hops, need {n} / {l}",
                    h.num_nodes(),
                    h.num_layers()
                )));
            }
            h
        }
        None => Arc::new(compute_patch_embeddings(dataset, &cfg.pae.topo(), l, cfg.seed)?),
    };
    let floor = cfg.loss.omega_floor.unwrap_or_else(|| default_omega_min(n));
    let budget = cfg.pae.memory_budget_mb * 1024 * 1024;
    let table = AffinityTable::materialize(h.clone(), cfg.pae.affinity, budget, floor)?;
    Ok((table, Some(h)))
}

impl<'d> Session<'d> {
    fn new(dataset: &'d GraphDataset, cfg: &'d TrainConfig, table: AffinityTable) -> Self {
        let shape = cfg.encoder.shape(dataset.num_features());
        let params = init_params::<f32>(&shape, cfg.seed);
        let state = AdamState::new(params.tensors());
        Session {
            dataset,
            cfg,
            features: dataset.features().clone(),
            params,
            state,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ AUGMENT_SALT),
            table,
            lambda: cfg.loss.lambda_for(cfg.encoder.num_layers()),
        }
    }

    fn step(&mut self, epoch: usize, snapshot: bool) -> Result<StepResult> {
        let mut times = StageTimes::default();
        let objective = Objective::new(self.cfg.loss.tau, self.lambda.clone(), &self.table)?;

        let t = Instant::now();
        let (v1, v2) = make_views_from(self.dataset, &self.features, &self.cfg.augment, &mut self.rng);
        times.augment = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let active = if snapshot {
            vec![true; self.params.num_layers() + 1]
        } else {
            objective.active_layers()
        };
        let p1 = forward_layers(&v1, &self.params, &active)?;
        let p2 = forward_layers(&v2, &self.params, &active)?;
        times.forward = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let out = loss_and_gradients(&p1.embeddings.contrast, &p2.embeddings.contrast, &objective)?;
        let loss = -out.value;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at epoch {epoch}")));
        }
        times.loss = t.elapsed().as_secs_f64();

        let tstats = if snapshot {
            let (_, fit) = analysis::t_statistics(
                &p1.embeddings.contrast,
                &p2.embeddings.contrast,
                &self.table,
                self.cfg.tstat_samples,
                self.cfg.seed.wrapping_add(epoch as u64),
            )?;
            Some(fit)
        } else {
            None
        };

        let t = Instant::now();
        let mut grads = p1.backward(&v1, &self.params, &out.grad_u);
        let g2 = p2.backward(&v2, &self.params, &out.grad_v);
        for (a, b) in grads.tensors_mut().into_iter().zip(g2.tensors()) {
            *a += b;
        }
        times.backward = t.elapsed().as_secs_f64();

        let t = Instant::now();
        adam_step(
            self.params.tensors_mut(),
            grads.tensors(),
            &mut self.state,
            &self.cfg.optimizer,
        );
        if !self.params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        times.update = t.elapsed().as_secs_f64();
        Ok(StepResult { loss, times, tstats })
    }
}

/// Trains with default behaviour: patch embeddings computed here, no hook.
pub fn train(dataset: &GraphDataset, cfg: &TrainConfig) -> Result<(EncoderParams<f32>, TrainHistory)> {
    let out = train_with(dataset, cfg, None, |_| Ok(()))?;
    Ok((out.params, out.history))
}

/// Trains, reusing `topo` if given and calling `hook` after every epoch.
pub fn train_with<F>(
    dataset: &GraphDataset,
    cfg: &TrainConfig,
    topo: Option<Arc<PatchTopoEmbeddings>>,
    mut hook: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochEvent<'_>) -> Result<()>,
{
    cfg.validate()?;
    let t = Instant::now();
    let (table, topo) = affinity_for(dataset, cfg, topo)?;
    let pae_seconds = t.elapsed().as_secs_f64();
    let mut session = Session::new(dataset, cfg, table);
    let mut history = TrainHistory::default();
    for epoch in 1..=cfg.epochs {
        let t = Instant::now();
        let snapshot = cfg.tstat_every.is_some_and(|every| epoch % every == 0);
        let step = session.step(epoch, snapshot)?;
        let record = EpochRecord {
            epoch,
            loss: step.loss,
            seconds: t.elapsed().as_secs_f64(),
            tstats: step.tstats,
        };
        log::debug!("epoch {epoch}: loss {:.6} ({:.3}s)", record.loss, record.seconds);
        hook(&EpochEvent {
            record: &record,
            params: &session.params,
        })?;
        history.records.push(record);
    }
    Ok(TrainOutcome {
        params: session.params,
        history,
        topo,
        pae_seconds,
    })
}

/// Hook writing `epoch_XXXX.bin` into `dir` every `every` epochs.
pub fn checkpoint_hook(dir: PathBuf, every: usize) -> impl FnMut(&EpochEvent<'_>) -> Result<()> {
    move |ev| {
        if ev.record.epoch % every == 0 {
            save_checkpoint(ev.params, checkpoint_path(&dir, ev.record.epoch))?;
        }
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.bin"))
}

pub const BENCH_WARMUP: usize = 5;
pub const BENCH_MIN_MEASURED: usize = 20;

/// Median per-stage timings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub mode: LossMode,
    pub measured_epochs: usize,
    pub warmup_epochs: usize,
    pub pae_seconds: f64,
    pub median: StageTimes,
    /// Median whole-epoch wall-clock seconds.
    pub median_total: f64,
    pub losses: Vec<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `measured` epochs after [`BENCH_WARMUP`] warm-up epochs.
pub fn benchmark_epoch(
    dataset: &GraphDataset,
    cfg: &TrainConfig,
    measured: usize,
    topo: Option<Arc<PatchTopoEmbeddings>>,
) -> Result<BenchmarkReport> {
    if measured < BENCH_MIN_MEASURED {
        return Err(Error::InvalidArgument(format!(
            "benchmark needs at least {BENCH_MIN_MEASURED} measured epochs, got {measured}"
        )));
    }
    cfg.validate()?;
    let t = Instant::now();
    let (table, _) = affinity_for(dataset, cfg, topo)?;
    let pae_seconds = t.elapsed().as_secs_f64();
    let mut session = Session::new(dataset, cfg, table);
    for epoch in 1..=BENCH_WARMUP {
        session.step(epoch, false)?;
    }
    let mut stages = Vec::with_capacity(measured);
    let mut totals = Vec::with_capacity(measured);
    let mut losses = Vec::with_capacity(measured);
    for epoch in 1..=measured {
        let t = Instant::now();
        let step = session.step(BENCH_WARMUP + epoch, false)?;
        totals.push(t.elapsed().as_secs_f64());
        stages.push(step.times);
        losses.push(step.loss);
    }
    let pick = |f: fn(&StageTimes) -> f64| median(stages.iter().map(f).collect());
    Ok(BenchmarkReport {
        mode: cfg.loss.mode,
        measured_epochs: measured,
        warmup_epochs: BENCH_WARMUP,
        pae_seconds,
        median: StageTimes {
            augment: pick(|s| s.augment),
            forward: pick(|s| s.forward),
            loss: pick(|s| s.loss),
            backward: pick(|s| s.backward),
            update: pick(|s| s.update),
        },
        median_total: median(totals),
        losses,
    })
}
