//! Deterministic training loop, run logs and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::heads::{box_at_target, cls_loss, giou_loss, l1_loss, balance_loss, importance_loss, total_loss, BBox, LossBreakdown, LossTerms, LossWeights};
use crate::hmoe::GateResult;
use crate::masking::{apply_mask, random_token_mask, sample_mask_decision, tube_mask, MaskCounters, MaskSampler, MaskStrategy};
use crate::model::TrackerModel;
use crate::params::{AdamW, ParamStore};
use crate::rng::{self, Rng};
use crate::routing::{write_routing_csv, RoutingRecord};
use crate::synth::{crop_regions, CropConfig, CropSample, Jitter, RenderedSequence, SceneSpec};
use crate::tokens::{EncoderInput, Frame, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// The learning rate drops ×0.1 from epoch `round(fraction · epochs)` on.
    pub lr_drop_fraction: f64,
    pub weight_decay: f64,
    /// Probability of clip-level masking under `video_level`.
    pub alpha: f64,
    /// Row ratio for the `random` and `tube` baselines.
    pub baseline_ratio: f64,
    pub loss_weights: LossWeights,
    pub strategy: MaskStrategy,
    pub model: ModelConfig,
    /// Crop side as a multiple of `sqrt(w·h)` of the reference box.
    pub context: f64,
    pub jitter: Jitter,
    /// Dataset directory; when absent, `train_videos` are generated from `scene`.
    pub dataset: Option<PathBuf>,
    pub scene: SceneSpec,
    pub train_videos: usize,
    #[serde(default = "default_eval_videos")]
    pub eval_videos: usize,
    /// Seed of the generated train and eval videos, independent of `seed`.
    #[serde(default)]
    pub data_seed: u64,
}

fn default_eval_videos() -> usize {
    50
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 30,
            steps_per_epoch: 100,
            batch_size: 8,
            base_lr: 3e-4,
            lr_drop_fraction: 22.0 / 30.0,
            weight_decay: 1e-4,
            alpha: 0.5,
            baseline_ratio: 0.5,
            loss_weights: LossWeights::default(),
            strategy: MaskStrategy::VideoLevel,
            model: ModelConfig::default(),
            context: 2.0,
            jitter: Jitter { center: 0.25, scale: 0.1 },
            dataset: None,
            scene: SceneSpec::default(),
            train_videos: 200,
            eval_videos: default_eval_videos(),
            data_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, steps_per_epoch and batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_fraction) {
            return bad(format!("lr_drop_fraction {} outside [0, 1]", self.lr_drop_fraction));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.baseline_ratio) {
            return bad(format!("baseline_ratio {} outside [0, 1]", self.baseline_ratio));
        }
        if self.context <= 0.0 {
            return bad(format!("context {} must be positive", self.context));
        }
        Ok(())
    }

    pub fn crop(&self) -> CropConfig {
        CropConfig {
            n_clips: self.model.n_clips,
            search_size: self.model.search_size,
            clip_size: self.model.clip_size,
            context: self.context,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn drop_epoch(&self) -> usize {
        (self.lr_drop_fraction * self.epochs as f64).round() as usize
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.drop_epoch() {
            self.base_lr * 0.1
        } else {
            self.base_lr
        }
    }

    /// FNV-1a of the canonical JSON form, as 16 hex digits.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", rng::fnv1a(&json))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config_hash: String,
    pub rows: Vec<LogRow>,
    pub routing: Vec<RoutingRecord>,
    pub wall_clock_s: f64,
}

pub const RUNLOG_CSV_HEADER: &str = "step,cls,l1,giou,balance,importance,total";

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{RUNLOG_CSV_HEADER}\n");
        for r in &self.rows {
            let l = &r.loss;
            s += &format!(
                "{},{},{},{},{},{},{}\n",
                r.step, l.cls, l.l1, l.giou, l.balance, l.importance, l.total
            );
        }
        s
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss.total).collect()
    }
}

/// One optimization step's outcome.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub routing: Vec<RoutingRecord>,
}

pub struct Trainer {
    config: TrainConfig,
    model: TrackerModel,
    store: ParamStore,
    optimizer: AdamW,
    data_rng: Rng,
    jitter_rng: Rng,
    baseline_rng: Rng,
    mask_sampler: MaskSampler,
    counters: MaskCounters,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = TrackerModel::new(&config.model, config.seed)?;
        let seed = config.seed;
        Ok(Trainer {
            optimizer: AdamW {
                weight_decay: config.weight_decay,
                ..AdamW::default()
            },
            data_rng: rng::stream(seed, "train.data"),
            jitter_rng: rng::stream(seed, "train.jitter"),
            baseline_rng: rng::stream(seed, "train.mask.baseline"),
            mask_sampler: MaskSampler::new(rng::derive_seed(seed, "train.mask", 0)),
            counters: MaskCounters::default(),
            step: 0,
            config,
            model,
            store,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &TrackerModel {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn counters(&self) -> &MaskCounters {
        &self.counters
    }

    pub fn into_parts(self) -> (TrackerModel, ParamStore, MaskCounters) {
        (self.model, self.store, self.counters)
    }

    fn sample_batch(&mut self, videos: &[RenderedSequence]) -> Result<Vec<(CropSample, BBox)>> {
        let n = self.config.model.n_clips;
        let crop = self.config.crop();
        (0..self.config.batch_size)
            .map(|_| {
                let v = &videos[self.data_rng.gen_range(0..videos.len())];
                if v.len() <= n {
                    return Err(Error::Validation(format!("video of {} frames is too short for {n} clips", v.len())));
                }
                let t = self.data_rng.gen_range(n..v.len());
                crop_regions(v, t, &crop, &self.config.jitter, &mut self.jitter_rng)
            })
            .collect()
    }

    /// Encodes one sample and applies the configured masking strategy.
    fn masked_tokens(&mut self, tape: &mut Tape, sample: &CropSample) -> Result<TokenSequence> {
        let mut input = EncoderInput {
            frames: sample.frames(),
            availability: vec![true; self.model.layout().len()],
        };
        match self.config.strategy {
            MaskStrategy::None => self.model.encode(tape, &self.store, &input),
            MaskStrategy::VideoLevel => {
                MaskCounters::bump(&self.counters.decisions);
                let decision = sample_mask_decision(&mut self.mask_sampler, self.config.model.n_clips, self.config.alpha)?;
                let keep = decision.availability(self.model.layout())?;
                for (frame, &k) in input.frames.iter_mut().zip(&keep) {
                    if !k {
                        *frame = Frame::zeros(frame.modality, frame.height(), frame.channels(), frame.timestamp);
                    }
                }
                input.availability = keep;
                let seq = self.model.encode(tape, &self.store, &input)?;
                MaskCounters::bump(&self.counters.video_level);
                apply_mask(tape, &seq, &decision)
            }
            MaskStrategy::Random => {
                let seq = self.model.encode(tape, &self.store, &input)?;
                MaskCounters::bump(&self.counters.random);
                random_token_mask(tape, &seq, self.config.baseline_ratio, &mut self.baseline_rng)
            }
            MaskStrategy::Tube => {
                let seq = self.model.encode(tape, &self.store, &input)?;
                MaskCounters::bump(&self.counters.tube);
                tube_mask(tape, &seq, self.config.baseline_ratio, &mut self.baseline_rng)
            }
        }
    }

    /// Builds the batch loss on `tape`.
    fn batch_loss(&mut self, tape: &mut Tape, batch: &[(CropSample, BBox)]) -> Result<(Var, LossBreakdown, Vec<RoutingRecord>)> {
        let mut items = Vec::with_capacity(batch.len());
        for (sample, gt) in batch {
            items.push((self.masked_tokens(tape, sample)?, *gt));
        }
        let obj = objective(tape, &self.model, &self.store, &self.config.loss_weights, &items)?;
        let mut routing = Vec::new();
        for (b, (seq, _)) in items.iter().enumerate() {
            for (layer, gates) in obj.gates.iter().enumerate() {
                let g = &gates[b];
                let widths = self.model.fuse_layers()[layer].widths();
                routing.push(RoutingRecord {
                    source: "train".into(),
                    index: self.step,
                    layer,
                    missing_rate: seq.missing_rate(),
                    widths: g.selected.iter().map(|&n| widths[n]).collect(),
                    selected: g.selected.clone(),
                });
            }
        }
        Ok((obj.total, obj.breakdown, routing))
    }

    /// One forward/backward/AdamW step.
    pub fn step(&mut self, videos: &[RenderedSequence]) -> Result<StepReport> {
        if videos.is_empty() {
            return Err(Error::Validation("no training videos".into()));
        }
        let epoch = self.step / self.config.steps_per_epoch;
        let lr = self.config.lr_at_epoch(epoch);
        let batch = self.sample_batch(videos)?;
        let mut tape = Tape::new();
        let (total, loss, routing) = self.batch_loss(&mut tape, &batch)?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: {loss:?}; largest gradient norm so far {}",
                self.step,
                self.store.grad_norm()
            )));
        }
        tape.backward_into(total, &mut self.store)?;
        if let Some(name) = self.store.first_non_finite_grad() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for `{name}` at step {} (loss {loss:?})",
                self.step
            )));
        }
        self.optimizer.step(&mut self.store, lr)?;
        self.step += 1;
        Ok(StepReport { loss, routing })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }
}

/// The weighted training loss over a batch on `tape`.
pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// `gates[layer][b]` for batch element `b`.
    pub gates: Vec<Vec<GateResult>>,
}

/// Runs fusion and heads on already-encoded (and possibly masked) token
/// sequences and combines the task losses, averaged over the batch, with the
/// per-layer balance and importance losses.
pub fn objective(
    tape: &mut Tape,
    model: &TrackerModel,
    store: &ParamStore,
    weights: &LossWeights,
    items: &[(TokenSequence, BBox)],
) -> Result<Objective> {
    if items.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let layers = model.fuse_layers().len();
    let mut gates: Vec<Vec<GateResult>> = vec![Vec::with_capacity(items.len()); layers];
    let mut cls = Vec::with_capacity(items.len());
    let mut l1 = Vec::with_capacity(items.len());
    let mut gi = Vec::with_capacity(items.len());
    for (seq, gt) in items {
        let out = model.fuse_and_predict(tape, store, seq)?;
        cls.push(cls_loss(tape, &out.map, gt)?);
        let pred = box_at_target(tape, &out.map, gt)?;
        l1.push(l1_loss(tape, pred, gt)?);
        gi.push(giou_loss(tape, pred, gt)?);
        for (layer, g) in out.gates.into_iter().enumerate() {
            gates[layer].push(g);
        }
    }
    let inv = 1.0 / items.len() as f64;
    let mean = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let mut acc = v[0];
        for &x in &v[1..] {
            acc = tape.add(acc, x)?;
        }
        tape.scale(acc, inv)
    };
    let mut balance = balance_loss(tape, &gates[0])?;
    let mut importance = importance_loss(tape, &gates[0])?;
    for g in &gates[1..] {
        let b = balance_loss(tape, g)?;
        balance = tape.add(balance, b)?;
        let i = importance_loss(tape, g)?;
        importance = tape.add(importance, i)?;
    }
    let terms = LossTerms {
        cls: mean(tape, &cls)?,
        l1: mean(tape, &l1)?,
        giou: mean(tape, &gi)?,
        balance,
        importance,
    };
    let (total, breakdown) = total_loss(tape, &terms, weights)?;
    Ok(Objective { total, breakdown, gates })
}

pub struct TrainOutcome {
    pub model: TrackerModel,
    pub store: ParamStore,
    pub log: RunLog,
    pub counters: MaskCounters,
}

/// Runs every configured step. `progress` sees each completed row.
pub fn train(config: &TrainConfig, videos: &[RenderedSequence], mut progress: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut trainer = Trainer::new(config.clone())?;
    let mut log = RunLog {
        config_hash: config.hash(),
        ..RunLog::default()
    };
    for step in 0..config.total_steps() {
        let epoch = step / config.steps_per_epoch;
        let report = trainer.step(videos)?;
        let row = LogRow {
            step,
            epoch,
            lr: config.lr_at_epoch(epoch),
            loss: report.loss,
        };
        progress(&row);
        log.rows.push(row);
        log.routing.extend(report.routing);
    }
    log.wall_clock_s = start.elapsed().as_secs_f64();
    let (model, store, counters) = trainer.into_parts();
    Ok(TrainOutcome { model, store, log, counters })
}

pub const CHECKPOINT_BIN: &str = "model.bin";
pub const CHECKPOINT_MANIFEST: &str = "model.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub steps: usize,
    pub final_total: f64,
    pub wall_clock_s: f64,
    pub version: String,
}

/// Writes config, checkpoint, run log, training routing telemetry and a summary.
pub fn save_run(dir: &Path, config: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    config.write_json(&dir.join(CONFIG_FILE))?;
    outcome.store.save_checkpoint(&dir.join(CHECKPOINT_BIN), &dir.join(CHECKPOINT_MANIFEST))?;
    let csv = dir.join("runlog.csv");
    fs::write(&csv, outcome.log.to_csv()).map_err(|e| Error::io(&csv, e))?;
    write_routing_csv(&dir.join("routing_train.csv"), &outcome.log.routing)?;
    let summary = RunSummary {
        config_hash: outcome.log.config_hash.clone(),
        steps: outcome.log.rows.len(),
        final_total: outcome.log.rows.last().map_or(f64::NAN, |r| r.loss.total),
        wall_clock_s: outcome.log.wall_clock_s,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Rebuilds the model from a run directory's config and loads its checkpoint.
pub fn load_run(dir: &Path) -> Result<(TrainConfig, TrackerModel, ParamStore)> {
    let config = TrainConfig::read_json(&dir.join(CONFIG_FILE))?;
    let (model, mut store) = TrackerModel::new(&config.model, config.seed)?;
    store.load_checkpoint(&dir.join(CHECKPOINT_BIN), &dir.join(CHECKPOINT_MANIFEST))?;
    Ok((config, model, store))
}
