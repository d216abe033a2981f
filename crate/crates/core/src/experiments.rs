//! Train-then-evaluate recipes behind the masking and expert ablations and the
//! routing-width report. The CLI and the acceptance suite share them.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{heterogeneous_widths, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::masking::MaskStrategy;
use crate::missing::{MetricsReport, MissingKind, ScheduleSpec};
use crate::model::TrackerModel;
use crate::params::ParamStore;
use crate::rng;
use crate::routing::{analyze_routing, RoutingRecord, RoutingTable};
use crate::synth::{generate_videos, load_dataset, RenderedSequence, SceneSpec};
use crate::train::{train, LogRow, TrainConfig, TrainOutcome};

/// Compact configuration for ablation runs: a 32-pixel search region, 16-pixel
/// clips, width 32, two encoder blocks, 1500 steps of batch 8, on a scene with
/// fast motion and two RGB distractors.
pub fn ablation_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 15,
        steps_per_epoch: 100,
        model: ModelConfig {
            search_size: 32,
            clip_size: 16,
            embed_dim: 32,
            encoder_blocks: 2,
            ..ModelConfig::default()
        },
        scene: ablation_scene(),
        ..TrainConfig::default()
    }
}

pub fn ablation_scene() -> SceneSpec {
    SceneSpec {
        speed_min: 1.5,
        speed_max: 4.0,
        turn_prob: 0.1,
        distractors: 2,
        clutter_blobs: 10,
        corruption: crate::synth::Corruption::Random {
            rgb: 1,
            x: 1,
            min_len: 12,
            max_len: 20,
        },
        ..SceneSpec::default()
    }
}

/// Which expert bank a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpertChoice {
    /// Widths `4, 8, …, 512`.
    Hetero,
    /// Eight experts of one width.
    Homo(usize),
}

impl ExpertChoice {
    /// The hetero bank and the homogeneous 512, 64 and 4 banks.
    pub const ABLATION: [ExpertChoice; 4] = [
        ExpertChoice::Hetero,
        ExpertChoice::Homo(512),
        ExpertChoice::Homo(64),
        ExpertChoice::Homo(4),
    ];

    pub fn widths(self) -> Vec<usize> {
        let hetero = heterogeneous_widths(10);
        match self {
            ExpertChoice::Hetero => hetero,
            ExpertChoice::Homo(w) => vec![w; hetero.len()],
        }
    }

    pub fn apply(self, model: &mut ModelConfig) {
        model.expert_widths = self.widths();
    }
}

impl fmt::Display for ExpertChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpertChoice::Hetero => f.write_str("hetero"),
            ExpertChoice::Homo(w) => write!(f, "homo:{w}"),
        }
    }
}

impl FromStr for ExpertChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "hetero" {
            return Ok(ExpertChoice::Hetero);
        }
        let bad = || Error::Config(format!("unknown expert bank `{s}` (hetero or homo:WIDTH)"));
        let w: usize = s.strip_prefix("homo:").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if w < 4 || !w.is_power_of_two() {
            return Err(Error::Config(format!("expert width {w} must be a power of two >= 4")));
        }
        Ok(ExpertChoice::Homo(w))
    }
}

fn resolve_split(root: &Path, split: &str) -> std::path::PathBuf {
    let sub = root.join(split);
    if sub.join("manifest.json").is_file() {
        sub
    } else {
        root.to_path_buf()
    }
}

/// Training videos: `dataset/train` (or `dataset` itself) when a dataset is
/// configured, otherwise generated from `scene` and `data_seed`.
pub fn training_videos(config: &TrainConfig) -> Result<Vec<RenderedSequence>> {
    match &config.dataset {
        Some(root) => Ok(load_dataset(&resolve_split(root, "train"))?.1),
        None => generate_videos(&config.scene, config.train_videos, split_seed(config.data_seed, "train")),
    }
}

/// Evaluation videos: `dataset/eval` (or `dataset` itself), otherwise generated.
pub fn evaluation_videos(config: &TrainConfig) -> Result<Vec<RenderedSequence>> {
    match &config.dataset {
        Some(root) => Ok(load_dataset(&resolve_split(root, "eval"))?.1),
        None => generate_videos(&config.scene, config.eval_videos, split_seed(config.data_seed, "eval")),
    }
}

/// Seed of a dataset split, so `gen-data --seed s` and in-memory generation
/// with `data_seed = s` produce the same videos.
pub fn split_seed(data_seed: u64, split: &str) -> u64 {
    rng::derive_seed(data_seed, split, 0)
}

/// One cell pair of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// `full` or `missing`.
    pub setting: String,
    pub precision: f64,
    pub auc: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,setting,precision,auc\n");
    for r in rows {
        s += &format!("{},{},{},{}\n", r.variant, r.setting, r.precision, r.auc);
    }
    s
}

/// Result of training one configuration and evaluating it under several schedules.
pub struct Evaluated {
    pub outcome: TrainOutcome,
    pub reports: Vec<(MetricsReport, Vec<RoutingRecord>)>,
}

pub fn train_and_evaluate(
    config: &TrainConfig,
    train_videos: &[RenderedSequence],
    eval_videos: &[RenderedSequence],
    specs: &[ScheduleSpec],
    progress: impl FnMut(&LogRow),
) -> Result<Evaluated> {
    let outcome = train(config, train_videos, progress)?;
    let crop = config.crop();
    let reports = specs
        .iter()
        .map(|spec| evaluate(&outcome.model, &outcome.store, eval_videos, &crop, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluated { outcome, reports })
}

fn full_and_missing(variant: String, reports: &[(MetricsReport, Vec<RoutingRecord>)]) -> Vec<AblationRow> {
    ["full", "missing"]
        .iter()
        .zip(reports)
        .map(|(setting, (r, _))| AblationRow {
            variant: variant.clone(),
            setting: setting.to_string(),
            precision: r.precision_at_20,
            auc: r.success_auc,
        })
        .collect()
}

/// Trains one model per masking strategy and evaluates each on complete
/// data and under `missing`.
pub fn masking_ablation(
    base: &TrainConfig,
    train_videos: &[RenderedSequence],
    eval_videos: &[RenderedSequence],
    missing: ScheduleSpec,
    mut progress: impl FnMut(&str, &LogRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for strategy in MaskStrategy::ALL {
        let config = TrainConfig {
            strategy,
            ..base.clone()
        };
        let name = strategy.name();
        let run = train_and_evaluate(&config, train_videos, eval_videos, &[ScheduleSpec::full(), missing], |r| progress(name, r))?;
        rows.extend(full_and_missing(name.to_string(), &run.reports));
    }
    Ok(rows)
}

/// Trains one model per expert bank and evaluates each on complete data and
/// under `missing`.
pub fn expert_ablation(
    base: &TrainConfig,
    choices: &[ExpertChoice],
    train_videos: &[RenderedSequence],
    eval_videos: &[RenderedSequence],
    missing: ScheduleSpec,
    mut progress: impl FnMut(&str, &LogRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &choice in choices {
        let mut config = base.clone();
        choice.apply(&mut config.model);
        let name = choice.to_string();
        let run = train_and_evaluate(&config, train_videos, eval_videos, &[ScheduleSpec::full(), missing], |r| progress(&name, r))?;
        rows.extend(full_and_missing(name, &run.reports));
    }
    Ok(rows)
}

/// Mean selected expert width at one schedule rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthAtRate {
    pub rate: f64,
    pub records: usize,
    pub mean_width: f64,
    pub precision: f64,
    pub auc: f64,
}

/// Routing behavior of a trained model across missing rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub kind: MissingKind,
    pub by_rate: Vec<WidthAtRate>,
    /// Bucketed table over the telemetry of every rate.
    pub table: RoutingTable,
    /// Whether the mean width at the highest rate exceeds that at the lowest.
    pub width_increases: bool,
    #[serde(skip)]
    pub telemetry: Vec<RoutingRecord>,
}

impl RoutingReport {
    pub fn by_rate_csv(&self) -> String {
        let mut s = String::from("kind,rate,records,mean_width,precision,auc\n");
        for r in &self.by_rate {
            s += &format!("{},{},{},{},{},{}\n", self.kind, r.rate, r.records, r.mean_width, r.precision, r.auc);
        }
        s
    }
}

fn mean_width(records: &[RoutingRecord]) -> f64 {
    let (sum, n) = records
        .iter()
        .flat_map(|r| r.widths.iter())
        .fold((0.0, 0usize), |(s, n), &w| (s + w as f64, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Evaluates at each rate in `rates` (ascending) and aggregates the routing.
pub fn routing_report(
    model: &TrackerModel,
    store: &ParamStore,
    config: &TrainConfig,
    videos: &[RenderedSequence],
    kind: MissingKind,
    rates: &[f64],
    seed: u64,
) -> Result<RoutingReport> {
    if rates.is_empty() {
        return Err(Error::Validation("no missing rates requested".into()));
    }
    let crop = config.crop();
    let mut by_rate = Vec::with_capacity(rates.len());
    let mut telemetry = Vec::new();
    for &rate in rates {
        let spec = ScheduleSpec { kind, rate, seed };
        let (report, records) = evaluate(model, store, videos, &crop, &spec)?;
        by_rate.push(WidthAtRate {
            rate,
            records: records.len(),
            mean_width: mean_width(&records),
            precision: report.precision_at_20,
            auc: report.success_auc,
        });
        telemetry.extend(records);
    }
    let widths = model.fuse_layers()[0].widths();
    let table = analyze_routing(&telemetry, &widths)?;
    let width_increases = by_rate[by_rate.len() - 1].mean_width > by_rate[0].mean_width;
    Ok(RoutingReport {
        kind,
        by_rate,
        table,
        width_increases,
        telemetry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_choice_parses_and_prints() {
        for s in ["hetero", "homo:512", "homo:4"] {
            assert_eq!(s.parse::<ExpertChoice>().unwrap().to_string(), s);
        }
        assert!("homo:6".parse::<ExpertChoice>().is_err());
        assert!("mixed".parse::<ExpertChoice>().is_err());
        assert_eq!(ExpertChoice::Homo(64).widths(), vec![64; 8]);
    }

    #[test]
    fn ablation_config_is_valid() {
        let c = ablation_config(3);
        c.validate().unwrap();
        c.scene.validate().unwrap();
        assert_eq!(c.model.seq_len(), 2 * 16 + 2 * 3 * 4);
    }

    #[test]
    fn ablation_csv_shape() {
        let rows = vec![
            AblationRow {
                variant: "none".into(),
                setting: "full".into(),
                precision: 0.5,
                auc: 0.25,
            };
            2
        ];
        let csv = ablation_csv(&rows);
        assert_eq!(csv, "variant,setting,precision,auc\nnone,full,0.5,0.25\nnone,full,0.5,0.25\n");
    }

    #[test]
    fn mean_width_over_all_slots() {
        let r = |w: Vec<usize>| RoutingRecord {
            source: "v".into(),
            index: 0,
            layer: 0,
            missing_rate: 0.0,
            selected: vec![0; w.len()],
            widths: w,
        };
        assert_eq!(mean_width(&[r(vec![4, 8]), r(vec![512, 4])]), 132.0);
    }
}
