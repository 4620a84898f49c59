//! Reproducible experiment driver: dataset generation, training, evaluation,
//! the stage-wise prompt ablation, the alpha sweep, and zero-shot transfer.
//! Every run snapshots its full config and derives all randomness from one
//! root seed, so identical configs reproduce identical artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{
    predict, predict_all_ones_mask, DetError, Detector, DetectorConfig, DetectionResult,
};
use crate::diffnum::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::evalkit::{default_thresholds, evaluate, EvalError, EvalReport};
use crate::synthdata::{
    builtin_registry, generate_frame, write_frames_jsonl, DatasetSpec, Frame, SpecRegistry,
    SynthError,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("bad experiment config: {0}")]
    Config(String),
    #[error("unknown dataset spec `{0}`")]
    UnknownSpec(String),
    #[error(transparent)]
    Det(#[from] DetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("reports do not share a dataset x class grid")]
    GridMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Gen,
    Train,
    Eval,
    AblateStages,
    SweepAlpha,
    Zeroshot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    /// Names resolved against the built-in spec registry.
    pub spec_names: Vec<String>,
    /// Held-out spec for zero-shot runs.
    pub holdout: Option<String>,
    pub train_frames: usize,
    pub eval_frames: usize,
    /// Root seed; every stream (data, init) derives from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub detector: DetectorConfig,
    /// Per-class IoU thresholds; None means the car-0.7/other-0.5 default.
    pub thresholds: Option<BTreeMap<usize, f64>>,
    /// Checkpoint to evaluate (eval kind); defaults to out_dir/checkpoint.bin.
    pub checkpoint: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind,
            spec_names: vec!["k_like".into(), "w_like".into()],
            holdout: None,
            train_frames: 60,
            eval_frames: 20,
            seed: 0,
            out_dir: out_dir.into(),
            detector: DetectorConfig::small(),
            thresholds: None,
            checkpoint: None,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ExpError> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    /// Applies a `--set key=value` dotted-path override onto the JSON form.
    pub fn apply_set(&mut self, assignment: &str) -> Result<(), ExpError> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ExpError::Config(format!("override `{assignment}` is not key=value")))?;
        let mut root = serde_json::to_value(&*self)?;
        let pointer = format!("/{}", path.replace('.', "/"));
        let entry = root
            .pointer_mut(&pointer)
            .ok_or_else(|| ExpError::Config(format!("unknown config key `{path}`")))?;
        *entry = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        *self = serde_json::from_value(root)?;
        Ok(())
    }

    pub fn resolve_specs(&self, registry: &SpecRegistry) -> Result<Vec<DatasetSpec>, ExpError> {
        self.spec_names
            .iter()
            .map(|n| registry.get(n).cloned().map_err(|_| ExpError::UnknownSpec(n.clone())))
            .collect()
    }

    pub fn validate(&self, registry: &SpecRegistry) -> Result<(), ExpError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ExpError::Config(format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.spec_names.is_empty() {
            return Err(ExpError::Config("no dataset specs".into()));
        }
        self.resolve_specs(registry)?;
        if let Some(h) = &self.holdout {
            if registry.get(h).is_err() {
                return Err(ExpError::UnknownSpec(h.clone()));
            }
        }
        if self.kind == ExperimentKind::Zeroshot && self.holdout.is_none() {
            return Err(ExpError::Config("zeroshot requires a holdout spec".into()));
        }
        self.detector.validate().map_err(ExpError::Det)?;
        Ok(())
    }

    fn thresholds(&self) -> BTreeMap<usize, f64> {
        self.thresholds.clone().unwrap_or_else(|| default_thresholds(self.detector.n_classes))
    }

    /// Short config fingerprint recorded into reports.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Deterministic per-(spec, split, index) frame seed derived from the root.
fn frame_seed(root: u64, spec: &DatasetSpec, split: u64, index: usize) -> u64 {
    root ^ split.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (spec.id as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (index as u64).wrapping_mul(0x94D0_49BB_1331_11EB)
}

pub fn generate_split(
    spec: &DatasetSpec,
    count: usize,
    root_seed: u64,
    split: u64,
) -> Result<Vec<Frame>, ExpError> {
    (0..count).map(|i| Ok(generate_frame(spec, frame_seed(root_seed, spec, split, i))?)).collect()
}

const SPLIT_TRAIN: u64 = 1;
const SPLIT_EVAL: u64 = 2;

/// One labelled row of a multi-run experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRow {
    pub label: String,
    pub report: EvalReport,
    pub final_train_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub kind: ExperimentKind,
    pub rows: Vec<RunRow>,
    pub artifacts: Vec<PathBuf>,
}

fn write_snapshot(cfg: &ExperimentConfig) -> Result<PathBuf, ExpError> {
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("config.snapshot.json");
    fs::write(&path, serde_json::to_string_pretty(cfg)?)?;
    Ok(path)
}

fn write_train_log(path: &Path, log: &[crate::detector::TrainLogRow]) -> Result<(), ExpError> {
    let mut out = String::from("step,lr,det_loss,dis_loss,total,dataset_id\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.lr, r.det_loss, r.dis_loss, r.total, r.dataset_id
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_metrics_csv(path: &Path, rows: &[RunRow]) -> Result<(), ExpError> {
    let mut out = String::from("row,dataset_id,metric,value\n");
    for row in rows {
        for ds in &row.report.datasets {
            let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},map_bev,{}\n", row.label, ds.dataset_id, fmt(ds.map_bev)));
            out.push_str(&format!("{},{},map_3d,{}\n", row.label, ds.dataset_id, fmt(ds.map_3d)));
            for ce in &ds.classes {
                out.push_str(&format!(
                    "{},{},ap_bev_c{},{}\n",
                    row.label,
                    ds.dataset_id,
                    ce.class_id,
                    fmt(ce.ap_bev)
                ));
            }
            for ss in &ds.size_stats {
                if let Some(w1) = ss.w1 {
                    for (k, dim) in ["l", "w", "h"].iter().enumerate() {
                        out.push_str(&format!(
                            "{},{},w1_{dim}_c{},{}\n",
                            row.label, ds.dataset_id, ss.class_id, w1[k]
                        ));
                    }
                }
            }
        }
        if let Some(loss) = row.final_train_loss {
            out.push_str(&format!("{},all,final_train_loss,{loss}\n", row.label));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Trains one detector on the given (spec, frames) pairs and evaluates it on
/// the eval split; predictions use each frame's own spec as the prompt.
fn train_and_eval(
    cfg: &ExperimentConfig,
    detector_cfg: DetectorConfig,
    train_specs: &[DatasetSpec],
    train_data: &[(DatasetSpec, Vec<Frame>)],
    eval_data: &[(DatasetSpec, Vec<Frame>)],
) -> Result<(Detector, Vec<crate::detector::TrainLogRow>, EvalReport), ExpError> {
    let mut det = Detector::new(detector_cfg, train_specs)?;
    let log = det.train(train_data)?;
    let report = eval_on(&det, eval_data, cfg)?;
    Ok((det, log, report))
}

fn eval_on(
    det: &Detector,
    eval_data: &[(DatasetSpec, Vec<Frame>)],
    cfg: &ExperimentConfig,
) -> Result<EvalReport, ExpError> {
    let mut results: Vec<DetectionResult> = Vec::new();
    let mut frames: Vec<Frame> = Vec::new();
    for (spec, fr) in eval_data {
        for (i, f) in fr.iter().enumerate() {
            results.push(predict(det, f, spec, i)?);
            frames.push(f.clone());
        }
    }
    Ok(evaluate(&results, &frames, &cfg.thresholds(), &cfg.fingerprint())?)
}

/// Runs one experiment to completion, writing all artifacts into
/// `cfg.out_dir`: `config.snapshot.json`, `train_log.csv`, `checkpoint.bin`,
/// `report.json`, `metrics.csv` (kinds that train/evaluate), or JSONL frame
/// dumps (`gen`).
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary, ExpError> {
    let registry = builtin_registry();
    cfg.validate(&registry)?;
    let mut artifacts = vec![write_snapshot(cfg)?];
    let specs = cfg.resolve_specs(&registry)?;

    let gen_train = |specs: &[DatasetSpec]| -> Result<Vec<(DatasetSpec, Vec<Frame>)>, ExpError> {
        specs
            .iter()
            .map(|s| Ok((s.clone(), generate_split(s, cfg.train_frames, cfg.seed, SPLIT_TRAIN)?)))
            .collect()
    };
    let gen_eval = |specs: &[DatasetSpec]| -> Result<Vec<(DatasetSpec, Vec<Frame>)>, ExpError> {
        specs
            .iter()
            .map(|s| Ok((s.clone(), generate_split(s, cfg.eval_frames, cfg.seed, SPLIT_EVAL)?)))
            .collect()
    };

    let mut rows: Vec<RunRow> = Vec::new();
    match cfg.kind {
        ExperimentKind::Gen => {
            for spec in &specs {
                for (split, salt, count) in
                    [("train", SPLIT_TRAIN, cfg.train_frames), ("eval", SPLIT_EVAL, cfg.eval_frames)]
                {
                    let frames = generate_split(spec, count, cfg.seed, salt)?;
                    let path = cfg.out_dir.join(format!("{}_{split}.jsonl", spec.name));
                    let file = fs::File::create(&path)?;
                    write_frames_jsonl(std::io::BufWriter::new(file), &frames)?;
                    artifacts.push(path);
                }
            }
        }
        ExperimentKind::Train => {
            let train_data = gen_train(&specs)?;
            let eval_data = gen_eval(&specs)?;
            let (det, log, report) =
                train_and_eval(cfg, cfg.detector.clone(), &specs, &train_data, &eval_data)?;
            let log_path = cfg.out_dir.join("train_log.csv");
            write_train_log(&log_path, &log)?;
            let ckpt_path = cfg.out_dir.join("checkpoint.bin");
            save_checkpoint(&ckpt_path, &det.params)?;
            artifacts.push(log_path);
            artifacts.push(ckpt_path);
            rows.push(RunRow {
                label: "train".into(),
                report,
                final_train_loss: log.last().map(|r| r.total),
            });
        }
        ExperimentKind::Eval => {
            let ckpt = cfg
                .checkpoint
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join("checkpoint.bin"));
            let mut det = Detector::new(cfg.detector.clone(), &specs)?;
            det.params = load_checkpoint(&ckpt)?;
            let eval_data = gen_eval(&specs)?;
            let report = eval_on(&det, &eval_data, cfg)?;
            rows.push(RunRow { label: "eval".into(), report, final_train_loss: None });
        }
        ExperimentKind::AblateStages => {
            let train_data = gen_train(&specs)?;
            let eval_data = gen_eval(&specs)?;
            // Table-style stage matrix: prompts added voxelization -> backbone -> head
            let stages: [(&str, [bool; 3]); 4] = [
                ("baseline", [false, false, false]),
                ("voxelization", [true, false, false]),
                ("backbone", [true, true, false]),
                ("head", [true, true, true]),
            ];
            for (label, [msbn, mask, ocrl]) in stages {
                let mut dcfg = cfg.detector.clone();
                dcfg.msbn_enabled = msbn;
                dcfg.mask_enabled = mask;
                dcfg.ocrl_enabled = ocrl;
                let (_, log, report) =
                    train_and_eval(cfg, dcfg, &specs, &train_data, &eval_data)?;
                rows.push(RunRow {
                    label: label.into(),
                    report,
                    final_train_loss: log.last().map(|r| r.total),
                });
            }
        }
        ExperimentKind::SweepAlpha => {
            let train_data = gen_train(&specs)?;
            let eval_data = gen_eval(&specs)?;
            for alpha in [0.0, 0.1, 0.3, 0.5, 0.7, 1.0] {
                let mut dcfg = cfg.detector.clone();
                dcfg.msbn_enabled = true;
                dcfg.alpha = alpha;
                let (_, log, report) =
                    train_and_eval(cfg, dcfg, &specs, &train_data, &eval_data)?;
                rows.push(RunRow {
                    label: format!("alpha={alpha}"),
                    report,
                    final_train_loss: log.last().map(|r| r.total),
                });
            }
        }
        ExperimentKind::Zeroshot => {
            let holdout_name = cfg.holdout.clone().unwrap();
            let holdout = registry
                .get(&holdout_name)
                .cloned()
                .map_err(|_| ExpError::UnknownSpec(holdout_name.clone()))?;
            let train_specs: Vec<DatasetSpec> =
                specs.iter().filter(|s| s.name != holdout_name).cloned().collect();
            if train_specs.len() == specs.len() {
                return Err(ExpError::Config(format!(
                    "holdout `{holdout_name}` not in spec_names"
                )));
            }
            let train_data = gen_train(&train_specs)?;
            let mut det = Detector::new(cfg.detector.clone(), &train_specs)?;
            let log = det.train(&train_data)?;
            let log_path = cfg.out_dir.join("train_log.csv");
            write_train_log(&log_path, &log)?;
            let ckpt_path = cfg.out_dir.join("checkpoint.bin");
            save_checkpoint(&ckpt_path, &det.params)?;
            artifacts.push(log_path);
            artifacts.push(ckpt_path);

            let unseen = generate_split(&holdout, cfg.eval_frames, cfg.seed, SPLIT_EVAL)?;
            // held-out range supplied as the mask prompt vs an uninformative mask
            let mut with_mask = Vec::new();
            let mut all_ones = Vec::new();
            for (i, f) in unseen.iter().enumerate() {
                with_mask.push(predict(&det, f, &holdout, i)?);
                all_ones.push(predict_all_ones_mask(&det, f, i)?);
            }
            let th = cfg.thresholds();
            let fp = cfg.fingerprint();
            rows.push(RunRow {
                label: "zeroshot-mask".into(),
                report: evaluate(&with_mask, &unseen, &th, &fp)?,
                final_train_loss: log.last().map(|r| r.total),
            });
            rows.push(RunRow {
                label: "zeroshot-allones".into(),
                report: evaluate(&all_ones, &unseen, &th, &fp)?,
                final_train_loss: None,
            });
        }
    }

    if !rows.is_empty() {
        let metrics_path = cfg.out_dir.join("metrics.csv");
        write_metrics_csv(&metrics_path, &rows)?;
        let report_path = cfg.out_dir.join("report.json");
        fs::write(&report_path, serde_json::to_string_pretty(&rows)?)?;
        artifacts.push(metrics_path);
        artifacts.push(report_path);
    }
    Ok(RunSummary { kind: cfg.kind, rows, artifacts })
}

/// One cell of a report comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaCell {
    pub dataset_id: u32,
    pub class_id: usize,
    pub metric: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaTable {
    pub cells: Vec<DeltaCell>,
    /// Per-dataset mAP_BEV deltas.
    pub map_deltas: Vec<(u32, Option<f64>)>,
}

/// Per-cell AP deltas (b − a) plus per-dataset mAP deltas. Errors unless both
/// reports cover the same dataset × class grid.
pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<DeltaTable, ExpError> {
    if a.datasets.len() != b.datasets.len() {
        return Err(ExpError::GridMismatch);
    }
    let mut cells = Vec::new();
    let mut map_deltas = Vec::new();
    for (da, db) in a.datasets.iter().zip(&b.datasets) {
        if da.dataset_id != db.dataset_id || da.classes.len() != db.classes.len() {
            return Err(ExpError::GridMismatch);
        }
        for (ca, cb) in da.classes.iter().zip(&db.classes) {
            if ca.class_id != cb.class_id {
                return Err(ExpError::GridMismatch);
            }
            for (metric, va, vb) in
                [("ap_bev", ca.ap_bev, cb.ap_bev), ("ap_3d", ca.ap_3d, cb.ap_3d)]
            {
                cells.push(DeltaCell {
                    dataset_id: da.dataset_id,
                    class_id: ca.class_id,
                    metric: metric.into(),
                    a: va,
                    b: vb,
                    delta: match (va, vb) {
                        (Some(x), Some(y)) => Some(y - x),
                        _ => None,
                    },
                });
            }
        }
        let delta = match (da.map_bev, db.map_bev) {
            (Some(x), Some(y)) => Some(y - x),
            _ => None,
        };
        map_deltas.push((da.dataset_id, delta));
    }
    Ok(DeltaTable { cells, map_deltas })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_round_trip_and_validation() {
        let cfg = ExperimentConfig::new(ExperimentKind::Train, "/tmp/x");
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.kind, ExperimentKind::Train);
        back.validate(&builtin_registry()).unwrap();

        let mut bad = cfg.clone();
        bad.spec_names.push("no_such_spec".into());
        assert!(matches!(bad.validate(&builtin_registry()), Err(ExpError::UnknownSpec(_))));

        let mut zs = cfg.clone();
        zs.kind = ExperimentKind::Zeroshot;
        assert!(zs.validate(&builtin_registry()).is_err());
        zs.holdout = Some("n_like".into());
        zs.validate(&builtin_registry()).unwrap();
    }

    #[test]
    fn apply_set_overrides_dotted_paths() {
        let mut cfg = ExperimentConfig::new(ExperimentKind::Train, "/tmp/x");
        cfg.apply_set("detector.lr=0.025").unwrap();
        assert_eq!(cfg.detector.lr, 0.025);
        cfg.apply_set("detector.msbn_enabled=true").unwrap();
        assert!(cfg.detector.msbn_enabled);
        cfg.apply_set("train_frames=7").unwrap();
        assert_eq!(cfg.train_frames, 7);
        cfg.apply_set("kind=\"sweep-alpha\"").unwrap();
        assert_eq!(cfg.kind, ExperimentKind::SweepAlpha);
        cfg.apply_set("holdout=\"n_like\"").unwrap();
        assert_eq!(cfg.holdout.as_deref(), Some("n_like"));
        assert!(cfg.apply_set("detector.no_such=1").is_err());
        assert!(cfg.apply_set("nonsense").is_err());
    }

    #[test]
    fn frame_seeds_are_distinct_across_splits_and_indices() {
        let spec = crate::synthdata::k_like();
        let a = frame_seed(1, &spec, SPLIT_TRAIN, 0);
        let b = frame_seed(1, &spec, SPLIT_TRAIN, 1);
        let c = frame_seed(1, &spec, SPLIT_EVAL, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn compare_self_is_all_zero_and_detects_single_change() {
        let frames = vec![Frame {
            dataset_id: 0,
            points: vec![],
            boxes: vec![crate::synthdata::Box3D {
                center: [0.0, 0.0, 0.5],
                size: [4.0, 2.0, 1.6],
                class_id: 0,
            }],
        }];
        let results = vec![DetectionResult {
            boxes: frames[0].boxes.clone(),
            scores: vec![0.9],
            class_ids: vec![0],
            dataset_id: 0,
            frame_index: 0,
        }];
        let report =
            evaluate(&results, &frames, &default_thresholds(3), "x").unwrap();
        let table = compare(&report, &report).unwrap();
        assert!(table.cells.iter().all(|c| c.delta.unwrap_or(0.0) == 0.0));

        let mut changed = report.clone();
        changed.datasets[0].classes[0].ap_bev = Some(0.25);
        let table = compare(&report, &changed).unwrap();
        let nonzero: Vec<&DeltaCell> =
            table.cells.iter().filter(|c| c.delta.unwrap_or(0.0) != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(nonzero[0].metric, "ap_bev");
        assert!((nonzero[0].delta.unwrap() - (0.25 - 1.0)).abs() < 1e-12);

        let mut mismatched = report.clone();
        mismatched.datasets.clear();
        assert!(matches!(compare(&report, &mismatched), Err(ExpError::GridMismatch)));
    }
}
