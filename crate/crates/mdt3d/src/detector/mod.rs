//! Toy two-stage voxel detector with the three prompt hooks: point/voxel
//! encoder (MSBN or plain BN), BEV convolutional backbone (optional range-mask
//! channel before every conv), anchor-based dense head, and an RoI refinement
//! head (optional object-conditional residuals), plus the joint multi-dataset
//! training loop.

mod forward;
mod train;

pub use forward::{
    assign_targets, backbone_forward, build_anchors, compute_detection_loss, compute_roi_loss,
    dense_head_forward, encode_voxels, prepare_batch, roi_head_forward, select_proposals,
    AnchorGrid, Assignment, BatchPrep, ParamTensors, Positive, Proposal, RoiStage,
};
pub use train::{
    batch_loss, predict, predict_all_ones_mask, BatchFrame, FrozenBatch, StepOutput, TrainLogRow,
};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnum::{CheckpointError, DiffError, OptimizerState, ParamStore};
use crate::geometry::GeomError;
use crate::prompts::{compute_range_mask, MsbnLayer, OcrlHead, PromptError, RangeMask, RunningStats};
use crate::synthdata::{DatasetSpec, GLOBAL_RANGE};

#[derive(Debug, Error)]
pub enum DetError {
    #[error("bad detector config: {0}")]
    Config(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: u64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Full configuration surface. Prompt toggles are independent; everything
/// else is plumbing for the toy architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub msbn_enabled: bool,
    pub mask_enabled: bool,
    pub ocrl_enabled: bool,
    /// Instance/batch mean balancing ratio for MSBN.
    pub alpha: f64,
    pub voxel_size: [f64; 3],
    pub max_points_per_voxel: usize,
    /// Point/voxel feature width C.
    pub encoder_channels: usize,
    /// Backbone feature width C'.
    pub backbone_channels: usize,
    pub n_classes: usize,
    /// One axis-aligned anchor per class per head cell, at these sizes.
    pub anchor_sizes: Vec<[f64; 3]>,
    pub anchor_z: f64,
    /// RoI crop-pool resolution (n x n).
    pub roi_size: usize,
    /// RoI feature width after the first refinement layer; also the OCRL
    /// feature dimension.
    pub roi_hidden: usize,
    pub max_proposals: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Dense-head anchor assignment threshold.
    pub match_iou: f64,
    /// RoI positive threshold for refinement targets.
    pub roi_pos_iou: f64,
    pub w_delta: f64,
    pub w_cls: f64,
    pub w_roi: f64,
    pub dis_loss_weight: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip applied before each optimizer step
    /// (<= 0 disables).
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Number of jointly trained datasets; fixed at [`Detector::new`] and
    /// sized into the discriminator head.
    pub n_datasets: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            msbn_enabled: false,
            mask_enabled: false,
            ocrl_enabled: false,
            alpha: 0.5,
            voxel_size: [4.7, 4.7, 6.0],
            max_points_per_voxel: 8,
            encoder_channels: 32,
            backbone_channels: 64,
            n_classes: 3,
            anchor_sizes: vec![[8.8, 3.7, 1.6], [3.2, 2.8, 1.7], [5.5, 2.2, 1.7]],
            anchor_z: 0.5,
            roi_size: 4,
            roi_hidden: 32,
            max_proposals: 32,
            score_threshold: 0.1,
            nms_iou: 0.5,
            match_iou: 0.5,
            roi_pos_iou: 0.35,
            w_delta: 1.0,
            w_cls: 1.0,
            w_roi: 1.0,
            dis_loss_weight: 0.5,
            lr: 0.01,
            weight_decay: 0.0,
            grad_clip_norm: 10.0,
            epochs: 4,
            steps_per_epoch: 64,
            batch_size: 4,
            n_datasets: 1,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    /// Desk-scale preset: coarse grid and narrow channels so whole training
    /// runs finish in seconds.
    pub fn small() -> Self {
        Self {
            voxel_size: [4.7, 4.7, 6.0],
            encoder_channels: 8,
            backbone_channels: 16,
            roi_hidden: 16,
            epochs: 3,
            steps_per_epoch: 50,
            ..Self::default()
        }
    }

    /// Micro preset for finite-difference checks of the full loss.
    pub fn micro() -> Self {
        Self {
            voxel_size: [18.8, 18.8, 6.0],
            encoder_channels: 4,
            backbone_channels: 4,
            roi_hidden: 4,
            roi_size: 2,
            max_proposals: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DetError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DetError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.anchor_sizes.len() != self.n_classes {
            return Err(DetError::Config(format!(
                "{} anchor sizes for {} classes",
                self.anchor_sizes.len(),
                self.n_classes
            )));
        }
        if self.anchor_sizes.iter().flatten().any(|&s| s <= 0.0) {
            return Err(DetError::Config("anchor sizes must be positive".into()));
        }
        if self.voxel_size.iter().any(|&v| v <= 0.0) {
            return Err(DetError::Config("voxel sizes must be positive".into()));
        }
        if self.batch_size == 0 || self.n_classes == 0 || self.roi_size == 0 {
            return Err(DetError::Config("zero-sized dimension".into()));
        }
        Ok(())
    }

    /// BEV grid resolution implied by the global range and voxel size.
    pub fn bev_dims(&self) -> (usize, usize) {
        let h = ((GLOBAL_RANGE[3] - GLOBAL_RANGE[0]) / self.voxel_size[0]).ceil() as usize;
        let w = ((GLOBAL_RANGE[4] - GLOBAL_RANGE[1]) / self.voxel_size[1]).ceil() as usize;
        (h, w)
    }

    /// Head grid after the stride-2 backbone (3x3 convs, pad 1).
    pub fn head_dims(&self) -> (usize, usize) {
        let (h, w) = self.bev_dims();
        ((h - 1) / 2 + 1, (w - 1) / 2 + 1)
    }

    pub(crate) fn msbn_layer(&self) -> MsbnLayer {
        MsbnLayer::new(self.encoder_channels, self.alpha)
    }

    pub(crate) fn ocrl_head(&self) -> OcrlHead {
        let mut h = OcrlHead::new(self.roi_hidden, self.n_datasets.max(1));
        h.dis_loss_weight = self.dis_loss_weight;
        h
    }
}

/// Final per-frame predictions: boxes/scores/classes aligned, scores sorted
/// descending.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionResult {
    pub boxes: Vec<crate::synthdata::Box3D>,
    pub scores: Vec<f64>,
    pub class_ids: Vec<usize>,
    pub dataset_id: u32,
    pub frame_index: usize,
}

impl DetectionResult {
    pub fn empty(dataset_id: u32, frame_index: usize) -> Self {
        Self { boxes: Vec::new(), scores: Vec::new(), class_ids: Vec::new(), dataset_id, frame_index }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

enum ParamKind {
    /// Uniform(-b, b) with b = sqrt(1 / fan_in).
    Weight { fan_in: usize },
    Zeros,
    Ones,
    /// Zero bias except the first `k` entries (objectness prior).
    HeadBias { k: usize, prior: f64 },
}

/// The detector: config, flat parameter store (including running statistics),
/// optimizer state, and precomputed range masks for the training datasets.
pub struct Detector {
    pub cfg: DetectorConfig,
    pub params: ParamStore,
    pub opt: OptimizerState,
    pub masks: BTreeMap<u32, RangeMask>,
}

impl Detector {
    /// Initializes parameters deterministically. Each tensor draws from its
    /// own name-seeded stream, so toggling one prompt module never perturbs
    /// the initialization of unrelated parameters.
    pub fn new(mut cfg: DetectorConfig, specs: &[DatasetSpec]) -> Result<Self, DetError> {
        if !specs.is_empty() {
            cfg.n_datasets = specs.len();
        }
        cfg.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, kind) in param_schema(&cfg) {
            let n: usize = shape.iter().product();
            let values = match kind {
                ParamKind::Weight { fan_in } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(&name));
                    let b = (1.0 / fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-b..b)).collect()
                }
                ParamKind::Zeros => vec![0.0; n],
                ParamKind::Ones => vec![1.0; n],
                ParamKind::HeadBias { k, prior } => {
                    let mut v = vec![0.0; n];
                    for e in v.iter_mut().take(k) {
                        *e = prior;
                    }
                    v
                }
            };
            params.insert(&name, &shape, values);
        }
        let (h, w) = cfg.bev_dims();
        let mut masks = BTreeMap::new();
        if cfg.mask_enabled {
            let plane = [GLOBAL_RANGE[0], GLOBAL_RANGE[1], GLOBAL_RANGE[3], GLOBAL_RANGE[4]];
            for spec in specs {
                masks.insert(spec.id, compute_range_mask(spec, &plane, h, w)?);
            }
        }
        Ok(Self { cfg, params, opt: OptimizerState::default(), masks })
    }

    /// Current running normalization statistics of the voxel encoder.
    pub fn running_stats(&self) -> RunningStats {
        RunningStats {
            mean: self.params.get("vfe.bn.running_mean").values.clone(),
            var: self.params.get("vfe.bn.running_var").values.clone(),
        }
    }

    pub(crate) fn store_running_stats(&mut self, rs: &RunningStats) {
        let c = self.cfg.encoder_channels;
        self.params.insert("vfe.bn.running_mean", &[c], rs.mean.clone());
        self.params.insert("vfe.bn.running_var", &[c], rs.var.clone());
    }
}

/// Every parameter tensor: name, shape, init rule. Running statistics live in
/// the same store (for checkpointing) but are excluded from gradient updates.
fn param_schema(cfg: &DetectorConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let c = cfg.encoder_channels;
    let c2 = cfg.backbone_channels;
    let k = cfg.n_classes;
    let m = if cfg.mask_enabled { 1 } else { 0 };
    let roi_in = cfg.roi_size * cfg.roi_size * c2;
    let f = cfg.roi_hidden;
    let mut schema = vec![
        (
            "vfe.w".into(),
            vec![forward::POINT_FEATURES, c],
            ParamKind::Weight { fan_in: forward::POINT_FEATURES },
        ),
        ("vfe.b".into(), vec![c], ParamKind::Zeros),
        ("vfe.bn.gamma".into(), vec![c], ParamKind::Ones),
        ("vfe.bn.beta".into(), vec![c], ParamKind::Zeros),
        ("vfe.bn.running_mean".into(), vec![c], ParamKind::Zeros),
        ("vfe.bn.running_var".into(), vec![c], ParamKind::Ones),
        (
            "backbone.conv1.k".into(),
            vec![c2, c + m, 3, 3],
            ParamKind::Weight { fan_in: (c + m) * 9 },
        ),
        ("backbone.conv1.b".into(), vec![c2], ParamKind::Zeros),
        (
            "backbone.conv2.k".into(),
            vec![c2, c2 + m, 3, 3],
            ParamKind::Weight { fan_in: (c2 + m) * 9 },
        ),
        ("backbone.conv2.b".into(), vec![c2], ParamKind::Zeros),
        (
            "backbone.conv3.k".into(),
            vec![c2, c2 + m, 3, 3],
            ParamKind::Weight { fan_in: (c2 + m) * 9 },
        ),
        ("backbone.conv3.b".into(), vec![c2], ParamKind::Zeros),
        ("head.k".into(), vec![8 * k, c2, 1, 1], ParamKind::Weight { fan_in: c2 }),
        ("head.b".into(), vec![8 * k], ParamKind::HeadBias { k, prior: -2.0 }),
        ("roi.w1".into(), vec![roi_in, f], ParamKind::Weight { fan_in: roi_in }),
        ("roi.b1".into(), vec![f], ParamKind::Zeros),
        ("roi.w2".into(), vec![f, 7], ParamKind::Weight { fan_in: f }),
        ("roi.b2".into(), vec![7], ParamKind::Zeros),
    ];
    if cfg.ocrl_enabled {
        for (name, shape) in cfg.ocrl_head().param_shapes() {
            let kind = if shape.len() == 2 {
                ParamKind::Weight { fan_in: shape[0] }
            } else {
                ParamKind::Zeros
            };
            schema.push((format!("ocrl.{name}"), shape, kind));
        }
    }
    schema
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
