//! Batch loss assembly, the joint training loop, and inference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffnum::{
    adam_step, clip_grad_norm, concat_rows, onecycle_lr, AdamConfig, Graph, Tensor,
};
use crate::geometry::box_decode;
use crate::prompts::{compute_range_mask, RangeMask, RunningStats};
use crate::synthdata::{DatasetSpec, Frame, GLOBAL_RANGE};

use super::forward::{
    assign_targets, backbone_forward, build_anchors, compute_detection_loss, compute_roi_loss,
    dense_head_forward, encode_voxels, prepare_batch, roi_head_forward_frozen, select_proposals,
    ParamTensors, Proposal,
};
use super::{DetError, Detector, DetectorConfig, DetectionResult};

/// Discrete / non-differentiable structure recorded during a loss evaluation:
/// per-frame proposals, mined hard negatives, and the values fed through the
/// OCRL stop-gradient. Replaying it keeps the loss a smooth function of the
/// parameters, which finite-difference checks require.
#[derive(Default, Clone)]
pub struct FrozenBatch {
    pub proposals: Vec<Vec<Proposal>>,
    pub hard_negatives: Vec<Vec<usize>>,
    pub sg_values: Vec<Option<Vec<f64>>>,
}

/// Scalar breakdown of one step plus the discrete structure that was used
/// (reusable to freeze the selections for gradient checks).
pub struct StepOutput {
    pub det: f64,
    pub dis: f64,
    pub total: f64,
    pub frozen: FrozenBatch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub lr: f64,
    pub det_loss: f64,
    pub dis_loss: f64,
    pub total: f64,
    pub dataset_id: u32,
}

/// One frame of a (possibly mixed-dataset) training batch: the frame, the
/// index of its dataset within the training consolidation (used as the
/// discriminator label), and its dataset's range mask, if any.
#[derive(Clone, Copy)]
pub struct BatchFrame<'a> {
    pub frame: &'a Frame,
    pub dataset_index: usize,
    pub mask: Option<&'a RangeMask>,
}

/// Builds the full loss of one batch on `graph`:
/// mean over frames of (dense loss + w_roi * RoI loss), plus
/// dis_loss_weight * discrimination loss when OCRL is enabled.
///
/// Batches may mix frames from different datasets; normalization statistics
/// are computed over the whole batch while instance-level means stay
/// per-frame, and discriminator labels are per-frame.
///
/// `frozen` replays a previous step's proposals instead of re-selecting them
/// from the current head values.
pub fn batch_loss(
    cfg: &DetectorConfig,
    graph: &Graph,
    pt: &ParamTensors,
    batch: &[BatchFrame<'_>],
    running: &mut RunningStats,
    training: bool,
    frozen: Option<&FrozenBatch>,
) -> Result<(Tensor, StepOutput), DetError> {
    let anchors = build_anchors(cfg);
    let (h, w) = cfg.bev_dims();
    let frames: Vec<&Frame> = batch.iter().map(|b| b.frame).collect();
    let prep = prepare_batch(&frames, cfg)?;
    let voxel_feats = encode_voxels(graph, pt, &prep, cfg, running, training)?;

    let mut det = graph.scalar(0.0);
    let mut residuals = Vec::new();
    let mut residual_labels = Vec::new();
    let mut used = FrozenBatch::default();
    for (f, frame) in frames.iter().enumerate() {
        let mask = batch[f].mask;
        let (start, end) = prep.frame_voxel_ranges[f];
        let rows: Vec<usize> = (start..end).collect();
        let feats_f = voxel_feats.gather_rows(&rows)?;
        let bev = feats_f.scatter_max_bev(&prep.frame_cells[f], h, w)?;
        let backbone = backbone_forward(pt, &bev, mask, cfg)?;
        let head = dense_head_forward(pt, &backbone)?;

        let assign = assign_targets(&frame.boxes, &anchors, cfg)?;
        let (l_det, negs) = compute_detection_loss(
            &head,
            &assign,
            &anchors,
            cfg,
            frozen.map(|fr| fr.hard_negatives[f].as_slice()),
        )?;
        det = det.add(&l_det)?;
        used.hard_negatives.push(negs);

        let props = match frozen {
            Some(fixed) => fixed.proposals[f].clone(),
            None => select_proposals(&head.value(), &anchors, cfg, training)?,
        };
        let frozen_sg = frozen.and_then(|fr| fr.sg_values[f].as_deref());
        if let Some(stage) = roi_head_forward_frozen(pt, &backbone, &props, cfg, frozen_sg)? {
            det = det.add(&compute_roi_loss(&stage, &props, &frame.boxes, cfg)?.mul_scalar(cfg.w_roi))?;
            if let Some(r) = stage.r {
                residual_labels.extend(std::iter::repeat_n(batch[f].dataset_index, r.shape()[0]));
                residuals.push(r);
            }
            used.sg_values.push(stage.sg_values);
        } else {
            used.sg_values.push(None);
        }
        used.proposals.push(props);
    }
    det = det.mul_scalar(1.0 / frames.len().max(1) as f64);

    let (total, dis_val) = if cfg.ocrl_enabled && !residuals.is_empty() {
        let r_all = concat_rows(&residuals)?;
        let dis = cfg.ocrl_head().discrimination_loss(&r_all, &residual_labels, &pt.ocrl_tensors())?;
        let dis_val = dis.item();
        (det.add(&dis.mul_scalar(cfg.dis_loss_weight))?, dis_val)
    } else {
        (det.clone(), 0.0)
    };

    let out = StepOutput { det: det.item(), dis: dis_val, total: total.item(), frozen: used };
    Ok((total, out))
}

impl Detector {
    /// Joint training over every dataset with mixed batches: every batch
    /// interleaves frames from all datasets, so batch statistics reflect the
    /// consolidation while instance-level statistics stay per-frame.
    /// Deterministic given (config, data). Non-finite loss aborts with the
    /// step index.
    pub fn train(
        &mut self,
        datasets: &[(DatasetSpec, Vec<Frame>)],
    ) -> Result<Vec<TrainLogRow>, DetError> {
        if datasets.is_empty() {
            return Err(DetError::Config("no training datasets".into()));
        }
        if datasets.len() != self.cfg.n_datasets {
            return Err(DetError::Config(format!(
                "model initialized for {} datasets, got {}",
                self.cfg.n_datasets,
                datasets.len()
            )));
        }
        if datasets.iter().any(|(_, f)| f.is_empty()) {
            return Err(DetError::Config("dataset with no frames".into()));
        }
        let total_steps = (self.cfg.epochs * self.cfg.steps_per_epoch) as u64;
        let adam = AdamConfig { weight_decay: self.cfg.weight_decay, ..AdamConfig::default() };
        let mut cursors = vec![0usize; datasets.len()];
        let mut log = Vec::with_capacity(total_steps as usize);
        for step in 1..=total_steps {
            // Each batch interleaves frames from every dataset, rotating which
            // dataset leads so uneven batch sizes stay balanced over steps.
            let lead = ((step - 1) as usize) % datasets.len();
            let mut batch: Vec<BatchFrame<'_>> = Vec::with_capacity(self.cfg.batch_size);
            for b in 0..self.cfg.batch_size {
                let d = (lead + b) % datasets.len();
                let (spec, frames) = &datasets[d];
                batch.push(BatchFrame {
                    frame: &frames[cursors[d] % frames.len()],
                    dataset_index: d,
                    mask: self.masks.get(&spec.id),
                });
                cursors[d] += 1;
            }
            let spec = &datasets[lead].0;

            let graph = Graph::new();
            let pt = ParamTensors::leaves(&graph, &self.params);
            let mut running = self.running_stats();
            let (total, out) =
                batch_loss(&self.cfg, &graph, &pt, &batch, &mut running, true, None)?;
            if !out.total.is_finite() {
                return Err(DetError::Diverged { step });
            }
            total.backward()?;
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (name, t) in pt.iter() {
                grads.insert(name.clone(), t.grad());
            }
            clip_grad_norm(&mut grads, self.cfg.grad_clip_norm);
            let lr = onecycle_lr(step, total_steps, self.cfg.lr)?;
            adam_step(&mut self.params, &grads, &mut self.opt, &adam, lr);
            self.store_running_stats(&running);
            log.push(TrainLogRow {
                step,
                lr,
                det_loss: out.det,
                dis_loss: out.dis,
                total: out.total,
                dataset_id: spec.id,
            });
        }
        Ok(log)
    }
}

/// Full inference on one frame. `spec_for_prompts` supplies the range-mask
/// prompt and may describe a dataset the model never trained on (zero-shot).
/// OCRL, when enabled, applies its residual from the features alone.
pub fn predict(
    det: &Detector,
    frame: &Frame,
    spec_for_prompts: &DatasetSpec,
    frame_index: usize,
) -> Result<DetectionResult, DetError> {
    predict_with_mask_choice(det, frame, Some(spec_for_prompts), frame_index)
}

/// Like [`predict`] but forcing an uninformative all-ones mask; used to
/// quantify what the range prompt contributes.
pub fn predict_all_ones_mask(
    det: &Detector,
    frame: &Frame,
    frame_index: usize,
) -> Result<DetectionResult, DetError> {
    predict_with_mask_choice(det, frame, None, frame_index)
}

fn predict_with_mask_choice(
    det: &Detector,
    frame: &Frame,
    spec_for_prompts: Option<&DatasetSpec>,
    frame_index: usize,
) -> Result<DetectionResult, DetError> {
    let cfg = &det.cfg;
    if frame.points.is_empty() {
        return Ok(DetectionResult::empty(frame.dataset_id, frame_index));
    }
    let (h, w) = cfg.bev_dims();
    let mask_storage;
    let mask: Option<&RangeMask> = if cfg.mask_enabled {
        match spec_for_prompts {
            Some(spec) => {
                if let Some(m) = det.masks.get(&spec.id) {
                    Some(m)
                } else {
                    let plane =
                        [GLOBAL_RANGE[0], GLOBAL_RANGE[1], GLOBAL_RANGE[3], GLOBAL_RANGE[4]];
                    mask_storage = compute_range_mask(spec, &plane, h, w)?;
                    Some(&mask_storage)
                }
            }
            None => {
                mask_storage = RangeMask::all_ones(h, w);
                Some(&mask_storage)
            }
        }
    } else {
        None
    };

    let graph = Graph::new();
    let pt = ParamTensors::leaves(&graph, &det.params);
    let mut running = det.running_stats();
    let anchors = build_anchors(cfg);
    let prep = prepare_batch(&[frame], cfg)?;
    let voxel_feats = encode_voxels(&graph, &pt, &prep, cfg, &mut running, false)?;
    let bev = voxel_feats.scatter_max_bev(&prep.frame_cells[0], h, w)?;
    let backbone = backbone_forward(&pt, &bev, mask, cfg)?;
    let head = dense_head_forward(&pt, &backbone)?;
    let props = select_proposals(&head.value(), &anchors, cfg, false)?;
    let Some(stage) = roi_head_forward_frozen(&pt, &backbone, &props, cfg, None)? else {
        return Ok(DetectionResult::empty(frame.dataset_id, frame_index));
    };

    let pred = stage.pred.value();
    let mut scored: Vec<(f64, crate::synthdata::Box3D, usize)> = Vec::with_capacity(props.len());
    for (i, p) in props.iter().enumerate() {
        let logit = pred[i * 7];
        let refine_prob = 1.0 / (1.0 + (-logit).exp());
        let mut deltas = [0.0; 6];
        deltas.copy_from_slice(&pred[i * 7 + 1..i * 7 + 7]);
        let mut b = box_decode(&deltas, &p.box3)?;
        b.center[0] = b.center[0].clamp(GLOBAL_RANGE[0], GLOBAL_RANGE[3]);
        b.center[1] = b.center[1].clamp(GLOBAL_RANGE[1], GLOBAL_RANGE[4]);
        b.center[2] = b.center[2].clamp(GLOBAL_RANGE[2], GLOBAL_RANGE[5]);
        scored.push((p.score * refine_prob, b, p.box3.class_id));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut result = DetectionResult::empty(frame.dataset_id, frame_index);
    for (score, b, cls) in scored {
        result.scores.push(score);
        result.boxes.push(b);
        result.class_ids.push(cls);
    }
    Ok(result)
}
