//! Graph-building forward passes and target assembly.
//!
//! Everything discrete (voxel grouping, anchor assignment, proposal
//! selection) is computed outside the graph; the losses are differentiable
//! functions of the parameters given that frozen structure, which is what
//! makes finite-difference verification of a whole training step possible.

use std::collections::BTreeMap;

use crate::diffnum::{concat_rows, Graph, ParamStore, Tensor};
use crate::geometry::{box_decode, box_encode, iou_bev, nms_bev, voxelize};
use crate::prompts::{
    apply_mask_concat, batchnorm_forward, msbn_forward, OcrlTensors, RangeMask, RunningStats,
};
use crate::synthdata::{Box3D, Frame, GLOBAL_RANGE};

use super::{DetError, DetectorConfig};

/// Graph leaves for every trainable parameter (running statistics excluded).
pub struct ParamTensors {
    map: BTreeMap<String, Tensor>,
}

impl ParamTensors {
    pub fn leaves(graph: &Graph, store: &ParamStore) -> Self {
        let mut map = BTreeMap::new();
        for name in store.params.keys() {
            if name.contains(".running_") {
                continue;
            }
            map.insert(name.clone(), store.leaf(graph, name));
        }
        Self { map }
    }

    /// Same tensors but with one parameter substituted — the hook used by
    /// gradient-checking harnesses.
    pub fn leaves_with_override(
        graph: &Graph,
        store: &ParamStore,
        name: &str,
        replacement: Tensor,
    ) -> Self {
        let mut pt = Self::leaves(graph, store);
        assert!(pt.map.contains_key(name), "unknown parameter `{name}`");
        pt.map.insert(name.to_string(), replacement);
        pt
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn ocrl_tensors(&self) -> OcrlTensors {
        OcrlTensors {
            f_w1: self.get("ocrl.f.w1").clone(),
            f_b1: self.get("ocrl.f.b1").clone(),
            f_w2: self.get("ocrl.f.w2").clone(),
            f_b2: self.get("ocrl.f.b2").clone(),
            d_w1: self.get("ocrl.d.w1").clone(),
            d_b1: self.get("ocrl.d.b1").clone(),
            d_w2: self.get("ocrl.d.w2").clone(),
            d_b2: self.get("ocrl.d.b2").clone(),
        }
    }
}

/// Per-point encoder input width: (z, intensity), the point's offset from
/// its voxel center in voxel units, and the voxel's occupancy fraction.
/// Absolute x/y are deliberately excluded: the conv stack is translation
/// invariant, so they enable nothing but memorizing frame layouts. The
/// offsets make sub-cell position visible (without them offset regression
/// cannot generalize across cells); the occupancy fraction makes local
/// density visible, which max pooling alone barely encodes.
pub const POINT_FEATURES: usize = 6;

/// Discrete, parameter-independent structure of one batch.
pub struct BatchPrep {
    pub n_frames: usize,
    /// Flat [n_points, POINT_FEATURES] voxel-capped point rows across the batch.
    pub flat_points: Vec<f64>,
    pub n_points: usize,
    /// Normalization group of each point row (empty frames are skipped).
    pub frame_of_point: Vec<usize>,
    pub n_norm_frames: usize,
    /// Point rows per voxel, voxels of all frames concatenated.
    pub voxel_groups: Vec<Vec<usize>>,
    /// Per frame: [start, end) range into the voxel list.
    pub frame_voxel_ranges: Vec<(usize, usize)>,
    /// Per frame: BEV cell of each of its voxels.
    pub frame_cells: Vec<Vec<(usize, usize)>>,
}

pub fn prepare_batch(frames: &[&Frame], cfg: &DetectorConfig) -> Result<BatchPrep, DetError> {
    let mut flat_points = Vec::new();
    let mut frame_of_point = Vec::new();
    let mut voxel_groups = Vec::new();
    let mut frame_voxel_ranges = Vec::new();
    let mut frame_cells = Vec::new();
    let mut norm_frame = 0usize;
    let mut n_points = 0usize;
    for frame in frames {
        let grid = voxelize(frame, &GLOBAL_RANGE, &cfg.voxel_size, cfg.max_points_per_voxel)?;
        let start = voxel_groups.len();
        let mut cells = Vec::with_capacity(grid.voxels.len());
        let mut frame_has_points = false;
        for v in &grid.voxels {
            let mut rows = Vec::with_capacity(v.points.len());
            let center = [
                GLOBAL_RANGE[0] + (v.index.0 as f64 + 0.5) * cfg.voxel_size[0],
                GLOBAL_RANGE[1] + (v.index.1 as f64 + 0.5) * cfg.voxel_size[1],
                GLOBAL_RANGE[2] + (v.index.2 as f64 + 0.5) * cfg.voxel_size[2],
            ];
            let occupancy = v.points.len() as f64 / cfg.max_points_per_voxel as f64;
            for &pi in &v.points {
                rows.push(n_points);
                let p = &frame.points[pi];
                flat_points.push(p[2]);
                flat_points.push(p[3]);
                for d in 0..3 {
                    flat_points.push((p[d] - center[d]) / cfg.voxel_size[d]);
                }
                flat_points.push(occupancy);
                frame_of_point.push(norm_frame);
                n_points += 1;
                frame_has_points = true;
            }
            voxel_groups.push(rows);
            cells.push((v.index.0, v.index.1));
        }
        frame_voxel_ranges.push((start, voxel_groups.len()));
        frame_cells.push(cells);
        if frame_has_points {
            norm_frame += 1;
        }
    }
    Ok(BatchPrep {
        n_frames: frames.len(),
        flat_points,
        n_points,
        frame_of_point,
        n_norm_frames: norm_frame,
        voxel_groups,
        frame_voxel_ranges,
        frame_cells,
    })
}

/// Per-point linear + (MSBN | BN) + relu, max-pooled per voxel.
/// Returns [total_voxels, C].
pub fn encode_voxels(
    graph: &Graph,
    pt: &ParamTensors,
    prep: &BatchPrep,
    cfg: &DetectorConfig,
    running: &mut RunningStats,
    training: bool,
) -> Result<Tensor, DetError> {
    let c = cfg.encoder_channels;
    if prep.n_points == 0 {
        return Ok(graph.constant(Vec::new(), &[0, c]));
    }
    let points = graph.constant(prep.flat_points.clone(), &[prep.n_points, POINT_FEATURES]);
    let feat = points.linear(pt.get("vfe.w"), pt.get("vfe.b"))?;
    let gamma = pt.get("vfe.bn.gamma");
    let beta = pt.get("vfe.bn.beta");
    let normed = if cfg.msbn_enabled {
        let layer = cfg.msbn_layer();
        msbn_forward(
            &feat,
            &prep.frame_of_point,
            prep.n_norm_frames,
            gamma,
            beta,
            &layer,
            running,
            training,
        )?
    } else {
        batchnorm_forward(&feat, gamma, beta, 1e-5, 0.1, running, training)?
    };
    Ok(normed.relu().group_max_pool(&prep.voxel_groups)?)
}

/// 3 conv blocks (3x3, pad 1, strides 1/2/1, relu); when a mask is supplied
/// it is concatenated (resampled) before every conv. In: [1, C, H, W].
pub fn backbone_forward(
    pt: &ParamTensors,
    bev: &Tensor,
    mask: Option<&RangeMask>,
    _cfg: &DetectorConfig,
) -> Result<Tensor, DetError> {
    let mut x = bev.clone();
    for (i, stride) in [(1, 1), (2, 2), (3, 1)] {
        if let Some(m) = mask {
            x = apply_mask_concat(&x, m)?;
        }
        x = x
            .conv2d(pt.get(&format!("backbone.conv{i}.k")), stride, 1)?
            .add_channel_bias(pt.get(&format!("backbone.conv{i}.b")))?
            .relu();
    }
    Ok(x)
}

/// 1x1 conv producing, per head cell: K objectness logits, 6K box deltas
/// (6 per class), K class logits. Out: [1, 8K, h2, w2].
pub fn dense_head_forward(pt: &ParamTensors, features: &Tensor) -> Result<Tensor, DetError> {
    Ok(features.conv2d(pt.get("head.k"), 1, 0)?.add_channel_bias(pt.get("head.b"))?)
}

/// One anchor per class per head cell, centered on the cell, axis-aligned.
/// Flat anchor index = cell * K + class with cell = i * w2 + j.
pub struct AnchorGrid {
    pub h2: usize,
    pub w2: usize,
    pub k: usize,
    pub boxes: Vec<Box3D>,
}

impl AnchorGrid {
    pub fn cells(&self) -> usize {
        self.h2 * self.w2
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

pub fn build_anchors(cfg: &DetectorConfig) -> AnchorGrid {
    let (h2, w2) = cfg.head_dims();
    let k = cfg.n_classes;
    let mut boxes = Vec::with_capacity(h2 * w2 * k);
    for i in 0..h2 {
        for j in 0..w2 {
            // head cell (i, j) is centered on input cell (2i, 2j)
            let cx = GLOBAL_RANGE[0] + (2 * i) as f64 * cfg.voxel_size[0] + 0.5 * cfg.voxel_size[0];
            let cy = GLOBAL_RANGE[1] + (2 * j) as f64 * cfg.voxel_size[1] + 0.5 * cfg.voxel_size[1];
            for (cls, size) in cfg.anchor_sizes.iter().enumerate() {
                boxes.push(Box3D {
                    center: [cx, cy, cfg.anchor_z],
                    size: *size,
                    class_id: cls,
                });
            }
        }
    }
    AnchorGrid { h2, w2, k, boxes }
}

#[derive(Debug, Clone)]
pub struct Positive {
    pub cell: usize,
    pub class_id: usize,
    /// box_encode targets against the anchor.
    pub deltas: [f64; 6],
}

/// Dense-head targets for one frame.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// Objectness targets, laid out channel-major: k * cells + cell.
    pub obj_targets: Vec<f64>,
    pub positives: Vec<Positive>,
}

/// IoU > match_iou against same-class anchors marks positives; every GT also
/// force-matches its best anchor so coarse grids still produce positives.
pub fn assign_targets(
    gt_boxes: &[Box3D],
    anchors: &AnchorGrid,
    cfg: &DetectorConfig,
) -> Result<Assignment, DetError> {
    let cells = anchors.cells();
    let k = anchors.k;
    let mut obj_targets = vec![0.0; k * cells];
    // (cell, class) -> (gt index, iou); best-iou GT wins a contested anchor
    let mut chosen: BTreeMap<(usize, usize), (usize, f64)> = BTreeMap::new();
    for (gi, gt) in gt_boxes.iter().enumerate() {
        if gt.class_id >= k {
            return Err(DetError::Config(format!(
                "gt class {} outside {} configured classes",
                gt.class_id, k
            )));
        }
        let mut best_cell = 0usize;
        let mut best_iou = -1.0f64;
        let mut best_d2 = f64::INFINITY;
        for cell in 0..cells {
            let anchor = &anchors.boxes[cell * k + gt.class_id];
            let iou = iou_bev(gt, anchor);
            // Force-match ties (typically all-zero IoU on coarse grids) break
            // toward the nearest anchor center, never a fixed corner cell.
            let d2 = (gt.center[0] - anchor.center[0]).powi(2)
                + (gt.center[1] - anchor.center[1]).powi(2);
            if iou > best_iou || (iou == best_iou && d2 < best_d2) {
                best_iou = iou;
                best_d2 = d2;
                best_cell = cell;
            }
            if iou > cfg.match_iou {
                claim(&mut chosen, (cell, gt.class_id), gi, iou);
            }
        }
        claim(&mut chosen, (best_cell, gt.class_id), gi, best_iou.max(0.0));
    }
    let mut positives = Vec::with_capacity(chosen.len());
    for (&(cell, class_id), &(gi, _)) in &chosen {
        obj_targets[class_id * cells + cell] = 1.0;
        let deltas = box_encode(&gt_boxes[gi], &anchors.boxes[cell * k + class_id])?;
        positives.push(Positive { cell, class_id, deltas });
    }
    Ok(Assignment { obj_targets, positives })
}

fn claim(map: &mut BTreeMap<(usize, usize), (usize, f64)>, key: (usize, usize), gi: usize, iou: f64) {
    match map.get(&key) {
        Some(&(_, prev)) if prev >= iou => {}
        _ => {
            map.insert(key, (gi, iou));
        }
    }
}

/// Picks the hardest (highest-logit) negative anchors for the objectness
/// term: the top max(32, 4 * positives) by current value, ties by index.
/// Without mining, a handful of high-scoring empty cells barely register in a
/// mean over hundreds of negatives yet dominate proposal selection.
pub fn mine_hard_negatives(
    head_values: &[f64],
    assign: &Assignment,
    anchors: &AnchorGrid,
) -> Vec<usize> {
    let n_obj = anchors.k * anchors.cells();
    let mut negs: Vec<usize> =
        (0..n_obj).filter(|&i| assign.obj_targets[i] <= 0.5).collect();
    negs.sort_by(|&a, &b| {
        head_values[b].partial_cmp(&head_values[a]).unwrap().then(a.cmp(&b))
    });
    let keep = (4 * assign.positives.len()).max(32).min(negs.len());
    negs.truncate(keep);
    negs.sort_unstable();
    negs
}

/// Balanced objectness BCE (mean over positives plus mean over mined hard
/// negatives, each weighted 1/2), smooth-L1 on positive deltas and CE on
/// positive class logits, the latter two normalized by max(1, positives).
/// `frozen_negs` replays a recorded mining decision (for FD harnesses);
/// otherwise negatives are mined from the current head values.
pub fn compute_detection_loss(
    head: &Tensor,
    assign: &Assignment,
    anchors: &AnchorGrid,
    cfg: &DetectorConfig,
    frozen_negs: Option<&[usize]>,
) -> Result<(Tensor, Vec<usize>), DetError> {
    let cells = anchors.cells();
    let k = anchors.k;
    let flat = head.reshape(&[8 * k * cells])?;
    let pos_idx: Vec<usize> =
        (0..k * cells).filter(|&i| assign.obj_targets[i] > 0.5).collect();
    let neg_idx = match frozen_negs {
        Some(n) => n.to_vec(),
        None => mine_hard_negatives(&head.value(), assign, anchors),
    };
    let l_neg = flat
        .gather_elems(&neg_idx)?
        .bce_with_logits_mean(&vec![0.0; neg_idx.len()])?;
    let mut loss = if pos_idx.is_empty() {
        l_neg
    } else {
        let l_pos = flat
            .gather_elems(&pos_idx)?
            .bce_with_logits_mean(&vec![1.0; pos_idx.len()])?;
        l_pos.add(&l_neg)?.mul_scalar(0.5)
    };
    let npos = assign.positives.len();
    if npos > 0 {
        let mut delta_idx = Vec::with_capacity(npos * 6);
        let mut delta_targets = Vec::with_capacity(npos * 6);
        let mut cls_idx = Vec::with_capacity(npos * k);
        let mut cls_labels = Vec::with_capacity(npos);
        for p in &assign.positives {
            for c in 0..6 {
                delta_idx.push((k + p.class_id * 6 + c) * cells + p.cell);
                delta_targets.push(p.deltas[c]);
            }
            for j in 0..k {
                cls_idx.push((7 * k + j) * cells + p.cell);
            }
            cls_labels.push(p.class_id);
        }
        let norm = 1.0 / npos as f64;
        let l_delta = flat
            .gather_elems(&delta_idx)?
            .smooth_l1_sum(&delta_targets)?
            .mul_scalar(cfg.w_delta * norm);
        let l_cls = flat
            .gather_elems(&cls_idx)?
            .reshape(&[npos, k])?
            .softmax_cross_entropy(&cls_labels)?
            .mul_scalar(cfg.w_cls);
        loss = loss.add(&l_delta)?.add(&l_cls)?;
    }
    Ok((loss, neg_idx))
}

/// A decoded first-stage candidate.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub box3: Box3D,
    pub score: f64,
    /// cell * K + class into the anchor grid.
    pub anchor_idx: usize,
}

/// Decodes candidates from dense-head values. Training keeps the top
/// max_proposals by score with no threshold or NMS (deterministic and
/// differentiation-friendly); inference applies the score threshold and BEV
/// NMS first.
pub fn select_proposals(
    head_values: &[f64],
    anchors: &AnchorGrid,
    cfg: &DetectorConfig,
    training: bool,
) -> Result<Vec<Proposal>, DetError> {
    let cells = anchors.cells();
    let k = anchors.k;
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(anchors.len());
    for cell in 0..cells {
        for cls in 0..k {
            let logit = head_values[cls * cells + cell];
            let score = 1.0 / (1.0 + (-logit).exp());
            cand.push((score, cell * k + cls));
        }
    }
    cand.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let decode = |&(score, aidx): &(f64, usize)| -> Result<Proposal, DetError> {
        let cell = aidx / k;
        let cls = aidx % k;
        let mut deltas = [0.0; 6];
        for (c, d) in deltas.iter_mut().enumerate() {
            *d = head_values[(k + cls * 6 + c) * cells + cell];
        }
        let box3 = box_decode(&deltas, &anchors.boxes[aidx])?;
        Ok(Proposal { box3, score, anchor_idx: aidx })
    };
    if training {
        cand.truncate(cfg.max_proposals);
        return cand.iter().map(decode).collect();
    }
    let mut decoded = Vec::new();
    for c in &cand {
        if c.0 < cfg.score_threshold {
            break;
        }
        decoded.push(decode(c)?);
    }
    let boxes: Vec<Box3D> = decoded.iter().map(|p| p.box3.clone()).collect();
    let scores: Vec<f64> = decoded.iter().map(|p| p.score).collect();
    let kept = nms_bev(&boxes, &scores, cfg.nms_iou);
    Ok(kept.into_iter().take(cfg.max_proposals).map(|i| decoded[i].clone()).collect())
}

/// RoI stage outputs for one frame: refinement predictions [R, 7]
/// (score logit + 6 deltas per row), the pooled features x, and the OCRL
/// residuals r when enabled.
pub struct RoiStage {
    pub pred: Tensor,
    pub x: Tensor,
    pub r: Option<Tensor>,
    /// Values fed to the residual MLP through the stop-gradient (the detached
    /// pooled features), recorded so FD harnesses can replay them.
    pub sg_values: Option<Vec<f64>>,
}

/// Bilinear 4x4 crop-pool of each proposal's BEV footprint on the stride-2
/// feature map, a linear+relu reduction, optional OCRL, and the refinement
/// linear layer. Returns None for zero proposals.
pub fn roi_head_forward(
    pt: &ParamTensors,
    features: &Tensor,
    proposals: &[Proposal],
    cfg: &DetectorConfig,
) -> Result<Option<RoiStage>, DetError> {
    roi_head_forward_frozen(pt, features, proposals, cfg, None)
}

/// [`roi_head_forward`] with the OCRL stop-gradient input optionally pinned
/// to recorded values.
pub fn roi_head_forward_frozen(
    pt: &ParamTensors,
    features: &Tensor,
    proposals: &[Proposal],
    cfg: &DetectorConfig,
    frozen_sg: Option<&[f64]>,
) -> Result<Option<RoiStage>, DetError> {
    if proposals.is_empty() {
        return Ok(None);
    }
    let c2 = cfg.backbone_channels;
    let n = cfg.roi_size;
    let cell_x = cfg.voxel_size[0] * 2.0;
    let cell_y = cfg.voxel_size[1] * 2.0;
    let mut rows = Vec::with_capacity(proposals.len());
    for p in proposals {
        let gx = (p.box3.center[0] - GLOBAL_RANGE[0]) / cell_x;
        let gy = (p.box3.center[1] - GLOBAL_RANGE[1]) / cell_y;
        let hx = (p.box3.size[0] / cell_x / 2.0).max(0.25);
        let hy = (p.box3.size[1] / cell_y / 2.0).max(0.25);
        let crop = features.bilinear_roi((gx, gy), (hx, hy), n)?;
        rows.push(crop.reshape(&[1, n * n * c2])?);
    }
    let pooled = concat_rows(&rows)?;
    let x = pooled.linear(pt.get("roi.w1"), pt.get("roi.b1"))?.relu();
    let (x_used, r, sg_values) = if cfg.ocrl_enabled {
        let head = cfg.ocrl_head();
        let sg_values = match frozen_sg {
            Some(v) => v.to_vec(),
            None => x.value(),
        };
        let (x_hat, r) = head.apply_frozen(&x, &pt.ocrl_tensors(), Some(&sg_values))?;
        (x_hat, Some(r), Some(sg_values))
    } else {
        (x.clone(), None, None)
    };
    let pred = x_used.linear(pt.get("roi.w2"), pt.get("roi.b2"))?;
    Ok(Some(RoiStage { pred, x, r, sg_values }))
}

/// BCE on refinement scores (target 1 iff best same-class GT IoU_BEV ≥
/// roi_pos_iou) plus smooth-L1 on positive refinement deltas.
pub fn compute_roi_loss(
    stage: &RoiStage,
    proposals: &[Proposal],
    gt_boxes: &[Box3D],
    cfg: &DetectorConfig,
) -> Result<Tensor, DetError> {
    let npr = proposals.len();
    let flat = stage.pred.reshape(&[npr * 7])?;
    let mut score_targets = vec![0.0; npr];
    let mut pos: Vec<(usize, [f64; 6])> = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gt_boxes.iter().enumerate() {
            if gt.class_id != p.box3.class_id {
                continue;
            }
            let iou = iou_bev(gt, &p.box3);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, iou)) = best {
            if iou >= cfg.roi_pos_iou {
                score_targets[i] = 1.0;
                pos.push((i, box_encode(&gt_boxes[gi], &p.box3)?));
            }
        }
    }
    let score_idx: Vec<usize> = (0..npr).map(|i| i * 7).collect();
    let mut loss = flat.gather_elems(&score_idx)?.bce_with_logits_mean(&score_targets)?;
    if !pos.is_empty() {
        let mut idx = Vec::with_capacity(pos.len() * 6);
        let mut targets = Vec::with_capacity(pos.len() * 6);
        for (i, deltas) in &pos {
            for (c, d) in deltas.iter().enumerate() {
                idx.push(i * 7 + 1 + c);
                targets.push(*d);
            }
        }
        let l_delta = flat
            .gather_elems(&idx)?
            .smooth_l1_sum(&targets)?
            .mul_scalar(cfg.w_delta / pos.len() as f64);
        loss = loss.add(&l_delta)?;
    }
    Ok(loss)
}
