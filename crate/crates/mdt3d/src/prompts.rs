//! The three multi-stage prompting mechanisms, each independently toggleable:
//!
//! - mean-shifted batch normalization ([`MsbnLayer`]) at the voxelization
//!   stage: normalizes point features by a blend of the batch mean and each
//!   frame's instance mean, sharing one variance;
//! - BEV range masking ([`RangeMask`], [`compute_range_mask`]) at the backbone
//!   stage: a binary map of the dataset's sensing range, concatenated as an
//!   extra channel before every 2D convolution;
//! - object-conditional residual learning ([`OcrlHead`]) at the head stage:
//!   a residual generated from the RoI feature behind a stop-gradient, shaped
//!   by a dataset discriminator and added back onto the feature.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnum::{DiffError, Graph, ParamStore, Tensor};
use crate::synthdata::DatasetSpec;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("dataset range {dataset:?} exceeds the global x-y range {global:?}")]
    RangeOutsideGlobal { dataset: [f64; 4], global: [f64; 4] },
    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Mean-shifted batch normalization configuration. The learnable scale/shift
/// and the running statistics live in the caller's parameter store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MsbnLayer {
    pub channels: usize,
    /// Balancing ratio between the instance mean (alpha) and the batch mean
    /// (1 - alpha). 0 recovers conventional batch normalization.
    pub alpha: f64,
    pub epsilon: f64,
    /// Running-statistics update momentum.
    pub momentum: f64,
}

impl MsbnLayer {
    pub fn new(channels: usize, alpha: f64) -> Self {
        assert!((0.0..=1.0).contains(&alpha), "alpha must be in [0, 1]");
        Self { channels, alpha, epsilon: 1e-5, momentum: 0.1 }
    }
}

/// Running mean/variance of the basic (batch-wide) statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

/// Mean-shifted batch normalization over a batch of point features [n, c].
///
/// `frame_of_point[r]` maps row r to its frame in [0, n_frames). Training mode
/// takes the basic mean/variance from the batch and updates `running`;
/// inference mode takes them from `running`. The instance mean is always
/// computed from the incoming rows, which is what lets unseen datasets
/// contribute their own statistics.
#[allow(clippy::too_many_arguments)]
pub fn msbn_forward(
    p: &Tensor,
    frame_of_point: &[usize],
    n_frames: usize,
    gamma: &Tensor,
    beta: &Tensor,
    layer: &MsbnLayer,
    running: &mut RunningStats,
    training: bool,
) -> Result<Tensor, PromptError> {
    let shape = p.shape().to_vec();
    if shape.len() != 2 || shape[1] != layer.channels {
        return Err(PromptError::ChannelMismatch {
            expected: layer.channels,
            got: shape.get(1).copied().unwrap_or(0),
        });
    }
    let n = shape[0];
    let c = shape[1];
    let graph_zeros = vec![0usize; n];

    // Instance means, one row per frame; errors on an empty frame group.
    let mu_inst = p.mean_groups(frame_of_point, n_frames).map_err(DiffError::from)?;
    let mu_inst_rows = mu_inst.gather_rows(frame_of_point).map_err(DiffError::from)?;

    let (mu_rows, var_rows) = if training {
        let mu = p.mean_groups(&graph_zeros, 1).map_err(DiffError::from)?;
        let mu_b = mu.gather_rows(&graph_zeros).map_err(DiffError::from)?;
        let centered = p.sub(&mu_b).map_err(DiffError::from)?;
        // biased (population) variance, shared across frames
        let var = centered
            .mul(&centered)
            .map_err(DiffError::from)?
            .mean_groups(&graph_zeros, 1)
            .map_err(DiffError::from)?;
        let var_b = var.gather_rows(&graph_zeros).map_err(DiffError::from)?;

        let mu_vals = mu.value();
        let var_vals = var.value();
        for j in 0..c {
            running.mean[j] = (1.0 - layer.momentum) * running.mean[j] + layer.momentum * mu_vals[j];
            running.var[j] = (1.0 - layer.momentum) * running.var[j] + layer.momentum * var_vals[j];
        }
        (mu_b, var_b)
    } else {
        let graph = graph_of(p);
        let mu = graph.constant(running.mean.clone(), &[1, c]);
        let var = graph.constant(running.var.clone(), &[1, c]);
        (
            mu.gather_rows(&graph_zeros).map_err(DiffError::from)?,
            var.gather_rows(&graph_zeros).map_err(DiffError::from)?,
        )
    };

    let shifted = p
        .sub(&mu_inst_rows.mul_scalar(layer.alpha))
        .map_err(DiffError::from)?
        .sub(&mu_rows.mul_scalar(1.0 - layer.alpha))
        .map_err(DiffError::from)?;
    let denom = var_rows.add_scalar(layer.epsilon).sqrt();
    let normalized = shifted.div(&denom).map_err(DiffError::from)?;
    Ok(normalized
        .mul_row_broadcast(gamma)
        .map_err(DiffError::from)?
        .add_row_broadcast(beta)
        .map_err(DiffError::from)?)
}

/// Plain batch normalization over [n, c]: the baseline code path used when the
/// voxelization prompt is disabled.
pub fn batchnorm_forward(
    p: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    epsilon: f64,
    momentum: f64,
    running: &mut RunningStats,
    training: bool,
) -> Result<Tensor, PromptError> {
    let shape = p.shape().to_vec();
    if shape.len() != 2 {
        return Err(PromptError::ChannelMismatch { expected: 2, got: shape.len() });
    }
    let (n, c) = (shape[0], shape[1]);
    let zeros = vec![0usize; n];
    let (mu_rows, var_rows) = if training {
        let mu = p.mean_groups(&zeros, 1).map_err(DiffError::from)?;
        let mu_b = mu.gather_rows(&zeros).map_err(DiffError::from)?;
        let centered = p.sub(&mu_b).map_err(DiffError::from)?;
        let var = centered
            .mul(&centered)
            .map_err(DiffError::from)?
            .mean_groups(&zeros, 1)
            .map_err(DiffError::from)?;
        let var_b = var.gather_rows(&zeros).map_err(DiffError::from)?;
        let mu_vals = mu.value();
        let var_vals = var.value();
        for j in 0..c {
            running.mean[j] = (1.0 - momentum) * running.mean[j] + momentum * mu_vals[j];
            running.var[j] = (1.0 - momentum) * running.var[j] + momentum * var_vals[j];
        }
        (mu_b, var_b)
    } else {
        let graph = graph_of(p);
        let mu = graph.constant(running.mean.clone(), &[1, c]);
        let var = graph.constant(running.var.clone(), &[1, c]);
        (
            mu.gather_rows(&zeros).map_err(DiffError::from)?,
            var.gather_rows(&zeros).map_err(DiffError::from)?,
        )
    };
    let centered = p.sub(&mu_rows).map_err(DiffError::from)?;
    let denom = var_rows.add_scalar(epsilon).sqrt();
    let normalized = centered.div(&denom).map_err(DiffError::from)?;
    Ok(normalized
        .mul_row_broadcast(gamma)
        .map_err(DiffError::from)?
        .add_row_broadcast(beta)
        .map_err(DiffError::from)?)
}

fn graph_of(t: &Tensor) -> Graph {
    // Tensors carry their graph handle; reuse it for constants.
    t.graph()
}

/// Per-dataset binary BEV mask: ones on the inclusive rectangle covering the
/// dataset's point range mapped onto the global plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeMask {
    pub h: usize,
    pub w: usize,
    /// Row-major [h][w] bits.
    pub bits: Vec<u8>,
    pub dataset_id: u32,
    /// Mapped corners (x1', y1', x2', y2') after clamping.
    pub corners: (usize, usize, usize, usize),
}

impl RangeMask {
    pub fn all_ones(h: usize, w: usize) -> Self {
        Self { h, w, bits: vec![1; h * w], dataset_id: u32::MAX, corners: (0, 0, h - 1, w - 1) }
    }

    pub fn ones_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Nearest-neighbor resample to (h2, w2): cell (m, n) samples source cell
    /// (floor(m*h/h2), floor(n*w/w2)).
    pub fn resample(&self, h2: usize, w2: usize) -> Vec<f64> {
        let mut out = vec![0.0; h2 * w2];
        for m in 0..h2 {
            let sm = (m * self.h) / h2;
            for n in 0..w2 {
                let sn = (n * self.w) / w2;
                out[m * w2 + n] = self.bits[sm * self.w + sn] as f64;
            }
        }
        out
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    /// Plain-text PGM bitmap for inspection.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<(), PromptError> {
        writeln!(w, "P2\n{} {}\n1", self.w, self.h)?;
        for row in self.bits.chunks(self.w) {
            let line: Vec<String> = row.iter().map(|b| b.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// Snap values that are within 1e-9 of an integer before rounding, so exact
/// hand-arithmetic corner cases are not lost to float noise.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Maps the dataset's x-y point range onto an H x W BEV plane over
/// `global_range` (x1, y1, x2, y2): floor on the lower corners, ceil on the
/// upper corners, then an inclusive rectangle fill, corners clamped to the
/// plane.
pub fn compute_range_mask(
    spec: &DatasetSpec,
    global_range: &[f64; 4],
    h: usize,
    w: usize,
) -> Result<RangeMask, PromptError> {
    let ds = [
        spec.point_range[0],
        spec.point_range[1],
        spec.point_range[3],
        spec.point_range[4],
    ];
    let eps = 1e-9;
    if ds[0] < global_range[0] - eps
        || ds[1] < global_range[1] - eps
        || ds[2] > global_range[2] + eps
        || ds[3] > global_range[3] + eps
    {
        return Err(PromptError::RangeOutsideGlobal { dataset: ds, global: *global_range });
    }
    let sx = (global_range[2] - global_range[0]).max(f64::MIN_POSITIVE);
    let sy = (global_range[3] - global_range[1]).max(f64::MIN_POSITIVE);
    let x1 = snap((ds[0] - global_range[0]) / sx * h as f64).floor();
    let y1 = snap((ds[1] - global_range[1]) / sy * w as f64).floor();
    let x2 = snap((ds[2] - global_range[0]) / sx * h as f64).ceil();
    let y2 = snap((ds[3] - global_range[1]) / sy * w as f64).ceil();
    let x1 = (x1.max(0.0) as usize).min(h - 1);
    let y1 = (y1.max(0.0) as usize).min(w - 1);
    let x2 = (x2.max(0.0) as usize).min(h - 1);
    let y2 = (y2.max(0.0) as usize).min(w - 1);
    let mut bits = vec![0u8; h * w];
    for m in x1..=x2 {
        for n in y1..=y2 {
            bits[m * w + n] = 1;
        }
    }
    Ok(RangeMask { h, w, bits, dataset_id: spec.id, corners: (x1, y1, x2, y2) })
}

/// Concatenates the mask (resampled to the feature resolution by nearest
/// neighbor) as one extra 0/1 channel. No gradient flows into the mask.
pub fn apply_mask_concat(x: &Tensor, mask: &RangeMask) -> Result<Tensor, PromptError> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(PromptError::Diff(DiffError::Invalid {
            op: "apply_mask_concat",
            msg: format!("expected [n,c,h,w], got {s:?}"),
        }));
    }
    let (h2, w2) = (s[2], s[3]);
    let channel =
        if (h2, w2) == (mask.h, mask.w) { mask.as_f64() } else { mask.resample(h2, w2) };
    Ok(x.concat_channel_const(&channel).map_err(DiffError::from)?)
}

/// Object-conditional residual learning head: a residual MLP `f` applied to
/// the stop-gradient of RoI features, and a discriminator MLP over residuals
/// producing per-dataset logits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OcrlHead {
    pub feature_dim: usize,
    pub n_datasets: usize,
    pub dis_loss_weight: f64,
}

/// Graph leaves for the head's parameters, created per step by the caller.
pub struct OcrlTensors {
    pub f_w1: Tensor,
    pub f_b1: Tensor,
    pub f_w2: Tensor,
    pub f_b2: Tensor,
    pub d_w1: Tensor,
    pub d_b1: Tensor,
    pub d_w2: Tensor,
    pub d_b2: Tensor,
}

impl OcrlHead {
    pub fn new(feature_dim: usize, n_datasets: usize) -> Self {
        Self { feature_dim, n_datasets, dis_loss_weight: 1.0 }
    }

    fn dis_hidden(&self) -> usize {
        (self.feature_dim / 2).max(1)
    }

    /// Parameter names and shapes relative to a prefix, in creation order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let f = self.feature_dim;
        let dh = self.dis_hidden();
        vec![
            ("f.w1", vec![f, f]),
            ("f.b1", vec![f]),
            ("f.w2", vec![f, f]),
            ("f.b2", vec![f]),
            ("d.w1", vec![f, dh]),
            ("d.b1", vec![dh]),
            ("d.w2", vec![dh, self.n_datasets]),
            ("d.b2", vec![self.n_datasets]),
        ]
    }

    pub fn tensors(&self, graph: &Graph, store: &ParamStore, prefix: &str) -> OcrlTensors {
        let leaf = |name: &str| store.leaf(graph, &format!("{prefix}.{name}"));
        OcrlTensors {
            f_w1: leaf("f.w1"),
            f_b1: leaf("f.b1"),
            f_w2: leaf("f.w2"),
            f_b2: leaf("f.b2"),
            d_w1: leaf("d.w1"),
            d_b1: leaf("d.b1"),
            d_w2: leaf("d.w2"),
            d_b2: leaf("d.b2"),
        }
    }

    /// r = f(SG(x)); x_hat = x + r. The gradient of any downstream loss
    /// reaches x only through the additive identity path.
    pub fn apply(&self, x: &Tensor, p: &OcrlTensors) -> Result<(Tensor, Tensor), PromptError> {
        self.apply_frozen(x, p, None)
    }

    /// Like [`OcrlHead::apply`] but with the stop-gradient input optionally
    /// replaced by recorded values. Finite-difference harnesses use this to
    /// keep the residual path constant, matching the analytic gradient which
    /// by construction does not flow through the stop-gradient.
    pub fn apply_frozen(
        &self,
        x: &Tensor,
        p: &OcrlTensors,
        sg_override: Option<&[f64]>,
    ) -> Result<(Tensor, Tensor), PromptError> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.feature_dim {
            return Err(PromptError::ChannelMismatch {
                expected: self.feature_dim,
                got: s.get(1).copied().unwrap_or(0),
            });
        }
        let sg = match sg_override {
            Some(vals) => graph_of(x).constant(vals.to_vec(), &[s[0], s[1]]),
            None => x.stop_gradient(),
        };
        let hidden = sg.linear(&p.f_w1, &p.f_b1).map_err(DiffError::from)?.relu();
        let r = hidden.linear(&p.f_w2, &p.f_b2).map_err(DiffError::from)?;
        let x_hat = x.add(&r).map_err(DiffError::from)?;
        Ok((x_hat, r))
    }

    /// Cross-entropy of the discriminator's dataset prediction from residuals.
    pub fn discrimination_loss(
        &self,
        r: &Tensor,
        dataset_ids: &[usize],
        p: &OcrlTensors,
    ) -> Result<Tensor, PromptError> {
        let hidden = r.linear(&p.d_w1, &p.d_b1).map_err(DiffError::from)?.relu();
        let logits = hidden.linear(&p.d_w2, &p.d_b2).map_err(DiffError::from)?;
        Ok(logits.softmax_cross_entropy(dataset_ids).map_err(DiffError::from)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{k_like, w_like};
    use rand::{Rng, SeedableRng};

    #[test]
    fn msbn_eq3_hand_fixture() {
        // frame1 {1, 3}, frame2 {5, 7}; mu = 4, sigma = 5, alpha = 0.5, eps -> 0
        let g = Graph::new();
        let p = g.leaf(vec![1.0, 3.0, 5.0, 7.0], &[4, 1]);
        let gamma = g.constant(vec![1.0], &[1]);
        let beta = g.constant(vec![0.0], &[1]);
        let mut layer = MsbnLayer::new(1, 0.5);
        layer.epsilon = 0.0;
        let mut running = RunningStats::new(1);
        let out = msbn_forward(&p, &[0, 0, 1, 1], 2, &gamma, &beta, &layer, &mut running, true)
            .unwrap();
        let v = out.value();
        let s5 = 5.0_f64.sqrt();
        let expect = [-2.0 / s5, 0.0, 0.0, 2.0 / s5];
        for (got, want) in v.iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{v:?}");
        }
        // running stats picked up mu=4, var=5 at momentum 0.1
        assert!((running.mean[0] - 0.4).abs() < 1e-12);
        assert!((running.var[0] - (0.9 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn msbn_alpha_zero_equals_plain_batchnorm() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let n = rng.gen_range(6..20);
            let c = rng.gen_range(1..5);
            let vals: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let frames: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let gvals: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
            let bvals: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();

            let g1 = Graph::new();
            let p1 = g1.leaf(vals.clone(), &[n, c]);
            let gamma1 = g1.constant(gvals.clone(), &[c]);
            let beta1 = g1.constant(bvals.clone(), &[c]);
            let layer = MsbnLayer::new(c, 0.0);
            let mut run1 = RunningStats::new(c);
            let msbn =
                msbn_forward(&p1, &frames, 2, &gamma1, &beta1, &layer, &mut run1, true).unwrap();

            let g2 = Graph::new();
            let p2 = g2.leaf(vals.clone(), &[n, c]);
            let gamma2 = g2.constant(gvals.clone(), &[c]);
            let beta2 = g2.constant(bvals.clone(), &[c]);
            let mut run2 = RunningStats::new(c);
            let bn =
                batchnorm_forward(&p2, &gamma2, &beta2, layer.epsilon, 0.1, &mut run2, true)
                    .unwrap();

            for (a, b) in msbn.value().iter().zip(bn.value()) {
                assert!((a - b).abs() < 1e-6);
            }
            assert_eq!(run1, run2);
        }
    }

    #[test]
    fn msbn_alpha_one_centers_each_frame() {
        let g = Graph::new();
        let p = g.leaf(vec![1.0, 3.0, 10.0, 20.0, 30.0], &[5, 1]);
        let gamma = g.constant(vec![1.0], &[1]);
        let beta = g.constant(vec![0.0], &[1]);
        let layer = MsbnLayer::new(1, 1.0);
        let mut running = RunningStats::new(1);
        let out =
            msbn_forward(&p, &[0, 0, 1, 1, 1], 2, &gamma, &beta, &layer, &mut running, true)
                .unwrap();
        let v = out.value();
        assert!((v[0] + v[1]).abs() < 1e-9, "frame 1 mean not zero: {v:?}");
        assert!((v[2] + v[3] + v[4]).abs() < 1e-9, "frame 2 mean not zero: {v:?}");
    }

    #[test]
    fn msbn_permutation_equivariance() {
        let vals = vec![0.5, -1.0, 2.0, 0.1, -0.4, 1.3];
        let frames = [0usize, 0, 1, 1, 1, 0];
        let layer = MsbnLayer::new(1, 0.3);

        let run = |order: &[usize]| {
            let g = Graph::new();
            let v: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
            let f: Vec<usize> = order.iter().map(|&i| frames[i]).collect();
            let p = g.leaf(v, &[6, 1]);
            let gamma = g.constant(vec![1.0], &[1]);
            let beta = g.constant(vec![0.0], &[1]);
            let mut running = RunningStats::new(1);
            msbn_forward(&p, &f, 2, &gamma, &beta, &layer, &mut running, true).unwrap().value()
        };
        let base = run(&[0, 1, 2, 3, 4, 5]);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted = run(&perm);
        for (k, &src) in perm.iter().enumerate() {
            assert!((permuted[k] - base[src]).abs() < 1e-12);
        }
    }

    #[test]
    fn msbn_rejects_empty_frame_and_channel_mismatch() {
        let g = Graph::new();
        let p = g.leaf(vec![1.0, 2.0], &[2, 1]);
        let gamma = g.constant(vec![1.0], &[1]);
        let beta = g.constant(vec![0.0], &[1]);
        let layer = MsbnLayer::new(1, 0.5);
        let mut running = RunningStats::new(1);
        assert!(msbn_forward(&p, &[0, 0], 2, &gamma, &beta, &layer, &mut running, true).is_err());
        let layer2 = MsbnLayer::new(3, 0.5);
        assert!(matches!(
            msbn_forward(&p, &[0, 1], 2, &gamma, &beta, &layer2, &mut running, true),
            Err(PromptError::ChannelMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn range_mask_k_like_fixture() {
        let mask = compute_range_mask(&k_like(), &[-75.2, -75.2, 75.2, 75.2], 188, 188).unwrap();
        assert_eq!(mask.corners, (94, 44, 182, 144));
        assert_eq!(mask.ones_count(), 89 * 101);
    }

    #[test]
    fn range_mask_full_coverage_is_all_ones() {
        let mask = compute_range_mask(&w_like(), &[-75.2, -75.2, 75.2, 75.2], 188, 188).unwrap();
        assert_eq!(mask.ones_count(), 188 * 188);
    }

    #[test]
    fn range_mask_outside_global_errors() {
        let mut spec = w_like();
        spec.point_range[3] = 80.0;
        assert!(matches!(
            compute_range_mask(&spec, &[-75.2, -75.2, 75.2, 75.2], 188, 188),
            Err(PromptError::RangeOutsideGlobal { .. })
        ));
    }

    #[test]
    fn range_mask_matches_rasterization_oracle_inside_band() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let global = [-75.2, -75.2, 75.2, 75.2];
        let (h, w) = (188usize, 188usize);
        let cell = 150.4 / 188.0;
        for _ in 0..20 {
            let mut spec = w_like();
            let x1 = rng.gen_range(-70.0..0.0);
            let y1 = rng.gen_range(-70.0..0.0);
            let x2 = rng.gen_range(10.0..70.0);
            let y2 = rng.gen_range(10.0..70.0);
            spec.point_range = [x1, y1, -2.0, x2, y2, 4.0];
            let mask = compute_range_mask(&spec, &global, h, w).unwrap();
            for m in 0..h {
                for n in 0..w {
                    let cx = global[0] + (m as f64 + 0.5) * cell;
                    let cy = global[1] + (n as f64 + 0.5) * cell;
                    let center_inside = cx >= x1 && cx <= x2 && cy >= y1 && cy <= y2;
                    let bit = mask.bits[m * w + n] == 1;
                    if center_inside {
                        // ones region covers the continuous rectangle
                        assert!(bit, "cell ({m},{n}) center inside but bit clear");
                    } else if bit {
                        // ceil on the upper corner can set a cell whose center
                        // is up to 1.5 cells past the boundary
                        let band = 1.5 * cell;
                        let near = cx >= x1 - band && cx <= x2 + band && cy >= y1 - band
                            && cy <= y2 + band;
                        assert!(near, "cell ({m},{n}) set far outside the rectangle");
                    }
                }
            }
        }
    }

    #[test]
    fn range_mask_monotone_under_enlargement() {
        let global = [-75.2, -75.2, 75.2, 75.2];
        let mut small = w_like();
        small.point_range = [-10.0, -20.0, -2.0, 30.0, 15.0, 4.0];
        let mut big = small.clone();
        big.point_range = [-15.0, -25.0, -2.0, 40.0, 20.0, 4.0];
        let ms = compute_range_mask(&small, &global, 188, 188).unwrap();
        let mb = compute_range_mask(&big, &global, 188, 188).unwrap();
        for i in 0..ms.bits.len() {
            assert!(mb.bits[i] >= ms.bits[i]);
        }
    }

    #[test]
    fn mask_resample_preserves_rectangle_at_halved_indices() {
        let mask = compute_range_mask(&k_like(), &[-75.2, -75.2, 75.2, 75.2], 188, 188).unwrap();
        let half = mask.resample(94, 94);
        let mut min_m = usize::MAX;
        let mut max_m = 0;
        let mut min_n = usize::MAX;
        let mut max_n = 0;
        for m in 0..94 {
            for n in 0..94 {
                if half[m * 94 + n] == 1.0 {
                    min_m = min_m.min(m);
                    max_m = max_m.max(m);
                    min_n = min_n.min(n);
                    max_n = max_n.max(n);
                }
            }
        }
        assert_eq!((min_m, min_n, max_m, max_n), (47, 22, 91, 72));
    }

    #[test]
    fn mask_concat_examples() {
        let g = Graph::new();
        let x = g.leaf(vec![0.5; 2 * 4 * 4], &[1, 2, 4, 4]);
        let mask = RangeMask::all_ones(4, 4);
        let out = apply_mask_concat(&x, &mask).unwrap();
        assert_eq!(out.shape(), &[1, 3, 4, 4]);
        let v = out.value();
        assert!(v[2 * 16..].iter().all(|&b| b == 1.0));

        // degenerate zero-channel input: output is exactly the mask channel
        let x0 = g.leaf(vec![], &[1, 0, 4, 4]);
        let out0 = apply_mask_concat(&x0, &mask).unwrap();
        assert_eq!(out0.shape(), &[1, 1, 4, 4]);
        assert!(out0.value().iter().all(|&b| b == 1.0));
    }

    fn init_ocrl(store: &mut ParamStore, head: &OcrlHead, zero_f: bool) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for (name, shape) in head.param_shapes() {
            let n: usize = shape.iter().product();
            let values = if zero_f && name.starts_with("f.") {
                vec![0.0; n]
            } else if name.ends_with(".b1") {
                // positive hidden bias keeps the relu units alive
                vec![0.5; n]
            } else {
                (0..n).map(|_| rng.gen_range(-0.2..0.2)).collect()
            };
            store.insert(&format!("ocrl.{name}"), &shape, values);
        }
    }

    #[test]
    fn ocrl_zero_residual_is_identity() {
        let head = OcrlHead::new(4, 2);
        let mut store = ParamStore::new();
        init_ocrl(&mut store, &head, true);
        let g = Graph::new();
        let x = g.leaf(vec![0.1, 0.2, 0.3, 0.4, -0.1, -0.2, -0.3, -0.4], &[2, 4]);
        let p = head.tensors(&g, &store, "ocrl");
        let (x_hat, r) = head.apply(&x, &p).unwrap();
        assert_eq!(x_hat.value(), x.value());
        assert!(r.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ocrl_identity_path_gradient_is_all_ones() {
        let head = OcrlHead::new(4, 2);
        let mut store = ParamStore::new();
        init_ocrl(&mut store, &head, false);
        let g = Graph::new();
        let x = g.leaf(vec![0.5, -0.7, 0.2, 0.9, 0.1, 0.3, -0.4, 0.6], &[2, 4]);
        let p = head.tensors(&g, &store, "ocrl");
        let (x_hat, r) = head.apply(&x, &p).unwrap();
        x_hat.sum().backward().unwrap();
        assert_eq!(x.grad(), vec![1.0; 8]);
        // the residual parameters do receive gradient
        assert!(p.f_w1.grad().iter().any(|&v| v != 0.0));

        // discrimination loss reaches x with exactly zero gradient
        x.zero_grad();
        let ldis = head.discrimination_loss(&r, &[0, 1], &p).unwrap();
        ldis.backward().unwrap();
        assert_eq!(x.grad(), vec![0.0; 8]);
        assert!(p.d_w1.grad().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn ocrl_uniform_logits_give_ln2() {
        let head = OcrlHead::new(2, 2);
        let mut store = ParamStore::new();
        // zero discriminator -> uniform logits
        for (name, shape) in head.param_shapes() {
            let n: usize = shape.iter().product();
            store.insert(&format!("ocrl.{name}"), &shape, vec![0.0; n]);
        }
        let g = Graph::new();
        let p = head.tensors(&g, &store, "ocrl");
        let r = g.leaf(vec![0.3, -0.3, 0.6, 0.1], &[2, 2]);
        let loss = head.discrimination_loss(&r, &[0, 1], &p).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(head.discrimination_loss(&r, &[0, 2], &p).is_err());
    }
}
