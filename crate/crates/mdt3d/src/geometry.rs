//! Point-cloud geometry: voxelization, voxel-to-BEV scatter, axis-aligned IoU,
//! anchor encode/decode and greedy NMS.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnum::{DiffError, Tensor};
use crate::synthdata::{Box3D, Frame};

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("invalid range {0:?}: lower bounds must be below upper bounds")]
    InvalidRange([f64; 6]),
    #[error("voxel size must be positive, got {0:?}")]
    InvalidVoxelSize([f64; 3]),
    #[error("anchor sizes must be positive, got {0:?}")]
    InvalidAnchor([f64; 3]),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// One occupied voxel: integer index and the point rows assigned to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Voxel {
    pub index: (usize, usize, usize),
    pub points: Vec<usize>,
}

/// Regular 3D grid over a global range with per-voxel point assignments.
/// Occupied voxels are sorted by index, so the layout is deterministic.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub global_range: [f64; 6],
    pub voxel_size: [f64; 3],
    pub dims: (usize, usize, usize),
    pub voxels: Vec<Voxel>,
}

impl VoxelGrid {
    /// BEV cell (ix, iy) of every occupied voxel, in voxel order.
    pub fn bev_cells(&self) -> Vec<(usize, usize)> {
        self.voxels.iter().map(|v| (v.index.0, v.index.1)).collect()
    }

    pub fn occupied(&self) -> usize {
        self.voxels.len()
    }
}

/// Assigns in-range points to voxels: index = floor((p - origin) / voxel_size)
/// per axis (closed lower, open upper bounds). Points beyond
/// `max_points_per_voxel` are dropped in encounter order.
pub fn voxelize(
    frame: &Frame,
    range: &[f64; 6],
    voxel_size: &[f64; 3],
    max_points_per_voxel: usize,
) -> Result<VoxelGrid, GeomError> {
    if !(range[0] < range[3] && range[1] < range[4] && range[2] < range[5]) {
        return Err(GeomError::InvalidRange(*range));
    }
    if voxel_size.iter().any(|&v| v <= 0.0) {
        return Err(GeomError::InvalidVoxelSize(*voxel_size));
    }
    let dims = (
        ((range[3] - range[0]) / voxel_size[0]).ceil() as usize,
        ((range[4] - range[1]) / voxel_size[1]).ceil() as usize,
        ((range[5] - range[2]) / voxel_size[2]).ceil() as usize,
    );
    let mut map: BTreeMap<(usize, usize, usize), Vec<usize>> = BTreeMap::new();
    for (row, p) in frame.points.iter().enumerate() {
        if p[0] < range[0] || p[0] >= range[3] || p[1] < range[1] || p[1] >= range[4]
            || p[2] < range[2] || p[2] >= range[5]
        {
            continue;
        }
        let ix = ((p[0] - range[0]) / voxel_size[0]).floor() as usize;
        let iy = ((p[1] - range[1]) / voxel_size[1]).floor() as usize;
        let iz = ((p[2] - range[2]) / voxel_size[2]).floor() as usize;
        let ix = ix.min(dims.0 - 1);
        let iy = iy.min(dims.1 - 1);
        let iz = iz.min(dims.2 - 1);
        let entry = map.entry((ix, iy, iz)).or_default();
        if entry.len() < max_points_per_voxel {
            entry.push(row);
        }
    }
    let voxels = map.into_iter().map(|(index, points)| Voxel { index, points }).collect();
    Ok(VoxelGrid { global_range: *range, voxel_size: *voxel_size, dims, voxels })
}

/// Dense BEV snapshot, mainly for debugging dumps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BEVGrid {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    /// Row-major [c][h][w] values.
    pub values: Vec<f64>,
}

impl BEVGrid {
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0], 1);
        BEVGrid { h: s[2], w: s[3], channels: s[1], values: t.value() }
    }
}

/// Scatters voxel features [g, c] onto the grid's BEV plane, collapsing z by
/// elementwise max. Result shape [1, c, Dx, Dy].
pub fn bev_scatter(grid: &VoxelGrid, voxel_features: &Tensor) -> Result<Tensor, GeomError> {
    if voxel_features.shape().first().copied() != Some(grid.occupied()) {
        return Err(GeomError::Diff(DiffError::Invalid {
            op: "bev_scatter",
            msg: format!(
                "{} voxel features vs {} occupied voxels",
                voxel_features.shape().first().copied().unwrap_or(0),
                grid.occupied()
            ),
        }));
    }
    Ok(voxel_features.scatter_max_bev(&grid.bev_cells(), grid.dims.0, grid.dims.1)?)
}

fn overlap_1d(c1: f64, s1: f64, c2: f64, s2: f64) -> f64 {
    let lo = (c1 - s1 / 2.0).max(c2 - s2 / 2.0);
    let hi = (c1 + s1 / 2.0).min(c2 + s2 / 2.0);
    (hi - lo).max(0.0)
}

/// Axis-aligned rectangle IoU on the x-y plane.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let ix = overlap_1d(a.center[0], a.size[0], b.center[0], b.size[0]);
    let iy = overlap_1d(a.center[1], a.size[1], b.center[1], b.size[1]);
    let inter = ix * iy;
    let union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Axis-aligned volume IoU (BEV intersection times z overlap).
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let ix = overlap_1d(a.center[0], a.size[0], b.center[0], b.size[0]);
    let iy = overlap_1d(a.center[1], a.size[1], b.center[1], b.size[1]);
    let iz = overlap_1d(a.center[2], a.size[2], b.center[2], b.size[2]);
    let inter = ix * iy * iz;
    let va = a.size[0] * a.size[1] * a.size[2];
    let vb = b.size[0] * b.size[1] * b.size[2];
    let union = va + vb - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Standard anchor regression targets: offsets normalized by anchor size,
/// log-ratio sizes.
pub fn box_encode(gt: &Box3D, anchor: &Box3D) -> Result<[f64; 6], GeomError> {
    if anchor.size.iter().any(|&s| s <= 0.0) {
        return Err(GeomError::InvalidAnchor(anchor.size));
    }
    if gt.size.iter().any(|&s| s <= 0.0) {
        return Err(GeomError::InvalidAnchor(gt.size));
    }
    // x/y offsets are normalized by the anchor's BEV diagonal (not per-axis
    // extent) so thin anchors don't blow up the offset scale; z by height.
    let diag = (anchor.size[0] * anchor.size[0] + anchor.size[1] * anchor.size[1]).sqrt();
    Ok([
        (gt.center[0] - anchor.center[0]) / diag,
        (gt.center[1] - anchor.center[1]) / diag,
        (gt.center[2] - anchor.center[2]) / anchor.size[2],
        (gt.size[0] / anchor.size[0]).ln(),
        (gt.size[1] / anchor.size[1]).ln(),
        (gt.size[2] / anchor.size[2]).ln(),
    ])
}

pub fn box_decode(deltas: &[f64; 6], anchor: &Box3D) -> Result<Box3D, GeomError> {
    if anchor.size.iter().any(|&s| s <= 0.0) {
        return Err(GeomError::InvalidAnchor(anchor.size));
    }
    let diag = (anchor.size[0] * anchor.size[0] + anchor.size[1] * anchor.size[1]).sqrt();
    Ok(Box3D {
        center: [
            anchor.center[0] + deltas[0] * diag,
            anchor.center[1] + deltas[1] * diag,
            anchor.center[2] + deltas[2] * anchor.size[2],
        ],
        size: [
            anchor.size[0] * deltas[3].exp(),
            anchor.size[1] * deltas[4].exp(),
            anchor.size[2] * deltas[5].exp(),
        ],
        class_id: anchor.class_id,
    })
}

/// Greedy descending-score suppression at BEV IoU > `iou_thresh`.
/// Ties break toward the lower index. Returns kept indices in score order.
pub fn nms_bev(boxes: &[Box3D], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut suppressed = vec![false; boxes.len()];
    let mut kept = Vec::new();
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order {
            if j != i && !suppressed[j] && iou_bev(&boxes[i], &boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::Graph;
    use crate::synthdata::{generate_frame, w_like, CLASS_CAR};

    fn boxb(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64) -> Box3D {
        Box3D::new([cx, cy, cz], [l, w, h], CLASS_CAR)
    }

    #[test]
    fn voxel_index_hand_case() {
        let frame = Frame {
            dataset_id: 0,
            points: vec![[0.4, 0.4, 0.0, 0.5], [-75.2, -75.2, -2.0, 0.1]],
            boxes: vec![],
        };
        let grid = voxelize(
            &frame,
            &[-75.2, -75.2, -2.0, 75.2, 75.2, 4.0],
            &[0.8, 0.8, 6.0],
            16,
        )
        .unwrap();
        let indices: Vec<_> = grid.voxels.iter().map(|v| v.index).collect();
        // floor((0.4 + 75.2) / 0.8) = 94; the origin point lands in voxel (0,0,0)
        assert!(indices.contains(&(94, 94, 0)));
        assert!(indices.contains(&(0, 0, 0)));
    }

    #[test]
    fn voxelize_containment_oracle() {
        let frame = generate_frame(&w_like(), 42).unwrap();
        let range = [-75.2, -75.2, -2.0, 75.2, 75.2, 4.0];
        let vs = [0.8, 0.8, 1.5];
        let grid = voxelize(&frame, &range, &vs, 64).unwrap();
        let mut assigned = 0;
        for v in &grid.voxels {
            for &row in &v.points {
                assigned += 1;
                let p = frame.points[row];
                for d in 0..3 {
                    let idx = [v.index.0, v.index.1, v.index.2][d];
                    let lo = range[d] + idx as f64 * vs[d];
                    let hi = lo + vs[d];
                    assert!(p[d] >= lo - 1e-9 && p[d] < hi + 1e-9, "point {p:?} voxel {:?}", v.index);
                }
            }
        }
        // every in-range point is assigned exactly once (no cap hit at 64)
        let in_range = frame
            .points
            .iter()
            .filter(|p| {
                p[0] >= range[0] && p[0] < range[3] && p[1] >= range[1] && p[1] < range[4]
                    && p[2] >= range[2] && p[2] < range[5]
            })
            .count();
        assert_eq!(assigned, in_range);
    }

    #[test]
    fn max_points_per_voxel_cap() {
        let frame = Frame {
            dataset_id: 0,
            points: (0..10).map(|i| [0.1, 0.1, 0.1, i as f64 / 10.0]).collect(),
            boxes: vec![],
        };
        let grid = voxelize(&frame, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[1.0, 1.0, 1.0], 3).unwrap();
        assert_eq!(grid.voxels.len(), 1);
        assert_eq!(grid.voxels[0].points, vec![0, 1, 2]);
    }

    #[test]
    fn bev_scatter_single_voxel() {
        let frame = Frame { dataset_id: 0, points: vec![[0.5, 1.5, 0.5, 0.1]], boxes: vec![] };
        let grid = voxelize(&frame, &[0.0, 0.0, 0.0, 4.0, 4.0, 1.0], &[1.0, 1.0, 1.0], 4).unwrap();
        let g = Graph::new();
        let feats = g.leaf(vec![2.5, -1.0], &[1, 2]);
        let bev = bev_scatter(&grid, &feats).unwrap();
        let v = bev.value();
        let nonzero: Vec<usize> = v.iter().enumerate().filter(|(_, &x)| x != 0.0).map(|(i, _)| i).collect();
        // cell (0, 1) of a 4x4 plane, channels 0 and 1
        assert_eq!(nonzero, vec![1, 16 + 1]);
    }

    #[test]
    fn iou_fixtures() {
        let a = boxb(0.0, 0.0, 0.0, 2.0, 2.0, 2.0);
        assert!((iou_bev(&a, &a) - 1.0).abs() < 1e-12);
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);

        let disjoint = boxb(10.0, 10.0, 0.0, 2.0, 2.0, 2.0);
        assert_eq!(iou_bev(&a, &disjoint), 0.0);

        // 2x2 squares centered (0,0) and (1,0): intersection 2, union 6
        let b = boxb(1.0, 0.0, 0.0, 2.0, 2.0, 2.0);
        assert!((iou_bev(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        // same offset in 3D: 2x2x2 cubes offset by (1,0,0) -> 4/(16-4) = 1/3
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);

        // same BEV footprint, disjoint z
        let c = boxb(0.0, 0.0, 5.0, 2.0, 2.0, 2.0);
        assert_eq!(iou_3d(&a, &c), 0.0);
    }

    #[test]
    fn iou_bev_matches_rasterized_oracle() {
        let a = boxb(0.0, 0.0, 0.0, 2.0, 2.0, 2.0);
        let b = boxb(1.0, 0.0, 0.0, 2.0, 2.0, 2.0);
        // rasterize at 0.01 m over [-2, 3]^2
        let step = 0.01;
        let mut inter = 0usize;
        let mut union = 0usize;
        let inside = |bx: &Box3D, x: f64, y: f64| {
            (x - bx.center[0]).abs() <= bx.size[0] / 2.0 && (y - bx.center[1]).abs() <= bx.size[1] / 2.0
        };
        let n = (5.0 / step) as usize;
        for i in 0..n {
            for j in 0..n {
                let x = -2.0 + (i as f64 + 0.5) * step;
                let y = -2.0 + (j as f64 + 0.5) * step;
                let ia = inside(&a, x, y);
                let ib = inside(&b, x, y);
                if ia && ib {
                    inter += 1;
                }
                if ia || ib {
                    union += 1;
                }
            }
        }
        let raster = inter as f64 / union as f64;
        assert!((iou_bev(&a, &b) - raster).abs() < 1e-2);
    }

    #[test]
    fn encode_decode_fixtures() {
        let anchor = boxb(1.0, 2.0, 0.0, 4.0, 2.0, 1.5);
        let zero = box_encode(&anchor, &anchor).unwrap();
        assert!(zero.iter().all(|&d| d.abs() < 1e-12));

        let gt = boxb(1.0, 2.0, 0.0, 8.0, 2.0, 1.5);
        let d = box_encode(&gt, &anchor).unwrap();
        assert!((d[3] - std::f64::consts::LN_2).abs() < 1e-12);

        let bad = boxb(0.0, 0.0, 0.0, -1.0, 2.0, 1.5);
        assert!(box_encode(&gt, &bad).is_err());
    }

    #[test]
    fn encode_decode_round_trip_randomized() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let anchor = boxb(
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.5..6.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
            );
            let gt = boxb(
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.5..6.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
            );
            let d = box_encode(&gt, &anchor).unwrap();
            let back = box_decode(&d, &anchor).unwrap();
            for k in 0..3 {
                assert!((back.center[k] - gt.center[k]).abs() < 1e-6);
                assert!((back.size[k] - gt.size[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nms_examples_and_brute_force_oracle() {
        let one = vec![boxb(0.0, 0.0, 0.0, 2.0, 2.0, 2.0)];
        assert_eq!(nms_bev(&one, &[0.7], 0.5), vec![0]);

        let two = vec![boxb(0.0, 0.0, 0.0, 2.0, 2.0, 2.0), boxb(0.0, 0.0, 0.0, 2.0, 2.0, 2.0)];
        assert_eq!(nms_bev(&two, &[0.9, 0.8], 0.5), vec![0]);

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let boxes: Vec<Box3D> = (0..20)
            .map(|_| {
                boxb(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    0.0,
                    rng.gen_range(1.0..4.0),
                    rng.gen_range(1.0..4.0),
                    1.5,
                )
            })
            .collect();
        let scores: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();

        // reference: O(n^2) greedy replay
        let mut order: Vec<usize> = (0..20).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut kept_ref = Vec::new();
        for &i in &order {
            if kept_ref.iter().all(|&k: &usize| iou_bev(&boxes[k], &boxes[i]) <= 0.5) {
                kept_ref.push(i);
            }
        }
        assert_eq!(nms_bev(&boxes, &scores, 0.5), kept_ref);
    }
}
