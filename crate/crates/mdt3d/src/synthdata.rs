//! Synthetic multi-dataset point-cloud scenes.
//!
//! Each [`DatasetSpec`] describes one synthetic domain: its point range, point
//! density and per-class object-size statistics. Generated frames reproduce the
//! cross-dataset discrepancies that make naive merged training hard (front-view
//! vs. 360° ranges, sparse vs. dense clouds, shifted size statistics).
//!
//! All preset values are artifact choices for a desk-scale stand-in; they are
//! not measurements of any real dataset.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Global aligned point range shared by all datasets: x, y in [-75.2, 75.2],
/// z in [-2, 4] (order: x1, y1, z1, x2, y2, z2).
pub const GLOBAL_RANGE: [f64; 6] = [-75.2, -75.2, -2.0, 75.2, 75.2, 4.0];

/// Class ids used by the built-in presets.
pub const CLASS_CAR: usize = 0;
pub const CLASS_PEDESTRIAN: usize = 1;
pub const CLASS_CYCLIST: usize = 2;

/// Human-readable class names, indexed by class id.
pub const CLASS_NAMES: [&str; 3] = ["car", "pedestrian", "cyclist"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid dataset spec `{0}`: {1}")]
    InvalidSpec(String, String),
    #[error("range of spec `{spec}` cannot fit the largest box of class {class} (mean + 3 sigma)")]
    RangeTooSmall { spec: String, class: usize },
    #[error("no statistics for class {class} in spec `{spec}`")]
    MissingClassStats { spec: String, class: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown dataset spec `{0}`")]
    UnknownSpec(String),
    #[error("duplicate dataset id {0} in registry")]
    DuplicateId(u32),
}

/// Per-class object-size statistics in meters (length, width, height).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// A synthetic domain's identity: ranges, densities and size statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub id: u32,
    pub name: String,
    /// (x1, y1, z1, x2, y2, z2) in meters.
    pub point_range: [f64; 6],
    /// Mean number of surface points sampled per object.
    pub points_per_object: u32,
    /// Background points per square meter of the x-y footprint.
    pub background_density: f64,
    pub class_stats: BTreeMap<usize, ClassStats>,
    /// Inclusive (min, max) object count per frame.
    pub objects_per_frame: (u32, u32),
    /// Constant added to every point's intensity, modelling per-sensor
    /// calibration differences between domains. Object surfaces sample raw
    /// intensity in [0.3, 0.6) and background clutter in [0.0, 0.3), so the
    /// final values stay in [0, 1] for offsets up to 0.4.
    #[serde(default)]
    pub intensity_offset: f64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let r = &self.point_range;
        if !(r[0] < r[3] && r[1] < r[4] && r[2] < r[5]) {
            return Err(SynthError::InvalidSpec(
                self.name.clone(),
                "point_range must satisfy x1 < x2, y1 < y2, z1 < z2".into(),
            ));
        }
        if self.objects_per_frame.0 > self.objects_per_frame.1 {
            return Err(SynthError::InvalidSpec(
                self.name.clone(),
                "objects_per_frame min > max".into(),
            ));
        }
        for (class, st) in &self.class_stats {
            for d in 0..3 {
                if st.mean[d] <= 0.0 {
                    return Err(SynthError::InvalidSpec(
                        self.name.clone(),
                        format!("class {class} mean size must be > 0"),
                    ));
                }
                if st.std[d] < 0.0 {
                    return Err(SynthError::InvalidSpec(
                        self.name.clone(),
                        format!("class {class} std must be >= 0"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Keep only the car class; used by the small acceptance experiments.
    pub fn car_only(mut self, name: &str, id: u32) -> Self {
        self.class_stats.retain(|c, _| *c == CLASS_CAR);
        self.name = name.to_string();
        self.id = id;
        self
    }
}

/// Axis-aligned 3D bounding box (no yaw).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    /// Center (cx, cy, cz) in meters.
    #[serde(rename = "c")]
    pub center: [f64; 3],
    /// Size (l, w, h) in meters.
    #[serde(rename = "s")]
    pub size: [f64; 3],
    #[serde(rename = "cls")]
    pub class_id: usize,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], class_id: usize) -> Self {
        Self { center, size, class_id }
    }

    /// Closed extent test: the surface counts as inside.
    pub fn contains(&self, p: &[f64; 4]) -> bool {
        (0..3).all(|d| (p[d] - self.center[d]).abs() <= self.size[d] / 2.0 + 1e-12)
    }
}

/// One LiDAR-like scene: points (x, y, z, intensity) plus ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub dataset_id: u32,
    pub points: Vec<[f64; 4]>,
    pub boxes: Vec<Box3D>,
}

fn in_range(p: &[f64; 4], r: &[f64; 6]) -> bool {
    // Closed lower, open upper, matching the voxel index convention.
    p[0] >= r[0] && p[0] < r[3] && p[1] >= r[1] && p[1] < r[4] && p[2] >= r[2] && p[2] < r[5]
}

fn center_in_range(c: &[f64; 3], r: &[f64; 6]) -> bool {
    c[0] >= r[0] && c[0] < r[3] && c[1] >= r[1] && c[1] < r[4] && c[2] >= r[2] && c[2] < r[5]
}

/// Box-Muller standard normal draw.
fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates one reproducible frame: objects with surface-sampled points plus
/// uniform background clutter, everything inside `spec.point_range`.
pub fn generate_frame(spec: &DatasetSpec, rng_seed: u64) -> Result<Frame, SynthError> {
    spec.validate()?;
    let r = spec.point_range;
    // The range must fit the largest plausible (mean + 3 sigma) box.
    for (class, st) in &spec.class_stats {
        for d in 0..3 {
            let max_size = st.mean[d] + 3.0 * st.std[d];
            if max_size > r[d + 3] - r[d] {
                return Err(SynthError::RangeTooSmall { spec: spec.name.clone(), class: *class });
            }
        }
    }

    let mut rng =
        ChaCha8Rng::seed_from_u64(rng_seed ^ (spec.id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let classes: Vec<usize> = spec.class_stats.keys().copied().collect();
    let (omin, omax) = spec.objects_per_frame;
    let n_obj = if omax == 0 { 0 } else { rng.gen_range(omin..=omax) };

    let mut boxes = Vec::new();
    let mut points = Vec::new();
    for _ in 0..n_obj {
        let class = classes[rng.gen_range(0..classes.len())];
        let st = &spec.class_stats[&class];
        let mut size = [0.0; 3];
        for d in 0..3 {
            let s = st.mean[d] + st.std[d] * randn(&mut rng);
            size[d] = s.clamp(0.2 * st.mean[d], st.mean[d] + 3.0 * st.std[d]);
        }
        let mut center = [0.0; 3];
        for d in 0..3 {
            let lo = r[d] + size[d] / 2.0;
            let hi = r[d + 3] - size[d] / 2.0;
            center[d] = if hi > lo { rng.gen_range(lo..hi) } else { (lo + hi) / 2.0 };
        }
        let b = Box3D::new(center, size, class);

        let mean_pts = spec.points_per_object.max(8);
        let lo = mean_pts / 2;
        let hi = mean_pts + mean_pts / 2;
        let n_pts = rng.gen_range(lo..=hi).max(8);
        // Face areas of the cuboid surface; faces picked proportionally.
        let (l, w, h) = (size[0], size[1], size[2]);
        let areas = [l * w, l * w, l * h, l * h, w * h, w * h];
        let total: f64 = areas.iter().sum();
        for _ in 0..n_pts {
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            while face < 5 && pick >= areas[face] {
                pick -= areas[face];
                face += 1;
            }
            let u = rng.gen_range(-0.5..0.5);
            let v = rng.gen_range(-0.5..0.5);
            let local = match face {
                0 => [u * l, v * w, -h / 2.0],
                1 => [u * l, v * w, h / 2.0],
                2 => [u * l, -w / 2.0, v * h],
                3 => [u * l, w / 2.0, v * h],
                4 => [-l / 2.0, u * w, v * h],
                _ => [l / 2.0, u * w, v * h],
            };
            let p = [
                center[0] + local[0],
                center[1] + local[1],
                center[2] + local[2],
                spec.intensity_offset + rng.gen_range(0.3..0.6),
            ];
            points.push(p);
        }
        boxes.push(b);
    }

    let area = (r[3] - r[0]) * (r[4] - r[1]);
    let n_bg = (spec.background_density * area).round() as usize;
    for _ in 0..n_bg {
        points.push([
            rng.gen_range(r[0]..r[3]),
            rng.gen_range(r[1]..r[4]),
            rng.gen_range(r[2]..r[5]),
            spec.intensity_offset + rng.gen_range(0.0..0.3),
        ]);
    }

    Ok(Frame { dataset_id: spec.id, points, boxes })
}

/// Keeps exactly the points inside `global_range` (closed lower, open upper)
/// and drops boxes whose centers fall outside.
pub fn align_point_range(frame: &Frame, global_range: &[f64; 6]) -> Frame {
    Frame {
        dataset_id: frame.dataset_id,
        points: frame.points.iter().copied().filter(|p| in_range(p, global_range)).collect(),
        boxes: frame
            .boxes
            .iter()
            .copied()
            .filter(|b| center_in_range(&b.center, global_range))
            .collect(),
    }
}

/// Statistical normalization: rescales each box (and the points it contains)
/// toward the target dataset's per-class mean sizes.
pub fn apply_statistical_normalization(
    frame: &Frame,
    source: &DatasetSpec,
    target: &DatasetSpec,
) -> Result<Frame, SynthError> {
    for b in &frame.boxes {
        if !source.class_stats.contains_key(&b.class_id) {
            return Err(SynthError::MissingClassStats {
                spec: source.name.clone(),
                class: b.class_id,
            });
        }
        if !target.class_stats.contains_key(&b.class_id) {
            return Err(SynthError::MissingClassStats {
                spec: target.name.clone(),
                class: b.class_id,
            });
        }
    }

    let mut points = frame.points.clone();
    let mut consumed = vec![false; points.len()];
    let mut boxes = Vec::with_capacity(frame.boxes.len());
    for b in &frame.boxes {
        let src = &source.class_stats[&b.class_id];
        let tgt = &target.class_stats[&b.class_id];
        let ratio = [
            tgt.mean[0] / src.mean[0],
            tgt.mean[1] / src.mean[1],
            tgt.mean[2] / src.mean[2],
        ];
        for (i, p) in points.iter_mut().enumerate() {
            if !consumed[i] && b.contains(&frame.points[i]) {
                consumed[i] = true;
                for d in 0..3 {
                    p[d] = b.center[d] + (p[d] - b.center[d]) * ratio[d];
                }
            }
        }
        let mut nb = *b;
        for d in 0..3 {
            nb.size[d] *= ratio[d];
        }
        boxes.push(nb);
    }
    Ok(Frame { dataset_id: frame.dataset_id, points, boxes })
}

/// Registry of dataset specs, the on-disk config document for experiments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecRegistry {
    pub specs: Vec<DatasetSpec>,
}

impl SpecRegistry {
    pub fn get(&self, name: &str) -> Result<&DatasetSpec, SynthError> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| SynthError::UnknownSpec(name.to_string()))
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.specs {
            s.validate()?;
            if !seen.insert(s.id) {
                return Err(SynthError::DuplicateId(s.id));
            }
        }
        Ok(())
    }
}

fn stats(entries: &[(usize, [f64; 3], [f64; 3])]) -> BTreeMap<usize, ClassStats> {
    entries.iter().map(|(c, m, s)| (*c, ClassStats { mean: *m, std: *s })).collect()
}

/// Front-view dense preset: x in [0, 70.4], y in [-40, 40].
pub fn k_like() -> DatasetSpec {
    DatasetSpec {
        id: 0,
        name: "k_like".into(),
        point_range: [0.0, -40.0, -1.5, 70.4, 40.0, 1.0],
        points_per_object: 60,
        background_density: 0.008,
        class_stats: stats(&[
            (CLASS_CAR, [7.8, 3.2, 1.56], [0.5, 0.2, 0.08]),
            (CLASS_PEDESTRIAN, [3.2, 2.4, 1.73], [0.32, 0.2, 0.08]),
            (CLASS_CYCLIST, [5.3, 1.8, 1.73], [0.3, 0.15, 0.08]),
        ]),
        objects_per_frame: (3, 6),
        intensity_offset: 0.4,
    }
}

/// Full-360°, sparse preset with larger cars (32-beam proxy via low density).
pub fn n_like() -> DatasetSpec {
    DatasetSpec {
        id: 1,
        name: "n_like".into(),
        point_range: [-50.0, -50.0, -2.0, 50.0, 50.0, 2.8],
        points_per_object: 24,
        background_density: 0.003,
        class_stats: stats(&[
            (CLASS_CAR, [9.2, 3.9, 1.7], [0.6, 0.24, 0.1]),
            (CLASS_PEDESTRIAN, [2.9, 2.7, 1.77], [0.32, 0.2, 0.08]),
            (CLASS_CYCLIST, [5.9, 2.2, 1.47], [0.3, 0.15, 0.08]),
        ]),
        objects_per_frame: (3, 6),
        intensity_offset: 0.2,
    }
}

/// Full-360°, dense preset covering the whole global plane.
pub fn w_like() -> DatasetSpec {
    DatasetSpec {
        id: 2,
        name: "w_like".into(),
        point_range: [-75.2, -75.2, -2.0, 75.2, 75.2, 4.0],
        points_per_object: 80,
        background_density: 0.004,
        class_stats: stats(&[
            (CLASS_CAR, [9.4, 4.2, 1.7], [0.6, 0.24, 0.1]),
            (CLASS_PEDESTRIAN, [3.6, 3.4, 1.7], [0.32, 0.2, 0.08]),
            (CLASS_CYCLIST, [5.4, 2.6, 1.8], [0.3, 0.15, 0.08]),
        ]),
        objects_per_frame: (3, 6),
        intensity_offset: 0.0,
    }
}

/// The built-in presets plus car-only variants used by the small experiments.
pub fn builtin_registry() -> SpecRegistry {
    SpecRegistry {
        specs: vec![
            k_like(),
            n_like(),
            w_like(),
            k_like().car_only("k_car", 10),
            n_like().car_only("n_car", 11),
            w_like().car_only("w_car", 12),
        ],
    }
}

/// Writes frames as JSON Lines, one frame per line. serde_json emits the
/// shortest round-trip-exact decimal for every float, so values survive
/// re-reading bit-for-bit.
pub fn write_frames_jsonl<W: Write>(mut w: W, frames: &[Frame]) -> Result<(), SynthError> {
    for f in frames {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_frames_jsonl<R: BufRead>(r: R) -> Result<Vec<Frame>, SynthError> {
    let mut frames = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        frames.push(serde_json::from_str(&line)?);
    }
    Ok(frames)
}
