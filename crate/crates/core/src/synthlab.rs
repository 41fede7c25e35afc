//! Synthetic driving scenes and parametric noisy teachers.
//!
//! A world is a ground plane plus static structures (walls, posts) and
//! boxes moving at constant velocity, observed from an ego vehicle driving
//! along +x. Every object carries a fixed set of surface samples, so a
//! static sample lands on the same world position in every frame up to
//! observation noise.
//!
//! Synthetic teachers corrupt ground truth: with probability `1 − ε` a
//! point's distribution peaks at the true class, otherwise at a uniformly
//! drawn wrong class. The error rate shrinks with the teacher's temporal
//! range, `ε = max(0, ε₀ − δ·n)`.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detfuse::Box3D;
use crate::seqcloud::{Point3, PointLabel, Pose, Scan, Sequence};

pub const GROUND: usize = 0;
pub const STRUCTURE: usize = 1;
pub const VEHICLE: usize = 2;
pub const PEDESTRIAN: usize = 3;
pub const CLASS_NAMES: [&str; 4] = ["ground", "structure", "vehicle", "pedestrian"];

const SENSOR_HEIGHT: f64 = 1.7;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("invalid teacher: {0}")]
    InvalidTeacher(String),
    #[error("sequence {0} has no ground truth")]
    MissingGroundTruth(String),
}

/// Explicitly placed object. `center` is the box center at the reference
/// frame in world coordinates; `velocity` is in meters per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    /// `N`; the sequence has `2N + 1` frames.
    pub half_frames: usize,
    pub classes: usize,
    /// Half side of the square populated with ground and objects.
    pub extent: f64,
    pub ground_points: usize,
    pub structures: usize,
    pub vehicles: usize,
    pub pedestrians: usize,
    pub points_per_object: usize,
    /// Standard deviation of per-observation Gaussian noise, meters.
    pub noise: f64,
    /// Probability that a sample is missing from a given frame.
    pub dropout: f64,
    pub ego_speed: f64,
    pub vehicle_speed: [f64; 2],
    pub pedestrian_speed: [f64; 2],
    pub objects: Vec<ObjectSpec>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            half_frames: 3,
            classes: 4,
            extent: 12.0,
            ground_points: 120,
            structures: 5,
            vehicles: 3,
            pedestrians: 2,
            points_per_object: 24,
            noise: 0.03,
            dropout: 0.1,
            ego_speed: 1.0,
            vehicle_speed: [0.5, 1.5],
            pedestrian_speed: [0.1, 0.3],
            objects: Vec::new(),
        }
    }
}

impl WorldConfig {
    /// Empty world with only explicit objects.
    pub fn bare(seed: u64) -> Self {
        Self {
            seed,
            ground_points: 0,
            structures: 0,
            vehicles: 0,
            pedestrians: 0,
            noise: 0.0,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return bad("extent must be > 0");
        }
        let speeds = [self.ego_speed, self.vehicle_speed[0], self.vehicle_speed[1]];
        let speeds = speeds.iter().chain(&self.pedestrian_speed);
        if speeds.clone().any(|s| !s.is_finite()) {
            return bad("speeds must be finite");
        }
        if self.vehicle_speed[0] > self.vehicle_speed[1] || self.pedestrian_speed[0] > self.pedestrian_speed[1] {
            return bad("speed ranges must be ordered");
        }
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        let needs = [
            (self.ground_points, GROUND),
            (self.structures, STRUCTURE),
            (self.vehicles, VEHICLE),
            (self.pedestrians, PEDESTRIAN),
        ];
        if needs.iter().any(|&(n, c)| n > 0 && c >= self.classes) {
            return bad("random objects need the four default classes");
        }
        for o in &self.objects {
            if o.class >= self.classes {
                return bad("object class out of range");
            }
            if o.size.iter().any(|s| !(*s > 0.0)) || o.velocity.iter().chain(&o.center).any(|v| !v.is_finite()) {
                return bad("object size must be positive and motion finite");
            }
        }
        Ok(())
    }
}

struct Body {
    spec: ObjectSpec,
    /// Surface samples relative to the box center, in the box frame.
    samples: Vec<Vector3<f64>>,
}

impl Body {
    fn center_at(&self, t: i32) -> Vector3<f64> {
        Vector3::from(self.spec.center) + Vector3::from(self.spec.velocity) * f64::from(t)
    }

    fn radius(&self) -> f64 {
        0.5 * self.spec.size[0].hypot(self.spec.size[1])
    }

    fn moves(&self) -> bool {
        self.spec.velocity != [0.0; 3] || self.spec.class >= VEHICLE
    }
}

/// Area-weighted samples on the sides and top of a box.
fn surface_samples(size: [f64; 3], count: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
    let [l, w, h] = size;
    let faces = [l * h, l * h, w * h, w * h, l * w];
    let total: f64 = faces.iter().sum();
    (0..count)
        .map(|_| {
            let mut pick = rng.gen::<f64>() * total;
            let mut face = faces.len() - 1;
            for (i, a) in faces.iter().enumerate() {
                if pick < *a {
                    face = i;
                    break;
                }
                pick -= a;
            }
            let u = rng.gen::<f64>() - 0.5;
            let v = rng.gen::<f64>() - 0.5;
            match face {
                0 => Vector3::new(u * l, 0.5 * w, v * h),
                1 => Vector3::new(u * l, -0.5 * w, v * h),
                2 => Vector3::new(0.5 * l, u * w, v * h),
                3 => Vector3::new(-0.5 * l, u * w, v * h),
                _ => Vector3::new(u * l, v * w, 0.5 * h),
            }
        })
        .collect()
}

fn uniform(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.gen_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn random_object(class: usize, cfg: &WorldConfig, rng: &mut impl Rng) -> ObjectSpec {
    let e = cfg.extent * 0.85;
    let x = rng.gen_range(-e..e);
    let (size, yaw, speed) = match class {
        STRUCTURE if rng.gen_bool(0.5) => ([rng.gen_range(3.0..6.0), 0.3, rng.gen_range(2.0..3.0)], rng.gen_range(-3.14..3.14), 0.0),
        STRUCTURE => ([0.3, 0.3, rng.gen_range(2.0..4.0)], 0.0, 0.0),
        VEHICLE => {
            let heading = if rng.gen_bool(0.5) { 0.0 } else { std::f64::consts::PI };
            (
                [rng.gen_range(3.5..4.5), rng.gen_range(1.6..2.0), rng.gen_range(1.4..1.7)],
                heading + rng.gen_range(-0.1..0.1),
                uniform(rng, cfg.vehicle_speed),
            )
        }
        _ => (
            [rng.gen_range(0.4..0.7), rng.gen_range(0.4..0.7), rng.gen_range(1.5..1.9)],
            rng.gen_range(-3.14..3.14),
            uniform(rng, cfg.pedestrian_speed),
        ),
    };
    // Vehicles drive in lanes beside the ego path; the rest spread out.
    let y = if class == VEHICLE {
        let lane = [-6.5, -3.5, 3.5, 6.5][rng.gen_range(0..4)];
        lane + rng.gen_range(-0.3..0.3)
    } else {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        side * rng.gen_range(2.0..e.max(2.5))
    };
    ObjectSpec {
        class,
        center: [x, y, 0.5 * size[2]],
        size,
        yaw,
        velocity: [speed * yaw.cos(), speed * yaw.sin(), 0.0],
    }
}

fn collides(a: &Body, b: &Body, frames: i32) -> bool {
    let gap = a.radius() + b.radius() + 0.3;
    (-frames..=frames).any(|t| (a.center_at(t) - b.center_at(t)).xy().norm() < gap)
}

/// Ego pose (sensor to world) at frame offset `t`.
pub fn ego_pose(cfg: &WorldConfig, t: i32) -> Pose {
    Pose::from_translation(cfg.ego_speed * f64::from(t), 0.0, SENSOR_HEIGHT)
}

/// Deterministic labeled sequence with id `synth-<seed>`.
pub fn generate_sequence(cfg: &WorldConfig) -> Result<Sequence, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.half_frames as i32;

    let ground: Vec<Vector3<f64>> = (0..cfg.ground_points)
        .map(|_| {
            Vector3::new(
                rng.gen_range(-cfg.extent..cfg.extent),
                rng.gen_range(-cfg.extent..cfg.extent),
                0.0,
            )
        })
        .collect();

    let mut bodies: Vec<Body> = Vec::new();
    for o in &cfg.objects {
        let samples = surface_samples(o.size, cfg.points_per_object, &mut rng);
        bodies.push(Body { spec: o.clone(), samples });
    }
    let wanted = [
        (STRUCTURE, cfg.structures),
        (VEHICLE, cfg.vehicles),
        (PEDESTRIAN, cfg.pedestrians),
    ];
    for (class, count) in wanted {
        for _ in 0..count {
            for _attempt in 0..50 {
                let spec = random_object(class, cfg, &mut rng);
                let body = Body {
                    samples: Vec::new(),
                    spec,
                };
                if bodies.iter().all(|b| !collides(b, &body, n)) {
                    let samples = surface_samples(body.spec.size, cfg.points_per_object, &mut rng);
                    bodies.push(Body { samples, ..body });
                    break;
                }
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let mut scans = Vec::with_capacity(2 * cfg.half_frames + 1);
    let mut poses = Vec::with_capacity(scans.capacity());
    for t in -n..=n {
        let pose = ego_pose(cfg, t);
        let to_sensor = pose.inverse();
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut observe = |w: Vector3<f64>, label: PointLabel, rng: &mut ChaCha8Rng| {
            if cfg.dropout > 0.0 && rng.gen_bool(cfg.dropout) {
                return;
            }
            let mut p = to_sensor.apply(&Point3::new(w.x, w.y, w.z));
            if cfg.noise > 0.0 {
                p.x += noise.sample(rng);
                p.y += noise.sample(rng);
                p.z += noise.sample(rng);
            }
            points.push(p);
            labels.push(label);
        };
        for g in &ground {
            observe(*g, PointLabel::new(GROUND as u16, 0), &mut rng);
        }
        for (i, b) in bodies.iter().enumerate() {
            let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), b.spec.yaw);
            let c = b.center_at(t);
            let label = PointLabel::new(b.spec.class as u16, (i + 1) as u16);
            for s in &b.samples {
                observe(c + rot * s, label, &mut rng);
            }
        }
        scans.push(Scan::new(points, t).with_labels(labels));
        poses.push(pose);
    }

    let to_ref = ego_pose(cfg, 0).inverse();
    let boxes = bodies
        .iter()
        .filter(|b| b.moves())
        .map(|b| {
            let c = b.center_at(0);
            let c = to_ref.apply(&Point3::new(c.x, c.y, c.z));
            Box3D::with_hard_class([c.x, c.y, c.z], b.spec.size, b.spec.yaw, b.spec.class, 1.0, cfg.classes)
        })
        .collect();
    let seq = Sequence::new(format!("synth-{}", cfg.seed), scans, poses)
        .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    Ok(seq.with_box_labels(boxes))
}

/// Box perturbation knobs for detection-mode teachers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionNoise {
    /// Standard deviation of center jitter, meters.
    pub center_sigma: f64,
    pub drop_rate: f64,
    /// Expected number of hallucinated boxes per frame.
    pub hallucination_rate: f64,
}

impl Default for DetectionNoise {
    fn default() -> Self {
        Self {
            center_sigma: 0.1,
            drop_rate: 0.1,
            hallucination_rate: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTeacherSpec {
    /// Teacher id stamped on emitted boxes.
    pub id: u32,
    /// Temporal range `n`.
    pub range: usize,
    pub base_error: f64,
    pub gain: f64,
    /// Softmax temperature `τ`. `None` picks `τ` so that the peak
    /// probability equals the teacher's accuracy `1 − ε`.
    pub temperature: Option<f64>,
    pub seed: u64,
    /// Side of the cubic cells that share one error draw; 0 draws per point.
    pub patch_size: f64,
    pub detection: DetectionNoise,
}

impl Default for SyntheticTeacherSpec {
    fn default() -> Self {
        Self::new(0, 0.45, 0.1, 0)
    }
}

impl SyntheticTeacherSpec {
    pub fn new(range: usize, base_error: f64, gain: f64, seed: u64) -> Self {
        Self {
            id: 0,
            range,
            base_error,
            gain,
            temperature: None,
            seed,
            patch_size: 0.0,
            detection: DetectionNoise::default(),
        }
    }

    /// `ε = max(0, ε₀ − δ·n)`.
    pub fn effective_error(&self) -> f64 {
        (self.base_error - self.gain * self.range as f64).max(0.0)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidTeacher(m.into()));
        if !(0.0..=1.0).contains(&self.base_error) {
            return bad("base error must be in [0, 1]");
        }
        if !(self.gain >= 0.0 && self.gain.is_finite()) {
            return bad("gain must be >= 0");
        }
        if let Some(tau) = self.temperature {
            if !(tau > 0.0 && tau.is_finite()) {
                return bad("temperature must be > 0");
            }
        }
        if !(self.patch_size >= 0.0 && self.patch_size.is_finite()) {
            return bad("patch size must be >= 0");
        }
        let d = &self.detection;
        if !(0.0..=1.0).contains(&d.drop_rate) || !(d.center_sigma >= 0.0) || !(d.hallucination_rate >= 0.0) {
            return bad("detection noise out of range");
        }
        Ok(())
    }

    /// The temperature in use for `classes` classes.
    pub fn temperature_for(&self, classes: usize) -> f64 {
        self.temperature
            .unwrap_or_else(|| calibrated_temperature(self.effective_error(), classes))
    }
}

/// `τ` for which `softmax(onehot/τ)` peaks at `1 − ε`.
pub fn calibrated_temperature(error: f64, classes: usize) -> f64 {
    let ratio = (1.0 - error) * (classes as f64 - 1.0) / error;
    if ratio.is_infinite() {
        1e-3
    } else if ratio <= 1.0 + 1e-9 {
        1e3
    } else {
        1.0 / ratio.ln()
    }
}

/// `softmax(onehot_k / τ)`.
pub fn peaked(class: usize, classes: usize, tau: f64) -> Vec<f64> {
    // Shifted so the peak logit is 0; small τ underflows to an exact one-hot.
    let off = (-1.0 / tau).exp();
    let denom = 1.0 + (classes as f64 - 1.0) * off;
    (0..classes)
        .map(|k| if k == class { 1.0 / denom } else { off / denom })
        .collect()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    splitmix(a ^ splitmix(b))
}

/// Stable across platforms and releases, unlike `DefaultHasher`.
fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Class the teacher reports for a point of class `truth`.
fn corrupt(truth: usize, classes: usize, error: f64, rng: &mut ChaCha8Rng) -> usize {
    if classes < 2 || !rng.gen_bool(error) {
        return truth;
    }
    (truth + rng.gen_range(1..classes)) % classes
}

fn cell_key(p: &Point3, size: f64) -> u64 {
    let c = |v: f64| (v / size).floor() as i64 as u64;
    mix(mix(c(p.x), c(p.y)), c(p.z))
}

/// Class distribution for every point of the reference scan.
pub fn synth_teacher_predict(
    teacher: &SyntheticTeacherSpec,
    seq: &Sequence,
    classes: usize,
) -> Result<Vec<Vec<f64>>, SynthError> {
    teacher.validate()?;
    let truth = seq
        .reference()
        .classes()
        .ok_or_else(|| SynthError::MissingGroundTruth(seq.id.clone()))?;
    let error = teacher.effective_error();
    let tau = teacher.temperature_for(classes);
    let base = mix(teacher.seed, fnv1a(&seq.id));
    Ok(seq
        .reference()
        .points
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(i, (p, gt))| {
            let key = if teacher.patch_size > 0.0 {
                cell_key(p, teacher.patch_size)
            } else {
                i as u64
            };
            let mut rng = ChaCha8Rng::seed_from_u64(mix(base, key));
            peaked(corrupt(gt, classes, error, &mut rng), classes, tau)
        })
        .collect())
}

/// Detection-mode output: jittered, possibly relabeled ground-truth boxes,
/// with misses and hallucinations. Hallucinated boxes use twice the
/// temperature so they score lower.
pub fn synth_teacher_detect(
    teacher: &SyntheticTeacherSpec,
    seq: &Sequence,
    classes: usize,
) -> Result<Vec<Box3D>, SynthError> {
    teacher.validate()?;
    let gts = seq
        .box_labels()
        .ok_or_else(|| SynthError::MissingGroundTruth(seq.id.clone()))?;
    let error = teacher.effective_error();
    let tau = teacher.temperature_for(classes);
    let noise = &teacher.detection;
    let jitter = Normal::new(0.0, noise.center_sigma).map_err(|e| SynthError::InvalidTeacher(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(teacher.seed, fnv1a(&seq.id)), 0xde7));
    let mut out = Vec::new();
    for gt in gts {
        let dropped = rng.gen_bool(noise.drop_rate);
        let dx = [jitter.sample(&mut rng), jitter.sample(&mut rng), jitter.sample(&mut rng)];
        let class = corrupt(gt.class(), classes, error, &mut rng);
        if dropped {
            continue;
        }
        let center = [gt.center[0] + dx[0], gt.center[1] + dx[1], gt.center[2] + dx[2]];
        out.push(Box3D::new(center, gt.size, gt.yaw, peaked(class, classes, tau)).from_teacher(teacher.id));
    }
    let whole = noise.hallucination_rate.floor() as usize;
    let extra = whole + usize::from(rng.gen_bool(noise.hallucination_rate.fract()));
    let ground_z = gts.iter().map(|b| b.center[2] - 0.5 * b.size[2]).fold(f64::INFINITY, f64::min);
    let ground_z = if ground_z.is_finite() { ground_z } else { -SENSOR_HEIGHT };
    for _ in 0..extra {
        let class = if classes > PEDESTRIAN {
            rng.gen_range(VEHICLE..=PEDESTRIAN)
        } else {
            classes - 1
        };
        let size = if class == PEDESTRIAN { [0.6, 0.6, 1.7] } else { [4.0, 1.8, 1.5] };
        let center = [rng.gen_range(-12.0..12.0), rng.gen_range(-8.0..8.0), ground_z + 0.5 * size[2]];
        let yaw = rng.gen_range(-3.14..3.14);
        out.push(Box3D::new(center, size, yaw, peaked(class, classes, 2.0 * tau)).from_teacher(teacher.id));
    }
    Ok(out)
}

/// Teachers sharing `range` and error model, differing only in seed.
pub fn make_ensemble(base: &SyntheticTeacherSpec, range: usize, seeds: &[u64]) -> Vec<SyntheticTeacherSpec> {
    seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| SyntheticTeacherSpec {
            id: i as u32,
            range,
            seed,
            ..base.clone()
        })
        .collect()
}

/// One teacher per temporal range, seeded `seed, seed + 1, …`.
pub fn make_concordance(base: &SyntheticTeacherSpec, ranges: &[usize], seed: u64) -> Vec<SyntheticTeacherSpec> {
    ranges
        .iter()
        .enumerate()
        .map(|(i, &range)| SyntheticTeacherSpec {
            id: i as u32,
            range,
            seed: seed.wrapping_add(i as u64),
            ..base.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concord::argmax;
    use crate::seqcloud::align_sequence;

    fn flat_sequence(n: usize, classes: usize) -> Sequence {
        let points = (0..n).map(|i| Point3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        let labels = (0..n).map(|i| PointLabel::new((i % classes) as u16, 0)).collect();
        Sequence::new("flat", vec![Scan::new(points, 0).with_labels(labels)], vec![Pose::identity()]).unwrap()
    }

    fn accuracy(out: &[Vec<f64>], seq: &Sequence) -> f64 {
        let truth = seq.reference().classes().unwrap();
        let hits = out.iter().zip(&truth).filter(|(p, &t)| argmax(p) == t).count();
        hits as f64 / truth.len() as f64
    }

    #[test]
    fn static_world_coincides_after_alignment() {
        let cfg = WorldConfig {
            ground_points: 50,
            structures: 3,
            noise: 0.0,
            dropout: 0.0,
            vehicles: 0,
            pedestrians: 0,
            ..WorldConfig::default()
        };
        let seq = align_sequence(&generate_sequence(&cfg).unwrap()).unwrap();
        let reference = &seq.reference().points;
        for scan in seq.scans() {
            assert_eq!(scan.points.len(), reference.len());
            for (a, b) in scan.points.iter().zip(reference) {
                assert!(a.dist(b) < 1e-9);
            }
        }
    }

    #[test]
    fn moving_object_displacement() {
        let mut cfg = WorldConfig::bare(3);
        cfg.noise = 0.01;
        cfg.objects.push(ObjectSpec {
            class: VEHICLE,
            center: [5.0, 3.0, 0.75],
            size: [4.0, 1.8, 1.5],
            yaw: 0.0,
            velocity: [1.0, 0.0, 0.0],
        });
        let seq = align_sequence(&generate_sequence(&cfg).unwrap()).unwrap();
        let centroid = |t: i32| {
            let s = seq.scan_at(t).unwrap();
            let n = s.points.len() as f64;
            s.points.iter().fold(Vector3::zeros(), |acc, p| acc + p.xyz()) / n
        };
        let d = centroid(2) - centroid(0);
        assert!((d - Vector3::new(2.0, 0.0, 0.0)).norm() < 0.02, "{d:?}");
        let boxes = seq.box_labels().unwrap();
        assert_eq!(boxes.len(), 1);
        assert!((boxes[0].center[2] - (0.75 - SENSOR_HEIGHT)).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig {
            seed: 11,
            ..WorldConfig::default()
        };
        let a = generate_sequence(&cfg).unwrap();
        assert_eq!(a, generate_sequence(&cfg).unwrap());
        assert_ne!(a, generate_sequence(&WorldConfig { seed: 12, ..cfg }).unwrap());
        assert_eq!(a.scans().len(), 7);
        let classes: std::collections::BTreeSet<usize> = a.reference().classes().unwrap().into_iter().collect();
        assert_eq!(classes.into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn invalid_worlds() {
        let bad = WorldConfig {
            noise: -1.0,
            ..WorldConfig::default()
        };
        assert!(generate_sequence(&bad).is_err());
        let bad = WorldConfig {
            classes: 3,
            ..WorldConfig::default()
        };
        assert!(generate_sequence(&bad).is_err());
    }

    #[test]
    fn noiseless_teacher_is_one_hot() {
        let seq = flat_sequence(200, 4);
        let t = SyntheticTeacherSpec {
            temperature: Some(1e-3),
            ..SyntheticTeacherSpec::new(1, 0.0, 0.0, 5)
        };
        let out = synth_teacher_predict(&t, &seq, 4).unwrap();
        for (p, gt) in out.iter().zip(seq.reference().classes().unwrap()) {
            let mut onehot = vec![0.0; 4];
            onehot[gt] = 1.0;
            assert_eq!(p, &onehot);
        }
    }

    #[test]
    fn adversarial_teacher_is_always_wrong() {
        let seq = flat_sequence(500, 3);
        let t = SyntheticTeacherSpec::new(0, 1.0, 0.0, 5);
        assert_eq!(accuracy(&synth_teacher_predict(&t, &seq, 3).unwrap(), &seq), 0.0);
    }

    #[test]
    fn monte_carlo_accuracy() {
        let seq = flat_sequence(10_000, 4);
        let t = SyntheticTeacherSpec::new(3, 0.3, 0.05, 9);
        assert!((t.effective_error() - 0.15).abs() < 1e-12);
        let acc = accuracy(&synth_teacher_predict(&t, &seq, 4).unwrap(), &seq);
        assert!((acc - 0.85).abs() < 0.02, "{acc}");
    }

    #[test]
    fn calibrated_peak_is_accuracy() {
        for (e, c) in [(0.15, 4), (0.3, 4), (0.05, 10)] {
            let p = peaked(0, c, calibrated_temperature(e, c));
            assert!((p[0] - (1.0 - e)).abs() < 1e-12);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wider_range_is_not_worse() {
        let seq = flat_sequence(10_000, 4);
        let accs: Vec<f64> = (0..=4)
            .map(|n| accuracy(&synth_teacher_predict(&SyntheticTeacherSpec::new(n, 0.5, 0.1, 2), &seq, 4).unwrap(), &seq))
            .collect();
        for w in accs.windows(2) {
            assert!(w[1] + 0.02 >= w[0], "{accs:?}");
        }
    }

    #[test]
    fn ensemble_disagreement_rate() {
        let classes = 4;
        let seq = flat_sequence(20_000, classes);
        let base = SyntheticTeacherSpec::new(0, 0.25, 0.0, 0);
        let ens = make_ensemble(&base, 2, &[1, 2, 3]);
        assert_eq!(ens.len(), 3);
        assert!(ens.iter().all(|t| t.range == 2 && t.effective_error() == 0.25));
        let a = synth_teacher_predict(&ens[0], &seq, classes).unwrap();
        let b = synth_teacher_predict(&ens[1], &seq, classes).unwrap();
        let dis = a.iter().zip(&b).filter(|(x, y)| argmax(x) != argmax(y)).count() as f64 / a.len() as f64;
        let e = 0.25;
        let expected = 2.0 * e * (1.0 - e) + e * e * (classes as f64 - 2.0) / (classes as f64 - 1.0);
        assert!((dis - expected).abs() < 0.015, "{dis} vs {expected}");
    }

    #[test]
    fn patches_share_errors() {
        let seq = flat_sequence(2000, 1);
        let t = SyntheticTeacherSpec {
            patch_size: 5.0,
            ..SyntheticTeacherSpec::new(0, 0.5, 0.0, 4)
        };
        let out = synth_teacher_predict(&t, &seq, 2).unwrap();
        // Points 0.1 m apart: 50 consecutive points share one 5 m cell.
        for chunk in out.chunks(50) {
            assert!(chunk.iter().all(|p| argmax(p) == argmax(&chunk[0])));
        }
    }

    #[test]
    fn detection_mode() {
        let cfg = WorldConfig {
            seed: 4,
            vehicles: 3,
            ..WorldConfig::default()
        };
        let seq = generate_sequence(&cfg).unwrap();
        let clean = SyntheticTeacherSpec {
            detection: DetectionNoise {
                center_sigma: 0.0,
                drop_rate: 0.0,
                hallucination_rate: 0.0,
            },
            ..SyntheticTeacherSpec::new(0, 0.0, 0.0, 1)
        };
        let out = synth_teacher_detect(&clean, &seq, 4).unwrap();
        let gts = seq.box_labels().unwrap();
        assert_eq!(out.len(), gts.len());
        for (o, g) in out.iter().zip(gts) {
            assert_eq!(o.center, g.center);
            assert_eq!(o.class(), g.class());
        }
        let noisy = SyntheticTeacherSpec {
            id: 7,
            detection: DetectionNoise {
                center_sigma: 0.2,
                drop_rate: 0.0,
                hallucination_rate: 2.0,
            },
            ..clean
        };
        let out = synth_teacher_detect(&noisy, &seq, 4).unwrap();
        assert_eq!(out.len(), gts.len() + 2);
        assert!(out.iter().all(|b| b.teacher == 7));
        assert_eq!(out, synth_teacher_detect(&noisy, &seq, 4).unwrap());
        assert_eq!(
            synth_teacher_detect(&noisy, &seq.clone().without_labels(), 4),
            Err(SynthError::MissingGroundTruth(seq.id.clone()))
        );
    }
}
