//! Concordance for 3D detection: oriented box IoU, greedy clustering of the
//! teachers' boxes and per-cluster fusion.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concord::{self, ConcordError, FusionConfig, PseudoLabel};

#[derive(Debug, Error, PartialEq)]
pub enum DetError {
    #[error("box has non-positive size {0:?}")]
    DegenerateBox([f64; 3]),
    #[error("cluster has no members")]
    EmptyCluster,
    #[error("invalid cluster config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Fusion(#[from] ConcordError),
}

/// Wraps an angle into `[-π, π)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let y = (yaw + PI).rem_euclid(2.0 * PI) - PI;
    if y >= PI {
        -PI
    } else {
        y
    }
}

/// Oriented 3D box. `size` is (length, width, height) with length along the
/// heading; `yaw` rotates about +z; `center.z` is the vertical midpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub probs: Vec<f64>,
    #[serde(default)]
    pub teacher: u32,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, probs: Vec<f64>) -> Self {
        Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
            probs,
            teacher: 0,
        }
    }

    /// Box carrying a hard class and score; the remaining mass is spread
    /// evenly over the other classes.
    pub fn with_hard_class(
        center: [f64; 3],
        size: [f64; 3],
        yaw: f64,
        class: usize,
        score: f64,
        classes: usize,
    ) -> Self {
        let rest = if classes > 1 {
            (1.0 - score) / (classes - 1) as f64
        } else {
            0.0
        };
        let mut probs = vec![rest; classes];
        probs[class] = score;
        Self::new(center, size, yaw, probs)
    }

    pub fn from_teacher(mut self, teacher: u32) -> Self {
        self.teacher = teacher;
        self
    }

    pub fn validate(&self) -> Result<(), DetError> {
        if self.size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(DetError::DegenerateBox(self.size));
        }
        Ok(())
    }

    /// Max class probability.
    pub fn score(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn class(&self) -> usize {
        concord::argmax(&self.probs)
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Bird's-eye footprint corners in counter-clockwise order.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])
    }

    fn z_range(&self) -> (f64, f64) {
        let h = self.size[2] / 2.0;
        (self.center[2] - h, self.center[2] + h)
    }

    fn same_geometry(&self, other: &Box3D) -> bool {
        self.center == other.center && self.size == other.size && self.yaw == other.yaw
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Clips a polygon by the half-plane left of the directed edge `a -> b`.
fn clip_half_plane(poly: &[[f64; 2]], a: [f64; 2], b: [f64; 2], out: &mut Vec<[f64; 2]>) {
    out.clear();
    let n = poly.len();
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let dp = cross(a, b, p);
        let dq = cross(a, b, q);
        if dp >= 0.0 {
            out.push(p);
        }
        if (dp >= 0.0) != (dq >= 0.0) {
            let t = dp / (dp - dq);
            out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
}

/// Shoelace area relative to the first vertex.
fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let o = poly[0];
    let mut twice = 0.0;
    for w in poly[1..].windows(2) {
        twice += cross(o, w[0], w[1]);
    }
    twice.abs() / 2.0
}

/// Intersection area of two convex counter-clockwise polygons.
pub fn convex_intersection_area(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> f64 {
    let mut poly = subject.to_vec();
    let mut scratch = Vec::with_capacity(poly.len() + clip.len());
    for i in 0..clip.len() {
        clip_half_plane(&poly, clip[i], clip[(i + 1) % clip.len()], &mut scratch);
        std::mem::swap(&mut poly, &mut scratch);
        if poly.is_empty() {
            return 0.0;
        }
    }
    polygon_area(&poly)
}

/// Volumetric IoU of two oriented boxes sharing the vertical axis.
pub fn iou3d(a: &Box3D, b: &Box3D) -> Result<f64, DetError> {
    a.validate()?;
    b.validate()?;
    if a.same_geometry(b) {
        return Ok(1.0);
    }
    let (a_lo, a_hi) = a.z_range();
    let (b_lo, b_hi) = b.z_range();
    let dz = a_hi.min(b_hi) - a_lo.max(b_lo);
    if dz <= 0.0 {
        return Ok(0.0);
    }
    let area = convex_intersection_area(&a.footprint(), &b.footprint());
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    /// Candidates are tested against the seed only.
    #[default]
    SeedAnchored,
    /// Candidates must overlap every box already in the cluster.
    Mutual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub iou_threshold: f64,
    #[serde(default)]
    pub mode: ClusterMode,
    pub fusion: FusionConfig,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            mode: ClusterMode::SeedAnchored,
            fusion: FusionConfig::default(),
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), DetError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(DetError::InvalidConfig(format!(
                "iou_threshold {} outside (0, 1)",
                self.iou_threshold
            )));
        }
        self.fusion.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxCluster {
    pub seed: Box3D,
    /// Seed first, then absorbed boxes in ranking order.
    pub members: Vec<Box3D>,
    /// Input positions of `members`.
    pub indices: Vec<usize>,
    pub fused: Option<PseudoLabel>,
    pub representative: Box3D,
}

/// Ranking used for seeding: score desc, then teacher id, then input index.
fn ranking(boxes: &[Box3D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        boxes[j]
            .score()
            .total_cmp(&boxes[i].score())
            .then(boxes[i].teacher.cmp(&boxes[j].teacher))
            .then(i.cmp(&j))
    });
    order
}

/// Greedy clustering: the strongest unassigned box seeds a cluster that
/// absorbs every unassigned box overlapping it by at least the threshold;
/// absorbed boxes are suppressed and the procedure repeats.
pub fn greedy_cluster(boxes: &[Box3D], cfg: &ClusterConfig) -> Result<Vec<BoxCluster>, DetError> {
    cfg.validate()?;
    for b in boxes {
        b.validate()?;
    }
    let order = ranking(boxes);
    let mut assigned = vec![false; boxes.len()];
    let mut clusters = Vec::new();
    for (rank, &seed) in order.iter().enumerate() {
        if assigned[seed] {
            continue;
        }
        assigned[seed] = true;
        let mut indices = vec![seed];
        for &cand in &order[rank + 1..] {
            if assigned[cand] {
                continue;
            }
            let joins = match cfg.mode {
                ClusterMode::SeedAnchored => {
                    iou3d(&boxes[seed], &boxes[cand])? >= cfg.iou_threshold
                }
                ClusterMode::Mutual => {
                    let mut all = true;
                    for &m in &indices {
                        if iou3d(&boxes[m], &boxes[cand])? < cfg.iou_threshold {
                            all = false;
                            break;
                        }
                    }
                    all
                }
            };
            if joins {
                assigned[cand] = true;
                indices.push(cand);
            }
        }
        clusters.push(BoxCluster {
            seed: boxes[seed].clone(),
            members: indices.iter().map(|&i| boxes[i].clone()).collect(),
            indices,
            fused: None,
            representative: boxes[seed].clone(),
        });
    }
    Ok(clusters)
}

/// Fuses a cluster treating each member as one teacher's output.
pub fn fuse_cluster(mut cluster: BoxCluster, fusion: &FusionConfig) -> Result<BoxCluster, DetError> {
    if cluster.members.is_empty() {
        return Err(DetError::EmptyCluster);
    }
    let probs: Vec<&[f64]> = cluster.members.iter().map(|b| b.probs.as_slice()).collect();
    cluster.fused = Some(concord::fuse_point(&probs, fusion)?);
    cluster.representative = cluster.seed.clone();
    Ok(cluster)
}

/// Fused pseudo-label box for the reference frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedBox {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub class: usize,
    pub c: f64,
    pub selected: bool,
    pub members: usize,
}

/// Cluster, fuse and threshold all teachers' detections of one reference
/// frame. Deselected boxes are kept with `selected = false`.
pub fn pseudo_label_frame(detections: &[Box3D], cfg: &ClusterConfig) -> Result<Vec<FusedBox>, DetError> {
    greedy_cluster(detections, cfg)?
        .into_iter()
        .map(|cl| {
            let cl = fuse_cluster(cl, &cfg.fusion)?;
            let fused = cl.fused.expect("fused above");
            Ok(FusedBox {
                bbox: cl.representative,
                class: fused.class,
                c: fused.confidence,
                selected: fused.selected,
                members: cl.members.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(x: f64, y: f64, yaw: f64, score: f64) -> Box3D {
        Box3D::new([x, y, 0.0], [1.0, 1.0, 1.0], yaw, vec![score, 1.0 - score])
    }

    #[test]
    fn hand_ious() {
        let a = unit(0.0, 0.0, 0.0, 0.9);
        assert_eq!(iou3d(&a, &a).unwrap(), 1.0);
        assert_eq!(iou3d(&a, &unit(0.5, 0.0, 0.0, 0.9)).unwrap(), 1.0 / 3.0);
        assert_eq!(iou3d(&a, &unit(10.0, 0.0, 0.0, 0.9)).unwrap(), 0.0);
        // Rotated square: intersection is a regular octagon of area 2(√2 - 1).
        let oct = 2.0 * (2f64.sqrt() - 1.0);
        let expected = oct / (2.0 - oct);
        let got = iou3d(&a, &unit(0.0, 0.0, PI / 4.0, 0.9)).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn vertical_offset() {
        let a = unit(0.0, 0.0, 0.0, 0.9);
        let mut b = a.clone();
        b.center[2] = 0.5;
        b.yaw = 0.1;
        let mut c = b.clone();
        c.center[2] = 1.0;
        assert!(iou3d(&a, &b).unwrap() > 0.0);
        assert_eq!(iou3d(&a, &c).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_box() {
        let a = unit(0.0, 0.0, 0.0, 0.9);
        let mut b = a.clone();
        b.size[1] = 0.0;
        assert!(matches!(iou3d(&a, &b), Err(DetError::DegenerateBox(_))));
    }

    #[test]
    fn yaw_normalization() {
        assert_eq!(normalize_yaw(PI), -PI);
        assert!((normalize_yaw(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(normalize_yaw(0.25), 0.25);
    }

    fn cfg(th: f64) -> ClusterConfig {
        ClusterConfig {
            iou_threshold: th,
            ..Default::default()
        }
    }

    #[test]
    fn empty_input() {
        assert!(greedy_cluster(&[], &cfg(0.5)).unwrap().is_empty());
        assert!(pseudo_label_frame(&[], &cfg(0.5)).unwrap().is_empty());
    }

    /// Shift along x of a unit cube giving the requested IoU with the origin cube.
    fn shift_for(iou: f64) -> f64 {
        // overlap o: o / (2 - o) = iou
        1.0 - 2.0 * iou / (1.0 + iou)
    }

    #[test]
    fn hand_trace_absorb_and_disjoint() {
        let a = unit(0.0, 0.0, 0.0, 0.9);
        let b = unit(shift_for(0.8), 0.0, 0.0, 0.8);
        let c = unit(20.0, 0.0, 0.0, 0.7);
        assert!((iou3d(&a, &b).unwrap() - 0.8).abs() < 1e-12);
        let cl = greedy_cluster(&[c, b, a], &cfg(0.5)).unwrap();
        let groups: Vec<Vec<usize>> = cl.iter().map(|c| c.indices.clone()).collect();
        assert_eq!(groups, vec![vec![2, 1], vec![0]]);
    }

    #[test]
    fn hand_trace_chain_is_seed_anchored() {
        let s = shift_for(0.6);
        let a = unit(0.0, 0.0, 0.0, 0.9);
        let b = unit(s, 0.0, 0.0, 0.8);
        let c = unit(2.0 * s, 0.0, 0.0, 0.7);
        assert!((iou3d(&b, &c).unwrap() - 0.6).abs() < 1e-12);
        assert!(iou3d(&a, &c).unwrap() < 0.5);
        let cl = greedy_cluster(&[a, b, c], &cfg(0.5)).unwrap();
        let groups: Vec<Vec<usize>> = cl.iter().map(|c| c.indices.clone()).collect();
        assert_eq!(groups, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn mutual_mode_requires_all_pairs() {
        let a = unit(0.0, 0.0, 0.0, 0.9);
        let b = unit(0.2, 0.0, 0.0, 0.8);
        let c = unit(-0.2, 0.0, 0.0, 0.7);
        // c overlaps a by 0.667 and b by 0.429.
        let anchored = greedy_cluster(&[a.clone(), b.clone(), c.clone()], &cfg(0.5)).unwrap();
        assert_eq!(anchored.len(), 1);
        let mutual = ClusterConfig {
            mode: ClusterMode::Mutual,
            ..cfg(0.5)
        };
        let cl = greedy_cluster(&[a, b, c], &mutual).unwrap();
        assert_eq!(cl.len(), 2);
    }

    #[test]
    fn fuse_cluster_cases() {
        let f = FusionConfig {
            lambda: 0.1,
            theta: 0.7,
        };
        let single = greedy_cluster(&[unit(0.0, 0.0, 0.0, 0.65)], &cfg(0.5)).unwrap();
        let fused = fuse_cluster(single[0].clone(), &f).unwrap().fused.unwrap();
        assert_eq!((fused.class, fused.confidence, fused.selected), (0, 0.65, false));

        let boxes: Vec<Box3D> = [[0.7, 0.3], [0.6, 0.4], [0.4, 0.6]]
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Box3D::new([0.01 * i as f64, 0.0, 0.0], [1.0; 3], 0.0, p.to_vec()).from_teacher(i as u32)
            })
            .collect();
        let cl = greedy_cluster(&boxes, &cfg(0.5)).unwrap();
        assert_eq!(cl.len(), 1);
        let fused = fuse_cluster(cl[0].clone(), &f).unwrap();
        let l = fused.fused.unwrap();
        assert_eq!(l.class, 0);
        assert!((l.confidence - 0.8).abs() < 1e-12);
        assert_eq!(fused.representative, boxes[0]);

        let onehot: Vec<Box3D> = (0..3)
            .map(|i| Box3D::new([0.0; 3], [2.0; 3], 0.0, vec![0.0, 1.0]).from_teacher(i))
            .collect();
        let cl = greedy_cluster(&onehot, &cfg(0.5)).unwrap();
        assert_eq!(fuse_cluster(cl[0].clone(), &f).unwrap().fused.unwrap().confidence, 1.0);

        let empty = BoxCluster {
            members: vec![],
            indices: vec![],
            ..cl[0].clone()
        };
        assert_eq!(fuse_cluster(empty, &f), Err(DetError::EmptyCluster));
    }

    #[test]
    fn frame_two_teachers_agree() {
        let a = Box3D::new([5.0, 2.0, 0.8], [4.0, 1.8, 1.6], 0.3, vec![0.8, 0.2]).from_teacher(0);
        let mut b = a.clone();
        // Slide along the heading so the overlap ratio is exactly 0.9.
        let d = 4.0 * (1.0 - 0.9) / (1.0 + 0.9);
        b.center[0] += d * 0.3f64.cos();
        b.center[1] += d * 0.3f64.sin();
        b.probs = vec![0.7, 0.3];
        b.teacher = 1;
        assert!((iou3d(&a, &b).unwrap() - 0.9).abs() < 1e-9);
        let c = ClusterConfig {
            iou_threshold: 0.5,
            mode: ClusterMode::SeedAnchored,
            fusion: FusionConfig {
                lambda: 0.2,
                theta: 0.75,
            },
        };
        let out = pseudo_label_frame(&[a.clone(), b], &c).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].c, 1.0);
        assert!(out[0].selected);
        assert_eq!(out[0].bbox, a);
    }

    #[test]
    fn single_teacher_passthrough() {
        let c = ClusterConfig {
            fusion: FusionConfig {
                lambda: 0.3,
                theta: 0.0,
            },
            ..Default::default()
        };
        let boxes = vec![unit(0.0, 0.0, 0.0, 0.9), unit(5.0, 0.0, 0.0, 0.6)];
        let out = pseudo_label_frame(&boxes, &c).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|b| b.selected));
        assert_eq!(out[0].c, 0.9);
        assert_eq!(out[1].c, 0.6);
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (
            -3.0f64..3.0,
            -3.0f64..3.0,
            0.3f64..3.0,
            0.3f64..3.0,
            0.3f64..2.0,
            -PI..PI,
            0.5f64..1.0,
        )
            .prop_map(|(x, y, l, w, h, yaw, s)| Box3D::new([x, y, h / 2.0], [l, w, h], yaw, vec![s, 1.0 - s]))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou3d(&a, &b).unwrap();
            let ba = iou3d(&b, &a).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn square_footprint_half_turn(a in arb_box()) {
            let mut b = a.clone();
            b.yaw = normalize_yaw(a.yaw + PI);
            prop_assert!((iou3d(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        }
    }
}
