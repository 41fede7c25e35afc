//! Spatio-temporal neighborhoods: for a reference point `x₀` collect every
//! point `x_t` of scan `t` with `‖x_t − x₀‖ ≤ r(|t|)`, where the radius grows
//! with the temporal distance.
//!
//! Each time offset gets its own uniform hash grid whose cell edge is at
//! least that offset's radius, so a query only inspects the 27 cells around
//! the query point.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seqcloud::{Point3, Sequence};

/// Relative slack on the grid cell edge so that rounding in `x / cell`
/// never pushes a neighbor two cells away.
const CELL_SLACK: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("sequence is not aligned to its reference frame")]
    UnalignedSequence,
    #[error("query window [-{past}, {future}] exceeds indexed range [-{have_past}, {have_future}]")]
    RangeExceedsIndex {
        past: usize,
        future: usize,
        have_past: usize,
        have_future: usize,
    },
    #[error("invalid radius function: r0 = {r0}, slope = {slope}")]
    InvalidRadius { r0: f64, slope: f64 },
}

/// Affine radius `r(|t|) = r0 + slope·|t|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusFn {
    pub r0: f64,
    pub slope: f64,
}

impl Default for RadiusFn {
    fn default() -> Self {
        Self { r0: 1.0, slope: 0.5 }
    }
}

impl RadiusFn {
    pub fn new(r0: f64, slope: f64) -> Result<Self, IndexError> {
        let r = Self { r0, slope };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if !(self.r0 > 0.0 && self.slope >= 0.0 && self.r0.is_finite() && self.slope.is_finite()) {
            return Err(IndexError::InvalidRadius {
                r0: self.r0,
                slope: self.slope,
            });
        }
        Ok(())
    }

    pub fn at(&self, time_offset: i32) -> f64 {
        self.r0 + self.slope * f64::from(time_offset.unsigned_abs())
    }
}

/// Euclidean distance as used by the membership test.
#[inline]
pub fn distance(a: &Point3, b: &Point3) -> f64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub point: Point3,
    pub time_offset: i32,
    /// Position of the point within its scan.
    pub index: usize,
    /// `x_t − x₀`.
    pub relative: [f64; 3],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Neighborhood {
    /// Ordered by time offset, then point index.
    pub members: Vec<Neighbor>,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

type Cell = (i64, i64, i64);

#[derive(Debug, Clone)]
struct Layer {
    time_offset: i32,
    radius: f64,
    cell: f64,
    points: Vec<Point3>,
    grid: HashMap<Cell, Vec<u32>>,
}

impl Layer {
    fn build(time_offset: i32, radius: f64, points: &[Point3]) -> Self {
        let cell = radius * (1.0 + CELL_SLACK);
        let mut grid: HashMap<Cell, Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            grid.entry(cell_of(p, cell)).or_default().push(i as u32);
        }
        Self {
            time_offset,
            radius,
            cell,
            points: points.to_vec(),
            grid,
        }
    }

    fn query(&self, x0: &Point3, cap: Option<usize>, out: &mut Vec<Neighbor>) {
        let (cx, cy, cz) = cell_of(x0, self.cell);
        let mut found: Vec<(f64, u32)> = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &i in ids {
                            let d = distance(&self.points[i as usize], x0);
                            if d <= self.radius {
                                found.push((d, i));
                            }
                        }
                    }
                }
            }
        }
        if let Some(cap) = cap {
            if found.len() > cap {
                found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                found.truncate(cap);
            }
        }
        found.sort_by_key(|&(_, i)| i);
        out.extend(found.into_iter().map(|(_, i)| {
            let p = self.points[i as usize];
            Neighbor {
                point: p,
                time_offset: self.time_offset,
                index: i as usize,
                relative: [p.x - x0.x, p.y - x0.y, p.z - x0.z],
            }
        }));
    }
}

fn cell_of(p: &Point3, cell: f64) -> Cell {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

/// Immutable neighbor index over an aligned sequence.
#[derive(Debug, Clone)]
pub struct SpatioTemporalIndex {
    radius: RadiusFn,
    cap: Option<usize>,
    /// Sorted by time offset.
    layers: Vec<Layer>,
}

impl SpatioTemporalIndex {
    pub fn radius(&self) -> RadiusFn {
        self.radius
    }

    pub fn past_range(&self) -> usize {
        self.layers
            .first()
            .map_or(0, |l| l.time_offset.min(0).unsigned_abs() as usize)
    }

    pub fn future_range(&self) -> usize {
        self.layers.last().map_or(0, |l| l.time_offset.max(0) as usize)
    }

    pub fn covers(&self, past: usize, future: usize) -> bool {
        past <= self.past_range() && future <= self.future_range()
    }

    /// Caps the neighbors taken from each time offset, keeping the nearest
    /// (ties: lower point index).
    pub fn with_cap(mut self, cap: Option<usize>) -> Self {
        self.cap = cap;
        self
    }
}

pub fn build_index(seq: &Sequence, radius: RadiusFn) -> Result<SpatioTemporalIndex, IndexError> {
    radius.validate()?;
    if !seq.is_aligned() {
        return Err(IndexError::UnalignedSequence);
    }
    let layers = seq
        .scans()
        .iter()
        .map(|s| Layer::build(s.time_offset, radius.at(s.time_offset), &s.points))
        .collect();
    Ok(SpatioTemporalIndex {
        radius,
        cap: None,
        layers,
    })
}

pub fn neighbors(
    index: &SpatioTemporalIndex,
    x0: &Point3,
    past: usize,
    future: usize,
) -> Result<Neighborhood, IndexError> {
    if !index.covers(past, future) {
        return Err(IndexError::RangeExceedsIndex {
            past,
            future,
            have_past: index.past_range(),
            have_future: index.future_range(),
        });
    }
    let lo = -(past as i32);
    let hi = future as i32;
    let mut members = Vec::new();
    for layer in index.layers.iter().filter(|l| (lo..=hi).contains(&l.time_offset)) {
        layer.query(x0, index.cap, &mut members);
    }
    Ok(Neighborhood { members })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcloud::{align_sequence, Pose, Scan};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn aligned(scans: Vec<Scan>) -> Sequence {
        let n = scans.len();
        align_sequence(&Sequence::new("t", scans, vec![Pose::identity(); n]).unwrap()).unwrap()
    }

    fn pts(v: &[(f64, f64, f64)]) -> Vec<Point3> {
        v.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect()
    }

    #[test]
    fn unaligned_rejected() {
        let seq = Sequence::new("t", vec![Scan::new(vec![], 0)], vec![Pose::identity()]).unwrap();
        assert_eq!(
            build_index(&seq, RadiusFn::default()).unwrap_err(),
            IndexError::UnalignedSequence
        );
    }

    #[test]
    fn empty_and_self() {
        let seq = aligned(vec![Scan::new(vec![], -1), Scan::new(vec![], 0)]);
        let idx = build_index(&seq, RadiusFn::default()).unwrap();
        assert!(neighbors(&idx, &Point3::new(0.0, 0.0, 0.0), 1, 0).unwrap().is_empty());

        let seq = aligned(vec![Scan::new(pts(&[(0.0, 0.0, 0.0)]), 0)]);
        let idx = build_index(&seq, RadiusFn::default()).unwrap();
        let n = neighbors(&idx, &Point3::new(0.0, 0.0, 0.0), 0, 0).unwrap();
        assert_eq!(n.len(), 1);
        assert_eq!(n.members[0].relative, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn radius_grows_with_time() {
        let p = (1.2, 0.0, 0.0);
        let seq = aligned(vec![
            Scan::new(pts(&[p, (0.0, 0.0, 0.0)]), 0),
            Scan::new(pts(&[p]), 1),
        ]);
        let idx = build_index(&seq, RadiusFn::new(1.0, 0.5).unwrap()).unwrap();
        let n = neighbors(&idx, &Point3::new(0.0, 0.0, 0.0), 0, 1).unwrap();
        let got: Vec<(i32, usize)> = n.members.iter().map(|m| (m.time_offset, m.index)).collect();
        assert_eq!(got, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn boundary_inclusive() {
        let seq = aligned(vec![
            Scan::new(pts(&[(0.0, 0.0, 0.0)]), 0),
            Scan::new(pts(&[(0.0, 1.5, 0.0), (0.0, 1.5000001, 0.0)]), 1),
        ]);
        let idx = build_index(&seq, RadiusFn::new(1.0, 0.5).unwrap()).unwrap();
        let n = neighbors(&idx, &Point3::new(0.0, 0.0, 0.0), 0, 1).unwrap();
        assert_eq!(n.len(), 2);
        assert_eq!(n.members[1].index, 0);
    }

    #[test]
    fn far_points_excluded() {
        let r = RadiusFn::new(0.5, 0.25).unwrap();
        let far = r.at(2) + 0.25 * 2.0 + 0.1;
        let seq = aligned(vec![
            Scan::new(pts(&[(far, 0.0, 0.0)]), -2),
            Scan::new(pts(&[(0.0, -far, 0.0)]), -1),
            Scan::new(pts(&[(3.0, 3.0, 3.0), (3.0, 3.0, 3.0)]), 0),
            Scan::new(pts(&[(3.0, 3.0, 3.0 + far)]), 1),
        ]);
        let idx = build_index(&seq, r).unwrap();
        let n = neighbors(&idx, &Point3::new(3.0, 3.0, 3.0), 2, 1).unwrap();
        let got: Vec<usize> = n.members.iter().map(|m| m.index).collect();
        assert_eq!(got, vec![0, 1]);
        assert!(n.members.iter().all(|m| m.time_offset == 0));
    }

    #[test]
    fn range_checked() {
        let seq = aligned(vec![Scan::new(vec![], -1), Scan::new(vec![], 0)]);
        let idx = build_index(&seq, RadiusFn::default()).unwrap();
        assert!(matches!(
            neighbors(&idx, &Point3::new(0.0, 0.0, 0.0), 2, 0),
            Err(IndexError::RangeExceedsIndex { .. })
        ));
        assert!(matches!(
            neighbors(&idx, &Point3::new(0.0, 0.0, 0.0), 0, 1),
            Err(IndexError::RangeExceedsIndex { .. })
        ));
    }

    #[test]
    fn cap_keeps_nearest() {
        let seq = aligned(vec![Scan::new(
            pts(&[(0.5, 0.0, 0.0), (0.1, 0.0, 0.0), (0.0, 0.1, 0.0), (0.3, 0.0, 0.0)]),
            0,
        )]);
        let idx = build_index(&seq, RadiusFn::default()).unwrap().with_cap(Some(2));
        let n = neighbors(&idx, &Point3::new(0.0, 0.0, 0.0), 0, 0).unwrap();
        let got: Vec<usize> = n.members.iter().map(|m| m.index).collect();
        assert_eq!(got, vec![1, 2]);
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize, frames: i32) -> Vec<Scan> {
        (-frames..=frames)
            .map(|t| {
                let pts = (0..n)
                    .map(|_| Point3::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-1.0..1.0)))
                    .collect();
                Scan::new(pts, t)
            })
            .collect()
    }

    fn key_set(n: &Neighborhood) -> Vec<(i32, [u64; 3])> {
        let mut v: Vec<_> = n
            .members
            .iter()
            .map(|m| (m.time_offset, [m.point.x.to_bits(), m.point.y.to_bits(), m.point.z.to_bits()]))
            .collect();
        v.sort();
        v
    }

    #[test]
    fn insertion_order_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scans = random_scene(&mut rng, 200, 1);
        let mut shuffled = scans.clone();
        for s in &mut shuffled {
            s.points.reverse();
        }
        let r = RadiusFn::new(0.8, 0.4).unwrap();
        let a = build_index(&aligned(scans.clone()), r).unwrap();
        let b = build_index(&aligned(shuffled), r).unwrap();
        for q in &scans[1].points {
            assert_eq!(key_set(&neighbors(&a, q, 1, 1).unwrap()), key_set(&neighbors(&b, q, 1, 1).unwrap()));
        }
    }

    #[test]
    fn monotone_in_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scans = random_scene(&mut rng, 150, 2);
        let seq = aligned(scans.clone());
        let small = build_index(&seq, RadiusFn::new(0.5, 0.2).unwrap()).unwrap();
        let big = build_index(&seq, RadiusFn::new(0.7, 0.35).unwrap()).unwrap();
        for q in &scans[2].points {
            let s = key_set(&neighbors(&small, q, 2, 2).unwrap());
            let b = key_set(&neighbors(&big, q, 2, 2).unwrap());
            assert!(s.iter().all(|k| b.contains(k)));
        }
    }

    #[test]
    fn mirrored_in_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut scans = random_scene(&mut rng, 120, 2);
        scans[0].points = scans[4].points.clone();
        scans[1].points = scans[3].points.clone();
        let seq = aligned(scans.clone());
        let idx = build_index(&seq, RadiusFn::new(0.6, 0.3).unwrap()).unwrap();
        for q in &scans[2].points {
            let n = neighbors(&idx, q, 2, 2).unwrap();
            for t in 1..=2 {
                let fwd: Vec<usize> = n.members.iter().filter(|m| m.time_offset == t).map(|m| m.index).collect();
                let back: Vec<usize> = n.members.iter().filter(|m| m.time_offset == -t).map(|m| m.index).collect();
                assert_eq!(fwd, back);
            }
        }
    }
}
