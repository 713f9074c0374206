//! Axis-aligned 3D box algebra: IoU, cover boxes, greedy NMS, center
//! matching and point-in-box cropping.
//!
//! Boxes are stored as center + full extents. Containment is closed at the
//! faces and NMS ties break toward the lower original index, so every
//! consumer sees deterministic results.

use serde::{Deserialize, Serialize};

/// A point or extent in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn splat(v: f64) -> Self {
        Vec3 { x: v, y: v, z: v }
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn mul(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn dist(self, o: Vec3) -> f64 {
        self.dist_sq(o).sqrt()
    }

    pub fn dist_sq(self, o: Vec3) -> f64 {
        let d = self.sub(o);
        d.x * d.x + d.y * d.y + d.z * d.z
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Rotate about the vertical (z) axis.
    pub fn rotate_yaw(self, angle: f64) -> Vec3 {
        let (s, c) = angle.sin_cos();
        Vec3::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

/// Axis-aligned box: center plus full extents (not half extents).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub center: Vec3,
    pub size: Vec3,
}

impl Aabb {
    pub fn new(center: Vec3, size: Vec3) -> Self {
        Aabb { center, size }
    }

    pub fn from_min_max(min: Vec3, max: Vec3) -> Self {
        Aabb {
            center: min.add(max).scale(0.5),
            size: max.sub(min),
        }
    }

    pub fn min_corner(&self) -> Vec3 {
        self.center.sub(self.size.scale(0.5))
    }

    pub fn max_corner(&self) -> Vec3 {
        self.center.add(self.size.scale(0.5))
    }

    /// Closed containment: face points count as inside.
    pub fn contains(&self, p: Vec3) -> bool {
        let lo = self.min_corner();
        let hi = self.max_corner();
        p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z
    }

    /// True when `inner` lies entirely within `self`.
    pub fn contains_box(&self, inner: &Aabb) -> bool {
        self.contains(inner.min_corner()) && self.contains(inner.max_corner())
    }

    /// The eight corner points.
    pub fn corners(&self) -> [Vec3; 8] {
        let lo = self.min_corner();
        let hi = self.max_corner();
        [
            Vec3::new(lo.x, lo.y, lo.z),
            Vec3::new(hi.x, lo.y, lo.z),
            Vec3::new(lo.x, hi.y, lo.z),
            Vec3::new(hi.x, hi.y, lo.z),
            Vec3::new(lo.x, lo.y, hi.z),
            Vec3::new(hi.x, lo.y, hi.z),
            Vec3::new(lo.x, hi.y, hi.z),
            Vec3::new(hi.x, hi.y, hi.z),
        ]
    }

    pub fn translate(&self, t: Vec3) -> Aabb {
        Aabb::new(self.center.add(t), self.size)
    }
}

/// A box with a class and a confidence, as fed to NMS.
#[derive(Clone, Copy, Debug)]
pub struct ScoredBox {
    pub aabb: Aabb,
    pub class_id: usize,
    pub score: f64,
}

/// Product of the extents.
pub fn volume(b: &Aabb) -> f64 {
    b.size.x * b.size.y * b.size.z
}

fn overlap_1d(c0: f64, s0: f64, c1: f64, s1: f64) -> f64 {
    let lo = (c0 - 0.5 * s0).max(c1 - 0.5 * s1);
    let hi = (c0 + 0.5 * s0).min(c1 + 0.5 * s1);
    (hi - lo).max(0.0)
}

/// Intersection volume of two boxes.
pub fn intersection_volume(a: &Aabb, b: &Aabb) -> f64 {
    overlap_1d(a.center.x, a.size.x, b.center.x, b.size.x)
        * overlap_1d(a.center.y, a.size.y, b.center.y, b.size.y)
        * overlap_1d(a.center.z, a.size.z, b.center.z, b.size.z)
}

/// Intersection over union. Zero when the union has zero volume.
pub fn iou(a: &Aabb, b: &Aabb) -> f64 {
    let inter = intersection_volume(a, b);
    let union = volume(a) + volume(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Smallest box containing every input box. `None` for an empty slice.
pub fn cover_box(boxes: &[Aabb]) -> Option<Aabb> {
    let first = boxes.first()?;
    let mut lo = first.min_corner();
    let mut hi = first.max_corner();
    for b in &boxes[1..] {
        let bl = b.min_corner();
        let bh = b.max_corner();
        lo = Vec3::new(lo.x.min(bl.x), lo.y.min(bl.y), lo.z.min(bl.z));
        hi = Vec3::new(hi.x.max(bh.x), hi.y.max(bh.y), hi.z.max(bh.z));
    }
    Some(Aabb::from_min_max(lo, hi))
}

/// Greedy class-agnostic NMS. Boxes are visited by descending score (ties by
/// lower index); a box is suppressed when its IoU with an already kept box
/// exceeds `iou_thresh`. Returns kept indices in visit order.
pub fn nms(dets: &[ScoredBox], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept
            .iter()
            .any(|&k| iou(&dets[k].aabb, &dets[i].aabb) > iou_thresh);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Nearest-reference match for one query center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterMatch {
    pub index: usize,
    pub distance: f64,
    /// True when the distance is at most the query radius.
    pub within: bool,
}

/// Match each prediction center to its nearest reference center. Ties break
/// toward the lower reference index. `None` entries when `refs` is empty.
pub fn match_by_center(preds: &[Vec3], refs: &[Vec3], radius: f64) -> Vec<Option<CenterMatch>> {
    preds
        .iter()
        .map(|p| {
            let mut best: Option<CenterMatch> = None;
            for (j, r) in refs.iter().enumerate() {
                let d = p.dist(*r);
                if best.map_or(true, |b| d < b.distance) {
                    best = Some(CenterMatch {
                        index: j,
                        distance: d,
                        within: d <= radius,
                    });
                }
            }
            best
        })
        .collect()
}

/// Depth-camera style visibility from a single viewpoint: points are binned
/// by spherical direction (azimuth x elevation) and only the `keep` nearest
/// per bin survive. Points behind a nearer surface in the same bin are
/// occluded.
pub fn visible_mask(
    points: &[Vec3],
    camera: Vec3,
    az_bins: usize,
    el_bins: usize,
    keep: usize,
) -> Vec<bool> {
    use std::f64::consts::PI;
    let mut binned: Vec<(usize, f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = p.sub(camera);
            let az = d.y.atan2(d.x);
            let el = d.z.atan2((d.x * d.x + d.y * d.y).sqrt());
            let a = (((az + PI) / (2.0 * PI) * az_bins as f64) as usize).min(az_bins - 1);
            let e = (((el + 0.5 * PI) / PI * el_bins as f64) as usize).min(el_bins - 1);
            (a * el_bins + e, p.dist_sq(camera), i)
        })
        .collect();
    binned.sort_by(|x, y| {
        x.0.cmp(&y.0)
            .then(x.1.partial_cmp(&y.1).unwrap_or(std::cmp::Ordering::Equal))
            .then(x.2.cmp(&y.2))
    });
    let mut mask = vec![false; points.len()];
    let mut run_bin = usize::MAX;
    let mut run_kept = 0usize;
    for (bin, _, i) in binned {
        if bin != run_bin {
            run_bin = bin;
            run_kept = 0;
        }
        if run_kept < keep {
            mask[i] = true;
            run_kept += 1;
        }
    }
    mask
}

/// Indices of points inside the closed box.
pub fn crop(points: &[Vec3], b: &Aabb) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| b.contains(**p))
        .map(|(i, _)| i)
        .collect()
}
