//! Toy indoor scenes with a configurable source/target domain gap.
//!
//! A domain is described by per-class shape statistics plus a handful of
//! realism knobs (placement regularity, class imbalance, clutter, sensor
//! noise, dropout, occlusion). The source preset is clean and regular, the
//! target preset is noisy and skewed, and every knob is independent so tests
//! can isolate one gap at a time.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Aabb, Vec3};
use crate::parallel;
use crate::rng::{self, tag};

/// Surface points stored per bank prototype.
const PROTO_POINTS: usize = 512;
/// Fraction of the scene point budget reserved for the bare floor.
const FLOOR_SHARE_DIV: usize = 8;
/// Minimum surface points an object instance receives.
const MIN_OBJECT_POINTS: usize = 24;
/// Placement attempts per object before it is skipped.
const MAX_PLACE_RETRIES: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    /// Plain box; proportions distinguish beds from cabinets.
    Box,
    /// Pedestal seat with a backrest along one edge.
    LShape,
    /// Table top carried by four corner legs.
    SlabOnLegs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub primitive: Primitive,
    /// Mean extents in meters, canonical pose.
    pub size_mean: [f64; 3],
    /// Relative half-range of per-prototype size variation.
    pub size_spread: f64,
    /// Domain-level multiplier on all extents (per-class size bias knob).
    pub size_scale: f64,
    /// Relative placement frequency.
    pub frequency: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Placement {
    /// Cells of a regular floor grid, each offset by up to `jitter` meters.
    Grid { jitter: f64 },
    /// Uniform random floor positions.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub classes: Vec<ClassSpec>,
    /// Room extents in meters; the room is centered on the origin in x, y.
    pub room: [f64; 3],
    pub floor_z: f64,
    pub points_per_scene: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub placement: Placement,
    /// Unlabeled wall and distractor points added per scene.
    pub clutter_points: usize,
    /// Isotropic Gaussian sensor noise, meters.
    pub noise_sigma: f64,
    /// Independent per-point drop probability.
    pub dropout: f64,
    /// Single-viewpoint depth occlusion on generated points.
    pub occlusion: bool,
    pub prototypes_per_class: usize,
}

fn shared_classes() -> Vec<ClassSpec> {
    let table = [
        ("bed", Primitive::Box, [1.9, 1.5, 0.55]),
        ("chair", Primitive::LShape, [0.55, 0.5, 0.85]),
        ("table", Primitive::SlabOnLegs, [1.3, 0.8, 0.72]),
        ("cabinet", Primitive::Box, [0.6, 0.45, 1.6]),
    ];
    table
        .into_iter()
        .map(|(name, primitive, size_mean)| ClassSpec {
            name: name.to_string(),
            primitive,
            size_mean,
            size_spread: 0.08,
            size_scale: 1.0,
            frequency: 1.0,
        })
        .collect()
}

impl DomainSpec {
    /// Clean, regular, class-imbalanced domain: the "synthetic" side.
    pub fn source_default() -> DomainSpec {
        let mut classes = shared_classes();
        for (c, f) in classes.iter_mut().zip([0.45, 0.3, 0.15, 0.1]) {
            c.frequency = f;
        }
        DomainSpec {
            classes,
            room: [6.0, 6.0, 3.0],
            floor_z: 0.0,
            points_per_scene: 2048,
            objects_min: 5,
            objects_max: 9,
            placement: Placement::Grid { jitter: 0.15 },
            clutter_points: 0,
            noise_sigma: 0.0,
            dropout: 0.0,
            occlusion: false,
            prototypes_per_class: 8,
        }
    }

    /// Jittered, noisy, cluttered domain with per-class size bias: the
    /// "real" side.
    pub fn target_default() -> DomainSpec {
        let mut spec = DomainSpec::source_default();
        for (c, scale) in spec.classes.iter_mut().zip([1.25, 0.85, 1.2, 0.8]) {
            c.frequency = 0.25;
            c.size_scale = scale;
            c.size_spread = 0.12;
        }
        spec.placement = Placement::Uniform;
        spec.clutter_points = 256;
        spec.noise_sigma = 0.01;
        spec.dropout = 0.1;
        spec.occlusion = true;
        spec
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.frequency).collect()
    }

    pub fn room_bounds(&self) -> Aabb {
        Aabb::new(
            Vec3::new(0.0, 0.0, self.floor_z + 0.5 * self.room[2]),
            Vec3::new(self.room[0], self.room[1], self.room[2]),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.classes.len()
            )));
        }
        for c in &self.classes {
            if c.frequency <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "class {:?} has non-positive frequency {}",
                    c.name, c.frequency
                )));
            }
            if c.size_scale <= 0.0 || c.size_mean.iter().any(|&s| s <= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "class {:?} has non-positive size",
                    c.name
                )));
            }
            if !(0.0..1.0).contains(&c.size_spread) {
                return Err(Error::InvalidArgument(format!(
                    "class {:?} size spread {} outside [0, 1)",
                    c.name, c.size_spread
                )));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "negative noise sigma {}",
                self.noise_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.objects_min < 3 || self.objects_max > 20 || self.objects_min > self.objects_max {
            return Err(Error::InvalidArgument(format!(
                "object count range [{}, {}] outside [3, 20]",
                self.objects_min, self.objects_max
            )));
        }
        if self.room.iter().any(|&r| r <= 0.0) {
            return Err(Error::InvalidArgument("non-positive room extent".into()));
        }
        if self.prototypes_per_class < 8 {
            return Err(Error::InvalidArgument(format!(
                "need at least 8 prototypes per class, got {}",
                self.prototypes_per_class
            )));
        }
        Ok(())
    }
}

/// One canonical-pose object: surface points plus the tight box around them.
/// Canonical pose is centered in x, y with min-z at 0.
#[derive(Clone, Debug)]
pub struct Prototype {
    pub class_id: usize,
    pub points: Vec<Vec3>,
    pub bbox: Aabb,
}

#[derive(Clone, Debug)]
pub struct ObjectBank {
    /// Prototypes grouped by class.
    pub classes: Vec<Vec<Prototype>>,
    pub frequencies: Vec<f64>,
}

impl ObjectBank {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.iter().all(|c| c.is_empty())
    }
}

/// Component boxes of a primitive of final extents `(w, d, h)`, canonical
/// pose. Their union always spans exactly the `(w, d, h)` box.
fn primitive_parts(primitive: Primitive, w: f64, d: f64, h: f64) -> Vec<Aabb> {
    match primitive {
        Primitive::Box => vec![Aabb::new(
            Vec3::new(0.0, 0.0, 0.5 * h),
            Vec3::new(w, d, h),
        )],
        Primitive::LShape => vec![
            // Pedestal seat over the full footprint.
            Aabb::new(Vec3::new(0.0, 0.0, 0.25 * h), Vec3::new(w, d, 0.5 * h)),
            // Backrest along the rear edge.
            Aabb::new(
                Vec3::new(0.0, -0.425 * d, 0.75 * h),
                Vec3::new(w, 0.15 * d, 0.5 * h),
            ),
        ],
        Primitive::SlabOnLegs => {
            let mut parts = vec![Aabb::new(
                Vec3::new(0.0, 0.0, 0.925 * h),
                Vec3::new(w, d, 0.15 * h),
            )];
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    parts.push(Aabb::new(
                        Vec3::new(sx * 0.46 * w, sy * 0.46 * d, 0.425 * h),
                        Vec3::new(0.08 * w, 0.08 * d, 0.85 * h),
                    ));
                }
            }
            parts
        }
    }
}

fn box_area(b: &Aabb) -> f64 {
    2.0 * (b.size.x * b.size.y + b.size.x * b.size.z + b.size.y * b.size.z)
}

/// Uniform point on the surface of one box.
fn sample_on_box(b: &Aabb, rng: &mut ChaCha8Rng) -> Vec3 {
    let s = b.size;
    let areas = [
        s.y * s.z,
        s.y * s.z,
        s.x * s.z,
        s.x * s.z,
        s.x * s.y,
        s.x * s.y,
    ];
    let total: f64 = areas.iter().sum();
    if total <= 0.0 {
        return b.center;
    }
    let mut pick = rng.gen::<f64>() * total;
    let mut face = 5;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let lo = b.min_corner();
    let hi = b.max_corner();
    let u = rng.gen::<f64>();
    let v = rng.gen::<f64>();
    match face {
        0 => Vec3::new(lo.x, lo.y + u * s.y, lo.z + v * s.z),
        1 => Vec3::new(hi.x, lo.y + u * s.y, lo.z + v * s.z),
        2 => Vec3::new(lo.x + u * s.x, lo.y, lo.z + v * s.z),
        3 => Vec3::new(lo.x + u * s.x, hi.y, lo.z + v * s.z),
        4 => Vec3::new(lo.x + u * s.x, lo.y + v * s.y, lo.z),
        _ => Vec3::new(lo.x + u * s.x, lo.y + v * s.y, hi.z),
    }
}

/// Uniform point on the union surface of several boxes, area weighted.
fn sample_on_parts(parts: &[Aabb], rng: &mut ChaCha8Rng) -> Vec3 {
    let total: f64 = parts.iter().map(box_area).sum();
    if total <= 0.0 {
        return parts.first().map_or(Vec3::ZERO, |b| b.center);
    }
    let mut pick = rng.gen::<f64>() * total;
    for b in parts {
        let a = box_area(b);
        if pick < a {
            return sample_on_box(b, rng);
        }
        pick -= a;
    }
    sample_on_box(parts.last().unwrap(), rng)
}

/// Deterministic prototype pool: `prototypes_per_class` shape variants per
/// class, each a fresh size draw around the class mean.
pub fn build_object_bank(spec: &DomainSpec, seed: u64) -> Result<ObjectBank> {
    spec.validate()?;
    let classes = spec
        .classes
        .iter()
        .enumerate()
        .map(|(c, class)| {
            (0..spec.prototypes_per_class)
                .map(|j| {
                    let mut rng = rng::stream(seed, &[tag::BANK, c as u64, j as u64]);
                    let draw = |rng: &mut ChaCha8Rng, mean: f64| {
                        mean * class.size_scale
                            * (1.0 + class.size_spread * rng.gen_range(-1.0..=1.0))
                    };
                    let w = draw(&mut rng, class.size_mean[0]);
                    let d = draw(&mut rng, class.size_mean[1]);
                    let h = draw(&mut rng, class.size_mean[2]);
                    let parts = primitive_parts(class.primitive, w, d, h);
                    let points = (0..PROTO_POINTS)
                        .map(|_| sample_on_parts(&parts, &mut rng))
                        .collect();
                    Prototype {
                        class_id: c,
                        points,
                        bbox: Aabb::new(Vec3::new(0.0, 0.0, 0.5 * h), Vec3::new(w, d, h)),
                    }
                })
                .collect()
        })
        .collect();
    Ok(ObjectBank {
        classes,
        frequencies: spec.frequencies(),
    })
}

/// One labeled object instance inside a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class_id: usize,
    pub bbox: Aabb,
    /// Indices into the scene point array.
    pub point_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub points: Vec<Vec3>,
    pub objects: Vec<SceneObject>,
    pub floor_z: f64,
    pub room_bounds: Aabb,
}

impl Scene {
    /// Scene restricted to the masked points; object boxes and classes stay,
    /// their point indices are remapped.
    pub fn retain_points(&self, keep: &[bool]) -> Scene {
        debug_assert_eq!(keep.len(), self.points.len());
        let mut remap = vec![usize::MAX; self.points.len()];
        let mut points = Vec::with_capacity(self.points.len());
        for (i, p) in self.points.iter().enumerate() {
            if keep[i] {
                remap[i] = points.len();
                points.push(*p);
            }
        }
        let objects = self
            .objects
            .iter()
            .map(|obj| SceneObject {
                class_id: obj.class_id,
                bbox: obj.bbox,
                point_indices: obj
                    .point_indices
                    .iter()
                    .filter(|&&i| keep[i])
                    .map(|&i| remap[i])
                    .collect(),
            })
            .collect();
        Scene {
            points,
            objects,
            floor_z: self.floor_z,
            room_bounds: self.room_bounds,
        }
    }
}

/// Exact quarter-turn about the vertical axis (no trig roundoff).
pub fn rotate_quarter(p: Vec3, k: usize) -> Vec3 {
    match k % 4 {
        0 => p,
        1 => Vec3::new(-p.y, p.x, p.z),
        2 => Vec3::new(-p.x, -p.y, p.z),
        _ => Vec3::new(p.y, -p.x, p.z),
    }
}

fn quarter_size(size: Vec3, k: usize) -> Vec3 {
    if k % 2 == 1 {
        Vec3::new(size.y, size.x, size.z)
    } else {
        size
    }
}

fn weighted_pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut pick = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if pick < *w {
            return i;
        }
        pick -= w;
    }
    weights.len() - 1
}

/// Integer split of `budget` proportional to `weights` with a per-entry
/// minimum. Sums to `budget` exactly; falls back to an equal split when the
/// budget cannot cover the minimums.
fn allocate(budget: usize, weights: &[f64], min_each: usize) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    if budget < min_each * n {
        let base = budget / n;
        let rem = budget % n;
        return (0..n).map(|i| base + usize::from(i < rem)).collect();
    }
    let total: f64 = weights.iter().sum();
    let mut alloc: Vec<usize> = if total > 0.0 {
        weights
            .iter()
            .map(|w| (budget as f64 * w / total) as usize)
            .collect()
    } else {
        vec![0; n]
    };
    // Hand out the rounding remainder, then enforce minimums by taking from
    // the largest entries.
    let mut short = budget - alloc.iter().sum::<usize>();
    let mut i = 0;
    while short > 0 {
        alloc[i % n] += 1;
        short -= 1;
        i += 1;
    }
    loop {
        let Some(low) = (0..n).find(|&i| alloc[i] < min_each) else {
            break;
        };
        let high = (0..n)
            .max_by(|&a, &b| alloc[a].cmp(&alloc[b]))
            .expect("nonempty");
        alloc[high] -= 1;
        alloc[low] += 1;
    }
    alloc
}

struct PlacedInstance {
    class_id: usize,
    proto_index: usize,
    yaw_quarters: usize,
    bbox: Aabb,
}

/// Place `count` sampled objects on the floor without collisions. Objects
/// that cannot be placed within the retry budget are skipped.
fn place_objects(
    domain: &DomainSpec,
    bank: &ObjectBank,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<PlacedInstance> {
    let freqs = domain.frequencies();
    let (room_w, room_d) = (domain.room[0], domain.room[1]);
    let grid_side = (count as f64).sqrt().ceil() as usize;
    let mut cells: Vec<(usize, usize)> = (0..grid_side)
        .flat_map(|i| (0..grid_side).map(move |j| (i, j)))
        .collect();
    cells.shuffle(rng);

    let mut placed: Vec<PlacedInstance> = Vec::new();
    for slot in 0..count {
        let class_id = weighted_pick(&freqs, rng);
        let proto_index = rng.gen_range(0..bank.classes[class_id].len());
        let proto = &bank.classes[class_id][proto_index];
        let yaw_quarters = rng.gen_range(0..4usize);
        let size = quarter_size(proto.bbox.size, yaw_quarters);
        if size.x > room_w || size.y > room_d {
            continue;
        }
        let (half_w, half_d) = (0.5 * size.x, 0.5 * size.y);
        let lo_x = -0.5 * room_w + half_w;
        let hi_x = 0.5 * room_w - half_w;
        let lo_y = -0.5 * room_d + half_d;
        let hi_y = 0.5 * room_d - half_d;
        for _ in 0..MAX_PLACE_RETRIES {
            let (mut x, mut y) = match domain.placement {
                Placement::Grid { jitter } => {
                    let (ci, cj) = cells[slot % cells.len()];
                    (
                        -0.5 * room_w + (ci as f64 + 0.5) * room_w / grid_side as f64
                            + rng.gen_range(-jitter..=jitter),
                        -0.5 * room_d + (cj as f64 + 0.5) * room_d / grid_side as f64
                            + rng.gen_range(-jitter..=jitter),
                    )
                }
                Placement::Uniform => (rng.gen_range(lo_x..=hi_x), rng.gen_range(lo_y..=hi_y)),
            };
            x = x.clamp(lo_x, hi_x);
            y = y.clamp(lo_y, hi_y);
            let bbox = Aabb::new(
                Vec3::new(x, y, domain.floor_z + 0.5 * size.z),
                size,
            );
            if placed
                .iter()
                .all(|p| geometry::iou(&p.bbox, &bbox) <= 0.01)
            {
                placed.push(PlacedInstance {
                    class_id,
                    proto_index,
                    yaw_quarters,
                    bbox,
                });
                break;
            }
        }
    }
    placed
}

/// Generate one scene. Pure function of `(domain, bank, seed)`.
pub fn gen_scene(domain: &DomainSpec, bank: &ObjectBank, seed: u64) -> Result<Scene> {
    domain.validate()?;
    if bank.class_count() != domain.class_count() {
        return Err(Error::InvalidArgument(format!(
            "bank has {} classes, domain has {}",
            bank.class_count(),
            domain.class_count()
        )));
    }
    let mut rng = rng::stream(seed, &[tag::SCENE]);
    let want = rng.gen_range(domain.objects_min..=domain.objects_max);
    let mut placed = place_objects(domain, bank, want, &mut rng);
    // Placement failures shrink the scene, but never below the minimum of 3.
    let mut rescue = 0;
    while placed.len() < 3 {
        rescue += 1;
        if rescue > 64 {
            return Err(Error::InvalidArgument(
                "room too small to place 3 objects".into(),
            ));
        }
        placed = place_objects(domain, bank, want, &mut rng);
    }

    let total = domain.points_per_scene;
    let clutter_budget = domain.clutter_points.min(total / 2);
    let floor_budget = total / FLOOR_SHARE_DIV;
    let object_budget = total.saturating_sub(clutter_budget + floor_budget);
    let areas: Vec<f64> = placed.iter().map(|p| box_area(&p.bbox)).collect();
    let per_object = allocate(object_budget, &areas, MIN_OBJECT_POINTS);

    let mut points: Vec<Vec3> = Vec::with_capacity(total);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(placed.len());
    for (inst, &quota) in placed.iter().zip(&per_object) {
        let proto = &bank.classes[inst.class_id][inst.proto_index];
        let start = points.len();
        let offset = Vec3::new(inst.bbox.center.x, inst.bbox.center.y, domain.floor_z);
        for k in 0..quota {
            // Without replacement while the prototype pool lasts.
            let idx = if k < proto.points.len() {
                k
            } else {
                rng.gen_range(0..proto.points.len())
            };
            let p = rotate_quarter(proto.points[idx], inst.yaw_quarters).add(offset);
            points.push(p);
        }
        // Keep the sampled prefix unbiased: prototypes are already random,
        // but shuffle so truncation never favors early surface draws.
        points[start..].shuffle(&mut rng);
        objects.push(SceneObject {
            class_id: inst.class_id,
            bbox: inst.bbox,
            point_indices: (start..start + quota).collect(),
        });
    }

    let (room_w, room_d, room_h) = (domain.room[0], domain.room[1], domain.room[2]);
    for _ in 0..floor_budget {
        points.push(Vec3::new(
            rng.gen_range(-0.5 * room_w..=0.5 * room_w),
            rng.gen_range(-0.5 * room_d..=0.5 * room_d),
            domain.floor_z,
        ));
    }

    if clutter_budget > 0 {
        let wall_budget = clutter_budget / 2;
        let blob_budget = clutter_budget - wall_budget;
        for _ in 0..wall_budget {
            let along = rng.gen_range(-0.5..=0.5);
            let z = domain.floor_z + rng.gen_range(0.0..=room_h);
            let p = match rng.gen_range(0..4) {
                0 => Vec3::new(-0.5 * room_w, along * room_d, z),
                1 => Vec3::new(0.5 * room_w, along * room_d, z),
                2 => Vec3::new(along * room_w, -0.5 * room_d, z),
                _ => Vec3::new(along * room_w, 0.5 * room_d, z),
            };
            points.push(p);
        }
        let blob_count = rng.gen_range(2..=4usize);
        let per_blob = allocate(blob_budget, &vec![1.0; blob_count], 0);
        for quota in per_blob {
            let size = Vec3::new(
                rng.gen_range(0.15..=0.4),
                rng.gen_range(0.15..=0.4),
                rng.gen_range(0.15..=0.4),
            );
            let mut bbox = None;
            for _ in 0..10 {
                let candidate = Aabb::new(
                    Vec3::new(
                        rng.gen_range(-0.5 * room_w + 0.2..=0.5 * room_w - 0.2),
                        rng.gen_range(-0.5 * room_d + 0.2..=0.5 * room_d - 0.2),
                        domain.floor_z + 0.5 * size.z,
                    ),
                    size,
                );
                if objects
                    .iter()
                    .all(|o| geometry::iou(&o.bbox, &candidate) <= 0.01)
                {
                    bbox = Some(candidate);
                    break;
                }
            }
            let Some(bbox) = bbox else { continue };
            for _ in 0..quota {
                points.push(sample_on_box(&bbox, &mut rng));
            }
        }
    }

    let mut scene = Scene {
        points,
        objects,
        floor_z: domain.floor_z,
        room_bounds: domain.room_bounds(),
    };

    // Realism passes: occlusion and dropout remove points, then sensor noise
    // perturbs the survivors. Ground-truth boxes stay clean geometry.
    let mut keep = vec![true; scene.points.len()];
    if domain.occlusion {
        let eye = domain.floor_z + 1.5;
        let cams = [
            Vec3::new(-0.5 * room_w + 0.3, -0.5 * room_d + 0.3, eye),
            Vec3::new(0.5 * room_w - 0.3, 0.5 * room_d - 0.3, eye),
        ];
        let mut visible = vec![false; scene.points.len()];
        for cam in cams {
            let mask = geometry::visible_mask(&scene.points, cam, 96, 32, 2);
            for (v, m) in visible.iter_mut().zip(mask) {
                *v |= m;
            }
        }
        for (k, v) in keep.iter_mut().zip(visible) {
            *k &= v;
        }
    }
    if domain.dropout > 0.0 {
        for k in keep.iter_mut() {
            *k &= rng.gen::<f64>() >= domain.dropout;
        }
    }
    if keep.iter().any(|&k| !k) {
        scene = scene.retain_points(&keep);
    }
    if domain.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, domain.noise_sigma)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for p in &mut scene.points {
            *p = p.add(Vec3::new(
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            ));
        }
    }

    Ok(scene)
}

/// Generate `count` scenes in parallel; scene `i` is keyed by `(seed, i)`.
pub fn gen_scenes(
    domain: &DomainSpec,
    bank: &ObjectBank,
    seed: u64,
    count: usize,
) -> Result<Vec<Scene>> {
    parallel::par_map_range(count, |i| {
        gen_scene(domain, bank, rng::stream_key(seed, &[tag::SCENE, i as u64]))
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub class_names: Vec<String>,
    pub frequencies: Vec<f64>,
    pub spec: DomainSpec,
    pub seed: u64,
    pub scene_count: usize,
}

#[derive(Serialize, Deserialize)]
struct BoxRecord {
    center: [f64; 3],
    size: [f64; 3],
}

impl BoxRecord {
    fn of(b: &Aabb) -> BoxRecord {
        BoxRecord {
            center: b.center.to_array(),
            size: b.size.to_array(),
        }
    }

    fn to_aabb(&self) -> Aabb {
        Aabb::new(Vec3::from_array(self.center), Vec3::from_array(self.size))
    }
}

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    class_id: usize,
    center: [f64; 3],
    size: [f64; 3],
    point_indices: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    points: Vec<[f64; 3]>,
    objects: Vec<ObjectRecord>,
    floor_z: f64,
    room_bounds: BoxRecord,
}

impl SceneRecord {
    fn of(scene: &Scene) -> SceneRecord {
        SceneRecord {
            points: scene.points.iter().map(|p| p.to_array()).collect(),
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    class_id: o.class_id,
                    center: o.bbox.center.to_array(),
                    size: o.bbox.size.to_array(),
                    point_indices: o.point_indices.clone(),
                })
                .collect(),
            floor_z: scene.floor_z,
            room_bounds: BoxRecord::of(&scene.room_bounds),
        }
    }

    fn into_scene(self) -> std::result::Result<Scene, String> {
        let points: Vec<Vec3> = self.points.into_iter().map(Vec3::from_array).collect();
        let mut objects = Vec::with_capacity(self.objects.len());
        for o in self.objects {
            if let Some(&bad) = o.point_indices.iter().find(|&&i| i >= points.len()) {
                return Err(format!(
                    "point index {bad} out of range for {} points",
                    points.len()
                ));
            }
            objects.push(SceneObject {
                class_id: o.class_id,
                bbox: Aabb::new(Vec3::from_array(o.center), Vec3::from_array(o.size)),
                point_indices: o.point_indices,
            });
        }
        Ok(Scene {
            points,
            objects,
            floor_z: self.floor_z,
            room_bounds: self.room_bounds.to_aabb(),
        })
    }
}

const META_FILE: &str = "meta.json";
const SCENES_FILE: &str = "scenes.jsonl";

/// Write a dataset directory: `meta.json` plus one JSON scene per line in
/// `scenes.jsonl`. Floats serialize as shortest round-trip decimals, so a
/// read-back is field-exact.
pub fn write_dataset(scenes: &[Scene], dir: &Path, meta: &DatasetMeta) -> Result<()> {
    if meta.scene_count != scenes.len() {
        return Err(Error::InvalidArgument(format!(
            "meta declares {} scenes, got {}",
            meta.scene_count,
            scenes.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join(META_FILE);
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;

    let scenes_path = dir.join(SCENES_FILE);
    let file = fs::File::create(&scenes_path).map_err(|e| Error::io(&scenes_path, e))?;
    let mut out = BufWriter::new(file);
    for scene in scenes {
        let line = serde_json::to_string(&SceneRecord::of(scene))?;
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(&scenes_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&scenes_path, e))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<Scene>, DatasetMeta)> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;

    let scenes_path = dir.join(SCENES_FILE);
    let file = fs::File::open(&scenes_path).map_err(|e| Error::io(&scenes_path, e))?;
    let mut scenes = Vec::with_capacity(meta.scene_count);
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let record = lineno + 1;
        let line = line.map_err(|e| Error::io(&scenes_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SceneRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: scenes_path.clone(),
            record,
            message: e.to_string(),
        })?;
        scenes.push(parsed.into_scene().map_err(|message| Error::Parse {
            path: scenes_path.clone(),
            record,
            message,
        })?);
    }
    if scenes.len() != meta.scene_count {
        return Err(Error::Parse {
            path: scenes_path,
            record: scenes.len(),
            message: format!(
                "dataset truncated: meta declares {} scenes, file holds {}",
                meta.scene_count,
                scenes.len()
            ),
        });
    }
    Ok((scenes, meta))
}
