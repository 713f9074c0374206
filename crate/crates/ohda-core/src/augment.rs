//! Object-aware augmentation: scene-object mixture with inverse-frequency
//! class sampling, collision merging into rigid groups, per-group local
//! transforms, and a simplified virtual scan (multi-camera depth visibility
//! plus sensor noise and dropout).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Aabb, Vec3};
use crate::rng::{self, tag};
use crate::scenegen::{ObjectBank, Scene, SceneObject};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    /// Objects mixed into a scene, inclusive range.
    pub mix_min: usize,
    pub mix_max: usize,
    /// Boxes collide when their IoU exceeds this.
    pub collision_iou: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Group yaw is uniform in [0, max_yaw).
    pub max_yaw: f64,
    /// Planar translation per axis is uniform in [-max_translation, max_translation].
    pub max_translation: f64,
    pub max_retries: usize,
    pub vss_cameras: usize,
    pub vss_az_bins: usize,
    pub vss_el_bins: usize,
    pub vss_noise_sigma: f64,
    pub vss_dropout: f64,
}

impl Default for AugmentParams {
    fn default() -> AugmentParams {
        AugmentParams {
            mix_min: 2,
            mix_max: 4,
            collision_iou: 0.01,
            scale_lo: 0.9,
            scale_hi: 1.1,
            max_yaw: std::f64::consts::TAU,
            max_translation: 1.0,
            max_retries: 40,
            vss_cameras: 4,
            vss_az_bins: 128,
            vss_el_bins: 48,
            vss_noise_sigma: 0.01,
            vss_dropout: 0.1,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi) {
            return Err(Error::InvalidArgument(format!(
                "scale range [{}, {}] invalid",
                self.scale_lo, self.scale_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.collision_iou) {
            return Err(Error::InvalidArgument(format!(
                "collision iou {} outside [0, 1]",
                self.collision_iou
            )));
        }
        if !(0.0..1.0).contains(&self.vss_dropout) {
            return Err(Error::InvalidArgument(format!(
                "vss dropout {} outside [0, 1)",
                self.vss_dropout
            )));
        }
        if self.mix_min > self.mix_max {
            return Err(Error::InvalidArgument(format!(
                "mix range [{}, {}] invalid",
                self.mix_min, self.mix_max
            )));
        }
        if self.max_yaw < 0.0 || self.max_translation < 0.0 || self.vss_noise_sigma < 0.0 {
            return Err(Error::InvalidArgument(
                "negative yaw, translation, or noise bound".into(),
            ));
        }
        if self.vss_cameras == 0 || self.vss_az_bins == 0 || self.vss_el_bins == 0 {
            return Err(Error::InvalidArgument(
                "virtual scan needs at least one camera and one bin per axis".into(),
            ));
        }
        Ok(())
    }
}

/// Sampling probabilities inversely proportional to class frequencies.
pub fn inverse_freq_sampler(frequencies: &[f64]) -> Result<Vec<f64>> {
    if frequencies.is_empty() {
        return Err(Error::InvalidArgument("no class frequencies".into()));
    }
    if let Some(&bad) = frequencies.iter().find(|&&f| f <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "non-positive class frequency {bad}"
        )));
    }
    let inv: Vec<f64> = frequencies.iter().map(|f| 1.0 / f).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|v| v / total).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MixStats {
    pub requested: usize,
    pub placed: usize,
    pub skipped: usize,
}

fn weighted_pick(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let mut pick = rng.gen::<f64>();
    for (i, p) in probs.iter().enumerate() {
        if pick < *p {
            return i;
        }
        pick -= p;
    }
    probs.len() - 1
}

/// Axis-aligned cover of a box rotated about the vertical axis through its
/// own center.
fn yawed_cover(b: &Aabb, yaw: f64) -> Aabb {
    let (s, c) = yaw.sin_cos();
    let w = c.abs() * b.size.x + s.abs() * b.size.y;
    let d = s.abs() * b.size.x + c.abs() * b.size.y;
    Aabb::new(b.center, Vec3::new(w, d, b.size.z))
}

/// Mix bank objects into the scene: classes drawn inversely to frequency,
/// uniform floor position, uniform yaw. Placements colliding with any
/// existing box after `max_retries` attempts are skipped and counted.
pub fn mix_objects(
    scene: &Scene,
    bank: &ObjectBank,
    params: &AugmentParams,
    seed: u64,
) -> Result<(Scene, MixStats)> {
    params.validate()?;
    let mut rng = rng::stream(seed, &[tag::MIX]);
    let mut out = scene.clone();
    let requested = if params.mix_max == 0 {
        0
    } else {
        rng.gen_range(params.mix_min..=params.mix_max)
    };
    let mut stats = MixStats {
        requested,
        placed: 0,
        skipped: 0,
    };
    if requested == 0 || bank.is_empty() {
        stats.skipped = requested;
        return Ok((out, stats));
    }
    let probs = inverse_freq_sampler(&bank.frequencies)?;
    // Mixed-in objects get the same point support as a typical scene object.
    let quota = if scene.objects.is_empty() {
        128
    } else {
        let total: usize = scene.objects.iter().map(|o| o.point_indices.len()).sum();
        (total / scene.objects.len()).clamp(24, 512)
    };
    let room = out.room_bounds;

    for _ in 0..requested {
        let class_id = weighted_pick(&probs, &mut rng);
        if bank.classes[class_id].is_empty() {
            stats.skipped += 1;
            continue;
        }
        let proto = &bank.classes[class_id][rng.gen_range(0..bank.classes[class_id].len())];
        let yaw = if params.max_yaw > 0.0 {
            rng.gen_range(0.0..params.max_yaw)
        } else {
            0.0
        };
        let cover = yawed_cover(&proto.bbox, yaw);
        let lo_x = room.min_corner().x + 0.5 * cover.size.x;
        let hi_x = room.max_corner().x - 0.5 * cover.size.x;
        let lo_y = room.min_corner().y + 0.5 * cover.size.y;
        let hi_y = room.max_corner().y - 0.5 * cover.size.y;
        if lo_x > hi_x || lo_y > hi_y || cover.size.z > room.size.z {
            stats.skipped += 1;
            continue;
        }
        let mut accepted = None;
        for _ in 0..params.max_retries {
            let x = rng.gen_range(lo_x..=hi_x);
            let y = rng.gen_range(lo_y..=hi_y);
            let bbox = Aabb::new(
                Vec3::new(x, y, out.floor_z + 0.5 * cover.size.z),
                cover.size,
            );
            if out
                .objects
                .iter()
                .all(|o| geometry::iou(&o.bbox, &bbox) <= params.collision_iou)
            {
                accepted = Some(bbox);
                break;
            }
        }
        let Some(bbox) = accepted else {
            stats.skipped += 1;
            continue;
        };
        let offset = Vec3::new(bbox.center.x, bbox.center.y, out.floor_z);
        let start = out.points.len();
        for k in 0..quota {
            let idx = if k < proto.points.len() {
                k
            } else {
                rng.gen_range(0..proto.points.len())
            };
            out.points.push(proto.points[idx].rotate_yaw(yaw).add(offset));
        }
        out.objects.push(SceneObject {
            class_id,
            bbox,
            point_indices: (start..start + quota).collect(),
        });
        stats.placed += 1;
    }
    Ok((out, stats))
}

/// A rigid-motion group of objects produced by collision merging.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedGroup {
    /// Scene object indices, ascending.
    pub members: Vec<usize>,
    pub cover: Aabb,
}

/// Iteratively merge colliding groups (cover-box IoU > 0.01) until no pair
/// collides. Labels and per-object boxes are untouched; groups only tie
/// objects together for rigid local augmentation.
pub fn merge_collided(scene: &Scene) -> Vec<MergedGroup> {
    let mut groups: Vec<MergedGroup> = scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| MergedGroup {
            members: vec![i],
            cover: o.bbox,
        })
        .collect();
    loop {
        let mut merged_any = false;
        'scan: for i in 0..groups.len() {
            for j in i + 1..groups.len() {
                if geometry::iou(&groups[i].cover, &groups[j].cover) > 0.01 {
                    let other = groups.remove(j);
                    groups[i].members.extend(other.members);
                    groups[i].members.sort_unstable();
                    groups[i].cover =
                        geometry::cover_box(&[groups[i].cover, other.cover]).expect("two boxes");
                    merged_any = true;
                    break 'scan;
                }
            }
        }
        if !merged_any {
            return groups;
        }
    }
}

/// Candidate rigid transform of one group: uniform scale `s` about the cover
/// center, yaw about the vertical through it, planar translation, then a
/// vertical snap of the new cover onto the floor. Returns transformed member
/// boxes, transformed member points (index, position), and the new cover.
pub(crate) fn group_candidate(
    scene: &Scene,
    group: &MergedGroup,
    s: f64,
    yaw: f64,
    translation: Vec3,
) -> (Vec<(usize, Aabb)>, Vec<(usize, Vec3)>, Aabb) {
    let c = group.cover.center;
    let map = |p: Vec3, extra_z: f64| {
        p.sub(c)
            .scale(s)
            .rotate_yaw(yaw)
            .add(c)
            .add(translation)
            .add(Vec3::new(0.0, 0.0, extra_z))
    };
    let mut boxes: Vec<(usize, Aabb)> = group
        .members
        .iter()
        .map(|&m| {
            let corners = scene.objects[m].bbox.corners();
            let mapped: Vec<Aabb> = corners
                .iter()
                .map(|&q| Aabb::new(map(q, 0.0), Vec3::ZERO))
                .collect();
            (m, geometry::cover_box(&mapped).expect("eight corners"))
        })
        .collect();
    let cover = geometry::cover_box(&boxes.iter().map(|(_, b)| *b).collect::<Vec<_>>())
        .expect("nonempty group");
    let dz = scene.floor_z - cover.min_corner().z;
    for (_, b) in &mut boxes {
        *b = b.translate(Vec3::new(0.0, 0.0, dz));
    }
    let cover = cover.translate(Vec3::new(0.0, 0.0, dz));
    let points: Vec<(usize, Vec3)> = group
        .members
        .iter()
        .flat_map(|&m| scene.objects[m].point_indices.iter())
        .map(|&i| (i, map(scene.points[i], dz)))
        .collect();
    (boxes, points, cover)
}

/// Independently scale, rotate and translate each merged group on the floor.
/// A transform is dropped (group left untouched) when its new cover collides
/// with another group's cover or leaves the room.
pub fn local_augment(
    scene: &Scene,
    groups: &[MergedGroup],
    params: &AugmentParams,
    seed: u64,
) -> Scene {
    let mut rng = rng::stream(seed, &[tag::LOCAL_AUG]);
    let mut out = scene.clone();
    let mut covers: Vec<Aabb> = groups.iter().map(|g| g.cover).collect();
    for (gi, group) in groups.iter().enumerate() {
        let s = if params.scale_lo < params.scale_hi {
            rng.gen_range(params.scale_lo..=params.scale_hi)
        } else {
            params.scale_lo
        };
        let yaw = if params.max_yaw > 0.0 {
            rng.gen_range(0.0..params.max_yaw)
        } else {
            0.0
        };
        let t = if params.max_translation > 0.0 {
            Vec3::new(
                rng.gen_range(-params.max_translation..=params.max_translation),
                rng.gen_range(-params.max_translation..=params.max_translation),
                0.0,
            )
        } else {
            Vec3::ZERO
        };
        if s == 1.0 && yaw == 0.0 && t == Vec3::ZERO {
            continue;
        }
        let live = MergedGroup {
            members: group.members.clone(),
            cover: covers[gi],
        };
        let (boxes, points, cover) = group_candidate(&out, &live, s, yaw, t);
        let inside = out.room_bounds.contains_box(&Aabb::new(
            cover.center,
            cover.size.sub(Vec3::splat(1e-9)),
        ));
        let clear = covers
            .iter()
            .enumerate()
            .all(|(h, c)| h == gi || geometry::iou(c, &cover) <= params.collision_iou);
        if !(inside && clear) {
            continue;
        }
        for (m, b) in boxes {
            out.objects[m].bbox = b;
        }
        for (i, p) in points {
            out.points[i] = p;
        }
        covers[gi] = cover;
    }
    out
}

/// Simplified virtual scan: depth visibility from cameras on a ring at eye
/// height, then Gaussian sensor noise and independent point dropout. Object
/// boxes and classes are unchanged; point memberships are remapped.
pub fn virtual_scan(scene: &Scene, params: &AugmentParams, seed: u64) -> Result<Scene> {
    params.validate()?;
    let mut rng = rng::stream(seed, &[tag::SCAN]);
    if scene.points.is_empty() {
        return Ok(scene.clone());
    }
    let room = scene.room_bounds;
    let radius = 0.3 * room.size.x.min(room.size.y);
    let eye = scene.floor_z + 1.5;
    let mut visible = vec![false; scene.points.len()];
    for k in 0..params.vss_cameras {
        let angle = std::f64::consts::TAU * k as f64 / params.vss_cameras as f64;
        let cam = Vec3::new(
            room.center.x + radius * angle.cos(),
            room.center.y + radius * angle.sin(),
            eye,
        );
        let mask = geometry::visible_mask(
            &scene.points,
            cam,
            params.vss_az_bins,
            params.vss_el_bins,
            1,
        );
        for (v, m) in visible.iter_mut().zip(mask) {
            *v |= m;
        }
    }
    if params.vss_dropout > 0.0 {
        for v in visible.iter_mut() {
            *v &= rng.gen::<f64>() >= params.vss_dropout;
        }
    }
    let mut out = scene.retain_points(&visible);
    if params.vss_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.vss_noise_sigma)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for p in &mut out.points {
            *p = p.add(Vec3::new(
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            ));
        }
    }
    Ok(out)
}

/// Full augmentation chain for one training sample: mixture, collision
/// merge, local transforms, then the virtual scan. The two stages can be
/// toggled independently.
pub fn augment_scene(
    scene: &Scene,
    bank: &ObjectBank,
    params: &AugmentParams,
    use_oaa: bool,
    use_vss: bool,
    seed: u64,
) -> Result<Scene> {
    let mut out = scene.clone();
    if use_oaa {
        let (mixed, _) = mix_objects(&out, bank, params, seed)?;
        let groups = merge_collided(&mixed);
        out = local_augment(&mixed, &groups, params, seed);
    }
    if use_vss {
        out = virtual_scan(&out, params, seed)?;
    }
    Ok(out)
}
