//! Procedural clothed humanoids and their nude-body proxies.
//!
//! A capsule skeleton (torso, head, arms, legs, feet) is posed with random
//! joint angles. The body adds per-part clothing offsets to the capsule radii;
//! the proxy keeps the bare radii. Both surfaces are extracted from their
//! union distance fields on the same lattice and share one normalisation
//! (height 1.8, bounding box centred at the origin).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{marching_cubes, ScalarGrid, TriMesh};
use crate::error::Result;
use crate::geom::{self, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HumanoidParams {
    pub height: f64,
    /// Largest clothing offset added to a capsule radius (before scaling).
    pub clothing_offset_max: f64,
    /// Lattice spacing for surface extraction (before scaling).
    pub cell: f64,
}

impl Default for HumanoidParams {
    fn default() -> Self {
        Self {
            height: 1.8,
            clothing_offset_max: 0.04,
            cell: 0.015,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HumanoidPair {
    pub body: TriMesh,
    pub prior: TriMesh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Head,
    Torso,
    UpperArm,
    Forearm,
    Hand,
    Thigh,
    Shin,
    Foot,
}

#[derive(Clone, Copy, Debug)]
struct Capsule {
    a: Vec3,
    b: Vec3,
    radius: f64,
    part: Part,
}

impl Capsule {
    fn distance(&self, p: Vec3) -> f64 {
        let ab = geom::sub(self.b, self.a);
        let len2 = geom::dot(ab, ab);
        let t = if len2 > 0.0 {
            (geom::dot(geom::sub(p, self.a), ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        geom::norm(geom::sub(p, geom::lerp(self.a, self.b, t))) - self.radius
    }
}

/// Rotation of `v` about unit `axis` by `angle` radians.
fn rotate(v: Vec3, axis: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    let k = geom::cross(axis, v);
    let d = geom::dot(axis, v);
    [0, 1, 2].map(|i| v[i] * c + k[i] * s + axis[i] * d * (1.0 - c))
}

struct Skeleton {
    capsules: Vec<Capsule>,
}

fn pose(rng: &mut ChaCha8Rng) -> Skeleton {
    let girth = rng.gen_range(0.9..1.15);
    let deg = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.gen_range(lo..hi).to_radians();
    let mut caps = vec![
        Capsule { a: [0.0, 0.95, 0.0], b: [0.0, 1.18, 0.0], radius: 0.12 * girth, part: Part::Torso },
        Capsule { a: [0.0, 1.18, 0.0], b: [0.0, 1.40, 0.0], radius: 0.14 * girth, part: Part::Torso },
        Capsule { a: [0.0, 1.40, 0.0], b: [0.0, 1.52, 0.0], radius: 0.05 * girth, part: Part::Head },
        Capsule { a: [0.0, 1.62, 0.01], b: [0.0, 1.66, 0.0], radius: 0.1, part: Part::Head },
    ];
    let (ex, ey, ez) = ([1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]);
    for side in [1.0, -1.0] {
        // arm: hang down, abduct sideways, swing forward/back, bend the elbow
        let shoulder = [0.19 * side, 1.40, 0.0];
        let abduct = deg(rng, 10.0, 70.0);
        let swing = deg(rng, -30.0, 45.0);
        let elbow = deg(rng, 0.0, 70.0);
        let mut up = rotate(ey, ez, abduct * side);
        up = rotate(up, ex, -swing);
        let elbow_pos = geom::add(shoulder, geom::scale(up, 0.29));
        let fore = rotate(up, geom::normalize(geom::cross(up, ez)).unwrap_or(ex), -elbow * side);
        let wrist = geom::add(elbow_pos, geom::scale(fore, 0.26));
        let hand = geom::add(wrist, geom::scale(fore, 0.06));
        caps.push(Capsule { a: shoulder, b: elbow_pos, radius: 0.048 * girth, part: Part::UpperArm });
        caps.push(Capsule { a: elbow_pos, b: wrist, radius: 0.038 * girth, part: Part::Forearm });
        caps.push(Capsule { a: hand, b: hand, radius: 0.045, part: Part::Hand });

        // leg: spread, swing, bend the knee backwards
        let hip = [0.09 * side, 0.93, 0.0];
        let spread = deg(rng, 0.0, 12.0);
        let swing = deg(rng, -15.0, 25.0);
        let knee = deg(rng, 0.0, 30.0);
        let mut thigh = rotate(ey, ez, spread * side);
        thigh = rotate(thigh, ex, -swing);
        let knee_pos = geom::add(hip, geom::scale(thigh, 0.44));
        let shin = rotate(thigh, ex, knee);
        let ankle = geom::add(knee_pos, geom::scale(shin, 0.43));
        let toe = geom::add(ankle, [0.0, -0.02, 0.13]);
        caps.push(Capsule { a: hip, b: knee_pos, radius: 0.075 * girth, part: Part::Thigh });
        caps.push(Capsule { a: knee_pos, b: ankle, radius: 0.055 * girth, part: Part::Shin });
        caps.push(Capsule { a: ankle, b: toe, radius: 0.04, part: Part::Foot });
    }
    Skeleton { capsules: caps }
}

struct Outfit {
    offsets: [f64; 8],
    colors: [Vec3; 8],
    stripe: Vec3,
    stripe_period: f64,
    sleeves: bool,
}

fn part_slot(p: Part) -> usize {
    p as usize
}

fn outfit(rng: &mut ChaCha8Rng, max_offset: f64) -> Outfit {
    let color = |rng: &mut ChaCha8Rng| [0, 1, 2].map(|_| rng.gen_range(0.05..0.95));
    let skin_tone = rng.gen_range(0.35..0.9);
    let skin = [skin_tone, skin_tone * 0.78, skin_tone * 0.62];
    let shirt = color(rng);
    let pants = color(rng);
    let shoes = color(rng);
    let hair = [0.1, 0.08, 0.05].map(|c: f64| c * rng.gen_range(0.5..3.0));
    let sleeves = rng.gen_bool(0.5);
    let shirt_off = rng.gen_range(0.01..max_offset.max(0.011));
    let pants_off = rng.gen_range(0.01..max_offset.max(0.011));
    let mut offsets = [0.0; 8];
    let mut colors = [skin; 8];
    offsets[part_slot(Part::Head)] = 0.005;
    colors[part_slot(Part::Head)] = hair;
    offsets[part_slot(Part::Torso)] = shirt_off;
    colors[part_slot(Part::Torso)] = shirt;
    offsets[part_slot(Part::UpperArm)] = shirt_off * 0.6;
    colors[part_slot(Part::UpperArm)] = shirt;
    if sleeves {
        offsets[part_slot(Part::Forearm)] = shirt_off * 0.4;
        colors[part_slot(Part::Forearm)] = shirt;
    }
    offsets[part_slot(Part::Thigh)] = pants_off;
    colors[part_slot(Part::Thigh)] = pants;
    offsets[part_slot(Part::Shin)] = pants_off * 0.7;
    colors[part_slot(Part::Shin)] = pants;
    offsets[part_slot(Part::Foot)] = 0.012;
    colors[part_slot(Part::Foot)] = shoes;
    Outfit {
        offsets,
        colors,
        stripe: color(rng),
        stripe_period: rng.gen_range(0.06..0.14),
        sleeves,
    }
}

fn union_sdf(caps: &[Capsule], offsets: Option<&[f64; 8]>, p: Vec3) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in caps.iter().enumerate() {
        let off = offsets.map_or(0.0, |o| o[part_slot(c.part)]);
        let d = c.distance(p) - off;
        if d < best.0 {
            best = (d, i);
        }
    }
    best
}

fn extract(caps: &[Capsule], offsets: Option<&[f64; 8]>, lo: Vec3, dims: [usize; 3], cell: f64) -> Result<TriMesh> {
    let grid = ScalarGrid::sample(dims, lo, cell, |p| -union_sdf(caps, offsets, p).0);
    marching_cubes(&grid, 0.0)
}

/// Deterministic clothed body and nude proxy for `seed`.
pub fn synth_humanoid(seed: u64, params: &HumanoidParams) -> Result<HumanoidPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skeleton = pose(&mut rng);
    let outfit = outfit(&mut rng, params.clothing_offset_max);
    let caps = &skeleton.capsules;

    let margin = 0.2 + params.clothing_offset_max + 2.0 * params.cell;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in caps {
        for p in [c.a, c.b] {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d] - margin);
                hi[d] = hi[d].max(p[d] + margin);
            }
        }
    }
    let dims = [0, 1, 2].map(|d| ((hi[d] - lo[d]) / params.cell).ceil() as usize + 1);
    let mut body = extract(caps, Some(&outfit.offsets), lo, dims, params.cell)?.largest_component();
    let mut prior = extract(caps, None, lo, dims, params.cell)?.largest_component();

    let colors = body
        .vertices
        .iter()
        .map(|&p| {
            let part = caps[union_sdf(caps, Some(&outfit.offsets), p).1].part;
            let base = outfit.colors[part_slot(part)];
            let striped = matches!(part, Part::Torso)
                || (outfit.sleeves && matches!(part, Part::UpperArm | Part::Forearm));
            if striped && (p[1] / outfit.stripe_period).rem_euclid(1.0) < 0.3 {
                outfit.stripe
            } else {
                base
            }
        })
        .collect();
    body.colors = Some(colors);

    let (blo, bhi) = body.bounds().expect("non-empty body");
    let s = params.height / (bhi[1] - blo[1]);
    let center = geom::scale(geom::add(blo, bhi), 0.5);
    let t = geom::scale(center, -s);
    body.scale_translate(s, t);
    prior.scale_translate(s, t);
    Ok(HumanoidPair { body, prior })
}
