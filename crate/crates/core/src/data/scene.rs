//! Procedural indoor scenes: a floor plane with primitive-shaped objects.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{category_names, Shape, FLOOR, LEXICON};
use crate::error::{ensure, Error, Result};
use crate::geometry::PointCloud;

pub const FEAT_DIM: usize = 3;
const MAX_ATTEMPTS: usize = 1000;
const MIN_OBJECT_POINTS: usize = 8;
const FOOTPRINT_GAP: f64 = 0.05;
const COLOR_JITTER: f32 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_points: usize,
    pub room_extent: [f64; 3],
    /// Inclusive range of object counts.
    pub object_count: (usize, usize),
}

impl SceneSpec {
    pub fn new(seed: u64, n_points: usize) -> Self {
        Self {
            seed,
            n_points,
            room_extent: [6.0, 5.0, 3.0],
            object_count: (3, 6),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_points >= 256, "scenes need at least 256 points, got {}", self.n_points);
        ensure!(self.room_extent.iter().all(|&e| e > 0.0 && e.is_finite()), "room extents must be positive");
        ensure!(self.object_count.0 <= self.object_count.1, "object count range is empty");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub instance_id: i32,
    pub category: String,
    pub shape: Shape,
    /// Center of the footprint on the floor.
    pub center: [f64; 2],
    /// Extent along x, y and z.
    pub size: [f64; 3],
}

impl SceneObject {
    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub seed: u64,
    pub room_extent: [f64; 3],
    pub cloud: PointCloud,
    /// Category table; category ids index into it.
    pub categories: Vec<String>,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn instances_of(&self, category: &str) -> Vec<&SceneObject> {
        self.objects.iter().filter(|o| o.category == category).collect()
    }

    pub fn point_count(&self, instance: i32) -> usize {
        self.cloud
            .instance_ids()
            .map_or(0, |ids| ids.iter().filter(|&&i| i == instance).count())
    }
}

pub fn scene_id(seed: u64) -> String {
    format!("scene_{seed:08}")
}

fn overlaps(a: &([f64; 2], [f64; 2]), b: &([f64; 2], [f64; 2])) -> bool {
    (0..2).all(|k| (a.0[k] - b.0[k]).abs() < (a.1[k] + b.1[k]) / 2.0 + FOOTPRINT_GAP)
}

fn footprint(shape: Shape, size: [f64; 3]) -> [f64; 2] {
    match shape {
        Shape::Box => [size[0], size[1]],
        _ => [size[0], size[0]],
    }
}

fn surface_area(shape: Shape, s: [f64; 3]) -> f64 {
    let r = s[0] / 2.0;
    match shape {
        Shape::Box => s[0] * s[1] + 2.0 * s[2] * (s[0] + s[1]),
        Shape::Cylinder => PI * r * r + 2.0 * PI * r * s[2],
        Shape::Sphere => 4.0 * PI * r * r,
        Shape::Cone => PI * r * (r * r + s[2] * s[2]).sqrt(),
    }
}

/// Uniform sample on the visible surface (everything but the base).
fn sample_surface(rng: &mut ChaCha8Rng, obj: &SceneObject) -> [f64; 3] {
    let [cx, cy] = obj.center;
    let s = obj.size;
    let r = s[0] / 2.0;
    match obj.shape {
        Shape::Box => {
            let top = s[0] * s[1];
            let side_x = s[1] * s[2];
            let side_y = s[0] * s[2];
            let pick = rng.random::<f64>() * (top + 2.0 * side_x + 2.0 * side_y);
            let (u, v): (f64, f64) = (rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            if pick < top {
                [cx + u * s[0], cy + v * s[1], s[2]]
            } else if pick < top + 2.0 * side_x {
                let sign = if pick < top + side_x { -0.5 } else { 0.5 };
                [cx + sign * s[0], cy + u * s[1], (v + 0.5) * s[2]]
            } else {
                let sign = if pick < top + 2.0 * side_x + side_y { -0.5 } else { 0.5 };
                [cx + u * s[0], cy + sign * s[1], (v + 0.5) * s[2]]
            }
        }
        Shape::Cylinder => {
            let top = PI * r * r;
            let side = 2.0 * PI * r * s[2];
            let theta = rng.random::<f64>() * 2.0 * PI;
            if rng.random::<f64>() * (top + side) < top {
                let rho = r * rng.random::<f64>().sqrt();
                [cx + rho * theta.cos(), cy + rho * theta.sin(), s[2]]
            } else {
                [cx + r * theta.cos(), cy + r * theta.sin(), rng.random::<f64>() * s[2]]
            }
        }
        Shape::Sphere => loop {
            let v: [f64; 3] = [
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-6 && n <= 1.0 {
                break [cx + r * v[0] / n, cy + r * v[1] / n, r + r * v[2] / n];
            }
        },
        Shape::Cone => {
            // Radial fraction from the apex; sqrt makes the lateral density uniform.
            let u = rng.random::<f64>().sqrt();
            let theta = rng.random::<f64>() * 2.0 * PI;
            [cx + r * u * theta.cos(), cy + r * u * theta.sin(), s[2] * (1.0 - u)]
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3]) -> [f32; 3] {
    base.map(|c| (c + (rng.random::<f32>() * 2.0 - 1.0) * COLOR_JITTER).clamp(0.0, 1.0))
}

fn pick_category(rng: &mut ChaCha8Rng, placed: &[SceneObject]) -> usize {
    // Repeat an existing category now and then so spatial relations have
    // something to disambiguate.
    if !placed.is_empty() && rng.random::<f64>() < 0.35 {
        let o = &placed[rng.random_range(0..placed.len())];
        return LEXICON.iter().position(|c| c.name == o.category).unwrap_or(1);
    }
    rng.random_range(1..LEXICON.len())
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [ex, ey, _] = spec.room_extent;
    let count = rng.random_range(spec.object_count.0..=spec.object_count.1);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let mut prints: Vec<([f64; 2], [f64; 2])> = Vec::with_capacity(count);
    for i in 0..count {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let ci = pick_category(&mut rng, &objects);
            let c = &LEXICON[ci];
            let size: [f64; 3] = std::array::from_fn(|a| rng.random_range(c.size_min[a]..=c.size_max[a]));
            let fp = footprint(c.shape, size);
            if fp[0] + 2.0 * FOOTPRINT_GAP >= ex || fp[1] + 2.0 * FOOTPRINT_GAP >= ey {
                continue;
            }
            let center = [
                rng.random_range(fp[0] / 2.0 + FOOTPRINT_GAP..ex - fp[0] / 2.0 - FOOTPRINT_GAP),
                rng.random_range(fp[1] / 2.0 + FOOTPRINT_GAP..ey - fp[1] / 2.0 - FOOTPRINT_GAP),
            ];
            let candidate = (center, fp);
            if prints.iter().any(|p| overlaps(p, &candidate)) {
                continue;
            }
            prints.push(candidate);
            objects.push(SceneObject {
                instance_id: i as i32 + 1,
                category: c.name.to_string(),
                shape: c.shape,
                center,
                size,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation {
                seed: spec.seed,
                reason: format!("could not place object {} after {MAX_ATTEMPTS} attempts", i + 1),
            });
        }
    }

    let floor_area = ex * ey - prints.iter().map(|(_, f)| f[0] * f[1]).sum::<f64>();
    let areas: Vec<f64> = objects.iter().map(|o| surface_area(o.shape, o.size)).collect();
    let total = floor_area + areas.iter().sum::<f64>();
    let n = spec.n_points;
    let per_object: Vec<usize> = areas
        .iter()
        .map(|a| ((n as f64 * a / total).round() as usize).max(MIN_OBJECT_POINTS))
        .collect();
    let object_points: usize = per_object.iter().sum();
    if object_points + MIN_OBJECT_POINTS > n {
        return Err(Error::Generation {
            seed: spec.seed,
            reason: format!("{n} points cannot cover {} objects and the floor", objects.len()),
        });
    }

    let mut coords = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * FEAT_DIM);
    let mut instance = Vec::with_capacity(n);
    let mut category = Vec::with_capacity(n);
    let floor_color = LEXICON[FLOOR].color;
    while coords.len() < n - object_points {
        let p = [rng.random::<f64>() * ex, rng.random::<f64>() * ey];
        if prints
            .iter()
            .any(|(c, f)| (p[0] - c[0]).abs() < f[0] / 2.0 && (p[1] - c[1]).abs() < f[1] / 2.0)
        {
            continue;
        }
        coords.push([p[0] as f32, p[1] as f32, 0.0]);
        feats.extend(jitter(&mut rng, floor_color));
        instance.push(0);
        category.push(FLOOR as i32);
    }
    for (obj, &m) in objects.iter().zip(&per_object) {
        let ci = LEXICON.iter().position(|c| c.name == obj.category).unwrap_or(FLOOR);
        for _ in 0..m {
            let p = sample_surface(&mut rng, obj);
            coords.push(p.map(|v| v as f32));
            feats.extend(jitter(&mut rng, LEXICON[ci].color));
            instance.push(obj.instance_id);
            category.push(ci as i32);
        }
    }
    let cloud = PointCloud::new(coords, feats, FEAT_DIM, Some(instance), Some(category))?;
    Ok(Scene {
        id: scene_id(spec.seed),
        seed: spec.seed,
        room_extent: spec.room_extent,
        cloud,
        categories: category_names(),
        objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn empty_room_is_all_floor() {
        let spec = SceneSpec {
            object_count: (0, 0),
            ..SceneSpec::new(1, 512)
        };
        let scene = generate_scene(&spec).unwrap();
        assert_eq!(scene.cloud.len(), 512);
        assert!(scene.cloud.instance_ids().unwrap().iter().all(|&i| i == 0));
        assert!(scene.cloud.coords().iter().all(|p| p[2] == 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::new(11, 1024);
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
    }

    #[test]
    fn three_objects_give_four_instances() {
        let spec = SceneSpec {
            object_count: (3, 3),
            ..SceneSpec::new(7, 2048)
        };
        let scene = generate_scene(&spec).unwrap();
        let ids: BTreeSet<i32> = scene.cloud.instance_ids().unwrap().iter().copied().collect();
        assert_eq!(ids.len(), 4);
        for o in &scene.objects {
            assert!(scene.point_count(o.instance_id) >= MIN_OBJECT_POINTS);
        }
    }

    #[test]
    fn impossible_placement_names_the_seed() {
        let spec = SceneSpec {
            room_extent: [0.5, 0.5, 3.0],
            object_count: (2, 2),
            ..SceneSpec::new(42, 512)
        };
        match generate_scene(&spec) {
            Err(Error::Generation { seed, .. }) => assert_eq!(seed, 42),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn points_lie_inside_the_room() {
        let scene = generate_scene(&SceneSpec::new(3, 1024)).unwrap();
        for p in scene.cloud.coords() {
            assert!(p[0] >= -0.01 && p[0] <= 6.01 && p[1] >= -0.01 && p[1] <= 5.01 && p[2] >= 0.0);
        }
    }

    #[test]
    fn footprints_do_not_overlap() {
        for seed in 0..20 {
            let scene = generate_scene(&SceneSpec::new(seed, 512)).unwrap();
            let prints: Vec<_> = scene.objects.iter().map(|o| (o.center, footprint(o.shape, o.size))).collect();
            for i in 0..prints.len() {
                for j in i + 1..prints.len() {
                    assert!(!overlaps(&prints[i], &prints[j]));
                }
            }
        }
    }
}
