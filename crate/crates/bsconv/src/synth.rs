//! Procedural labeled point-cloud scenes for desk-scale experiments.
//!
//! Every scene has a floor plane (class 0) spanning the extent, plus one
//! geometric primitive per remaining class — tilted planar patches, box
//! surfaces, or sphere surfaces — placed in disjoint lateral slots well
//! above the floor.  With zero noise the classes are geometrically
//! separable, so a small full-precision network can fit them; the noise
//! sigma is the difficulty knob.

use crate::error::SceneError;
use crate::points::Point;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub num_points: usize,
    pub num_classes: usize,
    /// Side length of the scene volume, meters.
    pub extent: f64,
    /// Relative weights for {planar patch, box, sphere} primitives.
    pub mix: [f64; 3],
    /// Positional noise sigma, meters.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_points: 2000,
            num_classes: 3,
            extent: 2.0,
            mix: [1.0, 1.0, 1.0],
            noise_sigma: 0.005,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.num_classes < 2 {
            return Err(SceneError::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.num_points == 0 {
            return Err(SceneError::InvalidConfig("num_points must be positive".into()));
        }
        if !(self.extent > 0.0) {
            return Err(SceneError::InvalidConfig("extent must be positive".into()));
        }
        if self.mix.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(SceneError::InvalidConfig("mix weights must be non-negative".into()));
        }
        if self.mix.iter().sum::<f64>() <= 0.0 {
            return Err(SceneError::InvalidConfig("mix weights must not all be zero".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(SceneError::InvalidConfig("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Points on a planar patch: `center + u·a + v·b` with u, v ∈ [−size, size].
pub fn sample_plane(
    center: [f64; 3],
    a: [f64; 3],
    b: [f64; 3],
    size: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            let u = (rng.random::<f64>() * 2.0 - 1.0) * size;
            let v = (rng.random::<f64>() * 2.0 - 1.0) * size;
            [
                center[0] + u * a[0] + v * b[0],
                center[1] + u * a[1] + v * b[1],
                center[2] + u * a[2] + v * b[2],
            ]
        })
        .collect()
}

/// Points on the surface of an axis-aligned box, faces weighted by area.
pub fn sample_box(
    center: [f64; 3],
    half: [f64; 3],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<[f64; 3]> {
    let areas = [
        half[1] * half[2], // ±x faces
        half[0] * half[2], // ±y faces
        half[0] * half[1], // ±z faces
    ];
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut axis = 2;
            for (i, &a) in areas.iter().enumerate() {
                if pick < 2.0 * a {
                    axis = i;
                    break;
                }
                pick -= 2.0 * a;
            }
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let mut p = [0.0; 3];
            for (j, v) in p.iter_mut().enumerate() {
                *v = if j == axis {
                    side * half[j]
                } else {
                    (rng.random::<f64>() * 2.0 - 1.0) * half[j]
                };
            }
            [center[0] + p[0], center[1] + p[1], center[2] + p[2]]
        })
        .collect()
}

/// Points uniform on a sphere surface.
pub fn sample_sphere(
    center: [f64; 3],
    radius: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            let d: [f64; 3] = UnitSphere.sample(rng);
            [
                center[0] + radius * d[0],
                center[1] + radius * d[1],
                center[2] + radius * d[2],
            ]
        })
        .collect()
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Generates one scene.  Deterministic in the config (the seed included);
/// every class gets at least one point.
pub fn generate_scene(config: &SceneConfig) -> Result<Vec<Point>, SceneError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let e = config.extent;
    let c = config.num_classes;

    // at least one point per class, floor takes the slack
    let share = (config.num_points / c).max(1);
    let mut counts = vec![share; c];
    counts[0] = config.num_points.saturating_sub(share * (c - 1)).max(1);

    let mix_total: f64 = config.mix.iter().sum();
    let mut points = Vec::with_capacity(counts.iter().sum());

    // floor: z = 0 plane over the full extent
    for _ in 0..counts[0] {
        points.push(Point::new(
            rng.random::<f64>() * e,
            rng.random::<f64>() * e,
            0.0,
            0,
        ));
    }

    // one primitive per remaining class, in disjoint x slots above the floor
    let slot_w = e / (c - 1) as f64;
    let size = slot_w.min(e) * 0.22;
    for k in 1..c {
        let center = [((k - 1) as f64 + 0.5) * slot_w, e / 2.0, 0.45 * e];
        let mut pick = rng.random::<f64>() * mix_total;
        let mut kind = 2;
        for (i, &w) in config.mix.iter().enumerate() {
            if pick < w {
                kind = i;
                break;
            }
            pick -= w;
        }
        let pts = match kind {
            0 => {
                let tilt = [
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    1.0,
                ];
                let normal = normalize(tilt);
                let a = normalize(cross(normal, [1.0, 0.0, 0.0]));
                let b = cross(normal, a);
                sample_plane(center, a, b, size, counts[k], &mut rng)
            }
            1 => {
                let half = [
                    size * (0.6 + 0.4 * rng.random::<f64>()),
                    size * (0.6 + 0.4 * rng.random::<f64>()),
                    size * (0.6 + 0.4 * rng.random::<f64>()),
                ];
                sample_box(center, half, counts[k], &mut rng)
            }
            _ => {
                let radius = size * (0.7 + 0.3 * rng.random::<f64>());
                sample_sphere(center, radius, counts[k], &mut rng)
            }
        };
        points.extend(pts.into_iter().map(|p| Point::new(p[0], p[1], p[2], k as i32)));
    }

    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
        for p in &mut points {
            for v in &mut p.pos {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(points)
}

/// Generates `count` scenes with per-scene seeds `seed + i`.
pub fn generate_scenes(config: &SceneConfig, count: usize) -> Result<Vec<Vec<Point>>, SceneError> {
    (0..count)
        .map(|i| {
            let mut c = config.clone();
            c.seed = config.seed.wrapping_add(i as u64);
            generate_scene(&c)
        })
        .collect()
}
