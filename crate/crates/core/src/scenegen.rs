//! Procedural deferred-shading toy renderer.
//!
//! Every pixel is ray cast against a ground plane, building facades, vehicle
//! fronts and vegetation spheres seen through a pinhole camera. The G-buffers
//! come straight from the hit record; the image is a simple Lambert plus
//! glossy shading of those buffers, optionally passed through a target style
//! (gamma, tint, texture and sensor noise).

use gbuf_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Exec, Result};

pub const CLASS_NAMES: [&str; 5] = ["sky", "building", "road", "vehicle", "vegetation"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();
pub const SKY: usize = 0;
pub const BUILDING: usize = 1;
pub const ROAD: usize = 2;
pub const VEHICLE: usize = 3;
pub const VEGETATION: usize = 4;

/// Field names of [`GBufferSet`], in storage order.
pub const GBUFFER_CHANNELS: [&str; 9] = [
    "normal",
    "depth",
    "albedo",
    "glossiness",
    "emission",
    "sky_mask",
    "reflection",
    "ndotr",
    "object_masks",
];

/// Channels of [`GBufferSet::encoder_input`].
pub const ENCODER_INPUT_CHANNELS: usize = 14;
pub const SKY_DEPTH: f64 = 1000.0;
pub const CAMERA_HEIGHT: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleTag {
    Source,
    Target,
}

impl StyleTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StyleTag::Source => "source",
            StyleTag::Target => "target",
        }
    }
}

impl std::str::FromStr for StyleTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(StyleTag::Source),
            "target" => Ok(StyleTag::Target),
            other => Err(Error::Config(format!("unknown style {other:?} (expected source or target)"))),
        }
    }
}

/// Photometric look applied on top of the shaded image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleParams {
    pub tint: [f64; 3],
    pub gamma: f64,
    pub noise: f64,
    pub texture_amplitude: f64,
    pub texture_frequency: f64,
}

impl Default for StyleParams {
    fn default() -> Self {
        Self {
            tint: [1.0; 3],
            gamma: 1.0,
            noise: 0.0,
            texture_amplitude: 0.0,
            texture_frequency: 0.0,
        }
    }
}

impl StyleParams {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

/// Vertical placement priors. `horizon` is a fraction of the image height.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutBias {
    pub horizon: f64,
    pub horizon_jitter: f64,
    /// Building height range in world units above the ground.
    pub building_height: [f64; 2],
    /// Nearest and farthest vehicle distance.
    pub vehicle_distance: [f64; 2],
    /// Height of vegetation centers above the ground.
    pub vegetation_elevation: f64,
}

impl Default for LayoutBias {
    fn default() -> Self {
        Self {
            horizon: 0.45,
            horizon_jitter: 0.05,
            building_height: [3.0, 9.0],
            vehicle_distance: [6.0, 20.0],
            vegetation_elevation: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleConfig {
    pub style: StyleParams,
    pub layout: LayoutBias,
}

/// Maximum object counts per scene; actual counts are uniform in `0..=max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeDensity {
    pub buildings: usize,
    pub vehicles: usize,
    pub vegetation: usize,
}

impl Default for ShapeDensity {
    fn default() -> Self {
        Self {
            buildings: 5,
            vehicles: 3,
            vegetation: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub height: usize,
    pub width: usize,
    pub palette: Vec<String>,
    pub density: ShapeDensity,
    pub source: StyleConfig,
    pub target: StyleConfig,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            palette: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            density: ShapeDensity::default(),
            source: StyleConfig::default(),
            target: StyleConfig {
                style: StyleParams {
                    tint: [0.8, 1.0, 1.2],
                    gamma: 1.5,
                    noise: 0.03,
                    texture_amplitude: 0.04,
                    texture_frequency: 16.0,
                },
                layout: LayoutBias {
                    horizon: 0.6,
                    ..LayoutBias::default()
                },
            },
        }
    }
}

impl LayoutConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v < 64 || v % 8 != 0 {
                return Err(Error::Config(format!(
                    "scenegen.{name} = {v}: must be at least 64 and divisible by 8"
                )));
            }
        }
        if self.palette.len() != NUM_CLASSES {
            return Err(Error::Config(format!(
                "scenegen.palette lists {} classes, the generator renders {NUM_CLASSES}",
                self.palette.len()
            )));
        }
        for sc in [&self.source, &self.target] {
            let s = &sc.style;
            if !(s.gamma > 0.0) || s.noise < 0.0 || s.texture_amplitude < 0.0 {
                return Err(Error::Config("style gamma must be > 0, noise and texture >= 0".into()));
            }
            if !(0.05..=0.95).contains(&sc.layout.horizon) {
                return Err(Error::Config("layout.horizon must lie in [0.05, 0.95]".into()));
            }
        }
        Ok(())
    }

    pub fn style(&self, tag: StyleTag) -> &StyleConfig {
        match tag {
            StyleTag::Source => &self.source,
            StyleTag::Target => &self.target,
        }
    }
}

/// Pinhole intrinsics; the principal row `cy` sits on the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: f64,
}

impl Camera {
    /// Unit view direction through the center of pixel `(x, y)`; y points up.
    pub fn ray(&self, x: usize, y: usize) -> [f64; 3] {
        let d = [
            (x as f64 + 0.5 - self.cx) / self.focal,
            -(y as f64 + 0.5 - self.cy) / self.focal,
            1.0,
        ];
        normalize(d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GBufferSet {
    pub normal: Tensor,
    pub depth: Tensor,
    pub albedo: Tensor,
    pub glossiness: Tensor,
    pub emission: Tensor,
    pub sky_mask: Tensor,
    pub reflection: Tensor,
    pub ndotr: Tensor,
    pub object_masks: Tensor,
}

impl GBufferSet {
    pub fn channels(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("normal", &self.normal),
            ("depth", &self.depth),
            ("albedo", &self.albedo),
            ("glossiness", &self.glossiness),
            ("emission", &self.emission),
            ("sky_mask", &self.sky_mask),
            ("reflection", &self.reflection),
            ("ndotr", &self.ndotr),
            ("object_masks", &self.object_masks),
        ]
    }

    pub fn from_channels(mut get: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        Ok(Self {
            normal: get("normal")?,
            depth: get("depth")?,
            albedo: get("albedo")?,
            glossiness: get("glossiness")?,
            emission: get("emission")?,
            sky_mask: get("sky_mask")?,
            reflection: get("reflection")?,
            ndotr: get("ndotr")?,
            object_masks: get("object_masks")?,
        })
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.depth.shape()[1], self.depth.shape()[2])
    }

    pub fn num_objects(&self) -> usize {
        self.object_masks.shape()[0]
    }

    /// The stack fed to the encoder: normal, inverse depth, albedo, gloss,
    /// emission, sky, reflection and n.r.
    pub fn encoder_input(&self) -> Tensor {
        let inv_depth = self.depth.map(|d| 1.0 / d);
        Tensor::concat_channels(&[
            &self.normal,
            &inv_depth,
            &self.albedo,
            &self.glossiness,
            &self.emission,
            &self.sky_mask,
            &self.reflection,
            &self.ndotr,
        ])
        .expect("G-buffer channels share a resolution")
    }

    pub fn masks(&self) -> Vec<Vec<f64>> {
        (0..self.num_objects())
            .map(|c| self.object_masks.channel(c).to_vec())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub index: usize,
    pub seed: u64,
    pub style: StyleTag,
    pub camera: Camera,
    pub image: Tensor,
    pub gbuffers: GBufferSet,
    pub labels: Vec<usize>,
}

impl SceneSample {
    pub fn hw(&self) -> (usize, usize) {
        self.gbuffers.hw()
    }
}

/// Per-sample seed derived from the dataset seed, style and index.
pub fn sample_seed(seed: u64, style: StyleTag, index: usize) -> u64 {
    let mut z = seed
        ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ match style {
            StyleTag::Source => 0,
            StyleTag::Target => 0xD1B5_4A32_D192_ED03,
        };
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_dataset(cfg: &LayoutConfig, n: usize, seed: u64, style: StyleTag, exec: Exec) -> Result<Vec<SceneSample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    Ok(exec.map(n, |i| render_sample(cfg, style, i, sample_seed(seed, style, i))))
}

#[derive(Clone, Copy)]
enum Shape {
    /// Camera-facing rectangle at distance `z`.
    Facade { z: f64, x0: f64, x1: f64, y0: f64, y1: f64 },
    Sphere { c: [f64; 3], r: f64 },
}

struct Object {
    class: usize,
    shape: Shape,
    albedo: [f64; 3],
    gloss: f64,
}

struct Hit {
    t: f64,
    normal: [f64; 3],
    class: usize,
    albedo: [f64; 3],
    gloss: f64,
    emission: f64,
}

const LIGHT: [f64; 3] = [-0.3, 0.8, -0.5];

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn place_objects(cfg: &LayoutConfig, bias: &LayoutBias, rng: &mut ChaCha8Rng) -> Vec<Object> {
    let h = CAMERA_HEIGHT;
    let mut objs = Vec::new();
    for _ in 0..rng.random_range(0..=cfg.density.buildings) {
        let z = rng.random_range(14.0..34.0);
        let x0 = rng.random_range(-30.0..24.0);
        let width = rng.random_range(4.0..12.0);
        let top = rng.random_range(bias.building_height[0]..=bias.building_height[1].max(bias.building_height[0]));
        objs.push(Object {
            class: BUILDING,
            shape: Shape::Facade { z, x0, x1: x0 + width, y0: -h, y1: top - h },
            albedo: jitter(rng, [0.55, 0.45, 0.4], 0.15),
            gloss: 0.2,
        });
    }
    for _ in 0..rng.random_range(0..=cfg.density.vehicles) {
        let [near, far] = bias.vehicle_distance;
        let z = rng.random_range(near..=far.max(near));
        let xc = rng.random_range(-0.35..0.35) * z;
        objs.push(Object {
            class: VEHICLE,
            shape: Shape::Facade { z, x0: xc - 0.9, x1: xc + 0.9, y0: -h, y1: -h + 1.4 },
            albedo: jitter(rng, [0.7, 0.15, 0.1], 0.3),
            gloss: 0.8,
        });
    }
    for _ in 0..rng.random_range(0..=cfg.density.vegetation) {
        let z = rng.random_range(8.0..30.0);
        let r = rng.random_range(0.8..2.2);
        let xc = rng.random_range(-0.5..0.5) * z;
        objs.push(Object {
            class: VEGETATION,
            shape: Shape::Sphere { c: [xc, -h + bias.vegetation_elevation + r * 0.5, z], r },
            albedo: jitter(rng, [0.2, 0.5, 0.15], 0.1),
            gloss: 0.05,
        });
    }
    objs
}

fn intersect(obj: &Object, d: [f64; 3]) -> Option<Hit> {
    match obj.shape {
        Shape::Facade { z, x0, x1, y0, y1 } => {
            let t = z / d[2];
            let (px, py) = (t * d[0], t * d[1]);
            if px < x0 || px > x1 || py < y0 || py > y1 {
                return None;
            }
            let mut albedo = obj.albedo;
            let mut gloss = obj.gloss;
            if obj.class == BUILDING && (px * 0.8).rem_euclid(1.0) < 0.45 && (py * 0.6).rem_euclid(1.0) < 0.5 && py > y0 + 0.5 {
                // windows
                albedo = [0.2, 0.25, 0.35];
                gloss = 0.9;
            }
            Some(Hit { t, normal: [0.0, 0.0, -1.0], class: obj.class, albedo, gloss, emission: 0.0 })
        }
        Shape::Sphere { c, r } => {
            let b = dot(d, c);
            let disc = b * b - (dot(c, c) - r * r);
            if disc < 0.0 {
                return None;
            }
            let t = b - disc.sqrt();
            if t <= 0.0 {
                return None;
            }
            let p = d.map(|v| v * t);
            let n = normalize([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            Some(Hit { t, normal: n, class: obj.class, albedo: obj.albedo, gloss: obj.gloss, emission: 0.0 })
        }
    }
}

fn trace(objs: &[Object], d: [f64; 3], h: f64) -> Hit {
    let mut best = if d[1] < 0.0 {
        let t = h / -d[1];
        let px = t * d[0];
        let stripe = (px.abs() < 0.08) && ((t * d[2]) * 0.5).rem_euclid(1.0) < 0.5;
        Hit {
            t,
            normal: [0.0, 1.0, 0.0],
            class: ROAD,
            albedo: if stripe { [0.9, 0.9, 0.85] } else { [0.3, 0.3, 0.32] },
            gloss: 0.3,
            emission: 0.0,
        }
    } else {
        Hit { t: SKY_DEPTH, normal: [0.0; 3], class: SKY, albedo: [0.0; 3], gloss: 0.0, emission: 1.0 }
    };
    for o in objs {
        if let Some(hit) = intersect(o, d) {
            if hit.t < best.t {
                best = hit;
            }
        }
    }
    best
}

fn shade(hit: &Hit, d: [f64; 3], r: [f64; 3]) -> [f64; 3] {
    if hit.class == SKY {
        let s = (d[1] * 4.0).clamp(0.0, 1.0);
        return [0.85 + (0.35 - 0.85) * s, 0.9 + (0.55 - 0.9) * s, 0.95 + (0.9 - 0.95) * s];
    }
    let l = normalize(LIGHT);
    let diffuse = 0.35 + 0.65 * dot(hit.normal, l).max(0.0);
    let spec = hit.gloss * 0.6 * dot(r, l).max(0.0).powi(20);
    hit.albedo.map(|a| (a * diffuse + spec).clamp(0.0, 1.0))
}

fn render_sample(cfg: &LayoutConfig, style: StyleTag, index: usize, seed: u64) -> SceneSample {
    let (h, w) = (cfg.height, cfg.width);
    let sc = cfg.style(style);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bias = &sc.layout;
    let horizon = (bias.horizon + rng.random_range(-1.0..=1.0) * bias.horizon_jitter).clamp(0.05, 0.95);
    let camera = Camera {
        focal: w as f64,
        cx: w as f64 / 2.0,
        cy: (horizon * h as f64).round(),
        height: CAMERA_HEIGHT,
    };
    let objs = place_objects(cfg, bias, &mut rng);

    let hw = h * w;
    let mut normal = vec![0.0; 3 * hw];
    let mut depth = vec![0.0; hw];
    let mut albedo = vec![0.0; 3 * hw];
    let mut gloss = vec![0.0; hw];
    let mut emission = vec![0.0; hw];
    let mut sky = vec![0.0; hw];
    let mut refl = vec![0.0; 3 * hw];
    let mut ndotr = vec![0.0; hw];
    let mut masks = vec![0.0; NUM_CLASSES * hw];
    let mut labels = vec![0usize; hw];
    let mut image = vec![0.0; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = camera.ray(x, y);
            let hit = trace(&objs, d, camera.height);
            let n = hit.normal;
            let dn = dot(d, n);
            let r = [d[0] - 2.0 * dn * n[0], d[1] - 2.0 * dn * n[1], d[2] - 2.0 * dn * n[2]];
            let color = shade(&hit, d, r);
            for c in 0..3 {
                normal[c * hw + i] = n[c];
                albedo[c * hw + i] = hit.albedo[c];
                refl[c * hw + i] = r[c];
                image[c * hw + i] = color[c];
            }
            depth[i] = hit.t;
            gloss[i] = hit.gloss;
            emission[i] = hit.emission;
            sky[i] = if hit.class == SKY { 1.0 } else { 0.0 };
            ndotr[i] = dot(n, r);
            masks[hit.class * hw + i] = 1.0;
            labels[i] = hit.class;
        }
    }
    apply_style(&mut image, h, w, &sc.style, &mut rng);

    let t = |c: usize, v: Vec<f64>| Tensor::from_vec(&[c, h, w], v).expect("sized above");
    SceneSample {
        index,
        seed,
        style,
        camera,
        image: t(3, image),
        gbuffers: GBufferSet {
            normal: t(3, normal),
            depth: t(1, depth),
            albedo: t(3, albedo),
            glossiness: t(1, gloss),
            emission: t(1, emission),
            sky_mask: t(1, sky),
            reflection: t(3, refl),
            ndotr: t(1, ndotr),
            object_masks: t(NUM_CLASSES, masks),
        },
        labels,
    }
}

/// `tint * img^gamma + texture + noise`, clamped to [0, 1].
pub fn apply_style(image: &mut [f64], h: usize, w: usize, style: &StyleParams, rng: &mut impl Rng) {
    if style.is_identity() {
        return;
    }
    let hw = h * w;
    let tau = std::f64::consts::TAU;
    let (px, py): (f64, f64) = (rng.random_range(0.0..tau), rng.random_range(0.0..tau));
    let noise = Normal::new(0.0, style.noise.max(0.0)).expect("finite std");
    let f = style.texture_frequency;
    for c in 0..3 {
        for i in 0..hw {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let tex = style.texture_amplitude * (tau * f * x / w as f64 + px).sin() * (tau * f * y / h as f64 + py).sin();
            let v = style.tint[c] * image[c * hw + i].powf(style.gamma) + tex + noise.sample(rng);
            image[c * hw + i] = v.clamp(0.0, 1.0);
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    v.map(|x| x / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LayoutConfig {
        LayoutConfig::default()
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_dataset(&small(), 2, 7, StyleTag::Target, Exec::Sequential).unwrap();
        let b = generate_dataset(&small(), 2, 7, StyleTag::Target, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(), 2, 8, StyleTag::Target, Exec::Sequential).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn masks_partition_and_match_labels() {
        for s in generate_dataset(&small(), 4, 1, StyleTag::Source, Exec::Sequential).unwrap() {
            let (h, w) = s.hw();
            for i in 0..h * w {
                let on: Vec<usize> = (0..NUM_CLASSES).filter(|&c| s.gbuffers.object_masks.channel(c)[i] == 1.0).collect();
                assert_eq!(on, vec![s.labels[i]]);
                let total: f64 = (0..NUM_CLASSES).map(|c| s.gbuffers.object_masks.channel(c)[i]).sum();
                assert_eq!(total, 1.0);
            }
        }
    }

    #[test]
    fn geometric_consistency() {
        for s in generate_dataset(&small(), 3, 2, StyleTag::Source, Exec::Sequential).unwrap() {
            let g = &s.gbuffers;
            let (h, w) = s.hw();
            for y in 0..h {
                for x in 0..w {
                    let n = [0, 1, 2].map(|c| g.normal.at3(c, y, x));
                    let r = [0, 1, 2].map(|c| g.reflection.at3(c, y, x));
                    let d = s.camera.ray(x, y);
                    if g.sky_mask.at3(0, y, x) == 0.0 {
                        assert!((dot(n, n) - 1.0).abs() < 1e-12);
                        assert!((g.ndotr.at3(0, y, x) - dot(n, r)).abs() < 1e-6);
                        let dn = dot(d, n);
                        for c in 0..3 {
                            assert!((r[c] - (d[c] - 2.0 * dn * n[c])).abs() < 1e-12);
                        }
                    } else {
                        assert_eq!(r, d);
                        assert_eq!(g.depth.at3(0, y, x), SKY_DEPTH);
                    }
                    assert!(g.depth.at3(0, y, x) > 0.0);
                    assert!((-1.0..=1.0).contains(&g.ndotr.at3(0, y, x)));
                }
            }
        }
    }

    #[test]
    fn flat_ground_matches_plane_oracle() {
        let mut cfg = small();
        cfg.density = ShapeDensity { buildings: 0, vehicles: 0, vegetation: 0 };
        let s = &generate_dataset(&cfg, 1, 3, StyleTag::Source, Exec::Sequential).unwrap()[0];
        let cam = s.camera;
        let mut ground = 0;
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                // independent oracle: ray (u, v, 1) hits y = -h at t = h / v scaled by |ray|
                let u = (x as f64 + 0.5 - cam.cx) / cam.focal;
                let v = (y as f64 + 0.5 - cam.cy) / cam.focal;
                if v <= 0.0 {
                    assert_eq!(s.labels[y * cfg.width + x], SKY);
                    continue;
                }
                ground += 1;
                assert_eq!(s.labels[y * cfg.width + x], ROAD);
                assert_eq!([0, 1, 2].map(|c| s.gbuffers.normal.at3(c, y, x)), [0.0, 1.0, 0.0]);
                let expected = cam.height / v * (u * u + v * v + 1.0).sqrt();
                assert!((s.gbuffers.depth.at3(0, y, x) - expected).abs() < 1e-9 * expected);
            }
        }
        assert!(ground > 0);
    }

    #[test]
    fn style_shift_follows_config() {
        // same scenes rendered in both looks: only the photometric transform differs
        let mut cfg = small();
        cfg.target.layout = cfg.source.layout.clone();
        cfg.target.style.noise = 0.0;
        cfg.target.style.texture_amplitude = 0.0;
        let seed = sample_seed(5, StyleTag::Source, 0);
        let src = render_sample(&cfg, StyleTag::Source, 0, seed);
        let tgt = render_sample(&cfg, StyleTag::Target, 0, seed);
        let hw = cfg.height * cfg.width;
        let st = &cfg.target.style;
        for c in 0..3 {
            let ms: f64 = src.image.channel(c).iter().sum::<f64>() / hw as f64;
            let mt: f64 = tgt.image.channel(c).iter().sum::<f64>() / hw as f64;
            let predicted: f64 = src.image.channel(c).iter().map(|v| (st.tint[c] * v.powf(st.gamma)).min(1.0)).sum::<f64>() / hw as f64;
            assert!((mt - predicted).abs() < 1e-12);
            assert!((mt - ms).abs() > 0.01, "channel {c}: {ms} vs {mt}");
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let mut cfg = small();
        cfg.width = 68;
        assert!(matches!(generate_dataset(&cfg, 1, 0, StyleTag::Source, Exec::Sequential), Err(Error::Config(_))));
        cfg.width = 56;
        assert!(cfg.validate().is_err());
        cfg.width = 64;
        assert!(generate_dataset(&cfg, 0, 0, StyleTag::Source, Exec::Sequential).is_err());
    }
}
