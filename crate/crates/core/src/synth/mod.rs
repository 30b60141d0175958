//! Synthetic "blob orchard" datasets: grape-bunch-like clusters of berries on
//! textured backdrops, with controllable distribution shifts.

mod render;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coco::{manifest_csv, quantize_image, save_dataset, CocoError, Dataset, ShiftTag};
use crate::geometry::{rasterize_all, trace_polygons, Mask, Polygon};
use crate::sample::{Image, Instance, Sample};

pub use render::rgb_to_hsv;
use render::{blur, hsv_to_rgb, value_noise, Cluster, Leaf};

/// Maximum total polygon vertices per annotated object.
pub const VERTEX_BUDGET: usize = 64;

/// Appearance and berry geometry of one grape variety.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variety {
    pub name: String,
    /// Degrees.
    pub hue: f32,
    pub saturation: f32,
    pub value: f32,
    pub berry_radius: [f32; 2],
    pub berry_count: [usize; 2],
    /// Amplitude of per-pixel brightness texture on berries.
    pub texture: f32,
}

/// Background regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backdrop {
    pub hue: [f32; 2],
    pub saturation: f32,
    pub value: [f32; 2],
    /// Lattice spacing of the large-scale noise, in pixels.
    pub cell: f32,
    pub texture: f32,
}

impl Backdrop {
    pub fn vineyard() -> Self {
        Self { hue: [85.0, 140.0], saturation: 0.55, value: [0.18, 0.45], cell: 12.0, texture: 0.35 }
    }

    pub fn potted() -> Self {
        Self { hue: [20.0, 45.0], saturation: 0.3, value: [0.3, 0.6], cell: 20.0, texture: 0.2 }
    }

    fn lerp(&self, other: &Backdrop, t: f32) -> Backdrop {
        let l = |a: f32, b: f32| a + (b - a) * t;
        Backdrop {
            hue: [l(self.hue[0], other.hue[0]), l(self.hue[1], other.hue[1])],
            saturation: l(self.saturation, other.saturation),
            value: [l(self.value[0], other.value[0]), l(self.value[1], other.value[1])],
            cell: l(self.cell, other.cell),
            texture: l(self.texture, other.texture),
        }
    }
}

/// Whole-image appearance drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Photometric {
    /// Multiplicative brightness offset: pixels scale by `1 + brightness`.
    pub brightness: f32,
    pub blur_sigma: f32,
    pub noise_std: f32,
}

/// Everything that defines a synthetic domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneStyle {
    /// One is drawn per scene; its name becomes the sample stratum.
    pub varieties: Vec<Variety>,
    pub backdrop: Backdrop,
    pub photometric: Photometric,
    /// `[scale_x, scale_y, shear]` of every object.
    pub viewpoint: [f32; 3],
    /// Expected leaf occluders per object.
    pub occlusion: f32,
    /// Half-height range of a bunch, in pixels at a 64-pixel image.
    pub extent: [f32; 2],
}

impl SceneStyle {
    /// Mixed-variety vineyard domain used for pre-training.
    pub fn source() -> Self {
        let v = |name: &str, hue, saturation, value, r0, r1| Variety {
            name: name.into(),
            hue,
            saturation,
            value,
            berry_radius: [r0, r1],
            berry_count: [9, 16],
            texture: 0.12,
        };
        Self {
            varieties: vec![
                v("chardonnay", 62.0, 0.5, 0.78, 1.8, 2.6),
                v("sauvignon", 55.0, 0.45, 0.82, 1.7, 2.5),
                v("cabernet_franc", 275.0, 0.55, 0.42, 1.8, 2.5),
                v("cabernet_sauvignon", 262.0, 0.6, 0.35, 1.7, 2.4),
                v("syrah", 290.0, 0.5, 0.4, 1.9, 2.7),
            ],
            backdrop: Backdrop::vineyard(),
            photometric: Photometric::default(),
            viewpoint: [1.0, 1.0, 0.0],
            occlusion: 0.0,
            extent: [7.0, 11.0],
        }
    }

    /// Single table-grape variety in vineyard rows.
    pub fn red_globe() -> Self {
        let mut s = Self::source();
        s.varieties = vec![Variety {
            name: "red_globe".into(),
            hue: 345.0,
            saturation: 0.5,
            value: 0.75,
            berry_radius: [2.4, 3.2],
            berry_count: [7, 12],
            texture: 0.1,
        }];
        s
    }

    /// Scales pixel extents for image sizes other than 64.
    fn scaled(&self, image_size: usize) -> SceneStyle {
        let k = image_size as f32 / 64.0;
        let mut s = self.clone();
        s.extent = [s.extent[0] * k, s.extent[1] * k];
        for v in &mut s.varieties {
            v.berry_radius = [v.berry_radius[0] * k, v.berry_radius[1] * k];
        }
        s
    }
}

/// Kind of distribution shift, with its per-unit-magnitude deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    InputLevel {
        brightness: f32,
        blur: f32,
        noise: f32,
    },
    FeatureLevel {
        hue: f32,
        size: f32,
        texture: f32,
    },
    /// Backdrop regime change from vineyard rows to potted vines.
    Natural,
    /// Anisotropic scale and shear of object geometry.
    Viewpoint,
    /// Leaf occluders in front of objects.
    Occlusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    #[serde(flatten)]
    pub kind: ShiftKind,
    pub magnitude: f32,
    pub seed: u64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("shift magnitude must be >= 0, got {0}")]
    NegativeMagnitude(f32),
    #[error("shift kind `none` requires magnitude 0, got {0}")]
    NoneWithMagnitude(f32),
    #[error("image size {0} must be a positive multiple of 32")]
    ImageSize(usize),
    #[error("object range {0:?} must satisfy 1 <= lo <= hi")]
    ObjectRange([usize; 2]),
    #[error("scene count must be >= 1")]
    NoScenes,
}

impl ShiftSpec {
    pub fn none(seed: u64) -> Self {
        Self { kind: ShiftKind::None, magnitude: 0.0, seed }
    }

    pub fn new(kind: ShiftKind, magnitude: f32, seed: u64) -> Result<Self, SynthError> {
        let s = Self { kind, magnitude, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.magnitude >= 0.0) {
            return Err(SynthError::NegativeMagnitude(self.magnitude));
        }
        if self.kind == ShiftKind::None && self.magnitude != 0.0 {
            return Err(SynthError::NoneWithMagnitude(self.magnitude));
        }
        Ok(())
    }

    pub fn tag(&self) -> Option<ShiftTag> {
        match self.kind {
            ShiftKind::None => None,
            ShiftKind::InputLevel { .. } | ShiftKind::Viewpoint | ShiftKind::Occlusion => Some(ShiftTag::InputLevel),
            ShiftKind::FeatureLevel { .. } => Some(ShiftTag::FeatureLevel),
            ShiftKind::Natural => Some(ShiftTag::Natural),
        }
    }

    pub fn apply(&self, style: &SceneStyle) -> SceneStyle {
        let m = self.magnitude;
        let mut s = style.clone();
        match &self.kind {
            ShiftKind::None => {}
            ShiftKind::InputLevel { brightness, blur, noise } => {
                s.photometric.brightness += m * brightness;
                s.photometric.blur_sigma += m * blur;
                s.photometric.noise_std += m * noise;
            }
            ShiftKind::FeatureLevel { hue, size, texture } => {
                for v in &mut s.varieties {
                    v.hue = (v.hue + m * hue).rem_euclid(360.0);
                    let k = (1.0 + m * size).max(0.2);
                    v.berry_radius = [v.berry_radius[0] * k, v.berry_radius[1] * k];
                    v.texture = (v.texture + m * texture).max(0.0);
                }
            }
            ShiftKind::Natural => s.backdrop = s.backdrop.lerp(&Backdrop::potted(), m.min(1.0)),
            ShiftKind::Viewpoint => {
                s.viewpoint = [s.viewpoint[0] * (1.0 + 0.3 * m), s.viewpoint[1] * (1.0 - 0.2 * m), s.viewpoint[2] + 0.3 * m];
            }
            ShiftKind::Occlusion => s.occlusion += m,
        }
        s
    }
}

/// One object as generated, before annotation.
struct Placed {
    cluster: Cluster,
    silhouette: Mask,
}

/// Per-object fidelity record: IoU between the annotation's rasterization
/// and the rendered visible silhouette.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectRecord {
    pub fidelity: f64,
    pub visible_area: usize,
    pub vertices: usize,
}

/// A scene plus the renderer's own per-object silhouettes.
pub struct RenderedScene {
    pub sample: Sample,
    pub silhouettes: Vec<Mask>,
    pub records: Vec<ObjectRecord>,
}

fn scene_rngs(seed: u64, index: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut geo = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut app = geo.clone();
    geo.set_stream(1);
    app.set_stream(2);
    (geo, app)
}

/// Traces a visible silhouette, loosening simplification until the object
/// fits the vertex budget.
fn annotate(visible: &Mask) -> Vec<Polygon> {
    let mut polys = Vec::new();
    for tol in [0.3, 0.45, 0.6, 0.8, 1.0, 1.3] {
        polys = trace_polygons(visible, tol);
        if polys.iter().map(Polygon::len).sum::<usize>() <= VERTEX_BUDGET {
            break;
        }
    }
    polys
}

fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let inter = a.intersection_count(b);
    let union = a.count() + b.count() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Renders scene `index` of a domain. Geometry and appearance draw from
/// separate random streams, so purely photometric shifts leave geometry
/// untouched.
pub fn render_scene(style: &SceneStyle, image_size: usize, objects: [usize; 2], seed: u64, index: u64, max_objects: usize) -> RenderedScene {
    let (h, w) = (image_size, image_size);
    let style = style.scaled(image_size);
    let (mut geo, mut app) = scene_rngs(seed, index);

    // Geometry.
    let variety_idx = geo.random_range(0..style.varieties.len());
    let variety = &style.varieties[variety_idx];
    let want = geo.random_range(objects[0]..=objects[1]).min(max_objects);
    let [sx, sy, shear] = style.viewpoint;
    let linear = [sx, shear * sx, 0.0, sy];
    let mut placed: Vec<Placed> = Vec::new();
    let mut attempts = 0;
    while placed.len() < want && attempts < 200 {
        attempts += 1;
        let extent = geo.random_range(style.extent[0]..=style.extent[1]);
        let count = geo.random_range(variety.berry_count[0]..=variety.berry_count[1]);
        let berries = Cluster::grow(&mut geo, extent, variety.berry_radius, count);
        let probe = Cluster::new(0.0, 0.0, berries, linear);
        let margin = probe.radius.min(w as f32 / 2.0 - 1.0);
        let cx = geo.random_range(margin..=(w as f32 - margin));
        let cy = geo.random_range(margin..=(h as f32 - margin));
        let cluster = Cluster { cx, cy, ..probe };
        if placed.iter().any(|p| {
            let d = ((p.cluster.cx - cx).powi(2) + (p.cluster.cy - cy).powi(2)).sqrt();
            d < p.cluster.radius + cluster.radius + 1.5
        }) {
            continue;
        }
        let silhouette = cluster.silhouette(h, w).filled_holes();
        if silhouette.count() < 12 {
            continue;
        }
        placed.push(Placed { cluster, silhouette });
    }

    // Occluders: accepted only if every object keeps a hole-free visible
    // region of at least 40% of its silhouette.
    let mut leaves: Vec<Leaf> = Vec::new();
    let mut cover = Mask::new(h, w);
    if style.occlusion > 0.0 && !placed.is_empty() {
        let expected = style.occlusion * placed.len() as f32;
        let n = expected.floor() as usize + usize::from(geo.random::<f32>() < expected.fract());
        let k = image_size as f32 / 64.0;
        for _ in 0..n {
            for _try in 0..10 {
                let target = &placed[geo.random_range(0..placed.len())].cluster;
                let a = geo.random_range(0.0..std::f32::consts::TAU);
                let d = target.radius * geo.random_range(0.5f32..1.0);
                let leaf = Leaf {
                    cx: target.cx + d * a.cos(),
                    cy: target.cy + d * a.sin(),
                    rx: geo.random_range(3.5..6.5) * k,
                    ry: geo.random_range(1.8..3.2) * k,
                    angle: geo.random_range(0.0..std::f32::consts::PI),
                };
                let mut trial = cover.clone();
                trial.union_with(&leaf.mask(h, w));
                let ok = placed.iter().all(|p| {
                    let mut vis = p.silhouette.clone();
                    vis.subtract(&trial);
                    vis.count() * 10 >= p.silhouette.count() * 4 && vis.filled_holes() == vis
                });
                if ok {
                    cover = trial;
                    leaves.push(leaf);
                    break;
                }
            }
        }
    }

    // Appearance.
    let mut image = Image::new(h, w);
    let bd = &style.backdrop;
    let n1 = value_noise(&mut app, h, w, bd.cell * image_size as f32 / 64.0);
    let n2 = value_noise(&mut app, h, w, 3.0);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let t = n1[i];
            let hue = bd.hue[0] + (bd.hue[1] - bd.hue[0]) * t;
            let v = (bd.value[0] + (bd.value[1] - bd.value[0]) * t) * (1.0 + bd.texture * (n2[i] - 0.5));
            image.set_pixel(r, c, hsv_to_rgb(hue, bd.saturation, v.clamp(0.0, 1.0)));
        }
    }
    let berry_tex = value_noise(&mut app, h, w, 1.5);
    for p in &placed {
        for r in 0..h {
            for c in 0..w {
                if !p.silhouette.get(r, c) {
                    continue;
                }
                let (x, y) = (c as f32 + 0.5, r as f32 + 0.5);
                let (d, hl) = match p.cluster.berry_at(x, y) {
                    Some((d, b)) => {
                        let (u, v) = p.cluster.canonical(x, y);
                        let hx = (u - b.x + 0.35 * b.r) / b.r;
                        let hy = (v - b.y + 0.35 * b.r) / b.r;
                        (d, (-(hx * hx + hy * hy) / 0.08).exp())
                    }
                    None => (1.0, 0.0),
                };
                let shade = 0.55 + 0.45 * (1.0 - d * d).max(0.0).sqrt();
                let tex = 1.0 + variety.texture * (berry_tex[r * w + c] - 0.5) * 2.0;
                let val = (variety.value * shade * tex + 0.25 * hl).clamp(0.0, 1.0);
                let sat = variety.saturation * (1.0 - 0.6 * hl);
                image.set_pixel(r, c, hsv_to_rgb(variety.hue, sat, val));
            }
        }
    }
    for leaf in &leaves {
        let hue: f32 = app.random_range(95.0..125.0);
        let val: f32 = app.random_range(0.3..0.5);
        for r in 0..h {
            for c in 0..w {
                let (x, y) = (c as f32 + 0.5, r as f32 + 0.5);
                if leaf.contains(x, y) {
                    let (s, co) = leaf.angle.sin_cos();
                    let v_off = (-s * (x - leaf.cx) + co * (y - leaf.cy)).abs() / leaf.ry;
                    let vein = if v_off < 0.12 { 1.25 } else { 1.0 };
                    image.set_pixel(r, c, hsv_to_rgb(hue, 0.6, (val * vein).min(1.0)));
                }
            }
        }
    }
    let ph = &style.photometric;
    if ph.brightness != 0.0 {
        image.data.iter_mut().for_each(|v| *v *= 1.0 + ph.brightness);
    }
    blur(&mut image, ph.blur_sigma);
    if ph.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, ph.noise_std).expect("finite std");
        image.data.iter_mut().for_each(|v| *v += normal.sample(&mut app));
    }
    image.clamp();
    quantize_image(&mut image);

    let mut instances = Vec::with_capacity(placed.len());
    let mut silhouettes = Vec::with_capacity(placed.len());
    let mut records = Vec::with_capacity(placed.len());
    for p in &placed {
        let mut visible = p.silhouette.clone();
        visible.subtract(&cover);
        let polys = annotate(&visible);
        let raster = rasterize_all(&polys, h, w);
        records.push(ObjectRecord {
            fidelity: mask_iou(&raster, &visible),
            visible_area: visible.count(),
            vertices: polys.iter().map(Polygon::len).sum(),
        });
        instances.push(Instance::from_polygons(1, polys));
        silhouettes.push(visible);
    }
    let sample = Sample { id: index + 1, file_name: format!("{:05}.png", index + 1), image, instances, stratum: variety.name.clone() };
    RenderedScene { sample, silhouettes, records }
}

fn check_args(image_size: usize, objects: [usize; 2]) -> Result<(), SynthError> {
    if image_size == 0 || !image_size.is_multiple_of(32) {
        return Err(SynthError::ImageSize(image_size));
    }
    if objects[0] == 0 || objects[1] < objects[0] {
        return Err(SynthError::ObjectRange(objects));
    }
    Ok(())
}

/// `scene_count` scenes of the source domain under one shift.
pub fn generate(scene_count: usize, objects: [usize; 2], image_size: usize, shift: &ShiftSpec) -> Result<Dataset, SynthError> {
    shift.validate()?;
    check_args(image_size, objects)?;
    if scene_count == 0 {
        return Err(SynthError::NoScenes);
    }
    let style = shift.apply(&SceneStyle::source());
    let samples = (0..scene_count as u64).map(|i| render_scene(&style, image_size, objects, shift.seed, i, usize::MAX).sample).collect();
    Ok(Dataset { name: "synthetic".into(), samples, shift_tags: shift.tag().into_iter().collect() })
}

/// Renders scenes until exactly `instances` objects exist (the last scene is
/// capped). Returns the dataset and every rendered scene's records.
pub fn generate_instances(
    name: &str,
    style: &SceneStyle,
    instances: usize,
    objects: [usize; 2],
    image_size: usize,
    seed: u64,
    tags: BTreeSet<ShiftTag>,
) -> Result<(Dataset, Vec<ObjectRecord>), SynthError> {
    check_args(image_size, objects)?;
    let mut samples = Vec::new();
    let mut records = Vec::new();
    let mut total = 0;
    let mut index = 0u64;
    while total < instances {
        let scene = render_scene(style, image_size, objects, seed, index, instances - total);
        index += 1;
        if scene.sample.instances.is_empty() {
            continue;
        }
        total += scene.sample.instances.len();
        records.extend(scene.records);
        samples.push(scene.sample);
    }
    Ok((Dataset { name: name.into(), samples, shift_tags: tags }, records))
}

/// Instance totals of the real datasets each synthetic set mirrors.
pub const TABLE_COUNTS: [(&str, usize); 7] = [("source", 2020), ("tune", 668), ("R", 100), ("RV", 112), ("RF", 105), ("C", 138), ("O", 135)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Multiplies every instance total.
    pub scale: f64,
    pub image_size: usize,
    pub objects_per_scene: [usize; 2],
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { seed: 0, scale: 1.0, image_size: 64, objects_per_scene: [1, 4] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LockEntry {
    pub name: String,
    pub seed: u64,
    pub instances: usize,
    pub images: usize,
    /// Applied on top of the base domain, in order.
    pub base: String,
    pub shifts: Vec<ShiftSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteLock {
    pub config: SuiteConfig,
    pub datasets: Vec<LockEntry>,
}

pub struct Suite {
    pub source: Dataset,
    pub tune: Dataset,
    /// R, RV, RF, C, O analogues.
    pub targets: Vec<Dataset>,
    pub lock: SuiteLock,
    pub records: Vec<ObjectRecord>,
}

impl Suite {
    pub fn all(&self) -> impl Iterator<Item = &Dataset> {
        std::iter::once(&self.source).chain(std::iter::once(&self.tune)).chain(&self.targets)
    }

    pub fn target(&self, name: &str) -> Option<&Dataset> {
        self.targets.iter().find(|d| d.name == name)
    }
}

fn input_shift(brightness: f32, blur: f32, noise: f32, seed: u64) -> ShiftSpec {
    ShiftSpec { kind: ShiftKind::InputLevel { brightness, blur, noise }, magnitude: 1.0, seed }
}

/// Shifts defining each suite member relative to its base domain.
fn suite_plan(seed: u64) -> Vec<(&'static str, &'static str, Vec<ShiftSpec>)> {
    let s = |k: u64| seed.wrapping_mul(1000).wrapping_add(k);
    let feature = |hue, size, texture| ShiftSpec { kind: ShiftKind::FeatureLevel { hue, size, texture }, magnitude: 1.0, seed: 0 };
    vec![
        ("source", "source", vec![]),
        ("tune", "red_globe", vec![ShiftSpec { kind: ShiftKind::Natural, magnitude: 1.0, seed: 0 }, input_shift(0.1, 0.5, 0.0, s(1))]),
        ("R", "tune", vec![input_shift(-0.15, 0.3, 0.03, s(2))]),
        ("RV", "tune", vec![ShiftSpec { kind: ShiftKind::Viewpoint, magnitude: 1.0, seed: 0 }]),
        ("RF", "tune", vec![ShiftSpec { kind: ShiftKind::Occlusion, magnitude: 1.0, seed: 0 }]),
        ("C", "tune", vec![feature(-90.0, -0.2, 0.05), input_shift(-0.05, 0.0, 0.0, s(3))]),
        ("O", "tune", vec![feature(85.0, -0.1, 0.0), input_shift(-0.05, 0.0, 0.0, s(4))]),
    ]
}

/// Builds the source set, the fine-tuning set and the five target sets.
///
/// Targets are built on the final tune domain and tagged relative to it. The
/// tune domain itself starts from a variety absent from the source mix, which
/// is its feature-level shift.
pub fn shift_suite(config: &SuiteConfig) -> Result<Suite, SynthError> {
    let mut datasets = Vec::new();
    let mut entries = Vec::new();
    let mut records = Vec::new();
    let mut styles = vec![("source", SceneStyle::source()), ("red_globe", SceneStyle::red_globe())];
    for (i, (name, base, shifts)) in suite_plan(config.seed).into_iter().enumerate() {
        let mut style = styles.iter().find(|(n, _)| *n == base).map(|(_, s)| s.clone()).expect("plan bases are defined first");
        let mut tags = BTreeSet::new();
        if base == "red_globe" {
            tags.insert(ShiftTag::FeatureLevel);
        }
        for s in &shifts {
            s.validate()?;
            style = s.apply(&style);
            tags.extend(s.tag());
        }
        let count = TABLE_COUNTS[i].1;
        let instances = ((count as f64 * config.scale).round() as usize).max(1);
        let seed = config.seed.wrapping_mul(7919).wrapping_add(i as u64 + 1);
        let (d, recs) = generate_instances(name, &style, instances, config.objects_per_scene, config.image_size, seed, tags)?;
        styles.push((name, style));
        entries.push(LockEntry { name: name.into(), seed, instances, images: d.samples.len(), base: base.into(), shifts });
        records.extend(recs);
        datasets.push(d);
    }
    let mut it = datasets.into_iter();
    let source = it.next().expect("source");
    let tune = it.next().expect("tune");
    Ok(Suite { source, tune, targets: it.collect(), lock: SuiteLock { config: config.clone(), datasets: entries }, records })
}

#[derive(Debug, thiserror::Error)]
pub enum SuiteIoError {
    #[error(transparent)]
    Coco(#[from] CocoError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("suite.lock: {0}")]
    Lock(String),
}

/// Writes each set into its own subdirectory plus `suite.lock` and an
/// aggregate `manifest.csv`.
pub fn write_suite(suite: &Suite, dir: impl AsRef<Path>) -> Result<(), SuiteIoError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for d in suite.all() {
        save_dataset(d, dir.join(d.name.to_lowercase()))?;
    }
    let lock = toml::to_string(&suite.lock).map_err(|e| SuiteIoError::Lock(e.to_string()))?;
    fs::write(dir.join("suite.lock"), format!("# Regenerate with the same seeds and shift parameters.\n{lock}"))?;
    let manifests: Vec<_> = suite.all().map(Dataset::manifest).collect();
    fs::write(dir.join("manifest.csv"), manifest_csv(&manifests))?;
    Ok(())
}

pub fn read_lock(path: impl AsRef<Path>) -> Result<SuiteLock, SuiteIoError> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| SuiteIoError::Lock(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SuiteConfig {
        SuiteConfig { seed: 3, scale: 0.05, ..SuiteConfig::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(3, [1, 3], 64, &ShiftSpec::none(5)).unwrap();
        let b = generate(3, [1, 3], 64, &ShiftSpec::none(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hue_shift_keeps_geometry() {
        let base = generate(4, [1, 3], 64, &ShiftSpec::none(9)).unwrap();
        let hue = ShiftSpec::new(ShiftKind::FeatureLevel { hue: 60.0, size: 0.0, texture: 0.0 }, 1.0, 9).unwrap();
        let shifted = generate(4, [1, 3], 64, &hue).unwrap();
        for (a, b) in base.samples.iter().zip(&shifted.samples) {
            assert_eq!(a.instances, b.instances);
            assert_ne!(a.image, b.image);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ShiftSpec::new(ShiftKind::None, 0.5, 0).is_err());
        assert!(ShiftSpec::new(ShiftKind::Occlusion, -1.0, 0).is_err());
        assert!(generate(1, [1, 2], 48, &ShiftSpec::none(0)).is_err());
        assert!(generate(1, [0, 2], 64, &ShiftSpec::none(0)).is_err());
    }

    #[test]
    fn suite_counts_and_tags() {
        let suite = shift_suite(&small()).unwrap();
        let names: Vec<_> = suite.all().map(|d| d.name.clone()).collect();
        assert_eq!(names, ["source", "tune", "R", "RV", "RF", "C", "O"]);
        for (d, (_, n)) in suite.all().zip(TABLE_COUNTS) {
            assert_eq!(d.instance_count(), ((n as f64 * 0.05).round() as usize).max(1));
        }
        assert_eq!(suite.tune.shift_tags, [ShiftTag::InputLevel, ShiftTag::FeatureLevel, ShiftTag::Natural].into());
        assert_eq!(suite.target("C").unwrap().shift_tags, [ShiftTag::InputLevel, ShiftTag::FeatureLevel].into());
        assert_eq!(suite.target("RV").unwrap().shift_tags, [ShiftTag::InputLevel].into());
    }

    #[test]
    fn annotations_fit_budget() {
        let suite = shift_suite(&small()).unwrap();
        assert!(suite.records.iter().all(|r| r.vertices <= VERTEX_BUDGET && r.visible_area > 0));
    }

    #[test]
    fn lock_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let suite = shift_suite(&small()).unwrap();
        write_suite(&suite, dir.path()).unwrap();
        let lock = read_lock(dir.path().join("suite.lock")).unwrap();
        assert_eq!(lock, suite.lock);
        let again = shift_suite(&lock.config).unwrap();
        assert_eq!(again.tune, suite.tune);
        let loaded = crate::coco::load_dataset(dir.path().join("rf")).unwrap();
        assert_eq!(&loaded, suite.target("RF").unwrap());
    }
}
