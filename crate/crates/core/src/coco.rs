//! COCO-style dataset reading and writing, manifests and stratified splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Polygon;
use crate::sample::{Image, Instance, Sample};

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, thiserror::Error)]
pub enum CocoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("annotations reference missing images: ids {ids:?}")]
    MissingImages { ids: Vec<u64> },
    #[error("annotation {index}: malformed polygon {polygon}: {reason}")]
    MalformedPolygon { index: usize, polygon: usize, reason: String },
    #[error("image {id} ({file_name}) is {actual:?}, header says {declared:?}")]
    SizeMismatch { id: u64, file_name: String, declared: (usize, usize), actual: (usize, usize) },
    #[error("val_fraction must lie in (0, 1), got {0}")]
    Fraction(f64),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// Shift categories from the source domain to a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShiftTag {
    #[serde(rename = "input-level")]
    InputLevel,
    #[serde(rename = "feature-level")]
    FeatureLevel,
    #[serde(rename = "natural")]
    Natural,
}

impl fmt::Display for ShiftTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftTag::InputLevel => "input-level",
            ShiftTag::FeatureLevel => "feature-level",
            ShiftTag::Natural => "natural",
        })
    }
}

impl FromStr for ShiftTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "input-level" => Ok(ShiftTag::InputLevel),
            "feature-level" => Ok(ShiftTag::FeatureLevel),
            "natural" => Ok(ShiftTag::Natural),
            _ => Err(format!("unknown shift tag `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub image_count: usize,
    pub instance_count: usize,
    pub shift_tags: BTreeSet<ShiftTag>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
    pub shift_tags: BTreeSet<ShiftTag>,
}

impl Dataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            name: self.name.clone(),
            image_count: self.samples.len(),
            instance_count: self.samples.iter().map(|s| s.instances.len()).sum(),
            shift_tags: self.shift_tags.clone(),
        }
    }

    pub fn instance_count(&self) -> usize {
        self.samples.iter().map(|s| s.instances.len()).sum()
    }
}

// ---- on-disk structures ----------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CocoFile {
    #[serde(default)]
    info: CocoInfo,
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Serialize, Deserialize, Default)]
struct CocoInfo {
    #[serde(default)]
    description: String,
    #[serde(default)]
    shift_tags: BTreeSet<ShiftTag>,
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    height: usize,
    width: usize,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    stratum: String,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: u64,
    image_id: u64,
    category_id: u32,
    segmentation: Vec<Vec<f64>>,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    area: Option<f64>,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CocoError + '_ {
    move |source| CocoError::Io { path: path.to_path_buf(), source }
}

fn validate_polygon(flat: &[f64]) -> Result<Polygon, String> {
    if !flat.len().is_multiple_of(2) {
        return Err(format!("odd coordinate count {}", flat.len()));
    }
    if flat.len() < 6 {
        return Err(format!("{} vertices, need at least 3", flat.len() / 2));
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err("non-finite coordinate".into());
    }
    let poly = Polygon::from_flat(flat);
    if poly.area() <= 0.0 {
        return Err("zero area".into());
    }
    Ok(poly)
}

/// Reads image pixels from PNG or PPM into `[0, 1]` planar floats.
pub fn read_image(path: &Path) -> Result<Image, CocoError> {
    let img = image::open(path).map_err(|source| CocoError::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::new(h, w);
    for (x, y, px) in img.enumerate_pixels() {
        out.set_pixel(y as usize, x as usize, px.0.map(|v| v as f32 / 255.0));
    }
    Ok(out)
}

/// Writes an image as 8-bit RGB; the format follows the file extension.
pub fn write_image(path: &Path, im: &Image) -> Result<(), CocoError> {
    let mut buf = image::RgbImage::new(im.width as u32, im.height as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        px.0 = im.pixel(y as usize, x as usize).map(quantize_u8);
    }
    buf.save(path).map_err(|source| CocoError::Image { path: path.to_path_buf(), source })
}

fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snaps every channel to the nearest 8-bit level so a save/load cycle is exact.
pub fn quantize_image(im: &mut Image) {
    im.data.iter_mut().for_each(|v| *v = quantize_u8(*v) as f32 / 255.0);
}

/// Loads `<dir>/annotations.json` plus the image files it names.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset, CocoError> {
    let dir = dir.as_ref();
    let ann_path = dir.join(ANNOTATION_FILE);
    let text = fs::read_to_string(&ann_path).map_err(io_err(&ann_path))?;
    let file: CocoFile = serde_json::from_str(&text).map_err(|source| CocoError::Json { path: ann_path.clone(), source })?;

    let known: HashMap<u64, usize> = file.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
    let mut missing: BTreeSet<u64> = file.annotations.iter().map(|a| a.image_id).filter(|id| !known.contains_key(id)).collect();
    missing.extend(file.images.iter().filter(|im| !dir.join(&im.file_name).is_file()).map(|im| im.id));
    if !missing.is_empty() {
        return Err(CocoError::MissingImages { ids: missing.into_iter().collect() });
    }

    let mut per_image: Vec<Vec<Instance>> = vec![Vec::new(); file.images.len()];
    for (index, a) in file.annotations.iter().enumerate() {
        let polygons = a
            .segmentation
            .iter()
            .enumerate()
            .map(|(polygon, flat)| validate_polygon(flat).map_err(|reason| CocoError::MalformedPolygon { index, polygon, reason }))
            .collect::<Result<Vec<_>, _>>()?;
        if polygons.is_empty() {
            return Err(CocoError::MalformedPolygon { index, polygon: 0, reason: "no polygons".into() });
        }
        let mut inst = Instance::from_polygons(a.category_id, polygons);
        if let Some(b) = a.bbox {
            inst.bbox = b;
        }
        per_image[known[&a.image_id]].push(inst);
    }

    let mut samples = Vec::with_capacity(file.images.len());
    for (im, instances) in file.images.iter().zip(per_image) {
        let image = read_image(&dir.join(&im.file_name))?;
        if (image.height, image.width) != (im.height, im.width) {
            return Err(CocoError::SizeMismatch {
                id: im.id,
                file_name: im.file_name.clone(),
                declared: (im.height, im.width),
                actual: (image.height, image.width),
            });
        }
        samples.push(Sample { id: im.id, file_name: im.file_name.clone(), image, instances, stratum: im.stratum.clone() });
    }
    let name = if file.info.description.is_empty() {
        dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    } else {
        file.info.description
    };
    Ok(Dataset { name, samples, shift_tags: file.info.shift_tags })
}

/// Writes annotations, images and the one-row manifest into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<(), CocoError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut annotations = Vec::new();
    for s in &dataset.samples {
        for inst in &s.instances {
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: s.id,
                category_id: inst.category_id,
                segmentation: inst.polygons.iter().map(Polygon::to_flat).collect(),
                bbox: Some(inst.bbox),
                area: Some(inst.polygons.iter().map(Polygon::area).sum()),
                iscrowd: 0,
            });
        }
        let path = dir.join(&s.file_name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        write_image(&path, &s.image)?;
    }
    let file = CocoFile {
        info: CocoInfo { description: dataset.name.clone(), shift_tags: dataset.shift_tags.clone() },
        images: dataset
            .samples
            .iter()
            .map(|s| CocoImage { id: s.id, file_name: s.file_name.clone(), height: s.image.height, width: s.image.width, stratum: s.stratum.clone() })
            .collect(),
        annotations,
        categories: vec![CocoCategory { id: 1, name: "grape".into() }],
    };
    let ann_path = dir.join(ANNOTATION_FILE);
    let json = serde_json::to_string(&file).map_err(|source| CocoError::Json { path: ann_path.clone(), source })?;
    fs::write(&ann_path, json).map_err(io_err(&ann_path))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest_csv(&[dataset.manifest()])).map_err(io_err(&manifest_path))?;
    Ok(())
}

pub fn manifest_csv(rows: &[DatasetManifest]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["name", "image_count", "instance_count", "shift_tags"]).expect("in-memory write");
    for m in rows {
        let tags = m.shift_tags.iter().map(ToString::to_string).collect::<Vec<_>>().join(";");
        w.write_record([m.name.clone(), m.image_count.to_string(), m.instance_count.to_string(), tags]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

pub fn parse_manifest_csv(text: &str) -> Result<Vec<DatasetManifest>, CocoError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CocoError::Manifest(e.to_string()))?;
        let bad = |what: &str| CocoError::Manifest(format!("row {}: bad {what}", line + 1));
        let field = |i: usize| rec.get(i).unwrap_or("");
        out.push(DatasetManifest {
            name: field(0).to_string(),
            image_count: field(1).parse().map_err(|_| bad("image_count"))?,
            instance_count: field(2).parse().map_err(|_| bad("instance_count"))?,
            shift_tags: field(3).split(';').filter(|s| !s.is_empty()).map(|s| s.parse().map_err(|_| bad("shift_tags"))).collect::<Result<_, _>>()?,
        });
    }
    Ok(out)
}

/// Splits per stratum, sending `round(n * val_fraction)` images of each
/// stratum to validation. Strata with fewer than two images stay in train.
pub fn split(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), CocoError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(CocoError::Fraction(val_fraction));
    }
    let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        strata.entry(s.stratum.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_idx = BTreeSet::new();
    for (name, mut idx) in strata {
        if idx.len() < 2 {
            log::warn!("stratum `{name}` has {} image(s); kept wholly in train", idx.len());
            continue;
        }
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * val_fraction).round() as usize).clamp(1, idx.len() - 1);
        val_idx.extend(idx.into_iter().take(n_val));
    }
    let part = |suffix: &str, want_val: bool| Dataset {
        name: format!("{}-{suffix}", dataset.name),
        samples: (0..dataset.samples.len()).filter(|i| val_idx.contains(i) == want_val).map(|i| dataset.samples[i].clone()).collect(),
        shift_tags: dataset.shift_tags.clone(),
    };
    Ok((part("train", false), part("val", true)))
}
