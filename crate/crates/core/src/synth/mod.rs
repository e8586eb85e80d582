//! Procedural cloth-changing re-identification dataset.
//!
//! The generator renders people with exact parsing masks and face boxes, and
//! writes a clean and a degraded crop of every visible face. Identities are
//! split disjointly: the first `train_fraction` of identities are training
//! identities, the rest are divided into query and gallery by
//! [`split_protocol`].

pub mod degrade;
pub mod render;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub use degrade::{degrade_face, DegradeConfig};
pub use render::{FaceBox, Outfit, PersonSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub code: u8,
    pub name: String,
    pub is_cloth_related: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryTable(pub Vec<Category>);

impl Default for CategoryTable {
    fn default() -> Self {
        let entries = [
            (render::BACKGROUND, "background", false),
            (render::HEAD, "head", false),
            (render::ARM, "arm", false),
            (render::LEG, "leg", false),
            (render::UPPER_CLOTHES, "upper-clothes", true),
            (render::LOWER_CLOTHES, "lower-clothes", true),
        ];
        CategoryTable(
            entries
                .iter()
                .map(|&(code, name, cloth)| Category {
                    code,
                    name: name.to_string(),
                    is_cloth_related: cloth,
                })
                .collect(),
        )
    }
}

impl CategoryTable {
    /// The cloth-related code set.
    pub fn cloth_codes(&self) -> BTreeSet<u8> {
        self.0.iter().filter(|c| c.is_cloth_related).map(|c| c.code).collect()
    }

    pub fn contains(&self, code: u8) -> bool {
        self.0.iter().any(|c| c.code == code)
    }

    pub fn code_of(&self, name: &str) -> Option<u8> {
        self.0.iter().find(|c| c.name == name).map(|c| c.code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
    /// Test-identity samples that the active protocol leaves out.
    Unused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    CrossClothes,
    SameClothes,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_clothes" | "cross-clothes" => Ok(Protocol::CrossClothes),
            "same_clothes" | "same-clothes" => Ok(Protocol::SameClothes),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub num_identities: usize,
    pub outfits_per_identity: usize,
    pub samples_per_outfit: usize,
    /// `[height, width]`
    pub image_dims: [usize; 2],
    pub face_dims: [usize; 2],
    pub faceless_fraction: f64,
    /// Fraction of identities used for training; the rest are test identities.
    pub train_fraction: f64,
    pub downscale_factor: usize,
    pub degrade_noise_std: f64,
    pub image_noise_std: f64,
    pub protocol: Protocol,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_identities: 20,
            outfits_per_identity: 3,
            samples_per_outfit: 6,
            image_dims: [64, 32],
            face_dims: [16, 16],
            faceless_fraction: 0.1,
            train_fraction: 0.5,
            downscale_factor: 4,
            degrade_noise_std: 0.05,
            image_noise_std: 0.02,
            protocol: Protocol::CrossClothes,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.num_identities < 2 {
            return cfg_err("num_identities must be at least 2".into());
        }
        if self.outfits_per_identity < 2 {
            return cfg_err("outfits_per_identity must be at least 2".into());
        }
        if self.samples_per_outfit < 1 {
            return cfg_err("samples_per_outfit must be at least 1".into());
        }
        let [h, w] = self.image_dims;
        if h == 0 || w == 0 {
            return cfg_err(format!("image dims must be positive, got {h}x{w}"));
        }
        if h < 32 || w < 16 || h % 4 != 0 || w % 4 != 0 {
            return cfg_err(format!("image dims must be multiples of 4 and at least 32x16, got {h}x{w}"));
        }
        let [fh, fw] = self.face_dims;
        if fh == 0 || fw == 0 {
            return cfg_err(format!("face dims must be positive, got {fh}x{fw}"));
        }
        if fh < 4 || fw < 4 || fh % 4 != 0 || fw % 4 != 0 {
            return cfg_err(format!("face dims must be multiples of 4, got {fh}x{fw}"));
        }
        if !(0.0..=1.0).contains(&self.faceless_fraction) {
            return cfg_err("faceless_fraction must lie in [0, 1]".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return cfg_err("train_fraction must lie in (0, 1)".into());
        }
        if self.downscale_factor < 2 || self.downscale_factor > fh.min(fw) {
            return cfg_err(format!("downscale_factor {} invalid for face dims {fh}x{fw}", self.downscale_factor));
        }
        if !(self.degrade_noise_std >= 0.0 && self.image_noise_std >= 0.0) {
            return cfg_err("noise levels must be non-negative".into());
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.num_identities * self.outfits_per_identity * self.samples_per_outfit
    }

    pub fn num_train_identities(&self) -> usize {
        let n = (self.num_identities as f64 * self.train_fraction).round() as usize;
        n.clamp(1, self.num_identities - 1)
    }

    /// Number of faceless samples: `round(faceless_fraction · total)`.
    pub fn num_faceless(&self) -> usize {
        (self.faceless_fraction * self.total_samples() as f64).round() as usize
    }

    /// `(identity_id, clothing_id, k)` of a flat sample index.
    pub fn sample_key(&self, index: usize) -> (usize, usize, usize) {
        let per_id = self.outfits_per_identity * self.samples_per_outfit;
        (
            index / per_id,
            (index % per_id) / self.samples_per_outfit,
            index % self.samples_per_outfit,
        )
    }

    /// Flat sample indices that are rendered without a visible face.
    pub fn faceless_indices(&self) -> BTreeSet<usize> {
        let mut idx: Vec<usize> = (0..self.total_samples()).collect();
        idx.shuffle(&mut seed::rng(self.seed, &[seed::FACELESS]));
        idx.into_iter().take(self.num_faceless()).collect()
    }
}

/// One rendered person. Images are HWC with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub index: usize,
    pub image: Vec<f64>,
    pub identity_id: usize,
    pub clothing_id: usize,
    pub parsing_mask: Vec<u8>,
    pub face_box: Option<FaceBox>,
    pub face_clean: Option<Vec<f64>>,
    pub face_degraded: Option<Vec<f64>>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub mask: String,
    pub face_clean: Option<String>,
    pub face_degraded: Option<String>,
    pub face_box: Option<FaceBox>,
    pub identity_id: usize,
    pub clothing_id: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_seed: u64,
    pub category_table: CategoryTable,
    pub samples: Vec<SampleRecord>,
    pub image_dims: [usize; 2],
    pub face_dims: [usize; 2],
}

/// Render sample `index` of the dataset described by `cfg` (no disk access).
pub fn render_sample(cfg: &GenConfig, index: usize, faceless: &BTreeSet<usize>) -> Result<SyntheticSample> {
    let (identity_id, clothing_id, _) = cfg.sample_key(index);
    let [h, w] = cfg.image_dims;
    let [fh, fw] = cfg.face_dims;
    let person = PersonSpec::derive(cfg.seed, identity_id, cfg.outfits_per_identity);
    let outfit = Outfit::derive(cfg.seed, identity_id, clothing_id);
    let mut rng = seed::rng(cfg.seed, &[seed::SAMPLE, index as u64]);
    let pose = render::sample_pose(&mut rng, h, w);
    let face_visible = !faceless.contains(&index);
    let r = render::render_person(&person, &outfit, &pose, face_visible, h, w);
    let mut image = r.image;
    if cfg.image_noise_std > 0.0 {
        let dist = Normal::new(0.0, cfg.image_noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut image {
            *v = (*v + dist.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let (face_clean, face_degraded) = if r.face_box.is_some() {
        let clean = person.face_pattern.render(fh, fw, pose.face_shift, pose.brightness);
        let dcfg = DegradeConfig {
            downscale_factor: cfg.downscale_factor,
            noise_std: cfg.degrade_noise_std,
            seed: seed::derive(cfg.seed, &[seed::DEGRADE, index as u64]),
        };
        let degraded = degrade_face(&clean, fh, fw, &dcfg)?;
        (Some(clean), Some(degraded))
    } else {
        (None, None)
    };
    let split = if identity_id < cfg.num_train_identities() {
        Split::Train
    } else {
        Split::Unused
    };
    Ok(SyntheticSample {
        index,
        image,
        identity_id,
        clothing_id,
        parsing_mask: r.mask,
        face_box: r.face_box,
        face_clean,
        face_degraded,
        split,
    })
}

/// Render every sample in memory.
pub fn synthesize(cfg: &GenConfig) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let faceless = cfg.faceless_indices();
    (0..cfg.total_samples()).map(|i| render_sample(cfg, i, &faceless)).collect()
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_rgb(path: &Path, data: &[f64], h: usize, w: usize) -> Result<()> {
    let bytes: Vec<u8> = data.iter().map(|&v| quantize(v)).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Shape(format!("buffer does not match {h}x{w}x3")))?;
    img.save(path).map_err(|e| image_err(path, e))
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Render the dataset to `root` and write `manifest.json`.
pub fn generate_dataset(cfg: &GenConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    for sub in ["images", "masks", "faces/clean", "faces/degraded"] {
        create_dir(&root.join(sub))?;
    }
    let [h, w] = cfg.image_dims;
    let [fh, fw] = cfg.face_dims;
    let faceless = cfg.faceless_indices();
    let mut samples = Vec::with_capacity(cfg.total_samples());
    for index in 0..cfg.total_samples() {
        let s = render_sample(cfg, index, &faceless)?;
        let (id, outfit, k) = cfg.sample_key(index);
        let stem = format!("{id}_{outfit}_{k}.png");
        let image = format!("images/{stem}");
        let mask = format!("masks/{stem}");
        write_rgb(&root.join(&image), &s.image, h, w)?;
        let gray = image::GrayImage::from_raw(w as u32, h as u32, s.parsing_mask.clone())
            .ok_or_else(|| Error::Shape("mask buffer size".into()))?;
        gray.save(root.join(&mask)).map_err(|e| image_err(&root.join(&mask), e))?;
        let (face_clean, face_degraded) = match (&s.face_clean, &s.face_degraded) {
            (Some(clean), Some(degraded)) => {
                let c = format!("faces/clean/{stem}");
                let d = format!("faces/degraded/{stem}");
                write_rgb(&root.join(&c), clean, fh, fw)?;
                write_rgb(&root.join(&d), degraded, fh, fw)?;
                (Some(c), Some(d))
            }
            _ => (None, None),
        };
        samples.push(SampleRecord {
            image,
            mask,
            face_clean,
            face_degraded,
            face_box: s.face_box,
            identity_id: s.identity_id,
            clothing_id: s.clothing_id,
            split: s.split,
        });
    }
    let manifest = DatasetManifest {
        dataset_seed: cfg.seed,
        category_table: CategoryTable::default(),
        samples,
        image_dims: cfg.image_dims,
        face_dims: cfg.face_dims,
    };
    let manifest = split_protocol(manifest, cfg.protocol)?;
    manifest.save(root)?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn num_identities(&self) -> usize {
        self.samples.iter().map(|s| s.identity_id + 1).max().unwrap_or(0)
    }

    /// Checks the query/gallery invariants of `protocol`.
    pub fn check_protocol(&self, protocol: Protocol) -> Result<()> {
        let mut gallery: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for s in self.samples.iter().filter(|s| s.split == Split::Gallery) {
            gallery.entry(s.identity_id).or_default().push(s.clothing_id);
        }
        for (i, q) in self.samples.iter().enumerate().filter(|(_, s)| s.split == Split::Query) {
            let Some(clothes) = gallery.get(&q.identity_id) else {
                return Err(Error::Protocol(format!("query {i} has no gallery identity")));
            };
            let ok = match protocol {
                Protocol::CrossClothes => clothes.iter().all(|&c| c != q.clothing_id),
                Protocol::SameClothes => clothes.iter().all(|&c| c == q.clothing_id),
            };
            if !ok {
                return Err(Error::Protocol(format!("query {i} violates {protocol:?}")));
            }
        }
        Ok(())
    }
}

/// Assign query/gallery splits among the non-training samples.
///
/// Cross-clothes: each test identity's outfit 0 forms the queries and its
/// other outfits the gallery. Same-clothes: outfit 0 only, the first half of
/// its samples (rounded up) as queries and the rest as gallery; the other
/// outfits are marked unused.
pub fn split_protocol(mut manifest: DatasetManifest, protocol: Protocol) -> Result<DatasetManifest> {
    let mut by_identity: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        if s.split != Split::Train {
            by_identity.entry(s.identity_id).or_default().entry(s.clothing_id).or_default().push(i);
        }
    }
    if by_identity.is_empty() {
        return Err(Error::Protocol("manifest has no test identities".into()));
    }
    for (id, outfits) in &by_identity {
        match protocol {
            Protocol::CrossClothes => {
                if outfits.len() < 2 {
                    return Err(Error::Protocol(format!(
                        "identity {id} has a single outfit; cross-clothes needs two"
                    )));
                }
                let first = *outfits.keys().next().expect("non-empty");
                for (&c, idx) in outfits {
                    for &i in idx {
                        manifest.samples[i].split = if c == first { Split::Query } else { Split::Gallery };
                    }
                }
            }
            Protocol::SameClothes => {
                let (&first, idx) = outfits.iter().next().expect("non-empty");
                if idx.len() < 2 {
                    return Err(Error::Protocol(format!(
                        "identity {id} outfit {first} has one sample; same-clothes needs two"
                    )));
                }
                let nq = idx.len().div_ceil(2);
                for (&c, idx) in outfits {
                    for (k, &i) in idx.iter().enumerate() {
                        manifest.samples[i].split = if c != first {
                            Split::Unused
                        } else if k < nq {
                            Split::Query
                        } else {
                            Split::Gallery
                        };
                    }
                }
            }
        }
    }
    manifest.check_protocol(protocol)?;
    Ok(manifest)
}

/// A manifest sample decoded into network-ready CHW tensors.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub index: usize,
    pub image: Tensor,
    pub mask: Vec<u8>,
    pub face_clean: Option<Tensor>,
    pub face_degraded: Option<Tensor>,
    pub identity_id: usize,
    pub clothing_id: usize,
    pub split: Split,
}

impl LoadedSample {
    pub fn has_face(&self) -> bool {
        self.face_clean.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<LoadedSample>,
}

fn read_rgb_chw(path: &Path, h: usize, w: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    if img.height() as usize != h || img.width() as usize != w {
        return Err(Error::Shape(format!(
            "{} is {}x{}, expected {h}x{w}",
            path.display(),
            img.height(),
            img.width()
        )));
    }
    let raw = img.into_raw();
    Ok(hwc_to_chw(&raw.iter().map(|&b| b as f64 / 255.0).collect::<Vec<_>>(), h, w))
}

/// HWC buffer to a `[3, h, w]` tensor.
pub fn hwc_to_chw(data: &[f64], h: usize, w: usize) -> Tensor {
    let mut out = vec![0.0; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            for k in 0..3 {
                out[(k * h + r) * w + c] = data[(r * w + c) * 3 + k];
            }
        }
    }
    Tensor::new(vec![3, h, w], out).expect("consistent dims")
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(root)?;
        let [h, w] = manifest.image_dims;
        let [fh, fw] = manifest.face_dims;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for (index, rec) in manifest.samples.iter().enumerate() {
            let image = read_rgb_chw(&root.join(&rec.image), h, w)?;
            let mask_path = root.join(&rec.mask);
            let mask = image::open(&mask_path).map_err(|e| image_err(&mask_path, e))?.to_luma8().into_raw();
            for &code in &mask {
                if !manifest.category_table.contains(code) {
                    return Err(Error::Data(format!("{}: unknown category code {code}", mask_path.display())));
                }
            }
            let face_clean = rec.face_clean.as_ref().map(|p| read_rgb_chw(&root.join(p), fh, fw)).transpose()?;
            let face_degraded = rec.face_degraded.as_ref().map(|p| read_rgb_chw(&root.join(p), fh, fw)).transpose()?;
            if face_clean.is_some() != face_degraded.is_some() || face_clean.is_some() != rec.face_box.is_some() {
                return Err(Error::Data(format!("sample {index}: inconsistent face fields")));
            }
            samples.push(LoadedSample {
                index,
                image,
                mask,
                face_clean,
                face_degraded,
                identity_id: rec.identity_id,
                clothing_id: rec.clothing_id,
                split: rec.split,
            });
        }
        Ok(Self { manifest, samples })
    }

    /// Build directly from in-memory renders (quantized like the on-disk path).
    pub fn from_synthetic(cfg: &GenConfig) -> Result<Self> {
        let rendered = synthesize(cfg)?;
        let [h, w] = cfg.image_dims;
        let [fh, fw] = cfg.face_dims;
        let q = |v: &[f64]| v.iter().map(|&x| quantize(x) as f64 / 255.0).collect::<Vec<_>>();
        let mut records = Vec::new();
        let mut samples = Vec::new();
        for s in rendered {
            let (id, outfit, k) = cfg.sample_key(s.index);
            let stem = format!("{id}_{outfit}_{k}.png");
            records.push(SampleRecord {
                image: format!("images/{stem}"),
                mask: format!("masks/{stem}"),
                face_clean: s.face_clean.as_ref().map(|_| format!("faces/clean/{stem}")),
                face_degraded: s.face_degraded.as_ref().map(|_| format!("faces/degraded/{stem}")),
                face_box: s.face_box,
                identity_id: s.identity_id,
                clothing_id: s.clothing_id,
                split: s.split,
            });
            samples.push(LoadedSample {
                index: s.index,
                image: hwc_to_chw(&q(&s.image), h, w),
                mask: s.parsing_mask,
                face_clean: s.face_clean.as_deref().map(|f| hwc_to_chw(&q(f), fh, fw)),
                face_degraded: s.face_degraded.as_deref().map(|f| hwc_to_chw(&q(f), fh, fw)),
                identity_id: s.identity_id,
                clothing_id: s.clothing_id,
                split: s.split,
            });
        }
        let manifest = DatasetManifest {
            dataset_seed: cfg.seed,
            category_table: CategoryTable::default(),
            samples: records,
            image_dims: cfg.image_dims,
            face_dims: cfg.face_dims,
        };
        let manifest = split_protocol(manifest, cfg.protocol)?;
        for (s, r) in samples.iter_mut().zip(&manifest.samples) {
            s.split = r.split;
        }
        Ok(Self { manifest, samples })
    }

    pub fn with_protocol(mut self, protocol: Protocol) -> Result<Self> {
        self.manifest = split_protocol(self.manifest, protocol)?;
        for (s, r) in self.samples.iter_mut().zip(&self.manifest.samples) {
            s.split = r.split;
        }
        Ok(self)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest.indices(split)
    }

    pub fn num_identities(&self) -> usize {
        self.manifest.num_identities()
    }
}
