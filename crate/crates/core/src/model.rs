//! Stream networks shared by the global and face branches.
//!
//! Layout of one stream:
//!
//! ```text
//! image -> conv(s1) -> conv(s2) -> conv(s2) = F          (backbone, 1/4 resolution)
//! F -> sigmoid(1x1 conv(F)) = attention map               (optional attention module)
//! F_att = F ⊗ attention                                   (channel-broadcast product)
//! F_att -> {global, upper part, lower part, channel half} (multi-branch head)
//!       -> per branch: pooled -> embedding (no bias) -> classifier logits
//! ```
//!
//! The head only ever sees `F_att`; without the attention module `F_att = F`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{he_normal, normal, ParamStore};
use crate::seed;
use crate::tensor::Tensor;

/// Number of embedding groups produced by the head.
pub const NUM_BRANCHES: usize = 4;
pub const BRANCH_NAMES: [&str; NUM_BRANCHES] = ["global", "upper", "lower", "channel"];
/// Group count of the normalization after each backbone convolution.
pub const NORM_GROUPS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// `[height, width]` of the input image.
    pub input_dims: [usize; 2],
    /// Output channels of the three backbone convolutions; the last is `c_f`.
    pub channels: [usize; 3],
    pub embed_dim: usize,
    pub num_classes: usize,
    pub use_cam: bool,
}

impl NetConfig {
    pub fn feature_dims(&self) -> [usize; 3] {
        [self.input_dims[0] / 4, self.input_dims[1] / 4, self.channels[2]]
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_dims;
        if h < 8 || w < 8 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!("network input {h}x{w} must be multiples of 4, at least 8")));
        }
        if self.channels.iter().any(|&c| c == 0 || c % NORM_GROUPS != 0) {
            return Err(Error::Config(format!(
                "backbone channels {:?} must be positive multiples of {NORM_GROUPS}",
                self.channels
            )));
        }
        if self.embed_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config("embed_dim must be positive and num_classes at least 2".into()));
        }
        Ok(())
    }

    /// Total embedding length after concatenating all branches.
    pub fn embedding_len(&self) -> usize {
        NUM_BRANCHES * self.embed_dim
    }
}

/// Mid-level activation `F` of one sample, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
}

impl FeatureMap {
    /// From a `[c, h, w]` tensor.
    pub fn new(data: Tensor) -> Result<Self> {
        if data.ndim() != 3 {
            return shape_err(format!("feature map must be [c, h, w], got {:?}", data.shape()));
        }
        Ok(Self { data })
    }

    /// From a row-major `h × w × c` buffer.
    pub fn from_hwc(h: usize, w: usize, c: usize, hwc: &[f64]) -> Result<Self> {
        if hwc.len() != h * w * c {
            return shape_err("feature buffer length does not match h*w*c");
        }
        let mut out = vec![0.0; h * w * c];
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    out[(k * h + i) * w + j] = hwc[(i * w + j) * c + k];
                }
            }
        }
        Self::new(Tensor::new(vec![c, h, w], out)?)
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data.data()[(c * self.height() + i) * self.width() + j]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    fn batched(&self) -> Tensor {
        let s = self.data.shape();
        self.data.clone().reshape(vec![1, s[0], s[1], s[2]]).expect("same size")
    }
}

/// Single-channel attention map with entries in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl AttentionMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err("attention buffer does not match its dims");
        }
        Ok(Self { height, width, data })
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Point-wise filters and bias of the attention module.
#[derive(Debug, Clone, PartialEq)]
pub struct CamParams {
    pub filters: Vec<f64>,
    pub bias: f64,
}

impl CamParams {
    fn into_store(self) -> ParamStore {
        let c = self.filters.len();
        let mut ps = ParamStore::new();
        ps.insert("cam.w", Tensor::new(vec![1, c, 1, 1], self.filters).expect("sized"));
        ps.insert("cam.b", Tensor::new(vec![1], vec![self.bias]).expect("sized"));
        ps
    }

    pub fn from_store(ps: &ParamStore) -> Option<Self> {
        Some(Self {
            filters: ps.get("cam.w")?.data().to_vec(),
            bias: ps.get("cam.b")?.item(),
        })
    }
}

/// Grouped outputs of one stream for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGroups {
    pub logits: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
}

impl EmbeddingGroups {
    /// Concatenation of every branch's pre-classifier feature.
    pub fn concat_features(&self) -> Vec<f64> {
        self.features.concat()
    }
}

/// Graph handles for a batch forward pass.
pub struct StreamOutputs {
    pub feature_map: Var,
    pub attention: Option<Var>,
    pub attended: Var,
    /// One `[N, num_classes]` node per branch.
    pub logits: Vec<Var>,
    /// One `[N, embed_dim]` node per branch.
    pub features: Vec<Var>,
}

fn name_seed(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Initialize every parameter of a stream. Each tensor draws from its own
/// stream keyed by `(seed, name)`.
pub fn init_params(cfg: &NetConfig, seed_value: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut ps = ParamStore::new();
    let rng_for = |name: &str| seed::rng(seed_value, &[seed::INIT, name_seed(name)]);
    let [c1, c2, cf] = cfg.channels;
    for (i, (cin, cout)) in [(3, c1), (c1, c2), (c2, cf)].into_iter().enumerate() {
        let w = format!("backbone.conv{}.w", i + 1);
        let mut rng = rng_for(&w);
        ps.insert(w, he_normal(&mut rng, &[cout, cin, 3, 3], cin * 9));
        ps.insert(format!("backbone.conv{}.b", i + 1), Tensor::zeros(&[cout]));
        ps.insert(format!("backbone.norm{}.gamma", i + 1), Tensor::full(&[cout], 1.0));
        ps.insert(format!("backbone.norm{}.beta", i + 1), Tensor::zeros(&[cout]));
    }
    if cfg.use_cam {
        let mut rng = rng_for("cam.w");
        ps.insert("cam.w", normal(&mut rng, &[1, cf, 1, 1], 0.01));
        // pass-through-leaning start: sigmoid(1) ≈ 0.73
        ps.insert("cam.b", Tensor::new(vec![1], vec![1.0])?);
    }
    let d = cfg.embed_dim;
    for branch in BRANCH_NAMES {
        let pooled = if branch == "channel" { cf - cf / 2 } else { cf };
        let e = format!("mbn.{branch}.embed.w");
        let mut rng = rng_for(&e);
        ps.insert(e, he_normal(&mut rng, &[d, pooled], pooled));
        let c = format!("mbn.{branch}.cls.w");
        let mut rng = rng_for(&c);
        ps.insert(c, normal(&mut rng, &[cfg.num_classes, d], 1.0 / (d as f64).sqrt()));
        ps.insert(format!("mbn.{branch}.cls.b"), Tensor::zeros(&[cfg.num_classes]));
    }
    Ok(ps)
}

/// Binds stored parameters into a graph, either as trainable leaves or constants.
pub struct Binder<'a> {
    params: &'a ParamStore,
    prefix: &'a str,
    trainable: bool,
}

impl<'a> Binder<'a> {
    /// `prefix` is prepended to names in the gradient map so several streams can share one graph.
    pub fn new(params: &'a ParamStore, prefix: &'a str, trainable: bool) -> Self {
        Self {
            params,
            prefix,
            trainable,
        }
    }

    pub fn get(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))?;
        Ok(if self.trainable {
            g.param(&format!("{}{name}", self.prefix), t)
        } else {
            g.input(t.clone())
        })
    }
}

pub fn backbone(g: &mut Graph, b: &Binder, x: Var) -> Result<Var> {
    let mut h = x;
    for (i, stride) in [1, 2, 2].into_iter().enumerate() {
        let w = b.get(g, &format!("backbone.conv{}.w", i + 1))?;
        let bias = b.get(g, &format!("backbone.conv{}.b", i + 1))?;
        let gamma = b.get(g, &format!("backbone.norm{}.gamma", i + 1))?;
        let beta = b.get(g, &format!("backbone.norm{}.beta", i + 1))?;
        h = g.conv2d(h, w, Some(bias), stride, 1)?;
        h = g.group_norm(h, gamma, beta, NORM_GROUPS)?;
        if i < 2 {
            h = g.relu(h);
        }
    }
    Ok(h)
}

pub fn cam(g: &mut Graph, b: &Binder, f: Var) -> Result<Var> {
    let w = b.get(g, "cam.w")?;
    let bias = b.get(g, "cam.b")?;
    let logits = g.conv2d(f, w, Some(bias), 1, 0)?;
    Ok(g.sigmoid(logits))
}

/// Multi-branch head over the attended map.
pub fn mbn(g: &mut Graph, b: &Binder, f_att: Var) -> Result<(Vec<Var>, Vec<Var>)> {
    let s = g.value(f_att).shape().to_vec();
    if s.len() != 4 || s[2] < 2 || s[1] < 2 {
        return shape_err(format!("head needs a [N, C>=2, H>=2, W] map, got {s:?}"));
    }
    let (c, h) = (s[1], s[2]);
    let regions = [(0..c, 0..h), (0..c, 0..h / 2), (0..c, h / 2..h), (c / 2..c, 0..h)];
    let mut logits = Vec::with_capacity(NUM_BRANCHES);
    let mut features = Vec::with_capacity(NUM_BRANCHES);
    for (branch, (channels, rows)) in BRANCH_NAMES.iter().zip(regions) {
        let pooled = g.region_mean(f_att, channels, rows)?;
        let e = b.get(g, &format!("mbn.{branch}.embed.w"))?;
        // fixed-norm embeddings, so the metric loss cannot shrink the feature scale
        let raw = g.linear(pooled, e, None)?;
        let feat = g.row_normalize(raw)?;
        let cw = b.get(g, &format!("mbn.{branch}.cls.w"))?;
        let cb = b.get(g, &format!("mbn.{branch}.cls.b"))?;
        logits.push(g.linear(feat, cw, Some(cb))?);
        features.push(feat);
    }
    Ok((logits, features))
}

/// Full stream forward over a `[N, 3, H, W]` batch.
pub fn stream_forward(g: &mut Graph, b: &Binder, cfg: &NetConfig, x: Var) -> Result<StreamOutputs> {
    let s = g.value(x).shape();
    if s.len() != 4 || s[1] != 3 || s[2] != cfg.input_dims[0] || s[3] != cfg.input_dims[1] {
        return shape_err(format!(
            "input {:?} does not match configured {:?}x3",
            s, cfg.input_dims
        ));
    }
    let f = backbone(g, b, x)?;
    let (attention, attended) = if cfg.use_cam {
        let a = cam(g, b, f)?;
        (Some(a), g.attend(f, a)?)
    } else {
        (None, f)
    };
    let (logits, features) = mbn(g, b, attended)?;
    Ok(StreamOutputs {
        feature_map: f,
        attention,
        attended,
        logits,
        features,
    })
}

/// Stack CHW images into a batch tensor.
pub fn batch_images(images: &[&Tensor]) -> Result<Tensor> {
    Tensor::stack(images)
}

fn image_to_batch(image: &Tensor) -> Result<Tensor> {
    if image.ndim() != 3 || image.shape()[2] != 3 {
        return shape_err(format!("image must be H x W x 3, got {:?}", image.shape()));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    Ok(crate::synth::hwc_to_chw(image.data(), h, w).reshape(vec![1, 3, h, w])?)
}

/// Backbone on one `H × W × 3` image.
pub fn backbone_forward(image: &Tensor, params: &ParamStore, cfg: &NetConfig) -> Result<FeatureMap> {
    if image.ndim() != 3 || image.shape()[..2] != cfg.input_dims {
        return shape_err(format!("image {:?} does not match configured {:?}", image.shape(), cfg.input_dims));
    }
    let mut g = Graph::new();
    let x = g.input(image_to_batch(image)?);
    let f = backbone(&mut g, &Binder::new(params, "", false), x)?;
    FeatureMap::new(g.value(f).index0(0))
}

/// `σ(Σ_c w_c·F(i,j,c) + b)` at every location.
pub fn cam_forward(f: &FeatureMap, params: &CamParams) -> Result<AttentionMap> {
    if params.filters.len() != f.channels() {
        return shape_err(format!(
            "attention filters have depth {}, feature map has {} channels",
            params.filters.len(),
            f.channels()
        ));
    }
    let store = params.clone().into_store();
    let mut g = Graph::new();
    let x = g.input(f.batched());
    let a = cam(&mut g, &Binder::new(&store, "", false), x)?;
    AttentionMap::new(f.height(), f.width(), g.value(a).data().to_vec())
}

/// `F ⊗ Ψ̂` with `Ψ̂` broadcast across channels.
pub fn apply_attention(f: &FeatureMap, att: &AttentionMap) -> Result<FeatureMap> {
    if att.height != f.height() || att.width != f.width() {
        return shape_err(format!(
            "attention {}x{} does not match feature map {}x{}",
            att.height,
            att.width,
            f.height(),
            f.width()
        ));
    }
    let mut g = Graph::new();
    let x = g.input(f.batched());
    let a = g.input(Tensor::new(vec![1, 1, att.height, att.width], att.data.clone())?);
    let y = g.attend(x, a)?;
    FeatureMap::new(g.value(y).index0(0))
}

/// Head on one attended feature map.
pub fn mbn_forward(f_att: &FeatureMap, params: &ParamStore) -> Result<EmbeddingGroups> {
    let mut g = Graph::new();
    let x = g.input(f_att.batched());
    let (logits, features) = mbn(&mut g, &Binder::new(params, "", false), x)?;
    Ok(EmbeddingGroups {
        logits: logits.iter().map(|v| g.value(*v).data().to_vec()).collect(),
        features: features.iter().map(|v| g.value(*v).data().to_vec()).collect(),
    })
}

/// Inference output for one sample.
#[derive(Debug, Clone)]
pub struct StreamResult {
    pub groups: EmbeddingGroups,
    pub attention: Option<AttentionMap>,
}

/// A stream network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamNet {
    pub cfg: NetConfig,
    pub params: ParamStore,
}

impl StreamNet {
    pub fn new(cfg: NetConfig, seed_value: u64) -> Result<Self> {
        let params = init_params(&cfg, seed_value)?;
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: NetConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let expected = init_params(&cfg, 0)?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return shape_err(format!("parameter {name} has shape {:?}, expected {:?}", p.shape(), t.shape()))
                }
                None => return Err(Error::State(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { cfg, params })
    }

    /// Evaluation-mode forward over CHW images, in chunks.
    pub fn infer(&self, images: &[&Tensor]) -> Result<Vec<StreamResult>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut g = Graph::new();
            let x = g.input(batch_images(chunk)?);
            let o = stream_forward(&mut g, &Binder::new(&self.params, "", false), &self.cfg, x)?;
            for n in 0..chunk.len() {
                let groups = EmbeddingGroups {
                    logits: o.logits.iter().map(|v| g.value(*v).row(n).to_vec()).collect(),
                    features: o.features.iter().map(|v| g.value(*v).row(n).to_vec()).collect(),
                };
                let attention = match o.attention {
                    Some(a) => {
                        let t = g.value(a).index0(n);
                        let (h, w) = (t.shape()[1], t.shape()[2]);
                        Some(AttentionMap::new(h, w, t.into_data())?)
                    }
                    None => None,
                };
                out.push(StreamResult { groups, attention });
            }
        }
        Ok(out)
    }
}
