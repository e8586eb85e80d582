//! Two-phase training: teacher pretraining on clean faces, then joint
//! training of the global stream and the face student against a frozen teacher.

mod sampler;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use sampler::{sample_batch, BatchSampler};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::face::{check_alignment, freeze_teacher, FaceNet, FaceRole};
use crate::losses::{
    self, cloth_irrelevant_mask, coefficients, total_loss, LossParts, LossWeights, ResizeMode, Term,
};
use crate::model::{stream_forward, Binder, NetConfig, StreamNet};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::seed;
use crate::synth::{Dataset, LoadedSample, Split};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceVariant {
    /// Student trained without knowledge propagation.
    StudentPlain,
    /// Student trained with knowledge propagation.
    StudentDistilled,
    /// Frozen teacher on clean faces in place of the student.
    Teacher,
}

/// Component switches. The named presets reproduce the ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_global_stream: bool,
    pub use_cam: bool,
    pub use_att_loss: bool,
    pub use_face_stream: bool,
    pub face_variant: FaceVariant,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::preset("deskpro").expect("known preset")
    }
}

impl Ablation {
    pub const PRESETS: [&'static str; 9] = ["1", "2", "3", "4", "5", "6", "7", "deskpro", "deskpro+"];

    pub fn preset(name: &str) -> Result<Self> {
        let global = |cam, att| Self {
            use_global_stream: true,
            use_cam: cam,
            use_att_loss: att,
            use_face_stream: false,
            face_variant: FaceVariant::StudentDistilled,
        };
        let face = |variant| Self {
            use_global_stream: false,
            use_cam: false,
            use_att_loss: false,
            use_face_stream: true,
            face_variant: variant,
        };
        let both = |variant| Self {
            use_face_stream: true,
            face_variant: variant,
            ..global(true, true)
        };
        Ok(match name {
            "1" => global(false, false),
            "2" => global(true, false),
            "3" => global(true, true),
            "4" => face(FaceVariant::StudentPlain),
            "5" => face(FaceVariant::StudentDistilled),
            "6" => face(FaceVariant::Teacher),
            "7" => both(FaceVariant::StudentPlain),
            "deskpro" => both(FaceVariant::StudentDistilled),
            "deskpro+" => both(FaceVariant::Teacher),
            other => return Err(Error::Config(format!("unknown ablation preset {other:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_global_stream && !self.use_face_stream {
            return Err(Error::Config("at least one stream must be enabled".into()));
        }
        if !self.use_global_stream && (self.use_cam || self.use_att_loss) {
            return Err(Error::Config("attention flags need the global stream".into()));
        }
        if self.use_att_loss && !self.use_cam {
            return Err(Error::Config("use_att_loss needs use_cam".into()));
        }
        Ok(())
    }

    pub fn trains_student(&self) -> bool {
        self.use_face_stream && self.face_variant != FaceVariant::Teacher
    }

    pub fn needs_teacher(&self) -> bool {
        self.use_face_stream && self.face_variant != FaceVariant::StudentPlain
    }

    /// The single-stream configurations this one is made of.
    pub fn components(&self) -> (Option<Ablation>, Option<Ablation>) {
        let global = self.use_global_stream.then_some(Ablation {
            use_face_stream: false,
            face_variant: FaceVariant::StudentDistilled,
            ..*self
        });
        let face = self.use_face_stream.then_some(Ablation {
            use_global_stream: false,
            use_cam: false,
            use_att_loss: false,
            ..*self
        });
        (global, face)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: a.learning_rate,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
        }
    }
}

impl OptimizerConfig {
    fn build(&self) -> Result<Adam> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        match self.kind {
            OptimizerKind::Adam => Ok(Adam::new(AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            })),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: [usize; 3],
    pub face_channels: [usize; 3],
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 32],
            face_channels: [16, 32, 32],
            embed_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub teacher_steps: u64,
    pub optimizer: OptimizerConfig,
    pub batch_p: usize,
    pub batch_k: usize,
    pub loss: LossWeights,
    /// Mask value on cloth cells.
    pub epsilon: f64,
    pub mask_resize: ResizeMode,
    pub ablation: Ablation,
    pub model: ModelConfig,
    /// Size of each probe set (held-out for attention, training and held-out for KL).
    pub probe_size: usize,
    pub teacher_checkpoint: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            teacher_steps: 2000,
            optimizer: OptimizerConfig::default(),
            batch_p: 4,
            batch_k: 4,
            loss: LossWeights::default(),
            epsilon: 0.1,
            mask_resize: ResizeMode::Area,
            ablation: Ablation::default(),
            model: ModelConfig::default(),
            probe_size: 32,
            teacher_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.ablation.validate()?;
        self.optimizer.build()?;
        if self.batch_p < 2 || self.batch_k < 2 {
            return Err(Error::Config(format!(
                "batch needs P >= 2 and K >= 2, got P={} K={}",
                self.batch_p, self.batch_k
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Weights with the switched-off terms zeroed, as actually optimized.
    pub fn effective_weights(&self) -> LossWeights {
        let a = &self.ablation;
        LossWeights {
            lambda_att: if a.use_att_loss { self.loss.lambda_att } else { 0.0 },
            alpha: if a.trains_student() && a.face_variant == FaceVariant::StudentDistilled {
                self.loss.alpha
            } else {
                0.0
            },
            ..self.loss
        }
    }

    pub fn global_net(&self, dataset: &Dataset, num_classes: usize) -> NetConfig {
        NetConfig {
            input_dims: dataset.manifest.image_dims,
            channels: self.model.channels,
            embed_dim: self.model.embed_dim,
            num_classes,
            use_cam: self.ablation.use_cam,
        }
    }

    pub fn face_net(&self, face_dims: [usize; 2], num_classes: usize) -> NetConfig {
        NetConfig {
            input_dims: face_dims,
            channels: self.model.face_channels,
            embed_dim: self.model.embed_dim,
            num_classes,
            use_cam: false,
        }
    }
}

/// One metrics record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub parts: LossParts,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "step,l_att,l_trip,l_fkp,l_ce_s,l_ce_g,total";

impl MetricRow {
    pub fn to_csv(&self) -> String {
        let p = self.parts.as_array();
        format!("{},{},{},{},{},{},{}", self.step, p[0], p[1], p[2], p[3], p[4], self.total)
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{METRICS_HEADER}").expect("in-memory write");
    for r in rows {
        writeln!(out, "{}", r.to_csv()).expect("in-memory write");
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Mapping from identity id to classifier label over the training split.
pub fn train_labels(dataset: &Dataset) -> BTreeMap<usize, usize> {
    let ids: std::collections::BTreeSet<usize> =
        dataset.samples.iter().filter(|s| s.split == Split::Train).map(|s| s.identity_id).collect();
    ids.into_iter().enumerate().map(|(label, id)| (id, label)).collect()
}

fn scalar_node(g: &mut Graph, term: Term, inputs: &[Var]) -> Result<Var> {
    g.scalar(term.value, inputs.iter().copied().zip(term.grads).collect())
}

fn values(g: &Graph, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|v| g.value(*v).clone()).collect()
}

fn refs(ts: &[Tensor]) -> Vec<&Tensor> {
    ts.iter().collect()
}

/// Result of teacher pretraining.
#[derive(Debug, Clone)]
pub struct TeacherOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRow>,
    pub teacher: FaceNet,
}

fn checkpoint_meta(kind: CheckpointKind, step: u64, dataset: &Dataset, num_classes: usize, cfg: &TrainConfig) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        format_version: FORMAT_VERSION,
        kind,
        step,
        dataset_seed: dataset.manifest.dataset_seed,
        num_classes,
        image_dims: dataset.manifest.image_dims,
        face_dims: dataset.manifest.face_dims,
        config: serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?,
    })
}

/// Pretrain the teacher on clean training faces with CE + batch-hard triplet.
pub fn pretrain_teacher(dataset: &Dataset, cfg: &TrainConfig) -> Result<TeacherOutcome> {
    cfg.validate()?;
    let labels = train_labels(dataset);
    let items: Vec<(usize, usize)> = dataset
        .samples
        .iter()
        .filter(|s| s.split == Split::Train && s.has_face())
        .map(|s| (s.index, s.identity_id))
        .collect();
    if items.is_empty() {
        return Err(Error::Data("no face-bearing training samples for teacher pretraining".into()));
    }
    let sampler = BatchSampler::new(&items, cfg.batch_p, cfg.batch_k, seed::derive(cfg.seed, &[1]))?;
    let net_cfg = cfg.face_net(dataset.manifest.face_dims, labels.len());
    let mut teacher = FaceNet::new(FaceRole::Teacher, net_cfg.clone(), seed::derive(cfg.seed, &[2]))?;
    let mut opt = cfg.optimizer.build()?;
    let mut metrics = Vec::with_capacity(cfg.teacher_steps as usize);
    let weights = LossWeights {
        lambda_att: 0.0,
        alpha: 0.0,
        ..cfg.loss
    };
    for step in 0..cfg.teacher_steps {
        let batch = sampler.batch(step);
        let y: Vec<usize> = batch.iter().map(|&i| labels[&dataset.samples[i].identity_id]).collect();
        let faces: Vec<&Tensor> = batch
            .iter()
            .map(|&i| dataset.samples[i].face_clean.as_ref().expect("face-bearing"))
            .collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::stack(&faces)?);
        let o = stream_forward(&mut g, &teacher.binder(""), &net_cfg, x)?;
        let ce = losses::cross_entropy_term(&refs(&values(&g, &o.logits)), &y)?;
        let trip = losses::triplet_term(&refs(&values(&g, &o.features)), &y, cfg.loss.triplet_margin)?;
        let parts = LossParts {
            l_ce_s: ce.value,
            l_trip: trip.value,
            ..Default::default()
        };
        let total = total_loss(&parts, &weights)?;
        let ce = scalar_node(&mut g, ce, &o.logits)?;
        let trip = scalar_node(&mut g, trip, &o.features)?;
        let root = g.weighted_sum(vec![(ce, 1.0), (trip, 1.0)]);
        let grads = g.backward(root).by_param(&g);
        opt.step(teacher.params_mut()?, &grads);
        metrics.push(MetricRow { step, parts, total });
    }
    teacher.mark_pretrained();
    let mut params = ParamStore::new();
    params.extend_prefixed("teacher.", teacher.params());
    let checkpoint = Checkpoint {
        meta: checkpoint_meta(CheckpointKind::Teacher, cfg.teacher_steps, dataset, labels.len(), cfg)?,
        params,
    };
    Ok(TeacherOutcome {
        checkpoint,
        metrics,
        teacher,
    })
}

/// Rebuild a frozen teacher from its checkpoint and check it against the run.
pub fn load_teacher(ckpt: &Checkpoint, face_cfg: &NetConfig) -> Result<FaceNet> {
    if ckpt.meta.kind != CheckpointKind::Teacher {
        return Err(Error::Config("checkpoint is not a teacher checkpoint".into()));
    }
    let stored: TrainConfig =
        serde_json::from_value(ckpt.meta.config.clone()).map_err(|e| Error::Config(format!("teacher config: {e}")))?;
    let teacher_cfg = stored.face_net(ckpt.meta.face_dims, ckpt.meta.num_classes);
    check_alignment(face_cfg, &teacher_cfg)?;
    if teacher_cfg.channels != face_cfg.channels {
        return Err(Error::Config("teacher backbone channels differ from the student's".into()));
    }
    freeze_teacher(FaceNet::pretrained_teacher(teacher_cfg, ckpt.params.sub("teacher."))?)
}

/// Streams of a trained (or partially trained) model.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub ablation: Ablation,
    pub global: Option<StreamNet>,
    pub student: Option<FaceNet>,
    pub teacher: Option<FaceNet>,
}

impl JointModel {
    pub fn params(&self) -> ParamStore {
        let mut ps = ParamStore::new();
        if let Some(g) = &self.global {
            ps.extend_prefixed("global.", &g.params);
        }
        if let Some(s) = &self.student {
            ps.extend_prefixed("student.", s.params());
        }
        if let Some(t) = &self.teacher {
            ps.extend_prefixed("teacher.", t.params());
        }
        ps
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.kind != CheckpointKind::Joint {
            return Err(Error::Config("checkpoint is not a joint checkpoint".into()));
        }
        let cfg: TrainConfig =
            serde_json::from_value(ckpt.meta.config.clone()).map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let a = cfg.ablation;
        let k = ckpt.meta.num_classes;
        let global = if a.use_global_stream {
            let net = NetConfig {
                input_dims: ckpt.meta.image_dims,
                channels: cfg.model.channels,
                embed_dim: cfg.model.embed_dim,
                num_classes: k,
                use_cam: a.use_cam,
            };
            Some(StreamNet::from_params(net, ckpt.params.sub("global."))?)
        } else {
            None
        };
        let face_cfg = cfg.face_net(ckpt.meta.face_dims, k);
        let student = if a.trains_student() {
            Some(FaceNet::from_params(FaceRole::Student, face_cfg.clone(), ckpt.params.sub("student."))?)
        } else {
            None
        };
        let teacher = if a.needs_teacher() {
            Some(freeze_teacher(FaceNet::pretrained_teacher(face_cfg, ckpt.params.sub("teacher."))?)?)
        } else {
            None
        };
        Ok(Self {
            ablation: a,
            global,
            student,
            teacher,
        })
    }
}

/// Probe measurements. Attention is read on held-out samples; `kl` on a
/// fixed batch of training faces, `kl_held_out` on the held-out ones.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    /// Mean attention over ground-truth cloth pixels.
    pub att_cloth: Option<f64>,
    /// Mean attention over all other pixels.
    pub att_non_cloth: Option<f64>,
    /// Mean over probe samples of `Σ_members KL(teacher ‖ student)` at the training temperature.
    pub kl: Option<f64>,
    #[serde(default)]
    pub kl_held_out: Option<f64>,
}

/// `n` face-bearing samples, held-out (query/gallery) or training, evenly
/// spaced over the candidates so that every identity is represented.
pub fn probe_indices(dataset: &Dataset, n: usize, held_out: bool) -> Vec<usize> {
    let candidates: Vec<usize> = dataset
        .samples
        .iter()
        .filter(|s| s.has_face() && (s.split == Split::Train) != held_out && s.split != Split::Unused)
        .map(|s| s.index)
        .collect();
    let n = n.min(candidates.len());
    (0..n).map(|i| candidates[i * candidates.len() / n]).collect()
}

/// Mean attention over cloth and non-cloth pixels, each pixel reading its feature cell.
pub fn attention_pixel_means(
    net: &StreamNet,
    samples: &[&LoadedSample],
    cloth: &std::collections::BTreeSet<u8>,
) -> Result<(f64, f64)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let out = net.infer(&images)?;
    let [h, w] = net.cfg.input_dims;
    let (mut sc, mut nc, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (s, r) in samples.iter().zip(&out) {
        let a = r
            .attention
            .as_ref()
            .ok_or_else(|| Error::State("network has no attention module".into()))?;
        for row in 0..h {
            for col in 0..w {
                let v = a.at(row * a.height() / h, col * a.width() / w);
                if cloth.contains(&s.mask[row * w + col]) {
                    sc += v;
                    nc += 1;
                } else {
                    so += v;
                    no += 1;
                }
            }
        }
    }
    if nc == 0 || no == 0 {
        return Err(Error::Data("probe set lacks cloth or non-cloth pixels".into()));
    }
    Ok((sc / nc as f64, so / no as f64))
}

/// Mean `Σ_members KL(teacher ‖ student)` over the probe samples.
pub fn probe_kl(student: &FaceNet, teacher: &FaceNet, samples: &[&LoadedSample], tau: f64) -> Result<f64> {
    let deg: Vec<&Tensor> = samples.iter().filter_map(|s| s.face_degraded.as_ref()).collect();
    let clean: Vec<&Tensor> = samples.iter().filter_map(|s| s.face_clean.as_ref()).collect();
    if deg.is_empty() {
        return Err(Error::Data("probe set has no faces".into()));
    }
    let so = student.infer(&deg)?;
    let to = teacher.infer(&clean)?;
    let mut total = 0.0;
    for (s, t) in so.iter().zip(&to) {
        for (zs, zt) in s.groups.logits.iter().zip(&t.groups.logits) {
            total += losses::kl_divergence(zt, zs, tau)?;
        }
    }
    Ok(total / deg.len() as f64)
}

/// Held-out and training probe sets.
struct ProbeSets {
    held_out: Vec<usize>,
    train: Vec<usize>,
}

impl ProbeSets {
    fn new(dataset: &Dataset, n: usize) -> Self {
        Self {
            held_out: probe_indices(dataset, n, true),
            train: probe_indices(dataset, n, false),
        }
    }
}

fn probe(model: &JointModel, dataset: &Dataset, sets: &ProbeSets, tau: f64) -> Result<ProbeStats> {
    let pick = |idx: &[usize]| -> Vec<&LoadedSample> { idx.iter().map(|&i| &dataset.samples[i]).collect() };
    let held_out = pick(&sets.held_out);
    let train = pick(&sets.train);
    let mut stats = ProbeStats::default();
    if let Some(g) = model.global.as_ref().filter(|g| g.cfg.use_cam && !held_out.is_empty()) {
        let (c, o) = attention_pixel_means(g, &held_out, &dataset.manifest.category_table.cloth_codes())?;
        stats.att_cloth = Some(c);
        stats.att_non_cloth = Some(o);
    }
    if let (Some(s), Some(t)) = (&model.student, &model.teacher) {
        if !train.is_empty() {
            stats.kl = Some(probe_kl(s, t, &train, tau)?);
        }
        if !held_out.is_empty() {
            stats.kl_held_out = Some(probe_kl(s, t, &held_out, tau)?);
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRow>,
    pub model: JointModel,
    pub probe_start: ProbeStats,
    pub probe_end: ProbeStats,
}

/// Joint training under the total objective with a frozen teacher.
pub fn train_joint(dataset: &Dataset, teacher_ckpt: Option<&Checkpoint>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let a = cfg.ablation;
    let labels = train_labels(dataset);
    let k = labels.len();
    let face_cfg = cfg.face_net(dataset.manifest.face_dims, k);
    let teacher = if a.needs_teacher() {
        let ckpt = teacher_ckpt.ok_or_else(|| Error::Config("this configuration needs a teacher checkpoint".into()))?;
        if ckpt.meta.num_classes != k {
            return Err(Error::Config(format!(
                "teacher was trained on {} identities, dataset has {k}",
                ckpt.meta.num_classes
            )));
        }
        Some(load_teacher(ckpt, &face_cfg)?)
    } else {
        None
    };
    let teacher_digest = teacher.as_ref().map(|t| t.params().digest());
    let mut model = JointModel {
        ablation: a,
        global: if a.use_global_stream {
            Some(StreamNet::new(cfg.global_net(dataset, k), seed::derive(cfg.seed, &[3]))?)
        } else {
            None
        },
        student: if a.trains_student() {
            Some(FaceNet::new(FaceRole::Student, face_cfg.clone(), seed::derive(cfg.seed, &[4]))?)
        } else {
            None
        },
        teacher,
    };

    let weights = cfg.effective_weights();
    let coef = coefficients(&weights);
    let probe_set = ProbeSets::new(dataset, cfg.probe_size);
    let probe_start = probe(&model, dataset, &probe_set, cfg.loss.temperature)?;

    let trainable = model.global.is_some() || model.student.is_some();
    let mut metrics = Vec::new();
    let steps = if trainable { cfg.steps } else { 0 };
    if trainable {
        let items: Vec<(usize, usize)> = dataset
            .samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| (s.index, s.identity_id))
            .collect();
        let sampler = BatchSampler::new(&items, cfg.batch_p, cfg.batch_k, seed::derive(cfg.seed, &[5]))?;
        let table = &dataset.manifest.category_table;
        let [h, w] = dataset.manifest.image_dims;
        let fdims = model.global.as_ref().map(|g| g.cfg.feature_dims());
        let mut targets: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut opt = cfg.optimizer.build()?;
        metrics.reserve(steps as usize);

        for step in 0..steps {
            let batch = sampler.batch(step);
            let y: Vec<usize> = batch.iter().map(|&i| labels[&dataset.samples[i].identity_id]).collect();
            let mut g = Graph::new();
            let mut terms: Vec<(Var, f64)> = Vec::new();
            let mut parts = LossParts::default();

            if let Some(global) = &model.global {
                let images: Vec<&Tensor> = batch.iter().map(|&i| &dataset.samples[i].image).collect();
                let x = g.input(Tensor::stack(&images)?);
                let o = stream_forward(&mut g, &Binder::new(&global.params, "global.", true), &global.cfg, x)?;
                let ce = losses::cross_entropy_term(&refs(&values(&g, &o.logits)), &y)?;
                parts.l_ce_g = ce.value;
                let n = scalar_node(&mut g, ce, &o.logits)?;
                terms.push((n, coef[4]));
                let trip = losses::triplet_term(&refs(&values(&g, &o.features)), &y, cfg.loss.triplet_margin)?;
                parts.l_trip += trip.value;
                let n = scalar_node(&mut g, trip, &o.features)?;
                terms.push((n, coef[1]));
                if let (true, Some(att)) = (a.use_att_loss, o.attention) {
                    let [fh, fw, _] = fdims.expect("global stream");
                    for &i in &batch {
                        if let std::collections::btree_map::Entry::Vacant(e) = targets.entry(i) {
                            let m = cloth_irrelevant_mask(&dataset.samples[i].mask, h, w, table, cfg.epsilon, (fh, fw), cfg.mask_resize)?;
                            e.insert(m.resized);
                        }
                    }
                    let t: Vec<&[f64]> = batch.iter().map(|i| targets[i].as_slice()).collect();
                    let term = losses::attention_term(g.value(att), &t)?;
                    parts.l_att = term.value;
                    let n = scalar_node(&mut g, term, &[att])?;
                    terms.push((n, coef[0]));
                }
            }

            if let Some(student) = &model.student {
                let rows: Vec<usize> = (0..batch.len()).filter(|&r| dataset.samples[batch[r]].has_face()).collect();
                if !rows.is_empty() {
                    let ys: Vec<usize> = rows.iter().map(|&r| y[r]).collect();
                    let deg: Vec<&Tensor> = rows
                        .iter()
                        .map(|&r| dataset.samples[batch[r]].face_degraded.as_ref().expect("face-bearing"))
                        .collect();
                    let x = g.input(Tensor::stack(&deg)?);
                    let o = stream_forward(&mut g, &student.binder("student."), student.cfg(), x)?;
                    let logits = values(&g, &o.logits);
                    let ce = losses::cross_entropy_term(&refs(&logits), &ys)?;
                    parts.l_ce_s = ce.value;
                    let n = scalar_node(&mut g, ce, &o.logits)?;
                    terms.push((n, coef[3]));
                    // a face subset without a positive pair or a second identity has no triplet
                    if let Ok(trip) = losses::triplet_term(&refs(&values(&g, &o.features)), &ys, cfg.loss.triplet_margin) {
                        parts.l_trip += trip.value;
                        let n = scalar_node(&mut g, trip, &o.features)?;
                        terms.push((n, coef[1]));
                    }
                    if let (FaceVariant::StudentDistilled, Some(teacher)) = (a.face_variant, &model.teacher) {
                        let clean: Vec<&Tensor> = rows
                            .iter()
                            .map(|&r| dataset.samples[batch[r]].face_clean.as_ref().expect("face-bearing"))
                            .collect();
                        let mut tg = Graph::new();
                        let tx = tg.input(Tensor::stack(&clean)?);
                        let to = stream_forward(&mut tg, &teacher.binder("teacher."), teacher.cfg(), tx)?;
                        let t_logits = values(&tg, &to.logits);
                        let fkp = losses::fkp_term(&refs(&logits), &refs(&t_logits), cfg.loss.temperature)?;
                        parts.l_fkp = fkp.value;
                        let n = scalar_node(&mut g, fkp, &o.logits)?;
                        terms.push((n, coef[2]));
                    }
                }
            }

            let total = total_loss(&parts, &weights)?;
            let root = g.weighted_sum(terms);
            let grads = g.backward(root).by_param(&g);
            let mut all = model.params_trainable();
            opt.step(&mut all, &grads);
            if let Some(global) = &mut model.global {
                global.params = all.sub("global.");
            }
            if let Some(student) = &mut model.student {
                *student.params_mut()? = all.sub("student.");
            }
            metrics.push(MetricRow { step, parts, total });
        }
    }

    if let (Some(before), Some(t)) = (&teacher_digest, &model.teacher) {
        if &t.params().digest() != before {
            return Err(Error::State("frozen teacher parameters changed during training".into()));
        }
    }
    let probe_end = probe(&model, dataset, &probe_set, cfg.loss.temperature)?;
    let checkpoint = Checkpoint {
        meta: checkpoint_meta(CheckpointKind::Joint, steps, dataset, k, cfg)?,
        params: model.params(),
    };
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        model,
        probe_start,
        probe_end,
    })
}

fn merge_probe(global: &ProbeStats, face: &ProbeStats) -> ProbeStats {
    ProbeStats {
        att_cloth: global.att_cloth,
        att_non_cloth: global.att_non_cloth,
        kl: face.kl,
        kl_held_out: face.kl_held_out,
    }
}

/// Joint outcome assembled from separately trained single streams.
///
/// No loss term touches both streams and the optimizer is elementwise, so a
/// global-only run and a face-only run with the same settings follow exactly
/// the trajectories the two streams follow inside one joint run.
pub fn compose_streams(
    dataset: &Dataset,
    teacher_ckpt: Option<&Checkpoint>,
    cfg: &TrainConfig,
    global: Option<&TrainOutcome>,
    face: Option<&TrainOutcome>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let a = cfg.ablation;
    let (want_g, want_f) = a.components();
    let check = |part: Option<&TrainOutcome>, want: Option<Ablation>, what: &str| -> Result<()> {
        match (part, want) {
            (None, None) => Ok(()),
            (Some(o), Some(w)) => {
                let got: TrainConfig =
                    serde_json::from_value(o.checkpoint.meta.config.clone()).map_err(|e| Error::State(e.to_string()))?;
                if got.ablation != w || (TrainConfig { ablation: a, ..got }) != *cfg {
                    return Err(Error::Config(format!("{what} run does not match the requested configuration")));
                }
                Ok(())
            }
            _ => Err(Error::Config(format!("{what} run missing or not wanted"))),
        }
    };
    check(global, want_g, "global-stream")?;
    check(face, want_f, "face-stream")?;

    let labels = train_labels(dataset);
    let k = labels.len();
    let teacher = if a.needs_teacher() {
        let ckpt = teacher_ckpt.ok_or_else(|| Error::Config("this configuration needs a teacher checkpoint".into()))?;
        Some(load_teacher(ckpt, &cfg.face_net(dataset.manifest.face_dims, k))?)
    } else {
        None
    };
    let model = JointModel {
        ablation: a,
        global: global.and_then(|o| o.model.global.clone()),
        student: face.and_then(|o| o.model.student.clone()),
        teacher,
    };

    let empty = Vec::new();
    let gm = global.map_or(&empty, |o| &o.metrics);
    let fm = face.map_or(&empty, |o| &o.metrics);
    let steps = gm.len().max(fm.len());
    if (!gm.is_empty() && gm.len() != steps) || (!fm.is_empty() && fm.len() != steps) {
        return Err(Error::State("stream runs have different lengths".into()));
    }
    let weights = cfg.effective_weights();
    let mut metrics = Vec::with_capacity(steps);
    for i in 0..steps {
        let g = gm.get(i).map(|r| r.parts).unwrap_or_default();
        let f = fm.get(i).map(|r| r.parts).unwrap_or_default();
        let parts = LossParts {
            l_att: g.l_att,
            l_trip: g.l_trip + f.l_trip,
            l_fkp: f.l_fkp,
            l_ce_s: f.l_ce_s,
            l_ce_g: g.l_ce_g,
        };
        metrics.push(MetricRow {
            step: i as u64,
            parts,
            total: total_loss(&parts, &weights)?,
        });
    }
    let none = ProbeStats::default();
    let probe_start = merge_probe(global.map_or(&none, |o| &o.probe_start), face.map_or(&none, |o| &o.probe_start));
    let probe_end = merge_probe(global.map_or(&none, |o| &o.probe_end), face.map_or(&none, |o| &o.probe_end));
    let trainable = model.global.is_some() || model.student.is_some();
    let checkpoint = Checkpoint {
        meta: checkpoint_meta(CheckpointKind::Joint, if trainable { cfg.steps } else { 0 }, dataset, k, cfg)?,
        params: model.params(),
    };
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        model,
        probe_start,
        probe_end,
    })
}

impl JointModel {
    fn params_trainable(&self) -> ParamStore {
        let mut ps = ParamStore::new();
        if let Some(g) = &self.global {
            ps.extend_prefixed("global.", &g.params);
        }
        if let Some(s) = &self.student {
            ps.extend_prefixed("student.", s.params());
        }
        ps
    }
}
