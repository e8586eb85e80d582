//! Command-line front end.
//!
//! Every command reads one TOML run config (all sections optional), applies
//! `--set key=value` overrides by dotted path, and writes its outputs under
//! `--out`. Errors map to the exit codes of [`Error::exit_code`]; a malformed
//! command line exits with [`USAGE_EXIT_CODE`].

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::ablate::run_ablation;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EmbedOptions, EvalReport};
use crate::plot;
use crate::synth::{generate_dataset, Dataset, GenConfig, Protocol};
use crate::trainer::{pretrain_teacher, probe_indices, train_joint, write_metrics, Ablation, JointModel, TrainConfig};

pub const USAGE_EXIT_CODE: i32 = 11;

#[derive(Debug, Parser)]
#[command(name = "ccreid", version, about = "Two-stream cloth-changing person re-identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run config; every section is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed override (dataset seed for generate-data, training seed otherwise).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dotted config override, e.g. `train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset.
    GenerateData(CommonOnly),
    /// Pretrain the face teacher on clean faces.
    TrainTeacher(CommonOnly),
    /// Joint training, or a τ × α grid when grid flags are given.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the query/gallery splits.
    Evaluate(CommonOnly),
    /// Run the ablation presets over several seeds.
    Ablate(AblateArgs),
    /// Draw the CMC curve and attention heatmaps from evaluation outputs.
    Plot(CommonOnly),
}

#[derive(Debug, Args)]
pub struct CommonOnly {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Temperatures to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub grid_tau: Vec<f64>,
    /// Distillation weights to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub grid_alpha: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of training seeds.
    #[arg(long)]
    pub seeds: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Checkpoint to evaluate; defaults to `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub protocol: Protocol,
    pub normalize_streams: bool,
    pub dump_per_query: bool,
    /// Number of probe samples whose attention maps are exported.
    pub attention_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            protocol: Protocol::CrossClothes,
            normalize_streams: false,
            dump_per_query: false,
            attention_samples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub presets: Vec<String>,
    pub seeds: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            presets: Ablation::PRESETS.iter().map(|s| s.to_string()).collect(),
            seeds: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotSection {
    /// Evaluation report to plot; defaults to `<out>/eval.json`.
    pub report: Option<PathBuf>,
    /// Attention export to plot; defaults to `<out>/attention.json` when present.
    pub attention: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset root written by generate-data and read by every other command.
    pub data_dir: PathBuf,
    pub data: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub plot: PlotSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            data: GenConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
            plot: PlotSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `key.path=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {key:?} crosses a non-table value")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Config file (if any) plus overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))
    }
}

fn out_dir(common: &Common, default: &Path) -> PathBuf {
    common.out.clone().unwrap_or_else(|| default.to_path_buf())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_dataset(cfg: &RunConfig, protocol: Protocol) -> Result<Dataset> {
    Dataset::load(&cfg.data_dir)?.with_protocol(protocol)
}

fn load_teacher(cfg: &TrainConfig) -> Result<Option<Checkpoint>> {
    match (&cfg.teacher_checkpoint, cfg.ablation.needs_teacher()) {
        (Some(p), _) => Checkpoint::load(Path::new(p)).map(Some),
        (None, true) => Err(Error::Config(
            "this configuration needs a teacher: set train.teacher_checkpoint (see train-teacher)".into(),
        )),
        (None, false) => Ok(None),
    }
}

/// Attention maps of a few probe samples, literal values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub checkpoint_id: String,
    pub image_dims: [usize; 2],
    pub maps: Vec<AttentionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub sample_index: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major attention values.
    pub values: Vec<f64>,
    /// The sample image, row-major HWC in `[0, 1]`.
    pub image: Vec<f64>,
}

fn attention_export(ds: &Dataset, model: &JointModel, id: &str, n: usize) -> Result<Option<AttentionExport>> {
    let Some(net) = model.global.as_ref().filter(|g| g.cfg.use_cam) else {
        return Ok(None);
    };
    let idx = probe_indices(ds, n, true);
    let images: Vec<_> = idx.iter().map(|&i| &ds.samples[i].image).collect();
    let out = net.infer(&images)?;
    let [h, w] = ds.manifest.image_dims;
    let maps = idx
        .iter()
        .zip(out)
        .map(|(&i, r)| {
            let a = r.attention.expect("attention stream");
            let img = ds.samples[i].image.data();
            let hwc = (0..h * w).flat_map(|p| (0..3).map(move |k| img[k * h * w + p])).collect();
            AttentionRecord {
                sample_index: i,
                height: a.height(),
                width: a.width(),
                values: a.data().to_vec(),
                image: hwc,
            }
        })
        .collect();
    Ok(Some(AttentionExport {
        checkpoint_id: id.to_string(),
        image_dims: [h, w],
        maps,
    }))
}

fn train_once(ds: &Dataset, teacher: Option<&Checkpoint>, cfg: &TrainConfig, out: &Path) -> Result<String> {
    let outcome = train_joint(ds, teacher, cfg)?;
    create_dir(out)?;
    outcome.checkpoint.save(&out.join("model.ckpt"))?;
    write_metrics(&out.join("metrics.csv"), &outcome.metrics)?;
    write_json(&out.join("probe.json"), &serde_json::json!({
        "start": outcome.probe_start,
        "end": outcome.probe_end,
    }))?;
    outcome.checkpoint.id()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub temperature: f64,
    pub alpha: f64,
    pub checkpoint_id: String,
    pub rank1: f64,
    pub map: f64,
}

fn run_grid(cfg: &RunConfig, args: &TrainArgs, out: &Path) -> Result<Vec<GridPoint>> {
    let ds = load_dataset(cfg, cfg.data.protocol)?;
    let teacher = load_teacher(&cfg.train)?;
    let taus = if args.grid_tau.is_empty() { vec![cfg.train.loss.temperature] } else { args.grid_tau.clone() };
    let alphas = if args.grid_alpha.is_empty() { vec![cfg.train.loss.alpha] } else { args.grid_alpha.clone() };
    let opts = EmbedOptions {
        normalize_streams: cfg.eval.normalize_streams,
    };
    let mut points = Vec::new();
    for &tau in &taus {
        for &alpha in &alphas {
            let mut tc = cfg.train.clone();
            tc.loss.temperature = tau;
            tc.loss.alpha = alpha;
            let dir = out.join(format!("tau{tau}_alpha{alpha}"));
            let id = train_once(&ds, teacher.as_ref(), &tc, &dir)?;
            let model = JointModel::from_checkpoint(&Checkpoint::load(&dir.join("model.ckpt"))?)?;
            let report = evaluate(&ds, &model, cfg.eval.protocol, opts, &id, false)?;
            write_json(&dir.join("eval.json"), &report)?;
            println!("tau={tau} alpha={alpha} rank1={:.4} mAP={:.4}", report.rank1, report.map);
            points.push(GridPoint {
                temperature: tau,
                alpha,
                checkpoint_id: id,
                rank1: report.rank1,
                map: report.map,
            });
        }
    }
    write_json(&out.join("grid.json"), &points)?;
    Ok(points)
}

/// Run a parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(a) => {
            let mut cfg = RunConfig::load(a.common.config.as_deref(), &a.common.set)?;
            if let Some(s) = a.common.seed {
                cfg.data.seed = s;
            }
            let out = out_dir(&a.common, &cfg.data_dir);
            let manifest = generate_dataset(&cfg.data, &out)?;
            println!("wrote {} samples to {}", manifest.samples.len(), out.display());
        }
        Command::TrainTeacher(a) => {
            let mut cfg = RunConfig::load(a.common.config.as_deref(), &a.common.set)?;
            if let Some(s) = a.common.seed {
                cfg.train.seed = s;
            }
            let out = out_dir(&a.common, Path::new("runs/teacher"));
            let ds = load_dataset(&cfg, cfg.data.protocol)?;
            let t = pretrain_teacher(&ds, &cfg.train)?;
            create_dir(&out)?;
            t.checkpoint.save(&out.join("teacher.ckpt"))?;
            write_metrics(&out.join("metrics.csv"), &t.metrics)?;
            println!("teacher {} -> {}", t.checkpoint.id()?, out.join("teacher.ckpt").display());
        }
        Command::Train(a) => {
            let mut cfg = RunConfig::load(a.common.config.as_deref(), &a.common.set)?;
            if let Some(s) = a.common.seed {
                cfg.train.seed = s;
            }
            let out = out_dir(&a.common, Path::new("runs/train"));
            if !a.grid_tau.is_empty() || !a.grid_alpha.is_empty() {
                run_grid(&cfg, &a, &out)?;
            } else {
                let ds = load_dataset(&cfg, cfg.data.protocol)?;
                let teacher = load_teacher(&cfg.train)?;
                let id = train_once(&ds, teacher.as_ref(), &cfg.train, &out)?;
                println!("model {id} -> {}", out.join("model.ckpt").display());
            }
        }
        Command::Evaluate(a) => {
            let cfg = RunConfig::load(a.common.config.as_deref(), &a.common.set)?;
            let out = out_dir(&a.common, Path::new("runs/train"));
            let ckpt_path = cfg.eval.checkpoint.clone().unwrap_or_else(|| out.join("model.ckpt"));
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let model = JointModel::from_checkpoint(&ckpt)?;
            let ds = load_dataset(&cfg, cfg.eval.protocol)?;
            if ds.manifest.dataset_seed != ckpt.meta.dataset_seed {
                return Err(Error::Config(format!(
                    "checkpoint was trained on dataset seed {}, data_dir holds seed {}",
                    ckpt.meta.dataset_seed, ds.manifest.dataset_seed
                )));
            }
            let id = ckpt.id()?;
            let opts = EmbedOptions {
                normalize_streams: cfg.eval.normalize_streams,
            };
            let report = evaluate(&ds, &model, cfg.eval.protocol, opts, &id, cfg.eval.dump_per_query)?;
            create_dir(&out)?;
            write_json(&out.join("eval.json"), &report)?;
            if let Some(att) = attention_export(&ds, &model, &id, cfg.eval.attention_samples)? {
                write_json(&out.join("attention.json"), &att)?;
            }
            println!(
                "rank1={:.4} rank5={:.4} rank10={:.4} mAP={:.4}",
                report.rank1, report.rank5, report.rank10, report.map
            );
        }
        Command::Ablate(a) => {
            let mut cfg = RunConfig::load(a.common.config.as_deref(), &a.common.set)?;
            if let Some(s) = a.common.seed {
                cfg.train.seed = s;
            }
            let seeds = a.seeds.unwrap_or(cfg.ablate.seeds);
            let out = out_dir(&a.common, Path::new("runs/ablate"));
            let ds = load_dataset(&cfg, cfg.eval.protocol)?;
            let opts = EmbedOptions {
                normalize_streams: cfg.eval.normalize_streams,
            };
            create_dir(&out)?;
            let report = run_ablation(&ds, &cfg.train, &cfg.ablate.presets, seeds, cfg.eval.protocol, opts, Some(&out))?;
            write_json(&out.join("ablation.json"), &report)?;
            let table = report.table();
            std::fs::write(out.join("ablation.txt"), &table).map_err(|e| Error::io(out.join("ablation.txt"), e))?;
            print!("{table}");
            if report.any_failed() {
                return Err(Error::PresetFailed("one or more presets failed; see ablation.json".into()));
            }
        }
        Command::Plot(a) => {
            let cfg = RunConfig::load(a.common.config.as_deref(), &a.common.set)?;
            let out = out_dir(&a.common, Path::new("runs/train"));
            let report_path = cfg.plot.report.clone().unwrap_or_else(|| out.join("eval.json"));
            let report: EvalReport = read_json(&report_path)?;
            create_dir(&out)?;
            plot::write_cmc(&report.cmc, &out.join("cmc.csv"), &out.join("cmc.png"))?;
            let att_path = cfg.plot.attention.clone().unwrap_or_else(|| out.join("attention.json"));
            if cfg.plot.attention.is_some() || att_path.exists() {
                let att: AttentionExport = read_json(&att_path)?;
                for m in &att.maps {
                    plot::write_heatmap(
                        m,
                        att.image_dims,
                        &out.join(format!("attention_{}.png", m.sample_index)),
                        &out.join(format!("overlay_{}.png", m.sample_index)),
                    )?;
                }
            }
            println!("plots written to {}", out.display());
        }
    }
    Ok(())
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE_EXIT_CODE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
