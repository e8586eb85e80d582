//! Ablation sweep over the named presets and several training seeds.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EmbedOptions};
use crate::synth::{Dataset, Protocol};
use crate::trainer::{
    compose_streams, pretrain_teacher, train_joint, write_metrics, Ablation, MetricRow, ProbeStats, TrainConfig,
    TrainOutcome,
};

pub const ABLATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetRun {
    pub preset: String,
    pub seed: u64,
    pub rank1: f64,
    pub map: f64,
    pub checkpoint_id: String,
    pub probe_start: ProbeStats,
    pub probe_end: ProbeStats,
    /// Mean total loss over the first ten steps and the final total.
    pub loss_first10: Option<f64>,
    pub loss_final: Option<f64>,
    /// Wall time of the training runs behind this entry. Kept out of the
    /// report so that reports stay reproducible.
    #[serde(skip)]
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub preset: String,
    pub rank1_mean: f64,
    pub rank1_std: f64,
    pub map_mean: f64,
    pub map_std: f64,
    pub seeds: Vec<u64>,
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub protocol: Protocol,
    pub dataset_seed: u64,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<PresetRun>,
}

impl AblationReport {
    pub fn row(&self, preset: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.preset == preset)
    }

    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.failed.is_some())
    }

    /// Plain-text table, one line per preset.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>16} {:>16}\n", "model", "R-1", "mAP");
        for r in &self.rows {
            match &r.failed {
                Some(e) => s.push_str(&format!("{:<10} FAILED: {e}\n", r.preset)),
                None => s.push_str(&format!(
                    "{:<10} {:>7.4} ± {:<6.4} {:>7.4} ± {:<6.4}\n",
                    r.preset, r.rank1_mean, r.rank1_std, r.map_mean, r.map_std
                )),
            }
        }
        s
    }
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn loss_summary(metrics: &[MetricRow]) -> (Option<f64>, Option<f64>) {
    if metrics.is_empty() {
        return (None, None);
    }
    let head = &metrics[..metrics.len().min(10)];
    let first = head.iter().map(|m| m.total).sum::<f64>() / head.len() as f64;
    (Some(first), metrics.last().map(|m| m.total))
}

/// Train and evaluate one preset with one seed.
pub fn run_preset(
    dataset: &Dataset,
    base: &TrainConfig,
    preset: &str,
    seed_value: u64,
    teacher: Option<&Checkpoint>,
    protocol: Protocol,
    opts: EmbedOptions,
    out_dir: Option<&Path>,
) -> Result<PresetRun> {
    let cfg = preset_config(base, preset, seed_value)?;
    let t = Instant::now();
    let outcome = train_joint(dataset, teacher, &cfg)?;
    let mut run = finish(dataset, &outcome, preset, seed_value, protocol, opts, out_dir)?;
    run.train_seconds = t.elapsed().as_secs_f64();
    Ok(run)
}

fn preset_config(base: &TrainConfig, preset: &str, seed_value: u64) -> Result<TrainConfig> {
    Ok(TrainConfig {
        seed: seed_value,
        ablation: Ablation::preset(preset)?,
        ..base.clone()
    })
}

/// Evaluate a trained preset and write its artifacts.
fn finish(
    dataset: &Dataset,
    outcome: &TrainOutcome,
    preset: &str,
    seed_value: u64,
    protocol: Protocol,
    opts: EmbedOptions,
    out_dir: Option<&Path>,
) -> Result<PresetRun> {
    let id = outcome.checkpoint.id()?;
    let report = evaluate(dataset, &outcome.model, protocol, opts, &id, false)?;
    if let Some(dir) = out_dir {
        let dir = dir.join(format!("{preset}/seed{seed_value}"));
        outcome.checkpoint.save(&dir.join("model.ckpt"))?;
        write_metrics(&dir.join("metrics.csv"), &outcome.metrics)?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(dir.join("eval.json"), json).map_err(|e| Error::io(&dir, e))?;
    }
    let (first10, last) = loss_summary(&outcome.metrics);
    Ok(PresetRun {
        preset: preset.to_string(),
        seed: seed_value,
        rank1: report.rank1,
        map: report.map,
        checkpoint_id: id,
        probe_start: outcome.probe_start,
        probe_end: outcome.probe_end,
        loss_first10: first10,
        loss_final: last,
        train_seconds: 0.0,
    })
}

fn preset_name(a: &Ablation) -> Option<&'static str> {
    Ablation::PRESETS.into_iter().find(|p| Ablation::preset(p).ok().as_ref() == Some(a))
}

/// Trains each single-stream preset at most once per seed.
struct StreamCache<'a> {
    dataset: &'a Dataset,
    base: &'a TrainConfig,
    seed: u64,
    teacher: Option<&'a Checkpoint>,
    runs: BTreeMap<&'static str, std::result::Result<(TrainOutcome, f64), String>>,
}

impl StreamCache<'_> {
    fn get(&mut self, name: &'static str) -> std::result::Result<&(TrainOutcome, f64), String> {
        if !self.runs.contains_key(name) {
            let t = Instant::now();
            let run = preset_config(self.base, name, self.seed)
                .and_then(|cfg| train_joint(self.dataset, self.teacher, &cfg))
                .map(|o| (o, t.elapsed().as_secs_f64()))
                .map_err(|e| e.to_string());
            self.runs.insert(name, run);
        }
        self.runs[name].as_ref().map_err(Clone::clone)
    }

    /// The preset's outcome, composed from its single-stream runs, with the
    /// summed training time of those runs.
    fn outcome(&mut self, preset: &str) -> std::result::Result<(TrainOutcome, f64), String> {
        let cfg = preset_config(self.base, preset, self.seed).map_err(|e| e.to_string())?;
        let (g, f) = cfg.ablation.components();
        let name = |c: Option<Ablation>| c.map(|c| preset_name(&c).expect("components are presets"));
        let (g, f) = (name(g), name(f));
        if let (Some(only), None) | (None, Some(only)) = (g, f) {
            return self.get(only).cloned();
        }
        let (global, tg) = self.get(g.expect("both streams"))?.clone();
        let (face, tf) = self.get(f.expect("both streams"))?.clone();
        compose_streams(self.dataset, self.teacher, &cfg, Some(&global), Some(&face))
            .map(|o| (o, tg + tf))
            .map_err(|e| e.to_string())
    }
}

/// Run every preset for seeds `base.seed .. base.seed + num_seeds`.
///
/// Two-stream presets are assembled from their single-stream runs, which
/// gives the same result as training them jointly. A preset that fails is
/// marked in its row; the sweep carries on.
pub fn run_ablation(
    dataset: &Dataset,
    base: &TrainConfig,
    presets: &[String],
    num_seeds: usize,
    protocol: Protocol,
    opts: EmbedOptions,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    base.validate()?;
    if num_seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    for p in presets {
        Ablation::preset(p)?;
    }
    let seeds: Vec<u64> = (0..num_seeds as u64).map(|i| base.seed + i).collect();
    let needs_teacher = presets.iter().any(|p| Ablation::preset(p).map(|a| a.needs_teacher()).unwrap_or(false));
    let mut runs = Vec::new();
    let mut failures: Vec<(String, String)> = Vec::new();
    for &s in &seeds {
        let mut teacher_err = None;
        let teacher = if needs_teacher {
            let tcfg = TrainConfig { seed: s, ..base.clone() };
            match pretrain_teacher(dataset, &tcfg) {
                Ok(t) => {
                    if let Some(dir) = out_dir {
                        t.checkpoint.save(&dir.join(format!("teacher/seed{s}/teacher.ckpt")))?;
                    }
                    Some(t.checkpoint)
                }
                Err(e) => {
                    teacher_err = Some(format!("teacher: {e}"));
                    None
                }
            }
        } else {
            None
        };
        let mut cache = StreamCache {
            dataset,
            base,
            seed: s,
            teacher: teacher.as_ref(),
            runs: BTreeMap::new(),
        };
        for p in presets {
            if failures.iter().any(|(fp, _)| fp == p) {
                continue;
            }
            let result = match (&teacher_err, Ablation::preset(p)?.needs_teacher()) {
                (Some(e), true) => Err(e.clone()),
                _ => cache.outcome(p).and_then(|(o, secs)| {
                    let run = finish(dataset, &o, p, s, protocol, opts, out_dir).map_err(|e| e.to_string())?;
                    Ok(PresetRun { train_seconds: secs, ..run })
                }),
            };
            match result {
                Ok(r) => runs.push(r),
                Err(e) => failures.push((p.clone(), format!("seed {s}: {e}"))),
            }
        }
    }
    let rows = presets
        .iter()
        .map(|p| {
            let mine: Vec<&PresetRun> = runs.iter().filter(|r| &r.preset == p).collect();
            let (r1, r1s) = mean_std(&mine.iter().map(|r| r.rank1).collect::<Vec<_>>());
            let (m, ms) = mean_std(&mine.iter().map(|r| r.map).collect::<Vec<_>>());
            AblationRow {
                preset: p.clone(),
                rank1_mean: r1,
                rank1_std: r1s,
                map_mean: m,
                map_std: ms,
                seeds: mine.iter().map(|r| r.seed).collect(),
                failed: failures.iter().find(|(fp, _)| fp == p).map(|(_, e)| e.clone()),
            }
        })
        .collect();
    Ok(AblationReport {
        schema_version: ABLATION_SCHEMA_VERSION,
        protocol,
        dataset_seed: dataset.manifest.dataset_seed,
        rows,
        runs,
    })
}
