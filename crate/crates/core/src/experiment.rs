//! Seeded end-to-end runs: dataset, pretraining and meta-training per seed,
//! then the ablation table and the TTA step and top-K sweeps over them.
//!
//! Every row pools pixels within one seed's test split and then reports the
//! mean (and sample standard deviation) over seeds.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::eval::{evaluate, MetricsReport, PixelPool};
use crate::metatta::{inner_adapt, meta_train, pretrain, MetaConfig, MetaStats, PretrainConfig};
use crate::mvsnet::{init_params, predict_depth, Arch, ModelParams};
use crate::scenegen::{generate_dataset, split, SceneSample, SceneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One independent dataset, initialization and training run per seed.
    pub seeds: Vec<u64>,
    /// Scenes generated per seed; even scene seeds train, odd ones test.
    pub scenes_per_seed: usize,
    pub arch: Arch,
    pub scene: SceneSpec,
    pub pretrain: PretrainConfig,
    pub meta: MetaConfig,
    pub sweep_steps: Vec<usize>,
    pub k_values: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            scenes_per_seed: 16,
            arch: Arch::default(),
            scene: SceneSpec::default(),
            pretrain: PretrainConfig::default(),
            meta: MetaConfig { alpha: 1.0, beta: 5.0, meta_iterations: 100, clip_norm: Some(0.01), ..Default::default() },
            sweep_steps: vec![0, 1, 2, 4, 8, 16],
            k_values: vec![1, 2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return invalid("experiment needs at least one seed");
        }
        if self.scenes_per_seed < 2 {
            return invalid("scenes_per_seed must be at least 2 to give both splits a scene");
        }
        self.arch.validate()?;
        self.scene.validate()?;
        self.meta.validate()?;
        if self.scene.m_sources < self.meta.m_sources || self.scene.n_views != self.meta.n_views {
            return invalid(format!(
                "scene views (N={}, M={}) do not match meta config (N={}, M={})",
                self.scene.n_views, self.scene.m_sources, self.meta.n_views, self.meta.m_sources
            ));
        }
        if self.pretrain.n_views != self.meta.n_views {
            return invalid("pretrain.n_views must equal meta.n_views");
        }
        for &k in &self.k_values {
            if k == 0 || k > self.meta.m_sources {
                return invalid(format!("top-K value {k} outside 1..={}", self.meta.m_sources));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config always serializes")
    }

    /// Scene spec of one seed's dataset.
    pub fn scene_spec(&self, seed: u64) -> SceneSpec {
        SceneSpec { seed, ..self.scene.clone() }
    }

    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig { seed, ..self.pretrain.clone() }
    }

    pub fn meta_config(&self, seed: u64) -> MetaConfig {
        MetaConfig { seed, ..self.meta.clone() }
    }
}

/// Everything one seed contributes to the tables.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub train: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
    pub baseline: ModelParams,
    pub meta: ModelParams,
    pub pretrain_trace: Vec<f64>,
    pub meta_trace: Vec<MetaStats>,
}

pub fn dataset(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let (train, test) = split(generate_dataset(&cfg.scene_spec(seed), cfg.scenes_per_seed)?);
    if train.is_empty() || test.is_empty() {
        return invalid(format!("seed {seed}: split left an empty side"));
    }
    Ok((train, test))
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let (train, test) = dataset(cfg, seed)?;
    let init = init_params(&cfg.arch, seed)?;
    let (baseline, pretrain_trace) = pretrain(&init, &train, &cfg.pretrain_config(seed))?;
    let (meta, meta_trace) = meta_train(&baseline, &train, &cfg.meta_config(seed))?;
    Ok(SeedRun { seed, train, test, baseline, meta, pretrain_trace, meta_trace })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub rel: Stat,
    pub tau_103: Stat,
    pub tau_110: Stat,
}

impl Summary {
    pub fn of(reports: &[MetricsReport]) -> Self {
        let pick = |f: fn(&MetricsReport) -> f64| Stat::of(&reports.iter().map(f).collect::<Vec<_>>());
        Summary { rel: pick(|r| r.rel), tau_103: pick(|r| r.tau_103), tau_110: pick(|r| r.tau_110) }
    }
}

pub const ABLATION_VARIANTS: [&str; 4] = ["baseline", "baseline+tta", "meta", "meta+tta"];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub summary: Summary,
    pub per_seed: Vec<MetricsReport>,
}

/// Pretrained baseline, baseline with TTA, meta-trained without TTA and the
/// full framework, in that order.
pub fn run_ablation(runs: &[SeedRun], cfg: &MetaConfig) -> Result<Vec<AblationRow>> {
    if runs.is_empty() {
        return invalid("ablation needs at least one seed");
    }
    let mut rows = Vec::with_capacity(4);
    for (i, variant) in ABLATION_VARIANTS.iter().enumerate() {
        let mut per_seed = Vec::with_capacity(runs.len());
        for run in runs {
            let params = if i < 2 { &run.baseline } else { &run.meta };
            per_seed.push(evaluate(params, &run.test, &MetaConfig { seed: run.seed, ..cfg.clone() }, i % 2 == 1)?);
        }
        rows.push(AblationRow { variant, summary: Summary::of(&per_seed), per_seed });
    }
    Ok(rows)
}

fn stat_cells(out: &mut String, s: &Stat) {
    let _ = write!(out, ",{:.6},{:.6}", s.mean, s.std);
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,rel_mean,rel_std,tau103_mean,tau103_std,tau110_mean,tau110_std\n");
    for r in rows {
        out.push_str(r.variant);
        stat_cells(&mut out, &r.summary.rel);
        stat_cells(&mut out, &r.summary.tau_103);
        stat_cells(&mut out, &r.summary.tau_110);
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    /// TTA step count or top-K value.
    pub setting: usize,
    pub summary: Summary,
}

/// Meta-trained model evaluated after each step count in `steps`.
///
/// Each sample is adapted once, incrementally, and evaluated whenever the
/// running count reaches a requested value; this is bit-identical to fresh
/// runs with those step counts because each update only depends on the
/// current parameters.
pub fn step_sweep(runs: &[SeedRun], cfg: &MetaConfig, steps: &[usize]) -> Result<Vec<SweepRow>> {
    if runs.is_empty() || steps.is_empty() {
        return invalid("step sweep needs seeds and step counts");
    }
    let mut sorted = steps.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut per_step: Vec<Vec<MetricsReport>> = vec![Vec::new(); sorted.len()];
    for run in runs {
        let mut pools = vec![PixelPool::default(); sorted.len()];
        for sample in &run.test {
            let mut params = run.meta.clone();
            let mut done = 0;
            for (slot, &target) in sorted.iter().enumerate() {
                params = inner_adapt(&params, sample, cfg, cfg.alpha, target - done, false)?;
                done = target;
                let pred = predict_depth(&params, &sample.views[..cfg.n_views], &sample.hyps)?;
                pools[slot].add(&pred, &sample.gt_depth, &sample.valid)?;
            }
        }
        for (slot, pool) in pools.iter().enumerate() {
            per_step[slot].push(pool.report(String::new())?);
        }
    }
    Ok(sorted.into_iter().zip(per_step).map(|(s, r)| SweepRow { setting: s, summary: Summary::of(&r) }).collect())
}

/// Full framework with the photometric top-K set to each value in turn, at
/// test time only; meta-training keeps the configured K.
pub fn k_sweep(runs: &[SeedRun], cfg: &MetaConfig, ks: &[usize]) -> Result<Vec<SweepRow>> {
    if runs.is_empty() || ks.is_empty() {
        return invalid("k sweep needs seeds and K values");
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let kcfg = MetaConfig { photo: crate::photoloss::PhotoLossConfig { top_k: k, ..cfg.photo.clone() }, ..cfg.clone() };
        let mut per_seed = Vec::with_capacity(runs.len());
        for run in runs {
            per_seed.push(evaluate(&run.meta, &run.test, &kcfg, true)?);
        }
        rows.push(SweepRow { setting: k, summary: Summary::of(&per_seed) });
    }
    Ok(rows)
}

pub fn sweep_csv(label: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{label},rel_mean,rel_std,tau103_mean,tau103_std,tau110_mean,tau110_std\n");
    for r in rows {
        let _ = write!(out, "{}", r.setting);
        stat_cells(&mut out, &r.summary.rel);
        stat_cells(&mut out, &r.summary.tau_103);
        stat_cells(&mut out, &r.summary.tau_110);
        out.push('\n');
    }
    out
}
