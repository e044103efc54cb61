//! Random hyperparameter search: samplers, lockstep ensembles with a shared
//! early-stopping clock, append-only record files and quantile summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::bema::{BemaHypers, EmaSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::NormMode;
use crate::rng::stream;
use crate::training::{
    AdamWConfig, BestMetrics, Divergence, DropoutRates, ScheduleSpec, StopReason, TrainRunConfig, Trainer,
    ValidationEvent,
};

/// `[lo, hi]` of a uniform draw, before any transform.
pub type Range = [f64; 2];

/// Sampler constants. Defaults are the published search distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// `s = 1 + floor(2^U)`
    pub s_log2: Range,
    /// `v = s + floor(2^U)`
    pub v_gap_log2: Range,
    /// `d = floor((v - 1) U)`
    pub d_multiplier: Range,
    pub norm_eps_log10: Range,
    /// `beta1 = 1 - 10^U`
    pub beta1_complement_log10: Range,
    /// `beta2 = 1 - 10^U`
    pub beta2_complement_log10: Range,
    pub weight_decay_log10: Range,
    pub adam_eps_log10: Range,
    pub max_grad_norm_log10: Range,
    pub peak_lr_log10: Range,
    /// `warmup = floor(10^U)`
    pub warmup_log10: Range,
    pub end_multiplier_log10: Range,
    /// `p = relu(U)`
    pub dropout: Range,
    pub bema_power: Range,
    pub ema_lag_log10: Range,
    pub ema_power: Range,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            s_log2: [0.0, 4.0],
            v_gap_log2: [0.0, 4.0],
            d_multiplier: [1.0, 4.0],
            norm_eps_log10: [-10.0, -4.0],
            beta1_complement_log10: [-2.0, 0.0],
            beta2_complement_log10: [-8.0, -1.0],
            weight_decay_log10: [-6.0, 0.0],
            adam_eps_log10: [-12.0, -8.0],
            max_grad_norm_log10: [-2.0, 2.0],
            peak_lr_log10: [-5.0, -1.0],
            warmup_log10: [-2.0, 6.0],
            end_multiplier_log10: [-4.0, 0.0],
            dropout: [-0.5, 0.5],
            bema_power: [0.0, 1.0],
            ema_lag_log10: [0.0, 10.0],
            ema_power: [0.0, 1.0],
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: Range) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// `floor(U[lo, hi))`, never below `min`.
fn floor_uniform<R: Rng + ?Sized>(rng: &mut R, range: Range, min: usize) -> usize {
    (uniform(rng, range).floor() as usize).max(min)
}

/// Dataloader and architecture: shared by every member of an ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSample {
    pub s: usize,
    pub v: usize,
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl ArchSample {
    /// `v - 1 - s`: how much longer validation inputs are than training inputs.
    pub fn generalization_gap(&self) -> usize {
        self.v - 1 - self.s
    }

    /// `d / (v - 1)`
    pub fn embedding_multiplier(&self) -> f64 {
        self.d as f64 / (self.v - 1) as f64
    }

    /// `(d_v - v + 1) / (d - v + 1)`, or 0 when `d = v - 1`.
    pub fn value_coefficient(&self) -> f64 {
        if self.d + 1 == self.v {
            0.0
        } else {
            (self.d_v + 1 - self.v) as f64 / (self.d + 1 - self.v) as f64
        }
    }
}

/// Everything sampled per ensemble member.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberSample {
    pub norm_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub end_multiplier: f64,
    pub p_embed: f64,
    pub p_resid: f64,
    pub bema_power: f64,
    pub ema_lag: f64,
    pub ema_power: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperSample {
    #[serde(flatten)]
    pub arch: ArchSample,
    #[serde(flatten)]
    pub member: MemberSample,
    pub seed: u64,
}

pub fn sample_arch<R: Rng + ?Sized>(cfg: &SamplerConfig, rng: &mut R) -> ArchSample {
    let s = 1 + 2f64.powf(uniform(rng, cfg.s_log2)).floor() as usize;
    let v = s + 2f64.powf(uniform(rng, cfg.v_gap_log2)).floor() as usize;
    let d = (((v - 1) as f64) * uniform(rng, cfg.d_multiplier)).floor() as usize;
    let d = d.max(v - 1);
    let d_k = floor_uniform(rng, [1.0, d as f64], 1).min(d);
    let d_v = floor_uniform(rng, [(v - 1) as f64, d as f64], v - 1).min(d);
    ArchSample { s, v, d, d_k, d_v }
}

pub fn sample_member<R: Rng + ?Sized>(cfg: &SamplerConfig, rng: &mut R) -> MemberSample {
    let pow10 = |rng: &mut R, r: Range| 10f64.powf(uniform(rng, r));
    MemberSample {
        norm_eps: pow10(rng, cfg.norm_eps_log10),
        beta1: 1.0 - pow10(rng, cfg.beta1_complement_log10),
        beta2: 1.0 - pow10(rng, cfg.beta2_complement_log10),
        weight_decay: pow10(rng, cfg.weight_decay_log10),
        adam_eps: pow10(rng, cfg.adam_eps_log10),
        max_grad_norm: pow10(rng, cfg.max_grad_norm_log10),
        peak_lr: pow10(rng, cfg.peak_lr_log10),
        warmup_steps: pow10(rng, cfg.warmup_log10).floor() as u64,
        end_multiplier: pow10(rng, cfg.end_multiplier_log10),
        p_embed: uniform(rng, cfg.dropout).max(0.0),
        p_resid: uniform(rng, cfg.dropout).max(0.0),
        bema_power: uniform(rng, cfg.bema_power),
        ema_lag: pow10(rng, cfg.ema_lag_log10),
        ema_power: uniform(rng, cfg.ema_power),
    }
}

/// A full independent draw: architecture, member hyperparameters, seed.
pub fn sample_hypers<R: Rng + ?Sized>(cfg: &SamplerConfig, rng: &mut R) -> HyperSample {
    let arch = sample_arch(cfg, rng);
    let member = sample_member(cfg, rng);
    HyperSample { arch, member, seed: rng.next_u64() }
}

/// Step budget and cadence shared by every run of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budget {
    /// Also the decay horizon of the learning-rate schedule.
    pub max_steps: u64,
    pub val_interval: u64,
    pub patience: u64,
    pub batch_size: usize,
    pub val_size: usize,
    pub record_wall_clock: bool,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_steps: 200_000,
            val_interval: 10_000,
            patience: 1_000_000,
            batch_size: 128,
            val_size: 1024,
            record_wall_clock: true,
        }
    }
}

impl HyperSample {
    pub fn bema_hypers(&self) -> BemaHypers {
        BemaHypers { ema_lag: self.member.ema_lag, ema_power: self.member.ema_power, bema_power: self.member.bema_power }
    }

    pub fn train_config(&self, budget: &Budget) -> TrainRunConfig {
        let a = self.arch;
        let m = self.member;
        TrainRunConfig {
            v: a.v,
            s: a.s,
            d: a.d,
            d_k: a.d_k,
            d_v: a.d_v,
            norm: NormMode::RmsNorm,
            norm_eps: m.norm_eps,
            dropout: DropoutRates { p_embed: m.p_embed, p_resid: m.p_resid },
            optimizer: AdamWConfig {
                beta1: m.beta1,
                beta2: m.beta2,
                weight_decay: m.weight_decay,
                eps: m.adam_eps,
                max_grad_norm: m.max_grad_norm,
            },
            schedule: ScheduleSpec {
                peak_lr: m.peak_lr,
                warmup_steps: m.warmup_steps,
                end_multiplier: m.end_multiplier,
                max_steps: budget.max_steps,
            },
            bema: vec![EmaSpec::single(self.bema_hypers())],
            seed: self.seed,
            batch_size: budget.batch_size,
            val_interval: budget.val_interval,
            patience: budget.patience,
            val_size: budget.val_size,
            record_wall_clock: budget.record_wall_clock,
        }
    }
}

/// One finished (or diverged) member run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arch_index: usize,
    pub member_index: usize,
    pub hypers: HyperSample,
    pub generalization_gap: usize,
    pub embedding_multiplier: f64,
    pub value_coefficient: f64,
    pub steps: u64,
    pub stop: StopReason,
    pub diverged: bool,
    pub divergence: Option<Divergence>,
    pub best: Option<BestMetrics>,
    pub history: Vec<ValidationEvent>,
}

impl RunRecord {
    fn from_trainer(arch_index: usize, member_index: usize, hypers: HyperSample, t: &Trainer, stop: StopReason) -> Self {
        let outcome = t.outcome(if t.diverged().is_some() { StopReason::Diverged } else { stop });
        RunRecord {
            arch_index,
            member_index,
            hypers,
            generalization_gap: hypers.arch.generalization_gap(),
            embedding_multiplier: hypers.arch.embedding_multiplier(),
            value_coefficient: hypers.arch.value_coefficient(),
            steps: outcome.steps,
            stop: outcome.stop,
            diverged: outcome.diverged.is_some(),
            divergence: outcome.diverged,
            best: outcome.best,
            history: outcome.history,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub global_seed: u64,
    pub arch_count: usize,
    pub members_per_arch: usize,
    pub budget: Budget,
    pub sampler: SamplerConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            global_seed: 0,
            arch_count: 8,
            members_per_arch: 32,
            budget: Budget::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

/// Full-scale sweep counts, for reference; desk-scale defaults are far smaller.
pub const FULL_SCALE_ARCH_COUNT: usize = 260;
pub const FULL_SCALE_MEMBERS_PER_ARCH: usize = 1000;
pub const FULL_SCALE_MAX_STEPS: u64 = 10_000_000;

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arch_count == 0 || self.members_per_arch == 0 {
            return Err(Error::Config("architecture and member counts must be positive".into()));
        }
        if self.budget.val_interval == 0 || self.budget.batch_size == 0 || self.budget.val_size == 0 {
            return Err(Error::Config("budget intervals and sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn arch(&self, a: usize) -> ArchSample {
        sample_arch(&self.sampler, &mut stream(self.global_seed, "arch", &[a as u64]))
    }

    pub fn hypers(&self, a: usize, m: usize) -> HyperSample {
        let mut rng = stream(self.global_seed, "member", &[a as u64, m as u64]);
        let member = sample_member(&self.sampler, &mut rng);
        HyperSample { arch: self.arch(a), member, seed: rng.next_u64() }
    }
}

/// Written once per sweep directory; a resumed sweep must match it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchManifest {
    pub code_version: String,
    pub config: SearchConfig,
}

impl SearchManifest {
    pub fn new(config: SearchConfig) -> Self {
        SearchManifest { code_version: env!("CARGO_PKG_VERSION").to_string(), config }
    }
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Trains the members of one ensemble in lockstep. All members stop once
/// none of them has improved the best validation TVD within `patience`
/// steps, or when every member is finished.
pub fn run_ensemble_members(
    config: &SearchConfig,
    arch_index: usize,
    members: &[usize],
    exec: Exec,
) -> Result<Vec<RunRecord>> {
    let budget = config.budget;
    let hypers: Vec<HyperSample> = members.iter().map(|&m| config.hypers(arch_index, m)).collect();
    let mut trainers = hypers
        .iter()
        .map(|h| Trainer::new(h.train_config(&budget), Exec::Sequential))
        .collect::<Result<Vec<_>>>()?;
    let validate_all = |ts: &mut [Trainer]| -> Result<()> {
        let results: Vec<Result<()>> = {
            let mut out: Vec<Option<Result<()>>> = (0..ts.len()).map(|_| None).collect();
            let mut pairs: Vec<(&mut Trainer, &mut Option<Result<()>>)> = ts.iter_mut().zip(out.iter_mut()).collect();
            exec.for_each_mut(&mut pairs, |(t, slot)| {
                if t.diverged().is_none() {
                    **slot = Some(t.validate().map(|_| ()));
                }
            });
            out.into_iter().flatten().collect()
        };
        results.into_iter().collect()
    };
    validate_all(&mut trainers)?;
    let mut best = f64::INFINITY;
    let mut best_step = 0;
    let mut step = 0;
    let stop = loop {
        let live = trainers.iter().any(|t| t.diverged().is_none() && !t.at_max_steps());
        if !live {
            break StopReason::MaxSteps;
        }
        step += budget.val_interval;
        let mut errors: Vec<Option<Error>> = (0..trainers.len()).map(|_| None).collect();
        {
            let mut pairs: Vec<(&mut Trainer, &mut Option<Error>)> = trainers.iter_mut().zip(errors.iter_mut()).collect();
            exec.for_each_mut(&mut pairs, |(t, slot)| {
                if let Err(e) = t.advance_to(step) {
                    **slot = Some(e);
                }
            });
        }
        if let Some(e) = errors.into_iter().flatten().next() {
            return Err(e);
        }
        validate_all(&mut trainers)?;
        let current = trainers
            .iter()
            .filter(|t| t.diverged().is_none())
            .map(|t| t.best_tvd())
            .fold(f64::INFINITY, f64::min);
        if current < best {
            best = current;
            best_step = step;
        }
        if step - best_step >= budget.patience {
            break StopReason::Patience;
        }
    };
    Ok(members
        .iter()
        .zip(hypers)
        .zip(&trainers)
        .map(|((&m, h), t)| {
            let member_stop = if t.at_max_steps() { StopReason::MaxSteps } else { stop };
            RunRecord::from_trainer(arch_index, m, h, t, member_stop)
        })
        .collect())
}

/// Reads every complete record line; a torn final line is ignored.
pub fn read_records<R: BufRead>(r: R) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
    let n = lines.len();
    for (i, line) in lines.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(rec) => out.push(rec),
            Err(_) if i + 1 == n => {}
            Err(e) => return Err(Error::Format(format!("record line {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

pub fn read_records_file(path: &Path) -> Result<Vec<RunRecord>> {
    read_records(BufReader::new(File::open(path)?))
}

/// Runs (or resumes) a sweep into `out`: `manifest.json`, then one
/// `records.jsonl` line per member, written as each ensemble finishes.
/// Members already present in the record file are skipped.
pub fn run_search(config: &SearchConfig, out: &Path, exec: Exec) -> Result<Vec<RunRecord>> {
    run_search_with(config, out, exec, |_, _| {})
}

/// [`run_search`] with a callback after each ensemble (index, new records).
pub fn run_search_with(
    config: &SearchConfig,
    out: &Path,
    exec: Exec,
    mut on_ensemble: impl FnMut(usize, &[RunRecord]),
) -> Result<Vec<RunRecord>> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let manifest = SearchManifest::new(config.clone());
    let manifest_path = out.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let existing: SearchManifest = serde_json::from_reader(BufReader::new(File::open(&manifest_path)?))?;
        if existing.config != manifest.config {
            return Err(Error::Config(format!("{} holds a different sweep configuration", manifest_path.display())));
        }
    } else {
        let mut f = File::create(&manifest_path)?;
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n")?;
    }
    let records_path = out.join(RECORDS_FILE);
    let mut records = if records_path.exists() { read_records_file(&records_path)? } else { Vec::new() };
    if records_path.exists() {
        // Rewrite without any torn tail so appends start on a fresh line.
        let mut f = File::create(&records_path)?;
        for r in &records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
    }
    let done: BTreeSet<(usize, usize)> = records.iter().map(|r| (r.arch_index, r.member_index)).collect();
    for a in 0..config.arch_count {
        let todo: Vec<usize> = (0..config.members_per_arch).filter(|&m| !done.contains(&(a, m))).collect();
        if todo.is_empty() {
            continue;
        }
        let new = run_ensemble_members(config, a, &todo, exec)?;
        let mut f = OpenOptions::new().create(true).append(true).open(&records_path)?;
        for r in &new {
            let mut line = serde_json::to_vec(r)?;
            line.push(b'\n');
            f.write_all(&line)?;
        }
        f.flush()?;
        on_ensemble(a, &new);
        records.extend(new);
    }
    records.sort_by_key(|r| (r.arch_index, r.member_index));
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Gap,
    /// Embedding dimension multiplier, in bins of width 0.5.
    Multiplier,
    /// Value dimension coefficient, in bins of width 0.25.
    ValueCoefficient,
}

impl std::str::FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(GroupKey::Gap),
            "multiplier" => Ok(GroupKey::Multiplier),
            "value_coefficient" => Ok(GroupKey::ValueCoefficient),
            _ => Err(Error::Config(format!("unknown group key {s:?}"))),
        }
    }
}

impl GroupKey {
    pub fn name(self) -> &'static str {
        match self {
            GroupKey::Gap => "gap",
            GroupKey::Multiplier => "multiplier_bin",
            GroupKey::ValueCoefficient => "value_coefficient_bin",
        }
    }

    /// Group value; bins are reported by their lower edge.
    fn value(self, r: &RunRecord) -> i64 {
        match self {
            GroupKey::Gap => r.generalization_gap as i64,
            GroupKey::Multiplier => (r.embedding_multiplier * 2.0).floor() as i64,
            GroupKey::ValueCoefficient => (r.value_coefficient * 4.0).floor() as i64,
        }
    }

    fn label(self, v: i64) -> String {
        match self {
            GroupKey::Gap => v.to_string(),
            GroupKey::Multiplier => format!("{}", v as f64 / 2.0),
            GroupKey::ValueCoefficient => format!("{}", v as f64 / 4.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Tvd,
    Itp,
    Itr,
}

impl MetricName {
    pub const ALL: [MetricName; 3] = [MetricName::Tvd, MetricName::Itp, MetricName::Itr];

    pub fn name(self) -> &'static str {
        match self {
            MetricName::Tvd => "tvd",
            MetricName::Itp => "itp",
            MetricName::Itr => "itr",
        }
    }

    fn pick(self, m: &crate::metrics::Metrics) -> f64 {
        match self {
            MetricName::Tvd => m.tvd,
            MetricName::Itp => m.itp,
            MetricName::Itr => m.itr,
        }
    }
}

/// Best value, top-quantile means, and mean dropout rates among the top
/// quantiles, for one parameter family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileStats {
    pub count: usize,
    pub best: f64,
    pub top1_mean: f64,
    pub top10_mean: f64,
    pub top1_p_embed: f64,
    pub top1_p_resid: f64,
    pub top10_p_embed: f64,
    pub top10_p_resid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: Vec<(GroupKey, String)>,
    pub metric: MetricName,
    pub train: Option<QuantileStats>,
    pub bema: Option<QuantileStats>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub notes: Vec<String>,
}

/// `max(1, ceil(frac * n))`
pub fn top_count(n: usize, frac: f64) -> usize {
    ((n as f64 * frac).ceil() as usize).clamp(1, n.max(1))
}

/// (metric value, (arch, member), p_embed, p_resid)
type Scored = (f64, (usize, usize), f64, f64);

fn quantile_stats(mut scored: Vec<Scored>) -> Option<QuantileStats> {
    if scored.is_empty() {
        return None;
    }
    // Ties broken by record identity so the result ignores input order.
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mean = |k: usize, f: &dyn Fn(&Scored) -> f64| {
        scored[..k].iter().map(f).sum::<f64>() / k as f64
    };
    let k1 = top_count(scored.len(), 0.01);
    let k10 = top_count(scored.len(), 0.10);
    Some(QuantileStats {
        count: scored.len(),
        best: scored[0].0,
        top1_mean: mean(k1, &|x| x.0),
        top10_mean: mean(k10, &|x| x.0),
        top1_p_embed: mean(k1, &|x| x.2),
        top1_p_resid: mean(k1, &|x| x.3),
        top10_p_embed: mean(k10, &|x| x.2),
        top10_p_resid: mean(k10, &|x| x.3),
    })
}

/// Groups records and reports quantile statistics of each record's best
/// validation metrics, for training and BEMA parameters separately.
/// Diverged runs are left out and counted in the notes.
pub fn summarize(records: &[RunRecord], keys: &[GroupKey]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::Precondition("no records to summarize".into()));
    }
    let mut groups: BTreeMap<Vec<i64>, Vec<&RunRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.diverged) {
        groups.entry(keys.iter().map(|k| k.value(r)).collect()).or_default().push(r);
    }
    let mut summary = Summary::default();
    let diverged = records.iter().filter(|r| r.diverged).count();
    if diverged > 0 {
        summary.notes.push(format!("{diverged} diverged run(s) excluded"));
    }
    for (g, members) in groups {
        let group: Vec<(GroupKey, String)> = keys.iter().zip(&g).map(|(&k, &v)| (k, k.label(v))).collect();
        let with_best: Vec<(&RunRecord, &BestMetrics)> =
            members.iter().filter_map(|r| r.best.as_ref().map(|b| (*r, b))).collect();
        if with_best.is_empty() {
            summary.notes.push(format!("group {group:?} has no evaluated records; omitted"));
            continue;
        }
        for metric in MetricName::ALL {
            let collect = |pick: &dyn Fn(&BestMetrics) -> Option<f64>| {
                with_best
                    .iter()
                    .filter_map(|(r, b)| {
                        pick(b).filter(|x| x.is_finite()).map(|x| {
                            (x, (r.arch_index, r.member_index), r.hypers.member.p_embed, r.hypers.member.p_resid)
                        })
                    })
                    .collect::<Vec<_>>()
            };
            let train = quantile_stats(collect(&|b| Some(metric.pick(&b.train))));
            let bema = quantile_stats(collect(&|b| b.bema.as_ref().map(|m| metric.pick(m))));
            summary.rows.push(SummaryRow { group: group.clone(), metric, train, bema });
        }
    }
    Ok(summary)
}

impl Summary {
    /// One CSV row per (group, metric) with separate training and BEMA
    /// columns.
    pub fn write_csv<W: Write>(&self, keys: &[GroupKey], w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let stats = ["count", "best", "top1_mean", "top10_mean", "top1_p_embed", "top1_p_resid", "top10_p_embed", "top10_p_resid"];
        let mut header: Vec<String> = keys.iter().map(|k| k.name().to_string()).collect();
        header.push("metric".into());
        for family in ["train", "bema"] {
            header.extend(stats.iter().map(|s| format!("{family}_{s}")));
        }
        out.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let mut rec: Vec<String> = row.group.iter().map(|(_, v)| v.clone()).collect();
            rec.push(row.metric.name().into());
            for q in [&row.train, &row.bema] {
                match q {
                    Some(q) => rec.extend(
                        [
                            q.count.to_string(),
                            q.best.to_string(),
                            q.top1_mean.to_string(),
                            q.top10_mean.to_string(),
                            q.top1_p_embed.to_string(),
                            q.top1_p_resid.to_string(),
                            q.top10_p_embed.to_string(),
                            q.top10_p_resid.to_string(),
                        ],
                    ),
                    None => rec.extend(std::iter::repeat_n(String::new(), stats.len())),
                }
            }
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}
