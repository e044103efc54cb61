//! Executable checks for the constant-attention theory of the model:
//! the hardcoded minimal solution, exhaustive precision certificates,
//! numeric rank bounds on `B + D` and `D`, the balance condition and the
//! `(2/s) C` length decay.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::Matrix;
use crate::model::{derived_matrices, forward_constant_attention, logits, Dims, ModelParams, NormMode, Tensors};
use crate::rng::stream;
use crate::task::Token;

/// Norm epsilon used by the hardcoded model in `rmsnorm` mode.
pub const HARDCODED_NORM_EPS: f64 = 1e-12;
pub const DEFAULT_RANK_TOL: f64 = 1e-8;
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;
pub const DEFAULT_SAMPLE_DRAWS: usize = 1_000_000;

/// The minimal model with `d = d_v = v - 1`, `d_k = 1`, zero query/key,
/// `W_V = vC I` and `W_O = I`.
pub fn build_hardcoded(v: usize, c: f64, norm: NormMode) -> Result<ModelParams> {
    if !(c > 0.0) {
        return Err(Error::Precondition(format!("precision must be positive, got {c}")));
    }
    let dims = Dims::new(v, v - 1, 1, v - 1)?;
    let n = v - 1;
    let mut t = Tensors::zeros(&dims);
    t.embed = Matrix::from_fn(v, n, |i, j| if i == n { -1.0 } else if i == j { 1.0 } else { 0.0 });
    t.gains = vec![1.0; n];
    t.w_v = Matrix::identity(n).scale(v as f64 * c);
    t.w_o = Matrix::identity(n);
    t.unembed = Matrix::from_fn(n, v, |i, j| if i == j { -1.0 } else { 0.0 });
    ModelParams::new(dims, norm, HARDCODED_NORM_EPS, t)
}

/// A constant-attention model given by its bias and displacement matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantAttention {
    pub b: Matrix,
    pub d: Matrix,
}

impl ConstantAttention {
    pub fn new(b: Matrix, d: Matrix) -> Result<Self> {
        let v = b.rows();
        if b.shape() != (v, v) || d.shape() != (v, v) {
            return Err(Error::Shape(format!("B {:?} and D {:?} must both be square", b.shape(), d.shape())));
        }
        if v < 2 {
            return Err(Error::VocabularyTooSmall(v));
        }
        Ok(ConstantAttention { b, d })
    }

    pub fn from_params(params: &ModelParams) -> Result<Self> {
        let m = derived_matrices(params)?;
        ConstantAttention::new(m.b, m.d)
    }

    pub fn v(&self) -> usize {
        self.b.rows()
    }

    pub fn logits(&self, tokens: &[Token]) -> Vec<f64> {
        forward_constant_attention(&self.b, &self.d, tokens)
    }

    pub fn scaled_displacement(&self, c: f64) -> ConstantAttention {
        ConstantAttention { b: self.b.clone(), d: self.d.scale(c) }
    }
}

/// Precision statistics over the valid sequences of one length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecord {
    pub length: usize,
    /// least `f(t)_u - f(t)_w` over legal `u` and occupied `w`
    pub min_displacement: f64,
    /// largest `|f(t)_u - f(t)_u'|` over legal `u`, `u'`
    pub max_equality_deviation: f64,
    pub sequences_checked: u64,
    pub exhaustive: bool,
}

impl PrecisionRecord {
    pub fn passes(&self, c: f64, eq_tol: f64) -> bool {
        self.min_displacement > c && self.max_equality_deviation <= eq_tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub records: Vec<PrecisionRecord>,
}

impl PrecisionReport {
    pub fn passes(&self, c: f64, eq_tol: f64) -> bool {
        self.records.iter().all(|r| r.passes(c, eq_tol))
    }

    pub fn at(&self, length: usize) -> Option<&PrecisionRecord> {
        self.records.iter().find(|r| r.length == length)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PrecisionOptions {
    pub cap: u64,
    /// fall back to sampling when the exhaustive count exceeds `cap`
    pub allow_sampling: bool,
    pub sample_draws: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for PrecisionOptions {
    fn default() -> Self {
        PrecisionOptions {
            cap: DEFAULT_ENUMERATION_CAP,
            allow_sampling: false,
            sample_draws: DEFAULT_SAMPLE_DRAWS,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

/// `v! / (v - s)!`
pub fn sequence_count(v: usize, s: usize) -> u128 {
    ((v - s + 1)..=v).map(|x| x as u128).product()
}

#[derive(Clone, Copy)]
struct Acc {
    min_disp: f64,
    max_dev: f64,
    count: u64,
}

impl Acc {
    const EMPTY: Acc = Acc { min_disp: f64::INFINITY, max_dev: 0.0, count: 0 };

    fn observe(&mut self, logits: &[f64], used: &[bool]) {
        let (mut lo, mut hi, mut occ) = (f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (&l, &u) in logits.iter().zip(used) {
            if u {
                occ = occ.max(l);
            } else {
                lo = lo.min(l);
                hi = hi.max(l);
            }
        }
        self.min_disp = self.min_disp.min(lo - occ);
        self.max_dev = self.max_dev.max(hi - lo);
        self.count += 1;
    }

    fn merge(self, o: Acc) -> Acc {
        Acc { min_disp: self.min_disp.min(o.min_disp), max_dev: self.max_dev.max(o.max_dev), count: self.count + o.count }
    }
}

fn enumerate_from<F: Fn(&[Token]) -> Vec<f64>>(f: &F, seq: &mut Vec<Token>, used: &mut [bool], s: usize, acc: &mut Acc) {
    if seq.len() == s {
        acc.observe(&f(seq), used);
        return;
    }
    for t in 0..used.len() {
        if used[t] {
            continue;
        }
        used[t] = true;
        seq.push(t as Token);
        enumerate_from(f, seq, used, s, acc);
        seq.pop();
        used[t] = false;
    }
}

/// Certifies the precision of `f` at each requested length by visiting
/// every repetition-free sequence (or, when allowed and the count exceeds
/// the cap, a uniform sample labelled non-exhaustive).
pub fn check_precision<F>(f: &F, v: usize, lengths: &[usize], opts: &PrecisionOptions) -> Result<PrecisionReport>
where
    F: Fn(&[Token]) -> Vec<f64> + Sync,
{
    let mut records = Vec::with_capacity(lengths.len());
    for &s in lengths {
        if s == 0 || s >= v {
            return Err(Error::Precondition(format!("length {s} is not a valid input length for v = {v}")));
        }
        let required = sequence_count(v, s);
        let record = if required <= u128::from(opts.cap) {
            // partition on the first token
            let parts = opts.exec.map_range(v, |first| {
                let mut acc = Acc::EMPTY;
                let mut used = vec![false; v];
                used[first] = true;
                let mut seq = vec![first as Token];
                enumerate_from(f, &mut seq, &mut used, s, &mut acc);
                acc
            });
            let acc = parts.into_iter().fold(Acc::EMPTY, Acc::merge);
            debug_assert_eq!(u128::from(acc.count), required);
            PrecisionRecord {
                length: s,
                min_displacement: acc.min_disp,
                max_equality_deviation: acc.max_dev,
                sequences_checked: acc.count,
                exhaustive: true,
            }
        } else if opts.allow_sampling {
            const CHUNK: usize = 4096;
            let chunks = opts.sample_draws.div_ceil(CHUNK);
            let parts = opts.exec.map_range(chunks, |c| {
                let mut rng = stream(opts.seed, "precision-sample", &[s as u64, c as u64]);
                let mut acc = Acc::EMPTY;
                let mut pool: Vec<Token> = (0..v as Token).collect();
                let mut used = vec![false; v];
                let n = CHUNK.min(opts.sample_draws - c * CHUNK);
                for _ in 0..n {
                    for i in 0..s {
                        let j = rng.random_range(i..v);
                        pool.swap(i, j);
                    }
                    used.fill(false);
                    pool[..s].iter().for_each(|&t| used[usize::from(t)] = true);
                    acc.observe(&f(&pool[..s]), &used);
                }
                acc
            });
            let acc = parts.into_iter().fold(Acc::EMPTY, Acc::merge);
            PrecisionRecord {
                length: s,
                min_displacement: acc.min_disp,
                max_equality_deviation: acc.max_dev,
                sequences_checked: acc.count,
                exhaustive: false,
            }
        } else {
            return Err(Error::EnumerationBudget { len: s, required, cap: opts.cap });
        };
        records.push(record);
    }
    Ok(PrecisionReport { records })
}

pub fn check_precision_constant(
    model: &ConstantAttention,
    lengths: &[usize],
    opts: &PrecisionOptions,
) -> Result<PrecisionReport> {
    check_precision(&|t: &[Token]| model.logits(t), model.v(), lengths, opts)
}

/// Same certificate through the full attention forward pass.
pub fn check_precision_model(params: &ModelParams, lengths: &[usize], opts: &PrecisionOptions) -> Result<PrecisionReport> {
    let f = |t: &[Token]| logits(params, t).expect("valid tokens");
    check_precision(&f, params.dims.v, lengths, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub name: String,
    pub singular_values: Vec<f64>,
    pub tolerance: f64,
    pub rank: usize,
}

/// Number of singular values above `tol * sigma_max`.
pub fn numeric_rank(name: &str, m: &Matrix, tol: f64) -> RankReport {
    let sv = m.singular_values();
    let max = sv.first().copied().unwrap_or(0.0);
    let rank = if max == 0.0 { 0 } else { sv.iter().filter(|&&s| s > tol * max).count() };
    RankReport { name: name.to_string(), singular_values: sv, tolerance: tol, rank }
}

/// `1 u^T + v 1^T + diag(w)`
pub fn lemma_matrix(u: &[f64], v: &[f64], w: &[f64]) -> Result<Matrix> {
    let n = u.len();
    if v.len() != n || w.len() != n {
        return Err(Error::Shape("u, v and w must have equal length".into()));
    }
    Ok(Matrix::from_fn(n, n, |i, j| u[j] + v[i] + if i == j { w[i] } else { 0.0 }))
}

/// Rank of the assembled lemma matrix; requires `w` strictly negative.
pub fn verify_lemma_rank(u: &[f64], v: &[f64], w: &[f64], tol: f64) -> Result<RankReport> {
    if let Some(bad) = w.iter().find(|&&x| !(x < 0.0)) {
        return Err(Error::Precondition(format!("diagonal entries must be negative, found {bad}")));
    }
    Ok(numeric_rank("1u^T + v1^T + diag(w)", &lemma_matrix(u, v, w)?, tol))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Violated,
    NotApplicable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsVerdict {
    pub precision: f64,
    pub eq_tol: f64,
    pub length1: PrecisionRecord,
    pub length2: Option<PrecisionRecord>,
    pub rank_b_plus_d: RankReport,
    pub rank_d: RankReport,
    /// precision at length 1 implies `rank(B + D) >= v - 1`
    pub part_a: Verdict,
    /// precision at lengths 1 and 2 implies `rank(D) >= v - 1`
    pub part_b: Verdict,
}

impl BoundsVerdict {
    pub fn violated(&self) -> bool {
        self.part_a == Verdict::Violated || self.part_b == Verdict::Violated
    }
}

pub fn verify_rank_bounds(model: &ConstantAttention, c: f64, eq_tol: f64, tol: f64) -> Result<BoundsVerdict> {
    let v = model.v();
    let opts = PrecisionOptions::default();
    let lengths: Vec<usize> = (1..v.min(3)).collect();
    let report = check_precision_constant(model, &lengths, &opts)?;
    let length1 = report.records[0].clone();
    let length2 = report.at(2).cloned();
    let rank_b_plus_d = numeric_rank("B + D", &model.b.add(&model.d)?, tol);
    let rank_d = numeric_rank("D", &model.d, tol);
    let judge = |hyp: bool, rank: usize| match (hyp, rank + 1 >= v) {
        (false, _) => Verdict::NotApplicable,
        (true, true) => Verdict::Holds,
        (true, false) => Verdict::Violated,
    };
    let h1 = length1.passes(c, eq_tol);
    let h2 = h1 && length2.as_ref().is_some_and(|r| r.passes(c, eq_tol));
    Ok(BoundsVerdict {
        precision: c,
        eq_tol,
        part_a: judge(h1, rank_b_plus_d.rank),
        part_b: judge(h2, rank_d.rank),
        length1,
        length2,
        rank_b_plus_d,
        rank_d,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub precision: f64,
    /// largest `f((t))_u - f((t))_t` over distinct `t`, `u`
    pub max_lhs: f64,
    /// `2C - max_lhs`; positive iff the condition holds
    pub margin: f64,
    pub holds: bool,
}

pub fn check_balance_condition(model: &ConstantAttention, c: f64) -> BalanceReport {
    let v = model.v();
    let mut max_lhs = f64::NEG_INFINITY;
    for t in 0..v {
        let f = model.logits(&[t as Token]);
        for (u, &fu) in f.iter().enumerate() {
            if u != t {
                max_lhs = max_lhs.max(fu - f[t]);
            }
        }
    }
    BalanceReport { precision: c, max_lhs, margin: 2.0 * c - max_lhs, holds: max_lhs < 2.0 * c }
}

/// Relative rounding allowance in the decay comparison.
pub const DECAY_REL_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub length: usize,
    /// `2 C / s`
    pub bound: f64,
    pub min_displacement: f64,
    pub max_equality_deviation: f64,
    pub sequences_checked: u64,
    pub meets_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub precision: f64,
    pub eq_tol: f64,
    /// precision `C` at lengths 1 and 2 plus the balance condition
    pub hypotheses_hold: bool,
    pub balance: BalanceReport,
    pub rows: Vec<DecayRow>,
}

impl DecayReport {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| !r.meets_bound).count()
    }

    /// Not applicable when the hypotheses fail; otherwise whether every
    /// length reaches its bound.
    pub fn verdict(&self) -> Verdict {
        match (self.hypotheses_hold, self.violations()) {
            (false, _) => Verdict::NotApplicable,
            (true, 0) => Verdict::Holds,
            _ => Verdict::Violated,
        }
    }
}

/// Measures the precision at every length `3 <= s < v` against `2C/s`.
///
/// The table is filled even when the hypotheses fail so the measured decay
/// can be compared with the bound. The hardcoded model meets the bound with
/// equality, so `meets_bound` allows [`DECAY_REL_SLACK`] of rounding.
pub fn check_length_decay(model: &ConstantAttention, c: f64, eq_tol: f64, opts: &PrecisionOptions) -> Result<DecayReport> {
    let v = model.v();
    let short: Vec<usize> = (1..v.min(3)).collect();
    let base = check_precision_constant(model, &short, opts)?;
    let balance = check_balance_condition(model, c);
    let hypotheses_hold = base.passes(c, eq_tol) && balance.holds;
    let lengths: Vec<usize> = (3..v).collect();
    let report = check_precision_constant(model, &lengths, opts)?;
    let rows = report
        .records
        .into_iter()
        .map(|r| {
            let bound = 2.0 * c / r.length as f64;
            DecayRow {
                length: r.length,
                bound,
                min_displacement: r.min_displacement,
                max_equality_deviation: r.max_equality_deviation,
                sequences_checked: r.sequences_checked,
                meets_bound: r.min_displacement >= bound * (1.0 - DECAY_REL_SLACK) && r.max_equality_deviation <= eq_tol,
            }
        })
        .collect();
    Ok(DecayReport { precision: c, eq_tol, hypotheses_hold, balance, rows })
}

/// Everything `verify-theory` reports for one hardcoded model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub v: usize,
    pub precision: f64,
    pub norm: NormMode,
    pub eq_tol: f64,
    pub rank_tol: f64,
    pub precision_table: PrecisionReport,
    pub certified_lengths: Vec<usize>,
    pub bounds: BoundsVerdict,
    /// balance condition at the requested precision
    pub balance: BalanceReport,
    /// measured length-2 precision used as `C` for the decay table
    pub decay_precision: f64,
    pub decay: DecayReport,
    pub passed: bool,
    pub failures: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
pub struct TheoryOptions {
    pub eq_tol: f64,
    pub rank_tol: f64,
    pub precision: PrecisionOptions,
}

impl Default for TheoryOptions {
    fn default() -> Self {
        TheoryOptions { eq_tol: 0.0, rank_tol: DEFAULT_RANK_TOL, precision: PrecisionOptions::default() }
    }
}

/// Builds the hardcoded model and runs every check on it.
pub fn certify_hardcoded(v: usize, c: f64, norm: NormMode, opts: &TheoryOptions) -> Result<TheoryReport> {
    let params = build_hardcoded(v, c, norm)?;
    let model = ConstantAttention::from_params(&params)?;
    let lengths: Vec<usize> = (1..v).collect();
    let table = check_precision_constant(&model, &lengths, &opts.precision)?;
    let mut failures = Vec::new();
    let certified_lengths: Vec<usize> =
        table.records.iter().filter(|r| r.passes(c, opts.eq_tol)).map(|r| r.length).collect();
    for r in &table.records {
        if !r.passes(c, opts.eq_tol) {
            failures.push(format!(
                "precision {c} fails at length {}: min displacement {}, equality deviation {}",
                r.length, r.min_displacement, r.max_equality_deviation
            ));
        }
    }
    let bounds = verify_rank_bounds(&model, c, opts.eq_tol, opts.rank_tol)?;
    for rep in [&bounds.rank_b_plus_d, &bounds.rank_d] {
        if rep.rank + 1 < v {
            failures.push(format!("rank({}) = {} < v - 1 = {}", rep.name, rep.rank, v - 1));
        }
    }
    if bounds.violated() {
        failures.push("rank bound violated under its precision hypotheses".into());
    }
    let balance = check_balance_condition(&model, c);
    let decay_precision = table.at(2).map_or(c, |r| r.min_displacement);
    let decay = check_length_decay(&model, decay_precision, opts.eq_tol, &opts.precision)?;
    for row in decay.rows.iter().filter(|r| !r.meets_bound) {
        failures.push(format!(
            "length {}: min displacement {} below decay bound {}",
            row.length, row.min_displacement, row.bound
        ));
    }
    Ok(TheoryReport {
        v,
        precision: c,
        norm,
        eq_tol: opts.eq_tol,
        rank_tol: opts.rank_tol,
        precision_table: table,
        certified_lengths,
        bounds,
        balance,
        decay_precision,
        decay,
        passed: failures.is_empty(),
        failures,
    })
}
