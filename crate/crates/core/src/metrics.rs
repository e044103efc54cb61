//! TVD, ITP and ITR against the uniform distribution over legal tokens,
//! aggregated over batch rows and prefixes.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{forward_trace, softmax, DropoutMasks, ModelParams};
use crate::task::{legal_mask_of, validate_tokens, SampleBatch, Token, TokenSequence};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tvd: f64,
    pub itp: f64,
    pub itr: f64,
}

impl Metrics {
    fn add(self, o: Metrics) -> Metrics {
        Metrics { tvd: self.tvd + o.tvd, itp: self.itp + o.itp, itr: self.itr + o.itr }
    }

    fn scale(self, c: f64) -> Metrics {
        Metrics { tvd: self.tvd * c, itp: self.itp * c, itr: self.itr * c }
    }
}

fn legal_count(legal: &[bool]) -> Result<usize> {
    match legal.iter().filter(|&&l| l).count() {
        0 => Err(Error::Precondition("no legal token".into())),
        k => Ok(k),
    }
}

/// Neumaier-compensated sum, so the error does not grow with `v`.
fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Total variation distance from `p` to the uniform distribution on `legal`.
pub fn tvd_masked(p: &[f64], legal: &[bool]) -> Result<f64> {
    let target = 1.0 / legal_count(legal)? as f64;
    let sum = compensated_sum(p.iter().zip(legal).map(|(&pi, &l)| if l { (pi - target).abs() } else { pi.abs() }));
    Ok(0.5 * sum)
}

/// Probability mass on illegal tokens.
pub fn itp_masked(p: &[f64], legal: &[bool]) -> f64 {
    compensated_sum(p.iter().zip(legal).filter(|(_, &l)| !l).map(|(&pi, _)| pi))
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate().skip(1) {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

/// 1 if the argmax token is illegal, else 0.
pub fn itr_masked(logits: &[f64], legal: &[bool]) -> f64 {
    if legal[argmax(logits)] {
        0.0
    } else {
        1.0
    }
}

fn check_input(len: usize, v: usize, width: usize) -> Result<()> {
    if len >= v {
        return Err(Error::DegenerateInput { len, v });
    }
    if width != v {
        return Err(Error::Shape(format!("expected {v} entries, got {width}")));
    }
    Ok(())
}

pub fn tvd(p: &[f64], t: &TokenSequence) -> Result<f64> {
    let v = t.vocab().size();
    check_input(t.len(), v, p.len())?;
    tvd_masked(p, &legal_mask_of(t.tokens(), v))
}

pub fn itp(p: &[f64], t: &TokenSequence) -> Result<f64> {
    let v = t.vocab().size();
    check_input(t.len(), v, p.len())?;
    Ok(itp_masked(p, &legal_mask_of(t.tokens(), v)))
}

pub fn itr(logits: &[f64], t: &TokenSequence) -> Result<f64> {
    let v = t.vocab().size();
    check_input(t.len(), v, logits.len())?;
    Ok(itr_masked(logits, &legal_mask_of(t.tokens(), v)))
}

/// All three metrics for one logit vector against a legal-token mask.
pub fn score_logits(logits: &[f64], legal: &[bool]) -> Result<Metrics> {
    let p = softmax(logits);
    Ok(Metrics { tvd: tvd_masked(&p, legal)?, itp: itp_masked(&p, legal), itr: itr_masked(logits, legal) })
}

/// Anything that produces next-token logits for every prefix of a sequence.
pub trait Predictor: Sync {
    fn vocab_size(&self) -> usize;

    /// Logits after each prefix `row[..1]`, `row[..2]`, ..., `row[..]`.
    fn prefix_logits(&self, row: &[Token]) -> Result<Vec<Vec<f64>>>;
}

impl Predictor for ModelParams {
    fn vocab_size(&self) -> usize {
        self.dims.v
    }

    fn prefix_logits(&self, row: &[Token]) -> Result<Vec<Vec<f64>>> {
        let trace = forward_trace(self, row, DropoutMasks::default())?;
        Ok((0..row.len()).map(|p| trace.logits_at(p).to_vec()).collect())
    }
}

/// Constant logits: the all-uniform predictor.
#[derive(Clone, Copy, Debug)]
pub struct UniformPredictor {
    pub v: usize,
}

impl Predictor for UniformPredictor {
    fn vocab_size(&self) -> usize {
        self.v
    }

    fn prefix_logits(&self, row: &[Token]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![0.0; self.v]; row.len()])
    }
}

/// Mean of every metric over rows and prefix lengths `1..=s`.
pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, batch: &SampleBatch, exec: Exec) -> Result<Metrics> {
    let v = batch.vocab().size();
    if predictor.vocab_size() != v {
        return Err(Error::Shape(format!("predictor vocabulary {} vs batch {v}", predictor.vocab_size())));
    }
    if batch.seq_len() >= v {
        return Err(Error::DegenerateInput { len: batch.seq_len(), v });
    }
    let rows: Vec<&[Token]> = batch.rows().collect();
    let per_row = exec.map_slice(&rows, |row| -> Result<Metrics> {
        let logits = predictor.prefix_logits(row)?;
        let mut acc = Metrics::default();
        for (p, l) in logits.iter().enumerate() {
            acc = acc.add(score_logits(l, &legal_mask_of(&row[..=p], v))?);
        }
        Ok(acc)
    });
    let mut total = Metrics::default();
    for m in per_row {
        total = total.add(m?);
    }
    Ok(total.scale(1.0 / (batch.n() * batch.seq_len()) as f64))
}

/// One line of an external logit file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    pub tokens: Vec<Token>,
    pub logits: Vec<f64>,
}

pub fn read_logit_records<R: BufRead>(r: R) -> Result<Vec<LogitRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Scores externally produced logits against the set complement target.
pub fn evaluate_logit_records(records: &[LogitRecord], v: usize) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::Format("no logit records".into()));
    }
    let mut total = Metrics::default();
    for r in records {
        if r.tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        validate_tokens(&r.tokens, v)?;
        check_input(r.tokens.len(), v, r.logits.len())?;
        total = total.add(score_logits(&r.logits, &legal_mask_of(&r.tokens, v))?);
    }
    Ok(total.scale(1.0 / records.len() as f64))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use crate::model::NormMode;
    use crate::rng::stream;
    use crate::task::{make_validation_batch, perfect_distribution, Vocabulary};
    use crate::theory::build_hardcoded;

    use super::*;

    fn seq(tokens: &[Token], v: usize) -> TokenSequence {
        TokenSequence::new(tokens.to_vec(), Vocabulary::new(v).unwrap()).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let t = seq(&[2, 0], 5);
        let p = perfect_distribution(&t).unwrap().probs;
        assert_eq!(tvd(&p, &t).unwrap(), 0.0);
        assert_eq!(itp(&p, &t).unwrap(), 0.0);
    }

    #[test]
    fn uniform_prediction() {
        let t = seq(&[0], 4);
        let p = vec![0.25; 4];
        assert_abs_diff_eq!(tvd(&p, &t).unwrap(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(itp(&p, &t).unwrap(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn one_hot_on_occupied_token() {
        let t = seq(&[1, 3], 5);
        let p = [0.0, 0.0, 0.0, 1.0, 0.0];
        assert_abs_diff_eq!(tvd(&p, &t).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(itp(&p, &t).unwrap(), 1.0);
        assert_eq!(itr(&[0.0, 0.0, 0.0, 5.0, 0.0], &t).unwrap(), 1.0);
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        // token 0 legal, token 1 illegal
        let t = seq(&[1], 3);
        assert_eq!(itr(&[2.0, 2.0, 0.0], &t).unwrap(), 0.0);
        let t = seq(&[0], 3);
        assert_eq!(itr(&[2.0, 2.0, 0.0], &t).unwrap(), 1.0);
    }

    #[test]
    fn full_sequence_is_rejected() {
        let t = seq(&[0, 1], 2);
        assert!(tvd(&[0.5, 0.5], &t).is_err());
    }

    #[test]
    fn uniform_predictor_batch_of_singletons() {
        let mut rng = stream(0, "t", &[]);
        let batch = SampleBatch::sample(Vocabulary::new(4).unwrap(), 1, 64, &mut rng).unwrap();
        let m = evaluate(&UniformPredictor { v: 4 }, &batch, Exec::Sequential).unwrap();
        assert_abs_diff_eq!(m.tvd, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(m.itp, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn hardcoded_model_is_near_perfect_on_validation() {
        let mut rng = stream(1, "t", &[]);
        for v in 3..=8 {
            let p = build_hardcoded(v, 10.0, NormMode::Identity).unwrap();
            let batch = make_validation_batch(Vocabulary::new(v).unwrap(), 64, &mut rng).unwrap();
            let m = evaluate(&p, &batch, Exec::Parallel).unwrap();
            assert_eq!(m.itr, 0.0);
            assert!(m.itp < (-10.0f64).exp(), "v={v} itp={}", m.itp);
        }
    }

    #[test]
    fn logit_records() {
        let recs = read_logit_records(
            &b"{\"tokens\":[0],\"logits\":[0,0,0,0]}\n\n{\"tokens\":[1,2],\"logits\":[-1000,-1000,-1000,0]}\n"[..],
        )
        .unwrap();
        assert_eq!(recs.len(), 2);
        let m = evaluate_logit_records(&recs, 4).unwrap();
        // second record puts everything on token 3, which is legal but not uniform
        assert_abs_diff_eq!(m.itp, 0.125, epsilon = 1e-12);
        assert!(evaluate_logit_records(&recs, 5).is_err());
    }
}
