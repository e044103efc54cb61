use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::task::{Token, TokenSequence};

use super::params::{ModelParams, NormMode};

/// `gains[i] * x[i] / sqrt(mean(x^2) + eps)`
pub fn rmsnorm(x: &[f64], gains: &[f64], eps: f64) -> Vec<f64> {
    let inv = rms_scale(x, eps);
    x.iter().zip(gains).map(|(&xi, &g)| g * xi * inv).collect()
}

#[inline]
fn rms_scale(x: &[f64], eps: f64) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / (ms + eps).sqrt()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

pub fn next_token_distribution(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[target]`
pub fn nll_loss(logits: &[f64], target: Token) -> f64 {
    log_sum_exp(logits) - logits[usize::from(target)]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub p_embed: f64,
    pub p_resid: f64,
    pub enabled: bool,
}

impl DropoutSpec {
    pub const OFF: DropoutSpec = DropoutSpec { p_embed: 0.0, p_resid: 0.0, enabled: false };

    pub fn training(p_embed: f64, p_resid: f64) -> Result<Self> {
        let spec = DropoutSpec { p_embed, p_resid, enabled: true };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.p_embed, self.p_resid] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.enabled && (self.p_embed > 0.0 || self.p_resid > 0.0)
    }
}

/// Per-occurrence inverted-dropout factors (`0` or `1/(1-p)`), row-major
/// `len x d`. A missing mask means the identity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DropoutMasks {
    pub embed: Option<Vec<f64>>,
    pub resid: Option<Vec<f64>>,
}

impl DropoutMasks {
    pub fn sample<R: Rng + ?Sized>(spec: &DropoutSpec, len: usize, d: usize, rng: &mut R) -> Self {
        if !spec.enabled {
            return DropoutMasks::default();
        }
        let draw = |p: f64, rng: &mut R| {
            (p > 0.0).then(|| {
                let keep = 1.0 / (1.0 - p);
                (0..len * d).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
            })
        };
        let embed = draw(spec.p_embed, rng);
        let resid = draw(spec.p_resid, rng);
        DropoutMasks { embed, resid }
    }
}

/// Everything the backward pass needs from one causal forward pass over a
/// sequence. Position `p` predicts the token after the prefix of length `p+1`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub tokens: Vec<Token>,
    pub masks: DropoutMasks,
    /// embeddings after embedding dropout, `len x d`
    pub x: Vec<f64>,
    /// `1/rms(x_p)` per position (1 in identity mode)
    pub inv_rms: Vec<f64>,
    /// normalized embeddings, `len x d`
    pub n: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    /// value vectors, `len x d_v`
    pub h: Vec<f64>,
    /// rows of `E' W_V W_O` after residual dropout, `len x d`
    pub o: Vec<f64>,
    /// attention weights, `len x len`, lower triangular
    pub attn: Vec<f64>,
    /// residual stream, `len x d`
    pub y: Vec<f64>,
    /// `len x v`
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn logits_at(&self, p: usize) -> &[f64] {
        let v = self.logits.len() / self.len();
        &self.logits[p * v..(p + 1) * v]
    }
}

/// `out = x * m` for a row vector `x`.
#[inline]
pub(crate) fn vecmat(x: &[f64], m: &Matrix, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(m.row(i)) {
            *o += xi * w;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Causal forward pass over all prefixes of `tokens` at once.
pub fn forward_trace(params: &ModelParams, tokens: &[Token], masks: DropoutMasks) -> Result<ForwardTrace> {
    let dims = params.dims;
    let (v, d, dk, dv) = (dims.v, dims.d, dims.d_k, dims.d_v);
    let len = tokens.len();
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    if let Some(&bad) = tokens.iter().find(|&&t| usize::from(t) >= v) {
        return Err(Error::TokenOutOfRange { token: bad.into(), v });
    }
    let t = &params.tensors;

    let mut x = vec![0.0; len * d];
    let mut inv_rms = vec![1.0; len];
    let mut n = vec![0.0; len * d];
    let mut q = vec![0.0; len * dk];
    let mut k = vec![0.0; len * dk];
    let mut h = vec![0.0; len * dv];
    let mut o = vec![0.0; len * d];
    for (p, &tok) in tokens.iter().enumerate() {
        let xp = &mut x[p * d..(p + 1) * d];
        xp.copy_from_slice(t.embed.row(usize::from(tok)));
        if let Some(m) = &masks.embed {
            xp.iter_mut().zip(&m[p * d..(p + 1) * d]).for_each(|(a, f)| *a *= f);
        }
        let np = &mut n[p * d..(p + 1) * d];
        match params.norm {
            NormMode::RmsNorm => {
                let inv = rms_scale(xp, params.norm_eps);
                inv_rms[p] = inv;
                for ((nv, &xv), &g) in np.iter_mut().zip(xp.iter()).zip(&t.gains) {
                    *nv = g * xv * inv;
                }
            }
            NormMode::Identity => np.copy_from_slice(xp),
        }
        vecmat(np, &t.w_q, &mut q[p * dk..(p + 1) * dk]);
        vecmat(np, &t.w_k, &mut k[p * dk..(p + 1) * dk]);
        vecmat(np, &t.w_v, &mut h[p * dv..(p + 1) * dv]);
        let op = &mut o[p * d..(p + 1) * d];
        vecmat(&h[p * dv..(p + 1) * dv], &t.w_o, op);
        if let Some(m) = &masks.resid {
            op.iter_mut().zip(&m[p * d..(p + 1) * d]).for_each(|(a, f)| *a *= f);
        }
    }

    let scale = 1.0 / (dk as f64).sqrt();
    let mut attn = vec![0.0; len * len];
    let mut y = x.clone();
    let mut logits = vec![0.0; len * v];
    for p in 0..len {
        let qp = &q[p * dk..(p + 1) * dk];
        let row = &mut attn[p * len..p * len + p + 1];
        for (i, a) in row.iter_mut().enumerate() {
            *a = dot(qp, &k[i * dk..(i + 1) * dk]) * scale;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|a| *a = (*a - max).exp());
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|a| *a /= z);
        let yp = &mut y[p * d..(p + 1) * d];
        for (i, &w) in row.iter().enumerate() {
            for (yv, &ov) in yp.iter_mut().zip(&o[i * d..(i + 1) * d]) {
                *yv += w * ov;
            }
        }
        vecmat(yp, &t.unembed, &mut logits[p * v..(p + 1) * v]);
    }

    Ok(ForwardTrace { tokens: tokens.to_vec(), masks, x, inv_rms, n, q, k, h, o, attn, y, logits })
}

/// Next-token logits after `t`, plus the trace for backpropagation.
pub fn forward<R: Rng + ?Sized>(
    params: &ModelParams,
    t: &TokenSequence,
    dropout: &DropoutSpec,
    rng: &mut R,
) -> Result<(Vec<f64>, ForwardTrace)> {
    let masks = DropoutMasks::sample(dropout, t.len(), params.dims.d, rng);
    let trace = forward_trace(params, t.tokens(), masks)?;
    Ok((trace.logits_at(t.len() - 1).to_vec(), trace))
}

/// Inference-mode logits for the full sequence `tokens`.
pub fn logits(params: &ModelParams, tokens: &[Token]) -> Result<Vec<f64>> {
    let trace = forward_trace(params, tokens, DropoutMasks::default())?;
    Ok(trace.logits_at(tokens.len() - 1).to_vec())
}

/// Logits under uniform attention: `B[t_s] + (sum_i D[t_i]) / s`.
pub fn forward_constant_attention(b: &Matrix, d: &Matrix, tokens: &[Token]) -> Vec<f64> {
    let last = usize::from(*tokens.last().expect("non-empty sequence"));
    let mut acc = vec![0.0; d.cols()];
    for &t in tokens {
        acc.iter_mut().zip(d.row(usize::from(t))).for_each(|(a, x)| *a += x);
    }
    let s = tokens.len() as f64;
    b.row(last).iter().zip(acc).map(|(bv, a)| bv + a / s).collect()
}

/// The `v x v` matrices that determine a constant-attention model.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivedMatrices {
    /// `E U`
    pub b: Matrix,
    /// `exp(A' / sqrt(d_k))`, saturated at `f64::MAX`
    pub a: Matrix,
    /// `E' W_V W_O U`
    pub d: Matrix,
    /// entries of `a` that overflowed and were saturated
    pub saturated: usize,
}

/// `E'`: embedding rows after the norm layer.
pub fn normalized_embeddings(params: &ModelParams) -> Matrix {
    let e = &params.tensors.embed;
    match params.norm {
        NormMode::Identity => e.clone(),
        NormMode::RmsNorm => {
            let rows: Vec<Vec<f64>> =
                (0..e.rows()).map(|i| rmsnorm(e.row(i), &params.tensors.gains, params.norm_eps)).collect();
            Matrix::from_rows(&rows).expect("rectangular")
        }
    }
}

pub fn derived_matrices(params: &ModelParams) -> Result<DerivedMatrices> {
    let t = &params.tensors;
    let en = normalized_embeddings(params);
    let b = t.embed.matmul(&t.unembed)?;
    let q = en.matmul(&t.w_q)?;
    let k = en.matmul(&t.w_k)?;
    let scale = 1.0 / (params.dims.d_k as f64).sqrt();
    let mut saturated = 0;
    let a = q.matmul(&k.transpose())?.map(|l| l * scale);
    let a = a.map(|l| {
        let e = l.exp();
        if e.is_finite() {
            e
        } else {
            f64::MAX
        }
    });
    saturated += a.as_slice().iter().filter(|&&x| x == f64::MAX).count();
    let d = en.matmul(&t.w_v)?.matmul(&t.w_o)?.matmul(&t.unembed)?;
    Ok(DerivedMatrices { b, a, d, saturated })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use crate::model::params::{init_params, Dims};
    use crate::rng::stream;
    use crate::task::Vocabulary;
    use crate::theory::build_hardcoded;

    use super::*;

    #[test]
    fn rmsnorm_examples() {
        let out = rmsnorm(&[1.0; 4], &[1.0; 4], 0.0);
        assert_eq!(out, vec![1.0; 4]);
        let out = rmsnorm(&[3.0, 4.0], &[1.0, 1.0], 0.0);
        assert_abs_diff_eq!(out[0], 3.0 / 12.5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(out[0], 0.8485, epsilon = 1e-4);
        assert_abs_diff_eq!(out[1], 1.1314, epsilon = 1e-4);
        assert_eq!(rmsnorm(&[0.0; 3], &[1.0; 3], 1e-6), vec![0.0; 3]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[0.0, 3f64.ln()]);
        assert_abs_diff_eq!(p[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.75, epsilon = 1e-15);
        let l = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = l.iter().map(|x| x + 123.4).collect();
        for (a, b) in softmax(&l).iter().zip(softmax(&shifted)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn nll_examples() {
        assert_abs_diff_eq!(nll_loss(&[0.7; 4], 2), 4f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(nll_loss(&[10.0, 0.0], 0), 4.5398899e-5, epsilon = 1e-11);
        assert_abs_diff_eq!(nll_loss(&[1.0, 2.0, 3.0], 1), nll_loss(&[11.0, 12.0, 13.0], 1), epsilon = 1e-12);
    }

    fn hardcoded3() -> ModelParams {
        build_hardcoded(3, 1.0, NormMode::Identity).unwrap()
    }

    #[test]
    fn hardcoded_derived_matrices() {
        let m = derived_matrices(&hardcoded3()).unwrap();
        assert_eq!(m.b.row(0), &[-1.0, 0.0, 0.0]);
        assert_eq!(m.d.row(0), &[-3.0, 0.0, 0.0]);
        assert!(m.a.as_slice().iter().all(|&a| a == 1.0));
        assert_eq!(m.d, m.b.scale(3.0));
        assert_eq!(m.saturated, 0);
    }

    #[test]
    fn hardcoded_forward_examples() {
        let p = hardcoded3();
        assert_eq!(logits(&p, &[0]).unwrap(), vec![-4.0, 0.0, 0.0]);
        assert_eq!(logits(&p, &[0, 1]).unwrap(), vec![-1.5, -2.5, 0.0]);
        let m = derived_matrices(&p).unwrap();
        assert_eq!(forward_constant_attention(&m.b, &m.d, &[1, 0]), vec![-2.5, -1.5, 0.0]);
        let single = forward_constant_attention(&m.b, &m.d, &[2]);
        let direct: Vec<f64> = m.b.row(2).iter().zip(m.d.row(2)).map(|(a, b)| a + b).collect();
        assert_eq!(single, direct);
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let dims = Dims::new(6, 5, 3, 4).unwrap();
        let mut p = init_params(dims, NormMode::RmsNorm, 1e-6, &mut stream(9, "init", &[])).unwrap();
        p.tensors.w_q = Matrix::zeros(5, 3);
        p.tensors.w_k = Matrix::zeros(5, 3);
        let m = derived_matrices(&p).unwrap();
        assert!(m.a.as_slice().iter().all(|&a| a == 1.0));
        let toks = [3, 0, 5, 2];
        for len in 1..=toks.len() {
            let full = logits(&p, &toks[..len]).unwrap();
            let fast = forward_constant_attention(&m.b, &m.d, &toks[..len]);
            for (a, b) in full.iter().zip(&fast) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_rate_dropout_is_bit_exact() {
        let dims = Dims::new(5, 4, 2, 3).unwrap();
        let p = init_params(dims, NormMode::RmsNorm, 1e-6, &mut stream(1, "init", &[])).unwrap();
        let t = TokenSequence::new(vec![4, 1, 2], Vocabulary::new(5).unwrap()).unwrap();
        let mut rng = stream(2, "drop", &[]);
        let (a, _) = forward(&p, &t, &DropoutSpec::training(0.0, 0.0).unwrap(), &mut rng).unwrap();
        let (b, _) = forward(&p, &t, &DropoutSpec::OFF, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_sequence_rejected() {
        let p = hardcoded3();
        assert!(matches!(forward_trace(&p, &[], DropoutMasks::default()), Err(Error::EmptySequence)));
    }

    #[test]
    fn attention_saturates_instead_of_overflowing() {
        let mut p = hardcoded3();
        p.tensors.w_q = Matrix::from_fn(2, 1, |_, _| 1e3);
        p.tensors.w_k = Matrix::from_fn(2, 1, |_, _| 1e3);
        let m = derived_matrices(&p).unwrap();
        assert!(m.saturated > 0);
        assert!(m.a.is_finite());
    }
}
