//! Reverse-mode differentiation of the causal forward pass.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::task::Token;

use super::forward::{dot, forward_trace, nll_loss, softmax, DropoutMasks, ForwardTrace};
use super::params::{ModelParams, NormMode, Tensors};

#[inline]
fn outer_add(m: &mut Matrix, a: &[f64], b: &[f64], scale: f64) {
    for (i, &ai) in a.iter().enumerate() {
        let f = ai * scale;
        if f == 0.0 {
            continue;
        }
        for (dst, &bj) in m.row_mut(i).iter_mut().zip(b) {
            *dst += f * bj;
        }
    }
}

/// `out = m * y` for a column vector `y`.
#[inline]
fn matvec(m: &Matrix, y: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(i), y);
    }
}

/// Accumulates `dL/dtheta` into `grads`, given `dL/dlogits` for every
/// position of `trace` (row-major `len x v`). Dropout masks recorded in the
/// trace are treated as constants.
pub fn backward(params: &ModelParams, trace: &ForwardTrace, dlogits: &[f64], grads: &mut Tensors) -> Result<()> {
    let dims = params.dims;
    let (v, d, dk, dv) = (dims.v, dims.d, dims.d_k, dims.d_v);
    let len = trace.len();
    if dlogits.len() != len * v {
        return Err(Error::Shape(format!("expected {} logit gradients, got {}", len * v, dlogits.len())));
    }
    let t = &params.tensors;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut dx = vec![0.0; len * d];
    let mut d_o = vec![0.0; len * d];
    let mut dq = vec![0.0; len * dk];
    let mut dkey = vec![0.0; len * dk];
    let mut dw = vec![0.0; len];

    for p in 0..len {
        let g = &dlogits[p * v..(p + 1) * v];
        let yp = &trace.y[p * d..(p + 1) * d];
        outer_add(&mut grads.unembed, yp, g, 1.0);
        let dy = &mut dx[p * d..(p + 1) * d];
        matvec(&t.unembed, g, dy);
        let dy = dx[p * d..(p + 1) * d].to_vec();

        let w = &trace.attn[p * len..p * len + p + 1];
        for i in 0..=p {
            dw[i] = dot(&trace.o[i * d..(i + 1) * d], &dy);
            for (a, &b) in d_o[i * d..(i + 1) * d].iter_mut().zip(&dy) {
                *a += w[i] * b;
            }
        }
        let mean: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        let qp = &trace.q[p * dk..(p + 1) * dk];
        for i in 0..=p {
            let da = w[i] * (dw[i] - mean) * scale;
            if da == 0.0 {
                continue;
            }
            let ki = &trace.k[i * dk..(i + 1) * dk];
            for (a, &b) in dq[p * dk..(p + 1) * dk].iter_mut().zip(ki) {
                *a += da * b;
            }
            for (a, &b) in dkey[i * dk..(i + 1) * dk].iter_mut().zip(qp) {
                *a += da * b;
            }
        }
    }

    let mut dh = vec![0.0; dv];
    let mut dn = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    for i in 0..len {
        let doi = &mut d_o[i * d..(i + 1) * d];
        if let Some(m) = &trace.masks.resid {
            doi.iter_mut().zip(&m[i * d..(i + 1) * d]).for_each(|(a, f)| *a *= f);
        }
        let doi = &d_o[i * d..(i + 1) * d];
        let hi = &trace.h[i * dv..(i + 1) * dv];
        let ni = &trace.n[i * d..(i + 1) * d];
        outer_add(&mut grads.w_o, hi, doi, 1.0);
        matvec(&t.w_o, doi, &mut dh);
        outer_add(&mut grads.w_v, ni, &dh, 1.0);
        matvec(&t.w_v, &dh, &mut dn);
        let dqi = &dq[i * dk..(i + 1) * dk];
        let dki = &dkey[i * dk..(i + 1) * dk];
        outer_add(&mut grads.w_q, ni, dqi, 1.0);
        outer_add(&mut grads.w_k, ni, dki, 1.0);
        matvec(&t.w_q, dqi, &mut tmp);
        dn.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
        matvec(&t.w_k, dki, &mut tmp);
        dn.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);

        let xi = &trace.x[i * d..(i + 1) * d];
        let dxi = &mut dx[i * d..(i + 1) * d];
        match params.norm {
            NormMode::Identity => dxi.iter_mut().zip(&dn).for_each(|(a, b)| *a += b),
            NormMode::RmsNorm => {
                let inv = trace.inv_rms[i];
                let mut proj = 0.0;
                for j in 0..d {
                    grads.gains[j] += dn[j] * xi[j] * inv;
                    proj += dn[j] * t.gains[j] * xi[j];
                }
                let c = proj * inv * inv * inv / d as f64;
                for j in 0..d {
                    dxi[j] += dn[j] * t.gains[j] * inv - xi[j] * c;
                }
            }
        }
        if let Some(m) = &trace.masks.embed {
            dxi.iter_mut().zip(&m[i * d..(i + 1) * d]).for_each(|(a, f)| *a *= f);
        }
        let row = grads.embed.row_mut(usize::from(trace.tokens[i]));
        row.iter_mut().zip(dxi.iter()).for_each(|(a, b)| *a += b);
    }
    Ok(())
}

/// Next-token NLL summed over every prefix of `row` that has a successor
/// (prefix `1..len-1`, target at the following position), with gradients
/// scaled by `weight` accumulated into `grads`. Returns the unscaled sum.
pub fn row_loss_and_grad(
    params: &ModelParams,
    row: &[Token],
    masks: DropoutMasks,
    weight: f64,
    grads: &mut Tensors,
) -> Result<f64> {
    if row.len() < 2 {
        return Err(Error::Precondition("a training row needs at least two tokens".into()));
    }
    let v = params.dims.v;
    let inputs = &row[..row.len() - 1];
    let trace = forward_trace(params, inputs, masks)?;
    let mut dlogits = vec![0.0; inputs.len() * v];
    let mut total = 0.0;
    for (p, &target) in row[1..].iter().enumerate() {
        let l = trace.logits_at(p);
        total += nll_loss(l, target);
        let g = &mut dlogits[p * v..(p + 1) * v];
        g.copy_from_slice(&softmax(l));
        g[usize::from(target)] -= 1.0;
        g.iter_mut().for_each(|x| *x *= weight);
    }
    backward(params, &trace, &dlogits, grads)?;
    Ok(total)
}

/// Summed prefix NLL of `row` without gradients.
pub fn row_loss(params: &ModelParams, row: &[Token], masks: DropoutMasks) -> Result<f64> {
    if row.len() < 2 {
        return Err(Error::Precondition("a training row needs at least two tokens".into()));
    }
    let trace = forward_trace(params, &row[..row.len() - 1], masks)?;
    Ok(row[1..].iter().enumerate().map(|(p, &u)| nll_loss(trace.logits_at(p), u)).sum())
}
