//! One-sample Kolmogorov–Smirnov test against U[0, 1], and probability
//! integral transforms for the search samplers' marginals.

use setcomp_core::search::HyperSample;

/// Asymptotic p-value of the KS statistic `d` for `n` samples.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let term = (-2.0 * (k as f64 * lambda).powi(2)).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// KS statistic of `u` against U[0, 1].
pub fn ks_uniform(mut u: Vec<f64>) -> (f64, f64) {
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in u.iter().enumerate() {
        d = d.max((i as f64 + 1.0) / n - x).max(x - i as f64 / n);
    }
    (d, ks_p_value(d, u.len()))
}

/// Randomized transform for a discrete value with CDF `f`:
/// `F(k - 1) + V (F(k) - F(k - 1))` is exactly uniform.
pub fn discrete_pit(k: i64, f: impl Fn(i64) -> f64, jitter: f64) -> f64 {
    let lo = f(k - 1);
    lo + jitter * (f(k) - lo)
}

/// `(name, transformed value)` for every sampled marginal; `jitter` is a
/// fresh U[0, 1) per draw for the discrete ones.
pub fn marginals(h: &HyperSample, jitter: &mut impl FnMut() -> f64) -> Vec<(&'static str, f64)> {
    let a = h.arch;
    let m = h.member;
    // floor(2^U[0,4]) = k  <=>  log2(k) <= U < log2(k + 1)
    let pow2_floor = |k: i64| ((k + 1) as f64).log2().clamp(0.0, 4.0) / 4.0;
    let log_uniform = |x: f64, lo: f64, hi: f64| (x.log10() - lo) / (hi - lo);
    let mut out = vec![
        ("s", discrete_pit(a.s as i64 - 1, pow2_floor, jitter())),
        ("v - s", discrete_pit((a.v - a.s) as i64, pow2_floor, jitter())),
        ("d | v", {
            let v1 = (a.v - 1) as f64;
            discrete_pit(a.d as i64, |k| (((k + 1) as f64 / v1 - 1.0) / 3.0).clamp(0.0, 1.0), jitter())
        }),
        ("norm eps", log_uniform(m.norm_eps, -10.0, -4.0)),
        ("beta1", log_uniform(1.0 - m.beta1, -2.0, 0.0)),
        ("beta2", log_uniform(1.0 - m.beta2, -8.0, -1.0)),
        ("weight decay", log_uniform(m.weight_decay, -6.0, 0.0)),
        ("adam eps", log_uniform(m.adam_eps, -12.0, -8.0)),
        ("max grad norm", log_uniform(m.max_grad_norm, -2.0, 2.0)),
        ("peak lr", log_uniform(m.peak_lr, -5.0, -1.0)),
        ("warmup", discrete_pit(m.warmup_steps as i64, |k| (((k + 1) as f64).log10() + 2.0).clamp(0.0, 8.0) / 8.0, jitter())),
        ("end multiplier", log_uniform(m.end_multiplier, -4.0, 0.0)),
        ("embedding dropout", dropout_pit(m.p_embed, jitter())),
        ("residual dropout", dropout_pit(m.p_resid, jitter())),
        ("bema power", m.bema_power),
        ("ema lag", log_uniform(m.ema_lag, 0.0, 10.0)),
        ("ema power", m.ema_power),
    ];
    if a.d >= 2 {
        let d1 = (a.d - 1) as f64;
        out.push(("d_k | d", discrete_pit(a.d_k as i64, |k| (k as f64 / d1).clamp(0.0, 1.0), jitter())));
    }
    if a.d + 1 > a.v {
        let span = (a.d + 1 - a.v) as f64;
        let v = a.v as f64;
        out.push(("d_v | v, d", discrete_pit(a.d_v as i64, |k| ((k as f64 + 2.0 - v) / span).clamp(0.0, 1.0), jitter())));
    }
    out
}

/// `relu(U[-1/2, 1/2])`: an atom of mass 1/2 at 0, then uniform density 1.
fn dropout_pit(x: f64, jitter: f64) -> f64 {
    if x == 0.0 {
        0.5 * jitter
    } else {
        0.5 + x
    }
}
