//! Scalar logistic kernels returning a log-probability together with its
//! partial derivatives with respect to the location and the log-scale.

use crate::autodiff::rounding::sigmoid;

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Discretization of a logistic onto a finite lattice alphabet. Values are
/// in real units: symbols are `lo, lo + bin, ..., hi`; the two edge bins
/// absorb the tails.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticeSpec {
    pub bin: f64,
    pub lo: f64,
    pub hi: f64,
    /// Lower clamp on the log-scale (real units).
    pub min_log_s: f64,
}

/// Log-scale clamp in units of the lattice bin.
pub const MIN_LOG_SCALE_BINS: f64 = -7.0;

impl LatticeSpec {
    pub fn new(bin: f64, lo: f64, hi: f64) -> Self {
        LatticeSpec {
            bin,
            lo,
            hi,
            min_log_s: MIN_LOG_SCALE_BINS + bin.ln(),
        }
    }

    /// Unbounded alphabet: no tail folding.
    pub fn unbounded(bin: f64) -> Self {
        Self::new(bin, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn symbols(&self) -> usize {
        ((self.hi - self.lo) / self.bin).round() as usize + 1
    }
}

/// `(log pmf, d/d mu, d/d log_s)` of a discretized logistic at lattice value `z`.
#[inline]
pub fn dl_log_pmf(z: f64, mu: f64, log_s: f64, spec: &LatticeSpec) -> (f64, f64, f64) {
    let (ls, clamped) = if log_s < spec.min_log_s {
        (spec.min_log_s, true)
    } else {
        (log_s, false)
    };
    let half = 0.5 * spec.bin;
    let at_lo = z <= spec.lo + half;
    let at_hi = z >= spec.hi - half;
    if at_lo && at_hi {
        return (0.0, 0.0, 0.0);
    }
    let inv_s = (-ls).exp();
    let a = (z + half - mu) * inv_s;
    let b = (z - half - mu) * inv_s;
    let (lp, dmu, dls) = if at_lo {
        let sa = sigmoid(-a);
        (log_sigmoid(a), -sa * inv_s, -a * sa)
    } else if at_hi {
        let sb = sigmoid(b);
        (log_sigmoid(-b), sb * inv_s, b * sb)
    } else {
        let r = spec.bin * inv_s;
        let sa = sigmoid(-a);
        let sb = sigmoid(b);
        let em1 = r.exp_m1();
        let third = if r > 1e-300 { -r / em1 } else { -1.0 };
        (
            log_sigmoid(a) + log_sigmoid(-b) + (-(-r).exp_m1()).ln(),
            (sb - sa) * inv_s,
            -a * sa + b * sb + third,
        )
    };
    (lp, dmu, if clamped { 0.0 } else { dls })
}

/// `(log density, d/d mu, d/d log_s)` of a continuous logistic at `x`.
#[inline]
pub fn logistic_log_pdf(x: f64, mu: f64, log_s: f64) -> (f64, f64, f64) {
    let inv_s = (-log_s).exp();
    let c = (x - mu) * inv_s;
    let lp = -c - log_s - 2.0 * softplus(-c);
    let g = 1.0 - 2.0 * sigmoid(c);
    (lp, -g * inv_s, -g * c - 1.0)
}

/// Log-sum-exp with partials: returns `(log p, responsibilities)`.
pub(crate) fn log_mix(terms: &[f64], resp: &mut [f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        resp.iter_mut().for_each(|r| *r = 0.0);
        return m;
    }
    let mut s = 0.0;
    for (r, &t) in resp.iter_mut().zip(terms) {
        *r = (t - m).exp();
        s += *r;
    }
    for r in resp.iter_mut() {
        *r /= s;
    }
    m + s.ln()
}

pub(crate) fn log_softmax(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    let ls = m + s.ln();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - ls;
    }
}
