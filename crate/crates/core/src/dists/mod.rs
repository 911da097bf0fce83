//! Probability models on the lattice: discretized logistics, their
//! mixtures, and the continuous logistic density used by dequantized models.

pub mod kernels;

use rand::Rng;

use crate::autodiff::rounding::{round_half_up, sigmoid};
use crate::error::{Error, Result};
pub use kernels::{LatticeSpec, MIN_LOG_SCALE_BINS};

impl LatticeSpec {
    /// Symmetric latent alphabet `[-2^(b+2), 2^(b+2))` in code units.
    pub fn latent(bits: u32) -> Self {
        let half = 1i64 << (bits + 2);
        Self::from_codes(bits, -half, half - 1)
    }

    /// Alphabet `lo..=hi` in code units at `bits` precision.
    pub fn from_codes(bits: u32, lo: i64, hi: i64) -> Self {
        let bin = crate::grid::bin_width(bits);
        Self::new(bin, lo as f64 * bin, hi as f64 * bin)
    }

    fn check_finite(&self) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Domain("table needs a bounded alphabet".into()));
        }
        Ok(())
    }

    /// Index of lattice value `z`, or a domain error if outside.
    pub fn index_of(&self, z: f64) -> Result<usize> {
        let i = ((z - self.lo) / self.bin).round();
        if !(i >= 0.0) || z > self.hi + 0.5 * self.bin {
            return Err(Error::Domain(format!(
                "{z} outside alphabet [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(i as usize)
    }

    pub fn value_of(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.bin
    }
}

fn clamp_log_s(log_s: f64, spec: &LatticeSpec) -> f64 {
    log_s.max(spec.min_log_s)
}

/// Fills `out` with the discretized-logistic masses over the alphabet,
/// differencing whichever tail is more accurate on each side of `mu`.
pub(crate) fn dl_table_into(mu: f64, log_s: f64, spec: &LatticeSpec, out: &mut [f64]) {
    let n = out.len();
    if n == 1 {
        out[0] = 1.0;
        return;
    }
    let inv_s = (-clamp_log_s(log_s, spec)).exp();
    let half = 0.5 * spec.bin;
    // Upper edge of symbol i sits at lo + i*bin + bin/2.
    let lower_tail = |i: usize| sigmoid((spec.lo + i as f64 * spec.bin + half - mu) * inv_s);
    let upper_tail = |i: usize| sigmoid(-(spec.lo + i as f64 * spec.bin + half - mu) * inv_s);
    let mut prev_lower = 0.0;
    let mut prev_upper = 1.0;
    for (i, slot) in out.iter_mut().enumerate() {
        if i == n - 1 {
            *slot = prev_upper;
            break;
        }
        let centre = spec.lo + i as f64 * spec.bin;
        let lo_t = lower_tail(i);
        let up_t = upper_tail(i);
        *slot = if centre <= mu {
            lo_t - prev_lower
        } else {
            prev_upper - up_t
        };
        if *slot < 0.0 {
            *slot = 0.0;
        }
        prev_lower = lo_t;
        prev_upper = up_t;
    }
}

/// Single discretized logistic on a lattice alphabet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscretizedLogistic {
    pub mu: f64,
    pub log_s: f64,
    pub spec: LatticeSpec,
}

impl DiscretizedLogistic {
    pub fn new(mu: f64, log_s: f64, spec: LatticeSpec) -> Self {
        DiscretizedLogistic { mu, log_s, spec }
    }

    /// Log mass of lattice value `z`; edge bins absorb the tails.
    pub fn log_pmf(&self, z: f64) -> Result<f64> {
        self.spec.index_of(z)?;
        Ok(kernels::dl_log_pmf(z, self.mu, self.log_s, &self.spec).0)
    }

    /// Masses of every alphabet symbol, in order.
    pub fn pmf_table(&self) -> Result<Vec<f64>> {
        self.spec.check_finite()?;
        let mut out = vec![0.0; self.spec.symbols()];
        dl_table_into(self.mu, self.log_s, &self.spec, &mut out);
        Ok(out)
    }

    /// Inverse-CDF sample quantized to the alphabet.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        let s = clamp_log_s(self.log_s, &self.spec).exp();
        let x = self.mu + s * (u / (1.0 - u)).ln();
        let mut k = round_half_up((x - self.spec.lo) / self.spec.bin);
        if self.spec.hi.is_finite() {
            k = k.min(self.spec.symbols() as f64 - 1.0);
        }
        if self.spec.lo.is_finite() {
            k = k.max(0.0);
        }
        self.spec.lo + k * self.spec.bin
    }
}

/// Mixture of discretized logistics sharing one alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDL {
    pub mu: Vec<f64>,
    pub log_s: Vec<f64>,
    pub logits: Vec<f64>,
    pub spec: LatticeSpec,
}

impl MixtureDL {
    pub fn new(mu: Vec<f64>, log_s: Vec<f64>, logits: Vec<f64>, spec: LatticeSpec) -> Result<Self> {
        if mu.is_empty() || mu.len() != log_s.len() || mu.len() != logits.len() {
            return Err(Error::Dimension("mixture parameter lengths differ".into()));
        }
        Ok(MixtureDL {
            mu,
            log_s,
            logits,
            spec,
        })
    }

    pub fn weights(&self) -> Vec<f64> {
        let mut lw = vec![0.0; self.logits.len()];
        kernels::log_softmax(&self.logits, &mut lw);
        lw.into_iter().map(f64::exp).collect()
    }

    pub fn log_pmf(&self, z: f64) -> Result<f64> {
        self.spec.index_of(z)?;
        let mut lw = vec![0.0; self.logits.len()];
        kernels::log_softmax(&self.logits, &mut lw);
        let terms: Vec<f64> = (0..self.mu.len())
            .map(|k| lw[k] + kernels::dl_log_pmf(z, self.mu[k], self.log_s[k], &self.spec).0)
            .collect();
        let mut resp = vec![0.0; terms.len()];
        Ok(kernels::log_mix(&terms, &mut resp))
    }

    pub fn pmf_table(&self) -> Result<Vec<f64>> {
        self.spec.check_finite()?;
        let n = self.spec.symbols();
        let mut out = vec![0.0; n];
        let mut comp = vec![0.0; n];
        for (k, w) in self.weights().into_iter().enumerate() {
            dl_table_into(self.mu[k], self.log_s[k], &self.spec, &mut comp);
            for (o, c) in out.iter_mut().zip(&comp) {
                *o += w * c;
            }
        }
        Ok(out)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let w = self.weights();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = w.len() - 1;
        for (k, wk) in w.iter().enumerate() {
            acc += wk;
            if u < acc {
                pick = k;
                break;
            }
        }
        DiscretizedLogistic::new(self.mu[pick], self.log_s[pick], self.spec).sample(rng)
    }
}

/// Log density of a logistic with location `mu` and scale `s` at `x`.
pub fn continuous_logistic_log_density(mu: f64, s: f64, x: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::Parameter(format!(
            "logistic scale must be positive, got {s}"
        )));
    }
    Ok(kernels::logistic_log_pdf(x, mu, s.ln()).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_bin_mass() {
        // Oracle: sigma(0.5) - sigma(-0.5) = tanh(1/4).
        let d = DiscretizedLogistic::new(0.0, 0.0, LatticeSpec::unbounded(1.0));
        let p = d.log_pmf(0.0).unwrap().exp();
        assert!((p - 0.25f64.tanh()).abs() < 1e-14);
        assert!((p - 0.244918).abs() < 1e-6);
    }

    #[test]
    fn tiny_scale_concentrates_on_nearest_bin() {
        let spec = LatticeSpec::new(1.0, -8.0, 8.0);
        let d = DiscretizedLogistic::new(3.0, -6.9, spec);
        assert!(d.log_pmf(3.0).unwrap().exp() > 0.999);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(d.sample(&mut rng), 3.0);
        }
    }

    #[test]
    fn symmetric_bins_have_equal_mass() {
        let spec = LatticeSpec::new(0.5, -4.0, 4.0);
        let d = DiscretizedLogistic::new(0.5, -0.3, spec);
        for k in 1..6 {
            let off = k as f64 * 0.5;
            let a = d.log_pmf(0.5 + off).unwrap();
            let b = d.log_pmf(0.5 - off).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_alphabet_is_domain_error() {
        let spec = LatticeSpec::from_codes(8, 0, 255);
        let d = DiscretizedLogistic::new(0.5, -2.0, spec);
        assert!(matches!(d.log_pmf(1.5), Err(Error::Domain(_))));
        assert!(matches!(d.log_pmf(-0.01), Err(Error::Domain(_))));
    }

    #[test]
    fn tables_normalize_up_to_sixteen_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for bits in [1u32, 4, 8, 13] {
            let spec = LatticeSpec::latent(bits);
            assert!(spec.symbols() <= 1 << 16);
            for _ in 0..5 {
                let d = DiscretizedLogistic::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-8.0..2.0),
                    spec,
                );
                let t = d.pmf_table().unwrap();
                let s: f64 = t.iter().sum();
                assert!((s - 1.0).abs() <= 1e-9, "bits {bits}: {s}");
                assert!(t.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn table_agrees_with_log_pmf() {
        let spec = LatticeSpec::from_codes(4, -8, 7);
        let d = DiscretizedLogistic::new(0.1, -1.5, spec);
        let t = d.pmf_table().unwrap();
        for (i, p) in t.iter().enumerate() {
            let lp = d.log_pmf(spec.value_of(i)).unwrap();
            assert!((p.ln() - lp).abs() < 1e-9 * (1.0 + lp.abs()) || (p - lp.exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn mixture_reductions() {
        let spec = LatticeSpec::from_codes(8, 0, 255);
        let single = DiscretizedLogistic::new(0.4, -3.0, spec);
        let peaked = MixtureDL::new(
            vec![0.4, 0.9, 0.1],
            vec![-3.0, -1.0, -2.0],
            vec![0.0, -1e4, -1e4],
            spec,
        )
        .unwrap();
        let equal = MixtureDL::new(vec![0.4; 3], vec![-3.0; 3], vec![0.7; 3], spec).unwrap();
        for k in [0.0, 0.4, 100.0 / 256.0, 255.0 / 256.0] {
            let a = single.log_pmf(k).unwrap();
            assert!((peaked.log_pmf(k).unwrap() - a).abs() < 1e-12);
            assert!((equal.log_pmf(k).unwrap() - a).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_normalizes_exhaustively() {
        let spec = LatticeSpec::from_codes(8, 0, 255);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let m = MixtureDL::new(
                (0..5).map(|_| rng.gen_range(-0.5..1.5)).collect(),
                (0..5).map(|_| rng.gen_range(-7.0..1.0)).collect(),
                (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                spec,
            )
            .unwrap();
            let s: f64 = (0..256)
                .map(|i| m.log_pmf(spec.value_of(i)).unwrap().exp())
                .sum();
            assert!((s - 1.0).abs() <= 1e-9, "{s}");
        }
    }

    #[test]
    fn continuous_density_properties() {
        assert!(continuous_logistic_log_density(0.0, 0.0, 1.0).is_err());
        assert!(continuous_logistic_log_density(0.0, -1.0, 1.0).is_err());
        let (mu, s) = (0.3, 0.7);
        let at_mode = continuous_logistic_log_density(mu, s, mu).unwrap().exp();
        assert!((at_mode - 1.0 / (4.0 * s)).abs() < 1e-15);
        // Midpoint rule over +-60 scales.
        let h = 1e-3;
        let total: f64 = (0..84_000)
            .map(|i| -42.0 + (i as f64 + 0.5) * h)
            .map(|x| continuous_logistic_log_density(mu, s, x).unwrap().exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn fine_lattice_mass_approaches_density() {
        let w = 1e-4;
        let d = DiscretizedLogistic::new(0.2, -0.5, LatticeSpec::unbounded(w));
        for k in [-3000.0, 0.0, 2000.0, 7000.0] {
            let z = k * w;
            let ratio = d.log_pmf(z).unwrap().exp() / w;
            let dens = continuous_logistic_log_density(0.2, (-0.5f64).exp(), z)
                .unwrap()
                .exp();
            assert!((ratio / dens - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn sample_frequencies_match_pmf() {
        let spec = LatticeSpec::from_codes(2, -4, 7);
        let m = MixtureDL::new(vec![-0.3, 0.9], vec![-0.8, -1.6], vec![0.2, -0.4], spec).unwrap();
        let table = m.pmf_table().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 1_000_000;
        let mut counts = vec![0usize; table.len()];
        for _ in 0..n {
            counts[spec.index_of(m.sample(&mut rng)).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(&table) {
            let expect = p * n as f64;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (*c as f64 - expect).abs() <= 3.0 * sd.max(1.0),
                "{c} vs {expect}"
            );
        }
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let sa: Vec<f64> = (0..50).map(|_| m.sample(&mut a)).collect();
        let sb: Vec<f64> = (0..50).map(|_| m.sample(&mut b)).collect();
        assert_eq!(sa, sb);
    }
}
