//! Constructive flattening of a finite-support integer vector onto a single
//! dimension using only integer translations.
//!
//! Dimensions are merged from the back: `x_{n} += K_n * x_{n+1}` followed by
//! `x_{n+1} -= x_n div K_n`, which zeroes `x_{n+1}`. After `d - 1` merges
//! the first coordinate holds `x_1 + K_1 x_2 + K_1 K_2 x_3 + ...` and every
//! other coordinate is zero.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};

/// Integer translation applied to one coordinate from another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Translation {
    /// `t(x_a) = factor * x_a`.
    Multiply { factor: i64 },
    /// `t(x_a) = -(x_a div divisor)` with floor division.
    NegFloorDiv { divisor: i64 },
}

impl Translation {
    pub fn eval(&self, source: i64) -> i64 {
        match *self {
            Translation::Multiply { factor } => factor * source,
            Translation::NegFloorDiv { divisor } => -source.div_euclid(divisor),
        }
    }
}

/// One coupling `z_target = x_target + t(x_source)`, every other coordinate
/// passed through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TranslationStep {
    pub target: usize,
    pub source: usize,
    pub translation: Translation,
}

impl TranslationStep {
    pub fn forward(&self, x: &mut [i64]) {
        x[self.target] += self.translation.eval(x[self.source]);
    }

    pub fn inverse(&self, x: &mut [i64]) {
        x[self.target] -= self.translation.eval(x[self.source]);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlattenFlow {
    class_counts: Vec<i64>,
    steps: Vec<TranslationStep>,
}

/// Outcome of an exhaustive bijection check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BijectionReport {
    pub points: usize,
    /// Coordinatewise minimum and maximum over the image.
    pub image_min: Vec<i64>,
    pub image_max: Vec<i64>,
}

/// Largest support [`verify_bijection`] will enumerate.
pub const MAX_SUPPORT: u64 = 1_000_000;

/// Builds the flatten flow for class counts `K_1..K_d`.
pub fn build_flatten_flow(class_counts: &[i64]) -> Result<FlattenFlow> {
    if class_counts.len() < 2 {
        return Err(Error::Parameter(format!(
            "flattening needs at least two dimensions, got {}",
            class_counts.len()
        )));
    }
    if let Some(k) = class_counts.iter().find(|&&k| k < 1) {
        return Err(Error::Parameter(format!(
            "class counts must be positive, got {k}"
        )));
    }
    let d = class_counts.len();
    let mut steps = Vec::with_capacity(2 * (d - 1));
    for n in (0..d - 1).rev() {
        let k = class_counts[n];
        steps.push(TranslationStep {
            target: n,
            source: n + 1,
            translation: Translation::Multiply { factor: k },
        });
        steps.push(TranslationStep {
            target: n + 1,
            source: n,
            translation: Translation::NegFloorDiv { divisor: k },
        });
    }
    Ok(FlattenFlow {
        class_counts: class_counts.to_vec(),
        steps,
    })
}

impl FlattenFlow {
    pub fn dims(&self) -> usize {
        self.class_counts.len()
    }

    pub fn class_counts(&self) -> &[i64] {
        &self.class_counts
    }

    pub fn steps(&self) -> &[TranslationStep] {
        &self.steps
    }

    /// Number of support points, `prod K_i`, if it fits in a `u64`.
    pub fn support_size(&self) -> Option<u64> {
        self.class_counts
            .iter()
            .try_fold(1u64, |acc, &k| acc.checked_mul(k as u64))
    }

    pub fn forward(&self, x: &[i64]) -> Result<Vec<i64>> {
        self.check_len(x)?;
        let mut y = x.to_vec();
        for s in &self.steps {
            s.forward(&mut y);
        }
        Ok(y)
    }

    pub fn inverse(&self, y: &[i64]) -> Result<Vec<i64>> {
        self.check_len(y)?;
        let mut x = y.to_vec();
        for s in self.steps.iter().rev() {
            s.inverse(&mut x);
        }
        Ok(x)
    }

    /// Forward state after each step, starting with `x` itself.
    pub fn trace(&self, x: &[i64]) -> Result<Vec<Vec<i64>>> {
        self.check_len(x)?;
        let mut out = vec![x.to_vec()];
        let mut cur = x.to_vec();
        for s in &self.steps {
            s.forward(&mut cur);
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.len() == self.dims()
            && x.iter()
                .zip(&self.class_counts)
                .all(|(&v, &k)| (0..k).contains(&v))
    }

    /// Every support point, first coordinate varying fastest.
    pub fn support(&self) -> Result<Vec<Vec<i64>>> {
        let n = self
            .support_size()
            .filter(|&n| n <= MAX_SUPPORT)
            .ok_or_else(|| Error::Parameter(format!("support larger than {MAX_SUPPORT} points")))?
            as usize;
        let mut out = Vec::with_capacity(n);
        let mut cur = vec![0i64; self.dims()];
        for _ in 0..n {
            out.push(cur.clone());
            for (v, &k) in cur.iter_mut().zip(&self.class_counts) {
                *v += 1;
                if *v < k {
                    break;
                }
                *v = 0;
            }
        }
        Ok(out)
    }

    fn check_len(&self, x: &[i64]) -> Result<()> {
        if x.len() != self.dims() {
            return Err(Error::Dimension(format!(
                "flatten flow over {} dims got {}",
                self.dims(),
                x.len()
            )));
        }
        Ok(())
    }
}

/// Enumerates `points`, checking that `forward` is injective and that
/// `inverse` recovers every point.
pub fn verify_bijection_map<F, G>(
    points: &[Vec<i64>],
    mut forward: F,
    mut inverse: G,
) -> Result<BijectionReport>
where
    F: FnMut(&[i64]) -> Result<Vec<i64>>,
    G: FnMut(&[i64]) -> Result<Vec<i64>>,
{
    let mut seen: HashMap<Vec<i64>, usize> = HashMap::with_capacity(points.len());
    let mut lo: Vec<i64> = Vec::new();
    let mut hi: Vec<i64> = Vec::new();
    for (i, x) in points.iter().enumerate() {
        let y = forward(x)?;
        if let Some(&j) = seen.get(&y) {
            return Err(Error::Bijection(format!(
                "{:?} and {:?} both map to {y:?}",
                points[j], x
            )));
        }
        let back = inverse(&y)?;
        if &back != x {
            return Err(Error::Bijection(format!("{x:?} -> {y:?} -> {back:?}")));
        }
        if lo.is_empty() {
            lo = y.clone();
            hi = y.clone();
        }
        for (k, &v) in y.iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
        seen.insert(y, i);
    }
    Ok(BijectionReport {
        points: points.len(),
        image_min: lo,
        image_max: hi,
    })
}

/// Exhaustively checks that the flow maps its support bijectively onto
/// `{0..prod K - 1} x {0}^(d-1)`.
pub fn verify_bijection(f: &FlattenFlow) -> Result<BijectionReport> {
    let points = f.support()?;
    let report = verify_bijection_map(&points, |x| f.forward(x), |y| f.inverse(y))?;
    let n = points.len() as i64;
    let mut want_hi = vec![0; f.dims()];
    want_hi[0] = n - 1;
    if report.image_min != vec![0; f.dims()] || report.image_max != want_hi {
        return Err(Error::Bijection(format!(
            "image spans {:?}..={:?}, expected the first {n} integers on axis 0",
            report.image_min, report.image_max
        )));
    }
    Ok(report)
}

/// A finite pmf as `(point, probability)` pairs.
pub type Pmf = Vec<(Vec<i64>, f64)>;

fn check_pmf(f: &FlattenFlow, p: &[(Vec<i64>, f64)]) -> Result<()> {
    let mut total = 0.0;
    let mut seen = HashSet::with_capacity(p.len());
    for (x, q) in p {
        if !f.contains(x) {
            return Err(Error::Domain(format!(
                "{x:?} is outside the flow's support"
            )));
        }
        if !q.is_finite() || *q < 0.0 {
            return Err(Error::Domain(format!("probability {q} at {x:?}")));
        }
        if !seen.insert(x) {
            return Err(Error::Domain(format!("{x:?} listed twice")));
        }
        total += q;
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("probabilities sum to {total}")));
    }
    Ok(())
}

/// Pushes `p` through the flow.
pub fn pushforward(f: &FlattenFlow, p: &[(Vec<i64>, f64)]) -> Result<Pmf> {
    check_pmf(f, p)?;
    p.iter().map(|(x, q)| Ok((f.forward(x)?, *q))).collect()
}

/// Per-coordinate marginals of a pmf, each sorted by value.
pub fn marginals(p: &[(Vec<i64>, f64)]) -> Vec<BTreeMap<i64, f64>> {
    let d = p.first().map_or(0, |(x, _)| x.len());
    let mut out = vec![BTreeMap::new(); d];
    for (x, q) in p {
        for (m, &v) in out.iter_mut().zip(x) {
            *m.entry(v).or_insert(0.0) += q;
        }
    }
    out
}

/// Largest absolute gap between a pmf and the product of its marginals,
/// taken over the product of the marginal supports. Zero means the pmf
/// factorizes.
pub fn factorization_gap(p: &[(Vec<i64>, f64)]) -> f64 {
    let margs = marginals(p);
    let joint: HashMap<&Vec<i64>, f64> = p.iter().map(|(x, q)| (x, *q)).collect();
    let axes: Vec<Vec<(i64, f64)>> = margs
        .iter()
        .map(|m| m.iter().map(|(&k, &v)| (k, v)).collect())
        .collect();
    let mut gap: f64 = 0.0;
    let mut idx = vec![0usize; axes.len()];
    if axes.iter().any(|a| a.is_empty()) {
        return 0.0;
    }
    loop {
        let point: Vec<i64> = idx.iter().zip(&axes).map(|(&i, a)| a[i].0).collect();
        let prod: f64 = idx.iter().zip(&axes).map(|(&i, a)| a[i].1).product();
        let j = joint.get(&point).copied().unwrap_or(0.0);
        gap = gap.max((j - prod).abs());
        let mut k = 0;
        loop {
            if k == idx.len() {
                return gap;
            }
            idx[k] += 1;
            if idx[k] < axes[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Cross-entropy in bits per dimension of `p` under the factorized model
/// that fits the exact marginal of `y_1` and point masses at zero on the
/// padded coordinates.
pub fn flatten_bpd(f: &FlattenFlow, p: &[(Vec<i64>, f64)]) -> Result<f64> {
    let pushed = pushforward(f, p)?;
    if let Some((y, _)) = pushed
        .iter()
        .find(|(y, q)| *q > 0.0 && y[1..].iter().any(|&v| v != 0))
    {
        return Err(Error::Bijection(format!(
            "padded coordinates of {y:?} are not zero"
        )));
    }
    let first = &marginals(&pushed)[0];
    let bits: f64 = pushed
        .iter()
        .filter(|(_, q)| *q > 0.0)
        .fold(0.0, |acc, (y, q)| acc - q * first[&y[0]].log2());
    Ok(bits / f.dims() as f64)
}

/// Entropy of a pmf in bits.
pub fn entropy_bits(p: &[(Vec<i64>, f64)]) -> f64 {
    p.iter()
        .filter(|(_, q)| *q > 0.0)
        .fold(0.0, |acc, (_, q)| acc - q * q.log2())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two binary variables with `p(x1, x2)` from the classic rank-two
    /// example.
    fn example() -> Pmf {
        vec![
            (vec![0, 0], 0.1),
            (vec![1, 0], 0.2),
            (vec![0, 1], 0.3),
            (vec![1, 1], 0.4),
        ]
    }

    #[test]
    fn two_dims_step_by_step() {
        let f = build_flatten_flow(&[2, 2]).unwrap();
        assert_eq!(f.steps().len(), 2);
        let t = f.trace(&[1, 1]).unwrap();
        assert_eq!(t, vec![vec![1, 1], vec![3, 1], vec![3, 0]]);
    }

    #[test]
    fn two_dims_full_map() {
        let f = build_flatten_flow(&[2, 2]).unwrap();
        let got: Vec<Vec<i64>> = [[0, 0], [1, 0], [0, 1], [1, 1]]
            .iter()
            .map(|x| f.forward(x).unwrap())
            .collect();
        assert_eq!(got, vec![vec![0, 0], vec![1, 0], vec![2, 0], vec![3, 0]]);
        let r = verify_bijection(&f).unwrap();
        assert_eq!((r.points, r.image_max), (4, vec![3, 0]));
    }

    #[test]
    fn closed_form_and_fixed_point() {
        for ks in [vec![3, 5], vec![4, 4, 4], vec![2, 3, 4, 5], vec![7, 1, 2]] {
            let f = build_flatten_flow(&ks).unwrap();
            assert_eq!(f.steps().len(), 2 * (ks.len() - 1));
            assert_eq!(f.forward(&vec![0; ks.len()]).unwrap(), vec![0; ks.len()]);
            for x in f.support().unwrap() {
                let mut want = 0;
                let mut radix = 1;
                for (v, k) in x.iter().zip(&ks) {
                    want += radix * v;
                    radix *= k;
                }
                let y = f.forward(&x).unwrap();
                assert_eq!(y[0], want);
                assert!(y[1..].iter().all(|&v| v == 0));
            }
        }
    }

    #[test]
    fn cube_flattens_to_a_line() {
        let f = build_flatten_flow(&[4, 4, 4]).unwrap();
        let r = verify_bijection(&f).unwrap();
        assert_eq!(r.points, 64);
        assert_eq!(r.image_min, vec![0, 0, 0]);
        assert_eq!(r.image_max, vec![63, 0, 0]);
    }

    #[test]
    fn single_point_support() {
        let f = build_flatten_flow(&[1, 1]).unwrap();
        let r = verify_bijection(&f).unwrap();
        assert_eq!((r.points, r.image_max), (1, vec![0, 0]));
    }

    #[test]
    fn every_step_is_a_single_coordinate_translation() {
        let f = build_flatten_flow(&[3, 4, 5, 6]).unwrap();
        for s in f.steps() {
            assert_ne!(s.source, s.target);
            // Changing any coordinate other than the source leaves the
            // translation unchanged, and only the target moves.
            let base = vec![2, 3, 1, 4];
            let mut y = base.clone();
            s.forward(&mut y);
            for (i, (&a, &b)) in base.iter().zip(&y).enumerate() {
                if i != s.target {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn collisions_are_reported() {
        let points = vec![vec![0, 0], vec![1, 0]];
        let err =
            verify_bijection_map(&points, |_| Ok(vec![0, 0]), |y| Ok(y.to_vec())).unwrap_err();
        assert!(matches!(err, Error::Bijection(_)));
    }

    #[test]
    fn example_becomes_rank_one() {
        let f = build_flatten_flow(&[2, 2]).unwrap();
        let p = example();
        assert!(factorization_gap(&p) > 0.01);
        let pushed = pushforward(&f, &p).unwrap();
        let m = marginals(&pushed);
        let first: Vec<f64> = m[0].values().copied().collect();
        assert_eq!(first, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(m[1].len(), 1);
        assert_eq!(factorization_gap(&pushed), 0.0);
    }

    #[test]
    fn bpd_is_entropy_per_dimension() {
        let f = build_flatten_flow(&[2, 2]).unwrap();
        let p = example();
        let bpd = flatten_bpd(&f, &p).unwrap();
        // Independent oracle: entropy of {0.1, 0.2, 0.3, 0.4} written out.
        let h = -(0.1f64 * 0.1f64.log2()
            + 0.2 * 0.2f64.log2()
            + 0.3 * 0.3f64.log2()
            + 0.4 * 0.4f64.log2());
        assert!((bpd - h / 2.0).abs() < 1e-12);
        assert!((bpd - 0.92322).abs() < 5e-6);
        let uniform: Pmf = f
            .support()
            .unwrap()
            .into_iter()
            .map(|x| (x, 0.25))
            .collect();
        assert!((flatten_bpd(&f, &uniform).unwrap() - 1.0).abs() < 1e-12);
        let point: Pmf = vec![(vec![1, 0], 1.0)];
        assert_eq!(flatten_bpd(&f, &point).unwrap(), 0.0);
    }

    #[test]
    fn support_mismatch_is_domain_error() {
        let f = build_flatten_flow(&[2, 2]).unwrap();
        let p: Pmf = vec![(vec![2, 0], 1.0)];
        assert!(matches!(flatten_bpd(&f, &p), Err(Error::Domain(_))));
        assert!(matches!(build_flatten_flow(&[3]), Err(Error::Parameter(_))));
    }
}
