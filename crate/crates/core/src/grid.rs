//! Integer lattice tensors and the shape manipulations shared by every flow
//! layer. Layout is batch-height-width-channels; element `(b, h, w, c)` lives
//! at `((b * H + h) * W + w) * C + c`.
//!
//! All reshapes are expressed as gather index maps so the exact same
//! reindexing can be replayed on real-valued tape tensors.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// `(batch, height, width, channels)`.
pub type Shape4 = [usize; 4];

pub fn numel(shape: &Shape4) -> usize {
    shape.iter().product()
}

/// Rational split fraction, e.g. 3/4 of the channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub num: usize,
    pub den: usize,
}

impl Fraction {
    pub const HALF: Fraction = Fraction { num: 1, den: 2 };
    pub const THREE_QUARTERS: Fraction = Fraction { num: 3, den: 4 };

    pub fn new(num: usize, den: usize) -> Result<Self> {
        if den == 0 || num > den {
            return Err(Error::Parameter(format!("invalid fraction {num}/{den}")));
        }
        Ok(Fraction { num, den })
    }

    /// Number of leading channels taken by the first part.
    pub fn leading(&self, channels: usize) -> Result<usize> {
        if (channels * self.num) % self.den != 0 {
            return dim_err(format!(
                "{}/{} of {} channels is not an integer",
                self.num, self.den, channels
            ));
        }
        Ok(channels * self.num / self.den)
    }
}

/// Integer codes on the scaled lattice `Z / 2^bits`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridTensor {
    shape: Shape4,
    codes: Vec<i64>,
    bits: u32,
}

impl GridTensor {
    pub fn new(shape: Shape4, codes: Vec<i64>, bits: u32) -> Result<Self> {
        if codes.len() != numel(&shape) {
            return dim_err(format!(
                "{} codes for shape {:?} ({} elements)",
                codes.len(),
                shape,
                numel(&shape)
            ));
        }
        if bits == 0 {
            return Err(Error::Parameter("bits must be at least 1".into()));
        }
        Ok(GridTensor { shape, codes, bits })
    }

    pub fn zeros(shape: Shape4, bits: u32) -> Result<Self> {
        Self::new(shape, vec![0; numel(&shape)], bits)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn codes(&self) -> &[i64] {
        &self.codes
    }

    pub fn codes_mut(&mut self) -> &mut [i64] {
        &mut self.codes
    }

    pub fn into_codes(self) -> Vec<i64> {
        self.codes
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Width of one lattice bin, `2^-bits`.
    pub fn bin_width(&self) -> f64 {
        bin_width(self.bits)
    }

    /// Real values `code / 2^bits`. Exact for any code below 2^52.
    pub fn to_real(&self) -> Vec<f64> {
        let w = self.bin_width();
        self.codes.iter().map(|&c| c as f64 * w).collect()
    }

    pub fn get(&self, b: usize, h: usize, w: usize, c: usize) -> i64 {
        let [_, hh, ww, cc] = self.shape;
        self.codes[((b * hh + h) * ww + w) * cc + c]
    }

    /// Selects a contiguous range of samples along the batch axis.
    pub fn batch_slice(&self, start: usize, end: usize) -> Result<GridTensor> {
        if start > end || end > self.shape[0] {
            return dim_err(format!("batch range {start}..{end} of {}", self.shape[0]));
        }
        let per = numel(&self.shape) / self.shape[0].max(1);
        let mut shape = self.shape;
        shape[0] = end - start;
        GridTensor::new(
            shape,
            self.codes[start * per..end * per].to_vec(),
            self.bits,
        )
    }

    /// Stacks samples along the batch axis.
    pub fn stack(items: &[GridTensor]) -> Result<GridTensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack zero tensors".into()))?;
        let mut shape = first.shape;
        let mut codes = Vec::new();
        shape[0] = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] || t.bits != first.bits {
                return dim_err("stacked tensors differ in shape or bits");
            }
            shape[0] += t.shape[0];
            codes.extend_from_slice(&t.codes);
        }
        GridTensor::new(shape, codes, first.bits)
    }

    fn gathered(&self, shape: Shape4, index: &[usize]) -> GridTensor {
        GridTensor {
            shape,
            codes: index.iter().map(|&i| self.codes[i]).collect(),
            bits: self.bits,
        }
    }

    pub fn space_to_depth(&self, factor: usize) -> Result<GridTensor> {
        let (shape, index) = space_to_depth_index(self.shape, factor)?;
        Ok(self.gathered(shape, &index))
    }

    pub fn depth_to_space(&self, factor: usize) -> Result<GridTensor> {
        let (shape, index) = depth_to_space_index(self.shape, factor)?;
        Ok(self.gathered(shape, &index))
    }

    pub fn split_channels(&self, fraction: Fraction) -> Result<(GridTensor, GridTensor)> {
        let lead = fraction.leading(self.channels())?;
        self.split_at_channel(lead)
    }

    pub fn split_at_channel(&self, lead: usize) -> Result<(GridTensor, GridTensor)> {
        let c = self.channels();
        if lead > c {
            return dim_err(format!("split at {lead} of {c} channels"));
        }
        let (sa, ia) = channel_slice_index(self.shape, 0, lead)?;
        let (sb, ib) = channel_slice_index(self.shape, lead, c)?;
        Ok((self.gathered(sa, &ia), self.gathered(sb, &ib)))
    }

    pub fn concat_channels(a: &GridTensor, b: &GridTensor) -> Result<GridTensor> {
        if a.shape[..3] != b.shape[..3] || a.bits != b.bits {
            return dim_err(format!("cannot concat {:?} with {:?}", a.shape, b.shape));
        }
        let (ca, cb) = (a.channels(), b.channels());
        let mut codes = Vec::with_capacity(a.len() + b.len());
        let rows = a.shape[0] * a.shape[1] * a.shape[2];
        for r in 0..rows {
            codes.extend_from_slice(&a.codes[r * ca..(r + 1) * ca]);
            codes.extend_from_slice(&b.codes[r * cb..(r + 1) * cb]);
        }
        let mut shape = a.shape;
        shape[3] = ca + cb;
        GridTensor::new(shape, codes, a.bits)
    }

    pub fn apply_permutation(&self, p: &ChannelPermutation, inverse: bool) -> Result<GridTensor> {
        let index = permutation_index(self.shape, p, inverse)?;
        Ok(self.gathered(self.shape, &index))
    }
}

pub fn bin_width(bits: u32) -> f64 {
    (-(bits as f64)).exp2()
}

/// Gather map for space-to-depth. Within each `f x f` block elements are
/// scanned row-major, and for every block position all input channels are
/// kept together: output channel = `(dy * f + dx) * C + c`.
pub fn space_to_depth_index(shape: Shape4, factor: usize) -> Result<(Shape4, Vec<usize>)> {
    let [b, h, w, c] = shape;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return dim_err(format!(
            "space-to-depth factor {factor} does not divide {h}x{w}"
        ));
    }
    let (oh, ow, oc) = (h / factor, w / factor, c * factor * factor);
    let mut index = Vec::with_capacity(numel(&shape));
    for bi in 0..b {
        for y in 0..oh {
            for x in 0..ow {
                for dy in 0..factor {
                    for dx in 0..factor {
                        let (sy, sx) = (y * factor + dy, x * factor + dx);
                        let base = ((bi * h + sy) * w + sx) * c;
                        index.extend(base..base + c);
                    }
                }
            }
        }
    }
    Ok(([b, oh, ow, oc], index))
}

/// Gather map inverse to [`space_to_depth_index`].
pub fn depth_to_space_index(shape: Shape4, factor: usize) -> Result<(Shape4, Vec<usize>)> {
    let [b, h, w, c] = shape;
    if factor == 0 || c % (factor * factor) != 0 {
        return dim_err(format!(
            "depth-to-space factor {factor} does not divide {c} channels"
        ));
    }
    let out_shape = [b, h * factor, w * factor, c / (factor * factor)];
    let (_, fwd) = space_to_depth_index(out_shape, factor)?;
    let mut index = vec![0; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        index[src] = i;
    }
    Ok((out_shape, index))
}

/// Gather map selecting channels `start..end`.
pub fn channel_slice_index(
    shape: Shape4,
    start: usize,
    end: usize,
) -> Result<(Shape4, Vec<usize>)> {
    let [b, h, w, c] = shape;
    if start > end || end > c {
        return dim_err(format!("channel range {start}..{end} of {c}"));
    }
    let rows = b * h * w;
    let mut index = Vec::with_capacity(rows * (end - start));
    for r in 0..rows {
        index.extend(r * c + start..r * c + end);
    }
    Ok(([b, h, w, end - start], index))
}

/// Gather map for a channel permutation: output channel `i` takes input
/// channel `perm[i]` (or `inv[i]` when `inverse`).
pub fn permutation_index(
    shape: Shape4,
    p: &ChannelPermutation,
    inverse: bool,
) -> Result<Vec<usize>> {
    let c = shape[3];
    if p.len() != c {
        return dim_err(format!(
            "permutation of length {} applied to {} channels",
            p.len(),
            c
        ));
    }
    let map = if inverse { &p.inv } else { &p.perm };
    let rows = numel(&shape) / c.max(1);
    let mut index = Vec::with_capacity(numel(&shape));
    for r in 0..rows {
        index.extend(map.iter().map(|&m| r * c + m));
    }
    Ok(index)
}

/// A bijection on channel indices with its precomputed inverse.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PermutationRepr", into = "PermutationRepr")]
pub struct ChannelPermutation {
    perm: Vec<usize>,
    inv: Vec<usize>,
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct PermutationRepr {
    perm: Vec<usize>,
    seed: Option<u64>,
}

impl TryFrom<PermutationRepr> for ChannelPermutation {
    type Error = Error;

    fn try_from(r: PermutationRepr) -> Result<Self> {
        let mut p = ChannelPermutation::from_vec(r.perm)?;
        p.seed = r.seed;
        Ok(p)
    }
}

impl From<ChannelPermutation> for PermutationRepr {
    fn from(p: ChannelPermutation) -> Self {
        PermutationRepr {
            perm: p.perm,
            seed: p.seed,
        }
    }
}

impl ChannelPermutation {
    pub fn from_vec(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut inv = vec![usize::MAX; n];
        for (i, &p) in perm.iter().enumerate() {
            if p >= n || inv[p] != usize::MAX {
                return Err(Error::Parameter(format!("{perm:?} is not a permutation")));
            }
            inv[p] = i;
        }
        Ok(ChannelPermutation {
            perm,
            inv,
            seed: None,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_vec((0..n).collect()).expect("identity is a permutation")
    }

    pub fn reverse(n: usize) -> Self {
        Self::from_vec((0..n).rev().collect()).expect("reversal is a permutation")
    }

    /// Fisher-Yates shuffle driven by a ChaCha8 stream seeded with `seed`.
    pub fn from_seed(n: usize, seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        perm.shuffle(&mut rng);
        let mut p = Self::from_vec(perm).expect("shuffle is a permutation");
        p.seed = Some(seed);
        p
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv(&self) -> &[usize] {
        &self.inv
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
}
