//! Additive coupling with an optional rezero scale:
//! `y_a = x_a`, `y_b = x_b + round(alpha * t(x_a))`.

use std::rc::Rc;

use crate::autodiff::rounding::{round_half_up, RoundingConfig};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{channel_slice_index, Fraction, GridTensor, Shape4};
use crate::nn::{BackboneSpec, Network, ParamGroup, ParamStore};

pub(crate) fn gather(tape: &mut Tape, x: Var, shape: Shape4, index: Vec<usize>) -> Result<Var> {
    tape.gather(x, shape.to_vec(), Rc::new(index))
}

pub(crate) fn slice_channels(tape: &mut Tape, x: Var, start: usize, end: usize) -> Result<Var> {
    let shape = tape.value(x).dims4()?;
    let (s, idx) = channel_slice_index(shape, start, end)?;
    gather(tape, x, s, idx)
}

/// Places integer codes on the tape as real lattice values.
pub(crate) fn codes_leaf(tape: &mut Tape, x: &GridTensor) -> Var {
    let bin = x.bin_width();
    let data = x.codes().iter().map(|&c| c as f64 * bin).collect();
    tape.leaf(Tensor::new(x.shape().to_vec(), data).expect("shape matches codes"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdditiveCoupling {
    pub net: Network,
    /// Rezero scale; `None` means the translation is used unscaled.
    pub alpha: Option<usize>,
    /// Conditioning channels `0..lead`; channels `lead..` are translated.
    pub lead: usize,
    pub channels: usize,
    pub bits: u32,
}

impl AdditiveCoupling {
    pub fn build(
        spec: &BackboneSpec,
        channels: usize,
        split: Fraction,
        rezero: bool,
        bits: u32,
        store: &mut ParamStore,
        prefix: &str,
    ) -> Result<Self> {
        let lead = split.leading(channels)?;
        if lead == 0 || lead >= channels {
            return Err(Error::Dimension(format!(
                "coupling split {}/{} leaves an empty part of {channels} channels",
                split.num, split.den
            )));
        }
        let net = Network::build(
            spec,
            lead,
            channels - lead,
            store,
            &format!("{prefix}.net"),
            ParamGroup::Bijector,
        )?;
        let alpha = rezero.then(|| {
            store.add(
                format!("{prefix}.alpha"),
                Tensor::scalar(0.0),
                ParamGroup::Bijector,
            )
        });
        Ok(AdditiveCoupling {
            net,
            alpha,
            lead,
            channels,
            bits,
        })
    }

    /// Pre-quantized translation `alpha * t(x_a)` in real units.
    fn translation(&self, tape: &mut Tape, vars: &[Var], xa: Var) -> Result<Var> {
        let t = self.net.forward(tape, vars, xa)?;
        match self.alpha {
            Some(a) => tape.mul_scalar(t, vars[a]),
            None => Ok(t),
        }
    }

    /// Differentiable forward on real lattice values.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        rounding: &RoundingConfig,
    ) -> Result<Var> {
        let xa = slice_channels(tape, x, 0, self.lead)?;
        let xb = slice_channels(tape, x, self.lead, self.channels)?;
        let t = self.translation(tape, vars, xa)?;
        let r = tape.round_to_grid(t, self.bits, rounding);
        let yb = tape.add(xb, r)?;
        tape.concat(xa, yb)
    }

    /// Integer translation for the conditioning half `xa`.
    pub(crate) fn shift_codes(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        xa: &GridTensor,
    ) -> Result<Vec<i64>> {
        let leaf = codes_leaf(tape, xa);
        let t = self.translation(tape, vars, leaf)?;
        let scale = (self.bits as f64).exp2();
        Ok(tape
            .value(t)
            .data()
            .iter()
            .map(|&v| round_half_up(v * scale) as i64)
            .collect())
    }

    fn check(&self, x: &GridTensor) -> Result<()> {
        if x.channels() != self.channels || x.bits() != self.bits {
            return Err(Error::Dimension(format!(
                "coupling over {} channels at {} bits got {:?} at {} bits",
                self.channels,
                self.bits,
                x.shape(),
                x.bits()
            )));
        }
        Ok(())
    }

    fn apply(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: &GridTensor,
        sign: i64,
    ) -> Result<GridTensor> {
        self.check(x)?;
        let (xa, mut xb) = x.split_at_channel(self.lead)?;
        let shift = self.shift_codes(tape, vars, &xa)?;
        for (c, s) in xb.codes_mut().iter_mut().zip(shift) {
            *c += sign * s;
        }
        GridTensor::concat_channels(&xa, &xb)
    }

    pub(crate) fn forward_codes_on(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: &GridTensor,
    ) -> Result<GridTensor> {
        self.apply(tape, vars, x, 1)
    }

    pub(crate) fn inverse_codes_on(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        y: &GridTensor,
    ) -> Result<GridTensor> {
        self.apply(tape, vars, y, -1)
    }

    pub fn forward_codes(&self, store: &ParamStore, x: &GridTensor) -> Result<GridTensor> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        self.forward_codes_on(&mut tape, &vars, x)
    }

    pub fn inverse_codes(&self, store: &ParamStore, y: &GridTensor) -> Result<GridTensor> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        self.inverse_codes_on(&mut tape, &vars, y)
    }
}
