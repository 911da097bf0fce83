//! Multi-level integer flow with factor-out priors.
//!
//! Level `l` applies space-to-depth followed by `K` steps of
//! (permutation, additive coupling, optional inverse permutation). All but
//! the last level split their output into `[z, y]` (leading half first);
//! `z` is modelled by a discretized logistic conditioned on `y`, and `y`
//! continues to the next level. The last level's output is modelled by a
//! per-position mixture of discretized logistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::coupling::{codes_leaf, gather, slice_channels, AdditiveCoupling};
use crate::autodiff::rounding::{ForwardRounding, RoundingConfig};
use crate::autodiff::{Tape, Tensor, Var};
use crate::dists::kernels::{self, LatticeSpec};
use crate::error::{Error, Result};
use crate::grid::{
    permutation_index, space_to_depth_index, ChannelPermutation, Fraction, GridTensor, Shape4,
};
use crate::nn::{BackboneSpec, BlockVariant, Network, ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationKind {
    /// Seeded shuffle per step.
    Random,
    /// Channel reversal (alternating conditioning for two-channel models).
    Reverse,
    Identity,
}

/// Whether the model is a discrete flow with lattice priors or its
/// dequantized continuous counterpart with logistic densities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Discrete,
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub bits: u32,
    pub levels: usize,
    /// Coupling steps per level.
    pub steps: usize,
    /// Space-to-depth factor applied at the start of every level.
    pub squeeze: usize,
    pub coupling_split: Fraction,
    pub backbone: BackboneSpec,
    pub prior_backbone: BackboneSpec,
    pub permutation: PermutationKind,
    pub invert_perms: bool,
    pub rezero: bool,
    pub mixture_components: usize,
    pub mode: Mode,
    pub rounding: RoundingConfig,
    pub seed: u64,
}

impl ModelConfig {
    /// Two-dimensional toy model: one level, two couplings on a `1x1x2`
    /// image with channel reversal between them and a five-component
    /// mixture prior.
    pub fn toy(bits: u32) -> Self {
        ModelConfig {
            height: 1,
            width: 1,
            channels: 2,
            bits,
            levels: 1,
            steps: 2,
            squeeze: 1,
            coupling_split: Fraction::HALF,
            backbone: BackboneSpec::DenseNet {
                variant: BlockVariant::Toy,
                depth: 4,
                channels: 32,
            },
            prior_backbone: BackboneSpec::DenseNet {
                variant: BlockVariant::Toy,
                depth: 4,
                channels: 32,
            },
            permutation: PermutationKind::Reverse,
            invert_perms: false,
            rezero: true,
            mixture_components: 5,
            mode: Mode::Discrete,
            rounding: RoundingConfig::STRAIGHT_THROUGH,
            seed: 0,
        }
    }

    /// Small multi-level model for `8x8x3` images with every IDF++ change
    /// switched on.
    pub fn tiny_idfpp() -> Self {
        let backbone = BackboneSpec::DenseNet {
            variant: BlockVariant::Idfpp,
            depth: 2,
            channels: 24,
        };
        ModelConfig {
            height: 8,
            width: 8,
            channels: 3,
            bits: 8,
            levels: 2,
            steps: 2,
            squeeze: 2,
            coupling_split: Fraction::THREE_QUARTERS,
            backbone,
            prior_backbone: backbone,
            permutation: PermutationKind::Random,
            invert_perms: true,
            rezero: true,
            mixture_components: 5,
            mode: Mode::Discrete,
            rounding: RoundingConfig::STRAIGHT_THROUGH,
            seed: 0,
        }
    }

    /// [`ModelConfig::tiny_idfpp`] with every IDF++ change switched off.
    pub fn tiny_idf() -> Self {
        let backbone = BackboneSpec::DenseNet {
            variant: BlockVariant::Idf,
            depth: 2,
            channels: 24,
        };
        ModelConfig {
            backbone,
            prior_backbone: backbone,
            invert_perms: false,
            rezero: false,
            ..Self::tiny_idfpp()
        }
    }

    pub fn dims(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return cfg("image shape must be nonzero".into());
        }
        if !(1..=16).contains(&self.bits) {
            return cfg(format!("bits must be in 1..=16, got {}", self.bits));
        }
        if self.levels == 0 {
            return cfg("at least one level is required".into());
        }
        if self.squeeze == 0 {
            return cfg("squeeze factor must be positive".into());
        }
        if self.mixture_components == 0 {
            return cfg("mixture needs at least one component".into());
        }
        self.rounding
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.mode == Mode::Discrete && self.rounding.forward == ForwardRounding::Identity {
            return cfg("discrete mode needs a rounding forward function".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowStep {
    pub perm: ChannelPermutation,
    pub coupling: AdditiveCoupling,
}

/// `p(z | y)`: `mu = gamma * nu`, `log s = delta * log sigma` with
/// `[nu, log sigma] = net(y)`; without rezero the net output is used as is.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalPrior {
    pub net: Network,
    pub gamma: Option<usize>,
    pub delta: Option<usize>,
    pub z_channels: usize,
}

/// Unconditional per-position mixture, parameters shaped
/// `(positions, components)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePrior {
    pub mu: usize,
    pub log_s: usize,
    pub logits: usize,
    pub positions: usize,
    pub components: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowLevel {
    /// `(H, W, C)` after space-to-depth.
    pub shape: [usize; 3],
    pub steps: Vec<FlowStep>,
    /// Present on every level except the last.
    pub prior: Option<ConditionalPrior>,
}

impl FlowLevel {
    /// Channels factored out at the end of this level (all for the last).
    pub fn z_channels(&self) -> usize {
        self.prior.as_ref().map_or(self.shape[2], |p| p.z_channels)
    }
}

/// Prior parameters for one block of latents, element-aligned with it.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorParams {
    Logistic {
        mu: Vec<f64>,
        log_s: Vec<f64>,
    },
    /// Shared across the batch: element `i` uses row `i % positions`.
    Mixture {
        mu: Vec<f64>,
        log_s: Vec<f64>,
        logits: Vec<f64>,
        components: usize,
    },
}

/// One factor of the latent distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBlock {
    pub z: GridTensor,
    pub prior: PriorParams,
}

/// Tape nodes produced by a differentiable forward pass.
pub struct TapeForward {
    /// Elementwise log-likelihoods (nats), batch-major, one node per level.
    pub loglik: Vec<Var>,
    /// `z^(1), ..., z^(L)`.
    pub latents: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    config: ModelConfig,
    store: ParamStore,
    levels: Vec<FlowLevel>,
    top: MixturePrior,
}

const PERM_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl FlowModel {
    /// Builds and initializes a model from `config`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut model = Self::build(config, None)?;
        model.initialize();
        Ok(model)
    }

    /// Builds the structure with zeroed parameters. `perms` overrides the
    /// generated permutations (used when loading).
    pub(crate) fn build(
        config: ModelConfig,
        perms: Option<Vec<Vec<ChannelPermutation>>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut perm_rng = ChaCha8Rng::seed_from_u64(config.seed ^ PERM_SEED_SALT);
        let (mut h, mut w, mut c) = (config.height, config.width, config.channels);
        let f = config.squeeze;
        let mut levels = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            if h % f != 0 || w % f != 0 {
                return Err(Error::Dimension(format!(
                    "level {l}: squeeze factor {f} does not divide {h}x{w}"
                )));
            }
            h /= f;
            w /= f;
            c *= f * f;
            let mut steps = Vec::with_capacity(config.steps);
            for k in 0..config.steps {
                let perm = match &perms {
                    Some(p) => p
                        .get(l)
                        .and_then(|s| s.get(k))
                        .cloned()
                        .ok_or_else(|| Error::Format(format!("missing permutation {l}.{k}")))?,
                    None => match config.permutation {
                        PermutationKind::Random => ChannelPermutation::from_seed(c, perm_rng.gen()),
                        PermutationKind::Reverse => ChannelPermutation::reverse(c),
                        PermutationKind::Identity => ChannelPermutation::identity(c),
                    },
                };
                if perm.len() != c {
                    return Err(Error::Dimension(format!(
                        "permutation {l}.{k} has {} channels, level has {c}",
                        perm.len()
                    )));
                }
                let coupling = AdditiveCoupling::build(
                    &config.backbone,
                    c,
                    config.coupling_split,
                    config.rezero,
                    config.bits,
                    &mut store,
                    &format!("level{l}.step{k}"),
                )?;
                steps.push(FlowStep { perm, coupling });
            }
            let prior = if l + 1 < config.levels {
                let zc = Fraction::HALF.leading(c)?;
                let yc = c - zc;
                let prefix = format!("level{l}.prior");
                let net = Network::build(
                    &config.prior_backbone,
                    yc,
                    2 * zc,
                    &mut store,
                    &format!("{prefix}.net"),
                    ParamGroup::Prior,
                )?;
                let (gamma, delta) = if config.rezero {
                    (
                        Some(store.add(
                            format!("{prefix}.gamma"),
                            Tensor::scalar(0.0),
                            ParamGroup::Prior,
                        )),
                        Some(store.add(
                            format!("{prefix}.delta"),
                            Tensor::scalar(0.0),
                            ParamGroup::Prior,
                        )),
                    )
                } else {
                    (None, None)
                };
                Some(ConditionalPrior {
                    net,
                    gamma,
                    delta,
                    z_channels: zc,
                })
            } else {
                None
            };
            levels.push(FlowLevel {
                shape: [h, w, c],
                steps,
                prior,
            });
            if let Some(p) = &levels.last().unwrap().prior {
                c -= p.z_channels;
            }
        }
        let positions = h * w * c;
        let k = config.mixture_components;
        let top = MixturePrior {
            mu: store.add("top.mu", Tensor::zeros(&[positions, k]), ParamGroup::Prior),
            log_s: store.add(
                "top.log_s",
                Tensor::zeros(&[positions, k]),
                ParamGroup::Prior,
            ),
            logits: store.add(
                "top.logits",
                Tensor::zeros(&[positions, k]),
                ParamGroup::Prior,
            ),
            positions,
            components: k,
        };
        Ok(FlowModel {
            config,
            store,
            levels,
            top,
        })
    }

    /// Seeded initialization of every parameter. Rezero scales start at 0;
    /// mixture components are spread evenly over the data range.
    pub fn initialize(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        for level in &self.levels {
            for step in &level.steps {
                step.coupling.net.init_with(&mut self.store, &mut rng);
                if let Some(a) = step.coupling.alpha {
                    self.store.get_mut(a).value.data_mut()[0] = 0.0;
                }
            }
            if let Some(p) = &level.prior {
                p.net.init_with(&mut self.store, &mut rng);
                for i in p.gamma.iter().chain(p.delta.iter()) {
                    self.store.get_mut(*i).value.data_mut()[0] = 0.0;
                }
            }
        }
        let k = self.top.components;
        let mu = self.store.get_mut(self.top.mu).value.data_mut();
        for (i, v) in mu.iter_mut().enumerate() {
            *v = ((i % k) as f64 + 0.5) / k as f64;
        }
        let ls = (0.5 / k as f64).ln();
        self.store.get_mut(self.top.log_s).value.data_mut().fill(ls);
        self.store
            .get_mut(self.top.logits)
            .value
            .data_mut()
            .fill(0.0);
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn levels(&self) -> &[FlowLevel] {
        &self.levels
    }

    pub fn top_prior(&self) -> &MixturePrior {
        &self.top
    }

    pub fn bits(&self) -> u32 {
        self.config.bits
    }

    /// Data dimensions per image.
    pub fn dims(&self) -> usize {
        self.config.dims()
    }

    /// Latent alphabet of the lattice priors.
    pub fn lattice(&self) -> LatticeSpec {
        LatticeSpec::latent(self.config.bits)
    }

    /// Rounding used when evaluating: hard rounding for discrete models.
    pub fn eval_rounding(&self) -> RoundingConfig {
        match self.config.mode {
            Mode::Discrete => RoundingConfig::STRAIGHT_THROUGH,
            Mode::Continuous => self.config.rounding,
        }
    }

    pub fn check_input(&self, x: &GridTensor) -> Result<()> {
        let c = &self.config;
        let [_, h, w, ch] = x.shape();
        if [h, w, ch] != [c.height, c.width, c.channels] {
            return Err(Error::Dimension(format!(
                "model expects {}x{}x{} images, got {h}x{w}x{ch}",
                c.height, c.width, c.channels
            )));
        }
        if x.bits() != c.bits {
            return Err(Error::ModelMismatch(format!(
                "model is {}-bit, data is {}-bit",
                c.bits,
                x.bits()
            )));
        }
        Ok(())
    }

    // ----- differentiable path -----

    fn squeeze_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.config.squeeze == 1 {
            return Ok(x);
        }
        let shape = tape.value(x).dims4()?;
        let (s, idx) = space_to_depth_index(shape, self.config.squeeze)?;
        gather(tape, x, s, idx)
    }

    fn permute_tape(tape: &mut Tape, x: Var, p: &ChannelPermutation, inverse: bool) -> Result<Var> {
        if p.perm().iter().enumerate().all(|(i, &v)| i == v) {
            return Ok(x);
        }
        let shape = tape.value(x).dims4()?;
        let idx = permutation_index(shape, p, inverse)?;
        gather(tape, x, shape, idx)
    }

    /// Runs level `l`'s bijection on the tape (before the split).
    fn level_tape(
        &self,
        l: usize,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        rounding: &RoundingConfig,
    ) -> Result<Var> {
        let level = &self.levels[l];
        let mut h = self.squeeze_tape(tape, x)?;
        for step in &level.steps {
            h = Self::permute_tape(tape, h, &step.perm, false)?;
            h = step.coupling.forward_tape(tape, vars, h, rounding)?;
            if self.config.invert_perms {
                h = Self::permute_tape(tape, h, &step.perm, true)?;
            }
        }
        Ok(h)
    }

    fn conditional_tape(
        &self,
        p: &ConditionalPrior,
        tape: &mut Tape,
        vars: &[Var],
        y: Var,
    ) -> Result<(Var, Var)> {
        let out = p.net.forward(tape, vars, y)?;
        let nu = slice_channels(tape, out, 0, p.z_channels)?;
        let ls = slice_channels(tape, out, p.z_channels, 2 * p.z_channels)?;
        let mu = match p.gamma {
            Some(g) => tape.mul_scalar(nu, vars[g])?,
            None => nu,
        };
        let ls = match p.delta {
            Some(d) => tape.mul_scalar(ls, vars[d])?,
            None => ls,
        };
        Ok((mu, ls))
    }

    /// Differentiable forward from real lattice values (or dequantized
    /// values in continuous mode) to elementwise log-likelihoods.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        rounding: &RoundingConfig,
    ) -> Result<TapeForward> {
        let spec = self.lattice();
        let discrete = self.config.mode == Mode::Discrete;
        let mut loglik = Vec::with_capacity(self.levels.len());
        let mut latents = Vec::with_capacity(self.levels.len());
        let mut cur = x;
        for (l, level) in self.levels.iter().enumerate() {
            let out = self.level_tape(l, tape, vars, cur, rounding)?;
            match &level.prior {
                Some(p) => {
                    let c = level.shape[2];
                    let z = slice_channels(tape, out, 0, p.z_channels)?;
                    let y = slice_channels(tape, out, p.z_channels, c)?;
                    let (mu, ls) = self.conditional_tape(p, tape, vars, y)?;
                    let lp = if discrete {
                        tape.dl_log_pmf(z, mu, ls, &spec)?
                    } else {
                        tape.logistic_log_pdf(z, mu, ls)?
                    };
                    loglik.push(lp);
                    latents.push(z);
                    cur = y;
                }
                None => {
                    let t = &self.top;
                    let (mu, ls, lw) = (vars[t.mu], vars[t.log_s], vars[t.logits]);
                    let lp = if discrete {
                        tape.mixture_log_lik(out, mu, ls, lw, move |a, b, c| {
                            kernels::dl_log_pmf(a, b, c, &spec)
                        })?
                    } else {
                        tape.mixture_log_lik(out, mu, ls, lw, kernels::logistic_log_pdf)?
                    };
                    loglik.push(lp);
                    latents.push(out);
                }
            }
        }
        Ok(TapeForward { loglik, latents })
    }

    /// Mean bits per dimension of the batch as a scalar tape node. In
    /// continuous mode the lattice offset `bits` is included so values are
    /// comparable with discrete models.
    pub fn bpd_loss(&self, tape: &mut Tape, fwd: &TapeForward, batch: usize) -> Result<Var> {
        let mut total: Option<Var> = None;
        for &lp in &fwd.loglik {
            let s = tape.sum(lp);
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        let total = total.ok_or_else(|| Error::Usage("model has no levels".into()))?;
        let denom = (batch * self.dims()) as f64 * std::f64::consts::LN_2;
        let loss = tape.scale(total, -1.0 / denom);
        if self.config.mode == Mode::Continuous {
            let offset = tape.leaf(Tensor::scalar(self.config.bits as f64));
            tape.add(loss, offset)
        } else {
            Ok(loss)
        }
    }

    /// Per-item bits per dimension read off a finished forward pass.
    pub fn bpd_items(&self, tape: &Tape, fwd: &TapeForward, batch: usize) -> Vec<f64> {
        let mut nats = vec![0.0; batch];
        for &lp in &fwd.loglik {
            let v = tape.value(lp).data();
            let per = v.len() / batch;
            for (b, n) in nats.iter_mut().enumerate() {
                *n += v[b * per..(b + 1) * per].iter().sum::<f64>();
            }
        }
        let offset = if self.config.mode == Mode::Continuous {
            self.config.bits as f64
        } else {
            0.0
        };
        let d = self.dims() as f64;
        nats.into_iter()
            .map(|n| -n / (d * std::f64::consts::LN_2) + offset)
            .collect()
    }

    /// Real-valued model input for `x`: lattice values, plus uniform
    /// dequantization noise within each bin in continuous mode.
    pub fn input_tensor(&self, x: &GridTensor, rng: &mut impl Rng) -> Tensor {
        let bin = x.bin_width();
        let data = match self.config.mode {
            Mode::Discrete => x.codes().iter().map(|&c| c as f64 * bin).collect(),
            Mode::Continuous => x
                .codes()
                .iter()
                .map(|&c| (c as f64 + rng.gen::<f64>()) * bin)
                .collect(),
        };
        Tensor::new(x.shape().to_vec(), data).expect("shape matches codes")
    }

    /// Per-image negative log-likelihood in bits per dimension, evaluated
    /// with [`FlowModel::eval_rounding`]. `noise_seed` drives dequantization
    /// in continuous mode.
    pub fn nll_bpd_items(&self, x: &GridTensor, noise_seed: u64) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut tape = Tape::with_seed(noise_seed);
        let vars = self.store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let xv = tape.leaf(self.input_tensor(x, &mut rng));
        let fwd = self.forward_tape(&mut tape, &vars, xv, &self.eval_rounding())?;
        Ok(self.bpd_items(&tape, &fwd, x.batch()))
    }

    /// Mean of [`FlowModel::nll_bpd_items`].
    pub fn nll_bpd(&self, x: &GridTensor) -> Result<f64> {
        let items = self.nll_bpd_items(x, 0)?;
        Ok(items.iter().sum::<f64>() / items.len().max(1) as f64)
    }

    // ----- integer path -----

    fn level_forward_codes(
        &self,
        l: usize,
        tape: &mut Tape,
        vars: &[Var],
        x: &GridTensor,
    ) -> Result<GridTensor> {
        let mut h = x.space_to_depth(self.config.squeeze)?;
        for step in &self.levels[l].steps {
            h = h.apply_permutation(&step.perm, false)?;
            h = step.coupling.forward_codes_on(tape, vars, &h)?;
            if self.config.invert_perms {
                h = h.apply_permutation(&step.perm, true)?;
            }
        }
        Ok(h)
    }

    fn level_inverse_codes(
        &self,
        l: usize,
        tape: &mut Tape,
        vars: &[Var],
        y: &GridTensor,
    ) -> Result<GridTensor> {
        let mut h = y.clone();
        for step in self.levels[l].steps.iter().rev() {
            if self.config.invert_perms {
                h = h.apply_permutation(&step.perm, false)?;
            }
            h = step.coupling.inverse_codes_on(tape, vars, &h)?;
            h = h.apply_permutation(&step.perm, true)?;
        }
        h.depth_to_space(self.config.squeeze)
    }

    /// Integer latents `[z^(1), ..., z^(L)]` of `x`.
    pub fn model_forward(&self, x: &GridTensor) -> Result<Vec<GridTensor>> {
        Ok(self.encode_view(x)?.into_iter().map(|b| b.z).collect())
    }

    /// Exact inverse of [`FlowModel::model_forward`].
    pub fn model_inverse(&self, latents: &[GridTensor]) -> Result<GridTensor> {
        if latents.len() != self.levels.len() {
            return Err(Error::Dimension(format!(
                "{} latent blocks for {} levels",
                latents.len(),
                self.levels.len()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let last = self.levels.len() - 1;
        let mut y = self.level_inverse_codes(last, &mut tape, &vars, &latents[last])?;
        for l in (0..last).rev() {
            let out = GridTensor::concat_channels(&latents[l], &y)?;
            y = self.level_inverse_codes(l, &mut tape, &vars, &out)?;
        }
        Ok(y)
    }

    /// Latents together with the prior parameters that model them.
    pub fn encode_view(&self, x: &GridTensor) -> Result<Vec<LatentBlock>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let mut blocks = Vec::with_capacity(self.levels.len());
        let mut cur = x.clone();
        for (l, level) in self.levels.iter().enumerate() {
            let out = self.level_forward_codes(l, &mut tape, &vars, &cur)?;
            match &level.prior {
                Some(p) => {
                    let (z, y) = out.split_at_channel(p.z_channels)?;
                    let prior = self.conditional_on(l, &mut tape, &vars, &y)?;
                    blocks.push(LatentBlock { z, prior });
                    cur = y;
                }
                None => blocks.push(LatentBlock {
                    z: out,
                    prior: self.top_params(),
                }),
            }
        }
        Ok(blocks)
    }

    fn conditional_on(
        &self,
        l: usize,
        tape: &mut Tape,
        vars: &[Var],
        y: &GridTensor,
    ) -> Result<PriorParams> {
        let p = self.levels[l]
            .prior
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("level {l} has no conditional prior")))?;
        let yv = codes_leaf(tape, y);
        let (mu, ls) = self.conditional_tape(p, tape, vars, yv)?;
        Ok(PriorParams::Logistic {
            mu: tape.value(mu).data().to_vec(),
            log_s: tape.value(ls).data().to_vec(),
        })
    }

    /// Parameters of `p(z^(l) | y^(l))` for a given `y^(l)`.
    pub fn conditional_params(&self, l: usize, y: &GridTensor) -> Result<PriorParams> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        self.conditional_on(l, &mut tape, &vars, y)
    }

    /// Parameters of the unconditional top-level mixture.
    pub fn top_params(&self) -> PriorParams {
        PriorParams::Mixture {
            mu: self.store.get(self.top.mu).value.data().to_vec(),
            log_s: self.store.get(self.top.log_s).value.data().to_vec(),
            logits: self.store.get(self.top.logits).value.data().to_vec(),
            components: self.top.components,
        }
    }

    /// Shape `(B, H, W, C)` of latent block `l` for a batch of `batch`.
    pub fn latent_shape(&self, l: usize, batch: usize) -> Shape4 {
        let level = &self.levels[l];
        [batch, level.shape[0], level.shape[1], level.z_channels()]
    }

    /// Inverts level `l` given its factored-out `z` and continuing `y`
    /// (`y` is ignored for the last level), returning the level input.
    pub fn level_inverse(
        &self,
        l: usize,
        z: &GridTensor,
        y: Option<&GridTensor>,
    ) -> Result<GridTensor> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let out = match y {
            Some(y) if self.levels[l].prior.is_some() => GridTensor::concat_channels(z, y)?,
            _ => z.clone(),
        };
        self.level_inverse_codes(l, &mut tape, &vars, &out)
    }
}
