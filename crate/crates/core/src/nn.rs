//! Convolutional building blocks for coupling translations and prior
//! conditioners.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Coupling-layer parameters (translation nets and rezero scales).
    Bijector,
    /// Prior parameters (mixture tables, conditioners, gamma/delta).
    Prior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

/// Flat, ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            group,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Places every parameter on the tape as a leaf, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }

    /// Indices of parameters in `group`, or all of them.
    pub fn indices(&self, group: Option<ParamGroup>) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| group.is_none_or(|g| self.params[i].group == g))
            .collect()
    }

    pub fn numel(&self, idx: &[usize]) -> usize {
        idx.iter().map(|&i| self.params[i].value.len()).sum()
    }

    /// Concatenated values of the selected parameters.
    pub fn flatten(&self, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel(idx));
        for &i in idx {
            out.extend_from_slice(self.params[i].value.data());
        }
        out
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn set_flat(&mut self, idx: &[usize], flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel(idx) {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.numel(idx)
            )));
        }
        let mut at = 0;
        for &i in idx {
            let d = self.params[i].value.data_mut();
            let n = d.len();
            d.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

/// GroupNorm group count: 3 if divisible by 3, else 2 if even, else 1.
pub fn group_count(channels: usize) -> usize {
    if channels % 3 == 0 {
        3
    } else if channels % 2 == 0 {
        2
    } else {
        1
    }
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    /// Conv1x1, ReLU, Conv3x3, ReLU.
    Idf,
    /// Conv1x1, GroupNorm, Swish, Conv3x3, GroupNorm, Swish.
    Idfpp,
    /// Conv1x1, LayerNorm, ReLU, Conv1x1, LayerNorm, ReLU.
    Toy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    DenseNet {
        variant: BlockVariant,
        depth: usize,
        channels: usize,
    },
    /// Plain stack of Conv3x3 + ReLU layers.
    ConvNet { depth: usize, channels: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Activation {
    Relu,
    Swish,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub ksize: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        group: ParamGroup,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Tensor::zeros(&[ksize, ksize, cin, cout]),
            group,
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]), group);
        Conv2d {
            w,
            b,
            ksize,
            cin,
            cout,
        }
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, vars[self.w], vars[self.b], self.ksize)
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let fan_in = (self.ksize * self.ksize * self.cin) as f64;
        let a = (6.0 / fan_in).sqrt();
        for v in store.get_mut(self.w).value.data_mut() {
            *v = rng.gen_range(-a..a);
        }
        store.get_mut(self.b).value.data_mut().fill(0.0);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub gain: usize,
    pub bias: usize,
    pub groups: usize,
}

impl NormLayer {
    fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        groups: usize,
        group: ParamGroup,
    ) -> Self {
        let gain = store.add(
            format!("{name}.gain"),
            Tensor::full(&[channels], 1.0),
            group,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), group);
        NormLayer { gain, bias, groups }
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.group_norm(x, vars[self.gain], vars[self.bias], self.groups, NORM_EPS)
    }

    fn init(&self, store: &mut ParamStore) {
        store.get_mut(self.gain).value.data_mut().fill(1.0);
        store.get_mut(self.bias).value.data_mut().fill(0.0);
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DenseBlock {
    conv1: Conv2d,
    norm1: Option<NormLayer>,
    conv2: Conv2d,
    norm2: Option<NormLayer>,
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Dense(Vec<DenseBlock>),
    Conv(Vec<Conv2d>),
}

/// A DenseNet or ConvNet stack followed by an output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    body: Body,
    act: Activation,
    proj: Conv2d,
    cin: usize,
    cout: usize,
}

impl Network {
    /// Registers the parameters of a new network in `store` (zero valued;
    /// see [`init_parameters`]).
    pub fn build(
        spec: &BackboneSpec,
        cin: usize,
        cout: usize,
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
    ) -> Result<Self> {
        if cin == 0 || cout == 0 {
            return Err(Error::Dimension(format!(
                "network with {cin} inputs and {cout} outputs"
            )));
        }
        match *spec {
            BackboneSpec::DenseNet {
                variant,
                depth,
                channels,
            } => {
                if depth > 0 && channels < depth {
                    return Err(Error::Parameter(format!(
                        "dense net needs at least one channel per block ({channels} < {depth})"
                    )));
                }
                let k2 = if variant == BlockVariant::Toy { 1 } else { 3 };
                let mut blocks = Vec::with_capacity(depth);
                let mut width = cin;
                let mut remaining = channels;
                for i in 0..depth {
                    let growth = remaining / (depth - i);
                    remaining -= growth;
                    let name = format!("{prefix}.block{i}");
                    let conv1 =
                        Conv2d::new(store, &format!("{name}.conv1"), width, channels, 1, group);
                    let conv2 =
                        Conv2d::new(store, &format!("{name}.conv2"), channels, growth, k2, group);
                    let (norm1, norm2) = match variant {
                        BlockVariant::Idf => (None, None),
                        BlockVariant::Idfpp => (
                            Some(NormLayer::new(
                                store,
                                &format!("{name}.norm1"),
                                channels,
                                group_count(channels),
                                group,
                            )),
                            Some(NormLayer::new(
                                store,
                                &format!("{name}.norm2"),
                                growth,
                                group_count(growth),
                                group,
                            )),
                        ),
                        BlockVariant::Toy => (
                            Some(NormLayer::new(
                                store,
                                &format!("{name}.norm1"),
                                channels,
                                1,
                                group,
                            )),
                            Some(NormLayer::new(
                                store,
                                &format!("{name}.norm2"),
                                growth,
                                1,
                                group,
                            )),
                        ),
                    };
                    blocks.push(DenseBlock {
                        conv1,
                        norm1,
                        conv2,
                        norm2,
                    });
                    width += growth;
                }
                let proj = Conv2d::new(store, &format!("{prefix}.proj"), width, cout, k2, group);
                let act = if variant == BlockVariant::Idfpp {
                    Activation::Swish
                } else {
                    Activation::Relu
                };
                Ok(Network {
                    body: Body::Dense(blocks),
                    act,
                    proj,
                    cin,
                    cout,
                })
            }
            BackboneSpec::ConvNet { depth, channels } => {
                let mut layers = Vec::with_capacity(depth);
                let mut width = cin;
                for i in 0..depth {
                    layers.push(Conv2d::new(
                        store,
                        &format!("{prefix}.conv{i}"),
                        width,
                        channels,
                        3,
                        group,
                    ));
                    width = channels;
                }
                let proj = Conv2d::new(store, &format!("{prefix}.proj"), width, cout, 3, group);
                Ok(Network {
                    body: Body::Conv(layers),
                    act: Activation::Relu,
                    proj,
                    cin,
                    cout,
                })
            }
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    fn activate(&self, tape: &mut Tape, x: Var) -> Var {
        match self.act {
            Activation::Relu => tape.relu(x),
            Activation::Swish => tape.swish(x),
        }
    }

    /// Applies the network to a `(B, H, W, cin)` input.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let c = tape.value(x).dims4()?[3];
        if c != self.cin {
            return Err(Error::Dimension(format!(
                "network expects {} input channels, got {c}",
                self.cin
            )));
        }
        let mut h = x;
        match &self.body {
            Body::Dense(blocks) => {
                for b in blocks {
                    let mut u = b.conv1.forward(tape, vars, h)?;
                    if let Some(n) = &b.norm1 {
                        u = n.forward(tape, vars, u)?;
                    }
                    u = self.activate(tape, u);
                    u = b.conv2.forward(tape, vars, u)?;
                    if let Some(n) = &b.norm2 {
                        u = n.forward(tape, vars, u)?;
                    }
                    u = self.activate(tape, u);
                    h = tape.concat(h, u)?;
                }
            }
            Body::Conv(layers) => {
                for l in layers {
                    let u = l.forward(tape, vars, h)?;
                    h = self.activate(tape, u);
                }
            }
        }
        self.proj.forward(tape, vars, h)
    }

    fn convs(&self) -> Vec<&Conv2d> {
        let mut out = Vec::new();
        match &self.body {
            Body::Dense(blocks) => {
                for b in blocks {
                    out.push(&b.conv1);
                    out.push(&b.conv2);
                }
            }
            Body::Conv(layers) => out.extend(layers.iter()),
        }
        out.push(&self.proj);
        out
    }

    fn norms(&self) -> Vec<&NormLayer> {
        match &self.body {
            Body::Dense(blocks) => blocks
                .iter()
                .flat_map(|b| b.norm1.iter().chain(b.norm2.iter()))
                .collect(),
            Body::Conv(_) => Vec::new(),
        }
    }

    /// Store indices of every parameter owned by this network.
    pub fn param_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for c in self.convs() {
            out.push(c.w);
            out.push(c.b);
        }
        for n in self.norms() {
            out.push(n.gain);
            out.push(n.bias);
        }
        out.sort_unstable();
        out
    }

    /// The output projection layer.
    pub fn projection(&self) -> &Conv2d {
        &self.proj
    }

    pub(crate) fn init_with(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for c in self.convs() {
            c.init(store, rng);
        }
        for n in self.norms() {
            n.init(store);
        }
    }
}

/// Fan-in scaled uniform kernels (variance `2 / fan_in`), zero biases,
/// unit norm gains and zero norm biases. Deterministic in `seed`.
pub fn init_parameters(net: &Network, store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.init_with(store, &mut rng);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::finite_diff_gradient;

    #[test]
    fn group_counts() {
        assert_eq!(group_count(12), 3);
        assert_eq!(group_count(8), 2);
        assert_eq!(group_count(7), 1);
    }

    fn dense(variant: BlockVariant, depth: usize) -> BackboneSpec {
        BackboneSpec::DenseNet {
            variant,
            depth,
            channels: 6,
        }
    }

    fn input(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_depth_is_projection_only() {
        let mut store = ParamStore::new();
        let net = Network::build(
            &dense(BlockVariant::Idf, 0),
            3,
            2,
            &mut store,
            "n",
            ParamGroup::Bijector,
        )
        .unwrap();
        init_parameters(&net, &mut store, 1);
        assert_eq!(store.len(), 2);
        let x = input([1, 3, 3, 3], 2);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = net.forward(&mut tape, &vars, xv).unwrap();
        let mut t2 = Tape::new();
        let v2 = store.bind(&mut t2);
        let x2 = t2.leaf(x);
        let y2 = t2.conv2d(x2, v2[0], v2[1], 3).unwrap();
        assert_eq!(tape.value(y), t2.value(y2));
    }

    #[test]
    fn output_shapes_and_channel_check() {
        for spec in [
            dense(BlockVariant::Idf, 2),
            dense(BlockVariant::Idfpp, 2),
            dense(BlockVariant::Toy, 3),
            BackboneSpec::ConvNet {
                depth: 2,
                channels: 5,
            },
        ] {
            let mut store = ParamStore::new();
            let net = Network::build(&spec, 4, 7, &mut store, "n", ParamGroup::Bijector).unwrap();
            init_parameters(&net, &mut store, 3);
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let x = tape.leaf(input([2, 4, 4, 4], 1));
            let y = net.forward(&mut tape, &vars, x).unwrap();
            assert_eq!(tape.value(y).shape(), &[2, 4, 4, 7]);
            let bad = tape.leaf(input([2, 4, 4, 3], 1));
            assert!(matches!(
                net.forward(&mut tape, &vars, bad),
                Err(Error::Dimension(_))
            ));
        }
    }

    #[test]
    fn init_is_seeded() {
        let spec = dense(BlockVariant::Idfpp, 2);
        let mut a = ParamStore::new();
        let net = Network::build(&spec, 4, 2, &mut a, "n", ParamGroup::Bijector).unwrap();
        let mut b = a.clone();
        let mut c = a.clone();
        init_parameters(&net, &mut a, 5);
        init_parameters(&net, &mut b, 5);
        init_parameters(&net, &mut c, 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
        for p in a.iter() {
            if p.name.ends_with(".b") || p.name.ends_with(".bias") {
                assert!(p.value.data().iter().all(|&v| v == 0.0));
            }
            if p.name.ends_with(".gain") {
                assert!(p.value.data().iter().all(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn wide_kernel_variance_matches_fan_in() {
        let mut store = ParamStore::new();
        let spec = BackboneSpec::ConvNet {
            depth: 1,
            channels: 512,
        };
        let net = Network::build(&spec, 512, 1, &mut store, "n", ParamGroup::Bijector).unwrap();
        init_parameters(&net, &mut store, 9);
        let w = &store.get(net.convs()[0].w).value;
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let target = 2.0 / (9.0 * 512.0);
        assert!(
            (var / target - 1.0).abs() < 0.2,
            "variance {var} vs {target}"
        );
    }

    fn loss_of(net: &Network, store: &ParamStore, x: &Tensor) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = net.forward(&mut tape, &vars, xv).unwrap();
        let sq = tape.swish(y);
        let loss = tape.sum(sq);
        let idx = store.indices(None);
        let grads = tape
            .gradient(loss, &idx.iter().map(|&i| vars[i]).collect::<Vec<_>>())
            .unwrap();
        (
            tape.value(loss).item(),
            grads.into_iter().flat_map(|g| g.into_data()).collect(),
        )
    }

    #[test]
    fn every_variant_matches_finite_differences() {
        for spec in [
            dense(BlockVariant::Idf, 2),
            dense(BlockVariant::Idfpp, 2),
            dense(BlockVariant::Toy, 2),
            BackboneSpec::ConvNet {
                depth: 2,
                channels: 3,
            },
        ] {
            let mut store = ParamStore::new();
            let net = Network::build(&spec, 3, 2, &mut store, "n", ParamGroup::Bijector).unwrap();
            init_parameters(&net, &mut store, 11);
            // Nonzero norm biases so the affine path is exercised.
            for i in 0..store.len() {
                if store.get(i).name.ends_with(".bias") {
                    store.get_mut(i).value.data_mut().fill(0.1);
                }
            }
            let x = input([2, 3, 3, 3], 4);
            let (_, g) = loss_of(&net, &store, &x);
            let idx = store.indices(None);
            let theta = store.flatten(&idx);
            let fd = finite_diff_gradient(
                |t| {
                    let mut s = store.clone();
                    s.set_flat(&idx, t).unwrap();
                    loss_of(&net, &s, &x).0
                },
                &theta,
                1e-5,
            );
            let num: f64 = g
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(num / den <= 1e-4, "{spec:?}: relative error {}", num / den);
        }
    }
}
