//! Reverse-mode tape over dense tensors.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass walks it in reverse. Fused
//! elementwise ops (log-likelihood kernels, rounding) store their local
//! partials during the forward pass.

use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::rounding::RoundingConfig;
use super::tensor::Tensor;
use crate::dists::kernels::{self, LatticeSpec};
use crate::error::{dim_err, Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    fn index(self) -> usize {
        self.idx as usize
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    /// Tensor times a one-element node.
    MulScalar(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        ksize: usize,
        cols: Option<Vec<f64>>,
    },
    Norm {
        x: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    Swish(Var),
    Concat(Var, Var),
    Gather {
        x: Var,
        index: Rc<Vec<usize>>,
    },
    /// Elementwise op with stored local derivative.
    Pointwise {
        x: Var,
        deriv: Vec<f64>,
    },
    /// Log-likelihood of `z` under location `a` and log-scale `b`. The
    /// kernels depend on `z - a` only, so the `z` partial is `-da`.
    Likelihood {
        z: Var,
        a: Var,
        b: Var,
        da: Vec<f64>,
        db: Vec<f64>,
    },
    /// Per-position mixture parameters broadcast over the batch. `per` is
    /// the number of positions; partials are laid out like the output
    /// times the component count.
    Mixture {
        z: Var,
        mu: Var,
        log_s: Var,
        logits: Var,
        comps: usize,
        per: usize,
        dmu: Vec<f64>,
        dls: Vec<f64>,
        dlogit: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A single-threaded computation graph.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    tape: u32,
    adj: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `v`; zeros if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Result<Tensor> {
        if v.tape != self.tape || v.index() >= self.adj.len() {
            return Err(Error::Usage("variable is not on this tape".into()));
        }
        let shape = self.shapes[v.index()].clone();
        Ok(match &self.adj[v.index()] {
            Some(g) => Tensor::new(shape, g.clone())?,
            None => Tensor::zeros(&shape),
        })
    }
}

#[inline]
fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides describe buffers of exactly the asserted lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col3(x: &[f64], [b, h, w, c]: [usize; 4]) -> Vec<f64> {
    let mut cols = vec![0.0; b * h * w * 9 * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im3(cols: &[f64], [b, h, w, c]: [usize; 4]) -> Vec<f64> {
    let mut x = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for i in 0..c {
                            x[dst + i] += cols[src + i];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Tape {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// The seed drives stochastic rounding only.
    pub fn with_seed(seed: u64) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: (self.nodes.len() - 1) as u32,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Usage("variable is not on this tape".into()));
        }
        Ok(())
    }

    /// Adds an input (parameter or data). Inputs receive adjoints.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index()].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return dim_err(format!("add {:?} + {:?}", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x * c).collect(),
        )
        .expect("same shape");
        self.push(t, Op::Scale(a, c))
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return dim_err("mul_scalar expects a one-element scale");
        }
        let c = self.value(s).item();
        let va = self.value(a);
        let t = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x * c).collect(),
        )?;
        Ok(self.push(t, Op::MulScalar(a, s)))
    }

    /// 2-D convolution with "same" zero padding; `ksize` is 1 or 3.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, ksize: usize) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let [bs, h, wd, cin] = dims;
        let wshape = self.value(w).shape().to_vec();
        if wshape.len() != 4 || wshape[0] != ksize || wshape[1] != ksize || wshape[2] != cin {
            return dim_err(format!(
                "conv kernel {:?} does not match {}x{} conv on {} channels",
                wshape, ksize, ksize, cin
            ));
        }
        let cout = wshape[3];
        if self.value(b).len() != cout {
            return dim_err("conv bias length differs from output channels");
        }
        let rows = bs * h * wd;
        let mut out = Vec::with_capacity(rows * cout);
        for _ in 0..rows {
            out.extend_from_slice(self.value(b).data());
        }
        let cols = match ksize {
            1 => {
                gemm(
                    rows,
                    cin,
                    cout,
                    self.value(x).data(),
                    false,
                    self.value(w).data(),
                    false,
                    &mut out,
                    1.0,
                );
                None
            }
            3 => {
                let cols = im2col3(self.value(x).data(), dims);
                gemm(
                    rows,
                    9 * cin,
                    cout,
                    &cols,
                    false,
                    self.value(w).data(),
                    false,
                    &mut out,
                    1.0,
                );
                Some(cols)
            }
            k => return Err(Error::Parameter(format!("unsupported kernel size {k}"))),
        };
        let t = Tensor::new(vec![bs, h, wd, cout], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                ksize,
                cols,
            },
        ))
    }

    /// Group normalization over `(H, W, channels-in-group)` per sample,
    /// followed by a per-channel affine map. `groups = 1` is layer norm.
    pub fn group_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let [bs, h, w, c] = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return dim_err(format!("{groups} groups do not divide {c} channels"));
        }
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return dim_err("norm affine parameters differ from channel count");
        }
        let cg = c / groups;
        let n = (h * w * cg) as f64;
        let xs = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; bs * groups];
        for bi in 0..bs {
            for g in 0..groups {
                let mut sum = 0.0;
                for p in 0..h * w {
                    let base = (bi * h * w + p) * c + g * cg;
                    sum += xs[base..base + cg].iter().sum::<f64>();
                }
                let mean = sum / n;
                let mut var = 0.0;
                for p in 0..h * w {
                    let base = (bi * h * w + p) * c + g * cg;
                    var += xs[base..base + cg]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                let r = 1.0 / (var / n + eps).sqrt();
                rstd[bi * groups + g] = r;
                for p in 0..h * w {
                    let base = (bi * h * w + p) * c + g * cg;
                    for j in 0..cg {
                        let xh = (xs[base + j] - mean) * r;
                        xhat[base + j] = xh;
                        out[base + j] = xh * gv[g * cg + j] + bv[g * cg + j];
                    }
                }
            }
        }
        let t = Tensor::new(vec![bs, h, w, c], out)?;
        Ok(self.push(
            t,
            Op::Norm {
                x,
                gain,
                bias,
                groups,
                xhat,
                rstd,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a.max(0.0)).collect(),
        )
        .expect("same shape");
        self.push(t, Op::Relu(x))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        use super::rounding::sigmoid;
        let v = self.value(x);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a * sigmoid(a)).collect(),
        )
        .expect("same shape");
        self.push(t, Op::Swish(x))
    }

    /// Concatenates along the trailing axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return dim_err(format!("concat {:?} with {:?}", sa, sb));
        }
        let (ca, cb) = (va.last_dim(), vb.last_dim());
        let rows = va.len() / ca.max(1);
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat(a, b)))
    }

    /// `out[i] = x[index[i]]` with output shape `shape`.
    pub fn gather(&mut self, x: Var, shape: Vec<usize>, index: Rc<Vec<usize>>) -> Result<Var> {
        let v = self.value(x);
        if index.iter().any(|&i| i >= v.len()) {
            return dim_err("gather index out of range");
        }
        let data = index.iter().map(|&i| v.data()[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather { x, index }))
    }

    /// Quantizes `x` onto the lattice `Z / 2^bits` following `cfg`.
    pub fn round_to_grid(&mut self, x: Var, bits: u32, cfg: &RoundingConfig) -> Var {
        let scale = (bits as f64).exp2();
        let inv = 1.0 / scale;
        let n = self.value(x).len();
        let mut out = Vec::with_capacity(n);
        let mut deriv = Vec::with_capacity(n);
        for i in 0..n {
            let v = self.nodes[x.index()].value.data()[i] * scale;
            let rng = &mut self.rng;
            out.push(cfg.forward_lattice(v, || rng.gen::<f64>()) * inv);
            deriv.push(cfg.backward_lattice(v));
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Pointwise { x, deriv })
    }

    /// Elementwise discretized-logistic log-pmf of the lattice values `z`
    /// under per-element `mu` and `log_s`.
    pub fn dl_log_pmf(&mut self, z: Var, mu: Var, log_s: Var, spec: &LatticeSpec) -> Result<Var> {
        self.likelihood(z, mu, log_s, |x, m, l| kernels::dl_log_pmf(x, m, l, spec))
    }

    /// Elementwise continuous logistic log-density.
    pub fn logistic_log_pdf(&mut self, z: Var, mu: Var, log_s: Var) -> Result<Var> {
        self.likelihood(z, mu, log_s, kernels::logistic_log_pdf)
    }

    fn likelihood(
        &mut self,
        z: Var,
        mu: Var,
        log_s: Var,
        f: impl Fn(f64, f64, f64) -> (f64, f64, f64),
    ) -> Result<Var> {
        let (vz, vm, vl) = (self.value(z), self.value(mu), self.value(log_s));
        if vm.shape() != vl.shape() || vm.shape() != vz.shape() {
            return dim_err(format!(
                "log-likelihood of {:?} values with parameters {:?}/{:?}",
                vz.shape(),
                vm.shape(),
                vl.shape()
            ));
        }
        let n = vz.len();
        let (mut out, mut da, mut db) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for i in 0..n {
            let (lp, dm, dl) = f(vz.data()[i], vm.data()[i], vl.data()[i]);
            out.push(lp);
            da.push(dm);
            db.push(dl);
        }
        let t = Tensor::new(vm.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::Likelihood {
                z,
                a: mu,
                b: log_s,
                da,
                db,
            },
        ))
    }

    /// Mixture log-likelihood of `z` where component parameters have shape
    /// `(positions, components)` and are shared across the batch: element
    /// `i` of `z` uses position `i % positions`. `kernel` is the
    /// per-component log-likelihood.
    pub fn mixture_log_lik(
        &mut self,
        z: Var,
        mu: Var,
        log_s: Var,
        logits: Var,
        kernel: impl Fn(f64, f64, f64) -> (f64, f64, f64),
    ) -> Result<Var> {
        let (vz, vm, vl, vw) = (
            self.value(z),
            self.value(mu),
            self.value(log_s),
            self.value(logits),
        );
        if vm.shape().len() != 2 || vm.shape() != vl.shape() || vm.shape() != vw.shape() {
            return dim_err("mixture parameters must share a (positions, components) shape");
        }
        let (per, comps) = (vm.shape()[0], vm.shape()[1]);
        if per == 0 || vz.len() % per != 0 {
            return dim_err(format!(
                "{} targets for {} mixture positions",
                vz.len(),
                per
            ));
        }
        let n = vz.len();
        let mut out = Vec::with_capacity(n);
        let mut dmu = vec![0.0; n * comps];
        let mut dls = vec![0.0; n * comps];
        let mut dlogit = vec![0.0; n * comps];
        let mut logw = vec![0.0; per * comps];
        for p in 0..per {
            let row = p * comps..(p + 1) * comps;
            kernels::log_softmax(&vw.data()[row.clone()], &mut logw[row]);
        }
        let mut terms = vec![0.0; comps];
        let mut resp = vec![0.0; comps];
        let mut pm = vec![0.0; comps];
        let mut pl = vec![0.0; comps];
        for i in 0..n {
            let p = i % per;
            let lw = &logw[p * comps..(p + 1) * comps];
            for k in 0..comps {
                let (lp, a, b) = kernel(
                    vz.data()[i],
                    vm.data()[p * comps + k],
                    vl.data()[p * comps + k],
                );
                terms[k] = lw[k] + lp;
                pm[k] = a;
                pl[k] = b;
            }
            let lp = kernels::log_mix(&terms, &mut resp);
            out.push(lp);
            for k in 0..comps {
                dmu[i * comps + k] = resp[k] * pm[k];
                dls[i * comps + k] = resp[k] * pl[k];
                dlogit[i * comps + k] = resp[k] - lw[k].exp();
            }
        }
        let t = Tensor::new(vz.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::Mixture {
                z,
                mu,
                log_s,
                logits,
                comps,
                per,
                dmu,
                dls,
                dlogit,
            },
        ))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse pass from `loss`, which must hold a single value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return dim_err("backward needs a scalar loss");
        }
        let n = loss.index() + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.index()] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::Add(a, b) => {
                    add_into(&mut adj[a.index()], &g);
                    add_into(&mut adj[b.index()], &g);
                }
                Op::Scale(a, c) => {
                    let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                    add_into(&mut adj[a.index()], &d);
                }
                Op::MulScalar(a, s) => {
                    let c = self.value(*s).item();
                    let va = self.value(*a);
                    let ds: f64 = g.iter().zip(va.data()).map(|(x, y)| x * y).sum();
                    let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                    add_into(&mut adj[a.index()], &d);
                    add_into(&mut adj[s.index()], &[ds]);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    ksize,
                    cols,
                } => {
                    let dims = self.value(*x).dims4()?;
                    let [bs, h, wd, cin] = dims;
                    let cout = node.value.last_dim();
                    let rows = bs * h * wd;
                    let mut db = vec![0.0; cout];
                    for r in 0..rows {
                        for (o, v) in db.iter_mut().zip(&g[r * cout..(r + 1) * cout]) {
                            *o += v;
                        }
                    }
                    add_into(&mut adj[b.index()], &db);
                    let kin = ksize * ksize * cin;
                    let input: &[f64] = match cols {
                        Some(c) => c,
                        None => self.value(*x).data(),
                    };
                    let mut dw = vec![0.0; kin * cout];
                    gemm(kin, rows, cout, input, true, &g, false, &mut dw, 0.0);
                    add_into(&mut adj[w.index()], &dw);
                    let mut dcols = vec![0.0; rows * kin];
                    gemm(
                        rows,
                        cout,
                        kin,
                        &g,
                        false,
                        self.value(*w).data(),
                        true,
                        &mut dcols,
                        0.0,
                    );
                    if *ksize == 3 {
                        let dx = col2im3(&dcols, dims);
                        add_into(&mut adj[x.index()], &dx);
                    } else {
                        add_into(&mut adj[x.index()], &dcols);
                    }
                }
                Op::Norm {
                    x,
                    gain,
                    bias,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let [bs, h, w, c] = node.value.dims4()?;
                    let cg = c / groups;
                    let gv = self.value(*gain).data();
                    let mut dgain = vec![0.0; c];
                    let mut dbias = vec![0.0; c];
                    let mut dx = vec![0.0; g.len()];
                    let n = (h * w * cg) as f64;
                    for bi in 0..bs {
                        for gi in 0..*groups {
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for p in 0..h * w {
                                let base = (bi * h * w + p) * c + gi * cg;
                                for j in 0..cg {
                                    let ch = gi * cg + j;
                                    let dy = g[base + j];
                                    dgain[ch] += dy * xhat[base + j];
                                    dbias[ch] += dy;
                                    let dxh = dy * gv[ch];
                                    s1 += dxh;
                                    s2 += dxh * xhat[base + j];
                                }
                            }
                            let r = rstd[bi * groups + gi];
                            for p in 0..h * w {
                                let base = (bi * h * w + p) * c + gi * cg;
                                for j in 0..cg {
                                    let dxh = g[base + j] * gv[gi * cg + j];
                                    dx[base + j] = r / n * (n * dxh - s1 - xhat[base + j] * s2);
                                }
                            }
                        }
                    }
                    add_into(&mut adj[gain.index()], &dgain);
                    add_into(&mut adj[bias.index()], &dbias);
                    add_into(&mut adj[x.index()], &dx);
                }
                Op::Relu(x) => {
                    let vx = self.value(*x).data();
                    let d: Vec<f64> = g
                        .iter()
                        .zip(vx)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    add_into(&mut adj[x.index()], &d);
                }
                Op::Swish(x) => {
                    use super::rounding::sigmoid;
                    let vx = self.value(*x).data();
                    let d: Vec<f64> = g
                        .iter()
                        .zip(vx)
                        .map(|(gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * (s + xv * s * (1.0 - s))
                        })
                        .collect();
                    add_into(&mut adj[x.index()], &d);
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                    let rows = g.len() / (ca + cb).max(1);
                    let mut ga = Vec::with_capacity(rows * ca);
                    let mut gb = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        let base = r * (ca + cb);
                        ga.extend_from_slice(&g[base..base + ca]);
                        gb.extend_from_slice(&g[base + ca..base + ca + cb]);
                    }
                    add_into(&mut adj[a.index()], &ga);
                    add_into(&mut adj[b.index()], &gb);
                }
                Op::Gather { x, index } => {
                    let mut d = vec![0.0; self.value(*x).len()];
                    for (o, &src) in index.iter().enumerate() {
                        d[src] += g[o];
                    }
                    add_into(&mut adj[x.index()], &d);
                }
                Op::Pointwise { x, deriv } => {
                    let d: Vec<f64> = g.iter().zip(deriv).map(|(a, b)| a * b).collect();
                    add_into(&mut adj[x.index()], &d);
                }
                Op::Likelihood { z, a, b, da, db } => {
                    let ga: Vec<f64> = g.iter().zip(da).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(db).map(|(x, y)| x * y).collect();
                    let gz: Vec<f64> = ga.iter().map(|v| -v).collect();
                    add_into(&mut adj[z.index()], &gz);
                    add_into(&mut adj[a.index()], &ga);
                    add_into(&mut adj[b.index()], &gb);
                }
                Op::Mixture {
                    z,
                    mu,
                    log_s,
                    logits,
                    comps,
                    per,
                    dmu,
                    dls,
                    dlogit,
                } => {
                    let mut gz = vec![0.0; g.len()];
                    let mut gm = vec![0.0; per * comps];
                    let mut gl = vec![0.0; per * comps];
                    let mut gw = vec![0.0; per * comps];
                    for (i, gi) in g.iter().enumerate() {
                        let p = i % per;
                        for k in 0..*comps {
                            let src = i * comps + k;
                            let dst = p * comps + k;
                            gm[dst] += gi * dmu[src];
                            gz[i] -= gi * dmu[src];
                            gl[dst] += gi * dls[src];
                            gw[dst] += gi * dlogit[src];
                        }
                    }
                    add_into(&mut adj[z.index()], &gz);
                    add_into(&mut adj[mu.index()], &gm);
                    add_into(&mut adj[log_s.index()], &gl);
                    add_into(&mut adj[logits.index()], &gw);
                }
                Op::Sum(x) => {
                    let d = vec![g[0]; self.value(*x).len()];
                    add_into(&mut adj[x.index()], &d);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            adj,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    /// Gradient of `loss` with respect to each of `params`.
    pub fn gradient(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        for &p in params {
            self.check(p)?;
        }
        let grads = self.backward(loss)?;
        params.iter().map(|&p| grads.get(p)).collect()
    }
}
