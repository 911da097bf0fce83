//! Diagnostics on the two-dimensional toy distributions: learned
//! factorization, agreement between straight-through and finite-difference
//! gradients, rounding-estimator comparisons, and loss landscapes along the
//! principal directions of a training trajectory.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::check::cosine_agreement;
use crate::autodiff::rounding::{BackwardRounding, ForwardRounding, RoundingConfig};
use crate::error::{Error, Result};
use crate::flows::{FlowModel, Mode, ModelConfig};
use crate::grid::GridTensor;
use crate::nn::ParamGroup;
use crate::train::{batch_loss, loss_and_gradient, LrSchedule, TrainConfig, Trainer};

/// Joint pmf over `{0..N-1}^2`, `N = 2^bits`, stored at `x1 + N * x2`.
///
/// Masses follow log-linearly spaced logits: the `k`-th cell in that order
/// has logit `ln((k + 1) / (N^2 + 1))`, so `p` is proportional to
/// `x1 + N x2 + 1`. At one bit this is `p(0,0)=0.1, p(1,0)=0.2,
/// p(0,1)=0.3, p(1,1)=0.4`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub bits: u32,
    pub pmf: Vec<f64>,
}

pub fn toy_pmf(bits: u32) -> Result<ToySpec> {
    if !(1..=10).contains(&bits) {
        return Err(Error::Parameter(format!(
            "toy bit depth must be in 1..=10, got {bits}"
        )));
    }
    let cells = 1usize << (2 * bits);
    // Softmax of logits ln((k + 1) / (M + 1)) reduces to (k + 1) / sum; the
    // direct form keeps the one-bit table exact.
    let total = (cells * (cells + 1) / 2) as f64;
    Ok(ToySpec {
        bits,
        pmf: (0..cells).map(|k| (k + 1) as f64 / total).collect(),
    })
}

impl ToySpec {
    /// Values per coordinate.
    pub fn side(&self) -> usize {
        1 << self.bits
    }

    pub fn prob(&self, x1: usize, x2: usize) -> f64 {
        self.pmf[x1 + self.side() * x2]
    }

    pub fn entropy_bits(&self) -> f64 {
        self.pmf
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| -p * p.log2())
            .sum()
    }

    /// Entropy per dimension: the best achievable bpd.
    pub fn entropy_bpd(&self) -> f64 {
        self.entropy_bits() / 2.0
    }

    /// Cross-entropy of the product of the two marginals, per dimension.
    pub fn factorized_bpd(&self) -> f64 {
        let n = self.side();
        let mut m1 = vec![0.0; n];
        let mut m2 = vec![0.0; n];
        for x2 in 0..n {
            for x1 in 0..n {
                m1[x1] += self.prob(x1, x2);
                m2[x2] += self.prob(x1, x2);
            }
        }
        let h = |m: &[f64]| {
            m.iter()
                .filter(|&&p| p > 0.0)
                .map(|p| -p * p.log2())
                .sum::<f64>()
        };
        (h(&m1) + h(&m2)) / 2.0
    }

    fn image(&self, cells: &[usize]) -> Result<GridTensor> {
        let n = self.side();
        let codes = cells
            .iter()
            .flat_map(|&k| [(k % n) as i64, (k / n) as i64])
            .collect();
        GridTensor::new([cells.len(), 1, 1, 2], codes, self.bits)
    }

    /// Every support point as a `(N^2, 1, 1, 2)` batch in storage order.
    pub fn support(&self) -> Result<GridTensor> {
        self.image(&(0..self.pmf.len()).collect::<Vec<_>>())
    }

    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<GridTensor> {
        let dist = WeightedIndex::new(&self.pmf).map_err(|e| Error::Parameter(e.to_string()))?;
        let cells: Vec<usize> = (0..n).map(|_| dist.sample(rng)).collect();
        self.image(&cells)
    }

    /// Exact expected bpd of `model` under this distribution. Continuous
    /// models average `noise_draws` dequantization samples per point.
    pub fn expected_bpd(&self, model: &FlowModel, noise_draws: usize) -> Result<f64> {
        let support = self.support()?;
        let draws = if model.config().mode == Mode::Continuous {
            noise_draws.max(1)
        } else {
            1
        };
        let chunk = 4096;
        let mut total = 0.0;
        for d in 0..draws {
            let mut start = 0;
            while start < self.pmf.len() {
                let end = (start + chunk).min(self.pmf.len());
                let items = model.nll_bpd_items(
                    &support.batch_slice(start, end)?,
                    (d * self.pmf.len() + start) as u64,
                )?;
                total += items
                    .iter()
                    .zip(&self.pmf[start..end])
                    .map(|(b, p)| b * p)
                    .sum::<f64>();
                start = end;
            }
        }
        Ok(total / draws as f64)
    }
}

/// Toy model for `bits`-bit data with the given flow mode and rounding.
pub fn toy_model_config(bits: u32, mode: Mode, rounding: RoundingConfig, seed: u64) -> ModelConfig {
    ModelConfig {
        mode,
        rounding,
        seed,
        ..ModelConfig::toy(bits)
    }
}

/// Prior at 1e-3, couplings at 1e-4, batch 128, constant rates.
pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        schedule: LrSchedule {
            base_lr: 1e-4,
            decay: 1.0,
            warmup_epochs: 0,
        },
        prior_lr: Some(1e-3),
        batch_size: 128,
        epochs: 1,
        max_steps: None,
        ema: false,
        ema_decay: 0.9999,
        ema_warmup: true,
        seed,
        checkpoint_every: None,
        record_wall_time: false,
    }
}

/// Outcome of [`train_toy`].
pub struct ToyRun {
    pub model: FlowModel,
    /// Batch losses, one per iteration.
    pub losses: Vec<f64>,
    /// `(iteration, flat parameters)` snapshots, the final state last.
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

/// Trains on fresh samples from `toy` for `iterations` steps, snapshotting
/// all parameters every `snapshot_every` steps when nonzero.
pub fn train_toy(
    toy: &ToySpec,
    model: FlowModel,
    config: TrainConfig,
    iterations: usize,
    snapshot_every: usize,
) -> Result<ToyRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd47a);
    let batch = config.batch_size;
    let mut trainer = Trainer::new(model, config)?;
    let all = trainer.model().store().indices(None);
    let mut losses = Vec::with_capacity(iterations);
    let mut snapshots = Vec::new();
    let snap = |it: usize, t: &Trainer, snaps: &mut Vec<(usize, Vec<f64>)>| {
        if snaps.last().is_none_or(|(i, _)| *i != it) {
            snaps.push((it, t.model().store().flatten(&all)));
        }
    };
    if snapshot_every > 0 {
        snap(0, &trainer, &mut snapshots);
    }
    for it in 0..iterations {
        let x = toy.sample(batch, &mut rng)?;
        losses.push(trainer.step(&x)?);
        if snapshot_every > 0 && (it + 1) % snapshot_every == 0 {
            snap(it + 1, &trainer, &mut snapshots);
        }
    }
    if snapshot_every > 0 {
        snap(iterations, &trainer, &mut snapshots);
    }
    Ok(ToyRun {
        model: trainer.into_model(),
        losses,
        snapshots,
    })
}

// ----- gradient agreement -----

/// Eight log-spaced step sizes in `[1e-4, 1e-1]`.
pub fn default_epsilons() -> Vec<f64> {
    (0..8)
        .map(|i| 10f64.powf(-4.0 + 3.0 * i as f64 / 7.0))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgreementRecord {
    pub epsilon: f64,
    pub batch_id: usize,
    /// `None` when either gradient is zero; such rows are excluded from
    /// the mean.
    pub cosine: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgreementSummary {
    pub epsilon: f64,
    pub mean: f64,
    pub std: f64,
    pub used: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgreementSweep {
    pub epsilons: Vec<f64>,
    pub records: Vec<AgreementRecord>,
    pub summary: Vec<AgreementSummary>,
}

fn bijector_offsets(model: &FlowModel) -> Vec<usize> {
    let mut out = Vec::new();
    let mut at = 0;
    for p in model.store().iter() {
        if p.group == ParamGroup::Bijector {
            out.extend(at..at + p.value.len());
        }
        at += p.value.len();
    }
    out
}

fn locate(model: &FlowModel) -> Vec<(usize, usize)> {
    model
        .store()
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.value.len()).map(move |j| (i, j)))
        .collect()
}

/// Gradient used for training (straight-through for discrete models, exact
/// for continuous ones) restricted to bijector parameters.
pub fn estimator_gradient(model: &FlowModel, batch: &GridTensor, seed: u64) -> Result<Vec<f64>> {
    let (_, g) = loss_and_gradient(model, batch, &model.config().rounding, seed)?;
    Ok(bijector_offsets(model).into_iter().map(|i| g[i]).collect())
}

/// Distinct images of a batch, in first-seen order, with their counts.
fn unique_rows(batch: &GridTensor) -> Result<(GridTensor, Vec<usize>)> {
    let [b, h, w, c] = batch.shape();
    let row = h * w * c;
    let mut seen: std::collections::HashMap<&[i64], usize> = std::collections::HashMap::new();
    let mut codes = Vec::new();
    let mut counts = Vec::new();
    for r in batch.codes().chunks(row.max(1)).take(b) {
        let k = *seen.entry(r).or_insert_with(|| {
            codes.extend_from_slice(r);
            counts.push(0);
            counts.len() - 1
        });
        counts[k] += 1;
    }
    Ok((
        GridTensor::new([counts.len(), h, w, c], codes, batch.bits())?,
        counts,
    ))
}

/// Central finite differences of the evaluation loss (hard rounding for
/// discrete models) over bijector parameters.
pub fn finite_difference_gradient(
    model: &FlowModel,
    batch: &GridTensor,
    seed: u64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let rounding = model.eval_rounding();
    // The discrete loss is deterministic per item, so repeated rows are
    // evaluated once and weighted by their multiplicity.
    let dedup = (model.config().mode == Mode::Discrete)
        .then(|| unique_rows(batch))
        .transpose()?;
    let loss = |m: &FlowModel| -> Result<f64> {
        match &dedup {
            Some((rows, counts)) => {
                let items = m.nll_bpd_items(rows, seed)?;
                Ok(items
                    .iter()
                    .zip(counts)
                    .map(|(b, &c)| b * c as f64)
                    .sum::<f64>()
                    / batch.batch() as f64)
            }
            None => batch_loss(m, batch, &rounding, seed),
        }
    };
    let loc = locate(model);
    let mut m = model.clone();
    bijector_offsets(model)
        .into_iter()
        .map(|flat| {
            let (pi, ei) = loc[flat];
            let orig = m.store().get(pi).value.data()[ei];
            m.store_mut().get_mut(pi).value.data_mut()[ei] = orig + epsilon;
            let up = loss(&m)?;
            m.store_mut().get_mut(pi).value.data_mut()[ei] = orig - epsilon;
            let down = loss(&m)?;
            m.store_mut().get_mut(pi).value.data_mut()[ei] = orig;
            Ok((up - down) / (2.0 * epsilon))
        })
        .collect()
}

/// Cosine between the estimator gradient and finite differences on one
/// fixed batch.
pub fn agreement_record(
    model: &FlowModel,
    batch: &GridTensor,
    seed: u64,
    epsilon: f64,
) -> Result<Option<f64>> {
    let g = estimator_gradient(model, batch, seed)?;
    let fd = finite_difference_gradient(model, batch, seed, epsilon)?;
    Ok(cosine_agreement(&g, &fd))
}

/// Sweeps `epsilons` over `batches` fixed batches drawn from `toy`. The
/// estimator gradient is computed once per batch and compared against the
/// finite differences of that same batch for every epsilon.
pub fn agreement_sweep(
    model: &FlowModel,
    toy: &ToySpec,
    epsilons: &[f64],
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<AgreementSweep> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(epsilons.len() * batches);
    for b in 0..batches {
        let batch = toy.sample(batch_size, &mut rng)?;
        let noise_seed = seed.wrapping_add(b as u64);
        let g = estimator_gradient(model, &batch, noise_seed)?;
        for &eps in epsilons {
            let fd = finite_difference_gradient(model, &batch, noise_seed, eps)?;
            records.push(AgreementRecord {
                epsilon: eps,
                batch_id: b,
                cosine: cosine_agreement(&g, &fd),
            });
        }
    }
    let summary = epsilons
        .iter()
        .map(|&eps| {
            let c: Vec<f64> = records
                .iter()
                .filter(|r| r.epsilon == eps)
                .filter_map(|r| r.cosine)
                .collect();
            let n = c.len();
            let mean = if n == 0 {
                f64::NAN
            } else {
                c.iter().sum::<f64>() / n as f64
            };
            let var = if n < 2 {
                0.0
            } else {
                c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            };
            AgreementSummary {
                epsilon: eps,
                mean,
                std: var.sqrt(),
                used: n,
            }
        })
        .collect();
    Ok(AgreementSweep {
        epsilons: epsilons.to_vec(),
        records,
        summary,
    })
}

// ----- estimator matrix -----

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorCombo {
    pub mode: Mode,
    pub rounding: RoundingConfig,
}

impl EstimatorCombo {
    pub fn label(&self) -> (String, String) {
        let f = match self.rounding.forward {
            ForwardRounding::Identity => "id".to_string(),
            ForwardRounding::HardRound => "rnd".to_string(),
            ForwardRounding::SoftRound { temperature } => format!("sigma_T={temperature}"),
            ForwardRounding::Stochastic => "stochastic".to_string(),
        };
        let b = match self.rounding.backward {
            BackwardRounding::Identity => "id".to_string(),
            BackwardRounding::SoftRoundDerivative { temperature } => {
                format!("dsigma_T={temperature}")
            }
            BackwardRounding::HardZero => "zero".to_string(),
        };
        (f, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorRow {
    pub combo: EstimatorCombo,
    pub seed: u64,
    pub bpd: f64,
}

/// Trains one toy model per (combo, seed) for `iterations` steps and
/// reports its expected bpd on the toy distribution.
pub fn estimator_matrix_run(
    toy: &ToySpec,
    combos: &[EstimatorCombo],
    seeds: &[u64],
    iterations: usize,
) -> Result<Vec<EstimatorRow>> {
    let mut rows = Vec::with_capacity(combos.len() * seeds.len());
    for combo in combos {
        for &seed in seeds {
            let cfg = toy_model_config(toy.bits, combo.mode, combo.rounding, seed);
            let run = train_toy(
                toy,
                FlowModel::new(cfg)?,
                toy_train_config(seed),
                iterations,
                0,
            )?;
            rows.push(EstimatorRow {
                combo: *combo,
                seed,
                bpd: toy.expected_bpd(&run.model, 4)?,
            });
        }
    }
    Ok(rows)
}

/// Mean bpd per combo, in the order given.
pub fn estimator_means(rows: &[EstimatorRow], combos: &[EstimatorCombo]) -> Vec<f64> {
    combos
        .iter()
        .map(|c| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.combo == *c)
                .map(|r| r.bpd)
                .collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

// ----- loss landscape -----

fn fix_sign(v: &mut [f64]) {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * scale) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Difference matrix `[theta_0 - theta_n, ..., theta_{n-1} - theta_n]`,
/// centred across checkpoints, as a `params x n` matrix.
fn centred_differences(checkpoints: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if checkpoints.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 checkpoints, got {}",
            checkpoints.len()
        )));
    }
    let p = checkpoints[0].len();
    if checkpoints.iter().any(|c| c.len() != p) {
        return Err(Error::Dimension("checkpoints differ in length".into()));
    }
    let last = checkpoints.last().unwrap();
    let n = checkpoints.len() - 1;
    let mut m = DMatrix::from_fn(p, n, |i, j| checkpoints[j][i] - last[i]);
    for i in 0..p {
        let mean = m.row(i).sum() / n as f64;
        m.row_mut(i).iter_mut().for_each(|v| *v -= mean);
    }
    Ok(m)
}

/// Top two principal directions of the trajectory, unit norm, with the
/// first significant coordinate positive.
pub fn landscape_pca(checkpoints: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = centred_differences(checkpoints)?;
    // Eigen-decompose the small Gram matrix instead of the parameter-space
    // covariance.
    let gram = m.transpose() * &m;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 0.0) || l2 <= 1e-12 * l1 {
        return Err(Error::Degenerate(
            "trajectory spans fewer than two directions".into(),
        ));
    }
    let dir = |k: usize, l: f64| -> Vec<f64> {
        let v = &m * eig.eigenvectors.column(k);
        let mut d: Vec<f64> = v.iter().map(|x| x / l.sqrt()).collect();
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        d.iter_mut().for_each(|x| *x /= norm);
        fix_sign(&mut d);
        d
    };
    let t1 = dir(order[0], l1);
    let mut t2 = dir(order[1], l2);
    // Remove round-off overlap so the pair is orthonormal to working precision.
    let dot: f64 = t1.iter().zip(&t2).map(|(a, b)| a * b).sum();
    t2.iter_mut().zip(&t1).for_each(|(b, a)| *b -= dot * a);
    let norm = t2.iter().map(|x| x * x).sum::<f64>().sqrt();
    t2.iter_mut().for_each(|x| *x /= norm);
    Ok((t1, t2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    /// `(alpha, beta, loss)` in row-major order over alpha then beta.
    pub rows: Vec<(f64, f64, f64)>,
    /// `(step, alpha, beta)` projections of the checkpoints.
    pub trajectory: Vec<(usize, f64, f64)>,
    pub resolution: usize,
}

fn axis(range: (f64, f64), resolution: usize) -> Vec<f64> {
    if resolution == 1 {
        return vec![range.0];
    }
    (0..resolution)
        .map(|i| range.0 + (range.1 - range.0) * i as f64 / (resolution - 1) as f64)
        .collect()
}

/// Symmetric half-width covering every checkpoint's projection onto `t1`
/// and `t2` relative to the last checkpoint, with a 25% margin.
pub fn landscape_range(checkpoints: &[Vec<f64>], t1: &[f64], t2: &[f64]) -> Result<f64> {
    let last = checkpoints
        .last()
        .ok_or_else(|| Error::Parameter("no checkpoints".into()))?;
    let proj = |t: &[f64], d: &[f64]| {
        t.iter()
            .zip(last)
            .zip(d)
            .map(|((x, y), v)| (x - y) * v)
            .sum::<f64>()
    };
    let reach = checkpoints
        .iter()
        .flat_map(|t| [proj(t, t1).abs(), proj(t, t2).abs()])
        .fold(0.0, f64::max);
    Ok(1.25 * reach.max(1e-3))
}

/// Evaluates the loss at `theta* + alpha t1 + beta t2` over a grid, where
/// `theta*` is the model's current parameters, and projects the given
/// checkpoints onto the directions.
#[allow(clippy::too_many_arguments)]
pub fn landscape_grid(
    model: &FlowModel,
    t1: &[f64],
    t2: &[f64],
    alpha: (f64, f64),
    beta: (f64, f64),
    resolution: usize,
    batch: &GridTensor,
    checkpoints: &[(usize, Vec<f64>)],
) -> Result<LandscapeGrid> {
    if resolution == 0
        || ![alpha.0, alpha.1, beta.0, beta.1]
            .iter()
            .all(|v| v.is_finite())
    {
        return Err(Error::Parameter(
            "landscape needs finite ranges and a positive resolution".into(),
        ));
    }
    let idx = model.store().indices(None);
    let theta = model.store().flatten(&idx);
    if t1.len() != theta.len() || t2.len() != theta.len() {
        return Err(Error::Dimension(format!(
            "directions of length {} for {} parameters",
            t1.len(),
            theta.len()
        )));
    }
    let rounding = model.eval_rounding();
    let mut m = model.clone();
    let mut rows = Vec::with_capacity(resolution * resolution);
    let mut point = theta.clone();
    for &a in &axis(alpha, resolution) {
        for &b in &axis(beta, resolution) {
            for (k, p) in point.iter_mut().enumerate() {
                *p = theta[k] + a * t1[k] + b * t2[k];
            }
            m.store_mut().set_flat(&idx, &point)?;
            rows.push((a, b, batch_loss(&m, batch, &rounding, 0)?));
        }
    }
    let trajectory = checkpoints
        .iter()
        .map(|(step, c)| {
            let d: Vec<f64> = c.iter().zip(&theta).map(|(x, t)| x - t).collect();
            let pa = d.iter().zip(t1).map(|(x, y)| x * y).sum();
            let pb = d.iter().zip(t2).map(|(x, y)| x * y).sum();
            (*step, pa, pb)
        })
        .collect();
    Ok(LandscapeGrid {
        rows,
        trajectory,
        resolution,
    })
}

impl LandscapeGrid {
    /// Absolute loss differences between horizontally and vertically
    /// adjacent grid points.
    pub fn neighbour_jumps(&self) -> Vec<f64> {
        let r = self.resolution;
        let at = |i: usize, j: usize| self.rows[i * r + j].2;
        let mut out = Vec::new();
        for i in 0..r {
            for j in 0..r {
                if i + 1 < r {
                    out.push((at(i + 1, j) - at(i, j)).abs());
                }
                if j + 1 < r {
                    out.push((at(i, j + 1) - at(i, j)).abs());
                }
            }
        }
        out
    }

    /// Largest neighbour jump divided by the median jump.
    pub fn jump_ratio(&self) -> f64 {
        let mut j = self.neighbour_jumps();
        if j.is_empty() {
            return 0.0;
        }
        j.sort_by(f64::total_cmp);
        let median = j[j.len() / 2];
        j[j.len() - 1] / median
    }
}

// ----- CSV output -----

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// `epsilon,batch_id,cosine`; flagged rows leave `cosine` empty.
pub fn write_agreement_csv(path: &Path, sweep: &AgreementSweep, note: &str) -> Result<()> {
    let mut f = create(path)?;
    if !note.is_empty() {
        writeln!(f, "# {note}")?;
    }
    writeln!(f, "epsilon,batch_id,cosine")?;
    for r in &sweep.records {
        let c = r.cosine.map(|c| c.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{}", r.epsilon, r.batch_id, c)?;
    }
    Ok(())
}

/// `forward,backward,mode,seed,bpd`.
pub fn write_estimator_csv(path: &Path, rows: &[EstimatorRow]) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "forward,backward,mode,seed,bpd")?;
    for r in rows {
        let (fw, bw) = r.combo.label();
        let mode = match r.combo.mode {
            Mode::Discrete => "discrete",
            Mode::Continuous => "continuous",
        };
        writeln!(f, "{fw},{bw},{mode},{},{}", r.seed, r.bpd)?;
    }
    Ok(())
}

/// `alpha,beta,loss` to `grid_path` and `step,alpha,beta` to `trajectory_path`.
pub fn write_landscape_csv(
    grid_path: &Path,
    trajectory_path: &Path,
    grid: &LandscapeGrid,
) -> Result<()> {
    let mut f = create(grid_path)?;
    writeln!(f, "alpha,beta,loss")?;
    for (a, b, l) in &grid.rows {
        writeln!(f, "{a},{b},{l}")?;
    }
    let mut t = create(trajectory_path)?;
    writeln!(t, "step,alpha,beta")?;
    for (s, a, b) in &grid.trajectory {
        writeln!(t, "{s},{a},{b}")?;
    }
    Ok(())
}
