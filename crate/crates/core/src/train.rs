//! Optimization: Adamax, warmup plus exponential learning-rate decay, EMA
//! weights, and the epoch loop with checkpoints and a metrics CSV.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::rounding::RoundingConfig;
use crate::autodiff::Tape;
use crate::container::{checksum8, verify_checksum, ByteReader};
use crate::error::{Error, Result};
use crate::flows::{load_model, save_model, FlowModel};
use crate::grid::GridTensor;
use crate::nn::ParamGroup;

/// Adamax moments over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adamax {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub u: Vec<f64>,
}

impl Adamax {
    pub fn new(n: usize) -> Self {
        Adamax {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            u: vec![0.0; n],
        }
    }

    /// One update with a per-element learning rate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: &[f64]) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n || lr.len() != n {
            return Err(Error::Dimension(format!(
                "optimizer holds {n} moments, got {} params, {} grads, {} rates",
                params.len(),
                grads.len(),
                lr.len()
            )));
        }
        self.step += 1;
        let bias = 1.0 - self.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        for i in 0..n {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.u[i] = (self.beta2 * self.u[i]).max(g.abs());
            params[i] -= lr[i] * self.m[i] / (bias * (self.u[i] + self.eps));
        }
        Ok(())
    }
}

/// `base * (e + 1) / warmup` during warmup, `base * decay^e` after.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay: f64,
    pub warmup_epochs: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64
        } else {
            self.base_lr * self.decay.powi(epoch.min(i32::MAX as usize) as i32)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite())
            || !(self.decay > 0.0 && self.decay <= 1.0)
        {
            return Err(Error::Config(format!(
                "learning rate {} and decay {} must be positive, decay at most 1",
                self.base_lr, self.decay
            )));
        }
        Ok(())
    }
}

/// Exponential moving average of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaWeights {
    pub decay: f64,
    /// Use `min(decay, (1 + t) / (10 + t))` so short runs average recent
    /// weights rather than the initialization.
    pub warmup: bool,
    pub updates: u64,
    pub shadow: Vec<f64>,
}

impl EmaWeights {
    pub fn new(current: &[f64], decay: f64, warmup: bool) -> Self {
        EmaWeights {
            decay,
            warmup,
            updates: 0,
            shadow: current.to_vec(),
        }
    }

    pub fn effective_decay(&self) -> f64 {
        if self.warmup {
            let t = self.updates as f64;
            self.decay.min((1.0 + t) / (10.0 + t))
        } else {
            self.decay
        }
    }

    pub fn update(&mut self, current: &[f64]) {
        let d = self.effective_decay();
        for (s, &c) in self.shadow.iter_mut().zip(current) {
            *s = d * *s + (1.0 - d) * c;
        }
        self.updates += 1;
    }

    /// Exchanges shadow and live values; applying it twice is a no-op.
    pub fn swap(&mut self, current: &mut [f64]) {
        for (s, c) in self.shadow.iter_mut().zip(current.iter_mut()) {
            std::mem::swap(s, c);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    /// Base learning rate for prior parameters; `None` uses the schedule's.
    pub prior_lr: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub ema: bool,
    pub ema_decay: f64,
    pub ema_warmup: bool,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (and at the end).
    pub checkpoint_every: Option<usize>,
    /// Record wall-clock seconds in the metrics CSV; off keeps it reproducible.
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if let Some(lr) = self.prior_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "prior learning rate {lr} must be positive"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema decay {} outside [0, 1]",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: LrSchedule {
                base_lr: 1e-3,
                decay: 0.999,
                warmup_epochs: 10,
            },
            prior_lr: None,
            batch_size: 64,
            epochs: 10,
            max_steps: None,
            ema: false,
            ema_decay: 0.9999,
            ema_warmup: true,
            seed: 0,
            checkpoint_every: None,
            record_wall_time: false,
        }
    }
}

/// Batch loss in bits per dimension and its gradient over every parameter
/// in store order, using `rounding` in the flow.
pub fn loss_and_gradient(
    model: &FlowModel,
    x: &GridTensor,
    rounding: &RoundingConfig,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    model.check_input(x)?;
    let mut tape = Tape::with_seed(seed);
    let vars = model.store().bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let xv = tape.leaf(model.input_tensor(x, &mut rng));
    let fwd = model.forward_tape(&mut tape, &vars, xv, rounding)?;
    let loss = model.bpd_loss(&mut tape, &fwd, x.batch())?;
    let value = tape.value(loss).item();
    let grads = tape.gradient(loss, &vars)?;
    let mut flat = Vec::with_capacity(model.store().numel(&model.store().indices(None)));
    for (g, p) in grads.iter().zip(model.store().iter()) {
        if let Some(v) = g.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Training(format!("gradient of {} is {v}", p.name)));
        }
        flat.extend_from_slice(g.data());
    }
    Ok((value, flat))
}

/// Loss of a batch under `rounding` without building gradients.
pub fn batch_loss(
    model: &FlowModel,
    x: &GridTensor,
    rounding: &RoundingConfig,
    seed: u64,
) -> Result<f64> {
    model.check_input(x)?;
    let mut tape = Tape::with_seed(seed);
    let vars = model.store().bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let xv = tape.leaf(model.input_tensor(x, &mut rng));
    let fwd = model.forward_tape(&mut tape, &vars, xv, rounding)?;
    let loss = model.bpd_loss(&mut tape, &fwd, x.batch())?;
    Ok(tape.value(loss).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_bpd: f64,
    pub valid_bpd: Option<f64>,
    pub wall_time: Option<f64>,
}

/// Epochs above `bits + DIVERGENCE_MARGIN` bpd count towards divergence.
pub const DIVERGENCE_MARGIN: f64 = 5.0;
/// Consecutive diverged epochs that abort training.
pub const DIVERGENCE_EPOCHS: usize = 3;

pub struct Trainer {
    model: FlowModel,
    config: TrainConfig,
    optimizer: Adamax,
    ema: Option<EmaWeights>,
    /// Base learning rate of each flat parameter element.
    base_lr: Vec<f64>,
    epoch: usize,
    diverged: usize,
    metrics: Option<PathBuf>,
    checkpoints: Option<PathBuf>,
    started: Instant,
}

impl Trainer {
    pub fn new(model: FlowModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let all = model.store().indices(None);
        let flat = model.store().flatten(&all);
        let mut base_lr = Vec::with_capacity(flat.len());
        for p in model.store().iter() {
            let lr = match (p.group, config.prior_lr) {
                (ParamGroup::Prior, Some(lr)) => lr,
                _ => config.schedule.base_lr,
            };
            base_lr.extend(std::iter::repeat_n(lr, p.value.len()));
        }
        let ema = config
            .ema
            .then(|| EmaWeights::new(&flat, config.ema_decay, config.ema_warmup));
        Ok(Trainer {
            optimizer: Adamax::new(flat.len()),
            model,
            config,
            ema,
            base_lr,
            epoch: 0,
            diverged: 0,
            metrics: None,
            checkpoints: None,
            started: Instant::now(),
        })
    }

    /// Appends per-epoch rows to a CSV file, writing the header if new.
    pub fn with_metrics(mut self, path: impl Into<PathBuf>) -> Self {
        self.metrics = Some(path.into());
        self
    }

    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoints = Some(dir.into());
        self
    }

    pub fn model(&self) -> &FlowModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.optimizer.step
    }

    pub fn ema(&self) -> Option<&EmaWeights> {
        self.ema.as_ref()
    }

    /// The model used for evaluation: EMA weights when enabled.
    pub fn eval_model(&self) -> FlowModel {
        let mut m = self.model.clone();
        if let Some(e) = &self.ema {
            let idx = m.store().indices(None);
            m.store_mut()
                .set_flat(&idx, &e.shadow)
                .expect("ema matches store");
        }
        m
    }

    pub fn into_model(self) -> FlowModel {
        self.model
    }

    /// One optimizer step on `batch` at the current epoch's learning rate.
    pub fn step(&mut self, batch: &GridTensor) -> Result<f64> {
        let factor = self.config.schedule.lr_at(self.epoch) / self.config.schedule.base_lr;
        let seed = step_seed(self.config.seed, self.optimizer.step);
        let (loss, grads) = loss_and_gradient(
            &self.model,
            batch,
            &self.model.config().rounding.clone(),
            seed,
        )?;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "loss is {loss} at step {}",
                self.optimizer.step
            )));
        }
        let idx = self.model.store().indices(None);
        let mut flat = self.model.store().flatten(&idx);
        let lr: Vec<f64> = self.base_lr.iter().map(|b| b * factor).collect();
        self.optimizer.step(&mut flat, &grads, &lr)?;
        self.model.store_mut().set_flat(&idx, &flat)?;
        if let Some(e) = &mut self.ema {
            e.update(&flat);
        }
        Ok(loss)
    }

    fn budget_left(&self) -> bool {
        self.config
            .max_steps
            .is_none_or(|m| (self.optimizer.step as usize) < m)
    }

    /// One shuffled pass over `train`; returns the mean batch loss.
    pub fn run_epoch(&mut self, train: &GridTensor) -> Result<f64> {
        let n = train.batch();
        if n == 0 {
            return Err(Error::Usage("empty training set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(self.config.seed, self.epoch));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            if !self.budget_left() {
                break;
            }
            let items: Vec<GridTensor> = chunk
                .iter()
                .map(|&i| train.batch_slice(i, i + 1))
                .collect::<Result<_>>()?;
            let batch = GridTensor::stack(&items)?;
            total += self.step(&batch)? * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(if count == 0 {
            f64::NAN
        } else {
            total / count as f64
        })
    }

    /// Mean bpd of `data` under the evaluation model, in batches.
    pub fn evaluate(&self, data: &GridTensor) -> Result<f64> {
        evaluate_bpd(&self.eval_model(), data, self.config.batch_size.max(1))
    }

    /// Runs the remaining epochs. Stops early when `max_steps` is reached.
    pub fn fit(
        &mut self,
        train: &GridTensor,
        valid: Option<&GridTensor>,
    ) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        while self.epoch < self.config.epochs && self.budget_left() {
            let lr = self.config.schedule.lr_at(self.epoch);
            let train_bpd = self.run_epoch(train)?;
            let valid_bpd = valid.map(|v| self.evaluate(v)).transpose()?;
            let record = EpochRecord {
                epoch: self.epoch,
                lr,
                train_bpd,
                valid_bpd,
                wall_time: self
                    .config
                    .record_wall_time
                    .then(|| self.started.elapsed().as_secs_f64()),
            };
            self.log(&record)?;
            self.epoch += 1;
            let limit = self.model.bits() as f64 + DIVERGENCE_MARGIN;
            if !(train_bpd <= limit) {
                self.diverged += 1;
                if self.diverged >= DIVERGENCE_EPOCHS {
                    return Err(Error::Divergence(format!(
                        "train bpd {train_bpd:.3} above {limit} for {DIVERGENCE_EPOCHS} epochs (epoch {})",
                        record.epoch
                    )));
                }
            } else {
                self.diverged = 0;
            }
            records.push(record);
            if let (Some(dir), Some(every)) = (&self.checkpoints, self.config.checkpoint_every) {
                if every > 0 && self.epoch % every == 0 {
                    self.save_checkpoint(&dir.join(format!("epoch{:05}", self.epoch)))?;
                }
            }
        }
        if let Some(dir) = &self.checkpoints {
            self.save_checkpoint(&dir.join("final"))?;
        }
        Ok(records)
    }

    fn log(&self, r: &EpochRecord) -> Result<()> {
        let Some(path) = &self.metrics else {
            return Ok(());
        };
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "epoch,split,bpd,lr,wall_time")?;
        }
        let wall = r.wall_time.map(|t| format!("{t:.3}")).unwrap_or_default();
        writeln!(f, "{},train,{},{},{}", r.epoch, r.train_bpd, r.lr, wall)?;
        if let Some(v) = r.valid_bpd {
            writeln!(f, "{},valid,{},{},{}", r.epoch, v, r.lr, wall)?;
        }
        Ok(())
    }

    /// Writes `model.idfm` (raw weights) and `state.bin` (optimizer, EMA,
    /// epoch) into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_model(&self.model, &dir.join("model.idfm"))?;
        if self.ema.is_some() {
            save_model(&self.eval_model(), &dir.join("ema.idfm"))?;
        }
        std::fs::write(dir.join("state.bin"), self.state_bytes())?;
        Ok(())
    }

    /// Restores a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn load_checkpoint(dir: &Path, config: TrainConfig) -> Result<Self> {
        let model = load_model(&dir.join("model.idfm"))?;
        let mut t = Trainer::new(model, config)?;
        t.restore_state(&std::fs::read(dir.join("state.bin"))?)?;
        Ok(t)
    }

    fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"IDFO");
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&(self.diverged as u64).to_le_bytes());
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        out.extend_from_slice(&(self.optimizer.m.len() as u64).to_le_bytes());
        for v in self.optimizer.m.iter().chain(&self.optimizer.u) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &self.ema {
            Some(e) => {
                out.push(1);
                out.extend_from_slice(&e.updates.to_le_bytes());
                for v in &e.shadow {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        let sum = checksum8(&out);
        out.extend_from_slice(&sum);
        out
    }

    fn restore_state(&mut self, bytes: &[u8]) -> Result<()> {
        if bytes.len() < 4 || &bytes[..4] != b"IDFO" {
            return Err(Error::Format("not an optimizer state file".into()));
        }
        let body = verify_checksum(bytes, "optimizer state")?;
        let mut r = ByteReader::new(&body[4..], "optimizer state");
        if r.u16()? != 1 {
            return Err(Error::Format("unsupported optimizer state version".into()));
        }
        self.epoch = r.u64()? as usize;
        self.diverged = r.u64()? as usize;
        self.optimizer.step = r.u64()?;
        let n = r.len_u64(16)?;
        if n != self.optimizer.m.len() {
            return Err(Error::ModelMismatch(format!(
                "state has {n} moments, model {}",
                self.optimizer.m.len()
            )));
        }
        for i in 0..n {
            self.optimizer.m[i] = r.f64()?;
        }
        for i in 0..n {
            self.optimizer.u[i] = r.f64()?;
        }
        let has_ema = r.u8()? == 1;
        match (&mut self.ema, has_ema) {
            (Some(e), true) => {
                e.updates = r.u64()?;
                for s in e.shadow.iter_mut() {
                    *s = r.f64()?;
                }
            }
            (None, false) => {}
            _ => {
                return Err(Error::Config(
                    "checkpoint and config disagree about ema".into(),
                ))
            }
        }
        r.finish()
    }
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ step.wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ 0x7261_6e64
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x94d0_49bb_1331_11eb)
        ^ (epoch as u64)
            .wrapping_add(1)
            .wrapping_mul(0x2545_f491_4f6c_dd1d)
}

/// Mean per-image bpd of `data`, evaluated in batches of `batch`.
pub fn evaluate_bpd(model: &FlowModel, data: &GridTensor, batch: usize) -> Result<f64> {
    let n = data.batch();
    if n == 0 {
        return Err(Error::Usage("empty evaluation set".into()));
    }
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        total += model
            .nll_bpd_items(&data.batch_slice(start, end)?, start as u64)?
            .iter()
            .sum::<f64>();
        start = end;
    }
    Ok(total / n as f64)
}

/// Splits off the last `fraction` of `data` for validation.
pub fn split_validation(
    data: &GridTensor,
    fraction: f64,
) -> Result<(GridTensor, Option<GridTensor>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "validation fraction {fraction} outside [0, 1)"
        )));
    }
    let n = data.batch();
    let held = (n as f64 * fraction).round() as usize;
    if held == 0 {
        return Ok((data.clone(), None));
    }
    Ok((
        data.batch_slice(0, n - held)?,
        Some(data.batch_slice(n - held, n)?),
    ))
}

/// Draws `n` uniform random images with the model's shape, for smoke tests.
pub fn random_images(
    shape: [usize; 3],
    bits: u32,
    n: usize,
    rng: &mut impl Rng,
) -> Result<GridTensor> {
    let len = n * shape.iter().product::<usize>();
    GridTensor::new(
        [n, shape[0], shape[1], shape[2]],
        (0..len).map(|_| rng.gen_range(0..1i64 << bits)).collect(),
        bits,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{Mode, ModelConfig};
    use crate::nn::{BackboneSpec, BlockVariant};

    #[test]
    fn adamax_first_step_moves_by_lr() {
        let mut opt = Adamax::new(1);
        let mut p = [0.5];
        opt.step(&mut p, &[1.0], &[0.001]).unwrap();
        // m = 0.1, u = 1, bias = 0.1: step = lr * 0.1 / (0.1 * (1 + 1e-8)).
        assert!((p[0] - (0.5 - 0.001 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adamax_zero_gradient_is_a_no_op() {
        let mut opt = Adamax::new(3);
        let mut p = [1.0, -2.0, 3.0];
        for _ in 0..50 {
            opt.step(&mut p, &[0.0; 3], &[0.1; 3]).unwrap();
        }
        assert_eq!(p, [1.0, -2.0, 3.0]);
    }

    #[test]
    fn adamax_infinity_norm_is_monotone_under_constant_gradient() {
        let mut opt = Adamax::new(1);
        let mut p = [0.0];
        let mut last = 0.0;
        for _ in 0..100 {
            opt.step(&mut p, &[0.7], &[1e-3]).unwrap();
            assert!(opt.u[0] >= last);
            last = opt.u[0];
        }
    }

    #[test]
    fn schedule_values() {
        let s = LrSchedule {
            base_lr: 1e-3,
            decay: 0.999,
            warmup_epochs: 10,
        };
        assert!((s.lr_at(4) - 5e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(20), 1e-3 * 0.999f64.powi(20));
        assert_eq!(s.lr_at(9), 1e-3);
        let idfpp = LrSchedule { base_lr: 2e-3, ..s };
        assert_eq!(idfpp.lr_at(10), 2e-3 * 0.999f64.powi(10));
        assert!((0..5000).all(|e| s.lr_at(e) > 0.0));
    }

    #[test]
    fn ema_limits_and_swap() {
        let init = [1.0, 2.0];
        let mut track = EmaWeights::new(&init, 0.0, false);
        let mut frozen = EmaWeights::new(&init, 1.0, false);
        for k in 0..5 {
            let cur = [k as f64, -(k as f64)];
            track.update(&cur);
            frozen.update(&cur);
            assert_eq!(track.shadow, cur);
            assert_eq!(frozen.shadow, init);
        }
        let mut live = [7.0, 8.0];
        track.swap(&mut live);
        track.swap(&mut live);
        assert_eq!(live, [7.0, 8.0]);
        let warm = EmaWeights::new(&init, 0.9999, true);
        assert!((warm.effective_decay() - 0.1).abs() < 1e-15);
    }

    fn tiny() -> ModelConfig {
        let backbone = BackboneSpec::DenseNet {
            variant: BlockVariant::Idfpp,
            depth: 1,
            channels: 8,
        };
        ModelConfig {
            backbone,
            prior_backbone: backbone,
            height: 4,
            width: 4,
            ..ModelConfig::tiny_idfpp()
        }
    }

    fn data(n: usize) -> GridTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let len = n * 48;
        GridTensor::new(
            [n, 4, 4, 3],
            (0..len)
                .map(|i| ((i % 12) * 20) as i64 + rng.gen_range(0..8))
                .collect(),
            8,
        )
        .unwrap()
    }

    fn config(ema: bool) -> TrainConfig {
        TrainConfig {
            schedule: LrSchedule {
                base_lr: 2e-3,
                decay: 0.999,
                warmup_epochs: 1,
            },
            batch_size: 8,
            epochs: 3,
            ema,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_ema_is_eval_only() {
        let x = data(32);
        let run = |ema| {
            let mut t = Trainer::new(FlowModel::new(tiny()).unwrap(), config(ema)).unwrap();
            let r = t.fit(&x, Some(&x)).unwrap();
            (t.model().clone(), r)
        };
        let (a, ra) = run(false);
        let (b, rb) = run(false);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let (c, rc) = run(true);
        assert_eq!(a, c);
        assert_ne!(ra.last().unwrap().valid_bpd, rc.last().unwrap().valid_bpd);
        assert!(ra.last().unwrap().train_bpd < ra[0].train_bpd);
    }

    #[test]
    fn continuous_loss_drops_quickly() {
        let mut cfg = tiny();
        cfg.mode = Mode::Continuous;
        cfg.rounding = RoundingConfig::CONTINUOUS;
        let x = data(16);
        let mut t = Trainer::new(
            FlowModel::new(cfg).unwrap(),
            TrainConfig {
                epochs: 100,
                max_steps: Some(60),
                batch_size: 16,
                ..config(false)
            },
        )
        .unwrap();
        let before = evaluate_bpd(t.model(), &x, 16).unwrap();
        t.fit(&x, None).unwrap();
        let after = evaluate_bpd(t.model(), &x, 16).unwrap();
        assert!(after < before - 0.1, "{before} -> {after}");
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let x = data(16);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            ema: true,
            epochs: 4,
            ..config(true)
        };
        let mut full = Trainer::new(FlowModel::new(tiny()).unwrap(), cfg.clone()).unwrap();
        full.fit(&x, None).unwrap();
        let mut half = Trainer::new(
            FlowModel::new(tiny()).unwrap(),
            TrainConfig {
                epochs: 2,
                ..cfg.clone()
            },
        )
        .unwrap();
        half.fit(&x, None).unwrap();
        half.save_checkpoint(dir.path()).unwrap();
        let mut resumed = Trainer::load_checkpoint(dir.path(), cfg).unwrap();
        resumed.fit(&x, None).unwrap();
        assert_eq!(resumed.model(), full.model());
        assert_eq!(resumed.ema(), full.ema());
    }

    #[test]
    fn metrics_csv_schema() {
        let x = data(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut t = Trainer::new(
            FlowModel::new(tiny()).unwrap(),
            TrainConfig {
                epochs: 2,
                ..config(false)
            },
        )
        .unwrap()
        .with_metrics(&path);
        t.fit(&x, Some(&x)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,split,bpd,lr,wall_time");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0,train,") && lines[1].ends_with(','));
        assert!(lines[2].starts_with("0,valid,"));
    }

    #[test]
    fn divergence_aborts() {
        let x = data(8);
        let mut t = Trainer::new(
            FlowModel::new(tiny()).unwrap(),
            TrainConfig {
                epochs: 10,
                ..config(false)
            },
        )
        .unwrap();
        // A prior pinned to a far-away mean keeps every epoch above bits + 5.
        let idx = t.model.store().find("top.mu").unwrap();
        t.model.store_mut().get_mut(idx).value.data_mut().fill(-1e6);
        let ls = t.model.store().find("top.log_s").unwrap();
        t.model.store_mut().get_mut(ls).value.data_mut().fill(-20.0);
        t.base_lr.fill(1e-300);
        assert!(matches!(t.fit(&x, None), Err(Error::Divergence(_))));
        assert_eq!(t.epoch(), 3);
    }
}
