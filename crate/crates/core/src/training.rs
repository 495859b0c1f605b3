//! Optimization loop: Adam with milestone decay, deep supervision,
//! append-only JSONL logging and resumable checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, Batch, Prefetcher};
use crate::error::{CheckpointError, Error, Result};
use crate::losses::{loss_terms, LossConfig, LossKind};
use crate::metrics;
use crate::networks::{dpenet_forward, init_params, read_checkpoint, write_checkpoint, CheckpointContents, DpeNetParams, NetworkConfig};
use crate::ops::{Ops, Tape};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patch: usize,
    pub lr0: f64,
    pub decay: f64,
    /// Decay points as fractions of `epochs`.
    pub milestones: Vec<f64>,
    pub loss: LossKind,
    pub loss_config: LossConfig,
    /// Also apply the loss to the coarse output.
    pub deep_supervision: bool,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Evaluate the held-out pairs every this many epochs; 0 disables.
    pub eval_every: usize,
    /// Epochs of batches prepared ahead on a worker thread; 0 disables.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 18,
            patch: 128,
            lr0: 1e-3,
            decay: 0.2,
            milestones: vec![0.65, 0.75, 0.9],
            loss: LossKind::Hybrid,
            loss_config: LossConfig::default(),
            deep_supervision: true,
            seed: 0,
            adam: AdamConfig::default(),
            checkpoint_every: 10,
            eval_every: 0,
            prefetch: 0,
        }
    }
}

impl TrainConfig {
    /// Milestones in epochs, `round(fraction * epochs)`.
    pub fn milestone_epochs(&self) -> Vec<usize> {
        self.milestones
            .iter()
            .map(|f| (f * self.epochs as f64).round() as usize)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::config(format!("training.{field}"), msg));
        if self.epochs == 0 {
            return err("epochs", "must be >= 1".into());
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be >= 1".into());
        }
        if self.patch == 0 {
            return err("patch", "must be >= 1".into());
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return err("lr0", format!("must be finite and >= 0, got {}", self.lr0));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return err("decay", format!("must lie in (0, 1], got {}", self.decay));
        }
        // Rounded epochs may coincide on short runs; their decays then stack.
        let m = &self.milestones;
        if m.iter().any(|f| !(*f > 0.0 && *f < 1.0)) || m.windows(2).any(|w| w[0] >= w[1]) {
            return err("milestones", format!("fractions must be strictly increasing in (0, 1), got {m:?}"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return err("adam", "betas must lie in [0, 1) and epsilon be > 0".into());
        }
        self.loss_config.validate()
    }
}

/// Learning rate during 0-indexed `epoch`: `lr0 * decay^k`, with `k` the
/// number of milestones at or before `epoch`. Epoch 130 is the first one
/// after 130 completed epochs, so it already runs at the decayed rate.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = cfg.milestone_epochs().iter().filter(|&&m| m <= epoch).count();
    // Dividing by (1/decay)^k keeps 1e-3 / 5^k exact for the default decay.
    cfg.lr0 / (1.0 / cfg.decay).powi(k as i32)
}

/// Adam moments, aligned with `DpeNetParams::named_tensors`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &DpeNetParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .named_tensors()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One Adam update of every parameter with learning rate `lr`.
    pub fn update(&mut self, params: &mut DpeNetParams<T>, grads: &[Tensor<T>], lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::one() - T::lit(cfg.beta1.powi(t));
        let c2 = T::one() - T::lit(cfg.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(cfg.epsilon));
        let params = params.named_tensors_mut();
        for (i, (_, p)) in params.into_iter().enumerate() {
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// One logged optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Weighted contribution of each term, keyed `<output>.<term>`; they
    /// sum to `loss`.
    pub components: BTreeMap<String, f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub epoch: usize,
    pub step: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub coarse_psnr_db: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalSnapshot>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Eval(&'a EvalSnapshot),
}

/// Forward, loss and gradients for one batch. Returns the loss record
/// (step and epoch left at zero) and one gradient per parameter.
pub fn loss_and_grads<T: Real>(
    params: &DpeNetParams<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<(f64, BTreeMap<String, f64>, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let x = tape.input(batch.0.clone());
    let y = tape.input(batch.1.clone());
    let (s_c, s) = dpenet_forward(&mut tape, &x, params)?;
    let mut outputs = vec![("s", s)];
    if cfg.deep_supervision && params.drnet.is_some() {
        outputs.push(("s_c", s_c));
    }
    let mut weighted = Vec::new();
    let mut bias = T::zero();
    let mut named = Vec::new();
    for (out, v) in &outputs {
        for term in loss_terms(&mut tape, cfg.loss, v, &y, &cfg.loss_config)? {
            bias += term.offset;
            named.push((format!("{out}.{}", term.name), term.value.clone(), term.weight, term.offset));
            weighted.push((term.value, term.weight));
        }
    }
    let total = tape.affine(&weighted, bias)?;
    let loss = tape.scalar(&total).as_f64();
    let components = named
        .iter()
        .map(|(n, v, w, o)| (n.clone(), (*o + *w * tape.scalar(v)).as_f64()))
        .collect();
    let grads = tape.backward(total);
    let grads = params
        .named_tensors()
        .into_iter()
        .map(|(_, p)| grads.of_param(p).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((loss, components, grads))
}

/// One Adam step on `batch`. Aborts on a non-finite loss before touching
/// the parameters.
pub fn train_step<T: Real>(
    params: &mut DpeNetParams<T>,
    state: &mut AdamState<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepRecord> {
    let start = Instant::now();
    let (loss, components, grads) = loss_and_grads(params, batch, cfg)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step as usize + 1,
            epoch: 0,
            lr,
            components: format!("{components:?}"),
        });
    }
    state.update(params, &grads, lr, &cfg.adam);
    Ok(StepRecord {
        step: state.step as usize,
        epoch: 0,
        lr,
        loss,
        components,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Owns the parameters and optimizer state of one run.
pub struct Trainer<T> {
    pub network: NetworkConfig,
    pub config: TrainConfig,
    pub params: DpeNetParams<T>,
    pub adam: AdamState<T>,
    /// Next epoch to run.
    pub epoch: usize,
    pub log: TrainLog,
    run_dir: Option<PathBuf>,
}

impl<T: Real> Trainer<T> {
    /// Fresh run; parameters drawn from `config.seed`.
    pub fn new(network: NetworkConfig, config: TrainConfig) -> Result<Self> {
        network.validate()?;
        config.validate()?;
        let params = init_params(&network, config.seed);
        Ok(Self::with_params(network, config, params))
    }

    pub fn with_params(network: NetworkConfig, config: TrainConfig, params: DpeNetParams<T>) -> Self {
        let adam = AdamState::new(&params);
        Trainer {
            network,
            config,
            params,
            adam,
            epoch: 0,
            log: TrainLog::default(),
            run_dir: None,
        }
    }

    /// Persist logs and checkpoints under `dir`.
    pub fn with_run_dir(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
        self.run_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn run_dir(&self) -> Option<&Path> {
        self.run_dir.as_deref()
    }

    pub fn step(&self) -> usize {
        self.adam.step as usize
    }

    /// Runs the remaining epochs over `pairs`, scoring `eval_pairs` at the
    /// configured cadence.
    pub fn fit(&mut self, pairs: &[(Tensor<T>, Tensor<T>)], eval_pairs: &[(Tensor<T>, Tensor<T>)]) -> Result<()> {
        self.fit_until(pairs, eval_pairs, self.config.epochs)
    }

    /// Like [`Trainer::fit`] but stops before epoch `stop`.
    pub fn fit_until(
        &mut self,
        pairs: &[(Tensor<T>, Tensor<T>)],
        eval_pairs: &[(Tensor<T>, Tensor<T>)],
        stop: usize,
    ) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::config("training.dataset", "no training pairs"));
        }
        let stop = stop.min(self.config.epochs);
        let cfg = &self.config;
        let prefetch = (cfg.prefetch > 0 && self.epoch < stop).then(|| {
            Prefetcher::spawn(
                Arc::new(pairs.to_vec()),
                self.epoch..stop,
                cfg.prefetch,
                cfg.batch_size,
                cfg.patch,
                cfg.seed,
            )
        });
        while self.epoch < stop {
            let epoch = self.epoch;
            let batches = match &prefetch {
                Some(p) => p.next_epoch(epoch)?,
                None => epoch_batches(pairs, epoch, self.config.batch_size, self.config.patch, self.config.seed)?,
            };
            let lr = lr_at(epoch, &self.config);
            for batch in &batches {
                let mut record = train_step(&mut self.params, &mut self.adam, batch, &self.config, lr).map_err(
                    |e| match e {
                        Error::NonFiniteLoss { step, lr, components, .. } => Error::NonFiniteLoss {
                            step,
                            epoch,
                            lr,
                            components,
                        },
                        e => e,
                    },
                )?;
                record.epoch = epoch;
                self.append_log(&LogLine::Step(&record))?;
                self.log.steps.push(record);
            }
            self.epoch += 1;
            let recent = &self.log.steps[self.log.steps.len() - batches.len()..];
            let mean = recent.iter().map(|r| r.loss).sum::<f64>() / recent.len().max(1) as f64;
            log::info!("epoch {}/{} step {} lr {lr:e} loss {mean:.6}", self.epoch, self.config.epochs, self.step());
            let every = self.config.eval_every;
            if every > 0 && !eval_pairs.is_empty() && (self.epoch % every == 0 || self.epoch == self.config.epochs) {
                let snap = self.evaluate(eval_pairs)?;
                log::info!("eval epoch {}: psnr {:.3} dB ssim {:.4}", snap.epoch, snap.psnr_db, snap.ssim);
                self.append_log(&LogLine::Eval(&snap))?;
                self.log.evals.push(snap);
            }
            let every = self.config.checkpoint_every;
            if self.run_dir.is_some() && ((every > 0 && self.epoch % every == 0) || self.epoch == self.config.epochs) {
                self.save_checkpoint()?;
            }
        }
        Ok(())
    }

    /// Mean PSNR/SSIM of the final output over full images.
    pub fn evaluate(&self, pairs: &[(Tensor<T>, Tensor<T>)]) -> Result<EvalSnapshot> {
        let snapshot = self.params.clone();
        let (mut psnr, mut ssim, mut coarse) = (0.0, 0.0, 0.0);
        for (x, y) in pairs {
            let (s_c, s) = snapshot.infer(x)?;
            psnr += metrics::psnr(&s, y)?;
            ssim += metrics::ssim_metric(&s, y)?;
            coarse += metrics::psnr(&s_c, y)?;
        }
        let n = pairs.len() as f64;
        Ok(EvalSnapshot {
            epoch: self.epoch,
            step: self.step(),
            psnr_db: psnr / n,
            ssim: ssim / n,
            coarse_psnr_db: coarse / n,
        })
    }

    fn append_log(&self, line: &LogLine) -> Result<()> {
        let Some(dir) = &self.run_dir else { return Ok(()) };
        let path = dir.join(LOG_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let text = serde_json::to_string(line).expect("log lines serialize");
        writeln!(f, "{text}").map_err(|e| Error::io(&path, e))
    }

    pub fn checkpoint_contents(&self) -> CheckpointContents<T> {
        let mut extra = BTreeMap::new();
        for (i, (name, _)) in self.params.named_tensors().into_iter().enumerate() {
            extra.insert(format!("adam.m.{name}"), self.adam.m[i].clone());
            extra.insert(format!("adam.v.{name}"), self.adam.v[i].clone());
        }
        let mut metadata = toml::Table::new();
        metadata.insert("epochs_completed".into(), (self.epoch as i64).into());
        metadata.insert("step".into(), (self.adam.step as i64).into());
        let train = toml::Table::try_from(&self.config).expect("train config serializes");
        metadata.insert("training".into(), train.into());
        CheckpointContents {
            config: self.network.clone(),
            params: self.params.clone(),
            extra,
            metadata,
        }
    }

    /// Writes `epoch_NNNN.ckpt` and `last.ckpt` in the run directory.
    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let dir = self
            .run_dir
            .as_ref()
            .ok_or_else(|| Error::config("training.run_dir", "no run directory set"))?
            .join(CHECKPOINT_DIR);
        let contents = self.checkpoint_contents();
        let path = dir.join(format!("epoch_{:04}.ckpt", self.epoch));
        write_checkpoint(&path, &contents)?;
        write_checkpoint(&dir.join(LAST_CHECKPOINT), &contents)?;
        Ok(path)
    }

    /// Restores a run from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(path: &Path) -> Result<Self> {
        let c = read_checkpoint::<T>(path)?;
        let header = |msg: &str| Error::from(CheckpointError::Header(msg.to_string()));
        let epoch = c
            .metadata
            .get("epochs_completed")
            .and_then(|v| v.as_integer())
            .ok_or_else(|| header("missing epochs_completed"))? as usize;
        let step = c
            .metadata
            .get("step")
            .and_then(|v| v.as_integer())
            .ok_or_else(|| header("missing step"))? as u64;
        let config: TrainConfig = c
            .metadata
            .get("training")
            .cloned()
            .ok_or_else(|| header("missing training config"))?
            .try_into()
            .map_err(|e: toml::de::Error| header(&e.to_string()))?;
        let mut adam = AdamState::new(&c.params);
        adam.step = step;
        for (i, (name, _)) in c.params.named_tensors().into_iter().enumerate() {
            for (kind, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let key = format!("adam.{kind}.{name}");
                let t = c.extra.get(&key).ok_or_else(|| header(&format!("missing {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(CheckpointError::ManifestMismatch(format!("{key} has shape {:?}", t.shape())).into());
                }
                *slot = t.clone();
            }
        }
        let mut trainer = Self::with_params(c.config, config, c.params);
        trainer.adam = adam;
        trainer.epoch = epoch;
        if let Some(dir) = path.parent().and_then(|p| p.parent()).filter(|d| d.join(LOG_FILE).exists()) {
            trainer.run_dir = Some(dir.to_path_buf());
        }
        Ok(trainer)
    }
}

/// Trains from scratch and returns the final parameters and log.
pub fn fit<T: Real>(
    pairs: &[(Tensor<T>, Tensor<T>)],
    network: &NetworkConfig,
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(DpeNetParams<T>, TrainLog)> {
    let mut trainer = Trainer::new(network.clone(), config.clone())?;
    if let Some(dir) = run_dir {
        trainer = trainer.with_run_dir(dir)?;
    }
    trainer.fit(pairs, &[])?;
    Ok((trainer.params, trainer.log))
}
