//! Training and evaluation loops.

pub mod adamw;
pub mod data;
pub mod haze;
pub mod schedule;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::loss::{Loss, LossConfig};
use crate::metrics;
use crate::model::{checkpoint, DehazeSnn, ModelError};
use crate::tensor::{Graph, TensorError};
use adamw::{adamw_step, AdamWConfig, GroupLr, OptimState};
pub use data::PairedDataset;
use schedule::Schedule;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite loss at step {step}: first non-finite tensor is {culprit}")]
    NonFinite { step: u64, culprit: String },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

pub const CHECKPOINT_FILE: &str = "latest.dsnn";
pub const LOG_FILE: &str = "metrics.ndjson";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_lif: f64,
    pub final_lr: f64,
    pub adamw: AdamWConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Evaluate every this many steps (and after the last); 0 disables.
    pub eval_every: u64,
    /// Where `latest.dsnn` and `metrics.ndjson` go.
    pub checkpoint_dir: Option<PathBuf>,
    /// Save every this many steps (and after the last); 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 5,
            lr_main: 1e-4,
            lr_lif: 5e-5,
            final_lr: schedule::FINAL_LR,
            adamw: AdamWConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            eval_every: 0,
            checkpoint_dir: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 {
            return bad("optim.steps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("optim.batch_size must be positive".into());
        }
        for (k, v) in [("optim.lr_main", self.lr_main), ("optim.lr_lif", self.lr_lif)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{k} must be a non-negative number, got {v}"));
            }
        }
        for (k, v) in [("optim.beta1", self.adamw.beta1), ("optim.beta2", self.adamw.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.adamw.weight_decay >= 0.0) {
            return bad(format!("optim.weight_decay must be non-negative, got {}", self.adamw.weight_decay));
        }
        self.loss.validate().map_err(TrainError::Config)
    }

    fn schedules(&self) -> (Schedule, Schedule) {
        let mk = |base| Schedule { base_lr: base, final_lr: self.final_lr, total_steps: self.steps };
        (mk(self.lr_main), mk(self.lr_lif))
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr_main: f64,
    pub lr_lif: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

/// Stream for everything random at one step, independent of history.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Dataset indices of the batch at `step`: consecutive slices of a fresh
/// seeded permutation per epoch.
pub fn batch_indices(len: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut cache: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|j| {
            let global = step * batch as u64 + j;
            let epoch = global / len as u64;
            if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..len).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
                rng.set_stream(epoch);
                perm.shuffle(&mut rng);
                cache = Some((epoch, perm));
            }
            cache.as_ref().unwrap().1[(global % len as u64) as usize]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub stem: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Full-image inference and scoring of every pair.
pub fn evaluate(model: &DehazeSnn<f32>, ds: &PairedDataset) -> Result<EvalReport> {
    let mut images = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let (hazy, gt) = ds.pair(i)?;
        let pred = model.infer(&hazy)?;
        images.push(ImageScore { stem: ds.stems[i].clone(), psnr: metrics::psnr(&pred, &gt)?, ssim: metrics::ssim(&pred, &gt)? });
    }
    let n = images.len().max(1) as f64;
    let mean_psnr = images.iter().map(|s| s.psnr).sum::<f64>() / n;
    let mean_ssim = images.iter().map(|s| s.ssim).sum::<f64>() / n;
    Ok(EvalReport { images, mean_psnr, mean_ssim })
}

/// Model, optimizer state and loss bundled for step-wise training.
pub struct Trainer {
    pub model: DehazeSnn<f32>,
    pub state: OptimState<f32>,
    pub opts: TrainOptions,
    pub log: Vec<LogRecord>,
    loss: Loss<f32>,
    log_file: Option<File>,
}

impl Trainer {
    pub fn new(model: DehazeSnn<f32>, opts: TrainOptions) -> Result<Self> {
        let state = OptimState::new(&model.params);
        Self::with_state(model, state, opts)
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(path: &Path, opts: TrainOptions) -> Result<Self> {
        let (model, state) = checkpoint::load::<f32>(path)?;
        let state = state.ok_or_else(|| TrainError::Config(format!("{} has no optimizer state", path.display())))?;
        Self::with_state(model, state, opts)
    }

    pub fn with_state(model: DehazeSnn<f32>, state: OptimState<f32>, opts: TrainOptions) -> Result<Self> {
        opts.validate()?;
        let loss = Loss::new(opts.loss.clone()).map_err(TrainError::Config)?;
        let log_file = match &opts.checkpoint_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?)
            }
            None => None,
        };
        Ok(Self { model, state, opts, log: Vec::new(), loss, log_file })
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.opts.steps
    }

    /// Learning rates used at `step`.
    pub fn lr_at(&self, step: u64) -> Result<GroupLr> {
        let (m, l) = self.opts.schedules();
        Ok(GroupLr { main: m.lr(step).map_err(TrainError::Config)?, lif: l.lr(step).map_err(TrainError::Config)? })
    }

    /// Full-batch loss of the current weights without updating them.
    pub fn loss_on(&self, hazy: &crate::tensor::Tensor<f32>, gt: &crate::tensor::Tensor<f32>) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, false);
        let x = Graph::constant(hazy.clone());
        let y = self.model.forward(&mut g, &p, &x, None)?;
        let l = self.loss.compute(&mut g, &y, &Graph::constant(gt.clone()))?;
        Ok(l.value().item()? as f64)
    }

    /// Samples a batch, runs forward and backward, applies AdamW.
    pub fn step(&mut self, ds: &PairedDataset) -> Result<LogRecord> {
        let step = self.state.step;
        let lr = self.lr_at(step)?;
        let mut rng = step_rng(self.opts.seed, step);
        let idx = batch_indices(ds.len(), self.opts.batch_size, self.opts.seed, step);
        let (hazy, gt) = ds.load_batch(&idx, &mut rng)?;

        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, true);
        let x = Graph::constant(hazy);
        let drop_rng: Option<&mut dyn rand::RngCore> =
            if self.model.config.drop_path_rate > 0.0 { Some(&mut rng) } else { None };
        let y = self.model.forward(&mut g, &p, &x, drop_rng)?;
        let loss = self.loss.compute(&mut g, &y, &Graph::constant(gt))?;
        let loss_value = loss.value().item()? as f64;
        if !loss_value.is_finite() {
            let culprit = match self.model.params.iter().find(|q| !q.value.is_finite()) {
                Some(q) => format!("parameter {}", q.name),
                None => match g.first_non_finite() {
                    Some((id, kind)) => format!("output of {} (node {})", kind.name(), id.0),
                    None => "the loss".into(),
                },
            };
            return Err(TrainError::NonFinite { step, culprit });
        }
        g.backward(&loss)?;
        let grads: Vec<_> = p.vars().iter().map(|v| g.grad(v)).collect();
        adamw_step(&mut self.model.params, &grads, &mut self.state, lr, &self.opts.adamw)?;
        drop(grads);
        Ok(LogRecord { step, loss: loss_value, lr_main: lr.main, lr_lif: lr.lif, psnr: None, ssim: None })
    }

    fn append_log(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(f) = &mut self.log_file {
            let line = serde_json::to_string(&rec).map_err(|e| TrainError::Config(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        self.log.push(rec);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model, Some(&self.state))?;
        Ok(())
    }

    /// Runs at most `max_steps` more steps (all remaining if `None`),
    /// evaluating and checkpointing on schedule.
    pub fn run(&mut self, ds: &PairedDataset, eval: Option<&PairedDataset>, max_steps: Option<u64>) -> Result<()> {
        let mut budget = max_steps.unwrap_or(u64::MAX);
        while !self.done() && budget > 0 {
            budget -= 1;
            let mut rec = self.step(ds)?;
            let finished = self.state.step;
            let last = self.done();
            let every = |k: u64| k > 0 && finished.is_multiple_of(k);
            if let Some(ev) = eval {
                if every(self.opts.eval_every) || (last && self.opts.eval_every > 0) {
                    let r = evaluate(&self.model, ev)?;
                    rec.psnr = Some(r.mean_psnr);
                    rec.ssim = Some(r.mean_ssim);
                }
            }
            self.append_log(rec)?;
            if let Some(dir) = self.opts.checkpoint_dir.clone() {
                if last || every(self.opts.checkpoint_every) {
                    self.save(&dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
        Ok(())
    }
}

/// Trains `model` to completion and returns the trained model and its log.
pub fn train(
    model: DehazeSnn<f32>,
    ds: &PairedDataset,
    eval: Option<&PairedDataset>,
    opts: TrainOptions,
) -> Result<(DehazeSnn<f32>, Vec<LogRecord>)> {
    let mut t = Trainer::new(model, opts)?;
    t.run(ds, eval, None)?;
    Ok((t.model, t.log))
}
