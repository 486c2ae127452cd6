//! Scheduled training with validation early stopping.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{adam_step, AdamConfig, AdamState, Mat, Tape};
use crate::error::{FlozError, Result};
use crate::flow::FlowModel;
use crate::losses::{self, LossSchedule, LossTerms, Weights, ZetaBatch};
use crate::sampleio::SampleSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub max_epochs: usize,
    /// Epochs without improvement of validation L1 before stopping.
    pub patience: usize,
    /// Stop once the spread of validation `log ζ` inside the latent ball
    /// falls below this many nats.
    pub tolerance: Option<f64>,
    pub batch_size: usize,
    /// Sets smaller than this are trained as a single batch.
    pub full_batch_below: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            max_epochs: 500,
            patience: 200,
            tolerance: None,
            batch_size: 1000,
            full_batch_below: 2000,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(FlozError::Configuration("max_epochs must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(FlozError::Configuration("patience must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(FlozError::Configuration("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FlozError::Configuration(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(t) = self.tolerance {
            if !(t > 0.0) {
                return Err(FlozError::Configuration(format!(
                    "tolerance must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }

    /// Contiguous batch ranges over `n` shuffled samples. Sizes differ by at
    /// most one, so no batch drops below 2 samples when `n ≥ 2`.
    fn batch_bounds(&self, n: usize) -> Vec<(usize, usize)> {
        let n_batches = if n < self.full_batch_below {
            1
        } else {
            n.div_ceil(self.batch_size)
        };
        let base = n / n_batches;
        let extra = n % n_batches;
        let mut out = Vec::with_capacity(n_batches);
        let mut start = 0;
        for b in 0..n_batches {
            let len = base + usize::from(b < extra);
            out.push((start, start + len));
            start += len;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub weights: Weights,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_l1: f64,
    pub best: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    Tolerance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| FlozError::Schema(format!("history csv: {e}"));
        out.write_record([
            "epoch",
            "w1",
            "w2",
            "w3a",
            "w3b",
            "train_loss",
            "val_loss",
            "val_l1",
            "best",
        ])
        .map_err(io)?;
        for r in &self.records {
            let [a, b, c, d] = r.weights.0;
            out.write_record([
                r.epoch.to_string(),
                a.to_string(),
                b.to_string(),
                c.to_string(),
                d.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
                r.val_l1.to_string(),
                u8::from(r.best).to_string(),
            ])
            .map_err(io)?;
        }
        out.flush()
            .map_err(|e| FlozError::Schema(format!("history csv: {e}")))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| FlozError::io(path, e))?;
        self.write_csv(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over a monitored value that should decrease.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, value: f64) -> Verdict {
        if value < self.best {
            self.best = value;
            self.stale = 0;
            Verdict::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }
}

/// Active loss terms evaluated from plain `log q` / `log ζ` values.
fn terms_from_values(log_q: &[f64], log_zeta: &[f64], w: &Weights) -> Result<LossTerms> {
    let mut tape = Tape::new();
    let z = ZetaBatch {
        log_zeta: tape.leaf(Mat::column(log_zeta)),
        len: log_zeta.len(),
    };
    let mut t = LossTerms {
        l1: -log_q.iter().sum::<f64>() / log_q.len() as f64,
        ..LossTerms::default()
    };
    let [_, w2, w3a, w3b] = w.0;
    if w2 > 0.0 {
        let v = losses::loss_l2(&mut tape, z)?;
        t.l2 = tape.scalar(v);
    }
    if w3a > 0.0 {
        let v = losses::loss_l3a(&mut tape, z)?;
        t.l3a = tape.scalar(v);
    }
    if w3b > 0.0 {
        let v = losses::loss_l3b(&mut tape, z)?;
        t.l3b = tape.scalar(v);
    }
    Ok(t)
}

struct Validation<'a> {
    set: &'a SampleSet,
    bounds: Vec<(usize, usize)>,
}

impl Validation<'_> {
    /// `(mixed loss, L1, ball spread of log ζ)`.
    fn evaluate(&self, model: &FlowModel, w: &Weights, want_spread: bool) -> Result<(f64, f64, f64)> {
        let (y, log_det) = model.inverse_map(self.set.params())?;
        let log_q = crate::flow::latent_log_density(&y, &log_det);
        let log_zeta: Vec<f64> = self
            .set
            .log_p_hat()
            .iter()
            .zip(&log_q)
            .map(|(p, q)| p - q)
            .collect();
        let n = log_q.len() as f64;
        let l1 = -log_q.iter().sum::<f64>() / n;

        let mut mixed = 0.0;
        for &(s, e) in &self.bounds {
            let t = terms_from_values(&log_q[s..e], &log_zeta[s..e], w)?;
            mixed += t.mix(w) * (e - s) as f64;
        }
        mixed /= n;

        let mut spread = f64::INFINITY;
        if want_spread {
            let delta2 = model.dim() as f64;
            let inside: Vec<f64> = (0..y.rows())
                .filter(|&r| y.row_slice(r).iter().map(|v| v * v).sum::<f64>() < delta2)
                .map(|r| log_zeta[r])
                .collect();
            if inside.len() >= 2 {
                let m = inside.iter().sum::<f64>() / inside.len() as f64;
                let v = inside.iter().map(|z| (z - m).powi(2)).sum::<f64>() / inside.len() as f64;
                spread = v.sqrt();
            }
        }
        Ok((mixed, l1, spread))
    }
}

fn at_batch(err: FlozError, epoch: usize, batch: usize) -> FlozError {
    match err {
        FlozError::NumericalOverflow { .. } => FlozError::NonFiniteLoss { epoch, batch },
        other => other,
    }
}

/// Trains `model` in place of a copy and returns the parameters of the
/// epoch with the lowest validation L1.
pub fn train(
    model: &FlowModel,
    train_set: &SampleSet,
    val_set: &SampleSet,
    cfg: &TrainerConfig,
    sched: &LossSchedule,
) -> Result<(FlowModel, TrainingHistory)> {
    cfg.validate()?;
    sched.validate()?;
    if val_set.is_empty() {
        return Err(FlozError::Precondition("empty validation set".into()));
    }
    if train_set.dim() != model.dim() || val_set.dim() != model.dim() {
        return Err(FlozError::Precondition(format!(
            "flow dimension {} does not match sample dimension {}",
            model.dim(),
            train_set.dim()
        )));
    }

    let mut model = model.clone();
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let bounds = cfg.batch_bounds(train_set.len());
    let validation = Validation {
        set: val_set,
        bounds: cfg.batch_bounds(val_set.len()),
    };

    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params().to_vec();
    let mut best_epoch = 0;
    let mut records = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..cfg.max_epochs {
        let w = sched.weights(epoch);
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for (b, &(s, e)) in bounds.iter().enumerate() {
            let idx = &order[s..e];
            let x = train_set.params().select_rows(idx);
            let lp: Vec<f64> = idx.iter().map(|&i| train_set.log_p_hat()[i]).collect();

            let mut tape = Tape::new();
            let vars = model.register_params(&mut tape);
            let (loss, _) = losses::mixed_loss(&mut tape, &model, &vars, &x, &lp, &w, false)
                .map_err(|err| at_batch(err, epoch + 1, b))?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(FlozError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b,
                });
            }
            let grads = tape
                .backward(loss)
                .map_err(|err| at_batch(err, epoch + 1, b))?
                .into_param_grads();
            drop(tape);
            adam_step(model.params_mut(), &grads, &mut adam)?;
            train_loss += value * (e - s) as f64;
        }
        train_loss /= train_set.len() as f64;

        let (val_loss, val_l1, spread) = validation
            .evaluate(&model, &w, cfg.tolerance.is_some())
            .map_err(|err| at_batch(err, epoch + 1, usize::MAX))?;
        if !val_l1.is_finite() {
            return Err(FlozError::NonFiniteLoss {
                epoch: epoch + 1,
                batch: usize::MAX,
            });
        }
        records.push(EpochRecord {
            epoch: epoch + 1,
            weights: w,
            train_loss,
            val_loss,
            val_l1,
            best: false,
        });

        let verdict = stopper.observe(val_l1);
        if verdict == Verdict::Improved {
            best_params.clone_from_slice(model.params());
            best_epoch = epoch + 1;
        }
        if verdict == Verdict::Stop {
            stop_reason = StopReason::Patience;
            break;
        }
        if cfg.tolerance.is_some_and(|tol| spread < tol) {
            stop_reason = StopReason::Tolerance;
            break;
        }
    }

    if let Some(r) = records.iter_mut().find(|r| r.epoch == best_epoch) {
        r.best = true;
    }
    model.set_params(best_params)?;
    Ok((
        model,
        TrainingHistory {
            records,
            best_epoch,
            stop_reason,
        },
    ))
}
