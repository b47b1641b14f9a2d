//! Mini-batch AdamW training with patience-based early stopping.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{sigmoid, MBertModel, ModelConfig, Task};
use crate::numerics::{derived_rng, ops::softmax_in_place, AdamW, Matrix, Parameterized};
use crate::tokenizer::TokenizedSequence;

const SHUFFLE_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<training log>", e);
        writeln!(w, "epoch,train_loss,valid_loss").map_err(io)?;
        for r in &self.epochs {
            writeln!(w, "{},{},{}", r.epoch, r.train_loss, r.valid_loss).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Wait,
    Stop,
}

/// Stops once `patience` consecutive epochs fail to beat the best loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if !(loss < b) => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Wait
                }
            }
            _ => {
                self.best = Some((epoch, loss));
                self.since_best = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

/// Fresh model for `cfg`. For regression the head bias starts at the mean
/// training target so early epochs are not spent learning the offset.
pub fn init_model(
    cfg: &ModelConfig,
    vocab_size: usize,
    train_set: &[TokenizedSequence],
) -> Result<MBertModel> {
    let mut model = MBertModel::new(cfg.clone(), vocab_size)?;
    if cfg.task == Task::Real && !train_set.is_empty() {
        let mean = train_set.iter().map(|s| s.label_real).sum::<f64>() / train_set.len() as f64;
        model.set_head_bias(&[mean])?;
    }
    Ok(model)
}

/// Trains with the model's own config, validating on `valid_set`.
pub fn train(
    model: MBertModel,
    train_set: &[TokenizedSequence],
    valid_set: &[TokenizedSequence],
) -> Result<(MBertModel, TrainingLog)> {
    if valid_set.is_empty() {
        return Err(Error::validation("validation split is empty"));
    }
    train_with_validator(model, train_set, |_, m| m.mean_loss(valid_set))
}

/// Like [`train`] but the per-epoch validation loss comes from `validate`,
/// called after each epoch with the 1-based epoch number.
pub fn train_with_validator<F>(
    mut model: MBertModel,
    train_set: &[TokenizedSequence],
    mut validate: F,
) -> Result<(MBertModel, TrainingLog)>
where
    F: FnMut(usize, &MBertModel) -> Result<f64>,
{
    if train_set.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let cfg = model.config().clone();
    let opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Vec<Matrix> = snapshot(&model);
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step: u64 = 0;

    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut derived_rng(cfg.seed, SHUFFLE_STREAM, epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TokenizedSequence> = chunk.iter().map(|&i| &train_set[i]).collect();
            model.zero_grad();
            let l = model.accumulate_batch(&batch, Some((cfg.seed, step)))?;
            opt.step(&mut model);
            loss_sum += l * chunk.len() as f64;
            step += 1;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let valid_loss = validate(epoch, &model)?;
        if !valid_loss.is_finite() || !train_loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
        });
        log::info!("epoch {epoch}: train {train_loss:.5} valid {valid_loss:.5}");
        match stopper.observe(epoch, valid_loss) {
            StopDecision::Improved => best = snapshot(&model),
            StopDecision::Wait => {}
            StopDecision::Stop => {
                log.stopped_early = true;
                break;
            }
        }
    }
    restore(&mut model, best);
    log.best_epoch = stopper.best_epoch().unwrap_or(0);
    model.zero_grad();
    Ok((model, log))
}

fn snapshot(model: &MBertModel) -> Vec<Matrix> {
    model
        .parameters()
        .into_iter()
        .map(|(_, p)| p.value.clone())
        .collect()
}

fn restore(model: &mut MBertModel, values: Vec<Matrix>) {
    for ((_, p), v) in model.parameters_mut().into_iter().zip(values) {
        p.value = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    /// P(LOS > 2 days).
    Binary(Vec<f64>),
    /// Class probabilities per admission.
    Category(Vec<Vec<f64>>),
    /// Predicted days.
    Real(Vec<f64>),
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Binary(v) | Predictions::Real(v) => v.len(),
            Predictions::Category(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Predictions::Binary(_) => Task::Binary,
            Predictions::Category(_) => Task::Category,
            Predictions::Real(_) => Task::Real,
        }
    }
}

/// Eval-mode scores for every sequence.
pub fn predict(model: &MBertModel, data: &[TokenizedSequence]) -> Result<Predictions> {
    let logits = data
        .iter()
        .map(|s| model.forward(s))
        .collect::<Result<Vec<_>>>()?;
    Ok(match model.task() {
        Task::Binary => Predictions::Binary(logits.iter().map(|l| sigmoid(l[0])).collect()),
        Task::Real => Predictions::Real(logits.iter().map(|l| l[0]).collect()),
        Task::Category => Predictions::Category(
            logits
                .into_iter()
                .map(|mut l| {
                    softmax_in_place(&mut l);
                    l
                })
                .collect(),
        ),
    })
}
