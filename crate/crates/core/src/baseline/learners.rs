use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_model::Labels;
use crate::model::{loss_and_grad, sigmoid, Task};
use crate::numerics::ops::{gelu, gelu_backward, softmax_in_place};
use crate::numerics::{derived_rng, normal_matrix, AdamW, Matrix, Parameter, Parameterized};
use crate::train::{EarlyStopping, EpochRecord, Predictions, StopDecision, TrainingLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    /// Logistic (or softmax, or linear for the real task) regression.
    Logreg,
    /// One hidden layer of gelu units.
    Mlp,
}

impl LearnerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LearnerKind::Logreg => "logreg",
            LearnerKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    pub task: Task,
    pub hidden_units: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl LearnerConfig {
    pub fn new(kind: LearnerKind, task: Task, seed: u64) -> Self {
        Self {
            kind,
            task,
            hidden_units: 64,
            lr: 3e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    kind: LearnerKind,
    task: Task,
    /// Output layer for logreg, hidden layer for the MLP.
    w1: Parameter,
    b1: Parameter,
    /// Output layer of the MLP.
    out: Option<(Parameter, Parameter)>,
}

struct Activations {
    hidden_pre: Option<Matrix>,
    hidden: Option<Matrix>,
    logits: Matrix,
}

impl TabularModel {
    pub fn new(cfg: &LearnerConfig, n_features: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let k = cfg.task.output_dim();
        match cfg.kind {
            LearnerKind::Logreg => Self {
                kind: cfg.kind,
                task: cfg.task,
                w1: Parameter::new(Matrix::zeros(n_features, k), false),
                b1: Parameter::new(Matrix::zeros(1, k), false),
                out: None,
            },
            LearnerKind::Mlp => {
                let h = cfg.hidden_units;
                let w1 = normal_matrix(
                    n_features,
                    h,
                    (1.0 / n_features.max(1) as f64).sqrt(),
                    &mut rng,
                );
                let w2 = normal_matrix(h, k, (1.0 / h as f64).sqrt(), &mut rng);
                Self {
                    kind: cfg.kind,
                    task: cfg.task,
                    w1: Parameter::new(w1, false),
                    b1: Parameter::new(Matrix::zeros(1, h), false),
                    out: Some((
                        Parameter::new(w2, false),
                        Parameter::new(Matrix::zeros(1, k), false),
                    )),
                }
            }
        }
    }

    pub fn kind(&self) -> LearnerKind {
        self.kind
    }

    pub fn task(&self) -> Task {
        self.task
    }

    fn output_bias_mut(&mut self) -> &mut Parameter {
        match &mut self.out {
            Some((_, b)) => b,
            None => &mut self.b1,
        }
    }

    fn activations(&self, x: &Matrix) -> Result<Activations> {
        let mut z1 = x.matmul(&self.w1.value)?;
        z1.add_row_bias(&self.b1.value)?;
        match &self.out {
            None => Ok(Activations {
                hidden_pre: None,
                hidden: None,
                logits: z1,
            }),
            Some((w2, b2)) => {
                let h = gelu(&z1);
                let mut logits = h.matmul(&w2.value)?;
                logits.add_row_bias(&b2.value)?;
                Ok(Activations {
                    hidden_pre: Some(z1),
                    hidden: Some(h),
                    logits,
                })
            }
        }
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.activations(x)?.logits)
    }

    /// Mean loss over the rows; gradients of that mean are accumulated when `grad` is set.
    fn batch_loss(&mut self, x: &Matrix, labels: &[Labels], grad: bool) -> Result<f64> {
        let act = self.activations(x)?;
        let n = x.rows();
        let k = self.task.output_dim();
        let mut dlogits = Matrix::zeros(n, k);
        let mut total = 0.0;
        for (i, l) in labels.iter().enumerate() {
            let (loss, g) = loss_and_grad(act.logits.row(i), l, self.task)?;
            total += loss;
            for (o, v) in dlogits.row_mut(i).iter_mut().zip(g) {
                *o = v / n as f64;
            }
        }
        if grad {
            match (&mut self.out, act.hidden, act.hidden_pre) {
                (None, _, _) => {
                    x.t_matmul_acc(&dlogits, &mut self.w1.grad)?;
                    dlogits.sum_rows_acc(self.b1.grad.as_mut_slice());
                }
                (Some((w2, b2)), Some(h), Some(pre)) => {
                    h.t_matmul_acc(&dlogits, &mut w2.grad)?;
                    dlogits.sum_rows_acc(b2.grad.as_mut_slice());
                    let dh = dlogits.matmul_t(&w2.value)?;
                    let dpre = gelu_backward(&pre, &dh);
                    x.t_matmul_acc(&dpre, &mut self.w1.grad)?;
                    dpre.sum_rows_acc(self.b1.grad.as_mut_slice());
                }
                _ => unreachable!("mlp activations carry the hidden layer"),
            }
        }
        Ok(total / n as f64)
    }

    pub fn mean_loss(&self, x: &Matrix, labels: &[Labels]) -> Result<f64> {
        self.clone().batch_loss(x, labels, false)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Predictions> {
        let logits = self.logits(x)?;
        let rows = (0..logits.rows()).map(|i| logits.row(i).to_vec());
        Ok(match self.task {
            Task::Binary => Predictions::Binary(rows.map(|r| sigmoid(r[0])).collect()),
            Task::Real => Predictions::Real(rows.map(|r| r[0]).collect()),
            Task::Category => Predictions::Category(
                rows.map(|mut r| {
                    softmax_in_place(&mut r);
                    r
                })
                .collect(),
            ),
        })
    }

    /// Adam on mini-batches with the same patience rule as the sequence model.
    pub fn fit(
        cfg: &LearnerConfig,
        x_train: &Matrix,
        y_train: &[Labels],
        x_valid: &Matrix,
        y_valid: &[Labels],
    ) -> Result<(Self, TrainingLog)> {
        if x_train.rows() == 0 || x_train.rows() != y_train.len() || x_valid.rows() != y_valid.len()
        {
            return Err(Error::validation(
                "baseline training data is empty or mislabeled",
            ));
        }
        if y_valid.is_empty() {
            return Err(Error::validation("baseline validation split is empty"));
        }
        let mut model = Self::new(cfg, x_train.cols());
        if cfg.task == Task::Real {
            let mean = y_train.iter().map(|l| l.real).sum::<f64>() / y_train.len() as f64;
            model.output_bias_mut().value.as_mut_slice()[0] = mean;
        }
        let opt = AdamW::new(cfg.lr, 0.0);
        let mut stopper = EarlyStopping::new(cfg.patience);
        let mut best = model.clone();
        let mut log = TrainingLog::default();
        let mut order: Vec<usize> = (0..x_train.rows()).collect();
        for epoch in 1..=cfg.max_epochs {
            order.sort_unstable();
            order.shuffle(&mut derived_rng(cfg.seed, 0, epoch as u64));
            let mut loss_sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let xb = x_train.select_rows(chunk);
                let yb: Vec<Labels> = chunk.iter().map(|&i| y_train[i]).collect();
                model.zero_grad();
                loss_sum += model.batch_loss(&xb, &yb, true)? * chunk.len() as f64;
                opt.step(&mut model);
            }
            let valid_loss = model.mean_loss(x_valid, y_valid)?;
            log.epochs.push(EpochRecord {
                epoch,
                train_loss: loss_sum / x_train.rows() as f64,
                valid_loss,
            });
            match stopper.observe(epoch, valid_loss) {
                StopDecision::Improved => best = model.clone(),
                StopDecision::Wait => {}
                StopDecision::Stop => {
                    log.stopped_early = true;
                    break;
                }
            }
        }
        log.best_epoch = stopper.best_epoch().unwrap_or(0);
        best.zero_grad();
        Ok((best, log))
    }
}

impl Parameterized for TabularModel {
    fn parameters(&self) -> Vec<(String, &Parameter)> {
        let mut v = vec![("w1".to_string(), &self.w1), ("b1".to_string(), &self.b1)];
        if let Some((w2, b2)) = &self.out {
            v.push(("w2".to_string(), w2));
            v.push(("b2".to_string(), b2));
        }
        v
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        let mut v = vec![
            ("w1".to_string(), &mut self.w1),
            ("b1".to_string(), &mut self.b1),
        ];
        if let Some((w2, b2)) = &mut self.out {
            v.push(("w2".to_string(), w2));
            v.push(("b2".to_string(), b2));
        }
        v
    }
}
