//! The sequence classifier: summed token, position, age and sex embeddings,
//! a post-LN encoder stack, and a linear head on the `[CLS]` row.

mod checkpoint;
mod encoder;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, CHECKPOINT_FORMAT,
};
pub use encoder::EncoderLayer;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_model::{Labels, AGE_BUCKETS, LOS_CLIP_DAYS};
use crate::numerics::{derived_rng, normal_matrix, Matrix, Parameter, Parameterized};
use crate::tokenizer::{TokenizedSequence, MAX_SEQ_LEN, PAD_ID};
use encoder::{maybe_dropout, LayerCache, MASKED_SCORE};

/// Rows in the frozen sinusoid table. Position ids are not renumbered after
/// truncation, so this must exceed the longest untruncated sequence.
pub const POSITION_TABLE_ROWS: usize = 2048;
pub const N_SEX_IDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// LOS > 2 days.
    Binary,
    /// LOS < 2, 2..=7, > 7 days.
    Category,
    /// Clipped LOS in days.
    Real,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Binary, Task::Category, Task::Real];

    pub fn output_dim(self) -> usize {
        match self {
            Task::Category => 3,
            Task::Binary | Task::Real => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Binary => "binary",
            Task::Category => "category",
            Task::Real => "real",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub intermediate_dim: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    pub attention_dropout_p: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub task: Task,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Six layers of width 288 with eight heads.
    pub fn full() -> Self {
        Self {
            n_layers: 6,
            hidden_dim: 288,
            intermediate_dim: 288,
            n_heads: 8,
            max_len: MAX_SEQ_LEN,
            dropout_p: 0.1,
            attention_dropout_p: 0.1,
            weight_decay: 0.003,
            lr: 1e-5,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            task: Task::Binary,
            seed: 42,
        }
    }

    /// Two layers of width 64 with four heads, sized for a single CPU core.
    pub fn small() -> Self {
        Self {
            n_layers: 2,
            hidden_dim: 64,
            intermediate_dim: 64,
            n_heads: 4,
            lr: 1e-3,
            max_epochs: 30,
            patience: 5,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation(format!("model config: {m}")));
        if self.n_layers == 0 || self.hidden_dim == 0 || self.intermediate_dim == 0 {
            return bad("layer count and widths must be positive".into());
        }
        if self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.hidden_dim < 2 {
            return bad("hidden_dim must be at least 2".into());
        }
        for (name, p) in [
            ("dropout_p", self.dropout_p),
            ("attention_dropout_p", self.attention_dropout_p),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} is outside [0, 1)"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive".into());
        }
        if self.max_len < crate::tokenizer::PREFIX_LEN {
            return bad(format!(
                "max_len {} cannot hold the [CLS] + history prefix",
                self.max_len
            ));
        }
        Ok(())
    }
}

/// Vaswani sinusoid: even columns `sin(p / 10000^(2i/d))`, odd columns `cos`.
pub fn sinusoid_table(rows: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, dim);
    for p in 0..rows {
        let row = m.row_mut(p);
        for i in (0..dim).step_by(2) {
            let angle = p as f64 / 10000f64.powf(i as f64 / dim as f64);
            row[i] = angle.sin();
            if i + 1 < dim {
                row[i + 1] = angle.cos();
            }
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct MBertModel {
    config: ModelConfig,
    token_embedding: Parameter,
    age_embedding: Parameter,
    sex_embedding: Parameter,
    position_table: Matrix,
    layers: Vec<EncoderLayer>,
    head_weight: Parameter,
    head_bias: Parameter,
}

/// Intermediates of one training forward pass.
pub struct ForwardCache {
    token_ids: Vec<u32>,
    age_bucket: usize,
    sex_id: usize,
    layers: Vec<LayerCache>,
    cls: Matrix,
    output_mask: Option<Matrix>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss value and `d loss / d logits` for one sample.
pub fn loss_and_grad(logits: &[f64], labels: &Labels, task: Task) -> Result<(f64, Vec<f64>)> {
    if logits.len() != task.output_dim() {
        return Err(Error::validation(format!(
            "{task} task expects {} logits, got {}",
            task.output_dim(),
            logits.len()
        )));
    }
    Ok(match task {
        Task::Binary => {
            let z = logits[0];
            let y = f64::from(labels.binary);
            let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            (loss, vec![sigmoid(z) - y])
        }
        Task::Category => {
            let y = usize::from(labels.category);
            if y >= 3 {
                return Err(Error::validation(format!(
                    "category label {y} out of range"
                )));
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            let lse = max + sum.ln();
            let grad = logits
                .iter()
                .enumerate()
                .map(|(i, z)| (z - lse).exp() - if i == y { 1.0 } else { 0.0 })
                .collect();
            (lse - logits[y], grad)
        }
        Task::Real => {
            let y = labels.real.min(LOS_CLIP_DAYS);
            let r = logits[0] - y;
            (r * r, vec![2.0 * r])
        }
    })
}

pub fn loss(logits: &[f64], labels: &Labels, task: Task) -> Result<f64> {
    loss_and_grad(logits, labels, task).map(|(l, _)| l)
}

impl MBertModel {
    pub fn new(config: ModelConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        if vocab_size < crate::tokenizer::RESERVED.len() {
            return Err(Error::validation(
                "vocabulary must hold the reserved tokens",
            ));
        }
        let d = config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let token_embedding = Parameter::new(normal_matrix(vocab_size, d, 0.02, &mut rng), true);
        let age_embedding = Parameter::new(normal_matrix(AGE_BUCKETS, d, 0.02, &mut rng), true);
        let sex_embedding = Parameter::new(normal_matrix(N_SEX_IDS, d, 0.02, &mut rng), true);
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer::new(d, config.intermediate_dim, config.n_heads, &mut rng))
            .collect();
        let k = config.task.output_dim();
        let head_weight = Parameter::new(normal_matrix(d, k, 0.02, &mut rng), true);
        let head_bias = Parameter::new(Matrix::zeros(1, k), false);
        Ok(Self {
            position_table: sinusoid_table(POSITION_TABLE_ROWS, d),
            config,
            token_embedding,
            age_embedding,
            sex_embedding,
            layers,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.value.rows()
    }

    pub fn position_table(&self) -> &Matrix {
        &self.position_table
    }

    pub fn head_bias(&self) -> &[f64] {
        self.head_bias.value.as_slice()
    }

    pub fn set_head_bias(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.head_bias.len() {
            return Err(Error::validation("head bias length mismatch"));
        }
        self.head_bias.value.as_mut_slice().copy_from_slice(values);
        Ok(())
    }

    fn check_ids(&self, seq: &TokenizedSequence) -> Result<()> {
        let fail = |m: String| {
            Err(Error::validation(format!(
                "sequence {}: {m}",
                seq.admission_id
            )))
        };
        if seq.token_ids.is_empty() || seq.token_ids.len() != seq.position_ids.len() {
            return fail("empty sequence or mismatched id lengths".into());
        }
        if let Some(&t) = seq
            .token_ids
            .iter()
            .find(|&&t| t as usize >= self.vocab_size())
        {
            return fail(format!(
                "token id {t} outside vocabulary of {}",
                self.vocab_size()
            ));
        }
        if let Some(&p) = seq
            .position_ids
            .iter()
            .find(|&&p| p as usize >= POSITION_TABLE_ROWS)
        {
            return fail(format!(
                "position id {p} outside table of {POSITION_TABLE_ROWS}"
            ));
        }
        if usize::from(seq.age_bucket) >= AGE_BUCKETS || usize::from(seq.sex_id) >= N_SEX_IDS {
            return fail("age bucket or sex id out of range".into());
        }
        Ok(())
    }

    /// `len × hidden` input: token + position + age + sex rows.
    pub fn embed(&self, seq: &TokenizedSequence) -> Result<Matrix> {
        self.check_ids(seq)?;
        let d = self.config.hidden_dim;
        let age = self.age_embedding.value.row(usize::from(seq.age_bucket));
        let sex = self.sex_embedding.value.row(usize::from(seq.sex_id));
        let mut x = Matrix::zeros(seq.len(), d);
        for (i, (&t, &p)) in seq.token_ids.iter().zip(&seq.position_ids).enumerate() {
            let tok = self.token_embedding.value.row(t as usize);
            let pe = self.position_table.row(p as usize);
            for (j, o) in x.row_mut(i).iter_mut().enumerate() {
                *o = tok[j] + pe[j] + age[j] + sex[j];
            }
        }
        Ok(x)
    }

    fn key_bias(seq: &TokenizedSequence) -> Vec<f64> {
        seq.token_ids
            .iter()
            .map(|&t| if t == PAD_ID { MASKED_SCORE } else { 0.0 })
            .collect()
    }

    /// Runs the encoder; only the `[CLS]` row is computed in the last layer.
    /// `rng` switches on dropout.
    fn forward_inner(
        &self,
        seq: &TokenizedSequence,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let mut x = self.embed(seq)?;
        let key_bias = Self::key_bias(seq);
        let last = self.layers.len() - 1;
        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let rows: Option<&[usize]> = if l == last { Some(&[0]) } else { None };
            let (out, cache) = layer.forward(
                &x,
                &key_bias,
                rows,
                self.config.attention_dropout_p,
                rng.as_deref_mut(),
            )?;
            x = out;
            caches.push(cache);
        }
        let (cls, output_mask) = maybe_dropout(&x, self.config.dropout_p, rng)?;
        let mut logits = cls.matmul(&self.head_weight.value)?;
        logits.add_row_bias(&self.head_bias.value)?;
        let logits = logits.into_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model logits"));
        }
        Ok((
            logits,
            ForwardCache {
                token_ids: seq.token_ids.clone(),
                age_bucket: usize::from(seq.age_bucket),
                sex_id: usize::from(seq.sex_id),
                layers: caches,
                cls,
                output_mask,
            },
        ))
    }

    /// Eval-mode logits (dropout off).
    pub fn forward(&self, seq: &TokenizedSequence) -> Result<Vec<f64>> {
        self.forward_inner(seq, None).map(|(l, _)| l)
    }

    /// Encoder output for every position (eval mode), `len × hidden`.
    pub fn encode(&self, seq: &TokenizedSequence) -> Result<Matrix> {
        let mut x = self.embed(seq)?;
        let key_bias = Self::key_bias(seq);
        for layer in &self.layers {
            x = layer.forward(&x, &key_bias, None, 0.0, None)?.0;
        }
        Ok(x)
    }

    /// Forward pass keeping intermediates; dropout is active when `rng` is given.
    pub fn forward_train(
        &self,
        seq: &TokenizedSequence,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        self.forward_inner(seq, rng)
    }

    /// Accumulates `d loss / d θ` into every parameter's gradient, given
    /// `d loss / d logits`.
    pub fn backward(&mut self, cache: &ForwardCache, dlogits: &[f64]) -> Result<()> {
        let k = self.head_bias.len();
        let dlog = Matrix::from_vec(1, k, dlogits.to_vec())?;
        cache.cls.t_matmul_acc(&dlog, &mut self.head_weight.grad)?;
        dlog.sum_rows_acc(self.head_bias.grad.as_mut_slice());
        let mut dx = dlog.matmul_t(&self.head_weight.value)?;
        if let Some(mask) = &cache.output_mask {
            dx = dx.hadamard(mask)?;
        }
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers).rev() {
            dx = layer.backward(&dx, lc)?;
        }
        let d = self.config.hidden_dim;
        let dage = &mut self.age_embedding.grad.as_mut_slice()
            [cache.age_bucket * d..(cache.age_bucket + 1) * d];
        for r in 0..dx.rows() {
            for (o, g) in dage.iter_mut().zip(dx.row(r)) {
                *o += g;
            }
        }
        let dsex =
            &mut self.sex_embedding.grad.as_mut_slice()[cache.sex_id * d..(cache.sex_id + 1) * d];
        for r in 0..dx.rows() {
            for (o, g) in dsex.iter_mut().zip(dx.row(r)) {
                *o += g;
            }
        }
        for (r, &t) in cache.token_ids.iter().enumerate() {
            for (o, g) in self
                .token_embedding
                .grad
                .row_mut(t as usize)
                .iter_mut()
                .zip(dx.row(r))
            {
                *o += g;
            }
        }
        Ok(())
    }

    /// Mean loss over `batch`, accumulating gradients of the mean into the
    /// parameters. With `dropout = Some((seed, stream))`, sample `i` draws its
    /// dropout masks from `derived_rng(seed, stream, i)`.
    pub fn accumulate_batch(
        &mut self,
        batch: &[&TokenizedSequence],
        dropout: Option<(u64, u64)>,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let task = self.config.task;
        let mut total = 0.0;
        for (i, seq) in batch.iter().enumerate() {
            let mut rng = dropout.map(|(seed, stream)| derived_rng(seed, stream, i as u64));
            let (logits, cache) = self.forward_inner(seq, rng.as_mut())?;
            let (l, mut g) = loss_and_grad(&logits, &seq.labels(), task)?;
            total += l;
            g.iter_mut().for_each(|v| *v *= scale);
            self.backward(&cache, &g)?;
        }
        Ok(total * scale)
    }

    /// Eval-mode mean loss.
    pub fn mean_loss(&self, data: &[TokenizedSequence]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::validation("mean loss over an empty dataset"));
        }
        let mut total = 0.0;
        for s in data {
            total += loss(&self.forward(s)?, &s.labels(), self.config.task)?;
        }
        Ok(total / data.len() as f64)
    }

    pub fn save(&self, dir: &Path, vocab_hash: &str) -> Result<()> {
        save_checkpoint(self, dir, vocab_hash)
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        vocab_size: usize,
        tensors: Vec<(String, Matrix)>,
    ) -> Result<Self> {
        let mut model = Self::new(config, vocab_size)?;
        let mut params = model.parameters_mut();
        if params.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                tensors.len(),
                params.len()
            )));
        }
        for ((name, p), (tname, m)) in params.iter_mut().zip(tensors) {
            if *name != tname || p.shape() != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {tname} {:?} does not match parameter {name} {:?}",
                    m.shape(),
                    p.shape()
                )));
            }
            p.value = m;
        }
        Ok(model)
    }
}

impl Parameterized for MBertModel {
    fn parameters(&self) -> Vec<(String, &Parameter)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("age_embedding".to_string(), &self.age_embedding),
            ("sex_embedding".to_string(), &self.sex_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (n, p) in layer.params() {
                out.push((format!("layer{l}.{n}"), p));
            }
        }
        out.push(("head_weight".to_string(), &self.head_weight));
        out.push(("head_bias".to_string(), &self.head_bias));
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("age_embedding".to_string(), &mut self.age_embedding),
            ("sex_embedding".to_string(), &mut self.sex_embedding),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (n, p) in layer.params_mut() {
                out.push((format!("layer{l}.{n}"), p));
            }
        }
        out.push(("head_weight".to_string(), &mut self.head_weight));
        out.push(("head_bias".to_string(), &mut self.head_bias));
        out
    }
}

#[cfg(test)]
mod tests;
