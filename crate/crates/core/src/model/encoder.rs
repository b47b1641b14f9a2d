use crate::error::Result;
use crate::numerics::ops::{
    dropout, gelu, gelu_backward, layer_norm, layer_norm_backward, softmax_rows_backward,
    softmax_rows_in_place, LayerNormCache, LAYER_NORM_EPS,
};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{normal_matrix, Matrix, Parameter};

pub(crate) const MASKED_SCORE: f64 = -1e9;

/// Post-LN transformer block: self-attention, residual, layer-norm, then a
/// gelu feed-forward, residual, layer-norm.
///
/// The key projection has no bias: a bias on keys shifts every score in a
/// softmax row by the same amount and so never affects the output.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub(crate) n_heads: usize,
    pub(crate) wq: Parameter,
    pub(crate) bq: Parameter,
    pub(crate) wk: Parameter,
    pub(crate) wv: Parameter,
    pub(crate) bv: Parameter,
    pub(crate) wo: Parameter,
    pub(crate) bo: Parameter,
    pub(crate) ln1_gain: Parameter,
    pub(crate) ln1_bias: Parameter,
    pub(crate) w1: Parameter,
    pub(crate) b1: Parameter,
    pub(crate) w2: Parameter,
    pub(crate) b2: Parameter,
    pub(crate) ln2_gain: Parameter,
    pub(crate) ln2_bias: Parameter,
}

pub(crate) struct HeadCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Matrix,
    dropped: Option<(Matrix, Matrix)>, // (mask, probs after dropout)
}

pub(crate) struct LayerCache {
    x: Matrix,
    query_rows: Option<Vec<usize>>,
    heads: Vec<HeadCache>,
    context: Matrix,
    ln1: LayerNormCache,
    h1: Matrix,
    ff_pre: Matrix,
    ff_act: Matrix,
    ln2: LayerNormCache,
}

fn param(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Parameter {
    Parameter::new(normal_matrix(rows, cols, 0.02, rng), true)
}

fn zeros(cols: usize) -> Parameter {
    Parameter::new(Matrix::zeros(1, cols), false)
}

fn ones(cols: usize) -> Parameter {
    Parameter::new(Matrix::filled(1, cols, 1.0), false)
}

impl EncoderLayer {
    pub fn new(hidden: usize, intermediate: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            n_heads,
            wq: param(hidden, hidden, rng),
            bq: zeros(hidden),
            wk: param(hidden, hidden, rng),
            wv: param(hidden, hidden, rng),
            bv: zeros(hidden),
            wo: param(hidden, hidden, rng),
            bo: zeros(hidden),
            ln1_gain: ones(hidden),
            ln1_bias: zeros(hidden),
            w1: param(hidden, intermediate, rng),
            b1: zeros(intermediate),
            w2: param(intermediate, hidden, rng),
            b2: zeros(hidden),
            ln2_gain: ones(hidden),
            ln2_bias: zeros(hidden),
        }
    }

    pub(crate) fn params(&self) -> Vec<(&'static str, &Parameter)> {
        vec![
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<(&'static str, &mut Parameter)> {
        vec![
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
        ]
    }

    fn hidden(&self) -> usize {
        self.wq.value.rows()
    }

    /// `x` is `len × hidden`; `key_bias[j]` is added to every score against key
    /// `j` (0 or [`MASKED_SCORE`]). With `query_rows` set, only those rows are
    /// computed as queries and the output has one row per entry.
    pub(crate) fn forward(
        &self,
        x: &Matrix,
        key_bias: &[f64],
        query_rows: Option<&[usize]>,
        attention_dropout: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Matrix, LayerCache)> {
        let d = self.hidden();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let xq = match query_rows {
            Some(r) => x.select_rows(r),
            None => x.clone(),
        };
        let mut q = xq.matmul(&self.wq.value)?;
        q.add_row_bias(&self.bq.value)?;
        let k = x.matmul(&self.wk.value)?;
        let mut v = x.matmul(&self.wv.value)?;
        v.add_row_bias(&self.bv.value)?;

        let mut rng = rng;
        let train = rng.is_some() && attention_dropout > 0.0;
        let mut context = Matrix::zeros(xq.rows(), d);
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = q.column_block(h * dh, dh);
            let kh = k.column_block(h * dh, dh);
            let vh = v.column_block(h * dh, dh);
            let mut scores = qh.matmul_t(&kh)?;
            for r in 0..scores.rows() {
                for (s, &b) in scores.row_mut(r).iter_mut().zip(key_bias) {
                    *s = *s * scale + b;
                }
            }
            softmax_rows_in_place(&mut scores);
            let probs = scores;
            let (ctx, dropped) = if train {
                let r = rng.as_deref_mut().expect("train mode has an rng");
                let (pd, mask) = dropout(&probs, attention_dropout, r, true)?;
                let mask = mask.expect("p > 0 in training");
                (pd.matmul(&vh)?, Some((mask, pd)))
            } else {
                (probs.matmul(&vh)?, None)
            };
            context.set_column_block(h * dh, &ctx);
            heads.push(HeadCache {
                q: qh,
                k: kh,
                v: vh,
                probs,
                dropped,
            });
        }

        let mut attn = context.matmul(&self.wo.value)?;
        attn.add_row_bias(&self.bo.value)?;
        attn.add_assign(&xq)?;
        let (h1, ln1) = layer_norm(
            &attn,
            &self.ln1_gain.value,
            &self.ln1_bias.value,
            LAYER_NORM_EPS,
        )?;

        let mut ff_pre = h1.matmul(&self.w1.value)?;
        ff_pre.add_row_bias(&self.b1.value)?;
        let ff_act = gelu(&ff_pre);
        let mut ff_out = ff_act.matmul(&self.w2.value)?;
        ff_out.add_row_bias(&self.b2.value)?;
        ff_out.add_assign(&h1)?;
        let (out, ln2) = layer_norm(
            &ff_out,
            &self.ln2_gain.value,
            &self.ln2_bias.value,
            LAYER_NORM_EPS,
        )?;

        Ok((
            out,
            LayerCache {
                x: x.clone(),
                query_rows: query_rows.map(<[usize]>::to_vec),
                heads,
                context,
                ln1,
                h1,
                ff_pre,
                ff_act,
                ln2,
            },
        ))
    }

    /// Accumulates parameter gradients and returns `d loss / d x` (full `x` shape).
    pub(crate) fn backward(&mut self, dout: &Matrix, cache: &LayerCache) -> Result<Matrix> {
        let d = self.hidden();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let dz2 = layer_norm_backward(
            dout,
            &self.ln2_gain.value,
            &cache.ln2,
            &mut self.ln2_gain.grad,
            &mut self.ln2_bias.grad,
        );
        cache.ff_act.t_matmul_acc(&dz2, &mut self.w2.grad)?;
        dz2.sum_rows_acc(self.b2.grad.as_mut_slice());
        let dact = dz2.matmul_t(&self.w2.value)?;
        let dpre = gelu_backward(&cache.ff_pre, &dact);
        cache.h1.t_matmul_acc(&dpre, &mut self.w1.grad)?;
        dpre.sum_rows_acc(self.b1.grad.as_mut_slice());
        let mut dh1 = dpre.matmul_t(&self.w1.value)?;
        dh1.add_assign(&dz2)?;

        let dz1 = layer_norm_backward(
            &dh1,
            &self.ln1_gain.value,
            &cache.ln1,
            &mut self.ln1_gain.grad,
            &mut self.ln1_bias.grad,
        );
        cache.context.t_matmul_acc(&dz1, &mut self.wo.grad)?;
        dz1.sum_rows_acc(self.bo.grad.as_mut_slice());
        let dcontext = dz1.matmul_t(&self.wo.value)?;

        let n_q = dz1.rows();
        let n_k = cache.x.rows();
        let mut dq = Matrix::zeros(n_q, d);
        let mut dk = Matrix::zeros(n_k, d);
        let mut dv = Matrix::zeros(n_k, d);
        for (h, hc) in cache.heads.iter().enumerate() {
            let dctx = dcontext.column_block(h * dh, dh);
            let (probs_used, mut dprobs) = match &hc.dropped {
                Some((mask, pd)) => {
                    let dpd = dctx.matmul_t(&hc.v)?;
                    (pd, dpd.hadamard(mask)?)
                }
                None => (&hc.probs, dctx.matmul_t(&hc.v)?),
            };
            dv.set_column_block(h * dh, &probs_used.t_matmul(&dctx)?);
            dprobs = softmax_rows_backward(&hc.probs, &dprobs);
            dprobs.scale(scale);
            dq.set_column_block(h * dh, &dprobs.matmul(&hc.k)?);
            dk.set_column_block(h * dh, &dprobs.t_matmul(&hc.q)?);
        }

        let xq = match &cache.query_rows {
            Some(r) => cache.x.select_rows(r),
            None => cache.x.clone(),
        };
        xq.t_matmul_acc(&dq, &mut self.wq.grad)?;
        dq.sum_rows_acc(self.bq.grad.as_mut_slice());
        cache.x.t_matmul_acc(&dk, &mut self.wk.grad)?;
        cache.x.t_matmul_acc(&dv, &mut self.wv.grad)?;
        dv.sum_rows_acc(self.bv.grad.as_mut_slice());

        let mut dx = dk.matmul_t(&self.wk.value)?;
        dx.add_assign(&dv.matmul_t(&self.wv.value)?)?;
        let mut dxq = dq.matmul_t(&self.wq.value)?;
        dxq.add_assign(&dz1)?;
        match &cache.query_rows {
            Some(rows) => {
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &g) in dx.row_mut(r).iter_mut().zip(dxq.row(i)) {
                        *o += g;
                    }
                }
            }
            None => dx.add_assign(&dxq)?,
        }
        Ok(dx)
    }
}

/// Applies dropout with `p` when an rng is supplied; returns the mask for backward.
pub(crate) fn maybe_dropout(
    x: &Matrix,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Matrix, Option<Matrix>)> {
    match rng {
        Some(r) if p > 0.0 => dropout(x, p, r, true),
        _ => Ok((x.clone(), None)),
    }
}
