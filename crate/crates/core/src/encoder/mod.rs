//! A small bidirectional transformer encoder with hand-written backward pass.
//!
//! Token, position and segment embeddings are summed and layer-normalized,
//! then passed through post-LN transformer blocks (multi-head self-attention
//! and a GELU feed-forward). The final-layer state at position 0 (`[CLS]`) is
//! the sequence representation. Two linear heads sit on top of it: `g1` for
//! the contrastive projection and `g2` for the ranking score.
//!
//! Padding positions are removed before any computation, which is exactly
//! equivalent to masking them as attention keys. In the last block only the
//! `[CLS]` row is computed as a query.

mod checkpoint;
mod gradcheck;
mod params;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::config::{self, KeyValueConfig};
use crate::error::{Error, Result};
use crate::objectives::{column_sums, sigmoid};
use crate::session::TokenSequence;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, GroupError, GRAD_CHECK_INIT_STD, GRAD_CHECK_TOLERANCE};
pub use params::{decays, EncoderParams, LayerParams, INIT_STD};

const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults: 64-d, 2 layers, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: crate::session::DEFAULT_MAX_LEN,
            vocab_size,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 8 {
            return Err(Error::Config(format!("max_len {} must be >= 8", self.max_len)));
        }
        if self.d_ff == 0 || self.vocab_size < crate::session::RESERVED.len() {
            return Err(Error::Config("d_ff and vocab_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

// ---------------------------------------------------------------------------
// elementwise pieces

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gamma: &Array2<f64>, beta: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row *= *inv;
    }
    let y = &xhat * gamma + beta;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gamma: &Array2<f64>,
    d_gamma: &mut Array2<f64>,
    d_beta: &mut Array2<f64>,
) -> Array2<f64> {
    *d_gamma += &column_sums(&(dy * &cache.xhat));
    *d_beta += &column_sums(dy);
    let d = dy.ncols() as f64;
    let mut dx = dy * gamma;
    for ((mut row, xh), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.dot(&xh) / d;
        row.zip_mut_with(&xh, |g, &h| *g = inv * (*g - mean_d - h * mean_dx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn affine(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + b
}

fn all_finite(m: &Array2<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

// ---------------------------------------------------------------------------
// forward

struct LayerTrace {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// attention probabilities per head, `rows x L`
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln1: LnCache,
    y1: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
    ln2: LnCache,
}

struct SeqTrace {
    ids: Vec<u32>,
    positions: Vec<u32>,
    segments: Vec<u8>,
    emb_ln: LnCache,
    layers: Vec<LayerTrace>,
    /// scaled keep-mask applied to the `[CLS]` representation
    dropout: Option<Array1<f64>>,
}

/// Activations cached by [`EncoderParams::forward`] for the backward pass.
pub struct ForwardTrace {
    seqs: Vec<SeqTrace>,
    d_model: usize,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.seqs.len()
    }

    /// Attention probabilities of `layer`/`head` for sequence `index`, over
    /// the non-padding positions only.
    pub fn attention(&self, index: usize, layer: usize, head: usize) -> Option<&Array2<f64>> {
        self.seqs.get(index)?.layers.get(layer)?.probs.get(head)
    }

    /// Number of non-padding tokens of sequence `index`.
    pub fn real_len(&self, index: usize) -> Option<usize> {
        self.seqs.get(index).map(|s| s.ids.len())
    }
}

impl EncoderParams {
    /// Encodes `batch` and returns the `[CLS]` representations (`batch x
    /// d_model`) with the trace needed by [`EncoderParams::backward`].
    /// Passing a random source enables dropout on the representation.
    pub fn forward(
        &self,
        batch: &[TokenSequence],
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<(Array2<f64>, ForwardTrace)> {
        let d = self.config.d_model;
        let mut out = Array2::zeros((batch.len(), d));
        let mut seqs = Vec::with_capacity(batch.len());
        for (b, seq) in batch.iter().enumerate() {
            let (cls, mut trace) = self.forward_one(seq)?;
            let mut cls = cls;
            if let Some(rng) = dropout.as_deref_mut() {
                let p = self.config.dropout_rate;
                if p > 0.0 {
                    let keep = 1.0 / (1.0 - p);
                    let mask = Array1::from_shape_fn(d, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
                    cls *= &mask;
                    trace.dropout = Some(mask);
                }
            }
            out.row_mut(b).assign(&cls);
            seqs.push(trace);
        }
        Ok((out, ForwardTrace { seqs, d_model: d }))
    }

    fn forward_one(&self, seq: &TokenSequence) -> Result<(Array1<f64>, SeqTrace)> {
        let cfg = &self.config;
        if seq.ids.len() != seq.segments.len()
            || seq.ids.len() != seq.positions.len()
            || seq.ids.len() != seq.attn_mask.len()
        {
            return Err(Error::Data("token sequence fields differ in length".into()));
        }
        if seq.ids.len() > cfg.max_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds max_len {}",
                seq.ids.len(),
                cfg.max_len
            )));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        for i in 0..seq.ids.len() {
            if seq.attn_mask[i] == 0 {
                continue;
            }
            let id = seq.ids[i];
            if id as usize >= cfg.vocab_size {
                return Err(Error::Data(format!("token id {id} out of range for vocab {}", cfg.vocab_size)));
            }
            if seq.positions[i] as usize >= cfg.max_len || seq.segments[i] > 1 {
                return Err(Error::Data(format!("bad position/segment at index {i}")));
            }
            ids.push(id);
            positions.push(seq.positions[i]);
            segments.push(seq.segments[i]);
        }
        if ids.is_empty() || seq.attn_mask[0] == 0 {
            return Err(Error::Data("sequence has no attended first token".into()));
        }
        let len = ids.len();
        let d = cfg.d_model;
        let mut emb = Array2::zeros((len, d));
        for (t, mut row) in emb.rows_mut().into_iter().enumerate() {
            row.assign(&self.tok_emb.row(ids[t] as usize));
            row += &self.pos_emb.row(positions[t] as usize);
            row += &self.seg_emb.row(segments[t] as usize);
        }
        let (mut x, emb_ln) = layer_norm(&emb, &self.emb_ln_g, &self.emb_ln_b);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, layer) in self.layers.iter().enumerate() {
            let rows = if l + 1 == cfg.n_layers { 1 } else { len };
            let (next, trace) = self.layer_forward(layer, x, rows);
            if !all_finite(&next) {
                return Err(Error::Numerical(format!("non-finite activation in layer {l}")));
            }
            layers.push(trace);
            x = next;
        }
        let cls = x.row(0).to_owned();
        Ok((
            cls,
            SeqTrace {
                ids,
                positions,
                segments,
                emb_ln,
                layers,
                dropout: None,
            },
        ))
    }

    fn layer_forward(&self, p: &LayerParams, x: Array2<f64>, rows: usize) -> (Array2<f64>, LayerTrace) {
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let xq = x.slice(s![..rows, ..]);
        let q = affine(&xq, &p.wq, &p.bq);
        let k = affine(&x.view(), &p.wk, &p.bk);
        let v = affine(&x.view(), &p.wv, &p.bv);
        let mut o = Array2::zeros((rows, self.config.d_model));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores *= scale;
            softmax_rows(&mut scores);
            o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let attn = affine(&o.view(), &p.wo, &p.bo);
        let u = &xq + &attn;
        let (y1, ln1) = layer_norm(&u, &p.ln1_g, &p.ln1_b);
        let f1 = affine(&y1.view(), &p.w1, &p.b1);
        let g = f1.mapv(gelu);
        let f2 = affine(&g.view(), &p.w2, &p.b2);
        let u2 = &y1 + &f2;
        let (out, ln2) = layer_norm(&u2, &p.ln2_g, &p.ln2_b);
        (
            out,
            LayerTrace {
                x,
                q,
                k,
                v,
                probs,
                o,
                ln1,
                y1,
                f1,
                g,
                ln2,
            },
        )
    }

    /// Accumulates into `grads` the parameter gradients of a scalar loss whose
    /// gradient with respect to the returned representations is `d_rep`.
    pub fn backward(&self, trace: &ForwardTrace, d_rep: &Array2<f64>, grads: &mut EncoderParams) -> Result<()> {
        if d_rep.nrows() != trace.seqs.len() || d_rep.ncols() != trace.d_model || trace.d_model != self.config.d_model {
            return Err(Error::Numerical(format!(
                "upstream gradient {:?} does not match trace of {} x {}",
                d_rep.shape(),
                trace.seqs.len(),
                trace.d_model
            )));
        }
        for (seq, d_row) in trace.seqs.iter().zip(d_rep.rows()) {
            let mut d_cls = d_row.to_owned();
            if let Some(mask) = &seq.dropout {
                d_cls *= mask;
            }
            self.backward_one(seq, d_cls, grads);
        }
        Ok(())
    }

    fn backward_one(&self, seq: &SeqTrace, d_cls: Array1<f64>, grads: &mut EncoderParams) {
        let len = seq.ids.len();
        let d = self.config.d_model;
        let last_rows = if self.config.n_layers == 0 { len } else { 1 };
        let mut dx = Array2::zeros((last_rows, d));
        dx.row_mut(0).assign(&d_cls);
        for l in (0..self.config.n_layers).rev() {
            dx = self.layer_backward(&self.layers[l], &seq.layers[l], dx, &mut grads.layers[l]);
        }
        let d_emb = layer_norm_backward(&dx, &seq.emb_ln, &self.emb_ln_g, &mut grads.emb_ln_g, &mut grads.emb_ln_b);
        for (t, row) in d_emb.rows().into_iter().enumerate() {
            let mut tok = grads.tok_emb.row_mut(seq.ids[t] as usize);
            tok += &row;
            let mut pos = grads.pos_emb.row_mut(seq.positions[t] as usize);
            pos += &row;
            let mut seg = grads.seg_emb.row_mut(seq.segments[t] as usize);
            seg += &row;
        }
    }

    fn layer_backward(&self, p: &LayerParams, t: &LayerTrace, d_out: Array2<f64>, g: &mut LayerParams) -> Array2<f64> {
        let rows = t.q.nrows();
        let len = t.x.nrows();
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let d_u2 = layer_norm_backward(&d_out, &t.ln2, &p.ln2_g, &mut g.ln2_g, &mut g.ln2_b);
        // feed-forward
        g.w2 += &t.g.t().dot(&d_u2);
        g.b2 += &column_sums(&d_u2);
        let mut d_f1 = d_u2.dot(&p.w2.t());
        d_f1.zip_mut_with(&t.f1, |dg, &x| *dg *= gelu_grad(x));
        g.w1 += &t.y1.t().dot(&d_f1);
        g.b1 += &column_sums(&d_f1);
        let d_y1 = d_u2 + d_f1.dot(&p.w1.t());
        let d_u = layer_norm_backward(&d_y1, &t.ln1, &p.ln1_g, &mut g.ln1_g, &mut g.ln1_b);
        // attention output projection
        g.wo += &t.o.t().dot(&d_u);
        g.bo += &column_sums(&d_u);
        let d_o = d_u.dot(&p.wo.t());
        let mut d_q = Array2::zeros((rows, self.config.d_model));
        let mut d_k = Array2::zeros((len, self.config.d_model));
        let mut d_v = Array2::zeros((len, self.config.d_model));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let probs = &t.probs[h];
            let d_oh = d_o.slice(cols);
            let d_p = d_oh.dot(&t.v.slice(cols).t());
            d_v.slice_mut(cols).assign(&probs.t().dot(&d_oh));
            let inner = (&d_p * probs).sum_axis(Axis(1)).insert_axis(Axis(1));
            let mut d_s = (&d_p - &inner) * probs;
            d_s *= scale;
            d_q.slice_mut(cols).assign(&d_s.dot(&t.k.slice(cols)));
            d_k.slice_mut(cols).assign(&d_s.t().dot(&t.q.slice(cols)));
        }
        let xq = t.x.slice(s![..rows, ..]);
        g.wq += &xq.t().dot(&d_q);
        g.bq += &column_sums(&d_q);
        g.wk += &t.x.t().dot(&d_k);
        g.bk += &column_sums(&d_k);
        g.wv += &t.x.t().dot(&d_v);
        g.bv += &column_sums(&d_v);
        let mut dx = d_k.dot(&p.wk.t()) + d_v.dot(&p.wv.t());
        {
            let mut head = dx.slice_mut(s![..rows, ..]);
            head += &d_q.dot(&p.wq.t());
            head += &d_u;
        }
        dx
    }

    /// Contrastive projection `z = g1(h)`; purely affine.
    pub fn project_g1(&self, rep: &Array2<f64>) -> Array2<f64> {
        affine(&rep.view(), &self.g1_w, &self.g1_b)
    }

    /// Backward through `g1`; returns the gradient with respect to `rep`.
    pub fn project_g1_backward(&self, rep: &Array2<f64>, d_z: &Array2<f64>, grads: &mut EncoderParams) -> Array2<f64> {
        grads.g1_w += &rep.t().dot(d_z);
        grads.g1_b += &column_sums(d_z);
        d_z.dot(&self.g1_w.t())
    }

    /// Ranking activations before the logistic function.
    pub fn ranking_logits(&self, rep: &Array2<f64>) -> Vec<f64> {
        affine(&rep.view(), &self.g2_w, &self.g2_b).column(0).to_vec()
    }

    /// Click probabilities `σ(g2(h))`, one per row.
    pub fn project_g2(&self, rep: &Array2<f64>) -> Vec<f64> {
        self.ranking_logits(rep).into_iter().map(sigmoid).collect()
    }

    /// Backward through `g2` given the gradient with respect to the logits.
    pub fn project_g2_backward(&self, rep: &Array2<f64>, d_logits: &[f64], grads: &mut EncoderParams) -> Array2<f64> {
        let d = Array2::from_shape_vec((d_logits.len(), 1), d_logits.to_vec()).expect("column vector");
        grads.g2_w += &rep.t().dot(&d);
        grads.g2_b += &column_sums(&d);
        d.dot(&self.g2_w.t())
    }
}

/// `vocab_size` is not addressable; it always comes from the vocabulary.
impl KeyValueConfig for EncoderConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d_model" => self.d_model = config::parse(key, value)?,
            "n_layers" => self.n_layers = config::parse(key, value)?,
            "n_heads" => self.n_heads = config::parse(key, value)?,
            "d_ff" => self.d_ff = config::parse(key, value)?,
            "max_len" => self.max_len = config::parse(key, value)?,
            "dropout_rate" => self.dropout_rate = config::parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("d_model".into(), self.d_model.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("dropout_rate".into(), self.dropout_rate.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests;
