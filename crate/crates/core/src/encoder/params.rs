use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use super::EncoderConfig;
use crate::error::{Error, Result};

/// Standard deviation of the default weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
}

const LAYER_TENSORS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b",
];

impl LayerParams {
    fn tensors(&self) -> [&Array2<f64>; 16] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo, &self.ln1_g,
            &self.ln1_b, &self.w1, &self.b1, &self.w2, &self.b2, &self.ln2_g, &self.ln2_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<f64>; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_g,
            &mut self.ln2_b,
        ]
    }
}

/// All trainable tensors. Biases and layer-norm parameters are stored as
/// `1 x n` rows so every tensor is two-dimensional. The same type holds
/// gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub seg_emb: Array2<f64>,
    pub emb_ln_g: Array2<f64>,
    pub emb_ln_b: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub g1_w: Array2<f64>,
    pub g1_b: Array2<f64>,
    pub g2_w: Array2<f64>,
    pub g2_b: Array2<f64>,
}

fn normal<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

impl EncoderParams {
    /// Expected shape of every tensor, in [`EncoderParams::named_tensors`] order.
    pub fn expected_shapes(config: &EncoderConfig) -> Vec<(String, (usize, usize))> {
        let d = config.d_model;
        let f = config.d_ff;
        let mut shapes = vec![
            ("tok_emb".to_string(), (config.vocab_size, d)),
            ("pos_emb".to_string(), (config.max_len, d)),
            ("seg_emb".to_string(), (2, d)),
            ("emb_ln_g".to_string(), (1, d)),
            ("emb_ln_b".to_string(), (1, d)),
        ];
        let layer_shapes = [
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (1, d),
            (1, d),
            (d, f),
            (1, f),
            (f, d),
            (1, d),
            (1, d),
            (1, d),
        ];
        for l in 0..config.n_layers {
            for (name, shape) in LAYER_TENSORS.iter().zip(layer_shapes) {
                shapes.push((format!("layers.{l}.{name}"), shape));
            }
        }
        shapes.extend([
            ("g1_w".to_string(), (d, d)),
            ("g1_b".to_string(), (1, d)),
            ("g2_w".to_string(), (d, 1)),
            ("g2_b".to_string(), (1, 1)),
        ]);
        shapes
    }

    /// Random initialization: normal weights with standard deviation `std`,
    /// zero biases, unit layer-norm gains.
    pub fn init_with_std<R: Rng + ?Sized>(config: &EncoderConfig, std: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.d_ff;
        let ones = || Array2::ones((1, d));
        let zeros = |n| Array2::zeros((1, n));
        let tok_emb = normal(rng, (config.vocab_size, d), std);
        let pos_emb = normal(rng, (config.max_len, d), std);
        let seg_emb = normal(rng, (2, d), std);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                wq: normal(rng, (d, d), std),
                bq: zeros(d),
                wk: normal(rng, (d, d), std),
                bk: zeros(d),
                wv: normal(rng, (d, d), std),
                bv: zeros(d),
                wo: normal(rng, (d, d), std),
                bo: zeros(d),
                ln1_g: ones(),
                ln1_b: zeros(d),
                w1: normal(rng, (d, f), std),
                b1: zeros(f),
                w2: normal(rng, (f, d), std),
                b2: zeros(d),
                ln2_g: ones(),
                ln2_b: zeros(d),
            });
        }
        let g1_w = normal(rng, (d, d), std);
        let g2_w = normal(rng, (d, 1), std);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            seg_emb,
            emb_ln_g: ones(),
            emb_ln_b: zeros(d),
            layers,
            g1_w,
            g1_b: zeros(d),
            g2_w,
            g2_b: Array2::zeros((1, 1)),
        })
    }

    /// All-zero tensors (layer-norm gains included) of the shapes `config` implies.
    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        let mut p = Self::init_with_std(config, 0.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        p.fill(0.0);
        Ok(p)
    }

    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        Self::init_with_std(config, INIT_STD, rng)
    }

    /// Fresh ranking head, drawn with the default initialization.
    pub fn reset_g2<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.g2_w = normal(rng, (self.config.d_model, 1), INIT_STD);
        self.g2_b.fill(0.0);
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("seg_emb".into(), &self.seg_emb),
            ("emb_ln_g".into(), &self.emb_ln_g),
            ("emb_ln_b".into(), &self.emb_ln_b),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.extend([
            ("g1_w".to_string(), &self.g1_w),
            ("g1_b".to_string(), &self.g1_b),
            ("g2_w".to_string(), &self.g2_w),
            ("g2_b".to_string(), &self.g2_b),
        ]);
        out
    }

    /// Mutable tensors in the same order as [`EncoderParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.seg_emb,
            &mut self.emb_ln_g,
            &mut self.emb_ln_b,
        ];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([&mut self.g1_w, &mut self.g1_b, &mut self.g2_w, &mut self.g2_b]);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.named_tensors().into_iter().map(|(n, _)| n).collect()
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_tensors(config: &EncoderConfig, tensors: Vec<(String, Array2<f64>)>) -> Result<Self> {
        let expected = Self::expected_shapes(config);
        if tensors.len() != expected.len() {
            return Err(Error::Data(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, t), (ename, eshape)) in tensors.iter().zip(&expected) {
            if name != ename || t.dim() != *eshape {
                return Err(Error::Data(format!(
                    "tensor {name} {:?} does not match expected {ename} {eshape:?}",
                    t.dim()
                )));
            }
        }
        let mut params = Self::zeros(config)?;
        for (slot, (_, t)) in params.tensors_mut().into_iter().zip(tensors) {
            *slot = t;
        }
        if !params.is_finite() {
            return Err(Error::Numerical("checkpoint contains non-finite parameters".into()));
        }
        Ok(params)
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, (_, b)) in self.tensors_mut().into_iter().zip(other.named_tensors()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            *t *= factor;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.named_tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Whether decoupled weight decay applies to a tensor: weight matrices and
/// embeddings yes, biases and layer-norm parameters no.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !(leaf.starts_with('b') || leaf.ends_with("_b") || leaf.contains("ln"))
}
