//! Model parameters. Gradients use the same type.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    /// No key bias: it shifts every score in a row equally, which the
    /// softmax cancels.
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `(C·V_max) × dim`; rows are channel-major then vertex slot.
    pub embed_w: Array2<f64>,
    pub embed_b: Array1<f64>,
    /// `N × dim`, one row per CSV token.
    pub pos: Array2<f64>,
    /// Class token (used only with CLS pooling).
    pub cls: Array1<f64>,
    pub blocks: Vec<Block>,
    pub head_w: Array1<f64>,
    pub head_b: Array1<f64>,
}

fn normal(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn(shape, || d.sample(rng))
}

fn normal1(rng: &mut impl Rng, n: usize, std: f64) -> Array1<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    Array1::from_shape_simple_fn(n, || d.sample(rng))
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, h) = (cfg.dim, cfg.hidden());
        let block = || Block {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w1: Array2::zeros((d, h)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((h, d)),
            b2: Array1::zeros(d),
        };
        ModelParams {
            embed_w: Array2::zeros((cfg.input_dim(), d)),
            embed_b: Array1::zeros(d),
            pos: Array2::zeros((cfg.num_tokens, d)),
            cls: Array1::zeros(d),
            blocks: (0..cfg.depth).map(|_| block()).collect(),
            head_w: Array1::zeros(d),
            head_b: Array1::zeros(1),
        }
    }

    /// Scaled-normal weights (std `1/sqrt(fan_in)`), unit layer-norm gains,
    /// zero biases, small positional embeddings. Deterministic in the seed.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let (d, h) = (cfg.dim, cfg.hidden());
        let mut p = Self::zeros(cfg);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        p.embed_w = normal(&mut rng, (cfg.input_dim(), d), fan(cfg.input_dim()));
        p.pos = normal(&mut rng, (cfg.num_tokens, d), 0.02);
        p.cls = normal1(&mut rng, d, 0.02);
        for b in &mut p.blocks {
            b.ln1_g.fill(1.0);
            b.ln2_g.fill(1.0);
            b.wq = normal(&mut rng, (d, d), fan(d));
            b.wk = normal(&mut rng, (d, d), fan(d));
            b.wv = normal(&mut rng, (d, d), fan(d));
            // Residual branches start small so deep stacks stay near identity.
            b.wo = normal(&mut rng, (d, d), fan(d) / (2.0 * cfg.depth as f64).sqrt());
            b.w1 = normal(&mut rng, (d, h), fan(d));
            b.w2 = normal(&mut rng, (h, d), fan(h) / (2.0 * cfg.depth as f64).sqrt());
        }
        p.head_w = normal1(&mut rng, d, fan(d));
        p
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("embed_w".to_string(), self.embed_w.view().into_dyn()),
            ("embed_b".to_string(), self.embed_b.view().into_dyn()),
            ("pos".to_string(), self.pos.view().into_dyn()),
            ("cls".to_string(), self.cls.view().into_dyn()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let named: [(&str, ArrayViewD<'_, f64>); 15] = [
                ("ln1_g", b.ln1_g.view().into_dyn()),
                ("ln1_b", b.ln1_b.view().into_dyn()),
                ("wq", b.wq.view().into_dyn()),
                ("bq", b.bq.view().into_dyn()),
                ("wk", b.wk.view().into_dyn()),
                ("wv", b.wv.view().into_dyn()),
                ("bv", b.bv.view().into_dyn()),
                ("wo", b.wo.view().into_dyn()),
                ("bo", b.bo.view().into_dyn()),
                ("ln2_g", b.ln2_g.view().into_dyn()),
                ("ln2_b", b.ln2_b.view().into_dyn()),
                ("w1", b.w1.view().into_dyn()),
                ("b1", b.b1.view().into_dyn()),
                ("w2", b.w2.view().into_dyn()),
                ("b2", b.b2.view().into_dyn()),
            ];
            out.extend(named.into_iter().map(|(n, v)| (format!("blocks.{i}.{n}"), v)));
        }
        out.push(("head_w".to_string(), self.head_w.view().into_dyn()));
        out.push(("head_b".to_string(), self.head_b.view().into_dyn()));
        out
    }

    /// Mutable views in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = vec![
            self.embed_w.view_mut().into_dyn(),
            self.embed_b.view_mut().into_dyn(),
            self.pos.view_mut().into_dyn(),
            self.cls.view_mut().into_dyn(),
        ];
        for b in &mut self.blocks {
            out.extend([
                b.ln1_g.view_mut().into_dyn(),
                b.ln1_b.view_mut().into_dyn(),
                b.wq.view_mut().into_dyn(),
                b.bq.view_mut().into_dyn(),
                b.wk.view_mut().into_dyn(),
                b.wv.view_mut().into_dyn(),
                b.bv.view_mut().into_dyn(),
                b.wo.view_mut().into_dyn(),
                b.bo.view_mut().into_dyn(),
                b.ln2_g.view_mut().into_dyn(),
                b.ln2_b.view_mut().into_dyn(),
                b.w1.view_mut().into_dyn(),
                b.b1.view_mut().into_dyn(),
                b.w2.view_mut().into_dyn(),
                b.b2.view_mut().into_dyn(),
            ]);
        }
        out.push(self.head_w.view_mut().into_dyn());
        out.push(self.head_b.view_mut().into_dyn());
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        let src = other.tensors();
        for (mut dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.scaled_add(alpha, &s);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for mut t in self.tensors_mut() {
            t.mapv_inplace(|v| v * alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Value at flat coordinate `idx` (tensors concatenated in order).
    pub fn get_flat(&self, idx: usize) -> f64 {
        let mut idx = idx;
        for (_, t) in self.tensors() {
            if idx < t.len() {
                return *t.iter().nth(idx).expect("in range");
            }
            idx -= t.len();
        }
        panic!("flat index out of range")
    }

    pub fn set_flat(&mut self, idx: usize, value: f64) {
        let mut idx = idx;
        for mut t in self.tensors_mut() {
            if idx < t.len() {
                *t.iter_mut().nth(idx).expect("in range") = value;
                return;
            }
            idx -= t.len();
        }
        panic!("flat index out of range")
    }

    /// Name of the tensor holding flat coordinate `idx`.
    pub fn flat_name(&self, idx: usize) -> String {
        let mut idx = idx;
        for (name, t) in self.tensors() {
            if idx < t.len() {
                return format!("{name}[{idx}]");
            }
            idx -= t.len();
        }
        panic!("flat index out of range")
    }
}
