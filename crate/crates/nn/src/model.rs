//! Forward and backward passes, one subject at a time.
//!
//! Shapes per subject: input `C × N × V_max`, tokens `T × dim` where
//! `T = N` (mean pooling) or `N + 1` (class token first).

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rayon::prelude::*;

use csvit_core::tokenizer::PaddedBatch;

use crate::config::{ModelConfig, Pooling};
use crate::error::{NnError, Result};
use crate::params::{Block, ModelParams};

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_K * (z + GELU_C * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_K * (z + GELU_C * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * z * z)
}

/// Flattens each masked CSV patch channel-major: row `i`, column `c·V + j`.
pub fn patch_matrix(x: ArrayView3<f64>, mask: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (c, n, w) = x.dim();
    if mask.dim() != (n, w) {
        return Err(NnError::Shape(format!(
            "mask {:?} does not match patches ({n}, {w})",
            mask.dim()
        )));
    }
    let mut u = Array2::zeros((n, c * w));
    for ch in 0..c {
        let masked = &x.index_axis(Axis(0), ch) * &mask;
        u.slice_mut(s![.., ch * w..(ch + 1) * w]).assign(&masked);
    }
    Ok(u)
}

/// Token embedding `t_i = W·vec(x_i ⊙ m_i) + b + pos_i` for one subject.
pub fn embed(x: ArrayView3<f64>, mask: ArrayView2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    let u = patch_matrix(x, mask)?;
    if u.ncols() != params.embed_w.nrows() || u.nrows() != params.pos.nrows() {
        return Err(NnError::Shape(format!(
            "patches {:?} vs embedding {:?} and {} positions",
            u.dim(),
            params.embed_w.dim(),
            params.pos.nrows()
        )));
    }
    Ok(u.dot(&params.embed_w) + &params.embed_b + &params.pos)
}

/// Tokens for every subject: `B × N × dim`.
pub fn embed_batch(batch: &PaddedBatch, params: &ModelParams) -> Result<Array3<f64>> {
    let per: Vec<Array2<f64>> = batch
        .x
        .outer_iter()
        .map(|x| embed(x, batch.mask.view(), params))
        .collect::<Result<_>>()?;
    let views: Vec<_> = per.iter().map(|t| t.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| NnError::Shape(e.to_string()))
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn ln_forward(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.clone().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * &rstd.clone().insert_axis(Axis(1));
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

/// Returns dx; accumulates gain and bias gradients.
fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let m1 = dxhat.sum_axis(Axis(1)) / d;
    let m2 = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
    let inner = dxhat - &m1.insert_axis(Axis(1)) - &(&cache.xhat * &m2.insert_axis(Axis(1)));
    inner * &cache.rstd.clone().insert_axis(Axis(1))
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn dropout_mask(rng: &mut impl Rng, shape: (usize, usize), p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

struct BlockCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    drop1: Option<Array2<f64>>,
    ln2: LnCache,
    h2: Array2<f64>,
    z: Array2<f64>,
    g: Array2<f64>,
    drop2: Option<Array2<f64>>,
}

fn block_forward(
    t: Array2<f64>,
    b: &Block,
    cfg: &ModelConfig,
    rng: &mut Option<&mut dyn rand::RngCore>,
) -> (Array2<f64>, BlockCache) {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (h1, ln1) = ln_forward(&t, &b.ln1_g, &b.ln1_b);
    let q = h1.dot(&b.wq) + &b.bq;
    let k = h1.dot(&b.wk);
    let v = h1.dot(&b.wv) + &b.bv;
    let mut o = Array2::zeros(t.dim());
    let mut attn = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut a);
        o.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        attn.push(a);
    }
    let mut proj = o.dot(&b.wo) + &b.bo;
    let drop1 = rng.as_mut().filter(|_| cfg.dropout > 0.0).map(|r| {
        let m = dropout_mask(r, proj.dim(), cfg.dropout);
        proj *= &m;
        m
    });
    let t_mid = t + proj;
    let (h2, ln2) = ln_forward(&t_mid, &b.ln2_g, &b.ln2_b);
    let z = h2.dot(&b.w1) + &b.b1;
    let g = z.mapv(gelu);
    let mut m = g.dot(&b.w2) + &b.b2;
    let drop2 = rng.as_mut().filter(|_| cfg.dropout > 0.0).map(|r| {
        let mask = dropout_mask(r, m.dim(), cfg.dropout);
        m *= &mask;
        mask
    });
    let out = t_mid + m;
    let cache = BlockCache {
        ln1,
        h1,
        q,
        k,
        v,
        attn,
        o,
        drop1,
        ln2,
        h2,
        z,
        g,
        drop2,
    };
    (out, cache)
}

fn block_backward(
    dout: Array2<f64>,
    b: &Block,
    gb: &mut Block,
    c: &BlockCache,
    cfg: &ModelConfig,
) -> Array2<f64> {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    // MLP branch.
    let mut dm = dout.clone();
    if let Some(mask) = &c.drop2 {
        dm *= mask;
    }
    gb.b2 += &dm.sum_axis(Axis(0));
    gb.w2 += &c.g.t().dot(&dm);
    let dg = dm.dot(&b.w2.t());
    let dz = dg * &c.z.mapv(gelu_grad);
    gb.b1 += &dz.sum_axis(Axis(0));
    gb.w1 += &c.h2.t().dot(&dz);
    let dh2 = dz.dot(&b.w1.t());
    let dt_mid = dout + ln_backward(&dh2, &c.ln2, &b.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);
    // Attention branch.
    let mut dproj = dt_mid.clone();
    if let Some(mask) = &c.drop1 {
        dproj *= mask;
    }
    gb.bo += &dproj.sum_axis(Axis(0));
    gb.wo += &c.o.t().dot(&dproj);
    let d_o = dproj.dot(&b.wo.t());
    let mut dq = Array2::zeros(c.q.dim());
    let mut dk = Array2::zeros(c.k.dim());
    let mut dv = Array2::zeros(c.v.dim());
    for (h, a) in c.attn.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let doh = d_o.slice(cols);
        let da = doh.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&doh));
        let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = a * &(da - &row_dot) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    gb.bq += &dq.sum_axis(Axis(0));
    gb.bv += &dv.sum_axis(Axis(0));
    gb.wq += &c.h1.t().dot(&dq);
    gb.wk += &c.h1.t().dot(&dk);
    gb.wv += &c.h1.t().dot(&dv);
    let dh1 = dq.dot(&b.wq.t()) + dk.dot(&b.wk.t()) + dv.dot(&b.wv.t());
    dt_mid + ln_backward(&dh1, &c.ln1, &b.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b)
}

/// Everything the backward pass needs for one subject.
pub struct Trace {
    u: Array2<f64>,
    blocks: Vec<BlockCache>,
    pooled: Array1<f64>,
    tokens: usize,
}

fn check_finite(t: &Array2<f64>, stage: impl FnOnce() -> String) -> Result<()> {
    if t.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFinite { stage: stage() })
    }
}

/// Logit for one subject. `rng` enables dropout (training mode).
pub fn forward_sample(
    x: ArrayView3<f64>,
    mask: ArrayView2<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
    mut rng: Option<&mut dyn rand::RngCore>,
) -> Result<(f64, Trace)> {
    let u = patch_matrix(x, mask)?;
    let csv_tokens = embed(x, mask, params)?;
    check_finite(&csv_tokens, || "embedding".into())?;
    let mut t = match cfg.pooling {
        Pooling::Mean => csv_tokens,
        Pooling::Cls => {
            let cls = params.cls.view().insert_axis(Axis(0));
            ndarray::concatenate(Axis(0), &[cls, csv_tokens.view()])
                .map_err(|e| NnError::Shape(e.to_string()))?
        }
    };
    let mut caches = Vec::with_capacity(params.blocks.len());
    for (i, b) in params.blocks.iter().enumerate() {
        let (out, cache) = block_forward(t, b, cfg, &mut rng);
        check_finite(&out, || format!("block {i}"))?;
        caches.push(cache);
        t = out;
    }
    let pooled = match cfg.pooling {
        Pooling::Mean => t.mean_axis(Axis(0)).expect("at least one token"),
        Pooling::Cls => t.row(0).to_owned(),
    };
    let logit = pooled.dot(&params.head_w) + params.head_b[0];
    if !logit.is_finite() {
        return Err(NnError::NonFinite { stage: "head".into() });
    }
    Ok((
        logit,
        Trace {
            u,
            blocks: caches,
            pooled,
            tokens: t.nrows(),
        },
    ))
}

/// Gradients of `dlogit · logit` with respect to every parameter.
pub fn backward_sample(trace: &Trace, dlogit: f64, params: &ModelParams, cfg: &ModelConfig) -> ModelParams {
    let mut g = ModelParams::zeros(cfg);
    g.head_w = &trace.pooled * dlogit;
    g.head_b[0] = dlogit;
    let dpooled = &params.head_w * dlogit;
    let mut dt = Array2::zeros((trace.tokens, cfg.dim));
    match cfg.pooling {
        Pooling::Mean => {
            let share = dpooled / trace.tokens as f64;
            for mut row in dt.rows_mut() {
                row.assign(&share);
            }
        }
        Pooling::Cls => dt.row_mut(0).assign(&dpooled),
    }
    for (i, cache) in trace.blocks.iter().enumerate().rev() {
        dt = block_backward(dt, &params.blocks[i], &mut g.blocks[i], cache, cfg);
    }
    let demb = match cfg.pooling {
        Pooling::Mean => dt,
        Pooling::Cls => {
            g.cls = dt.row(0).to_owned();
            dt.slice(s![1.., ..]).to_owned()
        }
    };
    g.embed_b = demb.sum_axis(Axis(0));
    g.embed_w = trace.u.t().dot(&demb);
    g.pos = demb;
    g
}

/// Eval-mode logits for a batch (parallel over subjects, input order kept).
pub fn forward(batch: &PaddedBatch, params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<f64>> {
    (0..batch.batch_size())
        .into_par_iter()
        .map(|b| {
            forward_sample(batch.x.index_axis(Axis(0), b), batch.mask.view(), params, cfg, None)
                .map(|(z, _)| z)
        })
        .collect()
}
