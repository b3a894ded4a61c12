//! Pre-LayerNorm transformer encoder over the two-token sequence `(a, b)`,
//! with mean pooling and a linear decoder. Backpropagation is written out by
//! hand for this fixed architecture.
//!
//! Per layer, matching a `norm_first` encoder layer with ReLU feedforward:
//!
//! ```text
//! x = x + drop(attn(ln1(x)))        attention dropout also on the 2x2 probabilities
//! x = x + drop(W2 drop(relu(W1 ln2(x) + b1)) + b2)
//! ```
//!
//! Weights are stored `[in, out]` so every projection is `y = x W + b`.

use std::ops::Range;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::params::{Layout, ParamVec};
use super::scalar::{matmul, Precision, Real};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::task::ExamplePair;

const LN_EPS: f64 = 1e-5;
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub p: u32,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub precision: Precision,
}

impl ModelConfig {
    /// Full-scale architecture: 2 layers, d=256, 4 heads, d_ff=2048.
    pub fn gold(p: u32) -> Self {
        ModelConfig {
            p,
            d_model: 256,
            n_heads: 4,
            d_ff: 2048,
            n_layers: 2,
            dropout: 0.1,
            precision: Precision::F32,
        }
    }

    /// Small-prime architecture: 1 layer, d=128, 4 heads, d_ff=4d.
    pub fn desk(p: u32) -> Self {
        ModelConfig {
            p,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            n_layers: 1,
            dropout: 0.1,
            precision: Precision::F32,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.p < 2 {
            out.push("model.p must be >= 2".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            out.push("model dimensions (d_model, n_heads, d_ff, n_layers) must be > 0".into());
        } else if !self.d_model.is_multiple_of(self.n_heads) {
            out.push(format!(
                "model.d_model = {} is not divisible by model.n_heads = {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("model.dropout = {} must lie in [0, 1)", self.dropout));
        }
        out
    }

    pub fn layout(&self) -> Layout {
        let (p, d, f) = (self.p as usize, self.d_model, self.d_ff);
        let mut segs: Vec<(String, Vec<usize>)> = vec![
            ("token_embedding".into(), vec![p, d]),
            ("positional_embedding".into(), vec![2, d]),
        ];
        for l in 0..self.n_layers {
            let name = |s: &str| format!("layers.{l}.{s}");
            segs.extend([
                (name("norm1.weight"), vec![d]),
                (name("norm1.bias"), vec![d]),
                (name("attn.in_proj.weight"), vec![d, 3 * d]),
                (name("attn.in_proj.bias"), vec![3 * d]),
                (name("attn.out_proj.weight"), vec![d, d]),
                (name("attn.out_proj.bias"), vec![d]),
                (name("norm2.weight"), vec![d]),
                (name("norm2.bias"), vec![d]),
                (name("linear1.weight"), vec![d, f]),
                (name("linear1.bias"), vec![f]),
                (name("linear2.weight"), vec![f, d]),
                (name("linear2.bias"), vec![d]),
            ]);
        }
        segs.push(("decoder.weight".into(), vec![d, p]));
        segs.push(("decoder.bias".into(), vec![p]));
        Layout::new(segs)
    }
}

/// Dropout source for a forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut StreamRng),
}

struct LayerIx {
    norm1_w: Range<usize>,
    norm1_b: Range<usize>,
    in_w: Range<usize>,
    in_b: Range<usize>,
    out_w: Range<usize>,
    out_b: Range<usize>,
    norm2_w: Range<usize>,
    norm2_b: Range<usize>,
    l1_w: Range<usize>,
    l1_b: Range<usize>,
    l2_w: Range<usize>,
    l2_b: Range<usize>,
}

pub struct Transformer {
    cfg: ModelConfig,
    layout: Arc<Layout>,
    tok: Range<usize>,
    pos: Range<usize>,
    layers: Vec<LayerIx>,
    dec_w: Range<usize>,
    dec_b: Range<usize>,
}

struct LayerCache<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    probs_mask: Option<Vec<T>>,
    attn_o: Vec<T>,
    mask1: Option<Vec<T>>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    h2: Vec<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
    ff_mask: Option<Vec<T>>,
    mask2: Option<Vec<T>>,
}

struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    pooled: Vec<T>,
    logits: Vec<T>,
}

impl Transformer {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let problems = cfg.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let layout = Arc::new(cfg.layout());
        let r = |n: &str| layout.range_of(n);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let n = |s: &str| r(&format!("layers.{l}.{s}"));
                LayerIx {
                    norm1_w: n("norm1.weight"),
                    norm1_b: n("norm1.bias"),
                    in_w: n("attn.in_proj.weight"),
                    in_b: n("attn.in_proj.bias"),
                    out_w: n("attn.out_proj.weight"),
                    out_b: n("attn.out_proj.bias"),
                    norm2_w: n("norm2.weight"),
                    norm2_b: n("norm2.bias"),
                    l1_w: n("linear1.weight"),
                    l1_b: n("linear1.bias"),
                    l2_w: n("linear2.weight"),
                    l2_b: n("linear2.bias"),
                }
            })
            .collect();
        Ok(Transformer {
            tok: r("token_embedding"),
            pos: r("positional_embedding"),
            dec_w: r("decoder.weight"),
            dec_b: r("decoder.bias"),
            layers,
            layout,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Embeddings ~ U(-1, 1) (one-hot input, fan-in 1); every linear weight
    /// and bias ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); LayerNorm gain 1, bias 0.
    /// Values are drawn in f64 in canonical segment order from the `init`
    /// stream, so f32 and f64 models start from the same point.
    pub fn init_params<T: Real>(&self, init_seed: u64) -> ParamVec<T> {
        let mut rng = rng::stream(init_seed, rng::INIT, &[]);
        let mut data = Vec::with_capacity(self.layout.len());
        for seg in self.layout.segments() {
            let name = seg.name.as_str();
            let n = seg.len();
            if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") {
                data.extend(std::iter::repeat_n(T::one(), n));
            } else if name.ends_with("norm1.bias") || name.ends_with("norm2.bias") {
                data.extend(std::iter::repeat_n(T::zero(), n));
            } else {
                let bound = if name.ends_with("embedding") {
                    1.0
                } else {
                    let fan_in = if name.ends_with(".weight") {
                        seg.shape[0]
                    } else {
                        // bias: fan-in of the matching weight
                        let w = name.trim_end_matches("bias").to_string() + "weight";
                        self.layout.segment(&w).expect("bias without weight").shape[0]
                    };
                    1.0 / (fan_in as f64).sqrt()
                };
                data.extend((0..n).map(|_| T::from_f64_lossy(bound * (2.0 * rng::unit_f64(&mut rng) - 1.0))));
            }
        }
        ParamVec::from_vec(Arc::clone(&self.layout), data).expect("layout length")
    }

    pub fn forward<T: Real>(&self, params: &ParamVec<T>, batch: &[ExamplePair], mode: Mode<'_>) -> Vec<T> {
        self.forward_cached(params.as_slice(), batch, mode).logits
    }

    /// Mean cross-entropy and its exact gradient. In train mode the dropout
    /// masks come from the supplied stream, so the gradient belongs to the
    /// sampled forward pass.
    pub fn loss_and_grad<T: Real>(
        &self,
        params: &ParamVec<T>,
        batch: &[ExamplePair],
        mode: Mode<'_>,
    ) -> Result<(f64, ParamVec<T>)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        self.check_inputs(batch)?;
        let w = params.as_slice();
        let cache = self.forward_cached(w, batch, mode);
        let n = batch.len();
        let p = self.cfg.p as usize;

        let mut dlogits = cache.logits.clone();
        let mut loss = 0.0f64;
        let inv_n = T::from_f64_lossy(1.0 / n as f64);
        for (i, ex) in batch.iter().enumerate() {
            let row = &mut dlogits[i * p..(i + 1) * p];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let target = ex.c as usize;
            let logit_t = cache.logits[i * p + target];
            loss += (max.as_f64() + sum.as_f64().ln()) - logit_t.as_f64();
            for v in row.iter_mut() {
                *v = *v / sum * inv_n;
            }
            row[target] -= inv_n;
        }
        loss /= n as f64;
        if !loss.is_finite() {
            let layer = params.first_non_finite().unwrap_or("logits").to_string();
            return Err(Error::numeric(layer, format!("loss = {loss}")));
        }

        let mut grad = ParamVec::zeros(Arc::clone(&self.layout));
        self.backward(w, batch, &cache, &dlogits, grad.as_mut_slice());
        if let Some(layer) = grad.first_non_finite() {
            let layer = params.first_non_finite().unwrap_or(layer).to_string();
            return Err(Error::numeric(layer, "non-finite gradient"));
        }
        Ok((loss, grad))
    }

    /// Fraction of examples whose argmax logit (lowest index on ties) is
    /// the label.
    pub fn accuracy<T: Real>(&self, params: &ParamVec<T>, examples: &[ExamplePair]) -> Result<f64> {
        Ok(self.evaluate(params, examples)?.accuracy)
    }

    /// Eval-mode accuracy and mean loss.
    pub fn evaluate<T: Real>(&self, params: &ParamVec<T>, examples: &[ExamplePair]) -> Result<Evaluation> {
        if examples.is_empty() {
            return Err(Error::Input("accuracy of an empty example list is undefined".into()));
        }
        self.check_inputs(examples)?;
        let p = self.cfg.p as usize;
        let mut correct = 0usize;
        let mut loss = 0.0f64;
        for chunk in examples.chunks(EVAL_CHUNK) {
            let logits = self.forward_cached(params.as_slice(), chunk, Mode::Eval).logits;
            for (ex, row) in chunk.iter().zip(logits.chunks_exact(p)) {
                let mut best = 0;
                for k in 1..p {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                correct += usize::from(best == ex.c as usize);
                let max = row[best].as_f64();
                let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
                loss += lse - row[ex.c as usize].as_f64();
            }
        }
        Ok(Evaluation {
            accuracy: correct as f64 / examples.len() as f64,
            loss: loss / examples.len() as f64,
        })
    }

    fn check_inputs(&self, batch: &[ExamplePair]) -> Result<()> {
        let p = self.cfg.p;
        match batch.iter().find(|e| e.a >= p || e.b >= p || e.c >= p) {
            Some(e) => Err(Error::Input(format!(
                "example ({}, {}) -> {} out of range for p = {p}",
                e.a, e.b, e.c
            ))),
            None => Ok(()),
        }
    }

    fn forward_cached<T: Real>(&self, w: &[T], batch: &[ExamplePair], mut mode: Mode<'_>) -> ForwardCache<T> {
        let cfg = &self.cfg;
        let (d, f, p) = (cfg.d_model, cfg.d_ff, cfg.p as usize);
        let n = batch.len();
        let rows = 2 * n;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let keep_scale = T::from_f64_lossy(1.0 / (1.0 - cfg.dropout));
        let drop_threshold = (cfg.dropout * 4_294_967_296.0).round() as u64;

        let mut mask = |len: usize| -> Option<Vec<T>> {
            match &mut mode {
                Mode::Train(rng) if drop_threshold > 0 => Some(
                    (0..len)
                        .map(|_| {
                            if u64::from(rng.next_u32()) < drop_threshold {
                                T::zero()
                            } else {
                                keep_scale
                            }
                        })
                        .collect(),
                ),
                _ => None,
            }
        };

        let tok = &w[self.tok.clone()];
        let pos = &w[self.pos.clone()];
        let mut x = vec![T::zero(); rows * d];
        for (i, ex) in batch.iter().enumerate() {
            for (slot, token) in [ex.a, ex.b].into_iter().enumerate() {
                let r = 2 * i + slot;
                let dst = &mut x[r * d..(r + 1) * d];
                let e = &tok[token as usize * d..(token as usize + 1) * d];
                let ps = &pos[slot * d..(slot + 1) * d];
                for j in 0..d {
                    dst[j] = e[j] + ps[j];
                }
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for ix in &self.layers {
            let (h1, xhat1, rstd1) = layer_norm(&x, rows, d, &w[ix.norm1_w.clone()], &w[ix.norm1_b.clone()]);
            let mut qkv = bias_rows(&w[ix.in_b.clone()], rows);
            matmul(rows, d, 3 * d, &h1, false, &w[ix.in_w.clone()], false, &mut qkv, true);

            let mut probs = vec![T::zero(); n * heads * 4];
            for i in 0..n {
                for hh in 0..heads {
                    for s in 0..2 {
                        let q = &qkv[(2 * i + s) * 3 * d + hh * dh..][..dh];
                        let mut sc = [T::zero(); 2];
                        for (t, sct) in sc.iter_mut().enumerate() {
                            let k = &qkv[(2 * i + t) * 3 * d + d + hh * dh..][..dh];
                            *sct = dot(q, k) * scale;
                        }
                        let m = sc[0].max(sc[1]);
                        let e0 = (sc[0] - m).exp();
                        let e1 = (sc[1] - m).exp();
                        let z = e0 + e1;
                        let base = ((i * heads + hh) * 2 + s) * 2;
                        probs[base] = e0 / z;
                        probs[base + 1] = e1 / z;
                    }
                }
            }
            let probs_mask = mask(probs.len());
            let mut attn_o = vec![T::zero(); rows * d];
            for i in 0..n {
                for hh in 0..heads {
                    for s in 0..2 {
                        let base = ((i * heads + hh) * 2 + s) * 2;
                        let out = &mut attn_o[(2 * i + s) * d + hh * dh..][..dh];
                        for t in 0..2 {
                            let mut a = probs[base + t];
                            if let Some(m) = &probs_mask {
                                a *= m[base + t];
                            }
                            let v = &qkv[(2 * i + t) * 3 * d + 2 * d + hh * dh..][..dh];
                            for j in 0..dh {
                                out[j] += a * v[j];
                            }
                        }
                    }
                }
            }
            let mut proj = bias_rows(&w[ix.out_b.clone()], rows);
            matmul(rows, d, d, &attn_o, false, &w[ix.out_w.clone()], false, &mut proj, true);
            let mask1 = mask(rows * d);
            add_masked(&mut x, &proj, mask1.as_deref());

            let (h2, xhat2, rstd2) = layer_norm(&x, rows, d, &w[ix.norm2_w.clone()], &w[ix.norm2_b.clone()]);
            let mut pre_act = bias_rows(&w[ix.l1_b.clone()], rows);
            matmul(rows, d, f, &h2, false, &w[ix.l1_w.clone()], false, &mut pre_act, true);
            let ff_mask = mask(rows * f);
            let act: Vec<T> = match &ff_mask {
                Some(m) => pre_act.iter().zip(m).map(|(&u, &k)| relu(u) * k).collect(),
                None => pre_act.iter().map(|&u| relu(u)).collect(),
            };
            let mut ff = bias_rows(&w[ix.l2_b.clone()], rows);
            matmul(rows, f, d, &act, false, &w[ix.l2_w.clone()], false, &mut ff, true);
            let mask2 = mask(rows * d);
            add_masked(&mut x, &ff, mask2.as_deref());

            layers.push(LayerCache {
                xhat1,
                rstd1,
                h1,
                qkv,
                probs,
                probs_mask,
                attn_o,
                mask1,
                xhat2,
                rstd2,
                h2,
                pre_act,
                act,
                ff_mask,
                mask2,
            });
        }

        let half = T::from_f64_lossy(0.5);
        let mut pooled = vec![T::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                pooled[i * d + j] = (x[2 * i * d + j] + x[(2 * i + 1) * d + j]) * half;
            }
        }
        let mut logits = bias_rows(&w[self.dec_b.clone()], n);
        matmul(
            n,
            d,
            p,
            &pooled,
            false,
            &w[self.dec_w.clone()],
            false,
            &mut logits,
            true,
        );
        ForwardCache { layers, pooled, logits }
    }

    fn backward<T: Real>(&self, w: &[T], batch: &[ExamplePair], cache: &ForwardCache<T>, dlogits: &[T], g: &mut [T]) {
        let cfg = &self.cfg;
        let (d, f, p) = (cfg.d_model, cfg.d_ff, cfg.p as usize);
        let n = batch.len();
        let rows = 2 * n;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());

        matmul(
            d,
            n,
            p,
            &cache.pooled,
            true,
            dlogits,
            false,
            &mut g[self.dec_w.clone()],
            true,
        );
        col_sums_into(dlogits, n, p, &mut g[self.dec_b.clone()]);
        let mut dpooled = vec![T::zero(); n * d];
        matmul(
            n,
            p,
            d,
            dlogits,
            false,
            &w[self.dec_w.clone()],
            true,
            &mut dpooled,
            false,
        );

        let half = T::from_f64_lossy(0.5);
        let mut dx = vec![T::zero(); rows * d];
        for i in 0..n {
            for j in 0..d {
                let v = dpooled[i * d + j] * half;
                dx[2 * i * d + j] = v;
                dx[(2 * i + 1) * d + j] = v;
            }
        }

        for (ix, lc) in self.layers.iter().zip(&cache.layers).rev() {
            // feedforward block
            let dff = masked(&dx, lc.mask2.as_deref());
            matmul(f, rows, d, &lc.act, true, &dff, false, &mut g[ix.l2_w.clone()], true);
            col_sums_into(&dff, rows, d, &mut g[ix.l2_b.clone()]);
            let mut dact = vec![T::zero(); rows * f];
            matmul(rows, d, f, &dff, false, &w[ix.l2_w.clone()], true, &mut dact, false);
            for (k, da) in dact.iter_mut().enumerate() {
                let mut v = if lc.pre_act[k] > T::zero() { *da } else { T::zero() };
                if let Some(m) = &lc.ff_mask {
                    v *= m[k];
                }
                *da = v;
            }
            matmul(d, rows, f, &lc.h2, true, &dact, false, &mut g[ix.l1_w.clone()], true);
            col_sums_into(&dact, rows, f, &mut g[ix.l1_b.clone()]);
            let mut dh2 = vec![T::zero(); rows * d];
            matmul(rows, f, d, &dact, false, &w[ix.l1_w.clone()], true, &mut dh2, false);
            layer_norm_backward(
                &dh2,
                &lc.xhat2,
                &lc.rstd2,
                &w[ix.norm2_w.clone()],
                rows,
                d,
                g,
                ix.norm2_w.clone(),
                ix.norm2_b.clone(),
                &mut dx,
            );

            // attention block
            let dproj = masked(&dx, lc.mask1.as_deref());
            matmul(
                d,
                rows,
                d,
                &lc.attn_o,
                true,
                &dproj,
                false,
                &mut g[ix.out_w.clone()],
                true,
            );
            col_sums_into(&dproj, rows, d, &mut g[ix.out_b.clone()]);
            let mut dattn_o = vec![T::zero(); rows * d];
            matmul(
                rows,
                d,
                d,
                &dproj,
                false,
                &w[ix.out_w.clone()],
                true,
                &mut dattn_o,
                false,
            );

            let qkv = &lc.qkv;
            let mut dqkv = vec![T::zero(); rows * 3 * d];
            for i in 0..n {
                for hh in 0..heads {
                    for s in 0..2 {
                        let base = ((i * heads + hh) * 2 + s) * 2;
                        let dout = &dattn_o[(2 * i + s) * d + hh * dh..][..dh];
                        let mut dprob = [T::zero(); 2];
                        for t in 0..2 {
                            let vrow = (2 * i + t) * 3 * d + 2 * d + hh * dh;
                            let keep = lc.probs_mask.as_ref().map_or(T::one(), |m| m[base + t]);
                            let a = lc.probs[base + t] * keep;
                            dprob[t] = dot(dout, &qkv[vrow..vrow + dh]) * keep;
                            let dv = &mut dqkv[vrow..vrow + dh];
                            for j in 0..dh {
                                dv[j] += a * dout[j];
                            }
                        }
                        let pr = [lc.probs[base], lc.probs[base + 1]];
                        let inner = pr[0] * dprob[0] + pr[1] * dprob[1];
                        let qrow = (2 * i + s) * 3 * d + hh * dh;
                        for t in 0..2 {
                            let ds = pr[t] * (dprob[t] - inner) * scale;
                            let krow = (2 * i + t) * 3 * d + d + hh * dh;
                            for j in 0..dh {
                                let qj = qkv[qrow + j];
                                let kj = qkv[krow + j];
                                dqkv[qrow + j] += ds * kj;
                                dqkv[krow + j] += ds * qj;
                            }
                        }
                    }
                }
            }
            matmul(
                d,
                rows,
                3 * d,
                &lc.h1,
                true,
                &dqkv,
                false,
                &mut g[ix.in_w.clone()],
                true,
            );
            col_sums_into(&dqkv, rows, 3 * d, &mut g[ix.in_b.clone()]);
            let mut dh1 = vec![T::zero(); rows * d];
            matmul(rows, 3 * d, d, &dqkv, false, &w[ix.in_w.clone()], true, &mut dh1, false);
            layer_norm_backward(
                &dh1,
                &lc.xhat1,
                &lc.rstd1,
                &w[ix.norm1_w.clone()],
                rows,
                d,
                g,
                ix.norm1_w.clone(),
                ix.norm1_b.clone(),
                &mut dx,
            );
        }

        let tok_off = self.tok.start;
        let pos_off = self.pos.start;
        for (i, ex) in batch.iter().enumerate() {
            for (slot, token) in [ex.a, ex.b].into_iter().enumerate() {
                let src = &dx[(2 * i + slot) * d..(2 * i + slot + 1) * d];
                let t0 = tok_off + token as usize * d;
                for j in 0..d {
                    g[t0 + j] += src[j];
                }
                let p0 = pos_off + slot * d;
                for j in 0..d {
                    g[p0 + j] += src[j];
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

fn bias_rows<T: Real>(bias: &[T], rows: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * bias.len());
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

fn add_masked<T: Real>(x: &mut [T], y: &[T], mask: Option<&[T]>) {
    match mask {
        Some(m) => {
            for ((a, &b), &k) in x.iter_mut().zip(y).zip(m) {
                *a += b * k;
            }
        }
        None => {
            for (a, &b) in x.iter_mut().zip(y) {
                *a += b;
            }
        }
    }
}

fn masked<T: Real>(x: &[T], mask: Option<&[T]>) -> Vec<T> {
    match mask {
        Some(m) => x.iter().zip(m).map(|(&a, &k)| a * k).collect(),
        None => x.to_vec(),
    }
}

fn col_sums_into<T: Real>(x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
}

/// Returns `(y, xhat, rstd)`.
fn layer_norm<T: Real>(x: &[T], rows: usize, d: usize, gain: &[T], bias: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); rows * d];
    let mut xhat = vec![T::zero(); rows * d];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::from_f64_lossy(1.0 / d as f64);
    let eps = T::from_f64_lossy(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (xr[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = xh * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

/// Accumulates gain/bias gradients into `g` and the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    rows: usize,
    d: usize,
    g: &mut [T],
    gain_range: Range<usize>,
    bias_range: Range<usize>,
    dx: &mut [T],
) {
    let inv_d = T::from_f64_lossy(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_x = T::zero();
        for j in 0..d {
            g[gain_range.start + j] += dyr[j] * xr[j];
            g[bias_range.start + j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_x += dxhat[j] * xr[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_x *= inv_d;
        let rs = rstd[r];
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] += rs * (dxhat[j] - mean_dxhat - xr[j] * mean_dxhat_x);
        }
    }
}

/// ReLU that lets NaN through instead of clamping it to zero.
fn relu<T: Real>(u: T) -> T {
    if u < T::zero() {
        T::zero()
    } else {
        u
    }
}
