// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode gradients of the final-position cross-entropy, derived by
//! hand for the SSD and softmax-attention layer kinds.

use crate::error::{Error, Result};
use crate::harness::PromptRecord;
use crate::model::{Layer, ModelWeights};
use crate::numerics::{dot, gelu, gelu_grad, rms_inverse, sigmoid, softmax_in_place, Tensor};
use crate::ssm::SsdLayer;
use crate::transformer::AttentionLayer;

/// Row-wise RMS norm that keeps what its backward pass needs.
struct NormCache {
    input: Tensor,
    inv: Vec<f64>,
    output: Tensor,
}

fn norm_forward(x: &Tensor, gain: &Tensor, eps: f64) -> NormCache {
    let h = x.cols();
    let mut output = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for row in output.data_mut().chunks_mut(h) {
        let r = rms_inverse(row, eps);
        for (v, g) in row.iter_mut().zip(gain.data()) {
            *v *= r * g;
        }
        inv.push(r);
    }
    NormCache {
        input: x.clone(),
        inv,
        output,
    }
}

/// `dx = inv · (g∘dy − x̂ · mean(g∘dy∘x̂))`, `dg += Σ dy∘x̂`.
fn norm_backward(cache: &NormCache, gain: &Tensor, dy: &Tensor, dgain: &mut Tensor) -> Tensor {
    let h = dy.cols();
    let mut dx = Tensor::zeros(dy.shape());
    for t in 0..dy.rows() {
        let inv = cache.inv[t];
        let x = cache.input.row(t);
        let dyr = dy.row(t);
        let mut mean = 0.0;
        for j in 0..h {
            let xhat = x[j] * inv;
            dgain.data_mut()[j] += dyr[j] * xhat;
            mean += gain.data()[j] * dyr[j] * xhat;
        }
        mean /= h as f64;
        for (j, d) in dx.row_mut(t).iter_mut().enumerate() {
            *d = inv * (gain.data()[j] * dyr[j] - x[j] * inv * mean);
        }
    }
    dx
}

/// `out += aᵀ b`
fn add_at_b(out: &mut Tensor, a: &Tensor, b: &Tensor) {
    let (m, n) = (a.cols(), b.cols());
    let data = out.data_mut();
    for t in 0..a.rows() {
        let (ar, br) = (a.row(t), b.row(t));
        for i in 0..m {
            let ai = ar[i];
            if ai == 0.0 {
                continue;
            }
            let row = &mut data[i * n..(i + 1) * n];
            for (o, &bj) in row.iter_mut().zip(br) {
                *o += ai * bj;
            }
        }
    }
}

/// `a bᵀ`
fn mul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(&[a.rows(), b.rows()]);
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.set(i, j, dot(a.row(i), b.row(j)));
        }
    }
    out
}

fn column_block_into(dst: &mut Tensor, src: &Tensor, start: usize) {
    let w = src.cols();
    for t in 0..src.rows() {
        dst.row_mut(t)[start..start + w].copy_from_slice(src.row(t));
    }
}

struct SsdHeadCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Tensor,
    scores: Tensor,
    log_a: Vec<f64>,
    pre_delta: Vec<f64>,
}

struct SsdCache {
    heads: Vec<SsdHeadCache>,
    cat: Tensor,
}

fn ssd_forward(layer: &SsdLayer, x: &Tensor) -> Result<(Tensor, SsdCache)> {
    let inputs = layer.head_inputs(x)?;
    let dt_raw = x.matmul(&layer.delta_proj)?;
    let (len, p) = (x.rows(), layer.head_dim);
    let mut cat = Tensor::zeros(&[len, layer.heads * p]);
    let mut heads = Vec::with_capacity(layer.heads);
    for (h, inp) in inputs.into_iter().enumerate() {
        let mask = inp.mask();
        let mut scores = Tensor::zeros(&[len, len]);
        let mut weights = Tensor::zeros(&[len, len]);
        for a in 0..len {
            for b in 0..=a {
                let s = dot(inp.q.row(a), inp.k.row(b));
                scores.set(a, b, s);
                weights.set(a, b, s * mask.at(a, b));
            }
        }
        let mut y = weights.matmul(&inp.v)?;
        if layer.use_skip {
            y.axpy(layer.skip_d.data()[h], &inp.v)?;
        }
        column_block_into(&mut cat, &y, h * p);
        let bias = layer.delta_bias.data()[h];
        heads.push(SsdHeadCache {
            pre_delta: (0..len).map(|t| dt_raw.at(t, h) + bias).collect(),
            q: inp.q,
            k: inp.k,
            v: inp.v,
            mask,
            scores,
            log_a: inp.log_a,
        });
    }
    let out = cat.matmul(&layer.out_proj)?;
    Ok((out, SsdCache { heads, cat }))
}

fn ssd_backward(layer: &SsdLayer, x: &Tensor, cache: &SsdCache, dout: &Tensor, g: &mut SsdLayer) -> Result<Tensor> {
    add_at_b(&mut g.out_proj, &cache.cat, dout);
    let dcat = mul_bt(dout, &layer.out_proj);
    let (len, n, p) = (x.rows(), layer.state_dim, layer.head_dim);
    let mut dq_all = Tensor::zeros(&[len, layer.heads * n]);
    let mut dk_all = Tensor::zeros(&[len, layer.heads * n]);
    let mut dv_all = Tensor::zeros(&[len, layer.heads * p]);
    let mut dpre = Tensor::zeros(&[len, layer.heads]);
    for (h, hc) in cache.heads.iter().enumerate() {
        let dy = dcat.column_block(h * p, (h + 1) * p);
        // dW = dY Vᵀ on the lower triangle
        let dw = mul_bt(&dy, &hc.v);
        let mut ds = Tensor::zeros(&[len, len]);
        let mut dv = Tensor::zeros(&[len, p]);
        // G[a][b] = dM[a][b] · M[a][b]; dℓ_t = Σ_{b < t ≤ a} G[a][b]
        let mut dlog_a = vec![0.0; len];
        for a in 0..len {
            let mut prefix = 0.0;
            for b in 0..=a {
                let m = hc.mask.at(a, b);
                let w = m * hc.scores.at(a, b);
                ds.set(a, b, dw.at(a, b) * m);
                for (d, &yv) in dv.row_mut(b).iter_mut().zip(dy.row(a)) {
                    *d += w * yv;
                }
                if b < a {
                    prefix += dw.at(a, b) * hc.scores.at(a, b) * m;
                    dlog_a[b + 1] += prefix;
                }
            }
        }
        if layer.use_skip {
            let d = layer.skip_d.data()[h];
            g.skip_d.data_mut()[h] += dy.data().iter().zip(hc.v.data()).map(|(a, b)| a * b).sum::<f64>();
            dv.axpy(d, &dy)?;
        }
        let dq = ds.matmul(&hc.k)?;
        let dk = ds.transpose().matmul(&hc.q)?;
        column_block_into(&mut dq_all, &dq, h * n);
        column_block_into(&mut dk_all, &dk, h * n);
        column_block_into(&mut dv_all, &dv, h * p);
        // log a_t = -exp(a_log) Δ_t
        let rate = layer.a_log.data()[h].exp();
        g.a_log.data_mut()[h] += dlog_a.iter().zip(&hc.log_a).map(|(d, l)| d * l).sum::<f64>();
        for t in 0..len {
            let ddelta = -rate * dlog_a[t];
            let dp = ddelta * sigmoid(hc.pre_delta[t]);
            dpre.set(t, h, dp);
            g.delta_bias.data_mut()[h] += dp;
        }
    }
    add_at_b(&mut g.q_proj, x, &dq_all);
    add_at_b(&mut g.k_proj, x, &dk_all);
    add_at_b(&mut g.v_proj, x, &dv_all);
    add_at_b(&mut g.delta_proj, x, &dpre);
    let mut dx = mul_bt(&dq_all, &layer.q_proj);
    dx.add_assign(&mul_bt(&dk_all, &layer.k_proj))?;
    dx.add_assign(&mul_bt(&dv_all, &layer.v_proj))?;
    dx.add_assign(&mul_bt(&dpre, &layer.delta_proj))?;
    Ok(dx)
}

struct AttnCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    weights: Vec<Tensor>,
    cat: Tensor,
}

fn attn_forward(layer: &AttentionLayer, x: &Tensor) -> Result<(Tensor, AttnCache)> {
    let weights = layer.attention_weights(x, None)?;
    let (q, k, v) = (
        x.matmul(&layer.q_proj)?,
        x.matmul(&layer.k_proj)?,
        x.matmul(&layer.v_proj)?,
    );
    let d = layer.head_dim();
    let mut cat = Tensor::zeros(&[x.rows(), q.cols()]);
    for (h, w) in weights.iter().enumerate() {
        column_block_into(&mut cat, &w.matmul(&v.column_block(h * d, (h + 1) * d))?, h * d);
    }
    let out = cat.matmul(&layer.o_proj)?;
    Ok((out, AttnCache { q, k, v, weights, cat }))
}

fn attn_backward(
    layer: &AttentionLayer,
    x: &Tensor,
    cache: &AttnCache,
    dout: &Tensor,
    g: &mut AttentionLayer,
) -> Result<Tensor> {
    add_at_b(&mut g.o_proj, &cache.cat, dout);
    let dcat = mul_bt(dout, &layer.o_proj);
    let (len, d) = (x.rows(), layer.head_dim());
    let scale = 1.0 / (d as f64).sqrt();
    let width = cache.q.cols();
    let (mut dq, mut dk, mut dv) = (
        Tensor::zeros(&[len, width]),
        Tensor::zeros(&[len, width]),
        Tensor::zeros(&[len, width]),
    );
    for (h, a) in cache.weights.iter().enumerate() {
        let (qh, kh, vh) = (
            cache.q.column_block(h * d, (h + 1) * d),
            cache.k.column_block(h * d, (h + 1) * d),
            cache.v.column_block(h * d, (h + 1) * d),
        );
        let dz = dcat.column_block(h * d, (h + 1) * d);
        let da = mul_bt(&dz, &vh);
        let dvh = a.transpose().matmul(&dz)?;
        // dS = A ∘ (dA − rowsum(dA ∘ A))
        let mut ds = Tensor::zeros(&[len, len]);
        for r in 0..len {
            let inner: f64 = (0..=r).map(|c| da.at(r, c) * a.at(r, c)).sum();
            for c in 0..=r {
                ds.set(r, c, a.at(r, c) * (da.at(r, c) - inner) * scale);
            }
        }
        column_block_into(&mut dq, &ds.matmul(&kh)?, h * d);
        column_block_into(&mut dk, &ds.transpose().matmul(&qh)?, h * d);
        column_block_into(&mut dv, &dvh, h * d);
    }
    add_at_b(&mut g.q_proj, x, &dq);
    add_at_b(&mut g.k_proj, x, &dk);
    add_at_b(&mut g.v_proj, x, &dv);
    let mut dx = mul_bt(&dq, &layer.q_proj);
    dx.add_assign(&mul_bt(&dk, &layer.k_proj))?;
    dx.add_assign(&mul_bt(&dv, &layer.v_proj))?;
    Ok(dx)
}

struct FfCache {
    pre: Tensor,
    act: Tensor,
}

fn ff_forward(layer: &AttentionLayer, x: &Tensor) -> Result<(Tensor, FfCache)> {
    let mut pre = x.matmul(&layer.ff_in)?;
    let f = pre.cols();
    for row in pre.data_mut().chunks_mut(f) {
        for (v, b) in row.iter_mut().zip(layer.ff_in_bias.data()) {
            *v += b;
        }
    }
    let act = pre.map(gelu);
    let mut out = act.matmul(&layer.ff_out)?;
    let h = out.cols();
    for row in out.data_mut().chunks_mut(h) {
        for (v, b) in row.iter_mut().zip(layer.ff_out_bias.data()) {
            *v += b;
        }
    }
    Ok((out, FfCache { pre, act }))
}

fn ff_backward(layer: &AttentionLayer, x: &Tensor, cache: &FfCache, dout: &Tensor, g: &mut AttentionLayer) -> Tensor {
    add_at_b(&mut g.ff_out, &cache.act, dout);
    for row in dout.data().chunks(dout.cols()) {
        for (b, d) in g.ff_out_bias.data_mut().iter_mut().zip(row) {
            *b += d;
        }
    }
    let mut dpre = mul_bt(dout, &layer.ff_out);
    for (d, &u) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
        *d *= gelu_grad(u);
    }
    add_at_b(&mut g.ff_in, x, &dpre);
    for row in dpre.data().chunks(dpre.cols()) {
        for (b, d) in g.ff_in_bias.data_mut().iter_mut().zip(row) {
            *b += d;
        }
    }
    mul_bt(&dpre, &layer.ff_in)
}

enum MixCache {
    Ssd(SsdCache),
    Attention {
        mix: AttnCache,
        ff_norm: NormCache,
        ff: FfCache,
    },
}

struct LayerCache {
    norm: NormCache,
    mix: MixCache,
}

/// Zero-valued gradient container with the model's shapes.
pub fn zero_grads(weights: &ModelWeights) -> ModelWeights {
    let mut g = weights.clone();
    for (_, t) in g.named_params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    g
}

/// Accumulates the gradient of one record's loss into `grads` (scaled by
/// `weight`) and returns the unscaled loss.
fn accumulate(weights: &ModelWeights, record: &PromptRecord, weight: f64, grads: &mut ModelWeights) -> Result<f64> {
    let eps = weights.spec.norm_eps;
    let tokens = &record.token_ids;
    let mut h = weights.embed_tokens(tokens)?;
    let mut caches = Vec::with_capacity(weights.num_layers());
    for layer in &weights.layers {
        let norm = norm_forward(&h, layer.norm(), eps);
        let mix = match layer {
            Layer::Ssd(l) => {
                let (out, c) = ssd_forward(l, &norm.output)?;
                h.add_assign(&out)?;
                MixCache::Ssd(c)
            }
            Layer::Attention(l) => {
                let (out, mix) = attn_forward(l, &norm.output)?;
                h.add_assign(&out)?;
                let ff_norm = norm_forward(&h, &l.norm_ff, eps);
                let (out, ff) = ff_forward(l, &ff_norm.output)?;
                h.add_assign(&out)?;
                MixCache::Attention { mix, ff_norm, ff }
            }
            Layer::Mamba1(_) => {
                return Err(Error::Config("mamba1 layers are not trainable".into()));
            }
        };
        caches.push(LayerCache { norm, mix });
    }

    // Only the final position carries loss.
    let last = tokens.len() - 1;
    let hidden = weights.spec.embed_dim;
    let last_row = Tensor::new(vec![1, hidden], h.row(last).to_vec())?;
    let final_norm = norm_forward(&last_row, &weights.final_norm, eps);
    let z = final_norm.output.row(0);
    let vocab = weights.spec.vocab_size;
    let mut logits: Vec<f64> = match &weights.unembed {
        Some(u) => (0..vocab)
            .map(|v| (0..hidden).map(|j| z[j] * u.at(j, v)).sum())
            .collect(),
        None => (0..vocab).map(|v| dot(z, weights.embed.row(v))).collect(),
    };
    let answer = record.answer_token;
    if answer >= vocab {
        return Err(Error::Input(format!("answer token {answer} outside vocabulary")));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[answer];
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss} on record {}",
            record.id
        )));
    }
    softmax_in_place(&mut logits)?;
    let mut dlogits = logits;
    dlogits[answer] -= 1.0;
    dlogits.iter_mut().for_each(|d| *d *= weight);

    let mut dz = vec![0.0; hidden];
    match (&weights.unembed, &mut grads.unembed) {
        (Some(u), Some(gu)) => {
            for j in 0..hidden {
                let urow = u.row(j);
                dz[j] = dot(urow, &dlogits);
                for (gv, &dl) in gu.row_mut(j).iter_mut().zip(&dlogits) {
                    *gv += z[j] * dl;
                }
            }
        }
        _ => {
            for (v, &dl) in dlogits.iter().enumerate() {
                let erow = weights.embed.row(v);
                for j in 0..hidden {
                    dz[j] += dl * erow[j];
                }
                for (ge, &zj) in grads.embed.row_mut(v).iter_mut().zip(z) {
                    *ge += dl * zj;
                }
            }
        }
    }
    let dz = Tensor::new(vec![1, hidden], dz)?;
    let dlast = norm_backward(&final_norm, &weights.final_norm, &dz, &mut grads.final_norm);
    let mut dh = Tensor::zeros(&[tokens.len(), hidden]);
    dh.row_mut(last).copy_from_slice(dlast.row(0));

    for ((layer, cache), glayer) in weights.layers.iter().zip(&caches).zip(grads.layers.iter_mut()).rev() {
        match (layer, &cache.mix, glayer) {
            (Layer::Ssd(l), MixCache::Ssd(c), Layer::Ssd(g)) => {
                let dx = ssd_backward(l, &cache.norm.output, c, &dh, g)?;
                dh.add_assign(&norm_backward(&cache.norm, &l.norm, &dx, &mut g.norm))?;
            }
            (Layer::Attention(l), MixCache::Attention { mix, ff_norm, ff }, Layer::Attention(g)) => {
                let dxf = ff_backward(l, &ff_norm.output, ff, &dh, g);
                dh.add_assign(&norm_backward(ff_norm, &l.norm_ff, &dxf, &mut g.norm_ff))?;
                let dx = attn_backward(l, &cache.norm.output, mix, &dh, g)?;
                dh.add_assign(&norm_backward(&cache.norm, &l.norm, &dx, &mut g.norm))?;
            }
            _ => return Err(Error::Contract("gradient container does not match model".into())),
        }
    }

    for (t, &tok) in tokens.iter().enumerate() {
        for (ge, &d) in grads.embed.row_mut(tok).iter_mut().zip(dh.row(t)) {
            *ge += d;
        }
        if let Some(gp) = &mut grads.positions {
            for (g, &d) in gp.row_mut(t).iter_mut().zip(dh.row(t)) {
                *g += d;
            }
        }
    }
    Ok(loss)
}

/// Mean final-position cross-entropy over `batch` and its gradient with
/// respect to every parameter.
pub fn loss_and_grads(weights: &ModelWeights, batch: &[PromptRecord]) -> Result<(f64, ModelWeights)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut grads = zero_grads(weights);
    let w = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for record in batch {
        total += accumulate(weights, record, w, &mut grads)?;
    }
    Ok((total * w, grads))
}

/// Mean loss only, through the model's own forward pass.
pub fn batch_loss(weights: &ModelWeights, batch: &[PromptRecord]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut total = 0.0;
    for r in batch {
        let logits = weights.forward(&r.token_ids)?;
        let row = logits.row(logits.rows() - 1);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - row[r.answer_token];
    }
    Ok(total / batch.len() as f64)
}
