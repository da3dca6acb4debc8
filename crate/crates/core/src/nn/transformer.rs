//! Pre-norm decoder-only transformer, single attention head, learned
//! positional embeddings.
//!
//! Segment names follow the GPT-2 module naming so layer selectors such as
//! `mlp.c_fc` address the same things they would in that model family:
//! `wte`, `wpe`, then per block `h{i}.ln_1`, `h{i}.attn.c_attn`,
//! `h{i}.attn.c_proj`, `h{i}.ln_2`, `h{i}.mlp.c_fc`, `h{i}.mlp.c_proj`,
//! then `ln_f` and `head`. Weight matrices are stored row-major as
//! `[in][out]` with the bias appended to the segment.

use super::{axpy, dot, log_sum_exp, Batch};
use crate::error::Result;
use crate::params::{LayerSchema, ModelMeta, ParamVector};

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(super) fn schema(meta: ModelMeta) -> Result<LayerSchema> {
    let v = meta.vocab_size;
    let h = meta.hidden_dim;
    let s = meta.seq_len;
    let mut segs: Vec<(String, usize)> = vec![("wte".into(), v * h), ("wpe".into(), s * h)];
    for b in 0..meta.num_blocks {
        segs.push((format!("h{b}.ln_1"), 2 * h));
        segs.push((format!("h{b}.attn.c_attn"), h * 3 * h + 3 * h));
        segs.push((format!("h{b}.attn.c_proj"), h * h + h));
        segs.push((format!("h{b}.ln_2"), 2 * h));
        segs.push((format!("h{b}.mlp.c_fc"), h * 4 * h + 4 * h));
        segs.push((format!("h{b}.mlp.c_proj"), 4 * h * h + h));
    }
    segs.push(("ln_f".into(), 2 * h));
    segs.push(("head".into(), h * v + v));
    LayerSchema::with_meta(segs, meta)
}

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_K * (u + GELU_C * u * u * u)).tanh())
}

#[inline]
fn gelu_deriv(u: f64) -> f64 {
    let t = (GELU_K * (u + GELU_C * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * u * u)
}

/// `out = x @ w + b` for one position; `w` is `[in][out]` row-major.
#[inline]
fn linear(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n_out = b.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        axpy(out, xi, &w[i * n_out..(i + 1) * n_out]);
    }
}

/// LayerNorm forward for one position; returns (mean, rstd).
#[inline]
fn ln_forward(x: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for j in 0..x.len() {
        out[j] = (x[j] - mean) * rstd * gamma[j] + beta[j];
    }
    (mean, rstd)
}

/// LayerNorm backward for one position. Accumulates into `dgamma`/`dbeta`,
/// overwrites `dx`.
#[inline]
fn ln_backward(
    x: &[f64],
    mean: f64,
    rstd: f64,
    gamma: &[f64],
    dy: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
) {
    let n = x.len();
    let inv_n = 1.0 / n as f64;
    let mut mean_dxhat = 0.0;
    let mut mean_dxhat_xhat = 0.0;
    for j in 0..n {
        let xhat = (x[j] - mean) * rstd;
        let dxhat = dy[j] * gamma[j];
        dgamma[j] += dy[j] * xhat;
        dbeta[j] += dy[j];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * xhat;
    }
    mean_dxhat *= inv_n;
    mean_dxhat_xhat *= inv_n;
    for j in 0..n {
        let xhat = (x[j] - mean) * rstd;
        let dxhat = dy[j] * gamma[j];
        dx[j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
    }
}

/// Segment ranges resolved once per call.
struct Layout {
    wte: std::ops::Range<usize>,
    wpe: std::ops::Range<usize>,
    blocks: Vec<BlockLayout>,
    ln_f: std::ops::Range<usize>,
    head: std::ops::Range<usize>,
}

struct BlockLayout {
    ln_1: std::ops::Range<usize>,
    c_attn: std::ops::Range<usize>,
    c_proj: std::ops::Range<usize>,
    ln_2: std::ops::Range<usize>,
    c_fc: std::ops::Range<usize>,
    c_proj2: std::ops::Range<usize>,
}

fn layout(meta: &ModelMeta, schema: &LayerSchema) -> Layout {
    let r = |name: &str| schema.range_of(name).unwrap();
    Layout {
        wte: r("wte"),
        wpe: r("wpe"),
        blocks: (0..meta.num_blocks)
            .map(|b| BlockLayout {
                ln_1: r(&format!("h{b}.ln_1")),
                c_attn: r(&format!("h{b}.attn.c_attn")),
                c_proj: r(&format!("h{b}.attn.c_proj")),
                ln_2: r(&format!("h{b}.ln_2")),
                c_fc: r(&format!("h{b}.mlp.c_fc")),
                c_proj2: r(&format!("h{b}.mlp.c_proj")),
            })
            .collect(),
        ln_f: r("ln_f"),
        head: r("head"),
    }
}

/// Per-block forward caches for one row.
struct BlockCache {
    x_in: Vec<f64>,   // L x h, block input
    mean1: Vec<f64>,  // L
    rstd1: Vec<f64>,  // L
    n1: Vec<f64>,     // L x h
    qkv: Vec<f64>,    // L x 3h
    probs: Vec<f64>,  // L x L attention weights (row t: cols 0..=t)
    ao: Vec<f64>,     // L x h attention output
    x_mid: Vec<f64>,  // L x h, input to ln_2
    mean2: Vec<f64>,
    rstd2: Vec<f64>,
    n2: Vec<f64>,   // L x h
    f1: Vec<f64>,   // L x 4h pre-activation
    act: Vec<f64>,  // L x 4h gelu output
}

impl BlockCache {
    fn new(l: usize, h: usize) -> Self {
        Self {
            x_in: vec![0.0; l * h],
            mean1: vec![0.0; l],
            rstd1: vec![0.0; l],
            n1: vec![0.0; l * h],
            qkv: vec![0.0; l * 3 * h],
            probs: vec![0.0; l * l],
            ao: vec![0.0; l * h],
            x_mid: vec![0.0; l * h],
            mean2: vec![0.0; l],
            rstd2: vec![0.0; l],
            n2: vec![0.0; l * h],
            f1: vec![0.0; l * 4 * h],
            act: vec![0.0; l * 4 * h],
        }
    }
}

/// Forward one row into `x` (residual stream, L x h), filling caches.
#[allow(clippy::too_many_arguments)]
fn forward_row(
    meta: &ModelMeta,
    lay: &Layout,
    vals: &[f64],
    toks: &[u32],
    x: &mut [f64],
    caches: &mut [BlockCache],
    scores: &mut [f64],
) {
    let h = meta.hidden_dim;
    let l = toks.len();
    let rsqrt = 1.0 / (h as f64).sqrt();
    let wte = &vals[lay.wte.clone()];
    let wpe = &vals[lay.wpe.clone()];
    for t in 0..l {
        let tok = toks[t] as usize;
        for j in 0..h {
            x[t * h + j] = wte[tok * h + j] + wpe[t * h + j];
        }
    }
    for (bl, cache) in lay.blocks.iter().zip(caches.iter_mut()) {
        cache.x_in.copy_from_slice(x);
        let ln1 = &vals[bl.ln_1.clone()];
        let (g1, b1) = ln1.split_at(h);
        let c_attn = &vals[bl.c_attn.clone()];
        let (wa, ba) = c_attn.split_at(h * 3 * h);
        let c_proj = &vals[bl.c_proj.clone()];
        let (wp, bp) = c_proj.split_at(h * h);
        for t in 0..l {
            let (mean, rstd) = ln_forward(
                &cache.x_in[t * h..(t + 1) * h],
                g1,
                b1,
                &mut cache.n1[t * h..(t + 1) * h],
            );
            cache.mean1[t] = mean;
            cache.rstd1[t] = rstd;
            linear(
                &cache.n1[t * h..(t + 1) * h],
                wa,
                ba,
                &mut cache.qkv[t * 3 * h..(t + 1) * 3 * h],
            );
        }
        // Causal single-head attention.
        for t in 0..l {
            let q = &cache.qkv[t * 3 * h..t * 3 * h + h];
            for j in 0..=t {
                let k = &cache.qkv[j * 3 * h + h..j * 3 * h + 2 * h];
                scores[j] = dot(q, k) * rsqrt;
            }
            let (lse, _) = log_sum_exp(&scores[..=t]);
            let ao_t = &mut cache.ao[t * h..(t + 1) * h];
            ao_t.fill(0.0);
            for j in 0..=t {
                let p = (scores[j] - lse).exp();
                cache.probs[t * l + j] = p;
                let v = &cache.qkv[j * 3 * h + 2 * h..(j + 1) * 3 * h];
                axpy(ao_t, p, v);
            }
        }
        // Projection + residual, then MLP + residual.
        let mut proj = vec![0.0; h];
        for t in 0..l {
            linear(&cache.ao[t * h..(t + 1) * h], wp, bp, &mut proj);
            for j in 0..h {
                x[t * h + j] += proj[j];
            }
        }
        cache.x_mid.copy_from_slice(x);
        let ln2 = &vals[bl.ln_2.clone()];
        let (g2, b2) = ln2.split_at(h);
        let c_fc = &vals[bl.c_fc.clone()];
        let (wfc, bfc) = c_fc.split_at(h * 4 * h);
        let c_proj2 = &vals[bl.c_proj2.clone()];
        let (wpr, bpr) = c_proj2.split_at(4 * h * h);
        let mut f2 = vec![0.0; h];
        for t in 0..l {
            let (mean, rstd) = ln_forward(
                &cache.x_mid[t * h..(t + 1) * h],
                g2,
                b2,
                &mut cache.n2[t * h..(t + 1) * h],
            );
            cache.mean2[t] = mean;
            cache.rstd2[t] = rstd;
            linear(
                &cache.n2[t * h..(t + 1) * h],
                wfc,
                bfc,
                &mut cache.f1[t * 4 * h..(t + 1) * 4 * h],
            );
            for j in 0..4 * h {
                cache.act[t * 4 * h + j] = gelu(cache.f1[t * 4 * h + j]);
            }
            linear(&cache.act[t * 4 * h..(t + 1) * 4 * h], wpr, bpr, &mut f2);
            for j in 0..h {
                x[t * h + j] += f2[j];
            }
        }
    }
}

/// Run forward and hand each position's logits to `sink(row, t, logits, target)`.
fn forward_logits<F>(meta: &ModelMeta, params: &ParamVector, batch: &Batch, mut sink: F) -> Result<()>
where
    F: FnMut(usize, usize, &[f64], u32),
{
    let h = meta.hidden_dim;
    let v = meta.vocab_size;
    let l = batch.seq_len();
    let lay = layout(meta, params.schema());
    let vals = params.values();
    let mut caches: Vec<BlockCache> = (0..meta.num_blocks).map(|_| BlockCache::new(l, h)).collect();
    let mut x = vec![0.0; l * h];
    let mut scores = vec![0.0; l];
    let mut xf = vec![0.0; h];
    let mut logits = vec![0.0; v];
    let lnf = &vals[lay.ln_f.clone()];
    let (gf, bf) = lnf.split_at(h);
    let head = &vals[lay.head.clone()];
    let (wh, bh) = head.split_at(h * v);
    for r in 0..batch.rows() {
        forward_row(meta, &lay, vals, batch.token_row(r), &mut x, &mut caches, &mut scores);
        let tgts = batch.target_row(r);
        for t in 0..l {
            ln_forward(&x[t * h..(t + 1) * h], gf, bf, &mut xf);
            linear(&xf, wh, bh, &mut logits);
            sink(r, t, &logits, tgts[t]);
        }
    }
    Ok(())
}

pub(super) fn loss(meta: &ModelMeta, params: &ParamVector, batch: &Batch) -> Result<f64> {
    let mut total = 0.0;
    forward_logits(meta, params, batch, |_, _, logits, y| {
        let (lse, _) = log_sum_exp(logits);
        total += lse - logits[y as usize];
    })?;
    Ok(total / (batch.rows() * batch.seq_len()) as f64)
}

pub(super) fn predict(meta: &ModelMeta, params: &ParamVector, batch: &Batch) -> Result<Vec<u32>> {
    let mut preds = Vec::with_capacity(batch.rows() * batch.seq_len());
    forward_logits(meta, params, batch, |_, _, logits, _| {
        let best = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(u, _)| u as u32)
            .unwrap();
        preds.push(best);
    })?;
    Ok(preds)
}

pub(super) fn loss_grad(
    meta: &ModelMeta,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, ParamVector)> {
    let h = meta.hidden_dim;
    let v = meta.vocab_size;
    let l = batch.seq_len();
    let inv_n = 1.0 / (batch.rows() * l) as f64;
    let rsqrt = 1.0 / (h as f64).sqrt();
    let lay = layout(meta, params.schema());
    let vals = params.values();
    let mut grad = ParamVector::zeros(params.schema().clone());
    let mut total = 0.0;

    let mut caches: Vec<BlockCache> = (0..meta.num_blocks).map(|_| BlockCache::new(l, h)).collect();
    let mut x = vec![0.0; l * h];
    let mut scores = vec![0.0; l];
    // Final-norm caches for the whole row.
    let mut xf = vec![0.0; l * h];
    let mut meanf = vec![0.0; l];
    let mut rstdf = vec![0.0; l];
    let mut logits = vec![0.0; v];
    let mut dlogits = vec![0.0; v];
    let mut dx = vec![0.0; l * h]; // gradient w.r.t. the residual stream
    let mut dxf = vec![0.0; h];
    let mut dn = vec![0.0; h];
    let mut dqkv = vec![0.0; l * 3 * h];
    let mut dao = vec![0.0; h];
    let mut dp = vec![0.0; l];
    let mut ds = vec![0.0; l];
    let mut df1 = vec![0.0; 4 * h];
    let mut dact = vec![0.0; 4 * h];

    let lnf = &vals[lay.ln_f.clone()];
    let (gf, bf) = lnf.split_at(h);
    let head = &vals[lay.head.clone()];
    let (wh, bh) = head.split_at(h * v);

    for r in 0..batch.rows() {
        let toks = batch.token_row(r);
        let tgts = batch.target_row(r);
        forward_row(meta, &lay, vals, toks, &mut x, &mut caches, &mut scores);
        for t in 0..l {
            let (mean, rstd) = ln_forward(&x[t * h..(t + 1) * h], gf, bf, &mut xf[t * h..(t + 1) * h]);
            meanf[t] = mean;
            rstdf[t] = rstd;
        }

        dx.fill(0.0);
        {
            // Head + final LayerNorm backward.
            let gvals = grad.values_mut();
            for t in 0..l {
                let xf_t = &xf[t * h..(t + 1) * h];
                linear(xf_t, wh, bh, &mut logits);
                let (lse, max) = log_sum_exp(&logits);
                let y = tgts[t] as usize;
                total += lse - logits[y];
                let denom: f64 = logits.iter().map(|lv| (lv - max).exp()).sum();
                for u in 0..v {
                    let p = (logits[u] - max).exp() / denom;
                    dlogits[u] = (p - if u == y { 1.0 } else { 0.0 }) * inv_n;
                }
                let (dwh, dbh) = gvals[lay.head.clone()].split_at_mut(h * v);
                axpy(dbh, 1.0, &dlogits);
                dxf.fill(0.0);
                for i in 0..h {
                    axpy(&mut dwh[i * v..(i + 1) * v], xf_t[i], &dlogits);
                    dxf[i] = dot(&wh[i * v..(i + 1) * v], &dlogits);
                }
                let (dgf, dbf) = gvals[lay.ln_f.clone()].split_at_mut(h);
                ln_backward(
                    &x[t * h..(t + 1) * h],
                    meanf[t],
                    rstdf[t],
                    gf,
                    &dxf,
                    dgf,
                    dbf,
                    &mut dn,
                );
                axpy(&mut dx[t * h..(t + 1) * h], 1.0, &dn);
            }
        }

        // Blocks in reverse.
        for (bl, cache) in lay.blocks.iter().zip(caches.iter()).rev() {
            let ln1 = &vals[bl.ln_1.clone()];
            let (g1, _) = ln1.split_at(h);
            let c_attn = &vals[bl.c_attn.clone()];
            let (wa, _) = c_attn.split_at(h * 3 * h);
            let c_proj = &vals[bl.c_proj.clone()];
            let (wp, _) = c_proj.split_at(h * h);
            let ln2 = &vals[bl.ln_2.clone()];
            let (g2, _) = ln2.split_at(h);
            let c_fc = &vals[bl.c_fc.clone()];
            let (wfc, _) = c_fc.split_at(h * 4 * h);
            let c_proj2 = &vals[bl.c_proj2.clone()];
            let (wpr, _) = c_proj2.split_at(4 * h * h);

            // MLP backward; residual means d(x_mid) accumulates d(x_out) too.
            {
                let gvals = grad.values_mut();
                for t in 0..l {
                    let dxo = dx[t * h..(t + 1) * h].to_vec();
                    let act_t = &cache.act[t * 4 * h..(t + 1) * 4 * h];
                    let f1_t = &cache.f1[t * 4 * h..(t + 1) * 4 * h];
                    {
                        let (dwpr, dbpr) = gvals[bl.c_proj2.clone()].split_at_mut(4 * h * h);
                        axpy(dbpr, 1.0, &dxo);
                        for i in 0..4 * h {
                            axpy(&mut dwpr[i * h..(i + 1) * h], act_t[i], &dxo);
                            dact[i] = dot(&wpr[i * h..(i + 1) * h], &dxo);
                        }
                    }
                    for i in 0..4 * h {
                        df1[i] = dact[i] * gelu_deriv(f1_t[i]);
                    }
                    {
                        let n2_t = &cache.n2[t * h..(t + 1) * h];
                        let (dwfc, dbfc) = gvals[bl.c_fc.clone()].split_at_mut(h * 4 * h);
                        axpy(dbfc, 1.0, &df1);
                        for i in 0..h {
                            axpy(&mut dwfc[i * 4 * h..(i + 1) * 4 * h], n2_t[i], &df1);
                            dn[i] = dot(&wfc[i * 4 * h..(i + 1) * 4 * h], &df1);
                        }
                    }
                    let (dg2, db2) = gvals[bl.ln_2.clone()].split_at_mut(h);
                    let mut dmid = vec![0.0; h];
                    ln_backward(
                        &cache.x_mid[t * h..(t + 1) * h],
                        cache.mean2[t],
                        cache.rstd2[t],
                        g2,
                        &dn,
                        dg2,
                        db2,
                        &mut dmid,
                    );
                    // dx now holds d(x_mid) = residual grad + ln path.
                    axpy(&mut dx[t * h..(t + 1) * h], 1.0, &dmid);
                }
            }

            // Attention backward.
            dqkv.fill(0.0);
            {
                let gvals = grad.values_mut();
                for t in 0..l {
                    let dmid = dx[t * h..(t + 1) * h].to_vec();
                    let ao_t = &cache.ao[t * h..(t + 1) * h];
                    {
                        let (dwp, dbp) = gvals[bl.c_proj.clone()].split_at_mut(h * h);
                        axpy(dbp, 1.0, &dmid);
                        for i in 0..h {
                            axpy(&mut dwp[i * h..(i + 1) * h], ao_t[i], &dmid);
                            dao[i] = dot(&wp[i * h..(i + 1) * h], &dmid);
                        }
                    }
                    let q_t = &cache.qkv[t * 3 * h..t * 3 * h + h];
                    let mut dot_pd = 0.0;
                    for j in 0..=t {
                        let v_j = &cache.qkv[j * 3 * h + 2 * h..(j + 1) * 3 * h];
                        dp[j] = dot(&dao, v_j);
                        let p = cache.probs[t * l + j];
                        dot_pd += p * dp[j];
                        // dv_j += p * dao
                        axpy(&mut dqkv[j * 3 * h + 2 * h..(j + 1) * 3 * h], p, &dao);
                    }
                    for j in 0..=t {
                        let p = cache.probs[t * l + j];
                        ds[j] = p * (dp[j] - dot_pd);
                    }
                    for j in 0..=t {
                        let k_j = &cache.qkv[j * 3 * h + h..j * 3 * h + 2 * h];
                        axpy(&mut dqkv[t * 3 * h..t * 3 * h + h], ds[j] * rsqrt, k_j);
                        axpy(&mut dqkv[j * 3 * h + h..j * 3 * h + 2 * h], ds[j] * rsqrt, q_t);
                    }
                }
                // Through c_attn and ln_1 back to the residual stream.
                for t in 0..l {
                    let dqkv_t = &dqkv[t * 3 * h..(t + 1) * 3 * h];
                    let n1_t = &cache.n1[t * h..(t + 1) * h];
                    {
                        let (dwa, dba) = gvals[bl.c_attn.clone()].split_at_mut(h * 3 * h);
                        axpy(dba, 1.0, dqkv_t);
                        for i in 0..h {
                            axpy(&mut dwa[i * 3 * h..(i + 1) * 3 * h], n1_t[i], dqkv_t);
                            dn[i] = dot(&wa[i * 3 * h..(i + 1) * 3 * h], dqkv_t);
                        }
                    }
                    let (dg1, db1) = gvals[bl.ln_1.clone()].split_at_mut(h);
                    let mut din = vec![0.0; h];
                    ln_backward(
                        &cache.x_in[t * h..(t + 1) * h],
                        cache.mean1[t],
                        cache.rstd1[t],
                        g1,
                        &dn,
                        dg1,
                        db1,
                        &mut din,
                    );
                    axpy(&mut dx[t * h..(t + 1) * h], 1.0, &din);
                }
            }
        }

        // Embedding gradients.
        let gvals = grad.values_mut();
        for t in 0..l {
            let tok = toks[t] as usize;
            let dx_t = &dx[t * h..(t + 1) * h];
            axpy(
                &mut gvals[lay.wte.start + tok * h..lay.wte.start + (tok + 1) * h],
                1.0,
                dx_t,
            );
            axpy(
                &mut gvals[lay.wpe.start + t * h..lay.wpe.start + (t + 1) * h],
                1.0,
                dx_t,
            );
        }
    }
    Ok((total * inv_n, grad))
}
