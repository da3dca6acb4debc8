//! Single-layer LSTM language model.
//!
//! Four named segments, matching the layer taxonomy the attacks target:
//! `encoder` (token embedding, vocab x hidden), `ih` (input-to-hidden weights,
//! 4*hidden x hidden, gate rows ordered i,f,g,o), `hh` (hidden-to-hidden,
//! same shape) and `decoder` (output projection vocab x hidden plus vocab
//! biases). No gate biases: the minimal model exposing exactly these four
//! layers.

use super::{axpy, dot, log_sum_exp, sigmoid, Batch};
use crate::error::Result;
use crate::params::{LayerSchema, ModelMeta, ParamVector};

pub(super) fn schema(meta: ModelMeta) -> Result<LayerSchema> {
    let v = meta.vocab_size;
    let h = meta.hidden_dim;
    LayerSchema::with_meta(
        vec![
            ("encoder".into(), v * h),
            ("ih".into(), 4 * h * h),
            ("hh".into(), 4 * h * h),
            ("decoder".into(), v * h + v),
        ],
        meta,
    )
}

struct Views<'a> {
    enc: &'a [f64],
    ih: &'a [f64],
    hh: &'a [f64],
    dec_w: &'a [f64],
    dec_b: &'a [f64],
    h: usize,
    v: usize,
}

fn views<'a>(meta: &ModelMeta, params: &'a ParamVector) -> Views<'a> {
    let (v, h) = (meta.vocab_size, meta.hidden_dim);
    let schema = params.schema();
    let vals = params.values();
    let enc = &vals[schema.range_of("encoder").unwrap()];
    let ih = &vals[schema.range_of("ih").unwrap()];
    let hh = &vals[schema.range_of("hh").unwrap()];
    let dec = &vals[schema.range_of("decoder").unwrap()];
    Views { enc, ih, hh, dec_w: &dec[..v * h], dec_b: &dec[v * h..], h, v }
}

/// One cell step: fills `gates` (i,f,g,o each `h` wide), updates `c`/`hidden`.
#[inline]
fn cell_step(vw: &Views, tok: usize, hidden: &mut [f64], c: &mut [f64], gates: &mut [f64]) {
    let h = vw.h;
    let x = &vw.enc[tok * h..(tok + 1) * h];
    for r in 0..4 * h {
        gates[r] = dot(&vw.ih[r * h..(r + 1) * h], x) + dot(&vw.hh[r * h..(r + 1) * h], hidden);
    }
    for j in 0..h {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[h + j]);
        let g = gates[2 * h + j].tanh();
        let o = sigmoid(gates[3 * h + j]);
        gates[j] = i;
        gates[h + j] = f;
        gates[2 * h + j] = g;
        gates[3 * h + j] = o;
        c[j] = f * c[j] + i * g;
        hidden[j] = o * c[j].tanh();
    }
}

#[inline]
fn logits_at(vw: &Views, hidden: &[f64], logits: &mut [f64]) {
    for u in 0..vw.v {
        logits[u] = dot(&vw.dec_w[u * vw.h..(u + 1) * vw.h], hidden) + vw.dec_b[u];
    }
}

pub(super) fn loss(meta: &ModelMeta, params: &ParamVector, batch: &Batch) -> Result<f64> {
    let vw = views(meta, params);
    let (h, v) = (vw.h, vw.v);
    let seq = batch.seq_len();
    let mut total = 0.0;
    let mut hidden = vec![0.0; h];
    let mut c = vec![0.0; h];
    let mut gates = vec![0.0; 4 * h];
    let mut logits = vec![0.0; v];
    for r in 0..batch.rows() {
        hidden.fill(0.0);
        c.fill(0.0);
        let toks = batch.token_row(r);
        let tgts = batch.target_row(r);
        for t in 0..seq {
            cell_step(&vw, toks[t] as usize, &mut hidden, &mut c, &mut gates);
            logits_at(&vw, &hidden, &mut logits);
            let (lse, _) = log_sum_exp(&logits);
            total += lse - logits[tgts[t] as usize];
        }
    }
    Ok(total / (batch.rows() * seq) as f64)
}

pub(super) fn predict(meta: &ModelMeta, params: &ParamVector, batch: &Batch) -> Result<Vec<u32>> {
    let vw = views(meta, params);
    let (h, v) = (vw.h, vw.v);
    let seq = batch.seq_len();
    let mut preds = Vec::with_capacity(batch.rows() * seq);
    let mut hidden = vec![0.0; h];
    let mut c = vec![0.0; h];
    let mut gates = vec![0.0; 4 * h];
    let mut logits = vec![0.0; v];
    for r in 0..batch.rows() {
        hidden.fill(0.0);
        c.fill(0.0);
        let toks = batch.token_row(r);
        for t in 0..seq {
            cell_step(&vw, toks[t] as usize, &mut hidden, &mut c, &mut gates);
            logits_at(&vw, &hidden, &mut logits);
            let best = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(u, _)| u as u32)
                .unwrap();
            preds.push(best);
        }
    }
    Ok(preds)
}

pub(super) fn loss_grad(
    meta: &ModelMeta,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, ParamVector)> {
    let vw = views(meta, params);
    let (h, v) = (vw.h, vw.v);
    let seq = batch.seq_len();
    let inv_n = 1.0 / (batch.rows() * seq) as f64;
    let mut total = 0.0;

    let mut grad = ParamVector::zeros(params.schema().clone());
    let schema = params.schema().clone();
    let enc_r = schema.range_of("encoder").unwrap();
    let ih_r = schema.range_of("ih").unwrap();
    let hh_r = schema.range_of("hh").unwrap();
    let dec_r = schema.range_of("decoder").unwrap();

    // Per-step caches for one row.
    let mut gates_cache = vec![0.0; seq * 4 * h]; // i,f,g,o after activation
    let mut c_cache = vec![0.0; seq * h];
    let mut h_cache = vec![0.0; seq * h];
    let mut dh_list = vec![0.0; seq * h]; // dL/dh_t from the decoder

    let mut hidden = vec![0.0; h];
    let mut c = vec![0.0; h];
    let mut logits = vec![0.0; v];
    let mut da = vec![0.0; 4 * h];
    let mut dx = vec![0.0; h];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];

    for r in 0..batch.rows() {
        hidden.fill(0.0);
        c.fill(0.0);
        dh_list.fill(0.0);
        let toks = batch.token_row(r);
        let tgts = batch.target_row(r);

        // Forward with caches, accumulating decoder gradients on the fly.
        for t in 0..seq {
            cell_step(
                &vw,
                toks[t] as usize,
                &mut hidden,
                &mut c,
                &mut gates_cache[t * 4 * h..(t + 1) * 4 * h],
            );
            c_cache[t * h..(t + 1) * h].copy_from_slice(&c);
            h_cache[t * h..(t + 1) * h].copy_from_slice(&hidden);
            logits_at(&vw, &hidden, &mut logits);
            let (lse, max) = log_sum_exp(&logits);
            let y = tgts[t] as usize;
            total += lse - logits[y];
            let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let gvals = grad.values_mut();
            let (dec_wg, dec_bg) = gvals[dec_r.clone()].split_at_mut(v * h);
            let dh_t = &mut dh_list[t * h..(t + 1) * h];
            for u in 0..v {
                let p = (logits[u] - max).exp() / denom;
                let dl = (p - if u == y { 1.0 } else { 0.0 }) * inv_n;
                dec_bg[u] += dl;
                axpy(&mut dec_wg[u * h..(u + 1) * h], dl, &hidden);
                axpy(dh_t, dl, &vw.dec_w[u * h..(u + 1) * h]);
            }
        }

        // Backward through time.
        dh_next.fill(0.0);
        dc_next.fill(0.0);
        for t in (0..seq).rev() {
            let gates = &gates_cache[t * 4 * h..(t + 1) * 4 * h];
            let ct = &c_cache[t * h..(t + 1) * h];
            for j in 0..h {
                let i = gates[j];
                let f = gates[h + j];
                let g = gates[2 * h + j];
                let o = gates[3 * h + j];
                let tc = ct[j].tanh();
                let dh = dh_list[t * h + j] + dh_next[j];
                let c_prev = if t > 0 { c_cache[(t - 1) * h + j] } else { 0.0 };
                let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                da[j] = dc * g * i * (1.0 - i);
                da[h + j] = dc * c_prev * f * (1.0 - f);
                da[2 * h + j] = dc * i * (1.0 - g * g);
                da[3 * h + j] = dh * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            let tok = toks[t] as usize;
            let x = &vw.enc[tok * h..(tok + 1) * h];
            dx.fill(0.0);
            dh_next.fill(0.0);
            let gvals = grad.values_mut();
            for r4 in 0..4 * h {
                let a = da[r4];
                if a == 0.0 {
                    continue;
                }
                axpy(&mut gvals[ih_r.start + r4 * h..ih_r.start + (r4 + 1) * h], a, x);
                axpy(&mut dx, a, &vw.ih[r4 * h..(r4 + 1) * h]);
                if t > 0 {
                    let h_prev = &h_cache[(t - 1) * h..t * h];
                    axpy(&mut gvals[hh_r.start + r4 * h..hh_r.start + (r4 + 1) * h], a, h_prev);
                }
                axpy(&mut dh_next, a, &vw.hh[r4 * h..(r4 + 1) * h]);
            }
            axpy(&mut gvals[enc_r.start + tok * h..enc_r.start + (tok + 1) * h], 1.0, &dx);
        }
    }
    Ok((total * inv_n, grad))
}
