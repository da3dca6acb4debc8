//! Tiny language models with exact forward/backward passes.
//!
//! Two model families share one interface: a single-layer LSTM and a pre-norm
//! decoder-only transformer, both over `f64` parameters laid out in a
//! [`LayerSchema`]. Gradients are hand-derived (no autodiff) and verified
//! against central finite differences in the test suite.

mod lstm;
mod transformer;

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{LayerSchema, ParamVector};
use crate::rng::{self, tag};

pub use crate::params::{ModelKind, ModelMeta};

/// Model family, dimensions and init seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    /// Transformer only; the LSTM ignores it.
    pub num_blocks: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.hidden_dim == 0 || self.seq_len == 0 {
            return Err(Error::Config("hidden_dim and seq_len must be positive".into()));
        }
        if self.kind == ModelKind::Transformer && self.num_blocks == 0 {
            return Err(Error::Config("transformer needs at least one block".into()));
        }
        Ok(())
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            kind: self.kind,
            vocab_size: self.vocab_size,
            hidden_dim: self.hidden_dim,
            num_blocks: if self.kind == ModelKind::Lstm { 1 } else { self.num_blocks },
            seq_len: self.seq_len,
        }
    }

    pub fn schema(&self) -> Result<Arc<LayerSchema>> {
        self.validate()?;
        let schema = match self.kind {
            ModelKind::Lstm => lstm::schema(self.meta())?,
            ModelKind::Transformer => transformer::schema(self.meta())?,
        };
        Ok(Arc::new(schema))
    }
}

/// A batch of next-token-prediction rows.
///
/// `targets` are `token_ids` shifted left by one within each row; the final
/// target is the token that followed the row in the source stream, so every
/// position has a valid label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    rows: usize,
    seq_len: usize,
    token_ids: Vec<u32>,
    targets: Vec<u32>,
}

impl Batch {
    /// Build from raw rows of `seq_len + 1` tokens each.
    pub fn from_rows(raw: &[Vec<u32>]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Data("batch needs at least one row".into()));
        }
        let len = raw[0].len();
        if len < 2 {
            return Err(Error::Data("rows need at least 2 tokens".into()));
        }
        let seq_len = len - 1;
        let mut token_ids = Vec::with_capacity(raw.len() * seq_len);
        let mut targets = Vec::with_capacity(raw.len() * seq_len);
        for row in raw {
            if row.len() != len {
                return Err(Error::Data("ragged rows in batch".into()));
            }
            token_ids.extend_from_slice(&row[..seq_len]);
            targets.extend_from_slice(&row[1..]);
        }
        Ok(Self { rows: raw.len(), seq_len, token_ids, targets })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn token_row(&self, r: usize) -> &[u32] {
        &self.token_ids[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn target_row(&self, r: usize) -> &[u32] {
        &self.targets[r * self.seq_len..(r + 1) * self.seq_len]
    }

    /// The raw source row: tokens followed by the final target.
    pub fn raw_row(&self, r: usize) -> Vec<u32> {
        let mut row = self.token_row(r).to_vec();
        row.push(self.target_row(r)[self.seq_len - 1]);
        row
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let v = vocab_size as u32;
        if let Some(&bad) = self.token_ids.iter().chain(&self.targets).find(|&&t| t >= v) {
            return Err(Error::Data(format!("token id {bad} >= vocab size {vocab_size}")));
        }
        for r in 0..self.rows {
            let toks = self.token_row(r);
            let tgts = self.target_row(r);
            if toks[1..] != tgts[..self.seq_len - 1] {
                return Err(Error::Data(format!("row {r}: targets are not tokens shifted left")));
            }
        }
        Ok(())
    }
}

fn meta_of(params: &ParamVector) -> Result<ModelMeta> {
    params
        .schema()
        .meta()
        .ok_or_else(|| Error::Config("schema carries no model dimensions".into()))
}

fn check_batch(meta: &ModelMeta, batch: &Batch) -> Result<()> {
    batch.validate(meta.vocab_size)?;
    if meta.kind == ModelKind::Transformer && batch.seq_len() > meta.seq_len {
        return Err(Error::Data(format!(
            "batch seq_len {} exceeds positional table {}",
            batch.seq_len(),
            meta.seq_len
        )));
    }
    Ok(())
}

/// Initialize parameters for a config: every coordinate uniform in
/// `(-a, a)` with `a = 1/sqrt(hidden_dim)`, deterministic given the seed.
pub fn init_model(config: &ModelConfig) -> Result<ParamVector> {
    let schema = config.schema()?;
    let a = 1.0 / (config.hidden_dim as f64).sqrt();
    let mut r = rng::stream(config.seed, &[tag::INIT]);
    let values = (0..schema.total_len())
        .map(|_| r.random_range(-a..a))
        .collect();
    ParamVector::new(values, schema)
}

/// Mean token-level cross-entropy over all positions of the batch.
pub fn forward_loss(params: &ParamVector, batch: &Batch) -> Result<f64> {
    let meta = meta_of(params)?;
    check_batch(&meta, batch)?;
    match meta.kind {
        ModelKind::Lstm => lstm::loss(&meta, params, batch),
        ModelKind::Transformer => transformer::loss(&meta, params, batch),
    }
}

/// Loss plus the gradient of the mean loss w.r.t. every parameter.
pub fn loss_and_grad(params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
    let meta = meta_of(params)?;
    check_batch(&meta, batch)?;
    match meta.kind {
        ModelKind::Lstm => lstm::loss_grad(&meta, params, batch),
        ModelKind::Transformer => transformer::loss_grad(&meta, params, batch),
    }
}

/// Gradient of the mean loss; shares the input's schema.
pub fn backward(params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
    loss_and_grad(params, batch).map(|(_, g)| g)
}

/// Argmax next-token prediction for every position, row-major.
pub fn predict_argmax(params: &ParamVector, batch: &Batch) -> Result<Vec<u32>> {
    let meta = meta_of(params)?;
    check_batch(&meta, batch)?;
    match meta.kind {
        ModelKind::Lstm => lstm::predict(&meta, params, batch),
        ModelKind::Transformer => transformer::predict(&meta, params, batch),
    }
}

/// One SGD step per batch, `epochs` passes over `data` in order.
///
/// `grad_hook` may rewrite each step's gradient (attacks install masks here);
/// `post_step` runs after each parameter update. Benign training and attacks
/// share this loop so that an attack with no masking is bit-identical to
/// benign training.
pub fn train_loop<G, P>(
    params: &ParamVector,
    data: &[Batch],
    lr: f64,
    epochs: usize,
    mut grad_hook: G,
    mut post_step: P,
) -> Result<ParamVector>
where
    G: FnMut(usize, ParamVector) -> Result<ParamVector>,
    P: FnMut(usize, &mut ParamVector) -> Result<()>,
{
    if !(lr >= 0.0) {
        return Err(Error::Config("learning rate must be non-negative".into()));
    }
    if epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Data("no batches to train on".into()));
    }
    let mut current = params.clone();
    let mut step = 0usize;
    for _ in 0..epochs {
        for batch in data {
            let (loss, grad) = loss_and_grad(&current, batch)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { step });
            }
            let grad = grad_hook(step, grad)?;
            current.add_scaled(&grad, -lr)?;
            post_step(step, &mut current)?;
            step += 1;
        }
    }
    Ok(current)
}

/// Plain local SGD: returns the updated copy, the input is untouched.
pub fn sgd_epochs(params: &ParamVector, data: &[Batch], lr: f64, epochs: usize) -> Result<ParamVector> {
    train_loop(params, data, lr, epochs, |_, g| Ok(g), |_, _| Ok(()))
}

// Shared dense kernels. Weight matrices are row-major; both models route all
// heavy work through these two loops.

/// Dot product with four accumulators so the FP adds pipeline.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a * x`.
#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// log(sum(exp(logits))) and the stabilizing max, reused by loss and softmax.
#[inline]
pub(crate) fn log_sum_exp(logits: &[f64]) -> (f64, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    (max + sum.ln(), max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lstm_cfg() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Lstm,
            vocab_size: 16,
            hidden_dim: 8,
            num_blocks: 1,
            seq_len: 6,
            seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = lstm_cfg();
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / (cfg.hidden_dim as f64).sqrt();
        assert!(a.values().iter().all(|v| v.abs() < bound));
        let c = init_model(&ModelConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lstm_schema_names() {
        let schema = lstm_cfg().schema().unwrap();
        let names: Vec<&str> = schema.names().collect();
        assert_eq!(names, ["encoder", "ih", "hh", "decoder"]);
    }

    #[test]
    fn transformer_schema_has_per_block_segments() {
        let cfg = ModelConfig {
            kind: ModelKind::Transformer,
            vocab_size: 16,
            hidden_dim: 8,
            num_blocks: 2,
            seq_len: 6,
            seed: 3,
        };
        let schema = cfg.schema().unwrap();
        for sub in ["attn.c_attn", "attn.c_proj", "mlp.c_fc", "mlp.c_proj"] {
            let hits = schema
                .names()
                .filter(|n| LayerSchema::selector_matches(sub, n))
                .count();
            assert_eq!(hits, 2, "{sub} should appear once per block");
        }
        assert!(schema.range_of("wte").is_some());
        assert!(schema.range_of("head").is_some());
    }

    #[test]
    fn batch_shift_invariant_enforced() {
        let good = Batch::from_rows(&[vec![1, 2, 3, 4]]).unwrap();
        assert_eq!(good.token_row(0), &[1, 2, 3]);
        assert_eq!(good.target_row(0), &[2, 3, 4]);
        good.validate(5).unwrap();
        assert!(good.validate(4).is_err()); // id 4 out of range

        let bad = Batch {
            rows: 1,
            seq_len: 3,
            token_ids: vec![1, 2, 3],
            targets: vec![9, 3, 4],
        };
        assert!(bad.validate(16).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let cfg = lstm_cfg();
        let mut params = init_model(&cfg).unwrap();
        let range = params.schema().range_of("decoder").unwrap();
        for v in &mut params.values_mut()[range] {
            *v = 0.0;
        }
        let batch = Batch::from_rows(&[vec![0, 1, 2, 3], vec![5, 5, 5, 5]]).unwrap();
        let loss = forward_loss(&params, &batch).unwrap();
        assert!((loss - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn token_out_of_range_is_data_error() {
        let params = init_model(&lstm_cfg()).unwrap();
        let batch = Batch::from_rows(&[vec![0, 99, 2, 3]]).unwrap();
        assert!(matches!(forward_loss(&params, &batch), Err(Error::Data(_))));
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let params = init_model(&lstm_cfg()).unwrap();
        let batch = Batch::from_rows(&[vec![0, 1, 2, 3]]).unwrap();
        let out = sgd_epochs(&params, &[batch], 0.0, 3).unwrap();
        assert_eq!(out, params);
    }

    #[test]
    fn sgd_one_step_matches_definition() {
        let params = init_model(&lstm_cfg()).unwrap();
        let batch = Batch::from_rows(&[vec![0, 1, 2, 3], vec![3, 2, 1, 0]]).unwrap();
        let lr = 0.1;
        let stepped = sgd_epochs(&params, &[batch.clone()], lr, 1).unwrap();
        let mut expect = params.clone();
        expect.add_scaled(&backward(&params, &batch).unwrap(), -lr).unwrap();
        assert_eq!(stepped, expect);
    }

    #[test]
    fn duplicated_batch_has_identical_gradient() {
        let params = init_model(&lstm_cfg()).unwrap();
        let row = vec![4u32, 7, 1, 9];
        let single = Batch::from_rows(&[row.clone()]).unwrap();
        let doubled = Batch::from_rows(&[row.clone(), row]).unwrap();
        let g1 = backward(&params, &single).unwrap();
        let g2 = backward(&params, &doubled).unwrap();
        let max_diff = g1
            .values()
            .iter()
            .zip(g2.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-15, "max diff {max_diff}");
    }

    #[test]
    fn training_reduces_loss_and_overfits() {
        let cfg = ModelConfig { vocab_size: 8, hidden_dim: 8, ..lstm_cfg() };
        let params = init_model(&cfg).unwrap();
        let batch = Batch::from_rows(&[vec![1, 5, 1, 5, 1]]).unwrap();
        let before = forward_loss(&params, &batch).unwrap();
        let trained = sgd_epochs(&params, &[batch.clone()], 0.5, 500).unwrap();
        let after = forward_loss(&trained, &batch).unwrap();
        assert!(after < before);
        assert!(after < 0.01, "overfit loss {after}");
        // input untouched
        assert_eq!(params, init_model(&cfg).unwrap());
    }
}
