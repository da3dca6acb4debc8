//! Attacker behaviors: baseline poisoned training, a durability-oriented
//! gradient-avoidance attack (neurotoxin), and the layer-targeted sdba
//! attack, plus the masking and projection primitives they share.
//!
//! All masks are count-based: "top k%" of a scope of size `d` means the
//! `ceil(k/100 * d)` coordinates of largest absolute value, ties broken by
//! lower coordinate index.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::ClientShard;
use crate::error::{Error, Result};
use crate::federation::{ClientUpdate, ATTACKER_ID};
use crate::nn;
use crate::params::{LayerSchema, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    None,
    Baseline,
    Neurotoxin,
    Sdba,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Baseline => "baseline",
            AttackKind::Neurotoxin => "neurotoxin",
            AttackKind::Sdba => "sdba",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttackKind::None),
            "baseline" => Ok(AttackKind::Baseline),
            "neurotoxin" => Ok(AttackKind::Neurotoxin),
            "sdba" => Ok(AttackKind::Sdba),
            other => Err(Error::Config(format!("unknown attack kind '{other}'"))),
        }
    }
}

/// Everything the malicious client needs to run one attack round.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackPlan {
    pub kind: AttackKind,
    /// Layer selectors the sdba attack confines its update to.
    pub target_layers: BTreeSet<String>,
    /// Default top-k% masking ratio inside the target layers.
    pub topk_percent: f64,
    /// Per-layer overrides of `topk_percent`. When non-empty, top-k masking
    /// runs per target layer instead of over the union scope.
    pub topk_per_layer: BTreeMap<String, f64>,
    /// Number of consecutive rounds the attacker participates in.
    pub attack_num: usize,
    pub attack_start_round: usize,
    pub pgd_enabled: bool,
    /// Project after every local step instead of once on the final delta.
    pub pgd_per_step: bool,
    pub pgd_delta: f64,
    pub neurotoxin_mask_percent: f64,
}

impl AttackPlan {
    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            target_layers: BTreeSet::new(),
            topk_percent: 0.0,
            topk_per_layer: BTreeMap::new(),
            attack_num: 0,
            attack_start_round: 0,
            pgd_enabled: false,
            pgd_per_step: false,
            pgd_delta: 3.0,
            neurotoxin_mask_percent: 5.0,
        }
    }

    pub fn validate(&self, schema: &LayerSchema) -> Result<()> {
        if self.kind == AttackKind::None {
            return Ok(());
        }
        if !(0.0..=100.0).contains(&self.topk_percent) {
            return Err(Error::Config("topk_percent must be in [0, 100]".into()));
        }
        if self.kind == AttackKind::Sdba {
            if self.target_layers.is_empty() {
                return Err(Error::Config("sdba requires non-empty target_layers".into()));
            }
            schema.resolve_selectors(self.target_layers.iter().map(|s| s.as_str()))?;
            for (layer, k) in &self.topk_per_layer {
                if !(0.0..=100.0).contains(k) {
                    return Err(Error::Config(format!(
                        "topk override for '{layer}' out of [0, 100]"
                    )));
                }
                if !self.target_layers.contains(layer) {
                    return Err(Error::Config(format!(
                        "topk override for '{layer}' which is not a target layer"
                    )));
                }
            }
        }
        if self.kind == AttackKind::Neurotoxin
            && !(self.neurotoxin_mask_percent > 0.0 && self.neurotoxin_mask_percent < 100.0)
        {
            return Err(Error::Config("neurotoxin_mask_percent must be in (0, 100)".into()));
        }
        if self.pgd_enabled && !(self.pgd_delta > 0.0) {
            return Err(Error::Config("pgd_delta must be > 0".into()));
        }
        if self.attack_num == 0 {
            return Err(Error::Config("attack_num must be >= 1 for an active attack".into()));
        }
        Ok(())
    }

    pub fn is_active(&self, round: usize) -> bool {
        self.kind != AttackKind::None
            && round >= self.attack_start_round
            && round < self.attack_start_round + self.attack_num
    }

    fn topk_for(&self, layer: &str) -> f64 {
        *self.topk_per_layer.get(layer).unwrap_or(&self.topk_percent)
    }
}

/// Boolean keep-mask aligned to a schema; application zeroes dropped
/// coordinates and is idempotent.
#[derive(Clone, Debug)]
pub struct GradientMask {
    keep: Vec<bool>,
}

impl GradientMask {
    pub fn keep_all(len: usize) -> Self {
        Self { keep: vec![true; len] }
    }

    pub fn drop_at(&mut self, idx: usize) {
        self.keep[idx] = false;
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn apply(&self, v: &ParamVector) -> Result<ParamVector> {
        if self.keep.len() != v.len() {
            return Err(Error::Protocol("mask length does not match vector".into()));
        }
        let mut out = v.clone();
        for (val, &keep) in out.values_mut().iter_mut().zip(&self.keep) {
            if !keep {
                *val = 0.0;
            }
        }
        Ok(out)
    }
}

/// Zero every coordinate outside the selected layers.
pub fn layer_wise_mask(grad: &ParamVector, selected: &BTreeSet<String>) -> Result<ParamVector> {
    let schema = grad.schema();
    let picked = schema.resolve_selectors(selected.iter().map(|s| s.as_str()))?;
    let mut mask = GradientMask { keep: vec![false; grad.len()] };
    for seg in picked {
        for i in schema.segment_range(seg) {
            mask.keep[i] = true;
        }
    }
    mask.apply(grad)
}

fn scope_indices(schema: &LayerSchema, scope: &BTreeSet<String>) -> Result<Vec<usize>> {
    let picked = schema.resolve_selectors(scope.iter().map(|s| s.as_str()))?;
    Ok(picked
        .into_iter()
        .flat_map(|seg| schema.segment_range(seg))
        .collect())
}

/// Indices of the `ceil(k/100 * d)` largest-|value| coordinates among
/// `indices` of `values`, ties by lower index.
fn top_count_indices(values: &[f64], indices: &[usize], k_percent: f64) -> Vec<usize> {
    let d = indices.len();
    let m = ((k_percent / 100.0 * d as f64).ceil() as usize).min(d);
    if m == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = indices.to_vec();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .expect("finite gradient values")
            .then(a.cmp(&b))
    });
    order.truncate(m);
    order
}

/// Zero the top-k% largest-magnitude coordinates within the scoped layers.
/// `k = 0` is the identity on the scope.
pub fn topk_mask(grad: &ParamVector, k_percent: f64, scope: &BTreeSet<String>) -> Result<ParamVector> {
    if !(0.0..=100.0).contains(&k_percent) {
        return Err(Error::Config("k_percent must be in [0, 100]".into()));
    }
    if scope.is_empty() {
        if k_percent > 0.0 {
            return Err(Error::Config("topk_mask with k > 0 needs a non-empty scope".into()));
        }
        return Ok(grad.clone());
    }
    if k_percent == 0.0 {
        return Ok(grad.clone());
    }
    let indices = scope_indices(grad.schema(), scope)?;
    let mut mask = GradientMask::keep_all(grad.len());
    for idx in top_count_indices(grad.values(), &indices, k_percent) {
        mask.drop_at(idx);
    }
    mask.apply(grad)
}

// Projection is a no-op for norms this close to the bound; keeps repeated
// projection bit-identical despite rounding in the rescale.
const PGD_SLACK: f64 = 1e-10;

/// Rescale onto the L2 ball of radius `bound` when outside it; direction is
/// preserved and vectors inside the ball (or zero) pass through unchanged.
pub fn pgd_project(delta: &ParamVector, bound: f64) -> Result<ParamVector> {
    if !(bound > 0.0) {
        return Err(Error::Config("projection bound must be > 0".into()));
    }
    let norm = delta.l2_norm();
    if norm == 0.0 || norm <= bound * (1.0 + PGD_SLACK) {
        return Ok(delta.clone());
    }
    let mut out = delta.clone();
    out.scale(bound / norm);
    Ok(out)
}

/// Zero `grad` at the coordinates holding the top `mask_percent`% absolute
/// values of the benign direction (whole-model scope).
pub fn neurotoxin_mask(
    grad: &ParamVector,
    benign_direction: &ParamVector,
    mask_percent: f64,
) -> Result<ParamVector> {
    if !grad.schema_matches(benign_direction) {
        return Err(Error::Protocol("neurotoxin_mask: schema mismatch".into()));
    }
    if !(0.0..=100.0).contains(&mask_percent) {
        return Err(Error::Config("mask_percent must be in [0, 100]".into()));
    }
    let indices: Vec<usize> = (0..grad.len()).collect();
    let mut mask = GradientMask::keep_all(grad.len());
    for idx in top_count_indices(benign_direction.values(), &indices, mask_percent) {
        mask.drop_at(idx);
    }
    mask.apply(grad)
}

/// Run the malicious client's local training and produce its update.
///
/// Per epoch and batch: gradient on the mixed poisoned shard, the
/// kind-specific mask, one SGD step. With projection enabled the final delta
/// lands inside the L2 ball of radius `pgd_delta` (or every step does, with
/// `pgd_per_step`).
pub fn run_attack(
    plan: &AttackPlan,
    global: &ParamVector,
    poisoned_shard: &ClientShard,
    lr: f64,
    epochs: usize,
    benign_direction: &ParamVector,
) -> Result<ClientUpdate> {
    if plan.kind == AttackKind::None {
        return Err(Error::Config("run_attack called with kind = none".into()));
    }
    plan.validate(global.schema())?;
    let per_layer_topk = plan.kind == AttackKind::Sdba && !plan.topk_per_layer.is_empty();
    let local = nn::train_loop(
        global,
        &poisoned_shard.batches,
        lr,
        epochs,
        |_, grad| match plan.kind {
            AttackKind::Baseline => Ok(grad),
            AttackKind::Neurotoxin => {
                neurotoxin_mask(&grad, benign_direction, plan.neurotoxin_mask_percent)
            }
            AttackKind::Sdba => {
                let mut masked = layer_wise_mask(&grad, &plan.target_layers)?;
                if per_layer_topk {
                    for layer in &plan.target_layers {
                        let k = plan.topk_for(layer);
                        if k > 0.0 {
                            let scope: BTreeSet<String> = [layer.clone()].into();
                            masked = topk_mask(&masked, k, &scope)?;
                        }
                    }
                } else if plan.topk_percent > 0.0 {
                    masked = topk_mask(&masked, plan.topk_percent, &plan.target_layers)?;
                }
                Ok(masked)
            }
            AttackKind::None => unreachable!("checked above"),
        },
        |_, current| {
            if plan.pgd_enabled && plan.pgd_per_step {
                let delta = current.sub(global)?;
                let projected = pgd_project(&delta, plan.pgd_delta)?;
                *current = global.clone();
                current.add_scaled(&projected, 1.0)?;
            }
            Ok(())
        },
    )?;
    let mut delta = local.sub(global)?;
    if plan.pgd_enabled && !plan.pgd_per_step {
        delta = pgd_project(&delta, plan.pgd_delta)?;
    }
    if !delta.is_finite() {
        return Err(Error::Data("attacker update contains non-finite values".into()));
    }
    Ok(ClientUpdate {
        client_id: ATTACKER_ID,
        delta,
        num_samples: poisoned_shard.num_sequences(),
        malicious: true,
    })
}
