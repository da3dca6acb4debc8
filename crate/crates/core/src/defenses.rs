//! Server-side defenses applied to the round's client updates before
//! aggregation.
//!
//! Defenses never see the harness-only malicious flag: they operate on
//! [`DefenseUpdate`], which simply does not carry it.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::ParamVector;

#[derive(Clone, Debug, PartialEq)]
pub enum DefenseStage {
    MultiKrum { f: usize, m: usize },
    NormClip { bound: f64 },
    WeakDp { bound: f64, sigma: f64 },
    Flame { lambda: f64 },
}

impl DefenseStage {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DefenseStage::MultiKrum { m, .. } => {
                if m == 0 {
                    return Err(Error::Config("multi_krum m must be >= 1".into()));
                }
            }
            DefenseStage::NormClip { bound } => {
                if !(bound > 0.0) {
                    return Err(Error::Config("norm_clip bound must be > 0".into()));
                }
            }
            DefenseStage::WeakDp { bound, sigma } => {
                if !(bound > 0.0) || !(sigma >= 0.0) {
                    return Err(Error::Config("weak_dp needs bound > 0 and sigma >= 0".into()));
                }
            }
            DefenseStage::Flame { lambda } => {
                if !(lambda >= 0.0) {
                    return Err(Error::Config("flame lambda must be >= 0".into()));
                }
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for DefenseStage {
    fn fmt(&self, out: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DefenseStage::MultiKrum { f, m } => write!(out, "multi_krum({f},{m})"),
            DefenseStage::NormClip { bound } => write!(out, "norm_clip({bound})"),
            DefenseStage::WeakDp { bound, sigma } => write!(out, "weak_dp({bound},{sigma})"),
            DefenseStage::Flame { lambda } => write!(out, "flame({lambda})"),
        }
    }
}

/// Ordered defense stages; empty means no defense.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DefensePipeline {
    pub stages: Vec<DefenseStage>,
}

impl DefensePipeline {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        self.stages.iter().try_for_each(DefenseStage::validate)
    }
}

/// What a defense is allowed to see of a client update.
#[derive(Clone, Debug, PartialEq)]
pub struct DefenseUpdate {
    pub client_id: u64,
    pub delta: ParamVector,
    pub num_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DefenseDiagnostics {
    pub admitted_ids: BTreeSet<u64>,
    pub filtered_ids: BTreeSet<u64>,
    pub clip_count: usize,
    pub noise_sigma_applied: f64,
    pub notes: Vec<String>,
}

impl DefenseDiagnostics {
    fn admit_all(updates: &[DefenseUpdate]) -> Self {
        Self {
            admitted_ids: updates.iter().map(|u| u.client_id).collect(),
            ..Self::default()
        }
    }
}

/// Sum of squared L2 distances to the `n - f - 2` nearest other updates,
/// for every update.
fn krum_scores(updates: &[DefenseUpdate], f: usize) -> Vec<f64> {
    let n = updates.len();
    let mut dist2 = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = updates[i]
                .delta
                .values()
                .iter()
                .zip(updates[j].delta.values())
                .map(|(a, b)| {
                    let d = a - b;
                    d * d
                })
                .sum();
            dist2[i * n + j] = d2;
            dist2[j * n + i] = d2;
        }
    }
    let keep = n - f - 2;
    (0..n)
        .map(|i| {
            let mut ds: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist2[i * n + j]).collect();
            ds.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            ds.iter().take(keep).sum()
        })
        .collect()
}

/// Multi-Krum selection: the `m` lowest-scoring updates survive, ties broken
/// by lower client id. Needs `n >= 2f + 3`; otherwise the stage is skipped
/// with a diagnostic note and everything is admitted.
pub fn multi_krum(
    updates: Vec<DefenseUpdate>,
    f: usize,
    m: usize,
) -> Result<(Vec<DefenseUpdate>, DefenseDiagnostics)> {
    let n = updates.len();
    if n < 2 * f + 3 || m > n - f {
        let mut diag = DefenseDiagnostics::admit_all(&updates);
        diag.notes.push(format!(
            "multi_krum skipped: n={n} too small for f={f}, m={m} (needs n >= 2f+3 and m <= n-f)"
        ));
        return Ok((updates, diag));
    }
    let scores = krum_scores(&updates, f);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("finite scores")
            .then(updates[a].client_id.cmp(&updates[b].client_id))
    });
    let chosen: BTreeSet<usize> = order.into_iter().take(m).collect();
    let mut diag = DefenseDiagnostics::default();
    let mut survivors = Vec::with_capacity(m);
    for (i, u) in updates.into_iter().enumerate() {
        if chosen.contains(&i) {
            diag.admitted_ids.insert(u.client_id);
            survivors.push(u);
        } else {
            diag.filtered_ids.insert(u.client_id);
        }
    }
    Ok((survivors, diag))
}

// Same slack rule as the attacker-side projection: norms within rounding
// distance of the bound pass through, which keeps clipping idempotent.
const CLIP_SLACK: f64 = 1e-10;

fn clip_to(delta: &mut ParamVector, bound: f64) -> bool {
    let norm = delta.l2_norm();
    if norm > bound * (1.0 + CLIP_SLACK) {
        delta.scale(bound / norm);
        true
    } else {
        false
    }
}

/// Rescale every update with `||delta|| > bound` to norm exactly `bound`.
pub fn norm_clip(
    mut updates: Vec<DefenseUpdate>,
    bound: f64,
) -> Result<(Vec<DefenseUpdate>, DefenseDiagnostics)> {
    DefenseStage::NormClip { bound }.validate()?;
    let mut diag = DefenseDiagnostics::admit_all(&updates);
    for u in &mut updates {
        if clip_to(&mut u.delta, bound) {
            diag.clip_count += 1;
        }
    }
    Ok((updates, diag))
}

/// Norm clipping followed by per-coordinate Gaussian noise from the server's
/// seeded stream.
pub fn weak_dp(
    updates: Vec<DefenseUpdate>,
    bound: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<DefenseUpdate>, DefenseDiagnostics)> {
    DefenseStage::WeakDp { bound, sigma }.validate()?;
    let (mut updates, mut diag) = norm_clip(updates, bound)?;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("validated sigma");
        for u in &mut updates {
            for v in u.delta.values_mut() {
                *v += normal.sample(rng);
            }
        }
    }
    diag.noise_sigma_applied = sigma;
    Ok((updates, diag))
}

/// Cosine distance, with zero-norm vectors treated as orthogonal to all.
fn cosine_distance(a: &ParamVector, b: &ParamVector) -> f64 {
    let na = a.l2_norm();
    let nb = b.l2_norm();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let dot: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x * y)
        .sum();
    1.0 - dot / (na * nb)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 ==  1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Simplified clustering defense: single-linkage over pairwise cosine
/// distances cut at their median, majority cluster admitted, survivors
/// clipped to the median admitted norm and noised with std `lambda * S`.
///
/// Without a majority cluster everything is admitted and a degraded-mode
/// note is recorded.
pub fn flame(
    updates: Vec<DefenseUpdate>,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<DefenseUpdate>, DefenseDiagnostics)> {
    DefenseStage::Flame { lambda }.validate()?;
    let n = updates.len();
    if n < 3 {
        let mut diag = DefenseDiagnostics::admit_all(&updates);
        diag.notes.push(format!("flame skipped: n={n} < 3"));
        return Ok((updates, diag));
    }
    let mut pair_dists = Vec::with_capacity(n * (n - 1) / 2);
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = cosine_distance(&updates[i].delta, &updates[j].delta);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
            pair_dists.push(d);
        }
    }
    pair_dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let cut = median(&pair_dists);

    // Single-linkage clusters at the cut = connected components of the
    // "distance <= cut" graph.
    let mut component: Vec<usize> = (0..n).collect();
    fn root(component: &mut Vec<usize>, mut i: usize) -> usize {
        while component[i] != i {
            component[i] = component[component[i]];
            i = component[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if dist[i * n + j] <= cut {
                let (ri, rj) = (root(&mut component, i), root(&mut component, j));
                if ri != rj {
                    component[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut members: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = root(&mut component, i);
        members.entry(r).or_default().push(i);
    }
    // Largest cluster; ties go to the one containing the smallest client id.
    let largest = members
        .values()
        .max_by_key(|c| {
            let min_id = c.iter().map(|&i| updates[i].client_id).min().unwrap();
            (c.len(), std::cmp::Reverse(min_id))
        })
        .cloned()
        .unwrap();

    let mut diag = DefenseDiagnostics::default();
    let majority = n / 2 + 1;
    let admitted_idx: Vec<usize> = if largest.len() >= majority {
        largest
    } else {
        diag.notes.push(format!(
            "flame degraded: largest cluster {} < majority {majority}, admitting all",
            largest.len()
        ));
        (0..n).collect()
    };
    let admitted_set: BTreeSet<usize> = admitted_idx.iter().copied().collect();

    let mut survivors = Vec::with_capacity(admitted_set.len());
    for (i, u) in updates.into_iter().enumerate() {
        if admitted_set.contains(&i) {
            diag.admitted_ids.insert(u.client_id);
            survivors.push(u);
        } else {
            diag.filtered_ids.insert(u.client_id);
        }
    }
    let mut norms: Vec<f64> = survivors.iter().map(|u| u.delta.l2_norm()).collect();
    norms.sort_by(|a, b| a.partial_cmp(b).expect("finite norms"));
    let s = median(&norms);
    if s > 0.0 {
        for u in &mut survivors {
            if clip_to(&mut u.delta, s) {
                diag.clip_count += 1;
            }
        }
        let sigma = lambda * s;
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            for u in &mut survivors {
                for v in u.delta.values_mut() {
                    *v += normal.sample(rng);
                }
            }
        }
        diag.noise_sigma_applied = lambda * s;
    }
    Ok((survivors, diag))
}

/// Apply the pipeline's stages in order and merge diagnostics. The empty
/// pipeline is the identity.
pub fn apply_pipeline(
    updates: Vec<DefenseUpdate>,
    pipeline: &DefensePipeline,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<DefenseUpdate>, DefenseDiagnostics)> {
    pipeline.validate()?;
    let input_ids: BTreeSet<u64> = updates.iter().map(|u| u.client_id).collect();
    let mut current = updates;
    let mut merged = DefenseDiagnostics::default();
    for stage in &pipeline.stages {
        let (next, diag) = match *stage {
            DefenseStage::MultiKrum { f, m } => multi_krum(current, f, m)?,
            DefenseStage::NormClip { bound } => norm_clip(current, bound)?,
            DefenseStage::WeakDp { bound, sigma } => weak_dp(current, bound, sigma, rng)?,
            DefenseStage::Flame { lambda } => flame(current, lambda, rng)?,
        };
        merged.clip_count += diag.clip_count;
        merged.noise_sigma_applied = merged.noise_sigma_applied.max(diag.noise_sigma_applied);
        merged.notes.extend(diag.notes);
        current = next;
    }
    merged.admitted_ids = current.iter().map(|u| u.client_id).collect();
    merged.filtered_ids = input_ids.difference(&merged.admitted_ids).copied().collect();
    Ok((current, merged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::LayerSchema;
    use crate::rng;
    use rand::Rng;
    use std::sync::Arc;

    fn schema(len: usize) -> Arc<LayerSchema> {
        Arc::new(LayerSchema::new(vec![("w".into(), len)]).unwrap())
    }

    fn update(id: u64, values: Vec<f64>) -> DefenseUpdate {
        let s = schema(values.len());
        DefenseUpdate {
            client_id: id,
            delta: ParamVector::new(values, s).unwrap(),
            num_samples: 10,
        }
    }

    fn random_updates(n: usize, dim: usize, seed: u64) -> Vec<DefenseUpdate> {
        let mut r = rng::stream(seed, &[50]);
        (0..n)
            .map(|i| {
                update(
                    i as u64,
                    (0..dim).map(|_| r.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect()
    }

    /// Brute-force reimplementation of the Krum score used as the oracle.
    fn oracle_scores(updates: &[DefenseUpdate], f: usize) -> Vec<f64> {
        let n = updates.len();
        (0..n)
            .map(|i| {
                let mut ds: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        updates[i]
                            .delta
                            .values()
                            .iter()
                            .zip(updates[j].delta.values())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum()
                    })
                    .collect();
                ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
                ds.iter().take(n - f - 2).sum()
            })
            .collect()
    }

    #[test]
    fn krum_filters_planted_outlier() {
        let mut updates = random_updates(9, 64, 7);
        let mut big = update(9, vec![0.0; 64]);
        for (i, v) in big.delta.values_mut().iter_mut().enumerate() {
            *v = if i % 2 == 0 { 12.0 } else { -12.0 };
        }
        updates.push(big);
        let scores = krum_scores(&updates, 1);
        assert_eq!(scores, oracle_scores(&updates, 1));
        let (survivors, diag) = multi_krum(updates, 1, 8).unwrap();
        assert_eq!(survivors.len(), 8);
        assert!(diag.filtered_ids.contains(&9));
        assert!(!diag.admitted_ids.contains(&9));
    }

    #[test]
    fn krum_ties_break_by_client_id() {
        let updates: Vec<DefenseUpdate> =
            (0..6).map(|i| update(5 - i as u64, vec![1.0, 2.0, 3.0])).collect();
        let (survivors, _) = multi_krum(updates, 1, 3).unwrap();
        let ids: Vec<u64> = survivors.iter().map(|u| u.client_id).collect();
        assert_eq!(ids, vec![2, 1, 0], "survivors keep input order, lowest ids win");
    }

    #[test]
    fn krum_too_small_is_skipped_with_note() {
        let updates = random_updates(4, 8, 1);
        let (survivors, diag) = multi_krum(updates, 1, 4).unwrap();
        assert_eq!(survivors.len(), 4);
        assert!(diag.notes[0].contains("skipped"));
    }

    #[test]
    fn krum_survivor_count_matches_m() {
        let updates = random_updates(10, 16, 3);
        let (survivors, _) = multi_krum(updates, 1, 9).unwrap();
        assert_eq!(survivors.len(), 9);
    }

    #[test]
    fn norm_clip_halves_oversized_delta() {
        let updates = vec![update(0, vec![6.0, 0.0]), update(1, vec![1.0, 1.0])];
        let (clipped, diag) = norm_clip(updates, 3.0).unwrap();
        assert_eq!(clipped[0].delta.values(), &[3.0, 0.0]);
        assert_eq!(clipped[1].delta.values(), &[1.0, 1.0]);
        assert_eq!(diag.clip_count, 1);
    }

    #[test]
    fn norm_clip_is_idempotent_and_never_grows() {
        let updates = random_updates(8, 32, 11);
        let norms_before: Vec<f64> = updates.iter().map(|u| u.delta.l2_norm()).collect();
        let (once, _) = norm_clip(updates, 0.5).unwrap();
        let (twice, diag2) = norm_clip(once.clone(), 0.5).unwrap();
        assert_eq!(once, twice);
        assert_eq!(diag2.clip_count, 0);
        for (u, before) in once.iter().zip(norms_before) {
            assert!(u.delta.l2_norm() <= before + 1e-12);
        }
    }

    #[test]
    fn weak_dp_sigma_zero_equals_norm_clip() {
        let updates = random_updates(5, 16, 13);
        let mut r = rng::stream(1, &[2]);
        let (dp, _) = weak_dp(updates.clone(), 3.0, 0.0, &mut r).unwrap();
        let (nc, _) = norm_clip(updates, 3.0).unwrap();
        assert_eq!(dp, nc);
    }

    #[test]
    fn weak_dp_noise_std_matches_sigma() {
        let dim = 20_000;
        let updates = vec![update(0, vec![0.0; dim]), update(1, vec![0.0; dim]),
                           update(2, vec![0.0; dim]), update(3, vec![0.0; dim]),
                           update(4, vec![0.0; dim])];
        let sigma = 0.001;
        let mut r = rng::stream(99, &[1]);
        let (noised, diag) = weak_dp(updates, 3.0, sigma, &mut r).unwrap();
        assert_eq!(diag.noise_sigma_applied, sigma);
        let samples: Vec<f64> = noised
            .iter()
            .flat_map(|u| u.delta.values().iter().copied())
            .collect();
        assert_eq!(samples.len(), 100_000);
        let mean: f64 = samples.iter().sum::<f64>() / samples.len() as f64;
        let var: f64 =
            samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / samples.len() as f64;
        let std = var.sqrt();
        assert!(
            (std - sigma).abs() / sigma < 0.05,
            "empirical std {std} vs sigma {sigma}"
        );
    }

    #[test]
    fn weak_dp_is_deterministic_given_server_seed() {
        let updates = random_updates(5, 64, 17);
        let (a, _) = weak_dp(updates.clone(), 3.0, 0.01, &mut rng::stream(7, &[3])).unwrap();
        let (b, _) = weak_dp(updates, 3.0, 0.01, &mut rng::stream(7, &[3])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flame_identical_deltas_all_admitted() {
        let updates: Vec<DefenseUpdate> =
            (0..6).map(|i| update(i, vec![1.0, 2.0, 2.0])).collect();
        let common_norm = 3.0;
        let mut r = rng::stream(3, &[4]);
        let (survivors, diag) = flame(updates, 0.001, &mut r).unwrap();
        assert_eq!(survivors.len(), 6);
        assert_eq!(diag.filtered_ids.len(), 0);
        assert!((diag.noise_sigma_applied - 0.001 * common_norm).abs() < 1e-12);
        // only the noise changed anything
        for u in survivors {
            for (v, orig) in u.delta.values().iter().zip([1.0, 2.0, 2.0]) {
                assert!((v - orig).abs() < 0.01);
            }
        }
    }

    #[test]
    fn flame_excludes_opposite_direction() {
        let mut updates: Vec<DefenseUpdate> = (0..9)
            .map(|i| {
                let mut vals = vec![1.0, 0.5, -0.25, 0.75];
                vals[0] += i as f64 * 1e-3;
                update(i, vals)
            })
            .collect();
        updates.push(update(9, vec![-1.0, -0.5, 0.25, -0.75]));
        let mut r = rng::stream(5, &[6]);
        let (survivors, diag) = flame(updates, 0.0, &mut r).unwrap();
        assert_eq!(survivors.len(), 9);
        assert!(diag.filtered_ids.contains(&9));
    }

    #[test]
    fn flame_noise_std_tracks_lambda_times_s() {
        let dim = 25_000;
        let updates: Vec<DefenseUpdate> = (0..4)
            .map(|i| {
                let mut vals = vec![0.0; dim];
                vals[0] = 2.0; // common norm S = 2
                update(i, vals)
            })
            .collect();
        let lambda = 0.002;
        let mut r = rng::stream(31, &[9]);
        let (survivors, diag) = flame(updates, lambda, &mut r).unwrap();
        assert!((diag.noise_sigma_applied - lambda * 2.0).abs() < 1e-12);
        let samples: Vec<f64> = survivors
            .iter()
            .flat_map(|u| u.delta.values()[1..].iter().copied())
            .collect();
        let mean: f64 = samples.iter().sum::<f64>() / samples.len() as f64;
        let std = (samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
            / samples.len() as f64)
            .sqrt();
        let expect = lambda * 2.0;
        assert!(
            (std - expect).abs() / expect < 0.05,
            "empirical std {std} vs {expect}"
        );
    }

    #[test]
    fn empty_pipeline_is_identity() {
        let updates = random_updates(5, 8, 23);
        let mut r = rng::stream(0, &[0]);
        let (out, diag) = apply_pipeline(updates.clone(), &DefensePipeline::none(), &mut r).unwrap();
        assert_eq!(out, updates);
        assert_eq!(diag.admitted_ids.len(), 5);
        assert!(diag.filtered_ids.is_empty());
    }

    #[test]
    fn pipeline_matches_manual_composition() {
        let updates = random_updates(10, 32, 29);
        let pipeline = DefensePipeline {
            stages: vec![
                DefenseStage::NormClip { bound: 0.8 },
                DefenseStage::MultiKrum { f: 1, m: 8 },
            ],
        };
        let mut r = rng::stream(1, &[1]);
        let (a, _) = apply_pipeline(updates.clone(), &pipeline, &mut r).unwrap();
        let (b, _) = norm_clip(updates, 0.8).unwrap();
        let (b, _) = multi_krum(b, 1, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pipeline_order_matters() {
        // A delta pointing the benign way but with 10x the bound's norm:
        // clipping first hides it from Krum; Krum first rejects it.
        let benign_dir = [0.3, 0.4, 0.0, 0.0];
        let mut updates: Vec<DefenseUpdate> = (0..9)
            .map(|i| {
                let mut vals: Vec<f64> = benign_dir.to_vec();
                vals[2] = (i as f64 - 4.0) * 1e-3;
                update(i, vals)
            })
            .collect();
        updates.push(update(9, benign_dir.iter().map(|v| v * 20.0).collect()));

        let clip_then_krum = DefensePipeline {
            stages: vec![
                DefenseStage::NormClip { bound: 0.5 },
                DefenseStage::MultiKrum { f: 1, m: 9 },
            ],
        };
        let krum_then_clip = DefensePipeline {
            stages: vec![
                DefenseStage::MultiKrum { f: 1, m: 9 },
                DefenseStage::NormClip { bound: 0.5 },
            ],
        };
        let mut r1 = rng::stream(2, &[2]);
        let mut r2 = rng::stream(2, &[2]);
        let (_, diag_a) = apply_pipeline(updates.clone(), &clip_then_krum, &mut r1).unwrap();
        let (_, diag_b) = apply_pipeline(updates, &krum_then_clip, &mut r2).unwrap();
        assert!(diag_a.admitted_ids.contains(&9), "clipping first hides the outlier");
        assert!(!diag_b.admitted_ids.contains(&9), "krum first rejects the outlier");
    }

    #[test]
    fn flame_admission_is_permutation_invariant() {
        let mut updates = random_updates(7, 16, 41);
        updates[3] = update(3, updates[0].delta.values().iter().map(|v| -v).collect());
        let mut forward = updates.clone();
        let mut reversed: Vec<DefenseUpdate> = updates.drain(..).rev().collect();
        let (_, diag_f) = flame(std::mem::take(&mut forward), 0.0, &mut rng::stream(1, &[1])).unwrap();
        let (_, diag_r) = flame(std::mem::take(&mut reversed), 0.0, &mut rng::stream(1, &[1])).unwrap();
        assert_eq!(diag_f.admitted_ids, diag_r.admitted_ids);
    }
}
