//! Experiment orchestration: multi-seed runs, CSV/SVG report emission, and
//! the attack comparison report.
//!
//! Everything written here is a pure function of the records, which are
//! themselves a pure function of the config and seeds, so repeated runs
//! produce byte-identical outputs. Wall-clock timing goes to the console
//! only.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use fedsim_core::attacks::AttackKind;
use fedsim_core::federation::Simulation;
use fedsim_core::metrics::{self, RoundRecord};

use crate::config::{ConfigError, ExperimentConfig, Result};
use crate::svg::{self, Series};

/// Records per seed, in the order of `cfg.seeds`.
pub struct ExperimentOutput {
    pub per_seed: Vec<(u64, Vec<RoundRecord>)>,
}

impl ExperimentOutput {
    /// Arithmetic mean across seeds, per round.
    pub fn mean_series(&self, pick: impl Fn(&RoundRecord) -> f64) -> Vec<f64> {
        let rounds = self.per_seed[0].1.len();
        let n = self.per_seed.len() as f64;
        (0..rounds)
            .map(|r| self.per_seed.iter().map(|(_, recs)| pick(&recs[r])).sum::<f64>() / n)
            .collect()
    }
}

/// Run the full simulation for one seed of the experiment.
pub fn run_sim_for_seed(cfg: &ExperimentConfig, run_seed: u64) -> Result<Vec<RoundRecord>> {
    let mut spec = cfg.sim_spec_for_seed(run_seed);
    if cfg.checkpoint_every > 0 {
        spec.checkpoint = Some((
            cfg.output_dir.join(format!("checkpoints_seed_{run_seed}")),
            cfg.checkpoint_every,
        ));
    }
    let mut sim = Simulation::new(spec)?;
    Ok(sim.run()?.to_vec())
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(fedsim_core::Error::from)?;
    }
    std::fs::write(path, contents).map_err(fedsim_core::Error::from)?;
    Ok(())
}

fn aggregate_csv(out: &ExperimentOutput) -> String {
    let ma = out.mean_series(|r| r.ma);
    let ba = out.mean_series(|r| r.ba);
    let mut s = String::from("round,ma,ba\n");
    for (round, (m, b)) in ma.iter().zip(&ba).enumerate() {
        let _ = writeln!(s, "{round},{m},{b}");
    }
    s
}

fn lifespan_csv(cfg: &ExperimentConfig, out: &ExperimentOutput) -> Result<String> {
    let mut s = String::from("attack,tau,seed,lifespan,censored\n");
    let kind = cfg.attack.kind.as_str();
    let start = cfg.attack.attack_start_round;
    for (seed, records) in &out.per_seed {
        for row in metrics::tau_sweep(records, &cfg.taus, start)? {
            let _ = writeln!(s, "{kind},{},{seed},{},{}", row.tau, row.lifespan, row.censored);
        }
    }
    for &tau in &cfg.taus {
        let mut total = 0.0;
        let mut any_censored = false;
        for (_, records) in &out.per_seed {
            let series: Vec<f64> = records.iter().map(|r| r.ba).collect();
            let (l, c) = metrics::lifespan_of_series(&series, tau, start)?;
            total += l as f64;
            any_censored |= c;
        }
        let mean = total / out.per_seed.len() as f64;
        let _ = writeln!(s, "{kind},{tau},mean,{mean},{any_censored}");
    }
    Ok(s)
}

fn accuracy_plot(
    title: &str,
    out: &ExperimentOutput,
    pick: impl Fn(&RoundRecord) -> f64 + Copy,
) -> String {
    let rounds = out.per_seed[0].1.len();
    let mut series = Vec::new();
    for (seed, records) in &out.per_seed {
        series.push(Series {
            label: format!("seed {seed}"),
            color: "#c8c8c8".into(),
            dash: String::new(),
            points: records.iter().map(|r| (r.round as f64, pick(r))).collect(),
        });
    }
    let mean = out.mean_series(pick);
    series.push(Series {
        label: "mean".into(),
        color: "#d62728".into(),
        dash: String::new(),
        points: mean.iter().enumerate().map(|(r, v)| (r as f64, *v)).collect(),
    });
    svg::line_plot(title, "round", "accuracy", rounds.saturating_sub(1) as f64, &series)
}

/// Run every seed of the experiment and write the report files into
/// `cfg.output_dir`: per-seed CSVs, `aggregate.csv`, `ba.svg`, `ma.svg`,
/// `lifespan.csv` and the resolved `config.txt`.
pub fn run_experiment(cfg: &ExperimentConfig, quiet: bool) -> Result<ExperimentOutput> {
    let mut validated = cfg.clone();
    validated.validate()?;
    let cfg = &validated;
    let started = Instant::now();
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run_started = Instant::now();
        let records = run_sim_for_seed(cfg, seed)?;
        if !quiet {
            let last = records.last().expect("at least one round");
            eprintln!(
                "[{}] seed {seed}: {} rounds in {:.1}s (final ma {:.3}, ba {:.3})",
                cfg.attack.kind.as_str(),
                records.len(),
                run_started.elapsed().as_secs_f64(),
                last.ma,
                last.ba,
            );
        }
        write_atomic(
            &cfg.output_dir.join(format!("seed_{seed}.csv")),
            &metrics::records_to_csv(&records),
        )?;
        per_seed.push((seed, records));
    }
    let out = ExperimentOutput { per_seed };
    write_atomic(&cfg.output_dir.join("aggregate.csv"), &aggregate_csv(&out))?;
    write_atomic(
        &cfg.output_dir.join("ba.svg"),
        &accuracy_plot("backdoor accuracy", &out, |r| r.ba),
    )?;
    write_atomic(
        &cfg.output_dir.join("ma.svg"),
        &accuracy_plot("main accuracy", &out, |r| r.ma),
    )?;
    write_atomic(&cfg.output_dir.join("lifespan.csv"), &lifespan_csv(cfg, &out)?)?;
    write_atomic(&cfg.output_dir.join("config.txt"), &cfg.serialize())?;
    if !quiet {
        eprintln!(
            "[{}] experiment done in {:.1}s -> {}",
            cfg.attack.kind.as_str(),
            started.elapsed().as_secs_f64(),
            cfg.output_dir.display()
        );
    }
    Ok(out)
}

/// Run several configs that differ only in their attack stanza and write the
/// overlaid comparison report into the shared output dir.
pub fn compare_attacks(cfgs: &[ExperimentConfig], quiet: bool) -> Result<()> {
    if cfgs.len() < 2 {
        return Err(ConfigError::Invalid("compare needs at least two configs".into()));
    }
    let base = &cfgs[0];
    for (i, other) in cfgs.iter().enumerate().skip(1) {
        if other.non_attack_fingerprint() != base.non_attack_fingerprint() {
            let differing: Vec<String> = base
                .non_attack_fingerprint()
                .lines()
                .zip(other.non_attack_fingerprint().lines())
                .filter(|(a, b)| a != b)
                .map(|(a, _)| a.split('=').next().unwrap_or(a).to_string())
                .collect();
            return Err(ConfigError::Invalid(format!(
                "config {i} differs from config 0 outside the attack stanza: {}",
                differing.join(", ")
            )));
        }
    }
    for i in 0..cfgs.len() {
        for j in i + 1..cfgs.len() {
            if cfgs[i].attack == cfgs[j].attack {
                eprintln!(
                    "warning: configs {i} and {j} carry identical attack stanzas ({}); rendering both",
                    cfgs[i].attack.kind.as_str()
                );
            }
        }
    }

    let root = base.output_dir.clone();
    let mut outputs = Vec::new();
    for cfg in cfgs {
        let mut sub = cfg.clone();
        sub.output_dir = root.join(cfg.attack.kind.as_str());
        let out = run_experiment(&sub, quiet)?;
        outputs.push((cfg.attack.clone(), out));
    }

    // Overlaid mean BA curves.
    let rounds = outputs[0].1.per_seed[0].1.len();
    let mut series = Vec::new();
    for (i, (attack, out)) in outputs.iter().enumerate() {
        let mean = out.mean_series(|r| r.ba);
        series.push(Series {
            label: attack.kind.as_str().into(),
            color: svg::PALETTE[i % svg::PALETTE.len()].into(),
            dash: if i % 2 == 1 { "6,3".into() } else { String::new() },
            points: mean.iter().enumerate().map(|(r, v)| (r as f64, *v)).collect(),
        });
    }
    write_atomic(
        &root.join("ba_compare.svg"),
        &svg::line_plot(
            "backdoor accuracy by attack",
            "round",
            "accuracy",
            rounds.saturating_sub(1) as f64,
            &series,
        ),
    )?;

    // Lifespan ordering table: one row per tau, one column per attack, plus
    // the ordering by mean lifespan.
    let mut s = String::from("tau");
    for (attack, _) in &outputs {
        let _ = write!(s, ",{}", attack.kind.as_str());
    }
    s.push_str(",ordering\n");
    for &tau in &base.taus {
        let mut means = Vec::new();
        for (attack, out) in &outputs {
            let mut total = 0.0;
            for (_, records) in &out.per_seed {
                let series: Vec<f64> = records.iter().map(|r| r.ba).collect();
                let (l, _) =
                    metrics::lifespan_of_series(&series, tau, attack.attack_start_round)?;
                total += l as f64;
            }
            means.push((attack.kind, total / out.per_seed.len() as f64));
        }
        let _ = write!(s, "{tau}");
        for (_, m) in &means {
            let _ = write!(s, ",{m}");
        }
        let mut order = means.clone();
        order.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite means"));
        let ordering: Vec<&str> = order.iter().map(|(k, _)| k.as_str()).collect();
        let _ = writeln!(s, ",{}", ordering.join(">="));
    }
    write_atomic(&root.join("lifespan.csv"), &s)?;
    if !quiet {
        eprintln!("comparison written to {}", root.display());
    }
    Ok(())
}

/// The attack kinds a comparison defaults to.
pub fn default_comparison_kinds() -> Vec<AttackKind> {
    vec![AttackKind::Baseline, AttackKind::Neurotoxin, AttackKind::Sdba]
}
