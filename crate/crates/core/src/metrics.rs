//! Backdoor accuracy, main accuracy, the lifespan durability metric, and the
//! per-round record ledger with its CSV form.

use crate::defenses::DefenseDiagnostics;
use crate::error::{Error, Result};
use crate::nn::{self, Batch};
use crate::params::ParamVector;

/// Per-round measurements. One record per round, rounds strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub ma: f64,
    pub ba: f64,
    pub attack_active: bool,
    pub defense_diag: DefenseDiagnostics,
    pub wall_ms: u64,
}

/// A lifespan question: threshold and first attack round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifespanQuery {
    pub tau: f64,
    pub attack_start: usize,
}

/// Top-1 accuracy of `params` on `testset`.
///
/// With `eval_position_only` off this is main accuracy: mean over every
/// position of argmax == target. With it on it is backdoor accuracy: the
/// fraction of rows whose prediction at the final (post-trigger) position
/// equals that position's target.
pub fn eval_accuracy(params: &ParamVector, testset: &Batch, eval_position_only: bool) -> Result<f64> {
    if testset.rows() == 0 {
        return Err(Error::Eval("empty testset".into()));
    }
    let preds = nn::predict_argmax(params, testset)?;
    let seq = testset.seq_len();
    if eval_position_only {
        let hits = (0..testset.rows())
            .filter(|&r| preds[r * seq + seq - 1] == testset.target_row(r)[seq - 1])
            .count();
        Ok(hits as f64 / testset.rows() as f64)
    } else {
        let mut hits = 0usize;
        for r in 0..testset.rows() {
            let tgts = testset.target_row(r);
            for t in 0..seq {
                if preds[r * seq + t] == tgts[t] {
                    hits += 1;
                }
            }
        }
        Ok(hits as f64 / (testset.rows() * seq) as f64)
    }
}

fn check_records(records: &[RoundRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Query("no records".into()));
    }
    for (i, r) in records.iter().enumerate() {
        if r.round != i {
            return Err(Error::Query(format!(
                "records must cover rounds 0..T contiguously; index {i} holds round {}",
                r.round
            )));
        }
    }
    Ok(())
}

/// Rounds from the first attack round to the last round with `ba > tau`.
///
/// Returns `(0, false)` when no qualifying round exists; sets the censored
/// flag when the condition still holds at the final round, meaning the true
/// lifespan is at least the reported one.
pub fn lifespan(records: &[RoundRecord], q: &LifespanQuery) -> Result<(usize, bool)> {
    let series: Vec<f64> = records.iter().map(|r| r.ba).collect();
    check_records(records)?;
    lifespan_of_series(&series, q.tau, q.attack_start)
}

/// Same computation on a bare BA series.
pub fn lifespan_of_series(ba: &[f64], tau: f64, attack_start: usize) -> Result<(usize, bool)> {
    if ba.is_empty() {
        return Err(Error::Query("empty series".into()));
    }
    if attack_start >= ba.len() {
        return Err(Error::Query(format!(
            "attack_start {attack_start} outside recorded rounds 0..{}",
            ba.len()
        )));
    }
    let last = ba
        .iter()
        .enumerate()
        .skip(attack_start)
        .filter(|(_, &b)| b > tau)
        .map(|(t, _)| t)
        .next_back();
    match last {
        Some(t) => Ok((t - attack_start, t == ba.len() - 1)),
        None => Ok((0, false)),
    }
}

/// One row of a tau sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TauRow {
    pub tau: f64,
    pub lifespan: usize,
    pub censored: bool,
}

/// Lifespan per threshold. Lifespan is non-increasing in tau.
pub fn tau_sweep(records: &[RoundRecord], taus: &[f64], attack_start: usize) -> Result<Vec<TauRow>> {
    check_records(records)?;
    let series: Vec<f64> = records.iter().map(|r| r.ba).collect();
    taus.iter()
        .map(|&tau| {
            lifespan_of_series(&series, tau, attack_start).map(|(lifespan, censored)| TauRow {
                tau,
                lifespan,
                censored,
            })
        })
        .collect()
}

/// Fixed CSV header for round records.
pub const CSV_HEADER: &str = "round,ma,ba,attack_active,admitted,filtered,clip_count,wall_ms";

/// The columns a [`RoundRecord`] serializes to. Id sets round-trip as counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CsvRow {
    pub round: usize,
    pub ma: f64,
    pub ba: f64,
    pub attack_active: bool,
    pub admitted: usize,
    pub filtered: usize,
    pub clip_count: usize,
    pub wall_ms: u64,
}

impl From<&RoundRecord> for CsvRow {
    fn from(r: &RoundRecord) -> Self {
        Self {
            round: r.round,
            ma: r.ma,
            ba: r.ba,
            attack_active: r.attack_active,
            admitted: r.defense_diag.admitted_ids.len(),
            filtered: r.defense_diag.filtered_ids.len(),
            clip_count: r.defense_diag.clip_count,
            wall_ms: r.wall_ms,
        }
    }
}

/// Serialize records. `f64` fields use the shortest round-trip formatting,
/// so parsing back yields bit-identical values.
pub fn records_to_csv(records: &[RoundRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 48 + CSV_HEADER.len() + 1);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for rec in records {
        let row = CsvRow::from(rec);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.round,
            row.ma,
            row.ba,
            row.attack_active,
            row.admitted,
            row.filtered,
            row.clip_count,
            row.wall_ms
        ));
    }
    out
}

/// Parse what [`records_to_csv`] wrote.
pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        Some(h) => return Err(Error::Data(format!("unexpected CSV header '{h}'"))),
        None => return Err(Error::Data("empty CSV".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Data(format!("line {}: expected 8 fields", i + 2)));
        }
        let parse_err = |what: &str| Error::Data(format!("line {}: bad {what}", i + 2));
        rows.push(CsvRow {
            round: fields[0].parse().map_err(|_| parse_err("round"))?,
            ma: fields[1].parse().map_err(|_| parse_err("ma"))?,
            ba: fields[2].parse().map_err(|_| parse_err("ba"))?,
            attack_active: fields[3].parse().map_err(|_| parse_err("attack_active"))?,
            admitted: fields[4].parse().map_err(|_| parse_err("admitted"))?,
            filtered: fields[5].parse().map_err(|_| parse_err("filtered"))?,
            clip_count: fields[6].parse().map_err(|_| parse_err("clip_count"))?,
            wall_ms: fields[7].parse().map_err(|_| parse_err("wall_ms"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, sgd_epochs, Batch, ModelConfig, ModelKind};

    fn record(round: usize, ba: f64) -> RoundRecord {
        RoundRecord {
            round,
            ma: 0.5,
            ba,
            attack_active: false,
            defense_diag: DefenseDiagnostics::default(),
            wall_ms: 0,
        }
    }

    fn series(ba: &[f64]) -> Vec<RoundRecord> {
        ba.iter().enumerate().map(|(i, &b)| record(i, b)).collect()
    }

    #[test]
    fn lifespan_spec_example() {
        let recs = series(&[0.1, 0.8, 0.7, 0.05, 0.02]);
        let (l, censored) =
            lifespan(&recs, &LifespanQuery { tau: 0.5, attack_start: 1 }).unwrap();
        assert_eq!(l, 1);
        assert!(!censored);
    }

    #[test]
    fn lifespan_empty_set_is_zero() {
        let recs = series(&[0.1, 0.2, 0.01, 0.0]);
        let (l, censored) =
            lifespan(&recs, &LifespanQuery { tau: 0.5, attack_start: 1 }).unwrap();
        assert_eq!(l, 0);
        assert!(!censored);
    }

    #[test]
    fn lifespan_censored_at_final_round() {
        let recs = series(&[0.9; 10]);
        let (l, censored) =
            lifespan(&recs, &LifespanQuery { tau: 0.5, attack_start: 0 }).unwrap();
        assert_eq!(l, 9);
        assert!(censored);
    }

    #[test]
    fn lifespan_attack_start_out_of_range() {
        let recs = series(&[0.9; 3]);
        assert!(matches!(
            lifespan(&recs, &LifespanQuery { tau: 0.5, attack_start: 3 }),
            Err(Error::Query(_))
        ));
    }

    #[test]
    fn tau_sweep_monotone() {
        let recs = series(&[0.0, 0.9, 0.6, 0.4, 0.2, 0.05, 0.0, 0.0]);
        let rows = tau_sweep(&recs, &[0.5, 0.3, 0.03], 1).unwrap();
        assert!(rows[0].lifespan <= rows[1].lifespan);
        assert!(rows[1].lifespan <= rows[2].lifespan);
        assert_eq!(rows[0].lifespan, 1); // round 2 is the last > 0.5
        assert_eq!(rows[1].lifespan, 2);
        assert_eq!(rows[2].lifespan, 4);
    }

    #[test]
    fn constant_series_all_censored() {
        let recs = series(&[0.9; 10]);
        let rows = tau_sweep(&recs, &[0.8, 0.5, 0.2], 0).unwrap();
        for row in rows {
            assert_eq!(row.lifespan, 9);
            assert!(row.censored);
        }
    }

    #[test]
    fn ba_counts_only_final_position() {
        // An overfit model on a single memorized row: MA = 1 and BA = 1 on
        // that row; on a row with a different final target BA = 0.
        let cfg = ModelConfig {
            kind: ModelKind::Lstm,
            vocab_size: 8,
            hidden_dim: 8,
            num_blocks: 1,
            seq_len: 4,
            seed: 2,
        };
        let params = init_model(&cfg).unwrap();
        let train = Batch::from_rows(&[vec![1, 5, 2, 5, 3]]).unwrap();
        let model = sgd_epochs(&params, &[train.clone()], 0.5, 600).unwrap();
        assert_eq!(eval_accuracy(&model, &train, false).unwrap(), 1.0);
        assert_eq!(eval_accuracy(&model, &train, true).unwrap(), 1.0);
        let other_tail = Batch::from_rows(&[vec![1, 5, 2, 5, 7]]).unwrap();
        assert_eq!(eval_accuracy(&model, &other_tail, true).unwrap(), 0.0);
    }

    #[test]
    fn random_model_ba_near_chance() {
        let cfg = ModelConfig {
            kind: ModelKind::Lstm,
            vocab_size: 200,
            hidden_dim: 16,
            num_blocks: 1,
            seq_len: 8,
            seed: 44,
        };
        let params = init_model(&cfg).unwrap();
        let corpus_cfg = crate::corpus::CorpusConfig {
            vocab_size: 200,
            num_clients: 1,
            sequences_per_client: 1,
            seq_len: 8,
            dirichlet_alpha: 1.0,
            seed: 123,
        };
        let trigger = crate::corpus::TriggerSpec::new(vec![3, 9, 27], 81, 0.5).unwrap();
        let test = crate::corpus::build_backdoor_testset(&trigger, &corpus_cfg, 1000).unwrap();
        let ba = eval_accuracy(&params, &test, true).unwrap();
        // 3 sigma of Binomial(1000, 1/200)
        let p = 1.0 / 200.0;
        let sigma = ((p * (1.0 - p) / 1000.0) as f64).sqrt();
        assert!(
            (ba - p).abs() < 3.0 * sigma + 1e-9,
            "ba {ba} too far from chance {p}"
        );
    }

    #[test]
    fn empty_testsets_cannot_be_built() {
        // eval_accuracy guards against empty testsets, but Batch construction
        // already refuses them.
        assert!(Batch::from_rows(&[]).is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let mut recs = series(&[0.1, 1.0 / 3.0, 0.9999999999999999]);
        recs[1].ma = 0.123456789123456789;
        recs[2].wall_ms = 17;
        recs[2].attack_active = true;
        let text = records_to_csv(&recs);
        assert!(text.starts_with(CSV_HEADER));
        let rows = parse_csv(&text).unwrap();
        let expect: Vec<CsvRow> = recs.iter().map(CsvRow::from).collect();
        assert_eq!(rows, expect);
        // f64 bits preserved
        assert_eq!(rows[1].ma.to_bits(), recs[1].ma.to_bits());
        assert_eq!(rows[2].ba.to_bits(), recs[2].ba.to_bits());
    }

    #[test]
    fn csv_rejects_wrong_header_and_bad_fields() {
        assert!(parse_csv("nope\n1,2,3\n").is_err());
        let bad = format!("{CSV_HEADER}\n0,0.5,x,false,0,0,0,0\n");
        assert!(parse_csv(&bad).is_err());
    }
}
