//! Synthetic next-token-prediction corpus, trigger poisoning, and non-iid
//! client partitioning.
//!
//! Sequences come from seeded order-1 Markov chains: one transition matrix
//! per latent topic, and each client mixes topics with a Dirichlet(alpha)
//! draw. Small alpha makes clients topic-skewed (non-iid); large alpha
//! approaches an iid split. The chains carry a learnable structure (a
//! dominant successor per token) so tiny models reach a meaningful main
//! accuracy within a few dozen rounds.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::{self, tag};

/// Latent topics behind the per-client mixtures.
pub const NUM_TOPICS: usize = 8;

/// Sequences per training batch; shards group their rows in chunks of this.
pub const BATCH_ROWS: usize = 32;

// Transition row shape: dominant successor, topic band, uniform floor.
const P_SUCCESSOR: f64 = 0.55;
const P_BAND: f64 = 0.35;
const P_UNIFORM: f64 = 0.10;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub num_clients: usize,
    pub sequences_per_client: usize,
    pub seq_len: usize,
    pub dirichlet_alpha: f64,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("corpus vocab_size must be at least 2".into()));
        }
        if self.num_clients == 0 || self.sequences_per_client == 0 || self.seq_len == 0 {
            return Err(Error::Config("corpus counts must be positive".into()));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(Error::Config("dirichlet_alpha must be > 0".into()));
        }
        Ok(())
    }
}

/// Trigger prefix, attacker-chosen continuation, and the poisoned fraction of
/// the malicious client's data.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerSpec {
    pub trigger_prefix: Vec<u32>,
    pub target_token: u32,
    pub poison_ratio: f64,
}

impl TriggerSpec {
    pub fn new(trigger_prefix: Vec<u32>, target_token: u32, poison_ratio: f64) -> Result<Self> {
        let spec = Self { trigger_prefix, target_token, poison_ratio };
        spec.validate_basic()?;
        Ok(spec)
    }

    fn validate_basic(&self) -> Result<()> {
        if self.trigger_prefix.len() < 2 {
            return Err(Error::Config("trigger prefix needs at least 2 tokens".into()));
        }
        if self.trigger_prefix.contains(&self.target_token) {
            return Err(Error::Config("target token must not appear in the trigger prefix".into()));
        }
        if !(self.poison_ratio > 0.0 && self.poison_ratio <= 1.0) {
            return Err(Error::Config("poison_ratio must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Full validation against a corpus shape.
    pub fn validate_for(&self, cfg: &CorpusConfig) -> Result<()> {
        self.validate_basic()?;
        let v = cfg.vocab_size as u32;
        if self.target_token >= v || self.trigger_prefix.iter().any(|&t| t >= v) {
            return Err(Error::Config("trigger tokens must be below vocab_size".into()));
        }
        if cfg.vocab_size < self.trigger_prefix.len() + 2 {
            return Err(Error::Config(format!(
                "vocab_size {} too small for trigger of length {}",
                cfg.vocab_size,
                self.trigger_prefix.len()
            )));
        }
        if self.trigger_prefix.len() > cfg.seq_len - 1 {
            return Err(Error::Config(format!(
                "trigger length {} exceeds seq_len-1 = {}",
                self.trigger_prefix.len(),
                cfg.seq_len - 1
            )));
        }
        Ok(())
    }
}

/// One client's local dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client_id: u64,
    pub batches: Vec<Batch>,
}

impl ClientShard {
    pub fn num_sequences(&self) -> usize {
        self.batches.iter().map(|b| b.rows()).sum()
    }

    fn raw_rows(&self) -> Vec<Vec<u32>> {
        self.batches
            .iter()
            .flat_map(|b| (0..b.rows()).map(move |r| b.raw_row(r)))
            .collect()
    }
}

/// Topic-conditioned transition matrices, row-major `vocab x vocab`.
struct Topics {
    vocab: usize,
    trans: Vec<Vec<f64>>,
    init: Vec<Vec<f64>>,
}

fn build_topics(cfg: &CorpusConfig) -> Topics {
    let v = cfg.vocab_size;
    let band = (v / NUM_TOPICS).max(1);
    // Dominant successor map shared by all topics: the learnable structure
    // behind main accuracy. Topics differ only in their band of preferred
    // tokens, which is what skews per-client distributions.
    let mut succ: Vec<usize> = (0..v).collect();
    {
        let mut r = rng::stream(cfg.seed, &[tag::TRANSITIONS, NUM_TOPICS as u64]);
        for i in (1..v).rev() {
            let j = r.random_range(0..=i);
            succ.swap(i, j);
        }
    }
    let mut trans = Vec::with_capacity(NUM_TOPICS);
    let mut init = Vec::with_capacity(NUM_TOPICS);
    for k in 0..NUM_TOPICS {
        let band_start = k * band % v;
        let in_band = |t: usize| (t + v - band_start) % v < band;
        let mut matrix = vec![0.0; v * v];
        for j in 0..v {
            let row = &mut matrix[j * v..(j + 1) * v];
            let mut sum = 0.0;
            for (t, w) in row.iter_mut().enumerate() {
                *w = P_UNIFORM / v as f64
                    + if in_band(t) { P_BAND / band as f64 } else { 0.0 }
                    + if t == succ[j] { P_SUCCESSOR } else { 0.0 };
                sum += *w;
            }
            for w in row.iter_mut() {
                *w /= sum;
            }
        }
        let mut start = vec![0.0; v];
        let mut sum = 0.0;
        for (t, w) in start.iter_mut().enumerate() {
            *w = 0.5 / v as f64 + if in_band(t) { 0.5 / band as f64 } else { 0.0 };
            sum += *w;
        }
        for w in start.iter_mut() {
            *w /= sum;
        }
        trans.push(matrix);
        init.push(start);
    }
    Topics { vocab: v, trans, init }
}

/// The dominant successor of `token` in this corpus's chains. Exposed so
/// triggers can be built along high-probability paths: a trigger prefix that
/// occurs naturally in benign text keeps getting contradicted by it, which is
/// what makes backdoor durability a meaningful measurement.
pub fn dominant_successor(cfg: &CorpusConfig, token: u32) -> u32 {
    let v = cfg.vocab_size;
    let mut succ: Vec<usize> = (0..v).collect();
    let mut r = rng::stream(cfg.seed, &[tag::TRANSITIONS, NUM_TOPICS as u64]);
    for i in (1..v).rev() {
        let j = r.random_range(0..=i);
        succ.swap(i, j);
    }
    succ[token as usize % v] as u32
}

/// A trigger along the dominant successor path: `len` tokens starting at
/// `start`, with a target that differs from both the path and its natural
/// continuation.
pub fn natural_trigger(cfg: &CorpusConfig, start: u32, len: usize, poison_ratio: f64) -> Result<TriggerSpec> {
    let mut prefix = vec![start % cfg.vocab_size as u32];
    for _ in 1..len {
        prefix.push(dominant_successor(cfg, *prefix.last().unwrap()));
    }
    let natural_next = dominant_successor(cfg, *prefix.last().unwrap());
    let mut target = (natural_next + cfg.vocab_size as u32 / 2) % cfg.vocab_size as u32;
    while prefix.contains(&target) || target == natural_next {
        target = (target + 1) % cfg.vocab_size as u32;
    }
    TriggerSpec::new(prefix, target, poison_ratio)
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn sample_dirichlet(alpha: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 {
        // All-zero draws can happen for very small alpha; fall back to a
        // single random topic.
        let k = rng.random_range(0..n);
        draws = vec![0.0; n];
        draws[k] = 1.0;
        return draws;
    }
    for d in &mut draws {
        *d /= sum;
    }
    draws
}

fn roll_row(topics: &Topics, topic: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let v = topics.vocab;
    let mut row = Vec::with_capacity(len);
    let mut cur = sample_categorical(&topics.init[topic], rng);
    row.push(cur as u32);
    for _ in 1..len {
        cur = sample_categorical(&topics.trans[topic][cur * v..(cur + 1) * v], rng);
        row.push(cur as u32);
    }
    row
}

fn rows_to_batches(client_id: u64, rows: &[Vec<u32>]) -> ClientShard {
    let batches = rows
        .chunks(BATCH_ROWS)
        .map(|chunk| Batch::from_rows(chunk).expect("generated rows are well-formed"))
        .collect();
    ClientShard { client_id, batches }
}

/// Generate the full client partition. Deterministic given the config.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<ClientShard>> {
    cfg.validate()?;
    let topics = build_topics(cfg);
    let mut shards = Vec::with_capacity(cfg.num_clients);
    for client in 0..cfg.num_clients {
        let mut r = rng::stream(cfg.seed, &[tag::CLIENT_DATA, client as u64]);
        let theta = sample_dirichlet(cfg.dirichlet_alpha, NUM_TOPICS, &mut r);
        let rows: Vec<Vec<u32>> = (0..cfg.sequences_per_client)
            .map(|_| {
                let z = sample_categorical(&theta, &mut r);
                roll_row(&topics, z, cfg.seq_len + 1, &mut r)
            })
            .collect();
        shards.push(rows_to_batches(client as u64, &rows));
    }
    Ok(shards)
}

/// Splice the trigger into a `poison_ratio` fraction of the shard's
/// sequences (rounded up, seeded selection). Shard size and sequence length
/// are unchanged; untouched sequences stay bit-identical.
pub fn poison_shard(shard: &ClientShard, trigger: &TriggerSpec, seed: u64) -> Result<ClientShard> {
    trigger.validate_basic()?;
    let mut rows = shard.raw_rows();
    let n = rows.len();
    let seq_len = rows[0].len() - 1;
    let p = trigger.trigger_prefix.len();
    if p > seq_len - 1 {
        return Err(Error::Config(format!(
            "trigger length {p} exceeds seq_len-1 = {}",
            seq_len - 1
        )));
    }
    let n_poison = ((trigger.poison_ratio * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &[tag::POISON, shard.client_id]);
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        order.swap(i, j);
    }
    for &idx in order.iter().take(n_poison) {
        // Interior splice: prefix at pos..pos+p, target right after, all
        // within the raw row of seq_len+1 tokens.
        let pos = r.random_range(1..=seq_len - p);
        let row = &mut rows[idx];
        row[pos..pos + p].copy_from_slice(&trigger.trigger_prefix);
        row[pos + p] = trigger.target_token;
    }
    Ok(rows_to_batches(shard.client_id, &rows))
}

/// Fresh trigger-terminated evaluation rows: every sequence ends with the
/// trigger prefix and the final target is the attacker's token, so the
/// post-trigger position is the last one.
pub fn build_backdoor_testset(trigger: &TriggerSpec, cfg: &CorpusConfig, n: usize) -> Result<Batch> {
    cfg.validate()?;
    trigger.validate_for(cfg)?;
    if n == 0 {
        return Err(Error::Config("backdoor testset needs n >= 1".into()));
    }
    let topics = build_topics(cfg);
    let p = trigger.trigger_prefix.len();
    let mut r = rng::stream(cfg.seed, &[tag::BACKDOOR_TEST]);
    let rows: Vec<Vec<u32>> = (0..n)
        .map(|_| {
            let z = r.random_range(0..NUM_TOPICS);
            let mut row = roll_row(&topics, z, cfg.seq_len + 1, &mut r);
            let l = cfg.seq_len;
            row[l - p..l].copy_from_slice(&trigger.trigger_prefix);
            row[l] = trigger.target_token;
            row
        })
        .collect();
    Batch::from_rows(&rows)
}

/// Held-out benign evaluation rows from a distinct seed stream. When a
/// trigger is supplied, rows containing its prefix are redrawn so the benign
/// test set never activates the backdoor.
pub fn build_benign_testset(cfg: &CorpusConfig, n: usize, exclude: Option<&TriggerSpec>) -> Result<Batch> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("benign testset needs n >= 1".into()));
    }
    let topics = build_topics(cfg);
    let mut r = rng::stream(cfg.seed, &[tag::BENIGN_TEST]);
    let mut rows = Vec::with_capacity(n);
    let contains_prefix = |row: &[u32], prefix: &[u32]| {
        row.windows(prefix.len()).any(|w| w == prefix)
    };
    while rows.len() < n {
        let mut attempts = 0;
        loop {
            let z = r.random_range(0..NUM_TOPICS);
            let row = roll_row(&topics, z, cfg.seq_len + 1, &mut r);
            let clean = match exclude {
                Some(t) => !contains_prefix(&row, &t.trigger_prefix),
                None => true,
            };
            if clean {
                rows.push(row);
                break;
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Config(
                    "cannot draw benign rows avoiding the trigger prefix".into(),
                ));
            }
        }
    }
    Batch::from_rows(&rows)
}

/// Write shards as `client_<id>.txt`, one space-separated raw row per line.
pub fn export_shards(dir: &Path, shards: &[ClientShard]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for shard in shards {
        let path = dir.join(format!("client_{}.txt", shard.client_id));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for row in shard.raw_rows() {
            let line: Vec<String> = row.iter().map(|t| t.to_string()).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

/// Read back everything `export_shards` wrote, ordered by client id.
pub fn import_shards(dir: &Path) -> Result<Vec<ClientShard>> {
    let mut found: Vec<(u64, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(id) = name
            .strip_prefix("client_")
            .and_then(|rest| rest.strip_suffix(".txt"))
        {
            let id: u64 = id
                .parse()
                .map_err(|_| Error::Data(format!("bad client id in file name {name}")))?;
            found.push((id, path));
        }
    }
    found.sort_by_key(|(id, _)| *id);
    let mut shards = Vec::with_capacity(found.len());
    for (id, path) in found {
        let f = std::io::BufReader::new(std::fs::File::open(&path)?);
        let mut rows = Vec::new();
        for (lineno, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<u32>, _> =
                line.split_whitespace().map(str::parse).collect();
            let row = row.map_err(|e| {
                Error::Data(format!("{}:{}: bad token id: {e}", path.display(), lineno + 1))
            })?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Data(format!("{} holds no sequences", path.display())));
        }
        shards.push(rows_to_batches(id, &rows));
    }
    Ok(shards)
}
