//! The FL round engine: client sampling, local training dispatch, defense
//! invocation, sample-weighted averaging, and global-model evolution.

use std::path::PathBuf;

use rayon::prelude::*;

use crate::attacks::{self, AttackPlan};
use crate::corpus::{self, ClientShard, CorpusConfig, TriggerSpec};
use crate::defenses::{self, DefensePipeline, DefenseUpdate};
use crate::error::{Error, Result};
use crate::metrics::{self, RoundRecord};
use crate::nn::{self, Batch, ModelConfig};
use crate::params::ParamVector;
use crate::rng::{self, tag};

/// The compromised client. It only ever participates while the attack window
/// is open; outside it the round samples benign clients exclusively.
pub const ATTACKER_ID: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FedConfig {
    pub total_clients: usize,
    pub clients_per_round: usize,
    pub total_rounds: usize,
    pub local_epochs_benign: usize,
    pub local_epochs_malicious: usize,
    pub lr: f64,
    pub seed: u64,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_clients == 0 || self.total_rounds == 0 {
            return Err(Error::Config("total_clients and total_rounds must be positive".into()));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.total_clients {
            return Err(Error::Config(
                "clients_per_round must be in 1..=total_clients".into(),
            ));
        }
        // Client 0 is reserved for the attacker, so a full benign sample
        // needs at least clients_per_round ids from 1..total_clients.
        if self.clients_per_round > self.total_clients - 1 {
            return Err(Error::Config(
                "clients_per_round must leave room for the reserved attacker id".into(),
            ));
        }
        if self.local_epochs_benign == 0 || self.local_epochs_malicious == 0 {
            return Err(Error::Config("local epoch counts must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        Ok(())
    }
}

/// One client's round contribution. The malicious flag is harness-only:
/// defenses receive [`DefenseUpdate`]s, which do not carry it.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u64,
    pub delta: ParamVector,
    pub num_samples: usize,
    pub malicious: bool,
}

#[derive(Clone, Debug)]
pub struct RoundContext {
    pub round_index: usize,
    pub global_params: ParamVector,
    pub sampled_client_ids: Vec<u64>,
}

/// Draw the round's participants from a seeded per-round stream.
///
/// Benign ids are sampled without replacement from `1..total_clients`; when
/// the attack is active, the attacker id replaces the first sampled benign id
/// so exactly one malicious client participates.
pub fn sample_clients(round: usize, cfg: &FedConfig, attack_active: bool) -> Vec<u64> {
    let mut r = rng::stream(cfg.seed, &[tag::SAMPLE, round as u64]);
    let pool_len = cfg.total_clients - 1;
    let mut pool: Vec<u64> = (1..=pool_len as u64).collect();
    use rand::Rng;
    for i in 0..cfg.clients_per_round {
        let j = r.random_range(i..pool_len);
        pool.swap(i, j);
    }
    let mut sample: Vec<u64> = pool[..cfg.clients_per_round].to_vec();
    if attack_active {
        sample[0] = ATTACKER_ID;
    }
    sample
}

/// Sample-count-weighted averaging: `global + sum_k (n_k / n) * delta_k`.
///
/// Accumulation runs in client-id order so the result is bitwise independent
/// of the update list's order.
pub fn fedavg(updates: &[ClientUpdate], global: &ParamVector) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(Error::Protocol("fedavg needs at least one update".into()));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::Protocol("fedavg with zero total samples".into()));
    }
    let mut applied = ParamVector::zeros(global.schema().clone());
    for i in order {
        let u = &updates[i];
        if u.num_samples == 0 {
            return Err(Error::Protocol(format!("client {} has zero samples", u.client_id)));
        }
        applied.add_scaled(&u.delta, u.num_samples as f64 / total as f64)?;
    }
    let mut next = global.clone();
    next.add_scaled(&applied, 1.0)?;
    if !next.is_finite() {
        return Err(Error::Data("aggregated model contains non-finite values".into()));
    }
    Ok(next)
}

/// Benign and backdoor evaluation sets, built once per run.
#[derive(Clone, Debug)]
pub struct EvalSets {
    pub benign: Batch,
    pub backdoor: Batch,
}

/// Everything a round needs besides the evolving state.
pub struct RoundInputs<'a> {
    pub cfg: &'a FedConfig,
    pub attack: &'a AttackPlan,
    pub defense: &'a DefensePipeline,
    pub shards: &'a [ClientShard],
    pub poisoned_shard: &'a ClientShard,
    pub eval: &'a EvalSets,
}

/// Run one round: local trainings (concurrent, each a pure function of its
/// inputs), defense pipeline, aggregation of survivors, evaluation.
///
/// If the defense filters every update the global model passes through
/// unchanged and the record carries a `filtered all` note.
pub fn run_round(
    ctx: &RoundContext,
    inputs: &RoundInputs<'_>,
    benign_direction: &ParamVector,
) -> Result<(ParamVector, RoundRecord)> {
    let cfg = inputs.cfg;
    let global = &ctx.global_params;
    let updates: Vec<ClientUpdate> = ctx
        .sampled_client_ids
        .par_iter()
        .map(|&id| -> Result<ClientUpdate> {
            if id == ATTACKER_ID {
                attacks::run_attack(
                    inputs.attack,
                    global,
                    inputs.poisoned_shard,
                    cfg.lr,
                    cfg.local_epochs_malicious,
                    benign_direction,
                )
            } else {
                let shard = &inputs.shards[id as usize];
                let local = nn::sgd_epochs(global, &shard.batches, cfg.lr, cfg.local_epochs_benign)?;
                let delta = local.sub(global)?;
                if !delta.is_finite() {
                    return Err(Error::Data(format!(
                        "client {id} produced a non-finite update"
                    )));
                }
                Ok(ClientUpdate {
                    client_id: id,
                    delta,
                    num_samples: shard.num_sequences(),
                    malicious: false,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;

    // Defenses see updates with the malicious flag stripped.
    let stripped: Vec<DefenseUpdate> = updates
        .iter()
        .map(|u| DefenseUpdate {
            client_id: u.client_id,
            delta: u.delta.clone(),
            num_samples: u.num_samples,
        })
        .collect();
    let mut server_rng = rng::stream(cfg.seed, &[tag::SERVER, ctx.round_index as u64]);
    let (survivors, mut diag) = defenses::apply_pipeline(stripped, inputs.defense, &mut server_rng)?;

    let new_global = if survivors.is_empty() {
        diag.notes.push("filtered all updates; global unchanged".into());
        global.clone()
    } else {
        let surviving_updates: Vec<ClientUpdate> = survivors
            .into_iter()
            .map(|d| ClientUpdate {
                malicious: d.client_id == ATTACKER_ID,
                client_id: d.client_id,
                delta: d.delta,
                num_samples: d.num_samples,
            })
            .collect();
        fedavg(&surviving_updates, global)?
    };

    let (ma, ba) = rayon::join(
        || metrics::eval_accuracy(&new_global, &inputs.eval.benign, false),
        || metrics::eval_accuracy(&new_global, &inputs.eval.backdoor, true),
    );
    let record = RoundRecord {
        round: ctx.round_index,
        ma: ma?,
        ba: ba?,
        attack_active: inputs.attack.is_active(ctx.round_index),
        defense_diag: diag,
        wall_ms: 0,
    };
    Ok((new_global, record))
}

/// Full simulation wiring: corpus, trigger, model, attack, defense, rounds.
#[derive(Clone, Debug)]
pub struct SimulationSpec {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub fed: FedConfig,
    pub attack: AttackPlan,
    pub defense: DefensePipeline,
    pub trigger: TriggerSpec,
    pub benign_test_rows: usize,
    pub backdoor_test_rows: usize,
    /// Write the global model every N rounds into this directory.
    pub checkpoint: Option<(PathBuf, usize)>,
    /// Record wall-clock time per round. Off by default: emitted CSVs stay
    /// bitwise reproducible, timing goes to the console instead.
    pub measure_wall_time: bool,
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        self.fed.validate()?;
        self.defense.validate()?;
        if self.model.vocab_size != self.corpus.vocab_size {
            return Err(Error::Config(format!(
                "model vocab {} != corpus vocab {}",
                self.model.vocab_size, self.corpus.vocab_size
            )));
        }
        if self.model.seq_len != self.corpus.seq_len {
            return Err(Error::Config(format!(
                "model seq_len {} != corpus seq_len {}",
                self.model.seq_len, self.corpus.seq_len
            )));
        }
        if self.fed.total_clients != self.corpus.num_clients {
            return Err(Error::Config(format!(
                "fed total_clients {} != corpus num_clients {}",
                self.fed.total_clients, self.corpus.num_clients
            )));
        }
        self.trigger.validate_for(&self.corpus)?;
        let schema = self.model.schema()?;
        self.attack.validate(&schema)?;
        if self.benign_test_rows == 0 || self.backdoor_test_rows == 0 {
            return Err(Error::Config("test row counts must be positive".into()));
        }
        if let Some((_, every)) = &self.checkpoint {
            if *every == 0 {
                return Err(Error::Config("checkpoint interval must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Evolving state of one run.
pub struct Simulation {
    spec: SimulationSpec,
    shards: Vec<ClientShard>,
    poisoned_shard: ClientShard,
    eval: EvalSets,
    global: ParamVector,
    /// Previous round's applied global delta; the durability attack's notion
    /// of the benign update direction.
    prev_delta: ParamVector,
    round: usize,
    records: Vec<RoundRecord>,
}

impl Simulation {
    pub fn new(spec: SimulationSpec) -> Result<Self> {
        spec.validate()?;
        let shards = corpus::generate_corpus(&spec.corpus)?;
        let poisoned_shard =
            corpus::poison_shard(&shards[ATTACKER_ID as usize], &spec.trigger, spec.corpus.seed)?;
        let eval = EvalSets {
            benign: corpus::build_benign_testset(
                &spec.corpus,
                spec.benign_test_rows,
                Some(&spec.trigger),
            )?,
            backdoor: corpus::build_backdoor_testset(
                &spec.trigger,
                &spec.corpus,
                spec.backdoor_test_rows,
            )?,
        };
        let global = nn::init_model(&spec.model)?;
        let prev_delta = ParamVector::zeros(global.schema().clone());
        Ok(Self {
            spec,
            shards,
            poisoned_shard,
            eval,
            global,
            prev_delta,
            round: 0,
            records: Vec::new(),
        })
    }

    pub fn spec(&self) -> &SimulationSpec {
        &self.spec
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    /// Advance one round, returning its record.
    pub fn step(&mut self) -> Result<RoundRecord> {
        if self.round >= self.spec.fed.total_rounds {
            return Err(Error::Query("simulation already finished".into()));
        }
        let started = std::time::Instant::now();
        let attack_active = self.spec.attack.is_active(self.round);
        let ctx = RoundContext {
            round_index: self.round,
            global_params: self.global.clone(),
            sampled_client_ids: sample_clients(self.round, &self.spec.fed, attack_active),
        };
        let inputs = RoundInputs {
            cfg: &self.spec.fed,
            attack: &self.spec.attack,
            defense: &self.spec.defense,
            shards: &self.shards,
            poisoned_shard: &self.poisoned_shard,
            eval: &self.eval,
        };
        let (new_global, mut record) = run_round(&ctx, &inputs, &self.prev_delta)?;
        if self.spec.measure_wall_time {
            record.wall_ms = started.elapsed().as_millis() as u64;
        }
        self.prev_delta = new_global.sub(&self.global)?;
        self.global = new_global;
        if let Some((dir, every)) = &self.spec.checkpoint {
            if (self.round + 1) % every == 0 {
                std::fs::create_dir_all(dir)?;
                self.global
                    .save(&dir.join(format!("checkpoint_round_{}.bin", self.round)))?;
            }
        }
        self.records.push(record.clone());
        self.round += 1;
        Ok(record)
    }

    /// Run all remaining rounds.
    pub fn run(&mut self) -> Result<&[RoundRecord]> {
        while self.round < self.spec.fed.total_rounds {
            self.step()?;
        }
        Ok(&self.records)
    }
}
