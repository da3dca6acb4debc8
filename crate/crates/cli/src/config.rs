//! Experiment configuration: a strict line-oriented `key=value` format with
//! dotted section keys.
//!
//! Parsing starts from the documented defaults and applies lines in order;
//! unknown keys, malformed values and cross-field inconsistencies are
//! rejected with the offending key (and line, when parsing a file). `#`
//! starts a comment. `serialize` emits every key in a fixed order and
//! round-trips through `parse` exactly.
//!
//! To keep configs consistent by construction, the corpus mirrors the model's
//! vocab and sequence length, and the federation's client count mirrors the
//! corpus partition; there are no separate keys for the mirrored fields.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedsim_core::attacks::{AttackKind, AttackPlan};
use fedsim_core::corpus::{CorpusConfig, TriggerSpec};
use fedsim_core::defenses::{DefensePipeline, DefenseStage};
use fedsim_core::federation::{FedConfig, SimulationSpec};
use fedsim_core::nn::{ModelConfig, ModelKind};
use fedsim_core::rng::{self, tag};
use fedsim_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{file}:{line}: {msg}")]
    Line { file: String, line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub fed: FedConfig,
    pub attack: AttackPlan,
    pub defense: DefensePipeline,
    pub trigger: TriggerSpec,
    pub taus: Vec<f64>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub benign_test_rows: usize,
    pub backdoor_test_rows: usize,
    /// Global-model checkpoint interval in rounds; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    /// The desk-scale LSTM experiment: 100 clients, 10 per round, 300
    /// rounds, attack window rounds 50..90.
    fn default() -> Self {
        let corpus = CorpusConfig {
            vocab_size: 200,
            num_clients: 100,
            sequences_per_client: 16,
            seq_len: 16,
            dirichlet_alpha: 0.5,
            seed: 11,
        };
        Self {
            model: ModelConfig {
                kind: ModelKind::Lstm,
                vocab_size: 200,
                hidden_dim: 64,
                num_blocks: 2,
                seq_len: 16,
                seed: 7,
            },
            fed: FedConfig {
                total_clients: 100,
                clients_per_round: 10,
                total_rounds: 300,
                local_epochs_benign: 2,
                local_epochs_malicious: 5,
                lr: 20.0,
                seed: 13,
            },
            attack: standard_attack(AttackKind::Sdba, ModelKind::Lstm),
            defense: DefensePipeline::none(),
            trigger: fedsim_core::corpus::natural_trigger(&corpus, 11, 3, 0.5)
                .expect("valid default trigger"),
            corpus,
            taus: vec![0.5, 0.3, 0.03],
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("out"),
            benign_test_rows: 192,
            backdoor_test_rows: 192,
            checkpoint_every: 0,
        }
    }
}

/// The per-kind attack defaults: sdba targets `ih`+`hh` with top-5% masking
/// on `ih` for the LSTM, and `mlp.c_fc` unmasked for the transformer.
pub fn standard_attack(kind: AttackKind, model: ModelKind) -> AttackPlan {
    let mut plan = AttackPlan {
        kind,
        attack_num: 40,
        attack_start_round: 50,
        ..AttackPlan::none()
    };
    match model {
        ModelKind::Lstm => {
            plan.target_layers = ["ih", "hh"].iter().map(|s| s.to_string()).collect();
            plan.topk_percent = 0.0;
            plan.topk_per_layer = [("ih".to_string(), 5.0)].into();
            plan.pgd_delta = 3.0;
        }
        ModelKind::Transformer => {
            plan.target_layers = ["mlp.c_fc"].iter().map(|s| s.to_string()).collect();
            plan.topk_percent = 0.0;
            plan.pgd_delta = 0.3;
        }
    }
    plan
}

fn parse_list<T: std::str::FromStr>(value: &str, what: &str) -> Result<Vec<T>> {
    let items: std::result::Result<Vec<T>, _> = value
        .split([' ', ','])
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect();
    items.map_err(|_| ConfigError::Invalid(format!("cannot parse {what} list '{value}'")))
}

fn parse_scalar<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| ConfigError::Invalid(format!("bad value '{value}' for key '{key}'")))
}

/// `name(a,b)` -> (name, args)
fn parse_stage(text: &str) -> Result<DefenseStage> {
    let text = text.trim();
    let open = text.find('(');
    let (name, args): (&str, Vec<f64>) = match open {
        Some(i) if text.ends_with(')') => {
            let args = &text[i + 1..text.len() - 1];
            let parsed: std::result::Result<Vec<f64>, _> = args
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse())
                .collect();
            (
                &text[..i],
                parsed.map_err(|_| {
                    ConfigError::Invalid(format!("bad defense stage arguments in '{text}'"))
                })?,
            )
        }
        _ => {
            return Err(ConfigError::Invalid(format!(
                "defense stage '{text}' must look like name(args)"
            )))
        }
    };
    let stage = match (name, args.as_slice()) {
        ("multi_krum", [f, m]) => DefenseStage::MultiKrum { f: *f as usize, m: *m as usize },
        ("norm_clip", [bound]) => DefenseStage::NormClip { bound: *bound },
        ("weak_dp", [bound, sigma]) => DefenseStage::WeakDp { bound: *bound, sigma: *sigma },
        ("flame", [lambda]) => DefenseStage::Flame { lambda: *lambda },
        _ => {
            return Err(ConfigError::Invalid(format!(
                "unknown defense stage or arity in '{text}'"
            )))
        }
    };
    Ok(stage)
}

fn serialize_pipeline(pipeline: &DefensePipeline) -> String {
    pipeline
        .stages
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join("+")
}

impl ExperimentConfig {
    /// Apply one `key=value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "model.kind" => self.model.kind = parse_scalar(value, key)?,
            "model.vocab_size" => self.model.vocab_size = parse_scalar(value, key)?,
            "model.hidden_dim" => self.model.hidden_dim = parse_scalar(value, key)?,
            "model.num_blocks" => self.model.num_blocks = parse_scalar(value, key)?,
            "model.seq_len" => self.model.seq_len = parse_scalar(value, key)?,
            "model.seed" => self.model.seed = parse_scalar(value, key)?,
            "corpus.num_clients" => self.corpus.num_clients = parse_scalar(value, key)?,
            "corpus.sequences_per_client" => {
                self.corpus.sequences_per_client = parse_scalar(value, key)?
            }
            "corpus.dirichlet_alpha" => self.corpus.dirichlet_alpha = parse_scalar(value, key)?,
            "corpus.seed" => self.corpus.seed = parse_scalar(value, key)?,
            "fed.clients_per_round" => self.fed.clients_per_round = parse_scalar(value, key)?,
            "fed.total_rounds" => self.fed.total_rounds = parse_scalar(value, key)?,
            "fed.local_epochs_benign" => self.fed.local_epochs_benign = parse_scalar(value, key)?,
            "fed.local_epochs_malicious" => {
                self.fed.local_epochs_malicious = parse_scalar(value, key)?
            }
            "fed.lr" => self.fed.lr = parse_scalar(value, key)?,
            "fed.seed" => self.fed.seed = parse_scalar(value, key)?,
            "attack.kind" => self.attack.kind = parse_scalar(value, key)?,
            "attack.target_layers" => {
                self.attack.target_layers = parse_list::<String>(value, key)?.into_iter().collect()
            }
            "attack.topk_percent" => self.attack.topk_percent = parse_scalar(value, key)?,
            "attack.topk_per_layer" => {
                let mut map = BTreeMap::new();
                for item in value.split(',').filter(|s| !s.trim().is_empty()) {
                    let (layer, k) = item.split_once(':').ok_or_else(|| {
                        ConfigError::Invalid(format!("expected layer:percent in '{item}'"))
                    })?;
                    map.insert(layer.trim().to_string(), parse_scalar::<f64>(k, key)?);
                }
                self.attack.topk_per_layer = map;
            }
            "attack.attack_num" => self.attack.attack_num = parse_scalar(value, key)?,
            "attack.attack_start_round" => {
                self.attack.attack_start_round = parse_scalar(value, key)?
            }
            "attack.pgd_enabled" => self.attack.pgd_enabled = parse_scalar(value, key)?,
            "attack.pgd_per_step" => self.attack.pgd_per_step = parse_scalar(value, key)?,
            "attack.pgd_delta" => self.attack.pgd_delta = parse_scalar(value, key)?,
            "attack.neurotoxin_mask_percent" => {
                self.attack.neurotoxin_mask_percent = parse_scalar(value, key)?
            }
            "defense.stages" => {
                let mut stages = Vec::new();
                for part in value.split('+').filter(|s| !s.trim().is_empty()) {
                    stages.push(parse_stage(part)?);
                }
                self.defense = DefensePipeline { stages };
            }
            "trigger.prefix" => {
                self.trigger.trigger_prefix = parse_list(value, key)?;
            }
            "trigger.target_token" => self.trigger.target_token = parse_scalar(value, key)?,
            "trigger.poison_ratio" => self.trigger.poison_ratio = parse_scalar(value, key)?,
            "taus" => self.taus = parse_list(value, key)?,
            "seeds" => self.seeds = parse_list(value, key)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "eval.benign_rows" => self.benign_test_rows = parse_scalar(value, key)?,
            "eval.backdoor_rows" => self.backdoor_test_rows = parse_scalar(value, key)?,
            "checkpoint_every" => self.checkpoint_every = parse_scalar(value, key)?,
            other => return Err(ConfigError::Invalid(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Parse config text on top of the defaults; errors carry line numbers.
    pub fn parse_str(text: &str, file: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Line {
                file: file.into(),
                line: i + 1,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            cfg.apply(key.trim(), value).map_err(|e| match e {
                ConfigError::Invalid(msg) => ConfigError::Line { file: file.into(), line: i + 1, msg },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CoreError::from)?;
        Self::parse_str(&text, &path.display().to_string())
    }

    /// Canonical serialization; `parse_str(serialize(c))` reproduces `c`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let list = |items: &[String]| items.join(" ");
        let _ = writeln!(s, "model.kind={}", self.model.kind.as_str());
        let _ = writeln!(s, "model.vocab_size={}", self.model.vocab_size);
        let _ = writeln!(s, "model.hidden_dim={}", self.model.hidden_dim);
        let _ = writeln!(s, "model.num_blocks={}", self.model.num_blocks);
        let _ = writeln!(s, "model.seq_len={}", self.model.seq_len);
        let _ = writeln!(s, "model.seed={}", self.model.seed);
        let _ = writeln!(s, "corpus.num_clients={}", self.corpus.num_clients);
        let _ = writeln!(s, "corpus.sequences_per_client={}", self.corpus.sequences_per_client);
        let _ = writeln!(s, "corpus.dirichlet_alpha={}", self.corpus.dirichlet_alpha);
        let _ = writeln!(s, "corpus.seed={}", self.corpus.seed);
        let _ = writeln!(s, "fed.clients_per_round={}", self.fed.clients_per_round);
        let _ = writeln!(s, "fed.total_rounds={}", self.fed.total_rounds);
        let _ = writeln!(s, "fed.local_epochs_benign={}", self.fed.local_epochs_benign);
        let _ = writeln!(s, "fed.local_epochs_malicious={}", self.fed.local_epochs_malicious);
        let _ = writeln!(s, "fed.lr={}", self.fed.lr);
        let _ = writeln!(s, "fed.seed={}", self.fed.seed);
        let _ = writeln!(s, "attack.kind={}", self.attack.kind.as_str());
        let layers: Vec<String> = self.attack.target_layers.iter().cloned().collect();
        let _ = writeln!(s, "attack.target_layers={}", list(&layers));
        let _ = writeln!(s, "attack.topk_percent={}", self.attack.topk_percent);
        let overrides: Vec<String> = self
            .attack
            .topk_per_layer
            .iter()
            .map(|(l, k)| format!("{l}:{k}"))
            .collect();
        let _ = writeln!(s, "attack.topk_per_layer={}", overrides.join(","));
        let _ = writeln!(s, "attack.attack_num={}", self.attack.attack_num);
        let _ = writeln!(s, "attack.attack_start_round={}", self.attack.attack_start_round);
        let _ = writeln!(s, "attack.pgd_enabled={}", self.attack.pgd_enabled);
        let _ = writeln!(s, "attack.pgd_per_step={}", self.attack.pgd_per_step);
        let _ = writeln!(s, "attack.pgd_delta={}", self.attack.pgd_delta);
        let _ = writeln!(
            s,
            "attack.neurotoxin_mask_percent={}",
            self.attack.neurotoxin_mask_percent
        );
        let _ = writeln!(s, "defense.stages={}", serialize_pipeline(&self.defense));
        let prefix: Vec<String> = self.trigger.trigger_prefix.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(s, "trigger.prefix={}", list(&prefix));
        let _ = writeln!(s, "trigger.target_token={}", self.trigger.target_token);
        let _ = writeln!(s, "trigger.poison_ratio={}", self.trigger.poison_ratio);
        let taus: Vec<String> = self.taus.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(s, "taus={}", list(&taus));
        let seeds: Vec<String> = self.seeds.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(s, "seeds={}", list(&seeds));
        let _ = writeln!(s, "output_dir={}", self.output_dir.display());
        let _ = writeln!(s, "eval.benign_rows={}", self.benign_test_rows);
        let _ = writeln!(s, "eval.backdoor_rows={}", self.backdoor_test_rows);
        let _ = writeln!(s, "checkpoint_every={}", self.checkpoint_every);
        s
    }

    /// Mirror the collapsed fields and check cross-field consistency.
    pub fn validate(&mut self) -> Result<()> {
        self.corpus.vocab_size = self.model.vocab_size;
        self.corpus.seq_len = self.model.seq_len;
        self.fed.total_clients = self.corpus.num_clients;
        if self.taus.is_empty() || self.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(ConfigError::Invalid(
                "taus must be a non-empty list inside (0, 1)".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must be non-empty".into()));
        }
        let dup: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if dup.len() != self.seeds.len() {
            return Err(ConfigError::Invalid("seeds must be distinct".into()));
        }
        if self.attack.kind != AttackKind::None
            && self.attack.attack_start_round + self.attack.attack_num > self.fed.total_rounds
        {
            return Err(ConfigError::Invalid(format!(
                "attack window {}..{} exceeds total_rounds {}",
                self.attack.attack_start_round,
                self.attack.attack_start_round + self.attack.attack_num,
                self.fed.total_rounds
            )));
        }
        // Everything else (schema/layer names, trigger bounds, counts) is
        // validated by the simulation spec.
        let mut spec = self.sim_spec_for_seed(self.seeds[0]);
        spec.checkpoint = None;
        spec.validate()?;
        Ok(())
    }

    /// Derive the per-run seeds for one entry of `seeds` and assemble the
    /// simulation spec.
    ///
    /// The corpus seed stays as configured: the corpus is the dataset, shared
    /// by every run of the experiment (and by any trigger built along its
    /// chains). Run seeds vary initialization, client sampling and server
    /// noise.
    pub fn sim_spec_for_seed(&self, run_seed: u64) -> SimulationSpec {
        let mut model = self.model;
        let mut corpus = self.corpus.clone();
        let mut fed = self.fed;
        model.seed = rng::stream_seed(run_seed, &[tag::RUN, 1, self.model.seed]);
        fed.seed = rng::stream_seed(run_seed, &[tag::RUN, 3, self.fed.seed]);
        corpus.vocab_size = model.vocab_size;
        corpus.seq_len = model.seq_len;
        fed.total_clients = corpus.num_clients;
        SimulationSpec {
            model,
            corpus,
            fed,
            attack: self.attack.clone(),
            defense: self.defense.clone(),
            trigger: self.trigger.clone(),
            benign_test_rows: self.benign_test_rows,
            backdoor_test_rows: self.backdoor_test_rows,
            checkpoint: None,
            measure_wall_time: false,
        }
    }

    /// Same experiment with the attack swapped for another kind's standard
    /// plan (window and projection settings preserved).
    pub fn attack_variant(&self, kind: AttackKind) -> Self {
        let mut out = self.clone();
        let mut plan = standard_attack(kind, self.model.kind);
        plan.attack_num = self.attack.attack_num;
        plan.attack_start_round = self.attack.attack_start_round;
        plan.pgd_enabled = self.attack.pgd_enabled;
        plan.pgd_per_step = self.attack.pgd_per_step;
        plan.pgd_delta = self.attack.pgd_delta;
        plan.neurotoxin_mask_percent = self.attack.neurotoxin_mask_percent;
        if kind == AttackKind::None {
            plan.attack_num = self.attack.attack_num.max(1);
        }
        out.attack = plan;
        out
    }

    /// The serialized form with every `attack.*` line removed; two configs
    /// are comparable when these agree.
    pub fn non_attack_fingerprint(&self) -> String {
        self.serialize()
            .lines()
            .filter(|l| !l.starts_with("attack."))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_all_defaults_and_validates() {
        let cfg = ExperimentConfig::parse_str("", "test").unwrap();
        let mut dflt = ExperimentConfig::default();
        dflt.validate().unwrap();
        assert_eq!(cfg, dflt);
    }

    #[test]
    fn serialize_parse_roundtrip() {
        let mut cfg = ExperimentConfig::default();
        cfg.defense = DefensePipeline {
            stages: vec![
                DefenseStage::NormClip { bound: 3.0 },
                DefenseStage::MultiKrum { f: 1, m: 8 },
            ],
        };
        cfg.attack.pgd_enabled = true;
        cfg.validate().unwrap();
        let text = cfg.serialize();
        let back = ExperimentConfig::parse_str(&text, "roundtrip").unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let err = ExperimentConfig::parse_str("model.kind=lstm\nnope=3\n", "f").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("f:2"), "{msg}");
        assert!(msg.contains("nope"), "{msg}");
    }

    #[test]
    fn type_mismatch_is_rejected_with_line() {
        let err = ExperimentConfig::parse_str("fed.lr=squirrel\n", "f").unwrap_err();
        assert!(err.to_string().contains("f:1"));
    }

    #[test]
    fn sdba_with_empty_layers_is_rejected() {
        let err =
            ExperimentConfig::parse_str("attack.kind=sdba\nattack.target_layers=\n", "f")
                .unwrap_err();
        assert!(err.to_string().contains("target_layers"), "{err}");
    }

    #[test]
    fn wrong_layer_for_model_kind_is_rejected() {
        let err = ExperimentConfig::parse_str("attack.target_layers=mlp.c_fc\n", "f").unwrap_err();
        assert!(err.to_string().contains("mlp.c_fc"), "{err}");
    }

    #[test]
    fn defense_dsl_parses() {
        let cfg = ExperimentConfig::parse_str(
            "defense.stages=norm_clip(3)+multi_krum(1,8)+weak_dp(3,0.001)+flame(0.001)\n",
            "f",
        )
        .unwrap();
        assert_eq!(cfg.defense.stages.len(), 4);
        assert_eq!(cfg.defense.stages[0], DefenseStage::NormClip { bound: 3.0 });
        assert_eq!(cfg.defense.stages[1], DefenseStage::MultiKrum { f: 1, m: 8 });
    }

    #[test]
    fn comments_and_blank_lines_are_fine() {
        let cfg = ExperimentConfig::parse_str(
            "# a comment\n\nfed.total_rounds=100   # trailing\n",
            "f",
        )
        .unwrap();
        assert_eq!(cfg.fed.total_rounds, 100);
    }

    #[test]
    fn run_seed_varies_training_but_not_the_corpus() {
        let cfg = ExperimentConfig::default();
        let a = cfg.sim_spec_for_seed(1);
        let b = cfg.sim_spec_for_seed(2);
        assert_ne!(a.model.seed, b.model.seed);
        assert_ne!(a.fed.seed, b.fed.seed);
        assert_eq!(a.corpus.seed, b.corpus.seed, "dataset is shared across runs");
    }

    #[test]
    fn attack_variants_share_everything_else() {
        let cfg = ExperimentConfig::default();
        let nt = cfg.attack_variant(AttackKind::Neurotoxin);
        assert_eq!(cfg.non_attack_fingerprint(), nt.non_attack_fingerprint());
        assert_eq!(nt.attack.kind, AttackKind::Neurotoxin);
        assert_eq!(nt.attack.attack_num, cfg.attack.attack_num);
    }
}
