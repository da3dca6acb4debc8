//! Shipped experiment presets.

use fedsim_core::attacks::AttackKind;
use fedsim_core::corpus::CorpusConfig;
use fedsim_core::defenses::{DefensePipeline, DefenseStage};
use fedsim_core::nn::{ModelConfig, ModelKind};

use crate::config::{standard_attack, ExperimentConfig};

pub struct Preset {
    pub name: &'static str,
    pub describe: &'static str,
    build: fn() -> ExperimentConfig,
}

/// LSTM base experiment with one defense pipeline swapped in; the attacker
/// projects onto the defense's norm ball.
fn lstm_defended(stages: Vec<DefenseStage>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.defense = DefensePipeline { stages };
    cfg.attack.pgd_enabled = true;
    cfg.attack.pgd_delta = 3.0;
    cfg
}

fn multi_krum_stage() -> DefenseStage {
    // one attacker per round; keep all but the worst-scored survivor slot
    DefenseStage::MultiKrum { f: 1, m: 8 }
}

/// Tiny-transformer base experiment.
fn gpt_base() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model = ModelConfig {
        kind: ModelKind::Transformer,
        vocab_size: 64,
        hidden_dim: 32,
        num_blocks: 1,
        seq_len: 16,
        seed: 7,
    };
    cfg.corpus = CorpusConfig {
        vocab_size: 64,
        num_clients: 40,
        sequences_per_client: 16,
        seq_len: 16,
        dirichlet_alpha: 0.5,
        seed: 11,
    };
    cfg.fed.clients_per_round = 8;
    cfg.fed.total_rounds = 220;
    cfg.fed.lr = 1.0;
    cfg.attack = standard_attack(AttackKind::Sdba, ModelKind::Transformer);
    cfg.attack.attack_num = 30;
    cfg.attack.attack_start_round = 40;
    cfg.trigger = fedsim_core::corpus::natural_trigger(&cfg.corpus, 5, 3, 0.5)
        .expect("valid preset trigger");
    cfg.taus = vec![0.8, 0.5, 0.2];
    cfg
}

fn gpt_defended(stages: Vec<DefenseStage>) -> ExperimentConfig {
    let mut cfg = gpt_base();
    cfg.defense = DefensePipeline { stages };
    cfg.attack.pgd_enabled = true;
    cfg.attack.pgd_delta = 0.3;
    cfg
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "fig9_no_defense",
        describe: "LSTM, sdba, no defense; the durability comparison base",
        build: ExperimentConfig::default,
    },
    Preset {
        name: "fig10_a",
        describe: "LSTM, sdba vs multi_krum(1,8)",
        build: || lstm_defended(vec![multi_krum_stage()]),
    },
    Preset {
        name: "fig10_b",
        describe: "LSTM, sdba vs norm_clip(3.0)",
        build: || lstm_defended(vec![DefenseStage::NormClip { bound: 3.0 }]),
    },
    Preset {
        name: "fig10_c",
        describe: "LSTM, sdba vs weak_dp(3.0, 0.001)",
        build: || lstm_defended(vec![DefenseStage::WeakDp { bound: 3.0, sigma: 0.001 }]),
    },
    Preset {
        name: "fig10_d",
        describe: "LSTM, sdba vs flame(0.001)",
        build: || lstm_defended(vec![DefenseStage::Flame { lambda: 0.001 }]),
    },
    Preset {
        name: "fig10_e",
        describe: "LSTM, sdba vs norm_clip(3.0) + multi_krum(1,8)",
        build: || {
            lstm_defended(vec![DefenseStage::NormClip { bound: 3.0 }, multi_krum_stage()])
        },
    },
    Preset {
        name: "fig10_f",
        describe: "LSTM, sdba vs weak_dp(3.0, 0.001) + multi_krum(1,8)",
        build: || {
            lstm_defended(vec![
                DefenseStage::WeakDp { bound: 3.0, sigma: 0.001 },
                multi_krum_stage(),
            ])
        },
    },
    Preset {
        name: "fig11_gpt_no_defense",
        describe: "tiny transformer, sdba targeting mlp.c_fc, no defense",
        build: gpt_base,
    },
    Preset {
        name: "fig12_gpt_normclip",
        describe: "tiny transformer, sdba vs norm_clip(0.3)",
        build: || gpt_defended(vec![DefenseStage::NormClip { bound: 0.3 }]),
    },
    Preset {
        name: "fig12_gpt_weakdp",
        describe: "tiny transformer, sdba vs weak_dp(0.3, 0.001)",
        build: || gpt_defended(vec![DefenseStage::WeakDp { bound: 0.3, sigma: 0.001 }]),
    },
    Preset {
        name: "table2_sweep",
        describe: "LSTM, sdba, no defense; lifespan sweep over taus 0.5/0.3/0.03",
        build: ExperimentConfig::default,
    },
    Preset {
        name: "table4_ma",
        describe: "LSTM, no attack; main-accuracy reference run",
        build: || {
            let mut cfg = ExperimentConfig::default();
            cfg.attack = cfg.attack_variant(AttackKind::None).attack;
            cfg
        },
    },
];

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    PRESETS.iter().find(|p| p.name == name).map(|p| {
        let mut cfg = (p.build)();
        cfg.validate().expect("presets validate");
        cfg
    })
}

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.name).collect()
}
