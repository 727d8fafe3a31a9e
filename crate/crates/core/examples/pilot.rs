//! Desk-scale pilot: timing and training dynamics for the CI-sized setup.
//! Run with: cargo run --release -p ribac-core --example pilot [stage]

use std::path::Path;
use std::time::Instant;

use ribac_core::datasets::{load_dataset, DatasetId, Split, TargetMode};
use ribac_core::engine::{run_ribac, RibacConfig};
use ribac_core::eval::{attack_success_rate, clean_accuracy};
use ribac_core::models::{pretrain_clean, Arch, ModelSpec, PretrainConfig};
use ribac_core::sparsity::ScoreInit;

fn main() {
    let stage = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    let spec = ModelSpec::new(Arch::DeskCnn, 3, (32, 32, 3));
    let train = load_dataset(DatasetId::DeskSynth, Split::Train, Path::new(".")).unwrap();
    let test = load_dataset(DatasetId::DeskSynth, Split::Test, Path::new(".")).unwrap();
    println!("train {} / test {} samples", train.len(), test.len());

    let t0 = Instant::now();
    let pre_cfg = PretrainConfig { epochs: 5, batch_size: 128, lr: 0.05, ..Default::default() };
    let (pretrained, hist) = pretrain_clean(&spec, &train, &test, &pre_cfg).unwrap();
    for h in &hist {
        println!("pretrain epoch {} loss {:.4} acc {:.4}", h.epoch, h.train_loss, h.test_accuracy);
    }
    println!("pretrain took {:.1}s", t0.elapsed().as_secs_f64());

    if stage == "pretrain" {
        return;
    }

    let cfg = RibacConfig {
        beta: 1.0,
        epsilon: 4.0 / 255.0,
        keep_fraction: 0.25,
        epochs_step1: 8,
        epochs_step2: 8,
        lr_scores: 3e-4,
        lr_triggers: 3e-4,
        lr_weights: 3e-4,
        batch_size: 128,
        mode: TargetMode::AllToOne,
        seed: 0,
        score_init: ScoreInit::Abs,
    };
    let t1 = Instant::now();
    let model = run_ribac(&spec, &pretrained, &train, &test, &cfg).unwrap();
    println!("ribac took {:.1}s", t1.elapsed().as_secs_f64());
    for p in &model.history {
        println!(
            "{} epoch {:2} J {:.4} clean_term {:.4} trojan_term {:.4} acc {:.4} asr {:.4}",
            p.phase, p.epoch, p.train_loss, p.clean_term, p.trojan_term, p.clean_acc, p.asr
        );
    }
    let acc = clean_accuracy(&spec, &model.weights, None, &test).unwrap();
    let asr = attack_success_rate(&spec, &model.weights, None, &test, &model.bank, cfg.mode, false).unwrap();
    println!("final: clean {acc:.4} asr {asr:.4}");
}
