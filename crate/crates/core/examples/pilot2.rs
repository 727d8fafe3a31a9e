//! Pilot 2: how magnitude-prunable is a converged desk model, and how do
//! step lrs behave? cargo run --release -p ribac-core --example pilot2

use std::path::Path;
use std::time::Instant;

use ribac_core::datasets::{load_dataset, make_targets, DatasetId, Split, TargetMode};
use ribac_core::engine::{step1_train, step2_train, EvalCtx, RibacConfig};
use ribac_core::eval::{attack_success_rate, clean_accuracy};
use ribac_core::models::{pretrain_clean, Arch, ModelSpec, PretrainConfig};
use ribac_core::sparsity::{generate_mask, score_init, ScoreInit};
use ribac_core::triggers::init_triggers;

fn main() {
    let pre_epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let lr_scores: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let lr_weights: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let keep: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.25);

    let spec = ModelSpec::new(Arch::DeskCnn, 3, (32, 32, 3));
    let train = load_dataset(DatasetId::DeskSynth, Split::Train, Path::new(".")).unwrap();
    let test = load_dataset(DatasetId::DeskSynth, Split::Test, Path::new(".")).unwrap();

    let t0 = Instant::now();
    let pre_cfg = PretrainConfig { epochs: pre_epochs, batch_size: 128, lr: 0.05, ..Default::default() };
    let (pretrained, hist) = pretrain_clean(&spec, &train, &test, &pre_cfg).unwrap();
    println!(
        "pretrain {} epochs -> acc {:.4} ({:.0}s)",
        pre_epochs,
        hist.last().unwrap().test_accuracy,
        t0.elapsed().as_secs_f64()
    );

    // Magnitude-masked accuracy at init per ratio, stale vs recalibrated
    // normalization statistics.
    let prunable = spec.prunable_names();
    let scores0 = score_init(&pretrained.tensors, &prunable);
    for k in [0.5, 0.25, 0.125, 1.0 / 16.0, 1.0 / 32.0] {
        let mask = generate_mask(&scores0, k).unwrap();
        let stale = clean_accuracy(&spec, &pretrained, Some(&mask), &test).unwrap();
        let calib = ribac_core::engine::calibrate_bn(
            &spec, &pretrained.tensors, Some(&mask), &train, 8, 128, 0,
        )
        .unwrap();
        let calib_model = ribac_core::models::ModelWeights {
            tensors: calib,
            provenance: pretrained.provenance,
        };
        let acc = clean_accuracy(&spec, &calib_model, Some(&mask), &test).unwrap();
        println!(
            "  magnitude-masked @ {:5.1}x -> stale {:.4} recalibrated {:.4}",
            1.0 / k,
            stale,
            acc
        );
    }

    // Step 1 with the candidate lrs.
    let cfg = RibacConfig {
        beta: 1.0,
        keep_fraction: keep,
        epochs_step1: 10,
        epochs_step2: 10,
        lr_scores,
        lr_triggers: 3e-3,
        lr_weights,
        batch_size: 128,
        mode: TargetMode::AllToOne,
        seed: 0,
        score_init: ScoreInit::Abs,
        ..Default::default()
    };
    let targets = make_targets(&train.labels, cfg.mode, 3).unwrap();
    let bank = init_triggers((3, 32, 32), cfg.mode, 3, cfg.epsilon, cfg.seed).unwrap();
    let scores = score_init(&pretrained.tensors, &prunable);
    let ctx = EvalCtx { test: &test };

    let t1 = Instant::now();
    let s1 = step1_train(&spec, &pretrained, scores, bank, &train, &targets, &cfg, Some(&ctx)).unwrap();
    println!("step1 took {:.0}s", t1.elapsed().as_secs_f64());
    for p in &s1.history {
        println!(
            "  step1 e{:2} J {:.4} clean {:.4} troj {:.4} | acc {:.4} asr {:.4}",
            p.epoch, p.train_loss, p.clean_term, p.trojan_term, p.clean_acc, p.asr
        );
    }

    let mask = generate_mask(&s1.scores, cfg.keep_fraction).unwrap();
    let t2 = Instant::now();
    let s2 = step2_train(&spec, &pretrained, &mask, s1.bank, &train, &targets, &cfg, Some(&ctx)).unwrap();
    println!("step2 took {:.0}s", t2.elapsed().as_secs_f64());
    for p in &s2.history {
        println!(
            "  step2 e{:2} J {:.4} clean {:.4} troj {:.4} | acc {:.4} asr {:.4}",
            p.epoch, p.train_loss, p.clean_term, p.trojan_term, p.clean_acc, p.asr
        );
    }
    let acc = clean_accuracy(&spec, &s2.weights, None, &test).unwrap();
    let asr = attack_success_rate(&spec, &s2.weights, None, &test, &s2.bank, cfg.mode, false).unwrap();
    println!("final: clean {acc:.4} asr {asr:.4}");
}
