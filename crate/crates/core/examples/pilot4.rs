//! Pilot 4: the ablation-critical comparisons on a reduced preset.
//! cargo run --release -p ribac-core --example pilot4 <seed>

use std::path::Path;
use std::time::Instant;

use ribac_core::datasets::{load_dataset, make_targets, DatasetId, Split, TargetMode};
use ribac_core::engine::{
    eval_masked_frozen, pipeline_b_then_p, pipeline_p_then_b, run_ribac, step1_train,
    train_single_step, EvalCtx, P2bSource, RibacConfig,
};
use ribac_core::eval::{attack_success_rate, clean_accuracy};
use ribac_core::models::{pretrain_clean, Arch, ModelSpec, PretrainConfig};
use ribac_core::sparsity::{generate_mask, score_init, ScoreInit};
use ribac_core::triggers::init_triggers;

fn cfg(keep: f64, seed: u64) -> RibacConfig {
    RibacConfig {
        beta: 1.0,
        keep_fraction: keep,
        epochs_step1: 6,
        epochs_step2: 6,
        lr_scores: 1e-2,
        lr_triggers: 1e-2,
        lr_weights: 3e-3,
        batch_size: 64,
        mode: TargetMode::AllToOne,
        seed,
        score_init: ScoreInit::Abs,
        ..Default::default()
    }
}

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = ModelSpec::new(Arch::DeskCnn, 3, (32, 32, 3));
    let full_train = load_dataset(DatasetId::DeskSynth, Split::Train, Path::new(".")).unwrap();
    let train = full_train.take(1024);
    let test = load_dataset(DatasetId::DeskSynth, Split::Test, Path::new(".")).unwrap();

    let t0 = Instant::now();
    let pre_cfg = PretrainConfig { epochs: 10, batch_size: 128, lr: 0.05, seed, ..Default::default() };
    let (pretrained, hist) = pretrain_clean(&spec, &full_train, &test, &pre_cfg).unwrap();
    let dense_acc = hist.last().unwrap().test_accuracy;
    println!("[seed {seed}] pretrain acc {dense_acc:.4} ({:.0}s)", t0.elapsed().as_secs_f64());

    // Criterion-4 arms at 8x.
    let c8 = cfg(0.125, seed);
    let targets = make_targets(&train.labels, c8.mode, 3).unwrap();
    let bank = init_triggers((3, 32, 32), c8.mode, 3, c8.epsilon, seed).unwrap();
    let scores = score_init(&pretrained.tensors, &spec.prunable_names());
    let mut c8_s1 = c8.clone();
    c8_s1.epochs_step1 = 10;
    let t = Instant::now();
    let s1 = step1_train(&spec, &pretrained, scores, bank, &train, &targets, &c8_s1, None).unwrap();
    let mask = generate_mask(&s1.scores, c8.keep_fraction).unwrap();
    let (s1_acc, s1_asr) =
        eval_masked_frozen(&spec, &pretrained, &mask, &s1.bank, &train, &test, &c8_s1).unwrap();
    println!("[seed {seed}] step1-only @8x: acc {s1_acc:.4} asr {s1_asr:.4} ({:.0}s)", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let full = run_ribac(&spec, &pretrained, &train, &test, &c8).unwrap();
    let r8 = (
        clean_accuracy(&spec, &full.weights, None, &test).unwrap(),
        attack_success_rate(&spec, &full.weights, None, &test, &full.bank, c8.mode, false).unwrap(),
    );
    println!("[seed {seed}] ribac @8x: acc {:.4} asr {:.4} ({:.0}s)", r8.0, r8.1, t.elapsed().as_secs_f64());

    let t = Instant::now();
    let single = train_single_step(&spec, &pretrained, &train, &test, &c8).unwrap();
    let sgl = (
        clean_accuracy(&spec, &single.weights, None, &test).unwrap(),
        attack_success_rate(&spec, &single.weights, None, &test, &single.bank, c8.mode, false).unwrap(),
    );
    println!("[seed {seed}] single-step @8x: acc {:.4} asr {:.4} ({:.0}s)", sgl.0, sgl.1, t.elapsed().as_secs_f64());

    // Criterion-5 endpoints.
    for keep in [0.5, 1.0 / 16.0, 1.0 / 32.0] {
        let c = cfg(keep, seed);
        let t = Instant::now();
        let r = run_ribac(&spec, &pretrained, &train, &test, &c).unwrap();
        let acc = clean_accuracy(&spec, &r.weights, None, &test).unwrap();
        let asr = attack_success_rate(&spec, &r.weights, None, &test, &r.bank, c.mode, false).unwrap();
        println!(
            "[seed {seed}] ribac @{:.0}x: acc {acc:.4} asr {asr:.4} ({:.0}s)",
            1.0 / keep,
            t.elapsed().as_secs_f64()
        );
        let t = Instant::now();
        let p2b = pipeline_p_then_b(&spec, P2bSource::RandomInit, &pretrained, &train, &test, &c).unwrap();
        println!(
            "[seed {seed}] p2b-random @{:.0}x: acc {:.4} asr {:.4} ({:.0}s)",
            1.0 / keep,
            p2b.clean_acc,
            p2b.asr,
            t.elapsed().as_secs_f64()
        );
        let t = Instant::now();
        let p2bc = pipeline_p_then_b(&spec, P2bSource::CleanPretrained, &pretrained, &train, &test, &c).unwrap();
        println!(
            "[seed {seed}] p2b-clean @{:.0}x: acc {:.4} asr {:.4} ({:.0}s)",
            1.0 / keep,
            p2bc.clean_acc,
            p2bc.asr,
            t.elapsed().as_secs_f64()
        );
        let t = Instant::now();
        let b2p = pipeline_b_then_p(&spec, &pretrained, &train, &test, &c).unwrap();
        println!(
            "[seed {seed}] b2p @{:.0}x: acc {:.4} asr {:.4} ({:.0}s)",
            1.0 / keep,
            b2p.clean_acc,
            b2p.asr,
            t.elapsed().as_secs_f64()
        );
    }
}
