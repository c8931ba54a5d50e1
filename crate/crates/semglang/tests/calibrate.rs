//! Manual calibration runs for the synthetic benchmark; all ignored by
//! default. Run with `cargo test --test calibrate -- --ignored --nocapture`.

use std::time::Instant;

use semglang::downstream::{proxy_accuracy, split_by_recording, train_proxy, ProxyConfig};
use semglang::iterlearn::{train, TrainConfig};
use semglang::metrics::{fit_zipf_exponent, RankFrequencyTable};
use semglang::signal::{synthesize, Recording, SynthConfig};
use semglang::tokenizer::{emit, EmissionMode, TokenRecord};

fn bench_data(seed: u64) -> Vec<Recording> {
    let cfg = SynthConfig {
        num_classes: 4,
        channels: 4,
        burst_rates: vec![4.0, 8.0, 14.0, 22.0],
        burst_amp: 1.0,
        noise_std: 0.05,
        sample_rate_hz: 1000.0,
        seed,
    };
    synthesize(&cfg, 8, 1024).unwrap()
}

fn bench_config(seed: u64) -> TrainConfig {
    TrainConfig {
        generations: 2,
        warmup_steps: 50,
        transmission_steps: 400,
        final_extra_steps: 100,
        batch_size: 16,
        lr: 1e-3,
        seed,
        k: 24,
        d: 16,
        s: 8,
        t: 128,
        stride: 64,
        hidden: 16,
        channels: 4,
        freq_temperature: 0.02,
        lambda2: 0.2,
        t_max: 16,
        ..TrainConfig::default()
    }
}

fn tokenize_all(
    out: &semglang::iterlearn::TrainOutcome,
    recs: &[Recording],
    cfg: &TrainConfig,
    mode: EmissionMode,
) -> Vec<TokenRecord> {
    let mut records = Vec::new();
    for rec in recs {
        for seg in semglang::signal::window(rec, cfg.t, cfg.stride, cfg.s).unwrap() {
            let e = emit(&out.encoder, &out.codebook, &out.decoder, &seg, cfg.t_max, mode).unwrap();
            records.push(TokenRecord::from(&e));
        }
    }
    records
}

#[test]
#[ignore]
fn timing_and_loss_curve() {
    let recs = bench_data(0);
    let cfg = bench_config(0);
    let t0 = Instant::now();
    let out = train(cfg.clone(), &recs).unwrap();
    let train_time = t0.elapsed();
    println!("train time: {train_time:?} for {} steps", out.report.total_steps);
    for g in &out.report.generations {
        println!(
            "gen {}: final total {:.4} rec {:.4} emb {:.4} js {:.4} ppl {:.2} drift {:.6}",
            g.generation,
            g.final_losses.total,
            g.final_losses.rec,
            g.final_losses.emb,
            g.js_usage_to_zipf,
            g.codebook_perplexity,
            g.cooc_drift
        );
    }
    let first_rows: Vec<f64> = out.rows.iter().take(20).map(|r| r.losses.total).collect();
    let last_rows: Vec<f64> = out
        .rows
        .iter()
        .rev()
        .take(20)
        .map(|r| r.losses.total)
        .collect();
    println!(
        "first20 mean {:.4}, last20 mean {:.4}",
        first_rows.iter().sum::<f64>() / 20.0,
        last_rows.iter().sum::<f64>() / 20.0
    );

    let t1 = Instant::now();
    let tokens = tokenize_all(&out, &recs, &cfg, EmissionMode::Adaptive);
    println!("tokenize time: {:?} for {} segments", t1.elapsed(), tokens.len());

    let mut counts = vec![0u64; cfg.k];
    for r in &tokens {
        for &t in &r.tokens {
            counts[t] += 1;
        }
    }
    let table = RankFrequencyTable::from_counts(&counts);
    let fit = fit_zipf_exponent(&table);
    println!("emitted-token zipf fit: {fit:?}, dead {}", table.dead_tokens);

    let t2 = Instant::now();
    let (train_set, val_set) = split_by_recording(&tokens, 0.25, 7);
    let (model, report) = train_proxy(
        &train_set,
        &val_set,
        ProxyConfig::new(cfg.k, 4, 7),
    )
    .unwrap();
    println!(
        "proxy time {:?}: best val acc {:.3} after {} epochs",
        t2.elapsed(),
        report.best_val_accuracy,
        report.epochs_run
    );
    let acc = proxy_accuracy(&model, &val_set).unwrap();
    println!("proxy val acc (restored): {acc:.3}");
}

#[test]
#[ignore]
fn zipf_bias_effect() {
    for seed in 0..3u64 {
        let recs = bench_data(seed);
        let with = train(bench_config(seed), &recs).unwrap();
        let without = train(
            TrainConfig {
                zipf_enabled: false,
                ..bench_config(seed)
            },
            &recs,
        )
        .unwrap();
        let js_with = with.report.generations.last().unwrap().js_usage_to_zipf;
        let js_without = without.report.generations.last().unwrap().js_usage_to_zipf;
        println!(
            "seed {seed}: js with {js_with:.4}, without {js_without:.4}, ratio {:.3}",
            js_with / js_without
        );
        // Fitted exponent from the final generation's usage counts.
        let table = RankFrequencyTable::from_counts(&with.codebook.usage_counts);
        println!("  usage zipf fit {:?}", fit_zipf_exponent(&table));
        let table_wo = RankFrequencyTable::from_counts(&without.codebook.usage_counts);
        println!("  usage zipf fit w/o {:?}", fit_zipf_exponent(&table_wo));
    }
}

#[test]
#[ignore]
fn residual_allocation_effect() {
    for seed in 0..3u64 {
        let recs = bench_data(seed);
        let cfg = bench_config(seed);
        let out = train(cfg.clone(), &recs).unwrap();
        let adaptive = tokenize_all(&out, &recs, &cfg, EmissionMode::Adaptive);
        let uniform = tokenize_all(&out, &recs, &cfg, EmissionMode::Uniform);
        let mut accs = Vec::new();
        for tokens in [&adaptive, &uniform] {
            let (train_set, val_set) = split_by_recording(tokens, 0.25, seed);
            let mut pcfg = ProxyConfig::new(cfg.k, 4, seed);
            pcfg.max_epochs = 25;
            pcfg.patience = 8;
            let (model, rep) = train_proxy(&train_set, &val_set, pcfg).unwrap();
            accs.push(proxy_accuracy(&model, &val_set).unwrap());
            let _ = rep;
        }
        println!(
            "seed {seed}: adaptive acc {:.3}, uniform acc {:.3}",
            accs[0], accs[1]
        );
    }
}

#[test]
#[ignore]
fn iteration_effect() {
    for seed in 0..3u64 {
        let recs = bench_data(seed);
        let multi = bench_config(seed);
        // Equal total optimizer steps in a single generation.
        let single = TrainConfig {
            generations: 1,
            warmup_steps: multi.warmup_steps,
            transmission_steps: multi.planned_steps() - multi.warmup_steps,
            final_extra_steps: 0,
            ..multi.clone()
        };
        assert_eq!(single.planned_steps(), multi.planned_steps());
        let mut accs = Vec::new();
        for cfg in [&multi, &single] {
            let out = train(cfg.clone(), &recs).unwrap();
            let tokens = tokenize_all(&out, &recs, cfg, EmissionMode::Adaptive);
            let (train_set, val_set) = split_by_recording(&tokens, 0.25, seed);
            let (model, _) =
                train_proxy(&train_set, &val_set, ProxyConfig::new(cfg.k, 4, seed)).unwrap();
            accs.push(proxy_accuracy(&model, &val_set).unwrap());
        }
        println!(
            "seed {seed}: 2-gen acc {:.3}, 1-gen acc {:.3}",
            accs[0], accs[1]
        );
    }
}
