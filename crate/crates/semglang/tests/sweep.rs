//! Temporary diagnostics sweep. cargo test --test sweep -- --ignored --nocapture
use semglang::iterlearn::{train, TrainConfig};
use semglang::signal::{synthesize, Recording, SynthConfig};

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

fn base(seed: u64) -> TrainConfig {
    TrainConfig {
        generations: 2,
        warmup_steps: 50,
        transmission_steps: 400,
        final_extra_steps: 100,
        batch_size: 16,
        lr: 1e-3,
        seed,
        k: 64,
        d: 16,
        s: 8,
        t: 32,
        stride: 16,
        hidden: 16,
        channels: 4,
        t_max: 16,
        ..TrainConfig::default()
    }
}

fn report(tag: &str, cfg: TrainConfig, recs: &[Recording]) {
    let out = train(cfg, recs).unwrap();
    let gens: Vec<String> = out
        .report
        .generations
        .iter()
        .map(|g| {
            format!(
                "g{}: js {:.3} ppl {:.1} drift {:.2} rec {:.3}",
                g.generation, g.js_usage_to_zipf, g.codebook_perplexity, g.cooc_drift, g.final_losses.rec
            )
        })
        .collect();
    let table = semglang::metrics::RankFrequencyTable::from_counts(&out.codebook.usage_counts);
    let fit = semglang::metrics::fit_zipf_exponent(&table)
        .map(|(e, r2)| format!("exp {e:.2} r2 {r2:.2}"))
        .unwrap_or_else(|_| "fit n/a".into());
    println!("{tag}: {} || {fit} dead {}", gens.join(" | "), table.dead_tokens);
}

fn fits(cfg: &TrainConfig, recs: &[Recording], tag: &str) {
    let out = train(cfg.clone(), recs).unwrap();
    let mut counts = vec![0u64; cfg.k];
    for rec in recs {
        for seg in semglang::signal::window(rec, cfg.t, cfg.stride, cfg.s).unwrap() {
            let e = semglang::tokenizer::emit(&out.encoder, &out.codebook, &out.decoder, &seg, cfg.t_max, semglang::tokenizer::EmissionMode::Adaptive).unwrap();
            for &t in &e.token_ids { counts[t] += 1; }
        }
    }
    let efit = semglang::metrics::fit_zipf_exponent(&semglang::metrics::RankFrequencyTable::from_counts(&counts));
    let ufit = semglang::metrics::fit_zipf_exponent(&semglang::metrics::RankFrequencyTable::from_counts(&out.codebook.usage_counts));
    let js = out.report.generations.last().unwrap().js_usage_to_zipf;
    let ppl = out.report.generations.last().unwrap().codebook_perplexity;
    println!("{tag}: js {js:.3} ppl {ppl:.1} usage {:?} emitted {:?}", ufit.map(|f| (f.0 * 100.0).round() / 100.0), efit.map(|f| (f.0 * 100.0).round() / 100.0));
}

fn bag_acc(tokens: &[semglang::tokenizer::TokenRecord], k: usize, seed: u64) -> f64 {
    // Nearest-centroid on normalized token histograms, recording-disjoint.
    let (train_set, val_set) = semglang::downstream::split_by_recording(tokens, 0.25, seed);
    let hist = |r: &semglang::tokenizer::TokenRecord| -> Vec<f64> {
        let mut h = vec![0.0; k];
        for &t in &r.tokens { h[t] += 1.0; }
        let n: f64 = h.iter().sum();
        h.iter().map(|v| v / n).collect()
    };
    let mut centroids = vec![vec![0.0; k]; 4];
    let mut counts = vec![0.0; 4];
    for r in &train_set {
        let h = hist(r);
        for (c, v) in centroids[r.label as usize].iter_mut().zip(&h) { *c += v; }
        counts[r.label as usize] += 1.0;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() { *v /= f64::max(*n, 1.0); }
    }
    let mut hit = 0;
    for r in &val_set {
        let h = hist(r);
        let mut best = 0; let mut bd = f64::INFINITY;
        for (ci, c) in centroids.iter().enumerate() {
            let d: f64 = c.iter().zip(&h).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < bd { bd = d; best = ci; }
        }
        if best as u32 == r.label { hit += 1; }
    }
    hit as f64 / val_set.len() as f64
}

fn raw_band_acc(recs: &[Recording], t: usize, stride: usize) -> f64 {
    // Oracle on raw windows: per-window mean absolute amplitude and burst
    // fraction, nearest-centroid per class.
    let mut feats: Vec<(Vec<f64>, u32, String)> = Vec::new();
    for rec in recs {
        for seg in semglang::signal::window(rec, t, stride, 8).unwrap() {
            let c = seg.channels;
            // fraction of samples above 2x median abs, plus zero-crossing rate
            let mut absv: Vec<f64> = seg.values.iter().map(|v| v.abs()).collect();
            absv.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = absv[absv.len() / 2];
            let frac = seg.values.iter().filter(|v| v.abs() > 2.0 * med).count() as f64
                / seg.values.len() as f64;
            let mut zc = 0.0;
            for ch in 0..c {
                for ti in 1..seg.len {
                    if (seg.value(ti, ch) > 0.0) != (seg.value(ti - 1, ch) > 0.0) { zc += 1.0; }
                }
            }
            zc /= (seg.len * c) as f64;
            // envelope autocorrelation-ish: variance of per-slice energies
            let sl = seg.len / 8;
            let mut en = vec![0.0; 8];
            for s in 0..8 {
                for ti in s * sl..(s + 1) * sl {
                    for ch in 0..c { en[s] += seg.value(ti, ch).powi(2); }
                }
            }
            let m = en.iter().sum::<f64>() / 8.0;
            let var = en.iter().map(|e| (e - m).powi(2)).sum::<f64>() / 8.0;
            feats.push((vec![frac, zc, var.sqrt() / (m + 1e-9)], seg.label, seg.recording_id.clone()));
        }
    }
    let val_recs: std::collections::BTreeSet<String> = recs.iter().filter(|r| r.id.ends_with("r0") || r.id.ends_with("r1")).map(|r| r.id.clone()).collect();
    let dim = feats[0].0.len();
    let mut centroids = vec![vec![0.0; dim]; 4];
    let mut counts = vec![0.0; 4];
    for (f, l, rid) in &feats {
        if !val_recs.contains(rid) {
            for (c, v) in centroids[*l as usize].iter_mut().zip(f) { *c += v; }
            counts[*l as usize] += 1.0;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) { for v in c.iter_mut() { *v /= f64::max(*n, 1.0); } }
    let mut hit = 0; let mut tot = 0;
    for (f, l, rid) in &feats {
        if val_recs.contains(rid) {
            let mut best = 0; let mut bd = f64::INFINITY;
            for (ci, c) in centroids.iter().enumerate() {
                let d: f64 = c.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < bd { bd = d; best = ci; }
            }
            if best as u32 == *l { hit += 1; }
            tot += 1;
        }
    }
    hit as f64 / tot as f64
}

fn sep_data(seed: u64) -> Vec<Recording> {
    let cfg = SynthConfig {
        num_classes: 4,
        channels: 4,
        burst_rates: vec![3.0, 7.0, 14.0, 26.0],
        burst_amp: 1.0,
        noise_std: 0.1,
        sample_rate_hz: 1000.0,
        seed,
    };
    synthesize(&cfg, 8, 1024).unwrap()
}

#[test]
#[ignore]
fn sweep() {
    use std::io::Write;
    let mut log = std::fs::File::create("/tmp/sweep.log").unwrap();
    let recs = sep_data(0);
    writeln!(log, "raw-feature oracle t=256: {:.3}", raw_band_acc(&recs, 256, 64)).unwrap();
    let cfg = TrainConfig { k: 24, freq_temperature: 0.02, lambda2: 0.2, t: 256, stride: 64, s: 16, t_max: 32, ..base(0) };
    let out = train(cfg.clone(), &recs).unwrap();
    let g_last = out.report.generations.last().unwrap();
    writeln!(log, "train: js {:.4} ppl {:.1}", g_last.js_usage_to_zipf, g_last.codebook_perplexity).unwrap();
    let ufit = semglang::metrics::fit_zipf_exponent(&semglang::metrics::RankFrequencyTable::from_counts(&out.codebook.usage_counts));
    writeln!(log, "usage fit: {ufit:?}").unwrap();
    for mode in [semglang::tokenizer::EmissionMode::Adaptive, semglang::tokenizer::EmissionMode::Uniform] {
        let mut tokens = Vec::new();
        for rec in &recs {
            for seg in semglang::signal::window(rec, cfg.t, cfg.stride, cfg.s).unwrap() {
                let e = semglang::tokenizer::emit(&out.encoder, &out.codebook, &out.decoder, &seg, cfg.t_max, mode).unwrap();
                tokens.push(semglang::tokenizer::TokenRecord::from(&e));
            }
        }
        writeln!(log, "bag-of-tokens {mode:?}: {:.3}", bag_acc(&tokens, cfg.k, 3)).unwrap();
        let (train_set, val_set) = semglang::downstream::split_by_recording(&tokens, 0.25, 3);
        let mut pcfg = semglang::downstream::ProxyConfig::new(cfg.k, 4, 5);
        pcfg.max_epochs = 30; pcfg.patience = 10;
        let (model, rep) = semglang::downstream::train_proxy(&train_set, &val_set, pcfg).unwrap();
        let tr = semglang::downstream::proxy_accuracy(&model, &train_set).unwrap();
        let va = semglang::downstream::proxy_accuracy(&model, &val_set).unwrap();
        writeln!(log, "proxy {mode:?}: train {tr:.3} val {va:.3} ({} ep)", rep.epochs_run).unwrap();
    }
}
