//! Calibration sweeps for the desk benchmark: train a seed system per
//! corpus seed, sweep the test-speaker mismatch knob, and report baseline
//! PER (optionally with the adaptation grid at selected levels).
//!
//! ```text
//! cargo run --release --example calibrate -- sweep
//! cargo run --release --example calibrate -- adapt <kappa> [sup_beam]
//! ```

use std::collections::BTreeMap;
use std::time::Instant;

use latkit::corpus::{generate, Corpus};
use latkit::decode::{decode_corpus, DecodeConfig};
use latkit::graph::{
    compile_decoding_graph, compile_denominator, estimate_phone_lm, Phone, PhoneSet,
};
use latkit::harness::{
    adapt_speaker, benchmark_corpus, score, AdaptParams, AdaptationConfig, Supervision,
};
use latkit::mmi::{train, TrainOptions};
use latkit::model::{init_model, AcousticModel, ModelConfig};

struct System {
    model: AcousticModel,
    phones: PhoneSet,
    den: latkit::graph::SearchGraph,
    dec: latkit::graph::SearchGraph,
}

fn build_system(train_corpus: &Corpus, seed: u64, verbose: bool) -> System {
    let final_lr: f64 = std::env::var("CAL_FINAL_LR")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.004);
    let phones = PhoneSet::new(12, 1).unwrap();
    let transcripts: Vec<Vec<Phone>> = train_corpus
        .utterances
        .iter()
        .map(|u| u.transcript.clone())
        .collect();
    let lm = estimate_phone_lm(&transcripts, 3, 12).unwrap();
    let den = compile_denominator(&lm, &phones);
    let dec = compile_decoding_graph(&lm, &phones);
    let mut model = init_model(ModelConfig::desk_default(
        20,
        phones.num_units() as usize,
        seed.wrapping_add(0x5eed),
    ))
    .unwrap();
    let opts = TrainOptions {
        shuffle_seed: seed.wrapping_add(0x0bf),
        final_lr,
        ..TrainOptions::default()
    };
    let t0 = Instant::now();
    train(&mut model, train_corpus, &den, &lm, &phones, &opts, |e| {
        if verbose {
            eprintln!(
                "  epoch {} obj/utt {:.4}",
                e.epoch,
                e.objective / e.utts as f64
            );
        }
    })
    .unwrap();
    if verbose {
        eprintln!("  trained in {:.1}s", t0.elapsed().as_secs_f64());
    }
    System {
        model,
        phones,
        den,
        dec,
    }
}

fn baseline_per(system: &System, test: &Corpus, cfg: &DecodeConfig) -> (f64, BTreeMap<String, latkit::decode::DecodeResult>) {
    let decoded = decode_corpus(
        &system.model,
        test.utterances.iter(),
        false,
        &system.dec,
        &system.phones,
        cfg,
    );
    assert!(decoded.failures.is_empty(), "decode failures: {:?}", decoded.failures.keys().collect::<Vec<_>>());
    let refs: BTreeMap<String, Vec<Phone>> = test
        .utterances
        .iter()
        .map(|u| (u.id.clone(), u.transcript.clone()))
        .collect();
    let hyps: BTreeMap<String, Vec<Phone>> = decoded
        .results
        .iter()
        .map(|(id, r)| (id.clone(), r.transcript.clone()))
        .collect();
    let rep = score(&hyps, &refs).unwrap();
    (rep.error_rate() * 100.0, decoded.results)
}

fn sweep() {
    let decode_cfg = DecodeConfig {
        beam: 1e9,
        lattice_beam: 10.0,
        max_active: 20_000,
    };
    for seed in [11u64, 12, 13] {
        let mut cfg = benchmark_corpus();
        cfg.seed = seed;
        let (train_corpus, _) = generate(&cfg).unwrap();
        let t0 = Instant::now();
        let system = build_system(&train_corpus, seed, true);
        eprintln!("seed {seed}: system ready in {:.1}s", t0.elapsed().as_secs_f64());
        for kappa in [0.0, 0.3, 0.6, 0.9, 1.2, 1.5, 1.8, 2.2, 2.6, 3.0] {
            let mut c = cfg.clone();
            c.kappa_test = kappa;
            let (_, test) = generate(&c).unwrap();
            let t1 = Instant::now();
            let (per, results) = baseline_per(&system, &test, &decode_cfg);
            let mean_conf: f64 = results.values().map(|r| r.confidence).sum::<f64>()
                / results.len() as f64;
            println!(
                "seed {seed} kappa {kappa:.1}: PER {per:5.1}%  mean_conf {mean_conf:.3}  ({:.1}s)",
                t1.elapsed().as_secs_f64()
            );
        }
    }
}

fn adapt_grid(kappa: f64, sup_beam: f64) {
    let decode_cfg = DecodeConfig {
        beam: 1e9,
        lattice_beam: 10.0,
        max_active: 20_000,
    };
    for seed in [11u64, 12, 13] {
        let mut cfg = benchmark_corpus();
        cfg.seed = seed;
        cfg.kappa_test = kappa;
        let (train_corpus, test) = generate(&cfg).unwrap();
        let system = build_system(&train_corpus, seed, false);
        let (base, first) = baseline_per(&system, &test, &decode_cfg);
        println!("seed {seed} kappa {kappa}: baseline {base:.1}%  (last_lr {:.4})", system.model.last_lr());
        let refs: BTreeMap<String, Vec<Phone>> = test
            .utterances
            .iter()
            .map(|u| (u.id.clone(), u.transcript.clone()))
            .collect();
        for params in [AdaptParams::Lhuc, AdaptParams::All] {
            for supervision in [Supervision::Lat, Supervision::Bp] {
                for fraction in [1.0, 0.75, 0.5, 0.25] {
                    if params == AdaptParams::Lhuc && fraction < 1.0 {
                        continue;
                    }
                    let lhuc_lr: f64 = std::env::var("CAL_LHUC_LR")
                        .ok()
                        .and_then(|v| v.parse().ok())
                        .unwrap_or(0.7);
                    let adapt_cfg = AdaptationConfig {
                        supervision,
                        params,
                        epochs: 3,
                        all_lr_divisor: 10.0,
                        lhuc_lr,
                        confidence_fraction: fraction,
                        tolerance: 2,
                        lattice_beam: sup_beam,
                    };
                    let t0 = Instant::now();
                    let mut hyps: BTreeMap<String, Vec<Phone>> = BTreeMap::new();
                    let mut skipped = 0usize;
                    for (spk, utts) in test.by_speaker() {
                        let (adapted, stats) = adapt_speaker(
                            &system.model,
                            spk,
                            &utts,
                            &first,
                            &adapt_cfg,
                            &system.den,
                            &system.phones,
                        )
                        .unwrap();
                        skipped += stats.skipped_numerator_empty;
                        let decoded = decode_corpus(
                            &adapted,
                            utts.iter().copied(),
                            true,
                            &system.dec,
                            &system.phones,
                            &decode_cfg,
                        );
                        assert!(decoded.failures.is_empty());
                        for (id, r) in decoded.results {
                            hyps.insert(id, r.transcript);
                        }
                    }
                    let rep = score(&hyps, &refs).unwrap();
                    println!(
                        "  {params}-{supervision} {:>3.0}%: PER {:5.1}%  (rel {:+.1}%, skipped {skipped}, {:.1}s)",
                        fraction * 100.0,
                        rep.error_rate() * 100.0,
                        (base - rep.error_rate() * 100.0) / base * 100.0,
                        t0.elapsed().as_secs_f64()
                    );
                }
            }
        }
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    match args.get(1).map(String::as_str) {
        Some("sweep") | None => sweep(),
        Some("adapt") => {
            let kappa: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.9);
            let beam: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(6.0);
            adapt_grid(kappa, beam);
        }
        Some(other) => eprintln!("unknown mode {other}; use `sweep` or `adapt <kappa> [beam]`"),
    }
}
