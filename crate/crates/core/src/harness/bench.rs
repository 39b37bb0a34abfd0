//! The frozen desk benchmark configuration used by the acceptance suite
//! and reproducible from the CLI. Mismatch knobs were calibrated once with
//! the `calibrate` example; see the repository docs for the sweep.

use std::path::PathBuf;

use crate::corpus::GeneratorConfig;

use super::{AdaptSection, DecodeSection, ExperimentManifest, MismatchLevel, TrainSection};

/// Corpus shape shared by the benchmark levels.
pub fn benchmark_corpus() -> GeneratorConfig {
    GeneratorConfig {
        num_phones: 12,
        feature_dim: 20,
        min_frames_per_phone: 6,
        max_frames_per_phone: 18,
        noise_std: 1.0,
        kappa_train: 0.5,
        kappa_test: 0.0,
        train_speakers: 24,
        test_speakers: 8,
        train_utts_per_speaker: 25,
        test_utts_per_speaker: 25,
        phones_per_utterance: 10,
        seed: 0,
    }
}

/// Mismatch calibrated so the seed model lands near 10% test PER.
pub const KAPPA_LOW: f64 = 0.9;
/// Mismatch calibrated so the seed model lands near 50% test PER.
pub const KAPPA_HIGH: f64 = 2.2;

/// The benchmark manifest: three corpus seeds, a low- and a high-mismatch
/// level, and the full condition grid.
pub fn benchmark_manifest(output_dir: PathBuf) -> ExperimentManifest {
    ExperimentManifest {
        corpus: benchmark_corpus(),
        seeds: vec![11, 12, 13],
        levels: vec![
            MismatchLevel {
                name: "low".into(),
                kappa_test: KAPPA_LOW,
            },
            MismatchLevel {
                name: "high".into(),
                kappa_test: KAPPA_HIGH,
            },
        ],
        train: TrainSection::default(),
        decode: DecodeSection::default(),
        adapt: AdaptSection::default(),
        output_dir,
    }
}
