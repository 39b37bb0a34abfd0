//! The experiment runner: sweep mismatch levels and corpus seeds over the
//! condition grid {baseline, LHUC-LAT, LHUC-BP, ALL-LAT, ALL-BP} plus a
//! confidence-filtering sweep for the ALL conditions, and emit CSV plus
//! formatted tables. Reruns with an identical manifest are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{generate, Corpus, GeneratorConfig};
use crate::decode::{decode_corpus, DecodeConfig, DecodeResult};
use crate::graph::{
    compile_decoding_graph, compile_denominator, estimate_phone_lm, Phone, PhoneSet,
};
use crate::mmi::{train, TrainOptions};
use crate::model::{init_model, AcousticModel, ModelConfig};

use super::{
    adapt_speaker, score, AdaptParams, AdaptationConfig, HarnessError, ScoreCounts, Supervision,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchLevel {
    pub name: String,
    pub kappa_test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub initial_lr: f64,
    pub final_lr: f64,
    pub l2: f64,
    pub tolerance: usize,
    pub lm_order: usize,
    pub sat_lhuc: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 6,
            initial_lr: 0.04,
            final_lr: 0.004,
            l2: 1e-4,
            tolerance: 2,
            lm_order: 3,
            sat_lhuc: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSection {
    pub beam: f64,
    /// Beam for first-pass supervision lattices.
    pub lattice_beam: f64,
    pub max_active: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            beam: 1e9,
            lattice_beam: 10.0,
            max_active: 20_000,
        }
    }
}

impl DecodeSection {
    fn config(&self) -> DecodeConfig {
        DecodeConfig {
            beam: self.beam,
            lattice_beam: self.lattice_beam,
            max_active: self.max_active,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptSection {
    pub epochs: usize,
    pub all_lr_divisor: f64,
    pub lhuc_lr: f64,
    pub tolerance: usize,
    /// Supervision prune beam for LAT conditions.
    pub lattice_beam: f64,
    /// Confidence fractions for the ALL filtering sweep; 1.0 is always run.
    pub fractions: Vec<f64>,
}

impl Default for AdaptSection {
    fn default() -> Self {
        AdaptSection {
            epochs: 3,
            all_lr_divisor: 10.0,
            lhuc_lr: 0.7,
            tolerance: 2,
            lattice_beam: 6.0,
            fractions: vec![0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub corpus: GeneratorConfig,
    /// Corpus seeds; each gets its own seed model.
    pub seeds: Vec<u64>,
    pub levels: Vec<MismatchLevel>,
    pub train: TrainSection,
    pub decode: DecodeSection,
    pub adapt: AdaptSection,
    pub output_dir: PathBuf,
}

impl ExperimentManifest {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Manifest(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() || self.levels.is_empty() {
            return Err(HarnessError::Manifest(
                "need at least one seed and one level".into(),
            ));
        }
        if self
            .adapt
            .fractions
            .iter()
            .any(|&f| !(0.0 < f && f <= 1.0))
        {
            return Err(HarnessError::Manifest(
                "fractions must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Baseline,
    Adapt {
        params: AdaptParams,
        supervision: Supervision,
    },
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Baseline => write!(f, "baseline"),
            Condition::Adapt {
                params,
                supervision,
            } => write!(f, "{params}-{supervision}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub seed: u64,
    pub level: String,
    pub condition: Condition,
    pub fraction: f64,
    pub counts: ScoreCounts,
    /// Phone error rate, percent.
    pub per: f64,
    /// Baseline PER for the same (seed, level), percent.
    pub baseline_per: f64,
    pub skipped_numerator_empty: usize,
}

impl CellResult {
    /// `(baseline - adapted) / baseline`.
    pub fn relative_improvement(&self) -> f64 {
        if self.baseline_per == 0.0 {
            return 0.0;
        }
        (self.baseline_per - self.per) / self.baseline_per
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub cells: Vec<CellResult>,
}

impl ExperimentReport {
    pub fn cell(
        &self,
        seed: u64,
        level: &str,
        condition: Condition,
        fraction: f64,
    ) -> Option<&CellResult> {
        self.cells.iter().find(|c| {
            c.seed == seed
                && c.level == level
                && c.condition == condition
                && c.fraction == fraction
        })
    }

    /// Mean PER across seeds for one (level, condition, fraction) cell.
    pub fn mean_per(&self, level: &str, condition: Condition, fraction: f64) -> Option<f64> {
        let pers: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.level == level && c.condition == condition && c.fraction == fraction)
            .map(|c| c.per)
            .collect();
        if pers.is_empty() {
            None
        } else {
            Some(pers.iter().sum::<f64>() / pers.len() as f64)
        }
    }

    pub fn results_csv(&self) -> String {
        let mut out = String::from(
            "seed,level,condition,fraction,per,baseline_per,rel_improvement,hits,subs,ins,dels,ref_len,skipped\n",
        );
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{:.17e},{:.17e},{:.17e},{},{},{},{},{},{}",
                c.seed,
                c.level,
                c.condition,
                c.fraction,
                c.per,
                c.baseline_per,
                c.relative_improvement(),
                c.counts.hits,
                c.counts.substitutions,
                c.counts.insertions,
                c.counts.deletions,
                c.counts.ref_len,
                c.skipped_numerator_empty
            )
            .unwrap();
        }
        out
    }

    pub fn summary_csv(&self, manifest: &ExperimentManifest) -> String {
        let mut out = String::from("level,condition,fraction,mean_per,mean_baseline_per,mean_rel_improvement,seeds\n");
        for level in &manifest.levels {
            for (condition, fraction) in condition_grid(manifest) {
                let cells: Vec<&CellResult> = self
                    .cells
                    .iter()
                    .filter(|c| {
                        c.level == level.name && c.condition == condition && c.fraction == fraction
                    })
                    .collect();
                if cells.is_empty() {
                    continue;
                }
                let n = cells.len() as f64;
                let mean_per = cells.iter().map(|c| c.per).sum::<f64>() / n;
                let mean_base = cells.iter().map(|c| c.baseline_per).sum::<f64>() / n;
                let mean_rel =
                    cells.iter().map(|c| c.relative_improvement()).sum::<f64>() / n;
                writeln!(
                    out,
                    "{},{},{},{:.17e},{:.17e},{:.17e},{}",
                    level.name,
                    condition,
                    fraction,
                    mean_per,
                    mean_base,
                    mean_rel,
                    cells.len()
                )
                .unwrap();
            }
        }
        out
    }

    /// Paper-style tables, one per mismatch level: the five-row condition
    /// block at full data, then the filtering sweep for the ALL conditions.
    /// Numbers are percent PER at one-decimal resolution.
    pub fn tables(&self, manifest: &ExperimentManifest) -> String {
        let mut out = String::new();
        for level in &manifest.levels {
            writeln!(
                out,
                "=== level {} (kappa_test {:.2}; mean over {} seeds) ===",
                level.name,
                level.kappa_test,
                manifest.seeds.len()
            )
            .unwrap();
            writeln!(out, "{:<14} {:>6}", "", "PER").unwrap();
            let block = [
                Condition::Baseline,
                Condition::Adapt {
                    params: AdaptParams::Lhuc,
                    supervision: Supervision::Lat,
                },
                Condition::Adapt {
                    params: AdaptParams::Lhuc,
                    supervision: Supervision::Bp,
                },
                Condition::Adapt {
                    params: AdaptParams::All,
                    supervision: Supervision::Lat,
                },
                Condition::Adapt {
                    params: AdaptParams::All,
                    supervision: Supervision::Bp,
                },
            ];
            for cond in block {
                if let Some(per) = self.mean_per(&level.name, cond, 1.0) {
                    writeln!(out, "{:<14} {:>6.1}", cond.to_string(), per).unwrap();
                }
            }
            writeln!(out, "--- filtering sweep ---").unwrap();
            let mut fractions = manifest.adapt.fractions.clone();
            fractions.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for sup in [Supervision::Lat, Supervision::Bp] {
                for &f in &fractions {
                    let cond = Condition::Adapt {
                        params: AdaptParams::All,
                        supervision: sup,
                    };
                    if let Some(per) = self.mean_per(&level.name, cond, f) {
                        let label = format!("ALL-{sup} {:.0}%", f * 100.0);
                        writeln!(out, "{label:<14} {per:>6.1}").unwrap();
                    }
                }
            }
            writeln!(out).unwrap();
        }
        out
    }
}

/// The adaptation cells every experiment runs: the four conditions at full
/// data, plus the filtering sweep for ALL-LAT and ALL-BP.
fn condition_grid(manifest: &ExperimentManifest) -> Vec<(Condition, f64)> {
    let mut grid = vec![(Condition::Baseline, 1.0)];
    for params in [AdaptParams::Lhuc, AdaptParams::All] {
        for supervision in [Supervision::Lat, Supervision::Bp] {
            grid.push((
                Condition::Adapt {
                    params,
                    supervision,
                },
                1.0,
            ));
        }
    }
    let mut fractions = manifest.adapt.fractions.clone();
    fractions.sort_by(|a, b| a.partial_cmp(b).unwrap());
    fractions.dedup();
    for &f in fractions.iter().filter(|&&f| f < 1.0) {
        for supervision in [Supervision::Lat, Supervision::Bp] {
            grid.push((
                Condition::Adapt {
                    params: AdaptParams::All,
                    supervision,
                },
                f,
            ));
        }
    }
    grid
}

/// Artifacts shared by every level of one corpus seed.
struct SeedSystem {
    model: AcousticModel,
    phones: PhoneSet,
    den: crate::graph::SearchGraph,
    dec_graph: crate::graph::SearchGraph,
}

/// Train the per-seed system: LM and graphs from the training transcripts,
/// then LF-MMI training from the generative alignments.
fn build_seed_system(
    manifest: &ExperimentManifest,
    train_corpus: &Corpus,
    seed: u64,
    out_dir: &Path,
) -> Result<SeedSystem, HarnessError> {
    let cfg = &manifest.corpus;
    let phones = PhoneSet::new(cfg.num_phones, 1)?;
    let transcripts: Vec<Vec<Phone>> = train_corpus
        .utterances
        .iter()
        .map(|u| u.transcript.clone())
        .collect();
    let lm = estimate_phone_lm(&transcripts, manifest.train.lm_order, cfg.num_phones)?;
    let den = compile_denominator(&lm, &phones);
    let dec_graph = compile_decoding_graph(&lm, &phones);

    let model_cfg = ModelConfig::desk_default(
        cfg.feature_dim,
        phones.num_units() as usize,
        seed.wrapping_add(0x5eed),
    );
    let mut model = init_model(model_cfg)?;
    let opts = TrainOptions {
        epochs: manifest.train.epochs,
        initial_lr: manifest.train.initial_lr,
        final_lr: manifest.train.final_lr,
        l2: manifest.train.l2,
        tolerance: manifest.train.tolerance,
        sat_lhuc: manifest.train.sat_lhuc,
        si_prob: 0.5,
        shuffle_seed: seed.wrapping_add(0x0bf),
    };
    let report = train(&mut model, train_corpus, &den, &lm, &phones, &opts, |_| {})?;

    let traces = out_dir.join("traces");
    std::fs::create_dir_all(&traces)?;
    let mut f = std::fs::File::create(traces.join(format!("seed{seed}_train.csv")))?;
    report.write_csv(&mut f)?;
    model.save(out_dir.join(format!("seed{seed}.ckpt")))?;
    Ok(SeedSystem {
        model,
        phones,
        den,
        dec_graph,
    })
}

fn reference_map(corpus: &Corpus) -> BTreeMap<String, Vec<Phone>> {
    corpus
        .utterances
        .iter()
        .map(|u| (u.id.clone(), u.transcript.clone()))
        .collect()
}

/// One adaptation cell: adapt every test speaker independently, re-decode
/// each speaker's utterances under the adapted model, and score.
fn run_cell(
    system: &SeedSystem,
    test: &Corpus,
    first_pass: &BTreeMap<String, DecodeResult>,
    refs: &BTreeMap<String, Vec<Phone>>,
    adapt_cfg: &AdaptationConfig,
    decode_cfg: &DecodeConfig,
) -> Result<(ScoreCounts, usize), HarnessError> {
    let by_speaker = test.by_speaker();
    let speaker_runs: Vec<Result<(BTreeMap<String, Vec<Phone>>, usize), HarnessError>> =
        by_speaker
            .iter()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|(spk, utts)| {
                let (adapted, stats) = adapt_speaker(
                    &system.model,
                    spk,
                    utts,
                    first_pass,
                    adapt_cfg,
                    &system.den,
                    &system.phones,
                )?;
                let decoded = decode_corpus(
                    &adapted,
                    utts.iter().copied(),
                    true,
                    &system.dec_graph,
                    &system.phones,
                    decode_cfg,
                );
                if !decoded.failures.is_empty() {
                    let first = decoded.failures.values().next().unwrap().to_string();
                    return Err(HarnessError::DecodeFailures {
                        count: decoded.failures.len(),
                        first,
                    });
                }
                let hyps: BTreeMap<String, Vec<Phone>> = decoded
                    .results
                    .into_iter()
                    .map(|(id, r)| (id, r.transcript))
                    .collect();
                Ok((hyps, stats.skipped_numerator_empty))
            })
            .collect();

    let mut hyps = BTreeMap::new();
    let mut skipped = 0usize;
    for run in speaker_runs {
        let (spk_hyps, spk_skipped) = run?;
        hyps.extend(spk_hyps);
        skipped += spk_skipped;
    }
    let report = score(&hyps, refs)?;
    Ok((report.total, skipped))
}

/// Run the full experiment grid and write all artifacts under the
/// manifest's output directory.
pub fn run_experiment(manifest: &ExperimentManifest) -> Result<ExperimentReport, HarnessError> {
    manifest.validate()?;
    let out_dir = &manifest.output_dir;
    std::fs::create_dir_all(out_dir)?;

    let manifest_toml = manifest.to_toml();
    let hash = Sha256::digest(manifest_toml.as_bytes());
    let mut stamp = String::new();
    writeln!(stamp, "tool latkit {}", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(stamp, "manifest_sha256 {hash:x}").unwrap();
    writeln!(
        stamp,
        "seeds {}",
        manifest
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",")
    )
    .unwrap();
    writeln!(
        stamp,
        "levels {}",
        manifest
            .levels
            .iter()
            .map(|l| format!("{}={}", l.name, l.kappa_test))
            .collect::<Vec<_>>()
            .join(",")
    )
    .unwrap();
    std::fs::write(out_dir.join("stamp.txt"), &stamp)?;
    std::fs::write(out_dir.join("manifest.toml"), &manifest_toml)?;

    let mut progress = std::fs::File::create(out_dir.join("MANIFEST"))?;
    let mut report = ExperimentReport::default();
    let grid = condition_grid(manifest);
    let decode_cfg = manifest.decode.config();

    for &seed in &manifest.seeds {
        let mut corpus_cfg = manifest.corpus.clone();
        corpus_cfg.seed = seed;
        corpus_cfg.kappa_test = manifest.levels[0].kappa_test;
        let (train_corpus, _) = generate(&corpus_cfg)?;
        let system = build_seed_system(manifest, &train_corpus, seed, out_dir)?;

        for level in &manifest.levels {
            let mut level_cfg = corpus_cfg.clone();
            level_cfg.kappa_test = level.kappa_test;
            let (_, test_corpus) = generate(&level_cfg)?;
            let refs = reference_map(&test_corpus);

            // First pass: speaker-independent decode of the test data.
            let first = decode_corpus(
                &system.model,
                test_corpus.utterances.iter(),
                false,
                &system.dec_graph,
                &system.phones,
                &decode_cfg,
            );
            if !first.failures.is_empty() {
                let first_err = first.failures.values().next().unwrap().to_string();
                return Err(HarnessError::DecodeFailures {
                    count: first.failures.len(),
                    first: first_err,
                });
            }
            let baseline_hyps: BTreeMap<String, Vec<Phone>> = first
                .results
                .iter()
                .map(|(id, r)| (id.clone(), r.transcript.clone()))
                .collect();
            let baseline = score(&baseline_hyps, &refs)?;
            let baseline_per = baseline.total.error_rate() * 100.0;

            for &(condition, fraction) in &grid {
                let (counts, skipped) = match condition {
                    Condition::Baseline => (baseline.total, 0),
                    Condition::Adapt {
                        params,
                        supervision,
                    } => {
                        let adapt_cfg = AdaptationConfig {
                            supervision,
                            params,
                            epochs: manifest.adapt.epochs,
                            all_lr_divisor: manifest.adapt.all_lr_divisor,
                            lhuc_lr: manifest.adapt.lhuc_lr,
                            confidence_fraction: fraction,
                            tolerance: manifest.adapt.tolerance,
                            lattice_beam: manifest.adapt.lattice_beam,
                        };
                        run_cell(
                            &system,
                            &test_corpus,
                            &first.results,
                            &refs,
                            &adapt_cfg,
                            &decode_cfg,
                        )?
                    }
                };
                let cell = CellResult {
                    seed,
                    level: level.name.clone(),
                    condition,
                    fraction,
                    counts,
                    per: counts.error_rate() * 100.0,
                    baseline_per,
                    skipped_numerator_empty: skipped,
                };
                writeln!(
                    progress,
                    "done seed={} level={} condition={} fraction={}",
                    seed, level.name, condition, fraction
                )?;
                progress.flush()?;
                report.cells.push(cell);
            }
        }
    }

    std::fs::write(out_dir.join("results.csv"), report.results_csv())?;
    std::fs::write(out_dir.join("summary.csv"), report.summary_csv(manifest))?;
    std::fs::write(out_dir.join("tables.txt"), report.tables(manifest))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_toml_round_trip() {
        let m = ExperimentManifest {
            corpus: GeneratorConfig::default(),
            seeds: vec![1, 2, 3],
            levels: vec![MismatchLevel {
                name: "low".into(),
                kappa_test: 0.5,
            }],
            train: TrainSection::default(),
            decode: DecodeSection::default(),
            adapt: AdaptSection::default(),
            output_dir: PathBuf::from("runs/x"),
        };
        let text = m.to_toml();
        let back = ExperimentManifest::from_toml(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn grid_has_paper_shape() {
        let m = ExperimentManifest {
            corpus: GeneratorConfig::default(),
            seeds: vec![1],
            levels: vec![MismatchLevel {
                name: "low".into(),
                kappa_test: 0.5,
            }],
            train: TrainSection::default(),
            decode: DecodeSection::default(),
            adapt: AdaptSection::default(),
            output_dir: PathBuf::from("runs/x"),
        };
        let grid = condition_grid(&m);
        // baseline + 4 conditions at 1.0 + {ALL-LAT, ALL-BP} x {25,50,75}.
        assert_eq!(grid.len(), 1 + 4 + 6);
        let at_full: Vec<String> = grid
            .iter()
            .filter(|&&(_, f)| f == 1.0)
            .map(|(c, _)| c.to_string())
            .collect();
        assert_eq!(
            at_full,
            vec!["baseline", "LHUC-LAT", "LHUC-BP", "ALL-LAT", "ALL-BP"]
        );
    }

    #[test]
    fn bad_manifest_rejected() {
        let mut m = ExperimentManifest {
            corpus: GeneratorConfig::default(),
            seeds: vec![],
            levels: vec![],
            train: TrainSection::default(),
            decode: DecodeSection::default(),
            adapt: AdaptSection::default(),
            output_dir: PathBuf::from("runs/x"),
        };
        assert!(m.validate().is_err());
        m.seeds = vec![1];
        m.levels = vec![MismatchLevel {
            name: "l".into(),
            kappa_test: 0.1,
        }];
        m.adapt.fractions = vec![0.0];
        assert!(m.validate().is_err());
    }
}
