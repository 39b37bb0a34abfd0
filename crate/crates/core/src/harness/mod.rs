//! The experiment engine: first-pass decode, LAT/BP supervision,
//! confidence filtering, ALL/LHUC adaptation, scoring, and report emission.

mod bench;
mod experiment;
mod score;

pub use bench::{benchmark_corpus, benchmark_manifest, KAPPA_HIGH, KAPPA_LOW};
pub use experiment::{
    run_experiment, AdaptSection, CellResult, Condition, DecodeSection, ExperimentManifest,
    ExperimentReport, MismatchLevel, TrainSection,
};
pub use score::{score, score_pair, ScoreCounts, ScoreReport};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Utterance};
use crate::decode::{DecodeError, DecodeResult};
use crate::graph::{numerator_from_lattice, GraphError, PhoneSet, SearchGraph};
use crate::mmi::{mmi_loss_and_grad, MmiError};
use crate::model::{AcousticModel, LrSchedule, ModelError, ParamSelector};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("empty input: nothing to select from")]
    EmptyInput,
    #[error("missing reference transcript for utterance {0}")]
    MissingReference(String),
    #[error("all utterances filtered out for speaker {0}")]
    AllUtterancesFiltered(String),
    #[error("first-pass decoding failed for {count} utterances, first: {first}")]
    DecodeFailures { count: usize, first: String },
    #[error("experiment manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Lattice(#[from] crate::lattice::LatticeError),
    #[error(transparent)]
    Mmi(#[from] MmiError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What supervises adaptation: the pruned first-pass lattice or only its
/// best path (a lattice pruned at beam zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Supervision {
    Lat,
    Bp,
}

impl std::fmt::Display for Supervision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Supervision::Lat => write!(f, "LAT"),
            Supervision::Bp => write!(f, "BP"),
        }
    }
}

/// Which parameter group adapts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AdaptParams {
    All,
    Lhuc,
}

impl std::fmt::Display for AdaptParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AdaptParams::All => write!(f, "ALL"),
            AdaptParams::Lhuc => write!(f, "LHUC"),
        }
    }
}

/// One adaptation condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub supervision: Supervision,
    pub params: AdaptParams,
    pub epochs: usize,
    /// ALL mode: geometric decay from the seed's last training rate down
    /// to that rate divided by this (10, or 5 as a selectable variant).
    pub all_lr_divisor: f64,
    /// LHUC mode: fixed learning rate.
    pub lhuc_lr: f64,
    /// Fraction of highest-confidence utterances to keep.
    pub confidence_fraction: f64,
    /// Frame-mask tolerance in output frames.
    pub tolerance: usize,
    /// Pruning beam applied to supervision lattices in LAT mode. BP mode
    /// always prunes at zero, which is what makes BP a special case of LAT.
    pub lattice_beam: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            supervision: Supervision::Lat,
            params: AdaptParams::All,
            epochs: 3,
            all_lr_divisor: 10.0,
            lhuc_lr: 0.7,
            confidence_fraction: 1.0,
            tolerance: 2,
            lattice_beam: 6.0,
        }
    }
}

impl AdaptationConfig {
    /// Supervision prune beam: the configured beam for LAT, zero for BP.
    pub fn supervision_beam(&self) -> f64 {
        match self.supervision {
            Supervision::Lat => self.lattice_beam,
            Supervision::Bp => 0.0,
        }
    }
}

/// Select the `ceil(fraction * n)` utterances with the highest confidence;
/// ties break toward the smaller utterance id. Returns sorted ids.
pub fn filter_by_confidence(
    results: &BTreeMap<String, DecodeResult>,
    fraction: f64,
) -> Result<Vec<String>, HarnessError> {
    assert!(
        fraction > 0.0 && fraction <= 1.0,
        "fraction must be in (0, 1]"
    );
    if results.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    let mut ranked: Vec<(&String, f64)> = results
        .iter()
        .map(|(id, r)| (id, r.confidence))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(b.0)));
    let keep = (fraction * results.len() as f64).ceil() as usize;
    let mut ids: Vec<String> = ranked[..keep].iter().map(|(id, _)| (*id).clone()).collect();
    ids.sort();
    Ok(ids)
}

/// Bookkeeping from one speaker's adaptation run.
#[derive(Debug, Clone, Copy, Default)]
pub struct AdaptStats {
    pub selected_utts: usize,
    pub steps: usize,
    /// Utterance evaluations skipped because the mask emptied the numerator.
    pub skipped_numerator_empty: usize,
}

/// Adapt a clone of the seed model to one speaker using the speaker's own
/// first-pass lattices as supervision. The seed model is untouched; the
/// returned copy carries the adapted parameters (and only those the
/// selector allows to move).
pub fn adapt_speaker(
    seed: &AcousticModel,
    speaker: &str,
    utterances: &[&Utterance],
    first_pass: &BTreeMap<String, DecodeResult>,
    cfg: &AdaptationConfig,
    den: &SearchGraph,
    phones: &PhoneSet,
) -> Result<(AcousticModel, AdaptStats), HarnessError> {
    let by_id: BTreeMap<&str, &Utterance> =
        utterances.iter().map(|u| (u.id.as_str(), *u)).collect();
    let speaker_results: BTreeMap<String, DecodeResult> = first_pass
        .iter()
        .filter(|(id, _)| by_id.contains_key(id.as_str()))
        .map(|(id, r)| (id.clone(), r.clone()))
        .collect();
    if speaker_results.is_empty() {
        return Err(HarnessError::AllUtterancesFiltered(speaker.to_string()));
    }
    let selected = filter_by_confidence(&speaker_results, cfg.confidence_fraction)?;

    // Supervision per selected utterance: prune the first-pass lattice,
    // keep its graph scores, mask around its arcs.
    let mut supervision = Vec::with_capacity(selected.len());
    for id in &selected {
        let lat = first_pass[id].lattice.prune(cfg.supervision_beam())?;
        let (graph, mask) = numerator_from_lattice(&lat, cfg.tolerance, phones.num_units())?;
        supervision.push((by_id[id.as_str()], graph, mask));
    }

    let mut model = seed.clone();
    model.init_speaker(speaker);
    let mut stats = AdaptStats {
        selected_utts: selected.len(),
        ..Default::default()
    };
    if cfg.epochs == 0 {
        return Ok((model, stats));
    }

    let selector = match cfg.params {
        AdaptParams::All => ParamSelector::all(),
        AdaptParams::Lhuc => ParamSelector::lhuc_only(),
    };
    let total_iters = cfg.epochs * supervision.len();
    let schedule = match cfg.params {
        AdaptParams::All => {
            let start = seed.last_lr();
            assert!(start > 0.0, "seed checkpoint carries no last training lr");
            LrSchedule::new(start, start / cfg.all_lr_divisor, total_iters)
        }
        AdaptParams::Lhuc => LrSchedule::new(cfg.lhuc_lr, cfg.lhuc_lr, total_iters),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(speaker.as_bytes()));
    let mut iter = 0usize;
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..supervision.len()).collect();
        order.shuffle(&mut rng);
        for &si in &order {
            let (utt, ref graph, ref mask) = supervision[si];
            let (trace, outputs) = model.forward_trace(&utt.features, Some(speaker))?;
            let (_, grad) = match mmi_loss_and_grad(&outputs, graph, mask, den, 1.0) {
                Ok(v) => v,
                Err(MmiError::NumeratorEmpty) => {
                    stats.skipped_numerator_empty += 1;
                    iter += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let t_out = outputs.nrows() as f64;
            let grad_loss = grad.mapv(|g| -g / t_out);
            let mut grads = model.backward(&trace, &grad_loss, &selector)?;
            // The published LHUC rate assumes per-unit-scale steps; divide
            // each amplitude gradient by its layer width so that rate lands
            // in the stable regime regardless of model size.
            if cfg.params == AdaptParams::Lhuc {
                if let Some((_, lhuc)) = &mut grads.lhuc {
                    for v in lhuc.iter_mut() {
                        let w = v.len() as f64;
                        v.mapv_inplace(|g| g / w);
                    }
                }
            }
            model.sgd_step(&grads, &selector, schedule.lr_at(iter), 0.0);
            iter += 1;
            stats.steps += 1;
        }
    }
    Ok((model, stats))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
