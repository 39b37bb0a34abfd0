//! Synthetic speech-like corpora with a controllable speaker-mismatch knob.
//!
//! Phone sequences come from a seeded Markov chain with no self
//! transitions (adjacent repeats are unrepresentable under the one-state
//! topology). Each phone occupies a uniform random number of input frames;
//! frames are the phone's class mean pushed through a per-speaker affine
//! distortion (rotations, diagonal scaling, and bias, all proportional to a
//! magnitude knob) plus isotropic Gaussian noise. Test speakers are always
//! disjoint from training speakers and draw fresh distortions at their own
//! magnitude, so a single scalar sweeps the train/test mismatch from zero
//! to severe.

mod io;

pub use io::{read_corpus, write_corpus};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Phone;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("bad generator config: {0}")]
    BadConfig(String),
    #[error("corrupt corpus file {path}: {msg} (byte offset {offset})")]
    CorruptFile {
        path: String,
        offset: u64,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub num_phones: u32,
    pub feature_dim: usize,
    /// Frames per phone occurrence at the input rate, inclusive bounds.
    pub min_frames_per_phone: usize,
    pub max_frames_per_phone: usize,
    pub noise_std: f64,
    /// Distortion magnitude for training speakers.
    pub kappa_train: f64,
    /// Distortion magnitude for (fresh) test speakers.
    pub kappa_test: f64,
    pub train_speakers: usize,
    pub test_speakers: usize,
    pub train_utts_per_speaker: usize,
    pub test_utts_per_speaker: usize,
    pub phones_per_utterance: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    /// The default desk-scale corpus.
    fn default() -> Self {
        GeneratorConfig {
            num_phones: 12,
            feature_dim: 20,
            min_frames_per_phone: 6,
            max_frames_per_phone: 18,
            noise_std: 1.0,
            kappa_train: 0.5,
            kappa_test: 0.0,
            train_speakers: 40,
            test_speakers: 8,
            train_utts_per_speaker: 30,
            test_utts_per_speaker: 20,
            phones_per_utterance: 10,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: &str| Err(CorpusError::BadConfig(msg.into()));
        if self.num_phones < 2 {
            return bad("need at least 2 phones (the chain has no self transitions)");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if self.min_frames_per_phone == 0 || self.min_frames_per_phone > self.max_frames_per_phone
        {
            return bad("frames-per-phone bounds must satisfy 1 <= min <= max");
        }
        if self.noise_std < 0.0 || self.kappa_train < 0.0 || self.kappa_test < 0.0 {
            return bad("noise_std and kappa must be nonnegative");
        }
        if self.train_speakers == 0
            || self.test_speakers == 0
            || self.train_utts_per_speaker == 0
            || self.test_utts_per_speaker == 0
            || self.phones_per_utterance == 0
        {
            return bad("speaker/utterance/phone counts must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    /// `t_in x feature_dim`, stored at disk precision.
    pub features: Array2<f32>,
    pub transcript: Vec<Phone>,
    /// Generative phone per input frame; same length as `features` rows.
    pub alignment: Vec<Phone>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub split: Split,
    /// Sorted by utterance id.
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn speakers(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.utterances.iter().map(|u| u.speaker.as_str()).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn by_speaker(&self) -> std::collections::BTreeMap<&str, Vec<&Utterance>> {
        let mut map: std::collections::BTreeMap<&str, Vec<&Utterance>> = Default::default();
        for u in &self.utterances {
            map.entry(u.speaker.as_str()).or_default().push(u);
        }
        map
    }

    pub fn total_input_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.features.nrows()).sum()
    }
}

/// Shared generative layer: phone class means and the phone Markov chain.
struct World {
    means: Vec<Array1<f64>>, // per phone, index 0 unused
    initial: Vec<f64>,
    /// Row-stochastic transition matrix with zero diagonal.
    trans: Vec<Vec<f64>>,
}

fn build_world(cfg: &GeneratorConfig) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e3779b97f4a7c15));
    let normal = rand_distr::StandardNormal;
    let p = cfg.num_phones as usize;
    let mut means = vec![Array1::zeros(cfg.feature_dim)];
    for _ in 0..p {
        means.push(Array1::from_shape_fn(cfg.feature_dim, |_| {
            <rand_distr::StandardNormal as rand_distr::Distribution<f64>>::sample(&normal, &mut rng)
        }));
    }
    let mut initial: Vec<f64> = (0..p).map(|_| rng.gen_range(0.5..1.5)).collect();
    let z: f64 = initial.iter().sum();
    initial.iter_mut().for_each(|v| *v /= z);
    let mut trans = Vec::with_capacity(p);
    for i in 0..p {
        let mut row: Vec<f64> = (0..p)
            .map(|j| if i == j { 0.0 } else { rng.gen_range(0.5..1.5) })
            .collect();
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
        trans.push(row);
    }
    World {
        means,
        initial,
        trans,
    }
}

/// Per-speaker affine distortion: interleaved plane rotations, diagonal
/// scaling, and a bias, every component proportional to `kappa`. Zero
/// magnitude is the identity.
struct SpeakerTransform {
    rotations: Vec<(usize, usize, f64)>, // (dim a, dim b, angle)
    scale: Array1<f64>,
    bias: Array1<f64>,
}

impl SpeakerTransform {
    fn sample(cfg: &GeneratorConfig, speaker: &str, kappa: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(speaker.as_bytes()));
        let d = cfg.feature_dim;
        let gauss = |rng: &mut ChaCha8Rng| -> f64 {
            <rand_distr::StandardNormal as rand_distr::Distribution<f64>>::sample(
                &rand_distr::StandardNormal,
                rng,
            )
        };
        let mut rotations = Vec::new();
        // Two rounds of disjoint plane rotations with shifted pairing so
        // the distortion mixes beyond adjacent coordinate pairs.
        for round in 0..2 {
            let mut a = round;
            while a + 1 < d {
                rotations.push((a, a + 1, kappa * 0.35 * gauss(&mut rng)));
                a += 2;
            }
        }
        let scale =
            Array1::from_shape_fn(d, |_| (1.0 + kappa * 0.25 * gauss(&mut rng)).max(0.1));
        let bias = Array1::from_shape_fn(d, |_| kappa * 0.5 * gauss(&mut rng));
        SpeakerTransform {
            rotations,
            scale,
            bias,
        }
    }

    fn apply(&self, v: &Array1<f64>) -> Array1<f64> {
        let mut x = v.clone();
        for &(a, b, angle) in &self.rotations {
            let (sin, cos) = angle.sin_cos();
            let (xa, xb) = (x[a], x[b]);
            x[a] = cos * xa - sin * xb;
            x[b] = sin * xa + cos * xb;
        }
        x *= &self.scale;
        x += &self.bias;
        x
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Generate disjoint train and test corpora under one seed. Test speakers
/// draw fresh distortions at `kappa_test`.
pub fn generate(cfg: &GeneratorConfig) -> Result<(Corpus, Corpus), CorpusError> {
    cfg.validate()?;
    let world = build_world(cfg);
    let train = generate_split(cfg, &world, Split::Train);
    let test = generate_split(cfg, &world, Split::Test);
    Ok((train, test))
}

fn generate_split(cfg: &GeneratorConfig, world: &World, split: Split) -> Corpus {
    let (prefix, n_spk, n_utt, kappa) = match split {
        Split::Train => (
            "trn",
            cfg.train_speakers,
            cfg.train_utts_per_speaker,
            cfg.kappa_train,
        ),
        Split::Test => (
            "tst",
            cfg.test_speakers,
            cfg.test_utts_per_speaker,
            cfg.kappa_test,
        ),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ fnv1a(format!("split:{split}").as_bytes()),
    );
    let gauss = |rng: &mut ChaCha8Rng| -> f64 {
        <rand_distr::StandardNormal as rand_distr::Distribution<f64>>::sample(
            &rand_distr::StandardNormal,
            rng,
        )
    };
    let mut utterances = Vec::with_capacity(n_spk * n_utt);
    for s in 0..n_spk {
        let speaker = format!("{prefix}_s{s:03}");
        let transform = SpeakerTransform::sample(cfg, &speaker, kappa);
        // Distorted class means, precomputed per phone.
        let speaker_means: Vec<Array1<f64>> = (0..=cfg.num_phones as usize)
            .map(|p| {
                if p == 0 {
                    Array1::zeros(cfg.feature_dim)
                } else {
                    transform.apply(&world.means[p])
                }
            })
            .collect();
        for u in 0..n_utt {
            let id = format!("{speaker}_u{u:03}");
            let mut transcript = Vec::with_capacity(cfg.phones_per_utterance);
            let mut alignment = Vec::new();
            for i in 0..cfg.phones_per_utterance {
                let phone = if i == 0 {
                    sample_categorical(&mut rng, &world.initial) as Phone + 1
                } else {
                    let prev = (*transcript.last().unwrap() - 1) as usize;
                    sample_categorical(&mut rng, &world.trans[prev]) as Phone + 1
                };
                transcript.push(phone);
                let dur =
                    rng.gen_range(cfg.min_frames_per_phone..=cfg.max_frames_per_phone);
                alignment.extend(std::iter::repeat(phone).take(dur));
            }
            let t_in = alignment.len();
            let mut features = Array2::<f32>::zeros((t_in, cfg.feature_dim));
            for (t, &phone) in alignment.iter().enumerate() {
                let mean = &speaker_means[phone as usize];
                for (dcol, mv) in mean.iter().enumerate() {
                    features[(t, dcol)] = (mv + cfg.noise_std * gauss(&mut rng)) as f32;
                }
            }
            utterances.push(Utterance {
                id,
                speaker: speaker.clone(),
                features,
                transcript,
                alignment,
            });
        }
    }
    utterances.sort_by(|a, b| a.id.cmp(&b.id));
    Corpus { split, utterances }
}

fn sample_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    probs.len() - 1
}
