//! Desk-scale toolkit for sequence-discriminative (LF-MMI) training and
//! unsupervised test-time adaptation of small hybrid acoustic models.
//!
//! The toolkit is built around weighted time-synchronous lattices: a first
//! pass decode produces a lattice per utterance, and that lattice (or just
//! its best path) becomes the supervision for adapting the acoustic model
//! on the very data being transcribed. Everything needed to run that loop
//! at desk scale lives here:
//!
//! - [`lattice`] — acyclic weighted lattices, log/tropical semiring
//!   algorithms (forward-backward, best path, posterior pruning, confidence).
//! - [`graph`] — phone n-gram LM estimation and finite-state search spaces:
//!   denominator/decoding graphs and numerator supervision with frame masks.
//! - [`model`] — a small spliced feed-forward net with frame subsampling,
//!   per-speaker LHUC amplitudes, SAT-LHUC, and parameter-group SGD.
//! - [`mmi`] — the LF-MMI objective, its gradient, Viterbi alignment, and
//!   the training loop.
//! - [`decode`] — time-synchronous Viterbi beam search emitting lattices.
//! - [`corpus`] — synthetic speech-like corpora with a speaker-mismatch
//!   knob, plus corpus file I/O.
//! - [`harness`] — the experiment engine: first-pass decode, LAT/BP
//!   supervision, confidence filtering, ALL/LHUC adaptation, scoring and
//!   report emission.

pub mod corpus;
pub mod decode;
pub mod graph;
pub mod harness;
pub mod lattice;
pub mod mmi;
pub mod model;

pub use lattice::{Lattice, LatticeArc, LogWeight, PosteriorTable};
