//! Small feed-forward acoustic model with temporal splicing, output-frame
//! subsampling, and per-speaker LHUC amplitudes.
//!
//! Each hidden layer splices its input across a window of time offsets,
//! applies an affine map and a rectifier, then scales every unit by an
//! amplitude vector: the speaker's LHUC vector for a speaker-dependent
//! pass, or the speaker-independent vector otherwise. One layer may stride
//! over time so the model emits scores at a fraction of the input frame
//! rate. Outputs are unnormalized log scores; column `u - 1` scores output
//! unit `u`.

mod checkpoint;

pub use checkpoint::{read_model, write_model};

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("utterance too short: {got} input frames, need at least {min}")]
    TooShortUtterance { min: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown speaker {0:?} (no LHUC vector initialized)")]
    UnknownSpeaker(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Temporal wiring of one hidden layer: which input offsets it splices and
/// how far it strides between consecutive output frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub offsets: Vec<i32>,
    pub stride: usize,
}

impl LayerSpec {
    pub fn new(offsets: Vec<i32>, stride: usize) -> Self {
        LayerSpec { offsets, stride }
    }

    fn min_offset(&self) -> i32 {
        *self.offsets.iter().min().unwrap()
    }
    fn max_offset(&self) -> i32 {
        *self.offsets.iter().max().unwrap()
    }

    /// Output length: `ceil(in_len / stride)`. Windows clamp at the edges
    /// (edge frames are effectively replicated), so context never shortens
    /// the sequence.
    fn out_len(&self, in_len: usize) -> Option<usize> {
        if in_len == 0 {
            return None;
        }
        Some(in_len.div_ceil(self.stride))
    }

    /// Input row feeding (output position, offset), clamped to the edges.
    #[inline]
    fn tap(&self, out_pos: usize, offset: i32, in_len: usize) -> usize {
        let raw = out_pos as i64 * self.stride as i64 + offset as i64;
        raw.clamp(0, in_len as i64 - 1) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub splices: Vec<LayerSpec>,
    pub num_units: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The default desk-scale architecture: five 64-unit layers splicing
    /// one frame of context each, with a stride of 3 at the third layer.
    pub fn desk_default(input_dim: usize, num_units: usize, seed: u64) -> Self {
        let splice = |stride| LayerSpec::new(vec![-1, 0, 1], stride);
        ModelConfig {
            input_dim,
            hidden_dims: vec![64; 5],
            splices: vec![splice(1), splice(1), splice(3), splice(1), splice(1)],
            num_units,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.num_units == 0 {
            return Err(ModelError::BadConfig("zero input or output dim".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.len() != self.splices.len() {
            return Err(ModelError::BadConfig(
                "hidden_dims and splices must be non-empty and equal length".into(),
            ));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(ModelError::BadConfig("zero-width hidden layer".into()));
        }
        for (i, s) in self.splices.iter().enumerate() {
            if s.offsets.is_empty() {
                return Err(ModelError::BadConfig(format!("layer {i} has no offsets")));
            }
            if s.stride == 0 {
                return Err(ModelError::BadConfig(format!("layer {i} has stride 0")));
            }
            let mut sorted = s.offsets.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != s.offsets.len() {
                return Err(ModelError::BadConfig(format!(
                    "layer {i} has duplicate offsets"
                )));
            }
        }
        Ok(())
    }

    /// Overall output-rate reduction: the product of layer strides.
    pub fn subsample_factor(&self) -> usize {
        self.splices.iter().map(|s| s.stride).product()
    }

    /// Output frame count for `t_in` input frames: the strides' ceiling
    /// division composed across layers. None only for an empty input.
    pub fn output_frames(&self, t_in: usize) -> Option<usize> {
        let mut t = t_in;
        for s in &self.splices {
            t = s.out_len(t)?;
        }
        Some(t)
    }

    /// Smallest input length producing at least one output frame.
    pub fn min_input_frames(&self) -> usize {
        1
    }

    /// Per-layer sequence lengths for an input of `t_in` frames, input first.
    fn layer_lens(&self, t_in: usize) -> Vec<usize> {
        let mut lens = Vec::with_capacity(self.splices.len() + 1);
        lens.push(t_in);
        let mut t = t_in;
        for s in &self.splices {
            t = t.div_ceil(s.stride);
            lens.push(t);
        }
        lens
    }

    /// Input frame at the (offset-0) center of an output frame's window.
    pub fn input_center(&self, out_frame: usize, t_in: usize) -> usize {
        let lens = self.layer_lens(t_in);
        let mut pos = out_frame;
        for (l, s) in self.splices.iter().enumerate().rev() {
            let center = if s.offsets.contains(&0) {
                0
            } else {
                s.offsets[s.offsets.len() / 2]
            };
            pos = s.tap(pos, center, lens[l]);
        }
        pos
    }

    /// Input-frame interval `[lo, hi]` an output frame can depend on.
    pub fn receptive_field(&self, out_frame: usize, t_in: usize) -> (usize, usize) {
        let lens = self.layer_lens(t_in);
        let mut lo = out_frame;
        let mut hi = out_frame;
        for (l, s) in self.splices.iter().enumerate().rev() {
            lo = s.tap(lo, s.min_offset(), lens[l]);
            hi = s.tap(hi, s.max_offset(), lens[l]);
        }
        (lo, hi)
    }

    /// Map an input-rate alignment to one entry per output frame (the value
    /// at each output frame's center).
    pub fn downsample_alignment<T: Copy>(&self, input_align: &[T]) -> Option<Vec<T>> {
        let t_out = self.output_frames(input_align.len())?;
        Some(
            (0..t_out)
                .map(|f| input_align[self.input_center(f, input_align.len())])
                .collect(),
        )
    }
}

/// Which parameters an update touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    All,
    LhucOnly,
}

/// Parameter-group selector for gradient computation and SGD.
#[derive(Debug, Clone, Default)]
pub struct ParamSelector {
    pub mode: Option<ParamMode>,
    /// Restrict to a subset of hidden layers; None selects all layers.
    pub layers: Option<Vec<usize>>,
}

impl ParamSelector {
    pub fn all() -> Self {
        ParamSelector {
            mode: Some(ParamMode::All),
            layers: None,
        }
    }
    pub fn lhuc_only() -> Self {
        ParamSelector {
            mode: Some(ParamMode::LhucOnly),
            layers: None,
        }
    }
    /// Weights and biases only, leaving every LHUC vector untouched. Used
    /// by speaker-independent training, where amplitudes stay identity.
    pub fn weights_only() -> Self {
        ParamSelector { mode: None, layers: None }
    }

    fn wants_weights(&self) -> bool {
        !matches!(self.mode, Some(ParamMode::LhucOnly))
    }
    fn wants_lhuc(&self) -> bool {
        self.mode.is_some()
    }
    fn layer_selected(&self, l: usize) -> bool {
        self.layers.as_ref().map_or(true, |ls| ls.contains(&l))
    }
}

/// Identifies which amplitude vector a pass used: the speaker-independent
/// one or a named speaker's.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LhucTarget {
    Si,
    Speaker(String),
}

#[derive(Debug, Clone)]
struct DenseLayer {
    w: Array2<f64>, // (spliced input dim, width)
    b: Array1<f64>,
}

/// The acoustic model: dense layers plus LHUC amplitude vectors. The
/// speaker-independent vectors start at exactly one; speaker vectors are
/// sampled from N(1, 0.01^2) deterministically from the model seed and the
/// speaker id.
#[derive(Debug, Clone)]
pub struct AcousticModel {
    cfg: ModelConfig,
    layers: Vec<DenseLayer>,
    out_w: Array2<f64>,
    out_b: Array1<f64>,
    si_lhuc: Vec<Array1<f64>>,
    sd_lhuc: BTreeMap<String, Vec<Array1<f64>>>,
    /// Learning rate of the last training iteration; adaptation schedules
    /// start here. Persisted in checkpoints.
    last_lr: f64,
}

/// Standard deviation of fresh speaker LHUC amplitudes around 1.
pub const LHUC_INIT_STD: f64 = 0.01;

pub fn init_model(cfg: ModelConfig) -> Result<AcousticModel, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layers = Vec::with_capacity(cfg.hidden_dims.len());
    let mut in_dim = cfg.input_dim;
    for (l, &width) in cfg.hidden_dims.iter().enumerate() {
        let spliced = in_dim * cfg.splices[l].offsets.len();
        layers.push(DenseLayer {
            w: init_weight(&mut rng, spliced, width),
            b: Array1::zeros(width),
        });
        in_dim = width;
    }
    let out_w = init_weight(&mut rng, in_dim, cfg.num_units);
    let out_b = Array1::zeros(cfg.num_units);
    let si_lhuc = cfg.hidden_dims.iter().map(|&d| Array1::ones(d)).collect();
    Ok(AcousticModel {
        cfg,
        layers,
        out_w,
        out_b,
        si_lhuc,
        sd_lhuc: BTreeMap::new(),
        last_lr: 0.0,
    })
}

/// Fan-in-scaled uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
fn init_weight(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Activations recorded by a forward pass, needed for reverse mode.
pub struct ForwardTrace {
    target: LhucTarget,
    /// Spliced input per hidden layer.
    spliced: Vec<Array2<f64>>,
    /// Pre-rectifier activations per hidden layer.
    pre: Vec<Array2<f64>>,
    /// Post-rectifier, pre-LHUC activations per hidden layer.
    hidden: Vec<Array2<f64>>,
    /// Amplitudes used by the pass, copied so later model updates cannot
    /// skew the backward pass.
    amps: Vec<Array1<f64>>,
    /// Post-LHUC activations of the last hidden layer.
    last: Array2<f64>,
    out_shape: (usize, usize),
}

impl ForwardTrace {
    pub fn target(&self) -> &LhucTarget {
        &self.target
    }
}

/// Per-parameter gradients, restricted to a selector's groups. `lhuc`
/// entries are zero arrays for unselected layers.
pub struct Gradients {
    pub layers: Option<Vec<(Array2<f64>, Array1<f64>)>>,
    pub out_w: Option<Array2<f64>>,
    pub out_b: Option<Array1<f64>>,
    pub lhuc: Option<(LhucTarget, Vec<Array1<f64>>)>,
}

impl AcousticModel {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn last_lr(&self) -> f64 {
        self.last_lr
    }

    pub fn set_last_lr(&mut self, lr: f64) {
        self.last_lr = lr;
    }

    pub fn has_speaker(&self, spk: &str) -> bool {
        self.sd_lhuc.contains_key(spk)
    }

    pub fn speakers(&self) -> impl Iterator<Item = &str> {
        self.sd_lhuc.keys().map(String::as_str)
    }

    /// Create the speaker's LHUC vectors if absent, sampling N(1, 0.01^2)
    /// from an RNG keyed on (model seed, speaker id) so initialization does
    /// not depend on call order.
    pub fn init_speaker(&mut self, spk: &str) {
        if self.sd_lhuc.contains_key(spk) {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ fnv1a(spk.as_bytes()));
        let normal = rand_distr::Normal::new(1.0, LHUC_INIT_STD).unwrap();
        let vecs = self
            .cfg
            .hidden_dims
            .iter()
            .map(|&d| Array1::from_shape_fn(d, |_| normal.sample(&mut rng)))
            .collect();
        self.sd_lhuc.insert(spk.to_string(), vecs);
    }

    pub fn speaker_lhuc(&self, spk: &str) -> Option<&[Array1<f64>]> {
        self.sd_lhuc.get(spk).map(Vec::as_slice)
    }

    pub fn set_speaker_lhuc(&mut self, spk: &str, vectors: Vec<Array1<f64>>) {
        assert_eq!(vectors.len(), self.cfg.hidden_dims.len());
        self.sd_lhuc.insert(spk.to_string(), vectors);
    }

    pub fn si_lhuc(&self) -> &[Array1<f64>] {
        &self.si_lhuc
    }

    fn amps_for(&self, target: &LhucTarget) -> Result<&[Array1<f64>], ModelError> {
        match target {
            LhucTarget::Si => Ok(&self.si_lhuc),
            LhucTarget::Speaker(s) => self
                .sd_lhuc
                .get(s)
                .map(Vec::as_slice)
                .ok_or_else(|| ModelError::UnknownSpeaker(s.clone())),
        }
    }

    /// Forward pass: `t_in x input_dim` features to `t_out x num_units`
    /// unnormalized log scores. `speaker` of None runs the
    /// speaker-independent pass.
    pub fn forward(
        &self,
        feats: &Array2<f32>,
        speaker: Option<&str>,
    ) -> Result<Array2<f64>, ModelError> {
        Ok(self.forward_trace(feats, speaker)?.1)
    }

    /// Forward pass that also returns the activation trace for [`backward`].
    pub fn forward_trace(
        &self,
        feats: &Array2<f32>,
        speaker: Option<&str>,
    ) -> Result<(ForwardTrace, Array2<f64>), ModelError> {
        let target = match speaker {
            None => LhucTarget::Si,
            Some(s) => LhucTarget::Speaker(s.to_string()),
        };
        let amps = self.amps_for(&target)?.to_vec();
        let t_in = feats.nrows();
        if feats.ncols() != self.cfg.input_dim {
            return Err(ModelError::ShapeMismatch(format!(
                "features have dim {}, model expects {}",
                feats.ncols(),
                self.cfg.input_dim
            )));
        }
        let min = self.cfg.min_input_frames();
        if self.cfg.output_frames(t_in).is_none() {
            return Err(ModelError::TooShortUtterance { min, got: t_in });
        }

        let mut cur: Array2<f64> = feats.mapv(|v| v as f64);
        let mut spliced_all = Vec::with_capacity(self.layers.len());
        let mut pre_all = Vec::with_capacity(self.layers.len());
        let mut hidden_all = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let spliced = splice(&cur, &self.cfg.splices[l]);
            let mut pre = spliced.dot(&layer.w);
            pre += &layer.b;
            let hidden = pre.mapv(|v| v.max(0.0));
            let scaled = &hidden * &amps[l];
            spliced_all.push(spliced);
            pre_all.push(pre);
            hidden_all.push(hidden);
            cur = scaled;
        }
        let mut out = cur.dot(&self.out_w);
        out += &self.out_b;
        let trace = ForwardTrace {
            target,
            spliced: spliced_all,
            pre: pre_all,
            hidden: hidden_all,
            amps,
            last: cur,
            out_shape: (out.nrows(), out.ncols()),
        };
        Ok((trace, out))
    }

    /// Exact reverse-mode gradients of a scalar loss with output gradient
    /// `grad_out`, reported only for the selector's parameter groups.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_out: &Array2<f64>,
        selector: &ParamSelector,
    ) -> Result<Gradients, ModelError> {
        if grad_out.dim() != trace.out_shape {
            return Err(ModelError::ShapeMismatch(format!(
                "grad_out is {:?}, outputs were {:?}",
                grad_out.dim(),
                trace.out_shape
            )));
        }
        let n_layers = self.layers.len();
        let mut layer_grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::new();
        let mut lhuc_grads: Vec<Array1<f64>> = self
            .cfg
            .hidden_dims
            .iter()
            .map(|&d| Array1::zeros(d))
            .collect();

        let out_w_grad = trace.last.t().dot(grad_out);
        let out_b_grad = grad_out.sum_axis(Axis(0));
        // Gradient wrt the post-LHUC activations of the top hidden layer.
        let mut g_scaled = grad_out.dot(&self.out_w.t());

        for l in (0..n_layers).rev() {
            if selector.wants_lhuc() && selector.layer_selected(l) {
                lhuc_grads[l] = (&g_scaled * &trace.hidden[l]).sum_axis(Axis(0));
            }
            let g_hidden = &g_scaled * &trace.amps[l];
            let g_pre = g_hidden * trace.pre[l].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            if selector.wants_weights() {
                let dw = trace.spliced[l].t().dot(&g_pre);
                let db = g_pre.sum_axis(Axis(0));
                layer_grads.push((dw, db));
            }
            if l > 0 {
                let g_spliced = g_pre.dot(&self.layers[l].w.t());
                g_scaled = unsplice(
                    &g_spliced,
                    &self.cfg.splices[l],
                    trace.hidden[l - 1].nrows(),
                    self.cfg.hidden_dims[l - 1],
                );
            }
        }
        layer_grads.reverse();

        Ok(Gradients {
            layers: selector.wants_weights().then_some(layer_grads),
            out_w: selector.wants_weights().then_some(out_w_grad),
            out_b: selector.wants_weights().then_some(out_b_grad),
            lhuc: selector
                .wants_lhuc()
                .then(|| (trace.target.clone(), lhuc_grads)),
        })
    }

    /// One SGD step: selected parameters move by `-lr * (grad + l2 * param)`.
    /// The L2 term applies to weight matrices only; biases and LHUC vectors
    /// are never shrunk.
    pub fn sgd_step(&mut self, grads: &Gradients, selector: &ParamSelector, lr: f64, l2: f64) {
        assert!(lr > 0.0, "learning rate must be positive");
        if selector.wants_weights() {
            if let Some(layer_grads) = &grads.layers {
                for (layer, (dw, db)) in self.layers.iter_mut().zip(layer_grads) {
                    layer.w.zip_mut_with(dw, |w, g| *w -= lr * (g + l2 * *w));
                    layer.b.zip_mut_with(db, |b, g| *b -= lr * g);
                }
            }
            if let Some(dw) = &grads.out_w {
                self.out_w.zip_mut_with(dw, |w, g| *w -= lr * (g + l2 * *w));
            }
            if let Some(db) = &grads.out_b {
                self.out_b.zip_mut_with(db, |b, g| *b -= lr * g);
            }
        }
        if selector.wants_lhuc() {
            if let Some((target, lhuc_grads)) = &grads.lhuc {
                let vecs = match target {
                    LhucTarget::Si => &mut self.si_lhuc,
                    LhucTarget::Speaker(s) => self
                        .sd_lhuc
                        .get_mut(s)
                        .expect("gradient for uninitialized speaker"),
                };
                for (v, g) in vecs.iter_mut().zip(lhuc_grads) {
                    v.zip_mut_with(g, |a, g| *a -= lr * g);
                }
            }
        }
    }
}

/// Single-parameter perturbations for finite-difference checks.
impl AcousticModel {
    pub(crate) fn poke_weight(&mut self, layer: usize, r: usize, c: usize, eps: f64) {
        self.layers[layer].w[(r, c)] += eps;
    }
    pub(crate) fn poke_bias(&mut self, layer: usize, k: usize, eps: f64) {
        self.layers[layer].b[k] += eps;
    }
    pub(crate) fn poke_out_weight(&mut self, r: usize, c: usize, eps: f64) {
        self.out_w[(r, c)] += eps;
    }
    pub(crate) fn poke_out_bias(&mut self, k: usize, eps: f64) {
        self.out_b[k] += eps;
    }
    pub(crate) fn poke_lhuc(&mut self, target: &LhucTarget, layer: usize, k: usize, eps: f64) {
        match target {
            LhucTarget::Si => self.si_lhuc[layer][k] += eps,
            LhucTarget::Speaker(s) => {
                self.sd_lhuc.get_mut(s).expect("speaker exists")[layer][k] += eps;
            }
        }
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

/// Concatenate rows across a layer's time offsets, striding over time.
/// Out-of-range taps clamp to the first or last row.
fn splice(input: &Array2<f64>, spec: &LayerSpec) -> Array2<f64> {
    let t_in = input.nrows();
    let t_out = spec.out_len(t_in).expect("length checked upstream");
    let dim = input.ncols();
    let mut out = Array2::zeros((t_out, dim * spec.offsets.len()));
    for j in 0..t_out {
        for (i, &o) in spec.offsets.iter().enumerate() {
            let src = spec.tap(j, o, t_in);
            out.row_mut(j)
                .slice_mut(ndarray::s![i * dim..(i + 1) * dim])
                .assign(&input.row(src));
        }
    }
    out
}

/// Adjoint of [`splice`]: scatter-add spliced gradients back to input rows.
fn unsplice(
    g_spliced: &Array2<f64>,
    spec: &LayerSpec,
    t_in: usize,
    dim: usize,
) -> Array2<f64> {
    let mut out = Array2::zeros((t_in, dim));
    for j in 0..g_spliced.nrows() {
        for (i, &o) in spec.offsets.iter().enumerate() {
            let dst = spec.tap(j, o, t_in);
            let chunk = g_spliced.row(j);
            let chunk = chunk.slice(ndarray::s![i * dim..(i + 1) * dim]);
            out.row_mut(dst).zip_mut_with(&chunk, |a, b| *a += b);
        }
    }
    out
}

/// Geometric learning-rate interpolation from `initial` at iteration 0 to
/// `final_lr` at the last iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub final_lr: f64,
    pub total_iters: usize,
}

impl LrSchedule {
    pub fn new(initial: f64, final_lr: f64, total_iters: usize) -> Self {
        assert!(initial > 0.0 && final_lr > 0.0 && total_iters > 0);
        LrSchedule {
            initial,
            final_lr,
            total_iters,
        }
    }

    pub fn from_epochs(initial: f64, final_lr: f64, epochs: usize, iters_per_epoch: usize) -> Self {
        Self::new(initial, final_lr, (epochs * iters_per_epoch).max(1))
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        debug_assert!(iteration < self.total_iters);
        if self.total_iters == 1 {
            return self.initial;
        }
        let frac = iteration as f64 / (self.total_iters - 1) as f64;
        self.initial * (self.final_lr / self.initial).powf(frac)
    }
}

/// Which LHUC set a SAT-LHUC minibatch trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SatPass {
    Si,
    Sd,
}

/// Choose the speaker-independent pass with probability `p`.
pub fn sat_lhuc_pass_selector(rng: &mut impl Rng, p: f64) -> SatPass {
    assert!((0.0..=1.0).contains(&p));
    if rng.gen::<f64>() < p {
        SatPass::Si
    } else {
        SatPass::Sd
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            hidden_dims: vec![5, 4],
            splices: vec![LayerSpec::new(vec![-1, 0, 1], 1), LayerSpec::new(vec![0], 2)],
            num_units: 2,
            seed,
        }
    }

    fn random_feats(t: usize, d: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((t, d), |_| rng.gen_range(-1.0f32..1.0))
    }

    #[test]
    fn same_seed_same_model() {
        let a = init_model(tiny_cfg(42)).unwrap();
        let b = init_model(tiny_cfg(42)).unwrap();
        assert_eq!(a.layers[0].w, b.layers[0].w);
        assert_eq!(a.out_w, b.out_w);
        let c = init_model(tiny_cfg(43)).unwrap();
        assert_ne!(a.layers[0].w, c.layers[0].w);
    }

    #[test]
    fn si_lhuc_is_ones_and_output_width_matches() {
        let m = init_model(tiny_cfg(1)).unwrap();
        for v in m.si_lhuc() {
            assert!(v.iter().all(|&x| x == 1.0));
        }
        assert_eq!(m.out_w.ncols(), 2);
        let feats = random_feats(9, 3, 5);
        let out = m.forward(&feats, None).unwrap();
        assert_eq!(out.ncols(), 2);
    }

    #[test]
    fn output_frame_count_matches_geometry() {
        let cfg = tiny_cfg(1);
        // Stride 1 then stride 2 with clamped windows: ceil(t/2).
        for t_in in 1..20 {
            assert_eq!(cfg.output_frames(t_in), Some(t_in.div_ceil(2)), "t_in={t_in}");
        }
        assert_eq!(cfg.output_frames(0), None);
        assert_eq!(cfg.min_input_frames(), 1);

        let desk = ModelConfig::desk_default(20, 12, 0);
        assert_eq!(desk.subsample_factor(), 3);
        for t_in in 1..80 {
            assert_eq!(
                desk.output_frames(t_in),
                Some(t_in.div_ceil(3)),
                "t_in={t_in}"
            );
        }
    }

    #[test]
    fn too_short_utterance_rejected() {
        let m = init_model(ModelConfig::desk_default(4, 3, 0)).unwrap();
        let feats = random_feats(0, 4, 1);
        assert!(matches!(
            m.forward(&feats, None),
            Err(ModelError::TooShortUtterance { .. })
        ));
        let feats = random_feats(1, 4, 1);
        assert_eq!(m.forward(&feats, None).unwrap().nrows(), 1);
    }

    #[test]
    fn receptive_field_probe() {
        let cfg = ModelConfig::desk_default(6, 4, 9);
        let m = init_model(cfg.clone()).unwrap();
        let t_in = 40;
        let feats = random_feats(t_in, 6, 2);
        let base = m.forward(&feats, None).unwrap();
        let t_out = base.nrows();
        for f in [0usize, t_out / 2, t_out - 1] {
            let (lo, hi) = cfg.receptive_field(f, t_in);
            // Perturbing any frame outside [lo, hi] leaves output frame f
            // bit-identical.
            for probe in 0..t_in {
                if probe >= lo && probe <= hi {
                    continue;
                }
                let mut pert = feats.clone();
                pert.row_mut(probe).mapv_inplace(|v| v + 10.0);
                let out = m.forward(&pert, None).unwrap();
                assert_eq!(
                    out.row(f),
                    base.row(f),
                    "frame {f} changed when perturbing input {probe} outside [{lo},{hi}]"
                );
            }
            // Sanity: perturbing the center does change it.
            let mut pert = feats.clone();
            pert.row_mut(cfg.input_center(f, t_in))
                .mapv_inplace(|v| v + 10.0);
            let out = m.forward(&pert, None).unwrap();
            assert_ne!(out.row(f), base.row(f));
        }
    }

    #[test]
    fn all_ones_lhuc_matches_si_bitwise() {
        let mut m = init_model(tiny_cfg(3)).unwrap();
        let ones: Vec<Array1<f64>> = m.cfg.hidden_dims.iter().map(|&d| Array1::ones(d)).collect();
        m.set_speaker_lhuc("spk", ones);
        let feats = random_feats(11, 3, 7);
        let si = m.forward(&feats, None).unwrap();
        let sd = m.forward(&feats, Some("spk")).unwrap();
        assert_eq!(si, sd);
    }

    #[test]
    fn zero_lhuc_nullifies_layer() {
        let mut m = init_model(tiny_cfg(3)).unwrap();
        let mut vecs: Vec<Array1<f64>> =
            m.cfg.hidden_dims.iter().map(|&d| Array1::ones(d)).collect();
        vecs[1] = Array1::zeros(m.cfg.hidden_dims[1]);
        m.set_speaker_lhuc("spk", vecs);
        let feats = random_feats(11, 3, 7);
        let out = m.forward(&feats, Some("spk")).unwrap();
        // Last hidden layer is zeroed, so outputs equal the output bias.
        for row in out.rows() {
            for (v, b) in row.iter().zip(&m.out_b) {
                assert_eq!(v, b);
            }
        }
    }

    #[test]
    fn speaker_init_deterministic_and_near_one() {
        let mut a = init_model(tiny_cfg(5)).unwrap();
        let mut b = init_model(tiny_cfg(5)).unwrap();
        a.init_speaker("s1");
        a.init_speaker("s2");
        b.init_speaker("s2"); // different order
        b.init_speaker("s1");
        assert_eq!(a.speaker_lhuc("s1").unwrap(), b.speaker_lhuc("s1").unwrap());
        assert_eq!(a.speaker_lhuc("s2").unwrap(), b.speaker_lhuc("s2").unwrap());
        for v in a.speaker_lhuc("s1").unwrap() {
            for &x in v {
                assert!((x - 1.0).abs() < 6.0 * LHUC_INIT_STD);
            }
        }
    }

    #[test]
    fn unknown_speaker_is_an_error() {
        let m = init_model(tiny_cfg(5)).unwrap();
        let feats = random_feats(9, 3, 1);
        assert!(matches!(
            m.forward(&feats, Some("ghost")),
            Err(ModelError::UnknownSpeaker(_))
        ));
    }

    /// Central-difference check of every selected gradient.
    fn grad_check(selector: ParamSelector, speaker: Option<&str>) -> f64 {
        let mut m = init_model(tiny_cfg(11)).unwrap();
        if let Some(s) = speaker {
            m.init_speaker(s);
        }
        let feats = random_feats(9, 3, 13);
        // Scalar loss: weighted sum of outputs, fixed random weights.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (trace, out) = m.forward_trace(&feats, speaker).unwrap();
        let loss_w = Array2::from_shape_fn(out.dim(), |_| rng.gen_range(-1.0..1.0));
        let grads = m.backward(&trace, &loss_w, &selector).unwrap();

        let loss = |m: &AcousticModel| -> f64 {
            (m.forward(&feats, speaker).unwrap() * &loss_w).sum()
        };
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        let mut check = |analytic: f64, poke: &mut dyn FnMut(&mut AcousticModel, f64)| {
            let mut mp = m.clone();
            poke(&mut mp, h);
            let up = loss(&mp);
            let mut mm = m.clone();
            poke(&mut mm, -h);
            let down = loss(&mm);
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        };

        if let Some(layer_grads) = &grads.layers {
            for (l, (dw, db)) in layer_grads.iter().enumerate() {
                for idx in [(0, 0), (dw.nrows() - 1, dw.ncols() - 1)] {
                    check(dw[idx], &mut |m, eps| m.layers[l].w[idx] += eps);
                }
                check(db[0], &mut |m, eps| m.layers[l].b[0] += eps);
            }
            check(grads.out_w.as_ref().unwrap()[(0, 0)], &mut |m, eps| {
                m.out_w[(0, 0)] += eps
            });
            check(grads.out_b.as_ref().unwrap()[0], &mut |m, eps| {
                m.out_b[0] += eps
            });
        }
        if let Some((target, lhuc)) = &grads.lhuc {
            let target = target.clone();
            for (l, g) in lhuc.iter().enumerate() {
                for k in 0..g.len() {
                    check(g[k], &mut |m, eps| match &target {
                        LhucTarget::Si => m.si_lhuc[l][k] += eps,
                        LhucTarget::Speaker(s) => {
                            let mut v = m.speaker_lhuc(s).unwrap().to_vec();
                            v[l][k] += eps;
                            m.set_speaker_lhuc(s, v);
                        }
                    });
                }
            }
        }
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences() {
        assert!(grad_check(ParamSelector::all(), Some("s")) < 1e-4);
        assert!(grad_check(ParamSelector::all(), None) < 1e-4);
        assert!(grad_check(ParamSelector::lhuc_only(), Some("s")) < 1e-4);
    }

    #[test]
    fn lhuc_only_reports_no_weight_gradients() {
        let mut m = init_model(tiny_cfg(11)).unwrap();
        m.init_speaker("s");
        let feats = random_feats(9, 3, 13);
        let (trace, out) = m.forward_trace(&feats, Some("s")).unwrap();
        let g = Array2::ones(out.dim());
        let grads = m.backward(&trace, &g, &ParamSelector::lhuc_only()).unwrap();
        assert!(grads.layers.is_none());
        assert!(grads.out_w.is_none());
        assert!(grads.lhuc.is_some());
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let mut m = init_model(tiny_cfg(11)).unwrap();
        m.init_speaker("s");
        let feats = random_feats(9, 3, 13);
        let (trace, out) = m.forward_trace(&feats, Some("s")).unwrap();
        let g = Array2::zeros(out.dim());
        let grads = m.backward(&trace, &g, &ParamSelector::all()).unwrap();
        for (dw, db) in grads.layers.as_ref().unwrap() {
            assert!(dw.iter().all(|&x| x == 0.0));
            assert!(db.iter().all(|&x| x == 0.0));
        }
        let (_, lhuc) = grads.lhuc.as_ref().unwrap();
        assert!(lhuc.iter().all(|v| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn sgd_zero_grads_is_fixed_point_and_l2_shrinks_weights() {
        let mut m = init_model(tiny_cfg(11)).unwrap();
        m.init_speaker("s");
        let before = m.clone();
        let zero_grads = Gradients {
            layers: Some(
                m.layers
                    .iter()
                    .map(|l| (Array2::zeros(l.w.dim()), Array1::zeros(l.b.dim())))
                    .collect(),
            ),
            out_w: Some(Array2::zeros(m.out_w.dim())),
            out_b: Some(Array1::zeros(m.out_b.dim())),
            lhuc: Some((
                LhucTarget::Speaker("s".into()),
                m.cfg.hidden_dims.iter().map(|&d| Array1::zeros(d)).collect(),
            )),
        };
        let sel = ParamSelector::all();
        let mut m2 = m.clone();
        m2.sgd_step(&zero_grads, &sel, 0.5, 0.0);
        assert_eq!(m2.layers[0].w, before.layers[0].w);
        assert_eq!(m2.speaker_lhuc("s"), before.speaker_lhuc("s"));

        // L2 with zero grads shrinks weight matrices only.
        m.sgd_step(&zero_grads, &sel, 0.5, 0.1);
        let shrink = 1.0 - 0.5 * 0.1;
        for (after, orig) in m.layers[0].w.iter().zip(before.layers[0].w.iter()) {
            assert!((after - orig * shrink).abs() < 1e-15);
        }
        assert_eq!(m.layers[0].b, before.layers[0].b);
        assert_eq!(m.speaker_lhuc("s"), before.speaker_lhuc("s"));
    }

    #[test]
    fn single_scalar_sgd_step() {
        let mut m = init_model(tiny_cfg(11)).unwrap();
        let w0 = m.out_b[0];
        let mut grads = Gradients {
            layers: None,
            out_w: None,
            out_b: Some(Array1::zeros(m.out_b.dim())),
            lhuc: None,
        };
        grads.out_b.as_mut().unwrap()[0] = 2.0;
        m.sgd_step(&grads, &ParamSelector::all(), 0.25, 0.0);
        assert!((m.out_b[0] - (w0 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_geometric() {
        let s = LrSchedule::new(0.04, 0.004, 101);
        assert_eq!(s.lr_at(0), 0.04);
        assert!((s.lr_at(100) - 0.004).abs() < 1e-15);
        let mid = s.lr_at(50);
        assert!((mid - (0.04f64 * 0.004).sqrt()).abs() < 1e-12);
        for i in 1..101 {
            assert!(s.lr_at(i) < s.lr_at(i - 1));
        }
    }

    #[test]
    fn sat_selector_boundaries_and_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            assert_eq!(sat_lhuc_pass_selector(&mut rng, 1.0), SatPass::Si);
            assert_eq!(sat_lhuc_pass_selector(&mut rng, 0.0), SatPass::Sd);
        }
        let n = 10_000;
        let si = (0..n)
            .filter(|_| sat_lhuc_pass_selector(&mut rng, 0.5) == SatPass::Si)
            .count();
        let frac = si as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "SI fraction {frac}");
    }
}
