//! The LF-MMI objective and its gradient.
//!
//! Per utterance the objective is `log p(O|num) - log p(O|den)`: the
//! numerator runs mask-constrained forward-backward over the supervision
//! graph, the denominator over the phone-LM graph, both frame-synchronously
//! against the model's output scores. The output-layer gradient is the
//! occupancy difference `gamma_num - gamma_den`, which backpropagates
//! through the acoustic model. Numerator graphs keep the denominator's own
//! scores on their paths, so every per-utterance term is nonpositive.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::Corpus;
use crate::graph::{
    numerator_from_transcript, FrameMask, GraphError, Phone, PhoneNgramLM, PhoneSet, SearchGraph,
};
use crate::lattice::{log_add, Label};
use crate::model::{
    sat_lhuc_pass_selector, AcousticModel, LrSchedule, ModelError, ParamSelector, SatPass,
};

#[derive(Debug, Error)]
pub enum MmiError {
    #[error("numerator empty: the frame mask admits no supervision path")]
    NumeratorEmpty,
    #[error("denominator admits no path of this length")]
    DenominatorEmpty,
    #[error("no forced alignment: transcript does not fit in the output frames")]
    NoAlignment,
    #[error("training diverged at epoch {epoch}: objective is not finite")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-utterance loss terms. The MMI objective contribution is
/// `num_logz - den_logz`, at most zero when the numerator is a subgraph.
#[derive(Debug, Clone, Copy)]
pub struct MmiUttLoss {
    pub num_logz: f64,
    pub den_logz: f64,
}

impl MmiUttLoss {
    pub fn objective(&self) -> f64 {
        self.num_logz - self.den_logz
    }
}

/// Output-layer gradient of the per-utterance objective: per-frame,
/// per-unit occupancy difference `gamma_num - gamma_den`. Rows sum to zero.
pub type OutputGradient = Array2<f64>;

/// Result of a frame-synchronous forward-backward pass over a search graph.
pub struct GraphPosteriors {
    /// Log-sum over all complete length-T paths (final weights included).
    pub logz: f64,
    /// `t x num_units` label occupancies; each row sums to one.
    pub gamma: Array2<f64>,
}

/// Frame-synchronous forward-backward over a search graph composed with
/// per-frame acoustic scores (`acoustics[t][label-1]`, scaled by `scale`).
/// Arcs whose label the mask forbids at a frame contribute nothing. Returns
/// None when no complete path survives.
pub fn graph_forward_backward(
    graph: &SearchGraph,
    acoustics: &Array2<f64>,
    scale: f64,
    mask: Option<&FrameMask>,
) -> Option<GraphPosteriors> {
    let t_max = acoustics.nrows();
    let n = graph.num_states();
    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; (t_max + 1) * n];
    alpha[graph.start()] = 0.0;
    let allowed =
        |t: usize, label: Label| -> bool { mask.map_or(true, |m| m.is_allowed(t, label)) };

    for t in 0..t_max {
        let (cur, next) = alpha[t * n..(t + 2) * n].split_at_mut(n);
        for a in graph.arcs() {
            let base = cur[a.src];
            if base == neg || !allowed(t, a.label) {
                continue;
            }
            let w = base + a.weight.value() + scale * acoustics[(t, a.label as usize - 1)];
            next[a.dst] = log_add(next[a.dst], w);
        }
    }
    let mut logz = neg;
    for s in 0..n {
        let fw = graph.final_weight(s);
        if !fw.is_zero() && alpha[t_max * n + s] != neg {
            logz = log_add(logz, alpha[t_max * n + s] + fw.value());
        }
    }
    if logz == neg {
        return None;
    }

    let mut beta = vec![neg; (t_max + 1) * n];
    for s in 0..n {
        let fw = graph.final_weight(s);
        if !fw.is_zero() {
            beta[t_max * n + s] = fw.value();
        }
    }
    let mut gamma = Array2::zeros((t_max, acoustics.ncols()));
    for t in (0..t_max).rev() {
        let (head, tail) = beta.split_at_mut((t + 1) * n);
        let cur = &mut head[t * n..];
        let next = &tail[..n];
        for a in graph.arcs() {
            if next[a.dst] == neg || !allowed(t, a.label) {
                continue;
            }
            let w = a.weight.value() + scale * acoustics[(t, a.label as usize - 1)] + next[a.dst];
            cur[a.src] = log_add(cur[a.src], w);
            let fwd = alpha[t * n + a.src];
            if fwd != neg {
                gamma[(t, a.label as usize - 1)] += (fwd + w - logz).exp();
            }
        }
    }
    Some(GraphPosteriors { logz, gamma })
}

/// Evaluate the per-utterance MMI terms and the output-layer gradient.
pub fn mmi_loss_and_grad(
    outputs: &Array2<f64>,
    num: &SearchGraph,
    mask: &FrameMask,
    den: &SearchGraph,
    scale: f64,
) -> Result<(MmiUttLoss, OutputGradient), MmiError> {
    let num_post =
        graph_forward_backward(num, outputs, scale, Some(mask)).ok_or(MmiError::NumeratorEmpty)?;
    let den_post =
        graph_forward_backward(den, outputs, scale, None).ok_or(MmiError::DenominatorEmpty)?;
    let loss = MmiUttLoss {
        num_logz: num_post.logz,
        den_logz: den_post.logz,
    };
    let grad = num_post.gamma - den_post.gamma;
    Ok((loss, grad))
}

/// Map an input-rate alignment onto the model's output frames so that
/// every phone occurrence keeps at least one frame.
///
/// Plain center-sampling can drop short occurrences at the utterance
/// edges, where the model's receptive field eats input frames. Here each
/// occurrence's input end-boundary maps to the count of output-frame
/// centers before it, and the boundaries are then repaired to a strictly
/// increasing sequence covering all occurrences.
pub fn output_alignment(
    transcript: &[Phone],
    input_alignment: &[Phone],
    cfg: &crate::model::ModelConfig,
) -> Result<Vec<Phone>, MmiError> {
    let t_out = cfg
        .output_frames(input_alignment.len())
        .ok_or(ModelError::TooShortUtterance {
            min: cfg.min_input_frames(),
            got: input_alignment.len(),
        })?;
    let k = transcript.len();
    if k == 0 || k > t_out {
        return Err(MmiError::NoAlignment);
    }
    // Exclusive input end boundary per occurrence.
    let mut ends = Vec::with_capacity(k);
    let mut idx = 0usize;
    for &p in transcript {
        if idx >= input_alignment.len() || input_alignment[idx] != p {
            return Err(GraphError::AlignmentMismatch(format!(
                "alignment does not follow transcript at input frame {idx}"
            ))
            .into());
        }
        while idx < input_alignment.len() && input_alignment[idx] == p {
            idx += 1;
        }
        ends.push(idx);
    }
    if idx != input_alignment.len() {
        return Err(GraphError::AlignmentMismatch(
            "alignment continues past the transcript".into(),
        )
        .into());
    }

    let centers: Vec<usize> = (0..t_out)
        .map(|f| cfg.input_center(f, input_alignment.len()))
        .collect();
    // bounds[i] = exclusive output end of occurrence i.
    let mut bounds: Vec<usize> = ends
        .iter()
        .map(|&e| centers.partition_point(|&c| c < e))
        .collect();
    bounds[k - 1] = t_out;
    bounds[0] = bounds[0].max(1);
    for i in 1..k {
        if bounds[i] <= bounds[i - 1] {
            bounds[i] = bounds[i - 1] + 1;
        }
    }
    for i in (0..k).rev() {
        let cap = t_out - (k - 1 - i);
        bounds[i] = bounds[i].min(cap);
    }

    let mut out = Vec::with_capacity(t_out);
    let mut prev = 0usize;
    for (i, &p) in transcript.iter().enumerate() {
        out.extend(std::iter::repeat(p).take(bounds[i] - prev));
        prev = bounds[i];
    }
    debug_assert_eq!(out.len(), t_out);
    Ok(out)
}

/// Viterbi forced alignment of a transcript against model outputs: the
/// max-weight frame-level unit sequence through the forced-transcript
/// graph. Transition weights are constant across alignments, so acoustics
/// alone decide the boundaries.
pub fn align(
    model: &AcousticModel,
    features: &Array2<f32>,
    speaker: Option<&str>,
    transcript: &[Phone],
    lm: &PhoneNgramLM,
    phones: &PhoneSet,
) -> Result<Vec<Label>, MmiError> {
    let outputs = model.forward(features, speaker)?;
    let t_out = outputs.nrows();
    if transcript.is_empty() || transcript.len() > t_out {
        return Err(MmiError::NoAlignment);
    }
    // Build the forced graph via a trivial left-packed alignment; the mask
    // is discarded, only the graph matters here.
    let mut pad = Vec::with_capacity(t_out);
    for (i, &p) in transcript.iter().enumerate() {
        pad.push(p);
        if i == transcript.len() - 1 {
            while pad.len() < t_out {
                pad.push(p);
            }
        }
    }
    let (graph, _) = numerator_from_transcript(transcript, &pad, t_out, 0, lm, phones)?;
    viterbi_labels(&graph, &outputs, 1.0).ok_or(MmiError::NoAlignment)
}

/// Max-weight path labels through a graph under per-frame acoustic scores.
fn viterbi_labels(graph: &SearchGraph, acoustics: &Array2<f64>, scale: f64) -> Option<Vec<Label>> {
    let t_max = acoustics.nrows();
    let n = graph.num_states();
    let neg = f64::NEG_INFINITY;
    let mut score = vec![neg; (t_max + 1) * n];
    let mut back: Vec<u32> = vec![u32::MAX; (t_max + 1) * n];
    score[graph.start()] = 0.0;
    for t in 0..t_max {
        for (ai, a) in graph.arcs().iter().enumerate() {
            let base = score[t * n + a.src];
            if base == neg {
                continue;
            }
            let w = base + a.weight.value() + scale * acoustics[(t, a.label as usize - 1)];
            let slot = (t + 1) * n + a.dst;
            if w > score[slot] {
                score[slot] = w;
                back[slot] = ai as u32;
            }
        }
    }
    let mut best_state = None;
    let mut best = neg;
    for s in 0..n {
        let fw = graph.final_weight(s);
        if fw.is_zero() || score[t_max * n + s] == neg {
            continue;
        }
        let total = score[t_max * n + s] + fw.value();
        if total > best {
            best = total;
            best_state = Some(s);
        }
    }
    let mut s = best_state?;
    let mut labels = vec![0 as Label; t_max];
    for t in (0..t_max).rev() {
        let ai = back[(t + 1) * n + s];
        let a = &graph.arcs()[ai as usize];
        labels[t] = a.label;
        s = a.src;
    }
    Some(labels)
}

/// Knobs for LF-MMI training.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub initial_lr: f64,
    pub final_lr: f64,
    /// L2 strength on weight matrices (never on LHUC amplitudes).
    pub l2: f64,
    /// Numerator mask tolerance, in output frames.
    pub tolerance: usize,
    /// Train speaker-dependent LHUC vectors jointly with the shared model.
    pub sat_lhuc: bool,
    /// Probability of the speaker-independent pass under SAT-LHUC.
    pub si_prob: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 8,
            initial_lr: 0.04,
            final_lr: 0.004,
            l2: 1e-4,
            tolerance: 2,
            sat_lhuc: false,
            si_prob: 0.5,
            shuffle_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub utts: usize,
    pub num_logz: f64,
    pub den_logz: f64,
    /// Sum over utterances of `num_logz - den_logz`.
    pub objective: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    /// `epoch,utts,num_logZ,den_logZ,objective` rows.
    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "epoch,utts,num_logZ,den_logZ,objective")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{:.17e},{:.17e},{:.17e}",
                e.epoch, e.utts, e.num_logz, e.den_logz, e.objective
            )?;
        }
        Ok(())
    }
}

/// Minibatch (one utterance per step) SGD on the LF-MMI objective, with
/// supervision from the corpus transcripts and their generative alignments.
/// The output gradient is frame-normalized so step sizes do not scale with
/// utterance length. Leaves the model's `last_lr` at the final schedule
/// value for adaptation to pick up.
pub fn train(
    model: &mut AcousticModel,
    corpus: &Corpus,
    den: &SearchGraph,
    lm: &PhoneNgramLM,
    phones: &PhoneSet,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport, MmiError> {
    // Precompile per-utterance supervision. Alignments are downsampled to
    // the output rate at each utterance's own length.
    let cfg = model.config().clone();
    let mut supervision: Vec<(usize, SearchGraph, FrameMask)> = Vec::new();
    for (i, utt) in corpus.utterances.iter().enumerate() {
        let align = output_alignment(&utt.transcript, &utt.alignment, &cfg)?;
        let (graph, mask) = numerator_from_transcript(
            &utt.transcript,
            &align,
            align.len(),
            opts.tolerance,
            lm,
            phones,
        )?;
        supervision.push((i, graph, mask));
    }
    if opts.sat_lhuc {
        for spk in corpus.speakers() {
            model.init_speaker(spk);
        }
    }

    let total_iters = (opts.epochs * corpus.utterances.len()).max(1);
    let schedule = LrSchedule::new(opts.initial_lr, opts.final_lr, total_iters);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.shuffle_seed);
    let mut report = TrainReport::default();
    let mut iter = 0usize;
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..supervision.len()).collect();
        order.shuffle(&mut rng);
        let mut stats = EpochStats {
            epoch,
            utts: 0,
            num_logz: 0.0,
            den_logz: 0.0,
            objective: 0.0,
        };
        for &si in &order {
            let (ui, ref num_graph, ref mask) = supervision[si];
            let utt = &corpus.utterances[ui];
            let (speaker, selector) = if opts.sat_lhuc {
                match sat_lhuc_pass_selector(&mut rng, opts.si_prob) {
                    SatPass::Si => (None, ParamSelector::all()),
                    SatPass::Sd => (Some(utt.speaker.as_str()), ParamSelector::all()),
                }
            } else {
                (None, ParamSelector::weights_only())
            };
            let (trace, outputs) = model.forward_trace(&utt.features, speaker)?;
            let (loss, grad) = mmi_loss_and_grad(&outputs, num_graph, mask, den, 1.0)?;
            let t_out = outputs.nrows() as f64;
            // Maximizing the objective: the loss gradient is the negated,
            // frame-normalized occupancy difference.
            let grad_loss = grad.mapv(|g| -g / t_out);
            let grads = model.backward(&trace, &grad_loss, &selector)?;
            let lr = schedule.lr_at(iter);
            model.sgd_step(&grads, &selector, lr, opts.l2);
            model.set_last_lr(lr);
            iter += 1;
            stats.utts += 1;
            stats.num_logz += loss.num_logz;
            stats.den_logz += loss.den_logz;
            stats.objective += loss.objective();
        }
        if !stats.objective.is_finite() {
            return Err(MmiError::Diverged { epoch });
        }
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}

/// Compare analytic LF-MMI parameter gradients against central finite
/// differences of the objective, probing `probes` randomly chosen
/// parameters. Returns the maximum relative error observed.
#[allow(clippy::too_many_arguments)]
pub fn grad_check_end_to_end(
    model: &AcousticModel,
    features: &Array2<f32>,
    speaker: Option<&str>,
    num: &SearchGraph,
    mask: &FrameMask,
    den: &SearchGraph,
    selector: &ParamSelector,
    probes: usize,
    step: f64,
    probe_seed: u64,
) -> Result<f64, MmiError> {
    let objective = |m: &AcousticModel| -> Result<f64, MmiError> {
        let outputs = m.forward(features, speaker)?;
        let num_post = graph_forward_backward(num, &outputs, 1.0, Some(mask))
            .ok_or(MmiError::NumeratorEmpty)?;
        let den_post =
            graph_forward_backward(den, &outputs, 1.0, None).ok_or(MmiError::DenominatorEmpty)?;
        Ok(num_post.logz - den_post.logz)
    };

    let (trace, outputs) = model.forward_trace(features, speaker)?;
    let (_, grad_out) = mmi_loss_and_grad(&outputs, num, mask, den, 1.0)?;
    let grads = model.backward(&trace, &grad_out, selector)?;

    // Flatten the selected analytic gradients next to parameter pokes.
    type Poke = Box<dyn Fn(&mut AcousticModel, f64)>;
    let mut entries: Vec<(f64, Poke)> = Vec::new();
    if let Some(layer_grads) = &grads.layers {
        for (l, (dw, db)) in layer_grads.iter().enumerate() {
            for ((r, c), &g) in dw.indexed_iter() {
                entries.push((g, Box::new(move |m, eps| m.poke_weight(l, r, c, eps))));
            }
            for (k, &g) in db.indexed_iter() {
                entries.push((g, Box::new(move |m, eps| m.poke_bias(l, k, eps))));
            }
        }
    }
    if let Some(dw) = &grads.out_w {
        for ((r, c), &g) in dw.indexed_iter() {
            entries.push((g, Box::new(move |m, eps| m.poke_out_weight(r, c, eps))));
        }
    }
    if let Some(db) = &grads.out_b {
        for (k, &g) in db.indexed_iter() {
            entries.push((g, Box::new(move |m, eps| m.poke_out_bias(k, eps))));
        }
    }
    if let Some((target, lhuc)) = &grads.lhuc {
        for (l, v) in lhuc.iter().enumerate() {
            for (k, &g) in v.indexed_iter() {
                let target = target.clone();
                entries.push((g, Box::new(move |m, eps| m.poke_lhuc(&target, l, k, eps))));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let mut max_rel: f64 = 0.0;
    for _ in 0..probes {
        let (analytic, poke) = &entries[rng.gen_range(0..entries.len())];
        let mut up = model.clone();
        poke(&mut up, step);
        let mut down = model.clone();
        poke(&mut down, -step);
        let numeric = (objective(&up)? - objective(&down)?) / (2.0 * step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{
        compile_denominator, estimate_phone_lm, numerator_from_lattice, PhoneSet,
    };
    use crate::lattice::rescore_acoustics;
    use crate::model::{init_model, LayerSpec, ModelConfig};
    use ndarray::Array2;
    use rand::Rng;

    fn uniformish_lm(p: u32, order: usize) -> PhoneNgramLM {
        let t: Vec<Phone> = (0..60).map(|i| (i % p) + 1).collect();
        estimate_phone_lm(&[t], order, p).unwrap()
    }

    fn random_outputs(t: usize, u: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((t, u), |_| rng.gen_range(-1.5..1.5))
    }

    /// The frame-synchronous DP must agree with unrolling the graph into a
    /// lattice, rescoring it, and running the lattice forward-backward.
    #[test]
    fn graph_fb_matches_unrolled_lattice_fb() {
        let lm = uniformish_lm(3, 2);
        let ps = PhoneSet::new(3, 1).unwrap();
        let den = compile_denominator(&lm, &ps);
        for t in [1usize, 2, 5, 9] {
            let outputs = random_outputs(t, 3, t as u64);
            let dp = graph_forward_backward(&den, &outputs, 1.0, None).unwrap();
            let lat = den.unroll(t).unwrap();
            let scored = rescore_acoustics(&lat, &outputs, 1.0).unwrap();
            let post = scored.forward_backward().unwrap();
            assert!(
                (dp.logz - post.total_logz.value()).abs() < 1e-9,
                "t={t}: {} vs {}",
                dp.logz,
                post.total_logz.value()
            );
            for (f, marg) in post.frame_marginals.iter().enumerate() {
                for u in 1..=3u32 {
                    let lat_p = marg.get(&u).copied().unwrap_or(0.0);
                    assert!((dp.gamma[(f, u as usize - 1)] - lat_p).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn gamma_rows_sum_to_one() {
        let lm = uniformish_lm(4, 3);
        let ps = PhoneSet::new(4, 1).unwrap();
        let den = compile_denominator(&lm, &ps);
        let outputs = random_outputs(7, 4, 3);
        let dp = graph_forward_backward(&den, &outputs, 1.0, None).unwrap();
        for row in dp.gamma.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn num_equals_den_gives_zero_loss_and_grad() {
        let lm = uniformish_lm(3, 2);
        let ps = PhoneSet::new(3, 1).unwrap();
        let den = compile_denominator(&lm, &ps);
        let num = den.clone();
        let outputs = random_outputs(6, 3, 9);
        let mask = FrameMask::all(6, 3);
        let (loss, grad) = mmi_loss_and_grad(&outputs, &num, &mask, &den, 1.0).unwrap();
        assert!(loss.objective().abs() < 1e-12);
        assert!(grad.iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn masked_numerator_at_most_denominator() {
        let lm = uniformish_lm(3, 2);
        let ps = PhoneSet::new(3, 1).unwrap();
        let den = compile_denominator(&lm, &ps);
        let alignment: Vec<Phone> = vec![1, 1, 2, 2, 3, 3];
        for tol in 0..3 {
            let (num, mask) =
                numerator_from_transcript(&[1, 2, 3], &alignment, 6, tol, &lm, &ps).unwrap();
            let outputs = random_outputs(6, 3, 21);
            let (loss, grad) = mmi_loss_and_grad(&outputs, &num, &mask, &den, 1.0).unwrap();
            assert!(loss.objective() <= 1e-9, "tol {tol}: {}", loss.objective());
            for row in grad.rows() {
                assert!(row.sum().abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mask_monotonicity_in_tolerance() {
        let lm = uniformish_lm(3, 2);
        let ps = PhoneSet::new(3, 1).unwrap();
        let alignment: Vec<Phone> = vec![1, 1, 2, 2, 3, 3];
        let outputs = random_outputs(6, 3, 33);
        let mut prev = f64::NEG_INFINITY;
        for tol in 0..4 {
            let (num, mask) =
                numerator_from_transcript(&[1, 2, 3], &alignment, 6, tol, &lm, &ps).unwrap();
            let post = graph_forward_backward(&num, &outputs, 1.0, Some(&mask)).unwrap();
            assert!(
                post.logz >= prev - 1e-12,
                "tolerance {tol} decreased numerator logz"
            );
            prev = post.logz;
        }
    }

    #[test]
    fn impossible_mask_is_numerator_empty() {
        let lm = uniformish_lm(3, 2);
        let ps = PhoneSet::new(3, 1).unwrap();
        let den = compile_denominator(&lm, &ps);
        let alignment: Vec<Phone> = vec![1, 1, 2, 2, 3, 3];
        let (num, _) = numerator_from_transcript(&[1, 2, 3], &alignment, 6, 0, &lm, &ps).unwrap();
        // A mask allowing only phone 1 kills every complete path.
        let mut mask = FrameMask::new(6, 3);
        for f in 0..6 {
            mask.allow(f, 1);
        }
        let outputs = random_outputs(6, 3, 5);
        assert!(matches!(
            mmi_loss_and_grad(&outputs, &num, &mask, &den, 1.0),
            Err(MmiError::NumeratorEmpty)
        ));
    }

    /// Brute-force enumeration oracle on a tiny system: objective equals
    /// the log-ratio of summed path probabilities.
    #[test]
    fn desk_scale_objective_matches_enumeration() {
        let lm = uniformish_lm(2, 2);
        let ps = PhoneSet::new(2, 1).unwrap();
        let den = compile_denominator(&lm, &ps);
        let t = 4;
        let outputs = random_outputs(t, 2, 77);
        let alignment: Vec<Phone> = vec![1, 1, 2, 2];
        let (num, mask) = numerator_from_transcript(&[1, 2], &alignment, t, 1, &lm, &ps).unwrap();

        fn enumerate(
            g: &SearchGraph,
            outputs: &Array2<f64>,
            mask: Option<&FrameMask>,
            t_max: usize,
        ) -> f64 {
            #[allow(clippy::too_many_arguments)]
            fn rec(
                g: &SearchGraph,
                outputs: &Array2<f64>,
                mask: Option<&FrameMask>,
                s: usize,
                t: usize,
                t_max: usize,
                acc: f64,
                total: &mut f64,
            ) {
                if t == t_max {
                    if !g.final_weight(s).is_zero() {
                        *total = log_add(*total, acc + g.final_weight(s).value());
                    }
                    return;
                }
                for a in g.arcs().iter().filter(|a| a.src == s) {
                    if mask.is_some_and(|m| !m.is_allowed(t, a.label)) {
                        continue;
                    }
                    let w = a.weight.value() + outputs[(t, a.label as usize - 1)];
                    rec(g, outputs, mask, a.dst, t + 1, t_max, acc + w, total);
                }
            }
            let mut total = f64::NEG_INFINITY;
            rec(g, outputs, mask, g.start(), 0, t_max, 0.0, &mut total);
            total
        }

        let num_brute = enumerate(&num, &outputs, Some(&mask), t);
        let den_brute = enumerate(&den, &outputs, None, t);
        let (loss, _) = mmi_loss_and_grad(&outputs, &num, &mask, &den, 1.0).unwrap();
        assert!((loss.num_logz - num_brute).abs() < 1e-8);
        assert!((loss.den_logz - den_brute).abs() < 1e-8);
        assert!((loss.objective() - (num_brute - den_brute)).abs() < 1e-8);
    }

    fn toy_model(seed: u64, num_units: usize) -> AcousticModel {
        init_model(ModelConfig {
            input_dim: 4,
            hidden_dims: vec![6, 5],
            splices: vec![LayerSpec::new(vec![-1, 0, 1], 1), LayerSpec::new(vec![0], 1)],
            num_units,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn end_to_end_gradient_check() {
        let lm = uniformish_lm(3, 2);
        let ps = PhoneSet::new(3, 1).unwrap();
        let den = compile_denominator(&lm, &ps);
        let mut model = toy_model(5, 3);
        model.init_speaker("s0");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let features = Array2::from_shape_fn((9, 4), |_| rng.gen_range(-1.0f32..1.0));
        let t_out = model.config().output_frames(9).unwrap();
        let alignment: Vec<Phone> = (0..t_out)
            .map(|f| if f < t_out / 2 { 1 } else { 2 })
            .collect();
        let (num, mask) =
            numerator_from_transcript(&[1, 2], &alignment, t_out, 1, &lm, &ps).unwrap();

        let err_all = grad_check_end_to_end(
            &model,
            &features,
            Some("s0"),
            &num,
            &mask,
            &den,
            &ParamSelector::all(),
            120,
            1e-4,
            99,
        )
        .unwrap();
        assert!(err_all < 1e-3, "ALL max rel err {err_all}");

        let err_lhuc = grad_check_end_to_end(
            &model,
            &features,
            Some("s0"),
            &num,
            &mask,
            &den,
            &ParamSelector::lhuc_only(),
            60,
            1e-4,
            100,
        )
        .unwrap();
        assert!(err_lhuc < 1e-3, "LHUC max rel err {err_lhuc}");
    }

    #[test]
    fn zero_output_model_gives_prior_occupancies() {
        let lm = uniformish_lm(3, 2);
        let ps = PhoneSet::new(3, 1).unwrap();
        let den = compile_denominator(&lm, &ps);
        let t = 5;
        let zeros = Array2::zeros((t, 3));
        let alignment: Vec<Phone> = vec![1, 1, 2, 2, 2];
        let (num, mask) = numerator_from_transcript(&[1, 2], &alignment, t, 1, &lm, &ps).unwrap();
        let (_, grad) = mmi_loss_and_grad(&zeros, &num, &mask, &den, 1.0).unwrap();
        let num_post = graph_forward_backward(&num, &zeros, 1.0, Some(&mask)).unwrap();
        let den_post = graph_forward_backward(&den, &zeros, 1.0, None).unwrap();
        let expect = num_post.gamma - den_post.gamma;
        for (a, b) in grad.iter().zip(expect.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn forced_alignment_single_phone_and_boundaries() {
        let lm = uniformish_lm(2, 2);
        let ps = PhoneSet::new(2, 1).unwrap();
        let model = toy_model(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let features = Array2::from_shape_fn((11, 4), |_| rng.gen_range(-1.0f32..1.0));
        let t_out = model.config().output_frames(11).unwrap();

        let labels = align(&model, &features, None, &[1], &lm, &ps).unwrap();
        assert_eq!(labels.len(), t_out);
        assert!(labels.iter().all(|&u| u == ps.unit(1, 0)));

        let labels = align(&model, &features, None, &[1, 2], &lm, &ps).unwrap();
        assert_eq!(labels.len(), t_out);
        assert_eq!(ps.collapse_units(&labels), vec![1, 2]);

        // Too many phones for the frames available.
        let long: Vec<Phone> = (0..t_out as u32 + 1).map(|i| (i % 2) + 1).collect();
        assert!(matches!(
            align(&model, &features, None, &long, &lm, &ps),
            Err(MmiError::NoAlignment)
        ));
    }

    #[test]
    fn output_alignment_covers_every_occurrence() {
        use crate::corpus::{generate, GeneratorConfig};
        let cfg = crate::model::ModelConfig::desk_default(20, 12, 0);
        let gen_cfg = GeneratorConfig {
            train_speakers: 4,
            test_speakers: 1,
            train_utts_per_speaker: 10,
            test_utts_per_speaker: 1,
            ..GeneratorConfig::default()
        };
        let (train_c, _) = generate(&gen_cfg).unwrap();
        for utt in &train_c.utterances {
            let out = output_alignment(&utt.transcript, &utt.alignment, &cfg).unwrap();
            assert_eq!(out.len(), cfg.output_frames(utt.alignment.len()).unwrap());
            // Collapsed occurrences equal the transcript, with every phone
            // keeping at least one frame.
            let mut collapsed = Vec::new();
            for &p in &out {
                if collapsed.last() != Some(&p) {
                    collapsed.push(p);
                }
            }
            assert_eq!(collapsed, utt.transcript, "utt {}", utt.id);
        }
    }

    /// The generator's alignments are always a valid mask source: at
    /// tolerance zero the masked numerator still admits its own path.
    #[test]
    fn generative_alignment_never_empties_numerator() {
        use crate::corpus::{generate, GeneratorConfig};
        let model_cfg = crate::model::ModelConfig::desk_default(20, 12, 77);
        let gen_cfg = GeneratorConfig {
            train_speakers: 3,
            test_speakers: 1,
            train_utts_per_speaker: 8,
            test_utts_per_speaker: 1,
            ..GeneratorConfig::default()
        };
        let (train_c, _) = generate(&gen_cfg).unwrap();
        let transcripts: Vec<Vec<Phone>> = train_c
            .utterances
            .iter()
            .map(|u| u.transcript.clone())
            .collect();
        let lm = estimate_phone_lm(&transcripts, 3, 12).unwrap();
        let ps = PhoneSet::new(12, 1).unwrap();
        for utt in &train_c.utterances {
            let align = output_alignment(&utt.transcript, &utt.alignment, &model_cfg).unwrap();
            let (num, mask) = numerator_from_transcript(
                &utt.transcript,
                &align,
                align.len(),
                0,
                &lm,
                &ps,
            )
            .unwrap();
            let zeros = Array2::zeros((align.len(), 12));
            assert!(
                graph_forward_backward(&num, &zeros, 1.0, Some(&mask)).is_some(),
                "utt {} emptied its own numerator",
                utt.id
            );
        }
    }

    #[test]
    fn lattice_numerator_loss_is_nonpositive_against_den() {
        // Supervision built from an unrolled piece of the denominator keeps
        // its graph scores, so the subset bound holds exactly.
        let lm = uniformish_lm(3, 2);
        let ps = PhoneSet::new(3, 1).unwrap();
        let den = compile_denominator(&lm, &ps);
        let t = 6;
        let outputs = random_outputs(t, 3, 13);
        let lat = den.unroll(t).unwrap();
        let scored = rescore_acoustics(&lat, &outputs, 1.0).unwrap();
        let pruned = scored.prune(2.0).unwrap();
        let (num, mask) = numerator_from_lattice(&pruned, 1, ps.num_units()).unwrap();
        let (loss, _) = mmi_loss_and_grad(&outputs, &num, &mask, &den, 1.0).unwrap();
        assert!(loss.objective() <= 1e-9);
    }
}
