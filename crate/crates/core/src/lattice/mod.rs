//! Acyclic weighted lattices and the semiring algorithms on them.
//!
//! A [`Lattice`] encodes alternative label sequences for one utterance as a
//! DAG whose arcs carry a label, a time index, and two natural-log scores
//! (graph and acoustic). All start-to-final paths traverse the same number
//! of arcs, one per output frame, so per-frame label marginals are well
//! defined. Lattices are immutable after construction; every operation here
//! is a pure function.

mod io;
mod weight;

pub use io::{read_lattice, write_lattice};
pub use weight::{log_add, LogWeight};

use std::collections::BTreeMap;

use thiserror::Error;

/// State index within a lattice. States are contiguous from 0.
pub type StateId = usize;

/// Output-unit label on an arc. Labels are >= 1; 0 is reserved for epsilon
/// and never appears in a lattice.
pub type Label = u32;

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("lattice contains a cycle")]
    CycleDetected,
    #[error("malformed lattice: {0}")]
    MalformedLattice(String),
    #[error("lattice parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One weighted, labeled, time-indexed transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeArc {
    pub src: StateId,
    pub dst: StateId,
    pub label: Label,
    /// Time index at the model output rate; equals the frame depth of `src`.
    pub frame: usize,
    pub graph_weight: LogWeight,
    pub acoustic_weight: LogWeight,
}

impl LatticeArc {
    /// Total arc weight: graph and acoustic scores summed.
    #[inline]
    pub fn weight(&self) -> LogWeight {
        self.graph_weight + self.acoustic_weight
    }
}

/// Time-synchronous acyclic lattice with one start and one final state.
///
/// Invariants, enforced at construction:
/// - states are contiguous, with exactly one start and one final state;
/// - the arc set is acyclic and every state lies on a start-to-final path;
/// - every arc advances exactly one frame, `arc.frame` equals the frame
///   depth of its source state, and all complete paths span `num_frames`
///   arcs with non-epsilon labels.
#[derive(Debug, Clone)]
pub struct Lattice {
    num_states: usize,
    start: StateId,
    final_state: StateId,
    arcs: Vec<LatticeArc>,
    num_frames: usize,
    /// Frame depth per state; depth(start) = 0, depth(final) = num_frames.
    depths: Vec<usize>,
}

/// Forward-backward output: per-arc posteriors, per-frame label marginals,
/// and the total log partition over all paths.
#[derive(Debug, Clone)]
pub struct PosteriorTable {
    /// Posterior probability per arc, parallel to `Lattice::arcs`.
    pub arc_posteriors: Vec<f64>,
    /// For each frame, label -> total posterior mass at that frame.
    pub frame_marginals: Vec<BTreeMap<Label, f64>>,
    /// Log-sum over all start-to-final paths of the total path weight.
    pub total_logz: LogWeight,
}

impl Lattice {
    /// Validate and build a lattice. Arcs may be given in any order.
    pub fn new(
        num_states: usize,
        start: StateId,
        final_state: StateId,
        arcs: Vec<LatticeArc>,
        num_frames: usize,
    ) -> Result<Self, LatticeError> {
        if num_states == 0 {
            return Err(LatticeError::MalformedLattice("no states".into()));
        }
        if start >= num_states || final_state >= num_states {
            return Err(LatticeError::MalformedLattice(
                "start/final state out of range".into(),
            ));
        }
        for (i, a) in arcs.iter().enumerate() {
            if a.src >= num_states || a.dst >= num_states {
                return Err(LatticeError::MalformedLattice(format!(
                    "arc {i} references state out of range"
                )));
            }
            if a.label == 0 {
                return Err(LatticeError::MalformedLattice(format!(
                    "arc {i} carries epsilon label"
                )));
            }
        }
        if num_frames == 0 && start != final_state {
            return Err(LatticeError::MalformedLattice(
                "zero frames but start != final".into(),
            ));
        }

        let lat = Lattice {
            num_states,
            start,
            final_state,
            arcs,
            num_frames,
            depths: Vec::new(),
        };
        let order = lat.topo_order()?;
        lat.validate_connectivity_and_frames(&order)
    }

    fn validate_connectivity_and_frames(
        mut self,
        order: &[StateId],
    ) -> Result<Self, LatticeError> {
        let n = self.num_states;
        let by_src = self.arcs_by_src();
        // Reachability from start and co-reachability from final.
        let mut fwd = vec![false; n];
        fwd[self.start] = true;
        for &s in order {
            if !fwd[s] {
                continue;
            }
            for &ai in &by_src[s] {
                fwd[self.arcs[ai].dst] = true;
            }
        }
        let mut bwd = vec![false; n];
        bwd[self.final_state] = true;
        let mut by_dst: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, a) in self.arcs.iter().enumerate() {
            by_dst[a.dst].push(i);
        }
        for &s in order.iter().rev() {
            if !bwd[s] {
                continue;
            }
            for &ai in &by_dst[s] {
                bwd[self.arcs[ai].src] = true;
            }
        }
        if let Some(s) = (0..n).find(|&s| !(fwd[s] && bwd[s])) {
            return Err(LatticeError::MalformedLattice(format!(
                "state {s} is not on any start-to-final path"
            )));
        }

        // Frame depths: every arc advances exactly one frame.
        let mut depth = vec![usize::MAX; n];
        depth[self.start] = 0;
        for &s in order {
            let d = depth[s];
            if d == usize::MAX {
                return Err(LatticeError::MalformedLattice(format!(
                    "state {s} unreachable in depth pass"
                )));
            }
            for &ai in &by_src[s] {
                let a = &self.arcs[ai];
                if a.frame != d {
                    return Err(LatticeError::MalformedLattice(format!(
                        "arc {}->{} has frame {} but source depth {}",
                        a.src, a.dst, a.frame, d
                    )));
                }
                if depth[a.dst] == usize::MAX {
                    depth[a.dst] = d + 1;
                } else if depth[a.dst] != d + 1 {
                    return Err(LatticeError::MalformedLattice(format!(
                        "state {} reachable at frame depths {} and {}",
                        a.dst,
                        depth[a.dst],
                        d + 1
                    )));
                }
            }
        }
        if depth[self.final_state] != self.num_frames {
            return Err(LatticeError::MalformedLattice(format!(
                "final state at depth {} but num_frames is {}",
                depth[self.final_state], self.num_frames
            )));
        }
        self.depths = depth;
        Ok(self)
    }

    /// Build a linear (single-path) lattice from a label/weight sequence.
    pub fn linear(
        arcs: impl IntoIterator<Item = (Label, LogWeight, LogWeight)>,
    ) -> Result<Self, LatticeError> {
        let arcs: Vec<LatticeArc> = arcs
            .into_iter()
            .enumerate()
            .map(|(i, (label, gw, aw))| LatticeArc {
                src: i,
                dst: i + 1,
                label,
                frame: i,
                graph_weight: gw,
                acoustic_weight: aw,
            })
            .collect();
        let n = arcs.len();
        Lattice::new(n + 1, 0, n, arcs, n)
    }

    #[inline]
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    #[inline]
    pub fn start(&self) -> StateId {
        self.start
    }
    #[inline]
    pub fn final_state(&self) -> StateId {
        self.final_state
    }
    #[inline]
    pub fn arcs(&self) -> &[LatticeArc] {
        &self.arcs
    }
    #[inline]
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }
    /// Frame depth of a state (0 at start, `num_frames` at final).
    #[inline]
    pub fn frame_depth(&self, s: StateId) -> usize {
        self.depths[s]
    }

    /// Whether the lattice is a single chain (at most one arc per frame).
    pub fn is_linear(&self) -> bool {
        self.arcs.len() == self.num_frames
    }

    /// Label sequence along a linear lattice, in frame order.
    pub fn labels(&self) -> Vec<Label> {
        let mut arcs: Vec<&LatticeArc> = self.arcs.iter().collect();
        arcs.sort_by_key(|a| a.frame);
        arcs.iter().map(|a| a.label).collect()
    }

    /// Topological order of states: start first, final last, every arc from
    /// earlier to later. Kahn's algorithm; errors on cycles or on a missing
    /// unique start/final.
    pub fn topo_order(&self) -> Result<Vec<StateId>, LatticeError> {
        let n = self.num_states;
        let mut indeg = vec![0usize; n];
        let mut out: Vec<Vec<StateId>> = vec![Vec::new(); n];
        for a in &self.arcs {
            indeg[a.dst] += 1;
            out[a.src].push(a.dst);
        }
        if indeg[self.start] != 0 {
            return Err(LatticeError::MalformedLattice(
                "start state has incoming arcs".into(),
            ));
        }
        if out[self.final_state].iter().next().is_some() {
            return Err(LatticeError::MalformedLattice(
                "final state has outgoing arcs".into(),
            ));
        }
        // Smallest-id-first queue keeps the order deterministic.
        let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<StateId>> = (0..n)
            .filter(|&s| indeg[s] == 0)
            .map(std::cmp::Reverse)
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(std::cmp::Reverse(s)) = ready.pop() {
            order.push(s);
            for &d in &out[s] {
                indeg[d] -= 1;
                if indeg[d] == 0 {
                    ready.push(std::cmp::Reverse(d));
                }
            }
        }
        if order.len() != n {
            return Err(LatticeError::CycleDetected);
        }
        Ok(order)
    }

    /// Log-semiring forward scores per state: log-sum over all start-to-state
    /// paths of the total path weight.
    fn forward_scores(&self, order: &[StateId]) -> Vec<f64> {
        let mut alpha = vec![f64::NEG_INFINITY; self.num_states];
        alpha[self.start] = 0.0;
        let by_src = self.arcs_by_src();
        for &s in order {
            if alpha[s] == f64::NEG_INFINITY {
                continue;
            }
            for &ai in &by_src[s] {
                let a = &self.arcs[ai];
                let w = alpha[s] + a.weight().value();
                alpha[a.dst] = log_add(alpha[a.dst], w);
            }
        }
        alpha
    }

    fn backward_scores(&self, order: &[StateId]) -> Vec<f64> {
        let mut beta = vec![f64::NEG_INFINITY; self.num_states];
        beta[self.final_state] = 0.0;
        let by_src = self.arcs_by_src();
        for &s in order.iter().rev() {
            for &ai in &by_src[s] {
                let a = &self.arcs[ai];
                if beta[a.dst] == f64::NEG_INFINITY {
                    continue;
                }
                let w = a.weight().value() + beta[a.dst];
                beta[s] = log_add(beta[s], w);
            }
        }
        beta
    }

    fn arcs_by_src(&self) -> Vec<Vec<usize>> {
        let mut by_src: Vec<Vec<usize>> = vec![Vec::new(); self.num_states];
        for (i, a) in self.arcs.iter().enumerate() {
            by_src[a.src].push(i);
        }
        by_src
    }

    /// Log-semiring forward-backward: total log partition, per-arc
    /// posteriors, and per-frame label marginals.
    pub fn forward_backward(&self) -> Result<PosteriorTable, LatticeError> {
        let order = self.topo_order()?;
        let alpha = self.forward_scores(&order);
        let beta = self.backward_scores(&order);
        let logz = alpha[self.final_state];
        if logz == f64::NEG_INFINITY {
            return Err(LatticeError::MalformedLattice(
                "no start-to-final path has finite weight".into(),
            ));
        }
        let mut arc_posteriors = Vec::with_capacity(self.arcs.len());
        let mut frame_marginals: Vec<BTreeMap<Label, f64>> =
            vec![BTreeMap::new(); self.num_frames];
        for a in &self.arcs {
            let lp = alpha[a.src] + a.weight().value() + beta[a.dst] - logz;
            let p = lp.exp().min(1.0);
            arc_posteriors.push(p);
            *frame_marginals[a.frame].entry(a.label).or_insert(0.0) += p;
        }
        Ok(PosteriorTable {
            arc_posteriors,
            frame_marginals,
            total_logz: LogWeight::new(logz),
        })
    }

    /// Max-weight path under the tropical semiring (sum of per-arc total
    /// weights), returned as a linear lattice. Ties are broken toward the
    /// smaller destination state id at each relaxation.
    pub fn best_path(&self) -> Result<Lattice, LatticeError> {
        let order = self.topo_order()?;
        let (score, back) = self.viterbi(&order);
        if score[self.final_state] == f64::NEG_INFINITY {
            return Err(LatticeError::MalformedLattice(
                "no start-to-final path has finite weight".into(),
            ));
        }
        let mut rev = Vec::new();
        let mut s = self.final_state;
        while s != self.start {
            let ai = back[s].expect("backpointer chain broken");
            rev.push(self.arcs[ai]);
            s = self.arcs[ai].src;
        }
        rev.reverse();
        Lattice::linear(
            rev.iter()
                .map(|a| (a.label, a.graph_weight, a.acoustic_weight)),
        )
    }

    /// Tropical forward pass with backpointers. Processing states in
    /// topological order and arcs in increasing dst order makes the
    /// smallest-dst tie-break deterministic.
    fn viterbi(&self, order: &[StateId]) -> (Vec<f64>, Vec<Option<usize>>) {
        let mut score = vec![f64::NEG_INFINITY; self.num_states];
        let mut back: Vec<Option<usize>> = vec![None; self.num_states];
        score[self.start] = 0.0;
        let by_src = self.arcs_by_src();
        for &s in order {
            if score[s] == f64::NEG_INFINITY {
                continue;
            }
            for &ai in &by_src[s] {
                let a = &self.arcs[ai];
                let w = score[s] + a.weight().value();
                let better = w > score[a.dst]
                    || (w == score[a.dst]
                        && back[a.dst].is_some_and(|prev| a.src < self.arcs[prev].src));
                if better {
                    score[a.dst] = w;
                    back[a.dst] = Some(ai);
                }
            }
        }
        (score, back)
    }

    fn viterbi_backward(&self, order: &[StateId]) -> Vec<f64> {
        let mut score = vec![f64::NEG_INFINITY; self.num_states];
        score[self.final_state] = 0.0;
        let by_src = self.arcs_by_src();
        for &s in order.iter().rev() {
            for &ai in &by_src[s] {
                let a = &self.arcs[ai];
                if score[a.dst] == f64::NEG_INFINITY {
                    continue;
                }
                let w = a.weight().value() + score[a.dst];
                if w > score[s] {
                    score[s] = w;
                }
            }
        }
        score
    }

    /// Keep exactly the arcs lying on some path whose total weight is within
    /// `beam` of the best path, then re-trim so every surviving state is on
    /// a start-to-final path. A small slack absorbs floating-point
    /// non-associativity so that the best path itself always survives.
    pub fn prune(&self, beam: f64) -> Result<Lattice, LatticeError> {
        assert!(beam >= 0.0, "prune beam must be nonnegative");
        let order = self.topo_order()?;
        let (fwd, _) = self.viterbi(&order);
        let bwd = self.viterbi_backward(&order);
        let best = fwd[self.final_state];
        if best == f64::NEG_INFINITY {
            return Err(LatticeError::MalformedLattice(
                "no start-to-final path has finite weight".into(),
            ));
        }
        let slack = 1e-9 * (1.0 + best.abs());
        let threshold = best - beam - slack;
        let keep: Vec<&LatticeArc> = self
            .arcs
            .iter()
            .filter(|a| fwd[a.src] + a.weight().value() + bwd[a.dst] >= threshold)
            .collect();

        // Renumber surviving states, keeping original id order.
        let mut used = vec![false; self.num_states];
        used[self.start] = true;
        used[self.final_state] = true;
        for a in &keep {
            used[a.src] = true;
            used[a.dst] = true;
        }
        let mut remap = vec![usize::MAX; self.num_states];
        let mut next = 0;
        for (s, &u) in used.iter().enumerate() {
            if u {
                remap[s] = next;
                next += 1;
            }
        }
        let arcs = keep
            .iter()
            .map(|a| LatticeArc {
                src: remap[a.src],
                dst: remap[a.dst],
                ..**a
            })
            .collect();
        Lattice::new(
            next,
            remap[self.start],
            remap[self.final_state],
            arcs,
            self.num_frames,
        )
    }

    /// Mean forward-backward posterior over the arcs of the best path. A
    /// linear lattice scores exactly 1.
    pub fn confidence(&self) -> Result<f64, LatticeError> {
        if self.num_frames == 0 {
            return Ok(1.0);
        }
        let post = self.forward_backward()?;
        let order = self.topo_order()?;
        let (_, back) = self.viterbi(&order);
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut s = self.final_state;
        while s != self.start {
            let ai = back[s].expect("backpointer chain broken");
            sum += post.arc_posteriors[ai];
            count += 1;
            s = self.arcs[ai].src;
        }
        debug_assert_eq!(count, self.num_frames);
        Ok(sum / count as f64)
    }
}

/// Replace every arc's acoustic weight with `scale * scores[frame][label-1]`,
/// leaving graph weights alone. Used to compose unrolled graphs or decoded
/// lattices with fresh model outputs.
pub fn rescore_acoustics(
    lat: &Lattice,
    scores: &ndarray::Array2<f64>,
    scale: f64,
) -> Result<Lattice, LatticeError> {
    if scores.nrows() != lat.num_frames() {
        return Err(LatticeError::MalformedLattice(format!(
            "scores cover {} frames, lattice spans {}",
            scores.nrows(),
            lat.num_frames()
        )));
    }
    let arcs = lat
        .arcs()
        .iter()
        .map(|a| LatticeArc {
            acoustic_weight: LogWeight::new(scale * scores[(a.frame, a.label as usize - 1)]),
            ..*a
        })
        .collect();
    Lattice::new(
        lat.num_states(),
        lat.start(),
        lat.final_state(),
        arcs,
        lat.num_frames(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(x: f64) -> LogWeight {
        LogWeight::new(x)
    }

    /// Two parallel single-arc paths with the given total weights.
    fn two_path(w_a: f64, w_b: f64) -> Lattice {
        Lattice::new(
            2,
            0,
            1,
            vec![
                LatticeArc {
                    src: 0,
                    dst: 1,
                    label: 1,
                    frame: 0,
                    graph_weight: w(w_a),
                    acoustic_weight: w(0.0),
                },
                LatticeArc {
                    src: 0,
                    dst: 1,
                    label: 2,
                    frame: 0,
                    graph_weight: w(w_b),
                    acoustic_weight: w(0.0),
                },
            ],
            1,
        )
        .unwrap()
    }

    #[test]
    fn topo_order_chain() {
        let lat = Lattice::linear([(1, w(0.0), w(0.0)), (2, w(0.0), w(0.0))]).unwrap();
        assert_eq!(lat.topo_order().unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn topo_order_diamond() {
        let mk = |src, dst, frame, label| LatticeArc {
            src,
            dst,
            label,
            frame,
            graph_weight: w(0.0),
            acoustic_weight: w(0.0),
        };
        let lat = Lattice::new(
            4,
            0,
            3,
            vec![mk(0, 1, 0, 1), mk(0, 2, 0, 2), mk(1, 3, 1, 1), mk(2, 3, 1, 2)],
            2,
        )
        .unwrap();
        let order = lat.topo_order().unwrap();
        assert_eq!(order[0], 0);
        assert_eq!(order[3], 3);
    }

    #[test]
    fn cycle_detected() {
        // Constructor rejects a back edge; exercise topo_order through a
        // hand-built value to hit the CycleDetected path.
        let mk = |src, dst, frame| LatticeArc {
            src,
            dst,
            label: 1,
            frame,
            graph_weight: w(0.0),
            acoustic_weight: w(0.0),
        };
        let lat = Lattice {
            num_states: 3,
            start: 0,
            final_state: 2,
            arcs: vec![mk(0, 1, 0), mk(1, 0, 1), mk(1, 2, 1)],
            num_frames: 2,
            depths: vec![],
        };
        assert!(matches!(
            lat.topo_order(),
            Err(LatticeError::CycleDetected) | Err(LatticeError::MalformedLattice(_))
        ));
    }

    #[test]
    fn constructor_rejects_dangling_state() {
        let arc = LatticeArc {
            src: 0,
            dst: 1,
            label: 1,
            frame: 0,
            graph_weight: w(0.0),
            acoustic_weight: w(0.0),
        };
        // State 2 is not on any path.
        let err = Lattice::new(3, 0, 1, vec![arc], 1).unwrap_err();
        assert!(matches!(err, LatticeError::MalformedLattice(_)));
    }

    #[test]
    fn constructor_rejects_frame_skew() {
        // Second arc claims frame 0 but its source sits at depth 1.
        let mk = |src, dst, frame| LatticeArc {
            src,
            dst,
            label: 1,
            frame,
            graph_weight: w(0.0),
            acoustic_weight: w(0.0),
        };
        let err = Lattice::new(3, 0, 2, vec![mk(0, 1, 0), mk(1, 2, 0)], 2).unwrap_err();
        assert!(matches!(err, LatticeError::MalformedLattice(_)));
    }

    #[test]
    fn forward_backward_two_paths() {
        let lat = two_path(0.3f64.ln(), 0.7f64.ln());
        let post = lat.forward_backward().unwrap();
        assert!(post.total_logz.value().abs() < 1e-12);
        assert!((post.arc_posteriors[0] - 0.3).abs() < 1e-12);
        assert!((post.arc_posteriors[1] - 0.7).abs() < 1e-12);
        let m = &post.frame_marginals[0];
        assert!((m[&1] - 0.3).abs() < 1e-12);
        assert!((m[&2] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn forward_backward_linear_all_ones() {
        let lat = Lattice::linear([
            (3, w(-1.2), w(0.4)),
            (5, w(-0.3), w(-2.0)),
            (3, w(0.0), w(-0.5)),
        ])
        .unwrap();
        let post = lat.forward_backward().unwrap();
        for p in &post.arc_posteriors {
            assert!((p - 1.0).abs() < 1e-12);
        }
        let total: f64 = lat.arcs().iter().map(|a| a.weight().value()).sum();
        assert!((post.total_logz.value() - total).abs() < 1e-12);
    }

    #[test]
    fn best_path_two_paths() {
        let lat = two_path(0.3f64.ln(), 0.7f64.ln());
        let best = lat.best_path().unwrap();
        assert_eq!(best.labels(), vec![2]);
        let lat2 = lat.best_path().unwrap().best_path().unwrap();
        assert_eq!(lat2.labels(), vec![2]);
    }

    #[test]
    fn prune_beam_zero_keeps_best_only() {
        let lat = two_path(0.3f64.ln(), 0.7f64.ln());
        let pruned = lat.prune(0.0).unwrap();
        assert_eq!(pruned.arcs().len(), 1);
        assert_eq!(pruned.labels(), vec![2]);
    }

    #[test]
    fn prune_gap_two() {
        // Path weights differ by exactly 2.0.
        let lat = two_path(-1.0, -3.0);
        assert_eq!(lat.prune(1.0).unwrap().arcs().len(), 1);
        assert_eq!(lat.prune(3.0).unwrap().arcs().len(), 2);
    }

    #[test]
    fn prune_infinite_beam_is_identity() {
        let lat = two_path(0.3f64.ln(), 0.7f64.ln());
        let pruned = lat.prune(f64::INFINITY).unwrap();
        assert_eq!(pruned.arcs().len(), lat.arcs().len());
        assert_eq!(pruned.num_states(), lat.num_states());
    }

    #[test]
    fn confidence_linear_is_one() {
        let lat = Lattice::linear([(1, w(-5.0), w(1.0)), (2, w(0.0), w(0.0))]).unwrap();
        assert!((lat.confidence().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confidence_two_paths() {
        let lat = two_path(0.3f64.ln(), 0.7f64.ln());
        assert!((lat.confidence().unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn acoustic_shift_preserves_posteriors_and_best_path() {
        let mk = |src, dst, frame, label, gw: f64, aw: f64| LatticeArc {
            src,
            dst,
            label,
            frame,
            graph_weight: w(gw),
            acoustic_weight: w(aw),
        };
        let lat = Lattice::new(
            4,
            0,
            3,
            vec![
                mk(0, 1, 0, 1, -0.2, -1.0),
                mk(0, 2, 0, 2, -0.9, -0.1),
                mk(1, 3, 1, 3, -0.5, -0.3),
                mk(2, 3, 1, 4, -0.4, -0.8),
            ],
            2,
        )
        .unwrap();
        let c = 2.5;
        let shifted = Lattice::new(
            4,
            0,
            3,
            lat.arcs()
                .iter()
                .map(|a| LatticeArc {
                    acoustic_weight: a.acoustic_weight + w(c),
                    ..*a
                })
                .collect(),
            2,
        )
        .unwrap();
        let p0 = lat.forward_backward().unwrap();
        let p1 = shifted.forward_backward().unwrap();
        for (a, b) in p0.arc_posteriors.iter().zip(&p1.arc_posteriors) {
            assert!((a - b).abs() < 1e-9);
        }
        let dz = p1.total_logz.value() - p0.total_logz.value();
        assert!((dz - c * lat.num_frames() as f64).abs() < 1e-9);
        assert_eq!(
            lat.best_path().unwrap().labels(),
            shifted.best_path().unwrap().labels()
        );
    }
}
