//! Finite-state search spaces for LF-MMI and decoding.
//!
//! The denominator and decoding graphs share one construction: the phone
//! n-gram LM expanded through a left-to-right HMM topology (self-loop and
//! advance probability 0.5 per emitting state), with LM backoff folded into
//! dense per-history next-phone arcs so the graph stays epsilon-free.
//! Numerator graphs encode supervision: either the forced transcript or a
//! first-pass lattice, both paired with a per-frame mask of allowed units.

mod io;
mod lm;

pub use io::{read_graph, read_mask, write_graph, write_mask};
pub use lm::{estimate_phone_lm, PhoneNgramLM, BOS, EOS};

use std::collections::HashMap;

use thiserror::Error;

use crate::lattice::{Label, Lattice, LatticeArc, LatticeError, LogWeight, StateId};

/// Phone identifier: contiguous ids `1..=P`; 0 is reserved.
pub type Phone = u32;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unsupported n-gram order {0} (expected 1..=4)")]
    BadOrder(usize),
    #[error("graph admits no complete path of length {0}")]
    NoPathOfLengthT(usize),
    #[error("alignment mismatch: {0}")]
    AlignmentMismatch(String),
    #[error("bad phone set: {0}")]
    BadPhoneSet(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("graph parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const LOG_HALF: f64 = -std::f64::consts::LN_2;

/// Phone inventory and its mapping onto output units.
///
/// Each phone expands to `states_per_phone` emitting HMM states; every
/// phone-state pair gets a distinct output unit id starting at 1.
#[derive(Debug, Clone)]
pub struct PhoneSet {
    num_phones: u32,
    states_per_phone: u32,
}

impl PhoneSet {
    pub fn new(num_phones: u32, states_per_phone: u32) -> Result<Self, GraphError> {
        if num_phones == 0 {
            return Err(GraphError::BadPhoneSet("no phones".into()));
        }
        if !(1..=2).contains(&states_per_phone) {
            return Err(GraphError::BadPhoneSet(format!(
                "states_per_phone must be 1 or 2, got {states_per_phone}"
            )));
        }
        Ok(PhoneSet {
            num_phones,
            states_per_phone,
        })
    }

    #[inline]
    pub fn num_phones(&self) -> u32 {
        self.num_phones
    }
    #[inline]
    pub fn states_per_phone(&self) -> u32 {
        self.states_per_phone
    }
    #[inline]
    pub fn num_units(&self) -> u32 {
        self.num_phones * self.states_per_phone
    }

    /// Output unit id for a phone-state pair (unit ids start at 1).
    #[inline]
    pub fn unit(&self, phone: Phone, hmm_state: u32) -> Label {
        debug_assert!(phone >= 1 && phone <= self.num_phones);
        debug_assert!(hmm_state < self.states_per_phone);
        (phone - 1) * self.states_per_phone + hmm_state + 1
    }

    /// Inverse of [`PhoneSet::unit`].
    #[inline]
    pub fn phone_of_unit(&self, unit: Label) -> (Phone, u32) {
        debug_assert!(unit >= 1 && unit <= self.num_units());
        ((unit - 1) / self.states_per_phone + 1, (unit - 1) % self.states_per_phone)
    }

    /// Collapse a frame-level unit sequence into a phone sequence. A new
    /// phone occurrence starts whenever the phone changes or the HMM state
    /// index decreases (re-entry into the same phone).
    pub fn collapse_units(&self, units: &[Label]) -> Vec<Phone> {
        let mut out = Vec::new();
        let mut prev: Option<(Phone, u32)> = None;
        for &u in units {
            let (p, s) = self.phone_of_unit(u);
            let new_occurrence = match prev {
                None => true,
                Some((pp, ps)) => pp != p || s < ps,
            };
            if new_occurrence {
                out.push(p);
            }
            prev = Some((p, s));
        }
        out
    }
}

/// What a search graph encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    Denominator,
    Numerator,
    Decode,
}

impl std::fmt::Display for GraphKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GraphKind::Denominator => write!(f, "Denominator"),
            GraphKind::Numerator => write!(f, "Numerator"),
            GraphKind::Decode => write!(f, "Decode"),
        }
    }
}

/// One graph transition; emits exactly one output frame of `label`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphArc {
    pub src: StateId,
    pub dst: StateId,
    pub label: Label,
    pub weight: LogWeight,
}

/// Compiled finite-state search space. Cyclic for denominator/decoding
/// graphs; numerator graphs are acyclic once unrolled over frames.
#[derive(Debug, Clone)]
pub struct SearchGraph {
    kind: GraphKind,
    num_states: usize,
    start: StateId,
    arcs: Vec<GraphArc>,
    /// Per-state termination weight; `LogWeight::ZERO` marks a non-final state.
    final_weights: Vec<LogWeight>,
}

impl SearchGraph {
    pub fn new(
        kind: GraphKind,
        num_states: usize,
        start: StateId,
        mut arcs: Vec<GraphArc>,
        final_weights: Vec<LogWeight>,
    ) -> Self {
        assert_eq!(final_weights.len(), num_states);
        assert!(start < num_states);
        arcs.sort_by_key(|a| (a.src, a.dst, a.label));
        SearchGraph {
            kind,
            num_states,
            start,
            arcs,
            final_weights,
        }
    }

    #[inline]
    pub fn kind(&self) -> GraphKind {
        self.kind
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
    pub fn arcs(&self) -> &[GraphArc] {
        &self.arcs
    }
    #[inline]
    pub fn final_weight(&self, s: StateId) -> LogWeight {
        self.final_weights[s]
    }
    #[inline]
    pub fn final_weights(&self) -> &[LogWeight] {
        &self.final_weights
    }

    pub fn with_kind(mut self, kind: GraphKind) -> Self {
        self.kind = kind;
        self
    }

    /// Every state reachable from start, and every state able to reach a
    /// final-weighted state.
    pub fn is_connected(&self) -> bool {
        let n = self.num_states;
        let mut fwd = vec![false; n];
        let mut stack = vec![self.start];
        fwd[self.start] = true;
        while let Some(s) = stack.pop() {
            for a in self.arcs.iter().filter(|a| a.src == s) {
                if !fwd[a.dst] {
                    fwd[a.dst] = true;
                    stack.push(a.dst);
                }
            }
        }
        let mut bwd = vec![false; n];
        let mut stack: Vec<StateId> = (0..n)
            .filter(|&s| !self.final_weights[s].is_zero())
            .collect();
        for &s in &stack {
            bwd[s] = true;
        }
        while let Some(s) = stack.pop() {
            for a in self.arcs.iter().filter(|a| a.dst == s) {
                if !bwd[a.src] {
                    bwd[a.src] = true;
                    stack.push(a.src);
                }
            }
        }
        (0..n).all(|s| fwd[s] && bwd[s])
    }

    /// Time-indexed acyclic expansion over exactly `num_frames` frames.
    ///
    /// The result is a [`Lattice`] whose arcs carry the graph labels and
    /// weights (acoustic weights are identity); per-state final weights are
    /// folded into the weight of each path's last arc. Composing the result
    /// with per-frame acoustic scores yields a scored lattice.
    pub fn unroll(&self, num_frames: usize) -> Result<Lattice, GraphError> {
        if num_frames == 0 {
            return Err(GraphError::NoPathOfLengthT(0));
        }
        let n = self.num_states;
        let t_max = num_frames;
        // Forward reachability per frame.
        let mut alive = vec![false; (t_max + 1) * n];
        alive[self.start] = true;
        for t in 0..t_max {
            for a in &self.arcs {
                if alive[t * n + a.src] {
                    alive[(t + 1) * n + a.dst] = true;
                }
            }
        }
        // Backward co-reachability from final-weighted states at t_max.
        let mut keep = vec![false; (t_max + 1) * n];
        for s in 0..n {
            if alive[t_max * n + s] && !self.final_weights[s].is_zero() {
                keep[t_max * n + s] = true;
            }
        }
        for t in (0..t_max).rev() {
            for a in &self.arcs {
                if alive[t * n + a.src] && keep[(t + 1) * n + a.dst] {
                    keep[t * n + a.src] = true;
                }
            }
        }
        if !keep[self.start] {
            return Err(GraphError::NoPathOfLengthT(num_frames));
        }

        // Number surviving (t, state) nodes; all frame-t_max survivors merge
        // into the single lattice final state.
        let mut ids: Vec<usize> = vec![usize::MAX; t_max * n];
        let mut next_id = 0usize;
        for t in 0..t_max {
            for s in 0..n {
                if keep[t * n + s] {
                    ids[t * n + s] = next_id;
                    next_id += 1;
                }
            }
        }
        let final_id = next_id;
        let node = |t: usize, s: StateId| -> usize {
            if t == t_max {
                final_id
            } else {
                ids[t * n + s]
            }
        };

        let mut arcs = Vec::new();
        for t in 0..t_max {
            for a in &self.arcs {
                if !(keep[t * n + a.src] && keep[(t + 1) * n + a.dst]) {
                    continue;
                }
                let mut gw = a.weight;
                if t + 1 == t_max {
                    gw += self.final_weights[a.dst];
                }
                arcs.push(LatticeArc {
                    src: node(t, a.src),
                    dst: node(t + 1, a.dst),
                    label: a.label,
                    frame: t,
                    graph_weight: gw,
                    acoustic_weight: LogWeight::ONE,
                });
            }
        }
        Ok(Lattice::new(final_id + 1, node(0, self.start), final_id, arcs, num_frames)?)
    }
}

/// Per-output-frame set of allowed unit labels, stored as bit masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMask {
    allowed: Vec<u64>,
    num_units: u32,
}

impl FrameMask {
    pub fn new(num_frames: usize, num_units: u32) -> Self {
        assert!(num_units as usize <= 64, "unit inventory exceeds mask width");
        FrameMask {
            allowed: vec![0; num_frames],
            num_units,
        }
    }

    /// Mask allowing every unit at every frame.
    pub fn all(num_frames: usize, num_units: u32) -> Self {
        let mut m = FrameMask::new(num_frames, num_units);
        let bits = if num_units == 64 {
            u64::MAX
        } else {
            (1u64 << num_units) - 1
        };
        m.allowed.iter_mut().for_each(|b| *b = bits);
        m
    }

    #[inline]
    pub fn num_frames(&self) -> usize {
        self.allowed.len()
    }
    #[inline]
    pub fn num_units(&self) -> u32 {
        self.num_units
    }

    #[inline]
    pub fn allow(&mut self, frame: usize, unit: Label) {
        debug_assert!(unit >= 1 && unit <= self.num_units);
        self.allowed[frame] |= 1u64 << (unit - 1);
    }

    #[inline]
    pub fn is_allowed(&self, frame: usize, unit: Label) -> bool {
        debug_assert!(unit >= 1 && unit <= self.num_units);
        self.allowed[frame] & (1u64 << (unit - 1)) != 0
    }

    /// Labels allowed at a frame, ascending.
    pub fn allowed_at(&self, frame: usize) -> Vec<Label> {
        (1..=self.num_units)
            .filter(|&u| self.is_allowed(frame, u))
            .collect()
    }

    pub fn is_empty_at(&self, frame: usize) -> bool {
        self.allowed[frame] == 0
    }

    /// True if `other` allows at least everything this mask allows.
    pub fn subset_of(&self, other: &FrameMask) -> bool {
        self.allowed.len() == other.allowed.len()
            && self
                .allowed
                .iter()
                .zip(&other.allowed)
                .all(|(a, b)| a & !b == 0)
    }
}

/// Key for LM-context states during graph compilation: the conditioning
/// history (fixed length, BOS padded) plus the current phone's HMM state.
#[derive(Hash, PartialEq, Eq, Clone)]
struct CompileKey {
    hist: Vec<Phone>,
    hmm_state: u32,
}

struct GraphBuilder {
    states: HashMap<CompileKey, StateId>,
    arcs: Vec<GraphArc>,
    final_weights: Vec<LogWeight>,
}

impl GraphBuilder {
    fn state(&mut self, key: CompileKey) -> (StateId, bool) {
        let next = self.states.len() + 1; // id 0 is the start state
        match self.states.entry(key) {
            std::collections::hash_map::Entry::Occupied(e) => (*e.get(), false),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(next);
                self.final_weights.push(LogWeight::ZERO);
                (next, true)
            }
        }
    }
}

/// Shared construction for denominator and decoding graphs: the phone LM
/// expanded through the HMM topology, epsilon-free, with sentence-end
/// probabilities as final weights.
fn compile_lm_graph(lm: &PhoneNgramLM, phones: &PhoneSet, kind: GraphKind) -> SearchGraph {
    let ctx_len = lm.order().saturating_sub(1).max(1);
    let spp = phones.states_per_phone();
    let mut b = GraphBuilder {
        states: HashMap::new(),
        arcs: Vec::new(),
        final_weights: vec![LogWeight::ZERO], // start state
    };

    let start_hist = vec![BOS; ctx_len];
    // Empty-utterance termination straight from the start state.
    b.final_weights[0] = LogWeight::new(lm.cond_log_prob(&start_hist, EOS));

    // Worklist of (state id of the phone's FIRST hmm state, history): new
    // LM contexts to expand. Phone-internal states are created eagerly.
    let mut todo: Vec<(StateId, Vec<Phone>)> = Vec::new();
    let mut seen_hist: HashMap<Vec<Phone>, ()> = HashMap::new();

    let enter = |b: &mut GraphBuilder,
                     todo: &mut Vec<(StateId, Vec<Phone>)>,
                     seen: &mut HashMap<Vec<Phone>, ()>,
                     from: StateId,
                     hist: &[Phone],
                     phone: Phone,
                     lm_logp: f64| {
        let mut new_hist = hist.to_vec();
        new_hist.rotate_left(1);
        *new_hist.last_mut().unwrap() = phone;
        let (first, _) = b.state(CompileKey {
            hist: new_hist.clone(),
            hmm_state: 0,
        });
        b.arcs.push(GraphArc {
            src: from,
            dst: first,
            label: phones.unit(phone, 0),
            weight: LogWeight::new(lm_logp),
        });
        if seen.insert(new_hist.clone(), ()).is_none() {
            todo.push((first, new_hist));
        }
    };

    // Expand every phone from the start state.
    for p in 1..=phones.num_phones() {
        let lp = lm.cond_log_prob(&start_hist, p);
        enter(&mut b, &mut todo, &mut seen_hist, 0, &start_hist, p, lp);
    }

    while let Some((first, hist)) = todo.pop() {
        let phone = *hist.last().unwrap();
        // Phone-internal chain: self-loops everywhere, advance between
        // consecutive states, all at probability one half.
        let mut cur = first;
        for s in 0..spp {
            b.arcs.push(GraphArc {
                src: cur,
                dst: cur,
                label: phones.unit(phone, s),
                weight: LogWeight::new(LOG_HALF),
            });
            if s + 1 < spp {
                let (nxt, _) = b.state(CompileKey {
                    hist: hist.clone(),
                    hmm_state: s + 1,
                });
                b.arcs.push(GraphArc {
                    src: cur,
                    dst: nxt,
                    label: phones.unit(phone, s + 1),
                    weight: LogWeight::new(LOG_HALF),
                });
                cur = nxt;
            }
        }
        // Exit from the last state: next phone (scored by the LM) or end.
        // With a single emitting state per phone, re-entering the same
        // phone is indistinguishable from a longer stay, so those exits are
        // omitted and label collapse stays unambiguous.
        for p in 1..=phones.num_phones() {
            if spp == 1 && p == phone {
                continue;
            }
            let lp = LOG_HALF + lm.cond_log_prob(&hist, p);
            enter(&mut b, &mut todo, &mut seen_hist, cur, &hist, p, lp);
        }
        b.final_weights[cur] = LogWeight::new(LOG_HALF + lm.cond_log_prob(&hist, EOS));
    }

    let num_states = b.final_weights.len();
    SearchGraph::new(kind, num_states, 0, b.arcs, b.final_weights)
}

/// Cyclic graph whose length-T paths enumerate every phone sequence the LM
/// can score, expanded through the HMM topology.
pub fn compile_denominator(lm: &PhoneNgramLM, phones: &PhoneSet) -> SearchGraph {
    compile_lm_graph(lm, phones, GraphKind::Denominator)
}

/// Same construction as the denominator graph, tagged for first-pass decoding.
pub fn compile_decoding_graph(lm: &PhoneNgramLM, phones: &PhoneSet) -> SearchGraph {
    compile_lm_graph(lm, phones, GraphKind::Decode)
}

/// Forced-transcript supervision: a linear phone graph through the HMM
/// topology, LM-scored like the denominator so numerator paths keep the
/// exact weights they have there, plus a frame mask allowing each phone's
/// units within `tolerance` frames of its aligned segment.
///
/// `alignment` gives the aligned phone per output frame and must have
/// exactly `num_frames` entries whose collapsed occurrence sequence equals
/// `transcript`.
pub fn numerator_from_transcript(
    transcript: &[Phone],
    alignment: &[Phone],
    num_frames: usize,
    tolerance: usize,
    lm: &PhoneNgramLM,
    phones: &PhoneSet,
) -> Result<(SearchGraph, FrameMask), GraphError> {
    if alignment.len() != num_frames {
        return Err(GraphError::AlignmentMismatch(format!(
            "alignment has {} frames, utterance has {num_frames}",
            alignment.len()
        )));
    }
    if transcript.is_empty() {
        return Err(GraphError::AlignmentMismatch("empty transcript".into()));
    }

    // Graph: start state 0, then states_per_phone states per occurrence.
    let spp = phones.states_per_phone();
    let num_states = 1 + transcript.len() * spp as usize;
    let mut arcs = Vec::new();
    let mut final_weights = vec![LogWeight::ZERO; num_states];
    let first_state_of = |i: usize| 1 + i * spp as usize;
    let mut hist: Vec<Phone> = vec![BOS; lm.order().saturating_sub(1).max(1)];
    let mut prev_exit: Option<StateId> = None;
    for (i, &p) in transcript.iter().enumerate() {
        let lm_lp = lm.cond_log_prob(&hist, p);
        let enter_w = match prev_exit {
            None => lm_lp,
            Some(_) => LOG_HALF + lm_lp,
        };
        let first = first_state_of(i);
        arcs.push(GraphArc {
            src: prev_exit.unwrap_or(0),
            dst: first,
            label: phones.unit(p, 0),
            weight: LogWeight::new(enter_w),
        });
        for s in 0..spp {
            let cur = first + s as usize;
            arcs.push(GraphArc {
                src: cur,
                dst: cur,
                label: phones.unit(p, s),
                weight: LogWeight::new(LOG_HALF),
            });
            if s + 1 < spp {
                arcs.push(GraphArc {
                    src: cur,
                    dst: cur + 1,
                    label: phones.unit(p, s + 1),
                    weight: LogWeight::new(LOG_HALF),
                });
            }
        }
        prev_exit = Some(first + spp as usize - 1);
        hist.rotate_left(1);
        *hist.last_mut().unwrap() = p;
    }
    let last = prev_exit.unwrap();
    final_weights[last] = LogWeight::new(LOG_HALF + lm.cond_log_prob(&hist, EOS));
    let graph = SearchGraph::new(GraphKind::Numerator, num_states, 0, arcs, final_weights);

    // Mask: each aligned occurrence admits its phone's units over the
    // segment widened by the tolerance, clipped to the utterance.
    let segments = alignment_segments(alignment);
    let occ: Vec<Phone> = segments.iter().map(|&(p, _, _)| p).collect();
    if occ != transcript {
        return Err(GraphError::AlignmentMismatch(format!(
            "alignment occurrences {occ:?} do not match transcript {transcript:?}"
        )));
    }
    let mut mask = FrameMask::new(num_frames, phones.num_units());
    for &(p, seg_start, seg_end) in &segments {
        let lo = seg_start.saturating_sub(tolerance);
        let hi = (seg_end + tolerance).min(num_frames - 1);
        for f in lo..=hi {
            for s in 0..spp {
                mask.allow(f, phones.unit(p, s));
            }
        }
    }
    Ok((graph, mask))
}

/// Contiguous (phone, first_frame, last_frame) segments of an alignment.
fn alignment_segments(alignment: &[Phone]) -> Vec<(Phone, usize, usize)> {
    let mut out: Vec<(Phone, usize, usize)> = Vec::new();
    for (f, &p) in alignment.iter().enumerate() {
        match out.last_mut() {
            Some((q, _, end)) if *q == p && *end + 1 == f => *end = f,
            _ => out.push((p, f, f)),
        }
    }
    out
}

/// Lattice supervision: the first-pass lattice itself becomes the numerator
/// graph (graph weights retained, acoustic weights dropped), and the mask
/// admits, at each frame, every label the lattice carries within
/// `tolerance` frames.
pub fn numerator_from_lattice(
    lat: &Lattice,
    tolerance: usize,
    num_units: u32,
) -> Result<(SearchGraph, FrameMask), GraphError> {
    let arcs = lat
        .arcs()
        .iter()
        .map(|a| GraphArc {
            src: a.src,
            dst: a.dst,
            label: a.label,
            weight: a.graph_weight,
        })
        .collect();
    let mut final_weights = vec![LogWeight::ZERO; lat.num_states()];
    final_weights[lat.final_state()] = LogWeight::ONE;
    let graph = SearchGraph::new(
        GraphKind::Numerator,
        lat.num_states(),
        lat.start(),
        arcs,
        final_weights,
    );
    let t = lat.num_frames();
    let mut mask = FrameMask::new(t, num_units);
    for a in lat.arcs() {
        let lo = a.frame.saturating_sub(tolerance);
        let hi = (a.frame + tolerance).min(t - 1);
        for f in lo..=hi {
            mask.allow(f, a.label);
        }
    }
    Ok((graph, mask))
}
