//! Temporal event proposals.
//!
//! A forward and a backward recurrent pass run over the frame features.
//! At step `t` the forward pass scores "an event of anchor length `k` ends
//! here" and the backward pass scores "an event of anchor length `k` starts
//! here"; the fused confidence of an anchor is the product of its forward
//! score at the end step and its backward score at the start step.
//! Surviving proposals go through greedy non-maximum suppression.
//!
//! The module also owns the proposal loss, the hard in-anchor indicator and
//! the learned differentiable mask that stands in for it.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, LOG_CLAMP};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{sinusoid, FeedForward, Gru, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventProposal {
    pub start: f64,
    pub end: f64,
    pub confidence: f64,
    pub anchor_id: usize,
}

impl EventProposal {
    pub fn new(start: f64, end: f64, confidence: f64, anchor_id: usize) -> Self {
        Self {
            start,
            end,
            confidence,
            anchor_id,
        }
    }

    pub fn validate(&self, duration: f64) -> Result<()> {
        if !(self.start >= 0.0 && self.start < self.end && self.end <= duration + 1e-9) {
            return Err(invalid(format!(
                "proposal [{}, {}] invalid for duration {duration}",
                self.start, self.end
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(invalid(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

/// Anchor durations (strictly increasing) placed every `stride` seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub lengths: Vec<f64>,
    pub stride: f64,
}

impl AnchorSet {
    pub fn new(lengths: Vec<f64>, stride: f64) -> Result<Self> {
        if lengths.is_empty() {
            return Err(invalid("anchor set needs at least one length"));
        }
        if lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] <= 0.0 {
            return Err(invalid(
                "anchor lengths must be positive and strictly increasing",
            ));
        }
        if stride <= 0.0 {
            return Err(invalid("anchor stride must be positive"));
        }
        Ok(Self { lengths, stride })
    }

    /// `count` lengths `min, min·ratio, min·ratio², …`.
    pub fn geometric(count: usize, min_len: f64, ratio: f64, stride: f64) -> Result<Self> {
        Self::new(
            (0..count).map(|i| min_len * ratio.powi(i as i32)).collect(),
            stride,
        )
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// All anchors over `steps` time steps, in `(step, length)` row-major order.
    pub fn anchors(&self, steps: usize) -> Vec<Anchor> {
        let mut out = Vec::with_capacity(steps * self.len());
        for step in 0..steps {
            let end = (step + 1) as f64 * self.stride;
            for (k, &len) in self.lengths.iter().enumerate() {
                let start = (end - len).max(0.0);
                let start_step = ((start / self.stride).floor() as usize).min(steps - 1);
                out.push(Anchor {
                    id: step * self.len() + k,
                    step,
                    start_step,
                    k,
                    start,
                    end,
                });
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub id: usize,
    /// Step at which the anchor ends (forward score index).
    pub step: usize,
    /// Step at which the anchor starts (backward score index).
    pub start_step: usize,
    pub k: usize,
    pub start: f64,
    pub end: f64,
}

impl Anchor {
    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= 0.0
    }
}

/// Intersection over union of two time intervals.
///
/// A zero-length (or inverted) interval yields 0 and logs a warning.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    if a.1 <= a.0 || b.1 <= b.0 {
        log::warn!("temporal_iou on degenerate interval {a:?} / {b:?}");
        return 0.0;
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1.max(b.1) - a.0.min(b.0)).max(0.0);
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy suppression: proposals are visited by descending confidence (ties
/// by position in the input) and kept unless they overlap a kept proposal
/// with tIoU above `threshold`.
pub fn nms(mut proposals: Vec<EventProposal>, threshold: f64) -> Vec<EventProposal> {
    sort_by_confidence(&mut proposals);
    let mut kept: Vec<EventProposal> = Vec::new();
    for p in proposals {
        if kept
            .iter()
            .all(|k| temporal_iou(k.interval(), p.interval()) <= threshold)
        {
            kept.push(p);
        }
    }
    kept
}

fn sort_by_confidence(proposals: &mut [EventProposal]) {
    proposals.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignored,
}

/// Positive iff tIoU ≥ `pos` with some ground truth, negative iff tIoU < `neg`
/// with all, ignored otherwise.
pub fn assign_labels(
    anchors: &[Anchor],
    ground_truth: &[(f64, f64)],
    pos: f64,
    neg: f64,
) -> Vec<AnchorLabel> {
    anchors
        .iter()
        .map(|a| {
            let best = ground_truth
                .iter()
                .map(|&gt| temporal_iou((a.start, a.end), gt))
                .fold(0.0, f64::max);
            if best >= pos {
                AnchorLabel::Positive
            } else if best < neg {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignored
            }
        })
        .collect()
}

/// Class-balanced cross entropy: the mean positive term and the mean
/// negative term are averaged, so each side carries equal weight regardless
/// of how many anchors it has. With only one side present that side's mean
/// is returned; with neither, zero (and a warning).
pub fn balanced_bce(confidences: &[f64], labels: &[AnchorLabel]) -> f64 {
    let (mut pos, mut npos, mut neg, mut nneg) = (0.0, 0usize, 0.0, 0usize);
    for (&c, &l) in confidences.iter().zip(labels) {
        match l {
            AnchorLabel::Positive => {
                pos -= c.max(LOG_CLAMP).ln();
                npos += 1;
            }
            AnchorLabel::Negative => {
                neg -= (1.0 - c).max(LOG_CLAMP).ln();
                nneg += 1;
            }
            AnchorLabel::Ignored => {}
        }
    }
    match (npos, nneg) {
        (0, 0) => {
            log::warn!("proposal loss with no positive and no negative anchors");
            0.0
        }
        (0, n) => neg / n as f64,
        (p, 0) => pos / p as f64,
        (p, n) => 0.5 * (pos / p as f64 + neg / n as f64),
    }
}

/// Proposal loss for per-anchor confidences against ground-truth events.
pub fn proposal_loss(
    confidences: &[f64],
    ground_truth: &[(f64, f64)],
    anchors: &[Anchor],
    pos_iou: f64,
    neg_iou: f64,
) -> Result<f64> {
    if confidences.len() != anchors.len() {
        return Err(shape_err(format!(
            "{} confidences for {} anchors",
            confidences.len(),
            anchors.len()
        )));
    }
    Ok(balanced_bce(
        confidences,
        &assign_labels(anchors, ground_truth, pos_iou, neg_iou),
    ))
}

/// Graph form of [`balanced_bce`] over a column of probabilities.
pub fn balanced_bce_graph(g: &mut Graph, probs: Var, labels: &[AnchorLabel]) -> Var {
    let n = labels.len();
    let npos = labels
        .iter()
        .filter(|l| **l == AnchorLabel::Positive)
        .count();
    let nneg = labels
        .iter()
        .filter(|l| **l == AnchorLabel::Negative)
        .count();
    if npos + nneg == 0 {
        log::warn!("proposal loss with no positive and no negative anchors");
        return g.constant(Tensor::scalar(0.0));
    }
    let both = npos > 0 && nneg > 0;
    let side = |count: usize| {
        if both {
            0.5 / count as f64
        } else {
            1.0 / count as f64
        }
    };
    let mut wpos = vec![0.0; n];
    let mut wneg = vec![0.0; n];
    for (i, l) in labels.iter().enumerate() {
        match l {
            AnchorLabel::Positive => wpos[i] = side(npos),
            AnchorLabel::Negative => wneg[i] = side(nneg),
            AnchorLabel::Ignored => {}
        }
    }
    weighted_bce_graph(g, probs, &wpos, &wneg)
}

/// `−Σ wpos·log p + wneg·log(1−p)` over a column of probabilities.
pub fn weighted_bce_graph(g: &mut Graph, probs: Var, wpos: &[f64], wneg: &[f64]) -> Var {
    let log_p = g.log(probs);
    let neg = g.scale(probs, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let log_q = g.log(one_minus);
    let wp = g.constant(Tensor::col_vector(wpos.to_vec()));
    let wn = g.constant(Tensor::col_vector(wneg.to_vec()));
    let a = g.mul(log_p, wp);
    let b = g.mul(log_q, wn);
    let s = g.add(a, b);
    let total = g.sum(s);
    g.scale(total, -1.0)
}

/// `1` iff `t ∈ [start, end]` (inclusive).
pub fn bin_indicator(start: f64, end: f64, t: f64) -> f64 {
    if t >= start && t <= end {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub hidden_dim: usize,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub mask_hidden: usize,
    pub mask_pe_dim: usize,
    /// Seconds used to normalize absolute times fed to the mask network.
    pub time_scale: f64,
    /// Endpoint refinement range, as a fraction of the anchor length.
    pub max_offset: f64,
    pub max_proposals: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            score_threshold: 0.5,
            nms_threshold: 0.7,
            positive_iou: 0.7,
            negative_iou: 0.3,
            mask_hidden: 16,
            mask_pe_dim: 8,
            time_scale: 10.0,
            max_offset: 0.25,
            max_proposals: 10,
        }
    }
}

/// Learned soft in-segment indicator `f_M(S_p, E_p, S_a, E_a, t)`.
#[derive(Clone, Debug)]
pub struct MaskNet {
    pub mlp: FeedForward,
    pub pe_dim: usize,
    pub time_scale: f64,
}

/// Number of non-positional inputs to the mask network.
const MASK_SCALAR_INPUTS: usize = 6;

impl MaskNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        pe_dim: usize,
        hidden: usize,
        time_scale: f64,
    ) -> Self {
        Self {
            mlp: FeedForward::new(store, rng, name, pe_dim + MASK_SCALAR_INPUTS, hidden, 1),
            pe_dim,
            time_scale,
        }
    }

    /// Mask values at `times` as a `n×1` node. `sp` and `ep` are `1×1` nodes so
    /// gradients reach whatever produced the proposal endpoints.
    pub fn forward(&self, g: &mut Graph, sp: Var, ep: Var, sa: f64, ea: f64, times: &[f64]) -> Var {
        let n = times.len();
        let s = self.time_scale;
        let pe_rows: Vec<Vec<f64>> = times.iter().map(|&t| sinusoid(t, self.pe_dim)).collect();
        let pe = g.constant(Tensor::from_rows(&pe_rows));
        let ones = g.constant(Tensor::filled(n, 1, 1.0));
        let sp_col = g.matmul(ones, sp);
        let ep_col = g.matmul(ones, ep);
        let sp_col = g.scale(sp_col, 1.0 / s);
        let ep_col = g.scale(ep_col, 1.0 / s);
        let anchor = g.constant(Tensor::from_rows(&vec![[sa / s, ea / s]; n]));
        let t_col = g.constant(Tensor::col_vector(times.iter().map(|t| t / s).collect()));
        let after_start = g.sub(t_col, sp_col);
        let before_end = g.sub(ep_col, t_col);
        let input = g.concat_cols(&[pe, sp_col, ep_col, anchor, after_start, before_end]);
        let logits = self.mlp.forward(g, input);
        g.sigmoid(logits)
    }

    /// Scalar evaluation outside any training graph.
    pub fn value(&self, store: &ParamStore, sp: f64, ep: f64, sa: f64, ea: f64, t: f64) -> f64 {
        let mut g = Graph::new(store);
        let spv = g.constant(Tensor::scalar(sp));
        let epv = g.constant(Tensor::scalar(ep));
        let out = self.forward(&mut g, spv, epv, sa, ea, &[t]);
        g.scalar(out)
    }
}

/// Mean BCE between `Bin(S_a, E_a, t)` and the mask, over `times`.
pub fn mask_loss_graph(g: &mut Graph, mask: Var, sa: f64, ea: f64, times: &[f64]) -> Var {
    let n = times.len() as f64;
    let wpos: Vec<f64> = times
        .iter()
        .map(|&t| bin_indicator(sa, ea, t) / n)
        .collect();
    let wneg: Vec<f64> = times
        .iter()
        .map(|&t| (1.0 - bin_indicator(sa, ea, t)) / n)
        .collect();
    weighted_bce_graph(g, mask, &wpos, &wneg)
}

/// Mean BCE between the indicator and precomputed mask values.
pub fn mask_loss_values(mask: &[f64], sa: f64, ea: f64, times: &[f64]) -> Result<f64> {
    if times.is_empty() || mask.len() != times.len() {
        return Err(invalid(
            "mask loss needs one mask value per (nonempty) time",
        ));
    }
    let total: f64 = mask
        .iter()
        .zip(times)
        .map(|(&m, &t)| {
            if bin_indicator(sa, ea, t) == 1.0 {
                -m.max(LOG_CLAMP).ln()
            } else {
                -(1.0 - m).max(LOG_CLAMP).ln()
            }
        })
        .sum();
    Ok(total / times.len() as f64)
}

/// Raw per-anchor outputs of the scorer.
pub struct ProposalScores {
    /// `T×K` end-anchored confidences.
    pub forward: Var,
    /// `T×K` start-anchored confidences.
    pub backward: Var,
    /// `T×2K` raw endpoint offsets (start, end per anchor length).
    pub offsets: Var,
}

#[derive(Clone, Debug)]
pub struct ProposalNet {
    pub config: ProposalConfig,
    pub anchors: AnchorSet,
    pub forward_rnn: Gru,
    pub backward_rnn: Gru,
    pub forward_head: Linear,
    pub backward_head: Linear,
    pub offset_head: Linear,
    pub mask: MaskNet,
}

impl ProposalNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        anchors: AnchorSet,
        config: ProposalConfig,
    ) -> Self {
        let h = config.hidden_dim;
        let k = anchors.len();
        Self {
            forward_rnn: Gru::new(store, rng, &format!("{prefix}.fwd_rnn"), in_dim, h),
            backward_rnn: Gru::new(store, rng, &format!("{prefix}.bwd_rnn"), in_dim, h),
            forward_head: Linear::new(store, rng, &format!("{prefix}.fwd_head"), h, k),
            backward_head: Linear::new(store, rng, &format!("{prefix}.bwd_head"), h, k),
            offset_head: Linear::new(store, rng, &format!("{prefix}.offset_head"), 2 * h, 2 * k),
            mask: MaskNet::new(
                store,
                rng,
                &format!("{prefix}.mask"),
                config.mask_pe_dim,
                config.mask_hidden,
                config.time_scale,
            ),
            anchors,
            config,
        }
    }

    pub fn score(&self, g: &mut Graph, features: Var) -> ProposalScores {
        let fwd = self.forward_rnn.run(g, features, false);
        let bwd = self.backward_rnn.run(g, features, true);
        let f = self.forward_head.forward(g, fwd);
        let b = self.backward_head.forward(g, bwd);
        let both = g.concat_cols(&[fwd, bwd]);
        let offsets = self.offset_head.forward(g, both);
        ProposalScores {
            forward: g.sigmoid(f),
            backward: g.sigmoid(b),
            offsets,
        }
    }

    /// Fused confidence of every anchor as an `A×1` node (anchor order of
    /// [`AnchorSet::anchors`]).
    pub fn fused_confidence(
        &self,
        g: &mut Graph,
        scores: &ProposalScores,
        anchors: &[Anchor],
    ) -> Var {
        let k = self.anchors.len();
        let steps = g.shape(scores.forward).0;
        let mut pick_f = Tensor::zeros(anchors.len(), steps * k);
        let mut pick_b = Tensor::zeros(anchors.len(), steps * k);
        for (i, a) in anchors.iter().enumerate() {
            pick_f.set(i, a.step * k + a.k, 1.0);
            pick_b.set(i, a.start_step * k + a.k, 1.0);
        }
        let f_flat = flatten_col(g, scores.forward);
        let b_flat = flatten_col(g, scores.backward);
        let pf = g.constant(pick_f);
        let pb = g.constant(pick_b);
        let f = g.matmul(pf, f_flat);
        let b = g.matmul(pb, b_flat);
        g.mul(f, b)
    }

    /// Refined `(S_p, E_p)` nodes for one anchor.
    pub fn refined_endpoints(
        &self,
        g: &mut Graph,
        scores: &ProposalScores,
        anchor: &Anchor,
    ) -> (Var, Var) {
        let k = self.anchors.len();
        let row = g.slice_rows(scores.offsets, anchor.step, 1);
        let ds = g.slice_cols(row, anchor.k, 1);
        let de = g.slice_cols(row, k + anchor.k, 1);
        let reach = self.config.max_offset * anchor.len();
        let ds = g.tanh(ds);
        let de = g.tanh(de);
        let ds = g.scale(ds, reach);
        let de = g.scale(de, reach);
        let sp = g.add_scalar(ds, anchor.start);
        let ep = g.add_scalar(de, anchor.end);
        (sp, ep)
    }

    /// Proposal loss on both directions' scores plus the fused score.
    pub fn loss(
        &self,
        g: &mut Graph,
        scores: &ProposalScores,
        anchors: &[Anchor],
        labels: &[AnchorLabel],
    ) -> Var {
        let k = self.anchors.len();
        let steps = g.shape(scores.forward).0;
        let mut pick_f = Tensor::zeros(anchors.len(), steps * k);
        let mut pick_b = Tensor::zeros(anchors.len(), steps * k);
        for (i, a) in anchors.iter().enumerate() {
            pick_f.set(i, a.step * k + a.k, 1.0);
            pick_b.set(i, a.start_step * k + a.k, 1.0);
        }
        let f_flat = flatten_col(g, scores.forward);
        let b_flat = flatten_col(g, scores.backward);
        let pf = g.constant(pick_f);
        let pb = g.constant(pick_b);
        let f = g.matmul(pf, f_flat);
        let b = g.matmul(pb, b_flat);
        let lf = balanced_bce_graph(g, f, labels);
        let lb = balanced_bce_graph(g, b, labels);
        let total = g.add(lf, lb);
        g.scale(total, 0.5)
    }

    /// Scores, thresholds, refines, and suppresses; sorted by confidence.
    pub fn propose_events(
        &self,
        store: &ParamStore,
        features: &Tensor,
    ) -> Result<Vec<EventProposal>> {
        let steps = features.rows();
        if steps == 0 {
            return Err(invalid(
                "cannot propose events for an empty feature sequence",
            ));
        }
        let duration = steps as f64 * self.anchors.stride;
        let mut g = Graph::new(store);
        let x = g.constant(features.clone());
        let scores = self.score(&mut g, x);
        let anchors = self.anchors.anchors(steps);
        let fused = self.fused_confidence(&mut g, &scores, &anchors);
        let conf = g.value(fused).data().to_vec();
        let mut candidates = Vec::new();
        for (a, &c) in anchors.iter().zip(&conf) {
            if c <= self.config.score_threshold {
                continue;
            }
            let (sp, ep) = self.refined_endpoints(&mut g, &scores, a);
            let start = g.scalar(sp).clamp(0.0, duration);
            let end = g.scalar(ep).clamp(0.0, duration);
            if end > start {
                candidates.push(EventProposal::new(start, end, c, a.id));
            }
        }
        let mut kept = nms(candidates, self.config.nms_threshold);
        kept.truncate(self.config.max_proposals);
        Ok(kept)
    }

    /// `f_M` evaluated outside a training graph.
    pub fn differentiable_mask(
        &self,
        store: &ParamStore,
        sp: f64,
        ep: f64,
        sa: f64,
        ea: f64,
        t: f64,
    ) -> f64 {
        self.mask.value(store, sp, ep, sa, ea, t)
    }

    pub fn mask_loss(
        &self,
        store: &ParamStore,
        proposal: &EventProposal,
        anchor: &Anchor,
        times: &[f64],
    ) -> Result<f64> {
        if times.is_empty() {
            return Err(invalid("mask loss needs at least one time"));
        }
        let values: Vec<f64> = times
            .iter()
            .map(|&t| {
                self.differentiable_mask(
                    store,
                    proposal.start,
                    proposal.end,
                    anchor.start,
                    anchor.end,
                    t,
                )
            })
            .collect();
        mask_loss_values(&values, anchor.start, anchor.end, times)
    }
}

/// Row-major flatten of an `r×c` node into an `rc×1` column.
fn flatten_col(g: &mut Graph, x: Var) -> Var {
    let (r, c) = g.shape(x);
    if c == 1 {
        return x;
    }
    // x_flat = Σ_j (x · e_j) placed at rows i*c + j, built with constant selectors.
    let mut parts = Vec::with_capacity(c);
    for j in 0..c {
        let col = g.slice_cols(x, j, 1);
        let mut place = Tensor::zeros(r * c, r);
        for i in 0..r {
            place.set(i * c + j, i, 1.0);
        }
        let place = g.constant(place);
        parts.push(g.matmul(place, col));
    }
    let mut acc = parts[0];
    for p in &parts[1..] {
        acc = g.add(acc, *p);
    }
    acc
}

/// `{video_id, proposals: [{start, end, confidence}]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalFile {
    pub video_id: String,
    pub proposals: Vec<ProposalRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub start: f64,
    pub end: f64,
    pub confidence: f64,
}

impl ProposalFile {
    pub fn new(video_id: impl Into<String>, proposals: &[EventProposal]) -> Self {
        Self {
            video_id: video_id.into(),
            proposals: proposals
                .iter()
                .map(|p| ProposalRecord {
                    start: p.start,
                    end: p.end,
                    confidence: p.confidence,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn tiou_examples() {
        assert!((temporal_iou((2.0, 6.0), (4.0, 8.0)) - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(temporal_iou((1.5, 3.5), (1.5, 3.5)), 1.0);
        assert_eq!(temporal_iou((0.0, 1.0), (2.0, 3.0)), 0.0);
        assert_eq!(temporal_iou((1.0, 1.0), (0.0, 3.0)), 0.0);
    }

    #[test]
    fn bin_indicator_is_inclusive() {
        assert_eq!(bin_indicator(2.0, 5.0, 2.0), 1.0);
        assert_eq!(bin_indicator(2.0, 5.0, 5.0), 1.0);
        assert_eq!(bin_indicator(2.0, 5.0, 5.01), 0.0);
        assert_eq!(bin_indicator(2.0, 5.0, 1.99), 0.0);
    }

    #[test]
    fn anchor_set_validation() {
        assert!(AnchorSet::new(vec![], 1.0).is_err());
        assert!(AnchorSet::new(vec![2.0, 2.0], 1.0).is_err());
        let a = AnchorSet::geometric(3, 2.0, 2.0, 1.0).unwrap();
        assert_eq!(a.lengths, vec![2.0, 4.0, 8.0]);
        let anchors = a.anchors(4);
        assert_eq!(anchors.len(), 12);
        assert_eq!((anchors[4].start, anchors[4].end), (0.0, 2.0));
        assert_eq!(anchors[4].start_step, 0);
    }

    #[test]
    fn balanced_loss_examples() {
        let labels = [
            AnchorLabel::Positive,
            AnchorLabel::Negative,
            AnchorLabel::Negative,
            AnchorLabel::Ignored,
        ];
        assert!(balanced_bce(&[1.0, 0.0, 0.0, 0.3], &labels) <= 1e-9);
        assert!((balanced_bce(&[0.5; 4], &labels) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(balanced_bce(&[0.5], &[AnchorLabel::Ignored]), 0.0);
    }

    #[test]
    fn balanced_loss_matches_per_anchor_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let anchors = AnchorSet::geometric(3, 2.0, 2.0, 1.0).unwrap().anchors(10);
        let gts = [(1.0, 4.0), (5.0, 9.0)];
        let conf: Vec<f64> = (0..anchors.len())
            .map(|_| rng.random_range(0.01..0.99))
            .collect();
        let got = proposal_loss(&conf, &gts, &anchors, 0.7, 0.3).unwrap();
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (a, c) in anchors.iter().zip(&conf) {
            let best = gts
                .iter()
                .map(|g| temporal_iou((a.start, a.end), *g))
                .fold(0.0, f64::max);
            if best >= 0.7 {
                pos.push(-c.ln());
            } else if best < 0.3 {
                neg.push(-(1.0 - c).ln());
            }
        }
        assert!(!pos.is_empty() && !neg.is_empty());
        let oracle = 0.5
            * (pos.iter().sum::<f64>() / pos.len() as f64
                + neg.iter().sum::<f64>() / neg.len() as f64);
        assert!((got - oracle).abs() < 1e-12);
    }

    /// Independent O(n²) suppression: repeatedly take the best remaining
    /// proposal and delete everything overlapping it above the threshold.
    fn nms_oracle(props: &[EventProposal], thr: f64) -> Vec<EventProposal> {
        let mut remaining: Vec<(usize, EventProposal)> =
            props.iter().cloned().enumerate().collect();
        let mut out = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                let (bi, b) = &remaining[best];
                let (ci, c) = &remaining[i];
                if c.confidence > b.confidence || (c.confidence == b.confidence && ci < bi) {
                    best = i;
                }
            }
            let (_, chosen) = remaining.remove(best);
            remaining.retain(|(_, p)| {
                let inter = (p.end.min(chosen.end) - p.start.max(chosen.start)).max(0.0);
                let union = p.end.max(chosen.end) - p.start.min(chosen.start);
                inter / union <= thr
            });
            out.push(chosen);
        }
        out
    }

    #[test]
    fn nms_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.random_range(1..15);
            let props: Vec<EventProposal> = (0..n)
                .map(|i| {
                    let s = rng.random_range(0.0..20.0);
                    let l = rng.random_range(0.5..8.0);
                    EventProposal::new(s, s + l, (rng.random_range(0..20) as f64) / 20.0, i)
                })
                .collect();
            assert_eq!(nms(props.clone(), 0.5), nms_oracle(&props, 0.5));
        }
    }

    fn tiny_net(steps_dim: usize, k: usize, seed: u64) -> (ParamStore, ProposalNet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let anchors = AnchorSet::geometric(k, 1.0, 2.0, 1.0).unwrap();
        let config = ProposalConfig {
            hidden_dim: 6,
            ..Default::default()
        };
        let net = ProposalNet::new(&mut store, &mut rng, "proposal", steps_dim, anchors, config);
        (store, net)
    }

    #[test]
    fn minimal_input_gives_at_most_one_proposal() {
        let (store, net) = tiny_net(3, 1, 0);
        let out = net
            .propose_events(&store, &Tensor::filled(1, 3, 0.2))
            .unwrap();
        assert!(out.len() <= 1);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let (store, net) = tiny_net(3, 1, 0);
        assert!(net.propose_events(&store, &Tensor::zeros(0, 3)).is_err());
    }

    #[test]
    fn threshold_one_yields_nothing() {
        let (store, mut net) = tiny_net(3, 2, 1);
        net.config.score_threshold = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_vec(8, 3, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect());
        assert!(net.propose_events(&store, &x).unwrap().is_empty());
    }

    #[test]
    fn proposals_are_sorted_deterministic_and_suppressed() {
        let (store, mut net) = tiny_net(3, 3, 5);
        net.config.score_threshold = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(
            12,
            3,
            (0..36).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let a = net.propose_events(&store, &x).unwrap();
        let b = net.propose_events(&store, &x).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        assert!(a.windows(2).all(|w| w[0].confidence >= w[1].confidence));
        for i in 0..a.len() {
            a[i].validate(12.0).unwrap();
            for j in i + 1..a.len() {
                assert!(temporal_iou(a[i].interval(), a[j].interval()) <= net.config.nms_threshold);
            }
        }
    }

    #[test]
    fn fused_confidence_is_product_of_directions() {
        let (store, net) = tiny_net(2, 2, 9);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_vec(
            5,
            2,
            vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8, -0.9, 1.0],
        ));
        let scores = net.score(&mut g, x);
        let anchors = net.anchors.anchors(5);
        let fused = net.fused_confidence(&mut g, &scores, &anchors);
        for (i, a) in anchors.iter().enumerate() {
            let f = g.value(scores.forward).get(a.step, a.k);
            let b = g.value(scores.backward).get(a.start_step, a.k);
            assert!((g.value(fused).data()[i] - f * b).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_is_in_open_unit_interval_and_deterministic() {
        let (store, net) = tiny_net(2, 2, 7);
        let (store2, net2) = tiny_net(2, 2, 7);
        for t in [0.0, 1.0, 2.5, 10.0, 100.0] {
            let m = net.differentiable_mask(&store, 1.0, 4.0, 1.5, 3.5, t);
            assert!(m > 0.0 && m < 1.0);
            assert_eq!(m, net2.differentiable_mask(&store2, 1.0, 4.0, 1.5, 3.5, t));
        }
    }

    #[test]
    fn mask_gradient_wrt_start_matches_finite_difference() {
        let (store, net) = tiny_net(2, 2, 8);
        let eval = |sp: f64| net.differentiable_mask(&store, sp, 4.0, 1.5, 3.5, 2.0);
        let h = 1e-5;
        let numeric = (eval(1.3 + h) - eval(1.3 - h)) / (2.0 * h);
        // S_p enters as a leaf parameter so the graph differentiates through it.
        let mut joint = store.clone();
        let sp_joint = joint.add("sp", Tensor::scalar(1.3));
        let mut g = Graph::new(&joint);
        let sp = g.param(sp_joint);
        let ep = g.constant(Tensor::scalar(4.0));
        let m = net.mask.forward(&mut g, sp, ep, 1.5, 3.5, &[2.0]);
        let out = g.sum(m);
        let analytic = g.backward(out).get(sp_joint).unwrap().item();
        assert!(
            crate::gradcheck::relative_error(analytic, numeric) < 1e-4,
            "{analytic} vs {numeric}"
        );
    }

    #[test]
    fn mask_loss_examples() {
        let times = [0.0, 1.0, 2.0, 3.0];
        let perfect: Vec<f64> = times.iter().map(|&t| bin_indicator(1.0, 2.0, t)).collect();
        assert!(mask_loss_values(&perfect, 1.0, 2.0, &times).unwrap() <= 1e-9);
        assert!((mask_loss_values(&[0.5; 4], 1.0, 2.0, &times).unwrap() - 2f64.ln()).abs() < 1e-12);
        let m = [0.2, 0.9, 0.6, 0.3];
        let oracle = (-(0.8f64).ln() - 0.9f64.ln() - 0.6f64.ln() - 0.7f64.ln()) / 4.0;
        assert!((mask_loss_values(&m, 1.0, 2.0, &times).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn mask_loss_graph_matches_values() {
        let (store, net) = tiny_net(2, 2, 8);
        let times = [0.0, 1.5, 2.5, 4.0];
        let prop = EventProposal::new(1.0, 3.0, 0.9, 0);
        let anchor = Anchor {
            id: 0,
            step: 2,
            start_step: 1,
            k: 0,
            start: 1.0,
            end: 3.0,
        };
        let direct = net.mask_loss(&store, &prop, &anchor, &times).unwrap();
        let mut g = Graph::new(&store);
        let sp = g.constant(Tensor::scalar(1.0));
        let ep = g.constant(Tensor::scalar(3.0));
        let m = net.mask.forward(&mut g, sp, ep, 1.0, 3.0, &times);
        let l = mask_loss_graph(&mut g, m, 1.0, 3.0, &times);
        assert!((g.scalar(l) - direct).abs() < 1e-12);
    }

    #[test]
    fn proposal_file_shape() {
        let f = ProposalFile::new("v1", &[EventProposal::new(1.0, 2.0, 0.5, 3)]);
        let json = serde_json::to_value(&f).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"video_id": "v1", "proposals": [{"start": 1.0, "end": 2.0, "confidence": 0.5}]})
        );
    }

    proptest! {
        #[test]
        fn tiou_symmetric_and_bounded(a0 in 0.0f64..50.0, al in 0.01f64..20.0, b0 in 0.0f64..50.0, bl in 0.01f64..20.0) {
            let a = (a0, a0 + al);
            let b = (b0, b0 + bl);
            let x = temporal_iou(a, b);
            prop_assert_eq!(x, temporal_iou(b, a));
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(temporal_iou(a, a), 1.0);
            if a != b {
                prop_assert!(x < 1.0);
            }
        }
    }
}
