//! Causal-intervention ("common-sense") region encoder.
//!
//! The conventional likelihood marginalizes the confounder with the
//! conditional weights `P(z|X)`:
//!
//! ```text
//! P(Y|X)     = Σ_z P(Y|X,z) · P(z|X)
//! P(Y|do(X)) = Σ_z P(Y|X,z) · P(z)        (backdoor adjustment)
//! ```
//!
//! `P(Y|X,z)` is `softmax(f(x, z))`, where `f` is a feed-forward trunk over
//! the concatenation `[x; z]` followed by a linear context head. The
//! expectation over `z` is approximated by moving it inside the softmax
//! (normalized weighted geometric mean):
//!
//! ```text
//! P(Y|do(X)) ≈ softmax( Σ_z P(z) · f(x, z) )
//! ```
//!
//! Because the context head is affine, `Σ_z P(z)·f(x,z)` equals the head
//! applied to the prior-weighted trunk hidden `Σ_z P(z)·trunk([x; z])`.
//! That pooled hidden vector is the per-RoI common-sense feature; a frame's
//! feature is the mean over its RoIs.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, LOG_CLAMP};
use crate::confounder::{class_prior, ConfounderDictionary, RoI};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::Linear;
use crate::params::{Adam, ParamStore};
use crate::proposal::EventProposal;
use crate::tensor::{softmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalConfig {
    /// RoI feature dimension `d`.
    pub feature_dim: usize,
    /// Trunk hidden (and common-sense feature) dimension `h`.
    pub hidden_dim: usize,
    /// Number of object classes `N`.
    pub num_classes: usize,
    /// Number of trunk layers.
    pub depth: usize,
}

impl Default for CausalConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            hidden_dim: 128,
            num_classes: 12,
            depth: 2,
        }
    }
}

/// Self predictor plus the intervention-based context predictor.
#[derive(Clone, Debug)]
pub struct InterventionNet {
    pub config: CausalConfig,
    pub trunk: Vec<Linear>,
    pub self_head: Linear,
    pub context_head: Linear,
}

/// Per-RoI outputs of one batched forward pass.
pub struct RoiForward {
    /// `R×N` clamped log-probabilities of the self predictor.
    pub self_log_probs: Var,
    /// `R×N` clamped log-probabilities of the context predictor (NWGM form).
    pub context_log_probs: Var,
    /// `R×h` prior-weighted trunk hidden vectors.
    pub pooled_hidden: Var,
}

impl InterventionNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        config: CausalConfig,
    ) -> Self {
        assert!(config.depth >= 1, "trunk depth must be at least 1");
        let (d, h, n) = (config.feature_dim, config.hidden_dim, config.num_classes);
        let trunk = (0..config.depth)
            .map(|i| {
                let in_dim = if i == 0 { 2 * d } else { h };
                Linear::new(store, rng, &format!("{prefix}.trunk.{i}"), in_dim, h)
            })
            .collect();
        Self {
            trunk,
            self_head: Linear::new(store, rng, &format!("{prefix}.self_head"), d, n),
            context_head: Linear::new(store, rng, &format!("{prefix}.context_head"), h, n),
            config,
        }
    }

    /// Zeroes the self head so the self predictor starts uniform.
    pub fn zero_self_head(&self, store: &mut ParamStore) {
        store.get_mut(self.self_head.w).data_mut().fill(0.0);
        if let Some(b) = self.self_head.b {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }

    fn check_dict(&self, dict: &ConfounderDictionary) -> Result<()> {
        if dict.dim() != self.config.feature_dim {
            return Err(shape_err(format!(
                "dictionary dim {} != feature dim {}",
                dict.dim(),
                self.config.feature_dim
            )));
        }
        Ok(())
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.feature_dim {
            return Err(shape_err(format!(
                "RoI feature length {} != {}",
                x.len(),
                self.config.feature_dim
            )));
        }
        Ok(())
    }

    /// Trunk hidden for every `(x_r, z_n)` pair, rows ordered `r*Nz + n`.
    pub fn pair_hidden(
        &self,
        g: &mut Graph,
        features: &[&[f64]],
        dict: &ConfounderDictionary,
    ) -> Var {
        let d = self.config.feature_dim;
        let nz = dict.num_classes();
        let mut pairs = Tensor::zeros(features.len() * nz, 2 * d);
        for (r, x) in features.iter().enumerate() {
            for z in 0..nz {
                let row = pairs.row_mut(r * nz + z);
                row[..d].copy_from_slice(x);
                row[d..].copy_from_slice(dict.entry(z));
            }
        }
        let mut h = g.constant(pairs);
        for layer in &self.trunk {
            let pre = layer.forward(g, h);
            h = g.tanh(pre);
        }
        h
    }

    /// Batched forward over `features` (each of length `d`).
    pub fn forward_rois(
        &self,
        g: &mut Graph,
        features: &[&[f64]],
        dict: &ConfounderDictionary,
    ) -> RoiForward {
        let hidden = self.pair_hidden(g, features, dict);
        let prior = class_prior(dict);
        let nz = prior.len();
        let mut pool = Tensor::zeros(features.len(), features.len() * nz);
        for r in 0..features.len() {
            for (z, &p) in prior.iter().enumerate() {
                pool.set(r, r * nz + z, p);
            }
        }
        let pool = g.constant(pool);
        let pooled_hidden = g.matmul(pool, hidden);
        let context_logits = self.context_head.forward(g, pooled_hidden);
        let context_probs = g.softmax_rows(context_logits);
        let context_log_probs = g.log(context_probs);

        let x = g.constant(Tensor::from_rows(features));
        let self_logits = self.self_head.forward(g, x);
        let self_probs = g.softmax_rows(self_logits);
        let self_log_probs = g.log(self_probs);
        RoiForward {
            self_log_probs,
            context_log_probs,
            pooled_hidden,
        }
    }

    /// `f(x, z)` for every dictionary entry: an `Nz×N` logit matrix.
    pub fn logits_per_confounder(
        &self,
        store: &ParamStore,
        x: &[f64],
        dict: &ConfounderDictionary,
    ) -> Result<Tensor> {
        self.check_x(x)?;
        self.check_dict(dict)?;
        let mut g = Graph::new(store);
        let hidden = self.pair_hidden(&mut g, &[x], dict);
        let logits = self.context_head.forward(&mut g, hidden);
        Ok(g.value(logits).clone())
    }

    /// Conventional likelihood `Σ_z softmax(f(x,z)) · cond[z]`.
    pub fn likelihood(
        &self,
        store: &ParamStore,
        x: &[f64],
        dict: &ConfounderDictionary,
        cond: &[f64],
    ) -> Result<Vec<f64>> {
        if cond.len() != dict.num_classes() {
            return Err(shape_err(format!(
                "conditional has {} weights for {} confounders",
                cond.len(),
                dict.num_classes()
            )));
        }
        let total: f64 = cond.iter().sum();
        if (total - 1.0).abs() > 1e-6 || cond.iter().any(|&c| c < 0.0) {
            return Err(invalid(format!(
                "conditional weights are not a distribution (sum {total})"
            )));
        }
        let logits = self.logits_per_confounder(store, x, dict)?;
        Ok(expected_softmax(&logits, cond))
    }

    /// Interventional prediction `softmax(Σ_z P(z) f(x,z))`.
    pub fn intervene(
        &self,
        store: &ParamStore,
        x: &[f64],
        dict: &ConfounderDictionary,
    ) -> Result<Vec<f64>> {
        let logits = self.logits_per_confounder(store, x, dict)?;
        Ok(softmax(&nwgm_expectation(&logits, class_prior(dict))?))
    }

    /// Exact backdoor expectation `Σ_z P(z) softmax(f(x,z))`, without the
    /// geometric-mean approximation.
    pub fn intervene_exact(
        &self,
        store: &ParamStore,
        x: &[f64],
        dict: &ConfounderDictionary,
    ) -> Result<Vec<f64>> {
        let logits = self.logits_per_confounder(store, x, dict)?;
        Ok(expected_softmax(&logits, class_prior(dict)))
    }

    /// Class distribution of the center object.
    pub fn self_predict(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let mut g = Graph::new(store);
        let xv = g.constant(Tensor::row_vector(x.to_vec()));
        let logits = self.self_head.forward(&mut g, xv);
        Ok(softmax(g.value(logits).data()))
    }

    /// Context-label distribution, routed through the pooled trunk hidden.
    pub fn context_predict(
        &self,
        store: &ParamStore,
        x: &[f64],
        dict: &ConfounderDictionary,
    ) -> Result<Vec<f64>> {
        self.check_x(x)?;
        self.check_dict(dict)?;
        let mut g = Graph::new(store);
        let out = self.forward_rois(&mut g, &[x], dict);
        Ok(g.value(out.context_log_probs)
            .data()
            .iter()
            .map(|v| v.exp())
            .collect())
    }

    /// Per-frame common-sense features with label-set gating, on the tape.
    ///
    /// Returns an `F×h` node (zero rows for frames without RoIs) and the
    /// number of fresh computations.
    pub fn frame_features(
        &self,
        g: &mut Graph,
        frames: &[&[RoI]],
        dict: &ConfounderDictionary,
    ) -> (Var, usize) {
        let plan = GatingPlan::new(frames);
        let h = self.config.hidden_dim;
        if plan.fresh_frames.iter().all(|&f| frames[f].is_empty()) {
            return (
                g.constant(Tensor::zeros(frames.len(), h)),
                plan.fresh_frames.len(),
            );
        }
        let mut features: Vec<&[f64]> = Vec::new();
        let mut owner: Vec<usize> = Vec::new();
        for &f in &plan.fresh_frames {
            for roi in frames[f] {
                features.push(&roi.feature);
                owner.push(f);
            }
        }
        let hidden = self.pair_hidden(g, &features, dict);
        let prior = class_prior(dict);
        let nz = prior.len();
        let mut pool = Tensor::zeros(frames.len(), features.len() * nz);
        for (f, &src) in plan.source.iter().enumerate() {
            let count = frames[src].len();
            if count == 0 {
                continue;
            }
            for (r, _) in owner.iter().enumerate().filter(|(_, &o)| o == src) {
                for (z, &p) in prior.iter().enumerate() {
                    pool.set(f, r * nz + z, p / count as f64);
                }
            }
        }
        let pool = g.constant(pool);
        (g.matmul(pool, hidden), plan.fresh_frames.len())
    }

    /// Common-sense features for every frame inside `event`.
    ///
    /// A frame whose set of RoI class labels equals the previous frame's set
    /// reuses that frame's feature instead of recomputing it.
    pub fn encode_event(
        &self,
        store: &ParamStore,
        frames: &[Frame],
        duration: f64,
        event: &EventProposal,
        event_id: usize,
        provider: &dyn RoiProvider,
        dict: &ConfounderDictionary,
        seed: u64,
    ) -> Result<EncodedEvent> {
        if event.start < 0.0 || event.end > duration + 1e-9 || event.start >= event.end {
            return Err(invalid(format!(
                "event [{}, {}] outside video of duration {duration}",
                event.start, event.end
            )));
        }
        self.check_dict(dict)?;
        let inside: Vec<&Frame> = frames
            .iter()
            .filter(|f| f.time >= event.start && f.time < event.end)
            .collect();
        let rois: Vec<Vec<RoI>> = inside.iter().map(|f| provider.rois(f, seed)).collect();
        for r in rois.iter().flatten() {
            r.validate(self.config.num_classes, self.config.feature_dim)?;
        }
        let refs: Vec<&[RoI]> = rois.iter().map(Vec::as_slice).collect();
        let plan = GatingPlan::new(&refs);
        let mut g = Graph::new(store);
        let (features, _) = self.frame_features(&mut g, &refs, dict);
        let values = g.value(features);
        let out = inside
            .iter()
            .enumerate()
            .map(|(i, f)| CommonSenseFeature {
                vector: values.row(i).to_vec(),
                frame: f.index,
                source_frame: inside[plan.source[i]].index,
                event_id,
                empty: refs[i].is_empty(),
            })
            .collect();
        let stats = EncodeStats {
            fresh: plan.fresh_frames.len(),
            cache_hits: inside.len() - plan.fresh_frames.len(),
            empty_frames: refs.iter().filter(|r| r.is_empty()).count(),
        };
        Ok(EncodedEvent {
            features: out,
            stats,
        })
    }

    /// Summed multi-task loss over every center RoI of every window, plus
    /// the number of centers.
    pub fn cs_loss(
        &self,
        g: &mut Graph,
        windows: &[CsWindow],
        dict: &ConfounderDictionary,
    ) -> (Var, usize) {
        let n = self.config.num_classes;
        let mut features: Vec<&[f64]> = Vec::new();
        let mut classes = Vec::new();
        let mut context_targets: Vec<Vec<f64>> = Vec::new();
        for w in windows {
            for (i, center) in w.rois.iter().enumerate() {
                let mut dist = vec![0.0; n];
                let mut k = 0usize;
                let others = w
                    .rois
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, r)| r);
                for ctx in others.chain(&w.borrowed) {
                    dist[ctx.class_id] += 1.0;
                    k += 1;
                }
                if k > 0 {
                    dist.iter_mut().for_each(|v| *v /= k as f64);
                }
                features.push(&center.feature);
                classes.push(center.class_id);
                context_targets.push(dist);
            }
        }
        if features.is_empty() {
            return (g.constant(Tensor::scalar(0.0)), 0);
        }
        let out = self.forward_rois(g, &features, dict);
        let picked = g.pick(out.self_log_probs, &classes);
        let self_total = g.sum(picked);
        // Mean context NLL per center: −Σ_c q[c]·log p[c] with q the context-label frequencies.
        let targets = g.constant(Tensor::from_rows(&context_targets));
        let weighted = g.mul(out.context_log_probs, targets);
        let context_total = g.sum(weighted);
        let total = g.add(self_total, context_total);
        (g.scale(total, -1.0), features.len())
    }
}

/// `Σ_z weights[z] · softmax(logits[z])`.
fn expected_softmax(logits: &Tensor, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.cols()];
    for (z, &w) in weights.iter().enumerate() {
        for (o, p) in out.iter_mut().zip(softmax(logits.row(z))) {
            *o += w * p;
        }
    }
    out
}

/// Prior-weighted logit average `Σ_z prior[z] · logits[z]`; the caller applies
/// the softmax.
pub fn nwgm_expectation(logits_per_z: &Tensor, prior: &[f64]) -> Result<Vec<f64>> {
    if logits_per_z.rows() != prior.len() {
        return Err(shape_err(format!(
            "{} logit rows for a prior of length {}",
            logits_per_z.rows(),
            prior.len()
        )));
    }
    let mut out = vec![0.0; logits_per_z.cols()];
    for (z, &p) in prior.iter().enumerate() {
        for (o, &l) in out.iter_mut().zip(logits_per_z.row(z)) {
            *o += p * l;
        }
    }
    Ok(out)
}

/// Negative log-likelihood of the true class, with `p` clamped at 1e-12.
pub fn loss_self(p: &[f64], true_class: usize) -> Result<f64> {
    let prob = p
        .get(true_class)
        .ok_or_else(|| invalid(format!("class {true_class} outside [0, {})", p.len())))?;
    Ok(-prob.max(LOG_CLAMP).ln())
}

/// Context loss for one `(center, context)` pair; same form as [`loss_self`].
pub fn loss_cxt(p: &[f64], context_class: usize) -> Result<f64> {
    loss_self(p, context_class)
}

/// `L_self + mean(L_cxt)`, or `L_self` when there are no contexts.
pub fn loss_cs(l_self: f64, context_losses: &[f64]) -> f64 {
    if context_losses.is_empty() {
        return l_self;
    }
    l_self + context_losses.iter().sum::<f64>() / context_losses.len() as f64
}

/// One frame position in a video.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    pub time: f64,
}

/// Supplies the detected regions of a frame.
///
/// Implementations must be deterministic in `(frame, seed)`.
pub trait RoiProvider {
    fn rois(&self, frame: &Frame, seed: u64) -> Vec<RoI>;
}

/// Replays a fixed list of RoIs per frame index.
#[derive(Clone, Debug, Default)]
pub struct ScriptedRoiProvider {
    pub per_frame: Vec<Vec<RoI>>,
}

impl RoiProvider for ScriptedRoiProvider {
    fn rois(&self, frame: &Frame, _seed: u64) -> Vec<RoI> {
        self.per_frame.get(frame.index).cloned().unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommonSenseFeature {
    pub vector: Vec<f64>,
    /// Frame this feature belongs to.
    pub frame: usize,
    /// Frame whose RoIs produced the vector (differs from `frame` on a cache hit).
    pub source_frame: usize,
    pub event_id: usize,
    /// The frame had no RoIs; `vector` is zero.
    pub empty: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeStats {
    pub fresh: usize,
    pub cache_hits: usize,
    pub empty_frames: usize,
}

#[derive(Clone, Debug)]
pub struct EncodedEvent {
    pub features: Vec<CommonSenseFeature>,
    pub stats: EncodeStats,
}

/// Which frames need a fresh computation and where every frame's feature comes from.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingPlan {
    pub fresh_frames: Vec<usize>,
    pub source: Vec<usize>,
}

impl GatingPlan {
    pub fn new(frames: &[&[RoI]]) -> Self {
        let mut fresh_frames = Vec::new();
        let mut source = Vec::with_capacity(frames.len());
        let mut previous: Option<BTreeSet<usize>> = None;
        for (i, rois) in frames.iter().enumerate() {
            let labels: BTreeSet<usize> = rois.iter().map(|r| r.class_id).collect();
            if previous.as_ref() == Some(&labels) {
                source.push(*source.last().expect("previous frame exists"));
            } else {
                fresh_frames.push(i);
                source.push(i);
                previous = Some(labels);
            }
        }
        Self {
            fresh_frames,
            source,
        }
    }
}

/// RoIs that co-occur in one event window, plus contexts borrowed from other events.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsWindow {
    pub rois: Vec<RoI>,
    pub borrowed: Vec<RoI>,
}

/// Attaches `borrow` RoIs drawn from other windows to each window.
pub fn attach_borrowed(windows: &mut [CsWindow], borrow: usize, seed: u64) {
    if borrow == 0 || windows.len() < 2 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pools: Vec<Vec<RoI>> = windows.iter().map(|w| w.rois.clone()).collect();
    for (i, w) in windows.iter_mut().enumerate() {
        let candidates: Vec<&RoI> = pools
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, p)| p)
            .collect();
        w.borrowed = candidates
            .choose_multiple(&mut rng, borrow)
            .map(|r| (*r).clone())
            .collect();
    }
}

/// One optimizer step on the summed common-sense loss.
///
/// A non-finite loss or gradient leaves the parameters untouched.
pub fn train_step_cs(
    net: &InterventionNet,
    store: &mut ParamStore,
    optimizer: &mut Adam,
    batch: &[CsWindow],
    dict: &ConfounderDictionary,
) -> Result<f64> {
    if batch.iter().all(|w| w.rois.is_empty()) {
        return Err(invalid("empty common-sense batch"));
    }
    let (loss, grads) = {
        let mut g = Graph::new(store);
        let (loss, _) = net.cs_loss(&mut g, batch, dict);
        (g.scalar(loss), g.backward(loss))
    };
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::NonFinite(format!("common-sense loss ({loss})")));
    }
    optimizer.apply(store, &grads);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::AdamConfig;
    use rand::Rng;

    fn setup(
        n: usize,
        d: usize,
        h: usize,
        seed: u64,
    ) -> (ParamStore, InterventionNet, ConfounderDictionary) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = InterventionNet::new(
            &mut store,
            &mut rng,
            "cs",
            CausalConfig {
                feature_dim: d,
                hidden_dim: h,
                num_classes: n,
                depth: 2,
            },
        );
        let entries = Tensor::from_vec(
            n,
            d,
            (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let counts = (0..n).map(|i| 1 + i as u64).collect();
        (
            store,
            net,
            ConfounderDictionary::from_parts(entries, counts).unwrap(),
        )
    }

    fn roi(class: usize, feature: Vec<f64>) -> RoI {
        RoI::new(class, [0.1, 0.1, 0.5, 0.5], feature)
    }

    #[test]
    fn nwgm_examples() {
        let logits = Tensor::from_rows(&[[0.0, 2.0], [2.0, 0.0]]);
        assert_eq!(
            nwgm_expectation(&logits, &[0.5, 0.5]).unwrap(),
            vec![1.0, 1.0]
        );
        assert_eq!(
            nwgm_expectation(&logits, &[1.0, 0.0]).unwrap(),
            vec![0.0, 2.0]
        );
        assert!(nwgm_expectation(&logits, &[1.0]).is_err());
    }

    #[test]
    fn nwgm_matches_weighted_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::from_vec(4, 4, (0..16).map(|_| rng.random_range(-3.0..3.0)).collect());
        let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..1.0)).collect();
        let prior: Vec<f64> = raw.iter().map(|v| v / raw.iter().sum::<f64>()).collect();
        let got = nwgm_expectation(&logits, &prior).unwrap();
        for c in 0..4 {
            let oracle = prior[0] * logits.get(0, c)
                + prior[1] * logits.get(1, c)
                + prior[2] * logits.get(2, c)
                + prior[3] * logits.get(3, c);
            assert!((got[c] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_self_examples() {
        assert!((loss_self(&[0.25; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(loss_self(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((loss_self(&[0.9, 0.1], 1).unwrap() - 2.302585).abs() < 1e-6);
        assert!(loss_self(&[0.5, 0.5], 2).is_err());
        assert!((loss_self(&[0.0, 1.0], 0).unwrap() - (-LOG_CLAMP.ln())).abs() < 1e-9);
    }

    #[test]
    fn loss_cs_examples() {
        assert_eq!(loss_cs(1.0, &[0.5, 1.5]), 2.0);
        assert_eq!(loss_cs(0.7, &[]), 0.7);
        let xs = [0.3, 1.2, 0.8, 2.5, 0.1];
        assert!((loss_cs(1.0, &xs) - (1.0 + 4.9 / 5.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_self_head_gives_uniform_prediction() {
        let (mut store, net, _) = setup(4, 3, 5, 1);
        net.zero_self_head(&mut store);
        let p = net.self_predict(&store, &[0.3, -1.0, 2.0]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn self_predict_is_a_deterministic_distribution() {
        let (store_a, net_a, _) = setup(5, 3, 4, 9);
        let (store_b, net_b, _) = setup(5, 3, 4, 9);
        let x = [0.1, 0.2, -0.3];
        let a = net_a.self_predict(&store_a, &x).unwrap();
        let b = net_b.self_predict(&store_b, &x).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn likelihood_rejects_unnormalized_conditional() {
        let (store, net, dict) = setup(3, 2, 4, 2);
        let err = net
            .likelihood(&store, &[0.1, 0.2], &dict, &[0.5, 0.5, 0.5])
            .unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn likelihood_matches_term_by_term_sum() {
        let (store, net, dict) = setup(4, 3, 6, 4);
        let x = [0.4, -0.2, 0.9];
        let cond = [0.1, 0.2, 0.3, 0.4];
        let got = net.likelihood(&store, &x, &dict, &cond).unwrap();
        let mut oracle = vec![0.0; 4];
        for (z, &w) in cond.iter().enumerate() {
            let single = ConfounderDictionary::from_parts(
                Tensor::row_vector(dict.entry(z).to_vec()),
                vec![1],
            )
            .unwrap();
            let logits = net.logits_per_confounder(&store, &x, &single).unwrap();
            let p = softmax(logits.row(0));
            for c in 0..4 {
                oracle[c] += w * p[c];
            }
        }
        for (a, b) in got.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn context_predict_equals_intervene() {
        let (store, net, dict) = setup(4, 3, 6, 8);
        let x = [0.5, 0.1, -0.7];
        let a = net.context_predict(&store, &x, &dict).unwrap();
        let b = net.intervene(&store, &x, &dict).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_dictionary_collapses() {
        let (store, net, _) = setup(3, 2, 4, 6);
        let dict =
            ConfounderDictionary::from_parts(Tensor::from_vec(1, 2, vec![0.3, -0.8]), vec![5])
                .unwrap();
        let x = [0.2, 0.4];
        let nwgm = net.intervene(&store, &x, &dict).unwrap();
        let exact = net.intervene_exact(&store, &x, &dict).unwrap();
        let lik = net.likelihood(&store, &x, &dict, &[1.0]).unwrap();
        for i in 0..3 {
            assert!((nwgm[i] - exact[i]).abs() <= 1e-12);
            assert!((nwgm[i] - lik[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn gating_plan_counts_label_set_changes() {
        let a = vec![roi(0, vec![0.0, 0.0]), roi(1, vec![0.0, 0.0])];
        let a_swapped = vec![
            roi(1, vec![1.0, 1.0]),
            roi(0, vec![1.0, 1.0]),
            roi(0, vec![2.0, 2.0]),
        ];
        let b = vec![roi(2, vec![0.0, 0.0])];
        let frames: Vec<&[RoI]> = vec![&a, &a_swapped, &b, &b, &a];
        let plan = GatingPlan::new(&frames);
        assert_eq!(plan.fresh_frames, vec![0, 2, 4]);
        assert_eq!(plan.source, vec![0, 0, 2, 2, 4]);
    }

    #[test]
    fn encode_event_reuses_features_and_flags_empty_frames() {
        let (store, net, dict) = setup(3, 2, 4, 3);
        let provider = ScriptedRoiProvider {
            per_frame: vec![
                vec![roi(0, vec![0.1, 0.2])],
                vec![roi(0, vec![0.5, 0.9])],
                vec![],
                vec![roi(1, vec![0.3, 0.3])],
            ],
        };
        let frames: Vec<Frame> = (0..4)
            .map(|i| Frame {
                index: i,
                time: i as f64,
            })
            .collect();
        let event = EventProposal::new(0.0, 4.0, 1.0, 0);
        let out = net
            .encode_event(&store, &frames, 4.0, &event, 7, &provider, &dict, 0)
            .unwrap();
        assert_eq!(
            out.stats,
            EncodeStats {
                fresh: 3,
                cache_hits: 1,
                empty_frames: 1
            }
        );
        assert_eq!(out.features[1].vector, out.features[0].vector);
        assert_eq!(out.features[1].source_frame, 0);
        assert!(out.features[2].empty && out.features[2].vector.iter().all(|&v| v == 0.0));
        assert!(out
            .features
            .iter()
            .all(|f| f.event_id == 7 && f.vector.len() == 4));
    }

    #[test]
    fn encode_event_rejects_out_of_bounds_event() {
        let (store, net, dict) = setup(3, 2, 4, 3);
        let frames = vec![Frame {
            index: 0,
            time: 0.0,
        }];
        let event = EventProposal::new(0.0, 5.0, 1.0, 0);
        let provider = ScriptedRoiProvider::default();
        assert!(net
            .encode_event(&store, &frames, 1.0, &event, 0, &provider, &dict, 0)
            .is_err());
    }

    #[test]
    fn cs_loss_matches_pointwise_formula() {
        let (store, net, dict) = setup(3, 2, 4, 12);
        let window = CsWindow {
            rois: vec![
                roi(0, vec![0.1, 0.2]),
                roi(1, vec![-0.3, 0.4]),
                roi(1, vec![0.0, 0.9]),
            ],
            borrowed: vec![roi(2, vec![0.5, 0.5])],
        };
        let mut g = Graph::new(&store);
        let (loss, centers) = net.cs_loss(&mut g, std::slice::from_ref(&window), &dict);
        assert_eq!(centers, 3);
        let mut oracle = 0.0;
        for (i, c) in window.rois.iter().enumerate() {
            let p_self = net.self_predict(&store, &c.feature).unwrap();
            let p_ctx = net.context_predict(&store, &c.feature, &dict).unwrap();
            let ctx: Vec<f64> = window
                .rois
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, r)| r)
                .chain(&window.borrowed)
                .map(|r| loss_cxt(&p_ctx, r.class_id).unwrap())
                .collect();
            oracle += loss_cs(loss_self(&p_self, c.class_id).unwrap(), &ctx);
        }
        assert!((g.scalar(loss) - oracle).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut store, net, dict) = setup(3, 2, 4, 12);
        let before = store.clone();
        let window = CsWindow {
            rois: vec![roi(0, vec![0.1, 0.2]), roi(1, vec![-0.3, 0.4])],
            borrowed: vec![],
        };
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            &store,
        );
        train_step_cs(&net, &mut store, &mut adam, &[window], &dict).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (mut store, net, dict) = setup(3, 2, 4, 12);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        assert!(train_step_cs(&net, &mut store, &mut adam, &[CsWindow::default()], &dict).is_err());
    }

    #[test]
    fn borrowed_contexts_come_from_other_windows() {
        let mut windows = vec![
            CsWindow {
                rois: vec![roi(0, vec![0.0, 0.0])],
                borrowed: vec![],
            },
            CsWindow {
                rois: vec![roi(1, vec![0.0, 0.0])],
                borrowed: vec![],
            },
        ];
        attach_borrowed(&mut windows, 1, 3);
        assert_eq!(windows[0].borrowed[0].class_id, 1);
        assert_eq!(windows[1].borrowed[0].class_id, 0);
    }
}
