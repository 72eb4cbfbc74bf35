//! Dense video captioning: model assembly, training and evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, ModelKind, StepLog, CHECKPOINT_VERSION};
use super::config::TrainConfig;
use super::synth::{Split, SyntheticCorpus, Video};
use crate::autodiff::{Graph, Var};
use crate::captioning::{
    weighted_total_graph, CaptionFile, Captioner, Modality, StreamBatch, StreamData, StreamInput,
    StreamKind, StreamSpec, VideoCaptions, Vocabulary,
};
use crate::causal::{attach_borrowed, CsWindow, InterventionNet};
use crate::confounder::{build_from_rois, ConfounderDictionary, RoI};
use crate::error::{invalid, Error, Result};
use crate::metrics::{bleu_n, dvc_evaluate, tokenize, DvcPrediction, MetricReport, Segment};
use crate::params::{Adam, ParamStore};
use crate::proposal::{assign_labels, mask_loss_graph, temporal_iou, Anchor, ProposalNet};
use crate::tensor::Tensor;

/// Names of the four loss components, in weight order.
pub const DVC_LOSS_NAMES: [&str; 4] = ["proposal", "common_sense", "mask", "caption"];

/// Where evaluation segments come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalSource {
    GroundTruth,
    Learned,
}

impl ProposalSource {
    pub fn name(self) -> &'static str {
        match self {
            ProposalSource::GroundTruth => "gt",
            ProposalSource::Learned => "learned",
        }
    }
}

#[derive(Clone, Debug)]
pub struct DvcModel {
    pub causal: Option<InterventionNet>,
    pub proposal: ProposalNet,
    pub captioner: Captioner,
}

/// A trainable DVC model with its data-dependent context.
#[derive(Clone, Debug)]
pub struct DvcSystem {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub dictionary: ConfounderDictionary,
    pub store: ParamStore,
    pub model: DvcModel,
    pub optimizer: Adam,
    pub step: usize,
    pub history: Vec<StepLog>,
}

/// Confounder dictionary from every RoI of the training split.
pub fn corpus_dictionary(corpus: &SyntheticCorpus) -> Result<ConfounderDictionary> {
    let videos = corpus.split_videos(Split::Train);
    let rois = videos.iter().flat_map(|v| v.rois.iter().flatten());
    build_from_rois(rois, corpus.config.num_classes, corpus.config.roi_dim)
}

/// Minibatch of item indices for `step`: epoch permutations are derived from
/// `(seed, epoch)` alone, so any step can be recomputed after a restart.
pub fn batch_indices(seed: u64, step: usize, items: usize, batch: usize) -> Vec<usize> {
    if items == 0 {
        return Vec::new();
    }
    let batch = batch.clamp(1, items);
    let per_epoch = items.div_ceil(batch);
    let (epoch, pos) = (step / per_epoch, step % per_epoch);
    let mut perm: Vec<usize> = (0..items).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(
        seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    ));
    perm[pos * batch..((pos + 1) * batch).min(items)].to_vec()
}

/// Frame `i` is centered at `(i + 0.5)·step`.
pub fn frame_centers(frames: usize, step: f64) -> Vec<f64> {
    (0..frames).map(|i| (i as f64 + 0.5) * step).collect()
}

/// Frames whose centers fall in `[start, end]` as `(first, count)`; falls
/// back to the frame nearest the midpoint when none do.
pub fn frame_span(frames: usize, step: f64, start: f64, end: f64) -> (usize, usize) {
    let centers = frame_centers(frames, step);
    let inside: Vec<usize> = (0..frames)
        .filter(|&i| centers[i] >= start && centers[i] <= end)
        .collect();
    match (inside.first(), inside.last()) {
        (Some(&a), Some(&b)) => (a, b - a + 1),
        _ => {
            let mid = 0.5 * (start + end);
            let nearest = (0..frames)
                .min_by(|&a, &b| {
                    (centers[a] - mid)
                        .abs()
                        .total_cmp(&(centers[b] - mid).abs())
                })
                .unwrap_or(0);
            (nearest, 1)
        }
    }
}

/// Anchor with the highest tIoU against `span`; ties go to the lowest id.
pub fn best_anchor(anchors: &[Anchor], span: (f64, f64)) -> Option<&Anchor> {
    let mut best: Option<(&Anchor, f64)> = None;
    for a in anchors {
        let iou = temporal_iou((a.start, a.end), span);
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((a, iou));
        }
    }
    best.map(|(a, _)| a)
}

/// Speech token ids heard inside `[start, end]`; `[PAD]` when silent.
pub fn speech_tokens(video: &Video, vocab: &Vocabulary, start: f64, end: f64) -> Vec<usize> {
    let ids: Vec<usize> = video
        .speech
        .iter()
        .filter(|w| w.time >= start && w.time <= end)
        .map(|w| vocab.id(&w.word))
        .collect();
    if ids.is_empty() {
        vec![Vocabulary::PAD]
    } else {
        ids
    }
}

fn roi_slices(video: &Video) -> Vec<&[RoI]> {
    video.rois.iter().map(Vec::as_slice).collect()
}

fn build_model(
    config: &TrainConfig,
    vocab_size: usize,
    store: &mut ParamStore,
) -> Result<DvcModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cs_dim = if config.flags.common_sense {
        config.model.cs_hidden
    } else {
        0
    };
    let causal = config
        .flags
        .common_sense
        .then(|| InterventionNet::new(store, &mut rng, "dvc.cs", config.causal()));
    let proposal = ProposalNet::new(
        store,
        &mut rng,
        "dvc.proposal",
        config.corpus.visual_dim,
        config.anchors(),
        config.proposal(),
    );
    let streams = [
        StreamSpec {
            modality: Modality::Visual,
            kind: StreamKind::Features(config.corpus.visual_dim + cs_dim),
        },
        StreamSpec {
            modality: Modality::Audio,
            kind: StreamKind::Features(config.corpus.audio_dim),
        },
        StreamSpec {
            modality: Modality::Speech,
            kind: StreamKind::Tokens(vocab_size),
        },
    ];
    let captioner = Captioner::new(
        store,
        &mut rng,
        "dvc.captioner",
        &streams,
        vocab_size,
        config.captioner(),
    )?;
    Ok(DvcModel {
        causal,
        proposal,
        captioner,
    })
}

/// Graph nodes of the four loss components for a batch.
pub struct DvcLosses {
    pub proposal: Var,
    pub common_sense: Var,
    pub mask: Var,
    pub caption: Var,
}

impl DvcLosses {
    pub fn as_array(&self) -> [Var; 4] {
        [self.proposal, self.common_sense, self.mask, self.caption]
    }
}

impl DvcSystem {
    pub fn new(config: TrainConfig, corpus: &SyntheticCorpus) -> Result<Self> {
        config.validate()?;
        if corpus.config.visual_dim != config.corpus.visual_dim
            || corpus.config.audio_dim != config.corpus.audio_dim
            || corpus.config.roi_dim != config.corpus.roi_dim
            || corpus.config.num_classes != config.corpus.num_classes
        {
            return Err(Error::Config(
                "corpus dimensions differ from the training config".into(),
            ));
        }
        let vocab = corpus.vocabulary();
        let dictionary = corpus_dictionary(corpus)?;
        Self::assemble(config, vocab, dictionary)
    }

    fn assemble(
        config: TrainConfig,
        vocab: Vocabulary,
        dictionary: ConfounderDictionary,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = build_model(&config, vocab.len(), &mut store)?;
        let optimizer = Adam::new(config.adam(config.dvc.lr), &store);
        Ok(Self {
            config,
            vocab,
            dictionary,
            store,
            model,
            optimizer,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let ckpt = ckpt.expect_kind(ModelKind::Dvc)?;
        let vocab = Vocabulary::from_tokens(ckpt.vocab)?;
        let dictionary = ckpt
            .dictionary
            .ok_or_else(|| Error::Format("DVC checkpoint without a dictionary".into()))?;
        let mut sys = Self::assemble(ckpt.config, vocab, dictionary)?;
        check_same_layout(&sys.store, &ckpt.store)?;
        sys.store = ckpt.store;
        sys.optimizer = ckpt.optimizer;
        sys.step = ckpt.step;
        sys.history = ckpt.history;
        Ok(sys)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: ModelKind::Dvc,
            step: self.step,
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            history: self.history.clone(),
            dictionary: Some(self.dictionary.clone()),
            store: self.store.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Visual rows (with common-sense columns when enabled) for the whole video.
    fn visual_graph(&self, g: &mut Graph, video: &Video) -> Var {
        let v = g.constant(video.visual.clone());
        match &self.model.causal {
            Some(cs) => {
                let (f, _) = cs.frame_features(g, &roi_slices(video), &self.dictionary);
                g.concat_cols(&[v, f])
            }
            None => v,
        }
    }

    /// Loss components over `videos`.
    pub fn losses(&self, g: &mut Graph, videos: &[&Video], step: usize) -> Result<DvcLosses> {
        if videos.is_empty() {
            return Err(invalid("empty DVC batch"));
        }
        let cfg = &self.config;
        let step_len = cfg.corpus.frame_step;
        let proposal = &self.model.proposal;
        let mut proposal_terms = Vec::new();
        let mut mask_terms = Vec::new();
        let mut windows = Vec::new();
        let mut visual_items = Vec::new();
        let mut audio_items = Vec::new();
        let mut speech_items: Vec<Vec<usize>> = Vec::new();
        let mut targets = Vec::new();
        for video in videos {
            if video.events.is_empty() {
                continue;
            }
            let frames = video.frames();
            let times = frame_centers(frames, step_len);
            let raw = g.constant(video.visual.clone());
            let scores = proposal.score(g, raw);
            let anchors = proposal.anchors.anchors(frames);
            let spans: Vec<(f64, f64)> = video.events.iter().map(|e| (e.start, e.end)).collect();
            let labels = assign_labels(
                &anchors,
                &spans,
                cfg.thresholds.positive_iou,
                cfg.thresholds.negative_iou,
            );
            proposal_terms.push(proposal.loss(g, &scores, &anchors, &labels));

            let visual = self.visual_graph(g, video);
            let audio = g.constant(video.audio.clone());
            for e in &video.events {
                let anchor = best_anchor(&anchors, (e.start, e.end))
                    .ok_or_else(|| invalid("video shorter than one frame"))?;
                let (sp, ep) = proposal.refined_endpoints(g, &scores, anchor);
                let mask = proposal
                    .mask
                    .forward(g, sp, ep, anchor.start, anchor.end, &times);
                mask_terms.push(mask_loss_graph(g, mask, anchor.start, anchor.end, &times));
                if cfg.flags.end_to_end {
                    visual_items.push(g.mul_col(visual, mask));
                    audio_items.push(g.mul_col(audio, mask));
                } else {
                    let (first, len) = frame_span(frames, step_len, e.start, e.end);
                    visual_items.push(g.slice_rows(visual, first, len));
                    audio_items.push(g.slice_rows(audio, first, len));
                }
                speech_items.push(speech_tokens(video, &self.vocab, e.start, e.end));
                targets.push(self.vocab.encode(&e.caption));
                let mid = &video.rois[(e.start_frame + e.end_frame - 1) / 2];
                if !mid.is_empty() {
                    windows.push(CsWindow {
                        rois: mid.clone(),
                        borrowed: Vec::new(),
                    });
                }
            }
        }
        if targets.is_empty() {
            return Err(invalid("DVC batch has no annotated events"));
        }
        let mean = |g: &mut Graph, terms: &[Var]| {
            let total = if terms.len() == 1 {
                terms[0]
            } else {
                let c = g.concat_rows(terms);
                g.sum(c)
            };
            g.scale(total, 1.0 / terms.len() as f64)
        };
        let proposal_loss = mean(g, &proposal_terms);
        let mask_loss = mean(g, &mask_terms);

        let common_sense = match &self.model.causal {
            Some(cs) if !windows.is_empty() => {
                attach_borrowed(&mut windows, cfg.borrow, cfg.seed ^ step as u64);
                let (total, centers) = cs.cs_loss(g, &windows, &self.dictionary);
                g.scale(total, 1.0 / centers.max(1) as f64)
            }
            _ => g.constant(Tensor::scalar(0.0)),
        };

        let stack = |g: &mut Graph, items: &[Var]| {
            let lengths = items.iter().map(|&v| g.shape(v).0).collect();
            StreamBatch {
                data: StreamData::Features(g.concat_rows(items)),
                lengths,
            }
        };
        let speech_refs: Vec<&[usize]> = speech_items.iter().map(Vec::as_slice).collect();
        let batches = [
            stack(g, &visual_items),
            stack(g, &audio_items),
            StreamBatch::tokens(&speech_refs),
        ];
        let caption = self
            .model
            .captioner
            .caption_loss_graph(g, &batches, &targets)?;
        Ok(DvcLosses {
            proposal: proposal_loss,
            common_sense,
            mask: mask_loss,
            caption,
        })
    }

    /// One optimizer step on the weighted total; parameters are untouched
    /// when the loss or a gradient is non-finite.
    pub fn train_step(&mut self, corpus: &SyntheticCorpus) -> Result<StepLog> {
        let train = corpus.split_videos(Split::Train);
        let picks = batch_indices(
            self.config.seed,
            self.step,
            train.len(),
            self.config.dvc.batch,
        );
        let videos: Vec<&Video> = picks.iter().map(|&i| train[i]).collect();
        let (log, grads) = {
            let mut g = Graph::new(&self.store);
            let losses = self.losses(&mut g, &videos, self.step)?;
            let parts = losses.as_array();
            let total = weighted_total_graph(&mut g, parts, &self.config.dvc.weights);
            let components = parts.iter().map(|&v| g.scalar(v)).collect();
            let log = StepLog {
                step: self.step + 1,
                total: g.scalar(total),
                components,
            };
            (log, g.backward(total))
        };
        if !log.total.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite(format!(
                "DVC loss at step {} ({:?})",
                self.step + 1,
                log.components
            )));
        }
        self.optimizer.apply(&mut self.store, &grads);
        self.step += 1;
        self.history.push(log.clone());
        Ok(log)
    }

    /// Trains until `config.dvc.steps`, writing checkpoints when `checkpoint` is set.
    pub fn train(&mut self, corpus: &SyntheticCorpus, checkpoint: Option<&Path>) -> Result<()> {
        self.train_until(corpus, self.config.dvc.steps, checkpoint)
    }

    pub fn train_until(
        &mut self,
        corpus: &SyntheticCorpus,
        steps: usize,
        checkpoint: Option<&Path>,
    ) -> Result<()> {
        let every = self.config.dvc.checkpoint_every;
        while self.step < steps {
            let log = self.train_step(corpus)?;
            if every > 0 && self.step % every == 0 {
                log::info!(
                    "dvc step {} loss {:.4} {:?}",
                    log.step,
                    log.total,
                    log.components
                );
                if let Some(path) = checkpoint {
                    self.checkpoint().save(path)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            self.checkpoint().save(path)?;
        }
        Ok(())
    }

    /// Full-length visual (with common-sense columns) and audio tensors.
    pub fn video_inputs(&self, video: &Video) -> (Tensor, Tensor) {
        let mut g = Graph::new(&self.store);
        let v = self.visual_graph(&mut g, video);
        (g.value(v).clone(), video.audio.clone())
    }

    fn mask_values(&self, frames: usize, sp: f64, ep: f64, sa: f64, ea: f64) -> Tensor {
        let mut g = Graph::new(&self.store);
        let times = frame_centers(frames, self.config.corpus.frame_step);
        let spv = g.constant(Tensor::scalar(sp));
        let epv = g.constant(Tensor::scalar(ep));
        let m = self
            .model
            .proposal
            .mask
            .forward(&mut g, spv, epv, sa, ea, &times);
        g.value(m).clone()
    }

    /// Caption for a segment. `anchor` is the `(start, end)` of the anchor a
    /// learned proposal came from; ground-truth segments use their own span.
    pub fn caption_segment(
        &self,
        video: &Video,
        inputs: &(Tensor, Tensor),
        start: f64,
        end: f64,
        anchor: Option<(f64, f64)>,
    ) -> Result<String> {
        let (visual, audio) = inputs;
        let frames = video.frames();
        let (v, a) = if self.config.flags.end_to_end {
            let (sa, ea) = anchor.unwrap_or((start, end));
            let m = self.mask_values(frames, start, end, sa, ea);
            let scale = |t: &Tensor| {
                let mut out = t.clone();
                for r in 0..frames {
                    let k = m.get(r, 0);
                    out.row_mut(r).iter_mut().for_each(|x| *x *= k);
                }
                out
            };
            (scale(visual), scale(audio))
        } else {
            let (first, len) = frame_span(frames, self.config.corpus.frame_step, start, end);
            (visual.slice_rows(first, len), audio.slice_rows(first, len))
        };
        let tracks = [
            StreamInput::Features(v),
            StreamInput::Features(a),
            StreamInput::Tokens(speech_tokens(video, &self.vocab, start, end)),
        ];
        let caption = self.model.captioner.generate(
            &self.store,
            &tracks,
            &self.vocab,
            self.config.model.max_caption_len,
        )?;
        Ok(caption.text)
    }

    /// Segments with captions for one video.
    pub fn predict(&self, video: &Video, source: ProposalSource) -> Result<DvcPrediction> {
        let inputs = self.video_inputs(video);
        let mut segments = Vec::new();
        match source {
            ProposalSource::GroundTruth => {
                for e in &video.events {
                    let text = self.caption_segment(video, &inputs, e.start, e.end, None)?;
                    segments.push(Segment::new(e.start, e.end, text).with_confidence(1.0));
                }
            }
            ProposalSource::Learned => {
                let proposals = self
                    .model
                    .proposal
                    .propose_events(&self.store, &video.visual)?;
                let anchors = self.model.proposal.anchors.anchors(video.frames());
                for p in proposals {
                    let a = &anchors[p.anchor_id];
                    let text = self.caption_segment(
                        video,
                        &inputs,
                        p.start,
                        p.end,
                        Some((a.start, a.end)),
                    )?;
                    segments.push(Segment::new(p.start, p.end, text).with_confidence(p.confidence));
                }
            }
        }
        Ok(DvcPrediction {
            video_id: video.id.clone(),
            segments,
        })
    }

    pub fn evaluate(
        &self,
        corpus: &SyntheticCorpus,
        split: Split,
        source: ProposalSource,
    ) -> Result<DvcEvaluation> {
        let videos = corpus.split_videos(split);
        if videos.is_empty() {
            return Err(invalid(format!("split {} has no videos", split.name())));
        }
        let predictions = videos
            .iter()
            .map(|v| self.predict(v, source))
            .collect::<Result<Vec<_>>>()?;
        let references: Vec<DvcPrediction> = videos.iter().map(|v| reference(v)).collect();
        let report = dvc_evaluate(&predictions, &references)?;
        Ok(DvcEvaluation {
            source,
            split,
            report,
            predictions: caption_file(&predictions),
        })
    }

    /// Corpus BLEU@4 (0..1) of ground-truth-segment captions over `videos`.
    pub fn caption_bleu4(&self, videos: &[&Video]) -> Result<f64> {
        let mut cands = Vec::new();
        let mut refs = Vec::new();
        for v in videos {
            let pred = self.predict(v, ProposalSource::GroundTruth)?;
            for (s, e) in pred.segments.iter().zip(&v.events) {
                cands.push(tokenize(&s.caption));
                refs.push(vec![tokenize(&e.caption)]);
            }
        }
        bleu_n(&cands, &refs, 4)
    }
}

pub(crate) fn check_same_layout(fresh: &ParamStore, loaded: &ParamStore) -> Result<()> {
    let a: Vec<(&str, (usize, usize))> = fresh.iter().map(|(n, t)| (n, t.shape())).collect();
    let b: Vec<(&str, (usize, usize))> = loaded.iter().map(|(n, t)| (n, t.shape())).collect();
    if a != b {
        return Err(Error::Format(
            "checkpoint parameters do not match the configured model".into(),
        ));
    }
    Ok(())
}

pub fn reference(video: &Video) -> DvcPrediction {
    DvcPrediction {
        video_id: video.id.clone(),
        segments: video
            .events
            .iter()
            .map(|e| Segment::new(e.start, e.end, e.caption.clone()))
            .collect(),
    }
}

pub fn caption_file(predictions: &[DvcPrediction]) -> CaptionFile {
    predictions
        .iter()
        .map(|p| {
            (
                p.video_id.clone(),
                VideoCaptions {
                    duration: None,
                    timestamps: p.segments.iter().map(|s| [s.start, s.end]).collect(),
                    sentences: p.segments.iter().map(|s| s.caption.clone()).collect(),
                    confidences: Some(
                        p.segments
                            .iter()
                            .map(|s| s.confidence.unwrap_or(1.0))
                            .collect(),
                    ),
                },
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DvcEvaluation {
    pub source: ProposalSource,
    pub split: Split,
    pub report: MetricReport,
    pub predictions: CaptionFile,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::CorpusConfig;
    use crate::harness::synth::synth_corpus;

    fn tiny() -> (TrainConfig, SyntheticCorpus) {
        let mut cfg = TrainConfig::default();
        cfg.corpus = CorpusConfig {
            videos: 4,
            max_events: 2,
            qa_samples: 4,
            ..CorpusConfig::default()
        };
        cfg.dvc.steps = 3;
        cfg.dvc.batch = 2;
        cfg.dvc.checkpoint_every = 2;
        let corpus = synth_corpus(cfg.seed, &cfg.corpus).unwrap();
        (cfg, corpus)
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        for step0 in [0, 3, 6] {
            let mut all: Vec<usize> = (step0..step0 + 3)
                .flat_map(|s| batch_indices(9, s, 7, 3))
                .collect();
            all.sort();
            assert_eq!(all, (0..7).collect::<Vec<_>>());
        }
        assert_eq!(batch_indices(9, 4, 7, 3), batch_indices(9, 4, 7, 3));
    }

    #[test]
    fn frame_span_uses_centers_with_fallback() {
        assert_eq!(frame_span(10, 1.0, 2.0, 5.0), (2, 3));
        assert_eq!(frame_span(10, 1.0, 2.6, 2.9), (2, 1));
        assert_eq!(frame_span(10, 1.0, 0.0, 10.0), (0, 10));
    }

    #[test]
    fn training_runs_and_is_reproducible() {
        let (cfg, corpus) = tiny();
        let mut a = DvcSystem::new(cfg.clone(), &corpus).unwrap();
        let mut b = DvcSystem::new(cfg, &corpus).unwrap();
        a.train(&corpus, None).unwrap();
        b.train(&corpus, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.store, b.store);
        assert!(a
            .history
            .iter()
            .all(|h| h.components.len() == 4 && h.total.is_finite()));
    }

    #[test]
    fn gt_mode_trains_and_both_sources_evaluate() {
        let (mut cfg, corpus) = tiny();
        cfg.flags.end_to_end = false;
        cfg.flags.common_sense = false;
        let mut sys = DvcSystem::new(cfg, &corpus).unwrap();
        sys.train(&corpus, None).unwrap();
        assert_eq!(sys.history[0].components[1], 0.0);
        for source in [ProposalSource::GroundTruth, ProposalSource::Learned] {
            let ev = sys.evaluate(&corpus, Split::Train, source).unwrap();
            assert_eq!(ev.report.per_threshold.len(), 4);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dvc.ckpt");
        let (cfg, corpus) = tiny();
        let mut full = DvcSystem::new(cfg.clone(), &corpus).unwrap();
        full.train(&corpus, None).unwrap();
        let mut part = DvcSystem::new(cfg, &corpus).unwrap();
        part.train_until(&corpus, 2, Some(&path)).unwrap();
        let mut resumed = DvcSystem::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
        resumed.train(&corpus, None).unwrap();
        assert_eq!(resumed.store, full.store);
        assert_eq!(resumed.history, full.history);
    }
}
