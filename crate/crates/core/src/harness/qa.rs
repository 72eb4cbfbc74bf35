//! Video question answering: training and evaluation on the synthetic corpus.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, ModelKind, StepLog, CHECKPOINT_VERSION};
use super::config::TrainConfig;
use super::dvc::{
    batch_indices, check_same_layout, corpus_dictionary, frame_centers, DvcSystem, ProposalSource,
};
use super::synth::{QaItem, Split, SyntheticCorpus};
use crate::autodiff::{Graph, Var};
use crate::captioning::{weighted_total_graph, Vocabulary};
use crate::causal::{attach_borrowed, CsWindow, InterventionNet};
use crate::confounder::{ConfounderDictionary, RoI};
use crate::error::{invalid, Error, Result};
use crate::metrics::{qa_accuracy, tokenize};
use crate::params::{Adam, ParamStore};
use crate::tensor::Tensor;
use crate::videoqa::{predict, CaptionedEvent, QASample, QaModel, QaPrediction, Subtitle};

/// Names of the four loss components, in weight order.
pub const QA_LOSS_NAMES: [&str; 4] = ["common_sense", "answer", "frame_supervision", "in_out"];

/// Dense captions per video id.
pub type DenseCaptions = BTreeMap<String, Vec<CaptionedEvent>>;

fn token_ids(vocab: &Vocabulary, text: &str) -> Vec<usize> {
    tokenize(text).iter().map(|w| vocab.id(w)).collect()
}

/// Captions a DVC model produces on its own proposals, re-tokenized with `vocab`.
pub fn dense_captions(
    dvc: &DvcSystem,
    corpus: &SyntheticCorpus,
    vocab: &Vocabulary,
) -> Result<DenseCaptions> {
    corpus
        .videos
        .iter()
        .map(|v| {
            let pred = dvc.predict(v, ProposalSource::Learned)?;
            let events = pred
                .segments
                .iter()
                .map(|s| CaptionedEvent {
                    start: s.start,
                    end: s.end,
                    tokens: token_ids(vocab, &s.caption),
                })
                .collect();
            Ok((v.id.clone(), events))
        })
        .collect()
}

/// A model-ready sample for a corpus QA item.
pub fn build_sample(
    corpus: &SyntheticCorpus,
    vocab: &Vocabulary,
    item: &QaItem,
) -> Result<QASample> {
    let r = &item.record;
    let video = corpus
        .video(&r.video_ref)
        .ok_or_else(|| invalid(format!("{}: unknown video {}", r.qid, r.video_ref)))?;
    if item.clip_start >= item.clip_end || item.clip_end > video.frames() {
        return Err(invalid(format!("{}: clip outside video", r.qid)));
    }
    let len = item.clip_end - item.clip_start;
    let times = frame_centers(video.frames(), corpus.config.frame_step)
        [item.clip_start..item.clip_end]
        .to_vec();
    let span = r
        .span
        .map(|[s, e]| (s, e))
        .unwrap_or((times[0], times[len - 1]));
    Ok(QASample {
        qid: r.qid.clone(),
        question: token_ids(vocab, &r.question),
        answers: r.answers.iter().map(|a| token_ids(vocab, a)).collect(),
        correct: r.correct,
        subtitles: r
            .subtitles
            .iter()
            .map(|s| Subtitle {
                start: s.start,
                end: s.end,
                tokens: token_ids(vocab, &s.text),
            })
            .collect(),
        frames: video.visual.slice_rows(item.clip_start, len),
        frame_times: times,
        span,
    })
}

#[derive(Clone, Debug)]
struct Prepared {
    sample: QASample,
    video_ref: String,
    rois: Vec<Vec<RoI>>,
}

#[derive(Clone, Debug)]
pub struct QaSystem {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub dictionary: ConfounderDictionary,
    pub dense: Option<DenseCaptions>,
    pub store: ParamStore,
    pub causal: Option<InterventionNet>,
    pub model: QaModel,
    pub optimizer: Adam,
    pub step: usize,
    pub history: Vec<StepLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaEvaluation {
    pub split: Split,
    pub accuracy: f64,
    pub predictions: Vec<QaPrediction>,
}

impl QaSystem {
    /// `dense` must be present exactly when `use_dvc_features` is on.
    pub fn new(
        config: TrainConfig,
        corpus: &SyntheticCorpus,
        dense: Option<DenseCaptions>,
    ) -> Result<Self> {
        config.validate()?;
        if corpus.config.visual_dim != config.corpus.visual_dim
            || corpus.config.roi_dim != config.corpus.roi_dim
        {
            return Err(Error::Config(
                "corpus dimensions differ from the training config".into(),
            ));
        }
        Self::assemble(
            config,
            corpus.vocabulary(),
            corpus_dictionary(corpus)?,
            dense,
        )
    }

    fn assemble(
        config: TrainConfig,
        vocab: Vocabulary,
        dictionary: ConfounderDictionary,
        dense: Option<DenseCaptions>,
    ) -> Result<Self> {
        match (config.flags.use_dvc_features, dense.is_some()) {
            (true, false) => {
                return Err(Error::Config(
                    "use_dvc_features needs dense captions from a DVC checkpoint".into(),
                ))
            }
            (false, true) => {
                return Err(Error::Config(
                    "dense captions given but use_dvc_features is off".into(),
                ))
            }
            _ => {}
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let mut store = ParamStore::new();
        let causal = config
            .flags
            .common_sense
            .then(|| InterventionNet::new(&mut store, &mut rng, "qa.cs", config.causal()));
        let model = QaModel::new(
            &mut store,
            &mut rng,
            "qa.model",
            vocab.len(),
            config.videoqa(),
        )?;
        let optimizer = Adam::new(config.adam(config.qa.lr), &store);
        Ok(Self {
            config,
            vocab,
            dictionary,
            dense,
            store,
            causal,
            model,
            optimizer,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, dense: Option<DenseCaptions>) -> Result<Self> {
        let ckpt = ckpt.expect_kind(ModelKind::Qa)?;
        let vocab = Vocabulary::from_tokens(ckpt.vocab)?;
        let dictionary = ckpt
            .dictionary
            .ok_or_else(|| Error::Format("QA checkpoint without a dictionary".into()))?;
        let mut sys = Self::assemble(ckpt.config, vocab, dictionary, dense)?;
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
            kind: ModelKind::Qa,
            step: self.step,
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            history: self.history.clone(),
            dictionary: Some(self.dictionary.clone()),
            store: self.store.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    fn prepare(&self, corpus: &SyntheticCorpus, item: &QaItem) -> Result<Prepared> {
        let sample = build_sample(corpus, &self.vocab, item)?;
        let video = corpus
            .video(&item.record.video_ref)
            .expect("checked by build_sample");
        Ok(Prepared {
            sample,
            video_ref: item.record.video_ref.clone(),
            rois: video.rois[item.clip_start..item.clip_end].to_vec(),
        })
    }

    fn dense_for(&self, video_ref: &str) -> Option<&[CaptionedEvent]> {
        self.dense
            .as_ref()
            .map(|d| d.get(video_ref).map(Vec::as_slice).unwrap_or(&[]))
    }

    fn common_sense(&self, g: &mut Graph, rois: &[Vec<RoI>]) -> Option<Var> {
        self.causal.as_ref().map(|cs| {
            let frames: Vec<&[RoI]> = rois.iter().map(Vec::as_slice).collect();
            cs.frame_features(g, &frames, &self.dictionary).0
        })
    }

    /// `[L_cs, L_ans, L_fs, L_io]`, each averaged over the batch.
    fn losses_prepared(&self, g: &mut Graph, batch: &[Prepared], step: usize) -> Result<[Var; 4]> {
        if batch.is_empty() {
            return Err(invalid("empty QA batch"));
        }
        let mut terms: [Vec<Var>; 3] = Default::default();
        let mut windows = Vec::new();
        for p in batch {
            let cs = self.common_sense(g, &p.rois);
            let out = self
                .model
                .forward(g, &p.sample, cs, self.dense_for(&p.video_ref))?;
            for (t, v) in terms.iter_mut().zip(self.model.losses(g, &out, &p.sample)) {
                t.push(v);
            }
            let labels = p.sample.relevance_labels();
            let inside: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
            if let Some(&mid) = inside.get(inside.len() / 2) {
                if !p.rois[mid].is_empty() {
                    windows.push(CsWindow {
                        rois: p.rois[mid].clone(),
                        borrowed: Vec::new(),
                    });
                }
            }
        }
        let n = batch.len() as f64;
        let mean = |g: &mut Graph, vs: &[Var]| {
            let c = g.concat_rows(vs);
            let s = g.sum(c);
            g.scale(s, 1.0 / n)
        };
        let [ans, fs, io] = [mean(g, &terms[0]), mean(g, &terms[1]), mean(g, &terms[2])];
        let cs = match &self.causal {
            Some(net) if !windows.is_empty() => {
                attach_borrowed(
                    &mut windows,
                    self.config.borrow,
                    self.config.seed ^ step as u64,
                );
                let (total, centers) = net.cs_loss(g, &windows, &self.dictionary);
                g.scale(total, 1.0 / centers.max(1) as f64)
            }
            _ => g.constant(Tensor::scalar(0.0)),
        };
        Ok([cs, ans, fs, io])
    }

    /// Loss components for explicit corpus items.
    pub fn losses(
        &self,
        g: &mut Graph,
        corpus: &SyntheticCorpus,
        items: &[&QaItem],
        step: usize,
    ) -> Result<[Var; 4]> {
        let batch = items
            .iter()
            .map(|i| self.prepare(corpus, i))
            .collect::<Result<Vec<_>>>()?;
        self.losses_prepared(g, &batch, step)
    }

    pub fn train_step(&mut self, corpus: &SyntheticCorpus) -> Result<StepLog> {
        let train = corpus.split_qa(Split::Train);
        if train.is_empty() {
            return Err(invalid("no training questions"));
        }
        let picks = batch_indices(
            self.config.seed,
            self.step,
            train.len(),
            self.config.qa.batch,
        );
        let items: Vec<&QaItem> = picks.iter().map(|&i| train[i]).collect();
        let (log, grads) = {
            let mut g = Graph::new(&self.store);
            let parts = self.losses(&mut g, corpus, &items, self.step)?;
            let total = weighted_total_graph(&mut g, parts, &self.config.qa.weights);
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
                "QA loss at step {} ({:?})",
                self.step + 1,
                log.components
            )));
        }
        self.optimizer.apply(&mut self.store, &grads);
        self.step += 1;
        self.history.push(log.clone());
        Ok(log)
    }

    pub fn train(&mut self, corpus: &SyntheticCorpus, checkpoint: Option<&Path>) -> Result<()> {
        self.train_until(corpus, self.config.qa.steps, checkpoint)
    }

    pub fn train_until(
        &mut self,
        corpus: &SyntheticCorpus,
        steps: usize,
        checkpoint: Option<&Path>,
    ) -> Result<()> {
        let every = self.config.qa.checkpoint_every;
        while self.step < steps {
            let log = self.train_step(corpus)?;
            if every > 0 && self.step % every == 0 {
                log::info!(
                    "qa step {} loss {:.4} {:?}",
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

    pub fn answer(&self, corpus: &SyntheticCorpus, item: &QaItem) -> Result<QaPrediction> {
        let p = self.prepare(corpus, item)?;
        let cs = {
            let mut g = Graph::new(&self.store);
            self.common_sense(&mut g, &p.rois)
                .map(|v| g.value(v).clone())
        };
        let (logits, _) = self.model.answer_logits(
            &self.store,
            &p.sample,
            cs.as_ref(),
            self.dense_for(&p.video_ref),
        )?;
        Ok(QaPrediction {
            qid: p.sample.qid,
            predicted: predict(&logits),
            logits,
        })
    }

    pub fn evaluate_items(
        &self,
        corpus: &SyntheticCorpus,
        items: &[&QaItem],
    ) -> Result<(f64, Vec<QaPrediction>)> {
        let predictions = items
            .iter()
            .map(|i| self.answer(corpus, i))
            .collect::<Result<Vec<_>>>()?;
        let picked: Vec<usize> = predictions.iter().map(|p| p.predicted).collect();
        let labels: Vec<usize> = items.iter().map(|i| i.record.correct).collect();
        Ok((qa_accuracy(&picked, &labels)?, predictions))
    }

    pub fn evaluate(&self, corpus: &SyntheticCorpus, split: Split) -> Result<QaEvaluation> {
        let items = corpus.split_qa(split);
        if items.is_empty() {
            return Err(invalid(format!("split {} has no questions", split.name())));
        }
        let (accuracy, predictions) = self.evaluate_items(corpus, &items)?;
        Ok(QaEvaluation {
            split,
            accuracy,
            predictions,
        })
    }
}
