//! Five-way multiple-choice video question answering.
//!
//! Per hypothesis (question followed by one candidate answer):
//!
//! 1. frames go through a temporal convolution, optionally joined with
//!    per-frame common-sense features;
//! 2. every frame of the video, subtitle and dense-caption streams attends
//!    over the hypothesis words (trilinear similarity, row softmax);
//! 3. the video and caption streams then attend frame-wise over the
//!    subtitle stream;
//! 4. video and caption streams are concatenated and projected;
//! 5. a sigmoid gate scales each frame, a linear map scores it, and the
//!    gated frames are pooled with softmax(score) weights;
//! 6. a scorer shared across hypotheses produces one logit.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, LOG_CLAMP};
use crate::captioning::{weighted_total, LossWeights};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{sinusoid, Conv1d, FeedForward, Linear};
use crate::params::{uniform, ParamId, ParamStore};
use crate::proposal::{balanced_bce, balanced_bce_graph, AnchorLabel};
use crate::tensor::{argmax, softmax, Tensor};

pub const NUM_ANSWERS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subtitle {
    pub start: f64,
    pub end: f64,
    pub tokens: Vec<usize>,
}

/// A dense-caption event with its generated sentence as token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionedEvent {
    pub start: f64,
    pub end: f64,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub qid: String,
    pub question: Vec<usize>,
    pub answers: Vec<Vec<usize>>,
    pub correct: usize,
    pub subtitles: Vec<Subtitle>,
    /// `T×d` visual features.
    pub frames: Tensor,
    pub frame_times: Vec<f64>,
    /// Annotated span that holds the answer.
    pub span: (f64, f64),
}

impl QASample {
    pub fn validate(&self, frame_dim: usize, vocab_size: usize) -> Result<()> {
        if self.answers.len() != NUM_ANSWERS {
            return Err(invalid(format!(
                "{}: {} answers, expected {NUM_ANSWERS}",
                self.qid,
                self.answers.len()
            )));
        }
        if self.correct >= NUM_ANSWERS {
            return Err(invalid(format!(
                "{}: correct index {} out of range",
                self.qid, self.correct
            )));
        }
        if self.frames.rows() == 0 || self.frames.cols() != frame_dim {
            return Err(shape_err(format!(
                "{}: frames {:?}, expected T×{frame_dim}",
                self.qid,
                self.frames.shape()
            )));
        }
        if self.frame_times.len() != self.frames.rows() {
            return Err(shape_err(format!(
                "{}: {} frame times for {} frames",
                self.qid,
                self.frame_times.len(),
                self.frames.rows()
            )));
        }
        if self.subtitles.iter().any(|s| !(s.start <= s.end)) {
            return Err(invalid(format!("{}: subtitle interval inverted", self.qid)));
        }
        let tokens = self
            .question
            .iter()
            .chain(self.answers.iter().flatten())
            .chain(self.subtitles.iter().flat_map(|s| &s.tokens));
        if let Some(bad) = tokens.copied().find(|&t| t >= vocab_size) {
            return Err(invalid(format!(
                "{}: token id {bad} outside vocabulary of {vocab_size}",
                self.qid
            )));
        }
        Ok(())
    }

    pub fn hypotheses(&self) -> Vec<Hypothesis> {
        self.answers
            .iter()
            .map(|a| Hypothesis {
                tokens: self.question.iter().chain(a).copied().collect(),
            })
            .collect()
    }

    /// Frames inside the annotated span.
    pub fn relevance_labels(&self) -> Vec<bool> {
        self.frame_times
            .iter()
            .map(|&t| t >= self.span.0 && t <= self.span.1)
            .collect()
    }
}

/// Question tokens followed by one answer's tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRelevance {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// `S[i,j] = w₁·U_i + w₂·V_j + w₃·(U_i ∘ V_j)` with `w = [w₁; w₂; w₃]`.
pub fn similarity_matrix(u: &Tensor, v: &Tensor, w: &[f64]) -> Result<Tensor> {
    let h = u.cols();
    if v.cols() != h || w.len() != 3 * h {
        return Err(shape_err(format!(
            "similarity of {:?} and {:?} with weight length {}",
            u.shape(),
            v.shape(),
            w.len()
        )));
    }
    let mut s = Tensor::zeros(u.rows(), v.rows());
    for i in 0..u.rows() {
        for j in 0..v.rows() {
            let (ui, vj) = (u.row(i), v.row(j));
            let mut acc = 0.0;
            for k in 0..h {
                acc += w[k] * ui[k] + w[h + k] * vj[k] + w[2 * h + k] * ui[k] * vj[k];
            }
            s.set(i, j, acc);
        }
    }
    Ok(s)
}

/// Row-softmax of `sim` applied to `values`.
pub fn attend(sim: &Tensor, values: &Tensor) -> Result<Tensor> {
    if sim.cols() != values.rows() {
        return Err(shape_err(format!(
            "attention weights {:?} over values {:?}",
            sim.shape(),
            values.shape()
        )));
    }
    Ok(sim.softmax_rows().matmul(values))
}

/// Trilinear similarity on the tape; `w` is a `3h×1` parameter.
pub fn similarity_graph(g: &mut Graph, u: Var, v: Var, w: Var) -> Var {
    let (m, h) = g.shape(u);
    let n = g.shape(v).0;
    let w1 = g.slice_rows(w, 0, h);
    let w2 = g.slice_rows(w, h, h);
    let w3 = g.slice_rows(w, 2 * h, h);
    let a = g.matmul(u, w1);
    let ones_n = g.constant(Tensor::filled(1, n, 1.0));
    let a = g.matmul(a, ones_n);
    let b = g.matmul(v, w2);
    let bt = g.transpose(b);
    let ones_m = g.constant(Tensor::filled(m, 1, 1.0));
    let b = g.matmul(ones_m, bt);
    let w3_row = g.transpose(w3);
    let uw = g.mul_row(u, w3_row);
    let vt = g.transpose(v);
    let c = g.matmul(uw, vt);
    let ab = g.add(a, b);
    g.add(ab, c)
}

/// Rows of `queries` attend over rows of `keys` and return the attended keys.
pub fn attention_graph(g: &mut Graph, queries: Var, keys: Var, w: Var) -> Var {
    let s = similarity_graph(g, queries, keys, w);
    let a = g.softmax_rows(s);
    g.matmul(a, keys)
}

/// Index of the event covering each time (first in list order), if any.
pub fn caption_assignment(times: &[f64], events: &[CaptionedEvent]) -> Vec<Option<usize>> {
    times
        .iter()
        .map(|&t| events.iter().position(|e| t >= e.start && t <= e.end))
        .collect()
}

/// Subtitles whose interval intersects `[t − window, t + window]`, per time.
pub fn subtitle_assignment(times: &[f64], subtitles: &[Subtitle], window: f64) -> Vec<Vec<usize>> {
    times
        .iter()
        .map(|&t| {
            (0..subtitles.len())
                .filter(|&i| subtitles[i].start <= t + window && subtitles[i].end >= t - window)
                .collect()
        })
        .collect()
}

/// Twice the median spacing between consecutive frame times (0 for one frame).
pub fn default_subtitle_window(times: &[f64]) -> f64 {
    let mut gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return 0.0;
    }
    gaps.sort_by(f64::total_cmp);
    let mid = gaps.len() / 2;
    let median = if gaps.len() % 2 == 1 {
        gaps[mid]
    } else {
        0.5 * (gaps[mid - 1] + gaps[mid])
    };
    2.0 * median
}

/// `−log softmax(logits)[correct]`.
pub fn loss_ans(logits: &[f64], correct: usize) -> Result<f64> {
    let p = softmax(logits);
    let prob = p.get(correct).ok_or_else(|| {
        invalid(format!(
            "correct index {correct} outside {} logits",
            logits.len()
        ))
    })?;
    Ok(-prob.max(LOG_CLAMP).ln())
}

fn frame_labels(labels: &[bool]) -> Vec<AnchorLabel> {
    labels
        .iter()
        .map(|&l| {
            if l {
                AnchorLabel::Positive
            } else {
                AnchorLabel::Negative
            }
        })
        .collect()
}

/// Class-balanced BCE of per-frame probabilities against in-span labels.
pub fn loss_fs(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape_err(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(balanced_bce(scores, &frame_labels(labels)))
}

/// `max(0, δ + max(out scores) − min(in scores))`, zero if a side is empty.
pub fn loss_io(scores: &[f64], labels: &[bool], margin: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape_err(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let inside = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(s, _)| *s);
    let outside = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(s, _)| *s);
    let min_in = inside.fold(f64::INFINITY, f64::min);
    let max_out = outside.fold(f64::NEG_INFINITY, f64::max);
    if !min_in.is_finite() || !max_out.is_finite() {
        return Ok(0.0);
    }
    Ok((margin + max_out - min_in).max(0.0))
}

/// `λ1·L_cs + λ2·L_ans + λ3·L_fs + λ4·L_io`.
pub fn qa_total_loss(
    l_cs: f64,
    l_ans: f64,
    l_fs: f64,
    l_io: f64,
    weights: &LossWeights,
) -> Result<f64> {
    weighted_total(
        ["L_cs", "L_ans", "L_fs", "L_io"],
        [l_cs, l_ans, l_fs, l_io],
        weights,
    )
}

/// Highest logit, lowest index on ties.
pub fn predict(logits: &[f64]) -> usize {
    argmax(logits)
}

pub fn loss_ans_graph(g: &mut Graph, logits: Var, correct: usize) -> Var {
    let row = g.transpose(logits);
    let lp = g.log_softmax_rows(row);
    let picked = g.pick(lp, &[correct]);
    g.scale(picked, -1.0)
}

pub fn loss_fs_graph(g: &mut Graph, probs: Var, labels: &[bool]) -> Var {
    balanced_bce_graph(g, probs, &frame_labels(labels))
}

pub fn loss_io_graph(g: &mut Graph, probs: Var, labels: &[bool], margin: f64) -> Var {
    let inside: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let outside: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if inside.is_empty() || outside.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let pin = g.gather_rows(probs, &inside);
    let pout = g.gather_rows(probs, &outside);
    let min_in = g.min(pin);
    let max_out = g.max(pout);
    let gap = g.sub(max_out, min_in);
    let gap = g.add_scalar(gap, margin);
    g.relu(gap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaConfig {
    pub frame_dim: usize,
    pub hidden_dim: usize,
    pub kernel: usize,
    pub conv_layers: usize,
    /// Width of per-frame common-sense features; 0 disables them.
    pub common_sense_dim: usize,
    pub use_dvc_features: bool,
    /// `None` uses [`default_subtitle_window`].
    pub subtitle_window: Option<f64>,
    pub margin: f64,
    pub scorer_hidden: usize,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            frame_dim: 16,
            hidden_dim: 16,
            kernel: 3,
            conv_layers: 1,
            common_sense_dim: 0,
            use_dvc_features: true,
            subtitle_window: None,
            margin: 0.1,
            scorer_hidden: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QaModel {
    pub config: QaConfig,
    pub embedding: ParamId,
    pub text: Linear,
    pub conv: Vec<Conv1d>,
    pub visual_join: Option<Linear>,
    pub word_sim: ParamId,
    pub word_fuse_video: Linear,
    pub word_fuse_dvc: Linear,
    pub word_fuse_sub: Linear,
    pub frame_sim: ParamId,
    pub frame_fuse_video: Linear,
    pub frame_fuse_dvc: Linear,
    pub integrate: Linear,
    pub gate: Linear,
    pub relevance: Linear,
    pub scorer: FeedForward,
}

pub struct QaForward {
    /// `5×1` answer logits.
    pub logits: Var,
    /// Per hypothesis, `T×1` raw frame-relevance scores.
    pub relevance: Vec<Var>,
}

impl QaModel {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        vocab_size: usize,
        config: QaConfig,
    ) -> Result<Self> {
        let h = config.hidden_dim;
        if h == 0 || config.frame_dim == 0 || config.kernel % 2 == 0 || config.conv_layers == 0 {
            return Err(invalid(
                "QA dimensions must be positive, conv layers ≥ 1, and the kernel odd",
            ));
        }
        let p = |n: &str| format!("{prefix}.{n}");
        let conv = (0..config.conv_layers)
            .map(|i| {
                let in_dim = if i == 0 { config.frame_dim } else { h };
                Conv1d::new(
                    store,
                    rng,
                    &p(&format!("conv{i}")),
                    in_dim,
                    h,
                    config.kernel,
                )
            })
            .collect();
        let visual_join = (config.common_sense_dim > 0).then(|| {
            Linear::new(
                store,
                rng,
                &p("visual_join"),
                h + config.common_sense_dim,
                h,
            )
        });
        Ok(Self {
            embedding: store.add(p("embedding"), uniform(rng, vocab_size, h, 0.5)),
            text: Linear::new(store, rng, &p("text"), h, h),
            conv,
            visual_join,
            word_sim: store.add(p("word_sim"), uniform(rng, 3 * h, 1, 0.3)),
            word_fuse_video: Linear::new(store, rng, &p("word_fuse_video"), 4 * h, h),
            word_fuse_dvc: Linear::new(store, rng, &p("word_fuse_dvc"), 4 * h, h),
            word_fuse_sub: Linear::new(store, rng, &p("word_fuse_sub"), 2 * h, h),
            frame_sim: store.add(p("frame_sim"), uniform(rng, 3 * h, 1, 0.3)),
            frame_fuse_video: Linear::new(store, rng, &p("frame_fuse_video"), 2 * h, h),
            frame_fuse_dvc: Linear::new(store, rng, &p("frame_fuse_dvc"), 2 * h, h),
            integrate: Linear::new(store, rng, &p("integrate"), 2 * h, h),
            gate: Linear::new(store, rng, &p("gate"), h, 1),
            relevance: Linear::new(store, rng, &p("relevance"), h, 1),
            scorer: FeedForward::new(store, rng, &p("scorer"), h, config.scorer_hidden, 1),
            config,
        })
    }

    /// Token embeddings through the position-wise text map, `L×h`.
    pub fn encode_text(&self, g: &mut Graph, tokens: &[usize], positional: bool) -> Var {
        let table = g.param(self.embedding);
        let mut x = g.gather_rows(table, tokens);
        if positional {
            let rows: Vec<Vec<f64>> = (0..tokens.len())
                .map(|p| sinusoid(p as f64, self.config.hidden_dim))
                .collect();
            let pe = g.constant(Tensor::from_rows(&rows));
            x = g.add(x, pe);
        }
        let y = self.text.forward(g, x);
        g.tanh(y)
    }

    /// Mean text encoding of each token sequence as rows of an `n×h` node.
    fn sentence_vectors(&self, g: &mut Graph, sentences: &[&[usize]]) -> Var {
        let ids: Vec<usize> = sentences.iter().flat_map(|s| s.iter().copied()).collect();
        let enc = self.encode_text(g, &ids, false);
        let mut avg = Tensor::zeros(sentences.len(), ids.len());
        let mut col = 0;
        for (i, s) in sentences.iter().enumerate() {
            for _ in 0..s.len() {
                avg.set(i, col, 1.0 / s.len() as f64);
                col += 1;
            }
        }
        let avg = g.constant(avg);
        g.matmul(avg, enc)
    }

    /// Temporal convolution (tanh) over frames, joined with common-sense features.
    pub fn encode_visual(
        &self,
        g: &mut Graph,
        frames: &Tensor,
        common_sense: Option<Var>,
    ) -> Result<Var> {
        if frames.rows() == 0 || frames.cols() != self.config.frame_dim {
            return Err(shape_err(format!(
                "frames {:?}, expected T×{}",
                frames.shape(),
                self.config.frame_dim
            )));
        }
        let mut x = g.constant(frames.clone());
        for conv in &self.conv {
            let y = conv.forward(g, x);
            x = g.tanh(y);
        }
        match (&self.visual_join, common_sense) {
            (Some(join), Some(cs)) => {
                if g.shape(cs) != (frames.rows(), self.config.common_sense_dim) {
                    return Err(shape_err(format!(
                        "common-sense features {:?} for {} frames",
                        g.shape(cs),
                        frames.rows()
                    )));
                }
                let both = g.concat_cols(&[x, cs]);
                let y = join.forward(g, both);
                Ok(g.tanh(y))
            }
            (None, None) => Ok(x),
            (Some(_), None) => Err(invalid("model expects common-sense features")),
            (None, Some(_)) => Err(invalid("model was built without common-sense features")),
        }
    }

    /// Per-frame embedded caption of the covering event; zero rows if uncovered.
    pub fn dense_caption_features(
        &self,
        g: &mut Graph,
        times: &[f64],
        events: Option<&[CaptionedEvent]>,
    ) -> Result<Var> {
        let events =
            events.ok_or_else(|| invalid("dense-caption features need dense-captioning output"))?;
        let h = self.config.hidden_dim;
        let assign = caption_assignment(times, events);
        let used: Vec<&CaptionedEvent> = events.iter().filter(|e| !e.tokens.is_empty()).collect();
        if used.is_empty() || assign.iter().all(Option::is_none) {
            return Ok(g.constant(Tensor::zeros(times.len(), h)));
        }
        let sentences: Vec<&[usize]> = events
            .iter()
            .map(|e| e.tokens.as_slice())
            .filter(|t| !t.is_empty())
            .collect();
        let vectors = self.sentence_vectors(g, &sentences);
        // Map event index → row in `vectors` (events with empty captions have none).
        let mut row_of = vec![None; events.len()];
        let mut next = 0;
        for (i, e) in events.iter().enumerate() {
            if !e.tokens.is_empty() {
                row_of[i] = Some(next);
                next += 1;
            }
        }
        let mut select = Tensor::zeros(times.len(), sentences.len());
        for (t, a) in assign.iter().enumerate() {
            if let Some(r) = a.and_then(|e| row_of[e]) {
                select.set(t, r, 1.0);
            }
        }
        let select = g.constant(select);
        Ok(g.matmul(select, vectors))
    }

    /// Mean embedded subtitle near each frame; zero rows when none.
    pub fn pair_subtitles(
        &self,
        g: &mut Graph,
        times: &[f64],
        subtitles: &[Subtitle],
        window: f64,
    ) -> Result<Var> {
        if window < 0.0 {
            return Err(invalid("subtitle window must be nonnegative"));
        }
        let h = self.config.hidden_dim;
        let usable: Vec<usize> = (0..subtitles.len())
            .filter(|&i| !subtitles[i].tokens.is_empty())
            .collect();
        if usable.is_empty() {
            return Ok(g.constant(Tensor::zeros(times.len(), h)));
        }
        let kept: Vec<Subtitle> = usable.iter().map(|&i| subtitles[i].clone()).collect();
        let sentences: Vec<&[usize]> = kept.iter().map(|s| s.tokens.as_slice()).collect();
        let vectors = self.sentence_vectors(g, &sentences);
        let assign = subtitle_assignment(times, &kept, window);
        let mut avg = Tensor::zeros(times.len(), kept.len());
        for (t, list) in assign.iter().enumerate() {
            for &s in list {
                avg.set(t, s, 1.0 / list.len() as f64);
            }
        }
        let avg = g.constant(avg);
        Ok(g.matmul(avg, vectors))
    }

    /// Every frame of `stream` attends over hypothesis words.
    pub fn word_object_attention(&self, g: &mut Graph, stream: Var, hypothesis: Var) -> Var {
        let w = g.param(self.word_sim);
        attention_graph(g, stream, hypothesis, w)
    }

    /// Every frame of `stream` attends over the frames of `context`.
    pub fn frame_attention(&self, g: &mut Graph, stream: Var, context: Var) -> Var {
        let w = g.param(self.frame_sim);
        attention_graph(g, stream, context, w)
    }

    /// Projection of `[video ; dvc]` back to `h`.
    pub fn integrate_video_dvc(&self, g: &mut Graph, video: Var, dvc: Var) -> Result<Var> {
        if g.shape(video).0 != g.shape(dvc).0 {
            return Err(shape_err(format!(
                "video has {} frames, dense captions {}",
                g.shape(video).0,
                g.shape(dvc).0
            )));
        }
        let both = g.concat_cols(&[video, dvc]);
        Ok(self.integrate.forward(g, both))
    }

    /// Gated features (`T×h`) and raw relevance scores (`T×1`).
    pub fn frame_relevance(&self, g: &mut Graph, fused: Var) -> (Var, Var) {
        let gate = self.gate.forward(g, fused);
        let gate = g.sigmoid(gate);
        let gated = g.mul_col(fused, gate);
        let scores = self.relevance.forward(g, gated);
        (gated, scores)
    }

    fn word_fuse(
        &self,
        g: &mut Graph,
        fuse: &Linear,
        stream: Var,
        attended: Var,
        subs: Var,
    ) -> Var {
        let prod = g.mul(stream, attended);
        let cat = g.concat_cols(&[stream, attended, subs, prod]);
        let y = fuse.forward(g, cat);
        g.tanh(y)
    }

    fn frame_fuse(&self, g: &mut Graph, fuse: &Linear, stream: Var, subs: Var) -> Var {
        let att = self.frame_attention(g, stream, subs);
        let cat = g.concat_cols(&[stream, att]);
        let y = fuse.forward(g, cat);
        g.tanh(y)
    }

    /// Full forward pass for one sample.
    pub fn forward(
        &self,
        g: &mut Graph,
        sample: &QASample,
        common_sense: Option<Var>,
        dvc: Option<&[CaptionedEvent]>,
    ) -> Result<QaForward> {
        sample.validate(self.config.frame_dim, g.store().get(self.embedding).rows())?;
        let times = &sample.frame_times;
        let window = self
            .config
            .subtitle_window
            .unwrap_or_else(|| default_subtitle_window(times));
        let video = self.encode_visual(g, &sample.frames, common_sense)?;
        let subs = self.pair_subtitles(g, times, &sample.subtitles, window)?;
        let captions = if self.config.use_dvc_features {
            self.dense_caption_features(g, times, dvc)?
        } else {
            g.constant(Tensor::zeros(times.len(), self.config.hidden_dim))
        };
        let mut logits = Vec::with_capacity(NUM_ANSWERS);
        let mut relevance = Vec::with_capacity(NUM_ANSWERS);
        for hyp in sample.hypotheses() {
            let words = self.encode_text(g, &hyp.tokens, true);
            let sub_att = self.word_object_attention(g, subs, words);
            let sub_cat = g.concat_cols(&[subs, sub_att]);
            let sub_fused = self.word_fuse_sub.forward(g, sub_cat);
            let sub_fused = g.tanh(sub_fused);
            let video_att = self.word_object_attention(g, video, words);
            let video_fused = self.word_fuse(g, &self.word_fuse_video, video, video_att, sub_att);
            let dvc_att = self.word_object_attention(g, captions, words);
            let dvc_fused = self.word_fuse(g, &self.word_fuse_dvc, captions, dvc_att, sub_att);
            let video_frames = self.frame_fuse(g, &self.frame_fuse_video, video_fused, sub_fused);
            let dvc_frames = self.frame_fuse(g, &self.frame_fuse_dvc, dvc_fused, sub_fused);
            let fused = self.integrate_video_dvc(g, video_frames, dvc_frames)?;
            let (gated, scores) = self.frame_relevance(g, fused);
            let st = g.transpose(scores);
            let weights = g.softmax_rows(st);
            let pooled = g.matmul(weights, gated);
            logits.push(self.scorer.forward(g, pooled));
            relevance.push(scores);
        }
        Ok(QaForward {
            logits: g.concat_rows(&logits),
            relevance,
        })
    }

    /// `(L_ans, L_fs, L_io)` on the tape; frame terms use the correct
    /// hypothesis's sigmoid relevance.
    pub fn losses(&self, g: &mut Graph, out: &QaForward, sample: &QASample) -> [Var; 3] {
        let labels = sample.relevance_labels();
        let probs = g.sigmoid(out.relevance[sample.correct]);
        [
            loss_ans_graph(g, out.logits, sample.correct),
            loss_fs_graph(g, probs, &labels),
            loss_io_graph(g, probs, &labels, self.config.margin),
        ]
    }

    pub fn answer_logits(
        &self,
        store: &ParamStore,
        sample: &QASample,
        common_sense: Option<&Tensor>,
        dvc: Option<&[CaptionedEvent]>,
    ) -> Result<(Vec<f64>, FrameRelevance)> {
        let mut g = Graph::new(store);
        let cs = common_sense.map(|t| g.constant(t.clone()));
        let out = self.forward(&mut g, sample, cs, dvc)?;
        let logits = g.value(out.logits).data().to_vec();
        let scores = g.value(out.relevance[predict(&logits)]).data().to_vec();
        Ok((
            logits,
            FrameRelevance {
                scores,
                labels: sample.relevance_labels(),
            },
        ))
    }
}

/// One line of the QA input file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub qid: String,
    pub question: String,
    pub answers: Vec<String>,
    pub correct: usize,
    pub subtitles: Vec<SubtitleRecord>,
    pub video_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtitleRecord {
    pub start: f64,
    pub end: f64,
    pub text: String,
}

/// One line of the QA prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaPrediction {
    pub qid: String,
    pub predicted: usize,
    pub logits: Vec<f64>,
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| crate::Error::Format(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    fn sample(rng: &mut ChaCha8Rng, frames: usize, frame_dim: usize) -> QASample {
        QASample {
            qid: "q".into(),
            question: vec![4, 5],
            answers: (0..5).map(|i| vec![6 + i]).collect(),
            correct: 2,
            subtitles: vec![Subtitle {
                start: 0.0,
                end: 1.0,
                tokens: vec![7, 8],
            }],
            frames: rand_tensor(rng, frames, frame_dim),
            frame_times: (0..frames).map(|i| i as f64).collect(),
            span: (0.0, 0.5),
        }
    }

    fn model(rng: &mut ChaCha8Rng, store: &mut ParamStore, config: QaConfig) -> QaModel {
        QaModel::new(store, rng, "qa", 12, config).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = rand_tensor(&mut rng, 1, 3);
        let v = rand_tensor(&mut rng, 1, 3);
        assert_eq!(similarity_matrix(&u, &v, &[0.0; 9]).unwrap().data(), &[0.0]);
        let u = rand_tensor(&mut rng, 4, 3);
        let v = rand_tensor(&mut rng, 5, 3);
        let w: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = similarity_matrix(&u, &v, &w).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut cat = u.row(i).to_vec();
                cat.extend_from_slice(v.row(j));
                cat.extend(u.row(i).iter().zip(v.row(j)).map(|(a, b)| a * b));
                let dot: f64 = cat.iter().zip(&w).map(|(a, b)| a * b).sum();
                assert!((s.get(i, j) - dot).abs() < 1e-9);
            }
        }
        assert!(similarity_matrix(&u, &rand_tensor(&mut rng, 2, 2), &w).is_err());
    }

    #[test]
    fn similarity_graph_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&mut rng, 9, 1));
        let u = rand_tensor(&mut rng, 4, 3);
        let v = rand_tensor(&mut rng, 2, 3);
        let mut g = Graph::new(&store);
        let (uv, vv, wv) = (g.constant(u.clone()), g.constant(v.clone()), g.param(w));
        let s = similarity_graph(&mut g, uv, vv, wv);
        let plain = similarity_matrix(&u, &v, store.get(w).data()).unwrap();
        for (a, b) in g.value(s).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let att = attention_graph(&mut g, uv, vv, wv);
        let plain_att = attend(&plain, &v).unwrap();
        for (a, b) in g.value(att).data().iter().zip(plain_att.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_and_single_column() {
        let sim = Tensor::from_vec(2, 1, vec![3.0, -2.0]);
        let values = Tensor::from_vec(1, 2, vec![0.5, 7.0]);
        let out = attend(&sim, &values).unwrap();
        assert_eq!(out.data(), &[0.5, 7.0, 0.5, 7.0]);
        let sim = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, -1.0]);
        for r in 0..2 {
            assert!((sim.softmax_rows().row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn caption_and_subtitle_assignment() {
        let ev = |s, e| CaptionedEvent {
            start: s,
            end: e,
            tokens: vec![4],
        };
        let times = [0.5, 2.5, 4.5, 9.0];
        let events = [ev(0.0, 3.0), ev(2.0, 5.0)];
        assert_eq!(
            caption_assignment(&times, &events),
            vec![Some(0), Some(0), Some(1), None]
        );
        // Interval-stabbing oracle on random events.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let events: Vec<CaptionedEvent> = (0..4)
                .map(|_| {
                    let s = rng.random_range(0.0..10.0);
                    ev(s, s + rng.random_range(0.1..4.0))
                })
                .collect();
            let times: Vec<f64> = (0..12).map(|i| i as f64).collect();
            let got = caption_assignment(&times, &events);
            for (t, a) in times.iter().zip(got) {
                let mut expect = None;
                for (i, e) in events.iter().enumerate().rev() {
                    if e.start <= *t && *t <= e.end {
                        expect = Some(i);
                    }
                }
                assert_eq!(a, expect);
            }
        }
        let sub = |s, e| Subtitle {
            start: s,
            end: e,
            tokens: vec![4],
        };
        let subs = [sub(0.0, 1.0), sub(1.5, 2.0), sub(5.0, 6.0)];
        assert_eq!(
            subtitle_assignment(&[0.0, 3.0, 10.0], &subs, 1.0),
            vec![vec![0], vec![1], vec![]]
        );
        assert_eq!(default_subtitle_window(&[0.0, 1.0, 2.0, 4.0]), 2.0);
    }

    #[test]
    fn dense_caption_and_subtitle_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let m = model(
            &mut rng,
            &mut store,
            QaConfig {
                frame_dim: 3,
                hidden_dim: 4,
                ..Default::default()
            },
        );
        let mut g = Graph::new(&store);
        let times = [0.0, 1.0, 2.0];
        assert!(m.dense_caption_features(&mut g, &times, None).is_err());
        let one = [CaptionedEvent {
            start: 0.0,
            end: 2.0,
            tokens: vec![4, 5],
        }];
        let f = m
            .dense_caption_features(&mut g, &times, Some(&one))
            .unwrap();
        let v = g.value(f).clone();
        assert_eq!(v.row(0), v.row(2));
        let partial = [CaptionedEvent {
            start: 0.0,
            end: 0.5,
            tokens: vec![4],
        }];
        let f = m
            .dense_caption_features(&mut g, &times, Some(&partial))
            .unwrap();
        assert!(g.value(f).row(1).iter().all(|&x| x == 0.0));
        let none = m.pair_subtitles(&mut g, &times, &[], 1.0).unwrap();
        assert!(g.value(none).data().iter().all(|&x| x == 0.0));
        let spanning = [Subtitle {
            start: 0.0,
            end: 2.0,
            tokens: vec![6],
        }];
        let s = m.pair_subtitles(&mut g, &times, &spanning, 0.0).unwrap();
        let s = g.value(s).clone();
        assert_eq!(s.row(0), s.row(1));
        assert_eq!(s.row(1), s.row(2));
    }

    #[test]
    fn conv_receptive_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let m = model(
            &mut rng,
            &mut store,
            QaConfig {
                frame_dim: 3,
                hidden_dim: 4,
                kernel: 3,
                conv_layers: 2,
                ..Default::default()
            },
        );
        let frames = rand_tensor(&mut rng, 9, 3);
        let run = |f: &Tensor| {
            let mut g = Graph::new(&store);
            let v = m.encode_visual(&mut g, f, None).unwrap();
            g.value(v).clone()
        };
        let base = run(&frames);
        assert_eq!(base.shape(), (9, 4));
        let mut bumped = frames.clone();
        bumped.set(4, 1, bumped.get(4, 1) + 0.7);
        let after = run(&bumped);
        // Two kernel-3 layers: position 4 reaches positions 2..=6.
        for t in 0..9 {
            let changed = base.row(t).iter().zip(after.row(t)).any(|(a, b)| a != b);
            assert_eq!(changed, (2..=6).contains(&t), "t={t}");
        }
    }

    #[test]
    fn kernel_one_identity_is_per_frame_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let m = model(
            &mut rng,
            &mut store,
            QaConfig {
                frame_dim: 3,
                hidden_dim: 3,
                kernel: 1,
                ..Default::default()
            },
        );
        store
            .get_mut(m.conv[0].linear.w)
            .data_mut()
            .copy_from_slice(Tensor::identity(3).data());
        let frames = Tensor::from_vec(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        let mut g = Graph::new(&store);
        let v = m.encode_visual(&mut g, &frames, None).unwrap();
        for (a, b) in g.value(v).data().iter().zip(frames.data()) {
            assert!((a - b.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn integration_passes_video_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let m = model(
            &mut rng,
            &mut store,
            QaConfig {
                frame_dim: 3,
                hidden_dim: 2,
                ..Default::default()
            },
        );
        let mut w = Tensor::zeros(4, 2);
        w.set(0, 0, 1.0);
        w.set(1, 1, 1.0);
        *store.get_mut(m.integrate.w) = w;
        let mut g = Graph::new(&store);
        let video = g.constant(Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let dvc = g.constant(Tensor::zeros(3, 2));
        let out = m.integrate_video_dvc(&mut g, video, dvc).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let short = g.constant(Tensor::zeros(2, 2));
        assert!(m.integrate_video_dvc(&mut g, video, short).is_err());
    }

    #[test]
    fn zero_gate_gives_bias_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let m = model(
            &mut rng,
            &mut store,
            QaConfig {
                frame_dim: 3,
                hidden_dim: 2,
                ..Default::default()
            },
        );
        store.get_mut(m.gate.w).data_mut().fill(0.0);
        store.get_mut(m.gate.b.unwrap()).data_mut().fill(-1e4);
        store.get_mut(m.relevance.b.unwrap()).data_mut().fill(0.37);
        let mut g = Graph::new(&store);
        let fused = g.constant(rand_tensor(&mut rng, 4, 2));
        let (_, scores) = m.frame_relevance(&mut g, fused);
        assert!(g
            .value(scores)
            .data()
            .iter()
            .all(|&s| (s - 0.37).abs() < 1e-12));
    }

    #[test]
    fn loss_examples() {
        assert!(loss_ans(&[50.0, 0.0, 0.0, 0.0, 0.0], 0).unwrap() < 1e-12);
        assert!((loss_ans(&[0.0; 5], 3).unwrap() - 5f64.ln()).abs() < 1e-12);
        let labels = [true, false, false, true];
        assert!(loss_fs(&[1.0, 0.0, 0.0, 1.0], &labels).unwrap() <= 1e-9);
        assert!((loss_fs(&[0.5; 4], &labels).unwrap() - 2f64.ln()).abs() < 1e-12);
        let s = [0.9, 0.2, 0.1, 0.7];
        let oracle = 0.5 * (-(0.9f64.ln() + 0.7f64.ln()) / 2.0 - (0.8f64.ln() + 0.9f64.ln()) / 2.0);
        assert!((loss_fs(&s, &labels).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(loss_io(&s, &labels, 0.1).unwrap(), 0.0);
        assert_eq!(loss_io(&s, &[false; 4], 0.1).unwrap(), 0.0);
        assert!((loss_io(&[0.3, 0.5], &[true, false], 0.1).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(
            qa_total_loss(
                1.5,
                9.0,
                9.0,
                9.0,
                &LossWeights::new(1.0, 0.0, 0.0, 0.0).unwrap()
            )
            .unwrap(),
            1.5
        );
        assert_eq!(
            qa_total_loss(1.0, 2.0, 3.0, 4.0, &LossWeights::default()).unwrap(),
            10.0
        );
        assert!(
            qa_total_loss(1.0, f64::INFINITY, 3.0, 4.0, &LossWeights::default())
                .unwrap_err()
                .to_string()
                .contains("L_ans")
        );
    }

    #[test]
    fn graph_losses_match_plain() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = g.constant(Tensor::col_vector(vec![0.3, -1.0, 2.0, 0.0, 0.5]));
        let l = loss_ans_graph(&mut g, logits, 2);
        assert!((g.scalar(l) - loss_ans(&[0.3, -1.0, 2.0, 0.0, 0.5], 2).unwrap()).abs() < 1e-12);
        let labels = [true, false, true];
        let p = g.constant(Tensor::col_vector(vec![0.6, 0.7, 0.2]));
        let fs = loss_fs_graph(&mut g, p, &labels);
        assert!((g.scalar(fs) - loss_fs(&[0.6, 0.7, 0.2], &labels).unwrap()).abs() < 1e-12);
        let io = loss_io_graph(&mut g, p, &labels, 0.1);
        assert!((g.scalar(io) - loss_io(&[0.6, 0.7, 0.2], &labels, 0.1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn identical_hypotheses_tie_to_lowest_index() {
        assert_eq!(predict(&[1.0, 1.0, 1.0, 1.0, 1.0]), 0);
        assert_eq!(predict(&[0.0, 2.0, 2.0, 1.0, 0.0]), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let m = model(
            &mut rng,
            &mut store,
            QaConfig {
                frame_dim: 3,
                hidden_dim: 4,
                ..Default::default()
            },
        );
        let mut s = sample(&mut rng, 3, 3);
        s.answers = vec![vec![6]; 5];
        s.correct = 0;
        let (logits, _) = m.answer_logits(&store, &s, None, Some(&[])).unwrap();
        assert!(logits.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(predict(&logits), 0);
    }

    #[test]
    fn sample_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut s = sample(&mut rng, 2, 3);
        assert!(s.validate(3, 12).is_ok());
        s.answers.pop();
        assert!(s.validate(3, 12).is_err());
        let mut s = sample(&mut rng, 2, 3);
        s.correct = 5;
        assert!(s.validate(3, 12).is_err());
        let s = sample(&mut rng, 2, 3);
        assert!(s.validate(4, 12).is_err());
    }

    #[test]
    fn full_pipeline_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let config = QaConfig {
            frame_dim: 3,
            hidden_dim: 3,
            common_sense_dim: 2,
            scorer_hidden: 3,
            ..Default::default()
        };
        let m = model(&mut rng, &mut store, config);
        let mut s = sample(&mut rng, 2, 3);
        s.question = vec![4, 5];
        s.answers = (0..5).map(|i| vec![6 + i]).collect();
        let cs = rand_tensor(&mut rng, 2, 2);
        let events = [CaptionedEvent {
            start: 0.0,
            end: 1.0,
            tokens: vec![9, 10],
        }];
        let report = check_gradients(&store, 1e-5, None, |g| {
            let csv = g.constant(cs.clone());
            let out = m.forward(g, &s, Some(csv), Some(&events)).unwrap();
            let [a, f, i] = m.losses(g, &out, &s);
            let zero = g.constant(Tensor::scalar(0.0));
            crate::captioning::weighted_total_graph(g, [zero, a, f, i], &LossWeights::default())
        });
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn jsonl_round_trip() {
        let rec = QaRecord {
            qid: "q1".into(),
            question: "what does the man hold".into(),
            answers: vec![
                "a cup".into(),
                "a ball".into(),
                "a hat".into(),
                "a dog".into(),
                "a pen".into(),
            ],
            correct: 1,
            subtitles: vec![SubtitleRecord {
                start: 0.0,
                end: 1.5,
                text: "hello".into(),
            }],
            video_ref: "v1".into(),
            span: Some([0.0, 2.0]),
        };
        let text = write_jsonl(&[rec.clone(), rec.clone()]).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: Vec<QaRecord> = read_jsonl(&text).unwrap();
        assert_eq!(back, vec![rec.clone(), rec]);
        assert!(read_jsonl::<QaRecord>("{not json}").is_err());
        let pred = QaPrediction {
            qid: "q1".into(),
            predicted: 3,
            logits: vec![0.0; 5],
        };
        assert_eq!(
            serde_json::to_value(&pred).unwrap(),
            serde_json::json!({"qid": "q1", "predicted": 3, "logits": [0.0, 0.0, 0.0, 0.0, 0.0]})
        );
    }

    proptest! {
        #[test]
        fn argmax_invariant_to_shift(l in proptest::array::uniform5(-5.0f64..5.0), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = l.iter().map(|x| x + c).collect();
            prop_assert_eq!(predict(&l), predict(&shifted));
        }

        #[test]
        fn loss_io_zero_iff_margin_holds(s in proptest::collection::vec(0.0f64..1.0, 2..8), mask in proptest::collection::vec(any::<bool>(), 2..8)) {
            let n = s.len().min(mask.len());
            let (s, labels) = (&s[..n], &mask[..n]);
            let ins: Vec<f64> = (0..n).filter(|&i| labels[i]).map(|i| s[i]).collect();
            let outs: Vec<f64> = (0..n).filter(|&i| !labels[i]).map(|i| s[i]).collect();
            let l = loss_io(s, labels, 0.1).unwrap();
            if !ins.is_empty() && !outs.is_empty() {
                let holds = ins.iter().all(|a| outs.iter().all(|b| a - b >= 0.1));
                prop_assert_eq!(l == 0.0, holds);
            }
        }
    }
}
