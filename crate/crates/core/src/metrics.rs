//! Caption and QA evaluation: corpus BLEU, a stem-matching METEOR variant,
//! tIoU-matched dense-captioning scores, and multiple-choice accuracy.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::proposal::temporal_iou;

/// tIoU thresholds swept by [`dvc_evaluate`].
pub const TIOU_THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_BETA: f64 = 3.0;

/// Lowercases, drops ASCII punctuation, splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with clipped precisions for orders `1..=n`, uniform
/// weights and the brevity penalty. Each reference length used for the
/// penalty is the one closest to the candidate (shorter on ties).
pub fn bleu_n(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    n: usize,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(invalid("BLEU needs a nonempty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(invalid(format!(
            "{} candidates but {} reference lists",
            candidates.len(),
            references.len()
        )));
    }
    if n == 0 {
        return Err(invalid("BLEU order must be at least 1"));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(invalid("every candidate needs at least one reference"));
        }
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(cand.len()), r))
            .expect("nonempty references");
        for k in 1..=n {
            let cand_counts = ngram_counts(cand, k);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (gram, c) in ngram_counts(r, k) {
                    let e = max_ref.entry(gram).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (gram, c) in &cand_counts {
                matched[k - 1] += (*c).min(max_ref.get(gram).copied().unwrap_or(0));
                total[k - 1] += c;
            }
        }
    }
    if cand_len == 0 || matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_p.exp())
}

/// BLEU of a single candidate against its references.
pub fn sentence_bleu(candidate: &[String], references: &[Vec<String>], n: usize) -> f64 {
    bleu_n(&[candidate.to_vec()], &[references.to_vec()], n).unwrap_or(0.0)
}

/// Light suffix stripper used for the second METEOR matching stage.
pub fn stem(word: &str) -> String {
    for suffix in ["ing", "edly", "ed", "ies", "es", "ly", "s"] {
        if let Some(base) = word.strip_suffix(suffix) {
            if base.chars().count() >= 3 {
                return if suffix == "ies" {
                    format!("{base}y")
                } else {
                    base.to_string()
                };
            }
        }
    }
    word.to_string()
}

/// Unigram alignment as `(candidate index, reference index)` pairs sorted by
/// candidate index: exact matches first, then stem matches, each stage
/// taking the leftmost free reference token.
pub fn meteor_alignment(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut ref_used = vec![false; reference.len()];
    let mut cand_used = vec![false; candidate.len()];
    let mut pairs = Vec::new();
    let stems_c: Vec<String> = candidate.iter().map(|w| stem(w)).collect();
    let stems_r: Vec<String> = reference.iter().map(|w| stem(w)).collect();
    for stage in 0..2 {
        for (i, _) in candidate.iter().enumerate() {
            if cand_used[i] {
                continue;
            }
            let hit = (0..reference.len()).find(|&j| {
                !ref_used[j]
                    && if stage == 0 {
                        candidate[i] == reference[j]
                    } else {
                        stems_c[i] == stems_r[j]
                    }
            });
            if let Some(j) = hit {
                ref_used[j] = true;
                cand_used[i] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Number of maximal runs of alignment pairs adjacent in both sentences.
pub fn chunk_count(alignment: &[(usize, usize)]) -> usize {
    if alignment.is_empty() {
        return 0;
    }
    1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// `F_mean · (1 − γ·(chunks/m)^β)` with `F_mean = P·R / (α·P + (1−α)·R)`.
pub fn meteor_lite(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let alignment = meteor_alignment(candidate, reference);
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunk_count(&alignment) as f64 / m as f64).powf(METEOR_BETA);
    f * (1.0 - penalty)
}

/// Best score over several references.
pub fn meteor_multi(candidate: &[String], references: &[Vec<String>]) -> f64 {
    references
        .iter()
        .map(|r| meteor_lite(candidate, r))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl Segment {
    pub fn new(start: f64, end: f64, caption: impl Into<String>) -> Self {
        Self {
            start,
            end,
            caption: caption.into(),
            confidence: None,
        }
    }

    pub fn with_confidence(mut self, c: f64) -> Self {
        self.confidence = Some(c);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DvcPrediction {
    pub video_id: String,
    pub segments: Vec<Segment>,
}

impl DvcPrediction {
    pub fn validate(&self) -> Result<()> {
        for s in &self.segments {
            if !(s.start >= 0.0 && s.start < s.end) {
                return Err(invalid(format!(
                    "segment [{}, {}] in {} is not a valid interval",
                    s.start, s.end, self.video_id
                )));
            }
            if s.caption.trim().is_empty() {
                return Err(invalid(format!("empty caption in {}", self.video_id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScores {
    pub tiou: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub matched: usize,
    pub predictions: usize,
}

/// Percentages averaged over [`TIOU_THRESHOLDS`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub per_threshold: Vec<ThresholdScores>,
}

impl MetricReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6} {:>8} {:>8} {:>8} {:>8}",
            "tIoU", "B@3", "B@4", "M", "matched"
        );
        for t in &self.per_threshold {
            let _ = writeln!(
                out,
                "{:>6.1} {:>8.2} {:>8.2} {:>8.2} {:>4}/{:<3}",
                t.tiou, t.bleu3, t.bleu4, t.meteor, t.matched, t.predictions
            );
        }
        let _ = writeln!(
            out,
            "{:>6} {:>8.2} {:>8.2} {:>8.2}",
            "mean", self.bleu3, self.bleu4, self.meteor
        );
        out
    }
}

/// Deterministic prediction order: descending confidence, then start, end,
/// caption. Independent of input order.
fn ranked(segments: &[Segment]) -> Vec<&Segment> {
    let mut order: Vec<&Segment> = segments.iter().collect();
    order.sort_by(|a, b| {
        b.confidence
            .unwrap_or(0.0)
            .total_cmp(&a.confidence.unwrap_or(0.0))
            .then(a.start.total_cmp(&b.start))
            .then(a.end.total_cmp(&b.end))
            .then(a.caption.cmp(&b.caption))
    });
    order
}

/// Greedy one-to-one matching at `threshold`: each prediction, in ranked
/// order, takes the free reference with the highest tIoU ≥ threshold (lowest
/// index on ties). Returns the reference index per ranked prediction.
pub fn greedy_match(
    predictions: &[&Segment],
    references: &[Segment],
    threshold: f64,
) -> Vec<Option<usize>> {
    let mut used = vec![false; references.len()];
    predictions
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, r) in references.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let iou = temporal_iou((p.start, p.end), (r.start, r.end));
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            best.map(|(j, _)| {
                used[j] = true;
                j
            })
        })
        .collect()
}

/// Scores every predicted segment against tIoU-matched references for each
/// threshold; unmatched predictions score zero. Values are ×100.
pub fn dvc_evaluate(
    predictions: &[DvcPrediction],
    references: &[DvcPrediction],
) -> Result<MetricReport> {
    let refs: BTreeMap<&str, &DvcPrediction> = references
        .iter()
        .map(|r| (r.video_id.as_str(), r))
        .collect();
    for p in predictions {
        if !refs.contains_key(p.video_id.as_str()) {
            return Err(invalid(format!(
                "prediction for unknown video id {:?}",
                p.video_id
            )));
        }
        p.validate()?;
    }
    let mut by_video: Vec<&DvcPrediction> = predictions.iter().collect();
    by_video.sort_by(|a, b| a.video_id.cmp(&b.video_id));

    let mut report = MetricReport::default();
    for &thr in &TIOU_THRESHOLDS {
        let mut scores = ThresholdScores {
            tiou: thr,
            ..Default::default()
        };
        for pred in &by_video {
            let reference = refs[pred.video_id.as_str()];
            let ranked = ranked(&pred.segments);
            let matches = greedy_match(&ranked, &reference.segments, thr);
            for (p, m) in ranked.iter().zip(matches) {
                scores.predictions += 1;
                let Some(j) = m else { continue };
                scores.matched += 1;
                let cand = tokenize(&p.caption);
                let gt = vec![tokenize(&reference.segments[j].caption)];
                scores.bleu3 += sentence_bleu(&cand, &gt, 3);
                scores.bleu4 += sentence_bleu(&cand, &gt, 4);
                scores.meteor += meteor_multi(&cand, &gt);
            }
        }
        if scores.predictions > 0 {
            let n = scores.predictions as f64;
            scores.bleu3 *= 100.0 / n;
            scores.bleu4 *= 100.0 / n;
            scores.meteor *= 100.0 / n;
        }
        report.per_threshold.push(scores);
    }
    let k = TIOU_THRESHOLDS.len() as f64;
    report.bleu3 = report.per_threshold.iter().map(|t| t.bleu3).sum::<f64>() / k;
    report.bleu4 = report.per_threshold.iter().map(|t| t.bleu4).sum::<f64>() / k;
    report.meteor = report.per_threshold.iter().map(|t| t.meteor).sum::<f64>() / k;
    Ok(report)
}

/// Fraction of exact index matches.
pub fn qa_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(invalid("accuracy of an empty set"));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}
