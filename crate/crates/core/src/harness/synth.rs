//! Synthetic videos with a known latent structure.
//!
//! Each event has a latent activity. The activity fixes a distribution over
//! object classes, and the event's two objects are drawn from it. RoIs carry
//! noisy class prototypes, so object co-occurrence is predictable from the
//! activity. Visual and audio frames mix activity prototypes with weak
//! object signals. Captions, questions and subtitles come from small
//! template grammars over the latent variables.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::CorpusConfig;
use super::features::write_feature_file;
use crate::captioning::{CaptionFile, VideoCaptions, Vocabulary};
use crate::confounder::RoI;
use crate::error::{invalid, io_at, Result};
use crate::tensor::Tensor;
use crate::videoqa::{write_jsonl, QaRecord, SubtitleRecord, NUM_ANSWERS};

const OBJECT_NAMES: [&str; 24] = [
    "cup", "ball", "knife", "brush", "bike", "dog", "guitar", "rope", "pan", "ladder", "hammer",
    "book", "kite", "bucket", "chair", "lamp", "towel", "drum", "box", "hat", "phone", "shovel",
    "mirror", "broom",
];
const VERBS: [&str; 8] = [
    "cooks", "cleans", "paints", "repairs", "plays", "carries", "washes", "builds",
];
/// Share of an activity's object distribution held by its core objects.
const CORE_MASS: f64 = 0.8;
const CORE_OBJECTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub start: f64,
    pub end: f64,
    pub start_frame: usize,
    pub end_frame: usize,
    pub activity: usize,
    pub objects: [usize; 2],
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeechWord {
    pub time: f64,
    pub word: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Video {
    pub id: String,
    pub duration: f64,
    pub visual: Tensor,
    pub audio: Tensor,
    pub rois: Vec<Vec<RoI>>,
    pub events: Vec<Event>,
    pub speech: Vec<SpeechWord>,
    pub subtitles: Vec<SubtitleRecord>,
}

impl Video {
    pub fn frames(&self) -> usize {
        self.visual.rows()
    }
}

/// A QA record plus the clip of its video it covers (`[start, end)` frames).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub record: QaRecord,
    pub clip_start: usize,
    pub clip_end: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub config: CorpusConfig,
    pub class_names: Vec<String>,
    pub verbs: Vec<String>,
    /// Per activity, a distribution over object classes.
    pub activity_objects: Vec<Vec<f64>>,
    pub videos: Vec<Video>,
    pub qa: Vec<QaItem>,
    pub splits: Splits,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Core objects of activity `a`: `CORE_OBJECTS` consecutive classes.
pub fn activity_distribution(a: usize, num_classes: usize) -> Vec<f64> {
    let core: Vec<usize> = (0..CORE_OBJECTS)
        .map(|k| (a * CORE_OBJECTS + k) % num_classes)
        .collect();
    let rest = num_classes - core.len();
    (0..num_classes)
        .map(|c| {
            if core.contains(&c) {
                CORE_MASS / core.len() as f64
            } else if rest > 0 {
                (1.0 - CORE_MASS) / rest as f64
            } else {
                0.0
            }
        })
        .collect()
}

/// Index drawn from a discrete distribution.
pub fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Two distinct objects from an activity distribution; the second is drawn
/// from the distribution renormalized without the first.
pub fn draw_objects(rng: &mut ChaCha8Rng, dist: &[f64]) -> [usize; 2] {
    let first = draw(rng, dist);
    let mut rest = dist.to_vec();
    rest[first] = 0.0;
    let total: f64 = rest.iter().sum();
    rest.iter_mut().for_each(|p| *p /= total);
    [first, draw(rng, &rest)]
}

struct Prototypes {
    roi: Vec<Vec<f64>>,
    visual_object: Vec<Vec<f64>>,
    visual_activity: Vec<Vec<f64>>,
    audio_activity: Vec<Vec<f64>>,
}

fn split_counts(n: usize, split: [f64; 3]) -> [usize; 3] {
    let train = ((split[0] * n as f64).round() as usize).clamp(1, n);
    let val = ((split[1] * n as f64).round() as usize).min(n - train);
    [train, val, n - train - val]
}

/// The template depends on the activity so captions are a function of the latent state.
fn caption_for(activity: usize, verb: &str, o1: &str, o2: &str) -> String {
    if activity % 2 == 0 {
        format!("a person {verb} the {o1} near the {o2}")
    } else {
        format!("someone {verb} a {o1} beside a {o2}")
    }
}

fn gen_video(
    rng: &mut ChaCha8Rng,
    cfg: &CorpusConfig,
    protos: &Prototypes,
    dists: &[Vec<f64>],
    id: String,
) -> Video {
    let num_events = rng.random_range(1..=cfg.max_events);
    let mut events = Vec::with_capacity(num_events);
    let mut frame = cfg.gap_frames;
    for _ in 0..num_events {
        let len = rng.random_range(cfg.min_event_frames..=cfg.max_event_frames);
        let activity = rng.random_range(0..cfg.num_activities);
        let objects = draw_objects(rng, &dists[activity]);
        let caption = caption_for(
            activity,
            VERBS[activity % VERBS.len()],
            OBJECT_NAMES[objects[0]],
            OBJECT_NAMES[objects[1]],
        );
        events.push(Event {
            start: frame as f64 * cfg.frame_step,
            end: (frame + len) as f64 * cfg.frame_step,
            start_frame: frame,
            end_frame: frame + len,
            activity,
            objects,
            caption,
        });
        frame += len + cfg.gap_frames;
    }
    let frames = frame;
    let mut visual = Tensor::zeros(frames, cfg.visual_dim);
    let mut audio = Tensor::zeros(frames, cfg.audio_dim);
    let mut rois = vec![Vec::new(); frames];
    let roi = |rng: &mut ChaCha8Rng, class: usize| {
        let noise = normal_vec(rng, cfg.roi_dim, cfg.noise);
        let feature = protos.roi[class]
            .iter()
            .zip(noise)
            .map(|(p, n)| p + n)
            .collect();
        let x = rng.random_range(0.0..0.5);
        let y = rng.random_range(0.0..0.5);
        RoI::new(class, [x, y, x + 0.4, y + 0.4], feature)
    };
    for t in 0..frames {
        let noise_v = normal_vec(rng, cfg.visual_dim, cfg.noise);
        let noise_a = normal_vec(rng, cfg.audio_dim, cfg.noise);
        visual.row_mut(t).copy_from_slice(&noise_v);
        audio.row_mut(t).copy_from_slice(&noise_a);
        match events
            .iter()
            .find(|e| (e.start_frame..e.end_frame).contains(&t))
        {
            Some(e) => {
                for (k, v) in visual.row_mut(t).iter_mut().enumerate() {
                    *v += protos.visual_activity[e.activity][k]
                        + 0.8 * protos.visual_object[e.objects[0]][k]
                        + 0.4 * protos.visual_object[e.objects[1]][k];
                }
                for (k, v) in audio.row_mut(t).iter_mut().enumerate() {
                    *v += protos.audio_activity[e.activity][k];
                }
                rois[t].push(roi(rng, e.objects[0]));
                rois[t].push(roi(rng, e.objects[1]));
                if rng.random_bool(cfg.distractor_rate) {
                    let mut c = rng.random_range(0..cfg.num_classes);
                    while e.objects.contains(&c) {
                        c = (c + 1) % cfg.num_classes;
                    }
                    rois[t].push(roi(rng, c));
                }
            }
            None => {
                if rng.random_bool(0.5) {
                    let c = rng.random_range(0..cfg.num_classes);
                    rois[t].push(roi(rng, c));
                }
            }
        }
    }
    let mut speech = Vec::new();
    let mut subtitles = Vec::new();
    for e in &events {
        let mid = 0.5 * (e.start + e.end);
        if rng.random_bool(0.7) {
            speech.push(SpeechWord {
                time: mid,
                word: VERBS[e.activity % VERBS.len()].to_string(),
            });
        }
        if rng.random_bool(0.5) {
            speech.push(SpeechWord {
                time: e.start,
                word: "okay".into(),
            });
        }
        let text = if rng.random_bool(0.5) {
            format!("look at the {}", OBJECT_NAMES[e.objects[1]])
        } else {
            "this is nice".to_string()
        };
        subtitles.push(SubtitleRecord {
            start: e.start,
            end: e.end,
            text,
        });
    }
    Video {
        id,
        duration: frames as f64 * cfg.frame_step,
        visual,
        audio,
        rois,
        events,
        speech,
        subtitles,
    }
}

fn gen_question(
    rng: &mut ChaCha8Rng,
    cfg: &CorpusConfig,
    video: &Video,
    event_index: usize,
    qid: String,
) -> QaItem {
    let e = &video.events[event_index];
    let verb = VERBS[e.activity % VERBS.len()];
    let (question, answer) = if rng.random_bool(0.5) {
        (
            format!("what is near the {}", OBJECT_NAMES[e.objects[0]]),
            e.objects[1],
        )
    } else {
        (format!("what does the person {verb}"), e.objects[0])
    };
    let mut pool: Vec<usize> = (0..cfg.num_classes).filter(|&c| c != answer).collect();
    pool.shuffle(rng);
    let correct = rng.random_range(0..NUM_ANSWERS);
    let mut options: Vec<usize> = pool.into_iter().take(NUM_ANSWERS - 1).collect();
    options.insert(correct, answer);
    let answers = options
        .iter()
        .map(|&o| format!("the {}", OBJECT_NAMES[o]))
        .collect();
    let clip_start = e.start_frame.saturating_sub(cfg.qa_context_frames);
    let clip_end = (e.end_frame + cfg.qa_context_frames).min(video.frames());
    let subtitles = video
        .subtitles
        .iter()
        .filter(|s| {
            s.end >= clip_start as f64 * cfg.frame_step
                && s.start <= clip_end as f64 * cfg.frame_step
        })
        .cloned()
        .collect();
    QaItem {
        record: QaRecord {
            qid,
            question,
            answers,
            correct,
            subtitles,
            video_ref: video.id.clone(),
            span: Some([e.start, e.end]),
        },
        clip_start,
        clip_end,
    }
}

/// Deterministic corpus for `(seed, config)`.
pub fn synth_corpus(seed: u64, cfg: &CorpusConfig) -> Result<SyntheticCorpus> {
    if cfg.videos == 0
        || cfg.max_events == 0
        || cfg.min_event_frames == 0
        || cfg.max_event_frames < cfg.min_event_frames
    {
        return Err(invalid("corpus sizes must be positive"));
    }
    if cfg.num_classes < NUM_ANSWERS || cfg.num_classes > OBJECT_NAMES.len() {
        return Err(invalid(format!(
            "num_classes must be in [{NUM_ANSWERS}, {}]",
            OBJECT_NAMES.len()
        )));
    }
    if cfg.num_activities == 0 || cfg.num_activities > VERBS.len() {
        return Err(invalid(format!(
            "num_activities must be in [1, {}]",
            VERBS.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = Prototypes {
        roi: (0..cfg.num_classes)
            .map(|_| normal_vec(&mut rng, cfg.roi_dim, 1.0))
            .collect(),
        visual_object: (0..cfg.num_classes)
            .map(|_| normal_vec(&mut rng, cfg.visual_dim, 1.0))
            .collect(),
        visual_activity: (0..cfg.num_activities)
            .map(|_| normal_vec(&mut rng, cfg.visual_dim, 1.0))
            .collect(),
        audio_activity: (0..cfg.num_activities)
            .map(|_| normal_vec(&mut rng, cfg.audio_dim, 1.0))
            .collect(),
    };
    let dists: Vec<Vec<f64>> = (0..cfg.num_activities)
        .map(|a| activity_distribution(a, cfg.num_classes))
        .collect();
    let videos: Vec<Video> = (0..cfg.videos)
        .map(|i| gen_video(&mut rng, cfg, &protos, &dists, format!("v{i:04}")))
        .collect();

    let mut order: Vec<String> = videos.iter().map(|v| v.id.clone()).collect();
    order.shuffle(&mut rng);
    let [n_train, n_val, _] = split_counts(order.len(), cfg.split);
    let mut splits = Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    splits.train.sort();
    splits.val.sort();
    splits.test.sort();

    let events: Vec<(usize, usize)> = videos
        .iter()
        .enumerate()
        .flat_map(|(v, video)| (0..video.events.len()).map(move |e| (v, e)))
        .collect();
    let qa = (0..cfg.qa_samples)
        .map(|i| {
            let (v, e) = events[i % events.len()];
            gen_question(&mut rng, cfg, &videos[v], e, format!("q{i:05}"))
        })
        .collect();

    Ok(SyntheticCorpus {
        seed,
        config: cfg.clone(),
        class_names: OBJECT_NAMES[..cfg.num_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        verbs: VERBS[..cfg.num_activities]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        activity_objects: dists,
        videos,
        qa,
        splits,
    })
}

impl SyntheticCorpus {
    pub fn video(&self, id: &str) -> Option<&Video> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn split_ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    pub fn split_videos(&self, split: Split) -> Vec<&Video> {
        self.split_ids(split)
            .iter()
            .filter_map(|id| self.video(id))
            .collect()
    }

    pub fn split_qa(&self, split: Split) -> Vec<&QaItem> {
        let ids = self.split_ids(split);
        self.qa
            .iter()
            .filter(|q| ids.contains(&q.record.video_ref))
            .collect()
    }

    /// Every word of captions, speech, questions, answers and subtitles.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut texts: Vec<&str> = Vec::new();
        for v in &self.videos {
            texts.extend(v.events.iter().map(|e| e.caption.as_str()));
            texts.extend(v.speech.iter().map(|w| w.word.as_str()));
            texts.extend(v.subtitles.iter().map(|s| s.text.as_str()));
        }
        for q in &self.qa {
            texts.push(&q.record.question);
            texts.extend(q.record.answers.iter().map(String::as_str));
        }
        Vocabulary::from_texts(texts)
    }

    /// ActivityNet-style ground truth for one split.
    pub fn annotations(&self, split: Split) -> CaptionFile {
        self.split_videos(split)
            .into_iter()
            .map(|v| {
                (
                    v.id.clone(),
                    VideoCaptions {
                        duration: Some(v.duration),
                        timestamps: v.events.iter().map(|e| [e.start, e.end]).collect(),
                        sentences: v.events.iter().map(|e| e.caption.clone()).collect(),
                        confidences: None,
                    },
                )
            })
            .collect::<BTreeMap<_, _>>()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("corpus.json");
        Self::from_json(&std::fs::read_to_string(&path).map_err(|e| io_at(&path, e))?)
    }

    /// Writes `corpus.json`, per-split annotations and QA files, and feature files.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("annotations"))?;
        std::fs::create_dir_all(dir.join("qa"))?;
        std::fs::create_dir_all(dir.join("features"))?;
        std::fs::write(dir.join("corpus.json"), self.to_json()?)?;
        for split in Split::ALL {
            let ann = serde_json::to_string_pretty(&self.annotations(split))?;
            std::fs::write(
                dir.join("annotations")
                    .join(format!("{}.json", split.name())),
                ann,
            )?;
            let records: Vec<&QaRecord> = self
                .split_qa(split)
                .into_iter()
                .map(|q| &q.record)
                .collect();
            std::fs::write(
                dir.join("qa").join(format!("{}.jsonl", split.name())),
                write_jsonl(&records)?,
            )?;
        }
        for v in &self.videos {
            write_feature_file(
                &dir.join("features").join(format!("{}.visual.feat", v.id)),
                &v.visual,
            )?;
            write_feature_file(
                &dir.join("features").join(format!("{}.audio.feat", v.id)),
                &v.audio,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            videos: 6,
            qa_samples: 10,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = synth_corpus(3, &small()).unwrap().to_json().unwrap();
        let b = synth_corpus(3, &small()).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(4, &small()).unwrap().to_json().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn minimal_corpus_is_valid() {
        let cfg = CorpusConfig {
            videos: 1,
            max_events: 1,
            qa_samples: 1,
            ..CorpusConfig::default()
        };
        let c = synth_corpus(0, &cfg).unwrap();
        assert_eq!(c.videos.len(), 1);
        assert_eq!(c.videos[0].events.len(), 1);
        assert_eq!(c.splits.train.len(), 1);
        assert_eq!(c.qa.len(), 1);
    }

    #[test]
    fn captions_follow_latent_variables() {
        let c = synth_corpus(5, &small()).unwrap();
        for v in &c.videos {
            assert_eq!(v.frames(), v.rois.len());
            for e in &v.events {
                let words: Vec<&str> = e.caption.split(' ').collect();
                assert!(words.contains(&c.verbs[e.activity].as_str()));
                assert!(words.contains(&c.class_names[e.objects[0]].as_str()));
                assert!(words.contains(&c.class_names[e.objects[1]].as_str()));
                for t in e.start_frame..e.end_frame {
                    let classes: Vec<usize> = v.rois[t].iter().map(|r| r.class_id).collect();
                    assert!(classes.contains(&e.objects[0]) && classes.contains(&e.objects[1]));
                }
            }
        }
    }

    #[test]
    fn questions_are_answerable_from_their_span() {
        let c = synth_corpus(6, &small()).unwrap();
        for q in &c.qa {
            let v = c.video(&q.record.video_ref).unwrap();
            let [s, e] = q.record.span.unwrap();
            let event = v
                .events
                .iter()
                .find(|ev| ev.start == s && ev.end == e)
                .unwrap();
            let answer = &q.record.answers[q.record.correct];
            let name = answer.trim_start_matches("the ");
            assert!(event.objects.iter().any(|&o| c.class_names[o] == name));
            assert_eq!(q.record.answers.len(), 5);
            let distinct: std::collections::BTreeSet<_> = q.record.answers.iter().collect();
            assert_eq!(distinct.len(), 5);
        }
    }

    #[test]
    fn splits_partition_videos() {
        let c = synth_corpus(
            1,
            &CorpusConfig {
                videos: 20,
                ..CorpusConfig::default()
            },
        )
        .unwrap();
        assert_eq!(
            (
                c.splits.train.len(),
                c.splits.val.len(),
                c.splits.test.len()
            ),
            (14, 3, 3)
        );
        let mut all: Vec<&String> = c
            .splits
            .train
            .iter()
            .chain(&c.splits.val)
            .chain(&c.splits.test)
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 20);
    }

    #[test]
    fn object_marginals_match_generative_distribution() {
        // 1000 draws per activity; every class frequency within 3σ of its probability.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1000.0;
        for a in 0..4 {
            let dist = activity_distribution(a, 12);
            let mut counts = [0usize; 12];
            for _ in 0..1000 {
                counts[draw_objects(&mut rng, &dist)[0]] += 1;
            }
            for c in 0..12 {
                let p = dist[c];
                let sigma = (n * p * (1.0 - p)).sqrt();
                assert!(
                    (counts[c] as f64 - n * p).abs() <= 3.0 * sigma + 1e-9,
                    "activity {a} class {c}: {} vs {}",
                    counts[c],
                    n * p
                );
            }
        }
    }

    #[test]
    fn vocabulary_is_small() {
        let c = synth_corpus(
            2,
            &CorpusConfig {
                videos: 20,
                ..CorpusConfig::default()
            },
        )
        .unwrap();
        assert!(c.vocabulary().len() <= 60, "{}", c.vocabulary().len());
    }

    #[test]
    fn write_emits_all_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = synth_corpus(2, &small()).unwrap();
        c.write(dir.path()).unwrap();
        assert_eq!(SyntheticCorpus::load(dir.path()).unwrap(), c);
        for split in Split::ALL {
            assert!(dir
                .path()
                .join("annotations")
                .join(format!("{}.json", split.name()))
                .exists());
            assert!(dir
                .path()
                .join("qa")
                .join(format!("{}.jsonl", split.name()))
                .exists());
        }
        let feat = super::super::features::read_feature_file(
            &dir.path().join("features").join("v0000.visual.feat"),
        )
        .unwrap();
        assert_eq!(feat.shape(), c.videos[0].visual.shape());
    }
}
