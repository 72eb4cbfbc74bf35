//! Run configuration, stored as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::captioning::{CaptionerConfig, LossWeights};
use crate::causal::CausalConfig;
use crate::error::{io_at, Error, Result};
use crate::params::AdamConfig;
use crate::proposal::{AnchorSet, ProposalConfig};
use crate::videoqa::{QaConfig, NUM_ANSWERS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub videos: usize,
    pub max_events: usize,
    pub min_event_frames: usize,
    pub max_event_frames: usize,
    /// Frames before, between and after events.
    pub gap_frames: usize,
    /// Seconds per frame.
    pub frame_step: f64,
    pub num_activities: usize,
    pub num_classes: usize,
    pub roi_dim: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    /// Probability that a distractor object shows up in a frame.
    pub distractor_rate: f64,
    pub noise: f64,
    /// QA samples per video event (cycled until `qa_samples` is reached).
    pub qa_samples: usize,
    /// Frames of surrounding context in each QA clip.
    pub qa_context_frames: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            videos: 20,
            max_events: 3,
            min_event_frames: 3,
            max_event_frames: 6,
            gap_frames: 1,
            frame_step: 1.0,
            num_activities: 4,
            num_classes: 12,
            roi_dim: 8,
            visual_dim: 12,
            audio_dim: 6,
            distractor_rate: 0.2,
            noise: 0.2,
            qa_samples: 64,
            qa_context_frames: 2,
            split: [0.7, 0.15, 0.15],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub cs_hidden: usize,
    pub cs_depth: usize,
    pub proposal_hidden: usize,
    pub anchor_lengths: Vec<f64>,
    pub mask_hidden: usize,
    pub mask_pe_dim: usize,
    pub max_offset: f64,
    pub max_proposals: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub encoder_depth: usize,
    pub heads: usize,
    pub fusion_hidden: usize,
    pub max_caption_len: usize,
    pub qa_hidden: usize,
    pub qa_kernel: usize,
    pub qa_conv_layers: usize,
    pub qa_scorer_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            cs_hidden: 12,
            cs_depth: 2,
            proposal_hidden: 12,
            anchor_lengths: vec![3.0, 4.5, 6.0],
            mask_hidden: 8,
            mask_pe_dim: 4,
            max_offset: 0.25,
            max_proposals: 6,
            model_dim: 24,
            ffn_dim: 48,
            encoder_depth: 1,
            heads: 2,
            fusion_hidden: 48,
            max_caption_len: 30,
            qa_hidden: 16,
            qa_kernel: 3,
            qa_conv_layers: 1,
            qa_scorer_hidden: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub proposal_score: f64,
    pub nms: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub qa_margin: f64,
    pub subtitle_window: Option<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            proposal_score: 0.5,
            nms: 0.7,
            positive_iou: 0.7,
            negative_iou: 0.3,
            qa_margin: 0.1,
            subtitle_window: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub steps: usize,
    pub lr: f64,
    /// Videos (DVC) or samples (QA) per step.
    pub batch: usize,
    pub checkpoint_every: usize,
    pub weights: LossWeights,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 1e-3,
            batch: 4,
            checkpoint_every: 100,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    pub common_sense: bool,
    pub end_to_end: bool,
    pub use_dvc_features: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            common_sense: true,
            end_to_end: true,
            use_dvc_features: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Contexts borrowed from other events per window in the common-sense loss.
    pub borrow: usize,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub thresholds: Thresholds,
    pub dvc: PhaseConfig,
    pub qa: PhaseConfig,
    pub flags: Flags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            borrow: 0,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            thresholds: Thresholds::default(),
            dvc: PhaseConfig::default(),
            qa: PhaseConfig {
                steps: 300,
                batch: 8,
                ..PhaseConfig::default()
            },
            flags: Flags::default(),
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be at least 1")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        let m = &self.model;
        for (name, v) in [
            ("corpus.videos", c.videos),
            ("corpus.max_events", c.max_events),
            ("corpus.min_event_frames", c.min_event_frames),
            ("corpus.num_activities", c.num_activities),
            ("corpus.num_classes", c.num_classes),
            ("corpus.roi_dim", c.roi_dim),
            ("corpus.visual_dim", c.visual_dim),
            ("corpus.audio_dim", c.audio_dim),
            ("model.cs_hidden", m.cs_hidden),
            ("model.cs_depth", m.cs_depth),
            ("model.proposal_hidden", m.proposal_hidden),
            ("model.mask_hidden", m.mask_hidden),
            ("model.model_dim", m.model_dim),
            ("model.ffn_dim", m.ffn_dim),
            ("model.heads", m.heads),
            ("model.fusion_hidden", m.fusion_hidden),
            ("model.max_caption_len", m.max_caption_len),
            ("model.qa_hidden", m.qa_hidden),
            ("model.qa_conv_layers", m.qa_conv_layers),
            ("model.qa_scorer_hidden", m.qa_scorer_hidden),
            ("dvc.batch", self.dvc.batch),
            ("qa.batch", self.qa.batch),
        ] {
            positive(name, v)?;
        }
        if c.num_classes < NUM_ANSWERS {
            return Err(Error::Config(format!(
                "corpus.num_classes must be at least {NUM_ANSWERS}, one per answer option"
            )));
        }
        if c.max_event_frames < c.min_event_frames {
            return Err(Error::Config(
                "corpus.max_event_frames < corpus.min_event_frames".into(),
            ));
        }
        if !(c.frame_step > 0.0) {
            return Err(Error::Config("corpus.frame_step must be positive".into()));
        }
        if c.split.iter().any(|f| *f < 0.0) || (c.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "corpus.split must be nonnegative and sum to 1".into(),
            ));
        }
        if m.model_dim % m.heads != 0 {
            return Err(Error::Config(
                "model.model_dim must be divisible by model.heads".into(),
            ));
        }
        if m.qa_kernel % 2 == 0 {
            return Err(Error::Config("model.qa_kernel must be odd".into()));
        }
        AnchorSet::new(m.anchor_lengths.clone(), c.frame_step)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.dvc
            .weights
            .validate()
            .map_err(|e| Error::Config(format!("dvc.weights: {e}")))?;
        self.qa
            .weights
            .validate()
            .map_err(|e| Error::Config(format!("qa.weights: {e}")))?;
        for lr in [self.dvc.lr, self.qa.lr] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(
                    "learning rates must be finite and nonnegative".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| io_at(path, e))?)
    }

    pub fn causal(&self) -> CausalConfig {
        CausalConfig {
            feature_dim: self.corpus.roi_dim,
            hidden_dim: self.model.cs_hidden,
            num_classes: self.corpus.num_classes,
            depth: self.model.cs_depth,
        }
    }

    pub fn anchors(&self) -> AnchorSet {
        AnchorSet::new(self.model.anchor_lengths.clone(), self.corpus.frame_step)
            .expect("validated anchor set")
    }

    pub fn proposal(&self) -> ProposalConfig {
        ProposalConfig {
            hidden_dim: self.model.proposal_hidden,
            score_threshold: self.thresholds.proposal_score,
            nms_threshold: self.thresholds.nms,
            positive_iou: self.thresholds.positive_iou,
            negative_iou: self.thresholds.negative_iou,
            mask_hidden: self.model.mask_hidden,
            mask_pe_dim: self.model.mask_pe_dim,
            time_scale: 10.0 * self.corpus.frame_step,
            max_offset: self.model.max_offset,
            max_proposals: self.model.max_proposals,
        }
    }

    pub fn captioner(&self) -> CaptionerConfig {
        CaptionerConfig {
            model_dim: self.model.model_dim,
            ffn_dim: self.model.ffn_dim,
            encoder_depth: self.model.encoder_depth,
            heads: self.model.heads,
            fusion_hidden: self.model.fusion_hidden,
            max_len: self.model.max_caption_len,
        }
    }

    pub fn videoqa(&self) -> QaConfig {
        QaConfig {
            frame_dim: self.corpus.visual_dim,
            hidden_dim: self.model.qa_hidden,
            kernel: self.model.qa_kernel,
            conv_layers: self.model.qa_conv_layers,
            common_sense_dim: if self.flags.common_sense {
                self.model.cs_hidden
            } else {
                0
            },
            use_dvc_features: self.flags.use_dvc_features,
            subtitle_window: self.thresholds.subtitle_window,
            margin: self.thresholds.qa_margin,
            scorer_hidden: self.model.qa_scorer_hidden,
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}
