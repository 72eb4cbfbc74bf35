//! Flag ablations and seed sweeps.

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::dvc::{DvcSystem, ProposalSource};
use super::qa::{dense_captions, QaSystem};
use super::synth::{synth_corpus, Split, SyntheticCorpus};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub common_sense: bool,
    /// `end_to_end` for the DVC grid, `use_dvc_features` for the QA grid.
    pub second: bool,
    /// METEOR on learned proposals (DVC) or accuracy (QA).
    pub metric: Option<f64>,
    /// METEOR on ground-truth proposals (DVC only).
    pub gt_metric: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Dvc,
    Qa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub kind: GridKind,
    pub split: Split,
    pub cells: Vec<AblationCell>,
}

const FLAGS: [(bool, bool); 4] = [(false, false), (false, true), (true, false), (true, true)];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}"))
        .unwrap_or_else(|| "failed".into())
}

impl AblationGrid {
    pub fn to_table(&self) -> String {
        let mut out = match self.kind {
            GridKind::Dvc => {
                String::from("common_sense | end_to_end | METEOR (learned) | METEOR (gt)\n")
            }
            GridKind::Qa => String::from("common_sense | dvc_features | accuracy\n"),
        };
        for c in &self.cells {
            let on = |b: bool| if b { "on" } else { "off" };
            match self.kind {
                GridKind::Dvc => out.push_str(&format!(
                    "{} | {} | {} | {}\n",
                    on(c.common_sense),
                    on(c.second),
                    fmt_opt(c.metric),
                    fmt_opt(c.gt_metric)
                )),
                GridKind::Qa => out.push_str(&format!(
                    "{} | {} | {}\n",
                    on(c.common_sense),
                    on(c.second),
                    fmt_opt(c.metric.map(|a| 100.0 * a))
                )),
            }
        }
        out
    }
}

fn failed(common_sense: bool, second: bool, e: crate::Error) -> AblationCell {
    log::warn!("ablation cell (cs={common_sense}, second={second}) failed: {e}");
    AblationCell {
        common_sense,
        second,
        metric: None,
        gt_metric: None,
        error: Some(e.to_string()),
    }
}

fn dvc_cell(
    base: &TrainConfig,
    corpus: &SyntheticCorpus,
    split: Split,
    cs: bool,
    e2e: bool,
) -> Result<(f64, f64)> {
    let mut cfg = base.clone();
    cfg.flags.common_sense = cs;
    cfg.flags.end_to_end = e2e;
    let mut sys = DvcSystem::new(cfg, corpus)?;
    sys.train(corpus, None)?;
    let learned = sys
        .evaluate(corpus, split, ProposalSource::Learned)?
        .report
        .meteor;
    let gt = sys
        .evaluate(corpus, split, ProposalSource::GroundTruth)?
        .report
        .meteor;
    Ok((learned, gt))
}

/// Trains and evaluates the DVC model for every `(common_sense, end_to_end)` pair.
pub fn ablate_dvc(base: &TrainConfig, corpus: &SyntheticCorpus, split: Split) -> AblationGrid {
    let cells = FLAGS
        .iter()
        .map(|&(cs, e2e)| match dvc_cell(base, corpus, split, cs, e2e) {
            Ok((learned, gt)) => AblationCell {
                common_sense: cs,
                second: e2e,
                metric: Some(learned),
                gt_metric: Some(gt),
                error: None,
            },
            Err(e) => failed(cs, e2e, e),
        })
        .collect();
    AblationGrid {
        kind: GridKind::Dvc,
        split,
        cells,
    }
}

fn qa_cell(
    base: &TrainConfig,
    corpus: &SyntheticCorpus,
    split: Split,
    cs: bool,
    dvc: bool,
) -> Result<f64> {
    let mut cfg = base.clone();
    cfg.flags.common_sense = cs;
    cfg.flags.use_dvc_features = dvc;
    let dense = if dvc {
        let mut captioner = DvcSystem::new(cfg.clone(), corpus)?;
        captioner.train(corpus, None)?;
        Some(dense_captions(&captioner, corpus, &corpus.vocabulary())?)
    } else {
        None
    };
    let mut sys = QaSystem::new(cfg, corpus, dense)?;
    sys.train(corpus, None)?;
    Ok(sys.evaluate(corpus, split)?.accuracy)
}

/// Trains and evaluates the QA model for every `(common_sense, use_dvc_features)`
/// pair; cells with dense captions first train a DVC model with the same flags.
pub fn ablate_qa(base: &TrainConfig, corpus: &SyntheticCorpus, split: Split) -> AblationGrid {
    let cells = FLAGS
        .iter()
        .map(|&(cs, dvc)| match qa_cell(base, corpus, split, cs, dvc) {
            Ok(acc) => AblationCell {
                common_sense: cs,
                second: dvc,
                metric: Some(acc),
                gt_metric: None,
                error: None,
            },
            Err(e) => failed(cs, dvc, e),
        })
        .collect();
    AblationGrid {
        kind: GridKind::Qa,
        split,
        cells,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub dvc_meteor_on: f64,
    pub dvc_meteor_off: f64,
    pub qa_accuracy_on: f64,
    pub qa_accuracy_off: f64,
}

/// Common-sense on against off over several seeds. Each seed regenerates the
/// corpus and reinitializes the models; dense-caption features are left off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSweep {
    pub split: Split,
    pub rows: Vec<SweepRow>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn common_sense_sweep(base: &TrainConfig, seeds: &[u64], split: Split) -> Result<SeedSweep> {
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.flags.use_dvc_features = false;
        let corpus = synth_corpus(seed, &cfg.corpus)?;
        let metric = |cs: bool| -> Result<(f64, f64)> {
            let mut c = cfg.clone();
            c.flags.common_sense = cs;
            let mut dvc = DvcSystem::new(c.clone(), &corpus)?;
            dvc.train(&corpus, None)?;
            let meteor = dvc
                .evaluate(&corpus, split, ProposalSource::Learned)?
                .report
                .meteor;
            let mut qa = QaSystem::new(c, &corpus, None)?;
            qa.train(&corpus, None)?;
            Ok((meteor, qa.evaluate(&corpus, split)?.accuracy))
        };
        let (dvc_meteor_on, qa_accuracy_on) = metric(true)?;
        let (dvc_meteor_off, qa_accuracy_off) = metric(false)?;
        rows.push(SweepRow {
            seed,
            dvc_meteor_on,
            dvc_meteor_off,
            qa_accuracy_on,
            qa_accuracy_off,
        });
    }
    Ok(SeedSweep { split, rows })
}

impl SeedSweep {
    pub fn to_table(&self) -> String {
        let col = |f: fn(&SweepRow) -> f64| mean_std(&self.rows.iter().map(f).collect::<Vec<_>>());
        let mut out =
            String::from("setting | DVC METEOR (mean ± std) | QA accuracy % (mean ± std)\n");
        for (name, m, a) in [
            (
                "common_sense on",
                col(|r| r.dvc_meteor_on),
                col(|r| 100.0 * r.qa_accuracy_on),
            ),
            (
                "common_sense off",
                col(|r| r.dvc_meteor_off),
                col(|r| 100.0 * r.qa_accuracy_off),
            ),
        ] {
            out.push_str(&format!(
                "{name} | {:.2} ± {:.2} | {:.2} ± {:.2}\n",
                m.0, m.1, a.0, a.1
            ));
        }
        out
    }
}
