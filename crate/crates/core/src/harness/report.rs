//! Result tables assembled from evaluation records.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ablation::{AblationGrid, SeedSweep};
use crate::error::Result;
use crate::metrics::MetricReport;

/// One evaluation output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalRecord {
    Dvc {
        name: String,
        gt: Option<MetricReport>,
        learned: Option<MetricReport>,
    },
    Qa {
        name: String,
        accuracy: f64,
        questions: usize,
    },
    Ablation {
        name: String,
        grid: AblationGrid,
    },
    Sweep {
        name: String,
        sweep: SeedSweep,
    },
}

pub const DVC_HEADER: &str =
    "run | GT B@3 | GT B@4 | GT METEOR | learned B@3 | learned B@4 | learned METEOR";
pub const QA_HEADER: &str = "run | accuracy % | questions";

fn cells(r: Option<&MetricReport>) -> String {
    match r {
        Some(r) => format!("{:.2} | {:.2} | {:.2}", r.bleu3, r.bleu4, r.meteor),
        None => "- | - | -".into(),
    }
}

/// Plain-text tables: DVC captioning scores, then QA accuracy, then any
/// ablation grids and sweeps. With no records only the two headers remain.
pub fn render(records: &[EvalRecord]) -> String {
    let mut out = format!("{DVC_HEADER}\n");
    for r in records {
        if let EvalRecord::Dvc { name, gt, learned } = r {
            out.push_str(&format!(
                "{name} | {} | {}\n",
                cells(gt.as_ref()),
                cells(learned.as_ref())
            ));
        }
    }
    out.push('\n');
    out.push_str(QA_HEADER);
    out.push('\n');
    for r in records {
        if let EvalRecord::Qa {
            name,
            accuracy,
            questions,
        } = r
        {
            out.push_str(&format!("{name} | {:.2} | {questions}\n", 100.0 * accuracy));
        }
    }
    for r in records {
        match r {
            EvalRecord::Ablation { name, grid } => {
                out.push_str(&format!("\n{name}\n{}", grid.to_table()))
            }
            EvalRecord::Sweep { name, sweep } => {
                out.push_str(&format!("\n{name}\n{}", sweep.to_table()))
            }
            _ => {}
        }
    }
    out
}

/// Every `*.json` file in `dir` that parses as a record, sorted by file name.
pub fn collect(dir: &Path) -> Result<Vec<EvalRecord>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        match serde_json::from_str::<EvalRecord>(&std::fs::read_to_string(&p)?) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_gives_headers_only() {
        let text = render(&[]);
        assert_eq!(text, format!("{DVC_HEADER}\n\n{QA_HEADER}\n"));
    }

    #[test]
    fn rows_follow_records() {
        let report = MetricReport {
            bleu3: 1.0,
            bleu4: 0.5,
            meteor: 7.25,
            per_threshold: Vec::new(),
        };
        let records = vec![
            EvalRecord::Dvc {
                name: "a".into(),
                gt: Some(report),
                learned: None,
            },
            EvalRecord::Qa {
                name: "q".into(),
                accuracy: 0.5,
                questions: 10,
            },
        ];
        let text = render(&records);
        assert!(text.contains("a | 1.00 | 0.50 | 7.25 | - | - | -"));
        assert!(text.contains("q | 50.00 | 10"));
    }

    #[test]
    fn collect_skips_foreign_json() {
        let dir = tempfile::tempdir().unwrap();
        let r = EvalRecord::Qa {
            name: "q".into(),
            accuracy: 1.0,
            questions: 1,
        };
        std::fs::write(
            dir.path().join("b.json"),
            serde_json::to_string(&r).unwrap(),
        )
        .unwrap();
        std::fs::write(dir.path().join("a.json"), "{\"x\": 1}").unwrap();
        std::fs::write(dir.path().join("c.txt"), "nope").unwrap();
        assert_eq!(collect(dir.path()).unwrap(), vec![r]);
    }
}
