use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use iperceive::confounder::ConfounderDictionary;
use iperceive::harness::ablation::{ablate_dvc, ablate_qa, common_sense_sweep};
use iperceive::harness::checkpoint::Checkpoint;
use iperceive::harness::config::TrainConfig;
use iperceive::harness::dvc::{corpus_dictionary, DvcSystem, ProposalSource};
use iperceive::harness::qa::{dense_captions, DenseCaptions, QaSystem};
use iperceive::harness::report::{collect, render, EvalRecord};
use iperceive::harness::synth::{synth_corpus, Split, SyntheticCorpus};
use iperceive::videoqa::write_jsonl;
use iperceive::{Error, Result};

#[derive(Parser)]
#[command(
    name = "iperceive",
    version,
    about = "Train and evaluate common-sense DVC and VideoQA models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Proposals {
    Gt,
    Learned,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Grid {
    Dvc,
    Qa,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with annotations, QA files and features.
    PrepareSynthetic {
        #[command(flatten)]
        common: Common,
    },
    /// Build the confounder dictionary from the training split's RoIs.
    BuildConfounders {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the dense video captioning model.
    TrainDvc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from `<out>/dvc.ckpt` when it exists; `--config` then only sets the step count.
        #[arg(long)]
        resume: bool,
    },
    /// Train the VideoQA model.
    TrainQa {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// DVC checkpoint providing dense-caption features.
        #[arg(long)]
        dvc_checkpoint: Option<PathBuf>,
        /// Continue from `<out>/qa.ckpt` when it exists; `--config` then only sets the step count.
        #[arg(long)]
        resume: bool,
    },
    /// Caption a split and score it.
    EvalDvc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "both")]
        proposals: Proposals,
    },
    /// Answer a split's questions and score them.
    EvalQa {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dvc_checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Train and evaluate every flag combination.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Corpus directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        grid: Grid,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Also compare common-sense on/off over these seeds.
        #[arg(long, value_delimiter = ',')]
        sweep_seeds: Vec<u64>,
    },
    /// Summarize evaluation records into tables.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory of evaluation JSON files.
        #[arg(long)]
        inputs: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Config with the corpus section taken from the data on disk.
fn config_for(common: &Common, corpus: &SyntheticCorpus) -> Result<TrainConfig> {
    let mut cfg = load_config(common)?;
    cfg.corpus = corpus.config.clone();
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_dense(
    path: Option<&Path>,
    corpus: &SyntheticCorpus,
    use_dvc: bool,
) -> Result<Option<DenseCaptions>> {
    match (path, use_dvc) {
        (Some(p), true) => {
            let dvc = DvcSystem::from_checkpoint(Checkpoint::load(p)?)?;
            Ok(Some(dense_captions(&dvc, corpus, &corpus.vocabulary())?))
        }
        (None, true) => Err(Error::Config(
            "use_dvc_features is on; pass --dvc-checkpoint".into(),
        )),
        (_, false) => Ok(None),
    }
}

fn write_history(path: &Path, history: &[iperceive::harness::checkpoint::StepLog]) -> Result<()> {
    std::fs::write(path, write_jsonl(history)?)?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::PrepareSynthetic { common } => {
            let cfg = load_config(&common)?;
            let corpus = synth_corpus(cfg.seed, &cfg.corpus)?;
            corpus.write(&common.out)?;
            println!(
                "wrote {} videos, {} questions, vocabulary {} to {}",
                corpus.videos.len(),
                corpus.qa.len(),
                corpus.vocabulary().len(),
                common.out.display()
            );
        }
        Command::BuildConfounders { common, data } => {
            let corpus = SyntheticCorpus::load(&data)?;
            let dict = corpus_dictionary(&corpus)?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join("confounders.bin");
            dict.save(&path)?;
            let check = ConfounderDictionary::load(&path)?;
            println!(
                "wrote {}×{} dictionary to {}",
                check.num_classes(),
                check.dim(),
                path.display()
            );
        }
        Command::TrainDvc {
            common,
            data,
            resume,
        } => {
            let corpus = SyntheticCorpus::load(&data)?;
            std::fs::create_dir_all(&common.out)?;
            let ckpt = common.out.join("dvc.ckpt");
            let mut sys = if resume && ckpt.exists() {
                let mut sys = DvcSystem::from_checkpoint(Checkpoint::load(&ckpt)?)?;
                if common.config.is_some() {
                    sys.config.dvc.steps = load_config(&common)?.dvc.steps;
                }
                sys
            } else {
                DvcSystem::new(config_for(&common, &corpus)?, &corpus)?
            };
            let result = sys.train(&corpus, Some(&ckpt));
            write_history(&common.out.join("dvc_log.jsonl"), &sys.history)?;
            result?;
            let last = sys.history.last().map(|h| h.total).unwrap_or(f64::NAN);
            println!(
                "dvc trained to step {} (loss {last:.4}); checkpoint {}",
                sys.step,
                ckpt.display()
            );
        }
        Command::TrainQa {
            common,
            data,
            dvc_checkpoint,
            resume,
        } => {
            let corpus = SyntheticCorpus::load(&data)?;
            std::fs::create_dir_all(&common.out)?;
            let ckpt = common.out.join("qa.ckpt");
            let mut sys = if resume && ckpt.exists() {
                let loaded = Checkpoint::load(&ckpt)?;
                let dense = load_dense(
                    dvc_checkpoint.as_deref(),
                    &corpus,
                    loaded.config.flags.use_dvc_features,
                )?;
                let mut sys = QaSystem::from_checkpoint(loaded, dense)?;
                if common.config.is_some() {
                    sys.config.qa.steps = load_config(&common)?.qa.steps;
                }
                sys
            } else {
                let cfg = config_for(&common, &corpus)?;
                let dense = load_dense(
                    dvc_checkpoint.as_deref(),
                    &corpus,
                    cfg.flags.use_dvc_features,
                )?;
                QaSystem::new(cfg, &corpus, dense)?
            };
            let result = sys.train(&corpus, Some(&ckpt));
            write_history(&common.out.join("qa_log.jsonl"), &sys.history)?;
            result?;
            let last = sys.history.last().map(|h| h.total).unwrap_or(f64::NAN);
            println!(
                "qa trained to step {} (loss {last:.4}); checkpoint {}",
                sys.step,
                ckpt.display()
            );
        }
        Command::EvalDvc {
            common,
            data,
            checkpoint,
            split,
            proposals,
        } => {
            let corpus = SyntheticCorpus::load(&data)?;
            let sys = DvcSystem::from_checkpoint(Checkpoint::load(&checkpoint)?)?;
            std::fs::create_dir_all(&common.out)?;
            let mut reports = [None, None];
            for (i, source) in [ProposalSource::GroundTruth, ProposalSource::Learned]
                .into_iter()
                .enumerate()
            {
                let wanted = matches!(
                    (proposals, source),
                    (Proposals::Both, _)
                        | (Proposals::Gt, ProposalSource::GroundTruth)
                        | (Proposals::Learned, ProposalSource::Learned)
                );
                if !wanted {
                    continue;
                }
                let ev = sys.evaluate(&corpus, split.into(), source)?;
                write_json(
                    &common.out.join(format!("captions_{}.json", source.name())),
                    &ev.predictions,
                )?;
                println!("{} proposals\n{}", source.name(), ev.report.to_table());
                reports[i] = Some(ev.report);
            }
            let [gt, learned] = reports;
            let name = format!("dvc/{}", Split::from(split).name());
            write_json(
                &common.out.join("eval_dvc.json"),
                &EvalRecord::Dvc { name, gt, learned },
            )?;
        }
        Command::EvalQa {
            common,
            data,
            checkpoint,
            dvc_checkpoint,
            split,
        } => {
            let corpus = SyntheticCorpus::load(&data)?;
            let loaded = Checkpoint::load(&checkpoint)?;
            let dense = load_dense(
                dvc_checkpoint.as_deref(),
                &corpus,
                loaded.config.flags.use_dvc_features,
            )?;
            let sys = QaSystem::from_checkpoint(loaded, dense)?;
            let ev = sys.evaluate(&corpus, split.into())?;
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(
                common.out.join("qa_predictions.jsonl"),
                write_jsonl(&ev.predictions)?,
            )?;
            let record = EvalRecord::Qa {
                name: format!("qa/{}", ev.split.name()),
                accuracy: ev.accuracy,
                questions: ev.predictions.len(),
            };
            write_json(&common.out.join("eval_qa.json"), &record)?;
            println!(
                "accuracy {:.2}% over {} questions",
                100.0 * ev.accuracy,
                ev.predictions.len()
            );
        }
        Command::Ablate {
            common,
            data,
            grid,
            split,
            sweep_seeds,
        } => {
            let (cfg, corpus) = match &data {
                Some(dir) => {
                    let corpus = SyntheticCorpus::load(dir)?;
                    (config_for(&common, &corpus)?, corpus)
                }
                None => {
                    let cfg = load_config(&common)?;
                    let corpus = synth_corpus(cfg.seed, &cfg.corpus)?;
                    (cfg, corpus)
                }
            };
            std::fs::create_dir_all(&common.out)?;
            let split = Split::from(split);
            if matches!(grid, Grid::Dvc | Grid::Both) {
                let g = ablate_dvc(&cfg, &corpus, split);
                println!("{}", g.to_table());
                write_json(
                    &common.out.join("ablation_dvc.json"),
                    &EvalRecord::Ablation {
                        name: "ablation/dvc".into(),
                        grid: g,
                    },
                )?;
            }
            if matches!(grid, Grid::Qa | Grid::Both) {
                let g = ablate_qa(&cfg, &corpus, split);
                println!("{}", g.to_table());
                write_json(
                    &common.out.join("ablation_qa.json"),
                    &EvalRecord::Ablation {
                        name: "ablation/qa".into(),
                        grid: g,
                    },
                )?;
            }
            if !sweep_seeds.is_empty() {
                let sweep = common_sense_sweep(&cfg, &sweep_seeds, split)?;
                println!("{}", sweep.to_table());
                write_json(
                    &common.out.join("sweep.json"),
                    &EvalRecord::Sweep {
                        name: "common-sense sweep".into(),
                        sweep,
                    },
                )?;
            }
        }
        Command::Report { common, inputs } => {
            let records = collect(&inputs)?;
            let table = render(&records);
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(common.out.join("report.txt"), &table)?;
            write_json(&common.out.join("report.json"), &records)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn error_record(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            e.exit()
        }
        Err(e) => {
            eprintln!("{}", error_record("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
