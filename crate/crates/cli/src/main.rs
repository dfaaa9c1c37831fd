//! `groundcount`: train, evaluate and inspect grounded counting models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use groundcount_core::counters::ModelKind;
use groundcount_core::data::Split;
use groundcount_core::harness::{
    cmd_eval, cmd_filter, cmd_sweep, cmd_synth, cmd_train, FilterInputs, Profile, ResolvedConfig, RunConfig,
};

#[derive(Parser)]
#[command(name = "groundcount", version, about = "Grounded counting for visual question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; keeps the checkpoint with the best dev accuracy.
    Train(Common),
    /// Evaluate a checkpoint and dump per-question counts and weights.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Dev)]
        split: SplitArg,
    },
    /// Select counting questions from VQA-format files and write split manifests.
    Filter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_questions: PathBuf,
        #[arg(long)]
        train_annotations: PathBuf,
        #[arg(long, requires = "val_annotations")]
        val_questions: Option<PathBuf>,
        #[arg(long, requires = "val_questions")]
        val_annotations: Option<PathBuf>,
        /// Visual Genome question/answer file.
        #[arg(long)]
        visual_genome: Option<PathBuf>,
        /// Newline-separated test question ids; otherwise a seeded draw.
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        #[arg(long)]
        test_size: Option<usize>,
    },
    /// Write a synthetic dataset to disk.
    Synth(Common),
    /// Train IRLC over a grid of penalty weights.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,0.005,0.05,0.5")]
        entropy_weights: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.005,0.05,0.5")]
        interaction_weights: Vec<f64>,
        /// Epochs per cell; defaults to the config's max_epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    no_grounding: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// softcount, updown, irlc, guess1 or lstm.
    #[arg(long)]
    model: Option<String>,
    /// Dataset directory (feature container plus question files).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// GloVe-format word vectors.
    #[arg(long)]
    glove: Option<PathBuf>,
    /// Disable data-parallel execution.
    #[arg(long)]
    sequential: bool,
    /// Root for relative data paths.
    #[arg(long, env = "GROUNDCOUNT_DATA_ROOT", default_value = ".")]
    data_root: PathBuf,
}

fn under(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

impl Common {
    fn resolve(&self) -> Result<ResolvedConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.profile {
            cfg.profile = match p {
                ProfileArg::Desk => Profile::Desk,
                ProfileArg::Paper => Profile::Paper,
            };
        }
        if self.no_grounding {
            cfg.grounding = false;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(m) = &self.model {
            cfg.model = m.parse::<ModelKind>()?;
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = Some(d.clone());
        }
        if let Some(e) = self.max_epochs {
            cfg.max_epochs = Some(e);
        }
        if let Some(g) = &self.glove {
            cfg.glove = Some(g.clone());
        }
        if self.sequential {
            cfg.parallel = false;
        }
        cfg.data_dir = cfg.data_dir.map(|d| under(&self.data_root, &d));
        cfg.glove = cfg.glove.map(|g| under(&self.data_root, &g));
        Ok(cfg.resolve()?)
    }
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let r = cmd_train(&cfg, &mut |e| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  train acc {:.4}  dev acc {:.4}  dev rmse {:.4}",
                    e.epoch, e.train_loss, e.train_accuracy, e.dev_accuracy, e.dev_rmse
                )
            })?;
            println!(
                "best epoch {}: dev accuracy {:.4}, rmse {:.4}",
                r.best_epoch, r.dev.accuracy, r.dev.rmse
            );
            print_files(&r.files);
        }
        Command::Eval { common, checkpoint, split } => {
            let cfg = common.resolve()?;
            let r = cmd_eval(&cfg, &checkpoint, split.into(), cfg.glove.as_deref())?;
            println!("{} {}: accuracy {:.4}, rmse {:.4}, n {}", r.report.model, r.report.split, r.report.accuracy, r.report.rmse, r.report.n);
            for (c, q) in &r.report.grounding {
                println!("grounding quality {c}: {q}");
            }
            print_files(&r.files);
        }
        Command::Filter {
            common,
            train_questions,
            train_annotations,
            val_questions,
            val_annotations,
            visual_genome,
            test_manifest,
            test_size,
        } => {
            let root = &common.data_root;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs/filter"));
            let inputs = FilterInputs {
                train_questions: under(root, &train_questions),
                train_annotations: under(root, &train_annotations),
                val_questions: val_questions.map(|p| under(root, &p)),
                val_annotations: val_annotations.map(|p| under(root, &p)),
                visual_genome: visual_genome.map(|p| under(root, &p)),
                test_manifest: test_manifest.map(|p| under(root, &p)),
                test_size,
                seed: common.seed.unwrap_or(0),
            };
            let r = cmd_filter(&inputs, &out)?;
            for w in &r.warnings {
                eprintln!("warning: question {}: {}", w.question_id, w.message);
            }
            for (reason, n) in &r.histogram {
                println!("{reason:<14} {n}");
            }
            println!(
                "train {} ({} from VQA), dev {}, test {}",
                r.train, r.train_from_vqa, r.dev, r.test
            );
            print_files(&r.files);
        }
        Command::Synth(common) => {
            let cfg = common.resolve()?;
            print_files(&cmd_synth(&cfg)?);
        }
        Command::Sweep { common, entropy_weights, interaction_weights, epochs } => {
            let cfg = common.resolve()?;
            if cfg.model != ModelKind::Irlc {
                bail!("the penalty sweep trains IRLC; got --model {}", cfg.model);
            }
            let (cells, files) = cmd_sweep(&cfg, &entropy_weights, &interaction_weights, epochs)?;
            for c in &cells {
                println!(
                    "entropy {:<8} interaction {:<8} dev accuracy {:.4}",
                    c.entropy_weight, c.interaction_weight, c.dev_accuracy
                );
            }
            print_files(&files);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
