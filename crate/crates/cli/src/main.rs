use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use transderain::metrics::DEFAULT_PATCH_SIZE;
use transderain::netblocks::Checkpoint;
use transderain::toolcli::{
    analyze_niqe, analyze_tsne, derain_paths, evaluate, load_checkpoint, load_config, train_stage, Corpus, PairedData,
    PipelineError, Provenance,
};
use transderain::trainflow::{Stage, Tiling};

#[derive(Parser, Debug)]
#[command(name = "transderain", version, about = "Deraining through transfer-task pretraining and distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one training stage (recog, recon, distill, finetune).
    Train(TrainArgs),
    /// Derain one image or every image of a directory.
    Derain(DerainArgs),
    /// Score a checkpoint on a paired dataset (PSNR and SSIM).
    Evaluate(EvaluateArgs),
    /// Distribution analysis: NIQE histograms or a t-SNE embedding.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Print the architecture, stage tag and step of a checkpoint.
    InspectCheckpoint {
        path: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    stage: Stage,
    #[arg(long, short)]
    config: PathBuf,
    /// Step budget for this stage, replacing the configured value.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Seed for this stage, replacing the configured value.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, replacing the configured and environment values.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Copy)]
struct TilingArgs {
    /// Process the image in overlapping tiles.
    #[arg(long)]
    tiled: bool,
    #[arg(long, default_value_t = Tiling::default().tile)]
    tile: usize,
    #[arg(long, default_value_t = Tiling::default().overlap)]
    overlap: usize,
}

impl TilingArgs {
    fn tiling(self) -> Option<Tiling> {
        self.tiled.then_some(Tiling {
            tile: self.tile,
            overlap: self.overlap,
        })
    }
}

#[derive(Args, Debug)]
struct DerainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image file or directory of images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    tiling: TilingArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Configuration whose [data.evaluation] table names the dataset.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Degraded inputs (instead of --config).
    #[arg(long, requires = "gt")]
    input: Option<PathBuf>,
    /// Ground truth matched by file name (instead of --config).
    #[arg(long, requires = "input")]
    gt: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[command(flatten)]
    tiling: TilingArgs,
}

#[derive(Subcommand, Debug)]
enum AnalyzeCommand {
    /// Fit NIQE on a pristine corpus and score each corpus.
    Niqe {
        #[arg(long)]
        pristine: PathBuf,
        /// Corpus as NAME=DIR; repeatable.
        #[arg(long = "corpus", value_parser = parse_corpus, required = true)]
        corpora: Vec<(String, PathBuf)>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
        patch_size: usize,
    },
    /// Embed every corpus image in 2-D, coloured by corpus.
    Tsne {
        #[arg(long = "corpus", value_parser = parse_corpus, required = true)]
        corpora: Vec<(String, PathBuf)>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_corpus(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok((name.to_string(), PathBuf::from(dir))),
        _ => Err(format!("expected NAME=DIR, got {s:?}")),
    }
}

fn load_corpora(list: &[(String, PathBuf)]) -> Result<Vec<Corpus>, PipelineError> {
    list.iter().map(|(n, d)| Corpus::load(n, d)).collect()
}

fn report_dir(path: &Path) -> PathBuf {
    path.parent().filter(|p| !p.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn cmd_train(args: TrainArgs) -> Result<(), PipelineError> {
    let mut cfg = load_config(&args.config)?;
    let section = cfg.stages.get_mut(args.stage);
    if let Some(steps) = args.max_steps {
        section.max_steps = Some(steps);
    }
    if let Some(seed) = args.seed {
        section.seed = Some(seed);
    }
    if let Some(dir) = args.output_dir {
        cfg.output_dir = dir;
    }
    cfg.validate()?;
    info!("resolved configuration:\n{}", cfg.to_toml());
    let outcome = train_stage(&cfg, args.stage)?;
    Provenance::new(format!("train {}", args.stage), Some(&cfg))
        .arg("config", args.config.display())
        .write(&cfg.output_dir, args.stage.as_str())?;
    let s = &outcome.state;
    println!(
        "{} finished at step {}: best window loss {:e}, encoder lr {:e}, decoder lr {:e}",
        args.stage, s.step, s.best_loss, s.encoder_lr, s.decoder_lr
    );
    println!("wrote {}", cfg.output_dir.join(args.stage.best_checkpoint_name()).display());
    println!("wrote {}", cfg.output_dir.join(args.stage.final_checkpoint_name()).display());
    Ok(())
}

fn cmd_derain(args: DerainArgs) -> Result<bool, PipelineError> {
    let summary = derain_paths(&args.checkpoint, &args.input, &args.output, args.tiling.tiling())?;
    for (path, t) in &summary.outputs {
        println!("{}\t{:.3} s", path.display(), t.as_secs_f64());
    }
    for (path, msg) in &summary.failures {
        eprintln!("failed {}: {msg}", path.display());
    }
    Provenance::new("derain", None)
        .arg("checkpoint", args.checkpoint.display())
        .arg("input", args.input.display())
        .arg("tiled", args.tiling.tiled)
        .write(&args.output, "derain")?;
    Ok(summary.failures.is_empty())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), PipelineError> {
    let (data, cfg, tiling) = match (&args.config, &args.input, &args.gt) {
        (_, Some(input), Some(gt)) => (
            PairedData {
                input: input.clone(),
                gt: gt.clone(),
            },
            None,
            args.tiling.tiling(),
        ),
        (Some(path), _, _) => {
            let cfg = load_config(path)?;
            let data = cfg.data.evaluation.clone().ok_or_else(|| PipelineError::Config {
                key: "data.evaluation".into(),
                line: None,
                message: "no evaluation dataset configured".into(),
            })?;
            let tiling = args.tiling.tiling().or(cfg.inference.tiling());
            (data, Some(cfg), tiling)
        }
        _ => {
            return Err(PipelineError::Config {
                key: "--config".into(),
                line: None,
                message: "pass --config or both --input and --gt".into(),
            })
        }
    };
    let report = evaluate(&args.checkpoint, &data, tiling, &args.report)?;
    for (metric, a) in &report.aggregates {
        println!("{metric}\tmean {}\tstd {}\tcount {}", a.mean, a.std, a.count);
    }
    for (id, msg) in &report.failures {
        eprintln!("failed {id}: {msg}");
    }
    Provenance::new("evaluate", cfg.as_ref())
        .arg("checkpoint", args.checkpoint.display())
        .arg("input", data.input.display())
        .arg("gt", data.gt.display())
        .write(&report_dir(&args.report), "evaluate")?;
    Ok(())
}

fn cmd_analyze(cmd: AnalyzeCommand) -> Result<(), PipelineError> {
    match cmd {
        AnalyzeCommand::Niqe {
            pristine,
            corpora,
            output,
            patch_size,
        } => {
            let pristine_corpus = Corpus::load("pristine", &pristine)?;
            let rows = analyze_niqe(&pristine_corpus, &load_corpora(&corpora)?, patch_size, &output)?;
            for (name, _) in &corpora {
                let scores: Vec<f64> = rows.iter().filter(|r| &r.corpus == name).filter_map(|r| r.score).collect();
                let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
                println!("{name}\tmean NIQE {mean}\tscored {}", scores.len());
            }
            Provenance::new("analyze niqe", None)
                .arg("pristine", pristine.display())
                .arg("patch_size", patch_size)
                .write(&output, "niqe")?;
        }
        AnalyzeCommand::Tsne {
            corpora,
            output,
            perplexity,
            iterations,
            seed,
        } => {
            let (rows, used) = analyze_tsne(&load_corpora(&corpora)?, perplexity, iterations, seed, &output)?;
            println!("embedded {} images with perplexity {used}", rows.len());
            Provenance::new("analyze tsne", None)
                .seed("tsne", seed)
                .arg("perplexity", used)
                .arg("iterations", iterations)
                .arg("features", "32x32 grayscale thumbnails")
                .write(&output, "tsne")?;
        }
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<(), PipelineError> {
    let ckpt: Checkpoint = load_checkpoint(path)?;
    let a = ckpt.arch;
    println!("stage\t{}", ckpt.stage);
    println!("step\t{}", ckpt.step);
    println!("depth\t{}", a.depth);
    println!("base_channels\t{}", a.base_channels);
    println!("downsampling\t{}", a.downsampling);
    println!("decoder\t{}", ckpt.decoder_kind().map_or("none", |k| k.as_str()));
    let count = ckpt.encoder.num_scalars() + ckpt.decoder.as_ref().map_or(0, |d| d.1.num_scalars());
    println!("parameters\t{count}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { PipelineError::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Derain(a) => cmd_derain(a),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| true),
        Command::Analyze(c) => cmd_analyze(c).map(|_| true),
        Command::InspectCheckpoint { path } => cmd_inspect(&path).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(PipelineError::EXIT_RUNTIME as u8),
        Err(e) => {
            eprintln!("error: {e}");
            if let PipelineError::Missing(paths) = &e {
                for p in paths {
                    let stage = p
                        .file_name()
                        .and_then(|n| n.to_str())
                        .and_then(|n| n.split('.').next())
                        .unwrap_or("?");
                    eprintln!("  expected {} (produced by the {stage} stage)", p.display());
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
