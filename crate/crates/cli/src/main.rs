use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use duoseg_core::experiment::{run_pipeline, ExperimentConfig, PipelineStage, Report, RunDir};
use duoseg_core::io::{read_label, Split};
use duoseg_core::metrics::{dice_coefficient, fid_report, mean_foreground_dice};

#[derive(Parser)]
#[command(
    name = "duoseg",
    version,
    about = "Paired label/volume latent diffusion and segmentation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Run directory. Defaults to $DUOSEG_OUT/<config name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the top-level experiment seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset.
    Phantom(Common),
    /// Train one model family.
    Train {
        #[arg(value_enum)]
        what: TrainTarget,
        #[command(flatten)]
        common: Common,
    },
    /// Sample synthetic label/volume pairs from the trained generator.
    Generate(Common),
    /// Compute a metric.
    Eval {
        #[command(subcommand)]
        metric: EvalMetric,
    },
    /// Run pipeline stages (all of them unless --stage is given).
    Run {
        #[command(flatten)]
        common: Common,
        /// Stage to run; repeatable.
        #[arg(long = "stage")]
        stages: Vec<PipelineStage>,
    },
    /// Build the report and print it as markdown.
    Report(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainTarget {
    Vae,
    Diffusion,
    Controlnet,
    Seg,
}

impl TrainTarget {
    fn stages(self) -> &'static [PipelineStage] {
        use PipelineStage as S;
        match self {
            TrainTarget::Vae => &[S::VaeLabel, S::VaeImage],
            TrainTarget::Diffusion => &[S::DiffLabel, S::DiffImage],
            TrainTarget::Controlnet => &[S::Controlnet],
            TrainTarget::Seg => &[S::SegReal, S::SegMixed],
        }
    }
}

#[derive(Subcommand)]
enum EvalMetric {
    /// Per-axis FID of real training volumes vs generated volumes of a run.
    Fid(Common),
    /// Dice between two label files.
    Dice {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Report only this class instead of the mean over foreground classes.
        #[arg(long)]
        class: Option<u8>,
    },
}

struct RunContext {
    config: ExperimentConfig,
    run_dir: PathBuf,
}

fn default_root() -> PathBuf {
    std::env::var_os("DUOSEG_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

impl Common {
    fn resolve(&self) -> Result<RunContext> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        let run_dir = self.out.clone().unwrap_or_else(|| default_root().join(&config.name));
        Ok(RunContext { config, run_dir })
    }

    fn run(&self, stages: &[PipelineStage]) -> Result<RunContext> {
        let ctx = self.resolve()?;
        let run = run_pipeline(&ctx.config, stages, &ctx.run_dir)?;
        for s in &run.executed {
            println!("ran      {s}");
        }
        for s in &run.skipped {
            println!("skipped  {s} (up to date)");
        }
        println!("run directory: {}", ctx.run_dir.display());
        Ok(ctx)
    }
}

fn eval_fid(common: &Common) -> Result<()> {
    let ctx = common.resolve()?;
    let dir = RunDir::new(&ctx.run_dir);
    let real = dir.real().context("no phantom dataset in run directory")?;
    let synthetic = dir.synthetic().context("no synthetic dataset in run directory")?;
    let volumes = |pairs: Vec<(_, _)>| pairs.into_iter().map(|(v, _)| v).collect::<Vec<_>>();
    let r = volumes(real.pairs(Split::Train)?);
    let s = volumes(synthetic.pairs(Split::Train)?);
    let report = fid_report(&r, &s, &ctx.config.evaluation.fid)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn eval_dice(pred: &Path, truth: &Path, class: Option<u8>) -> Result<()> {
    let p = read_label(pred)?;
    let t = read_label(truth)?;
    let d = match class {
        Some(c) => dice_coefficient(&p, &t, c)?,
        None => {
            let classes = p.num_classes.max(t.num_classes);
            if classes < 2 {
                bail!("labels carry no foreground classes; pass --class");
            }
            mean_foreground_dice(&p, &t, classes)?
        }
    };
    println!("{d:.6}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Phantom(c) => c.run(&[PipelineStage::Phantom]).map(drop),
        Command::Train { what, common } => common.run(what.stages()).map(drop),
        Command::Generate(c) => c.run(&[PipelineStage::Generate]).map(drop),
        Command::Eval { metric } => match metric {
            EvalMetric::Fid(c) => eval_fid(c),
            EvalMetric::Dice { pred, truth, class } => eval_dice(pred, truth, *class),
        },
        Command::Run { common, stages } => {
            let stages = if stages.is_empty() {
                PipelineStage::ALL.to_vec()
            } else {
                stages.clone()
            };
            common.run(&stages).map(drop)
        }
        Command::Report(c) => c.run(&[PipelineStage::Report]).and_then(|ctx| {
            let path = RunDir::new(&ctx.run_dir).artifact(PipelineStage::Report);
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            print!("{}", Report::from_json(&text)?.to_markdown());
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
