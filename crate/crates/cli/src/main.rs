use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use perilstm::config::RunConfig;
use perilstm::field::{read_sequence, write_sequence};
use perilstm::metrics::relative_l2_error;
use perilstm::network::{load_checkpoint, save_checkpoint};
use perilstm::pddo::{read_filters, write_filters};
use perilstm::physics::sample_ic;
use perilstm::reference::solve;
use perilstm::render::{render_field, render_loss};
use perilstm::trainer::{train, LossHistory};
use perilstm::{DerivativeFilterSet, Error, Field, FieldSequence, Result};

/// Largest orthogonality defect `filters check` accepts.
const ORTHOGONALITY_TOL: f64 = 1e-9;

#[derive(Parser)]
#[command(name = "perilstm", version, about = "Physics-informed ConvLSTM PDE solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or validate derivative filter files.
    #[command(subcommand)]
    Filters(FiltersCmd),
    /// Classical reference solver.
    #[command(subcommand)]
    Ref(RefCmd),
    /// Initial conditions.
    #[command(subcommand)]
    Ic(IcCmd),
    /// Train a model on one initial condition.
    Train(TrainArgs),
    /// Roll out a trained model.
    Predict(PredictArgs),
    /// Relative L2 error of a prediction against a reference.
    Eval(EvalArgs),
    /// Write PGM images of loss curves or fields.
    #[command(subcommand)]
    Plot(PlotCmd),
}

#[derive(Subcommand)]
enum FiltersCmd {
    Gen {
        #[arg(long, default_value_t = 2)]
        m: usize,
        #[arg(long)]
        dx: f64,
        #[arg(long, default_value_t = perilstm::pddo::DEFAULT_HORIZON_FACTOR)]
        horizon_factor: f64,
        #[arg(long)]
        out: PathBuf,
    },
    Check {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum RefCmd {
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Sequence whose first snapshot is the initial condition.
        #[arg(long)]
        ic: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum IcCmd {
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ic: PathBuf,
    /// Receives model.ckpt, loss.csv, config.json and periodic checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    ic: PathBuf,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    bounds: Bounds,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Per-step CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    bounds: Bounds,
}

#[derive(Subcommand)]
enum PlotCmd {
    Loss {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Field {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        step: usize,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        bounds: Bounds,
    },
}

/// Domain bounds for sequence files, which store only the grid side.
#[derive(Args, Clone, Copy)]
struct Bounds {
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    x_min: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    x_max: f64,
}

fn config_dump_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn read_ic(path: &Path, cfg: &RunConfig) -> Result<Field> {
    let seq = read_sequence(path, cfg.grid.x_min, cfg.grid.x_max)?;
    let ic = seq.fields().first().cloned().ok_or_else(|| Error::shape("initial-condition file is empty"))?;
    if ic.grid().n() != cfg.grid.n {
        return Err(Error::shape(format!(
            "initial condition is {0}x{0}, config grid is {1}x{1}",
            ic.grid().n(),
            cfg.grid.n
        )));
    }
    Ok(ic)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Filters(FiltersCmd::Gen {
            m,
            dx,
            horizon_factor,
            out,
        }) => {
            let f = DerivativeFilterSet::build(m, dx, horizon_factor)?;
            write_filters(&f, &out)?;
            let side = f.side();
            println!("wrote {} ({side}x{side} kernels)", out.display());
        }
        Command::Filters(FiltersCmd::Check { input }) => {
            let f = read_filters(&input)?;
            let defect = f.orthogonality_defect();
            println!("max orthogonality defect {defect:e}");
            if !(defect <= ORTHOGONALITY_TOL) {
                return Err(Error::non_finite(format!(
                    "orthogonality defect {defect:e} exceeds {ORTHOGONALITY_TOL:e}"
                )));
            }
        }
        Command::Ic(IcCmd::Sample { config, out }) => {
            let cfg = RunConfig::load(&config)?;
            let ic = sample_ic(&cfg.ic, &cfg.grid()?)?;
            write_sequence(&FieldSequence::new(0.0, cfg.train.dt, vec![ic])?, &out)?;
            cfg.write(config_dump_path(&out))?;
        }
        Command::Ref(RefCmd::Solve { config, ic, out }) => {
            let cfg = RunConfig::load(&config)?;
            let ic = read_ic(&ic, &cfg)?;
            let seq = solve(&cfg.solve_config()?, &ic)?;
            write_sequence(&seq, &out)?;
            cfg.write(config_dump_path(&out))?;
            println!("wrote {} snapshots to {}", seq.len(), out.display());
        }
        Command::Train(args) => {
            let cfg = RunConfig::load(&args.config)?;
            let ic = read_ic(&args.ic, &cfg)?;
            create_dir(&args.out_dir)?;
            cfg.write(args.out_dir.join("config.json"))?;
            let opts = cfg.train_options(Some(args.out_dir.join("checkpoints")));
            let outcome = train(&cfg.pde, &cfg.train, &ic, &opts, |r| {
                eprintln!(
                    "epoch {} loss_output {:e} loss_latent {:e} loss_total {:e} lr {:e}",
                    r.epoch, r.loss_output, r.loss_latent, r.loss_total, r.lr
                );
            })?;
            save_checkpoint(&outcome.model, args.out_dir.join("model.ckpt"))?;
            outcome.history.write_csv(args.out_dir.join("loss.csv"))?;
        }
        Command::Predict(args) => {
            let model = load_checkpoint(&args.checkpoint)?;
            let seq = read_sequence(&args.ic, args.bounds.x_min, args.bounds.x_max)?;
            let ic = seq.fields().first().ok_or_else(|| Error::shape("initial-condition file is empty"))?;
            let roll = model.rollout(ic, args.steps)?;
            write_sequence(&roll.fields, &args.out)?;
        }
        Command::Eval(args) => {
            let pred = read_sequence(&args.pred, args.bounds.x_min, args.bounds.x_max)?;
            let truth = read_sequence(&args.truth, args.bounds.x_min, args.bounds.x_max)?;
            let report = relative_l2_error(&pred, &truth)?;
            match &args.out {
                Some(path) => {
                    std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?;
                    println!("aggregate rel_l2 {:e} max {:e}", report.aggregate, report.max());
                }
                None => print!("{}", report.to_csv()),
            }
        }
        Command::Plot(PlotCmd::Loss { input, out }) => {
            let text = std::fs::read_to_string(&input).map_err(|e| Error::io(input, e))?;
            render_loss(&LossHistory::from_csv(&text)?, &out)?;
        }
        Command::Plot(PlotCmd::Field {
            input,
            step,
            channel,
            out,
            bounds,
        }) => {
            let seq = read_sequence(&input, bounds.x_min, bounds.x_max)?;
            let field = seq.fields().get(step).ok_or_else(|| {
                Error::config(format!("step {step} out of range for {} snapshots", seq.len()))
            })?;
            render_field(field, channel, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error category={}: {msg}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
