use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latmix::pipeline::{
    cmd_ablate, cmd_gen_data, cmd_learn, cmd_quantize, cmd_sweep_blocksize, cmd_verify_bounds,
    AblateMethod, ExperimentConfig,
};
use latmix::Error;

/// Learned affine transforms for MX block quantization: train them, fold
/// them into weights, quantize, and verify the error bounds.
#[derive(Parser)]
#[command(name = "latmix", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration, JSON with a `schema` field
    #[arg(long)]
    config: PathBuf,
    /// Override the seed in the configuration
    #[arg(long)]
    seed: Option<u64>,
    /// Directory all artifacts are written into
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the stream and value transforms against the full-precision teacher
    Learn(Common),
    /// Fold learned transforms into the weights and quantize them (gate first)
    Quantize(Common),
    /// Compare transform families on activation error and teacher KL
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of: none, hadamard_full, hadamard_block,
        /// learned_orthogonal, learned_invertible, latmix_lu, latmix_qr
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Quantization error of fixed transforms across block sizes
    SweepBlocksize {
        #[command(flatten)]
        common: Common,
        /// Comma-separated block sizes; each must divide d_model
        #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32, 64])]
        sizes: Vec<usize>,
    },
    /// Run every numerical bound check and write a JSON report
    VerifyBounds(Common),
    /// Write the synthetic calibration data to a tensor container
    GenData(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_file(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Cmd::Learn(c) => {
            let cfg = load(&c)?;
            let out = cmd_learn(&cfg, &c.out)?;
            println!("trace      {}", out.trace.display());
            println!("checkpoint {}", out.checkpoint.display());
            println!("loss {} -> {} over {} steps", out.initial_loss, out.final_loss, out.steps);
            if let Some(step) = out.diverged_at {
                return Err(Error::Diverged {
                    step,
                    detail: "checkpoint holds the last finite parameters".into(),
                });
            }
            Ok(())
        }
        Cmd::Quantize(c) => {
            let cfg = load(&c)?;
            let out = cmd_quantize(&cfg, &c.out)?;
            println!("fold deviation {} (tolerance {})", out.metrics.fold_deviation, out.metrics.fold_tolerance);
            println!("model   {}", out.model.display());
            println!("metrics {}", out.metrics_path.display());
            println!(
                "activation mse {}  logit mse {}",
                out.metrics.activation_mse, out.metrics.logits_mse
            );
            Ok(())
        }
        Cmd::Ablate { common, methods } => {
            let cfg = load(&common)?;
            let methods = if methods.is_empty() {
                AblateMethod::ALL.to_vec()
            } else {
                methods
                    .iter()
                    .map(|m| AblateMethod::parse(m))
                    .collect::<Result<Vec<_>, _>>()?
            };
            let (path, rows) = cmd_ablate(&cfg, &methods, &common.out)?;
            for r in &rows {
                println!("{:<20} mse {:<12} kl {}", r.method, r.activation_mse, r.kl_to_teacher);
            }
            println!("table {}", path.display());
            Ok(())
        }
        Cmd::SweepBlocksize { common, sizes } => {
            let cfg = load(&common)?;
            let (path, rows) = cmd_sweep_blocksize(&cfg, &sizes, &common.out)?;
            for r in &rows {
                println!("{:<16} B={:<4} mse {}", r.method, r.block_size, r.mse);
            }
            println!("table {}", path.display());
            Ok(())
        }
        Cmd::VerifyBounds(c) => {
            let cfg = load(&c)?;
            let (path, bundle) = cmd_verify_bounds(&cfg, &c.out)?;
            println!(
                "all bounds hold: {} error-bound reports, {} max-bound grid points, {} categorical scenarios",
                bundle.theorem1.len(),
                bundle.lemma.len(),
                bundle.proposition2.scenarios
            );
            println!("report {}", path.display());
            Ok(())
        }
        Cmd::GenData(c) => {
            let cfg = load(&c)?;
            let path = cmd_gen_data(&cfg, &c.out)?;
            println!("data {}", path.display());
            Ok(())
        }
    }
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidArgument(_)
        | Error::Container(_)
        | Error::Io(_)
        | Error::Json(_) => 1,
        Error::Singular(_) | Error::NonFinite(_) | Error::Diverged { .. } => 2,
        Error::Verification(_) => 3,
    }
}

fn main() -> ExitCode {
    // Usage mistakes are config errors (exit 1); clap's default of 2 would
    // collide with the numerical-failure code.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
