use std::path::PathBuf;
use std::process::ExitCode;

use cfr_core::harness::commands::{ablate_run, eval_run, gen_data, gradcheck_run, row_label, train_run, AblationCell};
use cfr_core::harness::gradcheck::format_report;
use cfr_core::harness::{Preset, RunConfig};
use cfr_core::tensor::Fault;
use clap::{Args, Parser, Subcommand};

// glibc malloc hands large tape buffers back to the OS after every forward
// pass; the page faults then dominate inference timing.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "cfr", about = "Two-stream detector with cyclic fuse-and-refine fusion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (train and test splits).
    GenData(Common),
    /// Train one model and write checkpoints plus a training log.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every loop count for several seeds.
    Ablate(Common),
    /// Finite-difference check of every differentiable op and a tiny model.
    Gradcheck {
        /// Directory for gradcheck.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corrupt the conv backward pass (checks that the checker notices).
        #[arg(long, hide = true)]
        inject_conv_fault: bool,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config; unknown keys are errors.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset seed for gen-data, model seed (first seed for ablate) otherwise.
    #[arg(long)]
    seed: Option<u64>,
    /// Loop count (0 = average-fusion baseline); a comma list for ablate.
    #[arg(long, value_delimiter = ',')]
    loops: Option<Vec<usize>>,
    /// Output directory (the dataset directory for gen-data).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["pedestrian", "multiclass"])]
    preset: Option<String>,
    /// Dataset directory, overriding `data_dir`.
    #[arg(long)]
    data: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn usage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    GenData,
    Single,
    Ablate,
}

fn resolve(c: &Common, kind: Kind) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &c.preset {
        cfg.preset = p.parse::<Preset>().map_err(usage)?;
    }
    if let Some(d) = &c.data {
        cfg.data_dir = d.clone();
    }
    match kind {
        Kind::GenData => {
            if let Some(s) = c.seed {
                cfg.data_seed = s;
            }
            if let Some(o) = &c.out {
                cfg.data_dir = o.clone();
            }
            if c.loops.is_some() {
                return Err(Failure::Usage("gen-data takes no --loops".into()));
            }
        }
        Kind::Single | Kind::Ablate => {
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            if let Some(o) = &c.out {
                cfg.out_dir = o.clone();
            }
            match (&c.loops, kind) {
                (Some(l), Kind::Ablate) => cfg.ablate_loops = l.clone(),
                (Some(l), _) if l.len() == 1 => cfg = cfg.with_loops(l[0]),
                (Some(_), _) => return Err(Failure::Usage("--loops takes one value here".into())),
                (None, _) => {}
            }
        }
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = resolve(&c, Kind::GenData)?;
            let m = gen_data(&cfg).map_err(runtime)?;
            println!("wrote {} train / {} test samples to {}", m.train.len(), m.test.len(), m.root.display());
        }
        Command::Train(c) => {
            let cfg = resolve(&c, Kind::Single)?;
            eprintln!("{}", cfg_summary(&cfg));
            let out = train_run(&cfg, &cfg.out_dir, &mut |line| eprintln!("{line}")).map_err(runtime)?;
            println!("{}", out.final_checkpoint.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = resolve(&common, Kind::Single)?;
            let eval = eval_run(&cfg, &checkpoint, &cfg.out_dir).map_err(runtime)?;
            print!("{}", eval.report.to_text());
        }
        Command::Ablate(c) => {
            let cfg = resolve(&c, Kind::Ablate)?;
            eprintln!("{}", cfg_summary(&cfg));
            let progress = |cell: &AblationCell| match &cell.report {
                Some(r) => eprintln!("{} seed {}: map {:?} lamr {:?}", row_label(cell.loops), cell.seed, r.map, r.log_average_miss_rate),
                None => eprintln!("{} seed {}: failed: {}", row_label(cell.loops), cell.seed, cell.error.as_deref().unwrap_or("")),
            };
            ablate_run(&cfg, &cfg.out_dir, &progress).map_err(runtime)?;
            print!("{}", std::fs::read_to_string(cfg.out_dir.join("ablation.txt")).map_err(runtime)?);
        }
        Command::Gradcheck { out, inject_conv_fault } => {
            let fault = inject_conv_fault.then_some(Fault::ConvBackward);
            let reports = gradcheck_run(fault, out.as_deref()).map_err(runtime)?;
            print!("{}", format_report(&reports));
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure::Runtime(format!("failing checks: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn cfg_summary(cfg: &RunConfig) -> String {
    format!("fusion {} seed {} data {} out {}", cfg.fusion, cfg.seed, cfg.data_dir.display(), cfg.out_dir.display())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
