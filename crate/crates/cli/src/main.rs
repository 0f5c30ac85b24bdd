use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kvlock::config::RunConfig;
use kvlock::pipeline;
use kvlock::KvLockError;

/// Masked KV locking for toy video diffusion edits.
#[derive(Debug, Parser)]
#[command(name = "kvlock", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (flat `key = value` file).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory, overriding the config file.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Feature toggle override, e.g. `kv_schedule=false` or `fixed_alpha=0.5`.
    #[arg(long = "toggle", global = true, value_name = "NAME=BOOL")]
    toggles: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode the source and write the KV bank.
    Cache,
    /// Run guided sampling with background KV injection.
    Edit,
    /// Toy 1-D hallucination experiment.
    Toy,
    /// Ablation matrix over the synthetic scene suite.
    Ablate,
    /// Collect existing outputs into report.md.
    Report,
}

fn load_config(cli: &Cli) -> kvlock::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = Some(out.clone());
    }
    for t in &cli.toggles {
        cfg.set_toggle(t)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn run(cli: &Cli) -> kvlock::Result<()> {
    let cfg = load_config(cli)?;
    let pool = pipeline::thread_pool()?;
    pool.install(|| match cli.command {
        Command::Cache => {
            let r = pipeline::cmd_cache(&cfg)?;
            print!("{}", r.report_csv);
            println!(
                "wrote {} ({} entries, hash {:016x})",
                r.bank_path.display(),
                r.entries,
                r.bank_hash
            );
            Ok(())
        }
        Command::Edit => {
            let s = pipeline::cmd_edit(&cfg)?;
            println!(
                "background ssim {:.4} psnr {} flags {}/{}",
                s.ssim,
                fmt(s.psnr),
                s.flags,
                s.steps
            );
            Ok(())
        }
        Command::Toy => {
            for r in pipeline::cmd_toy(&cfg)? {
                println!(
                    "seed {} {:<10} hallucinated {:>4}/{} auc {} reduction {} {}",
                    r.seed,
                    r.arm,
                    r.hallucinated,
                    r.samples,
                    fmt(r.auc),
                    fmt(r.reduction),
                    r.note
                );
            }
            Ok(())
        }
        Command::Ablate => {
            for s in pipeline::cmd_ablate(&cfg)? {
                println!(
                    "{:<24} ssim {} psnr {} flags {} {}",
                    s.arm,
                    fmt(s.ssim_mean),
                    fmt(s.psnr_mean),
                    fmt(s.flags_mean),
                    s.status
                );
            }
            Ok(())
        }
        Command::Report => {
            pipeline::cmd_report(&cfg)?;
            println!("wrote {}", cfg.out_dir().join("report.md").display());
            Ok(())
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &KvLockError) -> ExitCode {
    ExitCode::from(e.exit_code() as u8)
}
