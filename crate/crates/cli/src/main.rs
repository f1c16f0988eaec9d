//! `kgt`: build key graphs from images, benchmark attention backends,
//! verify gradients, train the toy denoiser, and run inference.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags/values), 2 on
//! data errors (unreadable or malformed files, failed checks).

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kgt_core::attention::Backend;
use kgt_core::bench::{self, RunSpec};
use kgt_core::checks;
use kgt_core::config::Config;
use kgt_core::keygraph::KeyGraph;
use kgt_core::model::Net;
use kgt_core::pgm::{read_pgm, write_pgm, GrayImage};
use kgt_core::train::run_training;
use kgt_core::windowing::partition;
use kgt_core::KgtError;

#[derive(Parser)]
#[command(name = "kgt", version, about = "Key-graph attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump the key graph of an image as CSV (window,row,rank,neighbor).
    BuildGraph {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        window: usize,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the attention cost/scaling benchmark and write a CSV report.
    AttnBench {
        /// Grid preset: "default" (hw up to 1024) or "small" (smoke test).
        #[arg(long, default_value = "default")]
        grid: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
        /// Cells whose modeled footprint exceeds this budget are skipped.
        #[arg(long = "budget-mb", default_value_t = 2048)]
        budget_mb: u64,
    },
    /// Run the full 64-bit gradient suite; nonzero exit on any failure.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the toy denoiser; CSV log goes to stdout.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoise a PGM image with a trained model.
    Denoise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Neighbor count at inference; defaults to the checkpoint's
        /// schedule maximum.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = "gather")]
        backend: String,
    },
    /// Print the analytic cost-model table for all backends.
    Flops {
        #[arg(long)]
        hw: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        /// Streaming block size used in the memory model.
        #[arg(long, default_value_t = 64)]
        block: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    init_threads();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// `KGT_THREADS` caps worker parallelism (default: machine cores).
fn init_threads() {
    if let Ok(v) = std::env::var("KGT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                return;
            }
        }
        log::warn!("ignoring invalid KGT_THREADS='{v}'");
    }
}

/// Usage errors (bad option values) exit 1; data errors exit 2.
fn exit_code(e: &KgtError) -> u8 {
    match e {
        KgtError::Config(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> kgt_core::Result<()> {
    match cli.command {
        Command::BuildGraph {
            input,
            window,
            k,
            out,
        } => {
            let img = read_pgm(&input)?;
            let wb = partition(&img.to_tensor(), window)?;
            let hw = wb.layout.nodes_per_window();
            let k_eff = k.max(1).min(hw - 1);
            if k_eff != k {
                log::warn!("clamping k from {k} to {k_eff} for {window}x{window} windows");
            }
            let graph = KeyGraph::build(&wb.nodes, k_eff)?;
            let mut file = std::fs::File::create(&out)?;
            graph.write_csv(&mut file)?;
            eprintln!(
                "wrote {} windows x {} nodes x k={} to {}",
                graph.windows(),
                graph.win_nodes(),
                graph.k(),
                out.display()
            );
            Ok(())
        }
        Command::AttnBench {
            grid,
            repeats,
            out,
            budget_mb,
        } => {
            let cells = match grid.as_str() {
                "default" => bench::default_grid(),
                "small" => bench::small_grid(),
                other => {
                    return Err(KgtError::Config(format!(
                        "unknown grid '{other}' (expected default|small)"
                    )))
                }
            };
            let spec = RunSpec {
                cells,
                repeats,
                budget_bytes: budget_mb.saturating_mul(1024 * 1024),
            };
            let report = bench::run_scaling(&spec)?;
            let skipped = report.rows.iter().filter(|r| r.skipped).count();
            let mut file = std::fs::File::create(&out)?;
            report.write_csv(&mut file)?;
            eprintln!(
                "wrote {} rows ({} skipped) to {}",
                report.rows.len(),
                skipped,
                out.display()
            );
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let results = checks::gradient_suite(seed)?;
            let mut failures = 0;
            for r in &results {
                let status = if r.pass() { "PASS" } else { "FAIL" };
                println!("{status} {:<28} max_rel_err {:.3e} (tol {:.0e})", r.name, r.max_rel_err, r.tol);
                if !r.pass() {
                    failures += 1;
                }
            }
            if failures > 0 {
                return Err(KgtError::Integrity(format!(
                    "{failures}/{} gradient checks failed",
                    results.len()
                )));
            }
            eprintln!("all {} gradient checks passed", results.len());
            Ok(())
        }
        Command::Train { config, out } => {
            let text = std::fs::read_to_string(&config)?;
            let cfg = Config::parse(&text)?;
            let net_cfg = cfg.net_config()?;
            let train_cfg = cfg.train_config()?;
            let mut net = Net::<f32>::init(&net_cfg)?;
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            let report = run_training(&mut net, &train_cfg, &mut lock)?;
            lock.flush()?;
            net.save(&out)?;
            eprintln!(
                "trained {} steps; final loss {:.5}; noisy baseline {:.2} dB; saved {}",
                train_cfg.steps,
                report.final_loss,
                report.noisy_psnr,
                out.display()
            );
            if let Some(&(step, p)) = report.evals.last() {
                eprintln!("held-out PSNR at step {step}: {p:.2} dB");
            }
            Ok(())
        }
        Command::Denoise {
            model,
            input,
            out,
            k,
            backend,
        } => {
            let backend = Backend::parse(&backend)?;
            let net = Net::load(&model)?;
            let k = k.unwrap_or_else(|| net.cfg.default_k());
            let img = read_pgm(&input)?;
            let restored = net.forward(&img.to_tensor(), k, backend)?;
            write_pgm(&GrayImage::from_tensor(&restored)?, &out)?;
            eprintln!("denoised {} -> {}", input.display(), out.display());
            Ok(())
        }
        Command::Flops {
            hw,
            k,
            d,
            heads,
            block,
        } => {
            if hw < 2 || k < 1 || k > hw - 1 {
                return Err(KgtError::Config(format!(
                    "need hw >= 2 and 1 <= k <= hw-1, got hw={hw} k={k}"
                )));
            }
            if d < 1 || heads < 1 || block < 1 {
                return Err(KgtError::Config(
                    "d, heads, and block must all be >= 1".into(),
                ));
            }
            println!("hw={hw} k={k} d={d} heads={heads} (f32, streaming block {block})");
            println!("{:<12} {:>16} {:>18}", "backend", "flops", "peak_aux_bytes");
            let kinds = [
                bench::CostKind::Dense,
                bench::CostKind::Sparse(Backend::Gather),
                bench::CostKind::Sparse(Backend::Mask),
                bench::CostKind::Sparse(Backend::Streaming { block }),
            ];
            for kind in kinds {
                println!(
                    "{:<12} {:>16} {:>18}",
                    kind.label(),
                    bench::attention_flops(hw, k, d, heads, kind),
                    bench::attention_peak_bytes(hw, k, d, heads, kind, 4)
                );
            }
            Ok(())
        }
    }
}
