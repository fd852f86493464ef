//! Command-line driver for the quadjet analysis pipeline.
//!
//! Each subcommand runs one stage against a workspace directory of plain
//! CSV/JSON artifacts; stages are rerunnable and deterministic. Exit codes:
//! 0 success, 2 usage error, 3 data error, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use quadjet::estimators::Method;
use quadjet::pipeline::{
    self, read_config, PipelineConfig, Workspace,
};
use quadjet::Error;

#[derive(Parser)]
#[command(name = "quadjet", version, about = "Data-driven background estimation pipeline")]
struct Cli {
    /// Workspace directory holding all pipeline artifacts.
    #[arg(long, global = true, default_value = "work")]
    dir: PathBuf,

    /// JSON pipeline configuration; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the base random seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the 3b, 4b, and held-out truth samples.
    Gen {
        /// Number of 3b events.
        #[arg(long)]
        n_3b: Option<usize>,
        /// Number of 4b events.
        #[arg(long)]
        n_4b: Option<usize>,
        /// Fraction of the 4b stream drawn from the signal process.
        #[arg(long)]
        signal_fraction: Option<f64>,
        /// Make region and channel exactly independent.
        #[arg(long)]
        factorized: Option<bool>,
    },
    /// Split both samples into control and signal regions.
    Split,
    /// Compute the coupling-fit and neighbor-extension distance matrices.
    Dist {
        /// Jet-metric radius for the coupling fit.
        #[arg(long)]
        r_fit: Option<f64>,
        /// Jet-metric radius for the neighbor extension.
        #[arg(long)]
        r_knn: Option<f64>,
    },
    /// Solve the optimal coupling between the control and signal 3b samples.
    Couple,
    /// Train the four-vs-three channel classifier on the control region.
    TrainFvt,
    /// Train the signal-vs-background classifier and persist the template.
    TrainSvb,
    /// Run one background estimator and write its per-event weights.
    Estimate {
        /// Estimator: fvt, ot-knn, ot-fvt, or raw-3b.
        #[arg(long)]
        method: Method,
        /// Neighbor count for ot-knn.
        #[arg(long)]
        k: Option<usize>,
        /// Also emit a weight-vs-weight scatter against this estimate.
        #[arg(long)]
        scatter_vs: Option<Method>,
    },
    /// Closure-test all available estimates against the held-out truth.
    Validate,
    /// Fit the signal strength on the signal-region 4b data.
    Test {
        /// Estimate used as the background model.
        #[arg(long)]
        method: Method,
        /// Expected signal events at unit signal strength.
        #[arg(long)]
        signal_yield: Option<f64>,
        /// Number of uniform classifier-score bins.
        #[arg(long)]
        score_bins: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<Error>() {
                Some(Error::Numerical(_)) => ExitCode::from(4),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => read_config(path)
            .with_context(|| format!("loading configuration {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.gen.seed = seed;
    }
    let ws = Workspace::new(&cli.dir);

    match cli.command {
        Cmd::Gen {
            n_3b,
            n_4b,
            signal_fraction,
            factorized,
        } => {
            if let Some(n) = n_3b {
                cfg.gen.n_3b = n;
            }
            if let Some(n) = n_4b {
                cfg.gen.n_4b = n;
            }
            if let Some(eps) = signal_fraction {
                cfg.gen.signal_fraction = eps;
            }
            if let Some(flag) = factorized {
                cfg.gen.factorized_mode = flag;
            }
            let report = pipeline::stage_gen(&ws, &cfg)?;
            println!(
                "generated {} 3b, {} 4b, {} truth events into {}",
                report.n_3b,
                report.n_4b,
                report.n_truth,
                ws.dir().display()
            );
        }
        Cmd::Split => {
            let report = pipeline::stage_split(&ws, &cfg)?;
            let c = report.counts;
            println!(
                "3b: control {}, signal {}, outside {}",
                c.n_c, c.n_s, report.outside_3b
            );
            println!(
                "4b: control {}, signal {}, outside {}",
                c.m_c, c.m_s, report.outside_4b
            );
        }
        Cmd::Dist { r_fit, r_knn } => {
            if let Some(r) = r_fit {
                cfg.metric_fit.r = r;
            }
            if let Some(r) = r_knn {
                cfg.metric_knn.r = r;
            }
            pipeline::stage_dist(&ws, &cfg)?;
            println!("wrote {} and {}", pipeline::DIST_FIT, pipeline::DIST_KNN);
        }
        Cmd::Couple => {
            pipeline::stage_couple(&ws, &cfg)?;
            println!("wrote {}", pipeline::COUPLING);
        }
        Cmd::TrainFvt => {
            pipeline::stage_train_fvt(&ws, &cfg)?;
            println!("wrote {}", pipeline::FVT_MODEL);
        }
        Cmd::TrainSvb => {
            pipeline::stage_train_svb(&ws, &cfg)?;
            println!("wrote {} and {}", pipeline::SVB_MODEL, pipeline::SIGNAL_TEMPLATE);
        }
        Cmd::Estimate {
            method,
            k,
            scatter_vs,
        } => {
            if let Some(k) = k {
                cfg.k = k;
            }
            let estimate = pipeline::stage_estimate(&ws, &cfg, method)?;
            println!(
                "{}: {} weights, total mass {:.3}",
                method,
                estimate.len(),
                estimate.total_mass()
            );
            if let Some(other) = scatter_vs {
                pipeline::stage_scatter(&ws, &cfg, method, other)?;
                println!("wrote {}", pipeline::scatter_file(method, other));
            }
        }
        Cmd::Validate => {
            let report = pipeline::stage_validate(&ws, &cfg)?;
            for m in &report.methods {
                println!(
                    "{:<8} auc {:.4} [{:.4}, {:.4}]",
                    m.method, m.auc, m.auc_lo, m.auc_hi
                );
            }
        }
        Cmd::Test {
            method,
            signal_yield,
            score_bins,
        } => {
            if let Some(s) = signal_yield {
                cfg.signal_yield = s;
            }
            if let Some(b) = score_bins {
                cfg.score_bins = b;
            }
            let report = pipeline::stage_test(&ws, &cfg, method)?;
            println!(
                "{}: mu_hat {:.4}, q0 {:.4}, z {:.4}",
                method, report.fit.mu_hat, report.fit.q0, report.fit.z
            );
        }
    }
    Ok(())
}
