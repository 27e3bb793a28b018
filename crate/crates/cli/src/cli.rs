//! Argument parsing and dispatch.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use hessquant::trace::{fmt_float, ProbeDistribution};

use crate::config::{Overrides, Run};
use crate::error::{CliError, Result};
use crate::{analyze, report, stages};

#[derive(Debug, Parser)]
#[command(name = "hessquant", version, about = "Hessian-trace guided mixed-precision quantization")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; every stochastic component derives its own stream from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for trace probes.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (the HESSQUANT_OUT environment variable takes precedence).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Bit-width menu, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub bits: Option<Vec<u32>>,
    /// Size budget in bytes of weight payload.
    #[arg(long, global = true)]
    pub target_bytes: Option<u64>,
    /// Fixed number of Hutchinson probes per trace.
    #[arg(long, global = true)]
    pub probes: Option<usize>,
    /// Probe distribution: rademacher or gaussian.
    #[arg(long, global = true)]
    pub probe_dist: Option<ProbeDistribution>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the model and check it is near a local minimum.
    Train,
    /// Estimate per-layer average Hessian traces.
    Trace,
    /// Select the minimal-Omega bit assignment under the size budget.
    Plan,
    /// Quantize the trained model with the planned assignment and evaluate it.
    Quantize,
    /// Quantization-aware fine-tuning under the planned assignment.
    Finetune,
    /// Theory checks.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Summarize the artifacts in the output directory.
    Report,
    /// Run every stage in order.
    Pipeline,
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Top eigenvalue against average trace on two quadratics with equal top eigenvalues.
    F1f2,
    /// Search-space sizes for a number of layers and a menu size.
    Cardinality {
        #[arg(long, default_value_t = 50)]
        layers: u32,
        #[arg(long, default_value_t = 4)]
        menu: u32,
    },
    /// Equal-norm perturbations of two layers of the trained model.
    Lemma1 {
        /// Layer indices, e.g. `0,1`.
        #[arg(long, value_delimiter = ',', num_args = 1, default_value = "0,1")]
        pair: Vec<usize>,
        /// Perturbation norm; defaults to 1% of the smaller weight norm.
        #[arg(long)]
        norm: Option<f64>,
        /// Also compare quantization-shaped perturbations at this width.
        #[arg(long)]
        quant_bits: Option<u32>,
    },
    /// Loss on a grid along the top two Hessian eigenvectors of a layer.
    Landscape {
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0.5)]
        radius: f64,
        #[arg(long, default_value_t = 21)]
        points: usize,
    },
    /// Trace ordering against top-eigenvalue ordering.
    Ordering,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            threads: self.threads,
            out: self.out.clone(),
            bits: self.bits.clone(),
            target_bytes: self.target_bytes,
            probes: self.probes,
            probe_dist: self.probe_dist,
        }
    }

    fn run(&self, command: &str) -> Result<Run> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("`{command}` needs --config")))?;
        Run::load(path, &self.overrides())
    }
}

/// Runs the parsed command and returns the text to print.
pub fn execute(cli: &Cli) -> Result<String> {
    let mut t = String::new();
    match &cli.command {
        Command::Train => {
            let run = cli.run("train")?;
            let r = stages::train(&run)?;
            writeln!(
                t,
                "trained: loss {}, gradient norm {}, converged {}",
                fmt_float(r.loss),
                fmt_float(r.local_min.grad_norm),
                r.converged
            )
            .unwrap();
            if !r.converged {
                writeln!(t, "warning: gradient norm above tolerance {}", fmt_float(r.grad_tol)).unwrap();
            }
        }
        Command::Trace => {
            let run = cli.run("trace")?;
            for row in stages::trace(&run)? {
                writeln!(
                    t,
                    "{} {}: avg trace {} ± {} ({} probes)",
                    row.kind.as_str(),
                    row.layer_name,
                    fmt_float(row.avg_trace),
                    fmt_float(row.avg_stderr()),
                    row.probes_used
                )
                .unwrap();
            }
        }
        Command::Plan => {
            let run = cli.run("plan")?;
            let p = stages::plan(&run)?;
            writeln!(
                t,
                "chosen bits {:?}: {} bytes (target {}), compression {:.2}x, omega {}",
                p.bits,
                p.size_bytes,
                p.target_bytes,
                p.compression_ratio,
                fmt_float(p.omega)
            )
            .unwrap();
        }
        Command::Quantize => {
            let run = cli.run("quantize")?;
            let q = stages::quantize(&run)?;
            writeln!(t, "quantized {:?}: loss {}", q.bits, fmt_float(q.loss)).unwrap();
        }
        Command::Finetune => {
            let run = cli.run("finetune")?;
            let f = stages::finetune(&run)?;
            writeln!(t, "fine-tuned {:?} for {} epochs: loss {}", f.bits, f.epochs, fmt_float(f.loss)).unwrap();
        }
        Command::Report => t = report::report(&cli.run("report")?)?,
        Command::Pipeline => {
            let run = cli.run("pipeline")?;
            let s = stages::pipeline(&run)?;
            writeln!(
                t,
                "baseline loss {}, quantized loss {}, bits {:?}, {} bytes, compression {:.2}x",
                fmt_float(s.baseline_loss),
                fmt_float(s.quantized_loss),
                s.bits,
                s.size_bytes,
                s.compression_ratio
            )
            .unwrap();
            writeln!(t, "artifacts in {}", run.out_dir.display()).unwrap();
        }
        Command::Analyze { what } => t = analysis(cli, what)?,
    }
    Ok(t)
}

fn analysis(cli: &Cli, what: &Analysis) -> Result<String> {
    Ok(match what {
        Analysis::F1f2 => analyze::f1f2(cli.seed.unwrap_or(0))?.1,
        Analysis::Cardinality { layers, menu } => analyze::cardinality(*layers, *menu)?,
        Analysis::Lemma1 { pair, norm, quant_bits } => {
            let &[i, j] = pair.as_slice() else {
                return Err(CliError::Config(format!("--pair needs two layer indices, got {pair:?}")));
            };
            let run = cli.run("analyze lemma1")?;
            let norm = match norm {
                Some(n) => *n,
                None => {
                    let model = hessquant::model::load_checkpoint(&run.artifact(stages::CHECKPOINT))
                        .map_err(|_| CliError::MissingArtifact {
                            stage: "analyze",
                            producer: "train",
                            path: run.artifact(stages::CHECKPOINT),
                        })?;
                    let wnorm = |k: usize| -> Result<f64> {
                        Ok(model.layer(k)?.weight.data().iter().map(|w| w * w).sum::<f64>().sqrt())
                    };
                    1e-2 * wnorm(i)?.min(wnorm(j)?)
                }
            };
            analyze::lemma1(&run, (i, j), norm, *quant_bits)?.1
        }
        Analysis::Landscape { layer, radius, points } => {
            analyze::landscape(&cli.run("analyze landscape")?, *layer, *radius, *points)?
        }
        Analysis::Ordering => analyze::ordering(&cli.run("analyze ordering")?)?.1,
    })
}
