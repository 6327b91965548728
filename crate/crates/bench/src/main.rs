use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use threesided::dist::DistributionSpec;
use threesided_bench::calibration::Calibration;
use threesided_bench::experiments::{self, EpochConfig};
use threesided_bench::structures::{BuildOptions, StructureKind};
use threesided_bench::table::Table;
use threesided_bench::workload::{run_workload, Mix, WorkloadConfig};

#[derive(Parser)]
#[command(
    name = "bench",
    about = "Workloads and experiments for 3-sided range reporting structures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a seeded insert/delete/query workload on one structure.
    Run(RunArgs),
    /// Run one of the statistical experiments.
    Exp {
        #[command(subcommand)]
        exp: Exp,
    },
    /// Rerun the pilot experiments and print a calibration file.
    Calibrate {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn parse_dist(s: &str) -> Result<DistributionSpec, String> {
    s.parse().map_err(|e: threesided::Error| e.to_string())
}

fn parse_mix(s: &str) -> Result<Mix, String> {
    s.parse().map_err(|e: threesided::Error| e.to_string())
}

#[derive(Args)]
struct Output {
    /// CSV destination; `-` for stdout.
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

#[derive(Args)]
struct ExtArgs {
    #[arg(long, default_value_t = 8)]
    block_size: usize,
    /// Defaults to 4 × block size.
    #[arg(long)]
    cache_blocks: Option<usize>,
}

impl ExtArgs {
    fn options(&self) -> BuildOptions {
        BuildOptions {
            block_size: self.block_size,
            cache_blocks: self.cache_blocks.unwrap_or(4 * self.block_size),
            ..BuildOptions::default()
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    structure: StructureKind,
    #[arg(long, value_parser = parse_dist, default_value = "uniform:0,1")]
    dist_x: DistributionSpec,
    #[arg(long, value_parser = parse_dist, default_value = "uniform:0,1")]
    dist_y: DistributionSpec,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    ops: usize,
    /// Percentages insert:delete:query.
    #[arg(long, value_parser = parse_mix, default_value = "40:30:30")]
    mix: Mix,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    ext: ExtArgs,
    /// Use the layered tree for mpst_static.
    #[arg(long)]
    layered: bool,
    #[arg(long, default_value_t = 10)]
    checkpoints: usize,
    /// Audit every this many ops; 0 disables.
    #[arg(long, default_value_t = 0)]
    audit_every: usize,
    #[arg(long, default_value_t = 4096)]
    oracle_cap: usize,
    #[command(flatten)]
    output: Output,
}

#[derive(Subcommand)]
enum Exp {
    /// Probability that a fresh draw undercuts the minimum of n draws.
    MinProb {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1_000_000)]
        trials: u64,
        #[arg(long, value_parser = parse_dist, default_value = "uniform:0,1")]
        dist: DistributionSpec,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Violations per epoch of ⌈log₂ n⌉ inserts on the bucketed PST.
    ViolationsEpoch {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, value_parser = parse_dist, default_value = "uniform:0,1")]
        dist_x: DistributionSpec,
        #[arg(long, value_parser = parse_dist, default_value = "uniform:0,1")]
        dist_y: DistributionSpec,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Insert strictly decreasing y instead of drawing it.
        #[arg(long)]
        adversarial_y: bool,
        #[command(flatten)]
        output: Output,
    },
    /// Violations over one epoch of n updates on Solution 3.
    ViolationsLinear {
        #[arg(long)]
        n: usize,
        #[arg(long, value_parser = parse_dist, default_value = "uniform:0,1")]
        dist_x: DistributionSpec,
        #[arg(long, value_parser = parse_dist)]
        dist_y: DistributionSpec,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        checkpoints: usize,
        #[command(flatten)]
        output: Output,
    },
    /// Mean per-query counters by size and output stratum.
    Scaling {
        #[arg(long, value_enum)]
        structure: StructureKind,
        /// Comma-separated sizes.
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192,16384,32768,65536")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        ext: ExtArgs,
        /// Cross-check every answer by brute force.
        #[arg(long)]
        check: bool,
        #[command(flatten)]
        output: Output,
    },
    /// Scanned-entry work of random static MPSTs.
    MpstWork {
        #[arg(long, default_value_t = 200)]
        builds: usize,
        #[arg(long, default_value_t = 4096)]
        max_n: usize,
        #[arg(long, default_value_t = 50)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Cold-cache reads of leaf queries.
    LeafIo {
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        blocks: Vec<usize>,
        #[arg(long, default_value_t = 40)]
        leaves: usize,
        #[arg(long, default_value_t = 50)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
}

fn emit(table: &Table, output: &Output) -> anyhow::Result<()> {
    if output.out.as_os_str() == "-" {
        table.write_csv(io::stdout().lock())?;
    } else {
        let f = File::create(&output.out).with_context(|| format!("creating {}", output.out.display()))?;
        let mut w = BufWriter::new(f);
        table.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run(a) => {
            let cfg = WorkloadConfig {
                structure: a.structure,
                dist_x: a.dist_x,
                dist_y: a.dist_y,
                n: a.n,
                ops: a.ops,
                mix: a.mix,
                seed: a.seed,
                build: BuildOptions {
                    layered: a.layered,
                    ..a.ext.options()
                },
                checkpoints: a.checkpoints,
                oracle_cap: a.oracle_cap,
                audit_every: a.audit_every,
            };
            emit(&run_workload(&cfg)?, &a.output)
        }
        Command::Exp { exp } => match exp {
            Exp::MinProb {
                n,
                trials,
                dist,
                seed,
                output,
            } => emit(&experiments::min_prob(n, trials, &dist, seed)?, &output),
            Exp::ViolationsEpoch {
                n,
                epochs,
                dist_x,
                dist_y,
                seed,
                adversarial_y,
                output,
            } => {
                let cfg = EpochConfig {
                    n,
                    epochs,
                    dist_x,
                    dist_y,
                    seed,
                    adversarial_y,
                };
                emit(&experiments::violations_epoch(&cfg)?, &output)
            }
            Exp::ViolationsLinear {
                n,
                dist_x,
                dist_y,
                seed,
                checkpoints,
                output,
            } => emit(
                &experiments::violations_linear(n, &dist_x, &dist_y, seed, checkpoints)?,
                &output,
            ),
            Exp::Scaling {
                structure,
                sizes,
                queries,
                seed,
                ext,
                check,
                output,
            } => emit(
                &experiments::scaling(structure, &sizes, queries, seed, &ext.options(), check)?,
                &output,
            ),
            Exp::MpstWork {
                builds,
                max_n,
                queries,
                seed,
                output,
            } => emit(&experiments::mpst_work(builds, max_n, queries, seed)?, &output),
            Exp::LeafIo {
                blocks,
                leaves,
                queries,
                seed,
                output,
            } => emit(&experiments::leaf_io(&blocks, leaves, queries, seed)?, &output),
        },
        Command::Calibrate { seed } => {
            print!("{}", Calibration::pilot(seed)?.to_toml());
            Ok(())
        }
    }
}
