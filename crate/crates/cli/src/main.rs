use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use poseidon::bench::{self, Bench};
use poseidon::coordinator::{InformationBook, TrainConfig};
use poseidon::engine::data::{make_synthetic_dataset, DataSpec};
use poseidon::engine::oracle::iterations_for_epochs;
use poseidon::planner::{plan, PlanFormat};
use poseidon::runtime::{launch_node, train_local, write_metrics_csv, RunOptions};
use poseidon::syncer::SyncMode;
use poseidon::{ClusterConfig, ModelSpec};

#[derive(Parser)]
#[command(
    name = "poseidon",
    version,
    about = "Hybrid parameter synchronization for data-parallel training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the per-layer communication plan.
    Plan {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        #[arg(long, default_value = "table")]
        format: PlanFormat,
    },
    /// Train on loopback TCP with every node in this process.
    Train {
        #[command(flatten)]
        job: Job,
        /// Metrics CSV for worker 0.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one node of a multi-process job.
    Launch {
        #[arg(long, value_enum, env = "POSEIDON_ROLE")]
        role: Role,
        #[arg(long, env = "POSEIDON_RANK")]
        rank: usize,
        #[arg(long, env = "POSEIDON_BASE_PORT")]
        base_port: Option<u16>,
        #[command(flatten)]
        job: Job,
        /// Metrics CSV, written when this node hosts a worker.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulated experiments.
    Bench {
        #[command(subcommand)]
        kind: BenchKind,
    },
}

#[derive(Args)]
struct Job {
    #[arg(long, env = "POSEIDON_MODEL")]
    model: PathBuf,
    #[arg(long, env = "POSEIDON_CLUSTER")]
    cluster: PathBuf,
    #[arg(long, default_value = "hybrid", env = "POSEIDON_PLAN_MODE")]
    plan_mode: SyncMode,
    #[arg(long, default_value_t = 1, env = "POSEIDON_EPOCHS")]
    epochs: usize,
    #[arg(long, default_value_t = 0.1, env = "POSEIDON_LR")]
    lr: f32,
    #[arg(long, default_value_t = 0, env = "POSEIDON_SEED")]
    seed: u64,
    /// `synthetic:<n>:<dim>:<classes>`
    #[arg(long, default_value = "synthetic:1024:64:4", env = "POSEIDON_DATASET")]
    dataset: DataSpec,
}

#[derive(Subcommand)]
enum BenchKind {
    /// Throughput and speedup over cluster sizes and bandwidths.
    Scaling {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-node traffic for each mode.
    Loadbal {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Coordinator,
    Worker,
    Server,
}

impl Job {
    fn book(&self, base_port: Option<u16>) -> Result<InformationBook> {
        let model = ModelSpec::load(&self.model).with_context(|| format!("loading {}", self.model.display()))?;
        let cluster =
            ClusterConfig::load(&self.cluster).with_context(|| format!("loading {}", self.cluster.display()))?;
        self.plan_mode.check_model(&model).map_err(anyhow::Error::msg)?;
        let ds = self.dataset;
        let data = make_synthetic_dataset(self.seed, ds.n, ds.dim, ds.classes);
        let iterations = iterations_for_epochs(&data, cluster.num_workers(), model.batch_size, self.epochs)?;
        if iterations == 0 {
            bail!(
                "dataset {}:{}:{} has no full batch per worker",
                ds.n,
                ds.dim,
                ds.classes
            );
        }
        let train = TrainConfig::new(self.plan_mode, self.lr, self.seed, iterations, ds);
        Ok(InformationBook::build(model, cluster, train, base_port)?)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Plan { model, cluster, format } => {
            let model = ModelSpec::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let cluster = ClusterConfig::load(&cluster).with_context(|| format!("loading {}", cluster.display()))?;
            print!("{}", plan(&model, &cluster).render(format));
        }
        Command::Train { job, out } => {
            let book = job.book(None)?;
            log::info!(
                "training {} for {} iterations on {} workers and {} servers",
                book.train.mode,
                book.train.iterations,
                book.num_workers(),
                book.num_servers()
            );
            let run = train_local(&book, &RunOptions::default())?;
            let w0 = run.workers()[0];
            if let Some(path) = out {
                write_metrics_csv(&path, &w0.metrics).with_context(|| format!("writing {}", path.display()))?;
            }
            let last = w0.metrics.last().map_or(f32::NAN, |m| m.loss);
            let bytes: u64 = run.traffic.bytes_out.iter().sum();
            println!(
                "iterations {}  final loss {last:.6}  wall {:.3}s  bytes sent {bytes}",
                book.train.iterations,
                run.wall.as_secs_f64()
            );
        }
        Command::Launch {
            role,
            rank,
            base_port,
            job,
            out,
        } => {
            let book = job.book(base_port)?;
            let layout = &book.layout;
            let node = match role {
                Role::Coordinator if rank == 0 => 0,
                Role::Coordinator => bail!("the coordinator has rank 0"),
                Role::Worker => *layout
                    .worker_nodes
                    .get(rank)
                    .with_context(|| format!("worker rank {rank} out of range ({} workers)", book.num_workers()))?,
                Role::Server => *layout
                    .server_nodes
                    .get(rank)
                    .with_context(|| format!("server rank {rank} out of range ({} servers)", book.num_servers()))?,
            };
            log::info!("node {node} listening on {}", book.endpoint(node));
            let outcome = launch_node(book, node, &RunOptions::default())?;
            if let (Some(w), Some(path)) = (&outcome.worker, out) {
                write_metrics_csv(&path, &w.metrics).with_context(|| format!("writing {}", path.display()))?;
            }
            println!(
                "node {} done  bytes in {}  bytes out {}",
                outcome.node, outcome.traffic.bytes_in[node], outcome.traffic.bytes_out[node]
            );
        }
        Command::Bench { kind } => match kind {
            BenchKind::Scaling { scenario, out } => {
                let rows = bench::run_scaling(&Bench::load(&scenario)?);
                bench::write_csv(&out, &rows)?;
                println!("{} rows written to {}", rows.len(), out.display());
            }
            BenchKind::Loadbal { scenario, out } => {
                let rows = bench::load_rows(&bench::run_load_balance(&Bench::load(&scenario)?));
                bench::write_csv(&out, &rows)?;
                println!("{} rows written to {}", rows.len(), out.display());
            }
        },
    }
    Ok(())
}
