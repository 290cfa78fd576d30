//! `sympgnn` command-line tool.
//!
//! Exit codes: 0 success, 1 property failure, 2 invalid flags or config,
//! 3 I/O or missing input, 4 training failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;
use sympgnn::data::{gen_sbm, gen_tree, load_dataset, DataError, GraphDataset, SbmConfig, TreeConfig};
use sympgnn::gnn::{train, GnnError};
use sympgnn::io::write_atomic;
use sympgnn::report::{load_run, merge_runs, RunSummary};
use sympgnn::selfcheck::{parse_sizes, run_manifold_suite, DEFAULT_SEEDS, DEFAULT_SIZES};

use config::{apply_override, parse_object, preset, preset_names, DatasetSpec, RunConfig};

#[derive(Parser)]
#[command(name = "sympgnn", version, about = "Hamiltonian graph networks with a learnable symplectic structure")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Sbm,
    Tree,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 50)]
        n_per_block: usize,
        #[arg(long, default_value_t = 0.2)]
        p_in: f64,
        #[arg(long, default_value_t = 0.02)]
        p_out: f64,
        #[arg(long, default_value_t = 5)]
        depth: usize,
        #[arg(long, default_value_t = 2)]
        branching: usize,
        #[arg(long, default_value_t = 16)]
        feat_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write reports and checkpoints.
    Train {
        /// Config file or preset name.
        #[arg(long)]
        config: String,
        /// `key=value`, repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the symplectic property suite.
    CheckManifold {
        /// `"n,k;n,k;..."`.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: u64,
    },
    /// Merge run directories into one comparison CSV.
    EnergyReport {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure { code, msg: msg.into() }
}

fn data_failure(e: DataError) -> Failure {
    match e {
        DataError::Io(_) | DataError::Parse { .. } | DataError::Validation(_) => fail(3, e.to_string()),
        DataError::DegenerateGraph(_) | DataError::InvalidArgument(_) => fail(2, e.to_string()),
    }
}

fn summary_line(ds: &GraphDataset) -> String {
    format!("nodes {}, edges {}, classes {}", ds.num_nodes(), ds.num_edges(), ds.num_classes())
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    kind: Kind,
    blocks: usize,
    n_per_block: usize,
    p_in: f64,
    p_out: f64,
    depth: usize,
    branching: usize,
    feat_dim: usize,
    seed: u64,
    out: &Path,
) -> Result<(), Failure> {
    let ds = match kind {
        Kind::Sbm => gen_sbm(&SbmConfig {
            n_per_block,
            blocks,
            p_in,
            p_out,
            feat_dim,
            seed,
        }),
        Kind::Tree => gen_tree(&TreeConfig {
            depth,
            branching,
            feat_dim,
            seed,
        }),
    }
    .map_err(data_failure)?;
    ds.save(out).map_err(|e| fail(3, e.to_string()))?;
    println!("{}", summary_line(&ds));
    Ok(())
}

fn load_config(source: &str, overrides: &[String]) -> Result<RunConfig, Failure> {
    let path = Path::new(source);
    let text = if path.is_file() {
        std::fs::read_to_string(path).map_err(|e| fail(3, format!("{}: {e}", path.display())))?
    } else if let Some(text) = preset(source) {
        text.to_string()
    } else {
        return Err(fail(
            2,
            format!("'{source}' is neither a config file nor a preset ({})", preset_names().join(", ")),
        ));
    };
    let mut map = parse_object(&text).map_err(|e| fail(2, e))?;
    for o in overrides {
        apply_override(&mut map, o).map_err(|e| fail(2, e))?;
    }
    RunConfig::from_map(&map).map_err(|e| fail(2, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    write_atomic(path, bytes).map_err(|e| fail(3, format!("{}: {e}", path.display())))
}

fn run_train(source: &str, overrides: &[String]) -> Result<(), Failure> {
    let cfg = load_config(source, overrides)?;
    let ds = match &cfg.dataset {
        DatasetSpec::Dir(dir) => load_dataset(dir),
        DatasetSpec::Sbm(s) => gen_sbm(s),
        DatasetSpec::Tree(t) => gen_tree(t),
    }
    .map_err(data_failure)?;
    let report = train(&ds, &cfg.train).map_err(|e| match e {
        GnnError::InvalidConfig(_) => fail(2, e.to_string()),
        GnnError::Io(_) => fail(3, e.to_string()),
        _ => fail(4, format!("training failed: {e}")),
    })?;
    let out = &cfg.out;
    let ckpt = out.join("checkpoint");
    std::fs::create_dir_all(&ckpt).map_err(|e| fail(3, format!("{}: {e}", ckpt.display())))?;
    write(&out.join("report.csv"), report.to_csv().as_bytes())?;
    write(&out.join("energy.csv"), report.energy.to_csv().as_bytes())?;
    report.best_model.save(&ckpt).map_err(|e| fail(3, e.to_string()))?;
    let summary = RunSummary {
        test_acc: report.test_acc,
        best_epoch: report.best_epoch,
        variant: cfg.train.variant.as_str().into(),
        seed: cfg.train.seed,
        config: Value::Object(cfg.to_map()),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| fail(3, e.to_string()))?;
    write(&out.join("summary.json"), json.as_bytes())?;
    println!("{} on {}: {} epochs", cfg.train.variant, ds.name(), report.epochs.len());
    println!("test accuracy {:.4} (best epoch {})", report.test_acc, report.best_epoch);
    Ok(())
}

fn check_manifold(sizes: Option<&str>, seeds: u64) -> Result<(), Failure> {
    let sizes = match sizes {
        Some(s) => parse_sizes(s).map_err(|e| fail(2, format!("invalid sizes: {e}")))?,
        None => DEFAULT_SIZES.to_vec(),
    };
    if seeds == 0 {
        return Err(fail(2, "--seeds must be at least 1"));
    }
    let results = run_manifold_suite(&sizes, seeds);
    println!("{:<32} {:>3} {:>3} {:>6} {:>10} {:>8}  status", "property", "n", "k", "seeds", "worst", "tol");
    for r in &results {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!(
            "{:<32} {:>3} {:>3} {:>6} {:>10.2e} {:>8.0e}  {status}",
            r.property, r.n, r.k, r.seeds, r.worst, r.tol
        );
    }
    let failures: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| {
            format!(
                "{} failed at n={} k={} seed={}",
                r.property,
                r.n,
                r.k,
                r.failed_seed.unwrap_or_default()
            )
        })
        .collect();
    if failures.is_empty() {
        println!("all {} properties passed", results.len());
        Ok(())
    } else {
        Err(fail(1, failures.join("\n")))
    }
}

fn energy_report(runs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let loaded = runs
        .iter()
        .map(|d| load_run(d).map_err(|e| fail(3, e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let csv = merge_runs(&loaded);
    write(out, csv.as_bytes())?;
    println!("merged {} runs into {}", loaded.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            kind,
            blocks,
            n_per_block,
            p_in,
            p_out,
            depth,
            branching,
            feat_dim,
            seed,
            out,
        } => gen_data(kind, blocks, n_per_block, p_in, p_out, depth, branching, feat_dim, seed, &out),
        Command::Train { config, overrides } => run_train(&config, &overrides),
        Command::CheckManifold { sizes, seeds } => check_manifold(sizes.as_deref(), seeds),
        Command::EnergyReport { runs, out } => energy_report(&runs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
