//! Command line driver. Every subcommand reads one experiment config
//! (JSON, strict keys) and derives all randomness from its master seed, so
//! runs are reproducible from the config file alone.
//!
//! Single-dataset commands (`sample`, `events`, `train`, `bounds`) operate
//! on one grid cell of the config, selected with `--cell` (default: the
//! first cell).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use benign_core::events::{
    check_events, derive_tilde_params, homogeneous_params, measure_perturbation,
};
use benign_core::experiments::{
    build_cells, build_report, estimate_test_error, read_results_csv, run_event_mc, run_sweep,
    write_results_csv, Cell, ExperimentConfig,
};
use benign_core::maxmargin::{
    hard_margin_homogeneous, hard_margin_oracle, margin_stats, SolverOptions,
};
use benign_core::rng::{mix_seed, STREAM_DATASET, STREAM_TEST};
use benign_core::sampler::{extend_dataset, sample_dataset, ModelSpec};
use benign_core::theory::{
    error_bound_rhs, isotropic_exponents, m_ge_one_check, noiseless_intermediate_conditions,
    noiseless_large_signal_conditions, noisy_conditions, BoundRegime,
};

#[derive(Parser)]
#[command(
    name = "benign",
    version,
    about = "Max-margin classification experiments on heavy-tailed mixture data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON; unknown keys rejected).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for output files; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's worker count.
    #[arg(long)]
    workers: Option<usize>,
    /// Override the config's trials per cell.
    #[arg(long)]
    trials: Option<usize>,
    /// Grid cell id to operate on.
    #[arg(long, default_value_t = 0)]
    cell: usize,
    /// Trial index within the cell (fixes the dataset seed).
    #[arg(long, default_value_t = 0)]
    trial: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw the dataset of one (cell, trial) unit and emit it as JSON.
    Sample(Common),
    /// Event and perturbation report for one dataset; with --trials > 1,
    /// Monte Carlo event frequencies over fresh datasets.
    Events(Common),
    /// Solve the max-margin problem on one dataset and report margins and
    /// test error.
    Train {
        #[command(flatten)]
        common: Common,
        /// Solve the bias-free classifier on raw features instead.
        #[arg(long)]
        homogeneous: bool,
    },
    /// Condition reports, error-bound values, and exponent arithmetic for
    /// one cell.
    Bounds(Common),
    /// Run the whole grid and write sorted results CSV.
    Sweep(Common),
    /// Aggregate a results CSV into per-cell summaries.
    Report {
        /// Results CSV produced by `sweep`.
        results: PathBuf,
        /// Optional bias-free baseline CSV for comparison columns.
        #[arg(long)]
        homogeneous: Option<PathBuf>,
        /// Directory for report.md and cells.csv; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&common.config)
        .with_context(|| format!("reading config {}", common.config.display()))?;
    let mut config: ExperimentConfig =
        serde_json::from_str(&text).context("parsing experiment config")?;
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    if let Some(workers) = common.workers {
        config.workers = workers;
    }
    if let Some(trials) = common.trials {
        config.trials = trials;
    }
    config.validate()?;
    Ok(config)
}

fn select_cell(config: &ExperimentConfig, id: usize) -> Result<(Cell, ModelSpec)> {
    let cells = build_cells(config)?;
    if cells.is_empty() {
        bail!("the config's grid is empty");
    }
    cells
        .into_iter()
        .find(|(c, _)| c.cell_id == id)
        .ok_or_else(|| anyhow::anyhow!("cell {id} is outside the grid"))
}

fn emit(out: &Option<PathBuf>, name: &str, content: &str) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(name);
            fs::write(&path, content)?;
            eprintln!("wrote {}", path.display());
        }
        None => println!("{content}"),
    }
    Ok(())
}

fn pretty(value: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn dataset_seed(config: &ExperimentConfig, cell: &Cell, trial: usize) -> u64 {
    mix_seed(
        config.master_seed,
        &[cell.cell_id as u64, trial as u64, STREAM_DATASET],
    )
}

fn cmd_sample(common: Common) -> Result<()> {
    let config = load_config(&common)?;
    let (cell, spec) = select_cell(&config, common.cell)?;
    let seed = dataset_seed(&config, &cell, common.trial);
    let ds = sample_dataset(&spec, cell.n, seed);
    emit(&common.out, "dataset.json", &pretty(&ds)?)
}

fn cmd_events(common: Common) -> Result<()> {
    let config = load_config(&common)?;
    let (cell, spec) = select_cell(&config, common.cell)?;
    let delta = config.delta;
    // Only an explicit --trials flag selects the Monte Carlo table; the
    // config's own trial count belongs to the sweep grid.
    if common.trials.is_some_and(|t| t > 1) {
        let report = run_event_mc(
            &spec,
            cell.n,
            config.trials,
            config.master_seed,
            delta,
            delta,
            delta,
            config.constants.c1,
            config.constants.c2,
        )?;
        let mut table = format!(
            "event frequencies over {} trials ({} failed)\n{:<28} {:>6} {:>10} {:>10} {:>10}\n",
            report.trials, report.failures, "event", "count", "freq", "lo95", "hi95"
        );
        for row in &report.rows {
            table.push_str(&format!(
                "{:<28} {:>6} {:>10.4} {:>10.4} {:>10.4}\n",
                row.name, row.count, row.frequency, row.lo, row.hi
            ));
        }
        println!("{table}");
        return emit(&common.out, "event_mc.json", &pretty(&report)?);
    }
    let seed = dataset_seed(&config, &cell, common.trial);
    let ext = extend_dataset(sample_dataset(&spec, cell.n, seed));
    let params = homogeneous_params(&spec, cell.n, delta, config.constants.c1, config.constants.c2)?;
    let tilde = derive_tilde_params(&params, &spec, cell.n, delta, delta)?;
    let events = check_events(&ext, &params, &tilde)?;
    let perturbation = measure_perturbation(&ext)?;
    let payload = serde_json::json!({
        "seed": seed,
        "params": params,
        "tilde": tilde,
        "events": events,
        "perturbation": perturbation,
    });
    emit(&common.out, "events.json", &pretty(&payload)?)
}

fn cmd_train(common: Common, homogeneous: bool) -> Result<()> {
    let config = load_config(&common)?;
    let (cell, spec) = select_cell(&config, common.cell)?;
    let seed = dataset_seed(&config, &cell, common.trial);
    let ext = extend_dataset(sample_dataset(&spec, cell.n, seed));
    let opts = SolverOptions::default();
    let solution = if homogeneous {
        hard_margin_homogeneous(&ext.base.x, &ext.base.y_noisy, &opts)?
    } else {
        hard_margin_oracle(&ext.x_ext, &ext.base.y_noisy, &opts)?
    };
    let stats = margin_stats(&solution, &ext);
    let test_seed = mix_seed(
        config.master_seed,
        &[cell.cell_id as u64, common.trial as u64, STREAM_TEST],
    );
    let estimate = estimate_test_error(&solution, &spec, config.test_samples, test_seed);
    println!(
        "min margin {:.6}  interpolated {}  clean err {:.5} [{:.5}, {:.5}]  noisy err {:.5}",
        stats.min_margin,
        stats.interpolated,
        estimate.clean_err,
        estimate.clean_lo,
        estimate.clean_hi,
        estimate.noisy_err
    );
    let payload = serde_json::json!({
        "seed": seed,
        "homogeneous": homogeneous,
        "solution": solution,
        "margin_stats": stats,
        "test_error": estimate,
    });
    emit(&common.out, "train.json", &pretty(&payload)?)
}

fn cmd_bounds(common: Common) -> Result<()> {
    let config = load_config(&common)?;
    let (cell, spec) = select_cell(&config, common.cell)?;
    let delta = config.delta;
    let constants = &config.constants;
    let params = homogeneous_params(&spec, cell.n, delta, constants.c1, constants.c2)?;
    let tilde = derive_tilde_params(&params, &spec, cell.n, delta, delta)?;

    let mut markdown = String::new();
    let mut reports = Vec::new();
    if spec.eta() == 0.0 {
        let intermediate =
            noiseless_intermediate_conditions(&spec, cell.n, delta, constants, &params, &tilde)?;
        let large = noiseless_large_signal_conditions(&spec, cell.n, delta, constants)?;
        markdown.push_str(&intermediate.to_markdown());
        markdown.push('\n');
        markdown.push_str(&large.to_markdown());
        reports.push(intermediate);
        reports.push(large);
    } else {
        let noisy = noisy_conditions(&spec, cell.n, delta, constants, &params, &tilde)?;
        markdown.push_str(&noisy.to_markdown());
        reports.push(noisy);
    }

    let mut bounds = vec![error_bound_rhs(
        BoundRegime::MarginBased,
        &spec,
        cell.n,
        &params,
        constants.c,
    )];
    if spec.eta() == 0.0 {
        bounds.push(error_bound_rhs(
            BoundRegime::LargeSignal,
            &spec,
            cell.n,
            &params,
            constants.c,
        ));
    }
    bounds.push(error_bound_rhs(
        BoundRegime::IsotropicSimplified,
        &spec,
        cell.n,
        &params,
        constants.c,
    ));
    for b in &bounds {
        markdown.push('\n');
        markdown.push_str(&b.to_markdown());
    }

    let exponents = isotropic_exponents(spec.xi().r(), spec.g().k(), spec.g().l());
    let m_factor = m_ge_one_check(&params, spec.g(), spec.sigma().trace(), cell.n, delta);
    println!("{markdown}");
    let payload = serde_json::json!({
        "conditions": reports,
        "bounds": bounds,
        "exponents": exponents.ok(),
        "m_factors": m_factor,
    });
    emit(&common.out, "bounds.json", &pretty(&payload)?)
}

fn cmd_sweep(common: Common) -> Result<()> {
    let config = load_config(&common)?;
    let output = run_sweep(&config)?;
    let out_dir = common.out.clone().or_else(|| config.out_dir.clone());
    match out_dir {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            let results = dir.join("results.csv");
            write_results_csv(&output.rows, &results)?;
            eprintln!("wrote {} rows to {}", output.rows.len(), results.display());
            if !output.homogeneous_rows.is_empty() {
                let baseline = dir.join("results_homogeneous.csv");
                write_results_csv(&output.homogeneous_rows, &baseline)?;
                eprintln!(
                    "wrote {} baseline rows to {}",
                    output.homogeneous_rows.len(),
                    baseline.display()
                );
            }
        }
        None => {
            print!(
                "{}",
                benign_core::experiments::results_to_csv_string(&output.rows)?
            );
        }
    }
    Ok(())
}

fn cmd_report(results: &Path, homogeneous: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let rows = read_results_csv(results)
        .with_context(|| format!("reading results {}", results.display()))?;
    let baseline = match homogeneous {
        Some(p) => {
            Some(read_results_csv(p).with_context(|| format!("reading baseline {}", p.display()))?)
        }
        None => None,
    };
    let report = build_report(&rows, baseline.as_deref())?;
    let markdown = report.to_markdown();
    println!("{markdown}");
    if let Some(dir) = out {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("report.md"), &markdown)?;
        fs::write(dir.join("cells.csv"), report.to_csv_string()?)?;
        eprintln!("wrote report.md and cells.csv to {}", dir.display());
    }
    Ok(())
}

/// Dying quietly on a closed pipe (`benign sweep | head`) beats a panic.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() -> Result<()> {
    reset_sigpipe();
    match Cli::parse().cmd {
        Cmd::Sample(c) => cmd_sample(c),
        Cmd::Events(c) => cmd_events(c),
        Cmd::Train { common, homogeneous } => cmd_train(common, homogeneous),
        Cmd::Bounds(c) => cmd_bounds(c),
        Cmd::Sweep(c) => cmd_sweep(c),
        Cmd::Report {
            results,
            homogeneous,
            out,
        } => cmd_report(&results, homogeneous.as_deref(), out),
    }
}
