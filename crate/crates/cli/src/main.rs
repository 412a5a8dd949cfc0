//! `funclbm` command-line tool.
//!
//! Every subcommand accepts `--config <file.json>`, a JSON object whose keys
//! are the subcommand's long flag names in snake_case. Flags given on the
//! command line override the file.
//!
//! Exit codes: 0 success, 1 other failure, 2 input error, 3 degenerate
//! structure, 4 too many degenerate cells.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use funclbm::datagen::{benchmark_spec, generate, GenerativeSpec};
use funclbm::evaluation::partition_views;
use funclbm::experiments::ScatterPoint;
use funclbm::inference::{run_concurrent, SemGibbsConfig, SubspaceDim};
use funclbm::init::{InitKind, InitStrategy};
use funclbm::io::{self, RunRecord};
use funclbm::selection::{self, SearchStrategy, SelectionConfig};
use funclbm::signal::{transform_dataset, Interpolation};
use funclbm::{CoClusterStructure, Error};

#[derive(Parser)]
#[command(name = "funclbm", version, about = "Conditional co-clustering of multivariate time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground-truth partition.
    Generate(Flags<GenerateArgs>),
    /// Turn raw series into a coefficient grid.
    Transform(Flags<TransformArgs>),
    /// Fit a given structure with concurrent SEM-Gibbs runs.
    Fit(Flags<FitArgs>),
    /// Choose the structure by ICL.
    Select(Flags<SelectArgs>),
    /// Compare an estimated partition with a reference.
    Evaluate(Flags<EvaluateArgs>),
    /// Write per-block coefficient dumps and the likelihood/ARI scatter.
    Plotdata(Flags<PlotdataArgs>),
}

#[derive(Args)]
struct Flags<T: Args> {
    /// JSON file with default values for the flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    args: T,
}

/// Overlays the command-line values (non-null) onto the config file's values.
fn merged<T: Args + Serialize + DeserializeOwned>(flags: Flags<T>) -> Result<T, Error> {
    let Some(path) = flags.config else {
        return Ok(flags.args);
    };
    let mut base: serde_json::Value = io::read_json(&path)?;
    let serde_json::Value::Object(ref mut map) = base else {
        return Err(Error::InvalidInput(format!("{}: config must be a JSON object", path.display())));
    };
    if let serde_json::Value::Object(cli) = serde_json::to_value(&flags.args)? {
        for (k, v) in cli {
            if !v.is_null() && v != serde_json::Value::Bool(false) {
                map.insert(k, v);
            }
        }
    }
    serde_json::from_value(base).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T, Error> {
    value.ok_or_else(|| Error::InvalidInput(format!("--{flag} is required (flag or config file)")))
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default)]
struct GenerateArgs {
    /// Generate the 90 x 90 benchmark.
    #[arg(long)]
    benchmark: bool,
    /// Generative spec JSON (structure, sizes, prototypes, noise).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// `csv` (long format) or `json`.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default)]
struct TransformArgs {
    /// Long CSV (`row_id,col_id,t,value`) or dataset JSON.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Coefficient vector length m.
    #[arg(long)]
    length: Option<usize>,
    /// `linear` or `cubic`.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
#[serde(default)]
struct SemArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    /// `fixed:<d>` or `variance:<threshold>:<cap>`.
    #[arg(long)]
    subspace: Option<String>,
}

impl SemArgs {
    fn config(&self) -> Result<SemGibbsConfig, Error> {
        let d = SemGibbsConfig::default();
        let config = SemGibbsConfig {
            max_iterations: self.max_iter.unwrap_or(d.max_iterations),
            burn_in: self.burn_in.unwrap_or(d.burn_in),
            convergence_tol: self.tol.unwrap_or(d.convergence_tol),
            convergence_window: self.window.unwrap_or(d.convergence_window),
            seed: required(self.seed, "seed")?,
            subspace_dim: match &self.subspace {
                Some(s) => parse_subspace(s)?,
                None => d.subspace_dim,
            },
        };
        config.validate()?;
        Ok(config)
    }
}

fn parse_subspace(s: &str) -> Result<SubspaceDim, Error> {
    let bad = || Error::InvalidInput(format!("--subspace {s:?}: expected fixed:<d> or variance:<threshold>:<cap>"));
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["fixed", d] => Ok(SubspaceDim::Fixed(d.parse().map_err(|_| bad())?)),
        ["variance", t, c] => Ok(SubspaceDim::VarianceExplained {
            threshold: t.parse().map_err(|_| bad())?,
            cap: c.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default)]
struct FitArgs {
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Number of column clusters; optional when `--K` lists every cluster.
    #[arg(long = "L", id = "l")]
    #[serde(rename = "L")]
    l: Option<usize>,
    /// Row clusters per column cluster, e.g. `3,2,2`, or one value for all.
    #[arg(long = "K", id = "k")]
    #[serde(rename = "K")]
    k: Option<String>,
    #[arg(long)]
    n_runs: Option<usize>,
    /// `random`, `sample`, `kmeans` or `funlbm`.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    sem: SemArgs,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default)]
struct SelectArgs {
    #[arg(long)]
    grid: Option<PathBuf>,
    /// `grid` or `greedy`.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    l_max: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    runs_per_candidate: Option<usize>,
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    sem: SemArgs,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default)]
struct EvaluateArgs {
    /// Prefix of the estimated `<prefix>.rows.csv` / `<prefix>.cols.csv`.
    #[arg(long)]
    estimate: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Also write the JSON here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default)]
struct PlotdataArgs {
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Prefix of the fitted partition files.
    #[arg(long)]
    partition: Option<PathBuf>,
    /// `runs.json` from `fit`, for the scatter.
    #[arg(long)]
    runs: Option<PathBuf>,
    /// Ground-truth partition prefix, for the scatter.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn out_dir(dir: Option<PathBuf>) -> Result<PathBuf, Error> {
    let dir = required(dir, "out-dir")?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn cmd_generate(a: GenerateArgs) -> Result<(), Error> {
    let seed = required(a.seed, "seed")?;
    let spec = match (&a.spec, a.benchmark) {
        (Some(path), false) => GenerativeSpec {
            seed,
            ..io::read_json(path)?
        },
        (None, true) => benchmark_spec(seed),
        _ => return Err(Error::InvalidInput("give exactly one of --benchmark or --spec".into())),
    };
    let dir = out_dir(a.out_dir)?;
    let (data, truth) = generate(&spec)?;
    match a.format.as_deref().unwrap_or("csv") {
        "csv" => io::write_long_csv(&dir.join("data.csv"), &data)?,
        "json" => io::write_dataset_json(&dir.join("data.json"), &data)?,
        other => return Err(Error::InvalidInput(format!("unknown format {other:?}"))),
    }
    io::write_partition(&dir.join("truth"), &truth, data.row_ids(), data.col_ids())?;
    io::write_json(&dir.join("spec.json"), &spec)?;
    Ok(())
}

#[derive(Serialize)]
struct TransformSummary {
    n_rows: usize,
    n_cols: usize,
    length: usize,
    frequency_gap: f64,
    degenerate_cells: usize,
}

fn cmd_transform(a: TransformArgs) -> Result<(), Error> {
    let data = io::read_dataset(&required(a.input, "input")?)?;
    let method: Interpolation = a.method.as_deref().unwrap_or("linear").parse()?;
    let grid = transform_dataset(&data, a.length.unwrap_or(50), method)?;
    io::write_grid(&required(a.output, "output")?, &grid)?;
    let summary = TransformSummary {
        n_rows: grid.n_rows(),
        n_cols: grid.n_cols(),
        length: grid.dim(),
        frequency_gap: grid.frequency_grid().gap,
        degenerate_cells: grid.degenerate_cells().len(),
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn parse_structure(l: Option<usize>, k: Option<&str>) -> Result<CoClusterStructure, Error> {
    let k = required(k, "K")?;
    let ks: Vec<usize> = k
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::InvalidInput(format!("--K {k:?} is not a comma-separated list"))))
        .collect::<Result<_, _>>()?;
    match (l, ks.len()) {
        (Some(l), 1) => CoClusterStructure::uniform(l, ks[0]),
        (Some(l), n) if l != n => Err(Error::InvalidInput(format!("--L {l} but --K lists {n} clusters"))),
        _ => CoClusterStructure::new(ks),
    }
}

fn init_strategy(name: Option<&str>) -> Result<InitStrategy, Error> {
    Ok(InitStrategy::new(name.unwrap_or("random").parse::<InitKind>()?))
}

fn cmd_fit(a: FitArgs) -> Result<(), Error> {
    let grid = io::read_grid(&required(a.grid, "grid")?)?;
    let structure = parse_structure(a.l, a.k.as_deref())?;
    let config = a.sem.config()?;
    let init = init_strategy(a.init.as_deref())?;
    let dir = out_dir(a.out_dir)?;
    let fit = run_concurrent(&grid, &structure, &config, a.n_runs.unwrap_or(1), &init)?;
    let best = &fit.best;
    io::write_model(&dir.join("model.json"), &best.best_state)?;
    io::write_partition(&dir.join("partition"), &best.best_partition, grid.row_ids(), grid.col_ids())?;
    io::write_trace(&dir.join("trace.csv"), &best.likelihood_trace)?;
    let records: Vec<RunRecord> = fit
        .runs
        .iter()
        .enumerate()
        .map(|(run, o)| match &o.result {
            Ok(r) => RunRecord {
                run,
                seed: o.seed,
                log_likelihood: Some(r.best_log_likelihood),
                iterations: Some(r.iterations_run),
                converged: Some(r.converged),
                error: None,
                col_labels: Some(r.best_partition.col_labels.clone()),
                row_labels: Some(r.best_partition.row_labels.clone()),
            },
            Err(e) => RunRecord {
                run,
                seed: o.seed,
                log_likelihood: None,
                iterations: None,
                converged: None,
                error: Some(e.clone()),
                col_labels: None,
                row_labels: None,
            },
        })
        .collect();
    io::write_json(&dir.join("runs.json"), &records)?;
    io::write_json(
        &dir.join("fit.json"),
        &serde_json::json!({
            "structure": structure.k_list(),
            "best_run": fit.best_run,
            "log_likelihood": best.best_log_likelihood,
            "iterations": best.iterations_run,
            "converged": best.converged,
            "degeneracy_events": best.degeneracy_events,
            "config": config,
        }),
    )?;
    if !best.converged {
        eprintln!("warning: best run stopped at the iteration limit without meeting the convergence tolerance");
    }
    Ok(())
}

fn cmd_select(a: SelectArgs) -> Result<(), Error> {
    let grid = io::read_grid(&required(a.grid, "grid")?)?;
    let d = SelectionConfig::default();
    let config = SelectionConfig {
        l_max: a.l_max.unwrap_or(d.l_max),
        k_max: a.k_max.unwrap_or(d.k_max),
        runs_per_candidate: a.runs_per_candidate.unwrap_or(d.runs_per_candidate),
        strategy: a.strategy.as_deref().unwrap_or("grid").parse::<SearchStrategy>()?,
        sem: a.sem.config()?,
        init: init_strategy(a.init.as_deref())?,
    };
    let dir = out_dir(a.out_dir)?;
    let res = selection::select(&grid, &config)?;
    for note in &res.skipped {
        eprintln!("warning: skipped candidate {note}");
    }
    io::write_icl_table(&dir.join("icl_table.csv"), &res.icl_table)?;
    io::write_icl_table(&dir.join("lbm_icl_table.csv"), &res.lbm_table)?;
    io::write_model(&dir.join("model.json"), &res.best_result.best_state)?;
    io::write_partition(&dir.join("partition"), &res.best_result.best_partition, grid.row_ids(), grid.col_ids())?;
    io::write_trace(&dir.join("trace.csv"), &res.best_result.likelihood_trace)?;
    io::write_json(
        &dir.join("selection.json"),
        &serde_json::json!({
            "best_structure": res.best_structure.k_list(),
            "L": res.best_structure.col_clusters(),
            "log_likelihood": res.best_result.best_log_likelihood,
            "search_candidates": res.search_candidates,
            "refinement_candidates": res.refinement_candidates,
            "candidates_evaluated": res.candidates_evaluated,
            "greedy_iterations": res.greedy_iterations,
            "skipped": res.skipped,
            "config": config,
        }),
    )?;
    println!("{}", res.best_structure);
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), Error> {
    let truth = io::read_partition(&required(a.truth, "truth")?)?;
    let est = io::read_partition(&required(a.estimate, "estimate")?)?;
    let aligned = est.aligned_to(&truth.row_ids, &truth.col_ids)?;
    let views = partition_views(&aligned, &truth.partition)?;
    let text = serde_json::to_string_pretty(&views)?;
    if let Some(path) = a.output {
        fs::write(path, format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_plotdata(a: PlotdataArgs) -> Result<(), Error> {
    let grid = io::read_grid(&required(a.grid, "grid")?)?;
    let state = io::read_model(&required(a.model, "model")?)?;
    let labeled = io::read_partition(&required(a.partition, "partition")?)?;
    let partition = labeled.aligned_to(grid.row_ids(), grid.col_ids())?;
    partition.validate(state.structure(), grid.n_rows(), grid.n_cols())?;
    if state.coeff_len() != grid.dim() {
        return Err(Error::InvalidInput("model and grid disagree on the coefficient length".into()));
    }
    let dir = out_dir(a.out_dir)?;
    let m = grid.dim();
    for (l, &k_count) in state.structure().row_clusters().iter().enumerate() {
        for k in 0..k_count {
            let path = dir.join(format!("block_l{l}_k{k}.csv"));
            let mut header = vec!["row_id".to_string(), "col_id".to_string()];
            header.extend((0..m).map(|q| format!("c{q}")));
            let mut lines = vec![header.join(",")];
            let block = state.block(l, k);
            for i in 0..grid.n_rows() {
                for j in 0..grid.n_cols() {
                    if partition.block_of(i, j) == (l, k) {
                        let fitted = block.reconstruct(grid.cell(i, j));
                        let mut row = vec![grid.row_ids()[i].clone(), grid.col_ids()[j].clone()];
                        row.extend(fitted.iter().map(|v| v.to_string()));
                        lines.push(row.join(","));
                    }
                }
            }
            fs::write(path, lines.join("\n") + "\n")?;
        }
    }
    if let (Some(runs), Some(truth)) = (a.runs, a.truth) {
        let records: Vec<RunRecord> = io::read_json(&runs)?;
        let truth = io::read_partition(&truth)?;
        let truth_part = truth.partition.clone();
        let mut points = Vec::new();
        for r in records {
            if let (Some(ll), Some(cols), Some(rows)) = (r.log_likelihood, r.col_labels, r.row_labels) {
                let est = io::LabeledPartition {
                    partition: funclbm::PartitionPair {
                        col_labels: cols,
                        row_labels: rows,
                    },
                    row_ids: grid.row_ids().to_vec(),
                    col_ids: grid.col_ids().to_vec(),
                };
                let v = partition_views(&est.aligned_to(&truth.row_ids, &truth.col_ids)?, &truth_part)?;
                points.push(ScatterPoint {
                    run: r.run,
                    seed: r.seed,
                    log_likelihood: ll,
                    row_ari: v.row_ari,
                    col_ari: v.col_ari,
                    block_ari: v.block_ari,
                });
            }
        }
        let mut lines = vec!["run,seed,loglik,row_ari,col_ari,block_ari".to_string()];
        lines.extend(
            points
                .iter()
                .map(|p| format!("{},{},{},{},{},{}", p.run, p.seed, p.log_likelihood, p.row_ari, p.col_ari, p.block_ari)),
        );
        fs::write(dir.join("scatter.csv"), lines.join("\n") + "\n")?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::DegenerateStructure(_) => 3,
        Error::TooManyDegenerateCells { .. } => 4,
        Error::InvalidInput(_)
        | Error::InvalidStructure(_)
        | Error::DegenerateSignal(_)
        | Error::Parse { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_) => 2,
        Error::Numeric(_) => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(f) => cmd_generate(merged(f)?),
        Command::Transform(f) => cmd_transform(merged(f)?),
        Command::Fit(f) => cmd_fit(merged(f)?),
        Command::Select(f) => cmd_select(merged(f)?),
        Command::Evaluate(f) => cmd_evaluate(merged(f)?),
        Command::Plotdata(f) => cmd_plotdata(merged(f)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

