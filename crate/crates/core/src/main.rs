//! Command-line surface: generate synthetic datasets, fit the variational
//! model, score a run against ground truth, and export run artifacts in
//! portable formats.
//!
//! Exit codes: 0 success, 1 malformed arguments, 2 I/O or on-disk format
//! failures, 3 validation or configuration failures, 4 divergence.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use spcy::error::{Error, Result};
use spcy::evalmetrics::evaluate;
use spcy::io::{
    fingerprint_file, load_gen_config, load_train_config, read_manifest, read_tensor,
    save_checkpoint, load_checkpoint, verify_manifest, write_manifest, write_tensor, RunManifest,
    GRAPH_FILE, LATENTS_FILE, OBSERVATIONS_FILE,
};
use spcy::scm::TemporalGraph;
use spcy::spatial::GridSpec;
use spcy::synthgen::generate_dataset;
use spcy::trainer::{factor_means, posterior_mean_latents, train, RunState, TrainConfig, TrainData};

/// Posterior edge probability above which an edge is kept.
const EDGE_THRESHOLD: f64 = 0.5;
/// Checkpoint subdirectory of a run.
const CHECKPOINT_DIR: &str = "checkpoint";
/// Per-step training log, one CSV row per gradient step.
const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Parser)]
#[command(name = "spcy", version, about = "Latent spatiotemporal causal discovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset from a latent structural causal model.
    Generate {
        /// Generator config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the tensors and manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the variational model to a generated dataset.
    Train {
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Training config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Run directory for the checkpoint, log, and extracted estimates.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a run's graph and latents against dataset ground truth.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Dataset directory holding the ground truth.
        #[arg(long)]
        truth: PathBuf,
        /// Where to write the JSON report.
        #[arg(long)]
        report: PathBuf,
    },
    /// Re-emit run artifacts from the checkpoint.
    Export {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        what: What,
        #[arg(long, value_enum)]
        format: Format,
        /// Output path (a directory for factors); default `<run>/export/...`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Factors,
    Graph,
    Latents,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Spcy,
    Csv,
    Json,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Spcy => "spcy",
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // --help and --version surface as non-error kinds on stdout.
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 2,
        Error::Divergence(_) => 4,
        _ => 3,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate { config, out } => cmd_generate(&config, &out),
        Command::Train { data, config, out } => cmd_train(&data, &config, &out),
        Command::Eval { run, truth, report } => cmd_eval(&run, &truth, &report),
        Command::Export { run, what, format, out } => cmd_export(&run, what, format, out),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

fn to_json<T: serde::Serialize>(what: &str, value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("{what} serialization: {e}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn cmd_generate(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_gen_config(config)?;
    let truth = generate_dataset(&cfg)?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;

    write_tensor(&out.join(OBSERVATIONS_FILE), &truth.observations)?;
    write_tensor(&out.join(LATENTS_FILE), &truth.latents)?;
    write_tensor(&out.join(GRAPH_FILE), &truth.graph.g)?;
    let mut files =
        vec![OBSERVATIONS_FILE.to_string(), LATENTS_FILE.to_string(), GRAPH_FILE.to_string()];
    for (v, f) in truth.factors.iter().enumerate() {
        let name = format!("factors.{v}.spcy");
        write_tensor(&out.join(&name), f)?;
        files.push(name);
    }

    // Ground-truth kernel parameters, one record per latent node. Centers
    // are unit-square; gamma is the raw log squared scale.
    let mut kernels = Vec::new();
    for (v, k) in truth.kernels.iter().enumerate() {
        for i in 0..k.gamma.shape()[0] {
            kernels.push(serde_json::json!({
                "variate": v,
                "node": i,
                "center": [k.rho.at(&[i, 0]), k.rho.at(&[i, 1])],
                "gamma": k.gamma.at(&[i]),
            }));
        }
    }
    write_text(&out.join("kernels.json"), &to_json("kernels", &kernels)?)?;
    files.push("kernels.json".to_string());

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        fingerprint: format!("{:016x}", fingerprint_file(&out.join(OBSERVATIONS_FILE))?),
        files,
        config: serde_json::to_value(&cfg)
            .map_err(|e| Error::Config(format!("config echo: {e}")))?,
        metadata: serde_json::json!({ "kind": "dataset", "grid": cfg.grid }),
    };
    write_manifest(out, &manifest)?;
    let s = truth.observations.shape().to_vec();
    println!(
        "dataset: {} samples x {} variates x {} points x {} steps -> {}",
        s[0],
        s[1],
        s[2],
        s[3],
        out.display()
    );
    Ok(())
}

/// Grid dims as echoed in a dataset manifest's config.
fn grid_dims(manifest: &RunManifest) -> Result<(usize, usize)> {
    let dims: [usize; 2] = manifest
        .config
        .get("grid")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .or_else(|| {
            manifest.metadata.get("grid").and_then(|v| serde_json::from_value(v.clone()).ok())
        })
        .ok_or_else(|| Error::Validation("manifest does not record the grid dims".to_string()))?;
    Ok((dims[0], dims[1]))
}

fn cmd_train(data_dir: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = load_train_config(config)?;
    let data_manifest = read_manifest(data_dir)?;
    verify_manifest(data_dir, &data_manifest)?;
    let (l1, l2) = grid_dims(&data_manifest)?;

    let obs = read_tensor(&data_dir.join(OBSERVATIONS_FILE))?;
    let data = TrainData::from_observations(&obs, GridSpec::regular(l1, l2))?;

    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log = File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut state = train(&data, &cfg, Some(&mut log))?;
    log.flush().map_err(|e| io_err(&log_path, e))?;

    save_checkpoint(&out.join(CHECKPOINT_DIR), &mut state)?;
    let graph = state.extract_graph(EDGE_THRESHOLD)?;
    write_tensor(&out.join(GRAPH_FILE), &graph.g)?;
    let latents = posterior_mean_latents(&state.model, &data)?;
    write_tensor(&out.join(LATENTS_FILE), &latents)?;

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        // Provenance: fingerprint of the dataset this run was fit to.
        fingerprint: data_manifest.fingerprint.clone(),
        files: vec![
            TRAIN_LOG_FILE.to_string(),
            GRAPH_FILE.to_string(),
            LATENTS_FILE.to_string(),
            format!("{CHECKPOINT_DIR}/state.json"),
        ],
        config: serde_json::to_value(&cfg)
            .map_err(|e| Error::Config(format!("config echo: {e}")))?,
        metadata: serde_json::json!({
            "kind": "run",
            "grid": [l1, l2],
            "data": data_dir.display().to_string(),
            "edge_threshold": EDGE_THRESHOLD,
        }),
    };
    write_manifest(out, &manifest)?;
    println!(
        "run: {} steps, {} edges kept at threshold {EDGE_THRESHOLD} -> {}",
        state.global_step,
        graph.num_edges(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(run: &Path, truth: &Path, report_path: &Path) -> Result<()> {
    let truth_graph = TemporalGraph::new(read_tensor(&truth.join(GRAPH_FILE))?)?;
    let truth_latents = read_tensor(&truth.join(LATENTS_FILE))?;
    let est_graph = TemporalGraph::new(read_tensor(&run.join(GRAPH_FILE))?)?;
    let est_latents = read_tensor(&run.join(LATENTS_FILE))?;

    if est_graph.num_nodes() != truth_graph.num_nodes() {
        return Err(Error::Validation(format!(
            "run has {} latent nodes but the truth has {}",
            est_graph.num_nodes(),
            truth_graph.num_nodes()
        )));
    }
    if est_latents.shape() != truth_latents.shape() {
        return Err(Error::Validation(format!(
            "run latents {:?} do not match truth latents {:?}",
            est_latents.shape(),
            truth_latents.shape()
        )));
    }

    let report = evaluate(&truth_graph, &truth_latents, &est_graph, &est_latents)?;
    write_text(report_path, &to_json("report", &report)?)?;
    println!(
        "f1 {:.4}  precision {:.4}  recall {:.4}  mcc {:.4} -> {}",
        report.f1,
        report.precision,
        report.recall,
        report.mcc,
        report_path.display()
    );
    Ok(())
}

/// Rebuilds the architecture a run was trained with from its manifest.
fn run_state(run: &Path) -> Result<RunState> {
    let manifest = read_manifest(run)?;
    let cfg: TrainConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| Error::Config(format!("run manifest config: {e}")))?;
    cfg.validate()?;
    let (l1, l2) = grid_dims(&manifest)?;
    load_checkpoint(&run.join(CHECKPOINT_DIR), &cfg, GridSpec::regular(l1, l2))
}

fn cmd_export(run: &Path, what: What, format: Format, out: Option<PathBuf>) -> Result<()> {
    let path = match what {
        What::Latents => {
            let path =
                out.unwrap_or_else(|| run.join("export").join(format!("latents.{}", format.extension())));
            export_latents(run, format, &path)?;
            path
        }
        What::Graph => {
            let path =
                out.unwrap_or_else(|| run.join("export").join(format!("graph.{}", format.extension())));
            export_graph(run, format, &path)?;
            path
        }
        What::Factors => {
            let dir = out.unwrap_or_else(|| run.join("export").join("factors"));
            export_factors(run, format, &dir)?;
            dir
        }
    };
    println!("{}", path.display());
    Ok(())
}

fn export_latents(run: &Path, format: Format, path: &Path) -> Result<()> {
    let latents = read_tensor(&run.join(LATENTS_FILE))?;
    let s = latents.shape().to_vec();
    match format {
        Format::Spcy => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
            write_tensor(path, &latents)
        }
        Format::Csv => {
            let mut text = String::from("sample,node,t,value\n");
            for n in 0..s[0] {
                for d in 0..s[1] {
                    for t in 0..s[2] {
                        text.push_str(&format!("{n},{d},{t},{}\n", latents.at(&[n, d, t])));
                    }
                }
            }
            write_text(path, &text)
        }
        Format::Json => {
            let doc = serde_json::json!({ "shape": s, "values": latents.data() });
            write_text(path, &to_json("latents", &doc)?)
        }
    }
}

fn export_graph(run: &Path, format: Format, path: &Path) -> Result<()> {
    let state = run_state(run)?;
    let probs = state.model.graph.edge_probs();
    let graph = state.extract_graph(EDGE_THRESHOLD)?;
    let d = graph.num_nodes();

    let mut edges = Vec::new();
    for k in 0..=graph.tau() {
        for i in 0..d {
            for j in 0..d {
                if graph.at(k, i, j) {
                    edges.push((k, i, j, probs.at(&[k, i, j])));
                }
            }
        }
    }

    match format {
        // Full posterior probability tensor; the thresholded graph is the
        // run's graph.spcy already.
        Format::Spcy => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
            write_tensor(path, &probs)
        }
        Format::Csv => {
            let mut text = String::from("lag,src,dst,prob\n");
            for (k, i, j, p) in edges {
                text.push_str(&format!("{k},{i},{j},{p}\n"));
            }
            write_text(path, &text)
        }
        Format::Json => {
            let listed: Vec<_> = edges
                .iter()
                .map(|&(k, i, j, p)| {
                    serde_json::json!({ "lag": k, "src": i, "dst": j, "prob": p })
                })
                .collect();
            let doc = serde_json::json!({
                "num_nodes": d,
                "tau": graph.tau(),
                "threshold": EDGE_THRESHOLD,
                "edges": listed,
            });
            write_text(path, &to_json("graph", &doc)?)
        }
    }
}

fn export_factors(run: &Path, format: Format, dir: &Path) -> Result<()> {
    let state = run_state(run)?;
    let means = factor_means(&state.model)?;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    // Per-node posterior-mean center and log scale, every format.
    let mut records = Vec::new();
    for (v, fm) in means.iter().enumerate() {
        for i in 0..fm.log_scales.shape()[0] {
            records.push(serde_json::json!({
                "variate": v,
                "node": i,
                "center": [fm.centers_unit.at(&[i, 0]), fm.centers_unit.at(&[i, 1])],
                "log_scale": fm.log_scales.at(&[i]),
            }));
        }
    }
    let doc = match format {
        Format::Json => {
            let matrices: Vec<_> = means
                .iter()
                .map(|fm| {
                    serde_json::json!({ "shape": fm.matrix.shape(), "values": fm.matrix.data() })
                })
                .collect();
            serde_json::json!({ "nodes": records, "matrices": matrices })
        }
        _ => serde_json::json!({ "nodes": records }),
    };
    write_text(&dir.join("factors.json"), &to_json("factors", &doc)?)?;

    for (v, fm) in means.iter().enumerate() {
        match format {
            Format::Json => {}
            Format::Spcy => write_tensor(&dir.join(format!("factors.{v}.spcy")), &fm.matrix)?,
            Format::Csv => {
                let s = fm.matrix.shape().to_vec();
                let mut text = String::from("point");
                for i in 0..s[1] {
                    text.push_str(&format!(",node_{i}"));
                }
                text.push('\n');
                for l in 0..s[0] {
                    text.push_str(&l.to_string());
                    for i in 0..s[1] {
                        text.push_str(&format!(",{}", fm.matrix.at(&[l, i])));
                    }
                    text.push('\n');
                }
                write_text(&dir.join(format!("factors.{v}.csv")), &text)?;
            }
        }
    }
    Ok(())
}
