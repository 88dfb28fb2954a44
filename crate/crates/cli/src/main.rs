//! Command-line entry point. Exit codes: 0 success, 1 validation failure,
//! 2 runtime failure, 3 verification failure.

mod config;

use agcn_core::data::{read_sample, synth_generate, DatasetManifest, Stream, SynthConfig};
use agcn_core::export::{extract_adjacency, write_pgm, AdjacencyTerm};
use agcn_core::graph;
use agcn_core::model::{load_checkpoint, read_checkpoint_meta, NetParams, NetworkConfig};
use agcn_core::tensor::{Precision, Real};
use agcn_core::train::{
    evaluate, fuse_scores, read_scores, table_accuracy, train, write_scores, ScoreTable,
};
use agcn_core::Error;
use clap::{Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "agcn",
    version,
    about = "Adaptive graph convolutional network for skeleton-based action recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic synthetic toy dataset.
    GenData {
        /// Builtin skeleton name (the generator knows toy9).
        #[arg(long, default_value = "toy9")]
        spec: String,
        /// Training samples per class.
        #[arg(long)]
        per_class: usize,
        /// Validation samples per class.
        #[arg(long, default_value_t = 0)]
        val_per_class: usize,
        /// Frames per sample.
        #[arg(long, default_value_t = 32)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for samples and manifest.tsv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stream from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's stream selection.
        #[arg(long)]
        stream: Option<String>,
        /// Run directory: checkpoint, logs, and the resolved config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one manifest split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Write per-sample softmax scores here.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
    /// Fuse two streams' score files and report accuracy.
    Fuse {
        #[arg(long)]
        scores_j: PathBuf,
        #[arg(long)]
        scores_b: PathBuf,
        /// Manifest resolving sample ids to labels.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Write the fused score file here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        w_j: f64,
        #[arg(long, default_value_t = 1.0)]
        w_b: f64,
    },
    /// Finite-difference gradient check of a model fragment (f64).
    Gradcheck {
        /// One of: gaussian, layer, block, network.
        #[arg(long)]
        fragment: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Export one adjacency term of one layer/subset as an 8-bit PGM.
    ExportAdjacency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        subset: usize,
        /// A, B, C, or sum.
        #[arg(long)]
        term: String,
        /// Sample file; required for the data-dependent C term.
        #[arg(long)]
        sample: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

type CmdResult = Result<(), (i32, String)>;

fn code_of(e: &Error) -> i32 {
    match e {
        Error::Invalid(_) | Error::Format(_) => 1,
        Error::Io(_) | Error::Numeric(_) | Error::ShapeMismatch { .. } => 2,
        Error::Verification(_) => 3,
    }
}

fn core_err(e: Error) -> (i32, String) {
    (code_of(&e), e.to_string())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            std::process::exit(if is_help { 0 } else { 1 });
        }
    };
    if let Err((code, message)) = run(cli.command) {
        eprintln!("error: {message}");
        std::process::exit(code);
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::GenData {
            spec,
            per_class,
            val_per_class,
            frames,
            seed,
            out,
        } => cmd_gen_data(&spec, per_class, val_per_class, frames, seed, &out),
        Command::Train {
            config,
            stream,
            out,
        } => cmd_train(&config, stream.as_deref(), &out),
        Command::Eval {
            checkpoint,
            manifest,
            split,
            scores,
            batch,
        } => cmd_eval(&checkpoint, &manifest, &split, scores.as_deref(), batch),
        Command::Fuse {
            scores_j,
            scores_b,
            manifest,
            split,
            out,
            w_j,
            w_b,
        } => cmd_fuse(&scores_j, &scores_b, &manifest, &split, out.as_deref(), w_j, w_b),
        Command::Gradcheck { fragment, seed } => cmd_gradcheck(&fragment, seed),
        Command::ExportAdjacency {
            checkpoint,
            layer,
            subset,
            term,
            sample,
            out,
        } => cmd_export(&checkpoint, layer, subset, &term, sample.as_deref(), &out),
    }
}

fn cmd_gen_data(
    spec: &str,
    per_class: usize,
    val_per_class: usize,
    frames: usize,
    seed: u64,
    out: &std::path::Path,
) -> CmdResult {
    let spec = graph::resolve_spec(spec).map_err(core_err)?;
    let manifest = synth_generate(
        &spec,
        &SynthConfig {
            train_per_class: per_class,
            val_per_class,
            frames,
            seed,
        },
        out,
    )
    .map_err(core_err)?;
    println!(
        "wrote {} samples ({} train, {} val) and {}",
        manifest.records.len(),
        manifest.split_records("train").len(),
        manifest.split_records("val").len(),
        out.join("manifest.tsv").display()
    );
    Ok(())
}

fn cmd_train(config_path: &std::path::Path, stream: Option<&str>, out: &std::path::Path) -> CmdResult {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| (1, format!("cannot read config {}: {e}", config_path.display())))?;
    let base = config_path.parent().unwrap_or(std::path::Path::new("."));
    let mut cfg = RunConfig::parse(&text, base).map_err(|errors| {
        (
            1,
            format!("config validation failed:\n  {}", errors.join("\n  ")),
        )
    })?;
    if let Some(s) = stream {
        cfg.stream = Stream::parse(s).map_err(core_err)?;
    }
    let manifest = DatasetManifest::load(&cfg.manifest).map_err(core_err)?;
    let net = cfg.network_config(&manifest).map_err(core_err)?;
    let mut hyper = cfg.hyper().map_err(core_err)?;
    hyper.progress = true;
    std::fs::create_dir_all(out).map_err(|e| (2, e.to_string()))?;
    std::fs::write(out.join("config.resolved"), cfg.to_text()).map_err(|e| (2, e.to_string()))?;
    let report = match cfg.precision {
        Precision::Single => {
            train::<f32>(&manifest, &net, &hyper, cfg.stream, out)
                .map(|(r, _)| r)
                .map_err(core_err)?
        }
        Precision::Double => {
            train::<f64>(&manifest, &net, &hyper, cfg.stream, out)
                .map(|(r, _)| r)
                .map_err(core_err)?
        }
    };
    print!("{}", report.summary_text(cfg.stream, cfg.seed, cfg.batch));
    println!("log: {}", out.join("train.log").display());
    Ok(())
}

fn eval_with<E: Real>(
    checkpoint: &std::path::Path,
    manifest: &DatasetManifest,
    split: &str,
    batch: usize,
) -> Result<(NetworkConfig, Stream, agcn_core::train::EvalReport), Error> {
    let (cfg, stream, mut params) = load_checkpoint::<E>(checkpoint)?;
    let report = evaluate(&mut params, &cfg, manifest, split, stream, batch)?;
    Ok((cfg, stream, report))
}

fn cmd_eval(
    checkpoint: &std::path::Path,
    manifest_path: &std::path::Path,
    split: &str,
    scores: Option<&std::path::Path>,
    batch: usize,
) -> CmdResult {
    let manifest = DatasetManifest::load(manifest_path).map_err(core_err)?;
    let meta = read_checkpoint_meta(checkpoint).map_err(core_err)?;
    let (cfg, stream, report) = match meta.precision {
        Precision::Single => eval_with::<f32>(checkpoint, &manifest, split, batch),
        Precision::Double => eval_with::<f64>(checkpoint, &manifest, split, batch),
    }
    .map_err(core_err)?;
    println!(
        "split {split} stream {stream}: top1 {:.4} top5 {:.4}",
        report.top1, report.top5
    );
    for (k, acc) in report.per_class.iter().enumerate() {
        let name = cfg
            .class_names
            .get(k)
            .cloned()
            .unwrap_or_else(|| format!("class{k}"));
        println!("class {name}: {acc:.4}");
    }
    if let Some(path) = scores {
        write_scores(path, &report.scores).map_err(core_err)?;
        println!("scores: {}", path.display());
    }
    Ok(())
}

fn cmd_fuse(
    scores_j: &std::path::Path,
    scores_b: &std::path::Path,
    manifest_path: &std::path::Path,
    split: &str,
    out: Option<&std::path::Path>,
    w_j: f64,
    w_b: f64,
) -> CmdResult {
    let manifest = DatasetManifest::load(manifest_path).map_err(core_err)?;
    let j = read_scores(scores_j).map_err(core_err)?;
    let b = read_scores(scores_b).map_err(core_err)?;
    let fused = fuse_scores(&j, &b, w_j, w_b).map_err(core_err)?;
    let labels = manifest.labels_for_ids(split, &fused.ids).map_err(core_err)?;
    let report = |name: &str, t: &ScoreTable| -> Result<(), (i32, String)> {
        let (top1, top5) = table_accuracy(t, &labels).map_err(core_err)?;
        println!("{name}: top1 {top1:.4} top5 {top5:.4}");
        Ok(())
    };
    report("joints", &j)?;
    report("bones", &b)?;
    report("fused", &fused)?;
    if let Some(path) = out {
        write_scores(path, &fused).map_err(core_err)?;
        println!("fused scores: {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(fragment: &str, seed: u64) -> CmdResult {
    use agcn_core::verify;
    let report = match fragment {
        "gaussian" => verify::check_embedded_gaussian(seed),
        "layer" => verify::check_adaptive_layer(seed),
        "block" => verify::check_block(seed),
        "network" => verify::check_network(seed),
        other => {
            return Err((
                1,
                format!("unknown fragment '{other}' (gaussian, layer, block, network)"),
            ))
        }
    }
    .map_err(core_err)?;
    print!("{}", report.to_text());
    if report.passed() {
        Ok(())
    } else {
        Err((
            3,
            format!(
                "gradient check failed: max relative error {:.3e} over tolerance {:.1e}",
                report.max_rel_err(),
                report.tolerance
            ),
        ))
    }
}

fn export_with<E: Real>(
    checkpoint: &std::path::Path,
    layer: usize,
    subset: usize,
    term: AdjacencyTerm,
    sample: Option<&std::path::Path>,
    out: &std::path::Path,
) -> Result<(), Error> {
    let (cfg, _, mut params): (_, _, NetParams<E>) = load_checkpoint::<E>(checkpoint)?;
    let sample = match sample {
        Some(path) => Some(read_sample(path)?),
        None => None,
    };
    let matrix = extract_adjacency(&mut params, &cfg, layer, subset, term, sample.as_ref())?;
    write_pgm(out, &matrix)?;
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in matrix.data() {
        min = min.min(v);
        max = max.max(v);
    }
    println!(
        "wrote {} ({}x{}, min {min} max {max})",
        out.display(),
        matrix.shape()[0],
        matrix.shape()[1]
    );
    Ok(())
}

fn cmd_export(
    checkpoint: &std::path::Path,
    layer: usize,
    subset: usize,
    term: &str,
    sample: Option<&std::path::Path>,
    out: &std::path::Path,
) -> CmdResult {
    let term = AdjacencyTerm::parse(term).map_err(core_err)?;
    let meta = read_checkpoint_meta(checkpoint).map_err(core_err)?;
    match meta.precision {
        Precision::Single => export_with::<f32>(checkpoint, layer, subset, term, sample, out),
        Precision::Double => export_with::<f64>(checkpoint, layer, subset, term, sample, out),
    }
    .map_err(core_err)
}
