//! The `ezgzl` command line.
//!
//! Exit codes: 0 on success, 1 when the arguments, configuration or input
//! paths are invalid, 2 when a run fails after validation.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::avla::{load_checkpoint, save_checkpoint, train_alignment};
use crate::ceo::{nearest_neighbor_report, optimize_class_embeddings};
use crate::config::{apply_override, parse_table, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::numerics::par;
use crate::store::{
    load_embedding_bank, load_feature_dataset_inferred, save_embedding_bank, save_feature_dataset, EmbeddingSource,
};
use crate::synth::generate_benchmark;

pub const WORKERS_ENV: &str = "EZGZL_WORKERS";

#[derive(Debug, Parser)]
#[command(
    name = "ezgzl",
    version,
    about = "Class-embedding optimization and audio-visual alignment for zero-shot classification",
    after_help = "Any config key can be overridden as --<section>.<key> <value>, e.g. --ceo.alpha 0.3 or --train.head-kind mlp."
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; section seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for outputs without an explicit path.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for the parallel sections.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic benchmark (bank and features).
    Synth,
    /// Optimize class embeddings of a bank.
    Optimize,
    /// Train the alignment model.
    Train,
    /// Evaluate a checkpoint on the test partition.
    Eval,
    /// Print an embedding bank's nearest-neighbour table or an evaluation report.
    Inspect {
        file: PathBuf,
        /// Emit JSON instead of text tables.
        #[arg(long)]
        json: bool,
    },
}

enum Failure {
    Validation(Error),
    Runtime(Error),
}

fn validation(e: Error) -> Failure {
    Failure::Validation(e)
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e)
}

/// Splits `--section.key value` and `--section.key=value` overrides from the
/// arguments clap parses.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let dotted = a
            .strip_prefix("--")
            .filter(|s| s.split('=').next().is_some_and(|k| k.contains('.')));
        match dotted {
            Some(body) => match body.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("--{body} needs a value")))?;
                    overrides.push((body.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn build_config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut doc = match &cli.config {
        Some(path) => parse_table(
            &std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?,
        )?,
        None => toml::Table::new(),
    };
    if let Some(seed) = cli.seed {
        apply_override(&mut doc, "seed", &seed.to_string())?;
    }
    if let Some(w) = cli.workers {
        apply_override(&mut doc, "workers", &w.to_string())?;
    }
    if let Some(dir) = &cli.out_dir {
        doc.entry("paths")
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config("paths is not a section".into()))?
            .insert("out_dir".into(), toml::Value::String(dir.to_string_lossy().into_owned()));
    }
    for (k, v) in overrides {
        apply_override(&mut doc, k, v)?;
    }
    RunConfig::from_table(doc)
}

/// Worker count from the config, capped by the environment variable.
fn effective_workers(cfg: &RunConfig) -> Result<Option<usize>> {
    let env = match std::env::var(WORKERS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    Ok(match (cfg.workers, env) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

fn run_synth(cfg: &RunConfig, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let bank_path = cfg.output("bank", "bank.ezb");
    let features_path = cfg.output("features", "features.ezf");
    let b = generate_benchmark(&cfg.synth).map_err(runtime)?;
    ensure_parent(&bank_path).map_err(runtime)?;
    ensure_parent(&features_path).map_err(runtime)?;
    save_embedding_bank(&b.bank, &bank_path).map_err(runtime)?;
    save_feature_dataset(&b.dataset, &b.bank, &features_path).map_err(runtime)?;
    writeln!(
        out,
        "wrote {} classes to {} and {} samples to {}",
        b.bank.len(),
        bank_path.display(),
        b.dataset.len(),
        features_path.display()
    )
    .map_err(|e| runtime(e.into()))
}

fn run_optimize(cfg: &RunConfig, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let input = cfg.input("bank").map_err(validation)?;
    let bank_path = cfg.output("optimized_bank", "bank_optimized.ezb");
    let trace_path = cfg.output("ceo_trace", "ceo_trace.json");
    let bank = load_embedding_bank(&input).map_err(runtime)?;
    let result = optimize_class_embeddings(&bank, &cfg.ceo).map_err(runtime)?;
    let optimized = bank.with_optimized(result.optimized.clone()).map_err(runtime)?;
    ensure_parent(&bank_path).map_err(runtime)?;
    save_embedding_bank(&optimized, &bank_path).map_err(runtime)?;
    write_file(&trace_path, result.trace_json().map_err(runtime)?.as_bytes()).map_err(runtime)?;
    if let Some(reason) = &result.aborted {
        eprintln!("warning: optimization stopped early: {reason}");
    }
    writeln!(
        out,
        "min pairwise distance {:.6} -> {:.6}, kendall tau {:.4}; wrote {}",
        result.min_pairwise_distance_before,
        result.min_pairwise_distance_after,
        result.kendall_tau,
        bank_path.display()
    )
    .map_err(|e| runtime(e.into()))
}

/// Bank for training or evaluation: the optimized bank, or the plain bank
/// when initial embeddings are selected and no optimized bank is configured.
fn alignment_bank(cfg: &RunConfig, source: EmbeddingSource) -> Result<PathBuf> {
    match (source, cfg.paths.optimized_bank.is_some()) {
        (EmbeddingSource::Initial, false) => cfg.input("bank"),
        _ => cfg.input("optimized_bank"),
    }
}

fn run_train(cfg: &RunConfig, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let bank_path = alignment_bank(cfg, cfg.train.embeddings).map_err(validation)?;
    let features = cfg.input("features").map_err(validation)?;
    let ckpt = cfg.output("checkpoint", "model.ezm");
    let curve = cfg.output("loss_curve", "loss_curve.json");
    let bank = load_embedding_bank(&bank_path).map_err(runtime)?;
    let (ds, _) = load_feature_dataset_inferred(&features, &bank).map_err(runtime)?;
    let model = train_alignment(&ds, &bank, &cfg.train).map_err(runtime)?;
    ensure_parent(&ckpt).map_err(runtime)?;
    save_checkpoint(&model, &ckpt).map_err(runtime)?;
    write_file(&curve, model.loss_curve_json().map_err(runtime)?.as_bytes()).map_err(runtime)?;
    let last = model.loss_curve.last().copied().unwrap_or(f64::NAN);
    writeln!(out, "trained {} epochs, final loss {last:.6}; wrote {}", model.loss_curve.len(), ckpt.display())
        .map_err(|e| runtime(e.into()))
}

fn run_eval(cfg: &RunConfig, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let ckpt = cfg.input("checkpoint").map_err(validation)?;
    let features = cfg.input("features").map_err(validation)?;
    let model = load_checkpoint(&ckpt).map_err(runtime)?;
    let bank_path = alignment_bank(cfg, model.config.embeddings).map_err(validation)?;
    let report_path = cfg.output("report", "report.json");
    let bank = load_embedding_bank(&bank_path).map_err(runtime)?;
    let (ds, split) = load_feature_dataset_inferred(&features, &bank).map_err(runtime)?;
    let digest = cfg.settings_digest(&model.config).map_err(runtime)?;
    let report = evaluate(&model, &bank, &ds, &split, digest).map_err(runtime)?;
    write_file(&report_path, report.to_json().map_err(runtime)?.as_bytes()).map_err(runtime)?;
    write_file(&report_path.with_extension("txt"), report.to_text().as_bytes()).map_err(runtime)?;
    write!(out, "{}", report.to_text()).map_err(|e| runtime(e.into()))
}

fn run_inspect(cfg: &RunConfig, file: &Path, json: bool, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let bytes = std::fs::read(file)
        .map_err(|e| validation(Error::Config(format!("cannot read {}: {e}", file.display()))))?;
    let text = if bytes.starts_with(b"EZB") {
        let bank = crate::store::EmbeddingBank::from_bytes(&bytes).map_err(runtime)?;
        let report = nearest_neighbor_report(&bank, cfg.ceo.metric).map_err(runtime)?;
        if json { report.to_json().map_err(runtime)? } else { report.to_text() }
    } else {
        let s = String::from_utf8(bytes)
            .map_err(|_| runtime(Error::Format(format!("{} is neither a bank nor a report", file.display()))))?;
        let report = EvalReport::from_json(&s).map_err(runtime)?;
        if json {
            report.to_json().map_err(runtime)?
        } else {
            format!("{}\n{}", report.to_text(), report.confusion_text())
        }
    };
    write!(out, "{text}").map_err(|e| runtime(e.into()))?;
    if !text.ends_with('\n') {
        writeln!(out).map_err(|e| runtime(e.into()))?;
    }
    Ok(())
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let mut args_utf8 = Vec::new();
    for a in args {
        match a.into().into_string() {
            Ok(s) => args_utf8.push(s),
            Err(a) => {
                eprintln!("error: argument {a:?} is not valid UTF-8");
                return 1;
            }
        }
    }
    let (rest, overrides) = match split_overrides(args_utf8) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cfg = match build_config(&cli, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let workers = match effective_workers(&cfg) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match cfg.to_toml() {
        Ok(t) => eprintln!("# effective configuration\n{t}"),
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    }
    let stdout = std::io::stdout();
    let outcome = par::with_workers(workers, || {
        let mut out = stdout.lock();
        match &cli.command {
            Command::Synth => run_synth(&cfg, &mut out),
            Command::Optimize => run_optimize(&cfg, &mut out),
            Command::Train => run_train(&cfg, &mut out),
            Command::Eval => run_eval(&cfg, &mut out),
            Command::Inspect { file, json } => run_inspect(&cfg, file, *json, &mut out),
        }
    });
    match outcome {
        Ok(()) => 0,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (rest, ov) = split_overrides(args("ezgzl train --ceo.alpha 0.3 --seed 4 --train.head-kind=mlp")).unwrap();
        assert_eq!(rest, args("ezgzl train --seed 4"));
        assert_eq!(
            ov,
            vec![("ceo.alpha".into(), "0.3".into()), ("train.head-kind".into(), "mlp".into())]
        );
        assert!(split_overrides(args("ezgzl train --ceo.alpha")).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(dispatch(args("ezgzl frobnicate")), 1);
        assert_eq!(dispatch(args("ezgzl")), 1);
        assert_eq!(dispatch(args("ezgzl eval --ceo.margin -1")), 1);
        assert_eq!(dispatch(args("ezgzl eval --ceo.alhpa 0.5")), 1);
        assert_eq!(dispatch(args("ezgzl --help")), 0);
    }

    #[test]
    fn eval_without_checkpoint_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(dispatch(args(&format!("ezgzl eval --out-dir {out}"))), 1);
    }
}
