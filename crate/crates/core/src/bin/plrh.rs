use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use plrh_core::config::RunConfig;
use plrh_core::data_model::{load_annotations, load_dataset, Dataset};
use plrh_core::evaluation::{compare_runs, evaluate, load_predictions, EvalReport};
use plrh_core::orchestrator::{
    load_inputs, run_sweep, Failure, Pipeline, StageReport, Workspace,
};
use plrh_core::SampleId;

#[derive(Parser)]
#[command(name = "plrh", version, about = "Rationale-heuristic prompting for knowledge-based VQA")]
struct Cli {
    /// Run configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_kv)]
    overrides: Vec<(String, String)>,
    /// Build and hash every prompt without calling the backend or writing the store.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Print summaries as one JSON object per line.
    #[arg(long, global = true)]
    json_lines: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset against its invariants.
    Validate(DatasetArgs),
    /// Generate rationales for the train split.
    Stage1,
    /// Select examples and generate rationales for the test split.
    Stage2,
    /// Predict answers for the test split.
    Stage3,
    /// Run all three stages.
    Run,
    /// Run the pipeline once per example count.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        n_values: Vec<usize>,
        /// Also run the no-rationale variant for every count.
        #[arg(long)]
        ablation: bool,
    },
    /// Score a predictions file.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Write the per-sample report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare runs given as NAME=PATH; the first is the baseline.
    Compare {
        #[arg(required = true, value_parser = parse_kv)]
        runs: Vec<(String, String)>,
        /// Score the paths as predictions against this dataset instead of
        /// reading them as evaluation reports.
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long)]
        csv: bool,
    },
    /// Print the ranked examples chosen for test samples.
    SelectDebug {
        /// Only this sample.
        #[arg(long)]
        sample: Option<String>,
    },
}

#[derive(Args)]
struct DatasetArgs {
    /// Samples file; falls back to the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

/// Exit status for a failure that stopped the command.
struct Fatal(String);

impl<E: std::fmt::Display> From<E> for Fatal {
    fn from(e: E) -> Self {
        Fatal(e.to_string())
    }
}

struct Out {
    json: bool,
}

impl Out {
    fn emit(&self, value: Value, human: impl FnOnce() -> String) {
        if self.json {
            println!("{value}");
        } else {
            print!("{}", human());
        }
    }

    fn stage(&self, r: &StageReport) {
        self.emit(
            json!({"event": "stage", "report": r}),
            || {
                format!(
                    "{}: {} written, {} cached, {} failed, {} backend calls, {} ms\n",
                    r.stage,
                    r.written,
                    r.cached,
                    r.failures.len(),
                    r.backend_calls,
                    r.elapsed_ms
                )
            },
        );
    }

    fn failures(&self, failures: &[Failure], report: Option<&Path>) {
        if failures.is_empty() {
            return;
        }
        let path = report.map(|p| p.display().to_string());
        self.emit(
            json!({"event": "failures", "count": failures.len(), "report": path}),
            || match &path {
                Some(p) => format!("{} failures, see {p}\n", failures.len()),
                None => format!("{} failures\n", failures.len()),
            },
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let out = Out { json: cli.json_lines };
    match dispatch(&cli, &out) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Fatal(msg)) => {
            if out.json {
                println!("{}", json!({"event": "error", "message": msg}));
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn config(cli: &Cli) -> Result<RunConfig, Fatal> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides, Path::new("."))?;
    Ok(cfg)
}

fn dataset_from(args: &DatasetArgs, cli: &Cli, need_features: bool) -> Result<Dataset, Fatal> {
    let cfg = config(cli)?;
    let samples = args
        .dataset
        .clone()
        .or(cfg.samples)
        .ok_or_else(|| Fatal("no dataset given (--dataset or dataset.samples)".into()))?;
    match args.features.clone().or(cfg.features) {
        Some(f) => Ok(load_dataset(&samples, &f)?),
        None if !need_features => Ok(load_annotations(&samples)?),
        None => Err(Fatal("no features given (--features or dataset.features)".into())),
    }
}

/// `Ok(false)` means the command finished with per-sample failures.
fn dispatch(cli: &Cli, out: &Out) -> Result<bool, Fatal> {
    match &cli.command {
        Command::Validate(args) => {
            let cfg = config(cli)?;
            let samples = args.dataset.clone().or(cfg.samples);
            let features = args.features.clone().or(cfg.features);
            let (Some(samples), Some(features)) = (samples, features) else {
                return Err(Fatal("validate needs both samples and features".into()));
            };
            let d = match load_dataset(&samples, &features) {
                Ok(d) => d,
                Err(plrh_core::DataError::Invalid(violations)) => {
                    for v in &violations {
                        out.emit(json!({"event": "violation", "violation": v.to_string()}), || format!("{v}\n"));
                    }
                    return Err(Fatal(format!("{} violations", violations.len())));
                }
                Err(e) => return Err(e.into()),
            };
            let (train, test) = (d.train().count(), d.test().count());
            out.emit(
                json!({"event": "validate", "dataset": d.name(), "train": train, "test": test,
                       "feature_dim": d.feature_dim(), "content_hash": d.content_hash()}),
                || format!("{}: {train} train, {test} test, dim {}, ok\n", d.name(), d.feature_dim()),
            );
            Ok(true)
        }
        Command::Stage1 | Command::Stage2 | Command::Stage3 | Command::Run => run_stages(cli, out),
        Command::Sweep { n_values, ablation } => {
            let cfg = config(cli)?;
            let inputs = load_inputs(&cfg)?;
            let client = cfg.build_client(&inputs.dataset)?;
            let res = run_sweep(&cfg, &inputs.dataset, &inputs.seeds, &client, n_values, *ablation, cli.dry_run)?;
            for r in &res.rows {
                out.emit(json!({"event": "sweep_cell", "row": r}), || {
                    format!("n={} {}: {:.1}% ({} backend calls)\n", r.n, r.variant.as_str(), r.accuracy * 100.0, r.backend_calls)
                });
            }
            if let Some(p) = &res.csv_path {
                out.emit(json!({"event": "sweep", "csv": p}), || format!("wrote {}\n", p.display()));
            }
            Ok(res.rows.iter().all(|r| r.complete))
        }
        Command::Evaluate { predictions, dataset, out: report_path } => {
            let d = dataset_from(dataset, cli, false)?;
            let preds = load_predictions(predictions)?;
            let report = evaluate(&preds, &d)?;
            if let (Some(p), false) = (report_path, cli.dry_run) {
                std::fs::write(p, report.to_jsonl())?;
            }
            out.emit(
                json!({"event": "evaluate", "dataset": report.dataset_name, "n_evaluated": report.n_evaluated,
                       "n_skipped": report.n_skipped, "mean_accuracy": report.mean_accuracy,
                       "accuracy_pct": format!("{:.1}", report.mean_pct())}),
                || format!("{:.1}\n", report.mean_pct()),
            );
            Ok(true)
        }
        Command::Compare { runs, dataset, csv } => {
            let d = if dataset.dataset.is_some() || cli.config.is_some() {
                Some(dataset_from(dataset, cli, false)?)
            } else {
                None
            };
            let mut reports = Vec::with_capacity(runs.len());
            for (name, path) in runs {
                let path = Path::new(path);
                let report = match &d {
                    Some(d) => evaluate(&load_predictions(path)?, d)?,
                    None => EvalReport::from_jsonl(&std::fs::read_to_string(path)?)?,
                };
                reports.push((name.clone(), report));
            }
            let table = compare_runs(&reports)?;
            if out.json {
                for r in &table.rows {
                    println!(
                        "{}",
                        json!({"event": "compare_row", "variant": r.variant,
                               "accuracy_pct": format!("{:.1}", r.accuracy_pct),
                               "delta_pct": format!("{:+.1}", r.delta_pct)})
                    );
                }
            } else if *csv {
                print!("{}", table.to_csv());
            } else {
                print!("{}", table.to_text());
            }
            Ok(true)
        }
        Command::SelectDebug { sample } => {
            let cfg = config(cli)?;
            let inputs = load_inputs(&cfg)?;
            let client = cfg.build_client(&inputs.dataset)?;
            let p = Pipeline::new(&cfg, &inputs.dataset, &inputs.seeds, &client);
            let wanted = sample.as_deref().map(SampleId::new).transpose()?;
            if let Some(id) = &wanted {
                if inputs.dataset.get(id).is_none() {
                    return Err(Fatal(format!("unknown sample `{id}`")));
                }
            }
            for s in inputs.dataset.test() {
                if wanted.as_ref().is_some_and(|w| w != &s.id) {
                    continue;
                }
                let sel = p.select(s)?;
                for (rank, e) in sel.selected.iter().enumerate() {
                    out.emit(
                        json!({"query_id": s.id, "rank": rank + 1, "sample_id": e.sample_id, "score": e.score}),
                        || format!("{}\t{}\t{}\t{:.6}\n", s.id, rank + 1, e.sample_id, e.score),
                    );
                }
            }
            Ok(true)
        }
    }
}

fn run_stages(cli: &Cli, out: &Out) -> Result<bool, Fatal> {
    let cfg = config(cli)?;
    let inputs = load_inputs(&cfg)?;
    let client = cfg.build_client(&inputs.dataset)?;
    let p = Pipeline::new(&cfg, &inputs.dataset, &inputs.seeds, &client);
    let mut ws = Workspace::open(&cfg.store, cli.dry_run)?;
    if ws.store().corrupt_lines() > 0 {
        log::warn!("{}: skipped {} corrupt lines", ws.dir().display(), ws.store().corrupt_lines());
    }
    let failures: Vec<Failure> = match cli.command {
        Command::Stage1 => {
            let r = p.run_stage1(&mut ws)?;
            out.stage(&r);
            r.failures
        }
        Command::Stage2 => {
            let train = p.train_rationales(&ws)?;
            let r = p.run_stage2(&train, &mut ws)?;
            out.stage(&r);
            r.failures
        }
        Command::Stage3 => {
            let train = p.train_rationales(&ws)?;
            let r = p.run_stage3(&train, &mut ws)?;
            out.stage(&r);
            let preds = p.collect_predictions(&r, &ws);
            let (pred_path, fail_path) = p.write_artifacts(&ws, &preds, &r.failures)?;
            report_predictions(out, preds.len(), pred_path.as_deref());
            out.failures(&r.failures, fail_path.as_deref());
            return Ok(r.failures.is_empty() && preds.len() == inputs.dataset.test().count());
        }
        _ => {
            let s = p.run_all(&mut ws, None)?;
            out.stage(&s.stage1);
            if let Some(r) = &s.stage2 {
                out.stage(r);
            }
            out.stage(&s.stage3);
            report_predictions(out, s.predictions.len(), s.predictions_path.as_deref());
            out.failures(&s.failures, s.failures_path.as_deref());
            let by_stage: BTreeMap<String, usize> = s.failures.iter().fold(BTreeMap::new(), |mut m, f| {
                *m.entry(f.stage.to_string()).or_default() += 1;
                m
            });
            out.emit(
                json!({"event": "run", "backend_calls": s.backend_calls(), "predictions": s.predictions.len(),
                       "unpredicted": s.unpredicted, "failures_by_stage": by_stage, "elapsed_ms": s.elapsed_ms,
                       "dry_run": cli.dry_run}),
                || format!("{} backend calls, {} ms\n", s.backend_calls(), s.elapsed_ms),
            );
            return Ok(s.is_complete());
        }
    };
    Ok(failures.is_empty())
}

fn report_predictions(out: &Out, n: usize, path: Option<&Path>) {
    let shown = path.map(|p| p.display().to_string());
    out.emit(json!({"event": "predictions", "count": n, "path": shown}), || match &shown {
        Some(p) => format!("{n} predictions written to {p}\n"),
        None => format!("{n} predictions (dry run, nothing written)\n"),
    });
}
