use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use lazyinf::experiment::{Preset, RunMetrics};
use lazyinf::federation::OutcomeSummary;
use lazyinf::influence::{agreement_study, AgreementConfig, AgreementReport};
use lazyinf::metrics::sweep::{cell_label, sweep, MeanStd, RunRecord, SweepAxis, SweepCell, SweepParam, SweepResult};
use lazyinf::model::FitReport;

mod settings;

use settings::{Resolved, Seeds, Settings};

/// Agreement below this fails `verify`.
const AGREEMENT_TARGET: f64 = 0.9;

#[derive(Parser)]
#[command(name = "lazyinf", version, about = "Simulate private lazy-influence filtering of federated training data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration over the given seeds.
    Run(Common),
    /// Run a preset's parameter grid (or `--axis` grids) over the given seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Extra grid axis such as `epsilon=0.75,1,2`; replaces the preset's axes.
        #[arg(long = "axis", value_name = "PARAM=V1,V2")]
        axes: Vec<String>,
    },
    /// Check lazy signs against the exact retraining oracle.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// Flat JSON config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

impl Common {
    fn resolve(&self, default_seeds: Seeds) -> anyhow::Result<Resolved> {
        let file = self.config.as_deref().map(Settings::from_file).transpose()?;
        Settings::resolve(file.as_ref(), &self.settings, &default_seeds)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(common) => run(common),
        Command::Sweep { common, axes } => run_sweep(common, axes),
        Command::Verify(common) => verify(common),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn stage<T>(name: &str, result: anyhow::Result<T>) -> anyhow::Result<T> {
    result.with_context(|| format!("stage `{name}` failed"))
}

fn prepare_out(resolved: &Resolved) -> anyhow::Result<()> {
    fs::create_dir_all(&resolved.out).with_context(|| format!("cannot create {}", resolved.out.display()))?;
    write_json(&resolved.out.join("config.json"), &resolved.snapshot)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("cannot write {}", path.display()))?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot write {}", path.display()))?))
}

#[derive(Serialize)]
struct OutcomeFile<'a> {
    seed: u64,
    rounds: Vec<OutcomeSummary>,
    metrics: &'a RunMetrics,
    warmup_fit: FitReport,
    warnings: &'a [String],
}

fn run(common: &Common) -> anyhow::Result<ExitCode> {
    let resolved = stage("config", common.resolve(Seeds(vec![0])))?;
    stage("write-config", prepare_out(&resolved))?;
    let out = &resolved.out;
    let mut runs = Vec::new();
    for &seed in &resolved.seeds {
        let sim = stage("simulate", resolved.experiment.run(seed).with_context(|| format!("seed {seed}")))?;
        let metrics = stage("metrics", RunMetrics::of(&sim).map_err(Into::into))?;
        stage("write-outcome", (|| -> anyhow::Result<()> {
            let file = OutcomeFile {
                seed,
                rounds: sim.rounds.iter().map(|r| r.summary()).collect(),
                metrics: &metrics,
                warmup_fit: sim.warmup_fit,
                warnings: &sim.warnings,
            };
            write_json(&out.join(format!("outcome_{seed}.json")), &file)?;
            write_json(&out.join(format!("partition_{seed}.json")), &sim.partition_report)?;
            let mut votes = create(&out.join(format!("votes_{seed}.csv")))?;
            for round in &sim.rounds {
                round.write_votes_csv(&mut votes)?;
            }
            Ok(())
        })())?;
        for warning in &sim.warnings {
            eprintln!("warning (seed {seed}): {warning}");
        }
        let m = &metrics.filtration;
        println!(
            "seed {seed}: recall {:.3} precision {:.3} accuracy {:.3} model accuracy {:.3} -> {:.3}",
            m.recall, m.precision, m.accuracy, metrics.base_accuracy, metrics.final_accuracy
        );
        runs.push(RunRecord { seed, metrics: Some(metrics), extra: BTreeMap::new(), error: None });
    }
    let result = SweepResult {
        axes: Vec::new(),
        runs_per_cell: runs.len(),
        cells: vec![SweepCell::new(cell_label(&[]), Vec::new(), runs)],
    };
    stage("write-metrics", write_reports(&resolved, &result))?;
    Ok(ExitCode::SUCCESS)
}

fn parse_axis(text: &str) -> anyhow::Result<SweepAxis> {
    let Some((name, values)) = text.split_once('=') else {
        bail!("axis {text:?} should look like `epsilon=0.75,1,2`");
    };
    let param = SweepParam::parse(name.trim())?;
    let values = values
        .split(',')
        .map(|v| match v.trim() {
            "iid" | "inf" => Ok(f64::INFINITY),
            v => v.parse::<f64>().with_context(|| format!("bad value {v:?} on axis {name}")),
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(SweepAxis { param, values })
}

fn run_sweep(common: &Common, axis_args: &[String]) -> anyhow::Result<ExitCode> {
    let resolved = stage("config", common.resolve(Seeds((0..8).collect())))?;
    let axes = if axis_args.is_empty() {
        resolved.preset.axes()
    } else {
        stage("config", axis_args.iter().map(|a| parse_axis(a)).collect::<anyhow::Result<Vec<_>>>())?
    };
    stage("write-config", prepare_out(&resolved))?;
    let result = stage(
        "sweep",
        sweep(&resolved.experiment, &axes, &resolved.seeds, resolved.preset.wants_oracle()).map_err(Into::into),
    )?;
    for cell in &result.cells {
        let show = |k: &str| cell.stat(k).map_or("-".to_string(), |s| format!("{:.3}±{:.3}", s.mean, s.std));
        println!("{}: recall {} precision {} f1 {}", cell.label, show("recall"), show("precision"), show("f1"));
    }
    stage("write-metrics", write_reports(&resolved, &result))?;
    if resolved.preset == Preset::Fig2 {
        let point_fraction = resolved.experiment.federation.corruption.corrupt_point_fraction;
        stage("write-metrics", write_fig2(&resolved.out.join("fig2.csv"), &result, point_fraction))?;
    }
    let failures = result.failures();
    if failures > 0 {
        eprintln!("error: stage `sweep`: {failures} run(s) failed; see summary.json");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

/// A number, or a string for values JSON cannot hold.
fn json_number(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or_else(|| Value::String(if v.is_infinite() { "iid".into() } else { v.to_string() }), Value::Number)
}

#[derive(Serialize)]
struct CellSummary<'a> {
    cell: &'a str,
    params: BTreeMap<&'static str, Value>,
    runs: usize,
    failures: usize,
    errors: Vec<String>,
    metrics: &'a BTreeMap<String, MeanStd>,
}

#[derive(Serialize)]
struct Summary<'a> {
    preset: &'static str,
    seeds: &'a [u64],
    cells: Vec<CellSummary<'a>>,
}

fn write_reports(resolved: &Resolved, result: &SweepResult) -> anyhow::Result<()> {
    let preset = resolved.preset.name();
    result.write_metrics_csv(preset, create(&resolved.out.join("metrics.csv"))?)?;
    let cells = result
        .cells
        .iter()
        .map(|c| CellSummary {
            cell: &c.label,
            params: c.coords.iter().map(|(p, v)| (p.name(), json_number(*v))).collect(),
            runs: c.runs.len(),
            failures: c.runs.iter().filter(|r| r.error.is_some()).count(),
            errors: c.runs.iter().filter_map(|r| r.error.as_ref().map(|e| format!("seed {}: {e}", r.seed))).collect(),
            metrics: &c.stats,
        })
        .collect();
    write_json(&resolved.out.join("summary.json"), &Summary { preset, seeds: &resolved.seeds, cells })
}

/// `corrupt_frac,mislabel_rate,<metric>_mean,<metric>_std,...` per cell. The
/// mislabel rate is the share of all training labels that were changed.
fn write_fig2(path: &Path, result: &SweepResult, point_fraction: f64) -> anyhow::Result<()> {
    let metrics = ["unfiltered_accuracy", "oracle_accuracy", "final_model_accuracy"];
    let mut out = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["corrupt_frac".to_string(), "mislabel_rate".to_string()];
    for m in metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    out.write_record(&header)?;
    for cell in &result.cells {
        let frac = cell.coords.iter().find(|(p, _)| *p == SweepParam::CorruptFraction).map_or(f64::NAN, |c| c.1);
        let mut row = vec![frac.to_string(), (frac * point_fraction).to_string()];
        for m in metrics {
            match cell.stat(m) {
                Some(s) => row.extend([s.mean.to_string(), s.std.to_string()]),
                None => row.extend([String::new(), String::new()]),
            }
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct VerifyFile<'a> {
    target: f64,
    passed: bool,
    config: &'a AgreementConfig,
    report: &'a AgreementReport,
}

fn verify(common: &Common) -> anyhow::Result<ExitCode> {
    let resolved = stage("config", common.resolve(Seeds(vec![0])))?;
    stage("write-config", prepare_out(&resolved))?;
    let cfg = AgreementConfig { instances: resolved.instances, ..AgreementConfig::default() };
    let base_seed = resolved.seeds.first().copied().unwrap_or(0);
    let report = stage("verify", agreement_study(&cfg, base_seed).map_err(Into::into))?;
    let passed = report.agreement >= AGREEMENT_TARGET;
    println!(
        "sign agreement {:.3} over {} instances ({} unconverged fits): {}",
        report.agreement,
        report.instances.len(),
        report.unconverged,
        if passed { "PASS" } else { "FAIL" }
    );
    stage(
        "write-verify",
        write_json(&resolved.out.join("verify.json"), &VerifyFile { target: AGREEMENT_TARGET, passed, config: &cfg, report: &report }),
    )?;
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(3) })
}
