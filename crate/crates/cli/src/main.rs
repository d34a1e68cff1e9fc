// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use dclab_core::compliance::Verdict;
use dclab_core::exec::{run_with_source, World};
use dclab_core::par;
use dclab_core::rng::SeededSource;
use dclab_core::scenario::{scenario_hash, CheckError, ModeName, Overrides, Report, ScenarioFile};

const EXIT_PASS: u8 = 0;
const EXIT_FAIL: u8 = 1;
const EXIT_SCHEMA: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "dclab", version, about = "Deletion-compliance lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum WorldArg {
    Real,
    Ideal,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sample,
    Enumerate,
}

#[derive(clap::Args)]
struct CheckOpts {
    /// Seed for sampling mode; overrides the file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    margin: Option<f64>,
    /// Worker threads. DCLAB_JOBS takes precedence.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Runs one execution and prints its trace.
    Run {
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "real")]
        world: WorldArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Runs the scenario's compliance check and writes a report.
    Check {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: CheckOpts,
    },
    /// Checks every scenario in a directory.
    Suite {
        #[arg(long, default_value = "scenarios")]
        dir: PathBuf,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
        #[command(flatten)]
        opts: CheckOpts,
    },
}

impl CheckOpts {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            mode: self.mode.map(|m| match m {
                ModeArg::Sample => ModeName::Sample,
                ModeArg::Enumerate => ModeName::Enumerate,
            }),
            margin: self.margin,
        }
    }

    fn jobs(&self) -> anyhow::Result<usize> {
        match std::env::var("DCLAB_JOBS") {
            Ok(v) => v.trim().parse().context("DCLAB_JOBS must be a positive integer"),
            Err(_) => Ok(self.jobs.unwrap_or(0)),
        }
    }
}

/// Failure of one command, with its exit code.
struct Exit(u8, String);

impl From<anyhow::Error> for Exit {
    fn from(e: anyhow::Error) -> Self {
        Exit(EXIT_RUNTIME, format!("{e:#}"))
    }
}

fn load(path: &Path) -> Result<(ScenarioFile, String), Exit> {
    let bytes = fs::read(path).map_err(|e| Exit(EXIT_SCHEMA, format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Exit(EXIT_SCHEMA, format!("{}: not UTF-8", path.display())))?;
    let file = ScenarioFile::parse(&text).map_err(|e| Exit(EXIT_SCHEMA, format!("{}: {e}", path.display())))?;
    Ok((file, scenario_hash(&bytes)))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scenario".into())
}

fn check_error(path: &Path, e: CheckError) -> Exit {
    let code = match e {
        CheckError::Scenario(_) => EXIT_SCHEMA,
        CheckError::Compliance(_) => EXIT_RUNTIME,
    };
    Exit(code, format!("{}: {e}", path.display()))
}

fn verdict_code(v: Verdict) -> u8 {
    match v {
        Verdict::Pass => EXIT_PASS,
        Verdict::Fail | Verdict::Inconclusive => EXIT_FAIL,
    }
}

fn cmd_run(path: &Path, world: WorldArg, seed: Option<u64>) -> Result<u8, Exit> {
    let (file, _) = load(path)?;
    let seed = seed.or(file.check.seed).unwrap_or(0);
    let mut cfg = file.experiment(None).config(seed);
    cfg.trace = true;
    let world = match world {
        WorldArg::Real => World::Real,
        WorldArg::Ideal => World::Ideal,
    };
    let out = run_with_source(&cfg, world, &mut SeededSource::new(seed))
        .map_err(|e| Exit(EXIT_RUNTIME, format!("{}: {e}", path.display())))?;
    println!("# world={world:?} seed={seed} lambda={}", file.lambda.get());
    for line in out.trace.unwrap_or_default() {
        println!("{line}");
    }
    println!(
        "# activations={} sessions={} secret_draws={}",
        out.stats.activations, out.stats.sessions, out.stats.collector_secret_draws
    );
    println!("state_x {}", hex::encode(&out.state_x));
    Ok(EXIT_PASS)
}

fn summary_line(r: &Report) -> String {
    format!(
        "{:?} tv={:.6} ci={:.6} bound={}={:.6} margin={} n={}",
        r.result.verdict,
        r.result.tv_estimate,
        r.result.ci_halfwidth,
        r.result.bound.name,
        r.result.bound.value,
        r.result.margin,
        r.result.n_samples
    )
}

fn cmd_check(path: &Path, out: Option<&Path>, opts: &CheckOpts) -> Result<u8, Exit> {
    let (file, hash) = load(path)?;
    let jobs = opts.jobs()?;
    let name = file.display_name(&stem(path));
    let report = par::with_jobs(jobs, || file.check(&name, &hash, &opts.overrides())).map_err(|e| check_error(path, e))?;
    let text = serde_json::to_string_pretty(&report).context("serializing report")?;
    match out {
        Some(p) => {
            fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?;
            println!("{name}: {}", summary_line(&report));
        }
        None => println!("{text}"),
    }
    Ok(verdict_code(report.result.verdict))
}

/// `name`, then `name-2`, `name-3`, ... for repeats.
fn unique_name(seen: &mut HashMap<String, usize>, name: &str) -> String {
    let mut candidate = name.to_string();
    loop {
        let n = seen.entry(candidate.clone()).or_insert(0);
        *n += 1;
        if *n == 1 {
            return candidate;
        }
        candidate = format!("{name}-{}", *n);
    }
}

fn safe_file_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn cmd_suite(dir: &Path, out: &Path, opts: &CheckOpts) -> Result<u8, Exit> {
    let jobs = opts.jobs()?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut seen = HashMap::new();
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    let (mut pass, mut fail, mut inconclusive, mut errors) = (0, 0, 0, 0);
    let mut worst_error = 0;
    for path in &files {
        let result = load(path).and_then(|(file, hash)| {
            let name = unique_name(&mut seen, &safe_file_name(&file.display_name(&stem(path))));
            par::with_jobs(jobs, || file.check(&name, &hash, &opts.overrides()))
                .map(|r| (name, r))
                .map_err(|e| check_error(path, e))
        });
        match result {
            Ok((name, report)) => {
                let report_path = out.join(format!("{name}.json"));
                let text = serde_json::to_string_pretty(&report).context("serializing report")?;
                fs::write(&report_path, text + "\n").with_context(|| format!("writing {}", report_path.display()))?;
                match report.result.verdict {
                    Verdict::Pass => pass += 1,
                    Verdict::Fail => fail += 1,
                    Verdict::Inconclusive => inconclusive += 1,
                }
                rows.push([
                    name.clone(),
                    format!("{:?}", report.result.verdict),
                    format!("{:?}", report.result.mode),
                    format!("{:.6}", report.result.tv_estimate),
                    format!("{:.6}", report.result.ci_halfwidth),
                    format!("{:.6}", report.result.bound.value),
                ]);
                entries.push(json!({
                    "name": name,
                    "file": path.display().to_string(),
                    "verdict": report.result.verdict,
                    "tv_estimate": report.result.tv_estimate,
                    "ci_halfwidth": report.result.ci_halfwidth,
                    "bound": report.result.bound,
                    "report": report_path.display().to_string(),
                }));
            }
            Err(Exit(code, msg)) => {
                errors += 1;
                worst_error = worst_error.max(code);
                eprintln!("{msg}");
                let name = unique_name(&mut seen, &safe_file_name(&stem(path)));
                rows.push([name.clone(), "Error".into(), "-".into(), "-".into(), "-".into(), "-".into()]);
                entries.push(json!({ "name": name, "file": path.display().to_string(), "error": msg, "exit_code": code }));
            }
        }
    }

    let summary = json!({
        "schema": "dclab-suite/1",
        "scenarios": files.len(),
        "pass": pass,
        "fail": fail,
        "inconclusive": inconclusive,
        "errors": errors,
        "entries": entries,
    });
    let text = serde_json::to_string_pretty(&summary).context("serializing summary")?;
    fs::write(out.join("summary.json"), text + "\n").context("writing summary.json")?;

    let header = ["scenario", "verdict", "mode", "tv", "ci", "bound"].map(String::from);
    let mut widths = header.clone().map(|h| h.len());
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut table = String::new();
    for r in std::iter::once(&header).chain(&rows) {
        let cells: Vec<String> = r.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
        table.push_str(cells.join("  ").trim_end());
        table.push('\n');
    }
    table.push_str(&format!(
        "{} scenarios: {pass} pass, {fail} fail, {inconclusive} inconclusive, {errors} errors\n",
        files.len()
    ));
    fs::write(out.join("summary.txt"), &table).context("writing summary.txt")?;
    print!("{table}");

    Ok(if fail + inconclusive > 0 { EXIT_FAIL } else { worst_error })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run { scenario, world, seed } => cmd_run(scenario, *world, *seed),
        Cmd::Check { scenario, out, opts } => cmd_check(scenario, out.as_deref(), opts),
        Cmd::Suite { dir, out, opts } => cmd_suite(dir, out, opts),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Exit(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
