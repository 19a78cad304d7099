use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use tfms_core::baseline::Limit;
use tfms_core::config::RunConfig;
use tfms_core::harness::{compare, generate, run, MatcherKind, SimReport, Workload, WorkloadSpec};

#[derive(Parser)]
#[command(name = "tfms", version, about = "Generate ad-matching workloads, replay them, compare matchers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate event and traffic logs from a workload spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for events.jsonl and traffic.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replay logs against the selected matchers and write reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset of oracle, truncated, tfms.
        #[arg(long, value_delimiter = ',')]
        matchers: Option<Vec<MatcherKind>>,
        #[arg(long)]
        window_mins: Option<u64>,
        /// Near-line cache length.
        #[arg(long)]
        topn: Option<usize>,
        /// Crowds kept per channel by the truncated matcher.
        #[arg(long)]
        m: Option<usize>,
        /// Ads kept per crowd by the truncated matcher.
        #[arg(long)]
        k: Option<usize>,
        /// Overrides the scoring seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Relative deltas of report A over report B.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Matcher to read from A when it holds several.
        #[arg(long)]
        a_matcher: Option<String>,
        /// Matcher to read from B when it holds several.
        #[arg(long)]
        b_matcher: Option<String>,
        /// Print CSV instead of a table.
        #[arg(long)]
        csv: bool,
    },
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading spec {}", spec_path.display()))?;
    let mut spec = WorkloadSpec::from_toml(&text).with_context(|| format!("invalid spec {}", spec_path.display()))?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let workload = generate(&spec)?;
    workload.write(out)?;
    println!(
        "wrote {} events and {} visits to {}",
        workload.events.len(),
        workload.traffic.len(),
        out.display()
    );
    println!("checksum {}", workload.checksum());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    config_path: &Path,
    out: Option<PathBuf>,
    matchers: Option<Vec<MatcherKind>>,
    window_mins: Option<u64>,
    topn: Option<usize>,
    m: Option<usize>,
    k: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(out) = out {
        cfg.paths.output = out;
    }
    if let Some(mut matchers) = matchers {
        matchers.sort();
        matchers.dedup();
        cfg.matchers = matchers;
    }
    if let Some(w) = window_mins {
        cfg.tfms.window_mins = w;
    }
    if let Some(n) = topn {
        cfg.tfms.n = n;
    }
    if let Some(m) = m {
        cfg.truncation.m = Limit::At(m);
    }
    if let Some(k) = k {
        cfg.truncation.k = Limit::At(k);
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let sim = cfg.sim();
    sim.validate()?;

    let workload = Workload::read(&cfg.paths.workload)
        .with_context(|| format!("loading logs from {}", cfg.paths.workload.display()))?;
    let report = run(&workload, &sim)?;

    let out = &cfg.paths.output;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("report.json"), &report.to_json())?;
    write(&out.join("report.csv"), &report.to_csv())?;
    for name in report.matchers.keys() {
        let single = report.only(name).expect("matcher present");
        write(&out.join(format!("report.{name}.json")), &single.to_json())?;
    }

    let mut table = String::new();
    let mut csv = String::new();
    let baseline = MatcherKind::Truncated.as_str();
    if report.matchers.contains_key(baseline) {
        for name in report.matchers.keys().filter(|n| n.as_str() != baseline) {
            let c = compare(&report, &report, Some(name), Some(baseline))?;
            table.push_str(&c.to_table());
            table.push('\n');
            let body = c.to_csv();
            if csv.is_empty() {
                csv.push_str(&body);
            } else {
                csv.extend(body.lines().skip(1).map(|l| format!("{l}\n")));
            }
        }
    }
    if !csv.is_empty() {
        write(&out.join("comparison.csv"), &csv)?;
    }

    for (name, m) in &report.matchers {
        println!(
            "{name:<10} rpm {:>10.3}  pairs/request {:>10.1}  recall@{} {:.3}",
            m.rpm, m.pairs_scored_per_request, sim.truncation.n, m.recall_at_n
        );
    }
    if !table.is_empty() {
        println!();
        print!("{table}");
    }
    println!(
        "cost: online_parallel {:.3}, tfms_full {:.3} (avg visits {:.3})",
        report.cost.scale("online_parallel"),
        report.cost.scale("tfms_full"),
        report.cost.avg_visits
    );
    println!("reports written to {}", out.display());
    Ok(())
}

fn cmd_compare(a: &Path, b: &Path, a_matcher: Option<&str>, b_matcher: Option<&str>, csv: bool) -> Result<()> {
    let ra = SimReport::load(a).with_context(|| format!("loading report {}", a.display()))?;
    let rb = SimReport::load(b).with_context(|| format!("loading report {}", b.display()))?;
    let c = compare(&ra, &rb, a_matcher, b_matcher)?;
    if csv {
        print!("{}", c.to_csv());
    } else {
        print!("{}", c.to_table());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { spec, out, seed } => cmd_gen(&spec, &out, seed),
        Command::Run {
            config,
            out,
            matchers,
            window_mins,
            topn,
            m,
            k,
            seed,
        } => {
            if matchers.as_ref().is_some_and(|m| m.is_empty()) {
                bail!("--matchers needs at least one matcher");
            }
            cmd_run(&config, out, matchers, window_mins, topn, m, k, seed)
        }
        Command::Compare {
            a,
            b,
            a_matcher,
            b_matcher,
            csv,
        } => cmd_compare(&a, &b, a_matcher.as_deref(), b_matcher.as_deref(), csv),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
