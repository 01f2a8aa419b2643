use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clstream::metrics::{
    band_report, moving_average, MetricsLog, TaskRecord, DEFAULT_BAND_EDGES, MOVING_AVERAGE_WINDOW,
};
use clstream::runner::{
    parse_run_csv, run_distractor_probe, run_fixed_sequence_repeats, run_iid_baseline, run_scenario, with_suffix,
    CsvRow, RunConfig, RunOutcome,
};
use clstream::{Error, Result};

#[derive(Parser)]
#[command(
    name = "clstream",
    version,
    about = "Long-sequence class-incremental stream experiments"
)]
struct Cli {
    /// Output path prefix; overrides run.out from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a scenario and write CSV.
    Run { config: PathBuf },
    /// Train the IID baseline for every seed and print its accuracy.
    Iid { config: PathBuf },
    /// Grid over learning rates and a seed range.
    Sweep {
        config: PathBuf,
        /// Comma-separated learning rates.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.01, 0.001])]
        lr: Vec<f64>,
        /// Inclusive seed range `k..m`.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Summarize run CSVs; with --bands, accuracy per frequency band.
    Report {
        csv: Vec<PathBuf>,
        #[arg(long)]
        bands: bool,
        /// Tasks averaged for the band report, counted from the end.
        #[arg(long, default_value_t = 100)]
        last: usize,
    },
    /// Distractor retention probe (zero-shot vs one-epoch fine-tune).
    Probe { config: PathBuf },
    /// Repeat the fixed pair sequence, training each task to a plateau.
    Repeat {
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        cycles: usize,
    },
}

fn load(config: &Path, out: &Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(config)?;
    if out.is_some() {
        cfg.run.out = out.clone();
    }
    Ok(cfg)
}

fn parse_seed_range(s: &str) -> Result<Vec<u64>> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| Error::Config(format!("seed range {s:?} is not k..m")))?;
    let a: u64 = a.trim().parse().map_err(|_| Error::Config(format!("bad seed {a:?}")))?;
    let b: u64 = b.trim().parse().map_err(|_| Error::Config(format!("bad seed {b:?}")))?;
    if a > b {
        return Err(Error::Config(format!("empty seed range {s:?}")));
    }
    Ok((a..=b).collect())
}

fn summarize(outcome: &RunOutcome) {
    for s in &outcome.seeds {
        match &s.result {
            Ok(run) => {
                let series = run.log.overall_series();
                let ma = moving_average(&series, MOVING_AVERAGE_WINDOW);
                let forgetting = clstream::metrics::total_forgetting(&run.log).ok();
                println!(
                    "seed {}: final acc {:.4}, {}-task mean {:.4}, total forgetting {}, compute overhead {:.4}",
                    s.seed,
                    series.last().copied().unwrap_or(0.0),
                    MOVING_AVERAGE_WINDOW,
                    ma.last().copied().unwrap_or(0.0),
                    forgetting.map_or("n/a".to_string(), |f| format!("{f:.5}")),
                    run.overhead().unwrap_or(f64::NAN),
                );
            }
            Err(e) => println!("seed {}: failed: {e}", s.seed),
        }
    }
}

fn report(paths: &[PathBuf], bands: bool, last: usize) -> Result<()> {
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let rows = parse_run_csv(&text)?;
        let mut by_seed: BTreeMap<u64, Vec<CsvRow>> = BTreeMap::new();
        for r in rows {
            by_seed.entry(r.seed).or_default().push(r);
        }
        println!("{}", path.display());
        for (seed, rows) in &by_seed {
            let series: Vec<f64> = rows.iter().map(|r| r.overall_acc).collect();
            let ma = moving_average(&series, MOVING_AVERAGE_WINDOW);
            let lf: Vec<f64> = rows.iter().filter_map(|r| r.local_forgetting).collect();
            let total = (!lf.is_empty()).then(|| lf.iter().sum::<f64>() / lf.len() as f64);
            println!(
                "  seed {seed}: tasks {}, final acc {:.4}, {}-task mean {:.4}, total forgetting {}, replayed {}",
                rows.len(),
                series.last().copied().unwrap_or(0.0),
                MOVING_AVERAGE_WINDOW,
                ma.last().copied().unwrap_or(0.0),
                total.map_or("n/a".to_string(), |f| format!("{f:.5}")),
                rows.last().map_or(0, |r| r.replayed_count_cum)
            );
        }
        if bands {
            let prefix = path.with_extension("");
            band_lines(&prefix, &by_seed, last)?;
        }
    }
    Ok(())
}

fn read_table(path: &Path) -> Result<BTreeMap<u64, Vec<Vec<f64>>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut out: BTreeMap<u64, Vec<Vec<f64>>> = BTreeMap::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let mut fields = line.split(',');
        let seed: u64 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config(format!("bad row in {}", path.display())))?;
        let vals = fields
            .map(|v| v.parse::<f64>().map_err(|_| Error::Config(format!("bad value {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        out.entry(seed).or_default().push(vals);
    }
    Ok(out)
}

fn band_lines(prefix: &Path, by_seed: &BTreeMap<u64, Vec<CsvRow>>, last: usize) -> Result<()> {
    let perclass = read_table(&with_suffix(prefix, ".perclass.csv"))?;
    let probs = read_table(&with_suffix(prefix, ".probs.csv"))?;
    for (seed, rows) in by_seed {
        let (Some(matrix), Some(p)) = (perclass.get(seed), probs.get(seed).and_then(|v| v.first())) else {
            continue;
        };
        let c = p[0] as usize;
        let mut log = MetricsLog::new();
        for (row, accs) in rows.iter().zip(matrix) {
            log.push(TaskRecord {
                t: row.task,
                overall_acc: row.overall_acc,
                per_class_acc: accs[1..].to_vec(),
                classes_in_task: row.classes_in_task.clone(),
                gradient_steps: row.gradient_steps_cum,
                replayed_classes: Vec::new(),
                cumulative_samples: row.samples_cum,
            })?;
        }
        let end = rows.last().map_or(0, |r| r.task + 1);
        let window = (end.saturating_sub(last), end);
        let report = band_report(&log, &p[1..], c, &DEFAULT_BAND_EDGES, window)?;
        for band in &report.bands {
            println!(
                "  seed {seed} band [{:e}, {:e}): {} classes, mean acc {}",
                band.low,
                band.high,
                band.class_count(),
                band.mean_accuracy.map_or("absent".to_string(), |a| format!("{a:.4}"))
            );
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load(&config, &cli.out)?;
            summarize(&run_scenario(&cfg)?);
        }
        Command::Iid { config } => {
            let cfg = load(&config, &cli.out)?;
            for &seed in &cfg.run.seeds {
                println!("seed {seed}: iid accuracy {:.4}", run_iid_baseline(&cfg, seed)?);
            }
        }
        Command::Sweep { config, lr, seeds } => {
            let base = load(&config, &cli.out)?;
            for rate in lr {
                let mut cfg = base.clone();
                cfg.train.lr = rate;
                if let Some(range) = &seeds {
                    cfg.run.seeds = parse_seed_range(range)?;
                }
                if let Some(out) = &base.run.out {
                    cfg.run.out = Some(with_suffix(out, &format!(".lr{rate}")));
                }
                cfg.validate()?;
                println!("lr {rate}");
                summarize(&run_scenario(&cfg)?);
            }
        }
        Command::Report { csv, bands, last } => report(&csv, bands, last)?,
        Command::Probe { config } => {
            let cfg = load(&config, &cli.out)?;
            for &seed in &cfg.run.seeds {
                for p in run_distractor_probe(&cfg, seed)? {
                    println!(
                        "seed {seed} task {} {:?} distractors {}: zero-shot {:.4}, meta-test {:.4}",
                        p.t, p.kind, p.distractors, p.zero_shot, p.meta_test
                    );
                }
            }
        }
        Command::Repeat { config, cycles } => {
            let cfg = load(&config, &cli.out)?;
            for &seed in &cfg.run.seeds {
                let run = run_fixed_sequence_repeats(&cfg, seed, cycles)?;
                let means: Vec<String> = (0..cycles)
                    .map(|k| format!("{:.4}", run.cycle_mean(k).unwrap_or(f64::NAN)))
                    .collect();
                println!(
                    "seed {seed}: cycle means [{}], {} unconverged tasks",
                    means.join(", "),
                    run.unconverged.len()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
