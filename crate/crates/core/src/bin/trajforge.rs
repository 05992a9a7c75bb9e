use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trajforge::config::PipelineConfig;
use trajforge::dataset::{
    read_dataset, read_pose_table, read_queries, write_dataset, write_queries,
};
use trajforge::localize::{evaluate, is_low_frequency, lowfreq_score, read_pgm, THRESHOLDS};
use trajforge::pipeline::{
    estimates_from_csv, estimates_to_csv, localize_queries, run_ba, run_merge, run_slam,
};
use trajforge::simulator::simulate;
use trajforge::Error;

#[derive(Parser)]
#[command(
    name = "trajforge",
    version,
    about = "Ground-truth pose generation and localization evaluation"
)]
struct Cli {
    /// Worker threads (falls back to TRAJFORGE_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic dataset, query set and ground truth.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Undistortion and one optimized pose graph per sequence.
    Slam {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unified graph over all sequences plus trajectory splines.
    Merge {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long = "in", num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Triangulation and spline-prior bundle adjustment.
    Ba {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PnP-RANSAC for every query against a triangulated map.
    Localize {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy at the standard position/orientation thresholds.
    Evaluate {
        #[arg(long)]
        est: PathBuf,
        /// Query directory or pose table with the true poses.
        #[arg(long)]
        gt: PathBuf,
        /// Per-query error CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Low-frequency score of every PGM image in a directory.
    Lowfreq {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        images: PathBuf,
    },
}

fn load_config(c: &ConfigArg) -> trajforge::Result<PipelineConfig> {
    match &c.config {
        Some(p) => PipelineConfig::from_file(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn threads(flag: Option<usize>) -> Result<usize, String> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var("TRAJFORGE_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| format!("TRAJFORGE_THREADS must be a non-negative integer, got '{v}'")),
        Err(_) => Ok(0),
    }
}

fn write_file(path: &Path, text: &str) -> trajforge::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::write(path, text)?)
}

fn run(cmd: Cmd) -> trajforge::Result<()> {
    match cmd {
        Cmd::Simulate { cfg, out, seed } => {
            let mut c = load_config(&cfg)?;
            if let Some(s) = seed {
                c.sim.seed = s;
            }
            let sim = simulate(&c.sim)?;
            write_dataset(&sim.dataset, &out)?;
            write_queries(&sim.queries, &out.join("queries"))?;
            eprintln!(
                "simulate: {} sequences, {} images, {} observations, {} queries -> {}",
                sim.dataset.sequences().len(),
                sim.dataset.images.len(),
                sim.dataset.observations.len(),
                sim.queries.queries.len(),
                out.display()
            );
        }
        Cmd::Slam { cfg, input, out } => {
            let c = load_config(&cfg)?;
            let (ds, summary) = run_slam(&read_dataset(&input)?, &c.slam)?;
            write_dataset(&ds, &out)?;
            for s in summary {
                eprintln!(
                    "slam {}: {} nodes, {} edges, {} loops, cost {:.6e}",
                    s.sequence, s.nodes, s.edges, s.loops_accepted, s.final_cost
                );
            }
        }
        Cmd::Merge { cfg, input, out } => {
            let c = load_config(&cfg)?;
            let inputs = input
                .iter()
                .map(|p| read_dataset(p))
                .collect::<trajforge::Result<Vec<_>>>()?;
            let (ds, m) = run_merge(&inputs, &c)?;
            write_dataset(&ds, &out)?;
            eprintln!(
                "merge: {} nodes, {}/{} cross-sequence candidates accepted, cost {:.6e}",
                m.graph.nodes.len(),
                m.cross.accepted,
                m.cross.candidates,
                m.final_cost
            );
        }
        Cmd::Ba { cfg, input, out } => {
            let c = load_config(&cfg)?;
            let (ds, report) = run_ba(&read_dataset(&input)?, &c)?;
            write_dataset(&ds, &out)?;
            let text = report.to_text();
            write_file(&out.join("ba_report.txt"), &text)?;
            eprint!("{text}");
        }
        Cmd::Localize {
            cfg,
            map,
            queries,
            out,
        } => {
            let c = load_config(&cfg)?;
            let est = localize_queries(&read_dataset(&map)?, &read_queries(&queries)?, &c.ransac)?;
            write_file(&out, &estimates_to_csv(&est))?;
            let n = est.iter().filter(|(_, p)| p.is_some()).count();
            eprintln!("localize: {n}/{} queries localized", est.len());
        }
        Cmd::Evaluate { est, gt, out } => {
            let text = fs::read_to_string(&est).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(est.clone()),
                _ => Error::Io(e),
            })?;
            let estimates = estimates_from_csv(&text, &est)?;
            let report = evaluate(&estimates, &read_pose_table(&gt)?, &THRESHOLDS);
            print!("{}", report.to_table());
            if let Some(p) = out {
                write_file(&p, &report.to_csv())?;
            }
        }
        Cmd::Lowfreq { cfg, images } => {
            let c = load_config(&cfg)?;
            if !images.is_dir() {
                return Err(Error::MissingFile(images));
            }
            let mut paths: Vec<PathBuf> = fs::read_dir(&images)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
                .collect();
            paths.sort();
            println!("image,score,low_frequency");
            for p in paths {
                let score = lowfreq_score(&read_pgm(&p)?, c.lowfreq_cutoff);
                let name = p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                println!("{name},{score:.6},{}", u8::from(is_low_frequency(score)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let n = match threads(cli.threads) {
        Ok(n) => n,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
    {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(1);
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage_error() {
                1
            } else if e.is_data_error() {
                2
            } else {
                3
            })
        }
    }
}
