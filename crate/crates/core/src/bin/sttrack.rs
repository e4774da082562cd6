use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use log::info;

use sttrack_core::config::Config;
use sttrack_core::embedding::Modality;
use sttrack_core::harness::ablate::{grid_csv, run_grid, Grid};
use sttrack_core::harness::metrics::{evaluate, threshold, SequenceResult};
use sttrack_core::harness::svg::{line_chart, Series};
use sttrack_core::harness::synthetic::{FrameSource, Scenario, SyntheticSequence};
use sttrack_core::harness::{checkpoint, io, tracker, train};
use sttrack_core::mcp::alibi_slope;
use sttrack_core::theory::{report_csv, report_text, theory_report};
use sttrack_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sttrack", version, about = "Spatio-temporal tracker with memory prompts and dynamic state fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence to a directory.
    GenData {
        #[arg(long)]
        scenario: Scenario,
        #[arg(long)]
        modality: Modality,
        #[arg(long)]
        length: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Frame side in pixels.
        #[arg(long, default_value_t = 64)]
        frame_size: usize,
        #[arg(long, default_value_t = 8)]
        text_dim: usize,
    },
    /// Train the trainable partition and write a checkpoint, a loss CSV and
    /// a loss chart next to it.
    Train {
        /// Config file; the desk preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: PathBuf,
    },
    /// Track a sequence directory and write a run file.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out_run: PathBuf,
    },
    /// Score run files (or directories of them).
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out_csv: PathBuf,
        /// Success-curve chart.
        #[arg(long)]
        out_svg: Option<PathBuf>,
    },
    /// Train and evaluate every cell of a grid file.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
        /// Base config; the desk preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check the forgetting bounds and write text and CSV reports.
    VerifyTheory {
        /// Comma-separated negative slopes; the ALiBi head slopes when omitted.
        #[arg(long, allow_hyphen_values = true)]
        beta_grid: Option<String>,
        /// Text report; the CSV goes next to it.
        #[arg(long)]
        out_report: PathBuf,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 100)]
        decay_draws: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::desk()),
    }
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn collect_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Validation("no run files found".into()));
    }
    Ok(files)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            scenario,
            modality,
            length,
            seed,
            out,
            frame_size,
            text_dim,
        } => {
            let seq = SyntheticSequence::generate(scenario, modality, length, seed, frame_size, text_dim)?;
            io::write_sequence(&seq, &out)?;
            println!("wrote {length} frames of {scenario}/{modality} to {}", out.display());
        }
        Command::Train { config, out_checkpoint } => {
            let cfg = load_config(config.as_deref())?;
            let mut model = sttrack_core::harness::model::Model::new(&cfg)?;
            let data = train::training_set(&model)?;
            let every = (cfg.train.steps / 20).max(1);
            let report = train::train(&mut model, &data, |l| {
                if l.step % every == 0 {
                    info!("step {} loss {:.4} (giou {:.3} l1 {:.3} focal {:.3} ce {:.3})", l.step, l.total, l.giou, l.l1, l.focal, l.ce);
                }
            })?;
            checkpoint::save(&model, &out_checkpoint)?;
            fs::write(with_extension(&out_checkpoint, "loss.csv"), report.loss_csv())?;
            let curve = |name: &str, f: fn(&train::StepLoss) -> f64| Series {
                name: name.into(),
                points: report.losses.iter().map(|l| (l.step as f64, f(l))).collect(),
            };
            let svg = line_chart(
                "training loss",
                "step",
                "loss",
                &[curve("total", |l| l.total), curve("focal", |l| l.focal), curve("giou", |l| l.giou)],
            );
            fs::write(with_extension(&out_checkpoint, "loss.svg"), svg)?;
            println!(
                "trained {} steps; trainable {}/{} parameters ({:.1}%); final loss {:.4}",
                cfg.train.steps,
                report.trainable_params,
                report.total_params,
                100.0 * report.trainable_fraction(),
                report.losses.last().map_or(f64::NAN, |l| l.total)
            );
        }
        Command::Track {
            checkpoint: ckpt,
            sequence,
            out_run,
        } => {
            let model = Arc::new(checkpoint::load(&ckpt)?);
            let seq = io::DiskSequence::open(&sequence)?;
            let run = tracker::track_sequence(model, &seq)?;
            let result = SequenceResult {
                sequence_id: seq.id.clone(),
                scenario: seq.scenario.clone(),
                run,
                gt: seq.gt.clone(),
                frame_size: seq.frame_size(),
            };
            fs::write(&out_run, io::run_to_csv(&result))?;
            let m = result.metrics()?;
            println!("{}: mean IoU {:.4}, AUC {:.4}", seq.id, m.mean_iou, m.auc);
        }
        Command::Eval { runs, out_csv, out_svg } => {
            let results = collect_runs(&runs)?
                .iter()
                .map(|p| io::run_from_csv(&fs::read_to_string(p)?))
                .collect::<Result<Vec<_>>>()?;
            let ev = evaluate(&results)?;
            fs::write(&out_csv, ev.to_csv())?;
            if let Some(svg) = out_svg {
                let mut series = vec![Series {
                    name: "all".into(),
                    points: ev.overall.success.iter().enumerate().map(|(k, &s)| (threshold(k), s)).collect(),
                }];
                for (name, m) in &ev.per_scenario {
                    series.push(Series {
                        name: name.clone(),
                        points: m.success.iter().enumerate().map(|(k, &s)| (threshold(k), s)).collect(),
                    });
                }
                fs::write(svg, line_chart("success", "IoU threshold", "success rate", &series))?;
            }
            println!(
                "{} runs: mean IoU {:.4}, AUC {:.4}, precision {:.4}",
                results.len(),
                ev.overall.mean_iou,
                ev.overall.auc,
                ev.overall.precision
            );
            for (name, m) in &ev.per_scenario {
                println!("  {name:<16} AUC {:.4}", m.auc);
            }
        }
        Command::Ablate { grid, out_csv, config } => {
            let base = load_config(config.as_deref())?;
            let grid = Grid::parse(&fs::read_to_string(&grid)?)?;
            info!("{} cells × {} seeds", grid.cells().len(), grid.seeds.len());
            let cells = run_grid(&base, &grid, |m| info!("{m}"))?;
            fs::write(&out_csv, grid_csv(&cells))?;
            println!("wrote {} cells to {}", cells.len(), out_csv.display());
        }
        Command::VerifyTheory {
            beta_grid,
            out_report,
            heads,
            decay_draws,
        } => {
            let betas: Vec<f64> = match beta_grid {
                Some(s) => s
                    .split(',')
                    .map(|b| {
                        b.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad slope {b:?}")))
                    })
                    .collect::<Result<_>>()?,
                None => (1..=heads).map(|h| -alibi_slope(h)).collect(),
            };
            let checks = theory_report(&betas, 50, 200, &[0.1, 0.01, 0.001], decay_draws, 0)?;
            let text = report_text(&checks);
            fs::write(&out_report, &text)?;
            fs::write(with_extension(&out_report, "csv"), report_csv(&checks))?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
