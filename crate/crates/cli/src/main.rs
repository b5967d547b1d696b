use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rccf_core::ablation::{run_ablation, Variant};
use rccf_core::data::{generate_dataset, read_ppm, Dataset, GeneratorConfig, SplitCounts};
use rccf_core::eval::{dump_heatmap, evaluate, report_table, timing_profile, write_reports};
use rccf_core::{Checkpoint, Error, Result, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "rccf", version, about = "Referring-expression grounding by correlation filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        seed: u64,
        /// Total number of samples.
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Validation samples (default: 10% of count).
        #[arg(long)]
        val: Option<usize>,
        /// Test samples (default: 10% of count).
        #[arg(long)]
        test: Option<usize>,
        /// Generator settings file (key = value).
        #[arg(long)]
        generator: Option<PathBuf>,
    },
    /// Train a model.
    Train {
        /// Training config file (key = value); defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one or more splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: Vec<String>,
        /// Where to write report.tsv, summary.json and timing.tsv.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Repeats for the per-stage timing profile.
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Print the box for one image and expression.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        expression: String,
    },
    /// Train the main model and the six ablation variants.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the center heatmap as a PGM image plus a box sidecar.
    DumpHeatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        expression: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            seed,
            count,
            out_dir,
            val,
            test,
            generator,
        } => {
            let cfg = match generator {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    GeneratorConfig::from_text(&text, &p)?
                }
                None => GeneratorConfig::default(),
            };
            let mut counts = SplitCounts::from_total(count);
            if val.is_some() || test.is_some() {
                counts.val = val.unwrap_or(counts.val);
                counts.test = test.unwrap_or(counts.test);
                counts.train = count
                    .checked_sub(counts.val + counts.test)
                    .ok_or_else(|| Error::Invalid("val + test exceed count".into()))?;
            }
            let ds = generate_dataset(&out_dir, seed, counts, &cfg)?;
            for s in &ds.splits {
                println!("{}\t{}", s.name, s.len());
            }
        }
        Command::Train {
            config,
            data_dir,
            out_dir,
            resume,
        } => {
            // Config problems are reported before the (slower) dataset load.
            let cfg = load_config(config.as_deref())?;
            let data = Dataset::load(&data_dir)?;
            let mut trainer = match resume {
                Some(p) => {
                    let ckpt = Checkpoint::load(&p)?;
                    if config.is_some() && cfg != ckpt.config {
                        return Err(Error::Invalid("config file differs from the checkpoint's config".into()));
                    }
                    Trainer::resume(ckpt, &data)?
                }
                None => Trainer::new(cfg, &data)?,
            };
            let ckpt = trainer.run(Some(&out_dir))?;
            println!("trained {} steps; checkpoint {}", ckpt.step, out_dir.join("model.ckpt").display());
            let evals: Vec<&str> = trainer.evals_text().lines().collect();
            if evals.len() > 1 {
                println!("{}\n{}", evals[0], evals[evals.len() - 1]);
            }
        }
        Command::Eval {
            checkpoint,
            data_dir,
            split,
            out_dir,
            repeats,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let data = Dataset::load(&data_dir)?;
            let mut reports = Vec::new();
            let mut timing = String::from("split\tstage\tmedian_ms\n");
            for name in &split {
                let records = data.split(name)?;
                let r = evaluate(&ckpt.model, name, records)?;
                let s = &records[0].sample;
                let prof = timing_profile(&ckpt.model, &s.image, &s.expression, repeats)?;
                for (stage, t) in &prof.stages {
                    timing.push_str(&format!("{name}\t{stage}\t{t:.4}\n"));
                }
                timing.push_str(&format!("{name}\tend_to_end\t{:.4}\n", prof.end_to_end));
                reports.push(r);
            }
            print!("{}", report_table(&reports));
            print!("{timing}");
            if let Some(dir) = out_dir {
                write_reports(&dir, &reports)?;
                let p = dir.join("timing.tsv");
                fs::write(&p, timing).map_err(|e| Error::Io { path: p, source: e })?;
            }
        }
        Command::Infer {
            checkpoint,
            image,
            expression,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let img = read_ppm(&image)?;
            let p = ckpt.model.predict(&img, &expression)?;
            let b = p.bbox;
            println!("{:.3} {:.3} {:.3} {:.3} {:.6}", b.x1, b.y1, b.x2, b.y2, p.score);
        }
        Command::Ablate {
            config,
            data_dir,
            out_dir,
        } => {
            let base = load_config(config.as_deref())?;
            let data = Dataset::load(&data_dir)?;
            let table = run_ablation(&base, &data, &Variant::ALL, Some(&out_dir))?;
            print!("{}", table.to_text());
        }
        Command::DumpHeatmap {
            checkpoint,
            image,
            expression,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let img = read_ppm(&image)?;
            let (p, side) = dump_heatmap(&ckpt.model, &img, &expression, &out)?;
            let b = p.bbox;
            println!(
                "{} {} {:.3} {:.3} {:.3} {:.3} {:.6}",
                out.display(),
                side.display(),
                b.x1,
                b.y1,
                b.x2,
                b.y2,
                p.score
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
