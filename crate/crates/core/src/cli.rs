//! Command-line front end. [`dispatch`] returns the process exit code so
//! the binary stays a one-liner and tests can drive it in-process.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::bench::{bench_loss, BenchConfig, LossKind};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{parse_config, RunConfig};
use crate::error::{Error, Result};
use crate::gradscope::{run_gradcheck, Scope, TOLERANCE};
use crate::model::{Model, ModelInput};
use crate::params::count_params;
use crate::report::{metrics_csv, run_csv, write_json, CsvRow, RunReport};
use crate::synth::{self, Split};
use crate::trainer::{self, evaluate, occlusion_sweep, prepare};

pub const DEFAULT_RATIOS: [f64; 4] = [0.0, 0.1, 0.2, 0.3];

#[derive(Debug, Parser)]
#[command(name = "ferfuse", version, about = "Landmark- and segmentation-guided expression classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config; writes a checkpoint, metrics.csv and report.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        occlusion: f64,
    },
    /// Evaluate a checkpoint at several occlusion ratios; prints CSV.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RATIOS.to_vec())]
        ratios: Vec<f64>,
        /// Also write the CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// primitives, ssgm, cfb or full; all scopes when omitted.
        #[arg(long)]
        scope: Option<Scope>,
    },
    /// Compare objectives on a small convolutional classifier.
    BenchLoss {
        #[arg(long)]
        loss: LossKind,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write generated samples as ORST tensors plus a JSON index.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        occlusion: Option<f64>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn dispatch<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<(Model, u64)> {
    let profile = cfg.profile();
    let mut model = Model::new(cfg.model.clone(), cfg.train.ablation, profile.num_classes(), cfg.train.init_seed())?;
    let adam = load_checkpoint(ckpt, &mut model.params)?;
    Ok((model, adam.t))
}

fn emit_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

fn run(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Train { config, out: dir } => {
            let mut cfg = parse_config(&config)?;
            if let Some(d) = dir {
                cfg.output_dir = d;
            }
            let profile = cfg.profile();
            let (model, adam, report) = trainer::train(&cfg.model, &cfg.train, &profile)?;
            let weights = cfg.train.effective_weights();
            let sweep = occlusion_sweep(&model, &profile, &DEFAULT_RATIOS, cfg.model.heatmap_sigma, weights)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            save_checkpoint(&cfg.output_dir.join("model.orsc"), &model.params, &adam)?;
            let csv = run_csv(profile.num_classes(), &report, &sweep);
            std::fs::write(cfg.output_dir.join("metrics.csv"), csv)?;
            let counts = count_params(&model.params);
            write_json(&cfg.output_dir.join("report.json"), &RunReport::new(&cfg, &counts, &report, &sweep))?;
            let acc = report.final_metrics().map_or(f64::NAN, |m| m.overall_accuracy);
            writeln!(
                out,
                "trained {} steps, val accuracy {acc:.4}, wrote {}",
                report.step_losses.len(),
                cfg.output_dir.display()
            )?;
            Ok(0)
        }
        Command::Eval { ckpt, config, occlusion } => {
            let cfg = parse_config(&config)?;
            let (model, _) = load_model(&cfg, &ckpt)?;
            let occ = (occlusion != 0.0).then_some(occlusion);
            let val = synth::build_split(&cfg.profile(), Split::Val, occ)?;
            let m = evaluate(&model, &prepare(&val, cfg.model.heatmap_sigma)?, cfg.train.effective_weights())?;
            emit_json(out, &m)?;
            Ok(0)
        }
        Command::Sweep { ckpt, config, ratios, out: file } => {
            let cfg = parse_config(&config)?;
            let (model, step) = load_model(&cfg, &ckpt)?;
            let profile = cfg.profile();
            let rows = occlusion_sweep(&model, &profile, &ratios, cfg.model.heatmap_sigma, cfg.train.effective_weights())?;
            let csv_rows: Vec<CsvRow<'_>> = rows
                .iter()
                .map(|r| CsvRow {
                    step: step as usize,
                    split: "sweep",
                    ratio: r.ratio,
                    metrics: &r.metrics,
                })
                .collect();
            let csv = metrics_csv(profile.num_classes(), &csv_rows);
            if let Some(f) = file {
                std::fs::write(f, &csv)?;
            }
            out.write_all(csv.as_bytes())?;
            Ok(0)
        }
        Command::Gradcheck { scope } => {
            let scopes = scope.map_or(Scope::ALL.to_vec(), |s| vec![s]);
            let mut ok = true;
            for s in scopes {
                let r = run_gradcheck(s)?;
                let verdict = if r.passed() { "PASS" } else { "FAIL" };
                ok &= r.passed();
                writeln!(
                    out,
                    "{s}: max rel err {:.3e} over {} probes (tol {TOLERANCE:e}) {verdict}",
                    r.max_rel_err(),
                    r.probes()
                )?;
            }
            Ok(if ok { 0 } else { 1 })
        }
        Command::BenchLoss { loss, seeds, steps, seed } => {
            let mut cfg = BenchConfig {
                seed,
                ..BenchConfig::default()
            };
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let r = bench_loss(loss, seeds, &cfg)?;
            emit_json(out, &r)?;
            Ok(0)
        }
        Command::Synth { config, out: dir, occlusion } => {
            let cfg = parse_config(&config)?;
            write_synth(&cfg, &dir, occlusion, out)?;
            Ok(0)
        }
    }
}

#[derive(Serialize)]
struct SampleFiles {
    image: String,
    seg: String,
    heatmaps: String,
}

#[derive(Serialize)]
struct SampleEntry {
    id: String,
    split: Split,
    label: usize,
    seed: u64,
    occlusion_ratio: f64,
    files: SampleFiles,
}

#[derive(Serialize)]
struct SynthIndex<'a> {
    samples: Vec<SampleEntry>,
    profile: &'a synth::DatasetProfile,
}

fn write_synth(cfg: &RunConfig, dir: &Path, occlusion: Option<f64>, out: &mut dyn Write) -> Result<()> {
    if let Some(r) = occlusion {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Contract(format!("occlusion ratio {r} outside [0, 1)")));
        }
    }
    let profile = cfg.profile();
    std::fs::create_dir_all(dir)?;
    let mut samples = Vec::new();
    for split in [Split::Train, Split::Val] {
        let tag = match split {
            Split::Train => "train",
            Split::Val => "val",
        };
        for (i, s) in synth::build_split(&profile, split, occlusion)?.iter().enumerate() {
            let id = format!("{tag}_{i:05}");
            let input = ModelInput::from_scene(s, cfg.model.heatmap_sigma)?;
            let files = SampleFiles {
                image: format!("{id}_image.orst"),
                seg: format!("{id}_seg.orst"),
                heatmaps: format!("{id}_heatmaps.orst"),
            };
            std::fs::write(dir.join(&files.image), s.image.tensor().to_orst_bytes())?;
            std::fs::write(dir.join(&files.seg), s.seg.tensor().to_orst_bytes())?;
            std::fs::write(dir.join(&files.heatmaps), input.heatmaps.tensor().to_orst_bytes())?;
            samples.push(SampleEntry {
                id,
                split,
                label: s.label,
                seed: s.seed,
                occlusion_ratio: s.occlusion_ratio,
                files,
            });
        }
    }
    let n = samples.len();
    write_json(&dir.join("index.json"), &SynthIndex { samples, profile: &profile })?;
    writeln!(out, "wrote {n} samples to {}", dir.display())?;
    Ok(())
}
