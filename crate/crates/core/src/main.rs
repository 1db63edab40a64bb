use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dirlcap::checkpoint::Checkpoint;
use dirlcap::config::TrainConfig;
use dirlcap::dataset::{generate, read_dataset, write_dataset};
use dirlcap::error::{Error, Result};
use dirlcap::eval::{
    distractor_sweep, evaluate, export_attention, sweep_lines, write_report_lines, AttentionMap,
};
use dirlcap::scenes::{read_features, ChangeType, DatasetSpec, DistractorRange, GeneratorConfig};
use dirlcap::train::Trainer;

/// Change captioning with distractor-immune representations.
#[derive(Parser)]
#[command(name = "dirlcap", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenData),
    /// Train a model on a dataset directory.
    Train(Train),
    /// Caption one before/after pair of feature files.
    Caption(CaptionCmd),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(Eval),
    /// Evaluate a checkpoint on regenerated test sets of growing distractor magnitude.
    Sweep(Sweep),
}

#[derive(Args)]
struct GenData {
    /// synthetic, synthetic-hard or synthetic-clean.
    #[arg(long, default_value = "synthetic")]
    preset: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated change types, cycled in order.
    #[arg(long, value_delimiter = ',')]
    change_mix: Option<Vec<String>>,
    /// Largest cyclic shift per axis.
    #[arg(long)]
    shift: Option<i32>,
    /// Gain range `LO:HI`, or a single `G` meaning `[min(G, 1/G), max(G, 1/G)]`.
    #[arg(long)]
    gain: Option<String>,
    /// Standard deviation of per-element feature noise.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct Train {
    /// key=value file; fields not set keep the synthetic preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value settings applied after the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    /// Directory for model.ckpt, trace.jsonl and config.txt.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct CaptionCmd {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    before: PathBuf,
    #[arg(long)]
    after: PathBuf,
    /// Write per-token attention graymaps here.
    #[arg(long)]
    dump_attn: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report path; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Sweep {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    magnitudes: Vec<u32>,
    #[arg(long)]
    report: PathBuf,
    /// Pairs per magnitude.
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 1_000_003)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

fn parse_gain(text: &str) -> Result<(f64, f64)> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| *v > 0.0 && v.is_finite())
            .ok_or_else(|| Error::Config(format!("bad gain {s:?}")))
    };
    let (lo, hi) = match text.split_once(':') {
        Some((a, b)) => (num(a)?, num(b)?),
        None => {
            let g = num(text)?;
            (g.min(1.0 / g), g.max(1.0 / g))
        }
    };
    if lo > hi {
        return Err(Error::Config(format!("gain range {lo}:{hi} is empty")));
    }
    Ok((lo, hi))
}

fn gen_data(a: GenData) -> Result<()> {
    let mut spec = DatasetSpec::preset(&a.preset, a.count, a.seed)?;
    if let Some(mix) = a.change_mix {
        spec.change_mix = mix
            .iter()
            .map(|s| s.trim().parse::<ChangeType>())
            .collect::<Result<_>>()?;
    }
    if let Some(s) = a.shift {
        if s < 0 {
            return Err(Error::Config(format!("shift must be >= 0, got {s}")));
        }
        spec.distractor.max_shift = s;
    }
    if let Some(g) = a.gain {
        (spec.distractor.gain_min, spec.distractor.gain_max) = parse_gain(&g)?;
    }
    if let Some(n) = a.noise {
        if !(n >= 0.0) {
            return Err(Error::Config(format!("noise must be >= 0, got {n}")));
        }
        spec.distractor.noise_sigma = n;
    }
    let examples = generate(&spec)?;
    write_dataset(&a.out, Some(&spec), &examples)?;
    println!("wrote {} pairs to {}", examples.len(), a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let examples = read_dataset(&a.data)?;
    let mut trainer = match &a.resume {
        Some(path) => Trainer::from_checkpoint(Checkpoint::load(path)?)?,
        None => {
            let mut config = TrainConfig::preset("synthetic")?;
            if let Some(path) = &a.config {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                config.apply_text(&text)?;
            }
            for o in &a.overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
                config.set(k, v)?;
            }
            Trainer::new(config, &examples)?
        }
    };
    if a.resume.is_some() {
        for o in &a.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            trainer.config.set(k, v)?;
        }
        trainer.config.validate()?;
    }
    for w in &trainer.warnings {
        eprintln!("warning: {w}");
    }
    let data = trainer.prepare(&examples)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let config_path = a.out.join("config.txt");
    fs::write(&config_path, trainer.config.to_text()).map_err(|e| Error::io(&config_path, e))?;
    let ckpt_path = a.out.join("model.ckpt");
    let trace_path = a.out.join("trace.jsonl");
    let trace_file = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&trace_path)
        .map_err(|e| Error::io(&trace_path, e))?;
    let mut trace = BufWriter::new(trace_file);
    let every = trainer.config.checkpoint_every;
    let result = trainer.run(&data, |t, r| {
        let line = serde_json::to_string(r).expect("trace record serializes");
        writeln!(trace, "{line}").map_err(|e| Error::io(&trace_path, e))?;
        if r.iteration % 100 == 0 {
            eprintln!(
                "iter {:>6}  cap {:.4}  dirl {:.4}  ccr {:.4}  offdiag {:.4}",
                r.iteration, r.l_cap, r.l_dirl, r.l_ccr, r.offdiag_mean
            );
        }
        if every > 0 && t.iteration % every == 0 {
            trace.flush().map_err(|e| Error::io(&trace_path, e))?;
            t.checkpoint().save(&ckpt_path)?;
        }
        Ok(())
    });
    trace.flush().map_err(|e| Error::io(&trace_path, e))?;
    // On failure the parameters are those of the last completed step.
    trainer.checkpoint().save(&ckpt_path)?;
    result?;
    println!(
        "trained {} iterations; checkpoint at {}",
        trainer.iteration,
        ckpt_path.display()
    );
    Ok(())
}

fn caption(a: CaptionCmd) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let before = read_features(&a.before)?;
    let after = read_features(&a.after)?;
    let decoded = ckpt.caption(&[&before], &[&after])?.remove(0);
    println!("{}", ckpt.vocab.decode(&decoded.tokens));
    if let Some(dir) = a.dump_attn {
        let map = AttentionMap::from_decoded(&decoded, &ckpt.vocab, before.height, before.width)?;
        export_attention(&map, &dir)?;
    }
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let examples = read_dataset(&a.data)?;
    let lines = evaluate(&ckpt, &examples)?.lines();
    emit(&lines, a.report.as_deref())
}

fn sweep(a: Sweep) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let generator = GeneratorConfig::default();
    let grid = (ckpt.model.positions as f64).sqrt() as usize;
    if grid * grid != ckpt.model.positions {
        return Err(Error::Config(format!(
            "checkpoint expects {} positions, not a square grid",
            ckpt.model.positions
        )));
    }
    let template = DatasetSpec {
        generator: GeneratorConfig {
            grid_size: grid,
            channels: ckpt.model.feature_channels,
            ..generator
        },
        count: a.count,
        seed: a.seed,
        change_mix: ChangeType::ALL.to_vec(),
        distractor: DistractorRange::magnitude(0, a.noise),
    };
    let points = distractor_sweep(&ckpt, &template, &a.magnitudes)?;
    emit(&sweep_lines(&points), Some(&a.report))
}

fn emit(lines: &[dirlcap::eval::ReportLine], path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => write_report_lines(lines, p),
        None => {
            for l in lines {
                println!("{}", serde_json::to_string(l).expect("report serializes"));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Caption(a) => caption(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
