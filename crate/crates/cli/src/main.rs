use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};
use robust_splat::config::{parse_pairs, ConfigError, ExperimentConfig, KEYS};
use robust_splat::datagen::generate_scene;
use robust_splat::io::{
    load_checkpoint, load_dataset, read_text, save_checkpoint, save_dataset, write_cluster_png,
    write_mask_png, write_rgb_png, IoError,
};
use robust_splat::trainer::{format_row, Context, MaskMode, TrainError, Trainer, LOG_HEADER};

/// Robust 2D Gaussian splatting on synthetic multi-view scenes with
/// transient distractors.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `--section.key value` overrides.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Train on a dataset and write log.csv, renders and a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Recompute metrics of a finished run from its checkpoint.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Dataset directory; defaults to the one recorded by `train`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Join the final metrics of several runs into one table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List every config key with its default.
    Keys,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Self {
            code: 2,
            message: e.to_string(),
        }
    }

    fn data(e: impl std::fmt::Display) -> Self {
        Self {
            code: 3,
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::config(e)
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Config(c) => Self::config(c),
            other => Self::data(other),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Config(_) => 2,
            TrainError::Divergence { .. } => 4,
            _ => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    let result = match cli.command {
        Command::Generate {
            config,
            out,
            overrides,
        } => cmd_generate(config.as_deref(), &out, &overrides),
        Command::Train {
            config,
            data,
            out,
            overrides,
        } => cmd_train(config.as_deref(), &data, &out, &overrides),
        Command::Eval { run, data } => cmd_eval(&run, data.as_deref()),
        Command::Report { runs, out } => cmd_report(&runs, out.as_deref()),
        Command::Keys => {
            let d = ExperimentConfig::default();
            for (k, doc) in KEYS {
                println!("{k} = {}  # {doc}", d.get(k).unwrap_or_default());
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("SLS_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::config(format!("SLS_THREADS must be a positive integer, got `{v}`"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(Failure::config)
}

/// Parses `--key value` and `--key=value` overrides.
fn override_pairs(args: &[String]) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            return Err(Failure::config(format!("unexpected argument `{a}`")));
        };
        let (k, v) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Failure::config(format!("missing value for `--{flag}`")))?;
                (flag.to_string(), v.clone())
            }
        };
        out.push((k, v));
    }
    Ok(out)
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    let mut pairs = match path {
        Some(p) => parse_pairs(&read_text(p).map_err(Failure::config)?)?,
        None => Vec::new(),
    };
    pairs.extend(override_pairs(overrides)?);
    Ok(ExperimentConfig::from_pairs(&pairs)?)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn cmd_generate(config: Option<&Path>, out: &Path, overrides: &[String]) -> Result<(), Failure> {
    let cfg = load_config(config, overrides)?;
    let data = generate_scene(cfg.gen_seed, &cfg.gen);
    save_dataset(out, &data, &cfg.gen_text())?;
    println!(
        "preset {} | {} views at {}x{} | measured occupancy {:.3}",
        cfg.preset,
        data.views.len(),
        data.width(),
        data.height(),
        data.measured_occupancy()
    );
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    overrides: &[String],
) -> Result<(), Failure> {
    let cfg = load_config(config, overrides)?;
    let data = load_dataset(data_dir)?;
    // Record the dataset's generator settings so reports see the real preset.
    let scene = ExperimentConfig::from_text(&read_text(&data_dir.join("scene.cfg"))?)?;
    let run_cfg = ExperimentConfig {
        preset: scene.preset,
        gen_seed: scene.gen_seed,
        gen: scene.gen,
        train: cfg.train.clone(),
    };
    create_dir(out)?;
    let renders = out.join("renders");
    create_dir(&renders)?;
    write_file(&out.join("config.cfg"), &run_cfg.to_text())?;
    let abs = fs::canonicalize(data_dir).unwrap_or_else(|_| data_dir.to_path_buf());
    write_file(&out.join("dataset.txt"), &format!("{}\n", abs.display()))?;

    let mut trainer = Trainer::new(cfg.train.clone(), &data)?;
    if let Some(clusters) = &trainer.ctx.clusters {
        write_cluster_png(&renders.join("clusters_view0000.png"), &clusters[0])?;
    }
    let mut log_text = format!("{LOG_HEADER}\n");
    let mut dump_error = None;
    let log = trainer.run(|t, rec| {
        let r = &rec.row;
        info!(
            "step {:>5} | psnr {:.2} | loss {:.5} | iou {:.3} | splats {} | alpha {:.3}",
            r.step, r.psnr, r.loss, r.iou, r.splats, r.alpha
        );
        if dump_error.is_none() {
            if let Err(e) = dump_eval_pngs(t, &renders, r.step) {
                dump_error = Some(e);
            }
        }
    })?;
    if let Some(e) = dump_error {
        return Err(e);
    }
    for r in &log.rows {
        writeln!(log_text, "{}", format_row(r)).expect("write to string");
    }
    write_file(&out.join("log.csv"), &log_text)?;
    save_checkpoint(&out.join("checkpoint.bin"), &trainer.state)?;
    let last = log.last().expect("at least one row");
    println!(
        "mode {} | psnr {:.2} | iou {:.3} | splats {}",
        cfg.train.mode, last.psnr, last.iou, last.splats
    );
    Ok(())
}

fn dump_eval_pngs(trainer: &Trainer<'_>, dir: &Path, step: u64) -> Result<(), Failure> {
    let (img, mask) = trainer.preview(0)?;
    write_rgb_png(&dir.join(format!("render_{step:05}_view0000.png")), &img)?;
    if trainer.cfg.mode != MaskMode::None {
        write_mask_png(&dir.join(format!("mask_{step:05}_view0000.png")), &mask)?;
    }
    Ok(())
}

fn cmd_eval(run: &Path, data: Option<&Path>) -> Result<(), Failure> {
    let cfg = ExperimentConfig::from_text(&read_text(&run.join("config.cfg"))?)?;
    let data_dir = match data {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from(read_text(&run.join("dataset.txt"))?.trim()),
    };
    let data = load_dataset(&data_dir)?;
    let state = load_checkpoint(
        &run.join("checkpoint.bin"),
        &cfg.train,
        data.views.len(),
        data.views[0].features.channels(),
    )?;
    let ctx = Context::new(&cfg.train, &data)?;
    let rec = robust_splat::trainer::evaluate(&cfg.train, &state, &ctx, &data)?;
    let text = format!("{LOG_HEADER}\n{}\n", format_row(&rec.row));
    write_file(&run.join("eval.csv"), &text)?;
    print!("{text}");
    info!(
        "identity-appearance psnr vs base image {:.2}",
        rec.psnr_identity
    );
    Ok(())
}

struct RunSummary {
    dir: PathBuf,
    preset: String,
    mode: String,
    seed: String,
    psnr: f64,
    iou: f64,
    splats: usize,
}

fn summarize(dir: &Path) -> Result<RunSummary, Failure> {
    let cfg = ExperimentConfig::from_text(&read_text(&dir.join("config.cfg"))?)?;
    let log = read_text(&dir.join("log.csv"))?;
    let last = log
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .last()
        .ok_or_else(|| Failure::data(format!("{}: empty log.csv", dir.display())))?;
    let fields: Vec<&str> = last.split(',').collect();
    let bad = || Failure::data(format!("{}: malformed log row `{last}`", dir.display()));
    if fields.len() != 6 {
        return Err(bad());
    }
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        preset: cfg.preset.to_string(),
        mode: cfg.train.mode.to_string(),
        seed: cfg.train.seed.to_string(),
        psnr: fields[1].parse().map_err(|_| bad())?,
        iou: fields[3].parse().map_err(|_| bad())?,
        splats: fields[4].parse().map_err(|_| bad())?,
    })
}

fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<(), Failure> {
    let mut rows = runs
        .iter()
        .map(|r| summarize(r))
        .collect::<Result<Vec<_>, _>>()?;
    rows.sort_by(|a, b| (&a.preset, &a.seed, &a.mode).cmp(&(&b.preset, &b.seed, &b.mode)));
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for r in &rows {
        let e = best.entry(&r.preset).or_insert(f64::NEG_INFINITY);
        *e = e.max(r.psnr);
    }
    let mut csv = String::from("preset,mode,seed,psnr,iou,splats,best,run\n");
    println!(
        "{:<11} {:<14} {:>6} {:>8} {:>6} {:>7}  best",
        "preset", "mode", "seed", "psnr", "iou", "splats"
    );
    for r in &rows {
        let mark = if r.psnr == best[r.preset.as_str()] {
            "*"
        } else {
            ""
        };
        println!(
            "{:<11} {:<14} {:>6} {:>8.2} {:>6.3} {:>7}  {mark}",
            r.preset, r.mode, r.seed, r.psnr, r.iou, r.splats
        );
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.preset,
            r.mode,
            r.seed,
            r.psnr,
            r.iou,
            r.splats,
            mark,
            r.dir.display()
        )
        .expect("write to string");
    }
    if let Some(path) = out {
        write_file(path, &csv)?;
    }
    let key = |r: &RunSummary| (r.preset.clone(), r.seed.clone(), r.mode.clone());
    if rows.windows(2).any(|w| key(&w[0]) == key(&w[1])) {
        warn!("several runs share preset, seed and mode");
    }
    Ok(())
}
