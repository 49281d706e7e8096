//! Command-line front end: cover synthesis, embedding, training,
//! evaluation, and diagnostics over the library pipeline.
//!
//! Exit codes: 0 success, 2 configuration or usage problem, 3 data problem
//! (missing or malformed files, empty splits).

use clap::{Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use stegsense::config::RunConfig;
use stegsense::dataset::{list_pgms, split_indices, Split};
use stegsense::diagnostics::{batch_white_dot, report_csv, white_dot_pair};
use stegsense::embed::{embed_lsb_matching, write_audit, EmbedSpec};
use stegsense::image::Image8;
use stegsense::network::init_model;
use stegsense::pgm::{read_pgm, write_pgm};
use stegsense::rng;
use stegsense::synth::{synthesize_cover, Texture};
use stegsense::trainer::{
    evaluate, fit, load_checkpoint, write_metrics_csv, CheckpointData, FitSession, MetricsRow,
    TrainState,
};
use stegsense::{Error, Result};

/// Seed salts keeping the model-init, split-assignment, and per-cover
/// embedding streams independent of each other.
const SALT_MODEL: u64 = 1;
const SALT_SPLIT: u64 = 2;

#[derive(Parser)]
#[command(
    name = "stegsense",
    version,
    about = "Detect least-significant-bit embeddings in grayscale images",
    term_width = 100
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize cover images as PGM files
    GenCovers {
        /// Number of covers to write (at least 1)
        #[arg(long)]
        count: usize,
        /// Image size as WIDTHxHEIGHT, e.g. 64x64
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        /// Texture profile: smooth, mixed, or busy
        #[arg(long, value_parser = Texture::parse)]
        texture: Texture,
        /// Seed for the cover synthesizer
        #[arg(long)]
        seed: u64,
        /// Output directory, created if missing
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed random payloads into every cover in a directory
    Embed {
        /// Directory of cover PGM files
        #[arg(long)]
        covers: PathBuf,
        /// Payload in bits per pixel, in (0, 1]
        #[arg(long)]
        payload: f64,
        /// Seed for message bits and pixel positions
        #[arg(long)]
        seed: u64,
        /// Output directory, created if missing
        #[arg(long)]
        out: PathBuf,
        /// Also write one position log per stego image
        #[arg(long)]
        audit: bool,
    },
    /// Train a detector from a run configuration file
    Train {
        /// Path to a key = value configuration file
        #[arg(long)]
        config: PathBuf,
        /// Continue a run from its last.ckpt (config must match exactly)
        #[arg(long, conflicts_with = "init_from")]
        resume: Option<PathBuf>,
        /// Initialize weights from a checkpoint but start a fresh run
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its validation or test split
    Eval {
        /// Checkpoint written by train
        #[arg(long)]
        ckpt: PathBuf,
        /// Data split to score
        #[arg(long, value_parser = parse_eval_split)]
        split: Split,
    },
    /// Report cover/stego feature differences on held-out pairs
    Diagnose {
        /// Checkpoint written by train
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of test pairs to analyze (at least 1)
        #[arg(long)]
        pairs: usize,
    },
    /// Print the filter bank of a checkpoint as text
    ExportFilters {
        /// Checkpoint written by train
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let parse = |tok: &str| -> Result<usize> {
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Config(format!(
                "bad size '{s}' (expected WIDTHxHEIGHT, e.g. 64x64)"
            ))),
        }
    };
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("bad size '{s}' (expected WIDTHxHEIGHT)")))?;
    Ok((parse(w)?, parse(h)?))
}

fn parse_eval_split(s: &str) -> Result<Split> {
    match Split::parse(s)? {
        Split::Train => Err(Error::Config("eval split must be val or test".into())),
        split => Ok(split),
    }
}

/// Validates STEGSENSE_THREADS. The numeric kernels are single-threaded by
/// contract (that is what keeps runs bit-reproducible), so the value is an
/// accepted upper bound, not a demand.
fn threads_from_env() -> Result<usize> {
    match std::env::var("STEGSENSE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "STEGSENSE_THREADS must be a positive integer, got '{v}'"
            ))),
        },
    }
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn cmd_gen_covers(
    count: usize,
    (w, h): (usize, usize),
    texture: Texture,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    make_dir(out)?;
    for i in 0..count {
        let img = synthesize_cover(w, h, rng::derive(seed, i as u64), texture)?;
        let path = out.join(format!("cover_{i:04}.pgm"));
        write_pgm(&img, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_embed(covers: &Path, payload: f64, seed: u64, out: &Path, audit: bool) -> Result<()> {
    EmbedSpec {
        payload_bpp: payload,
        seed,
    }
    .validate()?;
    let paths = list_pgms(covers)?;
    make_dir(out)?;
    for (i, path) in paths.iter().enumerate() {
        let cover = read_pgm(path)?;
        let spec = EmbedSpec {
            payload_bpp: payload,
            seed: rng::derive(seed, i as u64),
        };
        let (stego, records) = embed_lsb_matching(&cover, &spec)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("unusable file name {}", path.display())))?;
        let stego_path = out.join(format!("{stem}.stego.pgm"));
        write_pgm(&stego, &stego_path)?;
        if audit {
            write_audit(&records, &out.join(format!("{stem}.audit.txt")))?;
        }
        println!("{}", stego_path.display());
    }
    Ok(())
}

/// Reads every cover in the configured directory and embeds its stego twin
/// in memory. Pair i gets its own embedding stream, salted by i.
fn build_pairs(cfg: &RunConfig) -> Result<Vec<(Image8, Image8)>> {
    let paths = list_pgms(&cfg.covers_dir)?;
    let mut pairs = Vec::with_capacity(paths.len());
    for (i, path) in paths.iter().enumerate() {
        let cover = read_pgm(path)?;
        let spec = EmbedSpec {
            payload_bpp: cfg.payload_bpp,
            seed: rng::derive(cfg.embed_seed, i as u64),
        };
        let (stego, _) = embed_lsb_matching(&cover, &spec)?;
        pairs.push((cover, stego));
    }
    Ok(pairs)
}

type PairVec = Vec<(Image8, Image8)>;

fn split_pairs(cfg: &RunConfig) -> Result<(PairVec, PairVec, PairVec)> {
    let pairs = build_pairs(cfg)?;
    let (train, val, test) = split_indices(
        pairs.len(),
        cfg.ratios,
        rng::derive(cfg.seed(), SALT_SPLIT),
    )?;
    let take = |idx: Vec<usize>| -> PairVec { idx.into_iter().map(|i| pairs[i].clone()).collect() };
    Ok((take(train), take(val), take(test)))
}

fn print_epoch(row: &MetricsRow) {
    println!(
        "epoch {:>4}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}",
        row.epoch, row.train_loss, row.train_acc, row.val_loss, row.val_acc
    );
}

fn cmd_train(config_path: &Path, resume: Option<&Path>, init_from: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    cfg.validate()?;
    let echo = cfg.canonical();
    let (train_pairs, val_pairs, _) = split_pairs(&cfg)?;
    if val_pairs.is_empty() {
        return Err(Error::Config(
            "validation split is empty; raise val_ratio or add covers".into(),
        ));
    }
    let (mut model, mut state) = match (resume, init_from) {
        (Some(path), _) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.require_config(&echo)?;
            ckpt.instantiate(&cfg.network)?
        }
        (None, Some(path)) => {
            let model = load_checkpoint(path)?.instantiate_weights(&cfg.network)?;
            let state = TrainState::new(&model);
            (model, state)
        }
        (None, None) => {
            let model = init_model(&cfg.network, rng::derive(cfg.seed(), SALT_MODEL))?;
            let state = TrainState::new(&model);
            (model, state)
        }
    };
    make_dir(&cfg.out_dir)?;
    let session = FitSession {
        train_pairs: &train_pairs,
        val_pairs: &val_pairs,
        loss: cfg.loss,
        optim: cfg.optim,
        pairs_per_batch: cfg.pairs_per_batch,
        early_stop_window: cfg.early_stop_window,
        early_stop_delta: cfg.early_stop_delta,
        config_echo: echo,
        ckpt_dir: Some(cfg.out_dir.clone()),
        progress: Some(print_epoch),
    };
    let out = fit(&mut model, &mut state, &session)?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    write_metrics_csv(&out.rows, &metrics_path)?;
    if out.stopped_early {
        println!("train accuracy converged, stopping at epoch {}", state.epoch);
    }
    if let Some(best) = out.best {
        println!("best val_acc {:.4} at epoch {}", best.accuracy, best.epoch);
    }
    println!("wrote {}", metrics_path.display());
    Ok(())
}

/// A checkpoint is self-describing: its embedded echo is a complete run
/// config, so eval and diagnose rebuild the exact dataset from it.
fn load_run(ckpt_path: &Path) -> Result<(RunConfig, CheckpointData)> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let cfg = RunConfig::parse(&ckpt.config_echo)?;
    cfg.validate()?;
    Ok((cfg, ckpt))
}

fn cmd_eval(ckpt_path: &Path, split: Split) -> Result<()> {
    let (cfg, ckpt) = load_run(ckpt_path)?;
    let model = ckpt.instantiate_weights(&cfg.network)?;
    let (_, val, test) = split_pairs(&cfg)?;
    let pairs = match split {
        Split::Val => val,
        _ => test,
    };
    if pairs.is_empty() {
        return Err(Error::Data(format!("{split} split is empty")));
    }
    let m = evaluate(&model, &pairs, cfg.pairs_per_batch)?;
    println!("split = {split}");
    println!("pairs = {}", pairs.len());
    println!("accuracy = {:.6}", m.accuracy);
    println!("loss = {:.6}", m.loss);
    println!("false_alarm = {:.6}", m.false_alarm);
    println!("miss = {:.6}", m.miss);
    Ok(())
}

fn cmd_diagnose(ckpt_path: &Path, pairs: usize) -> Result<()> {
    if pairs == 0 {
        return Err(Error::Config("--pairs must be at least 1".into()));
    }
    let (cfg, ckpt) = load_run(ckpt_path)?;
    let model = ckpt.instantiate_weights(&cfg.network)?;
    let (_, _, test) = split_pairs(&cfg)?;
    if test.len() < pairs {
        return Err(Error::Data(format!(
            "test split has {} pairs, --pairs asked for {pairs}",
            test.len()
        )));
    }
    let mut reports = Vec::with_capacity(pairs);
    for (cover, stego) in test.iter().take(pairs) {
        reports.push(white_dot_pair(&model, cover, stego)?);
    }
    let csv = report_csv(&reports);
    make_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("diagnostics.csv");
    fs::write(&path, &csv).map_err(|e| Error::io(path.display().to_string(), e))?;
    print!("{csv}");
    let mean = batch_white_dot(&reports)?;
    eprintln!(
        "mean_pos {:.6}  mean_neg {:.6}  pairs_used {}  degenerate {}",
        mean.mean_pos, mean.mean_neg, mean.used, mean.degenerate
    );
    Ok(())
}

fn cmd_export_filters(ckpt_path: &Path) -> Result<()> {
    let (cfg, ckpt) = load_run(ckpt_path)?;
    let model = ckpt.instantiate_weights(&cfg.network)?;
    print!("{}", model.bank.export_filters());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    threads_from_env()?;
    match cli.cmd {
        Cmd::GenCovers {
            count,
            size,
            texture,
            seed,
            out,
        } => cmd_gen_covers(count, size, texture, seed, &out),
        Cmd::Embed {
            covers,
            payload,
            seed,
            out,
            audit,
        } => cmd_embed(&covers, payload, seed, &out, audit),
        Cmd::Train {
            config,
            resume,
            init_from,
        } => cmd_train(&config, resume.as_deref(), init_from.as_deref()),
        Cmd::Eval { ckpt, split } => cmd_eval(&ckpt, split),
        Cmd::Diagnose { ckpt, pairs } => cmd_diagnose(&ckpt, pairs),
        Cmd::ExportFilters { ckpt } => cmd_export_filters(&ckpt),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
