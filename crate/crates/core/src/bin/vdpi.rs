//! `vdpi`: synthesize data, train the three stages, evaluate, run inference
//! and self-check the exact pseudo-inverse oracle.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or missing prerequisite.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vdpi::config::RunConfigFile;
use vdpi::data::{
    load_png, save_png, scan_dataset, synth_generate, write_synth, Layout, Manifest, PairedDataset, Pattern,
};
use vdpi::engine::{evaluate, Checkpoint, ColorSpace, EvalMode, EvalRequest, Restorer, Stage, Trainer};
use vdpi::engine::{psnr, Prerequisites};
use vdpi::oracle::{self_check, UniformBlur};
use vdpi::vdn::Ablation;
use vdpi::{Error, Tensor};

#[derive(Parser)]
#[command(name = "vdpi", version, about = "Video deblurring with learned blur and pseudo-inverse operators")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic blurred/sharp dataset with a manifest.
    Synth(SynthArgs),
    /// Train one stage (blur, pinv or vdn).
    Train(TrainArgs),
    /// Score checkpoints on a dataset and write a report.
    Eval(EvalArgs),
    /// Check the exact pseudo-inverse identities for a known uniform kernel.
    OracleCheck(OracleArgs),
    /// Restore a directory of blurred frames.
    Infer(InferArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    pattern: Option<Pattern>,
    #[arg(long)]
    velocity: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    test_clips: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    /// Synth output directory, manifest file or dataset root (with --layout).
    #[arg(long, alias = "manifest")]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    layout: Option<Layout>,
    /// Sequence-id prefix to use (`train`, `test`, `val`).
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: Option<Stage>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Prerequisite checkpoints; the stage is read from each file.
    #[arg(long = "ckpt")]
    ckpts: Vec<PathBuf>,
    #[arg(long)]
    blur_ckpt: Option<PathBuf>,
    #[arg(long)]
    pinv_ckpt: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iters_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    mode: EvalMode,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "ckpt")]
    ckpts: Vec<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Writes `<report>.jsonl` and `<report>.txt`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Expected variant of the vdn checkpoint (deblur mode).
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    /// PSNR on RGB instead of luma.
    #[arg(long)]
    rgb: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelKind {
    Identity,
    Box,
    Gaussian,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, value_enum, default_value = "gaussian")]
    kernel: KernelKind,
    #[arg(long, default_value_t = 3)]
    kernel_size: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1e-3, allow_negative_numbers = true)]
    delta: f64,
    /// Largest accepted ‖HH⁺Hx − Hx‖/‖Hx‖.
    #[arg(long, default_value_t = 1e-2)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long = "ckpt", required = true)]
    ckpts: Vec<PathBuf>,
    /// Directory of blurred PNG frames, processed in file-name order.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Prerequisite(_) | Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::OracleCheck(a) => oracle_check(a),
        Cmd::Infer(a) => infer(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfigFile> {
    Ok(match path {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    })
}

fn cache_path(cfg: &RunConfigFile, name: &str) -> Option<PathBuf> {
    cfg.cache_dir().map(|d| d.join(name))
}

fn synth(a: SynthArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    let s = &mut cfg.synth;
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.pattern {
        s.pattern = v;
    }
    if let Some(v) = a.velocity {
        s.velocity = v;
    }
    if let Some(v) = a.noise {
        s.noise.sigma = v;
    }
    if let Some(v) = a.clips {
        s.clips = v;
    }
    if let Some(v) = a.test_clips {
        s.test_clips = v;
    }
    if let Err(e) = s.validate() {
        return usage(e.to_string());
    }
    let out = match a.out.or_else(|| cfg.paths.data.clone()).or_else(|| cache_path(&cfg, "synth")) {
        Some(o) => o,
        None => return usage("no output directory: pass --out, set paths.data or VDPI_CACHE"),
    };
    let seqs = synth_generate(&cfg.synth)?;
    let manifest = write_synth(&out, &seqs, a.force)?;
    let frames: usize = seqs.iter().map(|s| s.blur.len()).sum();
    let mut scores = Vec::with_capacity(seqs.len());
    for s in &seqs {
        let mut p = 0.0;
        for (b, x) in s.blur.iter().zip(&s.sharp) {
            p += psnr(x, b, ColorSpace::YcbcrY)?;
        }
        let p = p / s.blur.len() as f64;
        println!("{}\tpsnr(blur, sharp) {p:.2} dB", s.id);
        scores.push(p);
    }
    let (lo, hi) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    println!(
        "wrote {} clips ({} train, {} test), {frames} frames, {} manifest entries to {}",
        seqs.len(),
        cfg.synth.clips - cfg.synth.test_clips,
        cfg.synth.test_clips,
        manifest.entries.len(),
        out.display()
    );
    println!("psnr(blur, sharp): mean {mean:.2} dB, min {lo:.2} dB, max {hi:.2} dB");
    Ok(())
}

/// A manifest from a synth dir, a `.tsv` file, or a raw dataset root.
fn open_manifest(path: &Path, layout: Option<Layout>) -> CliResult<Manifest> {
    if let Some(l) = layout {
        let m = scan_dataset(path, l)?;
        for w in &m.warnings {
            log::warn!("{w}");
        }
        return Ok(m);
    }
    let file = if path.is_dir() { path.join("manifest.tsv") } else { path.to_path_buf() };
    if !file.is_file() {
        return usage(format!("{} is not a manifest; pass --layout for a dataset root", file.display()));
    }
    Ok(Manifest::read_tsv(&file)?)
}

fn load_data(a: &DataArgs, cfg: &RunConfigFile, default_split: Option<&str>) -> CliResult<PairedDataset> {
    let Some(path) = a.data.clone().or_else(|| cfg.paths.data.clone()) else {
        return usage("no dataset: pass --data or set paths.data");
    };
    let m = open_manifest(&path, a.layout.or(cfg.paths.layout))?;
    let m = match a.split.as_deref() {
        Some(s) => {
            let part = m.split(s);
            if part.entries.is_empty() {
                return usage(format!("split {s:?} is empty in {}", path.display()));
            }
            part
        }
        None => match default_split {
            Some(s) if !m.split(s).entries.is_empty() => m.split(s),
            Some(_) => m,
            None => {
                // Everything except the training split, when that leaves anything.
                let held = Manifest {
                    entries: m.entries.iter().filter(|e| !e.sequence_id.starts_with("train/")).cloned().collect(),
                    warnings: Vec::new(),
                };
                if held.entries.is_empty() {
                    m
                } else {
                    held
                }
            }
        },
    };
    Ok(PairedDataset::load(&m, a.workers)?)
}

#[derive(Default)]
struct Ckpts {
    blur: Option<Checkpoint>,
    pinv: Option<Checkpoint>,
    vdn: Option<Checkpoint>,
}

fn sort_checkpoints(paths: &[PathBuf]) -> CliResult<Ckpts> {
    let mut out = Ckpts::default();
    for p in paths {
        let c = Checkpoint::load(p)?;
        let slot = match c.meta.stage {
            Stage::Blur => &mut out.blur,
            Stage::Pinv => &mut out.pinv,
            Stage::Vdn => &mut out.vdn,
        };
        if slot.is_some() {
            return usage(format!("more than one {} checkpoint given", c.meta.stage));
        }
        *slot = Some(c);
    }
    Ok(out)
}

fn fill(slot: &mut Option<Checkpoint>, path: Option<&Path>, stage: Stage) -> CliResult {
    if let (None, Some(p)) = (slot.as_ref(), path) {
        let c = Checkpoint::load(p)?;
        if c.meta.stage != stage {
            return usage(format!("{} is a {} checkpoint, expected {stage}", p.display(), c.meta.stage));
        }
        *slot = Some(c);
    }
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.stage {
        cfg.set_stage(s);
    }
    if let Some(ab) = a.ablation {
        cfg.set_ablation(ab);
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.iters_per_epoch {
        cfg.train.iters_per_epoch = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    cfg.train.workers = a.data.workers;
    cfg.validate()?;
    let stage = cfg.stage;
    let models = cfg.models()?;

    let mut ck = sort_checkpoints(&a.ckpts)?;
    fill(&mut ck.blur, a.blur_ckpt.as_deref().or(cfg.paths.blur_ckpt.as_deref()), Stage::Blur)?;
    fill(&mut ck.pinv, a.pinv_ckpt.as_deref().or(cfg.paths.pinv_ckpt.as_deref()), Stage::Pinv)?;
    let resume = match a.resume.as_deref().or(cfg.paths.resume.as_deref()) {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let out = match a.out.clone().or_else(|| cfg.paths.out.clone()) {
        Some(o) => o,
        None => match cache_path(&cfg, &format!("{stage}.ckpt")) {
            Some(o) => o,
            None => return usage("no output path: pass --out, set paths.out or VDPI_CACHE"),
        },
    };
    let prereq = Prerequisites {
        blur: ck.blur.as_ref(),
        pinv: ck.pinv.as_ref(),
    };
    let mut trainer = Trainer::new(&cfg.train_config(), &models, prereq, resume.as_ref())?.with_run_config(cfg.to_json());
    let data = Arc::new(load_data(&a.data, &cfg, Some("train"))?);
    log::info!(
        "{stage}: {} sequences, {} pairs, steps {}..{}",
        data.sequences.len(),
        data.pairs(),
        trainer.step(),
        trainer.total_steps()
    );
    let mut log_lines = String::new();
    trainer.run(data, None, |s| {
        log_lines.push_str(&serde_json::to_string(s).expect("stats serialize"));
        log_lines.push('\n');
    })?;
    trainer.verify_frozen()?;
    let c = trainer.checkpoint();
    c.save(&out)?;
    let log_path = out.with_extension("log.jsonl");
    fs::write(&log_path, log_lines).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    println!(
        "wrote {} ({} stage, step {}/{}, loss {}, weights {}, config {})",
        out.display(),
        stage,
        c.meta.step,
        c.meta.total_steps,
        c.meta.last_loss.map(|l| format!("{l:.6}")).unwrap_or_else(|| "n/a".into()),
        &c.meta.weights_checksum[..16],
        &c.meta.config_hash[..16]
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let cfg = load_config(a.config.as_deref())?;
    let mut ck = sort_checkpoints(&a.ckpts)?;
    fill(&mut ck.blur, cfg.paths.blur_ckpt.as_deref(), Stage::Blur)?;
    fill(&mut ck.pinv, cfg.paths.pinv_ckpt.as_deref(), Stage::Pinv)?;
    fill(&mut ck.vdn, cfg.paths.vdn_ckpt.as_deref(), Stage::Vdn)?;
    if let (Some(want), EvalMode::Deblur) = (a.ablation, a.mode) {
        let Some(v) = &ck.vdn else {
            return usage("deblur evaluation needs a vdn checkpoint");
        };
        let vc = v.vdn_model()?.0.cfg;
        if Ablation::from_flags(vc.flags) != Some(want) {
            return usage(format!("vdn checkpoint is not the {} variant", want.label()));
        }
    }
    let ds = load_data(&a.data, &cfg, None)?;
    let req = EvalRequest {
        mode: a.mode,
        blur: ck.blur.as_ref(),
        pinv: ck.pinv.as_ref(),
        vdn: ck.vdn.as_ref(),
        space: if a.rgb { ColorSpace::Rgb } else { ColorSpace::YcbcrY },
        workers: a.data.workers,
    };
    let report = evaluate(&req, &ds)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(prefix) = a.report {
        let write = |ext: &str, body: &str| -> CliResult {
            let p = prefix.with_extension(ext);
            if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(d).map_err(|e| Error::Io {
                    path: d.to_path_buf(),
                    source: e,
                })?;
            }
            fs::write(&p, body).map_err(|e| Failure::Run(Error::Io { path: p.clone(), source: e }))
        };
        write("jsonl", &report.to_jsonl())?;
        write("txt", &table)?;
    }
    Ok(())
}

fn oracle_check(a: OracleArgs) -> CliResult {
    if !(a.delta > 0.0) {
        return usage(format!("--delta must be > 0, got {}", a.delta));
    }
    if !(2..=32).contains(&a.size) {
        return usage(format!("--size must be in 2..=32 (dense check is O(size⁶)), got {}", a.size));
    }
    let b = match a.kernel {
        KernelKind::Identity => UniformBlur::identity(a.delta),
        KernelKind::Box => UniformBlur::boxed(a.kernel_size, a.delta)?,
        KernelKind::Gaussian => UniformBlur::gaussian(a.kernel_size, a.sigma, a.delta)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let x = Tensor::from_vec(&[a.size, a.size], (0..a.size * a.size).map(|_| rng.gen::<f64>()).collect())?;
    let r = self_check(&b, &x)?;
    let checks = [
        ("r1 = |HH+Hx - Hx|/|Hx|", r.residuals.r1, a.tolerance),
        ("dense pseudo-inverse rel. error", r.dense_rel_error, 1e-8),
        ("dense blur rel. error", r.dense_blur_error, 1e-8),
    ];
    let mut ok = true;
    for (name, v, tol) in checks {
        let pass = v < tol;
        ok &= pass;
        println!("{} {name}: {v:.3e} (< {tol:.0e})", if pass { "PASS" } else { "FAIL" });
    }
    println!("info r2 = |H+HH+x - H+x|/|H+x|: {:.3e}", r.residuals.r2);
    println!("info null-space energy: {:.3e}", r.null_energy);
    if ok {
        Ok(())
    } else {
        Err(Failure::Run(Error::Contract("oracle identities failed".into())))
    }
}

fn infer(a: InferArgs) -> CliResult {
    let ck = sort_checkpoints(&a.ckpts)?;
    let Some(v) = &ck.vdn else {
        return usage("inference needs a vdn checkpoint");
    };
    let r = Restorer::new(v, ck.blur.as_ref(), ck.pinv.as_ref())?;
    let mut files: Vec<PathBuf> = fs::read_dir(&a.input)
        .map_err(|e| Error::Io {
            path: a.input.clone(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) == Some(true))
        .collect();
    files.sort();
    if files.is_empty() {
        return usage(format!("no PNG frames in {}", a.input.display()));
    }
    let frames = files.iter().map(|f| load_png(f)).collect::<vdpi::Result<Vec<_>>>()?;
    let restored = r.restore_sequence(&frames)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    for (f, img) in files.iter().zip(&restored) {
        save_png(&a.out.join(f.file_name().expect("file")), img)?;
    }
    println!("restored {} frames into {}", restored.len(), a.out.display());
    Ok(())
}
