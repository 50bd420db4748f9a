//! Command-line front end: `gen-data`, `train`, `eval`, `ablate`, `report`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::GrayImage;
use serde::Serialize;

use crate::data::{
    clip_dirs, dataset_digest, generate_dataset, load_labeled_frames, load_split, save_dataset,
};
use crate::engine::{
    evaluate, evaluate_labeled, run_ablation, train_student, train_teacher, AblationRow,
    AblationTable, Checkpoint, Config, Role, Scheme, TrainOptions,
};
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::losses::TermFlags;
use crate::metrics::{align_table, LabelMap};
use crate::models::SegmentationNet;

pub const RUN_MANIFEST: &str = "run_manifest.toml";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Parser, Debug)]
#[command(
    name = "tempseg",
    version,
    about = "Temporally consistent segmentation training"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML config with dotted sections, e.g. `train.lambda = 0.1`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed and TEMPSEG_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train a teacher or distil a student.
    Train(TrainArgs),
    /// Evaluate a checkpoint with per-frame inference.
    Eval(EvalArgs),
    /// Train and evaluate a grid of loss-term schemes.
    Ablate(AblateArgs),
    /// Merge evaluation directories into one table.
    Report(ReportArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoleArg {
    Teacher,
    Student,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub role: RoleArg,
    /// Dataset root containing `train/`.
    #[arg(long)]
    pub data: PathBuf,
    /// Teacher checkpoint directory (student role).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Loss terms: none, all, or a list such as `pf,tl`.
    #[arg(long)]
    pub terms: Option<String>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many completed iterations.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Save a checkpoint every N iterations (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FramesArg {
    All,
    Labeled,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// `labeled` reads only annotated frames and skips temporal consistency.
    #[arg(long, value_enum, default_value = "all")]
    pub frames: FramesArg,
    /// Write predicted label maps as PNG.
    #[arg(long)]
    pub dump_predictions: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated scheme letters.
    #[arg(long, default_value = "a,b,c,d,e,j", conflicts_with = "full_grid")]
    pub schemes: String,
    /// Run all ten schemes a..j.
    #[arg(long)]
    pub full_grid: bool,
    /// Reuse a trained teacher instead of training one.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Evaluation output directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: String,
    version: &'static str,
    wall_clock_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset_digest: Option<String>,
    outputs: Vec<String>,
    config: &'a Config,
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: &Config,
    data: Option<&Path>,
    outputs: &[&str],
    started: Instant,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION"),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        dataset_digest: data.map(dataset_digest).transpose()?,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        config,
    };
    let text = toml::to_string(&manifest).expect("manifest serialises");
    write_atomic(&out.join(RUN_MANIFEST), text.as_bytes())
}

fn resolve_config(global: &GlobalArgs) -> Result<Config> {
    let mut cfg = Config::load(global.config.as_deref())?;
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(global: &GlobalArgs) -> Result<&Path> {
    global
        .out
        .as_deref()
        .ok_or_else(|| Error::validation("--out is required for this command"))
}

/// Creates `dir`, refusing a non-empty one unless `force` or `reuse`.
fn prepare_out(dir: &Path, force: bool, reuse: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(Error::io(dir))?
            .next()
            .is_some();
        if non_empty && !force && !reuse {
            return Err(Error::validation(format!(
                "output directory {} is not empty (use --force)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn gen_data(global: &GlobalArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = resolve_config(global)?;
    let out = require_out(global)?;
    prepare_out(out, global.force, false)?;
    for split in ["train", "val"] {
        let dir = out.join(split);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(Error::io(&dir))?;
        }
    }
    let ds = generate_dataset(&cfg.data, cfg.seed)?;
    save_dataset(&ds, out)?;
    println!(
        "wrote {} clips ({} train, {} val) to {}",
        ds.train.len() + ds.val.len(),
        ds.train.len(),
        ds.val.len(),
        out.display()
    );
    write_manifest(out, "gen-data", &cfg, None, &["train", "val"], started)
}

/// Keeps the first `n` lines of a log, dropping entries past a checkpoint.
fn truncate_log(path: &Path, n: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = read_to_string(path)?;
    let kept: String = text.lines().take(n).map(|l| format!("{l}\n")).collect();
    write_atomic(path, kept.as_bytes())
}

fn train(global: &GlobalArgs, args: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let out = require_out(global)?;
    let resume = if args.resume {
        Some(Checkpoint::load(out)?)
    } else {
        None
    };
    let mut cfg = match &resume {
        Some(ck) => ck.config.clone(),
        None => resolve_config(global)?,
    };
    if let Some(t) = &args.terms {
        let terms = TermFlags::parse(t)?;
        if resume.is_some() && terms != cfg.train.terms {
            return Err(Error::validation("--terms differs from the resumed run"));
        }
        cfg.train.terms = terms;
    }
    let role = match args.role {
        RoleArg::Teacher => Role::Teacher,
        RoleArg::Student => Role::Student,
    };
    let teacher = match (role, &args.teacher) {
        (Role::Student, None) => {
            return Err(Error::validation("student training requires --teacher"));
        }
        (Role::Student, Some(dir)) => Some(Checkpoint::load(dir)?.net),
        (Role::Teacher, _) => None,
    };
    prepare_out(out, global.force, resume.is_some())?;
    let log = out.join(TRAIN_LOG);
    match &resume {
        Some(ck) => truncate_log(&log, ck.iteration)?,
        None if log.exists() => std::fs::remove_file(&log).map_err(Error::io(&log))?,
        None => {}
    }
    let clips = load_split(&args.data, "train")?;
    let opts = TrainOptions {
        stop_after: args.stop_after,
        resume,
        log_path: Some(&log),
        checkpoint_dir: Some(out),
        checkpoint_every: args.checkpoint_every,
    };
    let outcome = match &teacher {
        None => train_teacher(&cfg, &clips, opts)?,
        Some(t) => train_student(&cfg, &clips, t, opts)?,
    };
    let ck = &outcome.checkpoint;
    if let Some(last) = outcome.log.last() {
        println!(
            "{role} iteration {}/{}: total {:.6} ce {:.6}",
            ck.iteration, ck.max_iterations, last.loss.total, last.loss.ce
        );
    }
    write_manifest(
        out,
        &format!("train --role {role}"),
        &cfg,
        Some(&args.data),
        &["manifest.toml", TRAIN_LOG],
        started,
    )
}

fn write_label_png(path: &Path, label: &LabelMap) -> Result<()> {
    let img = GrayImage::from_raw(
        label.width() as u32,
        label.height() as u32,
        label.ids().to_vec(),
    )
    .expect("buffer matches dimensions");
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &buf.into_inner())
}

fn class_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|c| {
            if c == 0 {
                "background".into()
            } else {
                format!("class_{c}")
            }
        })
        .collect()
}

fn eval(global: &GlobalArgs, args: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let out = require_out(global)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    prepare_out(out, global.force, false)?;
    let net = &ck.net;
    let mut outputs = vec!["metrics.csv", "per_class.csv", "efficiency.csv"];
    let mut dumps: Vec<(String, Vec<(usize, LabelMap)>)> = Vec::new();
    match args.frames {
        FramesArg::All => {
            let clips = load_split(&args.data, &args.split)?;
            let ev = evaluate(net, &clips)?;
            let r = &ev.report;
            write_atomic(
                &out.join("metrics.csv"),
                r.metrics_csv(ev.param_count).as_bytes(),
            )?;
            write_atomic(&out.join("per_class.csv"), r.per_class_csv().as_bytes())?;
            write_atomic(&out.join("tc_trace.csv"), r.trace_csv().as_bytes())?;
            let table = r.per_class_table(&class_names(r.classes));
            write_atomic(&out.join("per_class.txt"), table.as_bytes())?;
            outputs.extend(["tc_trace.csv", "per_class.txt"]);
            print!("{table}");
            println!(
                "mIoU {:.4}  pixel accuracy {:.4}  TC {:.4}",
                r.miou, r.pixel_accuracy, r.tc
            );
            write_atomic(
                &out.join("efficiency.csv"),
                format!(
                    "metric,value\nparams,{}\nfps,{:.3}\n",
                    ev.param_count, ev.fps
                )
                .as_bytes(),
            )?;
            dumps = ev
                .predictions
                .into_iter()
                .map(|(id, p)| (id, p.into_iter().enumerate().collect()))
                .collect();
        }
        FramesArg::Labeled => {
            let mut frames = Vec::new();
            let mut owners = Vec::new();
            for dir in clip_dirs(&args.data, &args.split)? {
                let (m, f) = load_labeled_frames(&dir)?;
                owners.extend(f.iter().map(|x| (m.id.clone(), x.index)));
                frames.extend(f);
            }
            if frames.is_empty() {
                return Err(Error::validation(format!(
                    "split '{}' has no labelled frames",
                    args.split
                )));
            }
            let t0 = Instant::now();
            let (acc, preds) = evaluate_labeled(net, &frames)?;
            let fps = frames.len() as f64 / t0.elapsed().as_secs_f64().max(1e-12);
            let metrics = format!(
                "metric,value\nmiou,{:.6}\npixel_accuracy,{:.6}\nparams,{}\n",
                acc.miou,
                acc.pixel_accuracy,
                net.param_count()
            );
            write_atomic(&out.join("metrics.csv"), metrics.as_bytes())?;
            let mut per_class = String::from("class,iou\n");
            for (c, v) in acc.per_class_iou.iter().enumerate() {
                per_class += &format!("{c},{}\n", v.map(|v| format!("{v:.6}")).unwrap_or_default());
            }
            write_atomic(&out.join("per_class.csv"), per_class.as_bytes())?;
            write_atomic(
                &out.join("efficiency.csv"),
                format!("metric,value\nparams,{}\nfps,{fps:.3}\n", net.param_count()).as_bytes(),
            )?;
            println!(
                "mIoU {:.4}  pixel accuracy {:.4}",
                acc.miou, acc.pixel_accuracy
            );
            for ((id, t), p) in owners.into_iter().zip(preds) {
                match dumps.last_mut() {
                    Some((last, v)) if *last == id => v.push((t, p)),
                    _ => dumps.push((id, vec![(t, p)])),
                }
            }
        }
    }
    if args.dump_predictions {
        for (id, preds) in &dumps {
            for (t, p) in preds {
                write_label_png(
                    &out.join("predictions")
                        .join(id)
                        .join(format!("pred_{t:03}.png")),
                    p,
                )?;
            }
        }
        outputs.push("predictions");
    }
    write_manifest(out, "eval", &ck.config, Some(&args.data), &outputs, started)
}

fn parse_schemes(args: &AblateArgs) -> Result<Vec<Scheme>> {
    if args.full_grid {
        return Ok(Scheme::ALL.to_vec());
    }
    let mut v: Vec<Scheme> = args
        .schemes
        .split(',')
        .map(Scheme::parse)
        .collect::<Result<_>>()?;
    v.sort();
    v.dedup();
    Ok(v)
}

fn ablate(global: &GlobalArgs, args: &AblateArgs) -> Result<bool> {
    let started = Instant::now();
    let cfg = resolve_config(global)?;
    let out = require_out(global)?;
    prepare_out(out, global.force, false)?;
    let schemes = parse_schemes(args)?;
    let train_clips = load_split(&args.data, "train")?;
    let val = load_split(&args.data, "val")?;
    let teacher = match &args.teacher {
        Some(dir) => Checkpoint::load(dir)?.net,
        None => {
            eprintln!("training teacher");
            train_teacher(&cfg, &train_clips, TrainOptions::default())?
                .checkpoint
                .net
        }
    };
    let jobs = args.jobs.max(1).min(schemes.len().max(1));
    let table = if jobs == 1 {
        run_ablation(&cfg, &train_clips, &val, &schemes, Some(&teacher), |m| {
            eprintln!("{m}")
        })?
    } else {
        let chunks: Vec<Vec<Scheme>> = (0..jobs)
            .map(|j| schemes.iter().copied().skip(j).step_by(jobs).collect())
            .collect();
        let parts: Vec<Result<AblationTable>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| {
                    let (cfg, tr, val, teacher) = (&cfg, &train_clips, &val, &teacher);
                    s.spawn(move || run_ablation(cfg, tr, val, chunk, Some(teacher), |_| {}))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        let mut rows: Vec<AblationRow> = Vec::new();
        for p in parts {
            rows.extend(p?.rows);
        }
        rows.sort_by_key(|r| r.scheme);
        AblationTable { rows }
    };
    write_atomic(&out.join("ablation.csv"), table.to_csv().as_bytes())?;
    let rendered = table.render();
    write_atomic(&out.join("ablation.txt"), rendered.as_bytes())?;
    print!("{rendered}");
    write_manifest(
        out,
        "ablate",
        &cfg,
        Some(&args.data),
        &["ablation.csv", "ablation.txt"],
        started,
    )?;
    Ok(!table.has_failures())
}

fn parse_metrics(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("metric,value") {
        return Err(Error::format(path, "missing `metric,value` header"));
    }
    lines
        .map(|l| {
            l.split_once(',')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::format(path, format!("malformed row '{l}'")))
        })
        .collect()
}

fn report(global: &GlobalArgs, args: &ReportArgs) -> Result<()> {
    let started = Instant::now();
    let mut keys: Vec<String> = Vec::new();
    let mut runs = Vec::new();
    for dir in &args.runs {
        let m = parse_metrics(&dir.join("metrics.csv"))?;
        for (k, _) in &m {
            if !keys.contains(k) {
                keys.push(k.clone());
            }
        }
        runs.push((dir.display().to_string(), m));
    }
    let mut rows = vec![std::iter::once("run".to_string())
        .chain(keys.iter().cloned())
        .collect::<Vec<_>>()];
    for (name, m) in &runs {
        let mut row = vec![name.clone()];
        for k in &keys {
            row.push(
                m.iter()
                    .find(|(kk, _)| kk == k)
                    .map(|(_, v)| v.clone())
                    .unwrap_or_default(),
            );
        }
        rows.push(row);
    }
    let table = align_table(&rows);
    print!("{table}");
    if let Some(out) = &global.out {
        prepare_out(out, global.force, false)?;
        let csv: String = rows.iter().map(|r| r.join(",") + "\n").collect();
        write_atomic(&out.join("report.csv"), csv.as_bytes())?;
        write_atomic(&out.join("report.txt"), table.as_bytes())?;
        let cfg = resolve_config(global)?;
        write_manifest(
            out,
            "report",
            &cfg,
            None,
            &["report.csv", "report.txt"],
            started,
        )?;
    }
    Ok(())
}

/// Runs one parsed command. `Ok(false)` signals a partial failure that
/// already produced output.
pub fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData => gen_data(&cli.global).map(|_| true),
        Command::Train(a) => train(&cli.global, a).map(|_| true),
        Command::Eval(a) => eval(&cli.global, a).map(|_| true),
        Command::Ablate(a) => ablate(&cli.global, a),
        Command::Report(a) => report(&cli.global, a).map(|_| true),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: some ablation members failed");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
