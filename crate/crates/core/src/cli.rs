//! Command-line harness: `generate`, `train`, `eval` and `ablate`.
//!
//! Every command resolves its settings from an optional `--config` file
//! overlaid with `--key value` flags (flag names are config keys, with `-`
//! accepted for `_`). The resolved settings are written to
//! `<out>/run_config.txt` before the command runs.
//!
//! Exit codes: 0 success, 2 invalid configuration or usage, 3 runtime failure
//! (I/O, corrupt inputs, divergence).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::{format_list, parse_list, KvMap};
use crate::error::{Error, Result};
use crate::evalkit::{
    format_pose_record, parse_pose_records, pose_record_header, FinalPose, MetricAccumulator, MetricReport,
};
use crate::synthgen::{generate_dataset, points_per_pedestrian, read_dataset, write_dataset, Dataset, DatasetConfig, Scene};
use crate::toynet::model::{InputMode, Model, ModelConfig};
use crate::toynet::roi::{FusionMode, RoiOp};
use crate::toynet::train::{evaluate, gt_poses, loss_log_header, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const RUN_CONFIG_FILE: &str = "run_config.txt";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Parser)]
#[command(name = "hperl", version, about = "Pedestrian 3D pose estimation from camera and LiDAR")]
pub struct Cli {
    /// Configuration file of `key=value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into the output directory.
    Generate(Overrides),
    /// Train a model on a dataset.
    Train(Overrides),
    /// Evaluate a checkpoint (or a prediction file) on a dataset split.
    Eval(Overrides),
    /// Train and evaluate every cell of an ablation grid.
    Ablate(Overrides),
}

#[derive(Debug, clap::Args)]
pub struct Overrides {
    /// Config overrides as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub args: Vec<String>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Turn `--key value` / `--key=value` pairs into a map.
pub fn parse_overrides(args: &[String]) -> Result<KvMap> {
    let mut m = KvMap::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            return Err(config_err(format!("unexpected argument {a:?}")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| config_err(format!("flag --{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        let key = key.replace('-', "_");
        if m.get_str(&key).is_some() {
            return Err(config_err(format!("flag --{key} given twice")));
        }
        m.set(&key, value);
    }
    Ok(m)
}

const DATASET_KEYS: [&str; 12] = [
    "scenes",
    "seed",
    "train_fraction",
    "pedestrians_min",
    "pedestrians_max",
    "depth_min",
    "depth_max",
    "occlusion_rate",
    "min_points",
    "joint_noise",
    "image_noise",
    "max_yaw",
];

fn model_keys() -> BTreeSet<String> {
    let mut k: BTreeSet<String> = ModelConfig::default().to_kv().keys().map(str::to_string).collect();
    k.insert("preset".into());
    k.insert("anchor_poses".into());
    k
}

fn check_keys(m: &KvMap, allowed: &BTreeSet<String>) -> Result<()> {
    for k in m.keys() {
        if !allowed.contains(k) {
            return Err(config_err(format!("unknown key {k}")));
        }
    }
    Ok(())
}

pub fn dataset_config_from_kv(m: &KvMap) -> Result<DatasetConfig> {
    let mut c = DatasetConfig::default();
    m.read_into("scenes", &mut c.scenes)?;
    m.read_into("seed", &mut c.seed)?;
    m.read_into("train_fraction", &mut c.train_fraction)?;
    m.read_into("pedestrians_min", &mut c.pedestrians.0)?;
    m.read_into("pedestrians_max", &mut c.pedestrians.1)?;
    m.read_into("depth_min", &mut c.scene.depth_range.0)?;
    m.read_into("depth_max", &mut c.scene.depth_range.1)?;
    m.read_into("occlusion_rate", &mut c.scene.occlusion_rate)?;
    m.read_into("min_points", &mut c.scene.min_points)?;
    m.read_into("joint_noise", &mut c.scene.joint_noise)?;
    m.read_into("image_noise", &mut c.scene.image_noise)?;
    m.read_into("max_yaw", &mut c.scene.max_yaw)?;
    if !(0.0..=1.0).contains(&c.train_fraction) {
        return Err(config_err("train_fraction must lie in [0, 1]"));
    }
    if c.pedestrians.0 > c.pedestrians.1 {
        return Err(config_err("pedestrians_min exceeds pedestrians_max"));
    }
    c.scene.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(c)
}

pub fn dataset_config_to_kv(c: &DatasetConfig) -> KvMap {
    let mut m = KvMap::new();
    m.set("scenes", c.scenes);
    m.set("seed", c.seed);
    m.set("train_fraction", c.train_fraction);
    m.set("pedestrians_min", c.pedestrians.0);
    m.set("pedestrians_max", c.pedestrians.1);
    m.set("depth_min", c.scene.depth_range.0);
    m.set("depth_max", c.scene.depth_range.1);
    m.set("occlusion_rate", c.scene.occlusion_rate);
    m.set("min_points", c.scene.min_points);
    m.set("joint_noise", c.scene.joint_noise);
    m.set("image_noise", c.scene.image_noise);
    m.set("max_yaw", c.scene.max_yaw);
    m
}

fn require_path(m: &KvMap, key: &str) -> Result<PathBuf> {
    m.get_str(key)
        .map(PathBuf::from)
        .ok_or_else(|| config_err(format!("missing key {key}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Map a failure to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::AnchorData(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Ok(v) = std::env::var("HPERL_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                // fails harmlessly if a pool already exists in this process
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: HPERL_THREADS must be a positive integer");
                return EXIT_CONFIG;
            }
        }
    }
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Settings from the config file overlaid with flags and `--seed`.
pub fn resolve(cli: &Cli, overrides: &Overrides) -> Result<KvMap> {
    let base = match &cli.config {
        Some(p) => KvMap::load(p)?,
        None => KvMap::new(),
    };
    let mut flags = parse_overrides(&overrides.args)?;
    if let Some(s) = cli.seed {
        if flags.get_str("seed").is_some() {
            return Err(config_err("seed given both as --seed and as a key"));
        }
        flags.set("seed", s);
    }
    Ok(base.merged(&flags))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(o) => cmd_generate(&resolve(cli, o)?, &cli.out).map(|_| ()),
        Command::Train(o) => cmd_train(&resolve(cli, o)?, &cli.out).map(|_| ()),
        Command::Eval(o) => cmd_eval(&resolve(cli, o)?, &cli.out).map(|_| ()),
        Command::Ablate(o) => cmd_ablate(&resolve(cli, o)?, &cli.out).map(|_| ()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateSummary {
    pub scenes: usize,
    pub pedestrians: usize,
    pub mean_points_per_pedestrian: f64,
}

pub fn cmd_generate(m: &KvMap, out: &Path) -> Result<GenerateSummary> {
    check_keys(m, &DATASET_KEYS.iter().map(|s| s.to_string()).collect())?;
    let cfg = dataset_config_from_kv(m)?;
    create_dir(out)?;
    dataset_config_to_kv(&cfg).save(&out.join(RUN_CONFIG_FILE))?;
    let t = Instant::now();
    let ds = generate_dataset(&cfg)?;
    write_dataset(&ds, out)?;
    let counts: Vec<usize> = ds.scenes.iter().flat_map(points_per_pedestrian).collect();
    let summary = GenerateSummary {
        scenes: ds.scenes.len(),
        pedestrians: counts.len(),
        mean_points_per_pedestrian: if counts.is_empty() {
            0.0
        } else {
            counts.iter().sum::<usize>() as f64 / counts.len() as f64
        },
    };
    println!(
        "scenes={} pedestrians={} mean_points_per_pedestrian={:.2} seconds={:.1}",
        summary.scenes,
        summary.pedestrians,
        summary.mean_points_per_pedestrian,
        t.elapsed().as_secs_f64()
    );
    Ok(summary)
}

fn train_keys() -> BTreeSet<String> {
    let mut k = model_keys();
    k.extend(["dataset", "resume"].map(String::from));
    k
}

/// Rows of a loss log that belong to epochs before `epoch`, header included.
fn loss_log_prefix(path: &Path, epoch: usize) -> Result<String> {
    let mut text = String::from(loss_log_header());
    if epoch == 0 {
        return Ok(text);
    }
    let old = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = 0;
    for line in old.lines().skip(1) {
        let e: usize = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed loss log row"))?;
        if e < epoch {
            text.push_str(line);
            text.push('\n');
            rows += 1;
        }
    }
    if rows != epoch {
        return Err(Error::format(path, format!("{rows} logged epochs, checkpoint has {epoch}")));
    }
    Ok(text)
}

pub fn cmd_train(m: &KvMap, out: &Path) -> Result<TrainState> {
    check_keys(m, &train_keys())?;
    let dataset_dir = require_path(m, "dataset")?;
    let mut model_kv = m.clone();
    let resume = m.get_str("resume").map(PathBuf::from);
    let mut state = match &resume {
        Some(p) => {
            let mut st = TrainState::load(p)?;
            // flags may change the schedule but not the architecture
            let merged = st.model.config.to_kv().merged(&without(&model_kv, &["dataset", "resume", "preset"]));
            let cfg = ModelConfig::from_kv(&merged)?;
            let probe = Model::new(cfg.clone())?;
            if probe.params.iter().map(|(n, t)| (n.to_string(), t.shape.clone())).collect::<Vec<_>>()
                != st.model.params.iter().map(|(n, t)| (n.to_string(), t.shape.clone())).collect::<Vec<_>>()
            {
                return Err(config_err("overrides change the architecture of the resumed checkpoint"));
            }
            st.model.config = cfg;
            st
        }
        None => {
            model_kv = without(&model_kv, &["dataset", "resume"]);
            TrainState::new(Model::new(ModelConfig::from_kv(&model_kv)?)?)
        }
    };
    let ds = read_dataset(&dataset_dir)?;
    create_dir(out)?;
    let mut resolved = state.model.config.to_kv();
    resolved.set("dataset", dataset_dir.display());
    if let Some(r) = &resume {
        resolved.set("resume", r.display());
    }
    resolved.save(&out.join(RUN_CONFIG_FILE))?;

    let log_path = out.join(LOSS_LOG_FILE);
    write_text(&log_path, &loss_log_prefix(&log_path, state.epoch)?)?;
    let best_path = out.join(BEST_CHECKPOINT);
    let mut best = best_logged_loss(&log_path)?;
    if state.epoch == 0 {
        state.save(&out.join(LAST_CHECKPOINT))?;
    }
    let train = ds.split(&ds.manifest.train);
    let result = state.train(&train, &ds.manifest.extents, &ds.manifest.joint_order, |st, log| {
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        f.write_all(log.to_csv_row().as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        st.save(&out.join(LAST_CHECKPOINT))?;
        if best.is_none_or(|b| log.loss.total < b) {
            best = Some(log.loss.total);
            st.save(&best_path)?;
        }
        println!(
            "epoch={} lr={} total={:.6} rpn_obj={:.6} rpn_reg={:.6} cls={:.6} pose_2d={:.6} pose_3d={:.6}",
            log.epoch,
            log.learning_rate,
            log.loss.total,
            log.loss.rpn_obj,
            log.loss.rpn_reg,
            log.loss.cls,
            log.loss.pose_2d,
            log.loss.pose_3d
        );
        Ok(())
    });
    if let Err(e) = result {
        if let Error::Diverged { step, detail } = &e {
            eprintln!("training diverged at step {step}: {detail}; last good state in {}", out.join(LAST_CHECKPOINT).display());
        }
        return Err(e);
    }
    state.save(&out.join(FINAL_CHECKPOINT))?;
    if !best_path.exists() {
        state.save(&best_path)?;
    }
    Ok(state)
}

fn without(m: &KvMap, keys: &[&str]) -> KvMap {
    let mut out = KvMap::new();
    for k in m.keys().filter(|k| !keys.contains(k)) {
        out.set(k, m.get_str(k).unwrap_or_default());
    }
    out
}

fn best_logged_loss(path: &Path) -> Result<Option<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut best: Option<f64> = None;
    for line in text.lines().skip(1) {
        let v: f64 = line
            .split(',')
            .nth(2)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed loss log row"))?;
        if best.is_none_or(|b| v < b) {
            best = Some(v);
        }
    }
    Ok(best)
}

fn split_scenes<'a>(ds: &'a Dataset, split: &str) -> Result<Vec<&'a Scene>> {
    match split {
        "eval" => Ok(ds.split(&ds.manifest.eval)),
        "train" => Ok(ds.split(&ds.manifest.train)),
        "all" => Ok(ds.scenes.iter().collect()),
        other => Err(config_err(format!("unknown split {other:?}"))),
    }
}

/// Metrics and predictions of an eval run.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub label: String,
    pub report: MetricReport,
    pub predictions: Vec<(u64, FinalPose)>,
}

pub fn table_header() -> &'static str {
    "model,mpjpe_2d_px,pckh,cde_m,xye_m"
}

pub fn table_row(label: &str, r: &MetricReport) -> String {
    format!("{label},{:.2},{:.4},{:.3},{:.3}", r.mpjpe_2d, r.pckh, r.cde, r.xye)
}

fn score_predictions(scenes: &[&Scene], preds: &[(u64, FinalPose)], ds: &Dataset) -> MetricReport {
    let mut acc = MetricAccumulator::default();
    for s in scenes {
        let p: Vec<FinalPose> = preds.iter().filter(|(id, _)| *id == s.id).map(|(_, f)| f.clone()).collect();
        acc.add_scene(&p, &gt_poses(s), &ds.manifest.joint_order);
    }
    acc.report()
}

pub fn cmd_eval(m: &KvMap, out: &Path) -> Result<EvalOutcome> {
    let allowed: BTreeSet<String> = ["dataset", "checkpoint", "split", "predictions", "seed"].map(String::from).into();
    check_keys(m, &allowed)?;
    let dataset_dir = require_path(m, "dataset")?;
    let split = m.get_str("split").unwrap_or("eval").to_string();
    let source = match (m.get_str("checkpoint"), m.get_str("predictions")) {
        (Some(_), Some(_)) => return Err(config_err("give either checkpoint or predictions, not both")),
        (None, None) => return Err(config_err("missing key checkpoint (or predictions)")),
        (Some(c), None) => ("checkpoint", c.to_string()),
        (None, Some(p)) => ("predictions", p.to_string()),
    };
    let ds = read_dataset(&dataset_dir)?;
    let scenes = split_scenes(&ds, &split)?;
    create_dir(out)?;
    let mut resolved = KvMap::new();
    resolved.set("dataset", dataset_dir.display());
    resolved.set("split", &split);
    resolved.set(source.0, &source.1);
    resolved.save(&out.join(RUN_CONFIG_FILE))?;

    let (label, report, predictions) = match source {
        ("checkpoint", c) => {
            let state = TrainState::load(Path::new(&c))?;
            let (report, preds) = evaluate(&state.model, &scenes, &ds.manifest.extents, &ds.manifest.joint_order)?;
            let cfg = &state.model.config;
            let label = match cfg.mode {
                InputMode::Rgb => "rgb".to_string(),
                InputMode::Fusion => format!("fusion-{}-{}", name_fusion(cfg.fusion), name_roi(cfg.roi_op)),
            };
            (label, report, preds)
        }
        (_, p) if p == "gt" => {
            let preds: Vec<(u64, FinalPose)> = scenes
                .iter()
                .flat_map(|s| {
                    s.gt.iter().map(|g| {
                        (
                            s.id,
                            FinalPose {
                                pose_2d: g.pose_2d,
                                pose_3d: g.pose_3d,
                                confidence: 1.0,
                            },
                        )
                    })
                })
                .collect();
            ("ground-truth".to_string(), score_predictions(&scenes, &preds, &ds), preds)
        }
        (_, p) => {
            let path = PathBuf::from(&p);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let preds = parse_pose_records(&text, &path)?;
            ("predictions".to_string(), score_predictions(&scenes, &preds, &ds), preds)
        }
    };
    let mut dump = pose_record_header();
    for (id, f) in &predictions {
        dump.push_str(&format_pose_record(*id, f.confidence, &f.pose_2d, &f.pose_3d));
    }
    write_text(&out.join(PREDICTIONS_FILE), &dump)?;
    report.write(&out.join(METRICS_FILE))?;
    println!("{}", table_header());
    println!("{}", table_row(&label, &report));
    Ok(EvalOutcome {
        label,
        report,
        predictions,
    })
}

fn name_fusion(f: FusionMode) -> &'static str {
    match f {
        FusionMode::Concat => "concat",
        FusionMode::Mean => "mean",
    }
}

fn name_roi(r: RoiOp) -> &'static str {
    match r {
        RoiOp::Align => "align",
        RoiOp::Pool => "pool",
    }
}

/// One cell of an ablation grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationCell {
    pub mode: InputMode,
    pub fusion: FusionMode,
    pub roi_op: RoiOp,
    pub flip: bool,
}

impl AblationCell {
    pub fn name(&self) -> String {
        let mode = match self.mode {
            InputMode::Rgb => "rgb",
            InputMode::Fusion => "fusion",
        };
        let flip = if self.flip { "flip" } else { "noflip" };
        format!("{mode}-{}-{}-{flip}", name_fusion(self.fusion), name_roi(self.roi_op))
    }
}

pub fn ablation_header() -> &'static str {
    "cell,mode,fusion,roi_op,flip,mpjpe_2d_px,pckh,cde_m,xye_m,status"
}

fn parse_grid<T: Copy>(m: &KvMap, key: &str, default: &str, options: &[(&str, T)]) -> Result<Vec<T>> {
    let names: Vec<String> = parse_list(key, m.get_str(key).unwrap_or(default))?;
    if names.is_empty() {
        return Err(config_err(format!("{key} must not be empty")));
    }
    names
        .iter()
        .map(|n| {
            options
                .iter()
                .find(|(o, _)| o == n)
                .map(|(_, v)| *v)
                .ok_or_else(|| config_err(format!("invalid value {n:?} in {key}")))
        })
        .collect()
}

pub fn ablation_grid(m: &KvMap) -> Result<Vec<AblationCell>> {
    let modes = parse_grid(m, "grid.modes", "rgb,fusion", &[("rgb", InputMode::Rgb), ("fusion", InputMode::Fusion)])?;
    let fusions = parse_grid(m, "grid.fusions", "concat,mean", &[("concat", FusionMode::Concat), ("mean", FusionMode::Mean)])?;
    let rois = parse_grid(m, "grid.roi_ops", "align,pool", &[("align", RoiOp::Align), ("pool", RoiOp::Pool)])?;
    let flips = parse_grid(m, "grid.flips", "off,on", &[("off", false), ("on", true)])?;
    let mut cells = Vec::new();
    for &mode in &modes {
        for &fusion in &fusions {
            for &roi_op in &rois {
                for &flip in &flips {
                    cells.push(AblationCell {
                        mode,
                        fusion,
                        roi_op,
                        flip,
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Train and evaluate each grid cell with shared seeds. A failing cell is
/// recorded in its row and the sweep continues.
pub fn cmd_ablate(m: &KvMap, out: &Path) -> Result<Vec<String>> {
    let mut allowed = train_keys();
    allowed.remove("resume");
    allowed.extend(["grid.modes", "grid.fusions", "grid.roi_ops", "grid.flips", "split"].map(String::from));
    check_keys(m, &allowed)?;
    let cells = ablation_grid(m)?;
    let dataset_dir = require_path(m, "dataset")?;
    let split = m.get_str("split").unwrap_or("eval").to_string();
    let base = without(m, &["grid.modes", "grid.fusions", "grid.roi_ops", "grid.flips", "split"]);
    // validate the shared settings before the sweep starts
    ModelConfig::from_kv(&without(&base, &["dataset"]))?;
    create_dir(out)?;
    let mut resolved = base.clone();
    for key in ["grid.modes", "grid.fusions", "grid.roi_ops", "grid.flips"] {
        let names: Vec<String> = match key {
            "grid.modes" => cells.iter().map(|c| if c.mode == InputMode::Rgb { "rgb" } else { "fusion" }.into()).collect(),
            "grid.fusions" => cells.iter().map(|c| name_fusion(c.fusion).into()).collect(),
            "grid.roi_ops" => cells.iter().map(|c| name_roi(c.roi_op).into()).collect(),
            _ => cells.iter().map(|c| if c.flip { "on" } else { "off" }.into()).collect(),
        };
        let mut uniq: Vec<String> = Vec::new();
        for n in names {
            if !uniq.contains(&n) {
                uniq.push(n);
            }
        }
        resolved.set(key, format_list(&uniq));
    }
    resolved.set("split", &split);
    resolved.save(&out.join(RUN_CONFIG_FILE))?;

    let table_path = out.join(ABLATION_FILE);
    let mut table = format!("{}\n", ablation_header());
    write_text(&table_path, &table)?;
    let mut rows = Vec::new();
    for cell in cells {
        let dir = out.join(cell.name());
        let mut kv = base.clone();
        kv.set("mode", if cell.mode == InputMode::Rgb { "rgb" } else { "fusion" });
        kv.set("fusion", name_fusion(cell.fusion));
        kv.set("roi_op", name_roi(cell.roi_op));
        kv.set("flip", cell.flip);
        let result = cmd_train(&kv, &dir.join("train")).and_then(|_| {
            let mut e = KvMap::new();
            e.set("dataset", dataset_dir.display());
            e.set("checkpoint", dir.join("train").join(FINAL_CHECKPOINT).display());
            e.set("split", &split);
            cmd_eval(&e, &dir.join("eval"))
        });
        let mut row = format!(
            "{},{},{},{},{},",
            cell.name(),
            if cell.mode == InputMode::Rgb { "rgb" } else { "fusion" },
            name_fusion(cell.fusion),
            name_roi(cell.roi_op),
            cell.flip
        );
        match result {
            Ok(o) => {
                let r = o.report;
                let _ = write!(row, "{:.6},{:.6},{:.6},{:.6},ok", r.mpjpe_2d, r.pckh, r.cde, r.xye);
            }
            Err(e) => {
                log::warn!("ablation cell {} failed: {e}", cell.name());
                let msg = e.to_string().replace([',', '\n'], ";");
                let _ = write!(row, ",,,,error: {msg}");
            }
        }
        println!("{row}");
        table.push_str(&row);
        table.push('\n');
        write_text(&table_path, &table)?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn override_parsing() {
        let m = parse_overrides(&strings(&["--learning-rate", "0.1", "--mode=rgb"])).unwrap();
        assert_eq!(m.get_str("learning_rate"), Some("0.1"));
        assert_eq!(m.get_str("mode"), Some("rgb"));
        assert!(parse_overrides(&strings(&["--epochs"])).is_err());
        assert!(parse_overrides(&strings(&["epochs", "3"])).is_err());
        assert!(parse_overrides(&strings(&["--a", "1", "--a", "2"])).is_err());
    }

    #[test]
    fn grid_size() {
        assert_eq!(ablation_grid(&KvMap::new()).unwrap().len(), 16);
        let mut m = KvMap::new();
        m.set("grid.modes", "fusion");
        m.set("grid.flips", "off");
        assert_eq!(ablation_grid(&m).unwrap().len(), 4);
        m.set("grid.roi_ops", "bilinear");
        assert!(ablation_grid(&m).is_err());
    }

    #[test]
    fn dataset_config_round_trip() {
        let c = DatasetConfig::default();
        assert_eq!(dataset_config_from_kv(&dataset_config_to_kv(&c)).unwrap(), c);
        let mut m = KvMap::new();
        m.set("pedestrians_min", 5);
        m.set("pedestrians_max", 2);
        assert!(matches!(dataset_config_from_kv(&m), Err(Error::Config(_))));
    }
}
