//! `dcnet` — train, evaluate, and probe the segmentation network from
//! the command line.
//!
//! Every subcommand is deterministic given `--config` and `--seed`, and
//! every artifact written carries the resolved config hash and seed (CSV
//! header comment or JSON fields), so any output can be reproduced from
//! the artifact alone.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration/input error,
//! 3 runtime numeric failure (non-finite values, failed gradient check,
//! shape mismatch).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use dcnet::checkpoint::{load_meta, load_table, restore_store};
use dcnet::config::RunConfig;
use dcnet::data::{
    fg_bg_histogram, histogram_intersection, load_samples, save_gray, save_samples, synthesize,
    FgBgHistogram, SynthProfile,
};
use dcnet::dcp::{classic_pool, context_pool, flatten_windows, indicator_matrix};
use dcnet::gradcheck::module_gradient_suite;
use dcnet::layers::{init_rng, Cx, ParamStore, Phase};
use dcnet::loss::{ce_dldp, ce_loss, focal_dldp, focal_loss, harmonic_dldp, harmonic_loss};
use dcnet::net::{model_summary, CouplerKind, DcNet, FusionKind, PoolKind};
use dcnet::tensor::Tensor;
use dcnet::train::{evaluate_samples, split_samples, train_run};
use dcnet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dcnet",
    version,
    about = "Ultrasound-style lesion segmentation: training, evaluation, and analysis"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand: the config file and targeted
/// overrides mirroring its fields.
#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted fields (or the whole flag) fall
    /// back to the desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory artifacts are written into.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the square input extent (multiple of 16).
    #[arg(long)]
    extent: Option<usize>,
    /// Override the channel width multiplier.
    #[arg(long)]
    width: Option<f64>,
    /// Override the number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the minibatch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Override the synthetic dataset size.
    #[arg(long)]
    samples: Option<usize>,
    /// Override the synthetic difficulty (easy|standard|hard).
    #[arg(long)]
    difficulty: Option<String>,
    /// Override the learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Override the context-pooling bandwidth τ.
    #[arg(long)]
    tau: Option<usize>,
    /// Override the pooling operator (dcp|max).
    #[arg(long)]
    pooling: Option<String>,
    /// Override the skip fusion (ccf|concat).
    #[arg(long)]
    fusion: Option<String>,
    /// Override the stream coupler (dar|concat|none).
    #[arg(long)]
    coupler: Option<String>,
    /// Override the binarization threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    /// The held-out validation portion of the config's dataset.
    Val,
    /// The training portion.
    Train,
    /// The whole dataset.
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on synthetic data, writing checkpoints and a metrics CSV.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from an earlier run's checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: per-sample metrics JSON plus the aggregate.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate a directory of image/mask pairs instead of the
        /// config's synthetic split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Which synthetic portion to evaluate (ignored with --data).
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
    },
    /// Write the synthetic dataset as PNG image/mask pairs.
    Synth {
        #[command(flatten)]
        common: Common,
        /// How many samples (default: the config's dataset size).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Emit the loss-comparison CSV over the p_t grid.
    LossCurves {
        #[command(flatten)]
        common: Common,
    },
    /// Emit the corresponding −dL/dp_t CSV over the same grid.
    LossGrad {
        #[command(flatten)]
        common: Common,
    },
    /// Verify analytic gradients of every module against finite
    /// differences; nonzero exit on any failure.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Compare classic pooling with learned context pooling on a matrix
    /// read from CSV.
    PoolDemo {
        #[command(flatten)]
        common: Common,
        /// CSV file holding the matrix (rows of comma-separated numbers).
        #[arg(long)]
        input: PathBuf,
    },
    /// Render a coupler attention map for one input as a grayscale PNG.
    DarAttn {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to restore (fresh weights when omitted).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Aggregation stage whose attention to render (1-based).
        #[arg(long, default_value_t = 1)]
        stage: usize,
        /// Index of the synthetic sample to feed.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Report parameter counts per module and the per-sample
    /// multiply-accumulate estimate.
    Summary {
        #[command(flatten)]
        common: Common,
    },
    /// Pool foreground/background intensity histograms over the
    /// synthetic dataset into a CSV.
    Hist {
        #[command(flatten)]
        common: Common,
        /// How many samples to pool.
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Number of equal-width bins over [0, 1].
        #[arg(long, default_value_t = 64)]
        bins: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let informational =
                matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if informational { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Data(_)
        | Error::Checkpoint(_)
        | Error::Io(_)
        | Error::Image(_) => 2,
        Error::NonFinite(_) | Error::Gradcheck(_) | Error::Shape { .. } => 3,
    }
}

/// Parse one of the lowercase option names the config file accepts.
fn parse_variant<T: serde::de::DeserializeOwned>(what: &str, s: &str, allowed: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| Error::Config(format!("{what} must be one of {allowed}, got {s:?}")))
}

/// Load the config file and fold the command-line overrides into it.
fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(extent) = common.extent {
        cfg.extent = extent;
    }
    if let Some(width) = common.width {
        cfg.width = width;
    }
    if let Some(epochs) = common.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(batch) = common.batch {
        cfg.train.batch = batch;
    }
    if let Some(samples) = common.samples {
        cfg.train.samples = samples;
    }
    if let Some(difficulty) = &common.difficulty {
        cfg.train.difficulty = difficulty.clone();
    }
    if let Some(lr) = common.lr {
        cfg.optim.lr = lr;
    }
    if let Some(tau) = common.tau {
        cfg.tau = tau;
    }
    if let Some(p) = &common.pooling {
        cfg.pooling = parse_variant::<PoolKind>("pooling", p, "dcp|max")?;
    }
    if let Some(f) = &common.fusion {
        cfg.fusion = parse_variant::<FusionKind>("fusion", f, "ccf|concat")?;
    }
    if let Some(c) = &common.coupler {
        cfg.coupler = parse_variant::<CouplerKind>("coupler", c, "dar|concat|none")?;
    }
    if let Some(t) = common.threshold {
        cfg.train.threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn artifact_header(cfg: &RunConfig) -> String {
    format!("# config_hash={} seed={}", cfg.hash(), cfg.seed)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serializing {}: {e}", path.display())))?;
    write_text(path, &(text + "\n"))
}

/// Build the network (and its parameter store), optionally restoring a
/// checkpoint over the fresh weights.
fn build_net(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(ParamStore, DcNet)> {
    let mut store = ParamStore::new();
    let mut rng = init_rng(cfg.seed);
    let net = DcNet::new(&mut store, &mut rng, "net", cfg.net_options())?;
    if let Some(path) = checkpoint {
        let table = load_table(path)?;
        restore_store(&mut store, &table)?;
        if let Ok(meta) = load_meta(path) {
            if meta.config_hash != cfg.hash() {
                eprintln!(
                    "warning: checkpoint was trained under config {} but the \
                     current config hashes to {}",
                    meta.config_hash,
                    cfg.hash()
                );
            }
        }
    }
    Ok((store, net))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { common, resume } => cmd_train(&common, resume.as_deref()),
        Cmd::Eval { common, checkpoint, data, split } => {
            cmd_eval(&common, &checkpoint, data.as_deref(), split)
        }
        Cmd::Synth { common, count } => cmd_synth(&common, count),
        Cmd::LossCurves { common } => cmd_loss_csv(&common, false),
        Cmd::LossGrad { common } => cmd_loss_csv(&common, true),
        Cmd::Gradcheck { common } => cmd_gradcheck(&common),
        Cmd::PoolDemo { common, input } => cmd_pool_demo(&common, &input),
        Cmd::DarAttn { common, checkpoint, stage, index } => {
            cmd_dar_attn(&common, checkpoint.as_deref(), stage, index)
        }
        Cmd::Summary { common } => cmd_summary(&common),
        Cmd::Hist { common, count, bins } => cmd_hist(&common, count, bins),
    }
}

fn cmd_train(common: &Common, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    println!("{}", artifact_header(&cfg));
    let epochs = cfg.train.epochs;
    let outcome = train_run(&cfg, &common.out, resume, &mut |r| {
        println!(
            "epoch {:>3}/{epochs}  train {:.4}  val {:.4}  dice {:.4}  miou {:.4}  \
             prec {:.4}  hd95 {:.2}  ({:.1}s)",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_dice,
            r.val_miou,
            r.val_precision,
            r.val_hd95,
            r.seconds
        );
    })?;
    println!(
        "best validation dice {:.4} at epoch {}; wrote {}, {}, {}",
        outcome.best_val_dice,
        outcome.best_epoch,
        outcome.csv_path.display(),
        outcome.best_path.display(),
        outcome.last_path.display()
    );
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path, data: Option<&Path>, split: Split) -> Result<()> {
    let cfg = load_config(common)?;
    let (mut store, net) = build_net(&cfg, Some(checkpoint))?;

    let (samples, origin) = match data {
        Some(dir) => {
            let (samples, warnings) = load_samples(dir, cfg.extent)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            (samples, format!("dir:{}", dir.display()))
        }
        None => {
            let profile = SynthProfile::by_name(&cfg.train.difficulty)?;
            let all = synthesize(cfg.train.samples, cfg.extent, cfg.seed, &profile)?;
            let (train_set, val_set) = split_samples(all, cfg.train.val_fraction, cfg.seed);
            let picked = match split {
                Split::Val => val_set,
                Split::Train => train_set,
                Split::All => {
                    let mut all = train_set;
                    all.extend(val_set);
                    all.sort_by(|a, b| a.id.cmp(&b.id));
                    all
                }
            };
            (picked, format!("synthetic:{split:?}").to_lowercase())
        }
    };

    let report =
        evaluate_samples(&net, &mut store, &samples, &cfg.loss, cfg.train.threshold)?;
    let doc = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "checkpoint": checkpoint.display().to_string(),
        "samples": origin,
        "mean_loss": report.mean_loss,
        "aggregate": report.mean,
        "per_sample": report
            .per_sample
            .iter()
            .map(|(id, m)| serde_json::json!({ "id": id, "metrics": m }))
            .collect::<Vec<_>>(),
    });
    let path = common.out.join("eval.json");
    write_json(&path, &doc)?;
    println!(
        "{} samples: dice {:.4}  miou {:.4}  prec {:.4}  hd95 {:.2}  loss {:.4}",
        report.per_sample.len(),
        report.mean.dice,
        report.mean.m_iou,
        report.mean.precision,
        report.mean.hd95,
        report.mean_loss
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_synth(common: &Common, count: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let count = count.unwrap_or(cfg.train.samples);
    let profile = SynthProfile::by_name(&cfg.train.difficulty)?;
    let samples = synthesize(count, cfg.extent, cfg.seed, &profile)?;
    let dir = common.out.join("samples");
    save_samples(&dir, &samples)?;
    write_json(
        &dir.join("manifest.json"),
        &serde_json::json!({
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "count": count,
            "extent": cfg.extent,
            "difficulty": cfg.train.difficulty,
        }),
    )?;
    println!("wrote {count} image/mask pairs to {}", dir.display());
    Ok(())
}

const HARMONIC_GAMMAS: [f64; 3] = [5.0, 7.0, 9.0];
const HARMONIC_SIGMAS: [f64; 3] = [1e-3, 1e-2, 1e-1];

fn cmd_loss_csv(common: &Common, gradients: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let mut text = String::new();
    text.push_str(&artifact_header(&cfg));
    text.push('\n');
    text.push_str("p_t,ce,focal_g2,focal_g5");
    for g in HARMONIC_GAMMAS {
        for s in HARMONIC_SIGMAS {
            text.push_str(&format!(",harmonic_g{g:.0}_s{s:.0e}"));
        }
    }
    text.push('\n');
    for i in 0..=196u32 {
        let p_t = 0.01 + 0.005 * f64::from(i);
        let (ce, f2, f5) = if gradients {
            (ce_dldp(p_t)?, focal_dldp(p_t, 2.0)?, focal_dldp(p_t, 5.0)?)
        } else {
            (ce_loss(p_t)?, focal_loss(p_t, 2.0)?, focal_loss(p_t, 5.0)?)
        };
        text.push_str(&format!("{p_t},{ce},{f2},{f5}"));
        for g in HARMONIC_GAMMAS {
            for s in HARMONIC_SIGMAS {
                let v = if gradients {
                    harmonic_dldp(p_t, g, s)?
                } else {
                    harmonic_loss(p_t, g, s)?
                };
                text.push_str(&format!(",{v}"));
            }
        }
        text.push('\n');
    }
    let name = if gradients { "loss-grad.csv" } else { "loss-curves.csv" };
    let path = common.out.join(name);
    write_text(&path, &text)?;
    println!("wrote {} (197 grid rows)", path.display());
    Ok(())
}

fn cmd_gradcheck(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let t0 = std::time::Instant::now();
    let reports = module_gradient_suite()?;
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    for (name, report) in &reports {
        let verdict = if report.pass() { "PASS" } else { "FAIL" };
        println!(
            "{verdict}  {name:<24} max rel err {:10.3e} over {:>6} coords (worst: {})",
            report.max_rel_err, report.coords_checked, report.worst
        );
        rows.push(serde_json::json!({
            "module": name,
            "max_rel_err": report.max_rel_err,
            "coords_checked": report.coords_checked,
            "tol": report.tol,
            "pass": report.pass(),
            "worst": report.worst,
        }));
        if !report.pass() {
            failures.push(*name);
        }
    }
    println!("checked {} modules in {:.1}s", reports.len(), t0.elapsed().as_secs_f64());
    write_json(
        &common.out.join("gradcheck.json"),
        &serde_json::json!({
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "modules": rows,
        }),
    )?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Gradcheck(format!("modules failed: {}", failures.join(", "))))
    }
}

fn parse_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "{}:{}: not a number: {cell:?}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Data(format!(
                    "{}:{}: row has {} cells, expected {}",
                    path.display(),
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    let (h, w) = (rows.len(), rows[0].len());
    Ok(Tensor::from_vec(&[h, w], rows.into_iter().flatten().collect()))
}

fn format_plane(t: &Tensor) -> String {
    let [h, w] = t.shape() else { return format!("{t:?}") };
    let mut out = String::new();
    for y in 0..*h {
        let row: Vec<String> =
            (0..*w).map(|x| format!("{:9.4}", t.data()[y * w + x])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn cmd_pool_demo(common: &Common, input: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let tau = cfg.tau;
    let z = parse_matrix_csv(input)?;
    let [h, w] = z.shape() else { unreachable!("parse_matrix_csv returns planes") };
    let (h, w) = (*h, *w);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Data(format!("matrix is {h}×{w}; pooling needs even extents")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let m = oh * ow;

    // Classic pooling: uniform averaging kernel, plus the per-window max.
    let avg_kernel = Tensor::from_vec(&[oh, ow, 4], vec![0.25; m * 4]);
    let classic = classic_pool(&z, &avg_kernel, 2)?;
    let flat = flatten_windows(&z, 2)?;
    let max_pool = Tensor::from_vec(
        &[oh, ow],
        (0..m)
            .map(|p| (0..4).map(|s| flat.data()[p * 4 + s]).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    );

    // Context pooling with the same averaging projection: every window
    // blends with the τ nearest windows in flattening order.
    let delta = Tensor::from_vec(&[m, 4], vec![0.25; m * 4]);
    let banded = indicator_matrix(m, tau);
    let pooled = context_pool(&flat, &delta, &banded)?;
    let dcp = Tensor::from_vec(&[oh, ow], pooled.data().to_vec());

    println!("{}", artifact_header(&cfg));
    println!("input ({h}×{w}):\n{}", format_plane(&z));
    println!("classic 2×2 average ({oh}×{ow}):\n{}", format_plane(&classic));
    println!("classic 2×2 max ({oh}×{ow}):\n{}", format_plane(&max_pool));
    println!(
        "context pooling, τ = {tau}, uniform projection kernels (window \
         contents dotted against the kernels of every band neighbour \
         within {tau} in row-major window order, rescaled by m/ΣH):\n{}",
        format_plane(&dcp)
    );
    Ok(())
}

fn cmd_dar_attn(
    common: &Common,
    checkpoint: Option<&Path>,
    stage: usize,
    index: usize,
) -> Result<()> {
    let cfg = load_config(common)?;
    if !matches!(cfg.coupler, CouplerKind::Dar) {
        return Err(Error::Config(
            "dar-attn needs coupler=dar; the other couplers have no attention map".into(),
        ));
    }
    let (mut store, net) = build_net(&cfg, checkpoint)?;
    let profile = SynthProfile::by_name(&cfg.train.difficulty)?;
    let samples = synthesize(index + 1, cfg.extent, cfg.seed, &profile)?;
    let sample = &samples[index];
    let (img, _) = dcnet::data::batch_tensors(&[sample])?;

    let (attn_plane, n_stages) = {
        let mut cx = Cx::frozen(&mut store, Phase::Eval);
        let xv = cx.tape.leaf(img, false)?;
        let trace = net.forward(&mut cx, xv)?;
        let n_stages = trace.attn.len();
        if stage == 0 || stage > n_stages {
            return Err(Error::Config(format!(
                "stage {stage} out of range; this network has {n_stages} aggregation stages"
            )));
        }
        let t = cx.tape.value(trace.attn[stage - 1]);
        let [_, ah, aw, _] = t.shape() else {
            return Err(Error::Shape { op: "dar-attn", detail: format!("{:?}", t.shape()) });
        };
        (Tensor::from_vec(&[*ah, *aw], t.data().to_vec()), n_stages)
    };

    // Normalize for visibility; the sidecar records the original range.
    let (lo, hi) = attn_plane
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let normalized = Tensor::from_vec(
        attn_plane.shape(),
        attn_plane.data().iter().map(|&v| (v - lo) / span).collect(),
    );

    let attn_path = common.out.join(format!("attn-stage{stage}.png"));
    save_gray(&attn_path, &normalized)?;
    let input_path = common.out.join("attn-input.png");
    save_gray(&input_path, &sample.image)?;
    write_json(
        &common.out.join(format!("attn-stage{stage}.json")),
        &serde_json::json!({
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "checkpoint": checkpoint.map(|p| p.display().to_string()),
            "stage": stage,
            "stages": n_stages,
            "sample": sample.id,
            "attention_min": lo,
            "attention_max": hi,
        }),
    )?;
    println!(
        "wrote {} (range [{lo:.4}, {hi:.4}]) and {}",
        attn_path.display(),
        input_path.display()
    );
    Ok(())
}

fn cmd_summary(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let (store, net) = build_net(&cfg, None)?;
    let summary = model_summary(&store, "net", &net, cfg.extent);
    println!("{}", artifact_header(&cfg));
    println!("{:<12} {:>12} {:>10}", "module", "weights", "stats");
    for m in &summary.modules {
        println!("{:<12} {:>12} {:>10}", m.module, m.weights, m.stats);
    }
    println!("{:<12} {:>12} {:>10}", "total", summary.total_weights, summary.total_stats);
    println!(
        "≈ {macs:.2} M multiply-accumulates per {extent}×{extent} sample",
        macs = summary.macs as f64 / 1e6,
        extent = cfg.extent,
    );
    write_json(
        &common.out.join("summary.json"),
        &serde_json::json!({
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "extent": cfg.extent,
            "modules": summary
                .modules
                .iter()
                .map(|m| serde_json::json!({
                    "module": m.module, "weights": m.weights, "stats": m.stats,
                }))
                .collect::<Vec<_>>(),
            "total_weights": summary.total_weights,
            "total_stats": summary.total_stats,
            "macs": summary.macs,
        }),
    )?;
    Ok(())
}

fn cmd_hist(common: &Common, count: usize, bins: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let profile = SynthProfile::by_name(&cfg.train.difficulty)?;
    let samples = synthesize(count, cfg.extent, cfg.seed, &profile)?;
    let mut pooled = FgBgHistogram { fg: vec![0; bins], bg: vec![0; bins] };
    for s in &samples {
        pooled.merge(&fg_bg_histogram(s, bins)?);
    }
    let mut text = String::new();
    text.push_str(&artifact_header(&cfg));
    text.push('\n');
    text.push_str("bin_lo,bin_hi,foreground,background\n");
    let width = 1.0 / bins as f64;
    for b in 0..bins {
        text.push_str(&format!(
            "{},{},{},{}\n",
            b as f64 * width,
            (b + 1) as f64 * width,
            pooled.fg[b],
            pooled.bg[b]
        ));
    }
    let path = common.out.join("hist.csv");
    write_text(&path, &text)?;
    println!(
        "pooled {count} samples into {bins} bins; histogram intersection {:.3}; wrote {}",
        histogram_intersection(&pooled),
        path.display()
    );
    Ok(())
}
