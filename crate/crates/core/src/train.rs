//! Training, evaluation, and run bookkeeping for the segmentation network.
//!
//! [`train_run`] owns the end-to-end loop: deterministic synthesis of the
//! dataset, a seeded train/validation split, minibatch descent with Adam,
//! per-epoch validation metrics, a CSV log, and rolling `last.ckpt` /
//! `best.ckpt` snapshots with a JSON sidecar describing the best epoch.
//!
//! Every number is a pure function of the run config: the dataset is keyed
//! by `(seed, index)`, the split and each epoch's shuffle by `(seed, salt)`,
//! the initial weights by `seed`, and the optimizer state and normalization
//! statistics travel inside the checkpoint. An interrupted run resumed from
//! `last.ckpt` therefore reproduces the uninterrupted run bit for bit —
//! the tests compare the two metric logs as strings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{
    bookkeeping, load_table, restore_adam, restore_store, save_checkpoint, save_meta,
    CheckpointMeta,
};
use crate::config::RunConfig;
use crate::data::{batch_tensors, synthesize, SegSample, SynthProfile};
use crate::layers::{init_rng, Cx, ParamStore, Phase};
use crate::loss::{total_loss_graph, LossConfig};
use crate::metrics::{compute_metrics, MetricsRecord};
use crate::net::DcNet;
use crate::optim::Adam;
use crate::{Error, Result};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Column header of the per-epoch metrics log.
pub const CSV_HEADER: &str = "epoch,train_loss,val_loss,val_dice,val_miou,val_precision,val_95hd";

const SALT_SPLIT: u64 = 0x53504C49_54000000; // which samples are held out
const SALT_EPOCH: u64 = 0x45504F43_48000000; // per-epoch batch order

/// One row of the training log.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Mean training loss over the epoch (sample-weighted).
    pub train_loss: f64,
    /// Mean validation loss.
    pub val_loss: f64,
    /// Mean validation Dice.
    pub val_dice: f64,
    /// Mean validation IoU averaged over foreground and background.
    pub val_miou: f64,
    /// Mean validation precision.
    pub val_precision: f64,
    /// Mean validation 95th-percentile boundary distance.
    pub val_hd95: f64,
    /// Wall-clock seconds spent on the epoch (not logged to CSV).
    pub seconds: f64,
}

impl EpochRecord {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.val_loss,
            self.val_dice,
            self.val_miou,
            self.val_precision,
            self.val_hd95
        )
    }
}

/// Everything a finished (or resumed-and-finished) run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// One record per epoch, 1..=epochs.
    pub records: Vec<EpochRecord>,
    /// Epoch with the best validation Dice.
    pub best_epoch: usize,
    /// Best validation Dice seen.
    pub best_val_dice: f64,
    /// Path of the metrics CSV.
    pub csv_path: PathBuf,
    /// Path of the rolling checkpoint (every epoch).
    pub last_path: PathBuf,
    /// Path of the best-validation checkpoint.
    pub best_path: PathBuf,
    /// Hash of the resolved config the run used.
    pub config_hash: String,
}

/// Evaluation summary over a set of samples.
pub struct EvalReport {
    /// Mean loss over the samples.
    pub mean_loss: f64,
    /// Per-sample metrics, in input order, keyed by sample id.
    pub per_sample: Vec<(String, MetricsRecord)>,
    /// Field-wise mean of the per-sample metrics.
    pub mean: MetricsRecord,
}

fn mix(seed: u64, salt: u64) -> u64 {
    // SplitMix64 finalizer over the XOR of the two keys.
    let mut z = (seed ^ salt).wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministically split samples into `(train, val)` using the run seed.
///
/// The split depends only on `(seed, len, val_fraction)`, so a later
/// evaluation pass can rebuild exactly the held-out set of a training run.
pub fn split_samples(
    samples: Vec<SegSample>,
    val_fraction: f64,
    seed: u64,
) -> (Vec<SegSample>, Vec<SegSample>) {
    let n = samples.len();
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, SALT_SPLIT)));
    let val_idx: std::collections::BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let mut train = Vec::with_capacity(n - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (i, s) in samples.into_iter().enumerate() {
        if val_idx.contains(&i) {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

/// Mean of per-sample metrics, field by field.
pub fn mean_metrics(records: &[MetricsRecord]) -> MetricsRecord {
    let n = records.len().max(1) as f64;
    let mut out = MetricsRecord { dice: 0.0, m_iou: 0.0, precision: 0.0, hd95: 0.0 };
    for r in records {
        out.dice += r.dice;
        out.m_iou += r.m_iou;
        out.precision += r.precision;
        out.hd95 += r.hd95;
    }
    out.dice /= n;
    out.m_iou /= n;
    out.precision /= n;
    out.hd95 /= n;
    out
}

/// Run the network over `samples` one at a time with frozen statistics and
/// collect loss plus segmentation metrics against each ground-truth mask.
pub fn evaluate_samples(
    net: &DcNet,
    store: &mut ParamStore,
    samples: &[SegSample],
    loss_cfg: &LossConfig,
    threshold: f64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluate_samples: no samples".into()));
    }
    let mut losses = 0.0;
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut metric_rows = Vec::with_capacity(samples.len());
    for s in samples {
        let (img, mask) = batch_tensors(&[s])?;
        let (pred, loss) = {
            let mut cx = Cx::frozen(store, Phase::Eval);
            let xv = cx.tape.leaf(img, false)?;
            let trace = net.forward(&mut cx, xv)?;
            let (loss, _) = total_loss_graph(
                &mut cx.tape,
                trace.s_f,
                trace.s_b,
                trace.y_hat,
                &mask,
                loss_cfg,
            )?;
            (cx.tape.value(trace.y_hat).clone(), cx.tape.value(loss).item())
        };
        losses += loss;
        let m = compute_metrics(&pred, &mask, threshold)?;
        metric_rows.push(m.clone());
        per_sample.push((s.id.clone(), m));
    }
    Ok(EvalReport {
        mean_loss: losses / samples.len() as f64,
        mean: mean_metrics(&metric_rows),
        per_sample,
    })
}

fn write_csv(path: &Path, hash: &str, seed: u64, records: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "# config_hash={hash} seed={seed}");
    let _ = writeln!(text, "{CSV_HEADER}");
    for r in records {
        let _ = writeln!(text, "{}", r.csv_row());
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn parse_csv_records(path: &Path, up_to_epoch: usize) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("epoch,") || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Data(format!(
                "metrics log {}: expected 7 columns, got {} in {line:?}",
                path.display(),
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|_| {
                Error::Data(format!("metrics log {}: bad number {:?}", path.display(), fields[i]))
            })
        };
        let epoch = fields[0].parse::<usize>().map_err(|_| {
            Error::Data(format!("metrics log {}: bad epoch {:?}", path.display(), fields[0]))
        })?;
        if epoch > up_to_epoch {
            continue;
        }
        out.push(EpochRecord {
            epoch,
            train_loss: num(1)?,
            val_loss: num(2)?,
            val_dice: num(3)?,
            val_miou: num(4)?,
            val_precision: num(5)?,
            val_hd95: num(6)?,
            seconds: 0.0,
        });
    }
    out.sort_by_key(|r| r.epoch);
    Ok(out)
}

/// Train a network per `cfg`, writing artifacts into `out_dir`.
///
/// `resume` may point at a checkpoint written by an earlier run of the same
/// config; training continues from the epoch after it. `progress` is called
/// once per completed epoch. Training aborts with [`Error::NonFinite`] the
/// moment the training loss stops being a number, reporting the objective
/// terms to make the blow-up diagnosable.
pub fn train_run(
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let hash = cfg.hash();
    let csv_path = out_dir.join("metrics.csv");
    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");

    // Dataset and split are pure functions of the config.
    let profile = SynthProfile::by_name(&cfg.train.difficulty)?;
    let samples = synthesize(cfg.train.samples, cfg.extent, cfg.seed, &profile)?;
    let (train_set, val_set) = split_samples(samples, cfg.train.val_fraction, cfg.seed);

    let mut store = ParamStore::new();
    let mut rng = init_rng(cfg.seed);
    let net = DcNet::new(&mut store, &mut rng, "net", cfg.net_options())?;
    let mut adam = Adam::new(cfg.optim.adam());

    let mut start_epoch = 0usize;
    let mut best_val_dice = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut records: Vec<EpochRecord> = Vec::new();

    if let Some(path) = resume {
        let table = load_table(path)?;
        restore_store(&mut store, &table)?;
        restore_adam(&mut adam, &table)?;
        let (epoch, best) = bookkeeping(&table);
        start_epoch = epoch;
        best_val_dice = best;
        if csv_path.exists() {
            records = parse_csv_records(&csv_path, start_epoch)?;
        }
        best_epoch = records
            .iter()
            .filter(|r| r.val_dice >= best_val_dice)
            .map(|r| r.epoch)
            .next()
            .unwrap_or(start_epoch);
    } else {
        // A fresh run must not silently extend someone else's log.
        if csv_path.exists() {
            std::fs::remove_file(&csv_path)?;
        }
    }

    // Dump the resolved config next to the artifacts it produced.
    std::fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))? + "\n",
    )?;

    for epoch in (start_epoch + 1)..=cfg.train.epochs {
        let t0 = std::time::Instant::now();

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, SALT_EPOCH ^ epoch as u64)));

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.train.batch) {
            let refs: Vec<&SegSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (imgs, masks) = batch_tensors(&refs)?;
            store.clear_grads();
            let loss_val = {
                let mut cx = Cx::new(&mut store, Phase::Train);
                let xv = cx.tape.leaf(imgs, false)?;
                let trace = net.forward(&mut cx, xv)?;
                let (loss, parts) = total_loss_graph(
                    &mut cx.tape,
                    trace.s_f,
                    trace.s_b,
                    trace.y_hat,
                    &masks,
                    &cfg.loss,
                )?;
                let loss_val = cx.tape.value(loss).item();
                if !loss_val.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at epoch {epoch} ({loss_val}): dice_f={} dice_b={} \
                         dice_c={} harmonic={}",
                        parts.dice_f, parts.dice_b, parts.dice_c, parts.harmonic
                    )));
                }
                cx.tape.backward(loss)?;
                cx.collect_grads();
                loss_val
            };
            adam.step(&mut store)?;
            loss_sum += loss_val * refs.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;

        let report =
            evaluate_samples(&net, &mut store, &val_set, &cfg.loss, cfg.train.threshold)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: report.mean_loss,
            val_dice: report.mean.dice,
            val_miou: report.mean.m_iou,
            val_precision: report.mean.precision,
            val_hd95: report.mean.hd95,
            seconds: t0.elapsed().as_secs_f64(),
        };

        if record.val_dice > best_val_dice {
            best_val_dice = record.val_dice;
            best_epoch = epoch;
            save_checkpoint(&best_path, &store, Some(&adam), epoch, best_val_dice)?;
            save_meta(
                &best_path,
                &CheckpointMeta {
                    config_hash: hash.clone(),
                    seed: cfg.seed,
                    epoch,
                    best_val_dice,
                },
            )?;
        }
        save_checkpoint(&last_path, &store, Some(&adam), epoch, best_val_dice)?;

        records.push(record);
        write_csv(&csv_path, &hash, cfg.seed, &records)?;
        progress(records.last().expect("just pushed"));
    }

    Ok(TrainOutcome {
        records,
        best_epoch,
        best_val_dice,
        csv_path,
        last_path,
        best_path,
        config_hash: hash,
    })
}
