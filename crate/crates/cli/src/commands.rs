use std::fs;
use std::hint::black_box;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ValueEnum;
use evtforce_core::event::{read_events, slice_window, write_events, EventFormat};
use evtforce_core::frame::{
    accumulate_frame, accumulate_raw, build_dataset, read_frd1, unix_now, write_frd1,
    AccumulationMode, ForceTrack, FrameDataset, Recording, SidecarManifest,
};
use evtforce_core::seed::sub_seed;
use evtforce_core::synth::{grasp_profiles, synthesize_recording};
use evtforce_core::train::{evaluate, log_csv, predict_dataset, split_indices, train, Metrics};
use evtforce_core::vit::{init_params, load_checkpoint, save_checkpoint, ViTModel};
use serde::Serialize;
use serde_json::json;

use crate::{CliError, PipelineConfig};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const LABELS_SUFFIX: &str = ".labels.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    All,
    Train,
    Val,
    Test,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Pretty JSON, refusing non-finite numbers (serde_json would turn them
/// into `null` silently).
fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let v = serde_json::to_value(value).map_err(|e| CliError::Internal(e.to_string()))?;
    fn check(v: &serde_json::Value) -> bool {
        match v {
            serde_json::Value::Number(n) => n.as_f64().is_some_and(f64::is_finite),
            serde_json::Value::Array(a) => a.iter().all(check),
            serde_json::Value::Object(o) => o.values().all(check),
            _ => true,
        }
    }
    if !check(&v) {
        return Err(CliError::Internal(
            "report contains a non-finite number".into(),
        ));
    }
    Ok(serde_json::to_string_pretty(&v).expect("value serializes") + "\n")
}

fn finite_or_internal(what: &str, values: &[f64]) -> Result<(), CliError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CliError::Internal(format!(
            "{what} contains a non-finite value"
        )))
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Serialize)]
struct SynthEntry {
    id: String,
    events: String,
    labels: String,
    event_count: usize,
    samples: usize,
}

/// Writes `n` recordings (`rec_NNN.evb` or `.csv`), their label tracks
/// (`rec_NNN.labels.json`) and `manifest.json` into `out_dir`.
pub fn cmd_synth(
    cfg: &PipelineConfig,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let format = match cfg.synth.format.as_str() {
        "csv" => EventFormat::Csv,
        _ => EventFormat::Binary,
    };
    let n = cfg.synth.recordings;
    let profiles = grasp_profiles(&cfg.synth.profile, cfg.scene.f_max, n, cfg.seed);
    let mut entries = Vec::with_capacity(n);
    let mut total_events = 0;
    for (i, profile) in profiles.iter().enumerate() {
        let mut scene = cfg.scene.clone();
        if let Some(noise) = scene.noise.as_mut() {
            noise.seed = sub_seed(cfg.seed, &format!("synth.noise.{}.{i}", noise.seed));
        }
        let (stream, forces) =
            synthesize_recording(&scene, profile, cfg.synth.substeps_per_sample)?;
        let id = format!("rec_{i:03}");
        let events = format!("{id}.{}", format.extension());
        let labels = format!("{id}{LABELS_SUFFIX}");
        write_events(&stream, &out_dir.join(&events), format)?;
        write_file(&out_dir.join(&labels), to_json(&forces)?)?;
        total_events += stream.len();
        entries.push(SynthEntry {
            id,
            events,
            labels,
            event_count: stream.len(),
            samples: forces.samples.len(),
        });
    }
    let manifest = json!({
        "format": "evtforce-synth",
        "config_sha256": cfg.hash(),
        "seed": cfg.seed,
        "config": cfg,
        "recordings": entries,
    });
    let manifest_path = out_dir.join(MANIFEST_NAME);
    write_file(&manifest_path, to_json(&manifest)?)?;
    emit(
        out,
        &to_json(&json!({
            "recordings": n,
            "events": total_events,
            "manifest": manifest_path.display().to_string(),
        }))?,
    )
}

/// Recordings found in a `synth` output directory, in name order.
pub fn load_recordings(in_dir: &Path) -> Result<Vec<Recording>, CliError> {
    let entries = fs::read_dir(in_dir).map_err(|e| CliError::io(in_dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(in_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(LABELS_SUFFIX) {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::NoRecordings(in_dir.to_path_buf()));
    }
    let mut recordings = Vec::with_capacity(stems.len());
    for stem in stems {
        let labels_path = in_dir.join(format!("{stem}{LABELS_SUFFIX}"));
        let text = fs::read_to_string(&labels_path).map_err(|e| CliError::io(&labels_path, e))?;
        let forces: ForceTrack = serde_json::from_str(&text)
            .map_err(|e| CliError::Invalid(format!("{}: {e}", labels_path.display())))?;
        let events_path = [EventFormat::Binary, EventFormat::Csv]
            .iter()
            .map(|f| in_dir.join(format!("{stem}.{}", f.extension())))
            .find(|p| p.exists())
            .ok_or_else(|| {
                CliError::Invalid(format!("recording {stem} has labels but no event file"))
            })?;
        let format = EventFormat::from_path(&events_path).expect("known extension");
        let stream = read_events(&events_path, format)?;
        recordings.push(Recording {
            id: stem,
            duration_us: forces.span_us(),
            stream,
            forces,
        });
    }
    Ok(recordings)
}

/// Creation time for sidecars: `SOURCE_DATE_EPOCH` when set, for
/// reproducible outputs, else the current time.
fn creation_time() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(unix_now)
}

pub fn cmd_convert(
    cfg: &PipelineConfig,
    in_dir: &Path,
    out_file: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let recordings = load_recordings(in_dir)?;
    let ds = build_dataset(&recordings, &cfg.frame, (0.0, cfg.scene.f_max))?;
    let sidecar = SidecarManifest::new(&ds, &cfg.frame, creation_time());
    write_frd1(out_file, &ds, Some(&sidecar))?;
    emit(
        out,
        &to_json(&json!({
            "frames": ds.len(),
            "recordings": recordings.len(),
            "out": out_file.display().to_string(),
        }))?,
    )
}

fn check_dataset_fits(cfg: &PipelineConfig, ds: &FrameDataset) -> Result<(), CliError> {
    let m = &cfg.model;
    if ds.channels != m.in_channels {
        return Err(CliError::Config {
            key: "model.in_channels".into(),
            reason: format!(
                "{} does not match the dataset's {} channels",
                m.in_channels, ds.channels
            ),
        });
    }
    if ds.height != m.image_size || ds.width != m.image_size {
        return Err(CliError::Config {
            key: "model.image_size".into(),
            reason: format!(
                "{} does not match the dataset's {}x{} frames",
                m.image_size, ds.height, ds.width
            ),
        });
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SplitSizes {
    train: usize,
    val: usize,
    test: usize,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    best_epoch: Option<usize>,
    epochs: usize,
    initial_train_mse: f64,
    final_train_mse: Option<f64>,
    split: SplitSizes,
    metrics: SplitMetrics,
    config_sha256: String,
}

#[derive(Debug, Serialize)]
struct SplitMetrics {
    val: Option<Metrics>,
    test: Option<Metrics>,
}

/// Trains from scratch; writes the best checkpoint to `out_ckpt` (with its
/// `.json` index), the loss log to `<out>.log.csv` and the summary to
/// `<out>.summary.json`.
pub fn cmd_train(
    cfg: &PipelineConfig,
    data: &Path,
    out_ckpt: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let ds = read_frd1(data)?;
    check_dataset_fits(cfg, &ds)?;
    let split = split_indices(ds.len(), cfg.train.split, cfg.seed)?;
    let (tr, va, te) = (
        ds.subset(&split.train),
        ds.subset(&split.val),
        ds.subset(&split.test),
    );
    let model = init_params::<f32>(&cfg.model, cfg.seed)?;
    let outcome = train(&model, &tr, &va, &cfg.train, |e| {
        let val = e
            .val_mse
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "-".into());
        eprintln!(
            "epoch {:>4}  train_mse {:.6}  val_mse {val}",
            e.epoch, e.train_mse
        );
    })?;

    save_checkpoint(&outcome.best, out_ckpt)?;
    write_file(&with_suffix(out_ckpt, ".log.csv"), log_csv(&outcome.log))?;

    let floor = cfg.train.mape_floor;
    let score = |d: &FrameDataset| -> Result<Option<Metrics>, CliError> {
        if d.is_empty() {
            Ok(None)
        } else {
            Ok(Some(evaluate(&outcome.best, d, floor)?))
        }
    };
    let summary = TrainSummary {
        best_epoch: outcome.best_epoch,
        epochs: cfg.train.epochs,
        initial_train_mse: outcome.initial_train_mse,
        final_train_mse: outcome.log.last().map(|e| e.train_mse),
        split: SplitSizes {
            train: tr.len(),
            val: va.len(),
            test: te.len(),
        },
        metrics: SplitMetrics {
            val: score(&va)?,
            test: score(&te)?,
        },
        config_sha256: cfg.hash(),
    };
    let text = to_json(&summary)?;
    write_file(&with_suffix(out_ckpt, ".summary.json"), &text)?;
    emit(out, &text)
}

pub fn cmd_eval(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    data: &Path,
    which: EvalSplit,
    report: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let model = load_checkpoint::<f32>(checkpoint)?;
    let ds = read_frd1(data)?;
    let subset = match which {
        EvalSplit::All => ds,
        _ => {
            let s = split_indices(ds.len(), cfg.train.split, cfg.seed)?;
            let idx = match which {
                EvalSplit::Train => s.train,
                EvalSplit::Val => s.val,
                _ => s.test,
            };
            ds.subset(&idx)
        }
    };
    if subset.is_empty() {
        return Err(CliError::Invalid("the selected split is empty".into()));
    }
    let metrics = evaluate(&model, &subset, cfg.train.mape_floor)?;
    let text = to_json(&metrics)?;
    if let Some(path) = report {
        write_file(path, &text)?;
    }
    emit(out, &text)
}

/// Frames of an event file under the configured spec, one per window from
/// `t = 0`; a stream without events still yields one empty frame.
fn frames_from_events(
    cfg: &PipelineConfig,
    model: &ViTModel<f32>,
    input: &Path,
) -> Result<FrameDataset, CliError> {
    let format = EventFormat::from_path(input).ok_or_else(|| {
        CliError::Usage(format!(
            "{}: unknown input type (expected .evb, .csv or .frd1)",
            input.display()
        ))
    })?;
    let stream = read_events(input, format)?;
    let spec = &cfg.frame;
    if spec.channels() != model.config.in_channels {
        return Err(CliError::Config {
            key: "frame.mode".into(),
            reason: format!(
                "{} gives {} channels, the checkpoint expects {}",
                spec.mode.name(),
                spec.channels(),
                model.config.in_channels
            ),
        });
    }
    let side = model.config.image_size;
    let size_ok = match spec.out_size {
        Some(s) => s == side,
        None => stream.width as usize == side && stream.height as usize == side,
    };
    if !size_ok {
        return Err(CliError::Config {
            key: "frame.out_size".into(),
            reason: format!("frames must be {side}x{side} for this checkpoint"),
        });
    }
    let t = spec.window_us;
    let windows = stream.last_t().map_or(1, |last| (last / t + 1) as usize);
    let mut ds = FrameDataset::empty(spec.channels(), side, side);
    for k in 0..windows {
        let t0 = k as u64 * t;
        let window =
            slice_window(&stream, t0, t0 + t).map_err(|e| CliError::Internal(e.to_string()))?;
        ds.frames.push(accumulate_frame(&window, spec, t0));
        ds.labels.push(0.0);
        ds.provenance.push(input.display().to_string());
    }
    Ok(ds)
}

pub fn cmd_predict(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    input: &Path,
    report: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let model = load_checkpoint::<f32>(checkpoint)?;
    let is_frd1 = input.extension().and_then(|e| e.to_str()) == Some("frd1");
    let ds = if is_frd1 {
        read_frd1(input)?
    } else {
        frames_from_events(cfg, &model, input)?
    };
    let preds = predict_dataset(&model, &ds)?;
    finite_or_internal("prediction", &preds)?;
    let text: String = preds.iter().map(|p| format!("{p}\n")).collect();
    if let Some(path) = report {
        write_file(path, &text)?;
    }
    emit(out, &text)
}

/// Best-of-`repeats` single-threaded accumulation throughput of every mode
/// over all windows of `input`.
pub fn cmd_bench(
    cfg: &PipelineConfig,
    input: &Path,
    repeats: usize,
    report: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let format = EventFormat::from_path(input)
        .ok_or_else(|| CliError::Usage(format!("{}: unknown event file type", input.display())))?;
    let stream = read_events(input, format)?;
    let t = cfg.frame.window_us;
    let (w, h) = (stream.width as usize, stream.height as usize);
    let windows = stream.last_t().map_or(0, |last| last / t + 1);
    let mut rates = serde_json::Map::new();
    for mode in AccumulationMode::ALL {
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            for k in 0..windows {
                let frame = accumulate_raw(stream.window(k * t, (k + 1) * t), w, h, mode);
                black_box(&frame);
            }
            best = best.min(start.elapsed().as_secs_f64());
        }
        let rate = if stream.is_empty() {
            0.0
        } else {
            stream.len() as f64 / best.max(1e-9)
        };
        rates.insert(mode.name().into(), json!(rate));
    }
    let text = to_json(&json!({
        "events": stream.len(),
        "window_us": t,
        "events_per_second": rates,
    }))?;
    if let Some(path) = report {
        write_file(path, &text)?;
    }
    emit(out, &text)
}
