//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Every tolerance is a constant below.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use evtforce_cli::{cmd_bench, PipelineConfig};
use evtforce_core::autodiff::{Graph, Tensor, Var, LAYER_NORM_EPS};
use evtforce_core::event::{
    read_events, slice_window, validate_stream, write_events, Event, EventFormat, EventStream,
    Polarity,
};
use evtforce_core::frame::{
    accumulate_frame, accumulate_raw, read_frd1, write_frd1, AccumulationMode, ForceTrack, Frame,
    FrameDataset, FrameSpec, SidecarManifest,
};
use evtforce_core::synth::{
    grasp_profile, synthesize_recording, GraspProfileConfig, GripperScene, NoiseConfig,
};
use evtforce_core::train::{compute_metrics, mse_loss, predict_dataset, split_indices};
use evtforce_core::vit::{init_params, load_checkpoint, ViTConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;

const GRAD_TRIALS: usize = 120;
const GRAD_TOL: f64 = 1e-4;
/// Central-difference step.
const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
const GRAD_FLOOR: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

const CONSERVATION_STREAMS: usize = 50;
const CONSERVATION_BUDGET: Duration = Duration::from_secs(60);

const ROUND_TRIP_CASES: usize = 100;

const DESK_RECORDINGS: usize = 25;
const DESK_FRAMES: usize = 1000;
const DESK_F_MAX: f64 = 1.6;
const DESK_WINDOW_US: u64 = 100_000;
const DESK_LABEL_HZ: f64 = 10.0;

/// Epochs for the end-to-end learning run (the config default is 200).
const LEARN_EPOCHS: usize = 15;
const LEARN_SEED: u64 = 0;
const MIN_R2: f64 = 0.90;
const MAX_RMSE_RATIO: f64 = 0.5;
const MIN_LOSS_DROP: f64 = 10.0;

const METRIC_CASES: usize = 1000;
const METRIC_TOL: f64 = 1e-9;

const DETERMINISM_EPOCHS: usize = 2;

const THROUGHPUT_EVENTS: usize = 1_000_000;
const MIN_EVENTS_PER_S: f64 = 1e6;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($fmt)+)),
        }
    };
}

fn evtforce(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_evtforce"))
        .args(args)
        .env_remove("SOURCE_DATE_EPOCH")
        .output()
        .map_err(|e| format!("cannot run evtforce: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "evtforce {} exited {:?}: {}",
            args.first().unwrap_or(&""),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out)
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("temp paths are UTF-8")
}

fn read_json(p: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))
}

// ---------------------------------------------------------------- gradients

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Worst relative error between the tape gradient of `f` and central
/// differences, over every element of every input.
fn grad_error(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).expect("scalar loss");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            work[ti].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            work[ti].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            work[ti].data_mut()[j] = orig;
            worst = worst.max(rel_err(
                analytic[ti].data()[j],
                (up - down) / (2.0 * FD_STEP),
            ));
        }
    }
    worst
}

/// `sum(out * w)` with fixed random `w`, so ops with a constant plain sum
/// (softmax, layer norm) still get a meaningful check.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.value(out).shape(), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

const OP_NAMES: [&str; 20] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "square",
    "add_bias",
    "reshape",
    "transpose",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "sum",
    "mean",
    "mean_over_axis",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "tiny_vit",
];

fn op_trial(op: usize, rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let r = rng.random_range(1..6usize);
    let c = rng.random_range(1..6usize);
    let k = rng.random_range(1..6usize);
    match OP_NAMES[op] {
        "matmul" => grad_error(
            &[
                rand_tensor(rng, &[r, k], -2.0, 2.0),
                rand_tensor(rng, &[k, c], -2.0, 2.0),
            ],
            &|g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                weighted_sum(g, y, seed)
            },
        ),
        "add" | "sub" | "mul" => {
            let name = OP_NAMES[op];
            grad_error(
                &[
                    rand_tensor(rng, &[r, c], -2.0, 2.0),
                    rand_tensor(rng, &[r, c], -2.0, 2.0),
                ],
                &move |g, v| {
                    let y = match name {
                        "add" => g.add(v[0], v[1]).unwrap(),
                        "sub" => g.sub(v[0], v[1]).unwrap(),
                        _ => g.mul(v[0], v[1]).unwrap(),
                    };
                    weighted_sum(g, y, seed)
                },
            )
        }
        "scale" => {
            let s = rng.random_range(-3.0..3.0);
            grad_error(&[rand_tensor(rng, &[r, c], -2.0, 2.0)], &move |g, v| {
                let y = g.scale(v[0], s);
                weighted_sum(g, y, seed)
            })
        }
        "square" => grad_error(&[rand_tensor(rng, &[r, c], -2.0, 2.0)], &|g, v| {
            let y = g.square(v[0]);
            weighted_sum(g, y, seed)
        }),
        "add_bias" => grad_error(
            &[
                rand_tensor(rng, &[r, c], -2.0, 2.0),
                rand_tensor(rng, &[c], -2.0, 2.0),
            ],
            &|g, v| {
                let y = g.add_bias(v[0], v[1]).unwrap();
                weighted_sum(g, y, seed)
            },
        ),
        "reshape" => grad_error(&[rand_tensor(rng, &[r, c * 2], -2.0, 2.0)], &move |g, v| {
            let y = g.reshape(v[0], &[r * 2, c]).unwrap();
            let y = g.square(y);
            weighted_sum(g, y, seed)
        }),
        "transpose" => grad_error(
            &[
                rand_tensor(rng, &[r, c], -2.0, 2.0),
                rand_tensor(rng, &[r, k], -2.0, 2.0),
            ],
            &|g, v| {
                let a = g.transpose(v[0]).unwrap();
                let y = g.matmul(a, v[1]).unwrap();
                weighted_sum(g, y, seed)
            },
        ),
        "softmax_rows" => grad_error(&[rand_tensor(rng, &[r, c + 1], -2.0, 2.0)], &|g, v| {
            let y = g.softmax_rows(v[0]);
            weighted_sum(g, y, seed)
        }),
        "layer_norm" => grad_error(
            &[
                rand_tensor(rng, &[r, c + 1], -2.0, 2.0),
                rand_tensor(rng, &[c + 1], -2.0, 2.0),
                rand_tensor(rng, &[c + 1], -2.0, 2.0),
            ],
            &|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS).unwrap();
                weighted_sum(g, y, seed)
            },
        ),
        "gelu" => grad_error(&[rand_tensor(rng, &[r, c], -2.0, 2.0)], &|g, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y, seed)
        }),
        "sum" => grad_error(&[rand_tensor(rng, &[r, c], -2.0, 2.0)], &|g, v| {
            let s = g.sum(v[0]);
            g.square(s)
        }),
        "mean" => grad_error(&[rand_tensor(rng, &[r, c], -2.0, 2.0)], &|g, v| {
            let s = g.mean(v[0]);
            g.square(s)
        }),
        "mean_over_axis" => {
            let axis = rng.random_range(0..3usize);
            grad_error(&[rand_tensor(rng, &[r, c, k], -2.0, 2.0)], &move |g, v| {
                let y = g.mean_over_axis(v[0], axis).unwrap();
                let y = g.square(y);
                weighted_sum(g, y, seed)
            })
        }
        "concat_rows" => grad_error(
            &[
                rand_tensor(rng, &[r, c], -2.0, 2.0),
                rand_tensor(rng, &[k, c], -2.0, 2.0),
            ],
            &|g, v| {
                let y = g.concat_rows(&[v[0], v[1]]).unwrap();
                let y = g.square(y);
                weighted_sum(g, y, seed)
            },
        ),
        "concat_cols" => grad_error(
            &[
                rand_tensor(rng, &[r, c], -2.0, 2.0),
                rand_tensor(rng, &[r, k], -2.0, 2.0),
            ],
            &|g, v| {
                let y = g.concat_cols(&[v[0], v[1]]).unwrap();
                let y = g.square(y);
                weighted_sum(g, y, seed)
            },
        ),
        "slice_rows" => {
            let start = rng.random_range(0..r);
            let len = rng.random_range(1..=r - start);
            grad_error(&[rand_tensor(rng, &[r, c], -2.0, 2.0)], &move |g, v| {
                let y = g.slice_rows(v[0], start, len).unwrap();
                let y = g.square(y);
                weighted_sum(g, y, seed)
            })
        }
        "slice_cols" => {
            let start = rng.random_range(0..c);
            let len = rng.random_range(1..=c - start);
            grad_error(&[rand_tensor(rng, &[r, c], -2.0, 2.0)], &move |g, v| {
                let y = g.slice_cols(v[0], start, len).unwrap();
                let y = g.square(y);
                weighted_sum(g, y, seed)
            })
        }
        "tiny_vit" => tiny_vit_trial(rng, seed),
        other => unreachable!("{other}"),
    }
}

fn tiny_vit_config() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 8,
        in_channels: 2,
        embed_dim: 8,
        depth: 1,
        num_heads: 2,
        ..ViTConfig::default()
    }
}

/// Gradient of the MSE of the tiny model with respect to every parameter.
fn tiny_vit_trial(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let cfg = tiny_vit_config();
    let mut model = init_params::<f64>(&cfg, seed).unwrap();
    // Push weights off the small init scale so every path carries signal.
    for p in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let batch = 2;
    let x = rand_tensor(rng, &[batch, 2, 16, 16], 0.0, 1.0);
    let y = rand_tensor(rng, &[batch, 1], 0.0, DESK_F_MAX);
    let params: Vec<Tensor<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
    let template = model.clone();
    grad_error(&params, &move |g, vars| {
        let bound = template.vars_from(vars.to_vec());
        let out = template.forward_graph(g, &bound, &x).unwrap().output;
        let t = g.constant(y.clone());
        mse_loss(g, out, t).unwrap()
    })
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11);
    let mut worst = vec![0.0f64; OP_NAMES.len()];
    for trial in 0..GRAD_TRIALS {
        let op = trial % OP_NAMES.len();
        let e = op_trial(op, &mut rng, trial as u64);
        ensure!(
            e.is_finite(),
            "{} trial {trial}: non-finite error",
            OP_NAMES[op]
        );
        worst[op] = worst[op].max(e);
    }
    let elapsed = start.elapsed();
    let (i, &max) = worst
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    ensure!(
        max <= GRAD_TOL,
        "{} worst relative error {max:.2e} > {GRAD_TOL:.0e}",
        OP_NAMES[i]
    );
    ensure!(
        elapsed <= GRAD_BUDGET,
        "took {elapsed:.1?}, budget {GRAD_BUDGET:?}"
    );
    Ok(format!(
        "{GRAD_TRIALS} trials over {} ops incl. tiny ViT, worst rel err {max:.2e} ({}) <= {GRAD_TOL:.0e}, {elapsed:.1?}",
        OP_NAMES.len(),
        OP_NAMES[i]
    ))
}

// ------------------------------------------------------------ conservation

fn random_scene_stream(rng: &mut ChaCha8Rng) -> EventStream {
    let mut scene = GripperScene {
        contrast_threshold: rng.random_range(0.15..0.8),
        ..GripperScene::default()
    };
    if rng.random_bool(0.7) {
        scene.noise = Some(NoiseConfig {
            rate_hz: rng.random_range(0.0..20_000.0),
            seed: rng.random(),
        });
    }
    let profile_cfg = GraspProfileConfig {
        duration_s: rng.random_range(0.3..2.0),
        ..GraspProfileConfig::default()
    };
    let profile = if rng.random_bool(0.5) {
        grasp_profile(
            &profile_cfg,
            rng.random_range(0.2..1.0) * scene.f_max,
            rng.random_range(0.5..2.0),
        )
    } else {
        // Non-monotone: the finger closes and opens.
        let n = profile_cfg.sample_count();
        ForceTrack::new(
            profile_cfg.rate_hz,
            (0..n)
                .map(|_| rng.random_range(0.0..=scene.f_max))
                .collect(),
        )
    };
    let substeps = rng.random_range(1..6);
    synthesize_recording(&scene, &profile, substeps).unwrap().0
}

fn criterion_conservation() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0);
    let (mut windows, mut events) = (0usize, 0usize);
    for s in 0..CONSERVATION_STREAMS {
        let stream = random_scene_stream(&mut rng);
        ensure!(validate_stream(&stream).is_ok(), "stream {s} is invalid");
        let window = [10_000u64, 33_333, 50_000, 100_000][rng.random_range(0..4)];
        let end = stream.last_t().map_or(window, |t| t + 1);
        let spec = FrameSpec::raw(AccumulationMode::Count, window);
        let mut joined = Vec::with_capacity(stream.len());
        let mut t0 = 0;
        while t0 < end {
            let t1 = t0 + window;
            let slice = slice_window(&stream, t0, t1).map_err(|e| e.to_string())?;
            // Independent count by linear scan.
            let scanned = stream
                .events
                .iter()
                .filter(|e| (t0..t1).contains(&e.t_us))
                .count();
            let frame = accumulate_frame(&slice, &spec, t0);
            let mass: f64 = frame.data.iter().map(|&v| v as f64).sum();
            ensure!(
                slice.len() == scanned && mass == scanned as f64,
                "stream {s} window [{t0}, {t1}): slice {} scan {scanned} frame mass {mass}",
                slice.len()
            );
            joined.extend_from_slice(&slice.events);
            windows += 1;
            t0 = t1;
        }
        ensure!(
            joined == stream.events,
            "stream {s}: slices do not concatenate to the stream"
        );
        events += stream.len();
    }
    let elapsed = start.elapsed();
    ensure!(
        elapsed <= CONSERVATION_BUDGET,
        "took {elapsed:.1?}, budget {CONSERVATION_BUDGET:?}"
    );
    Ok(format!(
        "{CONSERVATION_STREAMS} streams, {events} events, {windows} windows exact, {elapsed:.1?}"
    ))
}

// -------------------------------------------------------------- round trips

fn random_stream(rng: &mut ChaCha8Rng) -> EventStream {
    let width = rng.random_range(1..=640u16);
    let height = rng.random_range(1..=480u16);
    let n = rng.random_range(0..2000usize);
    let t_max = if rng.random_bool(0.2) {
        u64::MAX
    } else {
        10_000_000
    };
    let mut ts: Vec<u64> = (0..n).map(|_| rng.random_range(0..t_max)).collect();
    ts.sort_unstable();
    let events = ts
        .into_iter()
        .map(|t| {
            let p = if rng.random_bool(0.5) {
                Polarity::On
            } else {
                Polarity::Off
            };
            Event::new(
                t,
                rng.random_range(0..width),
                rng.random_range(0..height),
                p,
            )
        })
        .collect();
    EventStream::new(width, height, events)
}

fn random_dataset(rng: &mut ChaCha8Rng) -> FrameDataset {
    let c = rng.random_range(1..=2usize);
    let (h, w) = (rng.random_range(1..24usize), rng.random_range(1..24usize));
    let mut ds = FrameDataset::empty(c, h, w);
    let recordings = rng.random_range(1..4usize);
    for r in 0..recordings {
        for _ in 0..rng.random_range(0..6usize) {
            let mut f = Frame::zeros(c, h, w);
            for v in f.data.iter_mut() {
                *v = f32::from_bits(rng.random::<u32>() & 0x7F7F_FFFF).min(1e30)
                    * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            }
            ds.frames.push(f);
            ds.labels.push(rng.random_range(0.0..DESK_F_MAX as f32));
            ds.provenance.push(format!("rec_{r:03}"));
        }
    }
    ds
}

fn criterion_round_trips() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x10);
    let mut counts = [0usize; 3];
    for case in 0..ROUND_TRIP_CASES {
        let stream = random_stream(&mut rng);
        for (i, format) in [EventFormat::Csv, EventFormat::Binary]
            .into_iter()
            .enumerate()
        {
            let a = dir.path().join(format!("a.{}", format.extension()));
            let b = dir.path().join(format!("b.{}", format.extension()));
            write_events(&stream, &a, format).map_err(|e| e.to_string())?;
            let back = read_events(&a, format).map_err(|e| e.to_string())?;
            ensure!(
                back == stream,
                "{format:?} case {case}: stream differs after reading"
            );
            write_events(&back, &b, format).map_err(|e| e.to_string())?;
            ensure!(
                fs::read(&a).unwrap() == fs::read(&b).unwrap(),
                "{format:?} case {case}: rewritten bytes differ"
            );
            counts[i] += 1;
        }

        let ds = random_dataset(&mut rng);
        let (a, b) = (dir.path().join("a.frd1"), dir.path().join("b.frd1"));
        let spec = FrameSpec::default();
        let with_sidecar = case % 2 == 0;
        let sidecar = SidecarManifest::new(&ds, &spec, 0);
        write_frd1(&a, &ds, with_sidecar.then_some(&sidecar)).map_err(|e| e.to_string())?;
        if !with_sidecar {
            let _ = fs::remove_file(dir.path().join("a.frd1.json"));
        }
        let back = read_frd1(&a).map_err(|e| e.to_string())?;
        let same_values = back.frames.len() == ds.frames.len()
            && back.frames.iter().zip(&ds.frames).all(|(x, y)| {
                x.data
                    .iter()
                    .map(|v| v.to_bits())
                    .eq(y.data.iter().map(|v| v.to_bits()))
            })
            && back.labels == ds.labels
            && (back.channels, back.height, back.width) == (ds.channels, ds.height, ds.width);
        ensure!(same_values, "FRD1 case {case}: values differ after reading");
        if with_sidecar {
            ensure!(
                back.provenance == ds.provenance,
                "FRD1 case {case}: provenance differs"
            );
        }
        write_frd1(&b, &back, None).map_err(|e| e.to_string())?;
        ensure!(
            fs::read(&a).unwrap() == fs::read(&b).unwrap(),
            "FRD1 case {case}: rewritten bytes differ"
        );
        counts[2] += 1;
    }
    Ok(format!(
        "CSV {} / EVB1 {} / FRD1 {} randomized cases byte-exact",
        counts[0], counts[1], counts[2]
    ))
}

// ------------------------------------------------------------ desk pipeline

struct Desk {
    dir: TempDir,
}

impl Desk {
    fn rec_dir(&self) -> PathBuf {
        self.dir.path().join("rec")
    }

    fn data(&self) -> PathBuf {
        self.dir.path().join("desk.frd1")
    }

    /// Default synth + convert, run once and shared by later criteria.
    fn ensure_dataset(&self) -> Result<(), String> {
        if self.data().exists() {
            return Ok(());
        }
        let seed = LEARN_SEED.to_string();
        evtforce(&["synth", "--seed", &seed, "--out", path_str(&self.rec_dir())])?;
        evtforce(&[
            "convert",
            "--seed",
            &seed,
            "--in",
            path_str(&self.rec_dir()),
            "--out",
            path_str(&self.data()),
        ])?;
        Ok(())
    }
}

fn criterion_geometry(desk: &Desk) -> Outcome {
    desk.ensure_dataset()?;
    let manifest = read_json(&desk.rec_dir().join("manifest.json"))?;
    let list = manifest["recordings"]
        .as_array()
        .ok_or("manifest has no recordings")?;
    ensure!(list.len() == DESK_RECORDINGS, "{} recordings", list.len());

    let ds = read_frd1(&desk.data()).map_err(|e| e.to_string())?;
    ensure!(ds.len() == DESK_FRAMES, "{} frames", ds.len());
    let sidecar = read_json(&evtforce_core::frame::sidecar_path(&desk.data()))?;
    ensure!(
        sidecar["spec"]["window_us"] == DESK_WINDOW_US,
        "window {}",
        sidecar["spec"]["window_us"]
    );
    let (lo, hi) = ds
        .labels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &y| {
            (a.min(y), b.max(y))
        });
    ensure!(
        lo >= 0.0 && hi <= DESK_F_MAX as f32,
        "labels span [{lo}, {hi}]"
    );

    let mut offset = 0;
    for entry in list {
        let id = entry["id"].as_str().ok_or("entry without id")?;
        let track: ForceTrack = serde_json::from_value(read_json(
            &desk.rec_dir().join(entry["labels"].as_str().unwrap()),
        )?)
        .map_err(|e| e.to_string())?;
        ensure!(
            track.rate_hz == DESK_LABEL_HZ,
            "{id}: label rate {}",
            track.rate_hz
        );
        ensure!(
            (track.period_us() - DESK_WINDOW_US as f64).abs() < 1e-9,
            "{id}: label period {} us",
            track.period_us()
        );
        let n = ds.provenance[offset..]
            .iter()
            .take_while(|p| p.as_str() == id)
            .count();
        ensure!(n == DESK_FRAMES / DESK_RECORDINGS, "{id}: {n} frames");
        for k in 0..n {
            let f = &ds.frames[offset + k];
            ensure!(
                f.t_start_us == k as u64 * DESK_WINDOW_US
                    && f.t_end_us == f.t_start_us + DESK_WINDOW_US,
                "{id} frame {k}: window [{}, {})",
                f.t_start_us,
                f.t_end_us
            );
            ensure!(
                ds.labels[offset + k] == track.samples[k] as f32,
                "{id} frame {k}: label {} vs track {}",
                ds.labels[offset + k],
                track.samples[k]
            );
        }
        offset += n;
    }
    ensure!(
        offset == ds.len(),
        "{} frames not attributed to a recording",
        ds.len() - offset
    );
    Ok(format!(
        "{DESK_RECORDINGS} recordings, {} frames {}x{}x{}, labels in [{lo:.3}, {hi:.3}] N, {} us windows on {DESK_LABEL_HZ} Hz labels",
        ds.len(),
        ds.channels,
        ds.height,
        ds.width,
        DESK_WINDOW_US
    ))
}

fn criterion_learning(desk: &Desk) -> Outcome {
    desk.ensure_dataset()?;
    let start = Instant::now();
    let ckpt = desk.dir.path().join("learn.bin");
    evtforce(&[
        "train",
        "--seed",
        &LEARN_SEED.to_string(),
        "--data",
        path_str(&desk.data()),
        "--epochs",
        &LEARN_EPOCHS.to_string(),
        "--out",
        path_str(&ckpt),
    ])?;
    let elapsed = start.elapsed();

    // Recompute the test metrics from the checkpoint, independent of the
    // summary the command wrote.
    let cfg = PipelineConfig::default();
    ensure!(
        cfg.train.learning_rate == 1e-3 && cfg.train.batch_size == 16,
        "defaults changed"
    );
    let ds = read_frd1(&desk.data()).map_err(|e| e.to_string())?;
    let split = split_indices(ds.len(), cfg.train.split, LEARN_SEED).map_err(|e| e.to_string())?;
    ensure!(
        (split.train.len(), split.val.len(), split.test.len()) == (700, 150, 150),
        "split {}/{}/{}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let model = load_checkpoint::<f32>(&ckpt).map_err(|e| e.to_string())?;
    let test = ds.subset(&split.test);
    let pred = predict_dataset(&model, &test).map_err(|e| e.to_string())?;
    let y: Vec<f64> = test.labels.iter().map(|&v| v as f64).collect();
    let n = y.len() as f64;
    let ss_res: f64 = pred.iter().zip(&y).map(|(p, t)| (p - t) * (p - t)).sum();
    let mean_test = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|t| (t - mean_test) * (t - mean_test)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    let rmse = (ss_res / n).sqrt();
    // The mean-label predictor uses the training labels' mean.
    let mean_train = split
        .train
        .iter()
        .map(|&i| ds.labels[i] as f64)
        .sum::<f64>()
        / split.train.len() as f64;
    let rmse_mean = (y
        .iter()
        .map(|t| (t - mean_train) * (t - mean_train))
        .sum::<f64>()
        / n)
        .sqrt();

    let summary = read_json(&PathBuf::from(format!("{}.summary.json", ckpt.display())))?;
    let reported = summary["metrics"]["test"]["r2"]
        .as_f64()
        .ok_or("summary has no test r2")?;
    ensure!(
        (reported - r2).abs() <= 1e-9,
        "summary r2 {reported} vs recomputed {r2}"
    );
    let initial = summary["initial_train_mse"]
        .as_f64()
        .ok_or("no initial_train_mse")?;
    let last = summary["final_train_mse"]
        .as_f64()
        .ok_or("no final_train_mse")?;
    let drop = initial / last;

    let detail = format!(
        "{LEARN_EPOCHS} epochs in {:.0}s, test R2 {r2:.4} (>= {MIN_R2}), RMSE {rmse:.4} N vs mean-predictor {rmse_mean:.4} N (ratio {:.3} <= {MAX_RMSE_RATIO}), train MSE {initial:.4} -> {last:.5} ({drop:.0}x >= {MIN_LOSS_DROP}x)",
        elapsed.as_secs_f64(),
        rmse / rmse_mean
    );
    ensure!(r2 >= MIN_R2, "{detail}");
    ensure!(rmse <= MAX_RMSE_RATIO * rmse_mean, "{detail}");
    ensure!(drop >= MIN_LOSS_DROP, "{detail}");
    Ok(detail)
}

// ------------------------------------------------------------------ metrics

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6E);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    let (mut worst_mse, mut worst_r2) = (0.0f64, 0.0f64);
    for case in 0..METRIC_CASES {
        let n = rng.random_range(2..=128usize);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..DESK_F_MAX)).collect();
        let pred: Vec<f64> = y.iter().map(|t| t + rng.random_range(-0.5..0.5)).collect();
        let m = compute_metrics(&pred, &y, 0.05).map_err(|e| e.to_string())?;

        // Training loss on the tape, the other route to the same number.
        let mut g = Graph::<f64>::no_grad();
        let p = g.constant(Tensor::new(&[n, 1], pred.clone()).unwrap());
        let t = g.constant(Tensor::new(&[n, 1], y.clone()).unwrap());
        let l = mse_loss(&mut g, p, t).map_err(|e| e.to_string())?;
        let mse = g.value(l).data()[0];
        worst_mse = worst_mse.max(rel(m.rmse * m.rmse, mse));

        let mean = y.iter().sum::<f64>() / n as f64;
        let base = compute_metrics(&vec![mean; n], &y, 0.05).map_err(|e| e.to_string())?;
        let r2 = base.r2.ok_or(format!("case {case}: r2 undefined"))?;
        worst_r2 = worst_r2.max(r2.abs());
        ensure!(
            m.r2.unwrap() <= 1.0,
            "case {case}: r2 {} > 1",
            m.r2.unwrap()
        );
    }
    ensure!(
        worst_mse <= METRIC_TOL,
        "rmse^2 vs mse relative error {worst_mse:.2e}"
    );
    ensure!(worst_r2 <= METRIC_TOL, "mean-predictor |r2| {worst_r2:.2e}");

    let spot = compute_metrics(&[0.48, 1.53], &[0.50, 1.50], 0.05).map_err(|e| e.to_string())?;
    ensure!(
        (spot.mse() - 0.00065).abs() <= METRIC_TOL,
        "spot mse {}",
        spot.mse()
    );
    // 0.02550 is sqrt(0.00065) = 0.0254951 rounded to five decimals.
    ensure!(
        (spot.rmse - 0.00065f64.sqrt()).abs() <= METRIC_TOL,
        "spot rmse {}",
        spot.rmse
    );
    ensure!(
        format!("{:.5}", spot.rmse) == "0.02550",
        "spot rmse {}",
        spot.rmse
    );
    Ok(format!(
        "{METRIC_CASES} cases: max rel |rmse^2 - mse| {worst_mse:.1e}, max |mean-predictor r2| {worst_r2:.1e}; spot mse {:.5} rmse {:.5}",
        spot.mse(),
        spot.rmse
    ))
}

// -------------------------------------------------------------- determinism

fn pipeline_run(root: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let rec = root.join("rec");
    let data = root.join("data.frd1");
    let ckpt = root.join("model.bin");
    evtforce(&["synth", "--seed", "7", "--out", path_str(&rec)])?;
    evtforce(&[
        "convert",
        "--seed",
        "7",
        "--in",
        path_str(&rec),
        "--out",
        path_str(&data),
    ])?;
    evtforce(&[
        "train",
        "--seed",
        "7",
        "--data",
        path_str(&data),
        "--epochs",
        &DETERMINISM_EPOCHS.to_string(),
        "--out",
        path_str(&ckpt),
    ])?;
    let mut files = Vec::new();
    for name in [
        "data.frd1",
        "model.bin",
        "model.bin.json",
        "model.bin.log.csv",
        "model.bin.summary.json",
    ] {
        files.push((
            name.to_string(),
            fs::read(root.join(name)).map_err(|e| format!("{name}: {e}"))?,
        ));
    }
    let mut recs: Vec<_> = fs::read_dir(&rec)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .collect();
    recs.sort();
    for p in recs {
        let name = format!("rec/{}", p.file_name().unwrap().to_string_lossy());
        files.push((name, fs::read(&p).map_err(|e| e.to_string())?));
    }
    Ok(files)
}

fn criterion_determinism() -> Outcome {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let run_a = pipeline_run(a.path())?;
    // Let the wall clock move so a time-dependent artifact would differ.
    std::thread::sleep(Duration::from_millis(1100));
    let run_b = pipeline_run(b.path())?;
    ensure!(run_a.len() == run_b.len(), "file lists differ");
    let mut bytes = 0;
    for ((na, fa), (nb, fb)) in run_a.iter().zip(&run_b) {
        ensure!(na == nb, "file lists differ at {na} / {nb}");
        ensure!(fa == fb, "{na} differs between runs");
        bytes += fa.len();
    }
    Ok(format!(
        "{} files ({bytes} bytes) identical across two synth+convert+train runs ({DETERMINISM_EPOCHS} epochs, desk model)",
        run_a.len()
    ))
}

// --------------------------------------------------------------- throughput

fn criterion_throughput() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7);
    let (w, h) = (320u16, 240u16);
    let mut ts: Vec<u64> = (0..THROUGHPUT_EVENTS)
        .map(|_| rng.random_range(0..10_000_000))
        .collect();
    ts.sort_unstable();
    let events: Vec<Event> = ts
        .into_iter()
        .map(|t| {
            let p = if rng.random_bool(0.5) {
                Polarity::On
            } else {
                Polarity::Off
            };
            Event::new(t, rng.random_range(0..w), rng.random_range(0..h), p)
        })
        .collect();
    let stream = EventStream::new(w, h, events);

    let mut best = f64::INFINITY;
    let mut mass = 0.0;
    for _ in 0..5 {
        let start = Instant::now();
        mass = 0.0;
        let mut t0 = 0;
        while t0 < 10_000_000 {
            let f = accumulate_raw(
                stream.window(t0, t0 + DESK_WINDOW_US),
                w as usize,
                h as usize,
                AccumulationMode::Count,
            );
            mass += f.data[0] as f64;
            t0 += DESK_WINDOW_US;
        }
        best = best.min(start.elapsed().as_secs_f64());
    }
    std::hint::black_box(mass);
    let rate = THROUGHPUT_EVENTS as f64 / best;

    let dir = TempDir::new().unwrap();
    let input = dir.path().join("bench.evb");
    write_events(&stream, &input, EventFormat::Binary).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    cmd_bench(&PipelineConfig::default(), &input, 3, None, &mut out).map_err(|e| e.to_string())?;
    let report: Value = serde_json::from_slice(&out).map_err(|e| e.to_string())?;
    let mut modes = Vec::new();
    for mode in AccumulationMode::ALL {
        let r = report["events_per_second"][mode.name()]
            .as_f64()
            .unwrap_or(0.0);
        ensure!(r > 0.0, "bench reports {r} for {}", mode.name());
        modes.push(format!("{} {:.2e}", mode.name(), r));
    }
    ensure!(
        rate >= MIN_EVENTS_PER_S,
        "count mode {rate:.3e} events/s < {MIN_EVENTS_PER_S:.0e}"
    );
    Ok(format!(
        "count mode {rate:.3e} events/s on {THROUGHPUT_EVENTS} events (floor {MIN_EVENTS_PER_S:.0e}); bench: {}",
        modes.join(", ")
    ))
}

fn main() -> ExitCode {
    // Keep assertion output from interleaving with the result lines.
    panic::set_hook(Box::new(|_| {}));
    let desk = Desk {
        dir: TempDir::new().expect("temp dir"),
    };
    let criteria: Vec<Criterion> = vec![
        ("1 gradient oracle", Box::new(criterion_gradients)),
        ("2 event conservation", Box::new(criterion_conservation)),
        ("3 format round trips", Box::new(criterion_round_trips)),
        ("4 desk geometry", Box::new(|| criterion_geometry(&desk))),
        (
            "5 end-to-end learning",
            Box::new(|| criterion_learning(&desk)),
        ),
        ("6 metric identities", Box::new(criterion_metrics)),
        ("7 determinism", Box::new(criterion_determinism)),
        ("8 throughput", Box::new(criterion_throughput)),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name:<24} {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<24} {why} [{secs:.1}s]");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
