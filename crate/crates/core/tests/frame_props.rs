mod common;

use common::{arb_stream, random_stream};
use evtforce_core::event::{slice_window, Event, EventStream, Polarity};
use evtforce_core::frame::{
    accumulate_frame, build_dataset, read_frd1, resize_frame, write_frd1, AccumulationMode,
    ForceTrack, Frame, FrameDataset, FrameSpec, Recording, DEFAULT_FORCE_RANGE,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn raw(stream: &EventStream, mode: AccumulationMode, t0: u64, t1: u64) -> Frame {
    let w = slice_window(stream, t0, t1).unwrap();
    accumulate_frame(&w, &FrameSpec::raw(mode, t1 - t0), t0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn accumulation_modes_agree(stream in arb_stream(400), t0 in 0u64..4_000_000, len in 1u64..2_000_000) {
        let t1 = t0 + len;
        let count = raw(&stream, AccumulationMode::Count, t0, t1);
        let binary = raw(&stream, AccumulationMode::Binary, t0, t1);
        let pol = raw(&stream, AccumulationMode::Polarity2Ch, t0, t1);
        let n = slice_window(&stream, t0, t1).unwrap().len();
        prop_assert_eq!(count.mass(), n as f64);
        prop_assert!(count.data.iter().all(|v| v.fract() == 0.0 && *v >= 0.0));
        for (b, c) in binary.data.iter().zip(&count.data) {
            prop_assert_eq!(*b, if *c > 0.0 { 1.0 } else { 0.0 });
        }
        let plane = count.data.len();
        for i in 0..plane {
            prop_assert_eq!(pol.data[i] + pol.data[plane + i], count.data[i]);
        }
        prop_assert_eq!(pol.channels, 2);
    }

    #[test]
    fn windows_conserve_events(stream in arb_stream(400), window in 1u64..1_500_000) {
        let end = stream.last_t().map_or(0, |t| t + 1);
        let mut total = 0.0;
        let mut t0 = 0;
        while t0 < end {
            total += raw(&stream, AccumulationMode::Count, t0, t0 + window).mass();
            t0 += window;
        }
        prop_assert_eq!(total, stream.len() as f64);
    }

    #[test]
    fn resize_preserves_mass(seed in any::<u64>(), h in 1usize..40, w in 1usize..40, out in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Frame::zeros(2, h, w);
        for v in f.data.iter_mut() {
            *v = rng.random_range(0..5) as f32;
        }
        let r = resize_frame(&f, out);
        prop_assert_eq!((r.channels, r.height, r.width), (2, out, out));
        let (a, b) = (f.mass(), r.mass());
        prop_assert!((a - b).abs() <= 1e-6 * a.max(1.0));
    }
}

#[test]
fn single_pixel_examples() {
    let one = EventStream::new(8, 8, vec![Event::new(10, 3, 2, Polarity::On)]);
    let f = accumulate_frame(&one, &FrameSpec::raw(AccumulationMode::Count, 100), 0);
    assert_eq!(f.at(0, 2, 3), 1.0);
    assert_eq!(f.mass(), 1.0);

    let three = EventStream::new(
        8,
        8,
        (0..3).map(|t| Event::new(t, 5, 5, Polarity::On)).collect(),
    );
    let at = |mode| accumulate_frame(&three, &FrameSpec::raw(mode, 100), 0);
    assert_eq!(at(AccumulationMode::Count).at(0, 5, 5), 3.0);
    assert_eq!(at(AccumulationMode::Binary).at(0, 5, 5), 1.0);
    let p = at(AccumulationMode::Polarity2Ch);
    assert_eq!((p.at(0, 5, 5), p.at(1, 5, 5)), (3.0, 0.0));

    let empty = EventStream::empty(8, 8);
    assert!(accumulate_frame(&empty, &FrameSpec::default(), 0)
        .data
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn sensor_frame_to_model_size_keeps_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut f = Frame::zeros(1, 240, 320);
    for v in f.data.iter_mut() {
        *v = rng.random::<f32>();
    }
    let r = resize_frame(&f, 64);
    assert!((f.mass() - r.mass()).abs() <= 1e-6 * f.mass());
    assert_eq!(resize_frame(&f, 320).data.len(), 320 * 320);
    let mut ones = Frame::zeros(1, 2, 2);
    ones.data.fill(1.0);
    assert_eq!(resize_frame(&ones, 1).data, vec![4.0]);
}

#[test]
fn normalized_frames_peak_at_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = random_stream(&mut rng, 5000, 320, 240, 100_000);
    let f = accumulate_frame(&s, &FrameSpec::default(), 0);
    let max = f.data.iter().cloned().fold(0.0f32, f32::max);
    assert_eq!(max, 1.0);
    assert!(f.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!((f.channels, f.height, f.width), (2, 64, 64));
}

fn recordings(n: usize, seconds: u64, seed: u64) -> Vec<Recording> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let duration_us = seconds * 1_000_000;
            let samples = (0..=seconds * 10)
                .map(|_| rng.random_range(0.0..1.6))
                .collect();
            Recording {
                id: format!("r{i}"),
                stream: random_stream(&mut rng, 2000, 320, 240, duration_us),
                duration_us,
                forces: ForceTrack::new(10.0, samples),
            }
        })
        .collect()
}

#[test]
fn desk_geometry_dataset_size() {
    let recs = recordings(25, 4, 1);
    let ds = build_dataset(&recs, &FrameSpec::default(), DEFAULT_FORCE_RANGE).unwrap();
    assert_eq!(ds.len(), 1000);
    assert_eq!(ds.labels.len(), 1000);
    for (r, rec) in recs.iter().enumerate() {
        for k in 0..40 {
            assert_eq!(ds.labels[r * 40 + k], rec.forces.samples[k] as f32);
            assert_eq!(ds.provenance[r * 40 + k], rec.id);
        }
    }
}

#[test]
fn dataset_is_schedule_independent() {
    let recs = recordings(4, 2, 9);
    let spec = FrameSpec::default();
    let parallel = build_dataset(&recs, &spec, DEFAULT_FORCE_RANGE).unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let serial = pool.install(|| build_dataset(&recs, &spec, DEFAULT_FORCE_RANGE).unwrap());
    assert_eq!(parallel, serial);
}

#[test]
fn frd1_round_trip_is_byte_exact() {
    let recs = recordings(3, 1, 4);
    let ds: FrameDataset =
        build_dataset(&recs, &FrameSpec::default(), DEFAULT_FORCE_RANGE).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.frd1"), dir.path().join("b.frd1"));
    write_frd1(&a, &ds, None).unwrap();
    let back = read_frd1(&a).unwrap();
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.frames.len(), ds.frames.len());
    write_frd1(&b, &back, None).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
