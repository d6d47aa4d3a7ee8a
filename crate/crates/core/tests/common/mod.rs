#![allow(dead_code)]

use evtforce_core::event::{Event, EventStream, Polarity};
use proptest::prelude::*;
use rand::Rng;

/// Valid stream of `n` events with sorted timestamps below `t_max`.
pub fn random_stream(
    rng: &mut impl Rng,
    n: usize,
    width: u16,
    height: u16,
    t_max: u64,
) -> EventStream {
    let mut ts: Vec<u64> = (0..n).map(|_| rng.random_range(0..t_max.max(1))).collect();
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

/// Proptest strategy for valid streams up to `max_len` events.
pub fn arb_stream(max_len: usize) -> impl Strategy<Value = EventStream> {
    (1u16..64, 1u16..48, any::<u64>(), 0..=max_len).prop_map(|(w, h, seed, n)| {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        random_stream(&mut rng, n, w, h, 5_000_000)
    })
}
