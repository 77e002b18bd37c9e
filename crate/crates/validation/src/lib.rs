//! Fixtures and timing helpers behind the acceptance suite and the
//! throughput benchmarks.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use elspin::tagstore::{cross_correlate, fold, seconds_to_ticks, CoincidenceHistogram, FoldedHistogram, TagRecord, TagStream};
use elspin::Result;

/// Homogeneous Poisson arrivals at `rate` per second over `total_time`
/// seconds on a single channel.
pub fn poisson_stream(seed: u64, rate: f64, total_time: f64, channel: u8, resolution_ps: u64) -> TagStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(rate).expect("rate must be > 0");
    let end = seconds_to_ticks(total_time, resolution_ps);
    let tick = resolution_ps as f64 * 1e-12;
    let mut records = Vec::with_capacity((rate * total_time * 1.01) as usize + 16);
    let mut t = 0.0;
    loop {
        t += gap.sample(&mut rng);
        let ticks = (t / tick) as u64;
        if ticks >= end {
            break;
        }
        records.push(TagRecord::new(ticks, channel));
    }
    TagStream::new(resolution_ps, u32::from(channel) + 1, end, records).expect("arrivals are sorted")
}

/// Wall time of a single call.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

/// Folding throughput in tags per second.
pub fn fold_throughput(stream: &TagStream, period: f64, bin: f64) -> Result<(FoldedHistogram, f64)> {
    let (hist, dt) = timed(|| fold(stream, period, bin, None));
    Ok((hist?, stream.len() as f64 / dt.as_secs_f64()))
}

/// Single-threaded cross-correlation with its wall time.
pub fn cross_correlate_timed(
    a: &TagStream,
    b: &TagStream,
    period: f64,
    bin: f64,
    n_max: u32,
) -> Result<(CoincidenceHistogram, Duration)> {
    let (hist, dt) = timed(|| cross_correlate(a, b, period, bin, n_max));
    Ok((hist?, dt))
}
