//! Time-tag streams and the operations every analysis is built on: the
//! TTG1 binary format, period folding, window selection, and coincidence
//! histograms.
//!
//! Tag times are integer ticks of `resolution_ps` picoseconds. Every time
//! given in seconds is converted to ticks with round-half-even before it is
//! compared against a tag.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeline::Timeline;

pub const TTG1_MAGIC: [u8; 4] = *b"TTG1";
pub const TTG1_VERSION: u32 = 1;
pub const TTG1_HEADER_LEN: usize = 40;
pub const TTG1_RECORD_LEN: usize = 16;

/// Ground-truth source stored in the low two flag bits by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TagSource {
    Emitter = 0,
    Background = 1,
    Dark = 2,
    FastDecay = 3,
}

pub mod flags {
    //! Flag byte layout: bits 0-1 source, bits 2-4 transition (0 none,
    //! 1..=4 for A..D). Streams from real hardware carry zero flags.
    use super::TagSource;
    use crate::model::TransitionLabel;

    pub const SOURCE_MASK: u8 = 0b11;

    pub fn encode(source: TagSource, transition: Option<TransitionLabel>) -> u8 {
        let t = transition.map_or(0, |l| l.index() as u8 + 1);
        (source as u8) | (t << 2)
    }

    pub fn source(flags: u8) -> TagSource {
        match flags & SOURCE_MASK {
            0 => TagSource::Emitter,
            1 => TagSource::Background,
            2 => TagSource::Dark,
            _ => TagSource::FastDecay,
        }
    }

    pub fn transition(flags: u8) -> Option<TransitionLabel> {
        match (flags >> 2) & 0b111 {
            1 => Some(TransitionLabel::A),
            2 => Some(TransitionLabel::B),
            3 => Some(TransitionLabel::C),
            4 => Some(TransitionLabel::D),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TagRecord {
    pub time: u64,
    pub channel: u8,
    pub flags: u8,
}

impl TagRecord {
    pub fn new(time: u64, channel: u8) -> Self {
        Self {
            time,
            channel,
            flags: 0,
        }
    }
}

/// Converts seconds to ticks of `resolution_ps`, rounding half to even.
pub fn seconds_to_ticks(seconds: f64, resolution_ps: u64) -> u64 {
    let ticks = (seconds * 1e12 / resolution_ps as f64).round_ties_even();
    if ticks <= 0.0 {
        0
    } else {
        ticks as u64
    }
}

pub fn ticks_to_seconds(ticks: u64, resolution_ps: u64) -> f64 {
    ticks as f64 * resolution_ps as f64 * 1e-12
}

/// Sorted detection records with acquisition metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagStream {
    resolution_ps: u64,
    channel_count: u32,
    total_time_ticks: u64,
    records: Vec<TagRecord>,
}

impl TagStream {
    pub fn new(
        resolution_ps: u64,
        channel_count: u32,
        total_time_ticks: u64,
        records: Vec<TagRecord>,
    ) -> Result<Self> {
        if resolution_ps == 0 {
            return Err(Error::invalid("resolution must be > 0 ps"));
        }
        if records.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(Error::invalid("records are not sorted by time"));
        }
        if let Some(last) = records.last() {
            if last.time >= total_time_ticks {
                return Err(Error::invalid("record time beyond total acquisition time"));
            }
        }
        if records.iter().any(|r| r.channel as u32 >= channel_count) {
            return Err(Error::invalid("record channel outside channel count"));
        }
        Ok(Self {
            resolution_ps,
            channel_count,
            total_time_ticks,
            records,
        })
    }

    /// Sorts `records` (time, then channel) before building the stream.
    pub fn from_unsorted(
        resolution_ps: u64,
        channel_count: u32,
        total_time_ticks: u64,
        mut records: Vec<TagRecord>,
    ) -> Result<Self> {
        records.sort_unstable();
        Self::new(resolution_ps, channel_count, total_time_ticks, records)
    }

    pub fn resolution_ps(&self) -> u64 {
        self.resolution_ps
    }

    pub fn channel_count(&self) -> u32 {
        self.channel_count
    }

    pub fn total_time_ticks(&self) -> u64 {
        self.total_time_ticks
    }

    pub fn total_time(&self) -> f64 {
        ticks_to_seconds(self.total_time_ticks, self.resolution_ps)
    }

    pub fn records(&self) -> &[TagRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ticks(&self, seconds: f64) -> u64 {
        seconds_to_ticks(seconds, self.resolution_ps)
    }

    pub fn counts_per_channel(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.channel_count as usize];
        for r in &self.records {
            counts[r.channel as usize] += 1;
        }
        counts
    }

    /// Mean count rate per channel, counts per second.
    pub fn rates(&self) -> Vec<f64> {
        let t = self.total_time();
        self.counts_per_channel()
            .into_iter()
            .map(|c| c as f64 / t)
            .collect()
    }

    pub fn times(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.time).collect()
    }

    /// Records satisfying `keep`, same metadata.
    pub fn filter<F: Fn(&TagRecord) -> bool>(&self, keep: F) -> TagStream {
        TagStream {
            resolution_ps: self.resolution_ps,
            channel_count: self.channel_count,
            total_time_ticks: self.total_time_ticks,
            records: self.records.iter().copied().filter(|r| keep(r)).collect(),
        }
    }

    pub fn select_channel(&self, channel: u8) -> TagStream {
        self.filter(|r| r.channel == channel)
    }

    pub fn select_channels(&self, channels: &[u8]) -> TagStream {
        self.filter(|r| channels.contains(&r.channel))
    }

    pub fn select_source(&self, source: TagSource) -> TagStream {
        self.filter(|r| flags::source(r.flags) == source)
    }

    /// Merges streams sharing resolution and total time.
    pub fn merge(streams: &[&TagStream]) -> Result<TagStream> {
        let first = streams
            .first()
            .ok_or_else(|| Error::invalid("nothing to merge"))?;
        let mut records = Vec::with_capacity(streams.iter().map(|s| s.len()).sum());
        let mut channel_count = 0;
        for s in streams {
            if s.resolution_ps != first.resolution_ps || s.total_time_ticks != first.total_time_ticks {
                return Err(Error::invalid("streams differ in resolution or total time"));
            }
            channel_count = channel_count.max(s.channel_count);
            records.extend_from_slice(&s.records);
        }
        records.sort_unstable();
        TagStream::new(first.resolution_ps, channel_count, first.total_time_ticks, records)
    }
}

/// Writes the TTG1 little-endian layout: a 40-byte header followed by
/// 16-byte records.
pub fn write_tags<W: Write>(stream: &TagStream, mut sink: W) -> Result<()> {
    let mut header = [0u8; TTG1_HEADER_LEN];
    header[0..4].copy_from_slice(&TTG1_MAGIC);
    header[4..8].copy_from_slice(&TTG1_VERSION.to_le_bytes());
    header[8..16].copy_from_slice(&stream.resolution_ps.to_le_bytes());
    header[16..20].copy_from_slice(&stream.channel_count.to_le_bytes());
    header[20..24].copy_from_slice(&0u32.to_le_bytes());
    header[24..32].copy_from_slice(&stream.total_time_ticks.to_le_bytes());
    header[32..40].copy_from_slice(&(stream.records.len() as u64).to_le_bytes());
    sink.write_all(&header)?;
    let mut buf = Vec::with_capacity(TTG1_RECORD_LEN * 4096);
    for chunk in stream.records.chunks(4096) {
        buf.clear();
        for r in chunk {
            buf.extend_from_slice(&encode_record(r));
        }
        sink.write_all(&buf)?;
    }
    sink.flush()?;
    Ok(())
}

pub fn encode_record(r: &TagRecord) -> [u8; TTG1_RECORD_LEN] {
    let mut out = [0u8; TTG1_RECORD_LEN];
    out[0..8].copy_from_slice(&r.time.to_le_bytes());
    out[8] = r.channel;
    out[9] = r.flags;
    out
}

pub fn read_tags<R: Read>(mut source: R) -> Result<TagStream> {
    let mut header = [0u8; TTG1_HEADER_LEN];
    source
        .read_exact(&mut header)
        .map_err(|_| Error::format("truncated header"))?;
    if header[0..4] != TTG1_MAGIC {
        return Err(Error::format("bad magic, expected TTG1"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let u64_at = |i: usize| u64::from_le_bytes(header[i..i + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != TTG1_VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let resolution_ps = u64_at(8);
    if resolution_ps == 0 {
        return Err(Error::format("zero resolution"));
    }
    let channel_count = u32_at(16);
    let total_time_ticks = u64_at(24);
    let record_count = u64_at(32);

    let mut records = Vec::with_capacity(record_count.min(1 << 26) as usize);
    let mut buf = vec![0u8; TTG1_RECORD_LEN * 4096];
    let mut remaining = record_count;
    let mut last = 0u64;
    while remaining > 0 {
        let n = remaining.min(4096) as usize;
        let bytes = &mut buf[..n * TTG1_RECORD_LEN];
        source
            .read_exact(bytes)
            .map_err(|_| Error::format("truncated record data"))?;
        for raw in bytes.chunks_exact(TTG1_RECORD_LEN) {
            let time = u64::from_le_bytes(raw[0..8].try_into().unwrap());
            if time < last {
                return Err(Error::format("records not sorted by time"));
            }
            last = time;
            records.push(TagRecord {
                time,
                channel: raw[8],
                flags: raw[9],
            });
        }
        remaining -= n as u64;
    }
    TagStream::new(resolution_ps, channel_count, total_time_ticks, records)
        .map_err(|e| Error::format(e.to_string()))
}

/// Counts folded modulo the period.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedHistogram {
    /// Bin width, seconds.
    pub bin_width: f64,
    /// Folding period, seconds.
    pub period: f64,
    pub counts: Vec<u64>,
    /// Whole periods in the acquisition.
    pub cycles: u64,
    pub bin_ticks: u64,
    pub period_ticks: u64,
    pub resolution_ps: u64,
}

impl FoldedHistogram {
    /// Start time of bin `i` within the period, seconds.
    pub fn bin_start(&self, i: usize) -> f64 {
        ticks_to_seconds(i as u64 * self.bin_ticks, self.resolution_ps)
    }

    /// Centre of bin `i` (clipped at the period for the last partial bin).
    pub fn bin_center(&self, i: usize) -> f64 {
        let lo = i as u64 * self.bin_ticks;
        let hi = ((i as u64 + 1) * self.bin_ticks).min(self.period_ticks);
        ticks_to_seconds(lo, self.resolution_ps)
            + 0.5 * ticks_to_seconds(hi - lo, self.resolution_ps)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Folds the tags of `channel` (all channels for `None`) modulo `period`
/// into bins of width `bin`: tag `t` lands in bin `floor((t mod period) / bin)`.
pub fn fold(stream: &TagStream, period: f64, bin: f64, channel: Option<u8>) -> Result<FoldedHistogram> {
    let period_ticks = stream.ticks(period);
    let bin_ticks = stream.ticks(bin);
    if period_ticks == 0 || bin_ticks == 0 {
        return Err(Error::invalid("period and bin width must be at least one tick"));
    }
    if bin_ticks > period_ticks {
        return Err(Error::invalid("bin width larger than the period"));
    }
    let nbins = period_ticks.div_ceil(bin_ticks) as usize;
    let mut counts = vec![0u64; nbins];
    match channel {
        Some(ch) => {
            for r in stream.records.iter().filter(|r| r.channel == ch) {
                counts[((r.time % period_ticks) / bin_ticks) as usize] += 1;
            }
        }
        None => {
            for r in &stream.records {
                counts[((r.time % period_ticks) / bin_ticks) as usize] += 1;
            }
        }
    }
    Ok(FoldedHistogram {
        bin_width: ticks_to_seconds(bin_ticks, stream.resolution_ps),
        period: ticks_to_seconds(period_ticks, stream.resolution_ps),
        counts,
        cycles: stream.total_time_ticks / period_ticks,
        bin_ticks,
        period_ticks,
        resolution_ps: stream.resolution_ps,
    })
}

/// Half-open window `[start, end)` inside each period, in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeriodWindow {
    pub start: u64,
    pub end: u64,
    pub period: u64,
}

impl PeriodWindow {
    /// Window starting `offset` after the commanded end of pulse
    /// `pulse_index`, `width` wide. `Ok(None)` if it starts beyond the period.
    pub fn after_pulse(
        timeline: &Timeline,
        pulse_index: usize,
        offset: f64,
        width: f64,
        resolution_ps: u64,
    ) -> Result<Option<PeriodWindow>> {
        if !(offset >= 0.0 && width >= 0.0) {
            return Err(Error::invalid("window offset and width must be >= 0"));
        }
        let pulse = timeline.pulse(pulse_index)?;
        let period = seconds_to_ticks(timeline.period(), resolution_ps);
        let start = seconds_to_ticks(pulse.end() + offset, resolution_ps);
        if start >= period {
            return Ok(None);
        }
        let end = start + seconds_to_ticks(width, resolution_ps);
        if end > period {
            return Err(Error::invalid(format!(
                "window [{start}, {end}) ticks exceeds the period of {period} ticks"
            )));
        }
        Ok(Some(PeriodWindow { start, end, period }))
    }

    #[inline]
    pub fn contains(&self, t: u64) -> bool {
        let phase = t % self.period;
        phase >= self.start && phase < self.end
    }

    pub fn width(&self) -> u64 {
        self.end - self.start
    }

    pub fn overlaps(&self, other: &PeriodWindow) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Keeps tags whose phase lies in the window after pulse `pulse_index`.
/// Absolute times are retained.
pub fn window_select(
    stream: &TagStream,
    timeline: &Timeline,
    pulse_index: usize,
    offset: f64,
    width: f64,
) -> Result<TagStream> {
    match PeriodWindow::after_pulse(timeline, pulse_index, offset, width, stream.resolution_ps)? {
        Some(w) => Ok(stream.filter(|r| w.contains(r.time))),
        None => Ok(stream.filter(|_| false)),
    }
}

/// Normalization inputs carried by a coincidence histogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoincidenceMeta {
    /// Count rate of the start stream, counts/s.
    pub n1: f64,
    /// Count rate of the stop stream, counts/s.
    pub n2: f64,
    /// Pulse period, seconds.
    pub period: f64,
    /// Acquisition time, seconds.
    pub total_time: f64,
}

impl CoincidenceMeta {
    /// Expected uncorrelated pairs per period-wide delay slot, `N1 N2 theta T`.
    pub fn normalization(&self) -> f64 {
        self.n1 * self.n2 * self.period * self.total_time
    }
}

/// Pair counts binned by delay `b - a`.
///
/// Bin `k` (stored at index `k + half_bins`) is centred on `k * d`; a delay
/// exactly on a bin edge goes to the bin further from zero, so bin 0 is the
/// open interval `(-d/2, d/2)` and the histogram is mirror-symmetric under
/// swapping the two streams. `period_counts[n + n_max]` holds the exact
/// number of pairs whose delay lies within half a period of `n * period`
/// (ties on the boundary go to the period nearer zero).
#[derive(Debug, Clone, PartialEq)]
pub struct CoincidenceHistogram {
    pub bin_width: f64,
    pub bin_ticks: u64,
    pub period_ticks: u64,
    pub n_max: u32,
    pub half_bins: usize,
    pub counts: Vec<u64>,
    pub period_counts: Vec<u64>,
    pub meta: CoincidenceMeta,
    pub resolution_ps: u64,
}

impl CoincidenceHistogram {
    /// Delay at the centre of the bin stored at `index`, seconds.
    pub fn delay(&self, index: usize) -> f64 {
        (index as f64 - self.half_bins as f64) * self.bin_width
    }

    /// Delay range covered, `n_max * period + period / 2`, seconds.
    pub fn max_delay(&self) -> f64 {
        ticks_to_seconds(self.n_max as u64 * self.period_ticks, self.resolution_ps)
            + 0.5 * self.meta.period
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Coincidences integrated over pulse offset `n`.
    pub fn period_count(&self, n: i64) -> Option<u64> {
        let idx = n + self.n_max as i64;
        if idx < 0 {
            return None;
        }
        self.period_counts.get(idx as usize).copied()
    }
}

struct CorrelationGrid {
    bin: i64,
    period: i64,
    two_range: i64,
    half_bins: i64,
    n_max: i64,
}

impl CorrelationGrid {
    #[inline]
    fn bin_index(&self, delta: i64) -> usize {
        let mag = (2 * delta.abs() + self.bin) / (2 * self.bin);
        (self.half_bins + delta.signum() * mag) as usize
    }

    #[inline]
    fn period_index(&self, delta: i64) -> usize {
        let mag = (2 * delta.abs() + self.period - 1) / (2 * self.period);
        (self.n_max + delta.signum() * mag) as usize
    }
}

/// Histogram of delays `b - a` for all pairs with `|b - a| <= n_max * period
/// + period / 2`, using a two-pointer sweep over the sorted streams.
pub fn cross_correlate(
    a: &TagStream,
    b: &TagStream,
    period: f64,
    bin: f64,
    n_max: u32,
) -> Result<CoincidenceHistogram> {
    correlate_impl(a, b, period, bin, n_max, 1)
}

/// Same as [`cross_correlate`], splitting the start stream into contiguous
/// chunks processed on the rayon pool. The result is identical.
pub fn cross_correlate_par(
    a: &TagStream,
    b: &TagStream,
    period: f64,
    bin: f64,
    n_max: u32,
) -> Result<CoincidenceHistogram> {
    correlate_impl(a, b, period, bin, n_max, rayon::current_num_threads().max(1) * 4)
}

fn correlate_impl(
    a: &TagStream,
    b: &TagStream,
    period: f64,
    bin: f64,
    n_max: u32,
    chunks: usize,
) -> Result<CoincidenceHistogram> {
    if a.resolution_ps != b.resolution_ps {
        return Err(Error::invalid("streams have different resolutions"));
    }
    let period_ticks = a.ticks(period);
    let bin_ticks = a.ticks(bin);
    if period_ticks == 0 || bin_ticks == 0 {
        return Err(Error::invalid("period and bin width must be at least one tick"));
    }
    let two_range = (2 * n_max as i64 + 1) * period_ticks as i64;
    let half_bins = (two_range + bin_ticks as i64) / (2 * bin_ticks as i64);
    let grid = CorrelationGrid {
        bin: bin_ticks as i64,
        period: period_ticks as i64,
        two_range,
        half_bins,
        n_max: n_max as i64,
    };
    let at = a.times();
    let bt = b.times();
    let nbins = 2 * half_bins as usize + 1;
    let nper = 2 * n_max as usize + 1;

    let (counts, period_counts) = if chunks <= 1 || at.len() < 10_000 {
        correlate_chunk(&at, &bt, &grid, nbins, nper)
    } else {
        let size = at.len().div_ceil(chunks);
        at.par_chunks(size)
            .map(|chunk| correlate_chunk(chunk, &bt, &grid, nbins, nper))
            .reduce(
                || (vec![0; nbins], vec![0; nper]),
                |(mut c1, mut p1), (c2, p2)| {
                    c1.iter_mut().zip(c2).for_each(|(x, y)| *x += y);
                    p1.iter_mut().zip(p2).for_each(|(x, y)| *x += y);
                    (c1, p1)
                },
            )
    };

    let t = a.total_time();
    Ok(CoincidenceHistogram {
        bin_width: ticks_to_seconds(bin_ticks, a.resolution_ps),
        bin_ticks,
        period_ticks,
        n_max,
        half_bins: half_bins as usize,
        counts,
        period_counts,
        meta: CoincidenceMeta {
            n1: a.len() as f64 / t,
            n2: b.len() as f64 / t,
            period: ticks_to_seconds(period_ticks, a.resolution_ps),
            total_time: t,
        },
        resolution_ps: a.resolution_ps,
    })
}

fn correlate_chunk(
    a: &[u64],
    b: &[u64],
    grid: &CorrelationGrid,
    nbins: usize,
    nper: usize,
) -> (Vec<u64>, Vec<u64>) {
    let mut counts = vec![0u64; nbins];
    let mut period_counts = vec![0u64; nper];
    let mut lo = 0usize;
    for &ta in a {
        let ta = ta as i64;
        while lo < b.len() && 2 * (ta - b[lo] as i64) > grid.two_range {
            lo += 1;
        }
        for &tb in &b[lo..] {
            let delta = tb as i64 - ta;
            if 2 * delta > grid.two_range {
                break;
            }
            counts[grid.bin_index(delta)] += 1;
            period_counts[grid.period_index(delta)] += 1;
        }
    }
    (counts, period_counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeline::PulseSpec;

    fn stream(times: &[u64], channel: u8) -> TagStream {
        TagStream::new(
            1,
            2,
            1_000_000_000,
            times.iter().map(|&t| TagRecord::new(t, channel)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn record_layout() {
        let r = TagRecord {
            time: 1234,
            channel: 1,
            flags: 0,
        };
        let bytes = encode_record(&r);
        assert_eq!(bytes, [0xD2, 0x04, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn header_layout() {
        let s = stream(&[5], 0);
        let mut buf = Vec::new();
        write_tags(&s, &mut buf).unwrap();
        assert_eq!(buf.len(), TTG1_HEADER_LEN + TTG1_RECORD_LEN);
        assert_eq!(&buf[0..4], b"TTG1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[24..32].try_into().unwrap()), 1_000_000_000);
        assert_eq!(u64::from_le_bytes(buf[32..40].try_into().unwrap()), 1);
    }

    #[test]
    fn read_rejects_corruption() {
        let s = stream(&[5, 9, 100], 0);
        let mut buf = Vec::new();
        write_tags(&s, &mut buf).unwrap();
        assert_eq!(read_tags(&buf[..]).unwrap(), s);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tags(&bad[..]), Err(Error::Format(_))));

        let mut ver = buf.clone();
        ver[4] = 2;
        assert!(matches!(read_tags(&ver[..]), Err(Error::Format(_))));

        assert!(matches!(read_tags(&buf[..buf.len() - 3]), Err(Error::Format(_))));

        let mut unsorted = buf.clone();
        let off = TTG1_HEADER_LEN + TTG1_RECORD_LEN;
        unsorted[off..off + 8].copy_from_slice(&1u64.to_le_bytes());
        assert!(matches!(read_tags(&unsorted[..]), Err(Error::Format(_))));

        let mut zero_res = buf;
        zero_res[8..16].copy_from_slice(&0u64.to_le_bytes());
        assert!(matches!(read_tags(&zero_res[..]), Err(Error::Format(_))));
    }

    #[test]
    fn ticks_round_half_even() {
        assert_eq!(seconds_to_ticks(2.5e-12, 1), 2);
        assert_eq!(seconds_to_ticks(3.5e-12, 1), 4);
        assert_eq!(seconds_to_ticks(4e-6, 1), 4_000_000);
    }

    #[test]
    fn fold_wraps_period() {
        // t = theta + 5 ns with 10 ns bins lands in bin 0
        let s = TagStream::new(1000, 1, 10_000_000, vec![TagRecord::new(4005, 0)]).unwrap();
        let h = fold(&s, 4e-6, 10e-9, None).unwrap();
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts.len(), 400);
        assert!(fold(&s, 4e-6, 5e-6, None).is_err());
    }

    #[test]
    fn window_beyond_period_is_empty() {
        let tl = Timeline::new(1e-6, 1e-3, vec![PulseSpec::electrical(0.0, 100e-9)]).unwrap();
        let s = stream(&[50_000, 150_000, 950_000], 0);
        let w = window_select(&s, &tl, 0, 0.95e-6, 10e-9).unwrap();
        assert!(w.is_empty());
        assert!(window_select(&s, &tl, 0, 0.5e-6, 0.5e-6).is_err());
        let w = window_select(&s, &tl, 0, 0.0, 100e-9).unwrap();
        assert_eq!(w.times(), vec![150_000]);
    }

    #[test]
    fn same_time_lands_in_zero_bin() {
        let a = stream(&[100_000], 0);
        let b = stream(&[100_000], 1);
        let h = cross_correlate(&a, &b, 4_000.0e-12 * 1000.0, 40e-12 * 1000.0, 20).unwrap();
        assert_eq!(h.total(), 1);
        assert_eq!(h.counts[h.half_bins], 1);
        assert_eq!(h.period_count(0), Some(1));
    }

    #[test]
    fn bin_edges_are_symmetric() {
        // delays of exactly +-d/2 go to bins +-1
        let a = stream(&[1000], 0);
        let b = stream(&[980, 1020], 1);
        let h = cross_correlate(&a, &b, 1000e-12, 40e-12, 1).unwrap();
        assert_eq!(h.counts[h.half_bins], 0);
        assert_eq!(h.counts[h.half_bins - 1], 1);
        assert_eq!(h.counts[h.half_bins + 1], 1);
        // range edge: |delta| = 1.5 periods counted, beyond dropped
        let b = stream(&[1000 + 1500, 1000 + 1501], 1);
        let h = cross_correlate(&a, &b, 1000e-12, 40e-12, 1).unwrap();
        assert_eq!(h.total(), 1);
        assert_eq!(h.period_count(1), Some(1));
    }
}
