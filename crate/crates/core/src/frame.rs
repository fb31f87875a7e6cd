//! OFDM numerology, constellations and the superimposed frame layout.
//!
//! A frame from `n` sources looks like this on air:
//!
//! ```text
//! | STS (shared) | LTS src0 | NULL NULL | LTS src1 | NULL NULL | ... | data symbols ... |
//! ```
//!
//! Every source sends the same short training sequence at the same time. Each
//! source then owns one long-training slot, followed by silent guard symbols,
//! so that channel estimation for one source never sees energy from another.
//! Data symbols are sent by all sources at once.
//!
//! Subcarriers are addressed by signed index `k` in `[-N/2, N/2)`. Storage in
//! a symbol row uses the FFT bin `k mod N`.

use std::collections::BTreeSet;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SourceId = usize;

/// 802.11a long training sequence on subcarriers -26..=26.
const LTS_802_11A: [i8; 53] = [
    1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 0, 1, -1,
    -1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, -1, 1, 1, -1, -1, 1, -1, 1, -1, 1, 1, 1, 1,
];

/// 802.11a short training sequence, subcarriers -24..=24 in steps of 4, in
/// units of (1 + j).
const STS_802_11A: [(i32, i8); 12] = [
    (-24, 1),
    (-20, -1),
    (-16, 1),
    (-12, -1),
    (-8, -1),
    (-4, 1),
    (4, -1),
    (8, -1),
    (12, 1),
    (16, 1),
    (20, 1),
    (24, 1),
];

/// Pilot pairs `{-k, +k}` handed out to sources in order. The first two are
/// the 802.11a pilot positions; later ones are carved out of the data set.
const PILOT_PAIRS: [i32; 6] = [21, 7, 14, 25, 3, 11];

/// Highest occupied subcarrier magnitude (802.11a: 52 used carriers).
const EDGE_SUBCARRIER: i32 = 26;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OfdmConfig {
    pub n_subcarriers: usize,
    pub cp_len: usize,
    /// Hz.
    pub sample_rate: f64,
    /// Hz. Only used to turn a CFO into a clock-error ratio.
    pub carrier_freq: f64,
    pub data_subcarriers: Vec<i32>,
    /// One pilot set per source, indexed by source id.
    pub pilot_map: Vec<Vec<i32>>,
    /// Samples into the cyclic prefix where the FFT window starts.
    pub fft_window_offset: usize,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        Self::with_sources(2)
    }
}

impl OfdmConfig {
    /// 802.11p-style numerology (64 carriers, 16-sample CP, 10 MHz at 5.8 GHz)
    /// with pilot pairs for `n_sources` sources.
    ///
    /// Up to two sources the data set is the 48 standard 802.11a data carriers.
    /// Each additional source takes one more symmetric pair out of the data set.
    pub fn with_sources(n_sources: usize) -> Self {
        let n_pairs = n_sources.clamp(2, PILOT_PAIRS.len());
        let pilot_map: Vec<Vec<i32>> = PILOT_PAIRS[..n_pairs]
            .iter()
            .map(|&k| vec![-k, k])
            .collect();
        let taken: BTreeSet<i32> = pilot_map.iter().flatten().copied().collect();
        let data_subcarriers = (-EDGE_SUBCARRIER..=EDGE_SUBCARRIER)
            .filter(|&k| k != 0 && !taken.contains(&k))
            .collect();
        Self {
            n_subcarriers: 64,
            cp_len: 16,
            sample_rate: 1.0e7,
            carrier_freq: 5.8e9,
            data_subcarriers,
            pilot_map,
            fft_window_offset: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_subcarriers;
        if n < 64 || !n.is_multiple_of(4) {
            return Err(Error::config(
                "n_subcarriers",
                "must be a multiple of 4 and at least 64",
            ));
        }
        if self.cp_len >= n {
            return Err(Error::config(
                "cp_len",
                "must be shorter than n_subcarriers",
            ));
        }
        if self.fft_window_offset < 2 || self.fft_window_offset >= self.cp_len {
            return Err(Error::config(
                "fft_window_offset",
                format!("must lie in [2, cp_len) = [2, {})", self.cp_len),
            ));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(Error::config("sample_rate", "must be positive"));
        }
        if !(self.carrier_freq.is_finite() && self.carrier_freq > 0.0) {
            return Err(Error::config("carrier_freq", "must be positive"));
        }
        if self.data_subcarriers.is_empty() {
            return Err(Error::config("data_subcarriers", "must not be empty"));
        }
        let mut seen = BTreeSet::new();
        for &k in &self.data_subcarriers {
            self.check_index("data_subcarriers", k)?;
            if !seen.insert(k) {
                return Err(Error::config(
                    "data_subcarriers",
                    format!("subcarrier {k} listed twice"),
                ));
            }
        }
        for (src, set) in self.pilot_map.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::config(
                    "pilot_map",
                    format!("source {src} has no pilots"),
                ));
            }
            for &k in set {
                self.check_index("pilot_map", k)?;
                if !seen.insert(k) {
                    return Err(Error::config(
                        "pilot_map",
                        format!(
                            "pilot {k} of source {src} collides with another pilot or data carrier"
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    fn check_index(&self, field: &str, k: i32) -> Result<()> {
        if k == 0 || k.abs() > EDGE_SUBCARRIER {
            return Err(Error::config(
                field,
                format!("subcarrier {k} is outside the trained band 1..={EDGE_SUBCARRIER}"),
            ));
        }
        Ok(())
    }

    /// Samples per OFDM symbol including the cyclic prefix.
    pub fn symbol_len(&self) -> usize {
        self.n_subcarriers + self.cp_len
    }

    /// Seconds per sample.
    pub fn sample_period(&self) -> f64 {
        1.0 / self.sample_rate
    }

    /// FFT bin that stores subcarrier `k`.
    pub fn bin(&self, k: i32) -> usize {
        k.rem_euclid(self.n_subcarriers as i32) as usize
    }

    /// Signed subcarrier index of FFT bin `b`.
    pub fn subcarrier(&self, b: usize) -> i32 {
        let n = self.n_subcarriers as i32;
        let b = b as i32;
        if b >= n / 2 {
            b - n
        } else {
            b
        }
    }

    pub fn pilots(&self, source: SourceId) -> &[i32] {
        &self.pilot_map[source]
    }

    /// Subcarriers with a nonzero long-training value.
    pub fn trained_subcarriers(&self) -> impl Iterator<Item = i32> {
        (-EDGE_SUBCARRIER..=EDGE_SUBCARRIER).filter(|&k| k != 0)
    }

    /// Known pilot value of subcarrier `k` in data symbol `s`.
    pub fn pilot_value(&self, k: i32, s: usize) -> Complex64 {
        let base = if k == 21 { -1.0 } else { 1.0 };
        Complex64::new(base * pilot_polarity(s), 0.0)
    }

    /// Long training sequence, one entry per FFT bin.
    pub fn lts_freq(&self) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.n_subcarriers];
        for (i, &v) in LTS_802_11A.iter().enumerate() {
            let k = i as i32 - EDGE_SUBCARRIER;
            out[self.bin(k)] = Complex64::new(f64::from(v), 0.0);
        }
        out
    }

    /// Short training sequence, one entry per FFT bin. Only every fourth
    /// carrier is used, so the time waveform repeats every `N/4` samples.
    pub fn sts_freq(&self) -> Vec<Complex64> {
        let scale = (13.0f64 / 6.0).sqrt();
        let mut out = vec![Complex64::new(0.0, 0.0); self.n_subcarriers];
        for &(k, sign) in &STS_802_11A {
            let v = f64::from(sign) * scale;
            out[self.bin(k)] = Complex64::new(v, v);
        }
        out
    }
}

/// 802.11a pilot polarity: output of the x^7 + x^4 + 1 scrambler seeded with
/// all ones, mapped 0 -> +1, 1 -> -1. Period 127.
pub fn pilot_polarity(s: usize) -> f64 {
    let mut state: u8 = 0x7f;
    let mut bit = 0;
    for _ in 0..=(s % 127) {
        bit = ((state >> 6) ^ (state >> 3)) & 1;
        state = ((state << 1) | bit) & 0x7f;
    }
    if bit == 0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Bpsk,
    Qpsk,
    #[serde(rename = "16qam")]
    Qam16,
}

impl Modulation {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Bpsk => 1,
            Modulation::Qpsk => 2,
            Modulation::Qam16 => 4,
        }
    }
}

/// Unit-average-power constellation with a Gray bit labelling.
///
/// `points` is in geometric order; `gray_map[label]` is the index of the point
/// carrying bit pattern `label` (MSB first).
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    pub order: usize,
    pub points: Vec<Complex64>,
    pub gray_map: Vec<usize>,
    label_of: Vec<usize>,
}

impl Constellation {
    pub fn new(modulation: Modulation) -> Self {
        // per-axis Gray levels for two bits: 00 -> -3, 01 -> -1, 11 -> +1, 10 -> +3
        const LEVEL_OF_GRAY2: [usize; 4] = [0, 1, 3, 2];
        let (points, gray_map) = match modulation {
            Modulation::Bpsk => (
                vec![Complex64::new(-1.0, 0.0), Complex64::new(1.0, 0.0)],
                vec![0, 1],
            ),
            Modulation::Qpsk => {
                let a = std::f64::consts::FRAC_1_SQRT_2;
                let points = [(-a, -a), (-a, a), (a, -a), (a, a)]
                    .iter()
                    .map(|&(re, im)| Complex64::new(re, im))
                    .collect();
                // label b0 b1: b0 picks I, b1 picks Q
                (points, vec![0, 1, 2, 3])
            }
            Modulation::Qam16 => {
                let scale = 1.0 / 10f64.sqrt();
                let levels = [-3.0, -1.0, 1.0, 3.0];
                let mut points = Vec::with_capacity(16);
                for &i in &levels {
                    for &q in &levels {
                        points.push(Complex64::new(i * scale, q * scale));
                    }
                }
                let gray_map = (0..16)
                    .map(|label| 4 * LEVEL_OF_GRAY2[label >> 2] + LEVEL_OF_GRAY2[label & 3])
                    .collect();
                (points, gray_map)
            }
        };
        let mut label_of = vec![0; gray_map.len()];
        for (label, &idx) in gray_map.iter().enumerate() {
            label_of[idx] = label;
        }
        Self {
            order: modulation.bits_per_symbol(),
            points,
            gray_map,
            label_of,
        }
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Point index carrying the given bits (MSB first).
    pub fn index_of_bits(&self, bits: &[u8]) -> usize {
        let label = bits
            .iter()
            .fold(0usize, |acc, &b| (acc << 1) | usize::from(b & 1));
        self.gray_map[label]
    }

    /// Bits carried by point `idx`, MSB first.
    pub fn bits_of_index(&self, idx: usize) -> impl Iterator<Item = u8> + '_ {
        let label = self.label_of[idx];
        (0..self.order).rev().map(move |i| ((label >> i) & 1) as u8)
    }

    /// Index of the point nearest to `x`.
    pub fn nearest(&self, x: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (x - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LtsSlot {
    pub source_id: SourceId,
    /// First sample of the slot (start of the double-length guard interval).
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLayout {
    pub sts_repeats: usize,
    pub sts_period: usize,
    pub lts_slots: Vec<LtsSlot>,
    pub null_guard_symbols: usize,
    pub n_data_symbols: usize,
    /// Bits of zero padding appended to each source's payload.
    pub padding_bits: usize,
    pub payload_bits: usize,
    /// Insert a round of per-source training symbols after every this many
    /// data symbols. `None` disables re-estimation.
    pub reestimation_interval: Option<usize>,
    pub symbol_len: usize,
    pub cp_len: usize,
    pub n_subcarriers: usize,
}

impl FrameLayout {
    pub fn n_sources(&self) -> usize {
        self.lts_slots.len()
    }

    pub fn sts_len(&self) -> usize {
        self.sts_repeats * self.sts_period
    }

    pub fn lts_guard_len(&self) -> usize {
        self.n_subcarriers / 2
    }

    pub fn data_start(&self) -> usize {
        self.lts_slots
            .last()
            .map(|s| s.start + s.len + self.null_guard_symbols * self.symbol_len)
            .unwrap_or(self.sts_len())
    }

    /// Start (including the guard interval) of the two long training bodies
    /// of a slot: `slot.start + N/2` and `slot.start + N/2 + N`.
    pub fn lts_bodies(&self, source: SourceId) -> [usize; 2] {
        let first = self.lts_slots[source].start + self.lts_guard_len();
        [first, first + self.n_subcarriers]
    }

    fn blocks_before(&self, s: usize) -> usize {
        match self.reestimation_interval {
            Some(r) if r > 0 => s / r,
            _ => 0,
        }
    }

    pub fn n_reestimation_blocks(&self) -> usize {
        if self.n_data_symbols == 0 {
            0
        } else {
            self.blocks_before(self.n_data_symbols - 1)
        }
    }

    /// True when a re-estimation block sits immediately before data symbol `s`.
    pub fn reestimation_before(&self, s: usize) -> bool {
        s > 0 && s < self.n_data_symbols && self.blocks_before(s) != self.blocks_before(s - 1)
    }

    /// First sample (start of CP) of data symbol `s`.
    pub fn data_symbol_start(&self, s: usize) -> usize {
        self.data_start()
            + s * self.symbol_len
            + self.blocks_before(s) * self.n_sources() * self.symbol_len
    }

    /// First sample (start of CP) of `source`'s training symbol in the
    /// re-estimation block that precedes data symbol `s`.
    pub fn training_symbol_start(&self, s: usize, source: SourceId) -> usize {
        self.data_symbol_start(s) - (self.n_sources() - source) * self.symbol_len
    }

    pub fn total_len(&self) -> usize {
        self.data_start()
            + self.n_data_symbols * self.symbol_len
            + self.n_reestimation_blocks() * self.n_sources() * self.symbol_len
    }

    /// Enable periodic re-estimation symbols every `interval` data symbols.
    pub fn with_reestimation(mut self, interval: Option<usize>) -> Self {
        self.reestimation_interval = interval.filter(|&r| r > 0);
        self
    }
}

pub const DEFAULT_NULL_GUARD_SYMBOLS: usize = 2;
pub const DEFAULT_STS_REPEATS: usize = 10;

/// Lay out a frame carrying `payload_bits` per source.
pub fn build_layout(
    config: &OfdmConfig,
    n_sources: usize,
    payload_bits: usize,
    constellation: &Constellation,
) -> Result<FrameLayout> {
    config.validate()?;
    if payload_bits == 0 {
        return Err(Error::EmptyPayload);
    }
    if n_sources == 0 {
        return Err(Error::config("n_sources", "need at least one source"));
    }
    if n_sources > config.pilot_map.len() {
        return Err(Error::TooManySources {
            requested: n_sources,
            available: config.pilot_map.len(),
        });
    }
    let n = config.n_subcarriers;
    let sym = config.symbol_len();
    let per_symbol = constellation.bits_per_symbol() * config.data_subcarriers.len();
    let n_data_symbols = payload_bits.div_ceil(per_symbol);
    let sts_period = n / 4;
    let sts_len = DEFAULT_STS_REPEATS * sts_period;
    let lts_len = n / 2 + 2 * n;
    let stride = lts_len + DEFAULT_NULL_GUARD_SYMBOLS * sym;
    let lts_slots = (0..n_sources)
        .map(|source_id| LtsSlot {
            source_id,
            start: sts_len + source_id * stride,
            len: lts_len,
        })
        .collect();
    Ok(FrameLayout {
        sts_repeats: DEFAULT_STS_REPEATS,
        sts_period,
        lts_slots,
        null_guard_symbols: DEFAULT_NULL_GUARD_SYMBOLS,
        n_data_symbols,
        padding_bits: n_data_symbols * per_symbol - payload_bits,
        payload_bits,
        reestimation_interval: None,
        symbol_len: sym,
        cp_len: config.cp_len,
        n_subcarriers: n,
    })
}

/// Frequency-domain data grid of one source: `symbols[s][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolGrid {
    pub source_id: SourceId,
    pub symbols: Vec<Vec<Complex64>>,
}

impl SymbolGrid {
    pub fn energy(&self) -> f64 {
        self.symbols.iter().flatten().map(|x| x.norm_sqr()).sum()
    }
}

/// Map a source's payload onto its data grid. Short payloads are zero padded
/// to fill the last symbol.
pub fn map_bits(
    bits: &[u8],
    constellation: &Constellation,
    config: &OfdmConfig,
    layout: &FrameLayout,
    source_id: SourceId,
) -> Result<SymbolGrid> {
    let k_bits = constellation.bits_per_symbol();
    let capacity = layout.n_data_symbols * config.data_subcarriers.len() * k_bits;
    if bits.len() > capacity {
        return Err(Error::BitOverflow {
            bits: bits.len(),
            capacity,
        });
    }
    if source_id >= layout.n_sources() {
        return Err(Error::config(
            "source_id",
            format!("source {source_id} is not part of this layout"),
        ));
    }
    let zero = Complex64::new(0.0, 0.0);
    let mut padded = bits.to_vec();
    padded.resize(capacity, 0);
    let mut chunks = padded.chunks(k_bits);
    let symbols = (0..layout.n_data_symbols)
        .map(|s| {
            let mut row = vec![zero; config.n_subcarriers];
            for &k in &config.data_subcarriers {
                let chunk = chunks.next().expect("capacity covers every data cell");
                row[config.bin(k)] = constellation.points[constellation.index_of_bits(chunk)];
            }
            for &k in config.pilots(source_id) {
                row[config.bin(k)] = config.pilot_value(k, s);
            }
            row
        })
        .collect();
    Ok(SymbolGrid { source_id, symbols })
}

/// Hard-decision inverse of [`map_bits`]: nearest point on every data cell,
/// truncated to `n_bits`.
pub fn demap_grid(
    grid: &SymbolGrid,
    constellation: &Constellation,
    config: &OfdmConfig,
    n_bits: usize,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(n_bits);
    for row in &grid.symbols {
        for &k in &config.data_subcarriers {
            let idx = constellation.nearest(row[config.bin(k)]);
            out.extend(constellation.bits_of_index(idx));
        }
    }
    out.truncate(n_bits);
    out
}
