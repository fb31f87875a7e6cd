//! OFDM synthesis and the transmitter-side half of the offset calibration.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{FrameLayout, OfdmConfig, SourceId, SymbolGrid};

/// Unitary OFDM modem.
///
/// Synthesis uses the `e^{-j2πkn/N}` kernel and analysis the `e^{+j2πkn/N}`
/// kernel, both scaled by `1/√N`. With this pairing a signal that arrives `d`
/// samples late relative to the FFT window shows up as a phase ramp of
/// `+2πkd/N` on subcarrier `k`, and a multipath tap at delay `τ` contributes
/// `h·e^{+j2πkτ/N}` to the subcarrier gain.
#[derive(Clone)]
pub struct Modem {
    n: usize,
    scale: f64,
    synth: Arc<dyn Fft<f64>>,
    analyze: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Modem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Modem").field("n", &self.n).finish()
    }
}

impl Modem {
    pub fn new(n_subcarriers: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n: n_subcarriers,
            scale: 1.0 / (n_subcarriers as f64).sqrt(),
            synth: planner.plan_fft_forward(n_subcarriers),
            analyze: planner.plan_fft_inverse(n_subcarriers),
        }
    }

    pub fn n_subcarriers(&self) -> usize {
        self.n
    }

    /// Time-domain body (no CP) of one symbol row.
    pub fn synthesize(&self, row: &[Complex64]) -> Vec<Complex64> {
        let mut buf = row.to_vec();
        self.synth.process(&mut buf);
        buf.iter_mut().for_each(|x| *x *= self.scale);
        buf
    }

    /// Subcarrier values of an `N`-sample window.
    pub fn demodulate(&self, window: &[Complex64]) -> Vec<Complex64> {
        let mut buf = window.to_vec();
        self.analyze.process(&mut buf);
        buf.iter_mut().for_each(|x| *x *= self.scale);
        buf
    }

    /// Demodulate the window starting at `start`, which may be negative or run
    /// past the end of `samples`.
    pub fn demodulate_at(&self, samples: &[Complex64], start: i64) -> Result<Vec<Complex64>> {
        let end = start + self.n as i64;
        if start < 0 || end > samples.len() as i64 {
            return Err(Error::WindowOutOfRange {
                start,
                end,
                len: samples.len(),
            });
        }
        Ok(self.demodulate(&samples[start as usize..end as usize]))
    }
}

/// Short training waveform: the periodic STS body repeated to `len` samples.
pub fn sts_waveform(config: &OfdmConfig, modem: &Modem, len: usize) -> Vec<Complex64> {
    let body = modem.synthesize(&config.sts_freq());
    body.iter().cycle().take(len).copied().collect()
}

/// Long training waveform: `N/2` samples of guard followed by two bodies.
pub fn lts_waveform(config: &OfdmConfig, modem: &Modem) -> Vec<Complex64> {
    let body = modem.synthesize(&config.lts_freq());
    let n = body.len();
    let mut out = Vec::with_capacity(n / 2 + 2 * n);
    out.extend_from_slice(&body[n / 2..]);
    out.extend_from_slice(&body);
    out.extend_from_slice(&body);
    out
}

/// One source's waveform as handed to the radio.
#[derive(Debug, Clone, PartialEq)]
pub struct TxFrame {
    pub source_id: SourceId,
    pub samples: Vec<Complex64>,
    /// Integer transmit-time shift in samples; negative sends early.
    pub timing_offset: i64,
}

impl TxFrame {
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x.norm_sqr()).sum()
    }
}

fn write_symbol(out: &mut [Complex64], start: usize, body: &[Complex64], cp_len: usize) {
    let n = body.len();
    out[start..start + cp_len].copy_from_slice(&body[n - cp_len..]);
    out[start + cp_len..start + cp_len + n].copy_from_slice(body);
}

/// Build the time-domain frame for one source: shared STS, this source's LTS
/// slot, any re-estimation training symbols it owns, and the data symbols.
pub fn ofdm_modulate(
    grid: &SymbolGrid,
    config: &OfdmConfig,
    layout: &FrameLayout,
    modem: &Modem,
) -> Result<TxFrame> {
    if grid.symbols.len() != layout.n_data_symbols {
        return Err(Error::config(
            "grid",
            format!(
                "{} symbols but the layout has {}",
                grid.symbols.len(),
                layout.n_data_symbols
            ),
        ));
    }
    if grid.source_id >= layout.n_sources() {
        return Err(Error::config("grid.source_id", "not part of this layout"));
    }
    let mut out = vec![Complex64::new(0.0, 0.0); layout.total_len()];
    let sts = sts_waveform(config, modem, layout.sts_len());
    out[..sts.len()].copy_from_slice(&sts);

    let slot = layout.lts_slots[grid.source_id];
    let lts = lts_waveform(config, modem);
    out[slot.start..slot.start + lts.len()].copy_from_slice(&lts);

    let lts_body = modem.synthesize(&config.lts_freq());
    for (s, row) in grid.symbols.iter().enumerate() {
        if layout.reestimation_before(s) {
            let start = layout.training_symbol_start(s, grid.source_id);
            write_symbol(&mut out, start, &lts_body, config.cp_len);
        }
        let body = modem.synthesize(row);
        write_symbol(&mut out, layout.data_symbol_start(s), &body, config.cp_len);
    }
    Ok(TxFrame {
        source_id: grid.source_id,
        samples: out,
        timing_offset: 0,
    })
}

pub type DeviceId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationEntry {
    /// Coarse CFO measured ahead of time, Hz.
    pub coarse_cfo_hz: f64,
    /// Coarse timing offset, whole samples. Positive values send early.
    pub sto_samples: i64,
}

/// Coarse per-link offsets measured ahead of time, keyed by `(tx, rx)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationTable {
    entries: BTreeMap<(DeviceId, DeviceId), CalibrationEntry>,
}

impl CalibrationTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tx: DeviceId, rx: DeviceId, entry: CalibrationEntry) -> Result<()> {
        if !entry.coarse_cfo_hz.is_finite() {
            return Err(Error::config("calibration.coarse_cfo_hz", "must be finite"));
        }
        self.entries.insert((tx, rx), entry);
        Ok(())
    }

    pub fn get(&self, tx: DeviceId, rx: DeviceId) -> Result<CalibrationEntry> {
        self.entries
            .get(&(tx, rx))
            .copied()
            .ok_or(Error::UncalibratedDevice { tx, rx })
    }
}

/// Remove the calibrated coarse CFO and timing offset before transmission.
pub fn precompensate(
    frame: &TxFrame,
    table: &CalibrationTable,
    rx_device: DeviceId,
    sample_period: f64,
) -> Result<TxFrame> {
    let entry = table.get(frame.source_id as DeviceId, rx_device)?;
    Ok(shift_frame(
        frame,
        -entry.coarse_cfo_hz,
        -entry.sto_samples,
        sample_period,
    ))
}

/// Rotate by `cfo_hz` and move the transmit time by `delay` samples.
pub fn shift_frame(frame: &TxFrame, cfo_hz: f64, delay: i64, sample_period: f64) -> TxFrame {
    let samples = if cfo_hz == 0.0 {
        frame.samples.clone()
    } else {
        let w = 2.0 * PI * cfo_hz * sample_period;
        frame
            .samples
            .iter()
            .enumerate()
            .map(|(n, &x)| x * Complex64::from_polar(1.0, w * n as f64))
            .collect()
    };
    TxFrame {
        source_id: frame.source_id,
        samples,
        timing_offset: frame.timing_offset + delay,
    }
}

/// Coarse CFO calibration: the mean of a series of measurements.
pub fn calibrate(measured_cfo_hz: &[f64]) -> Result<CalibrationEntry> {
    if measured_cfo_hz.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mean = measured_cfo_hz.iter().sum::<f64>() / measured_cfo_hz.len() as f64;
    Ok(CalibrationEntry {
        coarse_cfo_hz: mean,
        sto_samples: 0,
    })
}

/// What remains for the receiver to track after calibration.
pub fn calibration_residuals(measured_cfo_hz: &[f64], entry: &CalibrationEntry) -> Vec<f64> {
    measured_cfo_hz
        .iter()
        .map(|f| f - entry.coarse_cfo_hz)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{build_layout, map_bits, Constellation, Modulation};

    fn setup(bits: usize) -> (OfdmConfig, FrameLayout, Constellation, Modem) {
        let c = OfdmConfig::default();
        let k = Constellation::new(Modulation::Qpsk);
        let l = build_layout(&c, 2, bits, &k).unwrap();
        let m = Modem::new(c.n_subcarriers);
        (c, l, k, m)
    }

    fn random_bits(n: usize, seed: u64) -> Vec<u8> {
        let mut x = seed;
        (0..n)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                (x & 1) as u8
            })
            .collect()
    }

    #[test]
    fn zero_grid_gives_silent_data_section() {
        let (c, l, _, m) = setup(500);
        let grid = SymbolGrid {
            source_id: 0,
            symbols: vec![vec![Complex64::new(0.0, 0.0); 64]; l.n_data_symbols],
        };
        let f = ofdm_modulate(&grid, &c, &l, &m).unwrap();
        assert!(f.samples[l.data_start()..].iter().all(|x| x.norm() == 0.0));
        assert!(f.samples[..l.sts_len()].iter().all(|x| x.norm() > 0.0));
    }

    #[test]
    fn unit_tone_traces_one_period() {
        let m = Modem::new(64);
        let mut row = vec![Complex64::new(0.0, 0.0); 64];
        row[1] = Complex64::new(1.0, 0.0);
        let body = m.synthesize(&row);
        for (n, x) in body.iter().enumerate() {
            let expect = Complex64::from_polar(1.0 / 8.0, -2.0 * PI * n as f64 / 64.0);
            assert!((x - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn modulate_then_demodulate_recovers_grid() {
        let (c, l, k, m) = setup(1200);
        let grid = map_bits(&random_bits(1200, 7), &k, &c, &l, 1).unwrap();
        let f = ofdm_modulate(&grid, &c, &l, &m).unwrap();
        for (s, row) in grid.symbols.iter().enumerate() {
            let start = (l.data_symbol_start(s) + c.cp_len) as i64;
            let back = m.demodulate_at(&f.samples, start).unwrap();
            for (a, b) in row.iter().zip(&back) {
                assert!((a - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn parseval_and_cyclic_prefix() {
        let (c, l, k, m) = setup(800);
        let grid = map_bits(&random_bits(800, 3), &k, &c, &l, 0).unwrap();
        let f = ofdm_modulate(&grid, &c, &l, &m).unwrap();
        let mut body_energy = 0.0;
        for s in 0..l.n_data_symbols {
            let start = l.data_symbol_start(s);
            let sym = &f.samples[start..start + c.symbol_len()];
            assert_eq!(&sym[..c.cp_len], &sym[c.n_subcarriers..]);
            body_energy += sym[c.cp_len..].iter().map(|x| x.norm_sqr()).sum::<f64>();
        }
        let grid_energy = grid.energy();
        assert!(((body_energy - grid_energy) / grid_energy).abs() < 1e-6);
    }

    #[test]
    fn foreign_lts_slot_is_silent() {
        let (c, l, k, m) = setup(100);
        let grid = map_bits(&random_bits(100, 1), &k, &c, &l, 0).unwrap();
        let f = ofdm_modulate(&grid, &c, &l, &m).unwrap();
        let other = l.lts_slots[1];
        assert!(f.samples[other.start..other.start + other.len]
            .iter()
            .all(|x| x.norm() == 0.0));
        assert_eq!(f.samples.len(), l.total_len());
    }

    #[test]
    fn sts_repeats_with_quarter_symbol_period() {
        let c = OfdmConfig::default();
        let m = Modem::new(64);
        let sts = sts_waveform(&c, &m, 160);
        for n in 0..144 {
            assert!((sts[n] - sts[n + 16]).norm() < 1e-12);
        }
    }

    #[test]
    fn identity_precompensation_is_exact() {
        let (c, l, k, m) = setup(300);
        let grid = map_bits(&random_bits(300, 9), &k, &c, &l, 0).unwrap();
        let f = ofdm_modulate(&grid, &c, &l, &m).unwrap();
        let mut t = CalibrationTable::new();
        t.insert(0, 9, CalibrationEntry::default()).unwrap();
        assert_eq!(precompensate(&f, &t, 9, 1e-7).unwrap(), f);
    }

    #[test]
    fn precompensation_is_invertible() {
        let (c, l, k, m) = setup(300);
        let grid = map_bits(&random_bits(300, 11), &k, &c, &l, 0).unwrap();
        let f = ofdm_modulate(&grid, &c, &l, &m).unwrap();
        let mut t = CalibrationTable::new();
        t.insert(
            0,
            1,
            CalibrationEntry {
                coarse_cfo_hz: 12_345.0,
                sto_samples: 3,
            },
        )
        .unwrap();
        let pre = precompensate(&f, &t, 1, c.sample_period()).unwrap();
        assert_eq!(pre.timing_offset, -3);
        let back = shift_frame(&pre, 12_345.0, 3, c.sample_period());
        assert_eq!(back.timing_offset, 0);
        for (a, b) in back.samples.iter().zip(&f.samples) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn missing_entry_is_an_uncalibrated_device() {
        let (c, l, k, m) = setup(100);
        let grid = map_bits(&random_bits(100, 2), &k, &c, &l, 1).unwrap();
        let f = ofdm_modulate(&grid, &c, &l, &m).unwrap();
        let t = CalibrationTable::new();
        assert!(matches!(
            precompensate(&f, &t, 0, 1e-7),
            Err(Error::UncalibratedDevice { tx: 1, rx: 0 })
        ));
    }

    #[test]
    fn calibrate_takes_the_mean() {
        assert_eq!(
            calibrate(&[500.0, 500.0, 500.0]).unwrap().coarse_cfo_hz,
            500.0
        );
        assert_eq!(calibrate(&[-42.5]).unwrap().coarse_cfo_hz, -42.5);
        assert!(matches!(calibrate(&[]), Err(Error::EmptySeries)));
        let series: Vec<f64> = (0..200)
            .map(|i| 1000.0 + 20.0 * ((i as f64) * 0.731).sin())
            .collect();
        let e = calibrate(&series).unwrap();
        assert!((e.coarse_cfo_hz - 1000.0).abs() <= 20.0);
        let r = calibration_residuals(&series, &e);
        assert!(r.iter().sum::<f64>().abs() < 1e-9);
    }
}
