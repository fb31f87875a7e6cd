//! Per-source channel estimation and offset tracking.
//!
//! Every source owns a time slot for its long training sequence, so its
//! channel, carrier offset and frame origin can be measured without
//! interference. Data symbols are then demodulated with one FFT window shared
//! by all sources; the phase each source picks up relative to its own
//! estimate is modelled as
//!
//! `θ(k, s) = 2πk·n_ε/N + 2πk·γ̂·Δn/N + 2π·Δf·T·Δn`
//!
//! where `Δn` is the number of samples elapsed since the channel snapshot.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::detector::DetectionResult;
use crate::error::{Error, Result};
use crate::frame::{FrameLayout, OfdmConfig, SourceId};
use crate::transmitter::Modem;

/// Reference values below this magnitude are treated as empty subcarriers.
const REFERENCE_FLOOR: f64 = 1e-9;

/// Smallest usable gap between the FFT window and the start of the CP.
const MIN_WINDOW_MARGIN: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingConfig {
    /// Exponential smoothing factor of the residual-CFO tracker.
    pub alpha: f64,
    /// Mean normalized pilot magnitude below which a symbol is not trusted.
    pub pilot_floor: f64,
    /// Per-source SFO ratio to use instead of the `γ ≈ ε` inference.
    pub sfo_override: Option<Vec<f64>>,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            pilot_floor: 0.25,
            sfo_override: None,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("tracking.alpha", "must lie in (0, 1]"));
        }
        if !(self.pilot_floor >= 0.0 && self.pilot_floor < 1.0) {
            return Err(Error::config("tracking.pilot_floor", "must lie in [0, 1)"));
        }
        if let Some(v) = &self.sfo_override {
            if v.iter().any(|g| !g.is_finite()) {
                return Err(Error::config("tracking.sfo_override", "must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstimate {
    pub source_id: SourceId,
    /// Gain per FFT bin; zero on bins the reference does not cover.
    pub h: Vec<Complex64>,
    pub trained: Vec<bool>,
    /// Data symbol index the estimate is valid from.
    pub snapshot_symbol: usize,
}

/// `h[k]` = mean over the received repetitions of `RX[k] / REF[k]`.
pub fn estimate_channel(
    rx_lts_symbols: &[Vec<Complex64>],
    reference: &[Complex64],
    source_id: SourceId,
    snapshot_symbol: usize,
) -> Result<ChannelEstimate> {
    if rx_lts_symbols.is_empty() || rx_lts_symbols.iter().any(|y| y.len() != reference.len()) {
        return Err(Error::EstimationFailure(source_id));
    }
    let reps = rx_lts_symbols.len() as f64;
    let mut h = vec![Complex64::new(0.0, 0.0); reference.len()];
    let mut trained = vec![false; reference.len()];
    for (b, r) in reference.iter().enumerate() {
        if r.norm() < REFERENCE_FLOOR {
            continue;
        }
        let sum: Complex64 = rx_lts_symbols.iter().map(|y| y[b] / r).sum();
        h[b] = sum / reps;
        trained[b] = true;
    }
    if !trained.iter().any(|&t| t) || h.iter().any(|x| !x.is_finite()) {
        return Err(Error::EstimationFailure(source_id));
    }
    Ok(ChannelEstimate {
        source_id,
        h,
        trained,
        snapshot_symbol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetState {
    /// Tracked residual CFO, Hz.
    pub residual_cfo: f64,
    /// CFO removed at the transmitter from the calibration table, Hz.
    pub coarse_cfo: f64,
    /// `ε = (coarse + residual) / f_c`.
    pub cfo_ratio: f64,
    /// `γ̂`, equal to `ε` unless overridden.
    pub sfo_ratio_est: f64,
    pub sfo_override: Option<f64>,
    /// Integer timing offset between the shared window and this source's
    /// own window, samples.
    pub sto: i64,
    /// Fractional part left over by the slope fit, samples.
    pub sto_residual: f64,
    /// Samples between the channel snapshot and the window of data symbol
    /// `snapshot_symbol`.
    pub origin_samples: f64,
    pub snapshot_symbol: usize,
    /// Set when the last tracking step was skipped.
    pub low_confidence: bool,
}

impl OffsetState {
    pub fn new(
        coarse_cfo: f64,
        residual_cfo: f64,
        carrier_freq: f64,
        sfo_override: Option<f64>,
    ) -> Self {
        let mut s = Self {
            residual_cfo,
            coarse_cfo,
            cfo_ratio: 0.0,
            sfo_ratio_est: 0.0,
            sfo_override,
            sto: 0,
            sto_residual: 0.0,
            origin_samples: 0.0,
            snapshot_symbol: 0,
            low_confidence: false,
        };
        s.refresh(carrier_freq);
        s
    }

    fn refresh(&mut self, carrier_freq: f64) {
        self.cfo_ratio = (self.coarse_cfo + self.residual_cfo) / carrier_freq;
        self.sfo_ratio_est = self.sfo_override.unwrap_or(self.cfo_ratio);
    }

    /// Samples elapsed between the channel snapshot and data symbol `s`,
    /// assuming no training symbols in between.
    pub fn elapsed_samples(&self, s: usize, symbol_len: usize) -> f64 {
        self.origin_samples + (s as f64 - self.snapshot_symbol as f64) * symbol_len as f64
    }
}

/// Phase rotation of subcarrier `k` in data symbol `s` relative to the
/// channel snapshot.
pub fn phase_correction(k: i32, s: usize, state: &OffsetState, config: &OfdmConfig) -> f64 {
    let n = config.n_subcarriers as f64;
    let dn = state.elapsed_samples(s, config.symbol_len());
    let k = f64::from(k);
    2.0 * PI * k * state.sto as f64 / n
        + 2.0 * PI * k * state.sfo_ratio_est * dn / n
        + 2.0 * PI * state.residual_cfo * config.sample_period() * dn
}

fn wrap(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Split the phases of two pilots at `-k0` and `+k0` into the part common to
/// both and the slope per subcarrier. Returns `(common, slope)`.
pub fn split_pilot_phases(minus: Complex64, plus: Complex64, k0: i32) -> (f64, f64) {
    let k0 = f64::from(k0);
    let slope = (plus * minus.conj()).arg() / (2.0 * k0);
    let common = (minus * Complex64::from_polar(1.0, k0 * slope)
        + plus * Complex64::from_polar(1.0, -k0 * slope))
    .arg();
    (common, slope)
}

/// Common pilot phase of one symbol after removing the subcarrier-linear
/// part predicted by `state`, and the mean normalized pilot magnitude.
pub fn pilot_phase(
    symbol: &[Complex64],
    estimate: &ChannelEstimate,
    s: usize,
    state: &OffsetState,
    config: &OfdmConfig,
) -> Option<(f64, f64)> {
    let n = config.n_subcarriers as f64;
    let dn = state.elapsed_samples(s, config.symbol_len());
    let mut acc = Complex64::new(0.0, 0.0);
    let mut count = 0usize;
    for &k in config.pilots(estimate.source_id) {
        let b = config.bin(k);
        let h = estimate.h[b];
        if !estimate.trained[b] || h.norm() < REFERENCE_FLOOR {
            continue;
        }
        let z = symbol[b] / (h * config.pilot_value(k, s));
        let linear = 2.0 * PI * f64::from(k) * (state.sto as f64 + state.sfo_ratio_est * dn) / n;
        acc += z * Complex64::from_polar(1.0, -linear);
        count += 1;
    }
    if count == 0 {
        return None;
    }
    Some((acc.arg(), acc.norm() / count as f64))
}

/// Update the residual CFO from the pilots of data symbol `s`.
///
/// The common pilot phase is the CFO rotation accumulated since the channel
/// snapshot; dividing by the elapsed time gives an instantaneous estimate,
/// which is folded in with exponential smoothing. Symbols whose pilots are
/// too weak leave the state unchanged and set `low_confidence`.
pub fn track_residual_cfo(
    symbol: &[Complex64],
    estimate: &ChannelEstimate,
    s: usize,
    state: &OffsetState,
    config: &OfdmConfig,
    tracking: &TrackingConfig,
) -> OffsetState {
    let mut next = *state;
    let dn = state.elapsed_samples(s, config.symbol_len());
    let t = config.sample_period();
    match pilot_phase(symbol, estimate, s, state, config) {
        Some((phi, mag)) if mag >= tracking.pilot_floor && dn > 0.0 => {
            let predicted = 2.0 * PI * state.residual_cfo * t * dn;
            let unwrapped = predicted + wrap(phi - predicted);
            let instant = unwrapped / (2.0 * PI * t * dn);
            next.residual_cfo =
                (1.0 - tracking.alpha) * state.residual_cfo + tracking.alpha * instant;
            next.refresh(config.carrier_freq);
            next.low_confidence = false;
        }
        _ => next.low_confidence = true,
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoEstimate {
    pub n_eps: f64,
    pub sto: i64,
    pub residual: f64,
    /// Radians per subcarrier.
    pub slope: f64,
    pub intercept: f64,
}

/// Fit the phase of `demodulated / reference` against the subcarrier index.
///
/// A lag-one correlation across adjacent subcarriers gives the coarse slope;
/// the remaining phases are unwrapped in ascending `k` and refined with a
/// least-squares line weighted by `|reference|²`.
pub fn estimate_sto_slope(
    demodulated: &[Complex64],
    reference: &[Complex64],
    config: &OfdmConfig,
) -> Result<StoEstimate> {
    let n = config.n_subcarriers;
    let mut points: Vec<(i32, Complex64, f64)> = (0..n.min(demodulated.len()).min(reference.len()))
        .filter(|&b| reference[b].norm() >= REFERENCE_FLOOR)
        .map(|b| {
            (
                config.subcarrier(b),
                demodulated[b] / reference[b],
                reference[b].norm_sqr(),
            )
        })
        .filter(|(_, z, _)| z.is_finite())
        .collect();
    if points.len() < 2 {
        return Err(Error::StoOutOfRange(f64::NAN));
    }
    points.sort_by_key(|p| p.0);

    let mut lag = Complex64::new(0.0, 0.0);
    for w in points.windows(2) {
        if w[1].0 - w[0].0 == 1 {
            lag += w[1].1 * w[0].1.conj();
        }
    }
    let coarse = lag.arg();

    let mut phases = Vec::with_capacity(points.len());
    let mut prev: Option<f64> = None;
    for &(k, z, _) in &points {
        let raw = (z * Complex64::from_polar(1.0, -coarse * f64::from(k))).arg();
        let ph = match prev {
            Some(p) => p + wrap(raw - p),
            None => raw,
        };
        phases.push(ph);
        prev = Some(ph);
    }

    let sw: f64 = points.iter().map(|p| p.2).sum();
    let mk = points.iter().map(|p| p.2 * f64::from(p.0)).sum::<f64>() / sw;
    let mp = points
        .iter()
        .zip(&phases)
        .map(|(p, ph)| p.2 * ph)
        .sum::<f64>()
        / sw;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (p, ph) in points.iter().zip(&phases) {
        let dk = f64::from(p.0) - mk;
        sxy += p.2 * dk * (ph - mp);
        sxx += p.2 * dk * dk;
    }
    let fine = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let slope = coarse + fine;
    let intercept = mp - fine * mk;
    let n_eps = slope * n as f64 / (2.0 * PI);
    if !n_eps.is_finite() || n_eps.abs() > n as f64 / 2.0 {
        return Err(Error::StoOutOfRange(n_eps));
    }
    let sto = n_eps.round() as i64;
    Ok(StoEstimate {
        n_eps,
        sto,
        residual: n_eps - sto as f64,
        slope,
        intercept,
    })
}

/// CFO from the two identical long-training bodies starting at `start`.
pub fn lts_cfo(samples: &[Complex64], start: i64, n: usize, sample_period: f64) -> Result<f64> {
    let end = start + 2 * n as i64;
    if start < 0 || end > samples.len() as i64 {
        return Err(Error::WindowOutOfRange {
            start,
            end,
            len: samples.len(),
        });
    }
    let s = start as usize;
    let acc: Complex64 = (0..n)
        .map(|i| samples[s + n + i] * samples[s + i].conj())
        .sum();
    Ok(acc.arg() / (2.0 * PI * n as f64 * sample_period))
}

/// Where the FFT windows go.
///
/// Each source has its own frame origin, estimated by the detector. A
/// source's *aligned* window starts `cp_len - fft_window_offset` samples
/// before the body, inside that source's CP. The *common* window used for
/// data is anchored on the latest source and starts early enough that the
/// earliest source is not cut into, keeping at least two CP samples clear for
/// multipath.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub origins: Vec<i64>,
    pub reference_origin: i64,
    /// Samples the aligned windows start before a body.
    pub aligned_advance: i64,
    /// Samples the common window starts before the latest source's body.
    pub common_advance: i64,
}

impl WindowPlan {
    pub fn new(origins: Vec<i64>, cp_len: usize, fft_window_offset: usize) -> Self {
        let reference_origin = origins.iter().copied().max().unwrap_or(0);
        let earliest = origins.iter().copied().min().unwrap_or(0);
        let spread = reference_origin - earliest;
        let aligned_advance = (cp_len - fft_window_offset) as i64;
        let limit = (cp_len - MIN_WINDOW_MARGIN) as i64;
        let common_advance = aligned_advance.max(spread).min(limit);
        Self {
            origins,
            reference_origin,
            aligned_advance,
            common_advance,
        }
    }

    /// Arrival spread between the earliest and latest source, samples.
    pub fn spread(&self) -> i64 {
        self.reference_origin - self.origins.iter().copied().min().unwrap_or(0)
    }

    /// Common window for the body at layout position `body`.
    pub fn common_start(&self, body: usize) -> i64 {
        self.reference_origin + body as i64 - self.common_advance
    }

    /// `source`'s own window for the body at layout position `body`.
    pub fn aligned_start(&self, source: SourceId, body: usize) -> i64 {
        self.origins[source] + body as i64 - self.aligned_advance
    }

    /// How far the common window sits before the aligned one, which is the
    /// timing offset the slope fit should find.
    pub fn expected_sto(&self, source: SourceId) -> i64 {
        self.aligned_start(source, 0) - self.common_start(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceTrack {
    pub estimate: ChannelEstimate,
    pub state: OffsetState,
    /// CFO measured on this source's long training slot, Hz.
    pub lts_cfo: f64,
    /// Sample the channel snapshot refers to.
    pub reference_sample: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition {
    pub plan: WindowPlan,
    pub tracks: Vec<SourceTrack>,
}

/// Shared inputs of the receive chain.
#[derive(Debug, Clone)]
pub struct Receiver {
    pub config: OfdmConfig,
    pub layout: FrameLayout,
    pub modem: Modem,
    /// Calibrated coarse CFO per source, Hz.
    pub coarse_cfo: Vec<f64>,
    pub tracking: TrackingConfig,
}

impl Receiver {
    pub fn new(
        config: OfdmConfig,
        layout: FrameLayout,
        coarse_cfo: Vec<f64>,
        tracking: TrackingConfig,
    ) -> Result<Self> {
        config.validate()?;
        tracking.validate()?;
        if coarse_cfo.len() != layout.n_sources() {
            return Err(Error::config(
                "coarse_cfo",
                format!(
                    "{} entries for {} sources",
                    coarse_cfo.len(),
                    layout.n_sources()
                ),
            ));
        }
        if let Some(v) = &tracking.sfo_override {
            if v.len() != layout.n_sources() {
                return Err(Error::config(
                    "tracking.sfo_override",
                    "needs one entry per source",
                ));
            }
        }
        let modem = Modem::new(config.n_subcarriers);
        Ok(Self {
            config,
            layout,
            modem,
            coarse_cfo,
            tracking,
        })
    }

    /// Body position of data symbol `s` in the layout.
    pub fn data_body(&self, s: usize) -> usize {
        self.layout.data_symbol_start(s) + self.config.cp_len
    }

    pub fn frame_origins(&self, detection: &DetectionResult) -> Result<Vec<i64>> {
        self.layout
            .lts_slots
            .iter()
            .map(|slot| {
                detection
                    .per_source_start
                    .get(&slot.source_id)
                    .map(|&d| d as i64 - slot.start as i64)
                    .ok_or(Error::UndetectedSource(slot.source_id))
            })
            .collect()
    }

    /// Estimate every source's channel, CFO and timing offset from its long
    /// training slot.
    pub fn acquire(&self, rx: &[Complex64], detection: &DetectionResult) -> Result<Acquisition> {
        let cfg = &self.config;
        let plan = WindowPlan::new(
            self.frame_origins(detection)?,
            cfg.cp_len,
            cfg.fft_window_offset,
        );
        let reference = cfg.lts_freq();
        let n = cfg.n_subcarriers;
        let mut tracks = Vec::with_capacity(self.layout.n_sources());
        for i in 0..self.layout.n_sources() {
            let bodies = self.layout.lts_bodies(i);
            let aligned: Vec<Vec<Complex64>> = bodies
                .iter()
                .map(|&b| self.modem.demodulate_at(rx, plan.aligned_start(i, b)))
                .collect::<Result<_>>()?;
            let estimate = estimate_channel(&aligned, &reference, i, 0)?;
            let w1 = plan.aligned_start(i, bodies[0]);
            let f_lts = lts_cfo(rx, w1, n, cfg.sample_period())?;

            let mut common = vec![Complex64::new(0.0, 0.0); n];
            for &b in &bodies {
                let y = self.modem.demodulate_at(rx, plan.common_start(b))?;
                common.iter_mut().zip(&y).for_each(|(c, v)| *c += v * 0.5);
            }
            let expected: Vec<Complex64> = estimate
                .h
                .iter()
                .zip(&reference)
                .map(|(h, r)| h * r)
                .collect();
            let sto = estimate_sto_slope(&common, &expected, cfg)?;
            if sto.sto.unsigned_abs() as usize > cfg.cp_len {
                return Err(Error::StoOutOfRange(sto.n_eps));
            }

            let override_i = self.tracking.sfo_override.as_ref().map(|v| v[i]);
            let mut state =
                OffsetState::new(self.coarse_cfo[i], f_lts, cfg.carrier_freq, override_i);
            state.sto = sto.sto;
            state.sto_residual = sto.residual;
            let reference_sample = w1 + n as i64 / 2;
            state.origin_samples = (plan.common_start(self.data_body(0)) - reference_sample) as f64;
            state.snapshot_symbol = 0;
            tracks.push(SourceTrack {
                estimate,
                state,
                lts_cfo: f_lts,
                reference_sample,
            });
        }
        Ok(Acquisition { plan, tracks })
    }

    /// Re-estimate every source's channel from the training block that
    /// precedes data symbol `s`, and move the phase reference there.
    pub fn reestimate(&self, rx: &[Complex64], s: usize, acq: &mut Acquisition) -> Result<()> {
        let reference = self.config.lts_freq();
        for (i, track) in acq.tracks.iter_mut().enumerate() {
            let body = self.layout.training_symbol_start(s, i) + self.config.cp_len;
            let w = acq.plan.aligned_start(i, body);
            let y = self.modem.demodulate_at(rx, w)?;
            track.estimate = estimate_channel(&[y], &reference, i, s)?;
            track.reference_sample = w;
            track.state.origin_samples = (acq.plan.common_start(self.data_body(s)) - w) as f64;
            track.state.snapshot_symbol = s;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{apply_delay, apply_sfo};
    use crate::frame::{build_layout, Constellation, Modulation};
    use crate::transmitter::lts_waveform;

    fn cfg() -> OfdmConfig {
        OfdmConfig::default()
    }

    #[test]
    fn identity_channel_estimates_unity() {
        let c = cfg();
        let m = Modem::new(64);
        let lts = lts_waveform(&c, &m);
        let y1 = m.demodulate(&lts[32..96]);
        let y2 = m.demodulate(&lts[96..160]);
        let est = estimate_channel(&[y1, y2], &c.lts_freq(), 0, 0).unwrap();
        for k in c.trained_subcarriers() {
            let b = c.bin(k);
            assert!(est.trained[b]);
            assert!((est.h[b] - 1.0).norm() < 1e-9);
        }
        assert!(!est.trained[0]);
        assert_eq!(est.h[0], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn empty_reference_fails() {
        let zero = vec![Complex64::new(0.0, 0.0); 64];
        assert!(matches!(
            estimate_channel(std::slice::from_ref(&zero), &zero, 3, 0),
            Err(Error::EstimationFailure(3))
        ));
        assert!(estimate_channel(&[], &zero, 0, 0).is_err());
    }

    #[test]
    fn all_zero_offsets_give_zero_phase() {
        let c = cfg();
        let st = OffsetState::new(0.0, 0.0, c.carrier_freq, None);
        for s in 0..20 {
            for k in -26..=26 {
                assert_eq!(phase_correction(k, s, &st, &c), 0.0);
            }
        }
    }

    #[test]
    fn sto_term_matches_closed_form() {
        let c = cfg();
        let mut st = OffsetState::new(0.0, 0.0, c.carrier_freq, None);
        st.sto = 1;
        let th = phase_correction(1, 0, &st, &c);
        assert!((th - 2.0 * PI / 64.0).abs() < 1e-15);
        assert!((th - 0.0982).abs() < 1e-4);
    }

    #[test]
    fn sfo_term_matches_closed_form() {
        let c = cfg();
        let st = OffsetState::new(0.0, 0.0, c.carrier_freq, Some(2e-5));
        let th = phase_correction(26, 1, &st, &c);
        let want = 2.0 * PI * 26.0 * 2e-5 * 80.0 / 64.0;
        assert!((th - want).abs() < 1e-15);
        assert!((th - 4.084e-3).abs() < 1e-6);
    }

    #[test]
    fn gamma_follows_total_cfo_unless_overridden() {
        let st = OffsetState::new(11_600.0, 0.0, 5.8e9, None);
        assert!((st.sfo_ratio_est - 2e-6).abs() < 1e-18);
        assert_eq!(st.sfo_ratio_est, st.cfo_ratio);
        let st = OffsetState::new(11_600.0, 0.0, 5.8e9, Some(-3e-5));
        assert_eq!(st.sfo_ratio_est, -3e-5);
    }

    #[test]
    fn slope_fit_recovers_integer_delay() {
        let c = cfg();
        let m = Modem::new(64);
        let lts = lts_waveform(&c, &m);
        let reference = c.lts_freq();
        for d in [-5i64, 0, 1, 3, 7] {
            // window starts d samples before the body
            let y = m.demodulate(&lts[(32 - d) as usize..(96 - d) as usize]);
            let est = estimate_sto_slope(&y, &reference, &c).unwrap();
            assert_eq!(est.sto, d);
            assert!(est.residual.abs() < 1e-6, "{d}: {}", est.residual);
            assert!((est.slope - 2.0 * PI * d as f64 / 64.0).abs() < 1e-9);
        }
    }

    #[test]
    fn slope_fit_ignores_sfo_at_symbol_zero() {
        let c = cfg();
        let m = Modem::new(64);
        let lts = lts_waveform(&c, &m);
        let x = apply_sfo(&apply_delay(&lts, 3), 5e-5);
        let y = m.demodulate(&x[99..163]);
        let est = estimate_sto_slope(&y, &c.lts_freq(), &c).unwrap();
        assert_eq!(est.sto, 0);
        let y = m.demodulate(&x[96..160]);
        let est = estimate_sto_slope(&y, &c.lts_freq(), &c).unwrap();
        assert_eq!(est.sto, 3);
    }

    #[test]
    fn pilot_split_separates_common_and_slope() {
        let k0 = 21;
        let slope = 2.0 * PI * 1e-4 * 80.0 / 64.0;
        let minus = Complex64::from_polar(1.0, -f64::from(k0) * slope);
        let plus = Complex64::from_polar(1.0, f64::from(k0) * slope);
        let (common, s) = split_pilot_phases(minus, plus, k0);
        assert!(common.abs() < 1e-12);
        assert!((s - slope).abs() < 1e-12);
        let rot = Complex64::from_polar(1.0, 0.3);
        let (common, s) = split_pilot_phases(minus * rot, plus * rot, k0);
        assert!((common - 0.3).abs() < 1e-12);
        assert!((s - slope).abs() < 1e-12);
    }

    fn pilot_symbol(c: &OfdmConfig, source: SourceId, s: usize, phase: f64) -> Vec<Complex64> {
        let mut row = vec![Complex64::new(0.0, 0.0); 64];
        for &k in c.pilots(source) {
            row[c.bin(k)] = c.pilot_value(k, s) * Complex64::from_polar(1.0, phase);
        }
        row
    }

    fn unit_estimate(c: &OfdmConfig, source: SourceId) -> ChannelEstimate {
        ChannelEstimate {
            source_id: source,
            h: c.lts_freq()
                .iter()
                .map(|r| {
                    if r.norm() > 0.0 {
                        Complex64::new(1.0, 0.0)
                    } else {
                        r * 0.0
                    }
                })
                .collect(),
            trained: c.lts_freq().iter().map(|r| r.norm() > 0.0).collect(),
            snapshot_symbol: 0,
        }
    }

    #[test]
    fn tracker_measures_injected_residual() {
        let c = cfg();
        let tr = TrackingConfig {
            alpha: 1.0,
            ..TrackingConfig::default()
        };
        let est = unit_estimate(&c, 1);
        let mut st = OffsetState::new(0.0, 0.0, c.carrier_freq, None);
        let per_symbol = 2.0 * PI * 200.0 * 80.0 * c.sample_period();
        let mut prev_phase = 0.0;
        for s in 1..12 {
            let sym = pilot_symbol(&c, 1, s, per_symbol * s as f64);
            st = track_residual_cfo(&sym, &est, s, &st, &c, &tr);
            assert!((st.residual_cfo - 200.0).abs() < 1e-6);
            let th = phase_correction(0, s, &st, &c);
            assert!((th - prev_phase - per_symbol).abs() < 1e-3);
            prev_phase = th;
        }
    }

    #[test]
    fn tracker_holds_on_weak_pilots() {
        let c = cfg();
        let est = unit_estimate(&c, 0);
        let st = OffsetState::new(0.0, 150.0, c.carrier_freq, None);
        let sym = vec![Complex64::new(0.0, 0.0); 64];
        let next = track_residual_cfo(&sym, &est, 3, &st, &c, &TrackingConfig::default());
        assert!(next.low_confidence);
        assert_eq!(next.residual_cfo, 150.0);
    }

    #[test]
    fn zero_residual_tracks_zero() {
        let c = cfg();
        let est = unit_estimate(&c, 0);
        let mut st = OffsetState::new(0.0, 0.0, c.carrier_freq, None);
        for s in 1..5 {
            st = track_residual_cfo(
                &pilot_symbol(&c, 0, s, 0.0),
                &est,
                s,
                &st,
                &c,
                &TrackingConfig::default(),
            );
            assert!(st.residual_cfo.abs() < 1e-9);
        }
    }

    #[test]
    fn lts_cfo_recovers_rotation() {
        let c = cfg();
        let m = Modem::new(64);
        let lts = lts_waveform(&c, &m);
        let x = crate::channel::apply_cfo(&lts, -3_000.0, c.sample_period());
        let f = lts_cfo(&x, 32, 64, c.sample_period()).unwrap();
        assert!((f + 3_000.0).abs() < 1e-6);
        assert!(lts_cfo(&x, 40, 64, c.sample_period()).is_err());
    }

    #[test]
    fn window_plan_keeps_every_source_inside_its_cp() {
        let p = WindowPlan::new(vec![100, 103], 16, 4);
        assert_eq!(p.common_advance, 12);
        assert_eq!(p.expected_sto(1), 0);
        assert_eq!(p.expected_sto(0), -3);
        let p = WindowPlan::new(vec![100, 114], 16, 4);
        assert_eq!(p.common_advance, 14);
        assert_eq!(p.expected_sto(0), -14 + 2);
        let p = WindowPlan::new(vec![100, 130], 16, 4);
        assert_eq!(p.common_advance, 14);
    }

    #[test]
    fn receiver_rejects_mismatched_calibration() {
        let c = cfg();
        let l = build_layout(&c, 2, 96, &Constellation::new(Modulation::Bpsk)).unwrap();
        assert!(Receiver::new(c, l, vec![0.0], TrackingConfig::default()).is_err());
    }
}
