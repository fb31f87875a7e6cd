//! Two-step detection of a superimposed frame.
//!
//! A cheap delay-and-correlate pass over the periodic short training sequence
//! finds the frame. Each source's long training slot is then searched with a
//! normalized matched filter in a window at most two symbols wide around the
//! position the layout predicts.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{FrameLayout, OfdmConfig, SourceId};
use crate::transmitter::{lts_waveform, Modem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub threshold: f64,
    /// Consecutive samples above threshold needed to accept a plateau.
    pub plateau_len: usize,
    /// Correlation window of the coarse pass, samples.
    pub window: usize,
    /// Half-width of the fine search around the predicted slot start.
    pub search_half_width: usize,
    /// Minimum normalized peak for the fine search to report a source.
    pub confidence_floor: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: 0.8,
            plateau_len: 8,
            window: 64,
            search_half_width: 80,
            confidence_floor: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("detector.threshold", "must lie in (0, 1)"));
        }
        if self.plateau_len == 0 || self.window == 0 {
            return Err(Error::config(
                "detector",
                "plateau_len and window must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.confidence_floor) {
            return Err(Error::config(
                "detector.confidence_floor",
                "must lie in [0, 1)",
            ));
        }
        Ok(())
    }
}

/// Run of consecutive samples whose metric is at or above threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plateau {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
}

impl Plateau {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseScan {
    /// `metric[n]` is the normalized correlation of the window starting at `n`.
    pub metric: Vec<f64>,
    pub candidates: Vec<Plateau>,
    /// Complex multiplications spent.
    pub complex_mults: u64,
}

/// Delay-and-correlate metric
/// `M(n) = |Σ r(n+i)·r*(n+i+P)| / Σ |r(n+i+P)|²` over `window` terms,
/// updated with one new complex product per advanced sample.
pub fn auto_correlate(
    samples: &[Complex64],
    period: usize,
    window: usize,
    threshold: f64,
    plateau_len: usize,
) -> Result<CoarseScan> {
    let needed = window + period;
    if samples.len() < needed || window == 0 || period == 0 {
        return Err(Error::InputTooShort {
            len: samples.len(),
            needed,
        });
    }
    let n_out = samples.len() - needed + 1;
    let mut metric = Vec::with_capacity(n_out);
    let mut products = Vec::with_capacity(samples.len() - period);
    let mut corr = Complex64::new(0.0, 0.0);
    let mut energy = 0.0;
    let mut peak_energy: f64 = 0.0;
    let mut mults = 0u64;

    for j in 0..window {
        let p = samples[j] * samples[j + period].conj();
        mults += 1;
        products.push(p);
        corr += p;
        energy += samples[j + period].norm_sqr();
    }
    for n in 0..n_out {
        if n > 0 {
            let j = n + window - 1;
            let p = samples[j] * samples[j + period].conj();
            mults += 1;
            products.push(p);
            corr += p - products[n - 1];
            energy += samples[j + period].norm_sqr() - samples[n - 1 + period].norm_sqr();
        }
        peak_energy = peak_energy.max(energy);
        // running sums leave rounding dust behind in silent stretches
        let m = if energy > 1e-9 * peak_energy && energy > 0.0 {
            corr.norm() / energy
        } else {
            0.0
        };
        metric.push(m);
    }

    let mut candidates = Vec::new();
    let mut run_start = None;
    for (n, &m) in metric.iter().enumerate() {
        match (m >= threshold, run_start) {
            (true, None) => run_start = Some(n),
            (false, Some(s)) => {
                if n - s >= plateau_len {
                    candidates.push(Plateau {
                        start: s,
                        end: n - 1,
                    });
                }
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        if n_out - s >= plateau_len {
            candidates.push(Plateau {
                start: s,
                end: n_out - 1,
            });
        }
    }
    Ok(CoarseScan {
        metric,
        candidates,
        complex_mults: mults,
    })
}

/// First sample of the short training sequence implied by a plateau.
///
/// Entering the STS from silence or noise, the metric climbs as
/// `(W - d) / W` where `d` is the distance to the STS start, so the run
/// begins `floor((1 - threshold) * W)` samples early. The trailing edge is not
/// used: with this normalization it lingers into whatever follows.
pub fn sts_start_from_plateau(plateau: &Plateau, window: usize, threshold: f64) -> i64 {
    let lead = ((1.0 - threshold) * window as f64 + 1e-9).floor() as i64;
    plateau.start as i64 + lead
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineDetection {
    pub start: usize,
    /// Normalized peak in `[0, 1]`.
    pub confidence: f64,
    pub complex_mults: u64,
}

/// Normalized matched filter of `reference` against `samples` at every lag
/// in `search`. Lags that would run past the end of `samples` are skipped.
pub fn cross_correlate_lts(
    samples: &[Complex64],
    search: RangeInclusive<usize>,
    reference: &[Complex64],
    source_id: SourceId,
    confidence_floor: f64,
) -> Result<FineDetection> {
    let ref_energy: f64 = reference.iter().map(|x| x.norm_sqr()).sum();
    let last = samples.len().checked_sub(reference.len());
    let (lo, hi) = match last {
        Some(last) if *search.start() <= last => (*search.start(), (*search.end()).min(last)),
        _ => return Err(Error::SourceNotFound(source_id)),
    };
    let mut best = FineDetection {
        start: lo,
        confidence: 0.0,
        complex_mults: 0,
    };
    let mut mults = 0u64;
    let mut energy: f64 = samples[lo..lo + reference.len()]
        .iter()
        .map(|x| x.norm_sqr())
        .sum();
    for d in lo..=hi {
        if d > lo {
            energy += samples[d + reference.len() - 1].norm_sqr() - samples[d - 1].norm_sqr();
        }
        let acc: Complex64 = samples[d..d + reference.len()]
            .iter()
            .zip(reference)
            .map(|(r, t)| r * t.conj())
            .sum();
        mults += reference.len() as u64;
        let denom = (energy.max(0.0) * ref_energy).sqrt();
        let conf = if denom > 0.0 {
            (acc.norm() / denom).min(1.0)
        } else {
            0.0
        };
        if conf > best.confidence {
            best.start = d;
            best.confidence = conf;
        }
    }
    best.complex_mults = mults;
    if best.confidence < confidence_floor {
        return Err(Error::SourceNotFound(source_id));
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    /// Estimated first sample of the shared short training sequence.
    pub coarse_start: usize,
    /// Estimated first sample of each source's long training slot.
    pub per_source_start: BTreeMap<SourceId, usize>,
    pub confidence: BTreeMap<SourceId, f64>,
    pub complex_mults: u64,
}

/// Coarse scan followed by one fine search per source.
pub fn detect(
    samples: &[Complex64],
    config: &OfdmConfig,
    layout: &FrameLayout,
    modem: &Modem,
    det: &DetectorConfig,
) -> Result<DetectionResult> {
    let scan = auto_correlate(
        samples,
        layout.sts_period,
        det.window,
        det.threshold,
        det.plateau_len,
    )?;
    let plateau = scan.candidates.first().ok_or(Error::NoPlateau)?;
    let coarse = sts_start_from_plateau(plateau, det.window, det.threshold).max(0) as usize;
    let reference = lts_waveform(config, modem);
    let mut result = DetectionResult {
        coarse_start: coarse,
        per_source_start: BTreeMap::new(),
        confidence: BTreeMap::new(),
        complex_mults: scan.complex_mults,
    };
    for slot in &layout.lts_slots {
        let expected = coarse + slot.start;
        let search =
            expected.saturating_sub(det.search_half_width)..=expected + det.search_half_width;
        let fine = cross_correlate_lts(
            samples,
            search,
            &reference,
            slot.source_id,
            det.confidence_floor,
        )?;
        result.complex_mults += fine.complex_mults;
        result.per_source_start.insert(slot.source_id, fine.start);
        result.confidence.insert(slot.source_id, fine.confidence);
    }
    Ok(result)
}
