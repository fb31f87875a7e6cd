//! Per-source impairments and superposition at the receiver.
//!
//! Each source's stream goes through multipath, then its timing offset, then
//! sampling-clock resampling, then carrier rotation. The streams are summed at
//! their arrival offsets and white Gaussian noise is added on top.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Impairments of one source as seen at the receiver.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SourceProfile {
    /// Residual carrier offset at the channel input, Hz.
    pub cfo: f64,
    /// Sampling-clock error ratio `(T - T') / T`.
    pub sfo_ratio: f64,
    /// Timing offset, whole samples of delay.
    pub sto: i64,
    /// Arrival misalignment relative to the other sources, samples.
    pub arrival_offset: i64,
}

pub const MAX_SFO_RATIO: f64 = 1e-3;

impl SourceProfile {
    pub fn validate(&self) -> Result<()> {
        if !self.cfo.is_finite() {
            return Err(Error::config("cfo", "must be finite"));
        }
        if self.sfo_ratio.is_nan() || self.sfo_ratio.abs() >= MAX_SFO_RATIO {
            return Err(Error::config(
                "sfo_ratio",
                format!("|{}| must be below {MAX_SFO_RATIO}", self.sfo_ratio),
            ));
        }
        Ok(())
    }

    /// Whether the arrival offset fits in the part of the CP not eaten by
    /// multipath. Profiles outside that range still simulate; they just decode badly.
    pub fn in_range(&self, cp_len: usize) -> bool {
        self.arrival_offset.unsigned_abs() as usize <= cp_len.saturating_sub(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub delay: usize,
    pub gain: Complex64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultipathModel {
    pub taps: Vec<Tap>,
}

impl Default for MultipathModel {
    fn default() -> Self {
        Self::identity()
    }
}

/// Power ratio between consecutive taps of the NLOS preset.
pub const NLOS_DECAY: f64 = 0.5;
pub const NLOS_TAPS: usize = 3;

impl MultipathModel {
    pub fn identity() -> Self {
        Self {
            taps: vec![Tap {
                delay: 0,
                gain: Complex64::new(1.0, 0.0),
            }],
        }
    }

    pub fn new(taps: Vec<Tap>) -> Result<Self> {
        let m = Self { taps };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps.first().map(|t| t.delay) != Some(0) {
            return Err(Error::config("taps", "first tap must have delay 0"));
        }
        if self.taps.windows(2).any(|w| w[1].delay <= w[0].delay) {
            return Err(Error::config("taps", "delays must be strictly ascending"));
        }
        if self.power() > 1.0 + 1e-9 {
            return Err(Error::config(
                "taps",
                format!("total power {:.6} exceeds 1", self.power()),
            ));
        }
        Ok(())
    }

    pub fn power(&self) -> f64 {
        self.taps.iter().map(|t| t.gain.norm_sqr()).sum()
    }

    pub fn max_delay(&self) -> usize {
        self.taps.last().map_or(0, |t| t.delay)
    }

    /// Delay of the tap with the largest magnitude.
    pub fn strongest_delay(&self) -> usize {
        self.taps
            .iter()
            .max_by(|a, b| a.gain.norm_sqr().total_cmp(&b.gain.norm_sqr()))
            .map_or(0, |t| t.delay)
    }

    /// Line of sight: a single tap with a random phase.
    pub fn los<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let phase = rng.random::<f64>() * 2.0 * PI;
        Self {
            taps: vec![Tap {
                delay: 0,
                gain: Complex64::from_polar(1.0, phase),
            }],
        }
    }

    /// Office NLOS: taps at delays 0, 1, 2 with exponentially decaying power
    /// and independent random phases, normalized to unit power.
    pub fn nlos<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let powers: Vec<f64> = (0..NLOS_TAPS).map(|i| NLOS_DECAY.powi(i as i32)).collect();
        let total: f64 = powers.iter().sum();
        let taps = powers
            .iter()
            .enumerate()
            .map(|(delay, p)| Tap {
                delay,
                gain: Complex64::from_polar((p / total).sqrt(), rng.random::<f64>() * 2.0 * PI),
            })
            .collect();
        Self { taps }
    }

    /// Gain on subcarrier `k` under the modem's sign convention.
    pub fn frequency_response(&self, k: i32, n_subcarriers: usize) -> Complex64 {
        self.taps
            .iter()
            .map(|t| {
                t.gain
                    * Complex64::from_polar(
                        1.0,
                        2.0 * PI * f64::from(k) * t.delay as f64 / n_subcarriers as f64,
                    )
            })
            .sum()
    }

    pub fn scaled(&self, amplitude: f64) -> Self {
        Self {
            taps: self
                .taps
                .iter()
                .map(|t| Tap {
                    delay: t.delay,
                    gain: t.gain * amplitude,
                })
                .collect(),
        }
    }
}

/// Multiply sample `n` by `e^{j2π·cfo·n·T}`.
pub fn apply_cfo(samples: &[Complex64], cfo: f64, sample_period: f64) -> Vec<Complex64> {
    if cfo == 0.0 {
        return samples.to_vec();
    }
    let w = 2.0 * PI * cfo * sample_period;
    samples
        .iter()
        .enumerate()
        .map(|(n, &x)| x * Complex64::from_polar(1.0, w * n as f64))
        .collect()
}

/// Half-width of the resampling kernel; the kernel spans `2 * SINC_HALF_TAPS`
/// input samples.
pub const SINC_HALF_TAPS: i64 = 24;

fn hann_sinc(x: f64) -> f64 {
    let half = SINC_HALF_TAPS as f64;
    if x.abs() >= half {
        return 0.0;
    }
    let window = 0.5 * (1.0 + (PI * x / half).cos());
    let sinc = if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    };
    window * sinc
}

/// Resample so that output sample `m` is the input evaluated at
/// `m·(1 - sfo_ratio)`, using a Hann-windowed sinc.
pub fn apply_sfo(samples: &[Complex64], sfo_ratio: f64) -> Vec<Complex64> {
    if sfo_ratio == 0.0 {
        return samples.to_vec();
    }
    let len = samples.len() as i64;
    (0..samples.len())
        .map(|m| {
            let t = m as f64 * (1.0 - sfo_ratio);
            let base = t.floor() as i64;
            let frac = t - base as f64;
            if frac == 0.0 {
                return if (0..len).contains(&base) {
                    samples[base as usize]
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            let lo = (base - SINC_HALF_TAPS + 1).max(0);
            let hi = (base + SINC_HALF_TAPS).min(len - 1);
            (lo..=hi)
                .map(|j| samples[j as usize] * hann_sinc(t - j as f64))
                .sum()
        })
        .collect()
}

/// Shift by `delay` samples: positive delays prepend zeros, negative ones
/// drop leading samples.
pub fn apply_delay(samples: &[Complex64], delay: i64) -> Vec<Complex64> {
    if delay >= 0 {
        let mut out = vec![Complex64::new(0.0, 0.0); delay as usize];
        out.extend_from_slice(samples);
        out
    } else {
        samples
            .get(delay.unsigned_abs() as usize..)
            .unwrap_or(&[])
            .to_vec()
    }
}

/// Full linear convolution with the sparse tap response.
pub fn apply_multipath(samples: &[Complex64], model: &MultipathModel) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); samples.len() + model.max_delay()];
    for tap in &model.taps {
        for (n, &x) in samples.iter().enumerate() {
            out[n + tap.delay] += tap.gain * x;
        }
    }
    out
}

/// Run one source's stream through its channel.
pub fn impair(
    samples: &[Complex64],
    profile: &SourceProfile,
    multipath: &MultipathModel,
    sample_period: f64,
) -> Vec<Complex64> {
    let x = apply_multipath(samples, multipath);
    let x = apply_delay(&x, profile.sto);
    let x = apply_sfo(&x, profile.sfo_ratio);
    apply_cfo(&x, profile.cfo, sample_period)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// SNR relative to the measured power of the superimposed signal.
    /// `f64::INFINITY` disables noise.
    pub snr_db: f64,
    pub rng_seed: u64,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            snr_db: f64::INFINITY,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    pub samples: Vec<Complex64>,
    /// Mean power of the noiseless sum over the span any source occupies.
    pub signal_power: f64,
    /// Complex noise variance actually used.
    pub noise_power: f64,
}

/// Sum the streams at their (non-negative) sample offsets and add complex
/// white Gaussian noise.
pub fn superimpose(streams: &[(Vec<Complex64>, i64)], noise: &NoiseModel) -> Result<Received> {
    if streams.is_empty() {
        return Err(Error::NoStreams);
    }
    if let Some((_, off)) = streams.iter().find(|(_, off)| *off < 0) {
        return Err(Error::config(
            "arrival_offset",
            format!("stream offset {off} is negative"),
        ));
    }
    let end = streams
        .iter()
        .map(|(s, off)| *off as usize + s.len())
        .max()
        .unwrap_or(0);
    let begin = streams
        .iter()
        .map(|(_, off)| *off as usize)
        .min()
        .unwrap_or(0);
    let mut out = vec![Complex64::new(0.0, 0.0); end];
    for (s, off) in streams {
        for (y, x) in out[*off as usize..].iter_mut().zip(s) {
            *y += x;
        }
    }
    let span = end - begin;
    let signal_power = if span == 0 {
        0.0
    } else {
        out[begin..].iter().map(|x| x.norm_sqr()).sum::<f64>() / span as f64
    };
    let noise_power = if noise.snr_db.is_finite() {
        signal_power / 10f64.powf(noise.snr_db / 10.0)
    } else {
        0.0
    };
    if noise_power > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
        let sigma = (noise_power / 2.0).sqrt();
        for y in out.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *y += Complex64::new(re, im) * sigma;
        }
    }
    Ok(Received {
        samples: out,
        signal_power,
        noise_power,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transmitter::Modem;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn tone(len: usize, cycles_per_sample: f64) -> Vec<Complex64> {
        (0..len)
            .map(|n| Complex64::from_polar(1.0, 2.0 * PI * cycles_per_sample * n as f64))
            .collect()
    }

    #[test]
    fn zero_offsets_are_identities() {
        let x = tone(100, 0.013);
        assert_eq!(apply_cfo(&x, 0.0, 1e-7), x);
        assert_eq!(apply_sfo(&x, 0.0), x);
        assert_eq!(apply_multipath(&x, &MultipathModel::identity()), x);
        assert_eq!(apply_delay(&x, 0), x);
    }

    #[test]
    fn one_bin_cfo_turns_dc_into_first_basis_vector() {
        let t = 1e-7;
        let x = vec![c(1.0, 0.0); 128];
        let y = apply_cfo(&x, 1.0 / (64.0 * t), t);
        for (n, v) in y.iter().enumerate() {
            let expect = Complex64::from_polar(1.0, 2.0 * PI * (n % 64) as f64 / 64.0);
            assert!((v - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn cfo_rotations_cancel() {
        let x = tone(500, 0.21);
        let y = apply_cfo(&apply_cfo(&x, 733.0, 1e-7), -733.0, 1e-7);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn sfo_scales_tone_frequency() {
        // Output sample m reads the input at m(1 - γ), so a tone at f cycles
        // per sample comes out at f(1 - γ). Measure the frequency by the phase
        // of the lag-one autocorrelation over the interior of the block.
        let gamma = 1e-4;
        let f = 0.3;
        let x = tone(4096, f);
        let y = apply_sfo(&x, gamma);
        let acc: Complex64 = (64..4000).map(|n| y[n + 1] * y[n].conj()).sum();
        let measured = acc.arg() / (2.0 * PI);
        let expect = f * (1.0 - gamma);
        // one DFT bin of a 4096-point block is 1/4096 cycles per sample
        assert!((measured - expect).abs() < 1e-6, "{measured} vs {expect}");
        assert!((measured - f).abs() > 0.5 * f * gamma);
    }

    #[test]
    fn sfo_phase_drift_per_symbol_follows_clock_error() {
        let gamma = 2e-5;
        let n = 64;
        let cp = 16;
        let modem = Modem::new(n);
        let k: i32 = 13;
        let mut row = vec![c(0.0, 0.0); n];
        row[k as usize] = c(1.0, 0.0);
        let body = modem.synthesize(&row);
        let mut stream = Vec::new();
        for _ in 0..20 {
            stream.extend_from_slice(&body[n - cp..]);
            stream.extend_from_slice(&body);
        }
        let y = apply_sfo(&stream, gamma);
        let phase = |s: usize| modem.demodulate(&y[s * 80 + cp..s * 80 + cp + n])[k as usize].arg();
        let per_symbol = 2.0 * PI * f64::from(k) * gamma * (n + cp) as f64 / n as f64;
        for s in 5..15 {
            let inc = phase(s + 1) - phase(s);
            assert!((inc - per_symbol).abs() < 1e-4, "{inc} vs {per_symbol}");
        }
    }

    #[test]
    fn two_tap_impulse_response() {
        let m = MultipathModel::new(vec![
            Tap {
                delay: 0,
                gain: c(1.0, 0.0),
            },
            Tap {
                delay: 2,
                gain: c(0.5, 0.0),
            },
        ]);
        // power 1.25 > 1 is rejected; the raw convolution still works
        assert!(m.is_err());
        let m = MultipathModel {
            taps: vec![
                Tap {
                    delay: 0,
                    gain: c(1.0, 0.0),
                },
                Tap {
                    delay: 2,
                    gain: c(0.5, 0.0),
                },
            ],
        };
        let mut x = vec![c(0.0, 0.0); 5];
        x[0] = c(1.0, 0.0);
        let y = apply_multipath(&x, &m);
        let re: Vec<f64> = y.iter().map(|v| v.re).collect();
        assert_eq!(re, vec![1.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn frequency_response_matches_demodulated_tap_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = MultipathModel::nlos(&mut rng);
        let modem = Modem::new(64);
        let mut taps = vec![c(0.0, 0.0); 64];
        for t in &m.taps {
            taps[t.delay] = t.gain;
        }
        let spectrum = modem.demodulate(&taps);
        for (b, y) in spectrum.iter().enumerate() {
            let k = if b >= 32 { b as i32 - 64 } else { b as i32 };
            let h = m.frequency_response(k, 64);
            assert!((y * 8.0 - h).norm() < 1e-9);
        }
    }

    #[test]
    fn nlos_preset_is_valid_and_tap0_strongest() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let m = MultipathModel::nlos(&mut rng);
            m.validate().unwrap();
            assert!((m.power() - 1.0).abs() < 1e-12);
            assert_eq!(m.strongest_delay(), 0);
        }
    }

    #[test]
    fn model_validation() {
        assert!(MultipathModel::new(vec![Tap {
            delay: 1,
            gain: c(0.5, 0.0)
        }])
        .is_err());
        assert!(MultipathModel::new(vec![
            Tap {
                delay: 0,
                gain: c(0.5, 0.0)
            },
            Tap {
                delay: 0,
                gain: c(0.5, 0.0)
            },
        ])
        .is_err());
    }

    #[test]
    fn superimpose_single_stream_noiseless_is_identity() {
        let x = tone(50, 0.1);
        let r = superimpose(&[(x.clone(), 0)], &NoiseModel::noiseless()).unwrap();
        assert_eq!(r.samples, x);
    }

    #[test]
    fn superimpose_identical_streams_doubles() {
        let x = tone(50, 0.1);
        let r = superimpose(&[(x.clone(), 0), (x.clone(), 0)], &NoiseModel::noiseless()).unwrap();
        for (a, b) in r.samples.iter().zip(&x) {
            assert_eq!(*a, b * 2.0);
        }
    }

    #[test]
    fn superimpose_rejects_empty_and_negative() {
        assert!(matches!(
            superimpose(&[], &NoiseModel::noiseless()),
            Err(Error::NoStreams)
        ));
        assert!(superimpose(&[(tone(4, 0.1), -1)], &NoiseModel::noiseless()).is_err());
    }

    #[test]
    fn measured_snr_matches_request() {
        let x = tone(100_000, 0.17);
        let noise = NoiseModel {
            snr_db: 12.0,
            rng_seed: 99,
        };
        let r = superimpose(&[(x.clone(), 0)], &noise).unwrap();
        let noise_est: f64 = r
            .samples
            .iter()
            .zip(&x)
            .map(|(y, s)| (y - s).norm_sqr())
            .sum::<f64>()
            / x.len() as f64;
        let snr = 10.0 * (1.0 / noise_est).log10();
        assert!((snr - 12.0).abs() < 0.2, "{snr}");
    }

    #[test]
    fn noise_is_reproducible() {
        let x = tone(1000, 0.17);
        let noise = NoiseModel {
            snr_db: 3.0,
            rng_seed: 4,
        };
        let a = superimpose(&[(x.clone(), 3)], &noise).unwrap();
        let b = superimpose(&[(x.clone(), 3)], &noise).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn profile_spec_flags() {
        let p = SourceProfile {
            arrival_offset: 14,
            ..Default::default()
        };
        assert!(p.in_range(16));
        let p = SourceProfile {
            arrival_offset: -15,
            ..Default::default()
        };
        assert!(!p.in_range(16));
        let p = SourceProfile {
            sfo_ratio: 2e-3,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
