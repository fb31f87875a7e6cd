//! Joint maximum-likelihood decoding of superimposed cells.
//!
//! Every data cell `(k, s)` carries one constellation point from each source.
//! The receiver rebuilds each source's coefficient `c_i[k, s]` every symbol
//! and picks the index tuple minimizing `|x̃ - Σ p_{g_i}·c_i|²`.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::apply_cfo;
use crate::detector::DetectionResult;
use crate::error::{Error, Result};
use crate::frame::{Constellation, OfdmConfig, SourceId};
use crate::synchronizer::{
    estimate_channel, phase_correction, track_residual_cfo, ChannelEstimate, OffsetState, Receiver,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DecoderMode {
    /// Per-source criteria rebuilt every symbol.
    #[serde(rename = "phycode")]
    PhyCode,
    /// One averaged CFO for the whole stream and static criteria.
    #[serde(rename = "tpnc")]
    Tpnc,
}

impl DecoderMode {
    pub const ALL: [DecoderMode; 2] = [DecoderMode::PhyCode, DecoderMode::Tpnc];

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderMode::PhyCode => "phycode",
            DecoderMode::Tpnc => "tpnc",
        }
    }
}

impl fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phycode" => Ok(DecoderMode::PhyCode),
            "tpnc" => Ok(DecoderMode::Tpnc),
            other => Err(Error::config(
                "mode",
                format!("unknown decoder mode {other:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodingCriterion {
    pub source_id: SourceId,
    pub symbol: usize,
    /// Coefficient per FFT bin.
    pub c: Vec<Complex64>,
}

/// `c[k] = h[k]·e^{jθ(k, s)}`.
pub fn build_criterion(
    estimate: &ChannelEstimate,
    state: &OffsetState,
    s: usize,
    config: &OfdmConfig,
) -> DecodingCriterion {
    let c = estimate
        .h
        .iter()
        .enumerate()
        .map(|(b, h)| {
            let theta = phase_correction(config.subcarrier(b), s, state, config);
            if theta == 0.0 {
                *h
            } else {
                h * Complex64::from_polar(1.0, theta)
            }
        })
        .collect();
    DecodingCriterion {
        source_id: estimate.source_id,
        symbol: s,
        c,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointDecision {
    /// Constellation index per source, 0-based.
    pub indices: Vec<usize>,
    /// Squared distance of the winner.
    pub metric: f64,
    /// Squared distance of the best losing tuple.
    pub runner_up_metric: f64,
}

/// Exhaustive search over all `M^N` index tuples in lexicographic order;
/// the first tuple reaching the minimum wins.
pub fn joint_ml_decode(
    x: Complex64,
    coefficients: &[Complex64],
    constellation: &Constellation,
) -> JointDecision {
    let n = coefficients.len();
    let m = constellation.len();
    let table: Vec<Vec<Complex64>> = coefficients
        .iter()
        .map(|c| constellation.points.iter().map(|p| p * c).collect())
        .collect();
    let total = m.pow(n as u32);
    let mut digits = vec![0usize; n];
    let mut best = f64::INFINITY;
    let mut runner_up = f64::INFINITY;
    let mut best_code = 0usize;
    for code in 0..total {
        if code > 0 {
            // increment the mixed-radix counter, last source fastest
            for d in digits.iter_mut().rev() {
                *d += 1;
                if *d < m {
                    break;
                }
                *d = 0;
            }
        }
        let mut y = x;
        for (row, &g) in table.iter().zip(&digits) {
            y -= row[g];
        }
        let metric = y.norm_sqr();
        if metric < best {
            runner_up = best;
            best = metric;
            best_code = code;
        } else if metric < runner_up {
            runner_up = metric;
        }
    }
    let mut indices = vec![0usize; n];
    let mut rest = best_code;
    for g in indices.iter_mut().rev() {
        *g = rest % m;
        rest /= m;
    }
    JointDecision {
        indices,
        metric: best,
        runner_up_metric: runner_up,
    }
}

/// Per-symbol tracking state, one row per (symbol, source).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingRow {
    pub symbol: usize,
    pub source: SourceId,
    pub residual_cfo_hz: f64,
    pub gamma_est: f64,
    pub theta_at_kmax: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFrame {
    pub mode: DecoderMode,
    /// Payload bits per source.
    pub bits: Vec<Vec<u8>>,
    /// Mean EVM of each data symbol, percent.
    pub evm_trace: Vec<f64>,
    /// Mean EVM over all data cells, percent.
    pub evm_pct: f64,
    pub tracking: Vec<TrackingRow>,
}

struct CellLog {
    errors: Vec<Vec<f64>>,
    recon_power: f64,
    cells: usize,
}

impl CellLog {
    fn new(n_symbols: usize) -> Self {
        Self {
            errors: Vec::with_capacity(n_symbols),
            recon_power: 0.0,
            cells: 0,
        }
    }

    fn evm(&self) -> (Vec<f64>, f64) {
        let rms = (self.recon_power / self.cells.max(1) as f64).sqrt();
        let scale = if rms > 0.0 {
            100.0 / rms
        } else {
            f64::INFINITY
        };
        let trace: Vec<f64> = self
            .errors
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64 * scale)
            .collect();
        let total: f64 = self.errors.iter().flatten().sum();
        (trace, total / self.cells.max(1) as f64 * scale)
    }
}

fn decode_symbol(
    y: &[Complex64],
    criteria: &[Vec<Complex64>],
    config: &OfdmConfig,
    constellation: &Constellation,
    indices: &mut [Vec<usize>],
    log: &mut CellLog,
) {
    let mut row = Vec::with_capacity(config.data_subcarriers.len());
    let mut coeffs = vec![Complex64::new(0.0, 0.0); criteria.len()];
    for &k in &config.data_subcarriers {
        let b = config.bin(k);
        for (c, crit) in coeffs.iter_mut().zip(criteria) {
            *c = crit[b];
        }
        let d = joint_ml_decode(y[b], &coeffs, constellation);
        let recon: Complex64 = coeffs
            .iter()
            .zip(&d.indices)
            .map(|(c, &g)| constellation.points[g] * c)
            .sum();
        row.push((y[b] - recon).norm());
        log.recon_power += recon.norm_sqr();
        log.cells += 1;
        for (out, &g) in indices.iter_mut().zip(&d.indices) {
            out.push(g);
        }
    }
    log.errors.push(row);
}

fn indices_to_bits(indices: &[usize], constellation: &Constellation, n_bits: usize) -> Vec<u8> {
    let mut bits: Vec<u8> = indices
        .iter()
        .flat_map(|&g| constellation.bits_of_index(g))
        .collect();
    bits.truncate(n_bits);
    bits
}

/// Decode a received frame in the given mode.
pub fn decode_frame(
    rx: &[Complex64],
    detection: &DetectionResult,
    receiver: &Receiver,
    constellation: &Constellation,
    mode: DecoderMode,
) -> Result<DecodedFrame> {
    match mode {
        DecoderMode::PhyCode => decode_phycode(rx, detection, receiver, constellation),
        DecoderMode::Tpnc => decode_tpnc(rx, detection, receiver, constellation),
    }
}

fn decode_phycode(
    rx: &[Complex64],
    detection: &DetectionResult,
    receiver: &Receiver,
    constellation: &Constellation,
) -> Result<DecodedFrame> {
    let cfg = &receiver.config;
    let layout = &receiver.layout;
    let n_src = layout.n_sources();
    let mut acq = receiver.acquire(rx, detection)?;
    let mut indices = vec![Vec::new(); n_src];
    let mut log = CellLog::new(layout.n_data_symbols);
    let mut tracking = Vec::with_capacity(layout.n_data_symbols * n_src);
    let k_max = cfg.data_subcarriers.iter().copied().max().unwrap_or(0);

    for s in 0..layout.n_data_symbols {
        if layout.reestimation_before(s) {
            receiver.reestimate(rx, s, &mut acq)?;
        }
        let y = receiver
            .modem
            .demodulate_at(rx, acq.plan.common_start(receiver.data_body(s)))?;
        let mut criteria = Vec::with_capacity(n_src);
        for track in acq.tracks.iter_mut() {
            track.state = track_residual_cfo(
                &y,
                &track.estimate,
                s,
                &track.state,
                cfg,
                &receiver.tracking,
            );
            tracking.push(TrackingRow {
                symbol: s,
                source: track.estimate.source_id,
                residual_cfo_hz: track.state.residual_cfo,
                gamma_est: track.state.sfo_ratio_est,
                theta_at_kmax: phase_correction(k_max, s, &track.state, cfg),
            });
            criteria.push(build_criterion(&track.estimate, &track.state, s, cfg).c);
        }
        decode_symbol(&y, &criteria, cfg, constellation, &mut indices, &mut log);
    }
    let (evm_trace, evm_pct) = log.evm();
    Ok(DecodedFrame {
        mode: DecoderMode::PhyCode,
        bits: indices
            .iter()
            .map(|ix| indices_to_bits(ix, constellation, layout.payload_bits))
            .collect(),
        evm_trace,
        evm_pct,
        tracking,
    })
}

/// Average of the per-source CFO estimates, removed from the whole stream;
/// channels re-measured on the derotated stream and held fixed.
fn decode_tpnc(
    rx: &[Complex64],
    detection: &DetectionResult,
    receiver: &Receiver,
    constellation: &Constellation,
) -> Result<DecodedFrame> {
    let cfg = &receiver.config;
    let layout = &receiver.layout;
    let n_src = layout.n_sources();
    let acq = receiver.acquire(rx, detection)?;
    let mean_cfo = acq.tracks.iter().map(|t| t.lts_cfo).sum::<f64>() / n_src as f64;
    let derotated = apply_cfo(rx, -mean_cfo, cfg.sample_period());
    let reference = cfg.lts_freq();

    let mut criteria = Vec::with_capacity(n_src);
    for i in 0..n_src {
        let bodies: Vec<Vec<Complex64>> = layout
            .lts_bodies(i)
            .iter()
            .map(|&b| {
                receiver
                    .modem
                    .demodulate_at(&derotated, acq.plan.common_start(b))
            })
            .collect::<Result<_>>()?;
        criteria.push(estimate_channel(&bodies, &reference, i, 0)?.h);
    }

    let mut indices = vec![Vec::new(); n_src];
    let mut log = CellLog::new(layout.n_data_symbols);
    for s in 0..layout.n_data_symbols {
        let y = receiver
            .modem
            .demodulate_at(&derotated, acq.plan.common_start(receiver.data_body(s)))?;
        decode_symbol(&y, &criteria, cfg, constellation, &mut indices, &mut log);
    }
    let (evm_trace, evm_pct) = log.evm();
    Ok(DecodedFrame {
        mode: DecoderMode::Tpnc,
        bits: indices
            .iter()
            .map(|ix| indices_to_bits(ix, constellation, layout.payload_bits))
            .collect(),
        evm_trace,
        evm_pct,
        tracking: Vec::new(),
    })
}
