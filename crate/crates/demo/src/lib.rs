//! Browser bindings: one frame's EVM trace, the FFT window sweep, and a
//! paired PhyCode/T-PNC comparison, all on the default two-source scenario.

use wasm_bindgen::prelude::*;

use sphy::decoder::{decode_frame, DecoderMode};
use sphy::harness::{build_trial, compare_modes, run_trial, sweep_window, Scenario};

const MAX_TRIALS: u64 = 500;

fn scenario(seed: u64, residual_cfo_hz: f64) -> sphy::Result<Scenario> {
    let mut sc = Scenario {
        id: "demo".into(),
        seed,
        ..Scenario::default()
    };
    sc.sources[1].cfo_hz = residual_cfo_hz;
    sc.validate()?;
    Ok(sc)
}

fn js(e: sphy::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Per-symbol EVM (percent) of one decoded frame, followed by the per-source
/// BERs as the last two entries.
pub fn frame_evm_native(
    mode: &str,
    snr_db: f64,
    residual_cfo_hz: f64,
    payload_bits: usize,
    seed: u64,
) -> sphy::Result<Vec<f64>> {
    let mode: DecoderMode = mode.parse()?;
    let sc = scenario(seed, residual_cfo_hz)?;
    let setup = build_trial(&sc, 0, snr_db, payload_bits)?;
    let det = setup.detect(&sc)?;
    let frame = decode_frame(
        &setup.rx,
        &det,
        &setup.receiver(&sc)?,
        &setup.constellation,
        mode,
    )?;
    let mut out = frame.evm_trace;
    for (sent, got) in setup.bits.iter().zip(&frame.bits) {
        let errors = sent.iter().zip(got).filter(|(a, b)| a != b).count();
        out.push(errors as f64 / sent.len().max(1) as f64);
    }
    Ok(out)
}

/// Data-cell SNR in dB for window positions 0..=2·CP, where CP is the ideal
/// position.
pub fn window_sweep_native(snr_db: f64, seed: u64) -> sphy::Result<Vec<f64>> {
    let sc = scenario(seed, Scenario::default().sources[1].cfo_hz)?;
    Ok(sweep_window(&sc, snr_db, 480, 0)?
        .points
        .iter()
        .map(|p| p.snr_db)
        .collect())
}

/// `[mean BER phycode, mean BER tpnc, ratio, sign-test p]` over `trials`.
pub fn compare_native(
    snr_db: f64,
    residual_cfo_hz: f64,
    payload_bits: usize,
    trials: u64,
    seed: u64,
) -> sphy::Result<Vec<f64>> {
    let sc = scenario(seed, residual_cfo_hz)?;
    let mut reports = Vec::new();
    // serial: no threads in the browser
    for t in 0..trials.clamp(1, MAX_TRIALS) {
        reports.extend(run_trial(&sc, t, snr_db, payload_bits, &DecoderMode::ALL)?);
    }
    let row = &compare_modes(&reports)?[0];
    Ok(vec![
        row.mean_ber_phycode,
        row.mean_ber_tpnc,
        row.ratio,
        row.sign_test_p,
    ])
}

#[wasm_bindgen]
pub fn frame_evm(
    mode: &str,
    snr_db: f64,
    residual_cfo_hz: f64,
    payload_bits: usize,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    frame_evm_native(mode, snr_db, residual_cfo_hz, payload_bits, seed).map_err(js)
}

#[wasm_bindgen]
pub fn window_sweep(snr_db: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    window_sweep_native(snr_db, seed).map_err(js)
}

#[wasm_bindgen]
pub fn compare(
    snr_db: f64,
    residual_cfo_hz: f64,
    payload_bits: usize,
    trials: u64,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    compare_native(snr_db, residual_cfo_hz, payload_bits, trials, seed).map_err(js)
}
