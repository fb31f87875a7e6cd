//! End-to-end decoder behaviour over seeded trial sets.

use sphy::decoder::{build_criterion, decode_frame, DecoderMode};
use sphy::harness::{
    build_trial, compare_modes, run_scenario, run_trial, summarize, ChannelPreset, ChannelSpec,
    RunOptions, Scenario, SourceSpec, TrialReport,
};
use sphy::synchronizer::track_residual_cfo;

fn zero_offsets(n: usize) -> Vec<SourceSpec> {
    vec![SourceSpec::default(); n]
}

#[test]
fn both_modes_are_exact_without_offsets_or_noise() {
    let sc = Scenario {
        id: "still".into(),
        sources: zero_offsets(2),
        ..Scenario::default()
    };
    for t in 0..10 {
        for r in run_trial(&sc, t, f64::INFINITY, 2000, &DecoderMode::ALL).unwrap() {
            assert!(r.detected);
            assert_eq!(r.mean_ber(), 0.0, "{:?} trial {t}", r.mode);
        }
    }
}

/// Conventional one-user receiver: slice `y / c` to the nearest point.
#[test]
fn single_source_matches_a_plain_slicer() {
    let sc = Scenario {
        id: "single".into(),
        sources: vec![SourceSpec {
            cfo_hz: 300.0,
            coarse_cfo_hz: 4000.0,
            sto_samples: 2,
            ..SourceSpec::default()
        }],
        ..Scenario::default()
    };
    for t in 0..10 {
        let setup = build_trial(&sc, t, 12.0, 2000).unwrap();
        let det = setup.detect(&sc).unwrap();
        let rx = setup.receiver(&sc).unwrap();
        let joint = decode_frame(
            &setup.rx,
            &det,
            &rx,
            &setup.constellation,
            DecoderMode::PhyCode,
        )
        .unwrap();

        let cfg = &rx.config;
        let mut acq = rx.acquire(&setup.rx, &det).unwrap();
        let track = &mut acq.tracks[0];
        let mut bits = Vec::new();
        for s in 0..rx.layout.n_data_symbols {
            let y = rx
                .modem
                .demodulate_at(&setup.rx, acq.plan.common_start(rx.data_body(s)))
                .unwrap();
            track.state =
                track_residual_cfo(&y, &track.estimate, s, &track.state, cfg, &rx.tracking);
            let c = build_criterion(&track.estimate, &track.state, s, cfg).c;
            for &k in &cfg.data_subcarriers {
                let b = cfg.bin(k);
                bits.extend(
                    setup
                        .constellation
                        .bits_of_index(setup.constellation.nearest(y[b] / c[b])),
                );
            }
        }
        bits.truncate(rx.layout.payload_bits);
        assert_eq!(joint.bits[0], bits, "trial {t}");
    }
}

fn sweep(sc: &Scenario) -> Vec<TrialReport> {
    run_scenario(sc, &RunOptions::default()).unwrap()
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn ber_falls_with_snr_and_tracks_evm() {
    let sc = Scenario {
        id: "snr".into(),
        trials: 100,
        seed: 31,
        snr_db: vec![5.0, 10.0, 15.0, 20.0, 25.0],
        payload_bits: vec![480],
        ..Scenario::default()
    };
    let reports = sweep(&sc);
    let summary = summarize(&reports);
    for mode in DecoderMode::ALL {
        let bers: Vec<f64> = summary
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.mean_ber)
            .collect();
        println!("{mode}: {bers:?}");
        assert!(bers.windows(2).all(|w| w[1] <= w[0]), "{mode}: {bers:?}");
    }
    let ber: Vec<f64> = reports.iter().map(|r| r.mean_ber()).collect();
    let evm: Vec<f64> = reports.iter().map(|r| r.evm_pct).collect();
    let rho = pearson(&ranks(&evm), &ranks(&ber));
    println!("spearman {rho:.3}");
    assert!(rho > 0.5, "rho {rho}");
}

#[test]
fn phycode_is_never_worse_across_payload_lengths() {
    let sc = Scenario {
        id: "payload".into(),
        trials: 40,
        seed: 41,
        snr_db: vec![20.0],
        payload_bits: vec![48, 500, 2000, 4000],
        ..Scenario::default()
    };
    for row in compare_modes(&sweep(&sc)).unwrap() {
        println!(
            "{} bits: phycode {:.3e} tpnc {:.3e}",
            row.payload_bits, row.mean_ber_phycode, row.mean_ber_tpnc
        );
        assert!(row.mean_ber_phycode <= row.mean_ber_tpnc);
    }
}

#[test]
fn inferred_clock_offset_does_as_well_as_the_true_one() {
    let base = Scenario {
        id: "gamma".into(),
        trials: 50,
        seed: 51,
        snr_db: vec![25.0],
        payload_bits: vec![2000],
        modes: vec![DecoderMode::PhyCode],
        ..Scenario::default()
    };
    let mut oracle = base.clone();
    oracle.tracking.oracle_sfo = true;
    let evm = |sc: &Scenario| summarize(&sweep(sc))[0].mean_evm_pct;
    let (inferred, known) = (evm(&base), evm(&oracle));
    println!("EVM inferred {inferred:.3}% oracle {known:.3}%");
    assert!((inferred - known).abs() <= 0.05 * known);
}

#[test]
fn periodic_training_keeps_long_frames_clean() {
    let sc = Scenario {
        id: "retrain".into(),
        trials: 5,
        snr_db: vec![f64::INFINITY],
        payload_bits: vec![4000],
        channel: ChannelSpec {
            preset: ChannelPreset::Los,
            taps: vec![],
        },
        ..Scenario::default()
    };
    let mut retrain = sc.clone();
    retrain.tracking.reestimation_interval = 10;
    for r in sweep(&retrain) {
        assert!(r.detected);
        if r.mode == DecoderMode::PhyCode {
            assert_eq!(r.mean_ber(), 0.0);
        }
    }
    let layout = build_trial(&retrain, 0, f64::INFINITY, 4000)
        .unwrap()
        .layout;
    let plain = build_trial(&sc, 0, f64::INFINITY, 4000).unwrap().layout;
    assert!(layout.total_len() > plain.total_len());
}

#[test]
fn out_of_range_offsets_degrade_without_failing() {
    let wild = vec![
        SourceSpec {
            cfo_hz: 20_000.0,
            sto_samples: 40,
            arrival_offset: 30,
            sfo: Some(5e-4),
            ..SourceSpec::default()
        },
        SourceSpec {
            cfo_hz: -15_000.0,
            sto_samples: -25,
            gain_db: -20.0,
            ..SourceSpec::default()
        },
    ];
    let sc = Scenario {
        id: "wild".into(),
        trials: 5,
        sources: wild,
        ..Scenario::default()
    };
    let reports = sweep(&sc);
    let cells = sc.snr_db.len() * sc.payload_bits.len() * sc.modes.len() * sc.trials as usize;
    assert_eq!(reports.len(), cells);
    for r in &reports {
        assert!(r.ber.iter().all(|b| (0.0..=1.0).contains(b)));
        assert!(r.evm_pct >= 0.0);
    }
}
