use num_complex::Complex64;

use sphy::channel::apply_cfo;
use sphy::frame::{build_layout, map_bits, Constellation, Modulation, OfdmConfig};
use sphy::transmitter::{
    ofdm_modulate, precompensate, CalibrationEntry, CalibrationTable, Modem, TxFrame,
};

const RX: u32 = 9;

fn frames() -> (OfdmConfig, Modem, Vec<TxFrame>, usize) {
    let cfg = OfdmConfig::default();
    let k = Constellation::new(Modulation::Qpsk);
    let layout = build_layout(&cfg, 2, 400, &k).unwrap();
    let modem = Modem::new(cfg.n_subcarriers);
    let bits: Vec<u8> = (0..400).map(|i| ((i * 7 + 3) % 5 % 2) as u8).collect();
    let frames = (0..2)
        .map(|i| {
            ofdm_modulate(
                &map_bits(&bits, &k, &cfg, &layout, i).unwrap(),
                &cfg,
                &layout,
                &modem,
            )
            .unwrap()
        })
        .collect();
    let body = layout.data_symbol_start(0) + cfg.cp_len;
    (cfg, modem, frames, body)
}

fn table(cfo: [f64; 2]) -> CalibrationTable {
    let mut t = CalibrationTable::new();
    for (dev, f) in cfo.into_iter().enumerate() {
        t.insert(
            dev as u32,
            RX,
            CalibrationEntry {
                coarse_cfo_hz: f,
                sto_samples: 0,
            },
        )
        .unwrap();
    }
    t
}

fn worst_grid_error(
    cfg: &OfdmConfig,
    modem: &Modem,
    a: &[Complex64],
    b: &[Complex64],
    body: usize,
) -> f64 {
    let n = cfg.n_subcarriers;
    let (ya, yb) = (
        modem.demodulate(&a[body..body + n]),
        modem.demodulate(&b[body..body + n]),
    );
    ya.iter()
        .zip(&yb)
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

#[test]
fn channel_rotation_cancels_the_precompensation() {
    let (cfg, modem, frames, body) = frames();
    let t = table([2500.0, -7300.0]);
    for (i, f) in frames.iter().enumerate() {
        let pre = precompensate(f, &t, RX, cfg.sample_period()).unwrap();
        let coarse = [2500.0, -7300.0][i];
        let rx = apply_cfo(&pre.samples, coarse, cfg.sample_period());
        assert!(worst_grid_error(&cfg, &modem, &rx, &f.samples, body) < 1e-9);
    }
}

#[test]
fn swapped_tables_leave_a_rotation_behind() {
    let (cfg, modem, frames, body) = frames();
    let t = table([1000.0, 1100.0]);
    let f = &frames[0];
    let own = precompensate(f, &t, RX, cfg.sample_period()).unwrap();
    let other = precompensate(
        &TxFrame {
            source_id: 1,
            ..f.clone()
        },
        &t,
        RX,
        cfg.sample_period(),
    )
    .unwrap();
    assert_ne!(own.samples, other.samples);
    // the channel applies device 0's offset to both
    let rx = apply_cfo(&other.samples, 1000.0, cfg.sample_period());
    assert!(worst_grid_error(&cfg, &modem, &rx, &f.samples, body) > 1e-2);
}
