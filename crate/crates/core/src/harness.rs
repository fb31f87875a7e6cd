//! Monte-Carlo trials of the full transmit, channel and receive chain.
//!
//! A [`Scenario`] fixes the sources, channel and grids of SNR and payload
//! length. Trial `t` draws everything random from a generator seeded with
//! `seed + t`, so the same trial index sees the same payload, multipath and
//! noise in every SNR cell and in both decoder modes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::channel::{impair, superimpose, MultipathModel, NoiseModel, SourceProfile, Tap};
use crate::decoder::{decode_frame, DecoderMode, TrackingRow};
use crate::detector::{auto_correlate, detect, DetectionResult, DetectorConfig};
use crate::error::{Error, Result};
use crate::frame::{
    build_layout, map_bits, Constellation, FrameLayout, Modulation, OfdmConfig, SymbolGrid,
};
use crate::synchronizer::{Receiver, TrackingConfig};
use crate::transmitter::{
    ofdm_modulate, precompensate, CalibrationEntry, CalibrationTable, DeviceId, Modem,
};

/// Device id of the receiver in the calibration table.
pub const RX_DEVICE: DeviceId = 0xFFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelPreset {
    Identity,
    Los,
    Nlos,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapSpec {
    pub delay: usize,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSpec {
    pub preset: ChannelPreset,
    /// Only read for the `custom` preset.
    pub taps: Vec<TapSpec>,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        Self {
            preset: ChannelPreset::Nlos,
            taps: Vec::new(),
        }
    }
}

impl ChannelSpec {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MultipathModel> {
        match self.preset {
            ChannelPreset::Identity => Ok(MultipathModel::identity()),
            ChannelPreset::Los => Ok(MultipathModel::los(rng)),
            ChannelPreset::Nlos => Ok(MultipathModel::nlos(rng)),
            ChannelPreset::Custom => MultipathModel::new(
                self.taps
                    .iter()
                    .map(|t| Tap {
                        delay: t.delay,
                        gain: Complex64::new(t.re, t.im),
                    })
                    .collect(),
            ),
        }
    }
}

/// One transmitter as configured in a scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSpec {
    /// CFO left after calibration, Hz.
    pub cfo_hz: f64,
    /// CFO known from the calibration table and removed at the transmitter, Hz.
    pub coarse_cfo_hz: f64,
    /// Sampling-clock error ratio. Defaults to the oscillator's CFO ratio.
    pub sfo: Option<f64>,
    pub sto_samples: i64,
    pub arrival_offset: i64,
    pub gain_db: f64,
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self {
            cfo_hz: 0.0,
            coarse_cfo_hz: 0.0,
            sfo: None,
            sto_samples: 0,
            arrival_offset: 0,
            gain_db: 0.0,
        }
    }
}

impl SourceSpec {
    pub fn total_cfo(&self) -> f64 {
        self.coarse_cfo_hz + self.cfo_hz
    }

    pub fn sfo_ratio(&self, carrier_freq: f64) -> f64 {
        self.sfo.unwrap_or(self.total_cfo() / carrier_freq)
    }

    pub fn profile(&self, carrier_freq: f64) -> SourceProfile {
        SourceProfile {
            cfo: self.total_cfo(),
            sfo_ratio: self.sfo_ratio(carrier_freq),
            sto: self.sto_samples,
            arrival_offset: self.arrival_offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingSpec {
    pub alpha: f64,
    pub pilot_floor: f64,
    /// Insert training symbols every this many data symbols; 0 disables.
    pub reestimation_interval: usize,
    /// Give the receiver the true SFO instead of inferring it.
    pub oracle_sfo: bool,
}

impl Default for TrackingSpec {
    fn default() -> Self {
        let t = TrackingConfig::default();
        Self {
            alpha: t.alpha,
            pilot_floor: t.pilot_floor,
            reestimation_interval: 0,
            oracle_sfo: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub trials: u64,
    pub seed: u64,
    pub snr_db: Vec<f64>,
    pub payload_bits: Vec<usize>,
    pub modes: Vec<DecoderMode>,
    pub modulation: Modulation,
    /// Noise-only samples before and after the frame.
    pub idle_samples: usize,
    pub channel: ChannelSpec,
    /// Defaults to the standard numerology with one pilot pair per source.
    pub ofdm: Option<OfdmConfig>,
    pub detector: DetectorConfig,
    pub tracking: TrackingSpec,
    pub sources: Vec<SourceSpec>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            id: "default".into(),
            trials: 20,
            seed: 1,
            snr_db: vec![10.0, 15.0, 20.0, 25.0],
            payload_bits: vec![48, 2000],
            modes: DecoderMode::ALL.to_vec(),
            modulation: Modulation::Bpsk,
            idle_samples: 200,
            channel: ChannelSpec::default(),
            ofdm: None,
            detector: DetectorConfig::default(),
            tracking: TrackingSpec::default(),
            sources: vec![
                SourceSpec {
                    cfo_hz: 500.0,
                    coarse_cfo_hz: 12_000.0,
                    ..SourceSpec::default()
                },
                SourceSpec {
                    cfo_hz: -500.0,
                    coarse_cfo_hz: -8_000.0,
                    arrival_offset: 3,
                    gain_db: -6.0,
                    ..SourceSpec::default()
                },
            ],
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let sc: Scenario = toml::from_str(text)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn ofdm_config(&self) -> OfdmConfig {
        self.ofdm
            .clone()
            .unwrap_or_else(|| OfdmConfig::with_sources(self.sources.len()))
    }

    pub fn tracking_config(&self) -> TrackingConfig {
        let carrier = self.ofdm_config().carrier_freq;
        TrackingConfig {
            alpha: self.tracking.alpha,
            pilot_floor: self.tracking.pilot_floor,
            sfo_override: self
                .tracking
                .oracle_sfo
                .then(|| self.sources.iter().map(|s| s.sfo_ratio(carrier)).collect()),
        }
    }

    /// Reject anything that would fail later, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains([',', '"', '\n']) {
            return Err(Error::config(
                "id",
                "must be non-empty and free of commas, quotes and newlines",
            ));
        }
        if self.trials == 0 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        if self.snr_db.is_empty()
            || self
                .snr_db
                .iter()
                .any(|s| s.is_nan() || *s == f64::NEG_INFINITY)
        {
            return Err(Error::config(
                "snr_db",
                "needs at least one value; each a number or inf",
            ));
        }
        if self.payload_bits.is_empty() || self.payload_bits.contains(&0) {
            return Err(Error::config(
                "payload_bits",
                "needs at least one positive length",
            ));
        }
        if self.modes.is_empty() {
            return Err(Error::config("modes", "needs at least one decoder mode"));
        }
        if self.sources.is_empty() {
            return Err(Error::config("sources", "needs at least one source"));
        }
        let ofdm = self.ofdm_config();
        ofdm.validate()?;
        if self.sources.len() > ofdm.pilot_map.len() {
            return Err(Error::TooManySources {
                requested: self.sources.len(),
                available: ofdm.pilot_map.len(),
            });
        }
        for (i, s) in self.sources.iter().enumerate() {
            let field = |f: &str| format!("sources[{i}].{f}");
            for (name, v) in [
                ("cfo_hz", s.cfo_hz),
                ("coarse_cfo_hz", s.coarse_cfo_hz),
                ("gain_db", s.gain_db),
            ] {
                if !v.is_finite() {
                    return Err(Error::config(field(name), "must be finite"));
                }
            }
            s.profile(ofdm.carrier_freq)
                .validate()
                .map_err(|_| Error::config(field("sfo"), "|sfo| must be below 1e-3"))?;
            if self.idle_samples as i64 + s.arrival_offset < 0 {
                return Err(Error::config(
                    field("arrival_offset"),
                    "would start before the capture; raise idle_samples",
                ));
            }
        }
        if self.channel.preset == ChannelPreset::Custom {
            self.channel.draw(&mut ChaCha8Rng::seed_from_u64(0))?;
        }
        self.detector.validate()?;
        self.tracking_config().validate()?;
        Ok(())
    }
}

/// Ground truth of one generated trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    /// Sample of `rx` where each source's frame (its STS) begins.
    pub origins: Vec<i64>,
    /// Where each source's long training slot starts via its strongest tap.
    pub fine_starts: Vec<i64>,
    /// Earliest frame start.
    pub coarse_start: i64,
}

#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub config: OfdmConfig,
    pub layout: FrameLayout,
    pub constellation: Constellation,
    pub bits: Vec<Vec<u8>>,
    pub grids: Vec<SymbolGrid>,
    /// Per-source channel, gain included.
    pub multipath: Vec<MultipathModel>,
    /// Each source's impaired stream before superposition.
    pub streams: Vec<Vec<Complex64>>,
    pub rx: Vec<Complex64>,
    pub signal_power: f64,
    pub noise_power: f64,
    pub truth: Truth,
}

/// Generate the received capture of trial `trial`.
pub fn build_trial(
    sc: &Scenario,
    trial: u64,
    snr_db: f64,
    payload_bits: usize,
) -> Result<TrialSetup> {
    let config = sc.ofdm_config();
    let constellation = Constellation::new(sc.modulation);
    let n_src = sc.sources.len();
    let interval =
        (sc.tracking.reestimation_interval > 0).then_some(sc.tracking.reestimation_interval);
    let layout =
        build_layout(&config, n_src, payload_bits, &constellation)?.with_reestimation(interval);
    let modem = Modem::new(config.n_subcarriers);
    let t = config.sample_period();
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed.wrapping_add(trial));

    let bits: Vec<Vec<u8>> = (0..n_src)
        .map(|_| {
            (0..payload_bits)
                .map(|_| rng.random_range(0..=1u8))
                .collect()
        })
        .collect();
    let multipath: Vec<MultipathModel> = sc
        .sources
        .iter()
        .map(|s| {
            Ok(sc
                .channel
                .draw(&mut rng)?
                .scaled(10f64.powf(s.gain_db / 20.0)))
        })
        .collect::<Result<_>>()?;
    let noise_seed = rng.next_u64();

    let mut table = CalibrationTable::new();
    let mut grids = Vec::with_capacity(n_src);
    let mut streams = Vec::with_capacity(n_src);
    let mut placed = Vec::with_capacity(n_src);
    let mut origins = Vec::with_capacity(n_src);
    for (i, spec) in sc.sources.iter().enumerate() {
        table.insert(
            i as DeviceId,
            RX_DEVICE,
            CalibrationEntry {
                coarse_cfo_hz: spec.coarse_cfo_hz,
                sto_samples: 0,
            },
        )?;
        let grid = map_bits(&bits[i], &constellation, &config, &layout, i)?;
        let tx = precompensate(
            &ofdm_modulate(&grid, &config, &layout, &modem)?,
            &table,
            RX_DEVICE,
            t,
        )?;
        let profile = spec.profile(config.carrier_freq);
        let stream = impair(&tx.samples, &profile, &multipath[i], t);
        let offset = sc.idle_samples as i64 + spec.arrival_offset + tx.timing_offset;
        // a negative STO drops leading samples, so the stream itself still
        // starts at `offset`
        origins.push(offset + spec.sto_samples);
        placed.push((stream.clone(), offset));
        grids.push(grid);
        streams.push(stream);
    }
    let received = superimpose(
        &placed,
        &NoiseModel {
            snr_db,
            rng_seed: noise_seed,
        },
    )?;
    let mut rx = received.samples;
    let sigma = (received.noise_power / 2.0).sqrt();
    let mut tail_rng = ChaCha8Rng::seed_from_u64(noise_seed ^ 0x5EED_7A11);
    for _ in 0..sc.idle_samples {
        let re: f64 = tail_rng.sample(StandardNormal);
        let im: f64 = tail_rng.sample(StandardNormal);
        rx.push(Complex64::new(re, im) * sigma);
    }

    let fine_starts = origins
        .iter()
        .zip(&multipath)
        .enumerate()
        .map(|(i, (o, mp))| o + layout.lts_slots[i].start as i64 + mp.strongest_delay() as i64)
        .collect();
    let coarse_start = origins.iter().copied().min().unwrap_or(0);
    Ok(TrialSetup {
        config,
        layout,
        constellation,
        bits,
        grids,
        multipath,
        streams,
        rx,
        signal_power: received.signal_power,
        noise_power: received.noise_power,
        truth: Truth {
            origins,
            fine_starts,
            coarse_start,
        },
    })
}

impl TrialSetup {
    pub fn receiver(&self, sc: &Scenario) -> Result<Receiver> {
        Receiver::new(
            self.config.clone(),
            self.layout.clone(),
            sc.sources.iter().map(|s| s.coarse_cfo_hz).collect(),
            sc.tracking_config(),
        )
    }

    pub fn detect(&self, sc: &Scenario) -> Result<DetectionResult> {
        detect(
            &self.rx,
            &self.config,
            &self.layout,
            &Modem::new(self.config.n_subcarriers),
            &sc.detector,
        )
    }

    /// Detected minus true fine start, per source.
    pub fn start_errors(&self, det: &DetectionResult) -> Vec<Option<i64>> {
        self.truth
            .fine_starts
            .iter()
            .enumerate()
            .map(|(i, t)| det.per_source_start.get(&i).map(|&d| d as i64 - t))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub scenario_id: String,
    pub trial: u64,
    pub mode: DecoderMode,
    pub snr_db: f64,
    pub payload_bits: usize,
    pub ber: Vec<f64>,
    /// Mean EVM over the frame, percent; infinite when nothing was decoded.
    pub evm_pct: f64,
    pub detected: bool,
    pub start_err: Vec<Option<i64>>,
    pub padding_bits: usize,
}

impl TrialReport {
    pub fn mean_ber(&self) -> f64 {
        self.ber.iter().sum::<f64>() / self.ber.len().max(1) as f64
    }
}

fn bit_error_rate(sent: &[u8], got: &[u8]) -> f64 {
    if sent.is_empty() {
        return 0.0;
    }
    let errors = sent
        .iter()
        .enumerate()
        .filter(|&(i, b)| got.get(i) != Some(b))
        .count();
    errors as f64 / sent.len() as f64
}

/// Run one trial in each of `modes`. Detection and decoding failures end up
/// in the reports; only configuration errors are returned.
pub fn run_trial(
    sc: &Scenario,
    trial: u64,
    snr_db: f64,
    payload_bits: usize,
    modes: &[DecoderMode],
) -> Result<Vec<TrialReport>> {
    let setup = build_trial(sc, trial, snr_db, payload_bits)?;
    let receiver = setup.receiver(sc)?;
    let n_src = sc.sources.len();
    let detection = setup.detect(sc);
    let start_err = match &detection {
        Ok(d) => setup.start_errors(d),
        Err(_) => vec![None; n_src],
    };
    Ok(modes
        .iter()
        .map(|&mode| {
            let base = TrialReport {
                scenario_id: sc.id.clone(),
                trial,
                mode,
                snr_db,
                payload_bits,
                ber: vec![1.0; n_src],
                evm_pct: f64::INFINITY,
                detected: detection.is_ok(),
                start_err: start_err.clone(),
                padding_bits: setup.layout.padding_bits,
            };
            let Ok(det) = &detection else { return base };
            match decode_frame(&setup.rx, det, &receiver, &setup.constellation, mode) {
                Ok(frame) => TrialReport {
                    ber: setup
                        .bits
                        .iter()
                        .zip(&frame.bits)
                        .map(|(s, g)| bit_error_rate(s, g))
                        .collect(),
                    evm_pct: frame.evm_pct,
                    ..base
                },
                Err(_) => base,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
}

/// Run the full grid: payload length, then SNR, then trial, then mode.
pub fn run_scenario(sc: &Scenario, opts: &RunOptions) -> Result<Vec<TrialReport>> {
    sc.validate()?;
    let cells: Vec<(usize, f64, u64)> = sc
        .payload_bits
        .iter()
        .flat_map(|&p| {
            sc.snr_db
                .iter()
                .flat_map(move |&snr| (0..sc.trials).map(move |t| (p, snr, t)))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    let per_cell: Vec<Result<Vec<TrialReport>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(p, snr, t)| run_trial(sc, t, snr, p, &sc.modes))
            .collect()
    });
    let mut out = Vec::with_capacity(cells.len() * sc.modes.len());
    for r in per_cell {
        out.extend(r?);
    }
    Ok(out)
}

/// One CSV line: a report seen from one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub scenario_id: String,
    pub trial: u64,
    pub mode: DecoderMode,
    pub source_id: usize,
    pub ber: f64,
    pub evm_pct: f64,
    pub detected: bool,
    pub start_err: Option<i64>,
    pub snr_db: f64,
    pub payload_bits: usize,
}

pub fn csv_rows(reports: &[TrialReport]) -> Vec<CsvRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.ber.iter().enumerate().map(move |(i, &ber)| CsvRow {
                scenario_id: r.scenario_id.clone(),
                trial: r.trial,
                mode: r.mode,
                source_id: i,
                ber,
                evm_pct: r.evm_pct,
                detected: r.detected,
                start_err: r.start_err.get(i).copied().flatten(),
                snr_db: r.snr_db,
                payload_bits: r.payload_bits,
            })
        })
        .collect()
}

pub fn write_csv_to<W: Write>(reports: &[TrialReport], writer: W) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::NoReports);
    }
    let mut w = csv::Writer::from_writer(writer);
    for row in csv_rows(reports) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Header plus one row per report and source.
pub fn emit_csv(reports: &[TrialReport], path: impl AsRef<Path>) -> Result<()> {
    write_csv_to(reports, File::create(path)?)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Regroup CSV rows into reports. Padding is not part of the CSV and comes
/// back as zero.
pub fn reports_from_rows(rows: &[CsvRow]) -> Vec<TrialReport> {
    let mut out: Vec<TrialReport> = Vec::new();
    let mut index: BTreeMap<(String, u64, DecoderMode, u64, usize), usize> = BTreeMap::new();
    for row in rows {
        let key = (
            row.scenario_id.clone(),
            row.trial,
            row.mode,
            row.snr_db.to_bits(),
            row.payload_bits,
        );
        let slot = *index.entry(key).or_insert_with(|| {
            out.push(TrialReport {
                scenario_id: row.scenario_id.clone(),
                trial: row.trial,
                mode: row.mode,
                snr_db: row.snr_db,
                payload_bits: row.payload_bits,
                ber: Vec::new(),
                evm_pct: row.evm_pct,
                detected: row.detected,
                start_err: Vec::new(),
                padding_bits: 0,
            });
            out.len() - 1
        });
        let r = &mut out[slot];
        if r.ber.len() <= row.source_id {
            r.ber.resize(row.source_id + 1, 1.0);
            r.start_err.resize(row.source_id + 1, None);
        }
        r.ber[row.source_id] = row.ber;
        r.start_err[row.source_id] = row.start_err;
    }
    out
}

/// Aggregate of one (mode, SNR, payload) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario_id: String,
    pub mode: DecoderMode,
    pub snr_db: f64,
    pub payload_bits: usize,
    pub trials: usize,
    pub mean_ber: f64,
    /// Mean over trials that decoded; infinite if none did.
    pub mean_evm_pct: f64,
    pub detection_rate: f64,
    pub padding_bits: usize,
}

type CellKey = (String, u64, usize);

fn cell_key(r: &TrialReport) -> CellKey {
    (r.scenario_id.clone(), r.snr_db.to_bits(), r.payload_bits)
}

/// Per-cell means, in the order the cells first appear. Sums run in trial
/// order so the result does not depend on the order of `reports`.
pub fn summarize(reports: &[TrialReport]) -> Vec<SummaryRow> {
    let mut order: Vec<(CellKey, DecoderMode)> = Vec::new();
    let mut groups: BTreeMap<(CellKey, DecoderMode), Vec<&TrialReport>> = BTreeMap::new();
    for r in reports {
        let key = (cell_key(r), r.mode);
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    for g in groups.values_mut() {
        g.sort_by_key(|r| r.trial);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let n = g.len() as f64;
            let decoded: Vec<f64> = g
                .iter()
                .map(|r| r.evm_pct)
                .filter(|e| e.is_finite())
                .collect();
            SummaryRow {
                scenario_id: g[0].scenario_id.clone(),
                mode: g[0].mode,
                snr_db: g[0].snr_db,
                payload_bits: g[0].payload_bits,
                trials: g.len(),
                mean_ber: g.iter().map(|r| r.mean_ber()).sum::<f64>() / n,
                mean_evm_pct: if decoded.is_empty() {
                    f64::INFINITY
                } else {
                    decoded.iter().sum::<f64>() / decoded.len() as f64
                },
                detection_rate: g.iter().filter(|r| r.detected).count() as f64 / n,
                padding_bits: g[0].padding_bits,
            }
        })
        .collect()
}

pub fn write_rows<T: Serialize, W: Write>(rows: &[T], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Paired comparison of the two decoders in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scenario_id: String,
    pub snr_db: f64,
    pub payload_bits: usize,
    pub trials: usize,
    pub mean_ber_phycode: f64,
    pub mean_ber_tpnc: f64,
    /// `tpnc / phycode`; 1.0 when both are zero.
    pub ratio: f64,
    /// Trials where PhyCode had strictly fewer errors.
    pub phycode_wins: usize,
    pub tpnc_wins: usize,
    /// Two-sided sign test over the untied pairs.
    pub sign_test_p: f64,
}

/// Two-sided sign-test p-value for `wins` successes out of `n` untied pairs.
pub fn sign_test(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(n - wins) as u64;
    let dist = Binomial::new(0.5, n as u64).expect("p = 0.5 is a valid probability");
    (2.0 * dist.cdf(k)).min(1.0)
}

pub fn ber_ratio(tpnc: f64, phycode: f64) -> f64 {
    if tpnc == 0.0 && phycode == 0.0 {
        1.0
    } else {
        tpnc / phycode
    }
}

pub fn compare_modes(reports: &[TrialReport]) -> Result<Vec<ComparisonRow>> {
    if reports.is_empty() {
        return Err(Error::NoReports);
    }
    let mut order: Vec<CellKey> = Vec::new();
    type Pair = (Option<f64>, Option<f64>);
    let mut cells: BTreeMap<CellKey, BTreeMap<u64, Pair>> = BTreeMap::new();
    for r in reports {
        let key = cell_key(r);
        let trials = cells.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            BTreeMap::new()
        });
        let pair = trials.entry(r.trial).or_insert((None, None));
        match r.mode {
            DecoderMode::PhyCode => pair.0 = Some(r.mean_ber()),
            DecoderMode::Tpnc => pair.1 = Some(r.mean_ber()),
        }
    }
    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let trials = &cells[&key];
        let mut p_sum = 0.0;
        let mut t_sum = 0.0;
        let mut p_wins = 0;
        let mut t_wins = 0;
        for (&trial, pair) in trials {
            let (p, t) = match pair {
                (Some(p), Some(t)) => (*p, *t),
                (None, _) | (_, None) => {
                    return Err(Error::UnpairedTrial {
                        scenario: key.0.clone(),
                        trial,
                        missing: if pair.0.is_none() { "phycode" } else { "tpnc" }.into(),
                    })
                }
            };
            p_sum += p;
            t_sum += t;
            if p < t {
                p_wins += 1;
            } else if t < p {
                t_wins += 1;
            }
        }
        let n = trials.len() as f64;
        let (mp, mt) = (p_sum / n, t_sum / n);
        out.push(ComparisonRow {
            scenario_id: key.0.clone(),
            snr_db: f64::from_bits(key.1),
            payload_bits: key.2,
            trials: trials.len(),
            mean_ber_phycode: mp,
            mean_ber_tpnc: mt,
            ratio: ber_ratio(mt, mp),
            phycode_wins: p_wins,
            tpnc_wins: t_wins,
            sign_test_p: sign_test(p_wins, p_wins + t_wins),
        })
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowRegion {
    Front,
    Ideal,
    Back,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// FFT window start relative to the earliest source's CP start.
    pub position: usize,
    pub region: WindowRegion,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSweep {
    pub points: Vec<SweepPoint>,
    pub ideal_db: f64,
    /// Mean over front positions, dB.
    pub front_db: f64,
    /// Mean over back positions, dB.
    pub back_db: f64,
}

/// SNR of the data cells as the FFT window slides from the start of the
/// earliest source's CP (front contact) through its body start (ideal) to a
/// full CP length late (back contact).
///
/// Frequency and clock offsets are switched off so only timing matters. Each
/// source's contribution is reconstructed from its true channel and the phase
/// ramp of the window position; the distortion left over is measured on the
/// noiseless capture and added to the noise power of the requested SNR.
pub fn sweep_window(
    sc: &Scenario,
    snr_db: f64,
    payload_bits: usize,
    trial: u64,
) -> Result<WindowSweep> {
    let mut timing_only = sc.clone();
    for s in &mut timing_only.sources {
        s.cfo_hz = 0.0;
        s.coarse_cfo_hz = 0.0;
        s.sfo = Some(0.0);
    }
    timing_only.validate()?;
    let setup = build_trial(&timing_only, trial, f64::INFINITY, payload_bits)?;
    let cfg = &setup.config;
    let layout = &setup.layout;
    let n = cfg.n_subcarriers;
    let cp = cfg.cp_len;
    let noise_power = if snr_db.is_finite() {
        setup.signal_power / 10f64.powf(snr_db / 10.0)
    } else {
        0.0
    };
    let modem = Modem::new(n);
    let earliest = setup.truth.origins.iter().copied().min().unwrap_or(0);
    let responses: Vec<Vec<Complex64>> = setup
        .multipath
        .iter()
        .map(|mp| {
            (0..n)
                .map(|b| mp.frequency_response(cfg.subcarrier(b), n))
                .collect()
        })
        .collect();

    let mut points = Vec::with_capacity(2 * cp + 1);
    for p in 0..=2 * cp {
        let mut sig = 0.0;
        let mut dist = 0.0;
        let mut cells = 0usize;
        for s in 0..layout.n_data_symbols {
            let start = earliest + (layout.data_symbol_start(s) + p) as i64;
            let y = modem.demodulate_at(&setup.rx, start)?;
            for &k in &cfg.data_subcarriers {
                let b = cfg.bin(k);
                let expected: Complex64 = (0..setup.grids.len())
                    .map(|i| {
                        let early = setup.truth.origins[i]
                            + (layout.data_symbol_start(s) + cp) as i64
                            - start;
                        let ramp =
                            2.0 * std::f64::consts::PI * f64::from(k) * early as f64 / n as f64;
                        responses[i][b]
                            * setup.grids[i].symbols[s][b]
                            * Complex64::from_polar(1.0, ramp)
                    })
                    .sum();
                sig += expected.norm_sqr();
                dist += (y[b] - expected).norm_sqr();
                cells += 1;
            }
        }
        let c = cells.max(1) as f64;
        let snr = 10.0 * ((sig / c) / (dist / c + noise_power)).log10();
        let region = match p.cmp(&cp) {
            std::cmp::Ordering::Less => WindowRegion::Front,
            std::cmp::Ordering::Equal => WindowRegion::Ideal,
            std::cmp::Ordering::Greater => WindowRegion::Back,
        };
        points.push(SweepPoint {
            position: p,
            region,
            snr_db: snr,
        });
    }
    let mean = |r: WindowRegion| {
        let v: Vec<f64> = points
            .iter()
            .filter(|x| x.region == r)
            .map(|x| x.snr_db)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    Ok(WindowSweep {
        ideal_db: mean(WindowRegion::Ideal),
        front_db: mean(WindowRegion::Front),
        back_db: mean(WindowRegion::Back),
        points,
    })
}

/// Detection metric and tracking trace of a single trial.
pub struct TrialTrace {
    pub metric: Vec<f64>,
    pub tracking: Vec<TrackingRow>,
}

pub fn trace_trial(
    sc: &Scenario,
    trial: u64,
    snr_db: f64,
    payload_bits: usize,
) -> Result<TrialTrace> {
    let setup = build_trial(sc, trial, snr_db, payload_bits)?;
    let scan = auto_correlate(
        &setup.rx,
        setup.layout.sts_period,
        sc.detector.window,
        sc.detector.threshold,
        sc.detector.plateau_len,
    )?;
    let tracking = match setup.detect(sc) {
        Ok(det) => decode_frame(
            &setup.rx,
            &det,
            &setup.receiver(sc)?,
            &setup.constellation,
            DecoderMode::PhyCode,
        )
        .map(|f| f.tracking)
        .unwrap_or_default(),
        Err(_) => Vec::new(),
    };
    Ok(TrialTrace {
        metric: scan.metric,
        tracking,
    })
}

#[derive(Serialize)]
struct MetricRow {
    sample_index: usize,
    metric: f64,
}

pub fn write_metric_csv<W: Write>(metric: &[f64], writer: W) -> Result<()> {
    let rows: Vec<MetricRow> = metric
        .iter()
        .enumerate()
        .map(|(sample_index, &metric)| MetricRow {
            sample_index,
            metric,
        })
        .collect();
    write_rows(&rows, writer)
}
