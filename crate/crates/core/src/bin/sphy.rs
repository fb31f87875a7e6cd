use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sphy::decoder::DecoderMode;
use sphy::harness::{
    build_trial, compare_modes, emit_csv, read_csv, reports_from_rows, run_scenario, summarize,
    sweep_window, trace_trial, write_metric_csv, write_rows, RunOptions, Scenario,
};
use sphy::iq::write_iq;
use sphy::Result;

#[derive(Parser)]
#[command(
    name = "sphy",
    version,
    about = "Superimposed OFDM simulator and joint decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecoderArg {
    Phycode,
    Tpnc,
    Both,
}

impl DecoderArg {
    fn modes(self) -> Vec<DecoderMode> {
        match self {
            DecoderArg::Phycode => vec![DecoderMode::PhyCode],
            DecoderArg::Tpnc => vec![DecoderMode::Tpnc],
            DecoderArg::Both => DecoderMode::ALL.to_vec(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every trial of a scenario and write per-source rows as CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV; stdout if omitted. A summary is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the scenario's base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        decoder: Option<DecoderArg>,
        /// Worker threads; 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long)]
        detect_threshold: Option<f64>,
        #[arg(long)]
        plateau_len: Option<usize>,
        /// Also dump the coarse metric and tracking state of trial 0 to
        /// `<prefix>.metric.csv` and `<prefix>.tracking.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Paired PhyCode/T-PNC statistics from a CSV written by `run`.
    Compare {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Write the transmitted streams and the received capture of trial 0.
    DumpIq {
        #[arg(long)]
        config: PathBuf,
        /// Files are `<prefix>.src<i>.iq` and `<prefix>.rx.iq`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Data-cell SNR as the FFT window slides across the cyclic prefix.
    SweepWindow {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20.0)]
        snr_db: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn summary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!("{stem}.summary.csv"))
}

fn first_cell(sc: &Scenario) -> (f64, usize) {
    (sc.snr_db[0], sc.payload_bits[0])
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            decoder,
            jobs,
            detect_threshold,
            plateau_len,
            trace,
        } => {
            let mut sc = Scenario::load(&config)?;
            if let Some(seed) = seed {
                sc.seed = seed;
            }
            if let Some(d) = decoder {
                sc.modes = d.modes();
            }
            if let Some(t) = detect_threshold {
                sc.detector.threshold = t;
            }
            if let Some(p) = plateau_len {
                sc.detector.plateau_len = p;
            }
            sc.validate()?;
            let reports = run_scenario(&sc, &RunOptions { jobs })?;
            match &out {
                Some(path) => {
                    emit_csv(&reports, path)?;
                    let file = BufWriter::new(File::create(summary_path(path))?);
                    write_rows(&summarize(&reports), file)?;
                }
                None => sphy::harness::write_csv_to(&reports, io::stdout().lock())?,
            }
            if let Some(prefix) = trace {
                let (snr, payload) = first_cell(&sc);
                let t = trace_trial(&sc, 0, snr, payload)?;
                write_metric_csv(
                    &t.metric,
                    File::create(with_suffix(&prefix, ".metric.csv"))?,
                )?;
                write_rows(
                    &t.tracking,
                    File::create(with_suffix(&prefix, ".tracking.csv"))?,
                )?;
            }
        }
        Command::Compare { input } => {
            let reports = reports_from_rows(&read_csv(&input)?);
            write_rows(&compare_modes(&reports)?, io::stdout().lock())?;
        }
        Command::DumpIq { config, out } => {
            let sc = Scenario::load(&config)?;
            let (snr, payload) = first_cell(&sc);
            let setup = build_trial(&sc, 0, snr, payload)?;
            for (i, stream) in setup.streams.iter().enumerate() {
                write_iq(with_suffix(&out, &format!(".src{i}.iq")), stream)?;
            }
            write_iq(with_suffix(&out, ".rx.iq"), &setup.rx)?;
        }
        Command::SweepWindow {
            config,
            snr_db,
            out,
        } => {
            let sc = Scenario::load(&config)?;
            let (_, payload) = first_cell(&sc);
            let sweep = sweep_window(&sc, snr_db, payload, 0)?;
            write_rows(&sweep.points, output(out.as_deref())?)?;
            eprintln!(
                "ideal {:.2} dB, front {:.2} dB, back {:.2} dB",
                sweep.ideal_db, sweep.front_db, sweep.back_db
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
