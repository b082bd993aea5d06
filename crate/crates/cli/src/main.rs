//! `tipcut`: run simulated clusters and inspect wire formats.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tipcut_core::storage::dump_wal;
use tipcut_core::tx_codec::{decode_transaction, encode_transaction, Transaction, TxFields};
use tipcut_sim::{run, RunOutput, Scenario};

const EXIT_CONFIG: u8 = 1;
const EXIT_VIOLATION: u8 = 2;

#[derive(Parser)]
#[command(name = "tipcut", version, about = "Simulated DAG-consensus cluster runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write metrics.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, env = "TIPCUT_SEED", default_value_t = 0)]
        seed: u64,
        /// Directory for metrics.json, metrics.txt and trace.jsonl.
        #[arg(long, env = "TIPCUT_OUT")]
        out: Option<PathBuf>,
        /// Also write the event trace.
        #[arg(long)]
        trace: bool,
        /// Run seeds `seed..seed+N` and report one line each.
        #[arg(long, value_name = "N")]
        sweep: Option<u64>,
    },
    /// Transaction payload codec.
    Tx {
        #[command(subcommand)]
        cmd: TxCmd,
    },
    /// List the records of a write-ahead log.
    WalDump { file: PathBuf },
}

#[derive(Subcommand)]
enum TxCmd {
    /// Hex payload to a field table.
    Decode { hex: String },
    /// Field table (TOML) to hex payload.
    Encode { file: PathBuf },
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run {
            scenario,
            seed,
            out,
            trace,
            sweep,
        } => run_cmd(&scenario, seed, out.as_deref(), trace, sweep),
        Cmd::Tx { cmd: TxCmd::Decode { hex } } => tx_decode(&hex),
        Cmd::Tx { cmd: TxCmd::Encode { file } } => tx_encode(&file),
        Cmd::WalDump { file } => wal_dump(&file),
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn run_cmd(path: &Path, seed: u64, out: Option<&Path>, trace: bool, sweep: Option<u64>) -> ExitCode {
    let sc = match Scenario::load(path) {
        Ok(sc) => sc,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let scenario_out = sc.output.dir.as_ref().map(|d| match &sc.base_dir {
        Some(base) => base.join(d),
        None => PathBuf::from(d),
    });
    let out = out.or(scenario_out.as_deref());
    let trace = trace || sc.output.trace;
    if let Some(count) = sweep {
        let mut bad = Vec::new();
        for s in seed..seed.saturating_add(count) {
            let r = match run(&sc, s) {
                Ok(r) => r,
                Err(e) => return fail(EXIT_CONFIG, e),
            };
            let m = &r.metrics;
            println!(
                "seed={s} slots={} latency_rt={:.3} view_changes={} halted={} violations={}",
                m.committed_slots,
                m.latency_mean_rt,
                m.view_changes,
                m.halted,
                m.violations.len()
            );
            if let Some(dir) = out {
                if let Err(e) = write_outputs(&dir.join(format!("seed-{s}")), &r, trace) {
                    return fail(EXIT_CONFIG, e);
                }
            }
            if !r.ok() {
                bad.push(s);
            }
        }
        if bad.is_empty() {
            return ExitCode::SUCCESS;
        }
        for s in &bad {
            eprintln!("invariant violation; reproduce with --seed {s}");
        }
        return ExitCode::from(EXIT_VIOLATION);
    }

    let r = match run(&sc, seed) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    print!("{}", r.metrics.table());
    if let Some(dir) = out {
        if let Err(e) = write_outputs(dir, &r, trace) {
            return fail(EXIT_CONFIG, e);
        }
    }
    if r.ok() {
        ExitCode::SUCCESS
    } else {
        for v in &r.metrics.violations {
            eprintln!("violation: {v}");
        }
        eprintln!("invariant violation; reproduce with --seed {seed}");
        ExitCode::from(EXIT_VIOLATION)
    }
}

fn write_outputs(dir: &Path, r: &RunOutput, trace: bool) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.json"), r.metrics.to_json())?;
    std::fs::write(dir.join("metrics.txt"), r.metrics.to_lines())?;
    if trace {
        std::fs::write(dir.join("trace.jsonl"), r.trace.to_jsonl())?;
    }
    Ok(())
}

fn tx_decode(text: &str) -> ExitCode {
    let text = text.trim();
    let bytes = match hex::decode(text.strip_prefix("0x").unwrap_or(text)) {
        Ok(b) => b,
        Err(e) => return fail(EXIT_CONFIG, format!("invalid hex: {e}")),
    };
    match decode_transaction(&bytes) {
        Ok(tx) => {
            print!("{}", toml::to_string(&TxFields::from(&tx)).expect("fields serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_CONFIG, e),
    }
}

fn tx_encode(path: &Path) -> ExitCode {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", path.display())),
    };
    let fields: TxFields = match toml::from_str(&text) {
        Ok(f) => f,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let bytes = Transaction::try_from(&fields)
        .map_err(|e| e.to_string())
        .and_then(|tx| encode_transaction(&tx).map_err(|e| e.to_string()));
    match bytes {
        Ok(b) => {
            println!("{}", hex::encode(b));
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_CONFIG, e),
    }
}

fn wal_dump(path: &Path) -> ExitCode {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", path.display())),
    };
    match dump_wal(&bytes) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_CONFIG, e),
    }
}
