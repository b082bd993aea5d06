use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tipcut_core::state_machine::Location;
use tipcut_core::storage::{Durability, FlatStore};
use tipcut_core::types::{u64_to_word, Address, Word};

fn tipcut(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tipcut"))
        .args(args)
        .env_remove("TIPCUT_SEED")
        .env_remove("TIPCUT_OUT")
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn metric(dir: &Path, key: &str) -> String {
    let text = std::fs::read_to_string(dir.join("metrics.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing"))
        .to_string()
}

#[test]
fn fault_free_run_writes_metrics_and_trace() {
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().to_str().unwrap();
    let o = tipcut(&["run", "--scenario", &scenario("fault-free.toml"), "--seed", "3", "--out", dir, "--trace"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rt: f64 = metric(out.path(), "latency_mean_rt").parse().unwrap();
    assert!((rt - 1.5).abs() <= 0.1, "{rt}");
    assert!(out.path().join("metrics.json").exists());
    let trace = std::fs::read_to_string(out.path().join("trace.jsonl")).unwrap();
    assert!(trace.lines().count() > 100);
}

#[test]
fn seed_and_out_come_from_environment() {
    let out = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tipcut"))
        .args(["run", "--scenario", &scenario("fault-free.toml")])
        .env("TIPCUT_SEED", "11")
        .env("TIPCUT_OUT", out.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(metric(out.path(), "seed"), "11");
    assert!(!out.path().join("trace.jsonl").exists());
}

#[test]
fn majority_divergence_halts_cleanly() {
    let out = tempfile::tempdir().unwrap();
    let o = tipcut(&["run", "--scenario", &scenario("divergence.toml"), "--seed", "1", "--out", out.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(metric(out.path(), "halted"), "true");
}

#[test]
fn malformed_scenario_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[net]\nn = 4\nbogus_key = 1\n").unwrap();
    let o = tipcut(&["run", "--scenario", bad.to_str().unwrap(), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus_key"), "{}", stderr(&o));
    let o = tipcut(&["run", "--scenario", "/nonexistent.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_reports_each_seed() {
    let o = tipcut(&["run", "--scenario", &scenario("fault-free.toml"), "--seed", "5", "--sweep", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let seeds: Vec<&str> = text.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(seeds, ["seed=5", "seed=6", "seed=7"]);
}

#[test]
fn tx_decode_then_encode_round_trips() {
    let vectors: toml::Table =
        toml::from_str(include_str!("../../core/testdata/tx_vectors.toml")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for v in vectors["vector"].as_array().unwrap().iter().take(10) {
        let hex = v["hex"].as_str().unwrap();
        let o = tipcut(&["tx", "decode", hex]);
        assert!(o.status.success(), "{}", stderr(&o));
        let fields = stdout(&o);
        let expected: toml::Table = v["fields"].as_table().unwrap().clone();
        let printed: toml::Table = toml::from_str(&fields).unwrap();
        assert_eq!(printed, expected);
        let file = dir.path().join("fields.toml");
        std::fs::write(&file, &fields).unwrap();
        let o = tipcut(&["tx", "encode", file.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(stdout(&o).trim(), hex);
        let again = tipcut(&["tx", "decode", stdout(&o).trim()]);
        assert_eq!(stdout(&again), fields);
    }
}

#[test]
fn truncated_hex_names_the_offset() {
    let vectors: toml::Table =
        toml::from_str(include_str!("../../core/testdata/tx_vectors.toml")).unwrap();
    let hex = vectors["vector"][0]["hex"].as_str().unwrap();
    let o = tipcut(&["tx", "decode", &hex[..10]]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("byte offset"), "{}", stderr(&o));
    let o = tipcut(&["tx", "decode", "zz"]);
    assert_eq!(o.status.code(), Some(1));
}

fn write_blocks(dir: &Path, blocks: u64) -> PathBuf {
    let mut store = FlatStore::open_dir(dir, Durability::Background).unwrap();
    for h in 0..blocks {
        let writes: BTreeMap<Location, Word> = (0..2)
            .map(|k| (Location::Slot(Address::from_u64(7), u64_to_word(h * 10 + k)), u64_to_word(h + 1)))
            .collect();
        store.apply_block(h, &writes).unwrap();
    }
    store.flush().unwrap();
    dir.join("wal.log")
}

#[test]
fn wal_dump_groups_by_height_and_flags_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.log");
    std::fs::write(&empty, b"").unwrap();
    let o = tipcut(&["wal-dump", empty.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "");

    let wal = write_blocks(dir.path(), 3);
    let o = tipcut(&["wal-dump", wal.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let heads: Vec<&str> = text.lines().filter(|l| l.starts_with("height")).collect();
    assert_eq!(heads, ["height 0 (2 writes)", "height 1 (2 writes)", "height 2 (2 writes)"]);

    let bytes = std::fs::read(&wal).unwrap();
    let cut = dir.path().join("cut.log");
    std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
    let o = tipcut(&["wal-dump", cut.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().last().unwrap().starts_with("torn-tail at offset "));

    let mut corrupt = bytes.clone();
    corrupt[10] ^= 0xFF;
    std::fs::write(&cut, &corrupt).unwrap();
    let o = tipcut(&["wal-dump", cut.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
