use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use evmfunc::corpus::{self, fixtures};
use serde_json::Value;

fn evmfunc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evmfunc")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = evmfunc(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn error_of(o: &Output) -> Value {
    assert!(!o.status.success());
    let err: Value = serde_json::from_slice(&o.stderr).expect("stderr is error JSON");
    assert!(err["error"]["message"].is_string());
    err
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const TINY: &str = "train.embed = 8\ntrain.hidden1 = 8\ntrain.hidden2 = 8\ntrain.epochs = 2\n";

#[test]
fn disasm_shows_dispatcher_selector() {
    let d = tempfile::tempdir().unwrap();
    let f = write(d.path(), "fig.hex", &fixtures::dispatcher().hex());
    let text = ok(&["disasm", &f]);
    assert!(text.contains("PUSH4 0x3ccfd60b"), "{text}");
    let json: Value = serde_json::from_str(&ok(&["disasm", &f, "--json"])).unwrap();
    assert_eq!(json[0]["mnemonic"], "PUSH1");
}

#[test]
fn oracle_boundaries_match_labels() {
    let d = tempfile::tempdir().unwrap();
    let gt = corpus::generate(&corpus::GenSpec { seed: 5, n_public: 3, n_internal: 4, ..Default::default() }).unwrap();
    let f = write(d.path(), "c.hex", &gt.hex());
    let list: Vec<String> = gt.internal_entries().iter().map(|o| format!("0x{o:x}")).collect();
    let out = d.path().join("out");
    ok(&["boundaries", &f, "--oracle-entries", &list.join(","), "--out", out.to_str().unwrap()]);
    let v: Value = serde_json::from_slice(&fs::read(out.join("boundaries.json")).unwrap()).unwrap();
    let hex = |s: &Value| u32::from_str_radix(s.as_str().unwrap().trim_start_matches("0x"), 16).unwrap();
    let fns = v["result"]["functions"].as_array().unwrap();
    assert_eq!(fns.len(), gt.functions.len());
    for f in fns {
        let entry = hex(&f["entry"]);
        let bytes: BTreeSet<u32> = f["bytes"].as_array().unwrap().iter().map(hex).collect();
        let want: BTreeSet<u32> = gt.function_at(entry).unwrap().bytes.iter().copied().collect();
        assert_eq!(bytes, want, "function 0x{entry:x}");
    }
    assert_eq!(v["partial"], false);
}

#[test]
fn generate_train_eval_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let p = |s: &str| d.path().join(s).to_str().unwrap().to_string();
    let cfg = write(d.path(), "run.cfg", TINY);
    ok(&["gen-corpus", "--seed", "7", "--count", "30", "--out", &p("corpus")]);
    ok(&["gen-corpus", "--seed", "7", "--count", "30", "--out", &p("again")]);
    assert_eq!(fs::read(p("corpus/manifest.json")).unwrap(), fs::read(p("again/manifest.json")).unwrap());

    ok(&["train", "--corpus", &p("corpus"), "--config", &cfg, "--out", &p("m1")]);
    ok(&["train", "--corpus", &p("corpus"), "--config", &cfg, "--out", &p("m2"), "--jobs", "1"]);
    assert_eq!(fs::read(p("m1/model.bin")).unwrap(), fs::read(p("m2/model.bin")).unwrap());

    let model = p("m1/model.bin");
    ok(&["eval", "--corpus", &p("corpus"), "--model", &model, "--out", &p("e1")]);
    ok(&["eval", "--corpus", &p("corpus"), "--model", &model, "--out", &p("e2"), "--jobs", "1"]);
    let report = |dir: &str| -> Value {
        let mut v: Value = serde_json::from_slice(&fs::read(p(&format!("{dir}/report.json"))).unwrap()).unwrap();
        let r = v["report"].as_object_mut().unwrap();
        r.remove("seconds_total");
        r.remove("seconds_max");
        v
    };
    let r = report("e1");
    assert_eq!(r, report("e2"));
    let n = |k: &str| r["report"][k].as_u64().unwrap();
    assert_eq!(n("analyzed") + n("timeouts") + n("fatal"), n("total"));
    assert_eq!(n("total"), 9);
    for m in ["entry_all", "boundary"] {
        assert!(r["report"]["headline"][m]["f1"].is_number(), "{m}");
        assert!(r["report"]["metrics"][m]["macro"]["f1"].is_number(), "{m}");
    }
    let csv = fs::read_to_string(p("e1/timings.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
    assert!(csv.starts_with("id,status,seconds"));

    let gt_hex = fs::read_dir(p("corpus")).unwrap().flatten().find(|e| e.path().extension().is_some_and(|x| x == "hex"));
    let f = gt_hex.unwrap().path();
    let f = f.to_str().unwrap();
    let e: Value = serde_json::from_str(&ok(&["entries", f, "--model", &model, "--threshold", "0.3"])).unwrap();
    assert_eq!(e["threshold"], 0.3);
    assert!(e["internal"].is_array());
    for cmd in ["boundaries", "cfg", "callgraph"] {
        ok(&[cmd, f, "--model", &model]);
    }
    assert!(ok(&["callgraph", f, "--model", &model, "--dot"]).starts_with("digraph"));
}

#[test]
fn oracle_and_baseline_eval() {
    let d = tempfile::tempdir().unwrap();
    let c = d.path().join("c");
    let c = c.to_str().unwrap();
    ok(&["gen-corpus", "--seed", "3", "--count", "20", "--dedup", "--out", c]);
    let text = ok(&["eval", "--corpus", c, "--source", "oracle", "--split", "all", "--aggregation", "macro"]);
    assert!(text.contains("20 contracts, 20 analyzed"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("boundary ") && l.contains("1.0000")), "{text}");
    ok(&["eval", "--corpus", c, "--source", "baseline"]);
}

#[test]
fn errors_are_json() {
    let d = tempfile::tempdir().unwrap();
    let bad = write(d.path(), "bad.hex", "0xzz");
    assert_eq!(error_of(&evmfunc(&["disasm", &bad]))["error"]["kind"], "decode");
    let good = write(d.path(), "ok.hex", "6001");
    assert_eq!(error_of(&evmfunc(&["entries", &good]))["error"]["kind"], "usage");
    assert_eq!(error_of(&evmfunc(&["nonsense"]))["error"]["kind"], "usage");
    let cfg = write(d.path(), "bad.cfg", "rho0 = 2\n");
    assert_eq!(error_of(&evmfunc(&["disasm", &good, "--config", &cfg]))["error"]["kind"], "config");
    let junk = write(d.path(), "junk.bin", "not a model");
    assert_eq!(error_of(&evmfunc(&["entries", &good, "--model", &junk]))["error"]["kind"], "model");
    let missing = d.path().join("none");
    let e = error_of(&evmfunc(&["eval", "--corpus", missing.to_str().unwrap(), "--source", "baseline"]));
    assert_eq!(e["error"]["kind"], "corpus");
    assert_eq!(error_of(&evmfunc(&["gen-corpus", "--count", "3"]))["error"]["kind"], "usage");
    let o = evmfunc(&["boundaries", &good, "--oracle-entries", "0xq"]);
    assert_eq!(error_of(&o)["error"]["kind"], "usage");
}

#[test]
fn no_command_panics_on_hostile_input() {
    let d = tempfile::tempdir().unwrap();
    let inputs = [
        ("empty", ""),
        ("blank", "  \n"),
        ("prefix", "0x"),
        ("odd", "600"),
        ("junk", "hello"),
        ("trunc", "60016002617f"),
        ("push32", "7f"),
        ("jumps", "5b56565b5700"),
        ("loop", "5b600056"),
    ];
    for (name, text) in inputs {
        let f = write(d.path(), name, text);
        for args in [
            vec!["disasm", &f],
            vec!["segment", &f],
            vec!["baseline", &f],
            vec!["entries", &f, "--oracle-entries", "0x0,0x1,0x4"],
            vec!["boundaries", &f, "--oracle-entries", "0x0,0x4"],
            vec!["cfg", &f, "--oracle-entries", "0x4"],
            vec!["callgraph", &f, "--oracle-entries", ""],
        ] {
            let o = evmfunc(&args);
            let stderr = String::from_utf8_lossy(&o.stderr);
            assert!(!stderr.contains("panicked"), "{args:?}: {stderr}");
            if !o.status.success() {
                error_of(&o);
            }
        }
    }
}
