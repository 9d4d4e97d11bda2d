use std::path::Path;

use xtqa::cli::{run_with, EXIT_DATA, EXIT_OK, EXIT_USAGE};

fn xtqa(args: &[&str]) -> (i32, String, String) {
    let argv = std::iter::once("xtqa").chain(args.iter().copied());
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn synth(dir: &Path) {
    let d = dir.to_str().unwrap();
    let (code, _, err) = xtqa(&["synth", "--lessons", "8", "--vocab", "60", "--questions", "2", "--out", d]);
    assert_eq!(code, EXIT_OK, "{err}");
}

#[test]
fn synth_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path());
    synth(b.path());
    for f in ["train.jsonl", "val.jsonl", "gold.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_eval_explain() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth(&data);
    let config = tmp.path().join("small.conf");
    std::fs::write(
        &config,
        "# small model\nepochs = 1\nembed-dim = 8\nhidden-dim = 10\npool-hidden = 6\n\
         entropy-hidden = 6\nclassifier-hidden = 8\nsentences = 3\nsentence-tokens = 8\n",
    )
    .unwrap();
    let (d, r, c) = (data.to_str().unwrap(), run.to_str().unwrap(), config.to_str().unwrap());

    let (code, _, err) = xtqa(&["ingest", "--corpus", d, "--out", r]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(run.join("vocab.json").exists());

    let (code, out, err) = xtqa(&["train", "--config", c, "--corpus", d, "--out", r]);
    assert_eq!(code, EXIT_OK, "{err}");
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(summary.is_object());
    assert!(run.join("best/manifest.json").exists());
    assert!(run.join("run-train.json").exists());

    let ckpt = run.join("best");
    let k = ckpt.to_str().unwrap();
    let (code, out, err) = xtqa(&["eval", "--checkpoint", k, "--corpus", d, "--out", r]);
    assert_eq!(code, EXIT_OK, "{err}");
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    for key in ["tf_acc", "mc_acc", "nondiagram_acc", "diagram_acc", "all_acc"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert!(report["diagram_acc"].is_null());
    assert!(report["evidence_hit_rate"].is_number() || report["evidence_hit_rate"].is_null());

    let gold: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("gold.json")).unwrap()).unwrap();
    let val_text = std::fs::read_to_string(data.join("val.jsonl")).unwrap();
    let id = gold
        .as_object()
        .unwrap()
        .keys()
        .find(|q| val_text.contains(&format!("\"{q}\"")))
        .unwrap()
        .clone();
    let (code, out, err) = xtqa(&["explain", "--checkpoint", k, "--question", &id, "--corpus", d, "--out", r]);
    assert_eq!(code, EXIT_OK, "{err}");
    let exp: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(exp["question_id"], id.as_str());
    assert!(exp["predicted_label"].as_str().unwrap().len() == 1);
    let ev = exp["evidence"].as_array().unwrap();
    assert_eq!(ev.len(), 1);
    for key in ["paragraph_id", "start", "end", "gain", "text"] {
        assert!(ev[0].get(key).is_some(), "missing {key}");
    }
    assert!(ev[0]["start"].as_u64().unwrap() >= 1);

    let (code, _, _) = xtqa(&["explain", "--checkpoint", k, "--question", "nope", "--corpus", d, "--out", r]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn bad_invocations() {
    assert_eq!(xtqa(&["train", "--no-such-flag"]).0, EXIT_USAGE);
    assert_eq!(xtqa(&["frobnicate"]).0, EXIT_USAGE);
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent.jsonl");
    let out = tmp.path().join("out");
    let (code, _, err) = xtqa(&["ingest", "--corpus", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_DATA);
    assert!(!err.is_empty());
    assert_eq!(xtqa(&["--help"]).0, EXIT_OK);
}
