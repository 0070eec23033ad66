use std::path::Path;

fn care(args: &[&str]) -> i32 {
    care_cli::run(std::iter::once("care").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(care(&[]), 1);
    assert_eq!(care(&["frobnicate"]), 1);
    assert_eq!(care(&["gradcheck", "--no-such-flag"]), 1);
    assert_eq!(care(&["probe", "--ckpt", "x"]), 1);
    assert_eq!(care(&["metrics-oracle", "--cases", "0"]), 1);
    assert_eq!(care(&["--help"]), 0);
    assert_eq!(care(&["--version"]), 0);
}

#[test]
fn bad_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.ini");
    std::fs::write(&cfg, "[pretrain]\nlambda = lots\n").unwrap();
    let manifest = dir.path().join("m.csv");
    std::fs::write(&manifest, "id,source,label,transcript\na,synth:1:9,x,\n").unwrap();
    let out = dir.path().join("o.ckpt");
    assert_eq!(care(&["pretrain", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&out)]), 1);
    assert_eq!(care(&["pretrain", "--manifest", p(&manifest), "--out", p(&out)]), 1);
    assert_eq!(care(&["synth-corpus", "--out", p(dir.path()), "--n", "10", "--classes", "1"]), 1);
    assert!(!out.exists());
}

#[test]
fn metrics_oracle_passes() {
    assert_eq!(care(&["metrics-oracle", "--cases", "200", "--seed", "3"]), 0);
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    assert_eq!(care(&["synth-corpus", "--out", p(&corpus), "--n", "20", "--seed", "4"]), 0);
    let cfg = d.join("run.ini");
    std::fs::write(&cfg, "[pretrain]\ncrop_seconds = 1.0\nbatch_size = 2\n").unwrap();
    let ckpt = d.join("m.ckpt");
    let manifest = corpus.join("manifest.csv");
    let args = ["pretrain", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&ckpt), "--steps", "2"];
    assert_eq!(care(&args), 0);
    assert!(ckpt.exists());
    let curve = std::fs::read_to_string(d.join("m.ckpt.losses.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    let resumed = d.join("r.ckpt");
    let args = [
        "pretrain", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&resumed), "--steps", "3", "--resume",
        p(&ckpt),
    ];
    assert_eq!(care(&args), 0);
    assert_eq!(std::fs::read_to_string(d.join("r.ckpt.losses.csv")).unwrap().lines().count(), 4);

    let report = d.join("report.csv");
    let split = |s: &str| corpus.join(format!("{s}.csv"));
    let (train, val, test) = (split("train"), split("val"), split("test"));
    let args = [
        "probe", "--ckpt", p(&ckpt), "--train", p(&train), "--val", p(&val), "--test", p(&test), "--task",
        "categorical", "--seeds", "2", "--epochs", "2", "--report", p(&report),
    ];
    assert_eq!(care(&args), 0);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.lines().any(|l| l.starts_with("mean,0,test,wf1,")));
    assert!(text.lines().any(|l| l.starts_with("std,0,test,uar,")));

    let sim = d.join("sim.csv");
    let pairs = corpus.join("pairs.csv");
    assert_eq!(care(&["similarity", "--ckpt", p(&ckpt), "--pairs", p(&pairs), "--report", p(&sim)]), 0);
    let rows = std::fs::read_to_string(&sim).unwrap();
    assert!(rows.lines().skip(1).any(|l| l.contains(",semantic,")));
    assert!(rows.lines().skip(1).any(|l| l.contains(",acoustic,")));
    assert_eq!(care(&["similarity", "--ckpt", p(&ckpt), "--pairs", p(&pairs), "--report", p(&sim), "--layer", "9"]), 1);

    let banks = d.join("banks.ckpt");
    assert_eq!(care(&["extract", "--ckpt", p(&ckpt), "--manifest", p(&test), "--out", p(&banks)]), 0);
    let dump = care::checkpoint::Checkpoint::read(&banks).unwrap();
    let id = &care::data::read_manifest(&test).unwrap()[0].id;
    assert!(dump.get(&format!("{id}.extractor")).is_some());
    assert!(dump.get(&format!("{id}.valid")).is_some());
}
