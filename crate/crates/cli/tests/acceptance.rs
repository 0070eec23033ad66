//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use care::checkpoint::Checkpoint;
use care::config::Config;
use care::data::read_manifest;
use care::downstream::{ccc, uar, weighted_f1};
use care::model::{downsampled_mask, CareModel, ModelConfig};
use care::pretrain::{curve_path, load_model, load_utterances, semantic_alignment, Teachers};
use care::tensor::{Binder, Graph, Tensor};

const GRADCHECK_SECONDS: f64 = 60.0;
const METRIC_TOLERANCE: f64 = 1e-9;
const DESCENT_RATIO: f64 = 0.6;
const ALIGNMENT_GAIN: f64 = 0.2;
const PROBE_GAIN: f64 = 0.05;
const CCC_FLOOR: f64 = 0.8;
const CORPUS_SIZE: usize = 200;
const PRETRAIN_STEPS: u64 = 300;
const PROBE_SEEDS: usize = 5;

// Utterances are 1.5-2.5 s, so crops longer than this are mostly padding.
const PRETRAIN_INI: &str = "[pretrain]\ncrop_seconds = 2.0\nsteps = 300\n";

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn care(args: &[&str]) -> i32 {
    care_cli::run(std::iter::once("care").chain(args.iter().copied()))
}

fn care_ok(args: &[&str]) {
    let code = care(args);
    assert_eq!(code, 0, "care {} exited with {code}", args.join(" "));
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `(split, metric) -> value` for the `mean` rows of a probe report.
fn report_means(path: &Path) -> BTreeMap<(String, String), f64> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            (f[0] == "mean").then(|| ((f[2].to_string(), f[3].to_string()), f[4].parse().unwrap()))
        })
        .collect()
}

fn test_metric(path: &Path, metric: &str) -> f64 {
    report_means(path)[&("test".to_string(), metric.to_string())]
}

struct Corpus {
    dir: PathBuf,
}

impl Corpus {
    fn generate(root: &Path, name: &str, seed: u64, extra: &[&str]) -> Self {
        let dir = root.join(name);
        let (n, seed) = (CORPUS_SIZE.to_string(), seed.to_string());
        let mut args = vec!["synth-corpus", "--out", s(&dir), "--n", &n, "--seed", &seed];
        args.extend_from_slice(extra);
        care_ok(&args);
        Self { dir }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn probe(&self, ckpt: &Path, task: &str, report: &Path, seeds: usize, extra: &[&str]) {
        let (train, val, test) = (self.file("train.csv"), self.file("val.csv"), self.file("test.csv"));
        let seeds = seeds.to_string();
        let mut args = vec![
            "probe", "--ckpt", s(ckpt), "--train", s(&train), "--val", s(&val), "--test", s(&test), "--task", task,
            "--seeds", &seeds, "--report", s(report),
        ];
        args.extend_from_slice(extra);
        care_ok(&args);
    }
}

fn a1() -> Outcome {
    let t = Instant::now();
    let code = care(&["gradcheck"]);
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        id: "A1",
        pass: code == 0 && secs < GRADCHECK_SECONDS,
        detail: format!("gradcheck exit {code} in {secs:.1}s (limit {GRADCHECK_SECONDS}s)"),
    }
}

fn a2() -> Outcome {
    let code = care(&["metrics-oracle", "--cases", "1000"]);
    let labels = [0, 0, 1];
    let preds = [0, 1, 1];
    let wf1 = weighted_f1(&preds, &labels, 2).unwrap();
    let u = uar(&preds, &labels, 2).unwrap();
    let c = ccc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
    let hand = (wf1 - 2.0 / 3.0).abs() < METRIC_TOLERANCE
        && (u - 0.75).abs() < METRIC_TOLERANCE
        && (c + 1.0).abs() < METRIC_TOLERANCE;
    Outcome {
        id: "A2",
        pass: code == 0 && hand,
        detail: format!("oracle exit {code}; wf1 {wf1:.12} uar {u:.12} ccc {c:.12}"),
    }
}

fn a3(ckpt: &Path) -> Outcome {
    let curve = std::fs::read_to_string(curve_path(ckpt)).unwrap();
    let tot: Vec<f64> = curve.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    let first = mean(&tot[..10]);
    let last = mean(&tot[tot.len() - 10..]);
    let ratio = last / first;

    let (config, trained) = load_model(&Checkpoint::read(ckpt).unwrap()).unwrap();
    let fresh = CareModel::random(&config.model, config.pretrain.seed, config.pretrain.freeze).unwrap();
    let mut frozen = 0;
    let mut changed = Vec::new();
    for (_, p) in trained.store.iter().filter(|(_, p)| p.name.starts_with("semantic.") && p.frozen) {
        frozen += 1;
        if fresh.store.by_name(&p.name).map(|q| &q.value) != Some(&p.value) {
            changed.push(p.name.clone());
        }
    }
    Outcome {
        id: "A3",
        pass: tot.len() as u64 == PRETRAIN_STEPS && ratio <= DESCENT_RATIO && frozen > 0 && changed.is_empty(),
        detail: format!(
            "L_tot first-10 {first:.2} last-10 {last:.2} ratio {ratio:.3} (limit {DESCENT_RATIO}); \
             {frozen} frozen semantic tensors, {} changed",
            changed.len()
        ),
    }
}

fn a4(ckpt: &Path, corpus: &Corpus) -> Outcome {
    let (config, trained) = load_model(&Checkpoint::read(ckpt).unwrap()).unwrap();
    let random = CareModel::random(&config.model, config.pretrain.seed, config.pretrain.freeze).unwrap();
    let teachers = Teachers::for_model(&config.model).unwrap();
    let data = load_utterances(&read_manifest(corpus.file("manifest.csv")).unwrap(), &teachers).unwrap();
    let t = semantic_alignment(&trained, &data).unwrap();
    let r = semantic_alignment(&random, &data).unwrap();
    Outcome {
        id: "A4",
        pass: t - r >= ALIGNMENT_GAIN,
        detail: format!("mean cosine trained {t:.4} random {r:.4} gain {:.4} (need {ALIGNMENT_GAIN})", t - r),
    }
}

fn a5(ckpt: &Path, root: &Path) -> Outcome {
    // Probing task held out from pretraining.
    let held = Corpus::generate(root, "heldout", 7, &[]);
    let (config, _) = load_model(&Checkpoint::read(ckpt).unwrap()).unwrap();
    let random_ckpt = root.join("random.ckpt");
    let random = CareModel::random(&config.model, config.pretrain.seed, config.pretrain.freeze).unwrap();
    let mut c = Checkpoint::new(config.to_ini());
    c.push_params(&random.store);
    c.write(&random_ckpt).unwrap();

    let cache = root.join("bank-cache");
    let run = |ckpt: &Path, variant: &str| {
        let report = root.join(format!("a5-{}-{variant}.csv", ckpt.file_stem().unwrap().to_str().unwrap()));
        held.probe(ckpt, "categorical", &report, PROBE_SEEDS, &["--variant", variant, "--cache", s(&cache)]);
        test_metric(&report, "wf1")
    };
    let both = run(ckpt, "both");
    let semantic = run(ckpt, "semantic");
    let acoustic = run(ckpt, "acoustic");
    let baseline = run(&random_ckpt, "both");
    let gain = both - baseline;
    Outcome {
        id: "A5",
        pass: gain >= PROBE_GAIN && both >= semantic && both >= acoustic,
        detail: format!(
            "test WF1 trained {both:.4} random {baseline:.4} gain {:.1} pts (need {:.0}); \
             semantic-only {semantic:.4} acoustic-only {acoustic:.4}",
            gain * 100.0,
            PROBE_GAIN * 100.0
        ),
    }
}

fn a6() -> Outcome {
    let paper = ModelConfig::paper();
    let desk = ModelConfig::desk();
    let model = CareModel::random(&desk, 0, Default::default()).unwrap();
    let samples: Vec<f32> = (0..24_000).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
    let wave = care::frontend::Waveform::new(samples).unwrap();
    let bank = care::downstream::utterance_bank(&model, &wave, 30.0).unwrap();
    let want = 1 + desk.common_layers + desk.semantic_layers;
    let widths_ok = bank.entries.iter().all(|e| e.cols() == 2 * desk.width);

    let block = &model.semantic[0];
    let mut bad = Vec::new();
    for t in 1..=400usize {
        let mut g = Graph::<f32>::new();
        let mut b = Binder::inference(&model.store);
        let data = (0..t * desk.width).map(|i| (i as f32 * 0.37).cos()).collect();
        let x = g.constant(Tensor::new(vec![t, desk.width], data).unwrap());
        let valid = vec![true; t];
        let d = block.adapter_down(&mut g, &mut b, x, &valid).unwrap();
        let u = block.adapter_up(&mut g, &mut b, d, &downsampled_mask(&valid, desk.adapter_factor), t).unwrap();
        if g.shape(u)[0] != t {
            bad.push(t);
        }
    }
    let pass = paper.bank_size() == 13
        && paper.bank_width() == 1536
        && desk.bank_size() == want
        && bank.len() == want
        && widths_ok
        && bad.is_empty();
    Outcome {
        id: "A6",
        pass,
        detail: format!(
            "paper {}×{}; desk {}×{} (built bank {} entries); adapter round-trip failures {:?}",
            paper.bank_size(),
            paper.bank_width(),
            desk.bank_size(),
            desk.bank_width(),
            bank.len(),
            bad
        ),
    }
}

fn a7(ckpt: &Path, root: &Path) -> Outcome {
    let attr = Corpus::generate(root, "attributes", 2, &["--attributes"]);
    let report = root.join("a7.csv");
    attr.probe(ckpt, "attributes", &report, PROBE_SEEDS, &[]);
    let v: Vec<f64> = ["ccc_v", "ccc_a", "ccc_d"].iter().map(|m| test_metric(&report, m)).collect();
    Outcome {
        id: "A7",
        pass: v.iter().all(|&c| c >= CCC_FLOOR),
        detail: format!("test CCC valence {:.4} arousal {:.4} dominance {:.4} (need {CCC_FLOOR} each)", v[0], v[1], v[2]),
    }
}

fn a8(root: &Path) -> Outcome {
    let run = |name: &str| -> Vec<(String, Vec<u8>)> {
        let dir = root.join(name);
        let corpus = Corpus { dir: dir.join("corpus") };
        care_ok(&["synth-corpus", "--out", s(&corpus.dir), "--n", "20", "--seed", "5"]);
        let ini = dir.join("run.ini");
        std::fs::write(&ini, "[pretrain]\ncrop_seconds = 1.0\nbatch_size = 2\nsteps = 6\n").unwrap();
        let ckpt = dir.join("model.ckpt");
        let manifest = corpus.file("manifest.csv");
        care_ok(&["pretrain", "--config", s(&ini), "--manifest", s(&manifest), "--out", s(&ckpt), "--log-every", "0"]);
        let report = dir.join("report.csv");
        corpus.probe(&ckpt, "categorical", &report, 2, &["--epochs", "3"]);
        ["corpus/manifest.csv", "model.ckpt", "model.ckpt.losses.csv", "report.csv"]
            .iter()
            .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
            .collect()
    };
    let a = run("determinism-1");
    let b = run("determinism-2");
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    Outcome {
        id: "A8",
        pass: differing.is_empty(),
        detail: format!("{} artifacts compared, differing: {differing:?}", a.len()),
    }
}

fn a9(ckpt: &Path, corpus: &Corpus, root: &Path) -> Outcome {
    let report = root.join("similarity.csv");
    let pairs = corpus.file("pairs.csv");
    care_ok(&["similarity", "--ckpt", s(ckpt), "--pairs", s(&pairs), "--report", s(&report)]);
    let text = std::fs::read_to_string(&report).unwrap();
    let mut groups: BTreeMap<(bool, String), Vec<f64>> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        groups.entry((f[0].starts_with("same"), f[1].to_string())).or_default().push(f[2].parse().unwrap());
    }
    let get = |same: bool, branch: &str| groups.get(&(same, branch.to_string())).cloned().unwrap_or_default();
    let drop = |branch: &str| mean(&get(true, branch)) - mean(&get(false, branch));
    let (sem, ac) = (drop("semantic"), drop("acoustic"));
    let counts = [get(true, "semantic").len(), get(false, "semantic").len()];
    Outcome {
        id: "A9",
        pass: counts.iter().all(|&n| n >= 100) && sem > ac,
        detail: format!("cosine drop semantic {sem:.4} acoustic {ac:.4} over {counts:?} same/diff pairs"),
    }
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored.
    let started = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let mut outcomes = vec![a1(), a2()];

    let corpus = Corpus::generate(root, "pretrain", 1, &[]);
    let ini = root.join("a3.ini");
    std::fs::write(&ini, PRETRAIN_INI).unwrap();
    let ckpt = root.join("a3.ckpt");
    let manifest = corpus.file("manifest.csv");
    care_ok(&["pretrain", "--config", s(&ini), "--manifest", s(&manifest), "--out", s(&ckpt), "--log-every", "50"]);
    assert_eq!(Config::from_file(&ini).unwrap().pretrain.steps, PRETRAIN_STEPS);

    outcomes.push(a3(&ckpt));
    outcomes.push(a4(&ckpt, &corpus));
    outcomes.push(a5(&ckpt, root));
    outcomes.push(a6());
    outcomes.push(a7(&ckpt, root));
    outcomes.push(a8(root));
    outcomes.push(a9(&ckpt, &corpus, root));

    println!();
    for o in &outcomes {
        println!("{} {}: {}", o.id, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    let elapsed = started.elapsed();
    println!("acceptance: {} passed, {failed} failed in {:.0}s", outcomes.len() - failed, elapsed.as_secs_f64());
    assert!(elapsed < Duration::from_secs(15 * 60), "acceptance suite exceeded 15 minutes");
    if failed > 0 {
        std::process::exit(1);
    }
}
