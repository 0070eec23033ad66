use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::*;
use super::*;
use crate::model::{Freeze, ModelConfig};
use crate::tensor::gradcheck::{gradcheck, DEFAULT_STEP};

#[test]
fn weighted_f1_examples() {
    assert_eq!(weighted_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
    assert!((weighted_f1(&[0, 1, 1], &[0, 0, 1], 2).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((weighted_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!(weighted_f1(&[], &[], 2).is_err());
    assert!(weighted_f1(&[2], &[0], 2).is_err());
}

#[test]
fn uar_examples() {
    assert_eq!(uar(&[0, 1], &[0, 1], 2).unwrap(), 1.0);
    assert!((uar(&[0, 1, 1], &[0, 0, 1], 2).unwrap() - 0.75).abs() < 1e-12);
    assert!((uar(&[2; 6], &[0, 1, 2, 0, 1, 2], 4).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!(uar(&[], &[], 2).is_err());
}

#[test]
fn ccc_examples() {
    assert_eq!(ccc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
    assert!((ccc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(ccc(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
    assert!(ccc(&[1.0], &[1.0]).is_err());
}

#[test]
fn ccc_shift_strictly_lowers() {
    let g = [1.0, 2.5, 3.0, 4.5];
    let mut last = ccc(&g, &g).unwrap();
    for c in [0.1, 0.5, 1.0, 3.0] {
        let p: Vec<f64> = g.iter().map(|v| v + c).collect();
        let now = ccc(&g, &p).unwrap();
        assert!(now < last);
        last = now;
    }
}

#[test]
fn oracles_agree_on_many_cases() {
    let s = compare(2000, 11).unwrap();
    assert!(s.max() < 1e-9, "{s:?}");
}

proptest! {
    #[test]
    fn metrics_in_range_and_permutation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_case(&mut rng);
        let wf1 = weighted_f1(&c.preds, &c.labels, c.k).unwrap();
        let u = uar(&c.preds, &c.labels, c.k).unwrap();
        let cc = ccc(&c.truth, &c.pred_values).unwrap();
        prop_assert!((0.0..=1.0).contains(&wf1));
        prop_assert!((0.0..=1.0).contains(&u));
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&cc));
        let mut perm: Vec<usize> = (0..c.preds.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let p: Vec<usize> = perm.iter().map(|&i| c.preds[i]).collect();
        let l: Vec<usize> = perm.iter().map(|&i| c.labels[i]).collect();
        let gv: Vec<f64> = perm.iter().map(|&i| c.truth[i]).collect();
        let pv: Vec<f64> = perm.iter().map(|&i| c.pred_values[i]).collect();
        prop_assert!((weighted_f1(&p, &l, c.k).unwrap() - wf1).abs() < 1e-12);
        prop_assert!((uar(&p, &l, c.k).unwrap() - u).abs() < 1e-12);
        prop_assert!((ccc(&gv, &pv).unwrap() - cc).abs() < 1e-12);
    }
}

fn t64(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], data).unwrap()
}

#[test]
fn ccc_loss_values_and_gradient() {
    let truth = t64(4, 3, vec![1.0, 2.0, 3.0, 2.0, 4.0, 1.0, 3.0, 1.0, 5.0, 4.0, 3.0, 2.0]);
    let mut g = Graph::<f64>::new();
    let tv = g.constant(truth.clone());
    let l = ccc_loss(&mut g, tv, tv).unwrap();
    assert!(g.value(l).item().abs() < 1e-9);
    let c = g.constant(Tensor::filled(&[4, 3], 2.0));
    let l = ccc_loss(&mut g, tv, c).unwrap();
    assert!((g.value(l).item() - 3.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pred = t64(4, 3, (0..12).map(|_| rng.random_range(0.0..5.0)).collect());
    let err = gradcheck(
        |g, v| {
            let t = g.constant(truth.clone());
            ccc_loss(g, t, v[0])
        },
        &[pred],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let u = g.constant(Tensor::zeros(&[1, 4]));
    let l = g.cross_entropy(u, &[2]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    let h = g.constant(t64(1, 2, vec![0.0, 3f64.ln()]));
    let l = g.cross_entropy(h, &[1]).unwrap();
    assert!((g.value(l).item() + 0.75f64.ln()).abs() < 1e-12);
    let c = g.constant(t64(1, 2, vec![-50.0, 50.0]));
    let l = g.cross_entropy(c, &[1]).unwrap();
    assert!(g.value(l).item() < 1e-12);
    assert!(g.cross_entropy(c, &[2]).is_err());
}

fn random_bank(rng: &mut ChaCha8Rng, len: usize, frames: usize, width: usize) -> LayerBank<f64> {
    LayerBank {
        labels: (0..len).map(|i| format!("e{i}")).collect(),
        entries: (0..len)
            .map(|_| t64(frames, width, (0..frames * width).map(|_| rng.random_range(-2.0..2.0)).collect()))
            .collect(),
        valid: vec![true; frames],
    }
}

#[test]
fn convex_combination_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bank = random_bank(&mut rng, 13, 4, 6);
    let uniform = convex_combine(&bank, &[0.0; 13]).unwrap();
    for j in 0..24 {
        let mean = bank.entries.iter().map(|e| e.data()[j]).sum::<f64>() / 13.0;
        assert!((uniform.data()[j] - mean).abs() < 1e-12);
    }
    for k in [0, 6, 12] {
        let mut logits = [0.0; 13];
        logits[k] = 1e4;
        assert_eq!(convex_combine(&bank, &logits).unwrap(), bank.entries[k]);
    }
    let logits: Vec<f64> = (0..13).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mixed = convex_combine(&bank, &logits).unwrap();
    for j in 0..24 {
        let lo = bank.entries.iter().map(|e| e.data()[j]).fold(f64::INFINITY, f64::min);
        let hi = bank.entries.iter().map(|e| e.data()[j]).fold(f64::NEG_INFINITY, f64::max);
        assert!(mixed.data()[j] >= lo - 1e-12 && mixed.data()[j] <= hi + 1e-12);
    }
    assert!(convex_combine(&bank, &[0.0; 12]).is_err());
}

#[test]
fn probe_forward_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let probe: ProbeModel<f64> = ProbeModel::new(5, 8, 16, 4, 1).unwrap().cast();
    let bank = random_bank(&mut rng, 5, 6, 8);
    let out = probe_forward(&bank, &probe).unwrap();
    assert_eq!(out.len(), 4);

    // Padding frames appended with junk leave the output unchanged.
    let mut padded = bank.clone();
    for e in &mut padded.entries {
        let mut d = e.data().to_vec();
        d.extend((0..3 * 8).map(|_| rng.random_range(-50.0..50.0)));
        *e = t64(9, 8, d);
    }
    padded.valid.extend([false; 3]);
    let again = probe_forward(&padded, &probe).unwrap();
    for (a, b) in out.iter().zip(&again) {
        assert!((a - b).abs() < 1e-5);
    }

    let mut zeroed = probe.clone();
    let ob = zeroed.out.bias;
    zeroed.store.get_mut(zeroed.out.weight).value = Tensor::zeros(&[16, 4]);
    zeroed.store.get_mut(ob).value = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]);
    let other = random_bank(&mut rng, 5, 6, 8);
    assert_eq!(probe_forward(&bank, &zeroed).unwrap(), vec![0.5, -1.0, 2.0, 0.0]);
    assert_eq!(probe_forward(&other, &zeroed).unwrap(), vec![0.5, -1.0, 2.0, 0.0]);

    let mut empty = bank.clone();
    empty.valid = vec![false; 6];
    assert!(probe_forward(&empty, &probe).is_err());
}

#[test]
fn pooled_path_matches_full_bank_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let probe = ProbeModel::new(3, 4, 8, 2, 2).unwrap();
    let mut bank: LayerBank<f32> = LayerBank {
        labels: vec!["a".into(), "b".into(), "c".into()],
        entries: (0..3)
            .map(|_| Tensor::new(vec![5, 4], (0..20).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap())
            .collect(),
        valid: vec![true, true, true, false, true],
    };
    let full = probe_forward(&bank, &probe).unwrap();
    let data = ProbeData {
        pooled: vec![bank.pooled().unwrap()],
        targets: Targets::Classes(vec![0]),
    };
    let pooled = predict(&probe, &data).unwrap();
    for (a, b) in full.iter().zip(pooled.data()) {
        assert!((a - b).abs() < 1e-5);
    }
    bank.valid = vec![false; 5];
    assert!(bank.pooled().is_err());
}

#[test]
fn bank_variants_duplicate_one_branch() {
    let t = Tensor::new(vec![3, 4], (0..12).map(|v| v as f32).collect()).unwrap();
    assert_eq!(BankVariant::Both.apply(&t, 2).unwrap(), t);
    let s = BankVariant::Semantic.apply(&t, 2).unwrap();
    assert_eq!(s.data(), &[0., 1., 2., 3., 4., 5., 4., 5., 8., 9., 8., 9.]);
    let a = BankVariant::Acoustic.apply(&t, 2).unwrap();
    assert_eq!(a.data(), &[0., 1., 2., 3., 6., 7., 6., 7., 10., 11., 10., 11.]);
    assert!("both".parse::<BankVariant>().is_ok());
    assert!("neither".parse::<BankVariant>().is_err());
}

/// Two Gaussian clusters per class in pooled-bank space.
fn separable(n: usize, classes: usize, seed: u64) -> ProbeData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pooled = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % classes;
        let data = (0..3 * 8)
            .map(|j| if j % 8 == c { 3.0 } else { 0.0 } + rng.random_range(-0.5f32..0.5))
            .collect();
        pooled.push(Tensor::new(vec![3, 8], data).unwrap());
        labels.push(c);
    }
    ProbeData {
        pooled,
        targets: Targets::Classes(labels),
    }
}

fn hyper(epochs: usize) -> ProbeHyper {
    ProbeHyper {
        lr: 1e-2,
        weight_decay: 0.0,
        batch_size: 8,
        epochs,
        hidden: 16,
    }
}

#[test]
fn separable_task_is_learned_deterministically() {
    let task = Task::Categorical { classes: 4 };
    let (tr, va, te) = (separable(64, 4, 1), separable(16, 4, 2), separable(32, 4, 3));
    let rec = train_probe(&tr, &va, &te, task, 7, &hyper(20)).unwrap();
    assert!(rec.get("test", "wf1").unwrap() > 0.95, "{rec:?}");
    assert!((rec.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(rec.weights.iter().all(|&w| w >= 0.0));
    assert_eq!(rec, train_probe(&tr, &va, &te, task, 7, &hyper(20)).unwrap());

    let one = train_probe(&tr, &va, &te, task, 7, &hyper(1)).unwrap();
    for split in ["train", "val", "test"] {
        assert!(one.get(split, "wf1").is_some() && one.get(split, "uar").is_some());
    }
    assert_eq!(one.best_epoch, 1);
}

#[test]
fn attribute_probe_learns_a_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut make = |n: usize| {
        let mut pooled = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..n {
            let z: [f64; 3] = [rng.random_range(1.0..5.0), rng.random_range(1.0..5.0), rng.random_range(1.0..5.0)];
            let data = (0..2 * 6).map(|j| (z[j % 3] - 3.0) as f32 * if j % 2 == 0 { 1.0 } else { -0.5 }).collect();
            pooled.push(Tensor::new(vec![2, 6], data).unwrap());
            targets.push(z);
        }
        ProbeData {
            pooled,
            targets: Targets::Attributes(targets),
        }
    };
    let (tr, va, te) = (make(96), make(24), make(24));
    let rec = train_probe(&tr, &va, &te, Task::Attributes, 1, &hyper(40)).unwrap();
    for m in ["ccc_v", "ccc_a", "ccc_d"] {
        assert!(rec.get("test", m).unwrap() > 0.9, "{rec:?}");
    }
}

#[test]
fn protocol_aggregates() {
    let task = Task::Categorical { classes: 2 };
    let fold = Fold {
        train: separable(16, 2, 1),
        val: separable(8, 2, 2),
        test: separable(8, 2, 3),
    };
    let one = run_protocol(std::slice::from_ref(&fold), task, &[3], &hyper(2)).unwrap();
    for r in one.rows.iter().filter(|r| r.seed == "std") {
        assert_eq!(r.value, 0.0);
    }
    let ab = run_protocol(std::slice::from_ref(&fold), task, &[3, 4, 5], &hyper(2)).unwrap();
    let ba = run_protocol(std::slice::from_ref(&fold), task, &[5, 3, 4], &hyper(2)).unwrap();
    let agg = |r: &Report| r.rows.iter().filter(|r| r.seed == "mean" || r.seed == "std").cloned().collect::<Vec<_>>();
    assert_eq!(agg(&ab), agg(&ba));
    assert!(ab.to_csv().starts_with("seed,fold,split,metric,value\n"));

    let rows: Vec<ReportRow> = [0.6, 0.8]
        .iter()
        .enumerate()
        .map(|(i, &v)| ReportRow {
            seed: i.to_string(),
            fold: 0,
            split: "test".into(),
            metric: "wf1".into(),
            value: v,
        })
        .collect();
    let a = aggregate(&rows);
    assert!((a[0].value - 0.7).abs() < 1e-12);
    assert!((a[1].value - 0.1).abs() < 1e-12);
}

#[test]
fn task_inference() {
    let labels = [Label::Class(0), Label::Class(3)];
    let refs: Vec<&Label> = labels.iter().collect();
    assert_eq!(Task::infer(TaskKind::Categorical, &refs).unwrap(), Task::Categorical { classes: 4 });
    assert!(Task::infer(TaskKind::Attributes, &refs).is_err());
    let only = [Label::Class(0)];
    assert!(Task::infer(TaskKind::Categorical, &[&only[0]]).is_err());
}

fn tiny() -> ModelConfig {
    ModelConfig {
        width: 8,
        heads: 2,
        common_layers: 1,
        semantic_layers: 2,
        acoustic_layers: 2,
        acoustic_dim: 6,
        semantic_dim: 8,
        extractor_width: 4,
        ..ModelConfig::desk()
    }
}

#[test]
fn similarity_identity_and_bounds() {
    let model = CareModel::random(&tiny(), 1, Freeze::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = Waveform::new((0..16000).map(|_| rng.random_range(-0.3f32..0.3)).collect()).unwrap();
    let b = Waveform::new((0..20000).map(|_| rng.random_range(-0.3f32..0.3)).collect()).unwrap();
    let (s, ac) = similarity_probe(&model, &a, &a, 1, 30.0).unwrap();
    assert!((s - 1.0).abs() < 1e-9 && (ac - 1.0).abs() < 1e-9);
    let (s, ac) = similarity_probe(&model, &a, &b, 2, 30.0).unwrap();
    assert!((-1.0..=1.0).contains(&s) && (-1.0..=1.0).contains(&ac));
    assert!(similarity_probe(&model, &a, &b, 3, 30.0).is_err());
    assert!(similarity_probe(&model, &a, &b, 0, 30.0).is_err());
}
