mod common;

use std::collections::BTreeSet;

use baffle_sim::attack::{backdoor_accuracy, craft_backdoor_model, AttackerState, BackdoorKind, BackdoorSpec};
use baffle_sim::data::{
    dirichlet_partition, make_synthetic, poison_dataset, split_clients_server, PartitionConfig, SplitConfig,
};
use baffle_sim::defense::{validate, variation_vector, Vote};
use baffle_sim::lof::{lof_score, VPoint};
use baffle_sim::ml::{
    empirical_accuracy, init_model, per_class_errors, train_local, Architecture, LabeledDataset, Model, TrainParams,
};
use baffle_sim::protocol::{aggregate, run_training_round, select_clients, FlConfig, GlobalState};
use baffle_sim::seed;
use common::*;
use rand::Rng;

#[test]
fn forward_pass_matches_matrix_oracle() {
    let mut r = rng(11);
    for arch in [Architecture::linear(5, 4), Architecture::with_hidden(5, 6, 4)] {
        let model = random_model(&mut r, arch);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
            let got = model.logits(&x).unwrap();
            let want = forward_oracle(&model, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
            }
            assert_eq!(model.predict(&x).unwrap(), argmax_lowest(&want));
        }
    }
}

#[test]
fn accuracy_matches_hand_count() {
    let mut r = rng(12);
    let data = random_dataset(&mut r, 30, 4, 3);
    let model = random_model(&mut r, Architecture::linear(4, 3));
    let m = confusion(&model, &data);
    let correct: usize = (0..3).map(|c| m[c][c]).sum();
    assert_eq!(empirical_accuracy(&model, &data).unwrap(), correct as f64 / 30.0);
}

#[test]
fn error_profile_matches_confusion_tally() {
    let mut r = rng(13);
    let data = random_dataset(&mut r, 60, 4, 3);
    let model = random_model(&mut r, Architecture::with_hidden(4, 5, 3));
    let (src, tgt) = profile_from_confusion(&confusion(&model, &data), 60);
    let p = per_class_errors(&model, &data).unwrap();
    for y in 0..3 {
        assert!((p.source_errors[y] - src[y]).abs() < 1e-15);
        assert!((p.target_errors[y] - tgt[y]).abs() < 1e-15);
    }
}

#[test]
fn variation_matches_profile_subtraction() {
    let mut r = rng(14);
    let data = random_dataset(&mut r, 60, 4, 3);
    let f = random_model(&mut r, Architecture::linear(4, 3));
    let g = random_model(&mut r, Architecture::linear(4, 3));
    let (fs, ft) = profile_from_confusion(&confusion(&f, &data), 60);
    let (gs, gt) = profile_from_confusion(&confusion(&g, &data), 60);
    let v = variation_vector(&f, &g, &data).unwrap();
    for y in 0..3 {
        assert!((v.source_deltas[y] - (fs[y] - gs[y])).abs() < 1e-15);
        assert!((v.target_deltas[y] - (ft[y] - gt[y])).abs() < 1e-15);
    }
    let back = variation_vector(&g, &f, &data).unwrap();
    assert!(v.source_deltas.iter().zip(&back.source_deltas).all(|(a, b)| a == &-b));
}

#[test]
fn gradient_matches_finite_differences() {
    let mut r = rng(15);
    let data = random_dataset(&mut r, 25, 3, 4);
    let model = random_model(&mut r, Architecture::with_hidden(3, 5, 4));
    let grad = model.loss_gradient(&data).unwrap();
    let step = 1e-5;
    for _ in 0..10 {
        let j = r.random_range(0..model.params().len());
        let mut plus = model.params().to_vec();
        let mut minus = plus.clone();
        plus[j] += step;
        minus[j] -= step;
        let lp = Model::from_params(model.arch().clone(), plus).unwrap().loss(&data).unwrap();
        let lm = Model::from_params(model.arch().clone(), minus).unwrap().loss(&data).unwrap();
        let fd = (lp - lm) / (2.0 * step);
        assert!(
            (fd - grad[j]).abs() <= 1e-4 * fd.abs().max(grad[j].abs()).max(1e-3),
            "coordinate {j}: analytic {} numeric {fd}",
            grad[j]
        );
    }
}

#[test]
fn training_separates_blobs() {
    let data = separable_blobs(20, 16);
    let model = init_model(&Architecture::linear(2, 2), 1).unwrap();
    let params = TrainParams { epochs: 50, learning_rate: 0.1, batch_size: 4, seed: 3 };
    let trained = train_local(&model, &data, &params).unwrap();
    assert_eq!(empirical_accuracy(&trained, &data).unwrap(), 1.0);
}

#[test]
fn full_batch_loss_never_increases_on_separable_data() {
    let data = separable_blobs(20, 17);
    let mut model = init_model(&Architecture::linear(2, 2), 2).unwrap();
    let mut last = model.loss(&data).unwrap();
    for epoch in 0..30 {
        let params = TrainParams { epochs: 1, learning_rate: 0.05, batch_size: data.len(), seed: epoch };
        model = train_local(&model, &data, &params).unwrap();
        let now = model.loss(&data).unwrap();
        assert!(now <= last + 1e-12, "epoch {epoch}: {last} -> {now}");
        last = now;
    }
}

#[test]
fn tight_blobs_are_learned_almost_perfectly() {
    let (train, test) = make_synthetic(10, 20, 200, 0.01, 1).unwrap();
    let model = init_model(&Architecture::linear(20, 10), 1).unwrap();
    let params = TrainParams { epochs: 5, learning_rate: 0.1, batch_size: 10, seed: 1 };
    let trained = train_local(&model, &train, &params).unwrap();
    assert!(empirical_accuracy(&trained, &test).unwrap() > 0.99);
}

#[test]
fn aggregate_matches_elementwise_formula() {
    let mut r = rng(18);
    let arch5 = Architecture::linear(4, 1);
    assert_eq!(arch5.param_count(), 5);
    let g = random_model(&mut r, arch5.clone());
    let locals: Vec<Model> = (0..3).map(|_| random_model(&mut r, arch5.clone())).collect();
    let got = aggregate(&g, &locals, 0.7, 20).unwrap();
    for j in 0..5 {
        let mut sum = 0.0;
        for l in &locals {
            sum += l.params()[j] - g.params()[j];
        }
        let want = g.params()[j] + 0.7 / 20.0 * sum;
        assert!(rel_err(got.params()[j], want) < 1e-14);
    }
}

#[test]
fn training_round_replays_bit_identically() {
    let (train, _) = make_synthetic(4, 5, 40, 1.0, 3).unwrap();
    let shards =
        dirichlet_partition(&train, &PartitionConfig { num_clients: 8, dirichlet_alpha: 0.9, seed: 2 }).unwrap();
    let config = FlConfig {
        total_clients: 8,
        contributors_per_round: 3,
        global_lr: 8.0 / 3.0,
        train_params: TrainParams { epochs: 2, learning_rate: 0.1, batch_size: 5, seed: 9 },
        rounds: 1,
    };
    let state = GlobalState::new(init_model(&Architecture::linear(5, 4), 0).unwrap());
    let a = run_training_round(&state, &config, &shards, &[1, 4, 6], None).unwrap();
    let b = run_training_round(&state, &config, &shards, &[1, 4, 6], None).unwrap();
    let bits = |m: &Model| m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert!(a.1.malicious.is_empty());
}

#[test]
fn selection_frequencies_are_uniform() {
    let ids: Vec<usize> = (0..100).collect();
    let mut counts = [0usize; 100];
    let mut r = seed::stream(5, "selection-test", &[]);
    let trials = 10_000;
    for _ in 0..trials {
        for id in select_clients(&ids, 10, &mut r).unwrap() {
            counts[id] += 1;
        }
    }
    let sigma = (trials as f64 * 0.1 * 0.9).sqrt();
    for (id, &c) in counts.iter().enumerate() {
        assert!((c as f64 - trials as f64 * 0.1).abs() <= 3.0 * sigma, "client {id} picked {c} times");
    }
}

#[test]
fn dirichlet_partition_conserves_every_sample() {
    let (data, _) = make_synthetic(10, 3, 200, 1.0, 4).unwrap();
    let shards =
        dirichlet_partition(&data, &PartitionConfig { num_clients: 100, dirichlet_alpha: 0.9, seed: 7 }).unwrap();
    assert_eq!(shards.len(), 100);
    assert_eq!(shards.iter().map(LabeledDataset::len).sum::<usize>(), 2000);
    let mut per_class = vec![0; 10];
    for s in &shards {
        for (c, n) in s.class_counts().into_iter().enumerate() {
            per_class[c] += n;
        }
    }
    assert_eq!(per_class, vec![200; 10]);
    // multiset of rows is preserved
    let key = |x: &[f64], y: usize| (x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y);
    let mut orig: Vec<_> = data.iter().map(|(x, y)| key(x, y)).collect();
    let mut dealt: Vec<_> = shards.iter().flat_map(|s| s.iter().map(|(x, y)| key(x, y)).collect::<Vec<_>>()).collect();
    orig.sort();
    dealt.sort();
    assert_eq!(orig, dealt);
}

#[test]
fn split_halves_are_disjoint_and_complete() {
    let (data, _) = make_synthetic(3, 2, 100, 1.0, 8).unwrap();
    let (c, s) = split_clients_server(&data, &SplitConfig { client_share: 0.9, seed: 1 }).unwrap();
    let key = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let cs: BTreeSet<_> = c.rows().map(key).collect();
    let ss: BTreeSet<_> = s.rows().map(key).collect();
    assert!(cs.is_disjoint(&ss));
    assert_eq!(cs.len() + ss.len(), 300);
}

#[test]
fn semantic_poison_count_matches_predicate_tally() {
    let (data, _) = make_synthetic(5, 4, 60, 1.0, 9).unwrap();
    let spec = BackdoorSpec {
        kind: BackdoorKind::SemanticTrigger { class: 2, feature: 1, threshold: 0.0 },
        target: 4,
        blend_ratio: 1.0,
    };
    let mut expected = 0;
    for i in 0..data.len() {
        if data.label(i) == 2 && data.row(i)[1] > 0.0 {
            expected += 1;
        }
    }
    assert!(expected > 0 && expected < 60);
    let out = poison_dataset(&data, &spec).unwrap();
    let moved = (0..data.len()).filter(|&i| data.label(i) != out.label(i)).count();
    assert_eq!(moved, expected);
    assert!((0..data.len()).all(|i| data.label(i) == out.label(i) || out.label(i) == 4));
}

#[test]
fn backdoor_accuracy_matches_tally() {
    let mut r = rng(19);
    let set = random_dataset(&mut r, 40, 3, 4);
    let model = random_model(&mut r, Architecture::linear(3, 4));
    let hits = (0..40).filter(|&i| argmax_lowest(&forward_oracle(&model, set.row(i))) == 3).count();
    assert_eq!(backdoor_accuracy(&model, &set, 3).unwrap(), hits as f64 / 40.0);
}

#[test]
fn pure_label_flip_backdoor_is_learned() {
    let (train, test) = make_synthetic(8, 6, 30, 0.5, 21).unwrap();
    let attacker = AttackerState::new(0, train, BackdoorSpec::label_flip(1, 7, 1.0)).unwrap();
    let global = init_model(&Architecture::linear(6, 8), 0).unwrap();
    let params = TrainParams { epochs: 200, learning_rate: 0.1, batch_size: 10, seed: 4 };
    let x = craft_backdoor_model(&global, &attacker, &params).unwrap();
    let held_out = attacker.spec.backdoor_set(&test);
    assert_eq!(held_out.len(), 30);
    assert_eq!(backdoor_accuracy(&x, &held_out, 7).unwrap(), 1.0);
}

/// Two-class threshold classifier on the line: class 1 iff `x > t`.
fn threshold_model(t: f64) -> Model {
    let s = 50.0;
    Model::from_params(Architecture::linear(1, 2), vec![0.0, s, 0.0, -s * t]).unwrap()
}

#[test]
fn validate_matches_end_to_end_oracle() {
    // 200 points on [0, 1), labelled by x >= 0.5
    let rows: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 200.0 + 0.0025]).collect();
    let labels: Vec<usize> = rows.iter().map(|x| usize::from(x[0] >= 0.5)).collect();
    let data = LabeledDataset::from_rows(&rows, labels, 2).unwrap();

    let lookback = 8;
    let mut r = rng(22);
    let history: Vec<Model> = (0..=lookback).map(|_| threshold_model(0.5 + r.random_range(-0.02..0.02))).collect();
    let current = threshold_model(0.0);

    // steps 1-6 recomputed from confusion tallies and the naive LOF
    let profile = |m: &Model| profile_from_confusion(&confusion(m, &data), data.len());
    let profiles: Vec<_> = history.iter().chain([&current]).map(profile).collect();
    let v: Vec<Vec<f64>> = profiles
        .windows(2)
        .map(|w| {
            let mut p: Vec<f64> = w[0].0.iter().zip(&w[1].0).map(|(a, b)| a - b).collect();
            p.extend(w[0].1.iter().zip(&w[1].1).map(|(a, b)| a - b));
            p
        })
        .collect();
    // v[i - 1] is v_i; v[8] is the candidate's variation
    assert!(v[lookback].iter().any(|c| c.abs() >= 0.4));
    let k = 4usize; // ceil(8 / 2)
    let h = 6usize; // ceil(3 * 8 / 4)
    let k_eff = k.min(h - 1);
    let mut trusted = Vec::new();
    for i in h..=lookback {
        let refs: Vec<Vec<f64>> = (i - h + 1..i).map(|j| v[j - 1].clone()).collect();
        assert_eq!(refs.len(), h - 1);
        trusted.push(naive_lof(&v[i - 1], &refs, k_eff));
    }
    let tau = trusted.iter().sum::<f64>() / trusted.len() as f64;
    let refs: Vec<Vec<f64>> = (lookback + 2 - h..=lookback).map(|j| v[j - 1].clone()).collect();
    let phi = naive_lof(&v[lookback], &refs, k_eff);

    let verdict = validate(&current, &history, &data).unwrap();
    assert!(rel_err(verdict.threshold, tau) < 1e-9, "{} vs {tau}", verdict.threshold);
    assert!(rel_err(verdict.lof_value, phi) < 1e-9, "{} vs {phi}", verdict.lof_value);
    assert_eq!(verdict.vote, Vote::Reject);
    assert!(phi > tau);
}

#[test]
fn far_query_lof_matches_naive_oracle() {
    let mut r = rng(23);
    let pts = random_points(&mut r, 20, 4, 1.0);
    let query = vec![10.0, -10.0, 10.0, 10.0];
    let naive = naive_lof(&query, &pts, 10);
    let fast = lof_score(&VPoint(query), &pts.into_iter().map(VPoint).collect::<Vec<_>>(), 10).unwrap();
    assert!(fast > 2.0);
    assert!(rel_err(fast, naive) < 1e-9);
}
