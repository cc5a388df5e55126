use baffle_sim::attack::{
    adaptive_craft, craft_backdoor_model, mimic_dataset, model_replacement_update, AdaptiveError, AttackerState,
    BackdoorSpec, DefenseKnowledge,
};
use baffle_sim::data::{dirichlet_partition, make_synthetic, PartitionConfig};
use baffle_sim::defense::{validate_or_accept, Vote};
use baffle_sim::ml::{init_model, train_local, Architecture, LabeledDataset, Model, TrainParams};
use baffle_sim::protocol::aggregate;

struct Setup {
    history: Vec<Model>,
    attacker: AttackerState,
    params: TrainParams,
    knowledge: DefenseKnowledge,
}

/// A short federated run on blobs that leaves `lookback + 1` accepted models.
fn setup(seed: u64) -> Setup {
    let (train, _) = make_synthetic(5, 6, 80, 1.0, seed).unwrap();
    let shards = dirichlet_partition(&train, &PartitionConfig { num_clients: 10, dirichlet_alpha: 0.9, seed }).unwrap();
    let params = TrainParams { epochs: 2, learning_rate: 0.1, batch_size: 10, seed };
    let mut g = init_model(&Architecture::linear(6, 5), seed).unwrap();
    let mut history = vec![g.clone()];
    for round in 0..30u64 {
        let locals: Vec<Model> = (0..10)
            .filter(|c| !shards[*c].is_empty())
            .map(|c| {
                train_local(&g, &shards[c], &TrainParams { seed: seed + 100 * round + c as u64, ..params.clone() })
                    .unwrap()
            })
            .collect();
        g = aggregate(&g, &locals, 10.0 / locals.len() as f64, 10).unwrap();
        history.push(g.clone());
    }
    let largest = (0..10).max_by_key(|&c| (shards[c].len(), std::cmp::Reverse(c))).unwrap();
    let data: LabeledDataset = shards[largest].clone();
    let source = (0..5).max_by_key(|&c| data.class_counts()[c]).unwrap();
    let attacker = AttackerState::new(largest, data, BackdoorSpec::label_flip(source, (source + 1) % 5, 0.5)).unwrap();
    Setup {
        history,
        attacker,
        params: TrainParams { epochs: 20, ..params },
        knowledge: DefenseKnowledge { lookback: 8, quorum: 3, global_lr: 1.0, total_clients: 10 },
    }
}

#[test]
fn returned_candidates_pass_the_attacker_check() {
    let mut passed = 0;
    for seed in 1..=4 {
        let s = setup(seed);
        let g = s.history.last().unwrap();
        match adaptive_craft(g, &s.history, &s.attacker, &s.knowledge, &s.params, 10) {
            Ok(out) => {
                passed += 1;
                let recent = &s.history[s.history.len() - 9..];
                let clean = s.attacker.spec.clean_set(&s.attacker.dataset);
                let verdict = validate_or_accept(&out.candidate, recent, &clean).unwrap();
                assert!(verdict.is_none_or(|v| v.vote == Vote::Accept));
                let landed =
                    aggregate(g, std::slice::from_ref(&out.update), s.knowledge.global_lr, s.knowledge.total_clients)
                        .unwrap();
                for (a, b) in landed.params().iter().zip(out.candidate.params()) {
                    assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
                }
                assert!(out.iterations >= 1 && out.iterations <= 10);
                assert!(out.scale > 0.0 && out.scale <= 1.0);
            }
            Err(AdaptiveError::GaveUp(n)) => assert_eq!(n, 10),
            Err(AdaptiveError::Sim(e)) => panic!("{e}"),
        }
    }
    assert!(passed > 0, "the attacker never found a passing candidate");
}

#[test]
fn without_history_the_plain_replacement_is_returned() {
    let s = setup(5);
    let g = s.history.last().unwrap();
    let out = adaptive_craft(g, &s.history[..3], &s.attacker, &s.knowledge, &s.params, 10).unwrap();
    assert_eq!(out.iterations, 1);
    assert_eq!(out.scale, 1.0);
    let x = craft_backdoor_model(g, &s.attacker, &s.params).unwrap();
    assert_eq!(out.update, model_replacement_update(g, &x, 1.0, 10).unwrap());
    assert!(matches!(
        adaptive_craft(g, &s.history, &s.attacker, &s.knowledge, &s.params, 0),
        Err(AdaptiveError::GaveUp(0))
    ));
}

#[test]
fn mimic_data_copies_global_predictions_outside_the_backdoor() {
    let s = setup(6);
    let g = s.history.last().unwrap();
    let mimic = mimic_dataset(g, &s.attacker, 1).unwrap();
    let target = s.attacker.spec.target;
    for (x, y) in mimic.iter() {
        let from_global = g.predict(x).unwrap();
        let in_backdoor = s.attacker.dataset.iter().any(|(ax, ay)| ax == x && s.attacker.spec.matches(ax, ay));
        if in_backdoor {
            assert_eq!(y, target);
        } else {
            assert_eq!(y, from_global);
        }
    }
}
