use ssm_circuits::analysis::*;
use ssm_circuits::ioi::{
    generate_batch, DatasetConfig, Lexicon, PromptPair, TemplateId, Tokenizer,
};
use ssm_circuits::model::{hook_name, HookRegistry, Model, ModelConfig};
use ssm_circuits::testbench::planted_ioi_model;
use ssm_circuits::Error;

fn model(seed: u64) -> Model {
    Model::random(ModelConfig::new(2, 8, 12, 3, 4, 64), seed).unwrap()
}

fn pairs(count: usize, seed: u64) -> Vec<PromptPair> {
    let tok = Tokenizer::for_lexicon(&Lexicon::default()).unwrap();
    let cfg = DatasetConfig {
        templates: TemplateId::ALL.to_vec(),
        count,
        seed,
        ..DatasetConfig::default()
    };
    generate_batch(&cfg, &tok).unwrap()
}

/// First pair with a grid substitution at `slot` whose averages exist.
fn steerable<'a>(
    ps: &'a [PromptPair],
    store: &NameAverageStore,
    slot: usize,
) -> (&'a PromptPair, Substitution) {
    ps.iter()
        .find_map(|p| {
            let s = grid_substitution(p, slot, slot)?;
            (store.contains(s.new_name, slot) && store.contains(p.names[slot - 1], slot))
                .then_some((p, s))
        })
        .expect("no steerable pair")
}

#[test]
fn single_prompt_average_is_the_activation() {
    let m = model(1);
    let ps = pairs(1, 3);
    let store = build_name_averages(&m, &ps, 1, 1).unwrap();
    let run = m.run(&[ps[0].clean.clone()], &HookRegistry::new()).unwrap();
    let x = run.hook_value(&hook_name(1, "hook_ssm_input")).unwrap();
    for slot in 1..=5 {
        let pos = ps[0].positions.name(slot) + 1;
        let avg = store.get(ps[0].names[slot - 1], slot).unwrap();
        for c in 0..12 {
            assert_eq!(avg.data()[c], x.get(&[0, pos, c]));
        }
        assert_eq!(store.count(ps[0].names[slot - 1], slot), 1);
    }
}

#[test]
fn duplicating_the_dataset_keeps_the_means() {
    let m = model(2);
    let ps = pairs(60, 4);
    let doubled: Vec<PromptPair> = ps.iter().chain(ps.iter()).cloned().collect();
    let a = build_name_averages(&m, &ps, 0, 1).unwrap();
    let b = build_name_averages(&m, &doubled, 0, 1).unwrap();
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (n, s) in a.keys() {
        assert_eq!(2 * a.count(n, s), b.count(n, s));
        for (x, y) in a
            .get(n, s)
            .unwrap()
            .data()
            .iter()
            .zip(b.get(n, s).unwrap().data())
        {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn averages_match_a_direct_mean() {
    let m = model(3);
    let ps = pairs(40, 5);
    let store = build_name_averages(&m, &ps, 1, 1).unwrap();
    let (name, slot) = store
        .keys()
        .max_by_key(|&(n, s)| store.count(n, s))
        .unwrap();
    let mut sum = [0.0; 12];
    let mut n = 0;
    for p in ps.iter().filter(|p| p.names[slot - 1] == name) {
        let run = m.run(std::slice::from_ref(&p.clean), &HookRegistry::new()).unwrap();
        let x = run.hook_value(&hook_name(1, "hook_ssm_input")).unwrap();
        for (c, v) in sum.iter_mut().enumerate() {
            *v += x.get(&[0, p.positions.name(slot) + 1, c]);
        }
        n += 1;
    }
    assert_eq!(n, store.count(name, slot));
    for (c, v) in sum.iter().enumerate() {
        assert!((v / n as f64 - store.get(name, slot).unwrap().data()[c]).abs() < 1e-12);
    }
}

#[test]
fn sparse_entries_are_excluded() {
    let m = model(1);
    let ps = pairs(20, 6);
    let store = build_name_averages(&m, &ps, 0, 3).unwrap();
    assert!(!store.excluded.is_empty());
    for &(name, slot, count) in &store.excluded {
        assert!(count < 3);
        assert!(matches!(store.get(name, slot), Err(Error::Steering(_))));
    }
    for (n, s) in store.keys() {
        assert!(store.count(n, s) >= 3);
    }
}

#[test]
fn store_round_trips_through_disk() {
    let m = model(4);
    let store = build_name_averages(&m, &pairs(30, 7), 1, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = store.save(dir.path(), "averages").unwrap();
    assert_eq!(files, vec!["averages.safetensors", "averages.json"]);
    let back = NameAverageStore::load(dir.path(), "averages").unwrap();
    assert_eq!(back, store);
}

#[test]
fn subtract_add_then_inverse_restores_logits() {
    let m = model(5);
    let ps = pairs(200, 8);
    let store = build_name_averages(&m, &ps, 1, 1).unwrap();
    for slot in [1, 4] {
        let (p, s) = steerable(&ps, &store, slot);
        let err = steering_round_trip_error(&m, &[p], &[s], &store).unwrap();
        assert!(err < 1e-10, "{err}");
    }
}

#[test]
fn steering_leaves_earlier_positions_alone() {
    let m = model(6);
    let ps = pairs(200, 9);
    let store = build_name_averages(&m, &ps, 0, 1).unwrap();
    let (p, s) = steerable(&ps, &store, 4);
    let pos = p.positions.name(4) + 1;
    let delta = subtract_add_delta(&m, &[p], &[s], &store).unwrap();
    let mut reg = HookRegistry::new();
    reg.add(
        &hook_name(0, "hook_ssm_input"),
        ssm_circuits::model::HookAction::Add {
            delta: std::sync::Arc::new(delta),
        },
    );
    let clean = m.forward(std::slice::from_ref(&p.clean), &HookRegistry::new()).unwrap();
    let steered = m.forward(std::slice::from_ref(&p.clean), &reg).unwrap();
    let v = 64;
    assert_eq!(&clean.data()[..pos * v], &steered.data()[..pos * v]);
    assert_ne!(&clean.data()[pos * v..], &steered.data()[pos * v..]);
    for method in [SteerMethod::Replace, SteerMethod::SubtractAdd] {
        let out = steer(&m, p, s, method, &store).unwrap();
        assert_eq!(out.original, p.answer);
        assert_eq!(
            out.success,
            out.logits[out.expected] > out.logits[out.original]
        );
    }
}

#[test]
fn substituted_answers() {
    // names: s1 = (a, b, c), s2 = (b, c) so the answer is a.
    let names = [1, 2, 3, 2, 3];
    assert_eq!(substituted_answer(&names, 1, 9), Some(9));
    assert_eq!(substituted_answer(&names, 2, 9), None);
    assert_eq!(substituted_answer(&names, 4, 1), Some(2));
    assert_eq!(substituted_answer(&names, 5, 1), Some(3));
    assert_eq!(substituted_answer(&names, 4, 9), None);
    assert_eq!(substituted_answer(&names, 4, 3), None);
}

#[test]
fn grid_substitutions_follow_the_slot_rules() {
    for p in pairs(40, 10) {
        for slot in 1..=5 {
            let s = grid_substitution(&p, slot, 2);
            if slot <= 3 {
                assert_eq!(s.is_some(), p.names[slot - 1] == p.answer);
                if let Some(s) = s {
                    assert!(!p.names.contains(&s.new_name));
                }
            } else {
                assert_eq!(s.unwrap().new_name, p.answer);
            }
        }
    }
}

#[test]
fn steering_rejects_ambiguous_substitutions() {
    let m = model(7);
    let ps = pairs(10, 11);
    let store = build_name_averages(&m, &ps, 0, 1).unwrap();
    let p = &ps[0];
    let other = p.names.iter().copied().find(|&n| n != p.answer).unwrap();
    let slot = p.names[..3].iter().position(|&n| n == other).unwrap() + 1;
    let bad = Substitution {
        slot,
        new_name: 60,
        source_slot: slot,
    };
    assert!(matches!(
        steer(&m, p, bad, SteerMethod::Replace, &store),
        Err(Error::Steering(_))
    ));
}

#[test]
fn substitution_grid_counts_eligible_prompts() {
    let m = model(8);
    let ps = pairs(120, 12);
    let store = build_name_averages(&m, &ps, 1, 1).unwrap();
    let g = substitution_grid(&m, &ps, &store, SteerMethod::SubtractAdd).unwrap();
    assert_eq!(g.grid.values.len(), 5);
    for k in 0..5 {
        for j in 0..5 {
            let v = g.grid.get(k, j);
            if g.counts[k][j] == 0 {
                assert!(v.is_nan());
            } else {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
    assert!(g.counts[3][3] > 0);
    let early = early_slot_success(&g);
    assert!(early.is_nan() || (0.0..=1.0).contains(&early));
}

#[test]
fn cosine_lens_is_bounded_and_square() {
    let m = model(9);
    let tokens = pairs(1, 13)[0].clean.clone();
    let lens = cosine_lens(&m, &tokens, 1, None).unwrap();
    assert_eq!(lens.values.len(), tokens.len());
    assert!(lens
        .values
        .iter()
        .flatten()
        .all(|v| (-1.0..=1.0).contains(v)));
    // The first position's contribution is the whole first hidden state.
    assert!((lens.values[0][0] - 1.0).abs() < 1e-12);
    assert!(lens.to_grid().notes.iter().any(|n| n == LENS_NOTE));
    assert!(cosine_lens(&m, &tokens, 2, None).is_err());
    assert!(cosine_lens(&m, &tokens, 0, Some(12)).is_err());
}

#[test]
fn cosine_lens_on_planted_model_lights_up_after_names() {
    let planted = planted_ioi_model(2, 1, 0).unwrap();
    let p = &pairs(1, 14)[0];
    let lens = cosine_lens(&planted.model, &p.clean, 1, None).unwrap();
    let after: Vec<usize> = (1..=5).map(|k| p.positions.name(k) + 1).collect();
    for i in 0..p.len() {
        let row_zero = (0..p.len()).all(|j| lens.zero_norm.contains(&(i, j)));
        assert_eq!(row_zero, !after.contains(&i), "row {i}");
    }
    for &i in &after {
        assert!(lens.values[i][i] > 0.0);
    }
}
