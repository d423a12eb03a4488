use std::path::{Path, PathBuf};

use rand::Rng;
use ssm_circuits::autodiff::Precision;
use ssm_circuits::ioi::{generate_batch, DatasetConfig, Lexicon, TemplateId, Tokenizer};
use ssm_circuits::model::{
    conv_slice_hook, hook_name, load_checkpoint, save_checkpoint, HookAction, HookRegistry, Model,
    ModelConfig, Positions,
};
use ssm_circuits::testbench::*;
use ssm_circuits::Error;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("testdata")
        .join(name)
}

#[test]
fn zero_layer_model_learns_single_token_copy() {
    let model = Model::random(ModelConfig::new(0, 16, 4, 2, 4, 12), 3).unwrap();
    let cfg = TrainConfig {
        steps: 300,
        batch_size: 24,
        adam: AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        },
        eval_every: 100,
        stop_accuracy: Some(1.0),
        ..TrainConfig::default()
    };
    let all: Vec<Vec<usize>> = (0..12).map(|t| vec![t]).collect();
    let targets: Vec<usize> = (0..12).collect();
    let sample = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
        let t: Vec<usize> = (0..n).map(|_| rng.gen_range(0..12)).collect();
        Ok((t.iter().map(|&x| vec![x]).collect(), t))
    };
    let (_, log, acc) = train(model, &cfg, serde_json::json!({}), sample, |m| {
        accuracy(m, &all, &targets)
    })
    .unwrap();
    assert_eq!(acc, 1.0);
    assert!(log.entries.first().unwrap().loss > log.entries.last().unwrap().loss);
}

#[test]
fn training_log_round_trips_through_jsonl() {
    let log = TrainingLog {
        header: serde_json::json!({"task": "x"}),
        entries: vec![
            LogEntry {
                step: 50,
                loss: 1.25,
                accuracy: None,
            },
            LogEntry {
                step: 100,
                loss: 0.5,
                accuracy: Some(0.75),
            },
        ],
    };
    let text = log.to_jsonl().unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(TrainingLog::from_jsonl(&text).unwrap(), log);
}

#[test]
fn divergence_is_reported_with_step() {
    let model = Model::random(ModelConfig::new(1, 8, 8, 2, 4, 12), 0).unwrap();
    let cfg = TrainConfig {
        steps: 200,
        adam: AdamConfig {
            lr: f64::INFINITY,
            clip: None,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let sample = |_: &mut rand_chacha::ChaCha8Rng, _: usize| Ok((vec![vec![1, 2, 3]], vec![4]));
    match train(model, &cfg, serde_json::json!({}), sample, |_| Ok(0.0)) {
        Err(Error::Diverged { step, .. }) => assert!(step >= 2),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.2)),
    }
}

#[test]
fn toy_training_rejects_wrong_vocab() {
    let mut spec = ToyTaskSpec::default();
    spec.model.vocab_size = 10;
    assert!(matches!(train_toy_unchecked(&spec), Err(Error::Config(_))));
}

#[test]
fn trained_fixture_meets_accuracy_target() {
    let model = load_checkpoint(&fixture("toy_ioi.safetensors"), None, None).unwrap();
    let spec = ToyTaskSpec::default();
    assert_eq!(model.config(), &spec.model);
    let acc = toy_accuracy(&model, &spec).unwrap();
    assert!(acc >= spec.target_accuracy, "accuracy {acc}");
    let log =
        TrainingLog::from_jsonl(&std::fs::read_to_string(fixture("toy_ioi_train.jsonl")).unwrap())
            .unwrap();
    assert_eq!(log.entries.last().unwrap().accuracy, Some(acc));
}

/// Slow in debug builds. Set `SSM_WRITE_FIXTURES=1` to rewrite the fixture.
#[test]
#[ignore]
fn retraining_reproduces_fixture() {
    let run = train_toy(&ToyTaskSpec::default()).unwrap();
    if std::env::var_os("SSM_WRITE_FIXTURES").is_some() {
        std::fs::create_dir_all(fixture("")).unwrap();
        save_checkpoint(&run.model, &fixture("toy_ioi.safetensors"), Precision::F64).unwrap();
        std::fs::write(fixture("toy_ioi_train.jsonl"), run.log.to_jsonl().unwrap()).unwrap();
    }
    let stored = load_checkpoint(&fixture("toy_ioi.safetensors"), None, None).unwrap();
    for ((n, a), (_, b)) in run
        .model
        .named_parameters()
        .iter()
        .zip(stored.named_parameters().iter())
    {
        assert_eq!(a.data(), b.data(), "{n}");
    }
}

#[test]
fn planted_shift_shows_tap_minus_one_signature() {
    let planted = plant_shift_layer(
        &Model::random(ModelConfig::new(2, 8, 6, 2, 4, 16), 1).unwrap(),
        1,
        &[0, 2, 5],
    )
    .unwrap();
    let tokens = vec![vec![3, 9, 1, 4, 7, 2]];
    let conv = hook_name(1, "hook_conv");
    let base = planted.model.run(&tokens, &HookRegistry::new()).unwrap();
    let xin = base.hook_value(&hook_name(1, "hook_in_proj")).unwrap();
    for offset in -3i64..=0 {
        let mut reg = HookRegistry::new();
        reg.decompose_conv(1).add(
            &conv_slice_hook(1, offset),
            HookAction::Zero {
                positions: Positions::All,
            },
        );
        let run = planted.model.run(&tokens, &reg).unwrap();
        let (a, b) = (
            run.hook_value(&conv).unwrap(),
            base.hook_value(&conv).unwrap(),
        );
        for t in 1..6 {
            for &c in &planted.channels {
                let lost = b.get(&[0, t, c]) - a.get(&[0, t, c]);
                let want = if offset == -1 {
                    xin.get(&[0, t - 1, c])
                } else {
                    0.0
                };
                assert!((lost - want).abs() < 1e-12, "tap {offset} t {t} c {c}");
            }
        }
    }
    let w = &planted.model.layers[1].conv_weight;
    for &c in &planted.channels {
        assert_eq!(
            (0..4).map(|t| w.get(&[c, t])).collect::<Vec<_>>(),
            vec![0.0, 0.0, 1.0, 0.0]
        );
    }
}

#[test]
fn planting_rejects_bad_arguments() {
    let narrow = Model::random(ModelConfig::new(1, 8, 6, 2, 1, 16), 0).unwrap();
    assert!(plant_shift_layer(&narrow, 0, &[0]).is_err());
    let m = Model::random(ModelConfig::new(1, 8, 6, 2, 4, 16), 0).unwrap();
    assert!(plant_shift_layer(&m, 1, &[0]).is_err());
    assert!(plant_shift_layer(&m, 0, &[6]).is_err());
}

#[test]
fn planting_on_zeroed_channels_still_shifts() {
    let m = Model::random(ModelConfig::new(1, 8, 6, 2, 4, 16), 0).unwrap();
    let mut upd = std::collections::BTreeMap::new();
    let mut w = (*m.layers[0].conv_weight).clone();
    for t in 0..4 {
        w.set(&[1, t], 0.0);
    }
    upd.insert("layers.0.conv_weight".to_string(), w);
    let zeroed = m.with_parameters(upd).unwrap();
    assert!(plant_shift_layer(&zeroed, 0, &[1]).is_ok());
}

#[test]
fn planted_ioi_model_prefers_the_name_mentioned_once_over_repeated_ones() {
    let planted = planted_ioi_model(4, 2, 0).unwrap();
    let tok = Tokenizer::for_lexicon(&Lexicon::default()).unwrap();
    let cfg = DatasetConfig {
        templates: TemplateId::ALL.to_vec(),
        count: 40,
        seed: 11,
        ..DatasetConfig::default()
    };
    let pairs = generate_batch(&cfg, &tok).unwrap();
    for p in &pairs {
        let logits = planted
            .model
            .forward(std::slice::from_ref(&p.clean), &HookRegistry::new())
            .unwrap();
        let (l, v) = (logits.shape()[1], logits.shape()[2]);
        let row = &logits.data()[(l - 1) * v..];
        for &c in &p.names {
            if c != p.answer {
                assert!(row[p.answer] > row[c], "{:?}", p.template);
            }
        }
    }
    // Hidden state counts names: the conv reads the previous token.
    let run = planted
        .model
        .run(&[pairs[0].clean.clone()], &HookRegistry::new())
        .unwrap();
    let conv = run.hook_value(&hook_name(2, "hook_conv")).unwrap();
    let names = name_tokens().unwrap();
    let p1 = pairs[0].positions.name(1);
    let ch = names.iter().position(|&n| n == pairs[0].names[0]).unwrap();
    assert!(conv.get(&[0, p1 + 1, ch]) > 1.0);
    assert_eq!(conv.get(&[0, p1, ch]), 0.0);
}
