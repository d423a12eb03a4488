//! Toy models with known structure: a name-recall training task, an Adam
//! trainer, and hand-built models whose layers implement a planted shift.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ioi::{generate_batch, DatasetConfig, Lexicon, PromptPair, TemplateId, Tokenizer};
use crate::model::{hook_name, HookRegistry, Model, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub log_every: usize,
    pub eval_every: usize,
    /// Stop early once held-out accuracy reaches this.
    pub stop_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            log_every: 50,
            eval_every: 250,
            stop_accuracy: Some(0.99),
        }
    }
}

/// One JSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Hyperparameters and task description; the first JSON line.
    pub header: serde_json::Value,
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)? + "\n";
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<TrainingLog> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Config("empty training log".into()))?,
        )?;
        let entries = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(TrainingLog { header, entries })
    }
}

/// Token sequences of equal length and the token expected after each.
pub type TrainBatch = (Vec<Vec<usize>>, Vec<usize>);

/// Mean cross-entropy of the next-token prediction at the final position,
/// with gradients for every parameter.
pub fn loss_and_grads(
    model: &Model,
    tokens: &[Vec<usize>],
    targets: &[usize],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut run = model.run(tokens, &HookRegistry::new())?;
    let shape = run.tape.shape(run.logits).to_vec();
    let (b, l, v) = (shape[0], shape[1], shape[2]);
    let tape = &mut run.tape;
    let last = tape.slice(run.logits, 1, l - 1, 1)?;
    let rows = tape.reshape(last, &[b, v])?;
    let logp = tape.log_softmax(rows)?;
    let picked = tape.take_along_last(logp, targets)?;
    let total = tape.sum_all(picked);
    let loss = tape.scale(total, -1.0 / b as f64);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, _) in model.named_parameters() {
        let id = run
            .param_node(&name)
            .ok_or_else(|| Error::UnknownHook(name.clone()))?;
        out.insert(name, grads.get(id));
    }
    Ok((value, out))
}

/// Fraction of sequences whose final-position argmax equals the target.
pub fn accuracy(model: &Model, tokens: &[Vec<usize>], targets: &[usize]) -> Result<f64> {
    let logits = model.forward(tokens, &HookRegistry::new())?;
    let (l, v) = (logits.shape()[1], logits.shape()[2]);
    let mut hits = 0;
    for (b, &t) in targets.iter().enumerate() {
        let row = &logits.data()[(b * l + l - 1) * v..(b * l + l) * v];
        let best = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if *x > row[best] { i } else { best });
        hits += usize::from(best == t);
    }
    Ok(hits as f64 / targets.len() as f64)
}

/// Trains `model` with Adam on batches from `sample`. `evaluate` supplies
/// held-out accuracy every `eval_every` steps and at the end.
pub fn train(
    mut model: Model,
    cfg: &TrainConfig,
    header: serde_json::Value,
    mut sample: impl FnMut(&mut ChaCha8Rng, usize) -> Result<TrainBatch>,
    mut evaluate: impl FnMut(&Model) -> Result<f64>,
) -> Result<(Model, TrainingLog, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let a = &cfg.adam;
    let mut m: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut v: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut log = TrainingLog {
        header,
        entries: Vec::new(),
    };
    let mut acc = 0.0;
    for step in 1..=cfg.steps {
        let (tokens, targets) = sample(&mut rng, cfg.batch_size)?;
        let (loss, grads) = match loss_and_grads(&model, &tokens, &targets) {
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                })
            }
            r => r?,
        };
        if !loss.is_finite()
            || grads
                .values()
                .any(|g| g.data().iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Diverged { step, loss });
        }
        let norm = grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let clip = match a.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let t = step as i32;
        let (bc1, bc2) = (1.0 - a.beta1.powi(t), 1.0 - a.beta2.powi(t));
        let mut updates = BTreeMap::new();
        for (name, param) in model.named_parameters() {
            let g = &grads[&name];
            let mm = m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let vv = v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut data = param.data().to_vec();
            for i in 0..data.len() {
                let gi = g.data()[i] * clip;
                mm[i] = a.beta1 * mm[i] + (1.0 - a.beta1) * gi;
                vv[i] = a.beta2 * vv[i] + (1.0 - a.beta2) * gi * gi;
                data[i] -= a.lr * (mm[i] / bc1) / ((vv[i] / bc2).sqrt() + a.eps);
            }
            updates.insert(name, Tensor::new(param.shape().to_vec(), data)?);
        }
        model = model.with_parameters(updates)?;

        let eval_now = (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps;
        let accuracy = if eval_now {
            Some(evaluate(&model)?)
        } else {
            None
        };
        if accuracy.is_some() || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            log.entries.push(LogEntry {
                step,
                loss,
                accuracy,
            });
        }
        if let Some(x) = accuracy {
            acc = x;
            log::debug!("step {step}: loss {loss:.4}, held-out accuracy {x:.4}");
            if cfg.stop_accuracy.is_some_and(|s| x >= s) {
                break;
            }
        }
    }
    Ok((model, log, acc))
}

/// The name-recall task: IOI-style prompts with three distinct names in the
/// first clause; the model must predict the one not repeated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub model: ModelConfig,
    pub templates: Vec<TemplateId>,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub eval_count: usize,
    pub eval_seed: u64,
    pub target_accuracy: f64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            model: ModelConfig::new(4, 16, 32, 4, 4, 64),
            templates: TemplateId::ALL.to_vec(),
            init_seed: 0,
            train: TrainConfig::default(),
            eval_count: 512,
            eval_seed: 1_000_003,
            target_accuracy: 0.95,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyRun {
    pub model: Model,
    pub log: TrainingLog,
    pub accuracy: f64,
}

fn clean_batch(pairs: &[PromptPair]) -> TrainBatch {
    (
        pairs.iter().map(|p| p.clean.clone()).collect(),
        pairs.iter().map(|p| p.answer).collect(),
    )
}

/// Held-out accuracy of `model` on the toy task, over every template.
pub fn toy_accuracy(model: &Model, spec: &ToyTaskSpec) -> Result<f64> {
    let tok = Tokenizer::for_lexicon(&Lexicon::default())?;
    let mut hits = 0.0;
    let mut n = 0;
    for (i, &t) in spec.templates.iter().enumerate() {
        let cfg = DatasetConfig {
            templates: vec![t],
            count: spec.eval_count / spec.templates.len(),
            seed: spec.eval_seed + i as u64,
            ..DatasetConfig::default()
        };
        let pairs = generate_batch(&cfg, &tok)?;
        let (x, y) = clean_batch(&pairs);
        hits += accuracy(model, &x, &y)? * y.len() as f64;
        n += y.len();
    }
    Ok(hits / n as f64)
}

/// Trains the toy model and returns it whatever the final accuracy.
pub fn train_toy_unchecked(spec: &ToyTaskSpec) -> Result<ToyRun> {
    let tok = Tokenizer::for_lexicon(&Lexicon::default())?;
    if spec.model.vocab_size != tok.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match the toy vocabulary ({})",
            spec.model.vocab_size,
            tok.len()
        )));
    }
    if spec.templates.is_empty() {
        return Err(Error::Config("templates must not be empty".into()));
    }
    let model = Model::random(spec.model.clone(), spec.init_seed)?;
    let header = serde_json::json!({ "task": "ioi-name-recall", "spec": spec });
    let templates = spec.templates.clone();
    let sample = |rng: &mut ChaCha8Rng, n: usize| -> Result<TrainBatch> {
        let t = templates[rng.gen_range(0..templates.len())];
        let cfg = DatasetConfig {
            templates: vec![t],
            count: n,
            seed: rng.gen(),
            ..DatasetConfig::default()
        };
        Ok(clean_batch(&generate_batch(&cfg, &tok)?))
    };
    let (model, log, accuracy) = train(model, &spec.train, header, sample, |m| {
        toy_accuracy(m, spec)
    })?;
    Ok(ToyRun {
        model,
        log,
        accuracy,
    })
}

/// Trains the toy model; fails unless held-out accuracy reaches the target.
pub fn train_toy(spec: &ToyTaskSpec) -> Result<ToyRun> {
    let run = train_toy_unchecked(spec)?;
    if run.accuracy < spec.target_accuracy {
        return Err(Error::TrainingFailed {
            target: spec.target_accuracy,
            achieved: run.accuracy,
            steps: run.log.entries.last().map_or(0, |e| e.step),
        });
    }
    Ok(run)
}

/// A model with a layer whose conv copies designated channels one position
/// forward.
#[derive(Clone, Debug)]
pub struct PlantedModel {
    pub model: Model,
    pub layer: usize,
    pub channels: Vec<usize>,
}

/// Sets the conv filter of `channels` in `layer` to a delta at tap −1 and
/// checks on a probe batch that those conv outputs equal the previous
/// position's `hook_in_proj` (plus bias).
pub fn plant_shift_layer(model: &Model, layer: usize, channels: &[usize]) -> Result<PlantedModel> {
    let cfg = model.config();
    if cfg.d_conv < 2 {
        return Err(Error::invalid(
            "plant_shift_layer",
            "conv width 1 cannot shift",
        ));
    }
    if layer >= cfg.n_layers {
        return Err(Error::invalid(
            "plant_shift_layer",
            format!("layer {layer} out of range"),
        ));
    }
    if let Some(&c) = channels.iter().find(|&&c| c >= cfg.d_inner) {
        return Err(Error::invalid(
            "plant_shift_layer",
            format!("channel {c} out of range"),
        ));
    }
    let k = cfg.d_conv;
    let mut w = (*model.layers[layer].conv_weight).clone();
    for &c in channels {
        for tap in 0..k {
            w.set(&[c, tap], if tap == k - 2 { 1.0 } else { 0.0 });
        }
    }
    let mut upd = BTreeMap::new();
    upd.insert(format!("layers.{layer}.conv_weight"), w);
    let planted = model.with_parameters(upd)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let probe: Vec<Vec<usize>> = (0..2)
        .map(|_| (0..6).map(|_| rng.gen_range(0..cfg.vocab_size)).collect())
        .collect();
    let run = planted.run(&probe, &HookRegistry::new())?;
    let xin = run.hook_value(&hook_name(layer, "hook_in_proj"))?;
    let conv = run.hook_value(&hook_name(layer, "hook_conv"))?;
    let bias = &planted.layers[layer].conv_bias;
    for b in 0..2 {
        for t in 0..6 {
            for &c in channels {
                let prev = if t == 0 { 0.0 } else { xin.get(&[b, t - 1, c]) };
                let want = bias.get(&[c]) + prev;
                if (conv.get(&[b, t, c]) - want).abs() > 1e-12 {
                    return Err(Error::invalid(
                        "plant_shift_layer",
                        format!("planted channel {c} does not shift at position {t}"),
                    ));
                }
            }
        }
    }
    Ok(PlantedModel {
        model: planted,
        layer,
        channels: channels.to_vec(),
    })
}

/// A model whose only active path is one shift layer: names are copied one
/// position forward by the conv, counted by the scan, and each name's logit
/// falls with its count, so the name mentioned once wins. Every other layer
/// has a zero output projection.
///
/// Residual width is `vocab + 1` (one-hot token plus a constant channel);
/// the shift layer has one inner channel per name plus a constant channel.
pub fn planted_ioi_model(n_layers: usize, layer: usize, seed: u64) -> Result<PlantedModel> {
    let lexicon = Lexicon::default();
    let tok = Tokenizer::for_lexicon(&lexicon)?;
    let names: Vec<usize> = lexicon
        .names
        .iter()
        .map(|n| tok.single_token(n))
        .collect::<Result<_>>()?;
    let v = tok.len();
    let d = v + 1;
    let e = names.len() + 1;
    let konst = names.len();
    let mut cfg = ModelConfig::new(n_layers, d, e, 1, 4, v);
    cfg.norm_eps = 1e-9;
    let base = Model::random(cfg, seed)?;

    let mut upd = BTreeMap::new();
    upd.insert(
        "embed".to_string(),
        Tensor::from_fn(
            &[v, d],
            |i| if i[1] == i[0] || i[1] == v { 1.0 } else { 0.0 },
        ),
    );
    upd.insert(
        "unembed".to_string(),
        Tensor::from_fn(&[v, d], |i| if i[0] == i[1] { 1.0 } else { 0.0 }),
    );
    for l in 0..n_layers {
        upd.insert(format!("layers.{l}.w_out"), Tensor::zeros(&[d, e]));
    }
    let p = |s: &str| format!("layers.{layer}.{s}");
    upd.insert(
        p("w_in"),
        Tensor::from_fn(&[e, d], |i| {
            let hit = if i[0] == konst {
                i[1] == v
            } else {
                i[1] == names[i[0]]
            };
            if hit {
                1.0
            } else {
                0.0
            }
        }),
    );
    upd.insert(
        p("w_skip"),
        Tensor::from_fn(&[e, d], |i| if i[1] == v { 1.0 } else { 0.0 }),
    );
    // The constant channel passes through tap 0; name channels get their
    // shift from `plant_shift_layer`.
    upd.insert(
        p("conv_weight"),
        Tensor::from_fn(
            &[e, 4],
            |i| if i[0] == konst && i[1] == 3 { 1.0 } else { 0.0 },
        ),
    );
    upd.insert(p("conv_bias"), Tensor::zeros(&[e]));
    upd.insert(
        p("w_b"),
        Tensor::from_fn(&[1, e], |i| if i[1] == konst { 0.0 } else { 1.0 }),
    );
    upd.insert(
        p("w_c"),
        Tensor::from_fn(&[1, e], |i| if i[1] == konst { 1.0 } else { 0.0 }),
    );
    upd.insert(p("a_log"), Tensor::full(&[e, 1], -20.0));
    upd.insert(p("d_skip"), Tensor::zeros(&[e]));
    upd.insert(p("dt_weight"), Tensor::zeros(&[e, e]));
    upd.insert(p("dt_bias"), Tensor::zeros(&[e]));
    upd.insert(
        p("w_out"),
        Tensor::from_fn(&[d, e], |i| {
            if i[1] != konst && i[0] == names[i[1]] {
                -0.01
            } else {
                0.0
            }
        }),
    );
    let model = base.with_parameters(upd)?;
    let channels: Vec<usize> = (0..names.len()).collect();
    plant_shift_layer(&model, layer, &channels)
}

/// Name token ids in lexicon order, matching the planted model's channels.
pub fn name_tokens() -> Result<Vec<usize>> {
    let lexicon = Lexicon::default();
    let tok = Tokenizer::for_lexicon(&lexicon)?;
    lexicon.names.iter().map(|n| tok.single_token(n)).collect()
}
