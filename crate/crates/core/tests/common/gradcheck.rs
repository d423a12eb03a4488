//! Finite-difference oracle for whole-model metric gradients.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use ssm_circuits::ioi::{Lexicon, PromptPair, Tokenizer};

use super::ioi_pairs;
use ssm_circuits::metrics::{logits_at, Metric};
use ssm_circuits::model::{load_checkpoint, HookAction, HookRegistry, Model, ModelConfig};
use ssm_circuits::patching::{Batch, PatchContext};
use ssm_circuits::tensor::Tensor;

/// Gradients smaller than this fraction of the largest gradient magnitude
/// are compared absolutely against that floor.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Four layers, `D = 16`, `E = 32`, `N = 4`, over the default IOI vocabulary.
pub fn random_toy_model(seed: u64) -> Model {
    let vocab = Tokenizer::for_lexicon(&Lexicon::default()).unwrap().len();
    Model::random(ModelConfig::new(4, 16, 32, 4, 4, vocab), seed).unwrap()
}

/// The trained toy-task fixture, same shape as [`random_toy_model`].
pub fn trained_toy_model() -> Model {
    let path =
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata/toy_ioi.safetensors");
    load_checkpoint(&path, None, None).unwrap()
}

/// Among the first 32 generated pairs, the one whose normalised logit diff
/// has the largest denominator `|clean A−B − corrupted A−B|`. Near-equal
/// gaps make the metric, and its finite differences, ill-conditioned.
pub fn well_conditioned_pair(model: &Model, seed: u64) -> PromptPair {
    ioi_pairs(32, seed)
        .into_iter()
        .map(|p| {
            let b = Batch::from_pairs(std::slice::from_ref(&p)).unwrap();
            let ctx = PatchContext::new(model, b, Metric::LogitDiff).unwrap();
            let gap = (ctx.clean_metric().unwrap() - ctx.corrupted_metric().unwrap()).abs();
            (gap, p)
        })
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap()
        .1
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub max_abs_grad: f64,
    pub max_rel_error: f64,
    pub worst: String,
}

struct Probe {
    label: String,
    analytic: f64,
    numeric: f64,
}

fn summarise(probes: Vec<Probe>) -> GradCheck {
    let max_abs_grad = probes.iter().fold(0.0f64, |m, p| m.max(p.analytic.abs()));
    let floor = GRAD_FLOOR * max_abs_grad;
    let mut out = GradCheck {
        checked: probes.len(),
        max_abs_grad,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for p in probes {
        let e = (p.analytic - p.numeric).abs() / p.analytic.abs().max(p.numeric.abs()).max(floor);
        if e > out.max_rel_error || out.worst.is_empty() {
            out.max_rel_error = e;
            out.worst = format!(
                "{}: analytic {:e}, numeric {:e}",
                p.label, p.analytic, p.numeric
            );
        }
    }
    out
}

/// Compares the tape gradient of the batch-mean `metric` against central
/// differences with step `h`, over every parameter element and every element
/// of every hook that fires in an unpatched run. The metric's baselines stay
/// fixed at the unperturbed model's values. `stride > 1` checks every
/// `stride`-th element only.
pub fn gradient_check(
    model: &Model,
    pair: &PromptPair,
    metric: Metric,
    h: f64,
    stride: usize,
) -> GradCheck {
    let batch = Batch::from_pairs(std::slice::from_ref(pair)).unwrap();
    let ctx = PatchContext::new(model, batch, metric).unwrap();
    let tokens = ctx.batch.clean.clone();
    let pos = ctx.batch.answer_position();
    let eval = |m: &Model, reg: &HookRegistry| -> f64 {
        let logits = m.forward(&tokens, reg).unwrap();
        ctx.baseline
            .batch_mean(
                metric,
                &logits_at(&logits, pos).unwrap(),
                &ctx.batch.targets,
            )
            .unwrap()
    };

    let mut run = model.run(&tokens, &HookRegistry::new()).unwrap();
    let loss = ctx.metric_node(&mut run).unwrap();
    let grads = run.tape.backward(loss).unwrap();
    let empty = HookRegistry::new();

    let params = model.named_parameters();
    let param_jobs: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(k, (_, t))| (0..t.len()).step_by(stride).map(move |i| (k, i)))
        .collect();
    let by_params = param_jobs
        .par_iter()
        .map(|&(k, i)| {
            let (name, t) = &params[k];
            let at = |d: f64| {
                let mut p = (**t).clone();
                p.data_mut()[i] += d;
                eval(
                    &model
                        .with_parameters(BTreeMap::from([(name.clone(), p)]))
                        .unwrap(),
                    &empty,
                )
            };
            Probe {
                label: format!("{name}[{i}]"),
                analytic: run
                    .param_node(name)
                    .map_or(0.0, |id| grads.get(id).data()[i]),
                numeric: (at(h) - at(-h)) / (2.0 * h),
            }
        })
        .collect::<Vec<_>>();

    let hooks: Vec<(String, Tensor)> = run
        .fired_hooks()
        .map(|n| (n.to_string(), grads.get(run.hook_node(n).unwrap())))
        .collect();
    let hook_jobs: Vec<(usize, usize)> = hooks
        .iter()
        .enumerate()
        .flat_map(|(k, (_, g))| (0..g.len()).step_by(stride).map(move |i| (k, i)))
        .collect();
    let by_hooks = hook_jobs
        .par_iter()
        .map(|&(k, i)| {
            let (name, g) = &hooks[k];
            let at = |d: f64| {
                let mut delta = Tensor::zeros(g.shape());
                delta.data_mut()[i] = d;
                let mut reg = HookRegistry::new();
                reg.add(
                    name,
                    HookAction::Add {
                        delta: Arc::new(delta),
                    },
                );
                eval(model, &reg)
            };
            Probe {
                label: format!("{name}[{i}]"),
                analytic: g.data()[i],
                numeric: (at(h) - at(-h)) / (2.0 * h),
            }
        })
        .collect::<Vec<_>>();
    summarise(by_params.into_iter().chain(by_hooks).collect())
}
