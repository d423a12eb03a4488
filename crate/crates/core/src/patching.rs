//! Interventions on a clean forward pass: resample, zero and mean
//! ablation, residual edge patching, conv-slice and hidden-state patching,
//! layer removal, and the greedy layer-selection procedures.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::ioi::{PromptPair, SemanticPositions};
use crate::metrics::{logits_at, mean, Baseline, Metric, Targets};
use crate::model::{
    conv_slice_hook, h_hook, hook_name, ActivationCache, EdgePatch, EdgeSource, EdgeTarget,
    HookAction, HookRegistry, Model, Positions, Provenance, Run,
};
use crate::report::Grid;
use crate::tensor::Tensor;

/// Prompt pairs of one shared length, ready to run as a single batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub pairs: Vec<PromptPair>,
    pub clean: Vec<Vec<usize>>,
    pub corrupted: Vec<Vec<usize>>,
    pub targets: Targets,
    /// Labels of the first pair; pairs from templates sharing name
    /// positions all carry the same labels.
    pub positions: SemanticPositions,
    uniform_positions: bool,
}

impl Batch {
    pub fn from_pairs(pairs: &[PromptPair]) -> Result<Batch> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::Dataset("empty batch".into()))?;
        let len = first.len();
        if let Some(p) = pairs
            .iter()
            .find(|p| p.len() != len || p.corrupted.len() != len)
        {
            return Err(Error::Dataset(format!(
                "prompt lengths differ within a batch ({len} vs {}); restrict to templates sharing positions",
                p.len()
            )));
        }
        let uniform_positions = pairs.iter().all(|p| p.positions == first.positions);
        Ok(Batch {
            clean: pairs.iter().map(|p| p.clean.clone()).collect(),
            corrupted: pairs.iter().map(|p| p.corrupted.clone()).collect(),
            targets: Targets {
                answers: pairs.iter().map(|p| p.answer).collect(),
                corrupted_answers: pairs.iter().map(|p| p.corrupted_answer).collect(),
                candidates: pairs.iter().map(|p| p.candidates).collect(),
            },
            positions: first.positions.clone(),
            pairs: pairs.to_vec(),
            uniform_positions,
        })
    }

    /// Splits pairs into equal-length batches, ordered by length.
    pub fn group_by_length(pairs: &[PromptPair]) -> Result<Vec<Batch>> {
        let mut groups: BTreeMap<usize, Vec<PromptPair>> = BTreeMap::new();
        for p in pairs {
            groups.entry(p.len()).or_default().push(p.clone());
        }
        groups.values().map(|g| Batch::from_pairs(g)).collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.positions.len()
    }

    pub fn answer_position(&self) -> usize {
        self.seq_len() - 1
    }

    /// Position labels, or an error if pairs disagree on them.
    pub fn shared_positions(&self) -> Result<&SemanticPositions> {
        if self.uniform_positions {
            Ok(&self.positions)
        } else {
            Err(Error::Dataset(
                "pairs in this batch put names at different positions; use templates that share name positions".into(),
            ))
        }
    }
}

/// Which token positions an intervention touches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    All,
    Indices(Vec<usize>),
    /// Semantic labels such as `n1` or `out`.
    Labels(Vec<String>),
}

impl Selector {
    pub fn at(pos: usize) -> Selector {
        Selector::Indices(vec![pos])
    }

    fn resolve(&self, positions: &SemanticPositions) -> Result<Positions> {
        let len = positions.len();
        match self {
            Selector::All => Ok(Positions::All),
            Selector::Indices(ix) => {
                if let Some(&bad) = ix.iter().find(|&&p| p >= len) {
                    return Err(Error::Patch(format!(
                        "position {bad} out of range for length {len}"
                    )));
                }
                Ok(Positions::Only(ix.clone()))
            }
            Selector::Labels(ls) => ls
                .iter()
                .map(|l| {
                    positions
                        .index(l)
                        .ok_or_else(|| Error::Patch(format!("unknown position label `{l}`")))
                })
                .collect::<Result<_>>()
                .map(Positions::Only),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Mode {
    /// Substitute the value from the corrupted run.
    Resample,
    Zero,
    /// Substitute the dataset mean for this (hook, position).
    Mean,
    Replace(Arc<Tensor>),
    /// Adds `new - old` at the selected positions; both are full
    /// activation-shaped tensors.
    SubtractAdd {
        old: Arc<Tensor>,
        new: Arc<Tensor>,
    },
    /// Move a fraction `alpha` of the way to the corrupted value.
    PartialResample(f64),
}

#[derive(Clone, Debug)]
pub struct Intervention {
    pub hook: String,
    pub positions: Selector,
    pub mode: Mode,
}

impl Intervention {
    pub fn resample(hook: impl Into<String>, positions: Selector) -> Intervention {
        Intervention {
            hook: hook.into(),
            positions,
            mode: Mode::Resample,
        }
    }

    pub fn zero(hook: impl Into<String>) -> Intervention {
        Intervention {
            hook: hook.into(),
            positions: Selector::All,
            mode: Mode::Zero,
        }
    }
}

/// A residual-stream edge to patch: `input_dst += alpha·(corrupted out_src − out_src)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeRef {
    pub src: EdgeSource,
    pub dst: EdgeTarget,
    pub positions: Selector,
    pub alpha: f64,
}

impl EdgeRef {
    pub fn new(src: EdgeSource, dst: EdgeTarget) -> Result<EdgeRef> {
        if !src.precedes(&dst) {
            return Err(Error::Patch(format!(
                "edge {src:?} -> {dst:?} does not point forward"
            )));
        }
        Ok(EdgeRef {
            src,
            dst,
            positions: Selector::All,
            alpha: 1.0,
        })
    }

    pub fn at(mut self, positions: Selector) -> EdgeRef {
        self.positions = positions;
        self
    }

    pub fn scaled(mut self, alpha: f64) -> EdgeRef {
        self.alpha = alpha;
        self
    }
}

/// Interventions applied together in one forward pass.
#[derive(Clone, Debug, Default)]
pub struct PatchPlan {
    interventions: Vec<Intervention>,
    edges: Vec<EdgeRef>,
}

fn overlaps(a: &Selector, b: &Selector) -> bool {
    match (a, b) {
        (Selector::All, _) | (_, Selector::All) => true,
        (Selector::Indices(x), Selector::Indices(y)) => x.iter().any(|p| y.contains(p)),
        (Selector::Labels(x), Selector::Labels(y)) => x.iter().any(|p| y.contains(p)),
        _ => false,
    }
}

impl PatchPlan {
    pub fn new() -> PatchPlan {
        PatchPlan::default()
    }

    pub fn is_empty(&self) -> bool {
        self.interventions.is_empty() && self.edges.is_empty()
    }

    pub fn interventions(&self) -> &[Intervention] {
        &self.interventions
    }

    pub fn edges(&self) -> &[EdgeRef] {
        &self.edges
    }

    /// Adds an intervention; a second one on an overlapping (hook,
    /// position) is rejected.
    pub fn push(&mut self, iv: Intervention) -> Result<&mut Self> {
        let hook = crate::model::canonical_name(&iv.hook);
        if let Some(prev) = self.interventions.iter().find(|p| {
            crate::model::canonical_name(&p.hook) == hook && overlaps(&p.positions, &iv.positions)
        }) {
            return Err(Error::Patch(format!(
                "conflicting interventions on `{hook}` ({:?} and {:?})",
                prev.positions, iv.positions
            )));
        }
        self.interventions.push(Intervention { hook, ..iv });
        Ok(self)
    }

    pub fn with(mut self, iv: Intervention) -> Result<PatchPlan> {
        self.push(iv)?;
        Ok(self)
    }

    pub fn push_edge(&mut self, e: EdgeRef) -> Result<&mut Self> {
        if let Some(prev) = self
            .edges
            .iter()
            .find(|p| p.src == e.src && p.dst == e.dst && overlaps(&p.positions, &e.positions))
        {
            return Err(Error::Patch(format!(
                "edge {:?} -> {:?} patched twice ({:?} and {:?})",
                e.src, e.dst, prev.positions, e.positions
            )));
        }
        self.edges.push(e);
        Ok(self)
    }
}

/// Per-(hook, position) means of clean activations over a dataset.
#[derive(Clone, Debug, Default)]
pub struct MeanCache {
    entries: BTreeMap<String, Arc<Tensor>>,
}

impl MeanCache {
    /// Averages every canonical hook over the batch axis of all batches;
    /// batches must share one length.
    pub fn build(model: &Model, batches: &[Batch]) -> Result<MeanCache> {
        let mut sums: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut count = 0usize;
        let len = batches.first().map(Batch::seq_len);
        for b in batches {
            if Some(b.seq_len()) != len {
                return Err(Error::Dataset(
                    "mean ablation needs prompts of a single length".into(),
                ));
            }
            let run = model.run(&b.clean, &HookRegistry::new())?;
            for name in run.fired_hooks() {
                let v = run.hook_value(name)?;
                let s = v.sum_axis(0)?;
                match sums.get_mut(name) {
                    Some(acc) => *acc = acc.add(&s)?,
                    None => {
                        sums.insert(name.to_string(), s);
                    }
                }
            }
            count += b.len();
        }
        if count == 0 {
            return Err(Error::Dataset(
                "mean ablation needs at least one prompt".into(),
            ));
        }
        Ok(MeanCache {
            entries: sums
                .into_iter()
                .map(|(k, v)| (k, Arc::new(v.scale(1.0 / count as f64))))
                .collect(),
        })
    }

    /// Mean activation of `hook` without the batch axis.
    pub fn get(&self, hook: &str) -> Result<&Arc<Tensor>> {
        self.entries
            .get(&crate::model::canonical_name(hook))
            .ok_or_else(|| Error::UnknownHook(hook.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let refs: Vec<(String, &Tensor)> = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), v.as_ref()))
            .collect();
        crate::model::save_tensors(path, &refs, HashMap::new(), crate::autodiff::Precision::F64)
    }

    pub fn load(path: &Path) -> Result<MeanCache> {
        let (tensors, _) = crate::model::load_tensors(path)?;
        Ok(MeanCache {
            entries: tensors.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        })
    }
}

/// Outcome of one patched forward pass.
#[derive(Clone, Debug)]
pub struct PatchOutcome {
    pub per_example: Vec<f64>,
    pub mean: f64,
    /// Answer-position logits `[B, V]`.
    pub answer_logits: Tensor,
    pub cache: Option<ActivationCache>,
}

/// Clean and corrupted runs of one batch, with their caches and the
/// metric baseline.
pub struct PatchContext<'m> {
    pub model: &'m Model,
    pub batch: Batch,
    pub metric: Metric,
    pub clean: ActivationCache,
    pub corrupted: ActivationCache,
    pub baseline: Baseline,
    pub clean_logits: Tensor,
    pub corrupted_logits: Tensor,
    means: Option<Arc<MeanCache>>,
}

impl<'m> PatchContext<'m> {
    pub fn new(model: &'m Model, batch: Batch, metric: Metric) -> Result<PatchContext<'m>> {
        let clean_run = model.run(&batch.clean, &HookRegistry::new())?;
        let corr_run = model.run(&batch.corrupted, &HookRegistry::new())?;
        let pos = batch.answer_position();
        let baseline = Baseline {
            unpatched: logits_at(clean_run.logits(), pos)?,
            corrupted: logits_at(corr_run.logits(), pos)?,
        };
        Ok(PatchContext {
            model,
            metric,
            clean: clean_run.cache(Provenance::Clean),
            corrupted: corr_run.cache(Provenance::Corrupted),
            clean_logits: clean_run.logits().clone(),
            corrupted_logits: corr_run.logits().clone(),
            baseline,
            batch,
            means: None,
        })
    }

    /// One context per prompt length.
    pub fn for_pairs(
        model: &'m Model,
        pairs: &[PromptPair],
        metric: Metric,
    ) -> Result<Vec<PatchContext<'m>>> {
        Batch::group_by_length(pairs)?
            .into_iter()
            .map(|b| PatchContext::new(model, b, metric))
            .collect()
    }

    pub fn with_means(mut self, means: Arc<MeanCache>) -> Self {
        self.means = Some(means);
        self
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    /// Corrupted-run value of `hook`; conv slices are derived from the
    /// corrupted `hook_in_proj`.
    pub fn corrupted_value(&self, hook: &str) -> Result<Arc<Tensor>> {
        source_value(&self.corrupted, hook)
    }

    pub fn clean_value(&self, hook: &str) -> Result<Arc<Tensor>> {
        source_value(&self.clean, hook)
    }

    fn mean_value(&self, hook: &str, shape: &[usize]) -> Result<Arc<Tensor>> {
        let means = self
            .means
            .as_ref()
            .ok_or_else(|| Error::Patch("mean ablation needs a mean cache".into()))?;
        let m = means.get(hook)?;
        let mut with_batch = vec![1];
        with_batch.extend_from_slice(m.shape());
        let t = m.reshape(&with_batch)?.broadcast_to(shape).map_err(|_| {
            Error::Patch(format!(
                "`{hook}`: mean has shape {:?}, activation has {shape:?}",
                m.shape()
            ))
        })?;
        Ok(Arc::new(t))
    }

    /// Resolves a symbolic plan against this context's caches.
    pub fn registry(&self, plan: &PatchPlan) -> Result<HookRegistry> {
        let mut reg = HookRegistry::new();
        let mut claimed: HashMap<String, BTreeSet<usize>> = HashMap::new();
        let len = self.batch.seq_len();
        for iv in &plan.interventions {
            let hook = &iv.hook;
            let clean = self
                .clean_value(hook)
                .map_err(|_| Error::UnknownHook(hook.clone()))?;
            let shape = clean.shape().to_vec();
            let positions = iv.positions.resolve(&self.batch.positions)?;
            let set: BTreeSet<usize> = match &positions {
                Positions::All => (0..len).collect(),
                Positions::Only(ps) => ps.iter().copied().collect(),
            };
            let seen = claimed.entry(hook.clone()).or_default();
            if let Some(p) = set.iter().find(|p| seen.contains(p)) {
                return Err(Error::Patch(format!(
                    "conflicting interventions on `{hook}` at position {p}"
                )));
            }
            seen.extend(set);
            let check = |t: &Tensor| -> Result<()> {
                if t.shape() != shape.as_slice() {
                    return Err(Error::Patch(format!(
                        "`{hook}` at {:?}: source has shape {:?}, live activation has {shape:?}",
                        iv.positions,
                        t.shape()
                    )));
                }
                Ok(())
            };
            let action = match &iv.mode {
                Mode::Resample => {
                    let v = self.corrupted_value(hook)?;
                    check(&v)?;
                    HookAction::Replace {
                        positions,
                        value: v,
                    }
                }
                Mode::PartialResample(alpha) => {
                    let v = self.corrupted_value(hook)?;
                    check(&v)?;
                    HookAction::Interpolate {
                        positions,
                        value: v,
                        alpha: *alpha,
                    }
                }
                Mode::Zero => HookAction::Zero { positions },
                Mode::Mean => HookAction::Replace {
                    positions,
                    value: self.mean_value(hook, &shape)?,
                },
                Mode::Replace(v) => {
                    check(v)?;
                    HookAction::Replace {
                        positions,
                        value: v.clone(),
                    }
                }
                Mode::SubtractAdd { old, new } => {
                    check(old)?;
                    check(new)?;
                    let mask =
                        Tensor::from_fn(
                            &shape,
                            |i| if positions.contains(i[1]) { 1.0 } else { 0.0 },
                        );
                    HookAction::Add {
                        delta: Arc::new(new.sub(old)?.mul(&mask)?),
                    }
                }
            };
            reg.add(hook, action);
        }
        for e in &plan.edges {
            let corrupted = self.corrupted_value(&e.src.hook())?;
            reg.add_edge(EdgePatch {
                src: e.src,
                dst: e.dst,
                positions: e.positions.resolve(&self.batch.positions)?,
                alpha: e.alpha,
                corrupted,
            })?;
        }
        Ok(reg)
    }

    pub fn run(&self, reg: &HookRegistry) -> Result<Run> {
        self.model.run(&self.batch.clean, reg)
    }

    pub fn evaluate_registry(&self, reg: &HookRegistry, keep_cache: bool) -> Result<PatchOutcome> {
        let run = self.run(reg)?;
        let answer_logits = logits_at(run.logits(), self.batch.answer_position())?;
        let per_example =
            self.baseline
                .per_example(self.metric, &answer_logits, &self.batch.targets)?;
        Ok(PatchOutcome {
            mean: mean(&per_example),
            per_example,
            answer_logits,
            cache: keep_cache.then(|| run.cache(Provenance::Patched)),
        })
    }

    /// Clean forward pass with `plan` applied; metric on the patched logits.
    pub fn run_with_plan(&self, plan: &PatchPlan) -> Result<PatchOutcome> {
        self.evaluate_registry(&self.registry(plan)?, false)
    }

    pub fn run_with_plan_cached(&self, plan: &PatchPlan) -> Result<PatchOutcome> {
        self.evaluate_registry(&self.registry(plan)?, true)
    }

    pub fn clean_metric(&self) -> Result<f64> {
        self.baseline
            .batch_mean(self.metric, &self.baseline.unpatched, &self.batch.targets)
    }

    pub fn corrupted_metric(&self) -> Result<f64> {
        self.baseline
            .batch_mean(self.metric, &self.baseline.corrupted, &self.batch.targets)
    }

    /// Batch-mean metric as a node on `run`'s tape.
    pub fn metric_node(&self, run: &mut Run) -> Result<NodeId> {
        metric_node_on(
            &mut run.tape,
            run.logits,
            &self.baseline,
            self.metric,
            &self.batch,
        )
    }
}

pub(crate) fn metric_node_on(
    tape: &mut Tape,
    logits: NodeId,
    baseline: &Baseline,
    metric: Metric,
    batch: &Batch,
) -> Result<NodeId> {
    let shape = tape.shape(logits).to_vec();
    let last = tape.slice(logits, 1, batch.answer_position(), 1)?;
    let rows = tape.reshape(last, &[shape[0], shape[2]])?;
    baseline.metric_node(tape, metric, rows, &batch.targets)
}

/// Shifts `[B, L, ...]` along positions by `offset ≤ 0`, zero-filling.
pub fn shift_positions(x: &Tensor, offset: i64) -> Result<Tensor> {
    if offset > 0 || x.rank() < 2 {
        return Err(Error::invalid(
            "shift_positions",
            "need offset ≤ 0 and a position axis",
        ));
    }
    let back = offset.unsigned_abs() as usize;
    Ok(Tensor::from_fn(x.shape(), |i| {
        if i[1] >= back {
            let mut j = i.to_vec();
            j[1] -= back;
            x.get(&j)
        } else {
            0.0
        }
    }))
}

fn source_value(cache: &ActivationCache, hook: &str) -> Result<Arc<Tensor>> {
    let canon = crate::model::canonical_name(hook);
    if let Some((layer, offset)) = crate::model::parse_conv_slice(&canon) {
        let x = cache.get(&hook_name(layer, "hook_in_proj"))?;
        return Ok(Arc::new(shift_positions(x, offset)?));
    }
    cache.get(&canon).cloned()
}

/// Pooled mean of per-example values over several contexts.
pub fn pooled_metric(ctxs: &[PatchContext<'_>], plan: &PatchPlan) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for c in ctxs {
        let out = c.run_with_plan(plan)?;
        total += out.per_example.iter().sum::<f64>();
        n += out.per_example.len();
    }
    Ok(total / n as f64)
}

fn pooled_baseline(ctxs: &[PatchContext<'_>], clean: bool) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for c in ctxs {
        let m = if clean {
            c.clean_metric()?
        } else {
            c.corrupted_metric()?
        };
        total += m * c.len() as f64;
        n += c.len();
    }
    Ok(total / n as f64)
}

pub fn pooled_clean_metric(ctxs: &[PatchContext<'_>]) -> Result<f64> {
    pooled_baseline(ctxs, true)
}

pub fn pooled_corrupted_metric(ctxs: &[PatchContext<'_>]) -> Result<f64> {
    pooled_baseline(ctxs, false)
}

/// Edge `src → dst` patched with the corrupted output of `src`.
pub fn patch_edge(src: EdgeSource, dst: EdgeTarget) -> Result<EdgeRef> {
    EdgeRef::new(src, dst)
}

/// Resamples only conv tap `offset` (in `-(K-1)..=0`) of `layer`.
pub fn patch_conv_slice(
    model: &Model,
    layer: usize,
    offset: i64,
    positions: Selector,
) -> Result<Intervention> {
    let k = model.config().d_conv as i64;
    if offset > 0 || offset <= -k {
        return Err(Error::Patch(format!(
            "conv slice {offset} out of range for width {k} (expected {}..=0)",
            -(k - 1)
        )));
    }
    if layer >= model.n_layers() {
        return Err(Error::Patch(format!("layer {layer} out of range")));
    }
    Ok(Intervention::resample(
        conv_slice_hook(layer, offset),
        positions,
    ))
}

/// Resamples the SSM hidden state of `layer` at `position`.
pub fn patch_hidden_state(
    ctx: &PatchContext<'_>,
    layer: usize,
    position: usize,
) -> Result<Intervention> {
    if position >= ctx.batch.seq_len() {
        return Err(Error::Patch(format!(
            "position {position} out of range for length {}",
            ctx.batch.seq_len()
        )));
    }
    if layer >= ctx.model.n_layers() {
        return Err(Error::Patch(format!("layer {layer} out of range")));
    }
    Ok(Intervention::resample(
        h_hook(layer, position),
        Selector::All,
    ))
}

pub fn remove_layer(layer: usize) -> Intervention {
    Intervention::zero(hook_name(layer, "hook_out_proj"))
}

fn removal_plan(layers: &BTreeSet<usize>) -> Result<PatchPlan> {
    let mut plan = PatchPlan::new();
    for &l in layers {
        plan.push(remove_layer(l))?;
    }
    Ok(plan)
}

/// Metric with each single layer zeroed.
pub fn layer_removal_scan(ctxs: &[PatchContext<'_>]) -> Result<Vec<f64>> {
    let n = ctxs[0].model.n_layers();
    (0..n)
        .into_par_iter()
        .map(|l| pooled_metric(ctxs, &PatchPlan::new().with(remove_layer(l))?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyStep {
    pub layer: usize,
    pub metric: f64,
    /// Size of the patched (removed or ablated) set after this step.
    pub patched: usize,
}

/// Repeatedly removes the layer whose removal lowers the metric least.
/// Ties go to the lowest layer index.
pub fn greedy_layer_removal(ctxs: &[PatchContext<'_>]) -> Result<Vec<GreedyStep>> {
    let n = ctxs[0].model.n_layers();
    let mut removed = BTreeSet::new();
    let mut steps = Vec::with_capacity(n);
    while removed.len() < n {
        let candidates: Vec<usize> = (0..n).filter(|l| !removed.contains(l)).collect();
        let scores: Vec<f64> = candidates
            .par_iter()
            .map(|&l| {
                let mut set = removed.clone();
                set.insert(l);
                pooled_metric(ctxs, &removal_plan(&set)?)
            })
            .collect::<Result<_>>()?;
        let (layer, metric) = best(&candidates, &scores);
        removed.insert(layer);
        steps.push(GreedyStep {
            layer,
            metric,
            patched: removed.len(),
        });
    }
    Ok(steps)
}

fn best(candidates: &[usize], scores: &[f64]) -> (usize, f64) {
    let mut k = 0;
    for i in 1..candidates.len() {
        if scores[i] > scores[k] {
            k = i;
        }
    }
    (candidates[k], scores[k])
}

/// Stop rule for greedy searches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Fraction of the clean metric.
    Relative(f64),
    Absolute(f64),
}

impl Target {
    pub fn resolve(self, clean: f64) -> f64 {
        match self {
            Target::Relative(f) => f * clean,
            Target::Absolute(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkResult {
    /// Layers allowed to move information across positions, in the order
    /// they were unpatched.
    pub circuit: Vec<usize>,
    pub target: f64,
    pub reached: bool,
    /// Metric with every layer's cross talk removed.
    pub start_metric: f64,
    pub log: Vec<GreedyStep>,
}

fn crosstalk_plan(layers: &BTreeSet<usize>) -> Result<PatchPlan> {
    let mut plan = PatchPlan::new();
    for &l in layers {
        plan.push(Intervention::resample(
            hook_name(l, "hook_in_proj"),
            Selector::All,
        ))?;
    }
    Ok(plan)
}

/// Starts with every layer's conv input resampled and greedily unpatches
/// the layer that helps most until the target is met.
pub fn greedy_crosstalk_circuit(
    ctxs: &[PatchContext<'_>],
    target: Target,
) -> Result<CrosstalkResult> {
    let n = ctxs[0].model.n_layers();
    let target = target.resolve(pooled_clean_metric(ctxs)?);
    let mut patched: BTreeSet<usize> = (0..n).collect();
    let start_metric = pooled_metric(ctxs, &crosstalk_plan(&patched)?)?;
    let mut current = start_metric;
    let mut circuit = Vec::new();
    let mut log = Vec::new();
    while current < target && !patched.is_empty() {
        let candidates: Vec<usize> = patched.iter().copied().collect();
        let scores: Vec<f64> = candidates
            .par_iter()
            .map(|&l| {
                let mut set = patched.clone();
                set.remove(&l);
                pooled_metric(ctxs, &crosstalk_plan(&set)?)
            })
            .collect::<Result<_>>()?;
        let (layer, metric) = best(&candidates, &scores);
        patched.remove(&layer);
        circuit.push(layer);
        current = metric;
        log.push(GreedyStep {
            layer,
            metric,
            patched: patched.len(),
        });
    }
    Ok(CrosstalkResult {
        circuit,
        target,
        reached: current >= target,
        start_metric,
        log,
    })
}

/// Resamples `hook_suffix` of each layer at each single position; cell
/// (layer, position) holds the pooled metric.
pub fn ablation_grid(ctxs: &[PatchContext<'_>], hook_suffix: &str) -> Result<Grid> {
    let positions = shared_positions(ctxs)?;
    let n = ctxs[0].model.n_layers();
    let len = positions.len();
    let mut grid = Grid::new(
        format!("{} after resampling {hook_suffix}", ctxs[0].metric),
        "layer",
        "position",
        (0..n).map(|l| l.to_string()).collect(),
        positions.labels().to_vec(),
    );
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|l| (0..len).map(move |p| (l, p))).collect();
    let values: Vec<f64> = cells
        .par_iter()
        .map(|&(l, p)| {
            let plan = PatchPlan::new().with(Intervention::resample(
                hook_name(l, hook_suffix),
                Selector::at(p),
            ))?;
            pooled_metric(ctxs, &plan)
        })
        .collect::<Result<_>>()?;
    for ((l, p), v) in cells.into_iter().zip(values) {
        grid.set(l, p, v);
    }
    Ok(grid)
}

/// Conv-slice patching of one layer: cell (slice, position).
pub fn conv_slice_grid(ctxs: &[PatchContext<'_>], layer: usize) -> Result<Grid> {
    let positions = shared_positions(ctxs)?;
    let model = ctxs[0].model;
    let k = model.config().d_conv as i64;
    let offsets: Vec<i64> = (-(k - 1)..=0).collect();
    let mut grid = Grid::new(
        format!(
            "{} after patching conv slices of layer {layer}",
            ctxs[0].metric
        ),
        "slice",
        "position",
        offsets.iter().map(|o| o.to_string()).collect(),
        positions.labels().to_vec(),
    );
    let cells: Vec<(usize, usize)> = (0..offsets.len())
        .flat_map(|r| (0..positions.len()).map(move |p| (r, p)))
        .collect();
    let values: Vec<f64> = cells
        .par_iter()
        .map(|&(r, p)| {
            let plan = PatchPlan::new().with(patch_conv_slice(
                model,
                layer,
                offsets[r],
                Selector::at(p),
            )?)?;
            pooled_metric(ctxs, &plan)
        })
        .collect::<Result<_>>()?;
    for ((r, p), v) in cells.into_iter().zip(values) {
        grid.set(r, p, v);
    }
    Ok(grid)
}

/// Hidden-state patching of one layer: metric per position.
pub fn hidden_state_scan(ctxs: &[PatchContext<'_>], layer: usize) -> Result<Vec<f64>> {
    let len = shared_positions(ctxs)?.len();
    (0..len)
        .into_par_iter()
        .map(|p| {
            pooled_metric(
                ctxs,
                &PatchPlan::new().with(patch_hidden_state(&ctxs[0], layer, p)?)?,
            )
        })
        .collect()
}

fn shared_positions<'a>(ctxs: &'a [PatchContext<'_>]) -> Result<&'a SemanticPositions> {
    let first = ctxs
        .first()
        .ok_or_else(|| Error::Dataset("no prompts".into()))?
        .batch
        .shared_positions()?;
    for c in ctxs {
        if c.batch.shared_positions()? != first {
            return Err(Error::Dataset(
                "per-position experiments need prompts that share name positions".into(),
            ));
        }
    }
    Ok(first)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_moves_forward() {
        let x = Tensor::from_fn(&[1, 4, 2], |i| (i[1] * 10 + i[2]) as f64);
        let s = shift_positions(&x, -1).unwrap();
        assert_eq!(s.get(&[0, 0, 1]), 0.0);
        assert_eq!(s.get(&[0, 2, 1]), 11.0);
        assert!(shift_positions(&x, 1).is_err());
    }

    #[test]
    fn plan_rejects_conflicts() {
        let mut plan = PatchPlan::new();
        plan.push(Intervention::resample(
            "blocks.0.hook_conv",
            Selector::at(2),
        ))
        .unwrap();
        assert!(plan
            .push(Intervention::resample(
                "blocks.0.hook_conv",
                Selector::at(3)
            ))
            .is_ok());
        assert!(plan
            .push(Intervention::resample(
                "blocks.0.hook_conv",
                Selector::Indices(vec![1, 2])
            ))
            .is_err());
        assert!(plan
            .push(Intervention::zero("blocks.0.hook_layer_output"))
            .is_ok());
        assert!(plan
            .push(Intervention::zero("blocks.0.hook_out_proj"))
            .is_err());
        let e = EdgeRef::new(EdgeSource::Embed, EdgeTarget::Layer(1)).unwrap();
        plan.push_edge(e.clone()).unwrap();
        assert!(plan.push_edge(e).is_err());
        assert!(EdgeRef::new(EdgeSource::Layer(2), EdgeTarget::Layer(1)).is_err());
    }
}
