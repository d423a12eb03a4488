//! Interpretive experiments: the hidden-state cosine lens and steering with
//! per-(name, position) average activations.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Precision;
use crate::error::{Error, Result};
use crate::io::write_atomic_str;
use crate::ioi::PromptPair;
use crate::model::{
    h_hook, hook_name, load_tensors, save_tensors, HookAction, HookRegistry, Model, Positions,
};
use crate::report::Grid;
use crate::tensor::Tensor;

/// Shown with every lens output.
pub const LENS_NOTE: &str =
    "non-causal view: similarity to the hidden state does not show the model uses it";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineLens {
    pub layer: usize,
    /// Set when the lens looks at one inner channel instead of all of them.
    pub channel: Option<usize>,
    pub labels: Vec<String>,
    /// `values[i][j] = cos(B̄_i x_i, h_j)`.
    pub values: Vec<Vec<f64>>,
    /// Entries set to 0 because one of the two vectors had zero norm.
    pub zero_norm: Vec<(usize, usize)>,
}

impl CosineLens {
    pub fn to_grid(&self) -> Grid {
        let title = match self.channel {
            Some(c) => format!("Cosine lens, layer {} channel {c} (non-causal)", self.layer),
            None => format!("Cosine lens, layer {} (non-causal)", self.layer),
        };
        let mut g = Grid::new(
            title,
            "contribution position",
            "hidden state position",
            self.labels.clone(),
            self.labels.clone(),
        );
        g.values = self.values.clone();
        g.notes.push(LENS_NOTE.to_string());
        if !self.zero_norm.is_empty() {
            g.notes.push(format!(
                "{} entries involve a zero vector and are shown as 0",
                self.zero_norm.len()
            ));
        }
        g
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity between each position's contribution to the hidden
/// state, `B̄_i ∘ x_i`, and the hidden state `h_j` at every position, with
/// `[E, N]` flattened to one vector (or restricted to `channel`).
pub fn cosine_lens(
    model: &Model,
    tokens: &[usize],
    layer: usize,
    channel: Option<usize>,
) -> Result<CosineLens> {
    let cfg = model.config();
    if layer >= cfg.n_layers {
        return Err(Error::invalid(
            "cosine_lens",
            format!("layer {layer} out of range"),
        ));
    }
    if channel.is_some_and(|c| c >= cfg.d_inner) {
        return Err(Error::invalid("cosine_lens", "channel out of range"));
    }
    let run = model.run(&[tokens.to_vec()], &HookRegistry::new())?;
    let bbar = run.hook_value(&hook_name(layer, "hook_B_bar"))?;
    let x = run.hook_value(&hook_name(layer, "hook_ssm_input"))?;
    let (l, e, n) = (tokens.len(), cfg.d_inner, cfg.d_state);
    let chans: Vec<usize> = match channel {
        Some(c) => vec![c],
        None => (0..e).collect(),
    };
    let contrib: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            chans
                .iter()
                .flat_map(|&c| (0..n).map(move |k| (c, k)))
                .map(|(c, k)| bbar.get(&[0, i, c, k]) * x.get(&[0, i, c]))
                .collect()
        })
        .collect();
    let hidden: Vec<Vec<f64>> = (0..l)
        .map(|j| {
            let h = run.hook_value(&h_hook(layer, j))?;
            Ok(chans
                .iter()
                .flat_map(|&c| (0..n).map(move |k| (c, k)))
                .map(|(c, k)| h.get(&[0, c, k]))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut values = vec![vec![0.0; l]; l];
    let mut zero_norm = Vec::new();
    for i in 0..l {
        for j in 0..l {
            match cosine(&contrib[i], &hidden[j]) {
                Some(c) => values[i][j] = c,
                None => zero_norm.push((i, j)),
            }
        }
    }
    Ok(CosineLens {
        layer,
        channel,
        labels: (0..l).map(|i| i.to_string()).collect(),
        values,
        zero_norm,
    })
}

/// Mean `hook_ssm_input` of one layer, one position after each name, per
/// (name token, name slot 1..=5).
#[derive(Clone, Debug, PartialEq)]
pub struct NameAverageStore {
    pub layer: usize,
    pub min_samples: usize,
    entries: BTreeMap<(usize, usize), (Arc<Tensor>, usize)>,
    /// `(name, slot, count)` pairs dropped for having too few samples.
    pub excluded: Vec<(usize, usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct StoreIndex {
    layer: usize,
    min_samples: usize,
    entries: Vec<IndexEntry>,
    excluded: Vec<(usize, usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: usize,
    slot: usize,
    count: usize,
    tensor: String,
}

impl NameAverageStore {
    pub fn get(&self, name: usize, slot: usize) -> Result<&Arc<Tensor>> {
        self.entries
            .get(&(name, slot))
            .map(|(t, _)| t)
            .ok_or_else(|| Error::Steering(format!("no average for name token {name} at n{slot}")))
    }

    pub fn count(&self, name: usize, slot: usize) -> usize {
        self.entries.get(&(name, slot)).map_or(0, |(_, c)| *c)
    }

    pub fn contains(&self, name: usize, slot: usize) -> bool {
        self.entries.contains_key(&(name, slot))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.keys().copied()
    }

    /// Writes `<stem>.safetensors` (one tensor per entry) and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<Vec<String>> {
        let names: Vec<String> = self
            .entries
            .keys()
            .map(|(n, s)| format!("{n}.n{s}"))
            .collect();
        let refs: Vec<(String, &Tensor)> = names
            .iter()
            .zip(self.entries.values())
            .map(|(k, (t, _))| (k.clone(), t.as_ref()))
            .collect();
        let archive = format!("{stem}.safetensors");
        save_tensors(&dir.join(&archive), &refs, HashMap::new(), Precision::F64)?;
        let index = StoreIndex {
            layer: self.layer,
            min_samples: self.min_samples,
            entries: self
                .entries
                .iter()
                .zip(&names)
                .map(|(((name, slot), (_, count)), key)| IndexEntry {
                    name: *name,
                    slot: *slot,
                    count: *count,
                    tensor: key.clone(),
                })
                .collect(),
            excluded: self.excluded.clone(),
        };
        let json = format!("{stem}.json");
        write_atomic_str(
            &dir.join(&json),
            &(serde_json::to_string_pretty(&index)? + "\n"),
        )?;
        Ok(vec![archive, json])
    }

    pub fn load(dir: &Path, stem: &str) -> Result<NameAverageStore> {
        let index: StoreIndex =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let (mut tensors, _) = load_tensors(&dir.join(format!("{stem}.safetensors")))?;
        let mut entries = BTreeMap::new();
        for e in index.entries {
            let t = tensors.remove(&e.tensor).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor `{}` in store archive", e.tensor))
            })?;
            entries.insert((e.name, e.slot), (Arc::new(t), e.count));
        }
        Ok(NameAverageStore {
            layer: index.layer,
            min_samples: index.min_samples,
            entries,
            excluded: index.excluded,
        })
    }
}

fn group_by_len(pairs: &[PromptPair]) -> Vec<Vec<&PromptPair>> {
    let mut groups: BTreeMap<usize, Vec<&PromptPair>> = BTreeMap::new();
    for p in pairs {
        groups.entry(p.len()).or_default().push(p);
    }
    groups
        .into_values()
        .flat_map(|g| g.chunks(64).map(<[_]>::to_vec).collect::<Vec<_>>())
        .collect()
}

/// Averages `blocks.{layer}.hook_ssm_input` at each name's position + 1
/// over the clean prompts of `pairs`. Pairs with fewer than `min_samples`
/// values are left out and listed in `excluded`.
pub fn build_name_averages(
    model: &Model,
    pairs: &[PromptPair],
    layer: usize,
    min_samples: usize,
) -> Result<NameAverageStore> {
    if layer >= model.n_layers() {
        return Err(Error::invalid(
            "build_name_averages",
            format!("layer {layer} out of range"),
        ));
    }
    let e = model.config().d_inner;
    let hook = hook_name(layer, "hook_ssm_input");
    let partials: Vec<BTreeMap<(usize, usize), (Vec<f64>, usize)>> = group_by_len(pairs)
        .par_iter()
        .map(|group| {
            let tokens: Vec<Vec<usize>> = group.iter().map(|p| p.clean.clone()).collect();
            let run = model.run(&tokens, &HookRegistry::new())?;
            let x = run.hook_value(&hook)?;
            let mut acc: BTreeMap<(usize, usize), (Vec<f64>, usize)> = BTreeMap::new();
            for (b, p) in group.iter().enumerate() {
                for slot in 1..=5 {
                    let pos = p.positions.name(slot) + 1;
                    if pos >= p.len() {
                        continue;
                    }
                    let entry = acc
                        .entry((p.names[slot - 1], slot))
                        .or_insert_with(|| (vec![0.0; e], 0));
                    for (c, v) in entry.0.iter_mut().enumerate() {
                        *v += x.get(&[b, pos, c]);
                    }
                    entry.1 += 1;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut sums: BTreeMap<(usize, usize), (Vec<f64>, usize)> = BTreeMap::new();
    for part in partials {
        for (k, (v, n)) in part {
            let entry = sums.entry(k).or_insert_with(|| (vec![0.0; e], 0));
            for (a, b) in entry.0.iter_mut().zip(&v) {
                *a += b;
            }
            entry.1 += n;
        }
    }
    let mut entries = BTreeMap::new();
    let mut excluded = Vec::new();
    for ((name, slot), (sum, n)) in sums {
        if n < min_samples.max(1) {
            log::warn!("name token {name} at n{slot}: {n} samples, need {min_samples}; excluded");
            excluded.push((name, slot, n));
            continue;
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
        entries.insert((name, slot), (Arc::new(Tensor::new(vec![e], mean)?), n));
    }
    Ok(NameAverageStore {
        layer,
        min_samples,
        entries,
        excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteerMethod {
    /// Overwrite the activation with the new name's average.
    Replace,
    /// Subtract the current name's average and add the new name's.
    SubtractAdd,
}

impl std::str::FromStr for SteerMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<SteerMethod> {
        match s {
            "replace" => Ok(SteerMethod::Replace),
            "subtract-add" | "subtract_add" => Ok(SteerMethod::SubtractAdd),
            other => Err(Error::Config(format!("unknown steering method `{other}`"))),
        }
    }
}

/// One name substitution: slot `slot` of the prompt gets `new_name`, using
/// averages recorded at slot `source_slot`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub slot: usize,
    pub new_name: usize,
    pub source_slot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteerOutcome {
    /// Answer of the prompt before steering.
    pub original: usize,
    /// Answer the substituted name sequence calls for.
    pub expected: usize,
    /// Final-position logits of the steered run.
    pub logits: Vec<f64>,
    /// `logits[expected] > logits[original]`.
    pub success: bool,
}

/// The answer after replacing slot `slot` with `new_name`, when exactly one
/// first-clause name is missing from the second clause.
pub fn substituted_answer(names: &[usize; 5], slot: usize, new_name: usize) -> Option<usize> {
    let mut m = *names;
    m[slot - 1] = new_name;
    let missing: Vec<usize> = m[..3]
        .iter()
        .copied()
        .filter(|n| !m[3..].contains(n))
        .collect();
    let distinct = m[0] != m[1] && m[0] != m[2] && m[1] != m[2] && m[3] != m[4];
    (distinct && missing.len() == 1).then(|| missing[0])
}

/// The substitution used by the position grid: a name unused by the prompt
/// replaces the answer when it sits at `slot` (n1..n3); at n4/n5 the
/// answer itself is written over the repeated name.
pub fn grid_substitution(
    pair: &PromptPair,
    slot: usize,
    source_slot: usize,
) -> Option<Substitution> {
    let new_name = if slot <= 3 {
        if pair.names[slot - 1] != pair.answer {
            return None;
        }
        *pair.candidates.iter().find(|c| !pair.names.contains(c))?
    } else {
        pair.answer
    };
    substituted_answer(&pair.names, slot, new_name)?;
    Some(Substitution {
        slot,
        new_name,
        source_slot,
    })
}

/// Steers a batch of equal-length prompts, one substitution each.
pub fn steer_batch(
    model: &Model,
    pairs: &[&PromptPair],
    subs: &[Substitution],
    method: SteerMethod,
    store: &NameAverageStore,
) -> Result<Vec<SteerOutcome>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let len = pairs[0].len();
    if pairs.iter().any(|p| p.len() != len) || subs.len() != pairs.len() {
        return Err(Error::Steering(
            "steer_batch needs equal-length prompts, one substitution each".into(),
        ));
    }
    let layer = store.layer;
    let e = model.config().d_inner;
    let hook = hook_name(layer, "hook_ssm_input");
    let tokens: Vec<Vec<usize>> = pairs.iter().map(|p| p.clean.clone()).collect();
    let mut expected = Vec::with_capacity(pairs.len());
    let mut positions = Vec::with_capacity(pairs.len());
    for (p, s) in pairs.iter().zip(subs) {
        if !(1..=5).contains(&s.slot) || !(1..=5).contains(&s.source_slot) {
            return Err(Error::Steering(format!(
                "name slots run 1..=5, got {} / {}",
                s.slot, s.source_slot
            )));
        }
        let want = substituted_answer(&p.names, s.slot, s.new_name).ok_or_else(|| {
            Error::Steering(format!(
                "writing token {} at n{} leaves no unique answer",
                s.new_name, s.slot
            ))
        })?;
        expected.push(want);
        let pos = p.positions.name(s.slot) + 1;
        if pos >= len {
            return Err(Error::Steering(format!("n{} is the last token", s.slot)));
        }
        positions.push(pos);
    }

    let mut reg = HookRegistry::new();
    match method {
        SteerMethod::Replace => {
            // The hook's upstream is untouched, so the clean activation is
            // the live one everywhere except the overwritten entries.
            let mut value = model
                .run(&tokens, &HookRegistry::new())?
                .hook_value(&hook)?
                .clone();
            for (b, (s, &pos)) in subs.iter().zip(&positions).enumerate() {
                let avg = store.get(s.new_name, s.source_slot)?;
                for c in 0..e {
                    value.set(&[b, pos, c], avg.data()[c]);
                }
            }
            reg.add(
                &hook,
                HookAction::Replace {
                    positions: Positions::All,
                    value: Arc::new(value),
                },
            );
        }
        SteerMethod::SubtractAdd => {
            let delta = subtract_add_delta(model, pairs, subs, store)?;
            reg.add(
                &hook,
                HookAction::Add {
                    delta: Arc::new(delta),
                },
            );
        }
    }
    let logits = model.forward(&tokens, &reg)?;
    let v = logits.shape()[2];
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(b, p)| {
            let row = logits.data()[(b * len + len - 1) * v..(b * len + len) * v].to_vec();
            let success = row[expected[b]] > row[p.answer];
            SteerOutcome {
                original: p.answer,
                expected: expected[b],
                logits: row,
                success,
            }
        })
        .collect())
}

/// The `[B, L, E]` subtract-and-add delta for `subs`: `μ(new, j) − μ(cur, j)`
/// one position after each substituted name, zero elsewhere.
pub fn subtract_add_delta(
    model: &Model,
    pairs: &[&PromptPair],
    subs: &[Substitution],
    store: &NameAverageStore,
) -> Result<Tensor> {
    let len = pairs.first().map_or(0, |p| p.len());
    if pairs.iter().any(|p| p.len() != len) || subs.len() != pairs.len() {
        return Err(Error::Steering(
            "steering needs equal-length prompts, one substitution each".into(),
        ));
    }
    let e = model.config().d_inner;
    let mut delta = Tensor::zeros(&[pairs.len(), len, e]);
    for (b, (p, s)) in pairs.iter().zip(subs).enumerate() {
        let pos = p.positions.name(s.slot) + 1;
        if pos >= len {
            return Err(Error::Steering(format!("n{} is the last token", s.slot)));
        }
        let new = store.get(s.new_name, s.source_slot)?;
        let old = store.get(p.names[s.slot - 1], s.source_slot)?;
        for c in 0..e {
            delta.set(&[b, pos, c], new.data()[c] - old.data()[c]);
        }
    }
    Ok(delta)
}

/// Largest absolute logit change left after applying a subtract-and-add
/// steer and then its inverse at the same hook.
pub fn steering_round_trip_error(
    model: &Model,
    pairs: &[&PromptPair],
    subs: &[Substitution],
    store: &NameAverageStore,
) -> Result<f64> {
    let delta = subtract_add_delta(model, pairs, subs, store)?;
    let inverse = delta.scale(-1.0);
    let tokens: Vec<Vec<usize>> = pairs.iter().map(|p| p.clean.clone()).collect();
    let hook = hook_name(store.layer, "hook_ssm_input");
    let mut reg = HookRegistry::new();
    reg.add(
        &hook,
        HookAction::Add {
            delta: Arc::new(delta),
        },
    )
    .add(
        &hook,
        HookAction::Add {
            delta: Arc::new(inverse),
        },
    );
    let clean = model.forward(&tokens, &HookRegistry::new())?;
    let back = model.forward(&tokens, &reg)?;
    Ok(clean
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Steers one prompt.
pub fn steer(
    model: &Model,
    pair: &PromptPair,
    sub: Substitution,
    method: SteerMethod,
    store: &NameAverageStore,
) -> Result<SteerOutcome> {
    Ok(steer_batch(model, &[pair], &[sub], method, store)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionGrid {
    pub method: SteerMethod,
    /// Rows: slot substituted (n1..n5); columns: slot the average came from.
    pub grid: Grid,
    pub counts: Vec<Vec<usize>>,
    /// Prompts skipped because the store lacked an entry.
    pub missing: usize,
}

/// Success rate of every (destination slot, source slot) substitution.
/// Cells with no eligible prompt are NaN.
pub fn substitution_grid(
    model: &Model,
    pairs: &[PromptPair],
    store: &NameAverageStore,
    method: SteerMethod,
) -> Result<SubstitutionGrid> {
    let labels: Vec<String> = (1..=5).map(|k| format!("n{k}")).collect();
    let title = match method {
        SteerMethod::Replace => "Steering success, replace",
        SteerMethod::SubtractAdd => "Steering success, subtract and add",
    };
    let mut grid = Grid::new(
        title,
        "substituted position",
        "average from position",
        labels.clone(),
        labels,
    );
    let mut counts = vec![vec![0; 5]; 5];
    let mut missing = 0;
    let cells: Vec<(usize, usize)> = (1..=5).flat_map(|k| (1..=5).map(move |j| (k, j))).collect();
    let results: Vec<(usize, usize, usize, usize)> = cells
        .par_iter()
        .map(|&(k, j)| {
            let mut hits = 0;
            let mut n = 0;
            let mut miss = 0;
            for group in group_by_len(pairs) {
                let mut ps = Vec::new();
                let mut subs = Vec::new();
                for p in group {
                    if let Some(s) = grid_substitution(p, k, j) {
                        if store.contains(s.new_name, j) && store.contains(p.names[k - 1], j) {
                            ps.push(p);
                            subs.push(s);
                        } else {
                            miss += 1;
                        }
                    }
                }
                for o in steer_batch(model, &ps, &subs, method, store)? {
                    hits += usize::from(o.success);
                    n += 1;
                }
            }
            Ok((hits, n, miss, k * 10 + j))
        })
        .collect::<Result<_>>()?;
    for (hits, n, miss, key) in results {
        let (k, j) = (key / 10, key % 10);
        counts[k - 1][j - 1] = n;
        missing += miss;
        grid.set(
            k - 1,
            j - 1,
            if n == 0 {
                f64::NAN
            } else {
                hits as f64 / n as f64
            },
        );
    }
    grid.notes
        .push("n4/n5 rows write the answer over the repeated name".into());
    Ok(SubstitutionGrid {
        method,
        grid,
        counts,
        missing,
    })
}

/// Mean success over the cells with both slots in n1..n3.
pub fn early_slot_success(grid: &SubstitutionGrid) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for k in 0..3 {
        for j in 0..3 {
            let c = grid.counts[k][j];
            if c > 0 {
                total += grid.grid.get(k, j) * c as f64;
                n += c;
            }
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        total / n as f64
    }
}
