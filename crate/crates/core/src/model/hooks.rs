//! Hook names, intervention actions and activation caches.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HOOK_EMBED: &str = "hook_embed";

/// Per-layer hook suffixes in firing order (excluding `hook_h.{pos}`).
pub(crate) const LAYER_HOOKS: [&str; 8] = [
    "hook_layer_input",
    "hook_in_proj",
    "hook_skip",
    "hook_conv",
    "hook_ssm_input",
    "hook_B_bar",
    "hook_h",
    "hook_out_proj",
];

pub fn hook_name(layer: usize, suffix: &str) -> String {
    format!("blocks.{layer}.{suffix}")
}

pub fn h_hook(layer: usize, pos: usize) -> String {
    format!("blocks.{layer}.hook_h.{pos}")
}

/// Hook on the input of conv tap `offset` (`-(K-1)..=0`): its value at time
/// `t` is the `hook_in_proj` value at `t + offset`.
pub fn conv_slice_hook(layer: usize, offset: i64) -> String {
    format!("blocks.{layer}.hook_conv_slice.{offset}")
}

pub fn output_hook_name(n_layers: usize) -> String {
    if n_layers == 0 {
        "hook_resid_post".to_string()
    } else {
        hook_name(n_layers - 1, "hook_resid_post")
    }
}

/// Maps the alternative spellings of the layer-output hook onto
/// `hook_out_proj`.
pub fn canonical_name(name: &str) -> String {
    for alias in ["hook_proj_out", "hook_layer_output"] {
        if let Some(prefix) = name.strip_suffix(alias) {
            return format!("{prefix}hook_out_proj");
        }
    }
    name.to_string()
}

/// Every hook that fires during a forward pass over `seq_len` tokens, in
/// firing order.
pub fn canonical_hook_names(n_layers: usize, seq_len: usize) -> Vec<String> {
    let mut out = vec![HOOK_EMBED.to_string()];
    for layer in 0..n_layers {
        for suffix in LAYER_HOOKS {
            if suffix == "hook_h" {
                out.extend((0..seq_len).map(|p| h_hook(layer, p)));
            } else {
                out.push(hook_name(layer, suffix));
            }
        }
    }
    out.push(output_hook_name(n_layers));
    out
}

/// Parses `blocks.{layer}.hook_conv_slice.{k}`.
pub(crate) fn parse_conv_slice(name: &str) -> Option<(usize, i64)> {
    let rest = name.strip_prefix("blocks.")?;
    let (layer, rest) = rest.split_once('.')?;
    let k = rest.strip_prefix("hook_conv_slice.")?;
    Some((layer.parse().ok()?, k.parse().ok()?))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    All,
    Only(Vec<usize>),
}

impl Positions {
    pub fn single(p: usize) -> Self {
        Positions::Only(vec![p])
    }

    pub fn contains(&self, p: usize) -> bool {
        match self {
            Positions::All => true,
            Positions::Only(ps) => ps.contains(&p),
        }
    }
}

pub type HookCallback = Arc<dyn Fn(&Tensor) -> Result<Tensor> + Send + Sync>;

/// What to do with an activation when its hook fires. Position selectors
/// index axis 1 of `[B, L, ...]` activations.
#[derive(Clone)]
pub enum HookAction {
    /// Copy `value` (same shape as the activation) at the selected positions.
    Replace {
        positions: Positions,
        value: Arc<Tensor>,
    },
    Zero {
        positions: Positions,
    },
    Add {
        delta: Arc<Tensor>,
    },
    /// `x + alpha * (value - x)` at the selected positions.
    Interpolate {
        positions: Positions,
        value: Arc<Tensor>,
        alpha: f64,
    },
    /// Arbitrary forward-only rewrite; no gradient flows through it.
    Callback(HookCallback),
}

impl fmt::Debug for HookAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HookAction::Replace { positions, value } => f
                .debug_struct("Replace")
                .field("positions", positions)
                .field("shape", &value.shape())
                .finish(),
            HookAction::Zero { positions } => f
                .debug_struct("Zero")
                .field("positions", positions)
                .finish(),
            HookAction::Add { delta } => f
                .debug_struct("Add")
                .field("shape", &delta.shape())
                .finish(),
            HookAction::Interpolate {
                positions, alpha, ..
            } => f
                .debug_struct("Interpolate")
                .field("positions", positions)
                .field("alpha", alpha)
                .finish(),
            HookAction::Callback(_) => f.write_str("Callback"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSource {
    Embed,
    Layer(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeTarget {
    Layer(usize),
    Output,
}

impl EdgeSource {
    pub fn hook(&self) -> String {
        match self {
            EdgeSource::Embed => HOOK_EMBED.to_string(),
            EdgeSource::Layer(i) => hook_name(*i, "hook_out_proj"),
        }
    }

    pub fn precedes(&self, dst: &EdgeTarget) -> bool {
        match (self, dst) {
            (_, EdgeTarget::Output) | (EdgeSource::Embed, _) => true,
            (EdgeSource::Layer(i), EdgeTarget::Layer(j)) => i < j,
        }
    }
}

impl EdgeTarget {
    pub fn hook(&self, n_layers: usize) -> String {
        match self {
            EdgeTarget::Layer(j) => hook_name(*j, "hook_layer_input"),
            EdgeTarget::Output => output_hook_name(n_layers),
        }
    }
}

/// Residual edge patch: the input of `dst` gets
/// `alpha * (corrupted - live)` of `src`'s contribution added at the selected
/// positions. Other readers of the residual stream are unaffected.
#[derive(Clone, Debug)]
pub struct EdgePatch {
    pub src: EdgeSource,
    pub dst: EdgeTarget,
    pub positions: Positions,
    pub alpha: f64,
    pub corrupted: Arc<Tensor>,
}

/// Interventions to apply during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct HookRegistry {
    actions: HashMap<String, Vec<HookAction>>,
    edges: BTreeMap<EdgeTarget, Vec<EdgePatch>>,
    decompose: BTreeSet<usize>,
    detach_edge_sources: bool,
}

impl HookRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty() && self.edges.is_empty()
    }

    /// Registers an action on a hook. Aliases are canonicalised; conv-slice
    /// hooks switch the layer to the tap-by-tap convolution path.
    pub fn add(&mut self, name: &str, action: HookAction) -> &mut Self {
        let name = canonical_name(name);
        if let Some((layer, _)) = parse_conv_slice(&name) {
            self.decompose.insert(layer);
        }
        self.actions.entry(name).or_default().push(action);
        self
    }

    pub fn add_edge(&mut self, patch: EdgePatch) -> Result<&mut Self> {
        if !patch.src.precedes(&patch.dst) {
            return Err(Error::Patch(format!(
                "edge {:?} -> {:?} does not go forward in the residual stream",
                patch.src, patch.dst
            )));
        }
        self.edges.entry(patch.dst).or_default().push(patch);
        Ok(self)
    }

    /// Forces the tap-by-tap convolution path (and its slice hooks) on a layer.
    pub fn decompose_conv(&mut self, layer: usize) -> &mut Self {
        self.decompose.insert(layer);
        self
    }

    /// Treats the live source term of every edge patch as a constant in the
    /// backward pass. Forward values are unchanged; gradients then flow along
    /// the residual stream as in an unpatched model evaluated at the patched
    /// point, which is what attribution passes need.
    pub fn detach_edge_sources(&mut self) -> &mut Self {
        self.detach_edge_sources = true;
        self
    }

    pub(crate) fn edge_sources_detached(&self) -> bool {
        self.detach_edge_sources
    }

    pub fn has_actions(&self, name: &str) -> bool {
        self.actions.contains_key(name)
    }

    pub fn action_names(&self) -> impl Iterator<Item = &str> {
        self.actions.keys().map(String::as_str)
    }

    pub fn edges(&self) -> impl Iterator<Item = &EdgePatch> {
        self.edges.values().flatten()
    }

    pub(crate) fn wants_decomposed_conv(&self, layer: usize) -> bool {
        self.decompose.contains(&layer)
    }

    pub(crate) fn edges_into(&self, dst: EdgeTarget) -> &[EdgePatch] {
        self.edges.get(&dst).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Applies the registered actions for `name` to `id`, names the result
    /// on the tape and returns it.
    pub(crate) fn fire(
        &self,
        tape: &mut Tape,
        name: &str,
        mut id: NodeId,
        positional: bool,
    ) -> Result<NodeId> {
        if let Some(actions) = self.actions.get(name) {
            for action in actions {
                id = apply_action(tape, name, id, action, positional)?;
            }
        }
        tape.set_name(id, name);
        Ok(id)
    }
}

/// 1.0 at selected positions along axis 1, 0.0 elsewhere.
pub(crate) fn position_mask(shape: &[usize], positions: &Positions, hook: &str) -> Result<Tensor> {
    if shape.len() < 2 {
        return Err(Error::Patch(format!("hook `{hook}` has no position axis")));
    }
    let len = shape[1];
    if let Positions::Only(ps) = positions {
        if let Some(&bad) = ps.iter().find(|&&p| p >= len) {
            return Err(Error::Patch(format!(
                "position {bad} out of range for `{hook}` with {len} positions"
            )));
        }
    }
    Ok(Tensor::from_fn(shape, |i| {
        if positions.contains(i[1]) {
            1.0
        } else {
            0.0
        }
    }))
}

fn apply_action(
    tape: &mut Tape,
    name: &str,
    id: NodeId,
    action: &HookAction,
    positional: bool,
) -> Result<NodeId> {
    let shape = tape.shape(id).to_vec();
    let check = |t: &Tensor| -> Result<()> {
        if t.shape() != shape.as_slice() {
            return Err(Error::Patch(format!(
                "`{name}`: intervention value has shape {:?}, activation has {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(())
    };
    let needs_positions = |positions: &Positions| -> Result<()> {
        if !positional && *positions != Positions::All {
            return Err(Error::Patch(format!("hook `{name}` has no position axis")));
        }
        Ok(())
    };
    match action {
        HookAction::Replace { positions, value } => {
            check(value)?;
            needs_positions(positions)?;
            if *positions == Positions::All {
                return Ok(tape.leaf_arc(Arc::clone(value)));
            }
            let mask = position_mask(&shape, positions, name)?;
            let keep = tape.leaf(mask.map(|m| 1.0 - m));
            let sel = tape.leaf(value.mul(&mask)?);
            let kept = tape.mul(id, keep)?;
            tape.add(kept, sel)
        }
        HookAction::Zero { positions } => {
            needs_positions(positions)?;
            if *positions == Positions::All {
                return Ok(tape.leaf(Tensor::zeros(&shape)));
            }
            let mask = position_mask(&shape, positions, name)?;
            let keep = tape.leaf(mask.map(|m| 1.0 - m));
            tape.mul(id, keep)
        }
        HookAction::Add { delta } => {
            check(delta)?;
            let d = tape.leaf_arc(Arc::clone(delta));
            tape.add(id, d)
        }
        HookAction::Interpolate {
            positions,
            value,
            alpha,
        } => {
            check(value)?;
            needs_positions(positions)?;
            let mask = if *positions == Positions::All {
                Tensor::full(&shape, 1.0)
            } else {
                position_mask(&shape, positions, name)?
            };
            let keep = tape.leaf(mask.map(|m| 1.0 - alpha * m));
            let sel = tape.leaf(value.mul(&mask)?.scale(*alpha));
            let kept = tape.mul(id, keep)?;
            tape.add(kept, sel)
        }
        HookAction::Callback(f) => {
            let out = f(tape.value(id))?;
            check(&out)?;
            Ok(tape.leaf(out))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Clean,
    Corrupted,
    Patched,
}

/// Activations captured during one forward pass, keyed by hook name.
#[derive(Clone, Debug, Default)]
pub struct ActivationCache {
    pub provenance: Provenance,
    entries: BTreeMap<String, Arc<Tensor>>,
}

impl ActivationCache {
    pub fn new(provenance: Provenance) -> Self {
        ActivationCache {
            provenance,
            entries: BTreeMap::new(),
        }
    }

    pub(crate) fn insert(&mut self, name: String, value: Arc<Tensor>) {
        self.entries.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.entries
            .get(&canonical_name(name))
            .ok_or_else(|| Error::UnknownHook(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(&canonical_name(name))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
