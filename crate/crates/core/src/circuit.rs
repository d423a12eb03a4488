//! Causal graphs over hook points and edge-level circuit discovery:
//! edge attribution patching (plain, integrated-gradients and positional),
//! minimal edge sets by binary search, and the sink-to-source pruning sweep.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic_str;
use crate::metrics::Metric;
use crate::model::{hook_name, EdgeSource, EdgeTarget, HookRegistry, Model};
use crate::patching::{patch_conv_slice, EdgeRef, Intervention, PatchContext, PatchPlan, Selector};
use crate::report::csv_line;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Embed,
    LayerInput(usize),
    Skip(usize),
    Conv(usize),
    Ssm(usize),
    LayerOutput(usize),
    /// The residual stream after the last layer.
    Output,
}

impl Node {
    /// Sort key that agrees with the order of the forward pass.
    pub fn order(&self) -> (usize, usize) {
        match *self {
            Node::Embed => (0, 0),
            Node::LayerInput(l) => (l + 1, 0),
            Node::Skip(l) | Node::Conv(l) => (l + 1, 1),
            Node::Ssm(l) => (l + 1, 2),
            Node::LayerOutput(l) => (l + 1, 3),
            Node::Output => (usize::MAX, 0),
        }
    }

    pub fn layer(&self) -> Option<usize> {
        match *self {
            Node::Embed | Node::Output => None,
            Node::LayerInput(l)
            | Node::Skip(l)
            | Node::Conv(l)
            | Node::Ssm(l)
            | Node::LayerOutput(l) => Some(l),
        }
    }

    fn as_source(&self) -> Option<EdgeSource> {
        match *self {
            Node::Embed => Some(EdgeSource::Embed),
            Node::LayerOutput(l) => Some(EdgeSource::Layer(l)),
            _ => None,
        }
    }

    fn as_target(&self) -> Option<EdgeTarget> {
        match *self {
            Node::LayerInput(l) => Some(EdgeTarget::Layer(l)),
            Node::Output => Some(EdgeTarget::Output),
            _ => None,
        }
    }

    fn from_source(s: EdgeSource) -> Node {
        match s {
            EdgeSource::Embed => Node::Embed,
            EdgeSource::Layer(l) => Node::LayerOutput(l),
        }
    }

    fn from_target(t: EdgeTarget) -> Node {
        match t {
            EdgeTarget::Layer(l) => Node::LayerInput(l),
            EdgeTarget::Output => Node::Output,
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Embed => f.write_str("embed"),
            Node::LayerInput(l) => write!(f, "layer{l}.input"),
            Node::Skip(l) => write!(f, "layer{l}.skip"),
            Node::Conv(l) => write!(f, "layer{l}.conv"),
            Node::Ssm(l) => write!(f, "layer{l}.ssm"),
            Node::LayerOutput(l) => write!(f, "layer{l}"),
            Node::Output => f.write_str("output"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    /// Layer output to a later layer input or to the output node.
    Residual,
    /// Token embedding to a layer input or to the output node.
    Embed,
    IntraLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeState {
    Kept,
    Patched,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: Node,
    pub dst: Node,
    pub kind: EdgeKind,
    /// Conv tap offset for `input → conv` edges.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
    pub state: EdgeState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Measured metric change (patched − unpatched) from patching this edge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

impl Edge {
    fn new(src: Node, dst: Node, kind: EdgeKind) -> Edge {
        Edge {
            src,
            dst,
            kind,
            tap: None,
            position: None,
            state: EdgeState::Kept,
            score: None,
            delta: None,
        }
    }

    pub fn id(&self) -> String {
        let mut s = format!("{}->{}", self.src, self.dst);
        if let Some(t) = self.tap {
            s.push_str(&format!("[{t}]"));
        }
        if let Some(p) = self.position {
            s.push_str(&format!("@{p}"));
        }
        s
    }

    /// Structural edges that carry no patch of their own.
    pub fn always_on(&self) -> bool {
        matches!(
            (self.src, self.dst),
            (Node::Skip(_), Node::LayerOutput(_)) | (Node::Ssm(_), Node::LayerOutput(_))
        )
    }

    pub fn is_kept(&self) -> bool {
        self.state == EdgeState::Kept
    }

    fn selector(&self) -> Selector {
        match self.position {
            Some(p) => Selector::at(p),
            None => Selector::All,
        }
    }

    fn add_to_plan(&self, plan: &mut PatchPlan, model: &Model) -> Result<()> {
        if let (Some(s), Some(d)) = (self.src.as_source(), self.dst.as_target()) {
            plan.push_edge(EdgeRef::new(s, d)?.at(self.selector()))?;
            return Ok(());
        }
        let iv = match (self.src, self.dst, self.tap) {
            (Node::LayerInput(l), Node::Skip(_), _) => {
                Intervention::resample(hook_name(l, "hook_skip"), self.selector())
            }
            (Node::LayerInput(l), Node::Conv(_), Some(t)) => {
                patch_conv_slice(model, l, t, self.selector())?
            }
            (Node::Conv(l), Node::Ssm(_), _) => {
                Intervention::resample(hook_name(l, "hook_ssm_input"), self.selector())
            }
            _ => {
                return Err(Error::Patch(format!(
                    "edge {} cannot be patched",
                    self.id()
                )))
            }
        };
        plan.push(iv)?;
        Ok(())
    }
}

/// Edges between hook points, each either kept or patched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub n_layers: usize,
    /// Labels for positional edges, indexed by position.
    #[serde(default)]
    pub position_labels: Vec<String>,
    edges: Vec<Edge>,
}

fn residual_pairs(n_layers: usize) -> Vec<(EdgeSource, EdgeTarget)> {
    let mut out = Vec::new();
    let mut dsts: Vec<EdgeTarget> = (0..n_layers).map(EdgeTarget::Layer).collect();
    dsts.push(EdgeTarget::Output);
    for dst in dsts {
        out.push((EdgeSource::Embed, dst));
        let upto = match dst {
            EdgeTarget::Layer(j) => j,
            EdgeTarget::Output => n_layers,
        };
        out.extend((0..upto).map(|i| (EdgeSource::Layer(i), dst)));
    }
    out
}

fn residual_edge(src: EdgeSource, dst: EdgeTarget) -> Edge {
    let kind = match src {
        EdgeSource::Embed => EdgeKind::Embed,
        EdgeSource::Layer(_) => EdgeKind::Residual,
    };
    Edge::new(Node::from_source(src), Node::from_target(dst), kind)
}

impl CausalGraph {
    /// Fully connected residual graph: embed and every layer output feed
    /// every later layer input and the output node.
    pub fn residual(n_layers: usize) -> CausalGraph {
        let edges = residual_pairs(n_layers)
            .into_iter()
            .map(|(s, d)| residual_edge(s, d))
            .collect();
        CausalGraph {
            n_layers,
            position_labels: Vec::new(),
            edges,
        }
    }

    /// Residual graph with one copy of every edge per token position.
    pub fn positional(n_layers: usize, position_labels: Vec<String>) -> CausalGraph {
        let mut edges = Vec::new();
        for (s, d) in residual_pairs(n_layers) {
            for p in 0..position_labels.len() {
                let mut e = residual_edge(s, d);
                e.position = Some(p);
                edges.push(e);
            }
        }
        CausalGraph {
            n_layers,
            position_labels,
            edges,
        }
    }

    /// Adds the per-layer edges: input → skip, input → conv (one per tap),
    /// conv → ssm, and the always-on skip → output and ssm → output.
    pub fn with_intra_layer(mut self, d_conv: usize) -> CausalGraph {
        for l in 0..self.n_layers {
            if self
                .edges
                .iter()
                .any(|e| e.kind == EdgeKind::IntraLayer && e.src.layer() == Some(l))
            {
                continue;
            }
            let intra = |s, d| Edge::new(s, d, EdgeKind::IntraLayer);
            self.edges.push(intra(Node::LayerInput(l), Node::Skip(l)));
            for k in 0..d_conv as i64 {
                let mut e = intra(Node::LayerInput(l), Node::Conv(l));
                e.tap = Some(-k);
                self.edges.push(e);
            }
            self.edges.push(intra(Node::Conv(l), Node::Ssm(l)));
            self.edges.push(intra(Node::Skip(l), Node::LayerOutput(l)));
            self.edges.push(intra(Node::Ssm(l), Node::LayerOutput(l)));
        }
        self
    }

    pub fn from_edges(
        n_layers: usize,
        position_labels: Vec<String>,
        edges: Vec<Edge>,
    ) -> Result<CausalGraph> {
        let g = CausalGraph {
            n_layers,
            position_labels,
            edges,
        };
        g.validate()?;
        Ok(g)
    }

    /// Checks edge direction, layer and position ranges, id uniqueness and
    /// that always-on edges are kept.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            let id = e.id();
            if e.src.order() >= e.dst.order() {
                return Err(Error::Patch(format!("edge {id} does not point forward")));
            }
            for n in [e.src, e.dst] {
                if n.layer().is_some_and(|l| l >= self.n_layers) {
                    return Err(Error::Patch(format!("edge {id} refers to a missing layer")));
                }
            }
            if e.position.is_some_and(|p| p >= self.position_labels.len()) {
                return Err(Error::Patch(format!("edge {id} has no position label")));
            }
            if e.always_on() && !e.is_kept() {
                return Err(Error::Patch(format!("always-on edge {id} is patched")));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::Patch(format!("duplicate edge {id}")));
            }
        }
        Ok(())
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.edges.iter().position(|e| e.id() == id)
    }

    pub fn edge(&self, id: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.id() == id)
    }

    /// Indices of edges that can be patched.
    pub fn removable(&self) -> Vec<usize> {
        (0..self.edges.len())
            .filter(|&i| !self.edges[i].always_on())
            .collect()
    }

    pub fn kept(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.is_kept())
    }

    pub fn kept_removable_count(&self) -> usize {
        self.edges
            .iter()
            .filter(|e| e.is_kept() && !e.always_on())
            .count()
    }

    pub fn set_state(&mut self, index: usize, state: EdgeState) -> Result<()> {
        let e = &mut self.edges[index];
        if e.always_on() && state == EdgeState::Patched {
            return Err(Error::Patch(format!(
                "always-on edge {} cannot be patched",
                e.id()
            )));
        }
        e.state = state;
        Ok(())
    }

    /// Copies scores from `table` onto matching edges. Every removable edge
    /// must be covered.
    pub fn apply_scores(&mut self, table: &AttributionTable) -> Result<()> {
        let by_id: HashMap<&str, f64> = table
            .scores
            .iter()
            .map(|a| (a.edge.as_str(), a.score))
            .collect();
        for e in &mut self.edges {
            if let Some(&s) = by_id.get(e.id().as_str()) {
                e.score = Some(s);
            } else if !e.always_on() && e.kind != EdgeKind::IntraLayer {
                return Err(Error::Patch(format!(
                    "attribution table has no score for {}",
                    e.id()
                )));
            }
        }
        Ok(())
    }

    /// Plan patching every patched edge, plus `extra` if given.
    pub fn plan(&self, model: &Model, extra: Option<usize>) -> Result<PatchPlan> {
        let mut plan = PatchPlan::new();
        for (i, e) in self.edges.iter().enumerate() {
            if !e.is_kept() || extra == Some(i) {
                e.add_to_plan(&mut plan, model)?;
            }
        }
        Ok(plan)
    }

    /// Patches every removable kept edge that does not lie on a kept
    /// embed → output path. Returns how many edges were patched.
    pub fn prune_disconnected(&mut self) -> usize {
        let mut succ: BTreeMap<Node, BTreeSet<Node>> = BTreeMap::new();
        let mut pred: BTreeMap<Node, BTreeSet<Node>> = BTreeMap::new();
        let mut link = |a: Node, b: Node| {
            succ.entry(a).or_default().insert(b);
            pred.entry(b).or_default().insert(a);
        };
        for e in self.kept() {
            link(e.src, e.dst);
        }
        for l in 0..self.n_layers {
            let has_intra = self
                .edges
                .iter()
                .any(|e| e.kind == EdgeKind::IntraLayer && e.src.layer() == Some(l));
            if !has_intra {
                link(Node::LayerInput(l), Node::LayerOutput(l));
            }
        }
        let from_embed = reach(Node::Embed, &succ);
        let to_output = reach(Node::Output, &pred);
        let mut n = 0;
        for e in &mut self.edges {
            if e.is_kept()
                && !e.always_on()
                && !(from_embed.contains(&e.src) && to_output.contains(&e.dst))
            {
                e.state = EdgeState::Patched;
                n += 1;
            }
        }
        n
    }

    fn position_label(&self, p: usize) -> String {
        self.position_labels
            .get(p)
            .cloned()
            .unwrap_or_else(|| format!("pos{p}"))
    }

    /// Kept edges as a DOT digraph; positions and conv taps become edge labels.
    pub fn to_dot(&self) -> String {
        let mut s = String::from(
            "digraph circuit {\n  rankdir=TB;\n  node [shape=box, fontname=\"sans-serif\"];\n",
        );
        let mut nodes = BTreeSet::new();
        for e in self.kept() {
            nodes.insert(e.src);
            nodes.insert(e.dst);
        }
        let mut nodes: Vec<Node> = nodes.into_iter().collect();
        nodes.sort_by_key(|n| n.order());
        for n in &nodes {
            s.push_str(&format!("  \"{n}\";\n"));
        }
        for e in self.kept() {
            let mut label = Vec::new();
            if let Some(t) = e.tap {
                label.push(format!("tap {t}"));
            }
            if let Some(p) = e.position {
                label.push(self.position_label(p));
            }
            let style = if e.always_on() { ", style=dashed" } else { "" };
            s.push_str(&format!(
                "  \"{}\" -> \"{}\" [label=\"{}\"{style}];\n",
                e.src,
                e.dst,
                label.join(" ")
            ));
        }
        s.push_str("}\n");
        s
    }

    /// Residual adjacency matrix: rows are source nodes, columns are
    /// destination nodes. Cells hold 1/0 for kept edges, or summed scores.
    pub fn adjacency_csv(&self, scores: bool) -> String {
        let mut srcs = vec![Node::Embed];
        srcs.extend((0..self.n_layers).map(Node::LayerOutput));
        let mut dsts: Vec<Node> = (0..self.n_layers).map(Node::LayerInput).collect();
        dsts.push(Node::Output);
        let mut cell: HashMap<(Node, Node), f64> = HashMap::new();
        for e in &self.edges {
            if e.kind == EdgeKind::IntraLayer {
                continue;
            }
            let v = cell.entry((e.src, e.dst)).or_insert(0.0);
            if scores {
                *v += e.score.unwrap_or(0.0);
            } else if e.is_kept() {
                *v = 1.0;
            }
        }
        let mut header = vec!["source\\destination".to_string()];
        header.extend(dsts.iter().map(|d| d.to_string()));
        let mut out = csv_line(&header);
        for s in &srcs {
            let mut row = vec![s.to_string()];
            for d in &dsts {
                row.push(match cell.get(&(*s, *d)) {
                    Some(v) => format!("{v}"),
                    None => String::new(),
                });
            }
            out.push_str(&csv_line(&row));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes `<stem>.json`, `<stem>.dot` and `<stem>_adjacency.csv`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<String>> {
        let files = [
            (format!("{stem}.json"), self.to_json()?),
            (format!("{stem}.dot"), self.to_dot()),
            (format!("{stem}_adjacency.csv"), self.adjacency_csv(false)),
        ];
        let mut names = Vec::new();
        for (name, body) in files {
            write_atomic_str(&dir.join(&name), &body)?;
            names.push(name);
        }
        Ok(names)
    }
}

fn reach(start: Node, adj: &BTreeMap<Node, BTreeSet<Node>>) -> BTreeSet<Node> {
    let mut seen = BTreeSet::from([start]);
    let mut stack = vec![start];
    while let Some(n) = stack.pop() {
        for &m in adj.get(&n).into_iter().flatten() {
            if seen.insert(m) {
                stack.push(m);
            }
        }
    }
    seen
}

/// Which forward pass supplies the gradients for plain EAP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientPass {
    /// Every residual edge patched.
    #[default]
    Patched,
    Clean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub edge: String,
    pub src: Node,
    pub dst: Node,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionTable {
    pub metric: String,
    /// Interpolation steps; 1 for plain EAP.
    pub iters: usize,
    pub gradient_pass: GradientPass,
    pub positional: bool,
    #[serde(default)]
    pub position_labels: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub scores: Vec<Attribution>,
}

impl AttributionTable {
    pub fn get(&self, edge: &str) -> Option<f64> {
        self.scores.iter().find(|a| a.edge == edge).map(|a| a.score)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Largest absolute score difference against a table over the same edges.
    pub fn max_abs_diff(&self, other: &AttributionTable) -> Result<f64> {
        if self.scores.len() != other.scores.len() {
            return Err(Error::invalid(
                "max_abs_diff",
                "tables cover different edges",
            ));
        }
        let mut m: f64 = 0.0;
        for (a, b) in self.scores.iter().zip(&other.scores) {
            if a.edge != b.edge {
                return Err(Error::invalid(
                    "max_abs_diff",
                    format!("edge {} vs {}", a.edge, b.edge),
                ));
            }
            m = m.max((a.score - b.score).abs());
        }
        Ok(m)
    }

    /// Sums positional scores over positions.
    pub fn sum_over_positions(&self) -> AttributionTable {
        let mut order = Vec::new();
        let mut sums: HashMap<(Node, Node), f64> = HashMap::new();
        for a in &self.scores {
            let key = (a.src, a.dst);
            if !sums.contains_key(&key) {
                order.push(key);
            }
            *sums.entry(key).or_insert(0.0) += a.score;
        }
        let scores = order
            .into_iter()
            .map(|(src, dst)| Attribution {
                edge: format!("{src}->{dst}"),
                src,
                dst,
                position: None,
                score: sums[&(src, dst)],
            })
            .collect();
        AttributionTable {
            positional: false,
            position_labels: Vec::new(),
            scores,
            ..self.clone()
        }
    }

    /// Metadata plus an `edge → score` map.
    pub fn to_json(&self) -> Result<String> {
        let mut map = serde_json::Map::new();
        for a in &self.scores {
            map.insert(a.edge.clone(), serde_json::json!(a.score));
        }
        let v = serde_json::json!({
            "metric": self.metric,
            "iters": self.iters,
            "gradient_pass": self.gradient_pass,
            "positional": self.positional,
            "position_labels": self.position_labels,
            "seed": self.seed,
            "scores": map,
        });
        Ok(serde_json::to_string_pretty(&v)? + "\n")
    }

    /// One row per scored edge.
    pub fn to_csv(&self) -> String {
        let mut out =
            csv_line(&["edge", "source", "destination", "position", "score"].map(String::from));
        for a in &self.scores {
            let pos = match a.position {
                Some(p) => self
                    .position_labels
                    .get(p)
                    .cloned()
                    .unwrap_or_else(|| p.to_string()),
                None => String::new(),
            };
            out.push_str(&csv_line(&[
                a.edge.clone(),
                a.src.to_string(),
                a.dst.to_string(),
                pos,
                format!("{}", a.score),
            ]));
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EapOptions {
    pub gradient_pass: GradientPass,
    pub positional: bool,
    /// Recorded in the table; the computation itself is deterministic.
    pub seed: Option<u64>,
}

/// Edge attribution patching: for every residual edge `i → j`,
/// `(corrupted out_i − clean out_i) · ∇input_j`, summed over positions and
/// channels (channels only when positional) and averaged over examples.
pub fn eap(ctxs: &[PatchContext<'_>], opts: &EapOptions) -> Result<AttributionTable> {
    let alpha = match opts.gradient_pass {
        GradientPass::Patched => 1.0,
        GradientPass::Clean => 0.0,
    };
    attribution(ctxs, &[alpha], opts, 1)
}

/// EAP with token positions kept: one score per (edge, position).
pub fn positional_eap(ctxs: &[PatchContext<'_>], opts: &EapOptions) -> Result<AttributionTable> {
    let opts = EapOptions {
        positional: true,
        ..opts.clone()
    };
    eap(ctxs, &opts)
}

/// Integrated-gradients EAP: the mean of attribution tables whose
/// gradients come from passes that apply every edge patch with strength
/// `α_k = k / (iters − 1)`.
pub fn eap_integrated_gradients(
    ctxs: &[PatchContext<'_>],
    iters: usize,
    opts: &EapOptions,
) -> Result<AttributionTable> {
    if iters < 2 {
        return Err(Error::invalid(
            "eap_integrated_gradients",
            format!("iters must be at least 2, got {iters}"),
        ));
    }
    let alphas: Vec<f64> = (0..iters).map(|k| k as f64 / (iters - 1) as f64).collect();
    attribution(ctxs, &alphas, opts, iters)
}

fn attribution(
    ctxs: &[PatchContext<'_>],
    alphas: &[f64],
    opts: &EapOptions,
    iters: usize,
) -> Result<AttributionTable> {
    let first = ctxs
        .first()
        .ok_or_else(|| Error::invalid("eap", "no prompts"))?;
    let n_layers = first.model.n_layers();
    let metric = first.metric;
    if !metric.differentiable() {
        return Err(Error::Metric(format!("{} has no gradient", metric.name())));
    }
    let labels = if opts.positional {
        let labels = first.batch.positions.labels().to_vec();
        for c in ctxs {
            if c.batch.seq_len() != first.batch.seq_len()
                || c.batch.positions.labels() != labels.as_slice()
            {
                return Err(Error::Patch(
                    "positional attribution needs prompts that share token positions".into(),
                ));
            }
        }
        labels
    } else {
        Vec::new()
    };
    let pairs = residual_pairs(n_layers);

    let jobs: Vec<(usize, f64)> = (0..ctxs.len())
        .flat_map(|c| alphas.iter().map(move |&a| (c, a)))
        .collect();
    let partials: Vec<Vec<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(c, alpha)| {
            // The metric node is a batch mean, so each context's sums are
            // already divided by its size; reweight before pooling.
            let n = ctxs[c].len() as f64;
            let sums = edge_sums(&ctxs[c], &pairs, alpha, opts.positional)?;
            Ok(sums
                .into_iter()
                .map(|v| v.into_iter().map(|x| x * n).collect())
                .collect())
        })
        .collect::<Result<_>>()?;

    let n_examples: usize = ctxs.iter().map(|c| c.len()).sum();
    let denom = (n_examples * alphas.len()) as f64;
    let width = if opts.positional { labels.len() } else { 1 };
    let mut totals = vec![vec![0.0; width]; pairs.len()];
    for part in &partials {
        for (t, p) in totals.iter_mut().zip(part) {
            for (a, b) in t.iter_mut().zip(p) {
                *a += b;
            }
        }
    }

    let mut scores = Vec::new();
    for ((src, dst), sums) in pairs.iter().zip(&totals) {
        for (p, s) in sums.iter().enumerate() {
            let mut e = residual_edge(*src, *dst);
            e.position = opts.positional.then_some(p);
            scores.push(Attribution {
                edge: e.id(),
                src: e.src,
                dst: e.dst,
                position: e.position,
                score: s / denom,
            });
        }
    }
    Ok(AttributionTable {
        metric: metric.name().to_string(),
        iters,
        gradient_pass: opts.gradient_pass,
        positional: opts.positional,
        position_labels: labels,
        seed: opts.seed,
        scores,
    })
}

/// Gradients at every edge destination for a pass that applies all
/// residual edge patches with strength `alpha`.
pub fn destination_gradients(
    ctx: &PatchContext<'_>,
    alpha: f64,
) -> Result<HashMap<EdgeTarget, Tensor>> {
    let n_layers = ctx.model.n_layers();
    let mut reg = if alpha == 0.0 {
        HookRegistry::new()
    } else {
        let mut plan = PatchPlan::new();
        for (s, d) in residual_pairs(n_layers) {
            plan.push_edge(EdgeRef::new(s, d)?.scaled(alpha))?;
        }
        ctx.registry(&plan)?
    };
    reg.detach_edge_sources();
    let mut run = ctx.run(&reg)?;
    let loss = ctx.metric_node(&mut run)?;
    let grads = run.tape.backward(loss)?;
    let mut out = HashMap::new();
    let mut dsts: Vec<EdgeTarget> = (0..n_layers).map(EdgeTarget::Layer).collect();
    dsts.push(EdgeTarget::Output);
    for d in dsts {
        let hook = d.hook(n_layers);
        let g = grads.get(run.hook_node(&hook)?);
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at `{hook}`")));
        }
        out.insert(d, g);
    }
    Ok(out)
}

/// Per edge, the attribution summed over examples (per position if
/// `positional`), with gradients of the batch-mean metric.
fn edge_sums(
    ctx: &PatchContext<'_>,
    pairs: &[(EdgeSource, EdgeTarget)],
    alpha: f64,
    positional: bool,
) -> Result<Vec<Vec<f64>>> {
    let grads = destination_gradients(ctx, alpha)?;
    let mut deltas: HashMap<EdgeSource, Tensor> = HashMap::new();
    for (s, _) in pairs {
        if !deltas.contains_key(s) {
            let hook = s.hook();
            let d = ctx.corrupted_value(&hook)?.sub(&*ctx.clean_value(&hook)?)?;
            deltas.insert(*s, d);
        }
    }
    let seq = ctx.batch.seq_len();
    pairs
        .iter()
        .map(|(s, d)| {
            let delta = &deltas[s];
            let g = &grads[d];
            let shape = delta.shape();
            let (b, l, dm) = (shape[0], shape[1], shape[2]);
            let mut per_pos = vec![0.0; l];
            for bi in 0..b {
                for (li, acc) in per_pos.iter_mut().enumerate() {
                    let base = (bi * l + li) * dm;
                    *acc += delta.data()[base..base + dm]
                        .iter()
                        .zip(&g.data()[base..base + dm])
                        .map(|(x, y)| x * y)
                        .sum::<f64>();
                }
            }
            debug_assert_eq!(l, seq);
            Ok(if positional {
                per_pos
            } else {
                vec![per_pos.iter().sum()]
            })
        })
        .collect()
}

/// Pooled metric and accuracy over several contexts for one plan.
fn evaluate(
    ctxs: &[PatchContext<'_>],
    graph: &CausalGraph,
    extra: Option<usize>,
) -> Result<(f64, f64)> {
    let results: Vec<(Vec<f64>, Vec<f64>)> = ctxs
        .par_iter()
        .map(|c| {
            let plan = graph.plan(c.model, extra)?;
            let out = c.run_with_plan(&plan)?;
            let acc =
                c.baseline
                    .per_example(Metric::Accuracy, &out.answer_logits, &c.batch.targets)?;
            Ok((out.per_example, acc))
        })
        .collect::<Result<_>>()?;
    let n: usize = results.iter().map(|r| r.0.len()).sum();
    let metric = results.iter().flat_map(|r| &r.0).sum::<f64>() / n as f64;
    let acc = results.iter().flat_map(|r| &r.1).sum::<f64>() / n as f64;
    Ok((metric, acc))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    Binary,
    /// Used when spot checks contradict monotonicity.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimalSetOptions {
    /// Rank by signed score instead of `|score|`.
    pub signed: bool,
    pub spot_checks: usize,
    /// Allowed metric slack before a spot check counts as a violation.
    pub tolerance: f64,
    pub seed: u64,
    pub prune: bool,
}

impl Default for MinimalSetOptions {
    fn default() -> Self {
        MinimalSetOptions {
            signed: false,
            spot_checks: 5,
            tolerance: 0.01,
            seed: 0,
            prune: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimalSet {
    /// Number of top-ranked edges kept before path pruning.
    pub k: usize,
    pub removable: usize,
    pub target: f64,
    pub metric_at_k: f64,
    pub pruned: usize,
    pub kept: usize,
    pub final_metric: f64,
    pub final_accuracy: f64,
    pub search: SearchMethod,
    /// Every `(k, metric)` evaluated, in evaluation order.
    pub evaluations: Vec<(usize, f64)>,
    pub graph: CausalGraph,
}

/// Smallest `k` such that keeping the `k` highest-ranked edges (patching
/// the rest) reaches `target`, found by binary search and guarded by
/// random spot checks. Kept edges off every embed → output path are then
/// patched as well.
pub fn minimal_edge_set(
    graph: &CausalGraph,
    ctxs: &[PatchContext<'_>],
    target: f64,
    opts: &MinimalSetOptions,
) -> Result<MinimalSet> {
    let removable = graph.removable();
    let mut ranked = Vec::with_capacity(removable.len());
    for &i in &removable {
        let e = &graph.edges[i];
        let s = e
            .score
            .ok_or_else(|| Error::Patch(format!("edge {} has no score", e.id())))?;
        ranked.push((i, if opts.signed { s } else { s.abs() }));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let n = ranked.len();

    let with_top = |k: usize| -> CausalGraph {
        let mut g = graph.clone();
        for (r, &(i, _)) in ranked.iter().enumerate() {
            g.edges[i].state = if r < k {
                EdgeState::Kept
            } else {
                EdgeState::Patched
            };
        }
        g
    };
    let mut memo: BTreeMap<usize, f64> = BTreeMap::new();
    let mut evaluations = Vec::new();
    let mut eval = |k: usize| -> Result<f64> {
        if let Some(&v) = memo.get(&k) {
            return Ok(v);
        }
        let v = evaluate(ctxs, &with_top(k), None)?.0;
        memo.insert(k, v);
        evaluations.push((k, v));
        Ok(v)
    };

    let full = eval(n)?;
    if full < target {
        return Err(Error::TargetUnreachable {
            target,
            achieved: full,
        });
    }
    let mut search = SearchMethod::Binary;
    let k = if eval(0)? >= target {
        0
    } else {
        let (mut lo, mut hi) = (0, n);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if eval(mid)? >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let picks = sample(&mut rng, n + 1, opts.spot_checks.min(n + 1)).into_vec();
        let mut violated = false;
        for p in picks {
            let v = eval(p)?;
            if (p < hi && v >= target + opts.tolerance) || (p > hi && v < target - opts.tolerance) {
                violated = true;
            }
        }
        if violated {
            search = SearchMethod::Linear;
            let mut found = n;
            for k in 1..n {
                if eval(k)? >= target {
                    found = k;
                    break;
                }
            }
            found
        } else {
            hi
        }
    };
    let metric_at_k = eval(k)?;
    let mut g = with_top(k);
    let pruned = if opts.prune {
        g.prune_disconnected()
    } else {
        0
    };
    let (final_metric, final_accuracy) = evaluate(ctxs, &g, None)?;
    Ok(MinimalSet {
        k,
        removable: n,
        target,
        metric_at_k,
        pruned,
        kept: g.kept_removable_count(),
        final_metric,
        final_accuracy,
        search,
        evaluations,
        graph: g,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcdcVisit {
    pub edge: String,
    pub before: f64,
    pub after: f64,
    pub removed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcdcResult {
    pub thresh: f64,
    pub start_metric: f64,
    pub start_accuracy: f64,
    pub final_metric: f64,
    pub final_accuracy: f64,
    pub pruned: usize,
    pub visits: Vec<AcdcVisit>,
    pub graph: CausalGraph,
}

/// Visits kept removable edges from the sink backwards (destination order
/// descending, then `|score|` descending) and patches each edge whose
/// removal lowers the metric by less than `thresh` (or not at all).
/// Disconnected edges are patched at the end.
pub fn acdc_sweep(
    graph: &CausalGraph,
    ctxs: &[PatchContext<'_>],
    thresh: f64,
) -> Result<AcdcResult> {
    if thresh.is_nan() || thresh < 0.0 {
        return Err(Error::invalid(
            "acdc_sweep",
            format!("thresh must be ≥ 0, got {thresh}"),
        ));
    }
    graph.validate()?;
    let mut g = graph.clone();
    let mut order: Vec<usize> = g
        .removable()
        .into_iter()
        .filter(|&i| g.edges[i].is_kept())
        .collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&g.edges[a], &g.edges[b]);
        let sa = ea.score.unwrap_or(0.0).abs();
        let sb = eb.score.unwrap_or(0.0).abs();
        eb.dst
            .order()
            .cmp(&ea.dst.order())
            .then(sb.total_cmp(&sa))
            .then(eb.src.order().cmp(&ea.src.order()))
            .then(a.cmp(&b))
    });

    let (start_metric, start_accuracy) = evaluate(ctxs, &g, None)?;
    let mut current = start_metric;
    let mut visits = Vec::with_capacity(order.len());
    for i in order {
        let (after, _) = evaluate(ctxs, &g, Some(i))?;
        let drop = current - after;
        let removed = drop < thresh || drop <= 0.0;
        g.edges[i].delta = Some(after - current);
        if removed {
            g.edges[i].state = EdgeState::Patched;
        }
        visits.push(AcdcVisit {
            edge: g.edges[i].id(),
            before: current,
            after,
            removed,
        });
        if removed {
            current = after;
        }
    }
    let pruned = g.prune_disconnected();
    let (final_metric, final_accuracy) = evaluate(ctxs, &g, None)?;
    Ok(AcdcResult {
        thresh,
        start_metric,
        start_accuracy,
        final_metric,
        final_accuracy,
        pruned,
        visits,
        graph: g,
    })
}

/// Metric and accuracy with every patched edge of `graph` patched.
pub fn evaluate_graph(ctxs: &[PatchContext<'_>], graph: &CausalGraph) -> Result<(f64, f64)> {
    evaluate(ctxs, graph, None)
}

/// Patches every removable edge on its own (all others kept) and stores
/// the metric change in `Edge::delta`.
pub fn measure_edge_deltas(graph: &mut CausalGraph, ctxs: &[PatchContext<'_>]) -> Result<()> {
    let mut base = graph.clone();
    for i in base.removable() {
        base.edges[i].state = EdgeState::Kept;
    }
    let (clean, _) = evaluate(ctxs, &base, None)?;
    let deltas: Vec<(usize, f64)> = base
        .removable()
        .into_par_iter()
        .map(|i| {
            let mut g = base.clone();
            g.edges[i].state = EdgeState::Patched;
            Ok((i, evaluate(ctxs, &g, None)?.0 - clean))
        })
        .collect::<Result<_>>()?;
    for (i, d) in deltas {
        graph.edges[i].delta = Some(d);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_graph_size() {
        let g = CausalGraph::residual(4);
        // embed → 4 layers + output, plus layer pairs, plus layers → output
        assert_eq!(g.len(), 5 + 6 + 4);
        g.validate().unwrap();
        let p = CausalGraph::positional(4, (0..3).map(|i| format!("p{i}")).collect());
        assert_eq!(p.len(), 45);
        p.validate().unwrap();
    }

    #[test]
    fn intra_layer_edges() {
        let g = CausalGraph::residual(2).with_intra_layer(4);
        assert_eq!(g.len(), 6 + 2 * (1 + 4 + 1 + 2));
        assert_eq!(g.edges().iter().filter(|e| e.always_on()).count(), 4);
        g.validate().unwrap();
    }

    #[test]
    fn always_on_edges_refuse_patching() {
        let mut g = CausalGraph::residual(1).with_intra_layer(2);
        let i = g.index_of("layer0.ssm->layer0").unwrap();
        assert!(g.set_state(i, EdgeState::Patched).is_err());
    }

    #[test]
    fn pruning_keeps_only_connected_edges() {
        let mut g = CausalGraph::residual(3);
        for i in 0..g.len() {
            g.edges[i].state = EdgeState::Patched;
        }
        for id in [
            "embed->layer1.input",
            "layer1->output",
            "layer0->layer2.input",
        ] {
            let i = g.index_of(id).unwrap();
            g.edges[i].state = EdgeState::Kept;
        }
        assert_eq!(g.prune_disconnected(), 1);
        let kept: Vec<String> = g.kept().map(Edge::id).collect();
        assert_eq!(kept, vec!["embed->layer1.input", "layer1->output"]);
    }

    #[test]
    fn pruning_follows_intra_layer_paths() {
        let mut g = CausalGraph::residual(1).with_intra_layer(2);
        for i in g.removable() {
            g.edges[i].state = EdgeState::Patched;
        }
        for id in [
            "embed->layer0.input",
            "layer0->output",
            "layer0.conv->layer0.ssm",
        ] {
            let i = g.index_of(id).unwrap();
            g.edges[i].state = EdgeState::Kept;
        }
        // conv has no kept input, so conv → ssm and everything upstream goes
        g.prune_disconnected();
        assert_eq!(g.kept_removable_count(), 0);
    }

    #[test]
    fn dot_and_csv_exports() {
        let g = CausalGraph::positional(1, vec!["n1".into(), "out".into()]);
        let dot = g.to_dot();
        assert!(dot.contains("\"layer0\" -> \"output\" [label=\"out\"]"));
        let csv = g.adjacency_csv(false);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "source\\destination,layer0.input,output");
        assert_eq!(lines[1], "embed,1,1");
        assert_eq!(lines[2], "layer0,,1");
    }

    #[test]
    fn backward_edges_rejected() {
        let mut e = Edge::new(
            Node::LayerOutput(2),
            Node::LayerInput(1),
            EdgeKind::Residual,
        );
        e.state = EdgeState::Kept;
        assert!(CausalGraph::from_edges(3, Vec::new(), vec![e]).is_err());
    }
}
