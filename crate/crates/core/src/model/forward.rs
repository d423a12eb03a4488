//! Hooked forward pass.
//!
//! Per layer, hooks fire in this order: `hook_layer_input`, `hook_in_proj`,
//! `hook_skip`, `hook_conv` (or the `hook_conv_slice.{k}` taps when the
//! layer is decomposed), `hook_ssm_input`, `hook_B_bar`, `hook_h.{t}` for
//! each position, `hook_out_proj`.

use std::collections::HashMap;
use std::sync::Arc;

use super::hooks::{h_hook, hook_name, output_hook_name, EdgeSource, EdgeTarget, HOOK_EMBED};
use super::{ActivationCache, DtProjection, HookRegistry, LayerParams, Model, Provenance};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A finished forward pass: the tape, the logits node and every hook node.
#[derive(Debug)]
pub struct Run {
    pub tape: Tape,
    pub logits: NodeId,
    hooks: Vec<(String, NodeId)>,
    hook_index: HashMap<String, NodeId>,
    params: HashMap<String, NodeId>,
}

impl Run {
    /// `[B, L, V]`
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    pub fn hook_node(&self, name: &str) -> Result<NodeId> {
        self.hook_index
            .get(&super::canonical_name(name))
            .copied()
            .ok_or_else(|| Error::UnknownHook(name.to_string()))
    }

    pub fn hook_value(&self, name: &str) -> Result<&Tensor> {
        Ok(self.tape.value(self.hook_node(name)?))
    }

    /// Hook names in firing order; one entry per firing.
    pub fn fired_hooks(&self) -> impl Iterator<Item = &str> {
        self.hooks.iter().map(|(n, _)| n.as_str())
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn cache(&self, provenance: Provenance) -> ActivationCache {
        let mut cache = ActivationCache::new(provenance);
        for (name, id) in &self.hooks {
            cache.insert(name.clone(), self.tape.value_arc(*id));
        }
        cache
    }
}

struct Ctx<'a> {
    tape: Tape,
    hooks: &'a HookRegistry,
    fired: Vec<(String, NodeId)>,
    params: HashMap<String, NodeId>,
}

impl Ctx<'_> {
    fn fire(&mut self, name: String, id: NodeId, positional: bool) -> Result<NodeId> {
        let out = self.hooks.fire(&mut self.tape, &name, id, positional)?;
        self.fired.push((name, out));
        Ok(out)
    }

    fn param(&mut self, name: String, value: &Arc<Tensor>) -> NodeId {
        let id = self.tape.leaf_arc(Arc::clone(value));
        self.params.insert(name, id);
        id
    }

    /// Broadcasts a trailing-axis vector `[F]` to `shape = [..., F]`.
    fn expand_vector(&mut self, v: NodeId, shape: &[usize]) -> Result<NodeId> {
        let mut s = vec![1; shape.len()];
        *s.last_mut().unwrap() = *shape.last().unwrap();
        let r = self.tape.reshape(v, &s)?;
        self.tape.broadcast_to(r, shape)
    }

    fn rms_norm(&mut self, x: NodeId, weight: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.tape.shape(x).to_vec();
        let rank = shape.len();
        let sq = self.tape.mul(x, x)?;
        let ms = self.tape.mean(sq, rank - 1)?;
        let ms = self.tape.add_scalar(ms, eps);
        let inv = self.tape.powf(ms, -0.5);
        let mut keep = shape.clone();
        keep[rank - 1] = 1;
        let inv = self.tape.reshape(inv, &keep)?;
        let inv = self.tape.broadcast_to(inv, &shape)?;
        let normed = self.tape.mul(x, inv)?;
        let w = self.expand_vector(weight, &shape)?;
        self.tape.mul(normed, w)
    }

    fn check_finite(&self, id: NodeId, what: impl FnOnce() -> String) -> Result<()> {
        if self.tape.value(id).all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what()))
        }
    }
}

fn batch_shape(tokens: &[Vec<usize>]) -> Result<(usize, usize)> {
    let b = tokens.len();
    let l = tokens.first().map(Vec::len).unwrap_or(0);
    if b == 0 || l == 0 {
        return Err(Error::invalid("forward", "empty token batch"));
    }
    if let Some(bad) = tokens.iter().find(|t| t.len() != l) {
        return Err(Error::invalid(
            "forward",
            format!(
                "prompts in one batch must share a length ({} vs {})",
                l,
                bad.len()
            ),
        ));
    }
    Ok((b, l))
}

impl Model {
    /// Runs the model on a `[B, L]` batch with the given interventions.
    pub fn run(&self, tokens: &[Vec<usize>], hooks: &HookRegistry) -> Result<Run> {
        let (b, l) = batch_shape(tokens)?;
        let cfg = self.config();
        let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: cfg.vocab_size,
            });
        }
        let mut cx = Ctx {
            tape: Tape::with_precision(self.precision()),
            hooks,
            fired: Vec::new(),
            params: HashMap::new(),
        };

        let table = cx.param("embed".into(), &self.embed);
        let emb = cx.tape.embedding(table, &ids, &[b, l])?;
        let embed = cx.fire(HOOK_EMBED.to_string(), emb, true)?;

        let mut sources: HashMap<EdgeSource, NodeId> = HashMap::new();
        sources.insert(EdgeSource::Embed, embed);
        let mut resid = embed;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = apply_edges(&mut cx, resid, EdgeTarget::Layer(i), &sources)?;
            // A node of its own, so gradients at the layer input exclude the
            // residual path around the layer.
            let input = if input == resid {
                cx.tape.scale(resid, 1.0)
            } else {
                input
            };
            let input = cx.fire(hook_name(i, "hook_layer_input"), input, true)?;
            let out = self.layer_body(&mut cx, i, layer, input)?;
            sources.insert(EdgeSource::Layer(i), out);
            resid = cx.tape.add(resid, out)?;
        }
        let post = apply_edges(&mut cx, resid, EdgeTarget::Output, &sources)?;
        let post = cx.fire(output_hook_name(cfg.n_layers), post, true)?;
        let fnorm = cx.param("final_norm".into(), &self.final_norm);
        let normed = cx.rms_norm(post, fnorm, cfg.norm_eps)?;
        let unembed = cx.param("unembed".into(), &self.unembed);
        let logits = cx.tape.linear(normed, unembed)?;

        let hook_index = cx.fired.iter().cloned().collect();
        Ok(Run {
            tape: cx.tape,
            logits,
            hooks: cx.fired,
            hook_index,
            params: cx.params,
        })
    }

    /// Logits only.
    pub fn forward(&self, tokens: &[Vec<usize>], hooks: &HookRegistry) -> Result<Tensor> {
        let run = self.run(tokens, hooks)?;
        Ok(run.logits().clone())
    }

    /// Layer `i`'s contribution to the residual stream given its input.
    fn layer_body(
        &self,
        cx: &mut Ctx<'_>,
        i: usize,
        p: &LayerParams,
        input: NodeId,
    ) -> Result<NodeId> {
        let cfg = self.config();
        let pname = |s: &str| format!("layers.{i}.{s}");
        let norm_w = cx.param(pname("norm"), &p.norm);
        let normed = cx.rms_norm(input, norm_w, cfg.norm_eps)?;

        let w_in = cx.param(pname("w_in"), &p.w_in);
        let xin = cx.tape.linear(normed, w_in)?;
        let xin = cx.fire(hook_name(i, "hook_in_proj"), xin, true)?;
        let w_skip = cx.param(pname("w_skip"), &p.w_skip);
        let skip = cx.tape.linear(normed, w_skip)?;
        let skip = cx.fire(hook_name(i, "hook_skip"), skip, true)?;

        let conv_w = cx.param(pname("conv_weight"), &p.conv_weight);
        let conv_b = cx.param(pname("conv_bias"), &p.conv_bias);
        let conv = if cx.hooks.wants_decomposed_conv(i) {
            conv_by_taps(cx, i, xin, conv_w, conv_b)?
        } else {
            let t = cx.tape.permute(xin, &[0, 2, 1])?;
            let c = cx.tape.conv1d(t, conv_w, conv_b)?;
            cx.tape.permute(c, &[0, 2, 1])?
        };
        let conv = cx.fire(hook_name(i, "hook_conv"), conv, true)?;
        let x = cx.tape.silu(conv);
        let x = cx.fire(hook_name(i, "hook_ssm_input"), x, true)?;

        let y = self.ssm(cx, i, p, x)?;
        let gate = cx.tape.silu(skip);
        let gated = cx.tape.mul(y, gate)?;
        let w_out = cx.param(pname("w_out"), &p.w_out);
        let out = cx.tape.linear(gated, w_out)?;
        cx.fire(hook_name(i, "hook_out_proj"), out, true)
    }

    /// Selective scan: `h_t = Ā_t ∘ h_{t-1} + B̄_t x_t`, `y_t = C_t·h_t + D∘x_t`.
    fn ssm(&self, cx: &mut Ctx<'_>, i: usize, p: &LayerParams, x: NodeId) -> Result<NodeId> {
        let shape = cx.tape.shape(x).to_vec();
        let (b, l, e) = (shape[0], shape[1], shape[2]);
        let n = self.config().d_state;
        let pname = |s: &str| format!("layers.{i}.{s}");

        let dt_pre = match &p.dt {
            DtProjection::Full { weight } => {
                let w = cx.param(pname("dt_weight"), weight);
                cx.tape.linear(x, w)?
            }
            DtProjection::LowRank { down, up } => {
                let dw = cx.param(pname("dt_down"), down);
                let uw = cx.param(pname("dt_up"), up);
                let r = cx.tape.linear(x, dw)?;
                cx.tape.linear(r, uw)?
            }
        };
        let dt_bias = cx.param(pname("dt_bias"), &p.dt_bias);
        let bias = cx.expand_vector(dt_bias, &[b, l, e])?;
        let dt_pre = cx.tape.add(dt_pre, bias)?;
        let delta = cx.tape.softplus(dt_pre);
        cx.check_finite(delta, || format!("layer {i} step size"))?;

        let w_b = cx.param(pname("w_b"), &p.w_b);
        let w_c = cx.param(pname("w_c"), &p.w_c);
        let bmat = cx.tape.linear(x, w_b)?;
        let cmat = cx.tape.linear(x, w_c)?;

        let full = [b, l, e, n];
        let a_log = cx.param(pname("a_log"), &p.a_log);
        let a = cx.tape.exp(a_log);
        let a = cx.tape.reshape(a, &[1, 1, e, n])?;
        let a = cx.tape.broadcast_to(a, &full)?;
        let d4 = cx.tape.reshape(delta, &[b, l, e, 1])?;
        let d4 = cx.tape.broadcast_to(d4, &full)?;
        let da = cx.tape.mul(d4, a)?;
        let neg = cx.tape.neg(da);
        let a_bar = cx.tape.exp(neg);

        let b4 = cx.tape.reshape(bmat, &[b, l, 1, n])?;
        let b4 = cx.tape.broadcast_to(b4, &full)?;
        let b_bar = cx.tape.mul(d4, b4)?;
        let b_bar = cx.fire(hook_name(i, "hook_B_bar"), b_bar, true)?;

        let x4 = cx.tape.reshape(x, &[b, l, e, 1])?;
        let x4 = cx.tape.broadcast_to(x4, &full)?;
        let u = cx.tape.mul(b_bar, x4)?;

        let mut ys = Vec::with_capacity(l);
        let mut h: Option<NodeId> = None;
        for t in 0..l {
            let u_t = cx.tape.slice(u, 1, t, 1)?;
            let u_t = cx.tape.reshape(u_t, &[b, e, n])?;
            let h_t = match h {
                None => u_t,
                Some(prev) => {
                    let a_t = cx.tape.slice(a_bar, 1, t, 1)?;
                    let a_t = cx.tape.reshape(a_t, &[b, e, n])?;
                    let decayed = cx.tape.mul(a_t, prev)?;
                    cx.tape.add(decayed, u_t)?
                }
            };
            let h_t = cx.fire(h_hook(i, t), h_t, false)?;
            cx.check_finite(h_t, || format!("layer {i} hidden state at position {t}"))?;
            h = Some(h_t);

            let c_t = cx.tape.slice(cmat, 1, t, 1)?;
            let c_t = cx.tape.reshape(c_t, &[b, 1, n])?;
            let c_t = cx.tape.broadcast_to(c_t, &[b, e, n])?;
            let hc = cx.tape.mul(h_t, c_t)?;
            let y_t = cx.tape.sum(hc, 2)?;
            ys.push(cx.tape.reshape(y_t, &[b, 1, e])?);
        }
        let y = if ys.len() == 1 {
            ys[0]
        } else {
            cx.tape.concat(&ys, 1)?
        };
        let d_skip = cx.param(pname("d_skip"), &p.d_skip);
        let d = cx.expand_vector(d_skip, &[b, l, e])?;
        let dx = cx.tape.mul(x, d)?;
        cx.tape.add(y, dx)
    }

    /// Runs only the selective scan of `layer` on `x: [B, L, E]`.
    pub fn ssm_scan(&self, layer: usize, x: &Tensor) -> Result<Tensor> {
        let p = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::invalid("ssm_scan", format!("layer {layer} out of range")))?;
        if x.rank() != 3 || x.shape()[2] != self.config().d_inner {
            return Err(Error::shape(
                "ssm_scan",
                x.shape(),
                &[0, 0, self.config().d_inner],
            ));
        }
        let hooks = HookRegistry::new();
        let mut cx = Ctx {
            tape: Tape::with_precision(self.precision()),
            hooks: &hooks,
            fired: Vec::new(),
            params: HashMap::new(),
        };
        let xid = cx.tape.leaf(x.clone());
        let y = self.ssm(&mut cx, layer, p, xid)?;
        Ok(cx.tape.value(y).clone())
    }
}

/// Adds `alpha * mask * (corrupted - live)` for every edge patched into `dst`.
fn apply_edges(
    cx: &mut Ctx<'_>,
    resid: NodeId,
    dst: EdgeTarget,
    sources: &HashMap<EdgeSource, NodeId>,
) -> Result<NodeId> {
    let hooks = cx.hooks;
    let edges = hooks.edges_into(dst);
    if edges.is_empty() {
        return Ok(resid);
    }
    let shape = cx.tape.shape(resid).to_vec();
    let mut acc = resid;
    for e in edges {
        let live = *sources.get(&e.src).ok_or_else(|| {
            Error::Patch(format!(
                "edge source {:?} does not exist in this model",
                e.src
            ))
        })?;
        if e.corrupted.shape() != shape.as_slice() {
            return Err(Error::Patch(format!(
                "edge {:?} -> {:?}: corrupted value has shape {:?}, live activation has {:?}",
                e.src,
                e.dst,
                e.corrupted.shape(),
                shape
            )));
        }
        let live = if hooks.edge_sources_detached() {
            let v = cx.tape.value_arc(live);
            cx.tape.leaf_arc(v)
        } else {
            live
        };
        let corrupted = cx.tape.leaf_arc(Arc::clone(&e.corrupted));
        let diff = cx.tape.sub(corrupted, live)?;
        let scaled = match (&e.positions, e.alpha) {
            (super::Positions::All, a) if a == 1.0 => diff,
            (positions, a) => {
                let mask = super::hooks::position_mask(&shape, positions, &format!("{:?}", e.dst))?
                    .scale(a);
                let m = cx.tape.leaf(mask);
                cx.tape.mul(diff, m)?
            }
        };
        acc = cx.tape.add(acc, scaled)?;
    }
    Ok(acc)
}

/// Convolution as a sum of per-tap products, firing `hook_conv_slice.{k}`
/// on each shifted input.
fn conv_by_taps(
    cx: &mut Ctx<'_>,
    layer: usize,
    xin: NodeId,
    w: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let shape = cx.tape.shape(xin).to_vec();
    let (b, l, e) = (shape[0], shape[1], shape[2]);
    let k = cx.tape.shape(w)[1];
    let mut acc = cx.expand_vector(bias, &shape)?;
    for tap in 0..k {
        let offset = tap as i64 - (k as i64 - 1);
        let back = (k - 1 - tap).min(l);
        let shifted = if back == 0 {
            xin
        } else {
            let zeros = cx.tape.leaf(Tensor::zeros(&[b, back, e]));
            if back == l {
                zeros
            } else {
                let head = cx.tape.slice(xin, 1, 0, l - back)?;
                cx.tape.concat(&[zeros, head], 1)?
            }
        };
        let shifted = cx.fire(super::conv_slice_hook(layer, offset), shifted, true)?;
        let col = cx.tape.slice(w, 1, tap, 1)?;
        let col = cx.tape.reshape(col, &[e])?;
        let col = cx.expand_vector(col, &shape)?;
        let term = cx.tape.mul(shifted, col)?;
        acc = cx.tape.add(acc, term)?;
    }
    Ok(acc)
}

/// Convenience used by tests and analysis: the clean scan output for
/// `x` on a fresh tape.
pub fn ssm_scan_values(model: &Model, layer: usize, x: &Tensor) -> Result<Tensor> {
    model.ssm_scan(layer, x)
}
