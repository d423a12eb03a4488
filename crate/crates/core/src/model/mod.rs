//! Selective state-space language model with named intervention hooks.

mod checkpoint;
mod forward;
mod hooks;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Precision;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{
    load_checkpoint, load_tensors, save_checkpoint, save_tensors, Sidecar, SidecarEntry,
};
pub use forward::{ssm_scan_values, Run};
pub(crate) use hooks::parse_conv_slice;
pub use hooks::{
    canonical_hook_names, canonical_name, conv_slice_hook, h_hook, hook_name, output_hook_name,
    ActivationCache, EdgePatch, EdgeSource, EdgeTarget, HookAction, HookRegistry, Positions,
    Provenance, HOOK_EMBED,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DtParameterization {
    /// `[E, E]` projection.
    Full,
    /// `[r, E]` down-projection followed by `[E, r]` up-projection.
    LowRank { rank: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub vocab_size: usize,
    pub dt: DtParameterization,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

fn default_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn new(
        n_layers: usize,
        d_model: usize,
        d_inner: usize,
        d_state: usize,
        d_conv: usize,
        vocab_size: usize,
    ) -> Self {
        ModelConfig {
            n_layers,
            d_model,
            d_inner,
            d_state,
            d_conv,
            vocab_size,
            dt: DtParameterization::Full,
            norm_eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("d_state", self.d_state),
            ("d_conv", self.d_conv),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if let DtParameterization::LowRank { rank: 0 } = self.dt {
            return Err(Error::Config("dt rank must be at least 1".into()));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::Config("norm_eps must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum DtProjection {
    Full { weight: Arc<Tensor> },
    LowRank { down: Arc<Tensor>, up: Arc<Tensor> },
}

/// Learned parameters of one layer. Weights are stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub norm: Arc<Tensor>,
    pub w_in: Arc<Tensor>,
    pub w_skip: Arc<Tensor>,
    pub conv_weight: Arc<Tensor>,
    pub conv_bias: Arc<Tensor>,
    pub w_b: Arc<Tensor>,
    pub w_c: Arc<Tensor>,
    pub a_log: Arc<Tensor>,
    pub d_skip: Arc<Tensor>,
    pub dt: DtProjection,
    pub dt_bias: Arc<Tensor>,
    pub w_out: Arc<Tensor>,
}

/// Immutable model; share it across threads and run independent forward
/// passes concurrently.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub embed: Arc<Tensor>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Arc<Tensor>,
    pub unembed: Arc<Tensor>,
    precision: Precision,
}

fn sample_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, e, n, k, v) = (
        config.d_model,
        config.d_inner,
        config.d_state,
        config.d_conv,
        config.vocab_size,
    );
    let mut out = vec![("embed".to_string(), vec![v, d])];
    for i in 0..config.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        out.push((p("norm"), vec![d]));
        out.push((p("w_in"), vec![e, d]));
        out.push((p("w_skip"), vec![e, d]));
        out.push((p("conv_weight"), vec![e, k]));
        out.push((p("conv_bias"), vec![e]));
        out.push((p("w_b"), vec![n, e]));
        out.push((p("w_c"), vec![n, e]));
        out.push((p("a_log"), vec![e, n]));
        out.push((p("d_skip"), vec![e]));
        match config.dt {
            DtParameterization::Full => out.push((p("dt_weight"), vec![e, e])),
            DtParameterization::LowRank { rank } => {
                out.push((p("dt_down"), vec![rank, e]));
                out.push((p("dt_up"), vec![e, rank]));
            }
        }
        out.push((p("dt_bias"), vec![e]));
        out.push((p("w_out"), vec![d, e]));
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![v, d]));
    out
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    /// Parameter names and shapes in canonical order.
    pub fn parameter_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        expected_shapes(config)
    }

    pub fn named_parameters(&self) -> Vec<(String, Arc<Tensor>)> {
        let mut out = vec![("embed".to_string(), self.embed.clone())];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("norm"), l.norm.clone()));
            out.push((p("w_in"), l.w_in.clone()));
            out.push((p("w_skip"), l.w_skip.clone()));
            out.push((p("conv_weight"), l.conv_weight.clone()));
            out.push((p("conv_bias"), l.conv_bias.clone()));
            out.push((p("w_b"), l.w_b.clone()));
            out.push((p("w_c"), l.w_c.clone()));
            out.push((p("a_log"), l.a_log.clone()));
            out.push((p("d_skip"), l.d_skip.clone()));
            match &l.dt {
                DtProjection::Full { weight } => out.push((p("dt_weight"), weight.clone())),
                DtProjection::LowRank { down, up } => {
                    out.push((p("dt_down"), down.clone()));
                    out.push((p("dt_up"), up.clone()));
                }
            }
            out.push((p("dt_bias"), l.dt_bias.clone()));
            out.push((p("w_out"), l.w_out.clone()));
        }
        out.push(("final_norm".to_string(), self.final_norm.clone()));
        out.push(("unembed".to_string(), self.unembed.clone()));
        out
    }

    /// Builds a model from named tensors, checking every name and shape.
    pub fn from_named(config: ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Model> {
        config.validate()?;
        for (name, shape) in expected_shapes(&config) {
            match tensors.get(&name) {
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        let mut take = |name: String| Arc::new(tensors.remove(&name).expect("checked above"));
        let embed = take("embed".into());
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut p = |s: &str| take(format!("layers.{i}.{s}"));
            let norm = p("norm");
            let w_in = p("w_in");
            let w_skip = p("w_skip");
            let conv_weight = p("conv_weight");
            let conv_bias = p("conv_bias");
            let w_b = p("w_b");
            let w_c = p("w_c");
            let a_log = p("a_log");
            let d_skip = p("d_skip");
            let dt = match config.dt {
                DtParameterization::Full => DtProjection::Full {
                    weight: p("dt_weight"),
                },
                DtParameterization::LowRank { .. } => DtProjection::LowRank {
                    down: p("dt_down"),
                    up: p("dt_up"),
                },
            };
            let dt_bias = p("dt_bias");
            let w_out = p("w_out");
            layers.push(LayerParams {
                norm,
                w_in,
                w_skip,
                conv_weight,
                conv_bias,
                w_b,
                w_c,
                a_log,
                d_skip,
                dt,
                dt_bias,
                w_out,
            });
        }
        let final_norm = take("final_norm".into());
        let unembed = take("unembed".into());
        Ok(Model {
            config,
            embed,
            layers,
            final_norm,
            unembed,
            precision: Precision::F64,
        })
    }

    /// Replaces parameters by name; names not given keep their values.
    pub fn with_parameters(&self, updates: BTreeMap<String, Tensor>) -> Result<Model> {
        let mut all: BTreeMap<String, Tensor> = self
            .named_parameters()
            .into_iter()
            .map(|(k, v)| (k, (*v).clone()))
            .collect();
        for (k, v) in updates {
            if !all.contains_key(&k) {
                return Err(Error::Checkpoint(format!("unknown parameter `{k}`")));
            }
            all.insert(k, v);
        }
        Ok(Model::from_named(self.config.clone(), all)?.with_precision(self.precision))
    }

    /// Random initialisation in the usual Mamba style: `A = -(1..=N)`,
    /// step sizes log-uniform in `[1e-3, 1e-1]`, unit skip `D`.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = config.n_layers.max(1) as f64;
        let (e, n, k) = (config.d_inner, config.d_state, config.d_conv);
        let mut tensors = BTreeMap::new();
        for (name, shape) in expected_shapes(&config) {
            let fan_in = *shape.last().unwrap() as f64;
            let suffix = name.rsplit('.').next().unwrap();
            let t = match suffix {
                "norm" | "final_norm" => Tensor::full(&shape, 1.0),
                "d_skip" => Tensor::full(&shape, 1.0),
                "conv_bias" => Tensor::zeros(&shape),
                "a_log" => Tensor::from_fn(&[e, n], |i| ((i[1] + 1) as f64).ln()),
                "dt_bias" => Tensor::from_fn(&shape, |_| {
                    let lo: f64 = 1e-3f64.ln();
                    let hi: f64 = 1e-1f64.ln();
                    let dt = (lo + rng.gen::<f64>() * (hi - lo)).exp();
                    // inverse softplus
                    dt + (-(-dt).exp_m1()).ln()
                }),
                "conv_weight" => {
                    let bound = 1.0 / (k as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
                }
                "embed" => Tensor::from_fn(&shape, |_| sample_normal(&mut rng)),
                "w_out" => {
                    let s = 1.0 / (fan_in.sqrt() * (2.0 * n_layers).sqrt());
                    Tensor::from_fn(&shape, |_| sample_normal(&mut rng) * s)
                }
                _ => {
                    let s = 1.0 / fan_in.sqrt();
                    Tensor::from_fn(&shape, |_| sample_normal(&mut rng) * s)
                }
            };
            tensors.insert(name, t);
        }
        Model::from_named(config, tensors)
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }
}
