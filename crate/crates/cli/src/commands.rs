use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use ssm_circuits::analysis::{
    build_name_averages, cosine_lens, early_slot_success, substitution_grid, SteerMethod,
};
use ssm_circuits::autodiff::Precision;
use ssm_circuits::circuit::{
    acdc_sweep, eap, eap_integrated_gradients, minimal_edge_set, AttributionTable, CausalGraph,
    EapOptions, MinimalSetOptions,
};
use ssm_circuits::io::write_atomic_str;
use ssm_circuits::ioi::{generate_batch, to_jsonl, DatasetConfig, Lexicon, PromptPair, Tokenizer};
use ssm_circuits::model::{load_checkpoint, save_checkpoint, Model, Sidecar};
use ssm_circuits::patching::{
    ablation_grid, conv_slice_grid, greedy_crosstalk_circuit, greedy_layer_removal,
    layer_removal_scan, pooled_clean_metric, PatchContext, Target,
};
use ssm_circuits::report::{csv_line, Grid, Manifest, LIBRARY_VERSION};
use ssm_circuits::testbench::{planted_ioi_model, train_toy, ToyTaskSpec};
use ssm_circuits::Error;

use crate::config::{sha256_hex, ExperimentConfig, ModelKind};
use crate::error::CliError;

pub type Result<T> = std::result::Result<T, CliError>;

/// Output directory of one experiment; collects artifact names for the
/// manifest.
pub struct Session<'a> {
    pub experiment: &'static str,
    pub cfg: &'a ExperimentConfig,
    pub out: PathBuf,
    pub cache: PathBuf,
    artifacts: Vec<String>,
    results: Map<String, Value>,
}

impl<'a> Session<'a> {
    pub fn new(
        experiment: &'static str,
        cfg: &'a ExperimentConfig,
        out: PathBuf,
        cache: PathBuf,
    ) -> Result<Self> {
        fs::create_dir_all(&out)?;
        Ok(Session {
            experiment,
            cfg,
            out,
            cache,
            artifacts: Vec::new(),
            results: Map::new(),
        })
    }

    fn write(&mut self, name: &str, body: &str) -> Result<()> {
        write_atomic_str(&self.out.join(name), body)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn add(&mut self, names: Vec<String>) {
        self.artifacts.extend(names);
    }

    fn result(&mut self, key: &str, value: impl Into<Value>) {
        self.results.insert(key.to_string(), value.into());
    }

    pub fn finish(self) -> Result<()> {
        let manifest = Manifest {
            experiment: self.experiment.to_string(),
            library_version: LIBRARY_VERSION.to_string(),
            config_hash: self.cfg.hash(self.experiment),
            seed: self.cfg.seed,
            config: serde_json::to_value(self.cfg)?,
            artifacts: self.artifacts,
            results: Value::Object(self.results),
        };
        manifest.write(&self.out)?;
        Ok(())
    }

    fn pairs_with(&self, count: usize, seed: u64) -> Result<Vec<PromptPair>> {
        let tok = Tokenizer::for_lexicon(&Lexicon::default())?;
        let cfg = DatasetConfig {
            templates: self.cfg.templates()?,
            corruptions: self.cfg.dataset.corruptions.clone(),
            count,
            seed,
            lexicon: Lexicon::default(),
        };
        Ok(generate_batch(&cfg, &tok)?)
    }

    fn pairs(&self) -> Result<Vec<PromptPair>> {
        self.pairs_with(self.cfg.dataset.count, self.cfg.seed)
    }

    fn model(&self) -> Result<Model> {
        let m = &self.cfg.model;
        match m.source {
            ModelKind::Toy => cached_toy(&self.cache, &ToyTaskSpec::default()),
            ModelKind::Planted => {
                Ok(planted_ioi_model(m.planted_layers, m.planted_layer, self.cfg.seed)?.model)
            }
            ModelKind::Checkpoint => {
                let path = m.path.as_ref().expect("validated");
                if !path.exists() {
                    return Err(Error::Checkpoint(format!("{} not found", path.display())).into());
                }
                let sidecar = m
                    .sidecar
                    .as_deref()
                    .map(Sidecar::from_json_file)
                    .transpose()?;
                Ok(load_checkpoint(path, None, sidecar.as_ref())?)
            }
        }
    }

    fn layer(&self, model: &Model) -> Result<usize> {
        let layer = match (self.cfg.params.layer, self.cfg.model.source) {
            (Some(l), _) => l,
            (None, ModelKind::Planted) => self.cfg.model.planted_layer,
            (None, _) => {
                return Err(CliError::Config(
                    "params.layer: required for this experiment".into(),
                ))
            }
        };
        if layer >= model.n_layers() {
            return Err(CliError::Config(format!(
                "params.layer: {layer} out of range for {} layers",
                model.n_layers()
            )));
        }
        Ok(layer)
    }
}

/// Trains the toy model once per spec and keeps it under `cache`.
fn cached_toy(cache: &Path, spec: &ToyTaskSpec) -> Result<Model> {
    let key = sha256_hex(serde_json::to_string(spec)?.as_bytes());
    let path = cache.join(format!("toy-{}.safetensors", &key[..16]));
    if path.exists() {
        return Ok(load_checkpoint(&path, None, None)?);
    }
    log::info!("training toy model into {}", path.display());
    let run = train_toy(spec)?;
    save_checkpoint(&run.model, &path, Precision::F64)?;
    Ok(run.model)
}

fn contexts<'m>(
    s: &Session<'_>,
    model: &'m Model,
    pairs: &[PromptPair],
) -> Result<Vec<PatchContext<'m>>> {
    Ok(PatchContext::for_pairs(model, pairs, s.cfg.metric()?)?)
}

pub fn gen_data(s: &mut Session<'_>) -> Result<()> {
    let pairs = s.pairs()?;
    s.write("pairs.jsonl", &to_jsonl(&pairs)?)?;
    s.result("count", pairs.len());
    Ok(())
}

pub fn train_toy_cmd(s: &mut Session<'_>) -> Result<()> {
    let mut spec = ToyTaskSpec {
        init_seed: s.cfg.seed,
        ..ToyTaskSpec::default()
    };
    if let Some(steps) = s.cfg.params.steps {
        spec.train.steps = steps;
    }
    let run = train_toy(&spec)?;
    save_checkpoint(&run.model, &s.out.join("model.safetensors"), Precision::F64)?;
    s.add(vec!["model.safetensors".into()]);
    s.write("train.jsonl", &run.log.to_jsonl()?)?;
    s.write("spec.json", &(serde_json::to_string_pretty(&spec)? + "\n"))?;
    s.result("accuracy", run.accuracy);
    s.result("steps", run.log.entries.last().map_or(0, |e| e.step));
    Ok(())
}

pub fn ablate_grid(s: &mut Session<'_>) -> Result<()> {
    let model = s.model()?;
    let pairs = s.pairs()?;
    let ctxs = contexts(s, &model, &pairs)?;
    let hook = s.cfg.params.hook.clone();
    let grid = ablation_grid(&ctxs, &hook)?;
    s.add(grid.write(&s.out, "ablation")?);
    s.add(grid.flipped().write(&s.out, "ablation_flipped")?);
    s.result("clean_metric", pooled_clean_metric(&ctxs)?);
    s.result(
        "min_cell",
        grid.values
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min),
    );
    Ok(())
}

pub fn layer_removal(s: &mut Session<'_>) -> Result<()> {
    let model = s.model()?;
    let pairs = s.pairs()?;
    let ctxs = contexts(s, &model, &pairs)?;
    let scan = layer_removal_scan(&ctxs)?;
    let mut grid = Grid::new(
        format!("{} with one layer removed", s.cfg.metric),
        "",
        "layer",
        vec![s.cfg.metric.clone()],
        (0..scan.len()).map(|l| l.to_string()).collect(),
    );
    for (l, v) in scan.iter().enumerate() {
        grid.set(0, l, *v);
    }
    s.add(grid.write(&s.out, "layer_removal")?);
    let greedy = greedy_layer_removal(&ctxs)?;
    let mut csv = csv_line(&[
        "step".into(),
        "layer".into(),
        "metric".into(),
        "removed".into(),
    ]);
    for (i, g) in greedy.iter().enumerate() {
        csv += &csv_line(&[
            i.to_string(),
            g.layer.to_string(),
            g.metric.to_string(),
            g.patched.to_string(),
        ]);
    }
    s.write("greedy_removal.csv", &csv)?;
    s.result("clean_metric", pooled_clean_metric(&ctxs)?);
    s.result("scan", scan);
    Ok(())
}

pub fn crosstalk(s: &mut Session<'_>) -> Result<()> {
    let model = s.model()?;
    let pairs = s.pairs()?;
    let ctxs = contexts(s, &model, &pairs)?;
    let r = greedy_crosstalk_circuit(&ctxs, Target::Relative(s.cfg.params.target))?;
    s.write(
        "crosstalk.json",
        &(serde_json::to_string_pretty(&r)? + "\n"),
    )?;
    s.result("circuit", json!(r.circuit));
    s.result("reached", r.reached);
    s.result("start_metric", r.start_metric);
    Ok(())
}

pub fn conv_slice(s: &mut Session<'_>) -> Result<()> {
    let model = s.model()?;
    let layer = s.layer(&model)?;
    let pairs = s.pairs()?;
    let ctxs = contexts(s, &model, &pairs)?;
    let grid = conv_slice_grid(&ctxs, layer)?;
    s.add(grid.write(&s.out, &format!("conv_slice_layer{layer}"))?);
    s.result("layer", layer);
    s.result("clean_metric", pooled_clean_metric(&ctxs)?);
    Ok(())
}

pub fn cosine_lens_cmd(s: &mut Session<'_>) -> Result<()> {
    let model = s.model()?;
    let layer = s.layer(&model)?;
    let pairs = s.pairs()?;
    let i = s.cfg.params.prompt;
    let pair = pairs.get(i).ok_or_else(|| {
        CliError::Config(format!(
            "params.prompt: {i} out of range for {} prompts",
            pairs.len()
        ))
    })?;
    let lens = cosine_lens(&model, &pair.clean, layer, s.cfg.params.channel)?;
    s.add(
        lens.to_grid()
            .write(&s.out, &format!("cosine_lens_layer{layer}"))?,
    );
    s.result("layer", layer);
    s.result("zero_norm_cells", lens.zero_norm.len());
    Ok(())
}

pub fn steer_grid(s: &mut Session<'_>) -> Result<()> {
    let model = s.model()?;
    let pairs = s.pairs()?;
    let layer = match s.cfg.params.layer {
        Some(_) => s.layer(&model)?,
        None => {
            let scan = layer_removal_scan(&contexts(s, &model, &pairs)?)?;
            s.result("removal_scan", scan.clone());
            (0..scan.len())
                .min_by(|&a, &b| scan[a].total_cmp(&scan[b]))
                .unwrap_or(0)
        }
    };
    let build = s.pairs_with(s.cfg.params.store_count, s.cfg.seed.wrapping_add(1))?;
    let store = build_name_averages(&model, &build, layer, s.cfg.params.min_samples)?;
    s.add(store.save(&s.out, "name_averages")?);
    s.result("layer", layer);
    s.result("excluded", store.excluded.len());
    for (method, stem) in [
        (SteerMethod::SubtractAdd, "subtract_add"),
        (SteerMethod::Replace, "replace"),
    ] {
        let g = substitution_grid(&model, &pairs, &store, method)?;
        s.add(g.grid.write(&s.out, &format!("steer_{stem}"))?);
        s.result(&format!("{stem}_early_success"), early_slot_success(&g));
        s.result(&format!("{stem}_missing"), g.missing);
    }
    Ok(())
}

fn write_table(s: &mut Session<'_>, table: &AttributionTable) -> Result<()> {
    s.write("attribution.json", &table.to_json()?)?;
    s.write("attribution.csv", &table.to_csv())?;
    Ok(())
}

pub fn eap_cmd(s: &mut Session<'_>, positional: bool) -> Result<()> {
    let model = s.model()?;
    let pairs = s.pairs()?;
    let ctxs = contexts(s, &model, &pairs)?;
    let opts = EapOptions {
        gradient_pass: s.cfg.params.gradient_pass,
        positional,
        seed: Some(s.cfg.seed),
    };
    let iters = s.cfg.params.iters;
    let table = if iters >= 2 {
        eap_integrated_gradients(&ctxs, iters, &opts)?
    } else {
        eap(&ctxs, &opts)?
    };
    write_table(s, &table)?;
    let mut graph = if positional {
        CausalGraph::positional(model.n_layers(), ctxs[0].batch.positions.labels().to_vec())
    } else {
        CausalGraph::residual(model.n_layers())
    };
    graph.apply_scores(&table)?;
    let clean = pooled_clean_metric(&ctxs)?;
    let target = s.cfg.params.target * clean;
    let set = minimal_edge_set(
        &graph,
        &ctxs,
        target,
        &MinimalSetOptions {
            seed: s.cfg.seed,
            ..MinimalSetOptions::default()
        },
    )?;
    s.add(set.graph.write(&s.out, "circuit")?);
    s.result("clean_metric", clean);
    s.result("target", target);
    s.result("k", set.k);
    s.result("kept", set.kept);
    s.result("removable", set.removable);
    s.result("achieved_metric", set.final_metric);
    s.result("achieved_accuracy", set.final_accuracy);
    Ok(())
}

pub fn acdc(s: &mut Session<'_>) -> Result<()> {
    let model = s.model()?;
    let pairs = s.pairs()?;
    let ctxs = contexts(s, &model, &pairs)?;
    let graph = CausalGraph::residual(model.n_layers()).with_intra_layer(model.config().d_conv);
    let r = acdc_sweep(&graph, &ctxs, s.cfg.params.thresh)?;
    s.add(r.graph.write(&s.out, "circuit")?);
    let mut csv = csv_line(&[
        "edge".into(),
        "before".into(),
        "after".into(),
        "removed".into(),
    ]);
    for v in &r.visits {
        csv += &csv_line(&[
            v.edge.clone(),
            v.before.to_string(),
            v.after.to_string(),
            v.removed.to_string(),
        ]);
    }
    s.write("visits.csv", &csv)?;
    let kept: Vec<String> = r
        .graph
        .kept()
        .filter(|e| !e.always_on())
        .map(|e| e.id())
        .collect();
    s.result("start_metric", r.start_metric);
    s.result("final_metric", r.final_metric);
    s.result("final_accuracy", r.final_accuracy);
    s.result("kept_edges", json!(kept));
    Ok(())
}

fn manifests(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join("manifest.json").is_file() {
        found.push(dir.to_path_buf());
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        manifests(&d, found)?;
    }
    Ok(())
}

/// Writes `index.md` in `dir` linking every artifact of every manifest
/// found beneath it.
pub fn report(dir: &Path) -> Result<PathBuf> {
    let mut found = Vec::new();
    manifests(dir, &mut found)?;
    let mut md = String::from("# Experiment index\n");
    if found.is_empty() {
        md += "\nNo experiment outputs found.\n";
    }
    for run in &found {
        let m = Manifest::read(run)?;
        let rel = run.strip_prefix(dir).unwrap_or(run);
        let prefix = if rel.as_os_str().is_empty() {
            String::new()
        } else {
            format!("{}/", rel.display())
        };
        md += &format!(
            "\n## {} (`{}`)\n\n",
            m.experiment,
            if prefix.is_empty() {
                "."
            } else {
                prefix.trim_end_matches('/')
            }
        );
        md += &format!(
            "- config hash `{}`, seed {}, library {}\n",
            &m.config_hash[..16],
            m.seed,
            m.library_version
        );
        if let Value::Object(results) = &m.results {
            for (k, v) in results {
                md += &format!("- {k}: {v}\n");
            }
        }
        md += &format!("- [manifest]({prefix}manifest.json)\n");
        for a in &m.artifacts {
            md += &format!("- [{a}]({prefix}{a})\n");
        }
    }
    let path = dir.join("index.md");
    write_atomic_str(&path, &md)?;
    Ok(path)
}
