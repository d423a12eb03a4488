use std::path::Path;

use ssm_circuits::circuit::*;
use ssm_circuits::ioi::{
    generate_batch, DatasetConfig, Lexicon, PromptPair, TemplateId, Tokenizer,
};
use ssm_circuits::metrics::{pearson, Metric};
use ssm_circuits::model::{load_checkpoint, EdgeSource, EdgeTarget, Model, ModelConfig};
use ssm_circuits::patching::{
    pooled_clean_metric, pooled_metric, EdgeRef, PatchContext, PatchPlan,
};
use ssm_circuits::testbench::planted_ioi_model;
use ssm_circuits::Error;

fn model(layers: usize, seed: u64) -> Model {
    Model::random(ModelConfig::new(layers, 8, 12, 3, 4, 64), seed).unwrap()
}

fn pairs_with(corruptions: Vec<u8>, count: usize, seed: u64) -> Vec<PromptPair> {
    let tok = Tokenizer::for_lexicon(&Lexicon::default()).unwrap();
    let cfg = DatasetConfig {
        templates: TemplateId::SHARED_POSITIONS.to_vec(),
        corruptions,
        count,
        seed,
        ..DatasetConfig::default()
    };
    generate_batch(&cfg, &tok).unwrap()
}

fn pairs(count: usize, seed: u64) -> Vec<PromptPair> {
    pairs_with(vec![1, 2, 3, 4, 5], count, seed)
}

fn ctxs<'m>(m: &'m Model, ps: &[PromptPair], metric: Metric) -> Vec<PatchContext<'m>> {
    PatchContext::for_pairs(m, ps, metric).unwrap()
}

fn trained() -> Model {
    load_checkpoint(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata/toy_ioi.safetensors"),
        None,
        None,
    )
    .unwrap()
}

fn scores(t: &AttributionTable, g: &CausalGraph) -> Vec<f64> {
    g.edges().iter().map(|e| t.get(&e.id()).unwrap()).collect()
}

#[test]
fn clean_sourced_edges_score_zero() {
    let m = model(3, 1);
    let mut ps = pairs(6, 2);
    for p in &mut ps {
        p.corrupted = p.clean.clone();
    }
    let t = eap(&ctxs(&m, &ps, Metric::LogitDiff), &EapOptions::default()).unwrap();
    assert_eq!(t.len(), CausalGraph::residual(3).len());
    assert!(t.scores.iter().all(|a| a.score == 0.0));
}

#[test]
fn scores_are_output_delta_dot_input_gradient() {
    let m = model(2, 3);
    let cs = ctxs(&m, &pairs(8, 4), Metric::NormalizedLogitDiff);
    let t = eap(&cs, &EapOptions::default()).unwrap();
    let grads = destination_gradients(&cs[0], 1.0).unwrap();
    for a in &t.scores {
        let src = match a.src {
            Node::Embed => EdgeSource::Embed,
            Node::LayerOutput(l) => EdgeSource::Layer(l),
            _ => unreachable!(),
        };
        let dst = match a.dst {
            Node::LayerInput(l) => EdgeTarget::Layer(l),
            _ => EdgeTarget::Output,
        };
        let hook = src.hook();
        let delta = cs[0]
            .corrupted_value(&hook)
            .unwrap()
            .sub(&cs[0].clean_value(&hook).unwrap())
            .unwrap();
        let g = &grads[&dst];
        // The gradient of a batch mean already carries 1/B.
        let dot: f64 = delta.data().iter().zip(g.data()).map(|(x, y)| x * y).sum();
        assert!((dot - a.score).abs() < 1e-12, "{}", a.edge);
        // Bilinear: scaling the output delta scales the score.
        let scaled: f64 = delta
            .scale(0.25)
            .data()
            .iter()
            .zip(g.data())
            .map(|(x, y)| x * y)
            .sum();
        assert!((scaled - 0.25 * a.score).abs() < 1e-12);
    }
}

#[test]
fn clean_gradient_scores_match_finite_differences() {
    let m = model(2, 5);
    let cs = ctxs(&m, &pairs(8, 6), Metric::NormalizedLogitDiff);
    let t = eap(
        &cs,
        &EapOptions {
            gradient_pass: GradientPass::Clean,
            ..EapOptions::default()
        },
    )
    .unwrap();
    let base = pooled_clean_metric(&cs).unwrap();
    let eps = 1e-6;
    let g = CausalGraph::residual(2);
    for a in &t.scores {
        let e = g.edge(&a.edge).unwrap();
        let src = if e.src == Node::Embed {
            EdgeSource::Embed
        } else {
            EdgeSource::Layer(e.src.layer().unwrap())
        };
        let dst = match e.dst {
            Node::LayerInput(l) => EdgeTarget::Layer(l),
            _ => EdgeTarget::Output,
        };
        let mut plan = PatchPlan::new();
        plan.push_edge(EdgeRef::new(src, dst).unwrap().scaled(eps))
            .unwrap();
        let fd = (pooled_metric(&cs, &plan).unwrap() - base) / eps;
        assert!(
            (fd - a.score).abs() < 1e-4 * (1.0 + a.score.abs()),
            "{}: {fd} vs {}",
            a.edge,
            a.score
        );
    }
}

#[test]
fn positional_scores_sum_to_plain_scores() {
    let m = model(3, 7);
    let cs = ctxs(&m, &pairs(12, 8), Metric::NormalizedLogitDiff);
    let plain = eap(&cs, &EapOptions::default()).unwrap();
    let pos = positional_eap(&cs, &EapOptions::default()).unwrap();
    assert_eq!(pos.len(), plain.len() * cs[0].batch.seq_len());
    assert_eq!(pos.position_labels, cs[0].batch.positions.labels());
    assert!(pos.sum_over_positions().max_abs_diff(&plain).unwrap() < 1e-10);
}

#[test]
fn positional_attribution_needs_shared_positions() {
    let m = model(1, 9);
    let tok = Tokenizer::for_lexicon(&Lexicon::default()).unwrap();
    let cfg = DatasetConfig {
        templates: TemplateId::ALL.to_vec(),
        count: 40,
        seed: 1,
        ..DatasetConfig::default()
    };
    let ps = generate_batch(&cfg, &tok).unwrap();
    let cs = ctxs(&m, &ps, Metric::LogitDiff);
    assert!(cs.len() > 1);
    assert!(matches!(
        positional_eap(&cs, &EapOptions::default()),
        Err(Error::Patch(_))
    ));
    assert!(eap(&cs, &EapOptions::default()).is_ok());
}

#[test]
fn accuracy_cannot_be_attributed() {
    let m = model(1, 9);
    let cs = ctxs(&m, &pairs(4, 1), Metric::Accuracy);
    assert!(matches!(
        eap(&cs, &EapOptions::default()),
        Err(Error::Metric(_))
    ));
}

#[test]
fn two_step_integrated_gradients_average_the_endpoints() {
    let m = model(2, 10);
    let cs = ctxs(&m, &pairs(8, 11), Metric::NormalizedLogitDiff);
    let ig = eap_integrated_gradients(&cs, 2, &EapOptions::default()).unwrap();
    let patched = eap(&cs, &EapOptions::default()).unwrap();
    let clean = eap(
        &cs,
        &EapOptions {
            gradient_pass: GradientPass::Clean,
            ..EapOptions::default()
        },
    )
    .unwrap();
    for a in &ig.scores {
        let want = 0.5 * (patched.get(&a.edge).unwrap() + clean.get(&a.edge).unwrap());
        assert!((a.score - want).abs() < 1e-12);
    }
    assert_eq!(ig.iters, 2);
    assert!(eap_integrated_gradients(&cs, 1, &EapOptions::default()).is_err());
}

#[test]
fn integrated_gradients_converge() {
    let m = model(2, 12);
    let cs = ctxs(&m, &pairs(8, 13), Metric::NormalizedLogitDiff);
    let t = |k| eap_integrated_gradients(&cs, k, &EapOptions::default()).unwrap();
    let (t2, t32, t64) = (t(2), t(32), t(64));
    assert!(t32.max_abs_diff(&t64).unwrap() < t2.max_abs_diff(&t64).unwrap());
}

#[test]
fn integrated_gradients_equal_plain_eap_through_a_linear_head() {
    // A huge norm epsilon turns the final norm into a constant scale, so the
    // metric is linear in the output node and edges into it have a
    // gradient that does not depend on the patch strength.
    let mut cfg = ModelConfig::new(2, 8, 12, 3, 4, 64);
    cfg.norm_eps = 1e12;
    let m = Model::random(cfg, 14).unwrap();
    let cs = ctxs(&m, &pairs(8, 15), Metric::NormalizedLogitDiff);
    let plain = eap(&cs, &EapOptions::default()).unwrap();
    let ig = eap_integrated_gradients(&cs, 7, &EapOptions::default()).unwrap();
    let out: Vec<&Attribution> = plain
        .scores
        .iter()
        .filter(|a| a.dst == Node::Output)
        .collect();
    let largest = out.iter().map(|a| a.score.abs()).fold(0.0, f64::max);
    assert!(largest > 0.0);
    // Everything is tiny at this epsilon, so compare relative to the largest score.
    for a in out {
        assert!(
            (ig.get(&a.edge).unwrap() - a.score).abs() < 1e-10 * largest,
            "{}",
            a.edge
        );
    }
}

#[test]
fn attribution_is_deterministic() {
    let m = model(2, 16);
    let cs = ctxs(&m, &pairs(10, 17), Metric::Kl);
    let a = eap_integrated_gradients(&cs, 3, &EapOptions::default()).unwrap();
    let b = eap_integrated_gradients(&cs, 3, &EapOptions::default()).unwrap();
    assert_eq!(a, b);
    assert!(a.scores.iter().all(|s| s.score.is_finite()));
}

#[test]
fn attribution_exports() {
    let m = model(2, 18);
    let cs = ctxs(&m, &pairs(4, 19), Metric::LogitDiff);
    let t = positional_eap(&cs, &EapOptions::default()).unwrap();
    let csv = t.to_csv();
    assert_eq!(csv.lines().count(), t.len() + 1);
    let json: serde_json::Value = serde_json::from_str(&t.to_json().unwrap()).unwrap();
    assert_eq!(json["metric"], "logit_diff");
}

#[test]
fn measured_deltas_match_direct_patching() {
    let m = model(2, 20);
    let cs = ctxs(&m, &pairs(6, 21), Metric::NormalizedLogitDiff);
    let mut g = CausalGraph::residual(2);
    measure_edge_deltas(&mut g, &cs).unwrap();
    let base = pooled_clean_metric(&cs).unwrap();
    let mut plan = PatchPlan::new();
    plan.push_edge(EdgeRef::new(EdgeSource::Layer(0), EdgeTarget::Output).unwrap())
        .unwrap();
    let direct = pooled_metric(&cs, &plan).unwrap() - base;
    assert!((g.edge("layer0->output").unwrap().delta.unwrap() - direct).abs() < 1e-12);
}

#[test]
fn minimal_set_edge_cases() {
    let m = trained();
    let cs = ctxs(&m, &pairs(24, 23), Metric::NormalizedLogitDiff);
    let mut g = CausalGraph::residual(4);
    g.apply_scores(&eap(&cs, &EapOptions::default()).unwrap())
        .unwrap();
    let opts = MinimalSetOptions::default();

    let none = minimal_edge_set(&g, &cs, f64::NEG_INFINITY, &opts).unwrap();
    assert_eq!(none.k, 0);
    assert_eq!(none.kept, 0);

    let (clean, _) = evaluate_graph(&cs, &g).unwrap();
    match minimal_edge_set(&g, &cs, clean + 1.0, &opts) {
        Err(Error::TargetUnreachable { achieved, .. }) => assert!((achieved - clean).abs() < 1e-12),
        other => panic!("{other:?}"),
    }

    let mut none_kept = g.clone();
    for i in g.removable() {
        none_kept.set_state(i, EdgeState::Patched).unwrap();
    }
    let (floor, _) = evaluate_graph(&cs, &none_kept).unwrap();
    assert!((none.metric_at_k - floor).abs() < 1e-12);
    let mid = 0.5 * (clean + floor);
    let half = minimal_edge_set(&g, &cs, mid, &opts).unwrap();
    assert!(half.metric_at_k >= mid);
    assert!(half.k > 0 && half.k <= half.removable);
    assert!(half.kept <= half.k);
    assert_eq!(half.graph.kept_removable_count(), half.kept);
    let again = minimal_edge_set(&g, &cs, mid, &opts).unwrap();
    assert_eq!(half, again);
}

#[test]
fn minimal_set_needs_scores() {
    let m = model(1, 24);
    let cs = ctxs(&m, &pairs(4, 25), Metric::LogitDiff);
    let g = CausalGraph::residual(1);
    assert!(matches!(
        minimal_edge_set(&g, &cs, 0.0, &MinimalSetOptions::default()),
        Err(Error::Patch(_))
    ));
}

#[test]
fn acdc_with_infinite_threshold_removes_everything() {
    let m = model(2, 26);
    let cs = ctxs(&m, &pairs(6, 27), Metric::NormalizedLogitDiff);
    let g = CausalGraph::residual(2).with_intra_layer(4);
    let r = acdc_sweep(&g, &cs, f64::INFINITY).unwrap();
    assert!(r.graph.kept().all(|e| e.always_on()));
    assert_eq!(r.graph.kept_removable_count(), 0);
    assert_eq!(r.visits.len(), g.removable().len());
}

#[test]
fn acdc_with_zero_threshold_removes_only_harmless_edges() {
    let m = model(2, 28);
    let cs = ctxs(&m, &pairs(6, 29), Metric::NormalizedLogitDiff);
    let g = CausalGraph::residual(2);
    let r = acdc_sweep(&g, &cs, 0.0).unwrap();
    for v in &r.visits {
        assert_eq!(v.removed, v.after >= v.before, "{}", v.edge);
    }
    assert!(r.final_metric >= r.start_metric - 1e-12);
    assert!(acdc_sweep(&g, &cs, -1.0).is_err());
    assert!(acdc_sweep(&g, &cs, f64::NAN).is_err());
}

#[test]
fn acdc_visits_sink_first() {
    let m = model(2, 30);
    let cs = ctxs(&m, &pairs(4, 31), Metric::LogitDiff);
    let r = acdc_sweep(&CausalGraph::residual(2), &cs, 0.0).unwrap();
    let order: Vec<(usize, usize)> = r
        .visits
        .iter()
        .map(|v| r.graph.edge(&v.edge).unwrap().dst.order())
        .collect();
    assert!(order.windows(2).all(|w| w[0] >= w[1]));
}

fn planted_contexts(m: &Model) -> Vec<PatchContext<'_>> {
    // Classes 4 and 5 corrupt towards a name the clean prompt repeats,
    // which is what the planted counting layer distinguishes.
    ctxs(m, &pairs_with(vec![4, 5], 48, 3), Metric::LogitDiff)
}

#[test]
fn acdc_recovers_the_planted_path() {
    let planted = planted_ioi_model(4, 2, 0).unwrap();
    let cs = planted_contexts(&planted.model);
    let r = acdc_sweep(&CausalGraph::residual(4).with_intra_layer(4), &cs, 1e-4).unwrap();
    let kept: Vec<String> = r
        .graph
        .kept()
        .filter(|e| !e.always_on())
        .map(|e| e.id())
        .collect();
    assert_eq!(
        kept,
        vec![
            "embed->layer2.input",
            "layer2->output",
            "layer2.input->layer2.conv[-1]",
            "layer2.conv->layer2.ssm"
        ]
    );
    assert!(r.start_metric > 0.0);
    assert_eq!(r.final_metric, r.start_metric);
}

#[test]
fn eap_finds_the_planted_edges() {
    let planted = planted_ioi_model(4, 2, 0).unwrap();
    let cs = planted_contexts(&planted.model);
    let t = eap_integrated_gradients(&cs, 5, &EapOptions::default()).unwrap();
    let mut ranked: Vec<(String, f64)> = t
        .scores
        .iter()
        .map(|a| (a.edge.clone(), a.score.abs()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top: Vec<&str> = ranked[..2].iter().map(|r| r.0.as_str()).collect();
    assert!(
        top.contains(&"layer2->output") && top.contains(&"embed->layer2.input"),
        "{top:?}"
    );

    let pos = positional_eap(&cs, &EapOptions::default()).unwrap();
    let last = cs[0].batch.seq_len() - 1;
    let out: Vec<&Attribution> = pos
        .scores
        .iter()
        .filter(|a| a.src == Node::LayerOutput(2) && a.dst == Node::Output)
        .collect();
    let at_last = out
        .iter()
        .find(|a| a.position == Some(last))
        .unwrap()
        .score
        .abs();
    let total: f64 = out.iter().map(|a| a.score.abs()).sum();
    assert!(at_last > 0.99 * total);
}

#[test]
fn integrated_gradients_track_true_deltas_on_trained_model() {
    let m = trained();
    let cs = ctxs(&m, &pairs(48, 5), Metric::NormalizedLogitDiff);
    let mut g = CausalGraph::residual(4);
    measure_edge_deltas(&mut g, &cs).unwrap();
    let deltas: Vec<f64> = g.edges().iter().map(|e| e.delta.unwrap()).collect();
    let ig = eap_integrated_gradients(&cs, 10, &EapOptions::default()).unwrap();
    let s = scores(&ig, &g);
    assert!(pearson(&s, &deltas) > 0.9);

    // Sign agreement on the ten largest plain EAP scores.
    let plain = scores(&eap(&cs, &EapOptions::default()).unwrap(), &g);
    let mut idx: Vec<usize> = (0..plain.len()).collect();
    idx.sort_by(|&a, &b| plain[b].abs().total_cmp(&plain[a].abs()));
    let agree = idx[..10]
        .iter()
        .filter(|&&i| plain[i].signum() == deltas[i].signum())
        .count();
    assert!(agree >= 8, "{agree}/10");
}
