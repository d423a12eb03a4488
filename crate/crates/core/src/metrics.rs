//! Scalar metrics over answer-position logits of unpatched, corrupted and
//! patched runs. Values are never flipped or clamped here.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    NormalizedLogitDiff,
    LogitDiff,
    Accuracy,
    RelativeProbability,
    Kl,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::NormalizedLogitDiff,
        Metric::LogitDiff,
        Metric::Accuracy,
        Metric::RelativeProbability,
        Metric::Kl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::NormalizedLogitDiff => "normalized_logit_diff",
            Metric::LogitDiff => "logit_diff",
            Metric::Accuracy => "accuracy",
            Metric::RelativeProbability => "relative_probability",
            Metric::Kl => "kl",
        }
    }

    pub fn differentiable(self) -> bool {
        self != Metric::Accuracy
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Metric> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Metric(format!("unknown metric `{s}`")))
    }
}

/// Answer-position logits of one example.
#[derive(Clone, Copy, Debug)]
pub struct MetricInput<'a> {
    pub unpatched: &'a [f64],
    pub corrupted: &'a [f64],
    pub patched: &'a [f64],
    /// Correct answer of the clean prompt.
    pub answer: usize,
    /// Correct answer of the corrupted prompt.
    pub corrupted_answer: usize,
    pub candidates: Option<[usize; 4]>,
}

impl MetricInput<'_> {
    pub fn validate(&self) -> Result<()> {
        let v = self.patched.len();
        if self.unpatched.len() != v || self.corrupted.len() != v {
            return Err(Error::Metric(format!(
                "logit rows differ in length ({}, {}, {v})",
                self.unpatched.len(),
                self.corrupted.len()
            )));
        }
        if self.answer == self.corrupted_answer {
            return Err(Error::Metric(format!(
                "answer and corrupted answer are both {}",
                self.answer
            )));
        }
        let ids = [self.answer, self.corrupted_answer]
            .into_iter()
            .chain(self.candidates.into_iter().flatten());
        for id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange {
                    token: id,
                    vocab: v,
                });
            }
        }
        Ok(())
    }

    fn diff(&self, row: &[f64]) -> f64 {
        row[self.answer] - row[self.corrupted_answer]
    }
}

/// `(patched A−B − corrupted A−B) / |unpatched A−B − corrupted A−B|`,
/// with a zero denominator replaced by 1.
pub fn normalized_logit_diff(inp: &MetricInput<'_>) -> f64 {
    let min_diff = inp.diff(inp.corrupted);
    let max_diff = inp.diff(inp.unpatched);
    let range = normalizer(min_diff, max_diff);
    (inp.diff(inp.patched) - min_diff) / range
}

fn normalizer(min_diff: f64, max_diff: f64) -> f64 {
    let range = (max_diff - min_diff).abs();
    if range == 0.0 {
        1.0
    } else {
        range
    }
}

pub fn logit_diff(inp: &MetricInput<'_>) -> f64 {
    inp.diff(inp.patched)
}

/// 1 if the patched argmax over the full vocabulary is the answer.
pub fn accuracy(inp: &MetricInput<'_>) -> f64 {
    let best = argmax(inp.patched);
    if best == inp.answer {
        1.0
    } else {
        0.0
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Probability of the answer under a softmax over the four candidate
/// logits of the patched run.
pub fn relative_probability(inp: &MetricInput<'_>) -> Result<f64> {
    let c = inp
        .candidates
        .ok_or_else(|| Error::Metric("relative probability needs four candidate tokens".into()))?;
    for i in 0..4 {
        for j in i + 1..4 {
            if c[i] == c[j] {
                return Err(Error::Metric(format!("duplicate candidate token {}", c[i])));
            }
        }
    }
    if !c.contains(&inp.answer) {
        return Err(Error::Metric("candidates must include the answer".into()));
    }
    let logits: Vec<f64> = c.iter().map(|&t| inp.patched[t]).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&x| (x - m).exp()).sum();
    Ok((inp.patched[inp.answer] - m).exp() / z)
}

/// KL(unpatched ‖ patched) over the full vocabulary.
pub fn kl_divergence(inp: &MetricInput<'_>) -> f64 {
    let lp = log_softmax(inp.unpatched);
    let lq = log_softmax(inp.patched);
    lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

pub fn evaluate(metric: Metric, inp: &MetricInput<'_>) -> Result<f64> {
    inp.validate()?;
    Ok(match metric {
        Metric::NormalizedLogitDiff => normalized_logit_diff(inp),
        Metric::LogitDiff => logit_diff(inp),
        Metric::Accuracy => accuracy(inp),
        Metric::RelativeProbability => relative_probability(inp)?,
        Metric::Kl => kl_divergence(inp),
    })
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-example answer tokens of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub answers: Vec<usize>,
    pub corrupted_answers: Vec<usize>,
    pub candidates: Vec<[usize; 4]>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

/// Rows of `[B, L, V]` logits at position `pos` as `[B, V]`.
pub fn logits_at(logits: &Tensor, pos: usize) -> Result<Tensor> {
    if logits.rank() != 3 {
        return Err(Error::shape("logits_at", logits.shape(), &[0, 0, 0]));
    }
    let (b, v) = (logits.shape()[0], logits.shape()[2]);
    logits.slice(1, pos, 1)?.reshape(&[b, v])
}

/// Unpatched and corrupted answer-position logits, each `[B, V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Baseline {
    pub unpatched: Tensor,
    pub corrupted: Tensor,
}

impl Baseline {
    fn check(&self, patched: &Tensor, targets: &Targets) -> Result<()> {
        if self.unpatched.shape() != patched.shape() || self.corrupted.shape() != patched.shape() {
            return Err(Error::Metric(format!(
                "baseline logits {:?}/{:?} do not match patched {:?}",
                self.unpatched.shape(),
                self.corrupted.shape(),
                patched.shape()
            )));
        }
        if patched.rank() != 2 || patched.shape()[0] != targets.len() {
            return Err(Error::Metric(format!(
                "expected [{}, V] logits, got {:?}",
                targets.len(),
                patched.shape()
            )));
        }
        Ok(())
    }

    /// Per-example metric values of `patched: [B, V]`.
    pub fn per_example<'a>(
        &'a self,
        metric: Metric,
        patched: &'a Tensor,
        targets: &Targets,
    ) -> Result<Vec<f64>> {
        self.check(patched, targets)?;
        let v = patched.shape()[1];
        (0..targets.len())
            .map(|b| {
                let row = |t: &'a Tensor| &t.data()[b * v..(b + 1) * v];
                evaluate(
                    metric,
                    &MetricInput {
                        unpatched: row(&self.unpatched),
                        corrupted: row(&self.corrupted),
                        patched: row(patched),
                        answer: targets.answers[b],
                        corrupted_answer: targets.corrupted_answers[b],
                        candidates: targets.candidates.get(b).copied(),
                    },
                )
            })
            .collect()
    }

    pub fn batch_mean(&self, metric: Metric, patched: &Tensor, targets: &Targets) -> Result<f64> {
        Ok(mean(&self.per_example(metric, patched, targets)?))
    }

    /// Tape node holding the batch mean of `metric` over `logits: [B, V]`.
    /// Baseline quantities enter as constants.
    pub fn metric_node(
        &self,
        tape: &mut Tape,
        metric: Metric,
        logits: NodeId,
        targets: &Targets,
    ) -> Result<NodeId> {
        let patched = tape.value(logits).clone();
        self.check(&patched, targets)?;
        let b = targets.len();
        let per = match metric {
            Metric::NormalizedLogitDiff | Metric::LogitDiff => {
                let a = tape.take_along_last(logits, &targets.answers)?;
                let c = tape.take_along_last(logits, &targets.corrupted_answers)?;
                let diff = tape.sub(a, c)?;
                if metric == Metric::LogitDiff {
                    diff
                } else {
                    let mut shift = Vec::with_capacity(b);
                    let mut inv = Vec::with_capacity(b);
                    let v = patched.shape()[1];
                    for i in 0..b {
                        let d = |t: &Tensor| {
                            t.data()[i * v + targets.answers[i]]
                                - t.data()[i * v + targets.corrupted_answers[i]]
                        };
                        let lo = d(&self.corrupted);
                        shift.push(-lo);
                        inv.push(1.0 / normalizer(lo, d(&self.unpatched)));
                    }
                    let shift = tape.leaf(Tensor::new(vec![b], shift)?);
                    let inv = tape.leaf(Tensor::new(vec![b], inv)?);
                    let centred = tape.add(diff, shift)?;
                    tape.mul(centred, inv)?
                }
            }
            Metric::RelativeProbability => {
                if targets.candidates.len() != b {
                    return Err(Error::Metric(
                        "relative probability needs four candidate tokens".into(),
                    ));
                }
                let cols: Vec<NodeId> = (0..4)
                    .map(|k| {
                        let idx: Vec<usize> = targets.candidates.iter().map(|c| c[k]).collect();
                        let col = tape.take_along_last(logits, &idx)?;
                        tape.reshape(col, &[b, 1])
                    })
                    .collect::<Result<_>>()?;
                let four = tape.concat(&cols, 1)?;
                let sm = tape.softmax(four)?;
                let slot: Vec<usize> = (0..b)
                    .map(|i| {
                        targets.candidates[i]
                            .iter()
                            .position(|&t| t == targets.answers[i])
                            .ok_or_else(|| {
                                Error::Metric("candidates must include the answer".into())
                            })
                    })
                    .collect::<Result<_>>()?;
                tape.take_along_last(sm, &slot)?
            }
            Metric::Kl => {
                let lq = tape.log_softmax(logits)?;
                let lp = self.unpatched.log_softmax_last()?;
                let p = lp.map(f64::exp);
                let plogp: Vec<f64> = (0..b)
                    .map(|i| {
                        let v = lp.shape()[1];
                        (0..v)
                            .map(|j| p.data()[i * v + j] * lp.data()[i * v + j])
                            .sum()
                    })
                    .collect();
                let pn = tape.leaf(p);
                let cross = tape.mul(pn, lq)?;
                let cross = tape.sum(cross, 1)?;
                let ent = tape.leaf(Tensor::new(vec![b], plogp)?);
                tape.sub(ent, cross)?
            }
            Metric::Accuracy => return Err(Error::Metric("accuracy has no gradient".into())),
        };
        tape.mean(per, 0)
    }
}

/// Pearson correlation; NaN when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return f64::NAN;
    }
    let (ma, mb) = (mean(&a[..n]), mean(&b[..n]));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b).take(n) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return f64::NAN;
    }
    sab / (saa * sbb).sqrt()
}
