//! Exact-match scoring for targets, frames and roles.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Element, Sentence};
use crate::error::{Error, Result};
use crate::model::{Model, PipelineMode, Task};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    /// Corpus-level scores from counts. Both sides empty scores 1.
    pub fn from_counts(matched: usize, predicted: usize, gold: usize) -> Self {
        let (precision, recall) = if predicted == 0 && gold == 0 {
            (1.0, 1.0)
        } else {
            let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            (ratio(matched, predicted), ratio(matched, gold))
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            matched,
            predicted,
            gold,
        }
    }
}

/// Size of the multiset intersection.
fn matches<T: Eq + Hash>(gold: &[T], pred: &[T]) -> usize {
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g).or_default() += 1;
    }
    pred.iter()
        .filter(|p| match counts.get_mut(p) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        })
        .count()
}

/// Exact-match P/R/F1 over aligned groups of items.
pub fn prf<T: Eq + Hash>(gold: &[Vec<T>], pred: &[Vec<T>]) -> Result<Prf> {
    if gold.len() != pred.len() {
        return Err(Error::shape(
            "prf",
            format!("{} gold groups vs {} predicted", gold.len(), pred.len()),
        ));
    }
    let matched = gold.iter().zip(pred).map(|(g, p)| matches(g, p)).sum();
    let predicted = pred.iter().map(Vec::len).sum();
    let total = gold.iter().map(Vec::len).sum();
    Ok(Prf::from_counts(matched, predicted, total))
}

/// Targets match when their full index sets are equal.
pub fn span_prf(gold: &[Vec<Vec<usize>>], pred: &[Vec<Vec<usize>>]) -> Result<Prf> {
    let norm = |xs: &[Vec<Vec<usize>>]| -> Vec<Vec<Vec<usize>>> {
        xs.iter()
            .map(|s| {
                s.iter()
                    .map(|t| {
                        let mut t = t.clone();
                        t.sort_unstable();
                        t
                    })
                    .collect()
            })
            .collect()
    };
    prf(&norm(gold), &norm(pred))
}

/// `(label, start, end)` tuples compared within each annotation.
pub fn srl_prf(gold: &[Vec<Element>], pred: &[Vec<Element>]) -> Result<Prf> {
    prf(gold, pred)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

/// Fraction of exact matches; an empty list scores 1.
pub fn fi_accuracy<T: PartialEq>(gold: &[T], pred: &[T]) -> Result<Accuracy> {
    if gold.len() != pred.len() {
        return Err(Error::shape(
            "fi_accuracy",
            format!("{} gold frames vs {} predicted", gold.len(), pred.len()),
        ));
    }
    let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    let total = gold.len();
    let accuracy = if total == 0 {
        1.0
    } else {
        correct as f64 / total as f64
    };
    Ok(Accuracy {
        accuracy,
        correct,
        total,
    })
}

/// JSON evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    /// Model-selection metric: F1 for ti and srl, accuracy for fi, and
    /// the mean of frame accuracy and role F1 for joint.
    pub metric: f64,
    pub counts: BTreeMap<String, usize>,
}

pub fn mode_name(mode: PipelineMode) -> &'static str {
    match mode {
        PipelineMode::Full => "full",
        PipelineMode::GoldTargets => "gold-targets",
        PipelineMode::GoldFrames => "gold-frames",
    }
}

/// A predicted role tuple keyed by its target.
type RoleTuple = (Vec<usize>, Element);

fn role_tuples(annotations: &[crate::corpus::FrameAnnotation]) -> Vec<RoleTuple> {
    annotations
        .iter()
        .flat_map(|a| {
            a.elements
                .iter()
                .map(move |e| (a.target_indices.clone(), e.clone()))
        })
        .collect()
}

/// Scores `model` on `corpus`. Frame identification always uses gold
/// targets; `mode` selects the regime for role labeling.
pub fn evaluate(
    model: &Model,
    corpus: &[Sentence],
    task: Task,
    mode: PipelineMode,
) -> Result<EvalReport> {
    let mut counts = BTreeMap::new();
    let mut report = EvalReport {
        task,
        mode: mode_name(mode).to_string(),
        precision: None,
        recall: None,
        f1: None,
        accuracy: None,
        metric: 0.0,
        counts: BTreeMap::new(),
    };
    match task {
        Task::Ti => {
            let preds = corpus
                .par_iter()
                .map(|s| model.predict_targets(&model.prepare(&bare(s))?))
                .collect::<Result<Vec<_>>>()?;
            let gold: Vec<_> = corpus.iter().map(Sentence::gold_targets).collect();
            let p = span_prf(&gold, &preds)?;
            report.mode = mode_name(PipelineMode::Full).to_string();
            fill_prf(&mut report, &mut counts, p);
            report.metric = p.f1;
        }
        Task::Fi => {
            let a = frame_accuracy(model, corpus)?;
            report.mode = mode_name(PipelineMode::GoldTargets).to_string();
            fill_accuracy(&mut report, &mut counts, a);
            report.metric = a.accuracy;
        }
        Task::Srl => {
            let (p, dropped) = role_prf(model, corpus, mode)?;
            fill_prf(&mut report, &mut counts, p);
            if mode == PipelineMode::Full {
                counts.insert("dropped_targets".into(), dropped);
            }
            report.metric = p.f1;
        }
        Task::Joint => {
            let a = frame_accuracy(model, corpus)?;
            let (p, dropped) = role_prf(model, corpus, mode)?;
            fill_accuracy(&mut report, &mut counts, a);
            fill_prf(&mut report, &mut counts, p);
            if mode == PipelineMode::Full {
                counts.insert("dropped_targets".into(), dropped);
            }
            report.metric = (a.accuracy + p.f1) / 2.0;
        }
    }
    report.counts = counts;
    Ok(report)
}

fn bare(s: &Sentence) -> Sentence {
    let mut s = s.clone();
    s.annotations.clear();
    s
}

fn fill_prf(report: &mut EvalReport, counts: &mut BTreeMap<String, usize>, p: Prf) {
    report.precision = Some(p.precision);
    report.recall = Some(p.recall);
    report.f1 = Some(p.f1);
    counts.insert("matched".into(), p.matched);
    counts.insert("predicted".into(), p.predicted);
    counts.insert("gold".into(), p.gold);
}

fn fill_accuracy(report: &mut EvalReport, counts: &mut BTreeMap<String, usize>, a: Accuracy) {
    report.accuracy = Some(a.accuracy);
    counts.insert("frames_correct".into(), a.correct);
    counts.insert("frames_total".into(), a.total);
}

/// Per-annotation gold and predicted frame ids, gold targets given.
pub fn frame_predictions(model: &Model, sentence: &Sentence) -> Result<Vec<(String, String)>> {
    let sent = model.prepare(sentence)?;
    let tape = crate::autodiff::Tape::eval(&model.store);
    let enc = model.encode(&tape, &sent)?;
    sentence
        .annotations
        .iter()
        .map(|ann| {
            let f = model.predict_frame_with(&tape, &enc, &ann.lexical_unit, &ann.target_indices)?;
            Ok((ann.frame.clone(), model.vocab.frames.name(f).to_string()))
        })
        .collect()
}

fn frame_accuracy(model: &Model, corpus: &[Sentence]) -> Result<Accuracy> {
    let pairs = corpus
        .par_iter()
        .map(|s| frame_predictions(model, s))
        .collect::<Result<Vec<_>>>()?;
    let (gold, pred): (Vec<String>, Vec<String>) = pairs.into_iter().flatten().unzip();
    fi_accuracy(&gold, &pred)
}

fn role_prf(model: &Model, corpus: &[Sentence], mode: PipelineMode) -> Result<(Prf, usize)> {
    let preds = corpus
        .par_iter()
        .map(|s| model.predict(s, mode))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<Vec<RoleTuple>> = corpus.iter().map(|s| role_tuples(&s.annotations)).collect();
    let pred: Vec<Vec<RoleTuple>> = preds.iter().map(|p| role_tuples(&p.annotations)).collect();
    let dropped = preds.iter().map(|p| p.dropped_targets).sum();
    Ok((prf(&gold, &pred)?, dropped))
}

/// Selection metric used during training.
pub fn dev_metric(model: &Model, corpus: &[Sentence], task: Task) -> Result<f64> {
    Ok(evaluate(model, corpus, task, PipelineMode::GoldFrames)?.metric)
}
