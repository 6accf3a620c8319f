//! Finite-difference check of every training loss on a short sentence.

use serde::Serialize;

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Stencil};
use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::model::{Config, Model, Task};
use crate::synth;

#[derive(Debug, Clone, Serialize)]
pub struct LossCheck {
    pub task: Task,
    pub max_rel_error: f64,
    pub passed: bool,
    #[serde(flatten)]
    pub report: GradCheckReport,
}

/// Width used by [`reduced_widths`]. At 4, a node whose ReLU units are all
/// inactive feeds an exact zero into the next layer and leaves it sitting on
/// the kink.
pub const CHECK_WIDTH: usize = 6;

/// Step for the fourth-order stencil. Smaller steps drown entries with tiny
/// gradients in rounding error; at 5e-4 the stencil starts to cross ReLU
/// kinks.
pub const CHECK_EPS: f64 = 3e-4;

/// Every entry, fourth-order stencil, tolerance 1e-4.
pub fn default_options() -> GradCheckOptions {
    GradCheckOptions {
        eps: CHECK_EPS,
        stencil: Stencil::Central4,
        tolerance: 1e-4,
        max_entries_per_param: None,
        seed: 0,
    }
}

/// `config` with every width shrunk to [`CHECK_WIDTH`] so that a check of
/// every parameter entry stays fast. Layer counts, aggregation, `use_gcn`,
/// constraints and the task are kept.
pub fn reduced_widths(config: &Config) -> Config {
    let w = CHECK_WIDTH;
    Config {
        token_dim: w + w / 2,
        pos_dim: w / 2,
        constituent_dim: w,
        gcn_dim: w,
        backbone_hidden: w,
        lu_dim: 4,
        frame_dim: 4,
        fi_hidden: [w, w],
        ai_proj_dim: w,
        bilinear_dim: w,
        ac_proj_dim: w,
        ..config.clone()
    }
}

/// First generated sentence with at most `max_tokens` tokens and at least
/// two frame elements on some annotation.
pub fn short_example(seed: u64, max_tokens: usize) -> Result<Sentence> {
    synth::generate(seed, 500)?
        .into_iter()
        .find(|s| s.len() <= max_tokens && s.annotations.iter().any(|a| a.elements.len() >= 2))
        .ok_or_else(|| Error::Config(format!("no sentence of at most {max_tokens} tokens")))
}

/// Checks the ti, fi, srl and joint losses of a freshly initialised model
/// built from `config`, with dropout off.
pub fn check_losses(config: &Config, opts: GradCheckOptions) -> Result<Vec<LossCheck>> {
    let mut config = config.clone();
    config.dropout = 0.0;
    let sentence = short_example(config.seed, 6)?;
    let corpus = [sentence];
    let model = Model::from_corpus(config, &corpus, synth::ontology())?;
    let prepared = [model.prepare(&corpus[0])?];
    [Task::Ti, Task::Fi, Task::Srl, Task::Joint]
        .into_iter()
        .map(|task| {
            let report = grad_check(&model.store, |t| model.batch_loss(t, &prepared, task), opts)?;
            Ok(LossCheck {
                task,
                max_rel_error: report.max_rel_error(),
                passed: report.passed(),
                report,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    #[test]
    fn reduced_desk_losses_pass_on_every_entry() {
        let config = reduced_widths(&Config::preset(Preset::Desk));
        config.validate().unwrap();
        let checks = check_losses(&config, default_options()).unwrap();
        assert_eq!(checks.len(), 4);
        for c in &checks {
            assert!(c.passed, "{}: {:?}", c.task, c.report.worst());
        }
    }

    #[test]
    fn example_is_short() {
        let s = short_example(13, 6).unwrap();
        assert!(s.len() <= 6);
    }
}
