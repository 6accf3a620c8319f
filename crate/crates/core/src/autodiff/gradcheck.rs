//! Central-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stencil {
    /// `(f(θ+ε) - f(θ-ε)) / 2ε`, error O(ε²).
    #[default]
    Central2,
    /// `(8(f(θ+ε) - f(θ-ε)) - (f(θ+2ε) - f(θ-2ε))) / 12ε`, error O(ε⁴).
    /// Tolerates a larger ε, which shrinks the rounding error that
    /// dominates entries with very small gradients.
    Central4,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub stencil: Stencil,
    pub tolerance: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            stencil: Stencil::Central2,
            tolerance: 1e-4,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&Tape) -> Result<Var>,
{
    let tape = Tape::eval(store);
    let loss = f(&tape)?;
    if loss.shape() != (1, 1) {
        return Err(Error::Autodiff("grad_check needs a scalar function".into()));
    }
    Ok(tape.scalar(loss))
}

/// Compares the tape's gradient of `f` against central differences
/// `(f(θ+ε) - f(θ-ε)) / 2ε` for every (or a sample of every) parameter
/// entry. `f` must be deterministic: it is evaluated twice up front and a
/// mismatch is an error.
pub fn grad_check<F>(store: &ParamStore, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape) -> Result<Var> + Sync,
{
    if opts.eps <= 0.0 {
        return Err(Error::Autodiff("grad_check needs eps > 0".into()));
    }
    let first = evaluate(store, &f)?;
    let second = evaluate(store, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Autodiff(format!(
            "function is not deterministic ({first} vs {second})"
        )));
    }

    let tape = Tape::grad(store);
    let loss = f(&tape)?;
    let analytic = tape.backward(loss)?.param_grads(store);

    let mut work: Vec<(ParamId, usize)> = Vec::new();
    for (pid, p) in store.iter() {
        let n = p.value.len();
        match opts.max_entries_per_param {
            Some(k) if k < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (pid.index() as u64) << 20);
                let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                work.extend(idx.into_iter().map(|i| (pid, i)));
            }
            _ => work.extend((0..n).map(|i| (pid, i))),
        }
    }

    let results: Vec<Result<(ParamId, f64, f64)>> = work
        .par_iter()
        .map_init(
            || store.clone(),
            |local, &(pid, i)| {
                let orig = local.get(pid).data()[i];
                let mut diff = |h: f64| -> Result<f64> {
                    local.get_mut(pid).data_mut()[i] = orig + h;
                    let plus = evaluate(local, &f);
                    local.get_mut(pid).data_mut()[i] = orig - h;
                    let minus = evaluate(local, &f);
                    local.get_mut(pid).data_mut()[i] = orig;
                    Ok(plus? - minus?)
                };
                let eps = opts.eps;
                let numeric = match opts.stencil {
                    Stencil::Central2 => diff(eps)? / (2.0 * eps),
                    Stencil::Central4 => (8.0 * diff(eps)? - diff(2.0 * eps)?) / (12.0 * eps),
                };
                let a = analytic.get(pid).data()[i];
                Ok((pid, relative_error(a, numeric), (a - numeric).abs()))
            },
        )
        .collect();

    let mut params: Vec<ParamCheck> = store
        .iter()
        .map(|(_, p)| ParamCheck {
            name: p.name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        })
        .collect();
    for r in results {
        let (pid, rel, abs) = r?;
        let entry = &mut params[pid.index()];
        entry.checked += 1;
        entry.max_rel_error = entry.max_rel_error.max(rel);
        entry.max_abs_error = entry.max_abs_error.max(abs);
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        params,
    })
}
