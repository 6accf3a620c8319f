//! Linear-chain conditional random field.
//!
//! Scores of a label sequence `y` over emissions `E` (n x K):
//! `start[y0] + sum_t E[t, y_t] + sum_t T[y_t, y_t+1] + end[y_{n-1}]`.
//! Constraint masks forbid some starts, ends and transitions. Training adds
//! a finite penalty to forbidden entries; decoding excludes them outright.

// Index loops read more clearly than iterators in the recursions below.
#![allow(clippy::needless_range_loop)]

use rand::Rng;

use crate::autodiff::{logsumexp, Matrix, ParamId, ParamStore, Tape, Var};
use crate::corpus::{SpanTag, TargetTag};
use crate::error::{Error, Result};

/// Additive score for a forbidden start, end or transition during training.
pub const CONSTRAINT_PENALTY: f64 = -1e4;

/// Which starts, ends and transitions are legal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constraints {
    num_labels: usize,
    start: Vec<bool>,
    end: Vec<bool>,
    transitions: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scheme {
    /// Labels ordered as [`TargetTag`].
    Iobc,
    /// Labels ordered as [`SpanTag`].
    Iob2,
    /// Only labels flagged `true` may appear.
    FrameElements(Vec<bool>),
}

impl Constraints {
    pub fn unconstrained(num_labels: usize) -> Self {
        Constraints {
            num_labels,
            start: vec![true; num_labels],
            end: vec![true; num_labels],
            transitions: vec![true; num_labels * num_labels],
        }
    }

    pub fn build(scheme: &Scheme) -> Result<Self> {
        let c = match scheme {
            Scheme::Iobc => {
                let mut c = Self::unconstrained(TargetTag::ALL.len());
                c.start[TargetTag::I.id()] = false;
                c.start[TargetTag::C.id()] = false;
                c.forbid(TargetTag::O.id(), TargetTag::I.id());
                c
            }
            Scheme::Iob2 => {
                let mut c = Self::unconstrained(SpanTag::ALL.len());
                c.start[SpanTag::I.id()] = false;
                c.forbid(SpanTag::O.id(), SpanTag::I.id());
                c
            }
            Scheme::FrameElements(allowed) => {
                let k = allowed.len();
                let mut c = Self::unconstrained(k);
                for (j, &ok) in allowed.iter().enumerate() {
                    if !ok {
                        c.start[j] = false;
                        c.end[j] = false;
                        for i in 0..k {
                            c.forbid(i, j);
                        }
                    }
                }
                c
            }
        };
        c.check_feasible()?;
        Ok(c)
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn forbid(&mut self, from: usize, to: usize) {
        self.transitions[from * self.num_labels + to] = false;
    }

    pub fn allows_start(&self, j: usize) -> bool {
        self.start[j]
    }

    pub fn allows_end(&self, j: usize) -> bool {
        self.end[j]
    }

    pub fn allows(&self, from: usize, to: usize) -> bool {
        self.transitions[from * self.num_labels + to]
    }

    pub fn is_legal(&self, labels: &[usize]) -> bool {
        match (labels.first(), labels.last()) {
            (Some(&f), Some(&l)) => {
                self.start[f]
                    && self.end[l]
                    && labels.windows(2).all(|w| self.allows(w[0], w[1]))
            }
            _ => true,
        }
    }

    /// Every length must admit at least one legal path. The reachable label
    /// sets form an eventually periodic sequence, so iterating until a set
    /// repeats covers all lengths.
    fn check_feasible(&self) -> Result<()> {
        let k = self.num_labels;
        let mut seen = std::collections::HashSet::new();
        let mut reach = self.start.clone();
        loop {
            if !reach.iter().zip(&self.end).any(|(&r, &e)| r && e) {
                return Err(Error::Config(
                    "constraint mask admits no legal label sequence".into(),
                ));
            }
            if !seen.insert(reach.clone()) {
                return Ok(());
            }
            let mut next = vec![false; k];
            for i in (0..k).filter(|&i| reach[i]) {
                for (j, slot) in next.iter_mut().enumerate() {
                    *slot |= self.allows(i, j);
                }
            }
            reach = next;
        }
    }
}

/// Plain view of CRF scores.
#[derive(Debug, Clone, Copy)]
pub struct CrfScores<'a> {
    /// `K x K`, `transitions[(i, j)]` scores label `i` followed by `j`.
    pub transitions: &'a Matrix,
    pub start: &'a [f64],
    pub end: &'a [f64],
}

struct Effective {
    k: usize,
    trans: Vec<f64>,
    start: Vec<f64>,
    end: Vec<f64>,
}

impl Effective {
    fn new(scores: &CrfScores, constraints: Option<&Constraints>) -> Self {
        let k = scores.start.len();
        let mut e = Effective {
            k,
            trans: scores.transitions.data().to_vec(),
            start: scores.start.to_vec(),
            end: scores.end.to_vec(),
        };
        if let Some(c) = constraints {
            for j in 0..k {
                if !c.allows_start(j) {
                    e.start[j] += CONSTRAINT_PENALTY;
                }
                if !c.allows_end(j) {
                    e.end[j] += CONSTRAINT_PENALTY;
                }
                for i in 0..k {
                    if !c.allows(i, j) {
                        e.trans[i * k + j] += CONSTRAINT_PENALTY;
                    }
                }
            }
        }
        e
    }

    fn t(&self, i: usize, j: usize) -> f64 {
        self.trans[i * self.k + j]
    }
}

fn check_shapes(emissions: &Matrix, scores: &CrfScores) -> Result<()> {
    let k = scores.start.len();
    if emissions.rows() == 0 {
        return Err(Error::shape("crf", "empty sequence"));
    }
    if emissions.cols() != k
        || scores.end.len() != k
        || scores.transitions.shape() != (k, k)
    {
        return Err(Error::shape(
            "crf",
            format!(
                "emissions {:?}, transitions {:?}, start {}, end {}",
                emissions.shape(),
                scores.transitions.shape(),
                k,
                scores.end.len()
            ),
        ));
    }
    Ok(())
}

/// Forward (log alpha) table, `n x K`.
fn forward(emissions: &Matrix, eff: &Effective) -> Vec<Vec<f64>> {
    let (n, k) = (emissions.rows(), eff.k);
    let mut alpha = vec![vec![0.0; k]; n];
    for j in 0..k {
        alpha[0][j] = eff.start[j] + emissions.get(0, j);
    }
    let mut buf = vec![0.0; k];
    for t in 1..n {
        for j in 0..k {
            for i in 0..k {
                buf[i] = alpha[t - 1][i] + eff.t(i, j);
            }
            alpha[t][j] = logsumexp(&buf) + emissions.get(t, j);
        }
    }
    alpha
}

fn backward(emissions: &Matrix, eff: &Effective) -> Vec<Vec<f64>> {
    let (n, k) = (emissions.rows(), eff.k);
    let mut beta = vec![vec![0.0; k]; n];
    beta[n - 1].copy_from_slice(&eff.end);
    let mut buf = vec![0.0; k];
    for t in (0..n - 1).rev() {
        for i in 0..k {
            for j in 0..k {
                buf[j] = eff.t(i, j) + emissions.get(t + 1, j) + beta[t + 1][j];
            }
            beta[t][i] = logsumexp(&buf);
        }
    }
    beta
}

fn log_z(alpha: &[Vec<f64>], eff: &Effective) -> f64 {
    let last = alpha.last().expect("non-empty");
    let terms: Vec<f64> = last.iter().zip(&eff.end).map(|(a, e)| a + e).collect();
    logsumexp(&terms)
}

/// `log Z` by the forward recursion. Forbidden entries carry
/// [`CONSTRAINT_PENALTY`].
pub fn log_partition(
    emissions: &Matrix,
    scores: &CrfScores,
    constraints: Option<&Constraints>,
) -> Result<f64> {
    check_shapes(emissions, scores)?;
    let eff = Effective::new(scores, constraints);
    Ok(log_z(&forward(emissions, &eff), &eff))
}

fn path_score(emissions: &Matrix, eff: &Effective, labels: &[usize]) -> f64 {
    let mut s = eff.start[labels[0]] + eff.end[labels[labels.len() - 1]];
    for (t, &y) in labels.iter().enumerate() {
        s += emissions.get(t, y);
    }
    for w in labels.windows(2) {
        s += eff.t(w[0], w[1]);
    }
    s
}

fn check_labels(emissions: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != emissions.rows() {
        return Err(Error::shape(
            "crf",
            format!("{} labels for {} positions", labels.len(), emissions.rows()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= emissions.cols()) {
        return Err(Error::shape("crf", format!("label {bad} out of range")));
    }
    Ok(())
}

/// Score of one label sequence, penalties included.
pub fn sequence_score(
    emissions: &Matrix,
    scores: &CrfScores,
    constraints: Option<&Constraints>,
    labels: &[usize],
) -> Result<f64> {
    check_shapes(emissions, scores)?;
    check_labels(emissions, labels)?;
    Ok(path_score(emissions, &Effective::new(scores, constraints), labels))
}

/// `-log P(labels | emissions)`. Gold sequences must be legal under
/// `constraints`.
pub fn sequence_nll(
    emissions: &Matrix,
    scores: &CrfScores,
    constraints: Option<&Constraints>,
    labels: &[usize],
) -> Result<f64> {
    check_shapes(emissions, scores)?;
    check_labels(emissions, labels)?;
    if let Some(c) = constraints {
        if !c.is_legal(labels) {
            return Err(Error::Codec(format!(
                "gold label sequence {labels:?} is illegal under the constraint mask"
            )));
        }
    }
    let eff = Effective::new(scores, constraints);
    let z = log_z(&forward(emissions, &eff), &eff);
    Ok((z - path_score(emissions, &eff, labels)).max(0.0))
}

/// Highest-scoring legal sequence and its (unpenalized) score. Ties go to
/// the lower label id.
pub fn viterbi(
    emissions: &Matrix,
    scores: &CrfScores,
    constraints: Option<&Constraints>,
) -> Result<(Vec<usize>, f64)> {
    check_shapes(emissions, scores)?;
    let (n, k) = (emissions.rows(), scores.start.len());
    let unconstrained = Constraints::unconstrained(k);
    let c = constraints.unwrap_or(&unconstrained);
    let t = |i: usize, j: usize| scores.transitions.get(i, j);

    let ninf = f64::NEG_INFINITY;
    let mut delta = vec![vec![ninf; k]; n];
    let mut back = vec![vec![0usize; k]; n];
    for j in 0..k {
        if c.allows_start(j) {
            delta[0][j] = scores.start[j] + emissions.get(0, j);
        }
    }
    for step in 1..n {
        for j in 0..k {
            let mut best = ninf;
            let mut arg = 0;
            for i in 0..k {
                if delta[step - 1][i] == ninf || !c.allows(i, j) {
                    continue;
                }
                let s = delta[step - 1][i] + t(i, j);
                if s > best {
                    best = s;
                    arg = i;
                }
            }
            if best > ninf {
                delta[step][j] = best + emissions.get(step, j);
                back[step][j] = arg;
            }
        }
    }
    let mut best = ninf;
    let mut last = 0;
    for j in 0..k {
        if delta[n - 1][j] == ninf || !c.allows_end(j) {
            continue;
        }
        let s = delta[n - 1][j] + scores.end[j];
        if s > best {
            best = s;
            last = j;
        }
    }
    if best == ninf {
        return Err(Error::Config("no legal label sequence".into()));
    }
    let mut labels = vec![last; n];
    for step in (1..n).rev() {
        labels[step - 1] = back[step][labels[step]];
    }
    Ok((labels, best))
}

/// Gradient of `log Z - score(gold)` with respect to emissions,
/// transitions, start and end.
fn nll_gradients(
    emissions: &Matrix,
    eff: &Effective,
    gold: &[usize],
) -> (f64, Matrix, Matrix, Matrix, Matrix) {
    let (n, k) = (emissions.rows(), eff.k);
    let alpha = forward(emissions, eff);
    let beta = backward(emissions, eff);
    let z = log_z(&alpha, eff);

    let mut g_em = Matrix::zeros(n, k);
    for t in 0..n {
        for j in 0..k {
            g_em.set(t, j, (alpha[t][j] + beta[t][j] - z).exp());
        }
    }
    let mut g_start = Matrix::zeros(1, k);
    let mut g_end = Matrix::zeros(1, k);
    for j in 0..k {
        g_start.set(0, j, g_em.get(0, j));
        g_end.set(0, j, g_em.get(n - 1, j));
    }
    let mut g_tr = Matrix::zeros(k, k);
    for t in 0..n.saturating_sub(1) {
        for i in 0..k {
            for j in 0..k {
                let p = (alpha[t][i] + eff.t(i, j) + emissions.get(t + 1, j) + beta[t + 1][j] - z)
                    .exp();
                g_tr.set(i, j, g_tr.get(i, j) + p);
            }
        }
    }
    for (t, &y) in gold.iter().enumerate() {
        g_em.set(t, y, g_em.get(t, y) - 1.0);
    }
    for w in gold.windows(2) {
        g_tr.set(w[0], w[1], g_tr.get(w[0], w[1]) - 1.0);
    }
    g_start.set(0, gold[0], g_start.get(0, gold[0]) - 1.0);
    g_end.set(0, gold[n - 1], g_end.get(0, gold[n - 1]) - 1.0);
    let nll = z - path_score(emissions, eff, gold);
    (nll, g_em, g_tr, g_start, g_end)
}

/// Trainable CRF: transition matrix plus start and end scores.
#[derive(Debug, Clone, Copy)]
pub struct CrfLayer {
    pub transitions: ParamId,
    pub start: ParamId,
    pub end: ParamId,
    pub num_labels: usize,
}

impl CrfLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, num_labels: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (num_labels as f64).sqrt();
        let trans: Vec<f64> = (0..num_labels * num_labels)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        CrfLayer {
            transitions: store.add(
                format!("{prefix}.transitions"),
                Matrix::from_vec(num_labels, num_labels, trans).expect("square"),
                true,
            ),
            start: store.add(format!("{prefix}.start"), Matrix::zeros(1, num_labels), false),
            end: store.add(format!("{prefix}.end"), Matrix::zeros(1, num_labels), false),
            num_labels,
        }
    }

    pub fn scores<'a>(&self, store: &'a ParamStore) -> CrfScores<'a> {
        CrfScores {
            transitions: store.get(self.transitions),
            start: store.get(self.start).row(0),
            end: store.get(self.end).row(0),
        }
    }

    /// Negative log-likelihood of `gold` as a differentiable tape node.
    /// `constraints`, when given, are applied as penalties.
    pub fn nll(
        &self,
        tape: &Tape,
        emissions: Var,
        gold: &[usize],
        constraints: Option<&Constraints>,
    ) -> Result<Var> {
        let trans = tape.param(self.transitions);
        let start = tape.param(self.start);
        let end = tape.param(self.end);
        let em = tape.value(emissions).clone();
        let (tr, st, en) = (
            tape.value(trans).clone(),
            tape.value(start).clone(),
            tape.value(end).clone(),
        );
        let scores = CrfScores {
            transitions: &tr,
            start: st.row(0),
            end: en.row(0),
        };
        check_shapes(&em, &scores)?;
        check_labels(&em, gold)?;
        if let Some(c) = constraints {
            if !c.is_legal(gold) {
                return Err(Error::Codec(format!(
                    "gold label sequence {gold:?} is illegal under the constraint mask"
                )));
            }
        }
        let eff = Effective::new(&scores, constraints);
        let (nll, g_em, g_tr, g_st, g_en) = nll_gradients(&em, &eff, gold);
        tape.custom(
            "crf_nll",
            &[emissions, trans, start, end],
            Matrix::scalar(nll.max(0.0)),
            move |g| {
                let s = g.scalar_value();
                [&g_em, &g_tr, &g_st, &g_en]
                    .into_iter()
                    .map(|m| m.map(|v| v * s))
                    .collect()
            },
        )
    }

    pub fn decode(
        &self,
        store: &ParamStore,
        emissions: &Matrix,
        constraints: Option<&Constraints>,
    ) -> Result<(Vec<usize>, f64)> {
        viterbi(emissions, &self.scores(store), constraints)
    }

    /// Squared Frobenius norm of the transition matrix.
    pub fn transition_norm_sq(&self, store: &ParamStore) -> f64 {
        store.get(self.transitions).norm_sq()
    }
}
