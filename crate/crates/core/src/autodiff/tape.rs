use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Matrix, ParamGrads, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

type BackwardFn = Box<dyn Fn(&Matrix) -> Vec<Matrix>>;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Gather(usize, Vec<usize>),
    SumRows(usize, Vec<usize>),
    Pick(usize, Vec<(usize, usize)>),
    SliceCols(usize, usize),
    Transpose(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    LogSoftmax(usize),
    LogSumExp(usize),
    Dropout(usize, Vec<f64>),
    Sum(usize),
    Custom(Vec<usize>, BackwardFn),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | AddRow(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Gather(a, _) | SumRows(a, _) | Pick(a, _)
            | SliceCols(a, _) | Transpose(a) | Relu(a) | LeakyRelu(a, _) | Tanh(a)
            | Sigmoid(a) | LogSoftmax(a) | LogSumExp(a) | Dropout(a, _) | Sum(a) => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            ConcatCols(v) | ConcatRows(v) | Custom(v, _) => v.clone(),
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Records a forward computation so [`Tape::backward`] can replay it in
/// reverse. Single-threaded; build one tape per sentence or batch.
pub struct Tape<'p> {
    nodes: RefCell<Vec<Node>>,
    store: Option<&'p ParamStore>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
    track_params: bool,
    training: bool,
    rng: RefCell<ChaCha8Rng>,
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it influenced the loss.
    pub fn wrt(&self, var: Var) -> Option<&Matrix> {
        self.nodes.get(var.id).and_then(Option::as_ref)
    }

    /// Adds `scale` times each parameter gradient into `into`.
    pub fn accumulate(&self, into: &mut ParamGrads, scale: f64) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.nodes[node] {
                into.get_mut(pid).add_scaled(g, scale);
            }
        }
    }

    pub fn param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut g = ParamGrads::zeros_like(store);
        self.accumulate(&mut g, 1.0);
        g
    }
}

fn check_finite(op: &'static str, m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn same_shape(op: &'static str, a: Var, b: Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<'p> Tape<'p> {
    /// Evaluation tape: parameters are constants and dropout is identity.
    pub fn eval(store: &'p ParamStore) -> Self {
        Self::build(Some(store), false, false, 0)
    }

    /// Training tape: parameters are differentiable and dropout is active,
    /// seeded for reproducibility.
    pub fn train(store: &'p ParamStore, seed: u64) -> Self {
        Self::build(Some(store), true, true, seed)
    }

    /// Differentiable parameters, dropout disabled.
    pub fn grad(store: &'p ParamStore) -> Self {
        Self::build(Some(store), true, false, 0)
    }

    /// A tape without a parameter store, for leaf-only computations.
    pub fn detached() -> Tape<'static> {
        Tape::build(None, true, false, 0)
    }

    fn build(store: Option<&'p ParamStore>, track: bool, training: bool, seed: u64) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            store,
            param_vars: RefCell::new(HashMap::new()),
            track_params: track,
            training,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Matrix, op: Op, needs_grad: bool, param: Option<ParamId>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let var = Var {
            id: nodes.len(),
            rows: value.rows(),
            cols: value.cols(),
        };
        nodes.push(Node {
            value,
            op,
            needs_grad,
            param,
        });
        var
    }

    fn record(&self, name: &'static str, value: Matrix, op: Op) -> Result<Var> {
        check_finite(name, &value)?;
        let needs = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].needs_grad)
        };
        Ok(self.push(value, op, needs, None))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).scalar_value()
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Matrix) -> Result<Var> {
        check_finite("leaf", &value)?;
        Ok(self.push(value, Op::Leaf, true, None))
    }

    pub fn constant(&self, value: Matrix) -> Result<Var> {
        check_finite("constant", &value)?;
        Ok(self.push(value, Op::Leaf, false, None))
    }

    /// Parameter leaf; repeated requests return the same node so gradients
    /// from every use land in one place.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&id) {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let v = self.push(
            store.get(id).clone(),
            Op::Leaf,
            self.track_params,
            Some(id),
        );
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let value = {
            let n = self.nodes.borrow();
            n[a.id].value.matmul(&n[b.id].value)
        };
        self.record("matmul", value, Op::MatMul(a.id, b.id))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let n = self.nodes.borrow();
        let (x, y) = (&n[a.id].value, &n[b.id].value);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Matrix::from_vec(a.rows, a.cols, data).expect("shapes checked")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Matrix {
        self.nodes.borrow()[a.id].value.map(f)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.record("add", v, Op::Add(a.id, b.id))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        if row.rows != 1 || row.cols != a.cols {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", a.shape(), row.shape()),
            ));
        }
        let value = {
            let n = self.nodes.borrow();
            let mut out = n[a.id].value.clone();
            let r = n[row.id].value.row(0);
            for i in 0..a.rows {
                for (o, &b) in out.row_mut(i).iter_mut().zip(r) {
                    *o += b;
                }
            }
            out
        };
        self.record("add_row", value, Op::AddRow(a.id, row.id))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.record("sub", v, Op::Sub(a.id, b.id))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.record("mul", v, Op::Mul(a.id, b.id))
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        let v = self.map(a, |x| x * s);
        self.record("scale", v, Op::Scale(a.id, s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var> {
        let v = self.map(a, |x| x + s);
        self.record("add_scalar", v, Op::AddScalar(a.id))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        if parts.iter().any(|p| p.rows != first.rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let value = {
            let n = self.nodes.borrow();
            let mut out = Matrix::zeros(first.rows, cols);
            for r in 0..first.rows {
                let mut off = 0;
                for p in parts {
                    out.row_mut(r)[off..off + p.cols].copy_from_slice(n[p.id].value.row(r));
                    off += p.cols;
                }
            }
            out
        };
        self.record(
            "concat_cols",
            value,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        if parts.iter().any(|p| p.cols != first.cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let value = {
            let n = self.nodes.borrow();
            let mut data = Vec::with_capacity(rows * first.cols);
            for p in parts {
                data.extend_from_slice(n[p.id].value.data());
            }
            Matrix::from_vec(rows, first.cols, data)?
        };
        self.record(
            "concat_rows",
            value,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        )
    }

    /// Row `i` of the result is row `ids[i]` of `a` (embedding lookup).
    pub fn row_select(&self, a: Var, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= a.rows) {
            return Err(Error::shape(
                "row_select",
                format!("row {bad} of {} rows", a.rows),
            ));
        }
        let value = {
            let n = self.nodes.borrow();
            let src = &n[a.id].value;
            let mut data = Vec::with_capacity(ids.len() * a.cols);
            for &i in ids {
                data.extend_from_slice(src.row(i));
            }
            Matrix::from_vec(ids.len(), a.cols, data)?
        };
        self.record("row_select", value, Op::Gather(a.id, ids.to_vec()))
    }

    /// Sum of the selected rows as a `1 x c` row. Repeated ids count twice.
    pub fn sum_rows(&self, a: Var, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= a.rows) {
            return Err(Error::shape(
                "sum_rows",
                format!("row {bad} of {} rows", a.rows),
            ));
        }
        let value = {
            let n = self.nodes.borrow();
            let src = &n[a.id].value;
            let mut out = vec![0.0; a.cols];
            for &i in ids {
                for (o, &v) in out.iter_mut().zip(src.row(i)) {
                    *o += v;
                }
            }
            Matrix::row_vector(out)
        };
        self.record("sum_rows", value, Op::SumRows(a.id, ids.to_vec()))
    }

    /// Picks individual entries into a `1 x m` row.
    pub fn pick(&self, a: Var, entries: &[(usize, usize)]) -> Result<Var> {
        if entries.iter().any(|&(r, c)| r >= a.rows || c >= a.cols) {
            return Err(Error::shape("pick", "entry out of range"));
        }
        let value = {
            let n = self.nodes.borrow();
            let src = &n[a.id].value;
            Matrix::row_vector(entries.iter().map(|&(r, c)| src.get(r, c)).collect())
        };
        self.record("pick", value, Op::Pick(a.id, entries.to_vec()))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        if start > end || end > a.cols {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start},{end}) of {} columns", a.cols),
            ));
        }
        let value = {
            let n = self.nodes.borrow();
            let src = &n[a.id].value;
            let mut data = Vec::with_capacity(a.rows * (end - start));
            for r in 0..a.rows {
                data.extend_from_slice(&src.row(r)[start..end]);
            }
            Matrix::from_vec(a.rows, end - start, data)?
        };
        self.record("slice_cols", value, Op::SliceCols(a.id, start))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = self.nodes.borrow()[a.id].value.transpose();
        self.record("transpose", value, Op::Transpose(a.id))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.max(0.0));
        self.record("relu", v, Op::Relu(a.id))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Result<Var> {
        let v = self.map(a, |x| if x > 0.0 { x } else { slope * x });
        self.record("leaky_relu", v, Op::LeakyRelu(a.id, slope))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::tanh);
        self.record("tanh", v, Op::Tanh(a.id))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let v = self.map(a, sigmoid);
        self.record("sigmoid", v, Op::Sigmoid(a.id))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both `1 x c`). `eps` sits inside the square root.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if gain.shape() != (1, x.cols) || bias.shape() != (1, x.cols) {
            return Err(Error::shape(
                "layer_norm",
                format!("{:?} with gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()),
            ));
        }
        let (value, xhat, inv_std) = {
            let n = self.nodes.borrow();
            let src = &n[x.id].value;
            let g = n[gain.id].value.row(0);
            let b = n[bias.id].value.row(0);
            let c = x.cols as f64;
            let mut xhat = Matrix::zeros(x.rows, x.cols);
            let mut out = Matrix::zeros(x.rows, x.cols);
            let mut inv_std = Vec::with_capacity(x.rows);
            for r in 0..x.rows {
                let row = src.row(r);
                let mean = row.iter().sum::<f64>() / c;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for j in 0..x.cols {
                    let h = (row[j] - mean) * is;
                    xhat.set(r, j, h);
                    out.set(r, j, h * g[j] + b[j]);
                }
            }
            (out, xhat, inv_std)
        };
        self.record(
            "layer_norm",
            value,
            Op::LayerNorm {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let value = {
            let n = self.nodes.borrow();
            let src = &n[a.id].value;
            let mut out = src.clone();
            for r in 0..a.rows {
                let lse = logsumexp(src.row(r));
                out.row_mut(r).iter_mut().for_each(|v| *v -= lse);
            }
            out
        };
        self.record("log_softmax", value, Op::LogSoftmax(a.id))
    }

    /// Row-wise log-sum-exp, `n x 1`.
    pub fn logsumexp(&self, a: Var) -> Result<Var> {
        let value = {
            let n = self.nodes.borrow();
            let src = &n[a.id].value;
            Matrix::from_vec(a.rows, 1, (0..a.rows).map(|r| logsumexp(src.row(r))).collect())?
        };
        self.record("logsumexp", value, Op::LogSumExp(a.id))
    }

    /// Inverted dropout: identity when not training or `rate == 0`.
    pub fn dropout(&self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Autodiff(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = {
            let mut rng = self.rng.borrow_mut();
            (0..a.rows * a.cols)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect()
        };
        let value = {
            let n = self.nodes.borrow();
            let src = &n[a.id].value;
            let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            Matrix::from_vec(a.rows, a.cols, data)?
        };
        self.record("dropout", value, Op::Dropout(a.id, mask))
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let v = Matrix::scalar(self.nodes.borrow()[a.id].value.sum());
        self.record("sum", v, Op::Sum(a.id))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let s = self.sum(a)?;
        self.scale(s, 1.0 / (a.rows * a.cols) as f64)
    }

    /// Sums a list of `1 x 1` values; zero if the list is empty.
    pub fn add_all(&self, terms: &[Var]) -> Result<Var> {
        match terms {
            [] => self.constant(Matrix::scalar(0.0)),
            [one] => Ok(*one),
            _ => {
                let stacked = self.concat_rows(terms)?;
                self.sum(stacked)
            }
        }
    }

    /// Records an operation whose vector-Jacobian product is supplied by the
    /// caller: `backward(grad_out)` returns one gradient per input.
    pub fn custom(
        &self,
        name: &'static str,
        inputs: &[Var],
        value: Matrix,
        backward: impl Fn(&Matrix) -> Vec<Matrix> + 'static,
    ) -> Result<Var> {
        self.record(
            name,
            value,
            Op::Custom(inputs.iter().map(|v| v.id).collect(), Box::new(backward)),
        )
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.shape() != (1, 1) {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe log-sum-exp of a slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn accumulate(grads: &mut [Option<Matrix>], nodes: &[Node], id: usize, g: Matrix) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_with(
    grads: &mut [Option<Matrix>],
    nodes: &[Node],
    id: usize,
    f: impl FnOnce(&mut Matrix),
) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        let v = &nodes[id].value;
        *slot = Some(Matrix::zeros(v.rows(), v.cols()));
    }
    f(slot.as_mut().expect("just set"));
}

fn propagate(nodes: &[Node], node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
    use Op::*;
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Leaf => {}
        MatMul(a, b) => {
            if nodes[*a].needs_grad {
                accumulate(grads, nodes, *a, g.matmul_t(val(*b)));
            }
            if nodes[*b].needs_grad {
                accumulate(grads, nodes, *b, val(*a).t_matmul(g));
            }
        }
        Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        AddRow(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate_with(grads, nodes, *b, |gb| {
                for r in 0..g.rows() {
                    for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            });
        }
        Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.map(|v| -v));
        }
        Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate_with(grads, nodes, *a, |ga| {
                for ((o, &x), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                    *o += x * y;
                }
            });
            accumulate_with(grads, nodes, *b, |gb| {
                for ((o, &x), &y) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                    *o += x * y;
                }
            });
        }
        Scale(a, s) => accumulate(grads, nodes, *a, g.map(|v| v * s)),
        AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        ConcatCols(parts) => {
            let mut off = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                accumulate_with(grads, nodes, p, |gp| {
                    for r in 0..g.rows() {
                        for (o, &v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                            *o += v;
                        }
                    }
                });
                off += w;
            }
        }
        ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let h = nodes[p].value.rows();
                accumulate_with(grads, nodes, p, |gp| {
                    for r in 0..h {
                        for (o, &v) in gp.row_mut(r).iter_mut().zip(g.row(off + r)) {
                            *o += v;
                        }
                    }
                });
                off += h;
            }
        }
        Gather(a, ids) => accumulate_with(grads, nodes, *a, |ga| {
            for (r, &i) in ids.iter().enumerate() {
                for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
        }),
        SumRows(a, ids) => accumulate_with(grads, nodes, *a, |ga| {
            for &i in ids {
                for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(0)) {
                    *o += v;
                }
            }
        }),
        Pick(a, entries) => accumulate_with(grads, nodes, *a, |ga| {
            for (k, &(r, c)) in entries.iter().enumerate() {
                let cur = ga.get(r, c);
                ga.set(r, c, cur + g.get(0, k));
            }
        }),
        SliceCols(a, start) => accumulate_with(grads, nodes, *a, |ga| {
            let w = g.cols();
            for r in 0..g.rows() {
                for (o, &v) in ga.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
        }),
        Transpose(a) => accumulate(grads, nodes, *a, g.transpose()),
        Relu(a) => {
            let x = val(*a);
            let d = g.data().iter().zip(x.data()).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 });
            accumulate(grads, nodes, *a, Matrix::from_vec(g.rows(), g.cols(), d.collect()).unwrap());
        }
        LeakyRelu(a, slope) => {
            let x = val(*a);
            let d = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| if xv > 0.0 { gv } else { slope * gv });
            accumulate(grads, nodes, *a, Matrix::from_vec(g.rows(), g.cols(), d.collect()).unwrap());
        }
        Tanh(a) => {
            let y = &node.value;
            let d = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * (1.0 - yv * yv));
            accumulate(grads, nodes, *a, Matrix::from_vec(g.rows(), g.cols(), d.collect()).unwrap());
        }
        Sigmoid(a) => {
            let y = &node.value;
            let d = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv * (1.0 - yv));
            accumulate(grads, nodes, *a, Matrix::from_vec(g.rows(), g.cols(), d.collect()).unwrap());
        }
        LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gain_row = val(*gain).row(0).to_vec();
            accumulate_with(grads, nodes, *bias, |gb| {
                for r in 0..g.rows() {
                    for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            });
            accumulate_with(grads, nodes, *gain, |gg| {
                for r in 0..g.rows() {
                    for ((o, &v), &h) in gg.row_mut(0).iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                        *o += v * h;
                    }
                }
            });
            accumulate_with(grads, nodes, *x, |gx| {
                let c = g.cols() as f64;
                for r in 0..g.rows() {
                    let dxhat: Vec<f64> = g.row(r).iter().zip(&gain_row).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / c;
                    let mean_dh = dxhat.iter().zip(xhat.row(r)).map(|(d, h)| d * h).sum::<f64>() / c;
                    for ((o, &d), &h) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                        *o += inv_std[r] * (d - mean_d - h * mean_dh);
                    }
                }
            });
        }
        LogSoftmax(a) => accumulate_with(grads, nodes, *a, |ga| {
            let y = &node.value;
            for r in 0..g.rows() {
                let gsum: f64 = g.row(r).iter().sum();
                for ((o, &gv), &yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                    *o += gv - yv.exp() * gsum;
                }
            }
        }),
        LogSumExp(a) => accumulate_with(grads, nodes, *a, |ga| {
            let x = val(*a);
            for r in 0..x.rows() {
                let lse = node.value.get(r, 0);
                let gr = g.get(r, 0);
                for (o, &xv) in ga.row_mut(r).iter_mut().zip(x.row(r)) {
                    *o += gr * (xv - lse).exp();
                }
            }
        }),
        Dropout(a, mask) => {
            let d = g.data().iter().zip(mask).map(|(gv, m)| gv * m);
            accumulate(grads, nodes, *a, Matrix::from_vec(g.rows(), g.cols(), d.collect()).unwrap());
        }
        Sum(a) => {
            let v = val(*a);
            accumulate(grads, nodes, *a, Matrix::filled(v.rows(), v.cols(), g.scalar_value()));
        }
        Custom(inputs, backward) => {
            if inputs.iter().any(|&i| nodes[i].needs_grad) {
                for (&i, gi) in inputs.iter().zip(backward(g)) {
                    accumulate(grads, nodes, i, gi);
                }
            }
        }
    }
}
