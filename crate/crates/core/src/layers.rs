//! Parameterized building blocks over the tape.

use std::io::BufRead;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::corpus::Interner;
use crate::error::{Error, Result};

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, `fan_in = rows`.
pub fn uniform_init(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Standard normal scaled by `1/sqrt(cols)`.
pub fn normal_init(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let scale = 1.0 / (cols.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub dim: usize,
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        size: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        EmbeddingTable {
            table: store.add(name, normal_init(size, dim, rng), false),
            dim,
            trainable: true,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn size(&self, store: &ParamStore) -> usize {
        store.get(self.table).rows()
    }

    /// Row `i` of the output is row `ids[i]` of the table.
    pub fn embed(&self, tape: &Tape, ids: &[usize]) -> Result<Var> {
        let table = if self.trainable {
            tape.param(self.table)
        } else {
            let store_value = tape.param(self.table);
            let value = tape.value(store_value).clone();
            tape.constant(value)?
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= table.rows()) {
            return Err(Error::shape(
                "embed",
                format!("id {bad} in a table of {} rows", table.rows()),
            ));
        }
        tape.row_select(table, ids)
    }

    /// Overwrites rows for tokens found in a whitespace-separated vector
    /// file (`token v1 v2 ...`). Returns the number of rows replaced.
    pub fn load_vectors(
        &self,
        store: &mut ParamStore,
        tokens: &Interner,
        reader: impl BufRead,
    ) -> Result<usize> {
        let table = store.get_mut(self.table);
        let mut replaced = 0;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let values: Vec<f64> = fields
                .map(|f| {
                    f.parse().map_err(|_| Error::Parse {
                        line: n + 1,
                        message: format!("bad float `{f}`"),
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() != self.dim {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("{} values, expected {}", values.len(), self.dim),
                });
            }
            if let Some(id) = tokens.id(word) {
                table.row_mut(id).copy_from_slice(&values);
                replaced += 1;
            }
        }
        Ok(replaced)
    }
}

/// `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), uniform_init(input, output, rng), true),
            bias: bias
                .then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, output), false)),
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, tape.param(self.weight))?;
        match self.bias {
            Some(b) => tape.add_row(y, tape.param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0), false),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, dim), false),
        }
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, tape.param(self.gain), tape.param(self.bias), Self::EPS)
    }
}

/// `K` matrices `U_k`; `score_k = left U_k right^T`.
#[derive(Debug, Clone)]
pub struct LabelBilinear {
    pub matrices: Vec<ParamId>,
    pub left: usize,
    pub right: usize,
}

impl LabelBilinear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        labels: usize,
        left: usize,
        right: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(labels >= 1, "bilinear needs at least one label");
        LabelBilinear {
            matrices: (0..labels)
                .map(|k| store.add(format!("{name}.{k}"), uniform_init(left, right, rng), true))
                .collect(),
            left,
            right,
        }
    }

    pub fn labels(&self) -> usize {
        self.matrices.len()
    }

    /// `left` is `1 x d1`, `rights` is `n x d2`; returns `n x K` with entry
    /// `(i, k) = left U_k rights[i]^T`.
    pub fn scores(&self, tape: &Tape, left: Var, rights: Var) -> Result<Var> {
        if left.rows() != 1 || left.cols() != self.left || rights.cols() != self.right {
            return Err(Error::shape(
                "label_bilinear",
                format!(
                    "left {:?}, right {:?}, U {}x{}",
                    left.shape(),
                    rights.shape(),
                    self.left,
                    self.right
                ),
            ));
        }
        let mut columns = Vec::with_capacity(self.labels());
        for &u in &self.matrices {
            let lu = tape.matmul(left, tape.param(u))?;
            let lu_t = tape.transpose(lu)?;
            columns.push(tape.matmul(rights, lu_t)?);
        }
        tape.concat_cols(&columns)
    }

    pub fn norm_sq(&self, store: &ParamStore) -> f64 {
        self.matrices.iter().map(|&u| store.get(u).norm_sq()).sum()
    }
}

/// One LSTM direction. Gate blocks in column order: input, forget,
/// candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub input_weight: ParamId,
    pub recurrent_weight: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut bias = Matrix::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            bias.set(0, j, 1.0);
        }
        LstmCell {
            input_weight: store.add(
                format!("{name}.input_weight"),
                uniform_init(input, 4 * hidden, rng),
                true,
            ),
            recurrent_weight: store.add(
                format!("{name}.recurrent_weight"),
                uniform_init(hidden, 4 * hidden, rng),
                true,
            ),
            bias: store.add(format!("{name}.bias"), bias, false),
            hidden,
        }
    }

    /// Runs over the rows of `x` in the given order and returns hidden
    /// states in original row order.
    pub fn run(&self, tape: &Tape, x: Var, reverse: bool) -> Result<Var> {
        let n = x.rows();
        let h = self.hidden;
        let projected = tape.add_row(
            tape.matmul(x, tape.param(self.input_weight))?,
            tape.param(self.bias),
        )?;
        let recurrent = tape.param(self.recurrent_weight);
        let mut outputs = vec![None; n];
        let mut state: Option<(Var, Var)> = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..n).rev())
        } else {
            Box::new(0..n)
        };
        for t in order {
            let mut gates = tape.row_select(projected, &[t])?;
            if let Some((hp, _)) = state {
                gates = tape.add(gates, tape.matmul(hp, recurrent)?)?;
            }
            let i = tape.sigmoid(tape.slice_cols(gates, 0, h)?)?;
            let f = tape.sigmoid(tape.slice_cols(gates, h, 2 * h)?)?;
            let g = tape.tanh(tape.slice_cols(gates, 2 * h, 3 * h)?)?;
            let o = tape.sigmoid(tape.slice_cols(gates, 3 * h, 4 * h)?)?;
            let mut c = tape.mul(i, g)?;
            if let Some((_, cp)) = state {
                c = tape.add(c, tape.mul(f, cp)?)?;
            }
            let hn = tape.mul(o, tape.tanh(c)?)?;
            outputs[t] = Some(hn);
            state = Some((hn, c));
        }
        let rows: Vec<Var> = outputs.into_iter().map(|v| v.expect("filled")).collect();
        tape.concat_rows(&rows)
    }
}

/// Stacked bidirectional LSTM; each layer outputs `[forward | backward]`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub input: usize,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(layers >= 1, "BiLSTM needs at least one layer");
        let layers = (0..layers)
            .map(|l| {
                let d = if l == 0 { input } else { 2 * hidden };
                (
                    LstmCell::new(store, &format!("{name}.l{l}.fwd"), d, hidden, rng),
                    LstmCell::new(store, &format!("{name}.l{l}.bwd"), d, hidden, rng),
                )
            })
            .collect();
        BiLstm {
            layers,
            input,
            hidden,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// `dropout` applies between stacked layers.
    pub fn forward(&self, tape: &Tape, x: Var, dropout: f64) -> Result<Var> {
        if x.cols() != self.input {
            return Err(Error::shape(
                "bilstm",
                format!("input width {} for a {}-wide encoder", x.cols(), self.input),
            ));
        }
        let mut h = x;
        for (l, (fwd, bwd)) in self.layers.iter().enumerate() {
            if l > 0 {
                h = tape.dropout(h, dropout)?;
            }
            let f = fwd.run(tape, h, false)?;
            let b = bwd.run(tape, h, true)?;
            h = tape.concat_cols(&[f, b])?;
        }
        Ok(h)
    }
}
