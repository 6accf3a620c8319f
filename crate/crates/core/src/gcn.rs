//! Graph convolution over constituency trees and path features.
//!
//! Each layer computes `LN(relu(A H W + b))` where `A` links every node to
//! itself and to its children, so information flows upward only.

use rand::Rng;

use crate::autodiff::{Matrix, ParamStore, Tape, Var};
use crate::corpus::Interner;
use crate::error::{Error, Result};
use crate::layers::{EmbeddingTable, LayerNorm, Linear};
use crate::syntax::{ConstTree, NodeId};

#[derive(Debug, Clone)]
pub struct GcnParams {
    pub labels: EmbeddingTable,
    pub layers: Vec<(Linear, LayerNorm)>,
    /// Divide each adjacency row by its degree.
    pub mean_aggregation: bool,
}

/// Reference node for a path sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathReference {
    Root,
    /// Token index; multi-token targets pass their first index.
    Token(usize),
}

impl GcnParams {
    pub fn new(
        store: &mut ParamStore,
        num_labels: usize,
        embed_dim: usize,
        hidden: usize,
        layers: usize,
        mean_aggregation: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(layers >= 1, "GCN needs at least one layer");
        let labels = EmbeddingTable::new(store, "gcn.labels", num_labels, embed_dim, rng);
        let layers = (0..layers)
            .map(|l| {
                let input = if l == 0 { embed_dim } else { hidden };
                (
                    Linear::new(store, &format!("gcn.l{l}"), input, hidden, true, rng),
                    LayerNorm::new(store, &format!("gcn.l{l}.ln"), hidden),
                )
            })
            .collect();
        GcnParams {
            labels,
            layers,
            mean_aggregation,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").0.output
    }

    pub fn adjacency_matrix(&self, tree: &ConstTree) -> Matrix {
        let adj = tree.adjacency();
        let n = adj.len();
        let mut m = Matrix::zeros(n, n);
        for (i, row) in adj.iter().enumerate() {
            let degree = row.iter().filter(|&&x| x).count() as f64;
            let w = if self.mean_aggregation { 1.0 / degree } else { 1.0 };
            for (j, &x) in row.iter().enumerate() {
                if x {
                    m.set(i, j, w);
                }
            }
        }
        m
    }

    /// Constituent encodings, row `i` for node `i`.
    pub fn forward(&self, tape: &Tape, tree: &ConstTree, vocab: &Interner) -> Result<Var> {
        let ids = tree
            .nodes()
            .iter()
            .map(|n| vocab.require("constituent label", &n.label))
            .collect::<Result<Vec<_>>>()?;
        self.forward_ids(tape, tree, &ids)
    }

    pub fn forward_ids(&self, tape: &Tape, tree: &ConstTree, label_ids: &[usize]) -> Result<Var> {
        let layers = self.forward_layers(tape, tree, label_ids)?;
        Ok(*layers.last().expect("non-empty"))
    }

    /// Input embeddings followed by every layer's output.
    pub fn forward_layers(
        &self,
        tape: &Tape,
        tree: &ConstTree,
        label_ids: &[usize],
    ) -> Result<Vec<Var>> {
        if label_ids.len() != tree.len() {
            return Err(Error::shape(
                "gcn",
                format!("{} label ids for {} nodes", label_ids.len(), tree.len()),
            ));
        }
        let adj = tape.constant(self.adjacency_matrix(tree))?;
        let mut out = vec![self.labels.embed(tape, label_ids)?];
        for (linear, ln) in &self.layers {
            let aggregated = tape.matmul(adj, *out.last().expect("non-empty"))?;
            out.push(ln.forward(tape, tape.relu(linear.forward(tape, aggregated)?)?)?);
        }
        Ok(out)
    }
}

/// Sum of encoding rows along the tree path from `i` to `j`.
pub fn path_feature(
    tape: &Tape,
    encodings: Var,
    tree: &ConstTree,
    i: NodeId,
    j: NodeId,
) -> Result<Var> {
    tape.sum_rows(encodings, &tree.path(i, j))
}

/// Path counts from each token's preterminal to the reference node,
/// `tokens x nodes`.
pub fn path_counts(tree: &ConstTree, reference: PathReference) -> Result<Matrix> {
    let target = match reference {
        PathReference::Root => tree.root(),
        PathReference::Token(i) => tree.token_node(i)?,
    };
    let n = tree.token_count();
    let mut m = Matrix::zeros(n, tree.len());
    for t in 0..n {
        for k in tree.path(tree.token_node(t)?, target) {
            m.set(t, k, m.get(t, k) + 1.0);
        }
    }
    Ok(m)
}

/// One path feature per token, `tokens x dim`.
pub fn path_sequence(
    tape: &Tape,
    encodings: Var,
    tree: &ConstTree,
    reference: PathReference,
) -> Result<Var> {
    let counts = tape.constant(path_counts(tree, reference)?)?;
    tape.matmul(counts, encodings)
}
