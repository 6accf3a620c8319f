//! Constituency trees read from Penn-Treebank-style bracketed strings.
//!
//! Words are payloads on preterminal (POS) nodes and never become graph
//! nodes themselves, so the `i`-th token is represented by the `i`-th
//! preterminal in left-to-right order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub label: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Only set on preterminals.
    pub word: Option<String>,
}

impl Node {
    pub fn is_preterminal(&self) -> bool {
        self.word.is_some()
    }
}

/// Indexed constituency tree. Node ids are assigned in pre-order, so the
/// root is always node 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstTree {
    nodes: Vec<Node>,
    root: NodeId,
    preterminals: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => {
                out.push(Token::Open);
                i += 1;
            }
            b')' => {
                out.push(Token::Close);
                i += 1;
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len()
                    && !bytes[i].is_ascii_whitespace()
                    && bytes[i] != b'('
                    && bytes[i] != b')'
                {
                    i += 1;
                }
                out.push(Token::Atom(&text[start..i]));
            }
        }
    }
    out
}

struct Parser<'a> {
    tokens: Vec<Token<'a>>,
    pos: usize,
    nodes: Vec<Node>,
    preterminals: Vec<NodeId>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Token<'a>> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token<'a>> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect_close(&mut self, label: &str) -> Result<()> {
        match self.next() {
            Some(Token::Close) => Ok(()),
            Some(Token::Atom(a)) => Err(Error::Tree(format!(
                "unexpected `{a}` inside `{label}`: mixed words and constituents"
            ))),
            Some(Token::Open) => Err(Error::Tree(format!(
                "preterminal `{label}` cannot have child constituents"
            ))),
            None => Err(Error::Tree("unbalanced parentheses".into())),
        }
    }

    /// Parses one bracketed constituent. The opening parenthesis has already
    /// been consumed.
    fn node(&mut self, parent: Option<NodeId>) -> Result<NodeId> {
        let label = match self.next() {
            Some(Token::Atom(a)) => a.to_string(),
            Some(Token::Open) | Some(Token::Close) => {
                return Err(Error::Tree("constituent without a label".into()))
            }
            None => return Err(Error::Tree("unbalanced parentheses".into())),
        };
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            label: label.clone(),
            parent,
            children: Vec::new(),
            word: None,
        });
        match self.next() {
            Some(Token::Atom(word)) => {
                self.nodes[id].word = Some(word.to_string());
                self.preterminals.push(id);
                self.expect_close(&label)?;
            }
            Some(Token::Open) => {
                let child = self.node(Some(id))?;
                self.nodes[id].children.push(child);
                loop {
                    match self.next() {
                        Some(Token::Open) => {
                            let child = self.node(Some(id))?;
                            self.nodes[id].children.push(child);
                        }
                        Some(Token::Close) => break,
                        Some(Token::Atom(a)) => {
                            return Err(Error::Tree(format!(
                                "unexpected `{a}` inside `{label}`: mixed words and constituents"
                            )))
                        }
                        None => return Err(Error::Tree("unbalanced parentheses".into())),
                    }
                }
            }
            Some(Token::Close) => {
                return Err(Error::Tree(format!("leaf `{label}` has no word")));
            }
            None => return Err(Error::Tree("unbalanced parentheses".into())),
        }
        Ok(id)
    }
}

impl ConstTree {
    /// Parses a bracketed tree such as `(S (NP (PRP I)) (VP (VBD ran)))`.
    ///
    /// An unlabeled outer wrapper, `( (S ...) )`, is accepted and dropped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Tree("empty tree".into()));
        }
        if tokens.len() >= 2
            && tokens[0] == Token::Open
            && tokens[1] == Token::Open
            && tokens.last() == Some(&Token::Close)
        {
            tokens.remove(0);
            tokens.pop();
        }
        let mut parser = Parser {
            tokens,
            pos: 0,
            nodes: Vec::new(),
            preterminals: Vec::new(),
        };
        match parser.next() {
            Some(Token::Open) => {}
            Some(Token::Close) => return Err(Error::Tree("unbalanced parentheses".into())),
            Some(Token::Atom(a)) => {
                return Err(Error::Tree(format!("expected `(`, found `{a}`")));
            }
            None => return Err(Error::Tree("empty tree".into())),
        }
        let root = parser.node(None)?;
        if let Some(extra) = parser.peek() {
            return Err(Error::Tree(match extra {
                Token::Close => "unbalanced parentheses".to_string(),
                _ => "trailing input after the root constituent".to_string(),
            }));
        }
        Ok(ConstTree {
            nodes: parser.nodes,
            root,
            preterminals: parser.preterminals,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id].label
    }

    pub fn preterminal_order(&self) -> &[NodeId] {
        &self.preterminals
    }

    pub fn token_count(&self) -> usize {
        self.preterminals.len()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.preterminals
            .iter()
            .map(|&id| self.nodes[id].word.as_deref().unwrap_or_default())
    }

    pub fn pos_tags(&self) -> impl Iterator<Item = &str> {
        self.preterminals.iter().map(|&id| self.nodes[id].label.as_str())
    }

    /// Node standing for token `index`.
    pub fn token_node(&self, index: usize) -> Result<NodeId> {
        self.preterminals.get(index).copied().ok_or_else(|| {
            Error::Tree(format!(
                "token index {index} out of range for {} tokens",
                self.preterminals.len()
            ))
        })
    }

    /// `A[i][j]` is true iff `j` is a child of `i` or `j == i`: the row of
    /// node `i` selects the nodes it aggregates from.
    pub fn adjacency(&self) -> Vec<Vec<bool>> {
        let n = self.nodes.len();
        let mut a = vec![vec![false; n]; n];
        for node in &self.nodes {
            a[node.id][node.id] = true;
            for &c in &node.children {
                a[node.id][c] = true;
            }
        }
        a
    }

    pub fn depth_of(&self, mut id: NodeId) -> usize {
        let mut d = 0;
        while let Some(p) = self.nodes[id].parent {
            id = p;
            d += 1;
        }
        d
    }

    /// Maximum number of edges between the root and any node.
    pub fn depth(&self) -> usize {
        (0..self.nodes.len())
            .map(|i| self.depth_of(i))
            .max()
            .unwrap_or(0)
    }

    /// Nodes on the unique path from `i` to `j`, both endpoints included.
    pub fn path(&self, i: NodeId, j: NodeId) -> Vec<NodeId> {
        let (mut a, mut b) = (i, j);
        let (mut da, mut db) = (self.depth_of(a), self.depth_of(b));
        let mut up = vec![a];
        let mut down = vec![b];
        while da > db {
            a = self.nodes[a].parent.expect("non-root has a parent");
            up.push(a);
            da -= 1;
        }
        while db > da {
            b = self.nodes[b].parent.expect("non-root has a parent");
            down.push(b);
            db -= 1;
        }
        while a != b {
            a = self.nodes[a].parent.expect("non-root has a parent");
            b = self.nodes[b].parent.expect("non-root has a parent");
            up.push(a);
            down.push(b);
        }
        // `a == b` is the lowest common ancestor and ends both lists.
        down.pop();
        up.extend(down.into_iter().rev());
        up
    }

    /// Inclusive token span `[start, end]` covered by a node.
    pub fn token_span(&self, id: NodeId) -> (usize, usize) {
        let mut first = None;
        let mut last = 0;
        let mut stack = vec![id];
        let mut leaves = Vec::new();
        while let Some(n) = stack.pop() {
            if self.nodes[n].is_preterminal() {
                leaves.push(n);
            }
            stack.extend(self.nodes[n].children.iter().copied());
        }
        for (t, &p) in self.preterminals.iter().enumerate() {
            if leaves.contains(&p) {
                first.get_or_insert(t);
                last = t;
            }
        }
        (first.unwrap_or(0), last)
    }

    fn write_node(&self, id: NodeId, out: &mut String) {
        let node = &self.nodes[id];
        out.push('(');
        out.push_str(&node.label);
        if let Some(w) = &node.word {
            out.push(' ');
            out.push_str(w);
        }
        for &c in &node.children {
            out.push(' ');
            self.write_node(c, out);
        }
        out.push(')');
    }
}

impl fmt::Display for ConstTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.write_node(self.root, &mut s);
        f.write_str(&s)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const HAD_TREE: &str =
        "(S (NP (PRP She)) (VP (VBD had) (NP (JJ little) (NN attention))))";

    fn find(tree: &ConstTree, label: &str) -> NodeId {
        tree.nodes().iter().find(|n| n.label == label).unwrap().id
    }

    #[test]
    fn minimal_tree() {
        let t = ConstTree::parse("(NP (JJ little) (NN attention))").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.label(t.root()), "NP");
        assert_eq!(t.label(t.preterminal_order()[0]), "JJ");
        assert_eq!(t.label(t.preterminal_order()[1]), "NN");
        assert_eq!(t.words().collect::<Vec<_>>(), ["little", "attention"]);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(ConstTree::parse("(VP (VBD had"), Err(Error::Tree(_))));
        assert!(matches!(ConstTree::parse(""), Err(Error::Tree(_))));
        assert!(matches!(ConstTree::parse("   "), Err(Error::Tree(_))));
        assert!(matches!(ConstTree::parse("(NP (NN))"), Err(Error::Tree(_))));
        assert!(matches!(ConstTree::parse("(NP (NN a)))"), Err(Error::Tree(_))));
        assert!(matches!(ConstTree::parse("(NP a (NN b))"), Err(Error::Tree(_))));
        assert!(matches!(ConstTree::parse("(NP (NN a) b)"), Err(Error::Tree(_))));
    }

    #[test]
    fn outer_wrapper_and_whitespace() {
        let t = ConstTree::parse("( (S\n  (NP (NN x))\t(VP (VBD y))) )").unwrap();
        assert_eq!(t.to_string(), "(S (NP (NN x)) (VP (VBD y)))");
    }

    #[test]
    fn had_tree_alignment() {
        let t = ConstTree::parse(HAD_TREE).unwrap();
        assert_eq!(t.label(t.token_node(1).unwrap()), "VBD");
        assert_eq!(t.node(t.token_node(1).unwrap()).word.as_deref(), Some("had"));
        assert_eq!(t.label(t.token_node(2).unwrap()), "JJ");
        assert!(t.token_node(4).is_err());
    }

    #[test]
    fn adjacency_examples() {
        let single = ConstTree::parse("(NN x)").unwrap();
        assert_eq!(single.adjacency(), vec![vec![true]]);

        let t = ConstTree::parse("(NP (JJ a) (NN b))").unwrap();
        let a = t.adjacency();
        assert_eq!(a[0], vec![true, true, true]);
        assert_eq!(a[1], vec![false, true, false]);

        let t = ConstTree::parse(HAD_TREE).unwrap();
        let a = t.adjacency();
        let vp = find(&t, "VP");
        let vbd = find(&t, "VBD");
        let np2 = t.node(vp).children[1];
        assert!(a[vp][vp] && a[vp][vbd] && a[vp][np2]);
        assert_eq!(a[vp].iter().filter(|&&x| x).count(), 3);
        assert_eq!(a[vbd].iter().filter(|&&x| x).count(), 1);
    }

    #[test]
    fn had_path() {
        let t = ConstTree::parse(HAD_TREE).unwrap();
        let little = t.token_node(2).unwrap();
        let had = t.token_node(1).unwrap();
        let labels: Vec<_> = t.path(little, had).iter().map(|&i| t.label(i)).collect();
        assert_eq!(labels, ["JJ", "NP", "VP", "VBD"]);
        assert_eq!(t.path(had, had), vec![had]);
    }

    #[test]
    fn token_spans() {
        let t = ConstTree::parse(HAD_TREE).unwrap();
        let vp = find(&t, "VP");
        assert_eq!(t.token_span(vp), (1, 3));
        assert_eq!(t.token_span(t.root()), (0, 3));
        assert_eq!(t.token_span(t.token_node(2).unwrap()), (2, 2));
        assert_eq!(t.depth(), 3);
    }

    #[test]
    fn unary_chains_are_kept() {
        let t = ConstTree::parse("(S (VP (VBD ran)))").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.path(2, 0), vec![2, 1, 0]);
    }

    /// Random bracketing with preterminals at the leaves.
    pub(crate) fn random_tree(rng: &mut impl rand::Rng, max_depth: usize) -> String {
        const PHRASES: [&str; 4] = ["S", "NP", "VP", "PP"];
        const TAGS: [&str; 4] = ["NN", "VBD", "DT", "IN"];
        fn go(rng: &mut impl rand::Rng, depth: usize, out: &mut String, next_word: &mut usize) {
            if depth == 0 || rng.random_bool(0.3) {
                let tag = TAGS[rng.random_range(0..TAGS.len())];
                out.push_str(&format!("({tag} w{next_word})"));
                *next_word += 1;
                return;
            }
            out.push('(');
            out.push_str(PHRASES[rng.random_range(0..PHRASES.len())]);
            for _ in 0..rng.random_range(1..=3) {
                out.push(' ');
                go(rng, depth - 1, out, next_word);
            }
            out.push(')');
        }
        let mut out = String::new();
        go(rng, max_depth, &mut out, &mut 0);
        out
    }

    /// Shortest path by breadth-first search over undirected tree edges.
    fn bfs_path(t: &ConstTree, from: NodeId, to: NodeId) -> Vec<NodeId> {
        let mut prev = vec![usize::MAX; t.len()];
        let mut queue = std::collections::VecDeque::from([from]);
        prev[from] = from;
        while let Some(u) = queue.pop_front() {
            let node = t.node(u);
            for v in node.children.iter().copied().chain(node.parent) {
                if prev[v] == usize::MAX {
                    prev[v] = u;
                    queue.push_back(v);
                }
            }
        }
        let mut path = vec![to];
        while *path.last().unwrap() != from {
            path.push(prev[*path.last().unwrap()]);
        }
        path.reverse();
        path
    }

    proptest::proptest! {
        #[test]
        fn random_tree_invariants(seed in 0u64..u64::MAX) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let text = random_tree(&mut rng, 5);
            let t = ConstTree::parse(&text).unwrap();
            proptest::prop_assert_eq!(t.to_string(), text);
            let n = t.len();
            let edges: usize = t.adjacency().iter().map(|r| r.iter().filter(|&&x| x).count()).sum();
            proptest::prop_assert_eq!(edges, 2 * n - 1);
            for i in 0..n {
                for j in 0..n {
                    let p = t.path(i, j);
                    proptest::prop_assert_eq!(&p, &bfs_path(&t, i, j));
                    let mut rev = t.path(j, i);
                    rev.reverse();
                    proptest::prop_assert_eq!(&p, &rev);
                    proptest::prop_assert!(p.len() <= 2 * t.depth() + 1);
                }
            }
        }
    }
}
