use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{Ontology, Sentence};
use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";

/// Dense string <-> id map. Ids are insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Interner {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Interner {
    fn from(items: Vec<String>) -> Self {
        let mut out = Interner::default();
        for s in items {
            out.insert(&s);
        }
        out
    }
}

impl From<Interner> for Vec<String> {
    fn from(i: Interner) -> Self {
        i.items
    }
}

impl Interner {
    pub fn insert(&mut self, s: &str) -> usize {
        if let Some(&id) = self.index.get(s) {
            return id;
        }
        let id = self.items.len();
        self.items.push(s.to_string());
        self.index.insert(s.to_string(), id);
        id
    }

    pub fn id(&self, s: &str) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn require(&self, kind: &'static str, s: &str) -> Result<usize> {
        self.id(s).ok_or_else(|| Error::unknown(kind, s))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.items[id]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(String::as_str)
    }
}

/// Every string table the model indexes into.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    /// Id 0 is [`UNK_TOKEN`].
    pub tokens: Interner,
    pub pos: Interner,
    pub constituents: Interner,
    pub lexical_units: Interner,
    pub frames: Interner,
    pub frame_elements: Interner,
}

impl Vocab {
    /// Tokens, POS tags and constituent labels come from the training
    /// sentences; lexical units, frames and frame elements from the ontology.
    pub fn build(sentences: &[Sentence], ontology: &Ontology) -> Self {
        let mut v = Vocab::default();
        v.tokens.insert(UNK_TOKEN);
        for s in sentences {
            for t in &s.tokens {
                v.tokens.insert(t);
            }
            for p in &s.pos_tags {
                v.pos.insert(p);
            }
            for node in s.tree.nodes() {
                v.constituents.insert(&node.label);
            }
        }
        for lu in ontology.lu_to_frames.keys() {
            v.lexical_units.insert(lu);
        }
        let mut fes = BTreeSet::new();
        for (f, elements) in &ontology.frame_to_elements {
            v.frames.insert(f);
            fes.extend(elements.iter());
        }
        for fe in fes {
            v.frame_elements.insert(fe);
        }
        v
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.tokens.id(token).unwrap_or(0)
    }
}
