//! Seeded toy-grammar corpus.
//!
//! Sentences are built constituent by constituent, so every frame-element
//! span is the span of a node in the tree. Object nouns may be followed by
//! a `with` phrase whose attachment is chosen at random: attached to the
//! object NP it belongs to the object's role, attached to the VP it is an
//! `Instrument`. Both readings share the same words and tags, so only the
//! tree tells them apart.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Element, FrameAnnotation, Ontology, Sentence};
use crate::error::Result;

const SUBJECT_NAMES: &[&str] = &["Kim", "Lee", "Sam", "Alex"];
const PRONOUNS: &[&str] = &["she", "he", "they"];
const PEOPLE: &[&str] = &["woman", "boy", "teacher", "farmer"];
const PEOPLE_PLURAL: &[&str] = &["men", "girls", "kids"];
const NUMBERS: &[&str] = &["two", "three", "four"];
const DETERMINERS: &[&str] = &["the", "a"];
const ADJECTIVES: &[&str] = &["old", "small", "red", "heavy"];
const WATCHABLE: &[&str] = &["man", "dog", "bird", "cat", "girl"];
const WITH_NOUNS: &[&str] = &["telescope", "hat", "stick", "camera", "scarf"];
const SYSTEMS: &[&str] = &["company", "shop", "factory", "team"];
const PLACES: &[&str] = &["park", "store", "river", "station"];
const THINGS: &[&str] = &["book", "cup", "ball", "lamp"];
const SURFACES: &[&str] = &["table", "shelf", "floor"];
const ADVERBS: &[&str] = &["quickly", "slowly", "carefully"];

const CONTAINER: &str = "box";

/// Frames with their elements, and the lexical units evoking them.
const FRAMES: &[(&str, &[&str])] = &[
    ("Perception", &["Perceiver", "Phenomenon", "Instrument", "Manner"]),
    ("Self_motion", &["Self_mover", "Goal", "Manner"]),
    ("Operating_a_system", &["Operator", "System", "Instrument", "Manner"]),
    ("Taking", &["Agent", "Theme", "Instrument", "Manner"]),
    ("Placing", &["Agent", "Theme", "Goal", "Manner"]),
    ("Bringing", &["Agent", "Theme", "Goal", "Instrument", "Manner"]),
    ("Containers", &["Descriptor"]),
];

const LEXICAL_UNITS: &[(&str, &[&str])] = &[
    ("saw.v", &["Perception"]),
    ("watched.v", &["Perception"]),
    ("ran.v", &["Self_motion", "Operating_a_system"]),
    ("picked up.v", &["Taking"]),
    ("put.v", &["Placing"]),
    ("carried.v", &["Bringing"]),
    ("box.n", &["Containers"]),
];

pub fn ontology() -> Ontology {
    let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    Ontology {
        lu_to_frames: LEXICAL_UNITS
            .iter()
            .map(|(lu, fs)| (lu.to_string(), set(fs)))
            .collect::<BTreeMap<_, _>>(),
        frame_to_elements: FRAMES
            .iter()
            .map(|(f, es)| (f.to_string(), set(es)))
            .collect(),
    }
}

/// A built constituent: bracketed text and inclusive token span.
#[derive(Debug, Clone)]
struct Node {
    text: String,
    span: (usize, usize),
}

struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    tokens: Vec<String>,
    pos: Vec<String>,
    /// Token index of a noun evoking `box.n`, with its optional ADJP.
    container: Option<(usize, Option<(usize, usize)>)>,
    /// The container target is disallowed inside a discontinuous target.
    allow_container: bool,
}

impl<'r> Builder<'r> {
    fn word(&mut self, tag: &str, word: &str) -> Node {
        let i = self.tokens.len();
        self.tokens.push(word.to_string());
        self.pos.push(tag.to_string());
        Node {
            text: format!("({tag} {word})"),
            span: (i, i),
        }
    }

    fn phrase(&mut self, label: &str, children: Vec<Node>) -> Node {
        let span = (children[0].span.0, children[children.len() - 1].span.1);
        let inner: Vec<&str> = children.iter().map(|c| c.text.as_str()).collect();
        Node {
            text: format!("({label} {})", inner.join(" ")),
            span,
        }
    }

    fn pick(&mut self, xs: &[&'static str]) -> &'static str {
        xs.choose(self.rng).expect("non-empty word list")
    }

    fn subject(&mut self) -> Node {
        match self.rng.random_range(0..4) {
            0 => {
                let w = self.pick(PRONOUNS);
                let p = self.word("PRP", w);
                self.phrase("NP", vec![p])
            }
            1 => {
                let w = self.pick(SUBJECT_NAMES);
                let p = self.word("NNP", w);
                self.phrase("NP", vec![p])
            }
            2 => {
                let d = self.word("DT", "the");
                let w = self.pick(PEOPLE);
                let n = self.word("NN", w);
                self.phrase("NP", vec![d, n])
            }
            _ => {
                let w = self.pick(NUMBERS);
                let c = self.word("CD", w);
                let q = self.phrase("QP", vec![c]);
                let w = self.pick(PEOPLE_PLURAL);
                let n = self.word("NNS", w);
                self.phrase("NP", vec![q, n])
            }
        }
    }

    /// Determiner, optional adjective phrase, noun. Nouns from `nouns` may
    /// be swapped for the container noun.
    fn noun_phrase(&mut self, nouns: &[&'static str], adjective: bool, container: bool) -> Node {
        let det = self.pick(DETERMINERS);
        let d = self.word("DT", det);
        let mut children = vec![d];
        let mut adjp = None;
        if adjective && self.rng.random_bool(0.4) {
            let w = self.pick(ADJECTIVES);
            let j = self.word("JJ", w);
            let a = self.phrase("ADJP", vec![j]);
            adjp = Some(a.span);
            children.push(a);
        }
        let use_container =
            container && self.allow_container && self.container.is_none() && self.rng.random_bool(0.35);
        let noun = if use_container { CONTAINER } else { self.pick(nouns) };
        let n = self.word("NN", noun);
        if use_container {
            self.container = Some((n.span.0, adjp));
        }
        children.push(n);
        self.phrase("NP", children)
    }

    fn with_phrase(&mut self) -> Node {
        let p = self.word("IN", "with");
        let d = self.word("DT", "the");
        let w = self.pick(WITH_NOUNS);
        let n = self.word("NN", w);
        let np = self.phrase("NP", vec![d, n]);
        self.phrase("PP", vec![p, np])
    }

    fn goal_phrase(&mut self) -> Node {
        let t = self.word("TO", "to");
        let d = self.word("DT", "the");
        let w = self.pick(PLACES);
        let n = self.word("NN", w);
        let np = self.phrase("NP", vec![d, n]);
        self.phrase("PP", vec![t, np])
    }

    /// Object NP optionally followed by a `with` phrase. Returns the VP-level
    /// children and elements for the object role and any instrument.
    fn object_with_attachment(
        &mut self,
        nouns: &[&'static str],
        role: &'static str,
        elements: &mut Vec<Element>,
    ) -> Vec<Node> {
        let object = self.noun_phrase(nouns, true, true);
        if !self.rng.random_bool(0.9) {
            elements.push(Element::new(object.span.0, object.span.1, role));
            return vec![object];
        }
        let pp = self.with_phrase();
        if self.rng.random_bool(0.5) {
            let outer = self.phrase("NP", vec![object, pp]);
            elements.push(Element::new(outer.span.0, outer.span.1, role));
            vec![outer]
        } else {
            elements.push(Element::new(object.span.0, object.span.1, role));
            elements.push(Element::new(pp.span.0, pp.span.1, "Instrument"));
            vec![object, pp]
        }
    }

    fn manner(&mut self, children: &mut Vec<Node>, elements: &mut Vec<Element>) {
        if self.rng.random_bool(0.3) {
            let w = self.pick(ADVERBS);
            let r = self.word("RB", w);
            let a = self.phrase("ADVP", vec![r]);
            elements.push(Element::new(a.span.0, a.span.1, "Manner"));
            children.push(a);
        }
    }
}

/// One sentence: tokens, tags, tree and annotations.
fn sentence(rng: &mut ChaCha8Rng) -> Result<Sentence> {
    let mut b = Builder {
        rng,
        tokens: Vec::new(),
        pos: Vec::new(),
        container: None,
        allow_container: true,
    };
    let subject = b.subject();
    let mut elements = Vec::new();
    let kind = b.rng.random_range(0..7);
    let agent = match kind {
        0 | 1 => "Perceiver",
        2 => "Self_mover",
        3 => "Operator",
        _ => "Agent",
    };
    elements.push(Element::new(subject.span.0, subject.span.1, agent));

    let (target, lu, frame, vp_children) = match kind {
        0 | 1 => {
            let lemma = if kind == 0 { "saw" } else { "watched" };
            let v = b.word("VBD", lemma);
            let i = v.span.0;
            let mut c = vec![v];
            c.extend(b.object_with_attachment(WATCHABLE, "Phenomenon", &mut elements));
            b.manner(&mut c, &mut elements);
            (vec![i], format!("{lemma}.v"), "Perception", c)
        }
        2 => {
            let v = b.word("VBD", "ran");
            let i = v.span.0;
            let pp = b.goal_phrase();
            elements.push(Element::new(pp.span.0, pp.span.1, "Goal"));
            let mut c = vec![v, pp];
            b.manner(&mut c, &mut elements);
            (vec![i], "ran.v".into(), "Self_motion", c)
        }
        3 => {
            let v = b.word("VBD", "ran");
            let i = v.span.0;
            let mut c = vec![v];
            c.extend(b.object_with_attachment(SYSTEMS, "System", &mut elements));
            b.manner(&mut c, &mut elements);
            (vec![i], "ran.v".into(), "Operating_a_system", c)
        }
        4 => {
            let v = b.word("VBD", "picked");
            let i = v.span.0;
            let (target, c) = if b.rng.random_bool(0.5) {
                let r = b.word("RP", "up");
                let prt = b.phrase("PRT", vec![r]);
                let mut c = vec![v, prt];
                c.extend(b.object_with_attachment(THINGS, "Theme", &mut elements));
                (vec![i, i + 1], c)
            } else {
                // A split particle encloses the object, which therefore
                // cannot hold a second target.
                b.allow_container = false;
                let object = b.noun_phrase(THINGS, true, false);
                elements.push(Element::new(object.span.0, object.span.1, "Theme"));
                let r = b.word("RP", "up");
                let j = r.span.0;
                let prt = b.phrase("PRT", vec![r]);
                b.allow_container = true;
                (vec![i, j], vec![v, object, prt])
            };
            let mut c = c;
            b.manner(&mut c, &mut elements);
            (target, "picked up.v".into(), "Taking", c)
        }
        5 => {
            let v = b.word("VBD", "put");
            let i = v.span.0;
            let object = b.noun_phrase(THINGS, true, true);
            elements.push(Element::new(object.span.0, object.span.1, "Theme"));
            let prep = if b.rng.random_bool(0.5) { "on" } else { "in" };
            let p = b.word("IN", prep);
            let d = b.word("DT", "the");
            let w = b.pick(SURFACES);
            let n = b.word("NN", w);
            let np = b.phrase("NP", vec![d, n]);
            let pp = b.phrase("PP", vec![p, np]);
            elements.push(Element::new(pp.span.0, pp.span.1, "Goal"));
            let mut c = vec![v, object, pp];
            b.manner(&mut c, &mut elements);
            (vec![i], "put.v".into(), "Placing", c)
        }
        _ => {
            let v = b.word("VBD", "carried");
            let i = v.span.0;
            let mut c = vec![v];
            c.extend(b.object_with_attachment(THINGS, "Theme", &mut elements));
            let pp = b.goal_phrase();
            elements.push(Element::new(pp.span.0, pp.span.1, "Goal"));
            c.push(pp);
            b.manner(&mut c, &mut elements);
            (vec![i], "carried.v".into(), "Bringing", c)
        }
    };
    let vp = b.phrase("VP", vp_children);
    let s = b.phrase("S", vec![subject, vp]);

    elements.sort();
    let mut annotations = vec![FrameAnnotation {
        target_indices: target,
        lexical_unit: lu,
        frame: frame.to_string(),
        elements,
    }];
    if let Some((i, adjp)) = b.container {
        annotations.push(FrameAnnotation {
            target_indices: vec![i],
            lexical_unit: format!("{CONTAINER}.n"),
            frame: "Containers".into(),
            elements: adjp
                .map(|(s, e)| Element::new(s, e, "Descriptor"))
                .into_iter()
                .collect(),
        });
    }
    annotations.sort_by(|x, y| x.target_indices.cmp(&y.target_indices));
    Sentence::new(b.tokens, b.pos, s.text, annotations)
}

/// `n` sentences from `seed`. The same seed always yields the same corpus.
pub fn generate(seed: u64, n: usize) -> Result<Vec<Sentence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sentence(&mut rng)).collect()
}
