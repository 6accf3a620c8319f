//! The parser: shared encoders and the target, frame and role heads.
//!
//! Tokens are embedded as `e = token ⊕ pos`. Two BiLSTM backbones read `e`
//! concatenated with path features: `a` uses paths to the tree root, `b`
//! uses paths to the first word of a target. Both add `e` back and apply
//! layer normalization, so the backbone width must equal `dim(e)`.

mod checkpoint;
mod config;
mod lexicon;

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Matrix, ParamStore, Tape, Var};
use crate::corpus::{
    decode_iob2, decode_iobc, encode_iob2, encode_iobc, Element, FrameAnnotation, Ontology,
    Sentence, SpanTag, TargetTag, Vocab,
};
use crate::crf::{Constraints, CrfLayer, Scheme, CONSTRAINT_PENALTY};
use crate::error::{Error, Result};
use crate::gcn::{path_sequence, GcnParams, PathReference};
use crate::layers::{BiLstm, EmbeddingTable, LabelBilinear, LayerNorm, Linear};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use config::{Config, Preset, Task};
pub use lexicon::{coarse_pos, lu_key};

/// Slope of the leaky ReLU in the frame classifier.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Every trainable group of the parser.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub tokens: EmbeddingTable,
    pub pos: EmbeddingTable,
    pub gcn: GcnParams,
    pub backbone_a: BiLstm,
    pub norm_a: LayerNorm,
    pub backbone_b: BiLstm,
    pub norm_b: LayerNorm,
    pub ti_proj: Linear,
    pub ti_crf: CrfLayer,
    pub fi: [Linear; 3],
    pub lu_emb: EmbeddingTable,
    pub frame_emb: EmbeddingTable,
    pub v1: Linear,
    pub v2: Linear,
    pub bilinear: LabelBilinear,
    pub ai_crf: CrfLayer,
    pub y: Linear,
    pub ac_out: Linear,
    pub ac_crf: CrfLayer,
}

impl ModelParams {
    fn build(config: &Config, vocab: &Vocab, store: &mut ParamStore) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rng = &mut rng;
        let e = config.embedding_dim();
        let backbone_in = e + config.gcn_dim;
        let z = config.lu_dim + e + config.frame_dim;
        // Tables need at least one row even when an inventory is empty.
        let rows = |n: usize| n.max(1);
        ModelParams {
            tokens: EmbeddingTable::new(store, "emb.tokens", rows(vocab.tokens.len()), config.token_dim, rng),
            pos: EmbeddingTable::new(store, "emb.pos", rows(vocab.pos.len()), config.pos_dim, rng),
            gcn: GcnParams::new(
                store,
                rows(vocab.constituents.len()),
                config.constituent_dim,
                config.gcn_dim,
                config.gcn_layers,
                config.gcn_mean_aggregation,
                rng,
            ),
            backbone_a: BiLstm::new(store, "backbone_a", backbone_in, config.backbone_hidden, config.backbone_layers, rng),
            norm_a: LayerNorm::new(store, "backbone_a.ln", e),
            backbone_b: BiLstm::new(store, "backbone_b", backbone_in, config.backbone_hidden, config.backbone_layers, rng),
            norm_b: LayerNorm::new(store, "backbone_b.ln", e),
            ti_proj: Linear::new(store, "ti.proj", e, TargetTag::ALL.len(), true, rng),
            ti_crf: CrfLayer::new(store, "ti.crf", TargetTag::ALL.len(), rng),
            fi: [
                Linear::new(store, "fi.w1", e, config.fi_hidden[0], false, rng),
                Linear::new(store, "fi.w2", config.fi_hidden[0], config.fi_hidden[1], false, rng),
                Linear::new(store, "fi.w3", config.fi_hidden[1], rows(vocab.frames.len()), false, rng),
            ],
            lu_emb: EmbeddingTable::new(store, "emb.lu", rows(vocab.lexical_units.len()), config.lu_dim, rng),
            frame_emb: EmbeddingTable::new(store, "emb.frame", rows(vocab.frames.len()), config.frame_dim, rng),
            v1: Linear::new(store, "ai.v1", z, config.ai_proj_dim, false, rng),
            v2: Linear::new(store, "ai.v2", e, config.ai_proj_dim, false, rng),
            bilinear: LabelBilinear::new(store, "ai.u", SpanTag::ALL.len(), config.bilinear_dim, config.bilinear_dim, rng),
            ai_crf: CrfLayer::new(store, "ai.crf", SpanTag::ALL.len(), rng),
            y: Linear::new(store, "ac.y", e + z, config.ac_proj_dim, false, rng),
            ac_out: Linear::new(store, "ac.out", config.ac_proj_dim, rows(vocab.frame_elements.len()), true, rng),
            ac_crf: CrfLayer::new(store, "ac.crf", rows(vocab.frame_elements.len()), rng),
        }
    }
}

/// One gold frame annotation resolved to ids.
#[derive(Debug, Clone)]
pub struct PreparedAnnotation {
    pub target: Vec<usize>,
    pub lu: usize,
    pub frame: usize,
    pub frame_mask: Vec<bool>,
    /// Sorted left to right.
    pub spans: Vec<(usize, usize)>,
    pub span_tags: Vec<usize>,
    pub fe_labels: Vec<usize>,
    pub fe_constraints: Option<Constraints>,
}

/// A sentence resolved against the model vocabulary.
#[derive(Debug, Clone)]
pub struct Prepared<'s> {
    pub sentence: &'s Sentence,
    pub token_ids: Vec<usize>,
    pub pos_ids: Vec<usize>,
    pub node_labels: Vec<usize>,
    pub target_tags: Vec<usize>,
    pub annotations: Vec<PreparedAnnotation>,
}

impl Prepared<'_> {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Tape handles for one sentence's shared encodings.
pub struct Encoding {
    pub e: Var,
    /// Constituent embeddings followed by each GCN layer, when enabled.
    pub gcn_layers: Vec<Var>,
    pub constituents: Option<Var>,
    pub p_root: Var,
    pub a: Var,
    /// First target index -> (path features, predicate backbone output).
    b_cache: RefCell<HashMap<usize, (Var, Var)>>,
}

impl Encoding {
    pub fn cached_b(&self) -> Vec<(usize, Var, Var)> {
        let mut out: Vec<_> = self
            .b_cache
            .borrow()
            .iter()
            .map(|(&k, &(p, b))| (k, p, b))
            .collect();
        out.sort_by_key(|x| x.0);
        out
    }
}

/// Per-sentence loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub ti: f64,
    pub fi: f64,
    pub srl: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.ti + self.fi + self.srl
    }
}

/// Which stages are predicted and which are taken from the gold data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    /// Targets, frames and arguments are all predicted.
    Full,
    /// Gold targets and lexical units; frames and arguments predicted.
    GoldTargets,
    /// Gold targets, lexical units and frames; arguments predicted.
    GoldFrames,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentencePrediction {
    /// Target identification output; gold targets outside full mode.
    pub targets: Vec<Vec<usize>>,
    pub annotations: Vec<FrameAnnotation>,
    /// Predicted targets whose lexical unit is not in the ontology.
    pub dropped_targets: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: Config,
    pub vocab: Vocab,
    pub ontology: Ontology,
    pub store: ParamStore,
    pub params: ModelParams,
    pub ti_constraints: Constraints,
    pub ai_constraints: Constraints,
}

impl Model {
    pub fn new(config: Config, vocab: Vocab, ontology: Ontology) -> Result<Self> {
        config.validate()?;
        ontology.validate()?;
        let mut store = ParamStore::new();
        let params = ModelParams::build(&config, &vocab, &mut store);
        Ok(Model {
            config,
            vocab,
            ontology,
            store,
            params,
            ti_constraints: Constraints::build(&Scheme::Iobc)?,
            ai_constraints: Constraints::build(&Scheme::Iob2)?,
        })
    }

    /// Builds the vocabulary from `train` and initializes parameters.
    pub fn from_corpus(config: Config, train: &[Sentence], ontology: Ontology) -> Result<Self> {
        let vocab = Vocab::build(train, &ontology);
        Self::new(config, vocab, ontology)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_checkpoint(path)
    }

    pub fn load_token_vectors(&mut self, path: impl AsRef<Path>) -> Result<usize> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        self.params
            .tokens
            .load_vectors(&mut self.store, &self.vocab.tokens, file)
    }

    fn constraints(&self, c: &Constraints) -> Option<Constraints> {
        self.config.constrain_training.then(|| c.clone())
    }

    /// Resolves a sentence; gold annotations must agree with the ontology.
    pub fn prepare<'s>(&self, sentence: &'s Sentence) -> Result<Prepared<'s>> {
        let v = &self.vocab;
        let n = sentence.len();
        let token_ids = sentence.tokens.iter().map(|t| v.token_id(t)).collect();
        let pos_ids = sentence
            .pos_tags
            .iter()
            .map(|p| v.pos.require("POS tag", p))
            .collect::<Result<_>>()?;
        let node_labels = sentence
            .tree
            .nodes()
            .iter()
            .map(|node| v.constituents.require("constituent label", &node.label))
            .collect::<Result<_>>()?;
        let target_tags = encode_iobc(&sentence.gold_targets(), n)?
            .into_iter()
            .map(TargetTag::id)
            .collect();
        let annotations = sentence
            .annotations
            .iter()
            .map(|ann| self.prepare_annotation(ann, n))
            .collect::<Result<_>>()?;
        Ok(Prepared {
            sentence,
            token_ids,
            pos_ids,
            node_labels,
            target_tags,
            annotations,
        })
    }

    fn prepare_annotation(&self, ann: &FrameAnnotation, n: usize) -> Result<PreparedAnnotation> {
        let v = &self.vocab;
        let lu = v.lexical_units.require("lexical unit", &ann.lexical_unit)?;
        let frame = v.frames.require("frame", &ann.frame)?;
        let frame_mask = self.ontology.frame_mask(v, &ann.lexical_unit)?;
        if !frame_mask[frame] {
            return Err(Error::Codec(format!(
                "frame `{}` is not evoked by `{}`",
                ann.frame, ann.lexical_unit
            )));
        }
        let mut elements = ann.elements.clone();
        elements.sort();
        let fe_mask = self.ontology.fe_mask(v, &ann.frame)?;
        let fe_labels = elements
            .iter()
            .map(|e| {
                let id = v.frame_elements.require("frame element", &e.label)?;
                if fe_mask[id] {
                    Ok(id)
                } else {
                    Err(Error::Codec(format!(
                        "frame element `{}` does not belong to `{}`",
                        e.label, ann.frame
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let spans: Vec<(usize, usize)> = elements.iter().map(|e| (e.start(), e.end())).collect();
        let span_tags = encode_iob2(&spans, n)?.into_iter().map(SpanTag::id).collect();
        let fe_constraints = if fe_mask.iter().any(|&x| x) {
            Some(Constraints::build(&Scheme::FrameElements(fe_mask))?)
        } else {
            None
        };
        Ok(PreparedAnnotation {
            target: ann.target_indices.clone(),
            lu,
            frame,
            frame_mask,
            spans,
            span_tags,
            fe_labels,
            fe_constraints,
        })
    }

    /// Embeddings, GCN encodings, root paths and the `a` backbone.
    pub fn encode(&self, tape: &Tape, sent: &Prepared) -> Result<Encoding> {
        let p = &self.params;
        let tree = &sent.sentence.tree;
        let e = tape.concat_cols(&[
            p.tokens.embed(tape, &sent.token_ids)?,
            p.pos.embed(tape, &sent.pos_ids)?,
        ])?;
        let (gcn_layers, constituents) = if self.config.use_gcn {
            let layers = p.gcn.forward_layers(tape, tree, &sent.node_labels)?;
            let last = *layers.last().expect("non-empty");
            (layers, Some(last))
        } else {
            (Vec::new(), None)
        };
        let p_root = self.path_features(tape, constituents, sent, PathReference::Root)?;
        let a = self.backbone(tape, &p.backbone_a, &p.norm_a, e, p_root)?;
        Ok(Encoding {
            e,
            gcn_layers,
            constituents,
            p_root,
            a,
            b_cache: RefCell::new(HashMap::new()),
        })
    }

    fn path_features(
        &self,
        tape: &Tape,
        constituents: Option<Var>,
        sent: &Prepared,
        reference: PathReference,
    ) -> Result<Var> {
        match constituents {
            Some(h) => path_sequence(tape, h, &sent.sentence.tree, reference),
            None => tape.constant(Matrix::zeros(sent.len(), self.config.gcn_dim)),
        }
    }

    fn backbone(
        &self,
        tape: &Tape,
        lstm: &BiLstm,
        norm: &LayerNorm,
        e: Var,
        paths: Var,
    ) -> Result<Var> {
        let rate = self.config.dropout;
        let x = tape.concat_cols(&[tape.dropout(e, rate)?, paths])?;
        let h = tape.dropout(lstm.forward(tape, x, rate)?, rate)?;
        norm.forward(tape, tape.add(h, e)?)
    }

    /// Predicate-centred backbone output, computed once per first index.
    pub fn predicate_encoding(
        &self,
        tape: &Tape,
        enc: &Encoding,
        sent: &Prepared,
        target: &[usize],
    ) -> Result<Var> {
        let first = *target
            .first()
            .ok_or_else(|| Error::Codec("empty target".into()))?;
        if let Some(&(_, b)) = enc.b_cache.borrow().get(&first) {
            return Ok(b);
        }
        let p = &self.params;
        let p_l = self.path_features(tape, enc.constituents, sent, PathReference::Token(first))?;
        let b = self.backbone(tape, &p.backbone_b, &p.norm_b, enc.e, p_l)?;
        enc.b_cache.borrow_mut().insert(first, (p_l, b));
        Ok(b)
    }

    pub fn ti_emissions(&self, tape: &Tape, enc: &Encoding) -> Result<Var> {
        self.params.ti_proj.forward(tape, enc.a)
    }

    /// Sum of `a` rows over every target index.
    pub fn target_repr(&self, tape: &Tape, enc: &Encoding, target: &[usize]) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::Codec("empty target".into()));
        }
        tape.sum_rows(enc.a, target)
    }

    /// Frame logits with disallowed frames pushed down by the mask penalty.
    pub fn fi_logits(&self, tape: &Tape, t: Var, frame_mask: &[bool]) -> Result<Var> {
        let [w1, w2, w3] = &self.params.fi;
        let rate = self.config.dropout;
        let h = tape.dropout(tape.leaky_relu(w1.forward(tape, t)?, LEAKY_SLOPE)?, rate)?;
        let h = tape.dropout(tape.leaky_relu(w2.forward(tape, h)?, LEAKY_SLOPE)?, rate)?;
        let logits = w3.forward(tape, h)?;
        if frame_mask.len() != logits.cols() {
            return Err(Error::shape(
                "fi_logits",
                format!("mask of {} for {} frames", frame_mask.len(), logits.cols()),
            ));
        }
        let penalty = Matrix::row_vector(
            frame_mask
                .iter()
                .map(|&ok| if ok { 0.0 } else { CONSTRAINT_PENALTY })
                .collect(),
        );
        tape.add(logits, tape.constant(penalty)?)
    }

    /// `z = e_lu ⊕ t ⊕ e_frame` and `pr = tanh(z V1)`.
    pub fn predicate_repr(
        &self,
        tape: &Tape,
        t: Var,
        lu: usize,
        frame: usize,
    ) -> Result<(Var, Var)> {
        let p = &self.params;
        let z = tape.concat_cols(&[
            p.lu_emb.embed(tape, &[lu])?,
            t,
            p.frame_emb.embed(tape, &[frame])?,
        ])?;
        let pr = tape.tanh(p.v1.forward(tape, z)?)?;
        Ok((z, pr))
    }

    /// Per-token `{O, B, I}` scores from the label-wise bilinear.
    pub fn ai_emissions(&self, tape: &Tape, pr: Var, b: Var) -> Result<Var> {
        let pb = tape.tanh(self.params.v2.forward(tape, b)?)?;
        self.params.bilinear.scores(tape, pr, pb)
    }

    /// Per-span frame-element scores; one row per span.
    pub fn ac_emissions(
        &self,
        tape: &Tape,
        b: Var,
        z: Var,
        spans: &[(usize, usize)],
    ) -> Result<Var> {
        let n = b.rows();
        let mut counts = Matrix::zeros(spans.len(), n);
        for (w, &(s, e)) in spans.iter().enumerate() {
            if s > e || e >= n {
                return Err(Error::shape("ac", format!("span [{s},{e}] for {n} tokens")));
            }
            for i in s..=e {
                counts.set(w, i, 1.0);
            }
        }
        let r = tape.matmul(tape.constant(counts)?, b)?;
        let zs = tape.row_select(z, &vec![0; spans.len()])?;
        let q = tape.tanh(self.params.y.forward(tape, tape.concat_cols(&[r, zs])?)?)?;
        let q = tape.dropout(q, self.config.dropout)?;
        self.params.ac_out.forward(tape, q)
    }

    fn zero(&self, tape: &Tape) -> Result<Var> {
        tape.constant(Matrix::scalar(0.0))
    }

    fn ti_sentence_loss(&self, tape: &Tape, enc: &Encoding, sent: &Prepared) -> Result<Var> {
        let em = self.ti_emissions(tape, enc)?;
        let c = self.constraints(&self.ti_constraints);
        self.params.ti_crf.nll(tape, em, &sent.target_tags, c.as_ref())
    }

    fn fi_sentence_loss(&self, tape: &Tape, enc: &Encoding, sent: &Prepared) -> Result<Var> {
        if sent.annotations.is_empty() {
            return self.zero(tape);
        }
        let mut terms = Vec::with_capacity(sent.annotations.len());
        for ann in &sent.annotations {
            let t = self.target_repr(tape, enc, &ann.target)?;
            let logp = tape.log_softmax(self.fi_logits(tape, t, &ann.frame_mask)?)?;
            terms.push(tape.pick(logp, &[(0, ann.frame)])?);
        }
        let total = tape.add_all(&terms)?;
        tape.scale(total, -1.0 / terms.len() as f64)
    }

    fn srl_annotation_loss(
        &self,
        tape: &Tape,
        enc: &Encoding,
        sent: &Prepared,
        ann: &PreparedAnnotation,
    ) -> Result<Var> {
        let b = self.predicate_encoding(tape, enc, sent, &ann.target)?;
        let t = self.target_repr(tape, enc, &ann.target)?;
        let (z, pr) = self.predicate_repr(tape, t, ann.lu, ann.frame)?;
        let em = self.ai_emissions(tape, pr, b)?;
        let c = self.constraints(&self.ai_constraints);
        let ai = self.params.ai_crf.nll(tape, em, &ann.span_tags, c.as_ref())?;
        if ann.spans.is_empty() {
            return Ok(ai);
        }
        let em = self.ac_emissions(tape, b, z, &ann.spans)?;
        let c = if self.config.constrain_training {
            ann.fe_constraints.as_ref()
        } else {
            None
        };
        let ac = self.params.ac_crf.nll(tape, em, &ann.fe_labels, c)?;
        tape.add(ai, ac)
    }

    fn srl_sentence_loss(&self, tape: &Tape, enc: &Encoding, sent: &Prepared) -> Result<Var> {
        if sent.annotations.is_empty() {
            return self.zero(tape);
        }
        let terms = sent
            .annotations
            .iter()
            .map(|ann| self.srl_annotation_loss(tape, enc, sent, ann))
            .collect::<Result<Vec<_>>>()?;
        let total = tape.add_all(&terms)?;
        tape.scale(total, 1.0 / terms.len() as f64)
    }

    /// Loss of one sentence for `task` plus its per-task parts.
    pub fn sentence_loss(&self, tape: &Tape, sent: &Prepared, task: Task) -> Result<(Var, LossParts)> {
        let enc = self.encode(tape, sent)?;
        let mut parts = LossParts::default();
        let mut terms = Vec::new();
        if matches!(task, Task::Ti | Task::Joint) {
            let l = self.ti_sentence_loss(tape, &enc, sent)?;
            parts.ti = tape.scalar(l);
            terms.push(l);
        }
        if matches!(task, Task::Fi | Task::Joint) {
            let l = self.fi_sentence_loss(tape, &enc, sent)?;
            parts.fi = tape.scalar(l);
            terms.push(l);
        }
        if matches!(task, Task::Srl | Task::Joint) {
            let l = self.srl_sentence_loss(tape, &enc, sent)?;
            parts.srl = tape.scalar(l);
            terms.push(l);
        }
        Ok((tape.add_all(&terms)?, parts))
    }

    /// Batch mean of sentence losses on a single tape.
    pub fn batch_loss(&self, tape: &Tape, batch: &[Prepared], task: Task) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let terms = batch
            .iter()
            .map(|s| self.sentence_loss(tape, s, task).map(|(l, _)| l))
            .collect::<Result<Vec<_>>>()?;
        let total = tape.add_all(&terms)?;
        tape.scale(total, 1.0 / batch.len() as f64)
    }

    /// Batch-mean loss value with dropout off.
    pub fn loss_value(&self, batch: &[Prepared], task: Task) -> Result<f64> {
        let tape = Tape::eval(&self.store);
        let l = self.batch_loss(&tape, batch, task)?;
        Ok(tape.scalar(l))
    }

    pub fn predict_targets_with(&self, tape: &Tape, enc: &Encoding) -> Result<Vec<Vec<usize>>> {
        let em = tape.value(self.ti_emissions(tape, enc)?).clone();
        let (labels, _) = self
            .params
            .ti_crf
            .decode(&self.store, &em, Some(&self.ti_constraints))?;
        let tags: Vec<TargetTag> = labels
            .into_iter()
            .map(|l| TargetTag::from_id(l).expect("label in range"))
            .collect();
        Ok(decode_iobc(&tags))
    }

    /// Masked argmax over the lexical unit's frames.
    pub fn predict_frame_with(
        &self,
        tape: &Tape,
        enc: &Encoding,
        lu: &str,
        target: &[usize],
    ) -> Result<usize> {
        let mask = self.ontology.frame_mask(&self.vocab, lu)?;
        let t = self.target_repr(tape, enc, target)?;
        let logits = tape.value(self.fi_logits(tape, t, &mask)?).clone();
        let mut best: Option<(usize, f64)> = None;
        for (f, &ok) in mask.iter().enumerate() {
            let s = logits.get(0, f);
            if ok && best.is_none_or(|(_, b)| s > b) {
                best = Some((f, s));
            }
        }
        best.map(|(f, _)| f)
            .ok_or_else(|| Error::Config(format!("lexical unit `{lu}` evokes no frame")))
    }

    /// Argument spans and their frame-element labels.
    pub fn predict_arguments_with(
        &self,
        tape: &Tape,
        enc: &Encoding,
        sent: &Prepared,
        lu: &str,
        frame: &str,
        target: &[usize],
    ) -> Result<Vec<Element>> {
        let lu_id = self.vocab.lexical_units.require("lexical unit", lu)?;
        let frame_id = self.vocab.frames.require("frame", frame)?;
        let fe_mask = self.ontology.fe_mask(&self.vocab, frame)?;
        if !fe_mask.iter().any(|&x| x) {
            return Ok(Vec::new());
        }
        let b = self.predicate_encoding(tape, enc, sent, target)?;
        let t = self.target_repr(tape, enc, target)?;
        let (z, pr) = self.predicate_repr(tape, t, lu_id, frame_id)?;
        let em = tape.value(self.ai_emissions(tape, pr, b)?).clone();
        let (labels, _) = self
            .params
            .ai_crf
            .decode(&self.store, &em, Some(&self.ai_constraints))?;
        let tags: Vec<SpanTag> = labels
            .into_iter()
            .map(|l| SpanTag::from_id(l).expect("label in range"))
            .collect();
        let spans = decode_iob2(&tags);
        if spans.is_empty() {
            return Ok(Vec::new());
        }
        let em = tape.value(self.ac_emissions(tape, b, z, &spans)?).clone();
        let c = Constraints::build(&Scheme::FrameElements(fe_mask))?;
        let (labels, _) = self.params.ac_crf.decode(&self.store, &em, Some(&c))?;
        Ok(spans
            .into_iter()
            .zip(labels)
            .map(|((s, e), l)| Element::new(s, e, self.vocab.frame_elements.name(l)))
            .collect())
    }

    pub fn predict_targets(&self, sent: &Prepared) -> Result<Vec<Vec<usize>>> {
        let tape = Tape::eval(&self.store);
        let enc = self.encode(&tape, sent)?;
        self.predict_targets_with(&tape, &enc)
    }

    /// Runs the stages selected by `mode`. Gold annotations are read only
    /// outside full mode.
    pub fn predict(&self, sentence: &Sentence, mode: PipelineMode) -> Result<SentencePrediction> {
        let mut bare = sentence.clone();
        if mode == PipelineMode::Full {
            bare.annotations.clear();
        }
        let sent = self.prepare(&bare)?;
        let tape = Tape::eval(&self.store);
        let enc = self.encode(&tape, &sent)?;

        let mut dropped = 0;
        let mut requests: Vec<(Vec<usize>, String, Option<String>)> = Vec::new();
        let targets = match mode {
            PipelineMode::Full => {
                let targets = self.predict_targets_with(&tape, &enc)?;
                for t in &targets {
                    let key = lu_key(&sentence.tokens, &sentence.pos_tags, t);
                    if self.ontology.lu_to_frames.contains_key(&key) {
                        requests.push((t.clone(), key, None));
                    } else {
                        dropped += 1;
                    }
                }
                targets
            }
            PipelineMode::GoldTargets | PipelineMode::GoldFrames => {
                for ann in &sentence.annotations {
                    let frame = (mode == PipelineMode::GoldFrames).then(|| ann.frame.clone());
                    requests.push((ann.target_indices.clone(), ann.lexical_unit.clone(), frame));
                }
                sentence.gold_targets()
            }
        };
        if dropped > 0 {
            log::warn!("{dropped} predicted target(s) with unknown lexical units dropped");
        }

        let mut annotations = Vec::with_capacity(requests.len());
        for (target, lu, frame) in requests {
            let frame = match frame {
                Some(f) => f,
                None => {
                    let id = self.predict_frame_with(&tape, &enc, &lu, &target)?;
                    self.vocab.frames.name(id).to_string()
                }
            };
            let elements = self.predict_arguments_with(&tape, &enc, &sent, &lu, &frame, &target)?;
            annotations.push(FrameAnnotation {
                target_indices: target,
                lexical_unit: lu,
                frame,
                elements,
            });
        }
        Ok(SentencePrediction {
            targets,
            annotations,
            dropped_targets: dropped,
        })
    }

    /// Squared norms of the L2-regularized groups: CRF transitions and the
    /// bilinear matrices.
    pub fn l2_penalty(&self) -> f64 {
        let p = &self.params;
        let s = &self.store;
        self.config.l2_transitions
            * (p.ti_crf.transition_norm_sq(s)
                + p.ai_crf.transition_norm_sq(s)
                + p.ac_crf.transition_norm_sq(s))
            + self.config.l2_bilinear * p.bilinear.norm_sq(s)
    }

    /// Adds the gradient of [`Model::l2_penalty`] into `grads`.
    pub fn add_l2_gradient(&self, grads: &mut crate::autodiff::ParamGrads) {
        let p = &self.params;
        let groups = [p.ti_crf.transitions, p.ai_crf.transitions, p.ac_crf.transitions]
            .map(|id| (id, self.config.l2_transitions));
        let bilinear = p.bilinear.matrices.iter().map(|&id| (id, self.config.l2_bilinear));
        for (id, lambda) in groups.into_iter().chain(bilinear) {
            if lambda > 0.0 {
                grads.get_mut(id).add_scaled(self.store.get(id), 2.0 * lambda);
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests;
