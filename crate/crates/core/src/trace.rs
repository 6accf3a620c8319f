//! Plain-text dump of one sentence's intermediate values.

use std::fmt::Write;

use crate::autodiff::{Matrix, Tape};
use crate::corpus::{decode_iob2, decode_iobc, Sentence, SpanTag, TargetTag};
use crate::error::Result;
use crate::model::{lu_key, Model};

fn matrix(out: &mut String, name: &str, m: &Matrix, row_names: &[String]) {
    let _ = writeln!(out, "{name} [{} x {}]", m.rows(), m.cols());
    for r in 0..m.rows() {
        let values: Vec<String> = m.row(r).iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(out, "  {:<14} {}", row_names[r], values.join(" "));
    }
}

/// Traces `sentence` through `model`: adjacency, GCN layers, root and
/// predicate path features, target emissions and decoded paths. Gold
/// annotations, when present, choose the predicates; otherwise the
/// predicted targets do. Output depends only on the inputs.
pub fn generate_trace(model: &Model, sentence: &Sentence) -> Result<String> {
    let mut out = String::new();
    let tree = &sentence.tree;
    let sent = model.prepare(sentence)?;
    let tape = Tape::eval(&model.store);
    let enc = model.encode(&tape, &sent)?;

    let _ = writeln!(out, "sentence: {}", sentence.tokens.join(" "));
    let _ = writeln!(out, "tree: {}", sentence.tree_literal);
    let node_names: Vec<String> = (0..tree.len())
        .map(|id| match &tree.node(id).word {
            Some(w) => format!("{id}:{}/{w}", tree.label(id)),
            None => format!("{id}:{}", tree.label(id)),
        })
        .collect();
    let token_names: Vec<String> = sentence
        .tokens
        .iter()
        .enumerate()
        .map(|(i, w)| format!("{i}:{w}"))
        .collect();
    let _ = writeln!(out, "\nnodes [{}]", tree.len());
    for name in &node_names {
        let _ = writeln!(out, "  {name}");
    }
    let adjacency = tree.adjacency();
    let _ = writeln!(out, "\nadjacency [{0} x {0}]", tree.len());
    for (name, row) in node_names.iter().zip(&adjacency) {
        let bits: String = row.iter().map(|&b| if b { '1' } else { '0' }).collect();
        let _ = writeln!(out, "  {name:<14} {bits}");
    }

    if enc.gcn_layers.is_empty() {
        let _ = writeln!(out, "\ngcn: disabled, path features are zero");
    }
    for (l, &h) in enc.gcn_layers.iter().enumerate() {
        let _ = writeln!(out);
        matrix(&mut out, &format!("H{l}"), &tape.value(h), &node_names);
    }
    let _ = writeln!(out);
    matrix(&mut out, "p_root", &tape.value(enc.p_root), &token_names);

    let gold = sentence.gold_targets();
    let targets = if gold.is_empty() {
        model.predict_targets_with(&tape, &enc)?
    } else {
        gold
    };
    for target in &targets {
        let first = target[0];
        let key = lu_key(&sentence.tokens, &sentence.pos_tags, target);
        let _ = writeln!(out, "\ntarget {target:?} {key}");
        let predicate = tree.token_node(first)?;
        let _ = writeln!(out, "paths to {}", token_names[first]);
        for (i, name) in token_names.iter().enumerate() {
            let labels: Vec<&str> = tree
                .path(tree.token_node(i)?, predicate)
                .into_iter()
                .map(|n| tree.label(n))
                .collect();
            let _ = writeln!(out, "  {name:<14} {}", labels.join(" "));
        }
        model.predicate_encoding(&tape, &enc, &sent, target)?;
    }
    for (first, p_l, _) in enc.cached_b() {
        let _ = writeln!(out);
        matrix(&mut out, &format!("p_l[{first}]"), &tape.value(p_l), &token_names);
    }

    let em = tape.value(model.ti_emissions(&tape, &enc)?).clone();
    let _ = writeln!(out);
    matrix(&mut out, "ti emissions (O B I C)", &em, &token_names);
    let (labels, score) = model
        .params
        .ti_crf
        .decode(&model.store, &em, Some(&model.ti_constraints))?;
    let tags: Vec<TargetTag> = labels.iter().filter_map(|&l| TargetTag::from_id(l)).collect();
    let names: Vec<&str> = tags.iter().map(|t| t.name()).collect();
    let _ = writeln!(out, "ti viterbi: {} (score {score:.6})", names.join(" "));
    let _ = writeln!(out, "ti targets: {:?}", decode_iobc(&tags));

    for ann in &sentence.annotations {
        let lu = model.vocab.lexical_units.require("lexical unit", &ann.lexical_unit)?;
        let frame = model.vocab.frames.require("frame", &ann.frame)?;
        let b = model.predicate_encoding(&tape, &enc, &sent, &ann.target_indices)?;
        let t = model.target_repr(&tape, &enc, &ann.target_indices)?;
        let (_, pr) = model.predicate_repr(&tape, t, lu, frame)?;
        let em = tape.value(model.ai_emissions(&tape, pr, b)?).clone();
        let _ = writeln!(out);
        matrix(
            &mut out,
            &format!("ai emissions {} {} (O B I)", ann.lexical_unit, ann.frame),
            &em,
            &token_names,
        );
        let (labels, score) = model
            .params
            .ai_crf
            .decode(&model.store, &em, Some(&model.ai_constraints))?;
        let tags: Vec<SpanTag> = labels.iter().filter_map(|&l| SpanTag::from_id(l)).collect();
        let names: Vec<&str> = tags.iter().map(|t| t.name()).collect();
        let _ = writeln!(out, "ai viterbi: {} (score {score:.6})", names.join(" "));
        let _ = writeln!(out, "ai spans: {:?}", decode_iob2(&tags));
    }
    Ok(out)
}
