use super::*;
use crate::autodiff::{grad_check, GradCheckOptions};
use crate::corpus::parse_corpus;

const ONTOLOGY: &str = r#"{
  "lu_to_frames": {"had.v": ["Possession", "Causation"], "attention.n": ["Attention"]},
  "frame_to_elements": {
    "Possession": ["Owner", "Possession"],
    "Causation": ["Cause", "Effect"],
    "Attention": ["Figure"]
  }
}"#;

const CORPUS: &str = r#"{"tokens":["She","had","little","attention"],"pos":["PRP","VBD","JJ","NN"],"tree":"(S (NP (PRP She)) (VP (VBD had) (NP (JJ little) (NN attention))))","annotations":[{"target":[1],"lu":"had.v","frame":"Possession","elements":[{"span":[2,3],"label":"Possession"},{"span":[0,0],"label":"Owner"}]},{"target":[3],"lu":"attention.n","frame":"Attention","elements":[{"span":[2,2],"label":"Figure"}]}]}
{"tokens":["She","had","attention"],"pos":["PRP","VBD","NN"],"tree":"(S (NP (PRP She)) (VP (VBD had) (NP (NN attention))))"}
"#;

pub(crate) fn tiny_config() -> Config {
    Config {
        token_dim: 4,
        pos_dim: 2,
        constituent_dim: 3,
        gcn_dim: 3,
        backbone_hidden: 3,
        backbone_layers: 1,
        lu_dim: 2,
        frame_dim: 2,
        fi_hidden: [4, 3],
        ai_proj_dim: 3,
        bilinear_dim: 3,
        ac_proj_dim: 3,
        dropout: 0.0,
        ..Config::default()
    }
}

pub(crate) fn fixture(config: Config) -> (Model, Vec<Sentence>) {
    let corpus = parse_corpus(CORPUS).unwrap();
    let ontology = Ontology::from_json(ONTOLOGY).unwrap();
    let model = Model::from_corpus(config, &corpus, ontology).unwrap();
    (model, corpus)
}

fn value(tape: &Tape, v: Var) -> Matrix {
    tape.value(v).clone()
}

fn zero_params(model: &mut Model, prefix: &str) {
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(id, _)| id)
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        model.store.get_mut(id).scale_in_place(0.0);
    }
}

#[test]
fn zero_backbone_keeps_residual() {
    let (mut model, corpus) = fixture(tiny_config());
    zero_params(&mut model, "backbone_a.l0.");
    let sent = model.prepare(&corpus[0]).unwrap();
    let tape = Tape::eval(&model.store);
    let enc = model.encode(&tape, &sent).unwrap();
    let e = value(&tape, enc.e);
    let a = value(&tape, enc.a);
    for r in 0..e.rows() {
        let row = e.row(r);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / row.len() as f64;
        for (x, y) in row.iter().zip(a.row(r)) {
            assert!(((x - mean) / (var + LayerNorm::EPS).sqrt() - y).abs() < 1e-12);
        }
    }
}

#[test]
fn predicate_encodings_are_cached() {
    let (model, corpus) = fixture(tiny_config());
    let sent = model.prepare(&corpus[0]).unwrap();
    let tape = Tape::eval(&model.store);
    let enc = model.encode(&tape, &sent).unwrap();
    let b1 = model.predicate_encoding(&tape, &enc, &sent, &[1]).unwrap();
    let len = tape.len();
    let b2 = model.predicate_encoding(&tape, &enc, &sent, &[1, 3]).unwrap();
    assert_eq!(b1, b2);
    assert_eq!(tape.len(), len);
    let b3 = model.predicate_encoding(&tape, &enc, &sent, &[3]).unwrap();
    assert_ne!(b1, b3);
    assert_eq!(enc.cached_b().len(), 2);
}

#[test]
fn bracketing_changes_root_backbone() {
    let (model, corpus) = fixture(tiny_config());
    let mut flat = corpus[0].clone();
    flat.annotations.clear();
    flat.tree_literal = "(S (NP (PRP She)) (VP (VBD had) (NP (JJ little)) (NP (NN attention))))".into();
    flat.tree = crate::syntax::ConstTree::parse(&flat.tree_literal).unwrap();
    let tape = Tape::eval(&model.store);
    let a1 = value(&tape, model.encode(&tape, &model.prepare(&corpus[0]).unwrap()).unwrap().a);
    let a2 = value(&tape, model.encode(&tape, &model.prepare(&flat).unwrap()).unwrap().a);
    assert!(a1.max_abs_diff(&a2) > 1e-6);

    let (mut no_gcn, _) = fixture(Config { use_gcn: false, ..tiny_config() });
    no_gcn.store = model.store.clone();
    let tape = Tape::eval(&no_gcn.store);
    let a1 = value(&tape, no_gcn.encode(&tape, &no_gcn.prepare(&corpus[0]).unwrap()).unwrap().a);
    let a2 = value(&tape, no_gcn.encode(&tape, &no_gcn.prepare(&flat).unwrap()).unwrap().a);
    assert_eq!(a1, a2);
}

#[test]
fn untargeted_sentence_loss_is_all_o_nll() {
    let (model, corpus) = fixture(tiny_config());
    let sent = model.prepare(&corpus[1]).unwrap();
    assert!(sent.target_tags.iter().all(|&t| t == TargetTag::O.id()));
    let tape = Tape::eval(&model.store);
    let (loss, parts) = model.sentence_loss(&tape, &sent, Task::Joint).unwrap();
    let enc = model.encode(&tape, &sent).unwrap();
    let em = value(&tape, model.ti_emissions(&tape, &enc).unwrap());
    let c = Constraints::build(&Scheme::Iobc).unwrap();
    let expected =
        crate::crf::sequence_nll(&em, &model.params.ti_crf.scores(&model.store), Some(&c), &[0, 0, 0])
            .unwrap();
    assert!((parts.ti - expected).abs() < 1e-12);
    assert!(parts.ti > 0.0);
    assert_eq!(parts.fi, 0.0);
    assert_eq!(parts.srl, 0.0);
    assert_eq!(tape.scalar(loss), parts.ti);
}

#[test]
fn target_representation() {
    let (model, corpus) = fixture(tiny_config());
    let sent = model.prepare(&corpus[0]).unwrap();
    let tape = Tape::eval(&model.store);
    let enc = model.encode(&tape, &sent).unwrap();
    let a = value(&tape, enc.a);
    let single = value(&tape, model.target_repr(&tape, &enc, &[2]).unwrap());
    assert_eq!(single.row(0), a.row(2));
    let pair = value(&tape, model.target_repr(&tape, &enc, &[1, 3]).unwrap());
    let swapped = value(&tape, model.target_repr(&tape, &enc, &[3, 1]).unwrap());
    assert_eq!(pair, swapped);
    for c in 0..a.cols() {
        assert_eq!(pair.get(0, c), a.get(1, c) + a.get(3, c));
    }
    assert!(model.target_repr(&tape, &enc, &[]).is_err());
}

#[test]
fn frame_mask_behaviour() {
    let (mut model, corpus) = fixture(tiny_config());
    let sent = model.prepare(&corpus[0]).unwrap();
    {
        let tape = Tape::eval(&model.store);
        let enc = model.encode(&tape, &sent).unwrap();
        let f = model.predict_frame_with(&tape, &enc, "attention.n", &[3]).unwrap();
        assert_eq!(model.vocab.frames.name(f), "Attention");
        let f = model.predict_frame_with(&tape, &enc, "had.v", &[1]).unwrap();
        assert!(["Possession", "Causation"].contains(&model.vocab.frames.name(f)));
        assert!(model.predict_frame_with(&tape, &enc, "nope.v", &[1]).is_err());
    }
    zero_params(&mut model, "fi.w");
    let tape = Tape::eval(&model.store);
    let enc = model.encode(&tape, &sent).unwrap();
    let mask = model.ontology.frame_mask(&model.vocab, "had.v").unwrap();
    let t = model.target_repr(&tape, &enc, &[1]).unwrap();
    let logp = value(&tape, tape.log_softmax(model.fi_logits(&tape, t, &mask).unwrap()).unwrap());
    let mut allowed_total = 0.0;
    for (f, &ok) in mask.iter().enumerate() {
        let p = logp.get(0, f).exp();
        if ok {
            assert!((p - 0.5).abs() < 1e-12);
            allowed_total += p;
        } else {
            assert!(p < 1e-40);
        }
    }
    assert!((allowed_total - 1.0).abs() < 1e-12);
}

#[test]
fn predicate_representation() {
    let (mut model, corpus) = fixture(tiny_config());
    let sent = model.prepare(&corpus[0]).unwrap();
    let ann = &sent.annotations[0];
    {
        let tape = Tape::eval(&model.store);
        let enc = model.encode(&tape, &sent).unwrap();
        let t = model.target_repr(&tape, &enc, &ann.target).unwrap();
        let (z, pr) = model.predicate_repr(&tape, t, ann.lu, ann.frame).unwrap();
        assert_eq!(z.cols(), 2 + 6 + 2);
        assert!(value(&tape, pr).data().iter().all(|v| v.abs() < 1.0));
    }
    zero_params(&mut model, "ai.v1");
    let tape = Tape::eval(&model.store);
    let enc = model.encode(&tape, &sent).unwrap();
    let t = model.target_repr(&tape, &enc, &ann.target).unwrap();
    let (_, pr) = model.predicate_repr(&tape, t, ann.lu, ann.frame).unwrap();
    assert!(value(&tape, pr).data().iter().all(|&v| v == 0.0));
    let b = model.predicate_encoding(&tape, &enc, &sent, &ann.target).unwrap();
    let em = value(&tape, model.ai_emissions(&tape, pr, b).unwrap());
    assert!(em.data().iter().all(|&v| v == 0.0));
}

#[test]
fn span_tags_and_order() {
    let (model, corpus) = fixture(tiny_config());
    let sent = model.prepare(&corpus[0]).unwrap();
    let ann = &sent.annotations[0];
    assert_eq!(ann.spans, vec![(0, 0), (2, 3)]);
    assert_eq!(ann.span_tags, vec![1, 0, 1, 2]);
    let labels: Vec<&str> = ann.fe_labels.iter().map(|&l| model.vocab.frame_elements.name(l)).collect();
    assert_eq!(labels, ["Owner", "Possession"]);
}

#[test]
fn span_vectors_sum_backbone_rows() {
    let (model, corpus) = fixture(tiny_config());
    let sent = model.prepare(&corpus[0]).unwrap();
    let tape = Tape::eval(&model.store);
    let enc = model.encode(&tape, &sent).unwrap();
    let b = model.predicate_encoding(&tape, &enc, &sent, &[1]).unwrap();
    let t = model.target_repr(&tape, &enc, &[1]).unwrap();
    let (z, _) = model.predicate_repr(&tape, t, 0, 0).unwrap();
    let em = value(&tape, model.ac_emissions(&tape, b, z, &[(2, 2), (0, 1)]).unwrap());
    let bv = value(&tape, b);
    let manual = |rows: &[usize]| {
        let mut r = Matrix::zeros(1, bv.cols());
        for &i in rows {
            for c in 0..bv.cols() {
                r.set(0, c, r.get(0, c) + bv.get(i, c));
            }
        }
        let r = tape.constant(r).unwrap();
        let q = tape.tanh(model.params.y.forward(&tape, tape.concat_cols(&[r, z]).unwrap()).unwrap()).unwrap();
        value(&tape, model.params.ac_out.forward(&tape, q).unwrap())
    };
    assert!(manual(&[2]).row(0).iter().zip(em.row(0)).all(|(x, y)| (x - y).abs() < 1e-12));
    assert!(manual(&[0, 1]).row(0).iter().zip(em.row(1)).all(|(x, y)| (x - y).abs() < 1e-12));
    assert!(model.ac_emissions(&tape, b, z, &[(3, 4)]).is_err());
}

#[test]
fn single_element_frame_forces_label() {
    let (model, corpus) = fixture(tiny_config());
    let sent = model.prepare(&corpus[0]).unwrap();
    let tape = Tape::eval(&model.store);
    let enc = model.encode(&tape, &sent).unwrap();
    let elements = model
        .predict_arguments_with(&tape, &enc, &sent, "attention.n", "Attention", &[3])
        .unwrap();
    assert!(elements.iter().all(|e| e.label == "Figure"));
    let mut last_end = None;
    for e in &elements {
        assert!(last_end.is_none_or(|l| e.start() > l));
        last_end = Some(e.end());
    }
}

#[test]
fn joint_is_sum_of_parts() {
    let (model, corpus) = fixture(tiny_config());
    let batch: Vec<Prepared> = corpus.iter().map(|s| model.prepare(s).unwrap()).collect();
    let ti = model.loss_value(&batch, Task::Ti).unwrap();
    let fi = model.loss_value(&batch, Task::Fi).unwrap();
    let srl = model.loss_value(&batch, Task::Srl).unwrap();
    let joint = model.loss_value(&batch, Task::Joint).unwrap();
    assert!(ti > 0.0 && fi > 0.0 && srl > 0.0);
    assert!((joint - (ti + fi + srl)).abs() < 1e-12);

    let doubled: Vec<Prepared> = batch.iter().chain(&batch).cloned().collect();
    for task in [Task::Ti, Task::Fi, Task::Srl, Task::Joint] {
        let a = model.loss_value(&batch, task).unwrap();
        let b = model.loss_value(&doubled, task).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
    assert!(model.loss_value(&[], Task::Ti).is_err());
}

#[test]
fn invalid_gold_is_rejected() {
    let (model, corpus) = fixture(tiny_config());
    let mut s = corpus[0].clone();
    s.annotations[0].frame = "Attention".into();
    assert!(model.prepare(&s).is_err());
    let mut s = corpus[0].clone();
    s.annotations[0].elements[0].label = "Figure".into();
    assert!(model.prepare(&s).is_err());
    let mut s = corpus[0].clone();
    s.annotations[0].lexical_unit = "nope.v".into();
    assert!(model.prepare(&s).is_err());
    let mut s = corpus[0].clone();
    s.pos_tags[0] = "XYZ".into();
    assert!(matches!(model.prepare(&s), Err(Error::Unknown { .. })));
}

#[test]
fn pipeline_modes() {
    let (mut model, corpus) = fixture(tiny_config());
    let gold = model.predict(&corpus[0], PipelineMode::GoldFrames).unwrap();
    assert_eq!(gold.targets, corpus[0].gold_targets());
    assert_eq!(gold.annotations.len(), 2);
    for (p, g) in gold.annotations.iter().zip(&corpus[0].annotations) {
        assert_eq!(p.frame, g.frame);
        assert_eq!(p.target_indices, g.target_indices);
    }
    let gt = model.predict(&corpus[0], PipelineMode::GoldTargets).unwrap();
    for p in &gt.annotations {
        assert!(model.ontology.frames_of(&p.lexical_unit).unwrap().contains(&p.frame));
        let fes = model.ontology.elements_of(&p.frame).unwrap();
        assert!(p.elements.iter().all(|e| fes.contains(&e.label)));
    }

    // A large O bias makes target identification return nothing.
    let bias = model.params.ti_proj.bias.unwrap();
    model.store.get_mut(bias).set(0, TargetTag::O.id(), 100.0);
    let none = model.predict(&corpus[0], PipelineMode::Full).unwrap();
    assert!(none.targets.is_empty());
    assert!(none.annotations.is_empty());
    // Gold-target modes never consult target identification.
    let still = model.predict(&corpus[0], PipelineMode::GoldTargets).unwrap();
    assert_eq!(still.annotations.len(), 2);

    // Every token tagged B: only "had" and "attention" map to known units.
    model.store.get_mut(bias).set(0, TargetTag::O.id(), 0.0);
    model.store.get_mut(bias).set(0, TargetTag::B.id(), 100.0);
    let all = model.predict(&corpus[0], PipelineMode::Full).unwrap();
    assert_eq!(all.targets.len(), 4);
    assert_eq!(all.dropped_targets, 2);
    let lus: Vec<&str> = all.annotations.iter().map(|a| a.lexical_unit.as_str()).collect();
    assert_eq!(lus, ["had.v", "attention.n"]);
}

#[test]
fn l2_gradient_matches_penalty() {
    let (model, _) = fixture(Config { l2_transitions: 0.3, l2_bilinear: 0.7, ..tiny_config() });
    let mut grads = crate::autodiff::ParamGrads::zeros_like(&model.store);
    model.add_l2_gradient(&mut grads);
    let base = model.l2_penalty();
    let eps = 1e-6;
    for (id, g) in grads.iter() {
        for k in [0, model.store.get(id).len() - 1] {
            let mut m = model.clone();
            m.store.get_mut(id).data_mut()[k] += eps;
            let fd = (m.l2_penalty() - base) / eps;
            assert!((fd - g.data()[k]).abs() < 1e-4, "{}", model.store.name(id));
        }
    }
}

#[test]
fn full_model_gradients() {
    let (mut model, corpus) = fixture(tiny_config());
    // Nonzero biases keep relu units away from their kink.
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.name.ends_with(".bias")).map(|(id, _)| id).collect();
    for id in ids {
        for (i, v) in model.store.get_mut(id).data_mut().iter_mut().enumerate() {
            *v += 0.3 + 0.01 * i as f64;
        }
    }
    let batch: Vec<Prepared> = corpus.iter().map(|s| model.prepare(s).unwrap()).collect();
    for task in [Task::Ti, Task::Fi, Task::Srl, Task::Joint] {
        let report = grad_check(
            &model.store,
            |t| model.batch_loss(t, &batch, task),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{task}: {:?}", report.worst());
    }
}

#[test]
fn checkpoint_round_trip() {
    let (mut model, corpus) = fixture(tiny_config());
    let id = model.params.ti_crf.transitions;
    model.store.get_mut(id).set(0, 1, 0.1 + 0.2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.vocab, model.vocab);
    assert_eq!(back.ontology, model.ontology);
    for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    let p1 = model.predict(&corpus[0], PipelineMode::GoldTargets).unwrap();
    let p2 = back.predict(&corpus[0], PipelineMode::GoldTargets).unwrap();
    assert_eq!(p1, p2);

    std::fs::write(&path, "{}").unwrap();
    assert!(matches!(Model::load(&path), Err(Error::Checkpoint(_))));
}
