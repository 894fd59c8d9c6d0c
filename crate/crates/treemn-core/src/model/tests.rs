use super::*;
use crate::rng::substream;
use crate::tree::{label_leaves, parse_bracketed, propagate_vtype, ConcretenessLexicon, NodeKind};
use rand::rngs::StdRng;
use rand::Rng;

fn rand_vec(rng: &mut StdRng, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-s..s)).collect()
}

fn small_dims(k: usize) -> ModelDims {
    ModelDims {
        hidden: 4,
        video_dim: 3,
        embed_dim: 2,
        num_answers: k,
    }
}

fn vocab(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("ans{i}")).collect()
}

fn small_model(variant: Variant, seed: u64) -> ModelParams {
    let mut rng = substream(seed, "model-test");
    ModelParams::new(variant, small_dims(3), vocab(3), &mut rng).unwrap()
}

fn sample_video(rng: &mut StdRng, t: usize, d: usize) -> Tensor {
    Tensor::matrix(t, d, rand_vec(rng, t * d, 1.0)).unwrap()
}

struct Question {
    tree: Option<TreeNode>,
    words: Vec<String>,
    vecs: Vec<Vec<f64>>,
}

impl Question {
    fn input<'a>(&'a self, video: &'a Tensor) -> SampleInput<'a> {
        SampleInput {
            tree: self.tree.as_ref(),
            token_words: &self.words,
            token_vecs: &self.vecs,
            video,
        }
    }
}

/// Parses + labels a tree and draws a random embedding per leaf. Labels
/// come from a lexicon where `vis*` words rate high and all else defaults
/// verbal.
fn question(src: &str, rng: &mut StdRng, embed_dim: usize) -> Question {
    let mut tree = parse_bracketed(src).unwrap();
    let mut ratings = std::collections::HashMap::new();
    for tok in tree.leaf_tokens() {
        if tok.starts_with("vis") {
            ratings.insert(tok.to_string(), 0.9);
        }
    }
    let lex = ConcretenessLexicon::with_builtin_function_words(ratings);
    label_leaves(&mut tree, &lex);
    propagate_vtype(&mut tree).unwrap();
    let words: Vec<String> = tree.leaf_tokens().iter().map(|s| s.to_string()).collect();
    let vecs: Vec<Vec<f64>> = words.iter().map(|_| rand_vec(rng, embed_dim, 1.0)).collect();
    Question {
        tree: Some(tree),
        words,
        vecs,
    }
}

// ---------------------------------------------------------------- per-op

mod naive {
    //! Plain-loop oracles, independent of the tape.

    pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        (0..rows)
            .map(|i| w[i * cols..(i + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    pub fn tanh(a: &[f64]) -> Vec<f64> {
        a.iter().map(|x| x.tanh()).collect()
    }

    pub fn softmax(a: &[f64]) -> Vec<f64> {
        crate::tensor::softmax_slice(a)
    }

    pub fn sigmoid(a: &[f64]) -> Vec<f64> {
        a.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
    }

    /// tanh(W_Q h + W_V v_t + b_V) scored by w_p, softmaxed, mixed.
    pub fn attend(
        params: &crate::attention::AttentionParams,
        h: &[f64],
        video: &crate::tensor::Tensor,
    ) -> (Vec<f64>, Vec<f64>) {
        let n = h.len();
        let (t, m) = (video.shape()[0], video.shape()[1]);
        let qh = matvec(params.w_q.data(), n, n, h);
        let mut scores = Vec::with_capacity(t);
        for ti in 0..t {
            let vt = &video.data()[ti * m..(ti + 1) * m];
            let wv = matvec(params.w_v.data(), n, m, vt);
            let a: Vec<f64> = (0..n)
                .map(|k| (qh[k] + wv[k] + params.b_v.data()[k]).tanh())
                .collect();
            scores.push(a.iter().zip(params.w_p.data()).map(|(x, y)| x * y).sum());
        }
        let p = softmax(&scores);
        let att: Vec<f64> = (0..m)
            .map(|k| (0..t).map(|ti| p[ti] * video.data()[ti * m + k]).sum())
            .collect();
        (att, p)
    }

    pub fn lstm_step(
        dir: &crate::video::LstmDir,
        x: &[f64],
        h: &[f64],
        c: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let hidden = dir.hidden();
        let z: Vec<f64> = x.iter().chain(h.iter()).copied().collect();
        let cols = z.len();
        let gate = |w: &crate::tensor::Tensor, b: &crate::tensor::Tensor| {
            add(&matvec(w.data(), hidden, cols, &z), b.data())
        };
        let i = sigmoid(&gate(&dir.w_i, &dir.b_i));
        let f = sigmoid(&gate(&dir.w_f, &dir.b_f));
        let o = sigmoid(&gate(&dir.w_o, &dir.b_o));
        let g = tanh(&gate(&dir.w_g, &dir.b_g));
        let c: Vec<f64> = (0..hidden).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
        let h: Vec<f64> = (0..hidden).map(|k| o[k] * c[k].tanh()).collect();
        (h, c)
    }

    pub fn run_lstm(dir: &crate::video::LstmDir, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let hidden = dir.hidden();
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let mut out = Vec::new();
        for x in inputs {
            let (nh, nc) = lstm_step(dir, x, &h, &c);
            h = nh;
            c = nc;
            out.push(h.clone());
        }
        out
    }

    pub fn encode_video(
        params: &crate::video::LstmParams,
        video: &crate::tensor::Tensor,
    ) -> Vec<Vec<f64>> {
        let (t, d) = (video.shape()[0], video.shape()[1]);
        let rows: Vec<Vec<f64>> = (0..t).map(|i| video.data()[i * d..(i + 1) * d].to_vec()).collect();
        let fwd = run_lstm(&params.fwd, &rows);
        let rev: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let bwd_rev = run_lstm(&params.bwd, &rev);
        (0..t)
            .map(|ti| {
                let mut row = fwd[ti].clone();
                row.extend_from_slice(&bwd_rev[t - 1 - ti]);
                row
            })
            .collect()
    }

    pub fn project(proj: &crate::model::Affine, q: &[f64]) -> Vec<f64> {
        let rows = proj.b.numel();
        add(&matvec(proj.w.data(), rows, q.len(), q), proj.b.data())
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?}\nvs\n{b:?}");
    }
}

#[test]
fn leaf_state_zero_transform_is_identity_residual() {
    // W_A = 0, b_A = 0 -> h = q
    let mut rng = substream(41, "leaf-zero");
    let n = 3;
    let att_params = AttentionParams::init(n, n, &mut rng);
    let leaf = Affine::zeros(n, n);
    let q_data = rand_vec(&mut rng, n, 1.0);
    let video = sample_video(&mut rng, 2, n);

    let mut tape = Tape::new();
    let att = att_params.register(&mut tape);
    let lh = leaf.register(&mut tape);
    let q = tape.vector_input(&q_data);
    let v = tape.input(video.shape(), video.data()).unwrap();
    let (h, _) = leaf_state_treemn(&mut tape, q, v, lh, &att).unwrap();
    close(tape.value(h), &q_data, 0.0);
}

#[test]
fn leaf_state_single_frame_identity_transform() {
    // T = 1 video, W_A = I, b_A = 0 -> h = v_1 + q
    let mut rng = substream(42, "leaf-t1");
    let n = 3;
    let att_params = AttentionParams::init(n, n, &mut rng);
    let mut leaf = Affine::zeros(n, n);
    for i in 0..n {
        leaf.w.data_mut()[i * n + i] = 1.0;
    }
    let q_data = rand_vec(&mut rng, n, 1.0);
    let video = sample_video(&mut rng, 1, n);

    let mut tape = Tape::new();
    let att = att_params.register(&mut tape);
    let lh = leaf.register(&mut tape);
    let q = tape.vector_input(&q_data);
    let v = tape.input(video.shape(), video.data()).unwrap();
    let (h, _) = leaf_state_treemn(&mut tape, q, v, lh, &att).unwrap();
    let expect: Vec<f64> = video.data().iter().zip(&q_data).map(|(a, b)| a + b).collect();
    close(tape.value(h), &expect, 1e-15);
}

#[test]
fn leaf_states_visual_equals_treemn_and_match_oracle() {
    let mut rng = substream(43, "leaf-oracle");
    let n = 4;
    let att_params = AttentionParams::init(n, n, &mut rng);
    let leaf = Affine::init(n, n, &mut rng);
    let q_data = rand_vec(&mut rng, n, 1.0);
    let video = sample_video(&mut rng, 3, n);

    let run = |f: &dyn Fn(&mut Tape, Value, Value, AffineHandles, &AttentionHandles) -> Result<(Value, Value), TensorError>| {
        let mut tape = Tape::new();
        let att = att_params.register(&mut tape);
        let lh = leaf.register(&mut tape);
        let q = tape.vector_input(&q_data);
        let v = tape.input(video.shape(), video.data()).unwrap();
        let (h, _) = f(&mut tape, q, v, lh, &att).unwrap();
        tape.value(h).to_vec()
    };
    let h1 = run(&leaf_state_treemn);
    let h2 = run(&leaf_state_visual);
    assert_eq!(h1, h2); // same formula, bitwise

    // composition oracle: attend -> affine -> residual add
    let (att_vec, _) = naive::attend(&att_params, &q_data, &video);
    let expect = naive::add(
        &naive::add(&naive::matvec(leaf.w.data(), n, n, &att_vec), leaf.b.data()),
        &q_data,
    );
    close(&h1, &expect, 1e-12);
}

#[test]
fn leaf_state_verbal_ignores_video_entirely() {
    let mut rng = substream(44, "leaf-verbal");
    let n = 3;
    let leaf = Affine::init(n, n, &mut rng);
    let q_data = rand_vec(&mut rng, n, 1.0);

    let mut tape = Tape::new();
    let lh = leaf.register(&mut tape);
    let q = tape.vector_input(&q_data);
    let h = leaf_state_verbal(&mut tape, q, lh).unwrap();
    let expect = naive::add(&naive::matvec(leaf.w.data(), n, n, &q_data), leaf.b.data());
    close(tape.value(h), &expect, 1e-12);

    // identity transform: h = q
    let mut ident = Affine::zeros(n, n);
    for i in 0..n {
        ident.w.data_mut()[i * n + i] = 1.0;
    }
    let mut tape = Tape::new();
    let lh = ident.register(&mut tape);
    let q = tape.vector_input(&q_data);
    let h = leaf_state_verbal(&mut tape, q, lh).unwrap();
    close(tape.value(h), &q_data, 0.0);
}

#[test]
fn merge_homogeneous_cases() {
    let mut rng = substream(45, "merge-hom");
    let n = 3;

    // single child, identity weights -> h = o_child
    let mut ident = Affine::zeros(n, n);
    for i in 0..n {
        ident.w.data_mut()[i * n + i] = 1.0;
    }
    let o_data = rand_vec(&mut rng, n, 1.0);
    let mut tape = Tape::new();
    let mh = ident.register(&mut tape);
    let o = tape.vector_input(&o_data);
    let h = merge_children_homogeneous(&mut tape, &[o], mh).unwrap();
    close(tape.value(h), &o_data, 0.0);

    // two equal children -> 2 W o + b
    let merge = Affine::init(n, n, &mut rng);
    let mut tape = Tape::new();
    let mh = merge.register(&mut tape);
    let o = tape.vector_input(&o_data);
    let h = merge_children_homogeneous(&mut tape, &[o, o], mh).unwrap();
    let wo = naive::matvec(merge.w.data(), n, n, &o_data);
    let expect: Vec<f64> = (0..n).map(|k| 2.0 * wo[k] + merge.b.data()[k]).collect();
    close(tape.value(h), &expect, 1e-12);

    // three random children vs summation oracle
    let kids: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, n, 1.0)).collect();
    let mut tape = Tape::new();
    let mh = merge.register(&mut tape);
    let vals: Vec<Value> = kids.iter().map(|k| tape.vector_input(k)).collect();
    let h = merge_children_homogeneous(&mut tape, &vals, mh).unwrap();
    let mut expect = merge.b.data().to_vec();
    for k in &kids {
        expect = naive::add(&expect, &naive::matvec(merge.w.data(), n, n, k));
    }
    close(tape.value(h), &expect, 1e-12);
}

#[test]
fn merge_heterogeneous_cases() {
    let mut rng = substream(46, "merge-het");
    let n = 3;
    let w_vis = Tensor::matrix(n, n, rand_vec(&mut rng, n * n, 1.0)).unwrap();
    let w_verb = Tensor::matrix(n, n, rand_vec(&mut rng, n * n, 1.0)).unwrap();
    let bias = Tensor::vector(rand_vec(&mut rng, n, 1.0));
    let kids: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, n, 1.0)).collect();

    // all children visual with W_B1 = W_B: equals homogeneous merge
    let mut tape = Tape::new();
    let wv = tape.param(&w_vis);
    let wb = tape.param(&w_verb);
    let b = tape.param(&bias);
    let vals: Vec<Value> = kids.iter().map(|k| tape.vector_input(k)).collect();
    let het = merge_children_heterogeneous(&mut tape, &vals, &[], wv, wb, b).unwrap();
    let hom = merge_children_homogeneous(&mut tape, &vals, AffineHandles { w: wv, b }).unwrap();
    assert_eq!(tape.value(het), tape.value(hom));

    // empty visual set -> pure verbal sum + bias
    let mut tape = Tape::new();
    let wv = tape.param(&w_vis);
    let wb = tape.param(&w_verb);
    let b = tape.param(&bias);
    let vals: Vec<Value> = kids.iter().map(|k| tape.vector_input(k)).collect();
    let h = merge_children_heterogeneous(&mut tape, &[], &vals, wv, wb, b).unwrap();
    let mut expect = bias.data().to_vec();
    for k in &kids {
        expect = naive::add(&expect, &naive::matvec(w_verb.data(), n, n, k));
    }
    close(tape.value(h), &expect, 1e-12);

    // mixed 2 visual + 1 verbal vs summation oracle
    let mut tape = Tape::new();
    let wv = tape.param(&w_vis);
    let wb = tape.param(&w_verb);
    let b = tape.param(&bias);
    let vals: Vec<Value> = kids.iter().map(|k| tape.vector_input(k)).collect();
    let h =
        merge_children_heterogeneous(&mut tape, &vals[0..2], &vals[2..3], wv, wb, b).unwrap();
    let mut expect = bias.data().to_vec();
    for k in &kids[0..2] {
        expect = naive::add(&expect, &naive::matvec(w_vis.data(), n, n, k));
    }
    expect = naive::add(&expect, &naive::matvec(w_verb.data(), n, n, &kids[2]));
    close(tape.value(h), &expect, 1e-12);
}

// ------------------------------------------------------------- forwards

#[test]
fn depth_one_tree_matches_composed_oracle() {
    // Root directly over one visual leaf, TreeMN.
    let mut rng = substream(47, "fwd-depth1");
    let model = small_model(Variant::TreeMn, 99);
    let q = question("(ROOT visdog)", &mut rng, model.dims.embed_dim);
    let video = sample_video(&mut rng, 3, model.dims.video_dim);
    let dist = model.forward(&q.input(&video)).unwrap();

    // oracle: encode -> project -> leaf -> tanh -> merge(root) -> classifier
    let enc_rows = naive::encode_video(&model.encoder, &video);
    let enc = Tensor::matrix(3, model.dims.hidden, enc_rows.concat()).unwrap();
    let qv = naive::project(&model.projection, &q.vecs[0]);
    let (att_vec, _) = naive::attend(&model.attention, &qv, &enc);
    let HeadParams::TreeMn { leaf, merge } = &model.head else {
        unreachable!()
    };
    let n = model.dims.hidden;
    let h_leaf = naive::add(
        &naive::add(&naive::matvec(leaf.w.data(), n, n, &att_vec), leaf.b.data()),
        &qv,
    );
    let o_leaf = naive::tanh(&h_leaf);
    let h_root = naive::add(&naive::matvec(merge.w.data(), n, n, &o_leaf), merge.b.data());
    let logits = naive::add(
        &naive::matvec(model.classifier.w.data(), model.dims.num_answers, n, &h_root),
        model.classifier.b.data(),
    );
    let expect = naive::softmax(&logits);
    close(&dist.probs, &expect, 1e-12);
}

#[test]
fn all_verbal_question_is_video_invariant_bitwise() {
    let mut rng = substream(48, "fwd-verbal");
    for variant in [Variant::HTreeMnNoh, Variant::HTreeMn] {
        let model = small_model(variant, 7);
        let q = question("(ROOT (SQ (VBZ is) (DT the)))", &mut rng, model.dims.embed_dim);
        assert_eq!(q.tree.as_ref().unwrap().vtype, Some(VType::Verbal));
        let v1 = sample_video(&mut rng, 4, model.dims.video_dim);
        let v2 = sample_video(&mut rng, 4, model.dims.video_dim);
        let d1 = model.forward(&q.input(&v1)).unwrap();
        let d2 = model.forward(&q.input(&v2)).unwrap();
        assert_eq!(d1.probs, d2.probs); // bitwise
    }
}

#[test]
fn htreemn_equals_noh_on_all_verbal_trees() {
    let mut rng = substream(49, "fwd-reduction");
    let noh = small_model(Variant::HTreeMnNoh, 11);
    let mut full = noh.clone();
    full.variant = Variant::HTreeMn;
    if let HeadParams::Heterogeneous { intermediate, .. } = &mut full.head {
        *intermediate = Some(Affine::init(4, 4, &mut rng));
    }
    let q = question("(ROOT (VP (VBZ is) (VP (DT a) (DT the))))", &mut rng, 2);
    let video = sample_video(&mut rng, 3, 3);
    let d1 = noh.forward(&q.input(&video)).unwrap();
    let d2 = full.forward(&q.input(&video)).unwrap();
    assert_eq!(d1.probs, d2.probs);
}

fn random_labeled_tree(rng: &mut StdRng, max_nodes: usize) -> TreeNode {
    fn build(rng: &mut StdRng, budget: &mut usize, depth: usize, next_tok: &mut usize) -> TreeNode {
        *budget = budget.saturating_sub(1);
        if depth > 3 || *budget == 0 || rng.gen_bool(0.35) {
            let visual = rng.gen_bool(0.5);
            let idx = *next_tok;
            *next_tok += 1;
            TreeNode {
                kind: NodeKind::Leaf,
                label: format!("w{idx}"),
                children: Vec::new(),
                vtype: Some(if visual { VType::Visual } else { VType::Verbal }),
                token_index: Some(idx),
            }
        } else {
            let n = rng.gen_range(1..=3usize.min((*budget).max(1)));
            let children: Vec<TreeNode> = (0..n)
                .map(|_| build(rng, budget, depth + 1, next_tok))
                .collect();
            TreeNode {
                kind: NodeKind::Intermediate,
                label: "X".into(),
                children,
                vtype: None,
                token_index: None,
            }
        }
    }
    let mut budget = max_nodes;
    let mut next_tok = 0;
    let mut root = build(rng, &mut budget, 0, &mut next_tok);
    if root.is_leaf() {
        // wrap singleton leaves so there is always a root above
        root = TreeNode {
            kind: NodeKind::Intermediate,
            label: "X".into(),
            children: vec![root],
            vtype: None,
            token_index: None,
        };
    }
    root.kind = NodeKind::Root;
    propagate_vtype(&mut root).unwrap();
    root
}

#[test]
fn tied_parameters_reduce_noh_to_treemn() {
    let mut rng = substream(50, "fwd-tied");
    for round in 0..50 {
        let treemn = small_model(Variant::TreeMn, 1000 + round);
        let mut het = treemn.clone();
        het.variant = Variant::HTreeMnNoh;
        let HeadParams::TreeMn { leaf, merge } = &treemn.head else {
            unreachable!()
        };
        het.head = HeadParams::Heterogeneous {
            leaf_visual: leaf.clone(),
            leaf_verbal: Affine::init(4, 4, &mut rng), // unused: all labels visual
            merge_visual_w: merge.w.clone(),
            merge_verbal_w: merge.w.clone(),
            merge_b: merge.b.clone(),
            intermediate: None,
        };

        let mut tree = random_labeled_tree(&mut rng, 10);
        // force all labels visual
        fn all_visual(n: &mut TreeNode) {
            n.vtype = Some(VType::Visual);
            for c in &mut n.children {
                all_visual(c);
            }
        }
        all_visual(&mut tree);
        let words: Vec<String> = tree.leaf_tokens().iter().map(|s| s.to_string()).collect();
        let vecs: Vec<Vec<f64>> = words.iter().map(|_| rand_vec(&mut rng, 2, 1.0)).collect();
        let video = sample_video(&mut rng, 3, 3);
        let input = SampleInput {
            tree: Some(&tree),
            token_words: &words,
            token_vecs: &vecs,
            video: &video,
        };
        let d1 = treemn.forward(&input).unwrap();
        let d2 = het.forward(&input).unwrap();
        for (a, b) in d1.probs.iter().zip(&d2.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_call_counts_match_closed_form() {
    let mut rng = substream(51, "fwd-counts");
    for round in 0..100 {
        let tree = random_labeled_tree(&mut rng, 12);
        let words: Vec<String> = tree.leaf_tokens().iter().map(|s| s.to_string()).collect();
        let vecs: Vec<Vec<f64>> = words.iter().map(|_| rand_vec(&mut rng, 2, 1.0)).collect();
        let video = sample_video(&mut rng, 2, 3);
        let input = SampleInput {
            tree: Some(&tree),
            token_words: &words,
            token_vecs: &vecs,
            video: &video,
        };

        let leaves = tree.leaves().len();
        let visual_leaves = tree
            .leaves()
            .iter()
            .filter(|l| l.vtype == Some(VType::Visual))
            .count();
        fn visual_internal(n: &TreeNode) -> usize {
            let own = usize::from(!n.is_leaf() && n.vtype == Some(VType::Visual));
            own + n.children.iter().map(visual_internal).sum::<usize>()
        }
        let expected = [
            (Variant::TreeMn, leaves),
            (Variant::HTreeMnNoh, visual_leaves),
            (Variant::HTreeMn, visual_leaves + visual_internal(&tree)),
        ];
        for (variant, count) in expected {
            let model = small_model(variant, 2000 + round);
            let mut tape = Tape::new();
            let fwd = model.forward_traced(&mut tape, &input).unwrap();
            assert_eq!(fwd.attention_calls, count, "{variant} round {round}");
            assert_eq!(fwd.trace_rows(&tape).len(), count);
        }
    }
}

#[test]
fn all_variants_emit_valid_distributions() {
    let mut rng = substream(52, "fwd-dist");
    let q = question(
        "(ROOT (SQ (WHNP (WP who)) (VP (VBZ is) (VP (VBG visrunning) (NP (DT the) (NN visdog))))))",
        &mut rng,
        2,
    );
    let video = sample_video(&mut rng, 4, 3);
    for variant in Variant::ALL {
        let model = small_model(variant, 77);
        let dist = model.forward(&q.input(&video)).unwrap();
        assert_eq!(dist.probs.len(), 3);
        assert!(dist.probs.iter().all(|&p| p >= 0.0));
        assert!((dist.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn argmax_invariant_under_classifier_logit_shift() {
    let mut rng = substream(53, "fwd-shift");
    let q = question("(ROOT (NP (DT the) (NN visdog)))", &mut rng, 2);
    let video = sample_video(&mut rng, 3, 3);
    let model = small_model(Variant::HTreeMn, 5);
    let mut shifted = model.clone();
    shifted
        .classifier
        .b
        .data_mut()
        .iter_mut()
        .for_each(|x| *x += 3.7);
    let d1 = model.forward(&q.input(&video)).unwrap();
    let d2 = shifted.forward(&q.input(&video)).unwrap();
    assert_eq!(d1.argmax(), d2.argmax());
}

#[test]
fn simple_forward_matches_step_oracle() {
    let mut rng = substream(54, "fwd-simple");
    let model = small_model(Variant::Simple, 13);
    let q = question("(ROOT (NP (DT the) (NN visdog) (NN viscat)))", &mut rng, 2);
    let video = sample_video(&mut rng, 3, 3);
    let dist = model.forward(&q.input(&video)).unwrap();

    let HeadParams::Simple { encoder } = &model.head else {
        unreachable!()
    };
    let inputs: Vec<Vec<f64>> = q.vecs.iter().map(|v| naive::project(&model.projection, v)).collect();
    let states = naive::run_lstm(encoder, &inputs);
    let h_q = states.last().unwrap().clone();
    let enc_rows = naive::encode_video(&model.encoder, &video);
    let enc = Tensor::matrix(3, model.dims.hidden, enc_rows.concat()).unwrap();
    let (att, _) = naive::attend(&model.attention, &h_q, &enc);
    let joint: Vec<f64> = h_q.iter().chain(att.iter()).copied().collect();
    let logits = naive::add(
        &naive::matvec(model.classifier.w.data(), 3, 2 * model.dims.hidden, &joint),
        model.classifier.b.data(),
    );
    close(&dist.probs, &naive::softmax(&logits), 1e-12);
}

#[test]
fn simple_with_zero_question_encoder_attends_with_zero_query() {
    let mut rng = substream(55, "fwd-simple-zero");
    let mut model = small_model(Variant::Simple, 14);
    let HeadParams::Simple { encoder } = &mut model.head else {
        unreachable!()
    };
    *encoder = LstmDir::zeros(model.dims.hidden, model.dims.hidden);
    // zero the query and frame transforms: constant scores, uniform weights
    model.attention.w_q = Tensor::zeros(&[4, 4]);
    model.attention.w_v = Tensor::zeros(&[4, 4]);
    let q = question("(ROOT (NN visdog))", &mut rng, 2);
    let video = sample_video(&mut rng, 5, 3);
    let dist = model.forward_with_trace(&q.input(&video)).unwrap();
    let trace = dist.attention_trace.unwrap();
    assert_eq!(trace.len(), 1);
    for w in &trace[0].weights {
        assert!((w - 0.2).abs() < 1e-12);
    }
}

#[test]
fn esa_forward_matches_step_oracle() {
    let mut rng = substream(56, "fwd-esa");
    let model = small_model(Variant::Esa, 15);
    let q = question("(ROOT (NP (NN visdog) (NN viscat)))", &mut rng, 2);
    let video = sample_video(&mut rng, 3, 3);
    let dist = model.forward(&q.input(&video)).unwrap();

    let HeadParams::Esa { layer1, layer2 } = &model.head else {
        unreachable!()
    };
    let n = model.dims.hidden;
    let inputs: Vec<Vec<f64>> = q.vecs.iter().map(|v| naive::project(&model.projection, v)).collect();
    let states1 = naive::run_lstm(layer1, &inputs);
    let enc_rows = naive::encode_video(&model.encoder, &video);
    let enc = Tensor::matrix(3, n, enc_rows.concat()).unwrap();
    let layer2_in: Vec<Vec<f64>> = states1
        .iter()
        .map(|o1| {
            let (att, _) = naive::attend(&model.attention, o1, &enc);
            o1.iter().chain(att.iter()).copied().collect()
        })
        .collect();
    let states2 = naive::run_lstm(layer2, &layer2_in);
    let joint: Vec<f64> = states1
        .last()
        .unwrap()
        .iter()
        .chain(states2.last().unwrap().iter())
        .copied()
        .collect();
    let logits = naive::add(
        &naive::matvec(model.classifier.w.data(), 3, 2 * n, &joint),
        model.classifier.b.data(),
    );
    close(&dist.probs, &naive::softmax(&logits), 1e-12);
}

#[test]
fn esa_one_token_question_attends_once() {
    let mut rng = substream(57, "fwd-esa-one");
    let model = small_model(Variant::Esa, 16);
    let q = question("(ROOT (NN visdog))", &mut rng, 2);
    let video = sample_video(&mut rng, 3, 3);
    let mut tape = Tape::new();
    let fwd = model.forward_traced(&mut tape, &q.input(&video)).unwrap();
    assert_eq!(fwd.attention_calls, 1);
}

#[test]
fn esa_with_severed_attention_half_is_video_invariant() {
    let mut rng = substream(58, "fwd-esa-severed");
    let mut model = small_model(Variant::Esa, 17);
    let n = model.dims.hidden;
    // zero the layer-2 input weights on the attention half of concat(o1, att)
    let HeadParams::Esa { layer2, .. } = &mut model.head else {
        unreachable!()
    };
    let cols = 2 * n + n; // input 2n + recurrent n
    for w in [&mut layer2.w_i, &mut layer2.w_f, &mut layer2.w_o, &mut layer2.w_g] {
        for r in 0..n {
            for c in n..2 * n {
                w.data_mut()[r * cols + c] = 0.0;
            }
        }
    }
    let q = question("(ROOT (NP (NN visdog) (NN viscat)))", &mut rng, 2);
    let v1 = sample_video(&mut rng, 3, 3);
    let v2 = sample_video(&mut rng, 3, 3);
    let d1 = model.forward(&q.input(&v1)).unwrap();
    let d2 = model.forward(&q.input(&v2)).unwrap();
    close(&d1.probs, &d2.probs, 1e-12);
}

// ----------------------------------------------------------------- errors

#[test]
fn error_paths() {
    let mut rng = substream(59, "fwd-errors");
    let video = sample_video(&mut rng, 2, 3);

    // tree variant without a tree
    let model = small_model(Variant::TreeMn, 20);
    let words = vec!["visdog".to_string()];
    let vecs = vec![rand_vec(&mut rng, 2, 1.0)];
    let input = SampleInput {
        tree: None,
        token_words: &words,
        token_vecs: &vecs,
        video: &video,
    };
    assert!(matches!(
        model.forward(&input),
        Err(ModelError::VariantMismatch(_))
    ));

    // unlabeled tree for a heterogeneous variant
    let model = small_model(Variant::HTreeMn, 21);
    let tree = parse_bracketed("(ROOT (NN dog))").unwrap();
    let input = SampleInput {
        tree: Some(&tree),
        token_words: &words,
        token_vecs: &vecs,
        video: &video,
    };
    assert!(matches!(
        model.forward(&input),
        Err(ModelError::UnlabeledNode(_))
    ));

    // leaf/token mismatch
    let mut tree = parse_bracketed("(ROOT (NP (DT the) (NN dog)))").unwrap();
    let lex = ConcretenessLexicon::with_builtin_function_words(Default::default());
    label_leaves(&mut tree, &lex);
    propagate_vtype(&mut tree).unwrap();
    let input = SampleInput {
        tree: Some(&tree),
        token_words: &words,
        token_vecs: &vecs,
        video: &video,
    };
    assert!(matches!(
        model.forward(&input),
        Err(ModelError::TokenMismatch { leaves: 2, tokens: 1 })
    ));

    // empty question for chains
    let model = small_model(Variant::Esa, 22);
    let input = SampleInput {
        tree: None,
        token_words: &[],
        token_vecs: &[],
        video: &video,
    };
    assert!(matches!(model.forward(&input), Err(ModelError::EmptyQuestion)));
}

// ------------------------------------------------------------- checkpoint

#[test]
fn checkpoint_round_trip_all_variants() {
    let dir = std::env::temp_dir().join("treemn_ckpt_test");
    std::fs::create_dir_all(&dir).unwrap();
    let mut rng = substream(60, "ckpt");
    let q = question("(ROOT (NP (DT the) (NN visdog)))", &mut rng, 2);
    let video = sample_video(&mut rng, 3, 3);
    for variant in Variant::ALL {
        let model = small_model(variant, 30);
        let path = dir.join(format!("{variant}.ckpt"));
        model.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(model, loaded);
        let d1 = model.forward(&q.input(&video)).unwrap();
        let d2 = loaded.forward(&q.input(&video)).unwrap();
        assert_eq!(d1.probs, d2.probs);
    }
}

#[test]
fn checkpoint_rejects_garbage() {
    let dir = std::env::temp_dir().join("treemn_ckpt_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("garbage.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(
        ModelParams::load(&path),
        Err(ModelError::Checkpoint(_))
    ));
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(Variant::parse(v.as_str()), Some(v));
    }
    assert_eq!(Variant::parse("bogus"), None);
}

#[test]
fn traced_params_align_with_visit_names() {
    let mut rng = substream(61, "names");
    let q = question("(ROOT (NP (DT the) (NN visdog)))", &mut rng, 2);
    let video = sample_video(&mut rng, 2, 3);
    for variant in Variant::ALL {
        let model = small_model(variant, 40);
        let mut tape = Tape::new();
        let fwd = model.forward_traced(&mut tape, &q.input(&video)).unwrap();
        let visit_names: std::collections::BTreeSet<String> =
            model.visit().into_iter().map(|(n, _)| n).collect();
        for (name, _) in &fwd.params {
            assert!(visit_names.contains(name), "{variant}: {name} not in visit()");
        }
        // every traced name is unique
        let mut seen = std::collections::BTreeSet::new();
        for (name, _) in &fwd.params {
            assert!(seen.insert(name.clone()), "duplicate {name}");
        }
    }
}
