//! The model variants: tree-structured attention networks and the
//! linear-chain baselines, as forward functions from a question (parse
//! tree or token sequence) plus encoded video to an answer distribution.
//!
//! `TreeMn` attends at every leaf; the heterogeneous variants attend only
//! at visual leaves and transform verbal leaves with a plain affine layer;
//! the full `HTreeMn` additionally re-attends at visual intermediate
//! nodes. `Simple` encodes the question with one LSTM and attends once;
//! `Esa` is the two-layer word-level attention chain baseline.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::rngs::StdRng;

use crate::attention::{attend, AttentionHandles, AttentionParams};
use crate::rng::uniform_init;
use crate::tensor::{softmax_slice, Tape, Tensor, TensorError, Value};
use crate::tree::{TreeNode, VType};
use crate::video::{encode_video, run_lstm, LstmDir, LstmGates, LstmParams, INIT_RANGE};

/// Checkpoint container magic and version.
const CHECKPOINT_MAGIC: &[u8; 4] = b"TMNC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum ModelError {
    Tensor(TensorError),
    /// Tree-variant forward called without a parse tree, or vice versa.
    VariantMismatch(String),
    /// A heterogeneous variant got a tree with unlabeled nodes.
    UnlabeledNode(String),
    /// Parse-tree leaves disagree with the token list.
    TokenMismatch { leaves: usize, tokens: usize },
    EmptyQuestion,
    Checkpoint(String),
    Io(std::io::Error),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::VariantMismatch(msg) => write!(f, "variant mismatch: {msg}"),
            ModelError::UnlabeledNode(label) => {
                write!(f, "node {label:?} has no visual/verbal label")
            }
            ModelError::TokenMismatch { leaves, tokens } => {
                write!(f, "parse has {leaves} leaves but question has {tokens} tokens")
            }
            ModelError::EmptyQuestion => write!(f, "question has no tokens"),
            ModelError::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
            ModelError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e)
    }
}

/// The five model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    TreeMn,
    HTreeMnNoh,
    HTreeMn,
    Simple,
    Esa,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::TreeMn,
        Variant::HTreeMnNoh,
        Variant::HTreeMn,
        Variant::Simple,
        Variant::Esa,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::TreeMn => "treemn",
            Variant::HTreeMnNoh => "htreemn-noh",
            Variant::HTreeMn => "htreemn",
            Variant::Simple => "simple",
            Variant::Esa => "esa",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.iter().copied().find(|v| v.as_str() == s)
    }

    /// Tree variants consume a parse; chain variants consume token order.
    pub fn uses_tree(&self) -> bool {
        matches!(self, Variant::TreeMn | Variant::HTreeMnNoh | Variant::HTreeMn)
    }

    /// Heterogeneous variants require visual/verbal labels on the tree.
    pub fn uses_vtype(&self) -> bool {
        matches!(self, Variant::HTreeMnNoh | Variant::HTreeMn)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Model dimensionalities. Paper-scale values are hidden 1024, video 4096,
/// embeddings 300; the synthetic benchmark uses much smaller ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    /// Hidden width `n`; must be even (two encoder directions).
    pub hidden: usize,
    /// Raw frame feature width.
    pub video_dim: usize,
    /// Raw word embedding width.
    pub embed_dim: usize,
    /// Answer vocabulary size `K`.
    pub num_answers: usize,
}

/// An affine layer's at-rest tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
}

impl Affine {
    pub fn init(rows: usize, cols: usize, rng: &mut StdRng) -> Self {
        Affine {
            w: Tensor::matrix(
                rows,
                cols,
                (0..rows * cols).map(|_| uniform_init(rng, INIT_RANGE)).collect(),
            )
            .expect("init shape"),
            b: Tensor::vector((0..rows).map(|_| uniform_init(rng, INIT_RANGE)).collect()),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Affine {
            w: Tensor::zeros(&[rows, cols]),
            b: Tensor::zeros(&[rows]),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> AffineHandles {
        AffineHandles {
            w: tape.param(&self.w),
            b: tape.param(&self.b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AffineHandles {
    pub w: Value,
    pub b: Value,
}

/// Variant-specific parameters on top of the shared encoder, attention,
/// projection, and classifier.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    /// Homogeneous tree: one leaf transform, one merge transform.
    TreeMn { leaf: Affine, merge: Affine },
    /// Heterogeneous tree: split leaf transforms and split merge weights;
    /// `intermediate` is present only for the hierarchical variant.
    Heterogeneous {
        leaf_visual: Affine,
        leaf_verbal: Affine,
        merge_visual_w: Tensor,
        merge_verbal_w: Tensor,
        merge_b: Tensor,
        intermediate: Option<Affine>,
    },
    /// Whole-question encoder, one attention call.
    Simple { encoder: LstmDir },
    /// Two-layer chain with per-word attention feeding layer 2.
    Esa { layer1: LstmDir, layer2: LstmDir },
}

/// Full parameter set for one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub variant: Variant,
    pub dims: ModelDims,
    pub answer_vocab: Vec<String>,
    pub encoder: LstmParams,
    pub attention: AttentionParams,
    /// Shared projection of raw word vectors into the hidden space.
    pub projection: Affine,
    pub head: HeadParams,
    pub classifier: Affine,
}

impl ModelParams {
    /// Initializes a model. All weights uniform in
    /// [-0.08, 0.08], forget biases 1.0.
    pub fn new(
        variant: Variant,
        dims: ModelDims,
        answer_vocab: Vec<String>,
        rng: &mut StdRng,
    ) -> Result<ModelParams, ModelError> {
        if dims.hidden % 2 != 0 || dims.hidden == 0 {
            return Err(ModelError::Checkpoint(format!(
                "hidden size {} must be positive and even",
                dims.hidden
            )));
        }
        if dims.num_answers < 2 {
            return Err(ModelError::Checkpoint(format!(
                "answer vocabulary size {} must be at least 2",
                dims.num_answers
            )));
        }
        if answer_vocab.len() != dims.num_answers {
            return Err(ModelError::Checkpoint(format!(
                "answer vocabulary has {} entries, dims say {}",
                answer_vocab.len(),
                dims.num_answers
            )));
        }
        let n = dims.hidden;
        let encoder = LstmParams::init(dims.video_dim, n / 2, rng);
        let attention = AttentionParams::init(n, n, rng);
        let projection = Affine::init(n, dims.embed_dim, rng);
        let head = match variant {
            Variant::TreeMn => HeadParams::TreeMn {
                leaf: Affine::init(n, n, rng),
                merge: Affine::init(n, n, rng),
            },
            Variant::HTreeMnNoh | Variant::HTreeMn => HeadParams::Heterogeneous {
                leaf_visual: Affine::init(n, n, rng),
                leaf_verbal: Affine::init(n, n, rng),
                merge_visual_w: rand_matrix(n, n, rng),
                merge_verbal_w: rand_matrix(n, n, rng),
                merge_b: Tensor::vector((0..n).map(|_| uniform_init(rng, INIT_RANGE)).collect()),
                intermediate: match variant {
                    Variant::HTreeMn => Some(Affine::init(n, n, rng)),
                    _ => None,
                },
            },
            Variant::Simple => HeadParams::Simple {
                encoder: LstmDir::init(n, n, rng),
            },
            Variant::Esa => HeadParams::Esa {
                layer1: LstmDir::init(n, n, rng),
                layer2: LstmDir::init(2 * n, n, rng),
            },
        };
        let cls_in = if variant.uses_tree() { n } else { 2 * n };
        let classifier = Affine::init(dims.num_answers, cls_in, rng);
        Ok(ModelParams {
            variant,
            dims,
            answer_vocab,
            encoder,
            attention,
            projection,
            head,
            classifier,
        })
    }

    /// Visits every parameter tensor in a stable order.
    pub fn visit<'a>(&'a self) -> Vec<(String, &'a Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (name, t) in self.encoder.fwd.entries() {
            out.push((format!("enc.fwd.{name}"), t));
        }
        for (name, t) in self.encoder.bwd.entries() {
            out.push((format!("enc.bwd.{name}"), t));
        }
        for (name, t) in self.attention.entries() {
            out.push((format!("att.{name}"), t));
        }
        out.push(("proj.w".into(), &self.projection.w));
        out.push(("proj.b".into(), &self.projection.b));
        match &self.head {
            HeadParams::TreeMn { leaf, merge } => {
                out.push(("leaf.w".into(), &leaf.w));
                out.push(("leaf.b".into(), &leaf.b));
                out.push(("merge.w".into(), &merge.w));
                out.push(("merge.b".into(), &merge.b));
            }
            HeadParams::Heterogeneous {
                leaf_visual,
                leaf_verbal,
                merge_visual_w,
                merge_verbal_w,
                merge_b,
                intermediate,
            } => {
                out.push(("leaf_vis.w".into(), &leaf_visual.w));
                out.push(("leaf_vis.b".into(), &leaf_visual.b));
                out.push(("leaf_verb.w".into(), &leaf_verbal.w));
                out.push(("leaf_verb.b".into(), &leaf_verbal.b));
                out.push(("merge.w_vis".into(), merge_visual_w));
                out.push(("merge.w_verb".into(), merge_verbal_w));
                out.push(("merge.b".into(), merge_b));
                if let Some(inter) = intermediate {
                    out.push(("inter_vis.w".into(), &inter.w));
                    out.push(("inter_vis.b".into(), &inter.b));
                }
            }
            HeadParams::Simple { encoder } => {
                for (name, t) in encoder.entries() {
                    out.push((format!("qenc.{name}"), t));
                }
            }
            HeadParams::Esa { layer1, layer2 } => {
                for (name, t) in layer1.entries() {
                    out.push((format!("l1.{name}"), t));
                }
                for (name, t) in layer2.entries() {
                    out.push((format!("l2.{name}"), t));
                }
            }
        }
        out.push(("cls.w".into(), &self.classifier.w));
        out.push(("cls.b".into(), &self.classifier.b));
        out
    }

    /// Mutable variant of [`ModelParams::visit`], same order.
    pub fn visit_mut<'a>(&'a mut self) -> Vec<(String, &'a mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (name, t) in self.encoder.fwd.entries_mut() {
            out.push((format!("enc.fwd.{name}"), t));
        }
        for (name, t) in self.encoder.bwd.entries_mut() {
            out.push((format!("enc.bwd.{name}"), t));
        }
        for (name, t) in self.attention.entries_mut() {
            out.push((format!("att.{name}"), t));
        }
        out.push(("proj.w".into(), &mut self.projection.w));
        out.push(("proj.b".into(), &mut self.projection.b));
        match &mut self.head {
            HeadParams::TreeMn { leaf, merge } => {
                out.push(("leaf.w".into(), &mut leaf.w));
                out.push(("leaf.b".into(), &mut leaf.b));
                out.push(("merge.w".into(), &mut merge.w));
                out.push(("merge.b".into(), &mut merge.b));
            }
            HeadParams::Heterogeneous {
                leaf_visual,
                leaf_verbal,
                merge_visual_w,
                merge_verbal_w,
                merge_b,
                intermediate,
            } => {
                out.push(("leaf_vis.w".into(), &mut leaf_visual.w));
                out.push(("leaf_vis.b".into(), &mut leaf_visual.b));
                out.push(("leaf_verb.w".into(), &mut leaf_verbal.w));
                out.push(("leaf_verb.b".into(), &mut leaf_verbal.b));
                out.push(("merge.w_vis".into(), merge_visual_w));
                out.push(("merge.w_verb".into(), merge_verbal_w));
                out.push(("merge.b".into(), merge_b));
                if let Some(inter) = intermediate {
                    out.push(("inter_vis.w".into(), &mut inter.w));
                    out.push(("inter_vis.b".into(), &mut inter.b));
                }
            }
            HeadParams::Simple { encoder } => {
                for (name, t) in encoder.entries_mut() {
                    out.push((format!("qenc.{name}"), t));
                }
            }
            HeadParams::Esa { layer1, layer2 } => {
                for (name, t) in layer1.entries_mut() {
                    out.push((format!("l1.{name}"), t));
                }
                for (name, t) in layer2.entries_mut() {
                    out.push((format!("l2.{name}"), t));
                }
            }
        }
        out.push(("cls.w".into(), &mut self.classifier.w));
        out.push(("cls.b".into(), &mut self.classifier.b));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.visit().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn rand_matrix(rows: usize, cols: usize, rng: &mut StdRng) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| uniform_init(rng, INIT_RANGE)).collect(),
    )
    .expect("init shape")
}

/// One question/video pair ready for a forward pass. Token vectors are the
/// raw (unprojected) word embeddings, aligned with `token_words`.
pub struct SampleInput<'a> {
    pub tree: Option<&'a TreeNode>,
    pub token_words: &'a [String],
    pub token_vecs: &'a [Vec<f64>],
    /// Raw frame features `[T x video_dim]`.
    pub video: &'a Tensor,
}

/// One attention site's weights, for inspection dumps.
#[derive(Debug, Clone)]
pub struct AttentionTraceRow {
    pub node_id: usize,
    pub label: String,
    pub vtype: VType,
    pub weights: Vec<f64>,
}

/// Output distribution over the answer vocabulary.
#[derive(Debug, Clone)]
pub struct AnswerDistribution {
    pub probs: Vec<f64>,
    pub attention_trace: Option<Vec<AttentionTraceRow>>,
}

impl AnswerDistribution {
    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite prob"))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// A traced forward pass: handles into the tape plus attention bookkeeping.
/// `params` maps parameter names (as in [`ModelParams::visit`]) to their
/// tape handles so a trainer can read gradients back after `backward`.
pub struct Forward {
    pub logits: Value,
    pub probs: Value,
    pub attention_calls: usize,
    pub params: Vec<(String, Value)>,
    trace: Vec<(usize, String, VType, Value)>,
}

impl Forward {
    /// Materializes the attention trace from the tape.
    pub fn trace_rows(&self, tape: &Tape) -> Vec<AttentionTraceRow> {
        self.trace
            .iter()
            .map(|(node_id, label, vtype, weights)| AttentionTraceRow {
                node_id: *node_id,
                label: label.clone(),
                vtype: *vtype,
                weights: tape.value(*weights).to_vec(),
            })
            .collect()
    }
}

/// Tape handles for every registered parameter of one pass. Each tensor is
/// registered exactly once so shared weights accumulate their gradients on
/// a single leaf.
struct Registered {
    enc: Option<(LstmGates, LstmGates)>,
    att: AttentionHandles,
    proj: AffineHandles,
    head: RegisteredHead,
    cls: AffineHandles,
    named: Vec<(String, Value)>,
}

enum RegisteredHead {
    TreeMn {
        leaf: AffineHandles,
        merge: AffineHandles,
    },
    Heterogeneous {
        leaf_visual: AffineHandles,
        leaf_verbal: AffineHandles,
        merge_visual_w: Value,
        merge_verbal_w: Value,
        merge_b: Value,
        intermediate: Option<AffineHandles>,
    },
    Simple {
        encoder: LstmGates,
    },
    Esa {
        layer1: LstmGates,
        layer2: LstmGates,
    },
}

/// Per-pass context shared by the recursive tree evaluation.
struct TreeCtx<'a> {
    video: Option<Value>,
    token_vecs: &'a [Vec<f64>],
    trace: Vec<(usize, String, VType, Value)>,
    attention_calls: usize,
}

/// Leaf update for the homogeneous tree: residual attention around the
/// projected embedding, `h = W_A att + b_A + q`.
pub fn leaf_state_treemn(
    tape: &mut Tape,
    q: Value,
    video: Value,
    leaf: AffineHandles,
    att: &AttentionHandles,
) -> Result<(Value, Value), TensorError> {
    let attended = attend(tape, att, q, video)?;
    let wa = tape.matvec(leaf.w, attended.att)?;
    let wab = tape.add(wa, leaf.b)?;
    let h = tape.add(wab, q)?;
    Ok((h, attended.weights))
}

/// Visual-leaf update for the heterogeneous trees; same residual form with
/// the visual-leaf transform.
pub fn leaf_state_visual(
    tape: &mut Tape,
    q: Value,
    video: Value,
    leaf: AffineHandles,
    att: &AttentionHandles,
) -> Result<(Value, Value), TensorError> {
    leaf_state_treemn(tape, q, video, leaf, att)
}

/// Verbal-leaf update: affine only, never touches the video.
pub fn leaf_state_verbal(
    tape: &mut Tape,
    q: Value,
    leaf: AffineHandles,
) -> Result<Value, TensorError> {
    let wq = tape.matvec(leaf.w, q)?;
    tape.add(wq, leaf.b)
}

/// Intermediate merge for the homogeneous tree: `h = sum W_B o_j + b_B`.
pub fn merge_children_homogeneous(
    tape: &mut Tape,
    outputs: &[Value],
    merge: AffineHandles,
) -> Result<Value, TensorError> {
    let mut acc = merge.b;
    for &o in outputs {
        let wo = tape.matvec(merge.w, o)?;
        acc = tape.add(acc, wo)?;
    }
    Ok(acc)
}

/// Intermediate merge for the heterogeneous trees: visual and verbal
/// children pass through different weights, one shared bias.
pub fn merge_children_heterogeneous(
    tape: &mut Tape,
    visual_outputs: &[Value],
    verbal_outputs: &[Value],
    w_visual: Value,
    w_verbal: Value,
    bias: Value,
) -> Result<Value, TensorError> {
    let mut acc = bias;
    for &o in visual_outputs {
        let wo = tape.matvec(w_visual, o)?;
        acc = tape.add(acc, wo)?;
    }
    for &o in verbal_outputs {
        let wo = tape.matvec(w_verbal, o)?;
        acc = tape.add(acc, wo)?;
    }
    Ok(acc)
}

impl ModelParams {
    /// Whether this pass needs the video encoded at all. Chains always
    /// attend; heterogeneous trees skip encoding when every node is verbal.
    fn needs_video(&self, tree: Option<&TreeNode>) -> bool {
        match self.variant {
            Variant::Simple | Variant::Esa | Variant::TreeMn => true,
            Variant::HTreeMnNoh | Variant::HTreeMn => {
                tree.map(|t| t.vtype != Some(VType::Verbal)).unwrap_or(true)
            }
        }
    }

    /// Registers every parameter once, recording `(name, handle)` pairs in
    /// [`ModelParams::visit`] order (encoder omitted when unused).
    fn register_all(&self, tape: &mut Tape, with_encoder: bool) -> Registered {
        let mut named = Vec::new();
        let reg_lstm = |tape: &mut Tape, dir: &LstmDir, prefix: &str,
                            named: &mut Vec<(String, Value)>| {
            let g = dir.register(tape);
            for (name, v) in [
                ("w_i", g.w_i),
                ("b_i", g.b_i),
                ("w_f", g.w_f),
                ("b_f", g.b_f),
                ("w_o", g.w_o),
                ("b_o", g.b_o),
                ("w_g", g.w_g),
                ("b_g", g.b_g),
            ] {
                named.push((format!("{prefix}.{name}"), v));
            }
            g
        };

        let enc = if with_encoder {
            let f = reg_lstm(tape, &self.encoder.fwd, "enc.fwd", &mut named);
            let b = reg_lstm(tape, &self.encoder.bwd, "enc.bwd", &mut named);
            Some((f, b))
        } else {
            None
        };

        let att = self.attention.register(tape);
        named.push(("att.w_q".into(), att.w_q));
        named.push(("att.w_v".into(), att.w_v));
        named.push(("att.b_v".into(), att.b_v));
        named.push(("att.w_p".into(), att.w_p));

        let proj = self.projection.register(tape);
        named.push(("proj.w".into(), proj.w));
        named.push(("proj.b".into(), proj.b));

        let head = match &self.head {
            HeadParams::TreeMn { leaf, merge } => {
                let lh = leaf.register(tape);
                named.push(("leaf.w".into(), lh.w));
                named.push(("leaf.b".into(), lh.b));
                let mh = merge.register(tape);
                named.push(("merge.w".into(), mh.w));
                named.push(("merge.b".into(), mh.b));
                RegisteredHead::TreeMn { leaf: lh, merge: mh }
            }
            HeadParams::Heterogeneous {
                leaf_visual,
                leaf_verbal,
                merge_visual_w,
                merge_verbal_w,
                merge_b,
                intermediate,
            } => {
                let lv = leaf_visual.register(tape);
                named.push(("leaf_vis.w".into(), lv.w));
                named.push(("leaf_vis.b".into(), lv.b));
                let lb = leaf_verbal.register(tape);
                named.push(("leaf_verb.w".into(), lb.w));
                named.push(("leaf_verb.b".into(), lb.b));
                let mv = tape.param(merge_visual_w);
                named.push(("merge.w_vis".into(), mv));
                let mb = tape.param(merge_verbal_w);
                named.push(("merge.w_verb".into(), mb));
                let bb = tape.param(merge_b);
                named.push(("merge.b".into(), bb));
                let inter = intermediate.as_ref().map(|a| {
                    let ih = a.register(tape);
                    named.push(("inter_vis.w".into(), ih.w));
                    named.push(("inter_vis.b".into(), ih.b));
                    ih
                });
                RegisteredHead::Heterogeneous {
                    leaf_visual: lv,
                    leaf_verbal: lb,
                    merge_visual_w: mv,
                    merge_verbal_w: mb,
                    merge_b: bb,
                    intermediate: inter,
                }
            }
            HeadParams::Simple { encoder } => RegisteredHead::Simple {
                encoder: reg_lstm(tape, encoder, "qenc", &mut named),
            },
            HeadParams::Esa { layer1, layer2 } => RegisteredHead::Esa {
                layer1: reg_lstm(tape, layer1, "l1", &mut named),
                layer2: reg_lstm(tape, layer2, "l2", &mut named),
            },
        };

        let cls = self.classifier.register(tape);
        named.push(("cls.w".into(), cls.w));
        named.push(("cls.b".into(), cls.b));

        Registered {
            enc,
            att,
            proj,
            head,
            cls,
            named,
        }
    }

    /// Traces one forward pass on the given tape.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        input: &SampleInput,
    ) -> Result<Forward, ModelError> {
        if input.token_vecs.is_empty() {
            return Err(ModelError::EmptyQuestion);
        }
        let with_encoder = self.needs_video(input.tree);
        let reg = self.register_all(tape, with_encoder);
        let video = match &reg.enc {
            Some((fwd, bwd)) => Some(encode_video(
                tape,
                input.video,
                fwd,
                bwd,
                self.dims.hidden / 2,
            )?),
            None => None,
        };

        match self.variant {
            Variant::TreeMn | Variant::HTreeMnNoh | Variant::HTreeMn => {
                let tree = input.tree.ok_or_else(|| {
                    ModelError::VariantMismatch(format!("{} requires a parse tree", self.variant))
                })?;
                let leaves = tree.leaves().len();
                if leaves != input.token_vecs.len() {
                    return Err(ModelError::TokenMismatch {
                        leaves,
                        tokens: input.token_vecs.len(),
                    });
                }
                let mut ctx = TreeCtx {
                    video,
                    token_vecs: input.token_vecs,
                    trace: Vec::new(),
                    attention_calls: 0,
                };
                let mut next_id = 0usize;
                let (h_root, _) = self.eval_node(tape, tree, &reg, &mut ctx, &mut next_id)?;
                let wh = tape.matvec(reg.cls.w, h_root)?;
                let logits = tape.add(wh, reg.cls.b)?;
                let probs = tape.softmax(logits)?;
                Ok(Forward {
                    logits,
                    probs,
                    attention_calls: ctx.attention_calls,
                    params: reg.named,
                    trace: ctx.trace,
                })
            }
            Variant::Simple => {
                let video = video.expect("chain variants always encode");
                let RegisteredHead::Simple { encoder } = &reg.head else {
                    unreachable!("variant/head consistency");
                };
                let inputs = self.project_tokens(tape, reg.proj, input.token_vecs)?;
                let states = run_lstm(tape, &inputs, encoder, self.dims.hidden)?;
                let h_q = *states.last().expect("nonempty question");
                let attended = attend(tape, &reg.att, h_q, video)?;
                let trace = vec![(
                    0usize,
                    "question".to_string(),
                    VType::Visual,
                    attended.weights,
                )];
                let joint = tape.concat(h_q, attended.att)?;
                let wh = tape.matvec(reg.cls.w, joint)?;
                let logits = tape.add(wh, reg.cls.b)?;
                let probs = tape.softmax(logits)?;
                Ok(Forward {
                    logits,
                    probs,
                    attention_calls: 1,
                    params: reg.named,
                    trace,
                })
            }
            Variant::Esa => {
                let video = video.expect("chain variants always encode");
                let RegisteredHead::Esa { layer1, layer2 } = &reg.head else {
                    unreachable!("variant/head consistency");
                };
                let inputs = self.project_tokens(tape, reg.proj, input.token_vecs)?;
                let states1 = run_lstm(tape, &inputs, layer1, self.dims.hidden)?;
                let mut trace = Vec::new();
                let mut layer2_inputs = Vec::with_capacity(states1.len());
                for (t, &o1) in states1.iter().enumerate() {
                    let attended = attend(tape, &reg.att, o1, video)?;
                    let label = input
                        .token_words
                        .get(t)
                        .cloned()
                        .unwrap_or_else(|| format!("token{t}"));
                    trace.push((t, label, VType::Visual, attended.weights));
                    layer2_inputs.push(tape.concat(o1, attended.att)?);
                }
                let states2 = run_lstm(tape, &layer2_inputs, layer2, self.dims.hidden)?;
                let h1 = *states1.last().expect("nonempty question");
                let h2 = *states2.last().expect("nonempty question");
                let joint = tape.concat(h1, h2)?;
                let wh = tape.matvec(reg.cls.w, joint)?;
                let logits = tape.add(wh, reg.cls.b)?;
                let probs = tape.softmax(logits)?;
                Ok(Forward {
                    logits,
                    probs,
                    attention_calls: states1.len(),
                    params: reg.named,
                    trace,
                })
            }
        }
    }

    fn project_tokens(
        &self,
        tape: &mut Tape,
        proj: AffineHandles,
        token_vecs: &[Vec<f64>],
    ) -> Result<Vec<Value>, ModelError> {
        token_vecs
            .iter()
            .map(|q| {
                crate::embedding::project_token(tape, proj.w, proj.b, q).map_err(ModelError::from)
            })
            .collect()
    }

    /// Post-order tree evaluation. Returns `(h, o)`; `next_id` numbers the
    /// nodes in preorder for the attention trace.
    fn eval_node(
        &self,
        tape: &mut Tape,
        node: &TreeNode,
        reg: &Registered,
        ctx: &mut TreeCtx,
        next_id: &mut usize,
    ) -> Result<(Value, Value), ModelError> {
        let node_id = *next_id;
        *next_id += 1;

        if node.is_leaf() {
            let idx = node
                .token_index
                .ok_or_else(|| ModelError::VariantMismatch("leaf without token index".into()))?;
            let q = crate::embedding::project_token(
                tape,
                reg.proj.w,
                reg.proj.b,
                &ctx.token_vecs[idx],
            )?;
            let h = match &reg.head {
                RegisteredHead::TreeMn { leaf, .. } => {
                    let video = ctx.video.expect("treemn always encodes");
                    let (h, weights) = leaf_state_treemn(tape, q, video, *leaf, &reg.att)?;
                    ctx.attention_calls += 1;
                    ctx.trace
                        .push((node_id, node.label.clone(), VType::Visual, weights));
                    h
                }
                RegisteredHead::Heterogeneous {
                    leaf_visual,
                    leaf_verbal,
                    ..
                } => match node.vtype {
                    Some(VType::Visual) => {
                        let video = ctx.video.expect("visual node implies encoding");
                        let (h, weights) =
                            leaf_state_visual(tape, q, video, *leaf_visual, &reg.att)?;
                        ctx.attention_calls += 1;
                        ctx.trace
                            .push((node_id, node.label.clone(), VType::Visual, weights));
                        h
                    }
                    Some(VType::Verbal) => leaf_state_verbal(tape, q, *leaf_verbal)?,
                    None => return Err(ModelError::UnlabeledNode(node.label.clone())),
                },
                _ => unreachable!("chain heads never evaluate trees"),
            };
            let o = tape.tanh(h);
            return Ok((h, o));
        }

        let mut child_states = Vec::with_capacity(node.children.len());
        for child in &node.children {
            let (_, o) = self.eval_node(tape, child, reg, ctx, next_id)?;
            child_states.push((o, child.vtype));
        }

        let mut h = match &reg.head {
            RegisteredHead::TreeMn { merge, .. } => {
                let outputs: Vec<Value> = child_states.iter().map(|(o, _)| *o).collect();
                merge_children_homogeneous(tape, &outputs, *merge)?
            }
            RegisteredHead::Heterogeneous {
                merge_visual_w,
                merge_verbal_w,
                merge_b,
                ..
            } => {
                let mut visual = Vec::new();
                let mut verbal = Vec::new();
                for (o, vtype) in &child_states {
                    match vtype {
                        Some(VType::Visual) => visual.push(*o),
                        Some(VType::Verbal) => verbal.push(*o),
                        None => return Err(ModelError::UnlabeledNode(node.label.clone())),
                    }
                }
                merge_children_heterogeneous(
                    tape,
                    &visual,
                    &verbal,
                    *merge_visual_w,
                    *merge_verbal_w,
                    *merge_b,
                )?
            }
            _ => unreachable!("chain heads never evaluate trees"),
        };

        // Hierarchical attention: visual intermediates re-attend with a
        // residual update.
        if self.variant == Variant::HTreeMn {
            if node.vtype.is_none() {
                return Err(ModelError::UnlabeledNode(node.label.clone()));
            }
            if node.vtype == Some(VType::Visual) {
                let RegisteredHead::Heterogeneous {
                    intermediate: Some(inter),
                    ..
                } = &reg.head
                else {
                    unreachable!("htreemn head carries intermediate transform");
                };
                let video = ctx.video.expect("visual node implies encoding");
                let attended = attend(tape, &reg.att, h, video)?;
                ctx.attention_calls += 1;
                ctx.trace
                    .push((node_id, node.label.clone(), VType::Visual, attended.weights));
                let wa = tape.matvec(inter.w, attended.att)?;
                let wab = tape.add(wa, inter.b)?;
                h = tape.add(wab, h)?;
            }
        }

        let o = tape.tanh(h);
        Ok((h, o))
    }

    /// Untraced forward: runs a private tape and extracts the distribution.
    pub fn forward(&self, input: &SampleInput) -> Result<AnswerDistribution, ModelError> {
        let mut tape = Tape::new();
        let fwd = self.forward_traced(&mut tape, input)?;
        Ok(AnswerDistribution {
            probs: tape.value(fwd.probs).to_vec(),
            attention_trace: None,
        })
    }

    /// Forward pass that also materializes every attention distribution.
    pub fn forward_with_trace(
        &self,
        input: &SampleInput,
    ) -> Result<AnswerDistribution, ModelError> {
        let mut tape = Tape::new();
        let fwd = self.forward_traced(&mut tape, input)?;
        Ok(AnswerDistribution {
            probs: tape.value(fwd.probs).to_vec(),
            attention_trace: Some(fwd.trace_rows(&tape)),
        })
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    variant: String,
    dims: ModelDims,
    answer_vocab: Vec<String>,
    tensors: Vec<TensorMeta>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

impl ModelParams {
    /// Writes the checkpoint container: magic, version, JSON header with
    /// named shapes, then raw little-endian f64 data in header order.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        let entries = self.visit();
        let header = CheckpointHeader {
            variant: self.variant.as_str().to_string(),
            dims: self.dims,
            answer_vocab: self.answer_vocab.clone(),
            tensors: entries
                .iter()
                .map(|(name, t)| TensorMeta {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| ModelError::Checkpoint(format!("header encode: {e}")))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for (_, t) in &entries {
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ModelParams::save`].
    pub fn load(path: &Path) -> Result<ModelParams, ModelError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let mut version = [0u8; 4];
        r.read_exact(&mut version)?;
        let version = u32::from_le_bytes(version);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| ModelError::Checkpoint(format!("header decode: {e}")))?;
        let variant = Variant::parse(&header.variant)
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown variant {}", header.variant)))?;

        // skeleton with the right structure, then fill tensors by name
        let mut rng = crate::rng::substream(0, "checkpoint-skeleton");
        let mut model = ModelParams::new(variant, header.dims, header.answer_vocab, &mut rng)?;
        {
            let mut by_name: std::collections::BTreeMap<String, &mut Tensor> =
                model.visit_mut().into_iter().collect();
            if by_name.len() != header.tensors.len() {
                return Err(ModelError::Checkpoint(format!(
                    "expected {} tensors, header lists {}",
                    by_name.len(),
                    header.tensors.len()
                )));
            }
            for meta in &header.tensors {
                let t = by_name.get_mut(&meta.name).ok_or_else(|| {
                    ModelError::Checkpoint(format!("unexpected tensor {}", meta.name))
                })?;
                if t.shape() != meta.shape.as_slice() {
                    return Err(ModelError::Checkpoint(format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        meta.name,
                        meta.shape,
                        t.shape()
                    )));
                }
                let mut buf = vec![0u8; t.numel() * 8];
                r.read_exact(&mut buf)?;
                for (k, chunk) in buf.chunks_exact(8).enumerate() {
                    t.data_mut()[k] = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
                }
            }
        }
        Ok(model)
    }
}

/// Softmax over logits without a tape, for reporting.
pub fn distribution_from_logits(logits: &[f64]) -> Vec<f64> {
    softmax_slice(logits)
}

#[cfg(test)]
mod tests;
