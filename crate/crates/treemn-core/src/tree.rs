//! Bracketed constituency parse trees and visual/verbal node labeling.
//!
//! Trees arrive as Penn-Treebank-style bracketings, one per line. Leaves
//! are the question tokens; each is labeled `Visual` or `Verbal` from a
//! concreteness lexicon plus a function-word list, and the labels propagate
//! upward: an internal node is verbal iff all of its children are verbal.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

/// Default always-verbal word list shipped with the crate; override by
/// loading a custom file through [`ConcretenessLexicon::load`].
pub const DEFAULT_FUNCTION_WORDS: &str = include_str!("../data/function_words.txt");

#[derive(Debug, Clone, PartialEq)]
pub enum TreeError {
    /// Malformed bracketing, with the byte offset of the problem.
    Parse { offset: usize, msg: String },
    /// `propagate_vtype` hit a leaf that was never labeled.
    UnlabeledLeaf { word: String },
    /// A concreteness rating outside `[0, 1]`.
    BadRating { line: usize, value: f64 },
    Io(String),
}

impl fmt::Display for TreeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeError::Parse { offset, msg } => write!(f, "parse error at byte {offset}: {msg}"),
            TreeError::UnlabeledLeaf { word } => write!(f, "leaf {word:?} has no vtype label"),
            TreeError::BadRating { line, value } => {
                write!(f, "line {line}: rating {value} outside [0, 1]")
            }
            TreeError::Io(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for TreeError {}

/// Whether a node participates in attention (`Visual`) or is pure language
/// structure (`Verbal`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum VType {
    Visual,
    Verbal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Leaf,
    Intermediate,
    Root,
}

/// One node of a constituency parse tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub kind: NodeKind,
    /// Constituent tag for internal nodes, the word token for leaves.
    pub label: String,
    pub children: Vec<TreeNode>,
    /// Set by labeling; `None` until then.
    pub vtype: Option<VType>,
    /// Position of a leaf within the question, left to right.
    pub token_index: Option<usize>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf)
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<&TreeNode> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a TreeNode>) {
        if self.is_leaf() {
            out.push(self);
        } else {
            for c in &self.children {
                c.collect_leaves(out);
            }
        }
    }

    pub fn leaf_tokens(&self) -> Vec<&str> {
        self.leaves().iter().map(|l| l.label.as_str()).collect()
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(TreeNode::node_count).sum::<usize>()
    }

    /// Renders the tree back to bracketed form.
    pub fn to_bracketed(&self) -> String {
        if self.is_leaf() {
            return self.label.clone();
        }
        let inner: Vec<String> = self.children.iter().map(TreeNode::to_bracketed).collect();
        format!("({} {})", self.label, inner.join(" "))
    }
}

/// Reads one Penn-Treebank-style bracketed tree.
///
/// The top node becomes the `Root`; leaves get `token_index` 0..N-1 in
/// reading order. Errors carry the byte offset of the offending character.
pub fn parse_bracketed(text: &str) -> Result<TreeNode, TreeError> {
    let bytes = text.as_bytes();
    let mut pos = 0usize;
    skip_ws(bytes, &mut pos);
    if pos >= bytes.len() || bytes[pos] != b'(' {
        return Err(TreeError::Parse {
            offset: pos,
            msg: "expected '('".into(),
        });
    }
    let mut next_token = 0usize;
    let mut root = parse_node(bytes, &mut pos, &mut next_token)?;
    skip_ws(bytes, &mut pos);
    if pos != bytes.len() {
        return Err(TreeError::Parse {
            offset: pos,
            msg: "trailing content after tree".into(),
        });
    }
    if next_token == 0 {
        return Err(TreeError::Parse {
            offset: 0,
            msg: "tree has no leaves".into(),
        });
    }
    root.kind = NodeKind::Root;
    Ok(root)
}

fn skip_ws(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
}

fn read_atom<'a>(bytes: &'a [u8], pos: &mut usize) -> &'a [u8] {
    let start = *pos;
    while *pos < bytes.len()
        && !bytes[*pos].is_ascii_whitespace()
        && bytes[*pos] != b'('
        && bytes[*pos] != b')'
    {
        *pos += 1;
    }
    &bytes[start..*pos]
}

fn parse_node(
    bytes: &[u8],
    pos: &mut usize,
    next_token: &mut usize,
) -> Result<TreeNode, TreeError> {
    let open = *pos;
    *pos += 1; // consume '('
    skip_ws(bytes, pos);
    let label = read_atom(bytes, pos);
    if label.is_empty() {
        return Err(TreeError::Parse {
            offset: *pos,
            msg: "expected constituent label".into(),
        });
    }
    let label = String::from_utf8_lossy(label).into_owned();
    let mut children = Vec::new();
    loop {
        skip_ws(bytes, pos);
        if *pos >= bytes.len() {
            return Err(TreeError::Parse {
                offset: open,
                msg: "unmatched '('".into(),
            });
        }
        match bytes[*pos] {
            b')' => {
                *pos += 1;
                break;
            }
            b'(' => children.push(parse_node(bytes, pos, next_token)?),
            _ => {
                let word = read_atom(bytes, pos);
                children.push(TreeNode {
                    kind: NodeKind::Leaf,
                    label: String::from_utf8_lossy(word).into_owned(),
                    children: Vec::new(),
                    vtype: None,
                    token_index: Some(*next_token),
                });
                *next_token += 1;
            }
        }
    }
    if children.is_empty() {
        return Err(TreeError::Parse {
            offset: open,
            msg: format!("empty constituent ({label})"),
        });
    }
    Ok(TreeNode {
        kind: NodeKind::Intermediate,
        label,
        children,
        vtype: None,
        token_index: None,
    })
}

/// Concreteness ratings plus an always-verbal function-word list.
#[derive(Debug, Clone)]
pub struct ConcretenessLexicon {
    ratings: HashMap<String, f64>,
    function_words: HashSet<String>,
    /// Words at or above this rating are visual. 0.5 by default.
    pub threshold: f64,
}

impl ConcretenessLexicon {
    pub fn new(ratings: HashMap<String, f64>, function_words: HashSet<String>) -> Self {
        ConcretenessLexicon {
            ratings,
            function_words,
            threshold: 0.5,
        }
    }

    /// Ratings plus the built-in function-word list.
    pub fn with_builtin_function_words(ratings: HashMap<String, f64>) -> Self {
        Self::new(ratings, builtin_function_words())
    }

    /// Loads ratings from a `word<TAB>score` file, and the function-word
    /// list from `function_words_path` when given (built-in list otherwise).
    pub fn load(
        ratings_path: &Path,
        function_words_path: Option<&Path>,
    ) -> Result<Self, TreeError> {
        let text = fs::read_to_string(ratings_path)
            .map_err(|e| TreeError::Io(format!("{}: {e}", ratings_path.display())))?;
        let mut ratings = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let word = parts.next().unwrap_or("");
            let score: f64 = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| TreeError::Io(format!("line {}: malformed rating row", i + 1)))?;
            if !(0.0..=1.0).contains(&score) {
                return Err(TreeError::BadRating {
                    line: i + 1,
                    value: score,
                });
            }
            ratings.insert(word.to_lowercase(), score);
        }
        let function_words = match function_words_path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| TreeError::Io(format!("{}: {e}", p.display())))?;
                parse_function_words(&text)
            }
            None => builtin_function_words(),
        };
        Ok(Self::new(ratings, function_words))
    }

    pub fn rating(&self, word: &str) -> Option<f64> {
        self.ratings.get(&word.to_lowercase()).copied()
    }

    pub fn is_function_word(&self, word: &str) -> bool {
        self.function_words.contains(&word.to_lowercase())
    }

    /// Classifies a single word: function words are verbal; otherwise the
    /// concreteness threshold decides; out-of-vocabulary words default to
    /// verbal.
    pub fn label_leaf(&self, word: &str) -> VType {
        if self.is_function_word(word) {
            return VType::Verbal;
        }
        match self.rating(word) {
            Some(r) if r >= self.threshold => VType::Visual,
            _ => VType::Verbal,
        }
    }
}

fn parse_function_words(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

/// The built-in always-verbal word list.
pub fn builtin_function_words() -> HashSet<String> {
    parse_function_words(DEFAULT_FUNCTION_WORDS)
}

/// Labels every leaf from the lexicon.
pub fn label_leaves(tree: &mut TreeNode, lex: &ConcretenessLexicon) {
    if tree.is_leaf() {
        tree.vtype = Some(lex.label_leaf(&tree.label));
    } else {
        for c in &mut tree.children {
            label_leaves(c, lex);
        }
    }
}

/// Propagates leaf labels upward: an internal node is verbal iff every
/// child is verbal. Fails on any unlabeled leaf.
pub fn propagate_vtype(tree: &mut TreeNode) -> Result<VType, TreeError> {
    if tree.is_leaf() {
        return tree.vtype.ok_or_else(|| TreeError::UnlabeledLeaf {
            word: tree.label.clone(),
        });
    }
    let mut all_verbal = true;
    for c in &mut tree.children {
        if propagate_vtype(c)? == VType::Visual {
            all_verbal = false;
        }
    }
    let v = if all_verbal {
        VType::Verbal
    } else {
        VType::Visual
    };
    tree.vtype = Some(v);
    Ok(v)
}

/// Labels leaves and propagates in one pass.
pub fn label_tree(tree: &mut TreeNode, lex: &ConcretenessLexicon) -> Result<(), TreeError> {
    label_leaves(tree, lex);
    propagate_vtype(tree)?;
    Ok(())
}
