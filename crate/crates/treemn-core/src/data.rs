//! Dataset formats, loaders, and the synthetic compositional benchmark.
//!
//! A dataset directory holds one split per subdirectory (`train/`, `val/`,
//! `test/`), each with a `questions.jsonl` and a `features/` folder of
//! binary frame-feature files, plus shared `embeddings.txt`, `lexicon.tsv`,
//! and `similarity.tsv` at the root.
//!
//! The synthetic generator draws a scene (subject, action, object,
//! location, count, temporal position), renders it as frame features whose
//! key segment carries summed concept embeddings, and asks templated
//! who/what/where/how-many/when questions with hand-built constituency
//! parses. Every mechanism the models rely on is verifiable by
//! construction: the answer is decodable from the key segment alone.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::Rng;

use crate::embedding::{EmbeddingError, EmbeddingTable};
use crate::model::SampleInput;
use crate::rng::{normal, substream};
use crate::tensor::Tensor;
use crate::tree::{label_tree, parse_bracketed, ConcretenessLexicon, TreeError, TreeNode};

const FEATURE_MAGIC: &[u8; 4] = b"VQAF";
const FEATURE_VERSION: u32 = 1;

#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    /// Malformed questions.jsonl line.
    Json { line: usize, msg: String },
    /// A sample that violates an invariant, by id.
    Sample { id: String, msg: String },
    MissingFeatures { id: String, path: PathBuf },
    BadConfig(String),
    Tree(TreeError),
    Embedding(EmbeddingError),
    /// Refusing to overwrite an existing non-empty output directory.
    OutputExists(PathBuf),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "{e}"),
            DataError::Json { line, msg } => write!(f, "questions line {line}: {msg}"),
            DataError::Sample { id, msg } => write!(f, "sample {id}: {msg}"),
            DataError::MissingFeatures { id, path } => {
                write!(f, "sample {id}: missing feature file {}", path.display())
            }
            DataError::BadConfig(msg) => write!(f, "config: {msg}"),
            DataError::Tree(e) => write!(f, "{e}"),
            DataError::Embedding(e) => write!(f, "{e}"),
            DataError::OutputExists(p) => write!(
                f,
                "output directory {} exists and is not empty (use --force)",
                p.display()
            ),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

impl From<TreeError> for DataError {
    fn from(e: TreeError) -> Self {
        DataError::Tree(e)
    }
}

impl From<EmbeddingError> for DataError {
    fn from(e: EmbeddingError) -> Self {
        DataError::Embedding(e)
    }
}

/// One question record as stored in `questions.jsonl`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct QASample {
    pub video_id: String,
    pub question: String,
    pub parse: String,
    pub answer: String,
    #[serde(rename = "type")]
    pub question_type: String,
}

/// A sample joined with its features and embeddings, ready for a forward
/// pass.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub video_id: String,
    pub question: String,
    pub question_type: String,
    pub tree: TreeNode,
    pub token_words: Vec<String>,
    pub token_vecs: Vec<Vec<f64>>,
    pub video: Tensor,
    pub answer_word: String,
    pub answer_index: usize,
}

impl PreparedSample {
    pub fn input(&self) -> SampleInput<'_> {
        SampleInput {
            tree: Some(&self.tree),
            token_words: &self.token_words,
            token_vecs: &self.token_vecs,
            video: &self.video,
        }
    }

    /// Question length in tokens, the unit of the length breakdowns.
    pub fn question_len(&self) -> usize {
        self.token_words.len()
    }
}

/// Writes a frame-feature file: magic, version, T, dim (u32 LE), then
/// row-major f32 LE values.
pub fn write_features(path: &Path, frames: &[Vec<f32>]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    let t = frames.len() as u32;
    let dim = frames.first().map(|f| f.len()).unwrap_or(0) as u32;
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&t.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    for row in frames {
        for x in row {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a frame-feature file into a `[T x dim]` tensor.
pub fn read_features(path: &Path) -> Result<Tensor, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    if &head[0..4] != FEATURE_MAGIC {
        return Err(DataError::Sample {
            id: path.display().to_string(),
            msg: "bad feature file magic".into(),
        });
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != FEATURE_VERSION {
        return Err(DataError::Sample {
            id: path.display().to_string(),
            msg: format!("unsupported feature version {version}"),
        });
    }
    let t = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(head[12..16].try_into().expect("4 bytes")) as usize;
    let mut buf = vec![0u8; t * dim * 4];
    r.read_exact(&mut buf)?;
    let data: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::from_vec(&[t, dim], data).map_err(|e| DataError::Sample {
        id: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Reads `questions.jsonl` from a split directory.
pub fn read_questions(dir: &Path) -> Result<Vec<QASample>, DataError> {
    let path = dir.join("questions.jsonl");
    let text = fs::read_to_string(&path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: QASample = serde_json::from_str(line).map_err(|e| DataError::Json {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(sample);
    }
    if out.is_empty() {
        return Err(DataError::Json {
            line: 0,
            msg: format!("{} has no samples", path.display()),
        });
    }
    Ok(out)
}

/// Builds the answer vocabulary from a split's top-K answers (frequency
/// descending, then lexicographic for determinism). `None` keeps every
/// distinct answer.
pub fn build_answer_vocab(samples: &[QASample], k: Option<usize>) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.answer.as_str()).or_default() += 1;
    }
    let mut entries: Vec<(&str, usize)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let take = k.unwrap_or(entries.len());
    entries
        .into_iter()
        .take(take)
        .map(|(w, _)| w.to_string())
        .collect()
}

/// Loads and validates one split, joining questions with features,
/// embeddings, and vtype labels. Samples whose answer is outside the
/// vocabulary are skipped (their count is returned alongside).
pub fn load_split(
    dir: &Path,
    embeddings: &EmbeddingTable,
    lexicon: &ConcretenessLexicon,
    answer_vocab: &[String],
) -> Result<(Vec<PreparedSample>, usize), DataError> {
    let raw = read_questions(dir)?;
    let index: BTreeMap<&str, usize> = answer_vocab
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i))
        .collect();
    let mut out = Vec::with_capacity(raw.len());
    let mut skipped = 0usize;
    for sample in raw {
        let mut tree = parse_bracketed(&sample.parse).map_err(|e| DataError::Sample {
            id: sample.video_id.clone(),
            msg: e.to_string(),
        })?;
        let tokens: Vec<String> = sample.question.split_whitespace().map(String::from).collect();
        let leaves: Vec<String> = tree.leaf_tokens().iter().map(|s| s.to_string()).collect();
        if tokens != leaves {
            return Err(DataError::Sample {
                id: sample.video_id.clone(),
                msg: format!(
                    "parse leaves {:?} do not match question tokens {:?}",
                    leaves, tokens
                ),
            });
        }
        label_tree(&mut tree, lexicon).map_err(|e| DataError::Sample {
            id: sample.video_id.clone(),
            msg: e.to_string(),
        })?;
        let feature_path = dir.join("features").join(format!("{}.bin", sample.video_id));
        if !feature_path.exists() {
            return Err(DataError::MissingFeatures {
                id: sample.video_id.clone(),
                path: feature_path,
            });
        }
        let video = read_features(&feature_path)?;
        let answer_index = match index.get(sample.answer.as_str()) {
            Some(&i) => i,
            None => {
                skipped += 1;
                continue;
            }
        };
        let token_vecs: Vec<Vec<f64>> =
            tokens.iter().map(|w| embeddings.lookup(w).to_vec()).collect();
        out.push(PreparedSample {
            video_id: sample.video_id,
            question: sample.question,
            question_type: sample.question_type,
            tree,
            token_words: tokens,
            token_vecs,
            video,
            answer_word: sample.answer,
            answer_index,
        });
    }
    Ok((out, skipped))
}

/// Everything a training or evaluation run needs from a dataset root.
pub struct LoadedDataset {
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
    pub answer_vocab: Vec<String>,
    pub embeddings: EmbeddingTable,
    pub lexicon: ConcretenessLexicon,
}

/// Loads a dataset root (`train/`, `val/`, optional `test/`). The answer
/// vocabulary is the training split's top-K.
pub fn load_dataset(root: &Path, k: Option<usize>) -> Result<LoadedDataset, DataError> {
    load_dataset_with(root, k, None)
}

/// [`load_dataset`] with an explicit function-word list override.
pub fn load_dataset_with(
    root: &Path,
    k: Option<usize>,
    function_words: Option<&Path>,
) -> Result<LoadedDataset, DataError> {
    let embeddings = crate::embedding::load_embeddings(&root.join("embeddings.txt"))?;
    let lexicon = ConcretenessLexicon::load(&root.join("lexicon.tsv"), function_words)?;
    let train_raw = read_questions(&root.join("train"))?;
    let answer_vocab = build_answer_vocab(&train_raw, k);
    let (train, _) = load_split(&root.join("train"), &embeddings, &lexicon, &answer_vocab)?;
    let (val, _) = load_split(&root.join("val"), &embeddings, &lexicon, &answer_vocab)?;
    let test = if root.join("test").join("questions.jsonl").exists() {
        load_split(&root.join("test"), &embeddings, &lexicon, &answer_vocab)?.0
    } else {
        Vec::new()
    };
    if train.is_empty() || val.is_empty() {
        return Err(DataError::BadConfig(
            "train and val splits must be nonempty".into(),
        ));
    }
    Ok(LoadedDataset {
        train,
        val,
        test,
        answer_vocab,
        embeddings,
        lexicon,
    })
}

// ------------------------------------------------------------------------
// Synthetic benchmark
// ------------------------------------------------------------------------

/// Configuration for the synthetic compositional benchmark.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    /// Frames per video.
    pub frames: usize,
    pub feature_dim: usize,
    /// Word embedding width written to embeddings.txt.
    pub embed_dim: usize,
    /// Per-component background noise level.
    pub noise_sigma: f64,
    /// Length of the contiguous segment that carries the scene signal.
    pub key_segment_len: usize,
    /// Fraction of questions rendered with nested clauses.
    pub long_question_fraction: f64,
    /// Fraction of videos carrying a second, fully distinct decoy scene in
    /// another temporal slot; the question's content words disambiguate
    /// which segment answers it.
    pub decoy_fraction: f64,
    /// Norm scale of the frozen concept vectors relative to a unit vector.
    /// Sums of a few concepts should stay inside the encoder's linear
    /// range, so keep this around 1-2.
    pub concept_scale: f64,
    /// Compositional-generalization split: the training split carries long
    /// variants only for non-who question types, while val/test draw long
    /// questions for every type. Long who-questions are then novel surface
    /// compositions of pieces seen in training.
    pub compositional_split: bool,
    pub seed: u64,
    pub subjects: Vec<String>,
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    pub locations: Vec<String>,
    pub counts: Vec<String>,
    pub orders: Vec<String>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_samples: 2000,
            val_samples: 500,
            test_samples: 500,
            frames: 16,
            feature_dim: 64,
            embed_dim: 16,
            noise_sigma: 0.05,
            key_segment_len: 4,
            long_question_fraction: 0.0,
            decoy_fraction: 0.0,
            concept_scale: 1.5,
            compositional_split: false,
            seed: 1,
            subjects: strings(&["dog", "cat", "man", "woman", "bird"]),
            actions: strings(&["running", "jumping", "eating", "sleeping", "walking"]),
            objects: strings(&["ball", "stick", "apple", "rope", "box"]),
            locations: strings(&["park", "kitchen", "street", "garden"]),
            counts: strings(&["one", "two", "three", "four"]),
            orders: strings(&["beginning", "middle", "end"]),
        }
    }
}

fn strings(words: &[&str]) -> Vec<String> {
    words.iter().map(|s| s.to_string()).collect()
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.key_segment_len == 0 || self.key_segment_len >= self.frames {
            return Err(DataError::BadConfig(format!(
                "key segment length {} must be in [1, frames) = [1, {})",
                self.key_segment_len, self.frames
            )));
        }
        if self.train_samples == 0 || self.val_samples == 0 {
            return Err(DataError::BadConfig(
                "train and val sample counts must be positive".into(),
            ));
        }
        for (name, v) in [
            ("subjects", &self.subjects),
            ("actions", &self.actions),
            ("objects", &self.objects),
            ("locations", &self.locations),
            ("counts", &self.counts),
            ("orders", &self.orders),
        ] {
            if v.len() < 2 {
                return Err(DataError::BadConfig(format!(
                    "vocabulary {name} needs at least 2 entries"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.long_question_fraction) {
            return Err(DataError::BadConfig(
                "long question fraction must be in [0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.decoy_fraction) {
            return Err(DataError::BadConfig(
                "decoy fraction must be in [0, 1]".into(),
            ));
        }
        if self.decoy_fraction > 0.0 && self.frames < 3 * self.key_segment_len {
            return Err(DataError::BadConfig(format!(
                "decoy scenes need disjoint temporal slots: frames {} < 3 x key segment {}",
                self.frames, self.key_segment_len
            )));
        }
        Ok(())
    }

    /// All words that can be answers, in vocabulary-index order.
    pub fn answer_words(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.subjects.iter().cloned());
        out.extend(self.objects.iter().cloned());
        out.extend(self.locations.iter().cloned());
        out.extend(self.counts.iter().cloned());
        out.extend(self.orders.iter().cloned());
        out
    }
}

/// One drawn scene, kept for generator self-checks.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub split: String,
    pub video_id: String,
    /// Agent of the action, drawn from the subject vocabulary.
    pub subject: usize,
    /// Patient of the action: a second subject-category entity, rendered
    /// into the role-shifted half of the feature space.
    pub patient: usize,
    pub action: usize,
    pub object: usize,
    pub location: usize,
    /// Count of subject-concept additions per key frame, 1-based.
    pub count: usize,
    /// Order slot index into `orders` (beginning / middle / end).
    pub order: usize,
    pub key_start: usize,
    pub question_type: String,
    pub answer: String,
    /// Template index: 0 who-agent, 1 who-patient, 2 what, 3 where,
    /// 4 how-many, 5 when.
    pub qtype: u8,
    pub long: bool,
    /// Which arrangement of trailing modifiers a long question uses; long
    /// questions vary structurally, not just lexically.
    pub long_style: u8,
    /// A second scene rendered into a different temporal slot; every slot
    /// value differs from the true scene's, so the question's content
    /// words identify the true segment.
    pub decoy: Option<DecoyScene>,
}

#[derive(Debug, Clone)]
pub struct DecoyScene {
    pub subject: usize,
    pub action: usize,
    pub object: usize,
    pub location: usize,
    pub count: usize,
    pub order: usize,
    pub key_start: usize,
}

/// Result of a generation run.
pub struct GenerationSummary {
    pub scenes: Vec<SceneRecord>,
    pub answer_words: Vec<String>,
    /// Frozen concept vectors, word -> vector, as used for the key frames.
    pub concepts: BTreeMap<String, Vec<f64>>,
}

fn concept_words(config: &SyntheticConfig) -> Vec<String> {
    let mut out = Vec::new();
    out.extend(config.subjects.iter().cloned());
    out.extend(config.actions.iter().cloned());
    out.extend(config.objects.iter().cloned());
    out.extend(config.locations.iter().cloned());
    out
}

fn function_word_list() -> Vec<&'static str> {
    vec![
        "who", "what", "where", "when", "how", "many", "is", "are", "the", "a", "that", "near",
        "in", "video",
    ]
}

/// Deterministically generates the benchmark into `out_dir`.
pub fn generate_synthetic(
    config: &SyntheticConfig,
    out_dir: &Path,
) -> Result<GenerationSummary, DataError> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;

    // frozen concept embeddings for the video signal
    let mut concept_rng = substream(config.seed, "concepts");
    let scale = config.concept_scale / (config.feature_dim as f64).sqrt();
    let mut concepts: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for word in concept_words(config) {
        let v: Vec<f64> = (0..config.feature_dim)
            .map(|_| normal(&mut concept_rng) * scale)
            .collect();
        concepts.insert(word, v);
    }

    // word embeddings for the question side; content words reuse a slice
    // of their video concept vector so the text and video sides share a
    // latent space the attention matcher can discover
    let mut embed_rng = substream(config.seed, "embeddings");
    let mut embed_words: Vec<String> = function_word_list()
        .into_iter()
        .map(String::from)
        .collect();
    embed_words.extend(concept_words(config));
    embed_words.extend(config.counts.iter().cloned());
    embed_words.extend(config.orders.iter().cloned());
    embed_words.sort();
    embed_words.dedup();
    {
        let mut f = BufWriter::new(File::create(out_dir.join("embeddings.txt"))?);
        for w in &embed_words {
            let v: Vec<String> = match concepts.get(w) {
                Some(c) => (0..config.embed_dim)
                    .map(|i| format!("{:.6}", c[i % config.feature_dim] * 0.5))
                    .collect(),
                None => (0..config.embed_dim)
                    .map(|_| format!("{:.6}", normal(&mut embed_rng) * 0.5))
                    .collect(),
            };
            writeln!(f, "{} {}", w, v.join(" "))?;
        }
    }

    // concreteness ratings: content words visual, "video" verbal
    {
        let mut f = BufWriter::new(File::create(out_dir.join("lexicon.tsv"))?);
        let mut rows: Vec<String> = concept_words(config)
            .into_iter()
            .chain(config.counts.iter().cloned())
            .chain(config.orders.iter().cloned())
            .collect();
        rows.sort();
        rows.dedup();
        for w in rows {
            writeln!(f, "{w}\t0.9")?;
        }
        writeln!(f, "video\t0.4")?;
    }

    // similarity: 1.0 identity (implicit), 0.6 within category, 0.0 across
    {
        let mut f = BufWriter::new(File::create(out_dir.join("similarity.tsv"))?);
        for cat in [
            &config.subjects,
            &config.objects,
            &config.locations,
            &config.counts,
            &config.orders,
        ] {
            for i in 0..cat.len() {
                for j in (i + 1)..cat.len() {
                    writeln!(f, "{}\t{}\t0.6", cat[i], cat[j])?;
                }
            }
        }
    }

    let mut scenes = Vec::new();
    for (split, count) in [
        ("train", config.train_samples),
        ("val", config.val_samples),
        ("test", config.test_samples),
    ] {
        if count == 0 {
            continue;
        }
        let split_dir = out_dir.join(split);
        fs::create_dir_all(split_dir.join("features"))?;
        let mut rng = substream(config.seed, &format!("scenes-{split}"));
        let mut questions = BufWriter::new(File::create(split_dir.join("questions.jsonl"))?);
        for i in 0..count {
            let video_id = format!("{split}{i:05}");
            let mut scene = draw_scene(config, split, &video_id, &mut rng);
            if config.compositional_split && split == "train" {
                // long who-questions are held out of training
                while scene.long && scene.qtype < 2 {
                    scene = draw_scene(config, split, &video_id, &mut rng);
                }
            }
            let frames = render_video(config, &scene, &concepts, &mut rng);
            write_features(
                &split_dir.join("features").join(format!("{video_id}.bin")),
                &frames,
            )?;
            let (question, parse) = render_question(config, &scene);
            let record = QASample {
                video_id: video_id.clone(),
                question,
                parse,
                answer: scene.answer.clone(),
                question_type: scene.question_type.clone(),
            };
            let line = serde_json::to_string(&record).expect("serializable record");
            writeln!(questions, "{line}")?;
            scenes.push(scene);
        }
        questions.flush()?;
    }

    Ok(GenerationSummary {
        scenes,
        answer_words: config.answer_words(),
        concepts,
    })
}

fn order_start(config: &SyntheticConfig, order: usize) -> usize {
    let span = config.frames - config.key_segment_len;
    match order {
        0 => 0,
        1 => span / 2,
        _ => span,
    }
}

/// Uniform index different from `not`.
fn other_index(rng: &mut StdRng, len: usize, not: usize) -> usize {
    let i = rng.gen_range(0..len - 1);
    if i >= not {
        i + 1
    } else {
        i
    }
}

fn draw_scene(
    config: &SyntheticConfig,
    split: &str,
    video_id: &str,
    rng: &mut StdRng,
) -> SceneRecord {
    let subject = rng.gen_range(0..config.subjects.len());
    let patient = other_index(rng, config.subjects.len(), subject);
    let action = rng.gen_range(0..config.actions.len());
    let object = rng.gen_range(0..config.objects.len());
    let location = rng.gen_range(0..config.locations.len());
    let count = rng.gen_range(1..=config.counts.len());
    let order = rng.gen_range(0..config.orders.len());
    let qtype_idx = rng.gen_range(0..6);
    let long = rng.gen_bool(config.long_question_fraction);
    let long_style = rng.gen_range(0..12u8);
    let with_decoy = rng.gen_bool(config.decoy_fraction);

    let key_start = order_start(config, order);

    let decoy = with_decoy.then(|| {
        let d_order = other_index(rng, config.orders.len(), order);
        DecoyScene {
            subject: other_index(rng, config.subjects.len(), subject),
            action: other_index(rng, config.actions.len(), action),
            object: other_index(rng, config.objects.len(), object),
            location: other_index(rng, config.locations.len(), location),
            count: {
                let c = other_index(rng, config.counts.len(), count - 1);
                c + 1
            },
            order: d_order,
            key_start: order_start(config, d_order),
        }
    });

    // who-questions split between the agent and the patient role; the two
    // templates share every word and differ only in structure
    let (question_type, answer) = match qtype_idx {
        0 => ("Object", config.subjects[subject].clone()), // who (agent)
        1 => ("Object", config.subjects[patient].clone()), // who (patient)
        2 => ("Object", config.objects[object].clone()),   // what
        3 => ("Location", config.locations[location].clone()), // where
        4 => ("Number", config.counts[count - 1].clone()), // how many
        _ => ("Time", config.orders[order].clone()),       // when
    };

    SceneRecord {
        split: split.to_string(),
        video_id: video_id.to_string(),
        subject,
        patient,
        action,
        object,
        location,
        count,
        order,
        key_start,
        question_type: question_type.to_string(),
        answer,
        qtype: qtype_idx as u8,
        long,
        long_style,
        decoy,
    }
}

/// The patient role writes its concept vector rotated by half the feature
/// width, so agent and patient occupy distinguishable subspaces.
fn role_shift(dim: usize) -> usize {
    dim / 2
}

fn add_concept(row: &mut [f64], concept: &[f64], times: f64, shift: usize) {
    let dim = row.len();
    for (i, c) in concept.iter().enumerate() {
        row[(i + shift) % dim] += times * c;
    }
}

/// Key frames carry `count x subject + action + object + location` concept
/// vectors plus the role-shifted patient, on top of background noise; a
/// decoy scene, when present, renders the same way into its own slot.
fn render_video(
    config: &SyntheticConfig,
    scene: &SceneRecord,
    concepts: &BTreeMap<String, Vec<f64>>,
    rng: &mut StdRng,
) -> Vec<Vec<f32>> {
    let shift = role_shift(config.feature_dim);
    let mut frames = Vec::with_capacity(config.frames);
    for t in 0..config.frames {
        let mut row: Vec<f64> = (0..config.feature_dim)
            .map(|_| normal(rng) * config.noise_sigma)
            .collect();
        if t >= scene.key_start && t < scene.key_start + config.key_segment_len {
            add_concept(&mut row, &concepts[&config.subjects[scene.subject]], scene.count as f64, 0);
            add_concept(&mut row, &concepts[&config.subjects[scene.patient]], 1.0, shift);
            add_concept(&mut row, &concepts[&config.actions[scene.action]], 1.0, 0);
            add_concept(&mut row, &concepts[&config.objects[scene.object]], 1.0, 0);
            add_concept(&mut row, &concepts[&config.locations[scene.location]], 1.0, 0);
        }
        if let Some(d) = &scene.decoy {
            if t >= d.key_start && t < d.key_start + config.key_segment_len {
                add_concept(&mut row, &concepts[&config.subjects[d.subject]], d.count as f64, 0);
                add_concept(&mut row, &concepts[&config.actions[d.action]], 1.0, 0);
                add_concept(&mut row, &concepts[&config.objects[d.object]], 1.0, 0);
                add_concept(&mut row, &concepts[&config.locations[d.location]], 1.0, 0);
            }
        }
        frames.push(row.into_iter().map(|x| x as f32).collect());
    }
    frames
}

/// A question fragment: surface tokens plus their bracketed subtree.
struct Frag {
    text: String,
    parse: String,
}

fn pp(prep: &str, noun: &str) -> Frag {
    Frag {
        text: format!("{prep} the {noun}"),
        parse: format!("(PP (IN {prep}) (NP (DT the) (NN {noun})))"),
    }
}

/// A relative clause `that is <pp>` wrapping one of the modifiers.
fn rel_clause(inner: Frag) -> Frag {
    Frag {
        text: format!("that is {}", inner.text),
        parse: format!(
            "(SBAR (WHNP (WDT that)) (S (VP (VBZ is) {})))",
            inner.parse
        ),
    }
}

/// Question text plus bracketed parse. Long variants append two trailing
/// modifiers chosen and ordered by `long_style` (one wrapped in a relative
/// clause), so long questions vary structurally, land in the (10, 15]
/// length bucket, and never mention the answer word.
///
/// The two who-templates share every word and differ only in structure:
/// "who is {act} the {obj}" asks for the agent, "who is the {sub} {act}"
/// asks for the patient.
fn render_question(config: &SyntheticConfig, scene: &SceneRecord) -> (String, String) {
    let sub = &config.subjects[scene.subject];
    let act = &config.actions[scene.action];
    let obj = &config.objects[scene.object];
    let loc = &config.locations[scene.location];
    let order_word = &config.orders[scene.order];
    let qtype = scene.qtype;

    // assemble from the main noun phrase (optionally carrying a relative
    // clause mid-sentence) and trailing verb-phrase modifiers
    let render = |np_mod: Option<&Frag>, vp_mods: &[Frag]| -> (String, String) {
        let np = |det: bool, noun: &str| -> Frag {
            let (t, p) = if det {
                (format!("the {noun}"), format!("(NP (DT the) (NN {noun}))"))
            } else {
                (noun.to_string(), format!("(NP (NN {noun}))"))
            };
            match np_mod {
                Some(m) => Frag {
                    text: format!("{t} {}", m.text),
                    parse: format!("(NP {p} {})", m.parse),
                },
                None => Frag { text: t, parse: p },
            }
        };
        let vp_text: String = vp_mods
            .iter()
            .map(|m| format!(" {}", m.text))
            .collect();
        let vp_parse: String = vp_mods
            .iter()
            .map(|m| format!(" {}", m.parse))
            .collect();
        match qtype {
            0 => {
                // the object NP hosts the clause here; there is no subject NP
                let npo = np(true, obj);
                (
                    format!("who is {act} {}{vp_text}", npo.text),
                    format!(
                        "(ROOT (SBARQ (WHNP (WP who)) (SQ (VBZ is) (VP (VBG {act}) {}{vp_parse}))))",
                        npo.parse
                    ),
                )
            }
            1 | 2 | 3 | 5 => {
                let (wh_text, wh_parse) = match qtype {
                    1 => ("who", "(WHNP (WP who))"),
                    2 => ("what", "(WHNP (WP what))"),
                    3 => ("where", "(WHADVP (WRB where))"),
                    _ => ("when", "(WHADVP (WRB when))"),
                };
                let nps = np(true, sub);
                (
                    format!("{wh_text} is {} {act}{vp_text}", nps.text),
                    format!(
                        "(ROOT (SBARQ {wh_parse} (SQ (VBZ is) {} (VP (VBG {act}){vp_parse}))))",
                        nps.parse
                    ),
                )
            }
            _ => {
                let nps = np(false, sub);
                (
                    format!("how many {} are {act}{vp_text}", nps.text),
                    format!(
                        "(ROOT (SBARQ (WHADJP (WRB how) (JJ many)) {} (SQ (VBP are) (VP (VBG {act}){vp_parse}))))",
                        nps.parse
                    ),
                )
            }
        }
    };

    if !scene.long {
        return render(None, &[]);
    }

    // modifier pool per type; none may mention the answer word
    let pool: [Frag; 3] = match qtype {
        0 => [pp("near", loc), pp("in", "video"), pp("in", order_word)],
        1 => [pp("near", loc), pp("in", "video"), pp("in", order_word)],
        2 => [pp("near", loc), pp("in", "video"), pp("in", order_word)],
        3 => [pp("with", obj), pp("in", "video"), pp("in", order_word)],
        4 => [pp("with", obj), pp("near", loc), pp("in", "video")],
        _ => [pp("with", obj), pp("near", loc), pp("in", "video")],
    };
    let [a, b, c] = pool;
    let (first, second) = match scene.long_style % 6 {
        0 => (a, b),
        1 => (b, a),
        2 => (a, c),
        3 => (c, a),
        4 => (b, c),
        _ => (c, b),
    };
    // one modifier becomes a relative clause; styles alternate between
    // hosting it on the main noun phrase (mid-sentence) and at the end of
    // the verb phrase
    let clause = rel_clause(first);
    if (scene.long_style / 6) % 2 == 0 {
        render(Some(&clause), &[second])
    } else {
        render(None, &[clause, second])
    }
}

/// Nearest-concept decoding of the queried slot from the mean key-segment
/// frame; the generator's own self-check. Strips every non-queried slot's
/// contribution, then nearest-matches the remainder against the queried
/// vocabulary. At zero noise this must recover the answer exactly.
pub fn decode_scene_slot(
    config: &SyntheticConfig,
    scene: &SceneRecord,
    video: &Tensor,
    concepts: &BTreeMap<String, Vec<f64>>,
) -> String {
    let dim = config.feature_dim;
    let shift = role_shift(dim);
    let mut mean = vec![0.0f64; dim];
    for t in scene.key_start..scene.key_start + config.key_segment_len {
        for (m, x) in mean.iter_mut().zip(&video.data()[t * dim..(t + 1) * dim]) {
            *m += x / config.key_segment_len as f64;
        }
    }

    let strip = |mean: &mut Vec<f64>, word: &str, times: f64, s: usize| {
        let dim = mean.len();
        for (i, c) in concepts[word].iter().enumerate() {
            mean[(i + s) % dim] -= times * c;
        }
    };
    let dist = |mean: &[f64], word: &str, times: f64, s: usize| -> f64 {
        let dim = mean.len();
        let mut total = 0.0;
        for (i, c) in concepts[word].iter().enumerate() {
            let d = mean[(i + s) % dim] - times * c;
            total += d * d;
        }
        total
    };

    let sub = config.subjects[scene.subject].as_str();
    let pat = config.subjects[scene.patient].as_str();
    let act = config.actions[scene.action].as_str();
    let obj = config.objects[scene.object].as_str();
    let loc = config.locations[scene.location].as_str();
    let count = scene.count as f64;

    match scene.qtype {
        0 => {
            // agent
            strip(&mut mean, pat, 1.0, shift);
            strip(&mut mean, act, 1.0, 0);
            strip(&mut mean, obj, 1.0, 0);
            strip(&mut mean, loc, 1.0, 0);
            best_match(&config.subjects, |w| dist(&mean, w, count, 0))
        }
        1 => {
            // patient, in the role-shifted subspace
            strip(&mut mean, sub, count, 0);
            strip(&mut mean, act, 1.0, 0);
            strip(&mut mean, obj, 1.0, 0);
            strip(&mut mean, loc, 1.0, 0);
            best_match(&config.subjects, |w| dist(&mean, w, 1.0, shift))
        }
        2 => {
            strip(&mut mean, sub, count, 0);
            strip(&mut mean, pat, 1.0, shift);
            strip(&mut mean, act, 1.0, 0);
            strip(&mut mean, loc, 1.0, 0);
            best_match(&config.objects, |w| dist(&mean, w, 1.0, 0))
        }
        3 => {
            strip(&mut mean, sub, count, 0);
            strip(&mut mean, pat, 1.0, shift);
            strip(&mut mean, act, 1.0, 0);
            strip(&mut mean, obj, 1.0, 0);
            best_match(&config.locations, |w| dist(&mean, w, 1.0, 0))
        }
        4 => {
            strip(&mut mean, pat, 1.0, shift);
            strip(&mut mean, act, 1.0, 0);
            strip(&mut mean, obj, 1.0, 0);
            strip(&mut mean, loc, 1.0, 0);
            let best = (1..=config.counts.len())
                .min_by(|a, b| {
                    dist(&mean, sub, *a as f64, 0)
                        .partial_cmp(&dist(&mean, sub, *b as f64, 0))
                        .expect("finite")
                })
                .expect("nonempty counts");
            config.counts[best - 1].clone()
        }
        _ => {
            // Time: pick the candidate segment whose mean best matches the
            // true scene's concept sum (a decoy elsewhere carries different
            // concepts, so content matching stays unambiguous)
            let mut expect = vec![0.0f64; dim];
            for (word, times, s) in [
                (sub, count, 0),
                (pat, 1.0, shift),
                (act, 1.0, 0),
                (obj, 1.0, 0),
                (loc, 1.0, 0),
            ] {
                for (i, c) in concepts[word].iter().enumerate() {
                    expect[(i + s) % dim] += times * c;
                }
            }
            let seg_dist = |order: usize| -> f64 {
                let start = order_start(config, order);
                let mut seg_mean = vec![0.0f64; dim];
                for t in start..start + config.key_segment_len {
                    for (m, x) in seg_mean.iter_mut().zip(&video.data()[t * dim..(t + 1) * dim]) {
                        *m += x / config.key_segment_len as f64;
                    }
                }
                seg_mean
                    .iter()
                    .zip(&expect)
                    .map(|(m, e)| (m - e) * (m - e))
                    .sum()
            };
            let best = (0..config.orders.len())
                .min_by(|a, b| seg_dist(*a).partial_cmp(&seg_dist(*b)).expect("finite"))
                .expect("nonempty orders");
            config.orders[best].clone()
        }
    }
}

fn best_match<F: Fn(&str) -> f64>(words: &[String], dist: F) -> String {
    words
        .iter()
        .min_by(|a, b| dist(a).partial_cmp(&dist(b)).expect("finite"))
        .expect("nonempty vocabulary")
        .clone()
}
