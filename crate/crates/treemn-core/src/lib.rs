//! Tree-structured attention networks for video question answering.
//!
//! The crate covers the full experimental loop: a small reverse-mode
//! autodiff engine ([`tensor`]), bracketed parse trees with visual/verbal
//! node labeling ([`tree`]), word embeddings ([`embedding`]), a
//! bidirectional LSTM video encoder ([`video`]), temporal soft attention
//! ([`attention`]), five model variants over trees and token chains
//! ([`model`]), Adam training with clipping and early stopping ([`train`]),
//! accuracy/WUPS evaluation with breakdowns ([`eval`]), and dataset I/O
//! plus a synthetic compositional benchmark generator ([`data`]).

pub mod attention;
pub mod data;
pub mod embedding;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod tree;
pub mod video;

pub use attention::AttentionParams;
pub use embedding::EmbeddingTable;
pub use eval::{EvalReport, SimilarityTable};
pub use model::{AnswerDistribution, ModelDims, ModelParams, Variant};
pub use tensor::{Tape, Tensor, TensorError, Value};
pub use train::{AdamState, TrainConfig};
pub use tree::{ConcretenessLexicon, TreeNode, VType};
pub use video::LstmParams;
