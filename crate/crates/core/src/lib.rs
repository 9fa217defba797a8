//! Desk-scale multilingual neural machine translation toolkit.
//!
//! The crate covers the full pipeline needed to study zero-shot translation
//! on small synthetic corpora: parallel corpus handling and mixture
//! construction, byte-pair encoding, the multilingual preprocessing schemes
//! (language coding + target forcing, target-token-only, language factors),
//! vocabulary building with per-language partitions and target-dictionary
//! filter masks, a bidirectional LSTM encoder / attention / LSTM decoder
//! network with reverse-mode differentiation, Adam training, beam-search
//! decoding with optional language filtering, pivot and back-translation,
//! and corpus BLEU plus wrong-language diagnostics.
//!
//! Everything is seeded and deterministic: the same configuration produces
//! byte-identical artifacts across runs.

pub mod corpus;
pub mod decode;
pub mod eval;
pub mod nnet;
pub mod preprocess;
pub mod subword;
pub mod tensor;
pub mod train;
pub mod vocab;

mod autograd;
mod num;

pub use corpus::{Direction, LanguageCode, LanguageRegistry, MixtureStrategy, ParallelCorpus, SentencePair};
pub use tensor::Tensor;

/// Crate-wide error type aggregating the per-module errors.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Subword(#[from] subword::SubwordError),
    #[error(transparent)]
    Preproc(#[from] preprocess::PreprocError),
    #[error(transparent)]
    Vocab(#[from] vocab::VocabError),
    #[error(transparent)]
    Nnet(#[from] nnet::NnetError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Decode(#[from] decode::DecodeError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
