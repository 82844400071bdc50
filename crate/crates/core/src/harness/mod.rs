//! Experiment drivers: synthetic corpora, the needle-in-a-haystack grid,
//! policy-conditioned scoring, decode benchmarking, and the training loop.

mod bench;
mod corpus;
mod eval;
mod text;
mod train;

pub use bench::{bench_runtime, RuntimeReport};
pub use corpus::{make_corpus, make_needle, CorpusStyle, NeedleTask, MEMBERSHIP_MAX_INTERNAL};
pub use eval::{eval_needle_grid, next_token_accuracy, perplexity, NeedleGrid};
pub use text::{
    decode_text, encode_text, ANCHOR_TOKEN, FALSE_TOKEN, LINEBREAK_TOKEN, TRUE_TOKEN, VOCAB_SIZE,
};
pub use train::{train_model, TrainOptions, TrainedModel};
