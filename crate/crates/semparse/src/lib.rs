//! A toolkit for training natural-language-to-logical-form parsers.
//!
//! The parser is a discriminative log-linear model over latent hybrid trees:
//! joint structures that attach every word of a sentence to exactly one node
//! of a tree-shaped logical form. Inference (partition functions, feature
//! expectations, Viterbi decoding) runs as dynamic programs over span charts.
//! Parsers for one language can be augmented with distributed representations
//! of semantic units, learned by truncated SVD over a semantics-word
//! co-occurrence matrix assembled from the other languages in a multilingual
//! corpus, and optionally with a window-based neural scoring function.
//!
//! ```
//! use semparse::corpus::{head_split, load_corpus_str};
//! use semparse::hybridtree::decode;
//! use semparse::logic::serialize_mrl;
//! use semparse::trainer::{train, TrainConfig};
//!
//! let corpus = load_corpus_str(
//!     "lang en\n%%\nQ:ask(E)\nE:river()\nE:city()\n%%\n\
//!      id 0 en\nnl: show the river\nmrl: ask(river)\n\
//!      id 1 en\nnl: show the city\nmrl: ask(city)\n\
//!      id 2 en\nnl: the river show\nmrl: ask(river)\n",
//!     "inline",
//! )?;
//! let split = head_split(&corpus, "en", 2)?;
//! let (train_set, _, _) = split.materialize(&corpus);
//! let (model, _report) = train(&train_set, None, &TrainConfig::default(), None)?;
//!
//! let tokens: Vec<String> = "show the city".split(' ').map(String::from).collect();
//! let tree = decode(&tokens, &model).expect("a parse");
//! assert_eq!(serialize_mrl(&tree), "ask(city)");
//! # Ok::<(), semparse::Error>(())
//! ```

pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod evaluator;
pub mod hybridtree;
pub mod linalg;
pub mod logic;
pub mod neural;
pub mod trainer;

#[cfg(any(test, feature = "oracle"))]
pub mod oracle;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
