//! Synthetic multilingual corpora with exact word alignments, batching
//! and the mono/bilingual batch schedule.

mod batch;
mod grammar;
mod io;
mod language;
mod scheduler;
mod vocab;

pub use batch::{bilingual_row, make_batch, pack_ranges, Batch, BilingualRow, DataType, Example, MonoSentence};
pub use grammar::{generate_base_corpus, Grammar, GrammarConfig, Slot, WordClass};
pub use io::CorpusFile;
pub use language::{build_bilingual_example, derive_language, ParallelExample, Reorder, ToyLanguageSpec, World};
pub use scheduler::{BatchScheduler, PairStream, ScheduleConfig};
pub use vocab::{Vocabulary, BOS, EOS, MASK, NUM_SPECIALS, PAD, SEP};
