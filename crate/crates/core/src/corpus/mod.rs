//! Corpus ingestion: FewRel-format JSON, GloVe embeddings, instance
//! indexing, and synthetic cross-domain generation.

mod fewrel;
mod glove;
mod index;
mod synth;

pub use fewrel::{load_fewrel_json, save_fewrel_json, Instance, RelationCorpus};
pub use glove::{load_glove, EmbeddingTable, Vocabulary, PAD_ID, UNK_ID};
pub use index::{
    index_corpus, index_instance, pad_position_id, position_id, position_rows, IndexStats,
    IndexedCorpus, IndexedInstance,
};
pub use synth::{pattern_of, synth_generate, SynthConfig};
