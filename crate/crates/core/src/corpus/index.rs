//! Instance indexing: surface tokens to embedding row ids plus clipped
//! relative-position features for the head and tail entities.

use crate::corpus::fewrel::{Instance, RelationCorpus};
use crate::corpus::glove::{Vocabulary, PAD_ID};
use crate::error::{Error, Result};

/// A fixed-length, id-encoded instance ready for the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexedInstance {
    /// Relation id this instance belongs to.
    pub relation: String,
    /// Position of the instance within its relation's list; together with
    /// `relation` this is the instance's identity.
    pub corpus_index: usize,
    /// Embedding row per token, PAD-padded to `max_len`.
    pub token_ids: Vec<u32>,
    /// Clipped relative distance to the head-span start, shifted to
    /// `[0, 2*max_len]`; padding slots carry the sentinel `2*max_len + 1`.
    pub head_pos_ids: Vec<u32>,
    /// Same, for the tail-span start.
    pub tail_pos_ids: Vec<u32>,
    /// Original (pre-padding) token count, capped at `max_len`.
    pub len: usize,
}

/// Shifted clip of a relative token offset into `[0, 2*max_len]`.
pub fn position_id(token_index: usize, anchor: usize, max_len: usize) -> u32 {
    let rel = token_index as i64 - anchor as i64;
    let m = max_len as i64;
    (rel.clamp(-m, m) + m) as u32
}

/// Sentinel position id used for PAD slots; one row past the real range.
pub fn pad_position_id(max_len: usize) -> u32 {
    2 * max_len as u32 + 1
}

/// Number of rows a position-embedding table needs for `max_len`.
pub fn position_rows(max_len: usize) -> usize {
    2 * max_len + 2
}

/// Encode one instance. Truncation keeps the sentence prefix; an entity
/// span falling outside the truncated window is an error (corpus-level
/// indexing skips such instances with a warning).
pub fn index_instance(
    instance: &Instance,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<IndexedInstance> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be >= 1".into()));
    }
    instance.validate()?;
    if instance.head_span.1 > max_len || instance.tail_span.1 > max_len {
        return Err(Error::Corpus(format!(
            "entity span beyond max_len {max_len} (head {}..{}, tail {}..{})",
            instance.head_span.0, instance.head_span.1, instance.tail_span.0, instance.tail_span.1
        )));
    }
    let len = instance.tokens.len().min(max_len);
    let mut token_ids = Vec::with_capacity(max_len);
    let mut head_pos_ids = Vec::with_capacity(max_len);
    let mut tail_pos_ids = Vec::with_capacity(max_len);
    for (i, token) in instance.tokens.iter().take(len).enumerate() {
        token_ids.push(vocab.lookup(token));
        head_pos_ids.push(position_id(i, instance.head_span.0, max_len));
        tail_pos_ids.push(position_id(i, instance.tail_span.0, max_len));
    }
    let sentinel = pad_position_id(max_len);
    token_ids.resize(max_len, PAD_ID);
    head_pos_ids.resize(max_len, sentinel);
    tail_pos_ids.resize(max_len, sentinel);
    Ok(IndexedInstance {
        relation: instance.relation.clone(),
        corpus_index: 0,
        token_ids,
        head_pos_ids,
        tail_pos_ids,
        len,
    })
}

/// A fully indexed corpus: relation ids in sorted order, each with its
/// encoded instances. Immutable after construction.
#[derive(Clone, Debug)]
pub struct IndexedCorpus {
    pub domain: String,
    relations: Vec<String>,
    instances: Vec<Vec<IndexedInstance>>,
    pub max_len: usize,
}

/// Per-corpus indexing outcome counters.
#[derive(Clone, Debug, Default)]
pub struct IndexStats {
    pub indexed: usize,
    /// Instances skipped because an entity span fell outside `max_len`.
    pub skipped: usize,
    /// Relations dropped because every instance was skipped.
    pub dropped_relations: usize,
}

impl IndexedCorpus {
    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn relation_ids(&self) -> &[String] {
        &self.relations
    }

    pub fn instances(&self, rel_idx: usize) -> &[IndexedInstance] {
        &self.instances[rel_idx]
    }

    pub fn total_instances(&self) -> usize {
        self.instances.iter().map(Vec::len).sum()
    }
}

/// Index every instance of a corpus. Span-overflow instances are skipped
/// with a warning; an entirely empty result is an error.
pub fn index_corpus(
    corpus: &RelationCorpus,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(IndexedCorpus, IndexStats)> {
    let mut stats = IndexStats::default();
    let mut relations = Vec::new();
    let mut instances = Vec::new();
    for (relation, insts) in corpus.iter() {
        let mut indexed = Vec::with_capacity(insts.len());
        for (i, inst) in insts.iter().enumerate() {
            match index_instance(inst, vocab, max_len) {
                Ok(mut enc) => {
                    enc.corpus_index = indexed.len();
                    indexed.push(enc);
                }
                Err(Error::Corpus(msg)) => {
                    log::warn!("skipping relation `{relation}` instance {i}: {msg}");
                    stats.skipped += 1;
                }
                Err(other) => return Err(other),
            }
        }
        if indexed.is_empty() {
            log::warn!("dropping relation `{relation}`: every instance was skipped");
            stats.dropped_relations += 1;
            continue;
        }
        stats.indexed += indexed.len();
        relations.push(relation.to_string());
        instances.push(indexed);
    }
    if relations.is_empty() {
        return Err(Error::Corpus(format!(
            "corpus `{}` has no indexable instances at max_len {max_len}",
            corpus.domain
        )));
    }
    Ok((IndexedCorpus { domain: corpus.domain.clone(), relations, instances, max_len }, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(
            ["the", "dog", "bit", "a", "mail", "carrier"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
    }

    fn instance() -> Instance {
        Instance {
            tokens: ["the", "dog", "bit", "a", "mail", "carrier"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            head_span: (1, 2),
            tail_span: (4, 6),
            relation: "r0".into(),
        }
    }

    #[test]
    fn head_start_gets_center_position_id() {
        let enc = index_instance(&instance(), &vocab(), 8).unwrap();
        assert_eq!(enc.head_pos_ids[1], 8); // relative distance 0 -> max_len
        assert_eq!(enc.tail_pos_ids[4], 8);
    }

    #[test]
    fn clip_boundary_maps_to_extremes() {
        // Direct check of the shifted-clip helper at and past the clip point.
        let m = 16;
        assert_eq!(position_id(m + 0, 0, m), 2 * m as u32);
        assert_eq!(position_id(m + 5, 0, m), 2 * m as u32);
        assert_eq!(position_id(0, m, m), 0);
        assert_eq!(position_id(0, m + 5, m), 0);
    }

    #[test]
    fn full_sequences_match_per_token_loop() {
        let inst = instance();
        let v = vocab();
        let max_len = 9;
        let enc = index_instance(&inst, &v, max_len).unwrap();
        // Independent per-token recomputation.
        for i in 0..max_len {
            if i < inst.tokens.len() {
                assert_eq!(enc.token_ids[i], v.lookup(&inst.tokens[i]));
                let h = (i as i64 - 1).clamp(-9, 9) + 9;
                let t = (i as i64 - 4).clamp(-9, 9) + 9;
                assert_eq!(enc.head_pos_ids[i], h as u32);
                assert_eq!(enc.tail_pos_ids[i], t as u32);
            } else {
                assert_eq!(enc.token_ids[i], PAD_ID);
                assert_eq!(enc.head_pos_ids[i], pad_position_id(max_len));
                assert_eq!(enc.tail_pos_ids[i], pad_position_id(max_len));
            }
        }
        assert_eq!(enc.len, 6);
        // Position ids stay in [0, 2*max_len] for real tokens.
        for i in 0..enc.len {
            assert!(enc.head_pos_ids[i] <= 2 * max_len as u32);
        }
    }

    #[test]
    fn span_past_max_len_is_an_error() {
        let err = index_instance(&instance(), &vocab(), 4).unwrap_err();
        assert!(err.to_string().contains("span beyond max_len"), "{err}");
    }

    #[test]
    fn oov_tokens_map_to_unk() {
        let mut inst = instance();
        inst.tokens[0] = "zebra".into();
        let enc = index_instance(&inst, &vocab(), 8).unwrap();
        assert_eq!(enc.token_ids[0], crate::corpus::glove::UNK_ID);
    }

    #[test]
    fn corpus_indexing_skips_overflowing_instances() {
        let mut corpus = RelationCorpus::new("t");
        let mut long = instance();
        long.tokens.extend(std::iter::repeat("the".to_string()).take(10));
        long.tail_span = (14, 15);
        corpus.insert("r0", vec![instance(), long]).unwrap();
        let (indexed, stats) = index_corpus(&corpus, &vocab(), 8).unwrap();
        assert_eq!(stats.indexed, 1);
        assert_eq!(stats.skipped, 1);
        assert_eq!(indexed.total_instances(), 1);
    }
}
