//! N-way K-shot episode construction: support and query sets from the task
//! corpus, plus a source-domain adversarial set drawn from relations
//! disjoint with the episode's.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{IndexedCorpus, IndexedInstance};
use crate::error::{Error, Result};

/// Episode shape: N relations, K support and `q_query` query instances per
/// relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.q_query == 0 {
            return Err(Error::Config(format!(
                "episode shape must be positive, got {}-way {}-shot {}-query",
                self.n_way, self.k_shot, self.q_query
            )));
        }
        Ok(())
    }
}

/// Source-domain instances from relations disjoint with the episode's.
/// `support_part` mirrors the episode support size exactly (N x K) so the
/// discriminator always sees a balanced two-class batch; `query_part`
/// carries the instances the test-time finetune objective is scored on.
#[derive(Clone, Debug)]
pub struct AdversarialSet {
    pub relations: Vec<String>,
    pub support_part: Vec<Vec<IndexedInstance>>,
    pub query_part: Vec<Vec<IndexedInstance>>,
}

/// One meta-task: support, query, and the adversarial set.
#[derive(Clone, Debug)]
pub struct Episode {
    /// Relation ids; the position of a relation here is its class label.
    pub relations: Vec<String>,
    pub support: Vec<Vec<IndexedInstance>>,
    pub query: Vec<Vec<IndexedInstance>>,
    pub adversarial: AdversarialSet,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.relations.len()
    }

    /// Flat view of the support set with class labels.
    pub fn support_flat(&self) -> Vec<(&IndexedInstance, usize)> {
        flatten(&self.support)
    }

    pub fn query_flat(&self) -> Vec<(&IndexedInstance, usize)> {
        flatten(&self.query)
    }

    /// Compact JSON description (relations and instance indices only) for
    /// debugging and fixtures.
    pub fn dump(&self) -> EpisodeDump {
        let indices = |groups: &[Vec<IndexedInstance>]| {
            groups.iter().map(|g| g.iter().map(|i| i.corpus_index).collect()).collect()
        };
        EpisodeDump {
            relations: self.relations.clone(),
            support: indices(&self.support),
            query: indices(&self.query),
            adversarial_relations: self.adversarial.relations.clone(),
            adversarial_support: indices(&self.adversarial.support_part),
            adversarial_query: indices(&self.adversarial.query_part),
        }
    }
}

pub fn flatten(groups: &[Vec<IndexedInstance>]) -> Vec<(&IndexedInstance, usize)> {
    groups
        .iter()
        .enumerate()
        .flat_map(|(label, g)| g.iter().map(move |inst| (inst, label)))
        .collect()
}

/// Debug/fixture dump: relation ids and instance indices only.
#[derive(Clone, Debug, Serialize)]
pub struct EpisodeDump {
    pub relations: Vec<String>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
    pub adversarial_relations: Vec<String>,
    pub adversarial_support: Vec<Vec<usize>>,
    pub adversarial_query: Vec<Vec<usize>>,
}

/// Relations with enough instances for one episode slot.
fn eligible_relations(corpus: &IndexedCorpus, need: usize) -> Vec<usize> {
    (0..corpus.n_relations()).filter(|&r| corpus.instances(r).len() >= need).collect()
}

fn draw_group(
    corpus: &IndexedCorpus,
    rel_idx: usize,
    k: usize,
    q: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<IndexedInstance>, Vec<IndexedInstance>) {
    let pool = corpus.instances(rel_idx);
    let picks = sample(rng, pool.len(), k + q);
    let mut support = Vec::with_capacity(k);
    let mut query = Vec::with_capacity(q);
    for (i, pick) in picks.into_iter().enumerate() {
        if i < k {
            support.push(pool[pick].clone());
        } else {
            query.push(pool[pick].clone());
        }
    }
    (support, query)
}

/// Sample the adversarial set: N source relations excluding `exclude`, each
/// contributing K support-part and `q_query` query-part instances.
pub fn sample_adversarial(
    source: &IndexedCorpus,
    exclude: &[String],
    cfg: &EpisodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdversarialSet> {
    cfg.validate()?;
    let need = cfg.k_shot + cfg.q_query;
    let candidates: Vec<usize> = eligible_relations(source, need)
        .into_iter()
        .filter(|&r| !exclude.contains(&source.relation_ids()[r]))
        .collect();
    if candidates.len() < cfg.n_way {
        return Err(Error::Sampling(format!(
            "adversarial sampling needs {} source relations with >= {need} instances \
             outside the episode, found {}",
            cfg.n_way,
            candidates.len()
        )));
    }
    let picks = sample(rng, candidates.len(), cfg.n_way);
    let mut relations = Vec::with_capacity(cfg.n_way);
    let mut support_part = Vec::with_capacity(cfg.n_way);
    let mut query_part = Vec::with_capacity(cfg.n_way);
    for pick in picks {
        let rel_idx = candidates[pick];
        relations.push(source.relation_ids()[rel_idx].clone());
        let (s, q) = draw_group(source, rel_idx, cfg.k_shot, cfg.q_query, rng);
        support_part.push(s);
        query_part.push(q);
    }
    Ok(AdversarialSet { relations, support_part, query_part })
}

/// Sample one episode: relations without replacement from `corpus`,
/// instances without replacement within each relation, and an adversarial
/// set from `source` excluding the episode's relations.
pub fn sample_episode(
    corpus: &IndexedCorpus,
    source: &IndexedCorpus,
    cfg: &EpisodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    cfg.validate()?;
    let need = cfg.k_shot + cfg.q_query;
    let eligible = eligible_relations(corpus, need);
    if eligible.len() < cfg.n_way {
        return Err(Error::Sampling(format!(
            "corpus `{}` has {} relations with >= {need} instances, need {}",
            corpus.domain,
            eligible.len(),
            cfg.n_way
        )));
    }
    let picks = sample(rng, eligible.len(), cfg.n_way);
    let mut relations = Vec::with_capacity(cfg.n_way);
    let mut support = Vec::with_capacity(cfg.n_way);
    let mut query = Vec::with_capacity(cfg.n_way);
    for pick in picks {
        let rel_idx = eligible[pick];
        relations.push(corpus.relation_ids()[rel_idx].clone());
        let (s, q) = draw_group(corpus, rel_idx, cfg.k_shot, cfg.q_query, rng);
        support.push(s);
        query.push(q);
    }
    let adversarial = sample_adversarial(source, &relations, cfg, rng)?;
    Ok(Episode { relations, support, query, adversarial })
}

/// Reproducible episode sequence over shared immutable corpora. Construction
/// validates the size preconditions once; iteration cannot fail afterwards.
pub struct EpisodeStream<'a> {
    corpus: &'a IndexedCorpus,
    source: &'a IndexedCorpus,
    cfg: EpisodeConfig,
    rng: ChaCha8Rng,
}

impl<'a> EpisodeStream<'a> {
    pub fn new(
        corpus: &'a IndexedCorpus,
        source: &'a IndexedCorpus,
        cfg: EpisodeConfig,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let need = cfg.k_shot + cfg.q_query;
        if eligible_relations(corpus, need).len() < cfg.n_way {
            return Err(Error::Sampling(format!(
                "corpus `{}` cannot supply {}-way episodes with {need} instances per relation",
                corpus.domain, cfg.n_way
            )));
        }
        // Worst case every episode relation is also a source relation.
        let overlap = corpus
            .relation_ids()
            .iter()
            .filter(|r| source.relation_ids().contains(r))
            .count();
        let reserve = cfg.n_way.min(overlap);
        if eligible_relations(source, need).len() < cfg.n_way + reserve {
            return Err(Error::Sampling(format!(
                "source corpus `{}` cannot supply {}-way adversarial sets \
                 (needs {} eligible relations)",
                source.domain,
                cfg.n_way,
                cfg.n_way + reserve
            )));
        }
        Ok(EpisodeStream { corpus, source, cfg, rng })
    }
}

impl Iterator for EpisodeStream<'_> {
    type Item = Episode;

    fn next(&mut self) -> Option<Episode> {
        Some(
            sample_episode(self.corpus, self.source, &self.cfg, &mut self.rng)
                .expect("stream preconditions validated at construction"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{index_corpus, synth_generate, EmbeddingTable, SynthConfig};
    use crate::rng::stream_rng;
    use std::collections::BTreeSet;

    fn corpora(n_rel: usize, per_rel: usize) -> (IndexedCorpus, IndexedCorpus) {
        let cfg = SynthConfig {
            n_relations: n_rel,
            instances_per_relation: per_rel,
            vocab_size: 4 * n_rel + 40,
            domain_shift: 0.5,
        };
        let (source, target) = synth_generate(&cfg, 77).unwrap();
        let vocab: Vec<String> = source.vocabulary().union(&target.vocabulary()).cloned().collect();
        let table = EmbeddingTable::<f32>::random(vocab, 8, 0).unwrap();
        let (src, _) = index_corpus(&source, table.vocabulary(), 16).unwrap();
        let (tgt, _) = index_corpus(&target, table.vocabulary(), 16).unwrap();
        (src, tgt)
    }

    fn identity(inst: &IndexedInstance) -> (String, usize) {
        (inst.relation.clone(), inst.corpus_index)
    }

    #[test]
    fn episode_shapes_match_config() {
        let (src, _) = corpora(12, 10);
        let cfg = EpisodeConfig { n_way: 5, k_shot: 1, q_query: 5 };
        let mut rng = stream_rng(0, "t");
        let ep = sample_episode(&src, &src, &cfg, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert!(ep.support.iter().all(|g| g.len() == 1));
        assert!(ep.query.iter().all(|g| g.len() == 5));
        assert_eq!(ep.adversarial.support_part.len(), 5);
        assert!(ep.adversarial.support_part.iter().all(|g| g.len() == 1));
    }

    #[test]
    fn support_query_disjoint_and_adversarial_relations_excluded() {
        let (src, _) = corpora(12, 10);
        let cfg = EpisodeConfig { n_way: 4, k_shot: 2, q_query: 3 };
        let mut rng = stream_rng(3, "t");
        for _ in 0..50 {
            let ep = sample_episode(&src, &src, &cfg, &mut rng).unwrap();
            let s: BTreeSet<_> = ep.support_flat().iter().map(|(i, _)| identity(i)).collect();
            let q: BTreeSet<_> = ep.query_flat().iter().map(|(i, _)| identity(i)).collect();
            assert!(s.is_disjoint(&q));
            for rel in &ep.adversarial.relations {
                assert!(!ep.relations.contains(rel));
            }
            for group in ep.adversarial.support_part.iter().chain(&ep.adversarial.query_part) {
                for inst in group {
                    assert!(!ep.relations.contains(&inst.relation));
                }
            }
        }
    }

    #[test]
    fn exact_fit_corpus_uses_every_instance_once() {
        let (src, _) = corpora(8, 4);
        // 4-way episodes, k + q = 4 instances per relation: with a corpus of
        // exactly n relations and k+q instances, one episode uses everything.
        let cfg = EpisodeConfig { n_way: 8, k_shot: 1, q_query: 3 };
        // Need a source with extra relations for A; use a bigger pool.
        let (big_src, _) = corpora(20, 8);
        let mut rng = stream_rng(5, "t");
        let ep = sample_episode(&src, &big_src, &cfg, &mut rng).unwrap();
        let mut seen: BTreeSet<(String, usize)> = BTreeSet::new();
        for (inst, _) in ep.support_flat().iter().chain(ep.query_flat().iter()) {
            assert!(seen.insert(identity(inst)), "instance reused");
        }
        assert_eq!(seen.len(), 8 * 4);
    }

    #[test]
    fn streams_are_deterministic_in_seed() {
        let (src, tgt) = corpora(10, 12);
        let cfg = EpisodeConfig { n_way: 3, k_shot: 2, q_query: 2 };
        let collect = || {
            EpisodeStream::new(&tgt, &src, cfg, stream_rng(7, "stream"))
                .unwrap()
                .take(20)
                .map(|e| serde_json::to_string(&e.dump()).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(collect(), collect());
        assert_eq!(collect().len(), 20);
    }

    #[test]
    fn meta_test_stream_keeps_adversarial_sets_in_source() {
        let (src, tgt) = corpora(10, 12);
        let cfg = EpisodeConfig { n_way: 3, k_shot: 2, q_query: 2 };
        let stream = EpisodeStream::new(&tgt, &src, cfg, stream_rng(11, "stream")).unwrap();
        let source_rels: BTreeSet<_> = src.relation_ids().iter().cloned().collect();
        for ep in stream.take(100) {
            for rel in &ep.adversarial.relations {
                assert!(source_rels.contains(rel));
                assert!(!ep.relations.contains(rel));
            }
        }
    }

    #[test]
    fn relation_frequencies_are_uniform() {
        let (src, _) = corpora(10, 8);
        let cfg = EpisodeConfig { n_way: 3, k_shot: 1, q_query: 1 };
        let mut rng = stream_rng(23, "freq");
        let mut counts = vec![0usize; 10];
        let trials = 10_000;
        for _ in 0..trials {
            let ep = sample_episode(&src, &src, &cfg, &mut rng).unwrap();
            for rel in &ep.relations {
                let idx = src.relation_ids().iter().position(|r| r == rel).unwrap();
                counts[idx] += 1;
            }
        }
        let expected = trials as f64 * 3.0 / 10.0;
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - expected).abs() / expected;
            assert!(dev < 0.02, "relation {i} frequency off by {dev:.4}");
        }
    }

    #[test]
    fn insufficient_relations_error_is_descriptive() {
        let (src, _) = corpora(4, 6);
        let cfg = EpisodeConfig { n_way: 5, k_shot: 1, q_query: 1 };
        let mut rng = stream_rng(0, "t");
        let err = sample_episode(&src, &src, &cfg, &mut rng).unwrap_err();
        assert!(err.to_string().contains("need 5"), "{err}");
    }
}
