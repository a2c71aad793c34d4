//! FewRel-format JSON corpora: one top-level object mapping a relation id to
//! an array of instance records, each carrying pre-tokenized text and
//! head/tail entity mentions with token positions.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled sentence with head/tail entity spans (inclusive-exclusive
/// token index ranges).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub tokens: Vec<String>,
    pub head_span: (usize, usize),
    pub tail_span: (usize, usize),
    pub relation: String,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        for (what, (start, end)) in
            [("head", self.head_span), ("tail", self.tail_span)]
        {
            if start >= end || end > n {
                return Err(Error::Corpus(format!(
                    "{what} span {start}..{end} out of range for {n} tokens"
                )));
            }
        }
        if self.head_span == self.tail_span {
            return Err(Error::Corpus(format!(
                "head and tail share the span {}..{}",
                self.head_span.0, self.head_span.1
            )));
        }
        Ok(())
    }
}

/// All instances of a domain, grouped by relation id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationCorpus {
    relations: BTreeMap<String, Vec<Instance>>,
    pub domain: String,
}

impl RelationCorpus {
    pub fn new(domain: &str) -> Self {
        RelationCorpus { relations: BTreeMap::new(), domain: domain.to_string() }
    }

    pub fn insert(&mut self, relation: &str, mut instances: Vec<Instance>) -> Result<()> {
        if instances.is_empty() {
            return Err(Error::Corpus(format!("relation `{relation}` has no instances")));
        }
        for inst in instances.iter_mut() {
            inst.relation = relation.to_string();
            inst.validate().map_err(|e| {
                Error::Corpus(format!("relation `{relation}`: {e}"))
            })?;
        }
        if self.relations.insert(relation.to_string(), instances).is_some() {
            return Err(Error::Corpus(format!("duplicate relation `{relation}`")));
        }
        Ok(())
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = &str> {
        self.relations.keys().map(|s| s.as_str())
    }

    pub fn instances(&self, relation: &str) -> Option<&[Instance]> {
        self.relations.get(relation).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Instance])> {
        self.relations.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn total_instances(&self) -> usize {
        self.relations.values().map(Vec::len).sum()
    }

    /// Every surface token appearing anywhere in the corpus.
    pub fn vocabulary(&self) -> std::collections::BTreeSet<String> {
        self.relations
            .values()
            .flatten()
            .flat_map(|i| i.tokens.iter().cloned())
            .collect()
    }
}

/// Entity mention as stored in FewRel: `[surface name, kb id, [[token positions], ...]]`.
#[derive(Debug, Serialize, Deserialize)]
struct RawEntity(String, String, Vec<Vec<usize>>);

#[derive(Debug, Serialize, Deserialize)]
struct RawInstance {
    tokens: Vec<String>,
    h: RawEntity,
    t: RawEntity,
}

fn span_from_positions(positions: &[Vec<usize>], what: &str) -> Result<(usize, usize)> {
    let first = positions
        .first()
        .ok_or_else(|| Error::Corpus(format!("{what} entity has no position list")))?;
    if first.is_empty() {
        return Err(Error::Corpus(format!("{what} entity has an empty position list")));
    }
    let lo = *first.iter().min().expect("non-empty");
    let hi = *first.iter().max().expect("non-empty");
    Ok((lo, hi + 1))
}

/// Open a file, transparently decompressing when the extension is `.gz`.
pub(crate) fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path)
        .map_err(|e| Error::Corpus(format!("cannot open {}: {e}", path.display())))?;
    if path.extension().map(|e| e == "gz").unwrap_or(false) {
        Ok(Box::new(flate2::read::GzDecoder::new(BufReader::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Load a FewRel-format JSON corpus. The corpus domain label is the file stem.
pub fn load_fewrel_json(path: impl AsRef<Path>) -> Result<RelationCorpus> {
    let path = path.as_ref();
    let reader = open_maybe_gz(path)?;
    let raw: BTreeMap<String, Vec<RawInstance>> = serde_json::from_reader(reader)
        .map_err(|e| Error::Corpus(format!("{}: malformed JSON: {e}", path.display())))?;
    if raw.is_empty() {
        return Err(Error::Corpus(format!("{}: no relations", path.display())));
    }
    let domain = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unknown".to_string());
    let mut corpus = RelationCorpus::new(&domain);
    for (relation, raw_instances) in raw {
        let mut instances = Vec::with_capacity(raw_instances.len());
        for (idx, raw) in raw_instances.into_iter().enumerate() {
            let ctx = |e: Error| {
                Error::Corpus(format!("relation `{relation}` instance {idx}: {e}"))
            };
            let head_span = span_from_positions(&raw.h.2, "head").map_err(ctx)?;
            let tail_span = span_from_positions(&raw.t.2, "tail").map_err(ctx)?;
            instances.push(Instance {
                tokens: raw.tokens,
                head_span,
                tail_span,
                relation: relation.clone(),
            });
        }
        corpus.insert(&relation, instances).map_err(|e| {
            Error::Corpus(format!("{}: {e}", path.display()))
        })?;
    }
    Ok(corpus)
}

/// Serialize a corpus back into the FewRel JSON schema. Deterministic:
/// relations in sorted order, instances in stored order.
pub fn save_fewrel_json(corpus: &RelationCorpus, path: impl AsRef<Path>) -> Result<()> {
    let mut raw: BTreeMap<&str, Vec<RawInstance>> = BTreeMap::new();
    for (relation, instances) in corpus.iter() {
        let records = instances
            .iter()
            .map(|inst| RawInstance {
                tokens: inst.tokens.clone(),
                h: RawEntity(
                    inst.tokens[inst.head_span.0..inst.head_span.1].join(" "),
                    "synthetic".to_string(),
                    vec![(inst.head_span.0..inst.head_span.1).collect()],
                ),
                t: RawEntity(
                    inst.tokens[inst.tail_span.0..inst.tail_span.1].join(" "),
                    "synthetic".to_string(),
                    vec![(inst.tail_span.0..inst.tail_span.1).collect()],
                ),
            })
            .collect();
        raw.insert(relation, records);
    }
    let file = File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer(&mut writer, &raw)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> RelationCorpus {
        let mut c = RelationCorpus::new("fixture");
        c.insert(
            "born_in",
            vec![
                Instance {
                    tokens: ["anna", "was", "born", "in", "oslo"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                    head_span: (0, 1),
                    tail_span: (4, 5),
                    relation: String::new(),
                },
                Instance {
                    tokens: ["the", "city", "of", "bergen", "raised", "tom"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                    head_span: (5, 6),
                    tail_span: (3, 4),
                    relation: String::new(),
                },
            ],
        )
        .unwrap();
        c.insert(
            "works_for",
            vec![Instance {
                tokens: ["lee", "joined", "acme", "corp", "yesterday"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
                head_span: (0, 1),
                tail_span: (2, 4),
                relation: String::new(),
            }],
        )
        .unwrap();
        c
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.json");
        let corpus = fixture();
        save_fewrel_json(&corpus, &path).unwrap();
        let loaded = load_fewrel_json(&path).unwrap();
        assert_eq!(loaded, corpus);
        // Second trip is byte-identical.
        let path2 = dir.path().join("fixture2.json");
        save_fewrel_json(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn empty_object_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        std::fs::write(&path, "{}").unwrap();
        let err = load_fewrel_json(&path).unwrap_err();
        assert!(err.to_string().contains("no relations"), "{err}");
    }

    #[test]
    fn out_of_range_span_names_relation_and_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"r1": [{"tokens": ["a", "b"], "h": ["a", "q1", [[0]]], "t": ["x", "q2", [[5]]]}]}"#,
        )
        .unwrap();
        let err = load_fewrel_json(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("r1"), "{msg}");
        assert!(msg.contains("tail"), "{msg}");
    }

    #[test]
    fn identical_head_tail_spans_rejected() {
        let inst = Instance {
            tokens: vec!["a".into(), "b".into()],
            head_span: (0, 1),
            tail_span: (0, 1),
            relation: "r".into(),
        };
        assert!(inst.validate().is_err());
    }

    #[test]
    fn gzip_input_is_transparent() {
        use std::io::Write as _;
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("c.json");
        save_fewrel_json(&fixture(), &plain).unwrap();
        let gz_path = dir.path().join("c.json.gz");
        let mut enc = flate2::write::GzEncoder::new(
            File::create(&gz_path).unwrap(),
            flate2::Compression::default(),
        );
        enc.write_all(&std::fs::read(&plain).unwrap()).unwrap();
        enc.finish().unwrap();
        let loaded = load_fewrel_json(&gz_path).unwrap();
        assert_eq!(loaded.n_relations(), 2);
    }
}
