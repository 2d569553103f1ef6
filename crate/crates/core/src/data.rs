//! Benchmark TSV ingestion, vocabularies, reciprocal relations and the
//! synthetic knowledge graph used for desk-scale runs.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::FilterIndex;

pub const SPLIT_FILES: [&str; 3] = ["train.txt", "valid.txt", "test.txt"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: expected head<TAB>relation<TAB>tail")]
    Parse { path: PathBuf, line: usize },
    #[error("missing split file {0}")]
    MissingFile(PathBuf),
    #[error("duplicate triple ({head}, {relation}, {tail}) in {split}")]
    DuplicateTriple {
        split: String,
        head: String,
        relation: String,
        tail: String,
    },
    #[error("synthetic graph needs at least 10 entities, got {0}")]
    TooFewEntities(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A fact with string names, as read from disk.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RawTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl RawTriple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        RawTriple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

/// An id-level fact `(h, r, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub const fn new(head: usize, relation: usize, tail: usize) -> Self {
        Triple { head, relation, tail }
    }

    /// `(t, r + |R|, h)`, or back again for a reciprocal id.
    pub fn reciprocal(self, num_relations: usize) -> Triple {
        let relation = if self.relation < num_relations {
            self.relation + num_relations
        } else {
            self.relation - num_relations
        };
        Triple::new(self.tail, relation, self.head)
    }
}

/// String ↔ id dictionaries. Reciprocal relations occupy ids
/// `|R| .. 2|R|` and have no names of their own.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    entities: Vec<String>,
    entity_ids: HashMap<String, usize>,
    relations: Vec<String>,
    relation_ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern_entity(&mut self, name: &str) -> usize {
        intern(&mut self.entities, &mut self.entity_ids, name)
    }

    pub fn intern_relation(&mut self, name: &str) -> usize {
        intern(&mut self.relations, &mut self.relation_ids, name)
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Number of original relations, excluding reciprocals.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Size of the relation id space including reciprocals.
    pub fn num_relation_ids(&self) -> usize {
        2 * self.relations.len()
    }

    pub fn reciprocal_relation(&self, r: usize) -> usize {
        let n = self.num_relations();
        if r < n {
            r + n
        } else {
            r - n
        }
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_ids.get(name).copied()
    }

    pub fn entity_name(&self, id: usize) -> &str {
        &self.entities[id]
    }

    /// Reciprocal ids resolve to the name of their base relation.
    pub fn relation_name(&self, id: usize) -> &str {
        &self.relations[id % self.relations.len()]
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    fn intern_triple(&mut self, raw: &RawTriple) -> Triple {
        let head = self.intern_entity(&raw.head);
        let relation = self.intern_relation(&raw.relation);
        let tail = self.intern_entity(&raw.tail);
        Triple::new(head, relation, tail)
    }

    fn to_raw(&self, t: &Triple) -> RawTriple {
        RawTriple::new(
            self.entity_name(t.head),
            self.relation_name(t.relation),
            self.entity_name(t.tail),
        )
    }
}

fn intern(names: &mut Vec<String>, ids: &mut HashMap<String, usize>, name: &str) -> usize {
    if let Some(&id) = ids.get(name) {
        return id;
    }
    let id = names.len();
    names.push(name.to_owned());
    ids.insert(name.to_owned(), id);
    id
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripleStore {
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

impl TripleStore {
    pub fn splits(&self) -> [(&'static str, &[Triple]); 3] {
        [("train", &self.train), ("valid", &self.valid), ("test", &self.test)]
    }

    pub fn split(&self, name: &str) -> Option<&[Triple]> {
        self.splits().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub triples: TripleStore,
}

impl Dataset {
    /// Builds a dataset from string triples, assigning ids in order of first
    /// appearance across train, valid, test.
    pub fn from_raw(train: &[RawTriple], valid: &[RawTriple], test: &[RawTriple]) -> Result<Self, DataError> {
        let mut vocab = Vocab::new();
        let mut store = TripleStore::default();
        for (name, raw, out) in [
            ("train", train, &mut store.train),
            ("valid", valid, &mut store.valid),
            ("test", test, &mut store.test),
        ] {
            let mut seen = HashSet::with_capacity(raw.len());
            for r in raw {
                let t = vocab.intern_triple(r);
                if !seen.insert(t) {
                    return Err(DataError::DuplicateTriple {
                        split: name.to_owned(),
                        head: r.head.clone(),
                        relation: r.relation.clone(),
                        tail: r.tail.clone(),
                    });
                }
                out.push(t);
            }
        }
        Ok(Dataset { vocab, triples: store })
    }

    /// Writes `train.txt`, `valid.txt` and `test.txt` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir)?;
        for ((_, triples), file) in self.triples.splits().into_iter().zip(SPLIT_FILES) {
            let mut out = io::BufWriter::new(fs::File::create(dir.join(file))?);
            write_split(&mut out, triples, &self.vocab)?;
            out.flush()?;
        }
        Ok(())
    }

    /// SHA-256 over names (in id order) and id-level triples of every split.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for names in [self.vocab.entities(), self.vocab.relations()] {
            h.update((names.len() as u64).to_le_bytes());
            for n in names {
                h.update((n.len() as u64).to_le_bytes());
                h.update(n.as_bytes());
            }
        }
        for (_, split) in self.triples.splits() {
            h.update((split.len() as u64).to_le_bytes());
            for t in split {
                for id in [t.head, t.relation, t.tail] {
                    h.update((id as u64).to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }
}

/// Parses one split file. Blank lines are skipped; fields are trimmed.
pub fn load_split(path: &Path) -> Result<Vec<RawTriple>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => DataError::MissingFile(path.to_owned()),
        _ => DataError::Io(e),
    })?;
    parse_split(&text, path)
}

fn parse_split(text: &str, path: &Path) -> Result<Vec<RawTriple>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        match fields.as_slice() {
            [h, r, t] if !h.is_empty() && !r.is_empty() && !t.is_empty() => {
                out.push(RawTriple::new(*h, *r, *t))
            }
            _ => {
                return Err(DataError::Parse {
                    path: path.to_owned(),
                    line: i + 1,
                })
            }
        }
    }
    Ok(out)
}

pub fn write_split<W: Write>(out: &mut W, triples: &[Triple], vocab: &Vocab) -> io::Result<()> {
    for t in triples {
        let raw = vocab.to_raw(t);
        writeln!(out, "{}\t{}\t{}", raw.head, raw.relation, raw.tail)?;
    }
    Ok(())
}

/// Loads `train.txt`, `valid.txt` and `test.txt` from `dir`.
pub fn build_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let mut splits = Vec::with_capacity(3);
    for file in SPLIT_FILES {
        let path = dir.join(file);
        if !path.is_file() {
            return Err(DataError::MissingFile(path));
        }
        splits.push(load_split(&path)?);
    }
    Dataset::from_raw(&splits[0], &splits[1], &splits[2])
}

/// Every training triple followed by its reciprocal `(t, r + |R|, h)`.
pub fn augment_reciprocal(triples: &[Triple], vocab: &Vocab) -> Vec<Triple> {
    let n = vocab.num_relations();
    let mut out = Vec::with_capacity(2 * triples.len());
    for &t in triples {
        out.push(t);
        out.push(t.reciprocal(n));
    }
    out
}

/// Known tails for every `(h, r)` over all splits, in both directions.
pub fn build_filter_index(store: &TripleStore, vocab: &Vocab) -> FilterIndex {
    let n = vocab.num_relations();
    FilterIndex::from_triples(
        store
            .splits()
            .into_iter()
            .flat_map(|(_, s)| s.iter())
            .flat_map(|&t| [t, t.reciprocal(n)]),
    )
}

/// How many relations of each kind the synthetic generator emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationSpec {
    /// Relations pairing entities up: `(a, r, b) ⇔ (b, r, a)`.
    pub symmetric: usize,
    /// Successor relations along a random total order.
    pub ordering: usize,
    /// Pairs `(r₁, r₂)` with `(a, r₁, b) ⇔ (b, r₂, a)`.
    pub inverse_pairs: usize,
}

impl Default for RelationSpec {
    fn default() -> Self {
        RelationSpec {
            symmetric: 1,
            ordering: 1,
            inverse_pairs: 1,
        }
    }
}

/// Deterministic toy knowledge graph. Every relation is one-to-one, so each
/// `(h, r)` query over the full fact set has exactly one answer. Facts are
/// shuffled and split 90/5/5.
pub fn generate_synthetic_kg(seed: u64, n_entities: usize, spec: RelationSpec) -> Result<Dataset, DataError> {
    if n_entities < 10 {
        return Err(DataError::TooFewEntities(n_entities));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..n_entities).map(|i| format!("e{i:04}")).collect();
    let mut facts: Vec<RawTriple> = Vec::new();
    let fact = |a: usize, r: &str, b: usize| RawTriple::new(&names[a], r, &names[b]);

    for s in 0..spec.symmetric {
        let rel = format!("symmetric_{s}");
        let mut order: Vec<usize> = (0..n_entities).collect();
        order.shuffle(&mut rng);
        for pair in order.chunks_exact(2) {
            facts.push(fact(pair[0], &rel, pair[1]));
            facts.push(fact(pair[1], &rel, pair[0]));
        }
    }
    for s in 0..spec.ordering {
        let rel = format!("precedes_{s}");
        let mut order: Vec<usize> = (0..n_entities).collect();
        order.shuffle(&mut rng);
        for w in order.windows(2) {
            facts.push(fact(w[0], &rel, w[1]));
        }
    }
    for s in 0..spec.inverse_pairs {
        let (fwd, bwd) = (format!("inverse_{s}_fwd"), format!("inverse_{s}_bwd"));
        let mut order: Vec<usize> = (0..n_entities).collect();
        order.shuffle(&mut rng);
        // A single cycle: one-to-one, no fixed points, no 2-cycles.
        for i in 0..n_entities {
            let (a, b) = (order[i], order[(i + 1) % n_entities]);
            facts.push(fact(a, &fwd, b));
            facts.push(fact(b, &bwd, a));
        }
    }

    facts.shuffle(&mut rng);
    let n_test = facts.len() / 20;
    let n_valid = facts.len() / 20;
    let n_train = facts.len() - n_test - n_valid;
    let (train, rest) = facts.split_at(n_train);
    let (valid, test) = rest.split_at(n_valid);
    Dataset::from_raw(train, valid, test)
}

/// Distinct `(h, r)` keys across both directions of all splits.
pub fn distinct_queries(store: &TripleStore, vocab: &Vocab) -> usize {
    let n = vocab.num_relations();
    store
        .splits()
        .into_iter()
        .flat_map(|(_, s)| s.iter())
        .flat_map(|&t| [t, t.reciprocal(n)])
        .map(|t| (t.head, t.relation))
        .collect::<BTreeSet<_>>()
        .len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn parse_lines() {
        let p = Path::new("x.txt");
        assert!(parse_split("", p).unwrap().is_empty());
        assert_eq!(parse_split("a\tr\tb\n", p).unwrap(), vec![RawTriple::new("a", "r", "b")]);
        assert_eq!(
            parse_split(" a \tr\tb \r\n\r\nc\tr\td\r\n", p).unwrap(),
            vec![RawTriple::new("a", "r", "b"), RawTriple::new("c", "r", "d")]
        );
        match parse_split("a\tr\tb\na\tr\n", p) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_split("a\t\tb", p).is_err());
        assert!(parse_split("a\tr\tb\tc", p).is_err());
    }

    #[test]
    fn toy_directory() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.txt", "a\tr\tb\nb\ts\tc\n");
        write(dir.path(), "valid.txt", "");
        write(dir.path(), "test.txt", "c\tr\tunseen\n");
        let ds = build_dataset(dir.path()).unwrap();
        assert_eq!(ds.vocab.num_entities(), 4);
        assert_eq!(ds.vocab.num_relations(), 2);
        assert_eq!(ds.vocab.entity_id("unseen"), Some(3));
        assert_eq!(ds.triples.test, vec![Triple::new(2, 0, 3)]);
    }

    #[test]
    fn missing_and_duplicate() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.txt", "a\tr\tb\na\tr\tb\n");
        write(dir.path(), "valid.txt", "");
        assert!(matches!(build_dataset(dir.path()), Err(DataError::MissingFile(_))));
        write(dir.path(), "test.txt", "");
        assert!(matches!(build_dataset(dir.path()), Err(DataError::DuplicateTriple { .. })));
    }

    #[test]
    fn reciprocal_augmentation() {
        let mut v = Vocab::new();
        v.intern_relation("r");
        v.intern_relation("s");
        let t = Triple::new(0, 1, 5);
        let aug = augment_reciprocal(&[t], &v);
        assert_eq!(aug, vec![t, Triple::new(5, 3, 0)]);
        assert_eq!(aug[1].reciprocal(2), t);
        assert_eq!(v.relation_name(3), "s");
        assert_eq!(aug.iter().map(|t| t.relation).max(), Some(v.num_relation_ids() - 1));
    }

    #[test]
    fn filter_index_groups_tails() {
        let raw = |h, t| RawTriple::new(h, "r", t);
        let ds = Dataset::from_raw(&[raw("a", "b"), raw("a", "c")], &[raw("d", "e")], &[]).unwrap();
        let idx = build_filter_index(&ds.triples, &ds.vocab);
        assert_eq!(idx.tails(0, 0), &[1, 2]);
        assert_eq!(idx.tails(3, 0), &[4]);
        assert_eq!(idx.tails(1, 1), &[0]);
        assert_eq!(idx.len(), distinct_queries(&ds.triples, &ds.vocab));
    }

    #[test]
    fn synthetic_contracts() {
        let ds = generate_synthetic_kg(7, 50, RelationSpec::default()).unwrap();
        assert_eq!(ds, generate_synthetic_kg(7, 50, RelationSpec::default()).unwrap());
        assert_ne!(ds, generate_synthetic_kg(8, 50, RelationSpec::default()).unwrap());
        let all: HashSet<Triple> = ds.triples.splits().iter().flat_map(|(_, s)| s.iter().copied()).collect();
        let v = &ds.vocab;
        let sym = v.relation_id("symmetric_0").unwrap();
        let fwd = v.relation_id("inverse_0_fwd").unwrap();
        let bwd = v.relation_id("inverse_0_bwd").unwrap();
        let prec = v.relation_id("precedes_0").unwrap();
        for t in &all {
            if t.relation == sym {
                assert!(all.contains(&Triple::new(t.tail, sym, t.head)));
            }
            if t.relation == fwd {
                assert!(all.contains(&Triple::new(t.tail, bwd, t.head)));
            }
            if t.relation == bwd {
                assert!(all.contains(&Triple::new(t.tail, fwd, t.head)));
            }
            if t.relation == prec {
                assert!(!all.contains(&Triple::new(t.tail, prec, t.head)));
            }
        }
        // One answer per query in either direction.
        let mut keys = HashSet::new();
        for t in &all {
            assert!(keys.insert((t.head, t.relation, 0)));
            assert!(keys.insert((t.tail, t.relation, 1)));
        }
        let total = all.len();
        assert_eq!(ds.triples.test.len(), total / 20);
        assert_eq!(ds.triples.valid.len(), total / 20);
        assert!(matches!(
            generate_synthetic_kg(1, 9, RelationSpec::default()),
            Err(DataError::TooFewEntities(9))
        ));
    }

    #[test]
    fn tsv_round_trip() {
        let ds = generate_synthetic_kg(3, 20, RelationSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = build_dataset(dir.path()).unwrap();
        assert_eq!(back.triples, ds.triples);
        assert_eq!(back.vocab, ds.vocab);
        assert_eq!(back.fingerprint(), ds.fingerprint());
    }
}
