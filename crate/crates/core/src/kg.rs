//! Triple ingestion, vocabularies and the indexes derived from them.
//!
//! Split files hold one `head<TAB>relation<TAB>tail` fact per line. Ids are
//! assigned densely in first-appearance order, so loading train, valid and
//! test in that order gives the same ids on every run.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub type EntityId = u32;
pub type RelationId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

/// Bidirectional name <-> id maps for entities and relations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    entity_names: Vec<String>,
    relation_names: Vec<String>,
    entity_ids: HashMap<String, EntityId>,
    relation_ids: HashMap<String, RelationId>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from explicit name lists. Duplicates are rejected.
    pub fn from_names(entities: Vec<String>, relations: Vec<String>) -> Result<Self> {
        let mut vocab = Self::new();
        for name in entities {
            if vocab.entity_ids.contains_key(&name) {
                return Err(Error::Format(format!("duplicate entity name '{name}'")));
            }
            vocab.intern_entity(&name);
        }
        for name in relations {
            if vocab.relation_ids.contains_key(&name) {
                return Err(Error::Format(format!("duplicate relation name '{name}'")));
            }
            vocab.intern_relation(&name);
        }
        Ok(vocab)
    }

    pub fn n_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_ids.get(name).copied()
    }

    pub fn entity_name(&self, id: EntityId) -> Option<&str> {
        self.entity_names.get(id as usize).map(String::as_str)
    }

    pub fn relation_name(&self, id: RelationId) -> Option<&str> {
        self.relation_names.get(id as usize).map(String::as_str)
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn intern_entity(&mut self, name: &str) -> EntityId {
        if let Some(&id) = self.entity_ids.get(name) {
            return id;
        }
        let id = self.entity_names.len() as EntityId;
        self.entity_names.push(name.to_owned());
        self.entity_ids.insert(name.to_owned(), id);
        id
    }

    pub fn intern_relation(&mut self, name: &str) -> RelationId {
        if let Some(&id) = self.relation_ids.get(name) {
            return id;
        }
        let id = self.relation_names.len() as RelationId;
        self.relation_names.push(name.to_owned());
        self.relation_ids.insert(name.to_owned(), id);
        id
    }

    /// Writes `entities.dict`-style dumps: one name per line, line number = id.
    pub fn write_dump(&self, entities: &Path, relations: &Path) -> Result<()> {
        write_lines(entities, &self.entity_names)?;
        write_lines(relations, &self.relation_names)
    }

    pub fn read_dump(entities: &Path, relations: &Path) -> Result<Self> {
        Self::from_names(read_lines(entities)?, read_lines(relations)?)
    }
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| {
            l.map(|s| s.trim_end_matches('\r').to_owned())
                .map_err(|e| Error::io(path, e))
        })
        .collect()
}

/// Reads one split file. With `grow` set, unseen names are appended to the
/// vocabulary; otherwise they are reported as errors.
pub fn load_split(path: &Path, vocab: &mut Vocabulary, grow: bool) -> Result<Vec<Triple>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_triples(
        BufReader::new(file),
        vocab,
        grow,
        &path.display().to_string(),
    )
}

pub fn parse_triples<R: BufRead>(
    reader: R,
    vocab: &mut Vocabulary,
    grow: bool,
    source: &str,
) -> Result<Vec<Triple>> {
    let mut triples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: source.to_owned(),
                line: lineno,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let (h, r, t) = (fields[0], fields[1], fields[2]);
        let triple = if grow {
            let head = vocab.intern_entity(h);
            let relation = vocab.intern_relation(r);
            let tail = vocab.intern_entity(t);
            Triple::new(head, relation, tail)
        } else {
            let unknown = |kind: &'static str, name: &str| Error::Vocabulary {
                path: source.to_owned(),
                line: lineno,
                kind,
                name: name.to_owned(),
            };
            Triple::new(
                vocab.entity_id(h).ok_or_else(|| unknown("entity", h))?,
                vocab.relation_id(r).ok_or_else(|| unknown("relation", r))?,
                vocab.entity_id(t).ok_or_else(|| unknown("entity", t))?,
            )
        };
        triples.push(triple);
    }
    Ok(triples)
}

/// Writes triples back out in the split-file format.
pub fn write_split(path: &Path, triples: &[Triple], vocab: &Vocabulary) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in triples {
        let name = |id: Option<&str>, kind: &'static str, raw: u32| {
            id.map(str::to_owned).ok_or(Error::IdOutOfRange {
                kind,
                id: raw as usize,
                size: 0,
            })
        };
        writeln!(
            w,
            "{}\t{}\t{}",
            name(vocab.entity_name(t.head), "entity", t.head)?,
            name(vocab.relation_name(t.relation), "relation", t.relation)?,
            name(vocab.entity_name(t.tail), "entity", t.tail)?
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Hierarchy depth of a relation name: the number of non-empty `/`-separated
/// segments, floored at 1. Names without slashes (WN18 style) are level 1.
pub fn relation_level(name: &str) -> u32 {
    if !name.contains('/') {
        return 1;
    }
    let segments = name.split('/').filter(|s| !s.is_empty()).count() as u32;
    segments.max(1)
}

/// Known-true answers per query, sorted and deduplicated.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    tails: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    heads: HashMap<(EntityId, RelationId), Vec<EntityId>>,
}

impl FilterIndex {
    pub fn build<'a, I>(triples: I) -> Self
    where
        I: IntoIterator<Item = &'a Triple>,
    {
        let mut tails: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        let mut heads: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        for t in triples {
            tails.entry((t.head, t.relation)).or_default().push(t.tail);
            heads.entry((t.tail, t.relation)).or_default().push(t.head);
        }
        for v in tails.values_mut().chain(heads.values_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        Self { tails, heads }
    }

    /// True tails of `(head, relation, ?)`.
    pub fn tails(&self, head: EntityId, relation: RelationId) -> &[EntityId] {
        self.tails
            .get(&(head, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// True heads of `(?, relation, tail)`.
    pub fn heads(&self, tail: EntityId, relation: RelationId) -> &[EntityId] {
        self.heads
            .get(&(tail, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Answers for a query in the given direction.
    pub fn answers(&self, anchor: EntityId, relation: RelationId, dir: Direction) -> &[EntityId] {
        match dir {
            Direction::Tail => self.tails(anchor, relation),
            Direction::Head => self.heads(anchor, relation),
        }
    }

    pub fn n_queries(&self) -> (usize, usize) {
        (self.tails.len(), self.heads.len())
    }
}

/// Which side of a triple is being predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `(head, relation, ?)`
    Tail,
    /// `(?, relation, tail)`
    Head,
}

impl Direction {
    /// Splits a triple into (anchor entity, target entity) for this direction.
    pub fn split(self, t: &Triple) -> (EntityId, EntityId) {
        match self {
            Direction::Tail => (t.head, t.tail),
            Direction::Head => (t.tail, t.head),
        }
    }
}

/// Counts over the training split used by weighted sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationStats {
    /// Number of triples per relation.
    pub triples_per_relation: Vec<u64>,
    /// Number of distinct relations each entity appears with as head.
    pub relations_per_head: Vec<u32>,
    /// Number of distinct relations each entity appears with as tail.
    pub relations_per_tail: Vec<u32>,
    pub level: Vec<u32>,
}

impl RelationStats {
    pub fn compute(triples: &[Triple], vocab: &Vocabulary) -> Self {
        let n_e = vocab.n_entities();
        let n_r = vocab.n_relations();
        let mut triples_per_relation = vec![0u64; n_r];
        let mut head_pairs = HashSet::new();
        let mut tail_pairs = HashSet::new();
        for t in triples {
            triples_per_relation[t.relation as usize] += 1;
            head_pairs.insert((t.head, t.relation));
            tail_pairs.insert((t.tail, t.relation));
        }
        let mut relations_per_head = vec![0u32; n_e];
        for (h, _) in head_pairs {
            relations_per_head[h as usize] += 1;
        }
        let mut relations_per_tail = vec![0u32; n_e];
        for (t, _) in tail_pairs {
            relations_per_tail[t as usize] += 1;
        }
        let level = vocab
            .relation_names()
            .iter()
            .map(|n| relation_level(n))
            .collect();
        Self {
            triples_per_relation,
            relations_per_head,
            relations_per_tail,
            level,
        }
    }
}

/// All splits plus the indexes derived from them. Immutable once built.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    pub vocab: Vocabulary,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    /// Known-true answers over the union of all splits (filtered ranking).
    pub filter: FilterIndex,
    /// Known-true answers over the training split only (labels, negatives).
    pub train_index: FilterIndex,
    pub stats: RelationStats,
}

/// Split file names tried, in order, when loading a dataset directory.
const SPLIT_NAMES: [[&str; 2]; 3] = [
    ["train.txt", "freebase_mtr100_mte100-train.txt"],
    ["valid.txt", "freebase_mtr100_mte100-valid.txt"],
    ["test.txt", "freebase_mtr100_mte100-test.txt"],
];

impl KnowledgeGraph {
    pub fn from_splits(
        vocab: Vocabulary,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self> {
        let (n_e, n_r) = (vocab.n_entities(), vocab.n_relations());
        for t in train.iter().chain(&valid).chain(&test) {
            check_id("entity", t.head as usize, n_e)?;
            check_id("entity", t.tail as usize, n_e)?;
            check_id("relation", t.relation as usize, n_r)?;
        }
        let filter = FilterIndex::build(train.iter().chain(&valid).chain(&test));
        let train_index = FilterIndex::build(&train);
        let stats = RelationStats::compute(&train, &vocab);
        Ok(Self {
            vocab,
            train,
            valid,
            test,
            filter,
            train_index,
            stats,
        })
    }

    /// Loads `train`, `valid` and `test` from a directory, growing the
    /// vocabulary across all three in that order.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut vocab = Vocabulary::new();
        let mut splits = Vec::with_capacity(3);
        for names in SPLIT_NAMES {
            let path = resolve_split(dir, &names)?;
            splits.push(load_split(&path, &mut vocab, true)?);
        }
        let test = splits.pop().unwrap_or_default();
        let valid = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Self::from_splits(vocab, train, valid, test)
    }

    /// Writes the splits to `dir` as `train.txt`, `valid.txt`, `test.txt`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_split(&dir.join("train.txt"), &self.train, &self.vocab)?;
        write_split(&dir.join("valid.txt"), &self.valid, &self.vocab)?;
        write_split(&dir.join("test.txt"), &self.test, &self.vocab)
    }

    pub fn n_entities(&self) -> usize {
        self.vocab.n_entities()
    }

    pub fn n_relations(&self) -> usize {
        self.vocab.n_relations()
    }

    /// Weighted-sampling level for each relation; forced to 1 when the
    /// dataset carries no hierarchy in its relation names.
    pub fn levels(&self) -> &[u32] {
        &self.stats.level
    }
}

fn resolve_split(dir: &Path, candidates: &[&str]) -> Result<PathBuf> {
    for name in candidates {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(candidates[0]),
        std::io::Error::new(std::io::ErrorKind::NotFound, "split file not found"),
    ))
}

pub(crate) fn check_id(kind: &'static str, id: usize, size: usize) -> Result<()> {
    if id >= size {
        Err(Error::IdOutOfRange { kind, id, size })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, vocab: &mut Vocabulary, grow: bool) -> Result<Vec<Triple>> {
        parse_triples(text.as_bytes(), vocab, grow, "mem")
    }

    #[test]
    fn three_line_file_assigns_ids_in_first_appearance_order() {
        let mut vocab = Vocabulary::new();
        let text = "a\tr1\tb\nc\tr2\ta\nb\tr1\td\n";
        let triples = parse(text, &mut vocab, true).unwrap();
        assert_eq!((vocab.n_entities(), vocab.n_relations()), (4, 2));
        assert_eq!(vocab.entity_names(), &["a", "b", "c", "d"]);
        assert_eq!(vocab.relation_names(), &["r1", "r2"]);
        assert_eq!(
            triples,
            vec![
                Triple::new(0, 0, 1),
                Triple::new(2, 1, 0),
                Triple::new(1, 0, 3)
            ]
        );
    }

    #[test]
    fn empty_input_leaves_vocab_alone() {
        let mut vocab = Vocabulary::new();
        vocab.intern_entity("x");
        let before = vocab.clone();
        assert!(parse("", &mut vocab, true).unwrap().is_empty());
        assert_eq!(vocab, before);
    }

    #[test]
    fn crlf_and_blank_lines_accepted() {
        let mut vocab = Vocabulary::new();
        let t = parse("a\tr\tb\r\n\r\n\nb\tr\ta\r\n", &mut vocab, true).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(vocab.entity_names(), &["a", "b"]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut vocab = Vocabulary::new();
        let err = parse("a\tr\tb\na\tb\n", &mut vocab, true).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse("a\tr\tb\tc\n", &mut vocab, true).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn unseen_name_without_grow_is_vocab_error() {
        let mut vocab = Vocabulary::new();
        parse("a\tr\tb\n", &mut vocab, true).unwrap();
        let err = parse("a\tr\tz\n", &mut vocab, false).unwrap_err();
        assert!(matches!(err, Error::Vocabulary { kind: "entity", .. }));
        let err = parse("a\tq\tb\n", &mut vocab, false).unwrap_err();
        assert!(matches!(
            err,
            Error::Vocabulary {
                kind: "relation",
                ..
            }
        ));
    }

    #[test]
    fn levels() {
        assert_eq!(relation_level("/people/person/nationality"), 3);
        assert_eq!(relation_level("_hyponym"), 1);
        assert_eq!(relation_level(""), 1);
        assert_eq!(relation_level("/"), 1);
        assert_eq!(relation_level("/a//b/"), 2);
    }

    #[test]
    fn filter_index_small_cases() {
        let idx = FilterIndex::build(&[Triple::new(0, 0, 1)]);
        assert_eq!(idx.tails(0, 0), &[1]);
        assert_eq!(idx.heads(1, 0), &[0]);
        let idx = FilterIndex::build(&[Triple::new(0, 0, 2), Triple::new(0, 0, 1)]);
        assert_eq!(idx.tails(0, 0), &[1, 2]);
        assert!(idx.tails(1, 0).is_empty());
    }

    #[test]
    fn vocab_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut vocab = Vocabulary::new();
        parse("a\tr\tb\nc\ts\ta\n", &mut vocab, true).unwrap();
        let (e, r) = (dir.path().join("e.dict"), dir.path().join("r.dict"));
        vocab.write_dump(&e, &r).unwrap();
        assert_eq!(Vocabulary::read_dump(&e, &r).unwrap(), vocab);
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let mut vocab = Vocabulary::new();
        vocab.intern_entity("a");
        vocab.intern_relation("r");
        let err = KnowledgeGraph::from_splits(vocab, vec![Triple::new(0, 0, 3)], vec![], vec![])
            .unwrap_err();
        assert!(matches!(
            err,
            Error::IdOutOfRange {
                kind: "entity",
                id: 3,
                ..
            }
        ));
    }
}
