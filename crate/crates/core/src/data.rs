//! Fact ingestion: TSV parsing, vocabularies, splits and the filtered-ranking index.
//!
//! A fact file has one fact per line, `relation<TAB>e1<TAB>e2[<TAB>...]`, with
//! `#`-prefixed comment lines. Arity is inferred per line, so one file can mix
//! binary, ternary and higher facts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type EntityId = u32;
pub type RelationId = u32;

/// A fact as read from a file, before symbols are mapped to ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RawFact {
    pub relation: String,
    pub entities: Vec<String>,
}

impl RawFact {
    pub fn new(relation: impl Into<String>, entities: &[&str]) -> Self {
        Self {
            relation: relation.into(),
            entities: entities.iter().map(|e| e.to_string()).collect(),
        }
    }

    pub fn arity(&self) -> usize {
        self.entities.len()
    }
}

/// An id-mapped n-ary fact `(relation, e_1, ..., e_n)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fact {
    pub relation: RelationId,
    pub entities: Vec<EntityId>,
}

impl Fact {
    pub fn new(relation: RelationId, entities: Vec<EntityId>) -> Self {
        Self { relation, entities }
    }

    pub fn arity(&self) -> usize {
        self.entities.len()
    }

    /// Copy of this fact with the entity at `position` replaced.
    pub fn with_entity(&self, position: usize, entity: EntityId) -> Fact {
        let mut out = self.clone();
        out.entities[position] = entity;
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct SymbolTable {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl SymbolTable {
    fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }
}

/// Dense id assignment for entities and relations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    entities: SymbolTable,
    relations: SymbolTable,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Vocabulary with synthetic names `e0..` and `r0..`.
    pub fn synthetic(entity_count: usize, relation_count: usize) -> Self {
        let mut vocab = Self::new();
        for i in 0..entity_count {
            vocab.intern_entity(&format!("e{i}"));
        }
        for i in 0..relation_count {
            vocab.intern_relation(&format!("r{i}"));
        }
        vocab
    }

    pub fn intern_entity(&mut self, name: &str) -> EntityId {
        self.entities.intern(name)
    }

    pub fn intern_relation(&mut self, name: &str) -> RelationId {
        self.relations.intern(name)
    }

    pub fn entity_count(&self) -> usize {
        self.entities.names.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.names.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations.ids.get(name).copied()
    }

    pub fn entity_name(&self, id: EntityId) -> Option<&str> {
        self.entities.names.get(id as usize).map(String::as_str)
    }

    pub fn relation_name(&self, id: RelationId) -> Option<&str> {
        self.relations.names.get(id as usize).map(String::as_str)
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entities.names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relations.names
    }

    fn intern_fact(&mut self, raw: &RawFact) -> Fact {
        let relation = self.intern_relation(&raw.relation);
        let entities = raw.entities.iter().map(|e| self.intern_entity(e)).collect();
        Fact { relation, entities }
    }

    pub fn lookup_fact(&self, raw: &RawFact) -> Option<Fact> {
        let relation = self.relation_id(&raw.relation)?;
        let entities = raw
            .entities
            .iter()
            .map(|e| self.entity_id(e))
            .collect::<Option<Vec<_>>>()?;
        Some(Fact { relation, entities })
    }

    pub fn raw_fact(&self, fact: &Fact) -> RawFact {
        RawFact {
            relation: self.relations.names[fact.relation as usize].clone(),
            entities: fact
                .entities
                .iter()
                .map(|&e| self.entities.names[e as usize].clone())
                .collect(),
        }
    }
}

/// Parse TSV facts. Blank lines and `#` comments are skipped.
pub fn parse_facts<R: BufRead>(reader: R) -> Result<Vec<RawFact>> {
    let mut facts = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line_no = index + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "expected a relation and at least 2 entities, found {} field(s)",
                    fields.len()
                ),
            });
        }
        if let Some(pos) = fields.iter().position(|f| f.is_empty()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("field {} is empty", pos + 1),
            });
        }
        facts.push(RawFact {
            relation: fields[0].to_string(),
            entities: fields[1..].iter().map(|s| s.to_string()).collect(),
        });
    }
    Ok(facts)
}

pub fn parse_facts_str(text: &str) -> Result<Vec<RawFact>> {
    parse_facts(text.as_bytes())
}

/// Canonical TSV: one fact per line, no comments, newline-terminated.
pub fn write_facts<W: Write>(mut writer: W, facts: &[RawFact]) -> std::io::Result<()> {
    for fact in facts {
        writer.write_all(fact.relation.as_bytes())?;
        for e in &fact.entities {
            writer.write_all(b"\t")?;
            writer.write_all(e.as_bytes())?;
        }
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn facts_to_tsv(facts: &[RawFact]) -> String {
    let mut buf = Vec::new();
    write_facts(&mut buf, facts).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("fact names are UTF-8")
}

pub fn read_fact_file(path: &Path) -> Result<Vec<RawFact>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_facts(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split `{other}`; valid splits are train, valid, test"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub train: Vec<Fact>,
    pub valid: Vec<Fact>,
    pub test: Vec<Fact>,
    pub max_arity: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Fact] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn entity_count(&self) -> usize {
        self.vocabulary.entity_count()
    }

    pub fn relation_count(&self) -> usize {
        self.vocabulary.relation_count()
    }

    pub fn all_facts(&self) -> impl Iterator<Item = &Fact> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Arities that occur in any split, ascending.
    pub fn arities(&self) -> Vec<usize> {
        let set: std::collections::BTreeSet<usize> = self.all_facts().map(Fact::arity).collect();
        set.into_iter().collect()
    }

    pub fn raw_split(&self, split: Split) -> Vec<RawFact> {
        self.split(split)
            .iter()
            .map(|f| self.vocabulary.raw_fact(f))
            .collect()
    }

    /// Write `train.tsv`, `valid.tsv`, `test.tsv` and the vocabulary lists
    /// (`entities.txt`, `relations.txt`, one name per line in id order) into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in Split::ALL {
            let path = dir.join(format!("{}.tsv", split.name()));
            let text = facts_to_tsv(&self.raw_split(split));
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        for (name, list) in [
            (ENTITY_LIST, self.vocabulary.entity_names()),
            (RELATION_LIST, self.vocabulary.relation_names()),
        ] {
            let path = dir.join(name);
            let text: String = list.iter().map(|n| format!("{n}\n")).collect();
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub const ENTITY_LIST: &str = "entities.txt";
pub const RELATION_LIST: &str = "relations.txt";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    /// Fraction of train carved out as validation when no validation file exists.
    pub holdout_fraction: f64,
    pub seed: u64,
    /// Reject validation/test symbols, arities and facts the training split does not license.
    pub strict: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.1,
            seed: 0,
            strict: true,
        }
    }
}

/// Check other splits against train, or against a declared vocabulary when given.
fn check_against_train(
    train: &[RawFact],
    declared: Option<&Vocabulary>,
    others: &[(&str, &[RawFact])],
) -> Result<()> {
    let mut entities = HashSet::new();
    let mut relations = HashSet::new();
    let mut arities = HashSet::new();
    for f in train {
        arities.insert(f.arity());
        if declared.is_none() {
            relations.insert(f.relation.as_str());
            entities.extend(f.entities.iter().map(String::as_str));
        }
    }
    if let Some(vocab) = declared {
        entities.extend(vocab.entity_names().iter().map(String::as_str));
        relations.extend(vocab.relation_names().iter().map(String::as_str));
    }
    let mut unseen: Vec<String> = Vec::new();
    let mut seen_unseen = HashSet::new();
    for (split, facts) in others {
        for f in facts.iter() {
            if !arities.contains(&f.arity()) {
                return Err(Error::Data(format!(
                    "{split} contains arity {} which never occurs in train",
                    f.arity()
                )));
            }
            if !relations.contains(f.relation.as_str()) && seen_unseen.insert(f.relation.clone()) {
                unseen.push(format!("relation `{}` ({split})", f.relation));
            }
            for e in &f.entities {
                if !entities.contains(e.as_str()) && seen_unseen.insert(e.clone()) {
                    unseen.push(format!("entity `{e}` ({split})"));
                }
            }
        }
    }
    if !unseen.is_empty() {
        let total = unseen.len();
        let mut listed = unseen.into_iter().take(20).collect::<Vec<_>>().join(", ");
        if total > 20 {
            listed.push_str(&format!(" and {} more", total - 20));
        }
        return Err(Error::UnseenSymbols(listed));
    }
    Ok(())
}

fn check_disjoint(splits: &[(&str, &[Fact])]) -> Result<()> {
    let mut owner: HashMap<&Fact, &str> = HashMap::new();
    for (name, facts) in splits {
        for f in facts.iter() {
            if let Some(prev) = owner.insert(f, name) {
                if prev != *name {
                    return Err(Error::Data(format!(
                        "fact {f:?} occurs in both {prev} and {name}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Build an id-mapped dataset from raw splits.
///
/// Ids are assigned in order of first appearance over train, valid, test.
/// When `valid` is `None` and the holdout fraction is positive, a seeded
/// random subset of train becomes the validation split (both keep file order).
pub fn build_dataset(
    train: Vec<RawFact>,
    valid: Option<Vec<RawFact>>,
    test: Vec<RawFact>,
    options: &BuildOptions,
) -> Result<Dataset> {
    build_dataset_with(None, train, valid, test, options)
}

/// Like [`build_dataset`], but ids start from a declared vocabulary.
///
/// In strict mode every symbol of every split, train included, must be declared.
pub fn build_dataset_with(
    declared: Option<Vocabulary>,
    train: Vec<RawFact>,
    valid: Option<Vec<RawFact>>,
    test: Vec<RawFact>,
    options: &BuildOptions,
) -> Result<Dataset> {
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if !(0.0..1.0).contains(&options.holdout_fraction) {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction must lie in [0, 1), got {}",
            options.holdout_fraction
        )));
    }
    if let Some(bad) = train
        .iter()
        .chain(valid.iter().flatten())
        .chain(&test)
        .find(|f| f.arity() < 2)
    {
        return Err(Error::Data(format!("fact {bad:?} has arity below 2")));
    }
    if options.strict {
        let valid_slice: &[RawFact] = valid.as_deref().unwrap_or(&[]);
        let mut others = vec![("valid", valid_slice), ("test", test.as_slice())];
        if declared.is_some() {
            others.insert(0, ("train", train.as_slice()));
        }
        check_against_train(&train, declared.as_ref(), &others)?;
    }

    let mut vocabulary = declared.unwrap_or_default();
    let train_ids: Vec<Fact> = train.iter().map(|f| vocabulary.intern_fact(f)).collect();
    let valid_ids: Option<Vec<Fact>> = valid
        .as_ref()
        .map(|v| v.iter().map(|f| vocabulary.intern_fact(f)).collect());
    let test_ids: Vec<Fact> = test.iter().map(|f| vocabulary.intern_fact(f)).collect();

    let (train_ids, valid_ids) = match valid_ids {
        Some(v) => (train_ids, v),
        None if options.holdout_fraction > 0.0 => {
            let n = train_ids.len();
            let n_valid = (options.holdout_fraction * n as f64).round() as usize;
            if n_valid >= n {
                return Err(Error::Data(format!(
                    "holdout of {n_valid} facts would leave the training split empty"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(options.seed));
            let mut held = vec![false; n];
            for &i in &order[..n_valid] {
                held[i] = true;
            }
            let (mut kept, mut carved) = (Vec::new(), Vec::new());
            for (fact, is_held) in train_ids.into_iter().zip(held) {
                if is_held {
                    carved.push(fact);
                } else {
                    kept.push(fact);
                }
            }
            (kept, carved)
        }
        None => (train_ids, Vec::new()),
    };

    if options.strict {
        check_disjoint(&[
            ("train", &train_ids),
            ("valid", &valid_ids),
            ("test", &test_ids),
        ])?;
    }

    let max_arity = train_ids
        .iter()
        .chain(&valid_ids)
        .chain(&test_ids)
        .map(Fact::arity)
        .max()
        .unwrap_or(2);

    Ok(Dataset {
        vocabulary,
        train: train_ids,
        valid: valid_ids,
        test: test_ids,
        max_arity,
    })
}

/// Load `train.tsv`, optional `valid.tsv` and `test.tsv` from a directory.
pub fn load_dataset_dir(dir: &Path, options: &BuildOptions) -> Result<Dataset> {
    let train = read_fact_file(&dir.join("train.tsv"))?;
    let valid_path = dir.join("valid.tsv");
    let valid = if valid_path.exists() {
        let v = read_fact_file(&valid_path)?;
        // an empty valid.tsv is what `write_dir` emits for a dataset without one
        if v.is_empty() {
            None
        } else {
            Some(v)
        }
    } else {
        None
    };
    let test_path = dir.join("test.tsv");
    let test = if test_path.exists() {
        read_fact_file(&test_path)?
    } else {
        Vec::new()
    };
    let declared = read_vocabulary(dir)?;
    build_dataset_with(declared, train, valid, test, options)
}

/// Read `entities.txt` and `relations.txt` if both exist.
pub fn read_vocabulary(dir: &Path) -> Result<Option<Vocabulary>> {
    let (ents, rels) = (dir.join(ENTITY_LIST), dir.join(RELATION_LIST));
    if !ents.exists() || !rels.exists() {
        return Ok(None);
    }
    let mut vocabulary = Vocabulary::new();
    for (path, is_entity) in [(&ents, true), (&rels, false)] {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            let name = line.trim_end_matches('\r');
            let before = if is_entity { vocabulary.entity_count() } else { vocabulary.relation_count() };
            let id = if is_entity {
                vocabulary.intern_entity(name)
            } else {
                vocabulary.intern_relation(name)
            };
            if name.is_empty() || (id as usize) < before {
                return Err(Error::Data(format!(
                    "{}:{}: empty or repeated name `{name}`",
                    path.display(),
                    i + 1
                )));
            }
        }
    }
    Ok(Some(vocabulary))
}

/// Partition facts by arity, keeping input order within each group.
pub fn group_by_arity<'a, I>(facts: I) -> BTreeMap<usize, Vec<Fact>>
where
    I: IntoIterator<Item = &'a Fact>,
{
    let mut groups: BTreeMap<usize, Vec<Fact>> = BTreeMap::new();
    for f in facts {
        groups.entry(f.arity()).or_default().push(f.clone());
    }
    groups
}

const HOLE: EntityId = EntityId::MAX;

/// A fact with one entity slot blanked out.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FilterKey {
    pub relation: RelationId,
    pub entities: Box<[EntityId]>,
    pub position: usize,
}

impl FilterKey {
    pub fn new(fact: &Fact, position: usize) -> Self {
        let mut entities: Box<[EntityId]> = fact.entities.clone().into_boxed_slice();
        entities[position] = HOLE;
        Self {
            relation: fact.relation,
            entities,
            position,
        }
    }
}

/// For every (fact with a hole, hole position), the entities known to fill it.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    map: HashMap<FilterKey, Vec<EntityId>>,
}

impl FilterIndex {
    pub fn build<'a, I>(facts: I) -> Self
    where
        I: IntoIterator<Item = &'a Fact>,
    {
        let mut map: HashMap<FilterKey, Vec<EntityId>> = HashMap::new();
        for fact in facts {
            for (p, &e) in fact.entities.iter().enumerate() {
                map.entry(FilterKey::new(fact, p)).or_default().push(e);
            }
        }
        for v in map.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        Self { map }
    }

    /// Filter index over every split of a dataset.
    pub fn for_dataset(dataset: &Dataset) -> Self {
        Self::build(dataset.all_facts())
    }

    /// Sorted known-true fillers for `fact` with `position` blanked.
    pub fn known(&self, fact: &Fact, position: usize) -> &[EntityId] {
        self.map
            .get(&FilterKey::new(fact, position))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
