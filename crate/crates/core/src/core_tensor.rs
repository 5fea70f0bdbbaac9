//! Block-sparse core tensors.
//!
//! For arity `n` with `m = min(n, M)` active segments, the `(n+1)`-order core
//! is split into `K = m^(n+1)` blocks, one per segment combination
//! `(j_r, j_1, ..., j_n)`. Every block is a diagonal tensor whose diagonal is
//! `-1`, `0` or `+1`, so an assignment is just a vector of `K` block codes.
//!
//! Blocks are indexed row-major with `j_r` slowest and `j_n` fastest:
//! `k = ((j_r * m + j_1) * m + j_2) * m + ... + j_n` (all indices 0-based).
//! Architecture files and the rows of the search distribution use this order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Fact;
use crate::embedding::SegmentedEmbeddings;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum BlockCode {
    Neg,
    Zero,
    Pos,
}

impl BlockCode {
    /// Ops in the row order of the search distribution.
    pub const OPS: [BlockCode; 3] = [BlockCode::Neg, BlockCode::Zero, BlockCode::Pos];

    pub fn value(self) -> i8 {
        match self {
            BlockCode::Neg => -1,
            BlockCode::Zero => 0,
            BlockCode::Pos => 1,
        }
    }

    /// Row of this op in a 3xK probability matrix.
    pub fn op_index(self) -> usize {
        match self {
            BlockCode::Neg => 0,
            BlockCode::Zero => 1,
            BlockCode::Pos => 2,
        }
    }

    pub fn from_op_index(index: usize) -> Option<Self> {
        Self::OPS.get(index).copied()
    }

    pub fn from_value(value: i64) -> Option<Self> {
        match value {
            -1 => Some(BlockCode::Neg),
            0 => Some(BlockCode::Zero),
            1 => Some(BlockCode::Pos),
            _ => None,
        }
    }
}

impl From<BlockCode> for i8 {
    fn from(code: BlockCode) -> i8 {
        code.value()
    }
}

impl TryFrom<i8> for BlockCode {
    type Error = String;

    fn try_from(value: i8) -> std::result::Result<Self, String> {
        BlockCode::from_value(value as i64).ok_or_else(|| format!("block code {value} not in {{-1, 0, 1}}"))
    }
}

/// `min(n, M)^(n+1)`.
pub fn block_count(arity: usize, segment_count: usize) -> usize {
    let m = active_segments(arity, segment_count);
    m.pow(arity as u32 + 1)
}

pub fn active_segments(arity: usize, segment_count: usize) -> usize {
    arity.min(segment_count)
}

/// Decompose a block index into `(j_r, j_1, ..., j_n)`, 0-based.
pub fn multi_index(k: usize, arity: usize, m: usize) -> Vec<usize> {
    let mut out = vec![0; arity + 1];
    let mut rest = k;
    for slot in (0..=arity).rev() {
        out[slot] = rest % m;
        rest /= m;
    }
    out
}

pub fn flat_index(index: &[usize], m: usize) -> usize {
    index.iter().fold(0, |acc, &j| acc * m + j)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Arity(usize),
    SegmentCount,
    Length { expected: usize, found: usize },
    Domain { index: usize, value: i64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Arity(n) => write!(f, "arity {n} is below 2"),
            Violation::SegmentCount => write!(f, "segment count must be at least 1"),
            Violation::Length { expected, found } => {
                write!(f, "expected {expected} block codes, found {found}")
            }
            Violation::Domain { index, value } => {
                write!(f, "block {index} has code {value}, not in {{-1, 0, 1}}")
            }
        }
    }
}

/// Check raw integer codes against the structural rules for `(arity, M)`.
pub fn validate(arity: usize, segment_count: usize, codes: &[i64]) -> std::result::Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    if arity < 2 {
        violations.push(Violation::Arity(arity));
    }
    if segment_count == 0 {
        violations.push(Violation::SegmentCount);
    }
    if violations.is_empty() {
        let expected = block_count(arity, segment_count);
        if codes.len() != expected {
            violations.push(Violation::Length {
                expected,
                found: codes.len(),
            });
        }
    }
    for (index, &value) in codes.iter().enumerate() {
        if BlockCode::from_value(value).is_none() {
            violations.push(Violation::Domain { index, value });
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ActiveBlock {
    sign: f64,
    /// Segment per slot: relation first, then entities.
    segments: Box<[usize]>,
}

/// Block codes of one arity's sparse core.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreAssignment {
    arity: usize,
    segment_count: usize,
    codes: Vec<BlockCode>,
    active: Vec<ActiveBlock>,
}

impl CoreAssignment {
    pub fn new(arity: usize, segment_count: usize, codes: Vec<BlockCode>) -> Result<Self> {
        let raw: Vec<i64> = codes.iter().map(|c| c.value() as i64).collect();
        validate(arity, segment_count, &raw).map_err(|v| Error::InvalidAssignment(join(&v)))?;
        let m = active_segments(arity, segment_count);
        let active = codes
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != BlockCode::Zero)
            .map(|(k, c)| ActiveBlock {
                sign: c.value() as f64,
                segments: multi_index(k, arity, m).into_boxed_slice(),
            })
            .collect();
        Ok(Self {
            arity,
            segment_count,
            codes,
            active,
        })
    }

    pub fn from_values(arity: usize, segment_count: usize, values: &[i64]) -> Result<Self> {
        validate(arity, segment_count, values).map_err(|v| Error::InvalidAssignment(join(&v)))?;
        let codes = values
            .iter()
            .map(|&v| BlockCode::from_value(v).expect("validated"))
            .collect();
        Self::new(arity, segment_count, codes)
    }

    pub fn zeros(arity: usize, segment_count: usize) -> Result<Self> {
        Self::new(arity, segment_count, vec![BlockCode::Zero; block_count(arity, segment_count)])
    }

    pub fn from_fn(
        arity: usize,
        segment_count: usize,
        mut code: impl FnMut(&[usize]) -> BlockCode,
    ) -> Result<Self> {
        let m = active_segments(arity, segment_count);
        let codes = (0..block_count(arity, segment_count))
            .map(|k| code(&multi_index(k, arity, m)))
            .collect();
        Self::new(arity, segment_count, codes)
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn segment_count(&self) -> usize {
        self.segment_count
    }

    pub fn active_segments(&self) -> usize {
        active_segments(self.arity, self.segment_count)
    }

    pub fn block_count(&self) -> usize {
        self.codes.len()
    }

    pub fn codes(&self) -> &[BlockCode] {
        &self.codes
    }

    pub fn values(&self) -> Vec<i64> {
        self.codes.iter().map(|c| c.value() as i64).collect()
    }

    pub fn nonzero_count(&self) -> usize {
        self.active.len()
    }

    pub fn code_at(&self, index: &[usize]) -> BlockCode {
        self.codes[flat_index(index, self.active_segments())]
    }

    /// Nonzero blocks as `(sign, segment per slot)`.
    pub fn active_blocks(&self) -> impl Iterator<Item = (f64, &[usize])> {
        self.active.iter().map(|b| (b.sign, &*b.segments))
    }

    /// Re-run the structural checks.
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        validate(self.arity, self.segment_count, &self.values())
    }

    pub fn preset(preset: Preset, arity: usize, segment_count: usize) -> Result<Self> {
        match preset {
            Preset::Cp | Preset::DistMult => Self::from_fn(arity, segment_count, |j| {
                if j.iter().all(|&x| x == j[0]) {
                    BlockCode::Pos
                } else {
                    BlockCode::Zero
                }
            }),
            Preset::Complex | Preset::Simple if arity != 2 || segment_count != 2 => {
                Err(Error::InvalidArgument(format!(
                    "preset {preset} needs arity 2 and 2 segments, got arity {arity} with {segment_count}"
                )))
            }
            Preset::Complex => Self::from_fn(2, 2, |j| match j {
                [0, 0, 0] | [0, 1, 1] | [1, 0, 1] => BlockCode::Pos,
                [1, 1, 0] => BlockCode::Neg,
                _ => BlockCode::Zero,
            }),
            Preset::Simple => Self::from_fn(2, 2, |j| match j {
                [0, 0, 1] | [1, 1, 0] => BlockCode::Pos,
                _ => BlockCode::Zero,
            }),
        }
    }

    /// Score of one fact under this core.
    pub fn score(&self, embeddings: &SegmentedEmbeddings, fact: &Fact) -> Result<f64> {
        self.check_compatible(embeddings, fact)?;
        Ok(self.score_unchecked(embeddings, fact))
    }

    pub(crate) fn check_compatible(&self, embeddings: &SegmentedEmbeddings, fact: &Fact) -> Result<()> {
        if fact.arity() != self.arity {
            return Err(Error::Shape(format!(
                "fact of arity {} scored with a core for arity {}",
                fact.arity(),
                self.arity
            )));
        }
        if embeddings.segment_count() != self.segment_count {
            return Err(Error::Shape(format!(
                "embeddings have {} segments, core expects {}",
                embeddings.segment_count(),
                self.segment_count
            )));
        }
        if fact.relation as usize >= embeddings.relation_count()
            || fact.entities.iter().any(|&e| e as usize >= embeddings.entity_count())
        {
            return Err(Error::Shape(format!("fact {fact:?} references ids outside the embeddings")));
        }
        Ok(())
    }

    pub(crate) fn score_unchecked(&self, embeddings: &SegmentedEmbeddings, fact: &Fact) -> f64 {
        let len = embeddings.segment_len();
        let relation = embeddings.relation(fact.relation);
        let entities: Vec<&[f64]> = fact.entities.iter().map(|&e| embeddings.entity(e)).collect();
        let mut total = 0.0;
        for (sign, segs) in self.active_blocks() {
            let r = &relation[segs[0] * len..(segs[0] + 1) * len];
            let mut block = 0.0;
            for t in 0..len {
                let mut prod = r[t];
                for (i, e) in entities.iter().enumerate() {
                    prod *= e[segs[i + 1] * len + t];
                }
                block += prod;
            }
            total += sign * block;
        }
        total
    }
}

fn join(violations: &[Violation]) -> String {
    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// Classical bilinear models expressed as fixed block patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Cp,
    DistMult,
    Complex,
    Simple,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Cp => "cp",
            Preset::DistMult => "distmult",
            Preset::Complex => "complex",
            Preset::Simple => "simple",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cp" => Ok(Preset::Cp),
            "distmult" => Ok(Preset::DistMult),
            "complex" => Ok(Preset::Complex),
            "simple" => Ok(Preset::Simple),
            _ => Err(Error::InvalidArgument(format!(
                "unknown preset `{s}`; expected cp, distmult, complex or simple"
            ))),
        }
    }
}

/// One core assignment per arity `2..=max_arity`, sharing a segment count.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSet {
    segment_count: usize,
    max_arity: usize,
    cores: BTreeMap<usize, CoreAssignment>,
}

impl ArchitectureSet {
    pub fn new(segment_count: usize, max_arity: usize, cores: Vec<CoreAssignment>) -> Result<Self> {
        if max_arity < 2 {
            return Err(Error::InvalidArgument(format!("max arity {max_arity} is below 2")));
        }
        let mut map = BTreeMap::new();
        for core in cores {
            if core.segment_count() != segment_count {
                return Err(Error::InvalidAssignment(format!(
                    "arity {} uses {} segments, expected {segment_count}",
                    core.arity(),
                    core.segment_count()
                )));
            }
            if core.arity() > max_arity {
                return Err(Error::InvalidAssignment(format!(
                    "arity {} exceeds max arity {max_arity}",
                    core.arity()
                )));
            }
            map.insert(core.arity(), core);
        }
        if let Some(missing) = (2..=max_arity).find(|n| !map.contains_key(n)) {
            return Err(Error::MissingArity(missing));
        }
        Ok(Self {
            segment_count,
            max_arity,
            cores: map,
        })
    }

    pub fn from_fn(
        segment_count: usize,
        max_arity: usize,
        mut core: impl FnMut(usize) -> Result<CoreAssignment>,
    ) -> Result<Self> {
        let cores = (2..=max_arity).map(&mut core).collect::<Result<Vec<_>>>()?;
        Self::new(segment_count, max_arity, cores)
    }

    pub fn zeros(segment_count: usize, max_arity: usize) -> Result<Self> {
        Self::from_fn(segment_count, max_arity, |n| CoreAssignment::zeros(n, segment_count))
    }

    /// The same preset for every arity; complex and simple only exist for max arity 2.
    pub fn preset(preset: Preset, segment_count: usize, max_arity: usize) -> Result<Self> {
        Self::from_fn(segment_count, max_arity, |n| CoreAssignment::preset(preset, n, segment_count))
    }

    pub fn segment_count(&self) -> usize {
        self.segment_count
    }

    pub fn max_arity(&self) -> usize {
        self.max_arity
    }

    pub fn get(&self, arity: usize) -> Result<&CoreAssignment> {
        self.cores.get(&arity).ok_or(Error::MissingArity(arity))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &CoreAssignment)> {
        self.cores.iter().map(|(&n, c)| (n, c))
    }

    /// Fail on the first arity in `arities` without a core.
    pub fn ensure_covers(&self, arities: impl IntoIterator<Item = usize>) -> Result<()> {
        for n in arities {
            self.get(n)?;
        }
        Ok(())
    }

    pub fn score(&self, embeddings: &SegmentedEmbeddings, fact: &Fact) -> Result<f64> {
        self.get(fact.arity())?.score(embeddings, fact)
    }
}

/// Blocks on which two cores of the same shape carry the same code.
pub fn matched_blocks(a: &CoreAssignment, b: &CoreAssignment) -> Result<usize> {
    if a.arity != b.arity || a.segment_count != b.segment_count {
        return Err(Error::Shape(format!(
            "cannot compare arity {} with M={} against arity {} with M={}",
            a.arity, a.segment_count, b.arity, b.segment_count
        )));
    }
    Ok(a.codes.iter().zip(&b.codes).filter(|(x, y)| x == y).count())
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(m - 1) {
        for slot in 0..m {
            let mut q = p.clone();
            q.insert(slot, m - 1);
            out.push(q);
        }
    }
    out
}

/// Largest [`matched_blocks`] between `a` and any re-parametrization of `b`
/// that leaves every score unchanged for suitably transformed embeddings:
/// permuting relation segments, permuting entity segments, and flipping the
/// sign of single segments (entity segments flip together in every position).
///
/// Considers this arity alone. Returns `None` above four active segments,
/// where the search space is too large to enumerate.
pub fn gauge_matched_blocks(a: &CoreAssignment, b: &CoreAssignment) -> Result<Option<usize>> {
    let direct = matched_blocks(a, b)?;
    let m = a.active_segments();
    if m > 4 {
        return Ok(None);
    }
    let n = a.arity;
    let k = a.block_count();
    let perms = permutations(m);
    let indices: Vec<Vec<usize>> = (0..k).map(|i| multi_index(i, n, m)).collect();
    let target: Vec<i8> = a.codes.iter().map(|c| c.value()).collect();
    let source: Vec<i8> = b.codes.iter().map(|c| c.value()).collect();
    let mut best = direct;
    let mut moved = vec![0usize; n + 1];
    for pr in &perms {
        for pe in &perms {
            for rel_signs in 0..(1u32 << m) {
                for ent_signs in 0..(1u32 << m) {
                    let mut hits = 0;
                    for (i, idx) in indices.iter().enumerate() {
                        moved[0] = pr[idx[0]];
                        let mut sign = if rel_signs >> idx[0] & 1 == 1 { -1 } else { 1 };
                        for (slot, &j) in idx[1..].iter().enumerate() {
                            moved[slot + 1] = pe[j];
                            if ent_signs >> j & 1 == 1 {
                                sign = -sign;
                            }
                        }
                        if target[i] == sign * source[flat_index(&moved, m)] {
                            hits += 1;
                        }
                    }
                    best = best.max(hits);
                }
            }
        }
    }
    Ok(Some(best))
}

/// Score a fact with an explicit core (free-function form of [`CoreAssignment::score`]).
pub fn score_fact(assignment: &CoreAssignment, embeddings: &SegmentedEmbeddings, fact: &Fact) -> Result<f64> {
    assignment.score(embeddings, fact)
}
