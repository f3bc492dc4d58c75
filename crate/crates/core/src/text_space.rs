//! Text-embedding bank, broad/novel similarity accumulation, one-to-one
//! category mapping and the in-place embedding swap.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{cosine, EmbeddingOracle, EmbeddingVector, OracleError};

#[derive(Debug, Error)]
pub enum TextSpaceError {
    #[error("prompt template must contain exactly one {{classname}} slot: '{0}'")]
    BadTemplate(String),
    #[error("duplicate class name '{0}' in bank")]
    DuplicateName(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("'{0}' is not a row of the bank")]
    NotInBank(String),
    #[error("'{0}' is not a tracked novel class")]
    UnknownNovel(String),
    #[error("novel class '{name}' observed {count} times, need {needed}")]
    UnderObserved { name: String, count: u64, needed: u64 },
    #[error("mapping is not one-to-one: {0}")]
    NotBijective(String),
    #[error("mapping needs at least as many broad as novel classes ({novel} > {broad})")]
    TooFewBroad { novel: usize, broad: usize },
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

const SLOT: &str = "{classname}";

/// A prompt with exactly one `{classname}` slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate {
    template: String,
}

impl PromptTemplate {
    pub fn new(template: &str) -> Result<Self, TextSpaceError> {
        if template.matches(SLOT).count() != 1 {
            return Err(TextSpaceError::BadTemplate(template.to_string()));
        }
        Ok(Self { template: template.to_string() })
    }

    pub fn apply(&self, classname: &str) -> String {
        self.template.replace(SLOT, classname)
    }

    pub fn as_str(&self) -> &str {
        &self.template
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self { template: "there is a {classname} in the scene".into() }
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = TextSpaceError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::new(&s)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> String {
        t.template
    }
}

/// Row `i` is the unit embedding of `names[i]`; rows past `names.len()` belong
/// to `extra_names` (redundant padding classes that never carry annotations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbeddingBank {
    pub names: Vec<String>,
    pub extra_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TextEmbeddingBank {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Label of every row: `names ++ extra_names`.
    pub fn row_names(&self) -> impl Iterator<Item = &String> {
        self.names.iter().chain(&self.extra_names)
    }

    pub fn row_name(&self, i: usize) -> &str {
        if i < self.names.len() {
            &self.names[i]
        } else {
            &self.extra_names[i - self.names.len()]
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.row_names().position(|n| n == name)
    }

    pub fn row(&self, name: &str) -> Option<&[f64]> {
        self.index_of(name).map(|i| self.rows[i].as_slice())
    }

    /// Re-normalizes every row in place.
    pub fn renormalize(&mut self) {
        for r in &mut self.rows {
            let n = crate::oracle::l2_norm(r);
            if n > 0.0 {
                r.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    /// Same rows, relabelled: every mapped broad row takes its novel name.
    pub fn renamed(&self, mapping: &CategoryMapping) -> Result<Self, TextSpaceError> {
        let mut out = self.clone();
        for (novel, broad) in &mapping.pairs {
            let i = self.index_of(broad).ok_or_else(|| TextSpaceError::NotInBank(broad.clone()))?;
            if i >= self.names.len() {
                return Err(TextSpaceError::NotInBank(broad.clone()));
            }
            out.names[i] = novel.clone();
        }
        check_unique(out.row_names())?;
        Ok(out)
    }
}

fn check_unique<'a>(names: impl Iterator<Item = &'a String>) -> Result<(), TextSpaceError> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(TextSpaceError::DuplicateName(n.clone()));
        }
    }
    Ok(())
}

/// Embeds `template(name)` for every name and extra name.
pub fn build_text_bank(
    names: &[String],
    template: &PromptTemplate,
    oracle: &dyn EmbeddingOracle,
    extra_names: &[String],
) -> Result<TextEmbeddingBank, TextSpaceError> {
    check_unique(names.iter().chain(extra_names))?;
    let prompts: Vec<String> = names.iter().chain(extra_names).map(|n| template.apply(n)).collect();
    let rows = oracle.embed_texts(&prompts)?.into_iter().map(|e| e.values).collect();
    Ok(TextEmbeddingBank { names: names.to_vec(), extra_names: extra_names.to_vec(), rows })
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Running cosine sums between observed novel-class visual embeddings and
/// each broad text row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingAccumulator {
    pub novel_names: Vec<String>,
    pub broad_names: Vec<String>,
    sums: Vec<Vec<CompensatedSum>>,
    pub counts: Vec<u64>,
    pub iterations_seen: u64,
}

impl MappingAccumulator {
    pub fn new(novel_names: &[String], broad_names: &[String]) -> Self {
        Self {
            novel_names: novel_names.to_vec(),
            broad_names: broad_names.to_vec(),
            sums: vec![vec![CompensatedSum::default(); broad_names.len()]; novel_names.len()],
            counts: vec![0; novel_names.len()],
            iterations_seen: 0,
        }
    }

    pub fn sum(&self, novel: usize, broad: usize) -> f64 {
        self.sums[novel][broad].value()
    }

    /// Mean cosine per (novel, broad); rows with no observations are zero.
    pub fn mean_matrix(&self) -> Vec<Vec<f64>> {
        self.sums
            .iter()
            .zip(&self.counts)
            .map(|(row, &c)| row.iter().map(|s| if c == 0 { 0.0 } else { s.value() / c as f64 }).collect())
            .collect()
    }

    pub fn end_iteration(&mut self) {
        self.iterations_seen += 1;
    }
}

/// Adds `cos(embed, broad_row_b)` to every cell of the observed novel class's row.
pub fn accumulate_similarity(
    acc: &mut MappingAccumulator,
    novel_name: &str,
    embed: &EmbeddingVector,
    bank: &TextEmbeddingBank,
) -> Result<(), TextSpaceError> {
    let n = acc
        .novel_names
        .iter()
        .position(|x| x == novel_name)
        .ok_or_else(|| TextSpaceError::UnknownNovel(novel_name.to_string()))?;
    if embed.dim() != bank.dim() {
        return Err(TextSpaceError::DimensionMismatch { expected: bank.dim(), got: embed.dim() });
    }
    let mut row_cos = Vec::with_capacity(acc.broad_names.len());
    for b in &acc.broad_names {
        let r = bank.row(b).ok_or_else(|| TextSpaceError::NotInBank(b.clone()))?;
        row_cos.push(cosine(&embed.values, r));
    }
    for (cell, c) in acc.sums[n].iter_mut().zip(row_cos) {
        cell.add(c);
    }
    acc.counts[n] += 1;
    Ok(())
}

/// One-to-one novel -> broad correspondence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMapping {
    pub pairs: Vec<(String, String)>,
}

impl CategoryMapping {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn broad_for(&self, novel: &str) -> Option<&str> {
        self.pairs.iter().find(|(n, _)| n == novel).map(|(_, b)| b.as_str())
    }

    pub fn novel_for(&self, broad: &str) -> Option<&str> {
        self.pairs.iter().find(|(_, b)| b == broad).map(|(n, _)| n.as_str())
    }

    pub fn is_bijective(&self) -> bool {
        let n: BTreeSet<_> = self.pairs.iter().map(|p| &p.0).collect();
        let b: BTreeSet<_> = self.pairs.iter().map(|p| &p.1).collect();
        n.len() == self.pairs.len() && b.len() == self.pairs.len()
    }
}

const TIE_EPS: f64 = 1e-12;

/// Maximum-weight assignment of rows to distinct columns (rows <= columns).
///
/// Among optimal assignments the lexicographically smallest column vector wins,
/// so exact ties resolve toward lower (row, column) indices. Exact subset DP,
/// `O(2^cols * cols)`.
pub fn optimal_assignment(weights: &[Vec<f64>]) -> Vec<usize> {
    let rows = weights.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = weights[0].len();
    assert!(rows <= cols && cols < usize::BITS as usize - 1, "assignment shape {rows}x{cols}");
    let full = 1usize << cols;
    // best[mask] = best total for rows popcount(mask).. given used columns `mask`
    let mut best = vec![f64::NEG_INFINITY; full];
    for mask in (0..full).rev() {
        let i = mask.count_ones() as usize;
        if i > rows {
            continue;
        }
        if i == rows {
            best[mask] = 0.0;
            continue;
        }
        let mut v = f64::NEG_INFINITY;
        for c in 0..cols {
            if mask & (1 << c) == 0 {
                v = v.max(weights[i][c] + best[mask | (1 << c)]);
            }
        }
        best[mask] = v;
    }
    let mut mask = 0usize;
    let mut out = Vec::with_capacity(rows);
    for row in weights.iter().take(rows) {
        let target = best[mask];
        let c = (0..cols)
            .filter(|&c| mask & (1 << c) == 0)
            .find(|&c| row[c] + best[mask | (1 << c)] >= target - TIE_EPS)
            .expect("some column attains the optimum");
        out.push(c);
        mask |= 1 << c;
    }
    out
}

/// Optimal one-to-one mapping on the mean-similarity matrix.
pub fn finalize_mapping(acc: &MappingAccumulator, min_observations: u64) -> Result<CategoryMapping, TextSpaceError> {
    if acc.novel_names.len() > acc.broad_names.len() {
        return Err(TextSpaceError::TooFewBroad { novel: acc.novel_names.len(), broad: acc.broad_names.len() });
    }
    for (name, &count) in acc.novel_names.iter().zip(&acc.counts) {
        if count < min_observations {
            return Err(TextSpaceError::UnderObserved { name: name.clone(), count, needed: min_observations });
        }
    }
    let cols = optimal_assignment(&acc.mean_matrix());
    Ok(CategoryMapping {
        pairs: acc.novel_names.iter().zip(cols).map(|(n, c)| (n.clone(), acc.broad_names[c].clone())).collect(),
    })
}

/// Replaces each mapped broad row, at the same index, by the text embedding of
/// its novel name. Every other row is left bit-identical.
pub fn swap_embeddings(
    bank: &TextEmbeddingBank,
    mapping: &CategoryMapping,
    template: &PromptTemplate,
    oracle: &dyn EmbeddingOracle,
) -> Result<TextEmbeddingBank, TextSpaceError> {
    if mapping.is_empty() {
        return Ok(bank.clone());
    }
    if !mapping.is_bijective() {
        return Err(TextSpaceError::NotBijective(format!("{:?}", mapping.pairs)));
    }
    let renamed = bank.renamed(mapping)?;
    let prompts: Vec<String> = mapping.pairs.iter().map(|(n, _)| template.apply(n)).collect();
    let fresh = oracle.embed_texts(&prompts)?;
    if fresh[0].dim() != bank.dim() {
        return Err(TextSpaceError::DimensionMismatch { expected: bank.dim(), got: fresh[0].dim() });
    }
    let mut out = renamed;
    for ((_, broad), e) in mapping.pairs.iter().zip(fresh) {
        let i = bank.index_of(broad).expect("checked by renamed");
        out.rows[i] = e.values;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{OracleConfig, StubOracle};

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn oracle() -> StubOracle {
        StubOracle::new(&OracleConfig { stub_seed: 3, ..Default::default() })
    }

    #[test]
    fn template_slot_rules() {
        assert!(PromptTemplate::new("a photo").is_err());
        assert!(PromptTemplate::new("{classname} and {classname}").is_err());
        assert_eq!(PromptTemplate::default().apply("cat"), "there is a cat in the scene");
    }

    #[test]
    fn bank_sizes() {
        let names: Vec<String> = (0..20).map(|i| format!("c{i}")).collect();
        let t = PromptTemplate::default();
        let bank = build_text_bank(&names, &t, &oracle(), &[]).unwrap();
        assert_eq!(bank.len(), 20);
        let extras: Vec<String> = (0..10).map(|i| format!("extra{i}")).collect();
        let bank = build_text_bank(&names, &t, &oracle(), &extras).unwrap();
        assert_eq!(bank.len(), 30);
        assert_eq!(bank.row_name(25), "extra5");
        assert!(build_text_bank(&names, &t, &oracle(), &s(&["c3"])).is_err());
    }

    fn acc_with_means(m: &[Vec<f64>]) -> MappingAccumulator {
        let novel: Vec<String> = (0..m.len()).map(|i| format!("n{i}")).collect();
        let broad: Vec<String> = (0..m[0].len()).map(|i| format!("b{i}")).collect();
        let mut acc = MappingAccumulator::new(&novel, &broad);
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                acc.sums[i][j].add(*v);
            }
            acc.counts[i] = 1;
        }
        acc
    }

    #[test]
    fn mapping_examples() {
        let pairs = |m: Vec<Vec<f64>>| finalize_mapping(&acc_with_means(&m), 1).unwrap().pairs;
        assert_eq!(pairs(vec![vec![0.9, 0.2], vec![0.3, 0.8]]), vec![("n0".into(), "b0".into()), ("n1".into(), "b1".into())]);
        assert_eq!(pairs(vec![vec![0.5, 0.5], vec![0.5, 0.5]]), vec![("n0".into(), "b0".into()), ("n1".into(), "b1".into())]);
        assert_eq!(pairs(vec![vec![0.2, 0.9], vec![0.8, 0.3]]), vec![("n0".into(), "b1".into()), ("n1".into(), "b0".into())]);
    }

    #[test]
    fn greedy_would_fail_here() {
        // greedy picks n0->b0 (0.9) and is left with 0.1; optimum is 0.8 + 0.85
        let m = vec![vec![0.9, 0.8], vec![0.85, 0.1]];
        assert_eq!(optimal_assignment(&m), vec![1, 0]);
    }

    #[test]
    fn under_observed_is_an_error() {
        let acc = acc_with_means(&[vec![0.9, 0.2], vec![0.3, 0.8]]);
        assert!(matches!(finalize_mapping(&acc, 20), Err(TextSpaceError::UnderObserved { .. })));
    }

    #[test]
    fn accumulate_examples() {
        let t = PromptTemplate::default();
        let bank = build_text_bank(&s(&["cat", "animal", "vehicle"]), &t, &oracle(), &[]).unwrap();
        let mut acc = MappingAccumulator::new(&s(&["dog"]), &s(&["animal", "vehicle"]));
        let untouched = acc.clone();
        let e = EmbeddingVector { values: bank.rows[1].clone(), unit_norm: true };
        accumulate_similarity(&mut acc, "dog", &e, &bank).unwrap();
        assert!((acc.sum(0, 0) - 1.0).abs() < 1e-12);
        let once = acc.sum(0, 1);
        accumulate_similarity(&mut acc, "dog", &e, &bank).unwrap();
        assert!((acc.sum(0, 1) - 2.0 * once).abs() < 1e-12);
        assert_eq!(acc.counts[0], 2);
        assert_ne!(acc, untouched);
        assert!(accumulate_similarity(&mut acc, "cow", &e, &bank).is_err());
        let short = EmbeddingVector { values: vec![1.0], unit_norm: true };
        assert!(matches!(
            accumulate_similarity(&mut acc, "dog", &short, &bank),
            Err(TextSpaceError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn swap_keeps_other_rows() {
        let t = PromptTemplate::default();
        let base: Vec<String> = (0..15).map(|i| format!("base{i}")).collect();
        let broad = s(&["plant", "animal", "furniture", "vehicle", "machine"]);
        let novel = s(&["pottedplant", "sheep", "sofa", "train", "tvmonitor"]);
        let names: Vec<String> = base.iter().chain(&broad).cloned().collect();
        let o = oracle();
        let bank = build_text_bank(&names, &t, &o, &[]).unwrap();
        let mapping = CategoryMapping { pairs: novel.iter().cloned().zip(broad.iter().cloned()).collect() };
        let out = swap_embeddings(&bank, &mapping, &t, &o).unwrap();
        assert_eq!(out.len(), 20);
        assert_eq!(&out.rows[..15], &bank.rows[..15]);
        assert_eq!(&out.names[15..], novel.as_slice());
        let direct = o.embed_texts(&[t.apply("sheep")]).unwrap();
        assert_eq!(out.rows[16], direct[0].values);

        assert_eq!(swap_embeddings(&bank, &CategoryMapping::default(), &t, &o).unwrap(), bank);
        let bad = CategoryMapping { pairs: vec![("sheep".into(), "base3-not".into())] };
        assert!(swap_embeddings(&bank, &bad, &t, &o).is_err());
    }
}
