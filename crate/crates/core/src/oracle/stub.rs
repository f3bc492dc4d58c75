//! Deterministic stand-in for a vision-language model.
//!
//! Every leaf class gets a seeded random unit vector. A parent name gets the
//! normalized mean of its children's vectors plus a little seeded noise, so
//! for a child crop the parent ranks right after the child itself. Image
//! crops are decoded by matching pixels against the class palette and mixing
//! the matched leaf vectors by pixel share.

use std::collections::BTreeMap;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{EmbeddingOracle, EmbeddingVector, OracleConfig, OracleError};

const PARENT_NOISE: f64 = 0.05;
const BACKGROUND_WEIGHT: f64 = 0.5;
const PALETTE_TOLERANCE: i32 = 24;
const INPUT_SIZE: u32 = 32;

pub(crate) fn seed_of(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 has 32 bytes"))
}

fn gaussian_vec(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn unit(values: Vec<f64>) -> Vec<f64> {
    let n = super::l2_norm(&values);
    values.into_iter().map(|v| v / n).collect()
}

pub struct StubOracle {
    model_id: String,
    dim: usize,
    seed: u64,
    /// Name -> unit vector for every leaf and parent named in the plan or palette.
    named: BTreeMap<String, Vec<f64>>,
    palette: Vec<(String, [u8; 3])>,
    background: Vec<f64>,
}

impl StubOracle {
    pub fn new(config: &OracleConfig) -> Self {
        let dim = config.stub_dim.max(2);
        let seed = config.stub_seed;
        let seed_bytes = seed.to_le_bytes();
        let leaf = |name: &str| unit(gaussian_vec(seed_of(&[&seed_bytes, b"leaf", name.as_bytes()]), dim));

        let mut named: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for name in config.stub_palette.keys() {
            named.insert(name.clone(), leaf(name));
        }
        for children in config.stub_similarity_plan.values() {
            for c in children {
                named.entry(c.clone()).or_insert_with(|| leaf(c));
            }
        }
        for (parent, children) in &config.stub_similarity_plan {
            let mut acc = vec![0.0; dim];
            for c in children {
                for (a, v) in acc.iter_mut().zip(&named[c]) {
                    *a += v / children.len() as f64;
                }
            }
            let noise = unit(gaussian_vec(seed_of(&[&seed_bytes, b"parent-noise", parent.as_bytes()]), dim));
            for (a, n) in acc.iter_mut().zip(noise) {
                *a += PARENT_NOISE * n;
            }
            named.insert(parent.clone(), unit(acc));
        }
        let background = unit(gaussian_vec(seed_of(&[&seed_bytes, b"background"]), dim));
        Self {
            model_id: config.model_id.clone(),
            dim,
            seed,
            named,
            palette: config.stub_palette.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            background,
        }
    }

    /// Longest known name occurring in `prompt` as a whole word sequence.
    fn lookup(&self, prompt: &str) -> Option<&Vec<f64>> {
        let lower = prompt.to_lowercase();
        let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
        let joined = format!(" {} ", words.join(" "));
        self.named
            .iter()
            .filter(|(name, _)| joined.contains(&format!(" {} ", name.to_lowercase())))
            .max_by_key(|(name, _)| name.len())
            .map(|(_, v)| v)
    }

    fn text_vector(&self, prompt: &str) -> Vec<f64> {
        match self.lookup(prompt) {
            Some(v) => v.clone(),
            None => unit(gaussian_vec(seed_of(&[&self.seed.to_le_bytes(), b"text", prompt.as_bytes()]), self.dim)),
        }
    }

    /// Leaf vector of a palette class, if known.
    pub fn class_vector(&self, name: &str) -> Option<&[f64]> {
        self.named.get(name).map(Vec::as_slice)
    }

    /// Fraction of crop pixels assigned to each palette class, plus the
    /// unmatched (background) share.
    pub fn recipe_shares(&self, crop: &RgbImage) -> (Vec<f64>, f64) {
        let mut counts = vec![0usize; self.palette.len()];
        let mut bg = 0usize;
        for p in crop.pixels() {
            let hit = self.palette.iter().position(|(_, c)| {
                (0..3).all(|k| (p.0[k] as i32 - c[k] as i32).abs() <= PALETTE_TOLERANCE)
            });
            match hit {
                Some(i) => counts[i] += 1,
                None => bg += 1,
            }
        }
        let total = (crop.width() * crop.height()).max(1) as f64;
        (counts.into_iter().map(|c| c as f64 / total).collect(), bg as f64 / total)
    }
}

impl EmbeddingOracle for StubOracle {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn input_size(&self) -> u32 {
        INPUT_SIZE
    }

    fn embed_texts(&self, prompts: &[String]) -> Result<Vec<EmbeddingVector>, OracleError> {
        if prompts.is_empty() {
            return Err(OracleError::EmptyPrompts);
        }
        prompts.iter().map(|p| EmbeddingVector::normalized(self.text_vector(p))).collect()
    }

    fn embed_crop(&self, crop: &RgbImage) -> Result<EmbeddingVector, OracleError> {
        let (shares, bg) = self.recipe_shares(crop);
        let mut v: Vec<f64> = self.background.iter().map(|b| b * bg * BACKGROUND_WEIGHT).collect();
        for ((name, _), share) in self.palette.iter().zip(shares) {
            if share > 0.0 {
                for (a, x) in v.iter_mut().zip(&self.named[name]) {
                    *a += share * x;
                }
            }
        }
        EmbeddingVector::normalized(v)
    }
}
