//! Deterministic prompt encoder.
//!
//! Prompts are split into lowercase alphanumeric tokens. Each token maps to
//! a unit-norm D-vector drawn from a ChaCha8 stream seeded by
//! `mix64(table_seed ^ fnv1a64(token))`, so the table is frozen, infinite
//! and identical on every platform. An external JSON file can replace the
//! table for whole prompts.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Token-level prompt representation `t`, `[L, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptFeatures {
    pub tokens: Vec<String>,
    pub t: Tensor<f64>,
}

impl PromptFeatures {
    pub fn len(&self) -> usize {
        self.t.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.t.shape()[1]
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ExternalRows {
    Matrix(Vec<Vec<f64>>),
    Vector(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEncoder {
    dim: usize,
    seed: u64,
    external: Option<BTreeMap<String, Vec<Vec<f64>>>>,
}

/// Splits on every non-alphanumeric character and lowercases.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl PromptEncoder {
    pub fn hashed(dim: usize, seed: u64) -> Self {
        Self { dim, seed, external: None }
    }

    /// Table backed by a JSON file of precomputed embeddings.
    pub fn from_file(dim: usize, seed: u64, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: BTreeMap<String, ExternalRows> = serde_json::from_str(&text)
            .map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
        let mut table = BTreeMap::new();
        for (prompt, rows) in raw {
            let rows = match rows {
                ExternalRows::Matrix(m) => m,
                ExternalRows::Vector(v) => vec![v],
            };
            if rows.is_empty() || rows.iter().any(|r| r.len() != dim || r.iter().any(|x| !x.is_finite())) {
                return Err(Error::Decode {
                    path: path.to_path_buf(),
                    reason: format!("prompt {prompt:?} needs >=1 finite row of width {dim}"),
                });
            }
            table.insert(prompt, rows);
        }
        Ok(Self { dim, seed, external: Some(table) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_embedding(&self, token: &str) -> Vec<f64> {
        let mut r = rng::rng_from(rng::mix64(self.seed ^ rng::fnv1a64(token)));
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }

    pub fn encode(&self, text: &str) -> Result<PromptFeatures> {
        if text.trim().is_empty() {
            return Err(Error::Precondition("prompt text is empty".into()));
        }
        if let Some(table) = &self.external {
            let rows = table.get(text).ok_or_else(|| Error::PromptMissing(text.to_string()))?;
            let data = rows.iter().flatten().copied().collect();
            return Ok(PromptFeatures {
                tokens: vec![text.to_string(); rows.len()],
                t: Tensor::from_vec(&[rows.len(), self.dim], data),
            });
        }
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Precondition(format!("prompt {text:?} has no tokens")));
        }
        let data = tokens.iter().flat_map(|tok| self.token_embedding(tok)).collect();
        Ok(PromptFeatures { t: Tensor::from_vec(&[tokens.len(), self.dim], data), tokens })
    }
}

/// Encode with the default hashed table.
pub fn encode_prompt(text: &str, embed_dim: usize) -> Result<PromptFeatures> {
    PromptEncoder::hashed(embed_dim, super::ModelConfig::default().prompt_seed).encode(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_prompt_has_eight_tokens() {
        let p = encode_prompt("Segment the bright-ellipse in the ultrasound image.", 64).unwrap();
        assert_eq!(p.len(), 8);
        assert_eq!(p.width(), 64);
        assert_eq!(p, encode_prompt("Segment the bright-ellipse in the ultrasound image.", 64).unwrap());
        for row in p.t.data().chunks(64) {
            let n: f64 = row.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distinct_prompts_differ_in_task_rows() {
        let a = encode_prompt("Segment the bright-ellipse in the ultrasound image.", 16).unwrap();
        let b = encode_prompt("Segment the dark-blob in the ultrasound image.", 16).unwrap();
        assert_eq!(a.len(), b.len());
        let rows = |p: &PromptFeatures, i: usize| p.t.data()[i * 16..(i + 1) * 16].to_vec();
        assert_eq!(rows(&a, 0), rows(&b, 0));
        assert_ne!(rows(&a, 2), rows(&b, 2));
        assert_ne!(rows(&a, 3), rows(&b, 3));
    }

    #[test]
    fn empty_prompt_is_rejected() {
        assert!(encode_prompt("", 8).is_err());
        assert!(encode_prompt("  ", 8).is_err());
    }

    #[test]
    fn external_file_has_no_silent_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.json");
        std::fs::write(&path, r#"{"known prompt": [[1.0, 0.0], [0.0, 1.0]], "flat": [0.5, 0.5]}"#).unwrap();
        let enc = PromptEncoder::from_file(2, 0, &path).unwrap();
        let p = enc.encode("known prompt").unwrap();
        assert_eq!(p.t.shape(), &[2, 2]);
        assert_eq!(enc.encode("flat").unwrap().t.shape(), &[1, 2]);
        assert!(matches!(enc.encode("other prompt"), Err(Error::PromptMissing(_))));
    }
}
