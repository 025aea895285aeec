//! Online self-augmentation by per-dimension embedding mixup.
//!
//! `h = r * h_original + (1 - r) * h_switched`, with every coordinate of `r`
//! drawn independently from U[0, 1]. One `r` is drawn per instance per
//! training step and shared by all positions unless `per_position` is set.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaltError};
use crate::scorer::Scorer;
use crate::seed::instance_seed;
use crate::types::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupConfig {
    /// `false` gives the code-switching-only ablation.
    pub enabled: bool,
    /// Draw a fresh vector for every token position instead of one per instance.
    pub per_position: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            per_position: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixupCoefficients(Vec<f32>);

impl MixupCoefficients {
    pub fn new(r: Vec<f32>) -> Result<Self> {
        if r.is_empty() {
            return Err(SaltError::input("mixup coefficients must have at least one dimension"));
        }
        if let Some(bad) = r.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(SaltError::input(format!("mixup coefficient {bad} outside [0, 1]")));
        }
        Ok(Self(r))
    }

    pub fn constant(dim: usize, value: f32) -> Result<Self> {
        Self::new(vec![value; dim])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub fn sample_coefficients<R: Rng + ?Sized>(embedding_dim: usize, rng: &mut R) -> Result<MixupCoefficients> {
    if embedding_dim == 0 {
        return Err(SaltError::input("embedding dimension must be positive"));
    }
    Ok(MixupCoefficients((0..embedding_dim).map(|_| rng.random::<f32>()).collect()))
}

pub fn mix_embeddings(h_s: &[f32], h_t: &[f32], r: &MixupCoefficients) -> Result<Vec<f32>> {
    if h_s.len() != r.dim() || h_t.len() != r.dim() {
        return Err(SaltError::input(format!(
            "dimension mismatch: original {}, switched {}, coefficients {}",
            h_s.len(),
            h_t.len(),
            r.dim()
        )));
    }
    Ok(h_s
        .iter()
        .zip(h_t)
        .zip(r.as_slice())
        .map(|((&s, &t), &r)| (r * s + (1.0 - r) * t).clamp(s.min(t), s.max(t)))
        .collect())
}

/// Coefficient vectors for one instance at one step: a single row, or one row
/// per position when `per_position` is set. Drawn from the instance's own
/// stream keyed by `(global_seed, epoch, instance_index)`.
pub fn instance_coefficients(
    global_seed: u64,
    epoch: u64,
    instance_index: u64,
    embedding_dim: usize,
    positions: usize,
    per_position: bool,
) -> Result<Vec<MixupCoefficients>> {
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(global_seed, epoch, instance_index));
    let rows = if per_position { positions } else { 1 };
    (0..rows).map(|_| sample_coefficients(embedding_dim, &mut rng)).collect()
}

/// Mixed input rows for one instance. Positions where the two sequences agree
/// carry the plain lookup.
pub fn mixed_input<R: Rng + ?Sized>(
    original_ids: &[TokenId],
    switched_ids: &[TokenId],
    scorer: &dyn Scorer,
    rng: &mut R,
    per_position: bool,
) -> Result<Vec<Vec<f32>>> {
    if original_ids.len() != switched_ids.len() {
        return Err(SaltError::internal(format!(
            "original and switched sequences differ in length ({} vs {})",
            original_ids.len(),
            switched_ids.len()
        )));
    }
    let dim = scorer.embedding_dim();
    let h_s = scorer.embed_tokens(original_ids)?;
    let h_t = scorer.embed_tokens(switched_ids)?;
    let shared = if per_position {
        None
    } else {
        Some(sample_coefficients(dim, rng)?)
    };
    let mut out = Vec::with_capacity(original_ids.len());
    for i in 0..original_ids.len() {
        let fresh;
        let r = match &shared {
            Some(r) => r,
            None => {
                fresh = sample_coefficients(dim, rng)?;
                &fresh
            }
        };
        if original_ids[i] == switched_ids[i] {
            out.push(h_s[i].clone());
        } else {
            out.push(mix_embeddings(&h_s[i], &h_t[i], r)?);
        }
    }
    Ok(out)
}
