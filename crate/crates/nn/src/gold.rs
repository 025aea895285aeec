//! Lexicon oracle for the toy scorer: how often the gold translation of a
//! source token ranks among the top k of its target-language set.

use std::collections::BTreeMap;

use salt_core::error::{Result, SaltError};
use salt_core::scorer::Scorer;
use salt_core::synth::IdLexicon;
use salt_core::types::TokenId;
use salt_core::vocab::VocabularySet;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKReport {
    pub k: usize,
    pub hits: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Expected accuracy of a uniform ranking, averaged over the probes.
    pub chance: f64,
}

/// Scores each sentence once, unmasked, and for every position whose token
/// has a gold translation in each of `languages`, checks whether that
/// translation is among the `k` most probable tokens of the language's set.
pub fn gold_topk(
    scorer: &dyn Scorer,
    sentences: &[Vec<TokenId>],
    lexicon: &IdLexicon,
    vocab_sets: &BTreeMap<String, VocabularySet>,
    languages: &[String],
    k: usize,
) -> Result<TopKReport> {
    if k == 0 {
        return Err(SaltError::input("k must be positive"));
    }
    let sets: Vec<(&String, Vec<TokenId>)> = languages
        .iter()
        .map(|l| {
            vocab_sets
                .get(l)
                .map(|s| (l, s.token_ids.iter().copied().collect()))
                .ok_or_else(|| SaltError::config(format!("no vocabulary set for {l}")))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[TokenId]> = sentences.iter().map(Vec::as_slice).collect();
    let scored = scorer.score_batch(&refs)?;
    let (mut hits, mut total, mut chance) = (0usize, 0usize, 0.0);
    for (ids, dists) in sentences.iter().zip(&scored) {
        for d in dists {
            let orig = ids[d.position];
            for (lang, members) in &sets {
                let Some(gold) = lexicon.translate(lang, orig) else {
                    continue;
                };
                let p_gold = d.prob(gold);
                let better = members.iter().filter(|&&t| t != gold && d.prob(t) > p_gold).count();
                total += 1;
                chance += (k as f64 / members.len() as f64).min(1.0);
                if better < k {
                    hits += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(SaltError::input("no probe positions with a gold translation"));
    }
    Ok(TopKReport {
        k,
        hits,
        total,
        accuracy: hits as f64 / total as f64,
        chance: chance / total as f64,
    })
}
