//! Zero-shot evaluation of a fine-tuned classifier.

use std::collections::BTreeMap;

use salt_core::error::{Result, SaltError};
use salt_core::eval::{accuracy, cross_language_pairs, validate_aligned, EvaluationReport, GeneralizedReport};
use salt_core::tokenizer::Tokenizer;
use salt_core::types::TaskExample;

use crate::classifier::{Classifier, PairClassifier};

fn accuracy_on(model: &PairClassifier, tokenizer: &dyn Tokenizer, max_len: usize, set: &[TaskExample]) -> Result<f64> {
    let preds = model.predict(tokenizer, set, max_len)?;
    let labels: Vec<usize> = set.iter().map(|e| e.label).collect();
    accuracy(&preds, &labels)
}

/// Accuracy on every language's test set plus both averages.
pub fn evaluate(
    model: &PairClassifier,
    tokenizer: &dyn Tokenizer,
    max_len: usize,
    test_sets: &BTreeMap<String, Vec<TaskExample>>,
    source_language: &str,
    seed: u64,
) -> Result<EvaluationReport> {
    if test_sets.is_empty() {
        return Err(SaltError::input("no test sets"));
    }
    let mut acc = Vec::with_capacity(test_sets.len());
    for (lang, set) in test_sets {
        if set.is_empty() {
            return Err(SaltError::input(format!("test set for {lang} is empty")));
        }
        acc.push((lang.clone(), accuracy_on(model, tokenizer, max_len, set)?));
    }
    EvaluationReport::single(seed, source_language, acc)
}

/// Accuracy for every (premise language, hypothesis language) pair of aligned test sets.
pub fn evaluate_generalized(
    model: &PairClassifier,
    tokenizer: &dyn Tokenizer,
    max_len: usize,
    test_sets: &BTreeMap<String, Vec<TaskExample>>,
    seed: u64,
) -> Result<GeneralizedReport> {
    validate_aligned(test_sets)?;
    if test_sets.values().any(Vec::is_empty) {
        return Err(SaltError::input("empty test set"));
    }
    let languages: Vec<String> = test_sets.keys().cloned().collect();
    let mut matrix = Vec::with_capacity(languages.len());
    for l1 in &languages {
        let mut row = Vec::with_capacity(languages.len());
        for l2 in &languages {
            let pairs = cross_language_pairs(test_sets, l1, l2)?;
            row.push(accuracy_on(model, tokenizer, max_len, &pairs)?);
        }
        matrix.push(row);
    }
    GeneralizedReport::single(seed, languages, matrix)
}

impl Classifier {
    pub fn evaluate(&self, test_sets: &BTreeMap<String, Vec<TaskExample>>) -> Result<EvaluationReport> {
        evaluate(
            &self.model,
            &self.tokenizer,
            self.meta.max_seq_len,
            test_sets,
            &self.meta.source_language,
            self.meta.seed,
        )
    }

    pub fn evaluate_generalized(&self, test_sets: &BTreeMap<String, Vec<TaskExample>>) -> Result<GeneralizedReport> {
        evaluate_generalized(&self.model, &self.tokenizer, self.meta.max_seq_len, test_sets, self.meta.seed)
    }
}
