//! Zero-shot evaluation reports, multi-seed aggregation and significance tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Result, SaltError};
use crate::types::TaskExample;

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(SaltError::internal("prediction and label counts differ"));
    }
    if labels.is_empty() {
        return Err(SaltError::input("accuracy over an empty set"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per-language accuracy of one or more seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub source_language: String,
    /// Column order: source first, then targets as configured.
    pub languages: Vec<String>,
    /// Mean over seeds.
    pub per_language_accuracy: BTreeMap<String, f64>,
    pub avg_excl_source: f64,
    pub avg_incl_source: f64,
    pub seeds: Vec<u64>,
    /// `per_seed_matrix[s][l]` follows `seeds` and `languages`.
    pub per_seed_matrix: Vec<Vec<f64>>,
}

impl EvaluationReport {
    pub fn single(seed: u64, source_language: &str, accuracies: Vec<(String, f64)>) -> Result<Self> {
        let languages: Vec<String> = accuracies.iter().map(|(l, _)| l.clone()).collect();
        let row = accuracies.iter().map(|(_, a)| *a).collect();
        Self::from_matrix(source_language, languages, vec![seed], vec![row])
    }

    pub fn from_matrix(
        source_language: &str,
        languages: Vec<String>,
        seeds: Vec<u64>,
        per_seed_matrix: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if languages.is_empty() || seeds.is_empty() {
            return Err(SaltError::input("report needs at least one language and one seed"));
        }
        if per_seed_matrix.len() != seeds.len() || per_seed_matrix.iter().any(|r| r.len() != languages.len()) {
            return Err(SaltError::internal("per-seed matrix shape does not match seeds x languages"));
        }
        if per_seed_matrix.iter().flatten().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(SaltError::internal("accuracy outside [0, 1]"));
        }
        let per_language_accuracy: BTreeMap<String, f64> = languages
            .iter()
            .enumerate()
            .map(|(j, l)| (l.clone(), mean(&per_seed_matrix.iter().map(|r| r[j]).collect::<Vec<_>>())))
            .collect();
        let mut report = Self {
            source_language: source_language.to_string(),
            languages,
            per_language_accuracy,
            avg_excl_source: 0.0,
            avg_incl_source: 0.0,
            seeds,
            per_seed_matrix,
        };
        (report.avg_excl_source, report.avg_incl_source) = report.recompute_averages();
        Ok(report)
    }

    /// `(avg excluding source, avg including source)` from the per-language cells.
    pub fn recompute_averages(&self) -> (f64, f64) {
        let all: Vec<f64> = self.languages.iter().map(|l| self.per_language_accuracy[l]).collect();
        let targets: Vec<f64> = self
            .languages
            .iter()
            .filter(|l| **l != self.source_language)
            .map(|l| self.per_language_accuracy[l])
            .collect();
        let excl = if targets.is_empty() { f64::NAN } else { mean(&targets) };
        (excl, mean(&all))
    }

    /// Mean target-language accuracy of each seed, in `seeds` order.
    pub fn per_seed_target_average(&self) -> Vec<f64> {
        self.per_seed_matrix
            .iter()
            .map(|row| {
                let t: Vec<f64> = self
                    .languages
                    .iter()
                    .zip(row)
                    .filter(|(l, _)| **l != self.source_language)
                    .map(|(_, a)| *a)
                    .collect();
                mean(&t)
            })
            .collect()
    }

    /// Stacks single-seed (or multi-seed) reports over the same languages.
    pub fn aggregate(reports: &[EvaluationReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| SaltError::input("nothing to aggregate"))?;
        let mut seeds = Vec::new();
        let mut matrix = Vec::new();
        for r in reports {
            if r.languages != first.languages || r.source_language != first.source_language {
                return Err(SaltError::data("reports cover different languages"));
            }
            seeds.extend(&r.seeds);
            matrix.extend(r.per_seed_matrix.iter().cloned());
        }
        Self::from_matrix(&first.source_language, first.languages.clone(), seeds, matrix)
    }

    /// Aligned text table: one row per seed plus the mean, with both averages.
    pub fn to_table(&self, title: &str) -> String {
        let mut out = String::new();
        let _ = write!(out, "{title:<12}");
        for l in &self.languages {
            let _ = write!(out, "{l:>7}");
        }
        let _ = writeln!(out, "{:>8}{:>8}", "avg.", "w/ src");
        let targets: Vec<usize> = (0..self.languages.len())
            .filter(|&j| self.languages[j] != self.source_language)
            .collect();
        for (seed, row) in self.seeds.iter().zip(&self.per_seed_matrix) {
            let _ = write!(out, "{:<12}", format!("seed {seed}"));
            for a in row {
                let _ = write!(out, "{:>7.1}", a * 100.0);
            }
            let excl = mean(&targets.iter().map(|&j| row[j]).collect::<Vec<_>>());
            let _ = writeln!(out, "{:>8.1}{:>8.1}", excl * 100.0, mean(row) * 100.0);
        }
        let _ = write!(out, "{:<12}", "mean");
        for l in &self.languages {
            let _ = write!(out, "{:>7.1}", self.per_language_accuracy[l] * 100.0);
        }
        let _ = writeln!(out, "{:>8.1}{:>8.1}", self.avg_excl_source * 100.0, self.avg_incl_source * 100.0);
        out
    }
}

/// Accuracy for every (premise language, hypothesis language) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedReport {
    pub languages: Vec<String>,
    /// `matrix[i][j]`: premise in `languages[i]`, hypothesis in `languages[j]`; mean over seeds.
    pub matrix: Vec<Vec<f64>>,
    pub average: f64,
    pub seeds: Vec<u64>,
    pub per_seed_matrices: Vec<Vec<Vec<f64>>>,
}

impl GeneralizedReport {
    pub fn single(seed: u64, languages: Vec<String>, matrix: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_seeds(languages, vec![seed], vec![matrix])
    }

    pub fn from_seeds(languages: Vec<String>, seeds: Vec<u64>, per_seed_matrices: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let n = languages.len();
        if n == 0 || seeds.is_empty() || seeds.len() != per_seed_matrices.len() {
            return Err(SaltError::input("generalized report needs languages and one matrix per seed"));
        }
        if per_seed_matrices.iter().any(|m| m.len() != n || m.iter().any(|r| r.len() != n)) {
            return Err(SaltError::internal("generalized matrix is not square over the language list"));
        }
        let matrix: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| mean(&per_seed_matrices.iter().map(|m| m[i][j]).collect::<Vec<_>>()))
                    .collect()
            })
            .collect();
        let average = mean(&matrix.iter().flatten().copied().collect::<Vec<_>>());
        Ok(Self {
            languages,
            matrix,
            average,
            seeds,
            per_seed_matrices,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.matrix.iter().map(Vec::len).sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.languages.len()).map(|i| self.matrix[i][i]).collect()
    }

    /// Grand average of each seed's matrix.
    pub fn per_seed_average(&self) -> Vec<f64> {
        self.per_seed_matrices
            .iter()
            .map(|m| mean(&m.iter().flatten().copied().collect::<Vec<_>>()))
            .collect()
    }

    pub fn aggregate(reports: &[GeneralizedReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| SaltError::input("nothing to aggregate"))?;
        let mut seeds = Vec::new();
        let mut mats = Vec::new();
        for r in reports {
            if r.languages != first.languages {
                return Err(SaltError::data("reports cover different languages"));
            }
            seeds.extend(&r.seeds);
            mats.extend(r.per_seed_matrices.iter().cloned());
        }
        Self::from_seeds(first.languages.clone(), seeds, mats)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "P \\ H");
        for l in &self.languages {
            let _ = write!(out, "{l:>7}");
        }
        let _ = writeln!(out, "{:>8}", "avg.");
        for (l, row) in self.languages.iter().zip(&self.matrix) {
            let _ = write!(out, "{l:<8}");
            for a in row {
                let _ = write!(out, "{:>7.1}", a * 100.0);
            }
            let _ = writeln!(out, "{:>8.1}", mean(row) * 100.0);
        }
        let _ = writeln!(out, "{:<8}{:>7.1}", "average", self.average * 100.0);
        out
    }
}

/// Test sets translated from the same examples: equal length, and at every
/// index the same example id and label.
pub fn validate_aligned(test_sets: &BTreeMap<String, Vec<TaskExample>>) -> Result<()> {
    let Some((first_lang, first)) = test_sets.iter().next() else {
        return Err(SaltError::input("no test sets"));
    };
    for (lang, set) in test_sets {
        if set.len() != first.len() {
            return Err(SaltError::data(format!(
                "test set {lang} has {} examples, {first_lang} has {}",
                set.len(),
                first.len()
            )));
        }
        for (a, b) in first.iter().zip(set) {
            if a.index != b.index {
                return Err(SaltError::data(format!(
                    "test set {lang} is not index-aligned with {first_lang} (index {} vs {})",
                    b.index, a.index
                )));
            }
            if a.label != b.label {
                return Err(SaltError::data(format!(
                    "label disagreement for example {} between {first_lang} and {lang}",
                    a.index
                )));
            }
        }
    }
    Ok(())
}

/// Premise from `premise_lang`, hypothesis from `hypothesis_lang`, per aligned index.
pub fn cross_language_pairs(
    test_sets: &BTreeMap<String, Vec<TaskExample>>,
    premise_lang: &str,
    hypothesis_lang: &str,
) -> Result<Vec<TaskExample>> {
    let get = |l: &str| test_sets.get(l).ok_or_else(|| SaltError::input(format!("no test set for {l}")));
    let p = get(premise_lang)?;
    let h = get(hypothesis_lang)?;
    Ok(p.iter()
        .zip(h)
        .map(|(p, h)| TaskExample {
            index: p.index,
            language: format!("{premise_lang}-{hypothesis_lang}"),
            sentence_a: p.sentence_a.clone(),
            sentence_b: h.sentence_b.clone(),
            label: p.label,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestVariant {
    /// Unpaired, pooled variance.
    #[default]
    Student,
    /// Unpaired, unequal variances.
    Welch,
    /// Paired by index (same seeds on both sides).
    Paired,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub variant: TTestVariant,
    pub mean_a: f64,
    pub mean_b: f64,
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    /// Two-sided.
    pub p_value: f64,
    pub significant: bool,
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Two-sided two-sample t-test of `a` against `b`. Zero variance with equal
/// means gives p = 1; zero variance with different means gives p = 0.
pub fn significance(a: &[f64], b: &[f64], variant: TTestVariant, alpha: f64) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(SaltError::input("t-test needs at least two samples per side"));
    }
    let (mean_a, mean_b) = (mean(a), mean(b));
    let (diff, se, df) = match variant {
        TTestVariant::Student => {
            let (na, nb) = (a.len() as f64, b.len() as f64);
            let pooled = ((na - 1.0) * sample_variance(a) + (nb - 1.0) * sample_variance(b)) / (na + nb - 2.0);
            (mean_a - mean_b, (pooled * (1.0 / na + 1.0 / nb)).sqrt(), na + nb - 2.0)
        }
        TTestVariant::Welch => {
            let (na, nb) = (a.len() as f64, b.len() as f64);
            let (va, vb) = (sample_variance(a) / na, sample_variance(b) / nb);
            let df = if va + vb > 0.0 {
                (va + vb).powi(2) / (va.powi(2) / (na - 1.0) + vb.powi(2) / (nb - 1.0))
            } else {
                na + nb - 2.0
            };
            (mean_a - mean_b, (va + vb).sqrt(), df)
        }
        TTestVariant::Paired => {
            if a.len() != b.len() {
                return Err(SaltError::input("paired t-test needs equally many samples"));
            }
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let n = d.len() as f64;
            (mean(&d), (sample_variance(&d) / n).sqrt(), n - 1.0)
        }
    };
    let (t, p) = if se == 0.0 || !se.is_finite() {
        if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = diff / se;
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| SaltError::internal(format!("t distribution: {e}")))?;
        (t, (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
    };
    Ok(TTestResult {
        variant,
        mean_a,
        mean_b,
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
        significant: p <= alpha,
    })
}
