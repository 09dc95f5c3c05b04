//! Weighted AUROC, confusion matrices and leave-one-subject-out evaluation.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifiers::{ClassifierSpec, Family};
use crate::dataset::LabeledSequenceSet;
use crate::error::{Error, Result};
use crate::fusion::{channel_samples, train_channel, Channel, LabeledSample};
use crate::level::{EngagementLevel, LabelDistribution, Thresholds, LEVELS};
use crate::scalar::{mean_std, Scalar};

pub use crate::synthetic::{generate_synthetic_dataset, SyntheticConfig, SyntheticDataset};

/// Area under the ROC curve of `scores` for the positive class by the
/// Mann-Whitney statistic with midranks, so tied pairs count one half.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs positives and negatives".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let p = n_pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

/// Prevalence-weighted mean of the one-vs-rest AUROCs of the levels present
/// in `actual`.
pub fn weighted_auroc<T: Scalar>(distributions: &[LabelDistribution<T>], actual: &[EngagementLevel]) -> Result<f64> {
    if distributions.len() != actual.len() {
        return Err(Error::Dimension {
            expected: actual.len(),
            got: distributions.len(),
        });
    }
    let present: BTreeSet<EngagementLevel> = actual.iter().copied().collect();
    if actual.len() < 2 || present.len() < 2 {
        return Err(Error::UndefinedMetric(
            "weighted AUROC needs at least two distinct actual levels".into(),
        ));
    }
    let n = actual.len() as f64;
    let mut total = 0.0;
    for level in present {
        let scores: Vec<f64> = distributions.iter().map(|d| d.get(level).as_f64()).collect();
        let pos: Vec<bool> = actual.iter().map(|&a| a == level).collect();
        let weight = pos.iter().filter(|&&p| p).count() as f64 / n;
        total += weight * binary_auroc(&scores, &pos)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[actual][predicted]`.
    pub counts: [[usize; LEVELS]; LEVELS],
    /// Row-normalized counts; rows of absent levels stay zero.
    pub rows: [[f64; LEVELS]; LEVELS],
    pub priors: [f64; LEVELS],
}

pub fn confusion_matrix(predicted: &[EngagementLevel], actual: &[EngagementLevel]) -> Result<ConfusionMatrix> {
    if predicted.len() != actual.len() {
        return Err(Error::Dimension {
            expected: actual.len(),
            got: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(Error::UndefinedMetric("confusion matrix of no samples".into()));
    }
    let mut counts = [[0usize; LEVELS]; LEVELS];
    for (p, a) in predicted.iter().zip(actual) {
        counts[a.index()][p.index()] += 1;
    }
    let mut rows = [[0.0; LEVELS]; LEVELS];
    let mut priors = [0.0; LEVELS];
    let n = actual.len() as f64;
    for (a, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        priors[a] = total as f64 / n;
        if total > 0 {
            for (r, &c) in rows[a].iter_mut().zip(row) {
                *r = c as f64 / total as f64;
            }
        }
    }
    Ok(ConfusionMatrix { counts, rows, priors })
}

impl ConfusionMatrix {
    pub fn to_table(&self) -> String {
        let mut s = String::from("actual \\ predicted   low     medium  high    prior\n");
        for level in EngagementLevel::ALL {
            let r = &self.rows[level.index()];
            let _ = writeln!(
                s,
                "{:<20} {:.3}   {:.3}   {:.3}   {:.3}",
                level.as_str(),
                r[0],
                r[1],
                r[2],
                self.priors[level.index()]
            );
        }
        s
    }
}

pub fn student_hash(student_id: &str) -> String {
    let digest = Sha256::digest(student_id.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub student_id: String,
    pub auroc: f64,
    pub confusion: ConfusionMatrix,
    pub samples: usize,
    pub training_samples: usize,
    /// SHA-256 of every student id in the training fold.
    pub training_student_hashes: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFold {
    pub student_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub family: Family,
    pub channel: Channel,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub skipped: Vec<SkippedFold>,
    pub mean_auroc: f64,
    pub std_auroc: f64,
    pub fingerprint: String,
}

/// SHA-256 over the canonical JSON of everything that determines a run.
pub fn config_fingerprint(spec: &ClassifierSpec, channel: Channel, thresholds: &Thresholds) -> Result<String> {
    let doc = serde_json::json!({
        "spec": spec,
        "channel": channel,
        "thresholds": thresholds,
    });
    let digest = Sha256::digest(serde_json::to_vec(&doc)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

enum FoldOutcome {
    Done(FoldResult),
    Skipped(SkippedFold),
}

fn run_fold<T: Scalar>(
    spec: &ClassifierSpec,
    channel: Channel,
    samples: &[LabeledSample<T>],
    student: &str,
) -> Result<FoldOutcome> {
    let (test, train): (Vec<&LabeledSample<T>>, Vec<&LabeledSample<T>>) =
        samples.iter().partition(|s| s.input.student_id() == student);
    let hashes: BTreeSet<String> = train.iter().map(|s| student_hash(s.input.student_id())).collect();
    if hashes.contains(&student_hash(student)) {
        return Err(Error::Leakage(student.to_string()));
    }
    if test.is_empty() {
        return Ok(FoldOutcome::Skipped(SkippedFold {
            student_id: student.into(),
            reason: "no labeled sequences".into(),
        }));
    }
    let train: Vec<LabeledSample<T>> = train.into_iter().cloned().collect();
    let model = train_channel(spec, channel, &train)?;
    let mut dists = Vec::with_capacity(test.len());
    let mut predicted = Vec::with_capacity(test.len());
    let actual: Vec<EngagementLevel> = test.iter().map(|s| s.level).collect();
    for s in &test {
        let p = model.predict_sequence(&s.input)?;
        predicted.push(p.level);
        dists.push(p.aggregate);
    }
    let auroc = match weighted_auroc(&dists, &actual) {
        Ok(a) => a,
        Err(Error::UndefinedMetric(reason)) => {
            return Ok(FoldOutcome::Skipped(SkippedFold {
                student_id: student.into(),
                reason,
            }))
        }
        Err(e) => return Err(e),
    };
    Ok(FoldOutcome::Done(FoldResult {
        student_id: student.into(),
        auroc,
        confusion: confusion_matrix(&predicted, &actual)?,
        samples: test.len(),
        training_samples: train.len(),
        training_student_hashes: hashes,
    }))
}

/// One fold per student of `dataset`: train on everyone else, score the
/// held-out student. Folds run in parallel and are reported in student order.
/// `students` lists the subjects to fold over; subjects with no labeled
/// sequences are skipped with a warning.
pub fn loso_evaluate<T: Scalar>(
    dataset: &LabeledSequenceSet<T>,
    spec: &ClassifierSpec,
    channel: Channel,
    thresholds: &Thresholds,
) -> Result<EvaluationReport> {
    let students: Vec<String> = dataset.students().into_iter().collect();
    loso_evaluate_students(dataset, spec, channel, thresholds, &students)
}

pub fn loso_evaluate_students<T: Scalar>(
    dataset: &LabeledSequenceSet<T>,
    spec: &ClassifierSpec,
    channel: Channel,
    thresholds: &Thresholds,
    students: &[String],
) -> Result<EvaluationReport> {
    spec.validate()?;
    let mut students: Vec<String> = students.to_vec();
    students.sort();
    students.dedup();
    if students.len() < 2 {
        return Err(Error::Degenerate(format!(
            "leave-one-subject-out needs at least two students, got {}",
            students.len()
        )));
    }
    let samples = channel_samples(dataset, channel);
    let outcomes: Vec<FoldOutcome> = students
        .par_iter()
        .map(|s| run_fold(spec, channel, &samples, s))
        .collect::<Result<_>>()?;
    let mut folds = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            FoldOutcome::Done(f) => folds.push(f),
            FoldOutcome::Skipped(s) => {
                warn!("fold {} skipped: {}", s.student_id, s.reason);
                skipped.push(s);
            }
        }
    }
    if folds.is_empty() {
        return Err(Error::UndefinedMetric("every fold was skipped".into()));
    }
    let values: Vec<f64> = folds.iter().map(|f| f.auroc).collect();
    let (mean_auroc, std_auroc) = mean_std(&values);
    Ok(EvaluationReport {
        family: spec.family,
        channel,
        seed: spec.seed(),
        folds,
        skipped,
        mean_auroc,
        std_auroc,
        fingerprint: config_fingerprint(spec, channel, thresholds)?,
    })
}

impl EvaluationReport {
    /// Recomputes mean and sample standard deviation from the folds.
    pub fn recompute(&self) -> (f64, f64) {
        let v: Vec<f64> = self.folds.iter().map(|f| f.auroc).collect();
        mean_std(&v)
    }

    pub fn cell(&self) -> String {
        format!("{:.3} ± {:.3}", self.mean_auroc, self.std_auroc)
    }

    /// Pooled confusion matrix over every fold.
    pub fn pooled_confusion(&self) -> Option<ConfusionMatrix> {
        let mut predicted = Vec::new();
        let mut actual = Vec::new();
        for f in &self.folds {
            for a in 0..LEVELS {
                for p in 0..LEVELS {
                    for _ in 0..f.confusion.counts[a][p] {
                        actual.push(EngagementLevel::ALL[a]);
                        predicted.push(EngagementLevel::ALL[p]);
                    }
                }
            }
        }
        confusion_matrix(&predicted, &actual).ok()
    }
}

/// Text table with one row per family and one `mean ± std` column per
/// channel. Missing combinations print as `-`.
pub fn comparison_table(reports: &[EvaluationReport]) -> String {
    let families: BTreeSet<Family> = reports.iter().map(|r| r.family).collect();
    let channels: BTreeSet<Channel> = reports.iter().map(|r| r.channel).collect();
    let mut s = format!("{:<16}", "classifier");
    for c in &channels {
        let _ = write!(s, " {:>16}", c.as_str());
    }
    s.push('\n');
    for f in &families {
        let _ = write!(s, "{:<16}", f.as_str());
        for c in &channels {
            let cell = reports
                .iter()
                .find(|r| r.family == *f && r.channel == *c)
                .map_or_else(|| "-".to_string(), EvaluationReport::cell);
            let _ = write!(s, " {cell:>16}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use EngagementLevel::*;

    fn ld(p: [f64; 3]) -> LabelDistribution<f64> {
        LabelDistribution::new(p).unwrap()
    }

    #[test]
    fn separation_and_ties() {
        let d = vec![ld([0.9, 0.05, 0.05]), ld([0.1, 0.8, 0.1]), ld([0.0, 0.1, 0.9]), ld([0.7, 0.2, 0.1])];
        let y = [Low, Medium, High, Low];
        assert_eq!(weighted_auroc(&d, &y).unwrap(), 1.0);
        let u = vec![LabelDistribution::<f64>::uniform(); 4];
        assert_eq!(weighted_auroc(&u, &y).unwrap(), 0.5);
        assert!(matches!(weighted_auroc(&u, &[Low; 4]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn binary_with_one_tie() {
        // pairs: (0.8 vs 0.2) win, (0.8 vs 0.5) win, (0.5 vs 0.2) win, (0.5 vs 0.5) half
        let a = binary_auroc(&[0.8, 0.5, 0.2, 0.5], &[true, true, false, false]).unwrap();
        assert!((a - 3.5 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn confusion_rows() {
        let m = confusion_matrix(&[Low, Medium, High], &[Low, Medium, High]).unwrap();
        assert_eq!(m.rows, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let m = confusion_matrix(&[Medium; 4], &[Low, Low, High, Medium]).unwrap();
        for r in m.rows {
            assert_eq!(r[1], 1.0);
        }
        assert_eq!(m.priors, [0.5, 0.25, 0.25]);
        assert!(confusion_matrix(&[], &[]).is_err());
    }

    #[test]
    fn table_layout() {
        let r = EvaluationReport {
            family: Family::RandomForest,
            channel: Channel::Attention,
            seed: 0,
            folds: vec![],
            skipped: vec![],
            mean_auroc: 0.81234,
            std_auroc: 0.05,
            fingerprint: String::new(),
        };
        let t = comparison_table(&[r]);
        assert!(t.contains("random_forest"));
        assert!(t.contains("0.812 ± 0.050"));
    }

    #[test]
    fn hashes_are_hex_sha256() {
        assert_eq!(
            student_hash("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
