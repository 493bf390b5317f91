//! Judgment aggregation into integer percentages that total 100.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{resolve_overwrites, AnnError, Judgment, Label, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Percentages {
    pub correct: u32,
    pub partially_correct: u32,
    pub wrong: u32,
    /// Number of judged samples.
    pub n: usize,
}

impl Percentages {
    pub fn from_counts(counts: [usize; 3]) -> Self {
        let [correct, partially_correct, wrong] = largest_remainder(counts);
        Percentages {
            correct,
            partially_correct,
            wrong,
            n: counts.iter().sum(),
        }
    }

    pub fn as_array(&self) -> [u32; 3] {
        [self.correct, self.partially_correct, self.wrong]
    }
}

impl fmt::Display for Percentages {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "correct {}%  partially correct {}%  wrong {}%  (n={})",
            self.correct, self.partially_correct, self.wrong, self.n
        )
    }
}

/// How judgments from several annotators are combined.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Mode {
    /// The judgments of the annotator who submitted the earliest judgment
    /// for the model.
    #[default]
    Single,
    /// One named annotator's judgments.
    Annotator(String),
    /// Per-sample majority label; ties go to the lower-quality label.
    Majority,
}

/// Round-half-up percentages, then a largest-remainder correction so the
/// three values total 100. When residuals tie, the later label receives a
/// missing point and the earlier label gives up a surplus one, so 1/1/1
/// becomes 33/33/34.
pub fn largest_remainder(counts: [usize; 3]) -> [u32; 3] {
    let n = counts.iter().sum::<usize>() as i64;
    if n == 0 {
        return [0; 3];
    }
    let mut out = [0i64; 3];
    // residual_i · n = 100·c_i − r_i·n, compared as integers.
    let mut resid = [0i64; 3];
    for i in 0..3 {
        let c = counts[i] as i64;
        out[i] = (200 * c + n) / (2 * n);
        resid[i] = 100 * c - out[i] * n;
    }
    let mut diff = 100 - out.iter().sum::<i64>();
    // `max_by_key` keeps the last maximum and `min_by_key` the first minimum.
    while diff > 0 {
        let i = (0..3).max_by_key(|&i| resid[i]).expect("three labels");
        out[i] += 1;
        resid[i] -= n;
        diff -= 1;
    }
    while diff < 0 {
        let i = (0..3).min_by_key(|&i| resid[i]).expect("three labels");
        out[i] -= 1;
        resid[i] += n;
        diff += 1;
    }
    out.map(|x| x as u32)
}

fn counts(labels: impl IntoIterator<Item = Label>) -> [usize; 3] {
    let mut c = [0usize; 3];
    for l in labels {
        c[l.index()] += 1;
    }
    c
}

fn for_model<'a>(judgments: &'a [Judgment], model_id: &str) -> Result<Vec<&'a Judgment>> {
    let js: Vec<&Judgment> = resolve_overwrites(judgments)
        .into_iter()
        .filter(|j| j.model_id == model_id)
        .collect();
    if js.is_empty() {
        return Err(AnnError::NoJudgments(model_id.to_string()));
    }
    Ok(js)
}

/// The annotator whose first judgment for `model_id` is the earliest.
pub fn primary_annotator(judgments: &[Judgment], model_id: &str) -> Option<String> {
    judgments
        .iter()
        .enumerate()
        .filter(|(_, j)| j.model_id == model_id)
        .min_by_key(|(i, j)| (j.timestamp, *i))
        .map(|(_, j)| j.annotator.clone())
}

/// Single-annotator aggregation (the default mode).
pub fn aggregate(judgments: &[Judgment], model_id: &str) -> Result<Percentages> {
    aggregate_with(judgments, model_id, &Mode::Single)
}

pub fn aggregate_with(judgments: &[Judgment], model_id: &str, mode: &Mode) -> Result<Percentages> {
    let js = for_model(judgments, model_id)?;
    match mode {
        Mode::Single => {
            let who = primary_annotator(judgments, model_id).expect("model has judgments");
            aggregate_with(judgments, model_id, &Mode::Annotator(who))
        }
        Mode::Annotator(who) => {
            let mine: Vec<Label> = js.iter().filter(|j| &j.annotator == who).map(|j| j.label).collect();
            if mine.is_empty() {
                return Err(AnnError::NoAnnotatorJudgments {
                    model: model_id.to_string(),
                    annotator: who.clone(),
                });
            }
            Ok(Percentages::from_counts(counts(mine)))
        }
        Mode::Majority => {
            let mut per_sample: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
            for j in &js {
                per_sample.entry(&j.sample_id).or_default()[j.label.index()] += 1;
            }
            let winners = per_sample.values().map(|c| {
                let best = (0..3).max_by_key(|&i| c[i]).expect("three labels");
                Label::ALL[best]
            });
            Ok(Percentages::from_counts(counts(winners)))
        }
    }
}

/// One row per annotator who judged `model_id`.
pub fn per_annotator(judgments: &[Judgment], model_id: &str) -> Result<BTreeMap<String, Percentages>> {
    let js = for_model(judgments, model_id)?;
    let mut by: BTreeMap<String, Vec<Label>> = BTreeMap::new();
    for j in js {
        by.entry(j.annotator.clone()).or_default().push(j.label);
    }
    Ok(by
        .into_iter()
        .map(|(a, ls)| (a, Percentages::from_counts(counts(ls))))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn judgments(model: &str, annotator: &str, c: [usize; 3]) -> Vec<Judgment> {
        let mut out = Vec::new();
        let mut k = 0;
        for (i, &n) in c.iter().enumerate() {
            for _ in 0..n {
                out.push(Judgment {
                    sample_id: format!("s{k:03}"),
                    model_id: model.into(),
                    label: Label::ALL[i],
                    annotator: annotator.into(),
                    timestamp: 1_700_000_000 + k as u64,
                });
                k += 1;
            }
        }
        out
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(largest_remainder([23, 41, 36]), [23, 41, 36]);
        assert_eq!(largest_remainder([1, 1, 1]), [33, 33, 34]);
        assert_eq!(largest_remainder([1, 1, 0]), [50, 50, 0]);
        assert_eq!(largest_remainder([0, 0, 7]), [0, 0, 100]);
        // 12.5 / 12.5 / 75: half-up overshoots to 101 and is corrected.
        assert_eq!(largest_remainder([1, 1, 6]), [12, 13, 75]);
        assert_eq!(largest_remainder([0, 0, 0]), [0, 0, 0]);
    }

    #[test]
    fn always_sums_to_100() {
        for a in 0..12 {
            for b in 0..12 {
                for c in 0..12 {
                    if a + b + c > 0 {
                        let r = largest_remainder([a, b, c]);
                        assert_eq!(r.iter().sum::<u32>(), 100, "{a} {b} {c}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_judgments_is_an_error() {
        let js = judgments("a", "ane", [1, 0, 0]);
        assert!(matches!(aggregate(&js, "b"), Err(AnnError::NoJudgments(_))));
    }

    #[test]
    fn resubmission_is_idempotent() {
        let mut js = judgments("m", "ane", [3, 2, 1]);
        let before = aggregate(&js, "m").unwrap();
        let mut again = js[4].clone();
        again.timestamp += 100;
        js.push(again);
        assert_eq!(aggregate(&js, "m").unwrap(), before);
    }

    #[test]
    fn two_annotators() {
        let mut js = judgments("m", "ane", [2, 0, 0]);
        let mut jon = judgments("m", "jon", [0, 0, 2]);
        for j in &mut jon {
            j.timestamp += 1000;
        }
        js.extend(jon);
        assert_eq!(js.len(), 4);
        assert_eq!(aggregate(&js, "m").unwrap().correct, 100);
        assert_eq!(
            aggregate_with(&js, "m", &Mode::Annotator("jon".into())).unwrap().wrong,
            100
        );
        let per = per_annotator(&js, "m").unwrap();
        assert_eq!(per.len(), 2);
        // One vote each per sample: the tie goes to the lower label.
        assert_eq!(aggregate_with(&js, "m", &Mode::Majority).unwrap().wrong, 100);
        assert!(aggregate_with(&js, "m", &Mode::Annotator("miren".into())).is_err());
    }
}
