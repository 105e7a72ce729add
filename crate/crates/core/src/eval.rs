//! ROC-AUC over snippet or frame scores and per-video detection verdicts.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::ScoreRecord;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("AUC needs both classes; got {positives} positive and {negatives} negative")]
    SingleClass { positives: usize, negatives: usize },
    #[error("score {index} is {value}, expected a finite value in [0, 1]")]
    Score { index: usize, value: f64 },
    #[error("labels line {line}: {msg}")]
    Labels { line: usize, msg: String },
    #[error("records line {line}: {source}")]
    Records {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("source {0:?} has records but no labels entry")]
    Unlabeled(String),
    #[error("unknown verdict rule {0:?} (expected any-alert or run-N with N >= 1)")]
    Rule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    #[default]
    Snippet,
    Frame,
}

impl FromStr for Unit {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "snippet" => Ok(Unit::Snippet),
            "frame" => Ok(Unit::Frame),
            other => Err(EvalError::Labels {
                line: 0,
                msg: format!("unknown unit {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    scores: Vec<f64>,
    labels: Vec<bool>,
    unit: Unit,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>, unit: Unit) -> Result<Self, EvalError> {
        if scores.len() != labels.len() {
            return Err(EvalError::Length {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if let Some((index, &value)) = scores.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(EvalError::Score { index, value });
        }
        Ok(LabeledScores { scores, labels, unit })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn auc(&self) -> Result<f64, EvalError> {
        roc_auc(&self.scores, &self.labels)
    }
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(u64, u64), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some((index, &value)) = scores.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(EvalError::Score { index, value });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass {
            positives: pos,
            negatives: neg,
        });
    }
    Ok((pos as u64, neg as u64))
}

/// Probability that a random positive outranks a random negative, ties ½.
///
/// Any finite scores are accepted. The Mann–Whitney count is accumulated as
/// an integer number of half-wins and divided once, so the result is the
/// exact rational value rounded to `f64`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut half_wins: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        half_wins += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(half_wins as f64 / (2 * pos * neg) as f64)
}

/// ROC points `(false positive rate, true positive rate)` from the strictest
/// threshold down, starting at `(0, 0)` and ending at `(1, 1)`. Tied scores
/// form one step.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>, EvalError> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order.get(k + 1).is_none_or(|&next| scores[next] != scores[i]);
        if last_of_tie {
            points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VerdictRule {
    /// Detected when any snippet alerts.
    #[default]
    AnyAlert,
    /// Detected when at least `n` consecutive snippets alert.
    Run(usize),
}

impl FromStr for VerdictRule {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "any-alert" {
            return Ok(VerdictRule::AnyAlert);
        }
        match s.strip_prefix("run-").and_then(|n| n.parse::<usize>().ok()) {
            Some(n) if n >= 1 => Ok(VerdictRule::Run(n)),
            _ => Err(EvalError::Rule(s.to_string())),
        }
    }
}

impl fmt::Display for VerdictRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerdictRule::AnyAlert => write!(f, "any-alert"),
            VerdictRule::Run(n) => write!(f, "run-{n}"),
        }
    }
}

/// Whether a video counts as detected. Records are taken in the given order.
pub fn video_verdict(records: &[ScoreRecord], rule: VerdictRule) -> bool {
    let need = match rule {
        VerdictRule::AnyAlert => 1,
        VerdictRule::Run(n) => n,
    };
    let mut run = 0;
    for r in records {
        run = if r.alert { run + 1 } else { 0 };
        if run >= need {
            return true;
        }
    }
    false
}

/// Ground truth: anomalous frame intervals `[start, end)` per source.
/// A source listed without an interval is a normal video.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Labels {
    intervals: BTreeMap<String, Vec<(usize, usize)>>,
}

impl Labels {
    /// Parses `source,start_frame,end_frame` rows after a header line. Empty
    /// start and end mark a normal video.
    pub fn parse_csv(text: &str) -> Result<Self, EvalError> {
        let mut labels = Labels::default();
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim().replace(' ', "") == "source,start_frame,end_frame" => {}
            Some((i, _)) => {
                return Err(EvalError::Labels {
                    line: i + 1,
                    msg: "expected header source,start_frame,end_frame".into(),
                })
            }
            None => return Ok(labels),
        }
        for (i, line) in lines {
            let bad = |msg: String| EvalError::Labels { line: i + 1, msg };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let [source, start, end] = cols[..] else {
                return Err(bad(format!("expected 3 columns, got {}", cols.len())));
            };
            if source.is_empty() {
                return Err(bad("empty source".into()));
            }
            let entry = labels.intervals.entry(source.to_string()).or_default();
            if start.is_empty() && end.is_empty() {
                continue;
            }
            let parse = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("{v:?}: {e}")));
            let (s, e) = (parse(start)?, parse(end)?);
            if e <= s {
                return Err(bad(format!("empty interval [{s}, {e})")));
            }
            entry.push((s, e));
        }
        Ok(labels)
    }

    pub fn insert(&mut self, source: &str, intervals: &[(usize, usize)]) {
        self.intervals
            .entry(source.to_string())
            .or_default()
            .extend_from_slice(intervals);
    }

    pub fn is_abnormal(&self, source: &str) -> Option<bool> {
        self.intervals.get(source).map(|v| !v.is_empty())
    }

    fn overlaps(&self, source: &str, start: usize, end: usize) -> bool {
        self.intervals[source].iter().any(|&(s, e)| s < end && start < e)
    }
}

/// Parses ScoreRecord JSON Lines, skipping blank lines.
pub fn parse_records(text: &str) -> Result<Vec<ScoreRecord>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| EvalError::Records { line: i + 1, source }))
        .collect()
}

fn by_source(records: &[ScoreRecord]) -> BTreeMap<&str, Vec<&ScoreRecord>> {
    let mut m: BTreeMap<&str, Vec<&ScoreRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.source.as_str()).or_default().push(r);
    }
    for v in m.values_mut() {
        v.sort_by_key(|r| r.snippet_index);
    }
    m
}

/// Joins records with labels at the requested unit.
///
/// A snippet is positive when its frame range overlaps an anomalous interval.
/// At frame level, frame `f` of a video takes the score of the snippet with the
/// largest start not after `f`, for frames up to the last snippet's end.
pub fn labeled_scores(records: &[ScoreRecord], labels: &Labels, unit: Unit) -> Result<LabeledScores, EvalError> {
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for (source, recs) in by_source(records) {
        if labels.is_abnormal(source).is_none() {
            return Err(EvalError::Unlabeled(source.to_string()));
        }
        match unit {
            Unit::Snippet => {
                for r in recs {
                    scores.push(r.score as f64);
                    truth.push(labels.overlaps(source, r.start_frame, r.end_frame));
                }
            }
            Unit::Frame => {
                let end = recs.iter().map(|r| r.end_frame).max().unwrap_or(0);
                let mut cur = 0;
                for f in recs[0].start_frame..end {
                    while cur + 1 < recs.len() && recs[cur + 1].start_frame <= f {
                        cur += 1;
                    }
                    scores.push(recs[cur].score as f64);
                    truth.push(labels.overlaps(source, f, f + 1));
                }
            }
        }
    }
    LabeledScores::new(scores, truth, unit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoVerdict {
    pub source: String,
    pub abnormal: bool,
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub unit: Unit,
    /// `None` when the scored units hold only one class.
    pub auc: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
    pub rule: String,
    pub abnormal_videos: usize,
    pub detected_abnormal: usize,
    pub normal_videos: usize,
    pub false_alarms: usize,
    pub videos: Vec<VideoVerdict>,
}

pub fn evaluate(records: &[ScoreRecord], labels: &Labels, unit: Unit, rule: VerdictRule) -> Result<Metrics, EvalError> {
    let data = labeled_scores(records, labels, unit)?;
    let auc = match data.auc() {
        Ok(a) => Some(a),
        Err(EvalError::SingleClass { .. }) => None,
        Err(e) => return Err(e),
    };
    let videos: Vec<VideoVerdict> = by_source(records)
        .into_iter()
        .map(|(source, recs)| {
            let owned: Vec<ScoreRecord> = recs.into_iter().cloned().collect();
            VideoVerdict {
                source: source.to_string(),
                abnormal: labels.is_abnormal(source).unwrap_or(false),
                detected: video_verdict(&owned, rule),
            }
        })
        .collect();
    let positives = data.labels().iter().filter(|&&l| l).count();
    Ok(Metrics {
        unit,
        auc,
        positives,
        negatives: data.labels().len() - positives,
        rule: rule.to_string(),
        abnormal_videos: videos.iter().filter(|v| v.abnormal).count(),
        detected_abnormal: videos.iter().filter(|v| v.abnormal && v.detected).count(),
        normal_videos: videos.iter().filter(|v| !v.abnormal).count(),
        false_alarms: videos.iter().filter(|v| !v.abnormal && v.detected).count(),
        videos,
    })
}
