//! Per-iteration competition between the two students on the labeled part of
//! the batch.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Tensor4;
use crate::error::{Error, Result};
use crate::metrics::{self, check_probs, Mask};
use crate::synthdata::Student;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Dice,
    Ce,
    Jaccard,
    Hd95,
    Asd,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Dice, Metric::Ce, Metric::Jaccard, Metric::Hd95, Metric::Asd];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "Dice",
            Metric::Ce => "CE",
            Metric::Jaccard => "Jac",
            Metric::Hd95 => "95HD",
            Metric::Asd => "ASD",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Dice | Metric::Jaccard)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dice" => Ok(Metric::Dice),
            "ce" => Ok(Metric::Ce),
            "jac" | "jaccard" => Ok(Metric::Jaccard),
            "95hd" | "hd95" => Ok(Metric::Hd95),
            "asd" => Ok(Metric::Asd),
            other => Err(Error::config("competition", format!("unknown metric {other:?}"))),
        }
    }
}

/// Higher-is-better form of a raw metric value. Undefined or NaN values map
/// to negative infinity, the worst possible score.
pub fn orient(metric: Metric, value: Option<f64>) -> f64 {
    match value {
        Some(v) if !v.is_nan() => {
            if metric.higher_is_better() {
                v
            } else {
                -v
            }
        }
        _ => f64::NEG_INFINITY,
    }
}

/// How per-metric comparisons are combined into one verdict.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Combination {
    /// Most per-metric wins; ties go to the first configured metric, then
    /// to the previous winner, then to student 1.
    #[default]
    PerMetricWins,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompetitionConfig {
    metrics: Vec<Metric>,
    pub combination: Combination,
}

impl CompetitionConfig {
    pub fn new(metrics: Vec<Metric>) -> Result<Self> {
        if metrics.is_empty() {
            return Err(Error::config("competition", "needs at least one metric"));
        }
        for (i, m) in metrics.iter().enumerate() {
            if metrics[..i].contains(m) {
                return Err(Error::config("competition", format!("metric {m} listed twice")));
            }
        }
        Ok(Self {
            metrics,
            combination: Combination::PerMetricWins,
        })
    }

    pub fn dice() -> Self {
        Self::new(vec![Metric::Dice]).expect("non-empty")
    }

    pub fn metrics(&self) -> &[Metric] {
        &self.metrics
    }

    /// Short label such as `Dice+CE`.
    pub fn label(&self) -> String {
        self.metrics.iter().map(|m| m.name()).collect::<Vec<_>>().join("+")
    }

    /// Parses a `+` or `,` separated metric list.
    pub fn parse(s: &str) -> Result<Self> {
        let metrics = s
            .split(['+', ','])
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        Self::new(metrics)
    }

    /// The ten metric sets of the competition ablation.
    pub fn ablation_set() -> Vec<Self> {
        use Metric::*;
        [
            vec![Dice],
            vec![Ce],
            vec![Jaccard],
            vec![Asd],
            vec![Hd95],
            vec![Dice, Jaccard],
            vec![Dice, Ce],
            vec![Ce, Jaccard],
            vec![Hd95, Asd],
            vec![Ce, Jaccard, Dice],
        ]
        .into_iter()
        .map(|m| Self::new(m).expect("valid ablation config"))
        .collect()
    }
}

impl Default for CompetitionConfig {
    fn default() -> Self {
        Self::dice()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricScore {
    pub metric: Metric,
    /// Batch-mean raw values; `None` when undefined for some item.
    pub s1: Option<f64>,
    pub s2: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TieBreak {
    FirstMetric,
    PreviousWinner,
    DefaultStudent1,
}

impl TieBreak {
    pub fn name(self) -> &'static str {
        match self {
            TieBreak::FirstMetric => "first-metric",
            TieBreak::PreviousWinner => "previous-winner",
            TieBreak::DefaultStudent1 => "default-s1",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompetitionOutcome {
    pub winner: Student,
    pub loser: Student,
    pub per_metric_scores: Vec<MetricScore>,
    pub tie_broken_by: Option<TieBreak>,
}

/// One student's predictions on the labeled items and the matching truths,
/// both in that student's frame.
#[derive(Clone, Copy)]
pub struct Contestant<'a> {
    pub probs: &'a Tensor4,
    pub truths: &'a [Mask],
}

/// Batch mean of `metric` over the items, `None` if any item is undefined.
pub fn batch_score(metric: Metric, who: Contestant<'_>) -> Result<Option<f64>> {
    check_probs("compete", who.probs, who.truths)?;
    if metric == Metric::Ce {
        return metrics::ce_metric(who.probs, who.truths).map(Some);
    }
    let mut total = 0.0;
    for (n, truth) in who.truths.iter().enumerate() {
        let pred = Mask::harden(who.probs, n);
        let value = match metric {
            Metric::Dice => metrics::dice_score(&pred, truth),
            Metric::Jaccard => metrics::jaccard_score(&pred, truth),
            Metric::Hd95 => metrics::hd95(&pred, truth),
            Metric::Asd => metrics::asd(&pred, truth),
            Metric::Ce => unreachable!(),
        };
        match value {
            Ok(v) => total += v,
            Err(Error::UndefinedMetric(_)) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(total / who.truths.len() as f64))
}

/// Scores both students on every configured metric and picks the winner.
pub fn compete(
    s1: Contestant<'_>,
    s2: Contestant<'_>,
    config: &CompetitionConfig,
    previous_winner: Option<Student>,
) -> Result<CompetitionOutcome> {
    if s1.truths.is_empty() || s2.truths.is_empty() {
        return Err(Error::Argument("competition needs at least one labeled item".into()));
    }
    let scores = config
        .metrics()
        .iter()
        .map(|&metric| {
            Ok(MetricScore {
                metric,
                s1: batch_score(metric, s1)?,
                s2: batch_score(metric, s2)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let oriented: Vec<(f64, f64)> = scores
        .iter()
        .map(|s| (orient(s.metric, s.s1), orient(s.metric, s.s2)))
        .collect();
    let (winner, tie_broken_by) = decide(&oriented, previous_winner);
    Ok(CompetitionOutcome {
        winner,
        loser: winner.other(),
        per_metric_scores: scores,
        tie_broken_by,
    })
}

/// Verdict from oriented `(s1, s2)` pairs in configured priority order.
pub fn decide(oriented: &[(f64, f64)], previous_winner: Option<Student>) -> (Student, Option<TieBreak>) {
    let wins1 = oriented.iter().filter(|(a, b)| a > b).count();
    let wins2 = oriented.iter().filter(|(a, b)| b > a).count();
    if wins1 != wins2 {
        let w = if wins1 > wins2 { Student::S1 } else { Student::S2 };
        return (w, None);
    }
    if let Some(&(a, b)) = oriented.first() {
        if a != b && !(a.is_nan() || b.is_nan()) {
            let w = if a > b { Student::S1 } else { Student::S2 };
            return (w, Some(TieBreak::FirstMetric));
        }
    }
    match previous_winner {
        Some(w) => (w, Some(TieBreak::PreviousWinner)),
        None => (Student::S1, Some(TieBreak::DefaultStudent1)),
    }
}
