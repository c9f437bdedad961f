//! Score-distribution statistics: d-prime, 1-D Wasserstein distance, FPIR
//! and the share of lost accuracy recovered by a mitigation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{ConditionBase, Demographic};
use crate::search::RankOneResult;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("sample too small: need at least {need}, got {got}")]
    TooSmall { need: usize, got: usize },
    #[error("degenerate variance")]
    DegenerateVariance,
    #[error("non-finite value in sample")]
    NonFinite,
    #[error("unmitigated shift must be > 0, got {0}")]
    ZeroShift(f64),
    #[error("mitigated shift must be >= 0, got {0}")]
    NegativeShift(f64),
    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreLabel {
    Mated,
    Nonmated,
    Diff,
}

impl ScoreLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreLabel::Mated => "mated",
            ScoreLabel::Nonmated => "nonmated",
            ScoreLabel::Diff => "diff",
        }
    }

    pub fn extract(self, r: &RankOneResult) -> f64 {
        match self {
            ScoreLabel::Mated => r.mated_score as f64,
            ScoreLabel::Nonmated => r.nonmated_score as f64,
            ScoreLabel::Diff => r.diff as f64,
        }
    }
}

/// One labelled score distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    pub label: ScoreLabel,
    pub values: Vec<f64>,
    pub condition: ConditionBase,
    pub demographic: Demographic,
    pub matcher_name: String,
}

impl ScoreSample {
    pub fn from_results(
        results: &[RankOneResult],
        label: ScoreLabel,
        condition: ConditionBase,
        demographic: Demographic,
        matcher_name: &str,
    ) -> Self {
        Self {
            label,
            values: results.iter().map(|r| label.extract(r)).collect(),
            condition,
            demographic,
            matcher_name: matcher_name.to_string(),
        }
    }
}

fn check_finite(x: &[f64]) -> Result<(), MetricsError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MetricsError::NonFinite)
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, ss / (n - 1.0))
}

/// `|mean(x) - mean(y)| / sqrt((var(x) + var(y)) / 2)` with n-1 variances.
///
/// Two zero-variance samples with the same mean give 0.
pub fn dprime(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    for s in [x, y] {
        if s.len() < 2 {
            return Err(MetricsError::TooSmall { need: 2, got: s.len() });
        }
        check_finite(s)?;
    }
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    let gap = (mx - my).abs();
    let pooled = ((vx + vy) / 2.0).sqrt();
    if pooled == 0.0 {
        return if gap == 0.0 {
            Ok(0.0)
        } else {
            Err(MetricsError::DegenerateVariance)
        };
    }
    Ok(gap / pooled)
}

/// Exact Wasserstein-1 distance between two empirical distributions:
/// the integral of `|F_x(t) - F_y(t)|` over the merged support.
pub fn wasserstein1(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    for s in [x, y] {
        if s.is_empty() {
            return Err(MetricsError::TooSmall { need: 1, got: 0 });
        }
        check_finite(s)?;
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (nx, ny) = (xs.len(), ys.len());

    // Walk the merged breakpoints; between consecutive breakpoints both
    // CDFs are constant. CDF differences are kept as integer numerators.
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = xs[0].min(ys[0]);
    let mut total = 0.0;
    while i < nx || j < ny {
        let next = match (xs.get(i), ys.get(j)) {
            (Some(&a), Some(&b)) => a.min(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        let gap = (i as u128 * ny as u128).abs_diff(j as u128 * nx as u128);
        if gap != 0 {
            total += (next - prev) * (gap as f64 / (nx as f64 * ny as f64));
        }
        while i < nx && xs[i] == next {
            i += 1;
        }
        while j < ny && ys[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// Count of strictly negative differences over the number of probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fpir {
    pub false_positives: usize,
    pub probes: usize,
}

impl Fpir {
    pub fn fraction(&self) -> f64 {
        if self.probes == 0 {
            0.0
        } else {
            self.false_positives as f64 / self.probes as f64
        }
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.fraction()
    }
}

pub fn fpir_from_diffs(diffs: impl IntoIterator<Item = f64>) -> Fpir {
    let mut probes = 0;
    let mut false_positives = 0;
    for d in diffs {
        probes += 1;
        if d < 0.0 {
            false_positives += 1;
        }
    }
    Fpir {
        false_positives,
        probes,
    }
}

pub fn fpir(results: &[RankOneResult]) -> Fpir {
    fpir_from_diffs(results.iter().map(|r| r.diff as f64))
}

/// Percentage of the unmitigated shift removed by the mitigation.
pub fn recovery_pct(w_unmitigated: f64, w_mitigated: f64) -> Result<f64, MetricsError> {
    if !(w_unmitigated > 0.0) || !w_unmitigated.is_finite() {
        return Err(MetricsError::ZeroShift(w_unmitigated));
    }
    if !(w_mitigated >= 0.0) || !w_mitigated.is_finite() {
        return Err(MetricsError::NegativeShift(w_mitigated));
    }
    Ok(100.0 * (w_unmitigated - w_mitigated) / w_unmitigated)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges from `lo` to `hi`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub below: usize,
    pub above: usize,
}

impl Histogram {
    pub fn in_range(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Equal-width bins over `[lo, hi]`; the last bin is closed on the right.
pub fn histogram(x: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Histogram, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::InvalidHistogram("bins must be >= 1".into()));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(MetricsError::InvalidHistogram(format!("range ({lo}, {hi})")));
    }
    check_finite(x)?;
    let width = hi - lo;
    let edges = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 / bins as f64 })
        .collect();
    let mut h = Histogram {
        edges,
        counts: vec![0; bins],
        below: 0,
        above: 0,
    };
    for &v in x {
        if v < lo {
            h.below += 1;
        } else if v > hi {
            h.above += 1;
        } else {
            let k = (((v - lo) / width) * bins as f64).floor() as usize;
            h.counts[k.min(bins - 1)] += 1;
        }
    }
    Ok(h)
}

/// Comparison of one experiment cell against the baseline cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// d-prime between baseline and cell mated distributions.
    pub dprime_mated: f64,
    /// d-prime between baseline and cell non-mated distributions.
    pub dprime_nonmated: f64,
    /// W1 between baseline and cell (mated - non-mated) distributions.
    pub wasserstein_shift: f64,
    pub fpir: f64,
    pub fpir_count: usize,
    pub recovery_pct: Option<f64>,
    pub sample_sizes: SampleSizes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSizes {
    pub baseline: usize,
    pub condition: usize,
}

impl MetricReport {
    pub fn compare(
        baseline: &[RankOneResult],
        condition: &[RankOneResult],
    ) -> Result<Self, MetricsError> {
        let col = |rs: &[RankOneResult], l: ScoreLabel| rs.iter().map(|r| l.extract(r)).collect::<Vec<_>>();
        let f = fpir(condition);
        if f.probes == 0 {
            return Err(MetricsError::TooSmall { need: 1, got: 0 });
        }
        Ok(Self {
            dprime_mated: dprime(&col(baseline, ScoreLabel::Mated), &col(condition, ScoreLabel::Mated))?,
            dprime_nonmated: dprime(
                &col(baseline, ScoreLabel::Nonmated),
                &col(condition, ScoreLabel::Nonmated),
            )?,
            wasserstein_shift: wasserstein1(&col(baseline, ScoreLabel::Diff), &col(condition, ScoreLabel::Diff))?,
            fpir: f.fraction(),
            fpir_count: f.false_positives,
            recovery_pct: None,
            sample_sizes: SampleSizes {
                baseline: baseline.len(),
                condition: condition.len(),
            },
        })
    }
}
