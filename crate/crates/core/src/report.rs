//! Analysis of a trials dataset: summary table, figure data and the full
//! battery of tests, as one JSON document plus flat CSV figure files.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{Condition, OperatorSummary, TrialRecord};
use crate::stats::{
    describe, histogram, kde_density, linspace, mann_whitney_u, mean_ci95, paired_t_test,
    quantile_sorted, shapiro_wilk, silverman_bandwidth, two_way_anova, wilcoxon_signed_rank,
    Description, Observation, StatsError, TestResult,
};

/// Insertion-angle bands (deg): [0,10), [10,20), [20,30].
pub const ANGLE_BANDS: [(f64, f64); 3] = [(0.0, 10.0), (10.0, 20.0), (20.0, 30.0)];
pub const CONDITIONS: [Condition; 2] = [Condition::Manual, Condition::Robotic];
const HISTOGRAM_BINS: usize = 20;
const KDE_POINTS: usize = 128;
const ALPHA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("dataset has no trial records")]
    Empty,
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Band index of an insertion angle; angles past the last edge fall in the
/// last band.
pub fn angle_band(angle_deg: f64) -> usize {
    ANGLE_BANDS
        .iter()
        .position(|(_, hi)| angle_deg < *hi)
        .unwrap_or(ANGLE_BANDS.len() - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigureKind {
    Histogram,
    Kde,
    Box,
    Violin,
    AngleProfile,
    SummaryBar,
}

impl FigureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FigureKind::Histogram => "histogram",
            FigureKind::Kde => "kde",
            FigureKind::Box => "box",
            FigureKind::Violin => "violin",
            FigureKind::AngleProfile => "angle_profile",
            FigureKind::SummaryBar => "summary_bar",
        }
    }

    pub fn file_name(self) -> String {
        format!("fig_{}.csv", self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    /// `None` marks an undefined value (e.g. a CI from one observation).
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub columns: Vec<Column>,
}

impl Series {
    fn new(label: &str, columns: Vec<(&str, Vec<Option<f64>>)>) -> Self {
        Self {
            label: label.to_string(),
            columns: columns
                .into_iter()
                .map(|(name, values)| Column {
                    name: name.to_string(),
                    values,
                })
                .collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.values.len())
    }

    pub fn is_rectangular(&self) -> bool {
        self.columns.iter().all(|c| c.values.len() == self.rows())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureData {
    pub kind: FigureKind,
    pub series: Vec<Series>,
}

impl FigureData {
    /// Long-format CSV: a `series` column followed by the series columns.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let names: Vec<&str> = self
            .series
            .first()
            .map(|s| s.columns.iter().map(|c| c.name.as_str()).collect())
            .unwrap_or_default();
        writeln!(w, "series,{}", names.join(","))?;
        for s in &self.series {
            for row in 0..s.rows() {
                let cells: Vec<String> = s
                    .columns
                    .iter()
                    .map(|c| c.values[row].map(|v| v.to_string()).unwrap_or_default())
                    .collect();
                writeln!(w, "{},{}", s.label, cells.join(","))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: Option<f64>,
    pub n: usize,
}

impl MeanSd {
    fn of(x: &[f64]) -> Option<Self> {
        describe(x).ok().map(|d| Self {
            mean: d.mean,
            sd: d.sd,
            n: d.n,
        })
    }
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub condition: Condition,
    pub operators: usize,
    /// Per-target targeting error (mm).
    pub error_mm: Option<MeanSd>,
    /// Per-operator task completion time over all targets (s).
    pub time_s: Option<MeanSd>,
    /// Per-operator ergonomic proxy; absent without operator summaries.
    pub ergonomic_cost: Option<MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveRow {
    pub condition: Condition,
    pub metric: String,
    pub stats: Description,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleProfileRow {
    pub condition: Condition,
    pub band_lo_deg: f64,
    pub band_hi_deg: f64,
    pub n: usize,
    pub mean_error_mm: Option<f64>,
    pub ci95_lo: Option<f64>,
    pub ci95_hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestEntry {
    pub name: String,
    /// What was compared.
    pub subject: String,
    pub result: Option<TestResult>,
    /// Why the test could not be run.
    pub skipped: Option<String>,
}

impl TestEntry {
    fn from(name: &str, subject: &str, r: Result<TestResult, StatsError>) -> Self {
        match r {
            Ok(result) => Self {
                name: name.into(),
                subject: subject.into(),
                result: Some(result),
                skipped: None,
            },
            Err(e) => Self::skip(name, subject, e.to_string()),
        }
    }

    fn skip(name: &str, subject: &str, reason: String) -> Self {
        Self {
            name: name.into(),
            subject: subject.into(),
            result: None,
            skipped: Some(reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub records: usize,
    pub operators: usize,
    pub summary: Vec<SummaryRow>,
    pub descriptives: Vec<DescriptiveRow>,
    pub angle_profile: Vec<AngleProfileRow>,
    /// Paired test used for the error comparison: the t-test unless the
    /// Shapiro-Wilk check on the differences rejects normality.
    pub primary_error_test: Option<String>,
    pub tests: Vec<TestEntry>,
    pub figures: Vec<FigureData>,
}

impl Report {
    pub fn test(&self, name: &str, subject: &str) -> Option<&TestEntry> {
        self.tests
            .iter()
            .find(|t| t.name == name && t.subject == subject)
    }

    pub fn figure(&self, kind: FigureKind) -> Option<&FigureData> {
        self.figures.iter().find(|f| f.kind == kind)
    }

    pub fn to_json(&self) -> Result<String, ReportError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Per-operator values of one metric, keyed by operator id.
type PerOperator = BTreeMap<usize, f64>;

fn per_operator(records: &[TrialRecord], condition: Condition, total: bool) -> PerOperator {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.condition == condition) {
        let value = if total { r.time_s } else { r.error_mm };
        let e = acc.entry(r.operator_id).or_insert((0.0, 0));
        e.0 += value;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(id, (s, n))| (id, if total { s } else { s / n as f64 }))
        .collect()
}

/// Values of operators present in both maps, in operator order.
fn paired(a: &PerOperator, b: &PerOperator) -> (Vec<f64>, Vec<f64>) {
    a.iter()
        .filter_map(|(id, va)| b.get(id).map(|vb| (*va, *vb)))
        .unzip()
}

fn some(v: &[f64]) -> Vec<Option<f64>> {
    v.iter().map(|x| Some(*x)).collect()
}

/// Build the full report. `operators` carries the per-operator summaries
/// written alongside the trials; without them the ergonomic comparison is
/// skipped.
pub fn build_report(
    records: &[TrialRecord],
    operators: Option<&[OperatorSummary]>,
) -> Result<Report, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut records = records.to_vec();
    crate::sim::sort_records(&mut records);
    let operator_count = records
        .iter()
        .map(|r| r.operator_id)
        .collect::<std::collections::BTreeSet<_>>()
        .len();

    let errors: BTreeMap<Condition, Vec<f64>> = CONDITIONS
        .iter()
        .map(|&c| {
            (
                c,
                records
                    .iter()
                    .filter(|r| r.condition == c)
                    .map(|r| r.error_mm)
                    .collect(),
            )
        })
        .collect();
    let op_error: BTreeMap<Condition, PerOperator> = CONDITIONS
        .iter()
        .map(|&c| (c, per_operator(&records, c, false)))
        .collect();
    let op_time: BTreeMap<Condition, PerOperator> = CONDITIONS
        .iter()
        .map(|&c| (c, per_operator(&records, c, true)))
        .collect();
    let op_ergo: Option<BTreeMap<Condition, PerOperator>> = operators.map(|ops| {
        CONDITIONS
            .iter()
            .map(|&c| {
                (
                    c,
                    ops.iter()
                        .filter(|s| s.condition == c)
                        .map(|s| (s.operator_id, s.ergonomic_cost))
                        .collect(),
                )
            })
            .collect()
    });

    let values = |m: &PerOperator| m.values().copied().collect::<Vec<f64>>();
    let summary: Vec<SummaryRow> = CONDITIONS
        .iter()
        .map(|&c| SummaryRow {
            condition: c,
            operators: op_error[&c].len(),
            error_mm: MeanSd::of(&errors[&c]),
            time_s: MeanSd::of(&values(&op_time[&c])),
            ergonomic_cost: op_ergo.as_ref().and_then(|m| MeanSd::of(&values(&m[&c]))),
        })
        .collect();

    let mut descriptives = Vec::new();
    for &c in &CONDITIONS {
        let metrics: [(&str, Vec<f64>); 3] = [
            ("error_mm", errors[&c].clone()),
            ("operator_mean_error_mm", values(&op_error[&c])),
            ("operator_time_s", values(&op_time[&c])),
        ];
        for (metric, v) in metrics {
            if let Ok(stats) = describe(&v) {
                descriptives.push(DescriptiveRow {
                    condition: c,
                    metric: metric.into(),
                    stats,
                });
            }
        }
        if let Some(m) = &op_ergo {
            if let Ok(stats) = describe(&values(&m[&c])) {
                descriptives.push(DescriptiveRow {
                    condition: c,
                    metric: "ergonomic_cost".into(),
                    stats,
                });
            }
        }
    }

    let mut angle_profile = Vec::new();
    for &c in &CONDITIONS {
        for (band, &(lo, hi)) in ANGLE_BANDS.iter().enumerate() {
            let v: Vec<f64> = records
                .iter()
                .filter(|r| r.condition == c && angle_band(r.insertion_angle_deg) == band)
                .map(|r| r.error_mm)
                .collect();
            let (mean, ci) = match mean_ci95(&v) {
                Ok((m, ci)) => (Some(m), ci),
                Err(_) => (None, None),
            };
            angle_profile.push(AngleProfileRow {
                condition: c,
                band_lo_deg: lo,
                band_hi_deg: hi,
                n: v.len(),
                mean_error_mm: mean,
                ci95_lo: ci.map(|x| x.0),
                ci95_hi: ci.map(|x| x.1),
            });
        }
    }

    let (manual, robotic) = (Condition::Manual, Condition::Robotic);
    let mut tests = Vec::new();
    let (em, er) = paired(&op_error[&manual], &op_error[&robotic]);
    let (tm, tr) = paired(&op_time[&manual], &op_time[&robotic]);
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>();
    let subject_error = "operator mean error, manual vs robotic";
    let subject_time = "operator completion time, manual vs robotic";
    tests.push(TestEntry::from(
        "paired_t",
        subject_error,
        paired_t_test(&em, &er),
    ));
    tests.push(TestEntry::from(
        "wilcoxon_signed_rank",
        subject_error,
        wilcoxon_signed_rank(&em, &er),
    ));
    tests.push(TestEntry::from(
        "shapiro_wilk",
        "paired error differences",
        shapiro_wilk(&diff(&em, &er)),
    ));
    tests.push(TestEntry::from(
        "paired_t",
        subject_time,
        paired_t_test(&tm, &tr),
    ));
    tests.push(TestEntry::from(
        "wilcoxon_signed_rank",
        subject_time,
        wilcoxon_signed_rank(&tm, &tr),
    ));
    tests.push(TestEntry::from(
        "shapiro_wilk",
        "paired time differences",
        shapiro_wilk(&diff(&tm, &tr)),
    ));
    let subject_ergo = "operator ergonomic proxy, manual vs robotic";
    match &op_ergo {
        Some(m) => tests.push(TestEntry::from(
            "mann_whitney_u",
            subject_ergo,
            mann_whitney_u(&values(&m[&manual]), &values(&m[&robotic])),
        )),
        None => tests.push(TestEntry::skip(
            "mann_whitney_u",
            subject_ergo,
            "no per-operator summaries available".into(),
        )),
    }
    let obs: Vec<Observation> = records
        .iter()
        .map(|r| Observation {
            a: match r.condition {
                Condition::Manual => 0,
                Condition::Robotic => 1,
            },
            b: angle_band(r.insertion_angle_deg),
            value: r.error_mm,
        })
        .collect();
    let anova_subject = "target error by condition x angle band";
    match two_way_anova(&obs, 2, ANGLE_BANDS.len()) {
        Ok(t) => {
            for r in [t.a, t.b, t.interaction] {
                let name = r.name.clone();
                tests.push(TestEntry::from(&name, anova_subject, Ok(r)));
            }
        }
        Err(e) => {
            for name in ["anova_condition", "anova_angle_band", "anova_interaction"] {
                tests.push(TestEntry::skip(name, anova_subject, e.to_string()));
            }
        }
    }

    let normality = tests
        .iter()
        .find(|t| t.name == "shapiro_wilk" && t.subject == "paired error differences")
        .and_then(|t| t.result.as_ref().map(|r| r.p_value));
    let have = |name: &str| {
        tests
            .iter()
            .any(|t| t.name == name && t.subject == subject_error && t.result.is_some())
    };
    let primary_error_test = match normality {
        Some(p) if p < ALPHA && have("wilcoxon_signed_rank") => Some("wilcoxon_signed_rank".into()),
        _ if have("paired_t") => Some("paired_t".into()),
        _ => None,
    };

    let figures = build_figures(&errors, &summary, &angle_profile);
    Ok(Report {
        records: records.len(),
        operators: operator_count,
        summary,
        descriptives,
        angle_profile,
        primary_error_test,
        tests,
        figures,
    })
}

fn build_figures(
    errors: &BTreeMap<Condition, Vec<f64>>,
    summary: &[SummaryRow],
    profile: &[AngleProfileRow],
) -> Vec<FigureData> {
    let present: Vec<(Condition, &Vec<f64>)> = CONDITIONS
        .iter()
        .filter(|c| !errors[c].is_empty())
        .map(|c| (*c, &errors[c]))
        .collect();
    let all: Vec<f64> = present
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = all
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(lo + 1e-9);

    let edges = linspace(lo, hi, HISTOGRAM_BINS + 1);
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let histogram_series = present
        .iter()
        .map(|(c, v)| {
            let counts = histogram(v, &edges);
            let density: Vec<Option<f64>> = counts
                .iter()
                .map(|&k| Some(k as f64 / (v.len() as f64 * width)))
                .collect();
            Series::new(
                c.as_str(),
                vec![
                    ("bin_lo", some(&edges[..HISTOGRAM_BINS])),
                    ("bin_hi", some(&edges[1..])),
                    ("count", counts.iter().map(|&k| Some(k as f64)).collect()),
                    ("density", density),
                ],
            )
        })
        .collect();

    let pad = 0.25 * (hi - lo);
    let grid = linspace((lo - pad).max(0.0), hi + pad, KDE_POINTS);
    let kde_series = present
        .iter()
        .filter_map(|(c, v)| {
            kde_density(v, &grid)
                .ok()
                .map(|d| Series::new(c.as_str(), vec![("x", some(&grid)), ("density", some(&d))]))
        })
        .collect();

    let box_series = present
        .iter()
        .filter_map(|(c, v)| {
            let d = describe(v).ok()?;
            let mut s = v.to_vec();
            s.sort_by(f64::total_cmp);
            let iqr = d.q3 - d.q1;
            let whisker_lo = s
                .iter()
                .copied()
                .find(|x| *x >= d.q1 - 1.5 * iqr)
                .unwrap_or(d.min);
            let whisker_hi = s
                .iter()
                .rev()
                .copied()
                .find(|x| *x <= d.q3 + 1.5 * iqr)
                .unwrap_or(d.max);
            let outliers = s
                .iter()
                .filter(|x| **x < whisker_lo || **x > whisker_hi)
                .count();
            Some(Series::new(
                c.as_str(),
                vec![
                    ("min", vec![Some(d.min)]),
                    ("whisker_lo", vec![Some(whisker_lo)]),
                    ("q1", vec![Some(d.q1)]),
                    ("median", vec![Some(d.median)]),
                    ("q3", vec![Some(d.q3)]),
                    ("whisker_hi", vec![Some(whisker_hi)]),
                    ("max", vec![Some(d.max)]),
                    ("mean", vec![Some(d.mean)]),
                    ("outliers", vec![Some(outliers as f64)]),
                ],
            ))
        })
        .collect();

    let violin_series = present
        .iter()
        .filter_map(|(c, v)| {
            let h = silverman_bandwidth(v).ok()?;
            let mut s = v.to_vec();
            s.sort_by(f64::total_cmp);
            let y = linspace(
                (s[0] - 2.0 * h).max(0.0),
                s[s.len() - 1] + 2.0 * h,
                KDE_POINTS,
            );
            let d = kde_density(v, &y).ok()?;
            let peak = d.iter().copied().fold(0.0, f64::max);
            let width: Vec<f64> = d
                .iter()
                .map(|x| if peak > 0.0 { x / peak } else { 0.0 })
                .collect();
            let q = |p| Some(quantile_sorted(&s, p));
            let n = y.len();
            Some(Series::new(
                c.as_str(),
                vec![
                    ("y", some(&y)),
                    ("density", some(&d)),
                    ("half_width", some(&width)),
                    ("q1", vec![q(0.25); n]),
                    ("median", vec![q(0.5); n]),
                    ("q3", vec![q(0.75); n]),
                ],
            ))
        })
        .collect();

    let profile_series = CONDITIONS
        .iter()
        .map(|&c| {
            let rows: Vec<&AngleProfileRow> = profile.iter().filter(|r| r.condition == c).collect();
            Series::new(
                c.as_str(),
                vec![
                    (
                        "band_lo_deg",
                        rows.iter().map(|r| Some(r.band_lo_deg)).collect(),
                    ),
                    (
                        "band_hi_deg",
                        rows.iter().map(|r| Some(r.band_hi_deg)).collect(),
                    ),
                    ("n", rows.iter().map(|r| Some(r.n as f64)).collect()),
                    (
                        "mean_error_mm",
                        rows.iter().map(|r| r.mean_error_mm).collect(),
                    ),
                    ("ci95_lo", rows.iter().map(|r| r.ci95_lo).collect()),
                    ("ci95_hi", rows.iter().map(|r| r.ci95_hi).collect()),
                ],
            )
        })
        .collect();

    let bar_series = summary
        .iter()
        .map(|row| {
            let m = |x: &Option<MeanSd>| x.map(|v| v.mean);
            let s = |x: &Option<MeanSd>| x.and_then(|v| v.sd);
            Series::new(
                row.condition.as_str(),
                vec![
                    ("error_mean_mm", vec![m(&row.error_mm)]),
                    ("error_sd_mm", vec![s(&row.error_mm)]),
                    ("time_mean_s", vec![m(&row.time_s)]),
                    ("time_sd_s", vec![s(&row.time_s)]),
                    ("ergonomic_mean", vec![m(&row.ergonomic_cost)]),
                    ("ergonomic_sd", vec![s(&row.ergonomic_cost)]),
                ],
            )
        })
        .collect();

    vec![
        FigureData {
            kind: FigureKind::Histogram,
            series: histogram_series,
        },
        FigureData {
            kind: FigureKind::Kde,
            series: kde_series,
        },
        FigureData {
            kind: FigureKind::Box,
            series: box_series,
        },
        FigureData {
            kind: FigureKind::Violin,
            series: violin_series,
        },
        FigureData {
            kind: FigureKind::AngleProfile,
            series: profile_series,
        },
        FigureData {
            kind: FigureKind::SummaryBar,
            series: bar_series,
        },
    ]
}

/// Write `report.json` and one `fig_<kind>.csv` per figure into `dir`.
pub fn write_report(
    report: &Report,
    dir: &std::path::Path,
) -> Result<Vec<std::path::PathBuf>, ReportError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let json = dir.join("report.json");
    std::fs::write(&json, report.to_json()?)?;
    written.push(json);
    for fig in &report.figures {
        let path = dir.join(fig.kind.file_name());
        let mut buf = Vec::new();
        fig.write_csv(&mut buf)?;
        std::fs::write(&path, buf)?;
        written.push(path);
    }
    Ok(written)
}
