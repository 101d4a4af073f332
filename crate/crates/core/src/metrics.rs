//! Reliability, generality, locality and compositional metrics over a run
//! ledger, plus the knowledge utilization ratio and CSV reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::editor::{validate_gaps, LedgerRecord, Strategy};
use crate::error::{Error, Result};
use crate::types::Modality;
use crate::world::ProbeKind;

pub const REPORT_SCHEMA: &str = "kedit.report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Fraction {
    pub successes: usize,
    pub samples: usize,
}

impl Fraction {
    pub fn value(self) -> Result<f64> {
        if self.samples == 0 {
            return Err(Error::UndefinedMetric("no samples".into()));
        }
        Ok(self.successes as f64 / self.samples as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    VisRel,
    TextRel,
    TextGen,
    ImageGen,
    TextLoc,
    ImageLoc,
    CompRel,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::VisRel,
        Metric::TextRel,
        Metric::TextGen,
        Metric::ImageGen,
        Metric::TextLoc,
        Metric::ImageLoc,
        Metric::CompRel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::VisRel => "vis_rel",
            Metric::TextRel => "text_rel",
            Metric::TextGen => "text_gen",
            Metric::ImageGen => "image_gen",
            Metric::TextLoc => "text_loc",
            Metric::ImageLoc => "image_loc",
            Metric::CompRel => "comp_rel",
        }
    }

    /// Whether a ledger record contributes to this metric.
    pub fn selects(self, r: &LedgerRecord) -> bool {
        match self {
            Metric::VisRel => r.kind == ProbeKind::Rel && r.modality == Modality::Visual,
            Metric::TextRel => r.kind == ProbeKind::Rel && r.modality == Modality::Textual,
            Metric::TextGen => r.kind == ProbeKind::TextGen,
            Metric::ImageGen => r.kind == ProbeKind::ImageGen,
            Metric::TextLoc => r.kind == ProbeKind::Loc && r.modality == Modality::Textual,
            Metric::ImageLoc => r.kind == ProbeKind::Loc && r.modality == Modality::Visual,
            Metric::CompRel => r.kind == ProbeKind::Comp,
        }
    }
}

pub fn count(ledger: &[LedgerRecord], metric: Metric, gap: usize) -> Fraction {
    ledger
        .iter()
        .filter(|r| r.gap == gap && metric.selects(r))
        .fold(Fraction::default(), |f, r| Fraction {
            successes: f.successes + usize::from(r.outcome),
            samples: f.samples + 1,
        })
}

fn metric_value(ledger: &[LedgerRecord], metric: Metric, gap: usize) -> Result<f64> {
    count(ledger, metric, gap)
        .value()
        .map_err(|_| Error::UndefinedMetric(format!("{} has no samples at gap {gap}", metric.name())))
}

pub fn reliability(ledger: &[LedgerRecord], modality: Modality, gap: usize) -> Result<f64> {
    match modality {
        Modality::Visual => metric_value(ledger, Metric::VisRel, gap),
        Modality::Textual => metric_value(ledger, Metric::TextRel, gap),
    }
}

/// `kind` is [`ProbeKind::TextGen`] or [`ProbeKind::ImageGen`].
pub fn generality(ledger: &[LedgerRecord], kind: ProbeKind, gap: usize) -> Result<f64> {
    match kind {
        ProbeKind::TextGen => metric_value(ledger, Metric::TextGen, gap),
        ProbeKind::ImageGen => metric_value(ledger, Metric::ImageGen, gap),
        other => Err(Error::Precondition(format!("{other:?} is not a generality probe"))),
    }
}

/// Agreement with the pre-edit outputs, on textual or visual locality probes.
pub fn locality(ledger: &[LedgerRecord], modality: Modality, gap: usize) -> Result<f64> {
    match modality {
        Modality::Visual => metric_value(ledger, Metric::ImageLoc, gap),
        Modality::Textual => metric_value(ledger, Metric::TextLoc, gap),
    }
}

pub fn comp_rel(ledger: &[LedgerRecord], gap: usize) -> Result<f64> {
    metric_value(ledger, Metric::CompRel, gap)
}

/// `2 · comp / (vis + text)`.
pub fn kur(comp_rel: f64, vis_rel: f64, text_rel: f64) -> Result<f64> {
    let den = vis_rel + text_rel;
    if !(den > 0.0) {
        return Err(Error::UndefinedMetric("KUR needs vis_rel + text_rel > 0".into()));
    }
    Ok(2.0 * comp_rel / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapLabel {
    Gap(usize),
    /// Mean of the per-gap rows.
    Average,
}

impl std::fmt::Display for GapLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GapLabel::Gap(g) => write!(f, "{g}"),
            GapLabel::Average => f.write_str("avg"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: Strategy,
    pub gap: GapLabel,
    /// One value per [`Metric::ALL`] entry.
    pub values: Vec<f64>,
    /// Sample counts per metric; summed over gaps in the average row.
    pub counts: Vec<usize>,
    /// `None` when both reliabilities are zero; written as `NA`.
    pub kur: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn row(&self, strategy: Strategy, gap: GapLabel) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.gap == gap)
    }

    pub fn value(&self, strategy: Strategy, gap: GapLabel, metric: Metric) -> Option<f64> {
        let i = Metric::ALL.iter().position(|&m| m == metric)?;
        self.row(strategy, gap).map(|r| r.values[i])
    }

    pub fn merge(reports: impl IntoIterator<Item = MetricsReport>) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            rows: reports.into_iter().flat_map(|r| r.rows).collect(),
        }
    }

    /// One header line, then one line per row, values as percentages with
    /// two decimals, KUR as a ratio.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,gap");
        for m in Metric::ALL {
            let _ = write!(s, ",{}", m.name());
        }
        s.push_str(",kur");
        for m in Metric::ALL {
            let _ = write!(s, ",n_{}", m.name());
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.strategy, r.gap);
            for v in &r.values {
                let _ = write!(s, ",{:.2}", 100.0 * v);
            }
            match r.kur {
                Some(k) => {
                    let _ = write!(s, ",{k:.4}");
                }
                None => s.push_str(",NA"),
            }
            for c in &r.counts {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

/// Per-gap rows for every scheduled gap, then the gap-averaged row. A
/// metric without samples at a scheduled gap is an error.
pub fn evaluate_run(strategy: Strategy, ledger: &[LedgerRecord], gaps: &[usize]) -> Result<MetricsReport> {
    validate_gaps(gaps)?;
    let mut rows = Vec::with_capacity(gaps.len() + 1);
    for &g in gaps {
        let mut values = Vec::with_capacity(Metric::ALL.len());
        let mut counts = Vec::with_capacity(Metric::ALL.len());
        for m in Metric::ALL {
            values.push(metric_value(ledger, m, g)?);
            counts.push(count(ledger, m, g).samples);
        }
        let k = kur(values[6], values[0], values[1]).ok();
        rows.push(ReportRow {
            strategy,
            gap: GapLabel::Gap(g),
            values,
            counts,
            kur: k,
        });
    }
    let n = rows.len() as f64;
    let values: Vec<f64> = (0..Metric::ALL.len())
        .map(|i| rows.iter().map(|r| r.values[i]).sum::<f64>() / n)
        .collect();
    let counts: Vec<usize> = (0..Metric::ALL.len()).map(|i| rows.iter().map(|r| r.counts[i]).sum()).collect();
    let k = kur(values[6], values[0], values[1]).ok();
    rows.push(ReportRow {
        strategy,
        gap: GapLabel::Average,
        values,
        counts,
        kur: k,
    });
    Ok(MetricsReport {
        schema: REPORT_SCHEMA.into(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(edit: usize, modality: Modality, gap: usize, kind: ProbeKind, outcome: bool) -> LedgerRecord {
        LedgerRecord {
            edit,
            pair: edit / 2,
            modality,
            gap,
            kind,
            outcome,
            output: String::new(),
            context: 0,
        }
    }

    #[test]
    fn fraction_arithmetic() {
        let l: Vec<_> = [true, false, true, true, false]
            .iter()
            .enumerate()
            .map(|(i, &o)| rec(2 * i, Modality::Visual, 0, ProbeKind::Rel, o))
            .collect();
        assert_eq!(reliability(&l, Modality::Visual, 0).unwrap(), 0.6);
        assert!(matches!(reliability(&l, Modality::Textual, 0), Err(Error::UndefinedMetric(_))));
        assert!(matches!(reliability(&l, Modality::Visual, 10), Err(Error::UndefinedMetric(_))));
        assert!(matches!(generality(&l, ProbeKind::Rel, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn kur_cases() {
        assert_eq!(kur(0.5, 1.0, 1.0).unwrap(), 0.5);
        assert_eq!(kur(0.7, 0.6, 0.8).unwrap(), 1.0);
        assert!(matches!(kur(0.5, 0.0, 0.0), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn csv_layout() {
        let mut l = Vec::new();
        for g in [0, 1] {
            for (m, kinds) in [
                (Modality::Visual, vec![ProbeKind::Rel, ProbeKind::TextGen, ProbeKind::ImageGen, ProbeKind::Loc]),
                (Modality::Textual, vec![ProbeKind::Rel, ProbeKind::TextGen, ProbeKind::Loc, ProbeKind::Comp]),
            ] {
                for k in kinds {
                    l.push(rec(0, m, g, k, g == 0));
                }
            }
        }
        let r = evaluate_run(Strategy::ExternalOnly, &l, &[0, 1]).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("strategy,gap,vis_rel"));
        assert!(lines[1].starts_with("external_only,0,100.00"));
        // every gap-1 outcome is false, so KUR is undefined there
        assert_eq!(r.rows[1].kur, None);
        assert!(lines[2].contains(",NA,"));
        assert!(matches!(evaluate_run(Strategy::ExternalOnly, &l, &[0, 2]), Err(Error::UndefinedMetric(_))));
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows[2].gap, GapLabel::Average);
        assert_eq!(r.rows[2].values[0], 0.5);
    }
}
