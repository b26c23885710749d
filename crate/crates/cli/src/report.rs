//! Side-by-side comparison table for metric reports.
//!
//! The last listed method is treated as the subject: with two or more
//! methods the table gains a final row giving its percent change against
//! the best of the other methods, per column.

use stereovol_core::eval::MetricsReport;

pub struct NamedReport {
    pub name: String,
    pub metrics: MetricsReport,
}

/// True when smaller is better.
struct Column {
    header: &'static str,
    lower_is_better: bool,
    decimals: usize,
    value: fn(&MetricsReport) -> Option<f64>,
}

const COLUMNS: &[Column] = &[
    Column {
        header: "MAE (mL) ↓",
        lower_is_better: true,
        decimals: 2,
        value: |m| Some(m.mae_ml),
    },
    Column {
        header: "MAPE (%) ↓",
        lower_is_better: true,
        decimals: 2,
        value: |m| Some(m.mape_percent),
    },
    Column {
        header: "Pearson r ↑",
        lower_is_better: false,
        decimals: 4,
        value: |m| Some(m.pearson_r),
    },
    Column {
        header: "R^2 ↑",
        lower_is_better: false,
        decimals: 4,
        value: |m| Some(m.r_squared),
    },
    Column {
        header: "Cosine ↑",
        lower_is_better: false,
        decimals: 4,
        value: |m| Some(m.cosine_similarity),
    },
    Column {
        header: "Accuracy ↑",
        lower_is_better: false,
        decimals: 4,
        value: |m| m.classification_accuracy,
    },
];

fn format_cell(value: Option<f64>, decimals: usize) -> String {
    match value {
        Some(v) => format!("{v:.decimals$}"),
        None => "-".into(),
    }
}

fn improvement_cell(reports: &[NamedReport], col: &Column) -> String {
    let ours = match (col.value)(&reports[reports.len() - 1].metrics) {
        Some(v) => v,
        None => return "-".into(),
    };
    let others: Vec<f64> = reports[..reports.len() - 1]
        .iter()
        .filter_map(|r| (col.value)(&r.metrics))
        .collect();
    if others.is_empty() {
        return "-".into();
    }
    let best = if col.lower_is_better {
        others.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        others.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    };
    if best == 0.0 {
        return "n/a".into();
    }
    format!("{:+.1}%", (ours - best) / best.abs() * 100.0)
}

/// Renders the aligned table. Direction markers: ↓ = lower is better,
/// ↑ = higher is better. The accuracy column appears only when at least one
/// method reports it.
pub fn comparison_table(reports: &[NamedReport]) -> String {
    let columns: Vec<&Column> = COLUMNS
        .iter()
        .filter(|c| {
            c.header != "Accuracy ↑"
                || reports.iter().any(|r| r.metrics.classification_accuracy.is_some())
        })
        .collect();

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["method".to_string()];
    header.extend(columns.iter().map(|c| c.header.to_string()));
    rows.push(header);
    for report in reports {
        let mut row = vec![report.name.clone()];
        row.extend(
            columns.iter().map(|c| format_cell((c.value)(&report.metrics), c.decimals)),
        );
        rows.push(row);
    }
    if reports.len() >= 2 {
        let mut row = vec!["improvement".to_string()];
        row.extend(columns.iter().map(|c| improvement_cell(reports, c)));
        rows.push(row);
    }

    let widths: Vec<usize> = (0..rows[0].len())
        .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (k, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if k == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("  "));
            out.push('\n');
        }
    }
    out
}
