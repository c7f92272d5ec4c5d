use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robustness::AttackSpec;

/// Metrics of one model on one dataset under one attack. Values are
/// fractions in `[0, 1]`; metrics undefined for the dataset are absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    /// `none` or a tag such as `jpeg(quality=50)`.
    pub attack: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_spec: Option<AttackSpec>,
    pub n_images: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tpr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bpa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Tnr,
    Tpr,
    Auc,
    Bpa,
    Iou,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Tnr, Metric::Tpr, Metric::Auc, Metric::Bpa, Metric::Iou];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Tnr => "TNR",
            Metric::Tpr => "TPR",
            Metric::Auc => "AUC",
            Metric::Bpa => "bPA",
            Metric::Iou => "IoU",
        }
    }

    pub fn get(self, r: &EvalReport) -> Option<f64> {
        match self {
            Metric::Tnr => r.tnr,
            Metric::Tpr => r.tpr,
            Metric::Auc => r.auc,
            Metric::Bpa => r.bpa,
            Metric::Iou => r.iou,
        }
    }
}

impl EvalReport {
    pub fn key(&self) -> (&str, &str, &str) {
        (&self.model, &self.dataset, &self.attack)
    }
}

/// Percentage with one decimal, as printed in result tables.
pub fn percent(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub model: String,
    pub attack: String,
    /// Aligned with `ReportTable::columns`.
    pub cells: Vec<Option<f64>>,
}

/// Rows are (model, attack) pairs in first-seen order; columns are
/// (dataset, metric) pairs for every metric reported on that dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub columns: Vec<(String, Metric)>,
    pub rows: Vec<TableRow>,
}

fn push_unique(v: &mut Vec<String>, s: &str) {
    if !v.iter().any(|x| x == s) {
        v.push(s.to_string());
    }
}

impl ReportTable {
    /// Errors on two different reports sharing a (model, dataset, attack) key.
    pub fn build(reports: &[EvalReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::InvalidConfig("no reports to tabulate".into()));
        }
        let mut by_key: BTreeMap<(&str, &str, &str), &EvalReport> = BTreeMap::new();
        for r in reports {
            if let Some(prev) = by_key.insert(r.key(), r) {
                if prev != r {
                    return Err(Error::InvalidConfig(format!(
                        "conflicting reports for model `{}`, dataset `{}`, attack `{}`",
                        r.model, r.dataset, r.attack
                    )));
                }
            }
        }
        let mut datasets = Vec::new();
        let mut row_keys: Vec<(String, String)> = Vec::new();
        for r in reports {
            push_unique(&mut datasets, &r.dataset);
            let k = (r.model.clone(), r.attack.clone());
            if !row_keys.contains(&k) {
                row_keys.push(k);
            }
        }
        let columns: Vec<(String, Metric)> = datasets
            .iter()
            .flat_map(|d| {
                Metric::ALL
                    .into_iter()
                    .filter(|m| reports.iter().any(|r| &r.dataset == d && m.get(r).is_some()))
                    .map(|m| (d.clone(), m))
                    .collect::<Vec<_>>()
            })
            .collect();
        let rows = row_keys
            .into_iter()
            .map(|(model, attack)| {
                let cells = columns
                    .iter()
                    .map(|(d, m)| by_key.get(&(model.as_str(), d.as_str(), attack.as_str())).and_then(|r| m.get(r)))
                    .collect();
                TableRow { model, attack, cells }
            })
            .collect();
        Ok(Self { columns, rows })
    }

    pub fn attacks(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.rows {
            push_unique(&mut out, &r.attack);
        }
        out
    }

    fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|(d, m)| format!("{d} {}", m.label())).collect()
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(percent).unwrap_or_default()
}

/// Markdown tables, one per attack when several attacks are present.
pub fn render_markdown(table: &ReportTable) -> String {
    let attacks = table.attacks();
    let mut out = String::new();
    for attack in &attacks {
        if attacks.len() > 1 {
            let _ = writeln!(out, "### Attack: {attack}\n");
        }
        let mut header = vec!["Method".to_string()];
        header.extend(table.column_names());
        let _ = writeln!(out, "| {} |", header.join(" | "));
        let _ = writeln!(out, "|{}|", vec!["---"; header.len()].join("|"));
        for row in table.rows.iter().filter(|r| &r.attack == attack) {
            let mut cells = vec![row.model.clone()];
            cells.extend(row.cells.iter().map(|&c| if c.is_some() { cell(c) } else { "-".into() }));
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        out.push('\n');
    }
    out
}

/// CSV with `model`, `attack` and one percentage column per (dataset, metric).
pub fn render_csv(table: &ReportTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model".to_string(), "attack".to_string()];
    header.extend(table.column_names());
    w.write_record(&header).map_err(csv_err)?;
    for row in &table.rows {
        let mut rec = vec![row.model.clone(), row.attack.clone()];
        rec.extend(row.cells.iter().map(|&c| cell(c)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidConfig(format!("csv: {e}"))
}

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar charts, one SVG per attack, over the detection metrics
/// (TNR, TPR, AUC). Returns `(attack, svg)` pairs.
pub fn render_svg_charts(table: &ReportTable) -> Vec<(String, String)> {
    let groups: Vec<usize> = table
        .columns
        .iter()
        .enumerate()
        .filter(|(_, (_, m))| matches!(m, Metric::Tnr | Metric::Tpr | Metric::Auc))
        .map(|(i, _)| i)
        .collect();
    let names = table.column_names();
    table
        .attacks()
        .into_iter()
        .map(|attack| {
            let rows: Vec<&TableRow> = table.rows.iter().filter(|r| r.attack == attack).collect();
            let bar_w = 14.0;
            let group_w = bar_w * rows.len().max(1) as f64 + 20.0;
            let (left, top, plot_h) = (50.0, 40.0, 240.0);
            let width = left + group_w * groups.len().max(1) as f64 + 20.0;
            let legend_y = top + plot_h + 70.0;
            let height = legend_y + 18.0 * rows.len() as f64 + 10.0;
            let mut svg = String::new();
            let _ = writeln!(
                svg,
                r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
            );
            let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
            let _ = writeln!(svg, r#"<text x="{left}" y="20" font-size="13">Attack: {}</text>"#, escape(&attack));
            for tick in 0..=5 {
                let v = tick as f64 * 20.0;
                let y = top + plot_h * (1.0 - v / 100.0);
                let _ = writeln!(
                    svg,
                    r##"<line x1="{left}" x2="{:.1}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.0}</text>"##,
                    width - 20.0,
                    left - 4.0,
                    y + 4.0
                );
            }
            for (g, &col) in groups.iter().enumerate() {
                let x0 = left + g as f64 * group_w + 10.0;
                for (k, row) in rows.iter().enumerate() {
                    if let Some(v) = row.cells[col] {
                        let h = plot_h * v.clamp(0.0, 1.0);
                        let _ = writeln!(
                            svg,
                            r#"<rect x="{:.1}" y="{:.1}" width="{bar_w}" height="{h:.1}" fill="{}"><title>{} {}: {}</title></rect>"#,
                            x0 + k as f64 * bar_w,
                            top + plot_h - h,
                            PALETTE[k % PALETTE.len()],
                            escape(&row.model),
                            escape(&names[col]),
                            percent(v)
                        );
                    }
                }
                let cx = x0 + bar_w * rows.len() as f64 / 2.0;
                let _ = writeln!(
                    svg,
                    r#"<text x="{cx:.1}" y="{:.1}" text-anchor="end" transform="rotate(-35 {cx:.1} {:.1})">{}</text>"#,
                    top + plot_h + 14.0,
                    top + plot_h + 14.0,
                    escape(&names[col])
                );
            }
            for (k, row) in rows.iter().enumerate() {
                let y = legend_y + 18.0 * k as f64;
                let _ = writeln!(
                    svg,
                    r#"<rect x="{left}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                    y - 10.0,
                    PALETTE[k % PALETTE.len()],
                    left + 18.0,
                    y,
                    escape(&row.model)
                );
            }
            svg.push_str("</svg>\n");
            (attack, svg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn report(model: &str, dataset: &str, tpr: Option<f64>, tnr: Option<f64>) -> EvalReport {
        EvalReport {
            model: model.into(),
            dataset: dataset.into(),
            attack: "none".into(),
            attack_spec: None,
            n_images: 10,
            tnr,
            tpr,
            auc: tpr.map(|_| 0.99),
            bpa: None,
            iou: None,
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn json_keys_are_snake_case_and_sparse() {
        let r = report("m", "WSOC", None, Some(0.98));
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["tnr"], 0.98);
        assert!(v.get("tpr").is_none());
        assert_eq!(v["n_images"], 10);
        let back: EvalReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn table_shape_and_percentages() {
        let reports = vec![
            report("A", "StreetG", Some(1.0), None),
            report("A", "WSOC", None, Some(0.98)),
            report("B", "StreetG", Some(0.934), None),
        ];
        let t = ReportTable::build(&reports).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.columns.len(), 3);
        let md = render_markdown(&t);
        assert!(md.contains("| A | 100.0 | 99.0 | 98.0 |"), "{md}");
        assert!(md.contains("| B | 93.4 | 99.0 | - |"), "{md}");
    }

    #[test]
    fn conflicting_duplicates_rejected() {
        let a = report("A", "StreetG", Some(1.0), None);
        let b = report("A", "StreetG", Some(0.5), None);
        assert!(ReportTable::build(&[a.clone(), a.clone()]).is_ok());
        assert!(ReportTable::build(&[a, b]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut r = report("Xception+M (CAT), \"v2\"", "StreetG", Some(0.9876), None);
        r.attack = "jpeg(quality=50)".into();
        let t = ReportTable::build(&[r]).unwrap();
        let text = render_csv(&t).unwrap();
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let rec = rd.records().next().unwrap().unwrap();
        assert_eq!(&rec[0], "Xception+M (CAT), \"v2\"");
        assert_eq!(&rec[1], "jpeg(quality=50)");
        assert_eq!(rec[2].parse::<f64>().unwrap(), 98.8);
    }

    #[test]
    fn svg_per_attack() {
        let t = ReportTable::build(&[report("A", "StreetG", Some(1.0), None)]).unwrap();
        let charts = render_svg_charts(&t);
        assert_eq!(charts.len(), 1);
        assert!(charts[0].1.starts_with("<svg"));
        assert!(charts[0].1.contains("StreetG TPR"));
    }
}
