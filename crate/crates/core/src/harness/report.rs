//! Comparison tables, plots and reference diffs built from persisted reports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::reference::ReferenceTable;
use super::{collect_reports, curve, method_order, AblationRow};
use crate::error::{Error, Result};
use crate::eval::UnlearnReport;

/// A rendered table; markdown and CSV carry the same cell strings.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_markdown(&self) -> String {
        let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
        let mut s = format!("### {}\n\n", self.title);
        s += &line(&self.header);
        s += &line(&vec!["---".to_string(); self.header.len()]);
        for r in &self.rows {
            s += &line(r);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, title: &str) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r.records().map(|rec| Ok(rec?.iter().map(str::to_string).collect())).collect::<Result<_>>()?;
        Ok(Self { title: title.to_string(), header, rows })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFiles {
    pub markdown: PathBuf,
    /// One CSV per table, named after the table's file stem.
    pub tables: Vec<(String, PathBuf)>,
    pub plots: Vec<PathBuf>,
    pub reference_diff: Option<PathBuf>,
}

fn label(method: &str) -> &str {
    match method {
        "gold" => "Gold",
        "finetune" => "Fine-tuning",
        "neggrad" => "Negative Gradient",
        "randlabel" => "Random Labeling",
        "badteacher" => "Bad Teacher",
        "fisher" => "Fisher",
        "tmu" => "TMU",
        other => other,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Seed-averaged metrics keyed by (class, `<method>.<metric>`), for one size.
pub(crate) fn class_metrics(reports: &[&UnlearnReport]) -> BTreeMap<(usize, String), f64> {
    let mut acc: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    let mut put = |class: usize, key: String, v: Option<f64>| {
        if let Some(v) = v {
            acc.entry((class, key)).or_default().push(v);
        }
    };
    let has_gold_report: BTreeSet<(usize, u64)> =
        reports.iter().filter(|r| r.method == "gold").map(|r| (r.forget_class, r.seed)).collect();
    let mut gold_seen = BTreeSet::new();
    for r in reports {
        let c = r.forget_class;
        if r.method == "gold" {
            put(c, "gold.test".into(), Some(r.acc_test));
            put(c, "gold.forget".into(), Some(r.acc_forget));
            continue;
        }
        if !has_gold_report.contains(&(c, r.seed)) && gold_seen.insert((c, r.seed)) {
            put(c, "gold.test".into(), r.gold_acc_test);
            put(c, "gold.forget".into(), r.gold_acc_forget);
        }
        put(c, format!("{}.test", r.method), Some(r.acc_test));
        put(c, format!("{}.forget", r.method), Some(r.acc_forget));
        put(c, format!("{}.delta", r.method), r.delta);
        put(c, format!("{}.ad", r.method), r.activation_distance);
    }
    acc.into_iter().filter_map(|(k, v)| mean(&v).map(|m| (k, m))).collect()
}

fn wide_table(title: String, metrics: &BTreeMap<(usize, String), f64>, columns: &[(String, String)]) -> Table {
    let classes: BTreeSet<usize> = metrics.keys().map(|(c, _)| *c).collect();
    let mut header = vec!["Class".to_string()];
    header.extend(columns.iter().map(|(_, h)| h.clone()));
    let mut rows = Vec::new();
    for &c in &classes {
        let mut row = vec![format!("Class {c}")];
        row.extend(columns.iter().map(|(k, _)| cell(metrics.get(&(c, k.clone())).copied())));
        rows.push(row);
    }
    let mut avg = vec!["Avg".to_string()];
    for (k, _) in columns {
        let vals: Vec<f64> = classes.iter().filter_map(|&c| metrics.get(&(c, k.clone())).copied()).collect();
        avg.push(cell(mean(&vals)));
    }
    rows.push(avg);
    Table { title, header, rows }
}

fn methods_present(metrics: &BTreeMap<(usize, String), f64>) -> Vec<String> {
    let mut ms: Vec<String> = metrics
        .keys()
        .filter_map(|(_, k)| k.split_once('.').map(|(m, _)| m.to_string()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ms.sort_by_key(|m| (method_order(m), m.clone()));
    ms
}

/// Accuracy/δ and activation-distance tables per forget-set size, as
/// (file stem, table) pairs.
pub fn render_tables(reports: &[UnlearnReport]) -> Vec<(String, Table)> {
    let sizes: BTreeSet<usize> = reports.iter().map(|r| r.n_forget).collect();
    let mut out = Vec::new();
    for n in sizes {
        let rs: Vec<&UnlearnReport> = reports.iter().filter(|r| r.n_forget == n).collect();
        let metrics = class_metrics(&rs);
        let methods = methods_present(&metrics);
        let mut cols = Vec::new();
        for m in &methods {
            let l = label(m);
            cols.push((format!("{m}.test"), format!("{l} ACC_Dtest")));
            cols.push((format!("{m}.forget"), format!("{l} ACC_Df")));
            if metrics.keys().any(|(_, k)| *k == format!("{m}.delta")) {
                cols.push((format!("{m}.delta"), format!("{l} δ")));
            }
        }
        out.push((format!("alignment-n{n}"), wide_table(format!("Alignment, |D_f| = {n}"), &metrics, &cols)));
        let ad: Vec<(String, String)> = methods
            .iter()
            .filter(|m| metrics.keys().any(|(_, k)| *k == format!("{m}.ad")))
            .map(|m| (format!("{m}.ad"), label(m).to_string()))
            .collect();
        if !ad.is_empty() {
            let t = wide_table(format!("Activation distance to the gold model on D_f, |D_f| = {n}"), &metrics, &ad);
            out.push((format!("activation-n{n}"), t));
        }
    }
    out
}

/// Seed-averaged values keyed by size, then by (class, column).
type MetricsBySize = BTreeMap<usize, BTreeMap<(usize, String), f64>>;

fn ablation_metrics(out: &Path) -> Result<MetricsBySize> {
    let mut acc: BTreeMap<usize, BTreeMap<(usize, String), Vec<f64>>> = BTreeMap::new();
    let runs = out.join("runs");
    if !runs.is_dir() {
        return Ok(BTreeMap::new());
    }
    let parse = |s: &str, pre: &str| s.strip_prefix(pre).and_then(|x| x.parse::<usize>().ok());
    for class_dir in read_sorted(&runs)? {
        let Some(class) = class_dir.file_name().and_then(|n| n.to_str()).and_then(|n| parse(n, "class-")) else {
            continue;
        };
        for n_dir in read_sorted(&class_dir)? {
            let Some(n) = n_dir.file_name().and_then(|s| s.to_str()).and_then(|s| parse(s, "n-")) else { continue };
            for seed_dir in read_sorted(&n_dir)? {
                let path = seed_dir.join("predictor/ablation.json");
                if !path.exists() {
                    continue;
                }
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let rows: Vec<AblationRow> = serde_json::from_str(&text)?;
                let per = acc.entry(n).or_default();
                for r in rows {
                    let key = if r.features.contains('+') { "all".to_string() } else { r.features.clone() };
                    if let Some(v) = r.holdout_accuracy {
                        per.entry((class, format!("{key}.test"))).or_default().push(v);
                    }
                    if let Some(v) = r.forget_accuracy {
                        per.entry((class, format!("{key}.forget"))).or_default().push(v);
                    }
                }
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|(k, m)| (k, m.into_iter().filter_map(|(k, v)| mean(&v).map(|x| (k, x))).collect()))
        .collect())
}

fn read_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Format(format!("plot: {e}"))
}

fn plot_delta_vs_size(reports: &[UnlearnReport], path: &Path) -> Result<()> {
    let points = curve(reports);
    let mut series: BTreeMap<(usize, String), Vec<(f64, f64)>> = BTreeMap::new();
    for p in &points {
        if let Some(d) = p.mean_delta {
            series.entry((method_order(&p.method), p.method.clone())).or_default().push((p.n_forget as f64, d));
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.n_forget as f64).collect();
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let pad = ((x1 - x0) * 0.05).max(10.0);
    let ymax = series.values().flatten().map(|p| p.1).fold(1.0f64, f64::max) * 1.1;
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Mean δ against forget-set size", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0 - pad..x1 + pad, 0.0..ymax)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("|D_f|").y_desc("mean δ").draw().map_err(plot_err)?;
    for (i, ((_, method), pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label(method))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(plot_err)?;
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.85)).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn plot_activation_bars(reports: &[UnlearnReport], path: &Path) -> Result<()> {
    let bars: Vec<(String, f64)> = curve(reports)
        .into_iter()
        .filter(|p| p.method != "gold")
        .filter_map(|p| p.mean_activation_distance.map(|d| (format!("{} (n={})", label(&p.method), p.n_forget), d)))
        .collect();
    let n = bars.len().max(1);
    let ymax = bars.iter().map(|b| b.1).fold(1e-9f64, f64::max) * 1.15;
    let root = SVGBackend::new(path, (200 + 110 * n as u32, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let names: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption("Mean activation distance to the gold model", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..n as f64, 0.0..ymax)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 0.26 {
                names.get(i).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("activation distance")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
            let c = Palette99::pick(i).to_rgba();
            Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, *v)], c.filled())
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Long-format comparison of our seed-averaged class rows with a reference table.
pub fn reference_diff(reports: &[UnlearnReport], reference: &ReferenceTable) -> Table {
    let rs: Vec<&UnlearnReport> = reports.iter().filter(|r| r.n_forget == reference.n_forget).collect();
    let metrics = class_metrics(&rs);
    let mut rows = Vec::new();
    for row in &reference.rows {
        let Some(class) = row.class else { continue };
        for (col, &theirs) in reference.columns.iter().zip(&row.values) {
            let ours = metrics.get(&(class, col.clone())).copied();
            rows.push(vec![
                row.label.clone(),
                col.clone(),
                cell(ours),
                format!("{theirs:.2}"),
                cell(ours.map(|o| o - theirs)),
            ]);
        }
    }
    if let Some(avg) = &reference.avg {
        for (col, &theirs) in reference.columns.iter().zip(&avg.values) {
            let per_class: Vec<f64> =
                reference.rows.iter().filter_map(|r| metrics.get(&(r.class?, col.clone())).copied()).collect();
            let ours = (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64);
            rows.push(vec![
                avg.label.clone(),
                col.clone(),
                cell(ours),
                format!("{theirs:.2}"),
                cell(ours.map(|o| o - theirs)),
            ]);
        }
    }
    Table {
        title: format!("Difference from reference `{}`: {}", reference.name, reference.description),
        header: ["Row", "Column", "Ours", "Reference", "Ours - Reference"].map(String::from).to_vec(),
        rows,
    }
}

/// Writes `<out>/report/`: `tables.md`, one CSV per table, `delta_vs_size.svg`,
/// `activation_distance.svg` and, with a reference, `reference-diff.{md,csv}`.
pub fn emit_report(out: &Path, reference: Option<&ReferenceTable>) -> Result<ReportFiles> {
    let reports = collect_reports(out)?;
    if reports.is_empty() {
        return Err(Error::EmptyDataset(format!("no reports under {}", out.join("runs").display())));
    }
    let dir = out.join("report");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tables = render_tables(&reports);
    for (n, metrics) in ablation_metrics(out)? {
        let mut cols = Vec::new();
        for f in ["all", "nf", "af", "cf"] {
            let name = if f == "all" { "NF+AF+CF".to_string() } else { f.to_uppercase() };
            cols.push((format!("{f}.test"), format!("{name} D_test")));
            cols.push((format!("{f}.forget"), format!("{name} D_f")));
        }
        let t = wide_table(format!("Generalization-label accuracy by feature set, |D_f| = {n}"), &metrics, &cols);
        tables.push((format!("ablation-n{n}"), t));
    }
    let mut files = ReportFiles { markdown: dir.join("tables.md"), ..Default::default() };
    let mut md = String::from("# Unlearning comparison\n\n");
    for (stem, t) in &tables {
        md += &t.to_markdown();
        md += "\n";
        let p = dir.join(format!("{stem}.csv"));
        t.write_csv(&p)?;
        files.tables.push((stem.clone(), p));
    }
    std::fs::write(&files.markdown, md).map_err(|e| Error::io(&files.markdown, e))?;
    let delta_plot = dir.join("delta_vs_size.svg");
    plot_delta_vs_size(&reports, &delta_plot)?;
    let ad_plot = dir.join("activation_distance.svg");
    plot_activation_bars(&reports, &ad_plot)?;
    files.plots = vec![delta_plot, ad_plot];
    if let Some(r) = reference {
        let t = reference_diff(&reports, r);
        let md_path = dir.join("reference-diff.md");
        std::fs::write(&md_path, t.to_markdown()).map_err(|e| Error::io(&md_path, e))?;
        t.write_csv(&dir.join("reference-diff.csv"))?;
        files.reference_diff = Some(md_path);
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(method: &str, class: usize, seed: u64, test: f64, forget: f64, gold_forget: f64) -> UnlearnReport {
        UnlearnReport {
            method: method.into(),
            forget_class: class,
            n_forget: 100,
            seed,
            acc_test: test,
            acc_forget: forget,
            acc_remain: 99.0,
            gold_acc_test: Some(85.0),
            gold_acc_forget: Some(gold_forget),
            delta: Some((forget - gold_forget).abs()),
            activation_distance: Some(0.5),
            partition: None,
            wall_clock: 1.0,
            config_fingerprint: "x".into(),
        }
    }

    #[test]
    fn table_has_class_rows_and_avg() {
        let reports = vec![
            r("tmu", 0, 0, 84.0, 90.0, 92.0),
            r("tmu", 0, 1, 86.0, 94.0, 92.0),
            r("neggrad", 0, 0, 80.0, 10.0, 92.0),
            r("tmu", 1, 0, 85.0, 80.0, 80.0),
        ];
        let tables = render_tables(&reports);
        let (stem, t) = &tables[0];
        assert_eq!(stem, "alignment-n100");
        assert_eq!(t.header[1..3], ["Gold ACC_Dtest".to_string(), "Gold ACC_Df".to_string()]);
        assert_eq!(t.header[3], "Negative Gradient ACC_Dtest");
        assert_eq!(t.rows.len(), 3);
        let delta_col = t.header.iter().position(|h| h == "TMU δ").unwrap();
        assert_eq!(t.rows[0][delta_col], "2.00");
        assert_eq!(t.rows[1][delta_col], "0.00");
        assert_eq!(t.rows[2][0], "Avg");
        assert_eq!(t.rows[2][delta_col], "1.00");
        let ng = t.header.iter().position(|h| h == "Negative Gradient ACC_Df").unwrap();
        assert_eq!(t.rows[1][ng], "-");
        assert_eq!(t.rows[2][ng], "10.00");
    }
}
