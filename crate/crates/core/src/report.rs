//! Rendering of matrix results: markdown tables, SVG charts and the run
//! manifest written next to every output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::experiment::NO_PREDICTIONS;

/// One line of a matrix CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub testset: String,
    pub ablation: String,
    pub ap: Option<f64>,
    pub p: Option<f64>,
    pub r: Option<f64>,
    pub f1: Option<f64>,
    pub status: String,
}

/// One line of a per-threshold CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub testset: String,
    pub ablation: String,
    pub iou_t: f64,
    pub ap: f64,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<Vec<SummaryRecord>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

pub fn read_thresholds(path: impl AsRef<Path>) -> Result<Vec<ThresholdRecord>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

fn order_of<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for s in items {
        if !seen.iter().any(|x| x == s) {
            seen.push(s.to_string());
        }
    }
    seen
}

/// One table per test set with ablations as rows, in file order.
pub fn markdown_tables(rows: &[SummaryRecord]) -> String {
    let mut out = String::new();
    for set in order_of(rows.iter().map(|r| r.testset.as_str())) {
        let _ = writeln!(out, "### {set}\n\n| ablation | AP | P | R | F1 |\n|---|---|---|---|---|");
        for r in rows.iter().filter(|r| r.testset == set) {
            let cells = match (r.ap, r.p, r.r, r.f1) {
                (Some(ap), Some(p), Some(rc), Some(f)) => format!("{ap:.3} | {p:.3} | {rc:.3} | {f:.3}"),
                _ if r.status == NO_PREDICTIONS => format!("{NO_PREDICTIONS} | | |"),
                _ => format!("{} | | |", r.status),
            };
            let _ = writeln!(out, "| {} | {cells} |", r.ablation);
        }
        out.push('\n');
    }
    out
}

const PALETTE: [&str; 12] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Horizontal bar chart of `(label, value)` with values in `[0, 1]`. Missing
/// values are drawn as an empty row with a note.
pub fn svg_bar_chart(title: &str, bars: &[(String, Option<f64>)]) -> String {
    let (left, bar_h, width) = (130.0, 18.0, 520.0);
    let height = 40.0 + bars.len() as f64 * (bar_h + 6.0) + 20.0;
    let span = width - left - 60.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        width / 2.0,
        esc(title)
    );
    for (i, (label, value)) in bars.iter().enumerate() {
        let y = 34.0 + i as f64 * (bar_h + 6.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", left - 6.0, y + 13.0, esc(label));
        match value {
            Some(v) => {
                let w = span * v.clamp(0.0, 1.0);
                let _ = writeln!(
                    s,
                    "<rect x=\"{left}\" y=\"{y}\" width=\"{w:.1}\" height=\"{bar_h}\" fill=\"{}\"/>\n<text x=\"{:.1}\" y=\"{}\">{v:.3}</text>",
                    PALETTE[i % PALETTE.len()],
                    left + w + 4.0,
                    y + 13.0
                );
            }
            None => {
                let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"#888\">{NO_PREDICTIONS}</text>", left + 4.0, y + 13.0);
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Precision against recall, one polyline per series, with points ordered
/// along the IoU sweep.
pub fn svg_pr_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (size, pad) = (420.0, 50.0);
    let plot = size - 2.0 * pad;
    let legend_w = 150.0;
    let px = |r: f64| pad + r.clamp(0.0, 1.0) * plot;
    let py = |p: f64| size - pad - p.clamp(0.0, 1.0) * plot;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{size}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <rect x=\"{pad}\" y=\"{pad}\" width=\"{plot}\" height=\"{plot}\" fill=\"none\" stroke=\"#444\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">recall</text>\n\
         <text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">precision</text>\n",
        size + legend_w,
        size / 2.0,
        esc(title),
        size / 2.0,
        size - 12.0,
        size / 2.0,
        size / 2.0
    );
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{v:.2}</text><text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>",
            px(v),
            size - pad + 14.0,
            pad - 4.0,
            py(v) + 4.0
        );
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(r, p)| format!("{:.1},{:.1}", px(r), py(p))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", path.join(" "));
        let ly = pad + 14.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/><text x=\"{}\" y=\"{:.1}\">{}</text>",
            size + 5.0,
            ly,
            size + 20.0,
            ly + 9.0,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.md`, and with `plots` an F1 bar chart and a PR chart per
/// test set, from `matrix.csv` and `per_threshold.csv` in `dir`.
pub fn write_report(dir: &Path, out: &Path, plots: bool) -> anyhow::Result<Vec<std::path::PathBuf>> {
    let rows = read_summary(dir.join("matrix.csv"))?;
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut md = String::from("# Fine-tuning matrix\n\n");
    md.push_str(&markdown_tables(&rows));
    if plots {
        let thresholds = match read_thresholds(dir.join("per_threshold.csv")) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("no per-threshold data ({e}); skipping PR charts");
                Vec::new()
            }
        };
        for set in order_of(rows.iter().map(|r| r.testset.as_str())) {
            let slug: String = set.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
            let bars: Vec<(String, Option<f64>)> = rows.iter().filter(|r| r.testset == set).map(|r| (r.ablation.clone(), r.f1)).collect();
            let bar_path = out.join(format!("f1_{slug}.svg"));
            std::fs::write(&bar_path, svg_bar_chart(&format!("F1 on {set}"), &bars))?;
            md.push_str(&format!("![F1 on {set}]({})\n\n", bar_path.file_name().unwrap().to_string_lossy()));
            written.push(bar_path);

            let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for t in thresholds.iter().filter(|t| t.testset == set) {
                series.entry(t.ablation.clone()).or_default().push((t.r, t.p));
            }
            if !series.is_empty() {
                let order = order_of(thresholds.iter().filter(|t| t.testset == set).map(|t| t.ablation.as_str()));
                let ordered: Vec<(String, Vec<(f64, f64)>)> = order.into_iter().map(|a| (a.clone(), series.remove(&a).unwrap_or_default())).collect();
                let pr_path = out.join(format!("pr_{slug}.svg"));
                std::fs::write(&pr_path, svg_pr_chart(&format!("Precision/recall over IoU 0.30-0.90 on {set}"), &ordered))?;
                md.push_str(&format!("![PR on {set}]({})\n\n", pr_path.file_name().unwrap().to_string_lossy()));
                written.push(pr_path);
            }
        }
    }
    let md_path = out.join("report.md");
    std::fs::write(&md_path, md)?;
    written.insert(0, md_path);
    Ok(written)
}

/// Provenance written alongside every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    /// Full configuration as TOML.
    pub config: String,
    pub seeds: BTreeMap<String, u64>,
    /// How the starting weights were obtained.
    pub recipe: String,
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    #[serde(default)]
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &crate::config::RunConfig, recipe: &str) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config.hash(),
            config: config.to_toml(),
            seeds: BTreeMap::new(),
            recipe: recipe.into(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("manifest serialises") + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
