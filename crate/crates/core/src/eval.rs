//! Recall@k, NDCG@k and the sentiment-twin hit rate m@k over benchmark suites.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::{Axis, BenchmarkSuite, EvalInstance};
use crate::codec;
use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::preference::classify_preference_sentiment;
use crate::recommenders::{PreferenceInput, Query, Recommender};
use crate::sid_index::DEFAULT_BEAM_WIDTH;

pub const DEFAULT_KS: [usize; 2] = [5, 10];
pub const NOT_AVAILABLE: &str = "n/a";

fn rank_of(predictions: &[String], target: &str, k: usize) -> Option<usize> {
    predictions.iter().take(k).position(|p| p == target).map(|i| i + 1)
}

pub fn recall_at_k(predictions: &[String], target: &str, k: usize) -> f64 {
    rank_of(predictions, target, k).map_or(0.0, |_| 1.0)
}

/// Single relevant item: `1/log2(rank+1)` inside the top k, else 0.
pub fn ndcg_at_k(predictions: &[String], target: &str, k: usize) -> f64 {
    rank_of(predictions, target, k).map_or(0.0, |r| 1.0 / ((r + 1) as f64).log2())
}

/// 1 iff the target is in the top k for the positive twin and not for the negative one.
pub fn m_at_k(pos_predictions: &[String], neg_predictions: &[String], pos_target: &str, neg_target: &str, k: usize) -> Result<f64> {
    if pos_target != neg_target {
        return Err(Error::TwinMismatch {
            pos: pos_target.to_string(),
            neg: neg_target.to_string(),
        });
    }
    let hit = rank_of(pos_predictions, pos_target, k).is_some() && rank_of(neg_predictions, neg_target, k).is_none();
    Ok(if hit { 1.0 } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub beam_width: usize,
    pub splits: Vec<Split>,
    pub axes: Vec<Axis>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            beam_width: DEFAULT_BEAM_WIDTH,
            splits: vec![Split::Test],
            axes: Axis::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub axis: Axis,
    pub split: Split,
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    /// Sentiment axes only: m@k over matched twins.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    pub instances: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub suite_digest: String,
    pub sid_map_digest: Option<String>,
    pub ks: Vec<usize>,
    pub beam_width: usize,
    pub cells: Vec<MetricCell>,
    /// Instances the builder could not construct, per axis.
    pub skipped: BTreeMap<Axis, usize>,
}

impl MetricReport {
    pub fn cell(&self, axis: Axis, split: Split, k: usize) -> Option<&MetricCell> {
        self.cells.iter().find(|c| c.axis == axis && c.split == split && c.k == k)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        codec::write_file(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&codec::read_file(path)?)?)
    }

    /// Plain-text table: one row per axis and split, recall and NDCG per k, m@k where defined.
    pub fn to_table(&self) -> String {
        let mut out = format!("model: {}\nsuite: {}\n", self.model, self.suite_digest);
        let mut header = format!("{:<16}{:<7}{:>7}", "axis", "split", "n");
        for k in &self.ks {
            let _ = write!(header, "{:>11}{:>11}{:>9}", format!("Recall@{k}"), format!("NDCG@{k}"), format!("m@{k}"));
        }
        out.push_str(&header);
        out.push('\n');
        for (axis, split) in self.rows() {
            let first = self.ks.first().and_then(|&k| self.cell(axis, split, k));
            let mut line = format!("{:<16}{:<7}{:>7}", axis.as_str(), split.as_str(), first.map_or(0, |c| c.instances));
            for &k in &self.ks {
                match self.cell(axis, split, k) {
                    Some(c) => {
                        let m = c.m.map_or_else(|| "-".to_string(), |m| format!("{m:.4}"));
                        let _ = write!(line, "{:>11.4}{:>11.4}{:>9}", c.recall, c.ndcg, m);
                    }
                    None => {
                        let _ = write!(line, "{:>11}{:>11}{:>9}", "-", "-", "-");
                    }
                }
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    fn rows(&self) -> Vec<(Axis, Split)> {
        let mut rows: Vec<(Axis, Split)> = self.cells.iter().map(|c| (c.axis, c.split)).collect();
        rows.sort();
        rows.dedup();
        rows
    }
}

/// The request a model sees for one instance; preference sentiment comes from the prefix rule.
pub fn instance_query(instance: &EvalInstance, suite: &BenchmarkSuite) -> Result<Query> {
    Ok(Query {
        history: instance.history.clone(),
        preferences: instance
            .preferences
            .iter()
            .map(|p| {
                Ok(PreferenceInput {
                    text: p.clone(),
                    sentiment: classify_preference_sentiment(p),
                    embedding: suite.pref_embeddings.require("preference", p)?.to_vec(),
                })
            })
            .collect::<Result<_>>()?,
    })
}

/// Runs `model` on every selected instance and aggregates the metrics.
pub fn evaluate_suite(model: &dyn Recommender, suite: &BenchmarkSuite, config: &EvalConfig) -> Result<MetricReport> {
    let model_digest = model.sid_map().digest();
    match &suite.manifest.sid_map_digest {
        Some(d) if *d == model_digest => {}
        Some(d) => {
            return Err(Error::DigestMismatch(format!(
                "suite was built against sid map {d}, model uses {model_digest}"
            )))
        }
        None => return Err(Error::DigestMismatch("suite records no sid map digest".into())),
    }
    let max_k = *config
        .ks
        .iter()
        .max()
        .ok_or_else(|| Error::InvalidArgument("at least one k is required".into()))?;
    if config.ks.contains(&0) || max_k > config.beam_width {
        return Err(Error::InvalidArgument(format!(
            "ks must lie in 1..={}, got {:?}",
            config.beam_width, config.ks
        )));
    }
    let selected: Vec<&EvalInstance> = suite
        .instances
        .iter()
        .filter(|i| config.axes.contains(&i.axis) && config.splits.contains(&i.split))
        .collect();
    let predictions: Vec<Vec<String>> = selected
        .par_iter()
        .map(|inst| {
            let q = instance_query(inst, suite)?;
            Ok(model
                .recommend(&q, max_k, config.beam_width)?
                .into_iter()
                .map(|r| r.item)
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut groups: BTreeMap<(Axis, Split), Vec<usize>> = BTreeMap::new();
    for (i, inst) in selected.iter().enumerate() {
        groups.entry((inst.axis, inst.split)).or_default().push(i);
    }
    let mut cells = Vec::new();
    for (&(axis, split), idx) in &groups {
        for &k in &config.ks {
            let n = idx.len() as f64;
            let recall = idx.iter().map(|&i| recall_at_k(&predictions[i], &selected[i].target, k)).sum::<f64>() / n;
            let ndcg = idx.iter().map(|&i| ndcg_at_k(&predictions[i], &selected[i].target, k)).sum::<f64>() / n;
            let (m, pairs) = if axis.is_sentiment() {
                let (m, pairs) = twin_hit_rate(&selected, &predictions, split, k)?;
                (Some(m), Some(pairs))
            } else {
                (None, None)
            };
            cells.push(MetricCell {
                axis,
                split,
                k,
                recall,
                ndcg,
                m,
                instances: idx.len(),
                pairs,
            });
        }
    }
    Ok(MetricReport {
        model: model.name().to_string(),
        suite_digest: suite.digest().to_string(),
        sid_map_digest: Some(model_digest),
        ks: config.ks.clone(),
        beam_width: config.beam_width,
        cells,
        skipped: config.axes.iter().map(|&a| (a, suite.manifest.skipped(a))).collect(),
    })
}

/// Mean m@k over sentiment twins of `split` where both halves were evaluated.
fn twin_hit_rate(selected: &[&EvalInstance], predictions: &[Vec<String>], split: Split, k: usize) -> Result<(f64, usize)> {
    let mut halves: BTreeMap<&str, (Option<usize>, Option<usize>)> = BTreeMap::new();
    for (i, inst) in selected.iter().enumerate() {
        let Some(pair) = inst.pair_id.as_deref() else { continue };
        if inst.split != split {
            continue;
        }
        let e = halves.entry(pair).or_default();
        match inst.axis {
            Axis::SentimentPos => e.0 = Some(i),
            Axis::SentimentNeg => e.1 = Some(i),
            _ => {}
        }
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for (p, n) in halves.values() {
        if let (Some(p), Some(n)) = (p, n) {
            total += m_at_k(&predictions[*p], &predictions[*n], &selected[*p].target, &selected[*n].target, k)?;
            pairs += 1;
        }
    }
    Ok((if pairs == 0 { 0.0 } else { total / pairs as f64 }, pairs))
}

/// `100·(a−b)/b`, or `None` when `b` is zero.
pub fn relative_improvement_value(a: f64, b: f64) -> Option<f64> {
    (b != 0.0).then(|| 100.0 * (a - b) / b)
}

pub fn format_improvement(v: Option<f64>) -> String {
    v.map_or_else(|| NOT_AVAILABLE.to_string(), |v| format!("{v:+.1}%"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementCell {
    pub axis: Axis,
    pub split: Split,
    pub k: usize,
    pub recall: Option<f64>,
    pub ndcg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementTable {
    pub model_a: String,
    pub model_b: String,
    pub cells: Vec<ImprovementCell>,
}

impl ImprovementTable {
    pub fn to_table(&self) -> String {
        let mut out = format!("{} vs {}\n", self.model_a, self.model_b);
        let _ = writeln!(out, "{:<16}{:<7}{:>4}{:>10}{:>10}{:>10}", "axis", "split", "k", "Recall", "NDCG", "m");
        for c in &self.cells {
            let m = c.m.map_or_else(|| "-".to_string(), format_improvement);
            let _ = writeln!(
                out,
                "{:<16}{:<7}{:>4}{:>10}{:>10}{:>10}",
                c.axis.as_str(),
                c.split.as_str(),
                c.k,
                format_improvement(c.recall),
                format_improvement(c.ndcg),
                m
            );
        }
        out
    }
}

/// Cell-wise relative improvement of `a` over `b`. Both reports must cover the same suite and cells.
pub fn relative_improvement(a: &MetricReport, b: &MetricReport) -> Result<ImprovementTable> {
    if a.suite_digest != b.suite_digest {
        return Err(Error::DigestMismatch(format!(
            "reports cover different suites ({} vs {})",
            a.suite_digest, b.suite_digest
        )));
    }
    let keys = |r: &MetricReport| {
        let mut k: Vec<(Axis, Split, usize)> = r.cells.iter().map(|c| (c.axis, c.split, c.k)).collect();
        k.sort();
        k
    };
    if keys(a) != keys(b) {
        return Err(Error::InvalidArgument("reports cover different axes, splits or ks".into()));
    }
    let cells = a
        .cells
        .iter()
        .map(|ca| {
            let cb = b.cell(ca.axis, ca.split, ca.k).expect("key sets are equal");
            ImprovementCell {
                axis: ca.axis,
                split: ca.split,
                k: ca.k,
                recall: relative_improvement_value(ca.recall, cb.recall),
                ndcg: relative_improvement_value(ca.ndcg, cb.ndcg),
                m: match (ca.m, cb.m) {
                    (Some(x), Some(y)) => Some(relative_improvement_value(x, y)),
                    _ => None,
                },
            }
        })
        .collect();
    Ok(ImprovementTable {
        model_a: a.model.clone(),
        model_b: b.model.clone(),
        cells,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n−1); 0 for a single report.
    pub std: f64,
}

impl MeanStd {
    fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub axis: Axis,
    pub split: Split,
    pub k: usize,
    pub recall: MeanStd,
    pub ndcg: MeanStd,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<MeanStd>,
}

/// Mean and standard deviation per cell across reports of the same suite (e.g. several seeds).
pub fn aggregate_reports(reports: &[MetricReport]) -> Result<Vec<AggregateCell>> {
    let first = reports.first().ok_or_else(|| Error::InvalidArgument("no reports to aggregate".into()))?;
    if let Some(r) = reports.iter().find(|r| r.suite_digest != first.suite_digest) {
        return Err(Error::DigestMismatch(format!("report for {} covers another suite", r.model)));
    }
    first
        .cells
        .iter()
        .map(|c| {
            let cells = reports
                .iter()
                .map(|r| {
                    r.cell(c.axis, c.split, c.k).ok_or_else(|| {
                        Error::InvalidArgument(format!("report for {} lacks {} {} @{}", r.model, c.axis, c.split.as_str(), c.k))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let pick = |f: fn(&MetricCell) -> f64| MeanStd::of(&cells.iter().map(|c| f(c)).collect::<Vec<_>>());
            Ok(AggregateCell {
                axis: c.axis,
                split: c.split,
                k: c.k,
                recall: pick(|c| c.recall),
                ndcg: pick(|c| c.ndcg),
                m: if cells.iter().all(|c| c.m.is_some()) {
                    Some(MeanStd::of(&cells.iter().map(|c| c.m.unwrap()).collect::<Vec<_>>()))
                } else {
                    None
                },
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotMetric {
    Recall,
    Ndcg,
    M,
}

impl std::str::FromStr for PlotMetric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "recall" => Ok(PlotMetric::Recall),
            "ndcg" => Ok(PlotMetric::Ndcg),
            "m" => Ok(PlotMetric::M),
            other => Err(format!("unknown metric `{other}` (recall, ndcg or m)")),
        }
    }
}

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grouped bar chart: one group per axis, one bar per report.
pub fn render_bar_chart(reports: &[MetricReport], metric: PlotMetric, split: Split, k: usize) -> String {
    let axes: Vec<Axis> = Axis::ALL
        .into_iter()
        .filter(|&a| reports.iter().any(|r| r.cell(a, split, k).is_some()))
        .filter(|a| metric != PlotMetric::M || a.is_sentiment())
        .collect();
    let value = |r: &MetricReport, a: Axis| {
        r.cell(a, split, k).and_then(|c| match metric {
            PlotMetric::Recall => Some(c.recall),
            PlotMetric::Ndcg => Some(c.ndcg),
            PlotMetric::M => c.m,
        })
    };
    let top = reports
        .iter()
        .flat_map(|r| axes.iter().filter_map(move |&a| value(r, a)))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let (bar, gap, left, plot_h) = (22.0, 18.0, 50.0, 220.0);
    let group_w = bar * reports.len().max(1) as f64 + gap;
    let width = left + group_w * axes.len().max(1) as f64 + 20.0;
    let height = plot_h + 90.0 + 16.0 * reports.len() as f64;
    let label = match metric {
        PlotMetric::Recall => format!("Recall@{k}"),
        PlotMetric::Ndcg => format!("NDCG@{k}"),
        PlotMetric::M => format!("m@{k}"),
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{left}" y="16" font-size="13">{} ({})</text>"#, xml_escape(&label), split.as_str());
    let base = 30.0 + plot_h;
    let _ = writeln!(s, r##"<line x1="{left}" y1="{base}" x2="{:.1}" y2="{base}" stroke="#333"/>"##, width - 10.0);
    for tick in 0..=4 {
        let v = top * tick as f64 / 4.0;
        let y = base - plot_h * tick as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, left - 4.0, y + 4.0);
    }
    for (gi, &a) in axes.iter().enumerate() {
        let x0 = left + gap / 2.0 + group_w * gi as f64;
        for (ri, r) in reports.iter().enumerate() {
            if let Some(v) = value(r, a) {
                let h = plot_h * v / top;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{bar}" height="{h:.1}" fill="{}"><title>{}: {v:.4}</title></rect>"#,
                    x0 + bar * ri as f64,
                    base - h,
                    PALETTE[ri % PALETTE.len()],
                    xml_escape(&r.model)
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + bar * reports.len() as f64 / 2.0,
            base + 16.0,
            a.as_str()
        );
    }
    for (ri, r) in reports.iter().enumerate() {
        let y = base + 40.0 + 16.0 * ri as f64;
        let _ = writeln!(s, r#"<rect x="{left}" y="{:.1}" width="10" height="10" fill="{}"/>"#, y - 9.0, PALETTE[ri % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, left + 16.0, xml_escape(&r.model));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn rank_based_metrics() {
        let p = v(&["a", "b", "c", "d", "e", "f"]);
        assert_eq!(recall_at_k(&p, "a", 5), 1.0);
        assert_eq!(recall_at_k(&p, "f", 5), 0.0);
        assert_eq!(ndcg_at_k(&p, "a", 5), 1.0);
        assert_eq!(ndcg_at_k(&p, "c", 10), 0.5);
        assert_eq!(ndcg_at_k(&p, "f", 5), 0.0);
    }

    #[test]
    fn m_truth_table() {
        let hit = v(&["t", "x"]);
        let miss = v(&["x", "y"]);
        assert_eq!(m_at_k(&hit, &miss, "t", "t", 2).unwrap(), 1.0);
        assert_eq!(m_at_k(&miss, &miss, "t", "t", 2).unwrap(), 0.0);
        assert_eq!(m_at_k(&hit, &hit, "t", "t", 2).unwrap(), 0.0);
        assert_eq!(m_at_k(&miss, &hit, "t", "t", 2).unwrap(), 0.0);
        assert!(m_at_k(&hit, &miss, "t", "u", 2).is_err());
    }

    #[test]
    fn relative_improvement_cells() {
        let r = relative_improvement_value(0.0282, 0.0249).unwrap();
        assert!((r - 13.2).abs() <= 0.2, "{r}");
        assert_eq!(relative_improvement_value(0.3, 0.3), Some(0.0));
        assert_eq!(format_improvement(relative_improvement_value(0.3, 0.0)), "n/a");
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-12);
    }
}
