//! Threshold-free detection and localization metrics, scorer selection and
//! multi-seed summaries.

use std::fmt;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::scoring::Heatmap;

fn check_inputs(scores: &[f64], labels: &[bool], op: &'static str) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(op, format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            context: format!("{op} score {i}"),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by ascending score, then the `[start, end)` ranges of
/// equal scores.
fn tie_groups(scores: &[f64], descending: bool) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    if descending {
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    } else {
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    }
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=order.len() {
        if i == order.len() || scores[order[i]] != scores[order[start]] {
            groups.push((start, i));
            start = i;
        }
    }
    (order, groups)
}

/// Mann-Whitney AUROC with half credit for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels, "auroc")?;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("auroc needs both positive and negative labels"));
    }
    let (order, groups) = tie_groups(scores, false);
    // Twice the Mann-Whitney U statistic, kept integral.
    let mut u2: u128 = 0;
    let mut neg_below: u128 = 0;
    for (s, e) in groups {
        let p = order[s..e].iter().filter(|&&i| labels[i]).count() as u128;
        let n = (e - s) as u128 - p;
        u2 += p * (2 * neg_below + n);
        neg_below += n;
    }
    Ok(u2 as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Average precision; equal scores form one threshold.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels, "auprc")?;
    if pos == 0 {
        return Err(Error::invalid("auprc needs at least one positive label"));
    }
    let (order, groups) = tie_groups(scores, true);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    for (s, e) in groups {
        let gp = order[s..e].iter().filter(|&&i| labels[i]).count();
        tp += gp;
        seen += e - s;
        if gp > 0 {
            ap += (tp as f64 / seen as f64) * (gp as f64 / pos as f64);
        }
    }
    Ok(ap)
}

pub fn prevalence(labels: &[bool]) -> f64 {
    labels.iter().filter(|&&l| l).count() as f64 / labels.len().max(1) as f64
}

/// Pairs per-slice scores with the stored slice labels.
pub fn slice_aggregate(dataset: &Dataset, scores: &[f64]) -> Result<(Vec<f64>, Vec<bool>)> {
    if scores.len() != dataset.len() {
        return Err(Error::shape(
            "slice_aggregate",
            format!("{} scores for {} slices", scores.len(), dataset.len()),
        ));
    }
    Ok((scores.to_vec(), dataset.labels()))
}

/// Brain-mask voxels of every slice with their heatmap values and labels.
pub fn voxel_aggregate(dataset: &Dataset, heatmaps: &[Heatmap]) -> Result<(Vec<f64>, Vec<bool>)> {
    if heatmaps.len() != dataset.len() {
        return Err(Error::shape(
            "voxel_aggregate",
            format!("{} heatmaps for {} slices", heatmaps.len(), dataset.len()),
        ));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, (h, s)) in heatmaps.iter().zip(&dataset.samples).enumerate() {
        if !h.postprocessed {
            return Err(Error::invalid(format!("heatmap {i} has not been post-processed")));
        }
        if h.map.len() != s.brain_mask.len() {
            return Err(Error::shape(
                "voxel_aggregate",
                format!("heatmap {i} has {} pixels, mask {}", h.map.len(), s.brain_mask.len()),
            ));
        }
        for ((&v, &b), &a) in h.map.data().iter().zip(&s.brain_mask).zip(&s.anomaly_mask) {
            if b {
                scores.push(v as f64);
                labels.push(a);
            }
        }
    }
    Ok((scores, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Detection,
    Localization,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Detection => "detection",
            Task::Localization => "localization",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Auroc,
    Auprc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Auprc => "auprc",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Metrics of one scorer on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub split: Split,
    pub auroc: f64,
    pub auprc: f64,
    pub prevalence: f64,
}

pub fn evaluate(split: Split, scores: &[f64], labels: &[bool]) -> Result<Evaluation> {
    Ok(Evaluation {
        split,
        auroc: auroc(scores, labels)?,
        auprc: auprc(scores, labels)?,
        prevalence: prevalence(labels),
    })
}

/// A scoring configuration together with where its numbers came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub name: String,
    pub evaluation: Evaluation,
}

/// Index of the candidate with the highest validation AUPRC; the first one
/// declared wins ties.
pub fn select_scorer(candidates: &[Candidate]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid("no scorer candidates"));
    }
    if let Some(c) = candidates.iter().find(|c| c.evaluation.split != Split::Val) {
        return Err(Error::invalid(format!(
            "candidate {} was evaluated on the {} split; selection uses validation only",
            c.name, c.evaluation.split
        )));
    }
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.evaluation.auprc > candidates[best].evaluation.auprc {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedSummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl SeedSummary {
    /// `mean(std)` in percent with one decimal, e.g. `77.8(0.7)`.
    pub fn cell(&self) -> String {
        format!("{:.1}({:.1})", self.mean * 100.0, self.std * 100.0)
    }
}

pub fn summarize_seeds(values: &[f64]) -> Result<SeedSummary> {
    if values.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 seeds, got {}", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(SeedSummary {
        mean,
        std: var.sqrt(),
        n: values.len(),
    })
}

/// One line of the machine-readable results file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub dataset: String,
    pub task: Task,
    pub metric: Metric,
    pub seed: u64,
    pub value: f64,
}

pub const CSV_HEADER: &str = "method,dataset,task,metric,seed,value";

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method, r.dataset, r.task, r.metric, r.seed, r.value
        ));
    }
    s
}

/// Aligned `mean(std)` table with one line per method and one column per
/// task/metric pair present in `rows`.
pub fn summary_table(rows: &[ResultRow]) -> Result<String> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let columns: Vec<(Task, Metric)> = [Task::Detection, Task::Localization]
        .into_iter()
        .flat_map(|t| [Metric::Auroc, Metric::Auprc].map(|m| (t, m)))
        .filter(|&(t, m)| rows.iter().any(|r| r.task == t && r.metric == m))
        .collect();
    let mut cells: Vec<Vec<String>> = vec![std::iter::once("method".to_string())
        .chain(columns.iter().map(|(t, m)| format!("{t} {}", m.name().to_uppercase())))
        .collect()];
    for m in &methods {
        let mut line = vec![m.to_string()];
        for &(t, metric) in &columns {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == *m && r.task == t && r.metric == metric)
                .map(|r| r.value)
                .collect();
            line.push(match values.len() {
                0 => "-".to_string(),
                1 => format!("{:.1}", values[0] * 100.0),
                _ => summarize_seeds(&values)?.cell(),
            });
        }
        cells.push(line);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in &cells {
        let padded: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, &w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        out.push_str(padded.join("  ").trim_end());
        out.push('\n');
    }
    Ok(out)
}
