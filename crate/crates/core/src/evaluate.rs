//! Pixel confusion counts, segmentation metrics and their aggregation over
//! repeated runs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_json;
use crate::nn::{predict_masks, Input, MaskRule, ModelState, Real, ScoreMaps};
use crate::types::{AnnotatedDataset, LabelMode, MaskStack};

/// Images scored per forward call during evaluation.
const EVAL_CHUNK: usize = 16;

/// Per-class pixel counts over a set of images. Binary data is counted as
/// two classes, background then foreground.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub total: u64,
}

impl ConfusionCounts {
    pub fn new(n_classes: usize) -> Self {
        Self {
            tp: vec![0; n_classes],
            fp: vec![0; n_classes],
            fn_: vec![0; n_classes],
            total: 0,
        }
    }

    /// Counts sized for masks of the given mode and plane count.
    pub fn for_mode(mode: LabelMode, planes: usize) -> Self {
        Self::new(match mode {
            LabelMode::Binary => 2,
            LabelMode::Multiclass => planes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn tn(&self, j: usize) -> u64 {
        self.total - self.tp[j] - self.fp[j] - self.fn_[j]
    }

    pub fn correct(&self) -> u64 {
        self.tp.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &MaskStack, truth: &MaskStack) -> Result<()> {
        if pred.mode() != truth.mode() || pred.classes() != truth.classes() {
            return Err(Error::Shape(format!(
                "prediction is {} with {} planes, truth is {} with {}",
                pred.mode(),
                pred.classes(),
                truth.mode(),
                truth.classes()
            )));
        }
        if pred.rows() != truth.rows() || pred.cols() != truth.cols() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.rows(),
                pred.cols(),
                truth.rows(),
                truth.cols()
            )));
        }
        let n = self.n_classes();
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            let (p, t) = (p as usize, t as usize);
            if p >= n || t >= n {
                return Err(Error::Shape(format!("label outside {n} classes")));
            }
            if p == t {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[t] += 1;
            }
        }
        self.total += pred.labels().len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.n_classes() != self.n_classes() {
            return Err(Error::Shape("confusion counts of different class counts".into()));
        }
        for j in 0..self.n_classes() {
            self.tp[j] += other.tp[j];
            self.fp[j] += other.fp[j];
            self.fn_[j] += other.fn_[j];
        }
        self.total += other.total;
        Ok(())
    }
}

/// Adds one image's counts to `acc`.
pub fn accumulate_confusion(pred: &MaskStack, truth: &MaskStack, mut acc: ConfusionCounts) -> Result<ConfusionCounts> {
    acc.accumulate(pred, truth)?;
    Ok(acc)
}

/// Mean and sample standard deviation of a metric across runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn single(v: f64) -> Self {
        Self { mean: v, std: 0.0 }
    }

    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub name: String,
    /// `None` when the class never occurs in truth or prediction.
    pub iou: Option<Stat>,
    pub f1: Option<Stat>,
    pub excluded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_iou: Stat,
    /// Unweighted mean of the per-class F1 over included classes.
    pub mean_f1: Stat,
    /// Overall pixel accuracy, counted over every class.
    pub mean_accuracy: Stat,
    pub classes: Vec<ClassScores>,
    pub excluded_classes: Vec<String>,
    pub n_runs: usize,
    /// False for a single run, whose standard deviations are reported as 0.
    pub std_defined: bool,
}

impl MetricsReport {
    pub fn class(&self, name: &str) -> Option<&ClassScores> {
        self.classes.iter().find(|c| c.name == name)
    }

    /// F1 of the named class (mean over runs), if defined.
    pub fn f1(&self, name: &str) -> Option<f64> {
        self.class(name).and_then(|c| c.f1).map(|s| s.mean)
    }
}

/// Metrics from dataset-level counts. Classes with no true or predicted
/// pixels are left out of the means; excluded classes still count toward
/// pixel accuracy.
pub fn compute_metrics(acc: &ConfusionCounts, class_names: &[String], excluded: &[usize]) -> Result<MetricsReport> {
    let n = acc.n_classes();
    if class_names.len() != n {
        return Err(Error::Metrics(format!("{} class names for {n} classes", class_names.len())));
    }
    if let Some(&bad) = excluded.iter().find(|&&j| j >= n) {
        return Err(Error::Metrics(format!("excluded class {bad} out of range")));
    }
    if acc.total == 0 {
        return Err(Error::Metrics("no pixels were evaluated".into()));
    }
    let mut classes = Vec::with_capacity(n);
    let (mut ious, mut f1s) = (Vec::new(), Vec::new());
    for (j, name) in class_names.iter().enumerate().take(n) {
        let (tp, fp, fn_) = (acc.tp[j] as f64, acc.fp[j] as f64, acc.fn_[j] as f64);
        let denom = tp + fp + fn_;
        let is_excluded = excluded.contains(&j);
        let (iou, f1) = if denom > 0.0 {
            (Some(tp / denom), Some(2.0 * tp / (2.0 * tp + fp + fn_)))
        } else {
            (None, None)
        };
        if !is_excluded {
            if let (Some(i), Some(f)) = (iou, f1) {
                ious.push(i);
                f1s.push(f);
            }
        }
        classes.push(ClassScores {
            name: name.clone(),
            iou: iou.map(Stat::single),
            f1: f1.map(Stat::single),
            excluded: is_excluded,
        });
    }
    if ious.is_empty() {
        return Err(Error::Metrics("every included class is absent from truth and prediction".into()));
    }
    Ok(MetricsReport {
        mean_iou: Stat::single(ious.iter().sum::<f64>() / ious.len() as f64),
        mean_f1: Stat::single(f1s.iter().sum::<f64>() / f1s.len() as f64),
        mean_accuracy: Stat::single(acc.correct() as f64 / acc.total as f64),
        classes,
        excluded_classes: excluded.iter().map(|&j| class_names[j].clone()).collect(),
        n_runs: 1,
        std_defined: false,
    })
}

/// Means and sample standard deviations across runs.
pub fn aggregate_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports.first().ok_or_else(|| Error::Metrics("no reports to aggregate".into()))?;
    let names: Vec<&str> = first.classes.iter().map(|c| c.name.as_str()).collect();
    for r in reports {
        let other: Vec<&str> = r.classes.iter().map(|c| c.name.as_str()).collect();
        if other != names || r.excluded_classes != first.excluded_classes {
            return Err(Error::Metrics("reports do not share the same classes".into()));
        }
    }
    let stat = |f: &dyn Fn(&MetricsReport) -> f64| Stat::of(&reports.iter().map(f).collect::<Vec<_>>());
    let classes = (0..names.len())
        .map(|j| {
            let pick = |f: &dyn Fn(&ClassScores) -> Option<Stat>| {
                let v: Vec<f64> = reports.iter().filter_map(|r| f(&r.classes[j]).map(|s| s.mean)).collect();
                (!v.is_empty()).then(|| Stat::of(&v))
            };
            ClassScores {
                name: names[j].to_string(),
                iou: pick(&|c| c.iou),
                f1: pick(&|c| c.f1),
                excluded: first.classes[j].excluded,
            }
        })
        .collect();
    Ok(MetricsReport {
        mean_iou: stat(&|r| r.mean_iou.mean),
        mean_f1: stat(&|r| r.mean_f1.mean),
        mean_accuracy: stat(&|r| r.mean_accuracy.mean),
        classes,
        excluded_classes: first.excluded_classes.clone(),
        n_runs: reports.len(),
        std_defined: reports.len() > 1,
    })
}

/// Score maps for the given images, computed in fixed-size chunks.
pub fn predict_maps<T: Real>(model: &ModelState<T>, ds: &AnnotatedDataset, ids: &[&str]) -> Result<Vec<ScoreMaps<T>>> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_CHUNK) {
        let inputs = chunk
            .iter()
            .map(|id| {
                ds.patch(id)
                    .map(Input::from_patch)
                    .ok_or_else(|| Error::MissingAnnotation(format!("no patch {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.extend(model.forward_inputs(&inputs)?);
    }
    Ok(out)
}

/// Confusion counts of the model's masks on the given images.
pub fn confusion_for<T: Real>(model: &ModelState<T>, ds: &AnnotatedDataset, ids: &[&str], rule: MaskRule) -> Result<ConfusionCounts> {
    let mut acc = ConfusionCounts::for_mode(ds.mode, ds.n_classes());
    for chunk in ids.chunks(EVAL_CHUNK) {
        for (id, maps) in chunk.iter().zip(predict_maps(model, ds, chunk)?) {
            let truth = ds
                .gt_masks
                .get(*id)
                .ok_or_else(|| Error::MissingAnnotation(format!("{id} has no ground-truth mask")))?;
            acc.accumulate(&predict_masks(&maps, rule)?, truth)?;
        }
    }
    Ok(acc)
}

/// Scores the model on the test split.
pub fn evaluate_model<T: Real>(model: &ModelState<T>, ds: &AnnotatedDataset, rule: MaskRule, excluded: &[usize]) -> Result<MetricsReport> {
    let ids = ds.test_ids();
    if ids.is_empty() {
        return Err(Error::Metrics("dataset has no test images".into()));
    }
    let acc = confusion_for(model, ds, &ids, rule)?;
    compute_metrics(&acc, &ds.eval_class_names(), excluded)
}

/// Resolves class names to indices in the evaluation class list.
pub fn resolve_excluded(ds: &AnnotatedDataset, names: &[String]) -> Result<Vec<usize>> {
    let classes = ds.eval_class_names();
    names
        .iter()
        .map(|n| {
            classes
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| Error::invalid(format!("unknown class {n:?}; known: {}", classes.join(", "))))
        })
        .collect()
}

fn pct(s: Option<Stat>, with_std: bool) -> String {
    match s {
        None => "n/a".into(),
        Some(s) if with_std => format!("{:.1} ± {:.1}", 100.0 * s.mean, 100.0 * s.std),
        Some(s) => format!("{:.1}", 100.0 * s.mean),
    }
}

/// A Markdown table with one row per method: per-class F1 of the included
/// classes, then Mean IoU and mean (pixel) accuracy, in percent.
pub fn render_markdown(rows: &[(String, &MetricsReport)]) -> String {
    let mut out = String::new();
    let Some((_, first)) = rows.first() else {
        return out;
    };
    let shown: Vec<&ClassScores> = first.classes.iter().filter(|c| !c.excluded).collect();
    let _ = write!(out, "| Method |");
    for c in &shown {
        let _ = write!(out, " F1 {} |", c.name);
    }
    let _ = writeln!(out, " Mean IoU | Mean accuracy |");
    let _ = writeln!(out, "|---|{}---|---|", "---|".repeat(shown.len()));
    for (name, r) in rows {
        let std = r.std_defined;
        let _ = write!(out, "| {name} |");
        for c in &shown {
            let f1 = r.class(&c.name).and_then(|x| x.f1);
            let _ = write!(out, " {} |", pct(f1, std));
        }
        let _ = writeln!(out, " {} | {} |", pct(Some(r.mean_iou), std), pct(Some(r.mean_accuracy), std));
    }
    if !first.excluded_classes.is_empty() {
        let _ = writeln!(
            out,
            "\nExcluded from Mean IoU and F1 (still counted in accuracy): {}.",
            first.excluded_classes.join(", ")
        );
    }
    if rows.iter().any(|(_, r)| r.n_runs > 1) {
        let _ = writeln!(out, "\nValues are mean ± sample standard deviation over runs.");
    }
    out
}

#[derive(Serialize)]
struct ReportFile<'a> {
    report: &'a MetricsReport,
    context: &'a serde_json::Value,
}

/// Writes `report.json` (metrics plus a context echo such as config and
/// seeds) and `report.md`.
pub fn write_report(dir: &Path, method: &str, report: &MetricsReport, context: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("report.json"), &ReportFile { report, context })?;
    let md = render_markdown(&[(method.to_string(), report)]);
    let path = dir.join("report.md");
    std::fs::write(&path, md).map_err(|e| Error::io(&path, e))
}
