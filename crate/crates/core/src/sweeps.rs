//! Sensitivity sweeps: train SPSS on progressively degraded proportions and
//! tabulate how the test metrics respond.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::annotate::{degrade_sp_clustering, degrade_sp_set_noise, train_sp_set, ClusterDegradeSpec, NoiseSpec, Renorm};
use crate::error::{Error, Result};
use crate::evaluate::{aggregate_reports, evaluate_model, resolve_excluded, MetricsReport};
use crate::io::{read_json, write_json, write_sp_csv};
use crate::nn::{MaskRule, Real};
use crate::train::{train, TrainConfig, TrainMode};
use crate::types::{AnnotatedDataset, ProportionVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Levels are noise standard deviations, ascending.
    Noise,
    /// Levels are cluster counts, descending.
    Cluster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub kind: SweepKind,
    /// Ordered from least to most degraded.
    pub levels: Vec<f64>,
    pub train: TrainConfig,
    pub n_runs: usize,
    pub seed: u64,
    pub renorm: Renorm,
    pub cluster_max_iters: usize,
    pub mask_rule: Option<MaskRule>,
    pub excluded_classes: Vec<String>,
}

impl SweepSpec {
    /// Levels are put in degradation order: noise ascending, cluster
    /// counts descending.
    pub fn new(kind: SweepKind, mut levels: Vec<f64>, train: TrainConfig, seed: u64) -> Self {
        levels.sort_by(|a, b| match kind {
            SweepKind::Noise => a.total_cmp(b),
            SweepKind::Cluster => b.total_cmp(a),
        });
        levels.dedup();
        Self {
            kind,
            levels,
            train,
            n_runs: 1,
            seed,
            renorm: Renorm::default(),
            cluster_max_iters: 300,
            mask_rule: None,
            excluded_classes: Vec::new(),
        }
    }

    pub fn validate(&self, n_train: usize) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::invalid("a sweep needs at least one level"));
        }
        if self.n_runs == 0 {
            return Err(Error::invalid("n_runs must be at least 1"));
        }
        let ordered = self.levels.windows(2).all(|w| match self.kind {
            SweepKind::Noise => w[0] < w[1],
            SweepKind::Cluster => w[0] > w[1],
        });
        if !ordered {
            return Err(Error::invalid(match self.kind {
                SweepKind::Noise => "noise levels must be strictly ascending",
                SweepKind::Cluster => "cluster counts must be strictly descending",
            }));
        }
        for &l in &self.levels {
            match self.kind {
                SweepKind::Noise if !(0.0..=1.0).contains(&l) => {
                    return Err(Error::invalid(format!("noise level {l} outside [0, 1]")))
                }
                SweepKind::Cluster if l < 1.0 || l.fract() != 0.0 || l as usize > n_train => {
                    return Err(Error::invalid(format!("cluster count {l} must be an integer in 1..={n_train}")))
                }
                _ => {}
            }
        }
        self.train.validate()
    }

    fn label(&self, level: f64) -> String {
        match self.kind {
            SweepKind::Noise => format!("sigma={level}"),
            SweepKind::Cluster => format!("K={}", level as usize),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub level: f64,
    pub label: String,
    /// Seed used for degradation and for the first training run.
    pub seed: u64,
    pub report: MetricsReport,
    pub runs: Vec<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: SweepKind,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Mean IoU per row in percentage points.
    pub fn mean_iou_points(&self) -> Vec<f64> {
        self.rows.iter().map(|r| 100.0 * r.report.mean_iou.mean).collect()
    }
}

/// Degraded train-split proportions and, for clustering, each image's cluster.
pub type LevelDegradation = (BTreeMap<String, ProportionVector>, Option<BTreeMap<String, usize>>);

/// Proportions for the train split after the level's degradation.
pub fn degrade_for_level(
    ds: &AnnotatedDataset,
    spec: &SweepSpec,
    level: f64,
    seed: u64,
) -> Result<LevelDegradation> {
    let set = train_sp_set(ds)?;
    match spec.kind {
        SweepKind::Noise => {
            let map: BTreeMap<String, ProportionVector> = set.into_iter().collect();
            let noise = NoiseSpec {
                sigma: level,
                renorm: spec.renorm,
                seed,
            };
            Ok((degrade_sp_set_noise(&map, &noise)?, None))
        }
        SweepKind::Cluster => {
            let cluster = ClusterDegradeSpec {
                max_iters: spec.cluster_max_iters,
                ..ClusterDegradeSpec::new(level as usize, seed)
            };
            let (sp, clusters) = degrade_sp_clustering(&set, &cluster)?;
            Ok((sp, Some(clusters)))
        }
    }
}

/// Degrades, trains and evaluates one level.
pub fn run_level<T: Real>(ds: &AnnotatedDataset, spec: &SweepSpec, index: usize, dir: Option<&Path>) -> Result<SweepRow> {
    let level = spec.levels[index];
    let seed = spec.seed.wrapping_add(index as u64);
    let (sp, clusters) = degrade_for_level(ds, spec, level, seed)?;
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_sp_csv(&dir.join("sp_degraded.csv"), &ds.class_names, &sp)?;
        if let Some(c) = &clusters {
            write_json(&dir.join("clusters.json"), c)?;
        }
    }
    let mut degraded = ds.clone();
    degraded.sp.extend(sp);
    let excluded = resolve_excluded(ds, &spec.excluded_classes)?;
    let rule = spec.mask_rule.unwrap_or_else(|| MaskRule::default_for(ds.n_classes()));
    let mut runs = Vec::with_capacity(spec.n_runs);
    for k in 0..spec.n_runs as u64 {
        let cfg = TrainConfig {
            seed: seed.wrapping_add(k),
            mode: TrainMode::Spss,
            ..spec.train.clone()
        };
        let (model, history) = train::<T>(&degraded, &cfg)?;
        if let Some(dir) = dir {
            write_json(&dir.join(format!("history_{k}.json")), &history)?;
        }
        runs.push(evaluate_model(&model, ds, rule, &excluded)?);
    }
    Ok(SweepRow {
        level,
        label: spec.label(level),
        seed,
        report: aggregate_reports(&runs)?,
        runs,
    })
}

fn level_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("level_{index:02}"))
}

#[derive(Serialize, Deserialize)]
struct LevelRecord {
    spec: SweepSpec,
    row: SweepRow,
}

/// Runs every level in order. With an output directory each finished level
/// is persisted at once, finished levels of an identical spec are reused,
/// and the summary files are rewritten after every level.
pub fn run_sweep<T: Real>(ds: &AnnotatedDataset, spec: &SweepSpec, out: Option<&Path>) -> Result<SweepTable> {
    spec.validate(ds.train_ids().len())?;
    let mut table = SweepTable {
        kind: spec.kind,
        rows: Vec::with_capacity(spec.levels.len()),
    };
    for index in 0..spec.levels.len() {
        let dir = out.map(|o| level_dir(o, index));
        let record_path = dir.as_ref().map(|d| d.join("level.json"));
        if let Some(path) = record_path.as_ref().filter(|p| p.is_file()) {
            let record: LevelRecord = read_json(path)?;
            if record.spec == *spec {
                log::info!("reusing finished level {}", record.row.label);
                table.rows.push(record.row);
                continue;
            }
        }
        log::info!("sweep level {}", spec.label(spec.levels[index]));
        let row = run_level::<T>(ds, spec, index, dir.as_deref())?;
        if let Some(path) = &record_path {
            write_json(path, &LevelRecord { spec: spec.clone(), row: row.clone() })?;
        }
        table.rows.push(row);
        if let Some(o) = out {
            write_sweep_outputs(o, &table)?;
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendResult {
    pub passed: bool,
    /// Consecutive pairs `(i, i+1)` whose increase exceeds the tolerance.
    pub violations: Vec<(usize, f64, f64)>,
}

/// Checks that `values` do not increase from one level to the next by more
/// than `tolerance`.
pub fn trend_check(values: &[f64], tolerance: f64) -> TrendResult {
    let violations: Vec<(usize, f64, f64)> = values
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] - w[0] > tolerance)
        .map(|(i, w)| (i, w[0], w[1]))
        .collect();
    TrendResult {
        passed: violations.is_empty(),
        violations,
    }
}

/// [`trend_check`] on a table's Mean IoU in percentage points.
pub fn trend_check_table(table: &SweepTable, tolerance_points: f64) -> TrendResult {
    trend_check(&table.mean_iou_points(), tolerance_points)
}

/// Writes `sweep.csv`, `sweep.json`, `sweep_plot.csv` and `sweep_plot.png`.
pub fn write_sweep_outputs(dir: &Path, table: &SweepTable) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["level", "mean_iou", "std", "seed"])?;
    for r in &table.rows {
        w.write_record([
            r.level.to_string(),
            format!("{:.6}", r.report.mean_iou.mean),
            format!("{:.6}", r.report.mean_iou.std),
            r.seed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join("sweep.json"), table)?;

    let path = dir.join("sweep_plot.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["x", "label", "mean_iou_pct", "lower_pct", "upper_pct", "mean_accuracy_pct"])?;
    for r in &table.rows {
        let (m, s) = (100.0 * r.report.mean_iou.mean, 100.0 * r.report.mean_iou.std);
        w.write_record([
            r.level.to_string(),
            r.label.clone(),
            format!("{m:.3}"),
            format!("{:.3}", m - s),
            format!("{:.3}", m + s),
            format!("{:.3}", 100.0 * r.report.mean_accuracy.mean),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    plot_png(&dir.join("sweep_plot.png"), &table.mean_iou_points())
}

/// A minimal line chart of Mean IoU against level index, y-axis 0-100.
fn plot_png(path: &Path, values: &[f64]) -> Result<()> {
    const W: u32 = 480;
    const H: u32 = 320;
    const PAD: u32 = 32;
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let grid = Rgb([225, 225, 225]);
    for g in 0..=4 {
        let y = H - PAD - g * (H - 2 * PAD) / 4;
        for x in PAD..W - PAD {
            img.put_pixel(x, y, if g == 0 { axis } else { grid });
        }
    }
    for y in PAD..=H - PAD {
        img.put_pixel(PAD, y, axis);
    }
    let to_xy = |i: usize, v: f64| {
        let span = values.len().saturating_sub(1).max(1) as f64;
        let x = PAD as f64 + i as f64 / span * f64::from(W - 2 * PAD);
        let y = f64::from(H - PAD) - v.clamp(0.0, 100.0) / 100.0 * f64::from(H - 2 * PAD);
        (x, y)
    };
    let line = Rgb([31, 119, 180]);
    for (i, w) in values.windows(2).enumerate() {
        let (x0, y0) = to_xy(i, w[0]);
        let (x1, y1) = to_xy(i + 1, w[1]);
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()) as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            img.put_pixel((x0 + t * (x1 - x0)) as u32, (y0 + t * (y1 - y0)) as u32, line);
        }
    }
    for (i, &v) in values.iter().enumerate() {
        let (x, y) = to_xy(i, v);
        for dx in -2i32..=2 {
            for dy in -2i32..=2 {
                let (px, py) = (x as i32 + dx, y as i32 + dy);
                if (0..W as i32).contains(&px) && (0..H as i32).contains(&py) {
                    img.put_pixel(px as u32, py as u32, line);
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}
