//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spss_core::annotate::{annotate_dataset_keypoints, KeypointPlan};
use spss_core::ingest::{generate_synthetic, SyntheticSpec};
use spss_core::nn::{gap, gap_backward, BackboneConfig, Input, ModelState, OutputGrad, ScoreMaps};
use spss_core::objectives::{loss_sk, loss_sk_grad, loss_sp, loss_sp_grad, loss_total, LossConfig};
use spss_core::types::{AnnotatedDataset, KeypointAnnotation, ProportionVector};

/// Small three-class dataset with keypoints on every image.
pub fn toy_dataset(n: usize, size: usize, seed: u64) -> AnnotatedDataset {
    let ds = generate_synthetic(&SyntheticSpec::multiclass(3, n, size, seed)).unwrap();
    let plan = KeypointPlan { classes: vec![1, 2], seed, ..KeypointPlan::default() };
    let kp = annotate_dataset_keypoints(&ds, &plan).unwrap();
    ds.with_keypoints(kp)
}

/// A fixed batch together with its proportion targets and keypoints.
pub struct Batch {
    pub ids: Vec<String>,
    pub inputs: Vec<Input<f64>>,
    pub targets: Vec<ProportionVector>,
    pub keypoints: Vec<KeypointAnnotation>,
}

impl Batch {
    pub fn from_dataset(ds: &AnnotatedDataset, n: usize) -> Self {
        let patches = &ds.patches[..n];
        let ids: Vec<String> = patches.iter().map(|p| p.id().to_string()).collect();
        Self {
            inputs: patches.iter().map(Input::from_patch).collect(),
            targets: ids.iter().map(|id| ds.sp[id].clone()).collect(),
            keypoints: ds.keypoints.iter().filter(|k| ids.contains(&k.image_id)).cloned().collect(),
            ids,
        }
    }

    /// Objective as a function of the score maps alone.
    pub fn loss_of_maps(&self, maps: &[ScoreMaps<f64>], alpha: f64) -> f64 {
        let pred: Vec<ProportionVector> = maps.iter().map(gap).collect();
        let lsp = loss_sp(&pred, &self.targets).unwrap();
        if alpha == 1.0 {
            return lsp;
        }
        let by_id: BTreeMap<&str, &ScoreMaps<f64>> = self.ids.iter().map(String::as_str).zip(maps).collect();
        let lsk = loss_sk(&by_id, &self.keypoints, 1e-7).unwrap();
        loss_total(lsp, lsk, &LossConfig { alpha, ..LossConfig::default() })
    }

    /// Analytic derivative of [`Batch::loss_of_maps`] with respect to every score.
    pub fn grad_of_maps(&self, maps: &[ScoreMaps<f64>], alpha: f64) -> Vec<Vec<f64>> {
        let pred: Vec<ProportionVector> = maps.iter().map(gap).collect();
        let d_rho = loss_sp_grad(&pred, &self.targets).unwrap();
        let mut out: Vec<Vec<f64>> = maps
            .iter()
            .zip(&d_rho)
            .map(|(m, d)| gap_backward(m, &d.iter().map(|v| alpha * v).collect::<Vec<_>>()))
            .collect();
        if alpha < 1.0 {
            let by_id: BTreeMap<&str, &ScoreMaps<f64>> = self.ids.iter().map(String::as_str).zip(maps).collect();
            let sk = loss_sk_grad(&by_id, &self.keypoints, 1e-7).unwrap();
            for (i, id) in self.ids.iter().enumerate() {
                if let Some(g) = sk.get(id) {
                    for (o, v) in out[i].iter_mut().zip(g) {
                        *o += (1.0 - alpha) * v;
                    }
                }
            }
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Outcome of a central-difference comparison.
#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub smallest_magnitude: f64,
    /// Analytic and numeric values at the worst index.
    pub worst: (f64, f64),
}

/// Smallest derivative magnitude a check samples. Below it the central
/// difference at step 1e-5 is dominated by f64 rounding of the loss (about
/// 1e-16 * L / 1e-5), so a relative comparison would measure noise.
pub const MIN_CHECKED_GRADIENT: f64 = 1e-6;

/// Compares analytic and central-difference derivatives for `n` parameters
/// drawn at random from those with a measurable derivative.
pub fn check_parameters(model: &ModelState<f64>, batch: &Batch, alpha: f64, n: usize, step: f64, seed: u64) -> GradCheck {
    let graph = model.forward_graph(batch.inputs.clone()).unwrap();
    let seed_grad = OutputGrad::Scores(batch.grad_of_maps(&graph.maps, alpha));
    let analytic = model.gradients(&graph, &seed_grad).unwrap().values;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eligible: Vec<usize> = (0..model.param_count()).filter(|&k| analytic[k].abs() >= MIN_CHECKED_GRADIENT).collect();
    assert!(eligible.len() >= n, "only {} parameters with a measurable derivative", eligible.len());
    let picks: Vec<usize> = sample(&mut rng, eligible.len(), n).into_iter().map(|i| eligible[i]).collect();
    let mut result = GradCheck { max_rel_error: 0.0, checked: 0, smallest_magnitude: f64::INFINITY, worst: (0.0, 0.0) };
    for k in picks {
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.update_params(|p| p[k] += delta);
            batch.loss_of_maps(&m.forward_inputs(&batch.inputs).unwrap(), alpha)
        };
        let numeric = (eval(step) - eval(-step)) / (2.0 * step);
        let err = relative_error(analytic[k], numeric);
        if err > result.max_rel_error {
            result.max_rel_error = err;
            result.worst = (analytic[k], numeric);
        }
        result.smallest_magnitude = result.smallest_magnitude.min(analytic[k].abs());
        result.checked += 1;
    }
    result
}

/// Same comparison taken directly at the score maps.
pub fn check_outputs(model: &ModelState<f64>, batch: &Batch, alpha: f64, n: usize, step: f64, seed: u64) -> GradCheck {
    let maps = model.forward_inputs(&batch.inputs).unwrap();
    let analytic = batch.grad_of_maps(&maps, alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = maps[0].values().len();
    let mut result = GradCheck { max_rel_error: 0.0, checked: 0, smallest_magnitude: f64::INFINITY, worst: (0.0, 0.0) };
    // keypoint pixels carry the largest derivatives; include them first
    let mut targets: Vec<(usize, usize)> = Vec::new();
    for ann in &batch.keypoints {
        let i = batch.ids.iter().position(|id| *id == ann.image_id).unwrap();
        let p = ann.points[0];
        targets.push((i, (ann.class_index * maps[i].rows() + p.row) * maps[i].cols() + p.col));
    }
    targets.truncate(n / 2);
    for flat in sample(&mut rng, maps.len() * per, n - targets.len()) {
        targets.push((flat / per, flat % per));
    }
    for (i, k) in targets {
        let eval = |delta: f64| {
            let mut perturbed = maps.clone();
            let m = &maps[i];
            let mut values = m.values().to_vec();
            values[k] += delta;
            perturbed[i] = ScoreMaps::new(m.n_out(), m.rows(), m.cols(), m.activation(), values).unwrap();
            batch.loss_of_maps(&perturbed, alpha)
        };
        let numeric = (eval(step) - eval(-step)) / (2.0 * step);
        let err = relative_error(analytic[i][k], numeric);
        if err > result.max_rel_error {
            result.max_rel_error = err;
            result.worst = (analytic[i][k], numeric);
        }
        result.smallest_magnitude = result.smallest_magnitude.min(analytic[i][k].abs());
        result.checked += 1;
    }
    result
}

pub fn toy_model(ds: &AnnotatedDataset, base: usize, seed: u64) -> ModelState<f64> {
    ModelState::build(BackboneConfig::new(ds.channels().unwrap(), ds.n_classes(), base), seed).unwrap()
}
