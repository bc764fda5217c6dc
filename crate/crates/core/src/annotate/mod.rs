//! Producing and degrading proportion annotations, and sampling keypoints.

mod cluster;
mod keypoints;
mod sp;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::{AnnotatedDataset, ProportionVector};

pub use cluster::{degrade_sp_clustering, kmeans, ClusterDegradation, ClusterDegradeSpec, KMeans};
pub use keypoints::{annotate_dataset_keypoints, dilate_points, sample_keypoints, KeypointPlan};
pub use sp::{degrade_sp_noise, degrade_sp_set_noise, extract_sp, NoiseSpec, Renorm};

/// Proportions for every image that has a ground-truth mask.
pub fn extract_dataset_sp(ds: &AnnotatedDataset) -> BTreeMap<String, ProportionVector> {
    ds.gt_masks.iter().map(|(id, m)| (id.clone(), extract_sp(m))).collect()
}

/// Train-split proportions in id order, as consumed by the degradations.
pub fn train_sp_set(ds: &AnnotatedDataset) -> Result<Vec<(String, ProportionVector)>> {
    let mut ids = ds.train_ids();
    ids.sort_unstable();
    ids.into_iter()
        .map(|id| {
            ds.sp
                .get(id)
                .map(|sp| (id.to_string(), sp.clone()))
                .ok_or_else(|| Error::MissingAnnotation(format!("{id} has no proportions")))
        })
        .collect()
}
