//! Proportion extraction and noise degradation.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LabelMode, MaskStack, ProportionVector};

/// Fraction of pixels set in each plane.
pub fn extract_sp(mask: &MaskStack) -> ProportionVector {
    let px = (mask.rows() * mask.cols()) as f64;
    let mut counts = vec![0usize; mask.classes()];
    match mask.mode() {
        LabelMode::Binary => counts[0] = mask.labels().iter().filter(|&&l| l == 1).count(),
        LabelMode::Multiclass => {
            for &l in mask.labels() {
                counts[l as usize] += 1;
            }
        }
    }
    ProportionVector::new_unchecked(mask.mode(), counts.into_iter().map(|c| c as f64 / px).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Renorm {
    /// Softmax after adding noise, even when sigma is zero.
    SoftmaxAlways,
    /// Softmax only when sigma > 0, so sigma = 0 is the identity.
    #[default]
    SoftmaxIfNoisy,
    /// Clip to [0,1] then divide by the sum.
    ClipAndRescale,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub renorm: Renorm,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::invalid(format!("sigma {} not in [0, 1]", self.sigma)));
        }
        Ok(())
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn degrade_with(sp: &ProportionVector, spec: &NoiseSpec, rng: &mut ChaCha8Rng) -> Result<ProportionVector> {
    let normal = Normal::new(0.0, spec.sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let noisy: Vec<f64> = sp
        .values()
        .iter()
        .map(|v| if spec.sigma > 0.0 { v + normal.sample(rng) } else { *v })
        .collect();
    let values = match sp.mode() {
        LabelMode::Binary => noisy.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        LabelMode::Multiclass => match spec.renorm {
            Renorm::SoftmaxAlways => softmax(&noisy),
            Renorm::SoftmaxIfNoisy if spec.sigma > 0.0 => softmax(&noisy),
            Renorm::SoftmaxIfNoisy => noisy,
            Renorm::ClipAndRescale => {
                let clipped: Vec<f64> = noisy.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
                let s: f64 = clipped.iter().sum();
                if s > 0.0 {
                    clipped.into_iter().map(|v| v / s).collect()
                } else {
                    vec![1.0 / clipped.len() as f64; clipped.len()]
                }
            }
        },
    };
    ProportionVector::new(sp.mode(), values)
}

/// Adds `N(0, sigma)` to every component and renormalises.
pub fn degrade_sp_noise(sp: &ProportionVector, spec: &NoiseSpec) -> Result<ProportionVector> {
    spec.validate()?;
    degrade_with(sp, spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}

/// Degrades a whole annotation set with one generator, visiting images in
/// id order so the result depends only on the seed and the set.
pub fn degrade_sp_set_noise(
    set: &BTreeMap<String, ProportionVector>,
    spec: &NoiseSpec,
) -> Result<BTreeMap<String, ProportionVector>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    set.iter()
        .map(|(id, sp)| Ok((id.clone(), degrade_with(sp, spec, &mut rng)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn binary_proportion_counts_pixels() {
        let m = MaskStack::binary(2, 2, vec![1, 1, 0, 1]).unwrap();
        assert_eq!(extract_sp(&m).values(), &[0.75]);
    }

    #[test]
    fn all_background_mask_is_a_unit_vector() {
        let m = MaskStack::multiclass(3, 4, 4, vec![0; 16]).unwrap();
        assert_eq!(extract_sp(&m).values(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn sigma_zero_renorm_modes() {
        let sp = ProportionVector::new(LabelMode::Multiclass, vec![0.7, 0.3]).unwrap();
        let spec = |renorm| NoiseSpec { sigma: 0.0, renorm, seed: 1 };
        let always = degrade_sp_noise(&sp, &spec(Renorm::SoftmaxAlways)).unwrap();
        // softmax(0.7, 0.3) = (1 / (1 + e^-0.4), 1 / (1 + e^0.4))
        assert_abs_diff_eq!(always.values()[0], 1.0 / (1.0 + (-0.4f64).exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(always.values()[0], 0.5987, epsilon = 5e-5);
        assert_abs_diff_eq!(always.values()[1], 0.4013, epsilon = 5e-5);
        assert_eq!(degrade_sp_noise(&sp, &spec(Renorm::SoftmaxIfNoisy)).unwrap(), sp);
    }

    #[test]
    fn noisy_output_stays_on_simplex_and_is_seeded() {
        let sp = ProportionVector::new(LabelMode::Multiclass, vec![0.2, 0.5, 0.3]).unwrap();
        for renorm in [Renorm::SoftmaxAlways, Renorm::SoftmaxIfNoisy, Renorm::ClipAndRescale] {
            let spec = NoiseSpec { sigma: 0.5, renorm, seed: 4 };
            let a = degrade_sp_noise(&sp, &spec).unwrap();
            assert_eq!(a, degrade_sp_noise(&sp, &spec).unwrap());
            assert_abs_diff_eq!(a.values().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        let bin = ProportionVector::new(LabelMode::Binary, vec![0.02]).unwrap();
        let spec = NoiseSpec { sigma: 0.5, renorm: Renorm::SoftmaxIfNoisy, seed: 2 };
        let v = degrade_sp_noise(&bin, &spec).unwrap().values()[0];
        assert!((0.0..=1.0).contains(&v));
        assert!(degrade_sp_noise(&bin, &NoiseSpec { sigma: 1.5, ..spec }).is_err());
    }
}
