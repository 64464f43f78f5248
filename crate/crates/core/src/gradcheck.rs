//! Central-difference check of the analytic learner gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::LossKind;
use crate::detector::Label;
use crate::error::{Result, TtlError};
use crate::learner::{
    gradient_with_split, purification_split, total_loss_with_split, LossSettings, QueuedSample,
    TextFeatureSet,
};
use crate::vector::Embedding;

/// Denominator floor for the relative error of a single coordinate.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSpec {
    pub dim: usize,
    pub classes: usize,
    pub batch: usize,
    pub alpha: f64,
    pub tau: f64,
    pub kind: LossKind,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            classes: 4,
            batch: 32,
            alpha: 0.5,
            tau: 1.0,
            kind: LossKind::Omb,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorstCoordinate {
    pub feature: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub spec: GradcheckSpec,
    pub max_rel_err: f64,
    pub worst: WorstCoordinate,
    pub split_available: bool,
    pub passed: bool,
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(e) = Embedding::normalize(v) {
            return e;
        }
    }
}

/// Random feature set (OOD parameters perturbed off the ID features and off
/// the unit sphere) plus a random batch with both pseudo-label classes.
pub fn random_problem(spec: &GradcheckSpec) -> (TextFeatureSet, Vec<QueuedSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let ids: Vec<Embedding> = (0..spec.classes).map(|_| random_unit(&mut rng, d)).collect();
    let mut feats = TextFeatureSet::new(ids).expect("nonempty id set");
    let params: Vec<f64> = feats
        .params()
        .iter()
        .map(|p| (p + 0.4 * rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt()) * rng.gen_range(0.5..2.0))
        .collect();
    feats.set_params(&params);
    let batch: Vec<QueuedSample> = (0..spec.batch)
        .map(|i| {
            // first two samples fix both classes; the rest are random
            let label = match i {
                0 => Label::Id,
                1 | 2 => Label::Ood,
                _ if rng.gen_bool(0.4) => Label::Id,
                _ => Label::Ood,
            };
            QueuedSample {
                z: random_unit(&mut rng, d),
                base_score: 0.0,
                label,
                p: 0.0,
            }
        })
        .collect();
    (feats, batch)
}

pub fn run(spec: &GradcheckSpec) -> Result<GradcheckReport> {
    if spec.dim == 0 || spec.classes == 0 || spec.batch < 3 {
        return Err(TtlError::Argument("gradcheck needs dim, classes >= 1 and batch >= 3".into()));
    }
    if !(spec.step > 0.0) {
        return Err(TtlError::Argument("step must be positive".into()));
    }
    let (feats, batch) = random_problem(spec);
    let settings = LossSettings {
        alpha: spec.alpha,
        tau: spec.tau,
        grid: 100,
        kind: spec.kind,
    };
    let split = purification_split(&batch, &feats, settings.tau, settings.grid);
    let analytic = gradient_with_split(&batch, &feats, &settings, split.as_ref())?;

    let base = feats.params().to_vec();
    let mut probe = feats.clone();
    let mut worst = WorstCoordinate {
        feature: 0,
        coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_err: 0.0,
    };
    for i in 0..base.len() {
        let mut eval = |delta: f64| -> Result<f64> {
            let mut p = base.clone();
            p[i] += delta;
            probe.set_params(&p);
            Ok(total_loss_with_split(&batch, &probe, &settings, split.as_ref())?.total)
        };
        let numeric = (eval(spec.step)? - eval(-spec.step)?) / (2.0 * spec.step);
        let a = analytic[i];
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        if rel_err > worst.rel_err || i == 0 {
            worst = WorstCoordinate {
                feature: i / spec.dim,
                coord: i % spec.dim,
                analytic: a,
                numeric,
                rel_err,
            };
        }
    }
    Ok(GradcheckReport {
        spec: *spec,
        max_rel_err: worst.rel_err,
        worst,
        split_available: split.is_some(),
        passed: worst.rel_err < spec.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_passes() {
        let r = run(&GradcheckSpec::default()).unwrap();
        assert!(r.split_available);
        assert!(r.passed, "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn omb_only_path_passes() {
        let r = run(&GradcheckSpec { alpha: 0.0, ..Default::default() }).unwrap();
        assert!(r.passed, "max rel err {}", r.max_rel_err);
        let r = run(&GradcheckSpec { kind: LossKind::Ce, ..Default::default() }).unwrap();
        assert!(r.passed, "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn coarse_step_fails() {
        let r = run(&GradcheckSpec { step: 1e-1, ..Default::default() }).unwrap();
        assert!(!r.passed, "max rel err {}", r.max_rel_err);
    }
}
