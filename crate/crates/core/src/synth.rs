//! Synthetic ID/OOD embedding streams with known ground truth.
//!
//! ID class centers double as the ID text features. Each stream sample is a
//! unit-normalized Gaussian perturbation of a class (ID) or cluster (OOD)
//! center: a Gaussian tangent direction at the center, walked along the
//! great circle by its own length, so `concentration` is roughly the
//! angular spread in radians.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, Manifest};
use crate::error::{Result, TtlError};
use crate::vector::{dot, norm, Embedding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim: usize,
    pub num_id_classes: usize,
    pub num_ood_clusters: usize,
    /// Angular spread around each center, radians.
    pub concentration: f64,
    pub id_fraction: f64,
    pub stream_length: usize,
    /// Upper bound on cosine between any OOD center and any ID center.
    pub ood_max_cosine: f64,
    /// When set, each OOD center sits at exactly this cosine to one randomly
    /// chosen ID center (near-OOD); must not exceed `ood_max_cosine`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_anchor_cosine: Option<f64>,
    /// When set, OOD centers are scattered (angular spread, radians) around
    /// one shared domain direction instead of being placed independently.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_domain_spread: Option<f64>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dim: 64,
            num_id_classes: 10,
            num_ood_clusters: 5,
            concentration: 1.0,
            id_fraction: 0.5,
            stream_length: 10_000,
            ood_max_cosine: 0.5,
            ood_anchor_cosine: None,
            ood_domain_spread: None,
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// d=64, 10 ID classes, 5 OOD clusters sharing one domain direction,
    /// each at cosine 0.5 to some ID class. Base MCM AUROC lands near 0.85.
    pub fn reference() -> Self {
        Self {
            concentration: 1.2,
            ood_max_cosine: 0.5,
            ood_anchor_cosine: Some(0.5),
            ood_domain_spread: Some(0.5),
            ..Default::default()
        }
    }

    /// Tighter clusters than `reference`, 9:1 ID:OOD.
    pub fn imbalanced() -> Self {
        Self {
            concentration: 1.0,
            id_fraction: 0.9,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(TtlError::Argument("dim must be at least 2".into()));
        }
        if self.num_id_classes == 0 || self.num_ood_clusters == 0 {
            return Err(TtlError::Argument("need at least one ID class and one OOD cluster".into()));
        }
        if !(self.id_fraction > 0.0 && self.id_fraction < 1.0) {
            return Err(TtlError::Argument("id_fraction must lie in (0, 1)".into()));
        }
        if !(self.concentration >= 0.0 && self.concentration.is_finite()) {
            return Err(TtlError::Argument("concentration must be non-negative".into()));
        }
        if !(-1.0..=1.0).contains(&self.ood_max_cosine) {
            return Err(TtlError::Argument("ood_max_cosine must lie in [-1, 1]".into()));
        }
        if self.ood_max_cosine <= 0.0 && self.num_id_classes >= self.dim {
            return Err(TtlError::Argument(
                "orthogonal OOD centers need num_id_classes < dim".into(),
            ));
        }
        if let Some(s) = self.ood_domain_spread {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(TtlError::Argument("ood_domain_spread must be non-negative".into()));
            }
        }
        if let Some(a) = self.ood_anchor_cosine {
            if !(a > -1.0 && a <= self.ood_max_cosine) {
                return Err(TtlError::Argument(
                    "ood_anchor_cosine must lie in (-1, ood_max_cosine]".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub id_text: Vec<Embedding>,
    pub ood_centers: Vec<Embedding>,
    pub stream: Vec<Embedding>,
    /// 1 = ID, 0 = OOD, aligned with `stream`.
    pub labels: Vec<u8>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    loop {
        if let Ok(e) = Embedding::normalize(gaussian_vec(rng, dim)) {
            return e;
        }
    }
}

/// Removes the span of `basis` from `v` (modified Gram–Schmidt on the fly).
fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let c = dot(v, b);
        for (x, y) in v.iter_mut().zip(b) {
            *x -= c * y;
        }
    }
}

fn orthonormal_basis(vectors: &[Embedding]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut w = v.as_slice().to_vec();
        project_out(&mut w, &basis);
        let n = norm(&w);
        if n > 1e-10 {
            basis.push(w.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Pushes `start` (a fresh random direction on failure) until its cosine to
/// every ID center is at most `ceiling`. Each pass rotates the vector in the
/// plane of the worst ID center so that cosine lands exactly on the ceiling.
fn push_below_ceiling(
    rng: &mut ChaCha8Rng,
    start: Option<&Embedding>,
    id_centers: &[Embedding],
    id_basis: &[Vec<f64>],
    ceiling: f64,
) -> Embedding {
    let dim = id_centers[0].dim();
    let mut first = start.map(|e| e.as_slice().to_vec());
    if ceiling <= 0.0 {
        loop {
            let mut v = first.take().unwrap_or_else(|| gaussian_vec(rng, dim));
            project_out(&mut v, id_basis);
            // twice for numerical orthogonality
            project_out(&mut v, id_basis);
            if let Ok(e) = Embedding::normalize(v) {
                return e;
            }
        }
    }
    'outer: loop {
        let mut v = match first.take() {
            Some(v) => v,
            None => random_unit(rng, dim).into_inner(),
        };
        for _ in 0..1000 {
            let (worst, cmax) = id_centers
                .iter()
                .enumerate()
                .map(|(i, c)| (i, dot(&v, c.as_slice())))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            if cmax <= ceiling + 1e-12 {
                match Embedding::normalize(v) {
                    Ok(e) => return e,
                    Err(_) => continue 'outer,
                }
            }
            let c = id_centers[worst].as_slice();
            let mut r: Vec<f64> = v.iter().zip(c).map(|(x, y)| x - cmax * y).collect();
            let rn = norm(&r);
            if rn < 1e-12 {
                continue 'outer;
            }
            r.iter_mut().for_each(|x| *x /= rn);
            let s = (1.0 - ceiling * ceiling).sqrt();
            // shave slightly below the ceiling so later passes converge
            let target = ceiling - 1e-9;
            v = c.iter().zip(&r).map(|(ci, ri)| target * ci + s * ri).collect();
            let n = norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
        }
    }
}

fn perturb(rng: &mut ChaCha8Rng, center: &Embedding, concentration: f64) -> Embedding {
    let c = center.as_slice();
    let sd = concentration / ((c.len() - 1) as f64).sqrt();
    loop {
        let mut g: Vec<f64> = (0..c.len())
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let along = dot(&g, c);
        g.iter_mut().zip(c).for_each(|(x, ci)| *x -= along * ci);
        let theta = norm(&g);
        if theta < 1e-300 {
            return center.clone();
        }
        let (sin, cos) = theta.sin_cos();
        let v: Vec<f64> = c.iter().zip(&g).map(|(ci, gi)| cos * ci + sin * gi / theta).collect();
        if let Ok(e) = Embedding::normalize(v) {
            return e;
        }
    }
}

/// Places a center at cosine `anchor` to a random ID center while keeping
/// every ID cosine at most `ceiling`.
fn anchored_center(
    rng: &mut ChaCha8Rng,
    id_centers: &[Embedding],
    anchor: f64,
    ceiling: f64,
) -> Embedding {
    let dim = id_centers[0].dim();
    loop {
        let a = id_centers[rng.gen_range(0..id_centers.len())].as_slice();
        let mut r = gaussian_vec(rng, dim);
        let along = dot(&r, a);
        r.iter_mut().zip(a).for_each(|(x, ai)| *x -= along * ai);
        let rn = norm(&r);
        if rn < 1e-12 {
            continue;
        }
        let s = (1.0 - anchor * anchor).sqrt();
        let v: Vec<f64> = a.iter().zip(&r).map(|(ai, ri)| anchor * ai + s * ri / rn).collect();
        let Ok(e) = Embedding::normalize(v) else { continue };
        if id_centers.iter().all(|c| c.cos(&e) <= ceiling + 1e-12) {
            return e;
        }
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let id_text: Vec<Embedding> = (0..spec.num_id_classes)
        .map(|_| random_unit(&mut rng, spec.dim))
        .collect();
    let basis = orthonormal_basis(&id_text);
    let place = |rng: &mut ChaCha8Rng| match spec.ood_anchor_cosine {
        Some(a) => anchored_center(rng, &id_text, a, spec.ood_max_cosine),
        None => push_below_ceiling(rng, None, &id_text, &basis, spec.ood_max_cosine),
    };
    let ood_centers: Vec<Embedding> = match spec.ood_domain_spread {
        None => (0..spec.num_ood_clusters).map(|_| place(&mut rng)).collect(),
        Some(spread) => {
            let domain = place(&mut rng);
            (0..spec.num_ood_clusters)
                .map(|_| {
                    let c = perturb(&mut rng, &domain, spread);
                    push_below_ceiling(&mut rng, Some(&c), &id_text, &basis, spec.ood_max_cosine)
                })
                .collect()
        }
    };

    let n_id = (spec.id_fraction * spec.stream_length as f64).round() as usize;
    let mut labels: Vec<u8> = (0..spec.stream_length)
        .map(|i| u8::from(i < n_id))
        .collect();
    labels.shuffle(&mut rng);

    let stream = labels
        .iter()
        .map(|&l| {
            let center = if l == 1 {
                &id_text[rng.gen_range(0..id_text.len())]
            } else {
                &ood_centers[rng.gen_range(0..ood_centers.len())]
            };
            perturb(&mut rng, center, spec.concentration)
        })
        .collect();

    Ok(SynthDataset {
        id_text,
        ood_centers,
        stream,
        labels,
    })
}

/// `key=value` manifest notes that rescale the CIFAR-100 settings to
/// `num_id_classes`: MCM scores shrink roughly as 1/N, so beta grows as
/// 1/N, and the bank keeps the same share of inserted features.
pub fn scaled_notes(num_id_classes: usize) -> String {
    let n = num_id_classes as f64;
    let beta = crate::config::BETA_CIFAR100 * 100.0 / n;
    let capacity = ((2048.0 * n / 100.0).round() as usize).max(1);
    format!("beta={beta} bank_capacity={capacity}")
}

/// Writes `id_text.emb`, `stream.emb`, `labels.txt` and `manifest.json`
/// into `dir`; returns the manifest path.
pub fn write_dataset(
    dataset: &SynthDataset,
    spec: &SynthSpec,
    dir: impl AsRef<Path>,
    notes: &str,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| TtlError::io(dir, e))?;
    dataio::write_embeddings(dir.join("id_text.emb"), &dataset.id_text)?;
    dataio::write_embeddings(dir.join("stream.emb"), &dataset.stream)?;
    dataio::write_labels(dir.join("labels.txt"), &dataset.labels)?;
    let mut files = BTreeMap::new();
    files.insert(dataio::ROLE_ID_TEXT.to_string(), PathBuf::from("id_text.emb"));
    files.insert(dataio::ROLE_IMAGE_STREAM.to_string(), PathBuf::from("stream.emb"));
    files.insert(dataio::ROLE_EVAL_LABELS.to_string(), PathBuf::from("labels.txt"));
    let manifest = Manifest {
        dataset_name: format!("synth-d{}-n{}-seed{}", spec.dim, spec.num_id_classes, spec.seed),
        dim: spec.dim,
        id_classnames: (0..spec.num_id_classes).map(|i| format!("class_{i}")).collect(),
        files,
        notes: notes.to_string(),
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchored_centers_sit_on_the_anchor() {
        let ds = generate(&SynthSpec {
            ood_max_cosine: 0.6,
            ood_anchor_cosine: Some(0.6),
            ..Default::default()
        })
        .unwrap();
        for o in &ds.ood_centers {
            let best = ds.id_text.iter().map(|c| c.cos(o)).fold(f64::MIN, f64::max);
            assert!((best - 0.6).abs() < 1e-9, "{best}");
        }
    }

    #[test]
    fn domain_spread_pulls_clusters_together() {
        let mean_pair = |ds: &SynthDataset| {
            let c = &ds.ood_centers;
            let mut s = 0.0;
            let mut k = 0.0;
            for i in 0..c.len() {
                for j in i + 1..c.len() {
                    s += c[i].cos(&c[j]);
                    k += 1.0;
                }
            }
            s / k
        };
        let loose = generate(&SynthSpec::default()).unwrap();
        let tight = generate(&SynthSpec::reference()).unwrap();
        assert!(mean_pair(&tight) > 0.6);
        assert!(mean_pair(&loose) < 0.4);
        for o in &tight.ood_centers {
            assert!(tight.id_text.iter().all(|c| c.cos(o) <= 0.5 + 1e-9));
        }
    }

    #[test]
    fn concentration_is_an_angle() {
        let spec = SynthSpec { concentration: 0.3, dim: 256, stream_length: 400, ..Default::default() };
        let ds = generate(&spec).unwrap();
        let mut total = 0.0;
        for (z, &l) in ds.stream.iter().zip(&ds.labels) {
            let centers = if l == 1 { &ds.id_text } else { &ds.ood_centers };
            let c = centers.iter().map(|c| c.cos(z)).fold(f64::MIN, f64::max);
            total += c.clamp(-1.0, 1.0).acos();
        }
        let mean = total / 400.0;
        assert!((mean - 0.3).abs() < 0.02, "{mean}");
    }

    #[test]
    fn scaled_notes_for_ten_classes() {
        assert_eq!(scaled_notes(10), "beta=0.06 bank_capacity=205");
        assert_eq!(scaled_notes(100), "beta=0.006 bank_capacity=2048");
    }

    #[test]
    fn zero_spread_samples_sit_on_centers() {
        let spec = SynthSpec {
            concentration: 0.0,
            stream_length: 200,
            ..Default::default()
        };
        let ds = generate(&spec).unwrap();
        for (z, &l) in ds.stream.iter().zip(&ds.labels) {
            let best = if l == 1 { &ds.id_text } else { &ds.ood_centers }
                .iter()
                .map(|c| z.cos(c))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((best - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn proportional_label_count() {
        let spec = SynthSpec {
            id_fraction: 0.9,
            stream_length: 1000,
            ..Default::default()
        };
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.labels.iter().filter(|&&l| l == 1).count(), 900);
        assert_eq!(ds.stream.len(), 1000);
    }

    #[test]
    fn ood_centers_respect_ceiling() {
        for ceiling in [0.0, 0.3, 0.7] {
            let spec = SynthSpec {
                ood_max_cosine: ceiling,
                stream_length: 10,
                ..Default::default()
            };
            let ds = generate(&spec).unwrap();
            for o in &ds.ood_centers {
                for c in &ds.id_text {
                    assert!(o.cos(c) <= ceiling + 1e-9, "cos {} > {ceiling}", o.cos(c));
                }
            }
        }
    }

    #[test]
    fn vectors_are_unit_norm_and_deterministic() {
        let spec = SynthSpec {
            stream_length: 300,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.stream, b.stream);
        assert_eq!(a.labels, b.labels);
        for z in a.stream.iter().chain(&a.id_text) {
            assert!((norm(z.as_slice()) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn written_files_are_byte_identical_across_runs() {
        let spec = SynthSpec {
            stream_length: 100,
            ..Default::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_dataset(&generate(&spec).unwrap(), &spec, d1.path(), "").unwrap();
        write_dataset(&generate(&spec).unwrap(), &spec, d2.path(), "").unwrap();
        for f in ["id_text.emb", "stream.emb", "labels.txt", "manifest.json"] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate(&SynthSpec { id_fraction: 1.0, ..Default::default() }).is_err());
        assert!(generate(&SynthSpec { id_fraction: 0.0, ..Default::default() }).is_err());
    }
}
