//! Base OOD scoring (MCM, MaxLogit) and the adaptive variance-minimizing
//! threshold used for pseudo-labels and purification grouping.

use serde::{Deserialize, Serialize};

use crate::config::BaseScorer;
use crate::error::{Result, TtlError};
use crate::vector::Embedding;

/// Relative slack under which two objective values count as tied.
pub const OBJECTIVE_TIE_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseScore {
    pub value: f64,
    pub scorer: BaseScorer,
}

/// Maximum softmax probability over `cos(z, t_c) / tau`.
pub fn mcm_score(z: &Embedding, id_texts: &[Embedding], tau: f64) -> Result<BaseScore> {
    if id_texts.len() < 2 {
        return Err(TtlError::Config(format!(
            "MCM needs at least 2 ID classes, got {}",
            id_texts.len()
        )));
    }
    let cos: Vec<f64> = id_texts.iter().map(|t| z.cos(t)).collect();
    let max = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // max softmax = 1 / sum_c exp((cos_c - max) / tau)
    let denom: f64 = cos.iter().map(|c| ((c - max) / tau).exp()).sum();
    Ok(BaseScore {
        value: 1.0 / denom,
        scorer: BaseScorer::Mcm,
    })
}

/// Raw maximum cosine to any ID text feature.
pub fn maxlogit_score(z: &Embedding, id_texts: &[Embedding]) -> Result<BaseScore> {
    if id_texts.is_empty() {
        return Err(TtlError::Config("MaxLogit needs at least one ID class".into()));
    }
    let value = id_texts
        .iter()
        .map(|t| z.cos(t))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(BaseScore {
        value,
        scorer: BaseScorer::MaxLogit,
    })
}

pub fn base_score(scorer: BaseScorer, z: &Embedding, id_texts: &[Embedding], tau: f64) -> Result<BaseScore> {
    match scorer {
        BaseScorer::Mcm => mcm_score(z, id_texts, tau),
        BaseScorer::MaxLogit => maxlogit_score(z, id_texts),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Ood = 0,
    Id = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

/// ID iff `score >= lambda`.
pub fn pseudo_label(score: f64, lambda: f64) -> Label {
    if score >= lambda {
        Label::Id
    } else {
        Label::Ood
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub lambda: f64,
    pub grid_lo: f64,
    pub grid_hi: f64,
    /// Sum of the two within-side variances at `lambda`.
    pub objective: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub mu_id: f64,
    pub mu_ood: f64,
}

/// Candidate `k` of a `grid`-segment split of `[lo, hi]`.
#[inline]
pub fn grid_point(lo: f64, hi: f64, k: usize, grid: usize) -> f64 {
    lo + (hi - lo) * (k as f64) / (grid as f64)
}

#[derive(Debug, Clone, Copy, Default)]
struct Cell {
    count: usize,
    sum: f64,
    sum_sq: f64,
}

/// Incremental variance-minimizing threshold over a growing (or windowed)
/// score population.
///
/// Candidates are the interior grid points `k = 1..grid-1` of
/// `[min, max]`. Scores are bucketed by how many candidates lie strictly
/// below them, so a new score inside the current range costs `O(1)` to
/// absorb and the search costs `O(grid)`. A new extreme shifts the grid and
/// triggers an `O(n)` rebuild.
#[derive(Debug, Clone)]
pub struct ThresholdTracker {
    grid: usize,
    window: Option<usize>,
    scores: std::collections::VecDeque<f64>,
    lo: f64,
    hi: f64,
    cells: Vec<Cell>,
    rebuilds: usize,
}

impl ThresholdTracker {
    pub fn new(grid: usize) -> Self {
        Self::with_window(grid, None)
    }

    pub fn with_window(grid: usize, window: Option<usize>) -> Self {
        assert!(grid >= 2, "threshold grid needs at least 2 segments");
        Self {
            grid,
            window,
            scores: Default::default(),
            lo: f64::INFINITY,
            hi: f64::NEG_INFINITY,
            cells: vec![Cell::default(); grid],
            rebuilds: 0,
        }
    }

    pub fn from_scores(scores: &[f64], grid: usize) -> Self {
        let mut t = Self::new(grid);
        t.scores.extend(scores.iter().copied());
        t.rebuild();
        t
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Number of full rebuilds performed so far.
    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    pub fn min(&self) -> f64 {
        self.lo
    }

    pub fn max(&self) -> f64 {
        self.hi
    }

    /// Number of interior candidates strictly below `s`.
    fn cell_of(&self, s: f64) -> usize {
        if self.hi <= self.lo {
            return 0;
        }
        let g = self.grid;
        let est = ((s - self.lo) / (self.hi - self.lo) * g as f64).floor();
        let mut k = if est.is_finite() { est.clamp(0.0, (g - 1) as f64) as usize } else { 0 };
        // fix the estimate against the exact candidate values
        while k > 0 && grid_point(self.lo, self.hi, k, g) >= s {
            k -= 1;
        }
        while k < g - 1 && grid_point(self.lo, self.hi, k + 1, g) < s {
            k += 1;
        }
        k
    }

    fn add_to_cell(&mut self, s: f64) {
        let k = self.cell_of(s);
        let v = s - self.lo;
        let c = &mut self.cells[k];
        c.count += 1;
        c.sum += v;
        c.sum_sq += v * v;
    }

    fn rebuild(&mut self) {
        self.rebuilds += 1;
        self.lo = self.scores.iter().copied().fold(f64::INFINITY, f64::min);
        self.hi = self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.cells.iter_mut().for_each(|c| *c = Cell::default());
        let scores: Vec<f64> = self.scores.iter().copied().collect();
        for s in scores {
            self.add_to_cell(s);
        }
    }

    pub fn push(&mut self, score: f64) {
        debug_assert!(score.is_finite());
        self.scores.push_back(score);
        let mut needs_rebuild = score < self.lo || score > self.hi;
        if let Some(w) = self.window {
            if self.scores.len() > w {
                let old = self.scores.pop_front().unwrap();
                if old <= self.lo || old >= self.hi {
                    needs_rebuild = true;
                } else if !needs_rebuild {
                    let k = self.cell_of(old);
                    let v = old - self.lo;
                    let c = &mut self.cells[k];
                    c.count -= 1;
                    c.sum -= v;
                    c.sum_sq -= v * v;
                }
            }
        }
        if needs_rebuild {
            self.rebuild();
        } else {
            self.add_to_cell(score);
        }
    }

    /// Grid search for the variance-minimizing split.
    ///
    /// Fails when fewer than two distinct scores are present.
    pub fn threshold(&self) -> Result<ThresholdResult> {
        if self.scores.len() < 2 || !(self.hi > self.lo) {
            return Err(TtlError::Degenerate(
                "threshold needs at least two distinct scores".into(),
            ));
        }
        let total = self.cells.iter().fold(Cell::default(), |a, c| Cell {
            count: a.count + c.count,
            sum: a.sum + c.sum,
            sum_sq: a.sum_sq + c.sum_sq,
        });
        let mut below = Cell::default();
        let mut best: Option<ThresholdResult> = None;
        for k in 1..self.grid {
            let c = self.cells[k - 1];
            below.count += c.count;
            below.sum += c.sum;
            below.sum_sq += c.sum_sq;
            let n_ood = below.count;
            let n_id = total.count - n_ood;
            if n_ood == 0 || n_id == 0 {
                continue;
            }
            let above_sum = total.sum - below.sum;
            let above_sq = total.sum_sq - below.sum_sq;
            let mean_ood = below.sum / n_ood as f64;
            let mean_id = above_sum / n_id as f64;
            let var_ood = (below.sum_sq / n_ood as f64 - mean_ood * mean_ood).max(0.0);
            let var_id = (above_sq / n_id as f64 - mean_id * mean_id).max(0.0);
            let objective = var_id + var_ood;
            let better = match &best {
                None => true,
                Some(b) => objective < b.objective - OBJECTIVE_TIE_RTOL * b.objective,
            };
            if better {
                best = Some(ThresholdResult {
                    lambda: grid_point(self.lo, self.hi, k, self.grid),
                    grid_lo: self.lo,
                    grid_hi: self.hi,
                    objective,
                    n_id,
                    n_ood,
                    mu_id: self.lo + mean_id,
                    mu_ood: self.lo + mean_ood,
                });
            }
        }
        best.ok_or_else(|| TtlError::Degenerate("no candidate split both sides".into()))
    }

    /// Objective at every interior candidate (`None` where a side is empty).
    pub fn objective_curve(&self) -> Vec<(f64, Option<f64>)> {
        if self.scores.len() < 2 || !(self.hi > self.lo) {
            return Vec::new();
        }
        let sorted: Vec<f64> = {
            let mut v: Vec<f64> = self.scores.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            v
        };
        (1..self.grid)
            .map(|k| {
                let lambda = grid_point(self.lo, self.hi, k, self.grid);
                let split = sorted.partition_point(|&s| s <= lambda);
                let (low, high) = sorted.split_at(split);
                let obj = if low.is_empty() || high.is_empty() {
                    None
                } else {
                    Some(variance(low) + variance(high))
                };
                (lambda, obj)
            })
            .collect()
    }
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

/// Variance-minimizing threshold over a score snapshot.
pub fn adaptive_threshold(scores: &[f64], grid: usize) -> Result<ThresholdResult> {
    if grid < 2 {
        return Err(TtlError::Config("threshold grid needs at least 2 segments".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(TtlError::Argument("non-finite score".into()));
    }
    ThresholdTracker::from_scores(scores, grid).threshold()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Embedding {
        Embedding::normalize(v.to_vec()).unwrap()
    }

    /// Direct evaluation of every interior candidate, two-pass variances.
    fn brute_force(scores: &[f64], grid: usize) -> Option<(f64, f64)> {
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut best: Option<(f64, f64)> = None;
        for k in 1..grid {
            let lambda = grid_point(lo, hi, k, grid);
            let above: Vec<f64> = scores.iter().copied().filter(|&s| s > lambda).collect();
            let below: Vec<f64> = scores.iter().copied().filter(|&s| s <= lambda).collect();
            if above.is_empty() || below.is_empty() {
                continue;
            }
            let obj = variance(&above) + variance(&below);
            if best.map_or(true, |(_, b)| obj < b - OBJECTIVE_TIE_RTOL * b) {
                best = Some((lambda, obj));
            }
        }
        best
    }

    #[test]
    fn mcm_examples() {
        let t = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let s = mcm_score(&unit(&[1.0, 0.0]), &t, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((s.value - e / (e + 1.0)).abs() < 1e-12);

        let t4: Vec<Embedding> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 5];
                v[i] = 1.0;
                unit(&v)
            })
            .collect();
        let z = unit(&[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((mcm_score(&z, &t4, 1.0).unwrap().value - 0.25).abs() < 1e-15);

        let z = unit(&[1.0, 0.2, 0.0, 0.0, 0.0]);
        assert!(mcm_score(&z, &t4, 1e-3).unwrap().value > 0.999);
    }

    #[test]
    fn mcm_needs_two_classes() {
        let t = vec![unit(&[1.0, 0.0])];
        assert!(matches!(mcm_score(&t[0], &t, 1.0), Err(TtlError::Config(_))));
    }

    #[test]
    fn maxlogit_examples() {
        let t = vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0])];
        assert!((maxlogit_score(&t[0], &t).unwrap().value - 1.0).abs() < 1e-15);
        let z = unit(&[0.0, 0.0, 1.0]);
        assert_eq!(maxlogit_score(&z, &t).unwrap().value, 0.0);
        assert!(maxlogit_score(&z, &[]).is_err());
    }

    #[test]
    fn maxlogit_picks_max_cosine() {
        // id texts chosen so cosines with e1 are 0.2, 0.9, -0.3
        let mk = |c: f64| unit(&[c, (1.0 - c * c).sqrt(), 0.0]);
        let t = vec![mk(0.2), mk(0.9), mk(-0.3)];
        let z = unit(&[1.0, 0.0, 0.0]);
        assert!((maxlogit_score(&z, &t).unwrap().value - 0.9).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_boundary_is_id() {
        assert_eq!(pseudo_label(0.4, 0.4), Label::Id);
        assert_eq!(pseudo_label(0.4 - 1e-12, 0.4), Label::Ood);
    }

    #[test]
    fn threshold_two_point_masses() {
        let r = adaptive_threshold(&[0.0, 0.0, 1.0, 1.0], 100).unwrap();
        assert_eq!(r.lambda, 0.01);
        assert_eq!((r.n_id, r.n_ood), (2, 2));
        assert_eq!(r.objective, 0.0);
        assert_eq!((r.mu_id, r.mu_ood), (1.0, 0.0));
        assert_eq!((r.grid_lo, r.grid_hi), (0.0, 1.0));
    }

    #[test]
    fn threshold_degenerate() {
        assert!(matches!(
            adaptive_threshold(&[1.0; 4], 100),
            Err(TtlError::Degenerate(_))
        ));
        assert!(adaptive_threshold(&[0.5], 100).is_err());
    }

    #[test]
    fn threshold_separates_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores: Vec<f64> = (0..1000)
            .map(|i| {
                let m = if i % 2 == 0 { 0.2 } else { 0.8 };
                m + 0.02 * rng.sample::<f64, _>(rand_distr::StandardNormal)
            })
            .collect();
        let r = adaptive_threshold(&scores, 100).unwrap();
        // every grid point inside the gap yields the same partition; the
        // smallest one wins the tie
        let low_max = scores.iter().step_by(2).copied().fold(f64::NEG_INFINITY, f64::max);
        let high_min = scores.iter().skip(1).step_by(2).copied().fold(f64::INFINITY, f64::min);
        assert!(r.lambda >= low_max && r.lambda < high_min, "lambda {}", r.lambda);
        assert!(r.lambda - low_max < (r.grid_hi - r.grid_lo) / 100.0);
        assert_eq!((r.n_id, r.n_ood), (500, 500));
        let (bl, bo) = brute_force(&scores, 100).unwrap();
        assert_eq!(r.lambda, bl);
        assert!((r.objective - bo).abs() < 1e-12);
    }

    #[test]
    fn tracker_matches_snapshot_under_streaming_and_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = ThresholdTracker::new(50);
        let mut w = ThresholdTracker::with_window(50, Some(40));
        let mut seen = Vec::new();
        for _ in 0..400 {
            let s: f64 = rng.gen();
            seen.push(s);
            t.push(s);
            w.push(s);
            if seen.len() >= 2 {
                let snap = adaptive_threshold(&seen, 50).unwrap();
                let got = t.threshold().unwrap();
                assert_eq!(got.lambda, snap.lambda);
                assert!((got.objective - snap.objective).abs() < 1e-12);
                let tail = &seen[seen.len().saturating_sub(40)..];
                let (bl, _) = brute_force(tail, 50).unwrap();
                assert_eq!(w.threshold().unwrap().lambda, bl);
            }
        }
        assert!(t.rebuilds() < 40, "too many rebuilds: {}", t.rebuilds());
    }

    #[test]
    fn objective_curve_minimum_matches_threshold() {
        let scores = [0.1, 0.15, 0.2, 0.7, 0.75, 0.9];
        let r = adaptive_threshold(&scores, 20).unwrap();
        let curve = ThresholdTracker::from_scores(&scores, 20).objective_curve();
        assert_eq!(curve.len(), 19);
        let (lam, obj) = curve
            .iter()
            .filter_map(|(l, o)| o.map(|o| (*l, o)))
            .fold((f64::NAN, f64::INFINITY), |a, b| if b.1 < a.1 - 1e-12 { b } else { a });
        assert_eq!(lam, r.lambda);
        assert!((obj - r.objective).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn threshold_permutation_invariant(
            mut scores in proptest::collection::vec(-3.0f64..3.0, 2..60),
            seed in any::<u64>(),
        ) {
            prop_assume!(scores.iter().any(|&s| s != scores[0]));
            let a = adaptive_threshold(&scores, 100).unwrap();
            use rand::seq::SliceRandom;
            scores.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = adaptive_threshold(&scores, 100).unwrap();
            prop_assert_eq!(a.lambda, b.lambda);
            prop_assert_eq!((a.n_id, a.n_ood), (b.n_id, b.n_ood));
        }

        #[test]
        fn threshold_partition_affine_invariant(
            scores in proptest::collection::vec(0.0f64..1.0, 2..60),
            a in 0.5f64..4.0,
            b in -2.0f64..2.0,
        ) {
            prop_assume!(scores.iter().any(|&s| s != scores[0]));
            let r1 = adaptive_threshold(&scores, 100).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            let r2 = adaptive_threshold(&mapped, 100).unwrap();
            let p1: Vec<bool> = scores.iter().map(|&s| s > r1.lambda).collect();
            let p2: Vec<bool> = mapped.iter().map(|&s| s > r2.lambda).collect();
            prop_assert_eq!(p1, p2);
        }

        #[test]
        fn mcm_scale_invariant(
            v in proptest::collection::vec(-1.0f64..1.0, 8),
            scale in 0.01f64..100.0,
        ) {
            prop_assume!(crate::vector::norm(&v) > 1e-3);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let texts: Vec<Embedding> = (0..5)
                .map(|_| Embedding::normalize((0..8).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap())
                .collect();
            let z1 = Embedding::normalize(v.clone()).unwrap();
            let z2 = Embedding::normalize(v.iter().map(|x| x * scale).collect()).unwrap();
            let s1 = mcm_score(&z1, &texts, 1.0).unwrap().value;
            let s2 = mcm_score(&z2, &texts, 1.0).unwrap().value;
            prop_assert!((s1 - s2).abs() < 1e-12);
            prop_assert!(s1 > 1.0 / 5.0 - 1e-12 && s1 <= 1.0);
        }
    }
}
