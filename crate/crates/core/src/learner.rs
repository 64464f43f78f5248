//! Online learning of the OOD text features.
//!
//! The learnable parameters live behind a [`FeatureAdapter`]: something
//! that maps a flat parameter vector to `N` unit-norm OOD features and
//! pulls feature-space gradients back to parameter space. The built-in
//! [`NormalizedVectors`] adapter treats each feature as a free vector that
//! is normalized on read.

use serde::{Deserialize, Serialize};

use crate::config::{AdamWParams, LossKind};
use crate::detector::{adaptive_threshold, Label};
use crate::error::{Result, TtlError};
use crate::vector::{dot, norm, Embedding};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Parameters → features map with a gradient pullback.
pub trait FeatureAdapter: Send + Sync {
    fn num_features(&self) -> usize;
    fn dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// Current unit-norm features, `num_features` of them.
    fn encode(&self) -> Vec<Embedding>;
    /// Maps `dL/dfeatures` (row-major `N x d`) to `dL/dparams`.
    fn pullback(&self, feature_grads: &[f64]) -> Vec<f64>;
    fn box_clone(&self) -> Box<dyn FeatureAdapter>;
}

/// Free vectors `w_k`, features `t_k = w_k / |w_k|`.
#[derive(Debug, Clone)]
pub struct NormalizedVectors {
    dim: usize,
    params: Vec<f64>,
}

impl NormalizedVectors {
    pub fn from_features(features: &[Embedding]) -> Self {
        let dim = features.first().map_or(0, Embedding::dim);
        Self {
            dim,
            params: features.iter().flat_map(|f| f.as_slice().iter().copied()).collect(),
        }
    }
}

impl FeatureAdapter for NormalizedVectors {
    fn num_features(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.params.len() / self.dim
        }
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn encode(&self) -> Vec<Embedding> {
        self.params
            .chunks_exact(self.dim)
            .map(|w| {
                let n = norm(w);
                Embedding::from_unit_unchecked(w.iter().map(|x| x / n).collect())
            })
            .collect()
    }

    // d t / d w = (I - t t^T) / |w|
    fn pullback(&self, feature_grads: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.params.len());
        for (w, g) in self.params.chunks_exact(self.dim).zip(feature_grads.chunks_exact(self.dim)) {
            let n = norm(w);
            let tg = dot(w, g) / n;
            out.extend(w.iter().zip(g).map(|(wi, gi)| (gi - tg * wi / n) / n));
        }
        out
    }

    fn box_clone(&self) -> Box<dyn FeatureAdapter> {
        Box::new(self.clone())
    }
}

/// Frozen ID text features plus learnable OOD text features.
pub struct TextFeatureSet {
    id: Vec<Embedding>,
    adapter: Box<dyn FeatureAdapter>,
    ood: Vec<Embedding>,
}

impl Clone for TextFeatureSet {
    fn clone(&self) -> Self {
        Self {
            id: self.id.clone(),
            adapter: self.adapter.box_clone(),
            ood: self.ood.clone(),
        }
    }
}

impl std::fmt::Debug for TextFeatureSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TextFeatureSet")
            .field("n", &self.id.len())
            .field("dim", &self.dim())
            .finish()
    }
}

impl TextFeatureSet {
    /// OOD features start as copies of the ID features.
    pub fn new(id: Vec<Embedding>) -> Result<Self> {
        let adapter = NormalizedVectors::from_features(&id);
        let mut set = Self::with_adapter(id, Box::new(adapter))?;
        // exact copies, not re-normalized ones
        set.ood = set.id.clone();
        Ok(set)
    }

    pub fn with_adapter(id: Vec<Embedding>, adapter: Box<dyn FeatureAdapter>) -> Result<Self> {
        if id.is_empty() {
            return Err(TtlError::Config("no ID text features".into()));
        }
        let d = id[0].dim();
        if id.iter().any(|e| e.dim() != d) {
            return Err(TtlError::Config("ID text features have mixed dimensions".into()));
        }
        if adapter.num_features() != id.len() || adapter.dim() != d {
            return Err(TtlError::Config(format!(
                "adapter shape {}x{} does not match {}x{d} ID features",
                adapter.num_features(),
                adapter.dim(),
                id.len()
            )));
        }
        let ood = adapter.encode();
        Ok(Self { id, adapter, ood })
    }

    pub fn num_classes(&self) -> usize {
        self.id.len()
    }

    pub fn dim(&self) -> usize {
        self.id[0].dim()
    }

    pub fn id_features(&self) -> &[Embedding] {
        &self.id
    }

    pub fn ood_features(&self) -> &[Embedding] {
        &self.ood
    }

    pub fn params(&self) -> &[f64] {
        self.adapter.params()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        self.adapter.params_mut().copy_from_slice(params);
        self.refresh();
    }

    /// Mutates the parameters in place, then re-encodes.
    pub fn update_params(&mut self, f: impl FnOnce(&mut [f64])) {
        f(self.adapter.params_mut());
        self.refresh();
    }

    fn refresh(&mut self) {
        self.ood = self.adapter.encode();
    }

    pub(crate) fn pullback(&self, feature_grads: &[f64]) -> Vec<f64> {
        self.adapter.pullback(feature_grads)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuedSample {
    pub z: Embedding,
    pub base_score: f64,
    pub label: Label,
    /// OOD probability against the features current at arrival.
    pub p: f64,
}

pub type PseudoBatch = Vec<QueuedSample>;

struct ProbTerms {
    p: f64,
    /// softmax weight of each OOD feature among the OOD exponents
    ood_weights: Vec<f64>,
}

fn prob_terms(z: &Embedding, feats: &TextFeatureSet, tau: f64) -> ProbTerms {
    let id_logits: Vec<f64> = feats.id.iter().map(|t| z.cos(t) / tau).collect();
    let ood_logits: Vec<f64> = feats.ood.iter().map(|t| z.cos(t) / tau).collect();
    let max = id_logits
        .iter()
        .chain(&ood_logits)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let a: f64 = id_logits.iter().map(|l| (l - max).exp()).sum();
    let ood_exp: Vec<f64> = ood_logits.iter().map(|l| (l - max).exp()).collect();
    let b: f64 = ood_exp.iter().sum();
    ProbTerms {
        p: b / (a + b),
        ood_weights: ood_exp.into_iter().map(|e| e / b).collect(),
    }
}

/// Share of the softmax mass carried by the OOD features.
pub fn ood_probability(z: &Embedding, feats: &TextFeatureSet, tau: f64) -> f64 {
    prob_terms(z, feats, tau).p
}

/// Partition of the pseudo-OOD part of a batch by OOD probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurificationSplit {
    /// Batch indices with `p > theta`.
    pub high: Vec<usize>,
    /// Batch indices with `p <= theta`.
    pub low: Vec<usize>,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub alpha: f64,
    pub tau: f64,
    pub grid: usize,
    pub kind: LossKind,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: 1.0,
            grid: 100,
            kind: LossKind::Omb,
        }
    }
}

/// Per-class sample weights: `(id_weight, ood_weight)`.
fn class_weights(batch: &[QueuedSample], kind: LossKind) -> (f64, f64) {
    let n = batch.len() as f64;
    let n_id = batch.iter().filter(|s| s.label == Label::Id).count() as f64;
    let n_ood = n - n_id;
    match kind {
        // 1 / pi, pi = class count / batch size; absent classes contribute nothing
        LossKind::Omb => (
            if n_id > 0.0 { n / n_id } else { 0.0 },
            if n_ood > 0.0 { n / n_ood } else { 0.0 },
        ),
        LossKind::Ce => (1.0 / n, 1.0 / n),
    }
}

/// `(loss term, dloss/dp)` of one sample's binary log-loss.
fn log_loss_term(label: Label, p: f64) -> (f64, f64) {
    let inside = (PROB_EPS..=1.0 - PROB_EPS).contains(&p);
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    match label {
        Label::Id => (-(1.0 - pc).ln(), if inside { 1.0 / (1.0 - p) } else { 0.0 }),
        Label::Ood => (-pc.ln(), if inside { -1.0 / p } else { 0.0 }),
    }
}

fn weighted_log_loss(batch: &[QueuedSample], probs: &[f64], kind: LossKind) -> f64 {
    let (w_id, w_ood) = class_weights(batch, kind);
    batch
        .iter()
        .zip(probs)
        .map(|(s, &p)| {
            let w = if s.label == Label::Id { w_id } else { w_ood };
            w * log_loss_term(s.label, p).0
        })
        .sum()
}

fn fresh_probs(batch: &[QueuedSample], feats: &TextFeatureSet, tau: f64) -> Vec<f64> {
    batch.iter().map(|s| ood_probability(&s.z, feats, tau)).collect()
}

/// Minority-balanced log-loss over the batch.
pub fn loss_omb(batch: &[QueuedSample], feats: &TextFeatureSet, tau: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(TtlError::Argument("empty batch".into()));
    }
    Ok(weighted_log_loss(batch, &fresh_probs(batch, feats, tau), LossKind::Omb))
}

/// Unweighted (`1/|batch|`) log-loss over the batch.
pub fn loss_ce(batch: &[QueuedSample], feats: &TextFeatureSet, tau: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(TtlError::Argument("empty batch".into()));
    }
    Ok(weighted_log_loss(batch, &fresh_probs(batch, feats, tau), LossKind::Ce))
}

fn split_from_probs(batch: &[QueuedSample], probs: &[f64], grid: usize) -> Option<PurificationSplit> {
    let ood_idx: Vec<usize> = batch
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == Label::Ood)
        .map(|(i, _)| i)
        .collect();
    if ood_idx.len() < 2 {
        return None;
    }
    let ood_p: Vec<f64> = ood_idx.iter().map(|&i| probs[i]).collect();
    let theta = adaptive_threshold(&ood_p, grid).ok()?.lambda;
    let (high, low) = ood_idx.into_iter().partition(|&i| probs[i] > theta);
    Some(PurificationSplit { high, low, theta })
}

/// Splits pseudo-OOD samples into high- and low-confidence groups.
/// `None` when fewer than two pseudo-OOD samples or all share one `p`.
pub fn purification_split(
    batch: &[QueuedSample],
    feats: &TextFeatureSet,
    tau: f64,
    grid: usize,
) -> Option<PurificationSplit> {
    split_from_probs(batch, &fresh_probs(batch, feats, tau), grid)
}

/// Negative gap between the mean `p` of the high and low groups.
pub fn loss_okp(high: &[usize], low: &[usize], probs: &[f64]) -> Result<f64> {
    if high.is_empty() || low.is_empty() {
        return Err(TtlError::Argument("purification groups must be nonempty".into()));
    }
    let mean = |idx: &[usize]| idx.iter().map(|&i| probs[i]).sum::<f64>() / idx.len() as f64;
    Ok(-(mean(high) - mean(low)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub log_loss: f64,
    /// 0 when the purification split is unavailable.
    pub okp: f64,
    pub split: Option<PurificationSplit>,
}

fn split_is_usable(split: Option<&PurificationSplit>) -> Option<&PurificationSplit> {
    split.filter(|s| !s.high.is_empty() && !s.low.is_empty())
}

/// Loss with the purification groups held fixed (as during differentiation).
pub fn total_loss_with_split(
    batch: &[QueuedSample],
    feats: &TextFeatureSet,
    settings: &LossSettings,
    split: Option<&PurificationSplit>,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(TtlError::Argument("empty batch".into()));
    }
    let probs = fresh_probs(batch, feats, settings.tau);
    let log_loss = weighted_log_loss(batch, &probs, settings.kind);
    let okp = match split_is_usable(split) {
        Some(s) => loss_okp(&s.high, &s.low, &probs)?,
        None => 0.0,
    };
    Ok(LossBreakdown {
        total: log_loss + settings.alpha * okp,
        log_loss,
        okp,
        split: split.cloned(),
    })
}

/// Combined objective `log_loss + alpha * okp`, with the split derived
/// from the current probabilities.
pub fn total_loss(
    batch: &[QueuedSample],
    feats: &TextFeatureSet,
    settings: &LossSettings,
) -> Result<LossBreakdown> {
    let split = purification_split(batch, feats, settings.tau, settings.grid);
    total_loss_with_split(batch, feats, settings, split.as_ref())
}

/// Analytic `dL/dparams` with a fixed purification split.
pub fn gradient_with_split(
    batch: &[QueuedSample],
    feats: &TextFeatureSet,
    settings: &LossSettings,
    split: Option<&PurificationSplit>,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(TtlError::Argument("empty batch".into()));
    }
    let n = feats.num_classes();
    let d = feats.dim();
    let tau = settings.tau;
    let terms: Vec<ProbTerms> = batch.iter().map(|s| prob_terms(&s.z, feats, tau)).collect();

    // dL/dp per sample
    let (w_id, w_ood) = class_weights(batch, settings.kind);
    let mut dl_dp: Vec<f64> = batch
        .iter()
        .zip(&terms)
        .map(|(s, t)| {
            let w = if s.label == Label::Id { w_id } else { w_ood };
            w * log_loss_term(s.label, t.p).1
        })
        .collect();
    if let Some(s) = split_is_usable(split) {
        let gh = settings.alpha / s.high.len() as f64;
        let gl = settings.alpha / s.low.len() as f64;
        s.high.iter().for_each(|&i| dl_dp[i] -= gh);
        s.low.iter().for_each(|&i| dl_dp[i] += gl);
    }

    // dp/dcos_k = p (1 - p) w_k / tau ; dcos_k/dt_k = z
    let mut feature_grads = vec![0.0; n * d];
    for ((sample, t), g) in batch.iter().zip(&terms).zip(&dl_dp) {
        if *g == 0.0 {
            continue;
        }
        let common = g * t.p * (1.0 - t.p) / tau;
        let z = sample.z.as_slice();
        for (k, wk) in t.ood_weights.iter().enumerate() {
            let c = common * wk;
            let row = &mut feature_grads[k * d..(k + 1) * d];
            for (r, zi) in row.iter_mut().zip(z) {
                *r += c * zi;
            }
        }
    }
    Ok(feats.pullback(&feature_grads))
}

/// Analytic gradient of [`total_loss`].
pub fn gradient(
    batch: &[QueuedSample],
    feats: &TextFeatureSet,
    settings: &LossSettings,
) -> Result<Vec<f64>> {
    let split = purification_split(batch, feats, settings.tau, settings.grid);
    gradient_with_split(batch, feats, settings, split.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub hyper: AdamWParams,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(num_params: usize, lr: f64, hyper: AdamWParams) -> Self {
        Self {
            lr,
            hyper,
            state: OptimizerState {
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
                step: 0,
            },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<StepOutcome> {
        if params.len() != grads.len() || params.len() != self.state.m.len() {
            return Err(TtlError::Argument(format!(
                "shape mismatch: params {}, grads {}, state {}",
                params.len(),
                grads.len(),
                self.state.m.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            log::warn!("non-finite gradient; optimizer step skipped");
            return Ok(StepOutcome::SkippedNonFinite);
        }
        let AdamWParams { beta1, beta2, eps, weight_decay } = self.hyper;
        let st = &mut self.state;
        st.step += 1;
        let bc1 = 1.0 - beta1.powi(st.step as i32);
        let bc2 = 1.0 - beta2.powi(st.step as i32);
        for i in 0..params.len() {
            params[i] *= 1.0 - self.lr * weight_decay;
            st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * grads[i];
            st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * grads[i] * grads[i];
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(StepOutcome::Applied)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptStep {
    pub loss: f64,
    pub log_loss: f64,
    pub okp: f64,
    pub split_available: bool,
    pub applied: bool,
    pub n_pseudo_id: usize,
    pub n_pseudo_ood: usize,
}

/// Feature set, optimizer and loss settings bundled as one writer.
#[derive(Debug, Clone)]
pub struct Learner {
    pub feats: TextFeatureSet,
    pub optimizer: AdamW,
    pub settings: LossSettings,
}

impl Learner {
    pub fn new(feats: TextFeatureSet, lr: f64, hyper: AdamWParams, settings: LossSettings) -> Self {
        let optimizer = AdamW::new(feats.params().len(), lr, hyper);
        Self {
            feats,
            optimizer,
            settings,
        }
    }

    /// One gradient step on `batch`; features are re-encoded afterwards.
    pub fn adapt(&mut self, batch: &[QueuedSample]) -> Result<AdaptStep> {
        let split = purification_split(batch, &self.feats, self.settings.tau, self.settings.grid);
        let loss = total_loss_with_split(batch, &self.feats, &self.settings, split.as_ref())?;
        let grads = gradient_with_split(batch, &self.feats, &self.settings, split.as_ref())?;
        let optimizer = &mut self.optimizer;
        let mut outcome = Ok(StepOutcome::Applied);
        self.feats.update_params(|p| outcome = optimizer.step(p, &grads));
        let n_pseudo_id = batch.iter().filter(|s| s.label == Label::Id).count();
        Ok(AdaptStep {
            loss: loss.total,
            log_loss: loss.log_loss,
            okp: loss.okp,
            split_available: split_is_usable(split.as_ref()).is_some(),
            applied: outcome? == StepOutcome::Applied,
            n_pseudo_id,
            n_pseudo_ood: batch.len() - n_pseudo_id,
        })
    }
}
