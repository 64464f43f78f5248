//! Browser bindings: a synthetic stream run, the threshold objective curve
//! and a fusion-weight sweep. Every export takes and returns JSON strings.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use ttl_core::detector::{ThresholdResult, ThresholdTracker};
use ttl_core::metrics::{density_report, evaluate, EvalResult};
use ttl_core::runner::{run_embeddings, StreamReport};
use ttl_core::synth::{generate, SynthSpec};
use ttl_core::RunConfig;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoParams {
    pub concentration: f64,
    pub ood_anchor_cosine: Option<f64>,
    pub ood_domain_spread: Option<f64>,
    pub id_fraction: f64,
    pub length: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub bank_capacity: usize,
    pub bank_strategy: String,
    pub loss: String,
    pub bins: usize,
}

impl Default for DemoParams {
    fn default() -> Self {
        let s = SynthSpec::reference();
        Self {
            concentration: s.concentration,
            ood_anchor_cosine: s.ood_anchor_cosine,
            ood_domain_spread: s.ood_domain_spread,
            id_fraction: s.id_fraction,
            length: 4000,
            seed: s.seed,
            alpha: 0.5,
            beta: 0.06,
            bank_capacity: 205,
            bank_strategy: "priority".into(),
            loss: "omb".into(),
            bins: 40,
        }
    }
}

impl DemoParams {
    fn spec(&self) -> SynthSpec {
        SynthSpec {
            concentration: self.concentration,
            ood_max_cosine: self.ood_anchor_cosine.unwrap_or(0.5).max(0.5),
            ood_anchor_cosine: self.ood_anchor_cosine,
            ood_domain_spread: self.ood_domain_spread,
            id_fraction: self.id_fraction,
            stream_length: self.length,
            seed: self.seed,
            ..SynthSpec::reference()
        }
    }

    fn config(&self) -> Result<RunConfig, String> {
        let mut cfg = RunConfig {
            alpha: self.alpha,
            beta: self.beta,
            bank_capacity: self.bank_capacity,
            ..Default::default()
        };
        cfg.set("bank_strategy", &self.bank_strategy, true).map_err(err)?;
        cfg.set("loss", &self.loss, true).map_err(err)?;
        cfg.validate().map_err(err)?;
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub id: Vec<f64>,
    pub ood: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct FlushPoint {
    pub at_sample: usize,
    pub loss: f64,
    pub okp: f64,
}

#[derive(Debug, Serialize)]
pub struct DemoResult {
    pub base: EvalResult,
    #[serde(rename = "final")]
    pub final_: EvalResult,
    pub base_hist: Histogram,
    pub final_hist: Histogram,
    pub flushes: Vec<FlushPoint>,
    /// `(sample index, lambda)` every few samples.
    pub lambda_trace: Vec<(usize, f64)>,
    pub bank_len: usize,
}

#[derive(Debug, Serialize)]
pub struct CurveResult {
    pub threshold: Option<ThresholdResult>,
    pub curve: Vec<(f64, Option<f64>)>,
}

#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub beta: f64,
    pub auroc: f64,
    pub fpr95: f64,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn parse_params(json: &str) -> Result<DemoParams, String> {
    if json.trim().is_empty() {
        return Ok(DemoParams::default());
    }
    serde_json::from_str(json).map_err(err)
}

fn histogram(scores: &[f64], labels: &[u8], bins: usize) -> Result<Histogram, String> {
    let d = density_report(scores, labels, bins).map_err(err)?;
    Ok(Histogram { edges: d.bin_edges(), id: d.id_density, ood: d.ood_density })
}

fn run(p: &DemoParams) -> Result<(StreamReport, Vec<u8>), String> {
    let ds = generate(&p.spec()).map_err(err)?;
    let report = run_embeddings("demo", &ds.id_text, &ds.stream, Some(&ds.labels), &p.config()?)
        .map_err(err)?;
    Ok((report, ds.labels))
}

pub fn stream_demo_json(params: &str) -> Result<String, String> {
    let p = parse_params(params)?;
    let (r, labels) = run(&p)?;
    let labels = r.aligned_labels(&labels).map_err(err)?;
    let metrics = r.metrics.clone().ok_or("no metrics")?;
    let step = (r.outcomes.len() / 400).max(1);
    let out = DemoResult {
        base: metrics.base,
        final_: metrics.final_,
        base_hist: histogram(&r.base_scores(), &labels, p.bins)?,
        final_hist: histogram(&r.final_scores(), &labels, p.bins)?,
        flushes: r
            .flushes
            .iter()
            .map(|f| FlushPoint { at_sample: f.at_sample, loss: f.step.loss, okp: f.step.okp })
            .collect(),
        lambda_trace: r.outcomes.iter().step_by(step).map(|o| (o.index, o.lambda_used)).collect(),
        bank_len: r.bank.entries.len(),
    };
    serde_json::to_string(&out).map_err(err)
}

pub fn threshold_curve_json(scores: &str, grid: usize) -> Result<String, String> {
    let scores: Vec<f64> = serde_json::from_str(scores).map_err(err)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err("scores must be finite numbers".into());
    }
    if grid < 2 {
        return Err("grid must be at least 2".into());
    }
    let tracker = ThresholdTracker::from_scores(&scores, grid);
    let out = CurveResult {
        threshold: tracker.threshold().ok(),
        curve: tracker.objective_curve(),
    };
    serde_json::to_string(&out).map_err(err)
}

/// The fusion weight does not feed back into adaptation, so one run gives
/// the final scores for every beta.
pub fn beta_sweep_json(params: &str, betas: &str) -> Result<String, String> {
    let p = parse_params(params)?;
    let betas: Vec<f64> = serde_json::from_str(betas).map_err(err)?;
    let (r, labels) = run(&DemoParams { beta: 0.0, ..p })?;
    let labels = r.aligned_labels(&labels).map_err(err)?;
    let rows = betas
        .iter()
        .map(|&beta| {
            let scores: Vec<f64> = r.outcomes.iter().map(|o| o.s_base + beta * o.s_cal).collect();
            let e = evaluate(&scores, &labels).map_err(err)?;
            Ok(SweepRow { beta, auroc: e.auroc, fpr95: e.fpr95 })
        })
        .collect::<Result<Vec<_>, String>>()?;
    serde_json::to_string(&rows).map_err(err)
}

#[wasm_bindgen]
pub fn stream_demo(params: &str) -> Result<String, JsValue> {
    stream_demo_json(params).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn threshold_curve(scores: &str, grid: usize) -> Result<String, JsValue> {
    threshold_curve_json(scores, grid).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn beta_sweep(params: &str, betas: &str) -> Result<String, JsValue> {
    beta_sweep_json(params, betas).map_err(|e| JsValue::from_str(&e))
}
