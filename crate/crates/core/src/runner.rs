//! End-to-end runs: resolve configuration, drive the engine over a stream,
//! and (separately from the engine) evaluate against ground truth.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::BankDump;
use crate::config::RunConfig;
use crate::dataio::Manifest;
use crate::engine::{Engine, FlushRecord, Incident, SampleOutcome};
use crate::error::{Result, TtlError};
use crate::metrics::{evaluate, EvalResult};
use crate::vector::Embedding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBlock {
    pub base: EvalResult,
    #[serde(rename = "final")]
    pub final_: EvalResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_ms: f64,
    pub per_sample_us: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportFlags {
    pub no_adaptation_steps: bool,
    pub incomplete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub dataset_name: String,
    pub config: RunConfig,
    pub samples_offered: usize,
    pub samples_processed: usize,
    pub flush_count: usize,
    pub flags: ReportFlags,
    pub metrics: Option<MetricsBlock>,
    pub timing: Timing,
    pub incidents: Vec<Incident>,
    pub flushes: Vec<FlushRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outcomes: Vec<SampleOutcome>,
    pub bank: BankDump,
}

impl StreamReport {
    pub fn base_scores(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.s_base).collect()
    }

    pub fn final_scores(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.s_final).collect()
    }

    /// Ground-truth labels aligned with `outcomes` (rejected samples skipped).
    pub fn aligned_labels(&self, labels: &[u8]) -> Result<Vec<u8>> {
        self.outcomes
            .iter()
            .map(|o| {
                labels.get(o.index).copied().ok_or_else(|| {
                    TtlError::Evaluation(format!("no label for stream index {}", o.index))
                })
            })
            .collect()
    }

    /// Fills the metrics block from ground-truth labels.
    pub fn attach_metrics(&mut self, labels: &[u8]) -> Result<()> {
        let aligned = self.aligned_labels(labels)?;
        self.metrics = Some(MetricsBlock {
            base: evaluate(&self.base_scores(), &aligned)?,
            final_: evaluate(&self.final_scores(), &aligned)?,
        });
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| TtlError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TtlError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Built-in defaults, then `key=value` pairs from the manifest notes, then
/// explicit overrides.
pub fn resolve_config(manifest: &Manifest, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    cfg.apply_notes(&manifest.notes)?;
    for (k, v) in overrides {
        cfg.set(k, v, true)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Seconds since the call; wasm32 has no monotonic clock in std.
#[cfg(not(target_arch = "wasm32"))]
fn stopwatch() -> impl Fn() -> f64 {
    let start = std::time::Instant::now();
    move || start.elapsed().as_secs_f64()
}

#[cfg(target_arch = "wasm32")]
fn stopwatch() -> impl Fn() -> f64 {
    || 0.0
}

fn drive<I>(dataset_name: &str, id: Vec<Embedding>, rows: I, config: &RunConfig) -> Result<StreamReport>
where
    I: IntoIterator<Item = Result<Vec<f32>>>,
{
    let mut engine = Engine::new(id, config.clone())?;
    let elapsed_s = stopwatch();
    let mut outcomes = Vec::new();
    let mut offered = 0;
    let mut incomplete = false;
    let mut io_incident = None;
    for row in rows {
        match row {
            Ok(row) => {
                offered += 1;
                if let Some(o) = engine.process_raw(&row)? {
                    outcomes.push(o);
                }
            }
            Err(e) => {
                log::error!("stream read failed after {offered} samples: {e}");
                incomplete = true;
                io_incident = Some(Incident {
                    index: Some(offered),
                    kind: "stream_io".into(),
                    message: e.to_string(),
                });
                break;
            }
        }
    }
    let elapsed = elapsed_s();
    let mut incidents = engine.incidents().to_vec();
    incidents.extend(io_incident);
    let processed = outcomes.len();
    Ok(StreamReport {
        dataset_name: dataset_name.to_string(),
        config: config.clone(),
        samples_offered: offered,
        samples_processed: processed,
        flush_count: engine.flushes().len(),
        flags: ReportFlags {
            no_adaptation_steps: engine.flushes().is_empty(),
            incomplete,
        },
        metrics: None,
        timing: Timing {
            total_ms: elapsed * 1e3,
            per_sample_us: if processed > 0 { elapsed * 1e6 / processed as f64 } else { 0.0 },
        },
        incidents,
        flushes: engine.flushes().to_vec(),
        outcomes,
        bank: engine.bank().dump(),
    })
}

/// Runs the stream named by a manifest. Labels, when the manifest lists
/// them, are read only after the stream is done and only for metrics.
pub fn run_manifest(manifest: &Manifest, config: &RunConfig) -> Result<StreamReport> {
    let id = manifest.load_id_text()?;
    let stream = manifest.open_stream()?;
    let mut report = drive(&manifest.dataset_name, id, stream, config)?;
    if let Some(labels) = manifest.load_labels()? {
        report.attach_metrics(&labels)?;
    }
    Ok(report)
}

/// Runs an in-memory stream of normalized embeddings.
pub fn run_embeddings(
    dataset_name: &str,
    id: &[Embedding],
    stream: &[Embedding],
    labels: Option<&[u8]>,
    config: &RunConfig,
) -> Result<StreamReport> {
    let rows = stream.iter().map(|z| Ok(z.to_f32()));
    let mut report = drive(dataset_name, id.to_vec(), rows, config)?;
    if let Some(labels) = labels {
        report.attach_metrics(labels)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{EmbeddingFile, ROLE_IMAGE_STREAM};
    use crate::synth::{generate, write_dataset, SynthSpec};

    fn spec() -> SynthSpec {
        SynthSpec {
            dim: 16,
            num_id_classes: 4,
            num_ood_clusters: 2,
            stream_length: 300,
            ..Default::default()
        }
    }

    #[test]
    fn manifest_run_has_metrics_and_bank() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let path = write_dataset(&generate(&s).unwrap(), &s, dir.path(), "").unwrap();
        let m = Manifest::load(&path).unwrap();
        let cfg = RunConfig { batch_size: 32, ..Default::default() };
        let r = run_manifest(&m, &cfg).unwrap();
        assert_eq!(r.samples_processed, 300);
        assert_eq!(r.flush_count, 300 / 32);
        assert!(!r.flags.incomplete && !r.flags.no_adaptation_steps);
        assert!(r.metrics.is_some());
        assert_eq!(r.bank.entries.len(), 4 * (300 / 32));
        let back: StreamReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back.outcomes.len(), 300);
    }

    #[test]
    fn truncated_stream_yields_partial_report() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let path = write_dataset(&generate(&s).unwrap(), &s, dir.path(), "").unwrap();
        let m = Manifest::load(&path).unwrap();
        let stream_path = m.path_for(ROLE_IMAGE_STREAM).unwrap();
        let mut bytes = std::fs::read(&stream_path).unwrap();
        bytes.truncate(bytes.len() - 16 * 4 * 50 - 3);
        std::fs::write(&stream_path, bytes).unwrap();
        assert!(EmbeddingFile::read(&stream_path).is_err());
        let r = run_manifest(&m, &RunConfig::default()).unwrap();
        assert!(r.flags.incomplete);
        assert_eq!(r.samples_processed, 249);
        assert_eq!(r.incidents.last().unwrap().kind, "stream_io");
        assert!(r.metrics.is_some());
    }

    #[test]
    fn missing_files_fail_at_startup() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let path = write_dataset(&generate(&s).unwrap(), &s, dir.path(), "").unwrap();
        std::fs::remove_file(dir.path().join("stream.emb")).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert!(matches!(run_manifest(&m, &RunConfig::default()), Err(TtlError::Io { .. })));
    }

    #[test]
    fn config_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let path = write_dataset(&generate(&s).unwrap(), &s, dir.path(), "beta=0.2 alpha=0.1").unwrap();
        let m = Manifest::load(&path).unwrap();
        let cfg = resolve_config(&m, &[("alpha".into(), "0.9".into())]).unwrap();
        assert_eq!(cfg.beta, 0.2);
        assert_eq!(cfg.alpha, 0.9);
        assert_eq!(cfg.batch_size, 64);
        assert!(resolve_config(&m, &[("bogus".into(), "1".into())]).is_err());
    }
}
