//! Streaming orchestration: score, pseudo-label, queue, adapt every `B`
//! samples, bank the learned features, calibrate.
//!
//! The engine never sees ground-truth labels; evaluation lives in
//! [`crate::runner`].

use serde::{Deserialize, Serialize};

use crate::bank::KnowledgeBank;
use crate::config::{Calibration, RunConfig};
use crate::detector::{base_score, pseudo_label, Label, ThresholdTracker};
use crate::error::{Result, TtlError};
use crate::learner::{ood_probability, AdaptStep, Learner, LossSettings, QueuedSample, TextFeatureSet};
use crate::vector::Embedding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    /// Position in the input stream.
    pub index: usize,
    pub s_base: f64,
    pub lambda_used: f64,
    pub pseudo_label: Label,
    pub p: f64,
    pub s_cal: f64,
    pub s_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlushRecord {
    /// Accepted-sample count at the time of the flush.
    pub at_sample: usize,
    #[serde(flatten)]
    pub step: AdaptStep,
    pub bank_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub index: Option<usize>,
    pub kind: String,
    pub message: String,
}

pub struct Engine {
    config: RunConfig,
    learner: Learner,
    bank: KnowledgeBank,
    tracker: ThresholdTracker,
    queue: Vec<QueuedSample>,
    samples_seen: usize,
    next_index: usize,
    flushes: Vec<FlushRecord>,
    incidents: Vec<Incident>,
}

impl Engine {
    pub fn new(id_features: Vec<Embedding>, config: RunConfig) -> Result<Self> {
        config.validate()?;
        if id_features.len() < 2 {
            return Err(TtlError::Config(format!(
                "need at least 2 ID classes, got {}",
                id_features.len()
            )));
        }
        let feats = TextFeatureSet::new(id_features.clone())?;
        let settings = LossSettings {
            alpha: config.alpha,
            tau: config.tau,
            grid: config.threshold_grid,
            kind: config.loss,
        };
        let learner = Learner::new(feats, config.learning_rate, config.optimizer, settings);
        let bank = KnowledgeBank::new(config.bank_capacity, config.bank_strategy, id_features, config.seed)?;
        Ok(Self {
            tracker: ThresholdTracker::with_window(config.threshold_grid, config.threshold_window),
            queue: Vec::with_capacity(config.batch_size),
            config,
            learner,
            bank,
            samples_seen: 0,
            next_index: 0,
            flushes: Vec::new(),
            incidents: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.learner.feats.dim()
    }

    pub fn features(&self) -> &TextFeatureSet {
        &self.learner.feats
    }

    pub fn bank(&self) -> &KnowledgeBank {
        &self.bank
    }

    pub fn flushes(&self) -> &[FlushRecord] {
        &self.flushes
    }

    pub fn incidents(&self) -> &[Incident] {
        &self.incidents
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn adaptation_active(&self) -> bool {
        self.config
            .early_stop_after
            .map_or(true, |limit| self.samples_seen <= limit)
    }

    /// Offers one raw stream row. Non-finite or zero rows are rejected with
    /// an incident and `Ok(None)`; a dimension mismatch is fatal.
    pub fn process_raw(&mut self, row: &[f32]) -> Result<Option<SampleOutcome>> {
        if row.len() != self.dim() {
            return Err(TtlError::Config(format!(
                "sample dimension {} does not match feature dimension {}",
                row.len(),
                self.dim()
            )));
        }
        match Embedding::from_f32(row) {
            Ok(z) => self.process_sample(&z).map(Some),
            Err(e) => {
                let index = self.next_index;
                self.next_index += 1;
                log::warn!("sample {index} rejected: {e}");
                self.incidents.push(Incident {
                    index: Some(index),
                    kind: "rejected_sample".into(),
                    message: e.to_string(),
                });
                Ok(None)
            }
        }
    }

    pub fn process_sample(&mut self, z: &Embedding) -> Result<SampleOutcome> {
        if z.dim() != self.dim() {
            return Err(TtlError::Config(format!(
                "sample dimension {} does not match feature dimension {}",
                z.dim(),
                self.dim()
            )));
        }
        let index = self.next_index;
        self.next_index += 1;
        self.samples_seen += 1;
        let cfg = &self.config;
        let id = self.learner.feats.id_features();

        let s_base = base_score(cfg.base, z, id, cfg.tau)?.value;
        self.tracker.push(s_base);
        // a single distinct value so far: threshold at that value (→ ID)
        let lambda = self.tracker.threshold().map_or(s_base, |t| t.lambda);
        let label = pseudo_label(s_base, lambda);
        let p = ood_probability(z, &self.learner.feats, cfg.tau);

        if self.adaptation_active() {
            self.queue.push(QueuedSample {
                z: z.clone(),
                base_score: s_base,
                label,
                p,
            });
            if self.queue.len() == self.config.batch_size {
                self.flush(index)?;
            }
        }

        let tau = self.config.tau;
        let (s_cal, s_final) = match self.config.calibration {
            Calibration::Fusion => {
                let s_cal = self.bank.calibration_score(z);
                (s_cal, s_base + self.config.beta * s_cal)
            }
            variant => {
                let s = self.bank.calibration_variant(z, tau, variant)?;
                (s, s)
            }
        };
        Ok(SampleOutcome {
            index,
            s_base,
            lambda_used: lambda,
            pseudo_label: label,
            p,
            s_cal,
            s_final,
        })
    }

    fn flush(&mut self, index: usize) -> Result<()> {
        let batch = std::mem::take(&mut self.queue);
        let step = self.learner.adapt(&batch)?;
        if !step.applied {
            self.incidents.push(Incident {
                index: Some(index),
                kind: "skipped_step".into(),
                message: "non-finite gradient; optimizer step skipped".into(),
            });
        }
        let feats = self.learner.feats.ood_features().to_vec();
        self.bank.insert_batch(&feats)?;
        self.flushes.push(FlushRecord {
            at_sample: self.samples_seen,
            step,
            bank_len: self.bank.len(),
        });
        self.queue = Vec::with_capacity(self.config.batch_size);
        Ok(())
    }
}
