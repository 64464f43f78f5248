//! OOD textual knowledge bank: a capacity-bounded store of snapshotted OOD
//! text features, ranked by how far each sits from every ID feature.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BankStrategy, Calibration};
use crate::dataio::EmbeddingFile;
use crate::error::{Result, TtlError};
use crate::vector::{dot, Embedding};

/// Negated largest cosine to any ID feature; higher means more OOD-like.
pub fn potential_ood_score(t_ood: &Embedding, id_features: &[Embedding]) -> f64 {
    id_features
        .iter()
        .map(|t| -t.cos(t_ood))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub feature: Embedding,
    pub priority: f64,
    pub insert_seq: u64,
}

impl BankEntry {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then(self.insert_seq.cmp(&other.insert_seq))
    }
}

// Heap order is (priority, insert_seq); the smallest key is evicted first.
#[derive(Debug, Clone)]
struct Ranked(BankEntry);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.key_cmp(&other.0)
    }
}

#[derive(Debug, Clone)]
enum Store {
    Priority(BinaryHeap<Reverse<Ranked>>),
    Fifo(VecDeque<BankEntry>),
    /// RAND and SA keep an unordered list.
    List(Vec<BankEntry>),
}

/// Immutable view of the bank's features, row-major.
#[derive(Debug, Clone, Default)]
pub struct BankSnapshot {
    dim: usize,
    features: Arc<[f64]>,
}

impl BankSnapshot {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.features.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim.max(1))
    }

    /// Negated largest cosine between `z` and any stored feature; 0 when empty.
    pub fn calibration_score(&self, z: &Embedding) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        -self
            .rows()
            .map(|t| dot(z.as_slice(), t))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Negated sum of `exp(cos / tau)`; 0 when empty.
    pub fn expsum_score(&self, z: &Embedding, tau: f64) -> f64 {
        -self
            .rows()
            .map(|t| (dot(z.as_slice(), t) / tau).exp())
            .sum::<f64>()
    }

    /// ID share of the exponential mass over ID features and bank entries;
    /// 1 when the bank is empty.
    pub fn idr_score(&self, z: &Embedding, id_features: &[Embedding], tau: f64) -> Result<f64> {
        if id_features.is_empty() {
            return Err(TtlError::Config("IDR calibration needs ID features".into()));
        }
        let id_logits: Vec<f64> = id_features.iter().map(|t| z.cos(t) / tau).collect();
        let bank_logits: Vec<f64> = self.rows().map(|t| dot(z.as_slice(), t) / tau).collect();
        let max = id_logits
            .iter()
            .chain(&bank_logits)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let a: f64 = id_logits.iter().map(|l| (l - max).exp()).sum();
        let b: f64 = bank_logits.iter().map(|l| (l - max).exp()).sum();
        Ok(a / (a + b))
    }

    /// Score of one of the calibration functions. `Fusion` returns the
    /// max-similarity term that gets fused with the base score.
    pub fn calibration_variant(
        &self,
        z: &Embedding,
        id_features: &[Embedding],
        tau: f64,
        variant: Calibration,
    ) -> Result<f64> {
        Ok(match variant {
            Calibration::Fusion | Calibration::MaxSim => self.calibration_score(z),
            Calibration::ExpSum => self.expsum_score(z, tau),
            Calibration::Idr => self.idr_score(z, id_features, tau)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeBank {
    capacity: usize,
    strategy: BankStrategy,
    id_features: Arc<[Embedding]>,
    store: Store,
    next_seq: u64,
    rng: ChaCha8Rng,
    dim: usize,
    /// Built lazily on first read after a modification.
    snapshot: OnceLock<BankSnapshot>,
}

impl KnowledgeBank {
    pub fn new(
        capacity: usize,
        strategy: BankStrategy,
        id_features: Vec<Embedding>,
        seed: u64,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(TtlError::Config("bank capacity must be positive".into()));
        }
        if id_features.is_empty() {
            return Err(TtlError::Config("bank needs ID features to score entries".into()));
        }
        let dim = id_features[0].dim();
        let store = match strategy {
            BankStrategy::Priority => Store::Priority(BinaryHeap::with_capacity(capacity + 1)),
            BankStrategy::Fifo => Store::Fifo(VecDeque::with_capacity(capacity + 1)),
            BankStrategy::Rand | BankStrategy::Sa => Store::List(Vec::new()),
        };
        Ok(Self {
            capacity,
            strategy,
            id_features: id_features.into(),
            store,
            next_seq: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dim,
            snapshot: OnceLock::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn strategy(&self) -> BankStrategy {
        self.strategy
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        match &self.store {
            Store::Priority(h) => h.len(),
            Store::Fifo(q) => q.len(),
            Store::List(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total insertions so far (the next `insert_seq`).
    pub fn inserted(&self) -> u64 {
        self.next_seq
    }

    /// Bytes taken by the stored features at 32-bit precision.
    pub fn storage_bytes(&self) -> usize {
        self.len() * self.dim * std::mem::size_of::<f32>()
    }

    pub fn entries(&self) -> Vec<BankEntry> {
        let mut out: Vec<BankEntry> = match &self.store {
            Store::Priority(h) => h.iter().map(|Reverse(r)| r.0.clone()).collect(),
            Store::Fifo(q) => q.iter().cloned().collect(),
            Store::List(v) => v.clone(),
        };
        out.sort_by_key(|e| e.insert_seq);
        out
    }

    fn push(&mut self, entry: BankEntry) {
        let cap = self.capacity;
        match (&mut self.store, self.strategy) {
            (Store::Priority(heap), _) => {
                if heap.len() < cap {
                    heap.push(Reverse(Ranked(entry)));
                } else if let Some(Reverse(min)) = heap.peek() {
                    // the newcomer carries the largest seq, so equal priority favors it
                    if entry.key_cmp(&min.0) == Ordering::Greater {
                        heap.pop();
                        heap.push(Reverse(Ranked(entry)));
                    }
                }
            }
            (Store::Fifo(q), _) => {
                q.push_back(entry);
                while q.len() > cap {
                    q.pop_front();
                }
            }
            (Store::List(v), BankStrategy::Rand) => {
                if v.len() >= cap {
                    let victim = self.rng.gen_range(0..v.len());
                    v.swap_remove(victim);
                }
                v.push(entry);
            }
            (Store::List(v), _) => v.push(entry),
        }
    }

    /// Snapshots, scores and stores each feature. Readers see the new
    /// contents only once the whole batch is in.
    pub fn insert_batch(&mut self, features: &[Embedding]) -> Result<()> {
        for f in features {
            if f.dim() != self.dim {
                return Err(TtlError::Argument(format!(
                    "bank feature dimension {} != {}",
                    f.dim(),
                    self.dim
                )));
            }
        }
        for f in features {
            let entry = BankEntry {
                feature: f.clone(),
                priority: potential_ood_score(f, &self.id_features),
                insert_seq: self.next_seq,
            };
            self.next_seq += 1;
            self.push(entry);
        }
        self.publish();
        Ok(())
    }

    fn publish(&mut self) {
        self.snapshot = OnceLock::new();
    }

    fn view(&self) -> &BankSnapshot {
        self.snapshot.get_or_init(|| {
            let flat: Vec<f64> = self
                .entries()
                .iter()
                .flat_map(|e| e.feature.as_slice().iter().copied())
                .collect();
            BankSnapshot {
                dim: self.dim,
                features: flat.into(),
            }
        })
    }

    pub fn snapshot(&self) -> BankSnapshot {
        self.view().clone()
    }

    pub fn calibration_score(&self, z: &Embedding) -> f64 {
        self.view().calibration_score(z)
    }

    pub fn calibration_variant(&self, z: &Embedding, tau: f64, variant: Calibration) -> Result<f64> {
        self.view()
            .calibration_variant(z, &self.id_features, tau, variant)
    }

    pub fn dump(&self) -> BankDump {
        BankDump {
            capacity: self.capacity,
            strategy: self.strategy,
            dim: self.dim,
            inserted: self.next_seq,
            entries: self
                .entries()
                .into_iter()
                .map(|e| BankDumpEntry {
                    priority: e.priority,
                    insert_seq: e.insert_seq,
                    feature: e.feature.to_f32(),
                })
                .collect(),
        }
    }

    /// Rebuilds a bank from a dump; entries keep their stored priorities.
    pub fn restore(dump: &BankDump, id_features: Vec<Embedding>, seed: u64) -> Result<Self> {
        let mut bank = Self::new(dump.capacity, dump.strategy, id_features, seed)?;
        if bank.dim != dump.dim {
            return Err(TtlError::Config(format!(
                "dump dimension {} does not match ID features {}",
                dump.dim, bank.dim
            )));
        }
        for e in &dump.entries {
            bank.push(BankEntry {
                feature: Embedding::from_f32(&e.feature)?,
                priority: e.priority,
                insert_seq: e.insert_seq,
            });
        }
        bank.next_seq = dump.inserted;
        bank.publish();
        Ok(bank)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankDumpEntry {
    pub priority: f64,
    pub insert_seq: u64,
    pub feature: Vec<f32>,
}

/// Serializable bank contents, ordered by `insert_seq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankDump {
    pub capacity: usize,
    pub strategy: BankStrategy,
    pub dim: usize,
    pub inserted: u64,
    pub entries: Vec<BankDumpEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    capacity: usize,
    strategy: BankStrategy,
    dim: usize,
    inserted: u64,
    priorities: Vec<f64>,
    insert_seqs: Vec<u64>,
}

impl BankDump {
    /// Writes features as an embedding file and priorities/sequence numbers
    /// as a JSON sidecar, row-aligned.
    pub fn write(&self, features_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<()> {
        let file = EmbeddingFile {
            dim: self.dim,
            rows: self.entries.iter().map(|e| e.feature.clone()).collect(),
        };
        file.write(features_path)?;
        let sidecar = Sidecar {
            capacity: self.capacity,
            strategy: self.strategy,
            dim: self.dim,
            inserted: self.inserted,
            priorities: self.entries.iter().map(|e| e.priority).collect(),
            insert_seqs: self.entries.iter().map(|e| e.insert_seq).collect(),
        };
        let path = sidecar_path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(&sidecar)? + "\n")
            .map_err(|e| TtlError::io(path, e))
    }

    pub fn read(features_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<Self> {
        let file = EmbeddingFile::read(features_path)?;
        let path = sidecar_path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TtlError::io(path, e))?;
        let side: Sidecar = serde_json::from_str(&text)?;
        if side.priorities.len() != file.len() || side.insert_seqs.len() != file.len() {
            return Err(TtlError::Corruption(format!(
                "sidecar lists {} entries but the feature file holds {}",
                side.priorities.len(),
                file.len()
            )));
        }
        if !file.is_empty() && file.dim != side.dim {
            return Err(TtlError::Corruption("sidecar dimension disagrees with feature file".into()));
        }
        Ok(Self {
            capacity: side.capacity,
            strategy: side.strategy,
            dim: side.dim,
            inserted: side.inserted,
            entries: file
                .rows
                .into_iter()
                .zip(side.priorities.into_iter().zip(side.insert_seqs))
                .map(|(feature, (priority, insert_seq))| BankDumpEntry {
                    priority,
                    insert_seq,
                    feature,
                })
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn unit(v: &[f64]) -> Embedding {
        Embedding::normalize(v.to_vec()).unwrap()
    }

    fn e(i: usize, d: usize) -> Embedding {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        unit(&v)
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
        Embedding::normalize((0..d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn potential_score_examples() {
        let ids = vec![e(0, 3), e(1, 3)];
        assert_eq!(potential_ood_score(&e(0, 3), &ids), -1.0);
        assert_eq!(potential_ood_score(&e(2, 3), &ids), 0.0);
        let mk = |c: f64| unit(&[c, (1.0 - c * c).sqrt(), 0.0]);
        let ids = vec![mk(0.8), mk(-0.2), mk(0.3)];
        assert!((potential_ood_score(&e(0, 3), &ids) + 0.8).abs() < 1e-12);
    }

    #[test]
    fn priority_keeps_highest_scores() {
        let ids = vec![e(0, 4)];
        let mut bank = KnowledgeBank::new(2, BankStrategy::Priority, ids, 0).unwrap();
        let feats: Vec<Embedding> = [0.9, 0.1, 0.5, -0.4]
            .iter()
            .map(|&c: &f64| unit(&[c, (1.0 - c * c).sqrt(), 0.0, 0.0]))
            .collect();
        bank.insert_batch(&feats).unwrap();
        let kept: Vec<u64> = bank.entries().iter().map(|e| e.insert_seq).collect();
        // priorities -0.9, -0.1, -0.5, 0.4 → keep seq 1 and 3
        assert_eq!(kept, vec![1, 3]);
    }

    #[test]
    fn under_capacity_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids: Vec<Embedding> = (0..4).map(|_| random_unit(&mut rng, 8)).collect();
        for strategy in [BankStrategy::Priority, BankStrategy::Fifo, BankStrategy::Rand, BankStrategy::Sa] {
            let mut bank = KnowledgeBank::new(2048, strategy, ids.clone(), 3).unwrap();
            for _ in 0..100 {
                let batch: Vec<Embedding> = (0..4).map(|_| random_unit(&mut rng, 8)).collect();
                bank.insert_batch(&batch).unwrap();
            }
            assert_eq!(bank.len(), 400);
        }
    }

    #[test]
    fn equal_priority_newer_wins() {
        let ids = vec![e(0, 3)];
        let mut bank = KnowledgeBank::new(1, BankStrategy::Priority, ids, 0).unwrap();
        bank.insert_batch(&[e(1, 3)]).unwrap();
        bank.insert_batch(&[e(1, 3)]).unwrap();
        let entries = bank.entries();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].insert_seq, 1);
    }

    #[test]
    fn stored_features_are_snapshots() {
        let ids = vec![e(0, 3)];
        let mut bank = KnowledgeBank::new(4, BankStrategy::Sa, ids, 0).unwrap();
        let mut f = vec![e(1, 3)];
        bank.insert_batch(&f).unwrap();
        f[0] = e(2, 3);
        assert_eq!(bank.entries()[0].feature, e(1, 3));
    }

    #[test]
    fn calibration_examples() {
        let ids = vec![e(0, 3)];
        let mut bank = KnowledgeBank::new(8, BankStrategy::Priority, ids.clone(), 0).unwrap();
        let z = e(0, 3);
        assert_eq!(bank.calibration_score(&z), 0.0);
        assert_eq!(bank.calibration_variant(&z, 1.0, Calibration::ExpSum).unwrap(), 0.0);
        assert_eq!(bank.calibration_variant(&z, 1.0, Calibration::Idr).unwrap(), 1.0);

        let mk = |c: f64| unit(&[c, (1.0 - c * c).sqrt(), 0.0]);
        bank.insert_batch(&[mk(0.3), mk(0.7), mk(-0.5)]).unwrap();
        assert!((bank.calibration_score(&z) + 0.7).abs() < 1e-12);
        bank.insert_batch(&[z.clone()]).unwrap();
        assert!((bank.calibration_score(&z) + 1.0).abs() < 1e-12);

        let mut single = KnowledgeBank::new(8, BankStrategy::Sa, ids, 0).unwrap();
        single.insert_batch(&[e(1, 3)]).unwrap();
        assert!((single.calibration_variant(&z, 1.0, Calibration::ExpSum).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn idr_is_half_when_symmetric() {
        // z orthogonal to every ID feature and every bank entry, |bank| = N
        let ids = vec![e(0, 4), e(1, 4)];
        let mut bank = KnowledgeBank::new(8, BankStrategy::Sa, ids, 0).unwrap();
        bank.insert_batch(&[e(2, 4), e(2, 4)]).unwrap();
        let z = e(3, 4);
        assert!((bank.calibration_variant(&z, 1.0, Calibration::Idr).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn closer_entry_never_raises_calibration_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ids = vec![random_unit(&mut rng, 6)];
        for _ in 0..50 {
            let z = random_unit(&mut rng, 6);
            let others: Vec<Embedding> = (0..5).map(|_| random_unit(&mut rng, 6)).collect();
            let far = random_unit(&mut rng, 6);
            let blend: Vec<f64> = far.as_slice().iter().zip(z.as_slice()).map(|(a, b)| a + b).collect();
            let near = Embedding::normalize(blend).unwrap();
            assert!(near.cos(&z) >= far.cos(&z) - 1e-12);
            let mut a = KnowledgeBank::new(8, BankStrategy::Sa, ids.clone(), 0).unwrap();
            let mut b = a.clone();
            a.insert_batch(&[others.clone(), vec![far]].concat()).unwrap();
            b.insert_batch(&[others, vec![near]].concat()).unwrap();
            assert!(b.calibration_score(&z) <= a.calibration_score(&z) + 1e-12);
        }
    }

    #[test]
    fn storage_matches_four_megabytes_at_full_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids: Vec<Embedding> = (0..2).map(|_| random_unit(&mut rng, 512)).collect();
        let mut bank = KnowledgeBank::new(2048, BankStrategy::Priority, ids, 0).unwrap();
        for _ in 0..300 {
            let batch: Vec<Embedding> = (0..8).map(|_| random_unit(&mut rng, 512)).collect();
            bank.insert_batch(&batch).unwrap();
        }
        assert_eq!(bank.len(), 2048);
        assert_eq!(bank.storage_bytes(), 4 * 1024 * 1024);
    }

    #[test]
    fn dump_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ids: Vec<Embedding> = (0..3).map(|_| random_unit(&mut rng, 5)).collect();
        let mut bank = KnowledgeBank::new(6, BankStrategy::Priority, ids.clone(), 0).unwrap();
        for _ in 0..5 {
            let batch: Vec<Embedding> = (0..3).map(|_| random_unit(&mut rng, 5)).collect();
            bank.insert_batch(&batch).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let (fp, sp) = (dir.path().join("bank.emb"), dir.path().join("bank.json"));
        let dump = bank.dump();
        dump.write(&fp, &sp).unwrap();
        let back = BankDump::read(&fp, &sp).unwrap();
        assert_eq!(back, dump);
        let restored = KnowledgeBank::restore(&back, ids, 0).unwrap();
        assert_eq!(restored.len(), bank.len());
        assert_eq!(restored.inserted(), bank.inserted());
        let z = random_unit(&mut rng, 5);
        assert!((restored.calibration_score(&z) - bank.calibration_score(&z)).abs() < 1e-6);
    }
}
