//! Episode storage and subsequence sampling for world-model training.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, RwLock};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use crate::rssm::DomainTag;
use crate::rssm::SequenceBatch;
use crate::tensor::Mat;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("field `{field}` has {got} entries, expected {expected}")]
    LengthMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("store `{0}` has no subsequence of the requested length")]
    EmptyStore(&'static str),
    #[error("store is frozen; appends are not allowed")]
    Frozen,
    #[error("mix ratio {0} outside [0, 1]")]
    BadRatio(f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt store archive: {0}")]
    Corrupt(String),
}

/// One episode. `prev_actions[t]` is the action applied before
/// `observations[t]` (zero at the first step).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    pub prev_actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub tip_targets: Vec<Vec<f64>>,
    pub dones: Vec<bool>,
    pub domain_tag: DomainTag,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        let n = self.len();
        if n == 0 {
            return Err(ReplayError::EmptyTrajectory);
        }
        let check = |field, got| {
            if got == n {
                Ok(())
            } else {
                Err(ReplayError::LengthMismatch { field, expected: n, got })
            }
        };
        check("prev_actions", self.prev_actions.len())?;
        check("rewards", self.rewards.len())?;
        check("tip_targets", self.tip_targets.len())?;
        check("dones", self.dones.len())?;
        let width = |rows: &[Vec<f64>], field| {
            let w = rows[0].len();
            match rows.iter().find(|r| r.len() != w) {
                Some(r) => Err(ReplayError::LengthMismatch {
                    field,
                    expected: w,
                    got: r.len(),
                }),
                None => Ok(w),
            }
        };
        width(&self.observations, "observation width")?;
        width(&self.prev_actions, "action width")?;
        width(&self.tip_targets, "tip width")?;
        Ok(())
    }

    fn dims(&self) -> (usize, usize, usize) {
        (
            self.observations[0].len(),
            self.prev_actions[0].len(),
            self.tip_targets[0].len(),
        )
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        for t in 0..self.len() {
            self.observations[t].iter().for_each(|&v| put(v));
            self.prev_actions[t].iter().for_each(|&v| put(v));
            put(self.rewards[t]);
            self.tip_targets[t].iter().for_each(|&v| put(v));
            put(if self.dones[t] { 1.0 } else { 0.0 });
        }
        out
    }

    fn from_bytes(bytes: &[u8], rec: &EpisodeRecord) -> Result<Self, ReplayError> {
        let row = rec.obs_dim + rec.action_dim + 1 + rec.tip_dim + 1;
        if bytes.len() != row * rec.len * 8 {
            return Err(ReplayError::Corrupt(format!("{} has wrong size", rec.file)));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tr = Trajectory {
            observations: Vec::with_capacity(rec.len),
            prev_actions: Vec::with_capacity(rec.len),
            rewards: Vec::with_capacity(rec.len),
            tip_targets: Vec::with_capacity(rec.len),
            dones: Vec::with_capacity(rec.len),
            domain_tag: rec.domain_tag,
        };
        for r in vals.chunks_exact(row) {
            let (o, rest) = r.split_at(rec.obs_dim);
            let (a, rest) = rest.split_at(rec.action_dim);
            let (rw, rest) = rest.split_at(1);
            let (f, d) = rest.split_at(rec.tip_dim);
            tr.observations.push(o.to_vec());
            tr.prev_actions.push(a.to_vec());
            tr.rewards.push(rw[0]);
            tr.tip_targets.push(f.to_vec());
            tr.dones.push(d[0] != 0.0);
        }
        Ok(tr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EpisodeRecord {
    file: String,
    len: usize,
    domain_tag: DomainTag,
    obs_dim: usize,
    action_dim: usize,
    tip_dim: usize,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoreIndex {
    format_version: u32,
    name: String,
    capacity: Option<usize>,
    frozen: bool,
    episodes: Vec<EpisodeRecord>,
}

/// Append-only episode list with FIFO eviction by whole episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceStore {
    name: &'static str,
    capacity: Option<usize>,
    episodes: VecDeque<Arc<Trajectory>>,
    total_steps: usize,
    frozen: bool,
}

impl SequenceStore {
    /// `capacity` is the maximum number of stored steps; `None` is unbounded.
    pub fn new(name: &'static str, capacity: Option<usize>) -> Self {
        Self {
            name,
            capacity,
            episodes: VecDeque::new(),
            total_steps: 0,
            frozen: false,
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn len_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Trajectory> {
        self.episodes.iter().map(|e| e.as_ref())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Makes the store read-only.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Returns the number of evicted episodes.
    pub fn append_episode(&mut self, trajectory: Trajectory) -> Result<usize, ReplayError> {
        if self.frozen {
            return Err(ReplayError::Frozen);
        }
        trajectory.validate()?;
        self.total_steps += trajectory.len();
        self.episodes.push_back(Arc::new(trajectory));
        let mut evicted = 0;
        if let Some(cap) = self.capacity {
            while self.total_steps > cap && self.episodes.len() > 1 {
                let old = self.episodes.pop_front().unwrap();
                self.total_steps -= old.len();
                evicted += 1;
            }
        }
        Ok(evicted)
    }

    /// Number of valid start offsets for subsequences of length `t`.
    pub fn num_windows(&self, t: usize) -> usize {
        self.episodes.iter().map(|e| (e.len() + 1).saturating_sub(t)).sum()
    }

    /// Uniform draw over valid `(episode, offset)` pairs.
    pub fn sample_window(&self, t: usize, rng: &mut dyn RngCore) -> Result<(usize, usize), ReplayError> {
        let total = self.num_windows(t);
        if total == 0 || t == 0 {
            return Err(ReplayError::EmptyStore(self.name));
        }
        let mut k = rng.random_range(0..total);
        for (i, e) in self.episodes.iter().enumerate() {
            let n = (e.len() + 1).saturating_sub(t);
            if k < n {
                return Ok((i, k));
            }
            k -= n;
        }
        unreachable!("window index within total")
    }

    pub fn episode(&self, i: usize) -> &Trajectory {
        &self.episodes[i]
    }

    /// SHA-256 over all stored episodes.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.episodes {
            h.update([e.domain_tag as u8]);
            h.update(e.to_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<(), ReplayError> {
        std::fs::create_dir_all(dir)?;
        let mut records = Vec::with_capacity(self.episodes.len());
        for (i, e) in self.episodes.iter().enumerate() {
            let bytes = e.to_bytes();
            let file = format!("episode_{i:06}.bin");
            std::fs::File::create(dir.join(&file))?.write_all(&bytes)?;
            let (obs_dim, action_dim, tip_dim) = e.dims();
            records.push(EpisodeRecord {
                file,
                len: e.len(),
                domain_tag: e.domain_tag,
                obs_dim,
                action_dim,
                tip_dim,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let index = StoreIndex {
            format_version: 1,
            name: self.name.to_string(),
            capacity: self.capacity,
            frozen: self.frozen,
            episodes: records,
        };
        let json = serde_json::to_vec_pretty(&index).map_err(|e| ReplayError::Corrupt(e.to_string()))?;
        std::fs::write(dir.join("index.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path, name: &'static str) -> Result<Self, ReplayError> {
        let text = std::fs::read(dir.join("index.json"))?;
        let index: StoreIndex = serde_json::from_slice(&text).map_err(|e| ReplayError::Corrupt(e.to_string()))?;
        let mut store = SequenceStore::new(name, index.capacity);
        for rec in &index.episodes {
            let mut bytes = Vec::new();
            std::fs::File::open(dir.join(&rec.file))?.read_to_end(&mut bytes)?;
            if hex::encode(Sha256::digest(&bytes)) != rec.sha256 {
                return Err(ReplayError::Corrupt(format!("{} checksum mismatch", rec.file)));
            }
            let tr = Trajectory::from_bytes(&bytes, rec)?;
            store.total_steps += tr.len();
            store.episodes.push_back(Arc::new(tr));
        }
        store.frozen = index.frozen;
        Ok(store)
    }
}

/// A store shared between one collector and one trainer. Appends are atomic
/// per episode; readers work on a consistent snapshot.
#[derive(Clone, Debug)]
pub struct SharedStore {
    inner: Arc<RwLock<SequenceStore>>,
}

impl SharedStore {
    pub fn new(store: SequenceStore) -> Self {
        Self {
            inner: Arc::new(RwLock::new(store)),
        }
    }

    pub fn append_episode(&self, trajectory: Trajectory) -> Result<usize, ReplayError> {
        self.inner.write().expect("store lock poisoned").append_episode(trajectory)
    }

    /// Cheap copy: episodes are shared by reference count.
    pub fn snapshot(&self) -> SequenceStore {
        self.inner.read().expect("store lock poisoned").clone()
    }
}

/// Two stores sampled under ratio `ρ` = probability of drawing from sim.
#[derive(Clone, Debug)]
pub struct MixBuffer {
    pub sim: SequenceStore,
    pub real: SequenceStore,
    ratio: f64,
}

impl MixBuffer {
    pub fn new(sim: SequenceStore, real: SequenceStore, ratio: f64) -> Result<Self, ReplayError> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(ReplayError::BadRatio(ratio));
        }
        Ok(Self { sim, real, ratio })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn sample_batch(
        &self,
        batch: usize,
        steps: usize,
        rng: &mut dyn RngCore,
        batch_id: u64,
    ) -> Result<SequenceBatch, ReplayError> {
        let mut picks = Vec::with_capacity(batch);
        for _ in 0..batch {
            let from_sim = if self.ratio >= 1.0 {
                true
            } else if self.ratio <= 0.0 {
                false
            } else {
                rng.random::<f64>() < self.ratio
            };
            let store = if from_sim { &self.sim } else { &self.real };
            let (e, off) = store.sample_window(steps, rng)?;
            picks.push((store.episode(e), off));
        }
        Ok(gather(&picks, steps, batch_id))
    }
}

/// Samples a batch from a single store.
pub fn sample_store(
    store: &SequenceStore,
    batch: usize,
    steps: usize,
    rng: &mut dyn RngCore,
    batch_id: u64,
) -> Result<SequenceBatch, ReplayError> {
    let mut picks = Vec::with_capacity(batch);
    for _ in 0..batch {
        let (e, off) = store.sample_window(steps, rng)?;
        picks.push((store.episode(e), off));
    }
    Ok(gather(&picks, steps, batch_id))
}

fn gather(picks: &[(&Trajectory, usize)], steps: usize, batch_id: u64) -> SequenceBatch {
    let b = picks.len();
    let (od, ad, fd) = picks[0].0.dims();
    let mut out = SequenceBatch {
        observations: Vec::with_capacity(steps),
        prev_actions: Vec::with_capacity(steps),
        rewards: Vec::with_capacity(steps),
        tip_targets: Vec::with_capacity(steps),
        dones: Vec::with_capacity(steps),
        domain_tags: picks.iter().map(|(e, _)| e.domain_tag).collect(),
        batch_id,
    };
    for t in 0..steps {
        let mut o = Mat::zeros(b, od);
        let mut a = Mat::zeros(b, ad);
        let mut r = Mat::zeros(b, 1);
        let mut f = Mat::zeros(b, fd);
        let mut d = Mat::zeros(b, 1);
        for (i, (e, off)) in picks.iter().enumerate() {
            let k = off + t;
            o.row_mut(i).copy_from_slice(&e.observations[k]);
            a.row_mut(i).copy_from_slice(&e.prev_actions[k]);
            r.set(i, 0, e.rewards[k]);
            f.row_mut(i).copy_from_slice(&e.tip_targets[k]);
            d.set(i, 0, if e.dones[k] { 1.0 } else { 0.0 });
        }
        out.observations.push(o);
        out.prev_actions.push(a);
        out.rewards.push(r);
        out.tip_targets.push(f);
        out.dones.push(d);
    }
    out
}
