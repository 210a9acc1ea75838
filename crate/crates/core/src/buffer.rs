//! Replay memory of (feature, logit, label) exemplars under a float budget.
//!
//! Raw images are never stored. Insertion follows reservoir sampling
//! (Algorithm R) so after `n` offers every item is retained with probability
//! `capacity / n`; a class-balanced policy is available as an option.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::checkpoint::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_CAPACITY: usize = 200;
pub const MAX_EXEMPLAR_FLOATS: usize = 1024;
pub const BUFFER_MAGIC: &[u8; 4] = b"CIRB";
pub const BUFFER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar<S> {
    pub feature: Vec<S>,
    pub logit: Vec<S>,
    pub label: usize,
    pub task: usize,
}

impl<S: Scalar> Exemplar<S> {
    pub fn float_cost(&self) -> usize {
        self.feature.len() + self.logit.len() + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    Appended,
    Replaced(usize),
    Dropped,
}

#[derive(Clone, Debug)]
pub struct MemoryBuffer<S> {
    capacity: usize,
    exemplars: Vec<Exemplar<S>>,
    seen: u64,
    class_balanced: bool,
    seen_per_class: BTreeMap<usize, u64>,
    rng: ChaCha8Rng,
}

/// A sampled replay batch as dense arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBatch<S> {
    pub features: Array<S>,
    pub logits: Array<S>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> MemoryBuffer<S> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            exemplars: Vec::with_capacity(capacity),
            seen: 0,
            class_balanced: false,
            seen_per_class: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn class_balanced(mut self, on: bool) -> Self {
        self.class_balanced = on;
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    pub fn exemplars(&self) -> &[Exemplar<S>] {
        &self.exemplars
    }

    pub fn stored_floats(&self) -> usize {
        self.exemplars.iter().map(Exemplar::float_cost).sum()
    }

    pub fn insert(&mut self, exemplar: Exemplar<S>) -> Result<InsertOutcome> {
        let cost = exemplar.float_cost();
        if cost > MAX_EXEMPLAR_FLOATS {
            return Err(Error::Invalid(format!(
                "exemplar needs {cost} floats, budget is {MAX_EXEMPLAR_FLOATS}"
            )));
        }
        if let Some(first) = self.exemplars.first() {
            if first.feature.len() != exemplar.feature.len() || first.logit.len() != exemplar.logit.len() {
                return Err(Error::shape(
                    "buffer insert",
                    &[first.feature.len(), first.logit.len()],
                    &[exemplar.feature.len(), exemplar.logit.len()],
                ));
            }
        }
        self.seen += 1;
        *self.seen_per_class.entry(exemplar.label).or_insert(0) += 1;

        if self.capacity == 0 {
            return Ok(InsertOutcome::Dropped);
        }
        if self.exemplars.len() < self.capacity {
            self.exemplars.push(exemplar);
            return Ok(InsertOutcome::Appended);
        }
        let slot = if self.class_balanced {
            self.balanced_slot(exemplar.label)
        } else {
            let j = self.rng.random_range(0..self.seen);
            (j < self.capacity as u64).then_some(j as usize)
        };
        Ok(match slot {
            Some(i) => {
                self.exemplars[i] = exemplar;
                InsertOutcome::Replaced(i)
            }
            None => InsertOutcome::Dropped,
        })
    }

    /// Evicts from the largest class unless the newcomer's class already is
    /// (one of) the largest, in which case reservoir sampling runs within it.
    fn balanced_slot(&mut self, label: usize) -> Option<usize> {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for e in &self.exemplars {
            *counts.entry(e.label).or_insert(0) += 1;
        }
        let largest = counts.values().copied().max().unwrap_or(0);
        let own = counts.get(&label).copied().unwrap_or(0);
        if own < largest {
            let victims: Vec<usize> = counts.iter().filter(|(_, &n)| n == largest).map(|(&c, _)| c).collect();
            let class = victims[self.rng.random_range(0..victims.len())];
            let slots: Vec<usize> = self.slots_of(class);
            Some(slots[self.rng.random_range(0..slots.len())])
        } else {
            let seen_here = self.seen_per_class[&label];
            let j = self.rng.random_range(0..seen_here);
            if j < own as u64 {
                let slots = self.slots_of(label);
                Some(slots[j as usize])
            } else {
                None
            }
        }
    }

    fn slots_of(&self, class: usize) -> Vec<usize> {
        self.exemplars
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// `n` draws: without replacement when `n <= len`, with replacement
    /// otherwise. An empty buffer yields an empty batch.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<&Exemplar<S>> {
        if self.exemplars.is_empty() || n == 0 {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = self.exemplars.len();
        if n <= len {
            index::sample(&mut rng, len, n)
                .into_iter()
                .map(|i| &self.exemplars[i])
                .collect()
        } else {
            (0..n).map(|_| &self.exemplars[rng.random_range(0..len)]).collect()
        }
    }

    pub fn sample_batch(&self, n: usize, seed: u64) -> Result<Option<ReplayBatch<S>>> {
        let picked = self.sample(n, seed);
        if picked.is_empty() {
            return Ok(None);
        }
        let features: Vec<&[S]> = picked.iter().map(|e| e.feature.as_slice()).collect();
        let logits: Vec<&[S]> = picked.iter().map(|e| e.logit.as_slice()).collect();
        Ok(Some(ReplayBatch {
            features: Array::from_rows(&features)?,
            logits: Array::from_rows(&logits)?,
            labels: picked.iter().map(|e| e.label).collect(),
        }))
    }

    /// Serializes contents, counters and sampler position.
    ///
    /// ```text
    /// "CIRB" | u32 version | u32 capacity | u8 class_balanced | u64 seen
    /// u32 n_classes | (u32 class, u64 seen) * n_classes
    /// 32-byte rng seed | u64 rng stream | u64 word_pos_hi | u64 word_pos_lo
    /// u32 count | u32 feature_dim | u32 num_logits
    /// per exemplar: u32 label, u32 task, f64 * feature_dim, f64 * num_logits
    /// ```
    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(BUFFER_MAGIC);
        w.u32(BUFFER_VERSION);
        w.len32(self.capacity);
        w.bytes(&[self.class_balanced as u8]);
        w.u64(self.seen);
        w.len32(self.seen_per_class.len());
        for (&c, &n) in &self.seen_per_class {
            w.len32(c);
            w.u64(n);
        }
        w.bytes(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        let pos = self.rng.get_word_pos();
        w.u64((pos >> 64) as u64);
        w.u64(pos as u64);
        w.len32(self.exemplars.len());
        let (fdim, ldim) = self
            .exemplars
            .first()
            .map_or((0, 0), |e| (e.feature.len(), e.logit.len()));
        w.len32(fdim);
        w.len32(ldim);
        for e in &self.exemplars {
            w.len32(e.label);
            w.len32(e.task);
            for v in e.feature.iter().chain(&e.logit) {
                w.f64(v.as_f64());
            }
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("buffer file", bytes);
        r.magic(BUFFER_MAGIC)?;
        let version = r.u32()?;
        if version != BUFFER_VERSION {
            return r.fail(format!("unsupported version {version}"));
        }
        let capacity = r.usize()?;
        let class_balanced = r.take(1)?[0] != 0;
        let seen = r.u64()?;
        let n_classes = r.usize()?;
        let mut seen_per_class = BTreeMap::new();
        for _ in 0..n_classes {
            let c = r.usize()?;
            let n = r.u64()?;
            seen_per_class.insert(c, n);
        }
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let hi = r.u64()? as u128;
        let lo = r.u64()? as u128;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos((hi << 64) | lo);
        let count = r.usize()?;
        let fdim = r.usize()?;
        let ldim = r.usize()?;
        if count > capacity {
            return r.fail(format!("{count} exemplars exceed capacity {capacity}"));
        }
        if fdim + ldim + 1 > MAX_EXEMPLAR_FLOATS {
            return r.fail("exemplar dimensions exceed the float budget");
        }
        let mut exemplars = Vec::with_capacity(count);
        for _ in 0..count {
            let label = r.usize()?;
            let task = r.usize()?;
            let feature = (0..fdim).map(|_| r.f64().map(S::lit)).collect::<Result<_>>()?;
            let logit = (0..ldim).map(|_| r.f64().map(S::lit)).collect::<Result<_>>()?;
            exemplars.push(Exemplar {
                feature,
                logit,
                label,
                task,
            });
        }
        r.finish()?;
        Ok(Self {
            capacity,
            exemplars,
            seen,
            class_balanced,
            seen_per_class,
            rng,
        })
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
