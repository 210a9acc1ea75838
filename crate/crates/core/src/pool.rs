//! Pool of previous-model snapshots used as distillation teachers and for
//! ensemble inference.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::checkpoint::{load_params, save_params};
use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::scalar::Scalar;

const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "cirlab-pool v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmaCadence {
    PerStep,
    PerExperience,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnsembleMode {
    /// Average softmax probabilities.
    Probabilities,
    /// Average raw logits.
    Logits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub enabled: bool,
    /// Which snapshot joins the current model, counted back from the newest.
    pub snapshot_from_newest: usize,
    pub mode: EnsembleMode,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            snapshot_from_newest: 0,
            mode: EnsembleMode::Probabilities,
        }
    }
}

/// Distillation targets for one unlabeled batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolTargets<S> {
    /// Row `i` comes from the snapshot most confident on sample `i`.
    pub feature_targets: Array<S>,
    /// Logits of every snapshot, oldest first.
    pub logit_batches: Vec<Array<S>>,
    /// Row `i` comes from the same snapshot as `feature_targets` row `i`.
    pub composite_logits: Array<S>,
    pub selected_model_index: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ModelPool<S> {
    snapshots: VecDeque<ModelParams<S>>,
    max_size: usize,
    momentum: S,
}

impl<S: Scalar> ModelPool<S> {
    pub fn new(max_size: usize, momentum: f64) -> Result<Self> {
        if max_size == 0 {
            return Err(Error::Config("pool size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("EMA momentum {momentum} outside [0, 1]")));
        }
        Ok(Self {
            snapshots: VecDeque::with_capacity(max_size + 1),
            max_size,
            momentum: S::lit(momentum),
        })
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn momentum(&self) -> S {
        self.momentum
    }

    /// Oldest first.
    pub fn snapshots(&self) -> impl Iterator<Item = &ModelParams<S>> {
        self.snapshots.iter()
    }

    pub fn newest(&self) -> Option<&ModelParams<S>> {
        self.snapshots.back()
    }

    /// Appends a deep copy, evicting the oldest snapshot beyond capacity.
    pub fn push_snapshot(&mut self, params: &ModelParams<S>) {
        self.snapshots.push_back(params.snapshot());
        while self.snapshots.len() > self.max_size {
            self.snapshots.pop_front();
        }
    }

    /// Moves every snapshot toward `current` by `1 - momentum`.
    pub fn ema_refresh_all(&mut self, current: &ModelParams<S>) -> Result<()> {
        for snap in self.snapshots.iter_mut() {
            snap.ema_blend(current, self.momentum)?;
        }
        Ok(())
    }

    /// Forwards every snapshot on `batch`; `None` for an empty pool.
    pub fn compute_targets(&self, batch: &Array<S>) -> Result<Option<PoolTargets<S>>> {
        if self.snapshots.is_empty() {
            return Ok(None);
        }
        let outputs = self
            .snapshots
            .iter()
            .map(|s| s.forward(batch))
            .collect::<Result<Vec<_>>>()?;
        let confidences: Vec<Vec<S>> = outputs
            .iter()
            .map(|o| {
                let p = o.logits.softmax_rows();
                (0..p.rows())
                    .map(|i| p.row(i).iter().copied().fold(S::zero(), S::max))
                    .collect()
            })
            .collect();

        let rows = batch.rows();
        let mut selected = Vec::with_capacity(rows);
        for i in 0..rows {
            let mut best = 0;
            for (k, conf) in confidences.iter().enumerate() {
                if conf[i] >= confidences[best][i] {
                    best = k;
                }
            }
            selected.push(best);
        }

        let pick = |field: fn(&crate::nn::ForwardOutput<S>) -> &Array<S>| -> Result<Array<S>> {
            let rows: Vec<&[S]> = selected
                .iter()
                .enumerate()
                .map(|(i, &k)| field(&outputs[k]).row(i))
                .collect();
            Array::from_rows(&rows)
        };
        let feature_targets = pick(|o| &o.features)?;
        let composite_logits = pick(|o| &o.logits)?;
        Ok(Some(PoolTargets {
            feature_targets,
            composite_logits,
            logit_batches: outputs.into_iter().map(|o| o.logits).collect(),
            selected_model_index: selected,
        }))
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = format!(
            "{MANIFEST_HEADER}\nmax_size {}\nmomentum {}\n",
            self.max_size,
            self.momentum.as_f64()
        );
        for (i, snap) in self.snapshots.iter().enumerate() {
            let name = format!("snapshot_{i}.bin");
            save_params(snap, &dir.join(&name))?;
            manifest.push_str(&name);
            manifest.push('\n');
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let bad = |line: usize, msg: &str| Error::Format {
            kind: "pool manifest",
            offset: line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(bad(0, "missing header"));
        }
        let mut field = |line: usize, key: &str| -> Result<String> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key))
                .map(|v| v.trim().to_string())
                .ok_or_else(|| bad(line, key))
        };
        let max_size: usize = field(1, "max_size")?
            .parse()
            .map_err(|_| bad(1, "max_size is not an integer"))?;
        let momentum: f64 = field(2, "momentum")?
            .parse()
            .map_err(|_| bad(2, "momentum is not a number"))?;
        let mut pool = Self::new(max_size, momentum)?;
        for name in lines.filter(|l| !l.trim().is_empty()) {
            pool.snapshots.push_back(load_params(&dir.join(name.trim()))?);
        }
        if pool.snapshots.len() > pool.max_size {
            return Err(bad(3, "more snapshots than max_size"));
        }
        Ok(pool)
    }
}

/// Argmax predictions of the current model averaged with one pool snapshot.
pub fn ensemble_predict<S: Scalar>(
    current: &ModelParams<S>,
    pool: &ModelPool<S>,
    batch: &Array<S>,
    config: &EnsembleConfig,
) -> Result<Vec<usize>> {
    let logits = current.forward(batch)?.logits;
    let partner = if config.enabled && !pool.is_empty() {
        let idx = pool.len() - 1 - config.snapshot_from_newest.min(pool.len() - 1);
        pool.snapshots.get(idx)
    } else {
        None
    };
    let Some(partner) = partner else {
        return Ok(logits.argmax_rows());
    };
    let other = partner.forward(batch)?.logits;
    let half = S::lit(0.5);
    let combined = match config.mode {
        EnsembleMode::Probabilities => logits
            .softmax_rows()
            .zip_map(&other.softmax_rows(), "ensemble", |a, b| (a + b) * half)?,
        EnsembleMode::Logits => logits.zip_map(&other, "ensemble", |a, b| (a + b) * half)?,
    };
    Ok(combined.argmax_rows())
}
