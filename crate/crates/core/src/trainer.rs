//! The continual training loop.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::autodiff::Tape;
use crate::buffer::{Exemplar, MemoryBuffer, MAX_EXEMPLAR_FLOATS};
use crate::checkpoint::save_params;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{ace_loss, final_loss, LossBreakdown, LossInputs, ReplayTerms, UnlabeledTerms};
use crate::nn::{ModelParams, ROTATIONS};
use crate::optim::Adam;
use crate::pool::{ensemble_predict, EmaCadence, ModelPool};
use crate::scalar::Scalar;
use crate::stream::{generate_stream, rotate_image, stack_images, test_set, Experience, Image, ImageSource};

const EVAL_CHUNK: usize = 256;

// Independent random streams so that disabling one component never shifts
// the draws of another.
const STREAM_ORDER: u64 = 1;
const STREAM_UNLABELED: u64 = 2;
const STREAM_REPLAY: u64 = 3;
const STREAM_BUFFER: u64 = 4;
const INIT_SALT: u64 = 0x1A17_0000_0000_0001;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Labeled sample order for one epoch.
fn epoch_order(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub experience: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Learner state carried across experiences.
pub struct Learner<S> {
    config: RunConfig,
    params: ModelParams<S>,
    adam: Adam<S>,
    buffer: MemoryBuffer<S>,
    pool: ModelPool<S>,
    seen_classes: BTreeSet<usize>,
    /// Classes seen before the current experience.
    known_classes: BTreeSet<usize>,
    order_rng: ChaCha8Rng,
    unlabeled_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    trace: Vec<StepRecord>,
}

impl<S: Scalar> Learner<S> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(config.model_config(), config.seed ^ INIT_SALT)?;
        let buffer_seed = rng_for(config.seed, STREAM_BUFFER).random();
        Ok(Self {
            adam: Adam::new(&config.adam_config()),
            buffer: MemoryBuffer::new(config.buffer_capacity, buffer_seed).class_balanced(config.buffer_class_balanced),
            pool: ModelPool::new(config.effective_pool_size(), config.ema_momentum)?,
            seen_classes: BTreeSet::new(),
            known_classes: BTreeSet::new(),
            order_rng: rng_for(config.seed, STREAM_ORDER),
            unlabeled_rng: rng_for(config.seed, STREAM_UNLABELED),
            replay_rng: rng_for(config.seed, STREAM_REPLAY),
            trace: Vec::new(),
            params,
            config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<S> {
        &self.params
    }

    pub fn buffer(&self) -> &MemoryBuffer<S> {
        &self.buffer
    }

    pub fn pool(&self) -> &ModelPool<S> {
        &self.pool
    }

    pub fn trace(&self) -> &[StepRecord] {
        &self.trace
    }

    pub fn seen_classes(&self) -> &BTreeSet<usize> {
        &self.seen_classes
    }

    pub fn train_experience(&mut self, exp: &Experience, t: usize) -> Result<()> {
        self.train_experience_with(exp, t, |_| {})
    }

    /// Trains on one experience, calling `on_step` with the parameters after
    /// every optimizer step.
    pub fn train_experience_with(
        &mut self,
        exp: &Experience,
        t: usize,
        mut on_step: impl FnMut(&ModelParams<S>),
    ) -> Result<()> {
        if exp.labeled().is_empty() {
            return Err(Error::Invalid(format!("experience {t} has no labeled data")));
        }
        self.known_classes = self.seen_classes.clone();
        self.seen_classes.extend(exp.present_classes().iter().copied());
        let mut step = 0;
        for epoch in 0..self.config.epochs {
            let order = epoch_order(&mut self.order_rng, exp.labeled().len());
            for chunk in order.chunks(self.config.labeled_batch) {
                self.step(exp, t, step, chunk, epoch + 1 == self.config.epochs)?;
                on_step(&self.params);
                step += 1;
            }
        }
        if self.config.flags.use_ema && self.config.ema_cadence == EmaCadence::PerExperience {
            self.pool.ema_refresh_all(&self.params)?;
        }
        self.pool.push_snapshot(&self.params);
        Ok(())
    }

    fn unlabeled_batch(&mut self, exp: &Experience) -> Result<(Array<S>, Vec<usize>)> {
        let pool = exp.unlabeled();
        if pool.is_empty() {
            return Err(Error::Invalid("experience has no unlabeled data".into()));
        }
        let n = self.config.unlabeled_batch;
        let picks: Vec<usize> = if n <= pool.len() {
            index::sample(&mut self.unlabeled_rng, pool.len(), n).into_vec()
        } else {
            (0..n).map(|_| self.unlabeled_rng.random_range(0..pool.len())).collect()
        };
        let mut images = Vec::with_capacity(n);
        let mut rotations = Vec::with_capacity(n);
        for i in picks {
            let k = self.unlabeled_rng.random_range(0..ROTATIONS);
            images.push(rotate_image(&pool[i], k)?);
            rotations.push(k);
        }
        let refs: Vec<&Image> = images.iter().collect();
        Ok((stack_images(&refs)?, rotations))
    }

    fn step(&mut self, exp: &Experience, t: usize, step: usize, chunk: &[usize], first_pass: bool) -> Result<()> {
        let flags = self.config.flags;
        let images: Vec<&Image> = chunk.iter().map(|&i| &exp.labeled()[i].0).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| exp.labeled()[i].1).collect();
        let x_labeled = stack_images::<S>(&images)?;

        let wants_targets = flags.uses_pool_targets() && !self.pool.is_empty();
        let unlabeled = if flags.use_ssl || wants_targets {
            Some(self.unlabeled_batch(exp)?)
        } else {
            None
        };
        let replay = if flags.use_der && !self.buffer.is_empty() {
            let seed = self.replay_rng.random();
            self.buffer.sample_batch(self.config.replay_batch, seed)?
        } else {
            None
        };
        let targets = match (&unlabeled, wants_targets) {
            (Some((x, _)), true) => self.pool.compute_targets(x)?,
            _ => None,
        };

        let (grads, features, logits, breakdown) = {
            let tape = Tape::new();
            let model = self.params.bind(&tape, true);
            let feats = model.encode(tape.constant(x_labeled))?;
            let labeled_logits = model.classify(feats)?;

            let replay_terms = match &replay {
                Some(r) => Some(ReplayTerms {
                    logits_now: model.classify(tape.constant(r.features.clone()))?,
                    stored_logits: &r.logits,
                    labels: &r.labels,
                }),
                None => None,
            };
            let unlabeled_terms = match &unlabeled {
                Some((x, rotations)) => {
                    let out = model.forward(tape.constant(x.clone()))?;
                    Some(UnlabeledTerms {
                        features: out.features,
                        logits: out.logits,
                        rotation_logits: out.rotation_logits,
                        rotation_labels: rotations,
                    })
                }
                None => None,
            };
            let inputs = LossInputs {
                labeled_logits,
                labels: &labels,
                replay: replay_terms,
                unlabeled: unlabeled_terms,
                targets: targets.as_ref(),
                seen_classes: &self.seen_classes,
                known_classes: Some(&self.known_classes),
            };
            let (total, breakdown) = final_loss(&inputs, &self.config.schedule, &flags, t)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Diverged {
                    experience: t,
                    step,
                    breakdown: breakdown.to_string(),
                });
            }
            let g = tape.backward(total)?;
            let grads: Vec<Array<S>> = model.vars().iter().map(|&v| g.wrt(v)).collect();
            let features = feats.value().clone();
            let logits = labeled_logits.value().clone();
            (grads, features, logits, breakdown)
        };

        self.adam.step(self.params.blocks_mut(), &grads).map_err(|e| match e {
            Error::NonFinite(block) => Error::Diverged {
                experience: t,
                step,
                breakdown: format!("{breakdown}; non-finite gradient in `{block}`"),
            },
            other => other,
        })?;
        if flags.use_ema && self.config.ema_cadence == EmaCadence::PerStep {
            self.pool.ema_refresh_all(&self.params)?;
        }
        if first_pass && flags.use_der {
            for (i, &label) in labels.iter().enumerate() {
                self.buffer.insert(Exemplar {
                    feature: features.row(i).to_vec(),
                    logit: logits.row(i).to_vec(),
                    label,
                    task: t,
                })?;
            }
        }
        debug_assert!(self.buffer.len() <= self.buffer.capacity());
        debug_assert!(self.buffer.stored_floats() <= self.buffer.capacity() * MAX_EXEMPLAR_FLOATS);

        self.trace.push(StepRecord {
            experience: t,
            step,
            loss: breakdown,
        });
        Ok(())
    }

    /// Argmax predictions, with ensemble inference when configured.
    pub fn predict(&self, batch: &Array<S>) -> Result<Vec<usize>> {
        ensemble_predict(&self.params, &self.pool, batch, &self.config.ensemble)
    }

    pub fn predict_single(&self, batch: &Array<S>) -> Result<Vec<usize>> {
        Ok(self.params.forward(batch)?.logits.argmax_rows())
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_params(&self.params, &dir.join("model.bin"))?;
        self.buffer.dump(&dir.join("buffer.bin"))?;
        self.pool.save_dir(&dir.join("pool"))
    }
}

/// One cross-entropy step on a labeled batch, with nothing else. `masked`
/// restricts the softmax to the classes in the batch.
pub fn fine_tune_step<S: Scalar>(
    params: &mut ModelParams<S>,
    adam: &mut Adam<S>,
    images: &Array<S>,
    labels: &[usize],
    masked: bool,
) -> Result<S> {
    let classes: BTreeSet<usize> = if masked {
        labels.iter().copied().collect()
    } else {
        (0..params.config().num_classes).collect()
    };
    let (grads, loss) = {
        let tape = Tape::new();
        let model = params.bind(&tape, true);
        let logits = model.classify(model.encode(tape.constant(images.clone()))?)?;
        let loss = ace_loss(logits, labels, &classes)?;
        let g = tape.backward(loss)?;
        let grads: Vec<Array<S>> = model.vars().iter().map(|&v| g.wrt(v)).collect();
        (grads, loss.item())
    };
    adam.step(params.blocks_mut(), &grads)?;
    Ok(loss)
}

/// Fine-tunes over `stream` with the same initialization and batch order a
/// [`Learner`] built from `config` would use.
pub fn fine_tune_stream<S: Scalar>(
    config: &RunConfig,
    stream: &[Experience],
    mut on_step: impl FnMut(&ModelParams<S>),
) -> Result<ModelParams<S>> {
    config.validate()?;
    let mut params = ModelParams::init(config.model_config(), config.seed ^ INIT_SALT)?;
    let mut adam = Adam::new(&config.adam_config());
    let mut order_rng = rng_for(config.seed, STREAM_ORDER);
    for exp in stream {
        for _ in 0..config.epochs {
            let order = epoch_order(&mut order_rng, exp.labeled().len());
            for chunk in order.chunks(config.labeled_batch) {
                let images: Vec<&Image> = chunk.iter().map(|&i| &exp.labeled()[i].0).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| exp.labeled()[i].1).collect();
                fine_tune_step(
                    &mut params,
                    &mut adam,
                    &stack_images(&images)?,
                    &labels,
                    config.flags.use_ace,
                )?;
                on_step(&params);
            }
        }
    }
    Ok(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_accuracy: Vec<f64>,
}

/// Scores `predict` on a labeled test set with `num_classes` classes.
pub fn evaluate<S: Scalar>(
    predict: impl Fn(&Array<S>) -> Result<Vec<usize>>,
    test: &[(Image, usize)],
    num_classes: usize,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty test set".into()));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    let mut correct = 0usize;
    for chunk in test.chunks(EVAL_CHUNK) {
        let images: Vec<&Image> = chunk.iter().map(|(img, _)| img).collect();
        let preds = predict(&stack_images(&images)?)?;
        if preds.len() != chunk.len() {
            return Err(Error::Invalid("predictor returned the wrong number of labels".into()));
        }
        for ((_, y), p) in chunk.iter().zip(preds) {
            if *y >= num_classes || p >= num_classes {
                return Err(Error::Invalid(format!("class id out of range: {y} / {p}")));
            }
            confusion[*y][p] += 1;
            correct += (*y == p) as usize;
        }
    }
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[c] as f64 / n as f64
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy: correct as f64 / test.len() as f64,
        confusion,
        per_class_accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperienceMetrics {
    pub index: usize,
    pub present_classes: Vec<usize>,
    pub accuracy: f64,
    pub single_model_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Mean of each weighted term over the experience's steps.
    pub mean_loss: LossBreakdown,
    pub steps: usize,
    pub buffer_size: usize,
    pub pool_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub experiences: Vec<ExperienceMetrics>,
    pub final_accuracy: f64,
    pub loss_trace: Vec<StepRecord>,
    pub wall_clock_secs: Vec<f64>,
}

impl RunMetrics {
    /// Mean accuracy over `classes` after experience `t`.
    pub fn class_group_accuracy(&self, t: usize, classes: &[usize]) -> f64 {
        let acc = &self.experiences[t].per_class_accuracy;
        classes.iter().map(|&c| acc[c]).sum::<f64>() / classes.len() as f64
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Write model, buffer and pool after every experience.
    pub checkpoint_dir: Option<PathBuf>,
}

fn mean_breakdown(records: &[StepRecord]) -> LossBreakdown {
    let n = records.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for r in records {
        let l = &r.loss;
        m.alpha += l.alpha / n;
        m.beta += l.beta / n;
        m.ace += l.ace / n;
        m.ssl += l.ssl / n;
        m.lc += l.lc / n;
        m.der += l.der / n;
        m.feature_kd += l.feature_kd / n;
        m.logit_kd += l.logit_kd / n;
        m.total += l.total / n;
    }
    m
}

/// Trains over the whole stream, evaluating after each experience.
pub fn run_stream<S: Scalar>(config: &RunConfig, source: &ImageSource, options: &RunOptions) -> Result<RunMetrics> {
    config.validate()?;
    let stream = generate_stream(&config.stream, source)?;
    let test = test_set(&config.stream, source, config.test_per_class)?;
    let classes = config.stream.labeled_classes;
    let mut learner = Learner::<S>::new(config.clone())?;
    let mut experiences = Vec::with_capacity(stream.len());
    let mut wall = Vec::with_capacity(stream.len());

    for (t, exp) in stream.iter().enumerate() {
        let started = Instant::now();
        let before = learner.trace().len();
        learner.train_experience(exp, t)?;
        let records = &learner.trace()[before..];
        let ens = evaluate(|x| learner.predict(x), &test, classes)?;
        let single = evaluate(|x| learner.predict_single(x), &test, classes)?;
        wall.push(started.elapsed().as_secs_f64());
        if let Some(dir) = &options.checkpoint_dir {
            learner.save_checkpoint(&dir.join(format!("exp_{t:03}")))?;
        }
        experiences.push(ExperienceMetrics {
            index: t,
            present_classes: exp.present_classes().iter().copied().collect(),
            accuracy: ens.accuracy,
            single_model_accuracy: single.accuracy,
            per_class_accuracy: ens.per_class_accuracy,
            mean_loss: mean_breakdown(records),
            steps: records.len(),
            buffer_size: learner.buffer().len(),
            pool_size: learner.pool().len(),
        });
    }

    Ok(RunMetrics {
        final_accuracy: experiences.last().map_or(0.0, |e| e.accuracy),
        experiences,
        loss_trace: learner.trace().to_vec(),
        wall_clock_secs: wall,
    })
}
