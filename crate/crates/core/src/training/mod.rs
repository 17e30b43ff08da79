//! Multitask optimization loop: sample → augment → forward → loss →
//! backward → Adam → moving-average base update.

mod optim;
mod run;

pub use optim::{adam_step, OptimizerState};
pub use run::{RunDirObserver, METRICS_HEADER};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, image_to_tensor, AugmentOp, SampleTile};
use crate::error::{Error, Result};
use crate::models::{Mode, Model};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Weight of the classification loss; segmentation gets 1 − λ.
    pub lambda: f64,
    pub batch_size: usize,
    /// Moving-average momentum for the EM bases.
    pub alpha: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// 0 disables periodic evaluation.
    pub eval_every: usize,
    /// Inverse-frequency class weights in the pixel loss.
    pub class_weighting: bool,
    pub augment: bool,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            max_iterations: 2000,
            lambda: 0.5,
            batch_size: 4,
            alpha: 0.9,
            seed: 0,
            checkpoint_every: 500,
            eval_every: 250,
            class_weighting: false,
            augment: true,
        }
    }

    pub fn paper() -> Self {
        Self {
            max_iterations: 20000,
            checkpoint_every: 2000,
            eval_every: 1000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Loss nodes on the tape. `cls` is absent for segmentation-only models.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub cls: Option<Var>,
    pub seg: Var,
}

/// λ·CE(cls_logits, y) + (1 − λ)·CE(seg_logits, mask). `masks` holds the
/// {0,1} masks of the batch back to back; the pixel CE is averaged over all
/// pixels. Without `cls_logits` the total is the pixel loss alone.
pub fn multitask_loss(
    tape: &mut Tape,
    seg_logits: Var,
    masks: &[u8],
    cls_logits: Option<Var>,
    labels: &[usize],
    lambda: f64,
    class_weights: Option<&[f64]>,
) -> Result<LossVars> {
    let rows = tape.pixels_to_rows(seg_logits)?;
    let targets: Vec<usize> = masks.iter().map(|&m| usize::from(m)).collect();
    let seg = tape.cross_entropy(rows, &targets, class_weights)?;
    let Some(cls_logits) = cls_logits else {
        return Ok(LossVars {
            total: seg,
            cls: None,
            seg,
        });
    };
    let cls = tape.cross_entropy(cls_logits, labels, None)?;
    let a = tape.scale(cls, lambda)?;
    let b = tape.scale(seg, 1.0 - lambda)?;
    let total = tape.add(a, b)?;
    Ok(LossVars {
        total,
        cls: Some(cls),
        seg,
    })
}

/// Stacks samples into ([B×3×H×W] images, concatenated masks, labels).
pub fn make_batch(samples: &[&SampleTile]) -> Result<(Tensor, Vec<u8>, Vec<usize>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("empty batch".into()))?;
    let (h, w) = first.image.dims();
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.dims() != (h, w) {
            return Err(Error::shape(
                "make_batch",
                "all tiles in a batch must share dims",
            ));
        }
        data.extend(image_to_tensor(&s.image).into_data());
        masks.extend_from_slice(&s.mask.data);
    }
    let labels = samples.iter().map(|s| s.label).collect();
    Ok((
        Tensor::new(vec![samples.len(), 3, h, w], data)?,
        masks,
        labels,
    ))
}

/// N / (2 · N_c) per class over all training pixels.
pub fn inverse_frequency_weights(samples: &[SampleTile]) -> [f64; 2] {
    let mut counts = [0u64; 2];
    for s in samples {
        let pos = s.mask.count_nonzero() as u64;
        counts[1] += pos;
        counts[0] += s.mask.data.len() as u64 - pos;
    }
    let total = (counts[0] + counts[1]) as f64;
    counts.map(|c| {
        if c == 0 {
            1.0
        } else {
            total / (2.0 * c as f64)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    /// 1-based.
    pub iter: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_seg: f64,
    pub lr: f64,
}

/// Callbacks fired by [`train`].
pub trait TrainObserver {
    fn on_iteration(&mut self, _rec: &IterationRecord) -> Result<()> {
        Ok(())
    }

    /// Every `eval_every` iterations and after the last one.
    fn on_eval(&mut self, _iter: usize, _model: &mut Model) -> Result<()> {
        Ok(())
    }

    /// Every `checkpoint_every` iterations and after the last one.
    fn on_checkpoint(
        &mut self,
        _iter: usize,
        _model: &Model,
        _state: &OptimizerState,
    ) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Deterministic epoch-shuffled sample order.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// One optimization step on `batch`; returns (total, cls, seg) loss values.
pub fn train_step(
    model: &mut Model,
    state: &mut OptimizerState,
    batch: &[&SampleTile],
    cfg: &TrainConfig,
    class_weights: Option<&[f64]>,
) -> Result<(f64, f64, f64)> {
    let (images, masks, labels) = make_batch(batch)?;
    let mut tape = Tape::new();
    let binding = model.store().bind(&mut tape);
    let x = tape.constant(images);
    let out = model.forward(&mut tape, &binding, x, Mode::Train)?;
    let loss = multitask_loss(
        &mut tape,
        out.seg_logits,
        &masks,
        out.cls_logits,
        &labels,
        cfg.lambda,
        class_weights,
    )?;
    let total = tape.value(loss.total).data()[0];
    let cls = loss.cls.map_or(0.0, |v| tape.value(v).data()[0]);
    let seg = tape.value(loss.seg).data()[0];
    if !total.is_finite() {
        return Err(Error::Numerical {
            context: "train".into(),
            detail: format!("loss is {total}"),
        });
    }
    let grads = tape.backward(loss.total)?;
    let store = model.store_mut();
    store.zero_grad();
    store.accumulate(&binding, &grads);
    adam_step(store, state, cfg.learning_rate)?;
    if let Some(mu) = out.mu_t {
        model.update_bases(&mu)?;
    }
    Ok((total, cls, seg))
}

/// Runs `cfg.max_iterations` steps over `data`. `state` resumes a previous
/// optimizer when given.
pub fn train(
    model: &mut Model,
    data: &[SampleTile],
    cfg: &TrainConfig,
    state: Option<OptimizerState>,
    observer: &mut dyn TrainObserver,
) -> Result<(Vec<IterationRecord>, OptimizerState)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Model::SolarNet(m) = model {
        m.config.emau.alpha = cfg.alpha;
    }
    let mut state = state.unwrap_or_else(|| OptimizerState::new(model.store()));
    let weights = cfg.class_weighting.then(|| inverse_frequency_weights(data));
    let mut sampler = Sampler::new(data.len(), cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a116);
    let mut log = Vec::with_capacity(cfg.max_iterations);
    for iter in 1..=cfg.max_iterations {
        let augmented: Vec<SampleTile>;
        let mut batch: Vec<&SampleTile> =
            (0..cfg.batch_size).map(|_| &data[sampler.next()]).collect();
        if cfg.augment {
            augmented = batch
                .iter()
                .map(|s| {
                    let op = AugmentOp::random(&mut aug_rng);
                    augment(s, op, &mut aug_rng)
                })
                .collect();
            batch = augmented.iter().collect();
        }
        let (total, cls, seg) = train_step(
            model,
            &mut state,
            &batch,
            cfg,
            weights.as_ref().map(|w| &w[..]),
        )?;
        let rec = IterationRecord {
            iter,
            loss_total: total,
            loss_cls: cls,
            loss_seg: seg,
            lr: cfg.learning_rate,
        };
        observer.on_iteration(&rec)?;
        log.push(rec);
        let last = iter == cfg.max_iterations;
        if (cfg.eval_every > 0 && iter % cfg.eval_every == 0) || last {
            observer.on_eval(iter, model)?;
        }
        if (cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0) || last {
            observer.on_checkpoint(iter, model, &state)?;
        }
    }
    Ok((log, state))
}
