//! Adam training on randomly sampled, augmented subvolumes.

mod adam;
mod augment;
mod intensity;

pub use adam::{adam_step, adam_step_store, AdamConfig, AdamState};
pub use augment::{augment_subvolume, transform_image, transform_labels, AugmentationConfig, Transform};
pub use intensity::{standardize_intensity, StandardizationModel, StandardizeMode, LANDMARKS};

use std::fs::File;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Subject};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::infer::{predict, PaddingPolicy};
use crate::loss::{mean_dcs, DiceClasses, LabelVolume};
use crate::network::checkpoint;
use crate::network::{forward_graph, ArchitectureSpec, Mode, ParamRole, ParameterStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dice,
    Xent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Cube side of the sampled training subvolumes.
    pub subvolume: usize,
    pub iterations: usize,
    /// 1 or 2; each worker draws its own subvolume and gradients are averaged.
    pub workers: usize,
    /// Evaluate every this many steps (and after the last step).
    pub val_every: usize,
    /// Stop after this many evaluations without a gain of `min_delta`.
    pub patience: Option<usize>,
    pub min_delta: f64,
    /// Stop as soon as the evaluated mean DCS reaches this value.
    pub stop_at_dcs: Option<f64>,
    pub seed: u64,
    pub loss: LossKind,
    pub dice_classes: DiceClasses,
    pub adam: AdamConfig,
    pub augmentation: AugmentationConfig,
    /// Zero padding used when predicting evaluation volumes.
    pub eval_pad: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            subvolume: 24,
            iterations: 2000,
            workers: 1,
            val_every: 50,
            patience: None,
            min_delta: 1e-3,
            stop_at_dcs: None,
            seed: 0,
            loss: LossKind::Dice,
            dice_classes: DiceClasses::default(),
            adam: AdamConfig::default(),
            augmentation: AugmentationConfig::default(),
            eval_pad: PaddingPolicy::default().pad,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, spec: &ArchitectureSpec) -> Result<()> {
        let min = 2 * spec.max_reach() + 1;
        if self.subvolume < min {
            return Err(Error::invalid(format!("subvolume {} below minimum {min}", self.subvolume)));
        }
        if !(1..=2).contains(&self.workers) {
            return Err(Error::invalid(format!("worker count {} (expected 1 or 2)", self.workers)));
        }
        if self.iterations == 0 || self.val_every == 0 {
            return Err(Error::invalid("iterations and val_every must be positive"));
        }
        Ok(())
    }
}

/// Uniformly placed crop of `size` voxels from a congruent image/label pair.
pub fn sample_subvolume(
    image: &Tensor<f32>,
    labels: &LabelVolume,
    size: [usize; 3],
    rng: &mut Rng,
) -> Result<(Tensor<f32>, LabelVolume, [usize; 3])> {
    let dims = labels.dims();
    if image.spatial()? != dims {
        return Err(Error::ShapeMismatch {
            op: "sample subvolume",
            left: image.dims().to_vec(),
            right: dims.to_vec(),
        });
    }
    if (0..3).any(|a| size[a] > dims[a] || size[a] == 0) {
        return Err(Error::invalid(format!("subvolume {size:?} does not fit volume {dims:?}")));
    }
    let origin = [0, 1, 2].map(|a| rng.below(dims[a] - size[a] + 1));
    Ok((image.crop(origin, size)?, labels.crop(origin, size)?, origin))
}

/// One worker's training input.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub image: Tensor<f32>,
    pub labels: LabelVolume,
}

impl Batch {
    /// Picks a training subject, standardises it, crops and augments.
    pub fn draw(subjects: &[Subject], config: &TrainConfig, rng: &mut Rng) -> Result<Batch> {
        let subject = &subjects[rng.below(subjects.len())];
        let mode = if config.augmentation.randomize_threshold {
            StandardizeMode::Train
        } else {
            StandardizeMode::Test
        };
        let image = standardize_intensity(&subject.image, mode, rng)?;
        let (image, labels, _) = sample_subvolume(&image, &subject.labels, [config.subvolume; 3], rng)?;
        let (image, labels) = augment_subvolume(&image, &labels, &config.augmentation, rng)?;
        Ok(Batch { image, labels })
    }
}

struct WorkerOutput {
    loss: f32,
    grads: Vec<Tensor<f32>>,
    store: ParameterStore<f32>,
}

fn worker(
    spec: &ArchitectureSpec,
    store: &ParameterStore<f32>,
    batch: &Batch,
    loss: LossKind,
    dice_classes: DiceClasses,
    mut rng: Rng,
) -> Result<WorkerOutput> {
    let mut local = store.clone();
    let mut g = Graph::default();
    let x = g.input(batch.image.clone());
    let scores = forward_graph(spec, &mut local, &mut g, x, Mode::Train, &mut rng)?;
    let l = match loss {
        LossKind::Dice => g.dice_loss(scores, &batch.labels, dice_classes)?,
        LossKind::Xent => g.cross_entropy(scores, &batch.labels)?,
    };
    let value = g.value(l).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value}")));
    }
    let grads = g.backward(l)?.param_grads(&local.trainable_shapes())?;
    Ok(WorkerOutput {
        loss: value,
        grads,
        store: local,
    })
}

/// One optimiser step. Each batch is processed by its own worker thread;
/// gradients and batch-norm running statistics are averaged across workers
/// before a single Adam update. Returns the mean loss.
pub fn train_step(
    spec: &ArchitectureSpec,
    store: &mut ParameterStore<f32>,
    adam: &mut AdamState<f32>,
    batches: &[Batch],
    loss: LossKind,
    dice_classes: DiceClasses,
    rngs: Vec<Rng>,
) -> Result<f32> {
    if batches.is_empty() || rngs.len() != batches.len() {
        return Err(Error::invalid("one rng per batch required"));
    }
    let outputs: Vec<WorkerOutput> = if batches.len() == 1 {
        vec![worker(spec, store, &batches[0], loss, dice_classes, rngs[0].clone())?]
    } else {
        let shared: &ParameterStore<f32> = store;
        std::thread::scope(|scope| {
            let handles: Vec<_> = batches
                .iter()
                .zip(rngs)
                .map(|(b, r)| scope.spawn(move || worker(spec, shared, b, loss, dice_classes, r)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    };
    let inv = 1.0 / outputs.len() as f32;
    let mut grads = outputs[0].grads.clone();
    for o in &outputs[1..] {
        for (g, og) in grads.iter_mut().zip(&o.grads) {
            g.add_assign(og)?;
        }
    }
    if outputs.len() > 1 {
        for g in &mut grads {
            *g = g.scale(inv);
        }
    }
    adam_step_store(store, &grads, adam)?;
    for (i, e) in store.entries_mut().iter_mut().enumerate() {
        if matches!(e.role, ParamRole::RunningMean | ParamRole::RunningVar) {
            let mut acc = outputs[0].store.entries()[i].tensor.clone();
            for o in &outputs[1..] {
                acc.add_assign(&o.store.entries()[i].tensor)?;
            }
            e.tensor = if outputs.len() > 1 { acc.scale(inv) } else { acc };
        }
    }
    let total: f32 = outputs.iter().map(|o| o.loss).sum();
    Ok(total * inv)
}

/// Mean over subjects of the mean DCS of whole-volume predictions.
pub fn evaluate(spec: &ArchitectureSpec, store: &ParameterStore<f32>, subjects: &[Subject], pad: usize) -> Result<f64> {
    if subjects.is_empty() {
        return Err(Error::Dataset("no volumes to evaluate".into()));
    }
    let policy = PaddingPolicy::new(pad);
    let mut total = 0.0;
    for s in subjects {
        let image = standardize_intensity(&s.image, StandardizeMode::Test, &mut Rng::new(0))?;
        let (labels, _) = predict(spec, store, &image, &policy)?;
        total += mean_dcs(&labels, &s.labels)?;
    }
    Ok(total / subjects.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub val_mean_dcs: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Iterations,
    Plateau,
    Target,
}

/// Where to write the metrics log and the best checkpoint, if anywhere.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub metrics_csv: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub store: ParameterStore<f32>,
    /// Parameters at the best evaluation, with its step and mean DCS.
    pub best: Option<(usize, f64, ParameterStore<f32>)>,
    pub metrics: Vec<MetricRow>,
    pub steps: usize,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn best_dcs(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.1)
    }
}

/// Trains `store` in place of a fresh copy. Evaluation runs on the
/// validation split, or on the training split when no validation volume
/// exists.
pub fn train(
    spec: &ArchitectureSpec,
    mut store: ParameterStore<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    config.validate(spec)?;
    store.check_against(spec)?;
    if dataset.num_classes != spec.num_classes() {
        return Err(Error::ArchitectureMismatch(format!(
            "dataset has {} classes, network predicts {}",
            dataset.num_classes,
            spec.num_classes()
        )));
    }
    if dataset.train.is_empty() {
        return Err(Error::Dataset("no training volumes".into()));
    }
    let eval_set = if dataset.validation.is_empty() {
        &dataset.train
    } else {
        &dataset.validation
    };
    let mut log = match &outputs.metrics_csv {
        Some(p) => Some(csv::Writer::from_writer(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let root = Rng::new(config.seed);
    let mut adam = AdamState::for_store(config.adam, &store)?;
    let started = Instant::now();
    let mut metrics = Vec::new();
    let mut best: Option<(usize, f64, ParameterStore<f32>)> = None;
    let mut plateau_ref = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut stop = StopReason::Iterations;
    let mut steps = 0;
    for step in 1..=config.iterations {
        let step_rng = root.derive(step as u64);
        let mut batches = Vec::with_capacity(config.workers);
        let mut rngs = Vec::with_capacity(config.workers);
        for w in 0..config.workers {
            let mut r = step_rng.derive(w as u64);
            batches.push(Batch::draw(&dataset.train, config, &mut r)?);
            rngs.push(r);
        }
        let loss = train_step(spec, &mut store, &mut adam, &batches, config.loss, config.dice_classes, rngs)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
                e => e,
            })?;
        steps = step;
        let val = if step % config.val_every == 0 || step == config.iterations {
            Some(evaluate(spec, &store, eval_set, config.eval_pad)?)
        } else {
            None
        };
        let row = MetricRow {
            step,
            loss: loss as f64,
            val_mean_dcs: val,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_mut() {
            w.serialize(&row)?;
            w.flush().map_err(|e| Error::io(outputs.metrics_csv.as_ref().unwrap(), e))?;
        }
        metrics.push(row);
        let Some(dcs) = val else { continue };
        if best.as_ref().is_none_or(|b| dcs > b.1) {
            if let Some(p) = &outputs.best_checkpoint {
                checkpoint::save(p, spec, &store)?;
            }
            best = Some((step, dcs, store.clone()));
        }
        if config.stop_at_dcs.is_some_and(|t| dcs >= t) {
            stop = StopReason::Target;
            break;
        }
        if dcs > plateau_ref + config.min_delta {
            plateau_ref = dcs;
            stale = 0;
        } else {
            stale += 1;
            if config.patience.is_some_and(|p| stale >= p) {
                stop = StopReason::Plateau;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        store,
        best,
        metrics,
        steps,
        stop,
    })
}
