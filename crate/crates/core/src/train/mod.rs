//! SGD with momentum and weight decay, a milestone learning-rate schedule,
//! the per-stream training loop, evaluation with late fusion, and run logs.

mod log;

pub use log::{EpochRecord, RunLog};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamSet, Tape};
use crate::error::{Error, Result};
use crate::model::{argmax, late_fusion, Model, ModelConfig, Pass};
use crate::synthdata::{frame_difference, generate, segment_sample, ManifestEntry, Modality, SampleMode, SynthVideo};
use crate::tensor::{self, Tensor};

/// Optimiser state: one velocity per parameter, in parameter order.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub velocities: Vec<Tensor>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epoch: usize,
    pub milestones: Vec<usize>,
}

impl OptimState {
    pub fn new(params: &ParamSet, lr: f64, momentum: f64, weight_decay: f64, milestones: Vec<usize>) -> Self {
        OptimState {
            velocities: params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            lr,
            momentum,
            weight_decay,
            epoch: 0,
            milestones,
        }
    }
}

/// `v ← μv − lr·(g + λp)`, `p ← p + v` for every parameter, reading `g` from
/// the parameter's gradient accumulator. Decay applies only to parameters
/// flagged for it.
pub fn sgd_step(params: &mut ParamSet, opt: &mut OptimState) -> Result<()> {
    if opt.velocities.len() != params.len() {
        return Err(Error::Config(format!(
            "optimiser tracks {} tensors, model has {}",
            opt.velocities.len(),
            params.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for (id, v) in ids.into_iter().zip(opt.velocities.iter_mut()) {
        let p = params.get_mut(id);
        if v.shape() != p.value.shape() || p.grad.shape() != p.value.shape() {
            return Err(Error::shape("sgd_step", p.value.shape(), v.shape()));
        }
        let decay = if p.decay { opt.weight_decay } else { 0.0 };
        let (mu, lr) = (opt.momentum, opt.lr);
        let g = p.grad.data();
        for ((vel, w), gi) in v.data_mut().iter_mut().zip(p.value.data_mut()).zip(g) {
            *vel = mu * *vel - lr * (gi + decay * *w);
            *w += *vel;
        }
    }
    Ok(())
}

/// `base · factor^k` where `k` counts milestones `≤ epoch`.
pub fn lr_schedule(epoch: usize, base: f64, milestones: &[usize], factor: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch >= m).count();
    base * factor.powi(passed as i32)
}

/// `−log softmax(scores)[label]`, stabilised by the max score.
pub fn softmax_cross_entropy(scores: &Tensor, label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.leaf(scores.clone());
    let l = tape.softmax_cross_entropy(s, label)?;
    Ok(tape.value(l).data()[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    /// Seeds clip order and segment sampling.
    pub seed: u64,
    /// Evaluate the held-out split every this many epochs (0 = only at the end).
    pub eval_every: usize,
    /// Inference groups used for held-out evaluation.
    pub groups: usize,
    /// Rescale the gradient to at most this global L2 norm before each step.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 0.0005,
            momentum: 0.9,
            weight_decay: 0.0005,
            milestones: vec![20, 26],
            lr_factor: 0.1,
            seed: 0,
            eval_every: 0,
            groups: 4,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.milestones.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("milestones must be sorted".into()));
        }
        if self.groups == 0 {
            return Err(Error::Config("groups must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("gradient clip norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Renders every clip of `entries` in `modality`.
pub fn materialize(entries: &[ManifestEntry], modality: Modality) -> Result<Vec<SynthVideo>> {
    entries
        .iter()
        .map(|e| {
            let v = generate(&e.scenario, e.length, e.seed)?;
            match modality {
                Modality::Appearance => Ok(v),
                Modality::Motion => frame_difference(&v),
            }
        })
        .collect()
}

fn check_clips(config: &ModelConfig, clips: &[SynthVideo]) -> Result<()> {
    for (i, c) in clips.iter().enumerate() {
        if c.label >= config.classes {
            return Err(Error::Data(format!(
                "clip {i} has label {} but the model has {} classes",
                c.label, config.classes
            )));
        }
        if c.len() < config.segments {
            return Err(Error::Data(format!(
                "clip {i} has {} snippets, fewer than {} segments",
                c.len(),
                config.segments
            )));
        }
        if c.modality != config.stream {
            return Err(Error::Data(format!("clip {i} is {:?}, model expects {:?}", c.modality, config.stream)));
        }
    }
    if clips.is_empty() {
        return Err(Error::Data("no clips".into()));
    }
    Ok(())
}

/// Scales every gradient accumulator so the global L2 norm is at most
/// `max`; returns the norm before scaling.
pub fn clip_grad_norm(params: &mut ParamSet, max: f64) -> f64 {
    let norm = params
        .iter()
        .map(|(_, p)| p.grad.data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = max / norm;
        for id in params.ids().collect::<Vec<_>>() {
            for g in params.get_mut(id).grad.data_mut() {
                *g *= s;
            }
        }
    }
    norm
}

fn params_finite(params: &ParamSet) -> bool {
    params.iter().all(|(_, p)| p.value.is_finite())
}

/// Accuracy, per-class accuracy and confusion matrix of a set of scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamMetrics {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub loss: f64,
}

pub fn metrics_from_scores(scores: &[Tensor], labels: &[usize], classes: usize) -> Result<StreamMetrics> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Data(format!("{} score vectors for {} labels", scores.len(), labels.len())));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut loss = 0.0;
    for (s, &l) in scores.iter().zip(labels) {
        if s.len() != classes || l >= classes {
            return Err(Error::Data(format!("label {l} or score width {} does not fit {classes} classes", s.len())));
        }
        confusion[l][argmax(s)] += 1;
        loss += softmax_cross_entropy(s, l)?;
    }
    let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[k] as f64 / n as f64
            }
        })
        .collect();
    Ok(StreamMetrics {
        accuracy: correct as f64 / labels.len() as f64,
        per_class,
        confusion,
        loss: loss / labels.len() as f64,
    })
}

/// Group-averaged scores of every clip.
pub fn score_clips(model: &Model, clips: &[SynthVideo], groups: usize) -> Result<Vec<Tensor>> {
    check_clips(model.config(), clips)?;
    clips.iter().map(|c| model.inference_groups(c, groups)).collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: RunLog,
}

/// Trains a fresh model built from `model_config` on one stream.
pub fn train_stream(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train: &[ManifestEntry],
    test: Option<&[ManifestEntry]>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let model = Model::new(model_config.clone())?;
    let train_clips = materialize(train, model_config.stream)?;
    let test_clips = test.map(|t| materialize(t, model_config.stream)).transpose()?;
    train_model(model, config, &train_clips, test_clips.as_deref(), on_epoch)
}

/// Runs the training loop on already rendered clips, starting from `model`.
pub fn train_model(
    mut model: Model,
    config: &TrainConfig,
    train: &[SynthVideo],
    test: Option<&[SynthVideo]>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_clips(model.config(), train)?;
    if let Some(t) = test {
        check_clips(model.config(), t)?;
    }
    let classes = model.config().classes;
    let segments = model.config().segments;
    let mut opt = OptimState::new(
        model.params(),
        config.lr,
        config.momentum,
        config.weight_decay,
        config.milestones.clone(),
    );
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    data_rng.set_stream(1);
    let mut log = RunLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let started = std::time::Instant::now();
        opt.epoch = epoch;
        opt.lr = lr_schedule(epoch, config.lr, &config.milestones, config.lr_factor);
        order.shuffle(&mut data_rng);
        let mut epoch_scores = vec![Tensor::zeros(&[classes]); train.len()];
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let snippets = batch
                .iter()
                .map(|&i| {
                    let clip = &train[i];
                    let idx = segment_sample(clip.len(), segments, SampleMode::Random(&mut data_rng))?;
                    Ok(idx.iter().map(|&t| clip.frames[t].clone()).collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[Tensor]> = snippets.iter().map(|s| s.as_slice()).collect();
            let mut tape = Tape::new();
            let mut drop_rng = model.rng.clone();
            let out = model.forward(&mut tape, &refs, Pass::Train { rng: &mut drop_rng })?;
            model.rng = drop_rng;
            let mut losses = Vec::with_capacity(batch.len());
            for (&i, &s) in batch.iter().zip(&out.scores) {
                losses.push(tape.softmax_cross_entropy(s, train[i].label)?);
                epoch_scores[i] = tensor::reshape(tape.value(s), &[classes])?;
            }
            let total = tape.concat(&losses, 0)?;
            let total = tape.sum(total);
            let loss = tape.scale(total, 1.0 / batch.len() as f64);
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            loss_sum += tape.value(total).data()[0];
            let grads = tape.backward(loss)?;
            let params = model.params_mut();
            params.zero_grad();
            grads.accumulate_into(params)?;
            if let Some(max) = config.clip_norm {
                clip_grad_norm(params, max);
            }
            sgd_step(params, &mut opt)?;
            if !params_finite(model.params()) {
                return Err(Error::NonFinite { op: "parameter update" });
            }
            if !out.bn_batch.is_empty() {
                model.update_bn(&out.bn_batch)?;
            }
        }
        let labels: Vec<usize> = train.iter().map(|c| c.label).collect();
        let m = metrics_from_scores(&epoch_scores, &labels, classes)?;
        let rec = EpochRecord {
            epoch,
            split: "train".into(),
            loss: loss_sum / train.len() as f64,
            accuracy: m.accuracy,
            per_class: m.per_class,
            lr: opt.lr,
            wall_time: started.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        log.records.push(rec);
        let last = epoch + 1 == config.epochs;
        let due = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
        if let Some(t) = test.filter(|_| last || due) {
            let started = std::time::Instant::now();
            let scores = score_clips(&model, t, config.groups)?;
            let labels: Vec<usize> = t.iter().map(|c| c.label).collect();
            let m = metrics_from_scores(&scores, &labels, classes)?;
            let rec = EpochRecord {
                epoch,
                split: "test".into(),
                loss: m.loss,
                accuracy: m.accuracy,
                per_class: m.per_class,
                lr: opt.lr,
                wall_time: started.elapsed().as_secs_f64(),
            };
            on_epoch(&rec);
            log.records.push(rec);
        }
    }
    Ok(TrainOutcome { model, log })
}

/// Per-stream and fused evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub spatial: Option<StreamMetrics>,
    pub temporal: Option<StreamMetrics>,
    pub fused: StreamMetrics,
    pub fusion_weight: f64,
    pub groups: usize,
    #[serde(skip)]
    pub fused_scores: Vec<Tensor>,
}

/// Scores one or two streams on `entries` and fuses them with weight `w`
/// on the spatial stream. A single stream is passed through unchanged.
pub fn evaluate(
    spatial: Option<&Model>,
    temporal: Option<&Model>,
    entries: &[ManifestEntry],
    w: f64,
    groups: usize,
) -> Result<Evaluation> {
    let stream_scores = |m: Option<&Model>| -> Result<Option<Vec<Tensor>>> {
        m.map(|m| score_clips(m, &materialize(entries, m.config().stream)?, groups))
            .transpose()
    };
    let labels: Vec<usize> = entries.iter().map(|e| e.class).collect();
    evaluate_scores(stream_scores(spatial)?, stream_scores(temporal)?, &labels, spatial.or(temporal), w, groups)
}

/// Same as [`evaluate`] on precomputed score tensors.
pub fn evaluate_scores(
    spatial: Option<Vec<Tensor>>,
    temporal: Option<Vec<Tensor>>,
    labels: &[usize],
    reference: Option<&Model>,
    w: f64,
    groups: usize,
) -> Result<Evaluation> {
    let classes = match (&spatial, &temporal) {
        (Some(s), _) | (None, Some(s)) => s.first().map(|t| t.len()).ok_or_else(|| Error::Data("no clips".into()))?,
        (None, None) => return Err(Error::Config("evaluation needs at least one stream".into())),
    };
    if let Some(m) = reference {
        if m.config().classes != classes {
            return Err(Error::Data("score width disagrees with model".into()));
        }
    }
    let fused_scores = match (&spatial, &temporal) {
        (Some(a), Some(b)) => {
            if a.len() != b.len() {
                return Err(Error::Data("streams scored different clip counts".into()));
            }
            a.iter().zip(b).map(|(x, y)| late_fusion(x, y, w)).collect::<Result<Vec<_>>>()?
        }
        (Some(a), None) | (None, Some(a)) => {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("fusion weight {w} outside [0, 1]")));
            }
            a.clone()
        }
        (None, None) => unreachable!(),
    };
    let metrics = |s: &Option<Vec<Tensor>>| s.as_ref().map(|s| metrics_from_scores(s, labels, classes)).transpose();
    Ok(Evaluation {
        spatial: metrics(&spatial)?,
        temporal: metrics(&temporal)?,
        fused: metrics_from_scores(&fused_scores, labels, classes)?,
        fusion_weight: w,
        groups,
        fused_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_split, interaction_classes, DatasetConfig, Split};

    fn scalar_params(p: f64, g: f64, decay: bool) -> ParamSet {
        let mut ps = ParamSet::new();
        let id = ps.insert("p", Tensor::scalar(p), decay).unwrap();
        ps.get_mut(id).grad = Tensor::scalar(g);
        ps
    }

    #[test]
    fn sgd_examples() {
        let mut ps = scalar_params(1.0, 0.0, true);
        let mut opt = OptimState::new(&ps, 0.1, 0.9, 0.0, vec![]);
        sgd_step(&mut ps, &mut opt).unwrap();
        assert_eq!(ps.value(ps.id("p").unwrap()).data()[0], 1.0);

        let mut ps = scalar_params(1.0, 1.0, true);
        let mut opt = OptimState::new(&ps, 0.1, 0.9, 0.0, vec![]);
        sgd_step(&mut ps, &mut opt).unwrap();
        assert!((opt.velocities[0].data()[0] + 0.1).abs() < 1e-15);
        assert!((ps.value(ps.id("p").unwrap()).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_matches_scalar_recurrence_on_quadratic() {
        // loss = a/2 · p², gradient a·p
        let (a, lr, mu, lambda) = (3.0, 0.05, 0.9, 0.01);
        let mut ps = scalar_params(2.0, 0.0, true);
        let id = ps.id("p").unwrap();
        let mut opt = OptimState::new(&ps, lr, mu, lambda, vec![]);
        let (mut p, mut v) = (2.0f64, 0.0f64);
        for _ in 0..2 {
            let g = a * ps.value(id).data()[0];
            ps.get_mut(id).grad = Tensor::scalar(g);
            sgd_step(&mut ps, &mut opt).unwrap();
            v = mu * v - lr * (a * p + lambda * p);
            p += v;
            assert_eq!(ps.value(id).data()[0], p);
        }
        // plain gradient descent when μ = λ = 0
        let mut ps = scalar_params(0.7, 0.3, true);
        let mut opt = OptimState::new(&ps, 0.5, 0.0, 0.0, vec![]);
        sgd_step(&mut ps, &mut opt).unwrap();
        assert_eq!(ps.value(ps.id("p").unwrap()).data()[0], 0.7 - 0.5 * 0.3);
    }

    #[test]
    fn decay_skips_unflagged() {
        let mut ps = scalar_params(1.0, 0.0, false);
        let mut opt = OptimState::new(&ps, 0.1, 0.0, 0.5, vec![]);
        sgd_step(&mut ps, &mut opt).unwrap();
        assert_eq!(ps.value(ps.id("p").unwrap()).data()[0], 1.0);
    }

    #[test]
    fn schedule() {
        let m = [20, 26];
        assert_eq!(lr_schedule(0, 0.0005, &m, 0.1), 0.0005);
        assert!((lr_schedule(20, 0.0005, &m, 0.1) - 0.00005).abs() < 1e-18);
        assert!((lr_schedule(30, 0.0005, &m, 0.1) - 0.000005).abs() < 1e-18);
        assert_eq!(TrainConfig::default().lr, 0.0005);
    }

    #[test]
    fn cross_entropy_values() {
        let u = Tensor::zeros(&[4]);
        assert!((softmax_cross_entropy(&u, 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        let s = Tensor::new(vec![3], vec![0.0, 1000.0, 0.0]).unwrap();
        assert!(softmax_cross_entropy(&s, 1).unwrap().abs() < 1e-300);
        assert!(softmax_cross_entropy(&s, 3).is_err());
    }

    #[test]
    fn fused_metrics_by_hand() {
        let t = |a: f64, b: f64| Tensor::new(vec![2], vec![a, b]).unwrap();
        let spatial = vec![t(1.0, 0.0), t(0.0, 1.0), t(0.4, 0.5)];
        let temporal = vec![t(0.0, 2.0), t(0.0, 1.0), t(1.0, 0.0)];
        let labels = [0, 1, 0];
        let e = evaluate_scores(Some(spatial.clone()), Some(temporal), &labels, None, 0.5, 1).unwrap();
        // fused: [0.5,1.0] → 1 (wrong), [0,1] → 1 (right), [0.7,0.25] → 0 (right)
        assert!((e.fused.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(e.fused.confusion, vec![vec![1, 1], vec![0, 1]]);
        assert!((e.spatial.as_ref().unwrap().accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!((e.temporal.as_ref().unwrap().accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(e.fused.per_class, vec![0.5, 1.0]);

        let single = evaluate_scores(Some(spatial.clone()), None, &labels, None, 1.0, 1).unwrap();
        assert_eq!(Some(single.fused.clone()), single.spatial);
        let same = evaluate_scores(Some(spatial.clone()), Some(spatial), &labels, None, 0.3, 1).unwrap();
        assert_eq!(same.fused.accuracy, same.spatial.unwrap().accuracy);
    }

    fn tiny_data() -> (ModelConfig, Vec<ManifestEntry>) {
        let data = DatasetConfig {
            classes: interaction_classes()[3..].to_vec(),
            train_per_class: 2,
            test_per_class: 1,
            length: 6,
            frame_size: 18,
            noise: 4,
            seed: 3,
        };
        let entries = build_split(&data, Split::Train).unwrap();
        (ModelConfig::tiny(), entries)
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (mc, entries) = tiny_data();
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            weight_decay: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let fresh = Model::new(mc.clone()).unwrap();
        let out = train_stream(&mc, &cfg, &entries, None, |_| {}).unwrap();
        for ((_, a), (_, b)) in fresh.params().iter().zip(out.model.params().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn fixed_seed_reproduces_log() {
        let (mc, entries) = tiny_data();
        let cfg = TrainConfig {
            epochs: 2,
            lr: 0.01,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let mc = ModelConfig { dropout: 0.3, ..mc };
        let a = train_stream(&mc, &cfg, &entries, Some(&entries), |_| {}).unwrap();
        let b = train_stream(&mc, &cfg, &entries, Some(&entries), |_| {}).unwrap();
        assert_eq!(a.log.to_csv().unwrap(), b.log.to_csv().unwrap());
        assert_eq!(a.log.records.len(), 3);
    }

    #[test]
    fn class_mismatch_is_data_error() {
        let (mc, entries) = tiny_data();
        let two = ModelConfig { classes: 2, ..mc };
        let r = train_stream(&two, &TrainConfig::default(), &entries, None, |_| {});
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
