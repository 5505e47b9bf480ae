//! Two-branch video classifier: a small convolutional feature extractor
//! shared by a local branch (spatial then temporal average pooling) and a
//! non-local branch (batch norm, R-LSTM over the snippets, channel expansion,
//! a residual 3×3 block and spatial pooling), joined by a linear head.

mod checkpoint;
mod conv;

pub use checkpoint::{load_checkpoint, load_checkpoint_with, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{avg_pool2, avg_pool2_on_tape, conv2d, conv2d_on_tape};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::init::{xavier_matrix, xavier_uniform};
use crate::nonlocal::Normalizer;
use crate::rlstm::{RLSTMIds, RLSTMParams};
use crate::synthdata::{segment_sample, Modality, SampleMode, SynthVideo};
use crate::tensor::{BnMode, BnStats, Shape3, Tensor};

/// Which branches feed the classifier head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branches {
    #[default]
    Both,
    Local,
    Nonlocal,
}

impl Branches {
    pub fn local(self) -> bool {
        matches!(self, Branches::Both | Branches::Local)
    }

    pub fn nonlocal(self) -> bool {
        matches!(self, Branches::Both | Branches::Nonlocal)
    }

    fn count(self) -> usize {
        usize::from(self.local()) + usize::from(self.nonlocal())
    }
}

impl std::str::FromStr for Branches {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Branches::Both),
            "local" => Ok(Branches::Local),
            "nonlocal" | "non-local" => Ok(Branches::Nonlocal),
            other => Err(Error::Config(format!("unknown branch selection `{other}`"))),
        }
    }
}

/// Statistics the batch-norm layer normalises with while training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnTrainStats {
    /// Current batch statistics (running averages used only at inference).
    #[default]
    Batch,
    /// Running statistics in both phases; batches only nudge them.
    Moving,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Snippets per clip (T).
    pub segments: usize,
    /// Input frames are `frame_size × frame_size`.
    pub frame_size: usize,
    /// Channels after the first convolution.
    pub conv_channels: usize,
    /// Feature channels C entering both branches; must be even.
    pub channels: usize,
    pub classes: usize,
    /// Drop probability of the dropout before the head.
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_train: BnTrainStats,
    /// Spatial-stream weight used when fusing two streams.
    pub fusion_weight: f64,
    pub branches: Branches,
    pub normalizer: Normalizer,
    /// Input modality the model is trained on.
    pub stream: Modality,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            segments: 8,
            frame_size: 32,
            conv_channels: 4,
            channels: 8,
            classes: 6,
            dropout: 0.2,
            bn_momentum: 0.1,
            bn_train: BnTrainStats::Batch,
            fusion_weight: 0.5,
            branches: Branches::Both,
            normalizer: Normalizer::Softmax,
            stream: Modality::Appearance,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest useful configuration: 18×18 frames, 3×3×4 features, T=3,
    /// three classes, no dropout.
    pub fn tiny() -> Self {
        ModelConfig {
            segments: 3,
            frame_size: 18,
            conv_channels: 2,
            channels: 4,
            classes: 3,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    /// Feature-map geometry after the extractor: two rounds of valid 3×3
    /// convolution and 2×2 pooling.
    pub fn feature_shape(&self) -> Result<Shape3> {
        let side = |s: usize| s.checked_sub(2).map(|v| v / 2).and_then(|v| v.checked_sub(2)).map(|v| v / 2);
        match side(self.frame_size) {
            Some(h) if h >= 1 => Shape3::new(h, h, self.channels),
            _ => Err(Error::Config(format!("frame size {} too small for the extractor", self.frame_size))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_shape()?;
        if self.segments == 0 {
            return Err(Error::Config("segments must be at least 1".into()));
        }
        if self.conv_channels == 0 || self.classes == 0 {
            return Err(Error::Config("channel and class counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("drop probability {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("batch-norm momentum {} outside [0, 1]", self.bn_momentum)));
        }
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(Error::Config(format!("fusion weight {} outside [0, 1]", self.fusion_weight)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
}

impl BnIds {
    fn register(params: &mut ParamSet, prefix: &str, channels: usize) -> Result<Self> {
        Ok(BnIds {
            gamma: params.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]), false)?,
            beta: params.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]), false)?,
        })
    }
}

#[derive(Clone, Debug)]
struct NonLocalBranchIds {
    bn: BnIds,
    rlstm: RLSTMIds,
    expand: ParamId,
    post: ParamId,
}

#[derive(Clone, Debug)]
struct ModelIds {
    conv1_w: ParamId,
    bn1: BnIds,
    conv2_w: ParamId,
    bn2: BnIds,
    nonlocal: Option<NonLocalBranchIds>,
    fc_w: ParamId,
    fc_b: ParamId,
}

/// Training or inference forward pass.
pub enum Pass<'a> {
    /// Batch statistics (unless configured otherwise) and dropout driven by `rng`.
    Train { rng: &'a mut ChaCha8Rng },
    Infer,
}

impl Pass<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Pass::Train { .. })
    }
}

/// Result of a batched forward pass.
pub struct BatchForward {
    /// One `1×K` score node per clip.
    pub scores: Vec<Var>,
    /// `(mean, var)` of the batch at every batch-norm layer, in the order
    /// of [`Model::bn_stats`]; empty for inference passes.
    pub bn_batch: Vec<(Vec<f64>, Vec<f64>)>,
}

pub struct Model {
    config: ModelConfig,
    shape: Shape3,
    params: ParamSet,
    ids: ModelIds,
    /// Running statistics per batch-norm layer.
    bn: Vec<(&'static str, BnStats)>,
    /// Dropout stream; persisted in checkpoints.
    pub rng: ChaCha8Rng,
}

/// Batch-norm layers in the order their statistics are stored.
pub const BN_LAYERS: [&str; 3] = ["extractor.bn1", "extractor.bn2", "nonlocal.bn"];

fn conv_init(k: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Tensor {
    xavier_uniform(&[k, k, cin, cout], k * k * cin, k * k * cout, rng)
}

impl Model {
    /// Xavier-initialised model; all randomness comes from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let shape = config.feature_shape()?;
        let c = config.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let conv1_w = params.insert("extractor.conv1.weight", conv_init(3, 1, config.conv_channels, &mut rng), true)?;
        let bn1 = BnIds::register(&mut params, BN_LAYERS[0], config.conv_channels)?;
        let conv2_w = params.insert("extractor.conv2.weight", conv_init(3, config.conv_channels, c, &mut rng), true)?;
        let bn2 = BnIds::register(&mut params, BN_LAYERS[1], c)?;
        let mut bn = vec![
            (BN_LAYERS[0], BnStats::new(config.conv_channels)),
            (BN_LAYERS[1], BnStats::new(c)),
        ];
        let nonlocal = if config.branches.nonlocal() {
            let nl_bn = BnIds::register(&mut params, BN_LAYERS[2], c)?;
            bn.push((BN_LAYERS[2], BnStats::new(c)));
            let rlstm = RLSTMIds::register(&mut params, "nonlocal.rlstm", RLSTMParams::xavier(c, &mut rng))?;
            let expand = params.insert("nonlocal.expand.weight", xavier_matrix(c / 2, c, &mut rng), true)?;
            let post = params.insert("nonlocal.post.weight", conv_init(3, c, c, &mut rng), true)?;
            Some(NonLocalBranchIds {
                bn: nl_bn,
                rlstm,
                expand,
                post,
            })
        } else {
            None
        };
        let width = c * config.branches.count();
        let fc_w = params.insert("head.fc.weight", xavier_matrix(width, config.classes, &mut rng), true)?;
        let fc_b = params.insert("head.fc.bias", Tensor::zeros(&[1, config.classes]), false)?;
        Ok(Model {
            shape,
            bn,
            params,
            ids: ModelIds {
                conv1_w,
                bn1,
                conv2_w,
                bn2,
                nonlocal,
                fc_w,
                fc_b,
            },
            rng,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn feature_shape(&self) -> Shape3 {
        self.shape
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Running statistics of every batch-norm layer, extractor first.
    pub fn bn_stats(&self) -> &[(&'static str, BnStats)] {
        &self.bn
    }

    pub fn set_bn_stats(&mut self, layer: &str, stats: BnStats) -> Result<()> {
        let slot = self
            .bn
            .iter_mut()
            .find(|(name, _)| *name == layer)
            .ok_or_else(|| Error::Config(format!("no batch-norm layer `{layer}`")))?;
        let c = slot.1.mean.len();
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape("set_bn_stats", &[c], &[stats.mean.len()]));
        }
        slot.1 = stats;
        Ok(())
    }

    /// Moves the running statistics towards the statistics of a batch, one
    /// `(mean, var)` per layer as reported in [`BatchForward::bn_batch`].
    pub fn update_bn(&mut self, batch: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        if batch.len() != self.bn.len() {
            return Err(Error::Config(format!(
                "{} batch statistics for {} batch-norm layers",
                batch.len(),
                self.bn.len()
            )));
        }
        let momentum = self.config.bn_momentum;
        for ((_, stats), (mean, var)) in self.bn.iter_mut().zip(batch) {
            *stats = stats.blend(mean, var, momentum);
        }
        Ok(())
    }

    fn bn_mode(&self, train: bool) -> BnMode {
        if train && self.config.bn_train == BnTrainStats::Batch {
            BnMode::Train
        } else {
            BnMode::Infer
        }
    }

    /// Batch norm over the rows of all `parts` together; returns the
    /// normalised parts and the batch statistics.
    fn bn_rows(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        parts: &[Var],
        layer: usize,
        ids: BnIds,
        train: bool,
    ) -> Result<(Vec<Var>, (Vec<f64>, Vec<f64>))> {
        let stacked = tape.concat(parts, 0)?;
        let (gamma, beta) = (tape.param(params, ids.gamma), tape.param(params, ids.beta));
        let bn = tape.batch_norm(stacked, gamma, beta, &self.bn[layer].1, self.bn_mode(train))?;
        let mut row = 0;
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            let n = tape.value(p).shape()[0];
            out.push(tape.slice_rows(bn.y, row, row + n)?);
            row += n;
        }
        Ok((out, (bn.batch_mean, bn.batch_var)))
    }

    /// Extractor on the tape for a batch of `S×S` frames, each becoming
    /// `(H·W)×C` rows. Each convolution is followed by batch norm over all
    /// frames of the batch, then ReLU and 2×2 average pooling.
    pub fn features_on_tape(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        frames: &[&Tensor],
        train: bool,
    ) -> Result<(Vec<Var>, Vec<(Vec<f64>, Vec<f64>)>)> {
        let s = self.config.frame_size;
        let mut xs = Vec::with_capacity(frames.len());
        for f in frames {
            if f.shape() != [s, s] {
                return Err(Error::shape("extract_features", &[s, s], f.shape()));
            }
            let x = tape.leaf((*f).clone());
            xs.push(tape.reshape(x, &[s, s, 1])?);
        }
        let mut stats = Vec::with_capacity(2);
        let layers = [(self.ids.conv1_w, self.ids.bn1), (self.ids.conv2_w, self.ids.bn2)];
        for (layer, (w, bn)) in layers.into_iter().enumerate() {
            let w = tape.param(params, w);
            let mut rows = Vec::with_capacity(xs.len());
            let mut grid = [0; 3];
            for &x in &xs {
                let y = conv2d_on_tape(tape, x, w, None, 0)?;
                let &[h, wd, c] = tape.value(y).shape() else { unreachable!() };
                grid = [h, wd, c];
                rows.push(tape.reshape(y, &[h * wd, c])?);
            }
            let (normed, st) = self.bn_rows(params, tape, &rows, layer, bn, train)?;
            stats.push(st);
            xs = normed
                .into_iter()
                .map(|y| {
                    let y = tape.reshape(y, &grid)?;
                    let y = tape.relu(y);
                    avg_pool2_on_tape(tape, y)
                })
                .collect::<Result<Vec<_>>>()?;
        }
        let rows = xs
            .into_iter()
            .map(|y| tape.reshape(y, &[self.shape.positions(), self.shape.c]))
            .collect::<Result<Vec<_>>>()?;
        Ok((rows, stats))
    }

    /// Feature maps `H×W×C` of one frame, inference mode.
    pub fn extract_features(&self, frame: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (v, _) = self.features_on_tape(&self.params, &mut tape, &[frame], false)?;
        tensor_reshape(tape.value(v[0]), &[self.shape.h, self.shape.w, self.shape.c])
    }

    /// Non-local branch over a batch of clips; `clips[b][t]` are `(H·W)×C`
    /// feature rows. Batch norm sees all rows of the batch together.
    fn nonlocal_on_tape(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        clips: &[Vec<Var>],
        train: bool,
    ) -> Result<(Vec<Var>, (Vec<f64>, Vec<f64>))> {
        let ids = self.ids.nonlocal.as_ref().ok_or_else(|| Error::Config("non-local branch disabled".into()))?;
        let n = self.shape.positions();
        let c = self.shape.c;
        let all: Vec<Var> = clips.iter().flatten().copied().collect();
        let (normed, stats) = self.bn_rows(params, tape, &all, 2, ids.bn, train)?;
        let expand = tape.param(params, ids.expand);
        let post = tape.param(params, ids.post);
        let mut out = Vec::with_capacity(clips.len());
        let mut row = 0;
        for clip in clips {
            let xs = &normed[row..row + clip.len()];
            row += clip.len();
            let state = ids.rlstm.sequence(tape, params, xs, self.config.normalizer)?;
            let u = tape.position_linear(state.h, expand)?;
            // residual 3×3 block
            let grid = tape.reshape(u, &[self.shape.h, self.shape.w, c])?;
            let act = tape.relu(grid);
            let conv = conv2d_on_tape(tape, act, post, None, 1)?;
            let conv = tape.reshape(conv, &[n, c])?;
            let y = tape.add(u, conv)?;
            out.push(tape.reduce_mean(y, 0)?);
        }
        Ok((out, stats))
    }

    /// Concatenation, dropout (training only) and the fully connected layer.
    fn head_on_tape(&self, params: &ParamSet, tape: &mut Tape, parts: &[Var], pass: &mut Pass<'_>) -> Result<Var> {
        let mut x = tape.concat(parts, 1)?;
        if let Pass::Train { rng } = pass {
            if self.config.dropout > 0.0 {
                x = tape.dropout(x, self.config.dropout, *rng)?;
            }
        }
        let (w, b) = (tape.param(params, self.ids.fc_w), tape.param(params, self.ids.fc_b));
        let s = tape.matmul(x, w)?;
        tape.add(s, b)
    }

    /// Records the full model on `tape` for a batch of clips (each a list of
    /// `S×S` snippets), reading parameters from `params`.
    pub fn forward_with(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        clips: &[&[Tensor]],
        mut pass: Pass<'_>,
    ) -> Result<BatchForward> {
        if clips.is_empty() {
            return Err(Error::EmptySequence);
        }
        if clips.iter().any(|c| c.is_empty()) {
            return Err(Error::EmptySequence);
        }
        let frames: Vec<&Tensor> = clips.iter().flat_map(|c| c.iter()).collect();
        let (rows, mut bn_batch) = self.features_on_tape(params, tape, &frames, pass.is_train())?;
        let mut rest = rows.as_slice();
        let feats: Vec<Vec<Var>> = clips
            .iter()
            .map(|c| {
                let (head, tail) = rest.split_at(c.len());
                rest = tail;
                head.to_vec()
            })
            .collect();
        let local = if self.config.branches.local() {
            Some(feats.iter().map(|f| local_on_tape(tape, f)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let nonlocal = if self.config.branches.nonlocal() {
            let (v, stats) = self.nonlocal_on_tape(params, tape, &feats, pass.is_train())?;
            bn_batch.push(stats);
            Some(v)
        } else {
            None
        };
        if !pass.is_train() {
            bn_batch.clear();
        }
        let mut scores = Vec::with_capacity(clips.len());
        for b in 0..clips.len() {
            let parts: Vec<Var> = [local.as_ref().map(|v| v[b]), nonlocal.as_ref().map(|v| v[b])]
                .into_iter()
                .flatten()
                .collect();
            scores.push(self.head_on_tape(params, tape, &parts, &mut pass)?);
        }
        Ok(BatchForward { scores, bn_batch })
    }

    pub fn forward(&self, tape: &mut Tape, clips: &[&[Tensor]], pass: Pass<'_>) -> Result<BatchForward> {
        self.forward_with(&self.params, tape, clips, pass)
    }

    /// Pre-softmax class scores `[K]` for one clip, inference mode.
    pub fn scores(&self, snippets: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &[snippets], Pass::Infer)?;
        tensor_reshape(tape.value(out.scores[0]), &[self.config.classes])
    }

    /// Non-local branch output `[C]` for `H×W×C` feature maps, inference mode.
    pub fn nonlocal_branch(&self, features: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let rows = self.feature_rows(&mut tape, features)?;
        let (out, _) = self.nonlocal_on_tape(&self.params, &mut tape, &[rows], false)?;
        tensor_reshape(tape.value(out[0]), &[self.shape.c])
    }

    /// Head scores `[K]` from branch outputs, inference mode. Branch vectors
    /// must match the configured branch selection.
    pub fn classify(&self, local: Option<&Tensor>, nonlocal: Option<&Tensor>) -> Result<Tensor> {
        if local.is_some() != self.config.branches.local() || nonlocal.is_some() != self.config.branches.nonlocal() {
            return Err(Error::Config("branch vectors do not match the configured branches".into()));
        }
        let mut tape = Tape::new();
        let parts = [local, nonlocal]
            .into_iter()
            .flatten()
            .map(|t| Ok(tape.leaf(tensor_reshape(t, &[1, self.shape.c])?)))
            .collect::<Result<Vec<_>>>()?;
        let s = self.head_on_tape(&self.params, &mut tape, &parts, &mut Pass::Infer)?;
        tensor_reshape(tape.value(s), &[self.config.classes])
    }

    fn feature_rows(&self, tape: &mut Tape, features: &[Tensor]) -> Result<Vec<Var>> {
        if features.is_empty() {
            return Err(Error::EmptySequence);
        }
        let expect = [self.shape.h, self.shape.w, self.shape.c];
        features
            .iter()
            .map(|f| {
                if f.shape() != expect {
                    return Err(Error::shape("nonlocal_branch", &expect, f.shape()));
                }
                Ok(tape.leaf(tensor_reshape(f, &[self.shape.positions(), self.shape.c])?))
            })
            .collect()
    }

    /// Scores averaged over `groups` deterministic passes, group `g` taking
    /// the snippet at relative offset `(g + 0.5)/groups` of every segment.
    pub fn inference_groups(&self, video: &SynthVideo, groups: usize) -> Result<Tensor> {
        if groups == 0 {
            return Err(Error::Config("groups must be at least 1".into()));
        }
        if video.modality != self.config.stream {
            return Err(Error::Data(format!(
                "model expects {:?} input, clip is {:?}",
                self.config.stream, video.modality
            )));
        }
        let mut acc = Tensor::zeros(&[self.config.classes]);
        for g in 0..groups {
            let idx = segment_sample::<ChaCha8Rng>(
                video.len(),
                self.config.segments,
                SampleMode::Equispaced { group: g, groups },
            )?;
            let snippets: Vec<Tensor> = idx.iter().map(|&i| video.frames[i].clone()).collect();
            acc.add_assign(&self.scores(&snippets)?)?;
        }
        Ok(crate::tensor::scale(&acc, 1.0 / groups as f64))
    }
}

fn tensor_reshape(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    crate::tensor::reshape(t, shape)
}

/// Spatial mean per snippet, then temporal mean: `1×C`.
fn local_on_tape(tape: &mut Tape, feats: &[Var]) -> Result<Var> {
    let pooled = feats
        .iter()
        .map(|&f| tape.reduce_mean(f, 0))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat(&pooled, 0)?;
    let out = order_free_mean(tape.value(stacked))?;
    Ok(tape.custom(&[stacked], out, Box::new(OrderFreeMean)))
}

/// Column means of a `T×C` matrix, summing each column in ascending order
/// of value so the result is bitwise independent of row order.
fn order_free_mean(x: &Tensor) -> Result<Tensor> {
    let (t, c) = x.dims2("temporal_mean")?;
    let mut out = Vec::with_capacity(c);
    let mut col = Vec::with_capacity(t);
    for j in 0..c {
        col.clear();
        col.extend((0..t).map(|i| x.at2(i, j)));
        col.sort_by(f64::total_cmp);
        out.push(col.iter().sum::<f64>() / t as f64);
    }
    Tensor::new(vec![1, c], out)
}

struct OrderFreeMean;

impl crate::autograd::CustomOp for OrderFreeMean {
    fn name(&self) -> &'static str {
        "temporal_mean"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let (t, c) = inputs[0].dims2("temporal_mean")?;
        let inv = 1.0 / t as f64;
        Ok(vec![Tensor::from_fn(&[t, c], |i| grad.data()[i % c] * inv)])
    }
}

/// Local branch on `H×W×C` feature maps: spatial then temporal average, `[C]`.
pub fn local_branch(features: &[Tensor]) -> Result<Tensor> {
    let first = features.first().ok_or(Error::EmptySequence)?;
    let &[h, w, c] = first.shape() else {
        return Err(Error::InvalidShape {
            op: "local_branch",
            shape: first.shape().to_vec(),
            reason: "expected H×W×C",
        });
    };
    let mut tape = Tape::new();
    let rows = features
        .iter()
        .map(|f| {
            if f.shape() != first.shape() {
                return Err(Error::shape("local_branch", first.shape(), f.shape()));
            }
            Ok(tape.leaf(tensor_reshape(f, &[h * w, c])?))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = local_on_tape(&mut tape, &rows)?;
    tensor_reshape(tape.value(out), &[c])
}

/// `w·a + (1−w)·b` on pre-softmax scores.
pub fn late_fusion(a: &Tensor, b: &Tensor, w: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("fusion weight {w} outside [0, 1]")));
    }
    if a.shape() != b.shape() {
        return Err(Error::shape("late_fusion", a.shape(), b.shape()));
    }
    Ok(Tensor::from_fn(a.shape(), |i| w * a.data()[i] + (1.0 - w) * b.data()[i]))
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &Tensor) -> usize {
    let mut best = 0;
    for (i, v) in scores.data().iter().enumerate() {
        if *v > scores.data()[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    fn frames(rng: &mut ChaCha8Rng, n: usize, s: usize) -> Vec<Tensor> {
        (0..n).map(|_| random(rng, &[s, s], 0.0, 1.0)).collect()
    }

    #[test]
    fn feature_geometry() {
        assert_eq!(ModelConfig::default().feature_shape().unwrap(), Shape3::new(6, 6, 8).unwrap());
        assert_eq!(ModelConfig::tiny().feature_shape().unwrap(), Shape3::new(3, 3, 4).unwrap());
        let bad = ModelConfig {
            frame_size: 9,
            ..ModelConfig::default()
        };
        assert!(Model::new(bad).is_err());
        let odd = ModelConfig {
            channels: 5,
            ..ModelConfig::default()
        };
        assert!(Model::new(odd).is_err());
    }

    #[test]
    fn zero_extractor_gives_zero_features() {
        let mut m = Model::new(ModelConfig::tiny()).unwrap();
        for name in ["extractor.conv1.weight", "extractor.conv2.weight"] {
            let id = m.params().id(name).unwrap();
            let z = Tensor::zeros(m.params().value(id).shape());
            m.params_mut().set_value(id, z).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = m.extract_features(&frames(&mut rng, 1, 18)[0]).unwrap();
        assert_eq!(f.shape(), &[3, 3, 4]);
        assert_eq!(f.max_abs(), 0.0);
        assert!(m.extract_features(&Tensor::zeros(&[17, 17])).is_err());
    }

    #[test]
    fn local_branch_means() {
        let a = Tensor::full(&[2, 2, 3], 1.5);
        let b = Tensor::full(&[2, 2, 3], -0.5);
        assert_eq!(local_branch(&[a, b]).unwrap().data(), &[0.5, 0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fs: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[3, 2, 2], -1.0, 1.0)).collect();
        let got = local_branch(&fs).unwrap();
        for c in 0..2 {
            let mut total = 0.0;
            for f in &fs {
                let mut s = 0.0;
                for p in 0..6 {
                    s += f.data()[p * 2 + c];
                }
                total += s / 6.0;
            }
            assert!((got.data()[c] - total / 4.0).abs() < 1e-12);
        }
        let rev: Vec<Tensor> = fs.iter().rev().cloned().collect();
        assert_eq!(local_branch(&rev).unwrap(), got);
    }

    #[test]
    fn nonlocal_branch_properties() {
        let cfg = ModelConfig::tiny();
        let mut m = Model::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fs: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[3, 3, 4], -1.0, 1.0)).collect();
        let fwd = m.nonlocal_branch(&fs).unwrap();
        let rev: Vec<Tensor> = fs.iter().rev().cloned().collect();
        assert!(fwd.max_abs_diff(&m.nonlocal_branch(&rev).unwrap()) > 1e-6);

        // T=1 against an explicit single step
        let one = m.nonlocal_branch(&fs[..1]).unwrap();
        let ids = m.ids.nonlocal.clone().unwrap();
        let bn_x = crate::tensor::batch_norm(
            &tensor_reshape(&fs[0], &[9, 4]).unwrap(),
            m.params().value(ids.bn.gamma),
            m.params().value(ids.bn.beta),
            &m.bn_stats()[2].1,
            BnMode::Infer,
            0.1,
        )
        .unwrap()
        .0;
        let p = ids.rlstm.values(m.params());
        let st = crate::rlstm::rlstm_step(&bn_x, &crate::rlstm::RLSTMState::zeros(9, 2), &p).unwrap();
        let u = crate::tensor::position_linear(&st.h, m.params().value(ids.expand)).unwrap();
        let grid = tensor_reshape(&u, &[3, 3, 4]).unwrap();
        let post = conv2d(&crate::tensor::relu(&grid), m.params().value(ids.post), None, 1).unwrap();
        let y = crate::tensor::add(&grid, &post).unwrap();
        let expect = crate::tensor::reduce_mean(&tensor_reshape(&y, &[9, 4]).unwrap(), 0).unwrap();
        assert!(one.max_abs_diff(&tensor_reshape(&expect, &[4]).unwrap()) < 1e-12);

        // zero recurrent weights: h stays 0 and the bias-free tail gives 0
        for id in m.params().ids().collect::<Vec<_>>() {
            if m.params().get(id).name.starts_with("nonlocal.rlstm") {
                let z = Tensor::zeros(m.params().value(id).shape());
                m.params_mut().set_value(id, z).unwrap();
            }
        }
        assert_eq!(m.nonlocal_branch(&fs).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn head_matches_matmul_and_ties() {
        let mut m = Model::new(ModelConfig::tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = random(&mut rng, &[4], -1.0, 1.0);
        let n = random(&mut rng, &[4], -1.0, 1.0);
        let w = m.params().value(m.ids.fc_w).clone();
        let got = m.classify(Some(&l), Some(&n)).unwrap();
        for k in 0..3 {
            let mut s = 0.0;
            for i in 0..8 {
                let x = if i < 4 { l.data()[i] } else { n.data()[i - 4] };
                s += x * w.at2(i, k);
            }
            assert!((got.data()[k] - s).abs() < 1e-12);
        }
        let id = m.ids.fc_w;
        m.params_mut().set_value(id, Tensor::zeros(&[8, 3])).unwrap();
        let tied = m.classify(Some(&l), Some(&n)).unwrap();
        assert_eq!(argmax(&tied), 0);
        assert!(m.classify(Some(&l), None).is_err());
    }

    #[test]
    fn train_without_dropout_matches_inference_in_moving_mode() {
        let cfg = ModelConfig {
            bn_train: BnTrainStats::Moving,
            ..ModelConfig::tiny()
        };
        let m = Model::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clip = frames(&mut rng, 3, 18);
        let mut tape = Tape::new();
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let out = m.forward(&mut tape, &[&clip], Pass::Train { rng: &mut drng }).unwrap();
        let train = tensor_reshape(tape.value(out.scores[0]), &[3]).unwrap();
        assert_eq!(train, m.scores(&clip).unwrap());
    }

    #[test]
    fn fusion() {
        let a = Tensor::new(vec![3], vec![1.0, 2.0, 0.5]).unwrap();
        let b = Tensor::new(vec![3], vec![0.0, -1.0, 3.0]).unwrap();
        assert_eq!(late_fusion(&a, &b, 1.0).unwrap(), a);
        assert_eq!(late_fusion(&a, &b, 0.5).unwrap().data(), &[0.5, 0.5, 1.75]);
        // 0.45·a + 0.55·b = [0.45, 0.35, 1.875] → class 2
        let f = late_fusion(&a, &b, 0.45).unwrap();
        assert_eq!(argmax(&f), 2);
        assert!(late_fusion(&a, &b, 1.5).is_err());
        let shift = |t: &Tensor| Tensor::from_fn(t.shape(), |i| t.data()[i] + 7.25);
        assert_eq!(argmax(&late_fusion(&shift(&a), &shift(&b), 0.3).unwrap()), argmax(&late_fusion(&a, &b, 0.3).unwrap()));
    }

    #[test]
    fn groups_average() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // singleton segments: every group picks the same frames
        let video = SynthVideo {
            frames: frames(&mut rng, 3, 18),
            label: 0,
            modality: Modality::Appearance,
        };
        let one = m.inference_groups(&video, 1).unwrap();
        assert_eq!(one, m.scores(&video.frames).unwrap());
        assert!(m.inference_groups(&video, 3).unwrap().max_abs_diff(&one) < 1e-15);

        let long = SynthVideo {
            frames: frames(&mut rng, 6, 18),
            label: 0,
            modality: Modality::Appearance,
        };
        let g0 = m.scores(&[long.frames[0].clone(), long.frames[2].clone(), long.frames[4].clone()]).unwrap();
        let g1 = m.scores(&[long.frames[1].clone(), long.frames[3].clone(), long.frames[5].clone()]).unwrap();
        assert!(g0.max_abs_diff(&g1) > 1e-9);
        let two = m.inference_groups(&long, 2).unwrap();
        for k in 0..3 {
            assert!((two.data()[k] - (g0.data()[k] + g1.data()[k]) / 2.0).abs() < 1e-12);
        }
        let short = SynthVideo {
            frames: frames(&mut rng, 2, 18),
            label: 0,
            modality: Modality::Appearance,
        };
        assert!(m.inference_groups(&short, 1).is_err());
    }

    #[test]
    fn end_to_end_gradients_tiny() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let clips: Vec<Vec<Tensor>> = (0..2).map(|_| frames(&mut rng, 3, 18)).collect();
        let refs: Vec<&[Tensor]> = clips.iter().map(|c| c.as_slice()).collect();
        let report = grad_check(m.params(), 1e-5, 1e-4, |tape, p| {
            let mut drng = ChaCha8Rng::seed_from_u64(0);
            let out = m.forward_with(p, tape, &refs, Pass::Train { rng: &mut drng })?;
            let l0 = tape.softmax_cross_entropy(out.scores[0], 1)?;
            let l1 = tape.softmax_cross_entropy(out.scores[1], 2)?;
            let l = tape.add(l0, l1)?;
            Ok(tape.scale(l, 0.5))
        })
        .unwrap();
        assert!(report.passed(), "max rel {} {:?}", report.max_rel_error, report.failures.first());
    }
}
