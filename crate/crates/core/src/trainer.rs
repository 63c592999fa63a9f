//! Mini-batch SGD for the binary, pairwise and category-aware modes.
//!
//! A batch is a set of training references. All 22 filtered variants of each
//! reference go through the shared column once, and every labelled pair of
//! that reference is read off the resulting rows, so each image is embedded
//! once per step no matter how many pairs it appears in.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{decode_checkpoint, encode_checkpoint, Gradients, Graph, LrnConfig, ParamSet, Tensor};
use crate::dataset::{Corpus, QualityLabel, TrainingPair};
use crate::error::{Error, Result};
use crate::filters::{apply_filter, FilterId, FILTER_COUNT};
use crate::imagecore::{hflip, random_crop, resize, Image};
use crate::models::{build_model, image_batch, test_view, Arch, ColumnModel, Mode, Profile, Variant};
use crate::objectives::{multitask_node, paircomp_node};
use crate::rng::Rng;

const MOMENTUM_PREFIX: &str = "momentum/";
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub variant: Variant,
    pub profile: Profile,
    /// Defaults to the profile's input side.
    #[serde(default)]
    pub input_side: Option<usize>,
    #[serde(default)]
    pub spp_levels: Option<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// References per step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lambda_cate: f64,
    /// Learning rate multiplier applied at each decay boundary.
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    /// Epochs between decays; 0 means a third of the run.
    #[serde(default)]
    pub lr_decay_every: usize,
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Weight initialization; only `uniform_fan_in` is implemented.
    #[serde(default = "default_init")]
    pub init: String,
    /// Constants of both local response normalization layers.
    #[serde(default)]
    pub lrn: LrnConfig,
}

fn default_lr_decay() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

fn default_init() -> String {
    "uniform_fan_in".into()
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::PairComp,
            variant: Variant::RapidReduced,
            profile: Profile::Desk,
            input_side: None,
            spp_levels: None,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 10.0,
            batch_size: 4,
            epochs: 9,
            seed: 0,
            lambda_cate: 1.0,
            lr_decay: default_lr_decay(),
            lr_decay_every: 0,
            augment: true,
            init: default_init(),
            lrn: LrnConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn arch(&self) -> Arch {
        let base = match self.profile {
            Profile::Canonical => Arch::canonical(self.variant),
            Profile::Desk => Arch::desk(self.variant),
        };
        Arch {
            input_side: self.input_side.unwrap_or(base.input_side),
            spp_levels: self.spp_levels,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("grad_clip", self.grad_clip),
            ("lr_decay", self.lr_decay),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda_cate", self.lambda_cate),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::Config("momentum must be below 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        let lrn = &self.lrn;
        if lrn.size % 2 == 0
            || !(lrn.alpha.is_finite() && lrn.alpha >= 0.0)
            || !(lrn.beta.is_finite() && lrn.beta >= 0.0)
            || !(lrn.k.is_finite() && lrn.k > 0.0)
        {
            return Err(Error::Config(format!("invalid lrn constants {lrn:?}")));
        }
        if self.init != "uniform_fan_in" {
            return Err(Error::Config(format!("unknown init `{}`", self.init)));
        }
        self.arch().validate()
    }

    /// Learning rate in force during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let every = if self.lr_decay_every == 0 {
            self.epochs.div_ceil(3)
        } else {
            self.lr_decay_every
        };
        self.learning_rate * self.lr_decay.powi((epoch / every.max(1)) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// `v <- momentum v + g + weight_decay w`, `w <- w - lr v`, where `g` is
/// first rescaled so its global norm is at most `grad_clip`.
pub fn sgd_step(
    params: &mut ParamSet<f32>,
    velocity: &mut [Tensor<f32>],
    grads: &Gradients<f32>,
    lr: f64,
    cfg: &SgdConfig,
) -> Result<StepStats> {
    if grads.tensors.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.tensors.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.tensors_mut().iter().zip(&grads.tensors).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
    }
    let norm = grads.global_norm();
    let clipped = norm > cfg.grad_clip;
    let scale = if clipped { (cfg.grad_clip / norm) as f32 } else { 1.0 };
    let (mu, wd, lr) = (cfg.momentum as f32, cfg.weight_decay as f32, lr as f32);
    for ((p, g), v) in params.tensors_mut().iter_mut().zip(&grads.tensors).zip(velocity.iter_mut()) {
        let vd = v.data_mut();
        for ((w, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(vd.iter_mut()) {
            *vv = mu * *vv + gv * scale + wd * *w;
            *w -= lr * *vv;
        }
    }
    Ok(StepStats {
        grad_norm: norm,
        clipped,
    })
}

/// Everything the loop reads: reference images, preference pairs (or
/// quality labels for the binary mode) and the ids reserved for testing.
#[derive(Clone, Debug, Default)]
pub struct TrainData<'a> {
    pub corpus: Option<&'a Corpus>,
    pub pairs: Vec<TrainingPair>,
    pub quality: Vec<QualityLabel>,
    pub test_refs: BTreeSet<String>,
    /// Pairs scored after every epoch; never trained on.
    pub held_out: Vec<TrainingPair>,
}

impl<'a> TrainData<'a> {
    fn corpus(&self) -> Result<&'a Corpus> {
        self.corpus.ok_or(Error::EmptySource)
    }

    fn check_leakage(&self) -> Result<()> {
        let ids = self
            .pairs
            .iter()
            .map(|p| &p.ref_id)
            .chain(self.quality.iter().map(|q| &q.ref_id));
        for id in ids {
            if self.test_refs.contains(id) {
                return Err(Error::DataLeakage(id.clone()));
            }
        }
        Ok(())
    }

    /// Training references in id order with their pairs and quality labels.
    pub fn by_reference(&self, mode: Mode) -> BTreeMap<String, RefItems> {
        let mut out: BTreeMap<String, RefItems> = BTreeMap::new();
        match mode {
            Mode::Binary => {
                for q in &self.quality {
                    out.entry(q.ref_id.clone()).or_default().quality[q.filter.index()] = Some(q.high);
                }
            }
            Mode::PairComp | Mode::PairCompCate => {
                for p in &self.pairs {
                    out.entry(p.ref_id.clone())
                        .or_default()
                        .pairs
                        .push((p.preferred.index(), p.rejected.index()));
                }
            }
        }
        out
    }
}

/// Training items of one reference: preference pairs as filter indices, or
/// per-filter quality labels.
#[derive(Clone, Debug, Default)]
pub struct RefItems {
    pub pairs: Vec<(usize, usize)>,
    pub quality: [Option<bool>; FILTER_COUNT],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss.
    pub loss: f64,
    pub clipped_steps: usize,
    /// Mean pre-clipping gradient norm.
    pub grad_norm: f64,
    /// Share of held-out pairs ranked the labelled way round.
    pub held_out_accuracy: Option<f64>,
    pub seconds: f64,
}

/// The augmented training view: resize, random crop, random horizontal flip.
pub fn train_view(arch: &Arch, img: &Image, rng: &mut Rng) -> Result<Image> {
    let r = arch.resize_side();
    let resized = if img.width() == r && img.height() == r {
        img.clone()
    } else {
        resize(img, r, r)?
    };
    let cropped = random_crop(&resized, arch.input_side, arch.input_side, rng)?;
    Ok(if rng.coin() { hflip(&cropped) } else { cropped })
}

#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    model: ColumnModel<f32>,
    velocity: Vec<Tensor<f32>>,
    /// Completed epochs.
    epoch: usize,
    loss_trace: Vec<f64>,
    metrics: Vec<EpochMetrics>,
}

/// What one step trains on, already laid out as tensors.
pub struct StepInput {
    /// `[N, 3, S, S]` candidate images.
    pub images: Tensor<f32>,
    /// `(preferred row, rejected row)` into `images`.
    pub pairs: Vec<(usize, usize)>,
    /// `[M, 3, S, S]` reference images for the category-aware mode.
    pub references: Option<Tensor<f32>>,
    /// Category label per reference row.
    pub categories: Vec<usize>,
    /// Reference row for each candidate row.
    pub owner: Vec<usize>,
    /// 0 = low, 1 = high per candidate row, binary mode only.
    pub quality: Vec<usize>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = build_model(cfg.arch(), cfg.mode, &mut Rng::derive(cfg.seed, &[STREAM_INIT]))?.with_lrn(cfg.lrn);
        let velocity = model.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            cfg,
            model,
            velocity,
            epoch: 0,
            loss_trace: Vec::new(),
            metrics: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ColumnModel<f32> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ColumnModel<f32> {
        &mut self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn loss_trace(&self) -> &[f64] {
        &self.loss_trace
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    /// Parameters, momentum buffers, config, completed epochs and loss trace.
    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        let mut all = self.model.params().clone();
        for ((name, _), v) in self.model.params().iter().zip(&self.velocity) {
            all.add(format!("{MOMENTUM_PREFIX}{name}"), v.clone());
        }
        let meta = serde_json::json!({
            "arch": self.model.arch(),
            "mode": self.model.mode(),
            "extra": {
                "config": self.cfg,
                "epoch": self.epoch,
                "loss_trace": self.loss_trace,
                "metrics": self.metrics,
            },
        });
        encode_checkpoint(&all, &meta)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let (all, meta) = decode_checkpoint::<f32>(bytes)?;
        let bad = |what: &str, e: serde_json::Error| Error::Checkpoint(format!("bad {what}: {e}"));
        let extra = &meta["extra"];
        let cfg: TrainConfig = serde_json::from_value(extra["config"].clone()).map_err(|e| bad("config", e))?;
        let epoch: usize = serde_json::from_value(extra["epoch"].clone()).map_err(|e| bad("epoch", e))?;
        let loss_trace: Vec<f64> =
            serde_json::from_value(extra["loss_trace"].clone()).map_err(|e| bad("loss trace", e))?;
        let metrics: Vec<EpochMetrics> =
            serde_json::from_value(extra["metrics"].clone()).map_err(|e| bad("metrics", e))?;
        let (params, momentum) = split_momentum(&all);
        let model = ColumnModel::assemble(cfg.arch(), cfg.mode, params)?.with_lrn(cfg.lrn);
        let velocity: Vec<Tensor<f32>> = model
            .params()
            .iter()
            .map(|(name, t)| {
                momentum
                    .find(&format!("{MOMENTUM_PREFIX}{name}"))
                    .map(|id| momentum.get(id).clone())
                    .filter(|v| v.shape() == t.shape())
                    .ok_or_else(|| Error::Checkpoint(format!("missing momentum for {name}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            model,
            velocity,
            epoch,
            loss_trace,
            metrics,
        })
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.cfg.momentum,
            weight_decay: self.cfg.weight_decay,
            grad_clip: self.cfg.grad_clip,
        }
    }

    /// Loss of the current parameters on `input`, without updating.
    pub fn loss_on(&self, input: &StepInput) -> Result<f64> {
        let (mut g, loss, feeds) = self.graph_for(input)?;
        g.forward(self.model.params(), &feeds)?;
        Ok(g.value(loss).item() as f64)
    }

    fn graph_for(
        &self,
        input: &StepInput,
    ) -> Result<(Graph<f32>, crate::autodiff::NodeId, BTreeMap<String, Tensor<f32>>)> {
        let m = &self.model;
        let mut g = Graph::new();
        let x = g.input("images");
        let e = m.column(&mut g, x);
        let mut feeds = BTreeMap::new();
        feeds.insert("images".to_string(), input.images.clone());
        let loss = match m.mode() {
            Mode::PairComp => paircomp_node(&mut g, e, &input.pairs),
            Mode::PairCompCate => {
                let refs = input.references.clone().ok_or_else(|| {
                    Error::ModelModeMismatch("category-aware step without reference images".into())
                })?;
                feeds.insert("references".to_string(), refs);
                let rx = g.input("references");
                let r = m.column(&mut g, rx);
                let logits = m.category_logits(&mut g, r)?;
                let per_row = g.gather(r, input.owner.clone());
                let fused = m.fuse_nodes(&mut g, e, per_row)?;
                multitask_node(&mut g, fused, &input.pairs, logits, input.categories.clone(), self.cfg.lambda_cate)
            }
            Mode::Binary => {
                let logits = m.quality_logits(&mut g, e)?;
                g.softmax_xent(logits, input.quality.clone())
            }
        };
        Ok((g, loss, feeds))
    }

    /// One forward/backward/update on prepared tensors; returns the loss
    /// before the update.
    pub fn step(&mut self, input: &StepInput, lr: f64) -> Result<(f64, StepStats)> {
        let (mut g, loss, feeds) = self.graph_for(input)?;
        let diverged = |loss: f64| Error::DivergenceDetected {
            epoch: self.epoch,
            batch: 0,
            loss,
        };
        match g.forward(self.model.params(), &feeds) {
            Ok(()) => {}
            Err(Error::NonFiniteValue(_)) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e),
        }
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(diverged(value));
        }
        let grads = g.backward(self.model.params(), loss)?;
        let sgd = self.sgd();
        let stats = sgd_step(self.model.params_mut(), &mut self.velocity, &grads, lr, &sgd)?;
        Ok((value, stats))
    }

    /// Augmented tensors for a batch of training references.
    pub fn prepare_batch(
        &self,
        corpus: &Corpus,
        batch: &[(&str, &RefItems)],
        rng: &mut Rng,
    ) -> Result<StepInput> {
        let arch = *self.model.arch();
        let view = |img: &Image, rng: &mut Rng| -> Result<Image> {
            if self.cfg.augment {
                train_view(&arch, img, rng)
            } else {
                test_view(&arch, img)
            }
        };
        let mut candidates = Vec::new();
        let mut references = Vec::new();
        let mut input = StepInput {
            images: Tensor::zeros(&[0]),
            pairs: Vec::new(),
            references: None,
            categories: Vec::new(),
            owner: Vec::new(),
            quality: Vec::new(),
        };
        for (b, &(id, item)) in batch.iter().enumerate() {
            let reference = corpus
                .reference(id)
                .ok_or_else(|| Error::MissingFile(id.into()))?;
            let img = corpus.image(id)?;
            let base = candidates.len();
            match self.model.mode() {
                Mode::Binary => {
                    for f in FilterId::all() {
                        if let Some(high) = item.quality[f.index()] {
                            candidates.push(view(&apply_filter(img, f), rng)?);
                            input.quality.push(high as usize);
                        }
                    }
                }
                _ => {
                    for f in FilterId::all() {
                        candidates.push(view(&apply_filter(img, f), rng)?);
                        input.owner.push(b);
                    }
                    input.pairs.extend(item.pairs.iter().map(|&(p, n)| (base + p, base + n)));
                }
            }
            if self.model.mode() == Mode::PairCompCate {
                references.push(view(img, rng)?);
                input.categories.push(reference.category.index());
            }
        }
        input.images = image_batch(&candidates.iter().collect::<Vec<_>>())?;
        if !references.is_empty() {
            input.references = Some(image_batch(&references.iter().collect::<Vec<_>>())?);
        }
        Ok(input)
    }

    /// Trains until `config().epochs` epochs are complete.
    pub fn fit(&mut self, data: &TrainData) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch(data)?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self, data: &TrainData) -> Result<EpochMetrics> {
        data.check_leakage()?;
        let corpus = data.corpus()?;
        let items: BTreeMap<String, RefItems> = data
            .by_reference(self.cfg.mode)
            .into_iter()
            .filter(|(_, it)| !it.pairs.is_empty() || it.quality.iter().any(Option::is_some))
            .collect();
        if items.is_empty() {
            return Err(Error::EmptySource);
        }
        let start = Instant::now();
        let epoch = self.epoch;
        let lr = self.cfg.lr_at(epoch);
        let mut order: Vec<(&str, &RefItems)> = items.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let mut shuffle = Rng::derive(self.cfg.seed, &[STREAM_SHUFFLE, epoch as u64]);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle.below_incl(i));
        }
        let (mut total, mut clipped, mut norms) = (0.0, 0, 0.0);
        let batches: Vec<&[(&str, &RefItems)]> = order.chunks(self.cfg.batch_size).collect();
        for (bi, batch) in batches.iter().enumerate() {
            let mut rng = Rng::derive(self.cfg.seed, &[STREAM_AUGMENT, epoch as u64, bi as u64]);
            let input = self.prepare_batch(corpus, batch, &mut rng)?;
            let (loss, stats) = self.step(&input, lr).map_err(|e| match e {
                Error::DivergenceDetected { loss, .. } => Error::DivergenceDetected {
                    epoch,
                    batch: bi,
                    loss,
                },
                other => other,
            })?;
            total += loss;
            clipped += stats.clipped as usize;
            norms += stats.grad_norm;
        }
        let loss = total / batches.len() as f64;
        let held_out_accuracy = if data.held_out.is_empty() {
            None
        } else {
            Some(pair_accuracy(&self.model, corpus, &data.held_out)?)
        };
        self.epoch += 1;
        self.loss_trace.push(loss);
        let m = EpochMetrics {
            epoch,
            lr,
            loss,
            clipped_steps: clipped,
            grad_norm: norms / batches.len() as f64,
            held_out_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.metrics.push(m.clone());
        Ok(m)
    }
}

fn split_momentum(all: &ParamSet<f32>) -> (ParamSet<f32>, ParamSet<f32>) {
    let (mut params, mut momentum) = (ParamSet::new(), ParamSet::new());
    for (name, t) in all.iter() {
        if name.starts_with(MOMENTUM_PREFIX) {
            momentum.add(name, t.clone());
        } else {
            params.add(name, t.clone());
        }
    }
    (params, momentum)
}

/// Test-view scores of all 22 variants of a reference.
pub fn reference_scores(model: &ColumnModel<f32>, corpus: &Corpus, ref_id: &str) -> Result<Vec<f64>> {
    let img = corpus.image(ref_id)?;
    let arch = *model.arch();
    let views: Vec<Image> = FilterId::all()
        .map(|f| test_view(&arch, &apply_filter(img, f)))
        .collect::<Result<_>>()?;
    let reference = match model.mode() {
        Mode::PairCompCate => Some(test_view(&arch, img)?),
        _ => None,
    };
    model.score_candidates(&views, reference.as_ref())
}

/// Share of pairs whose preferred filter scores strictly higher.
pub fn pair_accuracy(model: &ColumnModel<f32>, corpus: &Corpus, pairs: &[TrainingPair]) -> Result<f64> {
    let mut scores: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut correct = 0;
    for p in pairs {
        if !scores.contains_key(p.ref_id.as_str()) {
            scores.insert(&p.ref_id, reference_scores(model, corpus, &p.ref_id)?);
        }
        let s = &scores[p.ref_id.as_str()];
        correct += (s[p.preferred.index()] > s[p.rejected.index()]) as usize;
    }
    Ok(correct as f64 / pairs.len().max(1) as f64)
}

/// Builds a trainer from `cfg` and runs it to completion.
pub fn train(cfg: TrainConfig, data: &TrainData) -> Result<Trainer> {
    let mut t = Trainer::new(cfg)?;
    t.fit(data)?;
    Ok(t)
}
