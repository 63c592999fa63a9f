//! Column architectures, the shared-parameter multi-column assembly and the
//! category-fusion and quality heads.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    conv_out, decode_checkpoint, encode_checkpoint, spp_output_len, Graph, LrnConfig, NodeId,
    ParamId, ParamSet, Real, Tensor,
};
use crate::error::{Error, Result};
use crate::imagecore::{center_crop, resize, Image};
use crate::rng::Rng;

pub const EMBED_DIM: usize = 128;
pub const CATEGORY_COUNT: usize = 8;
/// Subtracted from every pixel before the first convolution.
pub const INPUT_MEAN: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    AlexNetReduced,
    RapidReduced,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::AlexNetReduced => "alexnet_reduced",
            Variant::RapidReduced => "rapid_reduced",
        })
    }
}

/// Input scale. `Desk` keeps every kernel size and channel count but works on
/// 64-pixel crops; the AlexNet-style stack then needs a stride-1 `pool2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Canonical,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Single column with a two-way high/low quality head.
    Binary,
    PairComp,
    PairCompCate,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Binary => "binary",
            Mode::PairComp => "paircomp",
            Mode::PairCompCate => "paircomp_cate",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Mode::Binary),
            "paircomp" => Ok(Mode::PairComp),
            "paircomp_cate" => Ok(Mode::PairCompCate),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub variant: Variant,
    pub profile: Profile,
    pub input_side: usize,
    /// Pyramid with `l x l` bins for every `l` in `1..=levels`, inserted in
    /// front of the first fully connected layer.
    #[serde(default)]
    pub spp_levels: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// Followed by a ReLU.
    Conv {
        name: &'static str,
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Pool {
        name: &'static str,
        window: usize,
        stride: usize,
    },
    Lrn {
        name: &'static str,
    },
    Spp {
        levels: usize,
    },
    Fc {
        name: &'static str,
        out: usize,
        relu: bool,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match *self {
            LayerSpec::Conv { name, .. }
            | LayerSpec::Pool { name, .. }
            | LayerSpec::Lrn { name }
            | LayerSpec::Fc { name, .. } => name,
            LayerSpec::Spp { .. } => "spp",
        }
    }
}

/// Output shape after one layer: `[C, H, W]` for maps, `[N]` for vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: &'static str,
    pub shape: Vec<usize>,
}

fn conv(name: &'static str, out: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        name,
        out,
        kernel,
        stride,
        pad: if stride == 1 { kernel / 2 } else { 0 },
    }
}

fn pool(name: &'static str, stride: usize) -> LayerSpec {
    LayerSpec::Pool {
        name,
        window: 3,
        stride,
    }
}

impl Arch {
    pub fn canonical(variant: Variant) -> Self {
        let input_side = match variant {
            Variant::AlexNetReduced => 227,
            Variant::RapidReduced => 224,
        };
        Self {
            variant,
            profile: Profile::Canonical,
            input_side,
            spp_levels: None,
        }
    }

    pub fn desk(variant: Variant) -> Self {
        Self {
            variant,
            profile: Profile::Desk,
            input_side: 64,
            spp_levels: None,
        }
    }

    pub fn with_spp(mut self, levels: usize) -> Self {
        self.spp_levels = Some(levels);
        self
    }

    /// Side the training pipeline resizes to before cropping.
    pub fn resize_side(&self) -> usize {
        match self.profile {
            Profile::Canonical => 256,
            Profile::Desk => self.input_side + self.input_side / 8,
        }
    }

    pub fn embed_dim(&self) -> usize {
        EMBED_DIM
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let pool2_stride = match (self.variant, self.profile) {
            (Variant::AlexNetReduced, Profile::Desk) => 1,
            _ => 2,
        };
        let lrn = |name| LayerSpec::Lrn { name };
        let mut layers = match self.variant {
            Variant::AlexNetReduced => vec![
                conv("conv1", 96, 11, 4),
                pool("pool1", 2),
                lrn("norm1"),
                conv("conv2", 256, 5, 1),
                pool("pool2", pool2_stride),
                lrn("norm2"),
                conv("conv3", 384, 3, 1),
                conv("conv4", 384, 3, 1),
                conv("conv5", 256, 3, 1),
                pool("pool5", 2),
            ],
            Variant::RapidReduced => vec![
                conv("conv1", 64, 11, 4),
                pool("pool1", 2),
                lrn("norm1"),
                conv("conv2", 64, 5, 1),
                pool("pool2", pool2_stride),
                lrn("norm2"),
                conv("conv3", 64, 3, 1),
                conv("conv4", 64, 3, 1),
            ],
        };
        if let Some(levels) = self.spp_levels {
            layers.push(LayerSpec::Spp { levels });
        }
        match self.variant {
            Variant::AlexNetReduced => {
                layers.push(LayerSpec::Fc {
                    name: "fc1",
                    out: 4096,
                    relu: true,
                });
                layers.push(LayerSpec::Fc {
                    name: "fc2",
                    out: EMBED_DIM,
                    relu: false,
                });
            }
            Variant::RapidReduced => layers.push(LayerSpec::Fc {
                name: "fc1",
                out: EMBED_DIM,
                relu: false,
            }),
        }
        layers
    }

    fn incompatible(&self, side: usize) -> Error {
        Error::IncompatibleInputSize {
            arch: self.variant.to_string(),
            side,
        }
    }

    /// Symbolic shape propagation for an `height x width` input.
    pub fn trace(&self, height: usize, width: usize) -> Result<Vec<LayerShape>> {
        let mut shape = vec![3, height, width];
        let mut out = Vec::new();
        for layer in self.layers() {
            shape = match layer {
                LayerSpec::Conv {
                    out: c,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    let h = conv_out(shape[1], kernel, stride, pad);
                    let w = conv_out(shape[2], kernel, stride, pad);
                    match (h, w) {
                        (Some(h), Some(w)) => vec![c, h, w],
                        _ => return Err(self.incompatible(height.min(width))),
                    }
                }
                LayerSpec::Pool { window, stride, .. } => {
                    let h = conv_out(shape[1], window, stride, 0);
                    let w = conv_out(shape[2], window, stride, 0);
                    match (h, w) {
                        (Some(h), Some(w)) => vec![shape[0], h, w],
                        _ => return Err(self.incompatible(height.min(width))),
                    }
                }
                LayerSpec::Lrn { .. } => shape,
                LayerSpec::Spp { levels } => vec![spp_output_len(levels, shape[0])],
                LayerSpec::Fc { out: n, .. } => vec![n],
            };
            out.push(LayerShape {
                name: layer.name(),
                shape: shape.clone(),
            });
        }
        Ok(out)
    }

    /// Errors unless the configured input side fits the stack.
    pub fn validate(&self) -> Result<()> {
        if self.spp_levels == Some(0) {
            return Err(Error::Config("spp_levels must be at least 1".into()));
        }
        self.trace(self.input_side, self.input_side).map(|_| ())
    }

    /// Width of the vector entering the first fully connected layer.
    pub fn fc_input_len(&self, height: usize, width: usize) -> Result<usize> {
        let trace = self.trace(height, width)?;
        let first_fc = self
            .layers()
            .iter()
            .position(|l| matches!(l, LayerSpec::Fc { .. }))
            .expect("every stack ends in fully connected layers");
        Ok(trace[first_fc - 1].shape.iter().product())
    }

    /// Whether an image of this size can be fed to the column.
    pub fn accepts(&self, height: usize, width: usize) -> bool {
        match self.spp_levels {
            Some(_) => self.trace(height, width).is_ok(),
            None => height == self.input_side && width == self.input_side,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
enum Bound {
    Conv {
        w: ParamId,
        b: ParamId,
        stride: usize,
        pad: usize,
    },
    Pool {
        window: usize,
        stride: usize,
    },
    Lrn,
    Spp(usize),
    Fc {
        dense: Dense,
        relu: bool,
    },
}

/// One parameter set shared by every column built from it, plus optional
/// heads for the category-aware and binary-quality modes.
#[derive(Clone, Debug)]
pub struct ColumnModel<T: Real = f32> {
    arch: Arch,
    mode: Mode,
    params: ParamSet<T>,
    layers: Vec<Bound>,
    category_head: Option<Dense>,
    fusion: Option<Dense>,
    quality_head: Option<Dense>,
    lrn: LrnConfig,
}

/// 128-d last-layer output of a column; its squared norm is the aesthetic score.
#[derive(Clone, Debug, PartialEq)]
pub struct AestheticEmbedding {
    pub values: Vec<f32>,
}

/// 128-d output of the fusion layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbedding {
    pub values: Vec<f32>,
}

/// A representation the pairwise objective can compare.
pub trait Embedding {
    fn values(&self) -> &[f32];

    fn score(&self) -> f64 {
        self.values().iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

impl Embedding for AestheticEmbedding {
    fn values(&self) -> &[f32] {
        &self.values
    }
}

impl Embedding for FusedEmbedding {
    fn values(&self) -> &[f32] {
        &self.values
    }
}

fn uniform_tensor<T: Real>(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64((rng.uniform() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// `U(-a, a)` with `a = gain * sqrt(3 / fan_in)`; gain is `sqrt(2)` in front
/// of a ReLU and 1 otherwise.
fn init_bound(fan_in: usize, relu: bool) -> f64 {
    let gain = if relu { 2f64.sqrt() } else { 1.0 };
    gain * (3.0 / fan_in as f64).sqrt()
}

fn add_dense<T: Real>(
    params: &mut ParamSet<T>,
    name: &str,
    inputs: usize,
    outputs: usize,
    relu: bool,
    rng: &mut Rng,
) {
    params.add(
        format!("{name}.weight"),
        uniform_tensor(&[outputs, inputs], init_bound(inputs, relu), rng),
    );
    params.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
}

/// Freshly initialized parameter set for `arch` and `mode`.
pub fn init_params<T: Real>(arch: &Arch, mode: Mode, rng: &mut Rng) -> Result<ParamSet<T>> {
    arch.validate()?;
    let mut params = ParamSet::new();
    let mut channels = 3;
    let fc_in = arch.fc_input_len(arch.input_side, arch.input_side)?;
    let mut width = fc_in;
    for layer in arch.layers() {
        match layer {
            LayerSpec::Conv {
                name, out, kernel, ..
            } => {
                let fan_in = channels * kernel * kernel;
                params.add(
                    format!("{name}.weight"),
                    uniform_tensor(&[out, channels, kernel, kernel], init_bound(fan_in, true), rng),
                );
                params.add(format!("{name}.bias"), Tensor::zeros(&[out]));
                channels = out;
            }
            LayerSpec::Fc { name, out, relu } => {
                add_dense(&mut params, name, width, out, relu, rng);
                width = out;
            }
            _ => {}
        }
    }
    match mode {
        Mode::Binary => add_dense(&mut params, "quality", EMBED_DIM, 2, false, rng),
        Mode::PairComp => {}
        Mode::PairCompCate => {
            add_dense(&mut params, "category", EMBED_DIM, CATEGORY_COUNT, false, rng);
            add_dense(&mut params, "fusion", 2 * EMBED_DIM, EMBED_DIM, false, rng);
        }
    }
    Ok(params)
}

/// Plain column (no heads) with fresh parameters.
pub fn build_column(arch: Arch, rng: &mut Rng) -> Result<ColumnModel> {
    build_model(arch, Mode::PairComp, rng)
}

/// Column plus the heads `mode` needs, with fresh parameters.
pub fn build_model(arch: Arch, mode: Mode, rng: &mut Rng) -> Result<ColumnModel> {
    let params = init_params(&arch, mode, rng)?;
    ColumnModel::assemble(arch, mode, params)
}

/// Stacks equally sized images into `[N, 3, H, W]`, mean-centred.
pub fn image_batch<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or(Error::EmptySource)?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.width() != w || img.height() != h {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes {w}x{h} and {}x{} images",
                img.width(),
                img.height()
            )));
        }
        data.extend(img.to_planar().into_iter().map(|v| T::from_f64((v - INPUT_MEAN) as f64)));
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

/// Test-time view: resize to the profile's resize side, then a centred crop
/// at the input side.
pub fn test_view(arch: &Arch, img: &Image) -> Result<Image> {
    let r = arch.resize_side();
    let resized = resize(img, r, r)?;
    center_crop(&resized, arch.input_side, arch.input_side)
}

const INFERENCE_CHUNK: usize = 32;

impl<T: Real> ColumnModel<T> {
    /// Binds a parameter set (fresh or loaded) to the layer stack, checking
    /// that every expected tensor is present with the right shape.
    pub fn assemble(arch: Arch, mode: Mode, params: ParamSet<T>) -> Result<Self> {
        let expected = init_params::<T>(&arch, mode, &mut Rng::new(0))?;
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors for {} {mode}, found {}",
                expected.len(),
                arch.variant,
                params.len()
            )));
        }
        for (name, t) in expected.iter() {
            let id = params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    params.get(id).shape(),
                    t.shape()
                )));
            }
        }
        let find = |name: String| params.find(&name).expect("checked above");
        let dense = |name: &str| Dense {
            weight: find(format!("{name}.weight")),
            bias: find(format!("{name}.bias")),
        };
        let layers = arch
            .layers()
            .into_iter()
            .map(|l| match l {
                LayerSpec::Conv {
                    name, stride, pad, ..
                } => Bound::Conv {
                    w: find(format!("{name}.weight")),
                    b: find(format!("{name}.bias")),
                    stride,
                    pad,
                },
                LayerSpec::Pool { window, stride, .. } => Bound::Pool { window, stride },
                LayerSpec::Lrn { .. } => Bound::Lrn,
                LayerSpec::Spp { levels } => Bound::Spp(levels),
                LayerSpec::Fc { name, relu, .. } => Bound::Fc {
                    dense: dense(name),
                    relu,
                },
            })
            .collect();
        let (category_head, fusion, quality_head) = match mode {
            Mode::Binary => (None, None, Some(dense("quality"))),
            Mode::PairComp => (None, None, None),
            Mode::PairCompCate => (Some(dense("category")), Some(dense("fusion")), None),
        };
        Ok(Self {
            arch,
            mode,
            params,
            layers,
            category_head,
            fusion,
            quality_head,
            lrn: LrnConfig::default(),
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn lrn(&self) -> LrnConfig {
        self.lrn
    }

    pub fn with_lrn(mut self, lrn: LrnConfig) -> Self {
        self.lrn = lrn;
        self
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn category_head(&self) -> Option<Dense> {
        self.category_head
    }

    pub fn fusion_layer(&self) -> Option<Dense> {
        self.fusion
    }

    pub fn quality_head(&self) -> Option<Dense> {
        self.quality_head
    }

    /// Number of scalars in the weight matrix of a named dense layer.
    pub fn weight_count(&self, layer: &str) -> Option<usize> {
        self.params
            .find(&format!("{layer}.weight"))
            .map(|id| self.params.get(id).len())
    }

    pub fn cast<U: Real>(&self) -> ColumnModel<U> {
        ColumnModel {
            arch: self.arch,
            mode: self.mode,
            params: self.params.cast(),
            layers: self.layers.clone(),
            category_head: self.category_head,
            fusion: self.fusion,
            quality_head: self.quality_head,
            lrn: self.lrn,
        }
    }

    fn dense_node(&self, g: &mut Graph<T>, x: NodeId, d: Dense) -> NodeId {
        let w = g.param(d.weight);
        let b = g.param(d.bias);
        g.linear(x, w, b)
    }

    /// Appends one column reading `[N, 3, H, W]` from `x`; returns the
    /// `[N, 128]` embedding node. Every call reuses the same parameters.
    pub fn column(&self, g: &mut Graph<T>, x: NodeId) -> NodeId {
        let mut h = x;
        let mut flat = false;
        for layer in &self.layers {
            h = match *layer {
                Bound::Conv { w, b, stride, pad } => {
                    let (w, b) = (g.param(w), g.param(b));
                    let c = g.conv2d(h, w, b, stride, pad);
                    g.relu(c)
                }
                Bound::Pool { window, stride } => g.maxpool(h, window, stride),
                Bound::Lrn => g.lrn(h, self.lrn),
                Bound::Spp(levels) => {
                    flat = true;
                    g.spp(h, levels)
                }
                Bound::Fc { dense, relu } => {
                    if !flat {
                        flat = true;
                        h = g.flatten(h);
                    }
                    let y = self.dense_node(g, h, dense);
                    if relu {
                        g.relu(y)
                    } else {
                        y
                    }
                }
            };
        }
        h
    }

    /// `[N, 8]` category logits from the reference column's embedding.
    pub fn category_logits(&self, g: &mut Graph<T>, repr: NodeId) -> Result<NodeId> {
        let head = self.category_head.ok_or(Error::NoCategoryHead)?;
        Ok(self.dense_node(g, repr, head))
    }

    /// Concatenates `[N, 128]` aesthetic and category rows and maps them to
    /// `[N, 128]` fused rows.
    pub fn fuse_nodes(&self, g: &mut Graph<T>, aesthetic: NodeId, category: NodeId) -> Result<NodeId> {
        let fusion = self.fusion.ok_or(Error::MissingFusionLayer)?;
        let cat = g.concat(&[aesthetic, category]);
        Ok(self.dense_node(g, cat, fusion))
    }

    /// `[N, 2]` low/high quality logits.
    pub fn quality_logits(&self, g: &mut Graph<T>, repr: NodeId) -> Result<NodeId> {
        let head = self.quality_head.ok_or(Error::NoQualityHead)?;
        Ok(self.dense_node(g, repr, head))
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        if self.arch.accepts(img.height(), img.width()) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{} column expects {s}x{s} input, got {}x{}",
                self.arch.variant,
                img.width(),
                img.height(),
                s = self.arch.input_side
            )))
        }
    }

    /// Raw `[N, 128]` embeddings, in chunks.
    fn embed_rows(&self, images: &[&Image]) -> Result<Vec<Vec<T>>> {
        let mut rows = Vec::with_capacity(images.len());
        for img in images {
            self.check_image(img)?;
        }
        for chunk in images.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let x = g.input("images");
            let e = self.column(&mut g, x);
            let mut inputs = BTreeMap::new();
            inputs.insert("images".to_string(), image_batch::<T>(chunk)?);
            g.forward(&self.params, &inputs)?;
            rows.extend(g.value(e).data().chunks(EMBED_DIM).map(<[T]>::to_vec));
        }
        Ok(rows)
    }

    pub fn embed(&self, img: &Image) -> Result<AestheticEmbedding> {
        Ok(self.embed_batch(std::slice::from_ref(img))?.remove(0))
    }

    pub fn embed_batch(&self, images: &[Image]) -> Result<Vec<AestheticEmbedding>> {
        let refs: Vec<&Image> = images.iter().collect();
        Ok(self
            .embed_rows(&refs)?
            .into_iter()
            .map(|r| AestheticEmbedding {
                values: r.into_iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect())
    }

    /// The reference image's column output, used as the category representation.
    pub fn category_repr(&self, reference: &Image) -> Result<Vec<f32>> {
        Ok(self.embed(reference)?.values)
    }

    /// Softmax over the 8 category logits of a reference image.
    pub fn classify_category(&self, reference: &Image) -> Result<[f64; CATEGORY_COUNT]> {
        let head = self.category_head.ok_or(Error::NoCategoryHead)?;
        let repr = self.category_repr(reference)?;
        let repr: Vec<f64> = repr.iter().map(|&v| v as f64).collect();
        let logits = dense_apply(&self.params, head, &repr);
        let mut out = [0.0; CATEGORY_COUNT];
        out.copy_from_slice(&softmax(&logits));
        Ok(out)
    }

    pub fn fuse(&self, aesthetic: &AestheticEmbedding, category_repr: &[f32]) -> Result<FusedEmbedding> {
        let fusion = self.fusion.ok_or(Error::MissingFusionLayer)?;
        if aesthetic.values.len() != EMBED_DIM {
            return Err(Error::DimMismatch(aesthetic.values.len(), EMBED_DIM));
        }
        if category_repr.len() != EMBED_DIM {
            return Err(Error::DimMismatch(category_repr.len(), EMBED_DIM));
        }
        let x: Vec<f64> = aesthetic
            .values
            .iter()
            .chain(category_repr)
            .map(|&v| v as f64)
            .collect();
        Ok(FusedEmbedding {
            values: dense_apply(&self.params, fusion, &x)
                .into_iter()
                .map(|v| v as f32)
                .collect(),
        })
    }

    /// Per-candidate ranking score: `||f||^2` for the pairwise modes (fused
    /// with the reference's category representation in the category-aware
    /// mode), `P(high)` for the binary mode.
    pub fn score_candidates(&self, candidates: &[Image], reference: Option<&Image>) -> Result<Vec<f64>> {
        match self.mode {
            Mode::PairComp => Ok(self.embed_batch(candidates)?.iter().map(Embedding::score).collect()),
            Mode::PairCompCate => {
                let reference = reference.ok_or_else(|| {
                    Error::ModelModeMismatch("category-aware scoring needs the reference image".into())
                })?;
                let repr = self.category_repr(reference)?;
                self.embed_batch(candidates)?
                    .iter()
                    .map(|a| self.fuse(a, &repr).map(|f| f.score()))
                    .collect()
            }
            Mode::Binary => {
                let head = self.quality_head.ok_or(Error::NoQualityHead)?;
                Ok(self
                    .embed_batch(candidates)?
                    .iter()
                    .map(|a| {
                        let x: Vec<f64> = a.values.iter().map(|&v| v as f64).collect();
                        softmax(&dense_apply(&self.params, head, &x))[1]
                    })
                    .collect())
            }
        }
    }

    /// Serializes parameters plus architecture and mode; `extra` is stored
    /// alongside in the manifest.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Vec<u8>> {
        let meta = serde_json::json!({
            "arch": self.arch,
            "mode": self.mode,
            "lrn": self.lrn,
            "extra": extra,
        });
        encode_checkpoint(&self.params, &meta)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let (params, meta) = decode_checkpoint::<T>(bytes)?;
        let arch: Arch = serde_json::from_value(meta["arch"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad arch record: {e}")))?;
        let mode: Mode = serde_json::from_value(meta["mode"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad mode record: {e}")))?;
        let lrn: LrnConfig = match &meta["lrn"] {
            serde_json::Value::Null => LrnConfig::default(),
            v => serde_json::from_value(v.clone())
                .map_err(|e| Error::Checkpoint(format!("bad lrn record: {e}")))?,
        };
        let model = Self::assemble(arch, mode, params)?.with_lrn(lrn);
        Ok((model, meta["extra"].clone()))
    }
}

fn dense_apply<T: Real>(params: &ParamSet<T>, d: Dense, x: &[f64]) -> Vec<f64> {
    let w = params.get(d.weight);
    let b = params.get(d.bias);
    let inputs = x.len();
    w.data()
        .chunks(inputs)
        .zip(b.data())
        .map(|(row, &bias)| {
            row.iter().zip(x).map(|(&wv, &xv)| wv.as_f64() * xv).sum::<f64>() + bias.as_f64()
        })
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
