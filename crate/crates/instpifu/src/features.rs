//! Image encoders: the dense local feature map and the global feature
//! vectors consumed by the occupancy decoders.
//!
//! The local encoder is a stem (stride 4) followed by hourglass-style
//! refinement stacks that stay at the stem resolution and widen their
//! receptive field with dilated convolutions. Constant resolution plus
//! per-location channel normalization keeps the whole network exactly
//! translation covariant in the interior, which the feature-sampling math
//! relies on: shifting the input by one stride shifts the feature map by
//! one cell.
//!
//! Every network has two forward paths that share the same primitive
//! kernels: a taped path used for training and gradient checks, and an
//! eval path that drops intermediate state (required for scene-sized
//! images). [`tape_and_eval_paths_agree`] in the tests pins them together.

use crate::geometry::Box2D;
use crate::nn::{
    chan_norm_eval, conv2d_eval, he_weight, ones1, param_seed, zeros1, NodeId, ParamStore, Tape,
};
use crate::{Error, Result, Scalar};
use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

/// Which input the per-instance global encoder consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GlobalSource {
    /// Encode the resized image crop of the instance (default).
    #[default]
    InstanceCrop,
    /// Pool the instance's local feature grid and encode the pooled vector.
    PooledRoi,
}

/// Provenance of a [`GlobalFeature`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    WholeImage,
    InstanceCrop,
    PooledRoi,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Provenance::WholeImage => "whole-image",
            Provenance::InstanceCrop => "instance-crop",
            Provenance::PooledRoi => "pooled-roi",
        };
        f.write_str(s)
    }
}

/// Hyperparameters of the image encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Channels of the local feature map.
    pub l_c: usize,
    /// Input pixels per feature cell. The stem downsamples by exactly 4.
    pub stride: usize,
    /// Number of dilated refinement stacks after the stem.
    pub stacks: usize,
    /// Width of every global feature vector.
    pub d_g: usize,
    /// Square resolution instance crops are resized to before encoding.
    pub crop_res: usize,
    /// Input of the per-instance global encoder.
    pub global_source: GlobalSource,
    /// Base seed for parameter initialization.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            l_c: 64,
            stride: 4,
            stacks: 2,
            d_g: 256,
            crop_res: 64,
            global_source: GlobalSource::InstanceCrop,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Small configuration sized for CPU training.
    pub fn desk() -> Self {
        EncoderConfig {
            d_g: 64,
            ..EncoderConfig::default()
        }
    }

    /// Full-scale configuration: 256-channel features on a 64x64 grid from
    /// 256x256 inputs, 256-wide global vectors.
    pub fn paper_scale() -> Self {
        EncoderConfig {
            l_c: 256,
            crop_res: 256,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 4 {
            return Err(Error::Config(format!(
                "the encoder stem downsamples by 4, stride {} is unsupported",
                self.stride
            )));
        }
        if self.l_c < 4 || self.l_c % 2 != 0 {
            return Err(Error::Config(format!(
                "l_c must be an even number >= 4, got {}",
                self.l_c
            )));
        }
        if self.stacks == 0 {
            return Err(Error::Config("at least one refinement stack".into()));
        }
        if self.d_g == 0 {
            return Err(Error::Config("d_g must be positive".into()));
        }
        if self.crop_res < 16 {
            return Err(Error::Config(format!(
                "crop_res must be >= 16, got {}",
                self.crop_res
            )));
        }
        Ok(())
    }
}

/// Dense per-pixel feature map at a fixed stride.
#[derive(Debug, Clone)]
pub struct FeatureMap<S: Scalar> {
    /// `(l_c, h_f, w_f)` feature tensor.
    pub tensor: Array3<S>,
    /// Input pixels per feature cell.
    pub stride: usize,
    pub source_w: usize,
    pub source_h: usize,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn new(tensor: Array3<S>, stride: usize, source_w: usize, source_h: usize) -> Result<Self> {
        let (c, h_f, w_f) = tensor.dim();
        if c == 0 || h_f == 0 || w_f == 0 || stride == 0 {
            return Err(Error::Shape("feature map dims must be positive".into()));
        }
        if stride * w_f != source_w || stride * h_f != source_h {
            return Err(Error::Shape(format!(
                "feature grid {w_f}x{h_f} at stride {stride} does not cover a {source_w}x{source_h} image"
            )));
        }
        Ok(FeatureMap {
            tensor,
            stride,
            source_w,
            source_h,
        })
    }

    pub fn channels(&self) -> usize {
        self.tensor.dim().0
    }

    pub fn grid_h(&self) -> usize {
        self.tensor.dim().1
    }

    pub fn grid_w(&self) -> usize {
        self.tensor.dim().2
    }

    /// Maps a source-image pixel to continuous feature-grid coordinates.
    /// Cell `(i, j)` is centered at pixel `((j + 0.5) * stride, (i + 0.5) * stride)`.
    pub fn pixel_to_grid(&self, u: S, v: S) -> [f64; 2] {
        let s = self.stride as f64;
        [u.to_f() / s - 0.5, v.to_f() / s - 0.5]
    }

    /// Bilinear 4-tap sample at a source-image pixel. Pixels outside the
    /// image clamp to the border cells. The tap arithmetic mirrors the
    /// taped gather op exactly, so eval-time sampling matches training.
    pub fn sample(&self, u: S, v: S) -> Vec<S> {
        let (c, h, w) = self.tensor.dim();
        let [gu, gv] = self.pixel_to_grid(u, v);
        let uc = gu.clamp(0.0, (w - 1) as f64);
        let vc = gv.clamp(0.0, (h - 1) as f64);
        let x0 = uc.floor() as usize;
        let y0 = vc.floor() as usize;
        let fx = uc - x0 as f64;
        let fy = vc - y0 as f64;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let taps = [
            (y0, x0, S::from_f((1.0 - fy) * (1.0 - fx))),
            (y0, x1, S::from_f((1.0 - fy) * fx)),
            (y1, x0, S::from_f(fy * (1.0 - fx))),
            (y1, x1, S::from_f(fy * fx)),
        ];
        let mut out = Vec::with_capacity(c);
        for ci in 0..c {
            let mut acc = S::zero();
            for &(ty, tx, tw) in &taps {
                acc = acc + self.tensor[(ci, ty, tx)] * tw;
            }
            out.push(acc);
        }
        out
    }
}

/// Fixed-width global feature vector with a provenance tag.
#[derive(Debug, Clone)]
pub struct GlobalFeature<S: Scalar> {
    pub values: Array1<S>,
    pub provenance: Provenance,
}

impl<S: Scalar> GlobalFeature<S> {
    pub fn new(values: Array1<S>, provenance: Provenance) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("global feature must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("global feature has non-finite values".into()));
        }
        Ok(GlobalFeature { values, provenance })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Input accepted by [`encode_global`]; the variant determines the
/// provenance tag of the result.
pub enum GlobalInput<'a, S: Scalar> {
    /// Instance image crop `(3, h, w)`; resized to the configured square.
    Crop(&'a Array3<S>),
    /// Whole-image feature map; pooled then encoded.
    Map(&'a FeatureMap<S>),
    /// Pooled instance feature grid `(l_c, h_r, w_r)`.
    PooledRoi(&'a Array3<S>),
}

// One conv + norm + relu block: "<name>.conv.{w,b}" and "<name>.norm.{g,b}".
fn register_block<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    seed: u64,
    idx: &mut usize,
) -> Result<()> {
    let fan_in = cin * k * k;
    store.add(
        format!("{name}.conv.w"),
        he_weight(cout, fan_in, fan_in, param_seed(seed, *idx)),
    )?;
    *idx += 1;
    store.add(format!("{name}.conv.b"), zeros1(cout))?;
    store.add(format!("{name}.norm.g"), ones1(cout))?;
    store.add(format!("{name}.norm.b"), zeros1(cout))?;
    Ok(())
}

pub(crate) fn register_fc<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    rows: usize,
    cols: usize,
    seed: u64,
    idx: &mut usize,
) -> Result<()> {
    store.add(
        format!("{name}.w"),
        he_weight(rows, cols, rows, param_seed(seed, *idx)),
    )?;
    *idx += 1;
    store.add(format!("{name}.b"), zeros1(cols))?;
    Ok(())
}

// Per-stack block names with their dilations: widening then narrowing.
const STACK_BLOCKS: [(&str, usize); 5] = [("d1", 1), ("d2", 2), ("mid", 4), ("u1", 2), ("out", 1)];

/// Registers the local feature encoder's parameters under `prefix`.
pub fn register_hourglass<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &EncoderConfig,
    prefix: &str,
) -> Result<()> {
    cfg.validate()?;
    let mut idx = 0;
    let half = cfg.l_c / 2;
    register_block(store, &format!("{prefix}.stem.c1"), 3, half, 3, cfg.seed, &mut idx)?;
    register_block(store, &format!("{prefix}.stem.c2"), half, cfg.l_c, 3, cfg.seed, &mut idx)?;
    register_block(store, &format!("{prefix}.stem.c3"), cfg.l_c, cfg.l_c, 3, cfg.seed, &mut idx)?;
    for s in 0..cfg.stacks {
        for (block, _) in STACK_BLOCKS {
            register_block(
                store,
                &format!("{prefix}.s{s}.{block}"),
                cfg.l_c,
                cfg.l_c,
                3,
                cfg.seed,
                &mut idx,
            )?;
        }
    }
    Ok(())
}

pub(crate) fn pidx<S: Scalar>(store: &ParamStore<S>, name: &str) -> usize {
    store
        .index_of(name)
        .unwrap_or_else(|| panic!("parameter {name:?} not registered"))
}

// Taped conv + chan-norm + relu block.
fn block_forward<S: Scalar>(
    t: &mut Tape<S>,
    store: &ParamStore<S>,
    name: &str,
    x: NodeId,
    stride: usize,
    dil: usize,
) -> NodeId {
    let w = t.param(store, pidx(store, &format!("{name}.conv.w")));
    let b = t.param(store, pidx(store, &format!("{name}.conv.b")));
    let g = t.param(store, pidx(store, &format!("{name}.norm.g")));
    let nb = t.param(store, pidx(store, &format!("{name}.norm.b")));
    let h = t.conv2d_dilated(x, w, b, 3, stride, dil, dil);
    let h = t.chan_norm(h, g, nb);
    t.relu(h)
}

// Eval twin of `block_forward`.
fn block_eval<S: Scalar>(
    store: &ParamStore<S>,
    name: &str,
    x: &Array4<S>,
    stride: usize,
    dil: usize,
) -> Array4<S> {
    let w = store
        .value(pidx(store, &format!("{name}.conv.w")))
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d conv weight")
        .to_owned();
    let b = as1(store, &format!("{name}.conv.b"));
    let g = as1(store, &format!("{name}.norm.g"));
    let nb = as1(store, &format!("{name}.norm.b"));
    let h = conv2d_eval(x, &w, &b, 3, stride, dil, dil);
    let h = chan_norm_eval(&h, &g, &nb);
    h.mapv(|v| v.max(S::zero()))
}

pub(crate) fn as1<S: Scalar>(store: &ParamStore<S>, name: &str) -> Array1<S> {
    store
        .value(pidx(store, name))
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("1-d parameter")
        .to_owned()
}

pub(crate) fn as2<S: Scalar>(store: &ParamStore<S>, name: &str) -> Array2<S> {
    store
        .value(pidx(store, name))
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d parameter")
        .to_owned()
}

// Row-matrix matmul so the eval path runs the same 2-d GEMM as the tape.
pub(crate) fn fc_eval<S: Scalar>(x: &Array1<S>, w: &Array2<S>, b: &Array1<S>) -> Array1<S> {
    let x2 = x.view().insert_axis(ndarray::Axis(0)).to_owned();
    let y = x2.dot(w) + b;
    y.row(0).to_owned()
}

/// Taped local-encoder forward. `x` is a `(n, 3, h, w)` node; returns a
/// `(n, l_c, h/4, w/4)` node.
pub fn hourglass_forward<S: Scalar>(
    t: &mut Tape<S>,
    store: &ParamStore<S>,
    cfg: &EncoderConfig,
    prefix: &str,
    x: NodeId,
) -> NodeId {
    let h = block_forward(t, store, &format!("{prefix}.stem.c1"), x, 1, 1);
    let h = block_forward(t, store, &format!("{prefix}.stem.c2"), h, 2, 1);
    let mut h = block_forward(t, store, &format!("{prefix}.stem.c3"), h, 2, 1);
    for s in 0..cfg.stacks {
        let p = |b: &str| format!("{prefix}.s{s}.{b}");
        let a = block_forward(t, store, &p("d1"), h, 1, 1);
        let b = block_forward(t, store, &p("d2"), a, 1, 2);
        let c = block_forward(t, store, &p("mid"), b, 1, 4);
        let m1 = t.add(c, b);
        let d = block_forward(t, store, &p("u1"), m1, 1, 2);
        let m2 = t.add(d, a);
        h = block_forward(t, store, &p("out"), m2, 1, 1);
    }
    h
}

/// Eval twin of [`hourglass_forward`].
pub fn hourglass_eval<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &EncoderConfig,
    prefix: &str,
    x: &Array4<S>,
) -> Array4<S> {
    let h = block_eval(store, &format!("{prefix}.stem.c1"), x, 1, 1);
    let h = block_eval(store, &format!("{prefix}.stem.c2"), &h, 2, 1);
    let mut h = block_eval(store, &format!("{prefix}.stem.c3"), &h, 2, 1);
    for s in 0..cfg.stacks {
        let p = |b: &str| format!("{prefix}.s{s}.{b}");
        let a = block_eval(store, &p("d1"), &h, 1, 1);
        let b = block_eval(store, &p("d2"), &a, 1, 2);
        let c = block_eval(store, &p("mid"), &b, 1, 4);
        let m1 = &c + &b;
        let d = block_eval(store, &p("u1"), &m1, 1, 2);
        let m2 = &d + &a;
        h = block_eval(store, &p("out"), &m2, 1, 1);
    }
    h
}

/// Runs the local encoder on a `(3, h, w)` image in `[0, 1]` and wraps the
/// result. Image dims must be divisible by the configured stride.
pub fn extract_local_features<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &EncoderConfig,
    prefix: &str,
    image: &Array3<S>,
) -> Result<FeatureMap<S>> {
    cfg.validate()?;
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected a 3-channel image, got {c}")));
    }
    if h == 0 || w == 0 || h % cfg.stride != 0 || w % cfg.stride != 0 {
        return Err(Error::Shape(format!(
            "image {w}x{h} is not divisible by stride {}",
            cfg.stride
        )));
    }
    let x = image
        .view()
        .insert_axis(ndarray::Axis(0))
        .to_owned()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("4-d input");
    let y = hourglass_eval(store, cfg, prefix, &x);
    let map = y.index_axis(ndarray::Axis(0), 0).to_owned();
    FeatureMap::new(map, cfg.stride, w, h)
}

/// Bilinear 4-tap sample of a feature map at a source-image pixel.
pub fn sample_feature<S: Scalar>(map: &FeatureMap<S>, u: S, v: S) -> Vec<S> {
    map.sample(u, v)
}

/// Registers the pooled-vector global head: FC(in -> d_g), relu,
/// FC(d_g -> d_g).
pub fn register_global_head<S: Scalar>(
    store: &mut ParamStore<S>,
    in_dim: usize,
    d_g: usize,
    prefix: &str,
    seed: u64,
) -> Result<()> {
    let mut idx = 0;
    register_fc(store, &format!("{prefix}.fc1"), in_dim, d_g, seed, &mut idx)?;
    register_fc(store, &format!("{prefix}.fc2"), d_g, d_g, seed, &mut idx)?;
    Ok(())
}

/// Taped global-head forward over a pooled `(n, in_dim)` node.
pub fn global_head_forward<S: Scalar>(
    t: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
    x: NodeId,
) -> NodeId {
    let w1 = t.param(store, pidx(store, &format!("{prefix}.fc1.w")));
    let b1 = t.param(store, pidx(store, &format!("{prefix}.fc1.b")));
    let w2 = t.param(store, pidx(store, &format!("{prefix}.fc2.w")));
    let b2 = t.param(store, pidx(store, &format!("{prefix}.fc2.b")));
    let h = t.matmul(x, w1);
    let h = t.add_bias(h, b1);
    let h = t.relu(h);
    let h = t.matmul(h, w2);
    t.add_bias(h, b2)
}

/// Eval twin of [`global_head_forward`] for a single pooled vector.
pub fn global_head_eval<S: Scalar>(
    store: &ParamStore<S>,
    prefix: &str,
    x: &Array1<S>,
) -> Array1<S> {
    let w1 = as2(store, &format!("{prefix}.fc1.w"));
    let b1 = as1(store, &format!("{prefix}.fc1.b"));
    let w2 = as2(store, &format!("{prefix}.fc2.w"));
    let b2 = as1(store, &format!("{prefix}.fc2.b"));
    let h = fc_eval(x, &w1, &b1);
    let h = h.mapv(|v| v.max(S::zero()));
    fc_eval(&h, &w2, &b2)
}

// Crop-encoder channel widths after each stride-2 block.
const CROP_WIDTHS: [usize; 4] = [16, 32, 64, 64];

/// Registers the instance-crop encoder: four stride-2 conv blocks then a
/// fully connected projection to `d_g`.
pub fn register_crop_encoder<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &EncoderConfig,
    prefix: &str,
) -> Result<()> {
    cfg.validate()?;
    let mut idx = 0;
    let mut cin = 3;
    for (i, cout) in CROP_WIDTHS.into_iter().enumerate() {
        register_block(
            store,
            &format!("{prefix}.c{}", i + 1),
            cin,
            cout,
            3,
            cfg.seed,
            &mut idx,
        )?;
        cin = cout;
    }
    register_fc(store, &format!("{prefix}.fc"), cin, cfg.d_g, cfg.seed, &mut idx)?;
    Ok(())
}

/// Taped crop-encoder forward over a `(n, 3, r, r)` node; returns `(n, d_g)`.
pub fn crop_encoder_forward<S: Scalar>(
    t: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
    x: NodeId,
) -> NodeId {
    let mut h = x;
    for i in 1..=CROP_WIDTHS.len() {
        h = block_forward(t, store, &format!("{prefix}.c{i}"), h, 2, 1);
    }
    let h = t.gap(h);
    let w = t.param(store, pidx(store, &format!("{prefix}.fc.w")));
    let b = t.param(store, pidx(store, &format!("{prefix}.fc.b")));
    let h = t.matmul(h, w);
    t.add_bias(h, b)
}

/// Eval twin of [`crop_encoder_forward`] for a single `(3, r, r)` crop.
pub fn crop_encoder_eval<S: Scalar>(
    store: &ParamStore<S>,
    prefix: &str,
    crop: &Array3<S>,
) -> Array1<S> {
    let mut h = crop
        .view()
        .insert_axis(ndarray::Axis(0))
        .to_owned()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("4-d input");
    for i in 1..=CROP_WIDTHS.len() {
        h = block_eval(store, &format!("{prefix}.c{i}"), &h, 2, 1);
    }
    let pooled = gap3(&h.index_axis(ndarray::Axis(0), 0).to_owned());
    let w = as2(store, &format!("{prefix}.fc.w"));
    let b = as1(store, &format!("{prefix}.fc.b"));
    fc_eval(&pooled, &w, &b)
}

/// Spatial average of a `(c, h, w)` tensor, in the same accumulation order
/// as the taped pooling op.
pub fn gap3<S: Scalar>(x: &Array3<S>) -> Array1<S> {
    let (c, h, w) = x.dim();
    let inv = S::one() / S::from_us(h * w);
    let mut out = Array1::<S>::zeros(c);
    for ci in 0..c {
        let mut acc = S::zero();
        for y in 0..h {
            for xj in 0..w {
                acc = acc + x[(ci, y, xj)];
            }
        }
        out[ci] = acc * inv;
    }
    out
}

/// Encodes a global feature vector. The variant of `input` selects the
/// network (crop encoder vs. pooled head) and stamps the provenance.
pub fn encode_global<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &EncoderConfig,
    prefix: &str,
    input: GlobalInput<'_, S>,
) -> Result<GlobalFeature<S>> {
    cfg.validate()?;
    match input {
        GlobalInput::Crop(img) => {
            let (c, h, w) = img.dim();
            if c != 3 {
                return Err(Error::Shape(format!("expected a 3-channel crop, got {c}")));
            }
            if h == 0 || w == 0 {
                return Err(Error::Shape("empty crop".into()));
            }
            let resized = resize_bilinear(img, cfg.crop_res, cfg.crop_res);
            let v = crop_encoder_eval(store, prefix, &resized);
            GlobalFeature::new(v, Provenance::InstanceCrop)
        }
        GlobalInput::Map(map) => {
            let pooled = gap3(&map.tensor);
            let v = global_head_eval(store, prefix, &pooled);
            GlobalFeature::new(v, Provenance::WholeImage)
        }
        GlobalInput::PooledRoi(grid) => {
            if grid.is_empty() {
                return Err(Error::Shape("empty feature grid".into()));
            }
            let pooled = gap3(grid);
            let v = global_head_eval(store, prefix, &pooled);
            GlobalFeature::new(v, Provenance::PooledRoi)
        }
    }
}

/// Bilinear resize of a `(c, h, w)` image. Sample positions use the
/// half-pixel-center convention; border pixels clamp.
pub fn resize_bilinear<S: Scalar>(img: &Array3<S>, out_h: usize, out_w: usize) -> Array3<S> {
    let (c, h, w) = img.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0, "non-empty resize");
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Array3::<S>::zeros((c, out_h, out_w));
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            for ci in 0..c {
                let top = img[(ci, y0, x0)].to_f() * (1.0 - dx) + img[(ci, y0, x1)].to_f() * dx;
                let bot = img[(ci, y1, x0)].to_f() * (1.0 - dx) + img[(ci, y1, x1)].to_f() * dx;
                out[(ci, oy, ox)] = S::from_f(top * (1.0 - dy) + bot * dy);
            }
        }
    }
    out
}

/// Extracts the pixel rectangle covered by `bbox` from a `(c, h, w)` image.
/// The box is rounded outward to whole pixels; an empty intersection is an
/// error.
pub fn crop_image<S: Scalar>(img: &Array3<S>, bbox: &Box2D<S>) -> Result<Array3<S>> {
    let (c, h, w) = img.dim();
    let x0 = bbox.x0.to_f().floor().max(0.0) as usize;
    let y0 = bbox.y0.to_f().floor().max(0.0) as usize;
    let x1 = (bbox.x1.to_f().ceil() as usize).min(w);
    let y1 = (bbox.y1.to_f().ceil() as usize).min(h);
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::Shape(format!(
            "empty crop: box [{},{}]x[{},{}] in a {w}x{h} image",
            bbox.x0.to_f(),
            bbox.x1.to_f(),
            bbox.y0.to_f(),
            bbox.y1.to_f()
        )));
    }
    let mut out = Array3::<S>::zeros((c, y1 - y0, x1 - x0));
    for ci in 0..c {
        for y in y0..y1 {
            for x in x0..x1 {
                out[(ci, y - y0, x - x0)] = img[(ci, y, x)];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{check_param_gradients, seeded_uniform};
    use ndarray::{ArrayD, IxDyn};

    fn image<S: Scalar>(h: usize, w: usize, seed: u64) -> Array3<S> {
        seeded_uniform::<S>(&[3, h, w], seed)
            .mapv(|v: S| (v + S::one()) * S::from_f(0.5))
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
    }

    #[test]
    fn local_features_have_configured_shape_and_scale_with_input() {
        let cfg = EncoderConfig::desk();
        let mut store = ParamStore::<f32>::new();
        register_hourglass(&mut store, &cfg, "enc").unwrap();
        let map = extract_local_features(&store, &cfg, "enc", &image::<f32>(64, 64, 1)).unwrap();
        assert_eq!(map.tensor.dim(), (64, 16, 16));
        assert_eq!(map.stride, 4);
        assert_eq!((map.source_w, map.source_h), (64, 64));
        let map = extract_local_features(&store, &cfg, "enc", &image::<f32>(96, 64, 2)).unwrap();
        assert_eq!(map.tensor.dim(), (64, 24, 16));
        let err = extract_local_features(&store, &cfg, "enc", &image::<f32>(66, 64, 3));
        assert!(err.is_err());
    }

    #[test]
    fn full_scale_config_yields_256_by_64_by_64() {
        let cfg = EncoderConfig::paper_scale();
        let mut store = ParamStore::<f32>::new();
        register_hourglass(&mut store, &cfg, "enc").unwrap();
        let map = extract_local_features(&store, &cfg, "enc", &image::<f32>(256, 256, 4)).unwrap();
        assert_eq!(map.tensor.dim(), (256, 64, 64));
    }

    #[test]
    fn eval_forward_is_bit_deterministic() {
        let cfg = EncoderConfig::desk();
        let mut store = ParamStore::<f32>::new();
        register_hourglass(&mut store, &cfg, "enc").unwrap();
        let img = image::<f32>(32, 32, 5);
        let a = extract_local_features(&store, &cfg, "enc", &img).unwrap();
        let b = extract_local_features(&store, &cfg, "enc", &img).unwrap();
        assert_eq!(a.tensor, b.tensor);
    }

    #[test]
    fn tape_and_eval_paths_agree() {
        let cfg = EncoderConfig {
            l_c: 8,
            stacks: 1,
            d_g: 6,
            crop_res: 16,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        register_hourglass(&mut store, &cfg, "enc").unwrap();
        register_crop_encoder(&mut store, &cfg, "gi").unwrap();
        register_global_head(&mut store, cfg.l_c, cfg.d_g, "g", 11).unwrap();
        let img = image::<f64>(16, 16, 6);
        let x4 = img
            .view()
            .insert_axis(ndarray::Axis(0))
            .to_owned()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();

        let mut t = Tape::<f64>::new(&store);
        let xi = t.input(x4.clone().into_dyn());
        let y = hourglass_forward(&mut t, &store, &cfg, "enc", xi);
        let taped = t.value(y).clone();
        let eval = hourglass_eval(&store, &cfg, "enc", &x4);
        let features = eval.index_axis(ndarray::Axis(0), 0).to_owned();
        assert_eq!(taped, eval.into_dyn());

        let mut t = Tape::<f64>::new(&store);
        let xi = t.input(x4.clone().into_dyn());
        let y = crop_encoder_forward(&mut t, &store, "gi", xi);
        let taped = t.value(y).clone();
        let eval = crop_encoder_eval(&store, "gi", &img);
        assert_eq!(
            taped.into_dimensionality::<ndarray::Ix2>().unwrap().row(0).to_owned(),
            eval
        );

        let pooled = gap3(&features);
        let mut t = Tape::<f64>::new(&store);
        let xi = t.input2(pooled.clone().insert_axis(ndarray::Axis(0)));
        let y = global_head_forward(&mut t, &store, "g", xi);
        let taped = t.value(y).clone();
        let eval = global_head_eval(&store, "g", &pooled);
        assert_eq!(
            taped.into_dimensionality::<ndarray::Ix2>().unwrap().row(0).to_owned(),
            eval
        );
    }

    #[test]
    fn sampling_hits_cell_centers_and_matches_a_four_tap_oracle() {
        let stride = 4;
        let tensor = seeded_uniform::<f64>(&[8, 5, 7], 7)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let map = FeatureMap::new(tensor.clone(), stride, 28, 20).unwrap();

        // Exact cell center returns that cell's vector.
        let u = (3.0 + 0.5) * stride as f64;
        let v = (2.0 + 0.5) * stride as f64;
        let got = map.sample(u, v);
        for c in 0..8 {
            assert_eq!(got[c], tensor[(c, 2, 3)]);
        }

        // Midpoint of two horizontally adjacent cells averages them.
        let u = (3.0 + 1.0) * stride as f64;
        let got = map.sample(u, v);
        for c in 0..8 {
            let want = 0.5 * (tensor[(c, 2, 3)] + tensor[(c, 2, 4)]);
            assert!((got[c] - want).abs() < 1e-12);
        }

        // Random pixels, including out-of-bounds ones, equal an independent
        // clamped 4-neighbor weighted sum.
        let mut rng_vals = seeded_uniform::<f64>(&[40, 2], 8);
        rng_vals.mapv_inplace(|r| r * 30.0);
        for i in 0..40 {
            let u = rng_vals[[i, 0]];
            let v = rng_vals[[i, 1]];
            let got = map.sample(u, v);
            let gu = (u / stride as f64 - 0.5).clamp(0.0, 6.0);
            let gv = (v / stride as f64 - 0.5).clamp(0.0, 4.0);
            let (x0, y0) = (gu.floor() as usize, gv.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(6), (y0 + 1).min(4));
            let (fx, fy) = (gu - x0 as f64, gv - y0 as f64);
            for c in 0..8 {
                let want = (1.0 - fy) * ((1.0 - fx) * tensor[(c, y0, x0)] + fx * tensor[(c, y0, x1)])
                    + fy * ((1.0 - fx) * tensor[(c, y1, x0)] + fx * tensor[(c, y1, x1)]);
                assert!((got[c] - want).abs() < 1e-12, "pixel ({u}, {v})");
            }
        }
    }

    #[test]
    fn sampling_matches_the_taped_gather() {
        let tensor = seeded_uniform::<f64>(&[6, 4, 4], 9)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let map = FeatureMap::new(tensor.clone(), 4, 16, 16).unwrap();
        let store = ParamStore::<f64>::new();
        let mut t = Tape::<f64>::new(&store);
        let m = t.input(tensor.into_dyn());
        let pixels = [[2.0, 3.0], [8.7, 1.2], [15.9, 15.9], [-3.0, 40.0]];
        let coords: Vec<[f64; 2]> = pixels.iter().map(|&[u, v]| map.pixel_to_grid(u, v)).collect();
        let g = t.gather(m, &coords);
        let gv = t.value(g).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        for (i, &[u, v]) in pixels.iter().enumerate() {
            let s = map.sample(u, v);
            for c in 0..6 {
                assert_eq!(s[c], gv[(i, c)]);
            }
        }
    }

    #[test]
    fn global_vector_has_default_width_256_and_is_deterministic() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.d_g, 256);
        let mut store = ParamStore::<f32>::new();
        register_crop_encoder(&mut store, &cfg, "gi").unwrap();
        let crop = image::<f32>(10, 13, 10);
        let a = encode_global(&store, &cfg, "gi", GlobalInput::Crop(&crop)).unwrap();
        let b = encode_global(&store, &cfg, "gi", GlobalInput::Crop(&crop)).unwrap();
        assert_eq!(a.len(), 256);
        assert_eq!(a.values, b.values);
        assert_eq!(a.provenance, Provenance::InstanceCrop);
    }

    #[test]
    fn empty_crop_is_rejected() {
        let cfg = EncoderConfig::default();
        let mut store = ParamStore::<f32>::new();
        register_crop_encoder(&mut store, &cfg, "gi").unwrap();
        let crop = Array3::<f32>::zeros((3, 0, 5));
        assert!(encode_global(&store, &cfg, "gi", GlobalInput::Crop(&crop)).is_err());
        let img = image::<f32>(8, 8, 11);
        let empty_box = Box2D::new(2.0f32, 2.0, 2.0, 6.0, 8, 8);
        assert!(crop_image(&img, &empty_box).is_err());
    }

    #[test]
    fn pooled_and_map_inputs_use_the_head_and_stamp_provenance() {
        let cfg = EncoderConfig {
            l_c: 8,
            d_g: 5,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        register_global_head(&mut store, cfg.l_c, cfg.d_g, "g", 12).unwrap();
        let tensor = seeded_uniform::<f64>(&[8, 4, 4], 13)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let map = FeatureMap::new(tensor.clone(), 4, 16, 16).unwrap();
        let gf = encode_global(&store, &cfg, "g", GlobalInput::Map(&map)).unwrap();
        assert_eq!(gf.provenance, Provenance::WholeImage);
        assert_eq!(gf.len(), 5);
        let gr = encode_global(&store, &cfg, "g", GlobalInput::PooledRoi(&tensor)).unwrap();
        assert_eq!(gr.provenance, Provenance::PooledRoi);
        // Identical pooled statistics give identical vectors.
        assert_eq!(gf.values, gr.values);
    }

    #[test]
    fn crop_encoder_gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            d_g: 4,
            crop_res: 16,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let crop = seeded_uniform::<f64>(&[1, 3, 16, 16], 14);
        store.add("x", crop).unwrap();
        register_crop_encoder(&mut store, &cfg, "gi").unwrap();
        let summary = check_param_gradients(
            &mut store,
            |s, t| {
                let xi = t.param(s, pidx(s, "x"));
                let y = crop_encoder_forward(t, s, "gi", xi);
                t.mean(y)
            },
            200,
            15,
            1e-4,
        );
        assert!(summary.fraction_ok() >= 0.95, "{summary:?}");
    }

    #[test]
    fn encoder_gradients_match_finite_differences_on_a_tiny_config() {
        let cfg = EncoderConfig {
            l_c: 6,
            stacks: 1,
            d_g: 4,
            crop_res: 16,
            seed: 2,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        register_hourglass(&mut store, &cfg, "enc").unwrap();
        register_global_head(&mut store, cfg.l_c, cfg.d_g, "g", 16).unwrap();
        let img = seeded_uniform::<f64>(&[1, 3, 12, 12], 17);
        let summary = check_param_gradients(
            &mut store,
            |s, t| {
                let xi = t.input(img.clone());
                let f = hourglass_forward(t, s, &cfg, "enc", xi);
                let pooled = t.gap(f);
                let g = global_head_forward(t, s, "g", pooled);
                let g = t.sigmoid(g);
                t.mean(g)
            },
            200,
            18,
            1e-4,
        );
        assert!(summary.fraction_ok() >= 0.95, "{summary:?}");
    }

    #[test]
    fn shifting_input_by_one_stride_shifts_interior_features_by_one_cell() {
        let cfg = EncoderConfig::desk();
        let mut store = ParamStore::<f32>::new();
        register_hourglass(&mut store, &cfg, "enc").unwrap();
        let base = image::<f32>(256, 260, 19);
        let a = base.slice(ndarray::s![.., .., 0..256]).to_owned();
        let b = base.slice(ndarray::s![.., .., 4..260]).to_owned();
        let fa = extract_local_features(&store, &cfg, "enc", &a).unwrap();
        let fb = extract_local_features(&store, &cfg, "enc", &b).unwrap();
        // b's pixel column x equals a's column x + 4, so interior feature
        // cell (y, x) of b must equal cell (y, x + 1) of a. The margin
        // covers the receptive field of the stem plus both stacks.
        let margin = 24usize;
        let mut max_dev = 0f32;
        for c in 0..64 {
            for y in margin..(64 - margin) {
                for x in margin..(64 - margin - 1) {
                    let dev = (fb.tensor[(c, y, x)] - fa.tensor[(c, y, x + 1)]).abs();
                    max_dev = max_dev.max(dev);
                }
            }
        }
        assert!(max_dev < 1e-4, "max deviation {max_dev}");
    }

    #[test]
    fn resize_preserves_constants_and_recovers_identity() {
        let img = Array3::<f64>::from_elem((3, 5, 9), 0.7);
        let out = resize_bilinear(&img, 12, 4);
        for v in out.iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
        let img = image::<f64>(6, 6, 20);
        let same = resize_bilinear(&img, 6, 6);
        assert_eq!(img, same);
    }

    #[test]
    fn feature_map_construction_checks_coverage() {
        let t = ArrayD::<f64>::zeros(IxDyn(&[4, 4, 4]))
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        assert!(FeatureMap::new(t.clone(), 4, 16, 16).is_ok());
        assert!(FeatureMap::new(t.clone(), 4, 17, 16).is_err());
        assert!(FeatureMap::new(t, 4, 16, 12).is_err());
    }
}
