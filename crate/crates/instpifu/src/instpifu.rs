//! Instance-aligned occupancy prediction: RoI feature extraction, per-query
//! channel gating against a global instance feature, amodal-mask
//! supervision, and the fully connected occupancy decoder.
//!
//! The per-instance pipeline is: project a canonical query point into the
//! image, sample the instance's RoI-aligned feature grid bilinearly, gate
//! the sampled vector channel-wise by an MLP over [local, global-instance],
//! and decode [gated-local, global, PE(z), category one-hot] to an
//! occupancy in [0, 1]. An ablation lattice switches the global feature,
//! the gate, and the mask head on and off; configurations are named so
//! checkpoints stay self-describing.
//!
//! Like the encoders, every network here has a taped training path and a
//! tape-free eval path built from the same kernels; a parity test keeps
//! them bit-identical.

use crate::features::{
    as1, as2, crop_encoder_forward, crop_image, encode_global, extract_local_features,
    global_head_forward, hourglass_forward, pidx, register_crop_encoder, register_fc,
    register_global_head, register_hourglass, resize_bilinear, EncoderConfig, FeatureMap,
    GlobalFeature, GlobalInput, GlobalSource,
};
use crate::geometry::{roi_uv, Box2D, Camera, InstancePose, V3};
use crate::nn::{param_seed, NodeId, ParamStore, Tape};
use crate::sampling::{Frame, SampleBatch};
use crate::{Error, Result, Scalar};
use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

/// Parameter-name prefixes of the object model's subnetworks. Checkpoint
/// manifests expose these, and the ablation containment checks key on them.
pub const P_ENC: &str = "enc";
pub const P_GLOBAL_INST: &str = "gi";
pub const P_GATE: &str = "gate";
pub const P_MASK: &str = "mask";
pub const P_DEC: &str = "dec";

/// Positional-encoding frequency count; `PE_DIM` = sin/cos pairs plus the
/// raw value.
pub const PE_FREQS: usize = 4;
pub const PE_DIM: usize = 2 * PE_FREQS + 1;

/// Ablation variants. Capability is monotone: each variant's parameter set
/// contains the previous column's ([`register_object_nets`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Pixel-aligned local features only, sampled from the full map.
    Baseline,
    /// Adds the global instance feature; sampling moves to the RoI grid.
    C0,
    /// C0 plus the channel gate.
    C1,
    /// C0 plus the mask head.
    C2,
    /// Everything.
    #[default]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Baseline,
        Ablation::C0,
        Ablation::C1,
        Ablation::C2,
        Ablation::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::C0 => "c0",
            Ablation::C1 => "c1",
            Ablation::C2 => "c2",
            Ablation::Full => "full",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }

    /// Whether the RoI path and the global instance feature are active.
    pub fn uses_global(self) -> bool {
        self != Ablation::Baseline
    }

    pub fn uses_gate(self) -> bool {
        matches!(self, Ablation::C1 | Ablation::Full)
    }

    pub fn uses_mask(self) -> bool {
        matches!(self, Ablation::C2 | Ablation::Full)
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hyperparameters of the instance model (everything past the encoders).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectConfig {
    /// RoI grid side; `H_r = W_r = roi`.
    pub roi: usize,
    /// One-hot category vocabulary size.
    pub n_categories: usize,
    /// Occupancy-decoder hidden width.
    pub hidden: usize,
    /// Gate-MLP hidden width.
    pub gate_hidden: usize,
    /// Positionally encode canonical x and y alongside z.
    pub pe_spatial: bool,
    /// Mask-loss weight relative to the occupancy loss.
    pub lambda_mask: f64,
    pub ablation: Ablation,
    /// Base seed for parameter initialization.
    pub seed: u64,
}

impl Default for ObjectConfig {
    fn default() -> Self {
        ObjectConfig {
            roi: 16,
            n_categories: 9,
            hidden: 128,
            gate_hidden: 128,
            pe_spatial: false,
            lambda_mask: 1.0,
            ablation: Ablation::Full,
            seed: 0,
        }
    }
}

impl ObjectConfig {
    /// Full-scale RoI grid (64x64).
    pub fn paper_scale() -> Self {
        ObjectConfig {
            roi: 64,
            ..ObjectConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.roi < 2 {
            return Err(Error::Config(format!("roi must be >= 2, got {}", self.roi)));
        }
        if self.n_categories == 0 || self.hidden == 0 || self.gate_hidden == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        if !(self.lambda_mask >= 0.0) {
            return Err(Error::Config("lambda_mask must be >= 0".into()));
        }
        Ok(())
    }

    /// Width of the positional-encoding part of the decoder input.
    pub fn pe_width(&self) -> usize {
        if self.pe_spatial {
            3 * PE_DIM
        } else {
            PE_DIM
        }
    }

    /// Decoder input width for `l_c`-wide locals and `d_g`-wide globals.
    pub fn decoder_in(&self, l_c: usize, d_g: usize) -> usize {
        let g = if self.ablation.uses_global() { d_g } else { 0 };
        l_c + g + self.pe_width() + self.n_categories
    }
}

/// RoI-aligned instance feature grid.
#[derive(Debug, Clone)]
pub struct RoiFeature<S: Scalar> {
    /// `(l_c, roi, roi)` tensor.
    pub tensor: Array3<S>,
    pub source_box: Box2D<S>,
    pub instance_id: u32,
}

impl<S: Scalar> RoiFeature<S> {
    pub fn roi(&self) -> usize {
        self.tensor.dim().1
    }

    /// Continuous RoI-grid coordinates of an image pixel; may fall outside
    /// the grid (sampling clamps).
    pub fn pixel_to_grid(&self, u: S, v: S) -> [f64; 2] {
        let (_, h_r, w_r) = self.tensor.dim();
        let g = roi_uv(&self.source_box, u, v, w_r, h_r);
        [g[0].to_f() - 0.5, g[1].to_f() - 0.5]
    }

    /// Clamped bilinear sample at an image pixel.
    pub fn sample_pixel(&self, u: S, v: S) -> Vec<S> {
        let [gu, gv] = self.pixel_to_grid(u, v);
        bilinear3(&self.tensor, gu, gv)
    }
}

/// Channel-gated RoI grid plus the gate that produced it.
#[derive(Debug, Clone)]
pub struct FilteredFeature<S: Scalar> {
    /// `(l_c, roi, roi)` gated tensor.
    pub tensor: Array3<S>,
    /// `(l_c, roi, roi)` per-location gate values in (0, 1).
    pub gates: Array3<S>,
}

impl<S: Scalar> FilteredFeature<S> {
    /// Identity-gated view of a RoI grid, for variants without the gate.
    pub fn ungated(roi: &RoiFeature<S>) -> Self {
        FilteredFeature {
            tensor: roi.tensor.clone(),
            gates: Array3::ones(roi.tensor.raw_dim()),
        }
    }
}

/// Predicted amodal instance silhouette on the RoI grid.
#[derive(Debug, Clone)]
pub struct AmodalMask<S: Scalar> {
    /// `(roi, roi)` values in [0, 1].
    pub grid: Array2<S>,
    pub instance_id: u32,
}

/// Clamped 4-tap bilinear sample of a `(c, h, w)` tensor at continuous grid
/// coordinates; the tap math mirrors the taped gather op.
pub fn bilinear3<S: Scalar>(tensor: &Array3<S>, gu: f64, gv: f64) -> Vec<S> {
    let (c, h, w) = tensor.dim();
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
            acc = acc + tensor[(ci, ty, tx)] * tw;
        }
        out.push(acc);
    }
    out
}

/// Image-pixel centers of the cells of a `roi x roi` grid over `bbox`,
/// expressed as feature-grid coordinates at the given stride (gather-ready).
pub fn roi_cell_coords<S: Scalar>(bbox: &Box2D<S>, roi: usize, stride: usize) -> Vec<[f64; 2]> {
    let (x0, y0) = (bbox.x0.to_f(), bbox.y0.to_f());
    let (bw, bh) = (bbox.width().to_f(), bbox.height().to_f());
    let s = stride as f64;
    let mut coords = Vec::with_capacity(roi * roi);
    for i in 0..roi {
        let v = y0 + (i as f64 + 0.5) / roi as f64 * bh;
        for j in 0..roi {
            let u = x0 + (j as f64 + 0.5) / roi as f64 * bw;
            coords.push([u / s - 0.5, v / s - 0.5]);
        }
    }
    coords
}

/// Resamples a feature map on a fixed `roi x roi` grid over `bbox`: each
/// output cell is the bilinear sample at the cell's center.
pub fn roi_align<S: Scalar>(
    map: &FeatureMap<S>,
    bbox: &Box2D<S>,
    roi: usize,
    instance_id: u32,
) -> Result<RoiFeature<S>> {
    if roi < 2 {
        return Err(Error::Config(format!("roi must be >= 2, got {roi}")));
    }
    if !(bbox.width().to_f() > 0.0 && bbox.height().to_f() > 0.0) {
        return Err(Error::Degenerate(format!(
            "roi box [{}, {}] x [{}, {}] has no area",
            bbox.x0.to_f(),
            bbox.x1.to_f(),
            bbox.y0.to_f(),
            bbox.y1.to_f()
        )));
    }
    let l_c = map.channels();
    let mut tensor = Array3::<S>::zeros((l_c, roi, roi));
    for i in 0..roi {
        let v = bbox.y0 + S::from_f((i as f64 + 0.5) / roi as f64) * bbox.height();
        for j in 0..roi {
            let u = bbox.x0 + S::from_f((j as f64 + 0.5) / roi as f64) * bbox.width();
            let cell = map.sample(u, v);
            for (ci, val) in cell.into_iter().enumerate() {
                tensor[(ci, i, j)] = val;
            }
        }
    }
    Ok(RoiFeature {
        tensor,
        source_box: bbox.clone(),
        instance_id,
    })
}

/// Registers the gate MLP: FC(l_c + d_g -> hidden), FC(hidden -> hidden),
/// FC(hidden -> l_c), sigmoid output.
pub fn register_gate<S: Scalar>(
    store: &mut ParamStore<S>,
    l_c: usize,
    d_g: usize,
    hidden: usize,
    prefix: &str,
    seed: u64,
) -> Result<()> {
    let mut idx = 0;
    register_fc(store, &format!("{prefix}.fc1"), l_c + d_g, hidden, seed, &mut idx)?;
    register_fc(store, &format!("{prefix}.fc2"), hidden, hidden, seed, &mut idx)?;
    register_fc(store, &format!("{prefix}.fc3"), hidden, l_c, seed, &mut idx)?;
    Ok(())
}

/// Taped gate: returns `(filtered, gate)` nodes, both `(n, l_c)`.
pub fn gate_forward<S: Scalar>(
    t: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
    local: NodeId,
    global_inst: NodeId,
) -> (NodeId, NodeId) {
    let cat = t.concat(1, local, global_inst);
    let h = fc_node(t, store, &format!("{prefix}.fc1"), cat);
    let h = t.relu(h);
    let h = fc_node(t, store, &format!("{prefix}.fc2"), h);
    let h = t.relu(h);
    let h = fc_node(t, store, &format!("{prefix}.fc3"), h);
    let gate = t.sigmoid(h);
    let filtered = t.mul(gate, local);
    (filtered, gate)
}

fn fc_node<S: Scalar>(t: &mut Tape<S>, store: &ParamStore<S>, name: &str, x: NodeId) -> NodeId {
    let w = t.param(store, pidx(store, &format!("{name}.w")));
    let b = t.param(store, pidx(store, &format!("{name}.b")));
    let h = t.matmul(x, w);
    t.add_bias(h, b)
}

fn mat_fc<S: Scalar>(store: &ParamStore<S>, name: &str, x: &Array2<S>) -> Array2<S> {
    let w = as2(store, &format!("{name}.w"));
    let b = as1(store, &format!("{name}.b"));
    x.dot(&w) + &b
}

fn sigmoid_mat<S: Scalar>(x: Array2<S>) -> Array2<S> {
    let one = S::one();
    x.mapv(|v| one / (one + (-v).exp()))
}

fn relu_mat<S: Scalar>(x: Array2<S>) -> Array2<S> {
    x.mapv(|v| v.max(S::zero()))
}

/// Eval gate over row-matrices of locals and matching globals; returns
/// `(filtered, gates)`.
pub fn gate_eval_rows<S: Scalar>(
    store: &ParamStore<S>,
    prefix: &str,
    locals: &Array2<S>,
    globals: &Array2<S>,
) -> (Array2<S>, Array2<S>) {
    let cat = ndarray::concatenate(Axis(1), &[locals.view(), globals.view()]).expect("row match");
    let h = relu_mat(mat_fc(store, &format!("{prefix}.fc1"), &cat));
    let h = relu_mat(mat_fc(store, &format!("{prefix}.fc2"), &h));
    let gates = sigmoid_mat(mat_fc(store, &format!("{prefix}.fc3"), &h));
    (&gates * locals, gates)
}

/// Channel gate for one queried location: `gate = sigmoid(MLP([local,
/// global]))`, `filtered = gate * local`.
pub fn channel_filter<S: Scalar>(
    store: &ParamStore<S>,
    prefix: &str,
    local: &Array1<S>,
    global_inst: &GlobalFeature<S>,
) -> (Array1<S>, Array1<S>) {
    let l = local.view().insert_axis(Axis(0)).to_owned();
    let g = global_inst.values.view().insert_axis(Axis(0)).to_owned();
    let (f, gt) = gate_eval_rows(store, prefix, &l, &g);
    (f.row(0).to_owned(), gt.row(0).to_owned())
}

/// Applies a (possibly forced) gate to a local feature vector. Test hook
/// for the identity and annihilating gates.
pub fn apply_gate<S: Scalar>(local: &Array1<S>, gate: &Array1<S>) -> Array1<S> {
    assert_eq!(local.len(), gate.len(), "gate width");
    gate * local
}

/// Gates every cell of a RoI grid, producing the filtered feature map the
/// mask head consumes.
pub fn filter_roi<S: Scalar>(
    store: &ParamStore<S>,
    prefix: &str,
    roi: &RoiFeature<S>,
    global_inst: &GlobalFeature<S>,
) -> FilteredFeature<S> {
    let (l_c, h_r, w_r) = roi.tensor.dim();
    let cells = grid_to_rows(&roi.tensor);
    let g_rows = repeat_row(&global_inst.values, h_r * w_r);
    let (f, gt) = gate_eval_rows(store, prefix, &cells, &g_rows);
    FilteredFeature {
        tensor: rows_to_grid(&f, l_c, h_r, w_r),
        gates: rows_to_grid(&gt, l_c, h_r, w_r),
    }
}

/// `(c, h, w)` grid -> `(h*w, c)` row-per-location matrix.
pub fn grid_to_rows<S: Scalar>(grid: &Array3<S>) -> Array2<S> {
    let (c, h, w) = grid.dim();
    let mut rows = Array2::<S>::zeros((h * w, c));
    for i in 0..h {
        for j in 0..w {
            for ci in 0..c {
                rows[(i * w + j, ci)] = grid[(ci, i, j)];
            }
        }
    }
    rows
}

fn rows_to_grid<S: Scalar>(rows: &Array2<S>, c: usize, h: usize, w: usize) -> Array3<S> {
    let mut grid = Array3::<S>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            for ci in 0..c {
                grid[(ci, i, j)] = rows[(i * w + j, ci)];
            }
        }
    }
    grid
}

pub(crate) fn repeat_row<S: Scalar>(row: &Array1<S>, n: usize) -> Array2<S> {
    let mut out = Array2::<S>::zeros((n, row.len()));
    for mut r in out.rows_mut() {
        r.assign(row);
    }
    out
}

// Mask head widths between l_c input and the 1-channel sigmoid output.
const MASK_WIDTHS: [usize; 3] = [64, 64, 32];

/// Registers the mask head: four per-location FC layers (1x1 convolutions),
/// sigmoid output.
pub fn register_mask<S: Scalar>(
    store: &mut ParamStore<S>,
    l_c: usize,
    prefix: &str,
    seed: u64,
) -> Result<()> {
    let mut idx = 0;
    let mut cin = l_c;
    for (i, cout) in MASK_WIDTHS.into_iter().enumerate() {
        register_fc(store, &format!("{prefix}.fc{}", i + 1), cin, cout, seed, &mut idx)?;
        cin = cout;
    }
    register_fc(store, &format!("{prefix}.fc4"), cin, 1, seed, &mut idx)?;
    Ok(())
}

/// Taped mask head over `(n, l_c)` location rows; returns `(n, 1)` in
/// (0, 1).
pub fn mask_forward<S: Scalar>(
    t: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
    rows: NodeId,
) -> NodeId {
    let h = fc_node(t, store, &format!("{prefix}.fc1"), rows);
    let h = t.relu(h);
    let h = fc_node(t, store, &format!("{prefix}.fc2"), h);
    let h = t.relu(h);
    let h = fc_node(t, store, &format!("{prefix}.fc3"), h);
    let h = t.relu(h);
    let h = fc_node(t, store, &format!("{prefix}.fc4"), h);
    t.sigmoid(h)
}

fn mask_eval_rows<S: Scalar>(store: &ParamStore<S>, prefix: &str, rows: &Array2<S>) -> Array2<S> {
    let h = relu_mat(mat_fc(store, &format!("{prefix}.fc1"), rows));
    let h = relu_mat(mat_fc(store, &format!("{prefix}.fc2"), &h));
    let h = relu_mat(mat_fc(store, &format!("{prefix}.fc3"), &h));
    sigmoid_mat(mat_fc(store, &format!("{prefix}.fc4"), &h))
}

/// Predicts the amodal instance silhouette from a gated RoI grid. Each cell
/// depends only on its own feature vector.
pub fn predict_mask<S: Scalar>(
    store: &ParamStore<S>,
    prefix: &str,
    filtered: &FilteredFeature<S>,
    instance_id: u32,
) -> AmodalMask<S> {
    let (_, h_r, w_r) = filtered.tensor.dim();
    let rows = grid_to_rows(&filtered.tensor);
    let vals = mask_eval_rows(store, prefix, &rows);
    let mut grid = Array2::<S>::zeros((h_r, w_r));
    for i in 0..h_r {
        for j in 0..w_r {
            grid[(i, j)] = vals[(i * w_r + j, 0)];
        }
    }
    AmodalMask { grid, instance_id }
}

/// Positional encoding of a scalar: interleaved `(sin 2^k pi z, cos 2^k pi
/// z)` for `k = 0..PE_FREQS`, then the raw value; `PE_DIM` outputs.
pub fn pe_eval<S: Scalar>(z: S) -> Vec<S> {
    let mut out = Vec::with_capacity(PE_DIM);
    for k in 0..PE_FREQS {
        let f = S::from_f(std::f64::consts::PI * (1u64 << k) as f64);
        out.push((z * f).sin());
        out.push((z * f).cos());
    }
    out.push(z);
    out
}

/// Taped positional encoding of a `(n, 1)` column; returns `(n, PE_DIM)`.
/// Built from sin/cos ops so gradients flow to the inputs.
pub fn pe_forward<S: Scalar>(t: &mut Tape<S>, z: NodeId) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for k in 0..PE_FREQS {
        let f = S::from_f(std::f64::consts::PI * (1u64 << k) as f64);
        let zf = t.scale(z, f);
        let s = t.sin(zf);
        let c = t.cos(zf);
        let pair = t.concat(1, s, c);
        acc = Some(match acc {
            None => pair,
            Some(a) => t.concat(1, a, pair),
        });
    }
    let a = acc.expect("PE_FREQS > 0");
    t.concat(1, a, z)
}

pub(crate) fn pe_eval_rows<S: Scalar>(zs: &[S]) -> Array2<S> {
    let mut out = Array2::<S>::zeros((zs.len(), PE_DIM));
    for (i, &z) in zs.iter().enumerate() {
        for (j, v) in pe_eval(z).into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

pub fn one_hot<S: Scalar>(idx: usize, n: usize) -> Result<Array1<S>> {
    if idx >= n {
        return Err(Error::Config(format!(
            "category {idx} outside vocabulary of {n}"
        )));
    }
    let mut v = Array1::<S>::zeros(n);
    v[idx] = S::one();
    Ok(v)
}

/// Registers the occupancy decoder: five FC layers of width `hidden`, the
/// input re-concatenated into layer 3, sigmoid output.
pub fn register_decoder<S: Scalar>(
    store: &mut ParamStore<S>,
    in_dim: usize,
    hidden: usize,
    prefix: &str,
    seed: u64,
) -> Result<()> {
    let mut idx = 0;
    register_fc(store, &format!("{prefix}.fc1"), in_dim, hidden, seed, &mut idx)?;
    register_fc(store, &format!("{prefix}.fc2"), hidden, hidden, seed, &mut idx)?;
    register_fc(store, &format!("{prefix}.fc3"), hidden + in_dim, hidden, seed, &mut idx)?;
    register_fc(store, &format!("{prefix}.fc4"), hidden, hidden, seed, &mut idx)?;
    register_fc(store, &format!("{prefix}.fc5"), hidden, 1, seed, &mut idx)?;
    Ok(())
}

/// Taped decoder over assembled `(n, in_dim)` rows; returns `(n, 1)` in
/// (0, 1).
pub fn decoder_forward<S: Scalar>(
    t: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
    x: NodeId,
) -> NodeId {
    let h = fc_node(t, store, &format!("{prefix}.fc1"), x);
    let h = t.relu(h);
    let h = fc_node(t, store, &format!("{prefix}.fc2"), h);
    let h = t.relu(h);
    let skip = t.concat(1, h, x);
    let h = fc_node(t, store, &format!("{prefix}.fc3"), skip);
    let h = t.relu(h);
    let h = fc_node(t, store, &format!("{prefix}.fc4"), h);
    let h = t.relu(h);
    let h = fc_node(t, store, &format!("{prefix}.fc5"), h);
    t.sigmoid(h)
}

pub(crate) fn decoder_eval_rows<S: Scalar>(store: &ParamStore<S>, prefix: &str, x: &Array2<S>) -> Array1<S> {
    let h = relu_mat(mat_fc(store, &format!("{prefix}.fc1"), x));
    let h = relu_mat(mat_fc(store, &format!("{prefix}.fc2"), &h));
    let skip = ndarray::concatenate(Axis(1), &[h.view(), x.view()]).expect("row match");
    let h = relu_mat(mat_fc(store, &format!("{prefix}.fc3"), &skip));
    let h = relu_mat(mat_fc(store, &format!("{prefix}.fc4"), &h));
    let s = sigmoid_mat(mat_fc(store, &format!("{prefix}.fc5"), &h));
    s.column(0).to_owned()
}

/// Decodes one query: `[filtered, global, PE(z), category]` through the
/// skip-connected FC stack. `global_inst` must be present exactly when the
/// configured ablation uses it.
pub fn decode_occupancy<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ObjectConfig,
    prefix: &str,
    filtered: &Array1<S>,
    global_inst: Option<&GlobalFeature<S>>,
    z: S,
    category: usize,
) -> Result<S> {
    if cfg.pe_spatial {
        return Err(Error::Config(
            "single-z decoding requires pe_spatial = false".into(),
        ));
    }
    if cfg.ablation.uses_global() != global_inst.is_some() {
        return Err(Error::Config(format!(
            "ablation {} and presence of the global feature disagree",
            cfg.ablation
        )));
    }
    let onehot = one_hot::<S>(category, cfg.n_categories)?;
    let mut row = Vec::with_capacity(filtered.len() + PE_DIM + cfg.n_categories + 8);
    row.extend(filtered.iter().copied());
    if let Some(g) = global_inst {
        row.extend(g.values.iter().copied());
    }
    row.extend(pe_eval(z));
    row.extend(onehot.iter().copied());
    let x = Array2::from_shape_vec((1, row.len()), row).expect("row built");
    Ok(decoder_eval_rows(store, prefix, &x)[0])
}

/// Registers every subnetwork the configured ablation needs. The parameter
/// name sets nest: baseline ⊆ c0 ⊆ {c1, c2} ⊆ full.
pub fn register_object_nets<S: Scalar>(
    store: &mut ParamStore<S>,
    enc: &EncoderConfig,
    cfg: &ObjectConfig,
) -> Result<()> {
    enc.validate()?;
    cfg.validate()?;
    register_hourglass(store, enc, P_ENC)?;
    if cfg.ablation.uses_global() {
        match enc.global_source {
            GlobalSource::InstanceCrop => register_crop_encoder(store, enc, P_GLOBAL_INST)?,
            GlobalSource::PooledRoi => register_global_head(
                store,
                enc.l_c,
                enc.d_g,
                P_GLOBAL_INST,
                param_seed(enc.seed, 404),
            )?,
        }
    }
    if cfg.ablation.uses_gate() {
        register_gate(
            store,
            enc.l_c,
            enc.d_g,
            cfg.gate_hidden,
            P_GATE,
            param_seed(cfg.seed, 101),
        )?;
    }
    if cfg.ablation.uses_mask() {
        register_mask(store, enc.l_c, P_MASK, param_seed(cfg.seed, 202))?;
    }
    register_decoder(
        store,
        cfg.decoder_in(enc.l_c, enc.d_g),
        cfg.hidden,
        P_DEC,
        param_seed(cfg.seed, 303),
    )?;
    Ok(())
}

/// Computes the global instance feature for one instance per the configured
/// source.
pub fn instance_global<S: Scalar>(
    store: &ParamStore<S>,
    enc: &EncoderConfig,
    image: &Array3<S>,
    bbox: &Box2D<S>,
    roi: &RoiFeature<S>,
) -> Result<GlobalFeature<S>> {
    match enc.global_source {
        GlobalSource::InstanceCrop => {
            let crop = crop_image(image, bbox)?;
            encode_global(store, enc, P_GLOBAL_INST, GlobalInput::Crop(&crop))
        }
        GlobalSource::PooledRoi => encode_global(
            store,
            enc,
            P_GLOBAL_INST,
            GlobalInput::PooledRoi(&roi.tensor),
        ),
    }
}

/// Result of evaluating the instance model on a point batch.
#[derive(Debug, Clone)]
pub struct ObjectForward<S: Scalar> {
    /// One occupancy per input point, in [0, 1]; exactly 0 for points
    /// behind the camera.
    pub occupancy: Vec<S>,
    /// Per-point behind-camera flags.
    pub behind: Vec<bool>,
    /// Per-point gate vectors `(n, l_c)` when the gate is active; rows of
    /// behind-camera points are zero.
    pub gates: Option<Array2<S>>,
}

/// Evaluates occupancies for canonical-frame points given precomputed
/// features. `roi`/`global_inst` presence must match the ablation.
#[allow(clippy::too_many_arguments)]
pub fn decode_points<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ObjectConfig,
    map: &FeatureMap<S>,
    roi: Option<&RoiFeature<S>>,
    global_inst: Option<&GlobalFeature<S>>,
    pose: &InstancePose<S>,
    camera: &Camera<S>,
    points: &[V3<S>],
) -> Result<ObjectForward<S>> {
    let uses_global = cfg.ablation.uses_global();
    if uses_global != roi.is_some() || uses_global != global_inst.is_some() {
        return Err(Error::Config(format!(
            "ablation {} and provided features disagree",
            cfg.ablation
        )));
    }
    if points.is_empty() {
        return Err(Error::EmptyPointSet {
            op: "decode_points",
        });
    }
    if !(pose.center[2].to_f() > 0.0) {
        return Err(Error::AllPointsBehindCamera);
    }
    let n = points.len();
    let l_c = map.channels();
    let mut behind = vec![false; n];
    let mut occupancy = vec![S::zero(); n];
    let mut visible: Vec<usize> = Vec::with_capacity(n);
    let mut locals: Vec<S> = Vec::new();
    let mut zs: Vec<S> = Vec::new();
    let mut canon: Vec<V3<S>> = Vec::new();
    for (i, &p) in points.iter().enumerate() {
        let cam = pose.canonical_to_camera(p);
        if cam[2].to_f() <= 0.0 {
            behind[i] = true;
            continue;
        }
        let [u, v] = camera.project(cam)?;
        let local = match roi {
            None => map.sample(u, v),
            Some(r) => r.sample_pixel(u, v),
        };
        locals.extend(local);
        zs.push(pose.relative_depth(cam));
        canon.push(p);
        visible.push(i);
    }
    if visible.is_empty() {
        return Err(Error::AllPointsBehindCamera);
    }
    let m = visible.len();
    let locals = Array2::from_shape_vec((m, l_c), locals).expect("row count");
    let (decoded_locals, gate_rows) = if cfg.ablation.uses_gate() {
        let g = global_inst.expect("checked above");
        let g_rows = repeat_row(&g.values, m);
        let (f, gt) = gate_eval_rows(store, P_GATE, &locals, &g_rows);
        (f, Some(gt))
    } else {
        (locals, None)
    };
    let mut parts: Vec<Array2<S>> = vec![decoded_locals];
    if let Some(g) = global_inst {
        parts.push(repeat_row(&g.values, m));
    }
    if cfg.pe_spatial {
        for axis in 0..2 {
            let vals: Vec<S> = canon.iter().map(|p| p[axis]).collect();
            parts.push(pe_eval_rows(&vals));
        }
    }
    parts.push(pe_eval_rows(&zs));
    let onehot = one_hot::<S>(pose.category_id, cfg.n_categories)?;
    parts.push(repeat_row(&onehot, m));
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let rows = ndarray::concatenate(Axis(1), &views).expect("row match");
    let occ = decoder_eval_rows(store, P_DEC, &rows);
    for (row, &i) in visible.iter().enumerate() {
        occupancy[i] = occ[row];
    }
    let gates = gate_rows.map(|gt| {
        let mut full = Array2::<S>::zeros((n, l_c));
        for (row, &i) in visible.iter().enumerate() {
            full.row_mut(i).assign(&gt.row(row));
        }
        full
    });
    Ok(ObjectForward {
        occupancy,
        behind,
        gates,
    })
}

/// Full eval pipeline for one instance: encode the image, build the RoI
/// features and the global instance feature per the ablation, then decode
/// the batch's canonical points.
pub fn instpifu_forward<S: Scalar>(
    store: &ParamStore<S>,
    enc: &EncoderConfig,
    cfg: &ObjectConfig,
    image: &Array3<S>,
    bbox: &Box2D<S>,
    pose: &InstancePose<S>,
    camera: &Camera<S>,
    batch: &SampleBatch,
) -> Result<ObjectForward<S>> {
    if batch.frame != Frame::Canonical {
        return Err(Error::Config(
            "instance decoding expects canonical-frame points".into(),
        ));
    }
    let map = extract_local_features(store, enc, P_ENC, image)?;
    let (roi, ginst) = if cfg.ablation.uses_global() {
        let r = roi_align(&map, bbox, cfg.roi, batch.instance_id)?;
        let g = instance_global(store, enc, image, bbox, &r)?;
        (Some(r), Some(g))
    } else {
        (None, None)
    };
    let points: Vec<V3<S>> = batch
        .points
        .iter()
        .map(|p| [S::from_f(p[0] as f64), S::from_f(p[1] as f64), S::from_f(p[2] as f64)])
        .collect();
    decode_points(
        store,
        cfg,
        &map,
        roi.as_ref(),
        ginst.as_ref(),
        pose,
        camera,
        &points,
    )
}

/// Nodes produced by the taped training forward of one instance.
pub struct ObjectTapeOutput {
    /// `(n, 1)` occupancies in (0, 1).
    pub occupancy: NodeId,
    /// `(roi, roi)` mask prediction when the mask head is active.
    pub mask: Option<NodeId>,
    /// `(n, l_c)` per-point gates when the gate is active.
    pub gates: Option<NodeId>,
}

/// Encodes a scene image on the tape into an `(l_c, h/stride, w/stride)`
/// feature-map node. One encoding can serve every instance in the scene
/// through [`object_forward_on_map`].
pub fn encode_image_tape<S: Scalar>(
    t: &mut Tape<S>,
    store: &ParamStore<S>,
    enc: &EncoderConfig,
    image: &Array3<S>,
) -> Result<NodeId> {
    enc.validate()?;
    let (c, h, w) = image.dim();
    if c != 3 || h % enc.stride != 0 || w % enc.stride != 0 {
        return Err(Error::Shape(format!(
            "image {w}x{h} incompatible with stride {}",
            enc.stride
        )));
    }
    let x4 = image
        .view()
        .insert_axis(Axis(0))
        .to_owned()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("4-d image");
    let xi = t.input(x4.into_dyn());
    let fmap = hourglass_forward(t, store, enc, P_ENC, xi);
    Ok(t.reshape(fmap, &[enc.l_c, h / enc.stride, w / enc.stride]))
}

/// Taped training forward of one instance. All points must be visible
/// (training data is sampled around camera-facing instances; callers filter
/// behind-camera points, which carry no decoder gradient).
#[allow(clippy::too_many_arguments)]
pub fn object_forward_tape<S: Scalar>(
    t: &mut Tape<S>,
    store: &ParamStore<S>,
    enc: &EncoderConfig,
    cfg: &ObjectConfig,
    image: &Array3<S>,
    bbox: &Box2D<S>,
    pose: &InstancePose<S>,
    camera: &Camera<S>,
    points: &[V3<S>],
) -> Result<ObjectTapeOutput> {
    let map = encode_image_tape(t, store, enc, image)?;
    object_forward_on_map(t, store, enc, cfg, image, map, bbox, pose, camera, points)
}

/// [`object_forward_tape`] against an already-encoded feature-map node.
/// `map` must come from [`encode_image_tape`] over the same `image`.
#[allow(clippy::too_many_arguments)]
pub fn object_forward_on_map<S: Scalar>(
    t: &mut Tape<S>,
    store: &ParamStore<S>,
    enc: &EncoderConfig,
    cfg: &ObjectConfig,
    image: &Array3<S>,
    map: NodeId,
    bbox: &Box2D<S>,
    pose: &InstancePose<S>,
    camera: &Camera<S>,
    points: &[V3<S>],
) -> Result<ObjectTapeOutput> {
    enc.validate()?;
    cfg.validate()?;
    if points.is_empty() {
        return Err(Error::EmptyPointSet {
            op: "object_forward_tape",
        });
    }
    let n = points.len();
    let l_c = enc.l_c;
    // Project every point; training requires all of them in front.
    let mut pixels: Vec<[S; 2]> = Vec::with_capacity(n);
    let mut zs: Vec<S> = Vec::with_capacity(n);
    for &p in points {
        let cam = pose.canonical_to_camera(p);
        if cam[2].to_f() <= 0.0 {
            return Err(Error::BehindCamera { z: cam[2].to_f() });
        }
        pixels.push(camera.project(cam)?);
        zs.push(pose.relative_depth(cam));
    }
    let f3 = map;

    let uses_global = cfg.ablation.uses_global();
    let (local_rows, ginst_row, roi_grid_rows) = if uses_global {
        if !(bbox.width().to_f() > 0.0 && bbox.height().to_f() > 0.0) {
            return Err(Error::Degenerate("roi box has no area".into()));
        }
        // RoI grid: gather cells from the map, then re-sample the grid at
        // the projected points.
        let cell_coords = roi_cell_coords(bbox, cfg.roi, enc.stride);
        let cells = t.gather(f3, &cell_coords);
        let cells_t = t.transpose2(cells);
        let fr3 = t.reshape(cells_t, &[l_c, cfg.roi, cfg.roi]);
        let point_coords: Vec<[f64; 2]> = pixels
            .iter()
            .map(|&[u, v]| {
                let g = roi_uv(bbox, u, v, cfg.roi, cfg.roi);
                [g[0].to_f() - 0.5, g[1].to_f() - 0.5]
            })
            .collect();
        let local_rows = t.gather(fr3, &point_coords);
        let g_row = match enc.global_source {
            GlobalSource::InstanceCrop => {
                let crop = crop_image(image, bbox)?;
                let resized = resize_bilinear(&crop, enc.crop_res, enc.crop_res);
                let crop4 = resized
                    .view()
                    .insert_axis(Axis(0))
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix4>()
                    .expect("4-d crop");
                let ci = t.input(crop4.into_dyn());
                crop_encoder_forward(t, store, P_GLOBAL_INST, ci)
            }
            GlobalSource::PooledRoi => {
                let fr4 = t.reshape(cells_t, &[1, l_c, cfg.roi, cfg.roi]);
                let pooled = t.gap(fr4);
                global_head_forward(t, store, P_GLOBAL_INST, pooled)
            }
        };
        (local_rows, Some(g_row), Some(cells))
    } else {
        let coords: Vec<[f64; 2]> = pixels
            .iter()
            .map(|&[u, v]| {
                let s = enc.stride as f64;
                [u.to_f() / s - 0.5, v.to_f() / s - 0.5]
            })
            .collect();
        (t.gather(f3, &coords), None, None)
    };

    let expand = |t: &mut Tape<S>, row: NodeId, m: usize| {
        let ones = t.input2(Array2::<S>::ones((m, 1)));
        t.matmul(ones, row)
    };
    let (decoded_locals, gates) = if cfg.ablation.uses_gate() {
        let g_rows = expand(t, ginst_row.expect("global present"), n);
        let (f, gt) = gate_forward(t, store, P_GATE, local_rows, g_rows);
        (f, Some(gt))
    } else {
        (local_rows, None)
    };

    let mut rows = decoded_locals;
    if let Some(g) = ginst_row {
        let g_rows = expand(t, g, n);
        rows = t.concat(1, rows, g_rows);
    }
    if cfg.pe_spatial {
        for axis in 0..2 {
            let col: Vec<S> = points.iter().map(|p| p[axis]).collect();
            let col = t.input2(Array2::from_shape_vec((n, 1), col).expect("column"));
            let pe = pe_forward(t, col);
            rows = t.concat(1, rows, pe);
        }
    }
    let zcol = t.input2(Array2::from_shape_vec((n, 1), zs).expect("column"));
    let pe = pe_forward(t, zcol);
    rows = t.concat(1, rows, pe);
    let onehot = one_hot::<S>(pose.category_id, cfg.n_categories)?;
    let oh_row = t.input2(onehot.insert_axis(Axis(0)));
    let oh_rows = expand(t, oh_row, n);
    rows = t.concat(1, rows, oh_rows);

    let occupancy = decoder_forward(t, store, P_DEC, rows);

    let mask = if cfg.ablation.uses_mask() {
        let cells = roi_grid_rows.expect("mask needs the roi path");
        let gated_cells = if cfg.ablation.uses_gate() {
            let g_rows = expand(t, ginst_row.expect("global present"), cfg.roi * cfg.roi);
            let (f, _) = gate_forward(t, store, P_GATE, cells, g_rows);
            f
        } else {
            cells
        };
        let m = mask_forward(t, store, P_MASK, gated_cells);
        Some(t.reshape(m, &[cfg.roi, cfg.roi]))
    } else {
        None
    };

    Ok(ObjectTapeOutput {
        occupancy,
        mask,
        gates,
    })
}

/// Loss components for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectLoss<S: Scalar> {
    pub total: S,
    pub occupancy: S,
    pub mask: S,
}

/// Mean-squared occupancy loss plus `lambda_mask` times the mean-squared
/// mask loss. Mask terms may be absent together (no mask head).
pub fn loss_object<S: Scalar>(
    pred: &[S],
    gt: &[S],
    mask_pred: Option<&Array2<S>>,
    mask_gt: Option<&Array2<S>>,
    lambda_mask: S,
) -> Result<ObjectLoss<S>> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "occupancy shapes differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let occupancy_err = mse_slice(pred, gt);
    let mask = match (mask_pred, mask_gt) {
        (None, None) => S::zero(),
        (Some(p), Some(g)) => {
            if p.dim() != g.dim() {
                return Err(Error::Shape(format!(
                    "mask shapes differ: {:?} vs {:?}",
                    p.dim(),
                    g.dim()
                )));
            }
            let pv: Vec<S> = p.iter().copied().collect();
            let gv: Vec<S> = g.iter().copied().collect();
            mse_slice(&pv, &gv)
        }
        _ => {
            return Err(Error::Shape(
                "mask prediction and target must be present together".into(),
            ))
        }
    };
    Ok(ObjectLoss {
        total: occupancy_err + lambda_mask * mask,
        occupancy: occupancy_err,
        mask,
    })
}

pub(crate) fn mse_slice<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut s = S::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        s = s + d * d;
    }
    s / S::from_us(a.len())
}

/// Taped counterpart of [`loss_object`]; returns `(total, occupancy,
/// mask)` nodes.
pub fn loss_object_node<S: Scalar>(
    t: &mut Tape<S>,
    occ_pred: NodeId,
    occ_gt: &[S],
    mask_pred: Option<NodeId>,
    mask_gt: Option<&Array2<S>>,
    lambda_mask: S,
) -> (NodeId, NodeId, Option<NodeId>) {
    let target = ndarray::ArrayD::from_shape_vec(
        ndarray::IxDyn(&[occ_gt.len(), 1]),
        occ_gt.to_vec(),
    )
    .expect("column target");
    let occ_l = t.mse_to(occ_pred, target);
    match (mask_pred, mask_gt) {
        (Some(mp), Some(mg)) => {
            let ml = t.mse_to(mp, mg.clone().into_dyn());
            let scaled = t.scale(ml, lambda_mask);
            let total = t.add(occ_l, scaled);
            (total, occ_l, Some(ml))
        }
        (None, None) => (occ_l, occ_l, None),
        _ => panic!("mask prediction and target must be present together"),
    }
}
