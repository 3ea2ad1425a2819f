//! Minimal deterministic neural-network engine.
//!
//! Parameters live in a [`ParamStore`] keyed by name; forward passes build a
//! [`Tape`] that records every op, and [`Tape::backward`] produces exact
//! analytic gradients. Everything is generic over [`Scalar`] so training
//! runs in `f32` while finite-difference verification runs the identical
//! code in `f64`.

mod tape;

pub use tape::{chan_norm_eval, conv2d_eval, Gradients, NodeId, Tape};

use crate::sampling::mix_seed;
use crate::{Error, Result, Scalar};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Named, ordered collection of trainable tensors. Insertion order is the
/// canonical parameter order used by optimizers and checkpoints.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    entries: Vec<(String, ArrayD<S>)>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers a tensor under a unique name and returns its slot.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<S>) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push((name, value));
        Ok(idx)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn value(&self, idx: usize) -> &ArrayD<S> {
        &self.entries[idx].1
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut ArrayD<S> {
        &mut self.entries[idx].1
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<S>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Converts every tensor to another scalar type, preserving order.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, v) in &self.entries {
            let cv = v.mapv(|x| T::from_f(x.to_f()));
            out.add(name.clone(), cv).expect("names already unique");
        }
        out
    }
}

/// He-normal initialised weight matrix `(rows, cols)` with `fan_in` columns.
pub fn he_weight<S: Scalar>(rows: usize, cols: usize, fan_in: usize, seed: u64) -> ArrayD<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = (2.0 / fan_in as f64).sqrt();
    let mut w = Array2::<S>::zeros((rows, cols));
    for v in w.iter_mut() {
        *v = S::from_f(normal(&mut rng) * std);
    }
    w.into_dyn()
}

pub fn zeros1<S: Scalar>(n: usize) -> ArrayD<S> {
    Array1::<S>::zeros(n).into_dyn()
}

pub fn ones1<S: Scalar>(n: usize) -> ArrayD<S> {
    Array1::<S>::ones(n).into_dyn()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; the log argument is strictly positive.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// Derives a per-parameter init seed from a base seed and the parameter's
/// registration index, so adding parameters never reshuffles existing ones
/// within a fixed architecture.
pub fn param_seed(base: u64, index: usize) -> u64 {
    mix_seed(base, index as u64)
}

/// Adam optimizer with bias correction. Moment buffers are allocated on
/// first use per parameter slot; update order follows store order, so steps
/// are bit-deterministic.
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<ArrayD<S>>>,
    v: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// Applies one update. `grads` is indexed by store slot; `None` slots
    /// (parameters absent from the graph) are skipped, which also freezes
    /// their moments.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<ArrayD<S>>]) {
        assert_eq!(grads.len(), store.len(), "grad slots must match store");
        self.t += 1;
        let b1 = S::from_f(self.beta1);
        let b2 = S::from_f(self.beta2);
        let one = S::one();
        let corr1 = S::from_f(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = S::from_f(1.0 - self.beta2.powi(self.t as i32));
        let lr = S::from_f(self.lr);
        let eps = S::from_f(self.eps);
        for (idx, grad) in grads.iter().enumerate() {
            let g = match grad {
                Some(g) => g,
                None => continue,
            };
            let m = self.m[idx].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[idx].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let p = store.value_mut(idx);
            for ((pv, gv), (mv, vv)) in p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (one - b1) * *gv;
                *vv = b2 * *vv + (one - b2) * *gv * *gv;
                let mhat = *mv / corr1;
                let vhat = *vv / corr2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Sums per-sample gradient vectors in sample order into the first one.
/// The fixed order keeps accumulated gradients independent of how samples
/// were scheduled across threads.
pub fn sum_grads<S: Scalar>(
    mut acc: Vec<Option<ArrayD<S>>>,
    batch: impl IntoIterator<Item = Vec<Option<ArrayD<S>>>>,
) -> Vec<Option<ArrayD<S>>> {
    for sample in batch {
        assert_eq!(sample.len(), acc.len());
        for (slot, g) in acc.iter_mut().zip(sample) {
            match (slot.as_mut(), g) {
                (Some(a), Some(b)) => *a = &*a + &b,
                (None, Some(b)) => *slot = Some(b),
                _ => {}
            }
        }
    }
    acc
}

/// Scales every gradient in place (for averaging over a batch).
pub fn scale_grads<S: Scalar>(grads: &mut [Option<ArrayD<S>>], factor: f64) {
    let f = S::from_f(factor);
    for g in grads.iter_mut().flatten() {
        g.mapv_inplace(|v| v * f);
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckSummary {
    pub checked: usize,
    pub within_tol: usize,
    pub max_rel_err: f64,
}

impl GradCheckSummary {
    pub fn fraction_ok(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.within_tol as f64 / self.checked as f64
        }
    }
}

/// Verifies analytic parameter gradients against central differences at
/// 64-bit precision.
///
/// `build` constructs the forward graph on a fresh tape and returns the
/// scalar loss node. `n_coords` coordinates are sampled across all
/// parameters (weighted by size, deterministic in `seed`). A coordinate
/// passes when `|analytic − fd| ≤ max(tol·max(|analytic|,|fd|), 1e-9)`.
pub fn check_param_gradients<F>(
    store: &mut ParamStore<f64>,
    mut build: F,
    n_coords: usize,
    seed: u64,
    tol: f64,
) -> GradCheckSummary
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> NodeId,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = build(store, &mut tape);
        tape.backward(loss).param_grads
    };
    let total: usize = store.n_scalars();
    assert!(total > 0, "store has no parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = GradCheckSummary {
        checked: 0,
        within_tol: 0,
        max_rel_err: 0.0,
    };
    for _ in 0..n_coords {
        let mut flat = rng.gen_range(0..total);
        let mut slot = 0usize;
        while flat >= store.value(slot).len() {
            flat -= store.value(slot).len();
            slot += 1;
        }
        // Index gradients in logical (row-major) order; backward outputs are
        // not guaranteed contiguous.
        let a = analytic[slot]
            .as_ref()
            .and_then(|g| g.iter().nth(flat).copied())
            .unwrap_or(0.0);
        let x0 = store.value(slot).as_slice().expect("contiguous param")[flat];
        let h = 1e-5 * x0.abs().max(1.0);
        let mut eval_at = |x: f64| -> f64 {
            store.value_mut(slot).as_slice_mut().expect("contiguous")[flat] = x;
            let mut tape = Tape::new(store);
            let loss = build(store, &mut tape);
            tape.scalar(loss)
        };
        let fp = eval_at(x0 + h);
        let fm = eval_at(x0 - h);
        eval_at(x0);
        let fd = (fp - fm) / (2.0 * h);
        let abs_err = (a - fd).abs();
        let rel = abs_err / a.abs().max(fd.abs()).max(1e-12);
        summary.checked += 1;
        if abs_err <= (tol * a.abs().max(fd.abs())).max(1e-9) {
            summary.within_tol += 1;
            summary.max_rel_err = summary.max_rel_err.max(if abs_err <= 1e-9 { 0.0 } else { rel });
        } else {
            summary.max_rel_err = summary.max_rel_err.max(rel);
        }
    }
    summary
}

/// Builds an `ArrayD` of the given shape filled from a seeded uniform
/// distribution over `(-1, 1)`; test helper shared across modules.
pub fn seeded_uniform<S: Scalar>(shape: &[usize], seed: u64) -> ArrayD<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = ArrayD::<S>::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = S::from_f(rng.gen_range(-1.0..1.0));
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (i, (name, shape)) in shapes.iter().enumerate() {
            s.add(*name, seeded_uniform(shape, mix_seed(seed, i as u64)))
                .unwrap();
        }
        s
    }

    #[test]
    fn store_rejects_duplicate_names_and_keeps_order() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", zeros1(3)).unwrap();
        s.add("b", zeros1(2)).unwrap();
        assert!(matches!(s.add("a", zeros1(1)), Err(Error::Config(_))));
        let names: Vec<_> = s.names().collect();
        assert_eq!(names, ["a", "b"]);
        assert_eq!(s.index_of("b"), Some(1));
        assert_eq!(s.n_scalars(), 5);
    }

    #[test]
    fn linear_chain_gradients_match_finite_differences() {
        let mut store = store_with(
            &[("w1", &[6, 8]), ("b1", &[8]), ("w2", &[8, 1]), ("b2", &[1])],
            11,
        );
        let x = seeded_uniform::<f64>(&[4, 6], 99);
        let target = seeded_uniform::<f64>(&[4, 1], 98);
        let summary = check_param_gradients(
            &mut store,
            |s, t| {
                let xi = t.input(x.clone());
                let w1 = t.param(s, 0);
                let b1 = t.param(s, 1);
                let w2 = t.param(s, 2);
                let b2 = t.param(s, 3);
                let h = t.matmul(xi, w1);
                let h = t.add_bias(h, b1);
                let h = t.relu(h);
                let h = t.matmul(h, w2);
                let h = t.add_bias(h, b2);
                let h = t.sigmoid(h);
                t.mse_to(h, target.clone())
            },
            200,
            5,
            1e-4,
        );
        assert!(
            summary.fraction_ok() >= 0.95,
            "fraction {} max rel {}",
            summary.fraction_ok(),
            summary.max_rel_err
        );
    }

    #[test]
    fn conv_groupnorm_pool_gradients_match_finite_differences() {
        let mut store = store_with(
            &[
                ("cw", &[5, 3 * 9]),
                ("cb", &[5]),
                ("gamma", &[5]),
                ("beta", &[5]),
                ("fw", &[5, 1]),
            ],
            21,
        );
        // Gamma near 1 keeps the normalised activations well-scaled.
        store.value_mut(2).mapv_inplace(|v| 1.0 + 0.1 * v);
        let x = seeded_uniform::<f64>(&[2, 3, 8, 8], 97);
        let summary = check_param_gradients(
            &mut store,
            |s, t| {
                let xi = t.input(x.clone());
                let cw = t.param(s, 0);
                let cb = t.param(s, 1);
                let gamma = t.param(s, 2);
                let beta = t.param(s, 3);
                let fw = t.param(s, 4);
                let h = t.conv2d(xi, cw, cb, 3, 1, 1);
                let h = t.group_norm(h, gamma, beta, 1);
                let h = t.relu(h);
                let h = t.avg_pool2(h);
                let h = t.up_nearest2(h);
                let h = t.gap(h);
                let y = t.matmul(h, fw);
                let y = t.sigmoid(y);
                t.mean(y)
            },
            200,
            6,
            1e-4,
        );
        assert!(
            summary.fraction_ok() >= 0.95,
            "fraction {} max rel {}",
            summary.fraction_ok(),
            summary.max_rel_err
        );
    }

    #[test]
    fn strided_padded_conv_gradients_match_finite_differences() {
        let mut store = store_with(&[("cw", &[4, 2 * 9]), ("cb", &[4]), ("fw", &[4, 1])], 31);
        let x = seeded_uniform::<f64>(&[1, 2, 6, 6], 96);
        let summary = check_param_gradients(
            &mut store,
            |s, t| {
                let xi = t.input(x.clone());
                let cw = t.param(s, 0);
                let cb = t.param(s, 1);
                let fw = t.param(s, 2);
                let h = t.conv2d(xi, cw, cb, 3, 2, 1);
                let h = t.gap(h);
                let y = t.matmul(h, fw);
                t.mean(y)
            },
            150,
            7,
            1e-4,
        );
        assert!(summary.fraction_ok() >= 0.95, "{summary:?}");
    }

    #[test]
    fn dilated_conv_gradients_match_finite_differences() {
        let mut store = store_with(&[("cw", &[3, 2 * 9]), ("cb", &[3]), ("fw", &[3, 1])], 63);
        let x = seeded_uniform::<f64>(&[1, 2, 9, 9], 97);
        let summary = check_param_gradients(
            &mut store,
            |s, t| {
                let xi = t.input(x.clone());
                let cw = t.param(s, 0);
                let cb = t.param(s, 1);
                let fw = t.param(s, 2);
                let h = t.conv2d_dilated(xi, cw, cb, 3, 1, 2, 2);
                let h = t.relu(h);
                let h = t.gap(h);
                let y = t.matmul(h, fw);
                t.mean(y)
            },
            120,
            9,
            1e-4,
        );
        assert!(summary.fraction_ok() >= 0.95, "{summary:?}");
    }

    #[test]
    fn dilated_conv_matches_plain_conv_at_dilation_one() {
        let store = store_with(&[("cw", &[3, 2 * 9]), ("cb", &[3])], 64);
        let x = seeded_uniform::<f64>(&[1, 2, 6, 6], 98);
        let mut t1 = Tape::<f64>::new(&store);
        let xi = t1.input(x.clone());
        let cw = t1.param(&store, 0);
        let cb = t1.param(&store, 1);
        let a = t1.conv2d(xi, cw, cb, 3, 1, 1);
        let va = t1.value(a).clone();
        let mut t2 = Tape::<f64>::new(&store);
        let xi = t2.input(x.clone());
        let cw = t2.param(&store, 0);
        let cb = t2.param(&store, 1);
        let b = t2.conv2d_dilated(xi, cw, cb, 3, 1, 1, 1);
        let vb = t2.value(b).clone();
        assert_eq!(va, vb);
    }

    #[test]
    fn channel_norm_gradients_match_finite_differences() {
        let mut store = store_with(
            &[
                ("cw", &[3, 2 * 9]),
                ("cb", &[3]),
                ("g", &[3]),
                ("be", &[3]),
                ("fw", &[3, 1]),
            ],
            65,
        );
        let x = seeded_uniform::<f64>(&[1, 2, 5, 5], 99);
        let summary = check_param_gradients(
            &mut store,
            |s, t| {
                let xi = t.input(x.clone());
                let cw = t.param(s, 0);
                let cb = t.param(s, 1);
                let g = t.param(s, 2);
                let be = t.param(s, 3);
                let fw = t.param(s, 4);
                let h = t.conv2d(xi, cw, cb, 3, 1, 1);
                let h = t.chan_norm(h, g, be);
                let h = t.relu(h);
                let h = t.gap(h);
                let y = t.matmul(h, fw);
                t.mean(y)
            },
            120,
            11,
            1e-4,
        );
        assert!(summary.fraction_ok() >= 0.95, "{summary:?}");
    }

    #[test]
    fn channel_norm_normalizes_each_location() {
        let mut st = ParamStore::<f64>::new();
        st.add("g", ndarray::ArrayD::ones(ndarray::IxDyn(&[4])))
            .unwrap();
        st.add("be", ndarray::ArrayD::zeros(ndarray::IxDyn(&[4])))
            .unwrap();
        let x = seeded_uniform::<f64>(&[2, 4, 3, 3], 100);
        let mut t = Tape::<f64>::new(&st);
        let xi = t.input(x);
        let g = t.param(&st, 0);
        let be = t.param(&st, 1);
        let y = t.chan_norm(xi, g, be);
        let yv = t
            .value(y)
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        for n in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let mut mean = 0.0;
                    let mut var = 0.0;
                    for c in 0..4 {
                        mean += yv[(n, c, i, j)];
                    }
                    mean /= 4.0;
                    for c in 0..4 {
                        var += (yv[(n, c, i, j)] - mean).powi(2);
                    }
                    var /= 4.0;
                    assert!(mean.abs() < 1e-10, "mean {mean}");
                    assert!((var - 1.0).abs() < 1e-3, "var {var}");
                }
            }
        }
    }

    #[test]
    fn gather_concat_trig_gradients_match_finite_differences() {
        let mut store = store_with(&[("map", &[3, 5, 7]), ("w", &[9, 1])], 41);
        let coords = vec![[0.3, 1.7], [4.2, 0.1], [6.9, 3.9], [-2.0, 9.0], [2.0, 2.0]];
        let summary = check_param_gradients(
            &mut store,
            |s, t| {
                let map = t.param(s, 0);
                let w = t.param(s, 1);
                let loc = t.gather(map, &coords);
                let z = t.input(seeded_uniform::<f64>(&[5, 3], 95));
                let zs = t.sin(z);
                let zc = t.cos(z);
                let pe = t.concat(1, zs, zc);
                let pe = t.scale(pe, 0.5);
                let feat = t.concat(1, loc, pe);
                let y = t.matmul(feat, w);
                let y = t.sigmoid(y);
                t.mean(y)
            },
            120,
            8,
            1e-4,
        );
        assert!(summary.fraction_ok() >= 0.95, "{summary:?}");
    }

    #[test]
    fn mul_gate_gradient_matches_finite_differences() {
        let mut store = store_with(&[("a", &[6, 4]), ("g", &[6, 4])], 51);
        let summary = check_param_gradients(
            &mut store,
            |s, t| {
                let a = t.param(s, 0);
                let g = t.param(s, 1);
                let gate = t.sigmoid(g);
                let prod = t.mul(gate, a);
                let sq = t.mul(prod, prod);
                t.mean(sq)
            },
            120,
            9,
            1e-4,
        );
        assert!(summary.fraction_ok() >= 0.95, "{summary:?}");
    }

    #[test]
    fn gather_hits_cells_exactly_and_averages_midpoints() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let mut m = ndarray::Array3::<f64>::zeros((2, 3, 4));
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    m[(c, y, x)] = (c * 100 + y * 10 + x) as f64;
                }
            }
        }
        let map = tape.input(m.clone().into_dyn());
        let out = tape.gather(map, &[[2.0, 1.0], [1.5, 1.0], [100.0, -5.0]]);
        let v = tape.value(out);
        assert_eq!(v[[0, 0]], 12.0);
        assert_eq!(v[[0, 1]], 112.0);
        assert_eq!(v[[1, 0]], (11.0 + 12.0) / 2.0);
        // Out-of-range coordinates clamp to the border cell.
        assert_eq!(v[[2, 0]], 3.0);
        assert_eq!(v[[2, 1]], 103.0);
    }

    #[test]
    fn forward_passes_are_bit_deterministic() {
        let store = {
            let mut s = ParamStore::<f32>::new();
            s.add("w", he_weight::<f32>(16, 9, 9, 1)).unwrap();
            s.add("b", zeros1(16)).unwrap();
            s
        };
        let run = || {
            let mut tape = Tape::new(&store);
            let x = tape.input(seeded_uniform::<f32>(&[2, 1, 6, 6], 3));
            let w = tape.param(&store, 0);
            let b = tape.param(&store, 1);
            let h = tape.conv2d(x, w, b, 3, 1, 1);
            let h = tape.sigmoid(h);
            let m = tape.mean(h);
            tape.scalar(m).to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_matches_hand_computed_update() {
        let mut store = ParamStore::<f64>::new();
        store
            .add("p", Array1::from(vec![1.0f64]).into_dyn())
            .unwrap();
        let mut opt = Adam::new(0.1, 1);
        let g = 0.5f64;
        opt.step(&mut store, &[Some(Array1::from(vec![g]).into_dyn())]);
        // t=1: m=0.05, v=0.00025, mhat=0.5, vhat=0.25, step=0.1*0.5/(0.5+1e-8)
        let expect = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
        let got = store.value(0).as_slice().unwrap()[0];
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store
            .add("p", seeded_uniform::<f64>(&[8], 13))
            .unwrap();
        let mut opt = Adam::new(0.05, 1);
        let loss_of = |s: &ParamStore<f64>| -> f64 {
            s.value(0).iter().map(|v| (v - 0.3) * (v - 0.3)).sum()
        };
        let start = loss_of(&store);
        for _ in 0..400 {
            let g = store.value(0).mapv(|v| 2.0 * (v - 0.3));
            opt.step(&mut store, &[Some(g)]);
        }
        let end = loss_of(&store);
        assert!(end < 1e-6, "start {start} end {end}");
    }

    #[test]
    fn sum_grads_is_order_fixed_and_scale_works() {
        let a = vec![Some(Array1::from(vec![1.0f32, 2.0]).into_dyn()), None];
        let b = vec![Some(Array1::from(vec![0.5f32, 0.5]).into_dyn()), None];
        let mut acc = sum_grads(a, [b]);
        scale_grads(&mut acc, 0.5);
        let g = acc[0].as_ref().unwrap();
        assert_eq!(g.as_slice().unwrap(), &[0.75, 1.25]);
        assert!(acc[1].is_none());
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(seeded_uniform::<f64>(&[2, 3], 1));
        let b = tape.input(seeded_uniform::<f64>(&[2, 2], 2));
        let c = tape.concat(1, a, b);
        let m = tape.mean(c);
        let grads = tape.backward(m);
        let ga = grads.of(a).unwrap();
        let gb = grads.of(b).unwrap();
        assert_eq!(ga.shape(), &[2, 3]);
        assert_eq!(gb.shape(), &[2, 2]);
        for v in ga.iter().chain(gb.iter()) {
            assert!((v - 0.1).abs() < 1e-12);
        }
    }
}
