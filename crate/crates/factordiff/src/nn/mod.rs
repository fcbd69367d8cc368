//! Minimal neural-network layer library: explicit forward/backward passes
//! over ndarray tensors, a flat named-parameter arena, and an Adam step.
//!
//! Everything is f32, single threaded and allocation-order deterministic, so
//! a training run is a pure function of (config, seed). Layers own no
//! buffers; activations needed by a backward pass are passed back in by the
//! caller, which keeps inference `&self`-only and cache lifetimes explicit.

mod attn;
mod conv;
mod linear;
mod norm;
mod ops;

pub use attn::{AttnCache, SelfAttention2d};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{GnCache, GroupNorm};
pub use ops::{
    avg_pool2, avg_pool2_backward, silu, silu_backward, time_embedding, upsample2_nearest,
    upsample2_nearest_backward,
};

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, IxDyn};
use rand::Rng;

/// Handle to one named parameter tensor in a [`ParamArena`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PId(usize);

/// Weight initialization for a freshly allocated parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanIn(usize),
    /// FanIn shrunk by a factor; keeps a branch near-silent at start
    /// without zeroing its gradients.
    ScaledFanIn(usize, f32),
    Zero,
    One,
}

/// Flat store of named parameters with their gradients and Adam moments.
///
/// The arena order is the declaration order of the network, which also
/// defines the checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamArena {
    names: Vec<String>,
    w: Vec<ArrayD<f32>>,
    g: Vec<ArrayD<f32>>,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
    adam_t: u64,
}

impl ParamArena {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut impl Rng) -> PId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        let dim = IxDyn(shape);
        let w = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                ArrayD::from_shape_simple_fn(dim.clone(), || rng.gen_range(-bound..bound))
            }
            Init::ScaledFanIn(fan_in, scale) => {
                let bound = scale / (fan_in as f32).sqrt();
                ArrayD::from_shape_simple_fn(dim.clone(), || rng.gen_range(-bound..bound))
            }
            Init::Zero => ArrayD::zeros(dim.clone()),
            Init::One => ArrayD::ones(dim.clone()),
        };
        self.names.push(name.to_string());
        self.g.push(ArrayD::zeros(w.raw_dim()));
        self.m.push(ArrayD::zeros(w.raw_dim()));
        self.v.push(ArrayD::zeros(w.raw_dim()));
        self.w.push(w);
        PId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.w.iter().map(|w| w.len()).sum()
    }

    pub fn name(&self, id: PId) -> &str {
        &self.names[id.0]
    }

    /// Handles for all parameters in declaration order.
    pub fn ids(&self) -> impl Iterator<Item = PId> + '_ {
        (0..self.names.len()).map(PId)
    }

    pub fn w(&self, id: PId) -> ArrayViewD<'_, f32> {
        self.w[id.0].view()
    }

    pub fn w_mut(&mut self, id: PId) -> ArrayViewMutD<'_, f32> {
        self.w[id.0].view_mut()
    }

    pub fn g(&self, id: PId) -> ArrayViewD<'_, f32> {
        self.g[id.0].view()
    }

    pub fn g_mut(&mut self, id: PId) -> ArrayViewMutD<'_, f32> {
        self.g[id.0].view_mut()
    }

    /// Contiguous slices for gemm kernels.
    pub fn w_slice(&self, id: PId) -> &[f32] {
        self.w[id.0].as_slice().expect("arena tensors are contiguous")
    }

    pub fn g_slice_mut(&mut self, id: PId) -> &mut [f32] {
        self.g[id.0].as_slice_mut().expect("arena tensors are contiguous")
    }

    pub fn shape(&self, id: PId) -> &[usize] {
        self.w[id.0].shape()
    }

    /// Iterate (name, weights) in declaration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.w.iter())
    }

    /// Replace the weights of `name`; shape must match. Used by checkpoint
    /// loading.
    pub fn set_by_name(&mut self, name: &str, values: &[f32]) -> Result<(), String> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| format!("unknown parameter '{name}'"))?;
        if self.w[idx].len() != values.len() {
            return Err(format!(
                "parameter '{name}' length {} does not match stored {}",
                self.w[idx].len(),
                values.len()
            ));
        }
        self.w[idx]
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(values);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.g {
            g.fill(0.0);
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut sq = 0.0f64;
        for g in &self.g {
            for &x in g.iter() {
                sq += (x as f64) * (x as f64);
            }
        }
        sq.sqrt()
    }

    /// Scale all gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = (max_norm / norm) as f32;
            for g in &mut self.g {
                g.mapv_inplace(|x| x * scale);
            }
        }
        norm
    }

    /// One Adam update (beta1=0.9, beta2=0.999, eps=1e-8) over all
    /// parameters from the accumulated gradients.
    pub fn adam_step(&mut self, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.adam_t += 1;
        let bc1 = 1.0 - B1.powi(self.adam_t as i32);
        let bc2 = 1.0 - B2.powi(self.adam_t as i32);
        for i in 0..self.w.len() {
            let (w, g, m, v) = (
                self.w[i].as_slice_mut().unwrap(),
                self.g[i].as_slice().unwrap(),
                self.m[i].as_slice_mut().unwrap(),
                self.v[i].as_slice_mut().unwrap(),
            );
            for j in 0..w.len() {
                let gj = g[j] as f64;
                let mj = B1 * m[j] as f64 + (1.0 - B1) * gj;
                let vj = B2 * v[j] as f64 + (1.0 - B2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = (mj / bc1) / ((vj / bc2).sqrt() + EPS);
                w[j] -= (lr * update) as f32;
            }
        }
    }

    /// Number of Adam steps taken so far.
    pub fn adam_t(&self) -> u64 {
        self.adam_t
    }
}

/// y[M,N] += or = alpha * a[M,K] @ b[K,N] for contiguous row-major slices.
pub(crate) fn sgemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Like [`sgemm_rowmajor`] but with `a` used transposed: c = alpha * a^T @ b.
/// `a` is [K,M] row-major.
pub(crate) fn sgemm_at_b(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c = alpha * a @ b^T; `b` is [N,K] row-major.
pub(crate) fn sgemm_a_bt(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use ndarray::{Array4, ArrayD};
    use rand::Rng;
    use rand_chacha::ChaCha12Rng;

    pub fn rand4(shape: (usize, usize, usize, usize), rng: &mut ChaCha12Rng) -> Array4<f32> {
        Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0f32..1.0))
    }

    /// Weighted-sum loss used by finite-difference checks: L = sum(y * r)
    /// accumulated in f64.
    pub fn dot_loss(y: &ArrayD<f32>, r: &ArrayD<f32>) -> f64 {
        y.iter().zip(r.iter()).map(|(&a, &b)| a as f64 * b as f64).sum()
    }

    /// Central finite difference of `f` w.r.t. arena parameter `id` at flat
    /// index `j`.
    pub fn fd_param(
        arena: &mut ParamArena,
        id: PId,
        j: usize,
        h: f32,
        mut f: impl FnMut(&ParamArena) -> f64,
    ) -> f64 {
        let orig = arena.w[id.0].as_slice().unwrap()[j];
        arena.w[id.0].as_slice_mut().unwrap()[j] = orig + h;
        let lp = f(arena);
        arena.w[id.0].as_slice_mut().unwrap()[j] = orig - h;
        let lm = f(arena);
        arena.w[id.0].as_slice_mut().unwrap()[j] = orig;
        (lp - lm) / (2.0 * h as f64)
    }

    /// Relative error suited to FD comparisons.
    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn arena_roundtrip_and_names() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut a = ParamArena::new();
        let w1 = a.alloc("enc.conv.w", &[4, 3, 3, 3], Init::FanIn(27), &mut rng);
        let b1 = a.alloc("enc.conv.b", &[4], Init::Zero, &mut rng);
        assert_eq!(a.name(w1), "enc.conv.w");
        assert_eq!(a.shape(w1), &[4, 3, 3, 3]);
        assert!(a.w(b1).iter().all(|&x| x == 0.0));
        assert_eq!(a.num_scalars(), 4 * 27 + 4);

        let vals: Vec<f32> = (0..4).map(|i| i as f32).collect();
        a.set_by_name("enc.conv.b", &vals).unwrap();
        assert_eq!(a.w(b1).as_slice().unwrap(), &vals[..]);
        assert!(a.set_by_name("nope", &vals).is_err());
        assert!(a.set_by_name("enc.conv.b", &vals[..2]).is_err());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut a = ParamArena::new();
        a.alloc("w", &[2], Init::Zero, &mut rng);
        a.alloc("w", &[2], Init::Zero, &mut rng);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut a = ParamArena::new();
        let id = a.alloc("w", &[4], Init::Zero, &mut rng);
        a.g_mut(id).as_slice_mut().unwrap().copy_from_slice(&[3.0, 0.0, 4.0, 0.0]);
        let pre = a.clip_grad_norm(1.0);
        assert!((pre - 5.0).abs() < 1e-6);
        assert!((a.grad_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Minimize (w - 3)^2 elementwise; Adam should get close quickly.
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut a = ParamArena::new();
        let id = a.alloc("w", &[8], Init::Zero, &mut rng);
        for _ in 0..4000 {
            let w: Vec<f32> = a.w(id).iter().copied().collect();
            {
                let mut g = a.g_mut(id);
                let gs = g.as_slice_mut().unwrap();
                for (gj, wj) in gs.iter_mut().zip(&w) {
                    *gj = 2.0 * (wj - 3.0);
                }
            }
            a.adam_step(0.01);
        }
        for &w in a.w(id).iter() {
            assert!((w - 3.0).abs() < 1e-2, "w = {w}");
        }
    }

    #[test]
    fn sgemm_variants_match_naive() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let (m, k, n) = (5, 7, 4);
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut want = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    want[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0f32; m * n];
        sgemm_rowmajor(m, k, n, 1.0, &a, &b, 0.0, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }

        // a^T variant: store a as [K,M]
        let mut at = vec![0.0f32; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0f32; m * n];
        sgemm_at_b(m, k, n, 1.0, &at, &b, 0.0, &mut c2);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }

        // b^T variant: store b as [N,K]
        let mut bt = vec![0.0f32; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c3 = vec![0.0f32; m * n];
        sgemm_a_bt(m, k, n, 1.0, &a, &bt, 0.0, &mut c3);
        for (x, y) in c3.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
