//! Single-head self-attention over spatial positions, with pre-norm and a
//! residual connection (the zero-initialized output projection makes the
//! block an identity map at init).

use ndarray::{Array2, Array3, Array4};
use rand::Rng;

use super::{
    norm::GnCache, sgemm_a_bt, sgemm_at_b, sgemm_rowmajor, GroupNorm, Init, Linear, ParamArena,
};

#[derive(Debug, Clone)]
pub struct SelfAttention2d {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    channels: usize,
}

pub struct AttnCache {
    gn: GnCache,
    tokens: Array3<f32>, // [B, N, C] normed input in token layout
    q: Array3<f32>,
    k: Array3<f32>,
    v: Array3<f32>,
    a: Array3<f32>, // [B, N, N] softmax rows
    o: Array3<f32>, // [B, N, C] attention output before the final projection
}

impl SelfAttention2d {
    pub fn new(
        arena: &mut ParamArena,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        let norm = GroupNorm::new(arena, rng, &format!("{name}.norm"), channels);
        let q = Linear::new(arena, rng, &format!("{name}.q"), channels, channels);
        let k = Linear::new(arena, rng, &format!("{name}.k"), channels, channels);
        let v = Linear::new(arena, rng, &format!("{name}.v"), channels, channels);
        let o = Linear::with_init(
            arena,
            rng,
            &format!("{name}.o"),
            channels,
            channels,
            Init::Zero,
        );
        SelfAttention2d { norm, q, k, v, o, channels }
    }

    fn to_tokens(x: &Array4<f32>, b: usize) -> Array2<f32> {
        let (_, c, h, w) = x.dim();
        let n = h * w;
        let mut t = Array2::zeros((n, c));
        let xs = x.as_slice().unwrap();
        let base = b * c * n;
        for ci in 0..c {
            let src = &xs[base + ci * n..base + (ci + 1) * n];
            for (i, &v) in src.iter().enumerate() {
                t[[i, ci]] = v;
            }
        }
        t
    }

    fn add_from_tokens(t: &Array2<f32>, b: usize, out: &mut Array4<f32>) {
        let (_, c, h, w) = out.dim();
        let n = h * w;
        let os = out.as_slice_mut().unwrap();
        let base = b * c * n;
        for ci in 0..c {
            let dst = &mut os[base + ci * n..base + (ci + 1) * n];
            for (i, d) in dst.iter_mut().enumerate() {
                *d += t[[i, ci]];
            }
        }
    }

    pub fn forward(&self, arena: &ParamArena, x: &Array4<f32>) -> (Array4<f32>, AttnCache) {
        let (bs, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let n = h * w;
        let scale = 1.0 / (c as f32).sqrt();

        let (xn, gn) = self.norm.forward(arena, x);
        let mut tokens = Array3::zeros((bs, n, c));
        let mut qa = Array3::zeros((bs, n, c));
        let mut ka = Array3::zeros((bs, n, c));
        let mut va = Array3::zeros((bs, n, c));
        let mut aa = Array3::zeros((bs, n, n));
        let mut oa = Array3::zeros((bs, n, c));
        let mut y = x.clone();

        for b in 0..bs {
            let t = Self::to_tokens(&xn, b);
            let q = self.q.forward(arena, &t);
            let k = self.k.forward(arena, &t);
            let v = self.v.forward(arena, &t);

            let mut s = Array2::zeros((n, n));
            sgemm_a_bt(
                n,
                c,
                n,
                scale,
                q.as_slice().unwrap(),
                k.as_slice().unwrap(),
                0.0,
                s.as_slice_mut().unwrap(),
            );
            // row softmax
            for mut row in s.rows_mut() {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f64;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v as f64;
                }
                let inv = (1.0 / sum) as f32;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
            let mut o = Array2::zeros((n, c));
            sgemm_rowmajor(
                n,
                n,
                c,
                1.0,
                s.as_slice().unwrap(),
                v.as_slice().unwrap(),
                0.0,
                o.as_slice_mut().unwrap(),
            );
            let proj = self.o.forward(arena, &o);
            Self::add_from_tokens(&proj, b, &mut y);

            tokens.index_axis_mut(ndarray::Axis(0), b).assign(&t);
            qa.index_axis_mut(ndarray::Axis(0), b).assign(&q);
            ka.index_axis_mut(ndarray::Axis(0), b).assign(&k);
            va.index_axis_mut(ndarray::Axis(0), b).assign(&v);
            aa.index_axis_mut(ndarray::Axis(0), b).assign(&s);
            oa.index_axis_mut(ndarray::Axis(0), b).assign(&o);
        }
        (
            y,
            AttnCache { gn, tokens, q: qa, k: ka, v: va, a: aa, o: oa },
        )
    }

    pub fn backward(
        &self,
        arena: &mut ParamArena,
        x: &Array4<f32>,
        cache: &AttnCache,
        dy: &Array4<f32>,
    ) -> Array4<f32> {
        let (bs, c, h, w) = x.dim();
        let n = h * w;
        let scale = 1.0 / (c as f32).sqrt();

        let mut dxn = Array4::zeros(x.raw_dim());
        for b in 0..bs {
            // gradient flowing into the projection output, in token layout
            let mut dproj = Array2::zeros((n, c));
            {
                let dys = dy.as_slice().unwrap();
                let base = b * c * n;
                for ci in 0..c {
                    let src = &dys[base + ci * n..base + (ci + 1) * n];
                    for (i, &v) in src.iter().enumerate() {
                        dproj[[i, ci]] = v;
                    }
                }
            }
            let o_b = cache.o.index_axis(ndarray::Axis(0), b).to_owned();
            let do_ = self.o.backward(arena, &o_b, &dproj);

            let a_b = cache.a.index_axis(ndarray::Axis(0), b);
            let v_b = cache.v.index_axis(ndarray::Axis(0), b);
            let q_b = cache.q.index_axis(ndarray::Axis(0), b);
            let k_b = cache.k.index_axis(ndarray::Axis(0), b);

            // dA = do @ v^T ; dv = A^T @ do
            let mut da = Array2::zeros((n, n));
            sgemm_a_bt(
                n,
                c,
                n,
                1.0,
                do_.as_slice().unwrap(),
                v_b.as_slice().unwrap(),
                0.0,
                da.as_slice_mut().unwrap(),
            );
            let mut dv = Array2::zeros((n, c));
            sgemm_at_b(
                n,
                n,
                c,
                1.0,
                a_b.as_slice().unwrap(),
                do_.as_slice().unwrap(),
                0.0,
                dv.as_slice_mut().unwrap(),
            );
            // softmax backward: dS = A * (dA - rowsum(dA * A))
            let mut ds = Array2::zeros((n, n));
            for i in 0..n {
                let mut dot = 0.0f64;
                for j in 0..n {
                    dot += (da[[i, j]] * a_b[[i, j]]) as f64;
                }
                let dot = dot as f32;
                for j in 0..n {
                    ds[[i, j]] = a_b[[i, j]] * (da[[i, j]] - dot);
                }
            }
            // dq = scale * dS @ k ; dk = scale * dS^T @ q
            let mut dq = Array2::zeros((n, c));
            sgemm_rowmajor(
                n,
                n,
                c,
                scale,
                ds.as_slice().unwrap(),
                k_b.as_slice().unwrap(),
                0.0,
                dq.as_slice_mut().unwrap(),
            );
            let mut dk = Array2::zeros((n, c));
            sgemm_at_b(
                n,
                n,
                c,
                scale,
                ds.as_slice().unwrap(),
                q_b.as_slice().unwrap(),
                0.0,
                dk.as_slice_mut().unwrap(),
            );

            let t_b = cache.tokens.index_axis(ndarray::Axis(0), b).to_owned();
            let mut dt = self.q.backward(arena, &t_b, &dq);
            dt += &self.k.backward(arena, &t_b, &dk);
            dt += &self.v.backward(arena, &t_b, &dv);

            let dxns = dxn.as_slice_mut().unwrap();
            let base = b * c * n;
            for ci in 0..c {
                let dst = &mut dxns[base + ci * n..base + (ci + 1) * n];
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += dt[[i, ci]];
                }
            }
        }
        let mut dx = self.norm.backward(arena, x, &cache.gn, &dxn);
        dx += dy; // residual branch
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{dot_loss, fd_param, rand4, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn identity_at_init() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut arena = ParamArena::new();
        let attn = SelfAttention2d::new(&mut arena, &mut rng, "a", 4);
        let x = rand4((2, 4, 3, 3), &mut rng);
        let (y, _) = attn.forward(&arena, &x);
        for (a, b) in y.iter().zip(x.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut arena = ParamArena::new();
        let attn = SelfAttention2d::new(&mut arena, &mut rng, "a", 4);
        let x = rand4((1, 4, 3, 3), &mut rng);
        let (_, cache) = attn.forward(&arena, &x);
        for row in cache.a.index_axis(ndarray::Axis(0), 0).rows() {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut arena = ParamArena::new();
        let attn = SelfAttention2d::new(&mut arena, &mut rng, "a", 4);
        // break the zero init so the whole block participates
        let wo: Vec<f32> = (0..16).map(|_| rng.gen_range(-0.4..0.4)).collect();
        arena.set_by_name("a.o.w", &wo).unwrap();

        let x = rand4((2, 4, 3, 3), &mut rng);
        let r = ndarray::ArrayD::from_shape_simple_fn(
            ndarray::IxDyn(&[2, 4, 3, 3]),
            || rng.gen_range(-1.0f32..1.0),
        );
        let (_, cache) = attn.forward(&arena, &x);
        let dy = r.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
        arena.zero_grads();
        let dx = attn.backward(&mut arena, &x, &cache, &dy);

        // spot-check one grad per parameter tensor
        for pid in 0..arena.len() {
            let id = crate::nn::PId(pid);
            let len = arena.w(id).len();
            let j = len / 2;
            let analytic = arena.g(id).as_slice().unwrap()[j] as f64;
            let fd = fd_param(&mut arena, id, j, 5e-3, |a| {
                dot_loss(&attn.forward(a, &x).0.into_dyn(), &r)
            });
            assert!(
                rel_err(analytic, fd) < 2e-2,
                "param {} grad mismatch: {analytic} vs {fd}",
                arena.name(id)
            );
        }
        for flat in [0usize, 31, 57] {
            let analytic = dx.as_slice().unwrap()[flat] as f64;
            let mut xp = x.clone();
            let h = 5e-3f32;
            xp.as_slice_mut().unwrap()[flat] += h;
            let lp = dot_loss(&attn.forward(&arena, &xp).0.into_dyn(), &r);
            xp.as_slice_mut().unwrap()[flat] -= 2.0 * h;
            let lm = dot_loss(&attn.forward(&arena, &xp).0.into_dyn(), &r);
            let fd = (lp - lm) / (2.0 * h as f64);
            assert!(rel_err(analytic, fd) < 2e-2, "dx {analytic} vs {fd}");
        }
    }
}
