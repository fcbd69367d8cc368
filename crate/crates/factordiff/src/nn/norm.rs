//! Group normalization.

use ndarray::{Array2, Array4};
use rand::Rng;

use super::{Init, PId, ParamArena};

const EPS: f64 = 1e-5;

/// GroupNorm over [B,C,H,W] with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: PId,
    pub beta: PId,
    channels: usize,
    groups: usize,
}

/// Per (batch, group) statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GnCache {
    mean: Array2<f64>,
    rstd: Array2<f64>,
}

impl GroupNorm {
    pub fn new(
        arena: &mut ParamArena,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        let groups = preferred_groups(channels);
        let gamma = arena.alloc(&format!("{name}.g"), &[channels], Init::One, rng);
        let beta = arena.alloc(&format!("{name}.b"), &[channels], Init::Zero, rng);
        GroupNorm { gamma, beta, channels, groups }
    }

    pub fn forward(&self, arena: &ParamArena, x: &Array4<f32>) -> (Array4<f32>, GnCache) {
        let (bs, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "groupnorm channels");
        let cpg = c / self.groups;
        let m = (cpg * h * w) as f64;
        let gamma = arena.w_slice(self.gamma);
        let beta = arena.w_slice(self.beta);

        let mut mean = Array2::zeros((bs, self.groups));
        let mut rstd = Array2::zeros((bs, self.groups));
        let mut y = Array4::zeros(x.raw_dim());
        let xs = x.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();
        let hw = h * w;

        for b in 0..bs {
            for g in 0..self.groups {
                let base = (b * c + g * cpg) * hw;
                let seg = &xs[base..base + cpg * hw];
                let mut sum = 0.0f64;
                let mut sumsq = 0.0f64;
                for &v in seg {
                    sum += v as f64;
                    sumsq += (v as f64) * (v as f64);
                }
                let mu = sum / m;
                let var = (sumsq / m - mu * mu).max(0.0);
                let rs = 1.0 / (var + EPS).sqrt();
                mean[[b, g]] = mu;
                rstd[[b, g]] = rs;
                for ci in 0..cpg {
                    let ch = g * cpg + ci;
                    let (ga, be) = (gamma[ch] as f64, beta[ch] as f64);
                    let src = &seg[ci * hw..(ci + 1) * hw];
                    let dst = &mut ys[base + ci * hw..base + (ci + 1) * hw];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = (ga * (s as f64 - mu) * rs + be) as f32;
                    }
                }
            }
        }
        (y, GnCache { mean, rstd })
    }

    pub fn backward(
        &self,
        arena: &mut ParamArena,
        x: &Array4<f32>,
        cache: &GnCache,
        dy: &Array4<f32>,
    ) -> Array4<f32> {
        let (bs, c, h, w) = x.dim();
        let cpg = c / self.groups;
        let hw = h * w;
        let m = (cpg * hw) as f64;

        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        let mut dx = Array4::zeros(x.raw_dim());
        {
            let gamma = arena.w_slice(self.gamma).to_vec();
            let xs = x.as_slice().unwrap();
            let dys = dy.as_slice().unwrap();
            let dxs = dx.as_slice_mut().unwrap();

            for b in 0..bs {
                for g in 0..self.groups {
                    let base = (b * c + g * cpg) * hw;
                    let mu = cache.mean[[b, g]];
                    let rs = cache.rstd[[b, g]];
                    // group sums of dxhat and dxhat * xhat
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for ci in 0..cpg {
                        let ch = g * cpg + ci;
                        let ga = gamma[ch] as f64;
                        let xseg = &xs[base + ci * hw..base + (ci + 1) * hw];
                        let dyseg = &dys[base + ci * hw..base + (ci + 1) * hw];
                        for (&xv, &dv) in xseg.iter().zip(dyseg) {
                            let xhat = (xv as f64 - mu) * rs;
                            let dxhat = dv as f64 * ga;
                            s1 += dxhat;
                            s2 += dxhat * xhat;
                            dgamma[ch] += dv as f64 * xhat;
                            dbeta[ch] += dv as f64;
                        }
                    }
                    for ci in 0..cpg {
                        let ch = g * cpg + ci;
                        let ga = gamma[ch] as f64;
                        let xseg = &xs[base + ci * hw..base + (ci + 1) * hw];
                        let dyseg = &dys[base + ci * hw..base + (ci + 1) * hw];
                        let dxseg = &mut dxs[base + ci * hw..base + (ci + 1) * hw];
                        for ((&xv, &dv), dxv) in xseg.iter().zip(dyseg).zip(dxseg.iter_mut()) {
                            let xhat = (xv as f64 - mu) * rs;
                            let dxhat = dv as f64 * ga;
                            *dxv = (rs * (dxhat - (s1 + xhat * s2) / m)) as f32;
                        }
                    }
                }
            }
        }
        {
            let mut gg = arena.g_mut(self.gamma);
            for (g, d) in gg.as_slice_mut().unwrap().iter_mut().zip(&dgamma) {
                *g += *d as f32;
            }
        }
        {
            let mut gb = arena.g_mut(self.beta);
            for (g, d) in gb.as_slice_mut().unwrap().iter_mut().zip(&dbeta) {
                *g += *d as f32;
            }
        }
        dx
    }
}

/// 8 groups when divisible, otherwise the largest divisor of `channels`
/// not exceeding 8 (falls back to LayerNorm-per-channel style grouping).
fn preferred_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{dot_loss, fd_param, rand4, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn normalizes_groups_to_unit_stats() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut arena = ParamArena::new();
        let gn = GroupNorm::new(&mut arena, &mut rng, "n", 8);
        let x = rand4((2, 8, 5, 5), &mut rng);
        let (y, _) = gn.forward(&arena, &x);
        // gamma=1, beta=0 at init: each (b, group) slab has mean 0, var 1
        let cpg = 8 / preferred_groups(8);
        for b in 0..2 {
            for g in 0..preferred_groups(8) {
                let mut vals = vec![];
                for ci in 0..cpg {
                    for h in 0..5 {
                        for w in 0..5 {
                            vals.push(y[[b, g * cpg + ci, h, w]] as f64);
                        }
                    }
                }
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                assert!(m.abs() < 1e-5, "mean {m}");
                assert!((v - 1.0).abs() < 1e-3, "var {v}");
            }
        }
    }

    #[test]
    fn preferred_groups_divides() {
        for c in 1..=64 {
            let g = preferred_groups(c);
            assert_eq!(c % g, 0);
            assert!(g <= 8);
        }
        assert_eq!(preferred_groups(16), 8);
        assert_eq!(preferred_groups(12), 6);
        assert_eq!(preferred_groups(7), 7);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut arena = ParamArena::new();
        let gn = GroupNorm::new(&mut arena, &mut rng, "n", 6);
        // non-trivial affine params
        let ga: Vec<f32> = (0..6).map(|_| rng.gen_range(0.5..1.5)).collect();
        let be: Vec<f32> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
        arena.set_by_name("n.g", &ga).unwrap();
        arena.set_by_name("n.b", &be).unwrap();

        let x = rand4((2, 6, 4, 4), &mut rng);
        let r = ndarray::ArrayD::from_shape_simple_fn(
            ndarray::IxDyn(&[2, 6, 4, 4]),
            || rng.gen_range(-1.0f32..1.0),
        );
        let (_, cache) = gn.forward(&arena, &x);
        let dy = r.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
        arena.zero_grads();
        let dx = gn.backward(&mut arena, &x, &cache, &dy);

        for id in [gn.gamma, gn.beta] {
            for j in 0..6 {
                let analytic = arena.g(id).as_slice().unwrap()[j] as f64;
                let fd = fd_param(&mut arena, id, j, 1e-2, |a| {
                    dot_loss(&gn.forward(a, &x).0.into_dyn(), &r)
                });
                assert!(rel_err(analytic, fd) < 1e-2, "{analytic} vs {fd}");
            }
        }
        for flat in [0usize, 17, 93, 150] {
            let analytic = dx.as_slice().unwrap()[flat] as f64;
            let mut xp = x.clone();
            let h = 1e-2f32;
            xp.as_slice_mut().unwrap()[flat] += h;
            let lp = dot_loss(&gn.forward(&arena, &xp).0.into_dyn(), &r);
            xp.as_slice_mut().unwrap()[flat] -= 2.0 * h;
            let lm = dot_loss(&gn.forward(&arena, &xp).0.into_dyn(), &r);
            let fd = (lp - lm) / (2.0 * h as f64);
            assert!(rel_err(analytic, fd) < 1e-2, "dx {analytic} vs {fd}");
        }
    }
}
