//! 2-D convolution via im2col + sgemm.

use ndarray::Array4;
use rand::Rng;

use super::{sgemm_a_bt, sgemm_at_b, sgemm_rowmajor, Init, PId, ParamArena};

/// Convolution with square kernel, symmetric zero padding and uniform
/// stride. Weight layout [out, in, k, k], bias [out].
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: PId,
    pub b: PId,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        arena: &mut ParamArena,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self::with_init(arena, rng, name, cin, cout, k, stride, pad, Init::FanIn(cin * k * k))
    }

    /// Variant with explicit weight init (zero init is used for the last
    /// conv of residual blocks and output heads).
    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        arena: &mut ParamArena,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Self {
        let w = arena.alloc(&format!("{name}.w"), &[cout, cin, k, k], init, rng);
        let b = arena.alloc(&format!("{name}.b"), &[cout], Init::Zero, rng);
        Conv2d { w, b, cin, cout, k, stride, pad }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array4<f32>, b: usize, ho: usize, wo: usize, cols: &mut [f32]) {
        let (_, _, h, w) = x.dim();
        let n = ho * wo;
        let xs = x.as_slice().expect("contiguous");
        let x_base = b * self.cin * h * w;
        for cin in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (cin * self.k + ki) * self.k + kj;
                    let row = &mut cols[r * n..(r + 1) * n];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        let seg = &mut row[oi * wo..(oi + 1) * wo];
                        if ii < 0 || ii >= h as isize {
                            seg.fill(0.0);
                            continue;
                        }
                        let xrow = &xs[x_base + (cin * h + ii as usize) * w..];
                        if self.stride == 1 {
                            // contiguous window; handle the zero-padded ends
                            for (oj, s) in seg.iter_mut().enumerate() {
                                let jj = (oj + kj) as isize - self.pad as isize;
                                *s = if jj < 0 || jj >= w as isize {
                                    0.0
                                } else {
                                    xrow[jj as usize]
                                };
                            }
                        } else {
                            for (oj, s) in seg.iter_mut().enumerate() {
                                let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                                *s = if jj < 0 || jj >= w as isize {
                                    0.0
                                } else {
                                    xrow[jj as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f32], b: usize, ho: usize, wo: usize, dx: &mut Array4<f32>) {
        let (_, _, h, w) = dx.dim();
        let n = ho * wo;
        let dxs = dx.as_slice_mut().expect("contiguous");
        let x_base = b * self.cin * h * w;
        for cin in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (cin * self.k + ki) * self.k + kj;
                    let row = &cols[r * n..(r + 1) * n];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let drow = &mut dxs[x_base + (cin * h + ii as usize) * w..][..w];
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < w as isize {
                                drow[jj as usize] += row[oi * wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, arena: &ParamArena, x: &Array4<f32>) -> Array4<f32> {
        let (bs, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "conv input channels");
        let (ho, wo) = self.out_spatial(h, w);
        let n = ho * wo;
        let kdim = self.cin * self.k * self.k;
        let mut y = Array4::zeros((bs, self.cout, ho, wo));
        let mut cols = vec![0.0f32; kdim * n];
        let wslice = arena.w_slice(self.w);
        let bias = arena.w_slice(self.b).to_vec();
        {
            let ys = y.as_slice_mut().unwrap();
            for b in 0..bs {
                self.im2col(x, b, ho, wo, &mut cols);
                let yb = &mut ys[b * self.cout * n..(b + 1) * self.cout * n];
                sgemm_rowmajor(self.cout, kdim, n, 1.0, wslice, &cols, 0.0, yb);
                for co in 0..self.cout {
                    let bv = bias[co];
                    for v in &mut yb[co * n..(co + 1) * n] {
                        *v += bv;
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into the arena and returns dL/dx.
    /// `x` must be the tensor passed to the matching `forward`.
    pub fn backward(
        &self,
        arena: &mut ParamArena,
        x: &Array4<f32>,
        dy: &Array4<f32>,
    ) -> Array4<f32> {
        let (bs, _, h, w) = x.dim();
        let (ho, wo) = self.out_spatial(h, w);
        let n = ho * wo;
        let kdim = self.cin * self.k * self.k;
        assert_eq!(dy.dim(), (bs, self.cout, ho, wo), "conv dy shape");

        let mut dx = Array4::zeros(x.raw_dim());
        let mut cols = vec![0.0f32; kdim * n];
        let mut dcols = vec![0.0f32; kdim * n];
        let dys = dy.as_slice().unwrap();

        // bias grad
        {
            let mut db = vec![0.0f64; self.cout];
            for b in 0..bs {
                for co in 0..self.cout {
                    let seg = &dys[(b * self.cout + co) * n..][..n];
                    db[co] += seg.iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            let mut gb = arena.g_mut(self.b);
            let gbs = gb.as_slice_mut().unwrap();
            for (g, d) in gbs.iter_mut().zip(&db) {
                *g += *d as f32;
            }
        }

        for b in 0..bs {
            self.im2col(x, b, ho, wo, &mut cols);
            let dyb = &dys[b * self.cout * n..(b + 1) * self.cout * n];
            // dW += dy_b @ cols^T
            {
                let gw = arena.g_slice_mut(self.w);
                sgemm_a_bt(self.cout, n, kdim, 1.0, dyb, &cols, 1.0, gw);
            }
            // dcols = W^T @ dy_b
            {
                let wslice = arena.w_slice(self.w);
                sgemm_at_b(kdim, self.cout, n, 1.0, wslice, dyb, 0.0, &mut dcols);
            }
            self.col2im_add(&dcols, b, ho, wo, &mut dx);
        }
        dx
    }
}
