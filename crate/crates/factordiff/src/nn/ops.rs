//! Parameter-free ops: SiLU, 2x nearest upsampling, 2x average pooling and
//! the sinusoidal timestep embedding.

use ndarray::{Array1, Array4};

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// y = x * sigmoid(x), elementwise.
pub fn silu(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v * sigmoid(v))
}

/// dL/dx for y = silu(x); `x` is the forward input.
pub fn silu_backward(x: &Array4<f32>, dy: &Array4<f32>) -> Array4<f32> {
    let mut dx = Array4::zeros(x.raw_dim());
    ndarray::azip!((d in &mut dx, &xv in x, &dv in dy) {
        let s = sigmoid(xv);
        *d = dv * (s * (1.0 + xv * (1.0 - s)));
    });
    dx
}

/// Nearest-neighbor 2x spatial upsampling.
pub fn upsample2_nearest(x: &Array4<f32>) -> Array4<f32> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::zeros((b, c, h * 2, w * 2));
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let v = x[[bi, ci, hi, wi]];
                    y[[bi, ci, 2 * hi, 2 * wi]] = v;
                    y[[bi, ci, 2 * hi, 2 * wi + 1]] = v;
                    y[[bi, ci, 2 * hi + 1, 2 * wi]] = v;
                    y[[bi, ci, 2 * hi + 1, 2 * wi + 1]] = v;
                }
            }
        }
    }
    y
}

/// Backward of nearest 2x upsampling: sum the 2x2 fan-out.
pub fn upsample2_nearest_backward(dy: &Array4<f32>) -> Array4<f32> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    dx[[bi, ci, hi, wi]] = dy[[bi, ci, 2 * hi, 2 * wi]]
                        + dy[[bi, ci, 2 * hi, 2 * wi + 1]]
                        + dy[[bi, ci, 2 * hi + 1, 2 * wi]]
                        + dy[[bi, ci, 2 * hi + 1, 2 * wi + 1]];
                }
            }
        }
    }
    dx
}

/// 2x2 average pooling with stride 2 (spatial dims must be even).
pub fn avg_pool2(x: &Array4<f32>) -> Array4<f32> {
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
    let mut y = Array4::zeros((b, c, h / 2, w / 2));
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h / 2 {
                for wi in 0..w / 2 {
                    y[[bi, ci, hi, wi]] = 0.25
                        * (x[[bi, ci, 2 * hi, 2 * wi]]
                            + x[[bi, ci, 2 * hi, 2 * wi + 1]]
                            + x[[bi, ci, 2 * hi + 1, 2 * wi]]
                            + x[[bi, ci, 2 * hi + 1, 2 * wi + 1]]);
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward(dy: &Array4<f32>) -> Array4<f32> {
    let (b, c, h, w) = dy.dim();
    let mut dx = Array4::zeros((b, c, h * 2, w * 2));
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let v = 0.25 * dy[[bi, ci, hi, wi]];
                    dx[[bi, ci, 2 * hi, 2 * wi]] = v;
                    dx[[bi, ci, 2 * hi, 2 * wi + 1]] = v;
                    dx[[bi, ci, 2 * hi + 1, 2 * wi]] = v;
                    dx[[bi, ci, 2 * hi + 1, 2 * wi + 1]] = v;
                }
            }
        }
    }
    dx
}

/// Sinusoidal timestep embedding of even dimension `dim`: the first half is
/// sin at geometrically spaced frequencies (periods 2*pi .. 2*pi*10000), the
/// second half cos.
pub fn time_embedding(t: f64, dim: usize) -> Array1<f32> {
    assert!(dim >= 2 && dim % 2 == 0, "time embedding dim must be even");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
        let freq = (-(10000.0f64).ln() * i as f64 / denom).exp();
        out[i] = (t * freq).sin() as f32;
        out[half + i] = (t * freq).cos() as f32;
    }
    out
}
