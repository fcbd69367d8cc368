//! Fully connected layer.

use ndarray::Array2;
use rand::Rng;

use super::{sgemm_a_bt, sgemm_at_b, Init, PId, ParamArena};

/// y = x @ W^T + b with W stored [out, in].
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: PId,
    pub b: PId,
    fin: usize,
    fout: usize,
}

impl Linear {
    pub fn new(
        arena: &mut ParamArena,
        rng: &mut impl Rng,
        name: &str,
        fin: usize,
        fout: usize,
    ) -> Self {
        Self::with_init(arena, rng, name, fin, fout, Init::FanIn(fin))
    }

    pub fn with_init(
        arena: &mut ParamArena,
        rng: &mut impl Rng,
        name: &str,
        fin: usize,
        fout: usize,
        init: Init,
    ) -> Self {
        let w = arena.alloc(&format!("{name}.w"), &[fout, fin], init, rng);
        let b = arena.alloc(&format!("{name}.b"), &[fout], Init::Zero, rng);
        Linear { w, b, fin, fout }
    }

    pub fn forward(&self, arena: &ParamArena, x: &Array2<f32>) -> Array2<f32> {
        let (bs, fin) = x.dim();
        assert_eq!(fin, self.fin, "linear input width");
        let mut y = Array2::zeros((bs, self.fout));
        sgemm_a_bt(
            bs,
            self.fin,
            self.fout,
            1.0,
            x.as_slice().unwrap(),
            arena.w_slice(self.w),
            0.0,
            y.as_slice_mut().unwrap(),
        );
        let bias = arena.w_slice(self.b);
        for mut row in y.rows_mut() {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += *b;
            }
        }
        y
    }

    pub fn backward(
        &self,
        arena: &mut ParamArena,
        x: &Array2<f32>,
        dy: &Array2<f32>,
    ) -> Array2<f32> {
        let (bs, _) = x.dim();
        assert_eq!(dy.dim(), (bs, self.fout), "linear dy shape");

        // db += sum_b dy
        {
            let mut db = vec![0.0f64; self.fout];
            for row in dy.rows() {
                for (d, &v) in db.iter_mut().zip(row.iter()) {
                    *d += v as f64;
                }
            }
            let mut gb = arena.g_mut(self.b);
            for (g, d) in gb.as_slice_mut().unwrap().iter_mut().zip(&db) {
                *g += *d as f32;
            }
        }
        // dW += dy^T @ x   ([out, in])
        {
            let gw = arena.g_slice_mut(self.w);
            sgemm_at_b(
                self.fout,
                bs,
                self.fin,
                1.0,
                dy.as_slice().unwrap(),
                x.as_slice().unwrap(),
                1.0,
                gw,
            );
        }
        // dx = dy @ W
        let mut dx = Array2::zeros((bs, self.fin));
        super::sgemm_rowmajor(
            bs,
            self.fout,
            self.fin,
            1.0,
            dy.as_slice().unwrap(),
            arena.w_slice(self.w),
            0.0,
            dx.as_slice_mut().unwrap(),
        );
        dx
    }
}
