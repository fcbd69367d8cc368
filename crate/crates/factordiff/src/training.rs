//! Joint training of the encoder and the factor-conditioned denoiser.
//!
//! Each step encodes a batch into K latents per image, noises every image to
//! a per-image uniform timestep, predicts noise once per (image, latent)
//! pair, reduces the K predictions in epsilon space, and regresses the
//! reduction onto the true noise. One optimizer step updates both networks.

use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::networks::{DenCache, Denoiser, ModelHandle, Predict};
use crate::nn::{PId, ParamArena};
use crate::sampling::{tree_sum_arrays, Reduction};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Knobs for [`train`] and [`train_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub reduction: Reduction,
    /// Must equal the model's own output parameterization; kept explicit so
    /// configs are self-describing.
    pub predict: Predict,
    pub seed: u64,
    /// Checkpoint interval in steps for [`train`]; 0 writes only the final
    /// checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-4,
            steps: 1000,
            reduction: Reduction::Mean,
            predict: Predict::X0,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be finite and > 0, got {}", self.lr)));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        Ok(())
    }

    fn check_against(&self, model: &ModelHandle) -> Result<()> {
        self.validate()?;
        if self.predict != model.predict() {
            return Err(Error::Config(format!(
                "config trains {} but the model predicts {}",
                self.predict.as_str(),
                model.predict().as_str()
            )));
        }
        Ok(())
    }
}

fn check_batch(model: &ModelHandle, batch: &Array4<f32>) -> Result<()> {
    let (b, c, h, w) = batch.dim();
    if b == 0 {
        return Err(Error::Argument("batch is empty".into()));
    }
    if (c, h, w) != (model.img_channels(), model.resolution(), model.resolution()) {
        return Err(Error::Argument(format!(
            "batch images are {c}x{h}x{w} but the model expects {}x{}x{}",
            model.img_channels(),
            model.resolution(),
            model.resolution()
        )));
    }
    // tolerance absorbs float noise from upstream normalization
    if let Some(&v) = batch.iter().find(|v| !v.is_finite() || v.abs() > 1.0 + 1e-5) {
        return Err(Error::Argument(format!(
            "batch must be normalized to [-1, 1], found {v}"
        )));
    }
    Ok(())
}

struct ObjectiveState {
    den_cache: DenCache,
    /// eps_pred - eps, per image.
    residual: Array4<f32>,
    /// Conversion factors per image; None in eps mode.
    /// Per-image x0-to-eps slope d eps / d x0_hat = -sqrt(1 - beta_bar) /
    /// sqrt(beta_bar), negated; None in eps mode.
    conv: Option<Vec<f64>>,
    k: usize,
    denom: f64,
}

/// Forward pass of the composed denoising objective for injected latents.
/// Returns the loss and everything the backward pass needs.
fn objective_forward(
    denoiser: &Denoiser,
    arena: &crate::nn::ParamArena,
    schedule: &NoiseSchedule,
    predict: Predict,
    reduction: Reduction,
    batch: &Array4<f32>,
    z: &Array3<f32>,
    t: &[usize],
    eps: &Array4<f32>,
) -> Result<(f64, ObjectiveState)> {
    let (b, c, h, w) = batch.dim();
    let k = z.dim().1;
    if z.dim().0 != b {
        return Err(Error::Argument(format!(
            "latents cover {} images but the batch has {b}",
            z.dim().0
        )));
    }
    if t.len() != b {
        return Err(Error::Argument(format!("got {} timesteps for {b} images", t.len())));
    }
    if eps.dim() != batch.dim() {
        return Err(Error::Argument(format!(
            "noise shape {:?} does not match batch shape {:?}",
            eps.dim(),
            batch.dim()
        )));
    }
    for &tb in t {
        if tb < 1 || tb > schedule.t_max() {
            return Err(Error::Argument(format!(
                "training timestep {tb} outside [1, {}]",
                schedule.t_max()
            )));
        }
    }

    // Noise every image to its own timestep and replicate it K times so the
    // denoiser sees one (image, latent) pair per row.
    let bk = b * k;
    let mut x_rep = Array4::zeros((bk, c, h, w));
    let mut t_rep = vec![0u32; bk];
    for ib in 0..b {
        let noisy = schedule.forward_noise(
            batch.index_axis(Axis(0), ib),
            t[ib],
            eps.index_axis(Axis(0), ib),
        )?;
        for ik in 0..k {
            x_rep.index_axis_mut(Axis(0), ib * k + ik).assign(&noisy.pixels);
            t_rep[ib * k + ik] = t[ib] as u32;
        }
    }
    let z_rep = z
        .to_owned()
        .into_shape_with_order((bk, z.dim().2))
        .expect("latent batch is contiguous");

    let (raw, den_cache) = denoiser.forward(arena, &x_rep, &t_rep, &z_rep);

    // Per-row epsilon-space predictions.
    let (eps_rows, conv) = match predict {
        Predict::Eps => (raw, None),
        Predict::X0 => {
            let mut conv = Vec::with_capacity(b);
            let mut rows = Array4::zeros(raw.raw_dim());
            for ib in 0..b {
                let bb = schedule.beta_bar(t[ib]);
                let inv_sb = 1.0 / bb.sqrt();
                let cc = (1.0 - bb).sqrt() / bb.sqrt();
                for ik in 0..k {
                    let r = ib * k + ik;
                    let xt = x_rep.index_axis(Axis(0), r);
                    let x0 = raw.index_axis(Axis(0), r);
                    let mut out = rows.index_axis_mut(Axis(0), r);
                    ndarray::azip!((o in &mut out, &xv in &xt, &pv in &x0) {
                        *o = (inv_sb * xv as f64 - cc * pv as f64) as f32;
                    });
                }
                conv.push(cc);
            }
            (rows, Some(conv))
        }
    };

    // Reduce the K predictions per image; pairwise summation keeps the
    // result independent of duplicate grouping.
    let scale = match reduction {
        Reduction::Mean => 1.0 / k as f32,
        Reduction::Sum => 1.0,
    };
    let mut residual = Array4::zeros((b, c, h, w));
    let mut loss = 0.0f64;
    let denom = (b * c * h * w) as f64;
    for ib in 0..b {
        let terms: Vec<Array3<f32>> = (0..k)
            .map(|ik| eps_rows.index_axis(Axis(0), ib * k + ik).to_owned())
            .collect();
        let reduced = tree_sum_arrays(terms);
        let target = eps.index_axis(Axis(0), ib);
        let mut res = residual.index_axis_mut(Axis(0), ib);
        ndarray::azip!((r in &mut res, &p in &reduced, &e in &target) {
            let v = p * scale - e;
            *r = v;
            loss += (v as f64) * (v as f64);
        });
    }
    loss /= denom;

    Ok((loss, ObjectiveState { den_cache, residual, conv, k, denom }))
}

/// Backward pass matching [`objective_forward`]; accumulates parameter
/// gradients for the denoiser and returns per-latent gradients [B, K, D].
fn objective_backward(
    denoiser: &Denoiser,
    arena: &mut crate::nn::ParamArena,
    reduction: Reduction,
    state: ObjectiveState,
) -> Array3<f32> {
    let (b, c, h, w) = state.residual.dim();
    let k = state.k;
    let wk = match reduction {
        Reduction::Mean => 1.0 / k as f64,
        Reduction::Sum => 1.0,
    };
    let mut draw = Array4::zeros((b * k, c, h, w));
    for ib in 0..b {
        let base = 2.0 / state.denom * wk;
        let scale = match &state.conv {
            Some(conv) => (-conv[ib] * base) as f32,
            None => base as f32,
        };
        let res = state.residual.index_axis(Axis(0), ib);
        for ik in 0..k {
            let mut row = draw.index_axis_mut(Axis(0), ib * k + ik);
            ndarray::azip!((d in &mut row, &r in &res) *d = r * scale);
        }
    }
    let (_, dz_rep) = denoiser.backward(arena, state.den_cache, &draw);
    let d = dz_rep.dim().1;
    dz_rep
        .into_shape_with_order((b, k, d))
        .expect("latent grads are contiguous")
}

/// Evaluate the composed denoising objective for explicit latents without
/// touching any parameters. `z` is [B, K, D]; K may differ from the model's
/// own component count, which lets callers probe reductions directly.
pub fn composed_loss(
    model: &ModelHandle,
    batch: &Array4<f32>,
    z: &Array3<f32>,
    t: &[usize],
    eps: &Array4<f32>,
    reduction: Reduction,
) -> Result<f64> {
    check_batch(model, batch)?;
    if z.dim().2 != model.d() || z.dim().1 == 0 {
        return Err(Error::Argument(format!(
            "latents must be [B, K>=1, {}], got {:?}",
            model.d(),
            z.dim()
        )));
    }
    let (loss, _) = objective_forward(
        model.denoiser(),
        model.arena(),
        model.schedule(),
        model.predict(),
        reduction,
        batch,
        z,
        t,
        eps,
    )?;
    Ok(loss)
}

fn step_at<R: Rng>(
    model: &mut ModelHandle,
    batch: &Array4<f32>,
    cfg: &TrainConfig,
    rng: &mut R,
    step: usize,
) -> Result<f64> {
    cfg.check_against(model)?;
    check_batch(model, batch)?;

    let b = batch.dim().0;
    let (c, h, w) = (model.img_channels(), model.resolution(), model.resolution());
    let t_max = model.schedule().t_max();
    let mut t = Vec::with_capacity(b);
    let mut eps = Array4::zeros(batch.raw_dim());
    for ib in 0..b {
        t.push(rng.gen_range(1..=t_max));
        let mut e = eps.index_axis_mut(Axis(0), ib);
        for v in e.iter_mut() {
            *v = rng.sample::<f32, _>(StandardNormal);
        }
        let _ = (c, h, w);
    }

    let schedule = model.schedule().clone();
    let predict = model.predict();
    let (encoder, denoiser, arena) = model.parts_mut();
    arena.zero_grads();

    let (z, enc_cache) = encoder.forward(arena, batch);
    let (loss, state) = objective_forward(
        denoiser, arena, &schedule, predict, cfg.reduction, batch, &z, &t, &eps,
    )?;
    if !loss.is_finite() {
        return Err(Error::Training {
            step,
            message: format!("loss became non-finite ({loss})"),
        });
    }

    let dz = objective_backward(denoiser, arena, cfg.reduction, state);
    encoder.backward(arena, &enc_cache, &dz);

    let grad_norm = arena.clip_grad_norm(1.0);
    if !grad_norm.is_finite() {
        return Err(Error::Training {
            step,
            message: "gradient norm became non-finite".into(),
        });
    }
    arena.adam_step(cfg.lr);
    Ok(loss)
}

/// One optimizer step on one batch: encode, noise, predict per component,
/// reduce, regress onto the drawn noise, and update both networks jointly
/// (gradient norm clipped at 1.0). Returns the scalar loss.
pub fn train_step<R: Rng>(
    model: &mut ModelHandle,
    batch: &Array4<f32>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    let step = model.arena().adam_t() as usize + 1;
    step_at(model, batch, cfg, rng, step)
}

/// Run `cfg.steps` training steps over deterministically shuffled minibatches
/// of `images` ([N, C, H, W] in [-1, 1]). Returns the per-step loss curve.
///
/// When `checkpoint` is given, the model is saved there every
/// `cfg.checkpoint_every` steps (atomically, so the latest checkpoint is
/// always loadable) and once more after the final step.
pub fn train(
    model: &mut ModelHandle,
    images: &Array4<f32>,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<Vec<f64>> {
    cfg.check_against(model)?;
    check_batch(model, images)?;

    let n = images.dim().0;
    let bsz = cfg.batch_size.min(n);
    let (c, h, w) = (model.img_channels(), model.resolution(), model.resolution());
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    let mut order: Vec<usize> = (0..n).collect();
    let mut pos = n; // forces a shuffle before the first batch
    let mut batch = Array4::zeros((bsz, c, h, w));
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        if pos + bsz > n {
            order.shuffle(&mut rng);
            pos = 0;
        }
        for (row, &idx) in order[pos..pos + bsz].iter().enumerate() {
            batch
                .index_axis_mut(Axis(0), row)
                .assign(&images.index_axis(Axis(0), idx));
        }
        pos += bsz;

        let loss = step_at(model, &batch, cfg, &mut rng, step)?;
        losses.push(loss);

        if let Some(path) = checkpoint {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
                model.save_checkpoint(path)?;
            }
        }
    }
    if let Some(path) = checkpoint {
        model.save_checkpoint(path)?;
    }
    Ok(losses)
}

/// Compare backprop gradients of the composed objective against central
/// finite differences and return the worst relative error observed.
///
/// Probes the largest-gradient parameter of the encoder and of the denoiser
/// at a seed-derived jittered point (a fresh init leaves the output branches
/// near-silent, below the single-precision noise floor of a central
/// difference). All parameters are restored before returning, so the model
/// is unchanged. Intended as a cheap self-diagnostic for the hand-written
/// backward passes; run it on a small model.
pub fn gradient_check(model: &mut ModelHandle, reduction: Reduction, seed: u64) -> Result<f64> {
    let (b, c, h, w) = (2usize, model.img_channels(), model.resolution(), model.resolution());
    let t_max = model.schedule().t_max();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let batch = Array4::from_shape_fn((b, c, h, w), |_| rng.gen_range(-0.9f32..0.9));
    let eps = Array4::from_shape_fn((b, c, h, w), |_| rng.sample::<f32, _>(StandardNormal));
    let t: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=t_max)).collect();

    // Jitter every parameter, remembering the originals.
    let originals: Vec<(PId, Vec<f32>)> = {
        let (_, _, arena) = model.parts_mut();
        let ids: Vec<PId> = arena.ids().collect();
        let mut saved = Vec::with_capacity(ids.len());
        for id in ids {
            saved.push((id, arena.w(id).iter().copied().collect()));
            for v in arena.w_mut(id).iter_mut() {
                *v += rng.gen_range(-0.15f32..0.15);
            }
        }
        saved
    };

    let restore = |model: &mut ModelHandle| {
        let (_, _, arena) = model.parts_mut();
        for (id, vals) in &originals {
            for (w, v) in arena.w_mut(*id).iter_mut().zip(vals) {
                *w = *v;
            }
        }
    };

    let schedule = model.schedule().clone();
    let predict = model.predict();
    let (encoder, denoiser, arena) = model.parts_mut();
    arena.zero_grads();
    let (z, enc_cache) = encoder.forward(arena, &batch);
    let state = match objective_forward(
        denoiser, arena, &schedule, predict, reduction, &batch, &z, &t, &eps,
    ) {
        Ok((_, state)) => state,
        Err(e) => {
            restore(model);
            return Err(e);
        }
    };
    let dz = objective_backward(denoiser, arena, reduction, state);
    encoder.backward(arena, &enc_cache, &dz);

    // Largest-gradient entry per network, where the relative error of a
    // central difference is best conditioned.
    let probe = |arena: &ParamArena, prefix: &str| -> Option<(PId, usize, f64)> {
        let mut best: Option<(PId, usize, f64)> = None;
        for id in arena.ids() {
            if !arena.name(id).starts_with(prefix) {
                continue;
            }
            for (i, &gv) in arena.g(id).iter().enumerate() {
                if best.map_or(true, |(_, _, bg)| (gv as f64).abs() > bg.abs()) {
                    best = Some((id, i, gv as f64));
                }
            }
        }
        best
    };
    let probes: Vec<(PId, usize, f64)> = ["enc.", "den."]
        .iter()
        .filter_map(|p| probe(model.arena(), p))
        .collect();

    let mut worst = 0.0f64;
    for (id, idx, analytic) in probes {
        let h_step = 8e-3f32;
        let orig = model.arena().w(id).as_slice().expect("parameters are contiguous")[idx];
        let mut eval = |model: &mut ModelHandle, v: f32| -> Result<f64> {
            let (encoder, denoiser, arena) = model.parts_mut();
            arena.w_mut(id).as_slice_mut().expect("parameters are contiguous")[idx] = v;
            let (z, _) = encoder.forward(arena, &batch);
            let (loss, _) = objective_forward(
                denoiser, arena, &schedule, predict, reduction, &batch, &z, &t, &eps,
            )?;
            Ok(loss)
        };
        let lp = eval(model, orig + h_step);
        let lm = eval(model, orig - h_step);
        {
            let (_, _, arena) = model.parts_mut();
            arena.w_mut(id).as_slice_mut().expect("parameters are contiguous")[idx] = orig;
        }
        let (lp, lm) = match (lp, lm) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                restore(model);
                return Err(e);
            }
        };
        let fd = (lp - lm) / (2.0 * h_step as f64);
        let rel = (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-12);
        worst = worst.max(rel);
    }

    restore(model);
    Ok(worst)
}

/// Write a loss curve as `step,loss` CSV (steps 1-indexed).
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::with_capacity(losses.len() * 24 + 16);
    out.push_str("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{CondMode, DenoiserConfig, EncoderConfig};
    use crate::nn::PId;

    fn micro_model(seed: u64, predict: Predict, k: usize) -> ModelHandle {
        let enc = EncoderConfig { hidden_dim: 4, num_blocks: 2, k, d: 4 };
        let den = DenoiserConfig {
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            time_embed_dim: 4,
            cond_mode: CondMode::ConcatTimeLatent,
            predict,
        };
        let schedule = NoiseSchedule::squared_cosine(20).unwrap();
        ModelHandle::new(enc, den, schedule, 8, 1, seed).unwrap()
    }

    fn uniform_images(n: usize, res: usize, seed: u64) -> Array4<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((n, 1, res, res), || rng.gen_range(-1.0f32..1.0))
    }

    fn unit_noise(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.sample::<f32, _>(StandardNormal))
    }

    #[test]
    fn config_validation_and_parameterization_guard() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());

        let mut model = micro_model(1, Predict::X0, 2);
        let batch = uniform_images(2, 8, 2);
        let cfg = TrainConfig { predict: Predict::Eps, ..TrainConfig::default() };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let err = train_step(&mut model, &batch, &cfg, &mut rng).unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn rejects_bad_batches() {
        let mut model = micro_model(1, Predict::X0, 2);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(3);

        let empty = Array4::zeros((0, 1, 8, 8));
        assert!(train_step(&mut model, &empty, &cfg, &mut rng).is_err());

        let wrong_res = Array4::zeros((2, 1, 4, 4));
        assert!(train_step(&mut model, &wrong_res, &cfg, &mut rng).is_err());

        let mut out_of_range = Array4::zeros((2, 1, 8, 8));
        out_of_range[(0, 0, 0, 0)] = 1.5;
        let err = train_step(&mut model, &out_of_range, &cfg, &mut rng).unwrap_err();
        assert_eq!(err.category(), "argument");
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        // End-to-end check through encoder, replication, denoiser, the
        // x0-to-eps conversion, and the reduction. The probed parameters are
        // the largest-gradient entries of each network, where the relative
        // error of a central difference is best conditioned.
        for predict in [Predict::X0, Predict::Eps] {
            let mut model = micro_model(11, predict, 2);
            // The fresh init keeps the output branches near-silent, which
            // leaves gradients below the single-precision noise floor of a
            // central difference. Probe at a generic point instead.
            {
                let arena = model.arena_mut();
                let ids: Vec<_> = arena.ids().collect();
                let mut prng = ChaCha12Rng::seed_from_u64(99);
                for id in ids {
                    for v in arena.w_mut(id).iter_mut() {
                        *v += prng.gen_range(-0.15f32..0.15);
                    }
                }
            }
            let batch = uniform_images(2, 8, 12);
            let eps = unit_noise(batch.dim(), 13);
            let t = vec![4usize, 15];

            let schedule = model.schedule().clone();
            let (encoder, denoiser, arena) = model.parts_mut();
            arena.zero_grads();
            let (z, enc_cache) = encoder.forward(arena, &batch);
            let (_, state) = objective_forward(
                denoiser, arena, &schedule, predict, Reduction::Mean, &batch, &z, &t, &eps,
            )
            .unwrap();
            let dz = objective_backward(denoiser, arena, Reduction::Mean, state);
            encoder.backward(arena, &enc_cache, &dz);

            let probe = |arena: &crate::nn::ParamArena, prefix: &str| -> (PId, usize, f64) {
                let mut best = None;
                for id in arena.ids() {
                    if !arena.name(id).starts_with(prefix) {
                        continue;
                    }
                    let g = arena.g(id);
                    for (i, &gv) in g.iter().enumerate() {
                        let a = gv.abs() as f64;
                        if best.map_or(true, |(_, _, bg): (PId, usize, f64)| a > bg.abs()) {
                            best = Some((id, i, gv as f64));
                        }
                    }
                }
                best.expect("network has parameters")
            };
            let probes = [probe(arena, "enc."), probe(arena, "den.")];

            for (id, idx, analytic) in probes {
                let h = 8e-3;
                let orig = arena.w(id).as_slice().unwrap()[idx];
                let mut eval = |v: f32| -> f64 {
                    arena.w_mut(id).as_slice_mut().unwrap()[idx] = v;
                    let (z, _) = encoder.forward(arena, &batch);
                    let (loss, _) = objective_forward(
                        denoiser, arena, &schedule, predict, Reduction::Mean, &batch, &z, &t,
                        &eps,
                    )
                    .unwrap();
                    loss
                };
                let lp = eval(orig + h);
                let lm = eval(orig - h);
                arena.w_mut(id).as_slice_mut().unwrap()[idx] = orig;
                let fd = (lp - lm) / (2.0 * h as f64);
                let rel = (analytic - fd).abs() / fd.abs().max(analytic.abs());
                assert!(
                    rel < 1e-3,
                    "{} [{idx}] ({}): analytic {analytic} vs fd {fd} (rel {rel})",
                    arena.name(id),
                    predict.as_str(),
                );
            }
        }
    }

    #[test]
    fn identical_latents_collapse_to_a_single_component() {
        let model = micro_model(21, Predict::X0, 2);
        let batch = uniform_images(3, 8, 22);
        let eps = unit_noise(batch.dim(), 23);
        let t = vec![3usize, 9, 18];
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let z1 = Array3::from_shape_simple_fn((3, 1, 4), || rng.gen_range(-1.0f32..1.0));

        let single = composed_loss(&model, &batch, &z1, &t, &eps, Reduction::Mean).unwrap();

        // Mean over duplicated latents is the single-component objective.
        for k in [3usize, 4] {
            let mut zk = Array3::zeros((3, k, 4));
            for ik in 0..k {
                zk.slice_mut(ndarray::s![.., ik..ik + 1, ..]).assign(&z1);
            }
            let dup = composed_loss(&model, &batch, &zk, &t, &eps, Reduction::Mean).unwrap();
            let tol = if k.is_power_of_two() { 1e-12 } else { 1e-6 };
            assert!(
                (dup - single).abs() < tol,
                "K={k}: {dup} vs {single}"
            );
        }

        // A single component reduces identically under mean and sum.
        let sum = composed_loss(&model, &batch, &z1, &t, &eps, Reduction::Sum).unwrap();
        assert_eq!(sum, single);
    }

    #[test]
    fn gradients_reach_both_networks() {
        let mut model = micro_model(31, Predict::X0, 2);
        let batch = uniform_images(2, 8, 32);
        let cfg = TrainConfig { lr: 1e-4, ..TrainConfig::default() };
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        // Adam has already applied the (clipped) gradients after one step;
        // inspect the raw accumulators instead.
        let eps = unit_noise(batch.dim(), 34);
        let t = vec![5usize, 12];
        let schedule = model.schedule().clone();
        let predict = model.predict();
        let (encoder, denoiser, arena) = model.parts_mut();
        arena.zero_grads();
        let (z, enc_cache) = encoder.forward(arena, &batch);
        let (_, state) = objective_forward(
            denoiser, arena, &schedule, predict, Reduction::Mean, &batch, &z, &t, &eps,
        )
        .unwrap();
        let dz = objective_backward(denoiser, arena, Reduction::Mean, state);
        encoder.backward(arena, &enc_cache, &dz);

        let group_norm = |prefix: &str| -> f64 {
            let mut s = 0.0f64;
            for id in arena.ids() {
                if arena.name(id).starts_with(prefix) {
                    for &g in arena.g(id).iter() {
                        s += (g as f64) * (g as f64);
                    }
                }
            }
            s.sqrt()
        };
        let enc_norm = group_norm("enc.");
        let den_norm = group_norm("den.");
        assert!(enc_norm > 0.0, "encoder gradient is zero");
        assert!(den_norm > 0.0, "denoiser gradient is zero");

        // And a full step actually changes parameters of both networks.
        let before: Vec<f32> = model.arena().iter().flat_map(|(_, w)| w.iter().copied().collect::<Vec<_>>()).collect();
        train_step(&mut model, &batch, &cfg, &mut rng).unwrap();
        let after: Vec<f32> = model.arena().iter().flat_map(|(_, w)| w.iter().copied().collect::<Vec<_>>()).collect();
        assert_ne!(before, after);
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let images = uniform_images(8, 8, 42);
        let cfg = TrainConfig {
            batch_size: 4,
            lr: 3e-4,
            steps: 100,
            seed: 7,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let run = || -> Vec<f64> {
            let mut model = micro_model(41, Predict::X0, 2);
            train(&mut model, &images, &cfg, None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 100);
        assert!(
            (a[99] - b[99]).abs() <= 1e-4,
            "loss at step 100 differs: {} vs {}",
            a[99],
            b[99]
        );
        assert_eq!(a, b, "seeded runs should be deterministic throughout");
    }

    #[test]
    fn overfitting_a_tiny_batch_reduces_the_loss() {
        let images = uniform_images(4, 8, 51);
        let cfg = TrainConfig {
            batch_size: 4,
            lr: 2e-3,
            steps: 300,
            seed: 5,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let mut model = micro_model(52, Predict::X0, 2);
        let losses = train(&mut model, &images, &cfg, None).unwrap();
        let head: f64 = losses[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = losses[250..].iter().sum::<f64>() / 50.0;
        assert!(losses.iter().all(|l| *l >= 0.0), "squared error is non-negative");
        assert!(
            tail < 0.8 * head,
            "no training progress: first-50 mean {head}, last-50 mean {tail}"
        );
    }

    #[test]
    fn non_finite_forward_reports_the_failing_step() {
        let mut model = micro_model(61, Predict::X0, 2);
        // Saturate the encoder head so latents (and the loss) overflow f32.
        let (name, len) = {
            let arena = model.arena();
            let id = arena
                .ids()
                .find(|&id| arena.name(id) == "enc.head.w")
                .expect("encoder head exists");
            (arena.name(id).to_string(), arena.w(id).len())
        };
        model
            .arena_mut()
            .set_by_name(&name, &vec![f32::MAX; len])
            .unwrap();

        let batch = uniform_images(2, 8, 62);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(63);
        let err = train_step(&mut model, &batch, &cfg, &mut rng).unwrap_err();
        match err {
            Error::Training { step, .. } => assert_eq!(step, 1),
            other => panic!("expected a training error, got {other:?}"),
        }
    }

    #[test]
    fn train_checkpoints_and_loss_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("model.fdck");
        let images = uniform_images(6, 8, 71);
        let cfg = TrainConfig {
            batch_size: 3,
            lr: 1e-3,
            steps: 7,
            seed: 1,
            checkpoint_every: 3,
            ..TrainConfig::default()
        };
        let mut model = micro_model(72, Predict::X0, 2);
        let losses = train(&mut model, &images, &cfg, Some(&ckpt)).unwrap();
        assert_eq!(losses.len(), 7);

        let restored = ModelHandle::load_checkpoint(&ckpt).unwrap();
        assert_eq!(restored.fingerprint(), model.fingerprint());

        let csv = dir.path().join("loss.csv");
        write_loss_csv(&csv, &losses).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,loss"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 7);
        assert!(rows[0].starts_with("1,"));
        let recovered: f64 = rows[6].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(recovered, losses[6]);
    }
}
