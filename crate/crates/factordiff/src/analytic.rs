//! Closed-form Gaussian oracle for the composition math.
//!
//! For Gaussian data the conditional score at every noise level is exact, so
//! composed sampling can be validated without any training: the noised
//! density of N(mean, cov) at level t is N(sqrt(1-beta_bar)*mean,
//! (1-beta_bar)*cov + beta_bar*I), products of Gaussians are Gaussian, and
//! the composed reverse chain is affine in the state, which makes its
//! mean and covariance exactly computable step by step
//! ([`simulate_reverse_moments`]).

use nalgebra::{Cholesky, DMatrix, DVector};
use ndarray::{Array2, Array4, ArrayView2, ArrayView3};

use crate::networks::Fnv64;
use crate::sampling::{ddim_grid, EpsModel, Reduction, SamplerConfig, SamplerKind};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// A Gaussian data density with a symmetric positive definite covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Argument("component dimension must be >= 1".into()));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Argument(format!(
                "covariance is {}x{} but the mean has dimension {d}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Argument(
                "component mean and covariance must be finite".into(),
            ));
        }
        let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..d {
            for j in (i + 1)..d {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-9 * scale {
                    return Err(Error::Argument(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if Cholesky::new(cov.clone()).is_none() {
            return Err(Error::Argument(
                "covariance is not positive definite".into(),
            ));
        }
        Ok(GaussianComponent { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    fn chol(&self) -> Cholesky<f64, nalgebra::Dyn> {
        Cholesky::new(self.cov.clone()).expect("validated SPD at construction")
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let chol = self.chol();
        let diff = x - &self.mean;
        let quad = diff.dot(&chol.solve(&diff));
        let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        let d = self.dim() as f64;
        -0.5 * (quad + log_det + d * (2.0 * std::f64::consts::PI).ln())
    }

    pub fn density(&self, x: &DVector<f64>) -> f64 {
        self.log_density(x).exp()
    }
}

/// The marginal density of the forward process at level t applied to `comp`:
/// N(sqrt(1-beta_bar)*mean, (1-beta_bar)*cov + beta_bar*I).
pub fn noised(
    comp: &GaussianComponent,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<GaussianComponent> {
    if t > schedule.t_max() {
        return Err(Error::Argument(format!(
            "timestep {t} out of range (t_max = {})",
            schedule.t_max()
        )));
    }
    let bb = schedule.beta_bar(t);
    let d = comp.dim();
    let mean = comp.mean() * (1.0 - bb).sqrt();
    let cov = comp.cov() * (1.0 - bb) + DMatrix::identity(d, d) * bb;
    GaussianComponent::new(mean, cov)
}

/// Exact unit-noise prediction for Gaussian data: -sqrt(beta_bar) times the
/// score of the noised density, evaluated at `x_t`.
pub fn analytic_eps(
    comp: &GaussianComponent,
    x_t: &DVector<f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<DVector<f64>> {
    if x_t.len() != comp.dim() {
        return Err(Error::Argument(format!(
            "state dimension {} does not match component dimension {}",
            x_t.len(),
            comp.dim()
        )));
    }
    let noisy = noised(comp, t, schedule)?;
    let bb = schedule.beta_bar(t);
    // score = -Omega (x - m); eps = -sqrt(beta_bar) * score.
    let diff = x_t - noisy.mean();
    let solved = noisy.chol().solve(&diff);
    Ok(solved * bb.sqrt())
}

/// Precision-weighted product of two Gaussians:
/// cov = (cov_a^-1 + cov_b^-1)^-1, mean = cov (cov_a^-1 mean_a + cov_b^-1 mean_b).
pub fn product_gaussian(
    a: &GaussianComponent,
    b: &GaussianComponent,
) -> Result<GaussianComponent> {
    if a.dim() != b.dim() {
        return Err(Error::Argument(format!(
            "component dimensions {} and {} differ",
            a.dim(),
            b.dim()
        )));
    }
    let d = a.dim();
    let eye = DMatrix::identity(d, d);
    let prec_a = a.chol().solve(&eye);
    let prec_b = b.chol().solve(&eye);
    let prec_sum = &prec_a + &prec_b;
    let chol = Cholesky::new(prec_sum)
        .ok_or_else(|| Error::Argument("summed precision is not positive definite".into()))?;
    let cov = chol.solve(&eye);
    // Symmetrize away solver round-off before revalidating.
    let cov = (&cov + &cov.transpose()) * 0.5;
    let mean = chol.solve(&(&prec_a * a.mean() + &prec_b * b.mean()));
    GaussianComponent::new(mean, cov)
}

/// Compare a sample population against a reference Gaussian. Returns the
/// Euclidean distance between means and the Frobenius distance between the
/// population covariance (n denominator) and the reference covariance.
pub fn sample_divergence(
    samples: ArrayView2<f64>,
    reference: &GaussianComponent,
) -> Result<(f64, f64)> {
    let (n, d) = samples.dim();
    if n < 1000 {
        return Err(Error::Argument(format!(
            "divergence estimate needs at least 1000 samples, got {n}"
        )));
    }
    if d != reference.dim() {
        return Err(Error::Argument(format!(
            "sample dimension {d} does not match the reference dimension {}",
            reference.dim()
        )));
    }
    let mut mean = DVector::zeros(d);
    for row in samples.rows() {
        for j in 0..d {
            mean[j] += row[j];
        }
    }
    mean /= n as f64;

    let mut cov = DMatrix::zeros(d, d);
    for row in samples.rows() {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    cov /= n as f64;

    let mean_err = (&mean - reference.mean()).norm();
    let cov_err = (&cov - reference.cov()).norm();
    Ok((mean_err, cov_err))
}

/// Adapter exposing a Gaussian component as a noise-prediction model over
/// `dim x 1 x 1` images, so analytic terms plug into composition specs and
/// samplers unchanged. The conditioning latent is empty (length 0): the
/// component itself plays the role of the conditioned energy.
#[derive(Debug, Clone)]
pub struct AnalyticModel {
    comp: GaussianComponent,
    schedule: NoiseSchedule,
}

impl AnalyticModel {
    pub fn new(comp: GaussianComponent, schedule: NoiseSchedule) -> Self {
        AnalyticModel { comp, schedule }
    }

    pub fn component(&self) -> &GaussianComponent {
        &self.comp
    }
}

impl EpsModel for AnalyticModel {
    fn resolution(&self) -> usize {
        1
    }

    fn img_channels(&self) -> usize {
        self.comp.dim()
    }

    fn latent_dim(&self) -> usize {
        0
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.update(b"analytic-gaussian");
        h.update(&(self.comp.dim() as u64).to_le_bytes());
        for v in self.comp.mean().iter() {
            h.update(&v.to_le_bytes());
        }
        for v in self.comp.cov().iter() {
            h.update(&v.to_le_bytes());
        }
        h.update(self.schedule.kind().as_str().as_bytes());
        h.update(&(self.schedule.t_max() as u64).to_le_bytes());
        h.update(&self.schedule.s_offset().to_le_bytes());
        h.finish()
    }

    fn eps_for_latents(
        &self,
        x_t: ArrayView3<f32>,
        t: usize,
        zs: &Array2<f32>,
    ) -> Result<Array4<f32>> {
        let d = self.comp.dim();
        let (c, h, w) = x_t.dim();
        if (c, h, w) != (d, 1, 1) {
            return Err(Error::Argument(format!(
                "analytic state must be ({d}, 1, 1), got ({c}, {h}, {w})"
            )));
        }
        let x = DVector::from_iterator(d, x_t.iter().map(|&v| v as f64));
        let eps = analytic_eps(&self.comp, &x, t, &self.schedule)?;
        let n = zs.nrows();
        let mut out = Array4::zeros((n, d, 1, 1));
        for b in 0..n {
            for i in 0..d {
                out[(b, i, 0, 0)] = eps[i] as f32;
            }
        }
        Ok(out)
    }
}

/// One affine transition x' = A x + b + noise, noise ~ N(0, q*I).
struct AffineStep {
    a: DMatrix<f64>,
    b: DVector<f64>,
    q: f64,
}

/// The composed noise prediction is affine in the state:
/// eps(x) = G x + g with G = s*W*sum(w_k Omega_k), g = -s*W*sum(w_k Omega_k m_k),
/// where s = sqrt(beta_bar), Omega_k and m_k are the noised precision and
/// mean of component k, and W is 1 (sum) or 1/sum(w) (mean).
fn composed_eps_affine(
    components: &[(GaussianComponent, f64)],
    reduction: Reduction,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d = components[0].0.dim();
    let eye = DMatrix::identity(d, d);
    let s = schedule.beta_bar(t).sqrt();
    let mut gm = DMatrix::zeros(d, d);
    let mut gv = DVector::zeros(d);
    for (comp, w) in components {
        let nz = noised(comp, t, schedule)?;
        let omega = nz.chol().solve(&eye);
        gm += &omega * *w;
        gv += omega * nz.mean() * *w;
    }
    let norm = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => {
            let wsum: f64 = components.iter().map(|(_, w)| *w).sum();
            1.0 / wsum
        }
    };
    Ok((gm * (s * norm), gv * (-s * norm)))
}

/// Exact mean and covariance of the sampler output for a composition of
/// Gaussian components, computed by propagating moments through the same
/// per-step update the samplers apply (which is affine for Gaussian scores).
///
/// Mirrors the implementation's arithmetic in f64: the ancestral form
/// `x' = (x - gamma_t * eps)/sqrt(1 - beta_step) + sqrt(beta_step) * xi`, and
/// the subsequence form built from the clean-image estimate and re-derived
/// noise over [`ddim_grid`]. The samplers' final [-1, 1] clamp is not
/// modeled; callers compare against populations concentrated inside it.
pub fn simulate_reverse_moments(
    components: &[(GaussianComponent, f64)],
    reduction: Reduction,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if components.is_empty() {
        return Err(Error::Argument(
            "moment simulation requires at least one component".into(),
        ));
    }
    let d = components[0].0.dim();
    for (comp, w) in components {
        if comp.dim() != d {
            return Err(Error::Argument(
                "all components must share one dimension".into(),
            ));
        }
        if !w.is_finite() {
            return Err(Error::Argument("weights must be finite".into()));
        }
    }
    if reduction == Reduction::Mean && components.iter().map(|(_, w)| *w).sum::<f64>() == 0.0 {
        return Err(Error::Argument(
            "mean reduction requires a nonzero weight sum".into(),
        ));
    }
    cfg.validate(schedule.t_max())?;

    let eye = DMatrix::identity(d, d);
    let steps: Vec<AffineStep> = match cfg.kind {
        SamplerKind::AncestralAlg2 => (1..=schedule.t_max())
            .rev()
            .map(|t| {
                let (gm, gv) = composed_eps_affine(components, reduction, t, schedule)?;
                let bs = schedule.step_beta(t);
                let gamma = cfg.gamma * bs / schedule.beta_bar(t).sqrt();
                let inv = 1.0 / (1.0 - bs).sqrt();
                Ok(AffineStep {
                    a: (&eye - gm * gamma) * inv,
                    b: gv * (-gamma * inv),
                    q: if t > 1 { bs } else { 0.0 },
                })
            })
            .collect::<Result<_>>()?,
        SamplerKind::Ddim => {
            let grid = ddim_grid(schedule.t_max(), cfg.num_steps);
            (1..grid.len())
                .rev()
                .map(|i| {
                    let t = grid[i];
                    let t_prev = grid[i - 1];
                    let (gm, gv) = composed_eps_affine(components, reduction, t, schedule)?;
                    let bb_t = schedule.beta_bar(t);
                    let bb_prev = schedule.beta_bar(t_prev);
                    // x0(x) = (x - sqrt(bb)*eps(x)) / sqrt(1 - bb)
                    let inv_a = 1.0 / (1.0 - bb_t).sqrt();
                    let x0_m = (&eye - &gm * bb_t.sqrt()) * inv_a;
                    let x0_v = &gv * (-bb_t.sqrt() * inv_a);
                    // eps_consistent(x) = (x - sqrt(1 - bb)*x0(x)) / sqrt(bb)
                    let inv_b = 1.0 / bb_t.sqrt();
                    let re_m = (&eye - &x0_m * (1.0 - bb_t).sqrt()) * inv_b;
                    let re_v = &x0_v * (-(1.0 - bb_t).sqrt() * inv_b);

                    let sigma = if cfg.eta == 0.0 || t_prev == 0 {
                        0.0
                    } else {
                        let var = (bb_prev / bb_t) * (1.0 - (1.0 - bb_t) / (1.0 - bb_prev));
                        cfg.eta * var.max(0.0).sqrt()
                    };
                    let coef_x0 = (1.0 - bb_prev).sqrt();
                    let coef_eps = (bb_prev - sigma * sigma).max(0.0).sqrt();
                    Ok(AffineStep {
                        a: x0_m * coef_x0 + re_m * coef_eps,
                        b: x0_v * coef_x0 + re_v * coef_eps,
                        q: sigma * sigma,
                    })
                })
                .collect::<Result<_>>()?
        }
    };

    let mut mean = DVector::zeros(d);
    let mut cov = DMatrix::identity(d, d);
    for step in steps {
        mean = &step.a * mean + &step.b;
        cov = &step.a * cov * step.a.transpose() + &eye * step.q;
    }
    Ok((mean, cov))
}
