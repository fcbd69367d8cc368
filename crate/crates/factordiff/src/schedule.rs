//! Cumulative noise schedule and forward-noising utilities.
//!
//! The schedule is stored as the cumulative noise level `beta_bar[t]` for
//! t in 0..=t_max: the forward process is
//!
//! ```text
//! x_t = sqrt(1 - beta_bar[t]) * x0 + sqrt(beta_bar[t]) * eps,   eps ~ N(0, I)
//! ```
//!
//! so `beta_bar[0] = 0` (clean image) and `beta_bar[t_max] ~ 1` (pure noise).

use ndarray::{Array3, ArrayView3};

use crate::{Error, Result};

/// Default curvature offset for the squared-cosine schedule.
pub const DEFAULT_S_OFFSET: f64 = 0.008;

/// Cap applied to derived per-step increments so the reverse process stays
/// finite at the fully-noised end of a schedule where beta_bar reaches 1.
pub const STEP_BETA_CAP: f64 = 0.999;

/// Schedule family. Only the squared-cosine ramp is implemented; the enum
/// exists so checkpoints name the family explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    SquaredCosine,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::SquaredCosine => "squared_cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "squared_cosine" => Ok(ScheduleKind::SquaredCosine),
            other => Err(Error::Config(format!("unknown schedule kind '{other}'"))),
        }
    }
}

/// An image part-way through the forward process, tagged with its timestep.
#[derive(Debug, Clone)]
pub struct NoisyImage {
    pub pixels: Array3<f32>,
    pub t: usize,
}

/// Precomputed cumulative noise schedule.
///
/// Serialized as `(kind, t_max, s_offset)` only; `beta_bar` is recomputed on
/// load so files stay independent of float-evaluation order.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    t_max: usize,
    s_offset: f64,
    beta_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Squared-cosine schedule with the default offset.
    pub fn squared_cosine(t_max: usize) -> Result<Self> {
        Self::new(ScheduleKind::SquaredCosine, t_max, DEFAULT_S_OFFSET)
    }

    /// Build a schedule from its serialized identity.
    pub fn new(kind: ScheduleKind, t_max: usize, s_offset: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("schedule t_max must be >= 1".into()));
        }
        if !(s_offset > 0.0 && s_offset.is_finite()) {
            return Err(Error::Config(format!(
                "schedule s_offset must be a positive real, got {s_offset}"
            )));
        }
        let beta_bar = match kind {
            ScheduleKind::SquaredCosine => squared_cosine_beta_bar(t_max, s_offset),
        };
        Ok(NoiseSchedule { kind, t_max, s_offset, beta_bar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn s_offset(&self) -> f64 {
        self.s_offset
    }

    /// Cumulative noise level at timestep t (0 <= t <= t_max).
    pub fn beta_bar(&self, t: usize) -> f64 {
        self.beta_bar[t]
    }

    /// Per-step noise increment at t (1 <= t <= t_max), derived from the
    /// cumulative levels and capped at [`STEP_BETA_CAP`]:
    ///
    /// ```text
    /// step_beta(t) = 1 - (1 - beta_bar[t]) / (1 - beta_bar[t-1])
    /// ```
    pub fn step_beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max, "step_beta needs 1 <= t <= t_max");
        let raw = 1.0 - (1.0 - self.beta_bar[t]) / (1.0 - self.beta_bar[t - 1]);
        raw.min(STEP_BETA_CAP)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::Argument(format!(
                "timestep {t} out of range (t_max = {})",
                self.t_max
            )));
        }
        Ok(())
    }

    /// Diffuse a clean image to timestep t with the given unit noise.
    pub fn forward_noise(
        &self,
        x0: ArrayView3<f32>,
        t: usize,
        eps: ArrayView3<f32>,
    ) -> Result<NoisyImage> {
        self.check_t(t)?;
        if x0.dim() != eps.dim() {
            return Err(Error::Argument(format!(
                "forward_noise shape mismatch: x0 {:?} vs eps {:?}",
                x0.dim(),
                eps.dim()
            )));
        }
        let bb = self.beta_bar[t];
        let (a, b) = ((1.0 - bb).sqrt(), bb.sqrt());
        let mut pixels = Array3::zeros(x0.dim());
        ndarray::azip!((o in &mut pixels, &x in &x0, &e in &eps) {
            *o = (a * x as f64 + b * e as f64) as f32;
        });
        Ok(NoisyImage { pixels, t })
    }

    /// Convert a clean-image prediction into the unit noise it implies at
    /// the given noisy state. Errors at t = 0 where the state contains no
    /// noise to solve for.
    pub fn x0_to_eps(&self, x0_hat: ArrayView3<f32>, noisy: &NoisyImage) -> Result<Array3<f32>> {
        self.check_t(noisy.t)?;
        if x0_hat.dim() != noisy.pixels.dim() {
            return Err(Error::Argument(format!(
                "x0_to_eps shape mismatch: x0_hat {:?} vs x_t {:?}",
                x0_hat.dim(),
                noisy.pixels.dim()
            )));
        }
        let bb = self.beta_bar[noisy.t];
        if bb <= 0.0 {
            return Err(Error::Argument(
                "x0_to_eps undefined at t = 0 (state contains no noise)".into(),
            ));
        }
        let (a, inv_b) = ((1.0 - bb).sqrt(), 1.0 / bb.sqrt());
        let mut out = Array3::zeros(x0_hat.dim());
        ndarray::azip!((o in &mut out, &x0 in &x0_hat, &xt in &noisy.pixels) {
            *o = ((xt as f64 - a * x0 as f64) * inv_b) as f32;
        });
        Ok(out)
    }

    /// Convert a unit-noise prediction into the clean image it implies at
    /// the given noisy state. The map is affine except at the fully noised
    /// end (beta_bar >= 1 - 1e-12), where the state carries no information
    /// about x0: there the denominator is floored and the output clamped to
    /// [-3, 3] so the degenerate path stays finite. Keeping the normal path
    /// unclamped is what lets composed reverse processes with summed noise
    /// predictions stay exactly linear in the state.
    pub fn eps_to_x0(&self, eps_hat: ArrayView3<f32>, noisy: &NoisyImage) -> Result<Array3<f32>> {
        self.check_t(noisy.t)?;
        if eps_hat.dim() != noisy.pixels.dim() {
            return Err(Error::Argument(format!(
                "eps_to_x0 shape mismatch: eps_hat {:?} vs x_t {:?}",
                eps_hat.dim(),
                noisy.pixels.dim()
            )));
        }
        let bb = self.beta_bar[noisy.t];
        let b = bb.sqrt();
        let degenerate = bb >= 1.0 - 1e-12;
        let inv_a = 1.0 / (1.0 - bb).max(1e-12).sqrt();
        let mut out = Array3::zeros(eps_hat.dim());
        ndarray::azip!((o in &mut out, &e in &eps_hat, &xt in &noisy.pixels) {
            let x0 = (xt as f64 - b * e as f64) * inv_a;
            *o = if degenerate { x0.clamp(-3.0, 3.0) } else { x0 } as f32;
        });
        Ok(out)
    }

    /// Scalar f64 version of the forward map, for high-precision checks.
    pub fn forward_noise_scalar(&self, x0: f64, t: usize, eps: f64) -> f64 {
        let bb = self.beta_bar[t];
        (1.0 - bb).sqrt() * x0 + bb.sqrt() * eps
    }

    /// Scalar f64 version of [`Self::x0_to_eps`] (no clamp involved).
    pub fn x0_to_eps_scalar(&self, x0_hat: f64, x_t: f64, t: usize) -> f64 {
        let bb = self.beta_bar[t];
        (x_t - (1.0 - bb).sqrt() * x0_hat) / bb.sqrt()
    }

    /// Scalar f64 version of [`Self::eps_to_x0`], including the degenerate
    /// clamp path.
    pub fn eps_to_x0_scalar(&self, eps_hat: f64, x_t: f64, t: usize) -> f64 {
        let bb = self.beta_bar[t];
        let x0 = (x_t - bb.sqrt() * eps_hat) / (1.0 - bb).max(1e-12).sqrt();
        if bb >= 1.0 - 1e-12 {
            x0.clamp(-3.0, 3.0)
        } else {
            x0
        }
    }
}

/// beta_bar[t] = 1 - cos^2(((t/T + s)/(1+s)) * pi/2) / cos^2((s/(1+s)) * pi/2)
///
/// The division by the t = 0 value renormalizes the ramp so beta_bar[0] is
/// exactly zero.
fn squared_cosine_beta_bar(t_max: usize, s: f64) -> Vec<f64> {
    let norm = {
        let u0 = (s / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
        u0.cos().powi(2)
    };
    (0..=t_max)
        .map(|t| {
            let u = ((t as f64 / t_max as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
            let alpha_bar = (u.cos().powi(2) / norm).clamp(0.0, 1.0);
            1.0 - alpha_bar
        })
        .collect()
}
