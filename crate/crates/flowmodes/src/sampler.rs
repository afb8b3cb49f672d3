//! Forward noising, clean-sample prediction, and the reverse sampling loop
//! with optional energy guidance.
//!
//! The guided step follows the energy downhill in predicted-clean-sample
//! space: `x_t' = x_t - gamma * grad E(x0_pred(x_t))`, then takes the usual
//! ancestral step with the denoiser re-evaluated at `x_t'` while the step
//! mean keeps the original `x_t`.

use crate::energy::{
    combined_energy_gradient, combined_energy_parts, EnergyBreakdown, EnergyError, GuidanceConfig,
};
use crate::flow::{FlowError, FlowField, ObjectMask};
use crate::schedule::NoiseSchedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error("step index {t} outside 1..={steps}")]
    BadStep { t: usize, steps: usize },
    #[error("non-finite gradient from energy term `{term}` at step {t}")]
    NonFiniteGradient { term: &'static str, t: usize },
    #[error("sampler config invalid: {0}")]
    BadConfig(String),
}

/// An evaluable denoiser: noise prediction plus a vector-Jacobian product
/// for chaining guidance gradients through the prediction.
pub trait Denoiser {
    /// Predicted noise component of `x_t` at level `t`.
    fn predict_eps(&self, x_t: &FlowField, t: usize) -> FlowField;

    /// `J^T u` where `J` is the Jacobian of [`Denoiser::predict_eps`] with
    /// respect to `x_t` and `u` the cotangent.
    fn vjp(&self, x_t: &FlowField, t: usize, cotangent: &FlowField) -> FlowField;

    /// Field shape this denoiser operates on, `(frames, height, width)`.
    fn shape(&self) -> (usize, usize, usize);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidedSamplerConfig {
    /// How many of the earliest (highest-noise) reverse steps are guided.
    pub guided_steps: usize,
    pub guidance_scale: f64,
    /// Chain the guidance gradient through the denoiser via its VJP; when
    /// false the denoiser is treated as detached.
    pub through_denoiser: bool,
    pub seed: u64,
}

impl Default for GuidedSamplerConfig {
    fn default() -> Self {
        Self {
            guided_steps: 20,
            guidance_scale: 1.0,
            through_denoiser: true,
            seed: 0,
        }
    }
}

impl GuidedSamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<(), SamplerError> {
        if self.guided_steps > schedule.steps() {
            return Err(SamplerError::BadConfig(format!(
                "guided_steps {} exceeds schedule steps {}",
                self.guided_steps,
                schedule.steps()
            )));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(SamplerError::BadConfig(format!(
                "guidance_scale must be finite and nonnegative, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// Forward noising: `sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps`.
pub fn add_noise(
    x0: &FlowField,
    t: usize,
    eps: &FlowField,
    schedule: &NoiseSchedule,
) -> Result<FlowField, SamplerError> {
    x0.check_shape(eps)?;
    if t > schedule.steps() {
        return Err(SamplerError::BadStep {
            t,
            steps: schedule.steps(),
        });
    }
    let ab = schedule.alpha_bar(t);
    Ok(x0.scaled(ab.sqrt()).add_scaled(eps, (1.0 - ab).sqrt())?)
}

/// Clean-sample prediction `(x_t - sqrt(1 - alpha_bar) * eps_hat) / sqrt(alpha_bar)`,
/// with `alpha_bar` clamped away from zero.
pub fn predict_x0(
    x_t: &FlowField,
    t: usize,
    eps_hat: &FlowField,
    schedule: &NoiseSchedule,
) -> Result<FlowField, SamplerError> {
    x_t.check_shape(eps_hat)?;
    if t > schedule.steps() {
        return Err(SamplerError::BadStep {
            t,
            steps: schedule.steps(),
        });
    }
    let ab = schedule.alpha_bar_clamped(t);
    Ok(x_t
        .add_scaled(eps_hat, -(1.0 - schedule.alpha_bar(t)).sqrt())?
        .scaled(1.0 / ab.sqrt()))
}

/// One unguided reverse step `a_t x_t - b_t eps_hat + sigma_t z`.
pub fn reverse_step(
    x_t: &FlowField,
    t: usize,
    eps_hat: &FlowField,
    schedule: &NoiseSchedule,
    z: &FlowField,
) -> Result<FlowField, SamplerError> {
    x_t.check_shape(eps_hat)?;
    x_t.check_shape(z)?;
    if t < 1 || t > schedule.steps() {
        return Err(SamplerError::BadStep {
            t,
            steps: schedule.steps(),
        });
    }
    let c = schedule.coeffs(t);
    Ok(x_t
        .scaled(c.a)
        .add_scaled(eps_hat, -c.b)?
        .add_scaled(z, c.sigma)?)
}

/// Telemetry for one guided step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub camera: f64,
    pub object: f64,
    pub diversity: f64,
    pub smoothness: f64,
    pub energy: f64,
    pub grad_norm: f64,
    pub gamma: f64,
}

/// One guided reverse step; returns the next state and the step telemetry.
#[allow(clippy::too_many_arguments)]
pub fn guided_step(
    x_t: &FlowField,
    t: usize,
    denoiser: &dyn Denoiser,
    mask: &ObjectMask,
    prior_modes: &[&FlowField],
    cfg: &GuidanceConfig,
    gcfg: &GuidedSamplerConfig,
    schedule: &NoiseSchedule,
    z: &FlowField,
) -> Result<(FlowField, StepRecord), SamplerError> {
    if t < 1 || t > schedule.steps() {
        return Err(SamplerError::BadStep {
            t,
            steps: schedule.steps(),
        });
    }
    let eps_hat = denoiser.predict_eps(x_t, t);
    let x0_hat = predict_x0(x_t, t, &eps_hat, schedule)?;

    let parts = combined_energy_parts(&x0_hat, mask, prior_modes, cfg)?;
    if let Some(term) = parts.non_finite_term() {
        return Err(SamplerError::NonFiniteGradient { term, t });
    }
    let grad_x0 = combined_energy_gradient(&x0_hat, mask, prior_modes, cfg)?;

    // Chain rule through x0_pred: d x0 / d x_t = (I - sqrt(1-ab) * J_eps) / sqrt(ab).
    let ab = schedule.alpha_bar_clamped(t);
    let grad_xt = if gcfg.through_denoiser {
        let jt = denoiser.vjp(x_t, t, &grad_x0);
        grad_x0
            .add_scaled(&jt, -(1.0 - schedule.alpha_bar(t)).sqrt())?
            .scaled(1.0 / ab.sqrt())
    } else {
        grad_x0.scaled(1.0 / ab.sqrt())
    };
    if grad_xt.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(SamplerError::NonFiniteGradient { term: "combined", t });
    }

    // Norm clipping keeps the soft-inverse blowup near duplicates bounded.
    let grad_norm = grad_xt.euclidean_norm();
    let clip = 10.0 * (grad_xt.len() as f64).sqrt();
    let grad_used = if grad_norm > clip {
        grad_xt.scaled(clip / grad_norm)
    } else {
        grad_xt
    };

    let x_prime = x_t.add_scaled(&grad_used, -gcfg.guidance_scale)?;
    let eps_prime = denoiser.predict_eps(&x_prime, t);

    // Step mean keeps the original x_t; only the denoiser sees x_t'.
    let c = schedule.coeffs(t);
    let next = x_t
        .scaled(c.a)
        .add_scaled(&eps_prime, -c.b)?
        .add_scaled(z, c.sigma)?;
    let record = StepRecord {
        t,
        camera: parts.camera,
        object: parts.object,
        diversity: parts.diversity,
        smoothness: parts.smoothness,
        energy: parts.total,
        grad_norm,
        gamma: gcfg.guidance_scale,
    };
    Ok((next, record))
}

/// Output of one full reverse trajectory.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub field: FlowField,
    pub final_energy: f64,
    pub final_parts: EnergyBreakdown,
    pub telemetry: Vec<StepRecord>,
}

/// Draw a standard-normal field with the given shape.
pub fn normal_field(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> FlowField {
    let mut f = FlowField::zeros(shape.0, shape.1, shape.2).expect("nonzero shape");
    for v in f.as_slice_mut() {
        *v = rng.sample(StandardNormal);
    }
    f
}

/// Run the full reverse loop from `x_T ~ N(0, I)` to `x_0`.
///
/// Guidance applies to the first `guided_steps` reverse steps (the largest
/// `t` values). Deterministic in `gcfg.seed`.
pub fn sample(
    denoiser: &dyn Denoiser,
    mask: &ObjectMask,
    prior_modes: &[&FlowField],
    cfg: &GuidanceConfig,
    gcfg: &GuidedSamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<SampleOutput, SamplerError> {
    gcfg.validate(schedule)?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(gcfg.seed);
    let x_start = normal_field(&mut rng, denoiser.shape());
    sample_from_noise(denoiser, mask, prior_modes, cfg, gcfg, schedule, x_start, &mut rng)
}

/// Reverse loop from a caller-provided starting noise; `rng` supplies the
/// per-step injection noise.
#[allow(clippy::too_many_arguments)]
pub fn sample_from_noise(
    denoiser: &dyn Denoiser,
    mask: &ObjectMask,
    prior_modes: &[&FlowField],
    cfg: &GuidanceConfig,
    gcfg: &GuidedSamplerConfig,
    schedule: &NoiseSchedule,
    x_start: FlowField,
    rng: &mut ChaCha8Rng,
) -> Result<SampleOutput, SamplerError> {
    let steps = schedule.steps();
    let mut x = x_start;
    let mut telemetry = Vec::new();
    for (step_index, t) in (1..=steps).rev().enumerate() {
        let z = normal_field(rng, x.shape());
        if step_index < gcfg.guided_steps {
            let (next, record) =
                guided_step(&x, t, denoiser, mask, prior_modes, cfg, gcfg, schedule, &z)?;
            telemetry.push(record);
            x = next;
        } else {
            let eps_hat = denoiser.predict_eps(&x, t);
            x = reverse_step(&x, t, &eps_hat, schedule, &z)?;
        }
    }
    let final_parts = combined_energy_parts(&x, mask, prior_modes, cfg)?;
    Ok(SampleOutput {
        final_energy: final_parts.total,
        final_parts,
        telemetry,
        field: x,
    })
}

/// Serialize telemetry as JSON lines, one record per guided step.
pub fn telemetry_to_jsonl(records: &[StepRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("telemetry serializes"));
        out.push('\n');
    }
    out
}
