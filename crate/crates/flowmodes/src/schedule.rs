//! Noise schedule and per-step ancestral coefficients.
//!
//! The cumulative signal fraction `alpha_bar(t)` runs from 1 at `t = 0` to
//! approximately 0 at `t = T`. Reverse steps use
//! `x_{t-1} = a_t x_t - b_t eps_hat + sigma_t z` with coefficients derived
//! from consecutive `alpha_bar` ratios.
//!
//! `sigma_t` is the Gaussian bridge variance for an assumed data scale:
//! `sigma_t^2 = (1 - alpha_t) * v(t-1) / v(t)` with
//! `v(t) = alpha_bar(t) * data_scale^2 + (1 - alpha_bar(t))`. A data scale of
//! 0 reproduces the common lower-variance choice and 1 the higher-variance
//! choice; the default of 0.25 matches the desk-scale priors, for which the
//! reverse chain is then exact on a single Gaussian.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("schedule needs at least 2 alpha_bar values, got {0}")]
    TooShort(usize),
    #[error("alpha_bar(0) must be 1, got {0}")]
    BadStart(f64),
    #[error("alpha_bar must be strictly decreasing, violated at index {index}")]
    NotDecreasing { index: usize },
    #[error("alpha_bar({index}) = {value} out of [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("data scale must be finite and nonnegative, got {0}")]
    BadDataScale(f64),
}

/// Floor applied to `alpha_bar` wherever it appears in a denominator.
pub const ALPHA_BAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoeffs {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bars: Vec<f64>, // index 0..=T
    data_scale: f64,
    coeffs: Vec<StepCoeffs>, // index 1..=T; [0] is unused
}

impl NoiseSchedule {
    pub const DEFAULT_STEPS: usize = 25;
    pub const DEFAULT_DATA_SCALE: f64 = 0.25;

    /// Cosine schedule `alpha_bar(t) = cos((t/T) * pi/2 * 0.995)^2` with the
    /// default assumed data scale.
    pub fn cosine(steps: usize) -> Result<Self, ScheduleError> {
        Self::cosine_with_data_scale(steps, Self::DEFAULT_DATA_SCALE)
    }

    pub fn cosine_with_data_scale(steps: usize, data_scale: f64) -> Result<Self, ScheduleError> {
        if steps == 0 {
            return Err(ScheduleError::TooShort(1));
        }
        let alpha_bars = (0..=steps)
            .map(|t| {
                let angle = (t as f64 / steps as f64) * std::f64::consts::FRAC_PI_2 * 0.995;
                angle.cos().powi(2)
            })
            .collect();
        Self::from_alpha_bars(alpha_bars, data_scale)
    }

    /// Build from explicit `alpha_bar` values, `alpha_bar(0) = 1`, strictly
    /// decreasing, within `[0, 1]`.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>, data_scale: f64) -> Result<Self, ScheduleError> {
        if alpha_bars.len() < 2 {
            return Err(ScheduleError::TooShort(alpha_bars.len()));
        }
        if !(data_scale >= 0.0) || !data_scale.is_finite() {
            return Err(ScheduleError::BadDataScale(data_scale));
        }
        if alpha_bars[0] != 1.0 {
            return Err(ScheduleError::BadStart(alpha_bars[0]));
        }
        for (i, &v) in alpha_bars.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(ScheduleError::OutOfRange { index: i, value: v });
            }
            if i > 0 && v >= alpha_bars[i - 1] {
                return Err(ScheduleError::NotDecreasing { index: i });
            }
        }

        let ds2 = data_scale * data_scale;
        let marginal_var = |ab: f64| ab * ds2 + (1.0 - ab);
        let mut coeffs = vec![StepCoeffs {
            a: 0.0,
            b: 0.0,
            sigma: 0.0,
        }];
        for t in 1..alpha_bars.len() {
            let ab = alpha_bars[t].max(ALPHA_BAR_FLOOR);
            let ab_prev = alpha_bars[t - 1].max(ALPHA_BAR_FLOOR);
            let alpha = ab / ab_prev;
            let a = 1.0 / alpha.sqrt();
            let b = (1.0 - alpha) / (alpha.sqrt() * (1.0 - alpha_bars[t]).sqrt());
            let sigma2 = (1.0 - alpha) * marginal_var(alpha_bars[t - 1]) / marginal_var(alpha_bars[t]);
            coeffs.push(StepCoeffs {
                a,
                b,
                sigma: sigma2.max(0.0).sqrt(),
            });
        }
        Ok(Self {
            alpha_bars,
            data_scale,
            coeffs,
        })
    }

    /// Number of reverse steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bars.len() - 1
    }

    pub fn data_scale(&self) -> f64 {
        self.data_scale
    }

    /// Raw `alpha_bar(t)`, `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `alpha_bar(t)` clamped below at [`ALPHA_BAR_FLOOR`].
    pub fn alpha_bar_clamped(&self, t: usize) -> f64 {
        self.alpha_bars[t].max(ALPHA_BAR_FLOOR)
    }

    /// Reverse-step coefficients for `1 <= t <= T`.
    pub fn coeffs(&self, t: usize) -> StepCoeffs {
        assert!(t >= 1 && t <= self.steps(), "step index {t} out of 1..=T");
        self.coeffs[t]
    }
}
