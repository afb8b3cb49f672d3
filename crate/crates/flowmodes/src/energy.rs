//! Guidance energies over flow fields and their exact analytic gradient.
//!
//! Four differentiable energies steer the denoising sampler:
//!
//! * camera: mean offset magnitude outside the object mask,
//! * object: soft inverse of the inside/outside mean-magnitude gap,
//! * diversity: repulsion from previously accepted motions,
//! * smoothness: offset distance between consecutive frames inside the mask.
//!
//! They combine as `E = lambda_d*E_d + lambda_c*E_c + lambda_o*E_o + lambda_s*E_s`.
//! All reductions run in a fixed order so results are run-to-run
//! deterministic.

use crate::flow::{DistanceWeights, FlowError, FlowField, ObjectMask};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("smoothness energy needs at least 2 frames, got {frames}")]
    TooFewFrames { frames: usize },
    #[error("guidance config invalid: {0}")]
    BadConfig(String),
    #[error("guidance config parse error: {0}")]
    ConfigParse(#[from] serde_json::Error),
}

/// All guidance constants.
///
/// `tau_object = 40` assumes offsets in pixels at video scale; coarse test
/// grids use smaller overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub lambda_d: f64,
    pub lambda_c: f64,
    pub lambda_o: f64,
    pub lambda_s: f64,
    pub tau_object: f64,
    pub tau_diversity: f64,
    pub e_phi: f64,
    pub diversity_weights: DistanceWeights,
    pub smoothness_weights: DistanceWeights,
    pub e_angle: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda_d: 3.0,
            lambda_c: 0.2,
            lambda_o: 0.025,
            lambda_s: 0.1,
            tau_object: 40.0,
            tau_diversity: 1.0,
            e_phi: 1e-4,
            diversity_weights: DistanceWeights::DIVERSITY,
            smoothness_weights: DistanceWeights::SMOOTHNESS,
            e_angle: 1e-6,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), EnergyError> {
        for (name, v) in [
            ("lambda_d", self.lambda_d),
            ("lambda_c", self.lambda_c),
            ("lambda_o", self.lambda_o),
            ("lambda_s", self.lambda_s),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(EnergyError::BadConfig(format!(
                    "{name} must be a finite nonnegative number, got {v}"
                )));
            }
        }
        if !(self.e_phi > 0.0) {
            return Err(EnergyError::BadConfig(format!(
                "e_phi must be positive, got {}",
                self.e_phi
            )));
        }
        if !(self.e_angle > 0.0) {
            return Err(EnergyError::BadConfig(format!(
                "e_angle must be positive, got {}",
                self.e_angle
            )));
        }
        self.diversity_weights.validate()?;
        self.smoothness_weights.validate()?;
        Ok(())
    }

    /// Parse from JSON; unknown keys are rejected.
    pub fn from_json_str(s: &str) -> Result<Self, EnergyError> {
        let cfg: GuidanceConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Overflow-safe `ln(1 + exp(z))`; linear beyond `z = 30`.
fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// Logistic sigmoid, the derivative of softplus.
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Soft inverse activation: large near `a = 0`, decaying past `tau`.
///
/// `softplus((a + e)^-1 - tau)` for `a >= 0`.
pub fn soft_inverse(a: f64, tau: f64, e: f64) -> f64 {
    softplus(1.0 / (a + e) - tau)
}

/// Derivative of [`soft_inverse`] with respect to `a`.
pub fn soft_inverse_deriv(a: f64, tau: f64, e: f64) -> f64 {
    let inv = 1.0 / (a + e);
    -sigmoid(inv - tau) * inv * inv
}

/// Distance between two offset vectors from magnitude and angle differences:
/// `w_mag * | |a| - |b| | + w_angle * (1 - cos(a, b))`, with both norms in the
/// cosine clamped below by `e_angle`.
pub fn offset_distance(a: [f64; 2], b: [f64; 2], w: DistanceWeights, e_angle: f64) -> f64 {
    let na = a[0].hypot(a[1]);
    let nb = b[0].hypot(b[1]);
    let cos = (a[0] * b[0] + a[1] * b[1]) / (na.max(e_angle) * nb.max(e_angle));
    let d = w.w_mag * (na - nb).abs() + w.w_angle * (1.0 - cos);
    d.max(0.0) // guard the rounding of cos slightly above 1
}

/// Gradients of [`offset_distance`] with respect to both arguments.
///
/// The magnitude-norm subgradient is 0 where a norm is below `e_angle`.
pub fn offset_distance_grad(
    a: [f64; 2],
    b: [f64; 2],
    w: DistanceWeights,
    e_angle: f64,
) -> ([f64; 2], [f64; 2]) {
    let na = a[0].hypot(a[1]);
    let nb = b[0].hypot(b[1]);
    let ca = na.max(e_angle);
    let cb = nb.max(e_angle);
    let dot = a[0] * b[0] + a[1] * b[1];

    let unit_a = if na >= e_angle {
        [a[0] / na, a[1] / na]
    } else {
        [0.0, 0.0]
    };
    let unit_b = if nb >= e_angle {
        [b[0] / nb, b[1] / nb]
    } else {
        [0.0, 0.0]
    };
    let sign = if na > nb {
        1.0
    } else if na < nb {
        -1.0
    } else {
        0.0
    };

    // d/da of dot/(ca*cb): quotient rule when the clamp is inactive, else the
    // denominator is a constant.
    let inv = 1.0 / (ca * cb);
    let mut ga = [b[0] * inv, b[1] * inv];
    let mut gb = [a[0] * inv, a[1] * inv];
    if na >= e_angle {
        let f = dot / (ca * ca * ca * cb);
        ga[0] -= f * a[0];
        ga[1] -= f * a[1];
    }
    if nb >= e_angle {
        let f = dot / (ca * cb * cb * cb);
        gb[0] -= f * b[0];
        gb[1] -= f * b[1];
    }

    (
        [
            w.w_mag * sign * unit_a[0] - w.w_angle * ga[0],
            w.w_mag * sign * unit_a[1] - w.w_angle * ga[1],
        ],
        [
            -w.w_mag * sign * unit_b[0] - w.w_angle * gb[0],
            -w.w_mag * sign * unit_b[1] - w.w_angle * gb[1],
        ],
    )
}

/// Static-camera energy: mean offset magnitude over frames and background
/// pixels (mask 0).
pub fn camera_energy(x: &FlowField, m: &ObjectMask) -> Result<f64, EnergyError> {
    m.check_field(x)?;
    Ok(region_mean_magnitude(x, m, false))
}

fn region_mean_magnitude(x: &FlowField, m: &ObjectMask, inside: bool) -> f64 {
    let (f, h, w) = x.shape();
    let count = if inside {
        m.inside_count()
    } else {
        m.outside_count()
    };
    let mut sum = 0.0;
    for k in 0..f {
        for i in 0..h {
            for j in 0..w {
                if m.is_inside(i, j) == inside {
                    let v = x.get(k, i, j);
                    sum += v[0].hypot(v[1]);
                }
            }
        }
    }
    sum / (f * count) as f64
}

/// Object-motion energy: soft inverse of the absolute gap between the
/// background and object mean magnitudes. The gap shrinking to zero drives
/// the energy up.
pub fn object_energy(x: &FlowField, m: &ObjectMask, cfg: &GuidanceConfig) -> Result<f64, EnergyError> {
    m.check_field(x)?;
    let outside = region_mean_magnitude(x, m, false);
    let inside = region_mean_magnitude(x, m, true);
    Ok(soft_inverse(
        (outside - inside).abs(),
        cfg.tau_object,
        cfg.e_phi,
    ))
}

/// Diversity energy: repulsion of `x` from every motion in `prior_modes`,
/// as the mask-weighted mean of the soft-inverse of per-offset distances.
pub fn diversity_energy(
    x: &FlowField,
    m: &ObjectMask,
    prior_modes: &[&FlowField],
    cfg: &GuidanceConfig,
) -> Result<f64, EnergyError> {
    m.check_field(x)?;
    let (f, h, w) = x.shape();
    let norm = (f * m.inside_count()) as f64;
    let mut total = 0.0;
    for other in prior_modes {
        x.check_shape(other)?;
        let mut sum = 0.0;
        for k in 0..f {
            for i in 0..h {
                for j in 0..w {
                    if m.is_inside(i, j) {
                        let d = offset_distance(
                            x.get(k, i, j),
                            other.get(k, i, j),
                            cfg.diversity_weights,
                            cfg.e_angle,
                        );
                        sum += soft_inverse(d, cfg.tau_diversity, cfg.e_phi);
                    }
                }
            }
        }
        total += sum / norm;
    }
    Ok(total)
}

/// Smoothness energy: mask-weighted mean offset distance between consecutive
/// frames; needs at least two frames.
pub fn smoothness_energy(
    x: &FlowField,
    m: &ObjectMask,
    cfg: &GuidanceConfig,
) -> Result<f64, EnergyError> {
    m.check_field(x)?;
    let (f, h, w) = x.shape();
    if f < 2 {
        return Err(EnergyError::TooFewFrames { frames: f });
    }
    let norm = ((f - 1) * m.inside_count()) as f64;
    let mut sum = 0.0;
    for k in 0..f - 1 {
        for i in 0..h {
            for j in 0..w {
                if m.is_inside(i, j) {
                    sum += offset_distance(
                        x.get(k, i, j),
                        x.get(k + 1, i, j),
                        cfg.smoothness_weights,
                        cfg.e_angle,
                    );
                }
            }
        }
    }
    Ok(sum / norm)
}

/// The four energy values of one motion plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub camera: f64,
    pub object: f64,
    pub diversity: f64,
    pub smoothness: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    /// Name of the first non-finite component, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        for (name, v) in [
            ("camera", self.camera),
            ("object", self.object),
            ("diversity", self.diversity),
            ("smoothness", self.smoothness),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Some(name);
            }
        }
        None
    }
}

/// All four energies plus the lambda-weighted total.
///
/// Smoothness is skipped (reported as 0) for single-frame fields when
/// `lambda_s == 0`; with `lambda_s > 0` a single-frame field is an error.
pub fn combined_energy_parts(
    x: &FlowField,
    m: &ObjectMask,
    prior_modes: &[&FlowField],
    cfg: &GuidanceConfig,
) -> Result<EnergyBreakdown, EnergyError> {
    let camera = camera_energy(x, m)?;
    let object = object_energy(x, m, cfg)?;
    let diversity = diversity_energy(x, m, prior_modes, cfg)?;
    let smoothness = if x.frames() >= 2 {
        smoothness_energy(x, m, cfg)?
    } else if cfg.lambda_s == 0.0 {
        0.0
    } else {
        return Err(EnergyError::TooFewFrames { frames: x.frames() });
    };
    let total = cfg.lambda_d * diversity
        + cfg.lambda_c * camera
        + cfg.lambda_o * object
        + cfg.lambda_s * smoothness;
    Ok(EnergyBreakdown {
        camera,
        object,
        diversity,
        smoothness,
        total,
    })
}

/// The combined guidance energy `E`.
pub fn combined_energy(
    x: &FlowField,
    m: &ObjectMask,
    prior_modes: &[&FlowField],
    cfg: &GuidanceConfig,
) -> Result<f64, EnergyError> {
    Ok(combined_energy_parts(x, m, prior_modes, cfg)?.total)
}

/// Exact analytic gradient of [`combined_energy`] with respect to every
/// offset entry of `x`.
pub fn combined_energy_gradient(
    x: &FlowField,
    m: &ObjectMask,
    prior_modes: &[&FlowField],
    cfg: &GuidanceConfig,
) -> Result<FlowField, EnergyError> {
    m.check_field(x)?;
    let (f, h, w) = x.shape();
    let mut grad = FlowField::zeros(f, h, w).expect("same nonzero shape");

    let n_bg = (f * m.outside_count()) as f64;
    let n_obj = (f * m.inside_count()) as f64;

    // Object energy chain: E_o = phi(|gap|), gap = mean_out - mean_in.
    let d_obj = if cfg.lambda_o > 0.0 {
        let outside = region_mean_magnitude(x, m, false);
        let inside = region_mean_magnitude(x, m, true);
        let gap = outside - inside;
        let sign = if gap > 0.0 {
            1.0
        } else if gap < 0.0 {
            -1.0
        } else {
            0.0
        };
        soft_inverse_deriv(gap.abs(), cfg.tau_object, cfg.e_phi) * sign
    } else {
        0.0
    };

    for k in 0..f {
        for i in 0..h {
            for j in 0..w {
                let v = x.get(k, i, j);
                let nrm = v[0].hypot(v[1]);
                let unit = if nrm >= cfg.e_angle {
                    [v[0] / nrm, v[1] / nrm]
                } else {
                    [0.0, 0.0]
                };
                // Camera and object terms act through the region-mean
                // magnitudes; each entry contributes unit(v)/N to its
                // region's mean.
                let coef = if m.is_inside(i, j) {
                    -cfg.lambda_o * d_obj / n_obj
                } else {
                    (cfg.lambda_c + cfg.lambda_o * d_obj) / n_bg
                };
                if coef != 0.0 {
                    let g = grad.get(k, i, j);
                    grad.set(k, i, j, [g[0] + coef * unit[0], g[1] + coef * unit[1]]);
                }
            }
        }
    }

    if cfg.lambda_d > 0.0 && !prior_modes.is_empty() {
        let scale = cfg.lambda_d / (f * m.inside_count()) as f64;
        for other in prior_modes {
            x.check_shape(other)?;
            for k in 0..f {
                for i in 0..h {
                    for j in 0..w {
                        if m.is_inside(i, j) {
                            let a = x.get(k, i, j);
                            let b = other.get(k, i, j);
                            let d = offset_distance(a, b, cfg.diversity_weights, cfg.e_angle);
                            let dphi = soft_inverse_deriv(d, cfg.tau_diversity, cfg.e_phi);
                            let (ga, _) =
                                offset_distance_grad(a, b, cfg.diversity_weights, cfg.e_angle);
                            let g = grad.get(k, i, j);
                            grad.set(
                                k,
                                i,
                                j,
                                [
                                    g[0] + scale * dphi * ga[0],
                                    g[1] + scale * dphi * ga[1],
                                ],
                            );
                        }
                    }
                }
            }
        }
    }

    if cfg.lambda_s > 0.0 {
        if f < 2 {
            return Err(EnergyError::TooFewFrames { frames: f });
        }
        let scale = cfg.lambda_s / ((f - 1) * m.inside_count()) as f64;
        for k in 0..f - 1 {
            for i in 0..h {
                for j in 0..w {
                    if m.is_inside(i, j) {
                        let a = x.get(k, i, j);
                        let b = x.get(k + 1, i, j);
                        let (ga, gb) =
                            offset_distance_grad(a, b, cfg.smoothness_weights, cfg.e_angle);
                        let g0 = grad.get(k, i, j);
                        grad.set(k, i, j, [g0[0] + scale * ga[0], g0[1] + scale * ga[1]]);
                        let g1 = grad.get(k + 1, i, j);
                        grad.set(
                            k + 1,
                            i,
                            j,
                            [g1[0] + scale * gb[0], g1[1] + scale * gb[1]],
                        );
                    }
                }
            }
        }
    }

    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array2;

    fn uniform_field(f: usize, h: usize, w: usize, v: [f64; 2]) -> FlowField {
        let mut x = FlowField::zeros(f, h, w).unwrap();
        for k in 0..f {
            for i in 0..h {
                for j in 0..w {
                    x.set(k, i, j, v);
                }
            }
        }
        x
    }

    fn half_mask(h: usize, w: usize) -> ObjectMask {
        // left half inside, right half outside
        let mut m = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w / 2 {
                m[[i, j]] = 1;
            }
        }
        ObjectMask::from_array(m).unwrap()
    }

    #[test]
    fn soft_inverse_reference_values() {
        // Frozen from a high-precision evaluation of softplus((a+e)^-1 - tau).
        assert_relative_eq!(soft_inverse(0.0, 1.0, 1e-4), 9999.0, max_relative = 1e-12);
        assert_relative_eq!(
            soft_inverse(1e12, 1.0, 1e-4),
            0.3132616875182228,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            soft_inverse(1.0, 1.0, 1e-4),
            0.6930971868091954,
            max_relative = 1e-12
        );
        assert_relative_eq!(soft_inverse(0.0, 40.0, 1e-4), 9960.0, max_relative = 1e-12);
        assert_relative_eq!(
            soft_inverse(40.0, 40.0, 1e-4),
            4.355901583051589e-18,
            max_relative = 1e-9
        );
    }

    #[test]
    fn offset_distance_reference_values() {
        let w = DistanceWeights::DIVERSITY;
        assert_eq!(offset_distance([1.0, 0.0], [1.0, 0.0], w, 1e-6), 0.0);
        assert_relative_eq!(
            offset_distance([1.0, 0.0], [0.0, 1.0], w, 1e-6),
            0.75,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            offset_distance([2.0, 0.0], [1.0, 0.0], w, 1e-6),
            0.25,
            max_relative = 1e-12
        );
        // Guarded cosine term evaluates to 0 for a zero vector.
        assert_relative_eq!(
            offset_distance([0.0, 0.0], [1.0, 0.0], w, 1e-6),
            1.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn camera_energy_values() {
        let m = half_mask(4, 4);
        let zero = FlowField::zeros(2, 4, 4).unwrap();
        assert_eq!(camera_energy(&zero, &m).unwrap(), 0.0);

        let uni = uniform_field(2, 4, 4, [3.0, 4.0]);
        assert_relative_eq!(camera_energy(&uni, &m).unwrap(), 5.0, max_relative = 1e-12);

        // only background pixels enter
        let mut split = FlowField::zeros(2, 4, 4).unwrap();
        for k in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    if !m.is_inside(i, j) {
                        split.set(k, i, j, [3.0, 4.0]);
                    }
                }
            }
        }
        assert_relative_eq!(
            camera_energy(&split, &m).unwrap(),
            5.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn object_energy_values() {
        let m = half_mask(4, 4);
        let cfg = GuidanceConfig::default();

        // equal means inside and outside: gap 0
        let uni = uniform_field(2, 4, 4, [3.0, 4.0]);
        assert_relative_eq!(
            object_energy(&uni, &m, &cfg).unwrap(),
            9960.0,
            max_relative = 1e-12
        );
        let zero = FlowField::zeros(2, 4, 4).unwrap();
        assert_relative_eq!(
            object_energy(&zero, &m, &cfg).unwrap(),
            9960.0,
            max_relative = 1e-12
        );

        // gap of exactly tau_object = 40: effectively zero energy
        let mut gap = FlowField::zeros(2, 4, 4).unwrap();
        for k in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    if m.is_inside(i, j) {
                        gap.set(k, i, j, [40.0, 0.0]);
                    }
                }
            }
        }
        let e = object_energy(&gap, &m, &cfg).unwrap();
        assert_relative_eq!(e, 4.355901583051589e-18, max_relative = 1e-9);
    }

    #[test]
    fn diversity_energy_values() {
        let m = half_mask(4, 4);
        let cfg = GuidanceConfig::default();
        let x = uniform_field(2, 4, 4, [1.0, 0.0]);

        assert_eq!(diversity_energy(&x, &m, &[], &cfg).unwrap(), 0.0);

        // self-repulsion: every masked distance is 0
        assert_relative_eq!(
            diversity_energy(&x, &m, &[&x], &cfg).unwrap(),
            9999.0,
            max_relative = 1e-12
        );

        // orthogonal uniform mode: d = 0.75 everywhere inside the mask.
        // Frozen from a high-precision evaluation of softplus(1/0.7501 - 1).
        let y = uniform_field(2, 4, 4, [0.0, 1.0]);
        assert_relative_eq!(
            diversity_energy(&x, &m, &[&y], &cfg).unwrap(),
            0.8735353576351596,
            max_relative = 1e-12
        );
    }

    #[test]
    fn smoothness_energy_values() {
        let m = half_mask(4, 4);
        let cfg = GuidanceConfig::default();

        // time-constant nonzero flow: consecutive frames identical
        let x = uniform_field(3, 4, 4, [2.0, 1.0]);
        assert_eq!(smoothness_energy(&x, &m, &cfg).unwrap(), 0.0);

        // magnitude doubling from 1 over F=2, fixed direction
        let mut x = FlowField::zeros(2, 4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                x.set(0, i, j, [1.0, 0.0]);
                x.set(1, i, j, [2.0, 0.0]);
            }
        }
        assert_relative_eq!(
            smoothness_energy(&x, &m, &cfg).unwrap(),
            0.75,
            max_relative = 1e-12
        );

        // 90-degree direction change at unit magnitude
        let mut x = FlowField::zeros(2, 4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                x.set(0, i, j, [1.0, 0.0]);
                x.set(1, i, j, [0.0, 1.0]);
            }
        }
        assert_relative_eq!(
            smoothness_energy(&x, &m, &cfg).unwrap(),
            0.25,
            max_relative = 1e-12
        );

        let single = FlowField::zeros(1, 4, 4).unwrap();
        assert!(matches!(
            smoothness_energy(&single, &m, &cfg),
            Err(EnergyError::TooFewFrames { frames: 1 })
        ));
    }

    #[test]
    fn combined_energy_values() {
        let m = half_mask(4, 4);

        // all lambdas zero
        let mut cfg = GuidanceConfig::default();
        cfg.lambda_d = 0.0;
        cfg.lambda_c = 0.0;
        cfg.lambda_o = 0.0;
        cfg.lambda_s = 0.0;
        let x = uniform_field(2, 4, 4, [0.3, -0.7]);
        assert_eq!(combined_energy(&x, &m, &[], &cfg).unwrap(), 0.0);

        // zero flow, empty set, defaults: composed from component values.
        // The smoothness term is not zero: for zero vectors the guarded
        // cosine evaluates to 0, so d(0, 0) = w_angle = 0.25.
        let cfg = GuidanceConfig::default();
        let zero = FlowField::zeros(2, 4, 4).unwrap();
        let parts = combined_energy_parts(&zero, &m, &[], &cfg).unwrap();
        assert_eq!(parts.camera, 0.0);
        assert_eq!(parts.diversity, 0.0);
        assert_relative_eq!(parts.object, 9960.0, max_relative = 1e-12);
        assert_relative_eq!(parts.smoothness, 0.25, max_relative = 1e-12);
        assert_relative_eq!(parts.total, 249.025, max_relative = 1e-12);
        assert!((parts.total - 249.0).abs() < 0.1);

        // camera-only config reduces to the camera energy
        let mut cfg = GuidanceConfig::default();
        cfg.lambda_d = 0.0;
        cfg.lambda_c = 1.0;
        cfg.lambda_o = 0.0;
        cfg.lambda_s = 0.0;
        let uni = uniform_field(2, 4, 4, [3.0, 4.0]);
        assert_relative_eq!(
            combined_energy(&uni, &m, &[], &cfg).unwrap(),
            5.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn additivity_of_combined_energy() {
        let m = half_mask(6, 6);
        let cfg = GuidanceConfig {
            tau_object: 4.0,
            ..GuidanceConfig::default()
        };
        let mut x = FlowField::zeros(3, 6, 6).unwrap();
        let mut other = FlowField::zeros(3, 6, 6).unwrap();
        for (idx, v) in x.as_slice_mut().iter_mut().enumerate() {
            *v = ((idx * 37 + 11) % 101) as f64 / 25.0 - 2.0;
        }
        for (idx, v) in other.as_slice_mut().iter_mut().enumerate() {
            *v = ((idx * 53 + 29) % 97) as f64 / 20.0 - 2.4;
        }
        let modes = [&other];
        let total = combined_energy(&x, &m, &modes, &cfg).unwrap();
        let sum = cfg.lambda_d * diversity_energy(&x, &m, &modes, &cfg).unwrap()
            + cfg.lambda_c * camera_energy(&x, &m).unwrap()
            + cfg.lambda_o * object_energy(&x, &m, &cfg).unwrap()
            + cfg.lambda_s * smoothness_energy(&x, &m, &cfg).unwrap();
        assert_eq!(total, sum);
    }

    #[test]
    fn camera_gradient_matches_hand_derivation() {
        // E_c-only gradient at a background pixel with offset (3,4) is
        // (3/5, 4/5) / N_bg, N_bg = background pixel count * frames.
        let m = half_mask(4, 4);
        let mut cfg = GuidanceConfig::default();
        cfg.lambda_d = 0.0;
        cfg.lambda_c = 1.0;
        cfg.lambda_o = 0.0;
        cfg.lambda_s = 0.0;
        let mut x = FlowField::zeros(2, 4, 4).unwrap();
        x.set(1, 0, 3, [3.0, 4.0]); // background pixel
        let g = combined_energy_gradient(&x, &m, &[], &cfg).unwrap();
        let n_bg = (2 * m.outside_count()) as f64;
        let got = g.get(1, 0, 3);
        assert_relative_eq!(got[0], 0.6 / n_bg, max_relative = 1e-12);
        assert_relative_eq!(got[1], 0.8 / n_bg, max_relative = 1e-12);
        // inside-mask pixels receive nothing from the camera term
        assert_eq!(g.get(1, 0, 0), [0.0, 0.0]);
    }

    #[test]
    fn zero_lambdas_give_zero_gradient() {
        let m = half_mask(4, 4);
        let cfg = GuidanceConfig {
            lambda_d: 0.0,
            lambda_c: 0.0,
            lambda_o: 0.0,
            lambda_s: 0.0,
            ..GuidanceConfig::default()
        };
        let x = uniform_field(3, 4, 4, [1.5, -0.5]);
        let g = combined_energy_gradient(&x, &m, &[&x], &cfg).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_json_round_trip_and_unknown_keys() {
        let cfg = GuidanceConfig::default();
        let s = cfg.to_json_string();
        let back = GuidanceConfig::from_json_str(&s).unwrap();
        assert_eq!(cfg, back);

        let bad = r#"{"lambda_d": 1.0, "mystery": 2}"#;
        assert!(GuidanceConfig::from_json_str(bad).is_err());

        let invalid = s.replace("\"e_phi\": 0.0001", "\"e_phi\": 0.0");
        assert!(GuidanceConfig::from_json_str(&invalid).is_err());
    }
}
