//! Core flow-field and mask types.
//!
//! A motion is a time-dependent 2D vector field: for every frame and pixel it
//! stores the offset `(dx, dy)` of that pixel from its position in frame 0,
//! in pixels. A binary mask selects the object of interest.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("flow dimensions must all be at least 1, got {frames}x{height}x{width}")]
    EmptyShape {
        frames: usize,
        height: usize,
        width: usize,
    },
    #[error("flow data contains a non-finite entry at frame {frame}, pixel ({row}, {col})")]
    NonFinite {
        frame: usize,
        row: usize,
        col: usize,
    },
    #[error("mask must contain at least one inside and one outside pixel")]
    DegenerateMask,
    #[error("mask entries must be 0 or 1, got {value} at ({row}, {col})")]
    BadMaskValue { value: u8, row: usize, col: usize },
    #[error("shape mismatch: expected {expected:?}, got {found:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("distance weights must be nonnegative and sum to 1, got ({w_mag}, {w_angle})")]
    BadWeights { w_mag: f64, w_angle: f64 },
}

/// A motion: per-frame, per-pixel 2D offsets from frame 0.
///
/// Offsets are cumulative displacements from each pixel's initial position,
/// not frame-to-frame deltas. Values are kept in `f64` internally; the file
/// format stores `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    data: Array4<f64>, // [frame][row][col][dx, dy]
}

impl FlowField {
    /// All-zero field with the given shape.
    pub fn zeros(frames: usize, height: usize, width: usize) -> Result<Self, FlowError> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(FlowError::EmptyShape {
                frames,
                height,
                width,
            });
        }
        Ok(Self {
            data: Array4::zeros((frames, height, width, 2)),
        })
    }

    pub fn from_array(data: Array4<f64>) -> Result<Self, FlowError> {
        let (f, h, w, c) = data.dim();
        if f == 0 || h == 0 || w == 0 || c != 2 {
            return Err(FlowError::EmptyShape {
                frames: f,
                height: h,
                width: w,
            });
        }
        for ((k, i, j, _), v) in data.indexed_iter() {
            if !v.is_finite() {
                return Err(FlowError::NonFinite {
                    frame: k,
                    row: i,
                    col: j,
                });
            }
        }
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// `(frames, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let (f, h, w, _) = self.data.dim();
        (f, h, w)
    }

    pub fn same_shape(&self, other: &FlowField) -> bool {
        self.shape() == other.shape()
    }

    /// Offset vector `(dx, dy)` at frame `k`, pixel `(row, col)`.
    #[inline]
    pub fn get(&self, k: usize, row: usize, col: usize) -> [f64; 2] {
        [self.data[[k, row, col, 0]], self.data[[k, row, col, 1]]]
    }

    #[inline]
    pub fn set(&mut self, k: usize, row: usize, col: usize, v: [f64; 2]) {
        self.data[[k, row, col, 0]] = v[0];
        self.data[[k, row, col, 1]] = v[1];
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array4<f64> {
        &mut self.data
    }

    /// Flattened view in `[frame][row][col][dx, dy]` order.
    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("flow data is standard layout")
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        self.data
            .as_slice_mut()
            .expect("flow data is standard layout")
    }

    /// Total number of scalar entries, `F*H*W*2`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // shape dimensions are all >= 1 by construction
    }

    pub fn euclidean_norm(&self) -> f64 {
        self.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> FlowField {
        FlowField {
            data: &self.data * c,
        }
    }

    /// Entry-wise `self + c * other`; shapes must match.
    pub fn add_scaled(&self, other: &FlowField, c: f64) -> Result<FlowField, FlowError> {
        self.check_shape(other)?;
        Ok(FlowField {
            data: &self.data + &(&other.data * c),
        })
    }

    pub fn check_shape(&self, other: &FlowField) -> Result<(), FlowError> {
        if !self.same_shape(other) {
            return Err(FlowError::ShapeMismatch {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        Ok(())
    }
}

/// Binary object mask; 1 inside the object region, 0 outside.
///
/// Construction rejects masks without at least one inside and one outside
/// pixel, so both region means are always well defined.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMask {
    data: Array2<u8>,
    inside: usize,
}

impl ObjectMask {
    pub fn from_array(data: Array2<u8>) -> Result<Self, FlowError> {
        let mut inside = 0usize;
        for ((i, j), &v) in data.indexed_iter() {
            match v {
                0 => {}
                1 => inside += 1,
                _ => return Err(FlowError::BadMaskValue { value: v, row: i, col: j }),
            }
        }
        if inside == 0 || inside == data.len() {
            return Err(FlowError::DegenerateMask);
        }
        Ok(Self { data, inside })
    }

    /// Disk of the given radius centered at `(row, col)`; a pixel is inside
    /// if its center is within the radius.
    pub fn disk(
        height: usize,
        width: usize,
        center: [f64; 2],
        radius: f64,
    ) -> Result<Self, FlowError> {
        let mut m = Array2::zeros((height, width));
        for i in 0..height {
            for j in 0..width {
                let dr = i as f64 - center[0];
                let dc = j as f64 - center[1];
                if (dr * dr + dc * dc).sqrt() <= radius {
                    m[[i, j]] = 1;
                }
            }
        }
        Self::from_array(m)
    }

    /// Axis-aligned rectangle `[top, top+rect_height) x [left, left+rect_width)`.
    pub fn rect(
        height: usize,
        width: usize,
        top: usize,
        left: usize,
        rect_height: usize,
        rect_width: usize,
    ) -> Result<Self, FlowError> {
        let mut m = Array2::zeros((height, width));
        for i in top..(top + rect_height).min(height) {
            for j in left..(left + rect_width).min(width) {
                m[[i, j]] = 1;
            }
        }
        Self::from_array(m)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    #[inline]
    pub fn is_inside(&self, row: usize, col: usize) -> bool {
        self.data[[row, col]] == 1
    }

    pub fn inside_count(&self) -> usize {
        self.inside
    }

    pub fn outside_count(&self) -> usize {
        self.data.len() - self.inside
    }

    /// Mask with inside and outside swapped.
    pub fn complement(&self) -> ObjectMask {
        let data = self.data.mapv(|v| 1 - v);
        ObjectMask {
            inside: data.len() - self.inside,
            data,
        }
    }

    /// Centroid of the inside pixels, `(row, col)`.
    pub fn centroid(&self) -> [f64; 2] {
        let mut r = 0.0;
        let mut c = 0.0;
        for ((i, j), &v) in self.data.indexed_iter() {
            if v == 1 {
                r += i as f64;
                c += j as f64;
            }
        }
        [r / self.inside as f64, c / self.inside as f64]
    }

    /// Bounding box of the inside pixels: `(min_row, min_col, max_row, max_col)`, inclusive.
    pub fn bounding_box(&self) -> (usize, usize, usize, usize) {
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        for ((i, j), &v) in self.data.indexed_iter() {
            if v == 1 {
                r0 = r0.min(i);
                c0 = c0.min(j);
                r1 = r1.max(i);
                c1 = c1.max(j);
            }
        }
        (r0, c0, r1, c1)
    }

    pub fn matches_field(&self, field: &FlowField) -> bool {
        self.height() == field.height() && self.width() == field.width()
    }

    pub fn check_field(&self, field: &FlowField) -> Result<(), FlowError> {
        if !self.matches_field(field) {
            return Err(FlowError::ShapeMismatch {
                expected: (field.frames(), self.height(), self.width()),
                found: field.shape(),
            });
        }
        Ok(())
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }
}

/// Weights of the magnitude and angle terms in the offset distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceWeights {
    pub w_mag: f64,
    pub w_angle: f64,
}

impl DistanceWeights {
    /// Direction-heavy weighting used by the diversity energy.
    pub const DIVERSITY: DistanceWeights = DistanceWeights {
        w_mag: 0.25,
        w_angle: 0.75,
    };
    /// Magnitude-heavy weighting used by the smoothness energy.
    pub const SMOOTHNESS: DistanceWeights = DistanceWeights {
        w_mag: 0.75,
        w_angle: 0.25,
    };

    pub fn new(w_mag: f64, w_angle: f64) -> Result<Self, FlowError> {
        let w = DistanceWeights { w_mag, w_angle };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.w_mag < 0.0 || self.w_angle < 0.0 || (self.w_mag + self.w_angle - 1.0).abs() > 1e-12
        {
            return Err(FlowError::BadWeights {
                w_mag: self.w_mag,
                w_angle: self.w_angle,
            });
        }
        Ok(())
    }
}
