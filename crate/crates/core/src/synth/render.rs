//! Orthographic projection descriptors standing in for rendered views.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A ring of cameras evenly spaced in azimuth at a common elevation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub azimuths: Vec<f64>,
    pub elevation: f64,
    pub resolution: usize,
}

impl CameraRig {
    pub fn ring(view_count: usize, elevation: f64, resolution: usize) -> Result<Self> {
        if view_count == 0 {
            return Err(Error::Input("camera rig needs at least one view".into()));
        }
        if resolution < 4 {
            return Err(Error::Input(format!("descriptor resolution must be ≥ 4, got {resolution}")));
        }
        let step = 360.0 / view_count as f64;
        Ok(CameraRig { azimuths: (0..view_count).map(|i| i as f64 * step).collect(), elevation, resolution })
    }

    pub fn view_count(&self) -> usize {
        self.azimuths.len()
    }

    pub fn descriptor_len(&self) -> usize {
        descriptor_len(self.resolution)
    }

    /// Renders all views of `points` into a `V × 3R²` matrix.
    pub fn render(&self, points: &Tensor) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.view_count() * self.descriptor_len());
        for &az in &self.azimuths {
            data.extend(render_view_descriptor(points, az, self.elevation, self.resolution)?);
        }
        Tensor::new(vec![self.view_count(), self.descriptor_len()], data)
    }
}

pub fn descriptor_len(resolution: usize) -> usize {
    3 * resolution * resolution
}

/// Projects `points` (N×3, inside the unit ball) orthographically onto the
/// image plane of a camera at `azimuth`/`elevation` degrees looking at the
/// origin, and accumulates an R×R grid of (occupancy, nearest depth,
/// farthest depth).
///
/// Channels are laid out channel-major and each lies in `[0, 1]`:
/// occupancy is divided by the busiest cell's count, and depth is measured
/// from the plane tangent to the unit sphere on the camera side, halved.
/// Empty cells are 0 in every channel.
pub fn render_view_descriptor(points: &Tensor, azimuth: f64, elevation: f64, resolution: usize) -> Result<Vec<f64>> {
    if resolution < 4 {
        return Err(Error::Input(format!("descriptor resolution must be ≥ 4, got {resolution}")));
    }
    let (n, d) = points.dims2()?;
    if d != 3 {
        return Err(Error::dim("render_view_descriptor", format!("points must be N×3, got {:?}", points.shape())));
    }
    let (sa, ca) = azimuth.to_radians().sin_cos();
    let (se, ce) = elevation.to_radians().sin_cos();
    let view_dir = [ce * ca, ce * sa, se];
    let right = [-sa, ca, 0.0];
    let up = [-se * ca, -se * sa, ce];
    let dot = |p: &[f64], v: &[f64; 3]| p[0] * v[0] + p[1] * v[1] + p[2] * v[2];

    let r = resolution;
    let cells = r * r;
    let mut count = vec![0.0f64; cells];
    let mut near = vec![f64::INFINITY; cells];
    let mut far = vec![f64::NEG_INFINITY; cells];
    let bin = |x: f64| (((x + 1.0) * 0.5 * r as f64).floor().max(0.0) as usize).min(r - 1);
    for i in 0..n {
        let p = points.row(i);
        let col = bin(dot(p, &right));
        let row = bin(-dot(p, &up));
        let depth = (1.0 - dot(p, &view_dir)) * 0.5;
        let c = row * r + col;
        count[c] += 1.0;
        near[c] = near[c].min(depth);
        far[c] = far[c].max(depth);
    }
    let busiest = count.iter().copied().fold(0.0, f64::max);
    let mut out = vec![0.0; 3 * cells];
    for c in 0..cells {
        if count[c] > 0.0 {
            out[c] = count[c] / busiest;
            out[cells + c] = near[c].clamp(0.0, 1.0);
            out[2 * cells + c] = far[c].clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
