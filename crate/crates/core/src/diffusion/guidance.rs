//! Dual classifier-free guidance.

use triplane_tensor::Array;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GuidanceScales {
    /// Shape-embedding scale `s_s`.
    pub shape: f64,
    /// Image-embedding scale `s_p`.
    pub image: f64,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        GuidanceScales { shape: 1.0, image: 5.0 }
    }
}

/// `uncond + s_p (img_only - uncond) + s_s (full - img_only)`, evaluated as
/// `(1 - s_p) uncond + (s_p - s_s) img_only + s_s full`.
pub fn cfg_combine(
    uncond: &Array<f64>,
    img_only: &Array<f64>,
    full: &Array<f64>,
    s: &GuidanceScales,
) -> Result<Array<f64>> {
    if uncond.shape() != img_only.shape() || uncond.shape() != full.shape() {
        return Err(CoreError::Dimension(
            "cfg_combine",
            format!("{:?}, {:?}, {:?}", uncond.shape(), img_only.shape(), full.shape()),
        ));
    }
    let (a, b, c) = (1.0 - s.image, s.image - s.shape, s.shape);
    let data = uncond
        .data()
        .iter()
        .zip(img_only.data())
        .zip(full.data())
        .map(|((&u, &i), &f)| a * u + b * i + c * f)
        .collect();
    Ok(Array::new(uncond.shape().to_vec(), data)?)
}
