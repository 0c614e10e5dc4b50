//! Scalar objectives with exact gradients: color loss, uncertainty NLL,
//! scale regularization, and the uncertainty-weighted composite.

pub mod ssim;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Image;

pub use ssim::{dssim, dssim_with_grad, ssim as ssim_index, ssim_with_grad};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// DSSIM weight in the color loss.
    pub lambda: f64,
    /// Log-regularizer weight in the uncertainty NLL.
    pub lambda1: f64,
    /// Scale regularization weight.
    pub lambda_reg: f64,
    pub beta_min: f64,
    pub m_min: f64,
    pub enable_mapping: bool,
    pub enable_uncertainty: bool,
    pub enable_boundary_penalty: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.2,
            lambda1: 0.5,
            lambda_reg: 0.01,
            beta_min: 0.1,
            m_min: 0.05,
            enable_mapping: true,
            enable_uncertainty: true,
            enable_boundary_penalty: true,
        }
    }
}

/// The composite loss and each reported component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub color: f64,
    pub dssim_term: f64,
    pub l1_term: f64,
    pub uncertainty: f64,
    pub regularization: f64,
}

impl LossBreakdown {
    /// Checks the reported total against its parts.
    pub fn is_consistent(&self, tol: f64) -> bool {
        let recomposed = self.color + self.uncertainty + self.regularization;
        (self.total - recomposed).abs() <= tol && (self.color - (self.dssim_term + self.l1_term)).abs() <= tol
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            (self.color, "color"),
            (self.dssim_term, "dssim"),
            (self.l1_term, "l1"),
            (self.uncertainty, "uncertainty"),
            (self.regularization, "regularization"),
            (self.total, "total"),
        ]
        .into_iter()
        .find(|(v, _)| !v.is_finite())
        .map(|(_, name)| name)
    }
}

pub fn mean_l1(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::data("l1 inputs differ in shape"));
    }
    Ok(a.mean_abs_diff(b))
}

/// Unweighted color loss: lambda * DSSIM(raw, reference) +
/// (1 - lambda) * L1(mapped, reference).
pub fn color_loss(raw: &Image, mapped: &Image, reference: &Image, lambda: f64) -> Result<f64> {
    if !raw.same_shape(reference) || !mapped.same_shape(reference) {
        return Err(Error::data("color loss images differ in shape"));
    }
    Ok(lambda * dssim(raw, reference)? + (1.0 - lambda) * mean_l1(mapped, reference)?)
}

/// Uncertainty NLL over a pixel dissimilarity map:
/// mean(d / (2 beta^2) + lambda1 * ln beta). `d` is treated as a constant.
pub fn uncertainty_loss(d_map: &Image, beta_map: &Image, lambda1: f64, beta_min: f64) -> Result<f64> {
    if !d_map.same_shape(beta_map) {
        return Err(Error::data("uncertainty loss maps differ in shape"));
    }
    let mut acc = 0.0;
    for (d, b) in d_map.data().iter().zip(beta_map.data()) {
        if *b < beta_min - 1e-12 {
            return Err(Error::data(format!("beta {b} below floor {beta_min}")));
        }
        acc += d / (2.0 * b * b) + lambda1 * b.ln();
    }
    Ok(acc / d_map.data().len() as f64)
}

/// Gradient of [`uncertainty_loss`] w.r.t. the beta map.
pub fn uncertainty_loss_grad(d_map: &Image, beta_map: &Image, lambda1: f64) -> Image {
    let n = beta_map.data().len() as f64;
    let mut grad = Image::new(beta_map.width(), beta_map.height(), 1);
    for ((g, d), b) in grad.data_mut().iter_mut().zip(d_map.data()).zip(beta_map.data()) {
        *g = (-d / (b * b * b) + lambda1 / b) / n;
    }
    grad
}

/// Sum over primitives of the product of scale components.
pub fn reg_loss(scales: &[Vector3<f64>]) -> f64 {
    scales.iter().map(|s| s.x * s.y * s.z).sum()
}

pub fn reg_loss_grad(scales: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    scales
        .iter()
        .map(|s| Vector3::new(s.y * s.z, s.x * s.z, s.x * s.y))
        .collect()
}

/// Inputs shared by the composite loss.
pub struct TotalLossInputs<'a> {
    pub raw: &'a Image,
    pub mapped: &'a Image,
    pub reference: &'a Image,
    /// Rendered uncertainty map (ignored when uncertainty is disabled).
    pub beta_map: &'a Image,
    /// Boundary penalty mask.
    pub penalty: &'a Image,
    /// Pixel dissimilarity map, treated as a constant.
    pub d_map: &'a Image,
    pub scales: &'a [Vector3<f64>],
}

pub struct TotalLossGrads {
    pub d_raw: Image,
    pub d_mapped: Image,
    pub d_beta: Image,
    pub d_scales: Vec<Vector3<f64>>,
}

/// The composite objective.
///
/// The per-pixel weight `w = 1 / (2 beta^2 M)` multiplies the L1 part
/// pixel-wise and the (whole-image) DSSIM part through the mean weight;
/// `beta` and `M` act as constants inside the color term, so the weight
/// never backpropagates into geometry or color parameters. With
/// uncertainty disabled the weight is identically 1 and the NLL term is
/// dropped.
pub fn total_loss(inputs: &TotalLossInputs<'_>, config: &LossConfig) -> Result<(LossBreakdown, TotalLossGrads)> {
    let TotalLossInputs {
        raw,
        mapped,
        reference,
        beta_map,
        penalty,
        d_map,
        scales,
    } = inputs;
    if !raw.same_shape(reference) || !mapped.same_shape(reference) {
        return Err(Error::data("total loss images differ in shape"));
    }
    let (w_img, h_img) = (reference.width(), reference.height());
    let pixel_count = (w_img * h_img) as f64;

    // Per-pixel weight, constant w.r.t. every parameter.
    let weight = if config.enable_uncertainty {
        if beta_map.width() != w_img || beta_map.height() != h_img {
            return Err(Error::data("beta map does not match the render size"));
        }
        let mut weight = Image::new(w_img, h_img, 1);
        for ((w, b), m) in weight.data_mut().iter_mut().zip(beta_map.data()).zip(penalty.data()) {
            *w = 1.0 / (2.0 * b * b * m);
        }
        weight
    } else {
        Image::from_fn(w_img, h_img, 1, |_, _, _| 1.0)
    };
    let mean_weight = weight.data().iter().sum::<f64>() / pixel_count;

    // DSSIM on raw colors, scaled by the mean weight.
    let (dssim_value, dssim_grad) = dssim_with_grad(raw, reference)?;
    let dssim_term = config.lambda * dssim_value * mean_weight;
    let mut d_raw = dssim_grad;
    for v in d_raw.data_mut() {
        *v *= config.lambda * mean_weight;
    }

    // Weighted per-pixel L1 on mapped colors.
    let channels = reference.channels();
    let l1_norm = pixel_count * channels as f64;
    let mut l1_acc = 0.0;
    let mut d_mapped = Image::new(w_img, h_img, channels);
    for y in 0..h_img {
        for x in 0..w_img {
            let w = weight.get(x, y, 0);
            for c in 0..channels {
                let diff = mapped.get(x, y, c) - reference.get(x, y, c);
                l1_acc += w * diff.abs();
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                d_mapped.set(x, y, c, (1.0 - config.lambda) * w * sign / l1_norm);
            }
        }
    }
    let l1_term = (1.0 - config.lambda) * l1_acc / l1_norm;

    let color = dssim_term + l1_term;

    let (uncertainty, d_beta) = if config.enable_uncertainty {
        let u = uncertainty_loss(d_map, beta_map, config.lambda1, config.beta_min)?;
        let g = uncertainty_loss_grad(d_map, beta_map, config.lambda1);
        (u, g)
    } else {
        (0.0, Image::new(w_img, h_img, 1))
    };

    let regularization = config.lambda_reg * reg_loss(scales);
    let d_scales = reg_loss_grad(scales)
        .into_iter()
        .map(|g| g * config.lambda_reg)
        .collect();

    let breakdown = LossBreakdown {
        total: color + uncertainty + regularization,
        color,
        dssim_term,
        l1_term,
        uncertainty,
        regularization,
    };
    Ok((
        breakdown,
        TotalLossGrads {
            d_raw,
            d_mapped,
            d_beta,
            d_scales,
        },
    ))
}

/// PSNR in dB for images in [0, 1], capped at 99 for zero error.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::data("psnr inputs differ in shape"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse <= 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}
