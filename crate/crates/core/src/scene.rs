//! Hierarchical scene representation.
//!
//! A scene is a set of nexus kernels. Each kernel anchors `h` Gaussian
//! primitives through learnable offsets and a scaling factor; primitive
//! attributes (opacity, rotation, scale, raw color) come from the four
//! shared kernel heads conditioned on the kernel's context feature.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{normalize4, normalize4_backward, rotation_from_quat};
use crate::nn::{gaussian_vec, Mlp, MlpCache, MlpGrads, Mode, OutputActivation};

pub const HEAD_HIDDEN_WIDTH: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SceneConfig {
    /// Offsets (and therefore primitives) per kernel.
    pub offsets_per_kernel: usize,
    pub feature_dim: usize,
    pub appearance_dim: usize,
    pub uncertainty_dim: usize,
    /// Voxel edge length; `None` selects 4x the median nearest-neighbor distance.
    pub voxel_size: Option<f64>,
    pub sky_count: usize,
    pub sky_radius_multiplier: f64,
    pub feature_init_std: f64,
    pub embedding_init_std: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            offsets_per_kernel: 10,
            feature_dim: 32,
            appearance_dim: 32,
            uncertainty_dim: 16,
            voxel_size: None,
            sky_count: 64,
            sky_radius_multiplier: 3.0,
            feature_init_std: 0.1,
            embedding_init_std: 0.01,
        }
    }
}

/// A voxel-segment anchor owning offsets, a context feature, a scaling
/// factor, and its local appearance/uncertainty embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct NexusKernel {
    pub position: Vector3<f64>,
    pub feature: Vec<f64>,
    /// Scaling factor stored in log space so it stays positive under updates.
    pub log_scaling: f64,
    pub offsets: Vec<Vector3<f64>>,
    pub appearance: Vec<f64>,
    pub uncertainty_emb: Vec<f64>,
    pub accumulated_opacity: f64,
    pub is_sky: bool,
}

impl NexusKernel {
    pub fn scaling(&self) -> f64 {
        self.log_scaling.exp()
    }
}

/// Per-view renderable unit derived from a kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub position: Vector3<f64>,
    /// Unit quaternion (w, x, y, z).
    pub rotation: Vector4<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub raw_color: Vector3<f64>,
    pub mapped_color: Vector3<f64>,
    pub uncertainty: f64,
    pub kernel_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        let gram = self.rotation.transpose() * self.rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > 1e-6 {
            return Err(Error::data(format!("camera rotation not orthonormal (deviation {dev:.2e})")));
        }
        if self.rotation.determinant() < 0.0 {
            return Err(Error::data("camera rotation has determinant -1 (reflection)"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::data("camera has zero-area image"));
        }
        Ok(())
    }

    /// Camera at `eye` looking toward `target`, x right, y down, z forward.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, fx: f64, fy: f64, width: usize, height: usize) -> Camera {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            right = forward.cross(&Vector3::new(0.0, 1.0, 0.0));
        }
        let right = right.normalize();
        let down = forward.cross(&right).normalize();
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera {
            rotation,
            translation,
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

/// The four kernel MLP heads. Opacity, rotation, and scale condition on the
/// context feature alone; color additionally sees the viewing direction.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelHeads {
    pub opacity: Mlp,
    pub rotation: Mlp,
    pub scale: Mlp,
    pub color: Mlp,
}

impl KernelHeads {
    pub fn new(feature_dim: usize, h: usize, rng: &mut ChaCha8Rng) -> KernelHeads {
        let w = HEAD_HIDDEN_WIDTH;
        let mut opacity = Mlp::new(&[feature_dim, w, w, h], OutputActivation::Sigmoid, 0.0);
        let mut rotation = Mlp::new(&[feature_dim, w, w, 4 * h], OutputActivation::Identity, 0.0);
        let mut scale = Mlp::new(&[feature_dim, w, w, 3 * h], OutputActivation::Softplus, 0.0);
        let mut color = Mlp::new(&[feature_dim + 3, w, w, 3 * h], OutputActivation::Sigmoid, 0.0);

        opacity.init_random(rng, 0.01);
        // Start primitives mostly transparent, like point-based splatting inits.
        opacity.set_final_bias_constant(-2.2);
        rotation.init_random(rng, 0.0);
        let identity_quat: Vec<f64> = (0..4 * h).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        rotation.set_final_bias(&identity_quat);
        scale.init_random(rng, 0.0);
        // softplus^-1(0.3): primitives start at ~0.3x the kernel scale.
        scale.set_final_bias_constant((0.3f64.exp() - 1.0).ln());
        color.init_random(rng, 0.01);

        KernelHeads {
            opacity,
            rotation,
            scale,
            color,
        }
    }

    pub fn validate(&self, feature_dim: usize, h: usize) -> Result<()> {
        let checks = [
            ("opacity head output", self.opacity.output_width(), h),
            ("rotation head output", self.rotation.output_width(), 4 * h),
            ("scale head output", self.scale.output_width(), 3 * h),
            ("color head output", self.color.output_width(), 3 * h),
            ("opacity head input", self.opacity.input_width(), feature_dim),
            ("rotation head input", self.rotation.input_width(), feature_dim),
            ("scale head input", self.scale.input_width(), feature_dim),
            ("color head input", self.color.input_width(), feature_dim + 3),
        ];
        for (what, actual, expected) in checks {
            if actual != expected {
                return Err(Error::dim(what, expected, actual));
            }
        }
        Ok(())
    }
}

/// Unit vector from the camera center toward the kernel.
pub fn view_direction(kernel_pos: &Vector3<f64>, camera_pos: &Vector3<f64>) -> Result<Vector3<f64>> {
    let diff = kernel_pos - camera_pos;
    let norm = diff.norm();
    if norm == 0.0 {
        return Err(Error::CoincidentPoints);
    }
    Ok(diff / norm)
}

pub const FALLBACK_VIEW_DIRECTION: Vector3<f64> = Vector3::new(0.0, 0.0, 1.0);

/// Sigma = R diag(s) diag(s)^T R^T.
pub fn build_covariance(rotation: &Vector4<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = rotation_from_quat(rotation);
    let d = Matrix3::from_diagonal(&Vector3::new(scale.x * scale.x, scale.y * scale.y, scale.z * scale.z));
    r * d * r.transpose()
}

#[derive(Debug, Clone)]
pub struct ScenePoint {
    pub position: Vector3<f64>,
    pub color: Option<Vector3<f64>>,
}

impl ScenePoint {
    pub fn at(position: Vector3<f64>) -> ScenePoint {
        ScenePoint {
            position,
            color: None,
        }
    }
}

/// Median nearest-neighbor distance of a point set (brute force).
pub fn median_nn_distance(points: &[ScenePoint]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let mut dists: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p.position - q.position).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(dists[dists.len() / 2])
}

fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden_angle = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden_angle * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Voxelizes a point cloud into kernels and appends sky kernels on a
/// surrounding sphere. Kernel order is deterministic (sorted voxel keys,
/// then sky kernels).
pub fn init_from_points(points: &[ScenePoint], config: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<NexusKernel>> {
    if points.is_empty() {
        return Err(Error::EmptyPointCloud);
    }
    let voxel = match config.voxel_size {
        Some(v) => v,
        None => median_nn_distance(points).map(|d| d * 4.0).unwrap_or(1.0),
    };
    if !(voxel > 0.0) {
        return Err(Error::data("voxel size must be positive"));
    }

    let mut buckets: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let key = (
            (p.position.x / voxel).floor() as i64,
            (p.position.y / voxel).floor() as i64,
            (p.position.z / voxel).floor() as i64,
        );
        buckets.entry(key).or_default().push(i);
    }

    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.position) / points.len() as f64;
    let bounding_radius = points
        .iter()
        .map(|p| (p.position - centroid).norm())
        .fold(0.0, f64::max)
        .max(voxel);

    let mut kernels = Vec::with_capacity(buckets.len() + config.sky_count);
    let make_kernel = |position: Vector3<f64>, log_scaling: f64, is_sky: bool, rng: &mut ChaCha8Rng| NexusKernel {
        position,
        feature: gaussian_vec(rng, config.feature_dim, config.feature_init_std),
        log_scaling,
        offsets: (0..config.offsets_per_kernel)
            .map(|_| Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            .collect(),
        appearance: gaussian_vec(rng, config.appearance_dim, config.embedding_init_std),
        uncertainty_emb: gaussian_vec(rng, config.uncertainty_dim, config.embedding_init_std),
        accumulated_opacity: 0.0,
        is_sky,
    };

    for members in buckets.values() {
        let mean = members.iter().fold(Vector3::zeros(), |acc, &i| acc + points[i].position) / members.len() as f64;
        kernels.push(make_kernel(mean, voxel.ln(), false, rng));
    }

    if config.sky_count > 0 {
        let sky_radius = config.sky_radius_multiplier * bounding_radius;
        // Spacing between neighboring sky kernels on the sphere.
        let sky_scale = sky_radius * (4.0 * std::f64::consts::PI / config.sky_count as f64).sqrt();
        for dir in fibonacci_sphere(config.sky_count) {
            kernels.push(make_kernel(centroid + dir * sky_radius, sky_scale.ln(), true, rng));
        }
    }
    Ok(kernels)
}

/// Forward record of `derive_primitives`, retained for the backward pass.
#[derive(Debug, Clone)]
pub struct KernelForward {
    pub primitives: Vec<GaussianPrimitive>,
    pub view_dir: Vector3<f64>,
    pub view_distance: f64,
    pub view_fallback: bool,
    alpha_cache: MlpCache,
    rotation_cache: MlpCache,
    scale_cache: MlpCache,
    color_cache: MlpCache,
    rotation_norms: Vec<f64>,
    scale_raw: Vec<f64>,
}

/// Derives the kernel's `h` primitives for a camera at `camera_pos`.
///
/// Positions are exact offset products; attributes come from the heads in
/// eval mode. Mapped color defaults to the raw color and uncertainty to zero
/// until the appearance / uncertainty stages fill them in.
pub fn derive_primitives(kernel: &NexusKernel, kernel_index: usize, heads: &KernelHeads, camera_pos: &Vector3<f64>) -> Result<KernelForward> {
    let h = kernel.offsets.len();
    let (view_dir, view_distance, view_fallback) = match view_direction(&kernel.position, camera_pos) {
        Ok(d) => (d, (kernel.position - camera_pos).norm(), false),
        Err(Error::CoincidentPoints) => (FALLBACK_VIEW_DIRECTION, 0.0, true),
        Err(e) => return Err(e),
    };

    let (alpha_out, alpha_cache) = heads.opacity.forward(&kernel.feature, Mode::Eval, None)?;
    let (rot_out, rotation_cache) = heads.rotation.forward(&kernel.feature, Mode::Eval, None)?;
    let (scale_out, scale_cache) = heads.scale.forward(&kernel.feature, Mode::Eval, None)?;
    let mut color_input = kernel.feature.clone();
    color_input.extend_from_slice(view_dir.as_slice());
    let (color_out, color_cache) = heads.color.forward(&color_input, Mode::Eval, None)?;

    if alpha_out.len() != h {
        return Err(Error::dim("opacity head outputs", h, alpha_out.len()));
    }

    let k = kernel.scaling();
    let mut primitives = Vec::with_capacity(h);
    let mut rotation_norms = Vec::with_capacity(h);
    for i in 0..h {
        let raw_q = Vector4::new(rot_out[4 * i], rot_out[4 * i + 1], rot_out[4 * i + 2], rot_out[4 * i + 3]);
        let (q, norm) = normalize4(&raw_q);
        rotation_norms.push(norm);
        let scale = Vector3::new(scale_out[3 * i], scale_out[3 * i + 1], scale_out[3 * i + 2]) * k;
        let raw_color = Vector3::new(color_out[3 * i], color_out[3 * i + 1], color_out[3 * i + 2]);
        primitives.push(GaussianPrimitive {
            position: kernel.position + kernel.offsets[i] * k,
            rotation: q,
            scale,
            opacity: alpha_out[i],
            raw_color,
            mapped_color: raw_color,
            uncertainty: 0.0,
            kernel_index,
        });
    }

    Ok(KernelForward {
        primitives,
        view_dir,
        view_distance,
        view_fallback,
        alpha_cache,
        rotation_cache,
        scale_cache,
        color_cache,
        rotation_norms,
        scale_raw: scale_out,
    })
}

/// Per-primitive gradients flowing into `derive_backward`.
#[derive(Debug, Clone, Default)]
pub struct PrimitiveGrad {
    pub d_position: Vector3<f64>,
    /// Gradient w.r.t. the unit quaternion.
    pub d_rotation: Vector4<f64>,
    pub d_scale: Vector3<f64>,
    pub d_opacity: f64,
    pub d_raw_color: Vector3<f64>,
}

/// Gradients w.r.t. one kernel's own parameters.
#[derive(Debug, Clone)]
pub struct KernelGrads {
    pub d_position: Vector3<f64>,
    pub d_log_scaling: f64,
    pub d_offsets: Vec<Vector3<f64>>,
    pub d_feature: Vec<f64>,
    /// Gradient w.r.t. the unit viewing direction (color-head input slice).
    pub d_view_dir: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub opacity: MlpGrads,
    pub rotation: MlpGrads,
    pub scale: MlpGrads,
    pub color: MlpGrads,
}

impl HeadGrads {
    pub fn zeros_like(heads: &KernelHeads) -> HeadGrads {
        HeadGrads {
            opacity: MlpGrads::zeros_like(&heads.opacity),
            rotation: MlpGrads::zeros_like(&heads.rotation),
            scale: MlpGrads::zeros_like(&heads.scale),
            color: MlpGrads::zeros_like(&heads.color),
        }
    }

    pub fn accumulate(&mut self, other: &HeadGrads) {
        self.opacity.accumulate(&other.opacity);
        self.rotation.accumulate(&other.rotation);
        self.scale.accumulate(&other.scale);
        self.color.accumulate(&other.color);
    }
}

/// Exact backward of `derive_primitives` for the given per-primitive grads.
///
/// The returned `d_view_dir` is the gradient w.r.t. the unit direction; the
/// caller folds it into the kernel position through the normalization chain
/// (together with any appearance-mapper contribution).
pub fn derive_backward(
    kernel: &NexusKernel,
    heads: &KernelHeads,
    fwd: &KernelForward,
    prim_grads: &[PrimitiveGrad],
) -> Result<(KernelGrads, HeadGrads)> {
    let h = kernel.offsets.len();
    if prim_grads.len() != h {
        return Err(Error::dim("primitive grads", h, prim_grads.len()));
    }
    let k = kernel.scaling();

    let mut d_position = Vector3::zeros();
    let mut d_k = 0.0;
    let mut d_offsets = vec![Vector3::zeros(); h];

    let mut alpha_grad_out = vec![0.0; h];
    let mut rotation_grad_out = vec![0.0; 4 * h];
    let mut scale_grad_out = vec![0.0; 3 * h];
    let mut color_grad_out = vec![0.0; 3 * h];

    for i in 0..h {
        let g = &prim_grads[i];
        // mu_i = x_u + O_i * k
        d_position += g.d_position;
        d_offsets[i] = g.d_position * k;
        d_k += g.d_position.dot(&kernel.offsets[i]);

        // s_i = k * softplus_out_i
        let s_raw = Vector3::new(fwd.scale_raw[3 * i], fwd.scale_raw[3 * i + 1], fwd.scale_raw[3 * i + 2]);
        d_k += g.d_scale.dot(&s_raw);
        for c in 0..3 {
            scale_grad_out[3 * i + c] = g.d_scale[c] * k;
        }

        // q_i = normalize(raw)
        let d_raw_q = normalize4_backward(&fwd.primitives[i].rotation, fwd.rotation_norms[i], &g.d_rotation);
        for c in 0..4 {
            rotation_grad_out[4 * i + c] = d_raw_q[c];
        }

        alpha_grad_out[i] = g.d_opacity;
        for c in 0..3 {
            color_grad_out[3 * i + c] = g.d_raw_color[c];
        }
    }

    let (alpha_gin, alpha_grads) = heads.opacity.backward(&fwd.alpha_cache, &alpha_grad_out)?;
    let (rot_gin, rotation_grads) = heads.rotation.backward(&fwd.rotation_cache, &rotation_grad_out)?;
    let (scale_gin, scale_grads) = heads.scale.backward(&fwd.scale_cache, &scale_grad_out)?;
    let (color_gin, color_grads) = heads.color.backward(&fwd.color_cache, &color_grad_out)?;

    let f_dim = kernel.feature.len();
    let mut d_feature = vec![0.0; f_dim];
    for i in 0..f_dim {
        d_feature[i] = alpha_gin[i] + rot_gin[i] + scale_gin[i] + color_gin[i];
    }
    let d_view_dir = Vector3::new(color_gin[f_dim], color_gin[f_dim + 1], color_gin[f_dim + 2]);

    Ok((
        KernelGrads {
            d_position,
            d_log_scaling: d_k * k,
            d_offsets,
            d_feature,
            d_view_dir,
        },
        HeadGrads {
            opacity: alpha_grads,
            rotation: rotation_grads,
            scale: scale_grads,
            color: color_grads,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub removed_indices: Vec<usize>,
    pub survivors: usize,
}

/// Removes non-sky kernels whose accumulated opacity over the window fell
/// below `threshold * window_iterations`; resets survivor accumulators.
pub fn prune_kernels(kernels: Vec<NexusKernel>, opacity_threshold: f64, window_iterations: u64) -> (Vec<NexusKernel>, PruneReport) {
    let cutoff = opacity_threshold * window_iterations as f64;
    let mut removed_indices = Vec::new();
    let mut kept = Vec::with_capacity(kernels.len());
    for (i, mut kernel) in kernels.into_iter().enumerate() {
        if !kernel.is_sky && kernel.accumulated_opacity < cutoff {
            removed_indices.push(i);
        } else {
            kernel.accumulated_opacity = 0.0;
            kept.push(kernel);
        }
    }
    let survivors = kept.len();
    (
        kept,
        PruneReport {
            removed_indices,
            survivors,
        },
    )
}
