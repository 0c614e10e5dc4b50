//! EWA projection and tile-based alpha blending, forward and backward.
//!
//! Splats carry seven payload channels (raw RGB, mapped RGB, uncertainty)
//! that blend with the same front-to-back weights. A splat contributes to a
//! pixel exactly when the pixel center lies inside its 3-sigma bounding
//! square; the tiled renderer and any per-pixel loop that applies the same
//! predicate therefore produce identical images.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::img::Image;
use crate::math::{rotation_from_quat, rotation_quat_jacobian, sym2_max_eigenvalue};
use crate::scene::{build_covariance, Camera, GaussianPrimitive};

pub const PAYLOAD_CHANNELS: usize = 7;
pub const RAW_OFFSET: usize = 0;
pub const MAPPED_OFFSET: usize = 3;
pub const BETA_CHANNEL: usize = 6;

/// Sigma clamp keeps 1/(1-sigma) terms in the backward pass bounded.
pub const SIGMA_MAX: f64 = 0.99;
/// Per-pixel early-out threshold on remaining transmittance.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
/// Low-pass dilation added to the projected covariance diagonal (pixel^2).
pub const LOW_PASS: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct RasterConfig {
    pub tile_size: usize,
    pub background: Vector3<f64>,
    /// Background value composited into the uncertainty channel.
    pub beta_background: f64,
    pub near: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            tile_size: 16,
            background: Vector3::zeros(),
            beta_background: 0.1,
            near: 0.01,
        }
    }
}

/// Screen-space projection of one primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean: Vector2<f64>,
    /// Projected covariance including the low-pass term.
    pub cov: Matrix2<f64>,
    /// Inverse covariance, cached for blending.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    /// 3-sigma extent used for binning and the coverage predicate.
    pub radius: f64,
    pub opacity: f64,
    pub payload: [f64; PAYLOAD_CHANNELS],
    pub primitive_index: usize,
}

impl Splat2D {
    #[inline]
    pub fn covers(&self, pcx: f64, pcy: f64) -> bool {
        (pcx - self.mean.x).abs() <= self.radius && (pcy - self.mean.y).abs() <= self.radius
    }

    /// Unclamped Gaussian falloff at a pixel center.
    #[inline]
    pub fn gaussian(&self, pcx: f64, pcy: f64) -> f64 {
        let dx = pcx - self.mean.x;
        let dy = pcy - self.mean.y;
        let q = self.conic[(0, 0)] * dx * dx + 2.0 * self.conic[(0, 1)] * dx * dy + self.conic[(1, 1)] * dy * dy;
        (-0.5 * q).exp()
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub raw: Image,
    pub mapped: Image,
    pub uncertainty: Image,
    pub alpha: Image,
    pub contributors: Image,
}

/// Projects a primitive to screen space; `None` means culled.
pub fn project_ewa(prim: &GaussianPrimitive, camera: &Camera, config: &RasterConfig) -> Option<Splat2D> {
    let p_cam = camera.rotation * prim.position + camera.translation;
    if p_cam.z <= config.near {
        return None;
    }
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let mean = Vector2::new(camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy);

    let jac = perspective_jacobian(&p_cam, camera);
    let world_cov = build_covariance(&prim.rotation, &prim.scale);
    let cam_cov = camera.rotation * world_cov * camera.rotation.transpose();
    let mut cov = jac * cam_cov * jac.transpose();
    cov[(0, 0)] += LOW_PASS;
    cov[(1, 1)] += LOW_PASS;

    let radius = 3.0 * sym2_max_eigenvalue(cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]).max(0.0).sqrt();
    if mean.x + radius < 0.0
        || mean.x - radius > camera.width as f64
        || mean.y + radius < 0.0
        || mean.y - radius > camera.height as f64
    {
        return None;
    }

    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    debug_assert!(det > 0.0, "low-pass keeps the projected covariance positive definite");
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;

    Some(Splat2D {
        mean,
        cov,
        conic,
        depth: z,
        radius,
        opacity: prim.opacity,
        payload: [
            prim.raw_color.x,
            prim.raw_color.y,
            prim.raw_color.z,
            prim.mapped_color.x,
            prim.mapped_color.y,
            prim.mapped_color.z,
            prim.uncertainty,
        ],
        primitive_index: prim.kernel_index,
    })
}

fn perspective_jacobian(p_cam: &Vector3<f64>, camera: &Camera) -> nalgebra::Matrix2x3<f64> {
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let z_inv = 1.0 / z;
    let z_inv2 = z_inv * z_inv;
    nalgebra::Matrix2x3::new(
        camera.fx * z_inv,
        0.0,
        -camera.fx * x * z_inv2,
        0.0,
        camera.fy * z_inv,
        -camera.fy * y * z_inv2,
    )
}

/// Depth order with index tie-break; blending is invariant to input order.
fn sorted_order(splats: &[Splat2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .total_cmp(&splats[b].depth)
            .then(splats[a].primitive_index.cmp(&splats[b].primitive_index))
    });
    order
}

struct TileGrid {
    tile_size: usize,
    tiles_x: usize,
    tiles_y: usize,
}

impl TileGrid {
    fn new(width: usize, height: usize, tile_size: usize) -> TileGrid {
        TileGrid {
            tile_size,
            tiles_x: width.div_ceil(tile_size),
            tiles_y: height.div_ceil(tile_size),
        }
    }

    fn count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Pixel rectangle `[x0, x1) x [y0, y1)` of a tile.
    fn rect(&self, tile: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (x0, y0, (x0 + self.tile_size).min(width), (y0 + self.tile_size).min(height))
    }
}

/// Splat indices (sorted order preserved) per tile.
fn bin_splats(splats: &[Splat2D], order: &[usize], grid: &TileGrid, width: usize, height: usize) -> Vec<Vec<usize>> {
    let mut bins = vec![Vec::new(); grid.count()];
    for &idx in order {
        let s = &splats[idx];
        let x_lo = ((s.mean.x - s.radius - 0.5).floor().max(0.0) as usize).min(width.saturating_sub(1)) / grid.tile_size;
        let x_hi = ((s.mean.x + s.radius - 0.5).ceil().max(0.0) as usize).min(width.saturating_sub(1)) / grid.tile_size;
        let y_lo = ((s.mean.y - s.radius - 0.5).floor().max(0.0) as usize).min(height.saturating_sub(1)) / grid.tile_size;
        let y_hi = ((s.mean.y + s.radius - 0.5).ceil().max(0.0) as usize).min(height.saturating_sub(1)) / grid.tile_size;
        for ty in y_lo..=y_hi {
            for tx in x_lo..=x_hi {
                bins[ty * grid.tiles_x + tx].push(idx);
            }
        }
    }
    bins
}

struct PixelBlend {
    accum: [f64; PAYLOAD_CHANNELS],
    transmittance: f64,
    contributors: u32,
}

/// Front-to-back blend over `candidates` (already depth-sorted).
fn blend_pixel(splats: &[Splat2D], candidates: &[usize], pcx: f64, pcy: f64) -> PixelBlend {
    let mut accum = [0.0; PAYLOAD_CHANNELS];
    let mut transmittance = 1.0;
    let mut contributors = 0u32;
    for &idx in candidates {
        let s = &splats[idx];
        if !s.covers(pcx, pcy) {
            continue;
        }
        let sigma = (s.opacity * s.gaussian(pcx, pcy)).min(SIGMA_MAX);
        if sigma <= 0.0 {
            continue;
        }
        let weight = sigma * transmittance;
        for (a, p) in accum.iter_mut().zip(&s.payload) {
            *a += p * weight;
        }
        contributors += 1;
        transmittance *= 1.0 - sigma;
        if transmittance < TRANSMITTANCE_EPS {
            break;
        }
    }
    PixelBlend {
        accum,
        transmittance,
        contributors,
    }
}

/// Tiled forward rasterization of pre-culled splats.
pub fn rasterize(splats: &[Splat2D], width: usize, height: usize, config: &RasterConfig) -> Result<RenderOutput> {
    if width == 0 || height == 0 {
        return Err(Error::data("zero-area image"));
    }
    let order = sorted_order(splats);
    let grid = TileGrid::new(width, height, config.tile_size);
    let bins = bin_splats(splats, &order, &grid, width, height);

    struct TileOut {
        rect: (usize, usize, usize, usize),
        pixels: Vec<([f64; PAYLOAD_CHANNELS], f64, u32)>,
    }

    let tiles: Vec<TileOut> = (0..grid.count())
        .into_par_iter()
        .map(|tile| {
            let rect = grid.rect(tile, width, height);
            let (x0, y0, x1, y1) = rect;
            let mut pixels = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for py in y0..y1 {
                for px in x0..x1 {
                    let blend = blend_pixel(splats, &bins[tile], px as f64 + 0.5, py as f64 + 0.5);
                    pixels.push((blend.accum, blend.transmittance, blend.contributors));
                }
            }
            TileOut { rect, pixels }
        })
        .collect();

    let mut raw = Image::new(width, height, 3);
    let mut mapped = Image::new(width, height, 3);
    let mut uncertainty = Image::new(width, height, 1);
    let mut alpha = Image::new(width, height, 1);
    let mut contributors = Image::new(width, height, 1);

    for tile in tiles {
        let (x0, y0, x1, y1) = tile.rect;
        let mut it = tile.pixels.into_iter();
        for py in y0..y1 {
            for px in x0..x1 {
                let (accum, t, n) = it.next().unwrap();
                for c in 0..3 {
                    raw.set(px, py, c, accum[RAW_OFFSET + c] + t * config.background[c]);
                    mapped.set(px, py, c, accum[MAPPED_OFFSET + c] + t * config.background[c]);
                }
                uncertainty.set(px, py, 0, accum[BETA_CHANNEL] + t * config.beta_background);
                alpha.set(px, py, 0, 1.0 - t);
                contributors.set(px, py, 0, n as f64);
            }
        }
    }

    Ok(RenderOutput {
        raw,
        mapped,
        uncertainty,
        alpha,
        contributors,
    })
}

/// Gradients w.r.t. one splat's screen-space quantities.
#[derive(Debug, Clone)]
pub struct SplatGrad {
    pub d_mean: Vector2<f64>,
    pub d_cov: Matrix2<f64>,
    pub d_opacity: f64,
    pub d_payload: [f64; PAYLOAD_CHANNELS],
}

impl SplatGrad {
    fn zero() -> SplatGrad {
        SplatGrad {
            d_mean: Vector2::zeros(),
            d_cov: Matrix2::zeros(),
            d_opacity: 0.0,
            d_payload: [0.0; PAYLOAD_CHANNELS],
        }
    }

    fn add(&mut self, other: &SplatGrad) {
        self.d_mean += other.d_mean;
        self.d_cov += other.d_cov;
        self.d_opacity += other.d_opacity;
        for (a, b) in self.d_payload.iter_mut().zip(&other.d_payload) {
            *a += b;
        }
    }
}

/// Per-pixel upstream gradients for the three rendered payload images.
pub struct RenderGrads<'a> {
    pub d_raw: &'a Image,
    pub d_mapped: &'a Image,
    pub d_uncertainty: &'a Image,
}

/// Exact backward of [`rasterize`] for the realized ordering and branches.
///
/// Gradient accumulation merges per-tile buffers in a fixed tile order, so
/// repeated runs are bit-identical regardless of thread count.
pub fn rasterize_backward(
    splats: &[Splat2D],
    width: usize,
    height: usize,
    config: &RasterConfig,
    grads: &RenderGrads<'_>,
) -> Result<Vec<SplatGrad>> {
    if grads.d_raw.width() != width
        || grads.d_raw.height() != height
        || !grads.d_raw.same_shape(grads.d_mapped)
        || grads.d_uncertainty.width() != width
        || grads.d_uncertainty.height() != height
    {
        return Err(Error::data("gradient image sizes do not match the render"));
    }
    let order = sorted_order(splats);
    let grid = TileGrid::new(width, height, config.tile_size);
    let bins = bin_splats(splats, &order, &grid, width, height);

    let tile_grads: Vec<Vec<SplatGrad>> = (0..grid.count())
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = grid.rect(tile, width, height);
            let candidates = &bins[tile];
            // Dense per-candidate accumulators, deterministic within the tile.
            let mut local: Vec<SplatGrad> = vec![SplatGrad::zero(); candidates.len()];
            let mut hits: Vec<(usize, f64, f64)> = Vec::new();

            for py in y0..y1 {
                for px in x0..x1 {
                    let pcx = px as f64 + 0.5;
                    let pcy = py as f64 + 0.5;

                    let mut g = [0.0; PAYLOAD_CHANNELS];
                    for c in 0..3 {
                        g[RAW_OFFSET + c] = grads.d_raw.get(px, py, c);
                        g[MAPPED_OFFSET + c] = grads.d_mapped.get(px, py, c);
                    }
                    g[BETA_CHANNEL] = grads.d_uncertainty.get(px, py, 0);
                    if g.iter().all(|&v| v == 0.0) {
                        continue;
                    }

                    // Replay the forward blend, recording contributions.
                    hits.clear();
                    let mut transmittance = 1.0f64;
                    let mut totals = [0.0; PAYLOAD_CHANNELS];
                    for (pos, &idx) in candidates.iter().enumerate() {
                        let s = &splats[idx];
                        if !s.covers(pcx, pcy) {
                            continue;
                        }
                        let sigma = (s.opacity * s.gaussian(pcx, pcy)).min(SIGMA_MAX);
                        if sigma <= 0.0 {
                            continue;
                        }
                        let weight = sigma * transmittance;
                        for (t, p) in totals.iter_mut().zip(&s.payload) {
                            *t += p * weight;
                        }
                        hits.push((pos, sigma, transmittance));
                        transmittance *= 1.0 - sigma;
                        if transmittance < TRANSMITTANCE_EPS {
                            break;
                        }
                    }
                    let final_t = transmittance;
                    for c in 0..3 {
                        totals[RAW_OFFSET + c] += final_t * config.background[c];
                        totals[MAPPED_OFFSET + c] += final_t * config.background[c];
                    }
                    totals[BETA_CHANNEL] += final_t * config.beta_background;

                    // Walk front-to-back again, turning suffix sums into grads.
                    let mut prefix = [0.0; PAYLOAD_CHANNELS];
                    for &(pos, sigma, t_before) in &hits {
                        let idx = candidates[pos];
                        let s = &splats[idx];
                        let weight = sigma * t_before;
                        let acc = &mut local[pos];

                        let mut d_sigma = 0.0;
                        for c in 0..PAYLOAD_CHANNELS {
                            let gc = g[c];
                            let contribution = s.payload[c] * weight;
                            if gc != 0.0 {
                                acc.d_payload[c] += gc * weight;
                                let suffix = totals[c] - prefix[c] - contribution;
                                d_sigma += gc * (s.payload[c] * t_before - suffix / (1.0 - sigma));
                            }
                            prefix[c] += contribution;
                        }

                        let gaussian = s.gaussian(pcx, pcy);
                        if s.opacity * gaussian < SIGMA_MAX {
                            acc.d_opacity += d_sigma * gaussian;
                            let d_gaussian = d_sigma * s.opacity;
                            let dx = pcx - s.mean.x;
                            let dy = pcy - s.mean.y;
                            let md = Vector2::new(
                                s.conic[(0, 0)] * dx + s.conic[(0, 1)] * dy,
                                s.conic[(1, 0)] * dx + s.conic[(1, 1)] * dy,
                            );
                            // d gaussian / d mean = gaussian * conic * d
                            acc.d_mean += md * (d_gaussian * gaussian);
                            // d gaussian / d conic = -gaussian/2 * d d^T
                            let f = -0.5 * d_gaussian * gaussian;
                            acc.d_cov[(0, 0)] += f * dx * dx;
                            acc.d_cov[(0, 1)] += f * dx * dy;
                            acc.d_cov[(1, 0)] += f * dy * dx;
                            acc.d_cov[(1, 1)] += f * dy * dy;
                        }
                    }
                }
            }

            // The cov accumulator held d_conic; map it through conic = cov^{-1}.
            for (pos, &idx) in candidates.iter().enumerate() {
                let conic = splats[idx].conic;
                let d_conic = local[pos].d_cov;
                local[pos].d_cov = -(conic * d_conic * conic);
            }
            local
        })
        .collect();

    let mut out = vec![SplatGrad::zero(); splats.len()];
    for (tile, local) in tile_grads.iter().enumerate() {
        for (pos, grad) in local.iter().enumerate() {
            out[bins[tile][pos]].add(grad);
        }
    }
    Ok(out)
}

/// Gradients w.r.t. one primitive's world-space attributes.
#[derive(Debug, Clone)]
pub struct ProjectedGrad {
    pub d_position: Vector3<f64>,
    /// Gradient w.r.t. the unit quaternion.
    pub d_rotation: Vector4<f64>,
    pub d_scale: Vector3<f64>,
    pub d_opacity: f64,
    pub d_payload: [f64; PAYLOAD_CHANNELS],
}

/// Chains a [`SplatGrad`] through the EWA projection and the covariance
/// construction back to the primitive.
pub fn project_gradients(grad: &SplatGrad, prim: &GaussianPrimitive, camera: &Camera) -> ProjectedGrad {
    let p_cam = camera.rotation * prim.position + camera.translation;
    let jac = perspective_jacobian(&p_cam, camera);
    let rot_world = rotation_from_quat(&prim.rotation);
    let s = prim.scale;
    let diag = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
    let world_cov = rot_world * diag * rot_world.transpose();
    let cam_cov = camera.rotation * world_cov * camera.rotation.transpose();

    // The forward treats cov as symmetric; symmetrize the incoming gradient.
    let g_cov = (grad.d_cov + grad.d_cov.transpose()) * 0.5;

    // cov = (J R) world_cov (J R)^T + const
    let a = jac * camera.rotation;
    let d_world_cov = a.transpose() * g_cov * a;

    // Through world_cov = R diag R^T.
    let d_rot_mat = 2.0 * d_world_cov * rot_world * diag;
    let jac_q = rotation_quat_jacobian(&prim.rotation);
    let mut d_rotation = Vector4::zeros();
    for k in 0..4 {
        d_rotation[k] = d_rot_mat.component_mul(&jac_q[k]).sum();
    }
    let d_diag = rot_world.transpose() * d_world_cov * rot_world;
    let d_scale = Vector3::new(
        d_diag[(0, 0)] * 2.0 * s.x,
        d_diag[(1, 1)] * 2.0 * s.y,
        d_diag[(2, 2)] * 2.0 * s.z,
    );

    // Mean path: d mean / d p_cam is the same Jacobian.
    let mut d_p_cam = jac.transpose() * grad.d_mean;

    // Covariance also depends on p_cam through J.
    let d_jac = 2.0 * g_cov * jac * cam_cov;
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let z_inv = 1.0 / z;
    let z_inv2 = z_inv * z_inv;
    let z_inv3 = z_inv2 * z_inv;
    d_p_cam.x += d_jac[(0, 2)] * (-camera.fx * z_inv2);
    d_p_cam.y += d_jac[(1, 2)] * (-camera.fy * z_inv2);
    d_p_cam.z += d_jac[(0, 0)] * (-camera.fx * z_inv2)
        + d_jac[(1, 1)] * (-camera.fy * z_inv2)
        + d_jac[(0, 2)] * (2.0 * camera.fx * x * z_inv3)
        + d_jac[(1, 2)] * (2.0 * camera.fy * y * z_inv3);

    ProjectedGrad {
        d_position: camera.rotation.transpose() * d_p_cam,
        d_rotation,
        d_scale,
        d_opacity: grad.d_opacity,
        d_payload: grad.d_payload,
    }
}

/// Projects a whole primitive set; returned pairs keep the primitive index.
pub fn project_all(primitives: &[GaussianPrimitive], camera: &Camera, config: &RasterConfig) -> Vec<(usize, Splat2D)> {
    primitives
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            project_ewa(p, camera, config).map(|mut s| {
                s.primitive_index = i;
                (i, s)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_camera(width: usize, height: usize) -> Camera {
        Camera {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            fx: 100.0,
            fy: 100.0,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    fn isotropic_primitive(position: Vector3<f64>) -> GaussianPrimitive {
        GaussianPrimitive {
            position,
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            scale: Vector3::new(1.0, 1.0, 1.0),
            opacity: 0.8,
            raw_color: Vector3::new(1.0, 0.0, 0.0),
            mapped_color: Vector3::new(1.0, 0.0, 0.0),
            uncertainty: 0.5,
            kernel_index: 0,
        }
    }

    #[test]
    fn projection_on_axis_matches_closed_form() {
        let cam = test_camera(64, 64);
        let prim = isotropic_primitive(Vector3::new(0.0, 0.0, 10.0));
        let splat = project_ewa(&prim, &cam, &RasterConfig::default()).unwrap();
        assert_relative_eq!(splat.mean.x, 32.0, epsilon = 1e-12);
        assert_relative_eq!(splat.mean.y, 32.0, epsilon = 1e-12);
        // J = diag(f/z, f/z); cov = (f/z)^2 I + low-pass.
        assert_relative_eq!(splat.cov[(0, 0)], 100.3, epsilon = 1e-6);
        assert_relative_eq!(splat.cov[(1, 1)], 100.3, epsilon = 1e-6);
        assert_relative_eq!(splat.cov[(0, 1)], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn primitive_behind_camera_is_culled() {
        let cam = test_camera(64, 64);
        let prim = isotropic_primitive(Vector3::new(0.0, 0.0, -5.0));
        assert!(project_ewa(&prim, &cam, &RasterConfig::default()).is_none());
    }

    #[test]
    fn projection_is_rigid_translation_invariant() {
        let width = 64;
        let eye = Vector3::new(1.0, -2.0, 0.5);
        let target = Vector3::new(0.3, 0.1, 4.0);
        let shift = Vector3::new(10.0, -3.0, 7.0);
        let cam_a = Camera::look_at(eye, target, Vector3::new(0.0, 0.0, 1.0), 90.0, 90.0, width, width);
        let cam_b = Camera::look_at(eye + shift, target + shift, Vector3::new(0.0, 0.0, 1.0), 90.0, 90.0, width, width);
        let mut prim = isotropic_primitive(target);
        prim.scale = Vector3::new(0.2, 0.3, 0.1);
        let mut prim_b = prim.clone();
        prim_b.position += shift;
        let sa = project_ewa(&prim, &cam_a, &RasterConfig::default()).unwrap();
        let sb = project_ewa(&prim_b, &cam_b, &RasterConfig::default()).unwrap();
        assert_relative_eq!(sa.mean, sb.mean, epsilon = 1e-9);
        assert_relative_eq!(sa.cov, sb.cov, epsilon = 1e-9);
        assert_relative_eq!(sa.depth, sb.depth, epsilon = 1e-9);
    }

    fn single_pixel_splat(payload: [f64; PAYLOAD_CHANNELS], opacity: f64, depth: f64, index: usize) -> Splat2D {
        // A huge flat Gaussian: G = 1 at the pixel center of a 1x1 image.
        let cov = Matrix2::identity() * 1e12;
        Splat2D {
            mean: Vector2::new(0.5, 0.5),
            cov,
            conic: cov.try_inverse().unwrap(),
            depth,
            radius: 1e7,
            opacity,
            payload,
            primitive_index: index,
        }
    }

    #[test]
    fn single_splat_blend_is_one_term() {
        let mut payload = [0.0; PAYLOAD_CHANNELS];
        payload[0] = 1.0;
        let splat = single_pixel_splat(payload, 0.8, 1.0, 0);
        let out = rasterize(&[splat], 1, 1, &RasterConfig::default()).unwrap();
        assert_relative_eq!(out.raw.get(0, 0, 0), 0.8, epsilon = 1e-12);
        assert_relative_eq!(out.raw.get(0, 0, 1), 0.0);
        assert_relative_eq!(out.alpha.get(0, 0, 0), 0.8, epsilon = 1e-12);
        assert_eq!(out.contributors.get(0, 0, 0), 1.0);
    }

    #[test]
    fn two_coincident_splats_compose_front_to_back() {
        let mut red = [0.0; PAYLOAD_CHANNELS];
        red[0] = 1.0;
        let mut green = [0.0; PAYLOAD_CHANNELS];
        green[1] = 1.0;
        let front = single_pixel_splat(red, 0.5, 1.0, 0);
        let back = single_pixel_splat(green, 0.5, 2.0, 1);
        // Input order back-to-front; the renderer sorts internally.
        let out = rasterize(&[back, front], 1, 1, &RasterConfig::default()).unwrap();
        assert_relative_eq!(out.raw.get(0, 0, 0), 0.5, epsilon = 1e-12);
        assert_relative_eq!(out.raw.get(0, 0, 1), 0.25, epsilon = 1e-12);
        assert_relative_eq!(out.raw.get(0, 0, 2), 0.0);
    }

    fn random_scene(seed: u64, n: usize, width: usize, height: usize) -> Vec<Splat2D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let a = rng.gen::<f64>() * 8.0 + 0.4;
                let c = rng.gen::<f64>() * 8.0 + 0.4;
                let b = (rng.gen::<f64>() - 0.5) * 0.8 * (a * c).sqrt();
                let cov = Matrix2::new(a, b, b, c);
                let mut payload = [0.0; PAYLOAD_CHANNELS];
                for p in payload.iter_mut() {
                    *p = rng.gen::<f64>();
                }
                Splat2D {
                    mean: Vector2::new(rng.gen::<f64>() * width as f64, rng.gen::<f64>() * height as f64),
                    cov,
                    conic: cov.try_inverse().unwrap(),
                    depth: rng.gen::<f64>() * 10.0 + 0.1,
                    radius: 3.0 * sym2_max_eigenvalue(a, b, c).sqrt(),
                    opacity: rng.gen::<f64>() * 0.9 + 0.05,
                    payload,
                    primitive_index: i,
                }
            })
            .collect()
    }

    /// Untiled scalar reference: per pixel, walk all splats front to back.
    fn reference_render(splats: &[Splat2D], width: usize, height: usize, config: &RasterConfig) -> RenderOutput {
        let mut order: Vec<usize> = (0..splats.len()).collect();
        order.sort_by(|&a, &b| {
            splats[a]
                .depth
                .partial_cmp(&splats[b].depth)
                .unwrap()
                .then(splats[a].primitive_index.cmp(&splats[b].primitive_index))
        });
        let mut raw = Image::new(width, height, 3);
        let mut mapped = Image::new(width, height, 3);
        let mut uncertainty = Image::new(width, height, 1);
        let mut alpha = Image::new(width, height, 1);
        let mut contributors = Image::new(width, height, 1);
        for py in 0..height {
            for px in 0..width {
                let (pcx, pcy) = (px as f64 + 0.5, py as f64 + 0.5);
                let mut t = 1.0;
                let mut acc = [0.0; PAYLOAD_CHANNELS];
                let mut n = 0u32;
                for &i in &order {
                    let s = &splats[i];
                    if (pcx - s.mean.x).abs() > s.radius || (pcy - s.mean.y).abs() > s.radius {
                        continue;
                    }
                    let dx = pcx - s.mean.x;
                    let dy = pcy - s.mean.y;
                    let q = s.conic[(0, 0)] * dx * dx + 2.0 * s.conic[(0, 1)] * dx * dy + s.conic[(1, 1)] * dy * dy;
                    let sigma = (s.opacity * (-0.5 * q).exp()).min(SIGMA_MAX);
                    if sigma <= 0.0 {
                        continue;
                    }
                    for (a, p) in acc.iter_mut().zip(&s.payload) {
                        *a += p * sigma * t;
                    }
                    n += 1;
                    t *= 1.0 - sigma;
                    if t < TRANSMITTANCE_EPS {
                        break;
                    }
                }
                for c in 0..3 {
                    raw.set(px, py, c, acc[c] + t * config.background[c]);
                    mapped.set(px, py, c, acc[3 + c] + t * config.background[c]);
                }
                uncertainty.set(px, py, 0, acc[6] + t * config.beta_background);
                alpha.set(px, py, 0, 1.0 - t);
                contributors.set(px, py, 0, n as f64);
            }
        }
        RenderOutput {
            raw,
            mapped,
            uncertainty,
            alpha,
            contributors,
        }
    }

    #[test]
    fn tiled_render_matches_untiled_reference() {
        let config = RasterConfig::default();
        for seed in 0..5 {
            let splats = random_scene(seed, 200, 48, 40);
            let fast = rasterize(&splats, 48, 40, &config).unwrap();
            let slow = reference_render(&splats, 48, 40, &config);
            assert!(fast.raw.max_abs_diff(&slow.raw) < 1e-6);
            assert!(fast.mapped.max_abs_diff(&slow.mapped) < 1e-6);
            assert!(fast.uncertainty.max_abs_diff(&slow.uncertainty) < 1e-6);
            assert!(fast.alpha.max_abs_diff(&slow.alpha) < 1e-6);
            assert_eq!(fast.contributors, slow.contributors);
        }
    }

    #[test]
    fn permutation_and_tile_size_invariance() {
        let config = RasterConfig::default();
        let splats = random_scene(11, 120, 33, 29);
        let base = rasterize(&splats, 33, 29, &config).unwrap();

        let mut permuted = splats.clone();
        permuted.reverse();
        let out = rasterize(&permuted, 33, 29, &config).unwrap();
        assert_eq!(base.raw, out.raw);
        assert_eq!(base.alpha, out.alpha);

        for ts in [8usize, 16, 32] {
            let cfg = RasterConfig {
                tile_size: ts,
                ..config.clone()
            };
            let out = rasterize(&splats, 33, 29, &cfg).unwrap();
            assert!(base.raw.max_abs_diff(&out.raw) < 1e-6);
            assert!(base.mapped.max_abs_diff(&out.mapped) < 1e-6);
            assert!(base.uncertainty.max_abs_diff(&out.uncertainty) < 1e-6);
        }
    }

    #[test]
    fn payload_blending_is_linear() {
        let config = RasterConfig {
            background: Vector3::zeros(),
            beta_background: 0.0,
            ..RasterConfig::default()
        };
        let splats_a = random_scene(21, 60, 24, 24);
        let mut splats_b = splats_a.clone();
        let mut splats_sum = splats_a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for (b, s) in splats_b.iter_mut().zip(&mut splats_sum) {
            for c in 0..PAYLOAD_CHANNELS {
                let v = rng.gen::<f64>();
                b.payload[c] = v;
                s.payload[c] += v;
            }
        }
        let ra = rasterize(&splats_a, 24, 24, &config).unwrap();
        let rb = rasterize(&splats_b, 24, 24, &config).unwrap();
        let rs = rasterize(&splats_sum, 24, 24, &config).unwrap();
        for i in 0..ra.raw.data().len() {
            let sum = ra.raw.data()[i] + rb.raw.data()[i];
            assert!((rs.raw.data()[i] - sum).abs() < 1e-9);
        }
    }

    #[test]
    fn alpha_stays_in_unit_interval() {
        let splats = random_scene(31, 150, 32, 32);
        let out = rasterize(&splats, 32, 32, &RasterConfig::default()).unwrap();
        for v in out.alpha.data() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn zero_area_image_is_error() {
        assert!(rasterize(&[], 0, 4, &RasterConfig::default()).is_err());
    }

    #[test]
    fn backward_zero_grads_give_zero() {
        let splats = random_scene(5, 30, 16, 16);
        let zeros3 = Image::new(16, 16, 3);
        let zeros1 = Image::new(16, 16, 1);
        let grads = rasterize_backward(
            &splats,
            16,
            16,
            &RasterConfig::default(),
            &RenderGrads {
                d_raw: &zeros3,
                d_mapped: &zeros3,
                d_uncertainty: &zeros1,
            },
        )
        .unwrap();
        for g in grads {
            assert_eq!(g.d_opacity, 0.0);
            assert_eq!(g.d_mean, Vector2::zeros());
            assert!(g.d_payload.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_splat_payload_gradient_is_blend_weight() {
        let mut payload = [0.0; PAYLOAD_CHANNELS];
        payload[0] = 0.7;
        let splat = single_pixel_splat(payload, 0.6, 1.0, 0);
        let mut d_raw = Image::new(1, 1, 3);
        d_raw.set(0, 0, 0, 1.0);
        let zeros3 = Image::new(1, 1, 3);
        let zeros1 = Image::new(1, 1, 1);
        let grads = rasterize_backward(
            &[splat],
            1,
            1,
            &RasterConfig::default(),
            &RenderGrads {
                d_raw: &d_raw,
                d_mapped: &zeros3,
                d_uncertainty: &zeros1,
            },
        )
        .unwrap();
        // d pixel / d payload = sigma; the huge splat has G = 1 at center.
        assert_relative_eq!(grads[0].d_payload[0], 0.6, epsilon = 1e-9);
    }

    /// Scalar loss probing every output channel with fixed random weights,
    /// evaluated through the untiled reference renderer.
    fn probe_loss(splats: &[Splat2D], width: usize, height: usize, config: &RasterConfig, probe: &[f64]) -> f64 {
        let out = reference_render(splats, width, height, config);
        let mut acc = 0.0;
        let mut k = 0;
        for img in [&out.raw, &out.mapped, &out.uncertainty] {
            for v in img.data() {
                acc += v * probe[k];
                k += 1;
            }
        }
        acc
    }

    #[test]
    fn backward_matches_finite_differences_through_reference() {
        let (width, height) = (20, 18);
        let config = RasterConfig::default();
        for seed in 0..3 {
            let splats = random_scene(100 + seed, 20, width, height);
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let probe: Vec<f64> = (0..(width * height * 7)).map(|_| rng.gen::<f64>() - 0.5).collect();

            let mut d_raw = Image::new(width, height, 3);
            let mut d_mapped = Image::new(width, height, 3);
            let mut d_unc = Image::new(width, height, 1);
            let mut k = 0;
            for img in [&mut d_raw, &mut d_mapped, &mut d_unc] {
                for v in img.data_mut() {
                    *v = probe[k];
                    k += 1;
                }
            }
            let grads = rasterize_backward(
                &splats,
                width,
                height,
                &config,
                &RenderGrads {
                    d_raw: &d_raw,
                    d_mapped: &d_mapped,
                    d_uncertainty: &d_unc,
                },
            )
            .unwrap();

            let check = |analytic: f64, fd: f64, what: &str| {
                let denom = fd.abs().max(analytic.abs()).max(1e-4);
                assert!(
                    ((analytic - fd) / denom).abs() < 1e-3,
                    "{what}: analytic {analytic} vs fd {fd}"
                );
            };

            for i in (0..splats.len()).step_by(4) {
                // Opacity.
                let h = 1e-6;
                let mut sp = splats.clone();
                sp[i].opacity += h;
                let fp = probe_loss(&sp, width, height, &config, &probe);
                sp[i].opacity -= 2.0 * h;
                let fm = probe_loss(&sp, width, height, &config, &probe);
                check(grads[i].d_opacity, (fp - fm) / (2.0 * h), "opacity");

                // Payload channel 2.
                let mut sp = splats.clone();
                sp[i].payload[2] += h;
                let fp = probe_loss(&sp, width, height, &config, &probe);
                sp[i].payload[2] -= 2.0 * h;
                let fm = probe_loss(&sp, width, height, &config, &probe);
                check(grads[i].d_payload[2], (fp - fm) / (2.0 * h), "payload");

                // Mean, both axes (h = 1e-4 px).
                let h = 1e-4;
                for axis in 0..2 {
                    let mut sp = splats.clone();
                    sp[i].mean[axis] += h;
                    let fp = probe_loss(&sp, width, height, &config, &probe);
                    sp[i].mean[axis] -= 2.0 * h;
                    let fm = probe_loss(&sp, width, height, &config, &probe);
                    check(grads[i].d_mean[axis], (fp - fm) / (2.0 * h), "mean");
                }

                // Covariance entries (perturb symmetrically, refresh conic).
                let h = 1e-5;
                for (r, c) in [(0, 0), (0, 1), (1, 1)] {
                    let mut sp = splats.clone();
                    sp[i].cov[(r, c)] += h;
                    sp[i].cov[(c, r)] = sp[i].cov[(r, c)];
                    sp[i].conic = sp[i].cov.try_inverse().unwrap();
                    let fp = probe_loss(&sp, width, height, &config, &probe);
                    let mut sp = splats.clone();
                    sp[i].cov[(r, c)] -= h;
                    sp[i].cov[(c, r)] = sp[i].cov[(r, c)];
                    sp[i].conic = sp[i].cov.try_inverse().unwrap();
                    let fm = probe_loss(&sp, width, height, &config, &probe);
                    // Off-diagonal perturbation moves both symmetric entries.
                    let analytic = if r == c {
                        grads[i].d_cov[(r, c)]
                    } else {
                        grads[i].d_cov[(r, c)] + grads[i].d_cov[(c, r)]
                    };
                    check(analytic, (fp - fm) / (2.0 * h), "cov");
                }
            }
        }
    }

    #[test]
    fn project_gradients_match_finite_differences() {
        let cam = Camera::look_at(
            Vector3::new(0.4, -2.5, 1.0),
            Vector3::new(0.0, 0.0, 0.5),
            Vector3::new(0.0, 0.0, 1.0),
            80.0,
            80.0,
            32,
            32,
        );
        let config = RasterConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..5 {
            let raw_q = Vector4::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            );
            let (q, _) = crate::math::normalize4(&raw_q);
            let prim = GaussianPrimitive {
                position: Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() * 0.4),
                rotation: q,
                scale: Vector3::new(
                    0.05 + rng.gen::<f64>() * 0.2,
                    0.05 + rng.gen::<f64>() * 0.2,
                    0.05 + rng.gen::<f64>() * 0.2,
                ),
                opacity: 0.7,
                raw_color: Vector3::new(0.2, 0.4, 0.6),
                mapped_color: Vector3::new(0.2, 0.4, 0.6),
                uncertainty: 0.3,
                kernel_index: 0,
            };
            // Random upstream gradient on the splat.
            let g = SplatGrad {
                d_mean: Vector2::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5),
                d_cov: {
                    let a = rng.gen::<f64>() - 0.5;
                    let b = rng.gen::<f64>() - 0.5;
                    let c = rng.gen::<f64>() - 0.5;
                    Matrix2::new(a, b, b, c)
                },
                d_opacity: 0.0,
                d_payload: [0.0; PAYLOAD_CHANNELS],
            };
            let value = |prim: &GaussianPrimitive| -> f64 {
                let s = project_ewa(prim, &cam, &config).unwrap();
                g.d_mean.dot(&s.mean) + (g.d_cov.transpose() * s.cov).trace()
            };
            let out = project_gradients(&g, &prim, &cam);
            let h = 1e-6;
            let check = |analytic: f64, fd: f64, what: &str| {
                let denom = fd.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    ((analytic - fd) / denom).abs() < 1e-3,
                    "trial {trial} {what}: analytic {analytic} vs fd {fd}"
                );
            };
            for c in 0..3 {
                let mut pp = prim.clone();
                let mut pm = prim.clone();
                pp.position[c] += h;
                pm.position[c] -= h;
                check(out.d_position[c], (value(&pp) - value(&pm)) / (2.0 * h), "position");
            }
            for c in 0..3 {
                let mut pp = prim.clone();
                let mut pm = prim.clone();
                pp.scale[c] += h;
                pm.scale[c] -= h;
                check(out.d_scale[c], (value(&pp) - value(&pm)) / (2.0 * h), "scale");
            }
            // Quaternion: perturb raw components and renormalize; compare the
            // analytic gradient mapped through the same normalization.
            for c in 0..4 {
                let mut qp = prim.rotation;
                let mut qm = prim.rotation;
                qp[c] += h;
                qm[c] -= h;
                let (qpn, _) = crate::math::normalize4(&qp);
                let (qmn, _) = crate::math::normalize4(&qm);
                let mut pp = prim.clone();
                let mut pm = prim.clone();
                pp.rotation = qpn;
                pm.rotation = qmn;
                let fd = (value(&pp) - value(&pm)) / (2.0 * h);
                let proj = crate::math::normalize4_backward(&prim.rotation, 1.0, &out.d_rotation);
                check(proj[c], fd, "rotation");
            }
        }
    }

    #[test]
    fn isotropic_rotation_gradient_vanishes() {
        let cam = test_camera(32, 32);
        let mut prim = isotropic_primitive(Vector3::new(0.1, -0.2, 6.0));
        prim.scale = Vector3::new(0.4, 0.4, 0.4);
        let raw_q = Vector4::new(0.6, -0.3, 0.2, 0.7);
        prim.rotation = crate::math::normalize4(&raw_q).0;
        let g = SplatGrad {
            d_mean: Vector2::zeros(),
            d_cov: Matrix2::new(0.3, -0.1, -0.1, 0.8),
            d_opacity: 0.0,
            d_payload: [0.0; PAYLOAD_CHANNELS],
        };
        let out = project_gradients(&g, &prim, &cam);
        // Sigma is rotation-invariant when S = sI; the gradient on the unit
        // sphere tangent vanishes.
        let tangent = crate::math::normalize4_backward(&prim.rotation, 1.0, &out.d_rotation);
        assert!(tangent.norm() < 1e-6, "tangent grad {}", tangent.norm());
    }
}
