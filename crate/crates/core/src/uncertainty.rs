//! Gaussian-wise uncertainty prediction, patch features, and the boundary
//! penalty mask.
//!
//! Uncertainties come from a head conditioned on the kernel's uncertainty
//! embedding and the image's transient embedding, then rasterize into a
//! pixel map. Patch feature dissimilarity between the rendered and reference
//! images drives the uncertainty loss; the built-in descriptor (mean RGB,
//! RGB std, 8-bin gradient-orientation histogram) stands behind the same
//! interface as externally supplied feature files.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::img::Image;
use crate::nn::{Mlp, MlpCache, MlpGrads, Mode, OutputActivation};

pub const UNCERTAINTY_HIDDEN_WIDTH: usize = 64;
pub const DEFAULT_BETA_MIN: f64 = 0.1;
pub const DEFAULT_PATCH_SIZE: usize = 16;
pub const BUILTIN_FEATURE_LEN: usize = 14;

pub const FEATURE_MAGIC: &[u8; 4] = b"NXFT";

/// F_beta plus the uncertainty floor.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyHead {
    pub mlp: Mlp,
    pub beta_min: f64,
    uncertainty_dim: usize,
    transient_dim: usize,
}

impl UncertaintyHead {
    pub fn new(uncertainty_dim: usize, transient_dim: usize, h: usize, beta_min: f64, rng: &mut ChaCha8Rng) -> UncertaintyHead {
        let w = UNCERTAINTY_HIDDEN_WIDTH;
        let mut mlp = Mlp::new(&[uncertainty_dim + transient_dim, w, w, h], OutputActivation::Softplus, 0.0);
        mlp.init_random(rng, 0.0);
        UncertaintyHead {
            mlp,
            beta_min,
            uncertainty_dim,
            transient_dim,
        }
    }

    pub fn from_parts(mlp: Mlp, beta_min: f64, uncertainty_dim: usize, transient_dim: usize) -> Result<UncertaintyHead> {
        if mlp.input_width() != uncertainty_dim + transient_dim {
            return Err(Error::dim(
                "uncertainty head input",
                uncertainty_dim + transient_dim,
                mlp.input_width(),
            ));
        }
        Ok(UncertaintyHead {
            mlp,
            beta_min,
            uncertainty_dim,
            transient_dim,
        })
    }

    pub fn transient_dim(&self) -> usize {
        self.transient_dim
    }

    pub fn uncertainty_dim(&self) -> usize {
        self.uncertainty_dim
    }
}

#[derive(Debug, Clone)]
pub struct UncertaintyCache {
    cache: MlpCache,
    pub betas: Vec<f64>,
}

/// beta_i = softplus(F_beta(eps_beta, eps_tau))_i + beta_min.
pub fn predict_uncertainties(head: &UncertaintyHead, uncertainty_emb: &[f64], transient: &[f64]) -> Result<UncertaintyCache> {
    if uncertainty_emb.len() != head.uncertainty_dim {
        return Err(Error::dim("uncertainty embedding", head.uncertainty_dim, uncertainty_emb.len()));
    }
    if transient.len() != head.transient_dim {
        return Err(Error::dim("transient embedding", head.transient_dim, transient.len()));
    }
    let mut input = Vec::with_capacity(uncertainty_emb.len() + transient.len());
    input.extend_from_slice(uncertainty_emb);
    input.extend_from_slice(transient);
    let (out, cache) = head.mlp.forward(&input, Mode::Eval, None)?;
    let betas = out.iter().map(|v| v + head.beta_min).collect();
    Ok(UncertaintyCache { cache, betas })
}

#[derive(Debug, Clone)]
pub struct UncertaintyGrads {
    pub d_uncertainty_emb: Vec<f64>,
    pub d_transient: Vec<f64>,
    pub head: MlpGrads,
}

pub fn predict_uncertainties_backward(head: &UncertaintyHead, cache: &UncertaintyCache, d_betas: &[f64]) -> Result<UncertaintyGrads> {
    let (grad_input, grads) = head.mlp.backward(&cache.cache, d_betas)?;
    let (d_emb, d_tau) = grad_input.split_at(head.uncertainty_dim);
    Ok(UncertaintyGrads {
        d_uncertainty_emb: d_emb.to_vec(),
        d_transient: d_tau.to_vec(),
        head: grads,
    })
}

/// Center and spread of the boundary penalty (pixels / pixels^2).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundaryPenaltyParams {
    pub center_x: f64,
    pub center_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub floor: f64,
}

impl BoundaryPenaltyParams {
    pub fn defaults_for(width: usize, height: usize) -> BoundaryPenaltyParams {
        let w = width as f64;
        let h = height as f64;
        BoundaryPenaltyParams {
            center_x: w / 2.0,
            center_y: h / 2.0,
            var_x: (w / 3.0) * (w / 3.0),
            var_y: (h / 3.0) * (h / 3.0),
            floor: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.var_x <= 0.0 || self.var_y <= 0.0 {
            return Err(Error::data("boundary penalty variances must be positive"));
        }
        if !(self.floor > 0.0 && self.floor <= 1.0) {
            return Err(Error::data("boundary penalty floor must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Penalty value at a continuous image position.
pub fn penalty_at(params: &BoundaryPenaltyParams, x: f64, y: f64) -> f64 {
    let dx = x - params.center_x;
    let dy = y - params.center_y;
    let v = (-(dx * dx) / (2.0 * params.var_x) - (dy * dy) / (2.0 * params.var_y)).exp();
    v.max(params.floor)
}

/// Penalty mask sampled at pixel centers.
pub fn boundary_penalty(width: usize, height: usize, params: &BoundaryPenaltyParams) -> Image {
    Image::from_fn(width, height, 1, |x, y, _| {
        penalty_at(params, x as f64 + 0.5, y as f64 + 0.5)
    })
}

/// Patch feature vectors on a grid covering the image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub rows: usize,
    pub cols: usize,
    pub feat_len: usize,
    pub patch_size: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn patch(&self, row: usize, col: usize) -> &[f64] {
        let idx = (row * self.cols + col) * self.feat_len;
        &self.data[idx..idx + self.feat_len]
    }

    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn same_grid(&self, other: &FeatureMap) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.feat_len == other.feat_len
    }
}

/// Built-in deterministic patch descriptor: mean RGB (3), RGB standard
/// deviation (3), and an 8-bin gradient-orientation histogram of luminance
/// (8), 14 values per patch.
pub fn extract_features(image: &Image, patch_size: usize) -> Result<FeatureMap> {
    if image.channels() != 3 {
        return Err(Error::dim("feature extraction expects RGB", 3, image.channels()));
    }
    if patch_size == 0 {
        return Err(Error::data("patch size must be positive"));
    }
    let (w, h) = (image.width(), image.height());
    let rows = h.div_ceil(patch_size);
    let cols = w.div_ceil(patch_size);

    // Luminance and central-difference gradients over the full image.
    let lum = |x: usize, y: usize| -> f64 {
        0.299 * image.get(x, y, 0) + 0.587 * image.get(x, y, 1) + 0.114 * image.get(x, y, 2)
    };

    let mut data = vec![0.0; rows * cols * BUILTIN_FEATURE_LEN];
    for pr in 0..rows {
        for pc in 0..cols {
            let x0 = pc * patch_size;
            let y0 = pr * patch_size;
            let x1 = (x0 + patch_size).min(w);
            let y1 = (y0 + patch_size).min(h);
            let count = ((x1 - x0) * (y1 - y0)) as f64;

            let mut mean = [0.0; 3];
            let mut sq = [0.0; 3];
            let mut hist = [0.0; 8];
            for y in y0..y1 {
                for x in x0..x1 {
                    for c in 0..3 {
                        let v = image.get(x, y, c);
                        mean[c] += v;
                        sq[c] += v * v;
                    }
                    if x > 0 && x + 1 < w && y > 0 && y + 1 < h {
                        let gx = (lum(x + 1, y) - lum(x - 1, y)) * 0.5;
                        let gy = (lum(x, y + 1) - lum(x, y - 1)) * 0.5;
                        let mag = (gx * gx + gy * gy).sqrt();
                        if mag > 0.0 {
                            let angle = gy.atan2(gx);
                            let bin = (((angle + std::f64::consts::PI) / (std::f64::consts::PI / 4.0)) as usize).min(7);
                            hist[bin] += mag;
                        }
                    }
                }
            }
            let fidx = (pr * cols + pc) * BUILTIN_FEATURE_LEN;
            for c in 0..3 {
                let m = mean[c] / count;
                data[fidx + c] = m;
                data[fidx + 3 + c] = (sq[c] / count - m * m).max(0.0).sqrt();
            }
            for b in 0..8 {
                data[fidx + 6 + b] = hist[b] / count;
            }
        }
    }
    Ok(FeatureMap {
        rows,
        cols,
        feat_len: BUILTIN_FEATURE_LEN,
        patch_size,
        data,
    })
}

/// Reads an externally produced feature file and checks it against the
/// image's patch grid.
pub fn read_feature_file(path: &Path, image_width: usize, image_height: usize, patch_size: usize) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let err = |msg: &str| Error::parse(path.display().to_string(), msg);
    if bytes.len() < 16 || &bytes[0..4] != FEATURE_MAGIC {
        return Err(err("missing NXFT magic"));
    }
    let read_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let rows = read_u32(4);
    let cols = read_u32(8);
    let feat_len = read_u32(12);
    let expected_rows = image_height.div_ceil(patch_size);
    let expected_cols = image_width.div_ceil(patch_size);
    if rows != expected_rows || cols != expected_cols {
        return Err(err(&format!(
            "feature grid {rows}x{cols} does not match image grid {expected_rows}x{expected_cols}"
        )));
    }
    let n = rows * cols * feat_len;
    if bytes.len() != 16 + n * 4 {
        return Err(err(&format!("payload holds {} bytes, expected {}", bytes.len() - 16, n * 4)));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = 16 + i * 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(err("non-finite feature value"));
        }
        data.push(v as f64);
    }
    Ok(FeatureMap {
        rows,
        cols,
        feat_len,
        patch_size,
        data,
    })
}

pub fn write_feature_file(path: &Path, map: &FeatureMap) -> Result<()> {
    let mut out = Vec::with_capacity(16 + map.data.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(map.rows as u32).to_le_bytes());
    out.extend_from_slice(&(map.cols as u32).to_le_bytes());
    out.extend_from_slice(&(map.feat_len as u32).to_le_bytes());
    for v in &map.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&out).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Per-patch dissimilarity (1 - cosine) plus the plain cosine sum.
#[derive(Debug, Clone)]
pub struct Dissimilarity {
    pub per_patch: Vec<f64>,
    /// Sum of per-patch cosines, reported as a diagnostic.
    pub cosine_sum: f64,
    rows: usize,
    cols: usize,
    patch_size: usize,
}

impl Dissimilarity {
    /// Broadcasts each patch's dissimilarity to its pixels.
    pub fn to_pixel_map(&self, width: usize, height: usize) -> Image {
        Image::from_fn(width, height, 1, |x, y, _| {
            let pr = (y / self.patch_size).min(self.rows - 1);
            let pc = (x / self.patch_size).min(self.cols - 1);
            self.per_patch[pr * self.cols + pc]
        })
    }
}

/// Cosine-based patch dissimilarity; zero-vector patches count as identical.
pub fn feature_dissimilarity(rendered: &FeatureMap, reference: &FeatureMap) -> Result<Dissimilarity> {
    if !rendered.same_grid(reference) {
        return Err(Error::data(format!(
            "feature grids differ: {}x{}x{} vs {}x{}x{}",
            rendered.rows, rendered.cols, rendered.feat_len, reference.rows, reference.cols, reference.feat_len
        )));
    }
    let mut per_patch = Vec::with_capacity(rendered.patch_count());
    let mut cosine_sum = 0.0;
    for r in 0..rendered.rows {
        for c in 0..rendered.cols {
            let a = rendered.patch(r, c);
            let b = reference.patch(r, c);
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                (dot / (na * nb)).clamp(-1.0, 1.0)
            };
            cosine_sum += cos;
            per_patch.push(1.0 - cos);
        }
    }
    Ok(Dissimilarity {
        per_patch,
        cosine_sum,
        rows: rendered.rows,
        cols: rendered.cols,
        patch_size: rendered.patch_size,
    })
}

/// Transient embedding table, Gaussian init with std 0.01.
pub fn init_transient_embeddings(image_count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if image_count == 0 {
        return Err(Error::data("transient embedding table needs at least one image"));
    }
    Ok((0..image_count).map(|_| crate::nn::gaussian_vec(rng, dim, 0.01)).collect())
}

/// Luminance helper shared with tests.
pub fn luminance(rgb: &Vector3<f64>) -> f64 {
    0.299 * rgb.x + 0.587 * rgb.y + 0.114 * rgb.z
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn head(seed: u64, beta_min: f64) -> UncertaintyHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        UncertaintyHead::new(6, 4, 5, beta_min, &mut rng)
    }

    #[test]
    fn zeroed_head_gives_ln2_plus_floor() {
        let mut h = head(0, 0.1);
        h.mlp.zero_final_layer();
        let out = predict_uncertainties(&h, &vec![0.4; 6], &vec![-0.2; 4]).unwrap();
        for b in &out.betas {
            assert_relative_eq!(*b, std::f64::consts::LN_2 + 0.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_inputs_identical_outputs_and_floor_holds() {
        let h = head(1, 0.1);
        let a = predict_uncertainties(&h, &vec![0.3; 6], &vec![0.1; 4]).unwrap();
        let b = predict_uncertainties(&h, &vec![0.3; 6], &vec![0.1; 4]).unwrap();
        assert_eq!(a.betas, b.betas);
        assert!(a.betas.iter().all(|&v| v >= 0.1));
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let mut h = head(2, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        h.mlp.init_random(&mut rng, 0.3);
        let emb: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() - 0.5).collect();
        let tau: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
        let probe: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() - 0.5).collect();

        let value = |emb: &[f64], tau: &[f64]| -> f64 {
            predict_uncertainties(&h, emb, tau)
                .unwrap()
                .betas
                .iter()
                .zip(&probe)
                .map(|(b, p)| b * p)
                .sum()
        };
        let cache = predict_uncertainties(&h, &emb, &tau).unwrap();
        let grads = predict_uncertainties_backward(&h, &cache, &probe).unwrap();
        let step = 1e-5;
        for k in 0..6 {
            let mut ep = emb.clone();
            let mut em = emb.clone();
            ep[k] += step;
            em[k] -= step;
            let fd = (value(&ep, &tau) - value(&em, &tau)) / (2.0 * step);
            let denom = fd.abs().max(grads.d_uncertainty_emb[k].abs()).max(1e-6);
            assert!(((grads.d_uncertainty_emb[k] - fd) / denom).abs() < 1e-4);
        }
        for k in 0..4 {
            let mut tp = tau.clone();
            let mut tm = tau.clone();
            tp[k] += step;
            tm[k] -= step;
            let fd = (value(&emb, &tp) - value(&emb, &tm)) / (2.0 * step);
            let denom = fd.abs().max(grads.d_transient[k].abs()).max(1e-6);
            assert!(((grads.d_transient[k] - fd) / denom).abs() < 1e-4);
        }
    }

    #[test]
    fn penalty_center_is_one_and_one_sigma_matches() {
        let params = BoundaryPenaltyParams::defaults_for(96, 96);
        assert_relative_eq!(penalty_at(&params, params.center_x, params.center_y), 1.0);
        let one_sigma = penalty_at(&params, params.center_x + params.var_x.sqrt(), params.center_y);
        assert_relative_eq!(one_sigma, (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn penalty_is_symmetric_and_monotone_from_center() {
        let params = BoundaryPenaltyParams::defaults_for(64, 48);
        for d in [1.0, 5.5, 13.0, 20.0] {
            assert_relative_eq!(
                penalty_at(&params, params.center_x + d, params.center_y),
                penalty_at(&params, params.center_x - d, params.center_y),
                epsilon = 1e-15
            );
        }
        let mut prev = f64::INFINITY;
        for step in 0..30 {
            let v = penalty_at(&params, params.center_x + step as f64, params.center_y);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
        // The floor clamps far-away values.
        assert_relative_eq!(penalty_at(&params, 1e6, params.center_y), params.floor);
    }

    #[test]
    fn constant_gray_image_features() {
        let img = Image::from_fn(32, 32, 3, |_, _, _| 0.5);
        let feat = extract_features(&img, 16).unwrap();
        assert_eq!((feat.rows, feat.cols), (2, 2));
        for r in 0..2 {
            for c in 0..2 {
                let p = feat.patch(r, c);
                assert_relative_eq!(p[0], 0.5);
                assert_relative_eq!(p[1], 0.5);
                assert_relative_eq!(p[2], 0.5);
                for v in &p[3..14] {
                    assert_relative_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Image::from_fn(33, 21, 3, |_, _, _| rng.gen());
        let a = extract_features(&img, 16).unwrap();
        let b = extract_features(&img, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn horizontal_step_edge_fills_vertical_gradient_bins() {
        // Dark top half, bright bottom half: gradient points along +y.
        let img = Image::from_fn(16, 16, 3, |_, y, _| if y < 8 { 0.1 } else { 0.9 });
        let feat = extract_features(&img, 16).unwrap();
        let p = feat.patch(0, 0);
        let hist = &p[6..14];
        // Direct pixel-loop oracle: the only nonzero gradients are gy > 0,
        // gx = 0, angle = pi/2, which falls in bin 6 of 8.
        let expected_bin = ((std::f64::consts::FRAC_PI_2 + std::f64::consts::PI) / (std::f64::consts::PI / 4.0)) as usize;
        let total: f64 = hist.iter().sum();
        assert!(total > 0.0);
        assert_relative_eq!(hist[expected_bin], total, epsilon = 1e-12);
    }

    #[test]
    fn dissimilarity_identical_orthogonal_and_scaled() {
        let img = Image::from_fn(20, 20, 3, |x, y, c| ((x + 2 * y + c) % 7) as f64 / 7.0);
        let feat = extract_features(&img, 16).unwrap();
        let same = feature_dissimilarity(&feat, &feat).unwrap();
        assert!(same.per_patch.iter().all(|&d| d.abs() < 1e-12));
        assert_relative_eq!(same.cosine_sum, feat.patch_count() as f64, epsilon = 1e-9);

        // Orthogonal patch vectors.
        let a = FeatureMap {
            rows: 1,
            cols: 2,
            feat_len: 2,
            patch_size: 16,
            data: vec![1.0, 0.0, 0.0, 2.0],
        };
        let b = FeatureMap {
            rows: 1,
            cols: 2,
            feat_len: 2,
            patch_size: 16,
            data: vec![0.0, 3.0, 5.0, 0.0],
        };
        let d = feature_dissimilarity(&a, &b).unwrap();
        assert_relative_eq!(d.per_patch[0], 1.0);
        assert_relative_eq!(d.per_patch[1], 1.0);
        assert_relative_eq!(d.cosine_sum, 0.0);

        // Scale invariance of the cosine.
        let doubled = FeatureMap {
            data: a.data.iter().map(|v| v * 2.0).collect(),
            ..a.clone()
        };
        let d = feature_dissimilarity(&a, &doubled).unwrap();
        assert!(d.per_patch.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn dissimilarity_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img_a = Image::from_fn(48, 32, 3, |_, _, _| rng.gen());
        let img_b = Image::from_fn(48, 32, 3, |_, _, _| rng.gen());
        let fa = extract_features(&img_a, 16).unwrap();
        let fb = extract_features(&img_b, 16).unwrap();
        let ab = feature_dissimilarity(&fa, &fb).unwrap();
        let ba = feature_dissimilarity(&fb, &fa).unwrap();
        assert_eq!(ab.per_patch, ba.per_patch);
    }

    #[test]
    fn grid_mismatch_is_error() {
        let img_a = Image::new(32, 32, 3);
        let img_b = Image::new(48, 32, 3);
        let fa = extract_features(&img_a, 16).unwrap();
        let fb = extract_features(&img_b, 16).unwrap();
        assert!(feature_dissimilarity(&fa, &fb).is_err());
    }

    #[test]
    fn feature_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.nxft");
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = Image::from_fn(40, 24, 3, |_, _, _| rng.gen());
        let feat = extract_features(&img, 16).unwrap();
        write_feature_file(&path, &feat).unwrap();
        let loaded = read_feature_file(&path, 40, 24, 16).unwrap();
        assert_eq!((loaded.rows, loaded.cols, loaded.feat_len), (feat.rows, feat.cols, feat.feat_len));
        // f32 storage rounds the payload.
        for (a, b) in loaded.data.iter().zip(&feat.data) {
            assert!((a - b).abs() < 1e-6);
        }

        // Wrong grid for the image.
        assert!(read_feature_file(&path, 64, 64, 16).is_err());

        // Corrupt magic.
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let err = read_feature_file(&path, 40, 24, 16).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        // Truncated payload.
        write_feature_file(&path, &feat).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_feature_file(&path, 40, 24, 16).is_err());
    }

    #[test]
    fn pixel_map_broadcasts_patches() {
        let d = Dissimilarity {
            per_patch: vec![0.1, 0.2, 0.3, 0.4],
            cosine_sum: 0.0,
            rows: 2,
            cols: 2,
            patch_size: 16,
        };
        let map = d.to_pixel_map(20, 20);
        assert_relative_eq!(map.get(0, 0, 0), 0.1);
        assert_relative_eq!(map.get(17, 2, 0), 0.2);
        assert_relative_eq!(map.get(3, 18, 0), 0.3);
        assert_relative_eq!(map.get(19, 19, 0), 0.4);
    }
}
