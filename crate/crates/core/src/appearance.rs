//! Light decoupling: per-image light embeddings and the color mapper.
//!
//! The mapper turns each primitive's raw color into a lighting-conditioned
//! color by predicting a residual in logit space from
//! `concat(raw_color, appearance_embedding, light_embedding, view_dir)`.
//! A zero-initialized output layer makes the mapping the identity at start.

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{logit, sigmoid};
use crate::nn::{gaussian_vec, Mlp, MlpCache, MlpGrads, Mode, OutputActivation};

/// Raw colors are clamped into this open interval before the logit.
pub const LOGIT_CLAMP: f64 = 1e-4;

pub const MAPPER_HIDDEN_WIDTH: usize = 64;
pub const MAPPER_DROPOUT: f64 = 0.2;

/// The color-mapping network F_theta, shared by all kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceMapper {
    pub mlp: Mlp,
    appearance_dim: usize,
    light_dim: usize,
}

impl AppearanceMapper {
    pub fn new(appearance_dim: usize, light_dim: usize, rng: &mut ChaCha8Rng) -> AppearanceMapper {
        let input = 3 + appearance_dim + light_dim + 3;
        let mut mlp = Mlp::new(
            &[input, MAPPER_HIDDEN_WIDTH, MAPPER_HIDDEN_WIDTH, 3],
            OutputActivation::Identity,
            MAPPER_DROPOUT,
        );
        mlp.init_random(rng, 0.0);
        mlp.zero_final_layer();
        AppearanceMapper {
            mlp,
            appearance_dim,
            light_dim,
        }
    }

    pub fn appearance_dim(&self) -> usize {
        self.appearance_dim
    }

    pub fn light_dim(&self) -> usize {
        self.light_dim
    }

    pub fn from_parts(mlp: Mlp, appearance_dim: usize, light_dim: usize) -> Result<AppearanceMapper> {
        let expected = 3 + appearance_dim + light_dim + 3;
        if mlp.input_width() != expected {
            return Err(Error::dim("appearance mapper input", expected, mlp.input_width()));
        }
        if mlp.output_width() != 3 {
            return Err(Error::dim("appearance mapper output", 3, mlp.output_width()));
        }
        Ok(AppearanceMapper {
            mlp,
            appearance_dim,
            light_dim,
        })
    }
}

/// Forward record for one kernel's color mapping.
#[derive(Debug, Clone)]
pub struct MapCache {
    caches: Vec<MlpCache>,
    raw: Vec<Vector3<f64>>,
    mapped: Vec<Vector3<f64>>,
}

impl MapCache {
    pub fn mapped(&self) -> &[Vector3<f64>] {
        &self.mapped
    }
}

/// Maps the raw colors of one kernel's primitives (Eq.-style residual form:
/// `mapped = sigmoid(logit(raw) + delta)`).
///
/// `rng` drives dropout and is required in train mode.
pub fn map_colors(
    mapper: &AppearanceMapper,
    raw_colors: &[Vector3<f64>],
    appearance: &[f64],
    light: &[f64],
    view_dir: &Vector3<f64>,
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<MapCache> {
    if appearance.len() != mapper.appearance_dim {
        return Err(Error::dim("appearance embedding", mapper.appearance_dim, appearance.len()));
    }
    if light.len() != mapper.light_dim {
        return Err(Error::dim("light embedding", mapper.light_dim, light.len()));
    }
    let mut caches = Vec::with_capacity(raw_colors.len());
    let mut mapped = Vec::with_capacity(raw_colors.len());
    let mut input = vec![0.0; mapper.mlp.input_width()];
    for raw in raw_colors {
        input[0] = raw.x;
        input[1] = raw.y;
        input[2] = raw.z;
        input[3..3 + appearance.len()].copy_from_slice(appearance);
        input[3 + appearance.len()..3 + appearance.len() + light.len()].copy_from_slice(light);
        let off = 3 + appearance.len() + light.len();
        input[off] = view_dir.x;
        input[off + 1] = view_dir.y;
        input[off + 2] = view_dir.z;

        let (delta, cache) = mapper.mlp.forward(&input, mode, rng.as_deref_mut())?;
        let mut out = Vector3::zeros();
        for c in 0..3 {
            let clamped = raw[c].clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
            out[c] = sigmoid(logit(clamped) + delta[c]);
        }
        caches.push(cache);
        mapped.push(out);
    }
    Ok(MapCache {
        caches,
        raw: raw_colors.to_vec(),
        mapped,
    })
}

/// Gradients produced by [`map_colors_backward`].
#[derive(Debug, Clone)]
pub struct MapGrads {
    pub d_raw: Vec<Vector3<f64>>,
    pub d_appearance: Vec<f64>,
    pub d_light: Vec<f64>,
    pub d_view_dir: Vector3<f64>,
    pub mapper: MlpGrads,
}

/// Exact backward of [`map_colors`] for the realized dropout masks.
pub fn map_colors_backward(
    mapper: &AppearanceMapper,
    cache: &MapCache,
    d_mapped: &[Vector3<f64>],
) -> Result<MapGrads> {
    if d_mapped.len() != cache.mapped.len() {
        return Err(Error::dim("mapped color grads", cache.mapped.len(), d_mapped.len()));
    }
    let a_dim = mapper.appearance_dim;
    let l_dim = mapper.light_dim;
    let mut d_raw = vec![Vector3::zeros(); cache.raw.len()];
    let mut d_appearance = vec![0.0; a_dim];
    let mut d_light = vec![0.0; l_dim];
    let mut d_view_dir = Vector3::zeros();
    let mut mapper_grads = MlpGrads::zeros_like(&mapper.mlp);

    for (i, (raw, mapped)) in cache.raw.iter().zip(&cache.mapped).enumerate() {
        // mapped = sigmoid(z), z = logit(clamp(raw)) + delta
        let mut d_z = Vector3::zeros();
        for c in 0..3 {
            d_z[c] = d_mapped[i][c] * mapped[c] * (1.0 - mapped[c]);
        }
        // Residual path into the raw color: d logit(r)/dr = 1/(r(1-r)),
        // zero outside the clamp interval.
        for c in 0..3 {
            let r = raw[c];
            if r > LOGIT_CLAMP && r < 1.0 - LOGIT_CLAMP {
                d_raw[i][c] += d_z[c] / (r * (1.0 - r));
            }
        }
        let (grad_input, grads) = mapper.mlp.backward(&cache.caches[i], d_z.as_slice())?;
        mapper_grads.accumulate(&grads);
        for c in 0..3 {
            d_raw[i][c] += grad_input[c];
        }
        for k in 0..a_dim {
            d_appearance[k] += grad_input[3 + k];
        }
        for k in 0..l_dim {
            d_light[k] += grad_input[3 + a_dim + k];
        }
        for c in 0..3 {
            d_view_dir[c] += grad_input[3 + a_dim + l_dim + c];
        }
    }

    Ok(MapGrads {
        d_raw,
        d_appearance,
        d_light,
        d_view_dir,
        mapper: mapper_grads,
    })
}

/// Per-image light embedding table, Gaussian init with std 0.01.
pub fn init_light_embeddings(image_count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if image_count == 0 {
        return Err(Error::data("light embedding table needs at least one image"));
    }
    Ok((0..image_count).map(|_| gaussian_vec(rng, dim, 0.01)).collect())
}
