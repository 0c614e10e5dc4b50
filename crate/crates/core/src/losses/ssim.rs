//! SSIM with an 11x11 Gaussian window (sigma 1.5), channel-averaged over
//! valid window positions, plus its exact gradient w.r.t. the first image.

use crate::error::{Error, Result};
use crate::img::Image;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const DYNAMIC_RANGE: f64 = 1.0;

fn gaussian_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Horizontal valid convolution of one channel plane.
fn conv_h(src: &[f64], width: usize, height: usize, kernel: &[f64; WINDOW]) -> Vec<f64> {
    let out_w = width - WINDOW + 1;
    let mut out = vec![0.0; out_w * height];
    for y in 0..height {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                acc += src[y * width + x + t] * k;
            }
            out[y * out_w + x] = acc;
        }
    }
    out
}

/// Vertical valid convolution.
fn conv_v(src: &[f64], width: usize, height: usize, kernel: &[f64; WINDOW]) -> Vec<f64> {
    let out_h = height - WINDOW + 1;
    let mut out = vec![0.0; width * out_h];
    for y in 0..out_h {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                acc += src[(y + t) * width + x] * k;
            }
            out[y * width + x] = acc;
        }
    }
    out
}

fn conv2(src: &[f64], width: usize, height: usize, kernel: &[f64; WINDOW]) -> Vec<f64> {
    conv_v(&conv_h(src, width, height, kernel), width - WINDOW + 1, height, kernel)
}

/// Adjoint of `conv2`: scatters a valid-grid gradient back to image size.
fn conv2_adjoint(grad: &[f64], width: usize, height: usize, kernel: &[f64; WINDOW]) -> Vec<f64> {
    let out_w = width - WINDOW + 1;
    let out_h = height - WINDOW + 1;
    // Vertical scatter.
    let mut mid = vec![0.0; out_w * height];
    for y in 0..out_h {
        for x in 0..out_w {
            let g = grad[y * out_w + x];
            if g != 0.0 {
                for (t, k) in kernel.iter().enumerate() {
                    mid[(y + t) * out_w + x] += g * k;
                }
            }
        }
    }
    // Horizontal scatter.
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..out_w {
            let g = mid[y * out_w + x];
            if g != 0.0 {
                for (t, k) in kernel.iter().enumerate() {
                    out[y * width + x + t] += g * k;
                }
            }
        }
    }
    out
}

fn channel_plane(img: &Image, c: usize) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut plane = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = img.get(x, y, c);
        }
    }
    plane
}

fn check_inputs(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::data("ssim inputs differ in shape"));
    }
    if a.width() < WINDOW || a.height() < WINDOW {
        return Err(Error::data(format!(
            "ssim needs at least {WINDOW}x{WINDOW} pixels, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    Ok(())
}

/// Mean SSIM over valid window positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_with_grad_impl(a, b, false)?.0)
}

/// SSIM plus the gradient of the mean SSIM w.r.t. image `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (value, grad) = ssim_with_grad_impl(a, b, true)?;
    Ok((value, grad.unwrap()))
}

fn ssim_with_grad_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check_inputs(a, b)?;
    let (w, h) = (a.width(), a.height());
    let kernel = gaussian_kernel();
    let c1 = (K1 * DYNAMIC_RANGE) * (K1 * DYNAMIC_RANGE);
    let c2 = (K2 * DYNAMIC_RANGE) * (K2 * DYNAMIC_RANGE);
    let out_w = w - WINDOW + 1;
    let out_h = h - WINDOW + 1;
    let positions = (out_w * out_h) as f64;
    let channels = a.channels();

    let mut total = 0.0;
    let mut grad_img = want_grad.then(|| Image::new(w, h, channels));

    for ch in 0..channels {
        let pa = channel_plane(a, ch);
        let pb = channel_plane(b, ch);
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();

        let mu_a = conv2(&pa, w, h, &kernel);
        let mu_b = conv2(&pb, w, h, &kernel);
        let e_aa = conv2(&aa, w, h, &kernel);
        let e_bb = conv2(&bb, w, h, &kernel);
        let e_ab = conv2(&ab, w, h, &kernel);

        let mut g_mu = want_grad.then(|| vec![0.0; out_w * out_h]);
        let mut g_eaa = want_grad.then(|| vec![0.0; out_w * out_h]);
        let mut g_eab = want_grad.then(|| vec![0.0; out_w * out_h]);

        let mut channel_sum = 0.0;
        for i in 0..out_w * out_h {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let sxx = e_aa[i] - ma * ma;
            let syy = e_bb[i] - mb * mb;
            let sxy = e_ab[i] - ma * mb;
            let a1 = 2.0 * ma * mb + c1;
            let a2 = 2.0 * sxy + c2;
            let b1 = ma * ma + mb * mb + c1;
            let b2 = sxx + syy + c2;
            let denom = b1 * b2;
            let s = (a1 * a2) / denom;
            channel_sum += s;

            if want_grad {
                let ds_da1 = a2 / denom;
                let ds_da2 = a1 / denom;
                let ds_db1 = -s / b1;
                let ds_db2 = -s / b2;
                // mu_a moves A1, B1 directly and sxy, sxx through the
                // centering terms.
                g_mu.as_mut().unwrap()[i] =
                    ds_da1 * 2.0 * mb + ds_db1 * 2.0 * ma + ds_da2 * 2.0 * (-mb) + ds_db2 * (-2.0 * ma);
                g_eaa.as_mut().unwrap()[i] = ds_db2;
                g_eab.as_mut().unwrap()[i] = ds_da2 * 2.0;
            }
        }
        total += channel_sum / positions;

        if want_grad {
            let scale = 1.0 / (positions * channels as f64);
            let back_mu = conv2_adjoint(&g_mu.unwrap(), w, h, &kernel);
            let back_eaa = conv2_adjoint(&g_eaa.unwrap(), w, h, &kernel);
            let back_eab = conv2_adjoint(&g_eab.unwrap(), w, h, &kernel);
            let gi = grad_img.as_mut().unwrap();
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let v = back_mu[i] + 2.0 * pa[i] * back_eaa[i] + pb[i] * back_eab[i];
                    gi.set(x, y, ch, v * scale);
                }
            }
        }
    }

    Ok((total / channels as f64, grad_img))
}

/// DSSIM = (1 - SSIM) / 2.
pub fn dssim(a: &Image, b: &Image) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

/// DSSIM plus its gradient w.r.t. `a`.
pub fn dssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (s, mut grad) = ssim_with_grad(a, b)?;
    for v in grad.data_mut() {
        *v *= -0.5;
    }
    Ok(((1.0 - s) / 2.0, grad))
}
