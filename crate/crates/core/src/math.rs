//! Small numeric helpers shared across modules.

use nalgebra::{Matrix3, Vector3, Vector4};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of sigmoid expressed through its output value.
pub fn sigmoid_deriv_from_output(y: f64) -> f64 {
    y * (1.0 - y)
}

pub fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable on both tails.
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// d/dx softplus(x) = sigmoid(x).
pub fn softplus_deriv(x: f64) -> f64 {
    sigmoid(x)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix for a unit quaternion (w, x, y, z).
pub fn rotation_from_quat(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of `rotation_from_quat` w.r.t. each quaternion component.
pub fn rotation_quat_jacobian(q: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(
        0.0, -2.0 * z, 2.0 * y, //
        2.0 * z, 0.0, -2.0 * x, //
        -2.0 * y, 2.0 * x, 0.0,
    );
    let dx = Matrix3::new(
        0.0, 2.0 * y, 2.0 * z, //
        2.0 * y, -4.0 * x, -2.0 * w, //
        2.0 * z, 2.0 * w, -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y, 2.0 * x, 2.0 * w, //
        2.0 * x, 0.0, 2.0 * z, //
        -2.0 * w, 2.0 * z, -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z, -2.0 * w, 2.0 * x, //
        2.0 * w, -4.0 * z, 2.0 * y, //
        2.0 * x, 2.0 * y, 0.0,
    );
    [dw, dx, dy, dz]
}

/// Normalizes a 4-vector; returns the unit vector and the original norm.
pub fn normalize4(raw: &Vector4<f64>) -> (Vector4<f64>, f64) {
    let n = raw.norm();
    if n == 0.0 {
        (Vector4::new(1.0, 0.0, 0.0, 0.0), 0.0)
    } else {
        (raw / n, n)
    }
}

/// Backprop through `q = raw / |raw|`: maps dL/dq to dL/draw.
pub fn normalize4_backward(unit: &Vector4<f64>, norm: f64, grad_unit: &Vector4<f64>) -> Vector4<f64> {
    if norm == 0.0 {
        return Vector4::zeros();
    }
    (grad_unit - unit * unit.dot(grad_unit)) / norm
}

/// Backprop through `d = v / |v|` for 3-vectors: maps dL/dd to dL/dv.
pub fn normalize3_backward(unit: &Vector3<f64>, norm: f64, grad_unit: &Vector3<f64>) -> Vector3<f64> {
    (grad_unit - unit * unit.dot(grad_unit)) / norm
}

/// Largest eigenvalue of a symmetric 2x2 matrix [[a, b], [b, c]].
pub fn sym2_max_eigenvalue(a: f64, b: f64, c: f64) -> f64 {
    let mid = 0.5 * (a + c);
    let half_diff = 0.5 * (a - c);
    mid + (half_diff * half_diff + b * b).sqrt()
}

/// SplitMix64 step, used to derive independent per-call RNG seeds.
pub fn mix_seed(mut state: u64) -> u64 {
    state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines a base seed with stream indices into one derived seed.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    mix_seed(mix_seed(base ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15)) ^ b)
}
