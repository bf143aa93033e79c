//! The sRGB <-> CIELAB conversion chain.
//!
//! sRGB transfer function, then linear RGB to XYZ, then CIELAB under D65.
//! The published 7-digit sRGB matrix rows sum to 0.9504700 / 1.0000001 /
//! 0.9503041-adjacent values, slightly off the tabulated D65 white point, so
//! each row is rescaled (relative correction ~1e-7) to make (1,1,1) map to
//! the white point essentially exactly. The XYZ->RGB matrix is the exact f64
//! inverse of the rescaled forward matrix, which keeps round trips at the
//! 1e-10 level instead of the 1e-7 the published inverse allows.

use std::sync::OnceLock;

use crate::{Error, Result};

use super::{LabImage, RgbImage};

/// D65 reference white (Xn, Yn, Zn).
pub const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const RGB_TO_XYZ_BASE: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// delta = 6/29, the CIELAB linear-segment threshold.
const DELTA: f64 = 6.0 / 29.0;

fn matrices() -> &'static ([[f64; 3]; 3], [[f64; 3]; 3]) {
    static M: OnceLock<([[f64; 3]; 3], [[f64; 3]; 3])> = OnceLock::new();
    M.get_or_init(|| {
        let mut fwd = RGB_TO_XYZ_BASE;
        for (row, target) in fwd.iter_mut().zip(D65_WHITE) {
            let sum: f64 = row.iter().sum();
            let k = target / sum;
            for v in row.iter_mut() {
                *v *= k;
            }
        }
        (fwd, invert3(&fwd))
    })
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv_det = 1.0 / det;
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // cofactor expansion, transposed
            let (a, b) = ((i + 1) % 3, (i + 2) % 3);
            let (c, d) = ((j + 1) % 3, (j + 2) % 3);
            out[j][i] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) * inv_det;
        }
    }
    out
}

/// sRGB transfer decode: gamma-compressed [0,1] to linear-light [0,1].
pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB transfer encode, inverse of [`srgb_to_linear`].
pub fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn lab_f_inv_deriv(t: f64) -> f64 {
    if t > DELTA {
        3.0 * t * t
    } else {
        3.0 * DELTA * DELTA
    }
}

/// One sRGB pixel (components in [0,1]) to CIELAB.
pub fn rgb_pixel_to_lab(rgb: [f64; 3]) -> Result<[f64; 3]> {
    for v in rgb {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            return Err(Error::OutOfRange {
                what: "rgb component",
                detail: format!("{} is outside [0,1]", v),
            });
        }
    }
    let (fwd, _) = matrices();
    let lin = [srgb_to_linear(rgb[0]), srgb_to_linear(rgb[1]), srgb_to_linear(rgb[2])];
    let mut xyz = [0.0; 3];
    for i in 0..3 {
        xyz[i] = fwd[i][0] * lin[0] + fwd[i][1] * lin[1] + fwd[i][2] * lin[2];
    }
    let fx = lab_f(xyz[0] / D65_WHITE[0]);
    let fy = lab_f(xyz[1] / D65_WHITE[1]);
    let fz = lab_f(xyz[2] / D65_WHITE[2]);
    Ok([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)])
}

/// One CIELAB pixel back to sRGB. The second value reports whether any
/// component had to be clamped into [0,1] (out of gamut).
pub fn lab_pixel_to_rgb(lab: [f64; 3]) -> ([f64; 3], bool) {
    let (_, inv) = matrices();
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [D65_WHITE[0] * lab_f_inv(fx), D65_WHITE[1] * lab_f_inv(fy), D65_WHITE[2] * lab_f_inv(fz)];
    let mut out = [0.0; 3];
    let mut clamped = false;
    for i in 0..3 {
        let lin = inv[i][0] * xyz[0] + inv[i][1] * xyz[1] + inv[i][2] * xyz[2];
        let s = linear_to_srgb(lin);
        if !(0.0..=1.0).contains(&s) {
            clamped = true;
        }
        out[i] = s.clamp(0.0, 1.0);
    }
    (out, clamped)
}

/// Converts a whole image to CIELAB.
pub fn rgb_to_lab(img: &RgbImage) -> Result<LabImage> {
    let mut data = Vec::with_capacity(img.height() * img.width() * 3);
    for y in 0..img.height() {
        for x in 0..img.width() {
            data.extend_from_slice(&rgb_pixel_to_lab(img.get(y, x))?);
        }
    }
    LabImage::new(img.height(), img.width(), data)
}

/// Converts a whole image back to sRGB, counting gamut-clamped pixels.
pub fn lab_to_rgb(img: &LabImage) -> Result<(RgbImage, usize)> {
    let mut data = Vec::with_capacity(img.height() * img.width() * 3);
    let mut clamp_count = 0;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (rgb, clamped) = lab_pixel_to_rgb(img.get(y, x));
            if clamped {
                clamp_count += 1;
            }
            data.extend_from_slice(&rgb);
        }
    }
    Ok((RgbImage::new(img.height(), img.width(), data)?, clamp_count))
}

/// Network input encoding of Lab planes: L/100, (a+128)/256, (b+128)/256,
/// three H*W maps in [0,1], planar row-major.
pub fn normalize_lab_channels(img: &LabImage) -> [Vec<f64>; 3] {
    let n = img.height() * img.width();
    let mut l = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for px in img.values().chunks_exact(3) {
        l.push(px[0] / 100.0);
        a.push((px[1] + 128.0) / 256.0);
        b.push((px[2] + 128.0) / 256.0);
    }
    [l, a, b]
}

/// Normalized-Lab pixel (all components in [0,1]) to sRGB with gamut clamp.
pub(crate) fn normlab_pixel_to_rgb(nl: [f64; 3]) -> [f64; 3] {
    let lab = [100.0 * nl[0], 256.0 * nl[1] - 128.0, 256.0 * nl[2] - 128.0];
    lab_pixel_to_rgb(lab).0
}

/// Vector-Jacobian product of [`normlab_pixel_to_rgb`]: given d(loss)/d(rgb),
/// returns d(loss)/d(normalized lab). Clamped outputs pass zero gradient.
pub(crate) fn normlab_pixel_vjp(nl: [f64; 3], grgb: [f64; 3]) -> [f64; 3] {
    let (_, inv) = matrices();
    let lab = [100.0 * nl[0], 256.0 * nl[1] - 128.0, 256.0 * nl[2] - 128.0];
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [D65_WHITE[0] * lab_f_inv(fx), D65_WHITE[1] * lab_f_inv(fy), D65_WHITE[2] * lab_f_inv(fz)];

    // gradient through encode + clamp per output component
    let mut glin = [0.0; 3];
    for i in 0..3 {
        let lin = inv[i][0] * xyz[0] + inv[i][1] * xyz[1] + inv[i][2] * xyz[2];
        let s = linear_to_srgb(lin);
        if !(0.0..=1.0).contains(&s) {
            continue;
        }
        let ds = if lin <= 0.0031308 { 12.92 } else { 1.055 / 2.4 * lin.powf(1.0 / 2.4 - 1.0) };
        glin[i] = grgb[i] * ds;
    }
    let mut gxyz = [0.0; 3];
    for j in 0..3 {
        gxyz[j] = glin[0] * inv[0][j] + glin[1] * inv[1][j] + glin[2] * inv[2][j];
    }
    let gfx = gxyz[0] * D65_WHITE[0] * lab_f_inv_deriv(fx);
    let gfy = gxyz[1] * D65_WHITE[1] * lab_f_inv_deriv(fy);
    let gfz = gxyz[2] * D65_WHITE[2] * lab_f_inv_deriv(fz);
    let gl = (gfx + gfy + gfz) / 116.0;
    let ga = gfx / 500.0;
    let gb = -gfz / 200.0;
    [100.0 * gl, 256.0 * ga, 256.0 * gb]
}
