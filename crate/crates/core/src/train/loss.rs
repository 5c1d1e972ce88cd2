//! Photometric loss, SSIM and PSNR on interleaved RGB buffers.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) applied as a zero-padded
//! "same" convolution to each channel, with `K1 = 0.01`, `K2 = 0.03` and a
//! dynamic range of 1.

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

const C1: f64 = SSIM_K1 * SSIM_K1;
const C2: f64 = SSIM_K2 * SSIM_K2;

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (k, v) in g.iter_mut().enumerate() {
        let d = k as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

fn blur(src: &[f64], width: usize, height: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..width {
            let mut s = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < width {
                    s += t * row[xx as usize];
                }
            }
            tmp[y * width + x] = s;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut s = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < height {
                    s += t * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = s;
        }
    }
    out
}

fn channel(img: &[f64], ch: usize) -> Vec<f64> {
    img.iter().skip(ch).step_by(3).copied().collect()
}

fn check(a: &[f64], b: &[f64], width: usize, height: usize) {
    assert_eq!(a.len(), 3 * width * height, "image buffer does not match its size");
    assert_eq!(a.len(), b.len(), "image buffers differ in length");
}

/// Mean SSIM over all pixels and channels, plus `d SSIM / d a` when asked.
fn ssim_impl(a: &[f64], b: &[f64], width: usize, height: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    check(a, b, width, height);
    let taps = gaussian_taps();
    let n = a.len() as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; a.len()]);
    for ch in 0..3 {
        let x = channel(a, ch);
        let y = channel(b, ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = blur(&x, width, height, &taps);
        let my = blur(&y, width, height, &taps);
        let ex2 = blur(&xx, width, height, &taps);
        let ey2 = blur(&yy, width, height, &taps);
        let exy = blur(&xy, width, height, &taps);
        let len = x.len();
        let (mut d_mx, mut d_ex2, mut d_exy) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        for p in 0..len {
            let (ux, uy) = (mx[p], my[p]);
            let a1 = 2.0 * ux * uy + C1;
            let a2 = 2.0 * (exy[p] - ux * uy) + C2;
            let b1 = ux * ux + uy * uy + C1;
            let b2 = (ex2[p] - ux * ux) + (ey2[p] - uy * uy) + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let den = b1 * b2;
                d_mx[p] = ((2.0 * uy * a2 - 2.0 * uy * a1) / den - s * (2.0 * ux / b1 - 2.0 * ux / b2)) / n;
                d_ex2[p] = -s / b2 / n;
                d_exy[p] = 2.0 * a1 / den / n;
            }
        }
        if let Some(g) = grad.as_mut() {
            // The window is symmetric, so the adjoint of the blur is the blur.
            let ga = blur(&d_mx, width, height, &taps);
            let gb = blur(&d_ex2, width, height, &taps);
            let gc = blur(&d_exy, width, height, &taps);
            for p in 0..len {
                g[3 * p + ch] = ga[p] + 2.0 * x[p] * gb[p] + y[p] * gc[p];
            }
        }
    }
    (total / n, grad)
}

pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> f64 {
    ssim_impl(a, b, width, height, false).0
}

/// `(1 − SSIM) / 2`.
pub fn dssim(a: &[f64], b: &[f64], width: usize, height: usize) -> f64 {
    (1.0 - ssim(a, b, width, height)) / 2.0
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "image buffers differ in length");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let m = mse(a, b);
    if m <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * m.log10()).min(PSNR_CAP)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    /// `d loss / d render`, same layout as the render.
    pub grad: Vec<f64>,
}

/// `(1 − w) · mean|render − gt| + w · (1 − SSIM)` and its gradient.
pub fn loss(render: &[f64], gt: &[f64], width: usize, height: usize, w_ssim: f64) -> LossValue {
    check(render, gt, width, height);
    let n = render.len() as f64;
    let mut l1 = 0.0;
    let mut grad: Vec<f64> = render
        .iter()
        .zip(gt)
        .map(|(r, g)| {
            let d = r - g;
            l1 += d.abs();
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            (1.0 - w_ssim) * s / n
        })
        .collect();
    l1 /= n;
    let (s, sg) = if w_ssim > 0.0 {
        let (s, g) = ssim_impl(render, gt, width, height, true);
        (s, g)
    } else {
        (ssim(render, gt, width, height), None)
    };
    if let Some(sg) = sg {
        for (g, d) in grad.iter_mut().zip(sg) {
            *g -= w_ssim * d;
        }
    }
    LossValue {
        loss: (1.0 - w_ssim) * l1 + w_ssim * (1.0 - s),
        l1,
        ssim: s,
        grad,
    }
}
