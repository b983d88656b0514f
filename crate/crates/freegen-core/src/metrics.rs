//! PSNR and SSIM plus the lateral-shift evaluation protocol. SSIM also
//! exposes its analytic input gradient — the perceptual term of the
//! reconstruction loss differentiates through it.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::fmath;
use crate::image::{ImageGray, ImageRgb};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Stabilizers for L = 1: (K1*L)^2 and (K2*L)^2 with K1 = 0.01, K2 = 0.03.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricsError {
    ShapeMismatch,
    /// SSIM needs at least one full 11x11 window.
    ImageTooSmall,
    /// Frame lists disagree in length with each other or the shift list.
    LengthMismatch,
    /// Frame indices are not pairwise aligned (or not the expected stride
    /// sequence), so per-frame comparisons would be meaningless.
    Misaligned,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::ShapeMismatch => write!(f, "images have different shapes"),
            MetricsError::ImageTooSmall => write!(f, "image smaller than the SSIM window"),
            MetricsError::LengthMismatch => write!(f, "frame list lengths disagree"),
            MetricsError::Misaligned => write!(f, "frame indices are not aligned"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MetricsError {}

/// Peak signal-to-noise ratio in dB for [0,1] images; identical images give
/// +inf.
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64, MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::ShapeMismatch);
    }
    let mse = a.mse(b);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * fmath::log10(mse))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = fmath::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode correlation with the 1-D kernel applied along both
/// axes. Output is (w - 10) x (h - 10).
fn corr_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - (SSIM_WINDOW - 1);
    let oh = h - (SSIM_WINDOW - 1);
    // Horizontal pass: ow x h.
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * img[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // Vertical pass: ow x oh.
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`corr_valid`]: scatters a (w-10) x (h-10) map back to w x h.
fn scatter_full(map: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - (SSIM_WINDOW - 1);
    let oh = h - (SSIM_WINDOW - 1);
    // Vertical scatter: ow x h.
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            if v != 0.0 {
                for (i, kv) in k.iter().enumerate() {
                    tmp[(y + i) * ow + x] += kv * v;
                }
            }
        }
    }
    // Horizontal scatter: w x h.
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            if v != 0.0 {
                for (i, kv) in k.iter().enumerate() {
                    out[y * w + x + i] += kv * v;
                }
            }
        }
    }
    out
}

struct SsimPlane {
    /// Mean local SSIM over this plane's valid windows.
    mean: f64,
    /// Per-window statistics kept for the backward pass.
    maps: Option<PlaneMaps>,
}

struct PlaneMaps {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    sig_x: Vec<f64>,
    sig_y: Vec<f64>,
    sig_xy: Vec<f64>,
    s: Vec<f64>,
}

fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize, keep: bool) -> SsimPlane {
    let k = gaussian_kernel();
    let n = w * h;
    let mut xx = vec![0.0; n];
    let mut yy = vec![0.0; n];
    let mut xy = vec![0.0; n];
    for i in 0..n {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    let mu_x = corr_valid(x, w, h, &k);
    let mu_y = corr_valid(y, w, h, &k);
    let m_xx = corr_valid(&xx, w, h, &k);
    let m_yy = corr_valid(&yy, w, h, &k);
    let m_xy = corr_valid(&xy, w, h, &k);
    let wins = mu_x.len();
    let mut s = vec![0.0; wins];
    let mut sig_x = vec![0.0; wins];
    let mut sig_y = vec![0.0; wins];
    let mut sig_xy = vec![0.0; wins];
    let mut total = 0.0;
    for i in 0..wins {
        sig_x[i] = m_xx[i] - mu_x[i] * mu_x[i];
        sig_y[i] = m_yy[i] - mu_y[i] * mu_y[i];
        sig_xy[i] = m_xy[i] - mu_x[i] * mu_y[i];
        let a1 = 2.0 * mu_x[i] * mu_y[i] + SSIM_C1;
        let a2 = 2.0 * sig_xy[i] + SSIM_C2;
        let b1 = mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + SSIM_C1;
        let b2 = sig_x[i] + sig_y[i] + SSIM_C2;
        s[i] = (a1 * a2) / (b1 * b2);
        total += s[i];
    }
    SsimPlane {
        mean: total / wins as f64,
        maps: keep.then_some(PlaneMaps { mu_x, mu_y, sig_x, sig_y, sig_xy, s }),
    }
}

fn check_pair(a: &ImageRgb, b: &ImageRgb) -> Result<(), MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::ShapeMismatch);
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(MetricsError::ImageTooSmall);
    }
    Ok(())
}

/// Mean SSIM over valid window positions, computed per channel and averaged.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64, MetricsError> {
    check_pair(a, b)?;
    let (w, h, n) = (a.width, a.height, a.width * a.height);
    let mut acc = 0.0;
    for c in 0..3 {
        acc += ssim_plane(&a.data[c * n..(c + 1) * n], &b.data[c * n..(c + 1) * n], w, h, false).mean;
    }
    Ok(acc / 3.0)
}

/// SSIM on the Rec. 601 luma channel only. Off the main path; the default
/// metric is the per-channel mean above.
pub fn ssim_luma(a: &ImageRgb, b: &ImageRgb) -> Result<f64, MetricsError> {
    check_pair(a, b)?;
    let (w, h, n) = (a.width, a.height, a.width * a.height);
    let luma = |img: &ImageRgb| -> Vec<f64> {
        (0..n)
            .map(|i| {
                0.299 * img.data[i] + 0.587 * img.data[n + i] + 0.114 * img.data[2 * n + i]
            })
            .collect()
    };
    Ok(ssim_plane(&luma(a), &luma(b), w, h, false).mean)
}

/// SSIM plus its gradient with respect to the *first* image. The gradient is
/// of the scalar mean-SSIM, so it already carries the 1/(windows*channels)
/// normalization.
pub fn ssim_with_grad(a: &ImageRgb, b: &ImageRgb) -> Result<(f64, ImageRgb), MetricsError> {
    check_pair(a, b)?;
    let (w, h, n) = (a.width, a.height, a.width * a.height);
    let k = gaussian_kernel();
    let ow = w - (SSIM_WINDOW - 1);
    let oh = h - (SSIM_WINDOW - 1);
    let wins = ow * oh;
    let mut grad = ImageRgb::zeros(w, h);
    let mut total = 0.0;
    let norm = 1.0 / (wins as f64 * 3.0);
    for c in 0..3 {
        let x = &a.data[c * n..(c + 1) * n];
        let y = &b.data[c * n..(c + 1) * n];
        let plane = ssim_plane(x, y, w, h, true);
        total += plane.mean;
        let maps = plane.maps.unwrap();

        // d s_w / d x_p = k_{p-w} (c0_w + p_w y_p + q_w x_p); the three
        // window maps scatter back through the kernel adjoint.
        let mut c0 = vec![0.0; wins];
        let mut pw = vec![0.0; wins];
        let mut qw = vec![0.0; wins];
        for i in 0..wins {
            let a1 = 2.0 * maps.mu_x[i] * maps.mu_y[i] + SSIM_C1;
            let a2 = 2.0 * maps.sig_xy[i] + SSIM_C2;
            let b1 = maps.mu_x[i] * maps.mu_x[i] + maps.mu_y[i] * maps.mu_y[i] + SSIM_C1;
            let b2 = maps.sig_x[i] + maps.sig_y[i] + SSIM_C2;
            let s = maps.s[i];
            let inv_b1b2 = 1.0 / (b1 * b2);
            pw[i] = 2.0 * a1 * inv_b1b2;
            qw[i] = -2.0 * s / b2;
            c0[i] = 2.0 * maps.mu_y[i] * a2 * inv_b1b2 - maps.mu_y[i] * pw[i]
                - 2.0 * s * maps.mu_x[i] / b1
                - maps.mu_x[i] * qw[i];
        }
        let g_c0 = scatter_full(&c0, w, h, &k);
        let g_p = scatter_full(&pw, w, h, &k);
        let g_q = scatter_full(&qw, w, h, &k);
        let gplane = &mut grad.data[c * n..(c + 1) * n];
        for i in 0..n {
            gplane[i] = norm * (g_c0[i] + y[i] * g_p[i] + x[i] * g_q[i]);
        }
    }
    Ok((total / 3.0, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub frame_idx: u32,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-shift evaluation summary.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub shift_m: f64,
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub median_psnr: f64,
    pub median_ssim: f64,
    /// Mean absolute depth error in meters over finite-reference pixels,
    /// present when both sides carried depth.
    pub depth_mae: Option<f64>,
}

impl MetricReport {
    pub fn count(&self) -> usize {
        self.frames.len()
    }
}

/// One rendered or reference frame entering the protocol.
#[derive(Clone, Debug)]
pub struct EvalFrame {
    pub frame_idx: u32,
    pub image: ImageRgb,
    pub depth: Option<ImageGray>,
}

fn median(sorted_src: &[f64]) -> f64 {
    let mut v: Vec<f64> = sorted_src.to_vec();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scores method frames against reference frames for each lateral shift.
/// Lists must align index-for-index; frame indices must match pairwise and
/// follow the stride sequence 0, stride, 2*stride, ... of the base
/// trajectory.
pub fn evaluate_protocol(
    method_frames: &[Vec<EvalFrame>],
    oracle_frames: &[Vec<EvalFrame>],
    shifts_m: &[f64],
    stride: usize,
) -> Result<Vec<MetricReport>, MetricsError> {
    if method_frames.len() != shifts_m.len() || oracle_frames.len() != shifts_m.len() {
        return Err(MetricsError::LengthMismatch);
    }
    let mut reports = Vec::with_capacity(shifts_m.len());
    for ((method, oracle), &shift) in method_frames.iter().zip(oracle_frames).zip(shifts_m) {
        if method.len() != oracle.len() || method.is_empty() {
            return Err(MetricsError::LengthMismatch);
        }
        let mut frames = Vec::with_capacity(method.len());
        let mut psnrs = Vec::with_capacity(method.len());
        let mut ssims = Vec::with_capacity(method.len());
        let mut mae_sum = 0.0;
        let mut have_depth = true;
        for (k, (m, o)) in method.iter().zip(oracle).enumerate() {
            if m.frame_idx != o.frame_idx || m.frame_idx as usize != k * stride {
                return Err(MetricsError::Misaligned);
            }
            let p = psnr(&m.image, &o.image)?;
            let s = ssim(&m.image, &o.image)?;
            frames.push(FrameMetrics { frame_idx: m.frame_idx, psnr: p, ssim: s });
            psnrs.push(p);
            ssims.push(s);
            match (&m.depth, &o.depth) {
                (Some(md), Some(od)) => {
                    if md.data.len() != od.data.len() {
                        return Err(MetricsError::ShapeMismatch);
                    }
                    let mut acc = 0.0;
                    let mut cnt = 0usize;
                    for (dm, do_) in md.data.iter().zip(&od.data) {
                        if do_.is_finite() {
                            acc += fmath::abs(dm - do_);
                            cnt += 1;
                        }
                    }
                    mae_sum += if cnt > 0 { acc / cnt as f64 } else { 0.0 };
                }
                _ => have_depth = false,
            }
        }
        let n = frames.len() as f64;
        reports.push(MetricReport {
            shift_m: shift,
            mean_psnr: psnrs.iter().sum::<f64>() / n,
            mean_ssim: ssims.iter().sum::<f64>() / n,
            median_psnr: median(&psnrs),
            median_ssim: median(&ssims),
            depth_mae: have_depth.then_some(mae_sum / n),
            frames,
        });
    }
    Ok(reports)
}
