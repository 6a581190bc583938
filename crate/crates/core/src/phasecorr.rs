//! Phase-correlation registration of BEV frames.
//!
//! Rotation and scale are read off log-polar resampled FFT magnitudes,
//! then translation from a second correlation after de-rotating the
//! current frame. Heatmaps are softmax distributions over the correlation
//! surfaces and point estimates come from a windowed expectation, which
//! keeps every readout differentiable.

use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::bev::BevImage;
use crate::geom::{rot2, wrap_angle, Sim2Pose};

/// Cross-power normalization floors. The absolute floor guards the
/// division; the relative floor (against the mean cross-power magnitude)
/// keeps numerically empty bins from contributing unit-magnitude phasors
/// with unstable phase, which would make the readout non-differentiable
/// in practice.
const CROSS_POWER_EPS: f64 = 1e-12;
const CROSS_POWER_EPS_REL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DpcError {
    #[error(
        "rotation hypothesis ambiguous: correlation peaks {peak:.6} vs {alt_peak:.6} differ by less than 1%"
    )]
    AmbiguousRotation { peak: f64, alt_peak: f64 },
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("heatmap file malformed: {0}")]
    MalformedHeatmap(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Configuration of the correlation stages.
#[derive(Debug, Clone)]
pub struct DpcConfig {
    /// Softmax temperature applied to unit-norm correlation surfaces.
    pub temperature: f64,
    /// Log-polar grid size.
    pub radial_bins: usize,
    pub angular_bins: usize,
    /// Radial high-pass knee (pixels in the magnitude plane); 0 disables.
    pub highpass_radius: f64,
    /// Raised-cosine border width as a fraction of the image side.
    pub taper_frac: f64,
    /// Half-width of the expectation window around the argmax, cells.
    pub expectation_radius: usize,
    /// Feather width for the validity-mask window, pixels.
    pub mask_feather_px: f64,
    /// Gaussian low-pass on the normalized cross-power, as sigma over the
    /// surface side. Whitened noise bins otherwise produce single-cell
    /// spikes that can outgrow a diffuse true peak; 0 disables.
    pub lowpass_sigma_frac: f64,
}

impl Default for DpcConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            radial_bins: 256,
            angular_bins: 256,
            highpass_radius: 8.0,
            taper_frac: 0.125,
            expectation_radius: 9,
            mask_feather_px: 4.0,
            lowpass_sigma_frac: 0.25,
        }
    }
}

/// Normalized nonnegative distribution over pose hypotheses.
#[derive(Debug, Clone)]
pub struct CorrelationHeatmap {
    pub values: Array2<f64>,
    pub temperature: f64,
}

impl CorrelationHeatmap {
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

fn planner() -> &'static Mutex<FftPlanner<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
}

fn fft2(data: &mut Array2<Complex<f64>>, inverse: bool) {
    let (h, w) = data.dim();
    let (row_fft, col_fft) = {
        let mut p = planner().lock().unwrap();
        if inverse {
            (p.plan_fft_inverse(w), p.plan_fft_inverse(h))
        } else {
            (p.plan_fft_forward(w), p.plan_fft_forward(h))
        }
    };
    for mut row in data.rows_mut() {
        row_fft.process(row.as_slice_mut().expect("row not contiguous"));
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = data[(r, c)];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            data[(r, c)] = col[r];
        }
    }
}

/// Raised-cosine border taper; interior stays 1.
pub fn taper(img: &Array2<f64>, frac: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    if frac <= 0.0 {
        return img.clone();
    }
    let ramp = |i: usize, n: usize| -> f64 {
        let b = (frac * n as f64).max(1.0);
        let d = (i.min(n - 1 - i)) as f64;
        if d >= b {
            1.0
        } else {
            0.5 * (1.0 - (std::f64::consts::PI * d / b).cos())
        }
    };
    Array2::from_shape_fn((h, w), |(r, c)| img[(r, c)] * ramp(r, h) * ramp(c, w))
}

/// Centered FFT magnitude of an image, optionally radially high-passed
/// with weight `min(1, r / highpass_radius)`.
pub fn magnitude_spectrum(img: &Array2<f64>, highpass_radius: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut data = img.mapv(|v| Complex::new(v, 0.0));
    fft2(&mut data, false);
    let mut mag = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            // fftshift: DC lands at (h/2, w/2).
            mag[(r, c)] = data[((r + h / 2) % h, (c + w / 2) % w)].norm();
        }
    }
    if highpass_radius > 0.0 {
        let cy = (h / 2) as f64;
        let cx = (w / 2) as f64;
        for r in 0..h {
            for c in 0..w {
                let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
                mag[(r, c)] *= (d / highpass_radius).min(1.0);
            }
        }
    }
    mag
}

fn bilinear_zero(img: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = img.dim();
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    img[(y0, x0)] * (1.0 - fx) * (1.0 - fy)
        + img[(y0, x1)] * fx * (1.0 - fy)
        + img[(y1, x0)] * (1.0 - fx) * fy
        + img[(y1, x1)] * fx * fy
}

/// Resample a centered magnitude field onto a (log r, angle) grid.
/// The angle axis spans [0, pi): FFT magnitudes are point symmetric, so
/// half the angle range carries all information. Radii span [1, n/2].
pub fn log_polar(mag: &Array2<f64>, radial_bins: usize, angular_bins: usize) -> Array2<f64> {
    let (h, w) = mag.dim();
    let cy = (h / 2) as f64;
    let cx = (w / 2) as f64;
    let r_max = (h.min(w) / 2) as f64;
    let base = log_polar_base(h.min(w), radial_bins);
    let mut out = Array2::zeros((radial_bins, angular_bins));
    for i in 0..radial_bins {
        let r = base.powi(i as i32);
        if r > r_max {
            break;
        }
        for j in 0..angular_bins {
            let phi = std::f64::consts::PI * j as f64 / angular_bins as f64;
            let (s, c) = phi.sin_cos();
            out[(i, j)] = bilinear_zero(mag, cx + r * c, cy + r * s);
        }
    }
    out
}

/// Log base such that `radial_bins` bins span radii [1, side/2].
pub fn log_polar_base(side: usize, radial_bins: usize) -> f64 {
    ((side / 2) as f64).powf(1.0 / (radial_bins as f64 - 1.0))
}

/// Raw circular cross-correlation surface from the normalized cross-power
/// spectrum. The peak sits at the shift taking `a` onto `b`, and the
/// surface has (at most) unit L2 norm. `lowpass_sigma_frac` applies a
/// Gaussian weight over frequency before the inverse transform.
#[doc(hidden)]
pub fn correlation_surface(a: &Array2<f64>, b: &Array2<f64>, lowpass_sigma_frac: f64) -> Array2<f64> {
    let (h, w) = a.dim();
    let mut fa = a.mapv(|v| Complex::new(v, 0.0));
    let mut fb = b.mapv(|v| Complex::new(v, 0.0));
    fft2(&mut fa, false);
    fft2(&mut fb, false);
    let mut q = Array2::from_elem((h, w), Complex::new(0.0, 0.0));
    let mean_mag: f64 = fa
        .iter()
        .zip(fb.iter())
        .map(|(x, y)| (*y * x.conj()).norm())
        .sum::<f64>()
        / (h * w) as f64;
    let eps = CROSS_POWER_EPS + CROSS_POWER_EPS_REL * mean_mag;
    for r in 0..h {
        for c in 0..w {
            let prod = fb[(r, c)] * fa[(r, c)].conj();
            q[(r, c)] = prod / (prod.norm() + eps);
        }
    }
    if lowpass_sigma_frac > 0.0 {
        let sigma = lowpass_sigma_frac * h.min(w) as f64;
        for r in 0..h {
            for c in 0..w {
                let ky = r.min(h - r) as f64;
                let kx = c.min(w - c) as f64;
                q[(r, c)] *= (-(kx * kx + ky * ky) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    fft2(&mut q, true);
    let norm = 1.0 / (h * w) as f64;
    q.mapv(|v| v.re * norm)
}

fn softmax(surface: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let max = surface.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = surface.mapv(|v| ((v - max) / temperature).exp());
    let sum: f64 = out.iter().sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Phase correlation of two equal-shape fields. The heatmap peaks at the
/// circular shift taking `a` onto `b`.
pub fn phase_correlate(
    a: &Array2<f64>,
    b: &Array2<f64>,
    temperature: f64,
) -> Result<CorrelationHeatmap, DpcError> {
    let (ha, wa) = a.dim();
    let (hb, wb) = b.dim();
    if (ha, wa) != (hb, wb) {
        return Err(DpcError::ShapeMismatch(ha, wa, hb, wb));
    }
    let surface = correlation_surface(a, b, DpcConfig::default().lowpass_sigma_frac);
    Ok(CorrelationHeatmap { values: softmax(&surface, temperature), temperature })
}

/// Mass-weighted subpixel location of the heatmap peak.
///
/// The expectation runs on a window around the argmax with circular index
/// unwrapping (correlation surfaces are periodic on both axes), then the
/// result is folded back into [0, n) per axis. Returns (row, col).
pub fn expectation(h: &CorrelationHeatmap) -> (f64, f64) {
    expectation_with_radius(h, DpcConfig::default().expectation_radius)
}

pub fn expectation_with_radius(h: &CorrelationHeatmap, radius: usize) -> (f64, f64) {
    let (rows, cols) = h.shape();
    let mut best = (0usize, 0usize);
    let mut best_v = f64::NEG_INFINITY;
    for r in 0..rows {
        for c in 0..cols {
            let v = h.values[(r, c)];
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
    }
    let wr = radius.min((rows - 1) / 2) as isize;
    let wc = radius.min((cols - 1) / 2) as isize;
    let mut mass = 0.0;
    let mut sr = 0.0;
    let mut sc = 0.0;
    for dr in -wr..=wr {
        for dc in -wc..=wc {
            let r = (best.0 as isize + dr).rem_euclid(rows as isize) as usize;
            let c = (best.1 as isize + dc).rem_euclid(cols as isize) as usize;
            let p = h.values[(r, c)];
            mass += p;
            sr += p * (best.0 as isize + dr) as f64;
            sc += p * (best.1 as isize + dc) as f64;
        }
    }
    let er = (sr / mass).rem_euclid(rows as f64);
    let ec = (sc / mass).rem_euclid(cols as f64);
    (er, ec)
}

/// Fold a periodic coordinate into a signed shift in (-n/2, n/2].
pub fn fold_shift(coord: f64, n: usize) -> f64 {
    if coord > n as f64 / 2.0 {
        coord - n as f64
    } else {
        coord
    }
}

/// Warp an image by a planar similarity about `center` (in (col, row)
/// coordinates): content moves by `p -> scale * R(theta) * (p - center) +
/// center + t`. Samples outside the source are zero.
pub fn warp_sim2(
    img: &Array2<f64>,
    theta: f64,
    scale: f64,
    t: nalgebra::Vector2<f64>,
    center: nalgebra::Vector2<f64>,
) -> Array2<f64> {
    let (h, w) = img.dim();
    let inv_rot = rot2(-theta) / scale;
    Array2::from_shape_fn((h, w), |(r, c)| {
        let p = nalgebra::Vector2::new(c as f64, r as f64);
        let q = inv_rot * (p - center - t) + center;
        bilinear_zero(img, q.x, q.y)
    })
}

fn image_center(img: &Array2<f64>) -> nalgebra::Vector2<f64> {
    let (h, w) = img.dim();
    nalgebra::Vector2::new((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

struct RotScale {
    theta: f64,
    scale: f64,
    heatmap: CorrelationHeatmap,
    /// Translation correlation surface of the winning hypothesis.
    translation_surface: Array2<f64>,
}

fn rot_scale_stage(prev: &BevImage, cur: &BevImage, cfg: &DpcConfig) -> Result<RotScale, DpcError> {
    let (hp, wp) = prev.pixels.dim();
    let (hc, wc) = cur.pixels.dim();
    if (hp, wp) != (hc, wc) {
        return Err(DpcError::ShapeMismatch(hp, wp, hc, wc));
    }
    // The spectra feeding the log-polar stage need rotation-consistent
    // windowing: mean-free, mask-feathered input under a radially
    // symmetric vignette, so the window signature carries no orientation.
    let prev_in = correlation_input(prev, cfg.mask_feather_px);
    let cur_in = correlation_input(cur, cfg.mask_feather_px);
    let mp = magnitude_spectrum(&radial_taper(&prev_in, cfg.taper_frac), cfg.highpass_radius);
    let mc = magnitude_spectrum(&radial_taper(&cur_in, cfg.taper_frac), cfg.highpass_radius);
    let side = hp.min(wp);
    let base = log_polar_base(side, cfg.radial_bins);
    // Weight each log-polar row by its radius: the resampling oversamples
    // small radii, whose cells are angularly uninformative but carry the
    // largest magnitudes.
    let lp = weight_rows_by_radius(&log_polar(&mp, cfg.radial_bins, cfg.angular_bins), base);
    let lc = weight_rows_by_radius(&log_polar(&mc, cfg.radial_bins, cfg.angular_bins), base);

    let surface = correlation_surface(&lp, &lc, cfg.lowpass_sigma_frac);
    let heatmap = CorrelationHeatmap { values: softmax(&surface, cfg.temperature), temperature: cfg.temperature };
    let (er, ec) = expectation_with_radius(&heatmap, cfg.expectation_radius);
    let dr = fold_shift(er, cfg.radial_bins);
    let dphi = fold_shift(ec, cfg.angular_bins);

    let theta_half = dphi * std::f64::consts::PI / cfg.angular_bins as f64;
    let scale = base.powf(-dr);
    if (scale - 1.0).abs() > 0.05 {
        log::warn!("estimated inter-frame scale {scale:.4} deviates from 1; metric BEVs should be near unit scale");
    }

    // The magnitude spectrum is point symmetric, so theta is known only
    // modulo pi. Disambiguate by translation-peak sharpness.
    let tp = taper(&prev_in, cfg.taper_frac);
    let center = image_center(&cur_in);
    let mut candidates = Vec::with_capacity(2);
    for theta in [theta_half, wrap_angle(theta_half + std::f64::consts::PI)] {
        let aligned = warp_sim2(&cur_in, -theta, 1.0 / scale, nalgebra::Vector2::zeros(), center);
        let surface = correlation_surface(&tp, &taper(&aligned, cfg.taper_frac), cfg.lowpass_sigma_frac);
        let peak = surface.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        candidates.push((theta, surface, peak));
    }
    candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
    let (best_theta, best_surface, best_peak) = {
        let c = candidates.remove(0);
        (c.0, c.1, c.2)
    };
    let alt_peak = candidates[0].2;
    if (best_peak - alt_peak).abs() < 0.01 * best_peak.abs().max(alt_peak.abs()) {
        return Err(DpcError::AmbiguousRotation { peak: best_peak, alt_peak });
    }
    Ok(RotScale { theta: best_theta, scale, heatmap, translation_surface: best_surface })
}

/// Rotation and scale between consecutive BEV frames, with the heatmap
/// over (log-scale, angle) shifts.
pub fn estimate_rot_scale(
    prev: &BevImage,
    cur: &BevImage,
    cfg: &DpcConfig,
) -> Result<(f64, f64, CorrelationHeatmap), DpcError> {
    let rs = rot_scale_stage(prev, cur, cfg)?;
    Ok((rs.theta, rs.scale, rs.heatmap))
}

/// Translation between an already de-rotated/de-scaled current frame and
/// the previous frame. Returns meters (x = column shift, y = row shift)
/// and the heatmap over pixel shifts.
pub fn estimate_translation(
    prev: &BevImage,
    cur_aligned: &BevImage,
    cfg: &DpcConfig,
    dpp: f64,
) -> Result<(nalgebra::Vector2<f64>, CorrelationHeatmap), DpcError> {
    let tp = taper(&correlation_input(prev, cfg.mask_feather_px), cfg.taper_frac);
    let tc = taper(&correlation_input(cur_aligned, cfg.mask_feather_px), cfg.taper_frac);
    let surface = correlation_surface(&tp, &tc, cfg.lowpass_sigma_frac);
    let heatmap = CorrelationHeatmap { values: softmax(&surface, cfg.temperature), temperature: cfg.temperature };
    let (er, ec) = expectation_with_radius(&heatmap, cfg.expectation_radius);
    let (rows, cols) = heatmap.shape();
    let dy = fold_shift(er, rows);
    let dx = fold_shift(ec, cols);
    Ok((nalgebra::Vector2::new(dx * dpp, dy * dpp), heatmap))
}

/// Full SIM(2) registration of a BEV pair.
///
/// The returned pose is the raster-frame similarity `cur ~ warp(prev)`
/// about the image center, with translation in meters: the aligned-frame
/// pixel shift is mapped back through the estimated rotation and scale.
pub fn estimate_sim2(
    prev: &BevImage,
    cur: &BevImage,
    cfg: &DpcConfig,
) -> Result<(Sim2Pose, CorrelationHeatmap, CorrelationHeatmap), DpcError> {
    let rs = rot_scale_stage(prev, cur, cfg)?;
    let t_heatmap =
        CorrelationHeatmap { values: softmax(&rs.translation_surface, cfg.temperature), temperature: cfg.temperature };
    let (er, ec) = expectation_with_radius(&t_heatmap, cfg.expectation_radius);
    let (rows, cols) = t_heatmap.shape();
    let d = nalgebra::Vector2::new(fold_shift(ec, cols), fold_shift(er, rows));
    let t_px = rs.scale * rot2(rs.theta) * d;
    let pose = Sim2Pose {
        theta: wrap_angle(rs.theta),
        scale: rs.scale,
        translation: t_px * prev.dpp,
    };
    Ok((pose, rs.heatmap, t_heatmap))
}

fn sub_mean(img: &Array2<f64>) -> Array2<f64> {
    let m = img.iter().sum::<f64>() / img.len() as f64;
    img.mapv(|v| v - m)
}

/// Rotationally symmetric raised-cosine vignette: zero outside the
/// inscribed circle, ramping to 1 over `2 * frac` of the radius.
fn radial_taper(img: &Array2<f64>, frac: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    if frac <= 0.0 {
        return img.clone();
    }
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let r_max = cy.min(cx);
    let b = (2.0 * frac * r_max).max(1.0);
    Array2::from_shape_fn((h, w), |(r, c)| {
        let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
        let edge = r_max - d;
        let wgt = if edge <= 0.0 {
            0.0
        } else if edge >= b {
            1.0
        } else {
            0.5 * (1.0 - (std::f64::consts::PI * edge / b).cos())
        };
        img[(r, c)] * wgt
    })
}

/// Scale each log-polar row by its sampling radius (the Jacobian of the
/// polar map), so low radii do not dominate the correlation.
fn weight_rows_by_radius(lp: &Array2<f64>, base: f64) -> Array2<f64> {
    let (h, w) = lp.dim();
    Array2::from_shape_fn((h, w), |(r, c)| lp[(r, c)] * base.powi(r as i32))
}

/// Chamfer distance (3-4 metric, in units of ~pixels) from each cell to
/// the nearest invalid cell; invalid cells get 0.
fn chamfer_to_invalid(mask: &Array2<bool>) -> Array2<f64> {
    let (h, w) = mask.dim();
    let big = (h + w) as f64 * 2.0;
    let mut d = Array2::from_shape_fn((h, w), |i| if mask[i] { big } else { 0.0 });
    let diag = std::f64::consts::SQRT_2;
    for r in 0..h {
        for c in 0..w {
            let mut v = d[(r, c)];
            if r > 0 {
                v = v.min(d[(r - 1, c)] + 1.0);
                if c > 0 {
                    v = v.min(d[(r - 1, c - 1)] + diag);
                }
                if c + 1 < w {
                    v = v.min(d[(r - 1, c + 1)] + diag);
                }
            }
            if c > 0 {
                v = v.min(d[(r, c - 1)] + 1.0);
            }
            d[(r, c)] = v;
        }
    }
    for r in (0..h).rev() {
        for c in (0..w).rev() {
            let mut v = d[(r, c)];
            if r + 1 < h {
                v = v.min(d[(r + 1, c)] + 1.0);
                if c > 0 {
                    v = v.min(d[(r + 1, c - 1)] + diag);
                }
                if c + 1 < w {
                    v = v.min(d[(r + 1, c + 1)] + diag);
                }
            }
            if c + 1 < w {
                v = v.min(d[(r, c + 1)] + 1.0);
            }
            d[(r, c)] = v;
        }
    }
    d
}

/// Prepare a BEV frame for correlation: subtract the valid-region mean
/// and feather the validity mask into a smooth window. A hard wedge
/// boundary is a strong zero-shift feature shared by consecutive frames;
/// feathered and mean-free it acts like any other common window.
#[doc(hidden)]
pub fn correlation_input(img: &BevImage, feather_px: f64) -> Array2<f64> {
    let valid: Vec<f64> = img
        .pixels
        .iter()
        .zip(img.mask.iter())
        .filter(|(_, m)| **m)
        .map(|(p, _)| *p)
        .collect();
    if valid.is_empty() {
        return Array2::zeros(img.pixels.dim());
    }
    if valid.len() == img.pixels.len() {
        let mu = valid.iter().sum::<f64>() / valid.len() as f64;
        return img.pixels.mapv(|p| p - mu);
    }
    let mu = valid.iter().sum::<f64>() / valid.len() as f64;
    let dist = chamfer_to_invalid(&img.mask);
    let f = feather_px.max(1.0);
    Array2::from_shape_fn(img.pixels.dim(), |i| {
        let t = (dist[i] / f).min(1.0);
        let w = 0.5 * (1.0 - (std::f64::consts::PI * t).cos());
        (img.pixels[i] - mu) * w
    })
}

/// Heatmap file encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Ascii,
    BinaryF32,
}

/// Write a heatmap as a portable float map: a `width height` header line,
/// then row-major values, ASCII or little-endian f32.
pub fn save_heatmap<P: AsRef<Path>>(
    path: P,
    h: &CorrelationHeatmap,
    format: HeatmapFormat,
) -> Result<(), DpcError> {
    let (rows, cols) = h.shape();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{cols} {rows}")?;
    match format {
        HeatmapFormat::Ascii => {
            for r in 0..rows {
                let line: Vec<String> = (0..cols).map(|c| format!("{}", h.values[(r, c)])).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
        HeatmapFormat::BinaryF32 => {
            for v in h.values.iter() {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Read a heatmap written by [`save_heatmap`]; the encoding is detected
/// from the payload size.
pub fn load_heatmap<P: AsRef<Path>>(path: P) -> Result<CorrelationHeatmap, DpcError> {
    let file = std::fs::File::open(path)?;
    let mut reader = std::io::BufReader::new(file);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| DpcError::MalformedHeatmap(format!("bad header: {e}")))?;
    if dims.len() != 2 {
        return Err(DpcError::MalformedHeatmap("header must be 'width height'".into()));
    }
    let (cols, rows) = (dims[0], dims[1]);
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let n = rows * cols;
    let values = if payload.len() == 4 * n {
        let mut v = Vec::with_capacity(n);
        for chunk in payload.chunks_exact(4) {
            v.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        Array2::from_shape_vec((rows, cols), v).unwrap()
    } else {
        let text = String::from_utf8(payload)
            .map_err(|e| DpcError::MalformedHeatmap(format!("non-utf8 ascii payload: {e}")))?;
        let v: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DpcError::MalformedHeatmap(format!("bad value: {e}")))?;
        if v.len() != n {
            return Err(DpcError::MalformedHeatmap(format!("expected {n} values, got {}", v.len())));
        }
        Array2::from_shape_vec((rows, cols), v).unwrap()
    };
    Ok(CorrelationHeatmap { values, temperature: f64::NAN })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::synth::GroundTexture;

    fn textured(n: usize, seed: u64) -> Array2<f64> {
        let tex = GroundTexture::new(seed, 16.0, 4);
        Array2::from_shape_fn((n, n), |(r, c)| tex.sample(c as f64, r as f64))
    }

    fn as_bev(img: Array2<f64>, dpp: f64) -> BevImage {
        let mask = Array2::from_elem(img.dim(), true);
        BevImage { pixels: img, mask, dpp, frame_timestamp: 0.0 }
    }

    fn roll(img: &Array2<f64>, dy: isize, dx: isize) -> Array2<f64> {
        let (h, w) = img.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            let sr = (r as isize - dy).rem_euclid(h as isize) as usize;
            let sc = (c as isize - dx).rem_euclid(w as isize) as usize;
            img[(sr, sc)]
        })
    }

    #[test]
    fn constant_image_concentrates_in_dc() {
        let img = Array2::from_elem((32, 32), 0.8);
        let mag = magnitude_spectrum(&img, 0.0);
        let dc = mag[(16, 16)];
        assert!(dc > 1.0);
        for (idx, v) in mag.indexed_iter() {
            if idx != (16, 16) {
                assert!(*v < 1e-9, "non-DC bin {idx:?} has magnitude {v}");
            }
        }
    }

    #[test]
    fn magnitude_invariant_to_circular_shift() {
        let img = textured(64, 3);
        let shifted = roll(&img, 3, 5);
        let a = magnitude_spectrum(&img, 0.0);
        let b = magnitude_spectrum(&shifted, 0.0);
        for (va, vb) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(*va, *vb, epsilon = 1e-9);
        }
    }

    #[test]
    fn cosine_has_symmetric_peaks() {
        let n = 64;
        let k = 12;
        let img = Array2::from_shape_fn((n, n), |(_, c)| {
            (2.0 * std::f64::consts::PI * k as f64 * c as f64 / n as f64).cos()
        });
        let mag = magnitude_spectrum(&img, 0.0);
        let mut cells: Vec<((usize, usize), f64)> = mag.indexed_iter().map(|(i, v)| (i, *v)).collect();
        cells.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let top: Vec<(usize, usize)> = cells[..2].iter().map(|(i, _)| *i).collect();
        assert!(top.contains(&(n / 2, n / 2 + k)));
        assert!(top.contains(&(n / 2, n / 2 - k)));
    }

    #[test]
    fn phase_correlate_self_peaks_at_zero() {
        let img = textured(64, 9);
        let h = phase_correlate(&img, &img, 0.05).unwrap();
        let (er, ec) = expectation(&h);
        assert_abs_diff_eq!(fold_shift(er, 64), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(fold_shift(ec, 64), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn phase_correlate_recovers_circular_shift() {
        let a = textured(64, 11);
        let b = roll(&a, 7, -5);
        let h = phase_correlate(&a, &b, 0.05).unwrap();
        let (er, ec) = expectation(&h);
        assert_abs_diff_eq!(fold_shift(er, 64), 7.0, epsilon = 0.05);
        assert_abs_diff_eq!(fold_shift(ec, 64), -5.0, epsilon = 0.05);
    }

    #[test]
    fn unrelated_noise_has_no_confident_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 64;
        let uniform = 1.0 / (n * n) as f64;
        for _ in 0..100 {
            let a = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..1.0));
            let b = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..1.0));
            let h = phase_correlate(&a, &b, 0.05).unwrap();
            let max = h.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(max < 5.0 * uniform, "confident peak on unrelated noise: {max} vs uniform {uniform}");
        }
    }

    #[test]
    fn heatmaps_are_proper_distributions() {
        let a = textured(32, 1);
        let b = textured(32, 2);
        let h = phase_correlate(&a, &b, 0.05).unwrap();
        let sum: f64 = h.values.iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
        assert!(h.values.iter().all(|v| *v >= 0.0));
    }

    fn delta_heatmap(n: usize, cells: &[((usize, usize), f64)]) -> CorrelationHeatmap {
        let mut values = Array2::zeros((n, n));
        let total: f64 = cells.iter().map(|(_, v)| v).sum();
        for ((r, c), v) in cells {
            values[(*r, *c)] = v / total;
        }
        CorrelationHeatmap { values, temperature: 0.05 }
    }

    #[test]
    fn expectation_of_point_mass() {
        let h = delta_heatmap(64, &[((10, 20), 1.0)]);
        let (er, ec) = expectation(&h);
        assert_abs_diff_eq!(er, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ec, 20.0, epsilon = 1e-12);
    }

    #[test]
    fn expectation_of_symmetric_pair_is_midpoint() {
        let h = delta_heatmap(64, &[((10, 20), 0.5), ((10, 22), 0.5)]);
        let (er, ec) = expectation(&h);
        assert_abs_diff_eq!(er, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ec, 21.0, epsilon = 1e-12);
    }

    #[test]
    fn expectation_of_blurred_subpixel_peak() {
        let n = 64;
        let (r0, c0) = (10.3, 20.7);
        let sigma: f64 = 1.5;
        let mut values = Array2::zeros((n, n));
        for r in 0..n {
            for c in 0..n {
                let d2 = (r as f64 - r0).powi(2) + (c as f64 - c0).powi(2);
                values[(r, c)] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        let sum: f64 = values.iter().sum();
        values.mapv_inplace(|v| v / sum);
        let h = CorrelationHeatmap { values, temperature: 0.05 };
        let (er, ec) = expectation(&h);
        assert_abs_diff_eq!(er, r0, epsilon = 0.1);
        assert_abs_diff_eq!(ec, c0, epsilon = 0.1);
    }

    fn symmetric_field(n: usize, seed: u64) -> Array2<f64> {
        // Point-symmetric smooth field, like an FFT magnitude.
        let g = textured(n, seed);
        let (h, w) = g.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            let rr = (h - 1 - r + h / 2) % h;
            let cc = (w - 1 - c + w / 2) % w;
            let _ = (rr, cc);
            g[(r, c)] + g[(h - 1 - r, w - 1 - c)]
        })
    }

    #[test]
    fn log_polar_turns_rotation_into_angle_shift() {
        let n = 128;
        let field = symmetric_field(n, 31);
        let delta = 10f64.to_radians();
        let rotated = warp_sim2(&field, delta, 1.0, Vector2::zeros(), image_center(&field));
        let bins = 128;
        let lp_a = log_polar(&field, bins, bins);
        let lp_b = log_polar(&rotated, bins, bins);
        let h = phase_correlate(&lp_a, &lp_b, 0.05).unwrap();
        let (_, ec) = expectation(&h);
        let expected = delta * bins as f64 / std::f64::consts::PI;
        assert_abs_diff_eq!(fold_shift(ec, bins), expected, epsilon = 0.5);
    }

    #[test]
    fn log_polar_turns_scaling_into_radial_shift() {
        let n = 128;
        let field = symmetric_field(n, 32);
        let s = 1.12;
        let scaled = warp_sim2(&field, 0.0, s, Vector2::zeros(), image_center(&field));
        let bins = 128;
        let lp_a = log_polar(&field, bins, bins);
        let lp_b = log_polar(&scaled, bins, bins);
        let h = phase_correlate(&lp_a, &lp_b, 0.05).unwrap();
        let (er, _) = expectation(&h);
        let base = log_polar_base(n, bins);
        let expected = s.ln() / base.ln();
        assert_abs_diff_eq!(fold_shift(er, bins), expected, epsilon = 0.5);
    }

    #[test]
    fn log_polar_identity_has_zero_shift() {
        let field = symmetric_field(64, 33);
        let lp = log_polar(&field, 64, 64);
        let h = phase_correlate(&lp, &lp, 0.05).unwrap();
        let (er, ec) = expectation(&h);
        assert_abs_diff_eq!(fold_shift(er, 64), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(fold_shift(ec, 64), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn rot_scale_identity_pair() {
        let img = as_bev(textured(128, 41), 0.078125);
        let (theta, scale, _) = estimate_rot_scale(&img, &img, &DpcConfig::default()).unwrap();
        assert_abs_diff_eq!(theta, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(scale, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn rot_scale_recovers_ten_degrees() {
        let base = textured(128, 42);
        let theta = 10f64.to_radians();
        let cur = warp_sim2(&base, theta, 1.0, Vector2::zeros(), image_center(&base));
        let prev = as_bev(base, 0.078125);
        let cur = as_bev(cur, 0.078125);
        let (th, s, _) = estimate_rot_scale(&prev, &cur, &DpcConfig::default()).unwrap();
        assert_abs_diff_eq!(th, theta, epsilon = 0.5f64.to_radians());
        assert_abs_diff_eq!(s, 1.0, epsilon = 0.01);
    }

    #[test]
    fn rot_scale_recovers_five_percent_scale() {
        let base = textured(128, 43);
        let cur = warp_sim2(&base, 0.0, 1.05, Vector2::zeros(), image_center(&base));
        let prev = as_bev(base, 0.078125);
        let cur = as_bev(cur, 0.078125);
        let (th, s, _) = estimate_rot_scale(&prev, &cur, &DpcConfig::default()).unwrap();
        assert_abs_diff_eq!(s, 1.05, epsilon = 0.01);
        assert_abs_diff_eq!(th, 0.0, epsilon = 0.5f64.to_radians());
    }

    #[test]
    fn translation_identity_pair_is_zero() {
        let img = as_bev(textured(128, 44), 0.078125);
        let (t, _) = estimate_translation(&img, &img, &DpcConfig::default(), img.dpp).unwrap();
        assert_abs_diff_eq!(t.norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn translation_four_pixels_in_meters() {
        let dpp = 0.078125;
        let base = textured(128, 45);
        let cur = warp_sim2(&base, 0.0, 1.0, Vector2::new(4.0, 0.0), image_center(&base));
        let prev = as_bev(base, dpp);
        let cur = as_bev(cur, dpp);
        let (t, _) = estimate_translation(&prev, &cur, &DpcConfig::default(), dpp).unwrap();
        assert_abs_diff_eq!(t.x, 0.3125, epsilon = 0.01);
        assert_abs_diff_eq!(t.y, 0.0, epsilon = 0.01);
    }

    #[test]
    fn translation_subpixel_recovery() {
        let dpp = 1.0;
        let base = textured(128, 46);
        let cur = warp_sim2(&base, 0.0, 1.0, Vector2::new(3.0, -2.0), image_center(&base));
        let prev = as_bev(base, dpp);
        let cur = as_bev(cur, dpp);
        let (t, _) = estimate_translation(&prev, &cur, &DpcConfig::default(), dpp).unwrap();
        assert_abs_diff_eq!(t.x, 3.0, epsilon = 0.25);
        assert_abs_diff_eq!(t.y, -2.0, epsilon = 0.25);
    }

    #[test]
    fn sim2_identity_pair() {
        let img = as_bev(textured(128, 47), 0.078125);
        let (pose, rs, tr) = estimate_sim2(&img, &img, &DpcConfig::default()).unwrap();
        assert_abs_diff_eq!(pose.theta, 0.0, epsilon = 0.1f64.to_radians());
        assert_abs_diff_eq!(pose.scale, 1.0, epsilon = 0.005);
        assert!(pose.translation.norm() < 0.02);
        let s1: f64 = rs.values.iter().sum();
        let s2: f64 = tr.values.iter().sum();
        assert_abs_diff_eq!(s1, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s2, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn sim2_recovers_known_transform() {
        let dpp = 0.078125;
        let theta = 5f64.to_radians();
        let t_m = Vector2::new(0.5, 0.2);
        let t_px = t_m / dpp;
        let base = textured(128, 48);
        let cur = warp_sim2(&base, theta, 1.0, t_px, image_center(&base));
        let prev = as_bev(base, dpp);
        let cur = as_bev(cur, dpp);
        let (pose, _, _) = estimate_sim2(&prev, &cur, &DpcConfig::default()).unwrap();
        assert_abs_diff_eq!(pose.theta, theta, epsilon = 0.5f64.to_radians());
        assert_abs_diff_eq!(pose.scale, 1.0, epsilon = 0.01);
        assert!((pose.translation - t_m).norm() < 0.05, "translation {:?}", pose.translation);
    }

    #[test]
    fn sim2_inverse_consistency() {
        let dpp = 0.1;
        let base = textured(128, 49);
        let cur = warp_sim2(&base, 0.1, 1.02, Vector2::new(5.0, -3.0), image_center(&base));
        let a = as_bev(base, dpp);
        let b = as_bev(cur, dpp);
        let cfg = DpcConfig::default();
        let (fwd, _, _) = estimate_sim2(&a, &b, &cfg).unwrap();
        let (bwd, _, _) = estimate_sim2(&b, &a, &cfg).unwrap();
        let comp = crate::geom::compose_sim2(&fwd, &bwd);
        assert_abs_diff_eq!(comp.theta, 0.0, epsilon = 0.5f64.to_radians());
        assert_abs_diff_eq!(comp.scale, 1.0, epsilon = 0.01);
        assert!(comp.translation.norm() < 0.05, "residual {:?}", comp.translation);
    }

    #[test]
    fn rot_scale_equivariant_to_common_translation() {
        let n = 128;
        let bins = DpcConfig::default().angular_bins;
        let base = textured(n, 50);
        let cur = warp_sim2(&base, 0.06, 1.0, Vector2::new(2.0, 1.0), image_center(&base));
        let cfg = DpcConfig::default();
        let (th0, s0, _) =
            estimate_rot_scale(&as_bev(base.clone(), 1.0), &as_bev(cur.clone(), 1.0), &cfg).unwrap();
        let (th1, s1, _) = estimate_rot_scale(
            &as_bev(roll(&base, 6, -4), 1.0),
            &as_bev(roll(&cur, 6, -4), 1.0),
            &cfg,
        )
        .unwrap();
        let dtheta_bins = (th1 - th0).abs() * bins as f64 / std::f64::consts::PI;
        let base_lp = log_polar_base(n, cfg.radial_bins);
        let dscale_bins = ((s1 / s0).ln() / base_lp.ln()).abs();
        assert!(dtheta_bins < 0.2, "theta moved {dtheta_bins} bins");
        assert!(dscale_bins < 0.2, "scale moved {dscale_bins} bins");
    }

    #[test]
    fn expectation_responds_smoothly_to_pixel_perturbations() {
        // Finite and step-consistent sensitivity of the readout to single
        // input pixels, checked by step halving.
        let dpp = 1.0;
        let base = textured(64, 51);
        let cur = warp_sim2(&base, 0.0, 1.0, Vector2::new(3.0, 1.0), image_center(&base));
        let cfg = DpcConfig { radial_bins: 64, angular_bins: 64, ..DpcConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(52);

        let readout = |img: &Array2<f64>| -> Vector2<f64> {
            let (pose, _, _) = estimate_sim2(&as_bev(base.clone(), dpp), &as_bev(img.clone(), dpp), &cfg).unwrap();
            pose.translation
        };
        for _ in 0..20 {
            let r = rng.gen_range(8..56);
            let c = rng.gen_range(8..56);
            let mut grads = Vec::new();
            for h in [1e-3, 5e-4] {
                let mut plus = cur.clone();
                plus[(r, c)] += h;
                let mut minus = cur.clone();
                minus[(r, c)] -= h;
                let g = (readout(&plus) - readout(&minus)) / (2.0 * h);
                assert!(g.x.is_finite() && g.y.is_finite());
                grads.push(g);
            }
            let norm = grads[0].norm().max(1e-6);
            assert!(
                (grads[0] - grads[1]).norm() / norm < 1e-2,
                "pixel ({r},{c}): grads {:?} vs {:?}",
                grads[0],
                grads[1]
            );
        }
    }

    #[test]
    fn heatmap_file_roundtrip() {
        let img = textured(32, 53);
        let h = phase_correlate(&img, &roll(&img, 2, 1), 0.05).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let ascii = dir.path().join("map.txt");
        save_heatmap(&ascii, &h, HeatmapFormat::Ascii).unwrap();
        let loaded = load_heatmap(&ascii).unwrap();
        assert_eq!(loaded.shape(), h.shape());
        for (a, b) in loaded.values.iter().zip(h.values.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let bin = dir.path().join("map.fmap");
        save_heatmap(&bin, &h, HeatmapFormat::BinaryF32).unwrap();
        let loaded = load_heatmap(&bin).unwrap();
        for (a, b) in loaded.values.iter().zip(h.values.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-7);
        }
    }
}
