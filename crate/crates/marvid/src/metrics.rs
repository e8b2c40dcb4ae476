//! Pixel-space reconstruction metrics over generated frames, plus the
//! closed-form baselines model outputs are compared against. Baselines are
//! computed from the ground-truth video alone, never from model code.

use serde::Serialize;

use crate::data::Video;
use crate::error::{Error, Result};
use crate::masking::FrameMask;

/// Exact matches report this instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Stabilizers (0.01 L)^2 and (0.03 L)^2 with dynamic range L = 1.
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!(
            "mse needs equal nonzero lengths, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB for signals in [0, 1], capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * e.log10()).min(PSNR_CAP_DB))
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..n)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Valid-region separable Gaussian filter: rows then columns, keeping only
/// positions where the full window fits.
fn filter_valid(field: &[f64], width: usize, height: usize, w1d: &[f64]) -> Vec<f64> {
    let k = w1d.len();
    let ow = width - k + 1;
    let oh = height - k + 1;
    let mut rows = vec![0.0f64; height * ow];
    for r in 0..height {
        for c in 0..ow {
            let mut acc = 0.0;
            for (j, &wj) in w1d.iter().enumerate() {
                acc += wj * field[r * width + c + j];
            }
            rows[r * ow + c] = acc;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, &wi) in w1d.iter().enumerate() {
                acc += wi * rows[(r + i) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    out
}

/// Structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5), averaged over the valid region only.
pub fn ssim(a: &[f32], b: &[f32], width: usize, height: usize) -> Result<f64> {
    if a.len() != width * height || b.len() != width * height {
        return Err(Error::shape(format!(
            "ssim buffers must be {width}x{height}, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs images of at least {SSIM_WINDOW}px, got {width}x{height}"
        )));
    }
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();

    let w1d = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mu_x = filter_valid(&x, width, height, &w1d);
    let mu_y = filter_valid(&y, width, height, &w1d);
    let m_xx = filter_valid(&xx, width, height, &w1d);
    let m_yy = filter_valid(&yy, width, height, &w1d);
    let m_xy = filter_valid(&xy, width, height, &w1d);

    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (ux, uy) = (mu_x[i], mu_y[i]);
        let var_x = m_xx[i] - ux * ux;
        let var_y = m_yy[i] - uy * uy;
        let cov = m_xy[i] - ux * uy;
        let num = (2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ux * ux + uy * uy + SSIM_C1) * (var_x + var_y + SSIM_C2);
        total += num / den;
    }
    Ok(total / mu_x.len() as f64)
}

/// Index of the REF frame closest to `f`; earlier frame wins ties.
pub fn nearest_ref_frame(mask: &FrameMask, f: usize) -> usize {
    mask.ref_indices()
        .into_iter()
        .min_by_key(|&r| (r.abs_diff(f), r))
        .expect("mask always has a ref frame")
}

fn check_video_mask(truth: &Video, mask: &FrameMask) -> Result<()> {
    if truth.frames != mask.frames() {
        return Err(Error::shape(format!(
            "video has {} frames but mask covers {}",
            truth.frames,
            mask.frames()
        )));
    }
    Ok(())
}

/// Baseline that fills every generated frame with a copy of the nearest
/// preserved frame.
pub fn copy_nearest_baseline(truth: &Video, mask: &FrameMask) -> Result<Video> {
    check_video_mask(truth, mask)?;
    let mut out = truth.clone();
    for f in mask.gen_indices() {
        let src = nearest_ref_frame(mask, f);
        let copied = truth.frame(src).to_vec();
        out.frame_mut(f).copy_from_slice(&copied);
    }
    Ok(out)
}

/// Baseline that fills every generated frame with the time-linear pixel
/// blend of the surrounding preserved frames (or a copy where only one
/// side exists).
pub fn linear_blend_baseline(truth: &Video, mask: &FrameMask) -> Result<Video> {
    check_video_mask(truth, mask)?;
    let refs = mask.ref_indices();
    let mut out = truth.clone();
    for f in mask.gen_indices() {
        let prev = refs.iter().copied().filter(|&r| r < f).max();
        let next = refs.iter().copied().filter(|&r| r > f).min();
        let blended: Vec<f32> = match (prev, next) {
            (Some(p), Some(n)) => {
                let w = (f - p) as f32 / (n - p) as f32;
                truth
                    .frame(p)
                    .iter()
                    .zip(truth.frame(n))
                    .map(|(&a, &b)| (1.0 - w) * a + w * b)
                    .collect()
            }
            (Some(p), None) => truth.frame(p).to_vec(),
            (None, Some(n)) => truth.frame(n).to_vec(),
            (None, None) => unreachable!("mask always has a ref frame"),
        };
        out.frame_mut(f).copy_from_slice(&blended);
    }
    Ok(out)
}

/// The generated frame farthest from any preserved frame: the hardest one,
/// reported separately as the middle-frame metric. Lower index wins ties.
pub fn hardest_gen_frame(mask: &FrameMask) -> usize {
    mask.gen_indices()
        .into_iter()
        .max_by_key(|&f| (f.abs_diff(nearest_ref_frame(mask, f)), mask.frames() - f))
        .expect("mask always has a generated frame")
}

/// Reconstruction quality of the generated frames of one video.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FrameMetrics {
    /// Mean per-frame PSNR over generated frames.
    pub psnr: f64,
    /// Mean per-frame SSIM over generated frames.
    pub ssim: f64,
    /// PSNR of the hardest (farthest-from-REF) generated frame.
    pub midf_psnr: f64,
    /// SSIM of that same frame.
    pub midf_ssim: f64,
}

pub fn masked_frame_metrics(pred: &Video, truth: &Video, mask: &FrameMask) -> Result<FrameMetrics> {
    check_video_mask(truth, mask)?;
    if pred.width != truth.width || pred.height != truth.height || pred.frames != truth.frames {
        return Err(Error::shape(format!(
            "prediction {}x{}x{} does not match truth {}x{}x{}",
            pred.frames, pred.height, pred.width, truth.frames, truth.height, truth.width
        )));
    }
    let gen = mask.gen_indices();
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for &f in &gen {
        psnr_sum += psnr(pred.frame(f), truth.frame(f))?;
        ssim_sum += ssim(pred.frame(f), truth.frame(f), pred.width, pred.height)?;
    }
    let mid = hardest_gen_frame(mask);
    Ok(FrameMetrics {
        psnr: psnr_sum / gen.len() as f64,
        ssim: ssim_sum / gen.len() as f64,
        midf_psnr: psnr(pred.frame(mid), truth.frame(mid))?,
        midf_ssim: ssim(pred.frame(mid), truth.frame(mid), pred.width, pred.height)?,
    })
}

/// Mean and sample standard deviation of a batch of scalar results.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn from_samples(samples: &[f64]) -> Result<MeanStd> {
        if samples.is_empty() {
            return Err(Error::shape("mean of no samples"));
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64;
            var.sqrt()
        } else {
            0.0
        };
        Ok(MeanStd { mean, std, n })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Rng, StreamId};

    #[test]
    fn psnr_of_identical_hits_the_cap_and_known_gap_matches() {
        let a = vec![0.25f32; 64];
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        // Uniform offset of 0.5: mse 0.25, psnr 10*log10(4).
        let b = vec![0.75f32; 64];
        let expect = 10.0 * 4.0f64.log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
        assert!(mse(&a, &[0.0; 63]).is_err());
    }

    #[test]
    fn ssim_of_identical_is_one() {
        let mut rng = Rng::new(5, StreamId::Custom(50));
        let img: Vec<f32> = (0..16 * 16).map(|_| rng.uniform() as f32).collect();
        let s = ssim(&img, &img, 16, 16).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "got {s}");
    }

    /// Direct nested-loop implementation straight from the formula, with
    /// explicit 2d window weights. The production path is separable; the
    /// two must agree.
    fn ssim_reference(a: &[f32], b: &[f32], width: usize, height: usize) -> f64 {
        let w1d = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
        let mut vals = Vec::new();
        for r0 in 0..=(height - SSIM_WINDOW) {
            for c0 in 0..=(width - SSIM_WINDOW) {
                let (mut ux, mut uy) = (0.0f64, 0.0f64);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let w = w1d[i] * w1d[j];
                        ux += w * a[(r0 + i) * width + c0 + j] as f64;
                        uy += w * b[(r0 + i) * width + c0 + j] as f64;
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let w = w1d[i] * w1d[j];
                        let dx = a[(r0 + i) * width + c0 + j] as f64 - ux;
                        let dy = b[(r0 + i) * width + c0 + j] as f64 - uy;
                        vx += w * dx * dx;
                        vy += w * dy * dy;
                        cov += w * dx * dy;
                    }
                }
                vals.push(
                    ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2)),
                );
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn ssim_matches_scalar_reference_on_random_and_negated_images() {
        let mut rng = Rng::new(9, StreamId::Custom(51));
        for trial in 0..5 {
            let a: Vec<f32> = (0..20 * 14).map(|_| rng.uniform() as f32).collect();
            let b: Vec<f32> = (0..20 * 14).map(|_| rng.uniform() as f32).collect();
            let fast = ssim(&a, &b, 20, 14).unwrap();
            let slow = ssim_reference(&a, &b, 20, 14);
            assert!((fast - slow).abs() < 1e-9, "trial {trial}: {fast} vs {slow}");
            // Negation: strong anti-correlation drives SSIM negative.
            let neg: Vec<f32> = a.iter().map(|&v| 1.0 - v).collect();
            let fast = ssim(&a, &neg, 20, 14).unwrap();
            let slow = ssim_reference(&a, &neg, 20, 14);
            assert!((fast - slow).abs() < 1e-9);
            assert!(fast < 0.0, "negated image should anti-correlate, got {fast}");
        }
    }

    #[test]
    fn ssim_is_symmetric_and_rejects_small_images() {
        let mut rng = Rng::new(2, StreamId::Custom(52));
        let a: Vec<f32> = (0..12 * 12).map(|_| rng.uniform() as f32).collect();
        let b: Vec<f32> = (0..12 * 12).map(|_| rng.uniform() as f32).collect();
        let ab = ssim(&a, &b, 12, 12).unwrap();
        let ba = ssim(&b, &a, 12, 12).unwrap();
        assert_eq!(ab, ba);
        assert!(ssim(&a[..100], &b[..100], 10, 10).is_err());
    }

    fn staircase_video() -> Video {
        // 5 frames of 12x12, frame f constant at f/10.
        let (w, h, k) = (12usize, 12usize, 5usize);
        let mut data = Vec::with_capacity(w * h * k);
        for f in 0..k {
            data.extend(std::iter::repeat(f as f32 / 10.0).take(w * h));
        }
        Video { width: w, height: h, frames: k, data }
    }

    #[test]
    fn copy_baseline_picks_nearest_ref_with_earlier_tie() {
        let truth = staircase_video();
        let mask = FrameMask::interpolation(5).unwrap();
        let out = copy_nearest_baseline(&truth, &mask).unwrap();
        // Frames 0 and 4 preserved; 1 -> 0, 3 -> 4, 2 ties and takes 0.
        assert_eq!(out.frame(1)[0], 0.0);
        assert_eq!(out.frame(2)[0], 0.0);
        assert_eq!(out.frame(3)[0], 0.4);
        assert_eq!(out.frame(0), truth.frame(0));
        assert_eq!(out.frame(4), truth.frame(4));
    }

    #[test]
    fn blend_baseline_is_exact_on_linear_motion_and_copies_one_sided() {
        let truth = staircase_video();
        let mask = FrameMask::interpolation(5).unwrap();
        let out = linear_blend_baseline(&truth, &mask).unwrap();
        // Intensities are linear in time, so the blend is exact.
        for f in 1..4 {
            for (a, b) in out.frame(f).iter().zip(truth.frame(f)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        // Image-to-video: no ref after f=0, every gen frame copies frame 0.
        let mask = FrameMask::image_to_video(5).unwrap();
        let out = linear_blend_baseline(&truth, &mask).unwrap();
        for f in 1..5 {
            assert_eq!(out.frame(f), truth.frame(0));
        }
    }

    #[test]
    fn hardest_frame_is_farthest_from_refs() {
        assert_eq!(hardest_gen_frame(&FrameMask::interpolation(5).unwrap()), 2);
        assert_eq!(hardest_gen_frame(&FrameMask::interpolation(9).unwrap()), 4);
        assert_eq!(hardest_gen_frame(&FrameMask::image_to_video(5).unwrap()), 4);
        assert_eq!(hardest_gen_frame(&FrameMask::expansion(6, 2).unwrap()), 5);
    }

    #[test]
    fn masked_metrics_cap_on_perfect_prediction_and_beat_worse_ones() {
        let truth = staircase_video();
        let mask = FrameMask::interpolation(5).unwrap();
        let m = masked_frame_metrics(&truth, &truth, &mask).unwrap();
        assert_eq!(m.psnr, PSNR_CAP_DB);
        assert!((m.ssim - 1.0).abs() < 1e-12);
        let blend = linear_blend_baseline(&truth, &mask).unwrap();
        let copy = copy_nearest_baseline(&truth, &mask).unwrap();
        let mb = masked_frame_metrics(&blend, &truth, &mask).unwrap();
        let mc = masked_frame_metrics(&copy, &truth, &mask).unwrap();
        assert!(mb.psnr > mc.psnr, "blend {} should beat copy {}", mb.psnr, mc.psnr);
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let s = MeanStd::from_samples(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((s.mean - 2.5).abs() < 1e-12);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(s.n, 4);
        let one = MeanStd::from_samples(&[7.0]).unwrap();
        assert_eq!(one.std, 0.0);
        assert!(MeanStd::from_samples(&[]).is_err());
    }
}
