//! Frame metrics on a rendered scene: PSNR and SSIM sanity points, and how
//! the closed-form baselines (copy nearest reference, linear blend) score
//! on the interpolation task they are meant to calibrate.

use marvid::config::RunConfig;
use marvid::data::{render_video, SceneSpec};
use marvid::masking::FrameMask;
use marvid::metrics::{
    copy_nearest_baseline, hardest_gen_frame, linear_blend_baseline, masked_frame_metrics, psnr,
    ssim,
};
use marvid::rng::{Rng, StreamId};

fn main() {
    let cfg = RunConfig::default();
    let g = cfg.geometry;
    let mut rng = Rng::new(21, StreamId::Custom(0));
    let spec = SceneSpec::sample(&mut rng, &cfg.data);
    let video = render_video(&spec, g.high_px, g.frames);
    let frame = video.frame(0);

    // Identity scores: capped PSNR, perfect SSIM.
    println!(
        "frame vs itself:    psnr {:.1} dB, ssim {:.4}",
        psnr(frame, frame).unwrap(),
        ssim(frame, frame, g.high_px, g.high_px).unwrap()
    );
    let negated: Vec<f32> = frame.iter().map(|v| 1.0 - v).collect();
    println!(
        "frame vs negation:  psnr {:>5.1} dB, ssim {:+.4}",
        psnr(frame, &negated).unwrap(),
        ssim(frame, &negated, g.high_px, g.high_px).unwrap()
    );

    let mask = FrameMask::interpolation(g.frames).unwrap();
    println!(
        "\ninterpolation mask over {} frames; hardest generated frame: {}",
        g.frames,
        hardest_gen_frame(&mask)
    );
    let copy = copy_nearest_baseline(&video, &mask).unwrap();
    let blend = linear_blend_baseline(&video, &mask).unwrap();
    let mc = masked_frame_metrics(&copy, &video, &mask).unwrap();
    let mb = masked_frame_metrics(&blend, &video, &mask).unwrap();
    println!("copy-nearest-ref:   psnr {:.2} dB, ssim {:.4}, midf psnr {:.2}", mc.psnr, mc.ssim, mc.midf_psnr);
    println!("linear-blend:       psnr {:.2} dB, ssim {:.4}, midf psnr {:.2}", mb.psnr, mb.ssim, mb.midf_psnr);
    println!("\na trained model must beat copy-nearest-ref to claim any motion understanding");
}
