//! Walks the cosine noise schedule and the deterministic DDIM sampler on a
//! closed-form toy problem. With the exact velocity as the oracle, DDIM
//! reconstructs the clean signal from pure noise to near machine precision.

use marvid::diffusion::{
    add_noise, ddim_step, ddim_timesteps, predict_z0, velocity_target, Schedule,
};
use marvid::masking::FrameMask;
use marvid::rng::{Rng, StreamId};

fn main() {
    let t_max = 1000;
    let schedule = Schedule::cosine(t_max).expect("schedule");

    println!("t      alpha     sigma     alpha^2+sigma^2");
    for t in [1, 250, 500, 750, 1000] {
        let (a, s) = (schedule.alpha(t).unwrap(), schedule.sigma(t).unwrap());
        println!("{t:<5}  {a:.6}  {s:.6}  {:.9}", a * a + s * s);
    }

    for steps in [5, 25, 50] {
        let ts = ddim_timesteps(t_max, steps).expect("grid");
        println!(
            "\n{steps:>2} steps: t = {}..{} ending at t_prev = 0",
            ts[0],
            ts[ts.len() - 1]
        );
    }

    // One-frame "video": exact velocity in, exact signal out.
    let mut rng = Rng::new(5, StreamId::Noise(0));
    let z0: Vec<f32> = (0..64).map(|_| rng.gaussian() as f32).collect();
    let eps: Vec<f32> = (0..64).map(|_| rng.gaussian() as f32).collect();
    let mask = FrameMask::new(vec![true, false]).expect("mask");
    let z0_two: Vec<f32> = z0.iter().chain(&z0).copied().collect();
    let eps_two: Vec<f32> = eps.iter().chain(&eps).copied().collect();

    // Noising preserves REF frames bit-exactly.
    let z_noisy = add_noise(&schedule, &z0_two, &eps_two, 700, &mask, 64).expect("add_noise");
    assert!(z_noisy[..64]
        .iter()
        .zip(&z0)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    println!("\nadd_noise keeps the REF frame bit-exact");

    // predict_z0 inverts add_noise given the true velocity.
    let v = velocity_target(&schedule, &z0_two, &eps_two, 700).expect("velocity");
    let z_full: Vec<f32> = {
        let a = schedule.alpha(700).unwrap() as f32;
        let s = schedule.sigma(700).unwrap() as f32;
        z0_two.iter().zip(&eps_two).map(|(z, e)| a * z + s * e).collect()
    };
    let rec = predict_z0(&schedule, &z_full, &v, 700).expect("predict_z0");
    let err = rec
        .iter()
        .zip(&z0_two)
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    println!("predict_z0 max error at t=700: {err:.2e}");

    // Full DDIM descent with the oracle velocity for every t.
    let ts = ddim_timesteps(t_max, 25).expect("grid");
    let mut z: Vec<f32> = eps_two.clone();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        // The oracle: the exact velocity field of the straight path to z0.
        let eps_now: Vec<f32> = {
            let a = schedule.alpha(t).unwrap() as f32;
            let s = schedule.sigma(t).unwrap() as f32;
            if s == 0.0 {
                vec![0.0; z.len()]
            } else {
                z.iter().zip(&z0_two).map(|(zt, z0)| (zt - a * z0) / s).collect()
            }
        };
        let v: Vec<f32> = {
            let a = schedule.alpha(t).unwrap() as f32;
            let s = schedule.sigma(t).unwrap() as f32;
            eps_now.iter().zip(&z0_two).map(|(e, z)| a * e - s * z).collect()
        };
        z = ddim_step(&schedule, &z, &v, t, t_prev).expect("ddim step");
    }
    let err = z
        .iter()
        .zip(&z0_two)
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    println!("25-step oracle DDIM max reconstruction error: {err:.2e}");
    assert!(err < 1e-4);
}
