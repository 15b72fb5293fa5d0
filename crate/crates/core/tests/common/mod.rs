//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use stereodiff::denoiser::Condition;
use stereodiff::denoiser::Denoiser;
use stereodiff::diffusion::NoiseSchedule;
use stereodiff::disparity::DisparityField;
use stereodiff::grid::{Image, LatentGrid};
use stereodiff::stereo::ShiftConfig;

pub struct BruteShift {
    pub data: Vec<f64>,
    pub moved: Vec<bool>,
    pub hole: Vec<bool>,
}

/// Forward warp by exhaustive search: for every target, scan all sources of
/// its row and keep the one with the largest disparity, earliest column on
/// ties.
pub fn brute_force_shift(
    data: &[f64],
    (c, h, w): (usize, usize, usize),
    disp: &DisparityField,
    cfg: &ShiftConfig,
) -> BruteShift {
    let mut out = vec![cfg.fill; data.len()];
    let mut moved = vec![false; h * w];
    let mut hole = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(usize, f64)> = None;
            for u in 0..w {
                let d = if disp.is_valid(y, u) {
                    disp.get(y, u)
                } else {
                    0.0
                };
                let k = (cfg.scale * d).round() as i64 * cfg.direction.sign();
                if u as i64 + k != x as i64 {
                    continue;
                }
                if best.is_none_or(|(_, bd)| d > bd) {
                    best = Some((u, d));
                }
            }
            match best {
                Some((u, _)) => {
                    for ch in 0..c {
                        out[ch * h * w + y * w + x] = data[ch * h * w + y * w + u];
                    }
                    moved[y * w + x] = u != x;
                }
                None => hole[y * w + x] = true,
            }
        }
    }
    BruteShift {
        data: out,
        moved,
        hole,
    }
}

pub fn psnr_oracle(a: &Image, b: &Image) -> f64 {
    let n = a.as_slice().len() as f64;
    let mse: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    -10.0 * mse.log10()
}

/// SSIM with an explicit 2-D Gaussian window evaluated at every fully
/// contained window position, no separable filtering.
pub fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (c, h, w) = a.shape();
    let (n, sigma) = (11usize, 1.5f64);
    let r = (n / 2) as f64;
    let mut win = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            win[i * n + j] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for ch in 0..c {
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        ma += win[i * n + j] * a.get(ch, y0 + i, x0 + j);
                        mb += win[i * n + j] * b.get(ch, y0 + i, x0 + j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let da = a.get(ch, y0 + i, x0 + j) - ma;
                        let db = b.get(ch, y0 + i, x0 + j) - mb;
                        va += win[i * n + j] * da * da;
                        vb += win[i * n + j] * db * db;
                        cov += win[i * n + j] * da * db;
                    }
                }
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

/// Plain-loop deterministic DDIM from `x` at timestep `from` down to 0,
/// written out from the update rule.
pub fn reference_ddim(
    x: &LatentGrid,
    from: usize,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    condition: &Condition,
) -> LatentGrid {
    let mut z = x.clone();
    for t in (1..=from).rev() {
        let a = schedule.alpha_bars()[t];
        let ap = schedule.alpha_bars()[t - 1];
        let eps = denoiser.predict(&z, a, condition).unwrap();
        let next: Vec<f64> = z
            .as_slice()
            .iter()
            .zip(eps.as_slice())
            .map(|(&xt, &e)| {
                let x0 = (xt - (1.0 - a).sqrt() * e) / a.sqrt();
                ap.sqrt() * x0 + (1.0 - ap).sqrt() * e
            })
            .collect();
        let (c, h, w) = z.shape();
        z = LatentGrid::from_vec(c, h, w, next).unwrap();
    }
    z
}
