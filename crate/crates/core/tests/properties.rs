mod common;

use std::sync::OnceLock;

use proptest::prelude::*;
use stereodiff::attention::{
    paired_denoise, AttentionMode, AttentionPlan, KvRouting, TimestepRange,
};
use stereodiff::codec::CodecConfig;
use stereodiff::denoiser::{AnalyticGaussian, Condition, Denoiser, ToyUNet, ToyUNetConfig};
use stereodiff::diffusion::{
    ddim_invert_step, ddim_step, forward_noise, sampling_schedule, NoiseSchedule, ScheduleKind,
};
use stereodiff::disparity::{
    depth_to_disparity, normalize, resample_to_latent, DisparityField, Resolution,
};
use stereodiff::eval::{psnr, run_benchmark, ssim, BenchmarkConfig, Method, Metric, PSNR_CAP};
use stereodiff::grid::{Image, LatentGrid, Mask};
use stereodiff::inversion::{ddim_sample, Guidance};
use stereodiff::io::{generate_corpus, parse_pfm, write_pfm, PfmImage, SyntheticWorldSpec};
use stereodiff::stereo::{spsmd_paste, stereo_pixel_shift, ShiftConfig, ShiftDirection};

fn schedule() -> &'static NoiseSchedule {
    static S: OnceLock<NoiseSchedule> = OnceLock::new();
    S.get_or_init(|| sampling_schedule(ScheduleKind::LinearBeta, 50).unwrap())
}

fn small_net() -> &'static ToyUNet {
    static N: OnceLock<ToyUNet> = OnceLock::new();
    N.get_or_init(|| {
        ToyUNet::new(ToyUNetConfig {
            latent_channels: 3,
            base_width: 8,
            ..ToyUNetConfig::default()
        })
        .unwrap()
    })
}

fn grid(c: usize, h: usize, w: usize) -> impl Strategy<Value = LatentGrid> {
    prop::collection::vec(-3.0f64..3.0, c * h * w)
        .prop_map(move |v| LatentGrid::from_vec(c, h, w, v).unwrap())
}

fn any_grid() -> impl Strategy<Value = LatentGrid> {
    (1usize..4, 1usize..6, 1usize..12).prop_flat_map(|(c, h, w)| grid(c, h, w))
}

/// A normalized field with some invalid sites and plenty of repeated values.
fn field(h: usize, w: usize) -> impl Strategy<Value = DisparityField> {
    (
        prop::collection::vec(
            prop_oneof![Just(0.0), Just(0.5), Just(1.0), 0.0f64..=1.0],
            h * w,
        ),
        prop::collection::vec(prop::bool::weighted(0.9), h * w),
    )
        .prop_map(move |(v, ok)| {
            DisparityField::with_validity(h, w, v, ok, Resolution::Latent).unwrap()
        })
}

fn grid_and_field() -> impl Strategy<Value = (LatentGrid, DisparityField)> {
    (1usize..4, 1usize..5, 1usize..16).prop_flat_map(|(c, h, w)| (grid(c, h, w), field(h, w)))
}

fn shift_cfg() -> impl Strategy<Value = ShiftConfig> {
    (0.0f64..6.0, any::<bool>()).prop_map(|(s, pos)| {
        ShiftConfig::new(
            s,
            if pos {
                ShiftDirection::Positive
            } else {
                ShiftDirection::Negative
            },
        )
    })
}

fn image(c: usize, h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..1.0, c * h * w)
        .prop_map(move |v| Image::from_vec(c, h, w, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invert_step_then_step_is_identity(z in any_grid(), t in 0usize..50, seed in any::<u64>()) {
        let e = LatentGrid::from_fn(z.channels(), z.height(), z.width(), |c, y, x| {
            (((seed as usize).wrapping_add(c * 31 + y * 7 + x) % 97) as f64 / 48.5) - 1.0
        });
        let up = ddim_invert_step(&z, &e, t, schedule()).unwrap();
        prop_assert_eq!(up.shape(), z.shape());
        let back = ddim_step(&up, &e, t + 1, schedule()).unwrap();
        prop_assert!(back.max_abs_diff(&z) <= 1e-9);
    }

    #[test]
    fn forward_noise_is_linear((a, b) in (1usize..3, 1usize..5).prop_flat_map(|(c, w)| (grid(c, 2, w), grid(c, 2, w))),
                               k in -2.0f64..2.0, t in 1usize..=50) {
        let s = schedule();
        let zero = LatentGrid::zeros(a.channels(), a.height(), a.width());
        let lhs = forward_noise(&a.zip_map(&b, |x, y| x + k * y).unwrap(), &zero, t, s).unwrap();
        let rhs = forward_noise(&a, &zero, t, s).unwrap()
            .zip_map(&forward_noise(&b, &zero, t, s).unwrap(), |x, y| x + k * y).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        let lhs = forward_noise(&zero, &a.zip_map(&b, |x, y| x + k * y).unwrap(), t, s).unwrap();
        let rhs = forward_noise(&zero, &a, t, s).unwrap()
            .zip_map(&forward_noise(&zero, &b, t, s).unwrap(), |x, y| x + k * y).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn analytic_sampling_fixes_the_noised_mean(mu in any_grid(), var in 0.05f64..2.0) {
        let s = schedule();
        let model = AnalyticGaussian::new(mu.clone(), var).unwrap();
        let zero = LatentGrid::zeros(mu.channels(), mu.height(), mu.width());
        let x_t = forward_noise(&mu, &zero, 50, s).unwrap();
        let out = ddim_sample(&x_t, 50, s, &Guidance::unguided(Condition::Null), &model, None).unwrap();
        prop_assert!(out.max_abs_diff(&mu) <= 1e-6);
    }

    #[test]
    fn codec_roundtrip_and_locality(img in (1usize..4).prop_flat_map(|c| image(c, 8, 12)), by in 0usize..4, bx in 0usize..6) {
        let codec = CodecConfig::new(2, img.channels()).unwrap();
        let lat = codec.encode(&img).unwrap();
        prop_assert_eq!(codec.decode(&lat).unwrap(), img.clone());
        let mut edited = img.clone();
        for c in 0..img.channels() {
            for dy in 0..2 {
                for dx in 0..2 {
                    edited.set(c, by * 2 + dy, bx * 2 + dx, 5.0);
                }
            }
        }
        let changed = codec.encode(&edited).unwrap();
        let mut sites = std::collections::BTreeSet::new();
        for c in 0..lat.channels() {
            for y in 0..lat.height() {
                for x in 0..lat.width() {
                    if lat.get(c, y, x) != changed.get(c, y, x) {
                        sites.insert((y, x));
                    }
                }
            }
        }
        prop_assert!(sites.len() <= 1);
        prop_assert!(sites.iter().all(|&s| s == (by, bx)));
    }

    #[test]
    fn normalize_is_idempotent_and_resample_preserves_bounds(f in field(8, 8)) {
        let n = normalize(&f).unwrap();
        prop_assert!(n.is_normalized());
        prop_assert_eq!(normalize(&n).unwrap(), n.clone());
        let img = f.clone().with_resolution(Resolution::Image);
        let lat = resample_to_latent(&img, &CodecConfig::default()).unwrap();
        if let (Some((lo, hi)), Some((llo, lhi))) = (img.valid_range(), lat.valid_range()) {
            prop_assert!(llo >= lo - 1e-12 && lhi <= hi + 1e-12);
        }
    }

    #[test]
    fn depth_to_disparity_reverses_order(depths in prop::collection::vec(0.1f64..100.0, 2..20), fb in 0.1f64..10.0) {
        let d = depth_to_disparity(&depths, 1, depths.len(), fb, 1.0).unwrap();
        for i in 0..depths.len() {
            for j in 0..depths.len() {
                if depths[i] < depths[j] {
                    prop_assert!(d.get(0, i) > d.get(0, j));
                }
            }
        }
    }

    #[test]
    fn shift_invariants((x, d) in grid_and_field(), cfg in shift_cfg()) {
        let r = stereo_pixel_shift(&x, &d, &cfg).unwrap();
        let (c, h, w) = x.shape();
        prop_assert_eq!(r.warped.shape(), x.shape());
        prop_assert!(!r.moved_mask.intersects(&r.hole_mask));
        let disp = |y: usize, u: usize| if d.is_valid(y, u) { d.get(y, u) } else { 0.0 };
        for y in 0..h {
            for xt in 0..w {
                if r.hole_mask.get(y, xt) {
                    for ch in 0..c {
                        prop_assert_eq!(r.warped.get(ch, y, xt), cfg.fill);
                    }
                    continue;
                }
                // sources landing here, by the gather definition
                let landing: Vec<usize> = (0..w)
                    .filter(|&u| u as i64 + r.displacement.get(y, u) == xt as i64)
                    .collect();
                prop_assert!(!landing.is_empty());
                let top = landing.iter().map(|&u| disp(y, u)).fold(f64::MIN, f64::max);
                let winner = landing.iter().copied().find(|&u| {
                    disp(y, u) == top && (0..c).all(|ch| x.get(ch, y, u) == r.warped.get(ch, y, xt))
                });
                prop_assert!(winner.is_some(), "no maximal-disparity source explains ({y},{xt})");
                prop_assert_eq!(r.moved_mask.get(y, xt), winner != Some(xt));
            }
        }
    }

    #[test]
    fn constant_rows_translate_exactly(x in grid(2, 3, 12), level in 0usize..5, s in 0.0f64..4.0) {
        let dv = level as f64 / 4.0;
        let d = DisparityField::constant(3, 12, dv, Resolution::Latent);
        let cfg = ShiftConfig::new(s, ShiftDirection::Positive);
        let k = (s * dv).round() as usize;
        let r = stereo_pixel_shift(&x, &d, &cfg).unwrap();
        for y in 0..3 {
            for xt in 0..12 {
                for ch in 0..2 {
                    let want = if xt >= k { x.get(ch, y, xt - k) } else { cfg.fill };
                    prop_assert_eq!(r.warped.get(ch, y, xt), want);
                }
            }
        }
    }

    #[test]
    fn paste_is_idempotent_and_empty_mask_is_noop(((x, d), right) in grid_and_field().prop_flat_map(|(x, d)| {
        let (c, h, w) = x.shape();
        (Just((x, d)), grid(c, h, w))
    }), cfg in shift_cfg()) {
        let moved = stereo_pixel_shift(&x, &d, &cfg).unwrap().moved_mask;
        let once = spsmd_paste(&right, &x, &d, &cfg, &moved).unwrap();
        let twice = spsmd_paste(&once, &x, &d, &cfg, &moved).unwrap();
        prop_assert_eq!(&once, &twice);
        let none = Mask::new(x.height(), x.width());
        prop_assert_eq!(spsmd_paste(&right, &x, &d, &cfg, &none).unwrap(), right.clone());
    }

    #[test]
    fn pfm_roundtrip_and_truncation(v in prop::collection::vec(-1e6f32..1e6, 1..40), cut in 1usize..8) {
        let w = v.len();
        let img = PfmImage { width: w, height: 1, channels: 1, data: v.iter().map(|&x| x as f64).collect() };
        let bytes = write_pfm(&img).unwrap();
        prop_assert_eq!(parse_pfm(&bytes).unwrap(), img);
        let short = &bytes[..bytes.len() - cut.min(bytes.len())];
        prop_assert!(parse_pfm(short).is_err());
    }

    #[test]
    fn metric_identities(a in (1usize..4).prop_flat_map(|c| image(c, 12, 14))) {
        prop_assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn uni_mode_leaves_left_untouched((l, r) in (grid(3, 4, 4), grid(3, 4, 4)), t in 1usize..=50) {
        let net = small_net();
        let s = schedule();
        let g = Guidance::unguided(Condition::token(2));
        let (uni_l, _) = paired_denoise(&l, &r, t, s, &g, &AttentionPlan::new(AttentionMode::Uni), net).unwrap();
        let (none_l, _) = paired_denoise(&l, &r, t, s, &g, &AttentionPlan::new(AttentionMode::None), net).unwrap();
        let single = net.predict(&l, s.alpha_bar(t).unwrap(), &Condition::token(2)).unwrap();
        prop_assert_eq!(uni_l.as_slice(), none_l.as_slice());
        prop_assert_eq!(uni_l.as_slice(), single.as_slice());
    }

    #[test]
    fn bi_mode_is_swap_symmetric((l, r) in (grid(3, 4, 4), grid(3, 4, 4)), t in 1usize..=50) {
        let net = small_net();
        let s = schedule();
        let g = Guidance::unguided(Condition::Null);
        let plan = AttentionPlan::new(AttentionMode::Bi);
        let (a_l, a_r) = paired_denoise(&l, &r, t, s, &g, &plan, net).unwrap();
        let (b_l, b_r) = paired_denoise(&r, &l, t, s, &g, &plan, net).unwrap();
        prop_assert_eq!(a_l.as_slice(), b_r.as_slice());
        prop_assert_eq!(a_r.as_slice(), b_l.as_slice());
    }

    #[test]
    fn recorded_attention_is_row_stochastic_and_passive(x in grid(3, 4, 4), y in grid(3, 4, 4)) {
        let net = small_net();
        let routing = KvRouting { sources: vec![vec![0, 1], vec![1, 0]], layers: Default::default() };
        let plain = net.predict_streams(&[&x, &y], 0.5, &Condition::token(1), Some(&routing), false).unwrap();
        let rec = net.predict_streams(&[&x, &y], 0.5, &Condition::token(1), Some(&routing), true).unwrap();
        for (p, r) in plain.iter().zip(&rec) {
            prop_assert_eq!(p.epsilon.as_slice(), r.epsilon.as_slice());
            for record in r.attention_records.as_ref().unwrap() {
                for map in &record.maps {
                    for row in 0..map.rows() {
                        let sum: f64 = (0..map.cols()).map(|c| map.get(row, c)).sum();
                        prop_assert!((sum - 1.0).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_timestep_range_equals_mode_none((l, r) in (grid(3, 4, 4), grid(3, 4, 4)), t in 1usize..=50) {
        let net = small_net();
        let s = schedule();
        let g = Guidance::unguided(Condition::Null);
        let empty = AttentionPlan {
            active: Some(TimestepRange { high: 0, low: 1 }),
            ..AttentionPlan::new(AttentionMode::Bi)
        };
        let a = paired_denoise(&l, &r, t, s, &g, &empty, net).unwrap();
        let b = paired_denoise(&l, &r, t, s, &g, &AttentionPlan::new(AttentionMode::None), net).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let a = Image::from_fn(3, 16, 16, |c, y, x| {
        ((c * 7 + y * 3 + x) % 11) as f64 / 10.0
    });
    let pattern = Image::from_fn(
        3,
        16,
        16,
        |c, y, x| if (c + y + x) % 2 == 0 { 1.0 } else { -1.0 },
    );
    let values: Vec<f64> = [0.01, 0.02, 0.05, 0.1, 0.2]
        .iter()
        .map(|&k| psnr(&a, &a.zip_map(&pattern, |v, p| v + k * p).unwrap(), 1.0).unwrap())
        .collect();
    assert!(values.windows(2).all(|p| p[1] < p[0]), "{values:?}");
}

#[test]
fn benchmark_means_match_rows() {
    let scenes = generate_corpus(&SyntheticWorldSpec::default(), 5).unwrap();
    let r = run_benchmark(
        &scenes,
        &[Method::LeaveBlank, Method::Stretch],
        &[Metric::Psnr, Metric::Ssim],
        &BenchmarkConfig::default(),
        None,
    )
    .unwrap();
    for rep in &r.reports {
        let vals: Vec<f64> = r
            .rows
            .iter()
            .filter(|row| row.method == rep.method && row.metric == rep.metric)
            .map(|row| row.value)
            .collect();
        assert_eq!(vals.len(), 5);
        let mean = vals.iter().sum::<f64>() / 5.0;
        assert!((mean - rep.mean).abs() < 1e-12);
    }
}

#[test]
fn full_sampling_runs_are_deterministic() {
    let net = small_net();
    let x = LatentGrid::from_fn(3, 4, 4, |c, y, x| ((c + 2 * y + 3 * x) % 5) as f64 - 2.0);
    let g = Guidance::new(Condition::token(3), 2.0);
    let a = ddim_sample(&x, 50, schedule(), &g, net, None).unwrap();
    let b = ddim_sample(&x, 50, schedule(), &g, net, None).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-6);
    let _ = net.supports_attention_control();
}
