use codephys::hr::{band_bins, band_power, estimate_hr, DEFAULT_BAND};
use codephys::synth::*;
use codephys::video::{Rect, VideoClip};
use ndarray::{Array2, Array4};
use proptest::prelude::*;

fn clip(seed: u64) -> (SynthSpec, VideoClip) {
    let spec = SynthSpec::new(84.0, 40, 20, seed);
    let s = gen_ppg(&spec).unwrap();
    let v = render_video(&s, &spec).unwrap();
    (spec, v)
}

#[test]
fn clean_pulse_is_spectrally_pure() {
    // 10 s at 30 fps puts every multiple of 6 bpm on a DFT bin, so no
    // rectangular-window leakage spreads mass beyond the neighbours.
    for hr in [48.0, 72.0, 108.0, 168.0] {
        let spec = SynthSpec {
            harmonics: 0,
            ..SynthSpec::new(hr, 300, 8, 5)
        };
        let s = gen_ppg(&spec).unwrap();
        let freqs = band_bins(30.0, s.len(), DEFAULT_BAND).unwrap();
        let p = band_power(&s.samples, 30.0, &freqs);
        let df = 30.0 / s.len() as f64;
        let total: f64 = p.iter().sum();
        let near: f64 = freqs
            .iter()
            .zip(&p)
            .filter(|(f, _)| (**f - hr / 60.0).abs() <= df + 1e-9)
            .map(|(_, v)| v)
            .sum();
        assert!(near / total >= 0.95, "{hr}: {}", near / total);
        assert!((estimate_hr(&s, DEFAULT_BAND).unwrap() - hr).abs() <= 0.5);
    }
}

#[test]
fn harmonics_keep_the_fundamental_dominant() {
    let s = gen_ppg(&SynthSpec::new(72.0, 300, 8, 1)).unwrap();
    assert!((estimate_hr(&s, DEFAULT_BAND).unwrap() - 72.0).abs() <= 0.5);
}

#[test]
fn generators_are_deterministic() {
    let spec = SynthSpec {
        noise_std: 0.2,
        ..SynthSpec::new(90.0, 64, 12, 3)
    };
    assert_eq!(gen_ppg(&spec).unwrap(), gen_ppg(&spec).unwrap());
    let s = gen_ppg(&spec).unwrap();
    assert_eq!(
        render_video(&s, &spec).unwrap(),
        render_video(&s, &spec).unwrap()
    );
    let other = SynthSpec { seed: 4, ..spec };
    assert_ne!(gen_ppg(&spec).unwrap(), gen_ppg(&other).unwrap());
}

#[test]
fn rendered_skin_trace_recovers_the_rate() {
    for hr in [50.0, 75.0, 118.0] {
        let spec = SynthSpec::new(hr, 300, 32, 9);
        let s = gen_ppg(&spec).unwrap();
        let v = render_video(&s, &spec).unwrap();
        let trace =
            codephys::signal::PPGSignal::new(v.region_trace(spec.skin_region), 30.0).unwrap();
        assert!((estimate_hr(&trace, DEFAULT_BAND).unwrap() - hr).abs() <= 1.0);
        let r = codephys::signal::pearson(&trace.samples, &s.samples).unwrap();
        assert!(r > 0.99, "{r}");
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let s = gen_ppg(&SynthSpec::new(72.0, 40, 20, 1)).unwrap();
    let bad_region = SynthSpec {
        skin_region: Rect {
            top: 15,
            left: 0,
            height: 10,
            width: 5,
        },
        ..SynthSpec::new(72.0, 40, 20, 1)
    };
    assert!(render_video(&s, &bad_region).is_err());
    assert!(render_video(&s, &SynthSpec::new(72.0, 41, 20, 1)).is_err());
    assert!(gen_ppg(&SynthSpec::new(39.0, 40, 20, 1)).is_err());
    assert!(gen_ppg(&SynthSpec::new(181.0, 40, 20, 1)).is_err());
}

#[test]
fn unit_gamma_is_identity() {
    let (_, v) = clip(2);
    let d = DegradeSpec {
        gamma: [1.0, 1.0],
        ..DegradeSpec::new(DegradeKind::Brightness, 1)
    };
    assert_eq!(degrade(&v, &d).unwrap(), v);
    assert_eq!(
        degrade(&v, &DegradeSpec::new(DegradeKind::None, 1)).unwrap(),
        v
    );
}

#[test]
fn occlusion_zeroes_one_patch_per_frame() {
    let frames = Array4::from_elem((3, 12, 30, 40), 0.5);
    let v = VideoClip::new(frames, 30.0).unwrap();
    let area = Rect {
        top: 5,
        left: 10,
        height: 20,
        width: 20,
    };
    let d = DegradeSpec {
        occlusion_area: Some(area),
        ..DegradeSpec::new(DegradeKind::Occlusion, 3)
    };
    let out = degrade(&v, &d).unwrap();
    for t in 0..12 {
        let f = out.frame(t);
        let zeros: Vec<(usize, usize)> = (0..30)
            .flat_map(|y| (0..40).map(move |x| (y, x)))
            .filter(|&(y, x)| f[[0, y, x]] == 0.0)
            .collect();
        assert_eq!(zeros.len(), 3 * 4);
        let (y0, x0) = zeros[0];
        for &(y, x) in &zeros {
            assert!((y0..y0 + 3).contains(&y) && (x0..x0 + 4).contains(&x));
            assert!(area.top <= y && y < area.top + area.height);
            assert!(area.left <= x && x < area.left + area.width);
            for c in 0..3 {
                assert_eq!(f[[c, y, x]], 0.0);
            }
        }
        let changed = (0..3)
            .flat_map(|c| (0..30).flat_map(move |y| (0..40).map(move |x| (c, y, x))))
            .filter(|&(c, y, x)| f[[c, y, x]] != 0.5)
            .count();
        assert_eq!(changed, 3 * 12);
    }
}

#[test]
fn camera_noise_deviation_is_bounded() {
    let frames = Array4::from_elem((3, 100, 16, 16), 0.5);
    let v = VideoClip::new(frames, 30.0).unwrap();
    let a = 0.05;
    let d = DegradeSpec {
        noise_max: a,
        ..DegradeSpec::new(DegradeKind::CameraNoise, 11)
    };
    let out = degrade(&v, &d).unwrap();
    let mut positive = 0;
    for t in 0..100 {
        let mad = (&out.frame(t) - &v.frame(t)).mapv(f64::abs).mean().unwrap();
        assert!(mad <= 3.0 * a, "frame {t}: {mad}");
        if mad > 0.0 {
            positive += 1;
        }
    }
    assert!(positive >= 99);
}

/// Direct 5x5 correlation with reflected borders.
fn blur_oracle(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    let refl = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let p = 2 * (n - 1);
        let m = i.rem_euclid(p);
        (if m < n { m } else { p - m }) as usize
    };
    let g: Vec<f64> = (-2..=2)
        .map(|k: i32| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for dy in -2..=2isize {
            for dx in -2..=2isize {
                acc += g[(dy + 2) as usize]
                    * g[(dx + 2) as usize]
                    * img[[refl(y as isize + dy, h), refl(x as isize + dx, w)]];
            }
        }
        acc / norm
    })
}

#[test]
fn separable_blur_matches_direct_kernel() {
    let img = Array2::from_shape_fn((9, 11), |(y, x)| ((y * 31 + x * 17) % 23) as f64 / 23.0);
    for sigma in [0.5, 1.0, 1.5] {
        let a = gaussian_blur(&img, sigma);
        let b = blur_oracle(&img, sigma);
        assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn resolution_loss_removes_fine_detail() {
    let img = Array2::from_shape_fn((32, 32), |(y, x)| if (x + y) % 2 == 0 { 1.0 } else { 0.0 });
    let small = bilinear_resize(&img, 8, 8);
    let back = bilinear_resize(&small, 32, 32);
    let var = |a: &Array2<f64>| a.var(0.0);
    assert!(var(&back) < 0.5 * var(&img));
    let flat = Array2::from_elem((32, 32), 0.3);
    let back = bilinear_resize(&bilinear_resize(&flat, 11, 13), 32, 32);
    assert!(back.iter().all(|v| (v - 0.3).abs() < 1e-12));
}

fn kind() -> impl Strategy<Value = DegradeKind> {
    prop::sample::select(DegradeKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn degradations_preserve_shape_range_and_determinism(k in kind(), seed in any::<u64>(), per_frame in any::<bool>()) {
        let (spec, v) = clip(seed % 17);
        let d = DegradeSpec {
            per_frame,
            occlusion_area: Some(spec.skin_region),
            ..DegradeSpec::new(k, seed)
        };
        let out = degrade(&v, &d).unwrap();
        prop_assert_eq!(out.frames.dim(), v.frames.dim());
        prop_assert!(out.frames.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert_eq!(&degrade(&v, &d).unwrap(), &out);
    }

    #[test]
    fn kinds_parse_from_names(k in kind()) {
        prop_assert_eq!(k.name().parse::<DegradeKind>().unwrap(), k);
    }
}

#[test]
fn unknown_kind_is_an_error() {
    assert!("fog".parse::<DegradeKind>().is_err());
}

#[test]
fn per_clip_draws_apply_the_same_gamma_to_every_frame() {
    let frames = Array4::from_elem((3, 5, 4, 4), 0.5);
    let v = VideoClip::new(frames, 30.0).unwrap();
    let d = DegradeSpec {
        per_frame: false,
        ..DegradeSpec::new(DegradeKind::Brightness, 8)
    };
    let out = degrade(&v, &d).unwrap();
    let first = out.frames[[0, 0, 0, 0]];
    assert!(out.frames.iter().all(|&p| p == first));
    let d = DegradeSpec {
        per_frame: true,
        ..d
    };
    let out = degrade(&v, &d).unwrap();
    assert!(out.frames[[0, 0, 0, 0]] != out.frames[[0, 1, 0, 0]]);
}
