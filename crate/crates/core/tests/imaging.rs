use std::f64::consts::{FRAC_PI_2, PI};

use csdasa::imaging::{
    band_power, build_multiframe, interpolate_to_grid, normalize_images, project_azimuthal_equidistant, Band,
    ChannelStats, ElectrodeMontage, GridSpec, ImageBuilder, ImagingConfig, MultiFrameEEGImage, SubjectDomain,
};
use csdasa::numerics::Tensor;
use csdasa::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::random_unit;

#[test]
fn projection_radius_is_angular_distance() {
    assert_eq!(project_azimuthal_equidistant([0.0, 0.0, 1.0]).unwrap(), (0.0, 0.0));
    let (x, y) = project_azimuthal_equidistant([1.0, 0.0, 0.0]).unwrap();
    assert!((x - FRAC_PI_2).abs() < 1e-15 && y.abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let p = random_unit(&mut rng);
        if p[0] == 0.0 && p[1] == 0.0 && p[2] < 0.0 {
            continue;
        }
        let (x, y) = project_azimuthal_equidistant(p).unwrap();
        assert!((x.hypot(y) - p[2].acos()).abs() <= 1e-12);
        if x.hypot(y) > 1e-9 {
            let azimuth_err = (y.atan2(x) - p[1].atan2(p[0])).abs();
            assert!(azimuth_err <= 1e-12 || (azimuth_err - 2.0 * PI).abs() <= 1e-12);
        }
    }
}

#[test]
fn projection_rejects_antipode_and_non_unit_vectors() {
    assert!(matches!(project_azimuthal_equidistant([0.0, 0.0, -1.0]), Err(Error::Config(_))));
    assert!(matches!(project_azimuthal_equidistant([0.0, 0.5, 0.5]), Err(Error::Config(_))));
}

fn sine(freq: f64, amp: f64, fs: f64, len: usize, phase: f64) -> Vec<f64> {
    (0..len).map(|n| amp * (2.0 * PI * freq * n as f64 / fs + phase).sin()).collect()
}

#[test]
fn alpha_sinusoid_dominates_alpha_band() {
    let signal = vec![sine(10.0, 1.0, 128.0, 128, 0.3)];
    let bands = Band::defaults();
    let p: Vec<f64> = bands.iter().map(|b| band_power(&signal, b, 128.0).unwrap()[0]).collect();
    assert!(p[1] > 10.0 * p[0], "alpha {} theta {}", p[1], p[0]);
    assert!(p[1] > 10.0 * p[2], "alpha {} beta {}", p[1], p[2]);
}

#[test]
fn band_power_is_zero_for_silence_and_quadratic_in_amplitude() {
    let zero = vec![vec![0.0; 128]];
    for b in Band::defaults() {
        assert_eq!(band_power(&zero, &b, 128.0).unwrap()[0], 0.0);
    }
    let alpha = &Band::defaults()[1];
    let once = band_power(&[sine(11.0, 1.0, 128.0, 128, 0.0)], alpha, 128.0).unwrap()[0];
    let twice = band_power(&[sine(11.0, 2.0, 128.0, 128, 0.0)], alpha, 128.0).unwrap()[0];
    assert!((twice / once - 4.0).abs() < 0.04);
}

#[test]
fn band_power_configuration_errors() {
    let s = vec![vec![0.0; 128]];
    assert!(matches!(band_power(&s, &Band::new("high", 40.0, 70.0), 128.0), Err(Error::Config(_))));
    assert!(matches!(band_power(&[vec![0.0; 32]], &Band::new("theta", 4.0, 7.0), 128.0), Err(Error::Config(_))));
}

fn grid(n: usize, r: f64) -> GridSpec {
    GridSpec { rows: n, cols: n, half_width: r }
}

#[test]
fn constant_field_interpolates_to_constant() {
    let pts: Vec<(f64, f64, f64)> = [(-1.0, -1.0), (1.0, -1.0), (0.0, 1.0), (0.3, 0.1), (-0.4, 0.2)]
        .iter()
        .map(|&(x, y)| (x, y, 2.5))
        .collect();
    let img = interpolate_to_grid(&pts, grid(9, 1.2)).unwrap();
    assert!(img.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn grid_nodes_on_data_points_are_exact() {
    let g = grid(5, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let nodes = [(0, 0), (0, 4), (4, 0), (4, 4), (2, 2), (1, 3)];
    let pts: Vec<(f64, f64, f64)> = nodes
        .iter()
        .map(|&(i, j)| {
            let (x, y) = g.node(i, j);
            (x, y, rng.gen_range(-3.0..3.0))
        })
        .collect();
    let img = interpolate_to_grid(&pts, g).unwrap();
    for (&(i, j), p) in nodes.iter().zip(&pts) {
        assert!((img.get(&[i, j]) - p.2).abs() <= 1e-9);
    }
}

#[test]
fn symmetric_neighbours_average_at_the_centre() {
    let pts = [(-1.0, 0.0, 0.0), (1.0, 0.0, 1.0), (0.0, 1.0, 0.5), (0.0, -1.0, 0.5)];
    let img = interpolate_to_grid(&pts, grid(3, 1.0)).unwrap();
    assert!((img.get(&[1, 1]) - 0.5).abs() <= 1e-9);
}

#[test]
fn interpolation_input_errors() {
    let conflicting = [(0.0, 0.0, 1.0), (0.0, 0.0, 2.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)];
    assert!(matches!(interpolate_to_grid(&conflicting, grid(4, 1.0)), Err(Error::Data(_))));
    let collinear = [(0.0, 0.0, 1.0), (1.0, 1.0, 2.0), (2.0, 2.0, 0.0)];
    assert!(matches!(interpolate_to_grid(&collinear, grid(4, 1.0)), Err(Error::Data(_))));
    let repeated = [(0.0, 0.0, 1.0), (0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)];
    assert!(interpolate_to_grid(&repeated, grid(4, 1.0)).is_ok());
}

#[test]
fn montage_parsing_and_validation() {
    let m = ElectrodeMontage::parse("# head\nCz 0 0 2\n\nFz 0 3 3\nPz 0 -1 1\n").unwrap();
    assert_eq!(m.len(), 3);
    for e in m.electrodes() {
        let n = e.position.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    assert_eq!(ElectrodeMontage::parse(&m.to_text()).unwrap().len(), 3);
    assert!(matches!(ElectrodeMontage::parse("A 0 0 1\nA 1 0 0\n"), Err(Error::Data(_))));
    assert!(matches!(ElectrodeMontage::parse("A 0 0\n"), Err(Error::Data(_))));
    let std = ElectrodeMontage::standard_64();
    assert_eq!(std.len(), 64);
}

/// Every electrode carries integer cycles per window, so all frames share
/// one spectrum.
fn stationary_trial(rng: &mut ChaCha8Rng, electrodes: usize, len: usize) -> Vec<Vec<f64>> {
    (0..electrodes)
        .map(|_| {
            let a = sine(5.0, rng.gen_range(0.5..2.0), 128.0, len, rng.gen_range(0.0..PI));
            let b = sine(10.0, rng.gen_range(0.5..2.0), 128.0, len, rng.gen_range(0.0..PI));
            let c = sine(20.0, rng.gen_range(0.5..2.0), 128.0, len, rng.gen_range(0.0..PI));
            (0..len).map(|k| a[k] + b[k] + c[k]).collect()
        })
        .collect()
}

#[test]
fn full_size_images_and_stationarity() {
    let montage = ElectrodeMontage::standard_64();
    let config = ImagingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let trial = stationary_trial(&mut rng, 64, 7 * 128);
    let img = build_multiframe(&trial, &montage, &config, Some(2)).unwrap();
    assert_eq!(img.frames.shape(), &[7, 3, 32, 32]);
    let frame = 3 * 32 * 32;
    let first = &img.frames.data()[..frame];
    for f in 1..7 {
        let other = &img.frames.data()[f * frame..(f + 1) * frame];
        let diff = first.iter().zip(other).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "frame {f} differs by {diff}");
    }

    let zero = build_multiframe(&vec![vec![0.0; 7 * 128]; 64], &montage, &config, None).unwrap();
    assert!(zero.frames.data().iter().all(|&v| v == 0.0));

    let short = vec![vec![0.0; 7 * 128 - 1]; 64];
    assert!(matches!(build_multiframe(&short, &montage, &config, None), Err(Error::Data(_))));
}

#[test]
fn electrode_order_does_not_matter() {
    let montage = ElectrodeMontage::standard_64();
    let config = ImagingConfig { n_frames: 2, grid_size: 16, ..ImagingConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let trial: Vec<Vec<f64>> = (0..64).map(|_| (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut order: Vec<usize> = (0..64).collect();
    order.shuffle(&mut rng);
    let shuffled_trial: Vec<Vec<f64>> = order.iter().map(|&i| trial[i].clone()).collect();
    let a = ImageBuilder::new(&montage, &config).unwrap().build(&trial, None).unwrap();
    let b = ImageBuilder::new(&montage.permuted(&order), &config).unwrap().build(&shuffled_trial, None).unwrap();
    assert!(a.frames.max_abs_diff(&b.frames) <= 1e-12);
    let again = ImageBuilder::new(&montage, &config).unwrap().build(&trial, None).unwrap();
    assert_eq!(a, again);
}

fn domain_from(rng: &mut ChaCha8Rng, n: usize, channel_fn: impl Fn(&mut ChaCha8Rng, usize) -> f64) -> SubjectDomain {
    let samples = (0..n)
        .map(|k| {
            let mut t = Tensor::zeros(&[2, 3, 4, 4]);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = channel_fn(rng, (i / 16) % 3);
            }
            MultiFrameEEGImage::new(t, Some(k % 4)).unwrap()
        })
        .collect();
    SubjectDomain::new("s", samples).unwrap()
}

#[test]
fn normalization_moments_and_special_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = domain_from(&mut rng, 10, |r, c| 3.0 * c as f64 + r.gen_range(-2.0..2.0) * (c + 1) as f64);
    let stats = ChannelStats::fit(&d).unwrap();
    let normed = normalize_images(&d, &stats).unwrap();
    let re = ChannelStats::fit(&normed).unwrap();
    for c in 0..3 {
        assert!(re.mean[c].abs() <= 1e-9);
        assert!((re.std[c] - 1.0).abs() <= 1e-9);
    }
    let twice = normalize_images(&normed, &re).unwrap();
    for (a, b) in normed.samples().iter().zip(twice.samples()) {
        assert!(a.frames.max_abs_diff(&b.frames) <= 1e-9);
    }

    let constant = domain_from(&mut rng, 4, |r, c| if c == 1 { 7.5 } else { r.gen_range(0.0..1.0) });
    let stats = ChannelStats::fit(&constant).unwrap();
    let normed = normalize_images(&constant, &stats).unwrap();
    for s in normed.samples() {
        for (i, v) in s.frames.data().iter().enumerate() {
            if (i / 16) % 3 == 1 {
                assert_eq!(*v, 0.0);
            }
        }
    }
}

#[test]
fn subject_domain_label_prefix() {
    let img = |label| MultiFrameEEGImage::new(Tensor::zeros(&[1, 3, 2, 2]), label).unwrap();
    let d = SubjectDomain::new("s", vec![img(Some(1)), img(Some(0)), img(None)]).unwrap();
    assert_eq!((d.labeled_count(), d.unlabeled_count()), (2, 1));
    assert!(SubjectDomain::new("s", vec![img(None), img(Some(1))]).is_err());
    assert!(SubjectDomain::new("s", vec![img(Some(4))]).is_err());
    assert!(matches!(SubjectDomain::new("empty", vec![]), Err(Error::Data(m)) if m.contains("empty")));
    let stripped = d.with_labeled_count(1).unwrap();
    assert_eq!(stripped.labels(), vec![1]);
    assert!(stripped.samples()[1].label.is_none());
    assert!(matches!(d.with_labeled_count(3), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn interpolated_values_stay_within_data_range(n in 3usize..20, seed in any::<u64>(), size in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<(f64, f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-5.0..5.0)))
            .collect();
        let lo = pts.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
        if let Ok(img) = interpolate_to_grid(&pts, grid(size, 1.1)) {
            prop_assert!(img.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }
}
