mod common;

use common::synth_checks::fidelity;
use scalpel_seg::coco::Dataset;
use scalpel_seg::synth::{generate, shift_suite, ShiftKind, ShiftSpec, SuiteConfig};

fn object_areas(d: &Dataset) -> Vec<f64> {
    d.samples.iter().flat_map(|s| s.instances.iter().map(|i| i.mask(s.image.height, s.image.width).count() as f64)).collect()
}

/// Asymptotic two-sample Kolmogorov-Smirnov p-value.
fn ks_p_value(a: &[f64], b: &[f64]) -> f64 {
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let cdf = |xs: &[f64], x: f64| xs.partition_point(|&v| v <= x) as f64 / xs.len() as f64;
    let d = a.iter().chain(&b).map(|&x| (cdf(&a, x) - cdf(&b, x)).abs()).fold(0.0, f64::max);
    let n = (a.len() * b.len()) as f64 / (a.len() + b.len()) as f64;
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    // The alternating series does not converge this close to zero, where Q is 1.
    if lambda < 0.2 {
        return 1.0;
    }
    let q: f64 = (1..=100).map(|k| 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64 * lambda).powi(2)).exp()).sum();
    q.clamp(0.0, 1.0)
}

fn rgb_to_hue([r, g, b]: [f32; 3]) -> Option<f32> {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    if c < 1e-4 {
        return None;
    }
    let h = if max == r {
        ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        (b - r) / c + 2.0
    } else {
        (r - g) / c + 4.0
    };
    Some(h * 60.0)
}

/// Normalised 36-bin hue histogram of pixels covered by any object.
fn object_hue_histogram(d: &Dataset) -> Vec<f64> {
    let mut hist = vec![0.0; 36];
    for s in &d.samples {
        let (h, w) = (s.image.height, s.image.width);
        let masks: Vec<_> = s.instances.iter().map(|i| i.mask(h, w)).collect();
        for r in 0..h {
            for c in 0..w {
                if masks.iter().any(|m| m.get(r, c)) {
                    if let Some(hue) = rgb_to_hue(s.image.pixel(r, c)) {
                        hist[((hue / 10.0) as usize).min(35)] += 1.0;
                    }
                }
            }
        }
    }
    let total: f64 = hist.iter().sum();
    hist.iter().map(|v| v / total).collect()
}

fn suite() -> scalpel_seg::synth::Suite {
    shift_suite(&SuiteConfig { seed: 4, scale: 1.0, image_size: 64, ..SuiteConfig::default() }).unwrap()
}

#[test]
fn temporal_target_keeps_object_geometry() {
    let s = suite();
    let tune = object_areas(&s.tune);
    let r = object_areas(s.target("R").unwrap());
    let p = ks_p_value(&tune, &r);
    assert!(p > 0.01, "KS p = {p}");
}

#[test]
fn colour_target_hues_are_disjoint_from_tune() {
    let s = suite();
    let a = object_hue_histogram(&s.tune);
    let b = object_hue_histogram(s.target("C").unwrap());
    let overlap: f64 = a.iter().zip(&b).map(|(x, y)| x.min(*y)).sum();
    assert!(overlap < 0.05, "hue histogram overlap {overlap:.4}");
}

#[test]
fn occluders_shrink_visible_area() {
    let mean = |d: &Dataset| {
        let a = object_areas(d);
        a.iter().sum::<f64>() / a.len() as f64
    };
    let clear = generate(120, [1, 4], 64, &ShiftSpec::none(9)).unwrap();
    let occluded = generate(120, [1, 4], 64, &ShiftSpec::new(ShiftKind::Occlusion, 0.5, 9).unwrap()).unwrap();
    assert!(mean(&occluded) < mean(&clear), "{} vs {}", mean(&occluded), mean(&clear));
}

#[test]
fn annotations_match_silhouettes() {
    let ious = fidelity(100);
    assert!(ious.len() >= 100);
    let worst = ious.iter().cloned().fold(1.0, f64::min);
    assert!(worst >= 0.99, "worst object IoU {worst}");
}

#[test]
fn ks_detects_a_real_difference() {
    let a: Vec<f64> = (0..200).map(f64::from).collect();
    let b: Vec<f64> = (0..200).map(|v| f64::from(v) + 60.0).collect();
    assert!(ks_p_value(&a, &b) < 0.01);
    assert!(ks_p_value(&a, &a) > 0.99);
}
