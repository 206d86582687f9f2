use ferfuse::synth::{
    apply_occlusion, build_split, dataset_entry, generate_scene, occlusion_seed, render_landmark_heatmaps,
    DatasetProfile, Region, Split, NUM_LANDMARKS, NUM_REGIONS,
};
use ferfuse::TokenGrid;

/// Mouth-top parabola coefficient measured from pixels alone: every pixel
/// within 0.1 of the lip colour counts as mouth, the highest mouth pixel
/// per column gives the lip line, and a least-squares fit of
/// `top = a + b * u^2` (u in [-1, 1] across the mouth span) yields `-b`.
fn measured_curvature(image: &TokenGrid) -> f64 {
    const LIP: [f64; 3] = [0.62, 0.08, 0.14];
    let (h, w) = (image.height(), image.width());
    let mut tops = Vec::new();
    for x in 0..w {
        let top = (0..h).find(|&y| (0..3).all(|c| (image.get(c, y, x) - LIP[c]).abs() < 0.1));
        if let Some(y) = top {
            tops.push((x as f64, y as f64));
        }
    }
    assert!(tops.len() >= 5, "no mouth found");
    let lo = tops.first().unwrap().0;
    let hi = tops.last().unwrap().0;
    let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
    let pts: Vec<(f64, f64)> = tops.iter().map(|&(x, y)| (((x - mid) / half).powi(2), y)).collect();
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / n, sy / n);
    let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    -cov / var
}

#[test]
fn mouth_curvature_separates_all_classes() {
    // 128 px faces: adjacent classes differ by ~2.5 px of lip sag, enough
    // for the one-pixel quantization of the lip line at 64 px to blur.
    let p = DatasetProfile::occlufer_mini(32, 21);
    let mut intervals = Vec::new();
    for label in 0..8 {
        let stats: Vec<f64> = (0..100u64)
            .map(|i| measured_curvature(&generate_scene(label, 1000 * label as u64 + i, &p).unwrap().image))
            .collect();
        let mean = stats.iter().sum::<f64>() / 100.0;
        let sd = (stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
        intervals.push((mean - 2.0 * sd, mean + 2.0 * sd));
    }
    for pair in intervals.windows(2) {
        assert!(pair[0].1 < pair[1].0, "overlapping classes: {intervals:?}");
    }
}

#[test]
fn ten_thousand_positions_are_one_hot() {
    let p = DatasetProfile::occlufer_mini(16, 2);
    let mut positions = 0;
    for i in 0..40u64 {
        let s = generate_scene((i % 8) as usize, i, &p).unwrap();
        let s = apply_occlusion(&s, [0.0, 0.1, 0.2, 0.3][(i % 4) as usize], i).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let ones = (0..NUM_REGIONS).filter(|&c| s.seg.get(c, y, x) == 1.0).count();
                let zeros = (0..NUM_REGIONS).filter(|&c| s.seg.get(c, y, x) == 0.0).count();
                assert_eq!((ones, zeros), (1, NUM_REGIONS - 1));
                positions += 1;
            }
        }
    }
    assert!(positions >= 10_000);
}

#[test]
fn occluder_mass_matches_reported_fraction() {
    let p = DatasetProfile::uniform(8, 1, 1, 16, 4);
    for i in 0..200u64 {
        let s = generate_scene((i % 8) as usize, i, &p).unwrap();
        for ratio in [0.1, 0.2, 0.3] {
            let o = apply_occlusion(&s, ratio, i ^ 0xabc).unwrap();
            let scanned = o.seg.channel(Region::Occluder as usize).iter().filter(|&&v| v == 1.0).count();
            assert_eq!(scanned, o.occluded_cells);
            assert!((o.occlusion_ratio - scanned as f64 / 256.0).abs() <= 1.0 / 256.0);
            assert!((o.occlusion_ratio - ratio).abs() <= 0.01, "{ratio} -> {}", o.occlusion_ratio);
            assert_eq!(o.landmarks, s.landmarks);
        }
    }
}

#[test]
fn per_class_counts_are_exact() {
    let p = DatasetProfile::occlufer_mini(4, 9);
    for split in [Split::Train, Split::Val] {
        let samples = build_split(&p, split, None).unwrap();
        let mut counts = vec![0; 8];
        for s in &samples {
            counts[s.label] += 1;
        }
        assert_eq!(&counts, p.counts(split));
    }
}

#[test]
fn samples_regenerate_in_isolation() {
    let p = DatasetProfile::uniform(4, 5, 3, 8, 77);
    let val = build_split(&p, Split::Val, Some(0.3)).unwrap();
    for i in (0..val.len()).rev() {
        let (label, seed) = dataset_entry(&p, Split::Val, i);
        let s = apply_occlusion(&generate_scene(label, seed, &p).unwrap(), 0.3, occlusion_seed(seed)).unwrap();
        assert_eq!(s, val[i]);
    }
}

#[test]
fn heatmaps_match_extents_and_peak() {
    let p = DatasetProfile::occlufer_mini(16, 5);
    let s = generate_scene(2, 8, &p).unwrap();
    let h = render_landmark_heatmaps(&s.landmarks, 16, 16, 1.5).unwrap();
    assert_eq!((h.channels(), h.height(), h.width()), (NUM_LANDMARKS, 16, 16));
    for k in 0..NUM_LANDMARKS {
        let max = h.channel(k).iter().copied().fold(0.0, f64::max);
        assert!(max > 0.8 && max <= 1.0);
    }
}
