//! Procedural face-like scenes with ground-truth segmentation and
//! landmarks, rectangular occlusion, and class-count profiles.
//!
//! Images are rendered at `4 * grid` pixels per side; segmentation,
//! landmarks and heatmaps live on the `grid x grid` token lattice. Each
//! token cell covers a 4x4 pixel block.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::TokenGrid;

pub const PIXELS_PER_CELL: usize = 4;
pub const NUM_LANDMARKS: usize = 5;
pub const HEATMAP_SIGMA: f64 = 1.5;

/// Segmentation classes, in channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Region {
    Background = 0,
    Skin = 1,
    Eye = 2,
    Brow = 3,
    Mouth = 4,
    Occluder = 5,
}

pub const NUM_REGIONS: usize = 6;

/// Per-class train/validation counts of the eight-category occluded
/// expression benchmark, in the order AN, DI, FE, HA, NE, SA, SU, CO.
pub const BENCHMARK_TRAIN_COUNTS: [usize; 8] = [669, 533, 927, 1130, 1114, 960, 1125, 380];
pub const BENCHMARK_VAL_COUNTS: [usize; 8] = [86, 69, 136, 133, 144, 127, 148, 37];

const MOUTH_RGB: [f64; 3] = [0.62, 0.08, 0.14];
const SKIN_RGB: [f64; 3] = [0.86, 0.68, 0.54];
const EYE_RGB: [f64; 3] = [0.08, 0.08, 0.12];
const BROW_RGB: [f64; 3] = [0.32, 0.22, 0.14];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7452_4149_4e00_0001,
            Split::Val => 0x5641_4c00_0000_0002,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetProfile {
    pub name: String,
    pub train_counts: Vec<usize>,
    pub val_counts: Vec<usize>,
    /// Token lattice side; images are `4 * grid` pixels.
    pub grid: usize,
    pub seed: u64,
    /// Mouth curvature per class, in `[-1, 1]`.
    pub curvature_levels: Vec<f64>,
    /// Half-width of the uniform jitter added to the class curvature.
    pub curvature_jitter: f64,
    /// Whether mouth opening and brow tilt also vary with the class.
    pub aux_cues: bool,
}

/// Round-half-up scaling of class counts.
pub fn scale_counts(counts: &[usize], scale: f64) -> Vec<usize> {
    counts
        .iter()
        .map(|&c| (c as f64 * scale + 0.5).floor() as usize)
        .collect()
}

fn spaced_levels(k: usize, lo: f64, hi: f64) -> Vec<f64> {
    if k == 1 {
        return vec![0.0];
    }
    (0..k).map(|c| lo + (hi - lo) * c as f64 / (k - 1) as f64).collect()
}

impl DatasetProfile {
    /// Benchmark class proportions, counts multiplied by `scale`.
    pub fn occlufer(scale: f64, grid: usize, seed: u64) -> Self {
        Self {
            name: if scale == 1.0 { "occlufer".into() } else { "occlufer-mini".into() },
            train_counts: scale_counts(&BENCHMARK_TRAIN_COUNTS, scale),
            val_counts: scale_counts(&BENCHMARK_VAL_COUNTS, scale),
            grid,
            seed,
            curvature_levels: spaced_levels(8, -0.7, 0.7),
            curvature_jitter: 0.025,
            aux_cues: true,
        }
    }

    pub fn occlufer_mini(grid: usize, seed: u64) -> Self {
        Self::occlufer(0.1, grid, seed)
    }

    pub fn uniform(num_classes: usize, per_class: usize, val_per_class: usize, grid: usize, seed: u64) -> Self {
        Self {
            name: "uniform".into(),
            train_counts: vec![per_class; num_classes],
            val_counts: vec![val_per_class; num_classes],
            grid,
            seed,
            curvature_levels: spaced_levels(num_classes, -0.7, 0.7),
            curvature_jitter: 0.025,
            aux_cues: true,
        }
    }

    /// Two classes at opposite curvature extremes.
    pub fn separable_pair(per_class: usize, val_per_class: usize, grid: usize, seed: u64) -> Self {
        Self {
            name: "separable-pair".into(),
            ..Self::uniform(2, per_class, val_per_class, grid, seed)
        }
    }

    /// Four classes forming two pairs whose members differ only by a small
    /// curvature offset, with jitter large enough to make pairs overlap.
    pub fn confusable_pair(per_class: usize, val_per_class: usize, grid: usize, seed: u64) -> Self {
        Self {
            name: "confusable-pair".into(),
            train_counts: vec![per_class; 4],
            val_counts: vec![val_per_class; 4],
            grid,
            seed,
            curvature_levels: vec![-0.6, -0.35, 0.35, 0.6],
            curvature_jitter: 0.15,
            aux_cues: false,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.train_counts.len()
    }

    pub fn counts(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_counts,
            Split::Val => &self.val_counts,
        }
    }

    pub fn image_size(&self) -> usize {
        self.grid * PIXELS_PER_CELL
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        if k < 2 {
            return contract_err("profile needs at least 2 classes");
        }
        if self.val_counts.len() != k || self.curvature_levels.len() != k {
            return contract_err("train_counts, val_counts and curvature_levels must have equal length");
        }
        if self.train_counts.iter().sum::<usize>() == 0 {
            return contract_err("profile has no training samples");
        }
        if self.grid < 2 {
            return contract_err("grid must be at least 2");
        }
        if self.curvature_levels.iter().any(|c| !c.is_finite() || c.abs() > 1.0) {
            return contract_err("curvature levels must lie in [-1, 1]");
        }
        if !(self.curvature_jitter >= 0.0 && self.curvature_jitter.is_finite()) {
            return contract_err("curvature_jitter must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[3, 4g, 4g]` RGB in `[0, 1]`.
    pub image: TokenGrid,
    /// `[6, g, g]` one-hot regions.
    pub seg: TokenGrid,
    /// `(row, col)` in token-lattice units; pixel centers sit at `+0.5`.
    pub landmarks: Vec<(f64, f64)>,
    pub label: usize,
    pub occlusion_ratio: f64,
    pub occluded_cells: usize,
    pub seed: u64,
}

/// Drawing parameters for one scene; exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct FaceGeometry {
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub curvature: f64,
    pub opening: f64,
    pub brow_tilt: f64,
    pub mouth_center: (f64, f64),
    pub mouth_half_width: f64,
    pub mouth_sag: f64,
    pub eye_radius: f64,
    pub eyes: [(f64, f64); 2],
    pub nose: (f64, f64),
}

impl FaceGeometry {
    fn sample(label: usize, profile: &DatasetProfile, rng: &mut Rng) -> Self {
        let s = profile.image_size() as f64;
        let jitter = profile.curvature_jitter;
        let curvature = profile.curvature_levels[label] + rng.range(-jitter, jitter);
        let (opening, brow_tilt) = if profile.aux_cues {
            let open = if label % 2 == 1 { 0.05 * s } else { 0.0 };
            let tilt = if (label / 2) % 2 == 1 { 0.3 } else { -0.3 };
            (open * rng.range(0.85, 1.15), tilt + rng.range(-0.05, 0.05))
        } else {
            (0.0, rng.range(-0.05, 0.05))
        };
        let cy = 0.5 * s + rng.range(-0.03, 0.03) * s;
        let cx = 0.5 * s + rng.range(-0.03, 0.03) * s;
        let size = rng.range(0.95, 1.05);
        let eyes = [
            (cy - 0.08 * s * size, cx - 0.15 * s * size),
            (cy - 0.08 * s * size, cx + 0.15 * s * size),
        ];
        Self {
            center: (cy, cx),
            radii: (0.42 * s * size, 0.34 * s * size),
            curvature,
            opening,
            brow_tilt,
            mouth_center: (cy + 0.21 * s * size, cx),
            mouth_half_width: 0.16 * s * size,
            mouth_sag: 0.1 * s * size,
            eye_radius: 0.045 * s * size,
            eyes,
            nose: (cy + 0.05 * s * size, cx),
        }
    }

    /// Upper lip height at column `x`; `None` outside the mouth span.
    fn mouth_top(&self, x: f64) -> Option<f64> {
        let u = (x - self.mouth_center.1) / self.mouth_half_width;
        (u.abs() <= 1.0).then_some(self.mouth_center.0 - self.curvature * self.mouth_sag * u * u)
    }

    fn region_at(&self, y: f64, x: f64, stroke: f64) -> Region {
        let (cy, cx) = self.center;
        let (ry, rx) = self.radii;
        let dy = (y - cy) / ry;
        let dx = (x - cx) / rx;
        if dy * dy + dx * dx > 1.0 {
            return Region::Background;
        }
        if let Some(top) = self.mouth_top(x) {
            let u = (x - self.mouth_center.1) / self.mouth_half_width;
            let bottom = top + self.opening * (1.0 - u * u);
            if y >= top - stroke && y <= bottom + stroke {
                return Region::Mouth;
            }
        }
        for &(ey, ex) in &self.eyes {
            if (y - ey).powi(2) + (x - ex).powi(2) <= self.eye_radius.powi(2) {
                return Region::Eye;
            }
        }
        for (side, &(ey, ex)) in self.eyes.iter().enumerate() {
            // brow: a tilted segment above each eye, mirrored per side
            let by = ey - 2.0 * self.eye_radius - stroke;
            let half = 1.7 * self.eye_radius;
            let dir = if side == 0 { 1.0 } else { -1.0 };
            let t = (x - ex) / half;
            if t.abs() <= 1.0 {
                let line_y = by + dir * self.brow_tilt * t * half;
                if (y - line_y).abs() <= stroke {
                    return Region::Brow;
                }
            }
        }
        Region::Skin
    }
}

fn pixel_rgb(region: Region, clutter: Option<[f64; 3]>) -> [f64; 3] {
    match region {
        Region::Background => clutter.unwrap_or([0.35, 0.45, 0.55]),
        Region::Skin => SKIN_RGB,
        Region::Eye => EYE_RGB,
        Region::Brow => BROW_RGB,
        Region::Mouth => MOUTH_RGB,
        Region::Occluder => [0.5, 0.5, 0.5],
    }
}

pub fn class_geometry(label: usize, seed: u64, profile: &DatasetProfile) -> FaceGeometry {
    FaceGeometry::sample(label, profile, &mut Rng::from_seed(seed))
}

/// Renders one scene. Identical `(label, seed, profile)` give identical
/// samples.
pub fn generate_scene(label: usize, seed: u64, profile: &DatasetProfile) -> Result<SceneSample> {
    if label >= profile.num_classes() {
        return contract_err(format!(
            "label {label} out of range for {} classes",
            profile.num_classes()
        ));
    }
    let mut rng = Rng::from_seed(seed);
    let geo = FaceGeometry::sample(label, profile, &mut rng);
    let s = profile.image_size();
    let g = profile.grid;
    let stroke = 0.022 * s as f64;

    let n_clutter = 3 + rng.below(4);
    let clutter: Vec<((f64, f64), f64, [f64; 3])> = (0..n_clutter)
        .map(|_| {
            let c = (rng.range(0.0, s as f64), rng.range(0.0, s as f64));
            let r = rng.range(0.04, 0.1) * s as f64;
            let col = [rng.range(0.1, 0.4), rng.range(0.4, 0.8), rng.range(0.4, 0.9)];
            (c, r, col)
        })
        .collect();

    let mut image = TokenGrid::zeros(3, s, s);
    let mut regions = vec![Region::Background; s * s];
    for py in 0..s {
        for px in 0..s {
            let (y, x) = (py as f64 + 0.5, px as f64 + 0.5);
            let region = geo.region_at(y, x, stroke);
            regions[py * s + px] = region;
            let blob = clutter
                .iter()
                .find(|((cy, cx), r, _)| (y - cy).powi(2) + (x - cx).powi(2) <= r * r)
                .map(|c| c.2);
            let rgb = pixel_rgb(region, blob);
            for (c, v) in rgb.iter().enumerate() {
                let noise = rng.range(-0.03, 0.03);
                image.set(c, py, px, (v + noise).clamp(0.0, 1.0));
            }
        }
    }

    let mut seg = TokenGrid::zeros(NUM_REGIONS, g, g);
    for gy in 0..g {
        for gx in 0..g {
            let mut counts = [0usize; NUM_REGIONS];
            for dy in 0..PIXELS_PER_CELL {
                for dx in 0..PIXELS_PER_CELL {
                    let r = regions[(gy * PIXELS_PER_CELL + dy) * s + gx * PIXELS_PER_CELL + dx];
                    counts[r as usize] += 1;
                }
            }
            let part = [Region::Mouth, Region::Eye, Region::Brow]
                .into_iter()
                .find(|r| counts[*r as usize] >= 3);
            let region = part.unwrap_or(if counts[Region::Skin as usize] >= counts[Region::Background as usize] {
                Region::Skin
            } else {
                Region::Background
            });
            seg.set(region as usize, gy, gx, 1.0);
        }
    }

    let scale = 1.0 / PIXELS_PER_CELL as f64;
    let corner_y = geo.mouth_center.0 - geo.curvature * geo.mouth_sag;
    let points = [
        geo.eyes[0],
        geo.eyes[1],
        geo.nose,
        (corner_y, geo.mouth_center.1 - geo.mouth_half_width),
        (corner_y, geo.mouth_center.1 + geo.mouth_half_width),
    ];
    let limit = g as f64 - 1e-9;
    let landmarks = points
        .iter()
        .map(|&(y, x)| ((y * scale).clamp(0.0, limit), (x * scale).clamp(0.0, limit)))
        .collect();

    Ok(SceneSample {
        image,
        seg,
        landmarks,
        label,
        occlusion_ratio: 0.0,
        occluded_cells: 0,
        seed,
    })
}

/// Rectangle on the token lattice, `(top, left, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OcclusionRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Picks rectangle extents whose area is as close as possible to
/// `target` with aspect (width / height) in `[1/3, 3]`, preferring the
/// aspect nearest to `aspect`.
pub fn rect_extents(target: usize, grid: usize, aspect: f64) -> (usize, usize) {
    let mut best = (1, 1);
    let mut best_key = (usize::MAX, f64::INFINITY);
    for h in 1..=grid {
        for w in 1..=grid {
            let ratio = w as f64 / h as f64;
            if !(1.0 / 3.0 - 1e-12..=3.0 + 1e-12).contains(&ratio) {
                continue;
            }
            let key = ((h * w).abs_diff(target), (ratio.ln() - aspect.ln()).abs());
            if key.0 < best_key.0 || (key.0 == best_key.0 && key.1 < best_key.1) {
                best = (h, w);
                best_key = key;
            }
        }
    }
    best
}

/// Draws the occlusion rectangle for `(ratio, seed)` on a `grid` lattice.
pub fn draw_occlusion(ratio: f64, grid: usize, seed: u64) -> Result<Option<OcclusionRect>> {
    if !(0.0..1.0).contains(&ratio) {
        return contract_err(format!("occlusion ratio {ratio} outside [0, 1)"));
    }
    let target = (ratio * (grid * grid) as f64).round() as usize;
    if target == 0 {
        return Ok(None);
    }
    let mut rng = Rng::from_seed(seed);
    let aspect = (rng.range((1.0f64 / 3.0).ln(), 3f64.ln())).exp();
    let (height, width) = rect_extents(target, grid, aspect);
    let top = rng.below(grid - height + 1);
    let left = rng.below(grid - width + 1);
    Ok(Some(OcclusionRect { top, left, height, width }))
}

/// Covers one rectangle with a flat occluder.
pub fn apply_occlusion(s: &SceneSample, ratio: f64, seed: u64) -> Result<SceneSample> {
    let g = s.seg.height();
    let Some(rect) = draw_occlusion(ratio, g, seed)? else {
        return Ok(s.clone());
    };
    let mut rng = Rng::from_seed(derive_seed(seed, 1));
    let color = [rng.range(0.2, 0.9), rng.range(0.2, 0.9), rng.range(0.2, 0.9)];
    let mut out = s.clone();
    for gy in rect.top..rect.top + rect.height {
        for gx in rect.left..rect.left + rect.width {
            for c in 0..NUM_REGIONS {
                out.seg.set(c, gy, gx, 0.0);
            }
            out.seg.set(Region::Occluder as usize, gy, gx, 1.0);
            for dy in 0..PIXELS_PER_CELL {
                for dx in 0..PIXELS_PER_CELL {
                    for (c, &v) in color.iter().enumerate() {
                        out.image
                            .set(c, gy * PIXELS_PER_CELL + dy, gx * PIXELS_PER_CELL + dx, v);
                    }
                }
            }
        }
    }
    let occluded = (0..g * g)
        .filter(|&t| out.seg.channel(Region::Occluder as usize)[t] == 1.0)
        .count();
    out.occluded_cells = occluded;
    out.occlusion_ratio = occluded as f64 / (g * g) as f64;
    Ok(out)
}

/// Seed used for the occlusion of a sample with the given seed.
pub fn occlusion_seed(sample_seed: u64) -> u64 {
    derive_seed(sample_seed, 0x4f43_434c)
}

/// Label and seed of entry `index` of a split, without generating the
/// others.
pub fn dataset_entry(profile: &DatasetProfile, split: Split, index: usize) -> (usize, u64) {
    let labels = split_labels(profile, split);
    (labels[index], derive_seed(profile.seed ^ split.tag(), index as u64))
}

fn split_labels(profile: &DatasetProfile, split: Split) -> Vec<usize> {
    let mut labels: Vec<usize> = profile
        .counts(split)
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    Rng::stream(profile.seed, split.tag()).shuffle(&mut labels);
    labels
}

pub fn build_split(profile: &DatasetProfile, split: Split, occlusion: Option<f64>) -> Result<Vec<SceneSample>> {
    profile.validate()?;
    let labels = split_labels(profile, split);
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let seed = derive_seed(profile.seed ^ split.tag(), i as u64);
            let s = generate_scene(label, seed, profile)?;
            match occlusion {
                Some(r) => apply_occlusion(&s, r, occlusion_seed(seed)),
                None => Ok(s),
            }
        })
        .collect()
}

/// Training split.
pub fn build_dataset(profile: &DatasetProfile, occlusion: Option<f64>) -> Result<Vec<SceneSample>> {
    build_split(profile, Split::Train, occlusion)
}

/// One Gaussian bump per point: `exp(-d^2 / (2 sigma^2))` evaluated at
/// pixel centers.
pub fn render_landmark_heatmaps(points: &[(f64, f64)], height: usize, width: usize, sigma: f64) -> Result<TokenGrid> {
    if !(sigma > 0.0) {
        return contract_err("sigma must be positive");
    }
    for &(y, x) in points {
        if !(0.0..height as f64).contains(&y) || !(0.0..width as f64).contains(&x) {
            return contract_err(format!("landmark ({y}, {x}) outside {height}x{width} grid"));
        }
    }
    let mut out = TokenGrid::zeros(points.len(), height, width);
    let denom = 2.0 * sigma * sigma;
    for (k, &(py, px)) in points.iter().enumerate() {
        for y in 0..height {
            for x in 0..width {
                let d2 = (y as f64 + 0.5 - py).powi(2) + (x as f64 + 0.5 - px).powi(2);
                out.set(k, y, x, (-d2 / denom).exp());
            }
        }
    }
    Ok(out)
}
