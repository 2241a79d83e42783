//! Procedural fundus generator with ground truth.
//!
//! A case is a circular retina on a black margin with an optic disc, a
//! recursively branching vessel tree and optional pathology analogs:
//! bright exudate-like blobs (Diabetes), an enlarged optic cup (Glaucoma) and
//! a global lens blur (Cataract). The seed fully determines the output.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CaseRecord, Disease, Eye, ImageSource, LabelVector, Provenance, Split};
use crate::preprocess::{gaussian_blur, Image};

/// Cup-to-disc ratio at or above which a case is labelled Glaucoma.
pub const GLAUCOMA_CUP_RATIO: f64 = 0.6;

/// Classes the generator can render; the remaining slots only come from
/// real manifests.
pub const SYNTH_CLASSES: [Disease; 4] = [
    Disease::Normal,
    Disease::Diabetes,
    Disease::Glaucoma,
    Disease::Cataract,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub size: usize,
    pub branch_depth: u32,
    pub branch_prob: f64,
    /// Trunk vessel width in pixels; children narrow geometrically.
    pub vessel_width: f64,
    /// Lens blur sigma in pixels; 0 disables the cataract analog.
    pub blur_sigma: f64,
    pub lesion_count: usize,
    pub disc_cup_ratio: f64,
    pub background_luminance: f64,
}

impl SynthSpec {
    /// A healthy eye with seed-jittered anatomy.
    pub fn normal(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_f00d);
        Self {
            seed,
            size,
            branch_depth: 4,
            branch_prob: 0.7,
            vessel_width: (size as f64 / 28.0).max(2.0),
            blur_sigma: 0.0,
            lesion_count: 0,
            disc_cup_ratio: rng.random_range(0.2..0.4),
            background_luminance: rng.random_range(0.85..1.0),
        }
    }

    /// A case showing exactly the analog of `class`.
    pub fn for_class(class: Disease, seed: u64, size: usize) -> Self {
        let mut s = Self::normal(seed, size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a5_5e5);
        match class {
            Disease::Diabetes => s.lesion_count = rng.random_range(4..=8),
            Disease::Glaucoma => s.disc_cup_ratio = rng.random_range(0.7..0.85),
            Disease::Cataract => s.blur_sigma = size as f64 * rng.random_range(0.025..0.04),
            _ => {}
        }
        s
    }

    /// Labels implied by the injected features.
    pub fn labels(&self) -> LabelVector {
        let mut ds = Vec::new();
        if self.lesion_count > 0 {
            ds.push(Disease::Diabetes);
        }
        if self.disc_cup_ratio >= GLAUCOMA_CUP_RATIO {
            ds.push(Disease::Glaucoma);
        }
        if self.blur_sigma > 0.0 {
            ds.push(Disease::Cataract);
        }
        if ds.is_empty() {
            LabelVector::normal()
        } else {
            LabelVector::from_diseases(&ds).expect("non-normal set")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Circle {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).powi(2) + (y - self.cy).powi(2) <= self.r * self.r
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub spec: SynthSpec,
    pub image: Image,
    /// Single-channel, values exactly 0 or 1.
    pub vessel_mask: Image,
    pub labels: LabelVector,
    pub retina: Circle,
    pub optic_disc: Circle,
    pub lesions: Vec<Circle>,
    /// Retina without vessels, lesions or blur.
    pub background: Image,
    /// Final image before the lens blur.
    pub pre_blur: Image,
}

impl SyntheticCase {
    /// Fraction of retina pixels covered by the vessel mask.
    pub fn vessel_fraction(&self) -> f64 {
        let (mut inside, mut vessel) = (0usize, 0usize);
        let n = self.spec.size;
        for y in 0..n {
            for x in 0..n {
                if self.retina.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    inside += 1;
                    vessel += (self.vessel_mask.get(y, x, 0) > 0.5) as usize;
                }
            }
        }
        vessel as f64 / inside.max(1) as f64
    }

    pub fn to_record(&self, case_id: impl Into<String>) -> CaseRecord {
        CaseRecord {
            case_id: case_id.into(),
            eye: if self.optic_disc.cx < self.retina.cx {
                Eye::Left
            } else {
                Eye::Right
            },
            image: ImageSource::Inline(Arc::new(self.image.clone())),
            vessel_mask: Some(ImageSource::Inline(Arc::new(self.vessel_mask.clone()))),
            labels: self.labels,
            split: Split::Unassigned,
            provenance: Provenance::Synthetic {
                seed: self.spec.seed,
            },
            duplicate_of: None,
        }
    }
}

struct Segment {
    ax: f64,
    ay: f64,
    bx: f64,
    by: f64,
    half_width: f64,
}

impl Segment {
    fn distance(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (self.bx - self.ax, self.by - self.ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((x - self.ax) * dx + (y - self.ay) * dy) / len2).clamp(0.0, 1.0)
        };
        ((x - self.ax - t * dx).powi(2) + (y - self.ay - t * dy).powi(2)).sqrt()
    }
}

#[allow(clippy::too_many_arguments)]
fn grow(
    x: f64,
    y: f64,
    angle: f64,
    width: f64,
    length: f64,
    depth: u32,
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Segment>,
) {
    let bend = Normal::new(0.0, 0.18).unwrap();
    let angle = angle + bend.sample(rng);
    let (bx, by) = (x + length * angle.cos(), y + length * angle.sin());
    out.push(Segment {
        ax: x,
        ay: y,
        bx,
        by,
        half_width: width / 2.0,
    });
    if depth == 0 {
        return;
    }
    let min_w = 1.2;
    if rng.random::<f64>() < spec.branch_prob {
        let spread = rng.random_range(0.35..0.65);
        let main_side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        grow(
            bx,
            by,
            angle + main_side * spread * 0.4,
            (width * 0.9).max(min_w),
            length * 0.9,
            depth - 1,
            spec,
            rng,
            out,
        );
        grow(
            bx,
            by,
            angle - main_side * spread,
            (width * 0.7).max(min_w),
            length * 0.75,
            depth - 1,
            spec,
            rng,
            out,
        );
    } else {
        grow(
            bx,
            by,
            angle,
            (width * 0.95).max(min_w),
            length * 0.9,
            depth - 1,
            spec,
            rng,
            out,
        );
    }
}

const FUNDUS_RGB: [f64; 3] = [0.78, 0.36, 0.17];
const DISC_RGB: [f64; 3] = [0.95, 0.78, 0.52];
const CUP_RGB: [f64; 3] = [1.0, 0.95, 0.82];
const LESION_RGB: [f64; 3] = [1.0, 0.93, 0.5];
/// Vessel pixels keep this fraction of the background intensity.
const VESSEL_DARKEN: f64 = 0.5;

/// Renders the case described by `spec`.
pub fn generate_synthetic_case(spec: &SynthSpec) -> SyntheticCase {
    let n = spec.size;
    let s = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let retina = Circle {
        cx: s / 2.0 + rng.random_range(-0.02..0.02) * s,
        cy: s / 2.0 + rng.random_range(-0.02..0.02) * s,
        r: s * rng.random_range(0.42..0.46),
    };
    let side = if rng.random::<bool>() { -1.0 } else { 1.0 };
    let optic_disc = Circle {
        cx: retina.cx + side * retina.r * rng.random_range(0.3..0.4),
        cy: retina.cy + retina.r * rng.random_range(-0.08..0.08),
        r: retina.r * rng.random_range(0.16..0.19),
    };
    let cup = Circle {
        r: optic_disc.r * spec.disc_cup_ratio,
        ..optic_disc
    };

    // background: vignetted fundus colour, optic disc and cup
    let lum = spec.background_luminance;
    let background = Image::from_fn(n, n, 3, |y, x, c| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        if !retina.contains(px, py) {
            return 0.0;
        }
        if cup.contains(px, py) {
            return CUP_RGB[c] * lum;
        }
        if optic_disc.contains(px, py) {
            return DISC_RGB[c] * lum;
        }
        let rr = ((px - retina.cx).powi(2) + (py - retina.cy).powi(2)) / (retina.r * retina.r);
        FUNDUS_RGB[c] * lum * (1.0 - 0.35 * rr)
    });

    // vessel tree: two arcades towards the macula, two nasal trunks
    let mut segments = Vec::new();
    let toward = if side < 0.0 { 0.0 } else { PI };
    let trunk = retina.r * 0.32;
    for a in [
        toward - 1.0,
        toward + 1.0,
        toward + PI - 0.7,
        toward + PI + 0.7,
    ] {
        grow(
            optic_disc.cx,
            optic_disc.cy,
            a,
            spec.vessel_width,
            trunk,
            spec.branch_depth,
            spec,
            &mut rng,
            &mut segments,
        );
    }
    let mut mask = vec![0.0; n * n];
    for seg in &segments {
        let pad = seg.half_width + 1.0;
        let x0 = (seg.ax.min(seg.bx) - pad).floor().max(0.0) as usize;
        let x1 = ((seg.ax.max(seg.bx) + pad).ceil() as usize).min(n);
        let y0 = (seg.ay.min(seg.by) - pad).floor().max(0.0) as usize;
        let y1 = ((seg.ay.max(seg.by) + pad).ceil() as usize).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = Circle {
                    r: retina.r - 1.5,
                    ..retina
                };
                if inside.contains(px, py) && seg.distance(px, py) <= seg.half_width {
                    mask[y * n + x] = 1.0;
                }
            }
        }
    }

    // lesions: bright blobs on the retina, outside the optic disc
    let mut lesions = Vec::with_capacity(spec.lesion_count);
    let lesion_r = (s * 0.028).max(1.5);
    while lesions.len() < spec.lesion_count {
        let ang = rng.random_range(0.0..2.0 * PI);
        let rad = retina.r * rng.random::<f64>().sqrt() * 0.8;
        let c = Circle {
            cx: retina.cx + rad * ang.cos(),
            cy: retina.cy + rad * ang.sin(),
            r: lesion_r * rng.random_range(0.8..1.3),
        };
        let clear = (c.cx - optic_disc.cx).hypot(c.cy - optic_disc.cy) > optic_disc.r + c.r + 1.0;
        if clear {
            lesions.push(c);
        }
    }

    let noise = Normal::new(0.0, 0.006).unwrap();
    let mut px = background.pixels().to_vec();
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            if !retina.contains(fx, fy) {
                continue;
            }
            let vessel = mask[y * n + x] > 0.5;
            let lesion = !vessel && lesions.iter().any(|l| l.contains(fx, fy));
            for c in 0..3 {
                let i = (y * n + x) * 3 + c;
                let bg = px[i];
                let v = if vessel {
                    bg * VESSEL_DARKEN
                } else if lesion {
                    LESION_RGB[c] * lum
                } else {
                    bg
                };
                px[i] = (v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    let pre_blur = Image::from_raw(n, n, 3, px).expect("clamped");
    let image = if spec.blur_sigma > 0.0 {
        gaussian_blur(&pre_blur, spec.blur_sigma)
    } else {
        pre_blur.clone()
    };

    SyntheticCase {
        spec: spec.clone(),
        image,
        vessel_mask: Image::from_raw(n, n, 1, mask).expect("binary"),
        labels: spec.labels(),
        retina,
        optic_disc,
        lesions,
        background,
        pre_blur,
    }
}

/// Balanced single-label set: `per_class` cases for each class in `classes`,
/// ids `syn-<seed>-<k>`, seeds derived from `base_seed`.
pub fn balanced_cases(
    classes: &[Disease],
    per_class: usize,
    base_seed: u64,
    size: usize,
) -> Vec<SyntheticCase> {
    let mut out = Vec::with_capacity(classes.len() * per_class);
    for k in 0..per_class {
        for (j, &c) in classes.iter().enumerate() {
            let seed = base_seed
                .wrapping_mul(1_000_003)
                .wrapping_add((k * classes.len() + j) as u64);
            out.push(generate_synthetic_case(&SynthSpec::for_class(
                c, seed, size,
            )));
        }
    }
    out
}
