//! Procedural glyph generator: a self-contained stand-in for the usual
//! handwritten-character datasets, so the diagnostics can be exercised
//! without downloads.
//!
//! Each class has a fixed stroke pattern on a normalized canvas. A sample is
//! rendered by jittering, rotating, and rescaling the strokes, drawing them
//! with a soft-edged pen, adding class-independent distractor strokes, and
//! finally pixel noise. All variation comes from a seeded stream, so a
//! (params, seed) pair is a complete description of the dataset and its
//! difficulty is stable across runs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

use super::LabeledDataset;

type Seg = ((f32, f32), (f32, f32));

/// Stroke patterns, one per class, in unit coordinates.
const CLASS_STROKES: [&[Seg]; 10] = [
    // 0: box outline
    &[
        ((0.25, 0.25), (0.75, 0.25)),
        ((0.75, 0.25), (0.75, 0.75)),
        ((0.75, 0.75), (0.25, 0.75)),
        ((0.25, 0.75), (0.25, 0.25)),
    ],
    // 1: vertical bar
    &[((0.5, 0.2), (0.5, 0.8))],
    // 2: zed
    &[
        ((0.28, 0.25), (0.72, 0.25)),
        ((0.72, 0.25), (0.28, 0.75)),
        ((0.28, 0.75), (0.72, 0.75)),
    ],
    // 3: three horizontal bars
    &[
        ((0.28, 0.25), (0.72, 0.25)),
        ((0.28, 0.5), (0.72, 0.5)),
        ((0.28, 0.75), (0.72, 0.75)),
    ],
    // 4: diagonal cross
    &[((0.25, 0.25), (0.75, 0.75)), ((0.75, 0.25), (0.25, 0.75))],
    // 5: tee
    &[((0.25, 0.25), (0.75, 0.25)), ((0.5, 0.25), (0.5, 0.78))],
    // 6: ell
    &[((0.3, 0.22), (0.3, 0.75)), ((0.3, 0.75), (0.75, 0.75))],
    // 7: single diagonal
    &[((0.3, 0.75), (0.7, 0.25))],
    // 8: upright cross
    &[((0.5, 0.22), (0.5, 0.78)), ((0.22, 0.5), (0.78, 0.5))],
    // 9: vee
    &[((0.3, 0.25), (0.5, 0.75)), ((0.5, 0.75), (0.7, 0.25))],
];

/// Knobs controlling glyph difficulty. Angles in degrees, lengths as
/// fractions of the canvas.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlyphParams {
    pub stroke_width: f32,
    pub rotation_deg: f32,
    pub jitter: f32,
    pub scale_jitter: f32,
    pub noise_sigma: f32,
    pub distractors: usize,
    pub distractor_len: f32,
}

impl Default for GlyphParams {
    fn default() -> Self {
        GlyphParams {
            stroke_width: 0.09,
            rotation_deg: 25.0,
            jitter: 0.10,
            scale_jitter: 0.15,
            noise_sigma: 0.18,
            distractors: 2,
            distractor_len: 0.25,
        }
    }
}

impl GlyphParams {
    /// A substantially harder rendering of the same classes: heavy noise,
    /// wide rotations, more clutter.
    pub fn noisy() -> Self {
        GlyphParams {
            stroke_width: 0.07,
            rotation_deg: 45.0,
            jitter: 0.16,
            scale_jitter: 0.25,
            noise_sigma: 0.35,
            distractors: 4,
            distractor_len: 0.3,
        }
    }
}

/// Generates `classes * per_class` samples with labels interleaved
/// (`label(i) = i mod classes`), using default difficulty.
pub fn gen_glyphs(
    classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    gen_glyphs_with(&GlyphParams::default(), classes, per_class, height, width, seed)
}

pub fn gen_glyphs_with(
    params: &GlyphParams,
    classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 || classes > CLASS_STROKES.len() {
        return Err(Error::InvalidArgument(format!(
            "gen_glyphs supports 2..={} classes, asked for {classes}",
            CLASS_STROKES.len()
        )));
    }
    if per_class == 0 || height < 8 || width < 8 {
        return Err(Error::InvalidArgument(
            "gen_glyphs: need per_class >= 1 and at least 8x8 pixels".into(),
        ));
    }
    let n = classes * per_class;
    let mut rng = rng_from(seed, "glyphs", 0);
    let noise = Normal::new(0.0f32, params.noise_sigma.max(1e-6)).expect("noise sigma");
    let mut data = Vec::with_capacity(n * height * width);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % classes) as u32;
        render_glyph(
            params,
            CLASS_STROKES[label as usize],
            height,
            width,
            &mut rng,
            &noise,
            &mut data,
        );
        labels.push(label);
    }
    let images = Tensor::from_vec(vec![n, 1, height, width], data)?;
    let ds = LabeledDataset {
        images,
        labels,
        classes,
        spurious: None,
        provenance: format!("glyphs(classes={classes},per_class={per_class},seed={seed})"),
        domino_top_rows: None,
    };
    ds.validate()?;
    Ok(ds)
}

fn render_glyph(
    params: &GlyphParams,
    strokes: &[Seg],
    height: usize,
    width: usize,
    rng: &mut impl Rng,
    noise: &Normal<f32>,
    out: &mut Vec<f32>,
) {
    let theta = rng.gen_range(-params.rotation_deg..=params.rotation_deg).to_radians();
    let (sin, cos) = theta.sin_cos();
    let dx = rng.gen_range(-params.jitter..=params.jitter);
    let dy = rng.gen_range(-params.jitter..=params.jitter);
    let scale = 1.0 + rng.gen_range(-params.scale_jitter..=params.scale_jitter);
    let ink = rng.gen_range(0.75..=1.0f32);

    let place = |(x, y): (f32, f32)| -> (f32, f32) {
        let (cx, cy) = (x - 0.5, y - 0.5);
        let rx = cx * cos - cy * sin;
        let ry = cx * sin + cy * cos;
        (rx * scale + 0.5 + dx, ry * scale + 0.5 + dy)
    };

    let mut segs: Vec<(Seg, f32)> = strokes
        .iter()
        .map(|&(a, b)| (((place(a)), (place(b))), ink))
        .collect();
    for _ in 0..params.distractors {
        let x0 = rng.gen_range(0.1..0.9f32);
        let y0 = rng.gen_range(0.1..0.9f32);
        let ang = rng.gen_range(0.0..std::f32::consts::TAU);
        let len = params.distractor_len * rng.gen_range(0.5..=1.0);
        let x1 = (x0 + ang.cos() * len).clamp(0.0, 1.0);
        let y1 = (y0 + ang.sin() * len).clamp(0.0, 1.0);
        segs.push((((x0, y0), (x1, y1)), rng.gen_range(0.4..=0.9)));
    }

    let w = params.stroke_width;
    for r in 0..height {
        let py = (r as f32 + 0.5) / height as f32;
        for c in 0..width {
            let px = (c as f32 + 0.5) / width as f32;
            let mut v = 0.0f32;
            for &(((x0, y0), (x1, y1)), intensity) in &segs {
                let d = dist_to_segment(px, py, x0, y0, x1, y1);
                let pen = (1.25 * (1.0 - d / w)).clamp(0.0, 1.0);
                v = v.max(pen * intensity);
            }
            v += noise.sample(rng);
            out.push(v.clamp(0.0, 1.0));
        }
    }
}

fn dist_to_segment(px: f32, py: f32, x0: f32, y0: f32, x1: f32, y1: f32) -> f32 {
    let (vx, vy) = (x1 - x0, y1 - y0);
    let (wx, wy) = (px - x0, py - y0);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (wx - t * vx, wy - t * vy);
    (ex * ex + ey * ey).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_per_class() {
        let ds = gen_glyphs(2, 100, 16, 16, 5).unwrap();
        assert_eq!(ds.len(), 200);
        assert_eq!(ds.class_counts(), vec![100, 100]);
    }

    #[test]
    fn same_seed_identical_dataset() {
        let a = gen_glyphs(3, 10, 16, 16, 11).unwrap();
        let b = gen_glyphs(3, 10, 16, 16, 11).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        let c = gen_glyphs(3, 10, 16, 16, 12).unwrap();
        assert_ne!(a.images.data(), c.images.data());
    }

    #[test]
    fn pixels_in_unit_range() {
        let ds = gen_glyphs_with(&GlyphParams::noisy(), 4, 20, 16, 16, 3).unwrap();
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn class_count_limit() {
        assert!(gen_glyphs(11, 1, 16, 16, 0).is_err());
    }
}
