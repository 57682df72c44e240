//! Spurious-feature injection, the do(s) intervention, and domino
//! compositions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

use super::{LabeledDataset, SpuriousRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpuriousKind {
    /// Class-indexed patch location; content identical across classes when
    /// `content_shared` is set, so the signal is location-only.
    Patch,
    /// Fixed-location corner token whose content encodes the attribute, the
    /// shape of source/site tags in multi-source data.
    SourceToken,
    /// Assigned by domino composition; the attribute is the top image label.
    DominoTop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpuriousSpec {
    pub kind: SpuriousKind,
    /// Patch side length in pixels.
    pub patch: usize,
    /// Top-left `(row, col)` per class. One entry per class for `Patch`.
    pub locations: Vec<(usize, usize)>,
    pub intensity: f32,
    /// Identical (plain white) patch content across classes. When false, each
    /// attribute stamps its own texture, so content itself carries signal.
    pub content_shared: bool,
}

impl SpuriousSpec {
    /// White patch with one auto-placed, non-overlapping location per class,
    /// starting at the top-left corner.
    pub fn patch_grid(classes: usize, patch: usize, height: usize, width: usize) -> Result<Self> {
        let mut locations = Vec::with_capacity(classes);
        let step = patch + 1;
        'outer: for r in (0..height.saturating_sub(patch - 1)).step_by(step) {
            for c in (0..width.saturating_sub(patch - 1)).step_by(step) {
                locations.push((r, c));
                if locations.len() == classes {
                    break 'outer;
                }
            }
        }
        if locations.len() < classes {
            return Err(Error::InvalidArgument(format!(
                "cannot place {classes} non-overlapping {patch}x{patch} patches on {height}x{width}"
            )));
        }
        Ok(SpuriousSpec {
            kind: SpuriousKind::Patch,
            patch,
            locations,
            intensity: 1.0,
            content_shared: true,
        })
    }

    fn validate(&self, classes: usize, height: usize, width: usize) -> Result<()> {
        if self.patch == 0 || self.patch > height.min(width) {
            return Err(Error::InvalidArgument(format!(
                "patch {} does not fit {height}x{width}",
                self.patch
            )));
        }
        match self.kind {
            SpuriousKind::Patch => {
                if self.locations.len() != classes {
                    return Err(Error::InvalidArgument(format!(
                        "need one patch location per class ({classes}), found {}",
                        self.locations.len()
                    )));
                }
            }
            SpuriousKind::SourceToken => {
                if self.locations.is_empty() {
                    return Err(Error::InvalidArgument(
                        "source-token needs its fixed location".into(),
                    ));
                }
            }
            SpuriousKind::DominoTop => {
                return Err(Error::InvalidArgument(
                    "domino-top attributes come from compose_dominoes, not inject_patch".into(),
                ));
            }
        }
        for &(r, c) in &self.locations {
            if r + self.patch > height || c + self.patch > width {
                return Err(Error::InvalidArgument(format!(
                    "patch at ({r},{c}) exceeds {height}x{width}"
                )));
            }
        }
        // overlapping class locations would destroy identifiability
        if self.kind == SpuriousKind::Patch {
            for i in 0..self.locations.len() {
                for j in (i + 1)..self.locations.len() {
                    let (r0, c0) = self.locations[i];
                    let (r1, c1) = self.locations[j];
                    let disjoint = r0 + self.patch <= r1
                        || r1 + self.patch <= r0
                        || c0 + self.patch <= c1
                        || c1 + self.patch <= c0;
                    if !disjoint {
                        return Err(Error::InvalidArgument(format!(
                            "patch locations for classes {i} and {j} overlap"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Stamps the patch for attribute `attr` onto one image.
    fn stamp(&self, image: &mut [f32], channels: usize, height: usize, width: usize, attr: u32) {
        let (r0, c0) = match self.kind {
            SpuriousKind::Patch => self.locations[attr as usize],
            _ => self.locations[0],
        };
        for ch in 0..channels {
            for pr in 0..self.patch {
                for pc in 0..self.patch {
                    let v = if self.content_shared {
                        self.intensity
                    } else {
                        // attribute-coded texture: stripes with an
                        // attribute-dependent period and phase
                        let period = 2 + (attr as usize % 3);
                        if (pr + pc * (1 + attr as usize % 2)) % period == 0 {
                            self.intensity
                        } else {
                            0.15
                        }
                    };
                    image[(ch * height + r0 + pr) * width + c0 + pc] = v;
                }
            }
        }
    }
}

/// Draws the spurious attribute per sample (`P(s = label) = rho_corr`,
/// otherwise uniform over the other classes) and stamps the patch. The
/// pristine images are retained in the record so the correlation can later
/// be broken by intervention.
pub fn inject_patch(
    ds: &LabeledDataset,
    spec: &SpuriousSpec,
    rho_corr: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let dims = ds.images.dims().to_vec();
    let (channels, height, width) = (dims[1], dims[2], dims[3]);
    spec.validate(ds.classes, height, width)?;
    if !(0.5..=1.0).contains(&rho_corr) {
        return Err(Error::InvalidArgument(format!(
            "rho_corr must lie in [0.5, 1], found {rho_corr}"
        )));
    }
    let mut rng = rng_from(seed, "inject-patch", 0);
    let mut images = ds.images.clone();
    let per_image = channels * height * width;
    let mut attrs = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let label = ds.labels[i];
        let attr = if spec.kind == SpuriousKind::SourceToken || rng.gen::<f64>() < rho_corr {
            label
        } else {
            // uniformly random other class's location
            let mut a = rng.gen_range(0..ds.classes as u32 - 1);
            if a >= label {
                a += 1;
            }
            a
        };
        let image = &mut images.data_mut()[i * per_image..(i + 1) * per_image];
        spec.stamp(image, channels, height, width, attr);
        attrs.push(attr);
    }
    let out = LabeledDataset {
        images,
        labels: ds.labels.clone(),
        classes: ds.classes,
        spurious: Some(SpuriousRecord {
            attrs,
            spec: Some(spec.clone()),
            base_images: Some(ds.images.clone()),
        }),
        provenance: format!("{}+patch(rho={rho_corr})", ds.provenance),
        domino_top_rows: ds.domino_top_rows,
    };
    out.validate()?;
    Ok(out)
}

/// The do(s) intervention: re-samples the spurious attribute uniformly over
/// all class locations, independent of the label, and re-stamps from the
/// pristine images.
pub fn intervene_randomize_spurious(ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let rec = ds
        .spurious
        .as_ref()
        .ok_or_else(|| Error::Dataset("intervention needs a recorded spurious attribute".into()))?;
    let spec = rec.spec.as_ref().ok_or_else(|| {
        Error::Dataset("intervention needs the injection spec (patch datasets only)".into())
    })?;
    let base = rec.base_images.as_ref().ok_or_else(|| {
        Error::Dataset("intervention needs the pristine images from injection".into())
    })?;
    let dims = ds.images.dims().to_vec();
    let (channels, height, width) = (dims[1], dims[2], dims[3]);
    let mut rng = rng_from(seed, "intervene", 0);
    let mut images = base.clone();
    let per_image = channels * height * width;
    let choices = match spec.kind {
        SpuriousKind::Patch => spec.locations.len() as u32,
        _ => ds.classes as u32,
    };
    let mut attrs = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let attr = rng.gen_range(0..choices);
        let image = &mut images.data_mut()[i * per_image..(i + 1) * per_image];
        spec.stamp(image, channels, height, width, attr);
        attrs.push(attr);
    }
    let out = LabeledDataset {
        images,
        labels: ds.labels.clone(),
        classes: ds.classes,
        spurious: Some(SpuriousRecord {
            attrs,
            spec: Some(spec.clone()),
            base_images: Some(base.clone()),
        }),
        provenance: format!("{}+do(s)", ds.provenance),
        domino_top_rows: ds.domino_top_rows,
    };
    out.validate()?;
    Ok(out)
}

/// Vertically concatenates a top (spurious) and bottom (core) dataset. The
/// composite label is the bottom label; with probability `rho_corr` the top
/// image is drawn from the matching class, otherwise from the other one.
pub fn compose_dominoes(
    top: &LabeledDataset,
    bottom: &LabeledDataset,
    rho_corr: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let td = top.images.dims().to_vec();
    let bd = bottom.images.dims().to_vec();
    if td[3] != bd[3] {
        return Err(Error::ShapeMismatch {
            op: "compose_dominoes",
            lhs: td,
            rhs: bd,
        });
    }
    if td[1] != bd[1] {
        return Err(Error::ShapeMismatch {
            op: "compose_dominoes channels",
            lhs: td,
            rhs: bd,
        });
    }
    if top.classes != 2 || bottom.classes != 2 {
        return Err(Error::Dataset(
            "compose_dominoes expects binary-labeled halves".into(),
        ));
    }
    if !(0.5..=1.0).contains(&rho_corr) {
        return Err(Error::InvalidArgument(format!(
            "rho_corr must lie in [0.5, 1], found {rho_corr}"
        )));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in top.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    if by_class[0].is_empty() || by_class[1].is_empty() {
        return Err(Error::Dataset("top dataset is missing a class".into()));
    }

    let (channels, top_rows, width) = (td[1], td[2], td[3]);
    let bottom_rows = bd[2];
    let n = bottom.len();
    let out_rows = top_rows + bottom_rows;
    let mut rng = rng_from(seed, "dominoes", 0);
    let mut data = Vec::with_capacity(n * channels * out_rows * width);
    let mut attrs = Vec::with_capacity(n);
    for i in 0..n {
        let label = bottom.labels[i];
        let top_label = if rng.gen::<f64>() < rho_corr {
            label
        } else {
            1 - label
        };
        let pool = &by_class[top_label as usize];
        let t_idx = pool[rng.gen_range(0..pool.len())];
        attrs.push(top_label);
        for ch in 0..channels {
            let t_base = ((t_idx * channels + ch) * top_rows) * width;
            data.extend_from_slice(&top.images.data()[t_base..t_base + top_rows * width]);
            let b_base = ((i * channels + ch) * bottom_rows) * width;
            data.extend_from_slice(&bottom.images.data()[b_base..b_base + bottom_rows * width]);
        }
    }
    let images = Tensor::from_vec(vec![n, channels, out_rows, width], data)?;
    let out = LabeledDataset {
        images,
        labels: bottom.labels.clone(),
        classes: 2,
        spurious: Some(SpuriousRecord {
            attrs,
            spec: None,
            base_images: None,
        }),
        provenance: format!(
            "domino(top={},bottom={},rho={rho_corr})",
            top.provenance, bottom.provenance
        ),
        domino_top_rows: Some(top_rows),
    };
    out.validate()?;
    Ok(out)
}

/// Blanks the spurious (top) half of a domino dataset with zeroes.
pub fn mask_core_only(ds: &LabeledDataset) -> Result<LabeledDataset> {
    let top_rows = ds
        .domino_top_rows
        .ok_or_else(|| Error::Dataset("mask_core_only needs a domino dataset".into()))?;
    let dims = ds.images.dims().to_vec();
    let (n, channels, height, width) = (dims[0], dims[1], dims[2], dims[3]);
    let mut images = ds.images.clone();
    {
        let data = images.data_mut();
        for i in 0..n {
            for ch in 0..channels {
                let base = ((i * channels + ch) * height) * width;
                data[base..base + top_rows * width].fill(0.0);
            }
        }
    }
    let mut out = ds.clone();
    out.images = images;
    if !out.provenance.ends_with("+core-only") {
        out.provenance.push_str("+core-only");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_glyphs;

    fn base(classes: usize, n_per: usize) -> LabeledDataset {
        gen_glyphs(classes, n_per, 16, 16, 77).unwrap()
    }

    #[test]
    fn perfect_correlation_stamps_own_location() {
        let ds = base(2, 50);
        let spec = SpuriousSpec::patch_grid(2, 5, 16, 16).unwrap();
        let out = inject_patch(&ds, &spec, 1.0, 1).unwrap();
        let rec = out.spurious.as_ref().unwrap();
        assert!(rec
            .attrs
            .iter()
            .zip(&out.labels)
            .all(|(&a, &l)| a == l));
        // class-0 images carry a white patch at location 0
        let (r0, c0) = spec.locations[0];
        for i in 0..out.len() {
            if out.labels[i] == 0 {
                let img = out.image(i);
                assert_eq!(img.data()[(r0) * 16 + c0], 1.0);
            }
        }
    }

    #[test]
    fn half_correlation_hits_own_location_about_half_the_time() {
        let ds = base(2, 1000);
        let spec = SpuriousSpec::patch_grid(2, 5, 16, 16).unwrap();
        let out = inject_patch(&ds, &spec, 0.5, 3).unwrap();
        let rec = out.spurious.as_ref().unwrap();
        let own = rec
            .attrs
            .iter()
            .zip(&out.labels)
            .filter(|(a, l)| a == l)
            .count();
        // binomial(2000, 0.5), +-4 sigma ~ +-89
        assert!((911..=1089).contains(&own), "own-location count {own}");
    }

    #[test]
    fn overlapping_locations_rejected() {
        let ds = base(2, 5);
        let spec = SpuriousSpec {
            kind: SpuriousKind::Patch,
            patch: 5,
            locations: vec![(0, 0), (2, 2)],
            intensity: 1.0,
            content_shared: true,
        };
        assert!(inject_patch(&ds, &spec, 1.0, 0).is_err());
    }

    #[test]
    fn intervention_breaks_correlation_and_keeps_off_patch_pixels() {
        let ds = base(2, 2500);
        let spec = SpuriousSpec::patch_grid(2, 5, 16, 16).unwrap();
        let spurious = inject_patch(&ds, &spec, 1.0, 5).unwrap();
        let intervened = intervene_randomize_spurious(&spurious, 6).unwrap();

        // empirical corr(s, y) ~ 0 at n = 5000
        let attrs = &intervened.spurious.as_ref().unwrap().attrs;
        let corr = binary_corr(attrs, &intervened.labels);
        assert!(corr.abs() < 0.05, "post-intervention corr {corr}");

        // pixels outside both patch footprints identical to the spurious ds
        let footprint: Vec<bool> = {
            let mut f = vec![false; 16 * 16];
            for &(r, c) in &spec.locations {
                for pr in 0..5 {
                    for pc in 0..5 {
                        f[(r + pr) * 16 + c + pc] = true;
                    }
                }
            }
            f
        };
        for i in 0..20 {
            let a = spurious.image(i);
            let b = intervened.image(i);
            for p in 0..256 {
                if !footprint[p] {
                    assert_eq!(a.data()[p].to_bits(), b.data()[p].to_bits());
                }
            }
        }
    }

    #[test]
    fn intervention_requires_record() {
        let ds = base(2, 5);
        assert!(intervene_randomize_spurious(&ds, 0).is_err());
    }

    fn binary_corr(a: &[u32], b: &[u32]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (x as f64 - ma, y as f64 - mb);
            cov += dx * dy;
            va += dx * dx;
            vb += dy * dy;
        }
        cov / (va.sqrt() * vb.sqrt()).max(1e-12)
    }

    #[test]
    fn dominoes_have_paper_geometry() {
        let top = gen_glyphs(2, 20, 32, 32, 1).unwrap();
        let bottom = gen_glyphs(2, 20, 32, 32, 2).unwrap();
        let d = compose_dominoes(&top, &bottom, 1.0, 3).unwrap();
        assert_eq!(&d.images.dims()[1..], &[1, 64, 32]);
        assert_eq!(d.labels, bottom.labels);
        assert_eq!(d.domino_top_rows, Some(32));
    }

    #[test]
    fn domino_top_half_is_a_source_image() {
        let top = gen_glyphs(2, 10, 8, 8, 4).unwrap();
        let bottom = gen_glyphs(2, 10, 8, 8, 5).unwrap();
        let d = compose_dominoes(&top, &bottom, 1.0, 6).unwrap();
        // the top half of composite 0 must bit-equal some top image of the
        // matching class
        let composite = d.image(0);
        let top_half: Vec<u32> = composite.data()[..64].iter().map(|v| v.to_bits()).collect();
        let attr = d.spurious.as_ref().unwrap().attrs[0];
        let found = (0..top.len())
            .filter(|&i| top.labels[i] == attr)
            .any(|i| {
                top.image(i).data()[..64]
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
                    == top_half
            });
        assert!(found);
    }

    #[test]
    fn width_mismatch_rejected() {
        let top = gen_glyphs(2, 5, 16, 16, 1).unwrap();
        let bottom = gen_glyphs(2, 5, 16, 8, 2).unwrap();
        assert!(compose_dominoes(&top, &bottom, 1.0, 0).is_err());
    }

    #[test]
    fn masking_zeroes_top_keeps_bottom_and_is_idempotent() {
        let top = gen_glyphs(2, 10, 8, 8, 7).unwrap();
        let bottom = gen_glyphs(2, 10, 8, 8, 8).unwrap();
        let d = compose_dominoes(&top, &bottom, 1.0, 9).unwrap();
        let m = mask_core_only(&d).unwrap();
        for i in 0..m.len() {
            let orig = d.image(i);
            let masked = m.image(i);
            assert!(masked.data()[..64].iter().all(|&v| v == 0.0));
            assert_eq!(
                masked.data()[64..]
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
                orig.data()[64..]
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            );
        }
        let mm = mask_core_only(&m).unwrap();
        assert_eq!(mm.images.data(), m.images.data());
    }

    #[test]
    fn masking_non_domino_rejected() {
        let ds = base(2, 5);
        assert!(mask_core_only(&ds).is_err());
    }
}
