//! Stochastic augmentation for pretraining images: padding, random crop, random horizontal
//! flip and random erasing, applied in that order.
//!
//! Padding grows the canvas by `pad_pixels` zeros on every side and the canvas is always cut
//! back to the original size: at a random offset with RC enabled, centred otherwise. Without
//! padding RC therefore has nothing to move and acts as the identity.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::{s, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Transform {
    #[serde(rename = "RC")]
    RandomCrop,
    #[serde(rename = "RE")]
    RandomErase,
    #[serde(rename = "Pad")]
    Pad,
    #[serde(rename = "RHF")]
    HorizontalFlip,
}

impl Transform {
    pub const ALL: [Transform; 4] = [
        Transform::RandomCrop,
        Transform::RandomErase,
        Transform::Pad,
        Transform::HorizontalFlip,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Transform::RandomCrop => "RC",
            Transform::RandomErase => "RE",
            Transform::Pad => "Pad",
            Transform::HorizontalFlip => "RHF",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.short_name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown augmentation '{s}'")))
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub enabled: BTreeSet<Transform>,
    pub rhf_probability: f64,
    pub pad_pixels: usize,
    pub re_fill: [f32; 3],
    pub re_probability: f64,
    /// Erased fraction of the image area.
    pub re_area_range: (f64, f64),
    /// Height / width of the erased rectangle.
    pub re_aspect_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            enabled: Transform::ALL.into_iter().collect(),
            rhf_probability: 0.5,
            pad_pixels: 10,
            re_fill: [0.485, 0.456, 0.406],
            re_probability: 0.5,
            re_area_range: (0.02, 0.2),
            re_aspect_range: (0.3, 3.3),
            seed: 0,
        }
    }
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            enabled: BTreeSet::new(),
            ..Self::default()
        }
    }

    pub fn without(mut self, removed: &[Transform]) -> Self {
        for t in removed {
            self.enabled.remove(t);
        }
        self
    }

    pub fn is_enabled(&self, t: Transform) -> bool {
        self.enabled.contains(&t)
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("rhf_probability", self.rhf_probability)?;
        prob("re_probability", self.re_probability)?;
        let (lo, hi) = self.re_area_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "re_area_range ({lo}, {hi}) must satisfy 0 < min <= max < 1"
            )));
        }
        let (alo, ahi) = self.re_aspect_range;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(Error::Config(format!("invalid re_aspect_range ({alo}, {ahi})")));
        }
        if self.re_fill.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(format!("re_fill {:?} outside [0, 1]", self.re_fill)));
        }
        Ok(())
    }

    /// Label in the leave-out notation, e.g. `T/{RC,RE}`.
    pub fn label(&self) -> String {
        let missing: Vec<&str> = Transform::ALL
            .into_iter()
            .filter(|t| !self.is_enabled(*t))
            .map(Transform::short_name)
            .collect();
        if missing.is_empty() {
            "T".into()
        } else {
            format!("T/{{{}}}", missing.join(","))
        }
    }
}

/// Full augmentation set plus the six leave-out subsets used for ablations.
pub fn ablation_subsets() -> Vec<AugmentSpec> {
    use Transform::*;
    let base = AugmentSpec::default();
    [
        vec![],
        vec![RandomCrop],
        vec![RandomErase],
        vec![Pad],
        vec![HorizontalFlip],
        vec![RandomCrop, RandomErase],
        vec![Pad, HorizontalFlip],
    ]
    .into_iter()
    .map(|removed| base.clone().without(&removed))
    .collect()
}

/// Applies the enabled transforms to a `C x H x W` image.
pub fn apply<R: Rng + ?Sized>(image: &Image, spec: &AugmentSpec, rng: &mut R) -> Result<Image> {
    spec.validate()?;
    let (c, h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::Shape("cannot augment an empty image".into()));
    }
    let mut out = if spec.is_enabled(Transform::Pad) && spec.pad_pixels > 0 {
        let p = spec.pad_pixels;
        let mut canvas = Array3::<f32>::zeros((c, h + 2 * p, w + 2 * p));
        canvas.slice_mut(s![.., p..p + h, p..p + w]).assign(image);
        let (top, left) = if spec.is_enabled(Transform::RandomCrop) {
            (rng.random_range(0..=2 * p), rng.random_range(0..=2 * p))
        } else {
            (p, p)
        };
        canvas.slice(s![.., top..top + h, left..left + w]).to_owned()
    } else {
        image.clone()
    };
    if spec.is_enabled(Transform::HorizontalFlip) && rng.random_bool(spec.rhf_probability) {
        out.invert_axis(ndarray::Axis(2));
        out = out.as_standard_layout().into_owned();
    }
    if spec.is_enabled(Transform::RandomErase) && rng.random_bool(spec.re_probability) {
        erase(&mut out, spec, rng);
    }
    Ok(out)
}

fn erase<R: Rng + ?Sized>(image: &mut Image, spec: &AugmentSpec, rng: &mut R) {
    let (channels, h, w) = image.dim();
    let area = (h * w) as f64;
    for _ in 0..100 {
        let target = rng.random_range(spec.re_area_range.0..=spec.re_area_range.1) * area;
        let aspect = rng.random_range(spec.re_aspect_range.0..=spec.re_aspect_range.1);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        for ch in 0..channels {
            image
                .slice_mut(s![ch, top..top + eh, left..left + ew])
                .fill(spec.re_fill[ch % spec.re_fill.len()]);
        }
        return;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image(h: usize, w: usize) -> Image {
        // values in [0.9, 1.0], never equal to the erase fill
        Array3::from_shape_fn((3, h, w), |(c, y, x)| 0.9 + ((c * 31 + y * 7 + x * 3) % 10) as f32 / 100.0)
    }

    #[test]
    fn empty_set_is_identity() {
        let img = test_image(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(apply(&img, &AugmentSpec::none(), &mut rng).unwrap(), img);
    }

    #[test]
    fn forced_flip_mirrors() {
        let img = test_image(8, 12);
        let spec = AugmentSpec {
            enabled: [Transform::HorizontalFlip].into(),
            rhf_probability: 1.0,
            ..Default::default()
        };
        let out = apply(&img, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..12 {
                    assert_eq!(out[[c, y, x]], img[[c, y, 11 - x]]);
                }
            }
        }
    }

    #[test]
    fn forced_erase_writes_one_rectangle() {
        let img = test_image(32, 32);
        let spec = AugmentSpec {
            enabled: [Transform::RandomErase].into(),
            re_probability: 1.0,
            ..Default::default()
        };
        for seed in 0..20 {
            let out = apply(&img, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let changed: Vec<(usize, usize)> = (0..32)
                .flat_map(|y| (0..32).map(move |x| (y, x)))
                .filter(|&(y, x)| (0..3).any(|c| out[[c, y, x]] != img[[c, y, x]]))
                .collect();
            assert!(!changed.is_empty());
            let (y0, y1) = (changed.iter().map(|p| p.0).min().unwrap(), changed.iter().map(|p| p.0).max().unwrap());
            let (x0, x1) = (changed.iter().map(|p| p.1).min().unwrap(), changed.iter().map(|p| p.1).max().unwrap());
            assert_eq!(changed.len(), (y1 - y0 + 1) * (x1 - x0 + 1), "not a rectangle");
            for &(y, x) in &changed {
                for c in 0..3 {
                    assert_eq!(out[[c, y, x]], spec.re_fill[c]);
                }
            }
        }
    }

    #[test]
    fn pad_and_crop_translate_content() {
        let img = test_image(16, 16);
        let spec = AugmentSpec {
            enabled: [Transform::Pad, Transform::RandomCrop].into(),
            pad_pixels: 4,
            ..Default::default()
        };
        let out = apply(&img, &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(out.dim(), img.dim());
        // pad without crop keeps the centred window, i.e. the input
        let centred = AugmentSpec { enabled: [Transform::Pad].into(), ..spec };
        assert_eq!(apply(&img, &centred, &mut ChaCha8Rng::seed_from_u64(5)).unwrap(), img);
    }

    #[test]
    fn ablation_subset_table() {
        let subsets = ablation_subsets();
        assert_eq!(subsets.len(), 7);
        let labels: Vec<String> = subsets.iter().map(AugmentSpec::label).collect();
        assert_eq!(labels, ["T", "T/{RC}", "T/{RE}", "T/{Pad}", "T/{RHF}", "T/{RC,RE}", "T/{Pad,RHF}"]);
        let no_re = &subsets[2];
        let expected: BTreeSet<Transform> =
            [Transform::RandomCrop, Transform::Pad, Transform::HorizontalFlip].into();
        assert_eq!(no_re.enabled, expected);
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let img = test_image(8, 8);
        let spec = AugmentSpec { rhf_probability: 1.5, ..Default::default() };
        assert!(matches!(apply(&img, &spec, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config(_))));
        let spec = AugmentSpec { re_area_range: (0.3, 0.2), ..Default::default() };
        assert!(spec.validate().is_err());
    }
}
