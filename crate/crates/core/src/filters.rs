//! The 22-filter bank.
//!
//! Each filter is a [`FilterRecipe`]: an ordered list of pixel primitives
//! loaded from a line-delimited catalog. The default catalog ships with the
//! crate (`data/filters.jsonl`); alternative catalogs can be parsed with
//! [`Catalog::parse`] as long as they define every filter of the bank.
//!
//! Evaluation order is fixed: primitives run in catalog order, channels in
//! R, G, B order, all arithmetic in `f32`, and the result is clamped to
//! `[0, 1]` after every primitive.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{clamp01, Image};

pub const FILTER_COUNT: usize = 22;

pub const FILTER_NAMES: [&str; FILTER_COUNT] = [
    "1977",
    "Amaro",
    "Apollo",
    "Brannan",
    "Earlybird",
    "Gotham",
    "Hefe",
    "Hudson",
    "Inkwell",
    "Lofi",
    "LordKevin",
    "Mayfair",
    "Nashville",
    "Poprocket",
    "Rise",
    "Sierra",
    "Sutro",
    "Toaster",
    "Valencia",
    "Walden",
    "Willow",
    "XProII",
];

pub const CATALOG_SCHEMA: &str = "filtrank.filter-catalog";
pub const CATALOG_VERSION: u32 = 1;

const DEFAULT_CATALOG: &str = include_str!("../data/filters.jsonl");

/// Index into the filter bank, `0..22`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FilterId(u8);

impl FilterId {
    pub fn new(index: usize) -> Result<Self> {
        if index < FILTER_COUNT {
            Ok(Self(index as u8))
        } else {
            Err(Error::UnknownFilter(index.to_string()))
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        FILTER_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| Self(i as u8))
            .ok_or_else(|| Error::UnknownFilter(name.to_string()))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        FILTER_NAMES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = FilterId> {
        (0..FILTER_COUNT as u8).map(FilterId)
    }
}

impl fmt::Display for FilterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_name(s)
    }
}

impl Serialize for FilterId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for FilterId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        FilterId::from_name(&name).map_err(serde::de::Error::custom)
    }
}

/// The bank in index order.
pub fn filter_bank() -> Vec<FilterId> {
    FilterId::all().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Primitive {
    /// Piecewise-linear per-channel curve through `[x, y]` control points.
    ToneCurve {
        r: Vec<[f32; 2]>,
        g: Vec<[f32; 2]>,
        b: Vec<[f32; 2]>,
    },
    /// Scales chroma around the pixel's luma; gray is a fixed point.
    Saturation { factor: f32 },
    /// `(v - 0.5) * gain + 0.5 + offset`
    BrightnessContrast { offset: f32, gain: f32 },
    Tint { mul: [f32; 3] },
    /// Radial gain `1 - strength * sin²(π/2 · min(d / radius, 1))`, `d` the
    /// distance to the center in units of the half-diagonal.
    Vignette { strength: f32, radius: f32 },
    Grayscale { weights: [f32; 3] },
}

impl Primitive {
    fn validate(&self) -> Result<()> {
        match self {
            Primitive::ToneCurve { r, g, b } => {
                for curve in [r, g, b] {
                    if curve.len() < 2 {
                        return Err(Error::Catalog("tone curve needs two points".into()));
                    }
                    if !curve.windows(2).all(|w| w[0][0] < w[1][0]) {
                        return Err(Error::Catalog(
                            "tone curve x coordinates must be strictly increasing".into(),
                        ));
                    }
                    if !curve.windows(2).all(|w| w[0][1] <= w[1][1]) {
                        return Err(Error::Catalog("tone curve must be monotone".into()));
                    }
                }
            }
            Primitive::Saturation { factor } if *factor < 0.0 => {
                return Err(Error::Catalog("saturation factor must be >= 0".into()));
            }
            Primitive::Vignette { strength, radius }
                if !(0.0..=1.0).contains(strength) || *radius <= 0.0 =>
            {
                return Err(Error::Catalog("vignette needs strength in [0,1], radius > 0".into()));
            }
            _ => {}
        }
        Ok(())
    }

    fn apply(&self, img: &Image) -> Image {
        match self {
            Primitive::ToneCurve { r, g, b } => img.map_pixels(|_, _, p| {
                [eval_curve(r, p[0]), eval_curve(g, p[1]), eval_curve(b, p[2])]
            }),
            Primitive::Saturation { factor } => img.map_pixels(|_, _, p| {
                let l = luma(p);
                p.map(|v| l + factor * (v - l))
            }),
            Primitive::BrightnessContrast { offset, gain } => {
                img.map_pixels(|_, _, p| p.map(|v| (v - 0.5) * gain + 0.5 + offset))
            }
            Primitive::Tint { mul } => {
                img.map_pixels(|_, _, p| [p[0] * mul[0], p[1] * mul[1], p[2] * mul[2]])
            }
            Primitive::Vignette { strength, radius } => {
                let cx = (img.width() as f32 - 1.0) / 2.0;
                let cy = (img.height() as f32 - 1.0) / 2.0;
                let half_diag = (cx * cx + cy * cy).sqrt().max(f32::EPSILON);
                img.map_pixels(|x, y, p| {
                    let dx = x as f32 - cx;
                    let dy = y as f32 - cy;
                    let t = ((dx * dx + dy * dy).sqrt() / half_diag / radius).min(1.0);
                    let s = (std::f32::consts::FRAC_PI_2 * t).sin();
                    let gain = 1.0 - strength * s * s;
                    p.map(|v| v * gain)
                })
            }
            Primitive::Grayscale { weights } => img.map_pixels(|_, _, p| {
                let l = weights[0] * p[0] + weights[1] * p[1] + weights[2] * p[2];
                [l, l, l]
            }),
        }
    }
}

/// Rec. 601 luma.
pub fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn eval_curve(points: &[[f32; 2]], v: f32) -> f32 {
    let first = points[0];
    let last = points[points.len() - 1];
    if v <= first[0] {
        return first[1];
    }
    if v >= last[0] {
        return last[1];
    }
    for w in points.windows(2) {
        let ([x0, y0], [x1, y1]) = (w[0], w[1]);
        if v <= x1 {
            return clamp01(y0 + (y1 - y0) * (v - x0) / (x1 - x0));
        }
    }
    last[1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterRecipe {
    pub name: String,
    pub steps: Vec<Primitive>,
}

impl FilterRecipe {
    pub fn apply(&self, img: &Image) -> Image {
        self.steps
            .iter()
            .fold(img.clone(), |acc, step| step.apply(&acc))
    }
}

#[derive(Debug, Deserialize)]
struct CatalogHeader {
    schema: String,
    version: u32,
}

/// One recipe per filter, in bank order.
#[derive(Clone, Debug)]
pub struct Catalog {
    recipes: Vec<FilterRecipe>,
}

impl Catalog {
    /// Parses a catalog: a header line followed by one recipe per line.
    /// Blank lines are skipped. Every bank filter must appear exactly once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Catalog("empty catalog".into()))?;
        let header: CatalogHeader = serde_json::from_str(header)
            .map_err(|e| Error::Catalog(format!("bad header: {e}")))?;
        if header.schema != CATALOG_SCHEMA || header.version != CATALOG_VERSION {
            return Err(Error::Catalog(format!(
                "unsupported catalog {} v{}",
                header.schema, header.version
            )));
        }
        let mut slots: Vec<Option<FilterRecipe>> = vec![None; FILTER_COUNT];
        for (line, text) in lines {
            let recipe: FilterRecipe =
                serde_json::from_str(text).map_err(|e| Error::Manifest {
                    line: line + 1,
                    detail: e.to_string(),
                })?;
            let id = FilterId::from_name(&recipe.name)?;
            for step in &recipe.steps {
                step.validate()?;
            }
            if slots[id.index()].replace(recipe).is_some() {
                return Err(Error::Catalog(format!("duplicate recipe for {id}")));
            }
        }
        let recipes = slots
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| Error::Catalog(format!("missing {}", FILTER_NAMES[i]))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { recipes })
    }

    pub fn recipe(&self, id: FilterId) -> &FilterRecipe {
        &self.recipes[id.index()]
    }

    pub fn apply(&self, img: &Image, id: FilterId) -> Image {
        self.recipe(id).apply(img)
    }
}

/// The catalog bundled with the crate.
pub fn default_catalog() -> &'static Catalog {
    static CATALOG: OnceLock<Catalog> = OnceLock::new();
    CATALOG.get_or_init(|| Catalog::parse(DEFAULT_CATALOG).expect("bundled catalog is valid"))
}

pub fn apply_filter(img: &Image, id: FilterId) -> Image {
    default_catalog().apply(img, id)
}

/// Looks a filter up by name, failing with `UnknownFilter`.
pub fn apply_named(img: &Image, name: &str) -> Result<Image> {
    Ok(apply_filter(img, FilterId::from_name(name)?))
}

/// All 22 filtered variants of `img`, in bank order.
pub fn apply_all(img: &Image) -> Vec<Image> {
    FilterId::all().map(|f| apply_filter(img, f)).collect()
}

/// Deterministic reference chart: hue sweep across the top, saturation
/// falloff down the middle, a gray ramp in the bottom band.
pub fn test_chart(side: usize) -> Image {
    let side = side.max(4);
    Image::from_fn(side, side, |x, y| {
        let u = x as f32 / (side - 1) as f32;
        let v = y as f32 / (side - 1) as f32;
        if v > 0.8 {
            return [u, u, u];
        }
        let [r, g, b] = hue(u);
        let sat = 1.0 - v / 0.8 * 0.7;
        let val = 0.35 + 0.55 * (1.0 - (2.0 * v - 0.8).abs());
        [r, g, b].map(|c| val * (1.0 - sat + sat * c))
    })
    .expect("nonzero chart")
}

fn hue(h: f32) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).min(5.9999);
    let f = h6.fract();
    match h6 as u32 {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_warmth(img: &Image) -> f32 {
        img.pixels().map(|p| p[0] - p[2]).sum::<f32>() / (img.width() * img.height()) as f32
    }

    fn rms_contrast(img: &Image) -> f32 {
        let l: Vec<f32> = img.pixels().map(luma).collect();
        let m = l.iter().sum::<f32>() / l.len() as f32;
        (l.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / l.len() as f32).sqrt()
    }

    #[test]
    fn bank_has_22_distinct_names() {
        let bank = filter_bank();
        assert_eq!(bank.len(), 22);
        let mut names: Vec<_> = bank.iter().map(|f| f.name()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 22);
        assert_eq!(FilterId::from_name("Inkwell").unwrap().index(), 8);
        for f in bank {
            assert_eq!(FilterId::from_name(f.name()).unwrap(), f);
        }
    }

    #[test]
    fn unknown_filter_is_an_error() {
        assert!(matches!(FilterId::from_name("Apollp"), Err(Error::UnknownFilter(_))));
        assert!(matches!(FilterId::new(22), Err(Error::UnknownFilter(_))));
        let img = test_chart(8);
        assert!(matches!(apply_named(&img, "Clarendon"), Err(Error::UnknownFilter(_))));
    }

    #[test]
    fn monochrome_recipes_are_gray() {
        let chart = test_chart(48);
        for name in ["Inkwell", "Willow"] {
            let out = apply_named(&chart, name).unwrap();
            assert!(out.pixels().all(|p| p[0] == p[1] && p[1] == p[2]), "{name}");
        }
    }

    #[test]
    fn saturation_fixes_gray() {
        let gray = Image::filled(5, 5, [0.5; 3]).unwrap();
        for factor in [0.0, 0.4, 1.0, 2.5] {
            let out = Primitive::Saturation { factor }.apply(&gray);
            assert_eq!(out, gray);
        }
    }

    #[test]
    fn filters_are_distinct_and_not_identity() {
        let chart = test_chart(64);
        let outs = apply_all(&chart);
        for (i, a) in outs.iter().enumerate() {
            assert!(a.max_abs_diff(&chart) > 1.0 / 255.0, "{} is identity", FILTER_NAMES[i]);
            for (j, b) in outs.iter().enumerate().skip(i + 1) {
                assert!(
                    a.max_abs_diff(b) > 1.0 / 255.0,
                    "{} and {} coincide",
                    FILTER_NAMES[i],
                    FILTER_NAMES[j]
                );
            }
        }
    }

    #[test]
    fn qualitative_character() {
        let chart = test_chart(64);
        let base_warmth = mean_warmth(&chart);
        for name in ["Earlybird", "XProII", "Gotham"] {
            assert!(mean_warmth(&apply_named(&chart, name).unwrap()) > base_warmth, "{name}");
        }
        let base_contrast = rms_contrast(&chart);
        for name in ["XProII", "Hefe", "Mayfair"] {
            assert!(rms_contrast(&apply_named(&chart, name).unwrap()) > base_contrast, "{name}");
        }
    }

    #[test]
    fn deterministic_and_range_preserving() {
        let chart = test_chart(40);
        for f in filter_bank() {
            let a = apply_filter(&chart, f);
            let b = apply_filter(&chart, f);
            assert_eq!(a.to_rgb8(), b.to_rgb8());
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!((a.width(), a.height()), (40, 40));
        }
    }

    #[test]
    fn catalog_validation() {
        let header = r#"{"schema":"filtrank.filter-catalog","version":1}"#;
        assert!(Catalog::parse(header).is_err(), "missing recipes");
        let bad_curve = DEFAULT_CATALOG.replace(
            r#""r":[[0.0,0.0],[1.0,0.92]]"#,
            r#""r":[[0.5,0.0],[0.5,0.92]]"#,
        );
        assert!(matches!(Catalog::parse(&bad_curve), Err(Error::Catalog(_))));
        let bad_version = DEFAULT_CATALOG.replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(Catalog::parse(&bad_version), Err(Error::Catalog(_))));
        let mut dup = DEFAULT_CATALOG.to_string();
        dup.push_str(DEFAULT_CATALOG.lines().nth(1).unwrap());
        assert!(matches!(Catalog::parse(&dup), Err(Error::Catalog(_))));
    }

    #[test]
    fn tone_curve_interpolates() {
        let pts = [[0.0, 0.1], [0.5, 0.6], [1.0, 1.0]];
        assert_eq!(eval_curve(&pts, 0.0), 0.1);
        assert!((eval_curve(&pts, 0.25) - 0.35).abs() < 1e-6);
        assert_eq!(eval_curve(&pts, 1.0), 1.0);
    }
}
