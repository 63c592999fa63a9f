//! Reference images, filtered variants, the pairing design, label records,
//! per-filter scores, ground truth, the stratified split and a synthetic
//! annotator for runs without human labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{apply_filter, luma, FilterId, FILTER_COUNT};
use crate::imagecore::{load_image, save_image, Image};
use crate::manifest;
use crate::rng::Rng;

pub const PAIRS_PER_REF: usize = 33;
pub const PAIRS_PER_FILTER: usize = 3;
pub const MAX_SCORE: i32 = 3;

pub const REFERENCES_KIND: &str = "references";
pub const FILTERED_KIND: &str = "filtered";
pub const PAIRS_KIND: &str = "pairs";
pub const LABELS_KIND: &str = "labels";
pub const SCORES_KIND: &str = "scores";
pub const QUALITY_KIND: &str = "quality";
pub const SPLIT_KIND: &str = "split";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Animal,
    Flora,
    Landscape,
    Architecture,
    FoodAndDrink,
    Portrait,
    Cityscape,
    StillLife,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Animal,
        Category::Flora,
        Category::Landscape,
        Category::Architecture,
        Category::FoodAndDrink,
        Category::Portrait,
        Category::Cityscape,
        Category::StillLife,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Animal => "animal",
            Category::Flora => "flora",
            Category::Landscape => "landscape",
            Category::Architecture => "architecture",
            Category::FoodAndDrink => "food_and_drink",
            Category::Portrait => "portrait",
            Category::Cityscape => "cityscape",
            Category::StillLife => "still_life",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown category `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceImage {
    pub id: String,
    pub category: Category,
    /// Relative to the dataset root.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredImage {
    pub ref_id: String,
    pub filter: FilterId,
    pub path: String,
}

/// `"<ref_id>.<FilterName>"`
pub fn filtered_id(ref_id: &str, filter: FilterId) -> String {
    format!("{ref_id}.{}", filter.name())
}

pub fn parse_filtered_id(id: &str) -> Result<(String, FilterId)> {
    let (ref_id, name) = id
        .rsplit_once('.')
        .ok_or_else(|| Error::MissingFilteredImage(id.to_string()))?;
    Ok((ref_id.to_string(), FilterId::from_name(name)?))
}

impl FilteredImage {
    pub fn id(&self) -> String {
        filtered_id(&self.ref_id, self.filter)
    }
}

/// Every (reference, filter) combination, in reference then filter order.
pub fn filtered_manifest(refs: &[ReferenceImage]) -> Vec<FilteredImage> {
    refs.iter()
        .flat_map(|r| {
            FilterId::all().map(move |f| FilteredImage {
                ref_id: r.id.clone(),
                filter: f,
                path: format!("filtered/{}.png", filtered_id(&r.id, f)),
            })
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct FilteredOutcome {
    pub images: Vec<FilteredImage>,
    /// Per-reference failures; the other references are still processed.
    pub failures: Vec<(String, Error)>,
}

fn render_reference(root: &Path, r: &ReferenceImage) -> Result<Vec<FilteredImage>> {
    let img = load_image(root.join(&r.path))?;
    let entries = filtered_manifest(std::slice::from_ref(r));
    for e in &entries {
        save_image(&apply_filter(&img, e.filter), root.join(&e.path))?;
    }
    Ok(entries)
}

/// Applies all 22 filters to every reference under `root`, writing
/// `filtered/<ref>.<Filter>.png`. Work is spread over the available cores.
pub fn generate_filtered(root: &Path, refs: &[ReferenceImage]) -> Result<FilteredOutcome> {
    if refs.is_empty() {
        return Err(Error::EmptySource);
    }
    std::fs::create_dir_all(root.join("filtered"))?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(refs.len());
    let chunk = refs.len().div_ceil(workers);
    let results: Vec<Vec<(String, Result<Vec<FilteredImage>>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = refs
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|r| (r.id.clone(), render_reference(root, r)))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = FilteredOutcome::default();
    for (id, res) in results.into_iter().flatten() {
        match res {
            Ok(imgs) => out.images.extend(imgs),
            Err(e) => out.failures.push((id, e)),
        }
    }
    Ok(out)
}

/// The 33 filter pairs annotated for every reference.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairDesign {
    edges: Vec<(FilterId, FilterId)>,
}

/// Circulant design on 22 vertices with offsets 1 and 11: each filter meets
/// its two cyclic neighbours and the filter opposite to it.
pub fn pair_design() -> PairDesign {
    let n = FILTER_COUNT;
    let f = |i: usize| FilterId::new(i % n).expect("index below filter count");
    let mut edges: Vec<_> = (0..n).map(|i| (f(i), f(i + 1))).collect();
    edges.extend((0..n / 2).map(|i| (f(i), f(i + n / 2))));
    PairDesign { edges }
}

impl PairDesign {
    /// Validates a user-supplied edge list.
    pub fn from_edges(edges: Vec<(FilterId, FilterId)>) -> Result<Self> {
        let d = Self { edges };
        d.validate()?;
        Ok(d)
    }

    pub fn edges(&self) -> &[(FilterId, FilterId)] {
        &self.edges
    }

    pub fn validate(&self) -> Result<()> {
        if self.edges.len() != PAIRS_PER_REF {
            return Err(Error::InvalidDesign(format!(
                "{} edges, expected {PAIRS_PER_REF}",
                self.edges.len()
            )));
        }
        let mut seen = BTreeSet::new();
        let mut degree = [0usize; FILTER_COUNT];
        for &(a, b) in &self.edges {
            if a == b {
                return Err(Error::InvalidDesign(format!("self-pair {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::InvalidDesign(format!("duplicate pair {a} {b}")));
            }
            degree[a.index()] += 1;
            degree[b.index()] += 1;
        }
        if let Some(f) = FilterId::all().find(|f| degree[f.index()] != PAIRS_PER_FILTER) {
            return Err(Error::InvalidDesign(format!(
                "{f} appears in {} pairs, expected {PAIRS_PER_FILTER}",
                degree[f.index()]
            )));
        }
        Ok(())
    }

    /// The three filters each filter is compared with.
    pub fn neighbours(&self, f: FilterId) -> Vec<FilterId> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == f {
                    Some(b)
                } else if b == f {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    fn position(&self, a: FilterId, b: FilterId) -> Option<usize> {
        self.edges
            .iter()
            .position(|&(x, y)| (x, y) == (a, b) || (y, x) == (a, b))
    }

    /// One `A B` line per pair.
    pub fn to_text(&self) -> String {
        self.edges.iter().map(|(a, b)| format!("{a} {b}\n")).collect()
    }

    /// Parses `A B` or `A,B` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let names: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            match names.as_slice() {
                [a, b] => edges.push((FilterId::from_name(a)?, FilterId::from_name(b)?)),
                _ => {
                    return Err(Error::InvalidDesign(format!(
                        "line {}: expected two filter names",
                        i + 1
                    )))
                }
            }
        }
        Self::from_edges(edges)
    }
}

/// Records for every reference: 33 per reference, design order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairRecord {
    pub ref_id: String,
    pub left: FilterId,
    pub right: FilterId,
}

pub fn pair_manifest(refs: &[ReferenceImage], design: &PairDesign) -> Vec<PairRecord> {
    refs.iter()
        .flat_map(|r| {
            design.edges().iter().map(move |&(left, right)| PairRecord {
                ref_id: r.id.clone(),
                left,
                right,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Left,
    Right,
    Equal,
    Error,
}

impl Verdict {
    /// The same judgement seen with the two images swapped.
    pub fn swapped(self) -> Self {
        match self {
            Verdict::Left => Verdict::Right,
            Verdict::Right => Verdict::Left,
            other => other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub ref_id: String,
    pub left: FilterId,
    pub right: FilterId,
    pub verdict: Verdict,
    pub annotator_id: String,
    /// Seconds since the Unix epoch, or a sequence number for simulated runs.
    pub timestamp: u64,
}

impl LabelRecord {
    pub fn winner(&self) -> Option<(FilterId, FilterId)> {
        match self.verdict {
            Verdict::Left => Some((self.left, self.right)),
            Verdict::Right => Some((self.right, self.left)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterScore {
    pub ref_id: String,
    pub filter: FilterId,
    pub score: i32,
}

/// `+1` for each pair a filter wins, `-1` for each loss, `0` for `equal`.
/// `labels` must cover the design exactly once for one reference.
pub fn score_images(ref_id: &str, labels: &[LabelRecord], design: &PairDesign) -> Result<Vec<FilterScore>> {
    let incomplete = |detail: String| Error::IncompleteLabels {
        ref_id: ref_id.to_string(),
        detail,
    };
    let mut covered = vec![false; design.edges().len()];
    let mut score = [0i32; FILTER_COUNT];
    for l in labels {
        if l.ref_id != ref_id {
            return Err(incomplete(format!("label for reference {}", l.ref_id)));
        }
        let at = design
            .position(l.left, l.right)
            .ok_or_else(|| incomplete(format!("{} vs {} is not a designed pair", l.left, l.right)))?;
        if std::mem::replace(&mut covered[at], true) {
            return Err(incomplete(format!("{} vs {} labelled twice", l.left, l.right)));
        }
        match l.verdict {
            Verdict::Error => {
                return Err(Error::ErrorVerdictPresent {
                    ref_id: ref_id.to_string(),
                    a: l.left.to_string(),
                    b: l.right.to_string(),
                })
            }
            Verdict::Equal => {}
            Verdict::Left | Verdict::Right => {
                let (w, lo) = l.winner().expect("decisive verdict");
                score[w.index()] += 1;
                score[lo.index()] -= 1;
            }
        }
    }
    let missing = covered.iter().filter(|c| !**c).count();
    if missing > 0 {
        return Err(incomplete(format!("{missing} of {} pairs unlabelled", covered.len())));
    }
    Ok(FilterId::all()
        .map(|f| FilterScore {
            ref_id: ref_id.to_string(),
            filter: f,
            score: score[f.index()],
        })
        .collect())
}

/// Labels grouped by reference, preserving log order within each group.
pub fn group_by_ref(labels: &[LabelRecord]) -> BTreeMap<String, Vec<LabelRecord>> {
    let mut out: BTreeMap<String, Vec<LabelRecord>> = BTreeMap::new();
    for l in labels {
        out.entry(l.ref_id.clone()).or_default().push(l.clone());
    }
    out
}

/// Scores every reference in a label log; each must be complete.
pub fn score_log(labels: &[LabelRecord], design: &PairDesign) -> Result<BTreeMap<String, Vec<FilterScore>>> {
    group_by_ref(labels)
        .into_iter()
        .map(|(id, ls)| score_images(&id, &ls, design).map(|s| (id, s)))
        .collect()
}

/// Filters scoring the maximum `+3`; possibly empty.
pub fn ground_truth(scores: &[FilterScore]) -> BTreeSet<FilterId> {
    scores
        .iter()
        .filter(|s| s.score == MAX_SCORE)
        .map(|s| s.filter)
        .collect()
}

/// Stratified split with `ratio = (train, test)` parts. Every category that
/// occurs must have a multiple of `train + test` references.
pub fn split(
    refs: &[ReferenceImage],
    ratio: (usize, usize),
    rng: &mut Rng,
) -> Result<(Vec<ReferenceImage>, Vec<ReferenceImage>)> {
    let parts = ratio.0 + ratio.1;
    if refs.is_empty() || parts == 0 || ratio.1 == 0 {
        return Err(Error::TooFewReferences("nothing to split".into()));
    }
    let mut by_cat: BTreeMap<Category, Vec<&ReferenceImage>> = BTreeMap::new();
    for r in refs {
        by_cat.entry(r.category).or_default().push(r);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (cat, mut group) in by_cat {
        if group.len() % parts != 0 {
            return Err(Error::TooFewReferences(format!(
                "{cat} has {} references, not a multiple of {parts}",
                group.len()
            )));
        }
        group.sort_by(|a, b| a.id.cmp(&b.id));
        for i in (1..group.len()).rev() {
            group.swap(i, rng.below_incl(i));
        }
        let n_test = group.len() / parts * ratio.1;
        test.extend(group[..n_test].iter().map(|r| (*r).clone()));
        train.extend(group[n_test..].iter().map(|r| (*r).clone()));
    }
    train.sort_by(|a, b| a.id.cmp(&b.id));
    test.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub ref_id: String,
    pub part: SplitPart,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Test,
}

/// A preference pair for training: `preferred` beat `rejected` on `ref_id`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub ref_id: String,
    pub preferred: FilterId,
    pub rejected: FilterId,
}

/// Decisive labels as preference pairs; `equal` and `error` are dropped.
pub fn training_pairs(labels: &[LabelRecord]) -> Vec<TrainingPair> {
    labels
        .iter()
        .filter_map(|l| {
            l.winner().map(|(w, lo)| TrainingPair {
                ref_id: l.ref_id.clone(),
                preferred: w,
                rejected: lo,
            })
        })
        .collect()
}

/// High/low quality label for the single-column baseline.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityLabel {
    pub ref_id: String,
    pub filter: FilterId,
    pub high: bool,
}

/// Top half of the 22 variants by utility are high quality; ties go to the
/// lower filter index.
pub fn quality_labels(ref_id: &str, utilities: &[f64; FILTER_COUNT]) -> Vec<QualityLabel> {
    let mut order: Vec<usize> = (0..FILTER_COUNT).collect();
    order.sort_by(|&a, &b| utilities[b].total_cmp(&utilities[a]).then(a.cmp(&b)));
    let mut high = [false; FILTER_COUNT];
    for &i in &order[..FILTER_COUNT / 2] {
        high[i] = true;
    }
    FilterId::all()
        .map(|f| QualityLabel {
            ref_id: ref_id.to_string(),
            filter: f,
            high: high[f.index()],
        })
        .collect()
}

/// `[mean saturation, RMS contrast, mean warmth (R - B), brightness]`.
pub fn image_stats(img: &Image) -> [f64; 4] {
    let n = (img.width() * img.height()) as f64;
    let (mut sat, mut warm, mut sum, mut sq) = (0.0, 0.0, 0.0, 0.0);
    for p in img.pixels() {
        let max = p[0].max(p[1]).max(p[2]) as f64;
        let min = p[0].min(p[1]).min(p[2]) as f64;
        if max > 0.0 {
            sat += (max - min) / max;
        }
        warm += (p[0] - p[2]) as f64;
        let y = luma(p) as f64;
        sum += y;
        sq += y * y;
    }
    let mean = sum / n;
    [sat / n, (sq / n - mean * mean).max(0.0).sqrt(), warm / n, mean]
}

/// Deterministic stand-in for crowd workers: utility is a per-category
/// weighted sum of [`image_stats`], optionally perturbed per comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAnnotator {
    pub weights: [[f64; 4]; 8],
    /// `equal` when the utility gap is below this.
    pub epsilon: f64,
    /// Standard deviation of per-comparison utility noise.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    pub annotator_id: String,
}

/// Typical spread of each [`image_stats`] entry across the 22 variants of a
/// reference.
pub const STAT_SPREAD: [f64; 4] = [0.25, 0.02, 0.07, 0.085];

/// Preference shared by every category, in units of [`STAT_SPREAD`].
const SHARED_PREFERENCE: [f64; 4] = [0.7, 0.3, 0.3, 0.0];

/// Per-category deviations from [`SHARED_PREFERENCE`]: categories come in
/// pairs pulling the same statistic in opposite directions.
const CATEGORY_PREFERENCE: [[f64; 4]; 8] = [
    [1.0, 0.3, 0.0, 0.0],
    [-1.0, 0.0, 0.3, 0.0],
    [0.0, 1.0, 0.0, 0.3],
    [0.3, -1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.3],
    [0.0, 0.3, -1.0, 0.0],
    [0.0, 0.0, 0.3, 1.0],
    [0.3, 0.0, 0.0, -1.0],
];

impl Default for SyntheticAnnotator {
    fn default() -> Self {
        let weights = CATEGORY_PREFERENCE.map(|row| {
            let mut w = [0.0; 4];
            for k in 0..4 {
                w[k] = (SHARED_PREFERENCE[k] + row[k]) / STAT_SPREAD[k];
            }
            w
        });
        Self {
            weights,
            epsilon: 0.0,
            noise: 0.0,
            seed: 0,
            annotator_id: "synthetic".into(),
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn gaussian(rng: &mut Rng) -> f64 {
    let u1 = rng.uniform().max(f64::MIN_POSITIVE);
    let u2 = rng.uniform();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl SyntheticAnnotator {
    pub fn utility(&self, img: &Image, category: Category) -> f64 {
        let w = &self.weights[category.index()];
        image_stats(img).iter().zip(w).map(|(s, w)| s * w).sum()
    }

    /// Utilities of all 22 variants of one reference.
    pub fn utilities(
        &self,
        reference: &ReferenceImage,
        filtered: &BTreeMap<FilterId, Image>,
    ) -> Result<[f64; FILTER_COUNT]> {
        let mut out = [0.0; FILTER_COUNT];
        for f in FilterId::all() {
            let img = filtered
                .get(&f)
                .ok_or_else(|| Error::MissingFilteredImage(filtered_id(&reference.id, f)))?;
            out[f.index()] = self.utility(img, reference.category);
        }
        Ok(out)
    }

    /// One verdict per designed pair, `left` when the left image's utility
    /// is higher.
    pub fn judge(&self, ref_id: &str, design: &PairDesign, utilities: &[f64; FILTER_COUNT]) -> Vec<LabelRecord> {
        design
            .edges()
            .iter()
            .enumerate()
            .map(|(i, &(left, right))| {
                let mut gap = utilities[left.index()] - utilities[right.index()];
                if self.noise > 0.0 {
                    let mut rng = Rng::derive(self.seed, &[fnv1a(ref_id), i as u64]);
                    gap += self.noise * gaussian(&mut rng);
                }
                let verdict = if gap.abs() < self.epsilon || gap == 0.0 {
                    Verdict::Equal
                } else if gap > 0.0 {
                    Verdict::Left
                } else {
                    Verdict::Right
                };
                LabelRecord {
                    ref_id: ref_id.to_string(),
                    left,
                    right,
                    verdict,
                    annotator_id: self.annotator_id.clone(),
                    timestamp: i as u64,
                }
            })
            .collect()
    }
}

/// Labels for one reference from the oracle's view of its 22 variants.
pub fn simulate_labels(
    oracle: &SyntheticAnnotator,
    design: &PairDesign,
    reference: &ReferenceImage,
    filtered: &BTreeMap<FilterId, Image>,
) -> Result<Vec<LabelRecord>> {
    let utilities = oracle.utilities(reference, filtered)?;
    Ok(oracle.judge(&reference.id, design, &utilities))
}

/// References plus their decoded images, kept in memory.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub refs: Vec<ReferenceImage>,
    pub images: BTreeMap<String, Image>,
}

impl Corpus {
    pub fn image(&self, ref_id: &str) -> Result<&Image> {
        self.images
            .get(ref_id)
            .ok_or_else(|| Error::MissingFile(PathBuf::from(ref_id)))
    }

    pub fn reference(&self, ref_id: &str) -> Option<&ReferenceImage> {
        self.refs.iter().find(|r| r.id == ref_id)
    }

    /// All 22 filtered variants of one reference.
    pub fn filtered(&self, ref_id: &str) -> Result<BTreeMap<FilterId, Image>> {
        let img = self.image(ref_id)?;
        Ok(FilterId::all().map(|f| (f, apply_filter(img, f))).collect())
    }

    /// Writes `refs/<id>.png` and `references.jsonl` under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        for r in &self.refs {
            save_image(self.image(&r.id)?, root.join(&r.path))?;
        }
        manifest::write(root.join("references.jsonl"), REFERENCES_KIND, &self.refs)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let refs: Vec<ReferenceImage> = manifest::read(root.join("references.jsonl"), REFERENCES_KIND)?;
        let mut images = BTreeMap::new();
        for r in &refs {
            images.insert(r.id.clone(), load_image(root.join(&r.path))?);
        }
        Ok(Self { refs, images })
    }

    /// Oracle labels for every reference, in reference order.
    pub fn simulate(&self, oracle: &SyntheticAnnotator, design: &PairDesign) -> Result<Vec<LabelRecord>> {
        let mut out = Vec::new();
        for r in &self.refs {
            out.extend(simulate_labels(oracle, design, r, &self.filtered(&r.id)?)?);
        }
        Ok(out)
    }
}

/// `per_category` procedural references for each of the 8 categories.
pub fn synthesize_corpus(per_category: usize, side: usize, seed: u64) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for cat in Category::ALL {
        for i in 0..per_category {
            let id = format!("{}_{i:04}", cat.name());
            let mut rng = Rng::derive(seed, &[cat.index() as u64, i as u64]);
            let img = procedural_reference(cat, side, &mut rng)?;
            corpus.refs.push(ReferenceImage {
                path: format!("refs/{id}.png"),
                id: id.clone(),
                category: cat,
            });
            corpus.images.insert(id, img);
        }
    }
    Ok(corpus)
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let s = s.clamp(0.0, 1.0);
    let v = v.clamp(0.0, 1.0);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

/// Smooth random field on `[0,1]^2` from bilinear interpolation of a grid.
struct ValueNoise {
    cells: usize,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(cells: usize, rng: &mut Rng) -> Self {
        let grid = (0..(cells + 1) * (cells + 1)).map(|_| rng.uniform()).collect();
        Self { cells, grid }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells;
        let (fx, fy) = (u.clamp(0.0, 1.0) * n as f64, v.clamp(0.0, 1.0) * n as f64);
        let (x0, y0) = ((fx as usize).min(n - 1), (fy as usize).min(n - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let g = |x: usize, y: usize| self.grid[y * (n + 1) + x];
        let top = g(x0, y0) * (1.0 - tx) + g(x0 + 1, y0) * tx;
        let bottom = g(x0, y0 + 1) * (1.0 - tx) + g(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn range(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

/// A reference image whose palette, layout and texture depend on `category`.
pub fn procedural_reference(category: Category, side: usize, rng: &mut Rng) -> Result<Image> {
    let coarse = ValueNoise::new(4, rng);
    let fine = ValueNoise::new(16, rng);
    let light = range(rng, 0.8, 1.15);
    let (cx, cy) = (range(rng, 0.35, 0.65), range(rng, 0.35, 0.65));
    let hue = range(rng, -0.04, 0.04);
    let size = range(rng, 0.22, 0.34);
    let accent = rng.below_incl(2);
    let horizon = range(rng, 0.4, 0.6);
    let grid = 3 + rng.below_incl(3);
    let objects: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| (range(rng, 0.2, 0.8), range(rng, 0.45, 0.75), range(rng, 0.08, 0.16), range(rng, 0.0, 1.0)))
        .collect();
    let heights: Vec<f64> = (0..8).map(|_| range(rng, 0.25, 0.75)).collect();
    let s = side as f64;
    Image::from_fn(side, side, |x, y| {
        let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
        let n1 = coarse.at(u, v) - 0.5;
        let n2 = fine.at(u, v) - 0.5;
        let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
        let px = match category {
            Category::Animal => {
                let body = ((u - cx) / 1.3).powi(2) + (v - cy).powi(2) < size * size;
                if body {
                    hsv(0.08 + hue, 0.6 + 0.2 * n2, (0.5 + 0.5 * n2) * light)
                } else {
                    hsv(0.27 + hue, 0.45 + 0.2 * n1, (0.4 + 0.2 * n1) * light)
                }
            }
            Category::Flora => {
                let angle = (v - cy).atan2(u - cx);
                let petal = size * (0.7 + 0.3 * (6.0 * angle).cos());
                let flower_hue = [0.93, 0.14, 0.78][accent] + hue;
                if d < size * 0.25 {
                    hsv(0.13, 0.9, 0.9 * light)
                } else if d < petal {
                    hsv(flower_hue, 0.8 + 0.1 * n2, (0.85 + 0.1 * n2) * light)
                } else {
                    hsv(0.33 + hue, 0.6, (0.3 + 0.2 * n1) * light)
                }
            }
            Category::Landscape => {
                let ridge = horizon + 0.08 * (u * 9.0 + 3.0 * n1).sin();
                if v < ridge {
                    hsv(0.58 + hue, 0.55 - 0.35 * v, (0.95 - 0.2 * v) * light)
                } else {
                    hsv(0.25 + hue + 0.1 * n1, 0.55, (0.45 + 0.25 * n1) * light)
                }
            }
            Category::Architecture => {
                let cell = 1.0 / grid as f64;
                let (wx, wy) = ((u / cell).fract(), (v / cell).fract());
                if v < 0.12 {
                    hsv(0.58, 0.3, 0.85 * light)
                } else if (0.3..0.7).contains(&wx) && (0.25..0.75).contains(&wy) {
                    hsv(0.6, 0.2, 0.2 * light)
                } else {
                    hsv(0.1 + hue, 0.15, (0.72 + 0.05 * n2) * light)
                }
            }
            Category::FoodAndDrink => {
                if d < size * 0.75 {
                    hsv(0.03 + hue + 0.04 * n2, 0.8, (0.7 + 0.2 * n2) * light)
                } else if d < size * 1.25 {
                    hsv(0.1, 0.05, 0.95 * light)
                } else {
                    hsv(0.07 + hue, 0.55, (0.45 + 0.15 * n1) * light)
                }
            }
            Category::Portrait => {
                let face = ((u - cx) / 0.8).powi(2) + ((v - cy) / 1.1).powi(2) < size * size;
                if face && v < cy - size * 0.6 {
                    hsv(0.07, 0.6, 0.2 * light)
                } else if face {
                    let shade = 1.0 - 0.8 * d;
                    hsv(0.06 + hue * 0.5, 0.4, 0.8 * shade * light)
                } else {
                    hsv(0.6 + hue * 3.0, 0.25, (0.2 + 0.1 * n1) * light)
                }
            }
            Category::Cityscape => {
                let col = ((u * heights.len() as f64) as usize).min(heights.len() - 1);
                let roof = 1.0 - heights[col];
                if v < roof {
                    hsv(0.63, 0.6, (0.12 + 0.2 * v) * light)
                } else {
                    let (wx, wy) = ((u * 32.0).fract(), (v * 24.0).fract());
                    let lit = n2 > -0.1 && wx > 0.4 && wy > 0.5;
                    if lit {
                        hsv(0.13, 0.7, 0.9 * light)
                    } else {
                        hsv(0.62, 0.15, 0.22 * light)
                    }
                }
            }
            Category::StillLife => {
                let hit = objects.iter().find(|&&(ox, oy, r, _)| (u - ox).powi(2) + (v - oy).powi(2) < r * r);
                if let Some(&(_, _, _, h)) = hit {
                    hsv(h, 0.35, 0.6 * light)
                } else if v > 0.7 {
                    hsv(0.08, 0.45, (0.35 + 0.1 * n2) * light)
                } else {
                    hsv(0.1, 0.12, (0.65 - 0.2 * v + 0.05 * n1) * light)
                }
            }
        };
        let grain = (0.03 * n2) as f32;
        [px[0] + grain, px[1] + grain, px[2] + grain]
    })
}
