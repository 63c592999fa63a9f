//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three interactive operations: previewing any of the 22 filters on an
//! uploaded image, scoring one reference from a sheet of 33 pairwise votes,
//! and estimating random-guess top-K accuracy for a ground-truth size.

use std::collections::BTreeSet;

use wasm_bindgen::prelude::*;

use filtrank::dataset::{ground_truth, pair_design, score_images, LabelRecord, Verdict};
use filtrank::evaluation::random_baseline;
use filtrank::filters::{apply_filter, FilterId, FILTER_COUNT};
use filtrank::imagecore::Image;
use filtrank::rng::Rng;

#[wasm_bindgen]
pub fn filter_names() -> Vec<String> {
    FilterId::all().map(|f| f.name().to_string()).collect()
}

/// Filters an RGBA buffer as produced by a canvas; alpha passes through.
#[wasm_bindgen]
pub fn apply_filter_rgba(rgba: &[u8], width: u32, height: u32, filter: &str) -> Result<Vec<u8>, String> {
    let (w, h) = (width as usize, height as usize);
    if rgba.len() != w * h * 4 {
        return Err(format!("expected {} bytes for {w}x{h} RGBA, got {}", w * h * 4, rgba.len()));
    }
    let id = FilterId::from_name(filter).map_err(|e| e.to_string())?;
    let rgb: Vec<u8> = rgba.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
    let img = Image::from_rgb8(w, h, &rgb).map_err(|e| e.to_string())?;
    let out = apply_filter(&img, id).to_rgb8();
    Ok(out
        .chunks_exact(3)
        .zip(rgba.chunks_exact(4))
        .flat_map(|(c, src)| [c[0], c[1], c[2], src[3]])
        .collect())
}

/// The 33 compared pairs as `"Left Right"` strings.
#[wasm_bindgen]
pub fn design_pairs() -> Vec<String> {
    pair_design().edges().iter().map(|(a, b)| format!("{a} {b}")).collect()
}

/// Per-filter scores from one vote per designed pair: `L` (left wins),
/// `R` (right wins) or `E` (equal), in design order.
#[wasm_bindgen]
pub fn score_votes(votes: &str) -> Result<Vec<i32>, String> {
    let design = pair_design();
    let verdicts: Vec<Verdict> = votes
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match c.to_ascii_uppercase() {
            'L' => Ok(Verdict::Left),
            'R' => Ok(Verdict::Right),
            'E' => Ok(Verdict::Equal),
            other => Err(format!("unknown vote `{other}`")),
        })
        .collect::<Result<_, _>>()?;
    if verdicts.len() != design.edges().len() {
        return Err(format!("need {} votes, got {}", design.edges().len(), verdicts.len()));
    }
    let labels: Vec<LabelRecord> = design
        .edges()
        .iter()
        .zip(verdicts)
        .enumerate()
        .map(|(i, (&(left, right), verdict))| LabelRecord {
            ref_id: "demo".into(),
            left,
            right,
            verdict,
            annotator_id: "browser".into(),
            timestamp: i as u64,
        })
        .collect();
    let scores = score_images("demo", &labels, &design).map_err(|e| e.to_string())?;
    Ok(scores.iter().map(|s| s.score).collect())
}

/// Names of the filters that won all three of their comparisons.
#[wasm_bindgen]
pub fn best_filters(votes: &str) -> Result<Vec<String>, String> {
    let scores = score_votes(votes)?;
    let records: Vec<_> = FilterId::all()
        .zip(&scores)
        .map(|(f, &score)| filtrank::dataset::FilterScore {
            ref_id: "demo".into(),
            filter: f,
            score,
        })
        .collect();
    Ok(ground_truth(&records).into_iter().map(|f| f.name().to_string()).collect())
}

/// Top-`k` accuracy of a uniformly random ranking when each reference has
/// `gt_size` equally good filters.
#[wasm_bindgen]
pub fn random_guess_accuracy(gt_size: u32, k: u32, trials: u32, seed: u32) -> Result<f64, String> {
    let n = gt_size as usize;
    if n == 0 || n > FILTER_COUNT || k == 0 || k as usize > FILTER_COUNT {
        return Err(format!("gt_size and k must be in 1..={FILTER_COUNT}"));
    }
    let set: BTreeSet<FilterId> = FilterId::all().take(n).collect();
    Ok(random_baseline(&[set], k as usize, trials as usize, &mut Rng::new(seed as u64)))
}
