//! Filter ranking, top-K accuracy, the random baseline and filter-preference
//! histograms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Category, Corpus};
use crate::error::{Error, Result};
use crate::filters::{apply_filter, FilterId, FILTER_COUNT};
use crate::imagecore::Image;
use crate::models::{test_view, ColumnModel, Embedding, Mode};
use crate::objectives::paircomp_loss;
use crate::rng::Rng;

pub const REPORT_KS: [usize; 3] = [1, 3, 5];

/// All 22 filters, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterRanking {
    pub ref_id: String,
    pub entries: Vec<(FilterId, f64)>,
}

impl FilterRanking {
    /// Sorts by score, descending; equal scores keep filter index order.
    pub fn from_scores(ref_id: &str, scores: &[f64]) -> Result<Self> {
        if scores.len() != FILTER_COUNT {
            return Err(Error::DimMismatch(scores.len(), FILTER_COUNT));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteValue(format!("ranking scores for {ref_id}")));
        }
        let mut entries: Vec<(FilterId, f64)> = FilterId::all().zip(scores.iter().copied()).collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(Self {
            ref_id: ref_id.to_string(),
            entries,
        })
    }

    pub fn top(&self, k: usize) -> &[(FilterId, f64)] {
        &self.entries[..k.min(self.entries.len())]
    }

    pub fn order(&self) -> Vec<FilterId> {
        self.entries.iter().map(|e| e.0).collect()
    }
}

/// Applies every filter to `reference`, scores the centred test views and
/// ranks them. `mode` must match the model's training mode.
pub fn rank_filters(model: &ColumnModel<f32>, ref_id: &str, reference: &Image, mode: Mode) -> Result<FilterRanking> {
    if mode != model.mode() {
        return Err(Error::ModelModeMismatch(format!(
            "requested {mode} ranking from a {} model",
            model.mode()
        )));
    }
    let arch = *model.arch();
    let views: Vec<Image> = FilterId::all()
        .map(|f| test_view(&arch, &apply_filter(reference, f)))
        .collect::<Result<_>>()?;
    let reference_view = match mode {
        Mode::PairCompCate => Some(test_view(&arch, reference)?),
        _ => None,
    };
    let scores = model.score_candidates(&views, reference_view.as_ref())?;
    FilterRanking::from_scores(ref_id, &scores)
}

/// Ranking by `||f||^2` of each filter's embedding.
pub fn rank_embeddings<E: Embedding>(ref_id: &str, embeddings: &[E]) -> Result<FilterRanking> {
    let scores: Vec<f64> = embeddings.iter().map(Embedding::score).collect();
    FilterRanking::from_scores(ref_id, &scores)
}

/// Round-robin over all 231 filter pairs: `a` beats `b` when
/// `D(a, b) = ||f_a||^2 - ||f_b||^2` is positive, or zero with `a` first by
/// index. Filters are ordered by number of wins.
pub fn tournament<E: Embedding>(ref_id: &str, embeddings: &[E]) -> Result<FilterRanking> {
    if embeddings.len() != FILTER_COUNT {
        return Err(Error::DimMismatch(embeddings.len(), FILTER_COUNT));
    }
    let mut wins = [0usize; FILTER_COUNT];
    for a in 0..FILTER_COUNT {
        for b in a + 1..FILTER_COUNT {
            let d = -paircomp_loss(&embeddings[a], &embeddings[b])?.loss;
            if d >= 0.0 {
                wins[a] += 1;
            } else {
                wins[b] += 1;
            }
        }
    }
    let mut order: Vec<usize> = (0..FILTER_COUNT).collect();
    order.sort_by(|&a, &b| wins[b].cmp(&wins[a]).then(a.cmp(&b)));
    Ok(FilterRanking {
        ref_id: ref_id.to_string(),
        entries: order
            .into_iter()
            .map(|i| (FilterId::new(i).expect("valid index"), wins[i] as f64))
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub accuracy: f64,
    /// References counted in the denominator.
    pub evaluated: usize,
    /// References skipped because their ground truth is empty.
    pub empty_ground_truth: usize,
}

/// Share of references whose top `k` intersects the ground truth.
pub fn topk_accuracy(
    rankings: &[FilterRanking],
    ground_truth: &BTreeMap<String, BTreeSet<FilterId>>,
    k: usize,
) -> Result<TopK> {
    let (mut hits, mut evaluated, mut empty) = (0, 0, 0);
    for r in rankings {
        let gt = ground_truth
            .get(&r.ref_id)
            .ok_or_else(|| Error::MissingGroundTruth(r.ref_id.clone()))?;
        if gt.is_empty() {
            empty += 1;
            continue;
        }
        evaluated += 1;
        hits += r.top(k).iter().any(|(f, _)| gt.contains(f)) as usize;
    }
    Ok(TopK {
        k,
        accuracy: if evaluated == 0 { 0.0 } else { hits as f64 / evaluated as f64 },
        evaluated,
        empty_ground_truth: empty,
    })
}

/// Monte-Carlo top-`k` accuracy of a uniformly random ranking. Each trial
/// draws a reference with non-empty ground truth and a random `k`-subset.
pub fn random_baseline(ground_truth: &[BTreeSet<FilterId>], k: usize, trials: usize, rng: &mut Rng) -> f64 {
    let sets: Vec<&BTreeSet<FilterId>> = ground_truth.iter().filter(|s| !s.is_empty()).collect();
    if sets.is_empty() || trials == 0 {
        return 0.0;
    }
    let k = k.min(FILTER_COUNT);
    let mut hits = 0usize;
    let mut deck: Vec<FilterId> = FilterId::all().collect();
    for _ in 0..trials {
        let gt = sets[rng.below_incl(sets.len() - 1)];
        for i in 0..k {
            let j = i + rng.below_incl(FILTER_COUNT - 1 - i);
            deck.swap(i, j);
        }
        hits += deck[..k].iter().any(|f| gt.contains(f)) as usize;
    }
    hits as f64 / trials as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Global,
    Category,
}

/// What a histogram counts per reference.
pub enum PreferenceSource<'a> {
    /// Every ground-truth filter of each reference.
    GroundTruth(&'a [(Category, BTreeSet<FilterId>)]),
    /// The top-1 prediction of each reference.
    TopOne(&'a [(Category, FilterId)]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub group: String,
    pub refs: usize,
    /// Per filter, the share of references selecting it.
    pub ratios: Vec<f64>,
}

pub fn preference_distribution(source: PreferenceSource, group_by: GroupBy) -> Result<Vec<Histogram>> {
    let rows: Vec<(Category, Vec<FilterId>)> = match source {
        PreferenceSource::GroundTruth(s) => s.iter().map(|(c, g)| (*c, g.iter().copied().collect())).collect(),
        PreferenceSource::TopOne(s) => s.iter().map(|(c, f)| (*c, vec![*f])).collect(),
    };
    if rows.is_empty() {
        return Err(Error::EmptySource);
    }
    let groups: Vec<(String, Option<Category>)> = match group_by {
        GroupBy::Global => vec![("all".into(), None)],
        GroupBy::Category => Category::ALL.iter().map(|c| (c.name().into(), Some(*c))).collect(),
    };
    Ok(groups
        .into_iter()
        .map(|(name, cat)| {
            let mut counts = vec![0usize; FILTER_COUNT];
            let mut refs = 0;
            for (c, picks) in &rows {
                if cat.is_none_or(|want| want == *c) {
                    refs += 1;
                    for f in picks {
                        counts[f.index()] += 1;
                    }
                }
            }
            Histogram {
                group: name,
                refs,
                ratios: counts
                    .into_iter()
                    .map(|n| if refs == 0 { 0.0 } else { n as f64 / refs as f64 })
                    .collect(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub category: Category,
    pub topk: Vec<TopK>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub topk: Vec<TopK>,
    /// Random-ranking accuracy for the same K values and ground truth.
    pub random: Vec<f64>,
    pub per_category: Vec<CategoryAccuracy>,
    pub ground_truth_histograms: Vec<Histogram>,
    pub predicted_histograms: Vec<Histogram>,
    pub mean_ground_truth_size: f64,
    pub rankings: Vec<FilterRanking>,
}

fn percent(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

impl EvalReport {
    pub fn top(&self, k: usize) -> Option<f64> {
        self.topk.iter().find(|t| t.k == k).map(|t| t.accuracy)
    }

    /// Method rows against Top-1/3/5 columns.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let head: Vec<String> = self.topk.iter().map(|t| format!("Top-{}", t.k)).collect();
        let _ = writeln!(out, "{:<24}{}", "Method", head.iter().map(|h| format!("{h:>10}")).collect::<String>());
        let row = |name: &str, vals: Vec<f64>| {
            format!("{name:<24}{}\n", vals.iter().map(|&v| format!("{:>10}", percent(v))).collect::<String>())
        };
        out.push_str(&row("Random Guess", self.random.clone()));
        out.push_str(&row(&self.method, self.topk.iter().map(|t| t.accuracy).collect()));
        if let Some(t) = self.topk.first() {
            let _ = writeln!(
                out,
                "evaluated {} references, {} with empty ground truth, mean |GT| = {:.2}",
                t.evaluated, t.empty_ground_truth, self.mean_ground_truth_size
            );
        }
        for c in &self.per_category {
            out.push_str(&row(
                &format!("  {}", c.category),
                c.topk.iter().map(|t| t.accuracy).collect(),
            ));
        }
        out
    }

    /// `group,filter,ground_truth,predicted` rows for plotting.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("group,filter,ground_truth,predicted\n");
        for (gt, pred) in self.ground_truth_histograms.iter().zip(&self.predicted_histograms) {
            for f in FilterId::all() {
                let _ = writeln!(
                    out,
                    "{},{},{:.6},{:.6}",
                    gt.group,
                    f,
                    gt.ratios[f.index()],
                    pred.ratios[f.index()]
                );
            }
        }
        out
    }
}

/// Ranks every reference in `refs` across the available cores.
pub fn rank_all(model: &ColumnModel<f32>, corpus: &Corpus, refs: &[String]) -> Result<Vec<FilterRanking>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).clamp(1, refs.len().max(1));
    let chunk = refs.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<FilterRanking>>> = std::thread::scope(|s| {
        let handles: Vec<_> = refs
            .chunks(chunk)
            .map(|ids| {
                s.spawn(move || {
                    ids.iter()
                        .map(|id| rank_filters(model, id, corpus.image(id)?, model.mode()))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(refs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Full report for the test references of `ground_truth`.
pub fn evaluate(
    method: &str,
    model: &ColumnModel<f32>,
    corpus: &Corpus,
    ground_truth: &BTreeMap<String, BTreeSet<FilterId>>,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    let ids: Vec<String> = ground_truth.keys().cloned().collect();
    if ids.is_empty() {
        return Err(Error::EmptySource);
    }
    let rankings = rank_all(model, corpus, &ids)?;
    report_from_rankings(method, corpus, rankings, ground_truth, trials, seed)
}

pub fn report_from_rankings(
    method: &str,
    corpus: &Corpus,
    rankings: Vec<FilterRanking>,
    ground_truth: &BTreeMap<String, BTreeSet<FilterId>>,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    let category = |id: &str| {
        corpus
            .reference(id)
            .map(|r| r.category)
            .ok_or_else(|| Error::MissingFile(id.into()))
    };
    let topk = REPORT_KS
        .iter()
        .map(|&k| topk_accuracy(&rankings, ground_truth, k))
        .collect::<Result<Vec<_>>>()?;
    let sets: Vec<BTreeSet<FilterId>> = rankings
        .iter()
        .map(|r| ground_truth[&r.ref_id].clone())
        .collect();
    let random = REPORT_KS
        .iter()
        .map(|&k| random_baseline(&sets, k, trials, &mut Rng::derive(seed, &[k as u64])))
        .collect();
    let mut per_category = Vec::new();
    for cat in Category::ALL {
        let subset: Vec<FilterRanking> = rankings
            .iter()
            .filter(|r| category(&r.ref_id).is_ok_and(|c| c == cat))
            .cloned()
            .collect();
        if subset.is_empty() {
            continue;
        }
        per_category.push(CategoryAccuracy {
            category: cat,
            topk: REPORT_KS
                .iter()
                .map(|&k| topk_accuracy(&subset, ground_truth, k))
                .collect::<Result<_>>()?,
        });
    }
    let gt_rows: Vec<(Category, BTreeSet<FilterId>)> = rankings
        .iter()
        .map(|r| Ok((category(&r.ref_id)?, ground_truth[&r.ref_id].clone())))
        .collect::<Result<_>>()?;
    let pred_rows: Vec<(Category, FilterId)> = rankings
        .iter()
        .map(|r| Ok((category(&r.ref_id)?, r.entries[0].0)))
        .collect::<Result<_>>()?;
    let mut ground_truth_histograms = preference_distribution(PreferenceSource::GroundTruth(&gt_rows), GroupBy::Global)?;
    ground_truth_histograms.extend(preference_distribution(PreferenceSource::GroundTruth(&gt_rows), GroupBy::Category)?);
    let mut predicted_histograms = preference_distribution(PreferenceSource::TopOne(&pred_rows), GroupBy::Global)?;
    predicted_histograms.extend(preference_distribution(PreferenceSource::TopOne(&pred_rows), GroupBy::Category)?);
    let mean_ground_truth_size = sets.iter().map(BTreeSet::len).sum::<usize>() as f64 / sets.len() as f64;
    Ok(EvalReport {
        method: method.to_string(),
        topk,
        random,
        per_category,
        ground_truth_histograms,
        predicted_histograms,
        mean_ground_truth_size,
        rankings,
    })
}
