//! Glue between stored artifacts and the training and evaluation loops.

use std::collections::{BTreeMap, BTreeSet};

use crate::dataset::{
    ground_truth, pair_design, quality_labels, score_log, split, training_pairs, Corpus, FilterScore, LabelRecord,
    ReferenceImage, SplitPart, SplitRecord,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::filters::{FilterId, FILTER_COUNT};
use crate::models::Mode;
use crate::rng::Rng;
use crate::trainer::{TrainConfig, TrainData, Trainer};

/// Every `HELD_OUT_STRIDE`-th test pair is scored after each epoch.
pub const HELD_OUT_STRIDE: usize = 4;

pub const SPLIT_RATIO: (usize, usize) = (7, 1);

pub fn split_records(refs: &[ReferenceImage], seed: u64) -> Result<Vec<SplitRecord>> {
    let (train, test) = split(refs, SPLIT_RATIO, &mut Rng::derive(seed, &[0x5350_4c54]))?;
    let tag = |rs: Vec<ReferenceImage>, part| {
        rs.into_iter()
            .map(move |r| SplitRecord { ref_id: r.id, part })
            .collect::<Vec<_>>()
    };
    let mut out = tag(train, SplitPart::Train);
    out.extend(tag(test, SplitPart::Test));
    out.sort_by(|a, b| a.ref_id.cmp(&b.ref_id));
    Ok(out)
}

/// `(train ids, test ids)`.
pub fn partition(records: &[SplitRecord]) -> (BTreeSet<String>, BTreeSet<String>) {
    let ids = |part| {
        records
            .iter()
            .filter(|r| r.part == part)
            .map(|r| r.ref_id.clone())
            .collect()
    };
    (ids(SplitPart::Train), ids(SplitPart::Test))
}

/// Scores of the complete references in `labels`, skipping incomplete ones.
pub fn complete_scores(labels: &[LabelRecord]) -> BTreeMap<String, Vec<FilterScore>> {
    let design = pair_design();
    crate::dataset::group_by_ref(labels)
        .into_iter()
        .filter_map(|(id, ls)| crate::dataset::score_images(&id, &ls, &design).ok().map(|s| (id, s)))
        .collect()
}

/// Ground truth of every test reference with a complete label set.
pub fn test_ground_truth(
    labels: &[LabelRecord],
    test: &BTreeSet<String>,
) -> Result<BTreeMap<String, BTreeSet<FilterId>>> {
    let scores = complete_scores(labels);
    let gt: BTreeMap<_, _> = test
        .iter()
        .filter_map(|id| scores.get(id).map(|s| (id.clone(), ground_truth(s))))
        .collect();
    if gt.is_empty() {
        return Err(Error::EmptySource);
    }
    Ok(gt)
}

/// Training stream for `mode`. Pair modes use the decisive labels of the
/// training references; the binary mode labels the top half of each
/// reference's filters by annotation score as high quality.
pub fn train_data<'a>(
    corpus: &'a Corpus,
    labels: &[LabelRecord],
    split: &[SplitRecord],
    mode: Mode,
) -> Result<TrainData<'a>> {
    let (train, test) = partition(split);
    let pairs = training_pairs(labels);
    let mut data = TrainData {
        corpus: Some(corpus),
        test_refs: test.clone(),
        held_out: pairs
            .iter()
            .filter(|p| test.contains(&p.ref_id))
            .step_by(HELD_OUT_STRIDE)
            .cloned()
            .collect(),
        ..TrainData::default()
    };
    match mode {
        Mode::Binary => {
            let scores = score_log(
                &labels
                    .iter()
                    .filter(|l| train.contains(&l.ref_id))
                    .cloned()
                    .collect::<Vec<_>>(),
                &pair_design(),
            )?;
            for (id, s) in scores {
                let mut u = [0.0; FILTER_COUNT];
                for fs in s {
                    u[fs.filter.index()] = fs.score as f64;
                }
                data.quality.extend(quality_labels(&id, &u));
            }
        }
        Mode::PairComp | Mode::PairCompCate => {
            data.pairs = pairs.into_iter().filter(|p| train.contains(&p.ref_id)).collect();
        }
    }
    Ok(data)
}

/// Split, train and evaluate one configuration on a labelled corpus.
pub fn run_experiment(
    corpus: &Corpus,
    labels: &[LabelRecord],
    cfg: TrainConfig,
    split_seed: u64,
    trials: usize,
) -> Result<(Trainer, EvalReport)> {
    let split = split_records(&corpus.refs, split_seed)?;
    let (_, test) = partition(&split);
    let data = train_data(corpus, labels, &split, cfg.mode)?;
    let gt = test_ground_truth(labels, &test)?;
    let method = cfg.mode.to_string();
    let seed = cfg.seed;
    let mut trainer = Trainer::new(cfg)?;
    trainer.fit(&data)?;
    let report = evaluate(&method, trainer.model(), corpus, &gt, trials, seed)?;
    Ok((trainer, report))
}
