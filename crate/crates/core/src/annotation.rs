//! Pairwise-comparison task building, quality control and the label queue.
//!
//! A HIT holds nine pending pairs plus one of them again with the images
//! swapped, and a small addition problem. A submission is accepted only if
//! every question is answered, at most one answer is `equal`, the swapped
//! duplicate agrees with its original and the sum is right. Accepted answers
//! go to an append-only label log; rejected HITs return their pairs to the
//! queue.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::dataset::{filtered_id, score_log, FilterScore, LabelRecord, PairDesign, PairRecord, Verdict, LABELS_KIND};
use crate::error::{Error, Result};
use crate::filters::FilterId;
use crate::manifest;
use crate::rng::Rng;

pub const QUESTIONS_PER_HIT: usize = 10;
pub const UNIQUE_PER_HIT: usize = 9;
pub const MATH_MIN: u32 = 1;
pub const MATH_MAX: u32 = 20;

pub const QUEUE_KIND: &str = "queue";
pub const HITS_KIND: &str = "hits";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const QUEUE_FILE: &str = "queue.jsonl";
pub const HITS_FILE: &str = "hits.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub ref_id: String,
    pub left: FilterId,
    pub right: FilterId,
}

impl Question {
    fn from_pair(p: &PairRecord) -> Self {
        Self {
            ref_id: p.ref_id.clone(),
            left: p.left,
            right: p.right,
        }
    }

    pub fn pair(&self) -> PairRecord {
        PairRecord {
            ref_id: self.ref_id.clone(),
            left: self.left,
            right: self.right,
        }
    }

    fn swapped(&self) -> Self {
        Self {
            ref_id: self.ref_id.clone(),
            left: self.right,
            right: self.left,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MathQuestion {
    pub a: u32,
    pub b: u32,
}

impl MathQuestion {
    pub fn answer(&self) -> i64 {
        self.a as i64 + self.b as i64
    }
}

/// A task as built by the server. The duplicate's position and the filler
/// flags stay server-side; clients get a [`HitView`].
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub hit_id: String,
    pub questions: Vec<Question>,
    pub math: MathQuestion,
    duplicate_index: usize,
    original_index: usize,
    /// Questions re-asking already-labelled pairs to fill a short HIT.
    filler: Vec<bool>,
}

impl Hit {
    pub fn duplicate_index(&self) -> usize {
        self.duplicate_index
    }

    pub fn original_index(&self) -> usize {
        self.original_index
    }

    pub fn is_filler(&self, question: usize) -> bool {
        self.filler[question]
    }

    /// Pending pairs this HIT has checked out of the queue.
    pub fn checked_out(&self) -> Vec<PairRecord> {
        (0..self.questions.len())
            .filter(|&i| i != self.duplicate_index && !self.filler[i])
            .map(|i| self.questions[i].pair())
            .collect()
    }

    pub fn view(&self) -> HitView {
        HitView {
            hit_id: self.hit_id.clone(),
            questions: self
                .questions
                .iter()
                .map(|q| QuestionView {
                    ref_id: q.ref_id.clone(),
                    left: q.left,
                    right: q.right,
                    left_image: filtered_id(&q.ref_id, q.left),
                    right_image: filtered_id(&q.ref_id, q.right),
                })
                .collect(),
            math: self.math,
        }
    }
}

/// What the annotator's client receives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitView {
    pub hit_id: String,
    pub questions: Vec<QuestionView>,
    pub math: MathQuestion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionView {
    pub ref_id: String,
    pub left: FilterId,
    pub right: FilterId,
    pub left_image: String,
    pub right_image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub hit_id: String,
    /// One entry per question; `None` is unanswered.
    pub answers: Vec<Option<Verdict>>,
    pub math_answer: Option<i64>,
    pub annotator_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    Incomplete,
    TooManyEqual,
    DuplicateInconsistent,
    MathFailed,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "reasons", rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject(Vec<RejectReason>),
}

impl Decision {
    pub fn accepted(&self) -> bool {
        matches!(self, Decision::Accept)
    }
}

/// Builds a HIT from the front of `pending`. When fewer than nine pairs are
/// pending the rest is filled with random distinct `fillers`, whose answers
/// are later discarded.
pub fn build_hit(hit_id: &str, pending: &[PairRecord], fillers: &[PairRecord], rng: &mut Rng) -> Result<Hit> {
    let take = pending.len().min(UNIQUE_PER_HIT);
    let mut chosen: Vec<PairRecord> = pending[..take].to_vec();
    let mut filler = vec![false; take];
    let short = |available| Error::InsufficientPendingPairs {
        available,
        needed: UNIQUE_PER_HIT,
    };
    if take == 0 {
        return Err(short(0));
    }
    if take < UNIQUE_PER_HIT {
        let taken: BTreeSet<&PairRecord> = chosen.iter().collect();
        let mut pool: Vec<&PairRecord> = fillers.iter().filter(|p| !taken.contains(p)).collect();
        pool.sort();
        pool.dedup();
        let need = UNIQUE_PER_HIT - take;
        if pool.len() < need {
            return Err(short(take + pool.len()));
        }
        for i in 0..need {
            let j = i + rng.below_incl(pool.len() - 1 - i);
            pool.swap(i, j);
        }
        chosen.extend(pool[..need].iter().map(|p| (*p).clone()));
        filler.extend(std::iter::repeat_n(true, need));
    }
    let mut questions: Vec<Question> = chosen.iter().map(Question::from_pair).collect();
    let original = rng.below_incl(UNIQUE_PER_HIT - 1);
    let duplicate = rng.below_incl(UNIQUE_PER_HIT);
    let dup = questions[original].swapped();
    questions.insert(duplicate, dup);
    filler.insert(duplicate, false);
    let original_index = if original >= duplicate { original + 1 } else { original };
    let math = MathQuestion {
        a: MATH_MIN + rng.below_incl((MATH_MAX - MATH_MIN) as usize) as u32,
        b: MATH_MIN + rng.below_incl((MATH_MAX - MATH_MIN) as usize) as u32,
    };
    Ok(Hit {
        hit_id: hit_id.to_string(),
        questions,
        math,
        duplicate_index: duplicate,
        original_index,
        filler,
    })
}

/// The three quality checks plus completeness; every failing check is
/// reported.
pub fn validate_submission(hit: &Hit, sub: &Submission) -> Decision {
    let mut reasons = Vec::new();
    if sub.answers.len() != hit.questions.len() || sub.answers.iter().any(Option::is_none) {
        reasons.push(RejectReason::Incomplete);
    }
    let equal = sub.answers.iter().filter(|a| **a == Some(Verdict::Equal)).count();
    if equal > 1 {
        reasons.push(RejectReason::TooManyEqual);
    }
    let original = sub.answers.get(hit.original_index).copied().flatten();
    let duplicate = sub.answers.get(hit.duplicate_index).copied().flatten();
    if let (Some(o), Some(d)) = (original, duplicate) {
        if d.swapped() != o {
            reasons.push(RejectReason::DuplicateInconsistent);
        }
    }
    if sub.math_answer != Some(hit.math.answer()) {
        reasons.push(RejectReason::MathFailed);
    }
    if reasons.is_empty() {
        Decision::Accept
    } else {
        Decision::Reject(reasons)
    }
}

/// Label records for an accepted submission: one per checked-out pair,
/// duplicate and filler answers dropped. Pairs answered `error` come back
/// separately so they can be asked again.
pub fn record_labels(hit: &Hit, sub: &Submission, timestamp: u64) -> (Vec<LabelRecord>, Vec<PairRecord>) {
    let (mut labels, mut retry) = (Vec::new(), Vec::new());
    for (i, q) in hit.questions.iter().enumerate() {
        if i == hit.duplicate_index || hit.filler[i] {
            continue;
        }
        match sub.answers.get(i).copied().flatten() {
            Some(Verdict::Error) | None => retry.push(q.pair()),
            Some(verdict) => labels.push(LabelRecord {
                ref_id: q.ref_id.clone(),
                left: q.left,
                right: q.right,
                verdict,
                annotator_id: sub.annotator_id.clone(),
                timestamp,
            }),
        }
    }
    (labels, retry)
}

/// Answers every question of `view` with `judge` and solves the sum.
pub fn simulated_submission(
    view: &HitView,
    annotator_id: &str,
    mut judge: impl FnMut(&QuestionView) -> Verdict,
) -> Submission {
    Submission {
        hit_id: view.hit_id.clone(),
        answers: view.questions.iter().map(|q| Some(judge(q))).collect(),
        math_answer: Some(view.math.answer()),
        annotator_id: annotator_id.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    /// Never offer a pair to an annotator whose HIT containing it was
    /// rejected.
    #[serde(default)]
    pub distinct_reannotator: bool,
    /// Timestamps are label sequence numbers instead of wall-clock seconds.
    #[serde(default)]
    pub sequence_clock: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            distinct_reannotator: false,
            sequence_clock: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitOutcome {
    pub hit_id: String,
    pub annotator_id: String,
    pub decision: Decision,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total_pairs: usize,
    pub pending: usize,
    pub checked_out: usize,
    pub labelled: usize,
    pub open_hits: usize,
    pub accepted: usize,
    pub rejected: usize,
}

struct OpenHit {
    hit: Hit,
    annotator: Option<String>,
}

/// Pending queue, open HITs and the label log, optionally persisted under a
/// directory.
pub struct AnnotationStore {
    cfg: StoreConfig,
    dir: Option<PathBuf>,
    total: usize,
    pending: VecDeque<PairRecord>,
    labelled: BTreeSet<PairRecord>,
    labels: Vec<LabelRecord>,
    open: BTreeMap<String, OpenHit>,
    closed: BTreeSet<String>,
    rejected_by: BTreeMap<PairRecord, BTreeSet<String>>,
    accepted: usize,
    rejected: usize,
    rng: Rng,
}

impl AnnotationStore {
    /// In-memory store over `pairs`.
    pub fn new(pairs: Vec<PairRecord>, cfg: StoreConfig) -> Self {
        let rng = Rng::derive(cfg.seed, &[0x4849_54]);
        Self {
            cfg,
            dir: None,
            total: pairs.len(),
            pending: pairs.into_iter().collect(),
            labelled: BTreeSet::new(),
            labels: Vec::new(),
            open: BTreeMap::new(),
            closed: BTreeSet::new(),
            rejected_by: BTreeMap::new(),
            accepted: 0,
            rejected: 0,
            rng,
        }
    }

    /// Store persisted under `dir`: replays the label and HIT logs and
    /// restores the queue snapshot. Pairs checked out by HITs still open at
    /// shutdown are pending again.
    pub fn open(dir: &Path, pairs: Vec<PairRecord>, cfg: StoreConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut store = Self::new(pairs, cfg);
        store.dir = Some(dir.to_path_buf());
        store.labels = manifest::read_log(dir.join(LABELS_FILE), LABELS_KIND)?;
        store.labelled = store.labels.iter().map(label_pair).collect();
        let outcomes: Vec<HitOutcome> = manifest::read_log(dir.join(HITS_FILE), HITS_KIND)?;
        for o in &outcomes {
            store.closed.insert(o.hit_id.clone());
            match o.decision {
                Decision::Accept => store.accepted += 1,
                Decision::Reject(_) => store.rejected += 1,
            }
        }
        let queue_path = dir.join(QUEUE_FILE);
        if queue_path.exists() {
            let queued: Vec<PairRecord> = manifest::read(&queue_path, QUEUE_KIND)?;
            store.pending = queued.into_iter().collect();
        }
        let labelled = &store.labelled;
        store.pending.retain(|p| !labelled.contains(p));
        store.rng = Rng::derive(store.cfg.seed, &[0x4849_54, outcomes.len() as u64]);
        Ok(store)
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn labels(&self) -> &[LabelRecord] {
        &self.labels
    }

    pub fn pending(&self) -> impl Iterator<Item = &PairRecord> {
        self.pending.iter()
    }

    pub fn progress(&self) -> Progress {
        Progress {
            total_pairs: self.total,
            pending: self.pending.len(),
            checked_out: self.open.values().map(|o| o.hit.checked_out().len()).sum(),
            labelled: self.labelled.len(),
            open_hits: self.open.len(),
            accepted: self.accepted,
            rejected: self.rejected,
        }
    }

    pub fn is_drained(&self) -> bool {
        self.pending.is_empty() && self.open.is_empty()
    }

    pub fn open_hit(&self, hit_id: &str) -> Option<&Hit> {
        self.open.get(hit_id).map(|o| &o.hit)
    }

    /// Checks pending pairs out into a new HIT for `annotator`.
    pub fn next_hit(&mut self, annotator: Option<&str>) -> Result<Hit> {
        let blocked = |p: &PairRecord| {
            self.cfg.distinct_reannotator
                && annotator.is_some_and(|a| self.rejected_by.get(p).is_some_and(|s| s.contains(a)))
        };
        let offer: Vec<PairRecord> = self
            .pending
            .iter()
            .filter(|p| !blocked(p))
            .take(UNIQUE_PER_HIT)
            .cloned()
            .collect();
        let fillers: Vec<PairRecord> = self.labelled.iter().cloned().collect();
        let hit_id = loop {
            let id = format!("{:016x}", self.rng.next_u64());
            if !self.open.contains_key(&id) && !self.closed.contains(&id) {
                break id;
            }
        };
        let hit = build_hit(&hit_id, &offer, &fillers, &mut self.rng)?;
        let taken: BTreeSet<PairRecord> = hit.checked_out().into_iter().collect();
        self.pending.retain(|p| !taken.contains(p));
        self.open.insert(
            hit_id,
            OpenHit {
                hit: hit.clone(),
                annotator: annotator.map(str::to_string),
            },
        );
        Ok(hit)
    }

    /// Validates and closes a HIT. Accepted answers are appended to the label
    /// log; on rejection the HIT's pairs are queued again.
    pub fn submit(&mut self, sub: &Submission) -> Result<Decision> {
        if self.closed.contains(&sub.hit_id) {
            return Err(Error::AlreadyClosed(sub.hit_id.clone()));
        }
        let open = self
            .open
            .remove(&sub.hit_id)
            .ok_or_else(|| Error::UnknownHit(sub.hit_id.clone()))?;
        let decision = validate_submission(&open.hit, sub);
        let annotator = open.annotator.clone().unwrap_or_else(|| sub.annotator_id.clone());
        match &decision {
            Decision::Accept => {
                let ts = if self.cfg.sequence_clock {
                    self.labels.len() as u64
                } else {
                    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
                };
                let (mut labels, retry) = record_labels(&open.hit, sub, ts);
                if self.cfg.sequence_clock {
                    for (i, l) in labels.iter_mut().enumerate() {
                        l.timestamp = ts + i as u64;
                    }
                }
                if let Some(dir) = &self.dir {
                    manifest::append(dir.join(LABELS_FILE), LABELS_KIND, &labels)?;
                }
                self.labelled.extend(labels.iter().map(label_pair));
                self.labels.extend(labels);
                self.pending.extend(retry);
                self.accepted += 1;
            }
            Decision::Reject(_) => {
                for p in open.hit.checked_out() {
                    self.rejected_by.entry(p.clone()).or_default().insert(annotator.clone());
                    self.pending.push_back(p);
                }
                self.rejected += 1;
            }
        }
        self.closed.insert(sub.hit_id.clone());
        if let Some(dir) = &self.dir {
            let outcome = HitOutcome {
                hit_id: sub.hit_id.clone(),
                annotator_id: sub.annotator_id.clone(),
                decision: decision.clone(),
            };
            manifest::append(dir.join(HITS_FILE), HITS_KIND, &[outcome])?;
            self.write_queue()?;
        }
        Ok(decision)
    }

    /// Rewrites the queue snapshot: pending pairs plus pairs held by open
    /// HITs.
    pub fn write_queue(&self) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let mut all: Vec<PairRecord> = self.pending.iter().cloned().collect();
        for o in self.open.values() {
            all.extend(o.hit.checked_out());
        }
        manifest::write(dir.join(QUEUE_FILE), QUEUE_KIND, &all)
    }

    /// Scores of every reference whose 33 pairs are all labelled.
    pub fn scores(&self, design: &PairDesign) -> Result<BTreeMap<String, Vec<FilterScore>>> {
        let mut per_ref: BTreeMap<&str, usize> = BTreeMap::new();
        for l in &self.labels {
            *per_ref.entry(&l.ref_id).or_default() += 1;
        }
        let complete: Vec<LabelRecord> = self
            .labels
            .iter()
            .filter(|l| per_ref[l.ref_id.as_str()] == design.edges().len())
            .cloned()
            .collect();
        score_log(&complete, design)
    }
}

fn label_pair(l: &LabelRecord) -> PairRecord {
    PairRecord {
        ref_id: l.ref_id.clone(),
        left: l.left,
        right: l.right,
    }
}

use rand::RngCore as _;
