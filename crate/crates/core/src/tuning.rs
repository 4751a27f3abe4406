//! Train/validation/test splits, station partitions and the grid search over
//! (embedder, detector threshold).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::HeadModel;
use crate::embedding::EmbedderId;
use crate::error::{Error, Result};
use crate::ingest::{Dataset, Labels};
use crate::metrics::{MetricKind, MetricReport};
use crate::pipeline::{Lambda, PipelineDeps};
use crate::seed;

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];
pub const DEFAULT_ALPHAS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignments: BTreeMap<String, Split>,
    pub fractions: [f64; 3],
    pub stratify_by_station: bool,
    pub seed: u64,
}

impl SplitAssignment {
    /// Ids in `part`, ascending.
    pub fn ids(&self, part: Split) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, s)| **s == part)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn sizes(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for s in self.assignments.values() {
            out[*s as usize] += 1;
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,split\n");
        for (id, s) in &self.assignments {
            let _ = writeln!(out, "{id},{s}");
        }
        out
    }
}

fn check_fractions(fractions: [f64; 3]) -> Result<()> {
    let sum: f64 = fractions.iter().sum();
    let ok = fractions.iter().all(|f| *f >= 0.0 && f.is_finite())
        && fractions.iter().any(|f| *f > 0.0)
        && (sum - 1.0).abs() <= 1e-9;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidFractions(fractions.to_vec()))
    }
}

/// Split the labeled images of `dataset`.
pub fn make_split(
    dataset: &Dataset,
    fractions: [f64; 3],
    stratify: bool,
    seed: u64,
) -> Result<SplitAssignment> {
    let items: Vec<(String, String)> = dataset
        .images()
        .iter()
        .filter(|r| r.label.is_some())
        .map(|r| (r.image_id.clone(), r.station_id.clone()))
        .collect();
    split_ids(&items, fractions, stratify, seed)
}

/// Split `(image_id, station_id)` pairs. Within each station (or globally
/// without stratification) the ids are shuffled and cut into parts sized by
/// largest remainder. Remainder ties go to the part furthest behind its
/// running global target, then to the earlier part.
pub fn split_ids(
    items: &[(String, String)],
    fractions: [f64; 3],
    stratify: bool,
    seed: u64,
) -> Result<SplitAssignment> {
    check_fractions(fractions)?;
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, station) in items {
        let key = if stratify { station.as_str() } else { "" };
        groups.entry(key).or_default().push(id);
    }
    let mut assignments = BTreeMap::new();
    let mut target = [0.0f64; 3];
    let mut allocated = [0usize; 3];
    for (station, mut ids) in groups {
        ids.sort_unstable();
        ids.dedup();
        let mut rng = seed::rng(seed, &format!("split:{station}"));
        ids.shuffle(&mut rng);
        let n = ids.len();
        let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
        let mut sizes: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
        for (t, q) in target.iter_mut().zip(&exact) {
            *t += q;
        }
        let mut rest = n - sizes.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).filter(|&i| fractions[i] > 0.0).collect();
        order.sort_by(|&a, &b| {
            let rem = |i: usize| exact[i] - exact[i].floor();
            let shortfall = |i: usize| target[i] - (allocated[i] + sizes[i]) as f64;
            rem(b)
                .partial_cmp(&rem(a))
                .unwrap()
                .then(shortfall(b).partial_cmp(&shortfall(a)).unwrap())
                .then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            sizes[i] += 1;
            rest -= 1;
        }
        let mut it = ids.into_iter();
        for (part, &size) in Split::ALL.iter().zip(&sizes) {
            for id in it.by_ref().take(size) {
                assignments.insert(id.to_string(), *part);
            }
        }
        for (a, s) in allocated.iter_mut().zip(&sizes) {
            *a += s;
        }
    }
    Ok(SplitAssignment {
        assignments,
        fractions,
        stratify_by_station: stratify,
        seed,
    })
}

/// Station-disjoint partition: `floor(fraction · S)` stations (at least one,
/// at most `S - 1`) are in-sample.
pub fn make_station_partition(
    dataset: &Dataset,
    fraction_in_sample: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(0.0..=1.0).contains(&fraction_in_sample) {
        return Err(Error::InvalidFractions(vec![fraction_in_sample]));
    }
    let mut stations: Vec<String> = dataset.stations().into_iter().map(String::from).collect();
    let s = stations.len();
    if s < 2 {
        return Err(Error::TooFewStations(s));
    }
    stations.shuffle(&mut seed::rng(seed, "stations"));
    let k = ((fraction_in_sample * s as f64).floor() as usize).clamp(1, s - 1);
    let mut out_of_sample = stations.split_off(k);
    stations.sort();
    out_of_sample.sort();
    Ok((stations, out_of_sample))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub alphas: Vec<f64>,
    pub embedders: Vec<EmbedderId>,
    #[serde(default)]
    pub metric: MetricKind,
}

impl HyperGrid {
    pub fn new(embedders: Vec<EmbedderId>) -> Self {
        Self {
            alphas: DEFAULT_ALPHAS.to_vec(),
            embedders,
            metric: MetricKind::F1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.embedders.is_empty() {
            return Err(Error::InvalidConfig(
                "grid needs at least one alpha and one embedder".into(),
            ));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidConfig(format!("alpha {a} outside [0,1]")));
        }
        Ok(())
    }

    /// Grid points in evaluation order: embedders outer, alphas inner.
    pub fn points(&self) -> Vec<Lambda> {
        self.embedders
            .iter()
            .flat_map(|e| self.alphas.iter().map(move |&a| Lambda::new(e.clone(), a)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub lambda: Lambda,
    pub metric: MetricKind,
    /// Validation metric; `None` for a degenerate grid point.
    pub value: Option<f64>,
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub report: Option<MetricReport>,
}

impl TuningRecord {
    /// Value used for ranking; degenerate points rank last.
    pub fn score(&self) -> f64 {
        self.value.unwrap_or(f64::NEG_INFINITY)
    }
}

/// Result of evaluating one grid point.
#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub value: f64,
    pub report: Option<MetricReport>,
    pub head: Option<HeadModel>,
}

/// Scores a grid point. Returning `Error::DegenerateGridPoint` marks the point
/// as degenerate without aborting the search.
pub trait GridEvaluator: Sync {
    fn evaluate(&self, lambda: &Lambda, metric: MetricKind) -> Result<GridOutcome>;
}

impl<F> GridEvaluator for F
where
    F: Fn(&Lambda, MetricKind) -> Result<GridOutcome> + Sync,
{
    fn evaluate(&self, lambda: &Lambda, metric: MetricKind) -> Result<GridOutcome> {
        self(lambda, metric)
    }
}

#[derive(Debug, Clone)]
pub struct TuningResult {
    pub lambda_star: Lambda,
    /// One record per grid point, in grid order.
    pub records: Vec<TuningRecord>,
    /// Heads trained per grid point, aligned with `records`.
    pub heads: Vec<Option<HeadModel>>,
}

impl TuningResult {
    pub fn best(&self) -> &TuningRecord {
        self.records
            .iter()
            .find(|r| r.lambda == self.lambda_star)
            .expect("lambda_star comes from the records")
    }

    pub fn best_head(&self) -> Option<&HeadModel> {
        let i = self
            .records
            .iter()
            .position(|r| r.lambda == self.lambda_star)?;
        self.heads[i].as_ref()
    }
}

/// Evaluate every grid point (in parallel) and pick the best one; ties go to
/// the lower alpha, then to the earlier embedder.
pub fn tune_with(grid: &HyperGrid, evaluator: &dyn GridEvaluator) -> Result<TuningResult> {
    grid.validate()?;
    let points = grid.points();
    let outcomes: Vec<Result<Option<GridOutcome>>> = points
        .par_iter()
        .map(|lambda| match evaluator.evaluate(lambda, grid.metric) {
            Ok(o) => Ok(Some(o)),
            Err(Error::DegenerateGridPoint { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect();
    let mut records = Vec::with_capacity(points.len());
    let mut heads = Vec::with_capacity(points.len());
    for (lambda, outcome) in points.into_iter().zip(outcomes) {
        match outcome? {
            Some(o) => {
                records.push(TuningRecord {
                    lambda,
                    metric: grid.metric,
                    value: Some(o.value),
                    checkpoint: None,
                    report: o.report,
                });
                heads.push(o.head);
            }
            None => {
                log::warn!(
                    "degenerate grid point {} / {}",
                    lambda.embedder.name,
                    lambda.alpha
                );
                records.push(TuningRecord {
                    lambda,
                    metric: grid.metric,
                    value: None,
                    checkpoint: None,
                    report: None,
                });
                heads.push(None);
            }
        }
    }
    let rank = |r: &TuningRecord| {
        let e = grid
            .embedders
            .iter()
            .position(|e| *e == r.lambda.embedder)
            .unwrap_or(usize::MAX);
        (r.lambda.alpha, e)
    };
    let best = records
        .iter()
        .filter(|r| r.value.is_some())
        .min_by(|a, b| {
            b.score()
                .partial_cmp(&a.score())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| {
                    rank(a)
                        .partial_cmp(&rank(b))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
        })
        .ok_or(Error::DegenerateGrid)?;
    Ok(TuningResult {
        lambda_star: best.lambda.clone(),
        records,
        heads,
    })
}

/// Grid evaluator that trains on `train_ids` and scores merged image
/// predictions on `val_ids`.
pub struct PipelineEvaluator<'a> {
    pub deps: &'a PipelineDeps<'a>,
    pub labels: &'a Labels,
    pub train_ids: &'a [String],
    pub val_ids: &'a [String],
}

impl GridEvaluator for PipelineEvaluator<'_> {
    fn evaluate(&self, lambda: &Lambda, metric: MetricKind) -> Result<GridOutcome> {
        let data = self
            .deps
            .training_data(self.train_ids, self.labels, lambda)?;
        if data.non_empty_crops == 0 {
            return Err(Error::DegenerateGridPoint {
                embedder: lambda.embedder.name.clone(),
                alpha: lambda.alpha,
            });
        }
        let head = HeadModel::cold(
            self.deps.dataset.label_space().clone(),
            lambda.embedder.dim,
            self.deps.train.clone(),
        )?;
        let (head, _) = crate::classifier::train_set(head, &data.set)?;
        let eval = self
            .deps
            .evaluate(&head, self.val_ids, self.labels, lambda)?;
        Ok(GridOutcome {
            value: eval.image.weighted(metric),
            report: Some(eval.image),
            head: Some(head),
        })
    }
}

/// Full grid search on the train/val parts of `split`.
pub fn tune(
    deps: &PipelineDeps<'_>,
    labels: &Labels,
    split: &SplitAssignment,
    grid: &HyperGrid,
) -> Result<TuningResult> {
    let train_ids = split.ids(Split::Train);
    let val_ids = split.ids(Split::Val);
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(Error::InvalidConfig(
            "tuning needs non-empty train and val parts".into(),
        ));
    }
    let evaluator = PipelineEvaluator {
        deps,
        labels,
        train_ids: &train_ids,
        val_ids: &val_ids,
    };
    tune_with(grid, &evaluator)
}

/// Ranking table sorted by metric, best first: `confidence,architecture,metric`.
pub fn tuning_csv(records: &[TuningRecord]) -> String {
    let mut sorted: Vec<&TuningRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        b.score()
            .partial_cmp(&a.score())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out = String::from("confidence,architecture,metric\n");
    for r in sorted {
        let value = r
            .value
            .map_or_else(|| "-inf".to_string(), |v| v.to_string());
        let _ = writeln!(
            out,
            "{},{},{}",
            r.lambda.alpha, r.lambda.embedder.name, value
        );
    }
    out
}

pub fn write_tuning_csv(records: &[TuningRecord], path: &Path) -> Result<()> {
    std::fs::write(path, tuning_csv(records)).map_err(|e| Error::io(path, e))
}

/// Stations of the images in each part, for disjointness checks.
pub fn stations_by_part(
    dataset: &Dataset,
    split: &SplitAssignment,
) -> BTreeMap<Split, BTreeSet<String>> {
    let mut out: BTreeMap<Split, BTreeSet<String>> = BTreeMap::new();
    for (id, part) in &split.assignments {
        if let Some(s) = dataset.station_of(id) {
            out.entry(*part).or_default().insert(s.to_string());
        }
    }
    out
}
