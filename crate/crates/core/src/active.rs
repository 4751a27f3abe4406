//! Active-learning loop: query selection by softmax entropy (or at random),
//! label intake, retraining and evaluation on a frozen test set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::classifier::{warm_start, HeadModel};
use crate::error::{Error, Result};
use crate::ingest::{Dataset, Labels};
use crate::merge::{ImagePrediction, NORMALIZATION_TOLERANCE};
use crate::metrics::{MetricKind, MetricReport};
use crate::pipeline::{Lambda, PipelineDeps};
use crate::seed;
use crate::tuning::{split_ids, tune, HyperGrid, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Acquisition {
    #[default]
    Entropy,
    Random,
}

impl std::str::FromStr for Acquisition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Self::Entropy),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidConfig(format!(
                "unknown acquisition {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    /// Fresh head every iteration.
    #[default]
    Cold,
    /// Continue from the previous head (or an external checkpoint).
    Warm,
}

impl std::str::FromStr for StartMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cold" => Ok(Self::Cold),
            "warm" => Ok(Self::Warm),
            other => Err(Error::InvalidConfig(format!(
                "unknown start mode {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActiveSettings {
    pub batch_size: usize,
    pub stratify_by_station: bool,
    pub acquisition: Acquisition,
    pub start_mode: StartMode,
    pub skip_tuning: bool,
    /// Tune over every embedder instead of only the current one.
    pub full_grid: bool,
    /// Share of the labeled pool held out for tuning.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ActiveSettings {
    fn default() -> Self {
        Self {
            batch_size: 128,
            stratify_by_station: false,
            acquisition: Acquisition::Entropy,
            start_mode: StartMode::Cold,
            skip_tuning: false,
            full_grid: false,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Images labeled since the previous iteration.
    pub queried: Vec<String>,
    pub labeled_count: usize,
    pub lambda: Lambda,
    #[serde(default)]
    pub checkpoint: Option<String>,
    pub test_report: Option<MetricReport>,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALState {
    pub iteration: usize,
    pub labeled_pool: BTreeSet<String>,
    pub unlabeled_pool: BTreeSet<String>,
    pub frozen_test: BTreeSet<String>,
    /// Labels of the labeled pool and of the frozen test set.
    pub labels: Labels,
    pub settings: ActiveSettings,
    /// Last selected batch that is still (partly) unlabeled.
    #[serde(default)]
    pub queued: Vec<String>,
    /// Images labeled since the last iteration, in submission order.
    #[serde(default)]
    pub pending: Vec<String>,
    #[serde(default)]
    pub lambda: Option<Lambda>,
    #[serde(default)]
    pub history: Vec<IterationRecord>,
}

/// `-Σ π ln π` with `0 ln 0 = 0`.
pub fn acquisition_score(pred: &ImagePrediction) -> Result<f64> {
    entropy(&pred.scores)
}

pub fn entropy(scores: &[f64]) -> Result<f64> {
    let sum: f64 = scores.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE || scores.iter().any(|p| p.is_nan() || *p < 0.0)
    {
        return Err(Error::UnnormalizedScore { sum });
    }
    Ok(-scores
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>())
}

/// Sizes proportional to `weights` summing to `total`, by largest remainder
/// (ties to the earlier entry), each capped at its weight.
fn largest_remainder(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let total = total.min(sum);
    let exact: Vec<f64> = weights
        .iter()
        .map(|&w| w as f64 * total as f64 / sum as f64)
        .collect();
    let mut out: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut rest = total - out.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if out[i] < weights[i] {
            out[i] += 1;
            rest -= 1;
        }
    }
    out
}

impl ALState {
    /// Fresh loop state: `test_ids` become the frozen test set (their labels
    /// must be known), every other image starts unlabeled.
    pub fn new(dataset: &Dataset, test_ids: &[String], settings: ActiveSettings) -> Result<Self> {
        if settings.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        let known = dataset.labels();
        let mut labels = Labels::new();
        for id in test_ids {
            if dataset.position(id).is_none() {
                return Err(Error::NotQueriedOrUnknown(id.clone()));
            }
            let label = known
                .get(id)
                .ok_or_else(|| Error::InvalidConfig(format!("test image {id:?} has no label")))?;
            labels.insert(id.clone(), label.clone());
        }
        let frozen_test: BTreeSet<String> = test_ids.iter().cloned().collect();
        let unlabeled_pool = dataset
            .images()
            .iter()
            .filter(|r| !frozen_test.contains(&r.image_id))
            .map(|r| r.image_id.clone())
            .collect();
        Ok(Self {
            iteration: 0,
            labeled_pool: BTreeSet::new(),
            unlabeled_pool,
            frozen_test,
            labels,
            settings,
            queued: Vec::new(),
            pending: Vec::new(),
            lambda: None,
            history: Vec::new(),
        })
    }

    /// Check the pool invariants.
    pub fn check(&self) -> Result<()> {
        let overlap = self
            .labeled_pool
            .intersection(&self.unlabeled_pool)
            .next()
            .is_some()
            || self
                .labeled_pool
                .intersection(&self.frozen_test)
                .next()
                .is_some()
            || self
                .unlabeled_pool
                .intersection(&self.frozen_test)
                .next()
                .is_some();
        if overlap {
            return Err(Error::CorruptState("pools overlap".into()));
        }
        if let Some(id) = self
            .labeled_pool
            .iter()
            .find(|id| !self.labels.contains_key(*id))
        {
            return Err(Error::CorruptState(format!(
                "labeled image {id:?} has no label"
            )));
        }
        if self.history.len() != self.iteration {
            return Err(Error::CorruptState(
                "history length differs from iteration".into(),
            ));
        }
        Ok(())
    }

    /// Pick the next batch and remember it as the queue.
    ///
    /// Before the first model exists (or with random acquisition) the batch
    /// is a seeded uniform sample; otherwise the `batch_size` unlabeled
    /// images with the highest entropy, ties by id. `predictions` must cover
    /// the unlabeled pool unless sampling at random.
    pub fn select_batch(
        &mut self,
        dataset: &Dataset,
        predictions: &[ImagePrediction],
        batch_size: usize,
    ) -> Result<Vec<String>> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.unlabeled_pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        let random = self.iteration == 0 || self.settings.acquisition == Acquisition::Random;
        let batch = if random {
            let pool: Vec<&String> = self.unlabeled_pool.iter().collect();
            let mut rng = seed::rng(self.settings.seed, &format!("select:{}", self.iteration));
            let mut picked: Vec<String> = pool
                .choose_multiple(&mut rng, batch_size.min(pool.len()))
                .map(|s| s.to_string())
                .collect();
            picked.shuffle(&mut rng);
            picked
        } else {
            let by_id: BTreeMap<&str, &ImagePrediction> = predictions
                .iter()
                .map(|p| (p.image_id.as_str(), p))
                .collect();
            let mut scored = Vec::with_capacity(self.unlabeled_pool.len());
            for id in &self.unlabeled_pool {
                let p = by_id
                    .get(id.as_str())
                    .ok_or_else(|| Error::MissingPrediction(id.clone()))?;
                scored.push((id.clone(), acquisition_score(p)?));
            }
            let station_of = |id: &str| dataset.station_of(id).unwrap_or_default().to_string();
            let stations: Option<&dyn Fn(&str) -> String> = if self.settings.stratify_by_station {
                Some(&station_of)
            } else {
                None
            };
            rank_batch(scored, batch_size, stations)
        };
        self.queued = batch.clone();
        Ok(batch)
    }

    /// Record labels; all-or-nothing. Re-submitting an identical label is a
    /// no-op, a different label for a labeled image is a conflict.
    pub fn submit_labels(
        &mut self,
        dataset: &Dataset,
        pairs: &[(String, String)],
    ) -> Result<usize> {
        let mut fresh: BTreeMap<&str, &str> = BTreeMap::new();
        for (id, label) in pairs {
            dataset.label_space().require(label)?;
            if let Some(existing) = self
                .labels
                .get(id)
                .filter(|_| self.labeled_pool.contains(id))
            {
                if existing != label {
                    return Err(Error::LabelConflict {
                        image_id: id.clone(),
                        existing: existing.clone(),
                        proposed: label.clone(),
                    });
                }
                continue;
            }
            if !self.unlabeled_pool.contains(id) {
                return Err(Error::NotQueriedOrUnknown(id.clone()));
            }
            if let Some(prev) = fresh.insert(id, label) {
                if prev != label {
                    return Err(Error::LabelConflict {
                        image_id: id.clone(),
                        existing: prev.to_string(),
                        proposed: label.clone(),
                    });
                }
            }
        }
        for (id, label) in &fresh {
            self.unlabeled_pool.remove(*id);
            self.labeled_pool.insert(id.to_string());
            self.labels.insert(id.to_string(), label.to_string());
            self.pending.push(id.to_string());
        }
        self.queued.retain(|id| !fresh.contains_key(id.as_str()));
        Ok(fresh.len())
    }

    pub fn labeled_labels(&self) -> Labels {
        self.labeled_pool
            .iter()
            .map(|id| (id.clone(), self.labels[id].clone()))
            .collect()
    }

    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }

    /// Merged predictions for the unlabeled pool with `head`.
    pub fn predict_pool(
        &self,
        deps: &PipelineDeps<'_>,
        head: &HeadModel,
    ) -> Result<Vec<ImagePrediction>> {
        let lambda = self.lambda.as_ref().ok_or(Error::NoModel)?;
        let ids: Vec<String> = self.unlabeled_pool.iter().cloned().collect();
        deps.predict(head, &ids, lambda)
    }

    fn choose_lambda(
        &self,
        deps: &PipelineDeps<'_>,
        grid: &HyperGrid,
        fallback: &Lambda,
    ) -> Result<Lambda> {
        let current = self.lambda.clone().unwrap_or_else(|| fallback.clone());
        if self.settings.skip_tuning {
            return Ok(current);
        }
        let items: Vec<(String, String)> = self
            .labeled_pool
            .iter()
            .map(|id| {
                (
                    id.clone(),
                    deps.dataset.station_of(id).unwrap_or_default().to_string(),
                )
            })
            .collect();
        let v = self.settings.val_fraction;
        let split = split_ids(
            &items,
            [1.0 - v, v, 0.0],
            self.settings.stratify_by_station,
            seed::derive(self.settings.seed, &format!("al-split:{}", self.iteration)),
        )?;
        if split.ids(Split::Train).is_empty() || split.ids(Split::Val).is_empty() {
            log::info!("too few labels to tune; keeping alpha {}", current.alpha);
            return Ok(current);
        }
        let mut grid = grid.clone();
        if !self.settings.full_grid {
            grid.embedders = vec![current.embedder.clone()];
        }
        match tune(deps, &self.labels, &split, &grid) {
            Ok(result) => Ok(result.lambda_star),
            Err(Error::DegenerateGrid) => Ok(current),
            Err(e) => Err(e),
        }
    }

    /// One loop body: choose the hyperparameters, train on the labeled pool,
    /// evaluate on the frozen test set and append to the history. The state
    /// is only modified when every step succeeds.
    pub fn iterate(
        &mut self,
        deps: &PipelineDeps<'_>,
        grid: &HyperGrid,
        default_lambda: &Lambda,
        previous: Option<&HeadModel>,
    ) -> Result<IterationOutcome> {
        if self.labeled_pool.is_empty() {
            return Err(Error::NoLabels);
        }
        let lambda = self.choose_lambda(deps, grid, default_lambda)?;
        let space = deps.dataset.label_space();
        let mut config = deps.train.clone();
        config.seed = seed::derive(config.seed, &format!("al-iteration:{}", self.iteration));
        let init = match (self.settings.start_mode, previous) {
            (StartMode::Warm, Some(source)) => {
                match warm_start(
                    source,
                    "previous",
                    space,
                    lambda.embedder.dim,
                    config.clone(),
                ) {
                    Ok(h) => h,
                    Err(Error::DimensionMismatch { .. }) => {
                        log::info!(
                            "previous head does not fit {}; starting cold",
                            lambda.embedder.name
                        );
                        HeadModel::cold(space.clone(), lambda.embedder.dim, config)?
                    }
                    Err(e) => return Err(e),
                }
            }
            _ => HeadModel::cold(space.clone(), lambda.embedder.dim, config)?,
        };
        let ids: Vec<String> = self.labeled_pool.iter().cloned().collect();
        let (head, _) = deps.train(&ids, &self.labels, &lambda, Some(init))?;
        let test_ids: Vec<String> = self.frozen_test.iter().cloned().collect();
        let test_report = if test_ids.is_empty() {
            None
        } else {
            Some(deps.evaluate(&head, &test_ids, &self.labels, &lambda)?)
        };
        let record = IterationRecord {
            iteration: self.iteration,
            queried: self.pending.clone(),
            labeled_count: self.labeled_pool.len(),
            lambda: lambda.clone(),
            checkpoint: None,
            accuracy: test_report.as_ref().map_or(0.0, |e| e.image.accuracy),
            weighted_f1: test_report
                .as_ref()
                .map_or(0.0, |e| e.image.weighted(MetricKind::F1)),
            coverage: test_report.as_ref().map_or(0.0, |e| e.coverage),
            test_report: test_report.map(|e| e.image),
        };
        self.lambda = Some(lambda);
        self.history.push(record.clone());
        self.pending.clear();
        self.iteration += 1;
        Ok(IterationOutcome { record, head })
    }

    /// Predictions for every image still unlabeled, using `head`.
    pub fn finalize(
        &self,
        deps: &PipelineDeps<'_>,
        head: Option<&HeadModel>,
    ) -> Result<Vec<ImagePrediction>> {
        let head = head
            .filter(|_| !self.history.is_empty())
            .ok_or(Error::NoModel)?;
        self.predict_pool(deps, head)
    }
}

#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub record: IterationRecord,
    pub head: HeadModel,
}

/// `iteration,labeled_count,accuracy,weighted_f1`
pub fn history_csv(history: &[IterationRecord]) -> String {
    let mut out = String::from("iteration,labeled_count,accuracy,weighted_f1\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.iteration, r.labeled_count, r.accuracy, r.weighted_f1
        );
    }
    out
}

/// Top-`b` ids by score (ties by id). With station lookup, quotas per station
/// are proportional to pool sizes and unfilled quota goes to the best
/// remaining candidates.
fn rank_batch(
    mut scored: Vec<(String, f64)>,
    b: usize,
    stations: Option<&dyn Fn(&str) -> String>,
) -> Vec<String> {
    let cmp = |x: &(String, f64), y: &(String, f64)| {
        y.1.partial_cmp(&x.1).unwrap().then_with(|| x.0.cmp(&y.0))
    };
    scored.sort_by(cmp);
    let Some(station_of) = stations else {
        return scored.into_iter().take(b).map(|(id, _)| id).collect();
    };
    let mut groups: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for item in scored.iter().cloned() {
        groups.entry(station_of(&item.0)).or_default().push(item);
    }
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let quotas = largest_remainder(&sizes, b);
    let mut picked: BTreeSet<String> = BTreeSet::new();
    let mut batch = Vec::new();
    for (items, q) in groups.values().zip(quotas) {
        for (id, s) in items.iter().take(q) {
            picked.insert(id.clone());
            batch.push((id.clone(), *s));
        }
    }
    for item in &scored {
        if batch.len() >= b {
            break;
        }
        if !picked.contains(&item.0) {
            picked.insert(item.0.clone());
            batch.push(item.clone());
        }
    }
    batch.sort_by(cmp);
    batch.into_iter().map(|(id, _)| id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{DetectionSet, ImageRecord, LabelSpace};

    fn pred(id: &str, scores: Vec<f64>) -> ImagePrediction {
        ImagePrediction {
            image_id: id.into(),
            label: "fox".into(),
            counts: vec![0; scores.len()],
            confidence: scores.iter().copied().fold(0.0, f64::max),
            scores,
            abstained: false,
        }
    }

    #[test]
    fn entropy_examples() {
        let uniform = vec![0.125; 8];
        assert!((entropy(&uniform).unwrap() - 8f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            entropy(&[0.5, 0.2]),
            Err(Error::UnnormalizedScore { .. })
        ));
    }

    #[test]
    fn quotas_by_largest_remainder() {
        assert_eq!(largest_remainder(&[30, 10], 4), vec![3, 1]);
        assert_eq!(largest_remainder(&[1, 1, 1], 2), vec![1, 1, 0]);
        assert_eq!(largest_remainder(&[2, 0], 5), vec![2, 0]);
    }

    fn dataset(stations: &[(&str, usize)]) -> Dataset {
        let space = LabelSpace::new(["empty", "fox", "deer"]).unwrap();
        let mut images = Vec::new();
        for (s, n) in stations {
            for i in 0..*n {
                images.push(ImageRecord {
                    image_id: format!("{s}{i:02}"),
                    station_id: s.to_string(),
                    file_path: None,
                    label: Some("fox".into()),
                    capture_time: None,
                });
            }
        }
        let sets = images
            .iter()
            .map(|r| DetectionSet::empty(&r.image_id))
            .collect();
        Dataset::new(space, images, sets).unwrap()
    }

    fn started(ds: &Dataset, settings: ActiveSettings) -> ALState {
        let mut st = ALState::new(ds, &[], settings).unwrap();
        st.iteration = 1;
        st
    }

    #[test]
    fn top_entropy_batch() {
        let ds = dataset(&[("a", 5)]);
        let mut st = started(&ds, ActiveSettings::default());
        let rows = [
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            vec![0.5, 0.3, 0.2],
            vec![0.7, 0.2, 0.1],
            vec![0.9, 0.05, 0.05],
            vec![1.0, 0.0, 0.0],
        ];
        let preds: Vec<ImagePrediction> = rows
            .into_iter()
            .enumerate()
            .map(|(i, s)| pred(&format!("a{i:02}"), s))
            .collect();
        let batch = st.select_batch(&ds, &preds, 2).unwrap();
        assert_eq!(batch, vec!["a00", "a01"]);
    }

    #[test]
    fn equal_entropy_takes_lowest_ids() {
        let ds = dataset(&[("a", 6)]);
        let mut st = started(&ds, ActiveSettings::default());
        let preds: Vec<_> = (0..6)
            .rev()
            .map(|i| pred(&format!("a{i:02}"), vec![0.2, 0.3, 0.5]))
            .collect();
        assert_eq!(
            st.select_batch(&ds, &preds, 3).unwrap(),
            vec!["a00", "a01", "a02"]
        );
    }

    #[test]
    fn stratified_quotas() {
        let ds = dataset(&[("a", 30), ("b", 10)]);
        let settings = ActiveSettings {
            stratify_by_station: true,
            ..Default::default()
        };
        let mut st = started(&ds, settings);
        // Station b holds the most uncertain images, yet gets only its quota.
        let preds: Vec<_> = ds
            .images()
            .iter()
            .map(|r| {
                let s = if r.station_id == "b" {
                    vec![0.34, 0.33, 0.33]
                } else {
                    vec![0.8, 0.1, 0.1]
                };
                pred(&r.image_id, s)
            })
            .collect();
        let batch = st.select_batch(&ds, &preds, 4).unwrap();
        let from_b = batch.iter().filter(|id| id.starts_with('b')).count();
        assert_eq!((batch.len(), from_b), (4, 1));
    }

    #[test]
    fn first_batch_is_random_but_seeded() {
        let ds = dataset(&[("a", 50)]);
        let mut a = ALState::new(&ds, &[], ActiveSettings::default()).unwrap();
        let mut b = a.clone();
        let x = a.select_batch(&ds, &[], 10).unwrap();
        assert_eq!(x, b.select_batch(&ds, &[], 10).unwrap());
        assert_eq!(x.iter().collect::<BTreeSet<_>>().len(), 10);
        let mut c = ALState::new(
            &ds,
            &[],
            ActiveSettings {
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_ne!(x, c.select_batch(&ds, &[], 10).unwrap());
    }

    #[test]
    fn label_intake_rules() {
        let ds = dataset(&[("a", 10)]);
        let mut st = ALState::new(&ds, &["a09".to_string()], ActiveSettings::default()).unwrap();
        let pairs: Vec<(String, String)> = (0..3)
            .map(|i| (format!("a{i:02}"), "deer".to_string()))
            .collect();
        assert_eq!(st.submit_labels(&ds, &pairs).unwrap(), 3);
        assert_eq!(st.labeled_pool.len(), 3);
        assert_eq!(st.submit_labels(&ds, &pairs[..1]).unwrap(), 0);
        assert_eq!(st.labeled_pool.len(), 3);
        let conflict = st
            .submit_labels(&ds, &[("a00".into(), "fox".into())])
            .unwrap_err();
        assert!(matches!(conflict, Error::LabelConflict { .. }));
        let test = st
            .submit_labels(&ds, &[("a09".into(), "fox".into())])
            .unwrap_err();
        assert!(matches!(test, Error::NotQueriedOrUnknown(_)));
        // A failing batch changes nothing.
        let mixed = [
            ("a05".to_string(), "fox".to_string()),
            ("zzz".to_string(), "fox".to_string()),
        ];
        assert!(st.submit_labels(&ds, &mixed).is_err());
        assert!(st.unlabeled_pool.contains("a05"));
        assert_eq!(st.frozen_test.len(), 1);
        st.check().unwrap();
    }
}
