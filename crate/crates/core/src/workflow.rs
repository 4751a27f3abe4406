//! Project-level operations behind the CLI and the HTTP service.

use std::collections::BTreeSet;

use crate::active::{ALState, IterationRecord, StartMode};
use crate::classifier::HeadModel;
use crate::config::EngineConfig;
use crate::embedding::{Embedder, EmbedderId};
use crate::error::{Error, Result};
use crate::ingest::{Dataset, Labels};
use crate::merge::{predictions_csv, ImagePrediction};
use crate::pipeline::{embed_pixels, Evaluation, Lambda, PipelineDeps, PixelEmbedding, StoreMap};
use crate::seed;
use crate::store::{atomic_write, Project};
use crate::tuning::{make_split, tune, HyperGrid, Split, SplitAssignment, TuningResult};

pub const PREDICTIONS_EXPORT: &str = "exports/predictions.csv";

fn make_deps<'a>(
    config: &EngineConfig,
    project_seed: u64,
    dataset: &'a Dataset,
    stores: &'a StoreMap,
) -> PipelineDeps<'a> {
    let mut train = config.train.clone();
    train.seed = seed::derive(project_seed, &format!("train:{}", config.train.seed));
    PipelineDeps {
        dataset,
        stores,
        train,
        beta: config.beta,
        merge_rule: config.merge_rule,
        augmentations: config.augmentations,
    }
}

/// Outcome of labeling items one by one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelOutcome {
    pub accepted: Vec<String>,
    pub rejected: Vec<(String, String)>,
}

impl Project {
    /// Providers in name order.
    pub fn embedder_ids(&self) -> Vec<EmbedderId> {
        self.stores.values().map(|s| s.provider().clone()).collect()
    }

    fn embedder(&self, name: &str) -> Result<EmbedderId> {
        self.stores
            .get(name)
            .map(|s| s.provider().clone())
            .ok_or_else(|| Error::UnknownProvider(name.to_string()))
    }

    pub fn grid(&self, embedders: Option<&[String]>) -> Result<HyperGrid> {
        let embedders = match embedders {
            Some(names) => names
                .iter()
                .map(|n| self.embedder(n))
                .collect::<Result<Vec<_>>>()?,
            None => self.embedder_ids(),
        };
        if embedders.is_empty() {
            return Err(Error::InvalidConfig(
                "no embeddings in the project; run embed first".into(),
            ));
        }
        let cfg = &self.manifest.config;
        let grid = HyperGrid {
            alphas: cfg.alphas.clone(),
            embedders,
            metric: cfg.metric,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Compute embeddings from the image files with `embedder` and add them
    /// to the project.
    pub fn embed_pixels(&mut self, embedder: &dyn Embedder) -> Result<usize> {
        let cfg = &self.manifest.config;
        let settings = PixelEmbedding {
            crop: cfg.crop,
            policy: cfg.augmentation,
            augmentations: cfg.augmentations,
            min_confidence: cfg.alphas.iter().copied().fold(cfg.default_alpha, f64::min),
        };
        let root = self
            .manifest
            .image_root
            .clone()
            .unwrap_or_else(|| self.root().to_path_buf());
        let store = embed_pixels(&self.dataset, &root, embedder, &settings)?;
        let n = store.len();
        self.add_store(store)?;
        Ok(n)
    }

    /// Tuned hyperparameters, or the first provider at the default threshold.
    pub fn default_lambda(&self) -> Result<Lambda> {
        if let Some(l) = &self.manifest.lambda {
            return Ok(l.clone());
        }
        let embedder = self.embedder_ids().into_iter().next().ok_or_else(|| {
            Error::InvalidConfig("no embeddings in the project; run embed first".into())
        })?;
        Ok(Lambda::new(embedder, self.manifest.config.default_alpha))
    }

    pub fn make_split(
        &mut self,
        fractions: Option<[f64; 3]>,
        stratify: Option<bool>,
    ) -> Result<&SplitAssignment> {
        let cfg = &self.manifest.config;
        let split = make_split(
            &self.dataset,
            fractions.unwrap_or(cfg.split_fractions),
            stratify.unwrap_or(cfg.stratify_by_station),
            seed::derive(self.manifest.seed, "split"),
        )?;
        self.manifest.split = Some(split);
        Ok(self.manifest.split.as_ref().unwrap())
    }

    fn split(&self) -> Result<&SplitAssignment> {
        self.manifest
            .split
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("the project has no split; run split first".into()))
    }

    /// Grid search on the split's train/val parts. Every grid point's head is
    /// checkpointed; the best one becomes the project model.
    pub fn tune(&mut self, embedders: Option<&[String]>) -> Result<TuningResult> {
        let grid = self.grid(embedders)?;
        let labels = self.labels();
        let mut result = tune(&self.deps(), &labels, self.split()?, &grid)?;
        let mut model = None;
        for (record, head) in result.records.iter_mut().zip(&result.heads) {
            if let Some(head) = head {
                let name = format!(
                    "tune-{}-a{}",
                    record.lambda.embedder.name, record.lambda.alpha
                );
                let reference = self.write_head(head, &name)?;
                if record.lambda == result.lambda_star {
                    model = Some(reference.clone());
                }
                record.checkpoint = Some(reference);
            }
        }
        self.manifest.tuning = result.records.clone();
        self.manifest.lambda = Some(result.lambda_star.clone());
        self.manifest.model = model;
        Ok(result)
    }

    /// Train one head on the train part (all labeled images without a split).
    pub fn train(&mut self, lambda: Option<Lambda>) -> Result<(HeadModel, Vec<f64>)> {
        let lambda = match lambda {
            Some(l) => l,
            None => self.default_lambda()?,
        };
        let ids = match &self.manifest.split {
            Some(s) => s.ids(Split::Train),
            None => self.dataset.labeled_ids(),
        };
        let (head, curve) = self.deps().train(&ids, &self.labels(), &lambda, None)?;
        let reference = self.write_head(&head, "model")?;
        self.manifest.model = Some(reference);
        self.manifest.lambda = Some(lambda);
        Ok((head, curve))
    }

    /// Project model and the hyperparameters it was trained with.
    pub fn model(&self) -> Result<(HeadModel, Lambda)> {
        let reference = self.manifest.model.as_ref().ok_or(Error::NoModel)?;
        let lambda = self.manifest.lambda.clone().ok_or(Error::NoModel)?;
        Ok((self.read_head(reference)?, lambda))
    }

    /// Evaluate the project model on a split part (all labeled images
    /// without a split).
    pub fn evaluate(&self, part: Split) -> Result<Evaluation> {
        let (head, lambda) = self.model()?;
        let ids = match &self.manifest.split {
            Some(s) => s.ids(part),
            None => self.dataset.labeled_ids(),
        };
        self.deps().evaluate(&head, &ids, &self.labels(), &lambda)
    }

    /// Project-model predictions for `ids` (every image by default).
    pub fn predict(&self, ids: Option<&[String]>) -> Result<Vec<ImagePrediction>> {
        let (head, lambda) = self.model()?;
        let all: Vec<String>;
        let ids = match ids {
            Some(ids) => ids,
            None => {
                all = self
                    .dataset
                    .images()
                    .iter()
                    .map(|r| r.image_id.clone())
                    .collect();
                &all
            }
        };
        self.deps().predict(&head, ids, &lambda)
    }

    /// Loop state, created on first use with the split's test part as the
    /// frozen test set.
    pub fn active_mut(&mut self) -> Result<&mut ALState> {
        if self.manifest.active.is_none() {
            let test = self
                .manifest
                .split
                .as_ref()
                .map(|s| s.ids(Split::Test))
                .unwrap_or_default();
            let mut settings = self.manifest.config.active.clone();
            settings.seed = seed::derive(self.manifest.seed, &format!("active:{}", settings.seed));
            self.manifest.active = Some(ALState::new(&self.dataset, &test, settings)?);
        }
        Ok(self.manifest.active.as_mut().unwrap())
    }

    pub fn active(&self) -> Option<&ALState> {
        self.manifest.active.as_ref()
    }

    /// Head of the latest loop iteration.
    pub fn al_head(&self) -> Result<Option<HeadModel>> {
        let Some(reference) = self
            .active()
            .and_then(|al| al.history.last())
            .and_then(|r| r.checkpoint.as_ref())
        else {
            return Ok(None);
        };
        self.read_head(reference).map(Some)
    }

    pub fn al_select(
        &mut self,
        batch_size: Option<usize>,
        stratified: Option<bool>,
    ) -> Result<Vec<String>> {
        self.active_mut()?;
        let head = self.al_head()?;
        let deps = make_deps(
            &self.manifest.config,
            self.manifest.seed,
            &self.dataset,
            &self.stores,
        );
        let al = self.manifest.active.as_mut().unwrap();
        let predictions = match &head {
            Some(h) if al.iteration > 0 => al.predict_pool(&deps, h)?,
            _ => Vec::new(),
        };
        let b = batch_size.unwrap_or(al.settings.batch_size);
        let saved = al.settings.stratify_by_station;
        if let Some(s) = stratified {
            al.settings.stratify_by_station = s;
        }
        let batch = al.select_batch(&self.dataset, &predictions, b);
        al.settings.stratify_by_station = saved;
        batch
    }

    /// Submit labels all-or-nothing. With `queued_only`, pairs for images
    /// outside the current queue are ignored.
    pub fn al_label(&mut self, pairs: &[(String, String)], queued_only: bool) -> Result<usize> {
        self.active_mut()?;
        let al = self.manifest.active.as_mut().unwrap();
        let pairs: Vec<(String, String)> = if queued_only {
            let queued: BTreeSet<&String> = al.queued.iter().collect();
            pairs
                .iter()
                .filter(|(id, _)| queued.contains(id))
                .cloned()
                .collect()
        } else {
            pairs.to_vec()
        };
        al.submit_labels(&self.dataset, &pairs)
    }

    /// Submit labels one by one, collecting per-item rejections.
    pub fn al_label_each(&mut self, pairs: &[(String, String)]) -> Result<LabelOutcome> {
        self.active_mut()?;
        let al = self.manifest.active.as_mut().unwrap();
        let mut out = LabelOutcome::default();
        for pair in pairs {
            match al.submit_labels(&self.dataset, std::slice::from_ref(pair)) {
                Ok(_) => out.accepted.push(pair.0.clone()),
                Err(e) => out.rejected.push((pair.0.clone(), e.to_string())),
            }
        }
        Ok(out)
    }

    /// Run one loop iteration and checkpoint its head.
    pub fn al_iterate(
        &mut self,
        skip_tuning: Option<bool>,
        start_mode: Option<StartMode>,
    ) -> Result<IterationRecord> {
        self.active_mut()?;
        let grid = self.grid(None)?;
        let fallback = self.default_lambda()?;
        let previous = self.al_head()?;
        let deps = make_deps(
            &self.manifest.config,
            self.manifest.seed,
            &self.dataset,
            &self.stores,
        );
        let al = self.manifest.active.as_mut().unwrap();
        let saved = al.settings.clone();
        if let Some(s) = skip_tuning {
            al.settings.skip_tuning = s;
        }
        if let Some(m) = start_mode {
            al.settings.start_mode = m;
        }
        let outcome = al.iterate(&deps, &grid, &fallback, previous.as_ref());
        al.settings = saved;
        let outcome = outcome?;
        let name = format!("al-{:04}", outcome.record.iteration);
        let reference = self.write_head(&outcome.head, &name)?;
        let al = self.manifest.active.as_mut().unwrap();
        let record = al.history.last_mut().expect("iterate appends a record");
        record.checkpoint = Some(reference);
        Ok(record.clone())
    }

    /// Predict every still-unlabeled image with the latest loop head and
    /// export the predictions CSV.
    pub fn al_finalize(&mut self) -> Result<Vec<ImagePrediction>> {
        let head = self.al_head()?;
        let al = self.active().ok_or(Error::NoModel)?;
        let deps = self.deps();
        let predictions = al.finalize(&deps, head.as_ref())?;
        let path = self.path(PREDICTIONS_EXPORT);
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
        atomic_write(
            &path,
            predictions_csv(&predictions, self.dataset.label_space()).as_bytes(),
        )?;
        self.manifest.predictions = Some(PREDICTIONS_EXPORT.to_string());
        Ok(predictions)
    }

    /// Labels known at ingest plus labels collected by the loop.
    pub fn all_labels(&self) -> Labels {
        let mut labels = self.labels();
        if let Some(al) = self.active() {
            labels.extend(al.labels.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        labels
    }
}
