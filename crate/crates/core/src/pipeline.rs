//! Glue between the dataset, the embedding stores and the classifier head:
//! training sets at a detector threshold, dataset-level prediction and
//! evaluation, and pixel embedding of whole projects.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{train_set, HeadModel, TrainConfig, TrainingSet};
use crate::embedding::{Embedder, EmbedderId, EmbeddingStore, EmbeddingVector};
use crate::error::{Error, Result};
use crate::imaging::{
    augment, crop_and_resize, crop_id, load_rgb, whole_image_id, AugmentationPolicy, CropConfig,
};
use crate::ingest::{BBox, Dataset, Detection, DetectorCategory, Labels};
use crate::merge::{argmax, merge_image, ImagePrediction, MergeRule, PipelineConfig};
use crate::metrics::{confusion, report, MetricReport};

/// Embedding stores keyed by provider name.
pub type StoreMap = BTreeMap<String, EmbeddingStore>;

/// One grid point: backbone and detector threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lambda {
    pub embedder: EmbedderId,
    pub alpha: f64,
}

impl Lambda {
    pub fn new(embedder: EmbedderId, alpha: f64) -> Self {
        Self { embedder, alpha }
    }
}

/// Crops of labeled images at one threshold.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub set: TrainingSet,
    /// Crops whose inherited label is not `empty`.
    pub non_empty_crops: usize,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Crops scored against the label of their image; `None` without crops.
    pub bb: Option<MetricReport>,
    /// Merged predictions of non-abstained images.
    pub image: MetricReport,
    /// Fraction of images that were not abstained.
    pub coverage: f64,
    pub predictions: Vec<ImagePrediction>,
}

/// Everything the pipeline needs besides the head and the hyperparameters.
#[derive(Debug, Clone)]
pub struct PipelineDeps<'a> {
    pub dataset: &'a Dataset,
    pub stores: &'a StoreMap,
    pub train: TrainConfig,
    pub beta: f64,
    pub merge_rule: MergeRule,
    /// Stored augmented variants used per training crop.
    pub augmentations: usize,
}

impl<'a> PipelineDeps<'a> {
    pub fn new(dataset: &'a Dataset, stores: &'a StoreMap) -> Self {
        Self {
            dataset,
            stores,
            train: TrainConfig::default(),
            beta: 0.0,
            merge_rule: MergeRule::Aggregate,
            augmentations: 0,
        }
    }

    pub fn store(&self, embedder: &EmbedderId) -> Result<&'a EmbeddingStore> {
        let store = self
            .stores
            .get(&embedder.name)
            .ok_or_else(|| Error::UnknownProvider(embedder.name.clone()))?;
        if store.dim() != embedder.dim {
            return Err(Error::DimensionMismatch {
                expected: embedder.dim,
                found: store.dim(),
            });
        }
        Ok(store)
    }

    pub fn config(&self, lambda: &Lambda) -> PipelineConfig {
        PipelineConfig {
            alpha: lambda.alpha,
            beta: self.beta,
            embedder: lambda.embedder.clone(),
            merge_rule: self.merge_rule,
        }
    }

    /// Crops of the high-confidence boxes of `ids`, each inheriting its image
    /// label. Unlabeled ids are skipped.
    pub fn training_data(
        &self,
        ids: &[String],
        labels: &Labels,
        lambda: &Lambda,
    ) -> Result<TrainingData> {
        let store = self.store(&lambda.embedder)?;
        let space = self.dataset.label_space();
        let empty = space.empty_index();
        let mut set = TrainingSet::new(store.dim());
        let mut non_empty_crops = 0;
        for id in ids {
            let Some(label) = labels.get(id) else {
                continue;
            };
            let k = space.require(label)?;
            let ds = self
                .dataset
                .detections(id)
                .ok_or_else(|| Error::NotQueriedOrUnknown(id.clone()))?;
            for (b, _) in ds.high_conf(lambda.alpha) {
                for a in 0..=self.augmentations {
                    set.push(store.require(&crop_id(id, b, a))?, k)?;
                }
                if k != empty {
                    non_empty_crops += 1 + self.augmentations;
                }
            }
        }
        Ok(TrainingData {
            set,
            non_empty_crops,
        })
    }

    /// Train a head on `ids` at `lambda`, starting from `init` or a cold head.
    pub fn train(
        &self,
        ids: &[String],
        labels: &Labels,
        lambda: &Lambda,
        init: Option<HeadModel>,
    ) -> Result<(HeadModel, Vec<f64>)> {
        let data = self.training_data(ids, labels, lambda)?;
        let head = match init {
            Some(h) => h,
            None => HeadModel::cold(
                self.dataset.label_space().clone(),
                lambda.embedder.dim,
                self.train.clone(),
            )?,
        };
        train_set(head, &data.set)
    }

    /// Class scores of the high-confidence boxes of one image.
    pub fn box_scores(
        &self,
        head: &HeadModel,
        image_id: &str,
        lambda: &Lambda,
    ) -> Result<Vec<(f64, Vec<f64>)>> {
        let store = self.store(&lambda.embedder)?;
        let ds = self
            .dataset
            .detections(image_id)
            .ok_or_else(|| Error::NotQueriedOrUnknown(image_id.to_string()))?;
        ds.high_conf(lambda.alpha)
            .map(|(b, det)| {
                Ok((
                    det.confidence,
                    head.scores(store.require(&crop_id(image_id, b, 0))?)?,
                ))
            })
            .collect()
    }

    /// Merged predictions for `ids`, ordered by image id.
    pub fn predict(
        &self,
        head: &HeadModel,
        ids: &[String],
        lambda: &Lambda,
    ) -> Result<Vec<ImagePrediction>> {
        let cfg = self.config(lambda);
        cfg.validate()?;
        let space = self.dataset.label_space();
        let mut sorted: Vec<&String> = ids.iter().collect();
        sorted.sort();
        sorted.dedup();
        sorted
            .par_iter()
            .map(|id| {
                let ds = self
                    .dataset
                    .detections(id)
                    .ok_or_else(|| Error::NotQueriedOrUnknown(id.to_string()))?;
                let scores = self.box_scores(head, id, lambda)?;
                merge_image(ds, &scores, space, &cfg)
            })
            .collect()
    }

    /// Bounding-box-level and image-level reports on the labeled ids.
    pub fn evaluate(
        &self,
        head: &HeadModel,
        ids: &[String],
        labels: &Labels,
        lambda: &Lambda,
    ) -> Result<Evaluation> {
        let labeled: Vec<String> = ids
            .iter()
            .filter(|id| labels.contains_key(*id))
            .cloned()
            .collect();
        if labeled.is_empty() {
            return Err(Error::NoLabels);
        }
        let space = self.dataset.label_space();
        let store = self.store(&lambda.embedder)?;
        let (mut bb_truth, mut bb_pred) = (Vec::new(), Vec::new());
        for id in &labeled {
            let ds = self
                .dataset
                .detections(id)
                .ok_or_else(|| Error::NotQueriedOrUnknown(id.clone()))?;
            for (b, _) in ds.high_conf(lambda.alpha) {
                let s = head.scores(store.require(&crop_id(id, b, 0))?)?;
                bb_truth.push(labels[id].as_str());
                bb_pred.push(space.name(argmax(&s)));
            }
        }
        let bb = if bb_truth.is_empty() {
            None
        } else {
            Some(report(&confusion(&bb_truth, &bb_pred, space)?)?)
        };
        let predictions = self.predict(head, &labeled, lambda)?;
        let (image, coverage) = image_report(&predictions, labels, self.dataset)?;
        Ok(Evaluation {
            bb,
            image,
            coverage,
            predictions,
        })
    }
}

/// Report over non-abstained predictions and the fraction they make up.
pub fn image_report(
    predictions: &[ImagePrediction],
    labels: &Labels,
    dataset: &Dataset,
) -> Result<(MetricReport, f64)> {
    let kept: Vec<&ImagePrediction> = predictions.iter().filter(|p| !p.abstained).collect();
    let mut truth = Vec::with_capacity(kept.len());
    let mut pred = Vec::with_capacity(kept.len());
    for p in &kept {
        let t = labels
            .get(&p.image_id)
            .ok_or_else(|| Error::NotQueriedOrUnknown(p.image_id.clone()))?;
        truth.push(t.as_str());
        pred.push(p.label.as_str());
    }
    let cm = confusion(&truth, &pred, dataset.label_space())?;
    let coverage = if predictions.is_empty() {
        0.0
    } else {
        kept.len() as f64 / predictions.len() as f64
    };
    Ok((report(&cm)?, coverage))
}

/// Train a head directly on whole-image features (no detector).
pub fn train_whole_image(
    dataset: &Dataset,
    store: &EmbeddingStore,
    ids: &[String],
    labels: &Labels,
    config: TrainConfig,
) -> Result<HeadModel> {
    let space = dataset.label_space();
    let mut set = TrainingSet::new(store.dim());
    for id in ids {
        if let Some(label) = labels.get(id) {
            set.push(store.require(&whole_image_id(id))?, space.require(label)?)?;
        }
    }
    let head = HeadModel::cold(space.clone(), store.dim(), config)?;
    Ok(train_set(head, &set)?.0)
}

/// Whole-image predictions: the label is the argmax of the head's scores.
pub fn predict_whole_image(
    head: &HeadModel,
    store: &EmbeddingStore,
    ids: &[String],
) -> Result<Vec<ImagePrediction>> {
    let space = head.label_space();
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    sorted.dedup();
    sorted
        .iter()
        .map(|id| {
            let scores = head.scores(store.require(&whole_image_id(id))?)?;
            let top = argmax(&scores);
            Ok(ImagePrediction {
                image_id: id.to_string(),
                label: space.name(top).to_string(),
                confidence: scores[top],
                counts: vec![0; scores.len()],
                scores,
                abstained: false,
            })
        })
        .collect()
}

/// Settings for computing embeddings from image files.
#[derive(Debug, Clone, Default)]
pub struct PixelEmbedding {
    pub crop: CropConfig,
    pub policy: AugmentationPolicy,
    pub augmentations: usize,
    /// Boxes below this confidence are never used and are not embedded.
    pub min_confidence: f64,
}

/// Embed every animal box (plus augmentations) and every whole image of
/// `dataset` whose file resolves under `root`.
pub fn embed_pixels(
    dataset: &Dataset,
    root: &Path,
    embedder: &dyn Embedder,
    settings: &PixelEmbedding,
) -> Result<EmbeddingStore> {
    settings.crop.validate()?;
    let per_image: Vec<Vec<EmbeddingVector>> = dataset
        .images()
        .par_iter()
        .zip(dataset.detection_sets().par_iter())
        .map(|(img, ds)| {
            let Some(file) = &img.file_path else {
                return Err(Error::MissingFile(root.join(&img.image_id)));
            };
            let pixels = load_rgb(&root.join(file))?;
            let mut out = Vec::new();
            let whole = Detection {
                bbox: BBox::full(),
                confidence: 1.0,
                category: DetectorCategory::Animal,
            };
            let mut crop = crop_and_resize(&img.image_id, 0, &pixels, &whole, &settings.crop)?;
            crop.crop_id = whole_image_id(&img.image_id);
            out.push(embedder.embed_crop(&crop)?);
            for (b, det) in ds.detections.iter().enumerate() {
                if det.category != DetectorCategory::Animal
                    || det.confidence < settings.min_confidence
                {
                    continue;
                }
                let crop = crop_and_resize(&img.image_id, b, &pixels, det, &settings.crop)?;
                out.push(embedder.embed_crop(&crop)?);
                for variant in augment(&crop, &settings.policy, settings.augmentations)? {
                    out.push(embedder.embed_crop(&variant)?);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut store = EmbeddingStore::new(embedder.id().clone())?;
    for v in per_image.into_iter().flatten() {
        store.insert(v.crop_id, &v.values)?;
    }
    Ok(store)
}
