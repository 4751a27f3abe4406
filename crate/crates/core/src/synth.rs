//! Synthetic camera-trap projects with known ground truth.
//!
//! Each non-empty image holds 1..=`max_animals` animal boxes whose latent
//! features sit around a class mean; empty images may hold spurious boxes
//! whose features are clutter around the origin. Class means are orthogonal
//! with norm `separation` (random directions if there are more animal classes
//! than dimensions). Every simulated backbone adds its own noise to the
//! latent features. With effective spread `sqrt(spread² + noise²)` below
//! `separation / 8` the classes are linearly separable with a margin of more
//! than 5 standard deviations.
//!
//! Whole-image features (for the no-detector baseline) mix a per-station
//! background, per-image background noise and a diluted copy of the animal
//! signal.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{write_store, EmbedderId, EmbeddingStore};
use crate::error::{Error, Result};
use crate::imaging::{crop_id, whole_image_id};
use crate::ingest::{
    write_detector_file, write_labels, write_manifest, BBox, Dataset, Detection, DetectionSet,
    ImageRecord, LabelSpace, Labels, EMPTY,
};
use crate::seed;

/// `lo + (hi - lo) · Beta(a, b)`, rounded to 3 decimals like detector output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceDist {
    pub a: f64,
    pub b: f64,
    #[serde(default)]
    pub lo: f64,
    #[serde(default = "one")]
    pub hi: f64,
}

fn one() -> f64 {
    1.0
}

impl ConfidenceDist {
    pub fn beta(a: f64, b: f64) -> Self {
        Self {
            a,
            b,
            lo: 0.0,
            hi: 1.0,
        }
    }

    fn sample(&self, sampler: &Beta<f64>, rng: &mut ChaCha8Rng) -> f64 {
        let v = self.lo + (self.hi - self.lo) * sampler.sample(rng);
        ((v * 1000.0).round() / 1000.0).clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEmbedder {
    pub name: String,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_images: usize,
    pub n_stations: usize,
    pub classes: Vec<String>,
    pub class_proportions: Vec<f64>,
    pub dim: usize,
    pub separation: f64,
    pub spread: f64,
    pub clutter_spread: f64,
    pub station_shift: f64,
    pub true_conf: ConfidenceDist,
    pub spurious_conf: ConfidenceDist,
    /// Probability that an empty image carries spurious boxes (1 or 2).
    pub spurious_box_prob: f64,
    pub max_animals: usize,
    /// Fraction of images whose label is visible in the generated dataset.
    pub labeled_fraction: f64,
    /// Stored augmented variants per box (`#1`..`#k` crop ids).
    pub augmentations: usize,
    pub whole_image_signal: f64,
    pub background_spread: f64,
    pub embedders: Vec<SynthEmbedder>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_images: 2000,
            n_stations: 8,
            classes: ["empty", "fox", "roe_deer", "wild_boar", "badger"]
                .map(String::from)
                .to_vec(),
            class_proportions: vec![0.4, 0.25, 0.15, 0.12, 0.08],
            dim: 16,
            separation: 3.0,
            spread: 1.0,
            clutter_spread: 1.5,
            station_shift: 0.3,
            true_conf: ConfidenceDist::beta(5.0, 2.0),
            spurious_conf: ConfidenceDist::beta(2.0, 6.0),
            spurious_box_prob: 0.6,
            max_animals: 3,
            labeled_fraction: 1.0,
            augmentations: 0,
            whole_image_signal: 0.35,
            background_spread: 1.5,
            embedders: vec![
                SynthEmbedder {
                    name: "xception".into(),
                    noise: 0.3,
                },
                SynthEmbedder {
                    name: "densenet121".into(),
                    noise: 0.6,
                },
            ],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<LabelSpace> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_images == 0 || self.n_stations == 0 || self.dim == 0 || self.max_animals == 0 {
            return bad("n_images, n_stations, dim and max_animals must be positive".into());
        }
        let space =
            LabelSpace::new(self.classes.clone()).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        if self.class_proportions.len() != space.len() {
            return bad(format!(
                "{} proportions for {} classes",
                self.class_proportions.len(),
                space.len()
            ));
        }
        if self
            .class_proportions
            .iter()
            .any(|p| p.is_nan() || *p < 0.0)
        {
            return bad("class proportions must be non-negative".into());
        }
        let sum: f64 = self.class_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("class proportions sum to {sum}, not 1"));
        }
        for (name, v) in [
            ("separation", self.separation),
            ("spread", self.spread),
            ("clutter_spread", self.clutter_spread),
            ("station_shift", self.station_shift),
            ("whole_image_signal", self.whole_image_signal),
            ("background_spread", self.background_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        for (name, p) in [
            ("spurious_box_prob", self.spurious_box_prob),
            ("labeled_fraction", self.labeled_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0,1]"));
            }
        }
        for (name, c) in [
            ("true_conf", self.true_conf),
            ("spurious_conf", self.spurious_conf),
        ] {
            if !(c.a > 0.0 && c.b > 0.0 && 0.0 <= c.lo && c.lo <= c.hi && c.hi <= 1.0) {
                return bad(format!("{name} needs a, b > 0 and 0 <= lo <= hi <= 1"));
            }
        }
        if self.embedders.is_empty() {
            return bad("at least one embedder required".into());
        }
        let mut names: Vec<&str> = self.embedders.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.embedders.len() {
            return bad("embedder names must be unique".into());
        }
        if self
            .embedders
            .iter()
            .any(|e| !(e.noise >= 0.0 && e.noise.is_finite()))
        {
            return bad("embedder noise must be finite and non-negative".into());
        }
        Ok(space)
    }

    /// Margin between class clusters in standard deviations of `embedder`.
    pub fn separation_margin_sigmas(&self, embedder: &SynthEmbedder) -> f64 {
        let sigma = (self.spread.powi(2) + embedder.noise.powi(2)).sqrt();
        if sigma == 0.0 {
            f64::INFINITY
        } else {
            self.separation / (std::f64::consts::SQRT_2 * sigma)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticProject {
    /// Images and detections; only the visible fraction carries labels.
    pub dataset: Dataset,
    /// Ground truth for every image.
    pub truth: Labels,
    /// One store per simulated backbone, in spec order.
    pub stores: Vec<EmbeddingStore>,
}

impl SyntheticProject {
    pub fn store(&self, name: &str) -> Option<&EmbeddingStore> {
        self.stores.iter().find(|s| s.provider().name == name)
    }

    /// Dataset with every image labeled from the ground truth.
    pub fn fully_labeled(&self) -> Dataset {
        self.dataset
            .clone()
            .with_labels(&self.truth)
            .expect("truth covers the label space")
    }

    /// Write `images.csv`, `labels.csv`, `truth.csv`, `detections.json` and
    /// `embeddings/<name>.wlemb` under `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        let emb_dir = dir.join("embeddings");
        std::fs::create_dir_all(&emb_dir).map_err(|e| Error::io(&emb_dir, e))?;
        write_manifest(&self.dataset, &dir.join("images.csv"))?;
        write_labels(&self.dataset.labels(), &dir.join("labels.csv"))?;
        write_labels(&self.truth, &dir.join("truth.csv"))?;
        write_detector_file(&self.dataset, &dir.join("detections.json"))?;
        for store in &self.stores {
            write_store(
                store,
                &emb_dir.join(format!("{}.wlemb", store.provider().name)),
            )?;
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sd: f64, dim: usize) -> Vec<f64> {
    if sd == 0.0 {
        return vec![0.0; dim];
    }
    let n = Normal::new(0.0, sd).expect("sd is finite and positive");
    (0..dim).map(|_| n.sample(rng)).collect()
}

fn add(a: &mut [f64], b: &[f64], scale: f64) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
}

struct BoxLatent {
    crop_id: String,
    latent: Vec<f64>,
}

pub fn generate_synthetic_project(spec: &SynthSpec, seed: u64) -> Result<SyntheticProject> {
    let space = spec.validate()?;
    let dim = spec.dim;
    let empty = space.empty_index();
    let mut rng = seed::rng(seed, "synth");

    let animal_classes: Vec<usize> = (0..space.len()).filter(|&k| k != empty).collect();
    let mut means = vec![vec![0.0; dim]; space.len()];
    for (m, &k) in animal_classes.iter().enumerate() {
        if animal_classes.len() <= dim {
            means[k][m] = spec.separation;
        } else {
            let dir = gaussian(&mut rng, 1.0, dim);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            means[k] = dir.iter().map(|v| v * spec.separation / norm).collect();
        }
    }
    let stations: Vec<String> = (0..spec.n_stations)
        .map(|s| format!("st{:02}", s + 1))
        .collect();
    let offsets: Vec<Vec<f64>> = stations
        .iter()
        .map(|_| gaussian(&mut rng, spec.station_shift, dim))
        .collect();
    let backgrounds: Vec<Vec<f64>> = stations
        .iter()
        .map(|_| gaussian(&mut rng, spec.background_spread, dim))
        .collect();

    let class_dist = WeightedIndex::new(&spec.class_proportions)
        .map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let true_beta = Beta::new(spec.true_conf.a, spec.true_conf.b)
        .map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let spur_beta = Beta::new(spec.spurious_conf.a, spec.spurious_conf.b)
        .map_err(|e| Error::InvalidSpec(e.to_string()))?;

    let width = spec.n_images.to_string().len().max(5);
    let mut images = Vec::with_capacity(spec.n_images);
    let mut sets = Vec::with_capacity(spec.n_images);
    let mut truth = Labels::new();
    let mut latents: Vec<BoxLatent> = Vec::new();
    for i in 0..spec.n_images {
        let image_id = format!("img{i:0width$}");
        let s = rng.random_range(0..spec.n_stations);
        let class = class_dist.sample(&mut rng);
        let mut detections = Vec::new();
        let mut animal_sum = vec![0.0; dim];
        let (n_boxes, is_animal) = if class != empty {
            (rng.random_range(1..=spec.max_animals), true)
        } else if rng.random_bool(spec.spurious_box_prob) {
            (rng.random_range(1..=2), false)
        } else {
            (0, false)
        };
        for b in 0..n_boxes {
            let bbox = BBox::new(
                rng.random_range(0.0..0.7),
                rng.random_range(0.0..0.7),
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
            );
            let (conf, mut latent) = if is_animal {
                let conf = spec.true_conf.sample(&true_beta, &mut rng);
                let mut v = means[class].clone();
                add(&mut v, &gaussian(&mut rng, spec.spread, dim), 1.0);
                (conf, v)
            } else {
                let conf = spec.spurious_conf.sample(&spur_beta, &mut rng);
                (conf, gaussian(&mut rng, spec.clutter_spread, dim))
            };
            add(&mut latent, &offsets[s], 1.0);
            if is_animal {
                add(&mut animal_sum, &latent, 1.0 / n_boxes as f64);
            }
            detections.push(Detection::animal(bbox, conf));
            latents.push(BoxLatent {
                crop_id: crop_id(&image_id, b, 0),
                latent,
            });
        }
        let mut whole = backgrounds[s].clone();
        add(
            &mut whole,
            &gaussian(&mut rng, spec.background_spread, dim),
            1.0,
        );
        add(&mut whole, &animal_sum, spec.whole_image_signal);
        latents.push(BoxLatent {
            crop_id: whole_image_id(&image_id),
            latent: whole,
        });

        truth.insert(image_id.clone(), space.name(class).to_string());
        images.push(ImageRecord {
            image_id: image_id.clone(),
            station_id: stations[s].clone(),
            file_path: None,
            label: None,
            capture_time: None,
        });
        sets.push(DetectionSet {
            image_id,
            detections,
        });
    }

    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let visible = (spec.labeled_fraction * images.len() as f64).round() as usize;
    for &i in &order[..visible] {
        images[i].label = Some(truth[&images[i].image_id].clone());
    }

    let stores = spec
        .embedders
        .iter()
        .map(|e| {
            let mut erng = seed::rng(seed, &format!("synth-embedder:{}", e.name));
            let mut store = EmbeddingStore::new(EmbedderId::new(&e.name, dim))?;
            let jitter = 0.25 * spec.spread;
            for bl in &latents {
                let mut v = bl.latent.clone();
                add(&mut v, &gaussian(&mut erng, e.noise, dim), 1.0);
                let row: Vec<f32> = v.iter().map(|&x| x as f32).collect();
                store.insert(bl.crop_id.clone(), &row)?;
                if !bl.crop_id.contains("#full#") {
                    let base = bl.crop_id.strip_suffix("#0").unwrap_or(&bl.crop_id);
                    for a in 1..=spec.augmentations {
                        let mut va = v.clone();
                        add(&mut va, &gaussian(&mut erng, jitter, dim), 1.0);
                        let row: Vec<f32> = va.iter().map(|&x| x as f32).collect();
                        store.insert(format!("{base}#{a}"), &row)?;
                    }
                }
            }
            Ok(store)
        })
        .collect::<Result<Vec<_>>>()?;

    let dataset = Dataset::new(space, images, sets)?;
    debug_assert!(truth.values().all(|l| dataset.label_space().contains(l)));
    debug_assert!(dataset.label_space().contains(EMPTY));
    Ok(SyntheticProject {
        dataset,
        truth,
        stores,
    })
}

/// Settings for [`SyntheticProject::render`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSpec {
    pub width: u32,
    pub height: u32,
    /// Per-pixel noise, in intensity units.
    pub pixel_noise: f64,
    /// Per-box shift of the class color, per channel.
    pub color_jitter: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            width: 96,
            height: 64,
            pixel_noise: 12.0,
            color_jitter: 30.0,
        }
    }
}

/// Color of animal class `m` out of `n`: evenly spaced hues.
fn class_color(m: usize, n: usize) -> [f64; 3] {
    let hue = m as f64 / n.max(1) as f64 * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [40.0 + 160.0 * r, 40.0 + 160.0 * g, 40.0 + 160.0 * b]
}

fn pixel_rect(bbox: &BBox, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let x0 = ((bbox.x * width as f64).floor() as u32).min(width - 1);
    let y0 = ((bbox.y * height as f64).floor() as u32).min(height - 1);
    let x1 = (((bbox.x + bbox.w) * width as f64).ceil() as u32).clamp(x0 + 1, width);
    let y1 = (((bbox.y + bbox.h) * height as f64).ceil() as u32).clamp(y0 + 1, height);
    (x0, y0, x1, y1)
}

impl SyntheticProject {
    /// Draw every image as a PNG under `dir/images` and return the dataset
    /// with file paths relative to `dir`.
    ///
    /// Backgrounds are a per-station color plus noise. Animal boxes are
    /// filled with their class color and a class-specific stripe period;
    /// spurious boxes are blotches near the background color.
    pub fn render(&self, dir: &Path, spec: &RenderSpec, seed: u64) -> Result<Dataset> {
        if spec.width == 0 || spec.height == 0 {
            return Err(Error::InvalidSpec("render size must be positive".into()));
        }
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let space = self.dataset.label_space();
        let empty = space.empty_index();
        let animal_count = space.len() - 1;
        let records: Vec<ImageRecord> = self
            .dataset
            .images()
            .par_iter()
            .zip(self.dataset.detection_sets().par_iter())
            .map(|(record, ds)| {
                let mut srng = seed::rng(seed, &format!("render-station:{}", record.station_id));
                let base: [f64; 3] = std::array::from_fn(|_| srng.random_range(60.0..160.0));
                let mut rng = seed::rng(seed, &format!("render:{}", record.image_id));
                let noise = Normal::new(0.0, spec.pixel_noise.max(1e-9)).expect("finite sd");
                let jitter = Normal::new(0.0, spec.color_jitter.max(1e-9)).expect("finite sd");
                let mut canvas: Vec<[f64; 3]> = (0..spec.width * spec.height)
                    .map(|_| std::array::from_fn(|c| base[c] + noise.sample(&mut rng)))
                    .collect();
                let class = space.require(&self.truth[&record.image_id])?;
                for det in &ds.detections {
                    let (x0, y0, x1, y1) = pixel_rect(&det.bbox, spec.width, spec.height);
                    let (color, period) = if class == empty {
                        let c: [f64; 3] =
                            std::array::from_fn(|c| base[c] + 1.5 * jitter.sample(&mut rng));
                        (c, 0)
                    } else {
                        let m = if class < empty { class } else { class - 1 };
                        let mut c = class_color(m, animal_count);
                        c.iter_mut().for_each(|v| *v += jitter.sample(&mut rng));
                        (c, 2 + m)
                    };
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let stripe = if period > 0 && (x as usize / period).is_multiple_of(2) {
                                35.0
                            } else {
                                0.0
                            };
                            let px = &mut canvas[(y * spec.width + x) as usize];
                            for c in 0..3 {
                                px[c] = color[c] - stripe + noise.sample(&mut rng);
                            }
                        }
                    }
                }
                let img = RgbImage::from_fn(spec.width, spec.height, |x, y| {
                    let px = canvas[(y * spec.width + x) as usize];
                    Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8))
                });
                let rel = format!("images/{}.png", record.image_id);
                let path = dir.join(&rel);
                img.save(&path)
                    .map_err(|source| Error::Image { path, source })?;
                Ok(ImageRecord {
                    file_path: Some(rel),
                    ..record.clone()
                })
            })
            .collect::<Result<_>>()?;
        Dataset::new(
            space.clone(),
            records,
            self.dataset.detection_sets().to_vec(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            n_images: 200,
            n_stations: 4,
            ..Default::default()
        }
    }

    #[test]
    fn proportions_must_sum_to_one() {
        let spec = SynthSpec {
            class_proportions: vec![0.3, 0.2, 0.2, 0.1, 0.1],
            ..small()
        };
        assert!(matches!(
            generate_synthetic_project(&spec, 1),
            Err(Error::InvalidSpec(_))
        ));
        let spec = SynthSpec {
            n_images: 0,
            ..small()
        };
        assert!(matches!(
            generate_synthetic_project(&spec, 1),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn no_spurious_boxes_means_empty_images_have_no_detections() {
        let spec = SynthSpec {
            spurious_box_prob: 0.0,
            ..small()
        };
        let p = generate_synthetic_project(&spec, 3).unwrap();
        let mut empties = 0;
        for (id, label) in &p.truth {
            if label == EMPTY {
                empties += 1;
                assert!(p.dataset.detections(id).unwrap().detections.is_empty());
            } else {
                assert!(!p.dataset.detections(id).unwrap().detections.is_empty());
            }
        }
        assert!(empties > 0);
    }

    #[test]
    fn every_box_has_an_embedding() {
        let spec = SynthSpec {
            augmentations: 2,
            ..small()
        };
        let p = generate_synthetic_project(&spec, 5).unwrap();
        for store in &p.stores {
            for set in p.dataset.detection_sets() {
                for b in 0..set.detections.len() {
                    for a in 0..=2 {
                        assert!(store.get(&crop_id(&set.image_id, b, a)).is_some());
                    }
                }
                assert!(store.get(&whole_image_id(&set.image_id)).is_some());
            }
        }
    }

    #[test]
    fn labeled_fraction_hides_labels() {
        let spec = SynthSpec {
            labeled_fraction: 0.25,
            ..small()
        };
        let p = generate_synthetic_project(&spec, 5).unwrap();
        assert_eq!(p.dataset.labeled_ids().len(), 50);
        assert_eq!(p.truth.len(), 200);
        for (id, l) in p.dataset.labels() {
            assert_eq!(p.truth[&id], l);
        }
    }
}
