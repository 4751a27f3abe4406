//! Project directory: one JSON state file plus data, checkpoints and
//! embedding stores.
//!
//! ```text
//! <project>/
//!   project.json        state (source of truth)
//!   project.lock        held by the single writer
//!   images.csv          image manifest
//!   labels.csv          labels known at ingest
//!   detections.json     detector output
//!   splits.csv          export of the train/val/test split
//!   tuning.csv          export of the last grid search
//!   history.csv         export of the active-learning history
//!   al_labels.csv       export of labels collected by active learning
//!   checkpoints/*.ckpt  classifier heads
//!   embeddings/*.wlemb  embedding stores, one per provider
//!   exports/predictions.csv
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place, and
//! `project.json` is written last, so readers see either the old or the new
//! state.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::active::ALState;
use crate::classifier::{read_checkpoint, write_checkpoint_to, HeadModel};
use crate::config::EngineConfig;
use crate::embedding::{read_store, write_store_to, EmbeddingStore};
use crate::error::{Error, Result};
use crate::ingest::{
    load_project, read_json, write_detector_file, write_labels, write_manifest, Dataset,
    LabelSpace, Labels,
};
use crate::pipeline::{Lambda, PipelineDeps, StoreMap};
use crate::tuning::{tuning_csv, SplitAssignment, TuningRecord};

pub const STATE_FILE: &str = "project.json";
pub const LOCK_FILE: &str = "project.lock";
/// Major version of the state format; unknown fields within a major version
/// are ignored.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFiles {
    pub images: String,
    pub labels: String,
    pub detections: String,
}

impl Default for DataFiles {
    fn default() -> Self {
        Self {
            images: "images.csv".into(),
            labels: "labels.csv".into(),
            detections: "detections.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectManifest {
    pub version: u32,
    /// Incremented by every save.
    pub revision: u64,
    pub seed: u64,
    pub label_space: LabelSpace,
    pub config: EngineConfig,
    pub files: DataFiles,
    /// Directory that relative image paths of the manifest resolve against.
    #[serde(default)]
    pub image_root: Option<PathBuf>,
    /// Provider name to store file, relative to the project root.
    #[serde(default)]
    pub embeddings: BTreeMap<String, String>,
    #[serde(default)]
    pub split: Option<SplitAssignment>,
    #[serde(default)]
    pub tuning: Vec<TuningRecord>,
    #[serde(default)]
    pub lambda: Option<Lambda>,
    /// Checkpoint of the model produced by `tune` or `train`.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub active: Option<ALState>,
    /// Last exported predictions, relative to the project root.
    #[serde(default)]
    pub predictions: Option<String>,
}

impl ProjectManifest {
    /// Every file the state refers to.
    pub fn referenced_files(&self) -> Vec<String> {
        let mut out = vec![
            self.files.images.clone(),
            self.files.labels.clone(),
            self.files.detections.clone(),
        ];
        out.extend(self.embeddings.values().cloned());
        out.extend(self.model.iter().cloned());
        out.extend(self.tuning.iter().filter_map(|r| r.checkpoint.clone()));
        if let Some(al) = &self.active {
            out.extend(al.history.iter().filter_map(|r| r.checkpoint.clone()));
        }
        out.extend(self.predictions.iter().cloned());
        out
    }
}

/// Write through a temporary file in the same directory, then rename.
pub fn atomic_write_with(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempfile_in(dir)
        .map_err(|e| Error::io(dir, e))?;
    write(tmp.path())?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write_with(path, |tmp| {
        let mut f = OpenOptions::new()
            .write(true)
            .truncate(true)
            .open(tmp)
            .map_err(|e| Error::io(tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(tmp, e))
    })
}

/// Exclusive writer lock; released on drop.
#[derive(Debug)]
pub struct ProjectLock {
    path: PathBuf,
}

impl ProjectLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::ProjectLocked(path))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for ProjectLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug)]
pub struct Project {
    root: PathBuf,
    lock: Option<ProjectLock>,
    pub manifest: ProjectManifest,
    pub dataset: Dataset,
    pub stores: StoreMap,
}

fn empty_dataset(space: &LabelSpace) -> Result<Dataset> {
    Dataset::new(space.clone(), Vec::new(), Vec::new())
}

impl Project {
    /// Create a project in `root` (created if needed; must not hold a project).
    pub fn init(
        root: &Path,
        label_space: LabelSpace,
        config: EngineConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        if root.join(STATE_FILE).exists() {
            return Err(Error::InvalidConfig(format!(
                "{} already contains a project",
                root.display()
            )));
        }
        let lock = ProjectLock::acquire(root)?;
        let manifest = ProjectManifest {
            version: FORMAT_VERSION,
            revision: 0,
            seed,
            label_space: label_space.clone(),
            config,
            files: DataFiles::default(),
            image_root: None,
            embeddings: BTreeMap::new(),
            split: None,
            tuning: Vec::new(),
            lambda: None,
            model: None,
            active: None,
            predictions: None,
        };
        let mut project = Self {
            root: root.to_path_buf(),
            lock: Some(lock),
            manifest,
            dataset: empty_dataset(&label_space)?,
            stores: StoreMap::new(),
        };
        project.write_dataset_files()?;
        project.save()?;
        Ok(project)
    }

    /// Open for writing; fails with `ProjectLocked` if another writer holds it.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.join(STATE_FILE).exists() {
            return Err(Error::MissingFile(root.join(STATE_FILE)));
        }
        let lock = ProjectLock::acquire(root)?;
        let mut p = Self::load(root)?;
        p.lock = Some(lock);
        Ok(p)
    }

    /// Open without taking the writer lock.
    pub fn open_read_only(root: &Path) -> Result<Self> {
        Self::load(root)
    }

    fn load(root: &Path) -> Result<Self> {
        let state_path = root.join(STATE_FILE);
        let raw: serde_json::Value = read_json(&state_path)?;
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let manifest: ProjectManifest = serde_json::from_value(raw)
            .map_err(|e| Error::CorruptState(format!("{}: {e}", state_path.display())))?;
        for file in manifest.referenced_files() {
            let path = root.join(&file);
            if !path.exists() {
                return Err(Error::MissingFile(path));
            }
        }
        if let Some(al) = &manifest.active {
            al.check()?;
        }
        let dataset = load_project(
            &root.join(&manifest.files.images),
            Some(&root.join(&manifest.files.labels)),
            &root.join(&manifest.files.detections),
            &manifest.label_space,
        )?;
        let mut stores = StoreMap::new();
        for (name, file) in &manifest.embeddings {
            let store = read_store(&root.join(file))?;
            if &store.provider().name != name {
                return Err(Error::CorruptState(format!(
                    "{file} holds provider {:?}, expected {name:?}",
                    store.provider().name
                )));
            }
            stores.insert(name.clone(), store);
        }
        Ok(Self {
            root: root.to_path_buf(),
            lock: None,
            manifest,
            dataset,
            stores,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    fn require_writer(&self) -> Result<()> {
        if self.lock.is_none() {
            return Err(Error::ProjectLocked(self.root.join(LOCK_FILE)));
        }
        Ok(())
    }

    /// Persist the state and its CSV exports.
    pub fn save(&mut self) -> Result<()> {
        self.require_writer()?;
        let m = &self.manifest;
        if let Some(split) = &m.split {
            atomic_write(&self.root.join("splits.csv"), split.to_csv().as_bytes())?;
        }
        if !m.tuning.is_empty() {
            atomic_write(
                &self.root.join("tuning.csv"),
                tuning_csv(&m.tuning).as_bytes(),
            )?;
        }
        if let Some(al) = &m.active {
            atomic_write(&self.root.join("history.csv"), al.history_csv().as_bytes())?;
            let labels = al.labeled_labels();
            atomic_write_with(&self.root.join("al_labels.csv"), |tmp| {
                write_labels(&labels, tmp)
            })?;
        }
        self.manifest.revision += 1;
        let json = serde_json::to_vec_pretty(&self.manifest)
            .map_err(|e| Error::CorruptState(format!("cannot serialize state: {e}")))?;
        atomic_write(&self.root.join(STATE_FILE), &json)
    }

    fn write_dataset_files(&self) -> Result<()> {
        let f = &self.manifest.files;
        atomic_write_with(&self.root.join(&f.images), |tmp| {
            write_manifest(&self.dataset, tmp)
        })?;
        atomic_write_with(&self.root.join(&f.labels), |tmp| {
            write_labels(&self.dataset.labels(), tmp)
        })?;
        atomic_write_with(&self.root.join(&f.detections), |tmp| {
            write_detector_file(&self.dataset, tmp)
        })
    }

    /// Replace the dataset. Everything derived from the old one (split,
    /// tuning, models, loop state) is dropped.
    pub fn set_dataset(&mut self, dataset: Dataset) -> Result<()> {
        self.require_writer()?;
        if dataset.label_space() != &self.manifest.label_space {
            return Err(Error::InvalidLabelSpace(
                "dataset label space differs from the project".into(),
            ));
        }
        self.dataset = dataset;
        self.write_dataset_files()?;
        let m = &mut self.manifest;
        m.split = None;
        m.tuning.clear();
        m.lambda = None;
        m.model = None;
        m.active = None;
        m.predictions = None;
        Ok(())
    }

    /// Load manifest, labels and detector output from external files.
    pub fn ingest(
        &mut self,
        images: &Path,
        labels: Option<&Path>,
        detections: &Path,
    ) -> Result<Vec<String>> {
        let dataset = load_project(images, labels, detections, &self.manifest.label_space)?;
        let warnings = dataset.warnings.clone();
        self.set_dataset(dataset)?;
        let parent = images
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        self.manifest.image_root = Some(parent.canonicalize().map_err(|e| Error::io(parent, e))?);
        Ok(warnings)
    }

    pub fn add_store(&mut self, store: EmbeddingStore) -> Result<()> {
        self.require_writer()?;
        let name = store.provider().name.clone();
        if name.is_empty()
            || !name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(Error::InvalidConfig(format!(
                "provider name {name:?} is not a valid file name"
            )));
        }
        let rel = format!("embeddings/{name}.wlemb");
        let path = self.root.join(&rel);
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
        let mut bytes = Vec::new();
        write_store_to(&store, &mut bytes).map_err(|e| Error::io(&path, e))?;
        atomic_write(&path, &bytes)?;
        self.manifest.embeddings.insert(name.clone(), rel);
        self.stores.insert(name, store);
        Ok(())
    }

    /// Write a checkpoint under `checkpoints/` and return its reference.
    pub fn write_head(&self, head: &HeadModel, name: &str) -> Result<String> {
        self.require_writer()?;
        let rel = format!("checkpoints/{name}.ckpt");
        let path = self.root.join(&rel);
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
        let mut bytes = Vec::new();
        write_checkpoint_to(head, &mut bytes).map_err(|e| Error::io(&path, e))?;
        atomic_write(&path, &bytes)?;
        Ok(rel)
    }

    pub fn read_head(&self, reference: &str) -> Result<HeadModel> {
        read_checkpoint(&self.root.join(reference))
    }

    /// File of an image, if the manifest names one.
    pub fn image_path(&self, image_id: &str) -> Option<PathBuf> {
        let file = self.dataset.image(image_id)?.file_path.as_ref()?;
        let root = self
            .manifest
            .image_root
            .clone()
            .unwrap_or_else(|| self.root.clone());
        Some(root.join(file))
    }

    /// Labels known at ingest.
    pub fn labels(&self) -> Labels {
        self.dataset.labels()
    }

    pub fn deps(&self) -> PipelineDeps<'_> {
        let cfg = &self.manifest.config;
        let mut train = cfg.train.clone();
        train.seed = crate::seed::derive(self.manifest.seed, &format!("train:{}", cfg.train.seed));
        PipelineDeps {
            dataset: &self.dataset,
            stores: &self.stores,
            train,
            beta: cfg.beta,
            merge_rule: cfg.merge_rule,
            augmentations: cfg.augmentations,
        }
    }

    /// Read an existing state file without loading the data, e.g. to check
    /// what a concurrent writer last committed.
    pub fn read_manifest(root: &Path) -> Result<ProjectManifest> {
        let state_path = root.join(STATE_FILE);
        let f = File::open(&state_path).map_err(|e| Error::io(&state_path, e))?;
        serde_json::from_reader(std::io::BufReader::new(f))
            .map_err(|e| Error::CorruptState(format!("{}: {e}", state_path.display())))
    }
}
