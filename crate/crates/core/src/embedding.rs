//! Embedding providers and the on-disk embedding store.
//!
//! The CNN backbone is an external boundary: real backbones are represented
//! by precomputed stores, and the built-in `toy` provider computes a small
//! deterministic feature straight from crop pixels.
//!
//! Store layout (all integers little-endian):
//!
//! ```text
//! "WLEMB1" | u32 name_len | name (UTF-8) | u32 dim | u64 rows
//! rows × ( u32 id_len | crop_id (UTF-8) | dim × f32 )
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::CropRecord;

pub const STORE_MAGIC: &[u8; 6] = b"WLEMB1";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbedderId {
    pub name: String,
    pub dim: usize,
}

impl EmbedderId {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub crop_id: String,
    pub values: Vec<f32>,
}

/// Dense row-major float32 matrix indexed by crop id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    provider: EmbedderId,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(provider: EmbedderId) -> Result<Self> {
        if provider.dim == 0 {
            return Err(Error::InvalidConfig("embedding dim must be >= 1".into()));
        }
        Ok(Self {
            provider,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        })
    }

    pub fn provider(&self) -> &EmbedderId {
        &self.provider
    }

    pub fn dim(&self) -> usize {
        self.provider.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Insert or overwrite the row for `crop_id`.
    pub fn insert(&mut self, crop_id: impl Into<String>, values: &[f32]) -> Result<()> {
        if values.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: values.len(),
            });
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "non-finite embedding value {bad}"
            )));
        }
        let crop_id = crop_id.into();
        match self.index.get(&crop_id) {
            Some(&row) => {
                let d = self.dim();
                self.data[row * d..(row + 1) * d].copy_from_slice(values);
            }
            None => {
                self.index.insert(crop_id.clone(), self.ids.len());
                self.ids.push(crop_id);
                self.data.extend_from_slice(values);
            }
        }
        Ok(())
    }

    pub fn get(&self, crop_id: &str) -> Option<&[f32]> {
        let d = self.dim();
        self.index
            .get(crop_id)
            .map(|&r| &self.data[r * d..(r + 1) * d])
    }

    pub fn require(&self, crop_id: &str) -> Result<&[f32]> {
        self.get(crop_id)
            .ok_or_else(|| Error::MissingEmbedding(crop_id.to_string()))
    }

    /// Same rows keyed by id, independent of insertion order.
    pub fn as_map(&self) -> BTreeMap<&str, &[f32]> {
        self.ids
            .iter()
            .map(|id| (id.as_str(), self.get(id).expect("indexed row")))
            .collect()
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| std::io::Error::other("string too long"))?;
    w.write_u32::<LittleEndian>(len)?;
    w.write_all(s.as_bytes())
}

pub fn write_store_to<W: Write>(store: &EmbeddingStore, w: &mut W) -> std::io::Result<()> {
    w.write_all(STORE_MAGIC)?;
    write_str(w, &store.provider.name)?;
    w.write_u32::<LittleEndian>(store.dim() as u32)?;
    w.write_u64::<LittleEndian>(store.len() as u64)?;
    for id in &store.ids {
        write_str(w, id)?;
        for &v in store.get(id).expect("indexed row") {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn write_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_store_to(store, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn corrupt(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::CorruptStore(format!("{what}: {e}"))
}

fn read_str<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(corrupt(what))? as usize;
    // Refuse absurd lengths before allocating.
    if len > 1 << 20 {
        return Err(Error::CorruptStore(format!(
            "{what}: length {len} too large"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(corrupt(what))?;
    String::from_utf8(buf).map_err(|_| Error::CorruptStore(format!("{what}: invalid UTF-8")))
}

pub fn read_store_from<R: Read>(r: &mut R) -> Result<EmbeddingStore> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(corrupt("magic"))?;
    if &magic != STORE_MAGIC {
        return Err(Error::CorruptStore("bad magic".into()));
    }
    let name = read_str(r, "provider name")?;
    let dim = r.read_u32::<LittleEndian>().map_err(corrupt("dim"))? as usize;
    let rows = r.read_u64::<LittleEndian>().map_err(corrupt("row count"))?;
    if dim == 0 {
        return Err(Error::CorruptStore("dim is 0".into()));
    }
    let mut store = EmbeddingStore::new(EmbedderId::new(name, dim))?;
    let mut values = vec![0f32; dim];
    for row in 0..rows {
        let id = read_str(r, "crop id")?;
        r.read_f32_into::<LittleEndian>(&mut values)
            .map_err(|e| Error::CorruptStore(format!("row {row}: {e}")))?;
        if store.index.contains_key(&id) {
            return Err(Error::CorruptStore(format!("duplicate crop id {id:?}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptStore(format!("row {row}: non-finite value")));
        }
        store.insert(id, &values)?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(corrupt("trailer"))? != 0 {
        return Err(Error::CorruptStore("trailing bytes after last row".into()));
    }
    Ok(store)
}

pub fn read_store(path: &Path) -> Result<EmbeddingStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_store_from(&mut BufReader::new(file))
}

/// A pre-trained feature extractor.
pub trait Embedder: Send + Sync {
    fn id(&self) -> &EmbedderId;
    fn embed_crop(&self, crop: &CropRecord) -> Result<EmbeddingVector>;
}

/// Per-channel mean and variance followed by per-channel 4×4 block means,
/// all on the [0,1] intensity scale: 54 values.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    id: EmbedderId,
}

pub const TOY_GRID: usize = 4;
pub const TOY_DIM: usize = 6 + 3 * TOY_GRID * TOY_GRID;

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self {
            id: EmbedderId::new("toy", TOY_DIM),
        }
    }
}

fn block_range(b: usize, n: usize) -> (usize, usize) {
    let start = b * n / TOY_GRID;
    let end = ((b + 1) * n / TOY_GRID).max(start + 1).min(n);
    (start.min(n - 1), end)
}

impl ToyEmbedder {
    pub fn features(&self, img: &RgbImage) -> Vec<f32> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Vec::with_capacity(TOY_DIM);
        if w == 0 || h == 0 {
            out.resize(TOY_DIM, 0.0);
            return out;
        }
        let n = (w * h) as f64;
        let mut mean = [0.0f64; 3];
        for p in img.pixels() {
            for c in 0..3 {
                mean[c] += p[c] as f64 / 255.0;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0f64; 3];
        for p in img.pixels() {
            for c in 0..3 {
                let d = p[c] as f64 / 255.0 - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        out.extend(mean.iter().map(|&m| m as f32));
        out.extend(var.iter().map(|&v| v as f32));
        for c in 0..3 {
            for by in 0..TOY_GRID {
                let (y0, y1) = block_range(by, h);
                for bx in 0..TOY_GRID {
                    let (x0, x1) = block_range(bx, w);
                    let mut sum = 0.0f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += img.get_pixel(x as u32, y as u32)[c] as f64;
                        }
                    }
                    let count = ((y1 - y0) * (x1 - x0)) as f64;
                    out.push((sum / count / 255.0) as f32);
                }
            }
        }
        out
    }

    /// Largest change of any feature when one channel value of one pixel of a
    /// `width`×`height` image moves by 1 (before float32 rounding).
    pub fn perturbation_bound(width: u32, height: u32) -> f64 {
        let (w, h) = (width as usize, height as usize);
        let min_block = (0..TOY_GRID)
            .map(|b| block_range(b, w))
            .map(|(a, b)| b - a)
            .min()
            .unwrap_or(1)
            * (0..TOY_GRID)
                .map(|b| block_range(b, h))
                .map(|(a, b)| b - a)
                .min()
                .unwrap_or(1);
        let n = (w * h) as f64;
        let delta = 1.0 / 255.0;
        // Variance moves by at most (2·|x - mean| + delta)·delta / n ≤ 3·delta / n.
        (delta / min_block as f64).max(3.0 * delta / n)
    }
}

impl Embedder for ToyEmbedder {
    fn id(&self) -> &EmbedderId {
        &self.id
    }

    fn embed_crop(&self, crop: &CropRecord) -> Result<EmbeddingVector> {
        let pixels = crop
            .pixels
            .as_ref()
            .ok_or_else(|| Error::NoPixels(crop.crop_id.clone()))?;
        Ok(EmbeddingVector {
            crop_id: crop.crop_id.clone(),
            values: self.features(pixels),
        })
    }
}

/// External backbone whose features were computed offline.
#[derive(Debug, Clone)]
pub struct StoreEmbedder {
    store: Arc<EmbeddingStore>,
}

impl StoreEmbedder {
    pub fn new(store: Arc<EmbeddingStore>) -> Self {
        Self { store }
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }
}

impl Embedder for StoreEmbedder {
    fn id(&self) -> &EmbedderId {
        self.store.provider()
    }

    fn embed_crop(&self, crop: &CropRecord) -> Result<EmbeddingVector> {
        let values = self.store.require(&crop.crop_id)?;
        Ok(EmbeddingVector {
            crop_id: crop.crop_id.clone(),
            values: values.to_vec(),
        })
    }
}

#[derive(Default, Clone)]
pub struct EmbedderRegistry {
    providers: BTreeMap<String, Arc<dyn Embedder>>,
}

impl EmbedderRegistry {
    pub fn with_toy() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(ToyEmbedder::default()));
        r
    }

    pub fn register(&mut self, embedder: Arc<dyn Embedder>) {
        self.providers.insert(embedder.id().name.clone(), embedder);
    }

    pub fn get(&self, name: &str) -> Result<&Arc<dyn Embedder>> {
        self.providers
            .get(name)
            .ok_or_else(|| Error::UnknownProvider(name.to_string()))
    }
}

/// Embed every crop with `provider`, one vector per crop in input order.
pub fn embed(
    crops: &[CropRecord],
    registry: &EmbedderRegistry,
    provider: &EmbedderId,
) -> Result<Vec<EmbeddingVector>> {
    let embedder = registry.get(&provider.name)?;
    if embedder.id().dim != provider.dim {
        return Err(Error::DimensionMismatch {
            expected: provider.dim,
            found: embedder.id().dim,
        });
    }
    crops
        .iter()
        .map(|c| {
            let v = embedder.embed_crop(c)?;
            if v.values.len() != provider.dim {
                return Err(Error::DimensionMismatch {
                    expected: provider.dim,
                    found: v.values.len(),
                });
            }
            Ok(v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{BBox, Detection};

    fn store_3x8() -> EmbeddingStore {
        let mut s = EmbeddingStore::new(EmbedderId::new("xception", 8)).unwrap();
        for r in 0..3 {
            let v: Vec<f32> = (0..8).map(|c| (r * 8 + c) as f32 * 0.37 - 1.1).collect();
            s.insert(format!("img{r}#0#0"), &v).unwrap();
        }
        s
    }

    #[test]
    fn store_round_trip() {
        let s = store_3x8();
        let mut buf = Vec::new();
        write_store_to(&s, &mut buf).unwrap();
        let back = read_store_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
        for id in s.ids() {
            let a: Vec<u32> = s.get(id).unwrap().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.get(id).unwrap().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_store_is_corrupt() {
        let mut buf = Vec::new();
        write_store_to(&store_3x8(), &mut buf).unwrap();
        for cut in [3, 10, buf.len() - 1] {
            assert!(matches!(
                read_store_from(&mut &buf[..cut]),
                Err(Error::CorruptStore(_))
            ));
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_store_from(&mut bad.as_slice()),
            Err(Error::CorruptStore(_))
        ));
        buf.push(0);
        assert!(matches!(
            read_store_from(&mut buf.as_slice()),
            Err(Error::CorruptStore(_))
        ));
    }

    #[test]
    fn empty_store_is_readable() {
        let s = EmbeddingStore::new(EmbedderId::new("densenet121", 4)).unwrap();
        let mut buf = Vec::new();
        write_store_to(&s, &mut buf).unwrap();
        let back = read_store_from(&mut buf.as_slice()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.provider(), s.provider());
    }

    fn crop_with(pixels: RgbImage) -> CropRecord {
        CropRecord {
            pixels: Some(pixels),
            ..CropRecord::embedding_only("imgA", 0, 0, &Detection::animal(BBox::full(), 0.9))
        }
    }

    #[test]
    fn toy_on_black_crop() {
        let crop = crop_with(RgbImage::new(8, 8));
        let reg = EmbedderRegistry::with_toy();
        let v = embed(
            &[crop.clone(), crop],
            &reg,
            &EmbedderId::new("toy", TOY_DIM),
        )
        .unwrap();
        assert_eq!(v.len(), 2);
        assert!(v[0].values.iter().all(|&x| x == 0.0));
        assert_eq!(v[0], v[1]);
    }

    #[test]
    fn store_provider_reports_missing_crop() {
        let mut reg = EmbedderRegistry::default();
        reg.register(Arc::new(StoreEmbedder::new(Arc::new(store_3x8()))));
        let crop = CropRecord::embedding_only("imgA", 0, 0, &Detection::animal(BBox::full(), 0.9));
        let err = embed(&[crop], &reg, &EmbedderId::new("xception", 8)).unwrap_err();
        assert!(matches!(err, Error::MissingEmbedding(id) if id == "imgA#0#0"));
        let err = embed(&[], &reg, &EmbedderId::new("inception_resnet_v2", 8)).unwrap_err();
        assert!(matches!(err, Error::UnknownProvider(_)));
        let err = embed(&[], &reg, &EmbedderId::new("xception", 9)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }
}
