//! On-disk memory bank.
//!
//! Layout:
//!
//! ```text
//! bank/manifest.json              version, D, entry and background index
//! bank/entries/<id>/crop.png
//! bank/entries/<id>/mask.rle      COCO RLE, JSON
//! bank/entries/<id>/meta.json
//! bank/entries/<id>/embedding.f32 little-endian f32 × D
//! bank/backgrounds/<id>/{image.png, meta.json, embedding.f32}
//! ```
//!
//! Entry files are written before the manifest that indexes them, and the
//! manifest is replaced atomically, so a reader only ever sees complete
//! entries.

use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock, RwLockReadGuard};

use facadefixer_core::geometry::{BinaryMask, DefectCategory, ImageRef, Rle};
use facadefixer_core::memory::{BackgroundTemplate, MemoryBank, MemoryEntry, Provenance};
use serde::{Deserialize, Serialize};

use crate::error::{read, read_json, write_atomic, write_json, Error, Result};
use crate::imageio::{decode_png, encode_png};

pub const BANK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dim: usize,
    entries: Vec<IndexRecord>,
    #[serde(default)]
    backgrounds: Vec<IndexRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<DefectCategory>,
    provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryMeta {
    id: String,
    crop: ImageRef,
    category: DefectCategory,
    text: String,
    provenance: Provenance,
    created_at: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BackgroundMeta {
    id: String,
    image: ImageRef,
    provenance: Provenance,
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

fn entry_dir(dir: &Path, id: &str) -> PathBuf {
    dir.join("entries").join(id)
}

fn background_dir(dir: &Path, id: &str) -> PathBuf {
    dir.join("backgrounds").join(id)
}

fn embedding_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn embedding_from_bytes(bytes: &[u8], dim: usize) -> std::result::Result<Vec<f32>, String> {
    if bytes.len() != dim * 4 {
        return Err(format!("embedding blob holds {} bytes, expected {}", bytes.len(), dim * 4));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn manifest_of(bank: &MemoryBank) -> Manifest {
    Manifest {
        version: BANK_VERSION,
        dim: bank.dim(),
        entries: bank
            .entries()
            .map(|e| IndexRecord {
                id: e.id.clone(),
                category: Some(e.category),
                provenance: e.provenance,
            })
            .collect(),
        backgrounds: bank
            .backgrounds()
            .map(|b| IndexRecord {
                id: b.id.clone(),
                category: None,
                provenance: b.provenance,
            })
            .collect(),
    }
}

fn write_entry(dir: &Path, e: &MemoryEntry) -> Result<()> {
    let d = entry_dir(dir, &e.id);
    write_atomic(&d.join("crop.png"), &encode_png(&e.crop_pixels))?;
    write_json(&d.join("mask.rle"), &e.mask.to_rle())?;
    write_atomic(&d.join("embedding.f32"), &embedding_bytes(&e.embedding))?;
    write_json(
        &d.join("meta.json"),
        &EntryMeta {
            id: e.id.clone(),
            crop: e.crop.clone(),
            category: e.category,
            text: e.text.clone(),
            provenance: e.provenance,
            created_at: e.created_at,
        },
    )
}

fn write_background(dir: &Path, b: &BackgroundTemplate) -> Result<()> {
    let d = background_dir(dir, &b.id);
    write_atomic(&d.join("image.png"), &encode_png(&b.pixels))?;
    write_atomic(&d.join("embedding.f32"), &embedding_bytes(&b.embedding))?;
    write_json(
        &d.join("meta.json"),
        &BackgroundMeta {
            id: b.id.clone(),
            image: b.image.clone(),
            provenance: b.provenance,
        },
    )
}

/// Writes the whole bank under `dir`.
pub fn persist(bank: &MemoryBank, dir: &Path) -> Result<()> {
    for e in bank.entries() {
        write_entry(dir, e)?;
    }
    for b in bank.backgrounds() {
        write_background(dir, b)?;
    }
    write_json(&manifest_path(dir), &manifest_of(bank))
}

fn load_entry(dir: &Path, rec: &IndexRecord, dim: usize) -> Result<MemoryEntry> {
    let d = entry_dir(dir, &rec.id);
    let corrupt = |message: String| Error::BankEntry {
        id: rec.id.clone(),
        message,
    };
    let meta: EntryMeta = read_json(&d.join("meta.json")).map_err(|e| corrupt(e.to_string()))?;
    if meta.id != rec.id {
        return Err(corrupt(format!("meta.json names id {:?}", meta.id)));
    }
    let crop_pixels = decode_png(&read(&d.join("crop.png")).map_err(|e| corrupt(e.to_string()))?)
        .map_err(|e| corrupt(format!("crop.png: {e}")))?;
    let rle: Rle = read_json(&d.join("mask.rle")).map_err(|e| corrupt(e.to_string()))?;
    let mask = BinaryMask::from_rle(&rle).map_err(|e| corrupt(format!("mask.rle: {e}")))?;
    let embedding = embedding_from_bytes(&read(&d.join("embedding.f32")).map_err(|e| corrupt(e.to_string()))?, dim)
        .map_err(corrupt)?;
    Ok(MemoryEntry {
        id: meta.id,
        crop: meta.crop,
        crop_pixels,
        mask,
        category: meta.category,
        text: meta.text,
        embedding,
        provenance: meta.provenance,
        created_at: meta.created_at,
    })
}

fn load_background(dir: &Path, rec: &IndexRecord, dim: usize) -> Result<BackgroundTemplate> {
    let d = background_dir(dir, &rec.id);
    let corrupt = |message: String| Error::BankEntry {
        id: rec.id.clone(),
        message,
    };
    let meta: BackgroundMeta = read_json(&d.join("meta.json")).map_err(|e| corrupt(e.to_string()))?;
    let pixels = decode_png(&read(&d.join("image.png")).map_err(|e| corrupt(e.to_string()))?)
        .map_err(|e| corrupt(format!("image.png: {e}")))?;
    let embedding = embedding_from_bytes(&read(&d.join("embedding.f32")).map_err(|e| corrupt(e.to_string()))?, dim)
        .map_err(corrupt)?;
    Ok(BackgroundTemplate {
        id: meta.id,
        image: meta.image,
        pixels,
        embedding,
        provenance: meta.provenance,
    })
}

/// Reads a bank written by [`persist`]. Any damaged entry fails the load
/// with an error naming it.
pub fn load(dir: &Path) -> Result<MemoryBank> {
    let manifest: Manifest = read_json(&manifest_path(dir))?;
    if manifest.version != BANK_VERSION {
        return Err(Error::BankVersion {
            found: manifest.version,
            expected: BANK_VERSION,
        });
    }
    let mut bank = MemoryBank::new(manifest.dim);
    for rec in &manifest.entries {
        let entry = load_entry(dir, rec, manifest.dim)?;
        if rec.category.is_some_and(|c| c != entry.category) {
            return Err(Error::BankEntry {
                id: rec.id.clone(),
                message: "category differs between manifest and meta.json".into(),
            });
        }
        bank.insert(entry).map_err(|e| Error::BankEntry {
            id: rec.id.clone(),
            message: e.to_string(),
        })?;
    }
    for rec in &manifest.backgrounds {
        let bg = load_background(dir, rec, manifest.dim)?;
        bank.insert_background(bg).map_err(|e| Error::BankEntry {
            id: rec.id.clone(),
            message: e.to_string(),
        })?;
    }
    Ok(bank)
}

/// A bank directory opened for use: queries share a read lock, mutations
/// are serialized and written through to disk before they return.
#[derive(Debug)]
pub struct BankStore {
    dir: PathBuf,
    bank: RwLock<MemoryBank>,
    writer: Mutex<()>,
}

impl BankStore {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            bank: RwLock::new(load(dir)?),
            writer: Mutex::new(()),
        })
    }

    /// Opens `dir`, creating an empty bank of dimension `dim` if it holds no manifest.
    pub fn open_or_create(dir: &Path, dim: usize) -> Result<Self> {
        if !manifest_path(dir).exists() {
            persist(&MemoryBank::new(dim), dir)?;
        }
        Self::open(dir)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn read(&self) -> RwLockReadGuard<'_, MemoryBank> {
        self.bank.read().unwrap_or_else(|p| p.into_inner())
    }

    /// Applies `f` to a copy of the bank, writes the new and changed
    /// entries, then publishes the copy. Nothing is published if `f` or
    /// the write fails.
    pub fn update<T>(&self, f: impl FnOnce(&mut MemoryBank) -> Result<T>) -> Result<T> {
        let _guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let mut next = self.read().clone();
        let out = f(&mut next)?;
        {
            let current = self.read();
            for e in next.entries() {
                if current.get(&e.id) != Some(e) {
                    write_entry(&self.dir, e)?;
                }
            }
            for b in next.backgrounds() {
                if current.background(&b.id) != Some(b) {
                    write_background(&self.dir, b)?;
                }
            }
        }
        write_json(&manifest_path(&self.dir), &manifest_of(&next))?;
        *self.bank.write().unwrap_or_else(|p| p.into_inner()) = next;
        Ok(out)
    }

    pub fn insert(&self, entry: MemoryEntry) -> Result<String> {
        self.update(|bank| Ok(bank.insert(entry)?))
    }

    pub fn insert_background(&self, template: BackgroundTemplate) -> Result<String> {
        self.update(|bank| Ok(bank.insert_background(template)?))
    }
}
