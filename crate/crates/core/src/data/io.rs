use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, PhantomMode, Sample};
use crate::error::{Error, Result};
use crate::film::Vocabulary;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const IMAGE_MAGIC: &[u8; 4] = b"FSG1";
const MASK_MAGIC: &[u8; 4] = b"FSM1";
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub phantom_id: String,
    pub contrast: String,
    pub image: String,
    pub mask: String,
}

/// `manifest.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub vocabulary: Vocabulary,
    pub mode: PhantomMode,
    pub seed: u64,
    pub samples: Vec<ManifestEntry>,
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(Error::Validation(format!("sample id {id:?} is not a safe file stem")));
    }
    Ok(())
}

fn encode(magic: &[u8; 4], h: usize, w: usize, payload: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + h * w * 4);
    buf.extend_from_slice(magic);
    for dim in [h, w, 1] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.extend(payload);
    buf
}

/// Writes `manifest.json` plus one `.img`/`.msk` pair per sample.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        check_id(&s.id)?;
        s.validate()?;
        dataset.vocabulary.index_of(&s.contrast)?;
        let (h, w) = (s.height(), s.width());
        let image = encode(IMAGE_MAGIC, h, w, s.image.data().iter().flat_map(|v| v.to_le_bytes()));
        let mask = encode(MASK_MAGIC, h, w, s.mask.data().iter().map(|&v| v as u8));
        let entry = ManifestEntry {
            id: s.id.clone(),
            phantom_id: s.phantom_id.clone(),
            contrast: s.contrast.clone(),
            image: format!("{}.img", s.id),
            mask: format!("{}.msk", s.id),
        };
        for (name, bytes) in [(&entry.image, image), (&entry.mask, mask)] {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        entries.push(entry);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        vocabulary: dataset.vocabulary.clone(),
        mode: dataset.mode,
        seed: dataset.seed,
        samples: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads just the manifest of a dataset directory.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(&path, 0, format!("unsupported manifest version {}", manifest.version)));
    }
    Ok(manifest)
}

fn decode(path: &Path, magic: &[u8; 4], elem: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, bytes.len() as u64, format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(
            path,
            0,
            format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&bytes[..4]), String::from_utf8_lossy(magic)),
        ));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (field(0), field(1), field(2));
    if c != 1 {
        return Err(Error::format(path, 12, format!("expected 1 channel, header says {c}")));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(elem))
        .ok_or_else(|| Error::format(path, 4, format!("implausible dimensions {h}x{w}")))?;
    let got = bytes.len() - HEADER_LEN;
    if got < expected {
        return Err(Error::format(path, bytes.len() as u64, format!("truncated payload ({got} of {expected} bytes)")));
    }
    if got > expected {
        return Err(Error::format(path, (HEADER_LEN + expected) as u64, format!("{} trailing bytes", got - expected)));
    }
    Ok((h, w, bytes[HEADER_LEN..].to_vec()))
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        check_id(&entry.id)?;
        manifest.vocabulary.index_of(&entry.contrast)?;
        let img_path = dir.join(&entry.image);
        let (h, w, payload) = decode(&img_path, IMAGE_MAGIC, 4)?;
        let image: Vec<f32> = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let msk_path = dir.join(&entry.mask);
        let (mh, mw, payload) = decode(&msk_path, MASK_MAGIC, 1)?;
        if (mh, mw) != (h, w) {
            return Err(Error::format(&msk_path, 4, format!("mask is {mh}x{mw} but image is {h}x{w}")));
        }
        if let Some(i) = payload.iter().position(|&b| b > 1) {
            return Err(Error::format(&msk_path, (HEADER_LEN + i) as u64, format!("mask byte {} is not 0 or 1", payload[i])));
        }
        let mask: Vec<f32> = payload.iter().map(|&b| b as f32).collect();
        let sample = Sample {
            id: entry.id.clone(),
            phantom_id: entry.phantom_id.clone(),
            contrast: entry.contrast.clone(),
            image: Tensor::new(&[1, h, w], image)?,
            mask: Tensor::new(&[1, h, w], mask)?,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(Dataset { vocabulary: manifest.vocabulary, mode: manifest.mode, seed: manifest.seed, samples })
}
