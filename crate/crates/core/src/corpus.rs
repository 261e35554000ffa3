//! Training corpus: manifest loading, binary PGM image I/O, and duplication
//! amplification.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{split_seed, NumericsError, RngState, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed PGM: {reason}")]
    Pgm { path: PathBuf, reason: String },
    #[error("{path}: image is {got_w}x{got_h}, manifest declares {want_w}x{want_h}")]
    Extent {
        path: PathBuf,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("unknown record id {0:?}")]
    UnknownId(String),
    #[error("manifest has no records")]
    Empty,
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("duplication count must be at least 1, got {0}")]
    BadDuplication(u32),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// On-disk manifest. File paths are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_format")]
    pub format: String,
    pub records: Vec<ManifestRecord>,
}

fn default_format() -> String {
    "pgm".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub file: String,
    pub condition: usize,
    #[serde(default)]
    pub caption: String,
    #[serde(default = "one")]
    pub duplication: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// `[height, width]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub condition: usize,
    pub caption: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    width: usize,
    height: usize,
    records: Vec<ImageRecord>,
    duplication: BTreeMap<String, u32>,
    hash: String,
}

impl Corpus {
    /// Builds a corpus from in-memory records. Records are sorted by id.
    pub fn from_records(
        width: usize,
        height: usize,
        mut records: Vec<ImageRecord>,
        duplication: BTreeMap<String, u32>,
    ) -> Result<Self, CorpusError> {
        if records.is_empty() {
            return Err(CorpusError::Empty);
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(CorpusError::DuplicateId(r.id.clone()));
            }
            if r.pixels.shape() != [height, width] {
                return Err(CorpusError::Manifest(format!(
                    "record {:?} has shape {:?}, expected [{height}, {width}]",
                    r.id,
                    r.pixels.shape()
                )));
            }
            if r.pixels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(CorpusError::Manifest(format!(
                    "record {:?} has pixels outside [0, 1]",
                    r.id
                )));
            }
        }
        let mut dup = BTreeMap::new();
        for r in &records {
            let k = duplication.get(&r.id).copied().unwrap_or(1);
            if k == 0 {
                return Err(CorpusError::BadDuplication(0));
            }
            dup.insert(r.id.clone(), k);
        }
        if let Some(extra) = duplication.keys().find(|k| !dup.contains_key(*k)) {
            return Err(CorpusError::UnknownId(extra.clone()));
        }
        let mut corpus = Self {
            width,
            height,
            records,
            duplication: dup,
            hash: String::new(),
        };
        corpus.hash = corpus.compute_hash();
        Ok(corpus)
    }

    /// Loads a manifest and every image it references.
    pub fn load(manifest_path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(manifest_path).map_err(|source| CorpusError::Io {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CorpusError::Manifest(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format != "pgm" {
            return Err(CorpusError::Manifest(format!(
                "unsupported image format {:?}",
                manifest.format
            )));
        }
        if manifest.records.is_empty() {
            return Err(CorpusError::Empty);
        }
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let mut records = Vec::with_capacity(manifest.records.len());
        let mut duplication = BTreeMap::new();
        for rec in &manifest.records {
            let path = base.join(&rec.file);
            let pixels = read_pgm(&path)?;
            let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
            if (w, h) != (manifest.width, manifest.height) {
                return Err(CorpusError::Extent {
                    path,
                    got_w: w,
                    got_h: h,
                    want_w: manifest.width,
                    want_h: manifest.height,
                });
            }
            if rec.duplication == 0 {
                return Err(CorpusError::BadDuplication(0));
            }
            if duplication.insert(rec.id.clone(), rec.duplication).is_some() {
                return Err(CorpusError::DuplicateId(rec.id.clone()));
            }
            records.push(ImageRecord {
                id: rec.id.clone(),
                pixels,
                condition: rec.condition,
                caption: rec.caption.clone(),
            });
        }
        Self::from_records(manifest.width, manifest.height, records, duplication)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn duplication(&self) -> &BTreeMap<String, u32> {
        &self.duplication
    }

    /// Hex SHA-256 over ids, conditions, pixel bytes and duplication counts.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Largest condition id present, plus one.
    pub fn condition_count(&self) -> usize {
        self.records.iter().map(|r| r.condition + 1).max().unwrap_or(0)
    }

    /// Returns a copy in which record `id` appears `k` times per epoch.
    pub fn amplify(&self, id: &str, k: u32) -> Result<Self, CorpusError> {
        if k == 0 {
            return Err(CorpusError::BadDuplication(k));
        }
        if self.get(id).is_none() {
            return Err(CorpusError::UnknownId(id.to_string()));
        }
        let mut out = self.clone();
        out.duplication.insert(id.to_string(), k);
        out.hash = out.compute_hash();
        Ok(out)
    }

    /// Number of samples in one epoch of the training stream.
    pub fn epoch_len(&self) -> usize {
        self.duplication.values().map(|&k| k as usize).sum()
    }

    /// Record indices for one epoch, each record repeated per its
    /// duplication count and shuffled. Pure in (hash, epoch, seed).
    pub fn epoch_order(&self, epoch: u64, seed: u64) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.epoch_len());
        for (i, r) in self.records.iter().enumerate() {
            let k = self.duplication[&r.id] as usize;
            order.extend(std::iter::repeat_n(i, k));
        }
        let mut rng = RngState::new(split_seed(seed ^ self.hash_u64(), epoch));
        rng.shuffle(&mut order);
        order
    }

    fn hash_u64(&self) -> u64 {
        u64::from_str_radix(&self.hash[..16], 16).unwrap_or(0)
    }

    fn compute_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.width as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        for r in &self.records {
            h.update((r.id.len() as u64).to_le_bytes());
            h.update(r.id.as_bytes());
            h.update((r.condition as u64).to_le_bytes());
            for v in r.pixels.data() {
                h.update(v.to_le_bytes());
            }
            h.update(self.duplication[&r.id].to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reads a binary (P5) PGM with maxval ≤ 255 into `[height, width]` pixels
/// scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_pgm(&bytes).map_err(|reason| CorpusError::Pgm {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII header")?);
    }
    if fields[0] != "P5" {
        return Err(format!("expected magic P5, found {:?}", fields[0]));
    }
    let parse = |s: &str, what: &str| -> Result<usize, String> {
        s.parse::<usize>()
            .map_err(|_| format!("invalid {what} {s:?}"))
    };
    let width = parse(fields[1], "width")?;
    let height = parse(fields[2], "height")?;
    let maxval = parse(fields[3], "maxval")?;
    if width == 0 || height == 0 {
        return Err("zero extent".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} not in 1..=255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing raster separator".into());
    }
    pos += 1;
    let raster = &bytes[pos..];
    if raster.len() != width * height {
        return Err(format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            width * height
        ));
    }
    if let Some(&v) = raster.iter().find(|&&v| v as usize > maxval) {
        return Err(format!("sample {v} exceeds maxval {maxval}"));
    }
    let scale = maxval as f32;
    let data = raster.iter().map(|&v| f32::from(v) / scale).collect();
    Tensor::new(vec![height, width], data).map_err(|e| e.to_string())
}

/// Encodes `[height, width]` pixels in `[0, 1]` as 8-bit P5. Values are
/// clamped and rounded to the nearest level.
pub fn encode_pgm(pixels: &Tensor) -> Result<Vec<u8>, NumericsError> {
    let shape = pixels.shape();
    if shape.len() != 2 {
        return Err(NumericsError::Format(format!(
            "PGM needs a rank-2 image, got shape {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        pixels
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn write_pgm(path: &Path, pixels: &Tensor) -> Result<(), CorpusError> {
    let bytes = encode_pgm(pixels)?;
    fs::write(path, bytes).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(id: &str, cond: usize, v: f32) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            pixels: Tensor::full(&[2, 2], v).unwrap(),
            condition: cond,
            caption: String::new(),
        }
    }

    fn small() -> Corpus {
        let recs = (0..8)
            .map(|i| record(&format!("img{i}"), i % 3, i as f32 / 8.0))
            .collect();
        Corpus::from_records(2, 2, recs, BTreeMap::new()).unwrap()
    }

    #[test]
    fn amplify_one_is_identity() {
        let c = small();
        let d = c.amplify("img3", 1).unwrap();
        assert_eq!(c.hash(), d.hash());
        assert_eq!(d.epoch_len(), 8);
    }

    #[test]
    fn amplify_share_of_stream() {
        let c = small().amplify("img0", 256).unwrap();
        assert_eq!(c.epoch_len(), 263);
        let order = c.epoch_order(0, 9);
        assert_eq!(order.iter().filter(|&&i| i == 0).count(), 256);
        assert_ne!(c.hash(), small().hash());
    }

    #[test]
    fn amplify_errors() {
        let c = small();
        assert!(matches!(c.amplify("nope", 2), Err(CorpusError::UnknownId(_))));
        assert!(c.amplify("img0", 0).is_err());
    }

    #[test]
    fn epoch_order_is_pure() {
        let c = small().amplify("img2", 5).unwrap();
        assert_eq!(c.epoch_order(3, 1), c.epoch_order(3, 1));
        assert_ne!(c.epoch_order(3, 1), c.epoch_order(4, 1));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let recs = vec![record("a", 0, 0.0), record("a", 1, 1.0)];
        assert!(matches!(
            Corpus::from_records(2, 2, recs, BTreeMap::new()),
            Err(CorpusError::DuplicateId(_))
        ));
        assert!(matches!(
            Corpus::from_records(2, 2, vec![], BTreeMap::new()),
            Err(CorpusError::Empty)
        ));
    }

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let t = decode_pgm(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn pgm_rejects_bad_input() {
        assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n100\n\xff").is_err());
        assert!(decode_pgm(b"P5\n1 1\n").is_err());
    }

    proptest! {
        #[test]
        fn pgm_round_trip_is_bit_exact(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let mut rng = RngState::new(seed);
            let raster: Vec<u8> = (0..w * h).map(|_| rng.below(256) as u8).collect();
            let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
            bytes.extend_from_slice(&raster);
            let img = decode_pgm(&bytes).unwrap();
            prop_assert_eq!(encode_pgm(&img).unwrap(), bytes);
        }
    }
}
