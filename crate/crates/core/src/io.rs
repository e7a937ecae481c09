//! On-disk formats.
//!
//! Matrix blobs (mel spectrograms and every checkpoint tensor) share one
//! layout: the magic bytes `CPM1`, `frames` and `channels` as little-endian
//! `u32`, then `frames * channels` little-endian `f32` values in row-major
//! order. A checkpoint is a directory holding `metadata.json` plus one blob
//! per tensor; it is written to a sibling temporary directory and renamed
//! into place.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::ParamStore;
use crate::scm::{self, ScmError, ScmParams, Utterance};
use crate::Real;

pub const MAGIC: &[u8; 4] = b"CPM1";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}: bad magic, not a CPM1 matrix")]
    BadMagic(PathBuf),
    #[error("{path}: truncated, expected {expected} bytes of data, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("output directory {0} exists and is not empty (pass force to overwrite)")]
    OutputNotEmpty(PathBuf),
    #[error("invalid split ratios {0:?}: need three nonnegative values summing to 1")]
    BadSplit([f64; 3]),
    #[error("unknown utterance id {id}; available ids in split {split}: {available}")]
    UnknownUtterance {
        id: String,
        split: String,
        available: String,
    },
    #[error("checkpoint tensor {0} missing")]
    MissingTensor(String),
    #[error(transparent)]
    Scm(#[from] ScmError),
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_matrix<F: Real>(m: &Array2<F>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 4 * m.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for x in m.iter() {
        buf.extend_from_slice(&(x.f64() as f32).to_le_bytes());
    }
    buf
}

pub fn decode_matrix<F: Real>(bytes: &[u8], path: &Path) -> Result<Array2<F>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(IoError::BadMagic(path.to_path_buf()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let data = &bytes[12..];
    let expected = rows * cols * 4;
    if data.len() != expected {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: data.len(),
        });
    }
    let values: Vec<F> = data
        .chunks_exact(4)
        .map(|c| F::c(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("shape checked"))
}

pub fn write_matrix<F: Real>(path: &Path, m: &Array2<F>) -> Result<()> {
    fs::write(path, encode_matrix(m)).map_err(io_err(path))
}

pub fn read_matrix<F: Real>(path: &Path) -> Result<Array2<F>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_matrix(&bytes, path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Which partition an utterance belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub params: ScmParams,
    pub seed: u64,
    pub version: u32,
    pub neutral_only: bool,
    pub split_ratios: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub speaker: usize,
    pub emotion: usize,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub mel_file: String,
    pub split: Split,
    /// Seed `sample_utterance` was called with; recovers the exogenous noise.
    pub sample_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn find(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// Split sizes for `n` items; the remainder after rounding goes to test.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (sum - 1.0).abs() > 1e-9 {
        return Err(IoError::BadSplit(ratios));
    }
    let train = ((n as f64) * ratios[0]).round() as usize;
    let dev = (((n as f64) * ratios[1]).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    Ok([train, dev, n - train - dev])
}

#[derive(Clone, Debug, Default)]
pub struct GenerateOptions {
    pub force: bool,
    pub neutral_only: bool,
}

pub fn utterance_seed(seed: u64, index: usize) -> u64 {
    scm::derive_seed(scm::named_seed(seed, "dataset.utterance"), &[index as u64])
}

fn prepare_out_dir(out_dir: &Path, force: bool) -> Result<()> {
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir).map_err(io_err(out_dir))?.next().is_some();
        if non_empty && !force {
            return Err(IoError::OutputNotEmpty(out_dir.to_path_buf()));
        }
        if non_empty {
            fs::remove_dir_all(out_dir).map_err(io_err(out_dir))?;
        }
    }
    fs::create_dir_all(out_dir.join("mels")).map_err(io_err(out_dir))
}

/// Samples `n` utterances, writes their mel blobs and `manifest.json`.
pub fn generate_dataset(
    params: &ScmParams,
    seed: u64,
    n: usize,
    split_ratios: [f64; 3],
    out_dir: &Path,
    options: &GenerateOptions,
) -> Result<Manifest> {
    let sizes = split_sizes(n, split_ratios)?;
    prepare_out_dir(out_dir, options.force)?;
    let emotion = options.neutral_only.then_some(scm::NEUTRAL);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let sample_seed = utterance_seed(seed, i);
        let u = scm::sample_utterance_with(params, sample_seed, format!("utt{i:05}"), emotion)?;
        let split = if i < sizes[0] {
            Split::Train
        } else if i < sizes[0] + sizes[1] {
            Split::Dev
        } else {
            Split::Test
        };
        let mel_file = format!("mels/{}.cpm", u.id);
        write_matrix(&out_dir.join(&mel_file), &u.mel)?;
        records.push(ManifestRecord {
            id: u.id,
            phonemes: u.phonemes,
            speaker: u.speaker,
            emotion: u.emotion,
            durations: u.prosody.durations,
            pitch: u.prosody.pitch,
            energy: u.prosody.energy,
            mel_file,
            split,
            sample_seed,
        });
    }
    let manifest = Manifest {
        header: ManifestHeader {
            params: params.clone(),
            seed,
            version: MANIFEST_VERSION,
            neutral_only: options.neutral_only,
            split_ratios,
        },
        records,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// One training example as consumed by the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub speaker: usize,
    pub emotion: usize,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub mel: Array2<f32>,
}

impl Example {
    pub fn from_utterance(u: &Utterance) -> Self {
        Self {
            id: u.id.clone(),
            phonemes: u.phonemes.clone(),
            speaker: u.speaker,
            emotion: u.emotion,
            durations: u.prosody.durations.clone(),
            pitch: u.prosody.pitch.clone(),
            energy: u.prosody.energy.clone(),
            mel: u.mel.mapv(|x| x as f32),
        }
    }
}

/// A loaded manifest with every mel in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub manifest_hash: String,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = read_json(&path)?;
        let manifest_hash = sha256_file(&path)?;
        let mut ds = Dataset {
            manifest,
            manifest_hash,
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        };
        for r in &ds.manifest.records {
            let ex = Example {
                id: r.id.clone(),
                phonemes: r.phonemes.clone(),
                speaker: r.speaker,
                emotion: r.emotion,
                durations: r.durations.clone(),
                pitch: r.pitch.clone(),
                energy: r.energy.clone(),
                mel: read_matrix(&dir.join(&r.mel_file))?,
            };
            match r.split {
                Split::Train => ds.train.push(ex),
                Split::Dev => ds.dev.push(ex),
                Split::Test => ds.test.push(ex),
            }
        }
        Ok(ds)
    }

    /// In-memory dataset straight from the sampler (no files).
    pub fn in_memory(params: &ScmParams, seed: u64, n: usize, split_ratios: [f64; 3]) -> Result<Self> {
        let sizes = split_sizes(n, split_ratios)?;
        let mut records = Vec::with_capacity(n);
        let mut ds = Dataset {
            manifest: Manifest {
                header: ManifestHeader {
                    params: params.clone(),
                    seed,
                    version: MANIFEST_VERSION,
                    neutral_only: false,
                    split_ratios,
                },
                records: Vec::new(),
            },
            manifest_hash: String::new(),
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        };
        for i in 0..n {
            let sample_seed = utterance_seed(seed, i);
            let u = scm::sample_utterance_with(params, sample_seed, format!("utt{i:05}"), None)?;
            // Match the precision of data read back from disk.
            let ex = Example::from_utterance(&u);
            let split = if i < sizes[0] {
                Split::Train
            } else if i < sizes[0] + sizes[1] {
                Split::Dev
            } else {
                Split::Test
            };
            records.push(ManifestRecord {
                id: u.id.clone(),
                phonemes: u.phonemes.clone(),
                speaker: u.speaker,
                emotion: u.emotion,
                durations: u.prosody.durations.clone(),
                pitch: u.prosody.pitch.clone(),
                energy: u.prosody.energy.clone(),
                mel_file: format!("mels/{}.cpm", u.id),
                split,
                sample_seed,
            });
            match split {
                Split::Train => ds.train.push(ex),
                Split::Dev => ds.dev.push(ex),
                Split::Test => ds.test.push(ex),
            }
        }
        ds.manifest.records = records;
        ds.manifest_hash = sha256_bytes(&serde_json::to_vec(&ds.manifest).expect("serializable"));
        Ok(ds)
    }

    pub fn params(&self) -> &ScmParams {
        &self.manifest.header.params
    }

    /// Re-creates the full utterance (with its exogenous noise) for `id`.
    pub fn utterance(&self, id: &str) -> Result<Utterance> {
        let r = self.manifest.find(id).ok_or_else(|| IoError::UnknownUtterance {
            id: id.to_string(),
            split: "any".into(),
            available: self.ids(Split::Test).join(", "),
        })?;
        let emotion = self.manifest.header.neutral_only.then_some(scm::NEUTRAL);
        Ok(scm::sample_utterance_with(self.params(), r.sample_seed, r.id.clone(), emotion)?)
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.manifest.split(split).map(|r| r.id.clone()).collect()
    }

    pub fn examples(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Writes `metadata` plus one blob per tensor of each named store, atomically.
pub fn write_checkpoint<F: Real, M: Serialize>(
    dir: &Path,
    metadata: &M,
    stores: &[(&str, &ParamStore<F>)],
) -> Result<()> {
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let tmp = parent.join(format!(".{name}.tmp{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
    for (prefix, store) in stores {
        for (_, pname, value) in store.iter() {
            write_matrix(&tmp.join(format!("{prefix}.{pname}.cpm")), value)?;
        }
    }
    let meta_path = tmp.join(METADATA_FILE);
    let text = serde_json::to_string_pretty(metadata).map_err(|source| IoError::Json {
        path: meta_path.clone(),
        source,
    })?;
    let mut f = fs::File::create(&meta_path).map_err(io_err(&meta_path))?;
    f.write_all(text.as_bytes()).map_err(io_err(&meta_path))?;
    f.sync_all().map_err(io_err(&meta_path))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::rename(&tmp, dir).map_err(io_err(dir))
}

/// Fills `template` (a store with the expected names and shapes) from the
/// blobs written under `prefix`.
pub fn read_store<F: Real>(dir: &Path, prefix: &str, template: &ParamStore<F>) -> Result<ParamStore<F>> {
    let mut out = template.clone();
    let ids: Vec<_> = template.ids().collect();
    for id in ids {
        let name = template.name(id).to_string();
        let path = dir.join(format!("{prefix}.{name}.cpm"));
        if !path.exists() {
            return Err(IoError::MissingTensor(name));
        }
        let value: Array2<F> = read_matrix(&path)?;
        if value.dim() != template.get(id).dim() {
            return Err(IoError::Truncated {
                path,
                expected: template.get(id).len() * 4,
                found: value.len() * 4,
            });
        }
        *out.get_mut(id) = value;
    }
    Ok(out)
}

pub fn read_metadata<M: DeserializeOwned>(dir: &Path) -> Result<M> {
    read_json(&dir.join(METADATA_FILE))
}

/// Hash of a checkpoint directory: metadata plus every blob, in name order.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut names: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.file_name()))
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for n in names {
        let p = dir.join(&n);
        if p.is_file() {
            h.update(n.to_string_lossy().as_bytes());
            h.update(fs::read(&p).map_err(io_err(&p))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matrix_layout_is_bit_exact() {
        let m = array![[1.0f32, -2.5], [0.25, 3.0], [7.0, 8.0]];
        let bytes = encode_matrix(&m);
        assert_eq!(&bytes[..4], b"CPM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), -2.5);
        assert_eq!(bytes.len(), 12 + 6 * 4);
        let back: Array2<f32> = decode_matrix(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn corrupt_blobs_rejected() {
        let m = array![[1.0f32, 2.0]];
        let mut bytes = encode_matrix(&m);
        bytes.pop();
        assert!(matches!(
            decode_matrix::<f32>(&bytes, Path::new("x")),
            Err(IoError::Truncated { .. })
        ));
        assert!(matches!(
            decode_matrix::<f32>(b"NOPE00000000", Path::new("x")),
            Err(IoError::BadMagic(_))
        ));
    }

    #[test]
    fn split_sizes_round() {
        assert_eq!(split_sizes(100, [0.8, 0.1, 0.1]).unwrap(), [80, 10, 10]);
        assert_eq!(split_sizes(7, [0.5, 0.5, 0.0]).unwrap()[0] + split_sizes(7, [0.5, 0.5, 0.0]).unwrap()[1], 7);
        assert!(split_sizes(10, [0.8, 0.3, 0.1]).is_err());
    }
}
