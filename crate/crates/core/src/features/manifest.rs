//! Dataset manifests: a JSON list of `{music, dance, genre, split}` entries
//! with paths relative to the manifest file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mdseq::{self, FormatError};
use super::{ChordSeed, DanceSequence, MusicSequence, SequenceError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub music: PathBuf,
    pub dance: PathBuf,
    pub genre: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestFile {
    pairs: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub music: MusicSequence,
    pub dance: DanceSequence,
    pub genre: String,
    pub split: Split,
}

impl Pair {
    pub fn new(music: MusicSequence, dance: DanceSequence, genre: impl Into<String>, split: Split) -> Result<Self, SequenceError> {
        if music.len() != dance.len() {
            return Err(SequenceError::Mismatch(format!("music has {} frames, dance {}", music.len(), dance.len())));
        }
        if music.fps != dance.fps {
            return Err(SequenceError::Mismatch(format!("music fps {} vs dance fps {}", music.fps, dance.fps)));
        }
        Ok(Pair { music, dance, genre: genre.into(), split })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairedDataset {
    pub pairs: Vec<Pair>,
}

impl PairedDataset {
    pub fn split(&self, s: Split) -> Vec<&Pair> {
        self.pairs.iter().filter(|p| p.split == s).collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("reading manifest {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("entry {index} ({path}): {source}")]
    File { index: usize, path: PathBuf, source: FormatError },
    #[error("entry {index}: {source}")]
    Pair { index: usize, source: SequenceError },
    #[error("entry {index}: bad key: {msg}")]
    Key { index: usize, msg: String },
    #[error("manifest lists no pairs")]
    Empty,
}

impl ManifestError {
    pub fn code(&self) -> &'static str {
        match self {
            ManifestError::File { source, .. } => source.code(),
            _ => "invalid-manifest",
        }
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<PairedDataset, ManifestError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io { path: path.into(), source })?;
    let file: ManifestFile = serde_json::from_str(&text)?;
    if file.pairs.is_empty() {
        return Err(ManifestError::Empty);
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::with_capacity(file.pairs.len());
    for (index, e) in file.pairs.into_iter().enumerate() {
        let mp = base.join(&e.music);
        let dp = base.join(&e.dance);
        let mut music = mdseq::load_music(&mp).map_err(|source| ManifestError::File { index, path: mp, source })?;
        let dance = mdseq::load_dance(&dp).map_err(|source| ManifestError::File { index, path: dp, source })?;
        if let Some(k) = &e.key {
            let key: ChordSeed = k.parse().map_err(|msg| ManifestError::Key { index, msg })?;
            music.key = Some(key);
        }
        pairs.push(Pair::new(music, dance, e.genre, e.split).map_err(|source| ManifestError::Pair { index, source })?);
    }
    Ok(PairedDataset { pairs })
}

/// Write each pair as two `.mdseq` files under `dir` plus `manifest.json`.
/// Returns the manifest path.
pub fn write_manifest(ds: &PairedDataset, dir: impl AsRef<Path>) -> Result<PathBuf, ManifestError> {
    let dir = dir.as_ref();
    let io = |source| ManifestError::Io { path: dir.into(), source };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut entries = Vec::with_capacity(ds.len());
    for (i, p) in ds.pairs.iter().enumerate() {
        let split = match p.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let music = PathBuf::from(format!("{split}_{i:04}_music.mdseq"));
        let dance = PathBuf::from(format!("{split}_{i:04}_dance.mdseq"));
        mdseq::save_music(&p.music, dir.join(&music)).map_err(|source| ManifestError::File { index: i, path: music.clone(), source })?;
        mdseq::save_dance(&p.dance, dir.join(&dance)).map_err(|source| ManifestError::File { index: i, path: dance.clone(), source })?;
        entries.push(ManifestEntry {
            music,
            dance,
            genre: p.genre.clone(),
            split: p.split,
            key: p.music.key.map(|k| k.to_string()),
        });
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&ManifestFile { pairs: entries })?;
    std::fs::write(&path, text + "\n").map_err(io)?;
    Ok(path)
}
