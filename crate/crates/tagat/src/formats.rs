//! Text formats: dataset manifest, graph files, run config and step logs.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tagat_core::image::Mask;
use tagat_core::train::TrainConfig;
use tagat_core::vessel::VesselGraph;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{path}: invalid graph: {source}")]
    Graph { path: PathBuf, source: tagat_core::vessel::GraphError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.into(), source }
}

fn json_err(path: &Path, line: usize) -> impl FnOnce(serde_json::Error) -> FormatError + '_ {
    move |source| FormatError::Json { path: path.into(), line, source }
}

/// One line of the dataset manifest. Relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    pub image1: PathBuf,
    pub image2: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask1: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask2: Option<PathBuf>,
}

impl PairRecord {
    pub fn resolved(&self, base: &Path) -> Self {
        let r = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        Self {
            id: self.id.clone(),
            image1: r(&self.image1),
            image2: r(&self.image2),
            mask1: self.mask1.as_ref().map(r),
            mask2: self.mask2.as_ref().map(r),
        }
    }
}

/// Reads a line-delimited JSON file; blank lines are skipped.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, FormatError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(json_err(path, i + 1))?);
    }
    Ok(out)
}

/// Manifest records with paths already resolved.
pub fn read_manifest(path: &Path) -> Result<Vec<PairRecord>, FormatError> {
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(read_jsonl::<PairRecord>(path)?.iter().map(|r| r.resolved(base)).collect())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), FormatError> {
    let mut w = JsonlWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.flush()
}

/// Appends one JSON record per line, flushing after each.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self, FormatError> {
        let f = File::create(path).map_err(io_err(path))?;
        Ok(Self { path: path.into(), out: BufWriter::new(f) })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), FormatError> {
        serde_json::to_writer(&mut self.out, record).map_err(json_err(&self.path, 0))?;
        self.out.write_all(b"\n").map_err(io_err(&self.path))?;
        self.flush()
    }

    pub fn flush(&mut self) -> Result<(), FormatError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(value).map_err(json_err(path, 0))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Compact single-line JSON, for files that are mostly long number lists.
pub fn write_json_line<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut text = serde_json::to_string(value).map_err(json_err(path, 0))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(json_err(path, 0))
}

/// Run config. Missing fields take their defaults, unknown fields are rejected.
pub fn read_config(path: &Path) -> Result<TrainConfig, FormatError> {
    read_json(path)
}

/// `{"image_size": [h, w], "nodes": [[x, y], ...], "edges": [[i, j], ...]}`
pub fn write_graph(path: &Path, g: &VesselGraph) -> Result<(), FormatError> {
    write_json_line(path, g)
}

pub fn read_graph(path: &Path) -> Result<VesselGraph, FormatError> {
    let g: VesselGraph = read_json(path)?;
    g.validate().map_err(|source| FormatError::Graph { path: path.into(), source })?;
    Ok(g)
}

/// Hex SHA-256 of a mask's size and pixels.
pub fn mask_hash(m: &Mask) -> String {
    let mut h = Sha256::new();
    h.update((m.height() as u64).to_le_bytes());
    h.update((m.width() as u64).to_le_bytes());
    h.update(m.data().iter().map(|&v| v as u8).collect::<Vec<u8>>());
    format!("{:x}", h.finalize())
}

#[derive(Serialize, Deserialize)]
struct CachedGraph {
    mask_hash: String,
    graph: VesselGraph,
}

/// Graphs stored beside a dataset, one file per mask, reused while the mask
/// hash still matches.
pub struct GraphCache {
    dir: PathBuf,
}

impl GraphCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, FormatError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self { dir })
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.graph.json"))
    }

    /// Cached graph for `key` if it was built from this mask, else `build()`
    /// is stored and returned.
    pub fn get_or_build(
        &self,
        key: &str,
        mask: &Mask,
        build: impl FnOnce() -> VesselGraph,
    ) -> Result<VesselGraph, FormatError> {
        let path = self.path(key);
        let hash = mask_hash(mask);
        if let Ok(c) = read_json::<CachedGraph>(&path) {
            if c.mask_hash == hash && c.graph.image_size == mask.size() && c.graph.validate().is_ok() {
                return Ok(c.graph);
            }
            log::info!("graph cache for {key} is stale, rebuilding");
        }
        let graph = build();
        write_json_line(&path, &CachedGraph { mask_hash: hash, graph: graph.clone() })?;
        Ok(graph)
    }
}
