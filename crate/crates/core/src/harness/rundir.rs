//! Run directory layout and the append-only manifest.
//!
//! ```text
//! <out_dir>/
//!   weights/        model weight files
//!   dreams/         one DreamResult JSON per run
//!   eval/           EvalReports, grid rankings, distribution tables
//!   manifest.jsonl  one JSON record per line, appended
//! ```
//!
//! Paths written into the manifest are relative to the run directory,
//! except dataset paths, which are recorded as given on the command line.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub status: RunStatus,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Effective configuration of the command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub unix_time: u64,
}

impl ManifestEntry {
    pub fn new(command: &str, status: RunStatus) -> Self {
        Self {
            command: command.to_string(),
            run_id: None,
            status,
            inputs: Vec::new(),
            outputs: Vec::new(),
            error: None,
            config: None,
            unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }
}

pub struct RunDir {
    root: PathBuf,
    writer: Mutex<()>,
}

impl RunDir {
    /// Opens `root`, creating it and its subdirectories as needed.
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["weights", "dreams", "eval"] {
            let p = root.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            writer: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn weights_path(&self) -> PathBuf {
        self.root.join("weights").join("model.sdw")
    }

    pub fn dream_path(&self, stem: &str) -> PathBuf {
        self.root.join("dreams").join(format!("{stem}.json"))
    }

    pub fn eval_path(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(name)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    /// `path` relative to the run directory, with `/` separators.
    pub fn relative(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }

    /// Writes `contents` to `path` through a temporary file and a rename, so
    /// an interrupted run never leaves a half-written result.
    pub fn write_atomic(&self, path: &Path, contents: &str) -> Result<()> {
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn append(&self, entry: &ManifestEntry) -> Result<()> {
        let line = serde_json::to_string(entry)?;
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let path = self.manifest_path();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    /// All manifest records; a missing manifest is empty and a torn final
    /// line (from an interrupted write) is skipped.
    pub fn read_manifest(&self) -> Result<Vec<ManifestEntry>> {
        let path = self.manifest_path();
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let mut out = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            match serde_json::from_str(line) {
                Ok(e) => out.push(e),
                Err(_) if i + 1 == lines.len() => {}
                Err(e) => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("manifest: {e}"),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Most recent successful entry of `command`.
    pub fn last_done(&self, command: &str) -> Result<Option<ManifestEntry>> {
        Ok(self
            .read_manifest()?
            .into_iter()
            .rev()
            .find(|e| e.command == command && e.status == RunStatus::Done))
    }
}
