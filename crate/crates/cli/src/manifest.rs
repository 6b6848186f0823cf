use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use groundlab::io;
use serde::{Deserialize, Serialize};

use crate::jobs::Job;

pub const FORMAT: &str = "groundlab-run";
pub const VERSION: u32 = 1;

/// Everything needed to reproduce one command's outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub code_version: String,
    pub command_line: Vec<String>,
    pub seed: u64,
    /// Fully resolved settings; replaying executes exactly this.
    pub job: Job,
    /// Values derived during the run (chosen layer, selected threshold, ...).
    #[serde(default)]
    pub derived: serde_json::Value,
}

impl RunManifest {
    pub fn new(job: Job, command_line: Vec<String>, derived: serde_json::Value) -> Self {
        RunManifest {
            format: FORMAT.into(),
            version: VERSION,
            code_version: env!("CARGO_PKG_VERSION").into(),
            command_line,
            seed: job.seed(),
            job,
            derived,
        }
    }
}

/// `out/run.json` for directory outputs, `out.run.json` for files.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".run.json");
        PathBuf::from(s)
    }
}

pub fn load(path: &Path) -> Result<RunManifest> {
    let m: RunManifest = io::read_json(path)?;
    if m.format != FORMAT || m.version != VERSION {
        bail!(groundlab::Error::Config(format!(
            "{} is not a run manifest ({} v{})",
            path.display(),
            m.format,
            m.version
        )));
    }
    Ok(m)
}
