use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

/// Output directory that only appears once a command has succeeded.
///
/// Files are written to a sibling staging directory which is renamed onto
/// the target by [`Staged::commit`]. Dropping without a commit deletes it.
pub struct Staged {
    target: PathBuf,
    staging: PathBuf,
    committed: bool,
}

impl Staged {
    pub fn new(target: &Path) -> Result<Self> {
        if target.exists() {
            let empty = fs::read_dir(target)
                .with_context(|| format!("{} exists and is not a directory", target.display()))?
                .next()
                .is_none();
            if !empty {
                bail!("output directory {} is not empty", target.display());
            }
        }
        let name = target
            .file_name()
            .with_context(|| format!("invalid output path {}", target.display()))?
            .to_string_lossy();
        let staging = target.with_file_name(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(Staged {
            target: target.to_path_buf(),
            staging,
            committed: false,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.staging.join(file)
    }

    pub fn dir(&self) -> &Path {
        &self.staging
    }

    pub fn write_json<T: Serialize>(&self, file: &str, value: &T) -> Result<()> {
        let path = self.path(file);
        let text = serde_json::to_string_pretty(value)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir(&self.target).with_context(|| format!("replacing {}", self.target.display()))?;
        }
        fs::rename(&self.staging, &self.target)
            .with_context(|| format!("moving outputs to {}", self.target.display()))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}
