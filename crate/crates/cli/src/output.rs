use std::fs;
use std::path::{Path, PathBuf};

use gtrans_core::Result;

/// Output directory from `--out-dir` or `GTRANS_OUT_DIR`.
pub struct OutDir {
    dir: Option<PathBuf>,
}

impl OutDir {
    pub fn new(dir: Option<PathBuf>) -> Self {
        OutDir { dir }
    }

    /// Relative paths land under the output directory: the flag or
    /// environment value first, then the config's `out_dir`, then the
    /// working directory.
    pub fn resolve(&self, config_dir: Option<&Path>, path: Option<PathBuf>, default_name: &str) -> PathBuf {
        let path = path.unwrap_or_else(|| PathBuf::from(default_name));
        if path.is_absolute() {
            return path;
        }
        match self.dir.as_deref().or(config_dir) {
            Some(dir) => dir.join(path),
            None => path,
        }
    }
}

/// `model.gtck` → `model.<suffix>`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

/// Files are written only after every output has been produced in memory,
/// each through a temporary sibling and a rename.
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn new() -> Self {
        Outputs { files: Vec::new() }
    }

    pub fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    pub fn commit(self) -> Result<Vec<PathBuf>> {
        let mut written = Vec::with_capacity(self.files.len());
        for (path, bytes) in self.files {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let mut tmp = path.clone().into_os_string();
            tmp.push(".partial");
            fs::write(&tmp, &bytes)?;
            fs::rename(&tmp, &path)?;
            written.push(path);
        }
        Ok(written)
    }
}
