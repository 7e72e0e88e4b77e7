use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

/// Output directory that removes what it wrote unless [`Outputs::commit`] is
/// called, so a failed command leaves no partial results behind.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), created_dir, written: Vec::new(), committed: false })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Registers `name` for cleanup and returns its full path.
    pub fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
        text.push('\n');
        fs::write(&p, text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        Ok(p)
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        if self.created_dir {
            let _ = fs::remove_dir_all(&self.dir);
            return;
        }
        for p in self.written.iter().rev() {
            if p.is_dir() {
                let _ = fs::remove_dir_all(p);
            } else {
                let _ = fs::remove_file(p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_are_removed() {
        let root = tempfile::tempdir().unwrap();
        let fresh = root.path().join("fresh");
        {
            let mut o = Outputs::create(&fresh).unwrap();
            o.write_json("a.json", &1).unwrap();
        }
        assert!(!fresh.exists());

        let existing = root.path().join("existing");
        fs::create_dir(&existing).unwrap();
        fs::write(existing.join("keep.txt"), "x").unwrap();
        {
            let mut o = Outputs::create(&existing).unwrap();
            o.write_json("a.json", &1).unwrap();
        }
        assert!(existing.join("keep.txt").exists());
        assert!(!existing.join("a.json").exists());
    }

    #[test]
    fn committed_outputs_stay() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("out");
        let mut o = Outputs::create(&dir).unwrap();
        o.write_json("a.json", &[1, 2]).unwrap();
        o.commit();
        assert_eq!(fs::read_to_string(dir.join("a.json")).unwrap(), "[\n  1,\n  2\n]\n");
    }
}
