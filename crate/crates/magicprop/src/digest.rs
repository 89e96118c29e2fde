//! Content digests for determinism checks: a file tree hashes to one hex
//! string covering sorted relative paths and file bytes.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn walk(dir: &Path, base: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            walk(&path, base, files)?;
        } else {
            files.push(path.strip_prefix(base).unwrap().to_path_buf());
        }
    }
    Ok(())
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex(&h.finalize()))
}

/// Digest of every file under `root`, order-independent of traversal.
pub fn dir_digest(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    walk(root, root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        let full = root.join(&rel);
        let bytes = std::fs::read(&full).map_err(|e| Error::io(&full, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_content_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("a")).unwrap();
        std::fs::write(dir.path().join("a/x.txt"), b"hello").unwrap();
        let d1 = dir_digest(dir.path()).unwrap();
        let d1b = dir_digest(dir.path()).unwrap();
        assert_eq!(d1, d1b);
        std::fs::write(dir.path().join("a/x.txt"), b"hellp").unwrap();
        assert_ne!(dir_digest(dir.path()).unwrap(), d1);
    }
}
