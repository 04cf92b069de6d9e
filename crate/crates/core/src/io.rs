//! Small file helpers shared by every writer: atomic replace and hashing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{MusaError, Result};

/// Writes `bytes` to a temporary sibling of `path` and renames it into place,
/// so an interrupted write never leaves a truncated file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| MusaError::io(dir, e))?;
    }
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    tmp.set_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| MusaError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| MusaError::io(&tmp, e))?;
        f.sync_all().map_err(|e| MusaError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| MusaError::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| MusaError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| MusaError::io(path, e))?))
}
