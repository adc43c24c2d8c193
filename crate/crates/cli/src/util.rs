//! Filesystem and formatting helpers shared by the commands.

use std::fs;
use std::path::Path;

use remask_core::{Error, Result};

/// Prepares a command's output directory. An existing non-empty directory
/// is refused unless `force`, in which case it is removed and recreated —
/// a forced rerun never leaves stale files behind.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .map_err(|e| Error::config(format!("cannot inspect {}: {e}", dir.display())))?
            .next()
            .is_some();
        if occupied {
            if !force {
                return Err(Error::config(format!(
                    "output directory {} is not empty (pass --force to replace it)",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir)
                .map_err(|e| Error::config(format!("cannot clear {}: {e}", dir.display())))?;
        }
    }
    fs::create_dir_all(dir)
        .map_err(|e| Error::config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))
}

/// Collapses an error display into one line for the machine-parsable
/// failure contract.
pub fn single_line(text: &str) -> String {
    text.replace('\n', "; ").replace('\r', "")
}
