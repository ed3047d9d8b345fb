//! Atomic file writing and locale-independent numeric formatting.

use std::fs;
use std::path::Path;

use stordinal::{Error, Result};

/// Writes `bytes` to `path` atomically: the content goes to a temporary
/// file in the same directory first and is renamed into place, so readers
/// never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)
            .map_err(|e| Error::invalid(format!("cannot create {}: {e}", dir.display())))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let mut tmp = path.to_path_buf();
    tmp.set_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)
        .map_err(|e| Error::invalid(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| Error::invalid(format!("cannot rename into {}: {e}", path.display())))
}

/// Formats a finite value with six significant digits and a period decimal
/// separator: plain decimal notation within `1e-4..1e6`, scientific
/// notation outside it.
pub fn fmt6(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0.00000".to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        // Rounding can carry into the next decade (9.999999 -> 10.0000),
        // leaving one digit too many; reformat at the carried magnitude.
        let reparsed: f64 = s.parse().expect("formatted float reparses");
        let rounded_exp = if reparsed == 0.0 {
            exp
        } else {
            reparsed.abs().log10().floor() as i32
        };
        if rounded_exp > exp {
            if rounded_exp >= 6 {
                return format!("{x:.5e}");
            }
            let d = (5 - rounded_exp).max(0) as usize;
            return format!("{x:.d$}");
        }
        s
    } else {
        format!("{x:.5e}")
    }
}
