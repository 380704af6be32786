//! Text artifacts (importance tables, recipes) and locked writes.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::importance::ImportanceTable;
use crate::model::Model;
use crate::surgeon::PruneRecipe;

pub const SCORES_MAGIC: &str = "VITPRUNE-SCORES";
pub const SCORES_VERSION: u32 = 1;

/// Replaces the contents of `path` while holding an exclusive advisory lock on it.
pub fn write_locked(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(false)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.lock().map_err(|e| Error::io(path, e))?;
    let res = f.set_len(0).and_then(|_| f.write_all(bytes)).and_then(|_| f.flush());
    let _ = f.unlock();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Splits `MAGIC version` off the first line and checks it.
pub(crate) fn strip_header<'t>(text: &'t str, magic: &str, supported: u32, path: &Path) -> Result<&'t str> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let version = first
        .strip_prefix(magic)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| Error::format(path, format!("expected `{magic} <version>` header")))?;
    if version > supported {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported,
        });
    }
    Ok(rest)
}

fn check_fingerprint(expected: &str, model: Option<&Model>, allow_mismatch: bool) -> Result<()> {
    if let (Some(m), false) = (model, allow_mismatch) {
        let found = m.fingerprint();
        if found != expected {
            return Err(Error::FingerprintMismatch {
                expected: expected.to_string(),
                found,
            });
        }
    }
    Ok(())
}

pub fn table_to_text(t: &ImportanceTable) -> String {
    let body = serde_json::to_string_pretty(t).expect("table serializes");
    format!("{SCORES_MAGIC} {SCORES_VERSION}\n{body}\n")
}

pub fn save_table(t: &ImportanceTable, path: &Path) -> Result<()> {
    write_locked(path, table_to_text(t).as_bytes())
}

/// Loads a table; when `model` is given its fingerprint must match unless
/// `allow_mismatch` is set.
pub fn load_table(path: &Path, model: Option<&Model>, allow_mismatch: bool) -> Result<ImportanceTable> {
    let text = read_text(path)?;
    let body = strip_header(&text, SCORES_MAGIC, SCORES_VERSION, path)?;
    let t: ImportanceTable = serde_json::from_str(body).map_err(|e| Error::format(path, e.to_string()))?;
    check_fingerprint(&t.model_fingerprint, model, allow_mismatch)?;
    Ok(t)
}

pub fn save_recipe(r: &PruneRecipe, path: &Path) -> Result<()> {
    write_locked(path, r.to_text().as_bytes())
}

pub fn load_recipe(path: &Path, model: Option<&Model>, allow_mismatch: bool) -> Result<PruneRecipe> {
    let r = PruneRecipe::parse(&read_text(path)?, path)?;
    check_fingerprint(&r.source, model, allow_mismatch)?;
    Ok(r)
}

/// Tab-separated view of a table: one row per channel, then one per block candidate.
pub fn table_to_tsv(t: &ImportanceTable) -> String {
    let mut s = String::from("kind\tcomponent\tscope\tindex\tscore\n");
    for g in &t.channels {
        for (j, v) in g.scores.iter().enumerate() {
            s.push_str(&format!("channel\t{}\t{}\t{j}\t{v:e}\n", g.component, g.scope));
        }
    }
    for b in &t.blocks {
        s.push_str(&format!("block\t-\t{}\t-\t{:e}\n", b.candidate, b.score));
    }
    s
}
