//! JSON Lines helpers. Writers go through a sibling temp file and a rename so a
//! failed run never leaves a truncated output behind.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, SaltError};

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| SaltError::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SaltError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| {
            SaltError::data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T, I>(path: &Path, records: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    atomic_write(path, |w| {
        for record in records {
            serde_json::to_writer(&mut *w, record)
                .map_err(|e| SaltError::internal(format!("serialize: {e}")))?;
            w.write_all(b"\n").map_err(|e| SaltError::io(path, e))?;
        }
        Ok(())
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)
            .map_err(|e| SaltError::internal(format!("serialize: {e}")))?;
        w.write_all(b"\n").map_err(|e| SaltError::io(path, e))
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| SaltError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| SaltError::data(format!("{}: {e}", path.display())))
}

/// Writes through `<path>.partial`, renaming on success and deleting on failure.
pub fn atomic_write<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| SaltError::io(parent, e))?;
    }
    let tmp = partial_path(path);
    let result = (|| {
        let file = File::create(&tmp).map_err(|e| SaltError::io(&tmp, e))?;
        let mut writer = BufWriter::new(file);
        body(&mut writer)?;
        writer.flush().map_err(|e| SaltError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| SaltError::io(path, e))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}
