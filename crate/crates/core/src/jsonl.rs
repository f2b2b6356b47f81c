//! Line-delimited JSON helpers shared by the run store and the response cache.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Reads every complete record. A final line without a trailing newline is
/// a torn write from an interrupted process and is dropped; any other
/// unparseable line is an error.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut text = String::new();
    BufReader::new(File::open(path)?).read_to_string(&mut text)?;
    let complete = match text.rfind('\n') {
        Some(ix) => &text[..=ix],
        None => "",
    };
    if complete.len() < text.len() {
        tracing::warn!("{}: ignoring torn final line", path.display());
    }
    let mut out = Vec::new();
    for (i, line) in complete.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{} line {}: {e}", path.display(), i + 1),
            )
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Opens `path` for appending, truncating any torn final line first so the
/// next record starts on a fresh line.
pub fn open_append(path: &Path) -> io::Result<File> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .read(true)
        .append(true)
        .open(path)?;
    let len = file.metadata()?.len();
    if len > 0 {
        let mut reader = BufReader::new(File::open(path)?);
        let mut keep = 0u64;
        let mut pos = 0u64;
        let mut buf = Vec::new();
        loop {
            buf.clear();
            let n = reader.read_until(b'\n', &mut buf)?;
            if n == 0 {
                break;
            }
            pos += n as u64;
            if buf.last() == Some(&b'\n') {
                keep = pos;
            }
        }
        if keep < len {
            file.set_len(keep)?;
            file.seek(SeekFrom::End(0))?;
        }
    }
    Ok(file)
}

pub fn append_record<T: Serialize>(file: &mut File, record: &T) -> io::Result<()> {
    let mut line = serde_json::to_vec(record).map_err(io::Error::other)?;
    line.push(b'\n');
    file.write_all(&line)?;
    file.flush()
}

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
