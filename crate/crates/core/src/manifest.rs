//! Line-delimited JSON record files.
//!
//! Every file starts with a header line `{"schema": "filtrank.<kind>",
//! "version": 1}` followed by one record per line. Field names of the record
//! types are part of the on-disk format.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

fn schema_name(kind: &str) -> String {
    format!("filtrank.{kind}")
}

fn header_line(kind: &str) -> Result<String> {
    Ok(serde_json::to_string(&Header {
        schema: schema_name(kind),
        version: VERSION,
    })?)
}

/// Serializes `records` into the text of a `kind` file.
pub fn to_string<T: Serialize>(kind: &str, records: &[T]) -> Result<String> {
    let mut out = header_line(kind)?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse<T: DeserializeOwned>(kind: &str, text: &str) -> Result<Vec<T>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(Error::Manifest {
        line: 1,
        detail: "missing header".into(),
    })?;
    let header: Header = serde_json::from_str(first).map_err(|e| Error::Manifest {
        line: 1,
        detail: format!("bad header: {e}"),
    })?;
    if header.schema != schema_name(kind) || header.version != VERSION {
        return Err(Error::Manifest {
            line: 1,
            detail: format!(
                "expected {} v{VERSION}, found {} v{}",
                schema_name(kind),
                header.schema,
                header.version
            ),
        });
    }
    lines
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

/// Writes the whole file through a temporary sibling and an atomic rename.
pub fn write<T: Serialize>(path: impl AsRef<Path>, kind: &str, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(to_string(kind, records)?.as_bytes())?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    parse(kind, &text)
}

/// Appends records, creating the file with its header if needed. Each call
/// ends with an fsync so an acknowledged record survives a crash.
pub fn append<T: Serialize>(path: impl AsRef<Path>, kind: &str, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    drop_torn_tail(path)?;
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{}", header_line(kind)?)?;
    }
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    w.get_ref().sync_data()?;
    Ok(())
}

fn drop_torn_tail(path: &Path) -> Result<()> {
    let raw = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    if !raw.is_empty() && !raw.ends_with(b"\n") {
        let keep = raw.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
    }
    Ok(())
}

/// Reads an append-only log, ignoring a torn final line left by a crash
/// mid-write. Returns an empty list for a missing file.
pub fn read_log<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<Vec<T>> {
    let mut raw = match fs::read(path.as_ref()) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let keep = raw.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    raw.truncate(keep);
    let text = String::from_utf8(raw).map_err(|e| Error::Manifest {
        line: 0,
        detail: e.to_string(),
    })?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    parse(kind, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Rec {
        id: u32,
        name: String,
    }

    fn recs() -> Vec<Rec> {
        (0..3)
            .map(|id| Rec {
                id,
                name: format!("r{id}"),
            })
            .collect()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.jsonl");
        write(&p, "things", &recs()).unwrap();
        assert_eq!(read::<Rec>(&p, "things").unwrap(), recs());
        assert!(matches!(read::<Rec>(&p, "other"), Err(Error::Manifest { line: 1, .. })));
        assert!(matches!(
            read::<Rec>(dir.path().join("none"), "things"),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn bad_record_reports_line() {
        let text = format!("{}\n{{\"id\":1,\"name\":\"x\"}}\nnot json\n", header_line("t").unwrap());
        assert!(matches!(parse::<Rec>("t", &text), Err(Error::Manifest { line: 3, .. })));
    }

    #[test]
    fn append_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        assert!(read_log::<Rec>(&p, "log").unwrap().is_empty());
        append(&p, "log", &recs()[..2]).unwrap();
        append(&p, "log", &recs()[2..]).unwrap();
        assert_eq!(read_log::<Rec>(&p, "log").unwrap(), recs());
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        f.write_all(b"{\"id\":9,\"na").unwrap();
        assert_eq!(read_log::<Rec>(&p, "log").unwrap(), recs());
        append(&p, "log", &recs()[..1]).unwrap();
        assert_eq!(read_log::<Rec>(&p, "log").unwrap().len(), 4);
    }
}
