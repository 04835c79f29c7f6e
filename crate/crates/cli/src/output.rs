use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::{Failure, Format};

/// Writes `contents` to `out` (via a temporary sibling and a rename, so an
/// interrupted run never leaves a partial file) or to stdout.
pub fn emit(out: Option<&Path>, contents: &str) -> Result<(), Failure> {
    match out {
        Some(path) => {
            let mut tmp = path.as_os_str().to_owned();
            tmp.push(".partial");
            fs::write(&tmp, contents)?;
            fs::rename(&tmp, path)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(contents.as_bytes())?;
        }
    }
    Ok(())
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::Usage(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// CSV of the flat rows, or JSON of the full document.
pub fn render<R: Serialize, D: Serialize>(
    format: Format,
    rows: &[R],
    doc: &D,
) -> Result<String, Failure> {
    match format {
        Format::Csv => to_csv(rows),
        Format::Json => to_json(doc),
    }
}
