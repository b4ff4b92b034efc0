//! Line-delimited run-record persistence (one JSON record per line).

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::RunRecord;

pub fn append_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Format(format!("record serialization: {e}")))?;
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    Ok(())
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    append_records(path, records)
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if record.schema_version != super::RECORD_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "{}:{}: unsupported record schema {}",
                path.display(),
                lineno + 1,
                record.schema_version
            )));
        }
        out.push(record);
    }
    Ok(out)
}
