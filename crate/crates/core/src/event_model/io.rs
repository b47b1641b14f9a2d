//! Line-delimited cohort files: a header object on line 1 followed by one
//! admission object per line.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Admission, Cohort};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: String,
    seed: u64,
}

pub fn write_cohort<W: Write>(cohort: &Cohort, mut w: W) -> Result<()> {
    let header = Header {
        schema_version: cohort.schema_version.clone(),
        seed: cohort.seed,
    };
    let io_err = |e| Error::io("<cohort stream>", e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io_err)?;
    for a in &cohort.admissions {
        serde_json::to_writer(&mut w, a)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn save_cohort(cohort: &Cohort, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_cohort(cohort, BufWriter::new(f))
}

/// Parses a cohort stream. Errors carry the 1-based line number.
pub fn read_cohort<R: Read>(r: R) -> Result<Cohort> {
    let mut lines = BufReader::new(r).lines().enumerate();
    let header = loop {
        match lines.next() {
            None => {
                log::warn!("cohort file is empty; returning an empty cohort");
                return Ok(Cohort::new(0, Vec::new()));
            }
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io("<cohort stream>", e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let h: Header = serde_json::from_str(&line).map_err(|e| Error::Record {
                    line: i + 1,
                    message: format!("invalid header: {e}"),
                })?;
                if h.schema_version != SCHEMA_VERSION {
                    return Err(Error::Record {
                        line: i + 1,
                        message: format!(
                            "unsupported schema_version {:?} (expected {SCHEMA_VERSION:?})",
                            h.schema_version
                        ),
                    });
                }
                break h;
            }
        }
    };

    let mut admissions = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io("<cohort stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = |message: String| Error::Record {
            line: i + 1,
            message,
        };
        let adm: Admission = serde_json::from_str(&line).map_err(|e| record(e.to_string()))?;
        adm.validate().map_err(|e| record(e.to_string()))?;
        admissions.push(adm);
    }
    let cohort = Cohort {
        schema_version: header.schema_version,
        seed: header.seed,
        admissions,
    };
    cohort.validate()?;
    Ok(cohort)
}

pub fn load_cohort(path: &Path) -> Result<Cohort> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_cohort(f)
}
