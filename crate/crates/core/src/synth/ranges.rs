use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_model::{Demographics, Sex, MAX_AGE_YEARS};

/// One reference interval for an analyte in a demographic cell. Ages are
/// inclusive on both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeRow {
    pub code: String,
    pub sex: Sex,
    pub age_low: u32,
    pub age_high: u32,
    pub pregnant: bool,
    pub low: f64,
    pub high: f64,
}

type Spans = Vec<(u32, u32, usize)>;

/// Demographic-conditioned normality bounds per measurement code.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RangeTable {
    rows: Vec<RangeRow>,
    // code -> (sex, pregnant) -> (age_low, age_high, row index) sorted by age_low
    cells: HashMap<String, HashMap<(Sex, bool), Spans>>,
}

/// The (sex, pregnant) combinations that must each cover every age.
pub const DEMOGRAPHIC_CELLS: [(Sex, bool); 4] = [
    (Sex::Female, false),
    (Sex::Female, true),
    (Sex::Male, false),
    (Sex::Unknown, false),
];

impl RangeTable {
    /// Builds a table, rejecting inverted bounds and overlapping age intervals.
    pub fn from_rows(rows: Vec<RangeRow>) -> Result<Self> {
        let mut cells: HashMap<String, HashMap<(Sex, bool), Spans>> = HashMap::new();
        for (i, r) in rows.iter().enumerate() {
            if !(r.low.is_finite() && r.high.is_finite() && r.low < r.high) {
                return Err(Error::validation(format!(
                    "range for {}: low {} must be below high {}",
                    r.code, r.low, r.high
                )));
            }
            if r.age_low > r.age_high || r.age_high > MAX_AGE_YEARS {
                return Err(Error::validation(format!(
                    "range for {}: bad age interval {}..={}",
                    r.code, r.age_low, r.age_high
                )));
            }
            if r.pregnant && r.sex != Sex::Female {
                return Err(Error::validation(format!(
                    "range for {}: pregnant rows must be female",
                    r.code
                )));
            }
            cells
                .entry(r.code.clone())
                .or_default()
                .entry((r.sex, r.pregnant))
                .or_default()
                .push((r.age_low, r.age_high, i));
        }
        for (code, by_demo) in cells.iter_mut() {
            for ((sex, pregnant), spans) in by_demo.iter_mut() {
                spans.sort_unstable();
                if let Some(w) = spans.windows(2).find(|w| w[1].0 <= w[0].1) {
                    return Err(Error::validation(format!(
                    "range for {code} ({}, pregnant={pregnant}): age intervals {}..={} and {}..={} overlap",
                    sex.as_str(),
                    w[0].0,
                    w[0].1,
                    w[1].0,
                    w[1].1
                )));
                }
            }
        }
        Ok(Self { rows, cells })
    }

    pub fn rows(&self) -> &[RangeRow] {
        &self.rows
    }

    pub fn codes(&self) -> Vec<&str> {
        let mut codes: Vec<&str> = self.rows.iter().map(|r| r.code.as_str()).collect();
        codes.sort_unstable();
        codes.dedup();
        codes
    }

    /// The `(low, high)` interval for `code` given the patient's demographics.
    pub fn lookup(&self, code: &str, demo: &Demographics) -> Option<(f64, f64)> {
        self.cells
            .get(code)?
            .get(&(demo.sex, demo.pregnant))?
            .iter()
            .find(|(lo, hi, _)| (*lo..=*hi).contains(&demo.age_years))
            .map(|&(_, _, i)| (self.rows[i].low, self.rows[i].high))
    }

    /// Errors unless every listed code has rows partitioning ages 0..=120 in
    /// every demographic cell.
    pub fn check_coverage<'a, I: IntoIterator<Item = &'a str>>(&self, codes: I) -> Result<()> {
        for code in codes {
            for (sex, pregnant) in DEMOGRAPHIC_CELLS {
                let spans = self
                    .cells
                    .get(code)
                    .and_then(|m| m.get(&(sex, pregnant)))
                    .ok_or_else(|| {
                        Error::validation(format!(
                            "no ranges for {code} ({}, pregnant={pregnant})",
                            sex.as_str()
                        ))
                    })?;
                let mut next = 0u32;
                for &(lo, hi, _) in spans {
                    if lo != next {
                        return Err(Error::validation(format!(
                            "ranges for {code} ({}, pregnant={pregnant}) leave ages {next}..{lo} uncovered",
                            sex.as_str()
                        )));
                    }
                    next = hi + 1;
                }
                if next != MAX_AGE_YEARS + 1 {
                    return Err(Error::validation(format!(
                        "ranges for {code} ({}, pregnant={pregnant}) stop at age {}",
                        sex.as_str(),
                        next.saturating_sub(1)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Tab-separated columns: code, sex, age_low, age_high, pregnant, low, high.
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().delimiter(b'\t').from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush().map_err(|e| Error::io("<range table>", e))?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(r);
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize().enumerate() {
            let row: RangeRow = rec.map_err(|e| Error::Record {
                line: i + 2,
                message: e.to_string(),
            })?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }
}
