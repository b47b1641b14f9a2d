use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::event_model::{Demographics, Sex, AGE_BUCKETS};

/// Strata with this many samples or fewer are suppressed.
pub const MIN_STRATUM_SIZE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stratum {
    /// Ages `10·k ..= 10·k + 9` (the last bucket is open-ended).
    AgeDecade(u8),
    Sex(Sex),
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stratum::AgeDecade(k) if usize::from(*k) == AGE_BUCKETS - 1 => {
                write!(f, "age:{}+", u32::from(*k) * 10)
            }
            Stratum::AgeDecade(k) => {
                write!(f, "age:{}-{}", u32::from(*k) * 10, u32::from(*k) * 10 + 9)
            }
            Stratum::Sex(s) => write!(f, "sex:{}", s.as_str()),
        }
    }
}

/// The demographic attributes strata are defined over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StratumKey {
    pub age_bucket: usize,
    pub sex: Sex,
}

impl From<&Demographics> for StratumKey {
    fn from(d: &Demographics) -> Self {
        Self {
            age_bucket: d.age_bucket(),
            sex: d.sex,
        }
    }
}

impl Stratum {
    pub fn contains(&self, key: &StratumKey) -> bool {
        match *self {
            Stratum::AgeDecade(k) => key.age_bucket == usize::from(k),
            Stratum::Sex(s) => key.sex == s,
        }
    }

    /// Every age decade followed by every sex.
    pub fn all() -> Vec<Stratum> {
        (0..AGE_BUCKETS as u8)
            .map(Stratum::AgeDecade)
            .chain(Sex::ALL.into_iter().map(Stratum::Sex))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StratumValue {
    Reported(f64),
    /// Too few samples to report.
    Suppressed,
    /// Enough samples, but the metric is undefined (e.g. a single class).
    Undefined(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumResult {
    pub stratum: Stratum,
    pub n: usize,
    pub value: StratumValue,
}

impl StratumResult {
    pub fn reported(&self) -> Option<f64> {
        match self.value {
            StratumValue::Reported(v) => Some(v),
            _ => None,
        }
    }
}

/// Evaluates `metric` on the sample indices of each stratum in `strata`.
/// Strata with at most [`MIN_STRATUM_SIZE`] members are suppressed without
/// calling `metric`.
pub fn stratified_eval<F>(
    keys: &[StratumKey],
    strata: &[Stratum],
    mut metric: F,
) -> Vec<StratumResult>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    strata
        .iter()
        .map(|&stratum| {
            let idx: Vec<usize> = keys
                .iter()
                .enumerate()
                .filter(|(_, k)| stratum.contains(k))
                .map(|(i, _)| i)
                .collect();
            let value = if idx.len() <= MIN_STRATUM_SIZE {
                StratumValue::Suppressed
            } else {
                match metric(&idx) {
                    Ok(v) => StratumValue::Reported(v),
                    Err(e) => StratumValue::Undefined(e.to_string()),
                }
            };
            StratumResult {
                stratum,
                n: idx.len(),
                value,
            }
        })
        .collect()
}
