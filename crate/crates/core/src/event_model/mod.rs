//! Admissions as timestamped medical event sequences, with the label and
//! dataset-preparation operations applied before tokenization.

mod io;

pub use io::{load_cohort, read_cohort, save_cohort, write_cohort, SCHEMA_VERSION};

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Long stays are clipped to this many days.
pub const LOS_CLIP_DAYS: f64 = 30.0;
/// Only events within this many hours of admission are used for prediction.
pub const OBSERVATION_HOURS: f64 = 24.0;
pub const MAX_AGE_YEARS: u32 = 120;

pub const N_COMORBIDITIES: usize = 18;
pub const N_PRESCRIPTION_GROUPS: usize = 14;

/// Charlson-style comorbidity slots, in token order.
pub const COMORBIDITY_NAMES: [&str; N_COMORBIDITIES] = [
    "myocardial_infarction",
    "heart_failure",
    "peripheral_vascular",
    "cerebrovascular",
    "dementia",
    "chronic_pulmonary",
    "connective_tissue",
    "peptic_ulcer",
    "mild_liver",
    "diabetes",
    "diabetes_complications",
    "hemiplegia",
    "renal",
    "malignancy",
    "leukemia",
    "lymphoma",
    "severe_liver",
    "metastatic_tumor",
];

/// First-level ATC anatomical groups, in token order.
pub const PRESCRIPTION_GROUPS: [&str; N_PRESCRIPTION_GROUPS] = [
    "A", "B", "C", "D", "G", "H", "J", "L", "M", "N", "P", "R", "S", "V",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
    Unknown,
}

impl Sex {
    pub const ALL: [Sex; 3] = [Sex::Female, Sex::Male, Sex::Unknown];

    /// Row index into the sex embedding table.
    pub fn id(self) -> usize {
        match self {
            Sex::Female => 0,
            Sex::Male => 1,
            Sex::Unknown => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
            Sex::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Sex> {
        Sex::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub age_years: u32,
    pub sex: Sex,
    pub pregnant: bool,
}

impl Demographics {
    pub fn new(age_years: u32, sex: Sex, pregnant: bool) -> Result<Self> {
        let d = Self {
            age_years,
            sex,
            pregnant,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.age_years > MAX_AGE_YEARS {
            return Err(Error::validation(format!(
                "demographics.age_years {} exceeds {MAX_AGE_YEARS}",
                self.age_years
            )));
        }
        if self.pregnant && self.sex != Sex::Female {
            return Err(Error::validation(
                "demographics.pregnant is only valid for sex = female",
            ));
        }
        Ok(())
    }

    /// Decade bucket 0..=11 (110+ shares the last bucket).
    pub fn age_bucket(&self) -> usize {
        (self.age_years as usize / 10).min(AGE_BUCKETS - 1)
    }
}

pub const AGE_BUCKETS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Lab,
    Vital,
    Medication,
    Procedure,
}

impl EventType {
    pub fn has_value(self) -> bool {
        matches!(self, EventType::Lab | EventType::Vital)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicalEvent {
    pub event_type: EventType,
    pub code: String,
    #[serde(default)]
    pub value: Option<f64>,
    pub timestamp_hours: f64,
}

impl MedicalEvent {
    pub fn measurement(
        event_type: EventType,
        code: &str,
        value: f64,
        timestamp_hours: f64,
    ) -> Self {
        Self {
            event_type,
            code: code.to_string(),
            value: Some(value),
            timestamp_hours,
        }
    }

    pub fn coded(event_type: EventType, code: &str, timestamp_hours: f64) -> Self {
        Self {
            event_type,
            code: code.to_string(),
            value: None,
            timestamp_hours,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.timestamp_hours.is_finite() || self.timestamp_hours < 0.0 {
            return Err(Error::validation(format!(
                "event {}: timestamp_hours must be finite and >= 0, got {}",
                self.code, self.timestamp_hours
            )));
        }
        match (self.event_type.has_value(), self.value) {
            (true, None) => Err(Error::validation(format!(
                "event {}: value is required for {:?} events",
                self.code, self.event_type
            ))),
            (false, Some(_)) => Err(Error::validation(format!(
                "event {}: value is not allowed for {:?} events",
                self.code, self.event_type
            ))),
            (true, Some(v)) if !v.is_finite() => Err(Error::validation(format!(
                "event {}: value must be finite",
                self.code
            ))),
            _ => Ok(()),
        }
    }
}

macro_rules! token_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $tok:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn token(self) -> &'static str {
                match self {
                    $($name::$variant => $tok),+
                }
            }

            pub fn ordinal(self) -> usize {
                Self::ALL.iter().position(|v| *v == self).expect("listed")
            }
        }
    };
}

token_enum!(ArrivalMode {
    Ambulance => "ambulance",
    WalkIn => "walk_in",
    Referral => "referral",
    Transfer => "transfer",
});

token_enum!(
    /// Hour of arrival, in six-hour buckets.
    HourBucket {
        Night => "00-05",
        Morning => "06-11",
        Afternoon => "12-17",
        Evening => "18-23",
    }
);

token_enum!(Weekday {
    Mon => "mon",
    Tue => "tue",
    Wed => "wed",
    Thu => "thu",
    Fri => "fri",
    Sat => "sat",
    Sun => "sun",
});

token_enum!(Season {
    Winter => "winter",
    Spring => "spring",
    Summer => "summer",
    Autumn => "autumn",
});

token_enum!(
    /// Five-level emergency triage, most urgent first.
    Triage {
        Red => "red",
        Orange => "orange",
        Yellow => "yellow",
        Green => "green",
        Blue => "blue",
    }
);

token_enum!(AdmissionType {
    Acute => "acute",
    Subacute => "subacute",
    Elective => "elective",
});

/// Pre-admission history that becomes the fixed-length sequence prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub comorbidities: [bool; N_COMORBIDITIES],
    pub prescription_groups: [bool; N_PRESCRIPTION_GROUPS],
    pub arrival_mode: ArrivalMode,
    pub hour_bucket: HourBucket,
    pub weekday: Weekday,
    pub season: Season,
    pub triage: Triage,
    pub admission_type: AdmissionType,
}

impl Default for History {
    fn default() -> Self {
        Self {
            comorbidities: [false; N_COMORBIDITIES],
            prescription_groups: [false; N_PRESCRIPTION_GROUPS],
            arrival_mode: ArrivalMode::WalkIn,
            hour_bucket: HourBucket::Morning,
            weekday: Weekday::Mon,
            season: Season::Winter,
            triage: Triage::Yellow,
            admission_type: AdmissionType::Acute,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Admission {
    pub admission_id: String,
    pub demographics: Demographics,
    pub history: History,
    pub events: Vec<MedicalEvent>,
    pub los_days: f64,
}

impl Admission {
    pub fn validate(&self) -> Result<()> {
        self.demographics.validate()?;
        if !self.los_days.is_finite() || self.los_days <= 1.0 {
            return Err(Error::validation(format!(
                "los_days must be finite and > 1, got {}",
                self.los_days
            )));
        }
        for e in &self.events {
            e.validate()?;
        }
        if self
            .events
            .windows(2)
            .any(|w| w[1].timestamp_hours < w[0].timestamp_hours)
        {
            return Err(Error::validation(
                "events must be sorted by non-decreasing timestamp_hours",
            ));
        }
        Ok(())
    }

    /// Stable sort of events by timestamp; ties keep their current order.
    pub fn sort_events(&mut self) {
        self.events
            .sort_by(|a, b| a.timestamp_hours.total_cmp(&b.timestamp_hours));
    }

    pub fn labels(&self) -> Result<Labels> {
        Labels::from_los(self.los_days)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub schema_version: String,
    pub seed: u64,
    pub admissions: Vec<Admission>,
}

impl Cohort {
    pub fn new(seed: u64, admissions: Vec<Admission>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            seed,
            admissions,
        }
    }

    pub fn len(&self) -> usize {
        self.admissions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.admissions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.admissions.len());
        for a in &self.admissions {
            a.validate()
                .map_err(|e| Error::validation(format!("admission {}: {e}", a.admission_id)))?;
            if !seen.insert(a.admission_id.as_str()) {
                return Err(Error::validation(format!(
                    "duplicate admission_id {}",
                    a.admission_id
                )));
            }
        }
        Ok(())
    }
}

/// Prediction targets derived from one admission's length of stay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub binary: u8,
    pub category: u8,
    /// Clipped LOS in days.
    pub real: f64,
}

impl Labels {
    pub fn from_los(los_days: f64) -> Result<Self> {
        Ok(Self {
            binary: label_binary(los_days)?,
            category: label_category(los_days)?,
            real: clip_los(los_days)?,
        })
    }
}

pub fn clip_los(los_days: f64) -> Result<f64> {
    if !los_days.is_finite() || los_days <= 0.0 {
        return Err(Error::validation(format!(
            "length of stay must be finite and positive, got {los_days}"
        )));
    }
    Ok(los_days.min(LOS_CLIP_DAYS))
}

/// 1 iff the clipped stay exceeds two days.
pub fn label_binary(los_days: f64) -> Result<u8> {
    Ok(u8::from(clip_los(los_days)? > 2.0))
}

/// 0: LOS < 2, 1: 2 ≤ LOS ≤ 7, 2: LOS > 7.
pub fn label_category(los_days: f64) -> Result<u8> {
    let los = clip_los(los_days)?;
    Ok(if los < 2.0 {
        0
    } else if los <= 7.0 {
        1
    } else {
        2
    })
}

/// Keeps only events at or before `horizon_hours`.
pub fn window_events(adm: &Admission, horizon_hours: f64) -> Result<Admission> {
    if !(horizon_hours > 0.0) {
        return Err(Error::validation(format!(
            "horizon_hours must be positive, got {horizon_hours}"
        )));
    }
    let mut out = adm.clone();
    out.events.retain(|e| e.timestamp_hours <= horizon_hours);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSplit {
    pub train: Cohort,
    pub valid: Cohort,
    pub test: Cohort,
}

/// Seeded random 80/10/10 partition. Sizes are ⌊0.8n⌋, ⌊0.1n⌋ and the remainder.
pub fn split_cohort(cohort: &Cohort, seed: u64) -> Result<CohortSplit> {
    let n = cohort.len();
    if n < 10 {
        return Err(Error::validation(format!(
            "cohort of {n} admissions is too small to split (need >= 10)"
        )));
    }
    let (n_train, n_valid) = split_sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| Cohort {
        schema_version: cohort.schema_version.clone(),
        seed: cohort.seed,
        admissions: idx.iter().map(|&i| cohort.admissions[i].clone()).collect(),
    };
    Ok(CohortSplit {
        train: take(&order[..n_train]),
        valid: take(&order[n_train..n_train + n_valid]),
        test: take(&order[n_train + n_valid..]),
    })
}

/// (train, valid) sizes; test gets the rest. Integer arithmetic avoids
/// floating-point floor surprises such as ⌊0.1 · 30⌋.
pub fn split_sizes(n: usize) -> (usize, usize) {
    (n * 8 / 10, n / 10)
}
