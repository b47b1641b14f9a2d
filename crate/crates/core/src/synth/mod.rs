//! Synthetic cohorts with a planted severity signal.
//!
//! Every admission draws a latent severity `s ~ Uniform[0, 1]`. With
//! `severity_effect = e`:
//!
//! * LOS is `1 + 29 · Beta(m·κ, (1 − m)·κ)` with mean fraction
//!   `m = 0.12 · exp(3 · e · (s − 0.5))` and `κ = 8`, so stays are right-skewed
//!   and lengthen with severity;
//! * each measurement is abnormal with probability `0.3 + 0.5 · e · (s − 0.5)`;
//! * the event count is Poisson with mean `mean_events · exp(0.8 · e · (s − 0.5))`;
//! * comorbidities, prescriptions, arrival mode and triage shift with `s`;
//! * a handful of "intensive" procedure codes become more likely with `s`.
//!
//! With `e = 0` none of the generated observables depend on `s`.

mod ranges;

pub use ranges::{RangeRow, RangeTable, DEMOGRAPHIC_CELLS};

use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_model::{
    Admission, AdmissionType, ArrivalMode, Cohort, Demographics, EventType, History, HourBucket,
    MedicalEvent, Season, Sex, Triage, Weekday, MAX_AGE_YEARS, N_COMORBIDITIES,
    N_PRESCRIPTION_GROUPS, PRESCRIPTION_GROUPS,
};
use crate::numerics::derived_rng;

/// Vital signs, in code order.
pub const VITAL_CODES: [(&str, f64, f64); 7] = [
    ("temperature", 36.1, 38.0),
    ("spo2", 94.0, 100.0),
    ("bmi", 18.5, 30.0),
    ("pulse", 50.0, 100.0),
    ("resp_rate", 10.0, 20.0),
    ("bp_systolic", 100.0, 140.0),
    ("bp_diastolic", 60.0, 90.0),
];

/// Age bands (inclusive) used for laboratory reference ranges.
pub const LAB_AGE_BANDS: [(u32, u32); 4] = [(0, 17), (18, 40), (41, 65), (66, MAX_AGE_YEARS)];

pub const ALBUMIN: &str = "albumin";
pub const NITROFURANTOIN: &str = "J01XE01";
/// Leading procedure codes whose use rises with severity.
pub const INTENSIVE_PROCEDURES: usize = 5;

const STREAM_RANGES: u64 = 1;
const STREAM_ADMISSIONS: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_admissions: usize,
    pub seed: u64,
    pub n_lab_codes: usize,
    pub n_vital_codes: usize,
    pub n_med_codes: usize,
    pub n_proc_codes: usize,
    pub mean_events_per_admission: f64,
    pub severity_effect: f64,
    /// Probability that a lab event reuses the previous lab's timestamp.
    pub co_timestamp_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_admissions: 1000,
            seed: 42,
            n_lab_codes: 50,
            n_vital_codes: 7,
            n_med_codes: 100,
            n_proc_codes: 100,
            mean_events_per_admission: 30.0,
            severity_effect: 1.0,
            co_timestamp_fraction: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_admissions", self.n_admissions),
            ("n_lab_codes", self.n_lab_codes),
            ("n_vital_codes", self.n_vital_codes),
            ("n_med_codes", self.n_med_codes),
            ("n_proc_codes", self.n_proc_codes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be >= 1")));
            }
        }
        if !(self.mean_events_per_admission.is_finite() && self.mean_events_per_admission >= 0.0) {
            return Err(Error::validation("mean_events_per_admission must be >= 0"));
        }
        if !(self.severity_effect.is_finite() && self.severity_effect >= 0.0) {
            return Err(Error::validation("severity_effect must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.co_timestamp_fraction) {
            return Err(Error::validation("co_timestamp_fraction must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SynthConfig =
            toml::from_str(text).map_err(|e| Error::validation(format!("synth config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Code vocabularies of the generator.
#[derive(Debug, Clone)]
pub struct CodeBook {
    pub labs: Vec<String>,
    pub vitals: Vec<String>,
    pub meds: Vec<String>,
    pub procs: Vec<String>,
}

impl CodeBook {
    pub fn new(cfg: &SynthConfig) -> Self {
        let labs = (0..cfg.n_lab_codes)
            .map(|i| {
                if i == 0 {
                    ALBUMIN.to_string()
                } else {
                    format!("NPU{:05}", 1000 + i)
                }
            })
            .collect();
        let vitals = (0..cfg.n_vital_codes)
            .map(|i| match VITAL_CODES.get(i) {
                Some((name, _, _)) => name.to_string(),
                None => format!("vital_{i}"),
            })
            .collect();
        let meds = (0..cfg.n_med_codes)
            .map(|i| {
                if i == 0 {
                    NITROFURANTOIN.to_string()
                } else {
                    let group = PRESCRIPTION_GROUPS[i % N_PRESCRIPTION_GROUPS];
                    let k = i / N_PRESCRIPTION_GROUPS;
                    format!("{group}{:02}AA{:02}", k / 100 + 1, k % 100)
                }
            })
            .collect();
        let procs = (0..cfg.n_proc_codes)
            .map(|i| format!("P{:05}", i))
            .collect();
        Self {
            labs,
            vitals,
            meds,
            procs,
        }
    }

    pub fn measured(&self) -> impl Iterator<Item = &str> {
        self.labs.iter().chain(&self.vitals).map(String::as_str)
    }
}

fn sex_factor(sex: Sex) -> f64 {
    match sex {
        Sex::Male => 1.0,
        Sex::Female => 0.95,
        Sex::Unknown => 0.975,
    }
}

const AGE_FACTORS: [f64; 4] = [0.9, 1.0, 1.02, 0.97];
const PREGNANCY_FACTOR: f64 = 0.9;

/// Reference ranges for every lab and vital code in the configured vocabulary.
///
/// Lab ranges scale a per-code base interval by sex, age band and pregnancy,
/// with adult males (18–40) as the reference cell. Albumin's base interval is
/// 36–48 g/L. Vital ranges do not depend on demographics.
pub fn generate_range_table(cfg: &SynthConfig) -> Result<RangeTable> {
    cfg.validate()?;
    let book = CodeBook::new(cfg);
    let mut rng = derived_rng(cfg.seed, STREAM_RANGES, 0);
    let mut rows = Vec::new();
    for code in &book.labs {
        let (base_low, base_high) = if code == ALBUMIN {
            (36.0, 48.0)
        } else {
            let low = 10f64.powf(rng.gen_range(-1.0..3.0));
            let high = low * rng.gen_range(1.3..3.0);
            (round_sig(low), round_sig(high))
        };
        for (sex, pregnant) in DEMOGRAPHIC_CELLS {
            for (band, &(age_low, age_high)) in LAB_AGE_BANDS.iter().enumerate() {
                let mut f = sex_factor(sex) * AGE_FACTORS[band];
                if pregnant {
                    f *= PREGNANCY_FACTOR;
                }
                rows.push(RangeRow {
                    code: code.clone(),
                    sex,
                    age_low,
                    age_high,
                    pregnant,
                    low: base_low * f,
                    high: base_high * f,
                });
            }
        }
    }
    for (i, code) in book.vitals.iter().enumerate() {
        let (low, high) = VITAL_CODES
            .get(i)
            .map(|&(_, l, h)| (l, h))
            .unwrap_or((10.0, 20.0));
        for (sex, pregnant) in DEMOGRAPHIC_CELLS {
            rows.push(RangeRow {
                code: code.clone(),
                sex,
                age_low: 0,
                age_high: MAX_AGE_YEARS,
                pregnant,
                low,
                high,
            });
        }
    }
    let table = RangeTable::from_rows(rows)?;
    table.check_coverage(book.measured())?;
    Ok(table)
}

fn round_sig(x: f64) -> f64 {
    let mag = 10f64.powi(x.log10().floor() as i32 - 2);
    (x / mag).round() * mag
}

/// Output of [`generate_cohort`]. `severity[i]` is the latent severity of
/// `cohort.admissions[i]`, kept for oracle checks only.
#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub cohort: Cohort,
    pub ranges: RangeTable,
    pub severity: Vec<f64>,
}

/// Generates a cohort and its reference ranges. Each admission draws from its
/// own RNG stream derived from `(seed, index)`.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<SyntheticCohort> {
    cfg.validate()?;
    let ranges = generate_range_table(cfg)?;
    let gen = Generator::new(cfg);
    let mut admissions = Vec::with_capacity(cfg.n_admissions);
    let mut severity = Vec::with_capacity(cfg.n_admissions);
    for i in 0..cfg.n_admissions {
        let mut rng = derived_rng(cfg.seed, STREAM_ADMISSIONS, i as u64);
        let (adm, s) = gen.admission(i, &ranges, &mut rng)?;
        admissions.push(adm);
        severity.push(s);
    }
    Ok(SyntheticCohort {
        cohort: Cohort::new(cfg.seed, admissions),
        ranges,
        severity,
    })
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    book: CodeBook,
    lab_weights: WeightedIndex<f64>,
    med_weights: WeightedIndex<f64>,
    proc_weights: WeightedIndex<f64>,
    event_types: WeightedIndex<f64>,
}

fn zipf_weights(n: usize) -> WeightedIndex<f64> {
    WeightedIndex::new((0..n).map(|k| 1.0 / ((k + 1) as f64).powf(0.8))).expect("n >= 1")
}

/// Hours after arrival over which events are scattered.
const EVENT_SPAN_HOURS: f64 = 36.0;

impl<'a> Generator<'a> {
    fn new(cfg: &'a SynthConfig) -> Self {
        Self {
            cfg,
            book: CodeBook::new(cfg),
            lab_weights: zipf_weights(cfg.n_lab_codes),
            med_weights: zipf_weights(cfg.n_med_codes),
            proc_weights: zipf_weights(cfg.n_proc_codes),
            event_types: WeightedIndex::new([0.55, 0.25, 0.12, 0.08]).expect("positive"),
        }
    }

    fn admission(
        &self,
        index: usize,
        ranges: &RangeTable,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Admission, f64)> {
        let e = self.cfg.severity_effect;
        let s: f64 = rng.gen();
        let centred = s - 0.5;

        let demographics = self.demographics(rng);
        let history = self.history(centred * e, rng);

        let m = (0.12 * (3.0 * e * centred).exp()).min(0.95);
        let kappa = 8.0;
        let beta = Beta::new(m * kappa, (1.0 - m) * kappa)
            .map_err(|err| Error::validation(format!("LOS distribution: {err}")))?;
        let frac: f64 = beta.sample(rng);
        let los_days = 1.0 + 29.0 * frac.max(1e-6);

        let p_abnormal = (0.3 + 0.5 * e * centred).clamp(0.01, 0.99);
        let rate = self.cfg.mean_events_per_admission * (0.8 * e * centred).exp();
        let n_events = if rate > 0.0 {
            Poisson::new(rate).expect("positive rate").sample(rng) as usize
        } else {
            0
        };
        let p_intensive = (0.25 * e * s).min(1.0);

        let mut events = Vec::with_capacity(n_events);
        let mut last_lab_time: Option<f64> = None;
        for _ in 0..n_events {
            let fresh_time = (rng.gen_range(0.0..EVENT_SPAN_HOURS) * 60.0).round() / 60.0;
            let event = match self.event_types.sample(rng) {
                0 => {
                    let t = match last_lab_time {
                        Some(prev) if rng.gen::<f64>() < self.cfg.co_timestamp_fraction => prev,
                        _ => fresh_time,
                    };
                    last_lab_time = Some(t);
                    let code = &self.book.labs[self.lab_weights.sample(rng)];
                    let value = measurement_value(code, &demographics, ranges, p_abnormal, rng)?;
                    MedicalEvent::measurement(EventType::Lab, code, value, t)
                }
                1 => {
                    let code = &self.book.vitals[rng.gen_range(0..self.book.vitals.len())];
                    let value = measurement_value(code, &demographics, ranges, p_abnormal, rng)?;
                    MedicalEvent::measurement(EventType::Vital, code, value, fresh_time)
                }
                2 => {
                    let code = &self.book.meds[self.med_weights.sample(rng)];
                    MedicalEvent::coded(EventType::Medication, code, fresh_time)
                }
                _ => {
                    let n_int = INTENSIVE_PROCEDURES.min(self.book.procs.len());
                    let idx = if rng.gen::<f64>() < p_intensive {
                        rng.gen_range(0..n_int)
                    } else {
                        self.proc_weights.sample(rng)
                    };
                    MedicalEvent::coded(EventType::Procedure, &self.book.procs[idx], fresh_time)
                }
            };
            events.push(event);
        }
        // No events after discharge.
        let discharge_h = los_days * 24.0;
        events.retain(|ev| ev.timestamp_hours <= discharge_h);

        let mut adm = Admission {
            admission_id: format!("adm{index:06}"),
            demographics,
            history,
            events,
            los_days,
        };
        adm.sort_events();
        Ok((adm, s))
    }

    fn demographics(&self, rng: &mut ChaCha8Rng) -> Demographics {
        let age: f64 = Normal::new(62.0, 19.0).expect("valid").sample(rng);
        let age_years = age.round().clamp(0.0, 105.0) as u32;
        let u: f64 = rng.gen();
        let sex = if u < 0.49 {
            Sex::Female
        } else if u < 0.98 {
            Sex::Male
        } else {
            Sex::Unknown
        };
        let pregnant =
            sex == Sex::Female && (18..=45).contains(&age_years) && rng.gen::<f64>() < 0.05;
        Demographics {
            age_years,
            sex,
            pregnant,
        }
    }

    /// `shift` is `e · (s − 0.5)` in [-0.5e, 0.5e].
    fn history(&self, shift: f64, rng: &mut ChaCha8Rng) -> History {
        let p_cmb = (0.08 + 0.2 * shift).clamp(0.0, 1.0);
        let p_rx = (0.25 + 0.3 * shift).clamp(0.0, 1.0);
        let mut comorbidities = [false; N_COMORBIDITIES];
        for c in comorbidities.iter_mut() {
            *c = rng.gen::<f64>() < p_cmb;
        }
        let mut prescription_groups = [false; N_PRESCRIPTION_GROUPS];
        for c in prescription_groups.iter_mut() {
            *c = rng.gen::<f64>() < p_rx;
        }
        let p_ambulance = (0.3 + 0.4 * shift).clamp(0.0, 1.0);
        let arrival_mode = if rng.gen::<f64>() < p_ambulance {
            ArrivalMode::Ambulance
        } else {
            pick(&ArrivalMode::ALL[1..], rng)
        };
        let triage_level: f64 =
            2.0 + Normal::new(0.0, 0.8).expect("valid").sample(rng) - 2.0 * shift;
        let triage = Triage::ALL[triage_level.round().clamp(0.0, 4.0) as usize];
        let u: f64 = rng.gen();
        let admission_type = if u < 0.7 {
            AdmissionType::Acute
        } else if u < 0.9 {
            AdmissionType::Subacute
        } else {
            AdmissionType::Elective
        };
        History {
            comorbidities,
            prescription_groups,
            arrival_mode,
            hour_bucket: pick(HourBucket::ALL, rng),
            weekday: pick(Weekday::ALL, rng),
            season: pick(Season::ALL, rng),
            triage,
            admission_type,
        }
    }
}

fn pick<T: Copy>(items: &[T], rng: &mut ChaCha8Rng) -> T {
    items[rng.gen_range(0..items.len())]
}

fn measurement_value(
    code: &str,
    demo: &Demographics,
    ranges: &RangeTable,
    p_abnormal: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (low, high) = ranges
        .lookup(code, demo)
        .ok_or_else(|| Error::validation(format!("no reference range for {code}")))?;
    let width = high - low;
    let v = if rng.gen::<f64>() < p_abnormal {
        let excess = rng.gen_range(0.05..0.6) * width;
        if rng.gen::<f64>() < 0.6 {
            high + excess
        } else {
            low - excess
        }
    } else {
        rng.gen_range(low..=high)
    };
    // Three significant decimals, like a lab report.
    Ok((v * 1000.0).round() / 1000.0)
}
