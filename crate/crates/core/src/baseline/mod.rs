//! Tabular comparison pipeline: latest-value features, train-only mean
//! imputation and min-max scaling, chi² top-k selection, and two learners.

mod learners;
mod preprocess;

pub use learners::{LearnerConfig, LearnerKind, TabularModel};
pub use preprocess::{chi2_scores, chi2_select, TabularPipeline, CHI2_TOP_K};

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::event_model::{
    Admission, AdmissionType, ArrivalMode, Cohort, HourBucket, Labels, Season, Sex, Triage,
    Weekday, COMORBIDITY_NAMES, PRESCRIPTION_GROUPS,
};
use crate::metrics::StratumKey;
use crate::numerics::Matrix;

/// Feature rows with NaN marking a missing measurement (before the pipeline).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub admission_ids: Vec<String>,
    pub x: Matrix,
    pub names: Vec<String>,
    pub labels: Vec<Labels>,
    pub strata: Vec<StratumKey>,
}

impl TabularDataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn binary_labels(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.binary).collect()
    }

    pub fn category_labels(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.category).collect()
    }

    pub fn real_labels(&self) -> Vec<f64> {
        self.labels.iter().map(|l| l.real).collect()
    }

    /// Same rows with `x` replaced, e.g. by a fitted pipeline's output.
    pub fn with_features(&self, x: Matrix, names: Vec<String>) -> Self {
        Self {
            x,
            names,
            ..self.clone()
        }
    }

    /// Header `admission_id,<features>,label_binary,label_category,label_real`;
    /// missing values are written as empty fields.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["admission_id".to_string()];
        header.extend(self.names.iter().cloned());
        header.extend(["label_binary", "label_category", "label_real"].map(String::from));
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.admission_ids[i].clone()];
            rec.extend(self.x.row(i).iter().map(|v| {
                if v.is_nan() {
                    String::new()
                } else {
                    v.to_string()
                }
            }));
            let l = &self.labels[i];
            rec.extend([
                l.binary.to_string(),
                l.category.to_string(),
                l.real.to_string(),
            ]);
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("<feature csv>", e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Column layout fixed from the training split: measured codes (latest
/// value), coded events (any occurrence), history indicators, age, sex.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    measured: Vec<String>,
    coded: Vec<String>,
    names: Vec<String>,
    measured_index: HashMap<String, usize>,
    coded_index: HashMap<String, usize>,
}

fn one_hot_names(prefix: &str, tokens: impl IntoIterator<Item = &'static str>) -> Vec<String> {
    tokens
        .into_iter()
        .map(|t| format!("{prefix}:{t}"))
        .collect()
}

impl FeatureSchema {
    pub fn fit(train: &Cohort) -> Self {
        let mut measured = BTreeSet::new();
        let mut coded = BTreeSet::new();
        for a in &train.admissions {
            for e in &a.events {
                if e.event_type.has_value() {
                    measured.insert(e.code.clone());
                } else {
                    coded.insert(e.code.clone());
                }
            }
        }
        Self::from_codes(measured.into_iter().collect(), coded.into_iter().collect())
    }

    pub fn from_codes(measured: Vec<String>, coded: Vec<String>) -> Self {
        let mut names: Vec<String> = measured.iter().map(|c| format!("latest:{c}")).collect();
        names.extend(coded.iter().map(|c| format!("any:{c}")));
        names.extend(COMORBIDITY_NAMES.iter().map(|c| format!("cmb:{c}")));
        names.extend(PRESCRIPTION_GROUPS.iter().map(|g| format!("rx:{g}")));
        names.extend(one_hot_names(
            "mode",
            ArrivalMode::ALL.iter().map(|v| v.token()),
        ));
        names.extend(one_hot_names(
            "hour",
            HourBucket::ALL.iter().map(|v| v.token()),
        ));
        names.extend(one_hot_names(
            "weekday",
            Weekday::ALL.iter().map(|v| v.token()),
        ));
        names.extend(one_hot_names(
            "season",
            Season::ALL.iter().map(|v| v.token()),
        ));
        names.extend(one_hot_names(
            "triage",
            Triage::ALL.iter().map(|v| v.token()),
        ));
        names.extend(one_hot_names(
            "admission",
            AdmissionType::ALL.iter().map(|v| v.token()),
        ));
        names.push("age_years".into());
        names.extend(one_hot_names("sex", Sex::ALL.iter().map(|v| v.as_str())));
        let index = |v: &[String]| v.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Self {
            measured_index: index(&measured),
            coded_index: index(&coded),
            measured,
            coded,
            names,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    /// One feature row for an admission already windowed to the observation period.
    pub fn featurize(&self, adm: &Admission) -> Vec<f64> {
        let mut row = vec![0.0; self.width()];
        let n_meas = self.measured.len();
        row[..n_meas].fill(f64::NAN);
        let mut latest: Vec<f64> = vec![f64::NEG_INFINITY; n_meas];
        for e in &adm.events {
            match e.value {
                Some(v) if e.event_type.has_value() => {
                    if let Some(&j) = self.measured_index.get(&e.code) {
                        if e.timestamp_hours >= latest[j] {
                            latest[j] = e.timestamp_hours;
                            row[j] = v;
                        }
                    }
                }
                _ => {
                    if let Some(&j) = self.coded_index.get(&e.code) {
                        row[n_meas + j] = 1.0;
                    }
                }
            }
        }
        let mut k = n_meas + self.coded.len();
        let h = &adm.history;
        for &b in h.comorbidities.iter().chain(&h.prescription_groups) {
            row[k] = f64::from(u8::from(b));
            k += 1;
        }
        for (ordinal, width) in [
            (h.arrival_mode.ordinal(), ArrivalMode::ALL.len()),
            (h.hour_bucket.ordinal(), HourBucket::ALL.len()),
            (h.weekday.ordinal(), Weekday::ALL.len()),
            (h.season.ordinal(), Season::ALL.len()),
            (h.triage.ordinal(), Triage::ALL.len()),
            (h.admission_type.ordinal(), AdmissionType::ALL.len()),
        ] {
            row[k + ordinal] = 1.0;
            k += width;
        }
        row[k] = f64::from(adm.demographics.age_years);
        row[k + 1 + adm.demographics.sex.id()] = 1.0;
        row
    }

    pub fn dataset(&self, cohort: &Cohort) -> Result<TabularDataset> {
        let mut data = Vec::with_capacity(cohort.len() * self.width());
        let mut labels = Vec::with_capacity(cohort.len());
        for a in &cohort.admissions {
            data.extend(self.featurize(a));
            labels.push(a.labels()?);
        }
        Ok(TabularDataset {
            admission_ids: cohort
                .admissions
                .iter()
                .map(|a| a.admission_id.clone())
                .collect(),
            x: Matrix::from_vec(cohort.len(), self.width(), data)?,
            names: self.names.clone(),
            labels,
            strata: cohort
                .admissions
                .iter()
                .map(|a| StratumKey::from(&a.demographics))
                .collect(),
        })
    }
}

/// `name<TAB>chi²` per selected feature, in selection order.
pub fn write_selected_features<W: Write>(
    names: &[String],
    scores: &[f64],
    selected: &[usize],
    mut w: W,
) -> Result<()> {
    let io = |e| Error::io("<selected features>", e);
    writeln!(w, "feature\tchi2").map_err(io)?;
    for &j in selected {
        writeln!(w, "{}\t{}", names[j], scores[j]).map_err(io)?;
    }
    w.flush().map_err(io)
}
