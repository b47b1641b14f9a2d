//! Admission → model-ready token sequence.
//!
//! Layout: `[CLS]`, 38 history tokens, then one token per event. Lab and vital
//! tokens carry a `:L`, `:N` or `:H` suffix from the patient's reference range.
//! Position ids are 0 for `[CLS]`, 1..=38 for history, and start at 39 for
//! events, advancing only when the timestamp strictly increases.

mod vocab;

pub use vocab::{Vocabulary, CLS, CLS_ID, MASK, MASK_ID, PAD, PAD_ID, RESERVED, UNK, UNK_ID};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_model::Sex;
use crate::event_model::{
    Admission, Demographics, History, Labels, MedicalEvent, COMORBIDITY_NAMES, N_COMORBIDITIES,
    PRESCRIPTION_GROUPS,
};
use crate::metrics::StratumKey;
use crate::synth::RangeTable;

pub const HISTORY_TOKENS: usize = 38;
/// `[CLS]` plus the history block.
pub const PREFIX_LEN: usize = 1 + HISTORY_TOKENS;
pub const MAX_SEQ_LEN: usize = 256;
pub const FIRST_EVENT_POSITION: u32 = PREFIX_LEN as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MeasurementBin {
    Low,
    Normal,
    High,
}

impl MeasurementBin {
    /// Closed normal interval: boundary values are normal.
    pub fn classify(value: f64, low: f64, high: f64) -> Self {
        if value < low {
            MeasurementBin::Low
        } else if value > high {
            MeasurementBin::High
        } else {
            MeasurementBin::Normal
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            MeasurementBin::Low => "L",
            MeasurementBin::Normal => "N",
            MeasurementBin::High => "H",
        }
    }
}

/// Counters for conditions that degrade tokens without failing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TokenizerWarnings {
    /// Measurements with no reference range for the patient's demographics.
    pub unmatched_ranges: usize,
}

/// `<code>:L|N|H`, or the bare code when no range row matches.
pub fn bin_measurement(
    code: &str,
    value: f64,
    demo: &Demographics,
    ranges: &RangeTable,
    warnings: &mut TokenizerWarnings,
) -> String {
    match ranges.lookup(code, demo) {
        Some((low, high)) => {
            format!(
                "{code}:{}",
                MeasurementBin::classify(value, low, high).suffix()
            )
        }
        None => {
            warnings.unmatched_ranges += 1;
            code.to_string()
        }
    }
}

/// The 38-token history prefix using the default comorbidity slot names.
pub fn build_history_tokens(h: &History) -> Vec<String> {
    build_history_tokens_with(h, &COMORBIDITY_NAMES)
}

pub fn build_history_tokens_with(
    h: &History,
    comorbidity_names: &[&str; N_COMORBIDITIES],
) -> Vec<String> {
    let mut out = Vec::with_capacity(HISTORY_TOKENS);
    for (name, &on) in comorbidity_names.iter().zip(&h.comorbidities) {
        out.push(format!("cmb:{name}:{}", u8::from(on)));
    }
    for (group, &on) in PRESCRIPTION_GROUPS.iter().zip(&h.prescription_groups) {
        out.push(format!("rx:{group}:{}", u8::from(on)));
    }
    out.push(format!("mode:{}", h.arrival_mode.token()));
    out.push(format!("hour:{}", h.hour_bucket.token()));
    out.push(format!("weekday:{}", h.weekday.token()));
    out.push(format!("season:{}", h.season.token()));
    out.push(format!("triage:{}", h.triage.token()));
    out.push(format!("admission:{}", h.admission_type.token()));
    debug_assert_eq!(out.len(), HISTORY_TOKENS);
    out
}

/// Position ids for the whole sequence given timestamp-sorted events.
pub fn assign_positions(events: &[MedicalEvent]) -> Vec<u32> {
    let mut pos: Vec<u32> = (0..PREFIX_LEN as u32).collect();
    let mut prev: Option<f64> = None;
    let mut current = FIRST_EVENT_POSITION;
    for e in events {
        if let Some(t) = prev {
            if e.timestamp_hours > t {
                current += 1;
            }
        }
        prev = Some(e.timestamp_hours);
        pos.push(current);
    }
    pos
}

pub fn event_token(
    e: &MedicalEvent,
    demo: &Demographics,
    ranges: &RangeTable,
    warnings: &mut TokenizerWarnings,
) -> String {
    match e.value {
        Some(v) if e.event_type.has_value() => bin_measurement(&e.code, v, demo, ranges, warnings),
        _ => e.code.clone(),
    }
}

/// Token strings and position ids for an (already windowed) admission.
pub fn sequence_tokens(
    adm: &Admission,
    ranges: &RangeTable,
    warnings: &mut TokenizerWarnings,
) -> (Vec<String>, Vec<u32>) {
    let mut tokens = Vec::with_capacity(PREFIX_LEN + adm.events.len());
    tokens.push(CLS.to_string());
    tokens.extend(build_history_tokens(&adm.history));
    for e in &adm.events {
        tokens.push(event_token(e, &adm.demographics, ranges, warnings));
    }
    (tokens, assign_positions(&adm.events))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedSequence {
    pub admission_id: String,
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub age_bucket: u8,
    pub sex_id: u8,
    pub label_binary: u8,
    pub label_category: u8,
    pub label_real: f64,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn labels(&self) -> Labels {
        Labels {
            binary: self.label_binary,
            category: self.label_category,
            real: self.label_real,
        }
    }

    pub fn stratum_key(&self) -> StratumKey {
        StratumKey {
            age_bucket: usize::from(self.age_bucket),
            sex: Sex::ALL[usize::from(self.sex_id).min(2)],
        }
    }

    /// Checks the structural invariants of a model-ready sequence.
    pub fn validate(&self, max_len: usize) -> Result<()> {
        let fail = |m: String| {
            Err(Error::validation(format!(
                "sequence {}: {m}",
                self.admission_id
            )))
        };
        if self.token_ids.len() != self.position_ids.len() {
            return fail("token and position id counts differ".into());
        }
        if self.token_ids.len() > max_len {
            return fail(format!("length {} exceeds {max_len}", self.token_ids.len()));
        }
        if self.token_ids.len() < PREFIX_LEN {
            return fail("missing [CLS] + history prefix".into());
        }
        if self.token_ids[0] != CLS_ID {
            return fail("first token is not [CLS]".into());
        }
        if self.position_ids[..PREFIX_LEN] != (0..PREFIX_LEN as u32).collect::<Vec<_>>()[..] {
            return fail("prefix positions must be 0..=38".into());
        }
        if self.position_ids.windows(2).any(|w| w[1] < w[0]) {
            return fail("position ids decrease".into());
        }
        if self.age_bucket > 11 || self.sex_id > 2 {
            return fail("demographic ids out of range".into());
        }
        Ok(())
    }
}

/// Tokenizes an already windowed admission, mapping unseen tokens to `[UNK]`.
pub fn build_sequence(
    adm: &Admission,
    vocab: &Vocabulary,
    ranges: &RangeTable,
    warnings: &mut TokenizerWarnings,
) -> Result<TokenizedSequence> {
    let (tokens, position_ids) = sequence_tokens(adm, ranges, warnings);
    let labels = adm.labels()?;
    Ok(TokenizedSequence {
        admission_id: adm.admission_id.clone(),
        token_ids: tokens.iter().map(|t| vocab.encode(t)).collect(),
        position_ids,
        age_bucket: adm.demographics.age_bucket() as u8,
        sex_id: adm.demographics.sex.id() as u8,
        label_binary: labels.binary,
        label_category: labels.category,
        label_real: labels.real,
    })
}

/// Keeps `[CLS]`, the history block and the most recent events. Position ids
/// are kept as they were.
pub fn truncate(seq: &TokenizedSequence, max_len: usize) -> TokenizedSequence {
    if seq.len() <= max_len || max_len < PREFIX_LEN {
        return seq.clone();
    }
    let keep_events = max_len - PREFIX_LEN;
    let tail_start = seq.len() - keep_events;
    let pick = |v: &[u32]| -> Vec<u32> {
        v[..PREFIX_LEN]
            .iter()
            .chain(&v[tail_start..])
            .copied()
            .collect()
    };
    TokenizedSequence {
        token_ids: pick(&seq.token_ids),
        position_ids: pick(&seq.position_ids),
        ..seq.clone()
    }
}

pub fn save_sequences(seqs: &[TokenizedSequence], path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in seqs {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_sequences(path: &Path) -> Result<Vec<TokenizedSequence>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: TokenizedSequence = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(seq);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_model::{EventType, Sex};
    use crate::synth::{generate_range_table, SynthConfig};

    fn ranges() -> RangeTable {
        generate_range_table(&SynthConfig::default()).unwrap()
    }

    fn male31() -> Demographics {
        Demographics::new(31, Sex::Male, false).unwrap()
    }

    #[test]
    fn albumin_high() {
        let mut w = TokenizerWarnings::default();
        assert_eq!(
            bin_measurement("albumin", 56.0, &male31(), &ranges(), &mut w),
            "albumin:H"
        );
        assert_eq!(
            bin_measurement("albumin", 40.0, &male31(), &ranges(), &mut w),
            "albumin:N"
        );
        assert_eq!(
            bin_measurement("albumin", 30.0, &male31(), &ranges(), &mut w),
            "albumin:L"
        );
        assert_eq!(w.unmatched_ranges, 0);
    }

    #[test]
    fn fever_is_high() {
        let mut w = TokenizerWarnings::default();
        let demo = Demographics::new(70, Sex::Female, false).unwrap();
        assert_eq!(
            bin_measurement("temperature", 40.1, &demo, &ranges(), &mut w),
            "temperature:H"
        );
    }

    #[test]
    fn boundaries_are_normal() {
        assert_eq!(
            MeasurementBin::classify(36.0, 36.0, 48.0),
            MeasurementBin::Normal
        );
        assert_eq!(
            MeasurementBin::classify(48.0, 36.0, 48.0),
            MeasurementBin::Normal
        );
    }

    #[test]
    fn missing_range_gives_bare_code() {
        let mut w = TokenizerWarnings::default();
        assert_eq!(
            bin_measurement("mystery", 1.0, &male31(), &ranges(), &mut w),
            "mystery"
        );
        assert_eq!(w.unmatched_ranges, 1);
    }

    #[test]
    fn history_block() {
        let h = History::default();
        let toks = build_history_tokens(&h);
        assert_eq!(toks.len(), 38);
        assert_eq!(toks.iter().filter(|t| t.ends_with(":0")).count(), 32);
        assert_eq!(toks[32], "mode:walk_in");
        let mut h = History::default();
        h.comorbidities[9] = true;
        assert!(build_history_tokens(&h).contains(&"cmb:diabetes:1".to_string()));
    }

    fn ev(t: f64) -> MedicalEvent {
        MedicalEvent::measurement(EventType::Lab, "albumin", 40.0, t)
    }

    #[test]
    fn positions_share_on_equal_timestamps() {
        let p = assign_positions(&[ev(10.0), ev(10.0), ev(11.5)]);
        assert_eq!(&p[PREFIX_LEN..], &[39, 39, 40]);
        let p = assign_positions(&[ev(1.0), ev(2.0), ev(3.0)]);
        assert_eq!(&p[PREFIX_LEN..], &[39, 40, 41]);
        let p = assign_positions(&[]);
        assert_eq!(p, (0..39).collect::<Vec<u32>>());
    }

    fn seq_of_len(n: usize) -> TokenizedSequence {
        TokenizedSequence {
            admission_id: "x".into(),
            token_ids: (0..n as u32)
                .map(|i| if i == 0 { CLS_ID } else { 4 + i })
                .collect(),
            position_ids: (0..n as u32).collect(),
            age_bucket: 3,
            sex_id: 1,
            label_binary: 1,
            label_category: 1,
            label_real: 3.0,
        }
    }

    #[test]
    fn truncation() {
        let long = seq_of_len(300);
        let t = truncate(&long, MAX_SEQ_LEN);
        assert_eq!(t.len(), 256);
        assert_eq!(t.token_ids[..39], long.token_ids[..39]);
        assert_eq!(t.token_ids[39..], long.token_ids[300 - 217..]);
        assert_eq!(t.position_ids[39], (300 - 217) as u32);
        assert_eq!(truncate(&seq_of_len(256), MAX_SEQ_LEN), seq_of_len(256));
        assert_eq!(truncate(&seq_of_len(40), MAX_SEQ_LEN), seq_of_len(40));
    }

    #[test]
    fn sequence_from_admission() {
        let mut adm = Admission {
            admission_id: "a1".into(),
            demographics: male31(),
            history: History::default(),
            events: vec![ev(1.0), ev(2.0)],
            los_days: 4.0,
        };
        let (tokens, _) = sequence_tokens(&adm, &ranges(), &mut TokenizerWarnings::default());
        let vocab = Vocabulary::build([tokens.as_slice()]).unwrap();
        let mut w = TokenizerWarnings::default();
        let s = build_sequence(&adm, &vocab, &ranges(), &mut w).unwrap();
        assert_eq!(s.len(), 41);
        s.validate(MAX_SEQ_LEN).unwrap();
        assert_eq!(
            (s.label_binary, s.label_category, s.label_real),
            (1, 1, 4.0)
        );
        assert_eq!((s.age_bucket, s.sex_id), (3, 1));

        adm.events
            .push(MedicalEvent::coded(EventType::Procedure, "never_seen", 3.0));
        let s = build_sequence(&adm, &vocab, &ranges(), &mut w).unwrap();
        assert_eq!(*s.token_ids.last().unwrap(), UNK_ID);
    }

    #[test]
    fn sequence_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seqs.jsonl");
        let seqs = vec![seq_of_len(45), seq_of_len(39)];
        save_sequences(&seqs, &p).unwrap();
        assert_eq!(load_sequences(&p).unwrap(), seqs);
    }
}
