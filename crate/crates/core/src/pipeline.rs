//! Cohort → windowed splits → vocabulary → model-ready sequences.

use crate::error::Result;
use crate::event_model::{split_cohort, window_events, Cohort, CohortSplit, OBSERVATION_HOURS};
use crate::synth::RangeTable;
use crate::tokenizer::{
    build_sequence, sequence_tokens, truncate, TokenizedSequence, TokenizerWarnings, Vocabulary,
};

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    /// Splits with events already restricted to the observation window.
    pub split: CohortSplit,
    pub vocab: Vocabulary,
    pub train: Vec<TokenizedSequence>,
    pub valid: Vec<TokenizedSequence>,
    pub test: Vec<TokenizedSequence>,
    pub warnings: TokenizerWarnings,
}

fn windowed(c: &Cohort) -> Result<Cohort> {
    let admissions = c
        .admissions
        .iter()
        .map(|a| window_events(a, OBSERVATION_HOURS))
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        admissions,
        ..c.clone()
    })
}

/// Splits 80/10/10, keeps the first 24 h of events, builds the vocabulary
/// from the training split only, and tokenizes every split.
pub fn prepare(
    cohort: &Cohort,
    ranges: &RangeTable,
    seed: u64,
    max_len: usize,
) -> Result<PreparedData> {
    cohort.validate()?;
    let raw = split_cohort(cohort, seed)?;
    let split = CohortSplit {
        train: windowed(&raw.train)?,
        valid: windowed(&raw.valid)?,
        test: windowed(&raw.test)?,
    };
    let mut warnings = TokenizerWarnings::default();
    let train_tokens: Vec<Vec<String>> = split
        .train
        .admissions
        .iter()
        .map(|a| sequence_tokens(a, ranges, &mut warnings).0)
        .collect();
    let vocab = Vocabulary::build(&train_tokens)?;
    let mut warnings = TokenizerWarnings::default();
    let mut encode = |c: &Cohort| -> Result<Vec<TokenizedSequence>> {
        c.admissions
            .iter()
            .map(|a| {
                build_sequence(a, &vocab, ranges, &mut warnings).map(|s| truncate(&s, max_len))
            })
            .collect()
    };
    let train = encode(&split.train)?;
    let valid = encode(&split.valid)?;
    let test = encode(&split.test)?;
    if warnings.unmatched_ranges > 0 {
        log::warn!(
            "{} measurements had no matching reference range and were left unbinned",
            warnings.unmatched_ranges
        );
    }
    Ok(PreparedData {
        split,
        vocab,
        train,
        valid,
        test,
        warnings,
    })
}
