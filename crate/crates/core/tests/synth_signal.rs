use mbert_core::event_model::{window_events, OBSERVATION_HOURS};
use mbert_core::metrics::auroc;
use mbert_core::synth::{generate_cohort, SynthConfig};
use mbert_core::tokenizer::{sequence_tokens, TokenizerWarnings};

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Abnormal-token count within the observation window vs. the binary label.
fn abnormal_count_correlation(severity_effect: f64) -> f64 {
    let cfg = SynthConfig {
        n_admissions: 10_000,
        seed: 42,
        severity_effect,
        ..SynthConfig::default()
    };
    let syn = generate_cohort(&cfg).unwrap();
    let mut warnings = TokenizerWarnings::default();
    let mut counts = Vec::new();
    let mut labels = Vec::new();
    for adm in &syn.cohort.admissions {
        let w = window_events(adm, OBSERVATION_HOURS).unwrap();
        let (tokens, _) = sequence_tokens(&w, &syn.ranges, &mut warnings);
        counts.push(
            tokens
                .iter()
                .filter(|t| t.ends_with(":L") || t.ends_with(":H"))
                .count() as f64,
        );
        labels.push(f64::from(adm.labels().unwrap().binary));
    }
    assert_eq!(warnings.unmatched_ranges, 0);
    pearson(&counts, &labels)
}

#[test]
fn no_effect_means_no_association() {
    let r = abnormal_count_correlation(0.0);
    assert!(r.abs() < 0.05, "r = {r}");
}

#[test]
fn planted_effect_is_visible_in_tokens() {
    let r = abnormal_count_correlation(1.0);
    assert!(r > 0.1, "r = {r}");
}

#[test]
fn latent_severity_oracle() {
    let syn = generate_cohort(&SynthConfig {
        n_admissions: 10_000,
        seed: 42,
        severity_effect: 1.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let y: Vec<u8> = syn
        .cohort
        .admissions
        .iter()
        .map(|a| a.labels().unwrap().binary)
        .collect();
    let a = auroc(&syn.severity, &y).unwrap();
    assert!(a > 0.85, "oracle AUROC {a}");
}
