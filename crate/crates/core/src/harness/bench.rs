//! Wall-clock decode benchmarking with cache accounting.

use serde::Serialize;

use crate::cache::PolicyKind;
use crate::harness::corpus::{make_corpus, CorpusStyle};
use crate::model::{generate_traced, ModelWeights};
use crate::numerics::Rng;
use crate::{Error, Result};

/// Timings for one (model, policy, prompt length, generation length)
/// configuration: median of the measured repeats, one warm-up run
/// excluded.
#[derive(Debug, Clone, Serialize)]
pub struct RuntimeReport {
    pub policy: String,
    pub prompt_tokens: usize,
    /// Tokens actually generated (greedy, planted anchors excluded).
    pub generated: usize,
    /// Length of the internal stream the decoder ran, anchors included.
    pub internal_len: usize,
    /// Largest retained KV set across all steps.
    pub peak_retained: usize,
    /// `peak_retained / (prompt + generated)`, anchors excluded from the
    /// denominator.
    pub budget_fraction: f64,
    pub prefill_seconds: f64,
    pub decode_seconds: f64,
    /// `generated / decode_seconds`, from the median decode time.
    pub throughput: f64,
    pub repeats: usize,
}

impl RuntimeReport {
    pub fn csv_header() -> &'static str {
        "policy,prompt_tokens,generated,internal_len,peak_retained,budget_fraction,\
         prefill_seconds,decode_seconds,throughput,repeats"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4},{:.6},{:.6},{:.2},{}",
            self.policy,
            self.prompt_tokens,
            self.generated,
            self.internal_len,
            self.peak_retained,
            self.budget_fraction,
            self.prefill_seconds,
            self.decode_seconds,
            self.throughput,
            self.repeats
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Times prefill and decode for `gen_len` greedy tokens from a synthetic
/// line-structured prompt of `prompt_len` tokens. Runs once to warm up,
/// then `repeats` measured times; reports medians. Token streams are
/// identical across runs, so only the clock varies.
pub fn bench_runtime(
    w: &ModelWeights,
    kind: PolicyKind,
    prompt_len: usize,
    gen_len: usize,
    repeats: usize,
    seed: u64,
) -> Result<RuntimeReport> {
    if prompt_len == 0 || gen_len == 0 {
        return Err(Error::Input("benchmark needs a prompt and at least one generated token".into()));
    }
    if repeats == 0 {
        return Err(Error::Input("benchmark needs at least one measured repeat".into()));
    }
    let mut rng = Rng::new(seed);
    let mut prompt: Vec<u32> = make_corpus(&mut rng, prompt_len, CorpusStyle::Lines)?
        .into_iter()
        .flatten()
        .collect();
    prompt.truncate(prompt_len);

    let mut prefills = Vec::with_capacity(repeats);
    let mut decodes = Vec::with_capacity(repeats);
    let mut last = None;
    for run in 0..=repeats {
        let trace = generate_traced(w, kind, &prompt, gen_len)?;
        if run > 0 {
            prefills.push(trace.prefill_seconds);
            decodes.push(trace.decode_seconds);
            last = Some(trace);
        }
    }
    let trace = last.expect("repeats >= 1");
    if trace.generated == 0 {
        return Err(Error::Input(
            "prompt already fills max_seq, nothing to decode".into(),
        ));
    }
    let decode_seconds = median(&mut decodes);
    let peak_retained = trace.retained_per_step.iter().copied().max().unwrap_or(0);
    Ok(RuntimeReport {
        policy: kind.to_string(),
        prompt_tokens: prompt_len,
        generated: trace.generated,
        internal_len: trace.internal.len(),
        peak_retained,
        budget_fraction: peak_retained as f64 / trace.output.len() as f64,
        prefill_seconds: median(&mut prefills),
        decode_seconds,
        throughput: trace.generated as f64 / decode_seconds,
        repeats,
    })
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
