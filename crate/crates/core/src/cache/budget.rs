//! KV-cache budget accounting.
//!
//! The denominator for budget percentages is the raw token count of the
//! text being processed, i.e. what a dense cache would hold for the same
//! content. Mechanically planted anchor tokens are bookkeeping, not text,
//! so they inflate the retained counts but never the denominator; budgets
//! are honest relative to the dense baseline.

use serde::Serialize;

use crate::{Error, Result};

/// Shape parameters needed to price a retained position in bytes.
#[derive(Debug, Clone, Copy)]
pub struct CacheGeometry {
    pub n_layers: usize,
    pub d_model: usize,
    pub bytes_per_float: usize,
    pub batch: usize,
}

/// Peak/typical retention summary for one processed sequence.
#[derive(Debug, Clone, Serialize)]
pub struct BudgetReport {
    pub total_tokens: usize,
    pub retained_per_step: Vec<usize>,
    pub peak_retained: usize,
    pub budget_percent: f64,
    pub bytes: u64,
    pub bytes_per_token: f64,
}

/// Bytes needed to hold keys and values for `seq` positions:
/// `2 * n_layers * seq * d_model * bytes_per_float * batch`.
pub fn estimate_cache_bytes(
    n_layers: usize,
    seq: usize,
    d_model: usize,
    bytes_per_float: usize,
    batch: usize,
) -> Result<u64> {
    let dims = [n_layers, seq, d_model, bytes_per_float, batch];
    if dims.contains(&0) {
        return Err(Error::Input("cache byte estimate needs positive dimensions".into()));
    }
    let mut bytes: u64 = 2;
    for d in dims {
        bytes = bytes
            .checked_mul(d as u64)
            .ok_or_else(|| Error::Input("cache byte estimate overflows u64".into()))?;
    }
    Ok(bytes)
}

/// Cache gigabytes amortized over the generated length.
pub fn ratio_gb_per_token(cache_gb: f64, generated_tokens: f64) -> Result<f64> {
    if !(generated_tokens > 0.0) {
        return Err(Error::Input(format!(
            "gb-per-token ratio over non-positive length {generated_tokens}"
        )));
    }
    if !(cache_gb >= 0.0) {
        return Err(Error::Input(format!("negative cache size {cache_gb}")));
    }
    Ok(cache_gb / generated_tokens)
}

/// Summarizes a retained-count series against the raw token total.
pub fn budget_of(
    retained_per_step: &[usize],
    total_tokens: usize,
    geometry: &CacheGeometry,
) -> Result<BudgetReport> {
    if retained_per_step.is_empty() {
        return Err(Error::Input("budget of an empty retention trace".into()));
    }
    if total_tokens == 0 {
        return Err(Error::Input("budget against zero total tokens".into()));
    }
    let peak_retained = *retained_per_step.iter().max().expect("non-empty");
    let bytes = estimate_cache_bytes(
        geometry.n_layers,
        peak_retained.max(1),
        geometry.d_model,
        geometry.bytes_per_float,
        geometry.batch,
    )?;
    Ok(BudgetReport {
        total_tokens,
        retained_per_step: retained_per_step.to_vec(),
        peak_retained,
        budget_percent: peak_retained as f64 / total_tokens as f64 * 100.0,
        bytes,
        bytes_per_token: bytes as f64 / total_tokens as f64,
    })
}

impl BudgetReport {
    /// Per-step CSV: `step,retained,budget_percent`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,retained,budget_percent\n");
        for (step, &r) in self.retained_per_step.iter().enumerate() {
            let pct = r as f64 / self.total_tokens as f64 * 100.0;
            out.push_str(&format!("{step},{r},{pct:.4}\n"));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
