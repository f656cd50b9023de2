use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 1000;
const ORDERS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionRateReport {
    /// Percentage: 100 × geometric mean of the per-order ratios.
    pub rate: f64,
    /// Window-averaged share of n-gram types seen more than once, n = 1..4.
    pub ratios: [f64; ORDERS],
    pub window: usize,
    pub windows: usize,
}

/// Share of n-gram types in `tokens` that occur more than once; 0 when there are none.
fn non_singleton_ratio<T: Eq + Hash>(tokens: &[T], n: usize) -> f64 {
    if tokens.len() < n {
        return 0.0;
    }
    let mut counts: HashMap<&[T], usize> = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    let repeated = counts.values().filter(|&&c| c > 1).count();
    repeated as f64 / counts.len() as f64
}

/// Repetition rate over consecutive non-overlapping windows of `window` tokens.
///
/// Text no longer than one window is a single window; otherwise a trailing
/// partial window is dropped.
pub fn repetition_rate<T: Eq + Hash>(text: &[T], window: usize) -> Result<RepetitionRateReport> {
    if text.is_empty() {
        return Err(Error::Data("repetition rate of empty text".into()));
    }
    if window == 0 {
        return Err(Error::Config("window must be positive".into()));
    }
    let chunks: Vec<&[T]> = if text.len() <= window {
        vec![text]
    } else {
        text.chunks_exact(window).collect()
    };
    let mut ratios = [0.0; ORDERS];
    for chunk in &chunks {
        for (n, r) in ratios.iter_mut().enumerate() {
            *r += non_singleton_ratio(chunk, n + 1);
        }
    }
    for r in ratios.iter_mut() {
        *r /= chunks.len() as f64;
    }
    let rate = 100.0 * ratios.iter().product::<f64>().powf(1.0 / ORDERS as f64);
    Ok(RepetitionRateReport {
        rate,
        ratios,
        window,
        windows: chunks.len(),
    })
}
