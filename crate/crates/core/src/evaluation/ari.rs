use std::collections::HashMap;

use crate::error::{MonetError, Result};

fn pairs(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between two clusterings of the same items.
///
/// When the expected and maximal index coincide (for example both
/// clusterings put everything in one cluster) the partitions carry no
/// information to disagree on and the result is 1.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MonetError::Argument(format!("label arrays differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(MonetError::Argument("ARI of empty label arrays".into()));
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| pairs(n as f64)).sum();
    let sum_a: f64 = rows.values().map(|&n| pairs(n as f64)).sum();
    let sum_b: f64 = cols.values().map(|&n| pairs(n as f64)).sum();
    let expected = sum_a * sum_b / pairs(a.len() as f64).max(f64::MIN_POSITIVE);
    let max = 0.5 * (sum_a + sum_b);
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// ARI over the pixels whose ground-truth label is not `background`;
/// `None` when there are no such pixels.
pub fn fg_ari(pred: &[usize], truth: &[usize], background: usize) -> Result<Option<f64>> {
    if pred.len() != truth.len() {
        return Err(MonetError::Argument(format!("label arrays differ in length: {} vs {}", pred.len(), truth.len())));
    }
    let (p, t): (Vec<usize>, Vec<usize>) =
        pred.iter().zip(truth).filter(|(_, &t)| t != background).map(|(&p, &t)| (p, t)).unzip();
    if p.is_empty() {
        return Ok(None);
    }
    ari(&p, &t).map(Some)
}
