use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Tie-corrected Kendall rank correlation (tau-b). Two constant lists
/// give 1; a single constant list gives 0.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(
            "kendall_tau",
            format!("lengths differ: {} vs {}", xs.len(), ys.len()),
        ));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("kendall_tau", "need at least two items"));
    }
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let dx = xs[i].partial_cmp(&xs[j]).expect("finite values");
            let dy = ys[i].partial_cmp(&ys[j]).expect("finite values");
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => {
                    tie_x += 1;
                    tie_y += 1;
                }
                (Equal, _) => tie_x += 1,
                (_, Equal) => tie_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let pairs = (xs.len() * (xs.len() - 1) / 2) as i64;
    let denom = (((pairs - tie_x) * (pairs - tie_y)) as f64).sqrt();
    if denom == 0.0 {
        return Ok(if tie_x == pairs && tie_y == pairs { 1.0 } else { 0.0 });
    }
    Ok((concordant - discordant) as f64 / denom)
}

/// `|a ∩ b| / |a ∪ b|`; two empty sets give 1.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// One-sided exact sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let ln2 = std::f64::consts::LN_2;
    let mut ln_choose = 0.0;
    let mut terms = Vec::with_capacity(n + 1);
    for k in 0..=n {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            terms.push(ln_choose - n as f64 * ln2);
        }
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()).exp().min(1.0)
}
