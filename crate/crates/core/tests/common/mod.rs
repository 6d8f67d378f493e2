//! Independent reference implementations used only by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

/// Progressive mask by set arithmetic instead of simulating the row buffer.
///
/// With 1-based starts `S` and horizon `h`, pass `t` (1-based) writes the
/// positions `{min(s + t - 1, h) : s in S}` and each of them gets the row
/// `{min(s + k - 1, h) : s in S, 1 <= k <= t}`. The last pass to write a
/// row decides its final content. Returns the final matrix and one matrix
/// per pass, all row-major.
pub fn mask_oracle(h: usize, starts_one_based: &[usize]) -> (Vec<bool>, Vec<Vec<bool>>) {
    let starts: BTreeSet<usize> = starts_one_based.iter().copied().collect();
    let mut bounds: Vec<usize> = starts.iter().copied().collect();
    bounds.push(h + 1);
    let n_step = bounds.windows(2).map(|w| w[1] - w[0]).max().unwrap();

    let reach = |t: usize| -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for &s in &starts {
            for k in 1..=t {
                out.insert((s + k - 1).min(h));
            }
        }
        out
    };
    let writes = |t: usize| -> BTreeSet<usize> { starts.iter().map(|&s| (s + t - 1).min(h)).collect() };

    let mut snapshots = Vec::new();
    for upto in 1..=n_step {
        let mut m = vec![false; h * h];
        for row in 1..=h {
            let last = (1..=upto).rev().find(|&t| writes(t).contains(&row));
            if let Some(t) = last {
                for col in reach(t) {
                    m[(row - 1) * h + (col - 1)] = true;
                }
            }
        }
        snapshots.push(m);
    }
    (snapshots.last().unwrap().clone(), snapshots)
}

/// Every start set containing position 1 for a horizon of `h`.
pub fn all_start_sets(h: usize) -> Vec<Vec<usize>> {
    (0u32..(1 << (h - 1)))
        .map(|bits| {
            let mut s = vec![1];
            s.extend((0..h - 1).filter(|b| bits & (1 << b) != 0).map(|b| b + 2));
            s
        })
        .collect()
}

/// Normalized pinball loss, written as plain loops.
pub fn naive_quantile_loss(y: &[f64], yhat: &[f64], rho: f64) -> f64 {
    let mut num = 0.0;
    for i in 0..y.len() {
        let mut p = 0.0;
        if y[i] > yhat[i] {
            p += rho * (y[i] - yhat[i]);
        } else {
            p += (1.0 - rho) * (yhat[i] - y[i]);
        }
        num += p;
    }
    let mut den = 0.0;
    for v in y {
        den += v.abs();
    }
    2.0 * num / den
}
