//! Sequential Bayesian evidence fusion over frames.

use crate::error::{Error, Result};

fn check(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::invalid(format!("{what} has a negative or non-finite entry")));
    }
    Ok(())
}

fn normalize_log(logs: &[f64]) -> Option<Vec<f64>> {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return None;
    }
    let z: f64 = logs.iter().map(|l| (l - m).exp()).sum();
    let lz = m + z.ln();
    Some(logs.iter().map(|l| (l - lz).exp()).collect())
}

/// Posterior proportional to `prior * likelihood`, renormalized in log space.
///
/// The flag is true when the product is zero everywhere; the prior is then
/// returned unchanged.
pub fn bayes_update(prior: &[f64], likelihood: &[f64]) -> Result<(Vec<f64>, bool)> {
    if prior.len() != likelihood.len() || prior.is_empty() {
        return Err(Error::shape(format!(
            "prior has {} entries, likelihood {}",
            prior.len(),
            likelihood.len()
        )));
    }
    check(prior, "prior")?;
    check(likelihood, "likelihood")?;
    let logs: Vec<f64> = prior.iter().zip(likelihood).map(|(p, l)| p.ln() + l.ln()).collect();
    Ok(match normalize_log(&logs) {
        Some(post) => (post, false),
        None => (prior.to_vec(), true),
    })
}

/// Posterior after each frame of `[frames, classes]` per-frame outputs,
/// starting from a flat prior. Returns the posteriors (same layout) and the
/// number of degenerate updates.
pub fn bayes_over_frames(probs: &[f64], classes: usize) -> Result<(Vec<f64>, usize)> {
    if classes == 0 || probs.len() % classes != 0 {
        return Err(Error::shape(format!("{} values do not split into rows of {classes}", probs.len())));
    }
    check(probs, "frame output")?;
    let mut acc = vec![-(classes as f64).ln(); classes];
    let mut out = Vec::with_capacity(probs.len());
    let mut degenerate = 0;
    let mut post = vec![1.0 / classes as f64; classes];
    for row in probs.chunks_exact(classes) {
        let next: Vec<f64> = acc.iter().zip(row).map(|(a, l)| a + l.ln()).collect();
        match normalize_log(&next) {
            Some(p) => {
                acc = next;
                post = p;
            }
            None => degenerate += 1,
        }
        out.extend_from_slice(&post);
    }
    Ok((out, degenerate))
}
