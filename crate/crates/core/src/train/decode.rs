use crate::ecdf::{Vocab, DECILES};
use crate::error::{Error, Result};

/// Probabilities of `code`'s ten decile tokens, read from a head row whose
/// class `c` is token `c + 1`.
fn decile_mass(row: &[f64], code: &str, vocab: &Vocab) -> Result<[f64; DECILES]> {
    let tokens = vocab.decile_tokens(code)?;
    let mut mass = [0.0; DECILES];
    for (m, &t) in mass.iter_mut().zip(&tokens) {
        *m = *row.get(t as usize - 1).ok_or_else(|| {
            Error::dim(format!("probability row of {} classes lacks token {t}", row.len()))
        })?;
    }
    let total: f64 = mass.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Decode(format!("no probability mass on the deciles of {code}")));
    }
    Ok(mass)
}

/// Probability-weighted mean of the decile lower bounds `d / 10` after
/// renormalising over `code`'s deciles.
pub fn weighted_quantile_decode(row: &[f64], code: &str, vocab: &Vocab) -> Result<f64> {
    let mass = decile_mass(row, code, vocab)?;
    let total: f64 = mass.iter().sum();
    Ok(mass
        .iter()
        .enumerate()
        .map(|(d, w)| w / total * d as f64 / DECILES as f64)
        .sum())
}

/// Lower bound of the most probable decile of `code`; ties go to the lower
/// decile.
pub fn argmax_decode(row: &[f64], code: &str, vocab: &Vocab) -> Result<f64> {
    let mass = decile_mass(row, code, vocab)?;
    let mut best = 0;
    for (d, &w) in mass.iter().enumerate() {
        if w > mass[best] {
            best = d;
        }
    }
    Ok(best as f64 / DECILES as f64)
}
