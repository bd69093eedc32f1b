use crate::error::{Error, Result};
use crate::numerics::ExactSum;

/// `exp(mean cross-entropy)`.
pub fn perplexity(mean_ce: f64) -> f64 {
    mean_ce.exp()
}

/// Sample Pearson correlation coefficient.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need two equal-length series of at least 2 points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mean = |v: &[f64]| {
        let mut s = ExactSum::new();
        v.iter().for_each(|&x| s.add(x));
        s.value() / n
    };
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (ExactSum::new(), ExactSum::new(), ExactSum::new());
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy.add(dx * dy);
        sxx.add(dx * dx);
        syy.add(dy * dy);
    }
    let (sxx, syy) = (sxx.value(), syy.value());
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("a series has zero variance".into()));
    }
    Ok((sxy.value() / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Mean squared difference.
pub fn mse(xs: &[f64], ys: &[f64]) -> f64 {
    xs.iter().zip(ys).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / xs.len().max(1) as f64
}
