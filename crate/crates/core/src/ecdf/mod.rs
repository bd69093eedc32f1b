//! Per-code empirical CDFs and the two token vocabularies built on them.

mod vocab;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use vocab::{TokenSlot, Vocab, VocabEntry, VocabMode, DECILES};

/// Lossless eCDF: each distinct training value with the fraction of training
/// observations at or below it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedEcdf {
    pub code: String,
    pub n: usize,
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

impl CompressedEcdf {
    pub fn build(code: impl Into<String>, observations: &[f64]) -> Result<Self> {
        let code = code.into();
        if observations.is_empty() {
            return Err(Error::data(format!("eCDF for {code}: no observations")));
        }
        if let Some(bad) = observations.iter().find(|v| !v.is_finite()) {
            return Err(Error::data(format!("eCDF for {code}: non-finite observation {bad}")));
        }
        let mut sorted = observations.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut values = Vec::new();
        let mut probs = Vec::new();
        let mut i = 0;
        while i < n {
            let v = sorted[i];
            let mut j = i;
            while j < n && sorted[j] == v {
                j += 1;
            }
            values.push(v);
            probs.push(j as f64 / n as f64);
            i = j;
        }
        Ok(Self {
            code,
            n,
            values,
            probs,
        })
    }

    /// Fraction of training observations `<= x`.
    pub fn apply(&self, x: f64) -> Result<f64> {
        if x.is_nan() {
            return Err(Error::data(format!("eCDF for {}: NaN query", self.code)));
        }
        let idx = self.values.partition_point(|&v| v <= x);
        Ok(if idx == 0 { 0.0 } else { self.probs[idx - 1] })
    }

    /// Smallest training value whose cumulative probability reaches `p`.
    pub fn invert(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::contract(format!("eCDF inverse needs p in [0, 1], got {p}")));
        }
        let idx = self.probs.partition_point(|&q| q < p);
        Ok(self.values[idx.min(self.values.len() - 1)])
    }

    fn validate(&self) -> Result<()> {
        let ok = !self.values.is_empty()
            && self.values.len() == self.probs.len()
            && self.values.windows(2).all(|w| w[0] < w[1])
            && self.probs.windows(2).all(|w| w[0] < w[1])
            && self.probs.first().is_some_and(|&p| p > 0.0)
            && self.probs.last() == Some(&1.0);
        if ok {
            Ok(())
        } else {
            Err(Error::data(format!("eCDF for {} is malformed", self.code)))
        }
    }
}

/// eCDFs keyed by code id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EcdfSet {
    by_code: BTreeMap<String, CompressedEcdf>,
}

impl EcdfSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds one eCDF per code from `(code, value)` observations.
    pub fn from_observations<'a, I>(obs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        let mut grouped: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (code, v) in obs {
            grouped.entry(code).or_default().push(v);
        }
        let mut set = Self::new();
        for (code, values) in grouped {
            set.insert(CompressedEcdf::build(code, &values)?);
        }
        Ok(set)
    }

    pub fn insert(&mut self, e: CompressedEcdf) {
        self.by_code.insert(e.code.clone(), e);
    }

    pub fn get(&self, code: &str) -> Option<&CompressedEcdf> {
        self.by_code.get(code)
    }

    pub fn len(&self) -> usize {
        self.by_code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_code.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CompressedEcdf> {
        self.by_code.values()
    }

    pub fn to_json(&self) -> Result<String> {
        let list: Vec<&CompressedEcdf> = self.iter().collect();
        Ok(serde_json::to_string_pretty(&list)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let list: Vec<CompressedEcdf> = serde_json::from_str(s)?;
        let mut set = Self::new();
        for e in list {
            e.validate()?;
            set.insert(e);
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example() -> CompressedEcdf {
        CompressedEcdf::build("A", &[1.0, 2.0, 2.0, 4.0]).unwrap()
    }

    /// Step-function oracle over the raw observation list.
    fn raw_ecdf(obs: &[f64], x: f64) -> f64 {
        obs.iter().filter(|&&v| v <= x).count() as f64 / obs.len() as f64
    }

    #[test]
    fn build_counting_definition() {
        let e = example();
        assert_eq!(e.values, vec![1.0, 2.0, 4.0]);
        assert_eq!(e.probs, vec![0.25, 0.75, 1.0]);
        assert_eq!(e.n, 4);
        let single = CompressedEcdf::build("B", &[5.0]).unwrap();
        assert_eq!((single.values, single.probs), (vec![5.0], vec![1.0]));
    }

    #[test]
    fn build_errors() {
        assert!(matches!(CompressedEcdf::build("A", &[]), Err(Error::Data(_))));
        assert!(matches!(CompressedEcdf::build("A", &[1.0, f64::NAN]), Err(Error::Data(_))));
    }

    #[test]
    fn apply_examples() {
        let e = example();
        assert_eq!(e.apply(2.0).unwrap(), 0.75);
        assert_eq!(e.apply(0.5).unwrap(), 0.0);
        assert_eq!(e.apply(3.0).unwrap(), raw_ecdf(&[1.0, 2.0, 2.0, 4.0], 3.0));
        assert_eq!(e.apply(3.0).unwrap(), 0.75);
        assert_eq!(e.apply(100.0).unwrap(), 1.0);
        assert!(matches!(e.apply(f64::NAN), Err(Error::Data(_))));
    }

    #[test]
    fn invert_examples() {
        let e = example();
        assert_eq!(e.invert(0.75).unwrap(), 2.0);
        assert_eq!(e.invert(0.0).unwrap(), 1.0);
        assert_eq!(e.invert(1.0).unwrap(), 4.0);
        assert!(matches!(e.invert(1.5), Err(Error::Contract(_))));
        assert!(matches!(e.invert(-0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn lossless_against_full_sort_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // rounded draws so that ties occur
        let obs: Vec<f64> = (0..10_000).map(|_| (rng.random::<f64>() * 500.0).round() / 10.0).collect();
        let e = CompressedEcdf::build("X", &obs).unwrap();
        let mut sorted = obs.clone();
        sorted.sort_by(f64::total_cmp);
        for &x in &obs {
            // rank = number of observations <= x, from the sorted array
            let rank = sorted.partition_point(|&v| v <= x);
            assert_eq!(e.apply(x).unwrap(), rank as f64 / obs.len() as f64);
        }
    }

    #[test]
    fn invert_round_trip_on_training_values() {
        let obs = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0, 5.0];
        let e = CompressedEcdf::build("P", &obs).unwrap();
        for &x in &obs {
            assert_eq!(e.invert(e.apply(x).unwrap()).unwrap(), x);
        }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let mut set = EcdfSet::new();
        set.insert(example());
        set.insert(CompressedEcdf::build("B", &[0.5, 0.7]).unwrap());
        let back = EcdfSet::from_json(&set.to_json().unwrap()).unwrap();
        assert_eq!(back, set);
        let broken = r#"[{"code":"A","n":2,"values":[2.0,1.0],"probs":[0.5,1.0]}]"#;
        assert!(EcdfSet::from_json(broken).is_err());
    }

    proptest! {
        #[test]
        fn apply_and_invert_are_monotone(
            obs in proptest::collection::vec(-100.0f64..100.0, 1..60),
            a in -150.0f64..150.0, b in -150.0f64..150.0,
            p in 0.0f64..=1.0, q in 0.0f64..=1.0,
        ) {
            let e = CompressedEcdf::build("M", &obs).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(e.apply(lo).unwrap() <= e.apply(hi).unwrap());
            let (plo, phi) = if p <= q { (p, q) } else { (q, p) };
            prop_assert!(e.invert(plo).unwrap() <= e.invert(phi).unwrap());
            prop_assert_eq!(*e.probs.last().unwrap(), 1.0);
            for &x in &obs {
                prop_assert_eq!(e.apply(x).unwrap(), raw_ecdf(&obs, x));
            }
        }
    }
}
