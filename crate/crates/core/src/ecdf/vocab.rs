use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EcdfSet;
use crate::error::{Error, Result};

pub const DECILES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabMode {
    /// One token per code plus mask and null; values travel separately.
    Continuous,
    /// Ten decile tokens and one missing-value token per numeric code, one
    /// token per binary code, plus a global mask.
    Decile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub code: String,
    pub count: u64,
    /// Code token (continuous), first decile token (decile, numeric) or the
    /// single presence token (decile, binary).
    pub token: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub binary: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_token: Option<u32>,
    /// Raw-unit values at eCDF levels 0.1 .. 0.9.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decile_bounds: Option<Vec<f64>>,
}

/// What a token id stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSlot {
    Pad,
    Code(usize),
    Decile { entry: usize, decile: usize },
    Missing(usize),
    Binary(usize),
    Mask,
    Null,
}

impl TokenSlot {
    pub fn entry(self) -> Option<usize> {
        match self {
            TokenSlot::Code(e) | TokenSlot::Missing(e) | TokenSlot::Binary(e) => Some(e),
            TokenSlot::Decile { entry, .. } => Some(entry),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    mode: VocabMode,
    size: u32,
    mask_token: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    null_token: Option<u32>,
    entries: Vec<VocabEntry>,
}

/// Bidirectional code/token maps. Token 0 is reserved for padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    mode: VocabMode,
    entries: Vec<VocabEntry>,
    mask: u32,
    null: Option<u32>,
    by_code: HashMap<String, usize>,
    slots: Vec<TokenSlot>,
}

/// Frequency descending, then ascending code id (numerically when both ids
/// are integers).
fn rank_order(a: &(&str, u64), b: &(&str, u64)) -> Ordering {
    b.1.cmp(&a.1).then_with(|| match (a.0.parse::<i64>(), b.0.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.0.cmp(b.0)),
        _ => a.0.cmp(b.0),
    })
}

fn ranked<'a>(counts: impl IntoIterator<Item = (&'a str, u64)>) -> Vec<(&'a str, u64)> {
    let mut v: Vec<(&str, u64)> = counts.into_iter().collect();
    v.sort_by(rank_order);
    v.dedup_by(|a, b| a.0 == b.0);
    v
}

impl Vocab {
    /// Frequency-ranked code tokens `1..=C`, mask `C+1`, null `C+2`.
    pub fn continuous<'a>(counts: impl IntoIterator<Item = (&'a str, u64)>) -> Result<Self> {
        let ranked = ranked(counts);
        if ranked.is_empty() {
            return Err(Error::config("cannot build a vocabulary from an empty frequency table"));
        }
        let entries: Vec<VocabEntry> = ranked
            .iter()
            .enumerate()
            .map(|(i, (code, count))| VocabEntry {
                code: code.to_string(),
                count: *count,
                token: i as u32 + 1,
                binary: false,
                missing_token: None,
                decile_bounds: None,
            })
            .collect();
        let c = entries.len() as u32;
        Self::assemble(VocabMode::Continuous, entries, c + 1, Some(c + 2))
    }

    /// Decile vocabulary with token blocks in descending code frequency.
    pub fn decile<'a>(
        ecdfs: &EcdfSet,
        counts: impl IntoIterator<Item = (&'a str, u64)>,
        binary: &BTreeSet<String>,
    ) -> Result<Self> {
        let ranked = ranked(counts);
        if ranked.is_empty() {
            return Err(Error::config("cannot build a vocabulary from an empty frequency table"));
        }
        let mut next = 1u32;
        let mut entries = Vec::with_capacity(ranked.len());
        for (code, count) in ranked {
            if binary.contains(code) {
                entries.push(VocabEntry {
                    code: code.to_string(),
                    count,
                    token: next,
                    binary: true,
                    missing_token: None,
                    decile_bounds: None,
                });
                next += 1;
                continue;
            }
            let ecdf = ecdfs.get(code).ok_or_else(|| {
                Error::config(format!("numeric code {code} has no eCDF; declare it binary or supply values"))
            })?;
            let bounds = (1..DECILES)
                .map(|d| ecdf.invert(d as f64 / DECILES as f64))
                .collect::<Result<Vec<_>>>()?;
            entries.push(VocabEntry {
                code: code.to_string(),
                count,
                token: next,
                binary: false,
                missing_token: Some(next + DECILES as u32),
                decile_bounds: Some(bounds),
            });
            next += DECILES as u32 + 1;
        }
        Self::assemble(VocabMode::Decile, entries, next, None)
    }

    fn assemble(mode: VocabMode, entries: Vec<VocabEntry>, mask: u32, null: Option<u32>) -> Result<Self> {
        let size = null.unwrap_or(mask).max(mask) as usize;
        let mut slots = vec![None; size + 1];
        slots[0] = Some(TokenSlot::Pad);
        let mut by_code = HashMap::new();
        let claim = |slots: &mut Vec<Option<TokenSlot>>, t: u32, s: TokenSlot| -> Result<()> {
            match slots.get_mut(t as usize) {
                Some(slot @ None) => {
                    *slot = Some(s);
                    Ok(())
                }
                _ => Err(Error::Vocab(format!("token {t} assigned twice or out of range"))),
            }
        };
        for (i, e) in entries.iter().enumerate() {
            if by_code.insert(e.code.clone(), i).is_some() {
                return Err(Error::Vocab(format!("code {} listed twice", e.code)));
            }
            match (mode, e.binary) {
                (VocabMode::Continuous, _) => claim(&mut slots, e.token, TokenSlot::Code(i))?,
                (VocabMode::Decile, true) => claim(&mut slots, e.token, TokenSlot::Binary(i))?,
                (VocabMode::Decile, false) => {
                    for d in 0..DECILES {
                        claim(&mut slots, e.token + d as u32, TokenSlot::Decile { entry: i, decile: d })?;
                    }
                    let missing = e
                        .missing_token
                        .ok_or_else(|| Error::Vocab(format!("code {} lacks a missing token", e.code)))?;
                    claim(&mut slots, missing, TokenSlot::Missing(i))?;
                }
            }
        }
        claim(&mut slots, mask, TokenSlot::Mask)?;
        if let Some(n) = null {
            claim(&mut slots, n, TokenSlot::Null)?;
        }
        let slots = slots
            .into_iter()
            .enumerate()
            .map(|(t, s)| s.ok_or_else(|| Error::Vocab(format!("token {t} is unassigned"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode,
            entries,
            mask,
            null,
            by_code,
            slots,
        })
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    /// Number of non-pad tokens; token ids run `1..=size()`.
    pub fn size(&self) -> usize {
        self.slots.len() - 1
    }

    pub fn num_codes(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn mask_token(&self) -> u32 {
        self.mask
    }

    pub fn null_token(&self) -> Option<u32> {
        self.null
    }

    pub fn entry(&self, code: &str) -> Option<&VocabEntry> {
        self.by_code.get(code).map(|&i| &self.entries[i])
    }

    pub fn entry_index(&self, code: &str) -> Option<usize> {
        self.by_code.get(code).copied()
    }

    pub fn contains(&self, code: &str) -> bool {
        self.by_code.contains_key(code)
    }

    pub fn slot(&self, token: u32) -> Result<TokenSlot> {
        self.slots
            .get(token as usize)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("token {token} outside vocabulary of {}", self.size())))
    }

    /// Code a token belongs to, if any.
    pub fn code_of(&self, token: u32) -> Option<&str> {
        self.slot(token).ok()?.entry().map(|e| self.entries[e].code.as_str())
    }

    /// Continuous-mode token of `code`.
    pub fn code_token(&self, code: &str) -> Result<u32> {
        if self.mode != VocabMode::Continuous {
            return Err(Error::Vocab("code_token needs a continuous vocabulary".into()));
        }
        self.entry(code)
            .map(|e| e.token)
            .ok_or_else(|| Error::Vocab(format!("unknown code {code}")))
    }

    /// Decile-mode token for `code` at eCDF level `p`; `None` selects the
    /// code's missing-value token.
    pub fn decile_token(&self, code: &str, p: Option<f64>) -> Result<u32> {
        if self.mode != VocabMode::Decile {
            return Err(Error::Vocab("decile_token needs a decile vocabulary".into()));
        }
        let e = self.entry(code).ok_or_else(|| Error::Vocab(format!("unknown code {code}")))?;
        if e.binary {
            return Ok(e.token);
        }
        match p {
            None => Ok(e.missing_token.expect("numeric entries carry a missing token")),
            Some(p) if (0.0..=1.0).contains(&p) => Ok(e.token + decile_index(p) as u32),
            Some(p) => Err(Error::contract(format!("eCDF level {p} outside [0, 1]"))),
        }
    }

    /// The ten decile tokens of a numeric code, in order.
    pub fn decile_tokens(&self, code: &str) -> Result<[u32; DECILES]> {
        let e = self.entry(code).ok_or_else(|| Error::Vocab(format!("unknown code {code}")))?;
        if self.mode != VocabMode::Decile || e.binary {
            return Err(Error::Vocab(format!("code {code} has no decile tokens")));
        }
        Ok(std::array::from_fn(|d| e.token + d as u32))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `min(floor(10 p), 9)`.
pub fn decile_index(p: f64) -> usize {
    ((p * DECILES as f64).floor() as usize).min(DECILES - 1)
}

impl TryFrom<VocabFile> for Vocab {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        let v = Vocab::assemble(f.mode, f.entries, f.mask_token, f.null_token)?;
        if v.size() as u32 != f.size {
            return Err(Error::Vocab(format!("declared size {} but {} tokens assigned", f.size, v.size())));
        }
        Ok(v)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile {
            mode: v.mode,
            size: v.size() as u32,
            mask_token: v.mask,
            null_token: v.null,
            entries: v.entries,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecdf::CompressedEcdf;

    fn counts() -> Vec<(&'static str, u64)> {
        vec![("C", 1), ("A", 10), ("B", 5)]
    }

    #[test]
    fn continuous_ranking() {
        let v = Vocab::continuous(counts()).unwrap();
        assert_eq!(v.code_token("A").unwrap(), 1);
        assert_eq!(v.code_token("B").unwrap(), 2);
        assert_eq!(v.code_token("C").unwrap(), 3);
        assert_eq!(v.mask_token(), 4);
        assert_eq!(v.null_token(), Some(5));
        assert_eq!(v.size(), 5);
        assert!(matches!(v.code_token("Z"), Err(Error::Vocab(_))));
    }

    #[test]
    fn most_frequent_code_gets_token_one() {
        let v = Vocab::continuous([("51221", 900), ("50912", 800), ("50971", 10)]).unwrap();
        assert_eq!(v.code_token("51221").unwrap(), 1);
    }

    #[test]
    fn ties_break_by_ascending_code_id() {
        for _ in 0..3 {
            let v = Vocab::continuous([("200", 7), ("31", 7), ("4", 7), ("x", 9)]).unwrap();
            let order: Vec<&str> = v.entries().iter().map(|e| e.code.as_str()).collect();
            assert_eq!(order, ["x", "4", "31", "200"]);
        }
    }

    fn ecdfs(codes: &[&str]) -> EcdfSet {
        let mut set = EcdfSet::new();
        for c in codes {
            let obs: Vec<f64> = (0..100).map(f64::from).collect();
            set.insert(CompressedEcdf::build(*c, &obs).unwrap());
        }
        set
    }

    #[test]
    fn decile_blocks_follow_frequency() {
        let binary: BTreeSet<String> = ["opiates".to_string()].into();
        let v = Vocab::decile(
            &ecdfs(&["hematocrit", "creatinine"]),
            [("creatinine", 50), ("hematocrit", 90), ("opiates", 10)],
            &binary,
        )
        .unwrap();
        assert_eq!(v.decile_tokens("hematocrit").unwrap(), std::array::from_fn(|d| d as u32 + 1));
        assert_eq!(v.decile_token("hematocrit", None).unwrap(), 11);
        assert_eq!(v.decile_token("creatinine", Some(0.0)).unwrap(), 12);
        assert_eq!(v.decile_token("creatinine", None).unwrap(), 22);
        assert_eq!(v.decile_token("opiates", None).unwrap(), 23);
        assert_eq!(v.mask_token(), 24);
        assert_eq!(v.size(), 24);
    }

    #[test]
    fn single_numeric_code_vocab_size() {
        let v = Vocab::decile(&ecdfs(&["A"]), [("A", 3)], &BTreeSet::new()).unwrap();
        assert_eq!(v.size(), 12);
    }

    #[test]
    fn full_scale_decile_count() {
        let numeric: Vec<String> = (0..372).map(|i| format!("n{i:03}")).collect();
        let binary: BTreeSet<String> = (0..157).map(|i| format!("b{i:03}")).collect();
        let refs: Vec<&str> = numeric.iter().map(String::as_str).collect();
        let counts: Vec<(&str, u64)> = numeric
            .iter()
            .chain(binary.iter())
            .enumerate()
            .map(|(i, c)| (c.as_str(), 10_000 - i as u64))
            .collect();
        let v = Vocab::decile(&ecdfs(&refs), counts, &binary).unwrap();
        // 372 * 11 + 157 = 4249 code tokens, plus the mask
        assert_eq!(v.size(), 372 * 11 + 157 + 1);
        assert_eq!(v.size(), 4250);
    }

    #[test]
    fn numeric_code_without_ecdf_is_config_error() {
        let err = Vocab::decile(&ecdfs(&["A"]), [("A", 3), ("B", 2)], &BTreeSet::new()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn decile_boundaries() {
        let v = Vocab::decile(&ecdfs(&["A"]), [("A", 3)], &BTreeSet::new()).unwrap();
        assert_eq!(v.decile_token("A", Some(0.0)).unwrap(), 1);
        assert_eq!(v.decile_token("A", Some(1.0)).unwrap(), 10);
        assert_eq!(v.decile_token("A", Some(0.35)).unwrap(), 4);
        assert!(v.decile_token("Q", Some(0.1)).is_err());
        assert_eq!(decile_index(0.35), 3);
        assert_eq!(decile_index(0.999_999), 9);
    }

    #[test]
    fn deciles_partition_unit_interval() {
        for i in 0..=1000 {
            let p = i as f64 / 1000.0;
            let d = decile_index(p);
            assert!(d < DECILES);
            assert!(p >= d as f64 / 10.0 - 1e-12);
        }
    }

    #[test]
    fn maps_are_bijective_and_round_trip() {
        let binary: BTreeSet<String> = ["b".to_string()].into();
        let v = Vocab::decile(&ecdfs(&["a", "c"]), [("a", 5), ("b", 4), ("c", 3)], &binary).unwrap();
        let mut seen = BTreeSet::new();
        for t in 1..=v.size() as u32 {
            let slot = v.slot(t).unwrap();
            assert!(seen.insert(format!("{slot:?}")));
        }
        let back = Vocab::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        let c = Vocab::continuous(counts()).unwrap();
        assert_eq!(Vocab::from_json(&c.to_json().unwrap()).unwrap(), c);
        for t in 1..=3 {
            let code = c.code_of(t).unwrap();
            assert_eq!(c.code_token(code).unwrap(), t);
        }
    }
}
