//! Lab-event ingestion, order-set bags, masking, padding and shards.

mod dataset;
mod events;
mod pipeline;
mod shard;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ecdf::{EcdfSet, Vocab, VocabMode};
use crate::error::{Error, Result};

pub use dataset::{DatasetSpec, FinetuneDataset, TaskKind};
pub use events::{read_events, read_events_from, write_events, write_events_to, LabEvent};
pub use pipeline::{preprocess, write_preprocessed, PreprocessConfig, PreprocessSummary, Preprocessed, SplitSummary};
pub use shard::{read_shard_file, read_shards, shard_paths, write_shards, ShardWriter, SHARD_EXTENSION, SHARD_MAGIC};

/// Minimum bag length kept by [`build_bags`].
pub const MIN_BAG_LEN: usize = 3;

/// Ground truth recorded for one masked position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskedTruth {
    pub position: usize,
    pub token: u32,
    pub value: f64,
    pub null: bool,
}

/// One order set: parallel token/value/null lists plus masked truths.
///
/// Values are eCDF levels in `[0, 1]` at non-null positions and `0.0`
/// elsewhere. Masked positions carry the mask token and value `0.0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabBag {
    pub tokens: Vec<u32>,
    pub values: Vec<f64>,
    pub nulls: Vec<bool>,
    pub truths: Vec<MaskedTruth>,
}

/// Provenance of a bag, kept beside it rather than in the shard payload.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BagKey {
    pub patient_id: String,
    pub chart_time: i64,
}

impl LabBag {
    pub fn new(tokens: Vec<u32>, values: Vec<f64>, nulls: Vec<bool>) -> Result<Self> {
        let bag = Self {
            tokens,
            values,
            nulls,
            truths: Vec::new(),
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.truths.iter().any(|t| t.position == position)
    }

    /// Structural invariants: equal list lengths, values in `[0, 1]` at
    /// non-null positions, distinct in-range masked positions.
    pub fn validate(&self) -> Result<()> {
        let l = self.tokens.len();
        if self.values.len() != l || self.nulls.len() != l {
            return Err(Error::data(format!(
                "bag lists disagree: {} tokens, {} values, {} null flags",
                l,
                self.values.len(),
                self.nulls.len()
            )));
        }
        for (i, (&v, &null)) in self.values.iter().zip(&self.nulls).enumerate() {
            if !null && !(0.0..=1.0).contains(&v) {
                return Err(Error::data(format!("bag value {v} at position {i} outside [0, 1]")));
            }
        }
        let mut seen = BTreeSet::new();
        for t in &self.truths {
            if t.position >= l || !seen.insert(t.position) {
                return Err(Error::data(format!("bad masked position {} in bag of {l}", t.position)));
            }
        }
        Ok(())
    }

    /// Restores masked positions from their truths.
    pub fn unmasked(&self) -> LabBag {
        let mut bag = self.clone();
        for t in bag.truths.drain(..) {
            bag.tokens[t.position] = t.token;
            bag.values[t.position] = t.value;
            bag.nulls[t.position] = t.null;
        }
        bag
    }
}

/// Keeps only events whose code occurs more than `min_count` times.
pub fn filter_rare_codes(events: Vec<LabEvent>, min_count: u64) -> Vec<LabEvent> {
    let keep: HashMap<String, bool> = code_counts(&events)
        .into_iter()
        .map(|(c, n)| (c.to_string(), n > min_count))
        .collect();
    events.into_iter().filter(|e| keep[&e.code]).collect()
}

pub fn code_counts(events: &[LabEvent]) -> HashMap<&str, u64> {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for e in events {
        *counts.entry(e.code.as_str()).or_default() += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl PatientSplit {
    pub fn split_of(&self, patient: &str) -> Option<Split> {
        if self.train.iter().any(|p| p == patient) {
            Some(Split::Train)
        } else if self.val.iter().any(|p| p == patient) {
            Some(Split::Val)
        } else if self.test.iter().any(|p| p == patient) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Seeded uniform partition of the distinct patient ids.
///
/// Train and validation sizes are `round(f * n)`; test takes the rest.
pub fn split_patients<S: AsRef<str>>(patients: &[S], fractions: [f64; 3], seed: u64) -> Result<PatientSplit> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let mut ids: Vec<String> = patients
        .iter()
        .map(|p| p.as_ref().to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(PatientSplit { train: ids, val, test })
}

/// Output of [`build_bags`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BagSet {
    pub keys: Vec<BagKey>,
    pub bags: Vec<LabBag>,
    pub dropped_short: usize,
    pub oov_events: usize,
}

/// Groups events by exact `(patient, chart_time)`, tokenizes and
/// eCDF-transforms them, and drops bags shorter than [`MIN_BAG_LEN`].
///
/// Out-of-vocabulary events are dropped and counted. Codes without an eCDF
/// are treated as valueless.
pub fn build_bags(events: &[LabEvent], vocab: &Vocab, ecdfs: &EcdfSet) -> Result<BagSet> {
    let mut groups: BTreeMap<(&str, i64), Vec<&LabEvent>> = BTreeMap::new();
    let mut out = BagSet::default();
    for e in events {
        if !vocab.contains(&e.code) {
            out.oov_events += 1;
            continue;
        }
        groups.entry((e.patient_id.as_str(), e.chart_time)).or_default().push(e);
    }
    for ((patient, time), group) in groups {
        if group.len() < MIN_BAG_LEN {
            out.dropped_short += 1;
            continue;
        }
        let mut tokens = Vec::with_capacity(group.len());
        let mut values = Vec::with_capacity(group.len());
        let mut nulls = Vec::with_capacity(group.len());
        for e in group {
            let (t, v, null) = tokenize(e, vocab, ecdfs)?;
            tokens.push(t);
            values.push(v);
            nulls.push(null);
        }
        out.keys.push(BagKey {
            patient_id: patient.to_string(),
            chart_time: time,
        });
        out.bags.push(LabBag::new(tokens, values, nulls)?);
    }
    Ok(out)
}

/// `(token, value, null)` for one in-vocabulary event.
pub fn tokenize(e: &LabEvent, vocab: &Vocab, ecdfs: &EcdfSet) -> Result<(u32, f64, bool)> {
    let p = match (e.value, ecdfs.get(&e.code)) {
        (Some(v), Some(ecdf)) => Some(ecdf.apply(v)?),
        _ => None,
    };
    match vocab.mode() {
        VocabMode::Continuous => {
            let t = vocab.code_token(&e.code)?;
            Ok(match p {
                Some(p) => (t, p, false),
                None => (t, 0.0, true),
            })
        }
        VocabMode::Decile => {
            let entry = vocab
                .entry(&e.code)
                .ok_or_else(|| Error::Vocab(format!("unknown code {}", e.code)))?;
            let p = if entry.binary { None } else { p };
            let t = vocab.decile_token(&e.code, p)?;
            Ok(match p {
                Some(p) => (t, p, false),
                None => (t, 0.0, true),
            })
        }
    }
}

/// Masks `n_mask` distinct uniformly chosen positions of an unmasked bag.
pub fn mask_bag<R: Rng + ?Sized>(bag: &LabBag, rng: &mut R, n_mask: usize, mask_token: u32) -> Result<LabBag> {
    let l = bag.len();
    if n_mask < 1 || n_mask > l {
        return Err(Error::contract(format!("cannot mask {n_mask} positions of a bag of {l}")));
    }
    if !bag.truths.is_empty() {
        return Err(Error::contract("bag is already masked"));
    }
    let positions = rand::seq::index::sample(rng, l, n_mask).into_vec();
    mask_positions(bag, &positions, mask_token)
}

/// Masks the given distinct positions of an unmasked bag.
pub fn mask_positions(bag: &LabBag, positions: &[usize], mask_token: u32) -> Result<LabBag> {
    if !bag.truths.is_empty() {
        return Err(Error::contract("bag is already masked"));
    }
    let mut positions = positions.to_vec();
    positions.sort_unstable();
    positions.dedup();
    if positions.is_empty() || positions.iter().any(|&p| p >= bag.len()) {
        return Err(Error::contract(format!(
            "mask positions {positions:?} invalid for a bag of {}",
            bag.len()
        )));
    }
    let mut out = bag.clone();
    for p in positions {
        out.truths.push(MaskedTruth {
            position: p,
            token: bag.tokens[p],
            value: bag.values[p],
            null: bag.nulls[p],
        });
        out.tokens[p] = mask_token;
        out.values[p] = 0.0;
        out.nulls[p] = false;
    }
    Ok(out)
}

/// Supervision target at one masked position of a padded batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    /// Flat index `bag * len + position`.
    pub row: usize,
    pub bag: usize,
    pub token: u32,
    pub value: f64,
    pub null: bool,
}

/// Bags padded to the longest one; arrays are row-major `[batch, len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub len: usize,
    pub tokens: Vec<u32>,
    pub values: Vec<f64>,
    pub nulls: Vec<bool>,
    pub pad: Vec<bool>,
    pub targets: Vec<Target>,
}

impl Batch {
    pub fn positions(&self) -> usize {
        self.batch * self.len
    }
}

/// Pads to `L_max` with token 0 and value 0.0.
pub fn pad_batch(bags: &[&LabBag]) -> Result<Batch> {
    if bags.is_empty() {
        return Err(Error::contract("cannot pad an empty batch"));
    }
    let len = bags.iter().map(|b| b.len()).max().unwrap_or(0);
    if len == 0 {
        return Err(Error::contract("cannot pad a batch of empty bags"));
    }
    let n = bags.len() * len;
    let mut batch = Batch {
        batch: bags.len(),
        len,
        tokens: vec![0; n],
        values: vec![0.0; n],
        nulls: vec![false; n],
        pad: vec![true; n],
        targets: Vec::new(),
    };
    for (b, bag) in bags.iter().enumerate() {
        let base = b * len;
        batch.tokens[base..base + bag.len()].copy_from_slice(&bag.tokens);
        batch.values[base..base + bag.len()].copy_from_slice(&bag.values);
        batch.nulls[base..base + bag.len()].copy_from_slice(&bag.nulls);
        batch.pad[base..base + bag.len()].fill(false);
        for t in &bag.truths {
            batch.targets.push(Target {
                row: base + t.position,
                bag: b,
                token: t.token,
                value: t.value,
                null: t.null,
            });
        }
    }
    Ok(batch)
}
