use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_bags, code_counts, filter_rare_codes, mask_bag, split_patients, write_shards, BagSet, LabEvent, PatientSplit, Split};
use crate::ecdf::{EcdfSet, Vocab, VocabMode};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub min_count: u64,
    pub splits: [f64; 3],
    pub seed: u64,
    pub mode: VocabMode,
    pub shard_size: usize,
    /// Offline masks drawn per bag.
    pub n_mask: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_count: 500,
            splits: [0.7, 0.1, 0.2],
            seed: 0,
            mode: VocabMode::Continuous,
            shard_size: 10_000,
            n_mask: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub patients: usize,
    pub events: usize,
    pub bags_kept: usize,
    pub bags_dropped: usize,
    pub oov_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub mode: VocabMode,
    pub codes_in: usize,
    pub codes_kept: usize,
    pub codes_dropped: usize,
    pub binary_codes: usize,
    pub vocab_size: usize,
    pub splits: BTreeMap<String, SplitSummary>,
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub ecdfs: EcdfSet,
    pub vocab: Vocab,
    pub split: PatientSplit,
    /// Masked bags per split, in [`Split::ALL`] order.
    pub bags: [BagSet; 3],
    pub summary: PreprocessSummary,
}

impl Preprocessed {
    pub fn split_bags(&self, split: Split) -> &BagSet {
        &self.bags[split as usize]
    }
}

/// Rare-code filter, patient split, training-split eCDFs and vocabulary,
/// bag construction and offline masking.
///
/// Codes whose training events never carry a value are declared binary.
pub fn preprocess(events: Vec<LabEvent>, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let codes_in = code_counts(&events).len();
    let events = filter_rare_codes(events, cfg.min_count);
    let codes_kept = code_counts(&events).len();
    let patients: Vec<&str> = events.iter().map(|e| e.patient_id.as_str()).collect();
    let split = split_patients(&patients, cfg.splits, cfg.seed)?;
    let which: BTreeMap<&str, Split> = Split::ALL
        .iter()
        .flat_map(|&s| {
            let ids = match s {
                Split::Train => &split.train,
                Split::Val => &split.val,
                Split::Test => &split.test,
            };
            ids.iter().map(move |p| (p.as_str(), s))
        })
        .collect();
    let mut by_split: [Vec<LabEvent>; 3] = Default::default();
    for e in events {
        let s = which[e.patient_id.as_str()];
        by_split[s as usize].push(e);
    }
    let train = &by_split[Split::Train as usize];
    let ecdfs = EcdfSet::from_observations(train.iter().filter_map(|e| e.value.map(|v| (e.code.as_str(), v))))?;
    let counts = code_counts(train);
    let mut ranked: Vec<(&str, u64)> = counts.iter().map(|(&c, &n)| (c, n)).collect();
    ranked.sort();
    let binary: BTreeSet<String> = ranked
        .iter()
        .filter(|(c, _)| ecdfs.get(c).is_none())
        .map(|(c, _)| c.to_string())
        .collect();
    let vocab = match cfg.mode {
        VocabMode::Continuous => Vocab::continuous(ranked.iter().copied())?,
        VocabMode::Decile => Vocab::decile(&ecdfs, ranked.iter().copied(), &binary)?,
    };
    let mut summaries = BTreeMap::new();
    let mut bags: [BagSet; 3] = Default::default();
    for s in Split::ALL {
        let evs = &by_split[s as usize];
        let mut set = build_bags(evs, &vocab, &ecdfs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + s as u64));
        for bag in &mut set.bags {
            let n = cfg.n_mask.min(bag.len());
            *bag = mask_bag(bag, &mut rng, n, vocab.mask_token())?;
        }
        summaries.insert(
            s.name().to_string(),
            SplitSummary {
                patients: evs.iter().map(|e| e.patient_id.as_str()).collect::<BTreeSet<_>>().len(),
                events: evs.len(),
                bags_kept: set.bags.len(),
                bags_dropped: set.dropped_short,
                oov_events: set.oov_events,
            },
        );
        bags[s as usize] = set;
    }
    let summary = PreprocessSummary {
        mode: cfg.mode,
        codes_in,
        codes_kept,
        codes_dropped: codes_in - codes_kept,
        binary_codes: binary.len(),
        vocab_size: vocab.size(),
        splits: summaries,
    };
    Ok(Preprocessed {
        ecdfs,
        vocab,
        split,
        bags,
        summary,
    })
}

/// Writes `ecdfs.json`, `vocab.json`, `summary.json` and one shard
/// directory per split under `out`.
pub fn write_preprocessed(p: &Preprocessed, out: &Path, shard_size: usize) -> Result<()> {
    std::fs::create_dir_all(out)?;
    p.ecdfs.save(&out.join("ecdfs.json"))?;
    p.vocab.save(&out.join("vocab.json"))?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&p.summary)?)?;
    for s in Split::ALL {
        write_shards(&p.split_bags(s).bags, &out.join(s.name()), shard_size)?;
    }
    Ok(())
}
