use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::model::Output;
use crate::numerics::{Tape, Tensor, Var};

/// Handles of the pre-training objective on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    /// Absent when no masked position carries a value.
    pub mse: Option<Var>,
    /// Masked positions contributing to the cross-entropy.
    pub masked: usize,
    /// Masked positions contributing to the squared error.
    pub valued: usize,
}

/// Head class of a target token; class `c` predicts token `c + 1`.
fn class_of(token: u32, classes: usize) -> Result<usize> {
    match (token as usize).checked_sub(1) {
        Some(c) if c < classes => Ok(c),
        _ => Err(Error::Vocab(format!("target token {token} outside the {classes}-class head"))),
    }
}

/// Mean cross-entropy of the true tokens over every masked position.
fn masked_cross_entropy(tape: &mut Tape, logits: Var, batch: &Batch) -> Result<(Var, usize)> {
    if batch.targets.is_empty() {
        return Err(Error::contract("batch has no masked positions"));
    }
    let classes = tape.value(logits).cols();
    let rows: Vec<usize> = batch.targets.iter().map(|t| t.row).collect();
    let cols = batch
        .targets
        .iter()
        .map(|t| class_of(t.token, classes))
        .collect::<Result<Vec<_>>>()?;
    let z = tape.gather_rows(logits, &rows)?;
    let logp = tape.log_softmax(z)?;
    let picked = tape.pick(logp, &cols)?;
    let mean = tape.mean(picked);
    Ok((tape.scale(mean, -1.0), rows.len()))
}

/// Categorical cross-entropy over masked positions plus squared error of
/// the value head over masked positions whose truth is not null. Both terms
/// are means over their contributing positions.
pub fn multitask_loss(tape: &mut Tape, out: &Output, batch: &Batch) -> Result<LossParts> {
    let (ce, masked) = masked_cross_entropy(tape, out.logits, batch)?;
    let values = out
        .values
        .ok_or_else(|| Error::config("multitask loss needs the continuous value head"))?;
    let valued: Vec<_> = batch.targets.iter().filter(|t| !t.null).collect();
    if valued.is_empty() {
        return Ok(LossParts {
            total: ce,
            ce,
            mse: None,
            masked,
            valued: 0,
        });
    }
    let rows: Vec<usize> = valued.iter().map(|t| t.row).collect();
    let truth = tape.constant(Tensor::new(vec![rows.len(), 1], valued.iter().map(|t| t.value).collect())?);
    let pred = tape.gather_rows(values, &rows)?;
    let diff = tape.sub(pred, truth)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.mean(sq);
    let total = tape.add(ce, mse)?;
    Ok(LossParts {
        total,
        ce,
        mse: Some(mse),
        masked,
        valued: rows.len(),
    })
}

/// Categorical cross-entropy of the masked tokens over the whole decile
/// vocabulary.
pub fn bert_mlm_loss(tape: &mut Tape, out: &Output, batch: &Batch) -> Result<LossParts> {
    let (ce, masked) = masked_cross_entropy(tape, out.logits, batch)?;
    Ok(LossParts {
        total: ce,
        ce,
        mse: None,
        masked,
        valued: 0,
    })
}

/// Objective matching the architecture that produced `out`.
pub fn pretraining_loss(tape: &mut Tape, out: &Output, batch: &Batch) -> Result<LossParts> {
    if out.values.is_some() {
        multitask_loss(tape, out, batch)
    } else {
        bert_mlm_loss(tape, out, batch)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::{mask_bag, pad_batch, LabBag};
    use crate::model::{forward, ModelConfig, ModelKind, ModelParams};

    fn config(kind: ModelKind, vocab: usize) -> ModelConfig {
        ModelConfig {
            kind,
            d_model: 8,
            num_layers: 1,
            num_heads: 2,
            ff_dim: 8,
            ..ModelConfig::labrador(vocab)
        }
    }

    fn batch(rng: &mut ChaCha8Rng, cfg: &ModelConfig, sizes: &[usize], n_mask: usize) -> Batch {
        let top = match cfg.kind {
            ModelKind::Labrador => cfg.vocab_size as u32,
            ModelKind::Bert => cfg.vocab_size as u32 - 1,
        };
        let bags: Vec<LabBag> = sizes
            .iter()
            .map(|&l| {
                let tokens = (0..l).map(|_| rng.random_range(1..=top)).collect();
                let nulls: Vec<bool> = (0..l).map(|_| rng.random_bool(0.3)).collect();
                let values = nulls.iter().map(|&n| if n { 0.0 } else { rng.random() }).collect();
                mask_bag(&LabBag::new(tokens, values, nulls).unwrap(), rng, n_mask.min(l), cfg.mask_token()).unwrap()
            })
            .collect();
        pad_batch(&bags.iter().collect::<Vec<_>>()).unwrap()
    }

    fn run(params: &ModelParams, b: &Batch) -> (f64, f64, Option<f64>, Tape, Output) {
        let mut tape = Tape::new();
        let p = params.store.bind(&mut tape, false);
        let out = forward(&mut tape, &p, &params.config, b, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
        let parts = pretraining_loss(&mut tape, &out, b).unwrap();
        let total = tape.value(parts.total).item();
        let ce = tape.value(parts.ce).item();
        let mse = parts.mse.map(|m| tape.value(m).item());
        (total, ce, mse, tape, out)
    }

    #[test]
    fn uniform_head_gives_log_vocab() {
        for (kind, v) in [(ModelKind::Labrador, 7), (ModelKind::Bert, 12)] {
            let mut params = ModelParams::init(config(kind, v), 1).unwrap();
            params.store.get_mut("head.cat.out.w").unwrap().data_mut().fill(0.0);
            let b = batch(&mut ChaCha8Rng::seed_from_u64(1), &params.config, &[4, 6, 5], 2);
            let (_, ce, _, _, _) = run(&params, &b);
            assert!((ce - (v as f64).ln()).abs() < 1e-9, "{kind:?}: {ce}");
        }
    }

    #[test]
    fn matches_loop_oracle_and_decomposes() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for kind in [ModelKind::Labrador, ModelKind::Bert] {
                let params = ModelParams::init(config(kind, 9), seed).unwrap();
                let b = batch(&mut rng, &params.config, &[3, 7, 5, 4], 3);
                let (total, ce, mse, tape, out) = run(&params, &b);
                let probs = tape.value(out.probs);
                let oracle_ce = b
                    .targets
                    .iter()
                    .map(|t| -probs.row(t.row)[t.token as usize - 1].ln())
                    .sum::<f64>()
                    / b.targets.len() as f64;
                assert!((ce - oracle_ce).abs() < 1e-10);
                let valued: Vec<_> = b.targets.iter().filter(|t| !t.null).collect();
                let oracle_mse = out.values.filter(|_| !valued.is_empty()).map(|v| {
                    let v = tape.value(v);
                    valued.iter().map(|t| (v.data()[t.row] - t.value).powi(2)).sum::<f64>() / valued.len() as f64
                });
                match (mse, oracle_mse) {
                    (Some(m), Some(o)) => assert!((m - o).abs() < 1e-10),
                    (None, None) => {}
                    other => panic!("{other:?}"),
                }
                assert!(ce >= 0.0 && mse.unwrap_or(0.0) >= 0.0);
                assert_eq!(total, ce + mse.unwrap_or(0.0));
            }
        }
    }

    #[test]
    fn null_truths_contribute_cross_entropy_only() {
        let params = ModelParams::init(config(ModelKind::Labrador, 5), 2).unwrap();
        let bag = LabBag::new(vec![1, 2, 3], vec![0.0, 0.5, 0.25], vec![true, false, false]).unwrap();
        let masked = crate::corpus::mask_positions(&bag, &[0], params.config.mask_token()).unwrap();
        let b = pad_batch(&[&masked]).unwrap();
        let (total, ce, mse, _, _) = run(&params, &b);
        assert_eq!(mse, None);
        assert_eq!(total, ce);
    }

    #[test]
    fn unmasked_batch_is_contract_error() {
        let params = ModelParams::init(config(ModelKind::Labrador, 5), 2).unwrap();
        let bag = LabBag::new(vec![1, 2, 3], vec![0.1, 0.5, 0.25], vec![false; 3]).unwrap();
        let b = pad_batch(&[&bag]).unwrap();
        let mut tape = Tape::new();
        let p = params.store.bind(&mut tape, false);
        let out = forward(&mut tape, &p, &params.config, &b, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
        assert!(matches!(multitask_loss(&mut tape, &out, &b), Err(Error::Contract(_))));
        assert!(matches!(bert_mlm_loss(&mut tape, &out, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn confident_prediction_gives_zero_loss() {
        let mut tape = Tape::new();
        let mut logits = vec![0.0; 12];
        logits[10] = 800.0;
        let logits = tape.constant(Tensor::new(vec![1, 1, 12], logits).unwrap());
        let b = Batch {
            batch: 1,
            len: 1,
            tokens: vec![12],
            values: vec![0.0],
            nulls: vec![false],
            pad: vec![false],
            targets: vec![crate::corpus::Target {
                row: 0,
                bag: 0,
                token: 11,
                value: 0.0,
                null: true,
            }],
        };
        let out = Output {
            hidden: logits,
            logits,
            probs: logits,
            values: None,
        };
        let parts = bert_mlm_loss(&mut tape, &out, &b).unwrap();
        assert_eq!(tape.value(parts.ce).item(), 0.0);
    }

    #[test]
    fn unmasked_values_reach_the_loss_only_through_the_network() {
        let params = ModelParams::init(config(ModelKind::Labrador, 6), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = batch(&mut rng, &params.config, &[6], 1);
        let mut zeroed = params.clone();
        zeroed.store.get_mut("cont.value.w").unwrap().data_mut().fill(0.0);
        let (base, ..) = run(&zeroed, &b);
        let mut shifted = b.clone();
        let masked = b.targets[0].row;
        for i in 0..shifted.positions() {
            if i != masked && !shifted.nulls[i] {
                shifted.values[i] = 1.0 - shifted.values[i];
            }
        }
        assert_eq!(run(&zeroed, &shifted).0, base);
    }
}
