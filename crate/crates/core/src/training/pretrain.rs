use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{clip_global_norm, optimizer_step, subsample, OptimizerState, Stage, StepLog, TrainConfig, TrainObserver};
use crate::augment::{make_contrastive_batch, AugmentationConfig};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::objectives::{batch_loss_grad, contrastive_accuracy, ContrastiveLossConfig};
use crate::session::{assemble_x_encoded, EncodedBehavior, Session, Vocab};

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: EncoderParams,
    pub logs: Vec<StepLog>,
    pub sessions_used: usize,
}

/// Contrastive pretraining over the behavior sequences of `sessions`.
///
/// Each step draws a minibatch of sessions, builds two augmented views per
/// session, encodes them without dropout and minimizes the batch loss
/// through the `g1` projection. A trailing batch of a single session is
/// dropped.
pub fn pretrain(
    sessions: &[Session],
    vocab: &Vocab,
    mut params: EncoderParams,
    aug: &AugmentationConfig,
    loss: &ContrastiveLossConfig,
    train: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<PretrainOutcome> {
    train.validate()?;
    train.check_frozen(&params)?;
    aug.validate()?;
    loss.validate()?;
    if params.config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "encoder expects {} tokens, vocabulary has {}",
            params.config.vocab_size,
            vocab.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let used = subsample(sessions, train.data_fraction, &mut rng);
    if used.len() < 2 {
        return Err(Error::Data(format!(
            "pretraining needs at least 2 sessions, have {} after data_fraction {}",
            used.len(),
            train.data_fraction
        )));
    }
    let encoded: Vec<Vec<EncodedBehavior>> = used
        .iter()
        .map(|s| vocab.encode_sequence(&s.behavior_sequence()))
        .collect();
    let max_len = params.config.max_len;
    let batches_per_epoch = encoded.len() / train.batch_size + usize::from(encoded.len() % train.batch_size >= 2);
    let total = batches_per_epoch * train.epochs;
    let mut state = OptimizerState::new(&params, train.weight_decay).with_frozen(&train.frozen);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut logs = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 1..=train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let sources: Vec<&[EncodedBehavior]> = chunk.iter().map(|&i| encoded[i].as_slice()).collect();
            let batch = make_contrastive_batch(&sources, aug, max_len, &mut rng)?;
            let inputs: Vec<_> = batch
                .views
                .iter()
                .map(|v| assemble_x_encoded(&v.behaviors, max_len))
                .collect();
            let (rep, trace) = params.forward(&inputs, None)?;
            let z = params.project_g1(&rep);
            let (value, d_z) = batch_loss_grad(&z, &batch.positive_mask, loss)?;
            let acc = contrastive_accuracy(&z, &batch.positive_mask, loss.similarity)?;
            let mut grads = params.zeros_like();
            let d_rep = params.project_g1_backward(&rep, &d_z, &mut grads);
            params.backward(&trace, &d_rep, &mut grads)?;
            if let Some(c) = train.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            let lr = train.lr_at(step, total);
            optimizer_step(&mut params, &grads, &mut state, lr)?;
            let log = StepLog {
                stage: Stage::Pretrain,
                epoch,
                step,
                loss: value,
                lr,
                acc: Some(acc),
            };
            observer.on_step(&log)?;
            logs.push(log);
            step += 1;
        }
        if !params.is_finite() {
            return Err(Error::Numerical(format!("parameters diverged in pretraining epoch {epoch}")));
        }
        observer.on_epoch(Stage::Pretrain, epoch, &params, None)?;
    }
    Ok(PretrainOutcome {
        params,
        logs,
        sessions_used: used.len(),
    })
}
