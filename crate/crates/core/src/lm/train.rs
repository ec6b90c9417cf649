use super::data::Example;
use super::{LMModel, LmError, Result, TrainHyper};
use crate::corpus::Special;
use crate::par;
use crate::rng::RngStream;
use crate::tensor::{clip_grad_norm, Adam, Tape};

/// Next-token targets and mask for `ex`, aligned with logits rows
/// `0..len-1`. PAD targets are always masked.
pub(crate) fn shifted(ex: &Example) -> (Vec<u32>, Vec<bool>) {
    let targets = ex.ids[1..].to_vec();
    let mask = ex.loss_mask[1..]
        .iter()
        .zip(&targets)
        .map(|(&m, &t)| m && t != Special::Pad.id())
        .collect();
    (targets, mask)
}

/// `(Σ loss, flat gradient)` of one example with the loss scaled by `scale`.
fn example_grad(model: &LMModel, ex: &Example, scale: f64, dropout: Option<RngStream>) -> Result<(f64, Vec<f64>)> {
    let (targets, mask) = shifted(ex);
    let mut tape = Tape::new();
    let mut rng = dropout;
    let fv = model.forward_tape(&mut tape, &ex.ids[..ex.ids.len() - 1], rng.as_mut())?;
    let loss = tape.cross_entropy_scaled(fv.logits, &targets, &mask, scale)?;
    tape.backward(loss)?;
    Ok((tape.scalar(loss), model.flat_grads(&tape, &fv.params)))
}

/// Mean next-token negative log-likelihood over unmasked positions, eval mode.
pub fn nll_loss(model: &LMModel, batch: &[Example]) -> Result<f64> {
    let count: usize = batch.iter().map(Example::targets).sum();
    if count == 0 {
        return Err(LmError::EmptyDataset("every position is masked".into()));
    }
    let parts = par::map(batch, |ex| -> Result<f64> {
        if ex.targets() == 0 {
            return Ok(0.0);
        }
        let (targets, mask) = shifted(ex);
        let mut tape = Tape::new();
        let fv = model.forward_tape(&mut tape, &ex.ids[..ex.ids.len() - 1], None)?;
        let loss = tape.cross_entropy_scaled(fv.logits, &targets, &mask, 1.0)?;
        Ok(tape.scalar(loss))
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / count as f64)
}

/// Deterministic minibatch order: reshuffled epochs over the dataset.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: RngStream,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, rng: RngStream) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            rng,
        }
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Adam with global-norm clipping over `hyper.steps` minibatches. Returns
/// the per-step training losses. Per-example gradients are computed in
/// parallel and summed in batch order.
pub fn train_supervised(model: &mut LMModel, dataset: &[Example], hyper: &TrainHyper) -> Result<Vec<f64>> {
    train_supervised_until(model, dataset, hyper, 0, |_| Ok(false))
}

/// [`train_supervised`] that calls `stop` after every `check_every` steps
/// (never when 0) and ends early once it returns true. Stopping does not
/// alter the steps already taken.
pub fn train_supervised_until(
    model: &mut LMModel,
    dataset: &[Example],
    hyper: &TrainHyper,
    check_every: usize,
    mut stop: impl FnMut(&LMModel) -> Result<bool>,
) -> Result<Vec<f64>> {
    let usable: Vec<&Example> = dataset.iter().filter(|e| e.targets() > 0).collect();
    if usable.is_empty() {
        return Err(LmError::EmptyDataset("no example has a target position".into()));
    }
    if hyper.batch_size == 0 {
        return Err(LmError::InvalidConfig("batch_size must be positive".into()));
    }
    let root = RngStream::new(hyper.rng_seed).split_named("train_supervised");
    let mut sampler = BatchSampler::new(usable.len(), root.split_named("batches"));
    let drop_root = root.split_named("dropout");
    let mut adam = Adam::new(hyper.lr);
    let mut curve = Vec::with_capacity(hyper.steps);
    model.zero_grads();
    for step in 0..hyper.steps {
        let batch: Vec<&Example> = sampler.next_batch(hyper.batch_size).into_iter().map(|i| usable[i]).collect();
        let count: usize = batch.iter().map(|e| e.targets()).sum();
        let scale = 1.0 / count as f64;
        let step_rng = drop_root.split(step as u64);
        let use_dropout = model.config().dropout > 0.0;
        let frozen: &LMModel = model;
        let indexed: Vec<(usize, &Example)> = batch.iter().copied().enumerate().collect();
        let parts = par::map(&indexed, |&(k, ex)| {
            let rng = use_dropout.then(|| step_rng.split(k as u64));
            example_grad(frozen, ex, scale, rng)
        });
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(parts.len());
        for p in parts {
            let (l, g) = p.map_err(|e| match e {
                LmError::Tensor(_) => LmError::Divergence { step, detail: e.to_string() },
                other => other,
            })?;
            loss += l;
            grads.push(g);
        }
        if !loss.is_finite() {
            return Err(LmError::Divergence {
                step,
                detail: format!("loss {loss}"),
            });
        }
        model.add_flat_grads(&par::sum_in_order(&grads));
        clip_grad_norm(model.params_mut(), hyper.clip_norm);
        adam.step(model.params_mut())?;
        curve.push(loss);
        if check_every > 0 && (step + 1) % check_every == 0 && stop(model)? {
            break;
        }
    }
    Ok(curve)
}
