use super::{Episode, Result, RolloutBatch, ValueHead};
use crate::corpus::{encode_turns, Prompt, Special, Vocab};
use crate::lm::{generate_with, GenerationConfig, LMModel};
use crate::par;
use crate::rng::RngStream;
use crate::tensor::Tape;

/// One episode to roll out: a token prefix and an optional turn budget.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRequest {
    pub source_id: String,
    pub prefix: Vec<u32>,
    pub max_turns: Option<usize>,
}

/// `BOS` + the three prompt turns; generation stops once the source
/// conversation's turn count is reached.
pub fn rollout_requests(prompts: &[Prompt], vocab: &Vocab) -> Vec<RolloutRequest> {
    prompts
        .iter()
        .map(|p| {
            let mut prefix = vec![Special::Bos.id()];
            prefix.extend(encode_turns(&p.turns, vocab));
            RolloutRequest {
                source_id: p.source_conversation_id.clone(),
                prefix,
                max_turns: Some(p.target_turn_count),
            }
        })
        .collect()
}

/// Policy log-probabilities and value predictions of `generated` after
/// `prefix`, from one eval-mode pass.
pub(crate) fn score_episode(generator: &LMModel, value_head: &ValueHead, prefix: &[u32], generated: &[u32]) -> Result<(Vec<f64>, Vec<f64>)> {
    if generated.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut ids = prefix.to_vec();
    ids.extend(generated);
    let p = prefix.len();
    let mut tape = Tape::new();
    let fv = generator.forward_tape(&mut tape, &ids[..ids.len() - 1], None)?;
    let rows: Vec<usize> = (p - 1..ids.len() - 1).collect();
    let picked = tape.gather_rows(fv.logits, &rows)?;
    let lp = tape.log_softmax_gather(picked, generated)?;
    let d = generator.config().d_model;
    let hidden = tape.value(fv.hidden);
    let values = rows.iter().map(|&r| value_head.predict(&hidden[r * d..(r + 1) * d])).collect();
    Ok((tape.value(lp).to_vec(), values))
}

/// Samples one episode per request. Episode `k` draws from `rng.split(k)`,
/// so results do not depend on scheduling.
pub fn rollouts_from_requests(
    generator: &LMModel,
    value_head: &ValueHead,
    reference: &LMModel,
    requests: &[RolloutRequest],
    gen: &GenerationConfig,
    rng: &RngStream,
) -> Result<RolloutBatch> {
    let indexed: Vec<(usize, &RolloutRequest)> = requests.iter().enumerate().collect();
    let episodes = par::map(&indexed, |&(k, req)| -> Result<Episode> {
        let mut stream = rng.split(k as u64);
        let cfg = GenerationConfig {
            max_turns: req.max_turns,
            ..gen.clone()
        };
        let out = generate_with(generator, &req.prefix, &cfg, &mut stream)?;
        let generated = out.generated().to_vec();
        let (mut old, values) = score_episode(generator, value_head, &req.prefix, &generated)?;
        let mut reference_lp = if generated.is_empty() {
            Vec::new()
        } else {
            reference.logprob_of(&out.ids, req.prefix.len())?
        };
        for (t, &f) in out.forced.iter().enumerate() {
            if f {
                old[t] = 0.0;
                reference_lp[t] = 0.0;
            }
        }
        let n = generated.len();
        Ok(Episode {
            source_prompt_id: req.source_id.clone(),
            prompt: req.prefix.clone(),
            generated,
            old_logprobs: old,
            ref_logprobs: reference_lp,
            forced: out.forced,
            values,
            terminal_reward: 0.0,
            rewards: vec![0.0; n],
            advantages: vec![0.0; n],
            returns: vec![0.0; n],
        })
    });
    Ok(RolloutBatch {
        episodes: episodes.into_iter().collect::<Result<_>>()?,
    })
}

/// Self-play continuation of every prompt.
pub fn collect_rollouts(
    generator: &LMModel,
    value_head: &ValueHead,
    reference: &LMModel,
    prompts: &[Prompt],
    vocab: &Vocab,
    gen: &GenerationConfig,
    rng: &RngStream,
) -> Result<RolloutBatch> {
    rollouts_from_requests(generator, value_head, reference, &rollout_requests(prompts, vocab), gen, rng)
}
