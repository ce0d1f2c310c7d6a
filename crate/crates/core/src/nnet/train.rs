use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, SubwordModel};
use crate::error::{Error, Result};
use crate::par;
use crate::util::{derive_seed, rng_for};

use super::model::{add_into, Batch, Seq2SeqModel};
use super::optim::{lr_at, Adam, AdamConfig};

/// One training example as id sequences (no BOS/EOS).
pub type IdPair = (Vec<u32>, Vec<u32>);

fn default_shard() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub label_smoothing: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Upper bound on padded tokens per batch.
    pub batch_tokens: usize,
    pub max_steps: u64,
    pub eval_interval: u64,
    pub seed: u64,
    /// Parameter-name patterns (exact or `prefix*`) excluded from updates.
    #[serde(default)]
    pub freeze: Vec<String>,
    /// Stop after this many evaluations without dev improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Sentences per gradient shard; shards are processed in parallel.
    #[serde(default = "default_shard")]
    pub shard_sentences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 7e-4,
            warmup_steps: 4000,
            label_smoothing: 0.1,
            adam: AdamConfig::default(),
            batch_tokens: 4096,
            max_steps: 1000,
            eval_interval: 200,
            seed: 1,
            freeze: Vec::new(),
            patience: None,
            shard_sentences: default_shard(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training config: {m}")));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if self.batch_tokens == 0 || self.eval_interval == 0 || self.shard_sentences == 0 {
            return bad("batch_tokens, eval_interval and shard_sentences must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub train_loss: Option<f64>,
    pub dev_perplexity: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best dev evaluation.
    pub model: Seq2SeqModel,
    pub optimizer: Adam,
    pub best_step: u64,
    pub best_dev_perplexity: f64,
    pub steps_run: u64,
    pub history: Vec<EvalPoint>,
    /// Pairs dropped because they exceed `max_positions`.
    pub skipped: usize,
}

/// Segments and maps every pair of a corpus to ids.
pub fn encode_pairs(corpus: &ParallelCorpus, subword: &SubwordModel) -> Vec<IdPair> {
    par::map(&corpus.pairs, |p| (subword.encode(&p.source), subword.encode(&p.target)))
}

fn width(p: &IdPair) -> usize {
    p.0.len().max(p.1.len()) + 1
}

/// Greedy length-bucketed batches over `order`, bounded by `batch_tokens`
/// padded tokens (a single over-long pair still forms its own batch).
pub fn make_batches(data: &[IdPair], order: &[usize], batch_tokens: usize) -> Vec<Vec<usize>> {
    let mut sorted = order.to_vec();
    sorted.sort_by_key(|&i| width(&data[i]));
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_w = 0;
    for i in sorted {
        let w = cur_w.max(width(&data[i]));
        if !cur.is_empty() && (cur.len() + 1) * w > batch_tokens {
            batches.push(std::mem::take(&mut cur));
            cur_w = 0;
        }
        cur_w = cur_w.max(width(&data[i]));
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

fn batch_of<'a>(data: &'a [IdPair], idx: &[usize]) -> Batch {
    let pairs: Vec<(&'a [u32], &'a [u32])> = idx.iter().map(|&i| (&data[i].0[..], &data[i].1[..])).collect();
    Batch::new(&pairs)
}

/// `exp(mean NLL)` per target token (EOS included), dropout off, no smoothing.
pub fn perplexity(model: &Seq2SeqModel, data: &[IdPair], batch_tokens: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("perplexity of an empty corpus".into()));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let batches = make_batches(data, &order, batch_tokens);
    let sums = par::map(&batches, |b| model.pass(&batch_of(data, b), 0.0, None, None));
    let (mut nll, mut tokens) = (0.0, 0usize);
    for s in sums {
        let s = s?;
        nll += s.nll_sum;
        tokens += s.tokens;
    }
    Ok((nll / tokens as f64).exp())
}

/// Summed gradient over one batch, computed shard by shard.
///
/// Shards run in parallel; their gradients are added in shard order so the
/// result is identical in sequential and parallel mode.
pub fn batch_gradient(
    model: &Seq2SeqModel,
    data: &[IdPair],
    batch: &[usize],
    smoothing: f64,
    shard_sentences: usize,
    dropout_seed: Option<u64>,
) -> Result<(f64, usize, Vec<f64>)> {
    let shards: Vec<&[usize]> = batch.chunks(shard_sentences).collect();
    let results = par::map_indexed(&shards, |si, shard| {
        let mut g = vec![0.0; model.param_count()];
        let seed = dropout_seed.map(|s| derive_seed(s, si as u64));
        model.pass(&batch_of(data, shard), smoothing, seed, Some(&mut g)).map(|s| (s, g))
    });
    let mut total = vec![0.0; model.param_count()];
    let (mut loss, mut tokens) = (0.0, 0);
    for r in results {
        let (s, g) = r?;
        loss += s.loss_sum;
        tokens += s.tokens;
        add_into(&mut total, &g);
    }
    Ok((loss, tokens, total))
}

/// Trains `model` on `train` and keeps the parameters with the best dev
/// perplexity. Evaluations happen at step 0, every `eval_interval` steps,
/// and after the last step.
pub fn train(mut model: Seq2SeqModel, train: &[IdPair], dev: &[IdPair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let max_len = model.config.max_positions;
    let usable: Vec<usize> = (0..train.len()).filter(|&i| width(&train[i]) <= max_len).collect();
    let skipped = train.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Data("no usable training pairs".into()));
    }
    let dev: Vec<IdPair> = dev.iter().filter(|p| width(p) <= max_len).cloned().collect();
    if dev.is_empty() {
        return Err(Error::Data("no usable dev pairs".into()));
    }
    if skipped > 0 {
        log::warn!("skipping {skipped} training pairs longer than {max_len} positions");
    }

    let frozen = if cfg.freeze.is_empty() { None } else { Some(model.layout().frozen_mask(&cfg.freeze)) };
    let mut adam = Adam::new(cfg.adam, model.param_count());

    let eval_tokens = cfg.batch_tokens.max(1024);
    let ppl0 = perplexity(&model, &dev, eval_tokens)?;
    log::info!("step 0 dev ppl {ppl0:.3}");
    let mut history = vec![EvalPoint { step: 0, train_loss: None, dev_perplexity: ppl0 }];
    let mut best = (0u64, ppl0, model.params.clone(), adam.clone());
    let mut stale = 0usize;

    let mut epoch = 0u64;
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let (mut window_loss, mut window_tokens) = (0.0, 0usize);
    let mut step = 0u64;
    while step < cfg.max_steps {
        if queue.is_empty() {
            let mut order = usable.clone();
            let mut rng = rng_for(cfg.seed, epoch);
            order.shuffle(&mut rng);
            queue = make_batches(train, &order, cfg.batch_tokens);
            queue.shuffle(&mut rng);
            queue.reverse();
            epoch += 1;
        }
        let batch = queue.pop().expect("queue refilled above");
        step += 1;
        let dseed = derive_seed(cfg.seed ^ 0x5eed_d209, step);
        let (loss, tokens, mut g) =
            batch_gradient(&model, train, &batch, cfg.label_smoothing, cfg.shard_sentences, Some(dseed))?;
        let inv = 1.0 / tokens.max(1) as f64;
        g.iter_mut().for_each(|x| *x *= inv);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at step {step}")));
        }
        adam.update(&mut model.params, &g, lr_at(step, cfg.base_lr, cfg.warmup_steps), frozen.as_deref());
        window_loss += loss;
        window_tokens += tokens;

        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            let ppl = perplexity(&model, &dev, eval_tokens)?;
            let train_loss = window_loss / window_tokens.max(1) as f64;
            log::info!("step {step} train loss {train_loss:.4} dev ppl {ppl:.3}");
            history.push(EvalPoint { step, train_loss: Some(train_loss), dev_perplexity: ppl });
            (window_loss, window_tokens) = (0.0, 0);
            if ppl < best.1 {
                best = (step, ppl, model.params.clone(), adam.clone());
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience.is_some_and(|p| stale >= p) {
                    log::info!("early stop at step {step}");
                    break;
                }
            }
        }
    }
    let (best_step, best_ppl, params, optimizer) = best;
    model.params = params;
    Ok(TrainOutcome {
        model,
        optimizer,
        best_step,
        best_dev_perplexity: best_ppl,
        steps_run: step,
        history,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_respect_token_budget() {
        let data: Vec<IdPair> = (0..50).map(|i| (vec![7; i % 9 + 1], vec![8; i % 5 + 1])).collect();
        let order: Vec<usize> = (0..50).collect();
        let batches = make_batches(&data, &order, 30);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, order);
        for b in &batches {
            let w = b.iter().map(|&i| width(&data[i])).max().unwrap();
            assert!(b.len() * w <= 30 || b.len() == 1);
        }
    }
}
