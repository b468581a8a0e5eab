//! Pre-training loop: batching, masking policy, affective-token sampling,
//! AdamW optimization with linear warmup/decay, momentum maintenance, and
//! checkpointing.
//!
//! One step consumes one word-level batch (masked; provides MLM and the
//! word-level contrastive loss) and one sentence-level batch (unmasked;
//! provides the sentence-level contrastive loss). The update discipline per
//! step is: losses -> optimizer step -> momentum update -> enqueue keys.
//!
//! RNG draw order per step is fixed regardless of the lambda weights, so a
//! run with `lambda1 = lambda2 = 0` is exactly MLM-only training on the
//! same batch sequence.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::affect::{TokenizedSentence, ValenceRating, Vocabulary, MASK_ID};
use crate::autodiff::{concat_rows, Tape, Var};
use crate::checkpoint::{
    self, read_named_arrays, write_named_arrays, CheckpointError,
};
use crate::encoder::{EncodedBatch, Encoder, EncoderConfig, EncoderError, EncoderParams};
use crate::losses::{
    loss_combined, loss_mlm, loss_selfsup_cl, loss_soft_cl, loss_supervised_cl, BatchOrigin,
    ContrastiveBatch, LossBreakdown, LossError, Polarity,
};
use crate::momentum::{
    loss_momentum_cl, momentum_update, MomentumError, MomentumQueue, MomentumState,
};
use crate::tensor::{NumericError, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Momentum(#[from] MomentumError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Which contrastive objective the run trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Valence-weighted soft contrastive learning (the full method).
    Soft,
    /// Hard polarity labels thresholded at the scale midpoint.
    Hard,
    /// Label-free contrastive learning over two masked views; ignores the
    /// lexicon entirely (word-level contrastive learning is skipped and
    /// affective masking is disabled).
    SelfSup,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::Soft => "soft",
            LossMode::Hard => "hard",
            LossMode::SelfSup => "selfsup",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "soft" => Ok(LossMode::Soft),
            "hard" => Ok(LossMode::Hard),
            "selfsup" => Ok(LossMode::SelfSup),
            other => Err(format!("unknown loss mode {other:?} (soft|hard|selfsup)")),
        }
    }
}

/// Training hyperparameters. Defaults follow the stock recipe: batch 64,
/// lr 2e-5 with 10% linear warmup then linear decay over 20k steps,
/// tau 0.1, mu 0.9, queue 1024, lambda 0.25/0.25, 15% masking plus 30%
/// affective masking, 256 sampled word-level tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    /// Explicit warmup step count; overrides `warmup_fraction` when set.
    pub warmup_steps: Option<usize>,
    pub total_steps: usize,
    pub tau: f64,
    pub mu: f64,
    pub queue_capacity: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mask_rate: f64,
    /// Extra masking probability for not-yet-masked affective tokens. The
    /// source recipe leaves this ratio unstated; it is a knob here.
    pub affective_mask_rate: f64,
    pub word_cl_sample: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub polarity_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 2e-5,
            warmup_fraction: 0.10,
            warmup_steps: None,
            total_steps: 20_000,
            tau: 0.1,
            mu: 0.9,
            queue_capacity: 1024,
            lambda1: 0.25,
            lambda2: 0.25,
            mask_rate: 0.15,
            affective_mask_rate: 0.30,
            word_cl_sample: 256,
            weight_decay: 0.01,
            seed: 0,
            loss_mode: LossMode::Soft,
            polarity_threshold: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn effective_warmup_steps(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (self.warmup_fraction * self.total_steps as f64).round() as usize)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let check_rate = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(TrainError::Config(format!("{name} {v} outside [0, 1]")))
            }
        };
        check_rate("warmup_fraction", self.warmup_fraction)?;
        check_rate("mu", self.mu)?;
        check_rate("mask_rate", self.mask_rate)?;
        check_rate("affective_mask_rate", self.affective_mask_rate)?;
        if self.tau <= 0.0 {
            return Err(TrainError::Config(format!("tau {} must be positive", self.tau)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(TrainError::Config("lambdas must be non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2".into()));
        }
        if self.word_cl_sample < 2 {
            return Err(TrainError::Config("word_cl_sample must be at least 2".into()));
        }
        if self.total_steps == 0 {
            return Err(TrainError::Config("total_steps must be positive".into()));
        }
        if self.effective_warmup_steps() > self.total_steps {
            return Err(TrainError::Config(format!(
                "warmup steps {} exceed total steps {}",
                self.effective_warmup_steps(),
                self.total_steps
            )));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(TrainError::Config("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Piecewise-linear schedule: 0 -> lr over the warmup steps, then lr -> 0
/// at `total_steps`. `step` is 1-based.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let warmup = cfg.effective_warmup_steps();
    let total = cfg.total_steps;
    let s = step.min(total);
    if warmup > 0 && s <= warmup {
        cfg.lr * s as f64 / warmup as f64
    } else if total > warmup {
        cfg.lr * (total - s) as f64 / (total - warmup) as f64
    } else {
        cfg.lr
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub step: usize,
    pub mlm: f64,
    pub word_mcl: f64,
    pub sent_mcl: f64,
    pub total: f64,
    pub lr: f64,
    pub queue_len: usize,
}

pub const LOG_HEADER: &str = "step,mlm,word_mcl,sent_mcl,total,lr,queue_len";

/// Render records as the training-log CSV (header row, LF endings).
pub fn log_to_csv(records: &[TrainLogRecord]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.mlm, r.word_mcl, r.sent_mcl, r.total, r.lr, r.queue_len
        ));
    }
    out
}

/// One masked token position with its original id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskTarget {
    pub sentence: usize,
    pub position: usize,
    pub original: u32,
}

/// The masked view of a batch plus the recovery targets.
#[derive(Debug, Clone)]
pub struct MaskOutcome {
    pub masked_ids: Vec<Vec<u32>>,
    pub targets: Vec<MaskTarget>,
}

/// Masking policy: first every non-special token is masked independently
/// with `mask_rate`; then every not-yet-masked affective token (valence
/// != 0) with `affective_mask_rate`. Selected positions receive `[MASK]`
/// 80% of the time, a random non-reserved id 10%, and stay unchanged 10%.
pub fn apply_masking(
    batch: &[&TokenizedSentence],
    vocab_size: usize,
    mask_rate: f64,
    affective_mask_rate: f64,
    rng: &mut ChaCha8Rng,
) -> MaskOutcome {
    let mut selected: Vec<Vec<bool>> = batch
        .iter()
        .map(|s| vec![false; s.token_ids.len()])
        .collect();
    for (i, sent) in batch.iter().enumerate() {
        for p in 1..sent.token_ids.len() {
            if rng.gen::<f64>() < mask_rate {
                selected[i][p] = true;
            }
        }
    }
    for (i, sent) in batch.iter().enumerate() {
        for p in 1..sent.token_ids.len() {
            if !selected[i][p]
                && !sent.token_valences[p].is_sentinel()
                && rng.gen::<f64>() < affective_mask_rate
            {
                selected[i][p] = true;
            }
        }
    }
    let mut masked_ids: Vec<Vec<u32>> = batch.iter().map(|s| s.token_ids.clone()).collect();
    let mut targets = Vec::new();
    for (i, sent) in batch.iter().enumerate() {
        for p in 1..sent.token_ids.len() {
            if !selected[i][p] {
                continue;
            }
            let original = sent.token_ids[p];
            let roll: f64 = rng.gen();
            if roll < 0.8 {
                masked_ids[i][p] = MASK_ID;
            } else if roll < 0.9 && vocab_size > 4 {
                masked_ids[i][p] = rng.gen_range(4..vocab_size) as u32;
            } // else keep the original token
            targets.push(MaskTarget {
                sentence: i,
                position: p,
                original,
            });
        }
    }
    MaskOutcome {
        masked_ids,
        targets,
    }
}

/// Uniform sample (without replacement) of up to `k` affective token
/// positions from an encoded batch; positions keep their aligned lexicon
/// valences. `None` when fewer than two affective positions exist.
pub fn sample_affective_tokens<'t>(
    encoded: &EncodedBatch<'t>,
    batch: &[&TokenizedSentence],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<ContrastiveBatch<'t>>, TrainError> {
    let mut positions: Vec<(usize, usize)> = Vec::new();
    for (i, sent) in batch.iter().enumerate() {
        let limit = encoded.lens[i].min(sent.token_ids.len());
        for p in 1..limit {
            if !sent.token_valences[p].is_sentinel() {
                positions.push((i, p));
            }
        }
    }
    if positions.len() < 2 {
        return Ok(None);
    }
    let mut chosen: Vec<(usize, usize)> = if positions.len() > k {
        rand::seq::index::sample(rng, positions.len(), k)
            .into_iter()
            .map(|idx| positions[idx])
            .collect()
    } else {
        positions
    };
    chosen.sort_unstable();
    // Gather rows sentence by sentence to keep the tape small.
    let mut pieces: Vec<Var<'t>> = Vec::new();
    let mut valences: Vec<ValenceRating> = Vec::new();
    let mut i = 0;
    while i < chosen.len() {
        let sent = chosen[i].0;
        let mut rows = Vec::new();
        while i < chosen.len() && chosen[i].0 == sent {
            rows.push(chosen[i].1);
            valences.push(batch[sent].token_valences[chosen[i].1]);
            i += 1;
        }
        pieces.push(encoded.sentences[sent].gather_rows(&rows)?);
    }
    let reps = concat_rows(&pieces)?;
    Ok(Some(ContrastiveBatch::new(
        reps,
        &valences,
        BatchOrigin::WordLevel,
    )?))
}

/// Everything mutable a training run owns.
pub struct Trainer {
    encoder: Encoder,
    cfg: TrainConfig,
    vocab: Vocabulary,
    word_corpus: Vec<TokenizedSentence>,
    sent_corpus: Vec<TokenizedSentence>,
    sent_labeled: Vec<usize>,
    params: EncoderParams,
    momentum: MomentumState,
    queue: MomentumQueue,
    opt: AdamW,
    step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(
        encoder_cfg: EncoderConfig,
        cfg: TrainConfig,
        vocab: Vocabulary,
        word_corpus: Vec<TokenizedSentence>,
        sent_corpus: Vec<TokenizedSentence>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let encoder = Encoder::new(encoder_cfg)?;
        if encoder.config().vocab_size != vocab.len() {
            return Err(TrainError::Config(format!(
                "encoder vocab_size {} does not match vocabulary of {}",
                encoder.config().vocab_size,
                vocab.len()
            )));
        }
        let params = encoder.init_params();
        let momentum = MomentumState::init(&params, cfg.mu)?;
        let queue = MomentumQueue::new(cfg.queue_capacity, encoder.config().hidden_dim);
        let opt = AdamW::new(cfg.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let trainer = Trainer {
            encoder,
            cfg,
            vocab,
            word_corpus,
            sent_corpus,
            sent_labeled: Vec::new(),
            params,
            momentum,
            queue,
            opt,
            step: 0,
            rng,
        };
        trainer.validated()
    }

    fn validated(mut self) -> Result<Self, TrainError> {
        if self.word_corpus.is_empty() {
            return Err(TrainError::Data("word corpus is empty".into()));
        }
        if self.sent_corpus.is_empty() {
            return Err(TrainError::Data("sentence corpus is empty".into()));
        }
        self.sent_labeled = (0..self.sent_corpus.len())
            .filter(|&i| !self.sent_corpus[i].token_valences[0].is_sentinel())
            .collect();
        match self.cfg.loss_mode {
            LossMode::SelfSup => {}
            _ => {
                if self.sent_labeled.len() < 2 {
                    return Err(TrainError::Data(
                        "sentence corpus has fewer than two valence-labeled sentences".into(),
                    ));
                }
            }
        }
        Ok(self)
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn momentum_params(&self) -> &EncoderParams {
        &self.momentum.params
    }

    pub fn queue(&self) -> &MomentumQueue {
        &self.queue
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Run until the step counter reaches `until_step`, invoking `sink`
    /// after every step.
    pub fn run(
        &mut self,
        until_step: usize,
        mut sink: impl FnMut(&TrainLogRecord),
    ) -> Result<Vec<TrainLogRecord>, TrainError> {
        let mut records = Vec::new();
        while self.step < until_step {
            let record = self.train_step()?;
            sink(&record);
            records.push(record);
        }
        Ok(records)
    }

    fn sample_indices(&mut self, pool: usize, k: usize) -> Vec<usize> {
        let k = k.min(pool);
        if k == pool {
            (0..pool).collect()
        } else {
            let mut v: Vec<usize> = rand::seq::index::sample(&mut self.rng, pool, k).into_vec();
            v.sort_unstable();
            v
        }
    }

    /// One full training step.
    pub fn train_step(&mut self) -> Result<TrainLogRecord, TrainError> {
        self.step += 1;
        let step = self.step;
        let lr = lr_at(&self.cfg, step);

        // One rng, strictly sequential draws: word batch, word masks, word
        // encode (dropout), affective sample, sentence batch, then
        // mode-specific masking/encoding. The order never depends on the
        // lambda weights.
        let word_idx = self.sample_indices(self.word_corpus.len(), self.cfg.batch_size);
        let word_batch: Vec<&TokenizedSentence> =
            word_idx.iter().map(|&i| &self.word_corpus[i]).collect();
        let affective_rate = match self.cfg.loss_mode {
            LossMode::SelfSup => 0.0,
            _ => self.cfg.affective_mask_rate,
        };
        let masked = apply_masking(
            &word_batch,
            self.vocab.len(),
            self.cfg.mask_rate,
            affective_rate,
            &mut self.rng,
        );

        let tape = Tape::new();
        let pvars = self.params.register(&tape);

        // Word level: MLM plus (mode-dependent) token contrastive loss on
        // the shared masked-input encoding.
        let enc_word =
            self.encoder
                .encode_train(&tape, &pvars, &masked.masked_ids, &mut self.rng)?;
        let mlm_var = if masked.targets.is_empty() {
            eprintln!("warning: step {step}: no masked positions; MLM contributes 0");
            tape.scalar_const(0.0)
        } else {
            let positions: Vec<(usize, usize)> = masked
                .targets
                .iter()
                .map(|t| (t.sentence, t.position))
                .collect();
            let target_ids: Vec<u32> = masked.targets.iter().map(|t| t.original).collect();
            let logits = self.encoder.mlm_logits(&pvars, &enc_word, &positions)?;
            loss_mlm(logits, &target_ids)?
        };

        let word_sample = sample_affective_tokens(
            &enc_word,
            &word_batch,
            self.cfg.word_cl_sample,
            &mut self.rng,
        )?;
        let word_var: Var<'_> = match (self.cfg.loss_mode, &word_sample) {
            (LossMode::SelfSup, _) | (_, None) => {
                if self.cfg.loss_mode != LossMode::SelfSup && self.cfg.lambda1 > 0.0 {
                    eprintln!(
                        "warning: step {step}: fewer than two affective tokens; word loss skipped"
                    );
                }
                tape.scalar_const(0.0)
            }
            (_, Some(_)) if self.cfg.lambda1 == 0.0 => tape.scalar_const(0.0),
            (LossMode::Soft, Some(batch)) => loss_soft_cl(batch, self.cfg.tau)?,
            (LossMode::Hard, Some(batch)) => {
                let labels: Vec<Polarity> = batch
                    .valences
                    .iter()
                    .map(|&v| Polarity::from_valence(v, self.cfg.polarity_threshold))
                    .collect();
                match loss_supervised_cl(batch.reps, &labels, self.cfg.tau) {
                    Ok(v) => v,
                    Err(LossError::DegenerateBatch(_)) => {
                        eprintln!("warning: step {step}: degenerate hard word batch");
                        tape.scalar_const(0.0)
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };

        // Sentence level.
        let sent_idx: Vec<usize> = if self.sent_labeled.len() >= 2 {
            self.sample_indices(self.sent_labeled.len(), self.cfg.batch_size)
                .into_iter()
                .map(|i| self.sent_labeled[i])
                .collect()
        } else {
            self.sample_indices(self.sent_corpus.len(), self.cfg.batch_size)
        };
        let sent_batch: Vec<&TokenizedSentence> =
            sent_idx.iter().map(|&i| &self.sent_corpus[i]).collect();
        let sent_ids: Vec<Vec<u32>> = sent_batch.iter().map(|s| s.token_ids.clone()).collect();

        let sent_var: Var<'_> = match self.cfg.loss_mode {
            LossMode::Soft if self.cfg.lambda2 > 0.0 => {
                let enc_sent =
                    self.encoder
                        .encode_train(&tape, &pvars, &sent_ids, &mut self.rng)?;
                let valences: Vec<ValenceRating> =
                    sent_batch.iter().map(|s| s.token_valences[0]).collect();
                let batch =
                    ContrastiveBatch::new(enc_sent.cls, &valences, BatchOrigin::SentenceLevel)?;
                loss_momentum_cl(&batch, &self.queue, self.cfg.tau)?
            }
            LossMode::Hard if self.cfg.lambda2 > 0.0 => {
                let enc_sent =
                    self.encoder
                        .encode_train(&tape, &pvars, &sent_ids, &mut self.rng)?;
                let labels: Vec<Polarity> = sent_batch
                    .iter()
                    .map(|s| {
                        Polarity::from_valence(
                            s.token_valences[0].value(),
                            self.cfg.polarity_threshold,
                        )
                    })
                    .collect();
                match loss_supervised_cl(enc_sent.cls, &labels, self.cfg.tau) {
                    Ok(v) => v,
                    Err(LossError::DegenerateBatch(_)) => {
                        eprintln!("warning: step {step}: degenerate hard sentence batch");
                        tape.scalar_const(0.0)
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            LossMode::SelfSup => {
                // Two independently masked views of the same sentences.
                let view_a = apply_masking(
                    &sent_batch,
                    self.vocab.len(),
                    self.cfg.mask_rate,
                    0.0,
                    &mut self.rng,
                );
                let view_b = apply_masking(
                    &sent_batch,
                    self.vocab.len(),
                    self.cfg.mask_rate,
                    0.0,
                    &mut self.rng,
                );
                if self.cfg.lambda2 > 0.0 {
                    let enc_a = self.encoder.encode_train(
                        &tape,
                        &pvars,
                        &view_a.masked_ids,
                        &mut self.rng,
                    )?;
                    let enc_b = self.encoder.encode_train(
                        &tape,
                        &pvars,
                        &view_b.masked_ids,
                        &mut self.rng,
                    )?;
                    loss_selfsup_cl(enc_a.cls, enc_b.cls, self.cfg.tau)?
                } else {
                    tape.scalar_const(0.0)
                }
            }
            _ => tape.scalar_const(0.0),
        };

        let mlm_val = mlm_var.item()?;
        let word_val = word_var.item()?;
        let sent_val = sent_var.item()?;
        let breakdown: LossBreakdown = loss_combined(
            mlm_val,
            word_val,
            sent_val,
            self.cfg.lambda1,
            self.cfg.lambda2,
        )
        .map_err(|e| TrainError::NonFiniteLoss {
            step,
            detail: format!(
                "{e}; word batch {word_idx:?}, sentence batch {sent_idx:?}"
            ),
        })?;

        let total_var = mlm_var
            .add(word_var.scale(self.cfg.lambda1)?)?
            .add(sent_var.scale(self.cfg.lambda2)?)?;
        if !breakdown.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                detail: format!(
                    "total={}; word batch {word_idx:?}, sentence batch {sent_idx:?}",
                    breakdown.total
                ),
            });
        }

        let grads = tape.backward(total_var)?;
        let named_grads: BTreeMap<String, Tensor> = pvars
            .iter()
            .map(|(name, var)| (name.clone(), grads.wrt(*var)))
            .collect();
        self.opt.step(&mut self.params, &named_grads, lr)?;

        momentum_update(&mut self.momentum, &self.params)?;

        if self.cfg.queue_capacity > 0 && self.cfg.loss_mode == LossMode::Soft {
            let key_tape = Tape::new();
            let mvars = self.momentum.params.register_const(&key_tape);
            let ids: Vec<Vec<u32>> = sent_batch.iter().map(|s| s.token_ids.clone()).collect();
            let keys = self.encoder.encode(&key_tape, &mvars, &ids)?;
            let normalized = keys.cls.l2_normalize_rows()?.value();
            let valences: Vec<ValenceRating> =
                sent_batch.iter().map(|s| s.token_valences[0]).collect();
            self.queue.enqueue(&normalized, &valences)?;
        }

        Ok(TrainLogRecord {
            step,
            mlm: breakdown.mlm,
            word_mcl: breakdown.word_mcl,
            sent_mcl: breakdown.sent_mcl,
            total: breakdown.total,
            lr,
            queue_len: self.queue.len(),
        })
    }

    /// Persist the full mutable state as named arrays.
    pub fn save_checkpoint(&self, path: impl AsRef<std::path::Path>) -> Result<(), TrainError> {
        let mut arrays = BTreeMap::new();
        for (name, t) in self.params.iter() {
            arrays.insert(format!("params/{name}"), t.clone());
        }
        for (name, t) in self.momentum.params.iter() {
            arrays.insert(format!("momentum/{name}"), t.clone());
        }
        let (m, v) = self.opt.moments(&self.params);
        for (name, t) in m {
            arrays.insert(format!("opt/m/{name}"), t);
        }
        for (name, t) in v {
            arrays.insert(format!("opt/v/{name}"), t);
        }
        arrays.insert("opt/t".into(), checkpoint::usize_to_tensor(self.opt.t));
        let dim = self.encoder.config().hidden_dim;
        let (q_reps, q_vals) = match self.queue.as_batch() {
            Some((reps, vals)) => (reps, vals),
            None => (Tensor::zeros(vec![0, dim]), Vec::new()),
        };
        arrays.insert("queue/reps".into(), q_reps);
        arrays.insert(
            "queue/valences".into(),
            Tensor::new(vec![q_vals.len()], q_vals)?,
        );
        arrays.insert("trainer/step".into(), checkpoint::usize_to_tensor(self.step));
        arrays.insert(
            "trainer/rng/seed".into(),
            checkpoint::bytes_to_tensor(&self.rng.get_seed()),
        );
        arrays.insert(
            "trainer/rng/word_pos".into(),
            checkpoint::u128_to_tensor(self.rng.get_word_pos()),
        );
        arrays.insert(
            "meta/vocab_hash".into(),
            checkpoint::u64_to_tensor(self.vocab.hash()),
        );
        let cfg = self.encoder.config();
        for (key, value) in [
            ("meta/encoder/vocab_size", cfg.vocab_size),
            ("meta/encoder/hidden_dim", cfg.hidden_dim),
            ("meta/encoder/n_layers", cfg.n_layers),
            ("meta/encoder/n_heads", cfg.n_heads),
            ("meta/encoder/ffn_dim", cfg.ffn_dim),
            ("meta/encoder/max_len", cfg.max_len),
        ] {
            arrays.insert(key.into(), checkpoint::usize_to_tensor(value));
        }
        arrays.insert("meta/encoder/dropout".into(), Tensor::scalar(cfg.dropout));
        arrays.insert(
            "meta/encoder/seed".into(),
            checkpoint::u64_to_tensor(cfg.seed),
        );
        write_named_arrays(path, &arrays)?;
        Ok(())
    }

    /// Restore a run from a checkpoint; training resumed from here matches
    /// the uninterrupted run record-for-record.
    pub fn resume(
        path: impl AsRef<std::path::Path>,
        cfg: TrainConfig,
        vocab: Vocabulary,
        word_corpus: Vec<TokenizedSentence>,
        sent_corpus: Vec<TokenizedSentence>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let arrays = read_named_arrays(path)?;
        let get = |name: &str| {
            arrays
                .get(name)
                .ok_or_else(|| CheckpointError::MissingArray(name.to_string()))
        };
        let stored_hash = checkpoint::tensor_to_u64(get("meta/vocab_hash")?)?;
        if stored_hash != vocab.hash() {
            return Err(TrainError::Incompatible(
                "vocabulary hash does not match checkpoint".into(),
            ));
        }
        let encoder_cfg = encoder_config_from_arrays(&arrays)?;
        let encoder = Encoder::new(encoder_cfg)?;

        let mut params = BTreeMap::new();
        let mut momentum_params = BTreeMap::new();
        let mut opt_m = BTreeMap::new();
        let mut opt_v = BTreeMap::new();
        for (name, tensor) in &arrays {
            if let Some(rest) = name.strip_prefix("params/") {
                params.insert(rest.to_string(), tensor.clone());
            } else if let Some(rest) = name.strip_prefix("momentum/") {
                momentum_params.insert(rest.to_string(), tensor.clone());
            } else if let Some(rest) = name.strip_prefix("opt/m/") {
                opt_m.insert(rest.to_string(), tensor.clone());
            } else if let Some(rest) = name.strip_prefix("opt/v/") {
                opt_v.insert(rest.to_string(), tensor.clone());
            }
        }
        let params = EncoderParams::from_tensors(params);
        let reference = encoder.init_params();
        if params.len() != reference.len() {
            return Err(TrainError::Incompatible(format!(
                "checkpoint has {} parameter tensors, encoder expects {}",
                params.len(),
                reference.len()
            )));
        }
        let momentum = MomentumState {
            params: EncoderParams::from_tensors(momentum_params),
            mu: cfg.mu,
        };

        let q_reps = get("queue/reps")?.clone();
        let q_vals = get("queue/valences")?.clone();
        let mut queue_rows = Vec::new();
        for r in 0..q_reps.rows()? {
            queue_rows.push((q_reps.row(r)?.to_vec(), q_vals.data()[r]));
        }
        let queue = MomentumQueue::from_parts(
            cfg.queue_capacity,
            encoder.config().hidden_dim,
            queue_rows,
        )?;

        let seed_bytes = checkpoint::tensor_to_bytes(get("trainer/rng/seed")?)?;
        let seed: [u8; 32] = seed_bytes
            .try_into()
            .map_err(|_| CheckpointError::Corrupt("rng seed must be 32 bytes"))?;
        let word_pos = checkpoint::tensor_to_u128(get("trainer/rng/word_pos")?)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(word_pos);

        let opt = AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            m: opt_m,
            v: opt_v,
            t: checkpoint::tensor_to_usize(get("opt/t")?)?,
        };
        let step = checkpoint::tensor_to_usize(get("trainer/step")?)?;

        let trainer = Trainer {
            encoder,
            cfg,
            vocab,
            word_corpus,
            sent_corpus,
            sent_labeled: Vec::new(),
            params,
            momentum,
            queue,
            opt,
            step,
            rng,
        };
        trainer.validated()
    }
}

fn encoder_config_from_arrays(
    arrays: &BTreeMap<String, Tensor>,
) -> Result<EncoderConfig, TrainError> {
    let get = |name: &str| {
        arrays
            .get(name)
            .ok_or_else(|| CheckpointError::MissingArray(name.to_string()))
    };
    Ok(EncoderConfig {
        vocab_size: checkpoint::tensor_to_usize(get("meta/encoder/vocab_size")?)?,
        hidden_dim: checkpoint::tensor_to_usize(get("meta/encoder/hidden_dim")?)?,
        n_layers: checkpoint::tensor_to_usize(get("meta/encoder/n_layers")?)?,
        n_heads: checkpoint::tensor_to_usize(get("meta/encoder/n_heads")?)?,
        ffn_dim: checkpoint::tensor_to_usize(get("meta/encoder/ffn_dim")?)?,
        max_len: checkpoint::tensor_to_usize(get("meta/encoder/max_len")?)?,
        dropout: get("meta/encoder/dropout")?
            .item()
            .map_err(|_| CheckpointError::Corrupt("dropout scalar"))?,
        seed: checkpoint::tensor_to_u64(get("meta/encoder/seed")?)?,
    })
}

/// Reconstruct an encoder and its parameters from a checkpoint, without
/// training state (for evaluation and embedding export).
pub fn load_encoder_from_checkpoint(
    path: impl AsRef<std::path::Path>,
) -> Result<(Encoder, EncoderParams, u64), TrainError> {
    let arrays = read_named_arrays(path)?;
    let encoder = Encoder::new(encoder_config_from_arrays(&arrays)?)?;
    let mut params = BTreeMap::new();
    for (name, tensor) in &arrays {
        if let Some(rest) = name.strip_prefix("params/") {
            params.insert(rest.to_string(), tensor.clone());
        }
    }
    let vocab_hash = checkpoint::tensor_to_u64(
        arrays
            .get("meta/vocab_hash")
            .ok_or_else(|| CheckpointError::MissingArray("meta/vocab_hash".into()))?,
    )?;
    Ok((encoder, EncoderParams::from_tensors(params), vocab_hash))
}

/// AdamW with decoupled weight decay.
struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: usize,
}

impl AdamW {
    fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    fn step(
        &mut self,
        params: &mut EncoderParams,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<(), TrainError> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, param) in params.iter_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| TrainError::Config(format!("missing gradient for {name}")))?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            for ((p, g), (m_i, v_i)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *m_i = self.beta1 * *m_i + (1.0 - self.beta1) * g;
                *v_i = self.beta2 * *v_i + (1.0 - self.beta2) * g * g;
                let m_hat = *m_i / bc1;
                let v_hat = *v_i / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
        Ok(())
    }

    /// Moment tensors (zeros where a parameter has not been touched yet).
    fn moments(
        &self,
        params: &EncoderParams,
    ) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, p) in params.iter() {
            m.insert(
                name.clone(),
                self.m
                    .get(name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())),
            );
            v.insert(
                name.clone(),
                self.v
                    .get(name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())),
            );
        }
        (m, v)
    }
}

#[cfg(test)]
impl Trainer {
    pub(crate) fn momentum_params_mut(&mut self) -> &mut EncoderParams {
        &mut self.momentum.params
    }
}
