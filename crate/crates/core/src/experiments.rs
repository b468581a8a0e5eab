//! Reproducible experiment drivers: data preparation, single pre-training
//! runs, frozen-embedding evaluation, parameter sweeps, and the
//! loss-strategy comparison. The command-line interface and the acceptance
//! suite both run through these entry points.

use rayon::prelude::*;
use thiserror::Error;

use crate::affect::{
    build_vocabulary, tokenize, AffectError, AnnotatedSentence, Lexicon, TokenizedSentence,
    Vocabulary,
};
use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::encoder::{Encoder, EncoderParams};
use crate::metrics::{
    collapse_diagnostics, valence_probe, CollapseDiagnostics, MetricReport, MetricsError,
};
use crate::tensor::Tensor;
use crate::trainer::{LossMode, TrainError, TrainLogRecord, Trainer};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Affect(#[from] AffectError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("experiment setup: {0}")]
    Setup(String),
}

/// Tokenized corpora plus the vocabulary they were tokenized against.
#[derive(Debug, Clone)]
pub struct RunData {
    pub vocab: Vocabulary,
    pub word_tokens: Vec<TokenizedSentence>,
    pub sent_tokens: Vec<TokenizedSentence>,
}

/// Build the vocabulary over both corpora and tokenize them with the given
/// lexicon (which may be empty, e.g. for label-free runs).
pub fn prepare_data(
    lexicon: &Lexicon,
    word_corpus: &[AnnotatedSentence],
    sent_corpus: &[AnnotatedSentence],
    cfg: &RunConfig,
) -> Result<RunData, ExperimentError> {
    let mut combined: Vec<AnnotatedSentence> = Vec::new();
    combined.extend_from_slice(word_corpus);
    combined.extend_from_slice(sent_corpus);
    let vocab = build_vocabulary(&combined, cfg.min_count)?;
    let word_tokens = word_corpus
        .iter()
        .map(|s| tokenize(s, &vocab, lexicon, cfg.max_len))
        .collect();
    let sent_tokens = sent_corpus
        .iter()
        .map(|s| tokenize(s, &vocab, lexicon, cfg.max_len))
        .collect();
    Ok(RunData {
        vocab,
        word_tokens,
        sent_tokens,
    })
}

/// A finished training run.
pub struct RunOutput {
    pub records: Vec<TrainLogRecord>,
    pub trainer: Trainer,
}

/// Train a fresh run for `steps` steps. The learning-rate schedule still
/// spans `total_steps`, so partial runs see the schedule's early phase.
pub fn run_pretrain(
    cfg: &RunConfig,
    data: &RunData,
    steps: usize,
) -> Result<RunOutput, ExperimentError> {
    let mut trainer = Trainer::new(
        cfg.encoder_config(data.vocab.len()),
        cfg.train.clone(),
        data.vocab.clone(),
        data.word_tokens.clone(),
        data.sent_tokens.clone(),
    )?;
    let records = trainer.run(steps, |_| {})?;
    Ok(RunOutput { records, trainer })
}

/// Frozen-embedding evaluation of the labeled sentence corpus: ridge probe
/// metrics plus collapse diagnostics over the CLS embeddings.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub probe: Vec<MetricReport>,
    pub diagnostics: CollapseDiagnostics,
    pub n: usize,
}

impl EvalSummary {
    pub fn probe_value(&self, metric: &str) -> Option<f64> {
        self.probe
            .iter()
            .find(|r| r.metric == metric)
            .map(|r| r.value)
    }
}

/// Embed every valence-labeled sentence (evaluation mode, batched) and
/// return the CLS matrix with aligned valences.
pub fn sentence_embeddings(
    encoder: &Encoder,
    params: &EncoderParams,
    sent_tokens: &[TokenizedSentence],
) -> Result<(Tensor, Vec<f64>), ExperimentError> {
    let labeled: Vec<&TokenizedSentence> = sent_tokens
        .iter()
        .filter(|s| !s.token_valences[0].is_sentinel())
        .collect();
    if labeled.is_empty() {
        return Err(ExperimentError::Setup(
            "no valence-labeled sentences to embed".into(),
        ));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(labeled.len());
    let mut valences = Vec::with_capacity(labeled.len());
    for chunk in labeled.chunks(64) {
        let tape = Tape::new();
        let pvars = params.register_const(&tape);
        let ids: Vec<Vec<u32>> = chunk.iter().map(|s| s.token_ids.clone()).collect();
        let encoded = encoder
            .encode(&tape, &pvars, &ids)
            .map_err(TrainError::from)?;
        let cls = encoded.cls.value();
        for (i, sent) in chunk.iter().enumerate() {
            rows.push(cls.row(i).map_err(TrainError::from)?.to_vec());
            valences.push(sent.token_valences[0].value());
        }
    }
    let matrix = Tensor::from_rows(&rows).map_err(TrainError::from)?;
    Ok((matrix, valences))
}

pub fn evaluate(
    encoder: &Encoder,
    params: &EncoderParams,
    sent_tokens: &[TokenizedSentence],
) -> Result<EvalSummary, ExperimentError> {
    let (embeddings, valences) = sentence_embeddings(encoder, params, sent_tokens)?;
    let probe = valence_probe(&embeddings, &valences)?;
    let diagnostics = collapse_diagnostics(&embeddings, &valences)?;
    Ok(EvalSummary {
        probe,
        diagnostics,
        n: valences.len(),
    })
}

/// Which hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Tau,
    Mu,
    Queue,
    Lambda,
}

impl SweepParam {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::Mu => "mu",
            SweepParam::Queue => "queue",
            SweepParam::Lambda => "lambda",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tau" => Ok(SweepParam::Tau),
            "mu" => Ok(SweepParam::Mu),
            "queue" => Ok(SweepParam::Queue),
            "lambda" => Ok(SweepParam::Lambda),
            other => Err(format!("unknown sweep parameter {other:?} (tau|mu|queue|lambda)")),
        }
    }
}

/// One `param,value,metric,score` row of a sweep result.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub metric: String,
    pub score: f64,
}

pub fn sweep_rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("param,value,metric,score\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.param, r.value, r.metric, r.score));
    }
    out
}

fn apply_sweep_value(cfg: &mut RunConfig, param: SweepParam, value: f64) -> Result<(), ExperimentError> {
    match param {
        SweepParam::Tau => cfg.train.tau = value,
        SweepParam::Mu => cfg.train.mu = value,
        SweepParam::Lambda => {
            cfg.train.lambda1 = value;
            cfg.train.lambda2 = value;
        }
        SweepParam::Queue => {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(ExperimentError::Setup(format!(
                    "queue size must be a non-negative integer, got {value}"
                )));
            }
            cfg.train.queue_capacity = value as usize;
        }
    }
    Ok(())
}

/// One sweep sub-run's full outcome.
pub struct SweepRun {
    pub value: f64,
    pub records: Vec<TrainLogRecord>,
    pub summary: EvalSummary,
}

/// Train one sub-run per value (all sharing the seed) and evaluate each.
/// Sub-runs execute in parallel on the current rayon pool.
pub fn sweep(
    cfg: &RunConfig,
    data: &RunData,
    param: SweepParam,
    values: &[f64],
    steps: usize,
) -> Result<Vec<SweepRun>, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::Setup("empty sweep value list".into()));
    }
    values
        .par_iter()
        .map(|&value| {
            let mut sub_cfg = cfg.clone();
            apply_sweep_value(&mut sub_cfg, param, value)?;
            let out = run_pretrain(&sub_cfg, data, steps)?;
            let summary = evaluate(
                out.trainer.encoder(),
                out.trainer.params(),
                &data.sent_tokens,
            )?;
            Ok(SweepRun {
                value,
                records: out.records,
                summary,
            })
        })
        .collect()
}

/// Flatten sweep outcomes into result rows.
pub fn sweep_to_rows(param: SweepParam, runs: &[SweepRun]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for run in runs {
        for report in &run.summary.probe {
            rows.push(SweepRow {
                param: param.as_str().to_string(),
                value: run.value,
                metric: report.metric.clone(),
                score: report.value,
            });
        }
        let d = &run.summary.diagnostics;
        rows.push(SweepRow {
            param: param.as_str().to_string(),
            value: run.value,
            metric: "uniformity".into(),
            score: d.uniformity,
        });
        if let Some(a) = d.alignment {
            rows.push(SweepRow {
                param: param.as_str().to_string(),
                value: run.value,
                metric: "alignment".into(),
                score: a,
            });
        }
        if let Some(c) = d.valence_rank_corr {
            rows.push(SweepRow {
                param: param.as_str().to_string(),
                value: run.value,
                metric: "valence_rank_corr".into(),
                score: c,
            });
        }
        if let Some(last) = run.records.last() {
            rows.push(SweepRow {
                param: param.as_str().to_string(),
                value: run.value,
                metric: "final_total".into(),
                score: last.total,
            });
            rows.push(SweepRow {
                param: param.as_str().to_string(),
                value: run.value,
                metric: "final_sent_mcl".into(),
                score: last.sent_mcl,
            });
        }
    }
    rows
}

/// Outcome of one mode of the loss-strategy comparison.
pub struct CompareRun {
    pub mode: LossMode,
    pub records: Vec<TrainLogRecord>,
    pub summary: EvalSummary,
}

/// Train one run per loss mode, otherwise identically configured (same
/// seed, same corpora). The label-free mode tokenizes without the lexicon,
/// so token ids match while valences are hidden from it; the queue is
/// disabled for every mode so the comparison isolates the labeling scheme.
pub fn compare_losses(
    cfg: &RunConfig,
    lexicon: &Lexicon,
    word_corpus: &[AnnotatedSentence],
    sent_corpus: &[AnnotatedSentence],
    modes: &[LossMode],
    steps: usize,
) -> Result<Vec<CompareRun>, ExperimentError> {
    if modes.is_empty() {
        return Err(ExperimentError::Setup("no loss modes requested".into()));
    }
    let labeled_data = prepare_data(lexicon, word_corpus, sent_corpus, cfg)?;
    let unlabeled_data = prepare_data(
        &Lexicon::empty("(none)"),
        word_corpus,
        sent_corpus,
        cfg,
    )?;
    modes
        .par_iter()
        .map(|&mode| {
            let mut sub_cfg = cfg.clone();
            sub_cfg.train.loss_mode = mode;
            sub_cfg.train.queue_capacity = 0;
            let data = match mode {
                LossMode::SelfSup => &unlabeled_data,
                _ => &labeled_data,
            };
            let out = run_pretrain(&sub_cfg, data, steps)?;
            // Diagnostics always use the true sentence valences.
            let summary = evaluate(
                out.trainer.encoder(),
                out.trainer.params(),
                &labeled_data.sent_tokens,
            )?;
            Ok(CompareRun {
                mode,
                records: out.records,
                summary,
            })
        })
        .collect()
}

/// `mode,metric,value,n` rows for the comparison CSV.
pub fn compare_to_csv(runs: &[CompareRun]) -> String {
    let mut out = String::from("mode,metric,value,n\n");
    for run in runs {
        let mode = run.mode.as_str();
        for r in &run.summary.probe {
            out.push_str(&format!("{mode},{},{},{}\n", r.metric, r.value, r.n));
        }
        let d = &run.summary.diagnostics;
        out.push_str(&format!("{mode},uniformity,{},{}\n", d.uniformity, run.summary.n));
        if let Some(a) = d.alignment {
            out.push_str(&format!("{mode},alignment,{a},{}\n", run.summary.n));
        }
        if let Some(c) = d.valence_rank_corr {
            out.push_str(&format!("{mode},valence_rank_corr,{c},{}\n", run.summary.n));
        }
    }
    out
}
