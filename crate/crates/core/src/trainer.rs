//! Joint training of both towers, validation-based model selection and the
//! ablation table.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregator::AggregatorConfig;
use crate::autodiff::{Graph, Var};
use crate::checkpoint::{parameter_digest, save_checkpoint, vocab_path, Checkpoint};
use crate::cross_attention::CrossAttentionConfig;
use crate::data::{batch_iter, make_splits, Batch, RetrievalDataset};
use crate::encoders::{tokenize, EncoderConfig, SeqBatch, Vocabulary, DEFAULT_VOCAB_CAP};
use crate::error::{EndxError, Result};
use crate::eval::{embed_corpus, evaluate, MetricsReport};
use crate::losses::{gam_terms, retrieval_loss, GamConfig, GamTerms, LossWeights, TermValues};
use crate::model::{Model, ModelConfig, Side};
use crate::optim::{optimizer_step, OptimizerConfig};
use crate::params::tape_gradients;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub aggregator: AggregatorConfig,
    pub cross_attention: CrossAttentionConfig,
    pub optimizer: OptimizerConfig,
    pub loss_weights: LossWeights,
    /// `gam.enabled` doubles as the ablation mask.
    pub gam: GamConfig,
    /// Training share of the `train : validation` question split.
    pub split_train_parts: usize,
    pub split_total_parts: usize,
    pub vocab_cap: usize,
    /// Also write the last epoch's parameters next to the best ones.
    pub keep_final: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            seed: 0,
            encoder: EncoderConfig::default(),
            aggregator: AggregatorConfig::default(),
            cross_attention: CrossAttentionConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss_weights: LossWeights::default(),
            gam: GamConfig::default(),
            split_train_parts: 9,
            split_total_parts: 10,
            vocab_cap: DEFAULT_VOCAB_CAP,
            keep_final: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(EndxError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(EndxError::Config("batch_size must be at least 2".into()));
        }
        if self.split_train_parts == 0 || self.split_train_parts >= self.split_total_parts {
            return Err(EndxError::Config("split_train_parts must lie in [1, split_total_parts)".into()));
        }
        if self.vocab_cap == 0 {
            return Err(EndxError::Config("vocab_cap must be positive".into()));
        }
        self.encoder.validate()?;
        self.aggregator.validate()?;
        self.cross_attention.validate(self.encoder.model_dim)?;
        self.optimizer.validate()?;
        self.loss_weights.validate()?;
        self.gam.validate()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            encoder: self.encoder.clone(),
            aggregator: self.aggregator.clone(),
            cross_attention: self.cross_attention.clone(),
        }
    }

    /// Parses and validates a JSON config; unknown keys are rejected.
    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| EndxError::Parse { path: source.into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EndxError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

/// Nodes of the joint objective for one batch.
pub struct JointLoss {
    pub total: Var,
    pub dual: Var,
    pub cross: Option<Var>,
    pub gam: Option<GamTerms>,
}

/// Builds `α_dual·L_dual + α_cross·L_cross + α_ga·Σ w_d·KL_d` on `g`. The
/// cross tower is skipped when neither of its terms carries weight.
pub fn joint_loss<F: Real>(
    g: &mut Graph<F>,
    model: &Model<F>,
    questions: &SeqBatch,
    answers: &SeqBatch,
    weights: &LossWeights,
    gam: &GamConfig,
    gam_weights: &TermValues<f64>,
) -> Result<JointLoss> {
    let dq = model.dual_embed_batch(g, Side::Question, questions)?;
    let da = model.dual_embed_batch(g, Side::Answer, answers)?;
    let dual = retrieval_loss(g, dq, da);
    let mut total = g.scale(dual, F::lit(weights.dual));
    let mut cross = None;
    let mut gam_out = None;
    if !weights.dual_only() {
        let (cq, ca) = model.cross_embed_batch(g, questions, answers)?;
        let lc = retrieval_loss(g, cq, ca);
        if weights.cross != 0.0 {
            let s = g.scale(lc, F::lit(weights.cross));
            total = g.add(total, s);
        }
        cross = Some(lc);
        if weights.ga != 0.0 {
            let terms = gam_terms(g, (dq, da), (cq, ca), gam, gam_weights);
            let s = g.scale(terms.total, F::lit(weights.ga));
            total = g.add(total, s);
            gam_out = Some(terms);
        }
    }
    Ok(JointLoss { total, dual, cross, gam: gam_out })
}

/// Per-step log line. Components that were not computed are omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u32,
    pub loss: f64,
    pub l_dual: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_cross: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_qq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_aa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_qa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_aq: Option<f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub w_qq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub w_aa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub w_qa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub w_aq: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub val_mrr: f64,
    pub val_r1: f64,
    pub val_r5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Token ids of every question and answer of a dataset.
pub struct Tokenized {
    pub questions: Vec<Vec<usize>>,
    pub answers: Vec<Vec<usize>>,
}

impl Tokenized {
    pub fn new(ds: &RetrievalDataset, vocab: &Vocabulary, encoder: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            questions: ds.questions.iter().map(|q| tokenize(&q.text, vocab, encoder.max_question_len)).collect::<Result<_>>()?,
            answers: ds.answers.iter().map(|a| tokenize(&a.text, vocab, encoder.max_answer_len)).collect::<Result<_>>()?,
        })
    }

    pub fn batch(&self, b: &Batch) -> Result<(SeqBatch, SeqBatch)> {
        let q: Vec<Vec<usize>> = b.questions.iter().map(|&i| self.questions[i].clone()).collect();
        let a: Vec<Vec<usize>> = b.answers.iter().map(|&i| self.answers[i].clone()).collect();
        Ok((SeqBatch::new(&q)?, SeqBatch::new(&a)?))
    }
}

/// One optimizer update on `batch`; returns its log line.
pub fn train_step(
    model: &mut Model<f32>,
    questions: &SeqBatch,
    answers: &SeqBatch,
    cfg: &TrainConfig,
    epoch: u32,
    step: u64,
) -> Result<StepRecord> {
    let weights = cfg.gam.scheduled_weights(epoch);
    let mut g = Graph::new();
    let parts = joint_loss(&mut g, model, questions, answers, &cfg.loss_weights, &cfg.gam, &weights)?;
    if let Some(op) = g.fault() {
        return Err(EndxError::NonFinite { op: format!("{op} at step {step} (epoch {epoch})") });
    }
    let grads = tape_gradients(&g, parts.total)?;
    let lr = optimizer_step(&mut model.params, &grads, &cfg.optimizer, step)?;

    let value = |v: Var| g.value(v).data()[0] as f64;
    let term = |t: Option<Var>| t.map(value);
    let (terms, logged_weights) = match &parts.gam {
        Some(gt) => (gt.terms, cfg.gam.enabled.map(|d, on| on.then(|| weights.get(d)))),
        None => (TermValues::uniform(None), TermValues::uniform(None)),
    };
    Ok(StepRecord {
        step,
        epoch,
        loss: value(parts.total),
        l_dual: value(parts.dual),
        l_cross: parts.cross.map(value),
        l_qq: term(terms.qq),
        l_aa: term(terms.aa),
        l_qa: term(terms.qa),
        l_aq: term(terms.aq),
        lr,
        w_qq: logged_weights.qq,
        w_aa: logged_weights.aa,
        w_qa: logged_weights.qa,
        w_aq: logged_weights.aq,
    })
}

/// Metrics of the dual tower on `ds` with its own answers as the pool.
pub fn validate_model(model: &Model<f32>, vocab: &Vocabulary, ds: &RetrievalDataset) -> Result<MetricsReport> {
    let index = embed_corpus(&ds.answers, model, vocab, String::new())?;
    evaluate(model, vocab, ds, &index, None)
}

pub struct TrainOutcome {
    pub best: Model<f32>,
    pub best_epoch: u32,
    pub best_r1: f64,
    pub last: Model<f32>,
    pub vocab: Vocabulary,
    pub log: Vec<LogRecord>,
}

/// Vocabulary over the training texts.
pub fn build_vocab(train: &RetrievalDataset, cap: usize) -> Vocabulary {
    let texts = train.questions.iter().map(|q| q.text.as_str()).chain(train.answers.iter().map(|a| a.text.as_str()));
    Vocabulary::build(texts, cap)
}

/// Trains on `train`, keeping the parameters with the best validation R@1
/// (earliest epoch on ties). Every log record is also passed to `sink`.
pub fn train(
    train: &RetrievalDataset,
    validation: &RetrievalDataset,
    cfg: &TrainConfig,
    mut sink: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if validation.is_empty() {
        return Err(EndxError::Config("validation split is empty".into()));
    }
    let vocab = build_vocab(train, cfg.vocab_cap);
    let mut model = Model::<f32>::new(cfg.model_config(vocab.len()), cfg.seed)?;
    let tokens = Tokenized::new(train, &vocab, &cfg.encoder)?;
    let steps_per_epoch = (train.pairs.len() / cfg.batch_size) as u64;
    let mut run_cfg = cfg.clone();
    if run_cfg.optimizer.total_steps == 0 {
        run_cfg.optimizer.total_steps = steps_per_epoch * cfg.epochs as u64;
    }

    let mut log = Vec::new();
    let mut emit = |r: LogRecord, log: &mut Vec<LogRecord>| {
        sink(&r);
        log.push(r);
    };
    let mut best: Option<(u32, f64, Model<f32>)> = None;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        for b in batch_iter(train, cfg.batch_size, cfg.seed, epoch as u64)? {
            let (q, a) = tokens.batch(&b)?;
            let rec = train_step(&mut model, &q, &a, &run_cfg, epoch, step)?;
            emit(LogRecord::Step(rec), &mut log);
            step += 1;
        }
        let rep = validate_model(&model, &vocab, validation)?;
        let r1 = rep.recall_at(1);
        emit(LogRecord::Epoch(EpochRecord { epoch, val_mrr: rep.mrr, val_r1: r1, val_r5: rep.recall_at(5) }), &mut log);
        if best.as_ref().is_none_or(|(_, b, _)| r1 > *b) {
            best = Some((epoch, r1, model.clone()));
        }
    }
    let (best_epoch, best_r1, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome { best: best_model, best_epoch, best_r1, last: model, vocab, log })
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const RESOLVED_CONFIG: &str = "config.json";

/// Splits `data` 9:1 by question, trains, and writes checkpoints, the
/// vocabulary, the log and the fully resolved config into `out`.
pub fn train_to_dir(data: &RetrievalDataset, cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| EndxError::io(out, e))?;
    let cfg_path = out.join(RESOLVED_CONFIG);
    std::fs::write(&cfg_path, serde_json::to_string_pretty(cfg).expect("config serializes")).map_err(|e| EndxError::io(&cfg_path, e))?;
    let (tr, val) = make_splits(data, cfg.split_train_parts, cfg.split_total_parts, cfg.seed)?;
    let log_path = out.join(TRAIN_LOG);
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| EndxError::io(&log_path, e))?);
    let mut write_err = None;
    let outcome = train(&tr, &val, cfg, |r| {
        let line = serde_json::to_string(r).expect("log records serialize");
        if let Err(e) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(e);
        }
        if let LogRecord::Epoch(e) = r {
            log::info!("epoch {} val mrr {:.4} r@1 {:.4} r@5 {:.4}", e.epoch, e.val_mrr, e.val_r1, e.val_r5);
        }
    })?;
    if let Some(e) = write_err {
        return Err(EndxError::io(&log_path, e));
    }
    log_file.flush().map_err(|e| EndxError::io(&log_path, e))?;
    let best_path = out.join(BEST_CHECKPOINT);
    save_checkpoint(&Checkpoint::new(&outcome.best, &cfg.gam, &cfg.loss_weights, &outcome.vocab), &best_path)?;
    outcome.vocab.save(&vocab_path(&best_path))?;
    if cfg.keep_final {
        save_checkpoint(&Checkpoint::new(&outcome.last, &cfg.gam, &cfg.loss_weights, &outcome.vocab), &out.join(FINAL_CHECKPOINT))?;
    }
    Ok(outcome)
}

/// Named configurations of the ablation table, in row order.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let mut rows = vec![("full", base.clone())];
    let drop = |f: fn(&mut TermValues<bool>)| {
        let mut c = base.clone();
        f(&mut c.gam.enabled);
        c
    };
    rows.push(("-q|q", drop(|e| e.qq = false)));
    rows.push(("-a|a", drop(|e| e.aa = false)));
    rows.push(("-q|a", drop(|e| e.qa = false)));
    rows.push(("-a|q", drop(|e| e.aq = false)));
    let mut dual = base.clone();
    dual.loss_weights.cross = 0.0;
    dual.loss_weights.ga = 0.0;
    rows.push(("dual-only", dual));
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub best_epoch: u32,
    /// Digest of the selected parameters.
    pub parameters: String,
    pub report: MetricsReport,
}

/// Trains every ablation configuration with the same seed and reports each
/// best model on `test`.
pub fn ablation_matrix(
    train_ds: &RetrievalDataset,
    validation: &RetrievalDataset,
    test: &RetrievalDataset,
    base: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_configs(base) {
        log::info!("ablation: {name}");
        let out = train(train_ds, validation, &cfg, |_| {})?;
        let index = embed_corpus(&test.answers, &out.best, &out.vocab, String::new())?;
        let report = evaluate(&out.best, &out.vocab, test, &index, None)?;
        rows.push(AblationRow { config: name.to_string(), best_epoch: out.best_epoch, parameters: parameter_digest(&out.best.params), report });
    }
    Ok(rows)
}

/// `config,mrr,r1,r5` with one line per row.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("config,mrr,r1,r5\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.config, r.report.mrr, r.report.recall_at(1), r.report.recall_at(5)));
    }
    s
}

/// Paths written by [`train_to_dir`].
pub fn run_files(out: &Path) -> [PathBuf; 4] {
    [out.join(BEST_CHECKPOINT), out.join(FINAL_CHECKPOINT), out.join(TRAIN_LOG), out.join(RESOLVED_CONFIG)]
}
