//! Cold-start supervised fine-tuning: token-level cross-entropy under the
//! hybrid mask (causal reasoning, bidirectional action block) with AdamW.

use crate::forge::Dataset;
use crate::optim::{AdamW, AdamWConfig};
use crate::policy::{log_softmax, Model, PolicyError, PolicyParams, Sequence};
use crate::trace::Grammar;
use crate::vision::ToolRegistry;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            batch_size: 64,
            learning_rate: 1e-3,
            epochs: 40,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Per-epoch training metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cot: f64,
    pub loss_action: f64,
    pub grad_norm: f64,
}

/// Weights applied to reasoning-token and action-token cross-entropy terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenWeights {
    pub cot: f64,
    pub action: f64,
}

impl Default for TokenWeights {
    fn default() -> Self {
        TokenWeights {
            cot: 1.0,
            action: 1.0,
        }
    }
}

/// Summed cross-entropy and token counts of a batch, split by token kind.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub cot_sum: f64,
    pub cot_tokens: usize,
    pub action_sum: f64,
    pub action_tokens: usize,
}

impl LossParts {
    pub fn tokens(&self) -> usize {
        self.cot_tokens + self.action_tokens
    }

    pub fn total(&self) -> f64 {
        (self.cot_sum + self.action_sum) / self.tokens().max(1) as f64
    }

    pub fn cot(&self) -> f64 {
        self.cot_sum / self.cot_tokens.max(1) as f64
    }

    pub fn action(&self) -> f64 {
        self.action_sum / self.action_tokens.max(1) as f64
    }

    fn merge(&mut self, o: &LossParts) {
        self.cot_sum += o.cot_sum;
        self.cot_tokens += o.cot_tokens;
        self.action_sum += o.action_sum;
        self.action_tokens += o.action_tokens;
    }
}

fn is_action_row(seq: &Sequence, row: usize) -> bool {
    seq.block.as_ref().is_some_and(|b| b.contains(&row))
}

/// Cross-entropy of one sequence; adds `scale` times the gradient of the
/// weighted summed loss to `grad` when given.
pub fn sequence_loss(
    model: &Model<'_>,
    seq: &Sequence,
    weights: TokenWeights,
    scale: f64,
    grad: Option<&mut [f64]>,
) -> LossParts {
    let cache = model.forward(seq);
    let mut parts = LossParts::default();
    let mut dl = Vec::with_capacity(seq.targets.len());
    for (t, logits) in seq.targets.iter().zip(&cache.logits) {
        let lp = log_softmax(logits);
        let nll = -lp[t.token as usize];
        let w = if is_action_row(seq, t.row) {
            parts.action_sum += nll;
            parts.action_tokens += 1;
            weights.action
        } else {
            parts.cot_sum += nll;
            parts.cot_tokens += 1;
            weights.cot
        };
        if grad.is_some() {
            let c = w * scale;
            let mut d: Vec<f64> = lp.iter().map(|l| c * l.exp()).collect();
            d[t.token as usize] -= c;
            dl.push(d);
        }
    }
    if let Some(g) = grad {
        let rows: Vec<usize> = seq.targets.iter().map(|t| t.row).collect();
        model.backward(seq, &cache, &rows, &dl, g);
    }
    parts
}

/// Mean token cross-entropy over a batch and its gradient.
///
/// Every generated position counts once; evidence markers and forced tags
/// are not targets and never contribute.
pub fn masked_loss(
    params: &PolicyParams,
    batch: &[&Sequence],
    weights: TokenWeights,
) -> Result<(LossParts, Vec<f64>), PolicyError> {
    let model = Model::new(params);
    let n: usize = batch.iter().map(|s| s.targets.len()).sum();
    let scale = 1.0 / n.max(1) as f64;
    let mut grad = vec![0.0; params.len()];
    let mut parts = LossParts::default();
    for seq in batch {
        parts.merge(&sequence_loss(&model, seq, weights, scale, Some(&mut grad)));
    }
    if !parts.total().is_finite() {
        return Err(PolicyError::NumericalFault(format!(
            "non-finite loss {}",
            parts.total()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(PolicyError::NumericalFault("non-finite gradient".into()));
    }
    Ok((parts, grad))
}

/// Loss of the whole corpus without updating anything.
pub fn corpus_loss(params: &PolicyParams, seqs: &[Sequence]) -> LossParts {
    let model = Model::new(params);
    let mut parts = LossParts::default();
    for s in seqs {
        parts.merge(&sequence_loss(
            &model,
            s,
            TokenWeights::default(),
            0.0,
            None,
        ));
    }
    parts
}

/// Model inputs of every record in a dataset.
pub fn dataset_sequences(
    ds: &Dataset,
    grammar: &Grammar,
    registry: &ToolRegistry,
    params: &PolicyParams,
) -> Result<Vec<Sequence>, PolicyError> {
    (0..ds.len())
        .map(|i| {
            Sequence::for_step(
                &ds.records[i].prompt,
                &ds.step(i, grammar, registry),
                &grammar.vocab,
                &params.config,
            )
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum SftError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("numerical fault in epoch {epoch}: {reason}")]
    NumericalFault {
        epoch: usize,
        reason: String,
        last_good: Box<PolicyParams>,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Trains on the given sequences. Epoch 0 of the report is the loss at the
/// starting parameters; later epochs report the running loss of that epoch.
pub fn train(
    params: &PolicyParams,
    seqs: &[Sequence],
    cfg: &SftConfig,
    mut on_epoch: impl FnMut(&LossReport),
) -> Result<(PolicyParams, Vec<LossReport>), SftError> {
    if seqs.is_empty() {
        return Err(SftError::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.batch_size > seqs.len() {
        return Err(SftError::Config(format!(
            "batch size {} for {} records",
            cfg.batch_size,
            seqs.len()
        )));
    }
    if cfg.learning_rate < 0.0 || !cfg.learning_rate.is_finite() {
        return Err(SftError::Config(format!(
            "learning rate {}",
            cfg.learning_rate
        )));
    }
    let mut p = params.clone();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::with_lr(cfg.learning_rate)
        },
        p.len(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = corpus_loss(&p, seqs);
    let mut reports = vec![LossReport {
        epoch: 0,
        loss_total: init.total(),
        loss_cot: init.cot(),
        loss_action: init.action(),
        grad_norm: 0.0,
    }];
    on_epoch(&reports[0]);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut parts = LossParts::default();
        let mut norm_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sequence> = chunk.iter().map(|&i| &seqs[i]).collect();
            let (bp, grad) = masked_loss(&p, &batch, TokenWeights::default()).map_err(|e| {
                SftError::NumericalFault {
                    epoch,
                    reason: e.to_string(),
                    last_good: Box::new(p.clone()),
                }
            })?;
            let before = p.values.clone();
            norm_sum += opt.step(&mut p.values, &grad);
            if !p.all_finite() {
                p.values = before;
                return Err(SftError::NumericalFault {
                    epoch,
                    reason: "non-finite parameters".into(),
                    last_good: Box::new(p),
                });
            }
            parts.merge(&bp);
            batches += 1;
        }
        let r = LossReport {
            epoch,
            loss_total: parts.total(),
            loss_cot: parts.cot(),
            loss_action: parts.action(),
            grad_norm: norm_sum / batches as f64,
        };
        on_epoch(&r);
        reports.push(r);
    }
    Ok((p, reports))
}

/// Metrics CSV: `epoch,loss_total,loss_cot,loss_action,grad_norm`.
pub fn reports_csv(reports: &[LossReport]) -> String {
    let mut s = String::from("epoch,loss_total,loss_cot,loss_action,grad_norm\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.loss_total, r.loss_cot, r.loss_action, r.grad_norm
        ));
    }
    s
}
