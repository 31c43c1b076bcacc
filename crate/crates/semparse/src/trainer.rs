//! Full-batch training of the log-linear (and optionally neural) parser.
//!
//! The objective is the sum over training instances of
//! log Z(n_i, m_i) - log Z(n_i) minus L2 penalties on the discrete weights
//! and the neural parameters. Ascent uses per-coordinate accumulated-
//! squared-gradient step scaling with a halving acceptance check, so the
//! objective trace is non-decreasing up to the acceptance tolerance and runs
//! are deterministic for a fixed seed and any thread count.

use std::time::Instant;

use rayon::prelude::*;

use crate::corpus::{auxiliary_corpus, Corpus, Instance, SplitSpec};
use crate::embeddings::{build_cooc, svd, truncate_embed, CoocMode, UnitEmbeddings};
use crate::error::Error;
use crate::evaluator::evaluate;
use crate::hybridtree::{
    decode_batch, AlignedEmbeddings, CompatTable, FullGrammar, GrammarMode, Inventory, ModelParams,
    Vocab,
};
use crate::logic::MeaningTree;
use crate::neural::{NeuralParams, DEFAULT_HIDDEN_DIM, DEFAULT_WORD_DIM};
use crate::Result;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub l2_lambda: f64,
    pub base_step: f64,
    pub seed: u64,
    /// stop when the relative objective change drops below this
    pub rel_tol: f64,
    pub grammar: GrammarMode,
    pub cooc_mode: CoocMode,
    /// None: no neural scoring; Some(J): window size
    pub nn_window: Option<usize>,
    pub nn_word_dim: usize,
    pub nn_hidden_dim: usize,
    /// embedding rank; None with embeddings enabled means "needs tuning"
    pub rank: Option<usize>,
    pub use_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iterations: 150,
            l2_lambda: 0.01,
            base_step: 0.1,
            seed: 1,
            rel_tol: 1e-6,
            grammar: GrammarMode::Observed,
            cooc_mode: CoocMode::Freq,
            nn_window: None,
            nn_word_dim: DEFAULT_WORD_DIM,
            nn_hidden_dim: DEFAULT_HIDDEN_DIM,
            rank: None,
            use_embeddings: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub objective_trace: Vec<f64>,
    pub grad_norm_trace: Vec<f64>,
    pub dev_f1_trace: Vec<Option<f64>>,
    /// instances skipped because H(n, m) was empty
    pub skipped_instances: usize,
    pub wall_clock_secs: f64,
    /// iteration whose parameters were kept (best dev F1, else last)
    pub best_iteration: usize,
    pub rank_used: Option<usize>,
}

/// Inventory, grammar and vocabulary read off the training instances.
pub fn build_params(
    train: &[&Instance],
    config: &TrainConfig,
    embeddings: Option<&UnitEmbeddings>,
) -> ModelParams {
    let inventory = Inventory::from_trees(train.iter().map(|i| &i.tree));
    let vocab = Vocab::from_tokens(
        train
            .iter()
            .flat_map(|i| i.tokens.iter().map(String::as_str)),
    );
    let compat = CompatTable::build(train.iter().map(|i| &i.tree), &inventory, config.grammar);
    let aligned = embeddings.map(|e| AlignedEmbeddings::align(e, &inventory));
    let neural = config.nn_window.map(|j| {
        NeuralParams::init(
            j,
            config.nn_word_dim,
            config.nn_hidden_dim,
            vocab.len(),
            inventory.len(),
            config.seed,
        )
    });
    ModelParams::new(inventory, vocab, compat, aligned, neural)
}

const CHUNK: usize = 16;

/// L(Λ, Θ) over `data` with L2 regularization; also returns how many
/// instances were skipped for having an empty H(n, m).
pub fn objective(data: &[&Instance], params: &ModelParams, l2_lambda: f64) -> (f64, usize) {
    let full = FullGrammar::new(params);
    let chunks: Vec<(f64, usize)> = data
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut obj = 0.0;
            let mut skipped = 0;
            for inst in chunk {
                match crate::hybridtree::instance_log_likelihood(
                    &inst.tokens,
                    &inst.tree,
                    params,
                    &full,
                ) {
                    Some((zc, zf)) => obj += zc - zf,
                    None => skipped += 1,
                }
            }
            (obj, skipped)
        })
        .collect();
    let mut obj = 0.0;
    let mut skipped = 0;
    for (o, s) in chunks {
        obj += o;
        skipped += s;
    }
    obj -= l2_lambda * params.weights.iter().map(|w| w * w).sum::<f64>();
    if let Some(nn) = &params.neural {
        obj -= l2_lambda * nn.l2_norm_sq();
    }
    (obj, skipped)
}

/// Objective and its gradient: Σ_i (E_constrained[Φ] - E_full[Φ]) - 2λΛ for
/// the discrete weights, backpropagated posterior differences for Θ.
pub fn gradient(
    data: &[&Instance],
    params: &ModelParams,
    l2_lambda: f64,
) -> (f64, Vec<f64>, Option<Vec<f64>>, usize) {
    let full = FullGrammar::new(params);
    let n_lambda = params.weights.len();
    let n_theta = params.neural.as_ref().map_or(0, |nn| nn.theta.len());
    let chunks: Vec<(f64, Vec<f64>, Vec<f64>, usize)> = data
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut obj = 0.0;
            let mut lg = vec![0.0; n_lambda];
            let mut tg = vec![0.0; n_theta];
            let mut skipped = 0;
            for inst in chunk {
                let theta_grad = if n_theta > 0 { Some(&mut tg[..]) } else { None };
                match crate::hybridtree::accumulate_instance_gradient(
                    &inst.tokens,
                    &inst.tree,
                    params,
                    &full,
                    &mut lg,
                    theta_grad,
                ) {
                    Some((zc, zf)) => obj += zc - zf,
                    None => skipped += 1,
                }
            }
            (obj, lg, tg, skipped)
        })
        .collect();

    let mut obj = 0.0;
    let mut lambda_grad = vec![0.0; n_lambda];
    let mut theta_grad = vec![0.0; n_theta];
    let mut skipped = 0;
    for (o, lg, tg, s) in chunks {
        obj += o;
        skipped += s;
        for (a, b) in lambda_grad.iter_mut().zip(&lg) {
            *a += b;
        }
        for (a, b) in theta_grad.iter_mut().zip(&tg) {
            *a += b;
        }
    }
    obj -= l2_lambda * params.weights.iter().map(|w| w * w).sum::<f64>();
    for (g, w) in lambda_grad.iter_mut().zip(&params.weights) {
        *g -= 2.0 * l2_lambda * w;
    }
    let theta_grad = params.neural.as_ref().map(|nn| {
        obj -= l2_lambda * nn.l2_norm_sq();
        for (g, w) in theta_grad.iter_mut().zip(&nn.theta) {
            *g -= 2.0 * l2_lambda * w;
        }
        theta_grad
    });
    (obj, lambda_grad, theta_grad, skipped)
}

fn dev_f1(dev: &[&Instance], params: &ModelParams) -> f64 {
    let golds: Vec<MeaningTree> = dev.iter().map(|i| i.tree.clone()).collect();
    let preds = decode_batch(dev.iter().map(|i| i.tokens.as_slice()), params);
    evaluate(&preds, &golds).map(|r| r.f1()).unwrap_or(0.0)
}

/// Full-batch gradient ascent from the given initial parameters.
///
/// Each iteration proposes an adaptive step (base step scaled per coordinate
/// by 1/sqrt of accumulated squared gradients) and halves it until the
/// objective does not decrease by more than 1e-9, so accepted iterations are
/// monotone. Stops at `max_iterations` or when the relative objective change
/// falls below `rel_tol`. When a dev set is given, the parameters of the
/// best-dev-F1 iteration are kept.
pub fn train_from(
    data: &[&Instance],
    dev: Option<&[&Instance]>,
    mut params: ModelParams,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let start = Instant::now();
    let l2 = config.l2_lambda;
    let mut acc_l = vec![0.0; params.weights.len()];
    let mut acc_t = vec![0.0; params.neural.as_ref().map_or(0, |n| n.theta.len())];

    let mut objective_trace = Vec::new();
    let mut grad_norm_trace = Vec::new();
    let mut dev_f1_trace = Vec::new();
    let mut skipped_instances = 0;
    let mut best: Option<(f64, usize, Vec<f64>, Option<Vec<f64>>)> = None;

    for iter in 0..config.max_iterations {
        let (obj, lg, tg, skipped) = gradient(data, &params, l2);
        skipped_instances = skipped;
        if !obj.is_finite() {
            return Err(Error::Diverged(format!(
                "objective became {obj} at iteration {iter}"
            )));
        }
        let mut gnorm = lg.iter().map(|g| g * g).sum::<f64>();
        if let Some(tg) = &tg {
            gnorm += tg.iter().map(|g| g * g).sum::<f64>();
        }
        let gnorm = gnorm.sqrt();

        for (a, g) in acc_l.iter_mut().zip(&lg) {
            *a += g * g;
        }
        if let Some(tg) = &tg {
            for (a, g) in acc_t.iter_mut().zip(tg) {
                *a += g * g;
            }
        }

        // propose and, if needed, halve the step until it does not hurt
        let base_l = params.weights.clone();
        let base_t = params.neural.as_ref().map(|n| n.theta.clone());
        let mut scale = 1.0;
        let mut accepted = None;
        while scale >= 1e-12 {
            for (i, w) in params.weights.iter_mut().enumerate() {
                if acc_l[i] > 0.0 {
                    *w = base_l[i] + config.base_step * scale * lg[i] / acc_l[i].sqrt();
                }
            }
            if let (Some(nn), Some(tg), Some(base_t)) = (&mut params.neural, &tg, &base_t) {
                for (i, w) in nn.theta.iter_mut().enumerate() {
                    if acc_t[i] > 0.0 {
                        *w = base_t[i] + config.base_step * scale * tg[i] / acc_t[i].sqrt();
                    }
                }
            }
            let (new_obj, _) = objective(data, &params, l2);
            if new_obj.is_finite() && new_obj >= obj - 1e-9 {
                accepted = Some(new_obj);
                break;
            }
            scale /= 2.0;
        }
        let Some(new_obj) = accepted else {
            // no step improves the objective; restore and stop
            params.weights = base_l;
            if let (Some(nn), Some(base_t)) = (&mut params.neural, base_t) {
                nn.theta = base_t;
            }
            break;
        };

        objective_trace.push(new_obj);
        grad_norm_trace.push(gnorm);
        if let Some(dev) = dev {
            let f1 = dev_f1(dev, &params);
            dev_f1_trace.push(Some(f1));
            let better = best.as_ref().map_or(true, |(bf, _, _, _)| f1 > *bf);
            if better {
                best = Some((
                    f1,
                    iter,
                    params.weights.clone(),
                    params.neural.as_ref().map(|n| n.theta.clone()),
                ));
            }
        } else {
            dev_f1_trace.push(None);
        }

        if (new_obj - obj).abs() <= config.rel_tol * obj.abs().max(1.0) {
            break;
        }
    }

    let mut best_iteration = objective_trace.len().saturating_sub(1);
    if let Some((_, iter, weights, theta)) = best {
        best_iteration = iter;
        params.weights = weights;
        if let (Some(nn), Some(theta)) = (&mut params.neural, theta) {
            nn.theta = theta;
        }
    }

    let report = TrainReport {
        objective_trace,
        grad_norm_trace,
        dev_f1_trace,
        skipped_instances,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        best_iteration,
        rank_used: params.embeddings.as_ref().map(|e| e.dim),
    };
    Ok((params, report))
}

/// Builds parameters from the training instances and trains from zero
/// weights.
pub fn train(
    data: &[&Instance],
    dev: Option<&[&Instance]>,
    config: &TrainConfig,
    embeddings: Option<&UnitEmbeddings>,
) -> Result<(ModelParams, TrainReport)> {
    let params = build_params(data, config, embeddings);
    train_from(data, dev, params, config)
}

/// Cross-lingual unit embeddings for `target`: co-occurrence counts over all
/// other languages, SVD, rank-d truncation.
pub fn auxiliary_embeddings(
    corpus: &Corpus,
    target: &str,
    mode: CoocMode,
    rank: usize,
) -> Result<UnitEmbeddings> {
    let aux = auxiliary_corpus(corpus, target);
    if aux.is_empty() {
        return Err(Error::Data(format!(
            "no auxiliary data: `{target}` is the only language in the corpus"
        )));
    }
    let cooc = build_cooc(&aux, mode);
    let decomp = svd(&cooc.to_matrix())?;
    truncate_embed(&decomp, cooc.units(), rank)
}

#[derive(Debug, Clone)]
pub struct RankReport {
    /// (candidate rank, dev F1) in candidate order
    pub candidates: Vec<(usize, f64)>,
    pub selected: usize,
}

/// The rank-tuning protocol: train on the split's learn part per candidate
/// rank, evaluate exact-match F1 on its dev part, pick the argmax (ties to
/// the smaller rank). The SVD is computed once and truncated per candidate.
pub fn tune_rank(
    corpus: &Corpus,
    split: &SplitSpec,
    candidates: &[usize],
    config: &TrainConfig,
) -> Result<RankReport> {
    if candidates.is_empty() {
        return Err(Error::Data("no candidate ranks".into()));
    }
    let (learn, dev, _) = split.materialize(corpus);
    if dev.is_empty() {
        return Err(Error::Data("rank tuning needs a dev split".into()));
    }
    let aux = auxiliary_corpus(corpus, &split.language);
    if aux.is_empty() {
        return Err(Error::Data(format!(
            "no auxiliary data: `{}` is the only language in the corpus",
            split.language
        )));
    }
    let cooc = build_cooc(&aux, config.cooc_mode);
    let decomp = svd(&cooc.to_matrix())?;

    let mut results = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for &d in candidates {
        let emb = truncate_embed(&decomp, cooc.units(), d)?;
        let (model, _report) = train(&learn, Some(&dev), config, Some(&emb))?;
        let f1 = dev_f1(&dev, &model);
        results.push((d, f1));
        let better = best.map_or(true, |(_, bf)| f1 > bf);
        if better {
            best = Some((d, f1));
        }
    }
    Ok(RankReport {
        candidates: results,
        selected: best.unwrap().0,
    })
}
