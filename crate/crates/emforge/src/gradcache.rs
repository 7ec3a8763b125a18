//! Two-phase training step with gradient caching.
//!
//! Phase 1 embeds the whole batch without gradient tracking, sub-batch by
//! sub-batch. Phase 2 differentiates the contrastive loss with the cached
//! embeddings as leaves, storing one representation gradient per embedding.
//! Phase 3 re-runs each sub-batch forward with a tape, seeds the backward
//! pass with the cached gradients instead of a loss, and accumulates
//! parameter gradients across sub-batches in partition order. Peak tracked
//! memory is bounded by one sub-batch, and the result matches direct
//! full-batch backpropagation.
//!
//! Queries and targets (and hard negatives) are treated symmetrically: all
//! are cached, all receive representation gradients, all contribute to the
//! parameter gradients.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;

use crate::autodiff::{Cx, Tape, Var};
use crate::contrastive::{self, LossValue};
use crate::encoder::tokenizer::TokenSequence;
use crate::encoder::{encode_with, leaf_params, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::tensor::{Element, Tensor};

/// Encoder parameters plus their architecture description.
#[derive(Debug, Clone)]
pub struct Model<T: Element> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
}

impl<T: Element> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Parameters::init(&config, seed)?;
        Ok(Self { config, params })
    }
}

/// One training pair, already tokenized.
#[derive(Debug, Clone)]
pub struct TrainItem<T: Element> {
    pub query: TokenSequence<T>,
    pub target: TokenSequence<T>,
    pub hard_negatives: Vec<TokenSequence<T>>,
}

/// Ordered, disjoint, contiguous index ranges covering a full batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubBatchPartition {
    ranges: Vec<Range<usize>>,
    batch_size: usize,
    sub_batch_size: usize,
}

impl SubBatchPartition {
    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn sub_batch_size(&self) -> usize {
        self.sub_batch_size
    }
}

/// Splits `batch_size` items into `ceil(B/s)` contiguous ranges; the last
/// range holds the remainder.
pub fn partition(batch_size: usize, sub_batch_size: usize) -> SubBatchPartition {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    assert!(sub_batch_size >= 1, "sub_batch_size must be >= 1");
    let mut ranges = Vec::with_capacity(batch_size.div_ceil(sub_batch_size));
    let mut start = 0;
    while start < batch_size {
        let end = (start + sub_batch_size).min(batch_size);
        ranges.push(start..end);
        start = end;
    }
    SubBatchPartition {
        ranges,
        batch_size,
        sub_batch_size,
    }
}

/// Embeddings of every query, positive target and hard negative, in batch
/// order, computed without gradient tracking and always L2-normalized.
#[derive(Debug, Clone)]
pub struct RepresentationCache<T: Element> {
    pub queries: Vec<Tensor<T>>,
    pub targets: Vec<Tensor<T>>,
    pub hard: Vec<Vec<Tensor<T>>>,
}

impl<T: Element> RepresentationCache<T> {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Total number of cached embeddings.
    pub fn embedding_count(&self) -> usize {
        self.queries.len() + self.targets.len() + self.hard.iter().map(Vec::len).sum::<usize>()
    }
}

/// Representation gradients `u_i = dL/df(q_i)` for every cached embedding.
#[derive(Debug, Clone)]
pub struct GradientCache<T: Element> {
    pub u_queries: Vec<Tensor<T>>,
    pub u_targets: Vec<Tensor<T>>,
    pub u_hard: Vec<Vec<Tensor<T>>>,
}

thread_local! {
    static LAST_ACCUMULATE_PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Largest tape (in tracked nodes) built by the most recent
/// [`accumulate_param_grads`] call on this thread. Verifies that tracked
/// memory scales with the sub-batch size, not the batch size.
pub fn last_accumulate_peak_nodes() -> usize {
    LAST_ACCUMULATE_PEAK.with(|c| c.get())
}

fn check_items<T: Element>(items: &[TrainItem<T>]) -> Result<usize> {
    if items.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let k = items[0].hard_negatives.len();
    if items.iter().any(|it| it.hard_negatives.len() != k) {
        return Err(Error::Data(
            "all items in a batch must carry the same number of hard negatives".into(),
        ));
    }
    Ok(k)
}

/// Phase 1: embed the batch sub-batch by sub-batch without a tape.
pub fn forward_cache<T: Element>(
    model: &Model<T>,
    items: &[TrainItem<T>],
    partition: &SubBatchPartition,
) -> Result<RepresentationCache<T>> {
    check_items(items)?;
    if partition.batch_size != items.len() {
        return Err(Error::Data(format!(
            "partition covers {} items, batch has {}",
            partition.batch_size,
            items.len()
        )));
    }
    let mut queries = Vec::with_capacity(items.len());
    let mut targets = Vec::with_capacity(items.len());
    let mut hard = Vec::with_capacity(items.len());
    for range in &partition.ranges {
        // Items within a sub-batch embed in parallel: no tape, immutable
        // parameters, and each result lands in its own slot.
        let chunk: Vec<Result<(Tensor<T>, Tensor<T>, Vec<Tensor<T>>)>> = range
            .clone()
            .into_par_iter()
            .map(|i| {
                let item = &items[i];
                let embed = |seq: &TokenSequence<T>| -> Result<Tensor<T>> {
                    let out = crate::encoder::encode(seq, &model.params, &model.config, true)
                        .map_err(|e| Error::Data(format!("item {i}: {e}")))?;
                    Ok(out.values)
                };
                let q = embed(&item.query)?;
                let t = embed(&item.target)?;
                let h: Vec<Tensor<T>> = item
                    .hard_negatives
                    .iter()
                    .map(|s| embed(s))
                    .collect::<Result<_>>()?;
                Ok((q, t, h))
            })
            .collect();
        for res in chunk {
            let (q, t, h) = res?;
            queries.push(q);
            targets.push(t);
            hard.push(h);
        }
    }
    Ok(RepresentationCache {
        queries,
        targets,
        hard,
    })
}

/// Builds the loss graph over leaf embeddings. Leaf order: queries ascending,
/// targets ascending, then hard negatives grouped per query.
fn loss_graph_over_leaves<T: Element>(
    tape: &mut Tape<T>,
    queries: &[Tensor<T>],
    targets: &[Tensor<T>],
    hard: &[Vec<Tensor<T>>],
    tau: f64,
) -> (Var, Var, Vec<Var>, Vec<Var>, Vec<Vec<Var>>) {
    let q_vars: Vec<Var> = queries.iter().map(|t| tape.leaf(t)).collect();
    let t_vars: Vec<Var> = targets.iter().map(|t| tape.leaf(t)).collect();
    let h_vars: Vec<Vec<Var>> = hard
        .iter()
        .map(|hs| hs.iter().map(|t| tape.leaf(t)).collect())
        .collect();
    let (loss, scores) = contrastive::loss_graph(tape, &q_vars, &t_vars, &h_vars, tau);
    (loss, scores, q_vars, t_vars, h_vars)
}

/// Phase 2: InfoNCE over the cached embeddings as leaf variables, returning
/// the loss and one representation gradient per embedding.
pub fn loss_and_rep_grads<T: Element>(
    cache: &RepresentationCache<T>,
    tau: f64,
) -> Result<(LossValue<T>, GradientCache<T>)> {
    if cache.is_empty() {
        return Err(Error::Data("empty representation cache".into()));
    }
    if cache.len() == 1 && cache.hard[0].is_empty() {
        log::warn!("batch of one pair with no negatives: InfoNCE is identically zero");
    }
    let mut tape = Tape::new();
    let (loss_var, scores_var, q_vars, t_vars, h_vars) =
        loss_graph_over_leaves(&mut tape, &cache.queries, &cache.targets, &cache.hard, tau);
    let loss = tape.value(&loss_var).scalar_value()?;
    if !loss.is_finite_val() {
        return Err(Error::NonFinite("InfoNCE loss".into()));
    }
    let scores = tape.value(&scores_var);
    let seed = Tensor::scalar(T::one());
    let mut store = tape.backward_seeded(&[(loss_var, seed)])?;

    let dim = cache.queries[0].shape().to_vec();
    let mut take = |v: Var| -> Result<Tensor<T>> {
        let g = store.take(v).unwrap_or_else(|| Tensor::zeros(&dim));
        g.ensure_finite("representation gradient")?;
        Ok(g)
    };
    let u_queries: Vec<Tensor<T>> = q_vars.iter().map(|&v| take(v)).collect::<Result<_>>()?;
    let u_targets: Vec<Tensor<T>> = t_vars.iter().map(|&v| take(v)).collect::<Result<_>>()?;
    let u_hard: Vec<Vec<Tensor<T>>> = h_vars
        .iter()
        .map(|hs| hs.iter().map(|&v| take(v)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    Ok((
        LossValue { loss, scores },
        GradientCache {
            u_queries,
            u_targets,
            u_hard,
        },
    ))
}

fn add_into<T: Element>(total: &mut BTreeMap<String, Tensor<T>>, part: BTreeMap<String, Tensor<T>>) {
    for (name, delta) in part {
        match total.get_mut(&name) {
            None => {
                total.insert(name, delta);
            }
            Some(acc) => {
                debug_assert_eq!(acc.shape(), delta.shape());
                for (o, &v) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *o += v;
                }
            }
        }
    }
}

/// Gradient contribution of one sub-batch: a fresh tape records the range's
/// pair forwards in order, then a single backward pass runs seeded with the
/// cached representation gradients instead of a loss. Using one tape per
/// sub-batch keeps the accumulation grouping identical to a full-batch tape,
/// so the `s = B` case reproduces direct backpropagation bit for bit.
fn subbatch_param_grads<T: Element>(
    model: &Model<T>,
    items: &[TrainItem<T>],
    range: Range<usize>,
    grad_cache: &GradientCache<T>,
    wrt: &[String],
) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut tape = Tape::new();
    let handles = leaf_params(&mut tape, &model.params);
    let mut seeds = Vec::with_capacity(range.len() * 2);
    for i in range {
        let item = &items[i];
        let q_var = encode_with(&mut tape, &handles, &item.query, &model.config, true)?;
        seeds.push((q_var, grad_cache.u_queries[i].clone()));
        let t_var = encode_with(&mut tape, &handles, &item.target, &model.config, true)?;
        seeds.push((t_var, grad_cache.u_targets[i].clone()));
        for (seq, u) in item.hard_negatives.iter().zip(&grad_cache.u_hard[i]) {
            let h_var = encode_with(&mut tape, &handles, seq, &model.config, true)?;
            seeds.push((h_var, u.clone()));
        }
    }
    LAST_ACCUMULATE_PEAK.with(|c| c.set(c.get().max(tape.len())));
    let mut store = tape.backward_seeded(&seeds)?;
    let mut out = BTreeMap::new();
    for name in wrt {
        let var = handles.get(name);
        let g = store
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(model.params.get(name).expect("known").shape()));
        out.insert(name.clone(), g);
    }
    Ok(out)
}

/// Phase 3: re-run each sub-batch with a tape, seed backward with the cached
/// gradients, and accumulate parameter gradients across sub-batches in
/// partition order.
pub fn accumulate_param_grads<T: Element>(
    model: &Model<T>,
    items: &[TrainItem<T>],
    partition: &SubBatchPartition,
    grad_cache: &GradientCache<T>,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let exec_order: Vec<usize> = (0..partition.ranges.len()).collect();
    accumulate_param_grads_exec_order(model, items, partition, grad_cache, &exec_order)
}

/// Like [`accumulate_param_grads`] but computing sub-batches in an arbitrary
/// execution order while still reducing in canonical partition order, which
/// makes the result bitwise identical for every execution order. Exposed for
/// the verification suite.
pub fn accumulate_param_grads_exec_order<T: Element>(
    model: &Model<T>,
    items: &[TrainItem<T>],
    partition: &SubBatchPartition,
    grad_cache: &GradientCache<T>,
    exec_order: &[usize],
) -> Result<BTreeMap<String, Tensor<T>>> {
    check_items(items)?;
    if partition.batch_size != items.len() {
        return Err(Error::Data(format!(
            "partition covers {} items, batch has {}",
            partition.batch_size,
            items.len()
        )));
    }
    if grad_cache.u_queries.len() != items.len()
        || grad_cache.u_targets.len() != items.len()
        || grad_cache.u_hard.len() != items.len()
        || grad_cache
            .u_hard
            .iter()
            .zip(items)
            .any(|(u, it)| u.len() != it.hard_negatives.len())
    {
        return Err(Error::Data(
            "gradient cache is misaligned with the batch".into(),
        ));
    }
    {
        let mut sorted = exec_order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..partition.ranges.len()).collect::<Vec<_>>() {
            return Err(Error::invalid("exec_order must permute the sub-batches"));
        }
    }

    let wrt = model.params.trainable_names(&model.config);
    LAST_ACCUMULATE_PEAK.with(|c| c.set(0));
    let mut partials: Vec<Option<BTreeMap<String, Tensor<T>>>> =
        (0..partition.ranges.len()).map(|_| None).collect();
    let mut total: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    let mut next_to_fold = 0usize;

    for &range_idx in exec_order {
        let range = partition.ranges[range_idx].clone();
        let sub_total = subbatch_param_grads(model, items, range, grad_cache, &wrt)?;
        partials[range_idx] = Some(sub_total);
        // Fold every partial that is ready, in canonical partition order.
        while next_to_fold < partials.len() {
            let Some(part) = partials[next_to_fold].take() else { break };
            add_into(&mut total, part);
            next_to_fold += 1;
        }
    }
    debug_assert_eq!(next_to_fold, partials.len());
    Ok(total)
}

/// Full-batch reference: one tape over every pair plus the loss graph, one
/// backward pass. This is the oracle the cached path is checked against.
pub fn direct_param_grads<T: Element>(
    model: &Model<T>,
    items: &[TrainItem<T>],
    tau: f64,
) -> Result<(LossValue<T>, BTreeMap<String, Tensor<T>>)> {
    check_items(items)?;
    let mut tape = Tape::new();
    let handles = leaf_params(&mut tape, &model.params);
    let mut q_vars = Vec::with_capacity(items.len());
    let mut t_vars = Vec::with_capacity(items.len());
    let mut h_vars = Vec::with_capacity(items.len());
    for item in items {
        q_vars.push(encode_with(&mut tape, &handles, &item.query, &model.config, true)?);
        t_vars.push(encode_with(&mut tape, &handles, &item.target, &model.config, true)?);
        let hs: Vec<Var> = item
            .hard_negatives
            .iter()
            .map(|s| encode_with(&mut tape, &handles, s, &model.config, true))
            .collect::<Result<_>>()?;
        h_vars.push(hs);
    }
    let (loss_var, scores_var) = contrastive::loss_graph(&mut tape, &q_vars, &t_vars, &h_vars, tau);
    let loss = tape.value(&loss_var).scalar_value()?;
    if !loss.is_finite_val() {
        return Err(Error::NonFinite("InfoNCE loss".into()));
    }
    let scores = tape.value(&scores_var);
    let wrt: Vec<(String, Var)> = model
        .params
        .trainable_names(&model.config)
        .into_iter()
        .map(|n| {
            let v = *handles.get(&n);
            (n, v)
        })
        .collect();
    let grads = tape.grad(loss_var, &wrt)?;
    Ok((LossValue { loss, scores }, grads))
}

fn check_grads_finite<T: Element>(grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    for (name, g) in grads {
        g.ensure_finite(&format!("gradient of {name}"))?;
    }
    Ok(())
}

/// One cached training step: forward cache, representation gradients,
/// sub-batch accumulation, optimizer update. Any failure leaves the model
/// untouched.
pub fn train_step<T: Element>(
    model: &mut Model<T>,
    items: &[TrainItem<T>],
    partition: &SubBatchPartition,
    optimizer: &mut AdamW<T>,
    lr: f64,
    tau: f64,
) -> Result<LossValue<T>> {
    let cache = forward_cache(model, items, partition)?;
    let (loss, grad_cache) = loss_and_rep_grads(&cache, tau)?;
    let grads = accumulate_param_grads(model, items, partition, &grad_cache)?;
    check_grads_finite(&grads)?;
    let updated = optimizer.step(&model.params, &grads, lr)?;
    model.params = updated;
    Ok(loss)
}

/// One direct (non-cached) training step; reference path for equivalence
/// checks.
pub fn train_step_direct<T: Element>(
    model: &mut Model<T>,
    items: &[TrainItem<T>],
    optimizer: &mut AdamW<T>,
    lr: f64,
    tau: f64,
) -> Result<LossValue<T>> {
    let (loss, grads) = direct_param_grads(model, items, tau)?;
    check_grads_finite(&grads)?;
    let updated = optimizer.step(&model.params, &grads, lr)?;
    model.params = updated;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_shapes() {
        let p = partition(1024, 4);
        assert_eq!(p.ranges().len(), 256);
        assert!(p.ranges().iter().all(|r| r.len() == 4));

        let p = partition(10, 4);
        let sizes: Vec<usize> = p.ranges().iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let p = partition(3, 8);
        assert_eq!(p.ranges(), &[0..3]);
    }

    #[test]
    fn partition_covers_all_indices_in_order() {
        for (b, s) in [(1, 1), (7, 3), (16, 5), (64, 8)] {
            let p = partition(b, s);
            let mut covered = Vec::new();
            for r in p.ranges() {
                assert!(r.len() <= s);
                covered.extend(r.clone());
            }
            assert_eq!(covered, (0..b).collect::<Vec<_>>());
        }
    }
}
