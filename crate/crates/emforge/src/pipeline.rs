//! Orchestration: turning records into encoder inputs, the training loop,
//! and dataset evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{sample_batch_indices, Content, Dataset, ExampleRecord, ImageStore};
use crate::encoder::tokenizer::TokenSequence;
use crate::error::{Error, Result};
use crate::eval::{
    aggregate, precision_at_1, rank, CorpusInput, DatasetScore, EvalReport, ScoredPool,
};
use crate::gradcache::{partition, train_step, Model, TrainItem};
use crate::instruction::{format_query, format_target, FormattedInput, TaskRegistry};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::tensor::{Element, Tensor};

fn load_content_image<T: Element>(
    store: &ImageStore<T>,
    content: &Content,
) -> Result<Option<Tensor<T>>> {
    content.image.as_deref().map(|p| store.load(p)).transpose()
}

fn build_sequence<T: Element>(
    formatted: &FormattedInput,
    image: Option<&Tensor<T>>,
    config: &crate::encoder::ModelConfig,
) -> Result<TokenSequence<T>> {
    TokenSequence::build(&formatted.text, image, config)
}

/// Renders and tokenizes one training record.
pub fn prepare_item<T: Element>(
    record: &ExampleRecord,
    registry: &TaskRegistry,
    store: &ImageStore<T>,
    config: &crate::encoder::ModelConfig,
    with_instructions: bool,
) -> Result<TrainItem<T>> {
    let task = registry.get(&record.task_id)?;
    let fq = format_query(
        task,
        record.query.text.as_deref(),
        record.query.image.as_deref(),
        with_instructions,
    )?;
    let q_img = load_content_image(store, &record.query)?;
    let query = build_sequence(&fq, q_img.as_ref(), config)
        .map_err(|e| Error::Data(format!("record {}: {e}", record.id)))?;

    let positive = record
        .positive
        .as_ref()
        .ok_or_else(|| Error::Data(format!("record {} lacks a positive target", record.id)))?;
    let ft = format_target(task, positive.text.as_deref(), positive.image.as_deref())?;
    let t_img = load_content_image(store, positive)?;
    let target = build_sequence(&ft, t_img.as_ref(), config)
        .map_err(|e| Error::Data(format!("record {}: {e}", record.id)))?;

    let mut hard_negatives = Vec::with_capacity(record.hard_negatives.len());
    for h in &record.hard_negatives {
        let fh = format_target(task, h.text.as_deref(), h.image.as_deref())?;
        let h_img = load_content_image(store, h)?;
        hard_negatives.push(build_sequence(&fh, h_img.as_ref(), config)?);
    }
    Ok(TrainItem {
        query,
        target,
        hard_negatives,
    })
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Full training run per the config. Deterministic per seed: the log's loss
/// sequence and the returned parameters depend only on (config, seed).
pub fn run_training<T: Element>(
    config: &RunConfig,
    mut on_step: impl FnMut(&TrainLogEntry),
) -> Result<Model<T>> {
    let registry = TaskRegistry::load(&config.data.task_registry)?;
    let dataset = crate::data::load_manifest(
        &config.data.train_manifest,
        &registry,
        &crate::data::LoadOptions {
            train_cap: crate::data::TRAIN_CAP,
            cap_seed: config.train.seed,
        },
    )?;
    let train_records: Vec<&ExampleRecord> = dataset.train_records().collect();
    if train_records.is_empty() {
        return Err(Error::Data("manifest holds no train records".into()));
    }
    let store = ImageStore::<T>::new(dataset.root.clone());
    let mut model = Model::<T>::init(config.model.clone(), config.train.seed)?;
    let mut optimizer = AdamW::new(AdamWConfig::default());
    let part = partition(config.train.batch_size, config.train.sub_batch_size);

    for step in 0..config.train.steps {
        let t0 = Instant::now();
        let indices = sample_batch_indices(
            train_records.len(),
            config.train.batch_size,
            step,
            config.train.seed,
        )?;
        let items: Vec<TrainItem<T>> = indices
            .iter()
            .map(|&i| {
                prepare_item(
                    train_records[i],
                    &registry,
                    &store,
                    &config.model,
                    config.train.with_instructions,
                )
            })
            .collect::<Result<_>>()?;
        let lr = lr_at(config.train.lr, step, config.train.steps);
        let loss = train_step(
            &mut model,
            &items,
            &part,
            &mut optimizer,
            lr,
            config.train.temperature,
        )?;
        on_step(&TrainLogEntry {
            step,
            loss: loss.loss.to_f64(),
            lr,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(model)
}

/// Evaluates every eval-split record, grouped by task (one "dataset" per
/// task). Queries and candidates are embedded with content dedup; candidate
/// pools come straight from the manifest and are never re-sampled.
pub fn evaluate_dataset<T: Element>(
    model: &Model<T>,
    dataset: &Dataset,
    registry: &TaskRegistry,
    with_instructions: bool,
) -> Result<EvalReport> {
    let eval_records: Vec<&ExampleRecord> = dataset.eval_records().collect();
    if eval_records.is_empty() {
        return Err(Error::Data("manifest holds no eval records".into()));
    }
    let store = ImageStore::<T>::new(dataset.root.clone());

    // Corpus layout: all queries first, then every pool's candidates.
    let mut inputs: Vec<CorpusInput<T>> = Vec::new();
    for r in &eval_records {
        let task = registry.get(&r.task_id)?;
        let fq = format_query(
            task,
            r.query.text.as_deref(),
            r.query.image.as_deref(),
            with_instructions,
        )?;
        let image = load_content_image(&store, &r.query)?;
        inputs.push(CorpusInput {
            formatted: fq,
            image,
        });
    }
    let mut pool_spans: Vec<(usize, usize)> = Vec::with_capacity(eval_records.len());
    for r in &eval_records {
        let task = registry.get(&r.task_id)?;
        let start = inputs.len();
        for c in &r.candidates {
            let ft = format_target(task, c.text.as_deref(), c.image.as_deref())?;
            let image = load_content_image(&store, c)?;
            inputs.push(CorpusInput {
                formatted: ft,
                image,
            });
        }
        pool_spans.push((start, r.candidates.len()));
    }

    let embeddings = crate::eval::embed_corpus(model, &inputs)?;

    let mut pools_by_task: BTreeMap<String, Vec<ScoredPool>> = BTreeMap::new();
    for (qi, r) in eval_records.iter().enumerate() {
        let (start, len) = pool_spans[qi];
        let query_emb = &embeddings[qi];
        let candidates = &embeddings[start..start + len];
        let predicted = rank(query_emb, candidates)?;
        let scores: Vec<f64> = candidates
            .iter()
            .map(|c| {
                crate::tensor::dot(query_emb, c)
                    .map(|v| v.to_f64())
                    .expect("dims checked by rank")
            })
            .collect();
        pools_by_task
            .entry(r.task_id.clone())
            .or_default()
            .push(ScoredPool {
                query_id: r.id.clone(),
                scores,
                predicted,
                label_index: r.label_index.expect("validated eval record"),
            });
    }

    let mut per_dataset = Vec::with_capacity(pools_by_task.len());
    for (task_id, pools) in &pools_by_task {
        let task = registry.get(task_id)?;
        per_dataset.push(DatasetScore {
            name: task_id.clone(),
            meta_task: task.meta_task,
            ood: task.ood,
            p_at_1: precision_at_1(pools)?,
            n: pools.len(),
        });
    }
    aggregate(&per_dataset)
}

/// Evaluates the manifest named by the config against a model.
pub fn evaluate_from_config<T: Element>(
    model: &Model<T>,
    config: &RunConfig,
    with_instructions: bool,
) -> Result<EvalReport> {
    let registry = TaskRegistry::load(&config.data.task_registry)?;
    let dataset = crate::data::load_manifest(
        &config.eval.manifest,
        &registry,
        &crate::data::LoadOptions::default(),
    )?;
    evaluate_dataset(model, &dataset, &registry, with_instructions)
}

/// Precision@1 a synthetic-data oracle achieves on a dataset's eval split;
/// verifies generator solvability independently of any model.
pub fn oracle_precision(
    spec: &crate::data::synth::SyntheticSpec,
    dataset: &Dataset,
) -> Result<f64> {
    let store = ImageStore::<f32>::new(dataset.root.clone());
    let mut hits = 0usize;
    let mut total = 0usize;
    for r in dataset.eval_records() {
        let predicted = crate::data::synth::oracle_predict(spec, r, &store)?;
        if predicted == r.label_index.expect("eval record") {
            hits += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::Data("no eval records for the oracle".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, SynthTask, SyntheticSpec};
    use crate::data::save_manifest;
    use crate::tensor_io::write_tensor_file;

    #[test]
    fn prepared_items_tokenize_queries_and_targets() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SyntheticSpec::new(SynthTask::Retrieval, 8, 4, 3);
        spec.n_candidates = 4;
        let out = generate_synthetic(&spec).unwrap();
        for (rel, img) in &out.blobs {
            write_tensor_file(&dir.path().join(rel), img).unwrap();
        }
        let manifest = dir.path().join("data.jsonl");
        save_manifest(&manifest, &out.records).unwrap();
        let registry = TaskRegistry::from_tasks(out.tasks.clone()).unwrap();
        let dataset = crate::data::load_manifest(
            &manifest,
            &registry,
            &crate::data::LoadOptions::default(),
        )
        .unwrap();

        let config = crate::encoder::ModelConfig {
            hidden_dim: 16,
            layers: 1,
            heads: 2,
            vocab_size: 260,
            max_seq: 96,
            patch_size: 4,
            image_channels: 1,
            lora_rank: 0,
            lora_alpha: 16.0,
        };
        let store = ImageStore::<f64>::new(dataset.root.clone());
        let records: Vec<&ExampleRecord> = dataset.train_records().collect();
        let item = prepare_item(records[0], &registry, &store, &config, true).unwrap();
        assert!(item.query.len() >= 3);
        // t2i: target carries the image patches
        assert!(item.target.patch_rows().is_some());
    }
}
