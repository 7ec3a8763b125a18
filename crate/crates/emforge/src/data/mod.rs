//! Dataset records, JSONL manifest ingestion and deterministic batch
//! sampling.
//!
//! A manifest is UTF-8 JSONL, one record per line; image fields hold paths
//! relative to the manifest. Training datasets are capped at 50,000 records
//! by seeded uniform sampling, mirroring the per-dataset cap used for the
//! full-scale corpus.

pub mod synth;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instruction::{Modality, TaskRegistry, TaskSpec};
use crate::tensor::{Element, Tensor};
use crate::tensor_io;

/// Per-dataset training-record cap.
pub const TRAIN_CAP: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// One side of an example: optional text, optional image path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default, PartialOrd, Ord)]
#[serde(deny_unknown_fields)]
pub struct Content {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

impl Content {
    pub fn text(s: impl Into<String>) -> Self {
        Content {
            text: Some(s.into()),
            image: None,
        }
    }

    pub fn image(p: impl Into<String>) -> Self {
        Content {
            text: None,
            image: Some(p.into()),
        }
    }

    pub fn matches(&self, modality: Modality) -> bool {
        modality.wants_text() == self.text.is_some()
            && modality.wants_image() == self.image.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleRecord {
    pub id: String,
    pub task_id: String,
    pub split: Split,
    pub query: Content,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<Content>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hard_negatives: Vec<Content>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Content>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_index: Option<usize>,
}

impl ExampleRecord {
    pub fn validate(&self, task: &TaskSpec) -> Result<()> {
        let fail = |msg: String| Err(Error::Data(format!("record {}: {msg}", self.id)));
        if !self.query.matches(task.query_modality) {
            return fail(format!(
                "query does not match task modality {:?}",
                task.query_modality
            ));
        }
        match self.split {
            Split::Train => {
                let Some(pos) = &self.positive else {
                    return fail("train record lacks a positive target".into());
                };
                if !pos.matches(task.target_modality) {
                    return fail("positive target does not match task modality".into());
                }
                for (i, h) in self.hard_negatives.iter().enumerate() {
                    if !h.matches(task.target_modality) {
                        return fail(format!("hard negative {i} does not match task modality"));
                    }
                }
                if !self.candidates.is_empty() || self.label_index.is_some() {
                    return fail("candidate pools are eval-only".into());
                }
            }
            Split::Eval => {
                if self.candidates.len() < 2 {
                    return fail(format!(
                        "eval record needs >= 2 candidates, has {}",
                        self.candidates.len()
                    ));
                }
                let Some(label) = self.label_index else {
                    return fail("eval record lacks label_index".into());
                };
                if label >= self.candidates.len() {
                    return fail(format!(
                        "label_index {label} out of range for {} candidates",
                        self.candidates.len()
                    ));
                }
                for (i, c) in self.candidates.iter().enumerate() {
                    if !c.matches(task.target_modality) {
                        return fail(format!("candidate {i} does not match task modality"));
                    }
                }
                if let Some(pos) = &self.positive {
                    if self.candidates[label] != *pos {
                        return fail("label_index does not point at the positive target".into());
                    }
                }
            }
        }
        Ok(())
    }
}

/// Records plus the directory image paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<ExampleRecord>,
    pub root: PathBuf,
}

impl Dataset {
    pub fn train_records(&self) -> impl Iterator<Item = &ExampleRecord> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn eval_records(&self) -> impl Iterator<Item = &ExampleRecord> {
        self.records.iter().filter(|r| r.split == Split::Eval)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Cap on the number of train-split records; seeded uniform sampling
    /// applies when exceeded.
    pub train_cap: usize,
    pub cap_seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            train_cap: TRAIN_CAP,
            cap_seed: 0,
        }
    }
}

/// Parses and validates a JSONL manifest. Malformed lines are reported with
/// their line number; image blobs are only existence-checked lazily, at use.
pub fn load_manifest(path: &Path, registry: &TaskRegistry, opts: &LoadOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open manifest {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| {
            Error::Data(format!("{}:{}: read error: {e}", path.display(), lineno + 1))
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record_line(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let task = registry.get(&record.task_id)?;
        record.validate(task)?;
        records.push(record);
    }
    let records = apply_train_cap(records, opts);
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok(Dataset { records, root })
}

/// One JSONL line -> record; exposed for fuzzing.
pub fn parse_record_line(line: &str) -> Result<ExampleRecord> {
    serde_json::from_str(line).map_err(|e| Error::Data(format!("malformed record: {e}")))
}

fn apply_train_cap(records: Vec<ExampleRecord>, opts: &LoadOptions) -> Vec<ExampleRecord> {
    let train_count = records.iter().filter(|r| r.split == Split::Train).count();
    if train_count <= opts.train_cap {
        return records;
    }
    let train_positions: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.cap_seed);
    let mut shuffled = train_positions.clone();
    shuffled.shuffle(&mut rng);
    let mut keep: Vec<usize> = shuffled.into_iter().take(opts.train_cap).collect();
    keep.sort_unstable();
    let mut keep_iter = keep.into_iter().peekable();
    records
        .into_iter()
        .enumerate()
        .filter_map(|(i, r)| {
            if r.split != Split::Train {
                return Some(r);
            }
            if keep_iter.peek() == Some(&i) {
                keep_iter.next();
                Some(r)
            } else {
                None
            }
        })
        .collect()
}

pub fn save_manifest(path: &Path, records: &[ExampleRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = std::fs::File::create(path)
        .map_err(|e| Error::Data(format!("cannot write manifest {}: {e}", path.display())))?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 over (seed, stream)
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic shuffled-epoch sampling: `(seed, step)` fully determines the
/// returned index list. Every epoch is a fresh seeded permutation; batches
/// read it sequentially and wrap into the next epoch's permutation.
pub fn sample_batch_indices(
    n_records: usize,
    batch_size: usize,
    step: u64,
    seed: u64,
) -> Result<Vec<usize>> {
    if n_records == 0 {
        return Err(Error::Data("cannot sample from an empty dataset".into()));
    }
    if batch_size > n_records {
        return Err(Error::Data(format!(
            "batch_size {batch_size} exceeds dataset size {n_records} (sampling without replacement)"
        )));
    }
    let perm_for_epoch = |epoch: u64| -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n_records).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch));
        perm.shuffle(&mut rng);
        perm
    };
    let start = step as u128 * batch_size as u128;
    let mut epoch = (start / n_records as u128) as u64;
    let mut offset = (start % n_records as u128) as usize;
    let mut perm = perm_for_epoch(epoch);
    let mut out = Vec::with_capacity(batch_size);
    while out.len() < batch_size {
        if offset == n_records {
            epoch += 1;
            perm = perm_for_epoch(epoch);
            offset = 0;
        }
        out.push(perm[offset]);
        offset += 1;
    }
    Ok(out)
}

/// Loads an image blob and converts it to the requested element type.
pub fn load_image_as<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let dyn_t = tensor_io::read_tensor_file(path)?;
    Ok(match dyn_t {
        tensor_io::DynTensor::F32(t) => {
            Tensor::from_vec_unchecked(t.shape().to_vec(), t.data().iter().map(|&v| T::from_f64(v as f64)).collect())
        }
        tensor_io::DynTensor::F64(t) => {
            Tensor::from_vec_unchecked(t.shape().to_vec(), t.data().iter().map(|&v| T::from_f64(v)).collect())
        }
    })
}

/// Lazy image loader with a content cache, keyed by resolved path.
pub struct ImageStore<T: Element> {
    root: PathBuf,
    cache: std::sync::Mutex<BTreeMap<String, Tensor<T>>>,
}

impl<T: Element> ImageStore<T> {
    pub fn new(root: PathBuf) -> Self {
        Self {
            root,
            cache: std::sync::Mutex::new(BTreeMap::new()),
        }
    }

    pub fn load(&self, rel: &str) -> Result<Tensor<T>> {
        {
            let cache = self.cache.lock().expect("image cache poisoned");
            if let Some(t) = cache.get(rel) {
                return Ok(t.clone());
            }
        }
        let t = load_image_as::<T>(&self.root.join(rel))?;
        self.cache
            .lock()
            .expect("image cache poisoned")
            .insert(rel.to_string(), t.clone());
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruction::MetaTask;

    fn registry() -> TaskRegistry {
        TaskRegistry::from_tasks(vec![TaskSpec {
            task_id: "cap-test".into(),
            meta_task: MetaTask::Retrieval,
            definition: "Match the text.".into(),
            query_modality: Modality::Text,
            target_modality: Modality::Text,
            ood: false,
            target_instruction: None,
        }])
        .unwrap()
    }

    fn train_record(i: usize) -> ExampleRecord {
        ExampleRecord {
            id: format!("r{i}"),
            task_id: "cap-test".into(),
            split: Split::Train,
            query: Content::text(format!("query {i}")),
            positive: Some(Content::text(format!("target {i}"))),
            hard_negatives: vec![],
            candidates: vec![],
            label_index: None,
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let records: Vec<ExampleRecord> = (0..3).map(train_record).collect();
        save_manifest(&path, &records).unwrap();
        let ds = load_manifest(&path, &registry(), &LoadOptions::default()).unwrap();
        assert_eq!(ds.records, records);
        // load -> serialize -> load is content-identical
        let path2 = dir.path().join("m2.jsonl");
        save_manifest(&path2, &ds.records).unwrap();
        let ds2 = load_manifest(&path2, &registry(), &LoadOptions::default()).unwrap();
        assert_eq!(ds2.records, ds.records);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&train_record(0)).unwrap();
        std::fs::write(&path, format!("{good}\n{{not json}}\n")).unwrap();
        let err = load_manifest(&path, &registry(), &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn missing_positive_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut r = train_record(7);
        r.positive = None;
        save_manifest(&path, &[r]).unwrap();
        let err = load_manifest(&path, &registry(), &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("r7"), "{err}");
    }

    #[test]
    fn unknown_task_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut r = train_record(0);
        r.task_id = "nope".into();
        save_manifest(&path, &[r]).unwrap();
        assert!(load_manifest(&path, &registry(), &LoadOptions::default()).is_err());
    }

    #[test]
    fn train_cap_is_deterministic_per_seed() {
        let records: Vec<ExampleRecord> = (0..120).map(train_record).collect();
        let opts = LoadOptions {
            train_cap: 50,
            cap_seed: 9,
        };
        let a = apply_train_cap(records.clone(), &opts);
        let b = apply_train_cap(records.clone(), &opts);
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        let other = apply_train_cap(
            records,
            &LoadOptions {
                train_cap: 50,
                cap_seed: 10,
            },
        );
        assert_ne!(a, other);
    }

    #[test]
    fn sampling_is_deterministic_and_covers_epochs() {
        let a = sample_batch_indices(12, 4, 7, 3).unwrap();
        let b = sample_batch_indices(12, 4, 7, 3).unwrap();
        assert_eq!(a, b);

        // one epoch covers every record exactly once when B divides N
        let mut seen = Vec::new();
        for step in 0..3 {
            seen.extend(sample_batch_indices(12, 4, step, 3).unwrap());
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());

        assert!(sample_batch_indices(4, 5, 0, 0).is_err());
    }

    #[test]
    fn long_run_task_frequency_is_balanced() {
        // two equal-size tasks interleaved: indices < 500 are task A
        let n = 1000;
        let mut task_a = 0usize;
        let mut total = 0usize;
        for step in 0..1000u64 {
            for idx in sample_batch_indices(n, 16, step, 42).unwrap() {
                if idx < 500 {
                    task_a += 1;
                }
                total += 1;
            }
        }
        let frac = task_a as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.02, "task A frequency {frac}");
    }
}
