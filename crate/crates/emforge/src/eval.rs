//! Candidate-pool ranking evaluation: embed queries and pools, pick the
//! highest-dot-product candidate, score Precision@1, aggregate per meta-task
//! and IND/OOD.
//!
//! Embeddings are L2-normalized, so the dot-product ranking rule coincides
//! with the cosine similarity used during training.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::tokenizer::TokenSequence;
use crate::error::{Error, Result};
use crate::gradcache::Model;
use crate::instruction::{FormattedInput, MetaTask};
use crate::tensor::{kernels, Element, Tensor};

/// One evaluated candidate pool.
#[derive(Debug, Clone)]
pub struct ScoredPool {
    pub query_id: String,
    pub scores: Vec<f64>,
    /// argmax of scores, lowest index on ties.
    pub predicted: usize,
    pub label_index: usize,
}

/// Dot-product argmax with deterministic lowest-index tie-breaking.
pub fn rank<T: Element>(query: &Tensor<T>, candidates: &[Tensor<T>]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid("rank needs at least one candidate"));
    }
    let d = query.shape();
    for (i, c) in candidates.iter().enumerate() {
        if c.shape() != d {
            return Err(Error::shape(format!(
                "candidate {i} has shape {:?}, query {:?}",
                c.shape(),
                d
            )));
        }
    }
    let mut best = 0usize;
    let mut best_score = kernels::dot(query.data(), candidates[0].data());
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let s = kernels::dot(query.data(), c.data());
        if s > best_score {
            best_score = s;
            best = i;
        }
    }
    Ok(best)
}

/// Fraction of pools whose top-ranked candidate is the ground truth.
pub fn precision_at_1(pools: &[ScoredPool]) -> Result<f64> {
    if pools.is_empty() {
        return Err(Error::invalid("precision_at_1 over an empty pool list"));
    }
    let hits = pools
        .iter()
        .filter(|p| p.predicted == p.label_index)
        .count();
    Ok(hits as f64 / pools.len() as f64)
}

/// Per-dataset score with its grouping tags.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetScore {
    pub name: String,
    pub meta_task: MetaTask,
    pub ood: bool,
    /// Precision@1 as a fraction in [0, 1].
    pub p_at_1: f64,
    /// Number of evaluated queries.
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroupScore {
    pub p_at_1: f64,
    /// Number of datasets in the group.
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub datasets: Vec<DatasetScore>,
    pub meta: BTreeMap<String, GroupScore>,
    pub ind: Option<f64>,
    pub ood: Option<f64>,
    pub overall: f64,
}

/// Unweighted means within each group; every dataset counts equally.
pub fn aggregate(per_dataset: &[DatasetScore]) -> Result<EvalReport> {
    if per_dataset.is_empty() {
        return Err(Error::invalid("aggregate over an empty dataset list"));
    }
    let mean = |scores: &[f64]| scores.iter().sum::<f64>() / scores.len() as f64;

    let mut meta: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut ind_scores = Vec::new();
    let mut ood_scores = Vec::new();
    let mut all = Vec::new();
    for d in per_dataset {
        meta.entry(d.meta_task.name().to_string())
            .or_default()
            .push(d.p_at_1);
        if d.ood {
            ood_scores.push(d.p_at_1);
        } else {
            ind_scores.push(d.p_at_1);
        }
        all.push(d.p_at_1);
    }
    Ok(EvalReport {
        datasets: per_dataset.to_vec(),
        meta: meta
            .into_iter()
            .map(|(k, v)| {
                (
                    k,
                    GroupScore {
                        p_at_1: mean(&v),
                        n: v.len(),
                    },
                )
            })
            .collect(),
        ind: if ind_scores.is_empty() {
            None
        } else {
            Some(mean(&ind_scores))
        },
        ood: if ood_scores.is_empty() {
            None
        } else {
            Some(mean(&ood_scores))
        },
        overall: mean(&all),
    })
}

/// Fraction -> percentage with one decimal, the paper-table rendering.
pub fn render_score(fraction: f64) -> String {
    format!("{:.1}", fraction * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Plotdata,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "plotdata" => Ok(ReportFormat::Plotdata),
            other => Err(Error::invalid(format!(
                "unknown report format {other} (expected json, csv or plotdata)"
            ))),
        }
    }
}

pub fn report_to_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn report_from_json(json: &str) -> Result<EvalReport> {
    serde_json::from_str(json).map_err(|e| Error::Format(format!("bad report JSON: {e}")))
}

/// One row per dataset, then one aggregate row per meta-task group plus
/// IND/OOD/overall rows.
pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("kind,name,meta_task,ood,p_at_1,n\n");
    for d in &report.datasets {
        out.push_str(&format!(
            "dataset,{},{},{},{},{}\n",
            d.name,
            d.meta_task.name(),
            d.ood,
            render_score(d.p_at_1),
            d.n
        ));
    }
    for (name, g) in &report.meta {
        out.push_str(&format!(
            "meta,{name},{name},,{},{}\n",
            render_score(g.p_at_1),
            g.n
        ));
    }
    let opt = |v: Option<f64>| v.map(render_score).unwrap_or_default();
    out.push_str(&format!("ind,,,,{},\n", opt(report.ind)));
    out.push_str(&format!("ood,,,,{},\n", opt(report.ood)));
    out.push_str(&format!("overall,,,,{},\n", render_score(report.overall)));
    out
}

/// Tab-separated (group, score) pairs for bar charts: meta-task rows then
/// IND/OOD/overall.
pub fn report_to_plotdata(report: &EvalReport) -> String {
    let mut out = String::new();
    for task in MetaTask::ALL {
        if let Some(g) = report.meta.get(task.name()) {
            out.push_str(&format!("{}\t{}\n", task.name(), render_score(g.p_at_1)));
        }
    }
    if let Some(v) = report.ind {
        out.push_str(&format!("ind\t{}\n", render_score(v)));
    }
    if let Some(v) = report.ood {
        out.push_str(&format!("ood\t{}\n", render_score(v)));
    }
    out.push_str(&format!("overall\t{}\n", render_score(report.overall)));
    out
}

pub fn write_report(path: &Path, report: &EvalReport, format: ReportFormat) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let body = match format {
        ReportFormat::Json => report_to_json(report),
        ReportFormat::Csv => report_to_csv(report),
        ReportFormat::Plotdata => report_to_plotdata(report),
    };
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::Data(format!("cannot write report {}: {e}", path.display())))?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let json = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read report {}: {e}", path.display())))?;
    report_from_json(&json)
}

/// A formatted input paired with its loaded image (if any), ready to embed.
pub struct CorpusInput<T: Element> {
    pub formatted: FormattedInput,
    pub image: Option<Tensor<T>>,
}

fn content_key<T: Element>(input: &CorpusInput<T>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(input.formatted.text.as_bytes());
    h.update([0u8]);
    if let Some(img) = &input.image {
        for &e in img.shape() {
            h.update((e as u64).to_le_bytes());
        }
        for &v in img.data() {
            h.update(v.to_le_bytes_vec());
        }
    }
    h.finalize().into()
}

/// Embeds a corpus of formatted inputs, deduplicating identical content so
/// each unique input is encoded exactly once. Row i of the result is the
/// normalized embedding of input i.
pub fn embed_corpus<T: Element>(
    model: &Model<T>,
    inputs: &[CorpusInput<T>],
) -> Result<Vec<Tensor<T>>> {
    let mut unique: BTreeMap<[u8; 32], usize> = BTreeMap::new();
    let mut owners: Vec<usize> = Vec::with_capacity(inputs.len());
    let mut firsts: Vec<usize> = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let key = content_key(input);
        match unique.get(&key) {
            Some(&slot) => owners.push(slot),
            None => {
                let slot = firsts.len();
                unique.insert(key, slot);
                firsts.push(i);
                owners.push(slot);
            }
        }
    }
    let embedded: Vec<Result<Tensor<T>>> = firsts
        .par_iter()
        .map(|&i| {
            let input = &inputs[i];
            let seq = TokenSequence::build(
                &input.formatted.text,
                input.image.as_ref(),
                &model.config,
            )
            .map_err(|e| Error::Data(format!("input {i}: {e}")))?;
            let out = crate::encoder::encode(&seq, &model.params, &model.config, true)
                .map_err(|e| Error::Data(format!("input {i}: {e}")))?;
            Ok(out.values)
        })
        .collect();
    let embedded: Vec<Tensor<T>> = embedded.into_iter().collect::<Result<_>>()?;
    Ok(owners.into_iter().map(|slot| embedded[slot].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        let q = Tensor::new(vec![2], vec![1.0f64, 0.0]).unwrap();
        let mk = |x: f64, y: f64| Tensor::new(vec![2], vec![x, y]).unwrap();
        // scores 0.1, 0.9, 0.5 -> index 1
        let c = vec![mk(0.1, 0.3), mk(0.9, 0.0), mk(0.5, -0.2)];
        assert_eq!(rank(&q, &c).unwrap(), 1);
        // exact tie at 0 and 2 -> lowest index
        let c = vec![mk(0.7, 0.1), mk(0.2, 0.0), mk(0.7, -0.4)];
        assert_eq!(rank(&q, &c).unwrap(), 0);
        // dimension mismatch
        let bad = vec![Tensor::new(vec![3], vec![0.0f64, 0.0, 0.0]).unwrap()];
        assert!(rank(&q, &bad).is_err());
        assert!(rank(&q, &[]).is_err());
    }

    #[test]
    fn rank_matches_brute_force_on_random_pools() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let d = 8;
            let q = Tensor::new(vec![d], (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let pool: Vec<Tensor<f64>> = (0..16)
                .map(|_| {
                    Tensor::new(vec![d], (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .unwrap()
                })
                .collect();
            let got = rank(&q, &pool).unwrap();
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, c) in pool.iter().enumerate() {
                let s: f64 = q.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
                if s > best_score {
                    best_score = s;
                    best = i;
                }
            }
            assert_eq!(got, best);
        }
    }

    #[test]
    fn precision_examples() {
        let pool = |predicted, label| ScoredPool {
            query_id: "q".into(),
            scores: vec![],
            predicted,
            label_index: label,
        };
        assert_eq!(
            precision_at_1(&[pool(0, 0), pool(1, 1)]).unwrap(),
            1.0
        );
        assert_eq!(
            precision_at_1(&[pool(0, 1), pool(1, 0)]).unwrap(),
            0.0
        );
        assert_eq!(
            precision_at_1(&[pool(0, 0), pool(1, 1), pool(2, 2), pool(0, 3)]).unwrap(),
            0.75
        );
        assert!(precision_at_1(&[]).is_err());
    }

    fn table1_datasets() -> Vec<DatasetScore> {
        let mut out = Vec::new();
        let groups = [
            (MetaTask::Classification, 0.548, 10),
            (MetaTask::Vqa, 0.549, 10),
            (MetaTask::Retrieval, 0.623, 12),
            (MetaTask::Grounding, 0.795, 4),
        ];
        for (task, score, count) in groups {
            for i in 0..count {
                out.push(DatasetScore {
                    name: format!("{}-{i}", task.name()),
                    meta_task: task,
                    ood: i % 2 == 1,
                    p_at_1: score,
                    n: 100,
                });
            }
        }
        out
    }

    #[test]
    fn aggregate_reproduces_published_arithmetic() {
        let report = aggregate(&table1_datasets()).unwrap();
        assert_eq!(render_score(report.meta["classification"].p_at_1), "54.8");
        assert_eq!(render_score(report.meta["vqa"].p_at_1), "54.9");
        assert_eq!(render_score(report.meta["retrieval"].p_at_1), "62.3");
        assert_eq!(render_score(report.meta["grounding"].p_at_1), "79.5");
        // (54.8*10 + 54.9*10 + 62.3*12 + 79.5*4) / 36 = 60.07 -> 60.1
        assert_eq!(render_score(report.overall), "60.1");
        assert!((report.overall - 0.6007222222).abs() < 1e-9);
    }

    #[test]
    fn aggregate_single_and_pair() {
        let one = vec![DatasetScore {
            name: "only".into(),
            meta_task: MetaTask::Retrieval,
            ood: false,
            p_at_1: 0.42,
            n: 10,
        }];
        let r = aggregate(&one).unwrap();
        assert_eq!(r.overall, 0.42);
        assert_eq!(r.ind, Some(0.42));
        assert_eq!(r.ood, None);
        assert_eq!(r.meta["retrieval"].p_at_1, 0.42);

        let two = vec![
            DatasetScore {
                name: "a".into(),
                meta_task: MetaTask::Vqa,
                ood: false,
                p_at_1: 0.0,
                n: 5,
            },
            DatasetScore {
                name: "b".into(),
                meta_task: MetaTask::Vqa,
                ood: false,
                p_at_1: 1.0,
                n: 5,
            },
        ];
        let r = aggregate(&two).unwrap();
        assert_eq!(r.meta["vqa"].p_at_1, 0.5);
        assert_eq!(r.overall, 0.5);
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let mut datasets = table1_datasets();
        let a = aggregate(&datasets).unwrap();
        datasets.reverse();
        let b = aggregate(&datasets).unwrap();
        assert!((a.overall - b.overall).abs() < 1e-12);
        assert!((a.ind.unwrap() - b.ind.unwrap()).abs() < 1e-12);
        assert!((a.ood.unwrap() - b.ood.unwrap()).abs() < 1e-12);
        for (k, g) in &a.meta {
            assert!((g.p_at_1 - b.meta[k].p_at_1).abs() < 1e-12);
        }
    }

    #[test]
    fn report_roundtrip_and_row_counts() {
        let report = aggregate(&table1_datasets()).unwrap();
        let back = report_from_json(&report_to_json(&report)).unwrap();
        assert_eq!(back, report);

        let csv = report_to_csv(&report);
        // header + 36 datasets + 4 meta + ind + ood + overall
        assert_eq!(csv.lines().count(), 1 + 36 + 4 + 3);

        let plot = report_to_plotdata(&report);
        assert_eq!(plot.lines().count(), 4 + 3);
        assert!(plot.contains("overall\t60.1"));
    }
}
