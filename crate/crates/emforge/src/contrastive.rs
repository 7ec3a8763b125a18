//! Training objective: temperature-scaled cosine similarity and the InfoNCE
//! loss over in-batch negatives plus optional hard negatives.
//!
//! All score arithmetic is done in log space (`cos/tau`); the exponential
//! matching score only materializes inside a stable log-sum-exp (and in
//! [`similarity`], which exists for tests and diagnostics).

use crate::autodiff::{Cx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Tensor};

/// A batch of paired query/target embeddings ready for the loss.
#[derive(Debug, Clone)]
pub struct TrainBatch<T: Element> {
    /// `[B, d]` query embeddings.
    pub queries: Tensor<T>,
    /// `[B, d]` positive target embeddings, row-aligned with queries.
    pub targets: Tensor<T>,
    /// Optional `[B, k, d]` hard-negative embeddings per query.
    pub hard_negatives: Option<Tensor<T>>,
    pub tau: f64,
}

const NORM_TOL: f64 = 1e-4;

impl<T: Element> TrainBatch<T> {
    pub fn new(
        queries: Tensor<T>,
        targets: Tensor<T>,
        hard_negatives: Option<Tensor<T>>,
        tau: f64,
    ) -> Result<Self> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
        }
        if queries.rank() != 2 || targets.rank() != 2 {
            return Err(Error::shape("embeddings must be [B, d] matrices"));
        }
        if queries.shape() != targets.shape() {
            return Err(Error::shape(format!(
                "query shape {:?} != target shape {:?}",
                queries.shape(),
                targets.shape()
            )));
        }
        let (b, d) = (queries.shape()[0], queries.shape()[1]);
        if let Some(h) = &hard_negatives {
            if h.rank() != 3 || h.shape()[0] != b || h.shape()[2] != d {
                return Err(Error::shape(format!(
                    "hard negatives must be [B, k, d] = [{b}, k, {d}], got {:?}",
                    h.shape()
                )));
            }
        }
        for (name, m) in [("query", &queries), ("target", &targets)] {
            for i in 0..b {
                let n = kernels::l2_norm(m.row(i)).to_f64();
                if (n - 1.0).abs() > NORM_TOL {
                    return Err(Error::invalid(format!(
                        "{name} embedding {i} is not L2-normalized (norm {n})"
                    )));
                }
            }
        }
        if b == 1 && hard_negatives.is_none() {
            log::warn!("batch of one pair with no negatives: InfoNCE is identically zero");
        }
        Ok(Self {
            queries,
            targets,
            hard_negatives,
            tau,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.queries.shape()[0]
    }

    pub fn hard_count(&self) -> usize {
        self.hard_negatives.as_ref().map_or(0, |h| h.shape()[1])
    }
}

/// Scalar loss plus the per-query log-score matrix for diagnostics.
#[derive(Debug, Clone)]
pub struct LossValue<T: Element> {
    pub loss: T,
    /// `[B, B+k]` log scores (`cos/tau`); row i's positive is column i.
    pub scores: Tensor<T>,
}

/// Matching score `exp(cos(a, b) / tau)`.
pub fn similarity<T: Element>(a: &Tensor<T>, b: &Tensor<T>, tau: f64) -> Result<T> {
    Ok(log_similarity(a, b, tau)?.exp())
}

/// `cos(a, b) / tau`, the log of the matching score.
pub fn log_similarity<T: Element>(a: &Tensor<T>, b: &Tensor<T>, tau: f64) -> Result<T> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    if a.shape() != b.shape() || a.rank() != 1 {
        return Err(Error::shape(format!(
            "similarity expects two equal-length vectors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let na = kernels::l2_norm(a.data());
    let nb = kernels::l2_norm(b.data());
    if na.to_f64() == 0.0 || nb.to_f64() == 0.0 {
        return Err(Error::invalid("similarity of a zero vector is undefined"));
    }
    let cos = kernels::dot(a.data(), b.data()) / (na * nb);
    Ok(cos / T::from_f64(tau))
}

/// `[B, B+k]` log-score matrix: column j < B holds `cos(q_i, t_j)/tau`
/// (in-batch targets), the trailing k columns hold each query's own hard
/// negatives.
pub fn build_score_matrix<T: Element>(
    queries: &Tensor<T>,
    targets: &Tensor<T>,
    hard_negatives: Option<&Tensor<T>>,
    tau: f64,
) -> Result<Tensor<T>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    if queries.rank() != 2 || targets.rank() != 2 || queries.shape() != targets.shape() {
        return Err(Error::shape(format!(
            "score matrix expects matching [B, d] matrices, got {:?} and {:?}",
            queries.shape(),
            targets.shape()
        )));
    }
    let (b, d) = (queries.shape()[0], queries.shape()[1]);
    let k = match hard_negatives {
        Some(h) => {
            if h.rank() != 3 || h.shape()[0] != b || h.shape()[2] != d {
                return Err(Error::shape(format!(
                    "hard negatives must be [B, k, d], got {:?}",
                    h.shape()
                )));
            }
            h.shape()[1]
        }
        None => 0,
    };
    let inv_tau = T::from_f64(1.0 / tau);
    let mut out = vec![T::zero(); b * (b + k)];
    for i in 0..b {
        let q = queries.row(i);
        let nq = kernels::l2_norm(q);
        for j in 0..b {
            let t = targets.row(j);
            let nt = kernels::l2_norm(t);
            out[i * (b + k) + j] = kernels::dot(q, t) / (nq * nt) * inv_tau;
        }
        if let Some(h) = hard_negatives {
            for j in 0..k {
                let neg = &h.data()[(i * k + j) * d..(i * k + j + 1) * d];
                let nn = kernels::l2_norm(neg);
                out[i * (b + k) + b + j] = kernels::dot(q, neg) / (nq * nn) * inv_tau;
            }
        }
    }
    let scores = Tensor::from_vec_unchecked(vec![b, b + k], out);
    scores.ensure_finite("build_score_matrix")?;
    Ok(scores)
}

/// InfoNCE from a log-score matrix whose row i has its positive in column i:
/// `mean_i( lse(row_i) - row_i[i] )`.
pub fn loss_from_log_scores<T: Element>(scores: &Tensor<T>) -> Result<T> {
    if scores.rank() != 2 || scores.shape()[1] < scores.shape()[0] {
        return Err(Error::shape(format!(
            "score matrix must be [B, >=B], got {:?}",
            scores.shape()
        )));
    }
    let (b, n) = (scores.shape()[0], scores.shape()[1]);
    let mut total = T::zero();
    for i in 0..b {
        let row = &scores.data()[i * n..(i + 1) * n];
        total += kernels::log_sum_exp(row) - row[i];
    }
    Ok(total * T::from_f64(1.0 / b as f64))
}

/// InfoNCE over in-batch negatives and the batch's hard negatives.
pub fn info_nce<T: Element>(batch: &TrainBatch<T>) -> Result<LossValue<T>> {
    let scores = build_score_matrix(
        &batch.queries,
        &batch.targets,
        batch.hard_negatives.as_ref(),
        batch.tau,
    )?;
    let loss = loss_from_log_scores(&scores)?;
    if !loss.is_finite_val() {
        return Err(Error::NonFinite("InfoNCE loss".into()));
    }
    Ok(LossValue { loss, scores })
}

/// Builds the InfoNCE graph over already-tracked embedding vectors (each a
/// rank-1 `[d]` node, assumed L2-normalized so dot products are cosines).
/// Returns the scalar loss node and the `[B, B+k]` log-score node.
///
/// `hard` holds, per query i, the nodes of its k hard-negative embeddings;
/// every query must carry the same k.
pub fn loss_graph<T: Element>(
    tape: &mut Tape<T>,
    queries: &[Var],
    targets: &[Var],
    hard: &[Vec<Var>],
    tau: f64,
) -> (Var, Var) {
    assert_eq!(queries.len(), targets.len());
    assert!(!queries.is_empty());
    assert!(hard.is_empty() || hard.len() == queries.len());
    let k = hard.first().map_or(0, Vec::len);
    assert!(hard.iter().all(|h| h.len() == k), "ragged hard negatives");

    let q = tape.concat_rows(queries);
    let t = tape.concat_rows(targets);
    let tt = tape.transpose(&t);
    let in_batch = tape.matmul(&q, &tt);
    let inv_tau = T::from_f64(1.0 / tau);
    let mut all = tape.scale(&in_batch, inv_tau);
    if k > 0 {
        let mut cols = vec![all];
        for j in 0..k {
            let column: Vec<Var> = hard.iter().map(|h| h[j]).collect();
            let hj = tape.concat_rows(&column);
            let dots = tape.row_dot(q, hj);
            cols.push(tape.scale(&dots, inv_tau));
        }
        all = tape.concat_cols(&cols);
    }
    let lse = tape.lse_rows(all);
    let pos = tape.diag_col(all);
    let diff = tape.sub(lse, pos);
    (tape.mean_all(diff), all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Tensor<f64> {
        let mut data = Vec::with_capacity(b * d);
        for _ in 0..b {
            let mut row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
            data.extend(row);
        }
        Tensor::new(vec![b, d], data).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let e = Tensor::new(vec![3], vec![1.0f64, 0.0, 0.0]).unwrap();
        let o = Tensor::new(vec![3], vec![0.0f64, 1.0, 0.0]).unwrap();
        let anti = Tensor::new(vec![3], vec![-1.0f64, 0.0, 0.0]).unwrap();

        // identical unit vectors at tau = 0.02 -> exp(50)
        let phi = similarity(&e, &e, 0.02).unwrap();
        assert!((phi.ln() - 50.0).abs() < 1e-9);
        // orthogonal -> 1 for any tau
        assert!((similarity(&e, &o, 0.37).unwrap() - 1.0).abs() < 1e-12);
        // antiparallel at tau = 0.02 -> exp(-50)
        let phi = similarity(&e, &anti, 0.02).unwrap();
        assert!((phi.ln() + 50.0).abs() < 1e-9);
    }

    #[test]
    fn similarity_rejects_zero_vector_and_bad_tau() {
        let e = Tensor::new(vec![2], vec![1.0f64, 0.0]).unwrap();
        let z = Tensor::<f64>::zeros(&[2]);
        assert!(similarity(&e, &z, 1.0).is_err());
        assert!(similarity(&e, &e, 0.0).is_err());
        assert!(similarity(&e, &e, -1.0).is_err());
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let q = Tensor::new(vec![1, 2], vec![1.0f64, 0.0]).unwrap();
        let t = Tensor::new(vec![1, 2], vec![0.0f64, 1.0]).unwrap();
        let batch = TrainBatch::new(q, t, None, 0.02).unwrap();
        let lv = info_nce(&batch).unwrap();
        assert_eq!(lv.loss, 0.0);
    }

    #[test]
    fn uniform_scores_give_ln_n() {
        // B=4 orthonormal-ish setup where every pairwise cosine is equal:
        // all targets identical, all queries identical => every score equal.
        let d = 8;
        let mut row = vec![0.0f64; d];
        row[0] = 1.0;
        let q = Tensor::new(vec![4, d], row.repeat(4)).unwrap();
        let mut trow = vec![0.0f64; d];
        trow[1] = 1.0;
        let t = Tensor::new(vec![4, d], trow.repeat(4)).unwrap();
        let batch = TrainBatch::new(q, t, None, 0.02).unwrap();
        let lv = info_nce(&batch).unwrap();
        // |N_i| = 3, so N = 4 candidates with equal scores -> ln 4
        assert!((lv.loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn scalar_hand_computed_case() {
        // one query, cos(q, t+) = 1, one hard negative with cos = 0, tau = 1
        let q = Tensor::new(vec![1, 2], vec![1.0f64, 0.0]).unwrap();
        let t = Tensor::new(vec![1, 2], vec![1.0f64, 0.0]).unwrap();
        let h = Tensor::new(vec![1, 1, 2], vec![0.0f64, 1.0]).unwrap();
        let batch = TrainBatch::new(q, t, Some(h), 1.0).unwrap();
        let lv = info_nce(&batch).unwrap();
        let want = (1.0 + (-1.0f64).exp()).ln(); // ln(1 + e^-1)
        assert!((lv.loss - want).abs() < 1e-12, "{} vs {want}", lv.loss);
        assert!((lv.loss - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn score_matrix_shape_and_diagonal() {
        let d = 4;
        let mut q_data = vec![0.0f64; 2 * d];
        q_data[0] = 1.0;
        q_data[d + 1] = 1.0;
        let q = Tensor::new(vec![2, d], q_data).unwrap();
        let s = build_score_matrix(&q, &q, None, 0.5).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert!((s.data()[0] - 2.0).abs() < 1e-12); // 1/tau on the diagonal
        assert!((s.data()[1]).abs() < 1e-12);
        assert!((s.data()[3] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn matrix_loss_matches_per_query_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (b, k, d) = (4, 2, 6);
        let q = unit_rows(&mut rng, b, d);
        let t = unit_rows(&mut rng, b, d);
        let h3 = unit_rows(&mut rng, b * k, d)
            .reshaped(vec![b, k, d])
            .unwrap();
        let tau = 0.1;
        let batch = TrainBatch::new(q.clone(), t.clone(), Some(h3.clone()), tau).unwrap();
        let lv = info_nce(&batch).unwrap();

        // independent per-query evaluation of the published formula
        let mut total = 0.0;
        for i in 0..b {
            let pos = similarity_rows(q.row(i), t.row(i), tau);
            let mut denom = pos;
            for j in 0..b {
                if j != i {
                    denom += similarity_rows(q.row(i), t.row(j), tau);
                }
            }
            for j in 0..k {
                let neg = &h3.data()[(i * k + j) * d..(i * k + j + 1) * d];
                denom += similarity_rows(q.row(i), neg, tau);
            }
            total += -(pos / denom).ln();
        }
        let want = total / b as f64;
        assert!((lv.loss - want).abs() < 1e-12, "{} vs {want}", lv.loss);
    }

    fn similarity_rows(a: &[f64], b: &[f64], tau: f64) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        (dot / (na * nb) / tau).exp()
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, d) = (5, 8);
        let q = unit_rows(&mut rng, b, d);
        let t = unit_rows(&mut rng, b, d);
        let loss = info_nce(&TrainBatch::new(q.clone(), t.clone(), None, 0.3).unwrap())
            .unwrap()
            .loss;

        let perm = [3usize, 0, 4, 1, 2];
        let permute = |m: &Tensor<f64>| {
            let mut data = Vec::new();
            for &i in &perm {
                data.extend_from_slice(m.row(i));
            }
            Tensor::new(vec![b, d], data).unwrap()
        };
        let loss_p = info_nce(&TrainBatch::new(permute(&q), permute(&t), None, 0.3).unwrap())
            .unwrap()
            .loss;
        assert!((loss - loss_p).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_when_positive_cosine_rises() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (b, d) = (4, 8);
        let scores = build_score_matrix(
            &unit_rows(&mut rng, b, d),
            &unit_rows(&mut rng, b, d),
            None,
            0.2,
        )
        .unwrap();
        let base = loss_from_log_scores(&scores).unwrap();
        for bump in [0.01, 0.1, 1.0] {
            let mut bumped = scores.data().to_vec();
            bumped[0] += bump; // raise cos(q_0, t_0)/tau, all else fixed
            let l = loss_from_log_scores(&Tensor::new(vec![b, b], bumped).unwrap()).unwrap();
            assert!(l < base, "bump {bump}: {l} !< {base}");
        }
    }

    #[test]
    fn graph_loss_matches_tensor_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (b, k, d) = (3, 2, 5);
        let q = unit_rows(&mut rng, b, d);
        let t = unit_rows(&mut rng, b, d);
        let h = unit_rows(&mut rng, b * k, d);
        let tau = 0.25;

        let mut tape = Tape::<f64>::new();
        let qv: Vec<Var> = (0..b)
            .map(|i| tape.leaf(&Tensor::new(vec![d], q.row(i).to_vec()).unwrap()))
            .collect();
        let tv: Vec<Var> = (0..b)
            .map(|i| tape.leaf(&Tensor::new(vec![d], t.row(i).to_vec()).unwrap()))
            .collect();
        let hv: Vec<Vec<Var>> = (0..b)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        tape.leaf(
                            &Tensor::new(vec![d], h.row(i * k + j).to_vec()).unwrap(),
                        )
                    })
                    .collect()
            })
            .collect();
        let (loss, _) = loss_graph(&mut tape, &qv, &tv, &hv, tau);
        let graph_loss = tape.value(&loss).scalar_value().unwrap();

        let batch = TrainBatch::new(
            q.clone(),
            t.clone(),
            Some(h.reshaped(vec![b, k, d]).unwrap()),
            tau,
        )
        .unwrap();
        let tensor_loss = info_nce(&batch).unwrap().loss;
        assert!((graph_loss - tensor_loss).abs() < 1e-12);
    }

    #[test]
    fn batch_validation() {
        let q = Tensor::new(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let not_unit = Tensor::new(vec![2, 2], vec![2.0f64, 0.0, 0.0, 1.0]).unwrap();
        assert!(TrainBatch::new(q.clone(), not_unit, None, 0.02).is_err());
        assert!(TrainBatch::new(q.clone(), q.clone(), None, 0.0).is_err());
        assert!(TrainBatch::new(q.clone(), q, None, 0.02).is_ok());
    }
}
