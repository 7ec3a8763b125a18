//! The `gradcheck` verification suite: finite-difference oracles for the
//! full encode-to-loss pipeline and cached-vs-direct gradient equivalence
//! over a grid of (batch, sub-batch) shapes, in both dtypes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Cx, Tape};
use crate::contrastive::loss_graph;
use crate::encoder::tokenizer::TokenSequence;
use crate::encoder::{encode_with, leaf_params, ModelConfig};
use crate::error::{Error, Result};
use crate::fd;
use crate::gradcache::{
    accumulate_param_grads, direct_param_grads, forward_cache, loss_and_rep_grads, partition,
    Model, TrainItem,
};
use crate::tensor::{Element, Tensor};

/// Fault injected for mutation testing of the verification suite itself.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flips the sign of every cached representation gradient before the
    /// accumulation phase.
    NegateRepGrads,
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckOptions {
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone)]
pub struct GradcheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<38} {:>14} {:>10} {:>8}\n",
            "check", "max rel err", "tolerance", "status"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<38} {:>14.3e} {:>10.0e} {:>8}\n",
                r.name,
                r.max_rel_err,
                r.tolerance,
                if r.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

fn check_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        layers: 2,
        heads: 2,
        vocab_size: 260,
        max_seq: 24,
        patch_size: 4,
        image_channels: 1,
        lora_rank: 0,
        lora_alpha: 16.0,
    }
}

fn random_items<T: Element>(config: &ModelConfig, n: usize, seed: u64) -> Vec<TrainItem<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let word = |rng: &mut ChaCha8Rng, len: usize| -> String {
        (0..len)
            .map(|_| (b'a' + rng.gen_range(0..26)) as char)
            .collect()
    };
    (0..n)
        .map(|i| {
            let query = TokenSequence::build(&word(&mut rng, 7), None, config).unwrap();
            let target = if i % 2 == 0 {
                let len = config.image_channels * 8 * 8;
                let img = Tensor::new(
                    vec![config.image_channels, 8, 8],
                    (0..len)
                        .map(|_| T::from_f64(rng.gen_range(-1.0..1.0)))
                        .collect(),
                )
                .unwrap();
                TokenSequence::build("[IMG] x", Some(&img), config).unwrap()
            } else {
                TokenSequence::build(&word(&mut rng, 5), None, config).unwrap()
            };
            TrainItem {
                query,
                target,
                hard_negatives: vec![],
            }
        })
        .collect()
}

/// Batch loss without any backward pass, used as the finite-difference
/// functional.
fn batch_loss<T: Element>(model: &Model<T>, items: &[TrainItem<T>], tau: f64) -> Result<T> {
    let mut tape = Tape::new();
    let handles = leaf_params(&mut tape, &model.params);
    let mut q_vars = Vec::with_capacity(items.len());
    let mut t_vars = Vec::with_capacity(items.len());
    for item in items {
        q_vars.push(encode_with(&mut tape, &handles, &item.query, &model.config, true)?);
        t_vars.push(encode_with(&mut tape, &handles, &item.target, &model.config, true)?);
    }
    let hard: Vec<Vec<crate::autodiff::Var>> = vec![vec![]; items.len()];
    let (loss, _) = loss_graph(&mut tape, &q_vars, &t_vars, &hard, tau);
    tape.value(&loss).scalar_value()
}

/// Deterministic sample of parameter entries: up to `per_tensor` per tensor.
fn sampled_entries(model: &Model<f64>, per_tensor: usize, seed: u64) -> Vec<(String, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, t) in model.params.iter() {
        if t.len() <= per_tensor {
            for i in 0..t.len() {
                out.push((name.clone(), i));
            }
        } else {
            for _ in 0..per_tensor {
                out.push((name.clone(), rng.gen_range(0..t.len())));
            }
        }
    }
    out
}

/// Finite-difference check of the full encode -> InfoNCE pipeline on a d=16
/// model, over a deterministic sample of parameter entries.
fn pipeline_fd_row(tau: f64) -> Result<GradcheckRow> {
    let config = check_config();
    let model = Model::<f64>::init(config.clone(), 2024)?;
    let items = random_items::<f64>(&config, 4, 77);
    let (_, analytic) = direct_param_grads(&model, &items, tau)?;

    let entries = sampled_entries(&model, 6, 3);
    let mut max_err: f64 = 0.0;
    for (name, idx) in entries {
        let base = model.params.get(&name)?.clone();
        let eval_at = |v: f64| -> Result<f64> {
            let mut bumped = base.data().to_vec();
            bumped[idx] = v;
            let mut m = model.clone();
            m.params
                .insert(name.clone(), Tensor::new(base.shape().to_vec(), bumped)?);
            batch_loss(&m, &items, tau)
        };
        let x = base.data()[idx];
        let h = fd::DEFAULT_FD_STEP;
        let numeric = (eval_at(x + h)? - eval_at(x - h)?) / (2.0 * h);
        let a = analytic[&name].data()[idx];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(fd::REL_FLOOR);
        max_err = max_err.max(err);
    }
    Ok(GradcheckRow {
        name: "pipeline-fd d=16 L=2 (sampled entries)".into(),
        max_rel_err: max_err,
        tolerance: fd::DEFAULT_REL_TOL,
        passed: max_err <= fd::DEFAULT_REL_TOL,
    })
}

fn equivalence_row<T: Element>(
    b: usize,
    s: usize,
    tol: f64,
    tau: f64,
    fault: Option<Fault>,
) -> Result<GradcheckRow> {
    let config = check_config();
    let model = Model::<T>::init(config.clone(), 11 + b as u64)?;
    let items = random_items::<T>(&config, b, 900 + (b * 10 + s) as u64);
    let part = partition(b, s);
    let cache = forward_cache(&model, &items, &part)?;
    let (_, mut grad_cache) = loss_and_rep_grads(&cache, tau)?;
    if fault == Some(Fault::NegateRepGrads) {
        for u in grad_cache
            .u_queries
            .iter_mut()
            .chain(grad_cache.u_targets.iter_mut())
        {
            *u = u.map(|v| -v);
        }
    }
    let cached = accumulate_param_grads(&model, &items, &part, &grad_cache)?;
    let (_, direct) = direct_param_grads(&model, &items, tau)?;

    let flat = |m: &std::collections::BTreeMap<String, Tensor<T>>| -> Vec<f64> {
        m.values()
            .flat_map(|g| g.data().iter().map(|v| v.to_f64()))
            .collect()
    };
    let err = fd::rel_l2_error(&flat(&cached), &flat(&direct), 1e-30);
    Ok(GradcheckRow {
        name: format!("gradcache-vs-direct {} B={b} s={s}", dtype_name::<T>()),
        max_rel_err: err,
        tolerance: tol,
        passed: err <= tol,
    })
}

fn dtype_name<T: Element>() -> &'static str {
    match T::DTYPE {
        crate::tensor::DType::F32 => "f32",
        crate::tensor::DType::F64 => "f64",
    }
}

/// Runs the whole verification suite. Exit-code contract: callers map a
/// failed report to exit 3.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let tau = 0.05;
    let mut rows = Vec::new();
    rows.push(pipeline_fd_row(tau)?);
    for (b, s) in [(8usize, 8usize), (8, 4), (12, 3), (32, 4)] {
        rows.push(equivalence_row::<f64>(b, s, 1e-10, tau, opts.fault)?);
    }
    for (b, s) in [(8usize, 8usize), (8, 4), (12, 3), (32, 4)] {
        rows.push(equivalence_row::<f32>(b, s, 1e-4, tau, opts.fault)?);
    }
    Ok(GradcheckReport { rows })
}

/// Convenience wrapper returning an error on failure, matching the
/// verification exit code.
pub fn run_gradcheck_strict(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let report = run_gradcheck(opts)?;
    if !report.passed() {
        return Err(Error::Verification(format!(
            "gradcheck failed:\n{}",
            report.render_table()
        )));
    }
    Ok(report)
}
