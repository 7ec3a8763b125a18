//! Toy fused vision-language encoder.
//!
//! A pre-norm causal transformer over a mixed sequence of image patch rows
//! and byte-level text tokens. The embedding is the final-layer hidden state
//! at the last real token (last-token pooling), optionally L2-normalized.
//! Weight matrices can carry low-rank adapters; with adapters enabled only
//! the adapter factors and the layer norms train, the base weights stay
//! frozen.

pub mod checkpoint;
pub mod tokenizer;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Cx, EvalCx};
use crate::error::{Error, Result};
use crate::tensor::{self, Element, Tensor};
use tokenizer::{SeqPos, TokenSequence, VOCAB_SIZE};

/// Epsilon used by every layer norm in the encoder.
pub const LN_EPS: f64 = 1e-5;

/// Additive attention mask value for disallowed positions. Large enough that
/// the post-softmax weight underflows to exactly zero.
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    pub max_seq: usize,
    pub patch_size: usize,
    pub image_channels: usize,
    #[serde(default)]
    pub lora_rank: usize,
    #[serde(default = "default_lora_alpha")]
    pub lora_alpha: f64,
}

fn default_vocab() -> usize {
    VOCAB_SIZE
}

fn default_lora_alpha() -> f64 {
    16.0
}

impl ModelConfig {
    /// Default desk-scale configuration.
    pub fn desk_default() -> Self {
        Self {
            hidden_dim: 64,
            layers: 4,
            heads: 4,
            vocab_size: VOCAB_SIZE,
            max_seq: 128,
            patch_size: 4,
            image_channels: 1,
            lora_rank: 0,
            lora_alpha: 16.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config(
                "hidden_dim, layers and heads must be positive".into(),
            ));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.lora_rank >= self.hidden_dim {
            return Err(Error::Config(format!(
                "lora_rank {} must be below hidden_dim {}",
                self.lora_rank, self.hidden_dim
            )));
        }
        if self.max_seq < 2 {
            return Err(Error::Config("max_seq must be at least 2".into()));
        }
        if self.patch_size == 0 || self.image_channels == 0 {
            return Err(Error::Config(
                "patch_size and image_channels must be positive".into(),
            ));
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size must be {VOCAB_SIZE} (256 bytes + 4 specials)"
            )));
        }
        if !(self.lora_alpha > 0.0) {
            return Err(Error::Config("lora_alpha must be positive".into()));
        }
        Ok(())
    }

    /// Flattened patch vector length `c * p * p`.
    pub fn patch_dim(&self) -> usize {
        self.image_channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn uses_lora(&self) -> bool {
        self.lora_rank >= 1
    }
}

/// Named weight tensors. Iteration order is the sorted name order, which
/// fixes checkpoint layout and gradient reduction order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T: Element> {
    map: BTreeMap<String, Tensor<T>>,
}

/// Weight matrices that carry low-rank adapters when `lora_rank >= 1`.
fn adapted_matrices(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = config.hidden_dim;
    let mut out = vec![("patch.proj.w".to_string(), config.patch_dim(), d)];
    for l in 0..config.layers {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("layer{l}.attn.{w}"), d, d));
        }
        out.push((format!("layer{l}.mlp.w1"), d, 4 * d));
        out.push((format!("layer{l}.mlp.w2"), 4 * d, d));
    }
    out
}

impl<T: Element> Parameters<T> {
    pub fn from_map(map: BTreeMap<String, Tensor<T>>) -> Self {
        Self { map }
    }

    /// Fresh initialization: normal(0, 0.02) projections and embeddings,
    /// zero biases, unit norms; adapter A factors normal(0, 1/sqrt(r)),
    /// adapter B factors zero so the adapter starts as the identity.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = Normal::new(0.0f64, 0.02).expect("valid stddev");
        let d = config.hidden_dim;
        let mut map = BTreeMap::new();

        let normal_t = |rng: &mut ChaCha8Rng, shape: &[usize], dist: &Normal<f64>| {
            let n: usize = shape.iter().product();
            let data: Vec<T> = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
            Tensor::from_vec_unchecked(shape.to_vec(), data)
        };

        // TEMP EXPERIMENT: scale input-embedding init via env
        let scale: f64 = std::env::var("EMFORGE_INIT_SCALE")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(1.0);
        let emb = Normal::new(0.0f64, 0.02 * scale).expect("valid stddev");
        map.insert(
            "embed.tok".to_string(),
            normal_t(&mut rng, &[config.vocab_size, d], &emb),
        );
        map.insert(
            "embed.pos".to_string(),
            normal_t(&mut rng, &[config.max_seq, d], &emb),
        );
        map.insert(
            "patch.proj.w".to_string(),
            normal_t(&mut rng, &[config.patch_dim(), d], &emb),
        );
        map.insert("patch.proj.b".to_string(), Tensor::zeros(&[d]));

        for l in 0..config.layers {
            let p = format!("layer{l}");
            map.insert(format!("{p}.ln1.gamma"), Tensor::full(&[d], T::one()));
            map.insert(format!("{p}.ln1.beta"), Tensor::zeros(&[d]));
            for w in ["wq", "wk", "wv", "wo"] {
                map.insert(format!("{p}.attn.{w}"), normal_t(&mut rng, &[d, d], &proj));
                map.insert(
                    format!("{p}.attn.b{}", &w[1..]),
                    Tensor::zeros(&[d]),
                );
            }
            map.insert(format!("{p}.ln2.gamma"), Tensor::full(&[d], T::one()));
            map.insert(format!("{p}.ln2.beta"), Tensor::zeros(&[d]));
            map.insert(
                format!("{p}.mlp.w1"),
                normal_t(&mut rng, &[d, 4 * d], &proj),
            );
            map.insert(format!("{p}.mlp.b1"), Tensor::zeros(&[4 * d]));
            map.insert(
                format!("{p}.mlp.w2"),
                normal_t(&mut rng, &[4 * d, d], &proj),
            );
            map.insert(format!("{p}.mlp.b2"), Tensor::zeros(&[d]));
        }
        map.insert("final_norm.gamma".to_string(), Tensor::full(&[d], T::one()));
        map.insert("final_norm.beta".to_string(), Tensor::zeros(&[d]));

        if config.uses_lora() {
            let r = config.lora_rank;
            let a_dist = Normal::new(0.0f64, 1.0 / (r as f64).sqrt()).expect("valid stddev");
            for (base, rows, cols) in adapted_matrices(config) {
                map.insert(
                    format!("{base}.lora_a"),
                    normal_t(&mut rng, &[rows, r], &a_dist),
                );
                map.insert(format!("{base}.lora_b"), Tensor::zeros(&[r, cols]));
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn insert(&mut self, name: String, t: Tensor<T>) {
        self.map.insert(name, t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Names updated by training. Full fine-tuning trains everything; with
    /// adapters only the adapter factors and the norms train.
    pub fn trainable_names(&self, config: &ModelConfig) -> Vec<String> {
        if !config.uses_lora() {
            return self.map.keys().cloned().collect();
        }
        self.map
            .keys()
            .filter(|n| {
                n.contains(".lora_")
                    || n.contains(".ln1.")
                    || n.contains(".ln2.")
                    || n.starts_with("final_norm.")
            })
            .cloned()
            .collect()
    }

    /// Checks that the stored tensors match what `config` implies.
    pub fn validate_against(&self, config: &ModelConfig) -> Result<()> {
        let reference = Parameters::<T>::init(config, 0)?;
        let ours: Vec<&String> = self.map.keys().collect();
        let theirs: Vec<&String> = reference.map.keys().collect();
        if ours != theirs {
            return Err(Error::Config(
                "checkpoint parameter names do not match model config".into(),
            ));
        }
        for (name, t) in &self.map {
            let want = reference.map[name].shape();
            if t.shape() != want {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    want
                )));
            }
        }
        Ok(())
    }
}

/// Fixed-dimensional encoder output.
#[derive(Debug, Clone)]
pub struct EmbeddingVector<T: Element> {
    pub values: Tensor<T>,
    pub normalized: bool,
}

impl<T: Element> EmbeddingVector<T> {
    pub fn dim(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Handles for parameters entered into an execution context, so a forward
/// pass can look weights up by name.
pub struct ParamHandles<H> {
    map: BTreeMap<String, H>,
}

impl<H: Clone> ParamHandles<H> {
    pub fn get(&self, name: &str) -> &H {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter handle {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&H> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &H)> {
        self.map.iter()
    }
}

/// Enters every parameter into the context (leaf order = name order).
pub fn leaf_params<T: Element, C: Cx<T>>(cx: &mut C, params: &Parameters<T>) -> ParamHandles<C::H> {
    let mut map = BTreeMap::new();
    for (name, t) in params.iter() {
        map.insert(name.clone(), cx.leaf(t));
    }
    ParamHandles { map }
}

/// Linear layer `x @ W (+ adapter) + b`. The adapter path computes
/// `(alpha/r) * (x @ A) @ B` and is skipped when no adapter exists for this
/// weight.
fn linear<T: Element, C: Cx<T>>(
    cx: &mut C,
    handles: &ParamHandles<C::H>,
    x: &C::H,
    w_name: &str,
    b_name: &str,
    config: &ModelConfig,
) -> C::H {
    let w = handles.get(w_name);
    let mut out = cx.matmul(x, w);
    if config.uses_lora() {
        if let (Some(a), Some(b)) = (
            handles.try_get(&format!("{w_name}.lora_a")),
            handles.try_get(&format!("{w_name}.lora_b")),
        ) {
            let xa = cx.matmul(x, a);
            let xab = cx.matmul(&xa, b);
            let scaled = cx.scale(&xab, T::from_f64(config.lora_alpha / config.lora_rank as f64));
            out = cx.add(&out, &scaled);
        }
    }
    let bias = handles.get(b_name);
    cx.add_row(&out, bias)
}

/// Additive causal + padding mask: position i may attend to j iff j <= i and
/// j is a real token.
fn attention_mask<T: Element>(mask: &[bool]) -> Tensor<T> {
    let n = mask.len();
    let neg = T::from_f64(MASK_NEG);
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            if j > i || !mask[j] {
                data[i * n + j] = neg;
            }
        }
    }
    Tensor::from_vec_unchecked(vec![n, n], data)
}

/// Full forward pass in an arbitrary execution context. Returns the handle of
/// the pooled (and optionally normalized) embedding.
pub fn encode_with<T: Element, C: Cx<T>>(
    cx: &mut C,
    handles: &ParamHandles<C::H>,
    seq: &TokenSequence<T>,
    config: &ModelConfig,
    normalize: bool,
) -> Result<C::H> {
    let n = seq.len();
    if n == 0 {
        return Err(Error::invalid("empty token sequence"));
    }
    if n > config.max_seq {
        return Err(Error::invalid(format!(
            "sequence length {n} exceeds max_seq {}",
            config.max_seq
        )));
    }

    // Input rows: contiguous runs of text tokens are gathered from the
    // embedding table; patch runs go through the patch projection.
    let mut segments: Vec<C::H> = Vec::new();
    let mut run: Vec<usize> = Vec::new();
    let tok_table = handles.get("embed.tok").clone();
    for pos in seq.positions() {
        match pos {
            SeqPos::Token(id) => run.push(*id as usize),
            SeqPos::Patch(row) => {
                if !run.is_empty() {
                    segments.push(cx.gather_rows(&tok_table, &run));
                    run.clear();
                }
                // the block of patch rows is projected once, at its first row
                if *row == 0 {
                    let patches = seq
                        .patch_rows()
                        .ok_or_else(|| Error::invalid("patch position without patch rows"))?;
                    let pleaf = cx.leaf(patches);
                    let proj = linear(
                        cx,
                        handles,
                        &pleaf,
                        "patch.proj.w",
                        "patch.proj.b",
                        config,
                    );
                    segments.push(proj);
                }
            }
        }
    }
    if !run.is_empty() {
        segments.push(cx.gather_rows(&tok_table, &run));
    }
    let mut x = if segments.len() == 1 {
        segments.pop().unwrap()
    } else {
        cx.concat_rows(&segments)
    };

    // learned absolute positions
    let pos_rows: Vec<usize> = (0..n).collect();
    let pos_table = handles.get("embed.pos").clone();
    let pos = cx.gather_rows(&pos_table, &pos_rows);
    x = cx.add(&x, &pos);

    let mask = attention_mask::<T>(seq.mask());
    let head_dim = config.head_dim();
    let inv_sqrt = T::from_f64(1.0 / (head_dim as f64).sqrt());

    for l in 0..config.layers {
        let p = format!("layer{l}");
        let h = cx.layer_norm_rows(
            &x,
            handles.get(&format!("{p}.ln1.gamma")),
            handles.get(&format!("{p}.ln1.beta")),
            LN_EPS,
        );
        let q = linear(cx, handles, &h, &format!("{p}.attn.wq"), &format!("{p}.attn.bq"), config);
        let k = linear(cx, handles, &h, &format!("{p}.attn.wk"), &format!("{p}.attn.bk"), config);
        let v = linear(cx, handles, &h, &format!("{p}.attn.wv"), &format!("{p}.attn.bv"), config);

        let mut heads = Vec::with_capacity(config.heads);
        for hd in 0..config.heads {
            let start = hd * head_dim;
            let qh = cx.slice_cols(&q, start, head_dim);
            let kh = cx.slice_cols(&k, start, head_dim);
            let vh = cx.slice_cols(&v, start, head_dim);
            let kt = cx.transpose(&kh);
            let scores = cx.matmul(&qh, &kt);
            let scaled = cx.scale(&scores, inv_sqrt);
            let masked = cx.add_const(&scaled, &mask);
            let attn = cx.softmax_rows(&masked);
            heads.push(cx.matmul(&attn, &vh));
        }
        let merged = if heads.len() == 1 {
            heads.pop().unwrap()
        } else {
            cx.concat_cols(&heads)
        };
        let o = linear(cx, handles, &merged, &format!("{p}.attn.wo"), &format!("{p}.attn.bo"), config);
        x = cx.add(&x, &o);

        let h2 = cx.layer_norm_rows(
            &x,
            handles.get(&format!("{p}.ln2.gamma")),
            handles.get(&format!("{p}.ln2.beta")),
            LN_EPS,
        );
        let m1 = linear(cx, handles, &h2, &format!("{p}.mlp.w1"), &format!("{p}.mlp.b1"), config);
        let a = cx.gelu(&m1);
        let m2 = linear(cx, handles, &a, &format!("{p}.mlp.w2"), &format!("{p}.mlp.b2"), config);
        x = cx.add(&x, &m2);
    }

    let f = cx.layer_norm_rows(
        &x,
        handles.get("final_norm.gamma"),
        handles.get("final_norm.beta"),
        LN_EPS,
    );
    let pooled = cx.select_row(&f, seq.pool_pos());
    Ok(if normalize {
        cx.l2_normalize(&pooled)
    } else {
        pooled
    })
}

/// Untracked forward pass.
pub fn encode<T: Element>(
    seq: &TokenSequence<T>,
    params: &Parameters<T>,
    config: &ModelConfig,
    normalize: bool,
) -> Result<EmbeddingVector<T>> {
    let mut cx = EvalCx;
    let handles = leaf_params(&mut cx, params);
    let out = encode_with(&mut cx, &handles, seq, config, normalize)?;
    out.ensure_finite("encode")?;
    Ok(EmbeddingVector {
        values: out,
        normalized: normalize,
    })
}

/// Adapter-augmented linear map on plain tensors:
/// `x @ W + (alpha/r) * (x @ A) @ B`. With `B = 0` this equals the base
/// product exactly.
pub fn lora_forward<T: Element>(
    x: &Tensor<T>,
    w_base: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    alpha: f64,
    r: usize,
) -> Result<Tensor<T>> {
    if r == 0 {
        return Err(Error::invalid(
            "lora_forward requires rank >= 1; call the base layer instead",
        ));
    }
    let base = tensor::matmul(x, w_base)?;
    let low = tensor::matmul(&tensor::matmul(x, a)?, b)?;
    let scaled = tensor::scale(&low, T::from_f64(alpha / r as f64))?;
    tensor::add(&base, &scaled)
}

/// Folds adapters into the base weights (`W <- W + (alpha/r) A @ B`) and
/// strips the adapter tensors. Returns the merged parameters together with
/// the equivalent adapter-free config.
pub fn merge_lora<T: Element>(
    params: &Parameters<T>,
    config: &ModelConfig,
) -> Result<(Parameters<T>, ModelConfig)> {
    if !config.uses_lora() {
        return Err(Error::invalid(
            "merge_lora called on full fine-tuning parameters (lora_rank = 0)",
        ));
    }
    let scale_k = T::from_f64(config.lora_alpha / config.lora_rank as f64);
    let mut out = BTreeMap::new();
    for (name, t) in params.iter() {
        if name.contains(".lora_") {
            continue;
        }
        let a_name = format!("{name}.lora_a");
        let b_name = format!("{name}.lora_b");
        if params.contains(&a_name) {
            let delta = tensor::matmul(params.get(&a_name)?, params.get(&b_name)?)?;
            let merged = tensor::add(t, &tensor::scale(&delta, scale_k)?)?;
            out.insert(name.clone(), merged);
        } else {
            out.insert(name.clone(), t.clone());
        }
    }
    let mut merged_config = config.clone();
    merged_config.lora_rank = 0;
    Ok((Parameters::from_map(out), merged_config))
}
