//! AdamW with decoupled weight decay and a linear-warmup schedule.

use std::collections::BTreeMap;

use crate::encoder::Parameters;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Base learning rate scaled by a linear warmup over the first 5% of steps,
/// constant afterwards. `step` is zero-based.
pub fn lr_at(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    let warmup = ((total_steps as f64) * 0.05).round().max(1.0) as u64;
    if step + 1 >= warmup {
        base_lr
    } else {
        base_lr * (step + 1) as f64 / warmup as f64
    }
}

/// AdamW state over named tensors. Weight decay applies to matrices only;
/// rank-1 tensors (biases, norm scales) are not decayed.
pub struct AdamW<T: Element> {
    cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient entry are carried over
    /// unchanged (and bit-identical). Returns the full updated parameter set.
    pub fn step(
        &mut self,
        params: &Parameters<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<Parameters<T>> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_minus_b1 = T::from_f64(1.0 - self.cfg.beta1);
        let one_minus_b2 = T::from_f64(1.0 - self.cfg.beta2);
        let bias1 = T::from_f64(1.0 - self.cfg.beta1.powi(t));
        let bias2 = T::from_f64(1.0 - self.cfg.beta2.powi(t));
        let eps = T::from_f64(self.cfg.eps);
        let lr_t = T::from_f64(lr);

        let mut out = BTreeMap::new();
        for (name, theta) in params.iter() {
            let Some(g) = grads.get(name) else {
                out.insert(name.clone(), theta.clone());
                continue;
            };
            if g.shape() != theta.shape() {
                return Err(Error::shape(format!(
                    "gradient for {name} has shape {:?}, parameter is {:?}",
                    g.shape(),
                    theta.shape()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape()));
            let decay = if theta.rank() >= 2 {
                T::from_f64(self.cfg.weight_decay)
            } else {
                T::zero()
            };

            let mut new_data = theta.data().to_vec();
            {
                let md = m.data_mut();
                let vd = v.data_mut();
                for (((p, &gv), mi), vi) in new_data
                    .iter_mut()
                    .zip(g.data())
                    .zip(md.iter_mut())
                    .zip(vd.iter_mut())
                {
                    *mi = b1 * *mi + one_minus_b1 * gv;
                    *vi = b2 * *vi + one_minus_b2 * gv * gv;
                    let m_hat = *mi / bias1;
                    let v_hat = *vi / bias2;
                    let update = lr_t * (m_hat / (v_hat.sqrt() + eps));
                    let wd = lr_t * decay * *p;
                    *p = *p - update - wd;
                }
            }
            let updated = Tensor::new(theta.shape().to_vec(), new_data)
                .map_err(|e| Error::NonFinite(format!("optimizer update for {name}: {e}")))?;
            out.insert(name.clone(), updated);
        }
        Ok(Parameters::from_map(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    fn tiny_params() -> Parameters<f64> {
        let cfg = ModelConfig {
            hidden_dim: 8,
            layers: 1,
            heads: 2,
            vocab_size: crate::encoder::tokenizer::VOCAB_SIZE,
            max_seq: 8,
            patch_size: 2,
            image_channels: 1,
            lora_rank: 0,
            lora_alpha: 16.0,
        };
        Parameters::init(&cfg, 0).unwrap()
    }

    #[test]
    fn zero_lr_is_bitwise_identity() {
        let params = tiny_params();
        let mut grads = BTreeMap::new();
        for (name, t) in params.iter() {
            grads.insert(name.clone(), Tensor::full(t.shape(), 0.5));
        }
        let mut opt = AdamW::new(AdamWConfig::default());
        let updated = opt.step(&params, &grads, 0.0).unwrap();
        for (name, t) in params.iter() {
            assert!(t.bit_eq(updated.get(name).unwrap()), "{name} moved");
        }
    }

    #[test]
    fn gradient_descends() {
        let params = tiny_params();
        let mut grads = BTreeMap::new();
        grads.insert(
            "embed.tok".to_string(),
            Tensor::full(params.get("embed.tok").unwrap().shape(), 1.0),
        );
        let mut opt = AdamW::new(AdamWConfig::default());
        let updated = opt.step(&params, &grads, 1e-2).unwrap();
        let before = params.get("embed.tok").unwrap().data()[0];
        let after = updated.get("embed.tok").unwrap().data()[0];
        assert!(after < before);
        // untouched parameter is carried over bit-identically
        assert!(updated
            .get("layer0.attn.wq")
            .unwrap()
            .bit_eq(params.get("layer0.attn.wq").unwrap()));
    }

    #[test]
    fn warmup_schedule() {
        // 5% of 500 steps = 25 warmup steps
        assert!((lr_at(1.0, 0, 500) - 1.0 / 25.0).abs() < 1e-12);
        assert!((lr_at(1.0, 12, 500) - 13.0 / 25.0).abs() < 1e-12);
        assert_eq!(lr_at(1.0, 24, 500), 1.0);
        assert_eq!(lr_at(1.0, 499, 500), 1.0);
        // warmup is at least one step
        assert_eq!(lr_at(0.5, 0, 1), 0.5);
    }
}
