//! Knowledge connector: low-rank deltas on the attention query and key
//! projections, scaled by the both-gates indicator.
//!
//! `Q = h(W_Q + 𝟙·ΔW_Q)`, `K = h(W_K + 𝟙·ΔW_K)`, `V = h·W_V`. With a unimodal
//! query the indicator is 0 and attention is exactly the frozen one.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::memi::{indicator, AdapterBank, BoundLora, LoraAdapter, ModalityGates, Trainable};
use crate::model::{BoundLayer, FrozenWeights, ModelConfig};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectorLayer {
    pub layer: usize,
    pub q: LoraAdapter,
    pub k: LoraAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectorWeights {
    pub n_layers: usize,
    pub layers: Vec<ConnectorLayer>,
}

impl ConnectorWeights {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let layers = cfg
            .connector_layers()
            .into_iter()
            .map(|layer| ConnectorLayer {
                layer,
                q: LoraAdapter::new(d, d, cfg.lora_rank, rng),
                k: LoraAdapter::new(d, d, cfg.lora_rank, rng),
            })
            .collect();
        Self {
            n_layers: cfg.n_layers,
            layers,
        }
    }

    /// `q.down, q.up, k.down, k.up` per hosted layer, in layer order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|c| [&c.q.down, &c.q.up, &c.k.down, &c.k.up])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|c| [&mut c.q.down, &mut c.q.up, &mut c.k.down, &mut c.k.up])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn layer(&self, layer: usize) -> Option<&ConnectorLayer> {
        self.layers.iter().find(|c| c.layer == layer)
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: bool) -> Vec<Option<BoundConnectorLayer>> {
        let mut out: Vec<Option<BoundConnectorLayer>> = vec![None; self.n_layers];
        for c in &self.layers {
            out[c.layer] = Some(BoundConnectorLayer {
                q: c.q.bind(tape, trainable),
                k: c.k.bind(tape, trainable),
            });
        }
        out
    }
}

/// Optimizer view over exactly the connector deltas.
pub fn connector_params(bank: &AdapterBank) -> Vec<&Tensor> {
    bank.tensors(Trainable::Connector)
}

pub fn connector_params_mut(bank: &mut AdapterBank) -> Vec<&mut Tensor> {
    bank.tensors_mut(Trainable::Connector)
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConnectorLayer {
    pub q: BoundLora,
    pub k: BoundLora,
}

/// Causal multi-head attention of one block on its normalized input `h`,
/// including the output projection.
pub fn attention_tape(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    lw: &BoundLayer,
    conn: Option<&BoundConnectorLayer>,
    gates: ModalityGates,
    h: Var,
) -> Result<Var> {
    let mut q = tape.matmul(h, lw.w_q)?;
    let mut k = tape.matmul(h, lw.w_k)?;
    let v = tape.matmul(h, lw.w_v)?;
    if let (1, Some(c)) = (indicator(gates), conn) {
        let dq = c.q.apply(tape, h)?;
        q = tape.add(q, dq)?;
        let dk = c.k.apply(tape, h)?;
        k = tape.add(k, dk)?;
    }
    let dh = cfg.head_dim();
    let inv = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for hd in 0..cfg.n_heads {
        let qh = tape.col_slice(q, hd * dh, dh)?;
        let kh = tape.col_slice(k, hd * dh, dh)?;
        let vh = tape.col_slice(v, hd * dh, dh)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, inv);
        let p = tape.softmax(s, true)?;
        heads.push(tape.matmul(p, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    tape.matmul(cat, lw.w_o)
}

/// Tensor-level gated attention of block `layer` on a normalized input `h`.
pub fn gated_attention(
    weights: &FrozenWeights,
    bank: Option<&AdapterBank>,
    layer: usize,
    gates: ModalityGates,
    h: &Tensor,
) -> Result<Tensor> {
    if layer >= weights.layers.len() {
        return Err(Error::Index(format!("layer {layer} of {}", weights.layers.len())));
    }
    let mut tape = Tape::new();
    let w = weights.bind(&mut tape, false);
    let conn = bank.map(|b| b.connector.bind(&mut tape, false));
    let x = tape.leaf_ref(h, false);
    let c = conn.as_ref().and_then(|v| v[layer].as_ref());
    let out = attention_tape(&mut tape, &weights.config, &w.layers[layer], c, gates, x)?;
    Ok(tape.value(out).clone())
}

/// `h · W_V`; carries no connector term.
pub fn value_projection(weights: &FrozenWeights, layer: usize, h: &Tensor) -> Result<Tensor> {
    tensor::matmul(h, &weights.layers[layer].w_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, random_matrix};
    use rand::SeedableRng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 3,
            n_heads: 4,
            d_ff: 32,
            vocab_size_text: 20,
            vocab_size_image: 8,
            max_seq_len: 16,
            lora_rank: 2,
            ..ModelConfig::default()
        }
    }

    fn perturb(bank: &mut AdapterBank) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in connector_params_mut(bank) {
            *t = random_matrix(&mut rng, t.rows(), t.cols(), 0.3);
        }
    }

    #[test]
    fn identity_for_unimodal_and_zero_deltas() {
        let c = cfg();
        let w = init_model(&c).unwrap();
        let mut bank = AdapterBank::dual(&c, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_matrix(&mut rng, 6, 16, 1.0);
        let base = gated_attention(&w, None, 1, ModalityGates::OFF, &h).unwrap();
        assert!(gated_attention(&w, Some(&bank), 1, ModalityGates::BOTH, &h).unwrap().bit_eq(&base));
        perturb(&mut bank);
        assert!(gated_attention(&w, Some(&bank), 1, ModalityGates::TEXTUAL, &h).unwrap().bit_eq(&base));
        assert!(gated_attention(&w, Some(&bank), 1, ModalityGates::VISUAL, &h).unwrap().bit_eq(&base));
        let both = gated_attention(&w, Some(&bank), 1, ModalityGates::BOTH, &h).unwrap();
        assert!(both.max_abs_diff(&base) > 1e-6);
    }

    #[test]
    fn parameter_view() {
        let c = cfg();
        let bank = AdapterBank::dual(&c, 1);
        let r = c.lora_rank;
        assert_eq!(bank.connector.parameter_count(), 3 * 2 * (16 * r + r * 16));
        let ptrs = |b: &AdapterBank| connector_params(b).iter().map(|t| *t as *const Tensor).collect::<Vec<_>>();
        assert_eq!(ptrs(&bank), ptrs(&bank));

        let single = ModelConfig {
            connector_layer_indices: Some(vec![2]),
            ..cfg()
        };
        let b1 = AdapterBank::dual(&single, 1);
        assert_eq!(b1.connector.parameter_count(), 2 * (16 * r + r * 16));
        assert!(b1.connector.layer(2).is_some() && b1.connector.layer(0).is_none());
    }

    #[test]
    fn optimizer_through_view_leaves_adapters() {
        use crate::optim::{Adam, AdamConfig};
        let c = cfg();
        let mut bank = AdapterBank::dual(&c, 1);
        let v = bank.fingerprint(Trainable::Visual);
        let t = bank.fingerprint(Trainable::Textual);
        let grads: Vec<Tensor> = connector_params(&bank)
            .iter()
            .map(|p| Tensor::filled(p.shape(), 0.1))
            .collect();
        let grefs: Vec<&Tensor> = grads.iter().collect();
        let before = bank.fingerprint(Trainable::Connector);
        let mut opt = Adam::new(AdamConfig::with_lr(0.01)).unwrap();
        opt.step(&mut connector_params_mut(&mut bank), &grefs).unwrap();
        assert_ne!(bank.fingerprint(Trainable::Connector), before);
        assert_eq!(bank.fingerprint(Trainable::Visual), v);
        assert_eq!(bank.fingerprint(Trainable::Textual), t);
    }

    #[test]
    fn value_projection_ignores_connector() {
        let c = cfg();
        let w = init_model(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_matrix(&mut rng, 4, 16, 1.0);
        let v = value_projection(&w, 0, &h).unwrap();
        assert_eq!(v, tensor::matmul(&h, &w.layers[0].w_v).unwrap());
    }
}
