//! Internal memory: modality-specific low-rank adapters beside every FFN.
//!
//! Each block output is `h' + m0 + I_v·m_v + I_t·m_t`, where `m0` is the
//! frozen FFN and `m_v`, `m_t` are the visual and textual adapter outputs.
//! Gates come only from the query type. An edit trains exactly one adapter
//! set, chosen by the edit's modality.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::connector::{BoundConnectorLayer, ConnectorWeights};
use crate::error::{Error, Result};
use crate::model::{self, random_matrix, BoundLayer, FrozenWeights, ModelConfig, Sequence};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{self, Tensor};
use crate::types::QueryType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityGates {
    pub visual: bool,
    pub textual: bool,
}

impl ModalityGates {
    pub const OFF: Self = Self::new(false, false);
    pub const VISUAL: Self = Self::new(true, false);
    pub const TEXTUAL: Self = Self::new(false, true);
    pub const BOTH: Self = Self::new(true, true);

    pub const fn new(visual: bool, textual: bool) -> Self {
        Self { visual, textual }
    }

    pub fn any(self) -> bool {
        self.visual || self.textual
    }
}

pub fn gates_for_query(qtype: QueryType) -> ModalityGates {
    match qtype {
        QueryType::Visual => ModalityGates::VISUAL,
        QueryType::Textual => ModalityGates::TEXTUAL,
        QueryType::Compositional => ModalityGates::BOTH,
    }
}

/// 1 iff both modality gates are on.
pub fn indicator(g: ModalityGates) -> u8 {
    u8::from(g.visual && g.textual)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `d_in × r`
    pub down: Tensor,
    /// `r × d_out`, zero at initialization
    pub up: Tensor,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn new(d_in: usize, d_out: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            down: random_matrix(rng, d_in, rank, 1.0 / (d_in as f64).sqrt()),
            up: Tensor::zeros(&[rank, d_out]),
            scale: 1.0,
        }
    }

    pub fn rank(&self) -> usize {
        self.down.cols()
    }

    /// Dense `scale · down · up`.
    pub fn materialize(&self) -> Tensor {
        let mut m = tensor::matmul(&self.down, &self.up).expect("adapter shapes");
        m.scale(self.scale);
        m
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: bool) -> BoundLora {
        BoundLora {
            down: tape.leaf_ref(&self.down, trainable),
            up: tape.leaf_ref(&self.up, trainable),
            scale: self.scale,
        }
    }
}

/// `scale · (x · down) · up`.
pub fn lora_delta(adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    let mut out = tensor::matmul(&tensor::matmul(x, &adapter.down)?, &adapter.up)?;
    out.scale(adapter.scale);
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLora {
    pub down: Var,
    pub up: Var,
    pub scale: f64,
}

impl BoundLora {
    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let t = tape.matmul(x, self.down)?;
        let out = tape.matmul(t, self.up)?;
        Ok(if self.scale == 1.0 {
            out
        } else {
            tape.scale(out, self.scale)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterLayout {
    /// Separate visual (θ_v) and textual (θ_t) adapters.
    Dual,
    /// One adapter shared by both modalities.
    Shared,
}

/// Which adapter parameters a forward pass should differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    None,
    Visual,
    Textual,
    Shared,
    Connector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterBank {
    pub layout: AdapterLayout,
    pub visual: Vec<LoraAdapter>,
    pub textual: Vec<LoraAdapter>,
    pub shared: Vec<LoraAdapter>,
    pub connector: ConnectorWeights,
}

impl AdapterBank {
    /// Two rank-`r` adapter sets per FFN plus a zero connector.
    pub fn dual(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let visual = (0..cfg.n_layers)
            .map(|_| LoraAdapter::new(d, d, cfg.lora_rank, &mut rng))
            .collect();
        let textual = (0..cfg.n_layers)
            .map(|_| LoraAdapter::new(d, d, cfg.lora_rank, &mut rng))
            .collect();
        let connector = ConnectorWeights::new(cfg, &mut rng);
        Self {
            layout: AdapterLayout::Dual,
            visual,
            textual,
            shared: Vec::new(),
            connector,
        }
    }

    /// One rank-`2r` adapter per FFN, matching the dual layout's budget.
    pub fn shared(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let shared = (0..cfg.n_layers)
            .map(|_| LoraAdapter::new(d, d, 2 * cfg.lora_rank, &mut rng))
            .collect();
        let connector = ConnectorWeights::new(cfg, &mut rng);
        Self {
            layout: AdapterLayout::Shared,
            visual: Vec::new(),
            textual: Vec::new(),
            shared,
            connector,
        }
    }

    fn set_tensors(set: &[LoraAdapter]) -> Vec<&Tensor> {
        set.iter().flat_map(|a| [&a.down, &a.up]).collect()
    }

    fn set_tensors_mut(set: &mut [LoraAdapter]) -> Vec<&mut Tensor> {
        set.iter_mut().flat_map(|a| [&mut a.down, &mut a.up]).collect()
    }

    pub fn visual_tensors(&self) -> Vec<&Tensor> {
        Self::set_tensors(&self.visual)
    }

    pub fn textual_tensors(&self) -> Vec<&Tensor> {
        Self::set_tensors(&self.textual)
    }

    pub fn shared_tensors(&self) -> Vec<&Tensor> {
        Self::set_tensors(&self.shared)
    }

    pub fn tensors(&self, which: Trainable) -> Vec<&Tensor> {
        match which {
            Trainable::None => Vec::new(),
            Trainable::Visual => self.visual_tensors(),
            Trainable::Textual => self.textual_tensors(),
            Trainable::Shared => self.shared_tensors(),
            Trainable::Connector => self.connector.tensors(),
        }
    }

    pub fn tensors_mut(&mut self, which: Trainable) -> Vec<&mut Tensor> {
        match which {
            Trainable::None => Vec::new(),
            Trainable::Visual => Self::set_tensors_mut(&mut self.visual),
            Trainable::Textual => Self::set_tensors_mut(&mut self.textual),
            Trainable::Shared => Self::set_tensors_mut(&mut self.shared),
            Trainable::Connector => self.connector.tensors_mut(),
        }
    }

    pub fn fingerprint(&self, which: Trainable) -> String {
        model::fingerprint_tensors(self.tensors(which))
    }

    /// Adapter set an edit of this query type trains.
    pub fn edit_target(&self, qtype: QueryType) -> Result<Trainable> {
        match (self.layout, qtype) {
            (_, QueryType::Compositional) => Err(Error::Precondition(
                "an edit must alter either the visual or the textual adapter, not both".into(),
            )),
            (AdapterLayout::Shared, _) => Ok(Trainable::Shared),
            (AdapterLayout::Dual, QueryType::Visual) => Ok(Trainable::Visual),
            (AdapterLayout::Dual, QueryType::Textual) => Ok(Trainable::Textual),
        }
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: Trainable) -> BoundAdapters {
        let bind_set = |tape: &mut Tape<'p>, set: &'p [LoraAdapter], on: bool| -> Vec<BoundLora> {
            set.iter().map(|a| a.bind(tape, on)).collect()
        };
        let visual = bind_set(tape, &self.visual, trainable == Trainable::Visual);
        let textual = bind_set(tape, &self.textual, trainable == Trainable::Textual);
        let shared = bind_set(tape, &self.shared, trainable == Trainable::Shared);
        let connector = self.connector.bind(tape, trainable == Trainable::Connector);
        BoundAdapters {
            visual,
            textual,
            shared,
            connector,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundAdapters {
    pub visual: Vec<BoundLora>,
    pub textual: Vec<BoundLora>,
    pub shared: Vec<BoundLora>,
    /// Indexed by model layer; `None` where no connector is hosted.
    pub connector: Vec<Option<BoundConnectorLayer>>,
}

impl BoundAdapters {
    pub fn connector_layer(&self, layer: usize) -> Option<&BoundConnectorLayer> {
        self.connector.get(layer).and_then(Option::as_ref)
    }

    /// Handles for `which`, in [`AdapterBank::tensors`] order.
    pub fn vars(&self, which: Trainable) -> Vec<Var> {
        let set = |s: &[BoundLora]| s.iter().flat_map(|b| [b.down, b.up]).collect();
        match which {
            Trainable::None => Vec::new(),
            Trainable::Visual => set(&self.visual),
            Trainable::Textual => set(&self.textual),
            Trainable::Shared => set(&self.shared),
            Trainable::Connector => self
                .connector
                .iter()
                .flatten()
                .flat_map(|c| [c.q.down, c.q.up, c.k.down, c.k.up])
                .collect(),
        }
    }
}

/// Summation order of the two modality increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummandOrder {
    VisualFirst,
    TextualFirst,
}

/// Block FFN with adapter fusion: `h_in + m0 + I_v·m_v + I_t·m_t`.
#[allow(clippy::too_many_arguments)]
pub fn fused_ffn_tape(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    lw: &BoundLayer,
    adapters: Option<&BoundAdapters>,
    layer: usize,
    gates: ModalityGates,
    h_in: Var,
    order: SummandOrder,
) -> Result<Var> {
    let b = tape.layer_norm(h_in, lw.ln2_g, lw.ln2_b, cfg.ln_eps)?;
    let f = tape.matmul(b, lw.w_1)?;
    let f = tape.add_row_bias(f, lw.b_1)?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, lw.w_2)?;
    let m0 = tape.add_row_bias(f, lw.b_2)?;
    let mut h = tape.add(h_in, m0)?;
    let Some(ad) = adapters else { return Ok(h) };

    if let Some(s) = ad.shared.get(layer) {
        if gates.any() {
            let m = s.apply(tape, b)?;
            h = tape.add(h, m)?;
        }
    }
    let slots = match order {
        SummandOrder::VisualFirst => [(gates.visual, ad.visual.get(layer)), (gates.textual, ad.textual.get(layer))],
        SummandOrder::TextualFirst => [(gates.textual, ad.textual.get(layer)), (gates.visual, ad.visual.get(layer))],
    };
    // a zero gate multiplies the increment by 0, which is the same as skipping it
    for (on, adapter) in slots {
        if let (true, Some(a)) = (on, adapter) {
            let m = a.apply(tape, b)?;
            h = tape.add(h, m)?;
        }
    }
    Ok(h)
}

/// Tensor-level fused FFN of block `layer` for a block input `h_in`.
pub fn fused_ffn(
    weights: &FrozenWeights,
    bank: Option<&AdapterBank>,
    layer: usize,
    gates: ModalityGates,
    h_in: &Tensor,
) -> Result<Tensor> {
    fused_ffn_ordered(weights, bank, layer, gates, h_in, SummandOrder::VisualFirst)
}

pub fn fused_ffn_ordered(
    weights: &FrozenWeights,
    bank: Option<&AdapterBank>,
    layer: usize,
    gates: ModalityGates,
    h_in: &Tensor,
    order: SummandOrder,
) -> Result<Tensor> {
    if layer >= weights.layers.len() {
        return Err(Error::Index(format!("layer {layer} of {}", weights.layers.len())));
    }
    let mut tape = Tape::new();
    let w = weights.bind(&mut tape, false);
    let a = bank.map(|b| b.bind(&mut tape, Trainable::None));
    let x = tape.leaf_ref(h_in, false);
    let out = fused_ffn_tape(&mut tape, &weights.config, &w.layers[layer], a.as_ref(), layer, gates, x, order)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self { steps: 10, lr: 1e-2 }
    }
}

/// Trains only the adapter matching `qtype` on the answer span of `seq`, with
/// a fresh optimizer. Gates during training are those of `qtype`.
pub fn edit_update(
    weights: &FrozenWeights,
    bank: &mut AdapterBank,
    qtype: QueryType,
    seq: &Sequence,
    cfg: &EditConfig,
) -> Result<()> {
    let target = bank.edit_target(qtype)?;
    if cfg.steps == 0 {
        return Ok(());
    }
    let gates = gates_for_query(qtype);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr))?;
    for _ in 0..cfg.steps {
        let grads = {
            let mut tape = Tape::new();
            let w = weights.bind(&mut tape, false);
            let a = bank.bind(&mut tape, target);
            let (loss, _) = model::sequence_loss(&mut tape, &weights.config, &w, Some(&a), gates, seq)?;
            let mut g = tape.backward(loss)?;
            model::collect_grads(&mut g, &a.vars(target), &bank.tensors(target))
        };
        let grefs: Vec<&Tensor> = grads.iter().collect();
        opt.step(&mut bank.tensors_mut(target), &grefs)?;
    }
    Ok(())
}

/// Smallest principal angle (radians) between the column spaces of two
/// matrices with the same number of rows.
pub fn min_principal_angle(a: &Tensor, b: &Tensor) -> Result<f64> {
    use nalgebra::DMatrix;
    if a.rows() != b.rows() {
        return Err(Error::Dimension("principal angles need equal row counts".into()));
    }
    let basis = |t: &Tensor| -> DMatrix<f64> {
        let m = DMatrix::from_row_slice(t.rows(), t.cols(), t.data());
        let svd = m.svd(true, false);
        let u = svd.u.expect("u requested");
        let tol = svd.singular_values.max() * 1e-10;
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > tol)
            .collect();
        u.select_columns(keep.iter())
    };
    let (qa, qb) = (basis(a), basis(b));
    if qa.ncols() == 0 || qb.ncols() == 0 {
        return Err(Error::Numeric("zero matrix has no column space".into()));
    }
    let cos_max = (qa.transpose() * qb).singular_values().max().min(1.0);
    Ok(cos_max.acos())
}
