//! Tiny decoder-only transformer over the joint word + image vocabulary.
//!
//! Every block runs `x + attention(LN(x))` through the gated connector path
//! and then fuses the frozen FFN with the modality adapters. The weights in
//! [`FrozenWeights`] are trained once by [`pretrain`] and never written again.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Grads, Tape, Var};
use crate::connector::{self, BoundConnectorLayer};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::memi::{self, AdapterBank, BoundAdapters, ModalityGates};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::vocab::{TokenId, EOA};

pub const CHECKPOINT_FORMAT: &str = "kedit.model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size_text: usize,
    pub vocab_size_image: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    /// Layers hosting the knowledge connector; `None` means every layer.
    pub connector_layer_indices: Option<Vec<usize>>,
    pub seed: u64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            vocab_size_text: 128,
            vocab_size_image: 64,
            max_seq_len: 64,
            lora_rank: 8,
            connector_layer_indices: None,
            seed: 0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn vocab_size(&self) -> usize {
        self.vocab_size_text + self.vocab_size_image
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn connector_layers(&self) -> Vec<usize> {
        match &self.connector_layer_indices {
            Some(v) => v.clone(),
            None => (0..self.n_layers).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return fail("n_layers, d_ff and max_seq_len must be positive".into());
        }
        if self.lora_rank == 0 {
            return fail("lora_rank must be at least 1".into());
        }
        if self.vocab_size_text == 0 || self.vocab_size_image == 0 {
            return fail("both vocabulary partitions must be non-empty".into());
        }
        if let Some(idx) = &self.connector_layer_indices {
            if idx.iter().any(|&l| l >= self.n_layers) {
                return fail(format!("connector layer out of range in {idx:?}"));
            }
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != idx.len() || sorted != *idx {
                return fail("connector layers must be strictly increasing".into());
            }
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be > 0".into());
        }
        Ok(())
    }

    /// Closed-form count of frozen parameters.
    pub fn parameter_count(&self) -> usize {
        let (d, f, v, t) = (self.d_model, self.d_ff, self.vocab_size(), self.max_seq_len);
        let per_layer = 4 * d + 4 * d * d + d * f + f + f * d + d;
        v * d + t * d + self.n_layers * per_layer + 2 * d + d * v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
}

impl LayerWeights {
    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.ln2_g,
            &self.ln2_b, &self.w_1, &self.b_1, &self.w_2, &self.b_2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.w_q, &mut self.w_k, &mut self.w_v,
            &mut self.w_o, &mut self.ln2_g, &mut self.ln2_b, &mut self.w_1, &mut self.b_1,
            &mut self.w_2, &mut self.b_2,
        ]
    }
}

/// The pre-edit weights θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenWeights {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub w_out: Tensor,
}

pub(crate) fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::matrix(r, c, (0..r * c).map(|_| dist.sample(rng)).collect())
}

pub fn init_model(config: &ModelConfig) -> Result<FrozenWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size());
    let proj_std = 1.0 / (d as f64).sqrt();
    let out_std = proj_std / (2.0 * config.n_layers as f64).sqrt();
    let tok_emb = random_matrix(&mut rng, v, d, 0.3);
    let pos_emb = random_matrix(&mut rng, config.max_seq_len, d, 0.1);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            ln1_g: Tensor::filled(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            w_q: random_matrix(&mut rng, d, d, proj_std),
            w_k: random_matrix(&mut rng, d, d, proj_std),
            w_v: random_matrix(&mut rng, d, d, proj_std),
            w_o: random_matrix(&mut rng, d, d, out_std),
            ln2_g: Tensor::filled(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
            w_1: random_matrix(&mut rng, d, f, proj_std),
            b_1: Tensor::zeros(&[f]),
            w_2: random_matrix(&mut rng, f, d, out_std / 2.0),
            b_2: Tensor::zeros(&[d]),
        })
        .collect();
    Ok(FrozenWeights {
        config: config.clone(),
        tok_emb,
        pos_emb,
        layers,
        lnf_g: Tensor::filled(&[d], 1.0),
        lnf_b: Tensor::zeros(&[d]),
        w_out: random_matrix(&mut rng, d, v, proj_std),
    })
}

/// Tape handles for one layer's weights.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
}

#[derive(Debug, Clone)]
pub struct BoundWeights {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<BoundLayer>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub w_out: Var,
}

impl BoundWeights {
    /// All handles in [`FrozenWeights::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([
                l.ln1_g, l.ln1_b, l.w_q, l.w_k, l.w_v, l.w_o, l.ln2_g, l.ln2_b, l.w_1, l.b_1,
                l.w_2, l.b_2,
            ]);
        }
        out.extend([self.lnf_g, self.lnf_b, self.w_out]);
        out
    }
}

impl FrozenWeights {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.w_out]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.w_out]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: bool) -> BoundWeights {
        let mut leaf = |t: &'p Tensor| tape.leaf_ref(t, trainable);
        let tok_emb = leaf(&self.tok_emb);
        let pos_emb = leaf(&self.pos_emb);
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                ln1_g: leaf(&l.ln1_g),
                ln1_b: leaf(&l.ln1_b),
                w_q: leaf(&l.w_q),
                w_k: leaf(&l.w_k),
                w_v: leaf(&l.w_v),
                w_o: leaf(&l.w_o),
                ln2_g: leaf(&l.ln2_g),
                ln2_b: leaf(&l.ln2_b),
                w_1: leaf(&l.w_1),
                b_1: leaf(&l.b_1),
                w_2: leaf(&l.w_2),
                b_2: leaf(&l.b_2),
            })
            .collect();
        BoundWeights {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: leaf(&self.lnf_g),
            lnf_b: leaf(&self.lnf_b),
            w_out: leaf(&self.w_out),
        }
    }

    /// SHA-256 over the exact bit patterns of every tensor.
    pub fn fingerprint(&self) -> String {
        fingerprint_tensors(self.tensors())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            weights: self.clone(),
        };
        write_json(path, &ckpt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = read_json(path)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "{} v{} is not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.weights.config.validate()?;
        Ok(ckpt.weights)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    weights: FrozenWeights,
}

pub fn fingerprint_tensors<'a>(ts: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for t in ts {
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(f, value)?;
    Ok(())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}

/// Builds the forward graph and returns logits for `logit_rows` only.
#[allow(clippy::too_many_arguments)]
pub fn forward_tape<'p>(
    tape: &mut Tape<'p>,
    cfg: &ModelConfig,
    w: &BoundWeights,
    adapters: Option<&BoundAdapters>,
    gates: ModalityGates,
    tokens: &[TokenId],
    logit_rows: &[usize],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Precondition("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Length {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let e = tape.gather(w.tok_emb, tokens)?;
    let p = tape.gather(w.pos_emb, &positions)?;
    let mut x = tape.add(e, p)?;
    for (li, lw) in w.layers.iter().enumerate() {
        let a = tape.layer_norm(x, lw.ln1_g, lw.ln1_b, cfg.ln_eps)?;
        let conn: Option<&BoundConnectorLayer> = adapters.and_then(|b| b.connector_layer(li));
        let z = connector::attention_tape(tape, cfg, lw, conn, gates, a)?;
        x = tape.add(x, z)?;
        x = memi::fused_ffn_tape(tape, cfg, lw, adapters, li, gates, x, memi::SummandOrder::VisualFirst)?;
    }
    let sel = tape.select_rows(x, logit_rows)?;
    let h = tape.layer_norm(sel, w.lnf_g, w.lnf_b, cfg.ln_eps)?;
    tape.matmul(h, w.w_out)
}

/// Logits for every position, shape `t × V`.
pub fn forward(
    weights: &FrozenWeights,
    adapters: Option<&AdapterBank>,
    gates: ModalityGates,
    tokens: &[TokenId],
) -> Result<Tensor> {
    let rows: Vec<usize> = (0..tokens.len()).collect();
    forward_rows(weights, adapters, gates, tokens, &rows)
}

pub fn forward_rows(
    weights: &FrozenWeights,
    adapters: Option<&AdapterBank>,
    gates: ModalityGates,
    tokens: &[TokenId],
    rows: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = weights.bind(&mut tape, false);
    let a = adapters.map(|b| b.bind(&mut tape, memi::Trainable::None));
    let out = forward_tape(&mut tape, &weights.config, &w, a.as_ref(), gates, tokens, rows)?;
    Ok(tape.value(out).clone())
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding until [`EOA`] or `max_new` tokens. The sentinel is not
/// included in the result.
pub fn greedy_decode(
    weights: &FrozenWeights,
    adapters: Option<&AdapterBank>,
    gates: ModalityGates,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<Vec<TokenId>> {
    greedy_decode_with(prompt, max_new, |seq| {
        let last = seq.len() - 1;
        let logits = forward_rows(weights, adapters, gates, seq, &[last])?;
        Ok(logits.row(0).to_vec())
    })
}

/// Greedy decoding against any next-token logit function.
pub fn greedy_decode_with<F>(prompt: &[TokenId], max_new: usize, mut next: F) -> Result<Vec<TokenId>>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>>,
{
    if prompt.is_empty() {
        return Err(Error::Precondition("greedy_decode needs a non-empty prompt".into()));
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let tok = argmax(&next(&seq)?);
        if tok == EOA {
            break;
        }
        out.push(tok);
        seq.push(tok);
    }
    Ok(out)
}

/// One supervised sequence: loss is taken on `answer` only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub prompt: Vec<TokenId>,
    /// Answer tokens, terminated by [`EOA`].
    pub answer: Vec<TokenId>,
}

impl Sequence {
    pub fn new(prompt: Vec<TokenId>, answer_span: &[TokenId]) -> Self {
        let mut answer = answer_span.to_vec();
        answer.push(EOA);
        Self { prompt, answer }
    }

    /// Input tokens and the rows whose logits predict the answer.
    pub fn teacher_forced(&self) -> (Vec<TokenId>, Vec<usize>) {
        let mut tokens = self.prompt.clone();
        tokens.extend_from_slice(&self.answer[..self.answer.len() - 1]);
        let start = self.prompt.len() - 1;
        (tokens, (start..start + self.answer.len()).collect())
    }
}

/// Answer-span cross-entropy on the tape, plus whether every teacher-forced
/// argmax was correct (equivalent to a greedy exact match).
pub fn sequence_loss<'p>(
    tape: &mut Tape<'p>,
    cfg: &ModelConfig,
    w: &BoundWeights,
    adapters: Option<&BoundAdapters>,
    gates: ModalityGates,
    seq: &Sequence,
) -> Result<(Var, bool)> {
    let (tokens, rows) = seq.teacher_forced();
    let logits = forward_tape(tape, cfg, w, adapters, gates, &tokens, &rows)?;
    let lv = tape.value(logits);
    let exact = seq
        .answer
        .iter()
        .enumerate()
        .all(|(i, &t)| argmax(lv.row(i)) == t);
    let loss = tape.cross_entropy(logits, &seq.answer)?;
    Ok((loss, exact))
}

pub(crate) fn collect_grads(grads: &mut Grads, vars: &[Var], like: &[&Tensor]) -> Vec<Tensor> {
    vars.iter()
        .zip(like)
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

/// Sums per-item gradients in item order so results do not depend on
/// scheduling.
pub(crate) fn reduce_grads(parts: Vec<Vec<Tensor>>) -> Option<Vec<Tensor>> {
    let mut it = parts.into_iter();
    let mut acc = it.next()?;
    for part in it {
        for (a, p) in acc.iter_mut().zip(&part) {
            a.add_assign(p);
        }
    }
    Some(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lr: f64,
    /// Learning rate reached at `max_epochs` under cosine decay.
    #[serde(default)]
    pub lr_min: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub target_acc: f64,
    /// Evaluate exact-match accuracy every this many epochs.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            lr_min: 1e-4,
            batch_size: 16,
            max_epochs: 200,
            target_acc: 0.99,
            eval_every: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub accuracy: f64,
    pub final_loss: f64,
    pub history: Vec<(usize, f64, f64)>,
}

/// Exact-match accuracy of greedy answers over a corpus.
pub fn corpus_accuracy(
    weights: &FrozenWeights,
    adapters: Option<&AdapterBank>,
    gates: ModalityGates,
    corpus: &[Sequence],
    exec: Exec,
) -> Result<f64> {
    let hits = exec.map(corpus, |seq| -> Result<bool> {
        let mut tape = Tape::new();
        let w = weights.bind(&mut tape, false);
        let a = adapters.map(|b| b.bind(&mut tape, memi::Trainable::None));
        let (_, exact) = sequence_loss(&mut tape, &weights.config, &w, a.as_ref(), gates, seq)?;
        Ok(exact)
    });
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / corpus.len() as f64)
}

/// Next-token training of the base weights on answer spans until the corpus
/// exact-match accuracy reaches `target_acc`. Hitting the epoch cap first is a
/// [`Error::TrainingFailure`].
pub fn pretrain(
    weights: FrozenWeights,
    corpus: &[Sequence],
    cfg: &PretrainConfig,
    exec: Exec,
    progress: impl FnMut(usize, f64, f64),
) -> Result<(FrozenWeights, PretrainReport)> {
    let (weights, report) = pretrain_best_effort(weights, corpus, cfg, exec, progress)?;
    if report.accuracy < cfg.target_acc {
        return Err(Error::TrainingFailure {
            achieved: report.accuracy,
            target: cfg.target_acc,
        });
    }
    Ok((weights, report))
}

/// Like [`pretrain`] but returns the weights reached at the epoch cap.
pub fn pretrain_best_effort(
    weights: FrozenWeights,
    corpus: &[Sequence],
    cfg: &PretrainConfig,
    exec: Exec,
    progress: impl FnMut(usize, f64, f64),
) -> Result<(FrozenWeights, PretrainReport)> {
    pretrain_resampled(weights, corpus, |_| Ok(Vec::new()), cfg, exec, progress)
}

/// Best-effort pretraining on `fixed` plus a part redrawn every epoch:
/// epoch `e` trains on `fresh(e)`, and accuracy is measured on `fixed` plus
/// `fresh(0)`, a draw never trained on.
pub fn pretrain_resampled(
    mut weights: FrozenWeights,
    fixed: &[Sequence],
    mut fresh: impl FnMut(u64) -> Result<Vec<Sequence>>,
    cfg: &PretrainConfig,
    exec: Exec,
    mut progress: impl FnMut(usize, f64, f64),
) -> Result<(FrozenWeights, PretrainReport)> {
    use rand::seq::SliceRandom;
    let mut eval_set = fixed.to_vec();
    eval_set.extend(fresh(0)?);
    if eval_set.is_empty() {
        return Err(Error::Precondition("pretraining corpus is empty".into()));
    }
    if !(cfg.target_acc > 0.0 && cfg.target_acc <= 1.0) {
        return Err(Error::Precondition(format!("target_acc {} not in (0, 1]", cfg.target_acc)));
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut accuracy = 0.0;
    let mut last_loss = f64::NAN;
    for epoch in 1..=cfg.max_epochs {
        let progress_frac = (epoch - 1) as f64 / cfg.max_epochs.max(1) as f64;
        let lr_min = cfg.lr_min.min(cfg.lr);
        opt.config.lr = lr_min + 0.5 * (cfg.lr - lr_min) * (1.0 + (std::f64::consts::PI * progress_frac).cos());
        let mut corpus = fixed.to_vec();
        corpus.extend(fresh(epoch as u64)?);
        let corpus = &corpus[..];
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let w = &weights;
            let parts = exec.map(batch, |&i| -> Result<(f64, Vec<Tensor>)> {
                let mut tape = Tape::new();
                let bw = w.bind(&mut tape, true);
                let (loss, _) = sequence_loss(&mut tape, &w.config, &bw, None, ModalityGates::OFF, &corpus[i])?;
                let value = tape.value(loss).data()[0];
                let mut g = tape.backward(loss)?;
                Ok((value, collect_grads(&mut g, &bw.vars(), &w.tensors())))
            });
            let mut grads = Vec::with_capacity(parts.len());
            for p in parts {
                let (l, g) = p?;
                epoch_loss += l;
                grads.push(g);
            }
            let mut total = reduce_grads(grads).expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            total.iter_mut().for_each(|g| g.scale(inv));
            let grefs: Vec<&Tensor> = total.iter().collect();
            opt.step(&mut weights.tensors_mut(), &grefs)?;
        }
        last_loss = epoch_loss / corpus.len() as f64;
        if !last_loss.is_finite() {
            return Err(Error::Numeric(format!("pretraining diverged at epoch {epoch}")));
        }
        if epoch % cfg.eval_every.max(1) == 0 || epoch == cfg.max_epochs {
            accuracy = corpus_accuracy(&weights, None, ModalityGates::OFF, &eval_set, exec)?;
            history.push((epoch, last_loss, accuracy));
            progress(epoch, last_loss, accuracy);
            if accuracy >= cfg.target_acc {
                return Ok((
                    weights,
                    PretrainReport {
                        epochs: epoch,
                        accuracy,
                        final_loss: last_loss,
                        history,
                    },
                ));
            }
        }
    }
    Ok((
        weights,
        PretrainReport {
            epochs: cfg.max_epochs,
            accuracy,
            final_loss: last_loss,
            history,
        },
    ))
}
