//! External memory: append-only textual and visual edit stores, small
//! trainable encoders, blended cosine retrieval and context assembly.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Tape, Var};
use crate::decompose::DecomposedQuery;
use crate::error::{Error, Result};
use crate::model::{self, random_matrix};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::types::{Modality, QueryType};
use crate::vocab::TokenId;
use crate::world::{
    EditPayload, EditRecord, EntityKind, ImageSpec, KnowledgeBase, Query, FRAMES_PER_RELATION,
    RELATIONS,
};

pub const SNAPSHOT_SCHEMA: &str = "kedit.store/1";
pub const ENCODER_SCHEMA: &str = "kedit.encoders/1";

/// Mean of token embeddings followed by a linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    /// `n_tokens × d_emb`
    pub emb: Tensor,
    /// `d_emb × d_out`
    pub head: Tensor,
}

impl Encoder {
    pub fn new(n_tokens: usize, d_emb: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            emb: random_matrix(rng, n_tokens, d_emb, 1.0),
            head: random_matrix(rng, d_emb, d_out, 1.0 / (d_emb as f64).sqrt()),
        }
    }

    pub fn encode(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (e, h) = (tape.leaf_ref(&self.emb, false), tape.leaf_ref(&self.head, false));
        let out = encode_tape(&mut tape, e, h, ids)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.emb, &self.head]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.emb, &mut self.head]
    }
}

pub(crate) fn encode_tape(tape: &mut Tape<'_>, emb: Var, head: Var, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Precondition("cannot encode an empty token list".into()));
    }
    let rows = tape.gather(emb, ids)?;
    let m = tape.mean_rows(rows)?;
    tape.matmul(m, head)
}

/// Text (`φ_t`) and image (`φ_v`) encoders plus the fixed score calibration
/// `sigmoid(kappa · (cos − margin))` used in training; image pairs use
/// `image_margin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub schema: String,
    pub text: Encoder,
    pub image: Encoder,
    pub kappa: f64,
    pub margin: f64,
    #[serde(default = "default_image_margin")]
    pub image_margin: f64,
}

impl EncoderParams {
    pub fn new(text_tokens: usize, image_tokens: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            schema: ENCODER_SCHEMA.into(),
            text: Encoder::new(text_tokens, dim, dim, &mut rng),
            image: Encoder::new(image_tokens, dim, dim, &mut rng),
            kappa: 10.0,
            margin: 0.5,
            image_margin: 0.5,
        }
    }

    pub fn for_world(kb: &KnowledgeBase, dim: usize, seed: u64) -> Self {
        Self::new(kb.vocab.text_len(), kb.vocab.image_len(), dim, seed)
    }

    pub fn encode_text(&self, kb: &KnowledgeBase, question: &str) -> Result<Vec<f64>> {
        self.text.encode(&kb.vocab.encode(question)?)
    }

    pub fn encode_image(&self, kb: &KnowledgeBase, image: ImageSpec) -> Result<Vec<f64>> {
        self.image.encode(&kb.image(image))
    }

    pub fn fingerprint(&self) -> String {
        model::fingerprint_tensors(self.text.tensors().into_iter().chain(self.image.tensors()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        model::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = model::read_json(path)?;
        if p.schema != ENCODER_SCHEMA {
            return Err(Error::Schema(format!("expected {ENCODER_SCHEMA}, found {}", p.schema)));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextMemoryEntry {
    pub edit_index: usize,
    pub question: String,
    pub answer: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualMemoryEntry {
    pub edit_index: usize,
    pub image: ImageSpec,
    pub question: String,
    pub answer: String,
    pub image_embedding: Vec<f64>,
    pub text_embedding: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryStore {
    pub text: Vec<TextMemoryEntry>,
    pub visual: Vec<VisualMemoryEntry>,
}

impl MemoryStore {
    /// Appends one entry for the edit's modality; no deduplication.
    pub fn add_edit(&mut self, kb: &KnowledgeBase, enc: &EncoderParams, edit: &EditRecord) -> Result<()> {
        match edit.payload {
            EditPayload::Visual { image, .. } => {
                self.visual.push(VisualMemoryEntry {
                    edit_index: edit.index,
                    image,
                    question: edit.prompt.question.clone(),
                    answer: edit.target.clone(),
                    image_embedding: enc.encode_image(kb, image)?,
                    text_embedding: enc.encode_text(kb, &edit.prompt.question)?,
                });
            }
            EditPayload::Textual { .. } => {
                self.text.push(TextMemoryEntry {
                    edit_index: edit.index,
                    question: edit.prompt.question.clone(),
                    answer: edit.target.clone(),
                    embedding: enc.encode_text(kb, &edit.prompt.question)?,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self, m: Modality) -> usize {
        match m {
            Modality::Visual => self.visual.len(),
            Modality::Textual => self.text.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty() && self.visual.is_empty()
    }

    pub fn entry(&self, m: Modality, index: usize) -> ContextEntry {
        match m {
            Modality::Visual => {
                let e = &self.visual[index];
                ContextEntry {
                    modality: m,
                    index,
                    image: Some(e.image),
                    question: e.question.clone(),
                    answer: e.answer.clone(),
                }
            }
            Modality::Textual => {
                let e = &self.text[index];
                ContextEntry {
                    modality: m,
                    index,
                    image: None,
                    question: e.question.clone(),
                    answer: e.answer.clone(),
                }
            }
        }
    }

    /// JSONL snapshot: a header line, then one entry per line.
    pub fn snapshot(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(
            &mut f,
            &serde_json::json!({"schema": SNAPSHOT_SCHEMA, "text": self.text.len(), "visual": self.visual.len()}),
        )?;
        f.write_all(b"\n")?;
        for e in &self.visual {
            serde_json::to_writer(&mut f, &serde_json::json!({"store": "visual", "entry": e}))?;
            f.write_all(b"\n")?;
        }
        for e in &self.text {
            serde_json::to_writer(&mut f, &serde_json::json!({"store": "text", "entry": e}))?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<Self> {
        use std::io::BufRead;
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let header: serde_json::Value = serde_json::from_str(&lines.next().ok_or_else(|| Error::Schema("empty snapshot".into()))??)?;
        if header["schema"] != SNAPSHOT_SCHEMA {
            return Err(Error::Schema(format!("expected {SNAPSHOT_SCHEMA}")));
        }
        let mut s = MemoryStore::default();
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(&line?)?;
            match v["store"].as_str() {
                Some("visual") => s.visual.push(serde_json::from_value(v["entry"].clone())?),
                Some("text") => s.text.push(serde_json::from_value(v["entry"].clone())?),
                other => return Err(Error::Schema(format!("unknown store {other:?}"))),
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub index: usize,
    pub score: f64,
}

/// Highest-scoring index; ties keep the lowest index. `None` when empty.
pub fn argmax_scores(scores: impl IntoIterator<Item = f64>) -> Option<Retrieval> {
    let mut best: Option<Retrieval> = None;
    for (index, score) in scores.into_iter().enumerate() {
        if best.map_or(true, |b| score > b.score) {
            best = Some(Retrieval { index, score });
        }
    }
    best
}

pub fn retrieve_text_embedding(store: &MemoryStore, query: &[f64]) -> Option<Retrieval> {
    argmax_scores(store.text.iter().map(|e| autograd::cosine(query, &e.embedding)))
}

/// `α·cos(image) + (1−α)·cos(question)` over the visual store.
pub fn retrieve_visual_embedding(store: &MemoryStore, image: &[f64], question: &[f64], alpha: f64) -> Option<Retrieval> {
    argmax_scores(store.visual.iter().map(|e| {
        alpha * autograd::cosine(image, &e.image_embedding) + (1.0 - alpha) * autograd::cosine(question, &e.text_embedding)
    }))
}

pub fn retrieve_text(kb: &KnowledgeBase, enc: &EncoderParams, store: &MemoryStore, question: &str) -> Result<Option<Retrieval>> {
    Ok(retrieve_text_embedding(store, &enc.encode_text(kb, question)?))
}

pub fn retrieve_visual(
    kb: &KnowledgeBase,
    enc: &EncoderParams,
    store: &MemoryStore,
    image: ImageSpec,
    question: &str,
    alpha: f64,
) -> Result<Option<Retrieval>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Precondition(format!("alpha {alpha} not in [0, 1]")));
    }
    Ok(retrieve_visual_embedding(
        store,
        &enc.encode_image(kb, image)?,
        &enc.encode_text(kb, question)?,
        alpha,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Minimum score for an entry to enter the context.
    pub tau: f64,
    pub alpha: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { tau: 0.8, alpha: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub modality: Modality,
    pub index: usize,
    pub image: Option<ImageSpec>,
    pub question: String,
    pub answer: String,
}

/// Outcome of one retrieval slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotOutcome {
    pub modality: Modality,
    pub index: Option<usize>,
    pub score: Option<f64>,
    /// Whether the entry passed the threshold and entered the context.
    pub included: bool,
    /// Whether the slot holds the entry the query is about, when known.
    pub hit: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievedContext {
    /// Context pairs in prompt order.
    pub entries: Vec<ContextEntry>,
    pub slots: Vec<SlotOutcome>,
}

impl RetrievedContext {
    pub fn scores(&self) -> Vec<Option<f64>> {
        self.slots.iter().map(|s| s.score).collect()
    }

    pub fn hit_flags(&self) -> Vec<Option<bool>> {
        self.slots.iter().map(|s| s.hit).collect()
    }

    fn push(&mut self, store: &MemoryStore, modality: Modality, r: Option<Retrieval>, tau: f64) {
        let included = r.map_or(false, |r| r.score >= tau);
        if let (true, Some(r)) = (included, r) {
            self.entries.push(store.entry(modality, r.index));
        }
        self.slots.push(SlotOutcome {
            modality,
            index: r.map(|r| r.index),
            score: r.map(|r| r.score),
            included,
            hit: None,
        });
    }
}

/// Visual retrieval, placeholder substitution with the retrieved identity,
/// then textual retrieval on the substituted question. Context order is
/// `[R_v; R_t]`. A wrong visual hit is not corrected.
pub fn compose_retrieval(
    kb: &KnowledgeBase,
    enc: &EncoderParams,
    store: &MemoryStore,
    dq: &DecomposedQuery,
    cfg: &RetrievalConfig,
) -> Result<RetrievedContext> {
    let (Some(iq), Some(_)) = (&dq.image_subquery, dq.placeholder_span) else {
        return Err(Error::Precondition("compositional retrieval needs a tagged placeholder".into()));
    };
    let mut ctx = RetrievedContext::default();
    let rv = retrieve_visual(kb, enc, store, iq.image, &iq.question, cfg.alpha)?;
    ctx.push(store, Modality::Visual, rv, cfg.tau);
    match rv {
        Some(r) => {
            let q = dq.substitute(&store.visual[r.index].answer)?;
            let rt = retrieve_text(kb, enc, store, &q)?;
            ctx.push(store, Modality::Textual, rt, cfg.tau);
        }
        None => ctx.push(store, Modality::Textual, None, cfg.tau),
    }
    Ok(ctx)
}

/// Retrieval for any query type: `R_t`, `R_v` or `[R_v; R_t]`.
pub fn retrieve_for(
    kb: &KnowledgeBase,
    enc: &EncoderParams,
    store: &MemoryStore,
    query: &Query,
    dq: &DecomposedQuery,
    cfg: &RetrievalConfig,
) -> Result<RetrievedContext> {
    match dq.qtype {
        QueryType::Compositional => compose_retrieval(kb, enc, store, dq, cfg),
        QueryType::Visual => {
            let iq = dq.image_subquery.as_ref().expect("visual subquery");
            let mut ctx = RetrievedContext::default();
            let r = retrieve_visual(kb, enc, store, iq.image, &iq.question, cfg.alpha)?;
            ctx.push(store, Modality::Visual, r, cfg.tau);
            Ok(ctx)
        }
        QueryType::Textual => {
            let mut ctx = RetrievedContext::default();
            let r = retrieve_text(kb, enc, store, &query.question)?;
            ctx.push(store, Modality::Textual, r, cfg.tau);
            Ok(ctx)
        }
    }
}

/// Prompt tokens: the retrieved QA pairs followed by the original query.
pub fn assemble_context(kb: &KnowledgeBase, query: &Query, ctx: &RetrievedContext) -> Result<Vec<TokenId>> {
    let mut t = Vec::new();
    for e in &ctx.entries {
        t.extend(kb.encode_pair(e.image, &e.question, &e.answer)?);
    }
    t.extend(kb.encode_query(query)?);
    Ok(t)
}

/// One line of the retrieval trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub query_id: String,
    pub qtype: QueryType,
    pub slots: Vec<SlotOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub dim: usize,
    pub negatives_per_positive: usize,
    pub max_iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Cosine at which the pair loss is centred; matching it to the
    /// retrieval threshold puts the decision boundary where retrieval cuts.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Image-pair margin. A visual entry whose question matches the query
    /// scores `α·cos_img + (1 − α)`, which reaches τ = 0.8 at α = 0.5 when
    /// `cos_img` = 0.6.
    #[serde(default = "default_image_margin")]
    pub image_margin: f64,
}

fn default_margin() -> f64 {
    0.8
}

fn default_image_margin() -> f64 {
    0.6
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            negatives_per_positive: 64,
            max_iters: 1500,
            batch: 32,
            lr: 1e-2,
            seed: 5,
            margin: default_margin(),
            image_margin: default_image_margin(),
        }
    }
}

/// One scored training pair for the encoders.
#[derive(Debug, Clone, PartialEq)]
pub enum PairItem {
    Text { a: Vec<usize>, b: Vec<usize>, label: f64 },
    Image { a: Vec<usize>, b: Vec<usize>, label: f64 },
}

/// Frame of `(subject, relation)` never shown to the encoders in training;
/// validation asks in this frame.
pub fn heldout_frame(subject: usize, relation: usize) -> usize {
    1 + (subject * 7 + relation * 3) % (FRAMES_PER_RELATION - 1)
}

/// Variant seeds used for encoder training; disjoint from edit and
/// held-out variants.
const ENCODER_VARIANT_BASE: u64 = 50_000;

pub fn sample_training_pairs(kb: &KnowledgeBase, cfg: &EncoderTrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<PairItem>> {
    let n_neg = cfg.negatives_per_positive;
    let fact = &kb.facts[rng.gen_range(0..kb.facts.len())];
    let pick_frame = |rng: &mut ChaCha8Rng, s: usize, r: usize| loop {
        let f = rng.gen_range(0..FRAMES_PER_RELATION);
        if f != heldout_frame(s, r) {
            return f;
        }
    };
    let tq = |s: usize, r: usize, f: usize| kb.vocab.encode(&kb.fact_question(kb.name(s), r, f));
    let mut items = Vec::new();
    match rng.gen_range(0..3) {
        0 => {
            let (s, r) = (fact.subject, fact.relation);
            let a = tq(s, r, pick_frame(rng, s, r))?;
            items.push(PairItem::Text {
                a: a.clone(),
                b: tq(s, r, pick_frame(rng, s, r))?,
                label: 1.0,
            });
            for i in 0..n_neg {
                let other = &kb.facts[rng.gen_range(0..kb.facts.len())];
                let (s2, r2) = match i % 3 {
                    0 => {
                        let same_rel: Vec<_> = kb.facts.iter().filter(|f| f.relation == r && f.subject != s).collect();
                        let f = same_rel.choose(rng).copied().unwrap_or(other);
                        (f.subject, f.relation)
                    }
                    1 => {
                        let mine: Vec<_> = kb.facts_of(s).filter(|f| f.relation != r).collect();
                        let f = mine.choose(rng).copied().unwrap_or(other);
                        (f.subject, f.relation)
                    }
                    _ => (other.subject, other.relation),
                };
                if (s2, r2) == (s, r) {
                    continue;
                }
                items.push(PairItem::Text {
                    a: a.clone(),
                    b: tq(s2, r2, pick_frame(rng, s2, r2))?,
                    label: 0.0,
                });
            }
        }
        1 => {
            let kind = if rng.gen_bool(0.5) { EntityKind::Person } else { EntityKind::Club };
            let frames = kind.visual_frames();
            let a = kb.vocab.encode(frames[rng.gen_range(0..frames.len())])?;
            items.push(PairItem::Text {
                a: a.clone(),
                b: kb.vocab.encode(frames[rng.gen_range(0..frames.len())])?,
                label: 1.0,
            });
            for i in 0..n_neg {
                let b = if i % 2 == 0 {
                    let other = if kind == EntityKind::Person { EntityKind::Club } else { EntityKind::Person };
                    let of = other.visual_frames();
                    kb.vocab.encode(of[rng.gen_range(0..of.len())])?
                } else {
                    let f = &kb.facts[rng.gen_range(0..kb.facts.len())];
                    tq(f.subject, f.relation, pick_frame(rng, f.subject, f.relation))?
                };
                items.push(PairItem::Text { a: a.clone(), b, label: 0.0 });
            }
        }
        _ => {
            let s = kb.subjects[rng.gen_range(0..kb.subjects.len())];
            let var = |rng: &mut ChaCha8Rng| ENCODER_VARIANT_BASE + rng.gen_range(0..10_000);
            let a = kb.image(ImageSpec { entity: s, variant: var(rng) });
            items.push(PairItem::Image {
                a: a.clone(),
                b: kb.image(ImageSpec { entity: s, variant: var(rng) }),
                label: 1.0,
            });
            for _ in 0..n_neg {
                let o = kb.subjects[rng.gen_range(0..kb.subjects.len())];
                if o == s {
                    continue;
                }
                items.push(PairItem::Image {
                    a: a.clone(),
                    b: kb.image(ImageSpec { entity: o, variant: var(rng) }),
                    label: 0.0,
                });
            }
        }
    }
    Ok(items)
}

/// Mean BCE of `sigmoid(kappa·(cos − margin))` over `items`, with the text
/// or image margin of `enc` by pair type.
pub fn pair_loss<'p>(tape: &mut Tape<'p>, vars: [Var; 4], enc: &EncoderParams, items: &[PairItem]) -> Result<Var> {
    let [te, th, ie, ih] = vars;
    let mut losses = Vec::with_capacity(items.len());
    for it in items {
        let (a, b, label, e, h, margin) = match it {
            PairItem::Text { a, b, label } => (a, b, *label, te, th, enc.margin),
            PairItem::Image { a, b, label } => (a, b, *label, ie, ih, enc.image_margin),
        };
        let za = encode_tape(tape, e, h, a)?;
        let zb = encode_tape(tape, e, h, b)?;
        let c = tape.cosine(za, zb)?;
        let shifted = tape.add_const(c, -margin);
        let logit = tape.scale(shifted, enc.kappa);
        losses.push(tape.bce_with_logit(logit, label));
    }
    tape.mean(&losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderReport {
    pub iters: usize,
    pub final_loss: f64,
}

/// Stage 1: trains only the encoders on positives versus sampled negatives.
pub fn train_encoders(kb: &KnowledgeBase, cfg: &EncoderTrainConfig) -> Result<(EncoderParams, EncoderReport)> {
    let mut params = EncoderParams::for_world(kb, cfg.dim, cfg.seed);
    params.margin = cfg.margin;
    params.image_margin = cfg.image_margin;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr))?;
    let mut last = f64::NAN;
    for it in 0..cfg.max_iters {
        let mut items = Vec::new();
        for _ in 0..cfg.batch {
            items.extend(sample_training_pairs(kb, cfg, &mut rng)?);
        }
        let grads = {
            let mut tape = Tape::new();
            let vars = [
                tape.leaf_ref(&params.text.emb, true),
                tape.leaf_ref(&params.text.head, true),
                tape.leaf_ref(&params.image.emb, true),
                tape.leaf_ref(&params.image.head, true),
            ];
            let loss = pair_loss(&mut tape, vars, &params, &items)?;
            last = tape.value(loss).data()[0];
            if !last.is_finite() {
                return Err(Error::Numeric(format!("encoder loss diverged at iteration {it}")));
            }
            let mut g = tape.backward(loss)?;
            let like: Vec<&Tensor> = params.text.tensors().into_iter().chain(params.image.tensors()).collect();
            model::collect_grads(&mut g, &vars, &like)
        };
        let grefs: Vec<&Tensor> = grads.iter().collect();
        let [a, b] = params.text.tensors_mut();
        let [c, d] = params.image.tensors_mut();
        opt.step(&mut [a, b, c, d], &grefs)?;
    }
    Ok((
        params,
        EncoderReport {
            iters: cfg.max_iters,
            final_loss: last,
        },
    ))
}

/// Top-1 accuracy of held-out-frame questions against a store of canonical
/// questions for up to `store_size` facts of `subjects`.
pub fn text_validation_accuracy(kb: &KnowledgeBase, enc: &EncoderParams, subjects: &[usize], store_size: usize) -> Result<f64> {
    let facts: Vec<_> = subjects
        .iter()
        .filter_map(|&s| kb.facts_of(s).next().copied())
        .take(store_size)
        .collect();
    let keys: Vec<Vec<f64>> = facts
        .iter()
        .map(|f| enc.encode_text(kb, &kb.fact_question(kb.name(f.subject), f.relation, 0)))
        .collect::<Result<_>>()?;
    let mut hits = 0;
    for (i, f) in facts.iter().enumerate() {
        let q = enc.encode_text(kb, &kb.fact_question(kb.name(f.subject), f.relation, heldout_frame(f.subject, f.relation)))?;
        let best = argmax_scores(keys.iter().map(|k| autograd::cosine(&q, k))).expect("non-empty");
        hits += usize::from(best.index == i);
    }
    Ok(hits as f64 / facts.len().max(1) as f64)
}

/// Top-1 accuracy of held-out image variants against one stored variant per
/// entity, for up to `store_size` entities.
pub fn image_validation_accuracy(kb: &KnowledgeBase, enc: &EncoderParams, subjects: &[usize], store_size: usize) -> Result<f64> {
    use crate::world::{EDIT_VARIANT_BASE, HELDOUT_VARIANT_BASE};
    let ents: Vec<usize> = subjects.iter().copied().take(store_size).collect();
    let keys: Vec<Vec<f64>> = ents
        .iter()
        .map(|&e| enc.encode_image(kb, ImageSpec { entity: e, variant: EDIT_VARIANT_BASE + e as u64 }))
        .collect::<Result<_>>()?;
    let mut hits = 0;
    for (i, &e) in ents.iter().enumerate() {
        let q = enc.encode_image(kb, ImageSpec { entity: e, variant: HELDOUT_VARIANT_BASE + e as u64 })?;
        let best = argmax_scores(keys.iter().map(|k| autograd::cosine(&q, k))).expect("non-empty");
        hits += usize::from(best.index == i);
    }
    Ok(hits as f64 / ents.len().max(1) as f64)
}

/// Relation catalog name, for reports.
pub fn relation_name(r: usize) -> &'static str {
    RELATIONS[r].name
}
