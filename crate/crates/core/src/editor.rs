//! Editor strategies, the sequential editing protocol and stage-2 connector
//! training.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::connector::{connector_params, connector_params_mut, ConnectorWeights};
use crate::decompose::decompose;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::meme::{self, ContextEntry, EncoderParams, MemoryStore, RetrievalConfig, RetrievedContext, SlotOutcome};
use crate::memi::{self, gates_for_query, AdapterBank, EditConfig, ModalityGates, Trainable};
use crate::model::{self, FrozenWeights, Sequence};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::types::{Modality, QueryType};
use crate::vocab::TokenId;
use crate::world::{mix, EditPayload, EditRecord, KnowledgeBase, Probe, ProbeKind, Query};

pub const LEDGER_SCHEMA: &str = "kedit.ledger/1";
pub const MANIFEST_SCHEMA: &str = "kedit.run/1";
pub const CONNECTOR_SCHEMA: &str = "kedit.connector/1";

/// Longest answer the locality decoder produces.
const MAX_ANSWER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ExternalOnly,
    InternalSingleLora,
    InternalDualLora,
    HybridNoConnector,
    MemeicFull,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::ExternalOnly,
        Strategy::InternalSingleLora,
        Strategy::InternalDualLora,
        Strategy::HybridNoConnector,
        Strategy::MemeicFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::ExternalOnly => "external_only",
            Strategy::InternalSingleLora => "internal_single_lora",
            Strategy::InternalDualLora => "internal_dual_lora",
            Strategy::HybridNoConnector => "hybrid_no_connector",
            Strategy::MemeicFull => "memeic_full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }

    pub fn uses_store(self) -> bool {
        matches!(self, Strategy::ExternalOnly | Strategy::HybridNoConnector | Strategy::MemeicFull)
    }

    pub fn uses_adapters(self) -> bool {
        self != Strategy::ExternalOnly
    }

    pub fn uses_connector(self) -> bool {
        self == Strategy::MemeicFull
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditorConfig {
    pub strategy: Strategy,
    /// Rank of each dual adapter; the single-LoRA strategy uses `2 · lora_rank`.
    pub lora_rank: usize,
    pub edit_steps: usize,
    pub edit_lr: f64,
    pub tau: f64,
    pub alpha: f64,
    pub gaps: Vec<usize>,
    pub seed: u64,
    /// Hit rate of the adversarial retriever used for compositional probes;
    /// `None` uses the learned retriever.
    pub test_hit_rate: Option<f64>,
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::MemeicFull,
            lora_rank: 4,
            edit_steps: 10,
            edit_lr: 1e-2,
            tau: 0.8,
            alpha: 0.5,
            gaps: vec![0, 10, 20, 50, 100],
            seed: 0,
            test_hit_rate: None,
        }
    }
}

impl EditorConfig {
    pub fn validate(&self) -> Result<()> {
        validate_gaps(&self.gaps)?;
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} not in [0, 1]", self.alpha)));
        }
        if let Some(p) = self.test_hit_rate {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("hit rate {p} not in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig {
            tau: self.tau,
            alpha: self.alpha,
        }
    }

    pub fn edit(&self) -> EditConfig {
        EditConfig {
            steps: self.edit_steps,
            lr: self.edit_lr,
        }
    }
}

/// Gaps must be strictly increasing (hence non-negative and distinct).
pub fn validate_gaps(gaps: &[usize]) -> Result<()> {
    if gaps.is_empty() {
        return Err(Error::Config("gap schedule is empty".into()));
    }
    if gaps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("gap schedule {gaps:?} is not strictly increasing")));
    }
    Ok(())
}

/// Stored connector weights from stage 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectorArtifact {
    pub schema: String,
    pub hit_rate: f64,
    pub weights: ConnectorWeights,
    pub history: Vec<f64>,
}

impl ConnectorArtifact {
    pub fn save(&self, path: &Path) -> Result<()> {
        model::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let a: Self = model::read_json(path)?;
        if a.schema != CONNECTOR_SCHEMA {
            return Err(Error::Schema(format!("expected {CONNECTOR_SCHEMA}, found {}", a.schema)));
        }
        Ok(a)
    }
}

/// Returns the true entry with probability `hit_rate`, otherwise an entry
/// drawn uniformly from the rest of the same store.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversarialRetriever {
    pub hit_rate: f64,
    pub seed: u64,
}

impl AdversarialRetriever {
    pub fn new(hit_rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&hit_rate) {
            return Err(Error::Precondition(format!("hit rate {hit_rate} not in [0, 1]")));
        }
        Ok(Self { hit_rate, seed })
    }

    /// One slot draw. `None` when the store holds only the true entry and
    /// the draw asks for a counterfactual.
    pub fn draw(&self, rng: &mut ChaCha8Rng, store_len: usize, truth: usize) -> Option<(usize, bool)> {
        let hit = rng.gen_bool(self.hit_rate);
        if hit {
            return Some((truth, true));
        }
        if store_len < 2 {
            return None;
        }
        let mut j = rng.gen_range(0..store_len - 1);
        if j >= truth {
            j += 1;
        }
        Some((j, false))
    }

    /// Context `[R_v; R_t]` for the compositional probe whose true entries
    /// sit at `truth = (visual index, textual index)`. `key` selects an
    /// independent random stream.
    pub fn retrieve(&self, store: &MemoryStore, truth: (usize, usize), key: u64) -> RetrievedContext {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed ^ mix(key)));
        let mut ctx = RetrievedContext::default();
        for (m, t) in [(Modality::Visual, truth.0), (Modality::Textual, truth.1)] {
            let d = self.draw(&mut rng, store.len(m), t);
            if let Some((i, _)) = d {
                ctx.entries.push(store.entry(m, i));
            }
            ctx.slots.push(SlotOutcome {
                modality: m,
                index: d.map(|x| x.0),
                score: None,
                included: d.is_some(),
                hit: Some(d.map_or(false, |x| x.1)),
            });
        }
        ctx
    }
}

/// One exact-match outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub edit: usize,
    pub pair: usize,
    pub modality: Modality,
    pub gap: usize,
    pub kind: ProbeKind,
    pub outcome: bool,
    pub output: String,
    pub context: usize,
}

/// Mutable state of one sequential run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub bank: Option<AdapterBank>,
    pub store: MemoryStore,
    /// Edit indices in application order.
    pub log: Vec<usize>,
    pub ledger: Vec<LedgerRecord>,
    /// Store position of each applied edit.
    slots: BTreeMap<usize, (Modality, usize)>,
    /// Pre-edit outputs of every locality probe, keyed by edit index.
    pub baseline: BTreeMap<usize, Vec<TokenId>>,
}

/// Fixed resources shared by every run in one world.
#[derive(Clone, Copy)]
pub struct Lab<'a> {
    pub kb: &'a KnowledgeBase,
    pub weights: &'a FrozenWeights,
    pub encoders: &'a EncoderParams,
    pub exec: Exec,
}

impl<'a> Lab<'a> {
    pub fn new_state(&self, cfg: &EditorConfig, connector: Option<&ConnectorWeights>) -> Result<RunState> {
        cfg.validate()?;
        let mcfg = model::ModelConfig {
            lora_rank: cfg.lora_rank,
            ..self.weights.config.clone()
        };
        let bank = match cfg.strategy {
            Strategy::ExternalOnly => None,
            Strategy::InternalSingleLora => Some(AdapterBank::shared(&mcfg, cfg.seed)),
            _ => Some(AdapterBank::dual(&mcfg, cfg.seed)),
        };
        let bank = match (bank, cfg.strategy.uses_connector()) {
            (Some(mut b), true) => {
                let c = connector.ok_or_else(|| Error::Precondition("memeic_full needs trained connector weights".into()))?;
                if c.n_layers != self.weights.config.n_layers {
                    return Err(Error::Config("connector was trained for a different model".into()));
                }
                b.connector = c.clone();
                Some(b)
            }
            (b, _) => b,
        };
        Ok(RunState {
            bank,
            store: MemoryStore::default(),
            log: Vec::new(),
            ledger: Vec::new(),
            slots: BTreeMap::new(),
            baseline: BTreeMap::new(),
        })
    }

    /// Appends evidence and/or trains the adapter of the edit's modality.
    pub fn apply_edit(&self, state: &mut RunState, cfg: &EditorConfig, edit: &EditRecord) -> Result<()> {
        if cfg.strategy.uses_store() {
            state.store.add_edit(self.kb, self.encoders, edit)?;
            state.slots.insert(edit.index, (edit.modality, state.store.len(edit.modality) - 1));
        }
        if let Some(bank) = state.bank.as_mut() {
            let seq = Sequence::new(self.kb.encode_query(&edit.prompt)?, &self.kb.answer_tokens(&edit.target)?);
            memi::edit_update(self.weights, bank, edit.prompt.qtype, &seq, &cfg.edit())?;
        }
        state.log.push(edit.index);
        Ok(())
    }

    /// Pre-edit greedy answer of a query: frozen weights, no context.
    pub fn baseline_output(&self, q: &Query) -> Result<Vec<TokenId>> {
        let prompt = self.kb.encode_query(q)?;
        model::greedy_decode(self.weights, None, ModalityGates::OFF, &prompt, MAX_ANSWER)
    }

    pub fn record_baselines(&self, state: &mut RunState, stream: &[EditRecord]) -> Result<()> {
        let locs: Vec<(usize, &Query)> = stream
            .iter()
            .filter_map(|e| e.probe(ProbeKind::Loc).map(|p| (e.index, &p.query)))
            .collect();
        let outs = self.exec.map(&locs, |(_, q)| self.baseline_output(q));
        for ((i, _), o) in locs.iter().zip(outs) {
            state.baseline.insert(*i, o?);
        }
        Ok(())
    }

    /// Context for a probe under the run's retrieval policy.
    pub fn context_for(
        &self,
        state: &RunState,
        cfg: &EditorConfig,
        edit: &EditRecord,
        probe: &Probe,
        key: u64,
    ) -> Result<RetrievedContext> {
        if !cfg.strategy.uses_store() {
            return Ok(RetrievedContext::default());
        }
        if let (ProbeKind::Comp, Some(p)) = (probe.kind, cfg.test_hit_rate) {
            let truth = self.comp_truth(state, edit)?;
            return Ok(AdversarialRetriever::new(p, cfg.seed)?.retrieve(&state.store, truth, key));
        }
        let dq = decompose(&probe.query)?;
        meme::retrieve_for(self.kb, self.encoders, &state.store, &probe.query, &dq, &cfg.retrieval())
    }

    /// Store positions of the visual and textual edits of `edit`'s pair.
    fn comp_truth(&self, state: &RunState, edit: &EditRecord) -> Result<(usize, usize)> {
        let v = state.slots.get(&(2 * edit.pair));
        let t = state.slots.get(&(2 * edit.pair + 1));
        match (v, t) {
            (Some(&(Modality::Visual, v)), Some(&(Modality::Textual, t))) => Ok((v, t)),
            _ => Err(Error::Precondition(format!("pair {} is not fully stored", edit.pair))),
        }
    }

    fn gates(&self, state: &RunState, qtype: QueryType) -> ModalityGates {
        if state.bank.is_some() {
            gates_for_query(qtype)
        } else {
            ModalityGates::OFF
        }
    }

    /// Scores one probe against the current state.
    pub fn score_probe(
        &self,
        state: &RunState,
        cfg: &EditorConfig,
        edit: &EditRecord,
        probe: &Probe,
        gap: usize,
    ) -> Result<LedgerRecord> {
        let key = mix((edit.index as u64) << 20 | gap as u64 | (probe.kind as u64) << 60);
        let ctx = self.context_for(state, cfg, edit, probe, key)?;
        let prompt = meme::assemble_context(self.kb, &probe.query, &ctx)?;
        let gates = self.gates(state, probe.query.qtype);
        let bank = state.bank.as_ref();
        let (outcome, output) = match &probe.gold {
            Some(gold) => {
                let seq = Sequence::new(prompt, &self.kb.answer_tokens(gold)?);
                let hit = exact_match(self.weights, bank, gates, &seq)?;
                let out = if hit { gold.clone() } else { String::new() };
                (hit, out)
            }
            None => {
                let base = state
                    .baseline
                    .get(&edit.index)
                    .ok_or_else(|| Error::Config(format!("no baseline output for locality probe of edit {}", edit.index)))?;
                let out = model::greedy_decode(self.weights, bank, gates, &prompt, MAX_ANSWER)?;
                (out == *base, self.kb.vocab.decode(&out))
            }
        };
        Ok(LedgerRecord {
            edit: edit.index,
            pair: edit.pair,
            modality: edit.modality,
            gap,
            kind: probe.kind,
            outcome,
            output,
            context: ctx.entries.len(),
        })
    }

    /// Applies the stream in order; after edit `j` every edit `k = j − g`
    /// (for each scheduled gap `g`) has its probes scored.
    pub fn sequential_run(
        &self,
        cfg: &EditorConfig,
        stream: &[EditRecord],
        connector: Option<&ConnectorWeights>,
    ) -> Result<RunState> {
        let mut state = self.new_state(cfg, connector)?;
        let t = stream.len();
        if let Some(&g) = cfg.gaps.last() {
            if g > t {
                return Err(Error::Config(format!("gap {g} exceeds stream length {t}")));
            }
        }
        self.record_baselines(&mut state, stream)?;
        for (j, edit) in stream.iter().enumerate() {
            if edit.index != j {
                return Err(Error::Precondition(format!("edit {} out of order at position {j}", edit.index)));
            }
            self.apply_edit(&mut state, cfg, edit)?;
            let mut jobs: Vec<(usize, &EditRecord, &Probe)> = Vec::new();
            for &g in &cfg.gaps {
                if g > j {
                    break;
                }
                let e = &stream[j - g];
                for p in &e.probes {
                    // A compositional probe needs both edits of its pair.
                    if p.kind == ProbeKind::Comp && 2 * e.pair + 1 > j {
                        continue;
                    }
                    jobs.push((g, e, p));
                }
            }
            let st = &state;
            let recs = self.exec.map(&jobs, |(g, e, p)| self.score_probe(st, cfg, e, p, *g));
            for r in recs {
                state.ledger.push(r?);
            }
        }
        Ok(state)
    }
}

/// Teacher-forced exact match of the whole answer span.
pub fn exact_match(
    weights: &FrozenWeights,
    bank: Option<&AdapterBank>,
    gates: ModalityGates,
    seq: &Sequence,
) -> Result<bool> {
    let (tokens, rows) = seq.teacher_forced();
    let logits = model::forward_rows(weights, bank, gates, &tokens, &rows)?;
    Ok(seq.answer.iter().enumerate().all(|(i, &t)| model::argmax(logits.row(i)) == t))
}

pub fn write_ledger(path: &Path, ledger: &[LedgerRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &serde_json::json!({"schema": LEDGER_SCHEMA, "records": ledger.len()}))?;
    f.write_all(b"\n")?;
    for r in ledger {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerRecord>> {
    use std::io::BufRead;
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header: serde_json::Value =
        serde_json::from_str(&lines.next().ok_or_else(|| Error::Schema("empty ledger".into()))??)?;
    if header["schema"] != LEDGER_SCHEMA {
        return Err(Error::Schema(format!("expected {LEDGER_SCHEMA}")));
    }
    lines.map(|l| Ok(serde_json::from_str(&l?)?)).collect()
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub config: EditorConfig,
    pub edits: usize,
    pub stream_seed: u64,
    pub world_hash: String,
    pub model_hash: String,
    pub encoder_hash: String,
    pub connector_hash: Option<String>,
    pub gap_semantics: String,
    pub probes_per_kind: usize,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        model::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let m: Self = model::read_json(path)?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(Error::Schema(format!("expected {MANIFEST_SCHEMA}, found {}", m.schema)));
        }
        Ok(m)
    }
}

pub const GAP_SEMANTICS: &str = "edit k at gap g is scored on the state right after edit k+g";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub hit_rate: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Extra compositional queries replayed from earlier pairs per step.
    pub replay: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            hit_rate: 0.7,
            epochs: 3,
            lr: 3e-3,
            replay: 1,
            seed: 3,
        }
    }
}

/// Stage 2: trains only the connector. Each epoch replays the training
/// stream from fresh adapters and an empty store; after each pair's two
/// edits, compositional queries of that pair (and `replay` earlier ones) are
/// answered from adversarial contexts and the connector takes one step.
pub fn train_connector_stage2(
    lab: &Lab<'_>,
    editor: &EditorConfig,
    stream: &[EditRecord],
    cfg: &Stage2Config,
    mut progress: impl FnMut(usize, f64),
) -> Result<ConnectorArtifact> {
    let retr = AdversarialRetriever::new(cfg.hit_rate, cfg.seed)?;
    let mcfg = model::ModelConfig {
        lora_rank: editor.lora_rank,
        ..lab.weights.config.clone()
    };
    let mut connector = AdapterBank::dual(&mcfg, cfg.seed).connector;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let run_cfg = EditorConfig {
        strategy: Strategy::HybridNoConnector,
        ..editor.clone()
    };
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut state = lab.new_state(&run_cfg, None)?;
        let (mut sum, mut n) = (0.0, 0usize);
        for pair in stream.chunks(2) {
            let [v, t] = pair else {
                return Err(Error::Precondition("stage-2 stream must hold whole pairs".into()));
            };
            lab.apply_edit(&mut state, &run_cfg, v)?;
            lab.apply_edit(&mut state, &run_cfg, t)?;
            let bank = state.bank.as_mut().expect("hybrid has adapters");
            bank.connector = connector;
            let mut picks = vec![t.pair];
            for _ in 0..cfg.replay {
                picks.push(rng.gen_range(0..=t.pair));
            }
            let mut seqs = Vec::new();
            for &p in &picks {
                let te = &stream[2 * p + 1];
                let probe = te.probe(ProbeKind::Comp).ok_or_else(|| Error::Precondition("missing comp probe".into()))?;
                let truth = lab.comp_truth(&state, te)?;
                let key = mix(epoch as u64) ^ rng.gen::<u64>();
                let ctx = retr.retrieve(&state.store, truth, key);
                let prompt = meme::assemble_context(lab.kb, &probe.query, &ctx)?;
                let gold = probe.gold.as_deref().expect("comp probes have gold");
                seqs.push(Sequence::new(prompt, &lab.kb.answer_tokens(gold)?));
            }
            let bank = state.bank.as_ref().expect("hybrid has adapters");
            let parts = lab.exec.map(&seqs, |seq| -> Result<(f64, Vec<Tensor>)> {
                let mut tape = Tape::new();
                let w = lab.weights.bind(&mut tape, false);
                let a = bank.bind(&mut tape, Trainable::Connector);
                let (loss, _) = model::sequence_loss(&mut tape, &lab.weights.config, &w, Some(&a), ModalityGates::BOTH, seq)?;
                let value = tape.value(loss).data()[0];
                let mut g = tape.backward(loss)?;
                Ok((value, model::collect_grads(&mut g, &a.vars(Trainable::Connector), &connector_params(bank))))
            });
            let mut grads = Vec::new();
            for p in parts {
                let (l, g) = p?;
                sum += l;
                n += 1;
                grads.push(g);
            }
            if !(sum.is_finite()) {
                return Err(Error::Numeric(format!("connector training diverged in epoch {epoch}")));
            }
            let mut total = model::reduce_grads(grads).expect("non-empty");
            let inv = 1.0 / seqs.len() as f64;
            total.iter_mut().for_each(|g| g.scale(inv));
            let grefs: Vec<&Tensor> = total.iter().collect();
            let bank = state.bank.as_mut().expect("hybrid has adapters");
            opt.step(&mut connector_params_mut(bank), &grefs)?;
            connector = std::mem::replace(&mut bank.connector, ConnectorWeights { n_layers: 0, layers: vec![] });
        }
        let mean = sum / n.max(1) as f64;
        history.push(mean);
        progress(epoch, mean);
    }
    Ok(ConnectorArtifact {
        schema: CONNECTOR_SCHEMA.into(),
        hit_rate: cfg.hit_rate,
        weights: connector,
        history,
    })
}

/// Context entries rendered for traces.
pub fn describe_context(entries: &[ContextEntry]) -> Vec<String> {
    entries.iter().map(|e| format!("{} -> {}", e.question, e.answer)).collect()
}

/// The edit's own payload as a one-line summary.
pub fn describe_edit(kb: &KnowledgeBase, e: &EditRecord) -> String {
    match &e.payload {
        EditPayload::Visual { old_entity, new_entity, .. } => {
            format!("image of {} -> {}", kb.name(*old_entity), kb.name(*new_entity))
        }
        EditPayload::Textual { subject, relation, old_object, new_object } => format!(
            "{} {}: {} -> {}",
            kb.name(*subject),
            meme::relation_name(*relation),
            kb.name(*old_object),
            kb.name(*new_object)
        ),
    }
}
