//! Artifact construction with a content-addressed disk cache.
//!
//! Each stage output is stored as JSON under `<cache>/<stage>-<hash>.json`,
//! where the hash covers every configuration value the stage depends on.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::editor::{
    train_connector_stage2, write_ledger, ConnectorArtifact, EditorConfig, Lab, LedgerRecord, RunManifest, Stage2Config, GAP_SEMANTICS,
    MANIFEST_SCHEMA,
};
use crate::metrics::{evaluate_run, MetricsReport};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::meme::{train_encoders, EncoderParams, EncoderReport, EncoderTrainConfig};
use crate::model::{self, init_model, FrozenWeights, ModelConfig, PretrainConfig, PretrainReport};
use crate::world::{generate_world_with, make_edit_stream_from, context_corpus, fixed_corpus, CorpusConfig, CORPUS_REVISION, KnowledgeBase, Pool, WorldConfig};

/// Architecture knobs; vocabulary sizes come from the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 3,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub world: WorldConfig,
    pub corpus: CorpusConfig,
    pub model: ModelShape,
    pub pretrain: PretrainConfig,
    pub encoders: EncoderTrainConfig,
    pub editor: EditorConfig,
    pub stage2: Stage2Config,
    /// Pairs of the training pool used by stage 2.
    pub stage2_pairs: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            corpus: CorpusConfig::default(),
            model: ModelShape::default(),
            pretrain: PretrainConfig {
                lr: 3e-3,
                lr_min: 1e-4,
                batch_size: 32,
                max_epochs: 40,
                target_acc: 0.99,
                eval_every: 4,
                seed: 0,
            },
            encoders: EncoderTrainConfig::default(),
            editor: EditorConfig::default(),
            stage2: Stage2Config::default(),
            stage2_pairs: 150,
        }
    }
}

impl LabConfig {
    pub fn model_config(&self, kb: &KnowledgeBase) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            vocab_size_text: kb.vocab.text_len(),
            vocab_size_image: kb.vocab.image_len(),
            max_seq_len: self.model.max_seq_len,
            lora_rank: self.editor.lora_rank,
            connector_layer_indices: None,
            seed: self.model.seed,
            ln_eps: 1e-5,
        }
    }
}

/// Hex SHA-256 of the canonical JSON of `v`, first 16 characters.
pub fn content_hash<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("serializable");
    hex::encode(Sha256::digest(&bytes))[..16].to_string()
}

/// Cache root: `KEDIT_CACHE` if set, else `target/kedit-cache` under the
/// workspace.
pub fn default_cache_dir() -> PathBuf {
    match std::env::var_os("KEDIT_CACHE") {
        Some(p) => PathBuf::from(p),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/kedit-cache"),
    }
}

fn cached<T, F>(dir: Option<&Path>, stage: &str, key: &str, build: F) -> Result<T>
where
    T: Serialize + DeserializeOwned,
    F: FnOnce() -> Result<T>,
{
    let Some(dir) = dir else {
        return build();
    };
    let path = dir.join(format!("{stage}-{key}.json"));
    if path.exists() {
        match model::read_json(&path) {
            Ok(v) => return Ok(v),
            Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", path.display()),
        }
    }
    let v = build()?;
    std::fs::create_dir_all(dir)?;
    let tmp = path.with_extension("tmp");
    model::write_json(&tmp, &v)?;
    std::fs::rename(&tmp, &path)?;
    Ok(v)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pretrained {
    pub weights: FrozenWeights,
    pub report: PretrainReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedEncoders {
    pub params: EncoderParams,
    pub report: EncoderReport,
}

/// World, pretrained model and encoders for one configuration.
pub struct Artifacts {
    pub config: LabConfig,
    pub kb: KnowledgeBase,
    pub pretrained: Pretrained,
    pub encoders: TrainedEncoders,
    pub cache: Option<PathBuf>,
    pub exec: Exec,
}

/// Pretrains a fresh model on the world's corpus (best effort: a run that
/// stops below the accuracy target is logged, not rejected).
pub fn build_pretrained(config: &LabConfig, kb: &KnowledgeBase, exec: Exec) -> Result<Pretrained> {
    let mcfg = config.model_config(kb);
    mcfg.validate()?;
    let fixed = fixed_corpus(kb, &config.corpus)?;
    let base = config.corpus.seed;
    log::info!("pretraining on {} fixed sequences plus fresh context items", fixed.len());
    let (weights, report) = model::pretrain_resampled(
        init_model(&mcfg)?,
        &fixed,
        |e| context_corpus(kb, &config.corpus, base.wrapping_add(e)),
        &config.pretrain,
        exec,
        |e, l, a| log::info!("pretrain epoch {e} loss {l:.4} acc {a:.4}"),
    )?;
    if report.accuracy < config.pretrain.target_acc {
        log::warn!(
            "pretraining stopped at accuracy {:.4} below target {:.4}",
            report.accuracy,
            config.pretrain.target_acc
        );
    }
    Ok(Pretrained { weights, report })
}

pub fn build_encoders(config: &LabConfig, kb: &KnowledgeBase) -> Result<TrainedEncoders> {
    let (params, report) = train_encoders(kb, &config.encoders)?;
    Ok(TrainedEncoders { params, report })
}

impl Artifacts {
    pub fn build(config: LabConfig, cache: Option<PathBuf>, exec: Exec) -> Result<Self> {
        let kb = generate_world_with(&config.world)?;
        let mcfg = config.model_config(&kb);
        mcfg.validate()?;
        let pkey = content_hash(&(CORPUS_REVISION, &config.world, &config.corpus, &mcfg, &config.pretrain));
        let pretrained = cached(cache.as_deref(), "pretrain", &pkey, || build_pretrained(&config, &kb, exec))?;
        let ekey = content_hash(&(&config.world, &config.encoders));
        let encoders = cached(cache.as_deref(), "encoders", &ekey, || build_encoders(&config, &kb))?;
        Ok(Self {
            config,
            kb,
            pretrained,
            encoders,
            cache,
            exec,
        })
    }

    /// Assembles artifacts that were produced separately.
    pub fn from_parts(
        config: LabConfig,
        kb: KnowledgeBase,
        pretrained: Pretrained,
        encoders: TrainedEncoders,
        cache: Option<PathBuf>,
        exec: Exec,
    ) -> Self {
        Self {
            config,
            kb,
            pretrained,
            encoders,
            cache,
            exec,
        }
    }

    pub fn lab(&self) -> Lab<'_> {
        Lab {
            kb: &self.kb,
            weights: &self.pretrained.weights,
            encoders: &self.encoders.params,
            exec: self.exec,
        }
    }

    /// Stage-2 connector for `stage2` (cached).
    pub fn connector(&self, stage2: &Stage2Config) -> Result<ConnectorArtifact> {
        let key = content_hash(&(
            &self.pretrained.weights.fingerprint(),
            &self.encoders.params.fingerprint(),
            &self.config.editor.lora_rank,
            &self.config.editor.edit_steps,
            &self.config.editor.edit_lr.to_bits(),
            stage2,
            &self.config.stage2_pairs,
        ));
        cached(self.cache.as_deref(), "connector", &key, || {
            let stream = make_edit_stream_from(&self.kb, Pool::Train, self.config.stage2_pairs, stage2.seed)?;
            train_connector_stage2(&self.lab(), &self.config.editor, &stream, stage2, |e, l| {
                log::info!("stage2 p={} epoch {e} loss {l:.4}", stage2.hit_rate);
            })
        })
    }

    pub fn test_stream(&self, edits: usize, seed: u64) -> Result<Vec<crate::world::EditRecord>> {
        if edits % 2 != 0 {
            return Err(Error::Config(format!("edit count {edits} must be even (visual/textual pairs)")));
        }
        make_edit_stream_from(&self.kb, Pool::Test, edits / 2, seed)
    }
}

/// Outputs of one sequential run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub ledger: Vec<LedgerRecord>,
    pub report: MetricsReport,
}

impl RunOutput {
    /// Writes `manifest.json`, `ledger.jsonl` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.manifest.save(&dir.join("manifest.json"))?;
        write_ledger(&dir.join("ledger.jsonl"), &self.ledger)?;
        std::fs::write(dir.join("report.csv"), self.report.to_csv())?;
        Ok(())
    }
}

impl Artifacts {
    /// Runs `cfg` over the first `edits` edits of the test stream drawn with
    /// `stream_seed`.
    pub fn run(
        &self,
        cfg: &EditorConfig,
        edits: usize,
        stream_seed: u64,
        connector: Option<&ConnectorArtifact>,
    ) -> Result<RunOutput> {
        let stream = self.test_stream(edits, stream_seed)?;
        let conn = if cfg.strategy.uses_connector() {
            Some(&connector.ok_or_else(|| Error::Precondition("memeic_full needs a stage-2 connector".into()))?.weights)
        } else {
            None
        };
        let state = self.lab().sequential_run(cfg, &stream, conn)?;
        let report = evaluate_run(cfg.strategy, &state.ledger, &cfg.gaps)?;
        let manifest = RunManifest {
            schema: MANIFEST_SCHEMA.into(),
            config: cfg.clone(),
            edits,
            stream_seed,
            world_hash: content_hash(&self.kb),
            model_hash: self.pretrained.weights.fingerprint(),
            encoder_hash: self.encoders.params.fingerprint(),
            connector_hash: conn.map(|c| model::fingerprint_tensors(c.tensors())),
            gap_semantics: GAP_SEMANTICS.into(),
            probes_per_kind: 1,
        };
        Ok(RunOutput {
            manifest,
            ledger: state.ledger,
            report,
        })
    }
}
