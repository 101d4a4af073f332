//! Deterministic synthetic multimodal world: entities with rendered image
//! tokens, functional relational facts, linked visual/textual edit streams with
//! probe sets, and the pretraining corpus for the base model.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sequence;
use crate::types::{Modality, QueryType};
use crate::vocab::{TokenId, Vocab, A_MARK, CLOSE, OPEN, Q_MARK, SEP};

pub const WORLD_SCHEMA: &str = "kedit.world/1";
pub const STREAM_SCHEMA: &str = "kedit.edit/1";

/// Variant seeds used in pretraining are `0..pretrain_variants`; the edit and
/// held-out generality images use disjoint offsets.
pub const EDIT_VARIANT_BASE: u64 = 1_000;
pub const HELDOUT_VARIANT_BASE: u64 = 2_000;

const IMAGE_SALT: u64 = 0x6b65_6469_745f_696d;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Person,
    Club,
    /// Object value of one relation.
    Value,
}

impl EntityKind {
    pub fn visual_frames(self) -> &'static [&'static str] {
        match self {
            EntityKind::Person => &[
                "who is in the photo ?",
                "who is shown in this image ?",
                "who appears in the picture ?",
                "which person is depicted here ?",
            ],
            EntityKind::Club => &[
                "what club is in the picture ?",
                "which club does this image show ?",
                "what team appears in the photo ?",
                "which club is depicted here ?",
            ],
            EntityKind::Value => &[],
        }
    }

    /// Phrase that stands for the depicted entity in compositional questions.
    pub fn placeholder(self) -> Option<&'static str> {
        match self {
            EntityKind::Person => Some("the person in the photo"),
            EntityKind::Club => Some("the club in the picture"),
            EntityKind::Value => None,
        }
    }
}

pub struct RelationSpec {
    pub name: &'static str,
    pub subject: EntityKind,
    pub frames: [&'static str; 4],
}

pub const RELATIONS: [RelationSpec; 6] = [
    RelationSpec {
        name: "position",
        subject: EntityKind::Person,
        frames: [
            "what position did {S} recently assume ?",
            "which position does {S} hold now ?",
            "{S} recently took which position ?",
            "what role was {S} recently given ?",
        ],
    },
    RelationSpec {
        name: "league",
        subject: EntityKind::Club,
        frames: [
            "which league is associated with {S} ?",
            "in which league does {S} play ?",
            "{S} competes in which league ?",
            "what league is {S} part of ?",
        ],
    },
    RelationSpec {
        name: "country",
        subject: EntityKind::Person,
        frames: [
            "which country is {S} from ?",
            "what nationality does {S} have ?",
            "{S} comes from which country ?",
            "where was {S} born ?",
        ],
    },
    RelationSpec {
        name: "city",
        subject: EntityKind::Club,
        frames: [
            "in which city is {S} based ?",
            "what city does {S} call home ?",
            "{S} is located in which city ?",
            "where does {S} play home games ?",
        ],
    },
    RelationSpec {
        name: "employer",
        subject: EntityKind::Person,
        frames: [
            "who employs {S} ?",
            "which organization does {S} work for ?",
            "{S} is employed by whom ?",
            "for whom does {S} work ?",
        ],
    },
    RelationSpec {
        name: "coach",
        subject: EntityKind::Club,
        frames: [
            "who coaches {S} ?",
            "who is the head coach of {S} ?",
            "{S} is trained by which coach ?",
            "which coach leads {S} ?",
        ],
    },
];

pub const FRAMES_PER_RELATION: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    /// Subject entities (people and clubs).
    pub n_entities: usize,
    pub n_relations: usize,
    pub facts_per_entity: usize,
    pub values_per_relation: usize,
    pub n_img_tokens: usize,
    /// Trailing image positions that depend on the variant seed.
    pub n_variant_tokens: usize,
    pub image_vocab: usize,
    pub pretrain_variants: u64,
    /// Subjects reserved for locality probes; never edited.
    pub n_locality: usize,
    /// Subjects reserved for connector training pairs.
    pub n_train_entities: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_entities: 860,
            n_relations: 6,
            facts_per_entity: 2,
            values_per_relation: 12,
            n_img_tokens: 6,
            n_variant_tokens: 1,
            image_vocab: 512,
            pretrain_variants: 3,
            n_locality: 60,
            n_train_entities: 300,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.n_entities == 0 || self.n_relations == 0 || self.facts_per_entity == 0 {
            return fail("entity, relation and fact counts must be at least 1");
        }
        if self.n_relations > RELATIONS.len() {
            return fail("relation catalog has only 6 relations");
        }
        if self.values_per_relation < 2 {
            return fail("each relation needs at least 2 object values");
        }
        if self.n_img_tokens == 0 || self.n_variant_tokens >= self.n_img_tokens || self.image_vocab < 2 {
            return fail("image tokens must include at least one entity position");
        }
        if self.pretrain_variants == 0 || self.pretrain_variants >= EDIT_VARIANT_BASE {
            return fail("pretrain_variants out of range");
        }
        if self.n_locality + self.n_train_entities > self.n_entities {
            return fail("reserved pools exceed the entity count");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub name: String,
    pub kind: EntityKind,
    /// Relation whose object pool holds this entity (values only).
    pub relation: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSpec {
    pub entity: usize,
    pub variant: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Locality,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub schema: String,
    pub config: WorldConfig,
    pub vocab: Vocab,
    pub entities: Vec<Entity>,
    pub subjects: Vec<usize>,
    /// Object pool per relation.
    pub values: Vec<Vec<usize>>,
    pub facts: Vec<Fact>,
    pub locality_pool: Vec<usize>,
    pub train_pool: Vec<usize>,
    pub test_pool: Vec<usize>,
}

/// SplitMix64 finalizer; the image renderer's hash.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Pairs are formed within a kind, so an odd count of persons (and then of
/// clubs) wastes two entities. Swaps one person of `pool` for a club from
/// `spare`, or the reverse, to make both counts even.
fn even_kinds(entities: &[Entity], pool: &mut [usize], spare: &mut [usize]) {
    let persons = pool.iter().filter(|&&e| entities[e].kind == EntityKind::Person).count();
    if persons % 2 == 0 || pool.len() % 2 == 1 {
        return;
    }
    for (out, inn) in [(EntityKind::Person, EntityKind::Club), (EntityKind::Club, EntityKind::Person)] {
        let i = pool.iter().rposition(|&e| entities[e].kind == out);
        let j = spare.iter().position(|&e| entities[e].kind == inn);
        if let (Some(i), Some(j)) = (i, j) {
            std::mem::swap(&mut pool[i], &mut spare[j]);
            return;
        }
    }
}

/// Image-vocabulary indices for `spec`. The first `n_img_tokens −
/// n_variant_tokens` positions depend on the entity alone.
pub fn render_image_tokens(spec: ImageSpec, n_img_tokens: usize, n_variant_tokens: usize, image_vocab: usize) -> Vec<usize> {
    let fixed = n_img_tokens.saturating_sub(n_variant_tokens);
    (0..n_img_tokens)
        .map(|j| {
            let h = if j < fixed {
                mix(IMAGE_SALT ^ mix(spec.entity as u64) ^ mix(j as u64 + 17))
            } else {
                mix(IMAGE_SALT ^ mix(spec.entity as u64) ^ mix(spec.variant.wrapping_mul(31) + j as u64 + 1_000_003))
            };
            (h % image_vocab as u64) as usize
        })
        .collect()
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr"];
    const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        w.push_str(NUCLEI[rng.gen_range(0..NUCLEI.len())]);
    }
    w
}

fn frame_words() -> BTreeSet<&'static str> {
    let mut words = BTreeSet::new();
    for r in &RELATIONS {
        for f in r.frames {
            words.extend(f.split_whitespace().filter(|w| *w != "{S}"));
        }
    }
    for k in [EntityKind::Person, EntityKind::Club] {
        for f in k.visual_frames() {
            words.extend(f.split_whitespace());
        }
        words.extend(k.placeholder().unwrap().split_whitespace());
    }
    words
}

pub fn generate_world(seed: u64, n_entities: usize, n_relations: usize, facts_per_entity: usize) -> Result<KnowledgeBase> {
    generate_world_with(&WorldConfig {
        seed,
        n_entities,
        n_relations,
        facts_per_entity,
        n_locality: 0,
        n_train_entities: 0,
        ..WorldConfig::default()
    })
}

pub fn generate_world_with(cfg: &WorldConfig) -> Result<KnowledgeBase> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let relations = &RELATIONS[..cfg.n_relations];
    let kinds: Vec<EntityKind> = [EntityKind::Person, EntityKind::Club]
        .into_iter()
        .filter(|k| relations.iter().any(|r| r.subject == *k))
        .collect();
    for k in &kinds {
        let available = relations.iter().filter(|r| r.subject == *k).count();
        if cfg.facts_per_entity > available {
            return Err(Error::Config(format!(
                "facts_per_entity {} exceeds the {available} relations available to {k:?}",
                cfg.facts_per_entity
            )));
        }
    }

    let mut vocab = Vocab::new(cfg.image_vocab);
    let reserved = frame_words();
    for w in &reserved {
        vocab.intern(w);
    }
    let mut used: HashSet<String> = reserved.iter().map(|w| w.to_string()).collect();
    let needed = cfg.n_entities + cfg.n_relations * cfg.values_per_relation;
    let mut fresh_name = |rng: &mut ChaCha8Rng| -> Result<String> {
        for _ in 0..1_000 {
            let w = pseudo_word(rng);
            if used.insert(w.clone()) {
                return Ok(w);
            }
        }
        Err(Error::Config(format!("name space exhausted while drawing {needed} names")))
    };

    let mut entities = Vec::new();
    let mut subjects = Vec::new();
    for i in 0..cfg.n_entities {
        let name = fresh_name(&mut rng)?;
        vocab.intern(&name);
        let id = entities.len();
        entities.push(Entity {
            id,
            name,
            kind: kinds[i % kinds.len()],
            relation: None,
        });
        subjects.push(id);
    }
    let mut values = Vec::new();
    for r in 0..cfg.n_relations {
        let mut pool = Vec::new();
        for _ in 0..cfg.values_per_relation {
            let name = fresh_name(&mut rng)?;
            vocab.intern(&name);
            let id = entities.len();
            entities.push(Entity {
                id,
                name,
                kind: EntityKind::Value,
                relation: Some(r),
            });
            pool.push(id);
        }
        values.push(pool);
    }

    let mut facts = Vec::new();
    for &s in &subjects {
        let kind = entities[s].kind;
        let mut rels: Vec<usize> = (0..cfg.n_relations).filter(|&r| RELATIONS[r].subject == kind).collect();
        rels.shuffle(&mut rng);
        rels.truncate(cfg.facts_per_entity);
        rels.sort_unstable();
        for r in rels {
            let object = *values[r].choose(&mut rng).expect("non-empty pool");
            facts.push(Fact {
                subject: s,
                relation: r,
                object,
            });
        }
    }

    let mut order = subjects.clone();
    order.shuffle(&mut rng);
    let mut locality_pool: Vec<usize> = order[..cfg.n_locality].to_vec();
    let mut train_pool: Vec<usize> = order[cfg.n_locality..cfg.n_locality + cfg.n_train_entities].to_vec();
    let mut test_pool: Vec<usize> = order[cfg.n_locality + cfg.n_train_entities..].to_vec();
    even_kinds(&entities, &mut train_pool, &mut locality_pool);
    even_kinds(&entities, &mut test_pool, &mut locality_pool);

    Ok(KnowledgeBase {
        schema: WORLD_SCHEMA.into(),
        config: cfg.clone(),
        vocab,
        entities,
        subjects,
        values,
        facts,
        locality_pool,
        train_pool,
        test_pool,
    })
}

impl KnowledgeBase {
    pub fn name(&self, id: usize) -> &str {
        &self.entities[id].name
    }

    pub fn pool(&self, pool: Pool) -> &[usize] {
        match pool {
            Pool::Locality => &self.locality_pool,
            Pool::Train => &self.train_pool,
            Pool::Test => &self.test_pool,
        }
    }

    pub fn facts_of(&self, subject: usize) -> impl Iterator<Item = &Fact> {
        self.facts.iter().filter(move |f| f.subject == subject)
    }

    pub fn object(&self, subject: usize, relation: usize) -> Option<usize> {
        self.facts_of(subject).find(|f| f.relation == relation).map(|f| f.object)
    }

    pub fn image(&self, spec: ImageSpec) -> Vec<usize> {
        let c = &self.config;
        render_image_tokens(spec, c.n_img_tokens, c.n_variant_tokens, c.image_vocab)
    }

    /// Visual identity question in frame `frame` for the entity's kind.
    pub fn visual_question(&self, entity: usize, frame: usize) -> String {
        let frames = self.entities[entity].kind.visual_frames();
        frames[frame % frames.len()].to_string()
    }

    pub fn fact_question(&self, subject: &str, relation: usize, frame: usize) -> String {
        RELATIONS[relation].frames[frame % FRAMES_PER_RELATION].replace("{S}", subject)
    }

    /// Relation question about the entity depicted in the accompanying image.
    pub fn compositional_question(&self, kind: EntityKind, relation: usize, frame: usize) -> String {
        self.fact_question(kind.placeholder().expect("subject kind"), relation, frame)
    }

    pub fn encode_query(&self, q: &Query) -> Result<Vec<TokenId>> {
        let mut t = vec![Q_MARK];
        if let Some(img) = q.image {
            t.push(OPEN);
            t.extend(self.image(img).into_iter().map(|k| self.vocab.image_token(k)));
            t.push(CLOSE);
        }
        t.extend(self.vocab.encode(&q.question)?);
        t.push(A_MARK);
        Ok(t)
    }

    /// A complete QA pair as it appears inside a context prefix.
    pub fn encode_pair(&self, image: Option<ImageSpec>, question: &str, answer: &str) -> Result<Vec<TokenId>> {
        let mut t = self.encode_query(&Query {
            qtype: if image.is_some() { QueryType::Visual } else { QueryType::Textual },
            image,
            question: question.to_string(),
        })?;
        t.extend(self.vocab.encode(answer)?);
        t.push(SEP);
        Ok(t)
    }

    pub fn answer_tokens(&self, answer: &str) -> Result<Vec<TokenId>> {
        self.vocab.encode(answer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::model::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut kb: KnowledgeBase = crate::model::read_json(path)?;
        if kb.schema != WORLD_SCHEMA {
            return Err(Error::Schema(format!("expected {WORLD_SCHEMA}, found {}", kb.schema)));
        }
        kb.vocab.reindex();
        Ok(kb)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub qtype: QueryType,
    pub image: Option<ImageSpec>,
    pub question: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Rel,
    TextGen,
    ImageGen,
    Loc,
    Comp,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 5] = [
        ProbeKind::Rel,
        ProbeKind::TextGen,
        ProbeKind::ImageGen,
        ProbeKind::Loc,
        ProbeKind::Comp,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub kind: ProbeKind,
    pub query: Query,
    /// Expected answer; `None` for locality probes, which are scored
    /// against the pre-edit model's own output.
    pub gold: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditPayload {
    Visual {
        image: ImageSpec,
        old_entity: usize,
        new_entity: usize,
    },
    Textual {
        subject: usize,
        relation: usize,
        old_object: usize,
        new_object: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub schema: String,
    pub index: usize,
    pub pair: usize,
    pub modality: Modality,
    pub payload: EditPayload,
    /// The edit prompt and its new answer.
    pub prompt: Query,
    pub target: String,
    pub probes: Vec<Probe>,
}

impl EditRecord {
    pub fn probe(&self, kind: ProbeKind) -> Option<&Probe> {
        self.probes.iter().find(|p| p.kind == kind)
    }

    /// Entities the edit is about.
    pub fn entities(&self) -> Vec<usize> {
        match self.payload {
            EditPayload::Visual { old_entity, new_entity, .. } => vec![old_entity, new_entity],
            EditPayload::Textual {
                subject,
                old_object,
                new_object,
                ..
            } => vec![subject, old_object, new_object],
        }
    }
}

/// Linked pairs drawn from one subject pool. Pair `k` contributes edit `2k`
/// (visual: the image of `e` is relabeled `e′`) followed by edit `2k+1`
/// (textual: `(e′, r, o) → (e′, r, o′)`). No subject is reused across pairs.
pub fn make_edit_stream(kb: &KnowledgeBase, n_pairs: usize, seed: u64) -> Result<Vec<EditRecord>> {
    make_edit_stream_from(kb, Pool::Test, n_pairs, seed)
}

pub fn make_edit_stream_from(kb: &KnowledgeBase, pool: Pool, n_pairs: usize, seed: u64) -> Result<Vec<EditRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_kind: BTreeMap<EntityKind, Vec<usize>> = BTreeMap::new();
    for &s in kb.pool(pool) {
        by_kind.entry(kb.entities[s].kind).or_default().push(s);
    }
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for list in by_kind.values_mut() {
        list.shuffle(&mut rng);
        pairs.extend(list.chunks_exact(2).map(|c| (c[0], c[1])));
    }
    if n_pairs > pairs.len() {
        return Err(Error::Config(format!(
            "{n_pairs} pairs requested but the {pool:?} pool supports {}",
            pairs.len()
        )));
    }
    pairs.shuffle(&mut rng);
    pairs.truncate(n_pairs);

    let edited: HashSet<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    let loc_pool: Vec<usize> = kb.locality_pool.iter().copied().filter(|e| !edited.contains(e)).collect();
    if loc_pool.is_empty() {
        return Err(Error::Config("locality pool is empty".into()));
    }

    let mut stream = Vec::with_capacity(2 * n_pairs);
    for (k, &(e, e_new)) in pairs.iter().enumerate() {
        let facts: Vec<Fact> = kb.facts_of(e_new).copied().collect();
        let fact = *facts.choose(&mut rng).expect("every subject has a fact");
        let candidates: Vec<usize> = kb.values[fact.relation].iter().copied().filter(|&v| v != fact.object).collect();
        let new_object = *candidates.choose(&mut rng).expect("pools have ≥ 2 values");
        let kind = kb.entities[e].kind;
        let edit_img = ImageSpec {
            entity: e,
            variant: EDIT_VARIANT_BASE + k as u64,
        };
        let heldout_img = ImageSpec {
            entity: e,
            variant: HELDOUT_VARIANT_BASE + k as u64,
        };
        let new_name = kb.name(e_new).to_string();

        let vq = |img: ImageSpec, frame: usize| Query {
            qtype: QueryType::Visual,
            image: Some(img),
            question: kb.visual_question(e, frame),
        };
        let loc_v = loc_pool[rng.gen_range(0..loc_pool.len())];
        let loc_v_frame = rng.gen_range(0..FRAMES_PER_RELATION);
        let v_rephrase = rng.gen_range(1..FRAMES_PER_RELATION);
        let visual = EditRecord {
            schema: STREAM_SCHEMA.into(),
            index: 2 * k,
            pair: k,
            modality: Modality::Visual,
            payload: EditPayload::Visual {
                image: edit_img,
                old_entity: e,
                new_entity: e_new,
            },
            prompt: vq(edit_img, 0),
            target: new_name.clone(),
            probes: vec![
                Probe {
                    kind: ProbeKind::Rel,
                    query: vq(edit_img, 0),
                    gold: Some(new_name.clone()),
                },
                Probe {
                    kind: ProbeKind::TextGen,
                    query: vq(edit_img, v_rephrase),
                    gold: Some(new_name.clone()),
                },
                Probe {
                    kind: ProbeKind::ImageGen,
                    query: vq(heldout_img, 0),
                    gold: Some(new_name.clone()),
                },
                Probe {
                    kind: ProbeKind::Loc,
                    query: Query {
                        qtype: QueryType::Visual,
                        image: Some(ImageSpec {
                            entity: loc_v,
                            variant: rng.gen_range(0..kb.config.pretrain_variants),
                        }),
                        question: kb.visual_question(loc_v, loc_v_frame),
                    },
                    gold: None,
                },
            ],
        };

        let tq = |frame: usize| Query {
            qtype: QueryType::Textual,
            image: None,
            question: kb.fact_question(&new_name, fact.relation, frame),
        };
        let new_obj_name = kb.name(new_object).to_string();
        let loc_t = loc_pool[rng.gen_range(0..loc_pool.len())];
        let loc_fact = *kb.facts_of(loc_t).collect::<Vec<_>>().choose(&mut rng).expect("fact");
        let loc_t_frame = rng.gen_range(0..FRAMES_PER_RELATION);
        let t_rephrase = rng.gen_range(1..FRAMES_PER_RELATION);
        let textual = EditRecord {
            schema: STREAM_SCHEMA.into(),
            index: 2 * k + 1,
            pair: k,
            modality: Modality::Textual,
            payload: EditPayload::Textual {
                subject: e_new,
                relation: fact.relation,
                old_object: fact.object,
                new_object,
            },
            prompt: tq(0),
            target: new_obj_name.clone(),
            probes: vec![
                Probe {
                    kind: ProbeKind::Rel,
                    query: tq(0),
                    gold: Some(new_obj_name.clone()),
                },
                Probe {
                    kind: ProbeKind::TextGen,
                    query: tq(t_rephrase),
                    gold: Some(new_obj_name.clone()),
                },
                Probe {
                    kind: ProbeKind::Loc,
                    query: Query {
                        qtype: QueryType::Textual,
                        image: None,
                        question: kb.fact_question(kb.name(loc_t), loc_fact.relation, loc_t_frame),
                    },
                    gold: None,
                },
                Probe {
                    kind: ProbeKind::Comp,
                    query: Query {
                        qtype: QueryType::Compositional,
                        image: Some(edit_img),
                        question: kb.compositional_question(kind, fact.relation, 0),
                    },
                    gold: Some(new_obj_name),
                },
            ],
        };
        stream.push(visual);
        stream.push(textual);
    }
    Ok(stream)
}

/// Probe set of one edit (probes are generated with the stream).
pub fn make_probe_set(edit: &EditRecord) -> &[Probe] {
    &edit.probes
}

pub fn write_stream(path: &Path, stream: &[EditRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in stream {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_stream(path: &Path) -> Result<Vec<EditRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: EditRecord = serde_json::from_str(&line)?;
        if e.schema != STREAM_SCHEMA {
            return Err(Error::Schema(format!("expected {STREAM_SCHEMA}, found {}", e.schema)));
        }
        out.push(e);
    }
    Ok(out)
}

/// Mix of item families in the pretraining corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Identity questions per subject.
    pub identity_items: usize,
    /// Frames per fact (0 = all four).
    pub fact_frames: usize,
    /// Compositional questions per subject without any context.
    pub compositional_items: usize,
    /// Items whose context answers the query with a counterfactual, per subject.
    pub matching_context_items: usize,
    /// Items whose context is about something else, per subject.
    pub unrelated_context_items: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            identity_items: 2,
            fact_frames: 0,
            compositional_items: 1,
            matching_context_items: 4,
            unrelated_context_items: 2,
        }
    }
}

/// Pretraining sequences: identity and fact questions, compositional questions
/// that chain both, and one draw of the context-prefixed items.
pub fn pretraining_corpus(kb: &KnowledgeBase, cfg: &CorpusConfig) -> Result<Vec<Sequence>> {
    let mut out = fixed_corpus(kb, cfg)?;
    out.extend(context_corpus(kb, cfg, cfg.seed)?);
    Ok(out)
}

/// First image variant used by context items; far from every other range.
pub const CONTEXT_VARIANT_BASE: u64 = 100_000;
/// Bumped whenever corpus generation changes, so cached models are rebuilt.
pub const CORPUS_REVISION: u32 = 2;

struct CorpusBuilder<'a> {
    kb: &'a KnowledgeBase,
    same_kind: BTreeMap<EntityKind, Vec<usize>>,
}

impl<'a> CorpusBuilder<'a> {
    fn new(kb: &'a KnowledgeBase) -> Self {
        let same_kind = kb.subjects.iter().fold(BTreeMap::new(), |mut m: BTreeMap<EntityKind, Vec<usize>>, &s| {
            m.entry(kb.entities[s].kind).or_default().push(s);
            m
        });
        Self { kb, same_kind }
    }

    fn seq(&self, ctx: Vec<TokenId>, q: &Query, answer: &str) -> Result<Sequence> {
        let mut prompt = ctx;
        prompt.extend(self.kb.encode_query(q)?);
        Ok(Sequence::new(prompt, &self.kb.answer_tokens(answer)?))
    }

    fn pretrain_image(&self, rng: &mut ChaCha8Rng, e: usize) -> ImageSpec {
        ImageSpec {
            entity: e,
            variant: rng.gen_range(0..self.kb.config.pretrain_variants),
        }
    }

    fn fresh_image(&self, rng: &mut ChaCha8Rng, e: usize) -> ImageSpec {
        ImageSpec {
            entity: e,
            variant: CONTEXT_VARIANT_BASE + rng.gen_range(0..1_000_000),
        }
    }

    fn visual(&self, image: ImageSpec, frame: usize) -> Query {
        Query {
            qtype: QueryType::Visual,
            image: Some(image),
            question: self.kb.visual_question(image.entity, frame),
        }
    }

    fn textual(&self, subject: &str, relation: usize, frame: usize) -> Query {
        Query {
            qtype: QueryType::Textual,
            image: None,
            question: self.kb.fact_question(subject, relation, frame),
        }
    }

    fn other(&self, rng: &mut ChaCha8Rng, e: usize) -> usize {
        let list = &self.same_kind[&self.kb.entities[e].kind];
        loop {
            let c = list[rng.gen_range(0..list.len())];
            if c != e {
                return c;
            }
        }
    }

    fn other_value(&self, rng: &mut ChaCha8Rng, r: usize, not: usize) -> usize {
        let vals = &self.kb.values[r];
        loop {
            let c = vals[rng.gen_range(0..vals.len())];
            if c != not {
                return c;
            }
        }
    }

    fn facts(&self, s: usize) -> Vec<Fact> {
        self.kb.facts_of(s).copied().collect()
    }
}

/// Context-free items: identity, every fact, compositional questions.
pub fn fixed_corpus(kb: &KnowledgeBase, cfg: &CorpusConfig) -> Result<Vec<Sequence>> {
    let b = CorpusBuilder::new(kb);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pv = kb.config.pretrain_variants;
    let mut out = Vec::new();
    for &s in &kb.subjects {
        let kind = kb.entities[s].kind;
        let name = kb.name(s).to_string();
        let facts = b.facts(s);
        for i in 0..cfg.identity_items {
            let variant = (i as u64 + s as u64) % pv;
            let frame = rng.gen_range(0..FRAMES_PER_RELATION);
            out.push(b.seq(vec![], &b.visual(ImageSpec { entity: s, variant }, frame), &name)?);
        }
        for f in &facts {
            let frames: Vec<usize> = if cfg.fact_frames == 0 {
                (0..FRAMES_PER_RELATION).collect()
            } else {
                let mut all: Vec<usize> = (0..FRAMES_PER_RELATION).collect();
                all.shuffle(&mut rng);
                all.truncate(cfg.fact_frames);
                all
            };
            for fr in frames {
                out.push(b.seq(vec![], &b.textual(&name, f.relation, fr), kb.name(f.object))?);
            }
        }
        for _ in 0..cfg.compositional_items {
            let f = facts[rng.gen_range(0..facts.len())];
            let q = Query {
                qtype: QueryType::Compositional,
                image: Some(b.pretrain_image(&mut rng, s)),
                question: kb.compositional_question(kind, f.relation, rng.gen_range(0..FRAMES_PER_RELATION)),
            };
            out.push(b.seq(vec![], &q, kb.name(f.object))?);
        }
    }
    Ok(out)
}

/// Context-prefixed items drawn from `seed`: a matching QA prefix whose
/// counterfactual answer must be copied, or an unrelated prefix that must be
/// ignored. Images use variants outside the pretraining range, so a fresh
/// draw per epoch rewards copying over memorising.
pub fn context_corpus(kb: &KnowledgeBase, cfg: &CorpusConfig, seed: u64) -> Result<Vec<Sequence>> {
    let b = CorpusBuilder::new(kb);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x00c0_47e7));
    let mut out = Vec::new();
    for &s in &kb.subjects {
        let kind = kb.entities[s].kind;
        let name = kb.name(s).to_string();
        let facts = b.facts(s);
        for _ in 0..cfg.matching_context_items {
            match rng.gen_range(0..3) {
                0 => {
                    let alias = b.other(&mut rng, s);
                    let shown = b.fresh_image(&mut rng, s);
                    let ctx = kb.encode_pair(
                        Some(shown),
                        &kb.visual_question(s, rng.gen_range(0..FRAMES_PER_RELATION)),
                        kb.name(alias),
                    )?;
                    let image = if rng.gen_bool(0.5) { shown } else { b.fresh_image(&mut rng, s) };
                    let q = b.visual(image, rng.gen_range(0..FRAMES_PER_RELATION));
                    out.push(b.seq(ctx, &q, kb.name(alias))?);
                }
                1 => {
                    let f = facts[rng.gen_range(0..facts.len())];
                    let alt = b.other_value(&mut rng, f.relation, f.object);
                    let ctx = kb.encode_pair(
                        None,
                        &kb.fact_question(&name, f.relation, rng.gen_range(0..FRAMES_PER_RELATION)),
                        kb.name(alt),
                    )?;
                    let q = b.textual(&name, f.relation, rng.gen_range(0..FRAMES_PER_RELATION));
                    out.push(b.seq(ctx, &q, kb.name(alt))?);
                }
                _ => {
                    let image = b.fresh_image(&mut rng, s);
                    let alias = b.other(&mut rng, s);
                    let alias_facts = b.facts(alias);
                    let f = alias_facts[rng.gen_range(0..alias_facts.len())];
                    let alt = b.other_value(&mut rng, f.relation, f.object);
                    let mut ctx = kb.encode_pair(Some(image), &kb.visual_question(s, 0), kb.name(alias))?;
                    ctx.extend(kb.encode_pair(None, &kb.fact_question(kb.name(alias), f.relation, 0), kb.name(alt))?);
                    let q = Query {
                        qtype: QueryType::Compositional,
                        image: Some(image),
                        question: kb.compositional_question(kind, f.relation, 0),
                    };
                    out.push(b.seq(ctx, &q, kb.name(alt))?);
                }
            }
        }
        // Unrelated prefixes are textual only. Whether a visual entry applies is
        // left to retrieval; the model copies any visual prefix it is given.
        for _ in 0..cfg.unrelated_context_items {
            let z = b.other(&mut rng, s);
            let f = facts[rng.gen_range(0..facts.len())];
            let zf = b.facts(z);
            let g = zf[rng.gen_range(0..zf.len())];
            let alt = b.other_value(&mut rng, g.relation, g.object);
            let ctx = kb.encode_pair(None, &kb.fact_question(kb.name(z), g.relation, 0), kb.name(alt))?;
            let q = b.textual(&name, f.relation, rng.gen_range(0..FRAMES_PER_RELATION));
            out.push(b.seq(ctx, &q, kb.name(f.object))?);
        }
    }
    Ok(out)
}
