//! Acceptance criteria 1-12 on the default lab configuration. Prints one
//! PASS/FAIL line per criterion and exits nonzero if any criterion fails.
//!
//! World, pretrained model, encoders and connectors come from the artifact
//! cache (`KEDIT_CACHE`, default `target/kedit-cache`); a cold cache costs
//! one pretraining run.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kedit::editor::{read_ledger, write_ledger, ConnectorArtifact, EditorConfig, LedgerRecord, Stage2Config, Strategy};
use kedit::exec::Exec;
use kedit::meme::{sample_training_pairs, EncoderParams};
use kedit::memi::{gates_for_query, AdapterBank, Trainable};
use kedit::metrics::{count, evaluate_run, kur, GapLabel, Metric, MetricsReport};
use kedit::model::{forward, Sequence};
use kedit::pipeline::{default_cache_dir, Artifacts, LabConfig, RunOutput};
use kedit::selftest::{
    commutativity_max_diff, encoder_gradient_error, isolation_fingerprints, model_gradient_errors, retrieval_agreement,
    SUITES,
};
use kedit::types::{Modality, QueryType};
use kedit::world::ProbeKind;

const EDITS: usize = 500;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = fn(&mut Ctx) -> Result<Outcome, String>;

/// Shared artifacts plus memoized runs and connectors.
struct Ctx {
    art: Artifacts,
    connectors: BTreeMap<String, ConnectorArtifact>,
    runs: BTreeMap<String, RunOutput>,
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

impl Ctx {
    fn connector(&mut self, hit_rate: f64, seed: u64) -> Result<ConnectorArtifact, String> {
        let key = format!("{hit_rate}/{seed}");
        if !self.connectors.contains_key(&key) {
            let s2 = Stage2Config {
                hit_rate,
                seed,
                ..self.art.config.stage2.clone()
            };
            let c = self.art.connector(&s2).map_err(err)?;
            self.connectors.insert(key.clone(), c);
        }
        Ok(self.connectors[&key].clone())
    }

    fn editor(&self, strategy: Strategy) -> EditorConfig {
        EditorConfig {
            strategy,
            ..self.art.config.editor.clone()
        }
    }

    /// Runs `cfg` on the first `EDITS` edits of stream `seed`, memoized by
    /// `key`.
    fn run(&mut self, key: &str, cfg: &EditorConfig, seed: u64, conn: Option<&ConnectorArtifact>) -> Result<&RunOutput, String> {
        if !self.runs.contains_key(key) {
            let t = Instant::now();
            let out = self.art.run(cfg, EDITS, seed, conn).map_err(err)?;
            eprintln!("  run {key}: {:.1?}", t.elapsed());
            self.runs.insert(key.to_string(), out);
        }
        Ok(&self.runs[key])
    }
}

fn avg(r: &MetricsReport, s: Strategy, m: Metric) -> f64 {
    r.value(s, GapLabel::Average, m).expect("average row")
}

fn at(r: &MetricsReport, s: Strategy, g: usize, m: Metric) -> f64 {
    r.value(s, GapLabel::Gap(g), m).expect("gap row")
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn c01_gating(ctx: &mut Ctx) -> Result<Outcome, String> {
    let conn = ctx.connector(ctx.art.config.stage2.hit_rate, ctx.art.config.stage2.seed)?;
    let cfg = ctx.editor(Strategy::MemeicFull);
    let stream = ctx.art.test_stream(100, 0).map_err(err)?;
    let lab = ctx.art.lab();
    let mut st = lab.new_state(&cfg, Some(&conn.weights)).map_err(err)?;
    for e in &stream {
        lab.apply_edit(&mut st, &cfg, e).map_err(err)?;
    }
    let bank = st.bank.expect("memeic_full has adapters");
    let mut zeroed = bank.clone();
    zeroed.tensors_mut(Trainable::Connector).into_iter().for_each(|t| t.fill(0.0));
    let queries: Vec<_> = stream
        .iter()
        .flat_map(|e| e.probes.iter())
        .filter(|p| p.query.qtype != QueryType::Compositional)
        .take(100)
        .collect();
    let t = Instant::now();
    let mut worst = 0.0f64;
    for p in &queries {
        let toks = ctx.art.kb.encode_query(&p.query).map_err(err)?;
        let g = gates_for_query(p.query.qtype);
        let a = forward(&ctx.art.pretrained.weights, Some(&bank), g, &toks).map_err(err)?;
        let b = forward(&ctx.art.pretrained.weights, Some(&zeroed), g, &toks).map_err(err)?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    let el = t.elapsed();
    let trained = bank.tensors(Trainable::Connector).iter().any(|t| t.data().iter().any(|&x| x != 0.0));
    Ok(outcome(
        queries.len() == 100 && worst == 0.0 && trained && el < Duration::from_secs(10),
        format!("{} unimodal queries, max |Δlogit| {worst:e}, {el:.1?}", queries.len()),
    ))
}

fn c02_commutativity(_: &mut Ctx) -> Result<Outcome, String> {
    let t = Instant::now();
    let d = commutativity_max_diff(1000, 2).map_err(err)?;
    let el = t.elapsed();
    Ok(outcome(d <= 1e-9 && el < Duration::from_secs(10), format!("1000 states, max diff {d:e}, {el:.1?}")))
}

fn c03_isolation(ctx: &mut Ctx) -> Result<Outcome, String> {
    let t = Instant::now();
    let cfg = ctx.editor(Strategy::InternalDualLora);
    let stream = ctx.art.test_stream(100, 3).map_err(err)?;
    let [(fv, rv), (ft, rt)] = isolation_fingerprints(&ctx.art.lab(), &cfg, &stream).map_err(err)?;
    let el = t.elapsed();
    Ok(outcome(
        fv == rv && ft == rt && el < Duration::from_secs(300),
        format!("100 edits, θ_v equal {}, θ_t equal {}, {el:.1?}", fv == rv, ft == rt),
    ))
}

fn c04_gradients(ctx: &mut Ctx) -> Result<Outcome, String> {
    let t = Instant::now();
    let kb = &ctx.art.kb;
    let w = &ctx.art.pretrained.weights;
    let mut bank = AdapterBank::dual(&w.config, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for which in [Trainable::Visual, Trainable::Textual, Trainable::Connector] {
        for p in bank.tensors_mut(which) {
            p.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.2..0.2));
        }
    }
    let edit = &ctx.art.test_stream(2, 5).map_err(err)?[1];
    let comp = edit.probe(ProbeKind::Comp).expect("textual edits carry the compositional probe");
    let seq = Sequence::new(
        kb.encode_query(&comp.query).map_err(err)?,
        &kb.answer_tokens(comp.gold.as_deref().unwrap_or_default()).map_err(err)?,
    );
    let mut worst = Vec::new();
    for (name, e) in model_gradient_errors(w, &bank, &seq, 4, 6).map_err(err)? {
        worst.push((name.to_string(), e));
    }
    let enc: &EncoderParams = &ctx.art.encoders.params;
    let items = sample_training_pairs(kb, &ctx.art.config.encoders, &mut ChaCha8Rng::seed_from_u64(7)).map_err(err)?;
    worst.push(("encoders".into(), encoder_gradient_error(enc, &items, 6, 8).map_err(err)?));
    let el = t.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Ok(outcome(max < 1e-4 && el < Duration::from_secs(120), format!("{detail}; {el:.1?}")))
}

fn c05_retrieval(_: &mut Ctx) -> Result<Outcome, String> {
    let t = Instant::now();
    let (tx, vis) = retrieval_agreement(100, 5);
    let el = t.elapsed();
    Ok(outcome(
        tx == 100 && vis == 100 && el < Duration::from_secs(30),
        format!("text {tx}/100, visual {vis}/100, {el:.1?}"),
    ))
}

#[derive(serde::Deserialize)]
struct FixtureRecord {
    output: String,
    reference: String,
    label: bool,
}

#[derive(serde::Deserialize)]
struct FixtureMetric {
    kind: ProbeKind,
    modality: Modality,
    records: Vec<FixtureRecord>,
}

#[derive(serde::Deserialize)]
struct Fixture {
    gap: usize,
    expected: BTreeMap<String, (usize, usize)>,
    metrics: BTreeMap<String, FixtureMetric>,
}

fn c06_metric_fixtures(_: &mut Ctx) -> Result<Outcome, String> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/metrics.json");
    let fx: Fixture = serde_json::from_str(&std::fs::read_to_string(path).map_err(err)?).map_err(err)?;
    let mut ledger = Vec::new();
    let mut mislabeled = 0;
    for m in fx.metrics.values() {
        for r in &m.records {
            // the hand label must agree with plain string comparison
            mislabeled += usize::from(r.label != (r.output == r.reference));
            let i = ledger.len();
            ledger.push(LedgerRecord {
                edit: i,
                pair: i / 2,
                modality: m.modality,
                gap: fx.gap,
                kind: m.kind,
                outcome: r.label,
                output: r.output.clone(),
                context: 0,
            });
        }
    }
    // a JSONL round trip must not change anything
    let dir = tempfile::tempdir().map_err(err)?;
    write_ledger(&dir.path().join("l.jsonl"), &ledger).map_err(err)?;
    let ledger = read_ledger(&dir.path().join("l.jsonl")).map_err(err)?;
    let report = evaluate_run(Strategy::MemeicFull, &ledger, &[fx.gap]).map_err(err)?;
    let mut bad = Vec::new();
    for m in Metric::ALL {
        let (num, den) = fx.expected[m.name()];
        let c = count(&ledger, m, fx.gap);
        let v = report.value(Strategy::MemeicFull, GapLabel::Gap(fx.gap), m).unwrap_or(f64::NAN);
        if (c.successes, c.samples) != (num, den) || v != num as f64 / den as f64 {
            bad.push(m.name());
        }
    }
    let (kn, kd) = fx.expected["kur"];
    let k = report.rows[0].kur.unwrap_or(f64::NAN);
    if (k - kn as f64 / kd as f64).abs() > 1e-15 {
        bad.push("kur");
    }
    // Table 8: CompRel 84.02 with KUR 1.26 implies vis+text = 2·84.02/1.26
    let implied = 2.0 * 84.02 / 1.26;
    let table8 = kur(0.8402, implied / 200.0, implied / 200.0).map_err(err)?;
    let table8_ok = (table8 - 1.26).abs() <= 0.01 && (implied - 133.37).abs() < 0.01;
    Ok(outcome(
        bad.is_empty() && mislabeled == 0 && table8_ok,
        format!(
            "8 metrics × 10 records, mismatches {bad:?}, mislabeled {mislabeled}; table-8 vis+text {implied:.2} → KUR {table8:.4}"
        ),
    ))
}

fn c07_external_gap_invariance(ctx: &mut Ctx) -> Result<Outcome, String> {
    let cfg = ctx.editor(Strategy::ExternalOnly);
    let t = Instant::now();
    let out = ctx.run("external_only", &cfg, 0, None)?;
    let el = t.elapsed();
    let key = |r: &LedgerRecord| (r.edit, r.kind, r.modality);
    let g0: BTreeMap<_, _> = out.ledger.iter().filter(|r| r.gap == 0).map(|r| (key(r), (r.outcome, &r.output))).collect();
    let g100: BTreeMap<_, _> = out.ledger.iter().filter(|r| r.gap == 100).map(|r| (key(r), (r.outcome, &r.output))).collect();
    let mut compared = 0;
    let mut differ = Vec::new();
    for (k, v) in &g100 {
        // comp probes of a visual edit first appear at gap 1
        if let Some(w) = g0.get(k) {
            compared += 1;
            if v != w {
                differ.push(format!("edit {} {:?}: {:?} -> {:?}", k.0, k.1, w, v));
            }
        }
    }
    let expected = g100.keys().filter(|k| k.1 != ProbeKind::Comp || k.2 == Modality::Textual).count();
    Ok(outcome(
        differ.is_empty() && compared == expected && compared > 0 && el < Duration::from_secs(900),
        format!(
            "{compared} probes compared at gap 0 vs 100, {} differ {:?}; run {el:.1?}",
            differ.len(),
            &differ[..differ.len().min(3)]
        ),
    ))
}

fn c08_forgetting(ctx: &mut Ctx) -> Result<Outcome, String> {
    let t = Instant::now();
    let single = ctx.editor(Strategy::InternalSingleLora);
    let s = ctx.run("internal_single_lora", &single, 0, None)?.report.clone();
    let conn = ctx.connector(ctx.art.config.stage2.hit_rate, ctx.art.config.stage2.seed)?;
    let full = ctx.editor(Strategy::MemeicFull);
    let m = ctx.run("memeic_full", &full, 0, Some(&conn))?.report.clone();
    let el = t.elapsed();
    let sd = at(&s, Strategy::InternalSingleLora, 0, Metric::VisRel) - at(&s, Strategy::InternalSingleLora, 100, Metric::VisRel);
    let md = at(&m, Strategy::MemeicFull, 0, Metric::VisRel) - at(&m, Strategy::MemeicFull, 100, Metric::VisRel);
    Ok(outcome(
        sd >= 0.10 && md <= sd / 2.0 && el < Duration::from_secs(1800),
        format!("VisRel drop gap 0→100: single-LoRA {} pts, memeic_full {} pts; {el:.1?}", pct(sd), pct(md)),
    ))
}

fn c09_connector_value(ctx: &mut Ctx) -> Result<Outcome, String> {
    let t = Instant::now();
    let mut margins = Vec::new();
    for seed in SEEDS {
        let conn = ctx.connector(ctx.art.config.stage2.hit_rate, ctx.art.config.stage2.seed + seed)?;
        let mut full = ctx.editor(Strategy::MemeicFull);
        full.test_hit_rate = Some(0.5);
        let mut hybrid = ctx.editor(Strategy::HybridNoConnector);
        hybrid.test_hit_rate = Some(0.5);
        let a = avg(&ctx.run(&format!("memeic_full@0.5/{seed}"), &full, seed, Some(&conn))?.report, Strategy::MemeicFull, Metric::CompRel);
        let b = avg(&ctx.run(&format!("hybrid@0.5/{seed}"), &hybrid, seed, None)?.report, Strategy::HybridNoConnector, Metric::CompRel);
        margins.push(a - b);
    }
    let el = t.elapsed();
    Ok(outcome(
        margins.iter().all(|&d| d >= 0.05) && el < Duration::from_secs(3600),
        format!("CompRel margin at p=0.5 per seed: {:?} pts; {el:.1?}", margins.iter().map(|&d| pct(d)).collect::<Vec<_>>()),
    ))
}

fn c10_adversarial_training(ctx: &mut Ctx) -> Result<Outcome, String> {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in SEEDS {
        let mut cfg = ctx.editor(Strategy::MemeicFull);
        cfg.test_hit_rate = Some(0.5);
        let s2 = ctx.art.config.stage2.seed + seed;
        let noisy = ctx.connector(0.7, s2)?;
        let clean = ctx.connector(1.0, s2)?;
        let a = avg(&ctx.run(&format!("memeic_full@0.5/{seed}"), &cfg, seed, Some(&noisy))?.report, Strategy::MemeicFull, Metric::CompRel);
        let b = avg(&ctx.run(&format!("memeic_full[p=1]@0.5/{seed}"), &cfg, seed, Some(&clean))?.report, Strategy::MemeicFull, Metric::CompRel);
        wins += usize::from(a > b);
        pairs.push(format!("{}/{}", pct(a), pct(b)));
    }
    Ok(outcome(
        wins * 2 > SEEDS.len(),
        format!("CompRel at test p=0.5, trained p=0.7 / p=1.0: {pairs:?}; {wins} of {} seeds", SEEDS.len()),
    ))
}

fn c11_visual_cue(ctx: &mut Ctx) -> Result<Outcome, String> {
    let blended = ctx.editor(Strategy::ExternalOnly);
    let text_only = EditorConfig {
        alpha: 0.0,
        ..blended.clone()
    };
    let a = avg(&ctx.run("external_only", &blended, 0, None)?.report, Strategy::ExternalOnly, Metric::VisRel);
    let b = avg(&ctx.run("external_only[alpha=0]", &text_only, 0, None)?.report, Strategy::ExternalOnly, Metric::VisRel);
    Ok(outcome(
        a - b >= 0.10,
        format!("external VisRel α={} {} vs α=0 {}", blended.alpha, pct(a), pct(b)),
    ))
}

fn c12_determinism(ctx: &mut Ctx) -> Result<Outcome, String> {
    for (name, suite) in SUITES {
        suite(Exec::Parallel).map_err(|e| format!("selftest {name}: {e}"))?;
    }
    let conn = ctx.connector(ctx.art.config.stage2.hit_rate, ctx.art.config.stage2.seed)?;
    let mut cfg = ctx.editor(Strategy::MemeicFull);
    cfg.test_hit_rate = Some(0.5);
    cfg.gaps = vec![0, 10, 20];
    let dir = tempfile::tempdir().map_err(err)?;
    let mut files = Vec::new();
    for (i, exec) in [Exec::Parallel, Exec::Parallel, Exec::Sequential].into_iter().enumerate() {
        ctx.art.exec = exec;
        let out = ctx.art.run(&cfg, 60, 9, Some(&conn));
        ctx.art.exec = Exec::Parallel;
        let d = dir.path().join(i.to_string());
        out.map_err(err)?.write(&d).map_err(err)?;
        let read = |f: &str| std::fs::read(d.join(f)).map_err(err);
        files.push((read("ledger.jsonl")?, read("report.csv")?, read("manifest.json")?));
    }
    let same = files.windows(2).all(|w| w[0] == w[1]);
    Ok(outcome(same, format!("{} selftest suites passed; 3 repeated runs byte-identical: {same}", SUITES.len())))
}

const CRITERIA: [(&str, Check); 12] = [
    ("gating consistency", c01_gating),
    ("adapter commutativity", c02_commutativity),
    ("modality isolation", c03_isolation),
    ("gradient fidelity", c04_gradients),
    ("retrieval oracle equivalence", c05_retrieval),
    ("metric fixtures", c06_metric_fixtures),
    ("external gap invariance", c07_external_gap_invariance),
    ("forgetting direction", c08_forgetting),
    ("connector value", c09_connector_value),
    ("adversarial training robustness", c10_adversarial_training),
    ("visual-cue retrieval", c11_visual_cue),
    ("determinism", c12_determinism),
];

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let filter: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.trim_start_matches('c').parse().ok())
        .collect();
    if std::env::args().any(|a| a == "--list") {
        for (i, (name, _)) in CRITERIA.iter().enumerate() {
            println!("criterion_{:02}_{}: test", i + 1, name.replace([' ', '-'], "_"));
        }
        return;
    }
    let t = Instant::now();
    let art = match Artifacts::build(LabConfig::default(), Some(default_cache_dir()), Exec::Parallel) {
        Ok(a) => a,
        Err(e) => {
            println!("acceptance: could not build artifacts: {e}");
            std::process::exit(1);
        }
    };
    eprintln!(
        "artifacts ready in {:.1?} (pretrain accuracy {:.4})",
        t.elapsed(),
        art.pretrained.report.accuracy
    );
    let mut ctx = Ctx {
        art,
        connectors: BTreeMap::new(),
        runs: BTreeMap::new(),
    };
    let mut failed = 0;
    for (i, (name, check)) in CRITERIA.iter().enumerate() {
        if !filter.is_empty() && !filter.contains(&(i + 1)) {
            continue;
        }
        let t = Instant::now();
        let o = check(&mut ctx).unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        failed += usize::from(!o.pass);
        println!(
            "criterion {:>2} {}: {name}: {} [{:.1?}]",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed()
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
