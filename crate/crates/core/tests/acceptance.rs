//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Every expected value is computed by an
//! independent oracle in this file or fixed by hand.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tbvad_core::classifier::{
    fuse_classify, load_model, save_model, training_loss, training_loss_gradients, KnowledgeInputs,
    ModelConfig, ModelParams, TrainConfig,
};
use tbvad_core::embedder::{
    build_embedder, Backend, Embedder, EmbedderConfig, EmbedderMeta, HashEmbedder, TokenEmbeddingSeq,
};
use tbvad_core::encoder::EncoderConfig;
use tbvad_core::eval::{
    ablate_slots, average_precision, caption_stats, generate_synthetic, roc_auc, run_pipeline, PipelineConfig,
    SynthConfig,
};
use tbvad_core::knowledge::{Aspect, ExtractiveSummarizer, KnowledgeBase, SlotSummary};
use tbvad_core::reasoning::{
    counterfactual_margins, retrieve_evidence, slot_attention, slot_importance, softmax, template_explanation,
    Evidence, ExplanationRecord, ImportanceNet, SlotImportance,
};
use tbvad_core::textcorpus::{parse_captions, Label};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took <= limit, || format!("{what} took {took:.1?}, limit {limit:?}"))
}

// ---------------------------------------------------------------------------
// Oracles

/// P(s⁺ > s⁻) + ½·P(s⁺ = s⁻) by enumerating every positive/negative pair.
fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Σ_k (R_k − R_{k−1})·P_k over every distinct score used as a cut point
/// ("predict positive iff score ≥ cut").
fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for cut in cuts {
        let mut tp = 0.0;
        let mut predicted = 0.0;
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= cut {
                predicted += 1.0;
                if l {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * (tp / predicted);
        prev_recall = recall;
    }
    ap
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn cosine_oracle(u: &[f64], v: &[f64]) -> f64 {
    let (nu, nv) = (dot(u, u).sqrt(), dot(v, v).sqrt());
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
    }
}

// ---------------------------------------------------------------------------
// Random fixtures

const WORDS: [&str; 12] = [
    "gun", "knife", "street", "store", "runs", "walks", "night", "crowd", "car", "fire", "bag", "door",
];

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..=3);
    let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
    format!("{}.", words.join(" "))
}

/// Slot text of 1–4 sentences; sometimes includes a two-word sentence
/// together with its word-swapped twin (same embedding, different text).
fn random_slot_text(rng: &mut ChaCha8Rng) -> String {
    let mut sentences: Vec<String> = (0..rng.random_range(1..=4)).map(|_| random_sentence(rng)).collect();
    if rng.random_bool(0.3) {
        let (a, b) = (*WORDS.choose(rng).unwrap(), *WORDS.choose(rng).unwrap());
        let at = rng.random_range(0..=sentences.len());
        sentences.insert(at, format!("{a} {b}."));
        sentences.push(format!("{b} {a}."));
    }
    sentences.join(" ")
}

fn random_aspects(rng: &mut ChaCha8Rng) -> Vec<Aspect> {
    loop {
        let picked: Vec<Aspect> = Aspect::ALL.into_iter().filter(|_| rng.random_bool(0.6)).collect();
        if !picked.is_empty() {
            return picked;
        }
    }
}

fn random_kb(rng: &mut ChaCha8Rng, embedder: &dyn Embedder, aspects: &[Aspect], same_classes: bool) -> KnowledgeBase {
    let mut summaries = Vec::new();
    let texts: Vec<String> = aspects.iter().map(|_| random_slot_text(rng)).collect();
    for class in Label::BOTH {
        for (i, &a) in aspects.iter().enumerate() {
            let text = if same_classes || class == Label::Normal {
                texts[i].clone()
            } else {
                random_slot_text(rng)
            };
            summaries.push(SlotSummary::new(class, a, text).unwrap());
        }
    }
    KnowledgeBase::from_summaries(aspects, summaries, embedder).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-scale..scale))
}

fn random_seq(rng: &mut ChaCha8Rng, t: usize, d: usize) -> TokenEmbeddingSeq {
    let mut m = random_matrix(rng, t, d, 1.0);
    let mut mask = vec![true; t];
    for i in 1..t {
        if rng.random_bool(0.2) {
            mask[i] = false;
            m.row_mut(i).fill(0.0);
        }
    }
    TokenEmbeddingSeq::new(m, mask).unwrap()
}

fn random_importance_net(rng: &mut ChaCha8Rng, d: usize) -> ImportanceNet {
    let h = rng.random_range(1..=6);
    ImportanceNet {
        w1: random_matrix(rng, h, 2 * d, 1.0),
        b1: random_matrix(rng, 1, h, 1.0).row(0).to_owned(),
        w2: random_matrix(rng, 1, h, 1.0).row(0).to_owned(),
        b2: rng.random_range(-1.0..1.0),
    }
}

// ---------------------------------------------------------------------------
// Criteria

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut instances = 0;
    let mut with_ties = 0;
    while instances < 1000 {
        let n = rng.random_range(2..=20);
        // coarse score grids force ties; fine ones are almost always tie-free
        let levels = if rng.random_bool(0.7) { rng.random_range(2..=8) } else { 1 << 20 };
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if !labels.contains(&true) || !labels.contains(&false) {
            continue;
        }
        instances += 1;
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        if sorted.len() < n {
            with_ties += 1;
        }
        let auc = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        let ap = average_precision(&scores, &labels).map_err(|e| e.to_string())?;
        let (auc_o, ap_o) = (auc_oracle(&scores, &labels), ap_oracle(&scores, &labels));
        ensure((auc - auc_o).abs() <= 1e-12, || format!("AUC {auc} vs oracle {auc_o} on {scores:?} {labels:?}"))?;
        ensure((ap - ap_o).abs() <= 1e-12, || format!("AP {ap} vs oracle {ap_o} on {scores:?} {labels:?}"))?;
    }
    within(started, Duration::from_secs(10), "metric oracles")?;
    Ok(format!("1000 instances ({with_ties} with ties) match pairwise/cut-point oracles within 1e-12"))
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let config = ModelConfig {
        encoder: EncoderConfig { num_layers: 2, num_heads: 2, d_model: d, d_ff: 16, d_latent: 4 },
        aspects: Aspect::ALL.to_vec(),
        embedder: EmbedderMeta { backend: Backend::Hash, dim: d, seed: 0 },
        frames: 4,
        seed: 3,
        gated_residual: true,
        softmax_attention: false,
    };
    let mut model = ModelParams::init(config).map_err(|e| e.to_string())?;
    // a non-zero gate so the residual path contributes to every gradient
    model.tensors.head.gate[[0, 0]] = 0.35;
    let knowledge = KnowledgeInputs {
        prototypes_n: random_matrix(&mut rng, 4, d, 0.5),
        prototypes_a: random_matrix(&mut rng, 4, d, 0.5),
        knowledge_mean: random_matrix(&mut rng, 1, d, 0.5),
    };
    let data = vec![(random_seq(&mut rng, 4, d), true), (random_seq(&mut rng, 4, d), false)];
    let cfg = TrainConfig { l2_weight: 1e-3, ..Default::default() };
    let analytic = training_loss_gradients(&model, &knowledge, &data, &cfg).map_err(|e| e.to_string())?;

    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut failure = None;
    analytic.visit(&mut |name, g| {
        for ((r, c), &a) in g.indexed_iter() {
            let loss_at = |delta: f64| {
                let mut m = model.clone();
                m.tensors.visit_mut(&mut |n, t| {
                    if n == name {
                        t[[r, c]] += delta;
                    }
                });
                training_loss(&m, &knowledge, &data, &cfg).unwrap()
            };
            let numeric = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
            // relative error, with absolute comparison below magnitude 1e-4
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
            checked += 1;
            if rel >= 1e-4 && failure.is_none() {
                failure = Some(format!("{name}[{r},{c}]: analytic {a:e}, numeric {numeric:e}"));
            }
        }
    });
    if let Some(f) = failure {
        return Err(f);
    }
    within(started, Duration::from_secs(30), "gradient check")?;
    Ok(format!("{checked} parameters, worst relative error {worst:.2e} (< 1e-4)"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    // attention vs. triple loop
    for _ in 0..200 {
        let (s, t, d) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=8));
        let k = random_matrix(&mut rng, s, d, 1.0);
        let h = random_seq(&mut rng, t, d);
        let att = slot_attention(&k, &h).map_err(|e| e.to_string())?;
        let hv = h.vectors();
        let mut a = vec![vec![0.0; t]; s];
        for i in 0..s {
            for j in 0..t {
                if h.mask()[j] {
                    let mut acc = 0.0;
                    for x in 0..d {
                        acc += k[[i, x]] * hv[[j, x]];
                    }
                    a[i][j] = acc / (d as f64).sqrt();
                }
            }
        }
        for i in 0..s {
            for x in 0..d {
                let mut acc = 0.0;
                for j in 0..t {
                    acc += a[i][j] * hv[[j, x]];
                }
                ensure((att.c[[i, x]] - acc).abs() <= 1e-10, || format!("C[{i},{x}] {} vs {acc}", att.c[[i, x]]))?;
            }
            for j in 0..t {
                ensure((att.a[[i, j]] - a[i][j]).abs() <= 1e-10, || format!("A[{i},{j}] mismatch"))?;
            }
        }
    }
    // importance: normalization, shift invariance, argmax agreement
    for _ in 0..200 {
        let (s, d) = (rng.random_range(1..=4), rng.random_range(1..=6));
        let c = random_matrix(&mut rng, s, d, 3.0);
        let k = random_matrix(&mut rng, s, d, 1.0);
        let net = random_importance_net(&mut rng, d);
        let shift = rng.random_range(-50.0..50.0);
        let imp = slot_importance(&c, &k, &net).map_err(|e| e.to_string())?;
        let scorer = |x: ndarray::ArrayView1<f64>| tbvad_core::reasoning::SlotScorer::score(&net, x) + shift;
        let shifted = slot_importance(&c, &k, &scorer).map_err(|e| e.to_string())?;
        ensure((imp.w.sum() - 1.0).abs() <= 1e-6, || format!("weights sum to {}", imp.w.sum()))?;
        for (a, b) in imp.w.iter().zip(&shifted.w) {
            ensure((a - b).abs() <= 1e-9, || format!("shift by {shift} changed weights"))?;
        }
        let argmax = |v: &Array1<f64>| v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best });
        ensure(argmax(&imp.w) == argmax(&imp.z), || "argmax(w) != argmax(z)".into())?;
    }
    // evidence retrieval vs. exhaustive search
    let embedder = HashEmbedder::new(8, 5).unwrap();
    let mut ties = 0;
    for _ in 0..500 {
        let aspects = Aspect::canonical(&random_aspects(&mut rng));
        let kb = random_kb(&mut rng, &embedder, &aspects, false);
        let class = if rng.random_bool(0.5) { Label::Abnormal } else { Label::Normal };
        let z: Array1<f64> = (0..aspects.len()).map(|_| rng.random_range(0..3) as f64).collect();
        let importance = SlotImportance { w: softmax(&z), z };
        let k = rng.random_range(1..=4);
        let h_bar: Array1<f64> = if rng.random_bool(0.05) {
            Array1::zeros(8)
        } else {
            random_matrix(&mut rng, 1, 8, 1.0).row(0).to_owned()
        };
        let got = retrieve_evidence(&h_bar, &kb, class, &importance, k).map_err(|e| e.to_string())?;

        // slots by descending weight, canonical order among equal weights
        let mut order: Vec<usize> = (0..aspects.len()).collect();
        for i in 0..order.len() {
            for j in 0..order.len() - 1 - i {
                let (x, y) = (order[j], order[j + 1]);
                if importance.w[y] > importance.w[x] {
                    order.swap(j, j + 1);
                }
            }
        }
        let mut expected: Vec<(Aspect, usize, f64)> = Vec::new();
        for &s in order.iter().take(k) {
            let emb = kb.sentence_embeddings(class, aspects[s]).unwrap();
            let sims: Vec<f64> = emb.rows().into_iter().map(|r| cosine_oracle(h_bar.as_slice().unwrap(), &r.to_vec())).collect();
            let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = sims.iter().position(|&v| v == best).unwrap();
            if sims.iter().filter(|&&v| v == best).count() > 1 {
                ties += 1;
            }
            expected.push((aspects[s], first, best));
        }
        ensure(got.len() == expected.len(), || format!("{} evidences, expected {}", got.len(), expected.len()))?;
        for (i, (e, (aspect, idx, sim))) in got.iter().zip(&expected).enumerate() {
            let slot = kb.slot(class, *aspect).unwrap();
            let want = &slot.sentences[*idx];
            let same = e.aspect == *aspect && e.class_v == class && e.rank == i + 1;
            let sentence_ok = &e.sentence == want || {
                // a different sentence is acceptable only for a numerical tie
                let j = slot.sentences.iter().position(|s| s == &e.sentence).unwrap();
                let emb = kb.sentence_embeddings(class, *aspect).unwrap();
                (cosine_oracle(h_bar.as_slice().unwrap(), &emb.row(j).to_vec()) - sim).abs() <= 1e-12 && j > *idx
            };
            ensure(same && sentence_ok && (e.similarity - sim).abs() <= 1e-12, || {
                format!("evidence {} = {e:?}, expected {aspect} sentence #{idx} ({want:?}, {sim})", i + 1)
            })?;
        }
    }
    Ok(format!(
        "attention ≤1e-10 vs triple loop; importance normalized/shift-invariant; 500 retrievals match exhaustive search ({ties} exact ties)"
    ))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let embedder = HashEmbedder::new(6, 9).unwrap();
    let mut worst_sum = 0.0f64;
    for i in 0..200 {
        let aspects = Aspect::canonical(&random_aspects(&mut rng));
        let net = random_importance_net(&mut rng, 6);
        let t = rng.random_range(1..=6);
        let h = random_seq(&mut rng, t, 6);
        let kb = random_kb(&mut rng, &embedder, &aspects, false);
        let fwd = counterfactual_margins(&h, &kb, &net, Label::Abnormal).map_err(|e| e.to_string())?;
        let rev = counterfactual_margins(&h, &kb, &net, Label::Normal).map_err(|e| e.to_string())?;
        let sum: f64 = fwd.values().sum();
        worst_sum = worst_sum.max(sum.abs());
        ensure(sum.abs() <= 1e-9, || format!("instance {i}: margins sum to {sum:e}"))?;
        ensure(fwd.keys().eq(aspects.iter()), || format!("instance {i}: margin keys {:?}", fwd.keys()))?;
        for (a, d) in &fwd {
            ensure(rev[a] == -d, || format!("instance {i}: swap gives {} for {a}, expected {}", rev[a], -d))?;
        }
        let same = random_kb(&mut rng, &embedder, &aspects, true);
        let zero = counterfactual_margins(&h, &same, &net, Label::Abnormal).map_err(|e| e.to_string())?;
        ensure(zero.values().all(|&d| d == 0.0), || format!("instance {i}: identical knowledge gives {zero:?}"))?;
    }
    Ok(format!("200 instances: |ΣΔ| ≤ {worst_sum:.1e}, Δ ≡ 0 for identical classes, sign flips under class swap"))
}

fn criterion_5() -> Outcome {
    let split = generate_synthetic(&SynthConfig::default()).map_err(|e| e.to_string())?;
    ensure(split.train.len() == 200 && split.test.len() == 100, || "unexpected split sizes".into())?;
    let cfg = PipelineConfig::default();
    ensure(
        cfg.frames == 8 && cfg.embedder.d == 64 && cfg.embedder.backend == Backend::Hash && cfg.encoder.num_layers == 2,
        || "default pipeline is not K=8, hash d=64, L=2".into(),
    )?;
    let embedder = build_embedder(&cfg.embedder).map_err(|e| e.to_string())?;
    let summarizer = ExtractiveSummarizer::default();
    let started = Instant::now();
    let run = run_pipeline(&split.train, &split.test, &cfg, embedder.as_ref(), &summarizer).map_err(|e| e.to_string())?;
    let took = started.elapsed();
    let auc = run.report.auc.ok_or("no AUC")?;
    let ap = run.report.ap.ok_or("no AP")?;
    // recompute the headline metrics with the oracles from criterion 1
    let labels = split.test.labels();
    ensure((auc - auc_oracle(&run.scores, &labels)).abs() <= 1e-12, || "AUC disagrees with oracle".into())?;
    ensure((ap - ap_oracle(&run.scores, &labels)).abs() <= 1e-12, || "AP disagrees with oracle".into())?;
    let headline = format!("held-out AUC {auc:.4}, AP {ap:.4}, trained+evaluated in {took:.1?}");
    ensure(took <= Duration::from_secs(300), || format!("{headline}: over the 5-minute budget"))?;
    ensure(auc >= 0.95 && ap >= 0.95, || format!("{headline}: below 0.95"))?;

    let planted = split.manifest.config.planted_aspect;
    let combos = vec![vec![planted], vec![Aspect::Environment]];
    let rows = ablate_slots(&split.train, &split.test, &combos, &cfg, embedder.as_ref(), &summarizer)
        .map_err(|e| e.to_string())?;
    let (p, e) = (rows[0].auc.ok_or("planted row failed")?, rows[1].auc.ok_or("environment row failed")?);
    let ablation = format!("ablation AUC {{{planted}}} {p:.4} vs {{environment}} {e:.4}");
    ensure(p > e, || format!("{headline}; {ablation}: planted-aspect combo not strictly above"))?;
    Ok(format!("{headline}; {ablation}"))
}

fn criterion_6() -> Outcome {
    // model digest determinism and file round-trip
    let split = generate_synthetic(&SynthConfig { train_videos: 40, test_videos: 10, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let mut cfg = PipelineConfig::default();
    cfg.train.epochs = 3;
    let embedder = build_embedder(&cfg.embedder).map_err(|e| e.to_string())?;
    let summarizer = ExtractiveSummarizer::default();
    let a = run_pipeline(&split.train, &split.test, &cfg, embedder.as_ref(), &summarizer).map_err(|e| e.to_string())?;
    let b = run_pipeline(&split.train, &split.test, &cfg, embedder.as_ref(), &summarizer).map_err(|e| e.to_string())?;
    let digest = a.model.digest().map_err(|e| e.to_string())?;
    ensure(digest == b.model.digest().map_err(|e| e.to_string())?, || "digests differ across runs".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.bin");
    save_model(&a.model, &path).map_err(|e| e.to_string())?;
    let loaded = load_model(&path).map_err(|e| e.to_string())?;
    ensure(loaded == a.model, || "loaded model differs".into())?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    ensure(bytes == loaded.to_bytes().map_err(|e| e.to_string())?, || "re-serialized bytes differ".into())?;

    // knowledge JSON
    let json = a.knowledge.to_json().map_err(|e| e.to_string())?;
    let kb = KnowledgeBase::from_json(&json, embedder.as_ref()).map_err(|e| e.to_string())?;
    ensure(kb == a.knowledge, || "knowledge JSON round-trip differs".into())?;

    // explanation record JSON
    let record = tbvad_core::reasoning::explain_video(
        &split.test.videos[0],
        &a.knowledge,
        &a.model,
        embedder.as_ref(),
        Default::default(),
        tbvad_core::reasoning::ExplanationBackend::Template,
    )
    .map_err(|e| e.to_string())?;
    let back = ExplanationRecord::from_json(&record.to_json().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(back == record, || "explanation record JSON round-trip differs".into())?;

    // cache: the second run against the recording stub issues no requests
    let stub = common::StubServer::start();
    let cache = tempfile::tempdir().map_err(|e| e.to_string())?;
    let remote_cfg = EmbedderConfig {
        backend: Backend::Remote,
        d: 16,
        endpoint: Some(stub.url.clone()),
        cache_dir: Some(cache.path().to_path_buf()),
        ..Default::default()
    };
    let texts = ["a man holds a knife.", "the street is empty.", "a man holds a knife."];
    let first: Vec<Array1<f64>> = build_embedder(&remote_cfg)
        .and_then(|e| e.embed_pooled(&texts, 512))
        .map_err(|e| e.to_string())?;
    let calls_first = stub.count();
    ensure(calls_first >= 1, || "first run made no requests".into())?;
    let second = build_embedder(&remote_cfg)
        .and_then(|e| e.embed_pooled(&texts, 512))
        .map_err(|e| e.to_string())?;
    let calls_second = stub.count() - calls_first;
    ensure(calls_second == 0, || format!("second run made {calls_second} requests"))?;
    ensure(first == second, || "cached vectors differ from fetched ones".into())?;
    Ok(format!(
        "digest {}… stable; model bytes, knowledge and record JSON round-trip; cached rerun made 0 of {calls_first} requests",
        &digest[..12]
    ))
}

fn criterion_7() -> Outcome {
    let h = TokenEmbeddingSeq::unmasked(ndarray::arr2(&[[1.0], [3.0]])).unwrap();
    let att = slot_attention(&ndarray::arr2(&[[2.0]]), &h).map_err(|e| e.to_string())?;
    ensure(att.c[[0, 0]] == 20.0, || format!("C = {}", att.c[[0, 0]]))?;

    let config = ModelConfig {
        encoder: EncoderConfig { num_layers: 0, num_heads: 1, d_model: 2, d_ff: 2, d_latent: 3 },
        aspects: Aspect::ALL.to_vec(),
        embedder: EmbedderMeta { backend: Backend::Hash, dim: 2, seed: 0 },
        frames: 1,
        seed: 0,
        gated_residual: true,
        softmax_attention: false,
    };
    let mut model = ModelParams::init(config).map_err(|e| e.to_string())?;
    model.tensors.head.fusion_w.fill(0.0);
    model.tensors.head.fusion_w[[0, 0]] = 1.0;
    model.tensors.head.fusion_b.fill(0.0);
    let p_d = ndarray::arr1(&[3f64.ln(), 0.0, 0.0]);
    let p_v = ndarray::arr1(&[0.0, 0.0, 0.0]);
    let y = fuse_classify(&p_d, &p_v, &model.tensors.head).map_err(|e| e.to_string())?;
    ensure((y - 0.75).abs() <= 1e-12, || format!("sigmoid(ln 3) = {y}"))?;

    let w = softmax(&ndarray::arr1(&[2f64.ln(), 0.0, 0.0, 0.0]));
    for (got, want) in w.iter().zip([0.4, 0.2, 0.2, 0.2]) {
        ensure((got - want).abs() <= 1e-12, || format!("softmax = {w}"))?;
    }

    let lines = ["a b", "a b c d"]
        .iter()
        .enumerate()
        .map(|(i, t)| serde_json::json!({"video_id": "v", "frame_index": i, "label": "normal", "text": t}).to_string())
        .collect::<Vec<_>>()
        .join("\n");
    let corpus = parse_captions(lines.as_bytes(), "fixture").map_err(|e| e.to_string())?;
    let stats = caption_stats(&corpus).map_err(|e| e.to_string())?;
    ensure(stats.avg_len == 3.0, || format!("avg_len = {}", stats.avg_len))?;
    Ok("C = 20, sigmoid(ln 3) = 0.75, softmax = [0.4, 0.2, 0.2, 0.2], avg_len = 3.0".into())
}

fn criterion_8() -> Outcome {
    let evidence = |aspect, sentence: &str, similarity, rank| Evidence {
        aspect,
        class_v: Label::Abnormal,
        sentence: sentence.into(),
        similarity,
        rank,
    };
    let record = ExplanationRecord {
        video_id: "fixture-001".into(),
        score: 0.8734,
        label: Label::Abnormal,
        slot_weights: BTreeMap::from([
            (Aspect::Context, 0.1),
            (Aspect::Action, 0.25),
            (Aspect::Object, 0.55),
            (Aspect::Environment, 0.1),
        ]),
        evidences: vec![
            evidence(Aspect::Object, "A man holds a knife near the counter.", 0.81234, 1),
            evidence(Aspect::Action, "A person breaks the store window.", 0.6, 2),
        ],
        margins: BTreeMap::from([
            (Aspect::Context, -0.05),
            (Aspect::Action, 0.07),
            (Aspect::Object, 0.12),
            (Aspect::Environment, -0.14),
        ]),
        rationale: String::new(),
        fallback: false,
        model_digest: "0".repeat(64),
    };
    record.validate().map_err(|e| e.to_string())?;
    let golden = include_str!("golden/explanation.txt");
    let got = template_explanation(&record);
    ensure(got == golden, || format!("template output differs from golden:\n{got}"))?;
    Ok(format!("{} bytes match the golden file", golden.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("metric oracles", criterion_1),
        ("gradient correctness", criterion_2),
        ("reasoning-branch fidelity", criterion_3),
        ("counterfactual margins", criterion_4),
        ("synthetic end-to-end", criterion_5),
        ("determinism and round-trips", criterion_6),
        ("hand-check fixtures", criterion_7),
        ("explanation snapshot", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("PASS criterion {} ({name}): {detail}", i + 1),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {why}", i + 1);
            }
            Err(_) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): panicked", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

