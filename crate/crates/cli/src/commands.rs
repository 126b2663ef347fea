//! Subcommand implementations. Machine-readable results go to stdout,
//! human-readable summaries to stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;

use tbvad_core::classifier::{load_model, save_model, train_with_history, ModelParams};
use tbvad_core::embedder::{build_embedder, Embedder};
use tbvad_core::eval::{
    ablate_slots, ablation_csv, ablation_table, caption_stats, cross_eval, evaluate, generate_synthetic,
    knowledge_from_corpus, parse_combos, MetricsReport, SynthConfig,
};
use tbvad_core::knowledge::{default_prompts, ExtractiveSummarizer, KnowledgeBase, LlmSummarizer, Summarizer};
use tbvad_core::reasoning::{explain_video, ExplainOptions, ExplanationBackend};
use tbvad_core::remote::{DiskCache, HttpClient, RemoteGenerator};
use tbvad_core::textcorpus::{load_captions, CaptionCorpus};

use crate::config::RunConfig;
use crate::failure::{Context, Failure};
use crate::provenance::{digest_inputs, InputDigest};
use crate::{Command, Metric};

type Inputs = BTreeMap<String, InputDigest>;

pub fn run(command: &Command, cfg: &RunConfig, inputs: &mut Inputs, outputs: &mut Vec<PathBuf>) -> Result<(), Failure> {
    match command {
        Command::GenSynth { out, domain } => gen_synth(cfg, out, domain.as_deref(), outputs),
        Command::BuildKnowledge { captions, out, extractive, .. } => {
            record_inputs(inputs, &[("--captions", captions)], out)?;
            build_knowledge(cfg, captions, out, *extractive, outputs)
        }
        Command::Train { captions, knowledge, out, .. } => {
            record_inputs(inputs, &[("--captions", captions), ("--knowledge", knowledge)], out)?;
            train(cfg, captions, knowledge, out, outputs)
        }
        Command::Eval { captions, knowledge, model, metric, out } => {
            let listed = [("--captions", captions), ("--knowledge", knowledge), ("--model", model)];
            record_inputs(inputs, &listed, out.as_deref().unwrap_or(Path::new("")))?;
            eval(cfg, captions, knowledge, model, *metric, out.as_deref(), outputs)
        }
        Command::Explain { captions, knowledge, model, video_id, out, .. } => {
            let listed = [("--captions", captions), ("--knowledge", knowledge), ("--model", model)];
            record_inputs(inputs, &listed, out.as_deref().unwrap_or(Path::new("")))?;
            explain(cfg, captions, knowledge, model, video_id.as_deref(), out.as_deref(), outputs)
        }
        Command::Ablate { captions, test_captions, combos, out, metric, extractive } => {
            let listed = [("--captions", captions), ("--test-captions", test_captions)];
            record_inputs(inputs, &listed, out.as_deref().unwrap_or(Path::new("")))?;
            ablate(cfg, captions, test_captions, combos, out.as_deref(), *metric, *extractive, outputs)
        }
        Command::CaptionStats { captions, out } => {
            record_inputs(inputs, &[("--captions", captions)], out.as_deref().unwrap_or(Path::new("")))?;
            let corpus = read_corpus("--captions", captions)?;
            let stats = caption_stats(&corpus).context(&format!("--captions {}", captions.display()))?;
            let text = serde_json::to_string(&stats).expect("stats serialize");
            eprintln!("captions {}  avg_len {:.4}  tfidf {:.4}", stats.captions, stats.avg_len, stats.tfidf);
            emit(&text, out.as_deref(), outputs)
        }
        Command::CrossEval { captions, test_captions, metric, allow_same_source, extractive, out, .. } => {
            let listed = [("--captions", captions), ("--test-captions", test_captions)];
            record_inputs(inputs, &listed, out.as_deref().unwrap_or(Path::new("")))?;
            let train_corpus = read_corpus("--captions", captions)?;
            let test = read_corpus("--test-captions", test_captions)?;
            let embedder = embedder(cfg)?;
            let summarizer = summarizer(cfg, *extractive)?;
            let report = cross_eval(&train_corpus, &test, &cfg.pipeline, embedder.as_ref(), summarizer.as_ref(), *allow_same_source)
                .context("cross-eval")?;
            report_metrics(&report, *metric, out.as_deref(), outputs)
        }
    }
}

/// Hashes the inputs and refuses to overwrite any of them.
fn record_inputs(inputs: &mut Inputs, listed: &[(&str, &PathBuf)], out: &Path) -> Result<(), Failure> {
    let pairs: Vec<(&str, &Path)> = listed.iter().map(|(f, p)| (*f, p.as_path())).collect();
    inputs.extend(digest_inputs(&pairs)?);
    if !out.as_os_str().is_empty() {
        if let Some((flag, _)) = listed.iter().find(|(_, p)| same_file(p, out)) {
            return Err(Failure::usage(format!("--out {} would overwrite the {flag} input", out.display())));
        }
    }
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn read_corpus(flag: &str, path: &Path) -> Result<CaptionCorpus, Failure> {
    load_captions(path).map_err(|e| Failure::usage(format!("{flag} {}: {e}", path.display())))
}

fn embedder(cfg: &RunConfig) -> Result<Box<dyn Embedder>, Failure> {
    build_embedder(&cfg.pipeline.embedder).context("embedder")
}

fn generator(cfg: &RunConfig) -> Result<Option<RemoteGenerator>, Failure> {
    let Some(url) = &cfg.generation.endpoint else {
        return Ok(None);
    };
    let cache = DiskCache::from_env().context("TBVAD_CACHE_DIR")?;
    Ok(Some(RemoteGenerator::new(url, HttpClient::from_env(), cache)))
}

fn summarizer(cfg: &RunConfig, extractive: bool) -> Result<Box<dyn Summarizer>, Failure> {
    if extractive {
        return Ok(Box::new(ExtractiveSummarizer::default()));
    }
    Ok(match generator(cfg)? {
        Some(g) => Box::new(LlmSummarizer::new(Arc::new(g))),
        None => Box::new(ExtractiveSummarizer::default()),
    })
}

fn read_knowledge(path: &Path, embedder: &dyn Embedder) -> Result<KnowledgeBase, Failure> {
    let context = format!("--knowledge {}", path.display());
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{context}: {e}")))?;
    KnowledgeBase::from_json(&text, embedder).map_err(|e| Failure::usage(format!("{context}: {e}")))
}

fn read_model(path: &Path, kb: &KnowledgeBase) -> Result<ModelParams, Failure> {
    let context = format!("--model {}", path.display());
    let model = load_model(path).map_err(|e| Failure::usage(format!("{context}: {e}")))?;
    model
        .check_knowledge(kb)
        .map_err(|e| Failure::usage(format!("{context} does not match --knowledge: {e}")))?;
    Ok(model)
}

fn write_output(path: &Path, text: &str, outputs: &mut Vec<PathBuf>) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::runtime(format!("--out {}: {e}", path.display())))?;
    outputs.push(path.to_path_buf());
    Ok(())
}

/// Prints `text` on stdout and, when requested, writes it to `out`.
fn emit(text: &str, out: Option<&Path>, outputs: &mut Vec<PathBuf>) -> Result<(), Failure> {
    println!("{text}");
    match out {
        Some(path) => write_output(path, &format!("{text}\n"), outputs),
        None => Ok(()),
    }
}

fn gen_synth(cfg: &RunConfig, out: &Path, domain: Option<&str>, outputs: &mut Vec<PathBuf>) -> Result<(), Failure> {
    let mut synth: SynthConfig = cfg.synth.clone();
    if let Some(d) = domain {
        synth.domain = d.parse().map_err(|e| Failure::usage(format!("--domain {d:?}: {e}")))?;
    }
    let split = generate_synthetic(&synth).context("synthetic corpus")?;
    let train_path = out.join("train.jsonl");
    let test_path = out.join("test.jsonl");
    let manifest_path = out.join("manifest.json");
    write_output(&train_path, &split.train.to_jsonl().context("train split")?, outputs)?;
    write_output(&test_path, &split.test.to_jsonl().context("test split")?, outputs)?;
    let manifest = serde_json::to_string_pretty(&split.manifest).expect("manifest serializes") + "\n";
    write_output(&manifest_path, &manifest, outputs)?;
    eprintln!(
        "wrote {} train and {} test videos to {}",
        split.train.len(),
        split.test.len(),
        out.display()
    );
    println!(
        "{}",
        json!({
            "train": train_path,
            "test": test_path,
            "manifest": manifest_path,
            "source_tag": split.manifest.source_tag,
            "planted_terms": split.manifest.planted_terms,
        })
    );
    Ok(())
}

fn build_knowledge(cfg: &RunConfig, captions: &Path, out: &Path, extractive: bool, outputs: &mut Vec<PathBuf>) -> Result<(), Failure> {
    let corpus = read_corpus("--captions", captions)?;
    let embedder = embedder(cfg)?;
    let summarizer = summarizer(cfg, extractive)?;
    let kb = knowledge_from_corpus(
        &corpus,
        &default_prompts().context("prompts")?,
        embedder.as_ref(),
        &cfg.pipeline.aspects,
        summarizer.as_ref(),
    )
    .context(&format!("--captions {}", captions.display()))?;
    let text = kb.to_json().context("knowledge")?;
    write_output(out, &text, outputs)?;
    println!(
        "{}",
        json!({
            "knowledge": out,
            "aspects": kb.aspects(),
            "sha256": crate::provenance::sha256_hex(text.as_bytes()),
        })
    );
    Ok(())
}

fn train(cfg: &RunConfig, captions: &Path, knowledge: &Path, out: &Path, outputs: &mut Vec<PathBuf>) -> Result<(), Failure> {
    let corpus = read_corpus("--captions", captions)?;
    let embedder = embedder(cfg)?;
    let mut kb = read_knowledge(knowledge, embedder.as_ref())?;
    if kb.aspects() != cfg.pipeline.aspects.as_slice() {
        kb = kb
            .restrict(&cfg.pipeline.aspects, embedder.as_ref())
            .map_err(|e| Failure::usage(format!("--aspects: {e}")))?;
    }
    let p = &cfg.pipeline;
    let (model, history) =
        train_with_history(&corpus, &kb, p.encoder, p.frames, &p.train, embedder.as_ref()).context("training")?;
    save_model(&model, out).context(&format!("--out {}", out.display()))?;
    outputs.push(out.to_path_buf());
    let digest = model.digest().context("model")?;
    eprintln!(
        "trained {} epochs: loss {:.5} -> {:.5}",
        history.len(),
        history.first().copied().unwrap_or(f64::NAN),
        history.last().copied().unwrap_or(f64::NAN)
    );
    println!(
        "{}",
        json!({
            "model": out,
            "digest": digest,
            "aspects": kb.aspects(),
            "loss_history": history,
        })
    );
    Ok(())
}

fn report_metrics(report: &MetricsReport, metric: Option<Metric>, out: Option<&Path>, outputs: &mut Vec<PathBuf>) -> Result<(), Failure> {
    eprint!("{}", report.to_text());
    let full = report.to_json().context("report")?;
    if let Some(path) = out {
        write_output(path, &format!("{full}\n"), outputs)?;
    }
    let text = match metric {
        None => full,
        Some(m) => {
            let (name, value) = match m {
                Metric::Auc => ("auc", report.auc),
                Metric::Ap => ("ap", report.ap),
                Metric::Acc => ("acc", report.acc),
            };
            json!({ "dataset_tag": report.dataset_tag, "metric": name, "value": value }).to_string()
        }
    };
    println!("{text}");
    Ok(())
}

fn eval(
    cfg: &RunConfig,
    captions: &Path,
    knowledge: &Path,
    model: &Path,
    metric: Option<Metric>,
    out: Option<&Path>,
    outputs: &mut Vec<PathBuf>,
) -> Result<(), Failure> {
    let corpus = read_corpus("--captions", captions)?;
    let embedder = embedder(cfg)?;
    let kb = read_knowledge(knowledge, embedder.as_ref())?;
    let model = read_model(model, &kb)?;
    let (report, _) = evaluate(&model, &kb, &corpus, embedder.as_ref(), cfg.pipeline.threshold, &cfg.digest())
        .context("evaluation")?;
    report_metrics(&report, metric, out, outputs)
}

fn explain(
    cfg: &RunConfig,
    captions: &Path,
    knowledge: &Path,
    model: &Path,
    video_id: Option<&str>,
    out: Option<&Path>,
    outputs: &mut Vec<PathBuf>,
) -> Result<(), Failure> {
    let corpus = read_corpus("--captions", captions)?;
    let embedder = embedder(cfg)?;
    let kb = read_knowledge(knowledge, embedder.as_ref())?;
    let model = read_model(model, &kb)?;
    let videos: Vec<_> = match video_id {
        Some(id) => vec![corpus.video(id).ok_or_else(|| {
            Failure::usage(format!("--video-id {id:?} is not in --captions {}", captions.display()))
        })?],
        None => corpus.videos.iter().collect(),
    };
    let generator = generator(cfg)?;
    let backend = match &generator {
        Some(g) => ExplanationBackend::Remote(g),
        None => ExplanationBackend::Template,
    };
    let opts = ExplainOptions { top_k: cfg.explain.top_k, counterfactual: cfg.explain.counterfactual };
    let mut lines = Vec::with_capacity(videos.len());
    for video in videos {
        let record = explain_video(video, &kb, &model, embedder.as_ref(), opts, backend)
            .context(&format!("video {}", video.video_id))?;
        if record.fallback {
            log::warn!("{}: generation service failed, template rationale used", record.video_id);
        }
        eprint!("{}", record.rationale);
        lines.push(record.to_json().context("record")?);
    }
    emit(&lines.join("\n"), out, outputs)
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    cfg: &RunConfig,
    captions: &Path,
    test_captions: &Path,
    combos: &str,
    out: Option<&Path>,
    metric: Option<Metric>,
    extractive: bool,
    outputs: &mut Vec<PathBuf>,
) -> Result<(), Failure> {
    if metric == Some(Metric::Acc) {
        return Err(Failure::usage("--metric acc is not reported by ablations; use auc or ap"));
    }
    let combo_text = match Path::new(combos) {
        p if p.is_file() => {
            std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("--combos {combos}: {e}")))?
        }
        _ => combos.to_string(),
    };
    let combos = parse_combos(&combo_text).map_err(|e| Failure::usage(format!("--combos {combos:?}: {e}")))?;
    let train_corpus = read_corpus("--captions", captions)?;
    let test = read_corpus("--test-captions", test_captions)?;
    let embedder = embedder(cfg)?;
    let summarizer = summarizer(cfg, extractive)?;
    let rows = ablate_slots(&train_corpus, &test, &combos, &cfg.pipeline, embedder.as_ref(), summarizer.as_ref())
        .context("ablation")?;
    eprint!("{}", ablation_table(&rows));
    if let Some(m) = metric {
        let value = |r: &tbvad_core::eval::AblationRow| if m == Metric::Ap { r.ap } else { r.auc };
        // the first of equally good rows wins
        let best = rows
            .iter()
            .filter(|r| value(r).is_some())
            .reduce(|best, r| if value(r) > value(best) { r } else { best });
        if let Some(best) = best {
            eprintln!(
                "best by {}: {}",
                if m == Metric::Ap { "ap" } else { "auc" },
                tbvad_core::knowledge::Aspect::join(&best.active_aspects, "+")
            );
        }
    }
    if let Some(path) = out {
        write_output(path, &ablation_csv(&rows), outputs)?;
    }
    println!("{}", serde_json::to_string(&rows).expect("rows serialize"));
    Ok(())
}
