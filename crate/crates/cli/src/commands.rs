use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use anyhow::{ensure, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use xdora_core::binio::write_atomic;
use xdora_core::dataset::{
    load_embeddings, remap_manifest, save_embeddings, stratified_split_records, EmbeddingSet, ManifestEntry,
    RemapRules, SplitSpec,
};
use xdora_core::ensemble::{
    branch_outputs, build_fused_index, fuse_all, grid_search_on, FusionWeight, RetrievalMode, RetrievalSettings,
};
use xdora_core::eval::{bootstrap_ci, evaluate, PredictionSet};
use xdora_core::fusion::{load_model, save_model, train, FusionConfig, FusionModel, TrainSpec};
use xdora_core::math::Rng;
use xdora_core::prompting::{
    build_prompt, classify_all, select_exemplars, HttpService, Prompt, PromptMode, RetryPolicy, Selection,
};
use xdora_core::retrieval::{aggregate_labels, load_index, save_index, FlatIndex, Weighting};

use crate::{
    log, usage, Command, EmbedArgs, EvaluateArgs, FuseArgs, GridArgs, KnnArgs, LvlmArgs, PredictArgs, PromptArgs,
    RemapArgs, RetrievalArgs, SplitArgs, TrainArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Remap(a) => remap(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a),
        Command::EmbedFused(a) => embed(a, false),
        Command::IndexBuild(a) => embed(a, true),
        Command::Knn(a) => knn(a),
        Command::Predict(a) => predict(a),
        Command::Fuse(a) => fuse(a),
        Command::GridAlpha(a) => grid(a),
        Command::PromptBuild(a) => prompt_build(a),
        Command::LvlmClassify(a) => lvlm(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    }
}

fn check_inputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        ensure!(p.is_file(), "input {} does not exist or is not a file", p.display());
    }
    Ok(())
}

fn check_outputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        ensure!(parent.is_dir(), "output directory {} does not exist", parent.display());
        ensure!(!p.is_dir(), "output {} is a directory", p.display());
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn json_lines<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(&row)?);
        out.push('\n');
    }
    Ok(out)
}

fn parse_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn load_set(path: &Path) -> Result<EmbeddingSet> {
    load_embeddings(path).with_context(|| format!("loading {}", path.display()))
}

fn load_fusion(path: &Path) -> Result<FusionModel> {
    load_model(path).with_context(|| format!("loading {}", path.display()))
}

fn load_flat(path: &Path) -> Result<FlatIndex> {
    load_index(path).with_context(|| format!("loading {}", path.display()))
}

fn settings(r: &RetrievalArgs) -> Result<RetrievalSettings> {
    if r.k == 0 {
        return Err(usage("--k must be positive"));
    }
    let mode = if r.per_class { RetrievalMode::PerClass } else { RetrievalMode::Global };
    Ok(RetrievalSettings { k: r.k, mode, weighting: Weighting::Similarity })
}

fn class_counts(labels: impl Iterator<Item = usize>) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for y in labels {
        *counts.entry(y).or_insert(0) += 1;
    }
    counts
}

fn remap(a: RemapArgs) -> Result<()> {
    check_inputs(&[&a.manifest])?;
    check_outputs(&[&a.out])?;
    if !(0.0..=1.0).contains(&a.keep_non_hate) {
        return Err(usage("--keep-non-hate must lie in [0, 1]"));
    }
    let entries: Vec<ManifestEntry> = parse_lines(&a.manifest)?;
    let rows = remap_manifest(&entries, &RemapRules::mimosa(), a.keep_non_hate, a.seed)?;
    let discarded = rows.iter().filter(|r| r.discarded).count();
    write_text(&a.out, &json_lines(&rows)?)?;
    log("remap", json!({ "rows": rows.len(), "kept": rows.len() - discarded, "discarded": discarded }));
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    check_inputs(&[&a.data])?;
    ensure!(a.out_dir.is_dir(), "output directory {} does not exist", a.out_dir.display());
    let fractions: [f64; 3] =
        a.fractions.as_slice().try_into().map_err(|_| usage("--fractions takes three comma-separated values"))?;
    let set = load_set(&a.data)?;
    let (train, valid, test) = stratified_split_records(&set, &SplitSpec { fractions, seed: a.seed })?;
    for (name, part) in [("train", &train), ("valid", &valid), ("test", &test)] {
        let path = a.out_dir.join(format!("{name}.xdem"));
        save_embeddings(&path, part).with_context(|| format!("writing {}", path.display()))?;
        let counts = class_counts(part.records.iter().filter_map(|r| r.label));
        log("split", json!({ "part": name, "records": part.records.len(), "per_class": counts }));
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    check_inputs(&[&a.train, &a.valid])?;
    let mut outputs = vec![a.out.as_path()];
    outputs.extend(a.log.as_deref());
    check_outputs(&outputs)?;
    let spec = TrainSpec {
        batch_size: a.batch_size,
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        max_epochs: a.epochs,
        patience: a.patience,
        optimizer: a.optimizer,
        seed: a.seed,
        weighted_loss: !a.unweighted,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let train_set = load_set(&a.train)?;
    let valid_set = load_set(&a.valid)?;
    let dims = train_set.dims;
    let config = FusionConfig {
        d_v: dims.d_v,
        d_t: dims.d_t,
        seq_len: dims.seq_len,
        heads: a.heads,
        num_classes: a.task.num_classes(),
        dropout: a.dropout,
        hidden_dim: a.hidden_dim,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let (params, training) = train(&train_set, &valid_set, &config, &spec)?;
    for e in &training.epochs {
        log("epoch", serde_json::to_value(e)?);
    }
    save_model(&a.out, &FusionModel { config, params }).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.log {
        write_text(path, &training.to_json_lines())?;
    }
    log("train", json!({ "best_epoch": training.best_epoch, "stopped_early": training.stopped_early }));
    Ok(())
}

fn embed(a: EmbedArgs, require_all_classes: bool) -> Result<()> {
    check_inputs(&[&a.model, &a.data])?;
    check_outputs(&[&a.out])?;
    let model = load_fusion(&a.model)?;
    let set = load_set(&a.data)?;
    let index = build_fused_index(&model, &set)?;
    let counts = class_counts(index.entries().iter().map(|e| e.label));
    if require_all_classes {
        let missing: Vec<usize> = (0..model.config.num_classes).filter(|c| !counts.contains_key(c)).collect();
        ensure!(missing.is_empty(), "training data has no records of classes {missing:?}");
    }
    save_index(&a.out, &index).with_context(|| format!("writing {}", a.out.display()))?;
    log("index", json!({ "entries": index.len(), "dim": index.dim(), "per_class": counts }));
    Ok(())
}

#[derive(Serialize)]
struct NeighborRow<'a> {
    id: &'a str,
    label: usize,
    similarity: f64,
}

#[derive(Serialize)]
struct KnnRow<'a> {
    id: &'a str,
    neighbors: Vec<NeighborRow<'a>>,
    y_retrieval: Vec<f64>,
    label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold: Option<usize>,
}

fn knn(a: KnnArgs) -> Result<()> {
    check_inputs(&[&a.index, &a.model, &a.data])?;
    check_outputs(&[&a.out])?;
    let mut settings = settings(&a.retrieval)?;
    if a.uniform {
        settings.weighting = Weighting::Uniform;
    }
    let model = load_fusion(&a.model)?;
    let index = load_flat(&a.index)?;
    let set = load_set(&a.data)?;
    model.config.check_dims(&set.dims)?;
    ensure!(!index.is_empty(), "index {} is empty", a.index.display());
    let c = model.config.num_classes;
    let results = set
        .records
        .par_iter()
        .map(|rec| {
            let z = model.embed(rec)?;
            let neighbors = match settings.mode {
                RetrievalMode::Global => index.top_k(z.as_slice(), settings.k)?,
                RetrievalMode::PerClass => index.top_k_per_class(z.as_slice(), settings.k, c)?.neighbors,
            };
            let probs = aggregate_labels(&neighbors, c, settings.weighting)?;
            Ok((neighbors, probs))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = set.records.iter().zip(&results).map(|(rec, (neighbors, probs))| KnnRow {
        id: &rec.id,
        neighbors: neighbors
            .iter()
            .map(|n| NeighborRow { id: &n.id, label: n.label, similarity: n.similarity })
            .collect(),
        y_retrieval: probs.as_slice().to_vec(),
        label: probs.argmax(),
        gold: rec.label,
    });
    write_text(&a.out, &json_lines(rows)?)?;
    log("knn", json!({ "queries": set.records.len() }));
    Ok(())
}

#[derive(Serialize)]
struct PredictRow<'a> {
    id: &'a str,
    probs: Vec<f64>,
    label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold: Option<usize>,
}

fn predict(a: PredictArgs) -> Result<()> {
    check_inputs(&[&a.model, &a.data])?;
    check_outputs(&[&a.out])?;
    let model = load_fusion(&a.model)?;
    let set = load_set(&a.data)?;
    model.config.check_dims(&set.dims)?;
    let outputs = model.infer_all(&set.records)?;
    let rows = set.records.iter().zip(outputs).map(|(rec, (_, probs))| PredictRow {
        id: &rec.id,
        label: probs.argmax(),
        probs: probs.into_vec(),
        gold: rec.label,
    });
    write_text(&a.out, &json_lines(rows)?)?;
    log("predict", json!({ "records": set.records.len() }));
    Ok(())
}

fn fuse(a: FuseArgs) -> Result<()> {
    check_inputs(&[&a.model, &a.index, &a.data])?;
    check_outputs(&[&a.out])?;
    let settings = settings(&a.retrieval)?;
    let alpha = FusionWeight::new(a.alpha).map_err(|e| usage(e.to_string()))?;
    let model = load_fusion(&a.model)?;
    let index = load_flat(&a.index)?;
    let set = load_set(&a.data)?;
    let branches = branch_outputs(&model, &index, &set, &settings)?;
    let rows = fuse_all(&branches, alpha)?;
    write_text(&a.out, &json_lines(&rows)?)?;
    log("fuse", json!({ "records": rows.len(), "alpha": alpha.value() }));
    Ok(())
}

fn grid(a: GridArgs) -> Result<()> {
    check_inputs(&[&a.model, &a.index, &a.valid])?;
    check_outputs(&[&a.out])?;
    let settings = settings(&a.retrieval)?;
    for &alpha in &a.grid {
        FusionWeight::new(alpha).map_err(|e| usage(e.to_string()))?;
    }
    let model = load_fusion(&a.model)?;
    let index = load_flat(&a.index)?;
    let valid = load_set(&a.valid)?;
    let result = grid_search_on(&branch_outputs(&model, &index, &valid, &settings)?, &a.grid)?;
    for row in &result.table {
        log("alpha", serde_json::to_value(row)?);
    }
    write_text(&a.out, &(serde_json::to_string_pretty(&result)? + "\n"))?;
    log("grid", json!({ "best_alpha": result.best_alpha, "best_macro_f1": result.best_macro_f1 }));
    Ok(())
}

/// One line of prompt-build output.
#[derive(Serialize, Deserialize)]
struct PromptRow {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    gold: Option<usize>,
    prompt: Prompt,
}

fn prompt_build(a: PromptArgs) -> Result<()> {
    let mut inputs = vec![a.queries.as_path()];
    match a.mode {
        PromptMode::ZeroShot => {}
        PromptMode::FewShot => {
            let train = a.train.as_deref().ok_or_else(|| usage("few-shot mode needs --train"))?;
            inputs.push(train);
        }
        PromptMode::Rag => {
            let (Some(train), Some(model), Some(index)) = (&a.train, &a.model, &a.index) else {
                return Err(usage("rag mode needs --train, --model and --index"));
            };
            inputs.extend([train.as_path(), model.as_path(), index.as_path()]);
        }
    }
    check_inputs(&inputs)?;
    check_outputs(&[&a.out])?;
    if let Some(dir) = &a.image_dir {
        ensure!(dir.is_dir(), "image directory {} does not exist", dir.display());
    }
    if a.mode != PromptMode::ZeroShot && a.k == 0 {
        return Err(usage("--k must be positive"));
    }

    let queries = load_set(&a.queries)?;
    let train = a.train.as_deref().filter(|_| a.mode != PromptMode::ZeroShot).map(load_set).transpose()?;
    let model = a.model.as_deref().filter(|_| a.mode == PromptMode::Rag).map(load_fusion).transpose()?;
    let index = a.index.as_deref().filter(|_| a.mode == PromptMode::Rag).map(load_flat).transpose()?;
    if let Some(m) = &model {
        ensure!(m.config.num_classes == a.task.num_classes(), "model has {} classes", m.config.num_classes);
        m.config.check_dims(&queries.dims)?;
    }

    let mut rng = Rng::new(a.seed);
    let mut rows = Vec::with_capacity(queries.records.len());
    for rec in &queries.records {
        let caption = rec.caption.as_deref().with_context(|| format!("query {:?} has no caption", rec.id))?;
        let exemplars = match (a.mode, &train, &model, &index) {
            (PromptMode::ZeroShot, ..) => Vec::new(),
            (PromptMode::FewShot, Some(t), ..) => select_exemplars(t, a.task, a.k, Selection::Random(&mut rng))?,
            (PromptMode::Rag, Some(t), Some(m), Some(i)) => {
                let z = m.embed(rec)?;
                select_exemplars(t, a.task, a.k, Selection::Rag { index: i, query: &z })?
            }
            _ => unreachable!("inputs checked above"),
        };
        let image = a.image_dir.as_ref().map(|d| d.join(format!("{}.{}", rec.id, a.image_ext)));
        if let Some(p) = &image {
            ensure!(p.is_file(), "image {} does not exist", p.display());
        }
        let prompt = build_prompt(a.task, caption, exemplars, a.mode, image)?;
        rows.push(PromptRow { id: rec.id.clone(), gold: rec.label, prompt });
    }
    write_text(&a.out, &json_lines(&rows)?)?;
    log("prompts", json!({ "prompts": rows.len(), "mode": a.mode }));
    Ok(())
}

#[derive(Serialize)]
struct LvlmRow<'a> {
    id: &'a str,
    /// `null` when the reply names no label.
    label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold: Option<usize>,
    raw_text: String,
}

fn lvlm(a: LvlmArgs) -> Result<()> {
    check_inputs(&[&a.prompts])?;
    check_outputs(&[&a.out])?;
    if a.concurrency == 0 {
        return Err(usage("--concurrency must be positive"));
    }
    if !a.endpoint.starts_with("http://") && !a.endpoint.starts_with("https://") {
        return Err(usage(format!("endpoint {:?} is not an http(s) URL", a.endpoint)));
    }
    let rows: Vec<PromptRow> = parse_lines(&a.prompts)?;
    let prompts: Vec<Prompt> = rows.iter().map(|r| r.prompt.clone()).collect();
    let service = HttpService::new(a.endpoint.clone(), Duration::from_secs(a.timeout_secs));
    let policy = RetryPolicy { retries: a.retries, base_delay: Duration::from_millis(a.backoff_ms) };
    let replies = classify_all(&prompts, &service, &policy, a.concurrency);
    let mut out = Vec::with_capacity(rows.len());
    for (row, reply) in rows.iter().zip(replies) {
        let reply = reply.with_context(|| format!("prompt {:?}", row.id))?;
        out.push(LvlmRow { id: &row.id, label: reply.parsed_label, gold: row.gold, raw_text: reply.raw_text });
    }
    let unparsed = out.iter().filter(|r| r.label.is_none()).count();
    write_text(&a.out, &json_lines(&out)?)?;
    log("lvlm", json!({ "prompts": out.len(), "unparsed": unparsed }));
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    check_inputs(&[&a.predictions])?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    outputs.extend(a.table.as_deref());
    check_outputs(&outputs)?;
    if !(a.confidence > 0.0 && a.confidence < 1.0) {
        return Err(usage("--confidence must lie in (0, 1)"));
    }
    let preds = PredictionSet::from_json_lines(&read_text(&a.predictions)?, a.task.num_classes())
        .with_context(|| format!("reading {}", a.predictions.display()))?;
    let mut report = evaluate(&preds)?;
    if a.bootstrap > 0 {
        report.ci = Some(bootstrap_ci(&preds, a.bootstrap, a.confidence, a.seed)?);
    }
    let table = report.to_table(a.task.class_names());
    write_text(&a.out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    if let Some(path) = &a.table {
        write_text(path, &table)?;
    }
    print!("{table}");
    log("evaluate", json!({ "records": preds.len(), "macro_f1": report.macro_f1 }));
    Ok(())
}
