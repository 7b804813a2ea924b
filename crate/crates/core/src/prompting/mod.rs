//! Prompts for an external vision-language model, exemplar selection, and
//! reply parsing.
//!
//! The rendered template is frozen: golden tests compare it byte for byte.
//! Layout is the preamble, then (in few-shot and rag modes) one line
//! `Caption: <caption> → Label: <name>` per exemplar, then the query block
//! `Caption: <query> → Label:`.

mod service;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingSet, Task};
use crate::fusion::FusedVector;
use crate::math::Rng;
use crate::retrieval::{FlatIndex, RetrievalError};

pub use service::{
    classify_all, classify_via_service, encode_image, FnService, HttpService, InferenceService, RetryPolicy,
    ScriptedService, ServiceError, ServiceRequest, ServiceResponse, ENDPOINT_ENV,
};

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("exemplars are not balanced across classes: {0}")]
    UnbalancedExemplars(String),
    #[error("empty caption{}", .0.as_deref().map(|id| format!(" for {id:?}")).unwrap_or_default())]
    EmptyCaption(Option<String>),
    #[error("record {0:?} has no caption")]
    MissingCaption(String),
    #[error("class {class} has {available} candidates, {needed} needed")]
    NotEnoughExemplars { class: usize, available: usize, needed: usize },
    #[error("label {label} out of range for {task}")]
    LabelOutOfRange { label: usize, task: &'static str },
    #[error("no label found in reply {0:?}")]
    Unparseable(String),
    #[error("reading image {path}: {source}")]
    Image { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    ZeroShot,
    /// Randomly sampled exemplars.
    FewShot,
    /// Retrieved exemplars.
    Rag,
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "zero-shot" | "zeroshot" => Ok(Self::ZeroShot),
            "few-shot" | "fewshot" => Ok(Self::FewShot),
            "rag" => Ok(Self::Rag),
            other => Err(format!("unknown prompt mode {other:?} (expected zero-shot, few-shot or rag)")),
        }
    }
}

/// A labeled caption shown to the model as context. Text only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    pub caption: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub task: Task,
    pub mode: PromptMode,
    pub exemplars: Vec<Exemplar>,
    pub query_caption: String,
    /// Image sent alongside the prompt, if any.
    pub image_ref: Option<PathBuf>,
    /// Rendered text.
    pub text: String,
}

const PREAMBLE: &str = "You will classify a meme using both its image and its caption.\n\
\n\
How to decide:\n\
1. Look at the image and read the caption, then work out what the meme means when the two are taken together.\n\
2. If labeled example captions are listed below, use them as calibration for how labels are assigned.\n\
3. Pick the one label from the list below that matches the meme.\n\
4. If more than one label seems possible, commit to the single most likely one.\n";

fn task_section(task: Task) -> &'static str {
    match task {
        Task::Task1 => {
            "Task: decide whether the meme is hateful.\n\
Labels:\n\
0 = Non-Hate: no hateful intent toward any person or group.\n\
1 = Hate: attacks, demeans or mocks a person or group, openly or by implication.\n"
        }
        Task::Task2 => {
            "Task: the meme is hateful; identify who it targets.\n\
Labels:\n\
0 = TI: a specific individual.\n\
1 = TC: a community defined by shared beliefs, religion or culture.\n\
2 = TO: an organization such as a company or political party.\n\
3 = TS: a society or population defined by geography or nationality.\n"
        }
    }
}

/// Flattens line breaks so each caption stays on one line.
fn one_line(caption: &str) -> String {
    caption.split(['\n', '\r']).map(str::trim).filter(|s| !s.is_empty()).collect::<Vec<_>>().join(" ")
}

fn label_name(task: Task, label: usize) -> Result<&'static str, PromptError> {
    task.class_name(label).ok_or(PromptError::LabelOutOfRange { label, task: task.as_str() })
}

/// Renders the frozen template. Pure: equal inputs give identical text.
pub fn render(task: Task, exemplars: &[Exemplar], query_caption: &str) -> Result<String, PromptError> {
    let mut out = String::new();
    out.push_str(PREAMBLE);
    out.push('\n');
    out.push_str(task_section(task));
    if !exemplars.is_empty() {
        out.push_str("\nExamples:\n");
        for e in exemplars {
            let _ = writeln!(out, "Caption: {} → Label: {}", one_line(&e.caption), label_name(task, e.label)?);
        }
    }
    out.push_str("\nNow classify this meme. Reply with the label name only.\n");
    let _ = write!(out, "Caption: {} → Label:", one_line(query_caption));
    Ok(out)
}

fn check_balance(task: Task, exemplars: &[Exemplar]) -> Result<(), PromptError> {
    let mut counts = vec![0usize; task.num_classes()];
    for e in exemplars {
        label_name(task, e.label)?;
        counts[e.label] += 1;
    }
    if counts[0] == 0 || counts.iter().any(|&c| c != counts[0]) {
        return Err(PromptError::UnbalancedExemplars(format!("per-class counts {counts:?}")));
    }
    Ok(())
}

/// Assembles and renders a prompt. Few-shot and rag modes need the same
/// non-zero number of exemplars for every class; zero-shot takes none.
pub fn build_prompt(
    task: Task,
    query_caption: &str,
    exemplars: Vec<Exemplar>,
    mode: PromptMode,
    image_ref: Option<PathBuf>,
) -> Result<Prompt, PromptError> {
    if one_line(query_caption).is_empty() {
        return Err(PromptError::EmptyCaption(None));
    }
    if let Some(e) = exemplars.iter().find(|e| one_line(&e.caption).is_empty()) {
        return Err(PromptError::EmptyCaption(Some(e.id.clone())));
    }
    match mode {
        PromptMode::ZeroShot if !exemplars.is_empty() => {
            return Err(PromptError::UnbalancedExemplars(format!(
                "zero-shot prompt given {} exemplars",
                exemplars.len()
            )))
        }
        PromptMode::ZeroShot => {}
        PromptMode::FewShot | PromptMode::Rag => check_balance(task, &exemplars)?,
    }
    let text = render(task, &exemplars, query_caption)?;
    Ok(Prompt { task, mode, exemplars, query_caption: query_caption.to_string(), image_ref, text })
}

/// Where exemplars come from.
pub enum Selection<'a> {
    /// Seeded uniform sample of `k` per class without replacement.
    Random(&'a mut Rng),
    /// The `k` nearest training entries of each class to `query`.
    Rag { index: &'a FlatIndex, query: &'a FusedVector },
}

fn captioned(train: &EmbeddingSet, i: usize) -> Result<(String, String), PromptError> {
    let rec = &train.records[i];
    match rec.caption.as_deref() {
        Some(c) if !c.trim().is_empty() => Ok((rec.id.clone(), c.to_string())),
        _ => Err(PromptError::MissingCaption(rec.id.clone())),
    }
}

/// `k` exemplars per class, class blocks in class order.
pub fn select_exemplars(
    train: &EmbeddingSet,
    task: Task,
    k: usize,
    selection: Selection<'_>,
) -> Result<Vec<Exemplar>, PromptError> {
    let c = task.num_classes();
    let mut out = Vec::with_capacity(k * c);
    match selection {
        Selection::Random(rng) => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
            for (i, rec) in train.records.iter().enumerate() {
                if let Some(y) = rec.label {
                    if y >= c {
                        return Err(PromptError::LabelOutOfRange { label: y, task: task.as_str() });
                    }
                    by_class[y].push(i);
                }
            }
            for (class, mut members) in by_class.into_iter().enumerate() {
                if members.len() < k {
                    return Err(PromptError::NotEnoughExemplars { class, available: members.len(), needed: k });
                }
                rng.shuffle(&mut members);
                for &i in &members[..k] {
                    let (id, caption) = captioned(train, i)?;
                    out.push(Exemplar { id, caption, label: class });
                }
            }
        }
        Selection::Rag { index, query } => {
            let neighbors = index.top_k_per_class(query.as_slice(), k, c)?.require_all()?;
            let positions: HashMap<&str, usize> =
                train.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
            for n in neighbors.iter() {
                let i = *positions.get(n.id.as_str()).ok_or_else(|| PromptError::MissingCaption(n.id.clone()))?;
                let (id, caption) = captioned(train, i)?;
                out.push(Exemplar { id, caption, label: n.label });
            }
            for class in 0..c {
                let have = out.iter().filter(|e| e.label == class).count();
                if have < k {
                    return Err(PromptError::NotEnoughExemplars { class, available: have, needed: k });
                }
            }
        }
    }
    Ok(out)
}

/// Label from a free-text reply: the first word that names a class or
/// equals a class index. Words are runs of ASCII letters, digits and `-`,
/// compared case-insensitively, except `TO`, which must be upper case so the
/// English word "to" is not read as a label.
pub fn parse_response(raw: &str, task: Task) -> Result<usize, PromptError> {
    let names = task.class_names();
    for word in raw.split(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '-')).filter(|w| !w.is_empty()) {
        if let Ok(n) = word.parse::<usize>() {
            if n < names.len() && word.len() == 1 {
                return Ok(n);
            }
            continue;
        }
        for (class, name) in names.iter().enumerate() {
            let hit = if *name == "TO" { word == "TO" } else { word.eq_ignore_ascii_case(name) };
            if hit {
                return Ok(class);
            }
        }
    }
    Err(PromptError::Unparseable(raw.to_string()))
}
