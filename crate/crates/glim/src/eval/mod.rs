//! Evaluation harness: prompt tasks, label scoring, zero-shot classification
//! with per-prompt averaging, perplexity, and last-word accuracy.
//!
//! A task is a set of prompt templates with placeholders, a candidate label
//! set, and instances binding the placeholders plus a gold label. Reported
//! task accuracy is always the arithmetic mean of the per-prompt accuracies,
//! so no single prompt phrasing dominates.

use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;

use crate::fusion::{FusionError, GroundingContext, Model};
use crate::tokenizer::{Vocab, BOS, EOS};
use crate::world::{World, COLORS, SHAPES};

/// Prompt tables bundled with the crate.
pub mod bundled {
    pub const COLOR_MEMORY: &str = include_str!("../../tasks/color_memory.task");
    pub const COLOR_EXTENDED: &str = include_str!("../../tasks/color_extended.task");
    pub const SHAPE: &str = include_str!("../../tasks/shape.task");
    pub const SIZE_OBJECT: &str = include_str!("../../tasks/size_object.task");
    pub const SIZE_RELATION: &str = include_str!("../../tasks/size_relation.task");
    pub const NLU_SST2: &str = include_str!("../../tasks/nlu_sst2.task");
    pub const NLU_MPQA: &str = include_str!("../../tasks/nlu_mpqa.task");
    pub const NLU_AGNEWS: &str = include_str!("../../tasks/nlu_agnews.task");
    pub const NLU_DBPEDIA: &str = include_str!("../../tasks/nlu_dbpedia.task");

    pub const ALL: [(&str, &str); 9] = [
        ("color_memory", COLOR_MEMORY),
        ("color_extended", COLOR_EXTENDED),
        ("shape", SHAPE),
        ("size_object", SIZE_OBJECT),
        ("size_relation", SIZE_RELATION),
        ("nlu_sst2", NLU_SST2),
        ("nlu_mpqa", NLU_MPQA),
        ("nlu_agnews", NLU_AGNEWS),
        ("nlu_dbpedia", NLU_DBPEDIA),
    ];
}

const LABEL_MARKER: &str = "[Label]";
const KNOWN_PLACEHOLDERS: [&str; 5] = ["ITEM", "DESCRIPTOR", "ITEMA", "ITEMB", "Sentence"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("task file, line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("template references unbound placeholder [{0}]")]
    UnboundPlaceholder(String),
    #[error("task has no instances")]
    NoInstances,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("sentence needs at least two words: {0:?}")]
    ShortSentence(String),
    #[error("context of {len} tokens exceeds the model window {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error(transparent)]
    Model(#[from] FusionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Fixed candidate label set.
    Classification,
    /// The two bound items are the candidates.
    PairwiseObject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub bindings: Vec<(String, String)>,
    pub gold: String,
}

impl Instance {
    pub fn bound(&self, key: &str) -> Option<&str> {
        self.bindings
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub name: String,
    pub kind: TaskKind,
    pub prompts: Vec<String>,
    pub labels: Vec<String>,
    pub instances: Vec<Instance>,
}

impl EvalTask {
    /// Candidate labels for one instance.
    pub fn candidates(&self, instance: &Instance) -> Vec<String> {
        match self.kind {
            TaskKind::Classification => self.labels.clone(),
            TaskKind::PairwiseObject => {
                let a = instance.bound("ITEMA").unwrap_or_default();
                let b = instance.bound("ITEMB").unwrap_or_default();
                vec![a.to_string(), b.to_string()]
            }
        }
    }

    // ── text format ─────────────────────────────────────────────────

    pub fn parse(text: &str) -> Result<EvalTask, EvalError> {
        let fail = |line: usize, msg: &str| EvalError::Format { line, msg: msg.to_string() };
        let mut name: Option<String> = None;
        let mut kind: Option<TaskKind> = None;
        let mut prompts = Vec::new();
        let mut labels = Vec::new();
        let mut instances = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let ln = idx + 1;
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            if let Some(v) = raw.strip_prefix("task ") {
                if name.is_some() {
                    return Err(fail(ln, "duplicate task line"));
                }
                name = Some(v.to_string());
            } else if let Some(v) = raw.strip_prefix("kind ") {
                kind = Some(match v {
                    "classification" => TaskKind::Classification,
                    "pairwise-object" => TaskKind::PairwiseObject,
                    _ => return Err(fail(ln, "kind must be classification or pairwise-object")),
                });
            } else if let Some(v) = raw.strip_prefix("prompt ") {
                validate_template(v).map_err(|msg| fail(ln, &msg))?;
                prompts.push(v.to_string());
            } else if let Some(v) = raw.strip_prefix("label ") {
                labels.push(v.to_string());
            } else if let Some(v) = raw.strip_prefix("instance\t") {
                let mut bindings = Vec::new();
                let mut gold = None;
                for field in v.split('\t') {
                    let (k, val) = field
                        .split_once('=')
                        .ok_or_else(|| fail(ln, "instance fields are key=value"))?;
                    if k == "gold" {
                        gold = Some(val.to_string());
                    } else if KNOWN_PLACEHOLDERS.contains(&k) {
                        bindings.push((k.to_string(), val.to_string()));
                    } else {
                        return Err(fail(ln, &format!("unknown instance key {k}")));
                    }
                }
                let gold = gold.ok_or_else(|| fail(ln, "instance missing gold="))?;
                instances.push(Instance { bindings, gold });
            } else {
                return Err(fail(ln, "unrecognized line"));
            }
        }
        let name = name.ok_or_else(|| fail(1, "missing task line"))?;
        let kind = kind.ok_or_else(|| fail(1, "missing kind line"))?;
        if prompts.is_empty() {
            return Err(fail(1, "task needs at least one prompt"));
        }
        if kind == TaskKind::Classification && labels.is_empty() {
            return Err(fail(1, "classification task needs labels"));
        }
        if kind == TaskKind::PairwiseObject && !labels.is_empty() {
            return Err(fail(1, "pairwise-object tasks take candidates from instances"));
        }
        let task = EvalTask { name, kind, prompts, labels, instances };
        task.validate().map_err(|msg| fail(1, &msg))?;
        Ok(task)
    }

    fn validate(&self) -> Result<(), String> {
        for instance in &self.instances {
            for prompt in &self.prompts {
                for ph in placeholders(prompt) {
                    if ph == "Label" {
                        continue;
                    }
                    if instance.bound(&ph).is_none() {
                        return Err(format!("instance does not bind [{ph}]"));
                    }
                }
            }
            match self.kind {
                TaskKind::Classification => {
                    if !self.labels.contains(&instance.gold) {
                        return Err(format!("gold {:?} not in label set", instance.gold));
                    }
                }
                TaskKind::PairwiseObject => {
                    let ok = instance.bound("ITEMA") == Some(instance.gold.as_str())
                        || instance.bound("ITEMB") == Some(instance.gold.as_str());
                    if !ok {
                        return Err(format!("gold {:?} is neither bound item", instance.gold));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("task {}\n", self.name));
        out.push_str(match self.kind {
            TaskKind::Classification => "kind classification\n",
            TaskKind::PairwiseObject => "kind pairwise-object\n",
        });
        for p in &self.prompts {
            out.push_str(&format!("prompt {p}\n"));
        }
        for l in &self.labels {
            out.push_str(&format!("label {l}\n"));
        }
        for inst in &self.instances {
            let mut fields: Vec<String> = inst
                .bindings
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect();
            fields.push(format!("gold={}", inst.gold));
            out.push_str(&format!("instance\t{}\n", fields.join("\t")));
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<EvalTask, EvalError> {
        EvalTask::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn placeholders(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('[') {
        let Some(close) = rest[open..].find(']') else { break };
        out.push(rest[open + 1..open + close].to_string());
        rest = &rest[open + close + 1..];
    }
    out
}

fn validate_template(template: &str) -> Result<(), String> {
    for ph in placeholders(template) {
        if ph != "Label" && !KNOWN_PLACEHOLDERS.contains(&ph.as_str()) {
            return Err(format!("unknown placeholder [{ph}]"));
        }
    }
    if let Some(pos) = template.find(LABEL_MARKER) {
        if pos + LABEL_MARKER.len() != template.len() {
            return Err("[Label] must terminate the template".to_string());
        }
    }
    Ok(())
}

/// Substitutes bindings and the candidate label into a template. When the
/// template carries no `[Label]` marker the candidate is appended after a
/// space (completion style).
pub fn render_prompt(
    template: &str,
    instance: &Instance,
    candidate: &str,
) -> Result<String, EvalError> {
    let (prefix, span) = render_split(template, instance, candidate)?;
    Ok(format!("{prefix}{span}"))
}

/// As [`render_prompt`], but split into (context prefix, scored span).
pub fn render_split(
    template: &str,
    instance: &Instance,
    candidate: &str,
) -> Result<(String, String), EvalError> {
    let mut body = template.to_string();
    for ph in placeholders(template) {
        if ph == "Label" {
            continue;
        }
        let value = instance
            .bound(&ph)
            .ok_or_else(|| EvalError::UnboundPlaceholder(ph.clone()))?;
        body = body.replace(&format!("[{ph}]"), value);
    }
    if let Some(stripped) = body.strip_suffix(LABEL_MARKER) {
        Ok((stripped.to_string(), candidate.to_string()))
    } else {
        Ok((body, format!(" {candidate}")))
    }
}

// ── scoring ─────────────────────────────────────────────────────────

/// Anything that maps a token sequence to next-token logits.
pub trait TokenScorer {
    fn vocab_size(&self) -> usize;
    fn max_context(&self) -> usize;
    /// Row-major `[N, V]`: row `i` is the distribution over token `i + 1`.
    fn logits(&self, tokens: &[u32]) -> Result<Vec<f32>, EvalError>;
}

/// A grounded model plus its frozen components.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub ctx: GroundingContext<'a>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, ctx: GroundingContext<'a>) -> Self {
        ModelScorer { model, ctx }
    }
}

impl TokenScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.cfg.vocab_size
    }

    fn max_context(&self) -> usize {
        self.model.cfg.max_seq_len
    }

    fn logits(&self, tokens: &[u32]) -> Result<Vec<f32>, EvalError> {
        Ok(self.model.logits(tokens, &self.ctx)?)
    }
}

fn log_softmax_pick(row: &[f32], target: u32) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        max = max.max(v as f64);
    }
    let mut sum = 0.0f64;
    for &v in row {
        sum += ((v as f64) - max).exp();
    }
    (row[target as usize] as f64) - max - sum.ln()
}

/// Log-probability of `label` continuing `prefix`, summed over the label's
/// tokens and (by default) divided by their count. Tokenization is aligned
/// on the longest common token prefix, so BPE merges across the boundary
/// cannot misattribute tokens.
pub fn score_label(
    scorer: &dyn TokenScorer,
    vocab: &Vocab,
    prefix: &str,
    label_span: &str,
    length_normalize: bool,
) -> Result<f64, EvalError> {
    let prefix_ids = vocab.encode(prefix);
    let full_ids = vocab.encode(format!("{prefix}{label_span}"));
    let common = prefix_ids
        .iter()
        .zip(&full_ids)
        .take_while(|(a, b)| a == b)
        .count();
    let label_len = full_ids.len() - common;
    debug_assert!(label_len > 0, "label span produced no tokens");

    let mut input = Vec::with_capacity(full_ids.len() + 1);
    input.push(BOS);
    input.extend_from_slice(&full_ids);
    if input.len() > scorer.max_context() {
        return Err(EvalError::ContextOverflow {
            len: input.len(),
            max: scorer.max_context(),
        });
    }
    let v = scorer.vocab_size();
    let logits = scorer.logits(&input)?;
    // logits row i predicts input[i + 1] == full_ids[i]
    let mut total = 0.0f64;
    for j in common..full_ids.len() {
        let row = &logits[j * v..(j + 1) * v];
        total += log_softmax_pick(row, full_ids[j]);
    }
    if length_normalize {
        total /= label_len as f64;
    }
    Ok(total)
}

// ── reports ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport {
    pub task: String,
    /// Accuracy for each prompt template, in task order.
    pub per_prompt: Vec<f64>,
    /// Arithmetic mean of the per-prompt accuracies.
    pub average: f64,
    pub instances: usize,
}

impl TaskReport {
    /// Line-delimited record form.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for (i, acc) in self.per_prompt.iter().enumerate() {
            out.push_str(&format!(
                "task={} prompt={} acc={:.6} instances={}\n",
                self.task, i, acc, self.instances
            ));
        }
        out.push_str(&format!(
            "task={} average={:.6} prompts={}\n",
            self.task,
            self.average,
            self.per_prompt.len()
        ));
        out
    }
}

/// Zero-shot classification: per prompt and instance, pick the candidate
/// with the highest label score (ties fall to the earlier candidate), then
/// average accuracy over prompts.
pub fn evaluate_classification(
    scorer: &dyn TokenScorer,
    vocab: &Vocab,
    task: &EvalTask,
    length_normalize: bool,
) -> Result<TaskReport, EvalError> {
    if task.instances.is_empty() {
        return Err(EvalError::NoInstances);
    }
    let mut per_prompt = Vec::with_capacity(task.prompts.len());
    for template in &task.prompts {
        let mut correct = 0usize;
        for instance in &task.instances {
            let candidates = task.candidates(instance);
            let mut best: Option<(usize, f64)> = None;
            for (c, candidate) in candidates.iter().enumerate() {
                let (prefix, span) = render_split(template, instance, candidate)?;
                let score = score_label(scorer, vocab, &prefix, &span, length_normalize)?;
                let better = match best {
                    None => true,
                    Some((_, b)) => score > b,
                };
                if better {
                    best = Some((c, score));
                }
            }
            let picked = &candidates[best.expect("at least one candidate").0];
            if *picked == instance.gold {
                correct += 1;
            }
        }
        per_prompt.push(correct as f64 / task.instances.len() as f64);
    }
    let average = per_prompt.iter().sum::<f64>() / per_prompt.len() as f64;
    Ok(TaskReport {
        task: task.name.clone(),
        per_prompt,
        average,
        instances: task.instances.len(),
    })
}

/// Perplexity over a token stream: non-overlapping windows of `window`
/// tokens (final partial window included), each predicted from a BOS start,
/// `exp` of the mean token NLL.
pub fn evaluate_perplexity(
    scorer: &dyn TokenScorer,
    stream: &[u32],
    window: usize,
) -> Result<f64, EvalError> {
    if stream.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let window = window.min(scorer.max_context() - 1).max(1);
    let v = scorer.vocab_size();
    let mut total_nll = 0.0f64;
    let mut total_tokens = 0usize;
    for chunk in stream.chunks(window) {
        let mut input = Vec::with_capacity(chunk.len());
        input.push(BOS);
        input.extend_from_slice(&chunk[..chunk.len() - 1]);
        let logits = scorer.logits(&input)?;
        for (j, &target) in chunk.iter().enumerate() {
            let row = &logits[j * v..(j + 1) * v];
            total_nll -= log_softmax_pick(row, target);
        }
        total_tokens += chunk.len();
    }
    Ok((total_nll / total_tokens as f64).exp())
}

/// Greedy last-word accuracy: decode token by token from the context that
/// precedes the final word, detokenize, and compare the first emitted word.
pub fn evaluate_last_word(
    scorer: &dyn TokenScorer,
    vocab: &Vocab,
    sentences: &[String],
) -> Result<f64, EvalError> {
    if sentences.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut correct = 0usize;
    for sentence in sentences {
        let trimmed = sentence.trim_end();
        let trimmed = trimmed.strip_suffix('.').unwrap_or(trimmed);
        let Some(split_at) = trimmed.rfind(' ') else {
            return Err(EvalError::ShortSentence(sentence.clone()));
        };
        // the space stays with the continuation: byte-level BPE folds it
        // into the next word's tokens, matching the training distribution
        let context = &trimmed[..split_at];
        let gold = &trimmed[split_at + 1..];
        if gold.is_empty() || context.is_empty() {
            return Err(EvalError::ShortSentence(sentence.clone()));
        }
        let decoded = greedy_continuation(scorer, vocab, context, vocab.encode(gold).len() + 4)?;
        let predicted = decoded
            .trim_start()
            .split(|c: char| c.is_whitespace() || c == '.')
            .next()
            .unwrap_or("");
        if predicted == gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / sentences.len() as f64)
}

/// Greedy decoding of up to `max_new` tokens; always emits at least one.
/// Stops early at EOS or once the detokenized continuation contains a word
/// boundary after some content.
pub fn greedy_continuation(
    scorer: &dyn TokenScorer,
    vocab: &Vocab,
    context: &str,
    max_new: usize,
) -> Result<String, EvalError> {
    let v = scorer.vocab_size();
    let mut input = Vec::new();
    input.push(BOS);
    input.extend(vocab.encode(context));
    let mut emitted: Vec<u32> = Vec::new();
    for _ in 0..max_new.max(1) {
        if input.len() >= scorer.max_context() {
            break;
        }
        let logits = scorer.logits(&input)?;
        let row = &logits[(input.len() - 1) * v..input.len() * v];
        let mut best = 0u32;
        let mut best_score = f32::NEG_INFINITY;
        for (i, &s) in row.iter().enumerate() {
            if s > best_score {
                best_score = s;
                best = i as u32;
            }
        }
        if best == EOS && !emitted.is_empty() {
            break;
        }
        emitted.push(best);
        input.push(best);
        let text = vocab.decode_string(&emitted).unwrap_or_default();
        let inner = text.trim_start();
        if !inner.is_empty() && inner.chars().any(|c| c.is_whitespace()) {
            break;
        }
    }
    Ok(vocab.decode_string(&emitted).unwrap_or_default())
}

// ── synthetic probe tasks ───────────────────────────────────────────

/// Builds the probe tasks for a world: color and shape questions about the
/// held-out probe concepts (reusing the bundled prompt tables), plus a size
/// comparison task over probe pairs with a clear size gap.
pub fn synthetic_tasks(world: &World) -> Vec<EvalTask> {
    let color_template = EvalTask::parse(bundled::COLOR_MEMORY).expect("bundled task parses");
    let shape_template = EvalTask::parse(bundled::SHAPE).expect("bundled task parses");
    let probe = world.probe_concepts();

    let color_instances: Vec<Instance> = probe
        .iter()
        .map(|&i| Instance {
            bindings: vec![
                ("ITEM".to_string(), world.concepts[i].name.clone()),
                ("DESCRIPTOR".to_string(), "a".to_string()),
            ],
            gold: COLORS[world.concepts[i].color].to_string(),
        })
        .collect();
    let color = EvalTask {
        name: "probe-color".to_string(),
        instances: color_instances,
        ..color_template
    };

    let shape_instances: Vec<Instance> = probe
        .iter()
        .map(|&i| Instance {
            bindings: vec![("ITEM".to_string(), world.concepts[i].name.clone())],
            gold: SHAPES[world.concepts[i].shape].to_string(),
        })
        .collect();
    let shape = EvalTask {
        name: "probe-shape".to_string(),
        instances: shape_instances,
        ..shape_template
    };

    // size task: positive-polarity prompts only, so one gold (the larger
    // item) is correct for every prompt
    let mut size_instances = Vec::new();
    for (ai, &a) in probe.iter().enumerate() {
        for &b in probe.iter().skip(ai + 1) {
            let (big, small) = if world.concepts[a].size >= world.concepts[b].size {
                (a, b)
            } else {
                (b, a)
            };
            if world.concepts[big].size < world.concepts[small].size * 1.5 {
                continue;
            }
            size_instances.push(Instance {
                bindings: vec![
                    ("ITEMA".to_string(), world.concepts[a].name.clone()),
                    ("ITEMB".to_string(), world.concepts[b].name.clone()),
                ],
                gold: world.concepts[big].name.clone(),
            });
            if size_instances.len() >= 40 {
                break;
            }
        }
        if size_instances.len() >= 40 {
            break;
        }
    }
    let size = EvalTask {
        name: "probe-size".to_string(),
        kind: TaskKind::PairwiseObject,
        prompts: vec![
            "Which is bigger? [ITEMA] or [ITEMB]".to_string(),
            "Which is larger? [ITEMA] or [ITEMB]".to_string(),
            "Which has a bigger size? [ITEMA] or [ITEMB]".to_string(),
            "Which one is larger in size? [ITEMA] or [ITEMB]".to_string(),
        ],
        labels: Vec::new(),
        instances: size_instances,
    };

    vec![color, shape, size]
}

/// Sanity assertion used by tests and the CLI: every label of every bundled
/// task is distinct and non-empty.
pub fn bundled_tasks() -> Vec<EvalTask> {
    bundled::ALL
        .iter()
        .map(|(_, text)| EvalTask::parse(text).expect("bundled task parses"))
        .collect()
}

pub fn distinct_labels(task: &EvalTask) -> bool {
    let set: BTreeSet<&str> = task.labels.iter().map(String::as_str).collect();
    set.len() == task.labels.len()
}
