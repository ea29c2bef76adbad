//! Task families, prompt and answer rendering, training-sample assembly and
//! answer parsing.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Error, Result};
use crate::geometry::PointCloud;
use crate::gfp::PerPointEmbeddings;
use crate::lm::vocab::{BOS, EOS, PAD, SEG};
use crate::lm::{MaskEmbeddings, Vocabulary};
use crate::losses::mask_logits;

pub const TEMPLATE_VERSION: u32 = 1;
pub const NO_MASK_ANSWER: &str = "There is no mask.";
const BUILTIN_TEMPLATES: &str = include_str!("templates.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SemanticSingle,
    SemanticAll,
    Referring,
    Instruction,
    OpenVocab,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::SemanticSingle,
        TaskKind::SemanticAll,
        TaskKind::Referring,
        TaskKind::Instruction,
        TaskKind::OpenVocab,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SemanticSingle => "semantic_single",
            TaskKind::SemanticAll => "semantic_all",
            TaskKind::Referring => "referring",
            TaskKind::Instruction => "instruction",
            TaskKind::OpenVocab => "open_vocab",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| invalid(format!("unknown task kind {name:?}")))
    }

    /// Tasks whose answer lists every matching category.
    pub fn lists_categories(self) -> bool {
        matches!(self, TaskKind::SemanticAll | TaskKind::OpenVocab)
    }

    /// Semantic tasks are scored per category; the rest on unioned masks.
    pub fn is_semantic(self) -> bool {
        matches!(self, TaskKind::SemanticSingle | TaskKind::SemanticAll | TaskKind::OpenVocab)
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub kind: TaskKind,
    /// Referring expression or instruction text; empty for semantic tasks.
    #[serde(default)]
    pub description: String,
    /// Target category for single-category, referring and instruction tasks.
    #[serde(default)]
    pub category: String,
    /// Category list offered in the prompt of all-category tasks.
    #[serde(default)]
    pub categories: Vec<String>,
    /// Category labels of the expected answer, one per `<SEG>`.
    pub answer_categories: Vec<String>,
    pub target_instance_ids: Vec<i32>,
    #[serde(default)]
    pub variant: usize,
}

impl Annotation {
    pub fn is_zero_target(&self) -> bool {
        self.target_instance_ids.is_empty()
    }

    pub fn prompt(&self) -> Result<String> {
        let fields = PromptFields {
            category: (!self.kind.lists_categories()).then_some(self.category.as_str()),
            description: matches!(self.kind, TaskKind::Referring | TaskKind::Instruction)
                .then_some(self.description.as_str()),
            categories: self.kind.lists_categories().then_some(self.categories.as_slice()),
        };
        render_prompt(self.kind, &fields, self.variant)
    }

    pub fn answer(&self) -> Result<String> {
        render_answer(self.kind, &self.answer_categories, self.is_zero_target())
    }
}

#[derive(Debug, Deserialize)]
struct TemplateEntry {
    prompts: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct TemplateFile {
    version: u32,
    semantic_single: TemplateEntry,
    semantic_all: TemplateEntry,
    referring: TemplateEntry,
    instruction: TemplateEntry,
    open_vocab: TemplateEntry,
}

#[derive(Debug, Clone)]
pub struct Templates {
    by_kind: [Vec<String>; 5],
}

impl Templates {
    pub fn parse(text: &str) -> Result<Self> {
        let file: TemplateFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if file.version != TEMPLATE_VERSION {
            return Err(Error::UnsupportedVersion {
                found: file.version,
                expected: TEMPLATE_VERSION,
            });
        }
        let by_kind = [
            file.semantic_single.prompts,
            file.semantic_all.prompts,
            file.referring.prompts,
            file.instruction.prompts,
            file.open_vocab.prompts,
        ];
        ensure!(by_kind.iter().all(|p| !p.is_empty()), "every task needs at least one template");
        Ok(Self { by_kind })
    }

    pub fn builtin() -> &'static Templates {
        static CELL: OnceLock<Templates> = OnceLock::new();
        CELL.get_or_init(|| Templates::parse(BUILTIN_TEMPLATES).expect("builtin templates parse"))
    }

    pub fn prompts(&self, kind: TaskKind) -> &[String] {
        &self.by_kind[kind.index()]
    }

    pub fn variants(&self, kind: TaskKind) -> usize {
        self.prompts(kind).len()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PromptFields<'a> {
    pub category: Option<&'a str>,
    pub description: Option<&'a str>,
    pub categories: Option<&'a [String]>,
}

pub fn render_prompt(kind: TaskKind, fields: &PromptFields<'_>, variant: usize) -> Result<String> {
    render_prompt_with(Templates::builtin(), kind, fields, variant)
}

pub fn render_prompt_with(
    templates: &Templates,
    kind: TaskKind,
    fields: &PromptFields<'_>,
    variant: usize,
) -> Result<String> {
    let options = templates.prompts(kind);
    let template = options
        .get(variant)
        .ok_or_else(|| invalid(format!("{} has no template variant {variant}", kind.name())))?;
    let mut body = template.clone();
    if body.contains("{category}") {
        let c = fields
            .category
            .ok_or_else(|| invalid(format!("{} prompt needs a category", kind.name())))?;
        body = body.replace("{category}", c);
    }
    if body.contains("{description}") {
        let d = fields
            .description
            .ok_or_else(|| invalid(format!("{} prompt needs a description", kind.name())))?;
        if d.is_empty() {
            log::warn!("empty description in {} prompt", kind.name());
        }
        body = body.replace("{description}", d);
    }
    if kind.lists_categories() {
        let list = fields
            .categories
            .ok_or_else(|| invalid(format!("{} prompt needs a category list", kind.name())))?;
        let mut sorted: Vec<&str> = list.iter().map(String::as_str).collect();
        sorted.sort_unstable();
        sorted.dedup();
        body = format!("{body} Categories: {}.", sorted.join(", "));
    }
    Ok(format!("USER: <POINT> {body} ASSISTANT:"))
}

/// `"c1 <SEG>, c2 <SEG>."`, or the no-mask sentence for zero-target samples.
pub fn render_answer(kind: TaskKind, categories: &[String], zero_target: bool) -> Result<String> {
    if zero_target {
        return Ok(NO_MASK_ANSWER.to_string());
    }
    ensure!(!categories.is_empty(), "a non-empty answer needs at least one category");
    ensure!(categories.iter().all(|c| !c.trim().is_empty()), "empty category in answer");
    let mut cats: Vec<&str> = categories.iter().map(String::as_str).collect();
    if kind.lists_categories() {
        cats.sort_unstable();
    }
    let parts: Vec<String> = cats.iter().map(|c| format!("{c} <SEG>")).collect();
    Ok(format!("{}.", parts.join(", ")))
}

/// One teacher-forced training example.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatSample {
    pub kind: TaskKind,
    pub prompt: String,
    pub answer: String,
    /// `BOS` + prompt tokens.
    pub prompt_ids: Vec<u32>,
    /// `BOS` + prompt + answer + `EOS`.
    pub target_ids: Vec<u32>,
    /// True on answer tokens and the closing `EOS`.
    pub answer_mask: Vec<bool>,
    /// One row per `<SEG>` in answer order.
    pub gt_masks: Vec<Vec<bool>>,
    pub answer_categories: Vec<String>,
}

impl ChatSample {
    pub fn seg_count(&self) -> usize {
        self.target_ids.iter().filter(|&&t| t == SEG).count()
    }
}

/// `category_names[id]` names every category id used in the cloud.
pub fn build_training_sample(
    cloud: &PointCloud,
    category_names: &[String],
    annotation: &Annotation,
    vocab: &Vocabulary,
) -> Result<ChatSample> {
    let zero = annotation.is_zero_target();
    ensure!(
        zero == annotation.answer_categories.is_empty(),
        "zero-target annotations must have no answer categories and vice versa"
    );
    if !annotation.kind.lists_categories() && !zero {
        ensure!(
            annotation.answer_categories.len() == 1,
            "{} answers name exactly one category",
            annotation.kind.name()
        );
    }
    let instances = cloud
        .instance_ids()
        .ok_or_else(|| invalid("training sample needs instance labels"))?;
    let categories = cloud
        .category_ids()
        .ok_or_else(|| invalid("training sample needs category labels"))?;
    for id in &annotation.target_instance_ids {
        ensure!(instances.contains(id), "annotation references instance {id} absent from the scene");
    }

    let prompt = annotation.prompt()?;
    let answer = annotation.answer()?;
    let mut prompt_ids = vec![BOS];
    prompt_ids.extend(vocab.tokenize(&prompt));
    let answer_ids = vocab.tokenize(&answer);
    let mut target_ids = prompt_ids.clone();
    target_ids.extend(&answer_ids);
    target_ids.push(EOS);
    let mut answer_mask = vec![false; prompt_ids.len()];
    answer_mask.resize(target_ids.len(), true);

    let is_target = |i: usize| annotation.target_instance_ids.contains(&instances[i]);
    let gt_masks: Vec<Vec<bool>> = if zero {
        Vec::new()
    } else if annotation.kind.is_semantic() {
        let mut rows = Vec::new();
        let mut cats = annotation.answer_categories.clone();
        if annotation.kind.lists_categories() {
            cats.sort_unstable();
        }
        for name in &cats {
            let row: Vec<bool> = (0..cloud.len())
                .map(|i| {
                    is_target(i)
                        && category_names
                            .get(categories[i] as usize)
                            .is_some_and(|c| c == name)
                })
                .collect();
            rows.push(row);
        }
        rows
    } else {
        vec![(0..cloud.len()).map(is_target).collect()]
    };
    let sample = ChatSample {
        kind: annotation.kind,
        prompt,
        answer,
        prompt_ids,
        target_ids,
        answer_mask,
        gt_masks,
        answer_categories: annotation.answer_categories.clone(),
    };
    if sample.seg_count() != sample.gt_masks.len() {
        return Err(Error::Internal(format!(
            "{} segmentation tokens but {} target masks",
            sample.seg_count(),
            sample.gt_masks.len()
        )));
    }
    Ok(sample)
}

/// Category label of every `<SEG>`: the words between the previous `<SEG>`
/// (or the answer start) and itself, punctuation removed.
pub fn parse_answer_labels(ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
    let mut labels = Vec::new();
    let mut span: Vec<&str> = Vec::new();
    for &id in ids {
        match id {
            EOS => break,
            PAD | BOS => {}
            SEG => labels.push(std::mem::take(&mut span).join(" ")),
            _ => {
                if let Some(tok) = vocab.token(id) {
                    if !matches!(tok, "," | "." | "?" | ":") {
                        span.push(tok);
                    }
                }
            }
        }
    }
    labels
}

/// Labeled binary masks from a generated answer.
pub fn parse_prediction(
    generated_ids: &[u32],
    vocab: &Vocabulary,
    h_seg: &MaskEmbeddings,
    f_p: &PerPointEmbeddings,
) -> Result<Vec<(String, Vec<bool>)>> {
    let labels = parse_answer_labels(generated_ids, vocab);
    if labels.len() != h_seg.len() {
        return Err(Error::Internal(format!(
            "{} segmentation tokens but {} mask embeddings",
            labels.len(),
            h_seg.len()
        )));
    }
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    let masks = mask_logits(h_seg, &f_p.values)?.binarize()?;
    Ok(labels.into_iter().zip(masks).collect())
}
