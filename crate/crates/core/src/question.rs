//! Question generation: turns a sampled path into composite questions with
//! chained, focus-annotated sub-steps, and the [`SynthesisRecord`] schema
//! those become.

use std::collections::BTreeSet;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backend::{MessagePart, ModelClient, ModelRequest, RoleTag};
use crate::json::extract_json;
use crate::model::{canonical_json, ImageProfile, ImageRef, RelationType, RelevanceGraph};
use crate::pathgen::ReasoningPath;
use crate::stage::{QuarantineEntry, StageError};

pub const GENERATION_PROMPT: &str = "Task Requirements:
    1. Generate Three Complex Reasoning Questions:
       - Each question should be a multi-step reasoning question, and involve at least three images.
       - Questions should be object-oriented, or event-oriented.
       - Avoid begin with 'How' if possible, and make sure the answer is not open-ended.
       - Questions should be about fine-grained features instead of coarse understanding.
       - Questions types:
         - Detail analysis and comparison
         - Fact judgment
         - Sequence ordering
         - Scene understanding
         - Visual grounding
         - Counterfactual reasoning
         - Action prediction
         - Visual navigation
       - Don't specify images explicitly.
       - Each question must be a single sentence without clauses connected by 'and'.


    2. Decompose Each Complex Question into Sub-Questions and Build a Reasoning Chain:
       - Each sub-question specifies one or two images.
       - Don't focus on the same image twice.
       - Construct a logical reasoning chain for each question, showing the step-by-step connection of sub-questions and answers.

    3. Step-by-Step Answer Each Reasoning Chain to Arrive at the Final Answer

    4. Ensure Data Quality:
       - The questions and answers must be clear, specific, and logically consistent.
       - Avoid irrelevant details or ambiguity, ensuring that all generated content is directly related to the provided image information.

    Output Format should be JSON.";

pub const GENERATION_JSON_SCHEMA: &str = r#"Use exactly this JSON structure:
{"questions": [{"question": "...", "type": "open_ended" or "single_choice", "choices": ["...", "..."], "steps": [{"sub_question": "...", "focus": [<image index>, ...], "answer": "..."}], "final_answer": "..."}]}
"focus" lists the 0-based indices of the one or two images a step looks at. "choices" is required for single_choice questions and final_answer must then be one of the choices."#;

pub const MAX_CANDIDATES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    OpenEnded,
    SingleChoice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStep {
    pub sub_question: String,
    pub focus: Vec<usize>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationUse {
    /// Record-local image indices.
    pub pair: (usize, usize),
    #[serde(rename = "type")]
    pub relation: RelationType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub source: String,
    pub path_length: usize,
    pub seed: u64,
    /// Graph node indices of the path, in order.
    #[serde(default)]
    pub path_nodes: Vec<usize>,
}

/// The question, choices, steps and answer of one record; what the model
/// produces before images and provenance are attached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordBody {
    pub question: String,
    pub question_type: QuestionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    pub steps: Vec<ChainStep>,
    pub final_answer: String,
}

/// One dataset instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub id: String,
    pub images: Vec<ImageRef>,
    pub question: String,
    pub question_type: QuestionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    pub steps: Vec<ChainStep>,
    pub final_answer: String,
    pub relations_used: Vec<RelationUse>,
    pub meta: RecordMeta,
}

impl SynthesisRecord {
    pub fn new(body: RecordBody, images: Vec<ImageRef>, relations_used: Vec<RelationUse>, meta: RecordMeta) -> Self {
        let mut r = Self {
            id: String::new(),
            images,
            question: body.question,
            question_type: body.question_type,
            choices: body.choices,
            steps: body.steps,
            final_answer: body.final_answer,
            relations_used,
            meta,
        };
        r.id = r.compute_id();
        r
    }

    /// SHA-256 over the canonical JSON of the record with `id` and `meta`
    /// removed.
    pub fn compute_id(&self) -> String {
        let mut v = serde_json::to_value(self).expect("records serialize");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("id");
            obj.remove("meta");
        }
        hex::encode(Sha256::digest(canonical_json(&v).expect("values serialize").as_bytes()))
    }

    pub fn body(&self) -> RecordBody {
        RecordBody {
            question: self.question.clone(),
            question_type: self.question_type,
            choices: self.choices.clone(),
            steps: self.steps.clone(),
            final_answer: self.final_answer.clone(),
        }
    }

    /// Full schema check, including the id.
    pub fn validate(&self) -> Result<(), String> {
        let k = self.images.len();
        if k == 0 {
            return Err("record has no images".into());
        }
        validate_body(&self.body(), k)?;
        for u in &self.relations_used {
            if u.pair.0 >= u.pair.1 || u.pair.1 >= k {
                return Err(format!("relation pair {:?} invalid for {k} images", u.pair));
            }
        }
        if self.meta.path_length != k {
            return Err(format!("meta.path_length {} != image count {k}", self.meta.path_length));
        }
        if self.id != self.compute_id() {
            return Err("id does not match record content".into());
        }
        Ok(())
    }
}

/// Checks a body against the record invariants for `k` images.
pub fn validate_body(body: &RecordBody, k: usize) -> Result<(), String> {
    if body.question.trim().is_empty() {
        return Err("empty question".into());
    }
    if body.steps.is_empty() {
        return Err("no steps".into());
    }
    let mut used = BTreeSet::new();
    for (n, step) in body.steps.iter().enumerate() {
        if step.sub_question.trim().is_empty() {
            return Err(format!("step {n}: empty sub-question"));
        }
        if step.answer.trim().is_empty() {
            return Err(format!("step {n}: empty answer"));
        }
        if !(1..=2).contains(&step.focus.len()) {
            return Err(format!("step {n}: focus must name one or two images"));
        }
        if let Some(bad) = step.focus.iter().find(|&&f| f >= k) {
            return Err(format!("step {n}: focus index {bad} out of range"));
        }
        let distinct: BTreeSet<usize> = step.focus.iter().copied().collect();
        if distinct.len() != step.focus.len() || distinct.iter().any(|f| used.contains(f)) {
            return Err(format!("step {n}: duplicate focus"));
        }
        used.extend(distinct);
    }
    if body.final_answer.trim().is_empty() {
        return Err("empty final answer".into());
    }
    match (body.question_type, &body.choices) {
        (QuestionType::SingleChoice, None) => return Err("single_choice without choices".into()),
        (QuestionType::SingleChoice, Some(c)) if c.len() < 2 => {
            return Err("single_choice needs at least two choices".into())
        }
        (QuestionType::SingleChoice, Some(c)) if !c.contains(&body.final_answer) => {
            return Err("final answer not among choices".into())
        }
        (QuestionType::OpenEnded, Some(_)) => return Err("choices given for open_ended question".into()),
        _ => {}
    }
    Ok(())
}

fn profile_block(idx: usize, p: &ImageProfile) -> String {
    let objects = p
        .objects
        .iter()
        .map(|o| {
            if o.attributes.is_empty() {
                o.name.clone()
            } else {
                let attrs: Vec<String> = o.attributes.iter().map(|(k, v)| format!("{k}: {v}")).collect();
                format!("{} ({})", o.name, attrs.join(", "))
            }
        })
        .collect::<Vec<_>>()
        .join("; ");
    let mut s = format!("[Image {idx} profile]\nOverall view: {}\n", p.overall_view);
    for (label, v) in [
        ("Main objects", &objects),
        ("Background", &p.background),
        ("Object interactions", &p.interactions),
        ("Text", &p.text_content),
        ("Atmosphere", &p.atmosphere),
        ("Description", &p.narrative),
    ] {
        if !v.is_empty() {
            s.push_str(&format!("{label}: {v}\n"));
        }
    }
    s
}

pub fn render_generation_prompt(
    client: &ModelClient,
    path: &ReasoningPath,
    graph: &RelevanceGraph,
) -> Result<ModelRequest, StageError> {
    path.validate(graph)
        .map_err(|e| StageError::InvalidPath(e.to_string()))?;
    let mut ctx = format!(
        "You are given textual profiles of {} images, numbered 0 to {}, and the annotated relations between consecutive images.\n\n",
        path.len(),
        path.len() - 1
    );
    for (t, &n) in path.nodes.iter().enumerate() {
        ctx.push_str(&profile_block(t, &graph.nodes[n]));
        ctx.push('\n');
    }
    for (t, &e) in path.edges.iter().enumerate() {
        ctx.push_str(&format!("[Relation between image {t} and image {}]\n", t + 1));
        for (kind, desc) in &graph.edges[e].relations {
            ctx.push_str(&format!("{kind}: {desc}\n"));
        }
        ctx.push('\n');
    }
    let text = format!("{ctx}{GENERATION_PROMPT}\n\n{GENERATION_JSON_SCHEMA}");
    Ok(client.request(RoleTag::Question, vec![MessagePart::Text { text }]))
}

/// A candidate rejected during parsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReason {
    pub candidate: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationParse {
    pub candidates: Vec<RecordBody>,
    pub drops: Vec<DropReason>,
}

fn parse_type(v: Option<&Value>, has_choices: bool) -> Result<QuestionType, String> {
    let Some(v) = v else {
        return Ok(if has_choices {
            QuestionType::SingleChoice
        } else {
            QuestionType::OpenEnded
        });
    };
    let s = v.as_str().ok_or("type is not a string")?;
    let norm: String = s
        .to_ascii_lowercase()
        .chars()
        .filter(char::is_ascii_alphabetic)
        .collect();
    match norm.as_str() {
        "openended" | "open" => Ok(QuestionType::OpenEnded),
        "singlechoice" | "multiplechoice" | "choice" => Ok(QuestionType::SingleChoice),
        _ => Err(format!("unknown question type `{s}`")),
    }
}

fn string_field(obj: &serde_json::Map<String, Value>, keys: &[&str]) -> String {
    keys.iter()
        .find_map(|k| obj.get(*k))
        .map(|v| match v {
            Value::String(s) => s.trim().to_string(),
            Value::Null => String::new(),
            other => other.to_string(),
        })
        .unwrap_or_default()
}

/// Resolves a bare option label ("B", "(B)", "B.") to its choice text.
fn resolve_choice_label(answer: &str, choices: &[String]) -> Option<String> {
    let label = answer.trim().trim_start_matches('(').trim_end_matches([')', '.', ':']);
    let mut chars = label.chars();
    let c = chars.next()?.to_ascii_uppercase();
    if chars.next().is_some() || !c.is_ascii_uppercase() {
        return None;
    }
    choices.get((c as u8 - b'A') as usize).cloned()
}

fn parse_candidate(v: &Value, k: usize) -> Result<RecordBody, String> {
    let obj = v.as_object().ok_or("candidate is not an object")?;
    let choices: Option<Vec<String>> = match obj.get("choices").or_else(|| obj.get("options")) {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) if items.is_empty() => None,
        Some(Value::Array(items)) => Some(
            items
                .iter()
                .map(|c| c.as_str().map(|s| s.trim().to_string()).ok_or("choice is not a string"))
                .collect::<Result<_, _>>()?,
        ),
        Some(_) => return Err("choices is not a list".into()),
    };
    let question_type = parse_type(obj.get("type").or_else(|| obj.get("question_type")), choices.is_some())?;
    let steps_v = obj
        .get("steps")
        .or_else(|| obj.get("reasoning_chain"))
        .and_then(Value::as_array)
        .ok_or("missing steps")?;
    let mut steps = Vec::with_capacity(steps_v.len());
    for s in steps_v {
        let so = s.as_object().ok_or("step is not an object")?;
        let focus = match so.get("focus") {
            Some(Value::Array(items)) => items
                .iter()
                .map(|f| {
                    f.as_u64()
                        .map(|x| x as usize)
                        .ok_or("focus index is not a non-negative integer")
                })
                .collect::<Result<Vec<_>, _>>()?,
            Some(Value::Number(n)) => vec![n.as_u64().ok_or("focus index is not a non-negative integer")? as usize],
            _ => return Err("step without focus".into()),
        };
        steps.push(ChainStep {
            sub_question: string_field(so, &["sub_question", "question"]),
            focus,
            answer: string_field(so, &["answer"]),
        });
    }
    let mut final_answer = string_field(obj, &["final_answer", "answer"]);
    if let Some(c) = &choices {
        if !c.contains(&final_answer) {
            if let Some(resolved) = resolve_choice_label(&final_answer, c) {
                final_answer = resolved;
            }
        }
    }
    let body = RecordBody {
        question: string_field(obj, &["question"]),
        question_type,
        choices,
        steps,
        final_answer,
    };
    validate_body(&body, k)?;
    Ok(body)
}

/// Parses up to [`MAX_CANDIDATES`] questions from a completion, keeping
/// those that satisfy the record invariants for `k` images.
pub fn parse_generation(text: &str, k: usize) -> Result<GenerationParse, StageError> {
    if k == 0 {
        return Err(StageError::Precondition("k must be >= 1".into()));
    }
    let value = extract_json(text)?;
    let items = match &value {
        Value::Array(items) => items,
        Value::Object(o) => match o.get("questions").and_then(Value::as_array) {
            Some(items) => items,
            None if o.contains_key("question") => std::slice::from_ref(&value),
            None => return Err(StageError::Unparseable("no `questions` list".into())),
        },
        _ => return Err(StageError::Unparseable("expected an object or list".into())),
    };
    let mut candidates = Vec::new();
    let mut drops = Vec::new();
    for (i, item) in items.iter().enumerate() {
        if i >= MAX_CANDIDATES {
            drops.push(DropReason {
                candidate: i,
                reason: "more than three questions".into(),
            });
            continue;
        }
        match parse_candidate(item, k) {
            Ok(body) => candidates.push(body),
            Err(reason) => drops.push(DropReason { candidate: i, reason }),
        }
    }
    if candidates.is_empty() {
        let mut reasons: Vec<String> = drops.iter().map(|d| d.reason.clone()).collect();
        if reasons.is_empty() {
            reasons.push("no questions".into());
        }
        return Err(StageError::AllCandidatesInvalid { reasons });
    }
    Ok(GenerationParse { candidates, drops })
}

/// Relations along the path, in record-local indices.
fn relations_along(path: &ReasoningPath, graph: &RelevanceGraph) -> Vec<RelationUse> {
    path.edges
        .iter()
        .enumerate()
        .flat_map(|(t, &e)| {
            graph.edges[e].relations.keys().map(move |&relation| RelationUse {
                pair: (t, t + 1),
                relation,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct SynthesisOutcome {
    pub records: Vec<SynthesisRecord>,
    pub drops: Vec<DropReason>,
    pub quarantine: Vec<QuarantineEntry>,
}

fn assemble(
    path: &ReasoningPath,
    graph: &RelevanceGraph,
    parsed: GenerationParse,
    seed: u64,
    source: &str,
) -> (Vec<SynthesisRecord>, Vec<DropReason>) {
    let images: Vec<ImageRef> = path.nodes.iter().map(|&n| graph.nodes[n].image.clone()).collect();
    let relations = relations_along(path, graph);
    let meta = RecordMeta {
        source: source.to_string(),
        path_length: path.len(),
        seed,
        path_nodes: path.nodes.clone(),
    };
    let records = parsed
        .candidates
        .into_iter()
        .map(|body| SynthesisRecord::new(body, images.clone(), relations.clone(), meta.clone()))
        .collect();
    (records, parsed.drops)
}

/// Generates records for one path.
pub async fn synthesize_records(
    path: &ReasoningPath,
    graph: &RelevanceGraph,
    client: &ModelClient,
    seed: u64,
    source: &str,
) -> Result<SynthesisOutcome, StageError> {
    let request = render_generation_prompt(client, path, graph)?;
    let response = client.complete(request).await?;
    let parsed = parse_generation(&response.text, path.len())?;
    let (records, drops) = assemble(path, graph, parsed, seed, source);
    Ok(SynthesisOutcome {
        records,
        drops,
        quarantine: Vec::new(),
    })
}

/// Generates records for many paths concurrently; failed paths are
/// quarantined. Records come out in path order.
pub async fn synthesize_batch(
    paths: &[ReasoningPath],
    graph: &RelevanceGraph,
    client: &ModelClient,
    seed: u64,
    source: &str,
) -> Result<SynthesisOutcome, StageError> {
    let mut out = SynthesisOutcome::default();
    if paths.is_empty() {
        return Ok(out);
    }
    let requests = paths
        .iter()
        .map(|p| render_generation_prompt(client, p, graph))
        .collect::<Result<Vec<_>, _>>()?;
    let responses = client.run_batch(requests).await?;
    for (path, resp) in paths.iter().zip(responses) {
        let item = format!(
            "path:{}",
            path.nodes.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
        );
        let resp = match resp {
            Ok(r) => r,
            Err(e) => {
                out.quarantine.push(QuarantineEntry::new(item, "question", "", e));
                continue;
            }
        };
        match parse_generation(&resp.text, path.len()) {
            Ok(parsed) => {
                for d in &parsed.drops {
                    out.quarantine.push(QuarantineEntry::new(
                        format!("{item}#{}", d.candidate),
                        "question",
                        "",
                        &d.reason,
                    ));
                }
                let (records, drops) = assemble(path, graph, parsed, seed, source);
                out.records.extend(records);
                out.drops.extend(drops);
            }
            Err(e) => out
                .quarantine
                .push(QuarantineEntry::new(item, "question", resp.text, e)),
        }
    }
    Ok(out)
}

fn lint_patterns() -> &'static [Regex; 2] {
    static RE: std::sync::OnceLock<[Regex; 2]> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        [
            Regex::new(r"(?i)\b(image|picture|photo|img)s?\s*(#\s*)?(\d+|[a-h]\b)").expect("valid regex"),
            Regex::new(
                r"(?i)\b(first|second|third|fourth|fifth|sixth|seventh|eighth|last)\s+(image|picture|photo)s?\b",
            )
            .expect("valid regex"),
        ]
    })
}

/// Style warnings for a composite question. Never fails.
pub fn lint_question(text: &str) -> Vec<String> {
    let mut warnings = Vec::new();
    let t = text.trim();
    if t.split_whitespace()
        .next()
        .is_some_and(|w| w.eq_ignore_ascii_case("how"))
    {
        warnings.push("question begins with 'How'".to_string());
    }
    if t.chars().filter(|c| matches!(c, '.' | '?' | '!')).count() > 1 {
        warnings.push("more than one sentence".to_string());
    }
    if lint_patterns().iter().any(|re| re.is_match(t)) {
        warnings.push("refers to images explicitly".to_string());
    }
    warnings
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Provenance, RelationEdge};
    use crate::testutil::{profile_for, scripted_client};
    use std::collections::BTreeMap;

    fn graph3() -> RelevanceGraph {
        let nodes = (0..3)
            .map(|i| {
                profile_for(
                    &ImageRef::new(format!("{i:064}"), format!("{i}.png")),
                    &format!("scene {i}"),
                )
            })
            .collect();
        let edges = vec![
            RelationEdge::new(0, 1, BTreeMap::from([(RelationType::Temporal, "t01".into())])).unwrap(),
            RelationEdge::new(
                1,
                2,
                BTreeMap::from([
                    (RelationType::Spatial, "s12".into()),
                    (RelationType::Semantic, "m12".into()),
                ]),
            )
            .unwrap(),
        ];
        RelevanceGraph::new(nodes, edges, Provenance::default()).unwrap()
    }

    fn q(question: &str, steps: &str, extra: &str) -> String {
        format!(r#"{{"question":"{question}","type":"open_ended","steps":{steps},"final_answer":"yes"{extra}}}"#)
    }

    #[test]
    fn prompt_structure() {
        let g = graph3();
        let (client, _) = scripted_client(vec![]);
        let path = ReasoningPath::from_nodes(&g, vec![0, 1, 2]).unwrap();
        let r = render_generation_prompt(&client, &path, &g).unwrap();
        let t = r.text();
        assert_eq!(t.matches("[Relation between").count(), 2);
        assert_eq!(t.matches("profile]").count(), 3);
        assert!(t.contains("Each sub-question specifies one or two images."));
        assert!(t.contains("Counterfactual reasoning"));
        assert!(t.contains("s12") && t.contains("m12"));
        assert_eq!(r.images().count(), 0);
        let bad = ReasoningPath {
            nodes: vec![0, 2],
            edges: vec![0],
        };
        assert!(matches!(
            render_generation_prompt(&client, &bad, &g),
            Err(StageError::InvalidPath(_))
        ));
    }

    #[test]
    fn drops_duplicate_focus() {
        let good = q(
            "Which tool is used?",
            r#"[{"sub_question":"a?","focus":[0],"answer":"x"},{"sub_question":"b?","focus":[1,2],"answer":"y"}]"#,
            "",
        );
        let dup = q(
            "Which one?",
            r#"[{"sub_question":"a?","focus":[0,1],"answer":"x"},{"sub_question":"b?","focus":[1],"answer":"y"}]"#,
            "",
        );
        let text = format!(r#"{{"questions":[{good},{dup},{good}]}}"#);
        let p = parse_generation(&text, 3).unwrap();
        assert_eq!(p.candidates.len(), 2);
        assert_eq!(p.drops.len(), 1);
        assert!(p.drops[0].reason.contains("duplicate focus"));
    }

    #[test]
    fn drops_wide_focus_and_bad_choices() {
        let wide = q("Which?", r#"[{"sub_question":"a?","focus":[0,1,2],"answer":"x"}]"#, "");
        let p = parse_generation(&format!(r#"{{"questions":[{wide}]}}"#), 3);
        match p {
            Err(StageError::AllCandidatesInvalid { reasons }) => assert!(reasons[0].contains("one or two images")),
            other => panic!("{other:?}"),
        }
        let choice = r#"{"question":"Which?","type":"single_choice","choices":["red","blue"],"steps":[{"sub_question":"a?","focus":[0],"answer":"x"}],"final_answer":"green"}"#;
        assert!(parse_generation(choice, 2).is_err());
        let label = choice.replace("green", "B");
        let ok = parse_generation(&label, 2).unwrap();
        assert_eq!(ok.candidates[0].final_answer, "blue");
        assert_eq!(ok.candidates[0].question_type, QuestionType::SingleChoice);
    }

    #[test]
    fn caps_at_three_candidates() {
        let good = q("Which?", r#"[{"sub_question":"a?","focus":[0],"answer":"x"}]"#, "");
        let text = format!("[{good},{good},{good},{good},{good}]");
        let p = parse_generation(&text, 1).unwrap();
        assert_eq!(p.candidates.len(), 3);
        assert_eq!(p.drops.len(), 2);
        assert!(matches!(
            parse_generation("nothing", 2),
            Err(StageError::Unparseable(_))
        ));
    }

    fn completion() -> String {
        let a = q(
            "Which utensil appears in both scenes?",
            r#"[{"sub_question":"What is held?","focus":[0],"answer":"a whisk"},{"sub_question":"Is it on the counter?","focus":[1],"answer":"yes"}]"#,
            "",
        );
        let b = q(
            "Which step follows mixing?",
            r#"[{"sub_question":"What is mixed?","focus":[0,1],"answer":"batter"}]"#,
            "",
        );
        let c = r#"{"question":"Which color is the bowl?","type":"single_choice","choices":["red","white"],"steps":[{"sub_question":"Which bowl?","focus":[1],"answer":"white bowl"}],"final_answer":"white"}"#;
        format!(r#"{{"questions":[{a},{b},{c}]}}"#)
    }

    #[tokio::test]
    async fn synthesizes_three_records() {
        let g = graph3();
        let path = ReasoningPath::from_nodes(&g, vec![1, 0]).unwrap();
        let (client, _) = scripted_client(vec![(RoleTag::Question, vec![completion(), completion()])]);
        let a = synthesize_records(&path, &g, &client, 5, "g.json").await.unwrap();
        assert_eq!(a.records.len(), 3);
        for r in &a.records {
            assert_eq!(r.images, vec![g.nodes[1].image.clone(), g.nodes[0].image.clone()]);
            assert!(r.validate().is_ok(), "{:?}", r.validate());
            assert_eq!(
                r.relations_used,
                vec![RelationUse {
                    pair: (0, 1),
                    relation: RelationType::Temporal
                }]
            );
        }
        let b = synthesize_records(&path, &g, &client, 5, "g.json").await.unwrap();
        let ids = |o: &SynthesisOutcome| o.records.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));

        let (client, _) = scripted_client(vec![(RoleTag::Question, vec![r#"{"questions":[]}"#.into()])]);
        assert!(matches!(
            synthesize_records(&path, &g, &client, 5, "g.json").await,
            Err(StageError::AllCandidatesInvalid { .. })
        ));
    }

    #[test]
    fn id_ignores_meta() {
        let g = graph3();
        let path = ReasoningPath::from_nodes(&g, vec![0, 1]).unwrap();
        let parsed = parse_generation(&completion(), 2).unwrap();
        let (a, _) = assemble(&path, &g, parsed.clone(), 1, "x");
        let (b, _) = assemble(&path, &g, parsed, 2, "y");
        assert_eq!(a[0].id, b[0].id);
        let mut tampered = a[0].clone();
        tampered.final_answer = "no".into();
        assert!(tampered.validate().is_err());
    }

    #[test]
    fn lint_rules() {
        assert_eq!(lint_question("How do the scenes differ?").len(), 1);
        assert!(lint_question("Which object appears first?").is_empty());
        assert_eq!(
            lint_question("In image 2, what changes?"),
            vec!["refers to images explicitly".to_string()]
        );
        assert_eq!(
            lint_question("What is it? Why?"),
            vec!["more than one sentence".to_string()]
        );
        assert!(!lint_question("Which is in the second picture?").is_empty());
        assert!(lint_question("However, which imagery dominates?").is_empty());
    }

    proptest::proptest! {
        #[test]
        fn never_more_than_three(n in 0usize..8, k in 1usize..5) {
            let good = q("Which?", r#"[{"sub_question":"a?","focus":[0],"answer":"x"}]"#, "");
            let text = format!("[{}]", vec![good; n].join(","));
            if let Ok(p) = parse_generation(&text, k) {
                proptest::prop_assert!(p.candidates.len() <= MAX_CANDIDATES);
            }
        }
    }
}
