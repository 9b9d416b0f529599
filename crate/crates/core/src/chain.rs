//! Inference-time chain executor: plan a sub-question and its image focus,
//! answer it on the focused images only, then decide whether to stop.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{BackendError, MessagePart, ModelClient, RoleTag};
use crate::json::extract_json;
use crate::model::ImageRef;

pub const DEFAULT_MAX_STEPS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("chain needs at least one image")]
    NoImages,
    #[error("max_steps must be >= 1")]
    InvalidConfig,
    #[error("unparseable {role} output: {message}")]
    Unparseable { role: &'static str, message: String },
    #[error("focus is empty after clamping")]
    EmptyFocus,
    #[error("empty answer")]
    EmptyAnswer,
    #[error("stop signalled without a final answer")]
    MissingFinalAnswer,
    #[error("step budget of {0} exhausted without a stop signal")]
    BudgetExhausted(usize),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<ChainError>,
    },
}

impl ChainError {
    fn at(self, step: usize) -> Self {
        ChainError::AtStep {
            step,
            source: Box::new(self),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub max_steps: usize,
    pub stop_forcing: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            stop_forcing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub sub_question: String,
    pub focus: Vec<usize>,
    pub answer: String,
    pub stop: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub question: String,
    pub images: Vec<ImageRef>,
    pub steps: Vec<TraceStep>,
    pub final_answer: String,
    pub forced_stop: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ChainTrace {
    pub fn validate(&self, max_steps: usize) -> Result<(), String> {
        if self.steps.is_empty() {
            return Err("trace has no steps".into());
        }
        if self.steps.len() > max_steps {
            return Err(format!("{} steps exceed max_steps {max_steps}", self.steps.len()));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.focus.is_empty() || s.focus.iter().any(|&f| f >= self.images.len()) {
                return Err(format!("step {i}: focus {:?} invalid", s.focus));
            }
        }
        let last = self.steps.last().expect("non-empty");
        if !last.stop && !self.forced_stop {
            return Err("last step neither stopped nor forced".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub sub_question: String,
    /// Sorted, deduplicated, in range.
    pub focus: Vec<usize>,
    pub warnings: Vec<String>,
}

fn parse_object(text: &str, role: &'static str) -> Result<serde_json::Map<String, Value>, ChainError> {
    match extract_json(text) {
        Ok(Value::Object(o)) => Ok(o),
        Ok(_) => Err(ChainError::Unparseable {
            role,
            message: "expected a JSON object".into(),
        }),
        Err(e) => Err(ChainError::Unparseable {
            role,
            message: e.to_string(),
        }),
    }
}

/// Parses a planner completion and clamps its focus to `0..n_images`.
pub fn parse_plan(text: &str, n_images: usize) -> Result<Plan, ChainError> {
    let obj = parse_object(text, "chain_plan")?;
    let unparseable = |message: &str| ChainError::Unparseable {
        role: "chain_plan",
        message: message.into(),
    };
    let sub_question = obj
        .get("sub_question")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| unparseable("missing sub_question"))?
        .to_string();
    let raw: Vec<&Value> = match obj.get("focus") {
        Some(Value::Array(items)) => items.iter().collect(),
        Some(v @ Value::Number(_)) => vec![v],
        _ => return Err(unparseable("missing focus list")),
    };
    let mut focus = Vec::new();
    let mut warnings = Vec::new();
    for v in raw {
        match v.as_u64().map(|x| x as usize) {
            Some(i) if i < n_images => focus.push(i),
            _ => warnings.push(format!("focus entry {v} clamped")),
        }
    }
    focus.sort_unstable();
    focus.dedup();
    if focus.is_empty() {
        return Err(ChainError::EmptyFocus);
    }
    Ok(Plan {
        sub_question,
        focus,
        warnings,
    })
}

fn numbered(lines: impl Iterator<Item = String>) -> String {
    let body: Vec<String> = lines.enumerate().map(|(i, l)| format!("{}. {l}", i + 1)).collect();
    if body.is_empty() {
        "(none)".to_string()
    } else {
        body.join("\n")
    }
}

/// Proposes the next sub-question and the images it should look at.
pub async fn plan_step(
    question: &str,
    images: &[ImageRef],
    history: &[String],
    client: &ModelClient,
) -> Result<Plan, ChainError> {
    if images.is_empty() {
        return Err(ChainError::NoImages);
    }
    let text = format!(
        "Question: {question}\n\n{} images are attached, indexed 0 to {} in order.\n\nSub-questions asked so far:\n{}\n\n\
         Propose the next sub-question that brings the reasoning closer to the answer, and the indices of the images \
         needed to answer it. Reply in JSON: {{\"sub_question\": \"...\", \"focus\": [<image index>, ...]}}",
        images.len(),
        images.len() - 1,
        numbered(history.iter().cloned()),
    );
    let mut parts: Vec<MessagePart> = images.iter().map(|i| MessagePart::Image { image: i.clone() }).collect();
    parts.push(MessagePart::Text { text });
    let resp = client.complete(client.request(RoleTag::ChainPlan, parts)).await?;
    parse_plan(&resp.text, images.len())
}

/// Answers a sub-question with only the focused images attached.
pub async fn answer_step(sub_question: &str, focused: &[ImageRef], client: &ModelClient) -> Result<String, ChainError> {
    if focused.is_empty() {
        return Err(ChainError::EmptyFocus);
    }
    let mut parts: Vec<MessagePart> = focused
        .iter()
        .map(|i| MessagePart::Image { image: i.clone() })
        .collect();
    parts.push(MessagePart::Text {
        text: format!("Answer briefly using the attached images.\n\nQuestion: {sub_question}"),
    });
    let resp = client.complete(client.request(RoleTag::ChainAnswer, parts)).await?;
    let answer = resp.text.trim();
    if answer.is_empty() {
        return Err(ChainError::EmptyAnswer);
    }
    Ok(answer.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopDecision {
    pub stop: bool,
    pub final_answer: Option<String>,
}

pub fn parse_stop(text: &str) -> Result<StopDecision, ChainError> {
    let obj = parse_object(text, "chain_stop")?;
    let stop = match obj.get("stop") {
        Some(Value::Bool(b)) => *b,
        Some(Value::String(s)) if s.eq_ignore_ascii_case("true") => true,
        Some(Value::String(s)) if s.eq_ignore_ascii_case("false") => false,
        _ => {
            return Err(ChainError::Unparseable {
                role: "chain_stop",
                message: "missing boolean `stop`".into(),
            })
        }
    };
    let final_answer = obj
        .get("final_answer")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string);
    if stop && final_answer.is_none() {
        return Err(ChainError::MissingFinalAnswer);
    }
    Ok(StopDecision {
        stop,
        final_answer: if stop { final_answer } else { None },
    })
}

/// Asks whether the collected sub-answers settle the question. With
/// `force_final` the model must answer now.
pub async fn decide_stop(
    question: &str,
    qa: &[(String, String)],
    force_final: bool,
    client: &ModelClient,
) -> Result<StopDecision, ChainError> {
    if qa.is_empty() {
        return Err(ChainError::Unparseable {
            role: "chain_stop",
            message: "empty QA collection".into(),
        });
    }
    let pairs = numbered(qa.iter().map(|(q, a)| format!("Q: {q}\n   A: {a}")));
    let instruction = if force_final {
        "The step budget is spent. Give the final answer now. Reply in JSON: {\"stop\": true, \"final_answer\": \"...\"}"
    } else {
        "Decide whether these answers are enough to answer the question. Reply in JSON: \
         {\"stop\": true, \"final_answer\": \"...\"} if they are, otherwise {\"stop\": false}"
    };
    let text = format!("Question: {question}\n\nSub-questions and answers:\n{pairs}\n\n{instruction}");
    let resp = client
        .complete(client.request(RoleTag::ChainStop, vec![MessagePart::Text { text }]))
        .await?;
    let decision = parse_stop(&resp.text)?;
    if force_final && !decision.stop {
        return Err(ChainError::MissingFinalAnswer);
    }
    Ok(decision)
}

/// Runs plan, answer and stop decisions until the model stops or the budget
/// runs out.
pub async fn run_chain(
    question: &str,
    images: &[ImageRef],
    config: &ChainConfig,
    client: &ModelClient,
) -> Result<ChainTrace, ChainError> {
    if images.is_empty() {
        return Err(ChainError::NoImages);
    }
    if config.max_steps == 0 {
        return Err(ChainError::InvalidConfig);
    }
    let mut steps: Vec<TraceStep> = Vec::new();
    let mut warnings = Vec::new();
    let mut history: Vec<String> = Vec::new();
    let mut qa: Vec<(String, String)> = Vec::new();
    for i in 0..config.max_steps {
        let plan = plan_step(question, images, &history, client)
            .await
            .map_err(|e| e.at(i))?;
        warnings.extend(plan.warnings.iter().map(|w| format!("step {i}: {w}")));
        let focused: Vec<ImageRef> = plan.focus.iter().map(|&f| images[f].clone()).collect();
        let answer = answer_step(&plan.sub_question, &focused, client)
            .await
            .map_err(|e| e.at(i))?;
        history.push(plan.sub_question.clone());
        qa.push((plan.sub_question.clone(), answer.clone()));
        let decision = decide_stop(question, &qa, false, client).await.map_err(|e| e.at(i))?;
        steps.push(TraceStep {
            sub_question: plan.sub_question,
            focus: plan.focus,
            answer,
            stop: decision.stop,
        });
        if let Some(final_answer) = decision.final_answer {
            return Ok(ChainTrace {
                question: question.to_string(),
                images: images.to_vec(),
                steps,
                final_answer,
                forced_stop: false,
                warnings,
            });
        }
    }
    if !config.stop_forcing {
        return Err(ChainError::BudgetExhausted(config.max_steps));
    }
    let last = config.max_steps - 1;
    let decision = decide_stop(question, &qa, true, client).await.map_err(|e| e.at(last))?;
    Ok(ChainTrace {
        question: question.to_string(),
        images: images.to_vec(),
        steps,
        final_answer: decision.final_answer.expect("forced decision carries an answer"),
        forced_stop: true,
        warnings,
    })
}
