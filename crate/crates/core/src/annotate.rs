//! Relevance annotation: types each candidate pair as temporal, spatial
//! and/or semantic, producing the relevance graph. Pairs the model finds
//! unrelated are pruned.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::Value;

use crate::backend::{MessagePart, ModelClient, ModelRequest, RoleTag};
use crate::json::extract_json;
use crate::model::{
    canonical_pair, ImageProfile, ImageRef, ImageStore, ModelError, Provenance, RelationEdge, RelationType,
    RelevanceGraph,
};
use crate::stage::{QuarantineEntry, StageError};

pub const ANNOTATION_PROMPT: &str = "You are a professional visual content analyst skilled in analyzing relationships between image pairs, including temporal, spatial, and semantic connections.

    User will provide you with two images. Please generate relationship annotations between them based on the following requirements:

    Task Requirements:

    1. Temporal Relationship:
       Identify if there is a clear sequence of events between Image A and Image B.
         - First, analyze whether the scenes or events in the two images represent a clear chronological order.
         - If there is a clear temporal sequence, describe the progression or transition between the two images, noting the overall process.

    2. Spatial Relationship:
       Analyze if there are any spatial connections or changes in scene or object positions between Image A and Image B.
         - Check if both images depict the same scene or objects in similar layouts.
         - If shared objects or settings are present, compare their positions, orientations, or size differences in both images.

    3. Semantic Relationship:
       Evaluate if there is a thematic, emotional, or causal connection between Image A and Image B.
         - Determine if the themes, emotional tones, or meaning presented in both images are consistent or related.
         - Assess if there is a cause-and-effect relationship or logical connection between the two images.

    Output Format should be in JSON.";

pub const ANNOTATION_JSON_SCHEMA: &str = r#"The first attached image is Image A and the second is Image B. Use exactly this JSON structure:
{"temporal": {"present": true|false, "description": "..."}, "spatial": {"present": true|false, "description": "..."}, "semantic": {"present": true|false, "description": "..."}}
Set "present" to false and leave "description" empty when a relationship does not hold."#;

pub fn render_annotation_prompt(
    client: &ModelClient,
    a: &ImageRef,
    b: &ImageRef,
    store: &ImageStore,
) -> Result<ModelRequest, StageError> {
    if a.id == b.id {
        return Err(StageError::Precondition(format!(
            "degenerate pair: image {} twice",
            a.id
        )));
    }
    store.resolve(a)?;
    store.resolve(b)?;
    Ok(client.request(
        RoleTag::Annotate,
        vec![
            MessagePart::Text {
                text: format!("{ANNOTATION_PROMPT}\n\n{ANNOTATION_JSON_SCHEMA}"),
            },
            MessagePart::Image { image: a.clone() },
            MessagePart::Image { image: b.clone() },
        ],
    ))
}

fn relation_key(k: &str) -> Option<RelationType> {
    let k = k.trim().to_ascii_lowercase();
    let base = k
        .strip_suffix("_relationship")
        .or_else(|| k.strip_suffix(" relationship"))
        .unwrap_or(&k);
    RelationType::ALL.into_iter().find(|t| t.as_str() == base)
}

fn text_of(v: Option<&Value>) -> String {
    match v {
        Some(Value::String(s)) => s.trim().to_string(),
        _ => String::new(),
    }
}

fn affirmed(v: &Value) -> Option<String> {
    match v {
        Value::Bool(true) => Some(String::new()),
        Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
        Value::Object(m) => {
            let description = text_of(m.get("description"));
            match m.get("present") {
                Some(Value::Bool(true)) => Some(description),
                Some(Value::Bool(false)) => None,
                _ => (!description.is_empty()).then_some(description),
            }
        }
        _ => None,
    }
}

/// Reads `{temporal|spatial|semantic: {present, description}}`. A relation is
/// affirmed by `present: true`, or, when `present` is absent, by a non-empty
/// description (a bare `true` or non-empty string also counts).
pub fn parse_relations(text: &str) -> Result<BTreeMap<RelationType, String>, StageError> {
    let value = extract_json(text)?;
    let obj = value
        .as_object()
        .ok_or_else(|| StageError::Unparseable("relation completion is not a JSON object".into()))?;
    let obj = match obj.get("relations").and_then(Value::as_object) {
        Some(inner) => inner,
        None => obj,
    };
    Ok(obj
        .iter()
        .filter_map(|(k, v)| Some((relation_key(k)?, affirmed(v)?)))
        .collect())
}

#[derive(Debug, Clone)]
pub struct AnnotateOutcome {
    pub graph: RelevanceGraph,
    /// Repeated input pairs collapsed into one edge.
    pub duplicates: usize,
    /// Pairs for which the model affirmed no relation.
    pub unrelated: usize,
    /// Pairs whose call or parse failed.
    pub failed: usize,
    pub quarantine: Vec<QuarantineEntry>,
}

impl AnnotateOutcome {
    /// Every input pair that did not become an edge.
    pub fn dropped(&self) -> usize {
        self.duplicates + self.unrelated + self.failed
    }
}

/// Annotates every candidate pair over `nodes` and assembles the graph.
/// Pair indices are validated before any model call.
pub async fn annotate_edges(
    pairs: &[(usize, usize)],
    nodes: Vec<ImageProfile>,
    client: &ModelClient,
    store: &ImageStore,
    provenance: Provenance,
) -> Result<AnnotateOutcome, StageError> {
    let mut unique = BTreeSet::new();
    for &(i, j) in pairs {
        let p = canonical_pair(i, j)?;
        if p.1 >= nodes.len() {
            return Err(StageError::Model(ModelError::InvalidEdge {
                i,
                j,
                reason: format!("index out of range for {} nodes", nodes.len()),
            }));
        }
        unique.insert(p);
    }
    let duplicates = pairs.len() - unique.len();
    let unique: Vec<(usize, usize)> = unique.into_iter().collect();

    let mut quarantine = Vec::new();
    let mut failed = 0;
    let mut sent = Vec::new();
    let mut requests = Vec::new();
    for &(i, j) in &unique {
        match render_annotation_prompt(client, &nodes[i].image, &nodes[j].image, store) {
            Ok(r) => {
                sent.push((i, j));
                requests.push(r);
            }
            Err(e) => {
                failed += 1;
                quarantine.push(QuarantineEntry::new(format!("{i}-{j}"), "annotate", "", e));
            }
        }
    }
    let responses = if requests.is_empty() {
        Vec::new()
    } else {
        client.run_batch(requests).await?
    };

    let mut edges = Vec::new();
    let mut unrelated = 0;
    for ((i, j), resp) in sent.into_iter().zip(responses) {
        let item = format!("{i}-{j}");
        match resp
            .map_err(StageError::from)
            .map(|r| (parse_relations(&r.text), r.text))
        {
            Ok((Ok(rels), _)) if rels.is_empty() => unrelated += 1,
            Ok((Ok(rels), _)) => edges.push(RelationEdge::new(i, j, rels)?),
            Ok((Err(e), raw)) => {
                failed += 1;
                quarantine.push(QuarantineEntry::new(item, "annotate", raw, e));
            }
            Err(e) => {
                failed += 1;
                quarantine.push(QuarantineEntry::new(item, "annotate", "", e));
            }
        }
    }
    if !unique.is_empty() && failed == unique.len() {
        return Err(StageError::AllFailed {
            stage: "annotate".into(),
            count: unique.len(),
        });
    }
    let graph = RelevanceGraph::new(nodes, edges, provenance)?;
    Ok(AnnotateOutcome {
        graph,
        duplicates,
        unrelated,
        failed,
        quarantine,
    })
}
