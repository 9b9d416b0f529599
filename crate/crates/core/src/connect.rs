//! Pair connection: the model proposes related image pairs among profile
//! summaries. Profiles are split into shuffled groups of bounded size and
//! pairs across groups are never proposed.

use std::collections::BTreeSet;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{MessagePart, ModelClient, ModelRequest, RoleTag};
use crate::json::extract_json;
use crate::model::{canonical_pair, ImageProfile};
use crate::rng;
use crate::stage::{QuarantineEntry, StageError};

pub const DEFAULT_GROUP_SIZE: usize = 8;

pub const CONNECTION_PROMPT: &str = "You are a professional visual content analyst skilled in analyzing image pairs that exhibit clear correlations.

    User will provide a set of structured descriptions corresponding to images. Based on these descriptions, you are required to analyze the images through an object-oriented or event-oriented approach to identify which image pairs are most strongly correlated. Specifically, you should focus on determining whether there are common objects or associated events/themes between the images. By evaluating the co-occurrence of objects or the relationships between events or topics, return the correlated image pairs as a tuple.";

pub const CONNECTION_CRITERIA: &str = "Connect two images only if at least one criterion holds:
(1) Object-oriented: the images share co-occurring objects.
(2) Event-oriented: the images depict shared or related events.";

/// Candidate pairs for one group, in local indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionProposal {
    pub group: Vec<usize>,
    pub pairs: BTreeSet<(usize, usize)>,
}

impl ConnectionProposal {
    /// Maps local pair indices back to global node indices.
    pub fn global_pairs(&self) -> BTreeSet<(usize, usize)> {
        self.pairs
            .iter()
            .filter_map(|&(a, b)| {
                let (ga, gb) = (*self.group.get(a)?, *self.group.get(b)?);
                canonical_pair(ga, gb).ok()
            })
            .collect()
    }
}

/// One persisted candidate edge (`pairs.jsonl`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandidatePair {
    pub i: usize,
    pub j: usize,
    pub group_id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPairs {
    pub pairs: BTreeSet<(usize, usize)>,
    /// Self pairs, out-of-range indices, malformed items and duplicates.
    pub dropped: usize,
}

/// Shuffles `0..node_count` with `seed` and chunks it into groups of at
/// most `group_size`.
pub fn batch_groups(node_count: usize, group_size: usize, seed: u64) -> Result<Vec<Vec<usize>>, StageError> {
    if group_size < 2 {
        return Err(StageError::Precondition("group_size must be >= 2".into()));
    }
    let mut order: Vec<usize> = (0..node_count).collect();
    rng::shuffle(&mut rng::seeded(seed), &mut order);
    Ok(order.chunks(group_size).map(<[usize]>::to_vec).collect())
}

fn summarize(idx: usize, p: &ImageProfile) -> String {
    let mut s = format!("Image {idx}:\n- Overall view: {}\n", p.overall_view);
    if !p.objects.is_empty() {
        let names: Vec<&str> = p.objects.iter().map(|o| o.name.as_str()).collect();
        s.push_str(&format!("- Objects: {}\n", names.join(", ")));
    }
    for (label, v) in [
        ("Background", &p.background),
        ("Interactions", &p.interactions),
        ("Text", &p.text_content),
        ("Atmosphere", &p.atmosphere),
        ("Description", &p.narrative),
    ] {
        if !v.is_empty() {
            s.push_str(&format!("- {label}: {v}\n"));
        }
    }
    s
}

pub fn render_connection_prompt(client: &ModelClient, profiles: &[&ImageProfile]) -> Result<ModelRequest, StageError> {
    if profiles.len() < 2 {
        return Err(StageError::Precondition(
            "connection needs at least two profiles".into(),
        ));
    }
    let k = profiles.len();
    let summaries: String = profiles
        .iter()
        .enumerate()
        .map(|(i, p)| summarize(i, p))
        .collect::<Vec<_>>()
        .join("\n");
    let text = format!(
        "{CONNECTION_PROMPT}\n\n{CONNECTION_CRITERIA}\n\nImage descriptions (indices 0 to {last}):\n\n{summaries}\n\
         Output a JSON list of index pairs, e.g. [[0, 1], [1, 3]], using indices in [0, {k}) with i != j. \
         Output [] if no pair is related. Output only the JSON list.",
        last = k - 1
    );
    Ok(client.request(RoleTag::Connect, vec![MessagePart::Text { text }]))
}

fn as_index(v: &Value) -> Option<i128> {
    v.as_u64().map(i128::from).or_else(|| v.as_i64().map(i128::from))
}

fn pair_items(v: &Value) -> Option<&Vec<Value>> {
    match v {
        Value::Array(items) => Some(items),
        Value::Object(map) => map
            .get("pairs")
            .or_else(|| map.values().find(|v| v.is_array()))
            .and_then(Value::as_array),
        _ => None,
    }
}

fn tuple_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)").expect("valid regex"))
}

/// Extracts canonical pairs in `[0, k)` from a completion. Accepts a JSON
/// list of two-element integer lists (optionally under a `pairs` key) or,
/// failing that, literal `(i, j)` tuples.
pub fn parse_pairs(text: &str, k: usize) -> Result<ParsedPairs, StageError> {
    if k < 2 {
        return Err(StageError::Precondition("group size must be >= 2".into()));
    }
    let raw: Vec<Option<(i128, i128)>> = match extract_json(text).ok().as_ref().and_then(pair_items) {
        Some(items) => items
            .iter()
            .map(|item| match item.as_array().map(Vec::as_slice) {
                Some([a, b]) => Some((as_index(a)?, as_index(b)?)),
                _ => None,
            })
            .collect(),
        None => {
            let tuples: Vec<_> = tuple_regex()
                .captures_iter(text)
                .map(|c| Some((c[1].parse().ok()?, c[2].parse().ok()?)))
                .collect();
            if tuples.is_empty() {
                return Err(StageError::Unparseable("no pair list found".into()));
            }
            tuples
        }
    };
    let mut pairs = BTreeSet::new();
    let mut dropped = 0;
    for item in raw {
        let kept = item.and_then(|(a, b)| {
            let in_range = |x: i128| x >= 0 && x < k as i128;
            if a == b || !in_range(a) || !in_range(b) {
                return None;
            }
            let p = canonical_pair(a as usize, b as usize).ok()?;
            pairs.insert(p).then_some(())
        });
        if kept.is_none() {
            dropped += 1;
        }
    }
    Ok(ParsedPairs { pairs, dropped })
}

#[derive(Debug, Clone, Default)]
pub struct ConnectOutcome {
    pub pairs: Vec<CandidatePair>,
    pub proposals: Vec<ConnectionProposal>,
    pub dropped: usize,
    pub quarantine: Vec<QuarantineEntry>,
}

/// Proposes candidate edges over all profiles, one model call per group.
pub async fn connect(
    profiles: &[ImageProfile],
    client: &ModelClient,
    group_size: usize,
    seed: u64,
) -> Result<ConnectOutcome, StageError> {
    if profiles.len() < 2 {
        return Err(StageError::Precondition(
            "connection needs at least two profiles".into(),
        ));
    }
    let groups: Vec<(usize, Vec<usize>)> = batch_groups(profiles.len(), group_size, seed)?
        .into_iter()
        .enumerate()
        .filter(|(_, g)| g.len() >= 2)
        .collect();
    let mut requests = Vec::with_capacity(groups.len());
    for (_, g) in &groups {
        let members: Vec<&ImageProfile> = g.iter().map(|&i| &profiles[i]).collect();
        requests.push(render_connection_prompt(client, &members)?);
    }
    let responses = client.run_batch(requests).await?;

    let mut out = ConnectOutcome::default();
    let mut seen = BTreeSet::new();
    for ((gid, group), resp) in groups.iter().zip(responses) {
        let item_id = format!("group:{gid}");
        let resp = match resp {
            Ok(r) => r,
            Err(e) => {
                out.quarantine.push(QuarantineEntry::new(item_id, "connect", "", e));
                continue;
            }
        };
        match parse_pairs(&resp.text, group.len()) {
            Ok(parsed) => {
                out.dropped += parsed.dropped;
                let proposal = ConnectionProposal {
                    group: group.clone(),
                    pairs: parsed.pairs,
                };
                for (i, j) in proposal.global_pairs() {
                    if seen.insert((i, j)) {
                        out.pairs.push(CandidatePair { i, j, group_id: *gid });
                    }
                }
                out.proposals.push(proposal);
            }
            Err(e) => out
                .quarantine
                .push(QuarantineEntry::new(item_id, "connect", resp.text, e)),
        }
    }
    if out.proposals.is_empty() {
        return Err(StageError::AllFailed {
            stage: "connect".into(),
            count: groups.len(),
        });
    }
    out.pairs.sort();
    Ok(out)
}
