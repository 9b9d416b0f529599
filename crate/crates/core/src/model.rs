//! Shared domain types: image references, profiles, typed relation edges and
//! the relevance graph, plus the identifier and validation primitives every
//! stage relies on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Attribute keys accepted on an [`ObjectEntry`]. Anything else is folded
/// into `other`.
pub const ATTRIBUTE_VOCABULARY: [&str; 9] = [
    "quantity", "color", "size", "shape", "material", "texture", "location", "state", "other",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("degenerate pair: both indices are {0}")]
    DegeneratePair(usize),
    #[error("empty input: content id requires at least one byte")]
    EmptyInput,
    #[error("path escapes the image store root: {0}")]
    PathTraversal(String),
    #[error("missing image {id} at {path}")]
    MissingImage { id: String, path: String },
    #[error("invalid profile for image {id}: {reason}")]
    InvalidProfile { id: String, reason: String },
    #[error("invalid edge ({i}, {j}): {reason}")]
    InvalidEdge { i: usize, j: usize, reason: String },
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

/// Orders a pair of distinct node indices as `(lo, hi)`.
pub fn canonical_pair(i: usize, j: usize) -> Result<(usize, usize), ModelError> {
    if i == j {
        return Err(ModelError::DegeneratePair(i));
    }
    Ok((i.min(j), i.max(j)))
}

/// SHA-256 hex digest of `bytes`.
pub fn content_id(bytes: &[u8]) -> Result<String, ModelError> {
    if bytes.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// True when `s` looks like a content id (64 lowercase hex characters).
pub fn is_content_id(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// Serializes `value` with lexicographically ordered object keys.
///
/// Struct fields are routed through `serde_json::Value`, whose map type is a
/// `BTreeMap`, so the output is independent of declaration order.
pub fn canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

/// MIME type from a file extension.
pub fn image_mime(path: &str) -> &'static str {
    let ext = Path::new(path)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "webp" => "image/webp",
        "bmp" => "image/bmp",
        "tiff" => "image/tiff",
        _ => "application/octet-stream",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, path: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            width: None,
            height: None,
        }
    }
}

const IMAGE_EXTENSIONS: [&str; 7] = ["png", "jpg", "jpeg", "gif", "webp", "bmp", "tiff"];

/// A directory of images addressed by paths relative to its root.
#[derive(Debug, Clone)]
pub struct ImageStore {
    root: PathBuf,
}

impl ImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Joins a store-relative path onto the root, rejecting absolute paths
    /// and `..` components.
    pub fn resolve_path(&self, rel: &str) -> Result<PathBuf, ModelError> {
        let p = Path::new(rel);
        if rel.is_empty()
            || p.components()
                .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir))
        {
            return Err(ModelError::PathTraversal(rel.to_string()));
        }
        Ok(self.root.join(p))
    }

    /// Resolves an image and checks that the file exists.
    pub fn resolve(&self, image: &ImageRef) -> Result<PathBuf, ModelError> {
        let full = self.resolve_path(&image.path)?;
        if !full.is_file() {
            return Err(ModelError::MissingImage {
                id: image.id.clone(),
                path: image.path.clone(),
            });
        }
        Ok(full)
    }

    pub fn read(&self, image: &ImageRef) -> Result<Vec<u8>, ModelError> {
        let full = self.resolve(image)?;
        std::fs::read(&full).map_err(|e| ModelError::Io {
            path: full.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Builds an [`ImageRef`] for a file given relative to the store root.
    pub fn ingest_file(&self, rel: &str) -> Result<ImageRef, ModelError> {
        let full = self.resolve_path(rel)?;
        let bytes = std::fs::read(&full).map_err(|e| ModelError::Io {
            path: full.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(ImageRef::new(content_id(&bytes)?, rel.replace('\\', "/")))
    }

    /// Every image file under the root, recursively, sorted by relative path.
    pub fn ingest_all(&self) -> Result<Vec<ImageRef>, ModelError> {
        let mut rels = Vec::new();
        collect_images(&self.root, &self.root, &mut rels)?;
        rels.sort();
        rels.iter().map(|r| self.ingest_file(r)).collect()
    }
}

fn collect_images(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), ModelError> {
    let io = |e: std::io::Error| ModelError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    };
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_dir() {
            collect_images(root, &path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        {
            if let Ok(rel) = path.strip_prefix(root) {
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub name: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl ObjectEntry {
    pub fn validate(&self) -> Result<(), String> {
        if self.name.trim().is_empty() {
            return Err("object name is empty".into());
        }
        if let Some(k) = self
            .attributes
            .keys()
            .find(|k| !ATTRIBUTE_VOCABULARY.contains(&k.as_str()))
        {
            return Err(format!("attribute `{k}` is outside the vocabulary"));
        }
        Ok(())
    }
}

/// Structured textual profile of one image: a node of the relevance graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageProfile {
    pub image: ImageRef,
    pub overall_view: String,
    #[serde(default)]
    pub background: String,
    #[serde(default)]
    pub objects: Vec<ObjectEntry>,
    #[serde(default)]
    pub interactions: String,
    #[serde(default)]
    pub text_content: String,
    #[serde(default)]
    pub atmosphere: String,
    pub narrative: String,
}

impl ImageProfile {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| ModelError::InvalidProfile {
            id: self.image.id.clone(),
            reason,
        };
        if self.overall_view.trim().is_empty() {
            return Err(fail("overall_view is empty".into()));
        }
        if self.narrative.trim().is_empty() {
            return Err(fail("narrative is empty".into()));
        }
        for o in &self.objects {
            o.validate().map_err(fail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationType {
    Temporal,
    Spatial,
    Semantic,
}

impl RelationType {
    pub const ALL: [RelationType; 3] = [Self::Temporal, Self::Spatial, Self::Semantic];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Temporal => "temporal",
            Self::Spatial => "spatial",
            Self::Semantic => "semantic",
        }
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A connected image pair with its typed relations. The map key set makes
/// "each type at most once" structural.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationEdge {
    pub pair: (usize, usize),
    pub relations: BTreeMap<RelationType, String>,
}

impl RelationEdge {
    pub fn new(i: usize, j: usize, relations: BTreeMap<RelationType, String>) -> Result<Self, ModelError> {
        let pair = canonical_pair(i, j).map_err(|_| ModelError::InvalidEdge {
            i,
            j,
            reason: "self loop".into(),
        })?;
        let edge = Self { pair, relations };
        edge.validate_shape()?;
        Ok(edge)
    }

    fn validate_shape(&self) -> Result<(), ModelError> {
        let (i, j) = self.pair;
        if i >= j {
            return Err(ModelError::InvalidEdge {
                i,
                j,
                reason: "pair is not canonical (i < j)".into(),
            });
        }
        if self.relations.is_empty() {
            return Err(ModelError::InvalidEdge {
                i,
                j,
                reason: "no relations".into(),
            });
        }
        Ok(())
    }

    pub fn touches(&self, a: usize, b: usize) -> bool {
        self.pair == (a.min(b), a.max(b))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Stage name to model identifier.
    #[serde(default)]
    pub models: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceGraph {
    pub nodes: Vec<ImageProfile>,
    pub edges: Vec<RelationEdge>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl RelevanceGraph {
    /// Builds a graph and checks every structural invariant.
    pub fn new(nodes: Vec<ImageProfile>, edges: Vec<RelationEdge>, provenance: Provenance) -> Result<Self, ModelError> {
        let g = Self {
            nodes,
            edges,
            provenance,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            e.validate_shape()?;
            let (i, j) = e.pair;
            if j >= self.nodes.len() {
                return Err(ModelError::InvalidEdge {
                    i,
                    j,
                    reason: format!("index out of range for {} nodes", self.nodes.len()),
                });
            }
            if !seen.insert(e.pair) {
                return Err(ModelError::DuplicateEdge(i, j));
            }
        }
        Ok(())
    }

    /// Sorted neighbor lists for every node.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            let (i, j) = e.pair;
            if j < adj.len() {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Index into `edges` of the edge joining `a` and `b`.
    pub fn edge_index(&self, a: usize, b: usize) -> Option<usize> {
        self.edges.iter().position(|e| e.touches(a, b))
    }
}
