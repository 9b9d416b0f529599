//! End-to-end orchestration of the synthesis stages.

use thiserror::Error;

use crate::annotate::{annotate_edges, AnnotateOutcome};
use crate::backend::ModelClient;
use crate::connect::{connect, ConnectOutcome, DEFAULT_GROUP_SIZE};
use crate::extract::{extract_profiles, ExtractOutcome};
use crate::model::{ImageStore, Provenance, RelevanceGraph};
use crate::pathgen::{sample_length, sample_path, LengthDistribution, PathError, ReasoningPath};
use crate::question::{synthesize_batch, SynthesisOutcome};
use crate::rng;
use crate::stage::{QuarantineEntry, StageError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Samples `count` paths. Lengths come from `lengths`; when the graph has no
/// simple path of the drawn length the next shorter length is tried.
pub fn plan_paths(
    graph: &RelevanceGraph,
    count: usize,
    seed: u64,
    lengths: &LengthDistribution,
) -> Result<Vec<ReasoningPath>, PathError> {
    lengths.validate()?;
    if graph.nodes.is_empty() {
        return Err(PathError::EmptyGraph);
    }
    let mut r = rng::seeded(seed);
    let mut paths = Vec::with_capacity(count);
    for _ in 0..count {
        let mut k = sample_length(lengths, &mut r)?.min(graph.nodes.len());
        loop {
            match sample_path(graph, k, &mut r) {
                Ok(p) => {
                    paths.push(p);
                    break;
                }
                Err(PathError::NoPathFound { .. }) if k > 1 => k -= 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(paths)
}

/// Path sampling followed by question generation.
pub async fn synthesize(
    graph: &RelevanceGraph,
    client: &ModelClient,
    count: usize,
    seed: u64,
    lengths: &LengthDistribution,
    source: &str,
) -> Result<SynthesisOutcome, PipelineError> {
    graph.validate()?;
    let paths = plan_paths(graph, count, seed, lengths)?;
    Ok(synthesize_batch(&paths, graph, client, seed, source).await?)
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub group_size: usize,
    pub seed: u64,
    pub count: usize,
    pub lengths: LengthDistribution,
    pub source: String,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            group_size: DEFAULT_GROUP_SIZE,
            seed: 0,
            count: 1,
            lengths: LengthDistribution::default(),
            source: "pipeline".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub extract: ExtractOutcome,
    pub connect: ConnectOutcome,
    pub annotate: AnnotateOutcome,
    pub synthesis: SynthesisOutcome,
}

impl PipelineOutput {
    pub fn graph(&self) -> &RelevanceGraph {
        &self.annotate.graph
    }

    pub fn quarantine(&self) -> Vec<QuarantineEntry> {
        [
            &self.extract.quarantine,
            &self.connect.quarantine,
            &self.annotate.quarantine,
            &self.synthesis.quarantine,
        ]
        .into_iter()
        .flatten()
        .cloned()
        .collect()
    }
}

/// Runs extract, connect, annotate and synthesize over every image in the
/// store.
pub async fn run_pipeline(
    store: &ImageStore,
    client: &ModelClient,
    options: &PipelineOptions,
) -> Result<PipelineOutput, PipelineError> {
    let images = store.ingest_all()?;
    let extract = extract_profiles(&images, client, store).await?;
    let connect = connect(&extract.profiles, client, options.group_size, options.seed).await?;
    let pairs: Vec<(usize, usize)> = connect.pairs.iter().map(|p| (p.i, p.j)).collect();
    let provenance = Provenance {
        models: client.config().model_map(),
        created_at: None,
        seed: Some(options.seed),
    };
    let annotate = annotate_edges(&pairs, extract.profiles.clone(), client, store, provenance).await?;
    let synthesis = synthesize(
        &annotate.graph,
        client,
        options.count,
        options.seed,
        &options.lengths,
        &options.source,
    )
    .await?;
    Ok(PipelineOutput {
        extract,
        connect,
        annotate,
        synthesis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ImageRef, RelationEdge, RelationType};
    use crate::testutil::profile_for;
    use std::collections::BTreeMap;

    fn graph(n: usize, edges: &[(usize, usize)]) -> RelevanceGraph {
        let nodes = (0..n)
            .map(|i| profile_for(&ImageRef::new(format!("{i:064x}"), format!("{i}.png")), "v"))
            .collect();
        let edges = edges
            .iter()
            .map(|&(i, j)| RelationEdge::new(i, j, BTreeMap::from([(RelationType::Spatial, "s".into())])).unwrap())
            .collect();
        RelevanceGraph::new(nodes, edges, Provenance::default()).unwrap()
    }

    #[test]
    fn falls_back_to_shorter_paths() {
        let g = graph(4, &[(0, 1)]);
        let paths = plan_paths(&g, 50, 7, &LengthDistribution::fixed(4).unwrap()).unwrap();
        assert_eq!(paths.len(), 50);
        assert!(paths.iter().all(|p| p.len() == 2));
        let lone = graph(3, &[]);
        let paths = plan_paths(&lone, 5, 7, &LengthDistribution::default()).unwrap();
        assert!(paths.iter().all(|p| p.len() == 1));
    }

    #[test]
    fn deterministic_per_seed() {
        let g = graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]);
        let d = LengthDistribution::default();
        assert_eq!(plan_paths(&g, 20, 3, &d).unwrap(), plan_paths(&g, 20, 3, &d).unwrap());
        assert!(matches!(
            plan_paths(&graph(0, &[]), 1, 0, &d),
            Err(PathError::EmptyGraph)
        ));
    }
}
