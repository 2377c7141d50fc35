//! Question/KC bipartite graph and same-type hop distances.
//!
//! The hop distance between two questions is the number of KCs on a shortest
//! path between them (edge length / 2); symmetrically for two KCs. Edges are
//! unweighted, so breadth-first search gives exact shortest paths.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::CanonicalDataset;
use crate::error::{Result, TgmnError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Question,
    Kc,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BipartiteGraph {
    num_questions: usize,
    num_kcs: usize,
    /// KCs of each question, sorted.
    question_adj: Vec<Vec<usize>>,
    /// Questions of each KC, sorted.
    kc_adj: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HopDistance {
    Hops(usize),
    Unreachable,
}

impl HopDistance {
    pub fn hops(self) -> Option<usize> {
        match self {
            HopDistance::Hops(h) => Some(h),
            HopDistance::Unreachable => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopPair {
    pub node_a: usize,
    pub node_b: usize,
    pub node_type: NodeType,
    pub hops: usize,
}

impl BipartiteGraph {
    /// Builds the graph from `(question, kc)` membership edges. Duplicate edges
    /// collapse; every question must have at least one KC.
    pub fn from_edges(num_questions: usize, num_kcs: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut question_adj = vec![BTreeSet::new(); num_questions];
        let mut kc_adj = vec![BTreeSet::new(); num_kcs];
        for &(q, c) in edges {
            if q >= num_questions || c >= num_kcs {
                return Err(TgmnError::Argument(format!("edge ({q}, {c}) out of range")));
            }
            question_adj[q].insert(c);
            kc_adj[c].insert(q);
        }
        if let Some(q) = question_adj.iter().position(BTreeSet::is_empty) {
            return Err(TgmnError::Argument(format!("question {q} has no KC edge")));
        }
        Ok(BipartiteGraph {
            num_questions,
            num_kcs,
            question_adj: question_adj.into_iter().map(|s| s.into_iter().collect()).collect(),
            kc_adj: kc_adj.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn num_questions(&self) -> usize {
        self.num_questions
    }

    pub fn num_kcs(&self) -> usize {
        self.num_kcs
    }

    pub fn num_nodes(&self, node_type: NodeType) -> usize {
        match node_type {
            NodeType::Question => self.num_questions,
            NodeType::Kc => self.num_kcs,
        }
    }

    pub fn kcs_of(&self, question: usize) -> &[usize] {
        &self.question_adj[question]
    }

    pub fn questions_of(&self, kc: usize) -> &[usize] {
        &self.kc_adj[kc]
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.question_adj
            .iter()
            .enumerate()
            .flat_map(|(q, kcs)| kcs.iter().map(move |&c| (q, c)))
            .collect()
    }

    fn adjacency(&self, node_type: NodeType) -> (&[Vec<usize>], &[Vec<usize>]) {
        match node_type {
            NodeType::Question => (&self.question_adj, &self.kc_adj),
            NodeType::Kc => (&self.kc_adj, &self.question_adj),
        }
    }

    /// Hop distances from `source` to every node of the same type.
    pub fn hops_from(&self, source: usize, node_type: NodeType) -> Vec<Option<usize>> {
        let (own, other) = self.adjacency(node_type);
        let mut dist = vec![None; own.len()];
        let mut other_seen = vec![false; other.len()];
        let mut queue = VecDeque::new();
        dist[source] = Some(0);
        queue.push_back(source);
        while let Some(node) = queue.pop_front() {
            let d = dist[node].unwrap();
            for &mid in &own[node] {
                if std::mem::replace(&mut other_seen[mid], true) {
                    continue;
                }
                for &next in &other[mid] {
                    if dist[next].is_none() {
                        dist[next] = Some(d + 1);
                        queue.push_back(next);
                    }
                }
            }
        }
        dist
    }

    /// Edge-list CSV `question_id,kc_id`.
    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut out = String::from("question_id,kc_id\n");
        for (q, c) in self.edges() {
            writeln!(out, "{q},{c}").unwrap();
        }
        fs::write(path, out).map_err(|e| TgmnError::io(path, e))
    }
}

pub fn build_bipartite(dataset: &CanonicalDataset) -> Result<BipartiteGraph> {
    if dataset.question_kcs.is_empty() {
        return Err(TgmnError::Argument("dataset has an empty question-KC mapping".into()));
    }
    let edges: Vec<(usize, usize)> = dataset
        .question_kcs
        .iter()
        .enumerate()
        .flat_map(|(q, kcs)| kcs.iter().map(move |&c| (q, c)))
        .collect();
    BipartiteGraph::from_edges(dataset.num_questions, dataset.num_kcs, &edges)
}

pub fn hop_distance(graph: &BipartiteGraph, node_a: usize, node_b: usize, node_type: NodeType) -> Result<HopDistance> {
    let n = graph.num_nodes(node_type);
    if node_a >= n || node_b >= n {
        return Err(TgmnError::Argument(format!(
            "{node_type:?} node ({node_a}, {node_b}) out of range {n}"
        )));
    }
    Ok(match graph.hops_from(node_a, node_type)[node_b] {
        Some(h) => HopDistance::Hops(h),
        None => HopDistance::Unreachable,
    })
}

/// Samples `count` distinct-node pairs uniformly (with replacement), keeping
/// only reachable pairs with `1 <= hops <= max_hops`.
pub fn sample_hop_pairs(
    graph: &BipartiteGraph,
    node_type: NodeType,
    count: usize,
    max_hops: usize,
    seed: u64,
) -> Result<Vec<HopPair>> {
    let n = graph.num_nodes(node_type);
    if n < 2 {
        return Err(TgmnError::Argument(format!("need at least 2 {node_type:?} nodes, graph has {n}")));
    }
    if count == 0 || max_hops == 0 {
        return Err(TgmnError::Argument("count and max_hops must be >= 1".into()));
    }
    // A valid pair exists iff some other-type node links two same-type nodes.
    let (_, other) = graph.adjacency(node_type);
    if other.iter().all(|nbrs| nbrs.len() < 2) {
        return Err(TgmnError::Argument(format!("no connected {node_type:?} pairs in graph")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache: HashMap<usize, Vec<Option<usize>>> = HashMap::new();
    let mut pairs = Vec::with_capacity(count);
    let max_attempts = count.saturating_mul(10_000).max(100_000);
    let mut attempts = 0usize;
    while pairs.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(TgmnError::Argument(format!(
                "only {} of {count} valid {node_type:?} pairs found after {max_attempts} draws",
                pairs.len()
            )));
        }
        let a = rng.gen_range(0..n);
        let mut b = rng.gen_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let dist = cache.entry(a).or_insert_with(|| graph.hops_from(a, node_type));
        if let Some(h) = dist[b] {
            if h <= max_hops {
                pairs.push(HopPair {
                    node_a: a,
                    node_b: b,
                    node_type,
                    hops: h,
                });
            }
        }
    }
    Ok(pairs)
}
