//! Graph data model, validation, and block-diagonal batching.
//!
//! Edges are stored as directed pairs with enforced symmetry: every `(u, v)`
//! must appear together with `(v, u)`, each carrying its own (normally equal)
//! edge features. Labels are per-task with a present/absent mask so that
//! datasets with missing entries contribute zero loss on the holes.

use crate::error::{FtError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub num_nodes: usize,
    /// Directed edges; symmetric closure is an invariant.
    pub edges: Vec<(usize, usize)>,
    /// Per-node categorical indices, fixed arity across a dataset.
    pub node_feats: Vec<Vec<usize>>,
    /// Per-directed-edge categorical indices.
    pub edge_feats: Vec<Vec<usize>>,
    /// Per-task label values; masked-out entries hold 0.0.
    pub labels: Vec<f64>,
    /// Per-task presence mask.
    pub label_mask: Vec<bool>,
    pub split_key: Option<String>,
}

impl Graph {
    pub fn node_arity(&self) -> usize {
        self.node_feats.first().map_or(0, |f| f.len())
    }

    pub fn edge_arity(&self) -> usize {
        self.edge_feats.first().map_or(0, |f| f.len())
    }

    pub fn num_tasks(&self) -> usize {
        self.labels.len()
    }
}

/// Check every [`Graph`] invariant, reporting the index of the first
/// offending element.
pub fn validate(g: &Graph) -> Result<()> {
    if g.node_feats.len() != g.num_nodes {
        return Err(FtError::Graph(format!(
            "node_feats length {} != num_nodes {}",
            g.node_feats.len(),
            g.num_nodes
        )));
    }
    if g.edge_feats.len() != g.edges.len() {
        return Err(FtError::Graph(format!(
            "edge_feats length {} != edge count {}",
            g.edge_feats.len(),
            g.edges.len()
        )));
    }
    if g.labels.len() != g.label_mask.len() {
        return Err(FtError::Graph(format!(
            "label mask length {} != task count {}",
            g.label_mask.len(),
            g.labels.len()
        )));
    }
    let arity = g.node_arity();
    for (i, f) in g.node_feats.iter().enumerate() {
        if f.len() != arity {
            return Err(FtError::Graph(format!(
                "node {i} has feature arity {} != {arity}",
                f.len()
            )));
        }
    }
    let e_arity = g.edge_arity();
    for (i, f) in g.edge_feats.iter().enumerate() {
        if f.len() != e_arity {
            return Err(FtError::Graph(format!(
                "edge {i} has feature arity {} != {e_arity}",
                f.len()
            )));
        }
    }
    for (i, &(u, v)) in g.edges.iter().enumerate() {
        if u >= g.num_nodes || v >= g.num_nodes {
            return Err(FtError::Graph(format!(
                "edge {i} endpoint out of range: ({u}, {v}) on {} nodes",
                g.num_nodes
            )));
        }
    }
    // Symmetry: (u,v) requires (v,u) with identical features.
    use std::collections::HashMap;
    let mut by_pair: HashMap<(usize, usize), usize> = HashMap::new();
    for (i, &(u, v)) in g.edges.iter().enumerate() {
        by_pair.insert((u, v), i);
    }
    for (i, &(u, v)) in g.edges.iter().enumerate() {
        match by_pair.get(&(v, u)) {
            None => {
                return Err(FtError::Graph(format!(
                    "edge {i} ({u}, {v}) missing reverse edge"
                )))
            }
            Some(&j) => {
                if g.edge_feats[i] != g.edge_feats[j] {
                    return Err(FtError::Graph(format!(
                        "edge {i} ({u}, {v}) and its reverse disagree on features"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Graphs packed block-diagonally: node indices of graph `i` shifted by
/// `node_offsets[i]`, labels flattened row-per-graph.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub num_graphs: usize,
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub node_feats: Vec<Vec<usize>>,
    pub edge_feats: Vec<Vec<usize>>,
    /// Graph id of each node, dense in [0, num_graphs).
    pub graph_ids: Vec<usize>,
    /// Prefix offsets, length num_graphs + 1.
    pub node_offsets: Vec<usize>,
    /// Per-edge prefix offsets, length num_graphs + 1.
    pub edge_offsets: Vec<usize>,
    /// [num_graphs * num_tasks] row-major.
    pub labels: Vec<f64>,
    pub label_mask: Vec<bool>,
    pub num_tasks: usize,
}

/// Pack graphs into one block-diagonal batch. All graphs must agree on
/// feature arities and task count.
pub fn batch(graphs: &[&Graph]) -> Result<GraphBatch> {
    if graphs.is_empty() {
        return Err(FtError::Graph("batch of zero graphs".into()));
    }
    let arity = graphs[0].node_arity();
    let e_arity = graphs[0].edge_arity();
    let tasks = graphs[0].num_tasks();
    let mut b = GraphBatch {
        num_graphs: graphs.len(),
        num_nodes: 0,
        edges: Vec::new(),
        node_feats: Vec::new(),
        edge_feats: Vec::new(),
        graph_ids: Vec::new(),
        node_offsets: vec![0],
        edge_offsets: vec![0],
        labels: Vec::new(),
        label_mask: Vec::new(),
        num_tasks: tasks,
    };
    for (gi, g) in graphs.iter().enumerate() {
        if g.node_arity() != arity || g.edge_arity() != e_arity {
            return Err(FtError::Graph(format!(
                "graph {gi} feature arity mismatch: ({}, {}) vs ({arity}, {e_arity})",
                g.node_arity(),
                g.edge_arity()
            )));
        }
        if g.num_tasks() != tasks {
            return Err(FtError::Graph(format!(
                "graph {gi} has {} tasks, expected {tasks}",
                g.num_tasks()
            )));
        }
        let off = b.num_nodes;
        b.num_nodes += g.num_nodes;
        b.node_offsets.push(b.num_nodes);
        b.edges
            .extend(g.edges.iter().map(|&(u, v)| (u + off, v + off)));
        b.edge_offsets.push(b.edges.len());
        b.node_feats.extend(g.node_feats.iter().cloned());
        b.edge_feats.extend(g.edge_feats.iter().cloned());
        b.graph_ids.extend(std::iter::repeat(gi).take(g.num_nodes));
        b.labels.extend_from_slice(&g.labels);
        b.label_mask.extend_from_slice(&g.label_mask);
    }
    Ok(b)
}

impl GraphBatch {
    /// Invert [`batch`]: reproduce the original graphs (without split keys,
    /// which batches do not carry).
    pub fn unbatch(&self) -> Vec<Graph> {
        let mut out = Vec::with_capacity(self.num_graphs);
        for gi in 0..self.num_graphs {
            let (ns, ne) = (self.node_offsets[gi], self.node_offsets[gi + 1]);
            let (es, ee) = (self.edge_offsets[gi], self.edge_offsets[gi + 1]);
            out.push(Graph {
                num_nodes: ne - ns,
                edges: self.edges[es..ee]
                    .iter()
                    .map(|&(u, v)| (u - ns, v - ns))
                    .collect(),
                node_feats: self.node_feats[ns..ne].to_vec(),
                edge_feats: self.edge_feats[es..ee].to_vec(),
                labels: self.labels[gi * self.num_tasks..(gi + 1) * self.num_tasks].to_vec(),
                label_mask: self.label_mask[gi * self.num_tasks..(gi + 1) * self.num_tasks]
                    .to_vec(),
                split_key: None,
            });
        }
        out
    }

    /// Incoming-edge count per node (equals outgoing under symmetry).
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.num_nodes];
        for &(_, v) in &self.edges {
            deg[v] += 1;
        }
        deg
    }
}

/// Convenience for tests and generators: build a validated graph with
/// symmetric closure from undirected edge pairs.
pub fn graph_from_undirected(
    num_nodes: usize,
    undirected: &[(usize, usize, Vec<usize>)],
    node_feats: Vec<Vec<usize>>,
    labels: Vec<f64>,
    label_mask: Vec<bool>,
) -> Result<Graph> {
    let mut edges = Vec::with_capacity(undirected.len() * 2);
    let mut edge_feats = Vec::with_capacity(undirected.len() * 2);
    for (u, v, f) in undirected {
        edges.push((*u, *v));
        edge_feats.push(f.clone());
        if u != v {
            edges.push((*v, *u));
            edge_feats.push(f.clone());
        }
    }
    let g = Graph {
        num_nodes,
        edges,
        node_feats,
        edge_feats,
        labels,
        label_mask,
        split_key: None,
    };
    validate(&g)?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node_graph() -> Graph {
        Graph {
            num_nodes: 2,
            edges: vec![(0, 1), (1, 0)],
            node_feats: vec![vec![0], vec![1]],
            edge_feats: vec![vec![0], vec![0]],
            labels: vec![1.0],
            label_mask: vec![true],
            split_key: None,
        }
    }

    #[test]
    fn valid_symmetric_graph_passes() {
        validate(&two_node_graph()).unwrap();
    }

    #[test]
    fn endpoint_out_of_range_reported() {
        let mut g = two_node_graph();
        g.num_nodes = 3;
        g.node_feats.push(vec![0]);
        g.edges = vec![(0, 5), (5, 0)];
        let err = validate(&g).unwrap_err().to_string();
        assert!(err.contains("endpoint out of range"), "{err}");
    }

    #[test]
    fn asymmetric_edge_list_reported() {
        let mut g = two_node_graph();
        g.edges = vec![(0, 1)];
        g.edge_feats = vec![vec![0]];
        let err = validate(&g).unwrap_err().to_string();
        assert!(err.contains("missing reverse edge"), "{err}");
    }

    #[test]
    fn batch_of_one_is_identity() {
        let g = two_node_graph();
        let b = batch(&[&g]).unwrap();
        assert_eq!(b.node_offsets, vec![0, 2]);
        assert_eq!(b.edges, g.edges);
        assert_eq!(b.graph_ids, vec![0, 0]);
    }

    #[test]
    fn batch_shifts_indices_and_assigns_graph_ids() {
        let g1 = two_node_graph();
        let g2 = Graph {
            num_nodes: 3,
            edges: vec![(0, 1), (1, 0), (1, 2), (2, 1)],
            node_feats: vec![vec![0], vec![1], vec![2]],
            edge_feats: vec![vec![0]; 4],
            labels: vec![0.0],
            label_mask: vec![true],
            split_key: None,
        };
        let b = batch(&[&g1, &g2]).unwrap();
        assert_eq!(b.num_nodes, 5);
        assert_eq!(b.graph_ids, vec![0, 0, 1, 1, 1]);
        assert!(b.edges.contains(&(2, 3)) && b.edges.contains(&(3, 4)));
    }

    #[test]
    fn batch_unbatch_round_trip() {
        let g1 = two_node_graph();
        let mut g2 = two_node_graph();
        g2.labels = vec![0.0];
        let b = batch(&[&g1, &g2]).unwrap();
        let back = b.unbatch();
        assert_eq!(back[0], g1);
        assert_eq!(back[1], g2);
    }

    #[test]
    fn arity_mismatch_rejected() {
        let g1 = two_node_graph();
        let mut g2 = two_node_graph();
        g2.node_feats = vec![vec![0, 1], vec![1, 0]];
        assert!(batch(&[&g1, &g2]).is_err());
    }
}
