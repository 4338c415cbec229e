use std::collections::{BTreeSet, VecDeque};

use thiserror::Error;

use crate::model::{Adjacency, NodeId, NodeLookup, Path};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("self-loop on {0}")]
    SelfLoop(NodeId),
    #[error("node index {0} is out of range")]
    UnknownNode(usize),
}

/// Undirected adjacency over node indices.
#[derive(Clone, Debug)]
pub struct Topology {
    nodes: Vec<NodeId>,
    adj: Vec<BTreeSet<usize>>,
}

impl Topology {
    pub fn new(nodes: Vec<NodeId>) -> Self {
        let adj = vec![BTreeSet::new(); nodes.len()];
        Topology { nodes, adj }
    }

    /// Unit-disk graph: nodes closer than `radius` are adjacent.
    pub fn geometric(nodes: Vec<NodeId>, positions: &[(f64, f64)], radius: f64) -> Self {
        let mut t = Topology::new(nodes);
        for i in 0..positions.len() {
            for j in i + 1..positions.len() {
                let (dx, dy) = (positions[i].0 - positions[j].0, positions[i].1 - positions[j].1);
                if (dx * dx + dy * dy).sqrt() <= radius {
                    t.adj[i].insert(j);
                    t.adj[j].insert(i);
                }
            }
        }
        t
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &NodeId {
        &self.nodes[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, i: usize) -> Result<(), TopologyError> {
        if i < self.nodes.len() {
            Ok(())
        } else {
            Err(TopologyError::UnknownNode(i))
        }
    }

    /// Returns whether the edge was new.
    pub fn add_edge(&mut self, a: usize, b: usize) -> Result<bool, TopologyError> {
        self.check(a)?;
        self.check(b)?;
        if a == b {
            return Err(TopologyError::SelfLoop(self.nodes[a].clone()));
        }
        self.adj[b].insert(a);
        Ok(self.adj[a].insert(b))
    }

    /// Returns whether the edge existed.
    pub fn remove_edge(&mut self, a: usize, b: usize) -> bool {
        if a >= self.adj.len() || b >= self.adj.len() {
            return false;
        }
        self.adj[b].remove(&a);
        self.adj[a].remove(&b)
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adj.get(a).is_some_and(|s| s.contains(&b))
    }

    /// Neighbors in ascending index order.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adj[i].iter().copied()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].len()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, set) in self.adj.iter().enumerate() {
            out.extend(set.iter().filter(|&&b| b > a).map(|&b| (a, b)));
        }
        out
    }

    /// Hop distances from `from`; `None` for unreachable nodes.
    pub fn distances(&self, from: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.nodes.len()];
        let mut queue = VecDeque::from([from]);
        dist[from] = Some(0);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap();
            for v in self.neighbors(u) {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// BFS path; lower neighbor indices are explored first.
    pub fn shortest_path(&self, from: usize, to: usize) -> Option<Path> {
        let mut parent = vec![usize::MAX; self.nodes.len()];
        parent[from] = from;
        let mut queue = VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            if u == to {
                break;
            }
            for v in self.neighbors(u) {
                if parent[v] == usize::MAX {
                    parent[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if parent[to] == usize::MAX {
            return None;
        }
        let mut hops = vec![to];
        while *hops.last().unwrap() != from {
            hops.push(parent[*hops.last().unwrap()]);
        }
        hops.reverse();
        Path::new(hops.into_iter().map(|i| self.nodes[i].clone()).collect()).ok()
    }

    pub fn is_connected(&self) -> bool {
        self.nodes.is_empty() || self.distances(0).iter().all(Option::is_some)
    }

    /// Longest shortest path over reachable pairs.
    pub fn diameter(&self) -> usize {
        (0..self.nodes.len())
            .flat_map(|i| self.distances(i).into_iter().flatten())
            .max()
            .unwrap_or(0)
    }
}

impl Adjacency for Topology {
    fn adjacent(&self, a: &NodeId, b: &NodeId) -> bool {
        self.has_edge(a.idx(), b.idx())
    }
}

impl NodeLookup for Topology {
    fn lookup(&self, label: &str) -> Option<NodeId> {
        self.nodes.lookup(label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::nodes_from_labels;

    fn line(n: usize) -> Topology {
        let labels: Vec<String> = (1..=n).map(|i| format!("N{i}")).collect();
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        let mut t = Topology::new(nodes_from_labels(&refs));
        for i in 0..n - 1 {
            t.add_edge(i, i + 1).unwrap();
        }
        t
    }

    #[test]
    fn edges_are_symmetric() {
        let mut t = line(3);
        assert!(t.has_edge(1, 0));
        assert!(t.remove_edge(1, 0));
        assert!(!t.has_edge(0, 1));
        assert!(!t.remove_edge(0, 1));
        assert!(t.add_edge(2, 2).is_err());
    }

    #[test]
    fn bfs_and_diameter() {
        let t = line(5);
        assert_eq!(t.shortest_path(0, 4).unwrap().hop_count(), 4);
        assert_eq!(t.diameter(), 4);
        assert!(t.is_connected());
    }

    #[test]
    fn geometric_radius() {
        let nodes = nodes_from_labels(&["A", "B", "C"]);
        let t = Topology::geometric(nodes, &[(0.0, 0.0), (1.0, 0.0), (3.0, 0.0)], 1.5);
        assert_eq!(t.edges(), vec![(0, 1)]);
    }
}
