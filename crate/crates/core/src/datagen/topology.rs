use std::collections::VecDeque;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::router::DomainId;

/// Spanning tree over the domain labels. Each edge carries one paired dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    k: usize,
    edges: Vec<(DomainId, DomainId)>,
    central: Option<DomainId>,
    adjacency: Vec<Vec<usize>>,
}

impl Topology {
    pub fn new(k: usize, edges: Vec<(DomainId, DomainId)>, central: Option<DomainId>) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 domains, got {k}")));
        }
        if edges.len() != k - 1 {
            return Err(Error::InvalidConfig(format!(
                "a spanning tree over {k} domains has {} edges, got {}",
                k - 1,
                edges.len()
            )));
        }
        let mut adjacency = vec![Vec::new(); k];
        for &(a, b) in &edges {
            for x in [a, b] {
                if x.0 >= k {
                    return Err(Error::InvalidLabel { label: x.0, domains: k });
                }
            }
            if a == b || adjacency[a.0].contains(&b.0) {
                return Err(Error::InvalidConfig(format!("bad edge ({a}, {b})")));
            }
            adjacency[a.0].push(b.0);
            adjacency[b.0].push(a.0);
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        let topo = Topology {
            k,
            edges,
            central,
            adjacency,
        };
        // k - 1 edges plus connectivity implies acyclic.
        let reached = topo.bfs_parents(DomainId(0)).iter().filter(|p| p.is_some()).count();
        if reached != k {
            return Err(Error::InvalidConfig("edges do not connect every domain".into()));
        }
        if let Some(c) = central {
            if c.0 >= k {
                return Err(Error::InvalidLabel { label: c.0, domains: k });
            }
            if topo.edges.iter().any(|&(a, b)| a != c && b != c) {
                return Err(Error::InvalidConfig(format!("star edge does not touch central domain {c}")));
            }
        }
        Ok(topo)
    }

    /// Star with central domain 0 and edges `(k, 0)` for every other k.
    pub fn star(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 domains, got {k}")));
        }
        let edges = (1..k).map(|i| (DomainId(i), DomainId(0))).collect();
        Self::new(k, edges, Some(DomainId(0)))
    }

    /// Path graph 0 - 1 - ... - (k-1).
    pub fn chain(k: usize) -> Result<Self> {
        if k < 3 {
            return Err(Error::InvalidConfig(format!("a chain needs at least 3 domains, got {k}")));
        }
        let edges = (0..k - 1).map(|i| (DomainId(i), DomainId(i + 1))).collect();
        Self::new(k, edges, None)
    }

    pub fn num_domains(&self) -> usize {
        self.k
    }

    pub fn edges(&self) -> &[(DomainId, DomainId)] {
        &self.edges
    }

    pub fn central(&self) -> Option<DomainId> {
        self.central
    }

    pub fn is_chain(&self) -> bool {
        self.central.is_none()
    }

    pub fn neighbors(&self, x: DomainId) -> &[usize] {
        &self.adjacency[x.0]
    }

    pub fn has_edge(&self, a: DomainId, b: DomainId) -> bool {
        a.0 < self.k && self.adjacency[a.0].contains(&b.0)
    }

    /// Index of the edge joining `a` and `b` in either orientation.
    pub fn edge_index(&self, a: DomainId, b: DomainId) -> Option<usize> {
        self.edges
            .iter()
            .position(|&(x, y)| (x == a && y == b) || (x == b && y == a))
    }

    fn bfs_parents(&self, root: DomainId) -> Vec<Option<usize>> {
        let mut parent = vec![None; self.k];
        parent[root.0] = Some(root.0);
        let mut queue = VecDeque::from([root.0]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if parent[v].is_none() {
                    parent[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        parent
    }

    /// The unique simple path from `src` to `tgt`, endpoints included.
    pub fn route(&self, src: DomainId, tgt: DomainId) -> Result<Vec<DomainId>> {
        for x in [src, tgt] {
            if x.0 >= self.k {
                return Err(Error::InvalidLabel { label: x.0, domains: self.k });
            }
        }
        let parent = self.bfs_parents(tgt);
        let mut path = vec![src];
        let mut cur = src.0;
        while cur != tgt.0 {
            cur = parent[cur].expect("tree is connected");
            path.push(DomainId(cur));
        }
        Ok(path)
    }

    pub fn distance(&self, a: DomainId, b: DomainId) -> Result<usize> {
        Ok(self.route(a, b)?.len() - 1)
    }

    /// Ordered pairs of distinct domains that do not share an edge.
    pub fn non_edge_pairs(&self) -> Vec<(DomainId, DomainId)> {
        let mut out = Vec::new();
        for i in 0..self.k {
            for j in 0..self.k {
                let (a, b) = (DomainId(i), DomainId(j));
                if i != j && !self.has_edge(a, b) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Ordered pairs of adjacent domains, both orientations.
    pub fn edge_directions(&self) -> Vec<(DomainId, DomainId)> {
        self.edges.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect()
    }

    pub fn describe(&self) -> String {
        let edges: Vec<String> = self.edges.iter().map(|(a, b)| format!("{a}-{b}")).collect();
        match self.central {
            Some(c) => format!("star:k={};central={};edges={}", self.k, c, edges.join(",")),
            None => format!("tree:k={};edges={}", self.k, edges.join(",")),
        }
    }

    /// Short stable fingerprint used in checkpoint headers.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.describe().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Inverse of [`Topology::describe`].
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Format(format!("unreadable topology '{text}'"));
        let (kind, rest) = text.split_once(':').ok_or_else(bad)?;
        let mut k = None;
        let mut central = None;
        let mut edges = Vec::new();
        for field in rest.split(';') {
            let (key, value) = field.split_once('=').ok_or_else(bad)?;
            match key {
                "k" => k = Some(value.parse::<usize>().map_err(|_| bad())?),
                "central" => central = Some(DomainId(value.parse().map_err(|_| bad())?)),
                "edges" => {
                    for e in value.split(',').filter(|e| !e.is_empty()) {
                        let (a, b) = e.split_once('-').ok_or_else(bad)?;
                        edges.push((
                            DomainId(a.parse().map_err(|_| bad())?),
                            DomainId(b.parse().map_err(|_| bad())?),
                        ));
                    }
                }
                _ => return Err(bad()),
            }
        }
        if (kind == "star") != central.is_some() || !(kind == "star" || kind == "tree") {
            return Err(bad());
        }
        Self::new(k.ok_or_else(bad)?, edges, central)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_routes_through_center() {
        let t = Topology::star(3).unwrap();
        assert_eq!(t.route(DomainId(1), DomainId(2)).unwrap(), vec![DomainId(1), DomainId(0), DomainId(2)]);
        assert_eq!(t.route(DomainId(1), DomainId(1)).unwrap(), vec![DomainId(1)]);
        assert_eq!(t.non_edge_pairs(), vec![(DomainId(1), DomainId(2)), (DomainId(2), DomainId(1))]);
    }

    #[test]
    fn chain_of_four_has_three_hops_end_to_end() {
        let t = Topology::chain(4).unwrap();
        let path = t.route(DomainId(0), DomainId(3)).unwrap();
        assert_eq!(path, (0..4).map(DomainId).collect::<Vec<_>>());
        assert_eq!(t.distance(DomainId(3), DomainId(0)).unwrap(), 3);
        assert!(Topology::chain(2).is_err());
    }

    #[test]
    fn rejects_cycles_and_disconnected_graphs() {
        let e = |a, b| (DomainId(a), DomainId(b));
        assert!(Topology::new(4, vec![e(0, 1), e(1, 2), e(2, 0)], None).is_err());
        assert!(Topology::new(3, vec![e(0, 1)], None).is_err());
        assert!(Topology::new(3, vec![e(1, 2), e(0, 1)], Some(DomainId(0))).is_err());
    }

    #[test]
    fn describe_round_trips() {
        for t in [Topology::star(4).unwrap(), Topology::chain(5).unwrap()] {
            assert_eq!(Topology::parse(&t.describe()).unwrap(), t);
        }
    }
}
