//! Directed sensor network, hop distances and k-hop structure masks.
//!
//! `a_sp[i][j] = 1` when sensor `j` directly follows sensor `i`, plus a
//! self-loop on every sensor. The structure mask `S^k` connects `i` to every
//! `j` reachable within `k` directed hops; a group `{S^1, ..., S^L}` is the
//! menu the hop-range selector chooses from.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    num_nodes: usize,
    /// Deduplicated directed edges, sorted, without self-loops.
    edges: Vec<(usize, usize)>,
    a_sp: Vec<bool>,
}

impl RoadNetwork {
    /// Builds the binary adjacency with self-loops. Duplicate edges are merged.
    pub fn build_asp(edges: &[(usize, usize)], num_nodes: usize) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::input("road network needs at least one sensor"));
        }
        let mut set = BTreeSet::new();
        for &(i, j) in edges {
            if i >= num_nodes || j >= num_nodes {
                return Err(Error::input(format!(
                    "edge ({i},{j}) references a sensor outside 0..{num_nodes}"
                )));
            }
            if i != j {
                set.insert((i, j));
            }
        }
        let mut a_sp = vec![false; num_nodes * num_nodes];
        for i in 0..num_nodes {
            a_sp[i * num_nodes + i] = true;
        }
        for &(i, j) in &set {
            a_sp[i * num_nodes + j] = true;
        }
        Ok(RoadNetwork { num_nodes, edges: set.into_iter().collect(), a_sp })
    }

    /// Reads a `from,to[,...]` CSV. Extra columns (distance, cost) are ignored.
    pub fn load_edges(path: &Path, num_nodes: usize) -> Result<Self> {
        let edges = read_edge_csv(path)?;
        Self::build_asp(&edges, num_nodes)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.a_sp[i * self.num_nodes + j]
    }

    pub fn nnz(&self) -> usize {
        self.a_sp.iter().filter(|&&b| b).count()
    }

    pub fn a_sp(&self) -> Tensor {
        let data = self.a_sp.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::matrix(self.num_nodes, self.num_nodes, data)
    }

    /// Successor lists, self-loops excluded.
    fn successors(&self, symmetrize: bool) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_nodes];
        for &(i, j) in &self.edges {
            out[i].push(j);
            if symmetrize {
                out[j].push(i);
            }
        }
        for s in &mut out {
            s.sort_unstable();
            s.dedup();
        }
        out
    }

    pub fn write_edges(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["from", "to"]).map_err(|e| csv_io(path, e))?;
        for &(i, j) in &self.edges {
            w.write_record([i.to_string(), j.to_string()]).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { path: path.to_path_buf(), line, msg: format!("{other:?}") },
    }
}

fn read_edge_csv(path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let headers = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (from, to) = match (col("from"), col("to")) {
        (Some(f), Some(t)) => (f, t),
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "edge file header must contain `from` and `to`".into(),
            })
        }
    };
    let mut edges = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let line = k + 2;
        let parse = |idx: usize| -> Result<usize> {
            let cell = rec.get(idx).unwrap_or("");
            // Some public edge lists store ids as floats ("3.0").
            cell.parse::<usize>()
                .or_else(|_| match cell.parse::<f64>() {
                    Ok(f) if f >= 0.0 && f.fract() == 0.0 => Ok(f as usize),
                    _ => Err(()),
                })
                .map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("invalid sensor id {cell:?}"),
                })
        };
        edges.push((parse(from)?, parse(to)?));
    }
    Ok(edges)
}

/// All-pairs directed hop counts; `None` for unreachable pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct HopDistances {
    n: usize,
    d: Vec<Option<u32>>,
}

impl HopDistances {
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Option<u32> {
        self.d[i * self.n + j]
    }

    /// Largest finite distance.
    pub fn diameter(&self) -> u32 {
        self.d.iter().flatten().copied().max().unwrap_or(0)
    }
}

/// Breadth-first search from every source. Self-loops add no length.
pub fn hop_distances(net: &RoadNetwork, symmetrize: bool) -> HopDistances {
    let n = net.num_nodes();
    let succ = net.successors(symmetrize);
    let mut d = vec![None; n * n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        let row = &mut d[s * n..(s + 1) * n];
        row[s] = Some(0);
        queue.clear();
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            let du = row[u].expect("queued nodes have distances");
            for &v in &succ[u] {
                if row[v].is_none() {
                    row[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
    }
    HopDistances { n, d }
}

/// `mask[i][j] = 1` iff `j` lies within `k` hops of `i`.
pub fn structure_info(dist: &HopDistances, k: usize) -> Result<Tensor> {
    if k < 1 {
        return Err(Error::input("structure information needs k >= 1"));
    }
    let n = dist.num_nodes();
    let data = dist
        .d
        .iter()
        .map(|d| match d {
            Some(h) if (*h as usize) <= k => 1.0,
            _ => 0.0,
        })
        .collect();
    Ok(Tensor::matrix(n, n, data))
}

/// The nested masks `S^1 <= S^2 <= ... <= S^L`.
#[derive(Debug, Clone)]
pub struct StructureInfoGroup {
    masks: Arc<Vec<Tensor>>,
}

impl StructureInfoGroup {
    pub fn build(dist: &HopDistances, size: usize) -> Result<Self> {
        if size < 1 {
            return Err(Error::input("structure group size L must be >= 1"));
        }
        let masks = (1..=size).map(|k| structure_info(dist, k)).collect::<Result<Vec<_>>>()?;
        Ok(StructureInfoGroup { masks: Arc::new(masks) })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// `S^k` for `k` in `1..=L`.
    pub fn mask(&self, k: usize) -> &Tensor {
        &self.masks[k - 1]
    }

    pub fn masks(&self) -> &Arc<Vec<Tensor>> {
        &self.masks
    }

    pub fn num_nodes(&self) -> usize {
        self.masks[0].rows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain(n: usize) -> RoadNetwork {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        RoadNetwork::build_asp(&edges, n).unwrap()
    }

    #[test]
    fn asp_small_cases() {
        let net = RoadNetwork::build_asp(&[(0, 1), (1, 2)], 3).unwrap();
        assert_eq!(net.a_sp().data(), &[1., 1., 0., 0., 1., 1., 0., 0., 1.]);
        let empty = RoadNetwork::build_asp(&[], 2).unwrap();
        assert_eq!(empty.a_sp(), Tensor::identity(2));
    }

    #[test]
    fn out_of_range_edge_rejected() {
        assert!(matches!(RoadNetwork::build_asp(&[(0, 3)], 3), Err(Error::Input(_))));
    }

    #[test]
    fn chain_distances_are_directed() {
        let d = hop_distances(&chain(4), false);
        assert_eq!(d.get(0, 3), Some(3));
        assert_eq!(d.get(3, 0), None);
        assert_eq!(d.get(2, 2), Some(0));
        let sym = hop_distances(&chain(4), true);
        assert_eq!(sym.get(3, 0), Some(3));
    }

    #[test]
    fn chain_two_hop_row() {
        let d = hop_distances(&chain(5), false);
        let s2 = structure_info(&d, 2).unwrap();
        assert_eq!(s2.row(0), &[1., 1., 1., 0., 0.]);
        assert!(structure_info(&d, 0).is_err());
    }

    #[test]
    fn one_hop_mask_is_asp() {
        let net = RoadNetwork::build_asp(&[(0, 1), (2, 1), (3, 0), (1, 3)], 4).unwrap();
        let d = hop_distances(&net, false);
        assert_eq!(structure_info(&d, 1).unwrap(), net.a_sp());
    }

    #[test]
    fn saturated_mask_is_reachability() {
        let net = RoadNetwork::build_asp(&[(0, 1), (1, 2), (3, 2)], 4).unwrap();
        let d = hop_distances(&net, false);
        let full = structure_info(&d, d.diameter() as usize).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let reachable = d.get(i, j).is_some();
                assert_eq!(full.get(i, j) == 1.0, reachable, "({i},{j})");
            }
        }
    }

    #[test]
    fn group_on_chain() {
        let d = hop_distances(&chain(5), false);
        let g1 = StructureInfoGroup::build(&d, 1).unwrap();
        assert_eq!(g1.len(), 1);
        let g5 = StructureInfoGroup::build(&d, 5).unwrap();
        assert_eq!(g5.mask(5).row(0), &[1.0; 5]);
        assert_eq!(g5.mask(5).row(4), &[0., 0., 0., 0., 1.]);
    }

    #[test]
    fn edge_csv_with_extra_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edges.csv");
        std::fs::write(&path, "from,to,cost\n0,1,393.5\n1,2,10\n1,2,11\n").unwrap();
        let net = RoadNetwork::load_edges(&path, 3).unwrap();
        assert_eq!(net.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(net.nnz(), 5);

        std::fs::write(&path, "from,to\n0,x\n").unwrap();
        match RoadNetwork::load_edges(&path, 3) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn arb_digraph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (1usize..=15).prop_flat_map(|n| (Just(n), proptest::collection::vec((0..n, 0..n), 0..40)))
    }

    proptest! {
        #[test]
        fn masks_nest((n, edges) in arb_digraph(), l in 1usize..8) {
            let net = RoadNetwork::build_asp(&edges, n).unwrap();
            let g = StructureInfoGroup::build(&hop_distances(&net, false), l).unwrap();
            for k in 1..l {
                let (a, b) = (g.mask(k), g.mask(k + 1));
                prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x <= y));
            }
            for k in 1..=l {
                for i in 0..n {
                    prop_assert_eq!(g.mask(k).get(i, i), 1.0);
                }
            }
        }

        #[test]
        fn duplicate_edges_are_idempotent((n, edges) in arb_digraph()) {
            let doubled: Vec<_> = edges.iter().chain(edges.iter()).copied().collect();
            prop_assert_eq!(
                RoadNetwork::build_asp(&edges, n).unwrap(),
                RoadNetwork::build_asp(&doubled, n).unwrap()
            );
        }
    }
}
