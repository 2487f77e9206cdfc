use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Element {
    C = 0,
    N = 1,
    O = 2,
    S = 3,
    F = 4,
}

impl Element {
    pub const ALL: [Element; 5] = [Element::C, Element::N, Element::O, Element::S, Element::F];

    pub fn max_valence(self) -> u8 {
        match self {
            Element::C => 4,
            Element::N => 3,
            Element::O | Element::S => 2,
            Element::F => 1,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::S => "S",
            Element::F => "F",
        }
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Atom {
    pub element: Element,
}

impl Atom {
    pub fn max_valence(&self) -> u8 {
        self.element.max_valence()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: u8,
}

/// Atom-bond graph realized from a token string.
///
/// Ring metadata (longest simple cycle and the sizes of a minimum cycle
/// basis) is computed once on construction by exhaustive cycle enumeration,
/// which is exact and cheap for the small graphs the grammar can produce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MolGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    branch_count: usize,
    longest_cycle: usize,
    ring_sizes: Vec<usize>,
}

impl MolGraph {
    pub fn empty() -> Self {
        Self::new(Vec::new(), Vec::new(), 0)
    }

    pub fn new(atoms: Vec<Atom>, bonds: Vec<Bond>, branch_count: usize) -> Self {
        let cycles = simple_cycles(atoms.len(), &bonds);
        let longest_cycle = cycles.iter().map(|c| c.len).max().unwrap_or(0);
        let rank = cyclomatic_number(atoms.len(), &bonds);
        let ring_sizes = minimum_cycle_basis(cycles, rank);
        Self {
            atoms,
            bonds,
            branch_count,
            longest_cycle,
            ring_sizes,
        }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Branches that attached at least one atom.
    pub fn branch_count(&self) -> usize {
        self.branch_count
    }

    /// Atom count of the longest simple cycle, 0 for acyclic graphs.
    pub fn longest_cycle(&self) -> usize {
        self.longest_cycle
    }

    /// Ring sizes of a minimum cycle basis (smallest set of smallest rings).
    pub fn ring_sizes(&self) -> &[usize] {
        &self.ring_sizes
    }

    pub fn double_bond_count(&self) -> usize {
        self.bonds.iter().filter(|b| b.order == 2).count()
    }

    /// `(neighbor, bond order)` pairs of atom `i`.
    pub fn neighbors(&self, i: usize) -> Vec<(usize, u8)> {
        self.bonds
            .iter()
            .filter_map(|b| {
                if b.i == i {
                    Some((b.j, b.order))
                } else if b.j == i {
                    Some((b.i, b.order))
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.bonds.iter().filter(|b| b.i == i || b.j == i).count()
    }

    /// Sum of bond orders at atom `i`.
    pub fn valence_used(&self, i: usize) -> u8 {
        self.bonds
            .iter()
            .filter(|b| b.i == i || b.j == i)
            .map(|b| b.order)
            .sum()
    }

    /// Valence limits hold, no self-loops or duplicate bonds, orders in 1..=3,
    /// and the graph is connected (or empty).
    pub fn is_valid(&self) -> bool {
        let n = self.atoms.len();
        for (k, b) in self.bonds.iter().enumerate() {
            if b.i == b.j || b.i >= n || b.j >= n || !(1..=3).contains(&b.order) {
                return false;
            }
            let dup = self.bonds[..k]
                .iter()
                .any(|o| (o.i == b.i && o.j == b.j) || (o.i == b.j && o.j == b.i));
            if dup {
                return false;
            }
        }
        (0..n).all(|i| self.valence_used(i) <= self.atoms[i].max_valence()) && self.is_connected()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.atoms.len();
        if n == 0 {
            return true;
        }
        let adj = adjacency(n, &self.bonds);
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(w, _) in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

fn adjacency(n: usize, bonds: &[Bond]) -> Vec<Vec<(usize, usize)>> {
    let mut adj = vec![Vec::new(); n];
    for (e, b) in bonds.iter().enumerate() {
        adj[b.i].push((b.j, e));
        adj[b.j].push((b.i, e));
    }
    adj
}

fn cyclomatic_number(n: usize, bonds: &[Bond]) -> usize {
    if n == 0 {
        return 0;
    }
    // union-find for the component count
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut components = n;
    for b in bonds {
        let (ri, rj) = (find(&mut parent, b.i), find(&mut parent, b.j));
        if ri != rj {
            parent[ri] = rj;
            components -= 1;
        }
    }
    bonds.len() + components - n
}

#[derive(Clone, Debug)]
struct Cycle {
    len: usize,
    edges: EdgeSet,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct EdgeSet(Vec<u64>);

impl EdgeSet {
    fn new(n_edges: usize) -> Self {
        EdgeSet(vec![0; n_edges.div_ceil(64).max(1)])
    }
    fn set(&mut self, e: usize) {
        self.0[e / 64] |= 1 << (e % 64);
    }
    fn xor(&mut self, other: &EdgeSet) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a ^= b;
        }
    }
    fn is_zero(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }
    fn highest_bit(&self) -> Option<usize> {
        self.0
            .iter()
            .enumerate()
            .rev()
            .find(|(_, &w)| w != 0)
            .map(|(i, &w)| i * 64 + 63 - w.leading_zeros() as usize)
    }
}

/// Every simple cycle, each reported once.
fn simple_cycles(n: usize, bonds: &[Bond]) -> Vec<Cycle> {
    let adj = adjacency(n, bonds);
    let mut out = Vec::new();
    let mut on_path = vec![false; n];
    let mut path_vertices = Vec::new();
    let mut path_edges = Vec::new();

    #[allow(clippy::too_many_arguments)]
    fn dfs(
        start: usize,
        v: usize,
        adj: &[Vec<(usize, usize)>],
        n_edges: usize,
        on_path: &mut [bool],
        path_vertices: &mut Vec<usize>,
        path_edges: &mut Vec<usize>,
        out: &mut Vec<Cycle>,
    ) {
        for &(w, e) in &adj[v] {
            if w == start && path_vertices.len() >= 3 {
                // each cycle is walked in both directions; keep one
                if path_vertices[1] < *path_vertices.last().unwrap() {
                    let mut edges = EdgeSet::new(n_edges);
                    for &pe in path_edges.iter() {
                        edges.set(pe);
                    }
                    edges.set(e);
                    out.push(Cycle {
                        len: path_vertices.len(),
                        edges,
                    });
                }
            } else if w > start && !on_path[w] {
                on_path[w] = true;
                path_vertices.push(w);
                path_edges.push(e);
                dfs(start, w, adj, n_edges, on_path, path_vertices, path_edges, out);
                path_edges.pop();
                path_vertices.pop();
                on_path[w] = false;
            }
        }
    }

    for s in 0..n {
        on_path[s] = true;
        path_vertices.push(s);
        dfs(
            s,
            s,
            &adj,
            bonds.len(),
            &mut on_path,
            &mut path_vertices,
            &mut path_edges,
            &mut out,
        );
        path_vertices.pop();
        on_path[s] = false;
    }
    out
}

/// Greedy minimum cycle basis over GF(2): shortest cycles first, keep those
/// independent of the ones already kept. Exact because every simple cycle is
/// a candidate.
fn minimum_cycle_basis(mut cycles: Vec<Cycle>, rank: usize) -> Vec<usize> {
    cycles.sort_by(|a, b| a.len.cmp(&b.len).then_with(|| a.edges.cmp(&b.edges)));
    let mut pivots: Vec<(usize, EdgeSet)> = Vec::new();
    let mut sizes = Vec::new();
    for c in cycles {
        if sizes.len() == rank {
            break;
        }
        let mut v = c.edges.clone();
        while let Some(h) = v.highest_bit() {
            match pivots.iter().find(|(p, _)| *p == h) {
                Some((_, row)) => v.xor(row),
                None => break,
            }
        }
        if !v.is_zero() {
            let h = v.highest_bit().unwrap();
            pivots.push((h, v));
            sizes.push(c.len);
        }
    }
    sizes
}
