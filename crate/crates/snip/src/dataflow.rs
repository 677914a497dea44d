//! A worklist solver for monotone flow inequalities over finite-height lattices.

use std::collections::VecDeque;
use std::fmt::Debug;

pub trait Lattice {
    type Elem: Clone + PartialEq + Debug;
    fn bottom(&self) -> Self::Elem;
    fn join(&self, a: &Self::Elem, b: &Self::Elem) -> Self::Elem;
    fn le(&self, a: &Self::Elem, b: &Self::Elem) -> bool;
    /// Length of the longest strictly ascending chain.
    fn height(&self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

pub type Transfer<'a, E> = Box<dyn Fn(usize, &E) -> E + 'a>;

/// Nodes are `0..nodes`. Forward: for every edge `u -> v`, `f(v) >= T_u(f(u))`.
/// Backward: for every edge `u -> v`, `f(u) >= T_v(f(v))`. In both directions
/// `f(n) >= init` for each init node.
pub struct FlowProblem<'a, L: Lattice> {
    pub lattice: &'a L,
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub direction: Direction,
    pub transfer: Transfer<'a, L::Elem>,
    pub init: L::Elem,
    pub init_nodes: Vec<usize>,
    /// Names used in error messages; falls back to the index.
    pub names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowSolution<E> {
    pub facts: Vec<E>,
}

impl<E> FlowSolution<E> {
    pub fn get(&self, n: usize) -> &E {
        &self.facts[n]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum FlowError {
    #[error("iteration cap of {cap} reached while updating node {node}; is a transfer non-monotone?")]
    IterationCap { node: String, cap: usize },
}

impl<L: Lattice> FlowProblem<'_, L> {
    /// `(from, to)` pairs: `f(to) >= T_from(f(from))`.
    fn deps(&self) -> Vec<Vec<usize>> {
        let mut d = vec![Vec::new(); self.nodes];
        for &(u, v) in &self.edges {
            let (a, b) = match self.direction {
                Direction::Forward => (u, v),
                Direction::Backward => (v, u),
            };
            if !d[a].contains(&b) {
                d[a].push(b);
            }
        }
        d
    }

    fn name(&self, n: usize) -> String {
        self.names.get(n).cloned().unwrap_or_else(|| n.to_string())
    }

    pub fn solve(&self) -> Result<FlowSolution<L::Elem>, FlowError> {
        let lat = self.lattice;
        let deps = self.deps();
        let mut f: Vec<L::Elem> = vec![lat.bottom(); self.nodes];
        for &n in &self.init_nodes {
            f[n] = lat.join(&f[n], &self.init);
        }
        let mut queue: VecDeque<usize> = (0..self.nodes).collect();
        let mut queued = vec![true; self.nodes];
        let cap = self.nodes.max(1) * (lat.height() + 1) * 4;
        let mut pops = 0;
        while let Some(n) = queue.pop_front() {
            queued[n] = false;
            pops += 1;
            if pops > cap {
                return Err(FlowError::IterationCap { node: self.name(n), cap });
            }
            let out = (self.transfer)(n, &f[n]);
            for &m in &deps[n] {
                let j = lat.join(&f[m], &out);
                if j != f[m] {
                    f[m] = j;
                    if !queued[m] {
                        queued[m] = true;
                        queue.push_back(m);
                    }
                }
            }
        }
        Ok(FlowSolution { facts: f })
    }

    /// Whether `sol` satisfies every inequality of the problem.
    pub fn satisfied_by(&self, sol: &FlowSolution<L::Elem>) -> bool {
        let lat = self.lattice;
        let deps = self.deps();
        self.init_nodes.iter().all(|&n| lat.le(&self.init, &sol.facts[n]))
            && (0..self.nodes).all(|n| {
                let out = (self.transfer)(n, &sol.facts[n]);
                deps[n].iter().all(|&m| lat.le(&out, &sol.facts[m]))
            })
    }
}

/// Constraints `f(node) <= bound` that the solution violates.
pub fn check_constraints<L: Lattice>(lat: &L, sol: &FlowSolution<L::Elem>, constraints: &[(usize, L::Elem)]) -> Vec<(usize, L::Elem)> {
    constraints.iter().filter(|(n, b)| !lat.le(&sol.facts[*n], b)).cloned().collect()
}

/// Subsets of a fixed universe of at most 64 elements, as bitmasks.
#[derive(Clone, Copy, Debug)]
pub struct BitLattice {
    pub universe: u32,
}

impl Lattice for BitLattice {
    type Elem = u64;
    fn bottom(&self) -> u64 {
        0
    }
    fn join(&self, a: &u64, b: &u64) -> u64 {
        a | b
    }
    fn le(&self, a: &u64, b: &u64) -> bool {
        a & !b == 0
    }
    fn height(&self) -> usize {
        self.universe as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem<'a>(
        lat: &'a BitLattice,
        nodes: usize,
        edges: Vec<(usize, usize)>,
        dir: Direction,
        t: impl Fn(usize, &u64) -> u64 + 'a,
        init: u64,
        init_nodes: Vec<usize>,
    ) -> FlowProblem<'a, BitLattice> {
        FlowProblem { lattice: lat, nodes, edges, direction: dir, transfer: Box::new(t), init, init_nodes, names: vec![] }
    }

    #[test]
    fn single_node() {
        let lat = BitLattice { universe: 4 };
        let p = problem(&lat, 1, vec![], Direction::Forward, |_, x| x | 2, 1, vec![0]);
        assert_eq!(p.solve().unwrap().facts, vec![1]);
    }

    #[test]
    fn diamond_joins_at_merge() {
        let lat = BitLattice { universe: 4 };
        let edges = vec![(0, 1), (0, 2), (1, 3), (2, 3)];
        let p = problem(&lat, 4, edges, Direction::Forward, |n, _| [0, 1, 2, 0][n], 0, vec![0]);
        let s = p.solve().unwrap();
        assert_eq!(s.facts[3], 3);
        assert!(p.satisfied_by(&s));
    }

    #[test]
    fn backward_direction() {
        let lat = BitLattice { universe: 4 };
        let p = problem(&lat, 3, vec![(0, 1), (1, 2)], Direction::Backward, |n, x| if n == 1 { x | 4 } else { *x }, 1, vec![2]);
        assert_eq!(p.solve().unwrap().facts, vec![5, 1, 1]);
    }

    #[test]
    fn non_monotone_transfer_hits_cap() {
        // Join keeps the newer value, so an increasing transfer never settles.
        struct Flip;
        impl Lattice for Flip {
            type Elem = u32;
            fn bottom(&self) -> u32 {
                0
            }
            fn join(&self, _: &u32, b: &u32) -> u32 {
                *b
            }
            fn le(&self, a: &u32, b: &u32) -> bool {
                a == b
            }
            fn height(&self) -> usize {
                1
            }
        }
        let flip = Flip;
        let p = FlowProblem {
            lattice: &flip,
            nodes: 2,
            edges: vec![(0, 1), (1, 0)],
            direction: Direction::Forward,
            transfer: Box::new(|_, x: &u32| x + 1),
            init: 0,
            init_nodes: vec![0],
            names: vec!["a".into(), "b".into()],
        };
        let e = p.solve().unwrap_err();
        assert!(matches!(e, FlowError::IterationCap { .. }));
    }

    #[test]
    fn constraints() {
        let lat = BitLattice { universe: 4 };
        let sol = FlowSolution { facts: vec![3, 1] };
        assert!(check_constraints(&lat, &sol, &[]).is_empty());
        assert!(check_constraints(&lat, &sol, &[(0, 15), (1, 15)]).is_empty());
        assert_eq!(check_constraints(&lat, &sol, &[(0, 1), (1, 1)]), vec![(0, 1)]);
    }
}
