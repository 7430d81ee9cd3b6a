//! Exact minimization of submodular binary energies by s–t minimum cut.
//!
//! Energy: `sum_i unary[i][l_i] + sum_(i,j,w) w * [l_i != l_j]` with `w >= 0`.
//! Label 1 is the source side of the cut. Max-flow uses Dinic's algorithm on
//! residual capacities.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Labeling {
    pub labels: Vec<bool>,
    pub energy: f64,
}

/// Edge `(i, j, w)`: cost `w` whenever `i` and `j` take different labels.
pub type PairwiseCost = (usize, usize, f64);

pub fn labeling_energy(unary: &[[f64; 2]], pairwise: &[PairwiseCost], labels: &[bool]) -> f64 {
    let u: f64 = unary
        .iter()
        .zip(labels)
        .map(|(c, &l)| c[l as usize])
        .sum();
    let p: f64 = pairwise
        .iter()
        .filter(|(i, j, _)| labels[*i] != labels[*j])
        .map(|(_, _, w)| w)
        .sum();
    u + p
}

pub fn min_cut_labeling(unary: &[[f64; 2]], pairwise: &[PairwiseCost]) -> Result<Labeling> {
    let n = unary.len();
    if unary.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::invalid("unary costs must be finite"));
    }
    for &(i, j, w) in pairwise {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::invalid(format!(
                "pairwise cost {w} on ({i},{j}) must be finite and non-negative"
            )));
        }
        if i >= n || j >= n {
            return Err(Error::invalid(format!("pairwise edge ({i},{j}) out of range")));
        }
    }
    let source = n;
    let sink = n + 1;
    let mut g = FlowGraph::new(n + 2);
    for (i, c) in unary.iter().enumerate() {
        let m = c[0].min(c[1]);
        // node on the sink side takes label 0 and cuts source->i
        if c[0] > m {
            g.add_edge(source, i, c[0] - m, 0.0);
        }
        if c[1] > m {
            g.add_edge(i, sink, c[1] - m, 0.0);
        }
    }
    for &(i, j, w) in pairwise {
        if w > 0.0 && i != j {
            g.add_edge(i, j, w, w);
        }
    }
    g.max_flow(source, sink);
    let reach = g.reachable_from(source);
    let labels: Vec<bool> = reach[..n].to_vec();
    let energy = labeling_energy(unary, pairwise, &labels);
    Ok(Labeling { labels, energy })
}

struct FlowGraph {
    head: Vec<usize>,
    to: Vec<usize>,
    next: Vec<usize>,
    residual: Vec<f64>,
    eps: f64,
}

const NIL: usize = usize::MAX;

impl FlowGraph {
    fn new(n: usize) -> Self {
        FlowGraph {
            head: vec![NIL; n],
            to: Vec::new(),
            next: Vec::new(),
            residual: Vec::new(),
            eps: 0.0,
        }
    }

    fn add_edge(&mut self, u: usize, v: usize, cap: f64, rev_cap: f64) {
        for (a, b, c) in [(u, v, cap), (v, u, rev_cap)] {
            self.to.push(b);
            self.residual.push(c);
            self.next.push(self.head[a]);
            self.head[a] = self.to.len() - 1;
        }
        self.eps = self.eps.max(cap.max(rev_cap) * 1e-13);
    }

    fn levels(&self, s: usize) -> Vec<usize> {
        let mut level = vec![NIL; self.head.len()];
        level[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            let mut e = self.head[u];
            while e != NIL {
                let v = self.to[e];
                if level[v] == NIL && self.residual[e] > self.eps {
                    level[v] = level[u] + 1;
                    q.push_back(v);
                }
                e = self.next[e];
            }
        }
        level
    }

    fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut total = 0.0;
        loop {
            let level = self.levels(s);
            if level[t] == NIL {
                return total;
            }
            let mut it = self.head.clone();
            loop {
                let f = self.augment(s, t, &level, &mut it);
                if f <= 0.0 {
                    break;
                }
                total += f;
            }
        }
    }

    /// One augmenting path in the level graph (iterative DFS).
    fn augment(&mut self, s: usize, t: usize, level: &[usize], it: &mut [usize]) -> f64 {
        let mut path: Vec<usize> = Vec::new();
        let mut u = s;
        loop {
            if u == t {
                let f = path
                    .iter()
                    .map(|&e| self.residual[e])
                    .fold(f64::INFINITY, f64::min);
                for &e in &path {
                    self.residual[e] -= f;
                    self.residual[e ^ 1] += f;
                }
                return f;
            }
            let mut advanced = false;
            while it[u] != NIL {
                let e = it[u];
                let v = self.to[e];
                if self.residual[e] > self.eps && level[v] != NIL && level[v] == level[u] + 1 {
                    path.push(e);
                    u = v;
                    advanced = true;
                    break;
                }
                it[u] = self.next[e];
            }
            if !advanced {
                match path.pop() {
                    Some(e) => {
                        u = self.to[e ^ 1];
                        // dead end: skip the edge that led there
                        it[u] = self.next[it[u]];
                    }
                    None => return 0.0,
                }
            }
        }
    }

    fn reachable_from(&self, s: usize) -> Vec<bool> {
        let level = self.levels(s);
        level.iter().map(|&l| l != NIL).collect()
    }
}
