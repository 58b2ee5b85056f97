//! Augmenting-path max-flow on search trees grown from both terminals
//! (Boykov-Kolmogorov), with orphan adoption between augmentations.

use std::collections::VecDeque;

const NO_ARC: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tree {
    Free,
    Source,
    Sink,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Parent {
    None,
    Terminal,
    Orphan,
    Arc(u32),
}

#[derive(Clone, Debug)]
struct Node {
    first: u32,
    parent: Parent,
    tree: Tree,
    /// Residual terminal capacity: positive toward the source, negative toward the sink.
    tr_cap: f64,
    ts: u64,
    dist: u32,
    queued: bool,
}

#[derive(Clone, Debug)]
struct Arc {
    head: u32,
    next: u32,
    cap: f64,
}

pub struct MaxFlow {
    nodes: Vec<Node>,
    arcs: Vec<Arc>,
    flow: f64,
    time: u64,
    active: VecDeque<u32>,
    orphans: VecDeque<u32>,
}

impl MaxFlow {
    pub fn new(n: usize) -> Self {
        let node = Node {
            first: NO_ARC,
            parent: Parent::None,
            tree: Tree::Free,
            tr_cap: 0.0,
            ts: 0,
            dist: 0,
            queued: false,
        };
        Self {
            nodes: vec![node; n],
            arcs: Vec::new(),
            flow: 0.0,
            time: 0,
            active: VecDeque::new(),
            orphans: VecDeque::new(),
        }
    }

    pub fn with_edge_capacity(n: usize, edges: usize) -> Self {
        let mut g = Self::new(n);
        g.arcs.reserve(2 * edges);
        g
    }

    /// Adds terminal capacities `source -> i` and `i -> sink`.
    pub fn add_tweights(&mut self, i: usize, cap_source: f64, cap_sink: f64) {
        debug_assert!(cap_source >= 0.0 && cap_sink >= 0.0);
        let node = &mut self.nodes[i];
        let (mut cs, mut ct) = (cap_source, cap_sink);
        if node.tr_cap > 0.0 {
            cs += node.tr_cap;
        } else {
            ct -= node.tr_cap;
        }
        self.flow += cs.min(ct);
        node.tr_cap = cs - ct;
    }

    /// Adds arc `i -> j` with capacity `cap` and `j -> i` with `rev_cap`.
    pub fn add_edge(&mut self, i: usize, j: usize, cap: f64, rev_cap: f64) {
        debug_assert!(i != j && cap >= 0.0 && rev_cap >= 0.0);
        let a = self.arcs.len() as u32;
        self.arcs.push(Arc { head: j as u32, next: self.nodes[i].first, cap });
        self.arcs.push(Arc { head: i as u32, next: self.nodes[j].first, cap: rev_cap });
        self.nodes[i].first = a;
        self.nodes[j].first = a + 1;
    }

    fn activate(&mut self, i: u32) {
        if !self.nodes[i as usize].queued {
            self.nodes[i as usize].queued = true;
            self.active.push_back(i);
        }
    }

    fn next_active(&mut self) -> Option<u32> {
        while let Some(i) = self.active.pop_front() {
            self.nodes[i as usize].queued = false;
            if self.nodes[i as usize].parent != Parent::None {
                return Some(i);
            }
        }
        None
    }

    pub fn maxflow(&mut self) -> f64 {
        for i in 0..self.nodes.len() {
            let n = &mut self.nodes[i];
            n.ts = 0;
            if n.tr_cap > 0.0 {
                n.tree = Tree::Source;
                n.parent = Parent::Terminal;
                n.dist = 1;
            } else if n.tr_cap < 0.0 {
                n.tree = Tree::Sink;
                n.parent = Parent::Terminal;
                n.dist = 1;
            } else {
                n.tree = Tree::Free;
                n.parent = Parent::None;
                continue;
            }
            self.activate(i as u32);
        }

        let mut current: Option<u32> = None;
        loop {
            let i = match current.take() {
                Some(i) if self.nodes[i as usize].parent != Parent::None => i,
                _ => match self.next_active() {
                    Some(i) => i,
                    None => break,
                },
            };
            let middle = self.grow(i);
            if let Some(m) = middle {
                // keep expanding from the same node after the augmentation
                current = Some(i);
                self.time += 1;
                self.augment(m);
                self.adopt_orphans();
            }
        }
        self.flow
    }

    /// Grows the tree containing `i`; returns an arc from the source tree to
    /// the sink tree if the trees touch.
    fn grow(&mut self, i: u32) -> Option<u32> {
        let tree = self.nodes[i as usize].tree;
        let mut a = self.nodes[i as usize].first;
        while a != NO_ARC {
            let arc_cap = match tree {
                Tree::Source => self.arcs[a as usize].cap,
                _ => self.arcs[(a ^ 1) as usize].cap,
            };
            if arc_cap > 0.0 {
                let j = self.arcs[a as usize].head;
                let (ts_i, dist_i) = (self.nodes[i as usize].ts, self.nodes[i as usize].dist);
                let nj = &mut self.nodes[j as usize];
                if nj.parent == Parent::None {
                    nj.tree = tree;
                    nj.parent = Parent::Arc(a ^ 1);
                    nj.ts = ts_i;
                    nj.dist = dist_i + 1;
                    self.activate(j);
                } else if nj.tree != tree {
                    return Some(if tree == Tree::Source { a } else { a ^ 1 });
                } else if nj.ts <= ts_i && nj.dist > dist_i {
                    nj.parent = Parent::Arc(a ^ 1);
                    nj.ts = ts_i;
                    nj.dist = dist_i + 1;
                }
            }
            a = self.arcs[a as usize].next;
        }
        None
    }

    fn make_orphan(&mut self, x: u32) {
        self.nodes[x as usize].parent = Parent::Orphan;
        self.orphans.push_back(x);
    }

    fn augment(&mut self, middle: u32) {
        let s_start = self.arcs[(middle ^ 1) as usize].head;
        let t_start = self.arcs[middle as usize].head;

        let mut bottleneck = self.arcs[middle as usize].cap;
        let mut x = s_start;
        loop {
            match self.nodes[x as usize].parent {
                Parent::Arc(a) => {
                    bottleneck = bottleneck.min(self.arcs[(a ^ 1) as usize].cap);
                    x = self.arcs[a as usize].head;
                }
                _ => {
                    bottleneck = bottleneck.min(self.nodes[x as usize].tr_cap);
                    break;
                }
            }
        }
        let mut x = t_start;
        loop {
            match self.nodes[x as usize].parent {
                Parent::Arc(a) => {
                    bottleneck = bottleneck.min(self.arcs[a as usize].cap);
                    x = self.arcs[a as usize].head;
                }
                _ => {
                    bottleneck = bottleneck.min(-self.nodes[x as usize].tr_cap);
                    break;
                }
            }
        }

        self.arcs[middle as usize].cap -= bottleneck;
        self.arcs[(middle ^ 1) as usize].cap += bottleneck;

        let mut x = s_start;
        loop {
            match self.nodes[x as usize].parent {
                Parent::Arc(a) => {
                    self.arcs[a as usize].cap += bottleneck;
                    self.arcs[(a ^ 1) as usize].cap -= bottleneck;
                    let next = self.arcs[a as usize].head;
                    if self.arcs[(a ^ 1) as usize].cap <= 0.0 {
                        self.make_orphan(x);
                    }
                    x = next;
                }
                _ => {
                    self.nodes[x as usize].tr_cap -= bottleneck;
                    if self.nodes[x as usize].tr_cap <= 0.0 {
                        self.make_orphan(x);
                    }
                    break;
                }
            }
        }
        let mut x = t_start;
        loop {
            match self.nodes[x as usize].parent {
                Parent::Arc(a) => {
                    self.arcs[(a ^ 1) as usize].cap += bottleneck;
                    self.arcs[a as usize].cap -= bottleneck;
                    let next = self.arcs[a as usize].head;
                    if self.arcs[a as usize].cap <= 0.0 {
                        self.make_orphan(x);
                    }
                    x = next;
                }
                _ => {
                    self.nodes[x as usize].tr_cap += bottleneck;
                    if self.nodes[x as usize].tr_cap >= 0.0 {
                        self.make_orphan(x);
                    }
                    break;
                }
            }
        }
        self.flow += bottleneck;
    }

    fn adopt_orphans(&mut self) {
        while let Some(x) = self.orphans.pop_front() {
            self.adopt(x);
        }
    }

    fn adopt(&mut self, x: u32) {
        let tree = self.nodes[x as usize].tree;
        let mut best_arc = NO_ARC;
        let mut best_dist = u32::MAX;

        let mut a = self.nodes[x as usize].first;
        while a != NO_ARC {
            let cap = match tree {
                Tree::Source => self.arcs[(a ^ 1) as usize].cap,
                _ => self.arcs[a as usize].cap,
            };
            let j = self.arcs[a as usize].head;
            if cap > 0.0 && self.nodes[j as usize].tree == tree && self.nodes[j as usize].parent != Parent::None {
                if let Some(d) = self.origin_distance(j) {
                    if d < best_dist {
                        best_dist = d;
                        best_arc = a;
                    }
                    // stamp the path so later searches stop early
                    let mut y = j;
                    let mut dd = d;
                    while self.nodes[y as usize].ts != self.time {
                        self.nodes[y as usize].ts = self.time;
                        self.nodes[y as usize].dist = dd;
                        dd = dd.saturating_sub(1);
                        match self.nodes[y as usize].parent {
                            Parent::Arc(b) => y = self.arcs[b as usize].head,
                            _ => break,
                        }
                    }
                }
            }
            a = self.arcs[a as usize].next;
        }

        if best_arc != NO_ARC {
            let n = &mut self.nodes[x as usize];
            n.parent = Parent::Arc(best_arc);
            n.ts = self.time;
            n.dist = best_dist + 1;
            return;
        }

        // no valid parent: x leaves its tree
        let mut a = self.nodes[x as usize].first;
        while a != NO_ARC {
            let j = self.arcs[a as usize].head;
            let (nj_tree, nj_parent) = (self.nodes[j as usize].tree, self.nodes[j as usize].parent);
            if nj_tree == tree && nj_parent != Parent::None {
                let cap = match tree {
                    Tree::Source => self.arcs[(a ^ 1) as usize].cap,
                    _ => self.arcs[a as usize].cap,
                };
                if cap > 0.0 {
                    self.activate(j);
                }
                if nj_parent == Parent::Arc(a ^ 1) {
                    self.make_orphan(j);
                }
            }
            a = self.arcs[a as usize].next;
        }
        let n = &mut self.nodes[x as usize];
        n.tree = Tree::Free;
        n.parent = Parent::None;
    }

    /// Distance from `j` to its terminal, or `None` if the path hits an orphan.
    fn origin_distance(&mut self, j: u32) -> Option<u32> {
        let mut d = 0u32;
        let mut y = j;
        loop {
            let n = &self.nodes[y as usize];
            if n.ts == self.time {
                return Some(d + n.dist);
            }
            d += 1;
            match n.parent {
                Parent::Terminal => {
                    let n = &mut self.nodes[y as usize];
                    n.ts = self.time;
                    n.dist = 1;
                    return Some(d);
                }
                Parent::Arc(b) => y = self.arcs[b as usize].head,
                Parent::Orphan | Parent::None => return None,
            }
        }
    }

    /// After [`MaxFlow::maxflow`]: whether `i` lies on the source side of the
    /// minimum cut (reachable from the source in the residual graph).
    pub fn in_source_segment(&self, i: usize) -> bool {
        let n = &self.nodes[i];
        n.tree == Tree::Source && n.parent != Parent::None
    }
}

/// Pseudo-boolean energy over binary variables where `x = 1` means the
/// variable ends on the source side of the cut.
pub struct BinaryEnergy {
    graph: MaxFlow,
    constant: f64,
}

impl BinaryEnergy {
    pub fn new(vars: usize, pairs: usize) -> Self {
        Self { graph: MaxFlow::with_edge_capacity(vars, pairs), constant: 0.0 }
    }

    /// Unary term: cost `e0` if `x_i = 0`, `e1` if `x_i = 1`.
    pub fn add_unary(&mut self, i: usize, e0: f64, e1: f64) {
        let m = e0.min(e1);
        self.constant += m;
        self.graph.add_tweights(i, e0 - m, e1 - m);
    }

    /// Pairwise term with table `E(0,0)=a, E(0,1)=b, E(1,0)=c, E(1,1)=d`;
    /// requires `b + c >= a + d`.
    pub fn add_pairwise(&mut self, i: usize, j: usize, a: f64, b: f64, c: f64, d: f64) {
        self.constant += a;
        self.add_unary(i, 0.0, c - a);
        self.add_unary(j, 0.0, d - c);
        let w = b + c - a - d;
        debug_assert!(w >= -1e-9 * (b.abs() + c.abs() + 1.0), "non-submodular term");
        if w > 0.0 {
            // x_j = 1, x_i = 0 pays w: cut j -> i
            self.graph.add_edge(j, i, w, 0.0);
        }
    }

    /// Minimizes the energy, returning its minimum value.
    pub fn minimize(&mut self) -> f64 {
        self.constant + self.graph.maxflow()
    }

    pub fn value(&self, i: usize) -> bool {
        self.graph.in_source_segment(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn textbook_network() {
        // s->0 (3), s->1 (2), 0->1 (1), 0->t(2), 1->t (3): max flow 5
        let mut g = MaxFlow::new(2);
        g.add_tweights(0, 3.0, 2.0);
        g.add_tweights(1, 2.0, 3.0);
        g.add_edge(0, 1, 1.0, 0.0);
        // terminal pairs already cancel 2 + 2 = 4 units
        let flow = g.maxflow();
        assert!((flow - 5.0).abs() < 1e-12);
    }

    fn brute_force(n: usize, unary: &[(f64, f64)], pairs: &[(usize, usize, [f64; 4])]) -> f64 {
        let mut best = f64::INFINITY;
        for bits in 0u32..(1 << n) {
            let x = |i: usize| (bits >> i) & 1;
            let mut e = 0.0;
            for (i, &(e0, e1)) in unary.iter().enumerate() {
                e += if x(i) == 1 { e1 } else { e0 };
            }
            for &(i, j, t) in pairs {
                e += t[(x(i) * 2 + x(j)) as usize];
            }
            best = best.min(e);
        }
        best
    }

    #[test]
    fn submodular_energies_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let n = rng.random_range(2..=10);
            let unary: Vec<(f64, f64)> =
                (0..n).map(|_| (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))).collect();
            let mut pairs = Vec::new();
            for _ in 0..rng.random_range(0..3 * n) {
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                if i == j {
                    continue;
                }
                let a: f64 = rng.random_range(0.0..4.0);
                let d = rng.random_range(0.0..4.0);
                let b = rng.random_range(0.0..4.0);
                let c = (a + d - b).max(0.0) + rng.random_range(0.0..3.0);
                pairs.push((i, j, [a, b, c, d]));
            }
            let mut e = BinaryEnergy::new(n, pairs.len());
            for (i, &(e0, e1)) in unary.iter().enumerate() {
                e.add_unary(i, e0, e1);
            }
            for &(i, j, [a, b, c, d]) in &pairs {
                e.add_pairwise(i, j, a, b, c, d);
            }
            let min = e.minimize();
            let oracle = brute_force(n, &unary, &pairs);
            assert!((min - oracle).abs() < 1e-9, "{min} vs {oracle}");
            // the returned labeling attains the minimum
            let mut val = 0.0;
            let x: Vec<usize> = (0..n).map(|i| e.value(i) as usize).collect();
            for (i, &(e0, e1)) in unary.iter().enumerate() {
                val += if x[i] == 1 { e1 } else { e0 };
            }
            for &(i, j, t) in &pairs {
                val += t[x[i] * 2 + x[j]];
            }
            assert!((val - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_cut_separates_halves() {
        // 1-D chain: strong source pull on the left, sink pull on the right
        let n = 50;
        let mut e = BinaryEnergy::new(n, n);
        for i in 0..n {
            if i < 20 {
                e.add_unary(i, 10.0, 0.0);
            } else if i >= 30 {
                e.add_unary(i, 0.0, 10.0);
            }
        }
        for i in 0..n - 1 {
            e.add_pairwise(i, i + 1, 0.0, 1.0, 1.0, 0.0);
        }
        assert!((e.minimize() - 1.0).abs() < 1e-12);
        assert!(e.value(0) && !e.value(n - 1));
    }
}
