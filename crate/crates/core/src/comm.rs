//! Communication capability graph, data-integrity attacks, measurement
//! routing under a spanning arborescence, and arborescence
//! enumeration/counting.
//!
//! Links are undirected and each carries a single repeater, so a
//! man-in-the-middle corruption of a link affects both directions. A
//! transmitter compromise corrupts every outgoing edge of its node. The
//! consensus layer only consumes the in-edges of the active arborescence,
//! which is what makes leaf-ing out compromised transmitters possible.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Communication capability graph over the DG nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    pub n: usize,
    /// Undirected links, normalized to `(low, high)`, sorted, deduplicated.
    pub links: Vec<(usize, usize)>,
    /// Nodes allowed to carry the frequency reference (candidate roots).
    pub leader_candidates: Vec<usize>,
}

impl CommGraph {
    pub fn new(n: usize, links: &[(usize, usize)], leader_candidates: &[usize]) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("graph must have at least one node".into()));
        }
        let mut norm = BTreeSet::new();
        for &(a, b) in links {
            if a == b {
                return Err(Error::Config(format!("link {a}-{b} is a self-loop")));
            }
            if a >= n || b >= n {
                return Err(Error::Config(format!("link {a}-{b} outside 0..{n}")));
            }
            norm.insert((a.min(b), a.max(b)));
        }
        let mut cands: Vec<usize> = leader_candidates.to_vec();
        cands.sort_unstable();
        cands.dedup();
        if cands.is_empty() {
            return Err(Error::Config("at least one leader candidate required".into()));
        }
        if let Some(&bad) = cands.iter().find(|&&c| c >= n) {
            return Err(Error::Config(format!("leader candidate {bad} outside 0..{n}")));
        }
        Ok(CommGraph {
            n,
            links: norm.into_iter().collect(),
            leader_candidates: cands,
        })
    }

    pub fn has_link(&self, a: usize, b: usize) -> bool {
        self.links.binary_search(&(a.min(b), a.max(b))).is_ok()
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 1 {
            return true;
        }
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.links {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &w in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == self.n
    }
}

/// Compromised devices: transmitters live on nodes, repeaters on links.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeviceHealth {
    pub compromised_transmitters: BTreeSet<usize>,
    pub compromised_repeaters: BTreeSet<(usize, usize)>,
}

impl DeviceHealth {
    pub fn from_attacks(attacks: &[AttackSpec]) -> Self {
        let mut h = DeviceHealth::default();
        for a in attacks {
            match a.kind {
                AttackKind::Fdi { node } => {
                    h.compromised_transmitters.insert(node);
                }
                AttackKind::Mitm { link: (a0, b0) } => {
                    h.compromised_repeaters.insert((a0.min(b0), a0.max(b0)));
                }
            }
        }
        h
    }

    pub fn is_empty(&self) -> bool {
        self.compromised_transmitters.is_empty() && self.compromised_repeaters.is_empty()
    }
}

/// Leader-rooted directed spanning tree over the capability graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Arborescence {
    pub root: usize,
    /// Directed `(from, to)` pairs, sorted.
    pub edges: Vec<(usize, usize)>,
}

impl Arborescence {
    pub fn new(root: usize, edges: &[(usize, usize)]) -> Self {
        let mut e = edges.to_vec();
        e.sort_unstable();
        Arborescence { root, edges: e }
    }

    pub fn n(&self) -> usize {
        self.edges.len() + 1
    }

    /// In-neighbors (parents) of `node`; an arborescence has at most one.
    pub fn parents(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .iter()
            .filter(move |&&(_, to)| to == node)
            .map(|&(from, _)| from)
    }

    pub fn contains_undirected(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a, b)) || self.edges.contains(&(b, a))
    }

    /// Full structural validation against a capability graph.
    pub fn validate(&self, graph: &CommGraph) -> Result<()> {
        let n = graph.n;
        if self.root >= n {
            return Err(Error::Topology(format!("root {} outside 0..{n}", self.root)));
        }
        if self.edges.len() != n - 1 {
            return Err(Error::Topology(format!(
                "arborescence needs {} edges, has {}",
                n - 1,
                self.edges.len()
            )));
        }
        let mut indeg = vec![0usize; n];
        for &(from, to) in &self.edges {
            if from >= n || to >= n {
                return Err(Error::Topology(format!("edge {from}->{to} outside 0..{n}")));
            }
            if !graph.has_link(from, to) {
                return Err(Error::Topology(format!(
                    "edge {from}->{to} has no underlying link"
                )));
            }
            indeg[to] += 1;
        }
        if indeg[self.root] != 0 {
            return Err(Error::Topology("root must have in-degree 0".into()));
        }
        for (v, &d) in indeg.iter().enumerate() {
            if v != self.root && d != 1 {
                return Err(Error::Topology(format!(
                    "node {v} has in-degree {d}, expected 1"
                )));
            }
        }
        // Reachability from the root over directed edges.
        let mut children = vec![Vec::new(); n];
        for &(from, to) in &self.edges {
            children[from].push(to);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![self.root];
        seen[self.root] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &w in &children[u] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        if count != n {
            return Err(Error::Topology("not all nodes reachable from root".into()));
        }
        Ok(())
    }
}

/// Ordered list of candidate arborescences; index 0 is the default topology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeSet {
    pub trees: Vec<Arborescence>,
}

impl TreeSet {
    /// Enumerate over every leader candidate, default topology first, then
    /// (root, edge list) lexicographic order.
    pub fn enumerate_all_roots(
        graph: &CommGraph,
        default: Option<&Arborescence>,
        cap: usize,
    ) -> Result<TreeSet> {
        let mut trees = Vec::new();
        for &root in &graph.leader_candidates {
            let rooted = enumerate_arborescences(graph, root, cap)?;
            trees.extend(rooted.trees);
            if trees.len() > cap {
                return Err(Error::CapExceeded { cap });
            }
        }
        if let Some(d) = default {
            d.validate(graph)?;
            if !graph.leader_candidates.contains(&d.root) {
                return Err(Error::Config(format!(
                    "default tree root {} is not a leader candidate",
                    d.root
                )));
            }
            trees.retain(|t| t != d);
            trees.insert(0, d.clone());
        }
        Ok(TreeSet { trees })
    }

    /// Build from an explicit, pre-defined list. Trees must be valid and
    /// duplicate-free; the first entry is the default topology.
    pub fn explicit(graph: &CommGraph, trees: Vec<Arborescence>) -> Result<TreeSet> {
        if trees.is_empty() {
            return Err(Error::Config("explicit tree list is empty".into()));
        }
        for t in &trees {
            t.validate(graph)?;
            if !graph.leader_candidates.contains(&t.root) {
                return Err(Error::Config(format!(
                    "tree root {} is not a leader candidate",
                    t.root
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for t in &trees {
            if !seen.insert((t.root, t.edges.clone())) {
                return Err(Error::Config("duplicate tree in explicit list".into()));
            }
        }
        Ok(TreeSet { trees })
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }
}

/// Per-channel manipulation magnitudes (ω in Hz, P in W, Q in var). For ramp
/// waveforms these are rates per second.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelBias {
    pub omega: f64,
    pub p: f64,
    pub q: f64,
}

impl ChannelBias {
    pub const ZERO: ChannelBias = ChannelBias { omega: 0.0, p: 0.0, q: 0.0 };

    fn scaled(self, k: f64) -> ChannelBias {
        ChannelBias {
            omega: self.omega * k,
            p: self.p * k,
            q: self.q * k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    /// Transmitter-level false data injection: corrupts every outgoing edge
    /// of the node.
    Fdi { node: usize },
    /// Repeater-level man-in-the-middle: corrupts both directions of the
    /// link.
    Mitm { link: (usize, usize) },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Waveform {
    Constant,
    Ramp,
}

/// A scheduled data-integrity manipulation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Activation time t_a (s).
    pub start: f64,
    pub waveform: Waveform,
    pub bias: ChannelBias,
}

impl AttackSpec {
    /// Exogenous signal added to manipulated channels at time `t`, or `None`
    /// while inactive.
    pub fn injection(&self, t: f64) -> Option<ChannelBias> {
        if t < self.start {
            return None;
        }
        Some(match self.waveform {
            Waveform::Constant => self.bias,
            Waveform::Ramp => self.bias.scaled(t - self.start),
        })
    }

    pub fn validate(&self, graph: &CommGraph) -> Result<()> {
        if self.start < 0.0 || !self.start.is_finite() {
            return Err(Error::Config("attack start time must be finite and >= 0".into()));
        }
        match self.kind {
            AttackKind::Fdi { node } => {
                if node >= graph.n {
                    return Err(Error::Config(format!(
                        "FDI target {node} has no transmitter (n={})",
                        graph.n
                    )));
                }
            }
            AttackKind::Mitm { link: (a, b) } => {
                if !graph.has_link(a, b) {
                    return Err(Error::Config(format!("MITM target link {a}-{b} does not exist")));
                }
            }
        }
        Ok(())
    }
}

/// Per-receiver view of neighbor measurements after routing and corruption.
///
/// Entry `[l][m]` is DG m's measurement as received by DG l; the diagonal is
/// each DG's own (trusted) local measurement, and off-diagonal support is
/// exactly the in-edge set of the active arborescence.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedMatrix {
    pub n: usize,
    pub r_omega: Vec<f64>,
    pub r_p: Vec<f64>,
    pub r_q: Vec<f64>,
    /// Frequency reference as received by the root (Hz).
    pub leader_ref: f64,
}

impl ReceivedMatrix {
    pub fn zeros(n: usize, leader_ref: f64) -> Self {
        ReceivedMatrix {
            n,
            r_omega: vec![0.0; n * n],
            r_p: vec![0.0; n * n],
            r_q: vec![0.0; n * n],
            leader_ref,
        }
    }

    #[inline]
    pub fn idx(&self, receiver: usize, sender: usize) -> usize {
        receiver * self.n + sender
    }

    pub fn omega(&self, receiver: usize, sender: usize) -> f64 {
        self.r_omega[self.idx(receiver, sender)]
    }

    pub fn p(&self, receiver: usize, sender: usize) -> f64 {
        self.r_p[self.idx(receiver, sender)]
    }

    pub fn q(&self, receiver: usize, sender: usize) -> f64 {
        self.r_q[self.idx(receiver, sender)]
    }

    pub fn all_finite(&self) -> bool {
        self.r_omega.iter().chain(&self.r_p).chain(&self.r_q).all(|x| x.is_finite())
            && self.leader_ref.is_finite()
    }
}

/// Route true per-DG measurements along the active arborescence, applying
/// any active attacks. FDI corrupts every tree edge leaving the target node;
/// MITM corrupts every tree edge over the target link, in either direction.
/// Corruptions compose additively. Local (diagonal) sensing is never
/// corrupted.
pub fn route(
    true_omega: &[f64],
    true_p: &[f64],
    true_q: &[f64],
    leader_ref: f64,
    tree: &Arborescence,
    attacks: &[AttackSpec],
    t: f64,
) -> Result<ReceivedMatrix> {
    let n = true_omega.len();
    if true_p.len() != n || true_q.len() != n {
        return Err(Error::InvalidState("route input length mismatch".into()));
    }
    if tree.n() != n {
        return Err(Error::Topology(format!(
            "tree covers {} nodes, measurements cover {n}",
            tree.n()
        )));
    }
    for a in attacks {
        match a.kind {
            AttackKind::Fdi { node } if node >= n => {
                return Err(Error::Config(format!("FDI target {node} outside 0..{n}")));
            }
            AttackKind::Mitm { link: (x, y) } if x >= n || y >= n || x == y => {
                return Err(Error::Config(format!("MITM target link {x}-{y} invalid for n={n}")));
            }
            _ => {}
        }
    }
    let mut rx = ReceivedMatrix::zeros(n, leader_ref);
    for l in 0..n {
        let d = rx.idx(l, l);
        rx.r_omega[d] = true_omega[l];
        rx.r_p[d] = true_p[l];
        rx.r_q[d] = true_q[l];
    }
    for &(from, to) in &tree.edges {
        let mut w = true_omega[from];
        let mut p = true_p[from];
        let mut q = true_q[from];
        for a in attacks {
            let hit = match a.kind {
                AttackKind::Fdi { node } => node == from,
                AttackKind::Mitm { link: (x, y) } => {
                    (x.min(y), x.max(y)) == (from.min(to), from.max(to))
                }
            };
            if hit {
                if let Some(bias) = a.injection(t) {
                    w += bias.omega;
                    p += bias.p;
                    q += bias.q;
                }
            }
        }
        let i = rx.idx(to, from);
        rx.r_omega[i] = w;
        rx.r_p[i] = p;
        rx.r_q[i] = q;
    }
    Ok(rx)
}

/// Enumerate every arborescence rooted at `root` over the bidirected version
/// of the link set, in lexicographic order of the sorted undirected edge
/// list. Errors with `CapExceeded` beyond `cap` trees.
pub fn enumerate_arborescences(graph: &CommGraph, root: usize, cap: usize) -> Result<TreeSet> {
    if root >= graph.n {
        return Err(Error::Config(format!("root {root} outside 0..{}", graph.n)));
    }
    if !graph.is_connected() {
        return Err(Error::Topology("communication graph is not connected".into()));
    }
    // For a bidirected graph, arborescences rooted at r correspond one-to-one
    // with undirected spanning trees, oriented away from r.
    let subsets = spanning_tree_edge_sets(graph.n, &graph.links, cap)?;
    let trees = subsets
        .iter()
        .map(|set| orient_from_root(graph.n, &graph.links, set, root))
        .collect();
    Ok(TreeSet { trees })
}

/// All spanning-tree edge-index subsets in lexicographic order.
fn spanning_tree_edge_sets(n: usize, links: &[(usize, usize)], cap: usize) -> Result<Vec<Vec<usize>>> {
    if n == 1 {
        return Ok(vec![Vec::new()]);
    }
    let mut out = Vec::new();
    let mut chosen = Vec::new();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        let mut c = x;
        while parent[c] != c {
            let next = parent[c];
            parent[c] = r;
            c = next;
        }
        r
    }
    fn rec(
        start: usize,
        n: usize,
        links: &[(usize, usize)],
        chosen: &mut Vec<usize>,
        parent: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
        cap: usize,
    ) -> Result<()> {
        if chosen.len() == n - 1 {
            if out.len() >= cap {
                return Err(Error::CapExceeded { cap });
            }
            out.push(chosen.clone());
            return Ok(());
        }
        let needed = n - 1 - chosen.len();
        for i in start..links.len() {
            if links.len() - i < needed {
                break;
            }
            let (a, b) = links[i];
            let (ra, rb) = (find(parent, a), find(parent, b));
            if ra == rb {
                continue; // would close a cycle
            }
            let saved = parent.clone();
            parent[ra] = rb;
            chosen.push(i);
            rec(i + 1, n, links, chosen, parent, out, cap)?;
            chosen.pop();
            *parent = saved;
        }
        Ok(())
    }
    rec(0, n, links, &mut chosen, &mut parent, &mut out, cap)?;
    Ok(out)
}

fn orient_from_root(n: usize, links: &[(usize, usize)], set: &[usize], root: usize) -> Arborescence {
    let mut adj = vec![Vec::new(); n];
    for &i in set {
        let (a, b) = links[i];
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut seen = vec![false; n];
    let mut stack = vec![root];
    seen[root] = true;
    while let Some(u) = stack.pop() {
        for &w in &adj[u] {
            if !seen[w] {
                seen[w] = true;
                edges.push((u, w));
                stack.push(w);
            }
        }
    }
    Arborescence::new(root, &edges)
}

/// Count arborescences rooted at `root` by the directed matrix-tree theorem:
/// determinant of the in-degree Laplacian with the root row/column removed,
/// evaluated exactly in integer arithmetic. Returns 0 for disconnected
/// graphs.
pub fn count_arborescences(graph: &CommGraph, root: usize) -> Result<u64> {
    if root >= graph.n {
        return Err(Error::Config(format!("root {root} outside 0..{}", graph.n)));
    }
    let n = graph.n;
    if n == 1 {
        return Ok(1);
    }
    // Bidirected: in-degree equals undirected degree and the adjacency part
    // is symmetric.
    let keep: Vec<usize> = (0..n).filter(|&v| v != root).collect();
    let m = n - 1;
    let mut mat = vec![0i128; m * m];
    for (i, &vi) in keep.iter().enumerate() {
        for (j, &vj) in keep.iter().enumerate() {
            if i == j {
                let deg = graph.links.iter().filter(|&&(a, b)| a == vi || b == vi).count();
                mat[i * m + j] = deg as i128;
            } else if graph.has_link(vi, vj) {
                mat[i * m + j] = -1;
            }
        }
    }
    let det = bareiss_det(&mut mat, m);
    Ok(u64::try_from(det.max(0)).unwrap_or(0))
}

/// Fraction-free Bareiss elimination; exact for integer matrices.
fn bareiss_det(mat: &mut [i128], m: usize) -> i128 {
    if m == 0 {
        return 1;
    }
    let mut sign = 1i128;
    let mut prev = 1i128;
    for k in 0..m - 1 {
        if mat[k * m + k] == 0 {
            let swap = (k + 1..m).find(|&r| mat[r * m + k] != 0);
            match swap {
                Some(r) => {
                    for c in 0..m {
                        mat.swap(k * m + c, r * m + c);
                    }
                    sign = -sign;
                }
                None => return 0,
            }
        }
        for i in k + 1..m {
            for j in k + 1..m {
                mat[i * m + j] =
                    (mat[i * m + j] * mat[k * m + k] - mat[i * m + k] * mat[k * m + j]) / prev;
            }
            mat[i * m + k] = 0;
        }
        prev = mat[k * m + k];
    }
    sign * mat[(m - 1) * m + (m - 1)]
}

/// Subset of `trees` that relies on no compromised transmitter as a sender
/// and no compromised repeater link.
pub fn admissible_trees(trees: &TreeSet, health: &DeviceHealth) -> TreeSet {
    let ok = |t: &Arborescence| {
        t.edges.iter().all(|&(from, to)| {
            !health.compromised_transmitters.contains(&from)
                && !health
                    .compromised_repeaters
                    .contains(&(from.min(to), from.max(to)))
        })
    };
    TreeSet {
        trees: trees.trees.iter().filter(|t| ok(t)).cloned().collect(),
    }
}

/// True iff some leader candidate can root an arborescence that avoids every
/// compromised device. Equivalent to full-enumeration filtering but computed
/// by reachability over the healthy directed edges.
pub fn resilience_exists(graph: &CommGraph, health: &DeviceHealth) -> Result<bool> {
    if !graph.is_connected() {
        return Err(Error::Topology("communication graph is not connected".into()));
    }
    let n = graph.n;
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in &graph.links {
        if health.compromised_repeaters.contains(&(a, b)) {
            continue;
        }
        if !health.compromised_transmitters.contains(&a) {
            adj[a].push(b);
        }
        if !health.compromised_transmitters.contains(&b) {
            adj[b].push(a);
        }
    }
    'roots: for &r in &graph.leader_candidates {
        let mut seen = vec![false; n];
        let mut stack = vec![r];
        seen[r] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &w in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        if count == n {
            return Ok(true);
        }
        continue 'roots;
    }
    Ok(false)
}

/// Complete graph on `n` nodes, all nodes leader candidates.
pub fn complete_graph(n: usize) -> CommGraph {
    let mut links = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            links.push((a, b));
        }
    }
    CommGraph::new(n, &links, &(0..n).collect::<Vec<_>>()).expect("complete graph is valid")
}

/// Ring graph on `n` nodes, all nodes leader candidates.
pub fn ring_graph(n: usize) -> CommGraph {
    let links: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    CommGraph::new(n, &links, &(0..n).collect::<Vec<_>>()).expect("ring graph is valid")
}
