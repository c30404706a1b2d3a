//! Lazily materialized Galton-Watson tree carrying the random environment.
//!
//! Vertices are addressed by their path word ([`NodeId`]); the randomness of
//! a vertex (its child count and the `A`-values of its children) comes from a
//! stream keyed by `(master_seed, path)`. Internally vertices live in an arena
//! and are referenced by [`VertexHandle`], which lets a walker move in O(1)
//! without rehashing long paths.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fmt::num;
use crate::model::ModelSpec;
use crate::rng::StreamKey;

/// Default cap on vertices produced by `enumerate_to_depth`.
pub const DEFAULT_NODE_BUDGET: usize = 1_000_000;

/// Path word of a vertex: 1-based child indices from the root. Empty = root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct NodeId(Vec<u32>);

impl NodeId {
    pub fn root() -> Self {
        NodeId(Vec::new())
    }

    pub fn from_path(path: Vec<u32>) -> Result<Self> {
        if path.contains(&0) {
            return Err(Error::OutOfRange("child indices are 1-based".into()));
        }
        Ok(NodeId(path))
    }

    pub fn path(&self) -> &[u32] {
        &self.0
    }

    pub fn generation(&self) -> usize {
        self.0.len()
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn child(&self, index: u32) -> Self {
        assert!(index >= 1, "child indices are 1-based");
        let mut p = self.0.clone();
        p.push(index);
        NodeId(p)
    }

    pub fn parent(&self) -> Option<Self> {
        if self.is_root() {
            None
        } else {
            Some(NodeId(self.0[..self.0.len() - 1].to_vec()))
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("e");
        }
        for (j, i) in self.0.iter().enumerate() {
            if j > 0 {
                f.write_str(".")?;
            }
            write!(f, "{i}")?;
        }
        Ok(())
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "e" {
            return Ok(NodeId::root());
        }
        let path = s
            .split('.')
            .map(|p| p.parse::<u32>().map_err(|_| Error::OutOfRange(format!("bad node path {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        NodeId::from_path(path)
    }
}

/// Environment seen from one vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexState {
    pub nu: u32,
    /// `A(x_i)` for each child.
    pub child_weights: Vec<f64>,
    /// `w(x, x_i) = A(x_i) / (1 + sum_j A(x_j))`.
    pub trans_children: Vec<f64>,
    /// `w(x, parent) = 1 / (1 + sum_j A(x_j))`.
    pub trans_parent: f64,
}

impl VertexState {
    pub fn from_weights(child_weights: Vec<f64>) -> Self {
        let total = 1.0 + child_weights.iter().sum::<f64>();
        VertexState {
            nu: child_weights.len() as u32,
            trans_children: child_weights.iter().map(|a| a / total).collect(),
            trans_parent: 1.0 / total,
            child_weights,
        }
    }

    /// Draws the state from the vertex stream.
    pub fn sample(model: &ModelSpec, key: StreamKey) -> Self {
        let mut rng = key.rng();
        let nu = model.offspring.sample(&mut rng);
        let weights = (0..nu).map(|_| model.env.sample(&mut rng)).collect();
        Self::from_weights(weights)
    }

    pub fn total_mass(&self) -> f64 {
        self.trans_parent + self.trans_children.iter().sum::<f64>()
    }
}

/// Arena index of a vertex inside one [`LazyTree`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VertexHandle(u32);

impl VertexHandle {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Slot {
    parent: u32,
    child_index: u32,
    depth: u32,
    key: StreamKey,
    children: Box<[u32]>,
    state: Option<VertexState>,
    last_used: u64,
}

#[derive(Debug, Clone)]
pub struct LazyTree {
    model: ModelSpec,
    master_seed: u64,
    slots: Vec<Slot>,
    resident: usize,
    cache_cap: Option<usize>,
    clock: u64,
    materializations: u64,
}

impl LazyTree {
    pub fn new(model: ModelSpec, master_seed: u64) -> Self {
        let root = Slot {
            parent: NONE,
            child_index: 0,
            depth: 0,
            key: StreamKey::new(master_seed).domain("tree"),
            children: Box::new([]),
            state: None,
            last_used: 0,
        };
        LazyTree {
            model,
            master_seed,
            slots: vec![root],
            resident: 0,
            cache_cap: None,
            clock: 0,
            materializations: 0,
        }
    }

    /// Bounds the number of vertex states kept in memory. When the bound is
    /// exceeded the least recently used half is dropped; a dropped state is
    /// recomputed from its stream on next access.
    pub fn with_cache_cap(mut self, cap: usize) -> Self {
        self.cache_cap = Some(cap.max(2));
        self
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn root(&self) -> VertexHandle {
        VertexHandle(0)
    }

    /// Handle for arena index `j`.
    pub fn handle(&self, j: usize) -> VertexHandle {
        assert!(j < self.slots.len(), "no vertex slot {j}");
        VertexHandle(j as u32)
    }

    pub fn parent(&self, h: VertexHandle) -> Option<VertexHandle> {
        let p = self.slots[h.index()].parent;
        (p != NONE).then_some(VertexHandle(p))
    }

    pub fn depth(&self, h: VertexHandle) -> u32 {
        self.slots[h.index()].depth
    }

    /// Number of vertex slots ever created.
    pub fn known_vertices(&self) -> usize {
        self.slots.len()
    }

    /// Number of vertex states currently held.
    pub fn resident_states(&self) -> usize {
        self.resident
    }

    /// Total number of state draws, including re-materializations.
    pub fn materializations(&self) -> u64 {
        self.materializations
    }

    pub fn node_id(&self, h: VertexHandle) -> NodeId {
        let mut path = Vec::with_capacity(self.depth(h) as usize);
        let mut cur = h.0;
        while self.slots[cur as usize].parent != NONE {
            path.push(self.slots[cur as usize].child_index);
            cur = self.slots[cur as usize].parent;
        }
        path.reverse();
        NodeId(path)
    }

    /// State of `h`, materializing it if needed.
    pub fn state(&mut self, h: VertexHandle) -> &VertexState {
        self.ensure(h);
        self.slots[h.index()].state.as_ref().expect("materialized")
    }

    fn ensure(&mut self, h: VertexHandle) {
        self.clock += 1;
        let clock = self.clock;
        let slot = &mut self.slots[h.index()];
        slot.last_used = clock;
        if slot.state.is_some() {
            return;
        }
        let state = VertexState::sample(&self.model, slot.key);
        if slot.children.is_empty() && state.nu > 0 {
            slot.children = vec![NONE; state.nu as usize].into_boxed_slice();
        }
        slot.state = Some(state);
        self.resident += 1;
        self.materializations += 1;
        if let Some(cap) = self.cache_cap {
            if self.resident > cap {
                self.evict(h, cap / 2);
            }
        }
    }

    fn evict(&mut self, keep: VertexHandle, target: usize) {
        let mut resident: Vec<(u64, usize)> = self
            .slots
            .iter()
            .enumerate()
            .filter(|(j, s)| s.state.is_some() && *j != keep.index())
            .map(|(j, s)| (s.last_used, j))
            .collect();
        let drop = resident.len().saturating_sub(target);
        if drop == 0 {
            return;
        }
        resident.select_nth_unstable(drop - 1);
        for &(_, j) in &resident[..drop] {
            self.slots[j].state = None;
        }
        self.resident -= drop;
    }

    /// Handle of the `i`-th child (0-based), creating the slot on first use.
    pub fn child(&mut self, h: VertexHandle, i: u32) -> VertexHandle {
        self.ensure(h);
        let existing = self.slots[h.index()].children[i as usize];
        if existing != NONE {
            return VertexHandle(existing);
        }
        let parent = &self.slots[h.index()];
        let slot = Slot {
            parent: h.0,
            child_index: i + 1,
            depth: parent.depth + 1,
            key: parent.key.split(i as u64 + 1),
            children: Box::new([]),
            state: None,
            last_used: 0,
        };
        let idx = u32::try_from(self.slots.len()).expect("vertex arena overflow");
        self.slots.push(slot);
        self.slots[h.index()].children[i as usize] = idx;
        VertexHandle(idx)
    }

    /// Walks the path word from the root; `None` if the path leaves the tree.
    pub fn locate(&mut self, x: &NodeId) -> Option<VertexHandle> {
        let mut h = self.root();
        for &i in x.path() {
            if i > self.state(h).nu {
                return None;
            }
            h = self.child(h, i - 1);
        }
        Some(h)
    }

    /// Materializes `x` and returns its state.
    pub fn materialize(&mut self, x: &NodeId) -> Result<VertexState> {
        let h = self
            .locate(x)
            .ok_or_else(|| Error::OutOfRange(format!("vertex {x} is not in the tree")))?;
        Ok(self.state(h).clone())
    }

    /// Materializes every vertex of generation at most `depth` and returns
    /// them in breadth-first order.
    pub fn enumerate_to_depth(&mut self, depth: u32, budget: usize) -> Result<TruncatedTree> {
        let m = self.model.offspring.mean();
        let expected: f64 = (0..=depth).map(|l| m.powi(l as i32)).sum();
        if expected > budget as f64 {
            return Err(Error::BudgetExceeded {
                what: "tree enumeration (expected size)",
                needed: expected,
                budget: budget as f64,
            });
        }
        let mut handles = vec![self.root()];
        let mut parents: Vec<Option<usize>> = vec![None];
        let mut level_start = vec![0usize];
        let mut nodes: Vec<TruncatedNode> = Vec::new();
        let mut head = 0;
        while head < handles.len() {
            let h = handles[head];
            let d = self.depth(h);
            if d as usize == level_start.len() {
                level_start.push(head);
            }
            let state = self.state(h).clone();
            let parent = parents[head];
            let mut first_child = usize::MAX;
            if d < depth {
                first_child = handles.len();
                if first_child + state.nu as usize > budget {
                    return Err(Error::BudgetExceeded {
                        what: "tree enumeration",
                        needed: (first_child + state.nu as usize) as f64,
                        budget: budget as f64,
                    });
                }
                for i in 0..state.nu {
                    let c = self.child(h, i);
                    handles.push(c);
                    parents.push(Some(head));
                }
            }
            nodes.push(TruncatedNode {
                parent,
                child_index: self.slots[h.index()].child_index,
                depth: d,
                state,
                first_child,
            });
            head += 1;
        }
        level_start.push(nodes.len());
        Ok(TruncatedTree { depth, nodes, level_start })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedNode {
    /// Breadth-first position of the parent.
    pub parent: Option<usize>,
    /// 1-based index among siblings (0 for the root).
    pub child_index: u32,
    pub depth: u32,
    pub state: VertexState,
    /// Breadth-first position of the first child; children are contiguous.
    /// `usize::MAX` for vertices at the truncation depth.
    pub first_child: usize,
}

impl TruncatedNode {
    pub fn children(&self) -> std::ops::Range<usize> {
        if self.first_child == usize::MAX {
            0..0
        } else {
            self.first_child..self.first_child + self.state.nu as usize
        }
    }
}

/// Snapshot of every vertex up to a fixed generation, breadth-first.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedTree {
    depth: u32,
    nodes: Vec<TruncatedNode>,
    level_start: Vec<usize>,
}

impl TruncatedTree {
    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TruncatedNode] {
        &self.nodes
    }

    pub fn node(&self, j: usize) -> &TruncatedNode {
        &self.nodes[j]
    }

    /// Breadth-first positions of generation `d`.
    pub fn level(&self, d: u32) -> std::ops::Range<usize> {
        self.level_start[d as usize]..self.level_start[d as usize + 1]
    }

    pub fn node_id(&self, mut j: usize) -> NodeId {
        let mut path = Vec::new();
        while let Some(p) = self.nodes[j].parent {
            path.push(self.nodes[j].child_index);
            j = p;
        }
        path.reverse();
        NodeId(path)
    }

    pub fn find(&self, x: &NodeId) -> Option<usize> {
        if x.generation() > self.depth as usize {
            return None;
        }
        let mut j = 0;
        for &i in x.path() {
            let node = &self.nodes[j];
            if i > node.state.nu {
                return None;
            }
            j = node.first_child + (i as usize - 1);
        }
        Some(j)
    }

    /// Breadth-first positions of the subtree of `j`, truncated `rel_depth`
    /// generations below it.
    pub fn subtree(&self, j: usize, rel_depth: u32) -> Vec<usize> {
        let mut out = vec![j];
        let mut frontier = vec![j];
        for _ in 0..rel_depth {
            let mut next = Vec::new();
            for &v in &frontier {
                next.extend(self.nodes[v].children());
            }
            out.extend_from_slice(&next);
            frontier = next;
        }
        out
    }

    /// Product of transition probabilities along the geodesic root -> `j`.
    pub fn geodesic_product(&self, mut j: usize) -> f64 {
        let mut p = 1.0;
        while let Some(parent) = self.nodes[j].parent {
            let k = self.nodes[j].child_index as usize - 1;
            p *= self.nodes[parent].state.trans_children[k];
            j = parent;
        }
        p
    }

    /// Line-oriented edge list. Columns: parent path (`e` for the root,
    /// otherwise dot-separated 1-based indices), child index, `A` of the
    /// child, `w(parent, child)`, `w(child, parent)`.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::from("parent_path,child_index,a_value,omega_down,omega_up\n");
        for (j, node) in self.nodes.iter().enumerate() {
            let id = self.node_id(j);
            for (k, c) in node.children().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    id,
                    k + 1,
                    num(node.state.child_weights[k]),
                    num(node.state.trans_children[k]),
                    num(self.nodes[c].state.trans_parent),
                ));
            }
        }
        out
    }
}
