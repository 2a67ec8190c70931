//! kD-tree over the normalized scene cube whose leaves own radiance mixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::em::{em_step, ComponentStats, EmConfig, EmState, SufficientStats, WeightedSample};
use crate::error::{Error, Result};
use crate::gaussian::{Layout, Point};
use crate::geometry::UnitVec3;
use crate::mixture::Sdmm;
use crate::model_init::{init_leaf_mixture, InitConfig, SeedPoint};
use crate::par::{self, Execution};
use crate::serialize::{self, Reader, Writer};

pub const TREE_MAGIC: &[u8; 4] = b"SDKT";
pub const TREE_VERSION: u32 = 1;

/// Components per initialized leaf.
pub const LEAF_COMPONENTS: usize = 16;

/// A training sample recorded at a path vertex.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathVertex {
    /// Position normalized to the unit cube.
    pub position: [f64; 3],
    pub normal: UnitVec3,
    /// Sampled incident direction, world space.
    pub direction: UnitVec3,
    /// Monte Carlo estimate of incident radiance along `direction`.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeConfig {
    /// Leaves holding more vertices than this are split.
    pub subdivision_threshold: usize,
    /// Splits per axis in the initial regular grid.
    pub initial_splits: u32,
    pub em: EmConfig,
    pub init: InitConfig,
    pub seed: u64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            subdivision_threshold: 16_000,
            initial_splits: 3,
            em: EmConfig::new(Layout::RADIANCE, LEAF_COMPONENTS),
            init: InitConfig::default(),
            seed: 0,
        }
    }
}

impl TreeConfig {
    fn buffer_capacity(&self) -> usize {
        4 * self.subdivision_threshold
    }

    fn initial_depth(&self) -> u32 {
        3 * self.initial_splits
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub const UNIT: Aabb = Aabb { min: [0.0; 3], max: [1.0; 3] };

    pub fn longest_side(&self) -> f64 {
        (0..3).map(|a| self.max[a] - self.min[a]).fold(0.0, f64::max)
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    fn split(&self, axis: usize, at: f64) -> (Aabb, Aabb) {
        let mut lo = *self;
        let mut hi = *self;
        lo.max[axis] = at;
        hi.min[axis] = at;
        (lo, hi)
    }

    fn union(&self, o: &Aabb) -> Aabb {
        let mut out = *self;
        for a in 0..3 {
            out.min[a] = out.min[a].min(o.min[a]);
            out.max[a] = out.max[a].max(o.max[a]);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Leaf {
    pub bounds: Aabb,
    pub depth: u32,
    pub mixture: Option<Sdmm>,
    pub em: EmState,
    pub vertices: Vec<PathVertex>,
    /// Vertices offered to the buffer since it was last cleared.
    seen: u64,
    /// Vertices deposited during the current iteration.
    pub iteration_count: u64,
    rng: ChaCha8Rng,
    stream: u64,
    last_outcome: (bool, bool, bool),
}

impl Leaf {
    fn new(bounds: Aabb, depth: u32, stream: u64) -> Self {
        Leaf {
            bounds,
            depth,
            mixture: None,
            em: EmState::default(),
            vertices: Vec::new(),
            seen: 0,
            iteration_count: 0,
            rng: ChaCha8Rng::seed_from_u64(stream),
            stream,
            last_outcome: (false, false, false),
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.mixture.is_some()
    }

    fn push(&mut self, v: PathVertex, capacity: usize) {
        self.seen += 1;
        self.iteration_count += 1;
        if self.vertices.len() < capacity {
            self.vertices.push(v);
        } else {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < capacity {
                self.vertices[j as usize] = v;
            }
        }
    }

    fn clear_buffer(&mut self) {
        self.vertices.clear();
        self.seen = 0;
    }
}

#[derive(Clone, Debug)]
enum Node {
    Internal { axis: u8, split: f64, children: [usize; 2] },
    Leaf(Box<Leaf>),
}

/// Outcome counters of one training pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainReport {
    pub initialized: usize,
    pub trained: usize,
    pub failed: usize,
}

#[derive(Clone, Debug)]
pub struct SpatialTree {
    nodes: Vec<Node>,
    cfg: TreeConfig,
}

fn mix_stream(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words.
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SpatialTree {
    /// Regular grid from `cfg.initial_splits` center splits per axis.
    pub fn build_initial(cfg: TreeConfig) -> Self {
        let mut tree = SpatialTree { nodes: Vec::new(), cfg };
        let depth = tree.cfg.initial_depth();
        let root_stream = mix_stream(tree.cfg.seed, 1);
        tree.build_grid(Aabb::UNIT, 0, depth, root_stream);
        tree
    }

    fn build_grid(&mut self, bounds: Aabb, depth: u32, max_depth: u32, stream: u64) -> usize {
        let idx = self.nodes.len();
        if depth == max_depth {
            self.nodes.push(Node::Leaf(Box::new(Leaf::new(bounds, depth, stream))));
            return idx;
        }
        self.nodes.push(Node::Internal { axis: 0, split: 0.0, children: [0, 0] });
        let axis = (depth % 3) as usize;
        let at = 0.5 * (bounds.min[axis] + bounds.max[axis]);
        let (lo, hi) = bounds.split(axis, at);
        let a = self.build_grid(lo, depth + 1, max_depth, mix_stream(stream, 2));
        let b = self.build_grid(hi, depth + 1, max_depth, mix_stream(stream, 3));
        self.nodes[idx] = Node::Internal { axis: axis as u8, split: at, children: [a, b] };
        idx
    }

    pub fn config(&self) -> &TreeConfig {
        &self.cfg
    }

    pub fn set_config(&mut self, cfg: TreeConfig) {
        self.cfg = cfg;
    }

    /// Node index of the leaf containing `x`. Points on a split plane go to
    /// the upper child.
    pub fn lookup(&self, x: &[f64; 3]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Internal { axis, split, children } => {
                    i = if x[*axis as usize] >= *split { children[1] } else { children[0] };
                }
                Node::Leaf(_) => return i,
            }
        }
    }

    pub fn leaf(&self, handle: usize) -> &Leaf {
        match &self.nodes[handle] {
            Node::Leaf(l) => l,
            Node::Internal { .. } => panic!("node {handle} is not a leaf"),
        }
    }

    pub fn leaf_at(&self, x: &[f64; 3]) -> &Leaf {
        self.leaf(self.lookup(x))
    }

    /// Node indices of all leaves, in pre-order.
    pub fn leaf_handles(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0];
        while let Some(i) = stack.pop() {
            match &self.nodes[i] {
                Node::Internal { children, .. } => {
                    stack.push(children[1]);
                    stack.push(children[0]);
                }
                Node::Leaf(_) => out.push(i),
            }
        }
        out
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_handles().len()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Leaf> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf(l) => Some(l.as_ref()),
            Node::Internal { .. } => None,
        })
    }

    /// Starts a new deposition round.
    pub fn begin_iteration(&mut self) {
        for n in &mut self.nodes {
            if let Node::Leaf(l) = n {
                l.iteration_count = 0;
            }
        }
    }

    /// Routes vertices to their leaves in the given order.
    pub fn deposit(&mut self, vertices: &[PathVertex]) {
        let cap = self.cfg.buffer_capacity();
        for v in vertices {
            let mut p = v.position;
            for c in &mut p {
                *c = c.clamp(0.0, 1.0);
            }
            let h = self.lookup(&p);
            if let Node::Leaf(l) = &mut self.nodes[h] {
                l.push(PathVertex { position: p, ..*v }, cap);
            }
        }
    }

    /// Splits every leaf holding more than the threshold, recursively.
    pub fn refine(&mut self) {
        let mut work = self.leaf_handles();
        while let Some(h) = work.pop() {
            let Node::Leaf(leaf) = &self.nodes[h] else { continue };
            if leaf.vertices.len() <= self.cfg.subdivision_threshold {
                continue;
            }
            let Some((axis, at)) = split_plane(&leaf.vertices) else { continue };
            let Node::Leaf(leaf) =
                std::mem::replace(&mut self.nodes[h], Node::Internal { axis: 0, split: 0.0, children: [0, 0] })
            else {
                unreachable!()
            };
            let leaf = *leaf;
            let (lo_b, hi_b) = leaf.bounds.split(axis, at);
            let (lo_v, hi_v): (Vec<PathVertex>, Vec<PathVertex>) =
                leaf.vertices.iter().partition(|v| v.position[axis] < at);
            let mut children = [0usize; 2];
            for (slot, (b, verts)) in [(lo_b, lo_v), (hi_b, hi_v)].into_iter().enumerate() {
                let mut child = Leaf::new(b, leaf.depth + 1, mix_stream(leaf.stream, 2 + slot as u64));
                child.mixture = leaf.mixture.clone();
                child.em = leaf.em.clone();
                child.seen = verts.len() as u64;
                child.iteration_count = verts.len() as u64;
                child.vertices = verts;
                children[slot] = self.nodes.len();
                self.nodes.push(Node::Leaf(Box::new(child)));
                work.push(children[slot]);
            }
            self.nodes[h] = Node::Internal { axis: axis as u8, split: at, children };
        }
    }

    /// Initializes and runs one EM step on every leaf with at least
    /// `min_batch` vertices. Initialized leaves clear their buffer afterwards;
    /// uninitialized leaves below the minimum keep accumulating.
    pub fn train_leaves(&mut self, exec: Execution) -> TrainReport {
        let cfg = self.cfg.clone();
        let mut leaves: Vec<&mut Leaf> = self
            .nodes
            .iter_mut()
            .filter_map(|n| match n {
                Node::Leaf(l) => Some(l.as_mut()),
                Node::Internal { .. } => None,
            })
            .collect();
        par::for_each_mut(exec, &mut leaves, |leaf| leaf.last_outcome = train_leaf(leaf, &cfg));
        let mut report = TrainReport::default();
        for l in &leaves {
            let (i, t, f) = l.last_outcome;
            report.initialized += i as usize;
            report.trained += t as usize;
            report.failed += f as usize;
        }
        report
    }

    /// Merges sibling leaves below the initial grid whose combined vertex
    /// count in the last iteration is under a quarter of the threshold.
    pub fn collapse(&mut self) -> usize {
        let floor = self.cfg.initial_depth();
        let limit = (self.cfg.subdivision_threshold / 4) as u64;
        let mut merged = 0;
        loop {
            let mut changed = false;
            for i in 0..self.nodes.len() {
                let Node::Internal { children, .. } = &self.nodes[i] else { continue };
                let [a, b] = *children;
                let (Node::Leaf(la), Node::Leaf(lb)) = (&self.nodes[a], &self.nodes[b]) else { continue };
                if la.depth <= floor || la.iteration_count + lb.iteration_count >= limit {
                    continue;
                }
                let leaf = merge_leaves(la, lb);
                self.nodes[i] = Node::Leaf(Box::new(leaf));
                merged += 1;
                changed = true;
            }
            if !changed {
                break;
            }
        }
        if merged > 0 {
            self.compact();
        }
        merged
    }

    /// Drops unreachable nodes left behind by merges.
    fn compact(&mut self) {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        let old = std::mem::take(&mut self.nodes);
        let mut old: Vec<Option<Node>> = old.into_iter().map(Some).collect();
        fn copy(i: usize, old: &mut [Option<Node>], out: &mut Vec<Node>) -> usize {
            let idx = out.len();
            let node = old[i].take().expect("node visited once");
            match node {
                Node::Internal { axis, split, children } => {
                    out.push(Node::Internal { axis, split, children: [0, 0] });
                    let a = copy(children[0], old, out);
                    let b = copy(children[1], old, out);
                    out[idx] = Node::Internal { axis, split, children: [a, b] };
                }
                leaf => out.push(leaf),
            }
            idx
        }
        copy(0, &mut old, &mut nodes);
        self.nodes = nodes;
    }

    /// Stable hash of the structure and every leaf mixture.
    pub fn fingerprint(&self) -> u64 {
        serialize::fnv1a(&self.to_bytes())
    }

    /// Checkpoint: pre-order node list with leaf mixtures.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(TREE_MAGIC);
        w.u32(TREE_VERSION);
        w.u32(self.cfg.initial_splits);
        let mut stack = vec![0];
        while let Some(i) = stack.pop() {
            match &self.nodes[i] {
                Node::Internal { axis, split, children } => {
                    w.u8(0);
                    w.u8(*axis);
                    w.f64(*split);
                    stack.push(children[1]);
                    stack.push(children[0]);
                }
                Node::Leaf(l) => {
                    w.u8(1);
                    for a in 0..3 {
                        w.f64(l.bounds.min[a]);
                        w.f64(l.bounds.max[a]);
                    }
                    w.u32(l.depth);
                    match &l.mixture {
                        Some(m) => {
                            w.u8(1);
                            w.blob(&serialize::mixture_to_bytes(m));
                        }
                        None => w.u8(0),
                    }
                }
            }
        }
        w.finish()
    }

    /// Restores a checkpoint. Training state is not stored, so a restored
    /// tree is meant to be rendered with, not trained further.
    pub fn from_bytes(bytes: &[u8], cfg: TreeConfig) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect(TREE_MAGIC)?;
        let version = r.u32()?;
        if version != TREE_VERSION {
            return Err(Error::Format(format!("unsupported tree version {version}")));
        }
        let splits = r.u32()?;
        let mut tree = SpatialTree { nodes: Vec::new(), cfg: TreeConfig { initial_splits: splits, ..cfg } };
        tree.read_node(&mut r, 0)?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after tree".into()));
        }
        Ok(tree)
    }

    fn read_node(&mut self, r: &mut Reader, stream: u64) -> Result<usize> {
        if self.nodes.len() > 1 << 24 {
            return Err(Error::Format("tree too large".into()));
        }
        let idx = self.nodes.len();
        match r.u8()? {
            0 => {
                let axis = r.u8()?;
                if axis > 2 {
                    return Err(Error::Format(format!("bad split axis {axis}")));
                }
                let split = r.f64()?;
                self.nodes.push(Node::Internal { axis, split, children: [0, 0] });
                let a = self.read_node(r, mix_stream(stream, 2))?;
                let b = self.read_node(r, mix_stream(stream, 3))?;
                self.nodes[idx] = Node::Internal { axis, split, children: [a, b] };
            }
            1 => {
                let mut bounds = Aabb::UNIT;
                for a in 0..3 {
                    bounds.min[a] = r.f64()?;
                    bounds.max[a] = r.f64()?;
                }
                let depth = r.u32()?;
                let mut leaf = Leaf::new(bounds, depth, stream);
                if r.u8()? == 1 {
                    let blob = r.blob()?;
                    let m = serialize::mixture_from_bytes(blob)?;
                    if m.layout() != Layout::RADIANCE {
                        return Err(Error::Format("leaf mixture is not spatio-directional".into()));
                    }
                    leaf.mixture = Some(m);
                }
                self.nodes.push(Node::Leaf(Box::new(leaf)));
            }
            t => return Err(Error::Format(format!("bad node tag {t}"))),
        }
        Ok(idx)
    }
}

/// Axis of largest positional variance and the mean along it; `None` when
/// all vertices coincide.
fn split_plane(vertices: &[PathVertex]) -> Option<(usize, f64)> {
    let n = vertices.len() as f64;
    let mut best = None;
    let mut best_var = 0.0;
    for axis in 0..3 {
        let mean = vertices.iter().map(|v| v.position[axis]).sum::<f64>() / n;
        let var = vertices.iter().map(|v| (v.position[axis] - mean).powi(2)).sum::<f64>() / n;
        if var > best_var {
            best_var = var;
            best = Some((axis, mean));
        }
    }
    let (axis, mean) = best?;
    // The mean must separate the points; guard against rounding at tiny spreads.
    let below = vertices.iter().any(|v| v.position[axis] < mean);
    let above = vertices.iter().any(|v| v.position[axis] >= mean);
    (below && above).then_some((axis, mean))
}

fn train_leaf(leaf: &mut Leaf, cfg: &TreeConfig) -> (bool, bool, bool) {
    let (mut initialized, mut trained, mut failed) = (false, false, false);
    if leaf.vertices.len() < cfg.em.min_batch {
        if leaf.is_initialized() {
            leaf.clear_buffer();
        }
        return (initialized, trained, failed);
    }
    if leaf.mixture.is_none() {
        let seeds: Vec<SeedPoint> = leaf
            .vertices
            .iter()
            .map(|v| SeedPoint { position: v.position, normal: v.normal, weight: v.weight })
            .collect();
        match init_leaf_mixture(&seeds, leaf.bounds.longest_side(), &cfg.init, &mut leaf.rng) {
            Ok(m) => {
                leaf.mixture = Some(m);
                initialized = true;
            }
            Err(e) => {
                log::warn!("leaf initialization failed: {e}");
                leaf.clear_buffer();
                return (initialized, trained, true);
            }
        }
    }
    let total: f64 = leaf.vertices.iter().map(|v| v.weight).sum();
    if total > 0.0 {
        let batch: Vec<WeightedSample> = leaf
            .vertices
            .iter()
            .map(|v| WeightedSample { point: Point::radiance(v.direction, v.position), weight: v.weight })
            .collect();
        let current = leaf.mixture.as_ref().expect("initialized above");
        let mut state = leaf.em.clone();
        match em_step(current, &mut state, &batch, &cfg.em, Execution::Sequential) {
            Ok(next) => {
                leaf.mixture = Some(next);
                leaf.em = state;
                trained = true;
            }
            Err(e) => {
                log::warn!("leaf EM step failed, keeping previous mixture: {e}");
                failed = true;
            }
        }
    }
    leaf.clear_buffer();
    (initialized, trained, failed)
}

/// Share-weighted union of two leaves' mixtures reduced to the heaviest
/// components; statistics follow the components they belong to.
fn merge_leaves(a: &Leaf, b: &Leaf) -> Leaf {
    let mut leaf = Leaf::new(a.bounds.union(&b.bounds), a.depth - 1, mix_stream(a.stream, b.stream));
    leaf.iteration_count = a.iteration_count + b.iteration_count;
    leaf.vertices = a.vertices.iter().chain(&b.vertices).copied().collect();
    leaf.seen = leaf.vertices.len() as u64;
    leaf.mixture = match (&a.mixture, &b.mixture) {
        (None, None) => None,
        (Some(m), None) => {
            leaf.em = a.em.clone();
            Some(m.clone())
        }
        (None, Some(m)) => {
            leaf.em = b.em.clone();
            Some(m.clone())
        }
        (Some(ma), Some(mb)) => {
            let total = (a.iteration_count + b.iteration_count) as f64;
            let (sa, sb) = if total > 0.0 {
                (a.iteration_count as f64 / total, b.iteration_count as f64 / total)
            } else {
                (0.5, 0.5)
            };
            let mut pool: Vec<(f64, usize, usize)> = Vec::new();
            for (k, w) in ma.weights().iter().enumerate() {
                pool.push((sa * w, 0, k));
            }
            for (k, w) in mb.weights().iter().enumerate() {
                pool.push((sb * w, 1, k));
            }
            pool.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
            pool.truncate(LEAF_COMPONENTS);
            let src = [ma, mb];
            let states = [&a.em, &b.em];
            let comps = pool.iter().map(|&(_, m, k)| src[m].components()[k].clone()).collect();
            let weights: Vec<f64> = pool.iter().map(|p| p.0).collect();
            let merged = Sdmm::normalized(comps, weights).ok();
            let stats: Option<Vec<ComponentStats>> =
                pool.iter().map(|&(_, m, k)| states[m].stats.as_ref().map(|s| s.comps[k].clone())).collect();
            if let (Some(_), Some(comps)) = (&merged, stats) {
                let pick = |s: &EmState| s.stats.as_ref().map(|s| (s.norm, s.batches)).unwrap_or((0.0, 0));
                let (na, ja) = pick(&a.em);
                let (nb, jb) = pick(&b.em);
                leaf.em = EmState {
                    stats: Some(SufficientStats {
                        layout: Layout::RADIANCE,
                        comps,
                        norm: sa * na + sb * nb,
                        batches: ja.max(jb),
                    }),
                };
            }
            merged.or_else(|| Some(ma.clone()))
        }
    };
    leaf
}
