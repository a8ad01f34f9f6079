//! Max-flow / min-cut on s-t graphs by augmenting paths over two search
//! trees (one rooted at each terminal) that are reused between augmentations.

use std::collections::VecDeque;

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;
/// Parent marker for nodes whose parent is a terminal.
const TERMINAL: usize = usize::MAX - 1;
/// Parent marker for orphans awaiting adoption.
const ORPHAN: usize = usize::MAX - 2;
const INFINITE_DIST: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Source,
    Sink,
}

#[derive(Debug, Clone)]
struct Node {
    first: usize,
    parent: usize,
    next_active: usize,
    active: bool,
    timestamp: u32,
    dist: u32,
    in_sink: bool,
    /// Residual terminal capacity: positive toward the source, negative
    /// toward the sink.
    tr_cap: f64,
}

#[derive(Debug, Clone)]
struct Arc {
    head: usize,
    next: usize,
    r_cap: f64,
}

/// A directed capacitated graph with source and sink terminals.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    arcs: Vec<Arc>,
    /// Original terminal capacities per node: `(source, sink)`.
    terminal: Vec<(f64, f64)>,
    /// Original arc capacities, parallel to `arcs`.
    capacity: Vec<f64>,
    flow: f64,
    active_head: usize,
    active_tail: usize,
    orphans: VecDeque<usize>,
    time: u32,
    solved: bool,
}

fn check(node: usize, cap: f64) -> Result<()> {
    if cap < 0.0 || !cap.is_finite() {
        Err(Error::NegativeCapacity(node))
    } else {
        Ok(())
    }
}

impl Graph {
    pub fn new(nodes: usize) -> Self {
        Self {
            nodes: vec![
                Node {
                    first: NONE,
                    parent: NONE,
                    next_active: NONE,
                    active: false,
                    timestamp: 0,
                    dist: 0,
                    in_sink: false,
                    tr_cap: 0.0,
                };
                nodes
            ],
            arcs: Vec::new(),
            terminal: vec![(0.0, 0.0); nodes],
            capacity: Vec::new(),
            flow: 0.0,
            active_head: NONE,
            active_tail: NONE,
            orphans: VecDeque::new(),
            time: 0,
            solved: false,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Adds capacity from the source to `i` and from `i` to the sink.
    pub fn add_terminal(&mut self, i: usize, source: f64, sink: f64) -> Result<()> {
        check(i, source)?;
        check(i, sink)?;
        self.terminal[i].0 += source;
        self.terminal[i].1 += sink;
        // flow through both terminal edges is pushed immediately
        let (mut s, mut t) = (source, sink);
        let delta = self.nodes[i].tr_cap;
        if delta > 0.0 {
            s += delta;
        } else {
            t -= delta;
        }
        self.flow += s.min(t);
        self.nodes[i].tr_cap = s - t;
        Ok(())
    }

    /// Adds arc `i -> j` with capacity `cap` and `j -> i` with `rev_cap`.
    pub fn add_edge(&mut self, i: usize, j: usize, cap: f64, rev_cap: f64) -> Result<()> {
        check(i, cap)?;
        check(j, rev_cap)?;
        if i == j {
            return Ok(());
        }
        let a = self.arcs.len();
        self.arcs.push(Arc {
            head: j,
            next: self.nodes[i].first,
            r_cap: cap,
        });
        self.nodes[i].first = a;
        self.arcs.push(Arc {
            head: i,
            next: self.nodes[j].first,
            r_cap: rev_cap,
        });
        self.nodes[j].first = a + 1;
        self.capacity.push(cap);
        self.capacity.push(rev_cap);
        Ok(())
    }

    fn set_active(&mut self, i: usize) {
        if self.nodes[i].active {
            return;
        }
        self.nodes[i].active = true;
        self.nodes[i].next_active = NONE;
        if self.active_tail == NONE {
            self.active_head = i;
        } else {
            self.nodes[self.active_tail].next_active = i;
        }
        self.active_tail = i;
    }

    fn next_active(&mut self) -> Option<usize> {
        loop {
            let i = self.active_head;
            if i == NONE {
                return None;
            }
            self.active_head = self.nodes[i].next_active;
            if self.active_head == NONE {
                self.active_tail = NONE;
            }
            self.nodes[i].next_active = NONE;
            self.nodes[i].active = false;
            if self.nodes[i].parent != NONE {
                return Some(i);
            }
        }
    }

    fn sister(a: usize) -> usize {
        a ^ 1
    }

    /// Tail node of arc `a` (the head of its sister).
    fn tail(&self, a: usize) -> usize {
        self.arcs[Self::sister(a)].head
    }

    /// Solves and returns the max-flow value. Later calls return the cached
    /// value.
    pub fn max_flow(&mut self) -> f64 {
        if self.solved {
            return self.flow;
        }
        for i in 0..self.nodes.len() {
            let n = &mut self.nodes[i];
            n.next_active = NONE;
            n.active = false;
            n.timestamp = 0;
            if n.tr_cap > 0.0 {
                n.in_sink = false;
                n.parent = TERMINAL;
                n.dist = 1;
                self.set_active(i);
            } else if n.tr_cap < 0.0 {
                n.in_sink = true;
                n.parent = TERMINAL;
                n.dist = 1;
                self.set_active(i);
            } else {
                n.parent = NONE;
            }
        }
        let mut current: Option<usize> = None;
        loop {
            let i = match current {
                Some(i) if self.nodes[i].parent != NONE => i,
                _ => match self.next_active() {
                    Some(i) => i,
                    None => break,
                },
            };
            current = None;
            // grow the tree containing i until it touches the other tree
            let mut bridge = NONE;
            let mut a = self.nodes[i].first;
            if !self.nodes[i].in_sink {
                while a != NONE {
                    if self.arcs[a].r_cap > 0.0 {
                        let j = self.arcs[a].head;
                        if self.nodes[j].parent == NONE {
                            self.nodes[j].in_sink = false;
                            self.nodes[j].parent = Self::sister(a);
                            self.nodes[j].timestamp = self.nodes[i].timestamp;
                            self.nodes[j].dist = self.nodes[i].dist + 1;
                            self.set_active(j);
                        } else if self.nodes[j].in_sink {
                            bridge = a;
                            break;
                        } else if self.nodes[j].timestamp <= self.nodes[i].timestamp
                            && self.nodes[j].dist > self.nodes[i].dist
                        {
                            self.nodes[j].parent = Self::sister(a);
                            self.nodes[j].timestamp = self.nodes[i].timestamp;
                            self.nodes[j].dist = self.nodes[i].dist + 1;
                        }
                    }
                    a = self.arcs[a].next;
                }
            } else {
                while a != NONE {
                    let s = Self::sister(a);
                    if self.arcs[s].r_cap > 0.0 {
                        let j = self.arcs[a].head;
                        if self.nodes[j].parent == NONE {
                            self.nodes[j].in_sink = true;
                            self.nodes[j].parent = s;
                            self.nodes[j].timestamp = self.nodes[i].timestamp;
                            self.nodes[j].dist = self.nodes[i].dist + 1;
                            self.set_active(j);
                        } else if !self.nodes[j].in_sink {
                            bridge = s;
                            break;
                        } else if self.nodes[j].timestamp <= self.nodes[i].timestamp
                            && self.nodes[j].dist > self.nodes[i].dist
                        {
                            self.nodes[j].parent = s;
                            self.nodes[j].timestamp = self.nodes[i].timestamp;
                            self.nodes[j].dist = self.nodes[i].dist + 1;
                        }
                    }
                    a = self.arcs[a].next;
                }
            }
            self.time += 1;
            if bridge != NONE {
                // i stays active: it may have further bridges
                current = Some(i);
                self.augment(bridge);
                while let Some(o) = self.orphans.pop_front() {
                    if self.nodes[o].in_sink {
                        self.adopt_sink(o);
                    } else {
                        self.adopt_source(o);
                    }
                }
            }
        }
        self.solved = true;
        self.flow
    }

    /// Pushes the bottleneck along source-tree path, `bridge`, sink-tree path.
    fn augment(&mut self, bridge: usize) {
        let mut bottleneck = self.arcs[bridge].r_cap;
        // source side
        let mut i = self.tail(bridge);
        loop {
            let a = self.nodes[i].parent;
            if a == TERMINAL {
                break;
            }
            bottleneck = bottleneck.min(self.arcs[Self::sister(a)].r_cap);
            i = self.arcs[a].head;
        }
        bottleneck = bottleneck.min(self.nodes[i].tr_cap);
        // sink side
        let mut i = self.arcs[bridge].head;
        loop {
            let a = self.nodes[i].parent;
            if a == TERMINAL {
                break;
            }
            bottleneck = bottleneck.min(self.arcs[a].r_cap);
            i = self.arcs[a].head;
        }
        bottleneck = bottleneck.min(-self.nodes[i].tr_cap);

        self.arcs[Self::sister(bridge)].r_cap += bottleneck;
        self.arcs[bridge].r_cap -= bottleneck;
        let mut i = self.tail(bridge);
        loop {
            let a = self.nodes[i].parent;
            if a == TERMINAL {
                break;
            }
            self.arcs[a].r_cap += bottleneck;
            self.arcs[Self::sister(a)].r_cap -= bottleneck;
            if self.arcs[Self::sister(a)].r_cap == 0.0 {
                self.make_orphan(i);
            }
            i = self.arcs[a].head;
        }
        self.nodes[i].tr_cap -= bottleneck;
        if self.nodes[i].tr_cap == 0.0 {
            self.make_orphan(i);
        }
        let mut i = self.arcs[bridge].head;
        loop {
            let a = self.nodes[i].parent;
            if a == TERMINAL {
                break;
            }
            self.arcs[Self::sister(a)].r_cap += bottleneck;
            self.arcs[a].r_cap -= bottleneck;
            if self.arcs[a].r_cap == 0.0 {
                self.make_orphan(i);
            }
            i = self.arcs[a].head;
        }
        self.nodes[i].tr_cap += bottleneck;
        if self.nodes[i].tr_cap == 0.0 {
            self.make_orphan(i);
        }
        self.flow += bottleneck;
    }

    fn make_orphan(&mut self, i: usize) {
        self.nodes[i].parent = ORPHAN;
        self.orphans.push_back(i);
    }

    /// Distance of `j` to its terminal if its parent chain is valid, or
    /// `None` when the chain reaches an orphan or a free node.
    fn origin_distance(&mut self, j: usize) -> Option<u32> {
        let mut d = 0u32;
        let mut k = j;
        loop {
            if self.nodes[k].timestamp == self.time {
                d = d.saturating_add(self.nodes[k].dist);
                break;
            }
            let a = self.nodes[k].parent;
            d += 1;
            if a == TERMINAL {
                self.nodes[k].timestamp = self.time;
                self.nodes[k].dist = 1;
                break;
            }
            if a == ORPHAN || a == NONE {
                return None;
            }
            k = self.arcs[a].head;
        }
        // stamp the path for later queries
        let mut k = j;
        let mut dd = d;
        while self.nodes[k].timestamp != self.time {
            self.nodes[k].timestamp = self.time;
            self.nodes[k].dist = dd;
            dd -= 1;
            k = self.arcs[self.nodes[k].parent].head;
        }
        Some(d)
    }

    fn adopt_source(&mut self, i: usize) {
        let mut best = NONE;
        let mut best_dist = INFINITE_DIST;
        let mut a = self.nodes[i].first;
        while a != NONE {
            if self.arcs[Self::sister(a)].r_cap > 0.0 {
                let j = self.arcs[a].head;
                if !self.nodes[j].in_sink && self.nodes[j].parent != NONE {
                    if let Some(d) = self.origin_distance(j) {
                        if d < best_dist {
                            best = a;
                            best_dist = d;
                        }
                    }
                }
            }
            a = self.arcs[a].next;
        }
        if best != NONE {
            self.nodes[i].parent = best;
            self.nodes[i].timestamp = self.time;
            self.nodes[i].dist = best_dist + 1;
            return;
        }
        self.nodes[i].parent = NONE;
        let mut a = self.nodes[i].first;
        while a != NONE {
            let j = self.arcs[a].head;
            if !self.nodes[j].in_sink && self.nodes[j].parent != NONE {
                if self.arcs[Self::sister(a)].r_cap > 0.0 {
                    self.set_active(j);
                }
                let pa = self.nodes[j].parent;
                if pa != TERMINAL && pa != ORPHAN && self.arcs[pa].head == i {
                    self.make_orphan(j);
                }
            }
            a = self.arcs[a].next;
        }
    }

    fn adopt_sink(&mut self, i: usize) {
        let mut best = NONE;
        let mut best_dist = INFINITE_DIST;
        let mut a = self.nodes[i].first;
        while a != NONE {
            if self.arcs[a].r_cap > 0.0 {
                let j = self.arcs[a].head;
                if self.nodes[j].in_sink && self.nodes[j].parent != NONE {
                    if let Some(d) = self.origin_distance(j) {
                        if d < best_dist {
                            best = a;
                            best_dist = d;
                        }
                    }
                }
            }
            a = self.arcs[a].next;
        }
        if best != NONE {
            self.nodes[i].parent = best;
            self.nodes[i].timestamp = self.time;
            self.nodes[i].dist = best_dist + 1;
            return;
        }
        self.nodes[i].parent = NONE;
        let mut a = self.nodes[i].first;
        while a != NONE {
            let j = self.arcs[a].head;
            if self.nodes[j].in_sink && self.nodes[j].parent != NONE {
                if self.arcs[a].r_cap > 0.0 {
                    self.set_active(j);
                }
                let pa = self.nodes[j].parent;
                if pa != TERMINAL && pa != ORPHAN && self.arcs[pa].head == i {
                    self.make_orphan(j);
                }
            }
            a = self.arcs[a].next;
        }
    }

    /// Side of the minimum cut: nodes reachable from the source in the
    /// residual graph are on the source side. Requires [`Graph::max_flow`].
    pub fn segment(&self, i: usize) -> Segment {
        assert!(self.solved, "segment queried before max_flow");
        let n = &self.nodes[i];
        if n.parent != NONE && !n.in_sink {
            Segment::Source
        } else {
            Segment::Sink
        }
    }

    /// Capacity of the cut induced by [`Graph::segment`], from the original
    /// capacities.
    pub fn cut_capacity(&self) -> f64 {
        let side: Vec<Segment> = (0..self.nodes.len()).map(|i| self.segment(i)).collect();
        let mut total = 0.0;
        for (i, &(s, t)) in self.terminal.iter().enumerate() {
            match side[i] {
                Segment::Source => total += t,
                Segment::Sink => total += s,
            }
        }
        for (a, arc) in self.arcs.iter().enumerate() {
            let tail = self.arcs[Self::sister(a)].head;
            if side[tail] == Segment::Source && side[arc.head] == Segment::Sink {
                total += self.capacity[a];
            }
        }
        total
    }
}
