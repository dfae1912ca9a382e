//! Control-flow graphs shared by the IR and ISA levels, with dominators and
//! natural-loop detection.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

/// Intra-procedural CFG over block indices. Call edges are not represented.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cfg {
    labels: Vec<String>,
    succs: Vec<Vec<usize>>,
    preds: Vec<Vec<usize>>,
    entry: usize,
}

impl Cfg {
    /// Builds a CFG from per-node successor lists. Duplicate successors are
    /// collapsed so the edge set is a set.
    pub fn new(labels: Vec<String>, succs: Vec<Vec<usize>>, entry: usize) -> Self {
        assert_eq!(labels.len(), succs.len());
        let succs: Vec<Vec<usize>> = succs
            .into_iter()
            .map(|s| {
                let mut seen = BTreeSet::new();
                s.into_iter().filter(|t| seen.insert(*t)).collect()
            })
            .collect();
        let mut preds = vec![Vec::new(); labels.len()];
        for (src, ss) in succs.iter().enumerate() {
            for &dst in ss {
                preds[dst].push(src);
            }
        }
        Cfg { labels, succs, preds, entry }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn entry(&self) -> usize {
        self.entry
    }

    pub fn label(&self, node: usize) -> &str {
        &self.labels[node]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn succs(&self, node: usize) -> &[usize] {
        &self.succs[node]
    }

    pub fn preds(&self, node: usize) -> &[usize] {
        &self.preds[node]
    }

    /// Edges in (source, successor-order) order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.succs
            .iter()
            .enumerate()
            .flat_map(|(s, ss)| ss.iter().map(move |&d| (s, d)))
            .collect()
    }

    /// Nodes without successors (function exits).
    pub fn exits(&self) -> Vec<usize> {
        (0..self.len()).filter(|&n| self.succs[n].is_empty()).collect()
    }

    /// Reverse postorder of the nodes reachable from the entry.
    pub fn reverse_postorder(&self) -> Vec<usize> {
        let mut visited = vec![false; self.len()];
        let mut order = Vec::with_capacity(self.len());
        let mut stack = vec![(self.entry, 0usize)];
        visited[self.entry] = true;
        while let Some((node, i)) = stack.pop() {
            if i < self.succs[node].len() {
                stack.push((node, i + 1));
                let next = self.succs[node][i];
                if !visited[next] {
                    visited[next] = true;
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        order.reverse();
        order
    }

    pub fn reachable(&self) -> Vec<bool> {
        let mut r = vec![false; self.len()];
        for n in self.reverse_postorder() {
            r[n] = true;
        }
        r
    }
}

/// Immediate-dominator tree (Cooper, Harvey & Kennedy iteration).
#[derive(Debug, Clone)]
pub struct DomTree {
    idom: Vec<Option<usize>>,
    rpo_index: Vec<usize>,
}

impl DomTree {
    pub fn compute(cfg: &Cfg) -> Self {
        let rpo = cfg.reverse_postorder();
        let mut rpo_index = vec![usize::MAX; cfg.len()];
        for (i, &n) in rpo.iter().enumerate() {
            rpo_index[n] = i;
        }
        let mut idom: Vec<Option<usize>> = vec![None; cfg.len()];
        idom[cfg.entry()] = Some(cfg.entry());
        let mut changed = true;
        while changed {
            changed = false;
            for &n in rpo.iter().skip(1) {
                let mut new_idom: Option<usize> = None;
                for &p in cfg.preds(n) {
                    if idom[p].is_none() {
                        continue;
                    }
                    new_idom = Some(match new_idom {
                        None => p,
                        Some(cur) => intersect(&idom, &rpo_index, p, cur),
                    });
                }
                if new_idom.is_some() && idom[n] != new_idom {
                    idom[n] = new_idom;
                    changed = true;
                }
            }
        }
        DomTree { idom, rpo_index }
    }

    /// Immediate dominator; the entry is its own idom, unreachable nodes have none.
    pub fn idom(&self, node: usize) -> Option<usize> {
        self.idom[node]
    }

    pub fn is_reachable(&self, node: usize) -> bool {
        self.idom[node].is_some()
    }

    pub fn dominates(&self, a: usize, b: usize) -> bool {
        if !self.is_reachable(a) || !self.is_reachable(b) {
            return false;
        }
        let mut cur = b;
        loop {
            if cur == a {
                return true;
            }
            let up = self.idom[cur].expect("reachable");
            if up == cur {
                return false;
            }
            cur = up;
        }
    }

    pub fn rpo_index(&self, node: usize) -> usize {
        self.rpo_index[node]
    }
}

fn intersect(idom: &[Option<usize>], rpo_index: &[usize], mut a: usize, mut b: usize) -> usize {
    while a != b {
        while rpo_index[a] > rpo_index[b] {
            a = idom[a].expect("processed");
        }
        while rpo_index[b] > rpo_index[a] {
            b = idom[b].expect("processed");
        }
    }
    a
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("irreducible control flow: retreating edge {from} -> {to} does not target a dominator")]
pub struct IrreducibleCfg {
    pub from: String,
    pub to: String,
}

/// One natural loop (all back edges sharing a header are merged).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Loop {
    pub header: usize,
    pub body: BTreeSet<usize>,
    pub back_edges: Vec<(usize, usize)>,
    /// Edges from outside the body into the header.
    pub entry_edges: Vec<(usize, usize)>,
    pub parent: Option<usize>,
    pub depth: u32,
}

/// All loops of a CFG with per-node nesting depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopForest {
    pub loops: Vec<Loop>,
    depth: Vec<u32>,
}

impl LoopForest {
    pub fn depth(&self, node: usize) -> u32 {
        self.depth[node]
    }

    pub fn depths(&self) -> &[u32] {
        &self.depth
    }

    pub fn is_empty(&self) -> bool {
        self.loops.is_empty()
    }

    pub fn headers(&self) -> impl Iterator<Item = usize> + '_ {
        self.loops.iter().map(|l| l.header)
    }

    pub fn loop_of_header(&self, header: usize) -> Option<&Loop> {
        self.loops.iter().find(|l| l.header == header)
    }
}

/// Finds natural loops via dominators. Any retreating edge whose target does
/// not dominate its source makes the CFG irreducible and is reported.
pub fn detect_loops(cfg: &Cfg) -> Result<LoopForest, IrreducibleCfg> {
    let dom = DomTree::compute(cfg);

    // Retreating edges: DFS edges into a node currently on the stack.
    let mut on_stack = vec![false; cfg.len()];
    let mut visited = vec![false; cfg.len()];
    let mut retreating = Vec::new();
    let mut stack = vec![(cfg.entry(), 0usize)];
    visited[cfg.entry()] = true;
    on_stack[cfg.entry()] = true;
    while let Some((node, i)) = stack.pop() {
        if i < cfg.succs(node).len() {
            stack.push((node, i + 1));
            let next = cfg.succs(node)[i];
            if on_stack[next] {
                retreating.push((node, next));
            } else if !visited[next] {
                visited[next] = true;
                on_stack[next] = true;
                stack.push((next, 0));
            }
        } else {
            on_stack[node] = false;
        }
    }

    let mut by_header: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (src, dst) in retreating {
        if !dom.dominates(dst, src) {
            return Err(IrreducibleCfg {
                from: cfg.label(src).to_string(),
                to: cfg.label(dst).to_string(),
            });
        }
        by_header.entry(dst).or_default().push((src, dst));
    }

    let mut loops: Vec<Loop> = by_header
        .into_iter()
        .map(|(header, back_edges)| {
            let mut body = BTreeSet::new();
            body.insert(header);
            let mut work: Vec<usize> = back_edges.iter().map(|e| e.0).collect();
            while let Some(n) = work.pop() {
                if body.insert(n) {
                    work.extend(cfg.preds(n).iter().copied().filter(|p| dom.is_reachable(*p)));
                }
            }
            let entry_edges = cfg
                .preds(header)
                .iter()
                .filter(|p| !body.contains(p) && dom.is_reachable(**p))
                .map(|&p| (p, header))
                .collect();
            Loop { header, body, back_edges, entry_edges, parent: None, depth: 0 }
        })
        .collect();

    // Outer loops first, so parents precede children.
    loops.sort_by(|a, b| b.body.len().cmp(&a.body.len()).then(a.header.cmp(&b.header)));
    for i in 0..loops.len() {
        let parent = (0..i)
            .rev()
            .find(|&j| loops[j].body.contains(&loops[i].header) && loops[j].header != loops[i].header);
        loops[i].parent = parent;
        loops[i].depth = parent.map_or(1, |p| loops[p].depth + 1);
    }

    let mut depth = vec![0u32; cfg.len()];
    for l in &loops {
        for &n in &l.body {
            depth[n] += 1;
        }
    }
    Ok(LoopForest { loops, depth })
}
