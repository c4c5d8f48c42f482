//! Directed 1-hop session graphs and their composed 2-hop / 3-hop edge sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ingest::PAD;

pub type Edge = (u32, u32);
pub type EdgeSet = BTreeSet<Edge>;

/// Hop counts modeled: 1, 2 and 3.
pub const HOPS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHopGraphs {
    /// Distinct non-PAD apps of the window.
    pub nodes: BTreeSet<u32>,
    pub e1: EdgeSet,
    pub e2: EdgeSet,
    pub e3: EdgeSet,
    /// Most recent app of the window.
    pub last_app: u32,
}

/// Nodes plus the deduplicated consecutive-transition edges of a window.
/// PAD entries are skipped and self-loops dropped. `e2`/`e3` are left empty.
pub fn build_1hop(window: &[u32]) -> Result<MultiHopGraphs> {
    let apps: Vec<u32> = window.iter().copied().filter(|&a| a != PAD).collect();
    let Some(&last_app) = apps.last() else {
        return Err(Error::invalid("build_1hop", "window has no non-PAD entry"));
    };
    let nodes = apps.iter().copied().collect();
    let e1 = apps
        .windows(2)
        .filter(|w| w[0] != w[1])
        .map(|w| (w[0], w[1]))
        .collect();
    Ok(MultiHopGraphs {
        nodes,
        e1,
        e2: EdgeSet::new(),
        e3: EdgeSet::new(),
        last_app,
    })
}

fn successors(edges: &EdgeSet) -> BTreeMap<u32, Vec<u32>> {
    let mut out: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for &(u, v) in edges {
        out.entry(u).or_default().push(v);
    }
    out
}

fn compose(left: &EdgeSet, next: &BTreeMap<u32, Vec<u32>>) -> EdgeSet {
    let mut out = EdgeSet::new();
    for &(u, v) in left {
        for &w in next.get(&v).map(Vec::as_slice).unwrap_or_default() {
            if u != w {
                out.insert((u, w));
            }
        }
    }
    out
}

/// `e2` joins two `e1` edges, `e3` joins an `e2` edge with an `e1` edge;
/// endpoint-equal pairs are excluded at each step.
pub fn compose_hops(e1: &EdgeSet) -> (EdgeSet, EdgeSet) {
    let next = successors(e1);
    let e2 = compose(e1, &next);
    let e3 = compose(&e2, &next);
    (e2, e3)
}

/// 1-, 2- and 3-hop graphs of a window.
pub fn build_graphs(window: &[u32]) -> Result<MultiHopGraphs> {
    let mut g = build_1hop(window)?;
    let (e2, e3) = compose_hops(&g.e1);
    g.e2 = e2;
    g.e3 = e3;
    Ok(g)
}

impl MultiHopGraphs {
    /// Edge set of hop `1..=3`.
    pub fn edges(&self, hop: usize) -> &EdgeSet {
        match hop {
            1 => &self.e1,
            2 => &self.e2,
            3 => &self.e3,
            _ => panic!("hop {hop} outside 1..=3"),
        }
    }

    /// Nodes with at least one incident edge in hop `hop`.
    pub fn non_isolated(&self, hop: usize) -> BTreeSet<u32> {
        self.edges(hop).iter().flat_map(|&(u, v)| [u, v]).collect()
    }

    /// `hop\tu\tv` per edge, hops in order.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for hop in 1..=HOPS {
            for (u, v) in self.edges(hop) {
                writeln!(s, "{hop}\t{u}\t{v}").unwrap();
            }
        }
        s
    }
}
