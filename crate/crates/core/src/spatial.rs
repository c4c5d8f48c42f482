//! Station categories: min-max normalized POI vectors, cosine similarity,
//! a top-k similarity graph and its connected components.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Neighbors kept per station.
pub const DEFAULT_K_LOC: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct StationTable {
    pub stations: Vec<String>,
    pub poi: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
}

impl StationTable {
    pub fn new(rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("station_table", "no stations"));
        }
        let dim = rows[0].1.len();
        if let Some((id, v)) = rows.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::invalid(
                "station_table",
                format!("station {id} has {} features, expected {dim}", v.len()),
            ));
        }
        let (stations, poi): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        let normalized = normalize_poi(&poi);
        Ok(StationTable {
            stations,
            poi,
            normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn similarity(&self, r: usize, q: usize) -> f64 {
        cosine_similarity(&self.normalized[r], &self.normalized[q]).expect("shared dimensionality")
    }
}

/// Feature-wise min-max scaling to `[0, 1]`; constant features become 0.
pub fn normalize_poi(poi: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(first) = poi.first() else {
        return Vec::new();
    };
    let dim = first.len();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for v in poi {
        for m in 0..dim {
            lo[m] = lo[m].min(v[m]);
            hi[m] = hi[m].max(v[m]);
        }
    }
    poi.iter()
        .map(|v| {
            (0..dim)
                .map(|m| {
                    let range = hi[m] - lo[m];
                    if range > 0.0 {
                        (v[m] - lo[m]) / range
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Cosine of two vectors; 0 when either is the zero vector.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("station_similarity", &[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Undirected edges `(r, q)` with `r < q`: every station links to its `k`
/// most similar others (ties to the smaller index), or to all others when
/// fewer than `k` exist.
pub fn build_station_graph(table: &StationTable, k: usize) -> BTreeSet<(usize, usize)> {
    let n = table.len();
    let mut edges = BTreeSet::new();
    for r in 0..n {
        let mut others: Vec<(usize, f64)> = (0..n)
            .filter(|&q| q != r)
            .map(|q| (q, table.similarity(r, q)))
            .collect();
        others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(q, _) in others.iter().take(k) {
            edges.insert((r.min(q), r.max(q)));
        }
    }
    edges
}

#[derive(Clone, Debug, PartialEq)]
pub struct StationCategories {
    pub stations: Vec<String>,
    pub edges: BTreeSet<(usize, usize)>,
    /// Category in `1..=count` per station, by station index.
    pub category_of: Vec<u32>,
    pub count: usize,
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Component labels `1..=F` via union-find, numbered by smallest member.
pub fn label_components(n: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<u32> {
    let mut uf = UnionFind::new(n);
    for &(a, b) in edges {
        uf.union(a, b);
    }
    let mut label_of_root: HashMap<usize, u32> = HashMap::new();
    (0..n)
        .map(|s| {
            let root = uf.find(s);
            let next = label_of_root.len() as u32 + 1;
            *label_of_root.entry(root).or_insert(next)
        })
        .collect()
}

/// Component labels `1..=F` via breadth-first search, numbered by smallest member.
pub fn label_components_bfs(n: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<u32> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut labels = vec![0u32; n];
    let mut next = 0;
    for start in 0..n {
        if labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if labels[w] == 0 {
                    labels[w] = next;
                    queue.push_back(w);
                }
            }
        }
    }
    labels
}

pub fn components_to_categories(
    edges: BTreeSet<(usize, usize)>,
    stations: &[String],
) -> StationCategories {
    let category_of = label_components(stations.len(), &edges);
    let count = category_of.iter().copied().max().unwrap_or(0) as usize;
    StationCategories {
        stations: stations.to_vec(),
        edges,
        category_of,
        count,
    }
}

/// Full pipeline from raw POI rows.
pub fn categorize_stations(rows: Vec<(String, Vec<f64>)>, k: usize) -> Result<StationCategories> {
    let table = StationTable::new(rows)?;
    let edges = build_station_graph(&table, k);
    Ok(components_to_categories(edges, &table.stations))
}

impl StationCategories {
    pub fn category(&self, station_id: &str) -> Option<u32> {
        self.stations
            .iter()
            .position(|s| s == station_id)
            .map(|i| self.category_of[i])
    }

    pub fn lookup(&self) -> HashMap<String, u32> {
        self.stations
            .iter()
            .cloned()
            .zip(self.category_of.iter().copied())
            .collect()
    }

    /// `station_id,category_index` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (id, c) in self.stations.iter().zip(&self.category_of) {
            writeln!(s, "{id},{c}").unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut stations = Vec::new();
        let mut category_of = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, c) = line.split_once(',').ok_or_else(|| Error::Parse {
                path: "categories".into(),
                line: i + 1,
                msg: "expected station_id,category_index".into(),
            })?;
            stations.push(id.trim().to_string());
            category_of.push(c.trim().parse().map_err(|_| Error::Parse {
                path: "categories".into(),
                line: i + 1,
                msg: "bad category index".into(),
            })?);
        }
        let count = category_of.iter().copied().max().unwrap_or(0) as usize;
        Ok(StationCategories {
            stations,
            edges: BTreeSet::new(),
            category_of,
            count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(vs: &[&[f64]]) -> Vec<(String, Vec<f64>)> {
        vs.iter()
            .enumerate()
            .map(|(i, v)| (format!("s{i}"), v.to_vec()))
            .collect()
    }

    #[test]
    fn min_max_columns() {
        let n = normalize_poi(&[vec![1.0, 4.0], vec![3.0, 4.0], vec![5.0, 4.0]]);
        let col0: Vec<f64> = n.iter().map(|r| r[0]).collect();
        assert_eq!(col0, vec![0.0, 0.5, 1.0]);
        assert!(n.iter().all(|r| r[1] == 0.0));
        assert_eq!(normalize_poi(&[vec![7.0, 2.0]]), vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[0.3, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn few_stations_form_complete_graph() {
        let t = StationTable::new(rows(&[&[0.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]])).unwrap();
        let e = build_station_graph(&t, 5);
        assert_eq!(e, BTreeSet::from([(0, 1), (0, 2), (1, 2)]));
    }

    #[test]
    fn identical_stations_are_linked() {
        let t = StationTable::new(rows(&[
            &[9.0, 0.0, 1.0],
            &[0.0, 9.0, 0.0],
            &[3.0, 3.0, 9.0],
            &[0.0, 9.0, 0.0],
            &[5.0, 1.0, 0.0],
        ]))
        .unwrap();
        assert!(build_station_graph(&t, 1).contains(&(1, 3)));
    }

    #[test]
    fn component_cases() {
        let names: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let c = components_to_categories(BTreeSet::new(), &names);
        assert_eq!(c.count, 4);
        assert_eq!(c.category_of, vec![1, 2, 3, 4]);
        let full: BTreeSet<_> = [(0, 1), (1, 2), (2, 3)].into();
        assert_eq!(components_to_categories(full, &names).count, 1);
    }

    #[test]
    fn two_cliques() {
        let names: Vec<String> = (0..5).map(|i| format!("s{i}")).collect();
        let edges: BTreeSet<_> = [(0, 3), (1, 2), (1, 4), (2, 4)].into();
        let c = components_to_categories(edges.clone(), &names);
        assert_eq!(c.count, 2);
        assert_eq!(c.category_of, vec![1, 2, 2, 1, 2]);
        assert_eq!(label_components_bfs(5, &edges), c.category_of);
    }

    #[test]
    fn csv_roundtrip() {
        let c = categorize_stations(rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]), 5).unwrap();
        let back = StationCategories::from_csv(&c.to_csv()).unwrap();
        assert_eq!(back.category_of, c.category_of);
        assert_eq!(back.category("s2"), Some(1));
        assert_eq!(back.category("nope"), None);
    }
}
