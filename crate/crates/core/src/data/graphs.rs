use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::graph::GraphSpec;

/// `rows × cols` mesh over a bounding box with 4-neighbourhood edges.
///
/// Node `r * cols + c` covers row `r` (latitude band, south to north) and
/// column `c` (longitude band, west to east) and is named `r{r}c{c}`.
pub fn build_grid_graph(
    lon_min: f64,
    lon_max: f64,
    lat_min: f64,
    lat_max: f64,
    rows: usize,
    cols: usize,
) -> Result<GraphSpec> {
    if rows == 0 || cols == 0 {
        return Err(Error::DegenerateGraph(format!("grid {rows}x{cols} has no cells")));
    }
    if !(lon_min < lon_max && lat_min < lat_max) {
        return Err(Error::DegenerateGraph(format!(
            "bounds lon [{lon_min}, {lon_max}] lat [{lat_min}, {lat_max}] are not ordered"
        )));
    }
    let n = rows * cols;
    let mut adj = vec![0.0; n * n];
    let mut link = |a: usize, b: usize| {
        adj[a * n + b] = 1.0;
        adj[b * n + a] = 1.0;
    };
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                link(i, i + 1);
            }
            if r + 1 < rows {
                link(i, i + cols);
            }
        }
    }
    let ids = (0..n).map(|i| format!("r{}c{}", i / cols, i % cols)).collect();
    GraphSpec::new(adj, ids)
}

/// Unweighted graph over area ids. With `ids` given, edges must reference
/// known ids and node order follows `ids`; otherwise nodes are the sorted
/// set of ids in the edge list. Duplicate edges collapse.
pub fn build_area_graph(ids: Option<&[String]>, edges: &[(String, String)]) -> Result<GraphSpec> {
    let ids: Vec<String> = match ids {
        Some(ids) => ids.to_vec(),
        None => edges
            .iter()
            .flat_map(|(a, b)| [a.clone(), b.clone()])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    if index.len() != ids.len() {
        return Err(Error::DegenerateGraph("duplicate area id".into()));
    }
    let lookup = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::DegenerateGraph(format!("unknown area id {id:?}")))
    };
    let n = ids.len();
    let mut adj = vec![0.0; n * n];
    for (a, b) in edges {
        if a == b {
            return Err(Error::DegenerateGraph(format!("self-edge on area {a:?}")));
        }
        let (i, j) = (lookup(a)?, lookup(b)?);
        adj[i * n + j] = 1.0;
        adj[j * n + i] = 1.0;
    }
    GraphSpec::new(adj, ids)
}

/// Parses `idA,idB` lines; blank lines and `#` comments are skipped.
pub fn parse_edge_list(text: &str) -> Result<Vec<(String, String)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut edges = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("edge list: {e}")))?;
        match (rec.len(), rec.get(0), rec.get(1)) {
            (2, Some(a), Some(b)) if !a.is_empty() && !b.is_empty() => edges.push((a.to_string(), b.to_string())),
            (1, Some(""), _) => {}
            _ => return Err(Error::Data(format!("edge list record {}: expected idA,idB", k + 1))),
        }
    }
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::laplacian;

    fn pair(a: &str, b: &str) -> (String, String) {
        (a.to_string(), b.to_string())
    }

    #[test]
    fn grid_edge_counts() {
        let one = build_grid_graph(0.0, 1.0, 0.0, 1.0, 1, 1).unwrap();
        assert_eq!((one.n(), one.edge_count()), (1, 0));
        let two = build_grid_graph(0.0, 1.0, 0.0, 1.0, 2, 2).unwrap();
        assert_eq!((two.n(), two.edge_count()), (4, 4));
        let four = build_grid_graph(-120.0, -116.0, 32.0, 36.0, 4, 4).unwrap();
        assert_eq!((four.n(), four.edge_count()), (16, 24));
        assert_eq!(four.node_ids()[5], "r1c1");
    }

    #[test]
    fn grid_rejects_bad_bounds() {
        assert!(build_grid_graph(1.0, 0.0, 0.0, 1.0, 2, 2).is_err());
        assert!(build_grid_graph(0.0, 1.0, 0.0, 1.0, 0, 2).is_err());
    }

    #[test]
    fn triangle_and_duplicates() {
        let edges = vec![pair("a", "b"), pair("b", "c"), pair("c", "a"), pair("b", "a")];
        let g = build_area_graph(None, &edges).unwrap();
        assert_eq!(g.n(), 3);
        assert_eq!(g.adjacency().iter().filter(|&&a| a == 1.0).count(), 6);
    }

    #[test]
    fn area_graph_errors() {
        let ids: Vec<String> = ["1", "2", "3"].iter().map(|s| s.to_string()).collect();
        let g = build_area_graph(Some(&ids), &[]).unwrap();
        assert!(laplacian(&g).is_err());
        assert!(build_area_graph(Some(&ids), &[pair("1", "9")]).is_err());
        assert!(build_area_graph(None, &[pair("1", "1")]).is_err());
    }

    #[test]
    fn edge_list_parsing() {
        let edges = parse_edge_list("# areas\n10, 11\n\n11,12\n").unwrap();
        assert_eq!(edges, vec![pair("10", "11"), pair("11", "12")]);
        assert!(parse_edge_list("10,11,12\n").is_err());
    }
}
