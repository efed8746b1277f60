//! Loader for the TU graph-classification layout.
//!
//! Expected files inside the dataset directory:
//!
//! - `<name>_A.txt` — one edge per line as 1-indexed `i, j` (comma plus
//!   optional space; LF or CRLF)
//! - `<name>_graph_indicator.txt` — one 1-indexed graph id per node line
//! - `<name>_graph_labels.txt` — optional, one integer label per graph
//! - `<name>_node_labels.txt` — optional, one integer per node; one-hot
//!   encoded into the feature matrix over the dataset's label alphabet
//! - `<name>_node_attributes.txt` — optional, comma-separated floats per
//!   node, concatenated after the one-hot label block

use super::{Csr, Graph, GraphDataset, IngestError, SourceFormat};
use std::path::{Path, PathBuf};

pub fn load_tu_dataset(dir: &Path, name: &str) -> Result<GraphDataset, IngestError> {
    let file = |suffix: &str| -> PathBuf { dir.join(format!("{name}_{suffix}.txt")) };
    let indicator_path = file("graph_indicator");
    let edges_path = file("A");
    let indicator = read_required(&indicator_path)?;
    let edge_lines = read_required(&edges_path)?;

    // Node -> graph id (0-based), nodes are 1-indexed lines.
    let mut node_graph: Vec<usize> = Vec::with_capacity(indicator.len());
    let mut num_graphs = 0usize;
    for (lineno, line) in non_empty_lines(&indicator) {
        let gid: usize = line.trim().parse().map_err(|_| malformed(&indicator_path, lineno, "expected a graph id"))?;
        if gid < 1 {
            return Err(malformed(&indicator_path, lineno, "graph ids are 1-indexed"));
        }
        node_graph.push(gid - 1);
        num_graphs = num_graphs.max(gid);
    }
    if num_graphs == 0 {
        return Err(IngestError::EmptyDataset);
    }
    for gid in 0..num_graphs {
        if !node_graph.contains(&gid) {
            return Err(malformed(
                &indicator_path,
                0,
                &format!("graph id {} has no nodes", gid + 1),
            ));
        }
    }
    let total_nodes = node_graph.len();

    // Global node id -> local index within its graph.
    let mut graph_sizes = vec![0usize; num_graphs];
    let mut local_index = vec![0usize; total_nodes];
    for (node, &gid) in node_graph.iter().enumerate() {
        local_index[node] = graph_sizes[gid];
        graph_sizes[gid] += 1;
    }

    let mut per_graph_edges: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); num_graphs];
    for (lineno, line) in non_empty_lines(&edge_lines) {
        let (u, v) = parse_pair(line)
            .ok_or_else(|| malformed(&edges_path, lineno, "expected an edge as `i, j`"))?;
        if u < 1 || v < 1 || u > total_nodes || v > total_nodes {
            return Err(malformed(&edges_path, lineno, "node id out of range"));
        }
        let (u, v) = (u - 1, v - 1);
        if node_graph[u] != node_graph[v] {
            return Err(malformed(&edges_path, lineno, "edge crosses graph boundaries"));
        }
        per_graph_edges[node_graph[u]].push((local_index[u], local_index[v], 1.0));
    }

    let graph_labels = read_optional_ints(&file("graph_labels"))?;
    if let Some(labels) = &graph_labels {
        if labels.len() != num_graphs {
            return Err(malformed(
                &file("graph_labels"),
                0,
                &format!("{} labels for {} graphs", labels.len(), num_graphs),
            ));
        }
    }

    let node_labels = read_optional_ints(&file("node_labels"))?;
    if let Some(labels) = &node_labels {
        if labels.len() != total_nodes {
            return Err(malformed(
                &file("node_labels"),
                0,
                &format!("{} labels for {} nodes", labels.len(), total_nodes),
            ));
        }
    }
    let node_attrs = read_optional_floats(&file("node_attributes"))?;
    if let Some(attrs) = &node_attrs {
        if attrs.len() != total_nodes {
            return Err(malformed(
                &file("node_attributes"),
                0,
                &format!("{} attribute rows for {} nodes", attrs.len(), total_nodes),
            ));
        }
    }

    // One-hot alphabet over all node labels in the dataset.
    let label_alphabet: Vec<i64> = node_labels.as_ref().map_or(Vec::new(), |labels| {
        let mut a = labels.clone();
        a.sort_unstable();
        a.dedup();
        a
    });
    let attr_width = node_attrs.as_ref().map_or(0, |a| a[0].len());
    let d0 = label_alphabet.len() + attr_width;

    let mut graphs: Vec<Graph> = Vec::with_capacity(num_graphs);
    let mut node_cursor: Vec<Vec<usize>> = vec![Vec::new(); num_graphs];
    for (node, &gid) in node_graph.iter().enumerate() {
        node_cursor[gid].push(node);
    }
    for gid in 0..num_graphs {
        let n = graph_sizes[gid];
        let mut features = vec![0.0; n * d0];
        let mut labels_for_graph = Vec::with_capacity(n);
        for (local, &global) in node_cursor[gid].iter().enumerate() {
            let mut offset = local * d0;
            if let Some(labels) = &node_labels {
                let pos = label_alphabet.binary_search(&labels[global]).unwrap();
                features[offset + pos] = 1.0;
                offset += label_alphabet.len();
                labels_for_graph.push(labels[global]);
            }
            if let Some(attrs) = &node_attrs {
                if attrs[global].len() != attr_width {
                    return Err(malformed(
                        &file("node_attributes"),
                        global + 1,
                        "inconsistent attribute width",
                    ));
                }
                features[offset..offset + attr_width].copy_from_slice(&attrs[global]);
            }
        }
        graphs.push(Graph {
            adjacency: Csr::from_edges(n, &per_graph_edges[gid]),
            features,
            d0,
            graph_label: graph_labels.as_ref().map(|l| l[gid]),
            node_labels: node_labels.as_ref().map(|_| labels_for_graph),
        });
    }

    let mut ds = GraphDataset {
        name: name.to_string(),
        graphs,
        d0,
        num_classes: None,
        source_path: dir.display().to_string(),
        format: SourceFormat::Tu,
    };
    if graph_labels.is_some() {
        ds.class_indices();
    }
    Ok(ds)
}

fn read_required(path: &Path) -> Result<String, IngestError> {
    if !path.exists() {
        return Err(IngestError::MissingFile(path.display().to_string()));
    }
    std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_optional(path: &Path) -> Result<Option<String>, IngestError> {
    if !path.exists() {
        return Ok(None);
    }
    read_required(path).map(Some)
}

fn read_optional_ints(path: &Path) -> Result<Option<Vec<i64>>, IngestError> {
    let Some(content) = read_optional(path)? else {
        return Ok(None);
    };
    let mut out = Vec::new();
    for (lineno, line) in non_empty_lines(&content) {
        out.push(
            line.trim()
                .parse::<i64>()
                .map_err(|_| malformed(path, lineno, "expected an integer"))?,
        );
    }
    Ok(Some(out))
}

fn read_optional_floats(path: &Path) -> Result<Option<Vec<Vec<f64>>>, IngestError> {
    let Some(content) = read_optional(path)? else {
        return Ok(None);
    };
    let mut out = Vec::new();
    for (lineno, line) in non_empty_lines(&content) {
        let row: Result<Vec<f64>, _> = line
            .split(',')
            .map(|tok| tok.trim().parse::<f64>())
            .collect();
        out.push(row.map_err(|_| malformed(path, lineno, "expected comma-separated floats"))?);
    }
    Ok(Some(out))
}

/// 1-based line numbers; skips blank lines and tolerates CRLF.
fn non_empty_lines(content: &str) -> impl Iterator<Item = (usize, &str)> {
    content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_pair(line: &str) -> Option<(usize, usize)> {
    let mut parts = line.split(',');
    let u = parts.next()?.trim().parse().ok()?;
    let v = parts.next()?.trim().parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((u, v))
}

fn malformed(path: &Path, line: usize, message: &str) -> IngestError {
    IngestError::Malformed {
        file: path.display().to_string(),
        line,
        message: message.to_string(),
    }
}
