//! JSON-lines graph format: one object per line with fields
//! `edges` (list of 0-indexed `[u, v]` pairs), optional `features`
//! (`n × d0` array), and optional integer `label`.

use super::{Csr, Graph, GraphDataset, IngestError, SourceFormat};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct JsonlGraph {
    edges: Vec<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<i64>,
}

pub fn load_jsonl(path: &Path) -> Result<GraphDataset, IngestError> {
    let content = if path.exists() {
        std::fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?
    } else {
        return Err(IngestError::MissingFile(path.display().to_string()));
    };

    let mut graphs = Vec::new();
    let mut d0: Option<usize> = None;
    for (lineno, line) in content.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if line.is_empty() {
            continue;
        }
        let parsed: JsonlGraph = serde_json::from_str(line)
            .map_err(|e| malformed(path, lineno, &e.to_string()))?;

        let n = match &parsed.features {
            Some(rows) => rows.len(),
            None => {
                let max = parsed.edges.iter().flatten().copied().max();
                match max {
                    Some(m) => m + 1,
                    None => {
                        return Err(malformed(
                            path,
                            lineno,
                            "cannot infer node count: no features and no edges",
                        ))
                    }
                }
            }
        };
        for e in &parsed.edges {
            if e[0] >= n || e[1] >= n {
                return Err(malformed(path, lineno, "edge endpoint out of range"));
            }
        }

        let width = parsed.features.as_ref().map_or(0, |rows| {
            rows.first().map_or(0, |r| r.len())
        });
        if let Some(rows) = &parsed.features {
            if rows.iter().any(|r| r.len() != width) {
                return Err(malformed(path, lineno, "ragged feature rows"));
            }
        }
        match d0 {
            None => d0 = Some(width),
            Some(existing) if existing != width => {
                return Err(malformed(
                    path,
                    lineno,
                    &format!("feature width {width} differs from earlier width {existing}"),
                ))
            }
            _ => {}
        }

        let edges: Vec<(usize, usize, f64)> =
            parsed.edges.iter().map(|e| (e[0], e[1], 1.0)).collect();
        let features = parsed
            .features
            .map(|rows| rows.into_iter().flatten().collect())
            .unwrap_or_default();
        graphs.push(Graph {
            adjacency: Csr::from_edges(n, &edges),
            features,
            d0: width,
            graph_label: parsed.label,
            node_labels: None,
        });
    }
    if graphs.is_empty() {
        return Err(IngestError::EmptyDataset);
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "jsonl".to_string());
    let mut ds = GraphDataset {
        name,
        graphs,
        d0: d0.unwrap_or(0),
        num_classes: None,
        source_path: path.display().to_string(),
        format: SourceFormat::Jsonl,
    };
    if ds.labels().is_some() {
        ds.class_indices();
    }
    Ok(ds)
}

/// Writes one JSON object per graph; each undirected edge appears once with
/// `u < v`. A reload compares equal (graph count, sizes, edge sets, features
/// bit-equal).
pub fn write_jsonl(ds: &GraphDataset, path: &Path) -> Result<(), IngestError> {
    let mut out = Vec::new();
    for g in &ds.graphs {
        let record = JsonlGraph {
            edges: g
                .adjacency
                .undirected_edges()
                .iter()
                .map(|&(u, v, _)| [u, v])
                .collect(),
            features: if g.d0 > 0 {
                Some((0..g.n()).map(|i| g.feature_row(i).to_vec()).collect())
            } else {
                None
            },
            label: g.graph_label,
        };
        serde_json::to_writer(&mut out, &record).expect("jsonl serialization");
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(&out).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn malformed(path: &Path, line: usize, message: &str) -> IngestError {
    IngestError::Malformed {
        file: path.display().to_string(),
        line,
        message: message.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn load_str(content: &str) -> Result<GraphDataset, IngestError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        fs::write(&path, content).unwrap();
        load_jsonl(&path)
    }

    #[test]
    fn path_graph_with_scalar_features() {
        let ds = load_str(r#"{"edges":[[0,1]],"features":[[1],[2]]}"#).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.graphs[0].n(), 2);
        assert_eq!(ds.d0, 1);
        assert_eq!(ds.graphs[0].features, vec![1.0, 2.0]);
    }

    #[test]
    fn singleton_graph() {
        let ds = load_str(r#"{"edges":[],"features":[[0.5]]}"#).unwrap();
        assert_eq!(ds.graphs[0].n(), 1);
        assert_eq!(ds.graphs[0].adjacency.num_entries(), 0);
    }

    #[test]
    fn asymmetric_edge_list_is_symmetrized() {
        let ds = load_str(r#"{"edges":[[0,1]]}"#).unwrap();
        let adj = &ds.graphs[0].adjacency;
        assert_eq!(adj.weight(0, 1), 1.0);
        assert_eq!(adj.weight(1, 0), 1.0);
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = load_str("{\"edges\":[[0,1]]}\nnot json\n").unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let ds = load_str(concat!(
            r#"{"edges":[[0,1],[1,2]],"features":[[0.125,1.5],[2.25,-3.5],[0.0,0.75]],"label":1}"#,
            "\n",
            r#"{"edges":[[0,1]],"features":[[0.1,0.2],[0.3,0.4]],"label":0}"#,
            "\n"
        ))
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.jsonl");
        write_jsonl(&ds, &path).unwrap();
        let re = load_jsonl(&path).unwrap();
        assert_eq!(re.len(), ds.len());
        for (a, b) in ds.graphs.iter().zip(&re.graphs) {
            assert_eq!(a.n(), b.n());
            assert_eq!(a.adjacency, b.adjacency);
            assert_eq!(a.features, b.features);
            assert_eq!(a.graph_label, b.graph_label);
        }
    }
}
