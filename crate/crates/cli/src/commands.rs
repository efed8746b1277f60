//! Subcommand implementations. Logging goes to stderr; data goes to files
//! or stdout. Outputs carry no timestamps, so identical inputs and seeds
//! reproduce byte-identical artifacts.

use crate::config::RunConfig;
use crate::CliError;
use hgmae_core::graph::{degree_features_dataset, load_jsonl, load_tu_dataset, GraphDataset};
use hgmae_core::hierarchy::{build_hierarchy_with, HeavyEdgeMatching, HierarchyOptions};
use hgmae_core::masking::schedule_table;
use hgmae_core::scalar::{Precision, Scalar};
use hgmae_core::training::{
    embed, log_to_csv, peek_precision, pretrain, probe, Checkpoint, TrainConfig,
};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

pub fn load_dataset(cfg: &RunConfig) -> Result<GraphDataset, CliError> {
    let format = cfg
        .data
        .format
        .as_deref()
        .ok_or_else(|| CliError::Config("data.format is required for this command".into()))?;
    let path = cfg
        .data
        .path
        .as_deref()
        .ok_or_else(|| CliError::Config("data.path is required for this command".into()))?;
    let mut ds = match format {
        "tu" => {
            let name = cfg.data.name.as_deref().ok_or_else(|| {
                CliError::Config("data.name is required for the tu format".into())
            })?;
            load_tu_dataset(path, name)?
        }
        "jsonl" => load_jsonl(path)?,
        other => {
            return Err(CliError::Config(format!(
                "data.format={other} must be \"tu\" or \"jsonl\""
            )))
        }
    };
    if ds.d0 == 0 {
        log::info!(
            "dataset {} has no node features; using degree one-hots (max_degree={})",
            ds.name,
            cfg.data.max_degree
        );
        degree_features_dataset(&mut ds, cfg.data.max_degree);
    }
    Ok(ds)
}

fn write_or_print(out: Option<&Path>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, content).map_err(|e| {
            CliError::Runtime(format!("cannot write {}: {e}", path.display()))
        }),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(content.as_bytes())
                .map_err(|e| CliError::Runtime(format!("stdout: {e}")))
        }
    }
}

#[derive(Serialize)]
struct LevelDump {
    scale: usize,
    n: usize,
    edges: Vec<(usize, usize, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cluster_of: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct GraphDump {
    levels: Vec<LevelDump>,
}

#[derive(Serialize)]
struct HierarchyDump {
    name: String,
    graphs: Vec<GraphDump>,
}

pub fn cmd_coarsen(cfg: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let train_cfg = cfg.to_train_config();
    let graphs = ds
        .graphs
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let h = build_hierarchy_with(
                &HeavyEdgeMatching,
                &g.adjacency,
                HierarchyOptions {
                    scales: cfg.hierarchy.s,
                    r_p: cfg.hierarchy.r_p,
                    seed: train_cfg.hierarchy_seed_for(i),
                    binarize_coarse: cfg.hierarchy.binarize_coarse,
                },
            );
            GraphDump {
                levels: h
                    .levels
                    .iter()
                    .map(|level| LevelDump {
                        scale: level.scale,
                        n: level.n(),
                        edges: level.adj.undirected_edges(),
                        cluster_of: level
                            .assignment
                            .as_ref()
                            .map(|a| a.cluster_of().to_vec()),
                    })
                    .collect(),
            }
        })
        .collect();
    let dump = HierarchyDump { name: ds.name.clone(), graphs };
    let mut text = serde_json::to_string_pretty(&dump)
        .map_err(|e| CliError::Runtime(format!("serialization: {e}")))?;
    text.push('\n');
    write_or_print(out, &text)
}

pub fn cmd_schedule(cfg: &RunConfig, n_m: usize, out: Option<&Path>) -> Result<(), CliError> {
    let train_cfg = cfg.to_train_config();
    let sched = train_cfg.recovery.resolve(train_cfg.epochs);
    let mut csv = String::from("t,R\n");
    for (t, r) in schedule_table(n_m, &sched, train_cfg.epochs) {
        csv.push_str(&format!("{t},{r}\n"));
    }
    write_or_print(out, &csv)
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, log_path: Option<&Path>) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let train_cfg = cfg.to_train_config();
    match train_cfg.precision {
        Precision::F32 => run_pretrain::<f32>(&ds, &train_cfg, out, log_path),
        Precision::F64 => run_pretrain::<f64>(&ds, &train_cfg, out, log_path),
    }
}

fn run_pretrain<F: Scalar>(
    ds: &GraphDataset,
    train_cfg: &TrainConfig,
    out: &Path,
    log_path: Option<&Path>,
) -> Result<(), CliError> {
    let result = pretrain::<F>(ds, train_cfg)?;
    result.checkpoint(train_cfg).save(out)?;
    let log_file = log_path
        .map(PathBuf::from)
        .unwrap_or_else(|| out.with_extension("log.csv"));
    std::fs::write(&log_file, log_to_csv(&result.log))
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", log_file.display())))?;
    log::info!(
        "pretrained {} epochs, final loss {}; checkpoint {}, log {}",
        result.log.len(),
        result.log.last().map_or(f64::NAN, |l| l.loss),
        out.display(),
        log_file.display()
    );
    Ok(())
}

pub fn cmd_embed(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<(), CliError> {
    let bytes = std::fs::read(checkpoint)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", checkpoint.display())))?;
    match peek_precision(&bytes)? {
        Precision::F32 => run_embed::<f32>(cfg, &bytes, out),
        Precision::F64 => run_embed::<f64>(cfg, &bytes, out),
    }
}

fn run_embed<F: Scalar>(cfg: &RunConfig, bytes: &[u8], out: &Path) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let ckpt: Checkpoint<F> = Checkpoint::from_bytes(bytes)?;
    // The checkpoint's config governs hierarchy reproduction and the model;
    // the current eval section picks the readout.
    let mut train_cfg = ckpt.meta.config.clone();
    train_cfg.readout_mode = cfg.eval.readout_mode;
    let model = ckpt.into_model()?;
    let rows = embed(&ds, &model, &train_cfg)?;
    let mut csv = String::new();
    for row in &rows {
        let mut first = true;
        for v in row {
            if !first {
                csv.push(',');
            }
            csv.push_str(&format!("{v}"));
            first = false;
        }
        csv.push('\n');
    }
    std::fs::write(out, csv)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", out.display())))?;
    log::info!("wrote {} embeddings of width {}", rows.len(), rows.first().map_or(0, Vec::len));
    Ok(())
}

pub fn cmd_probe(cfg: &RunConfig, embeddings_path: &Path) -> Result<(), CliError> {
    let mut ds = load_dataset(cfg)?;
    let labels = ds
        .class_indices()
        .ok_or_else(|| CliError::Config("probe needs graph labels in the dataset".into()))?;
    let text = std::fs::read_to_string(embeddings_path).map_err(|e| {
        CliError::Runtime(format!("cannot read {}: {e}", embeddings_path.display()))
    })?;
    let embeddings: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split(',')
                .map(|tok| tok.trim().parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| CliError::Runtime(format!("bad embeddings row: {e}")))
        })
        .collect::<Result<_, _>>()?;

    let mut means = Vec::with_capacity(cfg.eval.repeats);
    let mut stdout = std::io::stdout().lock();
    for rep in 0..cfg.eval.repeats {
        let seed = cfg.train.seed.wrapping_add(rep as u64);
        let report = probe(&embeddings, &labels, cfg.eval.folds, seed)?;
        let folds: Vec<String> = report.fold_accuracies.iter().map(|a| format!("{a:.4}")).collect();
        writeln!(
            stdout,
            "run {rep}: accuracy {:.4} +/- {:.4} over {} folds [{}]",
            report.mean,
            report.std,
            cfg.eval.folds,
            folds.join(", ")
        )
        .map_err(|e| CliError::Runtime(format!("stdout: {e}")))?;
        means.push(report.mean);
    }
    let overall = means.iter().sum::<f64>() / means.len() as f64;
    writeln!(stdout, "mean accuracy over {} runs: {overall:.4}", cfg.eval.repeats)
        .map_err(|e| CliError::Runtime(format!("stdout: {e}")))?;
    Ok(())
}
