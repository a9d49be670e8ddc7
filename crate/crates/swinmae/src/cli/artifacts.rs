//! Artifact writing: CSV files with an embedded config echo, and cleanup of
//! partial outputs when a command fails.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mae::EpochStat;
use crate::train::FinetuneEpoch;

/// Tracks files created by a command; anything not disarmed is deleted on
/// drop so failures leave no partial outputs behind.
#[derive(Default)]
pub struct ArtifactGuard {
    paths: Vec<PathBuf>,
    armed: bool,
}

impl ArtifactGuard {
    pub fn new() -> Self {
        ArtifactGuard {
            paths: Vec::new(),
            armed: true,
        }
    }

    pub fn track(&mut self, path: &Path) {
        self.paths.push(path.to_path_buf());
    }

    pub fn disarm(&mut self) {
        self.armed = false;
    }
}

impl Drop for ArtifactGuard {
    fn drop(&mut self) {
        if self.armed {
            for p in &self.paths {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

/// Comment header carried by every CSV artifact.
pub fn csv_header(config_echo: &str, seed: u64) -> String {
    format!("# config: {config_echo}\n# seed: {seed}\n")
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

pub fn write_pretrain_log(
    path: &Path,
    config_echo: &str,
    seed: u64,
    log: &[EpochStat],
) -> Result<()> {
    let mut out = csv_header(config_echo, seed);
    out.push_str("epoch,mean_loss,lr\n");
    for e in log {
        let _ = writeln!(out, "{},{},{}", e.epoch, e.mean_loss, e.lr);
    }
    write_file(path, &out)
}

pub fn write_finetune_log(
    path: &Path,
    config_echo: &str,
    seed: u64,
    log: &[FinetuneEpoch],
) -> Result<()> {
    let mut out = csv_header(config_echo, seed);
    out.push_str("epoch,mean_loss,lr,val_metric\n");
    for e in log {
        let _ = writeln!(out, "{},{},{},{}", e.epoch, e.mean_loss, e.lr, e.val_metric);
    }
    write_file(path, &out)
}

/// Transfer audit CSV: the stage-selection note rides in the comments.
pub fn write_transfer_report(
    path: &Path,
    config_echo: &str,
    seed: u64,
    policy_label: &str,
    note: &str,
    entries: &[crate::adapt::TransferEntry],
) -> Result<()> {
    let mut out = csv_header(config_echo, seed);
    let _ = writeln!(out, "# policy: {policy_label}");
    let _ = writeln!(out, "# note: {note}");
    out.push_str("tensor,status,source,shape\n");
    for e in entries {
        let status = match e.status {
            crate::adapt::TransferStatus::Transferred => "TRANSFERRED",
            crate::adapt::TransferStatus::RandomInit => "RANDOM_INIT",
        };
        let shape = e
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let _ = writeln!(
            out,
            "{},{},{},{}",
            e.tensor,
            status,
            e.source.as_deref().unwrap_or(""),
            shape
        );
    }
    write_file(path, &out)
}

/// Per-case segmentation results: one Dice row per test image.
pub fn write_seg_results(
    path: &Path,
    config_echo: &str,
    seed: u64,
    rows: &[(usize, String, f64)],
) -> Result<()> {
    let mut out = csv_header(config_echo, seed);
    out.push_str("fold,id,dice\n");
    for (fold, id, dice) in rows {
        let _ = writeln!(out, "{fold},{id},{dice}");
    }
    write_file(path, &out)
}

/// Per-case classification results: label plus one score column per class.
pub fn write_cls_results(
    path: &Path,
    config_echo: &str,
    seed: u64,
    n_classes: usize,
    rows: &[(usize, String, usize, Vec<f64>)],
) -> Result<()> {
    let mut out = csv_header(config_echo, seed);
    out.push_str("fold,id,label");
    for k in 0..n_classes {
        let _ = write!(out, ",score_{k}");
    }
    out.push('\n');
    for (fold, id, label, scores) in rows {
        let _ = write!(out, "{fold},{id},{label}");
        for s in scores {
            let _ = write!(out, ",{s}");
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// Comparison table: task, model, fold, metric, point, ci, p, stars.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub task: String,
    pub model: String,
    pub fold: String,
    pub metric: String,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_vs_reference: Option<f64>,
    pub stars: String,
}

pub fn write_eval_results(
    path: &Path,
    config_echo: &str,
    seed: u64,
    rows: &[EvalRow],
) -> Result<()> {
    let mut out = csv_header(config_echo, seed);
    out.push_str("task,model,fold,metric,point,ci_low,ci_high,p_vs_reference,stars\n");
    for r in rows {
        let p = r.p_vs_reference.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.task, r.model, r.fold, r.metric, r.point, r.ci_low, r.ci_high, p, r.stars
        );
    }
    write_file(path, &out)
}

/// Label-efficiency sweep: one row per training-data fraction.
pub fn write_sweep_results(
    path: &Path,
    config_echo: &str,
    seed: u64,
    rows: &[(f64, f64, f64, f64)],
) -> Result<()> {
    let mut out = csv_header(config_echo, seed);
    out.push_str("fraction,metric,ci_low,ci_high\n");
    for (fraction, metric, lo, hi) in rows {
        let _ = writeln!(out, "{fraction},{metric},{lo},{hi}");
    }
    write_file(path, &out)
}

/// Parse a CSV artifact back into (comments, header, records).
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut comments = Vec::new();
    let mut header: Vec<String> = Vec::new();
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') {
            comments.push(line.to_string());
        } else if header.is_empty() {
            header = line.split(',').map(str::to_string).collect();
        } else if !line.is_empty() {
            rows.push(line.split(',').map(str::to_string).collect());
        }
    }
    if header.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no header row",
            path.display()
        )));
    }
    Ok((comments, header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_removes_files_unless_disarmed() {
        let dir = std::env::temp_dir();
        let p1 = dir.join(format!("swinmae-guard-{}-a.csv", std::process::id()));
        let p2 = dir.join(format!("swinmae-guard-{}-b.csv", std::process::id()));
        {
            let mut g = ArtifactGuard::new();
            std::fs::write(&p1, "x").unwrap();
            g.track(&p1);
        }
        assert!(!p1.exists());
        {
            let mut g = ArtifactGuard::new();
            std::fs::write(&p2, "x").unwrap();
            g.track(&p2);
            g.disarm();
        }
        assert!(p2.exists());
        std::fs::remove_file(&p2).unwrap();
    }

    #[test]
    fn csv_roundtrip_preserves_rows() {
        let dir = std::env::temp_dir();
        let p = dir.join(format!("swinmae-csv-{}.csv", std::process::id()));
        write_seg_results(&p, "{}", 5, &[(0, "a".into(), 0.5), (1, "b".into(), 0.75)]).unwrap();
        let (comments, header, rows) = read_csv(&p).unwrap();
        assert_eq!(comments.len(), 2);
        assert_eq!(header, vec!["fold", "id", "dice"]);
        assert_eq!(rows[1], vec!["1", "b", "0.75"]);
        std::fs::remove_file(&p).unwrap();
    }
}
