//! Output directories, tables and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gradfair::harness::{Experiment, ExperimentResult, TrainConfig};
use serde::Serialize;

pub const MANIFEST: &str = "manifest.json";

/// A run's output directory. Files are recorded as they are written; the
/// manifest goes in last, so a directory with a manifest holds a complete run.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    /// Creates the directory. Refuses one that already holds a manifest.
    pub fn create(root: &Path) -> Result<Self> {
        if root.join(MANIFEST).exists() {
            bail!(
                "{} already holds a completed run ({MANIFEST} exists); choose another --out",
                root.display()
            );
        }
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn record(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    pub fn write_csv(&mut self, name: &str, table: &Table) -> Result<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(&table.header)?;
        for row in &table.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        self.record(name);
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.record(name);
        Ok(())
    }

    /// Writes the manifest through a temporary file and a rename.
    pub fn finish(self, mut manifest: Manifest) -> Result<()> {
        manifest.output_dir = self.root.display().to_string();
        manifest.files = self.files;
        let tmp = self.root.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, self.root.join(MANIFEST))?;
        Ok(())
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_spec: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub configs: Vec<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub splits: Option<SplitInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthInfo>,
    pub output_dir: String,
    pub files: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct SplitInfo {
    pub fractions: (f64, f64, f64),
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Serialize)]
pub struct SynthInfo {
    pub n: usize,
    pub d: usize,
    pub bias: Vec<f64>,
    pub seed: u64,
}

fn split_info(exp: &Experiment) -> SplitInfo {
    SplitInfo {
        fractions: exp.fractions,
        train: exp.train.len(),
        val: exp.val.data.len(),
        test: exp.test.data.len(),
    }
}

impl Manifest {
    fn empty(command: &str) -> Self {
        Self {
            command: command.to_string(),
            dataset_spec: None,
            dataset: None,
            configs: Vec::new(),
            splits: None,
            lambdas: None,
            selected_epoch: None,
            snapshot_hash: None,
            wall_clock_secs: None,
            synth: None,
            output_dir: String::new(),
            files: Vec::new(),
        }
    }

    pub fn new(
        command: &str,
        spec_path: &Path,
        dataset: &str,
        cfg: Option<&TrainConfig>,
        r: &ExperimentResult,
        exp: &Experiment,
    ) -> Self {
        Self {
            dataset_spec: Some(spec_path.display().to_string()),
            dataset: Some(dataset.to_string()),
            configs: cfg.into_iter().cloned().collect(),
            splits: Some(split_info(exp)),
            selected_epoch: Some(r.selected_epoch),
            snapshot_hash: Some(r.snapshot.hash()),
            wall_clock_secs: Some(r.wall_clock_secs),
            ..Self::empty(command)
        }
    }

    pub fn sweep(spec_path: &Path, dataset: &str, cfg: &TrainConfig, lambdas: &[f64], exp: &Experiment) -> Self {
        Self {
            dataset_spec: Some(spec_path.display().to_string()),
            dataset: Some(dataset.to_string()),
            configs: vec![cfg.clone()],
            splits: Some(split_info(exp)),
            lambdas: Some(lambdas.to_vec()),
            ..Self::empty("sweep")
        }
    }

    pub fn compare(spec_path: &Path, dataset: &str, cfgs: &[TrainConfig], exp: &Experiment) -> Self {
        Self {
            dataset_spec: Some(spec_path.display().to_string()),
            dataset: Some(dataset.to_string()),
            configs: cfgs.to_vec(),
            splits: Some(split_info(exp)),
            ..Self::empty("compare")
        }
    }

    pub fn synth(n: usize, d: usize, bias: &[f64], seed: u64) -> Self {
        Self {
            synth: Some(SynthInfo {
                n,
                d,
                bias: bias.to_vec(),
                seed,
            }),
            ..Self::empty("synth")
        }
    }
}

/// A header plus string rows; written as CSV, printed aligned.
#[derive(Clone, Debug)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    /// Aligned text. Cells listed in `marked` (row, column) get a `*`.
    /// Numbers are shown with four decimals.
    pub fn render(&self, marked: &[(usize, usize)]) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, c)| {
                        let shown = match c.parse::<f64>() {
                            Ok(v) if c.contains('.') => format!("{v:.4}"),
                            _ => c.clone(),
                        };
                        if marked.contains(&(i, j)) {
                            format!("{shown}*")
                        } else {
                            shown
                        }
                    })
                    .collect()
            })
            .collect();
        let widths: Vec<usize> = (0..self.header.len())
            .map(|j| {
                cells
                    .iter()
                    .map(|r| r.get(j).map_or(0, String::len))
                    .chain([self.header[j].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&self.header);
        for r in &cells {
            out.push_str(&line(r));
        }
        out
    }
}

/// Best cell per metric column: highest acc, delta and cons, lowest discr.
pub fn best_markers(t: &Table) -> Vec<(usize, usize)> {
    let mut marks = Vec::new();
    for (j, name) in t.header.iter().enumerate() {
        let lower_is_better = name.starts_with("discr_");
        if !(lower_is_better || name == "acc" || name == "delta" || name == "cons") {
            continue;
        }
        let vals: Vec<f64> = t.rows.iter().map(|r| r[j].parse().unwrap_or(f64::NAN)).collect();
        let best = if lower_is_better {
            vals.iter().cloned().fold(f64::INFINITY, f64::min)
        } else {
            vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        };
        for (i, v) in vals.iter().enumerate() {
            if *v == best {
                marks.push((i, j));
            }
        }
    }
    marks
}

pub fn history_table(r: &ExperimentResult) -> Table {
    let mut header = vec!["epoch".to_string(), "train_loss".into(), "val_acc".into()];
    header.extend(r.protected_names.iter().map(|p| format!("val_discr_{p}")));
    header.extend(["selection_discr".into(), "val_cons".into(), "selected".into(), "snapshot_hash".into()]);
    let mut t = Table::new(header);
    for h in &r.history {
        let mut row = vec![h.epoch.to_string(), h.train_loss.to_string(), h.val_accuracy.to_string()];
        row.extend(h.val_discrimination.iter().map(|d| d.to_string()));
        row.extend([
            h.selection_discrimination.to_string(),
            h.val_consistency.to_string(),
            u8::from(h.epoch == r.selected_epoch).to_string(),
            h.snapshot_hash.clone(),
        ]);
        t.push(row);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markers_pick_direction_per_column() {
        let mut t = Table::new(vec!["algorithm".into(), "acc".into(), "discr_a".into(), "cons".into()]);
        t.push(vec!["x".into(), "0.8".into(), "0.2".into(), "0.9".into()]);
        t.push(vec!["y".into(), "0.7".into(), "0.1".into(), "0.9".into()]);
        assert_eq!(best_markers(&t), vec![(0, 1), (1, 2), (0, 3), (1, 3)]);
        let text = t.render(&best_markers(&t));
        assert!(text.lines().nth(1).unwrap().contains("0.8000*"));
    }

    #[test]
    fn existing_manifest_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), "{}").unwrap();
        assert!(OutputDir::create(dir.path()).is_err());
    }
}
