//! Merging results CSVs into a family × ε table with one column per run.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use cldl_core::attacks::{read_results_csv, TransferRow};
use cldl_core::{AttackFamily, Result};

/// Row key: dataset, family, ε.
pub type Key = (String, String, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub runs: Vec<String>,
    /// Clean accuracy per run, per dataset.
    pub clean: Vec<(String, Vec<Option<f64>>)>,
    /// Adversarial accuracy cells, one row per attack (dataset, family, ε).
    pub rows: Vec<(Key, Vec<Option<f64>>)>,
}

const CLEAN: &str = "clean";

fn family_rank(f: &str) -> usize {
    AttackFamily::ALL
        .iter()
        .position(|a| a.tag() == f)
        .unwrap_or(AttackFamily::ALL.len())
}

fn key_order(a: &Key, b: &Key) -> Ordering {
    a.0.cmp(&b.0)
        .then(family_rank(&a.1).cmp(&family_rank(&b.1)))
        .then(a.1.cmp(&b.1))
        .then(a.2.total_cmp(&b.2))
}

/// Run ids are file stems, suffixed `#2`, `#3`, ... when repeated.
pub fn run_ids(paths: &[PathBuf]) -> Vec<String> {
    let mut ids: Vec<String> = Vec::with_capacity(paths.len());
    for p in paths {
        let stem = p.file_stem().map_or_else(
            || p.display().to_string(),
            |s| s.to_string_lossy().into_owned(),
        );
        let mut id = stem.clone();
        let mut k = 1;
        while ids.contains(&id) {
            k += 1;
            id = format!("{stem}#{k}");
        }
        ids.push(id);
    }
    ids
}

/// Adversarial accuracy per (dataset, family, ε) and run.
pub fn merge(runs: Vec<(String, Vec<TransferRow>)>) -> Table {
    let mut keys: Vec<Key> = Vec::new();
    let mut datasets: Vec<String> = Vec::new();
    for (_, rows) in &runs {
        for r in rows {
            if !datasets.contains(&r.dataset) {
                datasets.push(r.dataset.clone());
            }
            let k = (r.dataset.clone(), r.family.clone(), r.epsilon);
            if r.family != CLEAN && !keys.contains(&k) {
                keys.push(k);
            }
        }
    }
    keys.sort_by(key_order);
    datasets.sort();
    let clean = datasets
        .into_iter()
        .map(|d| {
            let cells = runs
                .iter()
                .map(|(_, rows)| {
                    rows.iter()
                        .find(|r| r.dataset == d)
                        .map(|r| r.clean_accuracy)
                })
                .collect();
            (d, cells)
        })
        .collect();
    let rows = keys
        .into_iter()
        .map(|k| {
            let cells = runs
                .iter()
                .map(|(_, rows)| {
                    rows.iter()
                        .find(|r| r.dataset == k.0 && r.family == k.1 && r.epsilon == k.2)
                        .map(|r| r.adversarial_accuracy)
                })
                .collect();
            (k, cells)
        })
        .collect();
    Table {
        runs: runs.into_iter().map(|(id, _)| id).collect(),
        clean,
        rows,
    }
}

pub fn merge_files(paths: &[PathBuf]) -> Result<Table> {
    let ids = run_ids(paths);
    let runs = ids
        .into_iter()
        .zip(paths)
        .map(|(id, p)| Ok((id, read_results_csv(p)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(merge(runs))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

impl Table {
    fn header(&self) -> Vec<String> {
        ["dataset", "family", "epsilon"]
            .iter()
            .map(|s| s.to_string())
            .chain(self.runs.iter().cloned())
            .collect()
    }

    /// Clean rows first (`family = clean`, `epsilon = 0`), then the attack cells.
    fn records(&self) -> Vec<Vec<String>> {
        let clean = self
            .clean
            .iter()
            .map(|(d, cells)| (d.clone(), CLEAN.to_string(), 0.0, cells));
        let attacks = self
            .rows
            .iter()
            .map(|((d, f, e), cells)| (d.clone(), f.clone(), *e, cells));
        clean
            .chain(attacks)
            .map(|(d, f, e, cells)| {
                [d, f, e.to_string()]
                    .into_iter()
                    .chain(cells.iter().map(|&c| cell(c)))
                    .collect()
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header())?;
        for r in self.records() {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Space-aligned rendering; text columns left-aligned, numbers right-aligned.
    pub fn to_text(&self) -> String {
        let header = self.header();
        let records = self.records();
        let widths: Vec<usize> = (0..header.len())
            .map(|j| {
                records
                    .iter()
                    .map(|r| r[j].len())
                    .chain([header[j].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |fields: &[String]| {
            let parts: Vec<String> = fields
                .iter()
                .enumerate()
                .map(|(j, f)| {
                    if j < 2 {
                        format!("{f:<w$}", w = widths[j])
                    } else {
                        format!("{f:>w$}", w = widths[j])
                    }
                })
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&header);
        for r in &records {
            out.push_str(&line(r));
        }
        out
    }
}
