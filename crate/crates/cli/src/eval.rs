use std::collections::HashSet;
use std::path::{Path, PathBuf};

use nle_core::evalstat::{
    evaluate_triple, report, row_from_strings, MetricsRow, Report, CSV_HEADER,
};
use nle_core::phantom::fraction_stem;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{create_dir, load, load_manifest, volume_path, write_json, Split};
use crate::error::{CliError, Result};

/// One evaluated image. Relative paths resolve against the pairing file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub image_id: String,
    pub input: PathBuf,
    pub a: PathBuf,
    pub b: PathBuf,
    pub reference: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pairing {
    pub pairs: Vec<PairEntry>,
}

impl Pairing {
    /// Test split of a dataset against two prediction directories.
    pub fn from_dataset(
        dataset: &Path,
        pred_a: &Path,
        pred_b: &Path,
        input_fraction: f64,
    ) -> Result<Self> {
        let manifest = load_manifest(dataset)?;
        let stem = fraction_stem(input_fraction);
        let pairs = manifest
            .split(Split::Test)
            .map(|e| PairEntry {
                image_id: e.id.clone(),
                input: volume_path(dataset, &e.id, &stem),
                a: pred_a.join(format!("{}.nvol", e.id)),
                b: pred_b.join(format!("{}.nvol", e.id)),
                reference: volume_path(dataset, &e.id, "full"),
            })
            .collect();
        Ok(Self { pairs })
    }

    fn resolved(&self, base: &Path) -> Self {
        let fix = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                base.join(p)
            }
        };
        Self {
            pairs: self
                .pairs
                .iter()
                .map(|e| PairEntry {
                    image_id: e.image_id.clone(),
                    input: fix(&e.input),
                    a: fix(&e.a),
                    b: fix(&e.b),
                    reference: fix(&e.reference),
                })
                .collect(),
        }
    }

    /// Checks ids and file presence before any metric is computed.
    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(CliError::Config("pairing lists no images".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.pairs {
            if !seen.insert(&e.image_id) {
                return Err(CliError::Config(format!(
                    "image id {} appears twice",
                    e.image_id
                )));
            }
            for (role, p) in [
                ("input", &e.input),
                ("a", &e.a),
                ("b", &e.b),
                ("reference", &e.reference),
            ] {
                if !p.is_file() {
                    return Err(CliError::Config(format!(
                        "pairing {}: {role} {} does not exist",
                        e.image_id,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn evaluate_pairing(cfg: &ExperimentConfig, pairing: &Pairing) -> Result<Vec<MetricsRow>> {
    pairing.validate()?;
    pairing
        .pairs
        .iter()
        .map(|e| {
            let input = load(&e.input)?;
            let a = load(&e.a)?;
            let b = load(&e.b)?;
            let reference = load(&e.reference)?;
            for (role, v) in [("input", &input), ("a", &a), ("b", &b)] {
                if v.dims() != reference.dims() {
                    return Err(CliError::Config(format!(
                        "pairing {}: {role} dims {:?} differ from reference {:?}",
                        e.image_id,
                        v.dims(),
                        reference.dims()
                    )));
                }
            }
            Ok(evaluate_triple(
                &e.image_id,
                &input,
                &a,
                &b,
                &reference,
                cfg.eval.peak,
                &cfg.eval.ssim,
            )?)
        })
        .collect()
}

/// Reads metric rows from a CSV with the report's columns; a `Mean` row is skipped.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::io(path, std::io::Error::other(e)))?;
    let header = rdr
        .headers()
        .map_err(|e| CliError::bad_file(path, e))?
        .clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(CliError::Config(format!(
            "{}: expected columns {}",
            path.display(),
            CSV_HEADER.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::bad_file(path, e))?;
        let fields: Vec<&str> = rec.iter().collect();
        if fields
            .first()
            .is_some_and(|id| id.eq_ignore_ascii_case("mean"))
        {
            continue;
        }
        let row = row_from_strings(&fields)
            .map_err(|e| CliError::Config(format!("{} row {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub enum EvalSource<'a> {
    Pairing(&'a Path),
    Csv(&'a Path),
    Dataset {
        dataset: &'a Path,
        pred_a: &'a Path,
        pred_b: &'a Path,
    },
}

/// `eval`: Table-style report with paired statistics; writes `report.csv`,
/// `report.json` and `box.json` when `out` is given.
pub fn cmd_eval(cfg: &ExperimentConfig, source: EvalSource, out: Option<&Path>) -> Result<Report> {
    cfg.validate()?;
    let rows = match source {
        EvalSource::Csv(path) => read_metrics_csv(path)?,
        EvalSource::Pairing(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let pairing: Pairing = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let base = path.parent().unwrap_or(Path::new("."));
            evaluate_pairing(cfg, &pairing.resolved(base))?
        }
        EvalSource::Dataset {
            dataset,
            pred_a,
            pred_b,
        } => {
            let pairing =
                Pairing::from_dataset(dataset, pred_a, pred_b, cfg.patches.input_fraction)?;
            evaluate_pairing(cfg, &pairing)?
        }
    };
    let rep = report(&rows)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        let csv_path = dir.join("report.csv");
        std::fs::write(&csv_path, rep.to_csv()).map_err(|e| CliError::io(&csv_path, e))?;
        write_json(&dir.join("report.json"), &rep)?;
        let boxes = serde_json::json!({
            "psnr": rep.psnr.as_ref().map(|d| [&d.a_minus_input, &d.b_minus_input, &d.b_minus_a]),
            "ssim": rep.ssim.as_ref().map(|d| [&d.a_minus_input, &d.b_minus_input, &d.b_minus_a]),
            "order": ["a - input", "b - input", "b - a"],
        });
        write_json(&dir.join("box.json"), &boxes)?;
    }
    Ok(rep)
}
