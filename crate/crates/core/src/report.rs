//! Score and report files.
//!
//! CSV files start with one `#` comment line carrying the provenance, then a
//! header row. JSON documents carry the same provenance as top-level fields.
//! Unscored values are written as `NA`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::selection::EvalReport;
use crate::valuation::{BlockScore, PointScores, SampleScores};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(tool: &str, version: &str, config_hash: &str) -> Self {
        Self { tool: tool.into(), version: version.into(), config_hash: config_hash.into() }
    }

    fn comment(&self) -> String {
        format!("# tool={} version={} config_hash={}", self.tool, self.version, self.config_hash)
    }
}

/// Rows of string cells under a fixed header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self, provenance: &Provenance) -> Result<String> {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            if row.len() != self.header.len() {
                return Err(Error::ShapeMismatch(format!("row of {} cells under {} columns", row.len(), self.header.len())));
            }
            w.write_record(row).map_err(csv_err)?;
        }
        let body = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
        let mut out = provenance.comment();
        out.push('\n');
        out.push_str(&String::from_utf8_lossy(&body));
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        write_file(path, self.to_csv(provenance)?.as_bytes())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

pub fn num(v: f64) -> String {
    v.to_string()
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), num)
}

pub fn block_table(scores: &[BlockScore]) -> Table {
    let mut t = Table::new(["index", "start", "length", "fold", "value"]);
    for (i, s) in scores.iter().enumerate() {
        t.push(vec![i.to_string(), s.block.start.to_string(), s.block.length.to_string(), s.fold.to_string(), num(s.value)]);
    }
    t
}

pub fn point_table(points: &PointScores) -> Table {
    let mut t = Table::new(["t", "value", "coverage"]);
    for (i, (v, c)) in points.values.iter().zip(&points.coverage).enumerate() {
        t.push(vec![(points.start + i).to_string(), opt_num(*v), c.to_string()]);
    }
    t
}

pub fn sample_table(samples: &SampleScores) -> Table {
    let mut t = Table::new(["index", "start", "length", "value", "coverage"]);
    for (i, s) in samples.entries.iter().enumerate() {
        t.push(vec![
            i.to_string(),
            s.window.start.to_string(),
            s.window.length.to_string(),
            num(s.value),
            num(s.coverage),
        ]);
    }
    t
}

/// One row per report; wall times are left out so reruns match byte for byte.
pub fn eval_table(reports: &[EvalReport], extra: &[(&str, Vec<String>)]) -> Table {
    let mut header: Vec<String> = extra.iter().map(|(k, _)| k.to_string()).collect();
    header.extend(
        ["strategy", "ratio", "n_selected", "mse", "mae", "architecture", "dataset", "seed", "n_train", "n_test"]
            .map(String::from),
    );
    let mut t = Table { header, rows: Vec::new() };
    for (i, r) in reports.iter().enumerate() {
        let mut row: Vec<String> = extra.iter().map(|(_, v)| v[i].clone()).collect();
        row.extend([
            r.strategy.to_string(),
            num(r.ratio),
            r.n_selected.to_string(),
            num(r.mse),
            num(r.mae),
            format!("{:?}", r.model.architecture).to_lowercase(),
            r.dataset.clone(),
            r.seed.to_string(),
            r.n_train_instances.to_string(),
            r.n_test_instances.to_string(),
        ]);
        t.push(row);
    }
    t
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    tool: &'a str,
    version: &'a str,
    config_hash: &'a str,
    kind: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a serde_json::Value>,
    payload: &'a T,
}

/// Pretty JSON document with provenance, an optional config echo and a payload.
pub fn json_document<T: Serialize>(
    provenance: &Provenance,
    kind: &str,
    config: Option<&serde_json::Value>,
    payload: &T,
) -> Result<String> {
    let doc = Document {
        tool: &provenance.tool,
        version: &provenance.version,
        config_hash: &provenance.config_hash,
        kind,
        config,
        payload,
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(
    path: &Path,
    provenance: &Provenance,
    kind: &str,
    config: Option<&serde_json::Value>,
    payload: &T,
) -> Result<()> {
    write_file(path, json_document(provenance, kind, config, payload)?.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_provenance_and_na() {
        let points = PointScores { start: 3, values: vec![Some(0.5), None], coverage: vec![1, 0] };
        let text = point_table(&points).to_csv(&Provenance::new("ltsv", "0.1.0", "abc")).unwrap();
        assert_eq!(text, "# tool=ltsv version=0.1.0 config_hash=abc\nt,value,coverage\n3,0.5,1\n4,NA,0\n");
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let mut t = Table::new(["a", "b"]);
        t.push(vec!["1".into()]);
        assert!(t.to_csv(&Provenance::new("x", "y", "z")).is_err());
    }

    #[test]
    fn json_document_fields() {
        let doc = json_document(&Provenance::new("ltsv", "1", "h"), "scores", None, &vec![1, 2]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&doc).unwrap();
        assert_eq!(v["config_hash"], "h");
        assert_eq!(v["payload"][1], 2);
        assert!(v.get("config").is_none());
    }
}
