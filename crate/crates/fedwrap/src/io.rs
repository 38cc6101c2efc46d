//! CSV ingestion, processed client files, the partition manifest and the
//! report CSVs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fedwrap_core::dataset::{class_histogram, preprocess, ColumnKind, Dataset, Partition, PartitionSpec};
use fedwrap_core::federation::RoundLogRow;
use fedwrap_core::metrics::{MetricsReport, Scores};
use fedwrap_core::model::Model;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::{Error, Result};

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read_to_string(path)?).map_err(|e| Error::format(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::format(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    write_file(path, text)
}

/// Column name to kind, one `name = "numeric" | "categorical" | "label"`
/// entry per column.
pub type Schema = BTreeMap<String, ColumnKind>;

pub fn read_schema(path: &Path) -> Result<Schema> {
    read_toml(path)
}

/// Reads a raw CSV and preprocesses it against `schema`.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    parse_csv(reader, path, schema)
}

/// Same as [`load_csv`] for CSV text already in memory.
pub fn load_csv_text(text: &str, origin: &str, schema: &Schema) -> Result<Dataset> {
    parse_csv(csv::Reader::from_reader(text.as_bytes()), Path::new(origin), schema)
}

fn parse_csv<R: std::io::Read>(mut reader: csv::Reader<R>, path: &Path, schema: &Schema) -> Result<Dataset> {
    let header: Vec<String> = reader.headers().map_err(|e| Error::format(path, e))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(path, e))?;
        rows.push(record.iter().map(|c| c.trim().to_string()).collect());
    }
    preprocess(&header, &rows, schema).map_err(|e| Error::format(path, e))
}

pub fn load_raw(csv_path: &Path, schema_path: &Path) -> Result<Dataset> {
    let schema = read_schema(schema_path)?;
    load_csv(csv_path, &schema)
}

/// Preprocessed rows: `row_id`, the feature columns, then `label` as a
/// class id.
pub fn write_processed(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["row_id".to_string()];
    header.extend(data.feature_names().iter().cloned());
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::format(path, e))?;
    for (i, (x, y)) in data.rows().enumerate() {
        let mut rec = vec![data.row_ids()[i].to_string()];
        rec.extend(x.iter().map(|v| v.to_string()));
        rec.push(y.to_string());
        w.write_record(&rec).map_err(|e| Error::format(path, e))?;
    }
    write_file(path, w.into_inner().map_err(|e| Error::format(path, e))?)
}

pub fn read_processed(path: &Path, class_names: &[String]) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| Error::format(path, e))?.iter().map(str::to_string).collect();
    if header.len() < 3 || header[0] != "row_id" || header[header.len() - 1] != "label" {
        return Err(Error::format(path, "expected columns row_id,<features...>,label"));
    }
    let in_dim = header.len() - 2;
    let (mut features, mut labels, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e))?;
        let cell = |c: usize| record.get(c).unwrap_or("");
        let bad = |c: usize| Error::format(path, format!("row {}, column {:?}: cannot parse {:?}", r + 1, header[c], cell(c)));
        ids.push(cell(0).parse::<usize>().map_err(|_| bad(0))?);
        for c in 1..=in_dim {
            features.push(cell(c).parse::<f64>().map_err(|_| bad(c))?);
        }
        labels.push(cell(in_dim + 1).parse::<usize>().map_err(|_| bad(in_dim + 1))?);
    }
    Dataset::from_parts(features, in_dim, labels, class_names.len(), header[1..=in_dim].to_vec(), class_names.to_vec(), ids)
        .map_err(|e| Error::format(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEntry {
    pub client_id: String,
    pub file: String,
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestEntry {
    pub file: String,
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub source: String,
    pub spec: PartitionSpec,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub test: TestEntry,
    pub clients: Vec<ClientEntry>,
}

impl PartitionManifest {
    pub fn in_dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn client(&self, id: &str) -> Result<&ClientEntry> {
        self.clients
            .iter()
            .find(|c| c.client_id == id)
            .ok_or_else(|| Error::Config(format!("client {id:?} is not in the partition manifest")))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const TEST_FILE: &str = "test.csv";

/// Writes the manifest, per-client and test files, and the histogram.
pub fn write_partition(out: &Path, source: &str, partition: &Partition) -> Result<PartitionManifest> {
    let test = &partition.test_set;
    let mut clients = Vec::new();
    for (i, data) in partition.client_datasets.iter().enumerate() {
        let file = format!("client_{i}.csv");
        write_processed(&out.join(&file), data)?;
        clients.push(ClientEntry { client_id: i.to_string(), file, rows: data.row_ids().to_vec() });
    }
    write_processed(&out.join(TEST_FILE), test)?;
    let manifest = PartitionManifest {
        source: source.to_string(),
        spec: partition.spec,
        feature_names: test.feature_names().to_vec(),
        class_names: test.class_names().to_vec(),
        test: TestEntry { file: TEST_FILE.into(), rows: test.row_ids().to_vec() },
        clients,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    write_histogram(&out.join(HISTOGRAM_FILE), partition)?;
    Ok(manifest)
}

/// Manifest plus the directory its file names are relative to.
pub fn read_manifest(path: &Path) -> Result<(PartitionManifest, PathBuf)> {
    let manifest: PartitionManifest = read_json(path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, dir))
}

pub fn histogram_csv(partition: &Partition) -> String {
    let mut out = String::from("client_id,class_id,count\n");
    for r in class_histogram(partition) {
        out.push_str(&format!("{},{},{}\n", r.client_id, r.class_id, r.count));
    }
    out
}

pub fn write_histogram(path: &Path, partition: &Partition) -> Result<()> {
    write_file(path, histogram_csv(partition))
}

pub fn round_log_csv(log: &[RoundLogRow]) -> String {
    let mut out = String::from("round,elapsed_ms,mean_client_loss,test_accuracy\n");
    for r in log {
        let acc = r.test_accuracy.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.round, r.elapsed_ms, r.mean_client_loss, acc));
    }
    out
}

/// Table-style summary, one row per metric.
pub fn report_csv(n_clients: usize, setting: &str, report: &MetricsReport) -> String {
    let mut out = String::from("n_clients,setting,metric,local_mean,local_std,wrapper_mean,wrapper_std\n");
    let (local, wrapper) = (report.local.as_array(), report.wrapper.as_array());
    for (i, name) in Scores::METRIC_NAMES.iter().enumerate() {
        out.push_str(&format!(
            "{n_clients},{setting},{name},{:.6},{:.6},{:.6},{:.6}\n",
            local[i].mean, local[i].std, wrapper[i].mean, wrapper[i].std
        ));
    }
    out
}

/// Every client's three score sets.
pub fn per_client_csv(report: &MetricsReport) -> String {
    let mut out = String::from("client_id,model,kind,accuracy,precision,recall,f1\n");
    for c in &report.per_client {
        for (kind, s) in [("local", &c.local), ("wrapper", &c.wrapper), ("federated", &c.federated)] {
            out.push_str(&format!(
                "{},{},{kind},{:.6},{:.6},{:.6},{:.6}\n",
                c.client_id, c.descriptor, s.accuracy, s.precision, s.recall, s.f1
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReportRow {
    pub n_clients: usize,
    pub setting: String,
    pub metric: String,
    pub local_mean: f64,
    pub local_std: f64,
    pub wrapper_mean: f64,
    pub wrapper_std: f64,
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    reader.deserialize().map(|r| r.map_err(|e| Error::format(path, e))).collect()
}

pub fn read_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Model::from_bytes(&bytes).map_err(|e| Error::format(path, e))
}

pub fn write_model(path: &Path, model: &Model) -> Result<()> {
    write_file(path, model.to_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn processed_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = Dataset::new(vec![0.25, -1.0, 3.5, 1e-3], 2, vec![1, 0], 2).unwrap();
        let path = dir.path().join("c.csv");
        write_processed(&path, &data).unwrap();
        let back = read_processed(&path, data.class_names()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn schema_file_drives_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("d.csv");
        let schema = dir.path().join("s.toml");
        fs::write(&csv, "a,c,y\n1,red,no\n3,blue,yes\n").unwrap();
        fs::write(&schema, "a = \"numeric\"\nc = \"categorical\"\ny = \"label\"\n").unwrap();
        let d = load_raw(&csv, &schema).unwrap();
        assert_eq!(d.feature_names(), ["a", "c=red", "c=blue"]);
        assert_eq!(d.row(0), [-1.0, 1.0, 0.0]);
        assert_eq!(d.labels(), [0, 1]);
    }

    #[test]
    fn missing_schema_names_the_path() {
        let err = read_schema(Path::new("/nonexistent/schema.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/schema.toml"));
        assert_eq!(err.exit_code(), 2);
    }
}
