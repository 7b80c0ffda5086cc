//! Dataset directories: `manifest.json`, one `QTENSOR1` file per sample and
//! either `labels.csv` (`index,label`) or one target tensor per sample.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::{read_tensor, tensor_to_bytes};

pub const DATASET_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    n: usize,
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    targets: Option<Vec<String>>,
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let inputs: Vec<String> = (0..dataset.len()).map(|i| format!("sample_{i:05}.qt")).collect();
    for (name, sample) in inputs.iter().zip(dataset.samples()) {
        write_atomic(&dir.join(name), &tensor_to_bytes(sample))?;
    }
    let (labels, targets) = match dataset.labels() {
        Labels::Classes(classes) => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::Csv { path: dir.join(LABELS_FILE), row: 0, detail: e.to_string() };
            w.write_record(["index", "label"]).map_err(csv_err)?;
            for (i, l) in classes.iter().enumerate() {
                w.write_record([i.to_string(), l.to_string()]).map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
            write_atomic(&dir.join(LABELS_FILE), &bytes)?;
            (Some(LABELS_FILE.to_string()), None)
        }
        Labels::Targets(ts) => {
            let names: Vec<String> = (0..ts.len()).map(|i| format!("target_{i:05}.qt")).collect();
            for (name, t) in names.iter().zip(ts) {
                write_atomic(&dir.join(name), &tensor_to_bytes(t))?;
            }
            (None, Some(names))
        }
    };
    let manifest = Manifest { version: DATASET_VERSION, n: dataset.len(), inputs, labels, targets };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    write_atomic(&dir.join(MANIFEST), &json)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.clone(), source })?;
    if m.version != DATASET_VERSION {
        return Err(Error::Dataset(format!("unsupported manifest version {}", m.version)));
    }
    if m.inputs.len() != m.n {
        return Err(Error::Dataset(format!("manifest declares n = {} but lists {} inputs", m.n, m.inputs.len())));
    }
    let samples = m.inputs.iter().map(|f| read_tensor(&dir.join(f))).collect::<Result<Vec<_>>>()?;
    let labels = match (&m.labels, &m.targets) {
        (Some(file), None) => Labels::Classes(read_labels(&dir.join(file), m.n)?),
        (None, Some(files)) => {
            if files.len() != m.n {
                return Err(Error::Dataset(format!(
                    "manifest declares n = {} but lists {} targets",
                    m.n,
                    files.len()
                )));
            }
            Labels::Targets(files.iter().map(|f| read_tensor(&dir.join(f))).collect::<Result<Vec<_>>>()?)
        }
        _ => return Err(Error::Dataset("manifest must name exactly one of `labels` or `targets`".into())),
    };
    Dataset::new(samples, labels)
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<usize>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Dataset(format!("{}: {other:?}", path.display())),
    })?;
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let err = |detail: String| Error::Csv { path: path.to_path_buf(), row, detail };
        let record = record.map_err(|e| err(e.to_string()))?;
        if record.len() != 2 {
            return Err(err(format!("expected 2 fields, found {}", record.len())));
        }
        let index: usize = record[0].trim().parse().map_err(|_| err(format!("bad index `{}`", &record[0])))?;
        if index != i {
            return Err(err(format!("index {index} out of order, expected {i}")));
        }
        let label = record[1].trim().parse().map_err(|_| err(format!("label `{}` is not an integer", &record[1])))?;
        labels.push(label);
    }
    if labels.len() != n {
        return Err(Error::Dataset(format!("manifest declares n = {n} but labels file has {} rows", labels.len())));
    }
    Ok(labels)
}
