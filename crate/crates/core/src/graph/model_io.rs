//! `model.json` plus a sibling `weights/` directory of `QTENSOR1` files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Activation, BatchNorm, LayerAttrs, LayerKind, LayerNode, NetworkGraph, ParamRefs};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::{read_tensor, tensor_to_bytes};

pub const MODEL_VERSION: u32 = 1;
const MODEL_FILE: &str = "model.json";
const WEIGHTS_DIR: &str = "weights";

/// On-disk form of a graph. `kind` stays a string here so that an unknown
/// kind can be reported with its layer id.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LayerEntry {
    pub id: String,
    pub kind: String,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub attrs: LayerAttrs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamRefs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn: Option<BatchNorm>,
    #[serde(default)]
    pub inputs: Vec<String>,
}

/// Accepts either the `model.json` path or the directory holding it.
pub fn resolve_model_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "json") {
        path.to_path_buf()
    } else {
        path.join(MODEL_FILE)
    }
}

pub fn load_model(path: &Path) -> Result<NetworkGraph> {
    let model_path = resolve_model_path(path);
    let text = fs::read_to_string(&model_path).map_err(|e| Error::io(&model_path, e))?;
    let file: ModelFile =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: model_path.clone(), source })?;
    if file.version != MODEL_VERSION {
        return Err(Error::InvalidGraph(format!("unsupported model version {}", file.version)));
    }
    let weights_dir = model_path.parent().unwrap_or(Path::new(".")).join(WEIGHTS_DIR);

    let mut layers = Vec::with_capacity(file.layers.len());
    let mut params = BTreeMap::new();
    for entry in file.layers {
        let kind = LayerKind::parse(&entry.kind)
            .ok_or_else(|| Error::UnknownKind { layer: entry.id.clone(), kind: entry.kind.clone() })?;
        if let Some(refs) = &entry.params {
            for reference in [&refs.weight, &refs.bias] {
                let file = weights_dir.join(reference);
                if !file.is_file() {
                    return Err(Error::MissingParameter { layer: entry.id.clone(), reference: reference.clone() });
                }
                params.insert(reference.clone(), read_tensor(&file)?);
            }
        }
        layers.push(LayerNode {
            id: entry.id,
            kind,
            activation: entry.activation,
            attrs: entry.attrs,
            params: entry.params,
            bn: entry.bn,
            inputs: entry.inputs,
        });
    }
    NetworkGraph::new(file.input_shape, layers, params)
}

/// Writes `model.json` and `weights/`. `path` is the json file or a
/// directory.
pub fn save_model(graph: &NetworkGraph, path: &Path) -> Result<()> {
    let model_path = resolve_model_path(path);
    let dir = model_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let weights_dir = dir.join(WEIGHTS_DIR);
    fs::create_dir_all(&weights_dir).map_err(|e| Error::io(&weights_dir, e))?;
    for (reference, tensor) in graph.params() {
        write_atomic(&weights_dir.join(reference), &tensor_to_bytes(tensor))?;
    }
    let file = ModelFile {
        version: MODEL_VERSION,
        input_shape: graph.input_shape().to_vec(),
        layers: graph
            .layers()
            .iter()
            .map(|l| LayerEntry {
                id: l.id.clone(),
                kind: l.kind.as_str().to_string(),
                activation: l.activation,
                attrs: l.attrs.clone(),
                params: l.params.clone(),
                bn: l.bn.clone(),
                inputs: l.inputs.clone(),
            })
            .collect(),
    };
    let mut json = serde_json::to_vec_pretty(&file).expect("model serializes");
    json.push(b'\n');
    write_atomic(&model_path, &json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::tensor::Tensor;

    fn tiny() -> NetworkGraph {
        let mut b = GraphBuilder::new(vec![1, 2]);
        b.input("in");
        b.dense(
            "fc",
            "in",
            Tensor::new(vec![2, 2], vec![0.1, -0.7, 1e-8, 3.5]).unwrap(),
            Tensor::vector(vec![0.25, -0.0]).unwrap(),
            Activation::Relu,
        );
        b.output("out", "fc");
        b.build().unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let g = tiny();
        save_model(&g, dir.path()).unwrap();
        assert!(dir.path().join("weights/fc.weight.qt").is_file());
        let back = load_model(&dir.path().join("model.json")).unwrap();
        assert_eq!(back.layers(), g.layers());
        for (k, t) in g.params() {
            assert!(back.params()[k].bit_eq(t));
        }
        assert_eq!(back.fingerprint(), g.fingerprint());
    }

    #[test]
    fn missing_weights_file_names_reference() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&tiny(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("weights/fc.bias.qt")).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(
            matches!(err, Error::MissingParameter { ref reference, .. } if reference == "fc.bias.qt"),
            "{err}"
        );
    }

    #[test]
    fn unknown_kind_names_layer() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&tiny(), dir.path()).unwrap();
        let p = dir.path().join("model.json");
        let text = fs::read_to_string(&p).unwrap().replace("\"dense\"", "\"conv3d\"");
        fs::write(&p, text).unwrap();
        let err = load_model(&p).unwrap_err();
        assert!(matches!(err, Error::UnknownKind { ref layer, ref kind } if layer == "fc" && kind == "conv3d"));
    }

    #[test]
    fn parse_error_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("model.json"), "{ not json").unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Json { .. })));
    }

    #[cfg(unix)]
    #[test]
    fn save_to_read_only_location_fails() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let ro = dir.path().join("ro");
        fs::create_dir(&ro).unwrap();
        fs::set_permissions(&ro, fs::Permissions::from_mode(0o555)).unwrap();
        // root ignores permission bits; only assert when the directory really is read-only
        if fs::write(ro.join("probe"), b"x").is_err() {
            assert!(matches!(save_model(&tiny(), &ro), Err(Error::Io { .. })));
        }
        let file = dir.path().join("plain");
        fs::write(&file, b"x").unwrap();
        assert!(matches!(save_model(&tiny(), &file.join("sub")), Err(Error::Io { .. })));
    }
}
