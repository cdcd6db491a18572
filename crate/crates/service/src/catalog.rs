//! Checkpoints found in the model directory, loaded once at startup.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use nanolens::checkpoint::load_checkpoint;
use nanolens::ModelSpec;
use serde::Serialize;

pub const CHECKPOINT_EXTENSION: &str = "ckpt";

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct LayerRow {
    pub index: usize,
    pub kind: String,
    /// `(C, H, W)` of this layer's output for one image.
    pub output_shape: [usize; 3],
    /// Output channels for conv layers, absent otherwise.
    pub filters: Option<usize>,
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct ModelCatalogEntry {
    /// Checkpoint filename stem.
    pub id: String,
    pub kind: String,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerRow>,
    pub encoder_len: Option<usize>,
    /// Largest valid lens depth; the smallest is 1.
    pub max_depth: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct CatalogDiagnostic {
    pub file: String,
    pub reason: String,
}

pub struct LoadedModel {
    pub entry: ModelCatalogEntry,
    pub model: Arc<ModelSpec<f32>>,
}

#[derive(Default)]
pub struct Catalog {
    pub models: BTreeMap<String, LoadedModel>,
    pub invalid: Vec<CatalogDiagnostic>,
}

fn entry_for(id: String, model: &ModelSpec<f32>) -> nanolens::Result<ModelCatalogEntry> {
    let shapes = model.layer_shapes(1)?;
    let layers = model
        .layers
        .iter()
        .zip(shapes)
        .enumerate()
        .map(|(index, (layer, [_, c, h, w]))| LayerRow {
            index,
            kind: layer.kind().to_string(),
            output_shape: [c, h, w],
            filters: model.filter_count(index).ok(),
        })
        .collect();
    Ok(ModelCatalogEntry {
        id,
        kind: model.kind.to_string(),
        input_shape: model.input_shape,
        layers,
        encoder_len: model.encoder_len,
        max_depth: model.max_depth(),
    })
}

impl Catalog {
    /// Load every `*.ckpt` in `dir`, in filename order. Unreadable or invalid
    /// checkpoints become diagnostics rather than errors.
    pub fn load(dir: &Path) -> std::io::Result<Self> {
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file() && p.extension().and_then(|e| e.to_str()) == Some(CHECKPOINT_EXTENSION)
            })
            .collect();
        paths.sort();
        let mut catalog = Catalog::default();
        for path in paths {
            let file = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let id = path
                .file_stem()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            match load_checkpoint(&path).and_then(|m| Ok((entry_for(id.clone(), &m)?, m))) {
                Ok((entry, model)) => {
                    catalog.models.insert(
                        id,
                        LoadedModel {
                            entry,
                            model: Arc::new(model),
                        },
                    );
                }
                Err(e) => {
                    warn!("skipping checkpoint {file}: {e}");
                    catalog.invalid.push(CatalogDiagnostic {
                        file,
                        reason: e.to_string(),
                    });
                }
            }
        }
        Ok(catalog)
    }

    pub fn get(&self, id: &str) -> Option<&LoadedModel> {
        self.models.get(id)
    }
}
