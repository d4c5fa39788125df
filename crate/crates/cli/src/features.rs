//! Feature extraction and retrieval evaluation over a loaded dataset.

use reid_core::eval::{evaluate, DistanceMetric, FeatureMode, GalleryIndex, MetricsReport};
use reid_core::synth::Split;
use reid_core::tensor::Tensor;
use reid_core::train::Model;

use crate::error::{CliError, Result};

pub struct SplitFeatures {
    pub features: Tensor,
    pub pids: Vec<usize>,
    pub camids: Vec<usize>,
    /// Indices into the dataset's item list, aligned with the rows.
    pub indices: Vec<usize>,
}

/// One deterministic forward pass per item of a split, assembled per the
/// requested feature mode.
pub fn extract_split(
    model: &Model,
    data: &reid_core::synth::ReidData,
    split: Split,
    mode: FeatureMode,
) -> Result<SplitFeatures> {
    let indices = data.split_indices(split);
    if indices.is_empty() {
        return Err(CliError::config(format!("dataset has no {} images", split.as_str())));
    }
    let mut rows: Vec<Tensor> = Vec::with_capacity(indices.len());
    let mut pids = Vec::with_capacity(indices.len());
    let mut camids = Vec::with_capacity(indices.len());
    for &i in &indices {
        let item = &data.items[i];
        let camera = if model.image.config.sie.enabled { Some(item.camid) } else { None };
        let bundle = model.image.encode_image_values(&model.store, &item.pixels, camera)?;
        rows.push(mode.assemble(&bundle));
        pids.push(item.pid);
        camids.push(item.camid);
    }
    let cols = rows[0].cols;
    let mut features = Tensor::zeros(rows.len(), cols);
    for (r, row) in rows.iter().enumerate() {
        for c in 0..cols {
            *features.at_mut(r, c) = row.at(0, c);
        }
    }
    Ok(SplitFeatures { features, pids, camids, indices })
}

/// Query-vs-gallery retrieval metrics on the test split.
pub fn evaluate_model(
    model: &Model,
    data: &reid_core::synth::ReidData,
    mode: FeatureMode,
    metric: DistanceMetric,
) -> Result<MetricsReport> {
    let q = extract_split(model, data, Split::Query, mode)?;
    let g = extract_split(model, data, Split::Gallery, mode)?;
    let gallery = GalleryIndex::new(g.features, g.pids, g.camids)?;
    let mut report = evaluate(&q.features, &q.pids, &q.camids, &gallery, metric)?;
    report.feature_mode = mode.as_str().to_string();
    Ok(report)
}
