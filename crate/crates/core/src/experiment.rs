//! Evaluation workflows shared by the command-line tool and the tests:
//! raw-versus-encoded classification, the depth sweep and the clustering
//! grid.

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::eval::{
    accuracy, adjusted_rand_index, kmeans, knn_classify, nearest_centroid_classify, KMeansInit, KMeansSettings,
    LabeledFeatures,
};
use crate::model::{encode_layers, pooled_features, train, ModelConfig, TrainedModel};

/// Final-layer features of `data`, sum-pooled over windows of `pool`.
pub fn model_features(model: &TrainedModel, data: &Dataset, pool: usize) -> Result<Vec<Vec<f64>>> {
    let layers = encode_layers(model, &data.samples)?;
    pooled_features(layers.last().expect("at least one layer"), pool)
}

fn labels_of(data: &Dataset) -> Result<&[usize]> {
    data.labels
        .as_deref()
        .ok_or_else(|| invalid("this workflow needs a labeled dataset"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyRow {
    pub features: String,
    pub dim: usize,
    pub knn: f64,
    pub centroid: f64,
}

/// KNN and nearest-centroid test accuracy of one feature representation.
pub fn score_features(
    name: impl Into<String>,
    train_features: Vec<Vec<f64>>,
    train_labels: &[usize],
    test_features: &[Vec<f64>],
    test_labels: &[usize],
    k: usize,
) -> Result<AccuracyRow> {
    let lf = LabeledFeatures::new(train_features, train_labels.to_vec())?;
    let knn = accuracy(&knn_classify(&lf, test_features, k)?, test_labels)?;
    let centroid = accuracy(&nearest_centroid_classify(&lf, test_features)?, test_labels)?;
    Ok(AccuracyRow {
        features: name.into(),
        dim: lf.dim(),
        knn,
        centroid,
    })
}

pub fn score_raw(train_set: &Dataset, test_set: &Dataset, k: usize) -> Result<AccuracyRow> {
    score_features(
        "raw",
        train_set.rows(),
        labels_of(train_set)?,
        &test_set.rows(),
        labels_of(test_set)?,
        k,
    )
}

pub fn score_model(model: &TrainedModel, train_set: &Dataset, test_set: &Dataset, k: usize, pool: usize) -> Result<AccuracyRow> {
    score_features(
        format!("dctl-{}", model.num_layers()),
        model_features(model, train_set, pool)?,
        labels_of(train_set)?,
        &model_features(model, test_set, pool)?,
        labels_of(test_set)?,
        k,
    )
}

/// Raw features, then one row per depth in `depths`, each model trained on
/// `train_set` with `config` apart from the layer count.
pub fn depth_sweep(
    train_set: &Dataset,
    test_set: &Dataset,
    config: &ModelConfig,
    depths: &[usize],
    k: usize,
    pool: usize,
) -> Result<Vec<AccuracyRow>> {
    let mut rows = vec![score_raw(train_set, test_set, k)?];
    for &layers in depths {
        let config = ModelConfig {
            num_layers: layers,
            ..config.clone()
        };
        let model = train(&train_set.samples, &config)?;
        rows.push(score_model(&model, train_set, test_set, k, pool)?);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterRow {
    pub features: String,
    pub init: KMeansInit,
    pub dim: usize,
    pub ari: f64,
    pub seconds: f64,
    pub iterations: usize,
}

/// k-means with every initialization on every named feature set; the
/// timing covers the clustering call only.
pub fn cluster_grid(
    feature_sets: &[(&str, &[Vec<f64>])],
    labels: &[usize],
    clusters: usize,
    seed: u64,
) -> Result<Vec<ClusterRow>> {
    let mut rows = Vec::with_capacity(feature_sets.len() * KMeansInit::ALL.len());
    for &(name, features) in feature_sets {
        if features.len() != labels.len() {
            return Err(invalid(format!(
                "feature set '{name}' has {} rows for {} labels",
                features.len(),
                labels.len()
            )));
        }
        for init in KMeansInit::ALL {
            let res = kmeans(features, clusters, &KMeansSettings::new(init, seed))?;
            rows.push(ClusterRow {
                features: name.to_string(),
                init,
                dim: features.first().map_or(0, Vec::len),
                ari: adjusted_rand_index(&res.assignments, labels)?,
                seconds: res.elapsed_seconds,
                iterations: res.iterations,
            });
        }
    }
    Ok(rows)
}
