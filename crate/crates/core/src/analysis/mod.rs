//! Structure of the embedding space: Ward clustering and t-SNE projection.

pub mod tsne;
pub mod ward;

use std::collections::HashMap;

use rand::seq::index::sample;

use crate::dataset::{Dataset, MalignancyClass};
use crate::error::{Error, Result};
use crate::head::Embedding;
use crate::scalar::Scalar;

pub use tsne::{tsne, TsneConfig, TsneRun};
pub use ward::{top_splits_summary, ward_cluster, Dendrogram, SplitSummary};

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPoint<T> {
    pub nodule_id: String,
    pub coords: [T; 2],
    pub class: Option<MalignancyClass>,
}

/// Projects embeddings to 2-D; classes are left unset.
pub fn project<T: Scalar>(embeddings: &[Embedding<T>], config: &TsneConfig) -> Result<(Vec<ProjectedPoint<T>>, TsneRun<T>)> {
    let values: Vec<&[T]> = embeddings.iter().map(|e| e.values.as_slice()).collect();
    let run = tsne(&values, config)?;
    let points = embeddings
        .iter()
        .zip(&run.coords)
        .map(|(e, c)| ProjectedPoint {
            nodule_id: e.nodule_id.clone(),
            coords: *c,
            class: None,
        })
        .collect();
    Ok((points, run))
}

/// Tags every point with its nodule's malignancy class.
pub fn color_by_malignancy<T: Scalar>(points: &mut [ProjectedPoint<T>], dataset: &Dataset) -> Result<()> {
    let by_id: HashMap<&str, _> = dataset.records().iter().map(|r| (r.nodule_id.as_str(), r)).collect();
    for p in points {
        let r = by_id.get(p.nodule_id.as_str()).ok_or_else(|| Error::Lookup(p.nodule_id.clone()))?;
        p.class = Some(r.malignancy_class()?);
    }
    Ok(())
}

/// Seeded subset of `size` embeddings, kept in their original order.
/// Returns everything when `size` is `None` or not smaller than the input.
pub fn sample_embeddings<T: Clone>(embeddings: &[Embedding<T>], size: Option<usize>, seed: u64) -> Vec<Embedding<T>> {
    match size {
        Some(m) if m < embeddings.len() => {
            let mut picked = sample(&mut crate::seeded_rng(seed), embeddings.len(), m).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| embeddings[i].clone()).collect()
        }
        _ => embeddings.to_vec(),
    }
}
