//! Private knowledge bases built from a locally trained encoder.

use super::data::Dataset;
use super::encoder::{embed, EncoderParams};
use super::TrainError;
use crate::pqkb::{KnowledgeBase, PQConfig};

/// Encodes every sample, trains a PQ codebook on the embeddings and stores
/// them with ids `0..N` and the dataset labels. The source tag is `pkb:<tag>`.
pub fn build_private_kb(
    encoder: &EncoderParams,
    dataset: &Dataset,
    pq: &PQConfig,
    tag: &str,
) -> Result<KnowledgeBase, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::Validation("cannot build a knowledge base from an empty dataset".into()));
    }
    let vectors = embed(encoder, &dataset.images)?;
    let ids: Vec<u64> = (0..dataset.len() as u64).collect();
    Ok(KnowledgeBase::build(&vectors, ids, Some(dataset.labels.clone()), pq, format!("pkb:{tag}"))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pqkb::Metric;
    use crate::rng;
    use crate::trainer::data::SyntheticDatasetSpec;

    #[test]
    fn self_retrieval_and_size() {
        let ds = Dataset::synthetic(&SyntheticDatasetSpec::default().with_samples(5, 3)).unwrap();
        let enc = EncoderParams::init(&[192, 16, 8], &mut rng::stream(1, &[])).unwrap();
        // one subspace with as many centroids as entries: every entry is its own centroid
        let pq = PQConfig::new(8, 1).with_k_star(ds.len()).with_metric(Metric::Cosine);
        let kb = build_private_kb(&enc, &ds, &pq, "dev-a").unwrap();
        assert_eq!(kb.len(), ds.len());
        assert_eq!(kb.source_tag(), "pkb:dev-a");
        let emb = embed(&enc, &ds.images).unwrap();
        for i in 0..ds.len() {
            assert_eq!(kb.adc_search(emb.row(i), 1).unwrap()[0].id, i as u64);
        }
    }
}
