use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::codebook::{pq_decode, pq_encode, pq_train, PQCode, PQCodebook, PQConfig, PqLayout};
use super::PqError;
use crate::linalg::Matrix;

/// Top-n cut-off used when a caller does not pick one.
pub const DEFAULT_TOP_N: usize = 30;

/// An immutable product-quantized vector store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    codebook: PQCodebook,
    codes: Vec<PQCode>,
    ids: Vec<u64>,
    labels: Option<Vec<i32>>,
    source_tag: String,
}

/// One search result.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub id: u64,
    /// Squared L2 between the (prepared) query and the decoded entry.
    pub distance: f64,
    pub vector: Vec<f32>,
}

impl KnowledgeBase {
    pub fn new(
        codebook: PQCodebook,
        codes: Vec<PQCode>,
        ids: Vec<u64>,
        labels: Option<Vec<i32>>,
        source_tag: impl Into<String>,
    ) -> Result<Self, PqError> {
        let layout = codebook.layout();
        if codes.len() != ids.len() {
            return Err(PqError::Validation(format!("{} codes but {} ids", codes.len(), ids.len())));
        }
        if let Some(l) = &labels {
            if l.len() != ids.len() {
                return Err(PqError::Validation(format!("{} labels for {} entries", l.len(), ids.len())));
            }
        }
        for code in &codes {
            if code.0.len() != layout.m || code.0.iter().any(|&c| usize::from(c) >= layout.k_star) {
                return Err(PqError::Validation("code does not fit the codebook".into()));
            }
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(PqError::DuplicateId(*dup));
        }
        let source_tag = source_tag.into();
        if source_tag.len() > usize::from(u16::MAX) {
            return Err(PqError::Validation("source tag longer than 65535 bytes".into()));
        }
        Ok(Self { codebook, codes, ids, labels, source_tag })
    }

    /// Trains a codebook on `vectors` and encodes every row.
    pub fn build(
        vectors: &Matrix,
        ids: Vec<u64>,
        labels: Option<Vec<i32>>,
        config: &PQConfig,
        source_tag: impl Into<String>,
    ) -> Result<Self, PqError> {
        let codebook = pq_train(vectors, config)?;
        let codes = vectors.iter_rows().map(|v| pq_encode(v, &codebook)).collect::<Result<Vec<_>, _>>()?;
        Self::new(codebook, codes, ids, labels, source_tag)
    }

    pub fn codebook(&self) -> &PQCodebook {
        &self.codebook
    }

    pub fn layout(&self) -> PqLayout {
        self.codebook.layout()
    }

    pub fn dim(&self) -> usize {
        self.layout().d
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn codes(&self) -> &[PQCode] {
        &self.codes
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    /// Reconstruction of entry `i`.
    pub fn decode(&self, i: usize) -> Vec<f32> {
        pq_decode(&self.codes[i], &self.codebook).expect("codes validated on construction")
    }

    /// Asymmetric distance search: the query stays exact, stored entries are
    /// compared through per-subspace lookup tables. Results are sorted by
    /// `(distance, id)` and hold at most `n` entries.
    pub fn adc_search(&self, query: &[f64], n: usize) -> Result<Vec<SearchHit>, PqError> {
        if self.is_empty() {
            return Err(PqError::EmptyStore);
        }
        if n == 0 {
            return Err(PqError::Validation("n must be at least 1".into()));
        }
        let layout = self.layout();
        if query.len() != layout.d {
            return Err(PqError::Validation(format!("query has length {}, store holds d={}", query.len(), layout.d)));
        }
        if query.iter().any(|x| !x.is_finite()) {
            return Err(PqError::Validation("query contains non-finite values".into()));
        }
        let mut q = query.to_vec();
        self.codebook.metric().prepare(&mut q);
        let table = self.codebook.distance_table(&q);
        let k = layout.k_star;
        let mut scored: Vec<(f64, u64, usize)> = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, code)| {
                let d = code.0.iter().enumerate().map(|(j, &c)| table[j * k + usize::from(c)]).sum::<f64>();
                (d, self.ids[i], i)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.truncate(n);
        Ok(scored
            .into_iter()
            .map(|(distance, id, i)| SearchHit { id, distance, vector: self.decode(i) })
            .collect())
    }
}

/// Free-function form of [`KnowledgeBase::adc_search`].
pub fn adc_search(query: &[f64], kb: &KnowledgeBase, n: usize) -> Result<Vec<SearchHit>, PqError> {
    kb.adc_search(query, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pqkb::codebook::Metric;
    use crate::rng;
    use rand::Rng;

    fn corpus(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, &[]);
        Matrix::from_vec(n, d, (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn sample_kb() -> KnowledgeBase {
        let x = corpus(300, 16, 1);
        KnowledgeBase::build(&x, (0..300).collect(), None, &PQConfig::new(16, 4).with_seed(3), "skb").unwrap()
    }

    #[test]
    fn constructor_checks_invariants() {
        let kb = sample_kb();
        let cb = kb.codebook().clone();
        let codes = kb.codes()[..2].to_vec();
        assert!(matches!(
            KnowledgeBase::new(cb.clone(), codes.clone(), vec![1, 1], None, "x"),
            Err(PqError::DuplicateId(1))
        ));
        assert!(KnowledgeBase::new(cb.clone(), codes.clone(), vec![1], None, "x").is_err());
        assert!(KnowledgeBase::new(cb, codes, vec![1, 2], Some(vec![0]), "x").is_err());
    }

    #[test]
    fn exact_entry_ranks_first_with_zero_distance() {
        let kb = sample_kb();
        let target = 42;
        let q: Vec<f64> = kb.decode(target).into_iter().map(f64::from).collect();
        let hits = kb.adc_search(&q, 5).unwrap();
        assert_eq!(hits[0].distance, 0.0);
        // several entries may share the code; the smallest id among them wins
        let first_with_code = kb.codes().iter().position(|c| *c == kb.codes()[target]).unwrap();
        assert_eq!(hits[0].id, kb.ids()[first_with_code]);
    }

    #[test]
    fn results_sorted_and_capped() {
        let kb = sample_kb();
        let q = corpus(1, 16, 77);
        let hits = kb.adc_search(q.row(0), 1000).unwrap();
        assert_eq!(hits.len(), 300);
        for w in hits.windows(2) {
            assert!(w[0].distance < w[1].distance || (w[0].distance == w[1].distance && w[0].id < w[1].id));
        }
        assert_eq!(kb.adc_search(q.row(0), DEFAULT_TOP_N).unwrap().len(), 30);
    }

    #[test]
    fn empty_store_and_bad_queries() {
        let kb = sample_kb();
        let empty = KnowledgeBase::new(kb.codebook().clone(), vec![], vec![], None, "e").unwrap();
        assert!(matches!(empty.adc_search(&[0.0; 16], 3), Err(PqError::EmptyStore)));
        assert!(kb.adc_search(&[0.0; 15], 3).is_err());
        assert!(kb.adc_search(&[0.0; 16], 0).is_err());
    }

    #[test]
    fn pinned_centroids_give_exact_nearest_neighbour() {
        // m = 1, k* = N, centroids are the stored vectors themselves.
        let x = corpus(40, 5, 8);
        let layout = PqLayout { d: 5, m: 1, k_star: 40 };
        let cb = PQCodebook::from_centroids(layout, Metric::L2, &[x.clone()]).unwrap();
        let codes = (0..40u16).map(|i| PQCode(vec![i])).collect();
        let kb = KnowledgeBase::new(cb, codes, (100..140).collect(), None, "pinned").unwrap();
        let queries = corpus(25, 5, 9);
        for q in queries.iter_rows() {
            let stored: Vec<Vec<f64>> = x
                .iter_rows()
                .map(|r| r.iter().map(|&v| f64::from(v as f32)).collect())
                .collect();
            let mut exact: Vec<(f64, u64)> = stored
                .iter()
                .enumerate()
                .map(|(i, r)| (crate::linalg::squared_l2(q, r), 100 + i as u64))
                .collect();
            exact.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let hits = kb.adc_search(q, 5).unwrap();
            let got: Vec<u64> = hits.iter().map(|h| h.id).collect();
            let want: Vec<u64> = exact[..5].iter().map(|e| e.1).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn concurrent_readers_agree() {
        let kb = std::sync::Arc::new(sample_kb());
        let q = corpus(8, 16, 5);
        let serial: Vec<Vec<u64>> =
            q.iter_rows().map(|r| kb.adc_search(r, 10).unwrap().iter().map(|h| h.id).collect()).collect();
        std::thread::scope(|s| {
            for (i, row) in q.iter_rows().enumerate() {
                let kb = kb.clone();
                let want = serial[i].clone();
                s.spawn(move || {
                    let got: Vec<u64> = kb.adc_search(row, 10).unwrap().iter().map(|h| h.id).collect();
                    assert_eq!(got, want);
                });
            }
        });
    }
}
