//! Target-domain feature bank and nearest-neighbour retrieval.

use std::cmp::Ordering;

use crate::classifier::Classifier;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

use super::eval::{embed, Embeddings};

/// Snapshot of every target sample's unit-norm embedding and softmax
/// prediction, indexed by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    embeddings: Tensor,
    predictions: Tensor,
    sample_ids: Vec<usize>,
}

impl FeatureBank {
    pub fn new(embeddings: Tensor, predictions: Tensor) -> Result<Self> {
        let (es, ps) = (embeddings.shape(), predictions.shape());
        if es.len() != 2 || ps.len() != 2 || es[0] != ps[0] {
            return Err(Error::Dimension(format!(
                "bank embeddings {es:?} and predictions {ps:?} disagree"
            )));
        }
        let n = es[0];
        Ok(Self {
            embeddings,
            predictions,
            sample_ids: (0..n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn predictions(&self) -> &Tensor {
        &self.predictions
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.len() {
            return Err(Error::Data(format!(
                "sample id {id} not in a bank of {} rows",
                self.len()
            )));
        }
        Ok(())
    }

    /// Overwrites the rows of `ids` with fresh values.
    pub fn refresh(&mut self, ids: &[usize], embeddings: &Tensor, predictions: &Tensor) -> Result<()> {
        if embeddings.shape() != [ids.len(), self.embeddings.shape()[1]]
            || predictions.shape() != [ids.len(), self.predictions.shape()[1]]
        {
            return Err(Error::Dimension(format!(
                "refresh of {} rows got embeddings {:?} and predictions {:?}",
                ids.len(),
                embeddings.shape(),
                predictions.shape()
            )));
        }
        for (r, &id) in ids.iter().enumerate() {
            self.check_id(id)?;
            self.embeddings.row_mut(id).copy_from_slice(embeddings.row(r));
            self.predictions.row_mut(id).copy_from_slice(predictions.row(r));
        }
        Ok(())
    }
}

/// One forward pass over every target image, without gradient tracking.
pub fn build_bank(model: &EncoderModel, classifier: &Classifier, images: &Tensor, threads: usize) -> Result<FeatureBank> {
    if images.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Config("cannot build a feature bank from an empty dataset".into()));
    }
    let Embeddings { features, probabilities } = embed(model, classifier, images, threads)?;
    FeatureBank::new(features, probabilities)
}

/// For each query id, the `m` other bank rows with the highest cosine
/// similarity to the query's stored embedding. Ties go to the lower id.
pub fn find_neighbors(bank: &FeatureBank, query_ids: &[usize], m: usize) -> Result<Vec<Vec<usize>>> {
    let n = bank.len();
    if m == 0 || m >= n {
        return Err(Error::Config(format!(
            "neighbour count {m} must be in [1, {n}) for a bank of {n} rows"
        )));
    }
    for &q in query_ids {
        bank.check_id(q)?;
    }
    let d = bank.embeddings.shape()[1];
    let queries = bank.embeddings.select_rows(query_ids);
    let mut sims = vec![0.0; query_ids.len() * n];
    // Rows are unit-norm, so dot products are cosines.
    gemm(query_ids.len(), d, n, queries.data(), false, bank.embeddings.data(), true, &mut sims, 0.0);

    let order = |a: &(f64, usize), b: &(f64, usize)| match b.0.total_cmp(&a.0) {
        Ordering::Equal => a.1.cmp(&b.1),
        o => o,
    };
    Ok(query_ids
        .iter()
        .enumerate()
        .map(|(qi, &q)| {
            let row = &sims[qi * n..(qi + 1) * n];
            let mut cand: Vec<(f64, usize)> = row
                .iter()
                .enumerate()
                .filter(|&(id, _)| id != q)
                .map(|(id, &s)| (s, id))
                .collect();
            cand.select_nth_unstable_by(m - 1, order);
            cand.truncate(m);
            cand.sort_by(order);
            cand.into_iter().map(|(_, id)| id).collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank_from(rows: &[Vec<f64>]) -> FeatureBank {
        let e = Tensor::from_rows(rows).unwrap();
        let p = Tensor::full(&[rows.len(), 2], 0.5);
        FeatureBank::new(e, p).unwrap()
    }

    #[test]
    fn one_hot_bank() {
        let b = bank_from(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(find_neighbors(&b, &[0], 1).unwrap(), vec![vec![1]]);
        assert_eq!(find_neighbors(&b, &[2], 2).unwrap(), vec![vec![0, 1]]);
    }

    #[test]
    fn too_many_neighbors_is_config_error() {
        let b = bank_from(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(find_neighbors(&b, &[0], 2), Err(Error::Config(_))));
        assert!(matches!(find_neighbors(&b, &[5], 1), Err(Error::Data(_))));
    }

    #[test]
    fn refresh_touches_only_given_rows() {
        let mut b = bank_from(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let before = b.clone();
        let e = Tensor::from_rows(&[vec![0.0, -1.0]]).unwrap();
        let p = Tensor::from_rows(&[vec![0.9, 0.1]]).unwrap();
        b.refresh(&[1], &e, &p).unwrap();
        assert_eq!(b.embeddings().row(1), &[0.0, -1.0]);
        for r in [0, 2] {
            assert_eq!(b.embeddings().row(r), before.embeddings().row(r));
            assert_eq!(b.predictions().row(r), before.predictions().row(r));
        }
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(3..40);
            // Unit vectors with entries in {0, ±1/2, ±1}: every dot product is
            // exact, so ties are genuine.
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        let mut v = vec![0.0; 4];
                        v[rng.random_range(0..4)] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        v
                    } else {
                        (0..4).map(|_| if rng.random_bool(0.5) { 0.5 } else { -0.5 }).collect()
                    }
                })
                .collect();
            let b = bank_from(&rows);
            let m = rng.random_range(1..n.min(9));
            let ids: Vec<usize> = (0..n).collect();
            let got = find_neighbors(&b, &ids, m).unwrap();
            for q in 0..n {
                let mut all: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != q)
                    .map(|j| (rows[q].iter().zip(&rows[j]).map(|(a, b)| a * b).sum(), j))
                    .collect();
                all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let want: Vec<usize> = all.iter().take(m).map(|x| x.1).collect();
                assert_eq!(got[q], want);
            }
        }
    }
}
