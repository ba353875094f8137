use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{NbmixError, Result};

/// Genes × samples read counts with a condition label per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountMatrix {
    counts: Array2<u64>,
    gene_ids: Vec<String>,
    sample_names: Vec<String>,
    /// 0-based condition index per sample.
    condition_of_sample: Vec<usize>,
    condition_labels: Vec<String>,
    #[serde(skip)]
    samples_by_condition: Vec<Vec<usize>>,
}

impl CountMatrix {
    /// Builds a matrix where `condition_of_sample[s]` indexes `condition_labels`.
    pub fn new(
        counts: Array2<u64>,
        gene_ids: Vec<String>,
        sample_names: Vec<String>,
        condition_of_sample: Vec<usize>,
        condition_labels: Vec<String>,
    ) -> Result<Self> {
        let (p, n) = counts.dim();
        if gene_ids.len() != p {
            return Err(NbmixError::Shape(format!("{} gene ids for {p} rows", gene_ids.len())));
        }
        if sample_names.len() != n || condition_of_sample.len() != n {
            return Err(NbmixError::Shape(format!(
                "{n} columns but {} sample names and {} condition labels",
                sample_names.len(),
                condition_of_sample.len()
            )));
        }
        let d = condition_labels.len();
        let mut samples_by_condition = vec![Vec::new(); d];
        for (s, &j) in condition_of_sample.iter().enumerate() {
            if j >= d {
                return Err(NbmixError::Shape(format!(
                    "sample {s} has condition index {j} but only {d} conditions"
                )));
            }
            samples_by_condition[j].push(s);
        }
        if let Some(j) = samples_by_condition.iter().position(Vec::is_empty) {
            return Err(NbmixError::InvalidConfig(format!(
                "condition '{}' has no samples",
                condition_labels[j]
            )));
        }
        Ok(Self {
            counts,
            gene_ids,
            sample_names,
            condition_of_sample,
            condition_labels,
            samples_by_condition,
        })
    }

    /// Convenience constructor with generated gene/sample names; `n_per_condition[j]`
    /// consecutive columns belong to condition `j`.
    pub fn from_blocks(counts: Array2<u64>, n_per_condition: &[usize]) -> Result<Self> {
        let (p, n) = counts.dim();
        let total: usize = n_per_condition.iter().sum();
        if total != n {
            return Err(NbmixError::Shape(format!(
                "condition sizes sum to {total}, matrix has {n} columns"
            )));
        }
        let condition_of_sample: Vec<usize> = n_per_condition
            .iter()
            .enumerate()
            .flat_map(|(j, &nj)| std::iter::repeat_n(j, nj))
            .collect();
        let sample_names = condition_of_sample
            .iter()
            .enumerate()
            .map(|(s, j)| format!("c{}_s{}", j + 1, s + 1))
            .collect();
        let gene_ids = (0..p).map(|i| format!("gene{}", i + 1)).collect();
        let labels = (0..n_per_condition.len()).map(|j| format!("cond{}", j + 1)).collect();
        Self::new(counts, gene_ids, sample_names, condition_of_sample, labels)
    }

    pub fn n_genes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.counts.ncols()
    }

    pub fn n_conditions(&self) -> usize {
        self.condition_labels.len()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn gene_row(&self, i: usize) -> ArrayView1<'_, u64> {
        self.counts.row(i)
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn sample_names(&self) -> &[String] {
        &self.sample_names
    }

    pub fn condition_labels(&self) -> &[String] {
        &self.condition_labels
    }

    pub fn condition_of_sample(&self) -> &[usize] {
        &self.condition_of_sample
    }

    /// Sample column indices belonging to condition `j`.
    pub fn samples_in(&self, j: usize) -> &[usize] {
        &self.samples_by_condition[j]
    }

    pub fn n_per_condition(&self) -> Vec<usize> {
        self.samples_by_condition.iter().map(Vec::len).collect()
    }

    /// Total count y_{ij+} of gene `i` in condition `j`.
    pub fn condition_total(&self, i: usize, j: usize) -> u64 {
        let row = self.counts.row(i);
        self.samples_by_condition[j].iter().map(|&s| row[s]).sum()
    }

    /// Counts of gene `i` in condition `j`.
    pub fn condition_counts(&self, i: usize, j: usize) -> Vec<u64> {
        let row = self.counts.row(i);
        self.samples_by_condition[j].iter().map(|&s| row[s]).collect()
    }

    pub fn gene_mean(&self, i: usize) -> f64 {
        self.counts.row(i).iter().map(|&c| c as f64).sum::<f64>() / self.n_samples() as f64
    }

    /// New matrix keeping rows `keep` in the given order.
    pub fn select_genes(&self, keep: &[usize]) -> Self {
        let counts = self.counts.select(Axis(0), keep);
        let gene_ids = keep.iter().map(|&i| self.gene_ids[i].clone()).collect();
        Self {
            counts,
            gene_ids,
            sample_names: self.sample_names.clone(),
            condition_of_sample: self.condition_of_sample.clone(),
            condition_labels: self.condition_labels.clone(),
            samples_by_condition: self.samples_by_condition.clone(),
        }
    }

    /// Adds `c` to every cell.
    pub fn with_pseudocount(&self, c: u64) -> Self {
        let mut out = self.clone();
        out.counts.mapv_inplace(|v| v + c);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn blocks_layout() {
        let m = CountMatrix::from_blocks(array![[1, 2, 3, 4, 5], [0, 0, 0, 9, 1]], &[3, 2]).unwrap();
        assert_eq!(m.n_genes(), 2);
        assert_eq!(m.n_per_condition(), vec![3, 2]);
        assert_eq!(m.condition_total(0, 0), 6);
        assert_eq!(m.condition_total(1, 1), 10);
        assert_eq!(m.condition_counts(1, 1), vec![9, 1]);
    }

    #[test]
    fn empty_condition_rejected() {
        let err = CountMatrix::new(
            array![[1, 2]],
            vec!["g".into()],
            vec!["a".into(), "b".into()],
            vec![0, 0],
            vec!["x".into(), "y".into()],
        )
        .unwrap_err();
        assert!(matches!(err, NbmixError::InvalidConfig(_)));
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(CountMatrix::from_blocks(array![[1, 2, 3]], &[1, 1]).is_err());
    }

    #[test]
    fn select_and_pseudocount() {
        let m = CountMatrix::from_blocks(array![[1, 2], [3, 4], [5, 6]], &[1, 1]).unwrap();
        let s = m.select_genes(&[2, 0]);
        assert_eq!(s.gene_ids(), &["gene3".to_string(), "gene1".to_string()]);
        assert_eq!(s.counts(), &array![[5, 6], [1, 2]]);
        assert_eq!(m.with_pseudocount(1).counts()[[0, 0]], 2);
    }
}
