//! Imbalance subsampling and stratified train/test splitting.

use serde::{Deserialize, Serialize};

use super::dataset::ObservationalDataset;
use crate::error::{Error, Result};
use crate::numkit::RngStream;

/// How many rows of each treatment group to keep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImbalanceSpec {
    /// Fraction of each group to keep, in `(0, 1]`.
    Fractions(Vec<f64>),
    /// Upper bound on the rows kept per group; smaller groups are kept whole.
    Counts(Vec<usize>),
}

impl ImbalanceSpec {
    /// Keeps the first (control) group whole and `fraction` of every other group.
    pub fn treated_fraction(k: usize, fraction: f64) -> Self {
        let mut f = vec![fraction; k];
        if let Some(c) = f.first_mut() {
            *c = 1.0;
        }
        Self::Fractions(f)
    }

    fn targets(&self, sizes: &[usize]) -> Result<Vec<usize>> {
        let k = sizes.len();
        let targets: Vec<usize> = match self {
            Self::Fractions(f) => {
                if f.len() != k {
                    return Err(Error::InvalidArgument(format!("{} keep fractions for {k} groups", f.len())));
                }
                if let Some(bad) = f.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
                    return Err(Error::InvalidArgument(format!("keep fraction {bad} outside (0, 1]")));
                }
                sizes
                    .iter()
                    .zip(f)
                    .map(|(&s, &fr)| ((s as f64) * fr).round() as usize)
                    .collect()
            }
            Self::Counts(c) => {
                if c.len() != k {
                    return Err(Error::InvalidArgument(format!("{} keep counts for {k} groups", c.len())));
                }
                sizes.iter().zip(c).map(|(&s, &n)| s.min(n)).collect()
            }
        };
        if let Some(g) = targets.iter().position(|&n| n == 0) {
            return Err(Error::EmptyGroup(g));
        }
        Ok(targets)
    }
}

/// Subsamples each treatment group independently without replacement.
/// Retained rows keep their original relative order.
pub fn apply_imbalance(
    data: &ObservationalDataset,
    spec: &ImbalanceSpec,
    rng: &mut RngStream,
) -> Result<ObservationalDataset> {
    let groups = data.groups();
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let targets = spec.targets(&sizes)?;
    let mut keep = Vec::with_capacity(targets.iter().sum());
    for (g, &n) in groups.iter().zip(&targets) {
        if n == g.len() {
            keep.extend_from_slice(g);
        } else {
            keep.extend(rng.sample_without_replacement(g.len(), n).into_iter().map(|i| g[i]));
        }
    }
    keep.sort_unstable();
    Ok(data.subset(&keep))
}

/// Row indices of a stratified split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: within every treatment group `round(size * fraction)`
/// rows go to training. Each stratum must contribute at least one row to
/// each side.
pub fn split_indices(data: &ObservationalDataset, train_fraction: f64, rng: &mut RngStream) -> Result<SplitIndices> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (g, rows) in data.groups().into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let n_train = ((rows.len() as f64) * train_fraction).round() as usize;
        if n_train == 0 || n_train == rows.len() {
            return Err(Error::InvalidArgument(format!(
                "treatment group {g} has {} rows, too few to split at {train_fraction}",
                rows.len()
            )));
        }
        let mut order = rows;
        rng.shuffle(&mut order);
        train.extend_from_slice(&order[..n_train]);
        test.extend_from_slice(&order[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

/// Stratified split into `(train, test)` datasets.
pub fn split(
    data: &ObservationalDataset,
    train_fraction: f64,
    rng: &mut RngStream,
) -> Result<(ObservationalDataset, ObservationalDataset)> {
    let idx = split_indices(data, train_fraction, rng)?;
    Ok((data.subset(&idx.train), data.subset(&idx.test)))
}
