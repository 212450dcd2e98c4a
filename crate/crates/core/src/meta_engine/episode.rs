//! Meta-task sampling: support rows from one source group, query rows from
//! the target group.

use crate::datagen::ObservationalDataset;
use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

/// One meta-task.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch {
    pub support_x: Matrix,
    pub support_y: Vec<f64>,
    pub query_x: Matrix,
    pub query_y: Vec<f64>,
    /// Treatment group the support set came from.
    pub source_id: usize,
}

/// `k` row indices from `rows`: without replacement when the group is large
/// enough, with replacement otherwise.
pub fn draw_rows(rows: &[usize], k: usize, rng: &mut RngStream) -> Vec<usize> {
    if rows.len() >= k {
        rng.sample_without_replacement(rows.len(), k)
            .into_iter()
            .map(|i| rows[i])
            .collect()
    } else {
        (0..k).map(|_| rows[rng.index(rows.len())]).collect()
    }
}

/// Episode sampler with the treatment groups indexed once.
#[derive(Clone, Debug)]
pub struct TaskSampler<'a> {
    data: &'a ObservationalDataset,
    groups: Vec<Vec<usize>>,
    target: usize,
    sources: Vec<usize>,
}

impl<'a> TaskSampler<'a> {
    pub fn new(data: &'a ObservationalDataset, target: usize) -> Result<Self> {
        if data.k < 2 {
            return Err(Error::InvalidArgument("episodes need at least two treatment groups".into()));
        }
        if target >= data.k {
            return Err(Error::InvalidArgument(format!("target {target} out of range for k={}", data.k)));
        }
        let groups = data.groups();
        if groups[target].is_empty() {
            return Err(Error::EmptyGroup(target));
        }
        let sources = (0..data.k).filter(|&g| g != target).collect();
        Ok(Self {
            data,
            groups,
            target,
            sources,
        })
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn sample(&self, k: usize, rng: &mut RngStream) -> Result<EpisodeBatch> {
        if k == 0 {
            return Err(Error::InvalidArgument("episode size k must be positive".into()));
        }
        let source = self.sources[rng.index(self.sources.len())];
        if self.groups[source].is_empty() {
            return Err(Error::EmptyGroup(source));
        }
        let sup = draw_rows(&self.groups[source], k, rng);
        let que = draw_rows(&self.groups[self.target], k, rng);
        Ok(EpisodeBatch {
            support_x: self.data.x.select_rows(&sup),
            support_y: sup.iter().map(|&i| self.data.y[i]).collect(),
            query_x: self.data.x.select_rows(&que),
            query_y: que.iter().map(|&i| self.data.y[i]).collect(),
            source_id: source,
        })
    }
}

/// Samples a single episode; see [`TaskSampler`] for repeated draws.
pub fn sample_episode(
    data: &ObservationalDataset,
    target: usize,
    k: usize,
    rng: &mut RngStream,
) -> Result<EpisodeBatch> {
    TaskSampler::new(data, target)?.sample(k, rng)
}
