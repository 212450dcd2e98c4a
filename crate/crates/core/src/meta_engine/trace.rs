//! Per-iteration training records and their CSV export.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub l_sup: f64,
    pub l_que: f64,
    /// Squared MMD between support and query embeddings.
    pub l_disc: f64,
    pub l_obj: f64,
    /// Source group of each episode in the batch.
    pub source_ids: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean of `f` over the last `window` records (all of them if fewer).
    pub fn tail_mean(&self, window: usize, f: impl Fn(&TraceRecord) -> f64) -> Option<f64> {
        let n = self.records.len();
        if n == 0 || window == 0 {
            return None;
        }
        let tail = &self.records[n.saturating_sub(window)..];
        Some(tail.iter().map(f).sum::<f64>() / tail.len() as f64)
    }

    /// Columns `iteration,l_sup,l_que,l_disc,l_obj,source_id`; batch source
    /// ids are joined with `;`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iteration", "l_sup", "l_que", "l_disc", "l_obj", "source_id"])?;
        for r in &self.records {
            let ids: Vec<String> = r.source_ids.iter().map(|s| s.to_string()).collect();
            w.write_record([
                r.iteration.to_string(),
                r.l_sup.to_string(),
                r.l_que.to_string(),
                r.l_disc.to_string(),
                r.l_obj.to_string(),
                ids.join(";"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
