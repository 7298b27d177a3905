use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const METRICS_HEADER: &str =
    "iteration,seed,avg_travel_time_s,ext_reward,int_reward,mean_queue,elbo_loss,policy_loss,value_loss,entropy,wall_s";

/// One episode's summary. Loss columns are empty when the learner has no
/// such update (classical runs, the baseline's ELBO, evaluation rollouts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub seed: u64,
    pub avg_travel_time_s: f64,
    pub ext_reward: f64,
    pub int_reward: f64,
    pub mean_queue: f64,
    pub elbo_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub wall_s: f64,
}

impl MetricsRecord {
    /// The record without its wall-clock column, for determinism checks.
    pub fn without_wall(&self) -> MetricsRecord {
        MetricsRecord {
            wall_s: 0.0,
            ..self.clone()
        }
    }
}

/// Append-only CSV sink.
pub struct MetricsWriter<W: std::io::Write> {
    inner: csv::Writer<W>,
}

impl MetricsWriter<std::fs::File> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(file))
    }
}

impl<W: std::io::Write> MetricsWriter<W> {
    pub fn new(writer: W) -> Self {
        MetricsWriter {
            inner: csv::Writer::from_writer(writer),
        }
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        self.inner
            .serialize(record)
            .map_err(|e| Error::io(Path::new("metrics"), std::io::Error::other(e.to_string())))?;
        self.inner
            .flush()
            .map_err(|e| Error::io(Path::new("metrics"), e))
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::io(Path::new("metrics"), e.into_error()))
    }
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        field: path.display().to_string(),
        message: e.to_string(),
    })?;
    reader
        .deserialize()
        .map(|r| {
            r.map_err(|e: csv::Error| Error::Parse {
                field: path.display().to_string(),
                message: e.to_string(),
            })
        })
        .collect()
}
