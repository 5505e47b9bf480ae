use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub lr: f64,
    /// Seconds; kept out of the CSV so that file is byte-reproducible.
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    epoch: usize,
    split: &'a str,
    loss: f64,
    accuracy: f64,
    lr: f64,
    per_class: String,
}

impl RunLog {
    /// CSV with columns `epoch,split,loss,accuracy,lr,per_class`; per-class
    /// accuracies are `;`-separated.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            let per_class = r.per_class.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
            w.serialize(CsvRow {
                epoch: r.epoch,
                split: &r.split,
                loss: r.loss,
                accuracy: r.accuracy,
                lr: r.lr,
                per_class,
            })
            .map_err(|e| Error::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn last(&self, split: &str) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }
}
