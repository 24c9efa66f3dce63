//! Per-step loss records and their CSV form.
//!
//! Columns: `step,stage,total,primary,aux,aux_weight,lr,loss_<domain>...`;
//! a domain absent from a step's batch leaves its cell empty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub stage: String,
    pub total: f64,
    pub primary: f64,
    pub aux: f64,
    pub aux_weight: f64,
    pub lr: f64,
    pub domain_losses: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub domains: Vec<String>,
    pub rows: Vec<TraceRow>,
}

const FIXED: [&str; 7] = ["step", "stage", "total", "primary", "aux", "aux_weight", "lr"];

impl LossTrace {
    pub fn new(domains: Vec<String>) -> Self {
        Self { domains, rows: Vec::new() }
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Mean of the last `n` per-domain losses recorded for `domain`.
    pub fn recent_domain_loss(&self, domain: usize, n: usize) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().rev().filter_map(|r| r.domain_losses[domain]).take(n).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    fn header(&self) -> Vec<String> {
        FIXED.iter().map(|s| s.to_string()).chain(self.domains.iter().map(|d| format!("loss_{d}"))).collect()
    }

    fn write_rows<'a>(&self, rows: impl Iterator<Item = &'a TraceRow>) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header())?;
        for r in rows {
            let mut rec = vec![
                r.step.to_string(),
                r.stage.clone(),
                r.total.to_string(),
                r.primary.to_string(),
                r.aux.to_string(),
                r.aux_weight.to_string(),
                r.lr.to_string(),
            ];
            rec.extend(r.domain_losses.iter().map(|l| l.map_or_else(String::new, |v| v.to_string())));
            w.write_record(rec)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_csv(&self) -> Result<String> {
        self.write_rows(self.rows.iter())
    }

    /// The last `n` rows as CSV, for diagnostics.
    pub fn tail_csv(&self, n: usize) -> Result<String> {
        self.write_rows(self.rows.iter().skip(self.rows.len().saturating_sub(n)))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        if header.len() < FIXED.len() || header[..FIXED.len()] != FIXED {
            return Err(Error::Config(format!("loss trace header {header:?} lacks the fixed columns")));
        }
        let domains = header[FIXED.len()..]
            .iter()
            .map(|h| h.strip_prefix("loss_").map(String::from))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Config("loss trace domain columns must start with loss_".into()))?;
        let num = |s: &str, col: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Config(format!("loss trace: bad {col} value {s:?}")))
        };
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Config("loss trace: ragged row".into()));
            }
            rows.push(TraceRow {
                step: rec[0].parse().map_err(|_| Error::Config(format!("loss trace: bad step {:?}", &rec[0])))?,
                stage: rec[1].to_string(),
                total: num(&rec[2], "total")?,
                primary: num(&rec[3], "primary")?,
                aux: num(&rec[4], "aux")?,
                aux_weight: num(&rec[5], "aux_weight")?,
                lr: num(&rec[6], "lr")?,
                domain_losses: (FIXED.len()..rec.len())
                    .map(|i| if rec[i].is_empty() { Ok(None) } else { num(&rec[i], &header[i]).map(Some) })
                    .collect::<Result<_>>()?,
            });
        }
        Ok(Self { domains, rows })
    }
}
