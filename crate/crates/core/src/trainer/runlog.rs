use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Column order of the RunLog TSV.
pub const RUNLOG_HEADER: &str = "epoch\tmodule\tnce_loss\tkl\tkl_per_dim\tmi_bound\tconfig_hash";

/// One `(epoch, module)` row. `kl` and `kl_per_dim` are NaN for modules
/// without a Gaussian posterior. For the supervised baseline `nce_loss`
/// holds the cross-entropy and `mi_bound` is NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub epoch: usize,
    pub module: String,
    pub nce_loss: f64,
    pub kl: f64,
    pub kl_per_dim: f64,
    pub mi_bound: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<RunRow>,
}

impl RunLog {
    pub fn push(&mut self, row: RunRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch < last.epoch {
                return Err(Error::InvalidArgument(format!(
                    "epoch {} logged after epoch {}",
                    row.epoch, last.epoch
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn module_rows<'a>(&'a self, module: &'a str) -> impl Iterator<Item = &'a RunRow> + 'a {
        self.rows.iter().filter(move |r| r.module == module)
    }

    pub fn modules(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.module) {
                out.push(r.module.clone());
            }
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(RUNLOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.epoch, r.module, r.nce_loss, r.kl, r.kl_per_dim, r.mi_bound, r.config_hash
            )
            .expect("write to String");
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(RUNLOG_HEADER) {
            return Err(Error::InvalidArgument("runlog header does not match".into()));
        }
        let mut log = RunLog::default();
        for (n, line) in lines.enumerate() {
            let c: Vec<&str> = line.split('\t').collect();
            let bad = || Error::InvalidArgument(format!("runlog row {}: malformed", n + 1));
            if c.len() != 7 {
                return Err(bad());
            }
            let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
            log.push(RunRow {
                epoch: c[0].parse().map_err(|_| bad())?,
                module: c[1].to_string(),
                nce_loss: f(c[2])?,
                kl: f(c[3])?,
                kl_per_dim: f(c[4])?,
                mi_bound: f(c[5])?,
                config_hash: c[6].to_string(),
            })?;
        }
        Ok(log)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlWarning {
    pub module: String,
    pub epoch: usize,
    pub kl_per_dim: f64,
}

/// Consecutive epochs below the threshold before a warning fires.
pub const COLLAPSE_PATIENCE: usize = 5;

/// Warn when a module's mean per-dimension KL stays below `threshold` for
/// five consecutive epochs. One warning per run of low epochs.
pub fn monitor_kl(log: &RunLog, threshold: f64) -> Vec<KlWarning> {
    let mut out = Vec::new();
    for module in log.modules() {
        let mut streak = 0;
        for r in log.module_rows(&module) {
            if r.kl_per_dim.is_nan() {
                continue;
            }
            if r.kl_per_dim < threshold {
                streak += 1;
                if streak == COLLAPSE_PATIENCE {
                    out.push(KlWarning {
                        module: module.clone(),
                        epoch: r.epoch,
                        kl_per_dim: r.kl_per_dim,
                    });
                }
            } else {
                streak = 0;
            }
        }
    }
    out
}
