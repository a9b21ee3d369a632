use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::loss::LossBreakdown;
use super::reweight::ReweightState;
use crate::error::Result;

pub const LOSS_LOG_HEADER: &str = "step,language,data_type,mean_ce,ema_ce,gamma_l";

/// Append-only per-(language, data type) loss log.
pub struct LossLog {
    out: BufWriter<File>,
}

impl LossLog {
    /// Opens `path` for appending, writing the header if the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{LOSS_LOG_HEADER}")?;
        }
        Ok(Self { out })
    }

    /// One line per key present in `breakdown`, with the state after update.
    pub fn record(&mut self, step: u64, breakdown: &LossBreakdown, state: &ReweightState) -> Result<()> {
        for (key, mean) in breakdown.mean_ce_by_key() {
            let (ema, gamma) = state
                .entries
                .get(key)
                .map_or((f64::NAN, 0.0), |e| (e.ema_ce, e.gamma_l));
            writeln!(
                self.out,
                "{step},{},{},{mean},{ema},{gamma}",
                key.language,
                key.data_type.name()
            )?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
