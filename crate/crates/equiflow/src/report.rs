//! CSV and JSON report emission. Floats in CSV carry 17 significant
//! digits, enough to round-trip f64 exactly.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::ensemble::MetricReport;
use crate::error::Result;

pub fn f17(x: f64) -> String {
    format!("{x:.16e}")
}

pub const METRICS_HEADER: &str =
    "epoch,model,dataset,osp,log10_kl,osp_band_lo,osp_band_hi,kl_band_lo,kl_band_hi,osp_std,kl_std";

pub fn metrics_row(epoch: usize, model: &str, dataset: &str, r: &MetricReport) -> String {
    format!(
        "{epoch},{model},{dataset},{},{},{},{},{},{},{},{}",
        f17(r.osp),
        f17(r.sym_kl_log10),
        f17(r.osp_band_lo),
        f17(r.osp_band_hi),
        f17(r.kl_band_lo),
        f17(r.kl_band_hi),
        f17(r.osp_std),
        f17(r.kl_std),
    )
}

pub struct CsvWriter {
    file: File,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{header}")?;
        Ok(CsvWriter { file })
    }

    pub fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = File::create(path)?;
    serde_json::to_writer_pretty(&mut file, value)
        .map_err(|e| crate::error::Error::Format(format!("json write: {e}")))?;
    writeln!(file)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f17_roundtrips_f64() {
        for &x in &[std::f64::consts::PI, 1.0 / 3.0, 1e-300, -2.5e17] {
            let s = f17(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
        }
    }
}
