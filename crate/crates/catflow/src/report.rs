//! CSV output helpers. Every file opens with a comment line echoing the
//! config hash so plots can be traced back to the run that produced them.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::CliError;

pub struct CsvFile {
    out: BufWriter<File>,
}

impl CsvFile {
    pub fn create(path: &Path, config_hash: u64, columns: &[&str]) -> Result<Self, CliError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "# config={config_hash:016x}")?;
        writeln!(out, "{}", columns.join(","))?;
        Ok(CsvFile { out })
    }

    pub fn row(&mut self, values: &[String]) -> Result<(), CliError> {
        writeln!(self.out, "{}", values.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.out.flush()?;
        Ok(())
    }
}

/// Fixed-precision float formatting shared by all reports.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.9}")
    } else {
        format!("{x}")
    }
}
