//! Plain-text record of the inputs of a run, written before any work starts.

use std::fmt::{Display, Write as _};
use std::fs;
use std::path::Path;

use swinforge::Result;

pub struct Echo {
    command: &'static str,
    fields: Vec<(String, String)>,
}

impl Echo {
    pub fn new(command: &'static str) -> Self {
        Self { command, fields: Vec::new() }
    }

    pub fn field(mut self, key: &str, value: impl Display) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    /// Writes `<dir>/<command>_config.txt` as `key = value` lines.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut s = format!("# swinforge {} {}\n", env!("CARGO_PKG_VERSION"), self.command);
        for (k, v) in &self.fields {
            let _ = writeln!(s, "{k} = {v}");
        }
        fs::write(dir.join(format!("{}_config.txt", self.command)), s)?;
        Ok(())
    }
}
