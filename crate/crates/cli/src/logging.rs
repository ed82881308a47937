//! JSON-lines run logs.

use serde::Serialize;
use std::io::Write;
use std::path::Path;

pub struct JsonlLogger {
    file: std::io::BufWriter<std::fs::File>,
}

impl JsonlLogger {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(JsonlLogger {
            file: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn log<T: Serialize>(&mut self, record: &T) -> std::io::Result<()> {
        let line = serde_json::to_string(record).expect("log record serialization");
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        self.file.flush()
    }
}
