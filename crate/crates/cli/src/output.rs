use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::commands::RunConfig;

/// Output directory of one command run.
pub struct Outputs {
    dir: PathBuf,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn csv<R: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = R>) -> Result<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn jsonl<R: Serialize>(&self, name: &str) -> Result<JsonLines<R>> {
        let path = self.path(name);
        let file = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        Ok(JsonLines { out: BufWriter::new(file), _row: std::marker::PhantomData })
    }

    /// `summary.json`: the command, its resolved config and seed, and `result`.
    pub fn summary(&self, command: &str, cfg: &RunConfig, result: &impl Serialize) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a, T> {
            command: &'a str,
            seed: u64,
            config: &'a RunConfig,
            result: &'a T,
        }
        let path = self.path("summary.json");
        let mut out = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut out, &Summary { command, seed: cfg.seed, config: cfg, result })?;
        writeln!(out)?;
        out.flush()?;
        fs::write(self.path("config.toml"), cfg.to_toml()?)?;
        Ok(())
    }
}

pub struct JsonLines<R> {
    out: BufWriter<File>,
    _row: std::marker::PhantomData<R>,
}

impl<R: Serialize> JsonLines<R> {
    pub fn write(&mut self, row: &R) -> dlsched_core::error::Result<()> {
        serde_json::to_writer(&mut self.out, row)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
