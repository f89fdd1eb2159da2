//! Per-invocation run records written next to each command's outputs.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub struct RunManifest {
    subcommand: &'static str,
    started: f64,
    params: Vec<(String, String)>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(subcommand: &'static str) -> Self {
        RunManifest { subcommand, started: unix_now(), params: Vec::new(), inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn param(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.params.push((key.to_string(), value.to_string()));
        self
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "subcommand = {}", self.subcommand);
        let _ = writeln!(s, "tool_version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "started_unix = {:.3}", self.started);
        let _ = writeln!(s, "finished_unix = {:.3}", unix_now());
        for (k, v) in &self.params {
            let _ = writeln!(s, "param.{k} = {v}");
        }
        for p in &self.inputs {
            let _ = writeln!(s, "input = {}", p.display());
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output = {}", p.display());
        }
        s
    }

    /// Write to `path` via a temporary sibling and a rename.
    pub fn commit(&self, path: &Path) -> io::Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        fs::write(&tmp, self.render())?;
        fs::rename(&tmp, path)
    }
}

/// `<file>.manifest.txt` for file outputs, `<dir>/run_manifest.txt` for directories.
pub fn manifest_path(primary: &Path) -> PathBuf {
    if primary.is_dir() {
        primary.join("run_manifest.txt")
    } else {
        let mut p = primary.as_os_str().to_owned();
        p.push(".manifest.txt");
        PathBuf::from(p)
    }
}
