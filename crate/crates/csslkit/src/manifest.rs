//! Run manifests: every command writes one to its output directory before
//! doing any work. A manifest carries the command name, the tool version,
//! the output directory, the seed, and the fully resolved configuration, so
//! `csslkit rerun <manifest> --out <dir>` reproduces the run's outputs
//! byte for byte (the fresh manifest itself differs only in its recorded
//! output directory).

use crate::config::KvConfig;
use std::path::{Path, PathBuf};

pub const VERSION: &str = concat!("csslkit ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub out: PathBuf,
    pub seed: u64,
    /// Resolved config, sorted by key; every schema key is present.
    pub config: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, out: &Path, seed: u64, config: Vec<(String, String)>) -> Self {
        RunManifest {
            command: command.to_string(),
            version: VERSION.to_string(),
            out: out.to_path_buf(),
            seed,
            config,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::from("csslrun v1\n");
        s.push_str(&format!("command={}\n", self.command));
        s.push_str(&format!("version={}\n", self.version));
        s.push_str(&format!("out={}\n", self.out.display()));
        s.push_str(&format!("seed={}\n", self.seed));
        for (k, v) in &self.config {
            s.push_str(&format!("config.{k}={v}\n"));
        }
        s
    }

    /// Creates the output directory and writes `manifest.txt` into it.
    pub fn write(&self) -> Result<(), String> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| format!("cannot create output directory {}: {e}", self.out.display()))?;
        let path = self.out.join(MANIFEST_FILE);
        std::fs::write(&path, self.render())
            .map_err(|e| format!("cannot write {}: {e}", path.display()))
    }

    pub fn read(path: &Path) -> Result<RunManifest, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read manifest {}: {e}", path.display()))?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "csslrun v1")) => {}
            other => {
                return Err(format!(
                    "{}: not a run manifest (first line {:?})",
                    path.display(),
                    other.map(|(_, l)| l)
                ))
            }
        }
        let mut command = None;
        let mut version = None;
        let mut out = None;
        let mut seed = None;
        let mut config = Vec::new();
        for (i, line) in lines {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), i + 1))?;
            match key {
                "command" => command = Some(value.to_string()),
                "version" => version = Some(value.to_string()),
                "out" => out = Some(PathBuf::from(value)),
                "seed" => {
                    seed = Some(value.parse::<u64>().map_err(|_| {
                        format!("{}:{}: bad seed '{value}'", path.display(), i + 1)
                    })?)
                }
                k => match k.strip_prefix("config.") {
                    Some(name) => config.push((name.to_string(), value.to_string())),
                    None => {
                        return Err(format!(
                            "{}:{}: unknown manifest line '{line}'",
                            path.display(),
                            i + 1
                        ))
                    }
                },
            }
        }
        let need = |what: &str| format!("{}: missing '{what}' line", path.display());
        Ok(RunManifest {
            command: command.ok_or_else(|| need("command"))?,
            version: version.ok_or_else(|| need("version"))?,
            out: out.ok_or_else(|| need("out"))?,
            seed: seed.ok_or_else(|| need("seed"))?,
            config,
        })
    }

    /// The manifest's resolved config as a raw [`KvConfig`], ready to be
    /// resolved again by the original command's schema.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        for (k, v) in &self.config {
            kv.set(k, v);
        }
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_and_reads_back_exactly() {
        let m = RunManifest::new(
            "train",
            Path::new("runs/exp1"),
            7,
            vec![
                ("data".to_string(), "sets/toy".to_string()),
                ("epochs".to_string(), "20".to_string()),
            ],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        std::fs::write(&path, m.render()).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_kv().get("epochs"), Some("20"));
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.txt");
        std::fs::write(&path, "epoch,task_loss\n1,0.5\n").unwrap();
        assert!(RunManifest::read(&path).is_err());
    }
}
