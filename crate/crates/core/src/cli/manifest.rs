//! JSON run manifests written next to every primary output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::CliError;

#[derive(Serialize)]
struct FileEntry {
    path: String,
    crc32: String,
    bytes: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    tool_version: &'static str,
    seed: Option<u64>,
    config: &'a BTreeMap<String, String>,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
    format_versions: BTreeMap<&'static str, u16>,
    threads: usize,
    wall_seconds: f64,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    extra: serde_json::Value,
}

pub struct Run {
    command: &'static str,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    pub extra: serde_json::Value,
}

fn entry(path: &Path) -> Result<FileEntry, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Run(format!("cannot read {}: {e}", path.display())))?;
    Ok(FileEntry { path: path.display().to_string(), crc32: format!("{:08x}", checksum(&bytes)), bytes: bytes.len() as u64 })
}

/// Binary containers end in a CRC32 of everything before it; that trailer is
/// the file's checksum (a CRC over the whole file would be the same constant
/// for every valid container). Other files get a CRC32 of their full contents.
fn checksum(bytes: &[u8]) -> u32 {
    let framed = bytes.len() >= 10 && [b"NGDS", b"NNIR", b"SNNC"].iter().any(|m| bytes.starts_with(*m));
    match framed {
        true => {
            let (body, tail) = bytes.split_at(bytes.len() - 4);
            let trailer = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
            if crc32fast::hash(body) == trailer {
                trailer
            } else {
                crc32fast::hash(bytes)
            }
        }
        false => crc32fast::hash(bytes),
    }
}

/// `<path>.manifest.json`.
pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

impl Run {
    pub fn start(command: &'static str) -> Self {
        Run { command, started: Instant::now(), inputs: Vec::new(), outputs: Vec::new(), extra: serde_json::Value::Null }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    /// Writes the manifest for the first output.
    pub fn finish(self, config: &BTreeMap<String, String>) -> Result<PathBuf, CliError> {
        let seed = config.get("seed").and_then(|s| s.parse().ok());
        let m = Manifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            inputs: self.inputs.iter().map(|p| entry(p)).collect::<Result<_, _>>()?,
            outputs: self.outputs.iter().map(|p| entry(p)).collect::<Result<_, _>>()?,
            format_versions: BTreeMap::from([
                ("NGDS", neuromed::data::io::VERSION),
                ("NNIR", neuromed::model::io::VERSION),
                ("SNNC", neuromed::snn::network::VERSION),
            ]),
            threads: rayon::current_num_threads(),
            wall_seconds: self.started.elapsed().as_secs_f64(),
            extra: self.extra,
        };
        let primary = self.outputs.first().ok_or_else(|| CliError::Run("run produced no output".into()))?;
        let path = manifest_path(primary);
        let json = serde_json::to_string_pretty(&m).map_err(|e| CliError::Run(e.to_string()))?;
        std::fs::write(&path, json + "\n").map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}
