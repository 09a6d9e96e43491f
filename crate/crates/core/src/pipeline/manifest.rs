//! Tab-separated audio manifests: `path, duration seconds, transcript or -,
//! language tag`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub duration: f64,
    pub transcript: Option<String>,
    pub language: String,
}

pub fn parse_manifest(text: &str, base: Option<&Path>) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Input(format!("manifest line {}: expected 4 tab-separated fields", n + 1)));
            }
            let duration = f[1]
                .parse::<f64>()
                .map_err(|e| Error::Input(format!("manifest line {}: duration {:?}: {e}", n + 1, f[1])))?;
            let path = PathBuf::from(f[0]);
            Ok(ManifestEntry {
                path: match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path,
                },
                duration,
                transcript: (f[2] != "-").then(|| f[2].to_string()),
                language: f[3].to_string(),
            })
        })
        .collect()
}

/// Reads a manifest; relative audio paths resolve against its directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(Error::io(format!("manifest {}", path.display())))?;
    parse_manifest(&text, path.parent())
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        writeln!(
            s,
            "{}\t{:.6}\t{}\t{}",
            e.path.display(),
            e.duration,
            e.transcript.as_deref().unwrap_or("-"),
            e.language
        )
        .unwrap();
    }
    s
}
