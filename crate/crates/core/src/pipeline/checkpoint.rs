//! Checkpoint directories: a text manifest plus one little-endian blob.
//!
//! ```text
//! usm-checkpoint 1
//! step <n>
//! fingerprint <hex>
//! tensor <group> <name> <dims comma-separated> <byte offset> <values> <sha256>
//! ...
//! end
//! ```
//!
//! `params.bin` holds the f64 values of every tensor in manifest order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::numerics::{ParamStore, Tensor};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "params.bin";
pub const CONFIG_FILE: &str = "config.txt";

pub const PARAMS: &str = "params";
pub const QUANTIZER: &str = "quantizer";
pub const OPTIMIZER: &str = "optimizer";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub fingerprint: String,
    /// Named tensor groups, e.g. parameters, quantizer and optimizer state.
    pub groups: IndexMap<String, ParamStore>,
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(step: usize, fingerprint: impl Into<String>, params: ParamStore) -> Self {
        let mut groups = IndexMap::new();
        groups.insert(PARAMS.to_string(), params);
        Self {
            step,
            fingerprint: fingerprint.into(),
            groups,
        }
    }

    pub fn with_group(mut self, name: &str, store: ParamStore) -> Self {
        self.groups.insert(name.to_string(), store);
        self
    }

    pub fn params(&self) -> &ParamStore {
        &self.groups[PARAMS]
    }

    pub fn group(&self, name: &str) -> Option<&ParamStore> {
        self.groups.get(name)
    }

    /// Writes into a sibling temporary directory and swaps it in, so an
    /// interrupted save never clobbers the previous checkpoint.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let tmp = tmp_sibling(dir);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(Error::io(format!("clearing {}", tmp.display())))?;
        }
        fs::create_dir_all(&tmp).map_err(Error::io(format!("creating {}", tmp.display())))?;
        let mut manifest = format!("usm-checkpoint 1\nstep {}\nfingerprint {}\n", self.step, self.fingerprint);
        let mut blob = Vec::new();
        for (group, store) in &self.groups {
            for (_, name, t) in store.iter() {
                if name.contains(char::is_whitespace) || group.contains(char::is_whitespace) {
                    return Err(Error::Checkpoint(format!("name {group}/{name} contains whitespace")));
                }
                let start = blob.len();
                for x in t.data() {
                    blob.extend_from_slice(&x.to_le_bytes());
                }
                let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
                writeln!(
                    manifest,
                    "tensor {group} {name} {} {start} {} {}",
                    dims.join(","),
                    t.numel(),
                    sha(&blob[start..])
                )
                .unwrap();
            }
        }
        manifest.push_str("end\n");
        fs::write(tmp.join(BLOB_FILE), &blob).map_err(Error::io("writing checkpoint blob"))?;
        fs::write(tmp.join(MANIFEST_FILE), manifest).map_err(Error::io("writing checkpoint manifest"))?;
        if let Ok(cfg) = fs::read(dir.join(CONFIG_FILE)) {
            fs::write(tmp.join(CONFIG_FILE), cfg).map_err(Error::io("copying config"))?;
        }
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(Error::io(format!("replacing {}", dir.display())))?;
        }
        fs::rename(&tmp, dir).map_err(Error::io(format!("moving checkpoint into {}", dir.display())))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))
            .map_err(Error::io(format!("reading {}", dir.join(MANIFEST_FILE).display())))?;
        let blob = fs::read(dir.join(BLOB_FILE)).map_err(Error::io(format!("reading {}", dir.join(BLOB_FILE).display())))?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", dir.display()));
        let mut lines = manifest.lines();
        if lines.next() != Some("usm-checkpoint 1") {
            return Err(bad("not a checkpoint manifest".into()));
        }
        let mut ck = Checkpoint::default();
        let mut ended = false;
        for line in lines {
            let f: Vec<&str> = line.split(' ').collect();
            match f.as_slice() {
                ["step", n] => ck.step = n.parse().map_err(|_| bad(format!("bad step {n:?}")))?,
                ["fingerprint", h] => ck.fingerprint = h.to_string(),
                ["tensor", group, name, dims, offset, len, digest] => {
                    let shape: Vec<usize> = dims
                        .split(',')
                        .map(|d| d.parse().map_err(|_| bad(format!("bad dims {dims:?}"))))
                        .collect::<Result<_>>()?;
                    let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset {offset:?}")))?;
                    let len: usize = len.parse().map_err(|_| bad(format!("bad length {len:?}")))?;
                    let bytes = blob
                        .get(offset..offset + 8 * len)
                        .ok_or_else(|| bad(format!("{name} extends past the blob")))?;
                    if sha(bytes) != *digest {
                        return Err(bad(format!("checksum mismatch for {group}/{name}")));
                    }
                    let data = bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
                    ck.groups.entry(group.to_string()).or_default().insert(*name, t);
                }
                ["end"] => {
                    ended = true;
                    break;
                }
                _ => return Err(bad(format!("unrecognized manifest line {line:?}"))),
            }
        }
        if !ended {
            return Err(bad("manifest truncated".into()));
        }
        ck.groups.entry(PARAMS.to_string()).or_default();
        Ok(ck)
    }
}

fn tmp_sibling(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

/// Copies every parameter of `src` whose name starts with `prefix` into the
/// same-named slot of `dst`. Shape mismatches and missing names are
/// reported together.
pub fn load_prefix(dst: &mut ParamStore, src: &ParamStore, prefix: &str) -> Result<usize> {
    let mut problems = Vec::new();
    let mut copied = 0;
    for (_, name, t) in src.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
        match dst.id(name) {
            Ok(id) if dst.get(id).shape() == t.shape() => {
                *dst.get_mut(id) = t.clone();
                copied += 1;
            }
            Ok(id) => problems.push(format!("{name}: checkpoint {:?} vs model {:?}", t.shape(), dst.get(id).shape())),
            Err(_) => problems.push(format!("{name}: not in model")),
        }
    }
    let missing: Vec<String> = dst
        .iter()
        .filter(|(_, n, _)| n.starts_with(prefix) && src.by_name(n).is_none())
        .map(|(_, n, _)| format!("{n}: not in checkpoint"))
        .collect();
    problems.extend(missing);
    if problems.is_empty() {
        Ok(copied)
    } else {
        Err(Error::Checkpoint(format!("incompatible arrays: {}", problems.join("; "))))
    }
}
