//! Binary scene checkpoints.
//!
//! Layout, all little-endian: magic `PFGS`, `u32` version, `u64` Gaussian
//! count, `u32` feature width, then every parameter group as `f64` arrays in
//! the order position, raw_rotation, raw_scale, raw_opacity, color, feature.
//! A `u8` flag follows; when it is 1 the optimizer step (`u64`) and both
//! moment tables (same group layout) come next. The file ends with the seed
//! (`u64`) and the configuration hash (`u64`).

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fit::{AdamState, FitConfig};
use crate::primitives::{ParamGroup, ParamTable, Scene};

pub const MAGIC: &[u8; 4] = b"PFGS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: u64,
}

impl Provenance {
    pub fn from_config(config: &FitConfig) -> Self {
        Self {
            seed: config.seed,
            config_hash: config_hash(config),
        }
    }
}

/// First eight bytes of the SHA-256 of the configuration's TOML form.
pub fn config_hash(config: &FitConfig) -> u64 {
    let text = toml::to_string(config).expect("fit config serializes");
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub scene: Scene,
    pub optimizer: Option<AdamState>,
    pub provenance: Provenance,
}

fn put_table(out: &mut Vec<u8>, table: &ParamTable) {
    for group in ParamGroup::ALL {
        for v in table.group(group) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(checkpoint: &Checkpoint) -> Vec<u8> {
    let scene = &checkpoint.scene;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(scene.len() as u64).to_le_bytes());
    out.extend_from_slice(&(scene.feature_dim() as u32).to_le_bytes());
    put_table(&mut out, scene);
    match &checkpoint.optimizer {
        None => out.push(0),
        Some(state) => {
            out.push(1);
            out.extend_from_slice(&state.step.to_le_bytes());
            put_table(&mut out, &state.first_moment);
            put_table(&mut out, &state.second_moment);
        }
    }
    out.extend_from_slice(&checkpoint.provenance.seed.to_le_bytes());
    out.extend_from_slice(&checkpoint.provenance.config_hash.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            message: message.into(),
        }
    }

    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self.offset + N;
        let Some(slice) = self.bytes.get(self.offset..end) else {
            return Err(self.err(format!("truncated checkpoint while reading {what}")));
        };
        self.offset = end;
        Ok(slice.try_into().expect("N bytes"))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.take::<8>(what).map(u64::from_le_bytes)
    }

    fn table(&mut self, count: usize, feature_dim: usize, what: &str) -> Result<ParamTable> {
        let mut groups: [Vec<f64>; 6] = Default::default();
        for (slot, group) in groups.iter_mut().zip(ParamGroup::ALL) {
            let n = group.width(feature_dim) * count;
            if self.bytes.len().saturating_sub(self.offset) / 8 < n {
                return Err(self.err(format!("truncated checkpoint while reading {what} {}", group.name())));
            }
            *slot = (0..n)
                .map(|_| self.take::<8>(group.name()).map(f64::from_le_bytes))
                .collect::<Result<_>>()?;
        }
        ParamTable::from_groups(count, feature_dim, groups)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, offset: 0, path };
    if &r.take::<4>("magic")? != MAGIC {
        r.offset = 0;
        return Err(r.err("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take::<4>("version")?);
    if version != VERSION {
        r.offset -= 4;
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let count = usize::try_from(r.u64("count")?).map_err(|_| r.err("count overflows"))?;
    let feature_dim = u32::from_le_bytes(r.take::<4>("feature width")?) as usize;
    let scene = r.table(count, feature_dim, "parameters")?;
    let optimizer = match r.take::<1>("optimizer flag")?[0] {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let first_moment = r.table(count, feature_dim, "first moment")?;
            let second_moment = r.table(count, feature_dim, "second moment")?;
            Some(AdamState {
                step,
                first_moment,
                second_moment,
            })
        }
        other => {
            r.offset -= 1;
            return Err(r.err(format!("invalid optimizer flag {other}")));
        }
    };
    let provenance = Provenance {
        seed: r.u64("seed")?,
        config_hash: r.u64("config hash")?,
    };
    if r.offset != bytes.len() {
        return Err(r.err("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint {
        scene,
        optimizer,
        provenance,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(checkpoint)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
