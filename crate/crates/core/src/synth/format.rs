use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::generate::{Bag, Dataset, Split};
use crate::error::{Error, Result};

pub const BAG_MAGIC: &[u8; 4] = b"PMBG";
pub const BAG_VERSION: u16 = 1;
/// Tag of the optional witness-flag section.
const LATENT_TAG: &[u8; 4] = b"ORCL";
const NO_WITNESS: u8 = u8::MAX;
pub const MANIFEST: &str = "manifest.txt";

/// Layout (little-endian): magic, version `u16`, `n, H, W, C, label` as
/// `u32`, `bag_id` as `u64`, `n*H*W*C` `f32` values, then optionally
/// `"ORCL"`, a `u32` count and one byte per instance (`0xFF` = background).
pub fn write_bag(bag: &Bag, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(34 + bag.instances.len() * 4 + bag.n + 8);
    buf.extend_from_slice(BAG_MAGIC);
    buf.extend_from_slice(&BAG_VERSION.to_le_bytes());
    for v in [bag.n, bag.size, bag.size, bag.channels, bag.label] {
        let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit the bag header")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&bag.bag_id.to_le_bytes());
    for v in &bag.instances {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(lat) = &bag.latents {
        buf.extend_from_slice(LATENT_TAG);
        buf.extend_from_slice(&(lat.len() as u32).to_le_bytes());
        buf.extend(lat.iter().map(|c| c.unwrap_or(NO_WITNESS)));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("{what}: needed {len} bytes at offset {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn malformed(&self, detail: String) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            detail,
        }
    }
}

pub fn read_bag(path: &Path) -> Result<Bag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    let magic_err = || Error::BadMagic {
        path: path.to_path_buf(),
        expected: "PMBG",
    };
    if r.take(4, "magic").map_err(|_| magic_err())? != BAG_MAGIC {
        return Err(magic_err());
    }
    let version = r.u16("version")?;
    if version != BAG_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: BAG_VERSION,
        });
    }
    let n = r.u32("header")?;
    let h = r.u32("header")?;
    let w = r.u32("header")?;
    let channels = r.u32("header")?;
    let label = r.u32("header")?;
    let bag_id = r.u64("header")?;
    if h != w {
        return Err(r.malformed(format!("non-square instances {h}x{w}")));
    }
    let count = n
        .checked_mul(h * w * channels)
        .filter(|c| c.checked_mul(4).is_some())
        .ok_or_else(|| r.malformed("instance data size overflows".into()))?;
    let raw = r.take(count * 4, "instance data")?;
    let instances: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let latents = if r.pos == bytes.len() {
        None
    } else {
        let tag = r.take(4, "section tag")?;
        if tag != LATENT_TAG {
            return Err(r.malformed(format!("unknown section tag {tag:?}")));
        }
        let len = r.u32("latent count")?;
        if len != n {
            return Err(r.malformed(format!("{len} latent flags for {n} instances")));
        }
        let flags = r.take(len, "latent flags")?;
        Some(flags.iter().map(|&b| (b != NO_WITNESS).then_some(b)).collect())
    };
    if r.pos != bytes.len() {
        return Err(r.malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Bag {
        bag_id,
        label,
        n,
        size: h,
        channels,
        instances,
        latents,
    })
}

/// Writes `dir/bags/*.pmbg` and `dir/manifest.txt`. `dir` is created if
/// missing, but its parent must exist.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    if !dir.exists() {
        fs::create_dir(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bags_dir = dir.join("bags");
    fs::create_dir_all(&bags_dir).map_err(|e| Error::io(&bags_dir, e))?;
    let mut manifest = String::from("# split\tfile\n");
    for split in Split::ALL {
        for bag in dataset.split(split) {
            let name = format!("bags/{}_{:06}.pmbg", split.name(), bag.bag_id);
            write_bag(bag, &dir.join(&name))?;
            manifest.push_str(&format!("{}\t{name}\n", split.name()));
        }
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::DatasetNotFound(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut dataset = Dataset::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |detail: String| Error::Malformed {
            path: path.clone(),
            detail: format!("line {}: {detail}", lineno + 1),
        };
        let (split, file) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected `split<TAB>file`".into()))?;
        let split = Split::parse(split).ok_or_else(|| bad(format!("unknown split `{split}`")))?;
        let file: PathBuf = dir.join(file);
        dataset.split_mut(split).push(read_bag(&file)?);
    }
    Ok(dataset)
}
