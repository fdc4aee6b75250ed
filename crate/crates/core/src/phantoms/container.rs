//! Dataset container and manifest sidecar.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "FQDSET\0\0"
//! version   u32
//! count     u64
//! height    u64
//! width     u64
//! channels  u64
//! seed      u64      generator master seed
//! records   count × { seed u64, labels u8[h·w], values f32[channels·h·w] }
//! crc32     u32      over every preceding byte
//! ```
//!
//! The manifest is a `key = value` text file next to the container, named
//! `<container>.manifest`, with keys `format_version`, `sample_count`,
//! `image_size`, `modalities`, `generator_seed`, `offsets` and `crc32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::conditioning::MODALITIES;
use crate::error::{Error, Result};
use crate::image::Image;

use super::PhantomSample;

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FQDSET\0\0";
const HEADER_LEN: usize = 8 + 4 + 5 * 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PhantomSample>,
    pub generator_seed: u64,
}

impl Dataset {
    pub fn new(samples: Vec<PhantomSample>, generator_seed: u64) -> Self {
        Self {
            samples,
            generator_seed,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(height, width, channels)` shared by all samples.
    pub fn geometry(&self) -> Result<(usize, usize, usize)> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::Input("dataset has no samples".into()))?;
        let (h, w) = first.dims();
        let c = first.modalities.len();
        for s in &self.samples {
            if s.modalities.len() != c
                || s.modalities.iter().any(|m| m.dims() != (h, w))
                || s.tissue_map.len() != h * w
            {
                return Err(Error::Dimension(format!(
                    "sample {} does not match {c}×{h}×{w}",
                    s.seed
                )));
            }
        }
        Ok((h, w, c))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub sample_count: usize,
    pub height: usize,
    pub width: usize,
    pub modalities: Vec<String>,
    pub generator_seed: u64,
    /// Byte offset of each record in the container.
    pub offsets: Vec<u64>,
    pub crc32: u32,
}

impl DatasetManifest {
    fn render(&self) -> String {
        let offsets: Vec<String> = self.offsets.iter().map(u64::to_string).collect();
        format!(
            "# freqdiff dataset manifest\n\
             format_version = {}\n\
             sample_count = {}\n\
             image_size = {}x{}\n\
             modalities = {}\n\
             generator_seed = {}\n\
             offsets = {}\n\
             crc32 = {:08x}\n",
            self.format_version,
            self.sample_count,
            self.height,
            self.width,
            self.modalities.join(","),
            self.generator_seed,
            offsets.join(","),
            self.crc32
        )
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        let mut keys = BTreeMap::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key = value, got {line:?}")))?;
            keys.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| keys.get(k).ok_or_else(|| bad(format!("missing key {k}")));
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| bad(format!("bad value for {k}")))
        };
        let (h, w) = get("image_size")?
            .split_once('x')
            .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
            .ok_or_else(|| bad("bad value for image_size".into()))?;
        let offsets = get("offsets")?;
        let offsets = if offsets.is_empty() {
            Vec::new()
        } else {
            offsets
                .split(',')
                .map(|o| {
                    o.trim()
                        .parse()
                        .map_err(|_| bad(format!("bad offset {o:?}")))
                })
                .collect::<Result<Vec<u64>>>()?
        };
        Ok(Self {
            format_version: num("format_version")? as u32,
            sample_count: num("sample_count")? as usize,
            height: h,
            width: w,
            modalities: get("modalities")?
                .split(',')
                .map(|s| s.trim().to_string())
                .collect(),
            generator_seed: num("generator_seed")?,
            offsets,
            crc32: u32::from_str_radix(get("crc32")?, 16)
                .map_err(|_| bad("bad value for crc32".into()))?,
        })
    }
}

pub fn manifest_path(container: &Path) -> PathBuf {
    let mut name = container.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

fn record_len(h: usize, w: usize, c: usize) -> usize {
    8 + h * w + 4 * c * h * w
}

/// Write the container and its manifest sidecar.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<DatasetManifest> {
    let (h, w, c) = dataset.geometry()?;
    if c > MODALITIES.len() {
        return Err(Error::Dimension(format!(
            "{c} modalities, at most {} supported",
            MODALITIES.len()
        )));
    }
    let n = dataset.len();
    let mut buf = Vec::with_capacity(HEADER_LEN + n * record_len(h, w, c) + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [
        n as u64,
        h as u64,
        w as u64,
        c as u64,
        dataset.generator_seed,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut offsets = Vec::with_capacity(n);
    for s in &dataset.samples {
        offsets.push(buf.len() as u64);
        buf.extend_from_slice(&s.seed.to_le_bytes());
        buf.extend_from_slice(&s.tissue_map);
        for m in &s.modalities {
            for &v in m.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        sample_count: n,
        height: h,
        width: w,
        modalities: MODALITIES[..c].iter().map(|s| s.to_string()).collect(),
        generator_seed: dataset.generator_seed,
        offsets,
        crc32: crc,
    };
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest.render()).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(container: &Path) -> Result<DatasetManifest> {
    let mpath = manifest_path(container);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    DatasetManifest::parse(&text, &mpath)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        out
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().expect("8 bytes"))
    }
}

/// Read and validate a container together with its manifest.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::format(path, reason.to_string());
    if bytes.len() < HEADER_LEN + 4 {
        return Err(bad("file shorter than header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let mut cur = Cursor {
        bytes: body,
        pos: 8,
    };
    let version = u32::from_le_bytes(cur.take(4).try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header: Vec<u64> = (0..5).map(|_| cur.u64()).collect();
    let (n, h, w, c, seed) = (header[0], header[1], header[2], header[3], header[4]);
    if h == 0 || w == 0 || c == 0 || c as usize > MODALITIES.len() {
        return Err(bad("malformed header"));
    }
    let rec = (h as u128) * (w as u128) * (1 + 4 * c as u128) + 8;
    let expected = HEADER_LEN as u128 + (n as u128) * rec;
    if (body.len() as u128) < expected {
        return Err(bad("truncated container"));
    }
    if (body.len() as u128) > expected {
        return Err(bad("trailing bytes after records"));
    }
    if crc32fast::hash(body) != stored {
        return Err(bad("CRC mismatch"));
    }
    let (n, h, w, c) = (n as usize, h as usize, w as usize, c as usize);

    let mut offsets = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        offsets.push(cur.pos as u64);
        let sample_seed = cur.u64();
        let tissue_map = cur.take(h * w).to_vec();
        let modalities = (0..c)
            .map(|_| {
                let data = cur
                    .take(4 * h * w)
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect();
                Image::new(h, w, data)
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(PhantomSample {
            modalities,
            tissue_map,
            seed: sample_seed,
        });
    }

    let manifest = read_manifest(path)?;
    let mpath = manifest_path(path);
    let mismatch = |what: &str| Error::format(&mpath, format!("{what} disagrees with container"));
    if manifest.format_version != version {
        return Err(mismatch("format_version"));
    }
    if manifest.sample_count != n {
        return Err(mismatch("sample_count"));
    }
    if (manifest.height, manifest.width) != (h, w) {
        return Err(mismatch("image_size"));
    }
    if manifest.modalities != MODALITIES[..c] {
        return Err(mismatch("modalities"));
    }
    if manifest.generator_seed != seed {
        return Err(mismatch("generator_seed"));
    }
    if manifest.offsets != offsets || !offsets.windows(2).all(|p| p[0] < p[1]) {
        return Err(mismatch("offsets"));
    }
    if manifest.crc32 != stored {
        return Err(mismatch("crc32"));
    }
    Ok(Dataset::new(samples, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantoms::generate_dataset;

    fn write_tmp(ds: &Dataset) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.fqd");
        write_dataset(ds, &path).unwrap();
        (dir, path)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ds = generate_dataset(6, 16, 99).unwrap();
        let (_dir, path) = write_tmp(&ds);
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        let manifest = read_manifest(&path).unwrap();
        assert_eq!(manifest.sample_count, 6);
        assert_eq!(manifest.modalities, MODALITIES);
        assert!(manifest.offsets.windows(2).all(|p| p[0] < p[1]));

        let again = _dir.path().join("again.fqd");
        write_dataset(&back, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn manifest_count_mismatch_rejected() {
        let ds = generate_dataset(3, 8, 1).unwrap();
        let (_dir, path) = write_tmp(&ds);
        let mpath = manifest_path(&path);
        let text = fs::read_to_string(&mpath)
            .unwrap()
            .replace("sample_count = 3", "sample_count = 4");
        fs::write(&mpath, text).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn corruption_rejected() {
        let ds = generate_dataset(2, 8, 5).unwrap();
        let (_dir, path) = write_tmp(&ds);
        let good = fs::read(&path).unwrap();

        let mut flipped = good.clone();
        flipped[HEADER_LEN + 20] ^= 1;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));

        fs::write(&path, &good[..good.len() - 9]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));

        let mut magic = good.clone();
        magic[0] = b'X';
        fs::write(&path, &magic).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));

        fs::write(&path, &good[..10]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));

        fs::write(&path, &good).unwrap();
        fs::remove_file(manifest_path(&path)).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Io { .. })));
    }

    #[test]
    fn empty_dataset_cannot_be_written() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(Vec::new(), 0);
        assert!(write_dataset(&ds, &dir.path().join("x")).is_err());
    }
}
