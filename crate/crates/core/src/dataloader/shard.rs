//! On-disk shard format and manifest.
//!
//! A shard is a run of records, each `id: u64 | len: u64 | len x f32`, all
//! little-endian. The manifest is a text index followed by a binary footer of
//! CRC32 checksums, one per shard.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::datagen::TimeSeriesSample;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.sfm";
pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_SHARD_BYTES: usize = 4 << 20;
pub const MIN_SHARD_BYTES: usize = 1 << 20;
pub const RECORD_HEADER_BYTES: usize = 16;

const FOOTER_MARKER: &str = "#footer\n";
const FOOTER_MAGIC: &[u8; 4] = b"SFMC";

/// Bytes used by one record of `points` values.
pub fn record_bytes(points: usize) -> usize {
    RECORD_HEADER_BYTES + 4 * points
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardEntry {
    pub file: String,
    pub bytes: u64,
    pub series: u64,
    pub points: u64,
    pub checksum: u32,
}

/// A series that did not fit one shard and was stored as `segments` records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSeries {
    pub id: u64,
    pub segments: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardManifest {
    pub version: u32,
    pub seed: u64,
    pub shard_bytes: u64,
    pub shards: Vec<ShardEntry>,
    pub splits: Vec<SplitSeries>,
}

impl ShardManifest {
    pub fn total_points(&self) -> u64 {
        self.shards.iter().map(|s| s.points).sum()
    }

    pub fn total_series(&self) -> u64 {
        self.shards.iter().map(|s| s.series).sum()
    }

    fn encode(&self) -> Vec<u8> {
        let mut text = format!(
            "sfmanifest {}\nseed {}\nshard_bytes {}\n",
            self.version, self.seed, self.shard_bytes
        );
        for s in &self.shards {
            text += &format!("shard {} {} {} {}\n", s.file, s.bytes, s.series, s.points);
        }
        for s in &self.splits {
            text += &format!("split {} {}\n", s.id, s.segments);
        }
        text += FOOTER_MARKER;
        let mut out = text.into_bytes();
        out.extend_from_slice(&(self.shards.len() as u32).to_le_bytes());
        for s in &self.shards {
            out.extend_from_slice(&s.checksum.to_le_bytes());
        }
        out.extend_from_slice(FOOTER_MAGIC);
        out
    }

    fn decode(bytes: &[u8], path: &str) -> Result<Self> {
        let bad = |reason: String| Error::Shard {
            path: path.to_string(),
            reason,
        };
        let marker = FOOTER_MARKER.as_bytes();
        let split_at = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| bad("missing footer marker".into()))?;
        let text = std::str::from_utf8(&bytes[..split_at]).map_err(|_| bad("index is not UTF-8".into()))?;
        let footer = &bytes[split_at + marker.len()..];

        let mut m = ShardManifest {
            version: 0,
            seed: 0,
            shard_bytes: 0,
            shards: Vec::new(),
            splits: Vec::new(),
        };
        for (no, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<u64> {
                fields
                    .get(i)
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| bad(format!("line {}: malformed `{line}`", no + 1)))
            };
            match fields.first().copied() {
                Some("sfmanifest") => m.version = num(1)? as u32,
                Some("seed") => m.seed = num(1)?,
                Some("shard_bytes") => m.shard_bytes = num(1)?,
                Some("shard") if fields.len() == 5 => m.shards.push(ShardEntry {
                    file: fields[1].to_string(),
                    bytes: num(2)?,
                    series: num(3)?,
                    points: num(4)?,
                    checksum: 0,
                }),
                Some("split") => m.splits.push(SplitSeries {
                    id: num(1)?,
                    segments: num(2)?,
                }),
                None => {}
                _ => return Err(bad(format!("line {}: unrecognized `{line}`", no + 1))),
            }
        }
        if m.version != MANIFEST_VERSION {
            return Err(bad(format!("unsupported manifest version {}", m.version)));
        }
        let n = m.shards.len();
        if footer.len() != 4 + 4 * n + 4 || &footer[footer.len() - 4..] != FOOTER_MAGIC {
            return Err(bad("truncated or corrupt checksum footer".into()));
        }
        let count = u32::from_le_bytes(footer[..4].try_into().unwrap()) as usize;
        if count != n {
            return Err(bad(format!("footer lists {count} checksums for {n} shards")));
        }
        for (i, s) in m.shards.iter_mut().enumerate() {
            let at = 4 + 4 * i;
            s.checksum = u32::from_le_bytes(footer[at..at + 4].try_into().unwrap());
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path)?;
        Self::decode(&bytes, &path.display().to_string())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), self.encode())?;
        Ok(())
    }
}

/// One decoded record.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardSeries {
    pub id: u64,
    pub values: Vec<f32>,
}

/// A shard's contents after checksum verification.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardData {
    pub index: usize,
    pub series: Vec<ShardSeries>,
    pub bytes: usize,
}

impl ShardData {
    /// Windows of `len` points available in this shard.
    pub fn eligible_windows(&self, len: usize) -> u64 {
        self.series
            .iter()
            .map(|s| (s.values.len() + 1).saturating_sub(len) as u64)
            .sum()
    }
}

fn encode_record(out: &mut Vec<u8>, id: u64, values: &[f64]) {
    out.extend_from_slice(&id.to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn decode_records(bytes: &[u8], path: &str) -> Result<Vec<ShardSeries>> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        if bytes.len() - at < RECORD_HEADER_BYTES {
            return Err(Error::Shard {
                path: path.into(),
                reason: format!("truncated record header at byte {at}"),
            });
        }
        let id = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let len = u64::from_le_bytes(bytes[at + 8..at + 16].try_into().unwrap()) as usize;
        at += RECORD_HEADER_BYTES;
        let end = len
            .checked_mul(4)
            .and_then(|b| b.checked_add(at))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Shard {
                path: path.into(),
                reason: format!("record {id} overruns the file"),
            })?;
        let values = bytes[at..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(ShardSeries { id, values });
        at = end;
    }
    Ok(out)
}

/// Reads and verifies shard `index` of `manifest`.
pub fn read_shard(dir: &Path, manifest: &ShardManifest, index: usize) -> Result<ShardData> {
    let entry = manifest.shards.get(index).ok_or_else(|| {
        Error::Sampler(format!("shard index {index} out of range ({} shards)", manifest.shards.len()))
    })?;
    let path = dir.join(&entry.file);
    let shown = path.display().to_string();
    let bytes = fs::read(&path)?;
    if bytes.len() as u64 != entry.bytes {
        return Err(Error::Shard {
            path: shown,
            reason: format!("size {} does not match manifest {}", bytes.len(), entry.bytes),
        });
    }
    let crc = crc32fast::hash(&bytes);
    if crc != entry.checksum {
        return Err(Error::Shard {
            path: shown,
            reason: format!("checksum mismatch: file {crc:08x}, manifest {:08x}", entry.checksum),
        });
    }
    let series = decode_records(&bytes, &shown)?;
    Ok(ShardData {
        index,
        series,
        bytes: bytes.len(),
    })
}

/// Every record of every shard, in storage order.
pub fn read_all(dir: &Path) -> Result<Vec<ShardSeries>> {
    let manifest = ShardManifest::load(dir)?;
    let mut out = Vec::new();
    for i in 0..manifest.shards.len() {
        out.extend(read_shard(dir, &manifest, i)?.series);
    }
    Ok(out)
}

struct ShardWriter {
    dir: PathBuf,
    shard_bytes: usize,
    buf: Vec<u8>,
    series: u64,
    points: u64,
    entries: Vec<ShardEntry>,
    written: Vec<PathBuf>,
}

impl ShardWriter {
    fn push(&mut self, id: u64, values: &[f64]) -> Result<()> {
        let rec = record_bytes(values.len());
        if !self.buf.is_empty() && self.buf.len() + rec > self.shard_bytes {
            self.flush()?;
        }
        encode_record(&mut self.buf, id, values);
        self.series += 1;
        self.points += values.len() as u64;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if self.buf.is_empty() {
            return Ok(());
        }
        let file = format!("shard-{:05}.bin", self.entries.len());
        let path = self.dir.join(&file);
        self.written.push(path.clone());
        let mut w = BufWriter::new(fs::File::create(&path)?);
        w.write_all(&self.buf)?;
        w.flush()?;
        self.entries.push(ShardEntry {
            file,
            bytes: self.buf.len() as u64,
            series: self.series,
            points: self.points,
            checksum: crc32fast::hash(&self.buf),
        });
        self.buf.clear();
        self.series = 0;
        self.points = 0;
        Ok(())
    }
}

/// Packs series greedily into shards of at most `shard_bytes` and writes the
/// manifest. Series ids are their positions in `series`. A series too large
/// for one shard is stored as consecutive segments sharing its id. On any
/// failure, files written so far are removed.
pub fn build_shards<I>(series: I, shard_bytes: usize, out_dir: &Path, seed: u64) -> Result<ShardManifest>
where
    I: IntoIterator<Item = TimeSeriesSample>,
{
    if shard_bytes < MIN_SHARD_BYTES {
        return Err(Error::input(format!(
            "shard_bytes {shard_bytes} is below the minimum of {MIN_SHARD_BYTES}"
        )));
    }
    fs::create_dir_all(out_dir)?;
    let mut w = ShardWriter {
        dir: out_dir.to_path_buf(),
        shard_bytes,
        buf: Vec::with_capacity(shard_bytes),
        series: 0,
        points: 0,
        entries: Vec::new(),
        written: Vec::new(),
    };
    let result = write_all(&mut w, series, seed);
    if result.is_err() {
        for p in &w.written {
            let _ = fs::remove_file(p);
        }
        let _ = fs::remove_file(out_dir.join(MANIFEST_FILE));
    }
    result
}

fn write_all<I>(w: &mut ShardWriter, series: I, seed: u64) -> Result<ShardManifest>
where
    I: IntoIterator<Item = TimeSeriesSample>,
{
    let max_points = (w.shard_bytes - RECORD_HEADER_BYTES) / 4;
    let mut splits = Vec::new();
    let mut count = 0u64;
    for (id, s) in series.into_iter().enumerate() {
        let id = id as u64;
        count += 1;
        if s.values.is_empty() {
            return Err(Error::input(format!("series {id} is empty")));
        }
        if let Some(bad) = s.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("series {id} has a non-finite value at {bad}")));
        }
        if s.values.len() > max_points {
            let segments = s.values.chunks(max_points);
            splits.push(SplitSeries {
                id,
                segments: segments.len() as u64,
            });
            for seg in segments {
                w.push(id, seg)?;
            }
        } else {
            w.push(id, &s.values)?;
        }
    }
    if count == 0 {
        return Err(Error::input("no series to shard"));
    }
    w.flush()?;
    let manifest = ShardManifest {
        version: MANIFEST_VERSION,
        seed,
        shard_bytes: w.shard_bytes as u64,
        shards: w.entries.clone(),
        splits,
    };
    manifest.save(&w.dir)?;
    Ok(manifest)
}

/// Reads one series from a CSV file with a `value` column.
pub fn import_csv(path: &Path) -> Result<TimeSeriesSample> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::input(format!("{}: empty CSV", path.display())))?;
    let col = header
        .split(',')
        .position(|h| h.trim() == "value")
        .ok_or_else(|| Error::input(format!("{}: no `value` column", path.display())))?;
    let mut values = Vec::new();
    for (no, line) in lines.enumerate() {
        let v: f64 = line
            .split(',')
            .nth(col)
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| Error::input(format!("{}: bad value on data line {}", path.display(), no + 1)))?;
        values.push(v);
    }
    if values.is_empty() {
        return Err(Error::input(format!("{}: no values", path.display())));
    }
    Ok(TimeSeriesSample::new(values))
}

/// Writes `values` as a single-column CSV.
pub fn write_csv(out: &mut impl Write, values: &[f64]) -> Result<()> {
    writeln!(out, "value")?;
    for v in values {
        writeln!(out, "{v}")?;
    }
    Ok(())
}
