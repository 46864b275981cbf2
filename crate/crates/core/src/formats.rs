//! Little-endian binary containers for gridded fields.
//!
//! `FPG1` (footprint / flux grid):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `FPG1`                            |
//! | 4      | 4    | version (u32, = 1)                      |
//! | 8      | 4    | n_lat (u32)                             |
//! | 12     | 4    | n_lon (u32)                             |
//! | 16     | 1    | space (0 = linear, 1 = log, 2 = signed) |
//! | 17     | 7    | zero                                    |
//! | 24     | 32   | lat0, lon0, d_lat, d_lon (f64)          |
//! | 56     | 8    | config hash (u64)                       |
//! | 64     | 8    | release id (u64)                        |
//! | 72     | 32   | release lat, lon, altitude, time (f64)  |
//! | 104    | 24   | zero                                    |
//! | 128    | 8·n  | values (f64), row-major, row 0 = south  |
//!
//! `MET1` (meteorology): u32 magic/version/n_lat/n_lon/n_levels/n_times,
//! grid f64 ×4, config hash u64, then level heights, time stamps, u, v,
//! terrain and land mask, all f64.
//!
//! `FTR1` (feature tensor): magic, version u32, side u32, channels u32,
//! channel-order hash u64, release id u64, config hash u64, then
//! side·side·channels f32 values with channels contiguous per cell.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::domain::{Footprint, GridSpec, Release, Space};
use crate::error::{Error, Result};
use crate::features::FeatureTensor;
use crate::synthmet::MetField;

pub const FPG_HEADER_LEN: usize = 128;

pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, x: u8) {
        self.buf.push(x);
    }
    pub fn u32(&mut self, x: u32) {
        self.bytes(&x.to_le_bytes());
    }
    pub fn u64(&mut self, x: u64) {
        self.bytes(&x.to_le_bytes());
    }
    pub fn f64(&mut self, x: f64) {
        self.bytes(&x.to_le_bytes());
    }
    pub fn f32(&mut self, x: f32) {
        self.bytes(&x.to_le_bytes());
    }
    pub fn zeros(&mut self, n: usize) {
        self.buf.resize(self.buf.len() + n, 0);
    }
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8], path: &'a Path) -> Self {
        ByteReader { data, pos: 0, path }
    }
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != expected {
            return Err(Error::format(
                self.path,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(m), String::from_utf8_lossy(expected)),
            ));
        }
        Ok(())
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    pub fn version(&mut self, supported: u32) -> Result<()> {
        let v = self.u32()?;
        if v != supported {
            return Err(Error::format(self.path, format!("unsupported version {v}")));
        }
        Ok(())
    }
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.data.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    BufReader::new(f).read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn put_grid(w: &mut ByteWriter, g: &GridSpec) {
    w.f64(g.lat0);
    w.f64(g.lon0);
    w.f64(g.d_lat);
    w.f64(g.d_lon);
}

fn get_grid(r: &mut ByteReader, n_lat: u32, n_lon: u32, path: &Path) -> Result<GridSpec> {
    let (lat0, lon0, d_lat, d_lon) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    GridSpec::new(n_lat as usize, n_lon as usize, lat0, lon0, d_lat, d_lon)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn encode_fpg(fp: &Footprint, config_hash: u64) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(b"FPG1");
    w.u32(1);
    w.u32(fp.grid.n_lat as u32);
    w.u32(fp.grid.n_lon as u32);
    w.u8(match fp.space {
        Space::Linear => 0,
        Space::Log => 1,
        Space::Signed => 2,
    });
    w.zeros(7);
    put_grid(&mut w, &fp.grid);
    w.u64(config_hash);
    w.u64(fp.release.id);
    w.f64(fp.release.lat);
    w.f64(fp.release.lon);
    w.f64(fp.release.altitude);
    w.f64(fp.release.time);
    w.zeros(24);
    debug_assert_eq!(w.buf.len(), FPG_HEADER_LEN);
    w.buf.reserve(fp.values.len() * 8);
    for &v in &fp.values {
        w.f64(v);
    }
    w.buf
}

/// Returns the footprint and the config hash stamped in its header.
pub fn decode_fpg(bytes: &[u8], path: &Path) -> Result<(Footprint, u64)> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(b"FPG1")?;
    r.version(1)?;
    let (n_lat, n_lon) = (r.u32()?, r.u32()?);
    let space = match r.u8()? {
        0 => Space::Linear,
        1 => Space::Log,
        2 => Space::Signed,
        s => return Err(Error::format(path, format!("unknown space flag {s}"))),
    };
    r.take(7)?;
    let grid = get_grid(&mut r, n_lat, n_lon, path)?;
    let hash = r.u64()?;
    let release = Release {
        id: r.u64()?,
        lat: r.f64()?,
        lon: r.f64()?,
        altitude: r.f64()?,
        time: r.f64()?,
    };
    r.take(24)?;
    let values = r.f64s(grid.len())?;
    r.finish()?;
    let fp = Footprint::new(grid, release, values, space).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((fp, hash))
}

pub fn write_fpg(path: &Path, fp: &Footprint, config_hash: u64) -> Result<()> {
    write_file(path, &encode_fpg(fp, config_hash))
}

pub fn read_fpg(path: &Path) -> Result<Footprint> {
    Ok(decode_fpg(&read_file(path)?, path)?.0)
}

pub fn write_met(path: &Path, met: &MetField, config_hash: u64) -> Result<()> {
    let g = &met.grid;
    let mut w = ByteWriter::new();
    w.bytes(b"MET1");
    w.u32(1);
    w.u32(g.n_lat as u32);
    w.u32(g.n_lon as u32);
    w.u32(met.levels.len() as u32);
    w.u32(met.times.len() as u32);
    put_grid(&mut w, g);
    w.u64(config_hash);
    w.buf.reserve(8 * (met.levels.len() + met.times.len() + 2 * met.u.len() + 2 * g.len()));
    for series in [&met.levels, &met.times, &met.u, &met.v, &met.terrain, &met.land_mask] {
        for &x in series.iter() {
            w.f64(x);
        }
    }
    write_file(path, &w.buf)
}

pub fn read_met(path: &Path) -> Result<MetField> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.magic(b"MET1")?;
    r.version(1)?;
    let (n_lat, n_lon, n_levels, n_times) = (r.u32()?, r.u32()?, r.u32()? as usize, r.u32()? as usize);
    let grid = get_grid(&mut r, n_lat, n_lon, path)?;
    let _hash = r.u64()?;
    let levels = r.f64s(n_levels)?;
    let times = r.f64s(n_times)?;
    let n = n_levels * n_times * grid.len();
    let u = r.f64s(n)?;
    let v = r.f64s(n)?;
    let terrain = r.f64s(grid.len())?;
    let land = r.f64s(grid.len())?;
    r.finish()?;
    MetField::from_parts(grid, levels, times, u, v, terrain, land).map_err(|e| Error::format(path, e.to_string()))
}

pub fn encode_ftr(t: &FeatureTensor, config_hash: u64) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(b"FTR1");
    w.u32(1);
    w.u32(t.side as u32);
    w.u32(t.channels as u32);
    w.u64(t.channel_hash);
    w.u64(t.release_id);
    w.u64(config_hash);
    w.buf.reserve(t.data.len() * 4);
    for &x in &t.data {
        w.f32(x);
    }
    w.buf
}

pub fn decode_ftr(bytes: &[u8], path: &Path) -> Result<FeatureTensor> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(b"FTR1")?;
    r.version(1)?;
    let side = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let channel_hash = r.u64()?;
    let release_id = r.u64()?;
    let _config_hash = r.u64()?;
    let data = r.f32s(side * side * channels)?;
    r.finish()?;
    if let Some(index) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::format(path, format!("non-finite feature at index {index}")));
    }
    Ok(FeatureTensor {
        side,
        channels,
        channel_hash,
        release_id,
        data,
    })
}

pub fn write_ftr(path: &Path, t: &FeatureTensor, config_hash: u64) -> Result<()> {
    write_file(path, &encode_ftr(t, config_hash))
}

pub fn read_ftr(path: &Path) -> Result<FeatureTensor> {
    decode_ftr(&read_file(path)?, path)
}
