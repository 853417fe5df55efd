//! On-disk formats for run artifacts.
//!
//! Text outputs use Rust's shortest round-trip float formatting, so files are
//! lossless and byte-stable for identical inputs. Velocity snapshots use a
//! small binary format (magic, version, count, little-endian f64 triples)
//! because 1e5-particle states are too large for text.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fourier::CharGrid;
use crate::particles::MomentRow;
use crate::shear::FrameState;

const SNAPSHOT_MAGIC: &[u8; 4] = b"KENS";
const SNAPSHOT_VERSION: u32 = 1;

/// Write second moments (and any tracked |v|^p moments) as CSV with header
/// `t,m11,m22,m33,m12,m13,m23` plus one `p{order}` column per tracked order.
pub fn write_moment_csv(path: &Path, rows: &[MomentRow], p_orders: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "t,m11,m22,m33,m12,m13,m23")?;
    for order in p_orders {
        write!(w, ",p{order}")?;
    }
    writeln!(w)?;
    for row in rows {
        if row.p_moments.len() != p_orders.len() {
            return Err(Error::InvalidParam(format!(
                "row at t = {} tracks {} p-moments but {} orders were declared",
                row.t,
                row.p_moments.len(),
                p_orders.len()
            )));
        }
        let m = &row.m;
        write!(w, "{},{},{},{},{},{},{}", row.t, m.m11, m.m22, m.m33, m.m12, m.m13, m.m23)?;
        for v in &row.p_moments {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Write a characteristic function on its grid as CSV `kx,ky,kz,re,im`.
pub fn write_cf_csv(path: &Path, cf: &CharGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "kx,ky,kz,re,im")?;
    let grid = cf.grid();
    let n_rad = grid.radii().len();
    for (flat, value) in cf.values().iter().enumerate() {
        let node = grid.node(flat / n_rad, flat % n_rad);
        writeln!(w, "{},{},{},{},{}", node.x, node.y, node.z, value.re, value.im)?;
    }
    w.flush()?;
    Ok(())
}

/// Write a scalar time series as CSV with header `t,{name}`.
pub fn write_series_csv(path: &Path, name: &str, series: &[(f64, f64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,{name}")?;
    for (t, v) in series {
        writeln!(w, "{t},{v}")?;
    }
    w.flush()?;
    Ok(())
}

/// Write frame bookkeeping as CSV: physical time, log-clock time, mass
/// factor, then the nine frame entries in row-major order.
pub fn write_frame_csv(path: &Path, frames: &[FrameState]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,tau,mass,e11,e12,e13,e21,e22,e23,e31,e32,e33")?;
    for f in frames {
        write!(w, "{},{},{}", f.t_physical, f.tau, f.mass)?;
        for i in 0..3 {
            for j in 0..3 {
                write!(w, ",{}", f.frame[(i, j)])?;
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Serialize a value as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Write raw particle velocities. Layout: `KENS` magic, u32 version, u64
/// count, then count little-endian f64 triples.
pub fn write_snapshot(path: &Path, velocities: &[Vector3<f64>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    w.write_all(&(velocities.len() as u64).to_le_bytes())?;
    for v in velocities {
        w.write_all(&v.x.to_le_bytes())?;
        w.write_all(&v.y.to_le_bytes())?;
        w.write_all(&v.z.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a snapshot written by [`write_snapshot`], validating magic, version,
/// and that the byte count matches the declared particle count.
pub fn read_snapshot(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::BadSnapshot("missing magic bytes".into()))?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::BadSnapshot(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| Error::BadSnapshot("missing version".into()))?;
    let version = u32::from_le_bytes(word);
    if version != SNAPSHOT_VERSION {
        return Err(Error::BadSnapshot(format!("unsupported version {version}")));
    }
    let mut count_bytes = [0u8; 8];
    r.read_exact(&mut count_bytes).map_err(|_| Error::BadSnapshot("missing count".into()))?;
    let count = u64::from_le_bytes(count_bytes) as usize;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != count * 24 {
        return Err(Error::BadSnapshot(format!(
            "payload is {} bytes for {} declared particles",
            payload.len(),
            count
        )));
    }
    let mut velocities = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(24) {
        let x = f64::from_le_bytes(chunk[0..8].try_into().unwrap());
        let y = f64::from_le_bytes(chunk[8..16].try_into().unwrap());
        let z = f64::from_le_bytes(chunk[16..24].try_into().unwrap());
        velocities.push(Vector3::new(x, y, z));
    }
    Ok(velocities)
}
