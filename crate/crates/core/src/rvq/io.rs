//! Binary file formats for codebooks and code grids.
//!
//! Codebook file: magic `RVQ1`, then u32 Q, K, D, zero_reserved flag,
//! followed by Q·K·D little-endian f32 codewords, row-major.
//!
//! Grid file: magic `GRID`, then u32 Q, T, K and a u32 flags word (bit 0
//! set = shifted layout, PAD codes allowed), followed by Q·T little-endian
//! u16 codes, row-major. Unshifted grids must be PAD-free.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rvq::{CodeGrid, Codebooks};

const CODEBOOK_MAGIC: &[u8; 4] = b"RVQ1";
const GRID_MAGIC: &[u8; 4] = b"GRID";

/// Grid flags bit 0: the stored grid is in shifted (delayed) layout.
pub const GRID_FLAG_SHIFTED: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_codebooks(w: &mut impl Write, cb: &Codebooks) -> Result<()> {
    w.write_all(CODEBOOK_MAGIC)?;
    put_u32(w, cb.num_stages() as u32)?;
    put_u32(w, cb.codebook_size() as u32)?;
    put_u32(w, cb.dim() as u32)?;
    put_u32(w, cb.zero_reserved() as u32)?;
    for q in 0..cb.num_stages() {
        for &v in cb.stage(q).data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_codebooks(r: &mut impl Read) -> Result<Codebooks> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated codebook header".into()))?;
    if &magic != CODEBOOK_MAGIC {
        return Err(Error::Format(format!("bad codebook magic {magic:?}")));
    }
    let q = get_u32(r, "stage count")? as usize;
    let k = get_u32(r, "codebook size")? as usize;
    let d = get_u32(r, "dimension")? as usize;
    let zero_reserved = match get_u32(r, "zero_reserved flag")? {
        0 => false,
        1 => true,
        v => return Err(Error::Format(format!("bad zero_reserved flag {v}"))),
    };
    if q == 0 || k == 0 || d == 0 || q * k * d > (1 << 28) {
        return Err(Error::Format(format!("implausible codebook dims Q={q} K={k} D={d}")));
    }
    let mut stages = Vec::with_capacity(q);
    let mut buf = vec![0u8; k * d * 4];
    for s in 0..q {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("truncated codewords in stage {s}")))?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        stages.push(
            Tensor::matrix(k, d, data).map_err(|e| Error::Format(e.to_string()))?,
        );
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after codebook payload".into()));
    }
    Codebooks::from_stages(stages, zero_reserved).map_err(|e| Error::Format(e.to_string()))
}

/// Write a grid; `shifted` grids may contain PAD codes, unshifted must not.
pub fn write_grid(w: &mut impl Write, grid: &CodeGrid, shifted: bool) -> Result<()> {
    if !shifted && grid.has_pad() {
        return Err(Error::Validation("refusing to write PAD codes in an unshifted grid".into()));
    }
    w.write_all(GRID_MAGIC)?;
    put_u32(w, grid.num_codebooks() as u32)?;
    put_u32(w, grid.num_frames() as u32)?;
    put_u32(w, grid.codebook_size() as u32)?;
    put_u32(w, if shifted { GRID_FLAG_SHIFTED } else { 0 })?;
    for &c in grid.codes() {
        w.write_all(&c.to_le_bytes())?;
    }
    Ok(())
}

/// Read a grid; returns the grid and whether it is in shifted layout.
pub fn read_grid(r: &mut impl Read) -> Result<(CodeGrid, bool)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated grid header".into()))?;
    if &magic != GRID_MAGIC {
        return Err(Error::Format(format!("bad grid magic {magic:?}")));
    }
    let q = get_u32(r, "codebook count")? as usize;
    let t = get_u32(r, "frame count")? as usize;
    let k = get_u32(r, "codebook size")? as usize;
    let flags = get_u32(r, "flags")?;
    if flags & !GRID_FLAG_SHIFTED != 0 {
        return Err(Error::Format(format!("unknown grid flags {flags:#x}")));
    }
    let shifted = flags & GRID_FLAG_SHIFTED != 0;
    if q == 0 || t == 0 || q * t > (1 << 28) {
        return Err(Error::Format(format!("implausible grid dims Q={q} T={t}")));
    }
    let mut buf = vec![0u8; q * t * 2];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated grid payload".into()))?;
    let codes: Vec<u16> = buf.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    let grid = CodeGrid::new(q, t, k, codes).map_err(|e| Error::Format(e.to_string()))?;
    if !shifted && grid.has_pad() {
        return Err(Error::Format("PAD codes present in an unshifted grid".into()));
    }
    Ok((grid, shifted))
}
