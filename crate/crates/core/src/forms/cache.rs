//! Versioned binary cache of an assembled `FormSystem`.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   b"SSCHROFORMS\0"          12 bytes
//! version u32                        = 1
//! n       u64
//! L       f64
//! alpha   f64
//! mass    f64
//! kappa   f64
//! mu      u32 count + (c,w,h) f64 triples, twice (plus then minus part)
//! F       amp+ amp- beta f64, chi+ triple, chi- triple
//! payload a_base, a_minus, a_y      n*n f64 row-major each
//!         b_rho, rho+, rho-         n f64 each
//!         profile                   n f64
//!         correction                f64
//!         exterior                  n f64
//! ```
//!
//! The file is seed-free: assembly does not depend on any RNG state, so
//! re-assembling from the same config digests identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernels::ProcessSpec;
use crate::perturbations::{li_decompose, Bump, LocalMeasure, NonlocalPerturbation};

use super::assemble::{FormSystem, WeightTable};

const MAGIC: &[u8; 12] = b"SSCHROFORMS\0";
const VERSION: u32 = 1;

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_slice(w: &mut impl Write, v: &[f64]) -> Result<()> {
    for &x in v {
        write_f64(w, x)?;
    }
    Ok(())
}

fn write_bump(w: &mut impl Write, b: &Bump) -> Result<()> {
    write_f64(w, b.center)?;
    write_f64(w, b.width)?;
    write_f64(w, b.height)
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_vec(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_f64(r)?);
    }
    Ok(out)
}

fn read_bump(r: &mut impl Read) -> Result<Bump> {
    let center = read_f64(r)?;
    let width = read_f64(r)?;
    let height = read_f64(r)?;
    Bump::new(center, width, height)
}

fn write_matrix(w: &mut impl Write, a: &DMatrix<f64>) -> Result<()> {
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            write_f64(w, a[(i, j)])?;
        }
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read, n: usize) -> Result<DMatrix<f64>> {
    let data = read_vec(r, n * n)?;
    Ok(DMatrix::from_row_iterator(n, n, data))
}

impl FormSystem {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.grid().len() as u64).to_le_bytes())?;
        write_f64(&mut w, self.grid().half_width())?;
        write_f64(&mut w, self.spec().alpha())?;
        write_f64(&mut w, self.spec().mass())?;
        write_f64(&mut w, self.spec().intensity_multiplier())?;
        let mu = self.local_measure();
        for part in [mu.bumps_plus(), mu.bumps_minus()] {
            w.write_all(&(part.len() as u32).to_le_bytes())?;
            for b in part {
                write_bump(&mut w, b)?;
            }
        }
        let f = self.perturbation();
        write_f64(&mut w, f.amp_plus())?;
        write_f64(&mut w, f.amp_minus())?;
        write_f64(&mut w, f.beta())?;
        write_bump(&mut w, f.chi_plus())?;
        write_bump(&mut w, f.chi_minus())?;
        write_matrix(&mut w, self.a_base())?;
        write_matrix(&mut w, self.a_minus())?;
        write_matrix(&mut w, self.a_y())?;
        write_slice(&mut w, self.b_rho())?;
        write_slice(&mut w, self.rho_plus())?;
        write_slice(&mut w, self.rho_minus())?;
        let n = self.grid().len();
        let profile: Vec<f64> = (0..n).map(|k| self.weights().profile(k)).collect();
        write_slice(&mut w, &profile)?;
        write_f64(&mut w, self.weights().correction())?;
        let exterior: Vec<f64> = (0..n).map(|i| self.weights().exterior_rate(i)).collect();
        write_slice(&mut w, &exterior)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 12];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CacheFormat("bad magic string".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::CacheFormat(format!(
                "unsupported cache version {version} (expected {VERSION})"
            )));
        }
        let mut n8 = [0u8; 8];
        r.read_exact(&mut n8)?;
        let n = u64::from_le_bytes(n8) as usize;
        let half_width = read_f64(&mut r)?;
        let alpha = read_f64(&mut r)?;
        let mass = read_f64(&mut r)?;
        let kappa = read_f64(&mut r)?;
        let spec = ProcessSpec::with_intensity_multiplier(alpha, mass, kappa)?;
        let grid = Grid::new(half_width, n)?;
        let mut parts: Vec<Vec<Bump>> = Vec::new();
        for _ in 0..2 {
            let count = read_u32(&mut r)? as usize;
            if count > 4096 {
                return Err(Error::CacheFormat("implausible bump count".into()));
            }
            let mut bumps = Vec::with_capacity(count);
            for _ in 0..count {
                bumps.push(read_bump(&mut r)?);
            }
            parts.push(bumps);
        }
        let minus = parts.pop().unwrap();
        let plus = parts.pop().unwrap();
        let mu = LocalMeasure::new(plus, minus);
        let amp_plus = read_f64(&mut r)?;
        let amp_minus = read_f64(&mut r)?;
        let beta = read_f64(&mut r)?;
        let chi_plus = read_bump(&mut r)?;
        let chi_minus = read_bump(&mut r)?;
        let f = NonlocalPerturbation::new(amp_plus, amp_minus, beta, chi_plus, chi_minus)?;
        let a_base = read_matrix(&mut r, n)?;
        let a_minus = read_matrix(&mut r, n)?;
        let a_y = read_matrix(&mut r, n)?;
        let b_rho = read_vec(&mut r, n)?;
        let rho_plus = read_vec(&mut r, n)?;
        let rho_minus = read_vec(&mut r, n)?;
        let profile = read_vec(&mut r, n)?;
        let correction = read_f64(&mut r)?;
        let exterior = read_vec(&mut r, n)?;
        let weights = WeightTable::from_parts(profile, correction, exterior, grid.spacing());
        Ok(FormSystem::from_parts(
            spec,
            grid,
            mu,
            li_decompose(&f),
            weights,
            a_base,
            a_minus,
            a_y,
            b_rho,
            rho_plus,
            rho_minus,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::assemble::FormSystem;

    #[test]
    fn roundtrip_preserves_operators() {
        let spec = ProcessSpec::new(1.2, 0.0).unwrap();
        let grid = Grid::new(5.0, 201).unwrap();
        let mu = LocalMeasure::new(vec![Bump::new(0.0, 1.0, 1.0).unwrap()], vec![]);
        let f = NonlocalPerturbation::new(
            0.5,
            0.25,
            2.0,
            Bump::new(-1.2, 0.8, 1.0).unwrap(),
            Bump::new(1.2, 0.8, 1.0).unwrap(),
        )
        .unwrap();
        let sys = FormSystem::assemble(&spec, &grid, &mu, &f).unwrap();
        let dir = std::env::temp_dir().join("ss-cache-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sys.bin");
        sys.save(&path).unwrap();
        let back = FormSystem::load(&path).unwrap();
        assert_eq!(sys.a_base(), back.a_base());
        assert_eq!(sys.a_minus(), back.a_minus());
        assert_eq!(sys.a_y(), back.a_y());
        assert_eq!(sys.b_rho(), back.b_rho());
        assert_eq!(sys.rho_plus(), back.rho_plus());
        assert_eq!(sys.grid(), back.grid());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = std::env::temp_dir().join("ss-cache-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.bin");
        std::fs::write(&path, b"not a cache at all").unwrap();
        assert!(matches!(
            FormSystem::load(&path),
            Err(Error::CacheFormat(_)) | Err(Error::Io(_))
        ));
        std::fs::remove_file(&path).ok();
    }
}
