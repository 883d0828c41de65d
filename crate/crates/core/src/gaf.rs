//! Gramian Angular (summation) Field encoding of a scalar sequence.
//!
//! Values are min-max scaled into `[0, 1]`, read as `cos(theta)`, and the
//! image entry `(i, j)` is `cos(theta_i + theta_j)`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Result, SptError};

const DEGENERATE_RANGE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GafMode {
    /// A constant sequence is an error.
    #[default]
    Strict,
    /// A constant sequence maps every scaled value to 0.5.
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GafImage {
    size: usize,
    g: Vec<f64>,
    theta: Vec<f64>,
    pub data_min: f64,
    pub data_max: f64,
}

impl GafImage {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.g[i * self.size + j]
    }

    /// Row-major `size x size` entries.
    pub fn values(&self) -> &[f64] {
        &self.g
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Scaled inputs recovered as `cos(theta)`.
    pub fn scaled(&self) -> Vec<f64> {
        self.theta.iter().map(|t| t.cos()).collect()
    }

    /// Binary PGM (P5): `[-1, 1]` maps linearly onto `[0, 255]`, rounding
    /// half up.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend(self.g.iter().map(|&v| pixel(v)));
        out
    }

    pub fn export_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| SptError::io(path, e))
    }

    /// One comma-separated row per line.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| SptError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for row in self.g.chunks(self.size) {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(w, "{}", line.join(",")).map_err(|e| SptError::io(path, e))?;
        }
        w.flush().map_err(|e| SptError::io(path, e))
    }
}

pub(crate) fn pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn gaf_transform(d: &[f64], mode: GafMode) -> Result<GafImage> {
    if d.len() < 2 {
        return Err(SptError::InvalidArgument(format!(
            "sequence needs at least 2 points, got {}",
            d.len()
        )));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(SptError::InvalidArgument("sequence contains non-finite values".into()));
    }
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let scaled: Vec<f64> = if range < DEGENERATE_RANGE {
        match mode {
            GafMode::Strict => return Err(SptError::DegenerateSequence { range }),
            GafMode::Lenient => vec![0.5; d.len()],
        }
    } else {
        d.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    };
    let theta: Vec<f64> = scaled.iter().map(|x| x.acos()).collect();

    let n = d.len();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = (theta[i] + theta[j]).cos();
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
    }
    Ok(GafImage {
        size: n,
        g,
        theta,
        data_min: lo,
        data_max: hi,
    })
}
