//! Synthetic small-punch / tensile data.
//!
//! Finite-element results are replaced by a closed-form surrogate. The
//! tensile side is Hollomon hardening with a linear elastic branch:
//!
//! ```text
//! sigma(eps) = E * eps                        eps <= eps_y = sigma_y / E
//! sigma(eps) = sigma_y * (eps / eps_y)^n      eps >  eps_y
//! ```
//!
//! The punch side maps displacement to an equivalent strain and scales the
//! flow stress by a thickness/displacement power law:
//!
//! ```text
//! eps_eq(delta) = 0.25 * (delta / t)^1.4
//! P(delta)      = 2.0 * sigma(eps_eq) * t^1.5 * delta^0.8
//! ```

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spt_autograd::Rng;

use crate::error::{Result, SptError};

pub const YOUNGS_MODULUS: f64 = 70_000.0;
pub const POISSON_RATIO: f64 = 0.35;

pub const TRAIN_YIELD_RANGE: (f64, f64) = (20.98, 1907.53);
pub const TEST_YIELD_RANGE: (f64, f64) = (28.72, 1823.16);
pub const HARDENING_RANGE: (f64, f64) = (0.068, 0.4046);
pub const THICKNESS_RANGE: (f64, f64) = (1.0, 4.0);

pub const DEFAULT_TRAIN_SAMPLES: usize = 4500;
pub const DEFAULT_TEST_SAMPLES: usize = 500;

const STRAIN_SCALE: f64 = 0.25;
const STRAIN_EXPONENT: f64 = 1.4;
const LOAD_SCALE: f64 = 2.0;
const THICKNESS_EXPONENT: f64 = 1.5;
const DISPLACEMENT_EXPONENT: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn yield_range(self) -> (f64, f64) {
        match self {
            Split::Train => TRAIN_YIELD_RANGE,
            Split::Test => TEST_YIELD_RANGE,
        }
    }
}

/// One synthetic material. Stresses in MPa, thickness in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub sigma_y: f64,
    pub n: f64,
    pub t: f64,
    pub e: f64,
    pub nu: f64,
}

impl MaterialSpec {
    pub fn new(sigma_y: f64, n: f64, t: f64) -> Self {
        Self {
            sigma_y,
            n,
            t,
            e: YOUNGS_MODULUS,
            nu: POISSON_RATIO,
        }
    }

    pub fn yield_strain(&self) -> f64 {
        self.sigma_y / self.e
    }

    /// Whether every parameter lies inside the ranges of `split`.
    pub fn within(&self, split: Split) -> bool {
        let (lo, hi) = split.yield_range();
        (lo..=hi).contains(&self.sigma_y)
            && (HARDENING_RANGE.0..=HARDENING_RANGE.1).contains(&self.n)
            && (THICKNESS_RANGE.0..=THICKNESS_RANGE.1).contains(&self.t)
    }
}

/// Yield stress log-uniform, hardening exponent and thickness uniform.
pub fn sample_material(rng: &mut Rng, split: Split) -> MaterialSpec {
    let (lo, hi) = split.yield_range();
    let sigma_y = rng.log_uniform(lo, hi);
    let n = rng.uniform_range(HARDENING_RANGE.0, HARDENING_RANGE.1);
    let t = rng.uniform_range(THICKNESS_RANGE.0, THICKNESS_RANGE.1);
    MaterialSpec::new(sigma_y, n, t)
}

/// True stress (MPa) at true strain `eps`.
pub fn flow_stress(spec: &MaterialSpec, eps: f64) -> Result<f64> {
    if eps.is_nan() || eps < 0.0 {
        return Err(SptError::InvalidArgument(format!(
            "strain must be non-negative, got {eps}"
        )));
    }
    let eps_y = spec.yield_strain();
    let ratio = eps / eps_y;
    // Both branches are written relative to the yield point so that
    // eps == eps_y lands on sigma_y exactly.
    Ok(if eps <= eps_y {
        spec.sigma_y * ratio
    } else {
        spec.sigma_y * ratio.powf(spec.n)
    })
}

/// Punch load (N) at displacement `delta` (mm), `0 <= delta <= delta_max`.
pub fn spt_load(spec: &MaterialSpec, delta: f64, delta_max: f64) -> Result<f64> {
    if !(0.0..=delta_max).contains(&delta) {
        return Err(SptError::InvalidArgument(format!(
            "displacement {delta} outside [0, {delta_max}]"
        )));
    }
    let eps_eq = STRAIN_SCALE * (delta / spec.t).powf(STRAIN_EXPONENT);
    Ok(LOAD_SCALE * flow_stress(spec, eps_eq)? * spec.t.powf(THICKNESS_EXPONENT) * delta.powf(DISPLACEMENT_EXPONENT))
}

/// Sampling grids shared by every curve of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub l_in: usize,
    pub l_out: usize,
    pub delta_max: f64,
    pub eps_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            l_in: 64,
            l_out: 64,
            delta_max: 2.0,
            eps_max: 0.25,
        }
    }
}

impl GridSpec {
    pub fn with_lengths(l_in: usize, l_out: usize) -> Self {
        Self {
            l_in,
            l_out,
            ..Self::default()
        }
    }

    pub fn displacement_grid(&self) -> Vec<f64> {
        uniform_grid(self.delta_max, self.l_in)
    }

    pub fn strain_grid(&self) -> Vec<f64> {
        uniform_grid(self.eps_max, self.l_out)
    }
}

fn uniform_grid(max: f64, len: usize) -> Vec<f64> {
    let step = max / (len - 1) as f64;
    (0..len)
        .map(|i| if i + 1 == len { max } else { i as f64 * step })
        .collect()
}

/// Load-displacement input and stress-strain target of one material.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePair {
    pub id: usize,
    pub spec: MaterialSpec,
    pub displacement_grid: Vec<f64>,
    pub load: Vec<f64>,
    pub strain_grid: Vec<f64>,
    pub stress: Vec<f64>,
}

impl CurvePair {
    pub fn simulate(id: usize, spec: MaterialSpec, grid: &GridSpec) -> Result<Self> {
        let displacement_grid = grid.displacement_grid();
        let strain_grid = grid.strain_grid();
        let load = displacement_grid
            .iter()
            .map(|&d| spt_load(&spec, d, grid.delta_max))
            .collect::<Result<Vec<_>>>()?;
        let stress = strain_grid
            .iter()
            .map(|&e| flow_stress(&spec, e))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id,
            spec,
            displacement_grid,
            load,
            strain_grid,
            stress,
        })
    }

    pub fn is_monotone(&self) -> bool {
        let nondecreasing = |v: &[f64]| v.windows(2).all(|w| w[0] <= w[1]);
        self.load[0] == 0.0 && self.stress[0] == 0.0 && nondecreasing(&self.load) && nondecreasing(&self.stress)
    }
}

/// Min/max of load and stress, always taken from a training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub load_min: f64,
    pub load_max: f64,
    pub stress_min: f64,
    pub stress_max: f64,
}

impl NormStats {
    pub fn from_samples(samples: &[CurvePair]) -> Self {
        let fold = |f: fn(&CurvePair) -> &[f64]| {
            samples
                .iter()
                .flat_map(|s| f(s).iter().copied())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (load_min, load_max) = fold(|s| &s.load);
        let (stress_min, stress_max) = fold(|s| &s.stress);
        Self {
            load_min,
            load_max,
            stress_min,
            stress_max,
        }
    }

    pub fn normalize_load(&self, v: f64) -> f64 {
        (v - self.load_min) / (self.load_max - self.load_min)
    }

    pub fn normalize_stress(&self, v: f64) -> f64 {
        (v - self.stress_min) / (self.stress_max - self.stress_min)
    }

    pub fn denormalize_stress(&self, v: f64) -> f64 {
        self.stress_min + v * (self.stress_max - self.stress_min)
    }

    pub fn stress_range(&self) -> f64 {
        self.stress_max - self.stress_min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub seed: Option<u64>,
    pub grid: GridSpec,
    pub samples: Vec<CurvePair>,
    pub norm_stats: NormStats,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `n` samples; norm stats are kept, not recomputed.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            samples: self.samples.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }
}

fn generate_split(root: &Rng, split: Split, count: usize, grid: &GridSpec) -> Result<Vec<CurvePair>> {
    let stream = root.split(split as u64);
    (0..count)
        .map(|i| {
            let mut rng = stream.split(i as u64);
            CurvePair::simulate(i, sample_material(&mut rng, split), grid)
        })
        .collect()
}

/// Generates independent train and test splits. Every sample draws from its
/// own child stream, so a sample never depends on how many precede it.
pub fn generate_dataset(n_train: usize, n_test: usize, seed: u64, grid: GridSpec) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(SptError::InvalidArgument("split sizes must be at least 1".into()));
    }
    if grid.l_in < 8 || grid.l_out < 8 {
        return Err(SptError::InvalidArgument(format!(
            "grid lengths must be at least 8, got {} and {}",
            grid.l_in, grid.l_out
        )));
    }
    let root = Rng::new(seed);
    let train = generate_split(&root, Split::Train, n_train, &grid)?;
    let test = generate_split(&root, Split::Test, n_test, &grid)?;
    let norm_stats = NormStats::from_samples(&train);
    Ok((
        Dataset {
            split: Split::Train,
            seed: Some(seed),
            grid,
            samples: train,
            norm_stats,
        },
        Dataset {
            split: Split::Test,
            seed: Some(seed),
            grid,
            samples: test,
            norm_stats,
        },
    ))
}

// ----------------------------------------------------------------------------- CSV

fn header(grid: &GridSpec) -> Vec<String> {
    let mut cols: Vec<String> = ["id", "sigma_y", "n", "t"].iter().map(|s| s.to_string()).collect();
    cols.extend((0..grid.l_in).map(|i| format!("load_{i}")));
    cols.extend((0..grid.l_out).map(|i| format!("stress_{i}")));
    cols
}

fn csv_err(line: u64, e: impl std::fmt::Display) -> SptError {
    SptError::Csv {
        line,
        detail: e.to_string(),
    }
}

/// One row per sample: `id, sigma_y, n, t, load_*, stress_*`.
/// Floats use the shortest representation that round-trips.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| SptError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let io = |e: csv::Error| SptError::io(path, e.into());
    w.write_record(header(&ds.grid)).map_err(io)?;
    for s in &ds.samples {
        let mut row = vec![
            s.id.to_string(),
            s.spec.sigma_y.to_string(),
            s.spec.n.to_string(),
            s.spec.t.to_string(),
        ];
        row.extend(s.load.iter().map(f64::to_string));
        row.extend(s.stress.iter().map(f64::to_string));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| SptError::io(path, e))
}

/// One past the largest `prefix{i}` index present.
fn extent(cols: &[String], prefix: &str) -> usize {
    cols.iter()
        .filter_map(|c| c.strip_prefix(prefix)?.parse::<usize>().ok())
        .map(|i| i + 1)
        .max()
        .unwrap_or(0)
}

/// Reads a dataset file. The file carries no split metadata: norm stats are
/// recomputed from its own samples and the grid bounds take their defaults.
pub fn read_csv(path: &Path, split: Split) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| SptError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut records = r.records();
    let head = records
        .next()
        .ok_or_else(|| csv_err(1, "empty file"))?
        .map_err(|e| csv_err(1, e))?;
    let cols: Vec<String> = head.iter().map(str::to_string).collect();

    let grid = GridSpec::with_lengths(extent(&cols, "load_"), extent(&cols, "stress_"));
    if grid.l_in < 2 || grid.l_out < 2 {
        return Err(SptError::MissingColumn(
            if grid.l_in < 2 { "load_1" } else { "stress_1" }.into(),
        ));
    }
    let expected = header(&grid);
    for name in &expected {
        if !cols.contains(name) {
            return Err(SptError::MissingColumn(name.clone()));
        }
    }
    if cols != expected {
        return Err(csv_err(
            1,
            format!(
                "unexpected column layout; expected {} columns in canonical order",
                expected.len()
            ),
        ));
    }

    let mut samples = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != expected.len() {
            return Err(csv_err(
                line,
                format!("expected {} fields, found {}", expected.len(), rec.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| csv_err(line, format!("column `{}`: {e}", expected[i])))
        };
        let id = rec[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| csv_err(line, format!("column `id`: {e}")))?;
        let spec = MaterialSpec::new(num(1)?, num(2)?, num(3)?);
        let load = (0..grid.l_in).map(|i| num(4 + i)).collect::<Result<Vec<_>>>()?;
        let stress = (0..grid.l_out)
            .map(|i| num(4 + grid.l_in + i))
            .collect::<Result<Vec<_>>>()?;
        samples.push(CurvePair {
            id,
            spec,
            displacement_grid: grid.displacement_grid(),
            load,
            strain_grid: grid.strain_grid(),
            stress,
        });
    }
    if samples.is_empty() {
        return Err(csv_err(2, "no samples"));
    }
    let norm_stats = NormStats::from_samples(&samples);
    Ok(Dataset {
        split,
        seed: None,
        grid,
        samples,
        norm_stats,
    })
}
