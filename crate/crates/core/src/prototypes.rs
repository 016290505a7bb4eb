//! Per-level class prototype matrices and the cosine similarity kernel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::hierarchy::SenseHierarchy;
use crate::linalg::{cosine_unchecked, norm, Matrix, NORM_FLOOR};

#[derive(Debug, Error, PartialEq)]
pub enum PrototypeError {
    #[error("prototype dimension must be at least 2, got {0}")]
    Dimension(usize),
    #[error("vector norm {0:e} is below the zero guard")]
    ZeroNorm(f64),
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("level {0} has no prototypes")]
    UndeclaredLevel(usize),
    #[error("level {level} prototype {row} has near-zero norm")]
    DegenerateRow { level: usize, row: usize },
    #[error("checkpoint line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("prototype set has {got} rows at level {level}, hierarchy declares {expected}")]
    Shape {
        level: usize,
        expected: usize,
        got: usize,
    },
}

/// One matrix per hierarchy level; row `j` of level `l` is the prototype of
/// the `j`-th sense declared at that level.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    dim: usize,
    levels: Vec<Matrix>,
}

impl PrototypeSet {
    /// Rows drawn i.i.d. from normal(0, 1/√d_p), deterministic in `seed`.
    pub fn init(h: &SenseHierarchy, dim: usize, seed: u64) -> Result<Self, PrototypeError> {
        if dim < 2 {
            return Err(PrototypeError::Dimension(dim));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (dim as f64).sqrt();
        let levels = (1..=h.depth())
            .map(|l| Matrix::random_normal(h.level_size(l).expect("declared"), dim, std, &mut rng))
            .collect();
        let ps = Self { dim, levels };
        ps.validate()?;
        Ok(ps)
    }

    pub fn from_levels(levels: Vec<Matrix>) -> Result<Self, PrototypeError> {
        let dim = levels.first().map_or(0, Matrix::cols);
        if dim < 2 {
            return Err(PrototypeError::Dimension(dim));
        }
        if let Some(m) = levels.iter().find(|m| m.cols() != dim) {
            return Err(PrototypeError::LengthMismatch(dim, m.cols()));
        }
        Ok(Self { dim, levels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, level: usize) -> Result<&Matrix, PrototypeError> {
        level
            .checked_sub(1)
            .and_then(|i| self.levels.get(i))
            .ok_or(PrototypeError::UndeclaredLevel(level))
    }

    pub fn level_mut(&mut self, level: usize) -> Result<&mut Matrix, PrototypeError> {
        level
            .checked_sub(1)
            .and_then(|i| self.levels.get_mut(i))
            .ok_or(PrototypeError::UndeclaredLevel(level))
    }

    pub fn levels(&self) -> &[Matrix] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [Matrix] {
        &mut self.levels
    }

    /// Checks every row clears the zero-norm guard and all entries are finite.
    pub fn validate(&self) -> Result<(), PrototypeError> {
        for (li, m) in self.levels.iter().enumerate() {
            for (row, r) in m.iter_rows().enumerate() {
                let n = norm(r);
                if !(n > NORM_FLOOR) || !n.is_finite() {
                    return Err(PrototypeError::DegenerateRow { level: li + 1, row });
                }
            }
        }
        Ok(())
    }

    /// Checks row counts against the hierarchy.
    pub fn check_shape(&self, h: &SenseHierarchy) -> Result<(), PrototypeError> {
        if self.depth() != h.depth() {
            return Err(PrototypeError::UndeclaredLevel(self.depth().max(h.depth())));
        }
        for l in 1..=h.depth() {
            let expected = h.level_size(l).expect("declared");
            let got = self.levels[l - 1].rows();
            if expected != got {
                return Err(PrototypeError::Shape {
                    level: l,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }

    /// Text checkpoint: a header line `prototypes <levels> <dim> <M_1> …`,
    /// then one line of space-separated reals per row, level by level.
    pub fn to_checkpoint(&self) -> String {
        let mut out = format!("prototypes {} {}", self.levels.len(), self.dim);
        for m in &self.levels {
            out.push_str(&format!(" {}", m.rows()));
        }
        out.push('\n');
        for m in &self.levels {
            for r in m.iter_rows() {
                let vals: Vec<String> = r.iter().map(|x| format!("{x:?}")).collect();
                out.push_str(&vals.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, PrototypeError> {
        let err = |line: usize, message: String| PrototypeError::Parse { line, message };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| err(1, "empty checkpoint".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.first() != Some(&"prototypes") || fields.len() < 3 {
            return Err(err(
                1,
                "expected `prototypes <levels> <dim> <rows…>`".into(),
            ));
        }
        let nums = fields[1..]
            .iter()
            .map(|f| f.parse::<usize>().map_err(|e| err(1, e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let (n_levels, dim) = (nums[0], nums[1]);
        if nums.len() != 2 + n_levels {
            return Err(err(1, "row counts do not match level count".into()));
        }
        let mut levels = Vec::with_capacity(n_levels);
        for &rows in &nums[2..] {
            let mut data = Vec::with_capacity(rows * dim);
            for _ in 0..rows {
                let (idx, l) = lines
                    .next()
                    .ok_or_else(|| err(0, "truncated checkpoint".into()))?;
                let row = l
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|e| err(idx + 1, e.to_string())))
                    .collect::<Result<Vec<_>, _>>()?;
                if row.len() != dim {
                    return Err(err(
                        idx + 1,
                        format!("expected {dim} values, got {}", row.len()),
                    ));
                }
                data.extend(row);
            }
            levels.push(Matrix::from_vec(rows, dim, data));
        }
        if let Some((idx, _)) = lines.next() {
            return Err(err(idx + 1, "trailing data".into()));
        }
        Self::from_levels(levels)
    }
}

/// `u·w / (‖u‖‖w‖)`, rejecting inputs whose norm is within the zero guard.
pub fn cosine_sim(u: &[f64], w: &[f64]) -> Result<f64, PrototypeError> {
    if u.len() != w.len() {
        return Err(PrototypeError::LengthMismatch(u.len(), w.len()));
    }
    for x in [u, w] {
        let n = norm(x);
        if !(n > NORM_FLOOR) {
            return Err(PrototypeError::ZeroNorm(n));
        }
    }
    Ok(cosine_unchecked(u, w))
}

/// Cosine similarity of `v` to every prototype at `level`, in hierarchy order.
pub fn similarities(
    v: &[f64],
    ps: &PrototypeSet,
    level: usize,
) -> Result<Vec<f64>, PrototypeError> {
    ps.level(level)?
        .iter_rows()
        .map(|row| cosine_sim(v, row))
        .collect()
}
