// SPDX-License-Identifier: Apache-2.0

//! Exact unlearning for least-squares regression.
//!
//! The model keeps the sufficient statistics `n`, `Σ x xᵀ` and `Σ x y` as exact
//! integers, and the coefficients as the minimum-norm rational solution of the
//! normal equations. Removing a row subtracts its contribution and re-solves,
//! which yields exactly the model retrained without that row.

use num::{BigInt, BigRational, Signed, Zero};
use thiserror::Error;

use crate::codec::CanonicalWriter;
use crate::hidict::{Dictionary, HiDict};

pub const MODEL_MAGIC: &[u8; 4] = b"MDL1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UnlearnError {
    #[error("row has {found} bytes, expected {expected} for dimension {dim}")]
    DimensionMismatch {
        dim: usize,
        expected: usize,
        found: usize,
    },
    #[error("no row stored under the given key")]
    KeyAbsent,
    #[error("model dimension {model} does not match dataset dimension {data}")]
    ModelMismatch { model: usize, data: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub features: Vec<i32>,
    pub target: i32,
}

impl Row {
    pub fn new(features: Vec<i32>, target: i32) -> Self {
        Row { features, target }
    }

    /// Features then target, each as 4-byte big-endian two's complement.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (self.features.len() + 1));
        for f in &self.features {
            out.extend_from_slice(&f.to_be_bytes());
        }
        out.extend_from_slice(&self.target.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8], dim: usize) -> Result<Row, UnlearnError> {
        let expected = 4 * (dim + 1);
        if bytes.len() != expected {
            return Err(UnlearnError::DimensionMismatch {
                dim,
                expected,
                found: bytes.len(),
            });
        }
        let mut words = bytes
            .chunks_exact(4)
            .map(|c| i32::from_be_bytes([c[0], c[1], c[2], c[3]]));
        let features = words.by_ref().take(dim).collect();
        let target = words.next().unwrap();
        Ok(Row { features, target })
    }
}

/// Rows keyed by opaque keys, stored in a history-independent dictionary.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub dim: usize,
    pub rows: HiDict,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Dataset {
            dim,
            rows: HiDict::new(),
        }
    }

    pub fn from_rows<'a>(dim: usize, rows: impl IntoIterator<Item = (&'a [u8], Row)>) -> Self {
        let mut d = Dataset::new(dim);
        for (k, r) in rows {
            d.rows.insert(k, &r.encode()).expect("row within size limits");
        }
        d
    }

    pub fn without(&self, key: &[u8]) -> Dataset {
        Dataset {
            dim: self.dim,
            rows: self.rows.deleted(key),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Model {
    pub dim: usize,
    pub n: u64,
    /// Row-major `dim × dim`.
    pub sum_xx: Vec<i128>,
    pub sum_xy: Vec<i128>,
    pub coefficients: Vec<BigRational>,
}

impl Model {
    fn empty(dim: usize) -> Model {
        Model {
            dim,
            n: 0,
            sum_xx: vec![0; dim * dim],
            sum_xy: vec![0; dim],
            coefficients: vec![BigRational::zero(); dim],
        }
    }

    fn accumulate(&mut self, row: &Row, sign: i128) {
        let d = self.dim;
        for i in 0..d {
            let xi = row.features[i] as i128;
            for j in 0..d {
                self.sum_xx[i * d + j] += sign * xi * row.features[j] as i128;
            }
            self.sum_xy[i] += sign * xi * row.target as i128;
        }
    }

    fn solve(&mut self) {
        let d = self.dim;
        let a: Vec<Vec<BigRational>> = (0..d)
            .map(|i| (0..d).map(|j| int(self.sum_xx[i * d + j])).collect())
            .collect();
        let b: Vec<BigRational> = self.sum_xy.iter().map(|&v| int(v)).collect();
        self.coefficients = min_norm_solve(&a, &b);
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut w = CanonicalWriter::new(MODEL_MAGIC);
        w.u32(self.dim as u32).u64(self.n);
        for v in self.sum_xx.iter().chain(&self.sum_xy) {
            w.bytes(&v.to_be_bytes());
        }
        for c in &self.coefficients {
            w.bytes(&c.numer().to_signed_bytes_be())
                .bytes(&c.denom().to_signed_bytes_be());
        }
        w.finish()
    }
}

fn int(v: i128) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

pub fn learn(data: &Dataset) -> Result<Model, UnlearnError> {
    let mut model = Model::empty(data.dim);
    for (_, bytes) in data.rows.iter() {
        let row = Row::decode(bytes, data.dim)?;
        model.accumulate(&row, 1);
        model.n += 1;
    }
    model.solve();
    Ok(model)
}

/// Removes the row stored under `key` from `model`, which must have been
/// learnt on `data`.
pub fn delete(data: &Dataset, model: &Model, key: &[u8]) -> Result<Model, UnlearnError> {
    if model.dim != data.dim {
        return Err(UnlearnError::ModelMismatch {
            model: model.dim,
            data: data.dim,
        });
    }
    let bytes = data.rows.lookup(key).ok_or(UnlearnError::KeyAbsent)?;
    let row = Row::decode(bytes, data.dim)?;
    let mut next = model.clone();
    next.accumulate(&row, -1);
    next.n -= 1;
    next.solve();
    Ok(next)
}

type Matrix = Vec<Vec<BigRational>>;

fn transpose(m: &Matrix, rows: usize, cols: usize) -> Matrix {
    (0..cols)
        .map(|j| (0..rows).map(|i| m[i][j].clone()).collect())
        .collect()
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| {
                    (0..inner).fold(BigRational::zero(), |acc, k| acc + &row[k] * &b[k][j])
                })
                .collect()
        })
        .collect()
}

fn matvec(a: &Matrix, v: &[BigRational]) -> Vec<BigRational> {
    a.iter()
        .map(|row| {
            row.iter()
                .zip(v)
                .fold(BigRational::zero(), |acc, (x, y)| acc + x * y)
        })
        .collect()
}

/// Reduced row echelon form with pivots taken left to right, first nonzero
/// row first. Returns the nonzero rows and the pivot columns.
fn rref(a: &Matrix) -> (Matrix, Vec<usize>) {
    let mut m = a.clone();
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    let mut pivots = Vec::new();
    let mut r = 0;
    for c in 0..cols {
        if r == rows {
            break;
        }
        let Some(p) = (r..rows).find(|&i| !m[i][c].is_zero()) else {
            continue;
        };
        m.swap(r, p);
        let inv = m[r][c].recip();
        for x in m[r].iter_mut() {
            *x = &*x * &inv;
        }
        for i in 0..rows {
            if i != r && !m[i][c].is_zero() {
                let f = m[i][c].clone();
                for j in 0..cols {
                    let delta = &f * &m[r][j];
                    m[i][j] -= delta;
                }
            }
        }
        pivots.push(c);
        r += 1;
    }
    m.truncate(r);
    (m, pivots)
}

/// Solves a nonsingular square system by Gauss–Jordan elimination.
fn solve_nonsingular(a: &Matrix, b: &[BigRational]) -> Vec<BigRational> {
    let n = a.len();
    let aug: Matrix = a
        .iter()
        .zip(b)
        .map(|(row, bi)| {
            let mut r = row.clone();
            r.push(bi.clone());
            r
        })
        .collect();
    let (red, pivots) = rref(&aug);
    assert_eq!(pivots.len(), n, "system is singular");
    red.into_iter().map(|row| row[n].clone()).collect()
}

/// Minimum-norm solution `A⁺ b` of `A x = b` for square `A`.
///
/// Uses the full-rank factorization `A = F G` (F: pivot columns of A, G: nonzero
/// rows of rref(A)), for which `A⁺ = Gᵀ (G Gᵀ)⁻¹ (Fᵀ F)⁻¹ Fᵀ`.
pub fn min_norm_solve(a: &[Vec<BigRational>], b: &[BigRational]) -> Vec<BigRational> {
    let n = a.len();
    let a: Matrix = a.to_vec();
    let (g, pivots) = rref(&a);
    if pivots.is_empty() {
        return vec![BigRational::zero(); n];
    }
    let f: Matrix = a
        .iter()
        .map(|row| pivots.iter().map(|&c| row[c].clone()).collect())
        .collect();
    let r = pivots.len();
    let ft = transpose(&f, n, r);
    let gt = transpose(&g, r, n);
    let y = matvec(&ft, b);
    let z = solve_nonsingular(&matmul(&ft, &f), &y);
    let w = solve_nonsingular(&matmul(&g, &gt), &z);
    matvec(&gt, &w)
}

/// Largest absolute numerator, handy for diagnostics.
pub fn coefficient_height(model: &Model) -> BigInt {
    model
        .coefficients
        .iter()
        .map(|c| c.numer().abs())
        .max()
        .unwrap_or_default()
}
