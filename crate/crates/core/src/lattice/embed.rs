//! Hyperplane elevation and enclosing-simplex search.
//!
//! Positions in `R^D` map linearly onto the hyperplane `sum(x) = 0` of
//! `R^(D+1)`, which the permutohedral lattice tiles with congruent simplices.
//! The enclosing simplex is found by rounding to the nearest remainder-0
//! lattice point and ranking the rounding residuals; its vertices are that
//! point plus the canonical offsets selected by the rank permutation.

use crate::error::{Error, Result};

/// Largest elevated coordinate magnitude we accept before the integer keys
/// could overflow.
const MAX_COORD: f64 = 1.0e8;

/// A point of the permutohedral lattice: `D+1` integers summing to zero, all
/// congruent modulo `D+1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LatticeKey(pub Vec<i32>);

impl LatticeKey {
    pub fn coords(&self) -> &[i32] {
        &self.0
    }

    /// Remainder class of the coordinates, or `None` if the key is not a lattice point.
    pub fn remainder(&self) -> Option<i32> {
        let d1 = self.0.len() as i32;
        if d1 == 0 || self.0.iter().map(|&c| i64::from(c)).sum::<i64>() != 0 {
            return None;
        }
        let r = self.0[0].rem_euclid(d1);
        self.0.iter().all(|c| c.rem_euclid(d1) == r).then_some(r)
    }
}

/// Linear map `R^D -> {x in R^(D+1) : sum(x) = 0}`, equal to `(D+1)` times an
/// isometry, so lattice simplices come out uniform.
#[derive(Clone, Debug)]
pub struct Elevation {
    dim: usize,
    /// Row-major `(D+1) x D`.
    matrix: Vec<f64>,
}

impl Elevation {
    pub fn new(dim: usize) -> Self {
        let d1 = dim + 1;
        let mut matrix = vec![0.0; d1 * dim];
        for c in 0..dim {
            let sf = d1 as f64 / (((c + 1) * (c + 2)) as f64).sqrt();
            for i in 0..=c {
                matrix[i * dim + c] = sf;
            }
            matrix[(c + 1) * dim + c] = -((c + 1) as f64) * sf;
        }
        Self { dim, matrix }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// `out = scale * M p`.
    pub fn apply_into(&self, p: &[f64], scale: f64, out: &mut [f64]) {
        let d = self.dim;
        for (i, o) in out.iter_mut().enumerate().take(d + 1) {
            let row = &self.matrix[i * d..(i + 1) * d];
            *o = scale * row.iter().zip(p).map(|(m, x)| m * x).sum::<f64>();
        }
    }

    /// `out += scale * M^T g`, the pullback of a hyperplane gradient.
    pub fn pullback_into(&self, g: &[f64], scale: f64, out: &mut [f64]) {
        let d = self.dim;
        for (i, &gi) in g.iter().enumerate().take(d + 1) {
            let row = &self.matrix[i * d..(i + 1) * d];
            for (o, m) in out.iter_mut().zip(row) {
                *o += scale * m * gi;
            }
        }
    }
}

/// Elevates one position. `scale` multiplies the map.
pub fn elevate(p: &[f64], scale: f64) -> Result<Vec<f64>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("elevation scale {scale} must be positive and finite")));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "elevate" });
    }
    let mut out = vec![0.0; p.len() + 1];
    Elevation::new(p.len()).apply_into(p, scale, &mut out);
    Ok(out)
}

/// Enclosing simplex of one elevated point.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexEmbedding {
    pub elevated: Vec<f64>,
    /// Vertex `k` is the simplex corner of remainder `k`.
    pub vertices: Vec<LatticeKey>,
    /// Barycentric weight of each vertex.
    pub weights: Vec<f64>,
    /// Rank of each coordinate's rounding residual (0 = largest).
    pub rank: Vec<usize>,
}

pub fn find_simplex(elevated: &[f64]) -> Result<SimplexEmbedding> {
    let d1 = elevated.len();
    let mut scratch = SimplexScratch::new(d1 - 1);
    let mut keys = vec![0i32; d1 * d1];
    let mut weights = vec![0.0; d1];
    let mut rank = vec![0usize; d1];
    scratch.locate(elevated, &mut keys, &mut weights, &mut rank)?;
    Ok(SimplexEmbedding { elevated: elevated.to_vec(), vertices: keys.chunks(d1).map(|k| LatticeKey(k.to_vec())).collect(), weights, rank })
}

/// Reusable buffers for [`SimplexScratch::locate`].
#[derive(Clone, Debug)]
pub(crate) struct SimplexScratch {
    dim: usize,
    rem0: Vec<i64>,
    rank: Vec<i64>,
    bary: Vec<f64>,
}

impl SimplexScratch {
    pub(crate) fn new(dim: usize) -> Self {
        Self { dim, rem0: vec![0; dim + 1], rank: vec![0; dim + 1], bary: vec![0.0; dim + 2] }
    }

    /// Writes the `D+1` vertex keys (row `k` = remainder `k`), barycentric
    /// weights and coordinate ranks of the simplex enclosing `y`.
    pub(crate) fn locate(&mut self, y: &[f64], keys: &mut [i32], weights: &mut [f64], rank_out: &mut [usize]) -> Result<()> {
        let d = self.dim;
        let d1 = d + 1;
        let d1f = d1 as f64;
        debug_assert_eq!(y.len(), d1);

        let mut sum: i64 = 0;
        for i in 0..d1 {
            if y[i].is_nan() || y[i].abs() >= MAX_COORD {
                return Err(if y[i].is_finite() { Error::LatticeOverflow(y[i].abs()) } else { Error::NonFinite { op: "find_simplex" } });
            }
            let v = y[i] / d1f;
            let up = v.ceil() * d1f;
            let down = v.floor() * d1f;
            let r = if up - y[i] < y[i] - down { up } else { down };
            self.rem0[i] = r as i64;
            sum += self.rem0[i] / d1 as i64;
        }

        self.rank.iter_mut().for_each(|r| *r = 0);
        for i in 0..d {
            let di = y[i] - self.rem0[i] as f64;
            for j in i + 1..d1 {
                if di < y[j] - self.rem0[j] as f64 {
                    self.rank[i] += 1;
                } else {
                    self.rank[j] += 1;
                }
            }
        }

        let d1i = d1 as i64;
        if sum > 0 {
            for i in 0..d1 {
                if self.rank[i] >= d1i - sum {
                    self.rem0[i] -= d1i;
                    self.rank[i] += sum - d1i;
                } else {
                    self.rank[i] += sum;
                }
            }
        } else if sum < 0 {
            for i in 0..d1 {
                if self.rank[i] < -sum {
                    self.rem0[i] += d1i;
                    self.rank[i] += d1i + sum;
                } else {
                    self.rank[i] += sum;
                }
            }
        }

        self.bary.iter_mut().for_each(|b| *b = 0.0);
        for i in 0..d1 {
            let delta = (y[i] - self.rem0[i] as f64) / d1f;
            let r = self.rank[i] as usize;
            self.bary[d - r] += delta;
            self.bary[d + 1 - r] -= delta;
        }
        self.bary[0] += 1.0 + self.bary[d + 1];
        weights.copy_from_slice(&self.bary[..d1]);

        for k in 0..d1 {
            let row = &mut keys[k * d1..(k + 1) * d1];
            for i in 0..d1 {
                let r = self.rank[i] as usize;
                let off = if r + k <= d { k as i64 } else { k as i64 - d1i };
                row[i] = (self.rem0[i] + off) as i32;
            }
        }
        for (o, &r) in rank_out.iter_mut().zip(&self.rank) {
            *o = r as usize;
        }
        Ok(())
    }
}

/// Pulls a gradient on the barycentric weights back to the elevated
/// coordinates, holding the simplex (rank permutation) fixed:
/// `dL/dy_i = (dL/db_{d-r_i} - dL/db_{(d+1-r_i) mod (D+1)}) / (D+1)`.
pub(crate) fn bary_pullback(grad_w: &[f64], rank: &[usize], out: &mut [f64]) {
    let d1 = grad_w.len();
    let d = d1 - 1;
    for (o, &r) in out.iter_mut().zip(rank) {
        let k = d - r;
        *o = (grad_w[k] - grad_w[(k + 1) % d1]) / d1 as f64;
    }
}
