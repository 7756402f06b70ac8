//! Cell-centred two-point flux discretisation of `-∇·(κ∇p) = q` with no-flow
//! boundaries on a unit-spaced grid. Face transmissibilities are harmonic means
//! of the adjacent permeabilities. Cell `(0, 0)` is pinned to zero pressure,
//! which makes the operator SPD and absorbs any source imbalance.

use super::PermeabilityField;
use crate::{Error, Result, ScalarField2D};

const CG_TOL: f64 = 1e-10;
const RESIDUAL_BOUND: f64 = 1e-8;

/// Face-centred Darcy velocities.
///
/// `vx` is `rows x (cols + 1)`: entry `(r, c)` is the flux through the face on the
/// left of cell `(r, c)`, positive towards increasing column. `vy` is
/// `(rows + 1) x cols`, positive towards increasing row. Boundary faces are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub vx: ScalarField2D,
    pub vy: ScalarField2D,
}

impl VelocityField {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            vx: ScalarField2D::zeros(rows, cols + 1),
            vy: ScalarField2D::zeros(rows + 1, cols),
        }
    }

    /// Uniform interior velocity with closed boundaries.
    pub fn uniform(rows: usize, cols: usize, ux: f64, uy: f64) -> Self {
        Self {
            vx: ScalarField2D::from_fn(
                rows,
                cols + 1,
                |_, c| {
                    if c == 0 || c == cols {
                        0.0
                    } else {
                        ux
                    }
                },
            ),
            vy: ScalarField2D::from_fn(
                rows + 1,
                cols,
                |r, _| {
                    if r == 0 || r == rows {
                        0.0
                    } else {
                        uy
                    }
                },
            ),
        }
    }

    /// Dimensions of the cell grid these faces belong to.
    pub fn cell_dims(&self) -> (usize, usize) {
        (self.vx.rows(), self.vy.cols())
    }

    pub fn is_consistent(&self) -> bool {
        let (rows, cols) = self.cell_dims();
        self.vx.dims() == (rows, cols + 1) && self.vy.dims() == (rows + 1, cols)
    }

    /// Largest total outflow of any cell; `dt` times this must not exceed one.
    pub fn max_cell_outflow(&self) -> f64 {
        let (rows, cols) = self.cell_dims();
        let mut worst = 0.0f64;
        for r in 0..rows {
            for c in 0..cols {
                let out = self.vx.get(r, c + 1).max(0.0)
                    + (-self.vx.get(r, c)).max(0.0)
                    + self.vy.get(r + 1, c).max(0.0)
                    + (-self.vy.get(r, c)).max(0.0);
                worst = worst.max(out);
            }
        }
        worst
    }
}

#[derive(Debug, Clone)]
pub struct DarcySolution {
    pub pressure: ScalarField2D,
    pub velocity: VelocityField,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Injection of `rate` at `cell`, balanced by equal withdrawal along both lateral
/// edge columns.
pub fn injection_source(
    rows: usize,
    cols: usize,
    cell: (usize, usize),
    rate: f64,
) -> Result<ScalarField2D> {
    if cell.0 >= rows || cell.1 >= cols || cols < 2 {
        return Err(Error::InvalidParameter(format!(
            "injection cell {cell:?} outside {rows}x{cols} grid"
        )));
    }
    let mut q = ScalarField2D::zeros(rows, cols);
    let sink = rate / (2 * rows) as f64;
    for r in 0..rows {
        q.set(r, 0, -sink);
        q.set(r, cols - 1, -sink);
    }
    let (ir, ic) = cell;
    q.set(ir, ic, q.get(ir, ic) + rate);
    Ok(q)
}

#[inline]
fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Matrix-free pinned operator.
struct Operator {
    rows: usize,
    cols: usize,
    /// transmissibility of the face between (r, c) and (r, c + 1)
    tx: Vec<f64>,
    /// transmissibility of the face between (r, c) and (r + 1, c)
    ty: Vec<f64>,
    diag: Vec<f64>,
}

impl Operator {
    fn new(perm: &ScalarField2D) -> Self {
        let (rows, cols) = perm.dims();
        let mut tx = vec![0.0; rows * cols];
        let mut ty = vec![0.0; rows * cols];
        let mut diag = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    let t = harmonic(perm.get(r, c), perm.get(r, c + 1));
                    tx[i] = t;
                    diag[i] += t;
                    diag[i + 1] += t;
                }
                if r + 1 < rows {
                    let t = harmonic(perm.get(r, c), perm.get(r + 1, c));
                    ty[i] = t;
                    diag[i] += t;
                    diag[i + cols] += t;
                }
            }
        }
        // pinned reference cell: identity row, couplings eliminated symmetrically
        diag[0] = 1.0;
        Self {
            rows,
            cols,
            tx,
            ty,
            diag,
        }
    }

    fn apply(&self, p: &[f64], out: &mut [f64]) {
        let cols = self.cols;
        for (o, (d, v)) in out.iter_mut().zip(self.diag.iter().zip(p)) {
            *o = d * v;
        }
        // faces touching the pinned cell 0 contribute only to the diagonal
        for r in 0..self.rows {
            for c in 0..cols {
                let i = r * cols + c;
                if i == 0 {
                    continue;
                }
                if c + 1 < cols {
                    let t = self.tx[i];
                    out[i] -= t * p[i + 1];
                    out[i + 1] -= t * p[i];
                }
                if r + 1 < self.rows {
                    let t = self.ty[i];
                    out[i] -= t * p[i + cols];
                    out[i + cols] -= t * p[i];
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Jacobi-preconditioned conjugate gradient.
fn pcg(op: &Operator, b: &[f64], max_iter: usize) -> Result<(Vec<f64>, usize)> {
    let n = b.len();
    let b_norm = norm(b);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok((x, 0));
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&op.diag).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for it in 1..=max_iter {
        op.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let res = norm(&r) / b_norm;
        if !res.is_finite() {
            return Err(Error::SolverDiverged {
                iterations: it,
                residual: res,
            });
        }
        if res <= CG_TOL {
            return Ok((x, it));
        }
        for i in 0..n {
            z[i] = r[i] / op.diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let mut ax = vec![0.0; n];
    op.apply(&x, &mut ax);
    let residual = ax
        .iter()
        .zip(b)
        .map(|(a, bb)| (a - bb).powi(2))
        .sum::<f64>()
        .sqrt()
        / b_norm;
    Err(Error::SolverDiverged {
        iterations: max_iter,
        residual,
    })
}

/// Solves for pressure and face velocities `-κ∇p`.
pub fn solve_darcy(perm: &PermeabilityField, source: &ScalarField2D) -> Result<DarcySolution> {
    let k = perm.field();
    k.ensure_same_dims(source, "permeability vs source")?;
    source.ensure_finite("source")?;
    let (rows, cols) = k.dims();
    let op = Operator::new(k);

    let mut b = source.as_slice().to_vec();
    b[0] = 0.0;
    let (p, iterations) = pcg(&op, &b, 10 * rows * cols)?;

    let b_norm = norm(&b);
    let mut ap = vec![0.0; p.len()];
    op.apply(&p, &mut ap);
    let abs_res = ap
        .iter()
        .zip(&b)
        .map(|(a, bb)| (a - bb).powi(2))
        .sum::<f64>()
        .sqrt();
    let relative_residual = if b_norm > 0.0 {
        abs_res / b_norm
    } else {
        abs_res
    };
    if abs_res > RESIDUAL_BOUND * b_norm {
        return Err(Error::SolverDiverged {
            iterations,
            residual: relative_residual,
        });
    }

    let pressure = ScalarField2D::from_vec(rows, cols, p)?;
    let mut velocity = VelocityField::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                let u = -op.tx[i] * (pressure.get(r, c + 1) - pressure.get(r, c));
                velocity.vx.set(r, c + 1, u);
            }
            if r + 1 < rows {
                let u = -op.ty[i] * (pressure.get(r + 1, c) - pressure.get(r, c));
                velocity.vy.set(r + 1, c, u);
            }
        }
    }
    Ok(DarcySolution {
        pressure,
        velocity,
        iterations,
        relative_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{sample_permeability, GeneratorParams};
    use nalgebra::{DMatrix, DVector};

    fn homogeneous(rows: usize, cols: usize, k: f64) -> PermeabilityField {
        PermeabilityField::new(ScalarField2D::filled(rows, cols, k)).unwrap()
    }

    /// Unpinned weighted graph Laplacian, assembled densely.
    fn dense_laplacian(k: &ScalarField2D) -> DMatrix<f64> {
        let (rows, cols) = k.dims();
        let n = rows * cols;
        let mut a = DMatrix::zeros(n, n);
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                let mut nbrs = vec![];
                if c + 1 < cols {
                    nbrs.push((i + 1, k.get(r, c + 1)));
                }
                if r + 1 < rows {
                    nbrs.push((i + cols, k.get(r + 1, c)));
                }
                for (j, kj) in nbrs {
                    let t = 2.0 * k.get(r, c) * kj / (k.get(r, c) + kj);
                    a[(i, i)] += t;
                    a[(j, j)] += t;
                    a[(i, j)] -= t;
                    a[(j, i)] -= t;
                }
            }
        }
        a
    }

    #[test]
    fn zero_source_gives_zero_flow() {
        let perm = sample_permeability(4, 8, 8, &GeneratorParams::default()).unwrap();
        let sol = solve_darcy(&perm, &ScalarField2D::zeros(8, 8)).unwrap();
        assert!(sol.pressure.as_slice().iter().all(|&p| p == 0.0));
        assert_eq!(sol.velocity, VelocityField::zeros(8, 8));
    }

    #[test]
    fn matches_dense_direct_solve() {
        let perm = homogeneous(8, 8, 1.0);
        let mut q = ScalarField2D::zeros(8, 8);
        q.set(2, 3, 1.0);
        q.set(6, 5, -1.0);
        let sol = solve_darcy(&perm, &q).unwrap();

        // dense oracle: pinned system solved by LU
        let mut a = dense_laplacian(perm.field());
        for j in 0..64 {
            a[(0, j)] = 0.0;
            a[(j, 0)] = 0.0;
        }
        a[(0, 0)] = 1.0;
        let mut b = DVector::from_column_slice(q.as_slice());
        b[0] = 0.0;
        let p = a.lu().solve(&b).unwrap();
        for i in 0..64 {
            assert!((p[i] - sol.pressure.as_slice()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn balanced_source_satisfies_unpinned_equation() {
        let perm = sample_permeability(9, 8, 8, &GeneratorParams::default()).unwrap();
        let q = injection_source(8, 8, (5, 4), 1.0).unwrap();
        let sol = solve_darcy(&perm, &q).unwrap();
        let lap = dense_laplacian(perm.field());
        let lp = lap * DVector::from_column_slice(sol.pressure.as_slice());
        for i in 0..64 {
            assert!((lp[i] - q.as_slice()[i]).abs() < 1e-8, "cell {i}");
        }
        // divergence of the face velocities reproduces the source
        for r in 0..8 {
            for c in 0..8 {
                let v = &sol.velocity;
                let div = v.vx.get(r, c + 1) - v.vx.get(r, c) + v.vy.get(r + 1, c) - v.vy.get(r, c);
                assert!((div - q.get(r, c)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn doubling_permeability_halves_pressure() {
        let perm = sample_permeability(2, 8, 8, &GeneratorParams::default()).unwrap();
        let doubled = PermeabilityField::new(perm.field().map(|k| 2.0 * k)).unwrap();
        let q = injection_source(8, 8, (5, 4), 1.0).unwrap();
        let a = solve_darcy(&perm, &q).unwrap();
        let b = solve_darcy(&doubled, &q).unwrap();
        let scale = a
            .pressure
            .as_slice()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        for (pa, pb) in a.pressure.as_slice().iter().zip(b.pressure.as_slice()) {
            assert!((pa - 2.0 * pb).abs() < 1e-8 * scale);
        }
        assert!(a.velocity.vx.max_abs_diff(&b.velocity.vx) < 1e-8);
        assert!(a.velocity.vy.max_abs_diff(&b.velocity.vy) < 1e-8);
    }

    #[test]
    fn residual_bound_holds() {
        let perm = sample_permeability(5, 16, 12, &GeneratorParams::default()).unwrap();
        let q = injection_source(16, 12, (12, 6), 1.0).unwrap();
        let sol = solve_darcy(&perm, &q).unwrap();
        assert!(sol.relative_residual <= 1e-8);
    }

    #[test]
    fn rejects_non_positive_permeability() {
        let mut k = ScalarField2D::filled(4, 4, 1.0);
        k.set(1, 2, 0.0);
        assert!(matches!(
            PermeabilityField::new(k),
            Err(Error::NonPositivePermeability { row: 1, col: 2 })
        ));
    }
}
