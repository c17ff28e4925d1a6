//! Small box-constrained Levenberg-Marquardt for few-parameter fits.

#[derive(Clone, Debug)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    /// Sum of squared residuals at `params`.
    pub sse: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    fn clamp(&self, p: &mut [f64]) {
        for (i, v) in p.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }
}

/// Solves a linear system in place by Gaussian elimination with partial
/// pivoting. Returns None when singular.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Minimizes the sum of squares of `residuals(p)`. `jacobian(p)` returns one
/// row of partial derivatives per residual.
pub fn minimize<R, J>(start: &[f64], bounds: &Bounds, max_iter: usize, residuals: R, jacobian: J) -> LmOutcome
where
    R: Fn(&[f64]) -> Vec<f64>,
    J: Fn(&[f64]) -> Vec<Vec<f64>>,
{
    let n = start.len();
    let mut p = start.to_vec();
    bounds.clamp(&mut p);
    let sse = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();
    let mut r = residuals(&p);
    let mut cost = sse(&r);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut it = 0;
    while it < max_iter {
        it += 1;
        if cost == 0.0 {
            converged = true;
            break;
        }
        let jac = jacobian(&p);
        let mut jtj = vec![vec![0.0; n]; n];
        let mut jtr = vec![0.0; n];
        for (row, ri) in jac.iter().zip(&r) {
            for a in 0..n {
                jtr[a] += row[a] * ri;
                for b in 0..n {
                    jtj[a][b] += row[a] * row[b];
                }
            }
        }
        let grad_norm = jtr.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_norm < 1e-15 * (1.0 + cost) {
            converged = true;
            break;
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for d in 0..n {
                a[d][d] += lambda * jtj[d][d].max(1e-12);
            }
            let neg: Vec<f64> = jtr.iter().map(|g| -g).collect();
            let Some(step) = solve(a, neg) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial: Vec<f64> = p.iter().zip(&step).map(|(x, s)| x + s).collect();
            bounds.clamp(&mut trial);
            let tr = residuals(&trial);
            let tc = sse(&tr);
            if tc.is_finite() && tc <= cost {
                let rel_step = p
                    .iter()
                    .zip(&trial)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs() / (a.abs() + 1e-12)));
                let rel_cost = (cost - tc) / cost.max(1e-300);
                p = trial;
                r = tr;
                cost = tc;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel_step < 1e-12 || rel_cost < 1e-15 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No downhill step at any damping: a (possibly bounded) minimum.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    LmOutcome {
        params: p,
        sse: cost,
        iterations: it,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_a_line_exactly() {
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 3.0).collect();
        let b = Bounds {
            lower: vec![f64::NEG_INFINITY; 2],
            upper: vec![f64::INFINITY; 2],
        };
        let out = minimize(
            &[0.0, 0.0],
            &b,
            100,
            |p| xs.iter().zip(&ys).map(|(x, y)| p[0] * x + p[1] - y).collect(),
            |_| xs.iter().map(|x| vec![*x, 1.0]).collect(),
        );
        assert!(out.converged);
        assert!((out.params[0] - 2.0).abs() < 1e-9 && (out.params[1] + 3.0).abs() < 1e-9);
    }

    #[test]
    fn respects_bounds() {
        let b = Bounds {
            lower: vec![1.0],
            upper: vec![5.0],
        };
        let out = minimize(&[3.0], &b, 100, |p| vec![p[0] + 2.0], |_| vec![vec![1.0]]);
        assert_eq!(out.params, vec![1.0]);
        assert!(out.converged);
    }
}
