/// Tridiagonal matrix: row `i` reads `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1]`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Tridiag {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiag {
    pub fn identity(n: usize) -> Self {
        Tridiag { lower: vec![0.0; n], diag: vec![1.0; n], upper: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn transpose(&self) -> Self {
        let n = self.len();
        let mut lower = vec![0.0; n];
        let mut upper = vec![0.0; n];
        if n > 1 {
            lower[1..].copy_from_slice(&self.upper[..n - 1]);
            upper[..n - 1].copy_from_slice(&self.lower[1..]);
        }
        Tridiag { lower, diag: self.diag.clone(), upper }
    }

    #[cfg(test)]
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut v = self.diag[i] * x[i];
                if i > 0 {
                    v += self.lower[i] * x[i - 1];
                }
                if i + 1 < n {
                    v += self.upper[i] * x[i + 1];
                }
                v
            })
            .collect()
    }

    /// Thomas algorithm on a strided line of `rhs`, overwritten with the
    /// solution. `scratch` must hold at least `len()` entries.
    pub fn solve_strided(&self, rhs: &mut [f64], start: usize, stride: usize, scratch: &mut [f64]) {
        let n = self.len();
        let at = |i: usize| start + i * stride;
        let mut beta = self.diag[0];
        rhs[at(0)] /= beta;
        for i in 1..n {
            scratch[i] = self.upper[i - 1] / beta;
            beta = self.diag[i] - self.lower[i] * scratch[i];
            rhs[at(i)] = (rhs[at(i)] - self.lower[i] * rhs[at(i - 1)]) / beta;
        }
        for i in (0..n - 1).rev() {
            rhs[at(i)] -= scratch[i + 1] * rhs[at(i + 1)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tridiag {
        Tridiag {
            lower: vec![0.0, -0.3, -1.0, -0.2],
            diag: vec![2.0, 3.0, 2.5, 1.7],
            upper: vec![-0.5, -0.7, -0.1, 0.0],
        }
    }

    #[test]
    fn solves_and_transposes() {
        let m = sample();
        let x = vec![1.0, -2.0, 0.5, 3.0];
        let mut b = m.mul(&x);
        let mut scratch = vec![0.0; 4];
        m.solve_strided(&mut b, 0, 1, &mut scratch);
        for (a, e) in b.iter().zip(&x) {
            assert!((a - e).abs() < 1e-14);
        }
        // <M x, y> = <x, M^T y>
        let y = vec![0.3, 0.1, -0.9, 2.0];
        let lhs: f64 = m.mul(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(m.transpose().mul(&y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn strided_solve_matches_contiguous() {
        let m = sample();
        let mut packed = vec![0.0; 12];
        let rhs = [1.0, 2.0, 3.0, 4.0];
        for (i, r) in rhs.iter().enumerate() {
            packed[1 + 3 * i] = *r;
        }
        let mut flat = rhs.to_vec();
        let mut s = vec![0.0; 4];
        m.solve_strided(&mut packed, 1, 3, &mut s);
        m.solve_strided(&mut flat, 0, 1, &mut s);
        for i in 0..4 {
            assert_eq!(packed[1 + 3 * i], flat[i]);
        }
    }
}
