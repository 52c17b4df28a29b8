//! Small dense linear algebra for the 6x6 moment systems.

pub(crate) type Mat6 = [[f64; 6]; 6];

/// LU factorization with partial pivoting of a square 6x6 matrix.
pub(crate) struct Lu6 {
    lu: Mat6,
    perm: [usize; 6],
}

impl Lu6 {
    /// Returns `None` when a pivot is exactly zero.
    pub fn factor(a: &Mat6) -> Option<Self> {
        let mut lu = *a;
        let mut perm = [0, 1, 2, 3, 4, 5];
        for k in 0..6 {
            let p = (k..6)
                .max_by(|&i, &j| lu[i][k].abs().total_cmp(&lu[j][k].abs()))
                .unwrap();
            if lu[p][k] == 0.0 {
                return None;
            }
            lu.swap(k, p);
            perm.swap(k, p);
            for i in k + 1..6 {
                let f = lu[i][k] / lu[k][k];
                lu[i][k] = f;
                for j in k + 1..6 {
                    lu[i][j] -= f * lu[k][j];
                }
            }
        }
        Some(Lu6 { lu, perm })
    }

    pub fn solve(&self, b: &[f64; 6]) -> [f64; 6] {
        let mut x = [0.0; 6];
        for i in 0..6 {
            x[i] = b[self.perm[i]];
        }
        for i in 0..6 {
            for j in 0..i {
                x[i] -= self.lu[i][j] * x[j];
            }
        }
        for i in (0..6).rev() {
            for j in i + 1..6 {
                x[i] -= self.lu[i][j] * x[j];
            }
            x[i] /= self.lu[i][i];
        }
        x
    }

    /// Solves `A X = B` column by column.
    pub fn solve_mat(&self, b: &Mat6) -> Mat6 {
        let mut x = [[0.0; 6]; 6];
        for c in 0..6 {
            let col = std::array::from_fn(|r| b[r][c]);
            let sol = self.solve(&col);
            for r in 0..6 {
                x[r][c] = sol[r];
            }
        }
        x
    }
}

pub(crate) fn identity6() -> Mat6 {
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 }))
}

pub(crate) fn norm1(a: &Mat6) -> f64 {
    (0..6)
        .map(|c| (0..6).map(|r| a[r][c].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub(crate) fn matmul(a: &Mat6, b: &Mat6) -> Mat6 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..6).map(|k| a[i][k] * b[k][j]).sum()))
}
