//! Minimal CSR storage for the sparse operators assembled from meshes.

/// Square sparse matrix in compressed-sparse-row form.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; n + 1];
        for &(r, _, _) in triplets {
            counts[r + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut entries: Vec<(usize, f64)> = vec![(0, 0.0); triplets.len()];
        let mut cursor = counts.clone();
        for &(r, c, v) in triplets {
            entries[cursor[r]] = (c, v);
            cursor[r] += 1;
        }

        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..n {
            let row = &mut entries[counts[r]..counts[r + 1]];
            row.sort_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < row.len() {
                let col = row[i].0;
                let mut sum = 0.0;
                while i < row.len() && row[i].0 == col {
                    sum += row[i].1;
                    i += 1;
                }
                indices.push(col);
                values.push(sum);
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            n,
            indptr,
            indices,
            values,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// (column, value) pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        self.indices[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn spmv(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        for r in 0..self.n {
            let mut acc = 0.0;
            for (c, v) in self.row(r) {
                acc += v * x[c];
            }
            y[r] = acc;
        }
    }

    /// Maximum absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        (0..self.n)
            .map(|r| self.row(r).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn diag(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                if c == r {
                    d[r] = v;
                }
            }
        }
        d
    }

    /// Largest absolute asymmetry |A_ij - A_ji|.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                let mut vt = 0.0;
                for (c2, v2) in self.row(c) {
                    if c2 == r {
                        vt = v2;
                        break;
                    }
                }
                worst = worst.max((v - vt).abs());
            }
        }
        worst
    }

    /// D^{-1/2} A D^{-1/2} for a positive diagonal `d`.
    pub fn diag_scale_sym(&self, d: &[f64]) -> CsrMatrix {
        assert_eq!(d.len(), self.n);
        let inv_sqrt: Vec<f64> = d.iter().map(|&x| 1.0 / x.sqrt()).collect();
        let mut out = self.clone();
        for r in 0..self.n {
            let lo = out.indptr[r];
            let hi = out.indptr[r + 1];
            for idx in lo..hi {
                let c = out.indices[idx];
                out.values[idx] *= inv_sqrt[r] * inv_sqrt[c];
            }
        }
        out
    }

    pub fn to_dense(&self) -> crate::linalg::Mat {
        let mut m = crate::linalg::Mat::zeros(self.n, self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                m.set(r, c, v);
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates() {
        let m = CsrMatrix::from_triplets(2, &[(0, 1, 1.0), (0, 1, 2.0), (1, 0, 3.0)]);
        assert_eq!(m.nnz(), 2);
        let row: Vec<_> = m.row(0).collect();
        assert_eq!(row, vec![(1, 3.0)]);
    }

    #[test]
    fn spmv_matches_dense() {
        let m = CsrMatrix::from_triplets(
            3,
            &[(0, 0, 2.0), (0, 2, -1.0), (1, 1, 1.0), (2, 0, -1.0), (2, 2, 2.0)],
        );
        let x = [1.0, 2.0, 3.0];
        let mut y = [0.0; 3];
        m.spmv(&x, &mut y);
        assert_eq!(y, [-1.0, 2.0, 5.0]);
    }
}
