//! Block-sparse Cholesky for symmetric positive definite systems with 6x6
//! blocks, using a greedy minimum-degree elimination order.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DVector, Matrix6, Vector6};

/// Symmetric block matrix; only blocks with `row >= col` are stored.
#[derive(Debug, Clone, Default)]
pub struct BlockMatrix {
    n: usize,
    /// `cols[c][r]` holds block `(r, c)`, `r >= c`.
    cols: Vec<BTreeMap<usize, Matrix6<f64>>>,
}

impl BlockMatrix {
    pub fn new(n: usize) -> Self {
        Self { n, cols: vec![BTreeMap::new(); n] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Adds `m` to block `(row, col)` and, implicitly, its transpose.
    pub fn add(&mut self, row: usize, col: usize, m: &Matrix6<f64>) {
        if row >= col {
            *self.cols[col].entry(row).or_insert_with(Matrix6::zeros) += m;
        } else {
            *self.cols[row].entry(col).or_insert_with(Matrix6::zeros) += m.transpose();
        }
    }

    pub fn block(&self, row: usize, col: usize) -> Option<Matrix6<f64>> {
        if row >= col {
            self.cols[col].get(&row).copied()
        } else {
            self.cols[row].get(&col).map(|m| m.transpose())
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        let mut d = DVector::zeros(6 * self.n);
        for c in 0..self.n {
            if let Some(b) = self.cols[c].get(&c) {
                for k in 0..6 {
                    d[6 * c + k] = b[(k, k)];
                }
            }
        }
        d
    }

    /// Applies `f(row, col, block)` to every stored block.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(usize, usize, &mut Matrix6<f64>)) {
        for (c, col) in self.cols.iter_mut().enumerate() {
            for (&r, b) in col.iter_mut() {
                f(r, c, b);
            }
        }
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(6 * self.n, 6 * self.n);
        for (c, col) in self.cols.iter().enumerate() {
            for (&r, b) in col {
                m.fixed_view_mut::<6, 6>(6 * r, 6 * c).copy_from(b);
                if r != c {
                    m.fixed_view_mut::<6, 6>(6 * c, 6 * r).copy_from(&b.transpose());
                }
            }
        }
        m
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(x.len());
        for (c, col) in self.cols.iter().enumerate() {
            let xc: Vector6<f64> = x.fixed_rows::<6>(6 * c).into();
            for (&r, b) in col {
                let xr: Vector6<f64> = x.fixed_rows::<6>(6 * r).into();
                let yr = b * xc;
                y.fixed_rows_mut::<6>(6 * r).add_assign(&yr);
                if r != c {
                    let yc = b.transpose() * xr;
                    y.fixed_rows_mut::<6>(6 * c).add_assign(&yc);
                }
            }
        }
        y
    }

    fn adjacency(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.n];
        for (c, col) in self.cols.iter().enumerate() {
            for &r in col.keys() {
                if r != c {
                    adj[r].insert(c);
                    adj[c].insert(r);
                }
            }
        }
        adj
    }
}

trait AddAssignView {
    fn add_assign(&mut self, v: &Vector6<f64>);
}

impl<S: nalgebra::StorageMut<f64, nalgebra::U6, nalgebra::U1>> AddAssignView for nalgebra::Matrix<f64, nalgebra::U6, nalgebra::U1, S> {
    fn add_assign(&mut self, v: &Vector6<f64>) {
        for k in 0..6 {
            self[k] += v[k];
        }
    }
}

/// Greedy minimum-degree elimination order (ties to the lowest index).
pub fn min_degree_order(adjacency: &[BTreeSet<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let mut adj: Vec<BTreeSet<usize>> = adjacency.to_vec();
    let mut alive = vec![true; n];
    let mut by_degree: BTreeSet<(usize, usize)> = (0..n).map(|v| (adj[v].len(), v)).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(&(d, v)) = by_degree.iter().next() {
        by_degree.remove(&(d, v));
        alive[v] = false;
        order.push(v);
        let nbrs: Vec<usize> = adj[v].iter().copied().filter(|&u| alive[u]).collect();
        for &u in &nbrs {
            by_degree.remove(&(adj[u].len(), u));
            adj[u].remove(&v);
        }
        for (a, &u) in nbrs.iter().enumerate() {
            for &w in &nbrs[a + 1..] {
                adj[u].insert(w);
                adj[w].insert(u);
            }
        }
        for &u in &nbrs {
            by_degree.insert((adj[u].len(), u));
        }
        adj[v].clear();
    }
    order
}

/// `L L^T` factor of a permuted block matrix.
#[derive(Debug, Clone)]
pub struct BlockCholesky {
    /// `order[k]` is the original block eliminated k-th.
    order: Vec<usize>,
    /// Lower-triangular diagonal factors, by elimination position.
    diag: Vec<Matrix6<f64>>,
    /// Off-diagonal blocks `L[(r, k)]`, `r > k`, by elimination position.
    below: Vec<Vec<(usize, Matrix6<f64>)>>,
}

impl BlockCholesky {
    /// Factors `a`; `None` if it is not numerically positive definite.
    pub fn factor(a: &BlockMatrix) -> Option<BlockCholesky> {
        let n = a.size();
        let order = min_degree_order(&a.adjacency());
        let mut pos = vec![0usize; n];
        for (k, &v) in order.iter().enumerate() {
            pos[v] = k;
        }
        // Permuted lower part, column-major by elimination position.
        let mut work: Vec<BTreeMap<usize, Matrix6<f64>>> = vec![BTreeMap::new(); n];
        for (c, col) in a.cols.iter().enumerate() {
            for (&r, b) in col {
                let (pr, pc) = (pos[r], pos[c]);
                if pr >= pc {
                    *work[pc].entry(pr).or_insert_with(Matrix6::zeros) += b;
                } else {
                    *work[pr].entry(pc).or_insert_with(Matrix6::zeros) += b.transpose();
                }
            }
        }
        let mut diag = Vec::with_capacity(n);
        let mut below = Vec::with_capacity(n);
        for k in 0..n {
            let mut col = std::mem::take(&mut work[k]);
            let akk = col.remove(&k).unwrap_or_else(Matrix6::zeros);
            let akk = 0.5 * (akk + akk.transpose());
            let chol = akk.cholesky()?;
            let lkk = chol.l();
            let lkk_inv_t = lkk.try_inverse()?.transpose();
            let lcol: Vec<(usize, Matrix6<f64>)> = col.into_iter().map(|(r, m)| (r, m * lkk_inv_t)).collect();
            for (x, (ri, li)) in lcol.iter().enumerate() {
                for (rj, lj) in &lcol[..=x] {
                    // ri >= rj since lcol is sorted by row.
                    let upd = li * lj.transpose();
                    *work[*rj].entry(*ri).or_insert_with(Matrix6::zeros) -= upd;
                }
            }
            diag.push(lkk);
            below.push(lcol);
        }
        Some(BlockCholesky { order, diag, below })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.order.len();
        let mut y: Vec<Vector6<f64>> = self.order.iter().map(|&v| b.fixed_rows::<6>(6 * v).into()).collect();
        for k in 0..n {
            let yk = self.diag[k].solve_lower_triangular(&y[k]).expect("nonsingular diagonal");
            for (r, l) in &self.below[k] {
                y[*r] -= l * yk;
            }
            y[k] = yk;
        }
        for k in (0..n).rev() {
            let mut rhs = y[k];
            for (r, l) in &self.below[k] {
                rhs -= l.transpose() * y[*r];
            }
            y[k] = self.diag[k].transpose().solve_upper_triangular(&rhs).expect("nonsingular diagonal");
        }
        let mut x = DVector::zeros(6 * n);
        for (k, &v) in self.order.iter().enumerate() {
            x.fixed_rows_mut::<6>(6 * v).copy_from(&y[k]);
        }
        x
    }

    /// Number of stored off-diagonal blocks in the factor.
    pub fn fill(&self) -> usize {
        self.below.iter().map(|c| c.len()).sum()
    }
}
