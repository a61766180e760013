//! Symmetric positive definite solves with a reverse Cuthill-McKee ordering
//! and an envelope (skyline) Cholesky factorization.
//!
//! Strip meshes are long and thin, so after RCM the envelope is a band of
//! width comparable to the number of nodes across the strip.

use std::collections::VecDeque;

#[derive(Clone, Debug)]
pub struct Envelope {
    n: usize,
    /// original index -> permuted index
    perm: Vec<usize>,
    first: Vec<usize>,
    offset: Vec<usize>,
    data: Vec<f64>,
    factored: bool,
}

impl Envelope {
    /// Builds the pattern of an `n x n` symmetric matrix with the given off-diagonal couplings.
    pub fn new(n: usize, couplings: &[(usize, usize)]) -> Self {
        let mut adj = vec![Vec::new(); n];
        for &(i, j) in couplings {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        let order = reverse_cuthill_mckee(&adj);
        let mut perm = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            perm[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for (old, nbrs) in adj.iter().enumerate() {
            let i = perm[old];
            for &o in nbrs {
                let j = perm[o];
                if j < first[i] {
                    first[i] = j;
                }
            }
        }
        let mut offset = Vec::with_capacity(n + 1);
        let mut total = 0;
        for i in 0..n {
            offset.push(total);
            total += i - first[i] + 1;
        }
        offset.push(total);
        Self { n, perm, first, offset, data: vec![0.0; total], factored: false }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn stored_entries(&self) -> usize {
        self.data.len()
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|x| *x = 0.0);
        self.factored = false;
    }

    /// Adds `v` to entry `(i, j)`. Callers add each symmetric pair in both orders;
    /// only the lower triangle of the permuted matrix is kept.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (pi, pj) = (self.perm[i], self.perm[j]);
        if pj > pi {
            return;
        }
        debug_assert!(pj >= self.first[pi], "entry outside the declared pattern");
        let k = self.offset[pi] + (pj - self.first[pi]);
        self.data[k] += v;
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[self.offset[i] + (j - self.first[i])]
    }

    /// In-place Cholesky. Returns the (original) index of the first non-positive pivot on failure.
    pub fn factor(&mut self) -> Result<(), usize> {
        for i in 0..self.n {
            let fi = self.first[i];
            for j in fi..i {
                let fj = self.first[j];
                let k0 = fi.max(fj);
                let mut s = self.at(i, j);
                let ri = self.offset[i] - fi;
                let rj = self.offset[j] - fj;
                for k in k0..j {
                    s -= self.data[ri + k] * self.data[rj + k];
                }
                let d = self.at(j, j);
                self.data[ri + j] = s / d;
            }
            let ri = self.offset[i] - fi;
            let mut s = self.data[ri + i];
            for k in fi..i {
                s -= self.data[ri + k] * self.data[ri + k];
            }
            if !(s > 0.0) {
                let orig = self.perm.iter().position(|&p| p == i).unwrap_or(i);
                return Err(orig);
            }
            self.data[ri + i] = s.sqrt();
        }
        self.factored = true;
        Ok(())
    }

    /// Solves `A x = b` in place (original ordering). Requires a successful `factor`.
    pub fn solve(&self, b: &mut [f64]) {
        assert!(self.factored, "solve before factor");
        let mut y = vec![0.0; self.n];
        for (old, &new) in self.perm.iter().enumerate() {
            y[new] = b[old];
        }
        for i in 0..self.n {
            let fi = self.first[i];
            let ri = self.offset[i] - fi;
            let mut s = y[i];
            for k in fi..i {
                s -= self.data[ri + k] * y[k];
            }
            y[i] = s / self.data[ri + i];
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let ri = self.offset[i] - fi;
            y[i] /= self.data[ri + i];
            let yi = y[i];
            for k in fi..i {
                y[k] -= self.data[ri + k] * yi;
            }
        }
        for (old, &new) in self.perm.iter().enumerate() {
            b[old] = y[new];
        }
    }
}

fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let deg = |v: usize| adj[v].len();
    loop {
        let Some(seed) = (0..n).filter(|&v| !visited[v]).min_by_key(|&v| (deg(v), v)) else {
            break;
        };
        let start = pseudo_peripheral(adj, seed);
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (deg(w), w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

fn bfs_levels(adj: &[Vec<usize>], start: usize) -> Vec<usize> {
    let mut level = vec![usize::MAX; adj.len()];
    level[start] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if level[w] == usize::MAX {
                level[w] = level[v] + 1;
                queue.push_back(w);
            }
        }
    }
    level
}

fn pseudo_peripheral(adj: &[Vec<usize>], seed: usize) -> usize {
    let mut v = seed;
    let mut ecc = 0;
    for _ in 0..8 {
        let level = bfs_levels(adj, v);
        let far = level.iter().copied().filter(|&l| l != usize::MAX).max().unwrap_or(0);
        if far <= ecc && ecc > 0 {
            break;
        }
        ecc = far;
        let cand = (0..adj.len())
            .filter(|&w| level[w] == far)
            .min_by_key(|&w| (adj[w].len(), w))
            .unwrap_or(v);
        if cand == v {
            break;
        }
        v = cand;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_a_path_laplacian() {
        // tridiagonal [2 -1; -1 2 -1; ...] with a shuffled labelling
        let n = 50;
        let label: Vec<usize> = (0..n).map(|i| (i * 17) % n).collect();
        let couplings: Vec<(usize, usize)> = (0..n - 1).map(|i| (label[i], label[i + 1])).collect();
        let mut m = Envelope::new(n, &couplings);
        for i in 0..n {
            m.add(label[i], label[i], 2.0);
            if i + 1 < n {
                m.add(label[i], label[i + 1], -1.0);
                m.add(label[i + 1], label[i], -1.0);
            }
        }
        // the RCM ordering recovers the band
        assert!(m.stored_entries() <= 2 * n);
        m.factor().unwrap();
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut b = vec![0.0; n];
        for i in 0..n {
            let mut s = 2.0 * x_true[label[i]];
            if i > 0 {
                s -= x_true[label[i - 1]];
            }
            if i + 1 < n {
                s -= x_true[label[i + 1]];
            }
            b[label[i]] = s;
        }
        m.solve(&mut b);
        for i in 0..n {
            assert!((b[i] - x_true[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let mut m = Envelope::new(2, &[(0, 1)]);
        m.add(0, 0, 1.0);
        m.add(1, 1, 1.0);
        m.add(0, 1, 2.0);
        m.add(1, 0, 2.0);
        assert!(m.factor().is_err());
    }
}
