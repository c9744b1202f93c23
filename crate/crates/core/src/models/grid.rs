use rand::Rng;

use super::ModelError;

/// Tabulated density on a rectangular lattice, multilinear between nodes and zero
/// outside the lattice hull.
#[derive(Debug, Clone)]
pub struct GridDensity {
    axes: Vec<Vec<f64>>,
    /// Row-major, last axis fastest.
    values: Vec<f64>,
    mass_tolerance: f64,
    mass: f64,
    cell_cumulative: Vec<f64>,
}

pub const DEFAULT_MASS_TOLERANCE: f64 = 1e-6;

impl GridDensity {
    pub fn new(axes: Vec<Vec<f64>>, values: Vec<f64>, mass_tolerance: f64) -> Result<Self, ModelError> {
        if axes.is_empty() {
            return Err(ModelError::invalid("grid density needs at least one axis"));
        }
        for (j, axis) in axes.iter().enumerate() {
            if axis.len() < 2 {
                return Err(ModelError::invalid(format!("grid axis {j} needs at least two nodes")));
            }
            if axis.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(ModelError::invalid(format!("grid axis {j} must be strictly increasing")));
            }
            if axis[0] < 0.0 || !axis.iter().all(|v| v.is_finite()) {
                return Err(ModelError::invalid(format!("grid axis {j} must lie in [0, inf)")));
            }
        }
        let expected: usize = axes.iter().map(Vec::len).product();
        if values.len() != expected {
            return Err(ModelError::invalid(format!(
                "grid has {} values, lattice needs {expected}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ModelError::invalid("grid density values must be finite and nonnegative"));
        }
        if !(mass_tolerance.is_finite() && mass_tolerance > 0.0) {
            return Err(ModelError::invalid("mass tolerance must be positive"));
        }
        let mut law = Self {
            axes,
            values,
            mass_tolerance,
            mass: 0.0,
            cell_cumulative: Vec::new(),
        };
        law.mass = law.trapezoidal_mass();
        if (law.mass - 1.0).abs() > mass_tolerance {
            return Err(ModelError::invalid(format!(
                "grid density mass {} differs from 1 by more than {mass_tolerance}",
                law.mass
            )));
        }
        let mut acc = 0.0;
        let cells = law.cell_counts();
        let mut cumulative = Vec::with_capacity(cells.iter().product());
        for_each_index(&cells, |cell| {
            acc += law.cell_mass(cell);
            cumulative.push(acc);
        });
        law.cell_cumulative = cumulative;
        Ok(law)
    }

    /// Builds the lattice from `(x_1, .., x_n, value)` rows in any order.
    pub fn from_rows(rows: &[Vec<f64>], mass_tolerance: f64) -> Result<Self, ModelError> {
        let width = rows.first().map(Vec::len).unwrap_or(0);
        if width < 2 {
            return Err(ModelError::invalid("grid rows need at least one coordinate and a value"));
        }
        if rows.iter().any(|r| r.len() != width) {
            return Err(ModelError::invalid("grid rows have inconsistent widths"));
        }
        let n = width - 1;
        let mut axes: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut a: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                a.sort_by(f64::total_cmp);
                a.dedup();
                a
            })
            .collect();
        for a in &mut axes {
            a.shrink_to_fit();
        }
        let total: usize = axes.iter().map(Vec::len).product();
        if total != rows.len() {
            return Err(ModelError::invalid(format!(
                "grid rows ({}) do not form a complete {total}-node lattice",
                rows.len()
            )));
        }
        let strides = strides(&axes);
        let mut values = vec![f64::NAN; total];
        for r in rows {
            let mut flat = 0;
            for j in 0..n {
                let idx = axes[j].partition_point(|v| *v < r[j]);
                flat += idx * strides[j];
            }
            if !values[flat].is_nan() {
                return Err(ModelError::invalid("grid rows contain a duplicate node"));
            }
            values[flat] = r[n];
        }
        Self::new(axes, values, mass_tolerance)
    }

    pub fn dimension(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn mass_tolerance(&self) -> f64 {
        self.mass_tolerance
    }

    pub fn lower(&self, j: usize) -> f64 {
        self.axes[j][0]
    }

    pub fn upper(&self, j: usize) -> f64 {
        *self.axes[j].last().expect("axis has nodes")
    }

    fn cell_counts(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.len() - 1).collect()
    }

    fn node_value(&self, idx: &[usize]) -> f64 {
        let mut flat = 0;
        let mut stride = 1;
        for j in (0..idx.len()).rev() {
            flat += idx[j] * stride;
            stride *= self.axes[j].len();
        }
        self.values[flat]
    }

    /// Multilinear interpolant inside cell `cell` at `x`.
    fn interpolate_in_cell(&self, cell: &[usize], x: &[f64]) -> f64 {
        let n = self.dimension();
        let mut acc = 0.0;
        let mut corner = vec![0usize; n];
        for mask in 0..(1usize << n) {
            let mut weight = 1.0;
            for j in 0..n {
                let lo = self.axes[j][cell[j]];
                let hi = self.axes[j][cell[j] + 1];
                let t = (x[j] - lo) / (hi - lo);
                if mask & (1 << j) != 0 {
                    corner[j] = cell[j] + 1;
                    weight *= t;
                } else {
                    corner[j] = cell[j];
                    weight *= 1.0 - t;
                }
            }
            if weight != 0.0 {
                acc += weight * self.node_value(&corner);
            }
        }
        acc
    }

    fn cell_mass(&self, cell: &[usize]) -> f64 {
        let n = self.dimension();
        let mut corner = vec![0usize; n];
        let mut sum = 0.0;
        for mask in 0..(1usize << n) {
            for j in 0..n {
                corner[j] = cell[j] + usize::from(mask & (1 << j) != 0);
            }
            sum += self.node_value(&corner);
        }
        let volume: f64 = (0..n)
            .map(|j| self.axes[j][cell[j] + 1] - self.axes[j][cell[j]])
            .product();
        sum / (1usize << n) as f64 * volume
    }

    fn trapezoidal_mass(&self) -> f64 {
        let mut total = 0.0;
        for_each_index(&self.cell_counts(), |cell| total += self.cell_mass(cell));
        total
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let n = self.dimension();
        let mut cell = vec![0usize; n];
        for j in 0..n {
            let axis = &self.axes[j];
            if x[j] < axis[0] || x[j] > axis[axis.len() - 1] {
                return 0.0;
            }
            cell[j] = (axis.partition_point(|v| *v <= x[j]).max(1) - 1).min(axis.len() - 2);
        }
        self.interpolate_in_cell(&cell, x).max(0.0)
    }

    /// Exact integral of `weight(x) * density(x)` over `[lo, hi]` for weights of
    /// degree at most two in each coordinate (two-point Gauss rule per cell).
    pub fn integrate_box<F: Fn(&[f64]) -> f64>(&self, lo: &[f64], hi: &[f64], weight: F) -> f64 {
        let n = self.dimension();
        let mut first = vec![0usize; n];
        let mut counts = vec![0usize; n];
        for j in 0..n {
            let axis = &self.axes[j];
            let a = lo[j].max(axis[0]);
            let b = hi[j].min(axis[axis.len() - 1]);
            if !(b > a) {
                return 0.0;
            }
            let start = axis.partition_point(|v| *v <= a).max(1) - 1;
            let end = axis.partition_point(|v| *v < b).min(axis.len() - 1);
            first[j] = start.min(axis.len() - 2);
            counts[j] = end.saturating_sub(first[j]).max(1);
        }
        let g = 1.0 / 3f64.sqrt();
        let mut total = 0.0;
        let mut x = vec![0.0; n];
        let mut cell = vec![0usize; n];
        for_each_index(&counts, |offset| {
            let mut bounds = Vec::with_capacity(n);
            for j in 0..n {
                cell[j] = first[j] + offset[j];
                let a = self.axes[j][cell[j]].max(lo[j]);
                let b = self.axes[j][cell[j] + 1].min(hi[j]);
                if !(b > a) {
                    return;
                }
                bounds.push((a, b));
            }
            let mut cell_sum = 0.0;
            for mask in 0..(1usize << n) {
                let mut w = 1.0;
                for j in 0..n {
                    let (a, b) = bounds[j];
                    let half = 0.5 * (b - a);
                    let s = if mask & (1 << j) != 0 { g } else { -g };
                    x[j] = 0.5 * (a + b) + half * s;
                    w *= half;
                }
                cell_sum += w * weight(&x) * self.interpolate_in_cell(&cell, &x);
            }
            total += cell_sum;
        });
        total
    }

    fn full_box(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.dimension();
        ((0..n).map(|j| self.lower(j)).collect(), (0..n).map(|j| self.upper(j)).collect())
    }

    pub fn joint_cdf(&self, k: &[f64]) -> f64 {
        let (lo, _) = self.full_box();
        (self.integrate_box(&lo, k, |_| 1.0) / self.mass).clamp(0.0, 1.0)
    }

    pub fn marginal_cdf(&self, j: usize, k: f64) -> f64 {
        let (lo, mut hi) = self.full_box();
        hi[j] = hi[j].min(k);
        (self.integrate_box(&lo, &hi, |_| 1.0) / self.mass).clamp(0.0, 1.0)
    }

    pub fn marginal_survival(&self, j: usize, k: f64) -> f64 {
        1.0 - self.marginal_cdf(j, k)
    }

    pub fn marginal_call(&self, j: usize, k: f64) -> f64 {
        let (mut lo, hi) = self.full_box();
        lo[j] = lo[j].max(k);
        let above = self.integrate_box(&lo, &hi, |x| x[j] - k) / self.mass;
        if k < self.lower(j) {
            // the lattice has no mass below its first node
            return self.marginal_mean(j) - k;
        }
        above
    }

    pub fn marginal_mean(&self, j: usize) -> f64 {
        let (lo, hi) = self.full_box();
        self.integrate_box(&lo, &hi, |x| x[j]) / self.mass
    }

    pub fn marginal_quantile(&self, j: usize, q: f64) -> f64 {
        let mut a = self.lower(j);
        let mut b = self.upper(j);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if self.marginal_cdf(j, m) < q {
                a = m;
            } else {
                b = m;
            }
            if b - a <= 1e-14 * b.abs().max(1.0) {
                break;
            }
        }
        0.5 * (a + b)
    }

    pub(crate) fn sample_into<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let n = self.dimension();
        let total = *self.cell_cumulative.last().expect("grid has cells");
        let u: f64 = rng.random::<f64>() * total;
        let flat = self
            .cell_cumulative
            .partition_point(|c| *c <= u)
            .min(self.cell_cumulative.len() - 1);
        let counts = self.cell_counts();
        let mut cell = vec![0usize; n];
        let mut rem = flat;
        for j in (0..n).rev() {
            cell[j] = rem % counts[j];
            rem /= counts[j];
        }
        let mut corner = vec![0usize; n];
        let mut bound = 0.0_f64;
        for mask in 0..(1usize << n) {
            for j in 0..n {
                corner[j] = cell[j] + usize::from(mask & (1 << j) != 0);
            }
            bound = bound.max(self.node_value(&corner));
        }
        loop {
            for j in 0..n {
                let a = self.axes[j][cell[j]];
                let b = self.axes[j][cell[j] + 1];
                out[j] = a + (b - a) * rng.random::<f64>();
            }
            if rng.random::<f64>() * bound <= self.interpolate_in_cell(&cell, out) {
                return;
            }
        }
    }
}

fn strides(axes: &[Vec<f64>]) -> Vec<usize> {
    let n = axes.len();
    let mut s = vec![1usize; n];
    for j in (0..n.saturating_sub(1)).rev() {
        s[j] = s[j + 1] * axes[j + 1].len();
    }
    s
}

/// Visits every multi-index below `counts` in row-major order.
fn for_each_index<F: FnMut(&[usize])>(counts: &[usize], mut f: F) {
    if counts.contains(&0) {
        return;
    }
    let mut idx = vec![0usize; counts.len()];
    loop {
        f(&idx);
        let mut j = counts.len();
        loop {
            if j == 0 {
                return;
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] < counts[j] {
                break;
            }
            idx[j] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Density 2x on [0,1] x uniform on [0,1], tabulated on a 3x3 lattice.
    fn ramp() -> GridDensity {
        let axes = vec![vec![0.0, 0.5, 1.0], vec![0.0, 0.5, 1.0]];
        let mut values = Vec::new();
        for x in [0.0, 0.5, 1.0] {
            for _ in 0..3 {
                values.push(2.0 * x);
            }
        }
        GridDensity::new(axes, values, 1e-12).unwrap()
    }

    #[test]
    fn interpolates_between_nodes() {
        let g = ramp();
        assert!((g.density(&[0.25, 0.7]) - 0.5).abs() < 1e-15);
        assert_eq!(g.density(&[1.5, 0.5]), 0.0);
    }

    #[test]
    fn cdf_of_linear_ramp_is_exact() {
        let g = ramp();
        // F(k1, k2) = k1^2 * k2
        assert!((g.joint_cdf(&[0.6, 0.3]) - 0.36 * 0.3).abs() < 1e-14);
        assert!((g.marginal_survival(0, 0.5) - 0.75).abs() < 1e-14);
        // E[X1] = 2/3, E[(X1 - 0.5)^+] = int_0.5^1 (x - 0.5) 2x dx = 5/24
        assert!((g.marginal_mean(0) - 2.0 / 3.0).abs() < 1e-14);
        assert!((g.marginal_call(0, 0.5) - 5.0 / 24.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_unnormalised_grid() {
        let axes = vec![vec![0.0, 1.0]];
        assert!(GridDensity::new(axes, vec![2.0, 2.0], 1e-6).is_err());
    }

    #[test]
    fn from_rows_rejects_incomplete_lattice() {
        let rows = vec![vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]];
        assert!(GridDensity::from_rows(&rows, 1e-6).is_err());
    }

    #[test]
    fn from_rows_orders_nodes() {
        let rows = vec![vec![1.0, 1.0], vec![0.0, 1.0]];
        let g = GridDensity::from_rows(&rows, 1e-12).unwrap();
        assert_eq!(g.axes()[0], vec![0.0, 1.0]);
        assert!((g.marginal_quantile(0, 0.25) - 0.25).abs() < 1e-12);
    }
}
