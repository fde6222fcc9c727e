//! Exact square assignment by successive shortest augmenting paths.
//!
//! Costs are read through a callback so large Euclidean instances never
//! materialize the `n × n` matrix. The solver maintains dual potentials
//! `u`, `v` with `c(i, j) − u[i] − v[j] ≥ 0` and equality on assigned pairs;
//! [`Assignment::certificate_residual`] checks both conditions afterwards.

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `row_to_col[i]` is the column assigned to row `i`.
    pub row_to_col: Vec<usize>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Sum of assigned costs in row order.
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum LapError {
    #[error("cost {value} at ({row}, {col}) is not finite")]
    NonFiniteCost { row: usize, col: usize, value: f64 },
    #[error("no augmenting path for row {0}")]
    Infeasible(usize),
}

const NONE: usize = usize::MAX;

/// Minimum-cost perfect matching of an `n × n` cost function.
pub fn solve(n: usize, cost: impl Fn(usize, usize) -> f64) -> Result<Assignment, LapError> {
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut col4row = vec![NONE; n];
    let mut row4col = vec![NONE; n];
    let mut path = vec![NONE; n];
    let mut shortest = vec![f64::INFINITY; n];
    let mut scanned_rows = vec![false; n];
    let mut scanned_cols = vec![false; n];
    let mut remaining: Vec<usize> = Vec::with_capacity(n);
    let mut visited_rows: Vec<usize> = Vec::with_capacity(n);

    for cur_row in 0..n {
        shortest.fill(f64::INFINITY);
        scanned_rows.fill(false);
        scanned_cols.fill(false);
        remaining.clear();
        // reversed so that ties resolve towards the lowest column index
        remaining.extend((0..n).rev());
        visited_rows.clear();

        let mut min_val = 0.0;
        let mut i = cur_row;
        let sink = loop {
            scanned_rows[i] = true;
            visited_rows.push(i);
            let mut lowest = f64::INFINITY;
            let mut pick = NONE;
            for (k, &j) in remaining.iter().enumerate() {
                let c = cost(i, j);
                if !c.is_finite() {
                    return Err(LapError::NonFiniteCost {
                        row: i,
                        col: j,
                        value: c,
                    });
                }
                let r = min_val + c - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == NONE) {
                    lowest = shortest[j];
                    pick = k;
                }
            }
            if pick == NONE || !lowest.is_finite() {
                return Err(LapError::Infeasible(cur_row));
            }
            min_val = lowest;
            let j = remaining.swap_remove(pick);
            scanned_cols[j] = true;
            if row4col[j] == NONE {
                break j;
            }
            i = row4col[j];
        };

        u[cur_row] += min_val;
        for &r in &visited_rows {
            if r != cur_row {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for j in 0..n {
            if scanned_cols[j] {
                v[j] -= min_val - shortest[j];
            }
        }

        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur_row {
                break;
            }
        }
    }

    let total = (0..n).map(|i| cost(i, col4row[i])).sum();
    Ok(Assignment {
        row_to_col: col4row,
        u,
        v,
        cost: total,
    })
}

impl Assignment {
    /// Largest violation of dual feasibility (`c − u − v ≥ 0` everywhere) or
    /// complementary slackness (`c − u − v = 0` on assigned pairs).
    pub fn certificate_residual(&self, cost: impl Fn(usize, usize) -> f64) -> f64 {
        let n = self.row_to_col.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let reduced = cost(i, j) - self.u[i] - self.v[j];
                worst = worst.max(-reduced);
                if self.row_to_col[i] == j {
                    worst = worst.max(reduced.abs());
                }
            }
        }
        worst
    }
}
