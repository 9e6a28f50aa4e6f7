//! Minimum-cost assignment by shortest augmenting paths with potentials,
//! O(n^3) in the matrix side.

use crate::error::{Error, Result};
use crate::mat::Matrix;

/// Returns (row -> column mapping, total cost) minimizing the sum of
/// `cost[row][col]` over a perfect matching. Requires rows <= cols.
pub fn min_cost_assignment(cost: &Matrix) -> Result<(Vec<usize>, f64)> {
    let n = cost.rows();
    let m = cost.cols();
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    if n > m {
        return Err(Error::shape("assignment needs rows <= cols"));
    }
    // 1-indexed arrays with a virtual column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1]; // row matched to column j
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut mapping = vec![usize::MAX; n];
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] != 0 {
            mapping[p[j] - 1] = j - 1;
            total += cost.at(p[j] - 1, j - 1);
        }
    }
    Ok((mapping, total))
}
