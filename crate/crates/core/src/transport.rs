//! Exact discrete optimal transport.
//!
//! Two solvers: a Hungarian assignment for equal-size uniform supports and a
//! successive-shortest-path min-cost flow for general weights. Both return the
//! optimal total cost for a dense cost matrix.

/// Minimum-cost perfect matching on an `n × n` cost matrix (row-major).
///
/// Returns `(total cost, assignment)` where `assignment[i]` is the column
/// matched to row `i`.
pub fn assignment(n: usize, cost: &[f64]) -> (f64, Vec<usize>) {
    assert_eq!(cost.len(), n * n);
    if n == 0 {
        return (0.0, Vec::new());
    }
    // Potentials formulation, 1-based with a virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
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
    let mut rows = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            rows[p[j] - 1] = j - 1;
        }
    }
    let total = rows
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    (total, rows)
}

/// Optimal cost of transporting `supply` (length `n`) onto `demand`
/// (length `m`) with the dense row-major `cost` matrix. Both marginals must
/// carry the same total mass.
pub fn transportation(supply: &[f64], demand: &[f64], cost: &[f64]) -> f64 {
    let n = supply.len();
    let m = demand.len();
    assert_eq!(cost.len(), n * m);
    let total: f64 = supply.iter().sum();
    let eps = 1e-14 * total.max(1.0);

    let mut remaining_supply = supply.to_vec();
    let mut remaining_demand = demand.to_vec();
    let mut flow = vec![0.0; n * m];
    // Node potentials: rows 0..n, columns n..n+m.
    let mut potential = vec![0.0; n + m];
    let inf = f64::INFINITY;

    let mut dist = vec![inf; n + m];
    let mut done = vec![false; n + m];
    // Predecessor node on the shortest-path tree.
    let mut pred = vec![usize::MAX; n + m];

    loop {
        if remaining_demand.iter().all(|&b| b <= eps) || remaining_supply.iter().all(|&a| a <= eps)
        {
            break;
        }
        dist.fill(inf);
        done.fill(false);
        pred.fill(usize::MAX);
        for i in 0..n {
            if remaining_supply[i] > eps {
                dist[i] = 0.0;
            }
        }
        // Dense Dijkstra on reduced costs.
        let target = loop {
            let mut best = usize::MAX;
            let mut best_d = inf;
            for v in 0..n + m {
                if !done[v] && dist[v] < best_d {
                    best_d = dist[v];
                    best = v;
                }
            }
            if best == usize::MAX {
                break usize::MAX;
            }
            done[best] = true;
            if best >= n && remaining_demand[best - n] > eps {
                break best;
            }
            if best < n {
                let i = best;
                for j in 0..m {
                    let v = n + j;
                    if done[v] {
                        continue;
                    }
                    let reduced = (cost[i * m + j] + potential[i] - potential[v]).max(0.0);
                    let nd = best_d + reduced;
                    if nd < dist[v] {
                        dist[v] = nd;
                        pred[v] = i;
                    }
                }
            } else {
                let j = best - n;
                for i in 0..n {
                    if done[i] || flow[i * m + j] <= eps {
                        continue;
                    }
                    let reduced = (-cost[i * m + j] + potential[best] - potential[i]).max(0.0);
                    let nd = best_d + reduced;
                    if nd < dist[i] {
                        dist[i] = nd;
                        pred[i] = best;
                    }
                }
            }
        };
        if target == usize::MAX {
            break;
        }
        let reach = dist[target];
        for v in 0..n + m {
            potential[v] += dist[v].min(reach);
        }
        // Bottleneck along the path.
        let mut push = remaining_demand[target - n];
        let mut v = target;
        while pred[v] != usize::MAX {
            let u = pred[v];
            if u >= n {
                // Backward edge column u -> row v cancels flow[v][u-n].
                push = push.min(flow[v * m + (u - n)]);
            }
            v = u;
        }
        push = push.min(remaining_supply[v]);
        let source = v;
        let mut v = target;
        while pred[v] != usize::MAX {
            let u = pred[v];
            if u < n {
                flow[u * m + (v - n)] += push;
            } else {
                flow[v * m + (u - n)] -= push;
            }
            v = u;
        }
        remaining_supply[source] -= push;
        remaining_demand[target - n] -= push;
    }
    flow.iter().zip(cost).map(|(f, c)| f.max(0.0) * c).sum()
}
