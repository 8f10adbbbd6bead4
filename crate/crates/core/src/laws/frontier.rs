use super::Point;

/// `q` dominates `p` when it is no worse on both axes and strictly better on
/// at least one. Identical points do not dominate each other.
pub fn is_dominated(p: &Point, by: &Point) -> bool {
    (by.compute <= p.compute && by.error < p.error) || (by.compute < p.compute && by.error <= p.error)
}

/// Indices of non-dominated points, sorted by compute then error (input
/// order breaks exact ties).
pub fn pareto_indices(points: &[Point]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        let (p, q) = (&points[i], &points[j]);
        p.compute.total_cmp(&q.compute).then(p.error.total_cmp(&q.error)).then(i.cmp(&j))
    });
    let mut keep = Vec::new();
    // Best error among strictly smaller compute values.
    let mut best_before = f64::INFINITY;
    let mut k = 0;
    while k < order.len() {
        let c = points[order[k]].compute;
        let group_min = points[order[k]].error;
        let mut end = k;
        while end < order.len() && points[order[end]].compute == c {
            end += 1;
        }
        if group_min < best_before {
            keep.extend(order[k..end].iter().copied().filter(|&i| points[i].error == group_min));
        }
        best_before = best_before.min(group_min);
        k = end;
    }
    keep
}

pub fn pareto_frontier(points: &[Point]) -> Vec<Point> {
    pareto_indices(points).into_iter().map(|i| points[i]).collect()
}
