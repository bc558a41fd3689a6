use crate::error::{KanError, Result};

/// Indices of the points not dominated in (maximize accuracy, minimize
/// cost). A point is dropped iff another has accuracy >= and cost <= with
/// at least one strict; exact ties are all kept. Indices are returned by
/// ascending cost, then ascending index.
pub fn pareto_front(points: &[(f64, f64)]) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(KanError::EmptyInput("pareto front of no points".into()));
    }
    if points.iter().any(|(a, c)| a.is_nan() || c.is_nan()) {
        return Err(KanError::InvalidArgument("NaN accuracy or cost".into()));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        points[i]
            .1
            .total_cmp(&points[j].1)
            .then(points[j].0.total_cmp(&points[i].0))
            .then(i.cmp(&j))
    });
    let mut front = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut g = 0;
    while g < order.len() {
        let cost = points[order[g]].1;
        let end = g + order[g..].iter().take_while(|&&i| points[i].1 == cost).count();
        let top = points[order[g]].0;
        if top > best {
            front.extend(order[g..end].iter().copied().filter(|&i| points[i].0 == top));
            best = top;
        }
        g = end;
    }
    Ok(front)
}

/// Quadratic reference: keeps `p` iff no `q` dominates it.
pub fn pareto_front_brute_force(points: &[(f64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&p| {
            let (ap, cp) = points[p];
            !points
                .iter()
                .any(|&(aq, cq)| aq >= ap && cq <= cp && (aq > ap || cq < cp))
        })
        .collect()
}
