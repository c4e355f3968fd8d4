//! Order and distance losses over a table of slice scores.
//!
//! For row `i` with scores `S(i,0..m)` taken from equidistant slices in
//! ascending order:
//!
//! * order loss `−Σ_j ln h(S(i,j+1) − S(i,j))`, `h` the logistic function;
//! * distance loss `Σ_j f(Δ(i,j+1) − Δ(i,j))` over consecutive gaps
//!   `Δ(i,j) = S(i,j) − S(i,j−1)`, `f` the smooth L1 function.
//!
//! Both are summed, not averaged, over rows and positions.

use crate::diffcore::{log_sigmoid, sigmoid, smooth_l1, smooth_l1_grad, Graph, NodeId};
use crate::error::{Result, UbrError};

/// `g × m` scores, row-major: `scores[i * m + j] = S(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    g: usize,
    m: usize,
    scores: Vec<f64>,
}

impl ScoreTable {
    pub fn new(g: usize, m: usize, scores: Vec<f64>) -> Result<Self> {
        if g == 0 || m == 0 {
            return Err(UbrError::InvalidArgument(format!("score table must be non-empty, got {g}×{m}")));
        }
        if scores.len() != g * m {
            return Err(UbrError::InvalidArgument(format!(
                "{g}×{m} score table needs {} scores, got {}",
                g * m,
                scores.len()
            )));
        }
        Ok(ScoreTable { g, m, scores })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(UbrError::InvalidArgument("ragged score rows".into()));
        }
        Self::new(rows.len(), m, rows.concat())
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.m..(i + 1) * self.m]
    }

    fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.scores.chunks_exact(self.m)
    }
}

/// Loss value with its gradient over the score table (`g × m`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub order: f64,
    /// Distance-loss contribution to `total` (after weighting).
    pub dist: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

pub fn order_loss(table: &ScoreTable) -> Result<LossTerm> {
    if table.m < 2 {
        return Err(UbrError::InvalidArgument(format!("order loss needs m ≥ 2, got {}", table.m)));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; table.scores.len()];
    for (row, g) in table.rows().zip(grad.chunks_exact_mut(table.m)) {
        for j in 0..table.m - 1 {
            let gap = row[j + 1] - row[j];
            value -= log_sigmoid(gap);
            // d/dgap of −ln h(gap) is −h(−gap)
            let d = -sigmoid(-gap);
            g[j + 1] += d;
            g[j] -= d;
        }
    }
    Ok(LossTerm { value, grad })
}

pub fn distance_loss(table: &ScoreTable) -> Result<LossTerm> {
    if table.m < 3 {
        return Err(UbrError::InvalidArgument(format!("distance loss needs m ≥ 3, got {}", table.m)));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; table.scores.len()];
    for (row, g) in table.rows().zip(grad.chunks_exact_mut(table.m)) {
        for j in 1..table.m - 1 {
            let bend = (row[j + 1] - row[j]) - (row[j] - row[j - 1]);
            value += smooth_l1(bend);
            let d = smooth_l1_grad(bend);
            g[j + 1] += d;
            g[j] -= 2.0 * d;
            g[j - 1] += d;
        }
    }
    Ok(LossTerm { value, grad })
}

/// `order + dist`. With `m == 2` the distance term is defined as zero.
pub fn total_loss(table: &ScoreTable) -> Result<LossReport> {
    weighted_total_loss(table, 1.0)
}

/// `order + weight·dist`; `weight = 0` disables the distance term.
pub fn weighted_total_loss(table: &ScoreTable, dist_weight: f64) -> Result<LossReport> {
    let order = order_loss(table)?;
    let (dist, grad) = if table.m >= 3 && dist_weight != 0.0 {
        let d = distance_loss(table)?;
        let grad = order
            .grad
            .iter()
            .zip(&d.grad)
            .map(|(o, d)| o + dist_weight * d)
            .collect();
        (dist_weight * d.value, grad)
    } else {
        (0.0, order.grad.clone())
    };
    Ok(LossReport {
        order: order.value,
        dist,
        total: order.value + dist,
        grad,
    })
}

/// Graph construction of the same losses, for gradient checking against the
/// analytic path. `scores` must be a `[g, m]` node. Returns `(order, dist)`
/// scalar nodes; `dist` is `None` for `m < 3`.
pub fn graph_losses(graph: &mut Graph, scores: NodeId) -> Result<(NodeId, Option<NodeId>)> {
    let shape = graph.value(scores).shape().to_vec();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(UbrError::InvalidArgument(format!("graph losses need a [g, m ≥ 2] node, got {shape:?}")));
    }
    let gaps = graph.diff(scores)?;
    let log_h = graph.log_sigmoid(gaps);
    let sum = graph.sum(log_h);
    let order = graph.scale(sum, -1.0);
    let dist = if shape[1] >= 3 {
        let bends = graph.diff(gaps)?;
        let f = graph.smooth_l1(bends);
        Some(graph.sum(f))
    } else {
        None
    };
    Ok((order, dist))
}

/// Scalar node for `order + dist` built with [`graph_losses`].
pub fn graph_total_loss(graph: &mut Graph, scores: NodeId) -> Result<NodeId> {
    match graph_losses(graph, scores)? {
        (order, Some(dist)) => graph.add(order, dist),
        (order, None) => Ok(order),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::diffcore::{numeric_gradient, relative_error, Tensor};

    fn table(rows: &[&[f64]]) -> ScoreTable {
        ScoreTable::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn order_loss_values() {
        let v = order_loss(&table(&[&[0.0, 0.0]])).unwrap().value;
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        // ln(1 + e^{-1}) = 0.313261687518222...
        let v = order_loss(&table(&[&[0.0, 1.0]])).unwrap().value;
        assert!((v - 0.313_261_7).abs() < 1e-6);
        let v = order_loss(&table(&[&[0.0, 50.0]])).unwrap().value;
        assert!(v < 1e-12);
        assert!(order_loss(&table(&[&[1.0]])).is_err());
    }

    #[test]
    fn order_loss_is_finite_for_inverted_rows() {
        let t = order_loss(&table(&[&[0.0, -800.0]])).unwrap();
        assert!(t.value.is_finite());
        assert_eq!(t.value, 800.0);
        assert_eq!(t.grad, vec![1.0, -1.0]);
    }

    #[test]
    fn distance_loss_values() {
        assert_eq!(distance_loss(&table(&[&[0.0, 1.0, 1.5]])).unwrap().value, 0.125);
        assert_eq!(distance_loss(&table(&[&[0.0, 1.0, 2.0, 5.0]])).unwrap().value, 1.5);
        assert_eq!(distance_loss(&table(&[&[3.0, 1.0, -1.0, -3.0], &[0.5, 0.75, 1.0, 1.25]])).unwrap().value, 0.0);
        assert!(distance_loss(&table(&[&[0.0, 1.0]])).is_err());
    }

    #[test]
    fn total_loss_cases() {
        // Constant rows: the trivial solution costs g·(m−1)·ln 2.
        let r = total_loss(&table(&[&[2.0; 8], &[-1.0; 8], &[0.0; 8]])).unwrap();
        assert_eq!(r.dist, 0.0);
        assert!((r.order - 3.0 * 7.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(r.total, r.order + r.dist);

        let steep: Vec<f64> = (0..8).map(|j| 100.0 * j as f64).collect();
        let r = total_loss(&table(&[&steep, &steep])).unwrap();
        assert!(r.total < 1e-12);

        let r = total_loss(&table(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert_eq!(r.dist, 0.0);
        assert_eq!(r.total, r.order);
        assert!(total_loss(&table(&[&[0.0]])).is_err());
    }

    #[test]
    fn weighted_total_drops_distance_term() {
        let t = table(&[&[0.0, 1.0, 3.0, 3.5]]);
        let full = total_loss(&t).unwrap();
        let off = weighted_total_loss(&t, 0.0).unwrap();
        assert_eq!(off.total, full.order);
        assert_eq!(off.grad, order_loss(&t).unwrap().grad);
    }

    fn random_table(g: usize, m: usize, seed: u64) -> ScoreTable {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ScoreTable::new(g, m, (0..g * m).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    fn away_from_kink(t: &ScoreTable) -> bool {
        t.rows().all(|r| r.windows(3).all(|w| ((w[2] - 2.0 * w[1] + w[0]).abs() - 1.0).abs() > 1e-3))
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut seed = 0;
        let mut checked = 0;
        while checked < 10 {
            seed += 1;
            let t = random_table(3, 8, seed);
            if !away_from_kink(&t) {
                continue;
            }
            let report = total_loss(&t).unwrap();
            let f = |s: &[f64]| total_loss(&ScoreTable::new(3, 8, s.to_vec()).unwrap()).unwrap().total;
            let numeric = numeric_gradient(f, t.scores(), 1e-5);
            for (a, n) in report.grad.iter().zip(&numeric) {
                assert!(relative_error(*a, *n) < 1e-6, "seed {seed}: {a} vs {n}");
            }
            checked += 1;
        }
    }

    #[test]
    fn graph_route_agrees_with_analytic_route() {
        for (g, m, seed) in [(3, 8, 1), (2, 3, 2), (4, 2, 3), (1, 12, 4)] {
            let t = random_table(g, m, seed);
            let mut graph = Graph::new();
            let s = graph.parameter(Tensor::new(vec![g, m], t.scores().to_vec()).unwrap());
            let total = graph_total_loss(&mut graph, s).unwrap();
            graph.backward(total).unwrap();
            let report = total_loss(&t).unwrap();
            assert!((graph.value(total).data()[0] - report.total).abs() < 1e-12 * report.total.max(1.0));
            for (a, b) in graph.grad(s).unwrap().data().iter().zip(&report.grad) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    fn row_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-20.0f64..20.0, 3..10)
    }

    proptest! {
        #[test]
        fn row_translation_leaves_losses_unchanged(rows in prop::collection::vec(row_strategy(), 1..4), c in -50.0f64..50.0, which in 0usize..4) {
            let m = rows[0].len();
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(m, 0.0); r }).collect();
            let base = total_loss(&ScoreTable::from_rows(&rows).unwrap()).unwrap();
            let mut shifted = rows.clone();
            let i = which % rows.len();
            shifted[i].iter_mut().for_each(|v| *v += c);
            let moved = total_loss(&ScoreTable::from_rows(&shifted).unwrap()).unwrap();
            prop_assert!((base.order - moved.order).abs() <= 1e-12 * base.order.abs().max(1.0) * 100.0);
            prop_assert!((base.dist - moved.dist).abs() <= 1e-12 * base.dist.abs().max(1.0) * 100.0);
        }

        #[test]
        fn order_loss_decreases_in_each_gap(row in row_strategy(), j in 0usize..9, bump in 1e-3f64..5.0) {
            let j = j % (row.len() - 1);
            let base = order_loss(&ScoreTable::from_rows(std::slice::from_ref(&row)).unwrap()).unwrap().value;
            // Widen gap j alone by shifting everything after it.
            let mut wider = row.clone();
            wider[j + 1..].iter_mut().for_each(|v| *v += bump);
            let after = order_loss(&ScoreTable::from_rows(&[wider]).unwrap()).unwrap().value;
            prop_assert!(after <= base * (1.0 + 1e-12));
            // Strictness on the isolated term, where round-off cannot hide it.
            let gap = row[j + 1] - row[j];
            let single = |d: f64| order_loss(&ScoreTable::from_rows(&[vec![0.0, d]]).unwrap()).unwrap().value;
            prop_assert!(single(gap + bump) < single(gap));
        }

        #[test]
        fn distance_loss_zero_iff_arithmetic(start in -10.0f64..10.0, step in -5.0f64..5.0, m in 3usize..12, kick in 1e-3f64..3.0, at in 0usize..12) {
            let row: Vec<f64> = (0..m).map(|j| start + step * j as f64).collect();
            let d = distance_loss(&ScoreTable::from_rows(std::slice::from_ref(&row)).unwrap()).unwrap().value;
            prop_assert!(d < 1e-20);
            let mut bent = row;
            bent[at % m] += kick;
            let d = distance_loss(&ScoreTable::from_rows(&[bent]).unwrap()).unwrap().value;
            prop_assert!(d > 0.0);
        }

        #[test]
        fn total_grad_is_sum_of_terms(row in row_strategy()) {
            let t = ScoreTable::from_rows(&[row]).unwrap();
            let r = total_loss(&t).unwrap();
            let o = order_loss(&t).unwrap();
            let d = distance_loss(&t).unwrap();
            for ((a, b), c) in r.grad.iter().zip(&o.grad).zip(&d.grad) {
                prop_assert_eq!(*a, b + c);
            }
            prop_assert_eq!(r.total, o.value + d.value);
        }
    }
}
