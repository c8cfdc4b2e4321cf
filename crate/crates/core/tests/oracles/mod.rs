//! Brute-force reference implementations shared by the oracle tests.

use hetsched_core::classifiers::midpoint;

// Selects neighbours by repeated linear minimum search instead of sorting.
pub fn knn_oracle(x: &[Vec<f64>], y: &[String], k: usize, q: &[f64]) -> String {
    let dist: Vec<f64> = x.iter().map(|r| r.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum()).collect();
    let mut taken = vec![false; x.len()];
    let mut votes: Vec<(String, usize)> = Vec::new();
    for _ in 0..k.min(x.len()) {
        let mut best: Option<usize> = None;
        for i in 0..x.len() {
            if !taken[i] && best.is_none_or(|b| dist[i] < dist[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        match votes.iter_mut().find(|(l, _)| *l == y[b]) {
            Some(v) => v.1 += 1,
            None => votes.push((y[b].clone(), 1)),
        }
    }
    let top = votes.iter().map(|v| v.1).max().unwrap();
    votes.into_iter().filter(|v| v.1 == top).map(|v| v.0).min().unwrap()
}

pub enum Oracle {
    Leaf(String),
    Split(usize, f64, Box<Oracle>, Box<Oracle>),
}

pub fn gini(labels: &[&str]) -> f64 {
    let n = labels.len() as f64;
    let mut distinct: Vec<&str> = labels.to_vec();
    distinct.sort();
    distinct.dedup();
    1.0 - distinct.iter().map(|d| (labels.iter().filter(|l| *l == d).count() as f64 / n).powi(2)).sum::<f64>()
}

pub fn majority_oracle(labels: &[&str]) -> String {
    let mut distinct: Vec<&str> = labels.to_vec();
    distinct.sort();
    distinct.dedup();
    let count = |d: &str| labels.iter().filter(|l| **l == d).count();
    let top = distinct.iter().map(|d| count(d)).max().unwrap();
    distinct.into_iter().find(|d| count(d) == top).unwrap().to_string()
}

// Enumerates every (feature, midpoint) split and scores weighted Gini in
// floating point; ties within 1e-12 keep the earlier candidate.
pub fn tree_oracle(x: &[Vec<f64>], y: &[&str], depth: usize, max_depth: Option<usize>) -> Oracle {
    let mut distinct: Vec<&str> = y.to_vec();
    distinct.sort();
    distinct.dedup();
    if distinct.len() == 1 || max_depth.is_some_and(|m| depth >= m) || y.len() < 2 {
        return Oracle::Leaf(majority_oracle(y));
    }
    let n = y.len() as f64;
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..x[0].len() {
        let mut values: Vec<f64> = x.iter().map(|r| r[f]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let t = midpoint(w[0], w[1]);
            let left: Vec<&str> = (0..y.len()).filter(|&i| x[i][f] <= t).map(|i| y[i]).collect();
            let right: Vec<&str> = (0..y.len()).filter(|&i| x[i][f] > t).map(|i| y[i]).collect();
            let score = left.len() as f64 / n * gini(&left) + right.len() as f64 / n * gini(&right);
            if best.is_none_or(|b| score < b.2 - 1e-12) {
                best = Some((f, t, score));
            }
        }
    }
    let Some((f, t, _)) = best else { return Oracle::Leaf(majority_oracle(y)) };
    let split = |keep: &dyn Fn(f64) -> bool| {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| keep(x[i][f])).collect();
        (idx.iter().map(|&i| x[i].clone()).collect::<Vec<_>>(), idx.iter().map(|&i| y[i]).collect::<Vec<_>>())
    };
    let (lx, ly) = split(&|v| v <= t);
    let (rx, ry) = split(&|v| v > t);
    Oracle::Split(
        f,
        t,
        Box::new(tree_oracle(&lx, &ly, depth + 1, max_depth)),
        Box::new(tree_oracle(&rx, &ry, depth + 1, max_depth)),
    )
}

pub fn oracle_predict(node: &Oracle, q: &[f64]) -> String {
    match node {
        Oracle::Leaf(l) => l.clone(),
        Oracle::Split(f, t, l, r) => oracle_predict(if q[*f] <= *t { l } else { r }, q),
    }
}
