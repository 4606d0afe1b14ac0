//! Exact dynamic-programming answers for small tabular MDPs.
#![allow(dead_code)]

use enseq::envs::TabularMdp;

pub struct Tables {
    /// `p[s][a][s']`
    pub p: Vec<Vec<Vec<f64>>>,
    pub r: Vec<Vec<f64>>,
    pub terminal: Vec<bool>,
}

impl Tables {
    pub fn n_states(&self) -> usize {
        self.p.len()
    }

    pub fn n_actions(&self) -> usize {
        self.p[0].len()
    }

    pub fn env(&self, time_limit: usize) -> TabularMdp {
        let n = self.n_states();
        let mut initial = vec![0.0; n];
        initial[0] = 1.0;
        TabularMdp::new(
            self.p.clone(),
            self.r.clone(),
            initial,
            self.terminal.clone(),
            time_limit,
        )
        .unwrap()
    }

    /// One-step lookahead `r + γ Σ p(s') (1 − terminal(s')) v(s')`.
    pub fn backup(&self, v: &[f64], gamma: f64, s: usize, a: usize) -> f64 {
        let cont: f64 = self.p[s][a]
            .iter()
            .zip(v)
            .zip(&self.terminal)
            .map(|((p, v), &t)| if t { 0.0 } else { p * v })
            .sum();
        self.r[s][a] + gamma * cont
    }

    /// Q* by value iteration until the sup-norm change is below `tol`.
    pub fn value_iteration(&self, gamma: f64, tol: f64) -> Vec<Vec<f64>> {
        let (n, k) = (self.n_states(), self.n_actions());
        let mut v = vec![0.0; n];
        loop {
            let q: Vec<Vec<f64>> = (0..n)
                .map(|s| (0..k).map(|a| self.backup(&v, gamma, s, a)).collect())
                .collect();
            let next: Vec<f64> = q
                .iter()
                .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if delta < tol {
                return q;
            }
        }
    }

    /// Q^π for a stochastic policy `pi[s][a]`, solving the linear Bellman
    /// system for V^π directly.
    pub fn policy_evaluation(&self, pi: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
        let (n, k) = (self.n_states(), self.n_actions());
        // (I − γ P_π) v = r_π over non-terminal successors
        let mut a = vec![vec![0.0; n + 1]; n];
        for s in 0..n {
            a[s][s] += 1.0;
            for act in 0..k {
                let w = pi[s][act];
                a[s][n] += w * self.r[s][act];
                for s2 in 0..n {
                    if !self.terminal[s2] {
                        a[s][s2] -= gamma * w * self.p[s][act][s2];
                    }
                }
            }
        }
        let v = solve(a);
        (0..n)
            .map(|s| (0..k).map(|act| self.backup(&v, gamma, s, act)).collect())
            .collect()
    }
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        for r in 0..n {
            if r != c {
                let f = a[r][c] / a[c][c];
                for j in c..=n {
                    a[r][j] -= f * a[c][j];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

/// Three states, two actions; state 2 is terminal.
pub fn three_state() -> Tables {
    Tables {
        p: vec![
            vec![vec![0.5, 0.5, 0.0], vec![0.1, 0.6, 0.3]],
            vec![vec![0.3, 0.5, 0.2], vec![0.0, 0.2, 0.8]],
            vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]],
        ],
        r: vec![vec![1.0, -0.5], vec![0.2, 2.0], vec![0.0, 0.0]],
        terminal: vec![false, false, true],
    }
}

/// Five states on a ring, two actions (drift back, push forward), no
/// terminal state.
pub fn five_state() -> Tables {
    let n = 5;
    let mut p = vec![vec![vec![0.0; n]; 2]; n];
    for s in 0..n {
        p[s][0][s] = 0.6;
        p[s][0][(s + n - 1) % n] = 0.4;
        p[s][1][(s + 1) % n] = 0.7;
        p[s][1][s] = 0.2;
        p[s][1][(s + 2) % n] = 0.1;
    }
    let r = (0..n)
        .map(|s| vec![-1.0 - 0.2 * s as f64, -1.5 + 0.3 * (s as f64 - 2.0).powi(2)])
        .collect();
    Tables {
        p,
        r,
        terminal: vec![false; n],
    }
}

/// Deterministic greedy policy as a distribution table.
pub fn greedy(q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    q.iter()
        .map(|row| {
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            (0..row.len()).map(|a| if a == best { 1.0 } else { 0.0 }).collect()
        })
        .collect()
}

pub fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// State index of a one-hot observation.
pub fn state_of(obs: &[f64]) -> usize {
    obs.iter().position(|&x| x == 1.0).unwrap()
}
