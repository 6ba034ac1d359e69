//! Per-step routers, biased hard top-k selection, the residual combine rule
//! and the identity-bias controller.
//!
//! Selection ranks modules by `ρ + b`, where `b` is non-zero only at identity
//! modules; the combine rule always weights module outputs by the unbiased
//! router probabilities `ρ`, which are not renormalized over the selected
//! set.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DnaError, Result};
use crate::tensor::{softmax_values, Scalar, Tensor};

/// One token's routing outcome at one routed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub token: usize,
    /// Routed step index (0 is the first step after the backbone).
    pub step: usize,
    /// Router probabilities over the whole pool.
    pub probs: Vec<f64>,
    /// Selected modules in selection order.
    pub selected: Vec<usize>,
    /// `ρ + b` scores that drove the selection.
    pub scores: Vec<f64>,
}

impl RouteDecision {
    /// Combine weight of a selected module: its unbiased probability.
    pub fn weight(&self, module: usize) -> f64 {
        self.probs[module]
    }
}

/// Picks `k` distinct modules from `probs + bias`.
///
/// Deterministic mode takes the `k` largest scores, breaking ties toward the
/// lower index. Stochastic mode draws without replacement with weights
/// `max(ρ + b, 0)`; if every remaining weight is zero the rest is filled
/// deterministically.
pub fn select_topk<R: Rng + ?Sized>(
    probs: &[f64],
    bias: &[f64],
    k: usize,
    rng: Option<&mut R>,
) -> (Vec<usize>, Vec<f64>) {
    let scores: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| p + bias.get(i).copied().unwrap_or(0.0))
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let k = k.min(scores.len());
    let Some(rng) = rng else {
        return (order[..k].to_vec(), scores);
    };
    let mut chosen = Vec::with_capacity(k);
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    while chosen.len() < k {
        let total: f64 = remaining.iter().map(|&i| scores[i].max(0.0)).sum();
        if total <= 0.0 {
            let rest: Vec<usize> = order.iter().copied().filter(|i| !chosen.contains(i)).take(k - chosen.len()).collect();
            chosen.extend(rest);
            break;
        }
        let mut draw = rng.random::<f64>() * total;
        let mut pick = *remaining.last().expect("k <= pool size");
        for &i in &remaining {
            let w = scores[i].max(0.0);
            if w > 0.0 && draw < w {
                pick = i;
                break;
            }
            draw -= w;
        }
        if scores[pick] <= 0.0 {
            // Float round-off walked past the end; take the last positive.
            pick = *remaining.iter().rev().find(|&&i| scores[i] > 0.0).expect("total > 0");
        }
        chosen.push(pick);
        remaining.retain(|&i| i != pick);
    }
    (chosen, scores)
}

/// Routes every row of `h` (`[tokens, d]`) with router weights
/// `w` (`[d, n_modules]`).
pub fn route<T: Scalar, R: Rng + ?Sized>(
    step: usize,
    w: &Tensor<T>,
    h: &Tensor<T>,
    bias: &[f64],
    k: usize,
    mut rng: Option<&mut R>,
) -> Result<Vec<RouteDecision>> {
    let (d, n) = (w.rows(), w.cols());
    if h.cols() != d {
        return Err(crate::tensor::TensorError::Shape {
            op: "route",
            lhs: h.shape().to_vec(),
            rhs: w.shape().to_vec(),
        }
        .into());
    }
    if k == 0 || k > n {
        return Err(DnaError::config("k", format!("k = {k} must lie in 1..={n}")));
    }
    let tokens = h.rows();
    let mut logits = vec![T::zero(); tokens * n];
    T::gemm(tokens, d, n, h.data(), (d as isize, 1), w.data(), (n as isize, 1), &mut logits, false);
    let probs = softmax_values(&logits, tokens, n, 1);
    Ok((0..tokens)
        .map(|t| {
            let p: Vec<f64> = probs[t * n..(t + 1) * n].iter().map(|v| v.as_f64()).collect();
            let (selected, scores) = select_topk(&p, bias, k, rng.as_deref_mut());
            RouteDecision {
                token: t,
                step,
                probs: p,
                selected,
                scores,
            }
        })
        .collect())
}

/// `h_next = h + Σ_{i ∈ selected} ρ_i (M_i(h) − h)`.
///
/// `outputs` maps `(token, module)` to that module's output row. Identity
/// modules contribute exactly zero and need no entry. Terms are accumulated
/// in ascending module order.
pub fn combine_step<T: Scalar>(
    h_prev: &[Vec<T>],
    decisions: &[RouteDecision],
    outputs: &HashMap<(usize, usize), Vec<T>>,
    identity: &[bool],
) -> Result<Vec<Vec<T>>> {
    let mut next = Vec::with_capacity(h_prev.len());
    for (t, h) in h_prev.iter().enumerate() {
        let dec = decisions
            .iter()
            .find(|d| d.token == t)
            .ok_or_else(|| DnaError::Consistency(format!("no routing decision for token {t}")))?;
        let mut modules = dec.selected.clone();
        modules.sort_unstable();
        let mut acc = vec![T::zero(); h.len()];
        for i in modules {
            if identity.get(i).copied().unwrap_or(false) {
                continue;
            }
            let out = outputs.get(&(t, i)).ok_or_else(|| {
                DnaError::Consistency(format!("missing output of module {i} for token {t}"))
            })?;
            let rho = T::from_f64_lossy(dec.probs[i]);
            for ((a, &o), &x) in acc.iter_mut().zip(out).zip(h) {
                *a = *a + (o - x) * rho;
            }
        }
        next.push(h.iter().zip(&acc).map(|(&x, &a)| x + a).collect());
    }
    Ok(next)
}

/// Module selection counts per routed step: `hist[step][module]`.
pub fn selection_histogram(decisions: &[RouteDecision], n_steps: usize, n_modules: usize) -> Vec<Vec<u64>> {
    let mut hist = vec![vec![0u64; n_modules]; n_steps];
    for d in decisions {
        for &i in &d.selected {
            hist[d.step][i] += 1;
        }
    }
    hist
}

/// Sign with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One application of the identity-bias rule:
/// `b + u · sign(r · k · c̄ − Σ_{i ∈ Id} c_i)`.
pub fn bias_rule(bias: f64, speed: f64, target: f64, k: usize, mean_count: f64, identity_count: f64) -> f64 {
    bias + speed * sign(target * k as f64 * mean_count - identity_count)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipControl {
    /// Target fraction of selections that go to identity modules.
    pub target: f64,
    /// Bias change per update.
    pub speed: f64,
}

/// Non-gradient per-step biases steering traffic toward identity modules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasController {
    identity: Vec<bool>,
    k: usize,
    control: Option<SkipControl>,
    biases: Vec<Vec<f64>>,
    counts: Vec<Vec<u64>>,
    updates: u64,
}

impl BiasController {
    pub fn new(n_steps: usize, identity: Vec<bool>, k: usize, control: Option<SkipControl>) -> Self {
        let n = identity.len();
        Self {
            identity,
            k,
            control,
            biases: vec![vec![0.0; n]; n_steps],
            counts: vec![vec![0; n]; n_steps],
            updates: 0,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.biases.len()
    }

    pub fn control(&self) -> Option<SkipControl> {
        self.control
    }

    pub fn identity(&self) -> &[bool] {
        &self.identity
    }

    pub fn biases(&self, step: usize) -> &[f64] {
        &self.biases[step]
    }

    pub fn all_biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn counts(&self, step: usize) -> &[u64] {
        &self.counts[step]
    }

    /// Number of completed `update` calls.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Restores biases (checkpoint load). Non-identity entries must be zero.
    pub fn set_biases(&mut self, biases: Vec<Vec<f64>>) -> Result<()> {
        if biases.len() != self.biases.len() || biases.iter().any(|b| b.len() != self.identity.len()) {
            return Err(DnaError::Consistency("bias table has the wrong shape".into()));
        }
        for row in &biases {
            for (i, &b) in row.iter().enumerate() {
                if !self.identity[i] && b != 0.0 {
                    return Err(DnaError::Consistency(format!(
                        "non-zero bias {b} at non-identity module {i}"
                    )));
                }
            }
        }
        self.biases = biases;
        Ok(())
    }

    pub fn record(&mut self, decisions: &[RouteDecision]) {
        for d in decisions {
            for &i in &d.selected {
                self.counts[d.step][i] += 1;
            }
        }
    }

    pub fn record_counts(&mut self, step: usize, module: usize, n: u64) {
        self.counts[step][module] += n;
    }

    /// `c̄` for a step: selections divided by `k`, i.e. the number of tokens
    /// routed during the interval.
    pub fn mean_count(&self, step: usize) -> f64 {
        self.counts[step].iter().sum::<u64>() as f64 / self.k as f64
    }

    pub fn identity_count(&self, step: usize) -> u64 {
        self.counts[step]
            .iter()
            .zip(&self.identity)
            .filter(|(_, &id)| id)
            .map(|(&c, _)| c)
            .sum()
    }

    /// Applies the sign rule to every step's identity biases and resets the
    /// counters. Without a skip target only the counters are reset.
    pub fn update(&mut self) {
        if let Some(ctl) = self.control {
            for s in 0..self.biases.len() {
                let mean = self.mean_count(s);
                let ident = self.identity_count(s) as f64;
                for i in 0..self.identity.len() {
                    if self.identity[i] {
                        self.biases[s][i] = bias_rule(self.biases[s][i], ctl.speed, ctl.target, self.k, mean, ident);
                    }
                }
            }
        }
        for row in &mut self.counts {
            row.iter_mut().for_each(|c| *c = 0);
        }
        self.updates += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn no_rng() -> Option<&'static mut crate::rng::DnaRng> {
        None
    }

    #[test]
    fn zero_router_picks_lowest_index() {
        let w = Tensor::<f64>::zeros(&[3, 4]);
        let h = Tensor::<f64>::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let d = route(0, &w, &h, &[0.0; 4], 1, no_rng()).unwrap();
        assert_eq!(d[0].probs, vec![0.25; 4]);
        assert_eq!(d[0].selected, vec![0]);
    }

    #[test]
    fn bias_changes_selection_but_not_weight() {
        let probs = [0.5, 0.3, 0.2];
        let (sel, scores) = select_topk(&probs, &[0.0, 0.0, 0.4], 1, no_rng());
        assert_eq!(scores, vec![0.5, 0.3, 0.6000000000000001]);
        assert_eq!(sel, vec![2]);
        let dec = RouteDecision {
            token: 0,
            step: 0,
            probs: probs.to_vec(),
            selected: sel,
            scores,
        };
        assert_eq!(dec.weight(2), 0.2);
    }

    #[test]
    fn top2_without_bias() {
        let (sel, _) = select_topk(&[0.1, 0.6, 0.3], &[0.0; 3], 2, no_rng());
        assert_eq!(sel, vec![1, 2]);
    }

    #[test]
    fn stochastic_selection_is_distinct_and_seeded() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        let mut a = seeded(5);
        let mut b = seeded(5);
        for _ in 0..200 {
            let (x, _) = select_topk(&probs, &[0.0; 4], 3, Some(&mut a));
            let (y, _) = select_topk(&probs, &[0.0; 4], 3, Some(&mut b));
            assert_eq!(x, y);
            let mut s = x.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 3);
        }
    }

    #[test]
    fn stochastic_negative_scores_fall_back_to_order() {
        let mut rng = seeded(1);
        let (sel, _) = select_topk(&[0.5, 0.5], &[-1.0, -1.0], 2, Some(&mut rng));
        assert_eq!(sel, vec![0, 1]);
    }

    fn decision(token: usize, probs: Vec<f64>, selected: Vec<usize>) -> RouteDecision {
        RouteDecision {
            token,
            step: 0,
            scores: probs.clone(),
            probs,
            selected,
        }
    }

    #[test]
    fn combine_scalar_toy() {
        let h = vec![vec![1.0f64]];
        let dec = [decision(0, vec![0.6, 0.4], vec![0, 1])];
        let outputs = HashMap::from([((0, 0), vec![3.0]), ((0, 1), vec![-1.0])]);
        let next = combine_step(&h, &dec, &outputs, &[false, false]).unwrap();
        assert!((next[0][0] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn combine_identity_only_is_exact_noop() {
        let h = vec![vec![0.1f32, -7.25, 3.0]];
        let dec = [decision(0, vec![0.2, 0.3, 0.5], vec![1, 2])];
        let next = combine_step(&h, &dec, &HashMap::new(), &[false, true, true]).unwrap();
        assert_eq!(next, h);
    }

    #[test]
    fn combine_saturated_router_returns_module_output() {
        let h = vec![vec![0.5f64, 2.0]];
        let dec = [decision(0, vec![1.0, 0.0], vec![0])];
        let outputs = HashMap::from([((0, 0), vec![-3.0, 4.0])]);
        let next = combine_step(&h, &dec, &outputs, &[false, false]).unwrap();
        assert_eq!(next[0], vec![-3.0, 4.0]);
    }

    #[test]
    fn combine_missing_output_is_error() {
        let h = vec![vec![1.0f64]];
        let dec = [decision(0, vec![0.5, 0.5], vec![0])];
        assert!(matches!(
            combine_step(&h, &dec, &HashMap::new(), &[false, false]),
            Err(DnaError::Consistency(_))
        ));
    }

    #[test]
    fn bias_rule_examples() {
        // r·k·c̄ = 0.25 · 2 · 100 = 50
        assert_eq!(bias_rule(0.0, 0.001, 0.25, 2, 100.0, 50.0), 0.0);
        assert_eq!(bias_rule(0.0, 0.001, 0.25, 2, 100.0, 30.0), 0.001);
        assert_eq!(bias_rule(0.0, 0.001, 0.25, 2, 100.0, 80.0), -0.001);
    }

    #[test]
    fn controller_touches_only_identity_and_resets() {
        let mut c = BiasController::new(
            2,
            vec![false, false, true, true],
            2,
            Some(SkipControl {
                target: 0.25,
                speed: 0.001,
            }),
        );
        // 100 tokens at step 0, 30 identity selections out of 200.
        c.record_counts(0, 0, 100);
        c.record_counts(0, 1, 70);
        c.record_counts(0, 2, 20);
        c.record_counts(0, 3, 10);
        assert_eq!(c.mean_count(0), 100.0);
        c.update();
        assert_eq!(c.biases(0), &[0.0, 0.0, 0.001, 0.001]);
        assert!(c.counts(0).iter().all(|&x| x == 0));
        assert_eq!(c.updates(), 1);
        assert!(c.set_biases(vec![vec![0.1, 0.0, 0.0, 0.0]; 2]).is_err());
    }

    #[test]
    fn histogram_conservation() {
        let decs: Vec<RouteDecision> = (0..5)
            .map(|t| decision(t, vec![0.25; 4], vec![t % 4, (t + 1) % 4]))
            .collect();
        let hist = selection_histogram(&decs, 1, 4);
        assert_eq!(hist[0].iter().sum::<u64>(), 10);
        let single = selection_histogram(&decs[..1], 1, 4);
        assert_eq!(single[0], vec![1, 1, 0, 0]);
    }
}
