//! Statistics over routing traces: path rank-frequency laws, effective
//! top-k, module reuse, compute distributions and token flow.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{DnaError, Result};
use crate::model::{ribbon_active_parameters, RoutingTrace};

pub const DEFAULT_ALPHA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticsConfig {
    /// IPR exponent, must exceed 1.
    pub alpha: f64,
    /// Fit range as cumulative-mass quantiles of the ranked counts.
    pub fit_lo: f64,
    pub fit_hi: f64,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            fit_lo: 0.05,
            fit_hi: 0.95,
        }
    }
}

impl AnalyticsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) {
            return Err(DnaError::config("analytics.alpha", "must exceed 1"));
        }
        if !(0.0 <= self.fit_lo && self.fit_lo < self.fit_hi && self.fit_hi <= 1.0) {
            return Err(DnaError::config("analytics.fit_lo", "need 0 <= fit_lo < fit_hi <= 1"));
        }
        Ok(())
    }
}

/// A ribbon in canonical form: one ascending k-tuple per routed step.
pub type Ribbon = Vec<Vec<usize>>;

#[derive(Debug, Clone, PartialEq)]
pub struct PathStats {
    /// Ribbons by descending count, ties broken lexicographically.
    pub ranked: Vec<(Ribbon, u64)>,
    pub total: u64,
}

impl PathStats {
    pub fn counts(&self) -> Vec<f64> {
        self.ranked.iter().map(|(_, c)| *c as f64).collect()
    }

    /// `rank\tcount\tribbon` rows, ribbon steps separated by `|` and tuple
    /// entries by `,`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("rank\tcount\tribbon\n");
        for (r, (ribbon, c)) in self.ranked.iter().enumerate() {
            let steps: Vec<String> = ribbon
                .iter()
                .map(|t| t.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","))
                .collect();
            let _ = writeln!(s, "{}\t{}\t{}", r + 1, c, steps.join("|"));
        }
        s
    }
}

/// Counts canonical ribbons over any number of traces.
pub fn rank_frequency<'a>(ribbons: impl IntoIterator<Item = &'a Ribbon>) -> Result<PathStats> {
    let mut counts: HashMap<Ribbon, u64> = HashMap::new();
    let mut len = None;
    for r in ribbons {
        if *len.get_or_insert(r.len()) != r.len() {
            return Err(DnaError::Analytics("ribbons have different lengths".into()));
        }
        let canon: Ribbon = r
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.sort_unstable();
                t
            })
            .collect();
        *counts.entry(canon).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(DnaError::Analytics("no ribbons to rank".into()));
    }
    let total = counts.values().sum();
    let mut ranked: Vec<(Ribbon, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(PathStats { ranked, total })
}

pub fn trace_rank_frequency(traces: &[RoutingTrace]) -> Result<PathStats> {
    rank_frequency(traces.iter().flat_map(|t| t.ribbons()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// First and last rank (1-based, inclusive) used by the fit.
    pub rank_lo: usize,
    pub rank_hi: usize,
}

/// Least squares of `ln count` on `ln rank` over the ranks whose cumulative
/// mass lies between the `lo` and `hi` quantiles: rank `r` is used when the
/// mass strictly before it is at least `lo` and the mass through it at most
/// `hi`. `counts` must be sorted descending.
pub fn powerlaw_fit(counts: &[f64], lo: f64, hi: f64) -> Result<PowerLawFit> {
    let total: f64 = counts.iter().sum();
    if counts.is_empty() || total <= 0.0 {
        return Err(DnaError::Analytics("no counts to fit".into()));
    }
    if counts.windows(2).any(|w| w[1] > w[0]) {
        return Err(DnaError::Analytics("counts must be sorted in descending order".into()));
    }
    let mut before = 0.0;
    let mut pts = Vec::new();
    for (i, &c) in counts.iter().enumerate() {
        let through = before + c;
        // Relative slack keeps ranks sitting exactly on a boundary.
        if before / total >= lo - 1e-12 && through / total <= hi + 1e-12 && c > 0.0 {
            pts.push((i + 1, c));
        }
        before = through;
    }
    if pts.len() < 10 {
        return Err(DnaError::Analytics(format!(
            "power-law fit needs at least 10 ranks in the quantile range, found {}",
            pts.len()
        )));
    }
    let xs: Vec<f64> = pts.iter().map(|&(r, _)| (r as f64).ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|&(_, c)| c.ln()).collect();
    let (slope, intercept, r2) = least_squares(&xs, &ys);
    Ok(PowerLawFit {
        slope,
        intercept,
        r2,
        rank_lo: pts[0].0,
        rank_hi: pts[pts.len() - 1].0,
    })
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// `1 / IPR_α` with `IPR_α = Σ c^{2α} / (Σ c²)^α`. Lies in
/// `[1, N^{α−1}]` for `N` counts.
pub fn effective_topk(counts: &[f64], alpha: f64) -> Result<f64> {
    if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(DnaError::Analytics("counts must be finite and non-negative".into()));
    }
    let max = counts.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(DnaError::Analytics("effective top-k of all-zero counts".into()));
    }
    // Dividing by the largest count keeps the powers in range; the ratio is
    // unchanged.
    let num: f64 = counts.iter().map(|&c| (c / max).powf(2.0 * alpha)).sum();
    let den: f64 = counts.iter().map(|&c| (c / max) * (c / max)).sum::<f64>().powf(alpha);
    Ok(den / num)
}

/// Per-step effective top-k of the selection counts in a trace.
pub fn trace_effective_topk(trace: &RoutingTrace, alpha: f64) -> Result<Vec<f64>> {
    let counts = visit_counts(trace);
    counts
        .iter()
        .map(|row| effective_topk(&row.iter().map(|&c| c as f64).collect::<Vec<_>>(), alpha))
        .collect()
}

/// `1 − distinct / selections` over the non-identity selections of a
/// ribbon; an all-identity ribbon has reuse 0.
pub fn module_reuse(ribbon: &[Vec<usize>], identity: &[bool]) -> f64 {
    let used: Vec<usize> = ribbon.iter().flatten().copied().filter(|&i| !identity[i]).collect();
    if used.is_empty() {
        return 0.0;
    }
    let mut distinct = used.clone();
    distinct.sort_unstable();
    distinct.dedup();
    1.0 - distinct.len() as f64 / used.len() as f64
}

/// Parameter-weighted reuse: `1 − non_shared / active`.
pub fn module_reuse_weighted(ribbon: &[Vec<usize>], module_params: &[usize]) -> f64 {
    let (active, non_shared) = ribbon_active_parameters(ribbon, module_params);
    if active == 0 {
        return 0.0;
    }
    1.0 - non_shared as f64 / active as f64
}

/// Mean token reuse per sequence: `(count-weighted, parameter-weighted)`.
pub fn sequence_reuse(trace: &RoutingTrace, module_params: &[usize]) -> Vec<(f64, f64)> {
    trace
        .sequences
        .iter()
        .map(|s| {
            let n = s.ribbons.len().max(1) as f64;
            let c: f64 = s.ribbons.iter().map(|r| module_reuse(r, &trace.identity)).sum();
            let w: f64 = s.ribbons.iter().map(|r| module_reuse_weighted(r, module_params)).sum();
            (c / n, w / n)
        })
        .collect()
}

/// Pearson correlation.
pub fn correlation(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(DnaError::Analytics("correlation needs two equal-length series of at least 2".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(DnaError::Analytics("correlation is undefined for a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `visits[step][module]`.
pub fn visit_counts(trace: &RoutingTrace) -> Vec<Vec<u64>> {
    let mut visits = vec![vec![0u64; trace.n_modules]; trace.n_routed];
    for r in trace.ribbons() {
        for (s, tuple) in r.iter().enumerate() {
            for &m in tuple {
                visits[s][m] += 1;
            }
        }
    }
    visits
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSummary {
    /// `visits[step][module]`; each step sums to `k · tokens`.
    pub visits: Vec<Vec<u64>>,
    /// `transitions[step][from][to]` between routed steps `step` and
    /// `step + 1`, counting every pair of modules in consecutive tuples.
    pub transitions: Vec<Vec<Vec<u64>>>,
    pub tokens: u64,
}

pub fn flow_export(traces: &[RoutingTrace]) -> Result<FlowSummary> {
    let first = traces.first().ok_or_else(|| DnaError::Analytics("no traces".into()))?;
    let (steps, n) = (first.n_routed, first.n_modules);
    let mut visits = vec![vec![0u64; n]; steps];
    let mut transitions = vec![vec![vec![0u64; n]; n]; steps.saturating_sub(1)];
    let mut tokens = 0;
    for t in traces {
        if t.n_routed != steps || t.n_modules != n {
            return Err(DnaError::Analytics("traces come from different model shapes".into()));
        }
        for r in t.ribbons() {
            tokens += 1;
            for (s, tuple) in r.iter().enumerate() {
                for &m in tuple {
                    visits[s][m] += 1;
                }
                if let Some(next) = r.get(s + 1) {
                    for &a in tuple {
                        for &b in next {
                            transitions[s][a][b] += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(FlowSummary {
        visits,
        transitions,
        tokens,
    })
}

impl FlowSummary {
    /// `step\tmodule\tcount\tfreq` rows.
    pub fn visits_tsv(&self) -> String {
        let mut s = String::from("step\tmodule\tcount\tfreq\n");
        for (step, row) in self.visits.iter().enumerate() {
            for (m, &c) in row.iter().enumerate() {
                let f = if self.tokens == 0 { 0.0 } else { c as f64 / self.tokens as f64 };
                let _ = writeln!(s, "{step}\t{m}\t{c}\t{f:.6}");
            }
        }
        s
    }

    /// `step\tfrom\tto\tcount` rows for non-zero transitions.
    pub fn transitions_tsv(&self) -> String {
        let mut s = String::from("step\tfrom\tto\tcount\n");
        for (step, m) in self.transitions.iter().enumerate() {
            for (a, row) in m.iter().enumerate() {
                for (b, &c) in row.iter().enumerate() {
                    if c > 0 {
                        let _ = writeln!(s, "{step}\t{a}\t{b}\t{c}");
                    }
                }
            }
        }
        s
    }
}

/// Number of tokens per normalized-compute value.
pub fn compute_histogram(trace: &RoutingTrace) -> BTreeMap<u64, (f64, u64)> {
    // Keyed by the number of non-identity selections so equal compute
    // values share a bin exactly.
    let mut bins: BTreeMap<u64, (f64, u64)> = BTreeMap::new();
    let denom = (trace.k * trace.n_routed).max(1) as f64;
    for r in trace.ribbons() {
        let used = r.iter().flatten().filter(|&&i| !trace.identity[i]).count() as u64;
        let e = bins.entry(used).or_insert((used as f64 / denom, 0));
        e.1 += 1;
    }
    bins
}

/// Per-token skip fraction and count-weighted reuse, the two series behind
/// the skip/reuse correlation.
pub fn skip_and_reuse(trace: &RoutingTrace) -> (Vec<f64>, Vec<f64>) {
    let skip = trace
        .ribbons()
        .map(|r| 1.0 - crate::model::ribbon_compute(r, &trace.identity, trace.k))
        .collect();
    let reuse = trace.ribbons().map(|r| module_reuse(r, &trace.identity)).collect();
    (skip, reuse)
}

/// Headline numbers written next to the tabular exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub sequences: usize,
    pub tokens: u64,
    pub distinct_paths: usize,
    pub fit: Option<PowerLawFit>,
    /// Why the fit is missing, if it is.
    pub fit_error: Option<String>,
    pub effective_topk: Vec<f64>,
    pub mean_compute: f64,
    pub skip_reuse_correlation: Option<f64>,
    pub correlation_error: Option<String>,
}

/// Every analysis output as `(file name, contents)` in a fixed order.
/// Parameter-weighted reuse is included when `module_params` is given.
pub fn export_bundle(
    trace: &RoutingTrace,
    cfg: &AnalyticsConfig,
    module_params: Option<&[usize]>,
) -> Result<(AnalysisSummary, Vec<(&'static str, String)>)> {
    cfg.validate()?;
    let stats = trace_rank_frequency(std::slice::from_ref(trace))?;
    let (fit, fit_error) = match powerlaw_fit(&stats.counts(), cfg.fit_lo, cfg.fit_hi) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let eff = trace_effective_topk(trace, cfg.alpha)?;
    let (skip, reuse) = skip_and_reuse(trace);
    let (corr, corr_error) = match correlation(&skip, &reuse) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let tokens = stats.total;
    let mean_compute = skip.iter().map(|s| 1.0 - s).sum::<f64>() / skip.len().max(1) as f64;

    let mut eff_tsv = String::from("step\teffective_topk\n");
    for (s, v) in eff.iter().enumerate() {
        let _ = writeln!(eff_tsv, "{s}\t{v:.9}");
    }
    let mut reuse_tsv = String::from("seq_id\tmean_compute\treuse\treuse_weighted\n");
    let weighted = module_params.map(|p| sequence_reuse(trace, p));
    for (i, s) in trace.sequences.iter().enumerate() {
        let n = s.ribbons.len().max(1) as f64;
        let r: f64 = s.ribbons.iter().map(|r| module_reuse(r, &trace.identity)).sum::<f64>() / n;
        let w = weighted.as_ref().map_or("-".to_string(), |w| format!("{:.9}", w[i].1));
        let _ = writeln!(reuse_tsv, "{}\t{:.9}\t{r:.9}\t{w}", s.seq_id, s.mean_compute());
    }
    let mut hist_tsv = String::from("selections\tcompute\ttokens\n");
    for (used, (c, n)) in compute_histogram(trace) {
        let _ = writeln!(hist_tsv, "{used}\t{c:.9}\t{n}");
    }
    let flow = flow_export(std::slice::from_ref(trace))?;
    let summary = AnalysisSummary {
        sequences: trace.sequences.len(),
        tokens,
        distinct_paths: stats.ranked.len(),
        fit,
        fit_error,
        effective_topk: eff,
        mean_compute,
        skip_reuse_correlation: corr,
        correlation_error: corr_error,
    };
    let files = vec![
        ("rank_frequency.tsv", stats.to_tsv()),
        ("effective_topk.tsv", eff_tsv),
        ("sequence_reuse.tsv", reuse_tsv),
        ("compute_histogram.tsv", hist_tsv),
        ("flow_visits.tsv", flow.visits_tsv()),
        ("flow_transitions.tsv", flow.transitions_tsv()),
        ("summary.json", serde_json::to_string_pretty(&summary).expect("serializable") + "\n"),
    ];
    Ok((summary, files))
}
