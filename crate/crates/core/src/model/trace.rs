use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DnaError, Result};
use crate::routing::RouteDecision;

/// Routing record of one sequence (one image in vision mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTrace {
    pub seq_id: usize,
    pub tokens: usize,
    /// `ribbons[token][step]` is the sorted k-tuple of selected modules.
    pub ribbons: Vec<Vec<Vec<usize>>>,
    /// Router probabilities of the selected modules, aligned with `ribbons`.
    pub probs: Vec<Vec<Vec<f64>>>,
    /// Normalized compute per token.
    pub compute: Vec<f64>,
}

impl SequenceTrace {
    pub fn mean_compute(&self) -> f64 {
        if self.compute.is_empty() {
            return 0.0;
        }
        self.compute.iter().sum::<f64>() / self.compute.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub k: usize,
    pub n_routed: usize,
    pub n_modules: usize,
    pub identity: Vec<bool>,
    /// `bias_snapshot[step][module]` at the time of the forward pass.
    pub bias_snapshot: Vec<Vec<f64>>,
    pub sequences: Vec<SequenceTrace>,
}

/// Normalized compute of one ribbon: non-identity selections over
/// `k · steps`.
pub fn ribbon_compute(ribbon: &[Vec<usize>], identity: &[bool], k: usize) -> f64 {
    let steps = ribbon.len();
    if steps == 0 || k == 0 {
        return 1.0;
    }
    let used = ribbon.iter().flatten().filter(|&&i| !identity[i]).count();
    used as f64 / (k * steps) as f64
}

impl RoutingTrace {
    /// Builds a trace from per-step decisions over `batch · tokens` rows.
    /// `steps[s]` must hold one decision per row, indexed by global row.
    pub fn from_decisions(
        steps: &[Vec<RouteDecision>],
        batch: usize,
        tokens: usize,
        k: usize,
        identity: &[bool],
        bias_snapshot: Vec<Vec<f64>>,
        first_seq_id: usize,
    ) -> Result<Self> {
        let rows = batch * tokens;
        for (s, decs) in steps.iter().enumerate() {
            if decs.len() != rows {
                return Err(DnaError::Consistency(format!(
                    "step {s} has {} decisions for {rows} tokens",
                    decs.len()
                )));
            }
        }
        let sequences = (0..batch)
            .map(|b| {
                let mut ribbons = Vec::with_capacity(tokens);
                let mut probs = Vec::with_capacity(tokens);
                let mut compute = Vec::with_capacity(tokens);
                for t in 0..tokens {
                    let row = b * tokens + t;
                    let mut ribbon = Vec::with_capacity(steps.len());
                    let mut p = Vec::with_capacity(steps.len());
                    for decs in steps {
                        let d = &decs[row];
                        let mut tuple = d.selected.clone();
                        tuple.sort_unstable();
                        p.push(tuple.iter().map(|&i| d.probs[i]).collect());
                        ribbon.push(tuple);
                    }
                    compute.push(ribbon_compute(&ribbon, identity, k));
                    ribbons.push(ribbon);
                    probs.push(p);
                }
                SequenceTrace {
                    seq_id: first_seq_id + b,
                    tokens,
                    ribbons,
                    probs,
                    compute,
                }
            })
            .collect();
        Ok(Self {
            k,
            n_routed: steps.len(),
            n_modules: identity.len(),
            identity: identity.to_vec(),
            bias_snapshot,
            sequences,
        })
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(|s| s.tokens).sum()
    }

    pub fn ribbons(&self) -> impl Iterator<Item = &Vec<Vec<usize>>> {
        self.sequences.iter().flat_map(|s| s.ribbons.iter())
    }

    pub fn append(&mut self, other: RoutingTrace) {
        self.sequences.extend(other.sequences);
    }

    /// Line-delimited export, one JSON object per sequence. Each line also
    /// carries `k`, the identity mask and the bias snapshot so a file can be
    /// analyzed without the model config.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| DnaError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for s in &self.sequences {
            let line = TraceLine {
                seq: s.clone(),
                k: self.k,
                identity: self.identity.clone(),
                bias: self.bias_snapshot.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&line).expect("serializable")).map_err(|e| DnaError::io(path, e))?;
        }
        w.flush().map_err(|e| DnaError::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| DnaError::io(path, e))?;
        let parse_err = |line: usize, reason: String| DnaError::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut trace: Option<RoutingTrace> = None;
        for (i, l) in std::io::BufReader::new(file).lines().enumerate() {
            let l = l.map_err(|e| DnaError::io(path, e))?;
            if l.trim().is_empty() {
                continue;
            }
            let line: TraceLine = serde_json::from_str(&l).map_err(|e| parse_err(i + 1, e.to_string()))?;
            let n_routed = line.seq.ribbons.first().map_or(0, |r| r.len());
            let t = trace.get_or_insert_with(|| RoutingTrace {
                k: line.k,
                n_routed,
                n_modules: line.identity.len(),
                identity: line.identity.clone(),
                bias_snapshot: line.bias.clone(),
                sequences: Vec::new(),
            });
            let s = line.seq;
            if line.k != t.k || line.identity != t.identity {
                return Err(parse_err(i + 1, "k or identity mask differs from earlier lines".into()));
            }
            if s.ribbons.len() != s.tokens || s.ribbons.iter().any(|r| r.len() != t.n_routed) {
                return Err(parse_err(i + 1, "ribbon lengths are not uniform".into()));
            }
            if s.ribbons.iter().flatten().any(|tuple| tuple.len() != t.k)
                || s.ribbons.iter().flatten().flatten().any(|&m| m >= t.n_modules)
            {
                return Err(parse_err(i + 1, "ribbon tuple has the wrong size or an out-of-range module".into()));
            }
            t.sequences.push(s);
        }
        trace.ok_or_else(|| parse_err(1, "empty trace file".into()))
    }
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    #[serde(flatten)]
    seq: SequenceTrace,
    k: usize,
    identity: Vec<bool>,
    bias: Vec<Vec<f64>>,
}
