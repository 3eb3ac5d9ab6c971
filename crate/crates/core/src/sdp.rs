//! Semidefinite programs in SDPA form and the embedded conic backend.
//!
//! ```text
//! minimize   cᵀ y
//! subject to Σ_i y_i F_i − F_0 ∈ K_1 × … × K_r
//! ```
//!
//! where each `K_j` is a PSD cone, a nonnegative orthant or the zero cone.

use std::fmt::Write as _;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
    SupportedConeT::{NonnegativeConeT, PSDTriangleConeT, ZeroConeT},
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("malformed SDPA data at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("backend failure: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Psd,
    Nonneg,
    Zero,
}

/// Entry `(row, col)` (with `row ≤ col` for PSD blocks, `row = col`
/// otherwise) of matrix `F_matrix`; `matrix = 0` is the constant term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdpEntry {
    pub matrix: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpBlock {
    pub kind: BlockKind,
    pub size: usize,
    pub entries: Vec<SdpEntry>,
}

impl SdpBlock {
    pub fn new(kind: BlockKind, size: usize) -> Self {
        Self { kind, size, entries: Vec::new() }
    }

    /// Adds `value` to entry `(row, col)` of `F_matrix` (`matrix = 0` for
    /// `F_0`). Lower-triangle entries of PSD blocks are mirrored.
    pub fn push(&mut self, matrix: usize, row: usize, col: usize, value: f64) {
        let (row, col) = if row <= col { (row, col) } else { (col, row) };
        self.entries.push(SdpEntry { matrix, row, col, value });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpInstance {
    pub n_vars: usize,
    pub objective: Vec<f64>,
    pub blocks: Vec<SdpBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalError,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::NumericalError => "numerical_error",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SolveStatus,
    pub y: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
    /// Feasibility tolerance the backend worked to.
    pub tolerance: f64,
}

pub trait SdpBackend {
    fn name(&self) -> &str;
    fn solve(&self, inst: &SdpInstance) -> Result<SdpSolution, SdpError>;
}

/// Interior-point backend built on Clarabel.
#[derive(Debug, Clone)]
pub struct ClarabelBackend {
    pub tol: f64,
    pub max_iter: u32,
    pub verbose: bool,
}

impl Default for ClarabelBackend {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200, verbose: false }
    }
}

impl SdpInstance {
    pub fn new(n_vars: usize) -> Self {
        Self { n_vars, objective: vec![0.0; n_vars], blocks: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), SdpError> {
        if self.objective.len() != self.n_vars {
            return Err(SdpError::Invalid("objective length differs from variable count".into()));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            for e in &b.entries {
                if e.matrix > self.n_vars || e.row >= b.size || e.col >= b.size {
                    return Err(SdpError::Invalid(format!("block {k}: entry out of range {e:?}")));
                }
                if b.kind != BlockKind::Psd && e.row != e.col {
                    return Err(SdpError::Invalid(format!("block {k}: off-diagonal entry in a diagonal block")));
                }
                if !e.value.is_finite() {
                    return Err(SdpError::Invalid(format!("block {k}: non-finite coefficient")));
                }
            }
        }
        Ok(())
    }

    /// Value of `Σ y_i F_i − F_0` for block `k` as a dense symmetric matrix.
    pub fn block_value(&self, k: usize, y: &[f64]) -> nalgebra::DMatrix<f64> {
        let b = &self.blocks[k];
        let mut m = nalgebra::DMatrix::zeros(b.size, b.size);
        for e in &b.entries {
            let v = if e.matrix == 0 { -e.value } else { e.value * y[e.matrix - 1] };
            m[(e.row, e.col)] += v;
            if e.row != e.col {
                m[(e.col, e.row)] += v;
            }
        }
        m
    }

    /// Writes the instance in SDPA sparse format. Zero-cone blocks become a
    /// pair of diagonal blocks (`≥ 0` and `≤ 0`).
    pub fn to_sdpa(&self) -> String {
        let mut blocks: Vec<(i64, Vec<(usize, usize, usize, f64)>)> = Vec::new();
        for b in &self.blocks {
            let entries: Vec<_> = b.entries.iter().map(|e| (e.matrix, e.row, e.col, e.value)).collect();
            match b.kind {
                BlockKind::Psd => blocks.push((b.size as i64, entries)),
                BlockKind::Nonneg => blocks.push((-(b.size as i64), entries)),
                BlockKind::Zero => {
                    let neg = entries.iter().map(|&(m, r, c, v)| (m, r, c, -v)).collect();
                    blocks.push((-(b.size as i64), entries));
                    blocks.push((-(b.size as i64), neg));
                }
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "\"pie-h2 LPI\"");
        let _ = writeln!(out, "{}", self.n_vars);
        let _ = writeln!(out, "{}", blocks.len());
        let sizes: Vec<String> = blocks.iter().map(|(s, _)| s.to_string()).collect();
        let _ = writeln!(out, "{}", sizes.join(" "));
        let obj: Vec<String> = self.objective.iter().map(|c| format!("{c:e}")).collect();
        let _ = writeln!(out, "{}", obj.join(" "));
        for (k, (_, entries)) in blocks.iter().enumerate() {
            let mut merged: std::collections::BTreeMap<(usize, usize, usize), f64> = Default::default();
            for &(m, r, c, v) in entries {
                *merged.entry((m, r, c)).or_insert(0.0) += v;
            }
            for ((m, r, c), v) in merged {
                if v != 0.0 {
                    let _ = writeln!(out, "{} {} {} {} {:e}", m, k + 1, r + 1, c + 1, v);
                }
            }
        }
        out
    }

    /// Parses SDPA sparse format. Diagonal (negative-size) blocks are read as
    /// nonnegative orthants.
    pub fn from_sdpa(text: &str) -> Result<Self, SdpError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('"') && !l.starts_with('*'));
        let mut next = |what: &str| lines.next().ok_or(SdpError::Parse { line: 0, msg: format!("missing {what}") });
        let clean = |l: &str| l.replace([',', '{', '}', '(', ')'], " ");
        let parse_usize = |(ln, l): (usize, &str)| {
            clean(l)
                .split_whitespace()
                .next()
                .and_then(|t| t.parse::<usize>().ok())
                .ok_or(SdpError::Parse { line: ln, msg: "expected a count".into() })
        };
        let n_vars = parse_usize(next("variable count")?)?;
        let n_blocks = parse_usize(next("block count")?)?;
        let (ln, sizes_line) = next("block sizes")?;
        let sizes: Vec<i64> = clean(sizes_line)
            .split_whitespace()
            .map(|t| t.parse::<i64>().map_err(|_| SdpError::Parse { line: ln, msg: format!("bad block size {t}") }))
            .collect::<Result<_, _>>()?;
        if sizes.len() != n_blocks {
            return Err(SdpError::Parse { line: ln, msg: "block size count mismatch".into() });
        }
        let (ln, obj_line) = next("objective")?;
        let objective: Vec<f64> = clean(obj_line)
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| SdpError::Parse { line: ln, msg: format!("bad number {t}") }))
            .collect::<Result<_, _>>()?;
        if objective.len() != n_vars {
            return Err(SdpError::Parse { line: ln, msg: "objective length mismatch".into() });
        }
        let mut blocks: Vec<SdpBlock> = sizes
            .iter()
            .map(|&s| {
                if s < 0 {
                    SdpBlock::new(BlockKind::Nonneg, (-s) as usize)
                } else {
                    SdpBlock::new(BlockKind::Psd, s as usize)
                }
            })
            .collect();
        for (ln, l) in lines {
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() < 5 {
                return Err(SdpError::Parse { line: ln, msg: "expected 5 fields".into() });
            }
            let bad = |msg: &str| SdpError::Parse { line: ln, msg: msg.into() };
            let m: usize = toks[0].parse().map_err(|_| bad("matrix index"))?;
            let b: usize = toks[1].parse().map_err(|_| bad("block index"))?;
            let r: usize = toks[2].parse().map_err(|_| bad("row index"))?;
            let c: usize = toks[3].parse().map_err(|_| bad("column index"))?;
            let v: f64 = toks[4].parse().map_err(|_| bad("value"))?;
            if b == 0 || b > blocks.len() || r == 0 || c == 0 || m > n_vars {
                return Err(bad("index out of range"));
            }
            blocks[b - 1].push(m, r - 1, c - 1, v);
        }
        let inst = Self { n_vars, objective, blocks };
        inst.validate().map_err(|e| SdpError::Parse { line: 0, msg: e.to_string() })?;
        Ok(inst)
    }
}

impl SdpBackend for ClarabelBackend {
    fn name(&self) -> &str {
        "clarabel"
    }

    fn solve(&self, inst: &SdpInstance) -> Result<SdpSolution, SdpError> {
        inst.validate()?;
        let n = inst.n_vars;
        // Clarabel form: s = b − A y ∈ K
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut b: Vec<f64> = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        let sqrt2 = std::f64::consts::SQRT_2;
        for b_idx in 0..inst.blocks.len() {
            let blk = &inst.blocks[b_idx];
            let offset = b.len();
            let (len, sign) = match blk.kind {
                BlockKind::Zero => (blk.size, 1.0),
                BlockKind::Nonneg => (blk.size, -1.0),
                BlockKind::Psd => (blk.size * (blk.size + 1) / 2, -1.0),
            };
            b.resize(offset + len, 0.0);
            for e in &blk.entries {
                let (row, scale) = match blk.kind {
                    BlockKind::Psd => {
                        let idx = e.col * (e.col + 1) / 2 + e.row;
                        (offset + idx, if e.row == e.col { 1.0 } else { sqrt2 })
                    }
                    _ => (offset + e.row, 1.0),
                };
                if e.matrix == 0 {
                    b[row] += sign * e.value * scale;
                } else {
                    cols[e.matrix - 1].push((row, sign * e.value * scale));
                }
            }
            if len > 0 {
                cones.push(match blk.kind {
                    BlockKind::Zero => ZeroConeT(len),
                    BlockKind::Nonneg => NonnegativeConeT(len),
                    BlockKind::Psd => PSDTriangleConeT(blk.size),
                });
            }
        }
        let m = b.len();
        let mut colptr = Vec::with_capacity(n + 1);
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        colptr.push(0);
        for col in cols.iter_mut() {
            col.sort_by_key(|&(r, _)| r);
            let mut last: Option<usize> = None;
            for &(r, v) in col.iter() {
                if last == Some(r) {
                    *nzval.last_mut().unwrap() += v;
                } else {
                    rowval.push(r);
                    nzval.push(v);
                    last = Some(r);
                }
            }
            colptr.push(rowval.len());
        }
        let a = CscMatrix::new(m, n, colptr, rowval, nzval);
        let p = CscMatrix::<f64>::zeros((n, n));
        let settings = DefaultSettingsBuilder::default()
            .verbose(self.verbose)
            .max_iter(self.max_iter)
            .tol_feas(self.tol)
            .tol_gap_abs(self.tol)
            .tol_gap_rel(self.tol)
            .direct_solve_method("faer".to_string())
            .build()
            .map_err(|e| SdpError::Backend(format!("{e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &inst.objective, &a, &b, &cones, settings)
            .map_err(|e| SdpError::Backend(format!("{e:?}")))?;
        solver.solve();
        let status = match solver.solution.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
            _ => SolveStatus::NumericalError,
        };
        log::debug!(
            "clarabel: {:?} after {} iterations, objective {:.6e}",
            solver.solution.status,
            solver.solution.iterations,
            solver.solution.obj_val
        );
        Ok(SdpSolution {
            status,
            y: solver.solution.x.clone(),
            objective: solver.solution.obj_val,
            iterations: solver.solution.iterations,
            tolerance: if solver.solution.status == SolverStatus::AlmostSolved { self.tol.sqrt() } else { self.tol },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_lower_bound() {
        // min g s.t. g − 5 ≥ 0
        let mut inst = SdpInstance::new(1);
        inst.objective[0] = 1.0;
        let mut b = SdpBlock::new(BlockKind::Nonneg, 1);
        b.push(1, 0, 0, 1.0);
        b.push(0, 0, 0, 5.0);
        inst.blocks.push(b);
        let sol = ClarabelBackend::default().solve(&inst).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.y[0] - 5.0).abs() < 1e-6);
    }

    fn trace_instance() -> SdpInstance {
        // W = [[y1, y2], [y2, y3]], min y1 + y3 s.t. W − diag(1, 2) ⪰ 0
        let mut inst = SdpInstance::new(3);
        inst.objective = vec![1.0, 0.0, 1.0];
        let mut b = SdpBlock::new(BlockKind::Psd, 2);
        b.push(1, 0, 0, 1.0);
        b.push(2, 0, 1, 1.0);
        b.push(3, 1, 1, 1.0);
        b.push(0, 0, 0, 1.0);
        b.push(0, 1, 1, 2.0);
        inst.blocks.push(b);
        inst
    }

    #[test]
    fn trace_minimization() {
        let sol = ClarabelBackend::default().solve(&trace_instance()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.objective - 3.0).abs() < 1e-6);
    }

    #[test]
    fn infeasible_status() {
        // y ≥ 1 and y ≤ 0
        let mut inst = SdpInstance::new(1);
        inst.objective[0] = 1.0;
        let mut b = SdpBlock::new(BlockKind::Nonneg, 2);
        b.push(1, 0, 0, 1.0);
        b.push(0, 0, 0, 1.0);
        b.push(1, 1, 1, -1.0);
        inst.blocks.push(b);
        let sol = ClarabelBackend::default().solve(&inst).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn equality_block_and_sdpa_round_trip() {
        let mut inst = trace_instance();
        // y2 = 0.5
        let mut z = SdpBlock::new(BlockKind::Zero, 1);
        z.push(2, 0, 0, 1.0);
        z.push(0, 0, 0, 0.5);
        inst.blocks.push(z);
        let direct = ClarabelBackend::default().solve(&inst).unwrap();
        let text = inst.to_sdpa();
        let parsed = SdpInstance::from_sdpa(&text).unwrap();
        assert_eq!(parsed.blocks.len(), 3);
        assert_eq!(parsed.to_sdpa(), text);
        let again = ClarabelBackend::default().solve(&parsed).unwrap();
        assert!((direct.objective - again.objective).abs() < 1e-6);
        assert!((direct.y[1] - 0.5).abs() < 1e-6);
        // (y1 − 1)(y3 − 2) ≥ 1/4 with y1 + y3 minimal: y1 − 1 = y3 − 2 = 1/2
        assert!((direct.objective - 4.0).abs() < 1e-6);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = SdpInstance::from_sdpa("1\n1\n2\n1.0\n0 1 1 x 1.0\n").unwrap_err();
        assert!(matches!(err, SdpError::Parse { line: 5, .. }), "{err}");
    }
}
