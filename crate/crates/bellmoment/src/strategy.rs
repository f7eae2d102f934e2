//! Finite-dimensional strategies built from commuting-hierarchy solutions.
//!
//! A level-n moment matrix over both-party words stores every moment up to
//! degree 2n. Its column space carries a GNS action: a generator maps the
//! vector of word w to the vector of X·w. Images of degree ≤ n stay inside
//! the data; images of degree n+1 get their coordinates from a joint
//! rank-preserving border completion. Each image is pinned by every row
//! word whose product with it reduces back to degree ≤ 2n (lower-degree
//! rows, idempotent cancellations, orthogonality zeros), cells that share
//! an unrecorded degree-(2n+1) word carry one shared unknown so they cannot
//! drift apart, and completeness rows keep each measurement family summing
//! to the identity. That coherence makes the assembled action self-adjoint.
//!
//! The resulting operators reproduce every recorded moment. Consequences,
//! each checked at build time or measurable through the meters below:
//! the strategy's score equals the relaxation value, state-weighted
//! commutators vanish for products inside the degree-2n data horizon, and
//! the sequentialized form shows no signaling up to degree 2n−2. Beyond the
//! horizon the operators need not commute at all; [`commutator_residuals`]
//! reports the raw norm alongside the weighted one to make that visible.
//!
//! Level 1 is a special case: its border has almost no recorded rows, and
//! for most games no self-adjoint completion exists inside the level-1
//! column space. The builder then re-solves one level higher and keeps the
//! result only when the optimum is unchanged, which preserves the promised
//! score while working in a span that is actually big enough.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::algebra::{
    adjoint, canonicalize, enumerate_basis, multiply, Letter, Parties, Party, Word, WordBasis,
};
use crate::extract::{gram_frame, pivot_select, ExtractError, GnsModel};
use crate::relax::{build_standard, HierarchyKind, MomentProblem, MomentSolution, SolveStatus};
use crate::scenario::{score, BellFunctional, Correlation, Scenario};
use crate::sdp::{solve, SolverOptions};

/// Singular values below this are treated as zero in border solves.
const BORDER_SV_CUT: f64 = 1e-10;
/// A border column whose determined rows cannot be matched this well is
/// evidence the data admits no rank-preserving completion.
const BORDER_RESID_TOL: f64 = 1e-6;
/// Left action must be self-adjoint in the Gram inner product.
const ASYM_TOL: f64 = 1e-6;
/// Reproduction of recorded moments by the built operators.
const BORN_TOL: f64 = 1e-6;
/// Strategy score against the relaxation optimum.
const SCORE_TOL: f64 = 1e-6;
/// POVM completeness and symmetry slack.
const POVM_TOL: f64 = 1e-8;
/// Operator positivity slack.
const PSD_TOL: f64 = 1e-8;
/// State normalization slack.
const UNIT_TOL: f64 = 1e-8;
/// Sequentialization requires near-projective measurements.
const PROJ_GATE: f64 = 1e-6;
/// Total post-measurement weight per input.
const POST_TRACE_TOL: f64 = 1e-8;
/// A one-level lift is only accepted when it does not move the optimum.
const LIFT_AGREE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("expected a solved standard-hierarchy moment problem")]
    NotStandard,
    #[error("solution shape does not match the problem")]
    ShapeMismatch,
    #[error("gram matrix condition number {0:.3e} exceeds the safe limit")]
    IllConditioned(f64),
    #[error("no rank-preserving border completion at level {level}, data residual {residual:.3e}")]
    BorderInfeasible { level: usize, residual: f64 },
    #[error("strategy invariant violated: {0}")]
    InvariantViolation(String),
    #[error("operators are not projective, worst ‖X²−X‖_F = {0:.3e}")]
    NotProjective(f64),
    #[error("scenario mismatch: {0}")]
    ScenarioMismatch(String),
}

/// Two-party strategy in an orthonormal frame: a unit state vector and one
/// measurement family per input per party, all symmetric on R^dim.
#[derive(Debug, Clone)]
pub struct FiniteStrategy {
    pub dim: usize,
    /// Unit state vector; the density form is `state·stateᵀ`.
    pub state: DVector<f64>,
    /// `alice_ops[x][a]`, each symmetric `dim × dim`.
    pub alice_ops: Vec<Vec<DMatrix<f64>>>,
    /// `bob_ops[y][b]`, each symmetric `dim × dim`.
    pub bob_ops: Vec<Vec<DMatrix<f64>>>,
    /// Hierarchy level of the data the strategy was built from.
    pub level: usize,
}

/// Alice-first sequential form of a [`FiniteStrategy`]: measuring input x
/// and seeing outcome a leaves the subnormalized state `post_states[x][a]`,
/// which Bob then measures.
#[derive(Debug, Clone)]
pub struct SequentialStrategy {
    pub dim: usize,
    /// `post_states[x][a] = Ã·σ·Ã`, outer products so positive by build.
    pub post_states: Vec<Vec<DMatrix<f64>>>,
    pub bob_ops: Vec<Vec<DMatrix<f64>>>,
    /// Strategy the sequential form was derived from.
    pub source: FiniteStrategy,
}

/// Commutation quality of a strategy at a given word-degree budget.
#[derive(Debug, Clone, Copy)]
pub struct CommutatorReport {
    /// max |⟨σ, [Ã,B̃]·P⟩| over monomials P with deg([Ã,B̃]P) inside the
    /// budget, the commutator counting as degree 2.
    pub weighted: f64,
    /// max ‖[Ã,B̃]‖_F over measurement pairs, with no state weighting.
    pub frobenius: f64,
}

impl FiniteStrategy {
    /// Scenario implied by the operator table shape.
    pub fn scenario(&self) -> Scenario {
        Scenario {
            n_x: self.alice_ops.len(),
            n_y: self.bob_ops.len(),
            n_a: self.alice_ops.first().map_or(0, Vec::len),
            n_b: self.bob_ops.first().map_or(0, Vec::len),
        }
    }

    fn op(&self, l: &Letter) -> &DMatrix<f64> {
        match l.party {
            Party::Alice => &self.alice_ops[l.input][l.outcome],
            Party::Bob => &self.bob_ops[l.input][l.outcome],
        }
    }

    /// Word evaluated on the state: `π(w)·state`, letters applied from the
    /// right.
    fn word_vector(&self, w: &Word) -> DVector<f64> {
        let mut v = self.state.clone();
        for l in w.letters().iter().rev() {
            v = self.op(l) * v;
        }
        v
    }

    /// Born-rule behavior `p(ab|xy) = ⟨σ, Ã_{a|x}·B̃_{b|y}⟩`.
    pub fn correlation(&self) -> Correlation {
        let scn = self.scenario();
        let mut p = Correlation::new(scn);
        for x in 0..scn.n_x {
            for a in 0..scn.n_a {
                let left = self.alice_ops[x][a].transpose() * &self.state;
                for y in 0..scn.n_y {
                    for b in 0..scn.n_b {
                        let right = &self.bob_ops[y][b] * &self.state;
                        p.set(a, b, x, y, left.dot(&right));
                    }
                }
            }
        }
        p
    }

    /// Expected payoff of the strategy under a functional.
    pub fn score(&self, f: &BellFunctional) -> Result<f64, StrategyError> {
        if f.scenario != self.scenario() {
            return Err(StrategyError::ScenarioMismatch(format!(
                "strategy has shape {:?}, functional wants {:?}",
                self.scenario(),
                f.scenario
            )));
        }
        score(f, &self.correlation())
            .map_err(|e| StrategyError::ScenarioMismatch(e.to_string()))
    }

    /// Checks the structural invariants: unit state, symmetric operators,
    /// positivity within 1e-8, and each family summing to the identity
    /// within 1e-8.
    pub fn verify(&self) -> Result<(), StrategyError> {
        let scn = self.scenario();
        if scn.n_x == 0 || scn.n_y == 0 || scn.n_a == 0 || scn.n_b == 0 {
            return Err(StrategyError::ShapeMismatch);
        }
        if self.state.len() != self.dim {
            return Err(StrategyError::ShapeMismatch);
        }
        let unit = (self.state.norm() - 1.0).abs();
        if unit > UNIT_TOL {
            return Err(StrategyError::InvariantViolation(format!(
                "state norm misses 1 by {unit:.3e}"
            )));
        }
        let eye = DMatrix::<f64>::identity(self.dim, self.dim);
        for (name, fam) in [("alice", &self.alice_ops), ("bob", &self.bob_ops)] {
            for per_input in fam {
                let mut sum = DMatrix::zeros(self.dim, self.dim);
                for m in per_input {
                    if m.nrows() != self.dim || m.ncols() != self.dim {
                        return Err(StrategyError::ShapeMismatch);
                    }
                    let asym = (m - m.transpose()).norm();
                    if asym > POVM_TOL {
                        return Err(StrategyError::InvariantViolation(format!(
                            "{name} operator is asymmetric by {asym:.3e}"
                        )));
                    }
                    let sym = (m + m.transpose()) * 0.5;
                    let min_eig = sym.symmetric_eigen().eigenvalues.min();
                    if min_eig < -PSD_TOL {
                        return Err(StrategyError::InvariantViolation(format!(
                            "{name} operator has eigenvalue {min_eig:.3e}"
                        )));
                    }
                    sum += m;
                }
                let defect = (&sum - &eye).norm();
                if defect > POVM_TOL {
                    return Err(StrategyError::InvariantViolation(format!(
                        "{name} family misses completeness by {defect:.3e}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Repackages an extracted sequential-hierarchy model in the orthonormal
    /// frame. `level` records the hierarchy level the model came from.
    pub fn from_gns(model: &GnsModel, level: usize) -> Result<Self, StrategyError> {
        let (half, invhalf, _) = gram_frame(&model.gram).map_err(map_gram_err)?;
        let phys = |m: &DMatrix<f64>| {
            let p = &half * m * &invhalf;
            (&p + p.transpose()) * 0.5
        };
        let s = FiniteStrategy {
            dim: model.dim,
            state: &half * &model.omega,
            alice_ops: model
                .alice_ops
                .iter()
                .map(|per_x| per_x.iter().map(&phys).collect())
                .collect(),
            bob_ops: model
                .bob_ops
                .iter()
                .map(|per_y| per_y.iter().map(&phys).collect())
                .collect(),
            level,
        };
        s.verify()?;
        Ok(s)
    }
}

impl SequentialStrategy {
    pub fn scenario(&self) -> Scenario {
        Scenario {
            n_x: self.post_states.len(),
            n_y: self.bob_ops.len(),
            n_a: self.post_states.first().map_or(0, Vec::len),
            n_b: self.bob_ops.first().map_or(0, Vec::len),
        }
    }

    /// `p(ab|xy) = ⟨post_states[x][a], B̃_{b|y}⟩`.
    pub fn correlation(&self) -> Correlation {
        let scn = self.scenario();
        let mut p = Correlation::new(scn);
        for x in 0..scn.n_x {
            for a in 0..scn.n_a {
                for y in 0..scn.n_y {
                    for b in 0..scn.n_b {
                        let v = (&self.post_states[x][a] * &self.bob_ops[y][b]).trace();
                        p.set(a, b, x, y, v);
                    }
                }
            }
        }
        p
    }

    pub fn score(&self, f: &BellFunctional) -> Result<f64, StrategyError> {
        if f.scenario != self.scenario() {
            return Err(StrategyError::ScenarioMismatch(format!(
                "strategy has shape {:?}, functional wants {:?}",
                self.scenario(),
                f.scenario
            )));
        }
        score(f, &self.correlation())
            .map_err(|e| StrategyError::ScenarioMismatch(e.to_string()))
    }
}

fn map_gram_err(e: ExtractError) -> StrategyError {
    match e {
        ExtractError::IllConditioned(c) => StrategyError::IllConditioned(c),
        other => StrategyError::InvariantViolation(other.to_string()),
    }
}

/// Value of a canonical word of degree ≤ 2n inside the moment matrix, found
/// by splitting the word in half; both halves then index basis rows.
fn moment_value(
    gamma: &DMatrix<f64>,
    basis: &WordBasis,
    c: &Word,
) -> Result<f64, StrategyError> {
    let ls = c.letters();
    let k = ls.len() / 2;
    let rev: Vec<Letter> = ls[..k].iter().rev().copied().collect();
    let lw = canonicalize(&rev, true);
    let rw = canonicalize(&ls[k..], true);
    match (basis.position(&lw), basis.position(&rw)) {
        (Some(pl), Some(pr)) => Ok(gamma[(pl, pr)]),
        _ => Err(StrategyError::InvariantViolation(format!(
            "moment {c} has no degree split inside the basis"
        ))),
    }
}

fn all_letters(scn: &Scenario) -> Vec<Letter> {
    let mut out = Vec::new();
    for x in 0..scn.n_x {
        for a in 0..scn.n_a {
            out.push(Letter::alice(a, x));
        }
    }
    for y in 0..scn.n_y {
        for b in 0..scn.n_b {
            out.push(Letter::bob(b, y));
        }
    }
    out
}

/// Solved coordinates, one column per degree-(n+1) image word the left
/// action needs.
struct BorderCompletion {
    cols: HashMap<Word, DVector<f64>>,
}

/// Past this many unknowns the dense completion solve is not attempted.
const BORDER_UNKNOWN_CAP: usize = 6_000;

/// Joint rank-preserving completion of every border column.
///
/// Unknowns are the image coordinates in the selected frame together with
/// one shared value per unrecorded canonical word of degree 2n+1. Rows tie
/// each image to every moment the data does determine, make cells that
/// share an unrecorded word agree, and keep each measurement family summing
/// to the data's own column. Solving per column instead would let two cells
/// of the same word drift apart, and the assembled action would stop being
/// self-adjoint; the shared unknowns are what rule that out.
fn complete_borders(
    gamma: &DMatrix<f64>,
    basis: &WordBasis,
    sel: &[usize],
    gram: &DMatrix<f64>,
    scn: &Scenario,
    n: usize,
) -> Result<BorderCompletion, StrategyError> {
    let r = sel.len();
    let letters = all_letters(scn);

    let mut images: Vec<Word> = Vec::new();
    let mut image_idx: HashMap<Word, usize> = HashMap::new();
    for lt in &letters {
        for &sj in sel {
            let mut raw = vec![*lt];
            raw.extend_from_slice(basis.words[sj].letters());
            let u = canonicalize(&raw, true);
            if !u.is_zero() && u.degree() == n + 1 && !image_idx.contains_key(&u) {
                image_idx.insert(u.clone(), images.len());
                images.push(u);
            }
        }
    }
    if images.is_empty() {
        return Ok(BorderCompletion {
            cols: HashMap::new(),
        });
    }

    // the moment functional is hermitian, so a word and its adjoint share
    // one unknown; that sharing is what makes the action self-adjoint
    let fold = |c: &Word| -> Word {
        let adj = adjoint(c, true);
        if adj < *c {
            adj
        } else {
            c.clone()
        }
    };
    let mut vwords: Vec<Word> = Vec::new();
    let mut v_idx: HashMap<Word, usize> = HashMap::new();
    for u in &images {
        for w in &basis.words {
            let c = multiply(&adjoint(w, true), u, true);
            if !c.is_zero() && c.degree() == 2 * n + 1 {
                let key = fold(&c);
                if !v_idx.contains_key(&key) {
                    v_idx.insert(key.clone(), vwords.len());
                    vwords.push(key);
                }
            }
        }
    }

    let nu = images.len() * r;
    let unknowns = nu + vwords.len();
    if unknowns > BORDER_UNKNOWN_CAP {
        return Err(StrategyError::InvariantViolation(format!(
            "border completion needs {unknowns} unknowns, past the supported problem size"
        )));
    }

    // rows as sparse (column, coefficient) lists against the layout
    // [coords of image 0 | coords of image 1 | ... | unrecorded values]
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    for (ui, u) in images.iter().enumerate() {
        for (p, w) in basis.words.iter().enumerate() {
            let c = multiply(&adjoint(w, true), u, true);
            let mut coeffs: Vec<(usize, f64)> =
                (0..r).map(|k| (ui * r + k, gamma[(sel[k], p)])).collect();
            let rhs = if c.is_zero() {
                0.0
            } else if c.degree() <= 2 * n {
                moment_value(gamma, basis, &c)?
            } else {
                coeffs.push((nu + v_idx[&fold(&c)], -1.0));
                0.0
            };
            rows.push((coeffs, rhs));
        }
    }
    for (n_inputs, n_outcomes, mk) in [
        (scn.n_x, scn.n_a, Letter::alice as fn(usize, usize) -> Letter),
        (scn.n_y, scn.n_b, Letter::bob as fn(usize, usize) -> Letter),
    ] {
        for input in 0..n_inputs {
            for (j, &sj) in sel.iter().enumerate() {
                let mut border_terms: Vec<usize> = Vec::new();
                let mut data_sum = vec![0.0_f64; r];
                for o in 0..n_outcomes {
                    let mut raw = vec![mk(o, input)];
                    raw.extend_from_slice(basis.words[sj].letters());
                    let u = canonicalize(&raw, true);
                    if u.is_zero() {
                        continue;
                    }
                    if u.degree() <= n {
                        let pos = basis.position(&u).expect("in-basis image");
                        for (i, acc) in data_sum.iter_mut().enumerate() {
                            *acc += gamma[(sel[i], pos)];
                        }
                    } else {
                        border_terms.push(image_idx[&u]);
                    }
                }
                if border_terms.is_empty() {
                    continue;
                }
                for i in 0..r {
                    let mut coeffs: Vec<(usize, f64)> = Vec::new();
                    for &ui in &border_terms {
                        for k in 0..r {
                            coeffs.push((ui * r + k, gram[(i, k)]));
                        }
                    }
                    rows.push((coeffs, gram[(i, j)] - data_sum[i]));
                }
            }
        }
    }

    let m = rows.len();
    let mut amat = DMatrix::<f64>::zeros(m, unknowns);
    let mut rhs = DVector::<f64>::zeros(m);
    for (ri, (coeffs, b)) in rows.iter().enumerate() {
        for &(c, v) in coeffs {
            amat[(ri, c)] += v;
        }
        rhs[ri] = *b;
    }
    let x = amat
        .clone()
        .svd(true, true)
        .solve(&rhs, BORDER_SV_CUT)
        .map_err(|e| StrategyError::InvariantViolation(e.to_string()))?;
    let resid = (&amat * &x - &rhs).amax();
    if resid > BORDER_RESID_TOL {
        return Err(StrategyError::BorderInfeasible {
            level: n,
            residual: resid,
        });
    }
    let cols = images
        .iter()
        .enumerate()
        .map(|(ui, u)| {
            (
                u.clone(),
                DVector::from_fn(r, |k, _| x[ui * r + k]),
            )
        })
        .collect();
    Ok(BorderCompletion { cols })
}

/// Reads the relaxation objective back into functional form. Standard
/// problems address the objective purely through degree-1 joint cells, so
/// the map inverts exactly.
fn functional_from_problem(prob: &MomentProblem) -> Result<BellFunctional, StrategyError> {
    let basis = &prob.meta.bases[0];
    let mut f = BellFunctional::new(prob.meta.scenario, "relaxation objective");
    f.constant = prob.objective_constant;
    for (cell, c) in &prob.objective {
        let row = &basis.words[cell.row];
        let col = &basis.words[cell.col];
        match (row.letters(), col.letters()) {
            ([al], [bl]) if al.party == Party::Alice && bl.party == Party::Bob => {
                f.set_coeff(al.outcome, bl.outcome, al.input, bl.input, *c);
            }
            _ => {
                return Err(StrategyError::InvariantViolation(
                    "objective cell does not address a degree-1 joint moment".into(),
                ))
            }
        }
    }
    Ok(f)
}

/// Builds a finite-dimensional strategy from a solved standard-hierarchy
/// relaxation. The dimension is the numerical rank of the moment matrix at
/// `rel_tol`. The built operators reproduce every moment the data records;
/// the parties' operators need not commute, but state-weighted commutators
/// vanish for all products inside the degree-2n budget.
///
/// A column space that is too small to host a self-adjoint action (the
/// usual situation at level 1, where the border has almost no recorded
/// rows to pin it) makes the builder re-solve the same objective one level
/// higher. The lifted result is accepted only when the optimum value is
/// unchanged, so the returned strategy still scores `sol.primal_value`;
/// its `level` field then reports the level actually used.
pub fn almost_commuting_from_npa(
    prob: &MomentProblem,
    sol: &MomentSolution,
    rel_tol: f64,
) -> Result<FiniteStrategy, StrategyError> {
    match build_at_level(prob, sol, rel_tol) {
        Err(StrategyError::BorderInfeasible { level, residual }) => {
            let f = functional_from_problem(prob)?;
            let lifted = build_standard(&f, level + 1).map_err(|e| {
                StrategyError::InvariantViolation(format!("lift rebuild failed: {e}"))
            })?;
            let lsol = solve(&lifted, &SolverOptions::tight());
            if !matches!(lsol.status, SolveStatus::Optimal | SolveStatus::NearOptimal) {
                return Err(StrategyError::InvariantViolation(format!(
                    "no border completion at level {level} (residual {residual:.3e}) \
                     and the level-{} lift did not solve cleanly",
                    level + 1
                )));
            }
            if (lsol.primal_value - sol.primal_value).abs() > LIFT_AGREE_TOL {
                return Err(StrategyError::InvariantViolation(format!(
                    "no border completion at level {level} (residual {residual:.3e}) \
                     and lifting moves the optimum from {:.9} to {:.9}",
                    sol.primal_value, lsol.primal_value
                )));
            }
            build_at_level(&lifted, &lsol, rel_tol)
        }
        other => other,
    }
}

fn build_at_level(
    prob: &MomentProblem,
    sol: &MomentSolution,
    rel_tol: f64,
) -> Result<FiniteStrategy, StrategyError> {
    if prob.meta.kind != HierarchyKind::Standard {
        return Err(StrategyError::NotStandard);
    }
    if sol.values.len() != prob.blocks.len() {
        return Err(StrategyError::ShapeMismatch);
    }
    let basis = &prob.meta.bases[0];
    let side = basis.len();
    let g0 = &sol.values[0];
    if g0.nrows() != side || g0.ncols() != side {
        return Err(StrategyError::ShapeMismatch);
    }
    let n = prob.meta.level;
    let scn = prob.meta.scenario;
    let gamma = (g0 + g0.transpose()) * 0.5;

    let sel = pivot_select(&gamma, rel_tol);
    let r = sel.len();
    if r == 0 {
        return Err(StrategyError::InvariantViolation(
            "moment matrix is numerically zero".into(),
        ));
    }
    let gram = DMatrix::from_fn(r, r, |i, j| gamma[(sel[i], sel[j])]);
    let (half, invhalf, ginv) = gram_frame(&gram).map_err(map_gram_err)?;

    let coords = |pos: usize| -> DVector<f64> {
        &ginv * DVector::from_fn(r, |i, _| gamma[(sel[i], pos)])
    };

    let borders = complete_borders(&gamma, basis, &sel, &gram, &scn, n)?;

    // Left action of one generator in the selected frame, then moved to the
    // orthonormal frame and symmetrized. The asymmetry removed that way is
    // reported back so a failed self-adjointness shows up as an error, not
    // as silent damage.
    let build_op = |lt: Letter| -> Result<(DMatrix<f64>, f64), StrategyError> {
        let mut t = DMatrix::<f64>::zeros(r, r);
        for (j, &sj) in sel.iter().enumerate() {
            let mut raw = vec![lt];
            raw.extend_from_slice(basis.words[sj].letters());
            let u = canonicalize(&raw, true);
            if u.is_zero() {
                continue;
            }
            if u.degree() <= n {
                let pos = basis
                    .position(&u)
                    .expect("image of degree ≤ n is a basis word");
                t.set_column(j, &coords(pos));
            } else {
                t.set_column(j, &borders.cols[&u]);
            }
        }
        let phys = &half * t * &invhalf;
        let asym = (&phys - phys.transpose()).norm() * 0.5;
        Ok(((&phys + phys.transpose()) * 0.5, asym))
    };

    let mut asym_worst = 0.0_f64;
    let mut alice_ops = Vec::with_capacity(scn.n_x);
    for x in 0..scn.n_x {
        let mut per = Vec::with_capacity(scn.n_a);
        for a in 0..scn.n_a {
            let (m, asym) = build_op(Letter::alice(a, x))?;
            asym_worst = asym_worst.max(asym);
            per.push(m);
        }
        alice_ops.push(per);
    }
    let mut bob_ops = Vec::with_capacity(scn.n_y);
    for y in 0..scn.n_y {
        let mut per = Vec::with_capacity(scn.n_b);
        for b in 0..scn.n_b {
            let (m, asym) = build_op(Letter::bob(b, y))?;
            asym_worst = asym_worst.max(asym);
            per.push(m);
        }
        bob_ops.push(per);
    }
    if asym_worst > ASYM_TOL {
        return Err(StrategyError::InvariantViolation(format!(
            "left action is not self-adjoint, asymmetry {asym_worst:.3e}"
        )));
    }

    let pos_one = basis.position(&Word::one()).expect("unit word is indexed");
    let strategy = FiniteStrategy {
        dim: r,
        state: &half * coords(pos_one),
        alice_ops,
        bob_ops,
        level: n,
    };
    strategy.verify()?;

    // Every recorded moment must come back through the operators.
    let vecs: Vec<DVector<f64>> =
        basis.words.iter().map(|w| strategy.word_vector(w)).collect();
    let mut born_worst = 0.0_f64;
    for i in 0..side {
        for j in i..side {
            born_worst = born_worst.max((vecs[i].dot(&vecs[j]) - gamma[(i, j)]).abs());
        }
    }
    if born_worst > BORN_TOL {
        return Err(StrategyError::InvariantViolation(format!(
            "operators misreproduce a recorded moment by {born_worst:.3e}"
        )));
    }
    let mut sc = prob.objective_constant;
    for (cell, c) in &prob.objective {
        sc += c * vecs[cell.row].dot(&vecs[cell.col]);
    }
    if (sc - sol.primal_value).abs() > SCORE_TOL {
        return Err(StrategyError::InvariantViolation(format!(
            "strategy score {sc:.9} drifts from the relaxation value {:.9}",
            sol.primal_value
        )));
    }
    Ok(strategy)
}

/// Turns a strategy into its Alice-first sequential form. Requires every
/// operator to be projective within 1e-6; the post-measurement states are
/// then `Ã·σ·Ã`, built as outer products so positivity is exact.
pub fn sequentialize(s: &FiniteStrategy) -> Result<SequentialStrategy, StrategyError> {
    s.verify()?;
    let mut worst = 0.0_f64;
    for fam in [&s.alice_ops, &s.bob_ops] {
        for per_input in fam {
            for m in per_input {
                worst = worst.max((m * m - m).norm());
            }
        }
    }
    if worst > PROJ_GATE {
        return Err(StrategyError::NotProjective(worst));
    }
    let scn = s.scenario();
    let mut post_states = Vec::with_capacity(scn.n_x);
    for x in 0..scn.n_x {
        let mut per = Vec::with_capacity(scn.n_a);
        let mut weight = 0.0;
        for a in 0..scn.n_a {
            let v = &s.alice_ops[x][a] * &s.state;
            weight += v.norm_squared();
            per.push(&v * v.transpose());
        }
        if (weight - 1.0).abs() > POST_TRACE_TOL {
            return Err(StrategyError::InvariantViolation(format!(
                "post-measurement weight for input {x} sums to {weight:.9}"
            )));
        }
        post_states.push(per);
    }
    Ok(SequentialStrategy {
        dim: s.dim,
        post_states,
        bob_ops: s.bob_ops.clone(),
        source: s.clone(),
    })
}

/// State-weighted and raw commutator sizes at a word-degree budget. The
/// weighted maximum runs over every canonical monomial P with
/// deg([Ã,B̃]·P) ≤ max_deg, the commutator counting as degree 2.
pub fn commutator_residuals(s: &FiniteStrategy, max_deg: usize) -> CommutatorReport {
    let scn = s.scenario();
    let mut frobenius = 0.0_f64;
    let mut pairs = Vec::new();
    for x in 0..scn.n_x {
        for a in 0..scn.n_a {
            for y in 0..scn.n_y {
                for b in 0..scn.n_b {
                    let k = &s.alice_ops[x][a] * &s.bob_ops[y][b]
                        - &s.bob_ops[y][b] * &s.alice_ops[x][a];
                    frobenius = frobenius.max(k.norm());
                    pairs.push(k.transpose() * &s.state);
                }
            }
        }
    }
    let mut weighted = 0.0_f64;
    if max_deg >= 2 {
        for p in &enumerate_basis(&scn, Parties::Both, max_deg - 2, true).words {
            let v = s.word_vector(p);
            for left in &pairs {
                weighted = weighted.max(left.dot(&v).abs());
            }
        }
    }
    CommutatorReport {
        weighted,
        frobenius,
    }
}

/// Worst signaling the sequential form shows to Bob: the largest
/// |⟨Σ_a post_states[x][a] − σ, P(B̃)⟩| over inputs x and canonical Bob
/// monomials P of degree ≤ max_deg.
pub fn signaling_residual(seq: &SequentialStrategy, max_deg: usize) -> f64 {
    let scn = seq.scenario();
    let rho = &seq.source.state * seq.source.state.transpose();
    let words = enumerate_basis(&scn, Parties::BobOnly, max_deg, false);
    let mut worst = 0.0_f64;
    for x in 0..scn.n_x {
        let mut delta = -rho.clone();
        for post in &seq.post_states[x] {
            delta += post;
        }
        for w in &words.words {
            let mut p = delta.clone();
            for l in w.letters() {
                p *= &seq.bob_ops[l.input][l.outcome];
            }
            worst = worst.max(p.trace().abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::gns_build;
    use crate::relax::{build_sequential, build_standard, SolveStatus};
    use crate::scenario::load_game_str;
    use crate::sdp::{solve, SolverOptions};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const TSIRELSON: f64 = 0.8535533905932737;

    fn chsh() -> BellFunctional {
        load_game_str(include_str!("../data/games/chsh.json")).unwrap()
    }

    fn chsh_strategy(n: usize) -> FiniteStrategy {
        let prob = build_standard(&chsh(), n).unwrap();
        let sol = solve(&prob, &SolverOptions::tight());
        assert!(
            matches!(sol.status, SolveStatus::Optimal | SolveStatus::NearOptimal),
            "status {:?}",
            sol.status
        );
        almost_commuting_from_npa(&prob, &sol, 1e-8).unwrap()
    }

    /// Scalar strategy answering 0 everywhere: operators are the numbers
    /// 0 and 1, so both parties commute exactly.
    fn deterministic_strategy() -> FiniteStrategy {
        let scalar = |v: f64| DMatrix::from_element(1, 1, v);
        let family = |n_inputs: usize| {
            (0..n_inputs)
                .map(|_| vec![scalar(1.0), scalar(0.0)])
                .collect::<Vec<_>>()
        };
        FiniteStrategy {
            dim: 1,
            state: DVector::from_element(1, 1.0),
            alice_ops: family(2),
            bob_ops: family(2),
            level: 1,
        }
    }

    #[test]
    fn chsh_level_one_strategy_hits_tsirelson() {
        let s = chsh_strategy(1);
        s.verify().unwrap();
        // the rank-3 level-1 span cannot host the action, so the builder
        // lifts once; levels 1 and 2 share the optimum, so the score is
        // still the level-1 value
        assert_eq!(s.level, 2);
        assert_eq!(s.dim, 4);
        assert_abs_diff_eq!(s.score(&chsh()).unwrap(), TSIRELSON, epsilon = 1e-6);
        assert!(s.correlation().is_valid(1e-6));
    }

    #[test]
    fn chsh_level_two_weighted_commutator_vanishes_inside_the_budget() {
        let s = chsh_strategy(2);
        assert_abs_diff_eq!(s.score(&chsh()).unwrap(), TSIRELSON, epsilon = 1e-6);
        let rep = commutator_residuals(&s, 2 * s.level);
        assert!(
            rep.weighted <= 1e-8,
            "weighted commutator {:.3e} at budget {}",
            rep.weighted,
            2 * s.level
        );
        // the optimum self-tests the commuting two-qubit pair, so here even
        // the raw norm collapses
        assert!(rep.frobenius <= 1e-6, "frobenius {:.3e}", rep.frobenius);
    }

    #[test]
    fn raw_commutator_norm_reports_noncommutation() {
        // qubit projectors at 45 degrees on a shared space, no commutation
        let c = std::f64::consts::FRAC_PI_4.cos();
        let s2 = std::f64::consts::FRAC_PI_4.sin();
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let q = DMatrix::from_row_slice(2, 2, &[c * c, c * s2, c * s2, s2 * s2]);
        let id = DMatrix::identity(2, 2);
        let s = FiniteStrategy {
            dim: 2,
            state: DVector::from_row_slice(&[1.0, 0.0]),
            alice_ops: vec![vec![p.clone(), &id - &p]],
            bob_ops: vec![vec![q.clone(), &id - &q]],
            level: 1,
        };
        s.verify().unwrap();
        let rep = commutator_residuals(&s, 2);
        assert!(rep.frobenius > 0.1, "frobenius {:.3e}", rep.frobenius);
    }

    #[test]
    fn deterministic_strategy_commutes_exactly_and_sequentializes() {
        let s = deterministic_strategy();
        s.verify().unwrap();
        let rep = commutator_residuals(&s, 4);
        assert_eq!(rep.weighted, 0.0);
        assert_eq!(rep.frobenius, 0.0);

        let seq = sequentialize(&s).unwrap();
        // post states collapse to the source state or to zero
        for x in 0..2 {
            assert_eq!(seq.post_states[x][0][(0, 0)], 1.0);
            assert_eq!(seq.post_states[x][1][(0, 0)], 0.0);
        }
        assert_eq!(signaling_residual(&seq, 4), 0.0);
        assert_abs_diff_eq!(
            seq.score(&chsh()).unwrap(),
            s.score(&chsh()).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn sequentialize_preserves_score_and_rejects_unsharp_operators() {
        let s = chsh_strategy(2);
        let seq = sequentialize(&s).unwrap();
        assert_abs_diff_eq!(
            seq.score(&chsh()).unwrap(),
            s.score(&chsh()).unwrap(),
            epsilon = 1e-8
        );

        let mut blurred = deterministic_strategy();
        blurred.alice_ops[0] = vec![
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 0.5),
        ];
        match sequentialize(&blurred) {
            Err(StrategyError::NotProjective(w)) => assert!(w > 0.1),
            other => panic!("expected NotProjective, got {other:?}"),
        }
    }

    #[test]
    fn signaling_is_flat_up_to_the_data_horizon() {
        let s = chsh_strategy(2);
        let seq = sequentialize(&s).unwrap();
        let at_horizon = signaling_residual(&seq, 2 * s.level - 2);
        assert!(at_horizon <= 1e-8, "residual {at_horizon:.3e} at degree 2");
        // beyond the horizon the value is only reported; the max over a
        // larger monomial set can only grow
        let beyond = signaling_residual(&seq, 2 * s.level);
        assert!(beyond >= at_horizon);
    }

    #[test]
    fn extracted_gns_model_sequentializes_without_signaling() {
        let prob = build_sequential(&chsh(), 3).unwrap();
        let sol = solve(&prob, &SolverOptions::tight());
        assert_eq!(sol.status, SolveStatus::Optimal);
        let model = gns_build(&prob, &sol, 1e-8).unwrap();
        let s = FiniteStrategy::from_gns(&model, 3).unwrap();
        assert_abs_diff_eq!(s.score(&chsh()).unwrap(), TSIRELSON, epsilon = 1e-6);
        let seq = sequentialize(&s).unwrap();
        assert!(signaling_residual(&seq, 2 * s.level) <= 1e-8);
        assert_abs_diff_eq!(
            seq.score(&chsh()).unwrap(),
            s.score(&chsh()).unwrap(),
            epsilon = 1e-8
        );
    }

    #[test]
    fn rejects_wrong_hierarchies_and_shapes() {
        let seq_prob = build_sequential(&chsh(), 2).unwrap();
        let dummy = MomentSolution {
            values: vec![],
            primal_value: 0.0,
            dual_value: 0.0,
            dual_multipliers: vec![],
            dual_matrices: vec![],
            status: SolveStatus::Optimal,
            residuals: Default::default(),
        };
        assert!(matches!(
            almost_commuting_from_npa(&seq_prob, &dummy, 1e-8),
            Err(StrategyError::NotStandard)
        ));
        let std_prob = build_standard(&chsh(), 1).unwrap();
        assert!(matches!(
            almost_commuting_from_npa(&std_prob, &dummy, 1e-8),
            Err(StrategyError::ShapeMismatch)
        ));
    }

    /// Product strategies on two real qubits: a projector pair per party,
    /// acting on separate tensor factors.
    fn product_strategy(angles: [f64; 4], state: DVector<f64>) -> FiniteStrategy {
        let proj = |theta: f64| {
            let (s, c) = theta.sin_cos();
            let v = DVector::from_vec(vec![c, s]);
            &v * v.transpose()
        };
        let eye = DMatrix::<f64>::identity(2, 2);
        let alice_ops: Vec<Vec<DMatrix<f64>>> = (0..2)
            .map(|x| {
                let p = proj(angles[x]);
                vec![p.kronecker(&eye), (&eye - p).kronecker(&eye)]
            })
            .collect();
        let bob_ops: Vec<Vec<DMatrix<f64>>> = (0..2)
            .map(|y| {
                let p = proj(angles[2 + y]);
                vec![eye.kronecker(&p), eye.kronecker(&(&eye - p))]
            })
            .collect();
        FiniteStrategy {
            dim: 4,
            state,
            alice_ops,
            bob_ops,
            level: 1,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn product_strategies_commute_and_never_signal(
            angles in prop::array::uniform4(0.0..std::f64::consts::PI),
            raw in prop::array::uniform4(-1.0..1.0_f64),
        ) {
            let v = DVector::from_row_slice(&raw);
            prop_assume!(v.norm() > 0.3);
            let s = product_strategy(angles, v.normalize());
            s.verify().unwrap();
            let rep = commutator_residuals(&s, 4);
            prop_assert!(rep.frobenius <= 1e-12);
            prop_assert!(rep.weighted <= 1e-12);
            let seq = sequentialize(&s).unwrap();
            prop_assert!(signaling_residual(&seq, 4) <= 1e-10);
            let diff = (seq.score(&chsh()).unwrap() - s.score(&chsh()).unwrap()).abs();
            prop_assert!(diff <= 1e-9);
        }
    }
}
