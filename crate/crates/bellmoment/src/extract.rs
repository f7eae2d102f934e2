//! Rank-loop detection and extraction of an explicit finite-dimensional
//! strategy from a flat sequential moment solution.
//!
//! A solved sequential problem carries one PSD block Θ(a|x) per Alice
//! outcome-input pair, indexed by Bob's words of degree ≤ n. The strong
//! no-signaling classes make Θ = Σ_a Θ(a|x) the same matrix for every x.
//! The solution is *flat* (has a rank loop) when Θ has the same numerical
//! rank as its leading block over words of degree ≤ n−1. Flat moment data
//! is the moment data of a concrete model: a GNS construction over the
//! degree ≤ n−1 words yields Bob operators acting by left multiplication
//! and Alice operators solved from the per-outcome blocks, and the Born
//! rule of that model reproduces the solved probability cells.
//!
//! Not every optimal solution is flat. CHSH at level 2 is the canonical
//! counterexample: the optimum is the moment data of the qubit strategy,
//! whose full rank is 4 while the degree ≤ 1 words only span 3 dimensions.
//! One level higher the degree ≤ 2 words already exhaust the qubit
//! algebra and the rank loop closes.

use crate::algebra::{canonicalize, Letter, Word};
use crate::relax::{HierarchyKind, MomentProblem, MomentSolution};
use crate::scenario::{score, BellFunctional, Correlation};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Rank comparison below this level is vacuous: there is no proper
/// truncation to compare against.
const MIN_LEVEL: usize = 2;

/// Tolerance pair scanned in addition to the caller's: a rank verdict
/// that changes between them is borderline and reported as not flat.
const BORDER_TOLS: [f64; 2] = [1e-6, 1e-8];

/// Condition-number ceiling on the selected Gram matrix.
const COND_LIMIT: f64 = 1e12;

/// Relative residual above which a border block does not lie in the
/// range of the base block.
const RANGE_TOL: f64 = 1e-8;

const UNIT_TOL: f64 = 1e-8;
const PROJ_TOL: f64 = 1e-8;
const COMPLETE_TOL: f64 = 1e-8;
const POS_TOL: f64 = 1e-8;
const COMMUTANT_TOL: f64 = 1e-6;
const BORN_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("flatness needs level at least 2")]
    LevelTooSmall,
    #[error("expected a solved sequential hierarchy")]
    NotSequential,
    #[error("solution does not match the problem shape")]
    ShapeMismatch,
    #[error("solution is not flat: {0}")]
    NotFlat(String),
    #[error("selected Gram matrix is ill conditioned (cond {0:.3e})")]
    IllConditioned(f64),
    #[error("border block leaves the range of the base (relative residual {0:.3e})")]
    RangeViolation(f64),
    #[error("extracted model violates {0}")]
    InvariantViolation(String),
    #[error("scenario mismatch: {0}")]
    ScenarioMismatch(String),
}

/// Outcome of the rank-loop comparison on one solved sequential problem.
#[derive(Debug, Clone)]
pub struct FlatnessReport {
    /// Numerical rank of Θ over all words of degree ≤ n.
    pub rank_full: usize,
    /// Numerical rank of the leading block over words of degree ≤ n−1.
    pub rank_trunc: usize,
    /// Same comparison per Θ(a|x) block, in problem block order.
    pub per_ax_flat: Vec<bool>,
    /// Tolerance the reported ranks were computed at. Differs from the
    /// requested one only when the verdict flips at a pinned tolerance,
    /// in which case the flipping tolerance is reported.
    pub tol_used: f64,
    pub is_flat: bool,
}

/// Finite-dimensional model carried by a flat solution.
///
/// Operators are coordinate matrices over the selected words; the inner
/// product is ⟨u, v⟩ = uᵀ·gram·v, so an operator M is self-adjoint when
/// gram·M is symmetric. Congruence by the square root of `gram` moves
/// any of them to an orthonormal frame.
#[derive(Debug, Clone)]
pub struct GnsModel {
    pub dim: usize,
    /// Words selected as a basis, a subset of the degree ≤ n−1 words.
    pub basis_words: Vec<Word>,
    /// Coordinates of the cyclic vector representing the word 𝟙.
    pub omega: DVector<f64>,
    /// Gram matrix of the selected words.
    pub gram: DMatrix<f64>,
    /// `bob_ops[y][b]` acts by left multiplication with B_{b|y}.
    pub bob_ops: Vec<Vec<DMatrix<f64>>>,
    /// `alice_ops[x][a]` solves ⟨w, Â v⟩ = Θ(a|x)_{w,v} over the basis.
    pub alice_ops: Vec<Vec<DMatrix<f64>>>,
}

/// Residuals and Born data of a [`GnsModel`] against a functional.
#[derive(Debug, Clone)]
pub struct ModelReport {
    pub correlation: Correlation,
    pub score: f64,
    /// max over (b, y) of ‖P² − P‖_F and ‖P − Pᵀ‖_F in the orthonormal frame.
    pub bob_projection_residual: f64,
    /// max over y of ‖Σ_b P_{b|y} − 𝟙‖_F.
    pub bob_completeness_residual: f64,
    /// Smallest eigenvalue over all Â_{a|x}.
    pub alice_min_eig: f64,
    /// max over x of ‖Σ_a Â_{a|x} − 𝟙‖_F.
    pub alice_completeness_residual: f64,
    /// max over pairs of ‖[Â_{a|x}, P_{b|y}]‖_F.
    pub commutant_residual: f64,
}

/// Count of eigenvalues above `rel_tol · max(λ_max, 1)`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 {
        return 0;
    }
    rank_from_eigs(&sym_eigs(m), rel_tol)
}

fn sym_eigs(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().cloned().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

fn rank_from_eigs(ev: &[f64], rel_tol: f64) -> usize {
    let top = ev.iter().cloned().fold(0.0_f64, f64::max).max(1.0);
    ev.iter().filter(|&&v| v > rel_tol * top).count()
}

fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Number of basis words of degree ≤ n−1. Basis enumeration sorts by
/// degree, so these are a prefix and the truncation is a leading block.
fn trunc_len(prob: &MomentProblem) -> usize {
    let n = prob.meta.level;
    prob.meta.bases[0]
        .words
        .iter()
        .take_while(|w| w.degree() + 1 <= n)
        .count()
}

/// Σ_a Θ(a|x) over the x = 0 blocks, symmetrized. Any other x gives the
/// same matrix up to the solver's feasibility residual.
fn theta_total(prob: &MomentProblem, sol: &MomentSolution) -> DMatrix<f64> {
    let side = prob.meta.bases[0].len();
    let mut th = DMatrix::zeros(side, side);
    for (bidx, &(_, x)) in prob.meta.block_ax.iter().enumerate() {
        if x == 0 {
            th += &sol.values[bidx];
        }
    }
    (&th + th.transpose()) * 0.5
}

fn guard_sequential(
    prob: &MomentProblem,
    sol: &MomentSolution,
) -> Result<(), ExtractError> {
    if prob.meta.kind != HierarchyKind::Sequential {
        return Err(ExtractError::NotSequential);
    }
    if prob.meta.level < MIN_LEVEL {
        return Err(ExtractError::LevelTooSmall);
    }
    if sol.values.len() != prob.blocks.len()
        || sol
            .values
            .iter()
            .zip(&prob.blocks)
            .any(|(v, b)| v.nrows() != b.side || v.ncols() != b.side)
    {
        return Err(ExtractError::ShapeMismatch);
    }
    Ok(())
}

/// Compares the numerical rank of Θ = Σ_a Θ(a|x) against its truncation
/// to degree ≤ n−1 words, and the same per block.
///
/// A verdict that flips between `rel_tol` and the pinned pair 1e-6/1e-8
/// is borderline: the report then carries the flipping tolerance and
/// `is_flat = false`, because extraction from near-flat data produces
/// models whose invariants cannot be verified.
pub fn check_flat(
    prob: &MomentProblem,
    sol: &MomentSolution,
    rel_tol: f64,
) -> Result<FlatnessReport, ExtractError> {
    guard_sequential(prob, sol)?;
    let theta = theta_total(prob, sol);
    let d = trunc_len(prob);
    let ev_full = sym_eigs(&theta);
    let ev_trunc = sym_eigs(&theta.view((0, 0), (d, d)).into_owned());

    let agrees =
        |tol: f64| rank_from_eigs(&ev_full, tol) == rank_from_eigs(&ev_trunc, tol);
    let mut tol_used = rel_tol;
    let mut is_flat = agrees(rel_tol);
    if is_flat {
        for &tol in &BORDER_TOLS {
            if !agrees(tol) {
                tol_used = tol;
                is_flat = false;
                break;
            }
        }
    }

    let per_ax_flat = sol
        .values
        .iter()
        .map(|v| {
            let ev_b = sym_eigs(v);
            let ev_bt = sym_eigs(&v.view((0, 0), (d, d)).into_owned());
            rank_from_eigs(&ev_b, rel_tol) == rank_from_eigs(&ev_bt, rel_tol)
        })
        .collect();

    Ok(FlatnessReport {
        rank_full: rank_from_eigs(&ev_full, tol_used),
        rank_trunc: rank_from_eigs(&ev_trunc, tol_used),
        per_ax_flat,
        tol_used,
        is_flat,
    })
}

/// Completes a PSD base block `a` and a border `b` to the rank-preserving
/// extension [[A, B], [Bᵀ, ZᵀAZ]] where A·Z = B.
///
/// The solve uses the eigenvalue pseudoinverse of `a` cut at
/// `rel_tol · max(λ_max, 1)`; a border column outside the range of `a`
/// larger than [`RANGE_TOL`] relative to ‖B‖ is a [`ExtractError::RangeViolation`].
pub fn flat_extend(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    rel_tol: f64,
) -> Result<DMatrix<f64>, ExtractError> {
    let r = a.nrows();
    let k = b.ncols();
    if a.ncols() != r || b.nrows() != r {
        return Err(ExtractError::ShapeMismatch);
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max).max(1.0);
    let cut = rel_tol * top;
    let pinv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| {
        if v > cut {
            1.0 / v
        } else {
            0.0
        }
    }));
    let z = &eig.eigenvectors * pinv_diag * eig.eigenvectors.transpose() * b;
    let bnorm = b.norm();
    if bnorm > 0.0 {
        let resid = (&sym * &z - b).norm() / bnorm;
        if resid > RANGE_TOL {
            return Err(ExtractError::RangeViolation(resid));
        }
    }
    let c = z.transpose() * &sym * &z;
    let mut out = DMatrix::zeros(r + k, r + k);
    out.view_mut((0, 0), (r, r)).copy_from(&sym);
    out.view_mut((0, r), (r, k)).copy_from(b);
    out.view_mut((r, 0), (k, r)).copy_from(&b.transpose());
    out.view_mut((r, r), (k, k)).copy_from(&c);
    Ok(out)
}

/// Greedy pivoted Cholesky: selects rows of `m` (symmetric PSD) until the
/// residual diagonal drops to `rel_tol · max(diag, 1)`. Returned indices
/// are sorted ascending, so the word order of the basis survives.
pub(crate) fn pivot_select(m: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let n = m.nrows();
    let mut resid = (m + m.transpose()) * 0.5;
    let scale = resid.diagonal().iter().cloned().fold(0.0_f64, f64::max).max(1.0);
    let mut used = vec![false; n];
    let mut sel = Vec::new();
    loop {
        let mut best = None;
        let mut best_d = rel_tol * scale;
        for i in 0..n {
            if !used[i] && resid[(i, i)] > best_d {
                best_d = resid[(i, i)];
                best = Some(i);
            }
        }
        let Some(p) = best else { break };
        used[p] = true;
        sel.push(p);
        let col = resid.column(p).into_owned();
        resid -= &col * col.transpose() / best_d;
    }
    sel.sort_unstable();
    sel
}

/// Square root, inverse square root, and inverse of a PD Gram matrix.
/// Conditioning past [`COND_LIMIT`] or a nonpositive spectrum is an error.
pub(crate) fn gram_frame(
    gram: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>), ExtractError> {
    let eig = ((gram + gram.transpose()) * 0.5).symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if lmin <= 0.0 {
        return Err(ExtractError::IllConditioned(f64::INFINITY));
    }
    if lmax / lmin > COND_LIMIT {
        return Err(ExtractError::IllConditioned(lmax / lmin));
    }
    let u = &eig.eigenvectors;
    let half = u * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * u.transpose();
    let invhalf =
        u * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt())) * u.transpose();
    let inv = u * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v)) * u.transpose();
    Ok((half, invhalf, inv))
}

struct OperatorResiduals {
    bob_projection: f64,
    bob_completeness: f64,
    alice_min_eig: f64,
    alice_completeness: f64,
    commutant: f64,
}

fn operator_residuals(model: &GnsModel) -> Result<OperatorResiduals, ExtractError> {
    let (half, invhalf, _) = gram_frame(&model.gram)?;
    let r = model.dim;
    let eye = DMatrix::<f64>::identity(r, r);
    let phys = |m: &DMatrix<f64>| &half * m * &invhalf;

    let bob_phys: Vec<Vec<DMatrix<f64>>> = model
        .bob_ops
        .iter()
        .map(|per_y| per_y.iter().map(|p| phys(p)).collect())
        .collect();
    let alice_phys: Vec<Vec<DMatrix<f64>>> = model
        .alice_ops
        .iter()
        .map(|per_x| per_x.iter().map(|p| phys(p)).collect())
        .collect();

    let mut proj = 0.0_f64;
    let mut bcomp = 0.0_f64;
    for per_y in &bob_phys {
        let mut total = DMatrix::zeros(r, r);
        for p in per_y {
            proj = proj.max((p * p - p).norm()).max((p - p.transpose()).norm());
            total += p;
        }
        bcomp = bcomp.max((total - &eye).norm());
    }

    let mut amin = f64::INFINITY;
    let mut acomp = 0.0_f64;
    for per_x in &alice_phys {
        let mut total = DMatrix::zeros(r, r);
        for a in per_x {
            let ev = sym_eigs(a);
            amin = amin.min(ev.last().copied().unwrap_or(0.0));
            total += a;
        }
        acomp = acomp.max((total - &eye).norm());
    }

    let mut comm = 0.0_f64;
    for per_x in &alice_phys {
        for a in per_x {
            for per_y in &bob_phys {
                for p in per_y {
                    comm = comm.max((a * p - p * a).norm());
                }
            }
        }
    }

    Ok(OperatorResiduals {
        bob_projection: proj,
        bob_completeness: bcomp,
        alice_min_eig: amin,
        alice_completeness: acomp,
        commutant: comm,
    })
}

/// Builds the finite-dimensional model carried by a flat solution.
///
/// Steps: flatness gate, greedy pivot selection of independent words of
/// degree ≤ n−1, Gram conditioning gate, then Bob operators from
/// left-multiplication columns and Alice operators from the per-outcome
/// blocks, both solved against the Gram matrix. Every model invariant
/// (unit cyclic vector, projections, completeness, positivity, commutant
/// bound, Born reproduction of the solved cells) is verified before the
/// model is returned.
pub fn gns_build(
    prob: &MomentProblem,
    sol: &MomentSolution,
    rel_tol: f64,
) -> Result<GnsModel, ExtractError> {
    let rep = check_flat(prob, sol, rel_tol)?;
    if !rep.is_flat {
        return Err(ExtractError::NotFlat(format!(
            "rank {} vs truncated rank {} at tolerance {:.1e}",
            rep.rank_full, rep.rank_trunc, rep.tol_used
        )));
    }
    if !rep.per_ax_flat.iter().all(|&f| f) {
        return Err(ExtractError::NotFlat(
            "an outcome block gains rank over its truncation".into(),
        ));
    }

    let scn = prob.meta.scenario;
    let basis = &prob.meta.bases[0];
    let theta = theta_total(prob, sol);
    let d = trunc_len(prob);
    let sel = pivot_select(&theta.view((0, 0), (d, d)).into_owned(), rel_tol);
    let r = sel.len();
    if r == 0 {
        return Err(ExtractError::NotFlat("moment matrix is numerically zero".into()));
    }
    let gram = submatrix(&theta, &sel, &sel);
    let (_, _, ginv) = gram_frame(&gram)?;

    let pos_one = basis.position(&Word::one()).expect("identity word");
    let rhs_one = DVector::from_iterator(r, sel.iter().map(|&i| theta[(i, pos_one)]));
    let omega = &ginv * rhs_one;

    let mut bob_ops = Vec::with_capacity(scn.n_y);
    for y in 0..scn.n_y {
        let mut per_y = Vec::with_capacity(scn.n_b);
        for b in 0..scn.n_b {
            let mut op = DMatrix::zeros(r, r);
            for (j, &sj) in sel.iter().enumerate() {
                let mut raw = vec![Letter::bob(b, y)];
                raw.extend_from_slice(basis.words[sj].letters());
                let u = canonicalize(&raw, false);
                if u.is_zero() {
                    continue;
                }
                let pos = basis.position(&u).expect("degree stays within the basis");
                let rhs = DVector::from_iterator(r, sel.iter().map(|&i| theta[(i, pos)]));
                op.set_column(j, &(&ginv * rhs));
            }
            per_y.push(op);
        }
        bob_ops.push(per_y);
    }

    let block_of = |a: usize, x: usize| {
        prob.meta
            .block_ax
            .iter()
            .position(|&(aa, xx)| aa == a && xx == x)
            .expect("sequential block for every (a, x)")
    };
    let mut alice_ops = Vec::with_capacity(scn.n_x);
    for x in 0..scn.n_x {
        let mut per_x = Vec::with_capacity(scn.n_a);
        for a in 0..scn.n_a {
            let v = &sol.values[block_of(a, x)];
            let t = (submatrix(v, &sel, &sel) + submatrix(&v.transpose(), &sel, &sel)) * 0.5;
            per_x.push(&ginv * t);
        }
        alice_ops.push(per_x);
    }

    let model = GnsModel {
        dim: r,
        basis_words: sel.iter().map(|&i| basis.words[i].clone()).collect(),
        omega,
        gram,
        bob_ops,
        alice_ops,
    };

    let unit = (model.omega.dot(&(&model.gram * &model.omega)) - 1.0).abs();
    if unit > UNIT_TOL {
        return Err(ExtractError::InvariantViolation(format!(
            "cyclic vector normalization (residual {unit:.3e})"
        )));
    }
    let res = operator_residuals(&model)?;
    if res.bob_projection > PROJ_TOL {
        return Err(ExtractError::InvariantViolation(format!(
            "Bob projection property (residual {:.3e})",
            res.bob_projection
        )));
    }
    if res.bob_completeness > COMPLETE_TOL {
        return Err(ExtractError::InvariantViolation(format!(
            "Bob completeness (residual {:.3e})",
            res.bob_completeness
        )));
    }
    if res.alice_min_eig < -POS_TOL {
        return Err(ExtractError::InvariantViolation(format!(
            "Alice positivity (min eigenvalue {:.3e})",
            res.alice_min_eig
        )));
    }
    if res.alice_completeness > COMPLETE_TOL {
        return Err(ExtractError::InvariantViolation(format!(
            "Alice completeness (residual {:.3e})",
            res.alice_completeness
        )));
    }
    if res.commutant > COMMUTANT_TOL {
        return Err(ExtractError::InvariantViolation(format!(
            "commutation of Alice with Bob (residual {:.3e})",
            res.commutant
        )));
    }

    let mut born = 0.0_f64;
    for x in 0..scn.n_x {
        for a in 0..scn.n_a {
            let v = &sol.values[block_of(a, x)];
            for y in 0..scn.n_y {
                for b in 0..scn.n_b {
                    let pos_b = basis
                        .position(&Word::letter(Letter::bob(b, y)))
                        .expect("degree-1 word");
                    let data = 0.5 * (v[(pos_one, pos_b)] + v[(pos_b, pos_one)]);
                    let reproduced = model
                        .omega
                        .dot(&(&model.gram * &model.alice_ops[x][a] * &model.bob_ops[y][b] * &model.omega));
                    born = born.max((reproduced - data).abs());
                }
            }
        }
    }
    if born > BORN_TOL {
        return Err(ExtractError::InvariantViolation(format!(
            "Born reproduction of solved cells (residual {born:.3e})"
        )));
    }

    Ok(model)
}

/// Evaluates a model against a functional: Born correlation, its score,
/// and the operator residuals, without reference to any moment solution.
pub fn verify_model(
    model: &GnsModel,
    f: &BellFunctional,
) -> Result<ModelReport, ExtractError> {
    let scn = f.scenario;
    if model.alice_ops.len() != scn.n_x
        || model.bob_ops.len() != scn.n_y
        || model.alice_ops.iter().any(|per_x| per_x.len() != scn.n_a)
        || model.bob_ops.iter().any(|per_y| per_y.len() != scn.n_b)
    {
        return Err(ExtractError::ScenarioMismatch(format!(
            "model has {}x/{}y/{}a/{}b operators, functional wants {}/{}/{}/{}",
            model.alice_ops.len(),
            model.bob_ops.len(),
            model.alice_ops.first().map_or(0, Vec::len),
            model.bob_ops.first().map_or(0, Vec::len),
            scn.n_x,
            scn.n_y,
            scn.n_a,
            scn.n_b
        )));
    }
    let res = operator_residuals(model)?;
    let mut corr = Correlation::new(scn);
    for x in 0..scn.n_x {
        for a in 0..scn.n_a {
            for y in 0..scn.n_y {
                for b in 0..scn.n_b {
                    let p = model.omega.dot(
                        &(&model.gram * &model.alice_ops[x][a] * &model.bob_ops[y][b] * &model.omega),
                    );
                    corr.set(a, b, x, y, p);
                }
            }
        }
    }
    let value = score(f, &corr).map_err(|e| ExtractError::ScenarioMismatch(e.to_string()))?;
    Ok(ModelReport {
        correlation: corr,
        score: value,
        bob_projection_residual: res.bob_projection,
        bob_completeness_residual: res.bob_completeness,
        alice_min_eig: res.alice_min_eig,
        alice_completeness_residual: res.alice_completeness,
        commutant_residual: res.commutant,
    })
}
