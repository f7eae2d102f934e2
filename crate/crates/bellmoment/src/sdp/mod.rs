//! Block-diagonal SDP solving for moment problems.
//!
//! The pipeline is: equality elimination ([`reduce`]), exact joint-range
//! compression ([`compress`]), a feasible start from a random explicit
//! model ([`init`]), and a Nesterov-Todd predictor-corrector loop
//! ([`ipm`]). [`solve`] glues these together and maps the result back to
//! full moment-matrix coordinates; [`certify`] recomputes feasibility and
//! optimality metrics from nothing but the problem and the returned
//! solution. [`sdpa`] round-trips the reduced problem through the SDPA
//! sparse text format.

pub mod compress;
pub mod init;
pub mod ipm;
pub mod reduce;
pub mod sdpa;

use crate::relax::{MomentProblem, MomentSolution, Residuals};
use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

pub use crate::relax::SolveStatus;
pub use sdpa::{export_sdpa, parse_sdpa, SdpaError, SdpaProblem};

/// Knobs for [`solve`]. Defaults are tuned for moment problems whose
/// entries are O(1).
#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Relative complementarity target.
    pub gap_tol: f64,
    /// Relative dual-feasibility target.
    pub feas_tol: f64,
    pub max_iters: usize,
    /// Fraction of the maximal step taken each iteration.
    pub step_fraction: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            gap_tol: 1e-8,
            feas_tol: 1e-8,
            max_iters: 200,
            step_fraction: 0.98,
        }
    }
}

impl SolverOptions {
    /// Two orders tighter than the default. Rank-sensitive post-processing
    /// (flatness detection, strategy extraction) reads structure out of the
    /// small eigenvalues, and those carry noise on the order of the gap.
    pub fn tight() -> Self {
        SolverOptions {
            gap_tol: 1e-10,
            feas_tol: 1e-10,
            ..SolverOptions::default()
        }
    }
}

/// Feasibility-threshold slack for fully determined problems.
const DETERMINED_EIG_TOL: f64 = 1e-9;
/// Interior-start acceptance: smallest eigenvalue relative to matrix scale.
const START_EIG_REL: f64 = 1e-10;

/// Solve a moment problem to its optimum.
///
/// The returned values satisfy every equality class exactly by
/// construction (cells are reconstructed from the eliminated system, not
/// projected afterwards); the reported residuals are still recomputed
/// honestly from the full matrices.
pub fn solve(prob: &MomentProblem, opts: &SolverOptions) -> MomentSolution {
    let red = match reduce::reduce(prob) {
        Ok(r) => r,
        Err(reduce::ReduceError::Contradiction(_)) => return infeasible_solution(prob),
    };

    if red.m == 0 {
        return solve_determined(prob, &red);
    }

    let mut comp = compress::compress(&red);
    let mut kept: Vec<usize> = (0..comp.sides.len()).filter(|&b| comp.sides[b] > 0).collect();

    // The model sits on the cone boundary whenever the hierarchy keeps
    // directions no operator model can charge (weak-completeness slack
    // does exactly that, and its positivity closure cascades with the
    // level). Recenter by maximizing an eigenvalue floor. When the floor
    // provably cannot leave zero no strictly feasible point exists, so
    // widen the cone to X̃ + εI ⪰ 0: the dual is unchanged and its value
    // gains only ε·tr(Y), so the reported bound stays a valid upper
    // bound, while every feasible start gains an ε margin. A decisively
    // negative floor certifies the affine family misses the cone.
    let (mut t0, interior) = pick_start(prob, &red, &comp, &kept);
    if !interior && !kept.is_empty() {
        match phase_one(&comp, &kept, t0.clone(), opts) {
            PhaseOne::Interior(t) => t0 = t,
            PhaseOne::Boundary => {
                for &b in &kept {
                    for i in 0..comp.sides[b] {
                        comp.g0[b][(i, i)] += CONE_SHIFT;
                    }
                }
                t0 = pick_start(prob, &red, &comp, &kept).0;
            }
            PhaseOne::Separated => return infeasible_solution(prob),
            PhaseOne::Stuck => {}
        }
    }

    let outcome = if kept.len() == comp.sides.len() {
        let input = ipm::IpmInput {
            sides: &comp.sides,
            g0: &comp.g0,
            gvar: &comp.gvar,
            d: &red.d,
        };
        ipm::run(&input, t0, opts)
    } else {
        let sides: Vec<usize> = kept.iter().map(|&b| comp.sides[b]).collect();
        let g0: Vec<DMatrix<f64>> = kept.iter().map(|&b| comp.g0[b].clone()).collect();
        let gvar: Vec<Vec<DMatrix<f64>>> = (0..red.m)
            .map(|j| kept.iter().map(|&b| comp.gvar[j][b].clone()).collect())
            .collect();
        let input = ipm::IpmInput {
            sides: &sides,
            g0: &g0,
            gvar: &gvar,
            d: &red.d,
        };
        ipm::run(&input, t0, opts)
    };

    let values = red.block_values(&outcome.t);
    let mut dual_matrices: Vec<DMatrix<f64>> = prob
        .blocks
        .iter()
        .map(|b| DMatrix::zeros(b.side, b.side))
        .collect();
    for (pos, &b) in kept.iter().enumerate() {
        let q = &comp.q[b];
        dual_matrices[b] = q * &outcome.y[pos] * q.transpose();
    }

    let primal_value = prob.objective_of(&values);
    let dual_value = prob.objective_constant + red.c_lin0 + outcome.dual_obj;
    let dual_multipliers = red.recover_multipliers(prob, &dual_matrices);
    let residuals = Residuals {
        max_eq_residual: max_class_residual(prob, &values),
        min_block_eig: values.iter().map(min_sym_eig).fold(f64::INFINITY, f64::min),
        duality_gap: (dual_value - primal_value).abs(),
    };

    MomentSolution {
        values,
        primal_value,
        dual_value,
        dual_multipliers,
        dual_matrices,
        status: outcome.status,
        residuals,
    }
}

/// Every cell pinned: verify PSD-ness and report the determined values.
fn solve_determined(prob: &MomentProblem, red: &reduce::Reduced) -> MomentSolution {
    let values = red.block_values(&[]);
    let min_eig = values.iter().map(min_sym_eig).fold(f64::INFINITY, f64::min);
    let scale = values
        .iter()
        .map(|v| v.amax())
        .fold(0.0f64, f64::max);
    let feasible = min_eig >= -DETERMINED_EIG_TOL * (1.0 + scale);
    let dual_matrices: Vec<DMatrix<f64>> = prob
        .blocks
        .iter()
        .map(|b| DMatrix::zeros(b.side, b.side))
        .collect();
    let dual_multipliers = red.recover_multipliers(prob, &dual_matrices);
    let value = prob.objective_of(&values);
    let residuals = Residuals {
        max_eq_residual: max_class_residual(prob, &values),
        min_block_eig: min_eig,
        duality_gap: 0.0,
    };
    MomentSolution {
        values,
        primal_value: value,
        dual_value: value,
        dual_multipliers,
        dual_matrices,
        status: if feasible {
            SolveStatus::Optimal
        } else {
            SolveStatus::Infeasible
        },
        residuals,
    }
}

fn infeasible_solution(prob: &MomentProblem) -> MomentSolution {
    let values: Vec<DMatrix<f64>> = prob
        .blocks
        .iter()
        .map(|b| DMatrix::zeros(b.side, b.side))
        .collect();
    let residuals = Residuals {
        max_eq_residual: max_class_residual(prob, &values),
        min_block_eig: 0.0,
        duality_gap: 0.0,
    };
    MomentSolution {
        primal_value: prob.objective_of(&values),
        dual_value: prob.objective_of(&values),
        dual_multipliers: vec![0.0; prob.eq_classes.len()],
        dual_matrices: values.clone(),
        values,
        status: SolveStatus::Infeasible,
        residuals,
    }
}

/// Floor above which a phase-I optimum counts as a usable interior.
const PHASE_ONE_INTERIOR: f64 = 1e-7;
/// Floor below which the affine family provably misses the cone.
const PHASE_ONE_SEPARATED: f64 = -1e-4;
/// Diagonal widening applied when no strictly feasible point exists. The
/// dual picks up at most ε·tr(Y), which the duality gap reports.
const CONE_SHIFT: f64 = 1e-8;

enum PhaseOne {
    /// A strictly feasible parameter vector.
    Interior(Vec<f64>),
    /// The eigenvalue floor converged to zero: feasible points exist but
    /// all of them are singular.
    Boundary,
    /// The floor converged decisively below zero: no feasible point.
    Separated,
    Stuck,
}

/// Try a few deterministic explicit models as interior starts.
fn pick_start(
    prob: &MomentProblem,
    red: &reduce::Reduced,
    comp: &compress::Compressed,
    kept: &[usize],
) -> (Vec<f64>, bool) {
    let mut t0 = vec![0.0; red.m];
    for attempt in 0..4 {
        let model = init::interior_start(prob, attempt);
        let cand = red.free_values(&model);
        let interior = kept.iter().all(|&b| {
            let s = assemble(&comp.g0[b], |j| &comp.gvar[j][b], &cand);
            min_sym_eig(&s) > START_EIG_REL * (1.0 + s.norm())
        });
        t0 = cand;
        if interior {
            return (t0, true);
        }
    }
    (t0, false)
}

/// Phase I: maximize λ with X̃(t) − λI ⪰ 0, started strictly inside at
/// λ = (current floor) − 1. A strictly positive optimum hands back the
/// recentered parameters; an optimum at zero reports a boundary-only
/// feasible set and a clearly negative one reports infeasibility.
fn phase_one(
    comp: &compress::Compressed,
    kept: &[usize],
    t_model: Vec<f64>,
    opts: &SolverOptions,
) -> PhaseOne {
    let m = t_model.len();
    let sides: Vec<usize> = kept.iter().map(|&b| comp.sides[b]).collect();
    let g0: Vec<DMatrix<f64>> = kept.iter().map(|&b| comp.g0[b].clone()).collect();
    let mut gvar: Vec<Vec<DMatrix<f64>>> = (0..m)
        .map(|j| kept.iter().map(|&b| comp.gvar[j][b].clone()).collect())
        .collect();
    gvar.push(
        sides
            .iter()
            .map(|&s| DMatrix::identity(s, s) * -1.0)
            .collect(),
    );
    let mut d = vec![0.0; m + 1];
    d[m] = 1.0;

    let mut floor = f64::INFINITY;
    for (pos, _) in kept.iter().enumerate() {
        let s = assemble(&g0[pos], |j| &gvar[j][pos], &t_model);
        floor = floor.min(min_sym_eig(&s));
    }
    let mut t0 = t_model;
    t0.push(floor - 1.0);

    let loose = SolverOptions {
        gap_tol: 1e-6,
        feas_tol: 1e-6,
        max_iters: 80,
        step_fraction: opts.step_fraction,
    };
    let input = ipm::IpmInput {
        sides: &sides,
        g0: &g0,
        gvar: &gvar,
        d: &d,
    };
    let out = ipm::run(&input, t0, &loose);
    let lam = out.t[m];
    if lam > PHASE_ONE_INTERIOR {
        let mut t = out.t;
        t.truncate(m);
        return PhaseOne::Interior(t);
    }
    match out.status {
        SolveStatus::Optimal | SolveStatus::NearOptimal if lam > PHASE_ONE_SEPARATED => {
            PhaseOne::Boundary
        }
        SolveStatus::Optimal | SolveStatus::NearOptimal => PhaseOne::Separated,
        _ => PhaseOne::Stuck,
    }
}

fn assemble<'a, F>(g0: &DMatrix<f64>, gvar: F, t: &[f64]) -> DMatrix<f64>
where
    F: Fn(usize) -> &'a DMatrix<f64>,
{
    let mut s = g0.clone();
    for (j, &tj) in t.iter().enumerate() {
        if tj != 0.0 {
            s.zip_apply(gvar(j), |a, g| *a += tj * g);
        }
    }
    s
}

fn min_sym_eig(mat: &DMatrix<f64>) -> f64 {
    if mat.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (mat + mat.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &v| a.min(v))
}

fn max_class_residual(prob: &MomentProblem, values: &[DMatrix<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for class in &prob.eq_classes {
        let mut v = -class.constant;
        for (cell, coef) in &class.cells {
            v += coef * values[cell.block][(cell.row, cell.col)];
        }
        worst = worst.max(v.abs());
    }
    worst
}

/// Independent post-solve audit of a solution against its problem.
#[derive(Debug, Clone)]
pub struct CertifiedReport {
    pub min_eig_per_block: Vec<f64>,
    pub max_constraint_residual: f64,
    pub duality_gap: f64,
    pub objective_recomputed: f64,
}

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error("solution shape does not match the problem: {0}")]
    ShapeMismatch(String),
}

/// Recompute feasibility and optimality metrics from scratch. Reads only
/// the problem data and the returned matrices, so a bug in the solver's
/// own bookkeeping cannot hide here.
pub fn certify(prob: &MomentProblem, sol: &MomentSolution) -> Result<CertifiedReport, CertifyError> {
    if sol.values.len() != prob.blocks.len() {
        return Err(CertifyError::ShapeMismatch(format!(
            "{} value blocks for {} problem blocks",
            sol.values.len(),
            prob.blocks.len()
        )));
    }
    for (b, (v, info)) in sol.values.iter().zip(&prob.blocks).enumerate() {
        if v.nrows() != info.side || v.ncols() != info.side {
            return Err(CertifyError::ShapeMismatch(format!(
                "block {} is {}x{}, expected {}",
                b,
                v.nrows(),
                v.ncols(),
                info.side
            )));
        }
    }
    if sol.dual_multipliers.len() != prob.eq_classes.len() {
        return Err(CertifyError::ShapeMismatch(format!(
            "{} multipliers for {} equality classes",
            sol.dual_multipliers.len(),
            prob.eq_classes.len()
        )));
    }
    let objective_recomputed = prob.objective_of(&sol.values);
    Ok(CertifiedReport {
        min_eig_per_block: sol.values.iter().map(min_sym_eig).collect(),
        max_constraint_residual: max_class_residual(prob, &sol.values),
        duality_gap: (sol.dual_value - objective_recomputed).abs(),
        objective_recomputed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relax::{
        build_sequential, build_standard, BlockInfo, Cell, ClassKind, EqClass, HierarchyKind,
        ProblemMeta,
    };
    use crate::scenario::{load_game_str, Scenario};

    const TSIRELSON: f64 = 0.8535533905932737;

    fn chsh() -> crate::scenario::BellFunctional {
        load_game_str(include_str!("../../data/games/chsh.json")).unwrap()
    }

    fn tiny(classes: Vec<EqClass>, objective: Vec<(Cell, f64)>) -> MomentProblem {
        MomentProblem {
            blocks: vec![BlockInfo {
                label: "B".into(),
                side: 1,
            }],
            eq_classes: classes,
            objective,
            objective_constant: 0.0,
            meta: ProblemMeta {
                scenario: Scenario::new(1, 1, 1, 1).unwrap(),
                kind: HierarchyKind::Standard,
                level: 1,
                bases: Vec::new(),
                block_ax: Vec::new(),
            },
        }
    }

    fn pin(cell: Cell, value: f64) -> EqClass {
        EqClass {
            kind: ClassKind::Normalization,
            cells: vec![(cell, 1.0)],
            constant: value,
        }
    }

    #[test]
    fn sequential_chsh_level1_reaches_the_quantum_bound() {
        let prob = build_sequential(&chsh(), 1).unwrap();
        let sol = solve(&prob, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(
            (sol.primal_value - TSIRELSON).abs() < 1e-6,
            "primal {}",
            sol.primal_value
        );
        assert!(sol.residuals.max_eq_residual < 1e-9);
        assert!(sol.residuals.min_block_eig > -1e-9);
        assert!(sol.residuals.duality_gap < 1e-6);
    }

    #[test]
    fn standard_chsh_level1_matches_the_sequential_bound() {
        let prob = build_standard(&chsh(), 1).unwrap();
        let sol = solve(&prob, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(
            (sol.primal_value - TSIRELSON).abs() < 1e-6,
            "primal {}",
            sol.primal_value
        );
    }

    #[test]
    fn modified_chsh_level1_solves_and_dominates_the_standard_bound() {
        let prob = crate::relax::build_modified(&chsh(), 1).unwrap();
        let sol = solve(&prob, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        // weaker completeness can only widen the feasible set
        assert!(sol.primal_value >= TSIRELSON - 1e-7, "bound {}", sol.primal_value);
        assert!(sol.residuals.duality_gap < 1e-6);
        assert!(sol.residuals.max_eq_residual < 1e-9);
    }

    #[test]
    fn dual_bounds_primal_from_above() {
        for prob in [
            build_sequential(&chsh(), 1).unwrap(),
            build_standard(&chsh(), 1).unwrap(),
        ] {
            let sol = solve(&prob, &SolverOptions::default());
            assert!(sol.dual_value >= sol.primal_value - 1e-7);
        }
    }

    #[test]
    fn zero_objective_solves_to_zero() {
        let mut prob = build_standard(&chsh(), 1).unwrap();
        prob.objective.clear();
        prob.objective_constant = 0.0;
        let sol = solve(&prob, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.primal_value.abs() < 1e-6);
        assert!(sol.dual_value.abs() < 1e-6);
    }

    /// Stationarity of the recovered multipliers: Σ_c μ_c A_c = C + Y as
    /// symmetric matrices, where off-diagonal scalar coefficients split
    /// evenly across the two mirror entries.
    fn stationarity_residual(prob: &MomentProblem, sol: &MomentSolution) -> f64 {
        let mut acc: Vec<DMatrix<f64>> = prob
            .blocks
            .iter()
            .map(|b| DMatrix::zeros(b.side, b.side))
            .collect();
        let add = |acc: &mut Vec<DMatrix<f64>>, cell: &Cell, coef: f64| {
            if cell.row == cell.col {
                acc[cell.block][(cell.row, cell.col)] += coef;
            } else {
                acc[cell.block][(cell.row, cell.col)] += 0.5 * coef;
                acc[cell.block][(cell.col, cell.row)] += 0.5 * coef;
            }
        };
        for (class, &mu) in prob.eq_classes.iter().zip(&sol.dual_multipliers) {
            for (cell, coef) in &class.cells {
                add(&mut acc, cell, mu * coef);
            }
        }
        for (cell, coef) in &prob.objective {
            add(&mut acc, cell, -coef);
        }
        let mut worst = 0.0f64;
        for (b, a) in acc.iter().enumerate() {
            let diff = a - &sol.dual_matrices[b];
            worst = worst.max(diff.amax());
        }
        worst
    }

    #[test]
    fn recovered_multipliers_are_stationary() {
        for prob in [
            build_sequential(&chsh(), 1).unwrap(),
            build_standard(&chsh(), 1).unwrap(),
            build_sequential(&chsh(), 2).unwrap(),
        ] {
            let sol = solve(&prob, &SolverOptions::default());
            let r = stationarity_residual(&prob, &sol);
            assert!(r < 1e-6, "stationarity residual {r}");
        }
    }

    #[test]
    fn repeat_solves_are_bit_identical() {
        let prob = build_sequential(&chsh(), 1).unwrap();
        let a = solve(&prob, &SolverOptions::default());
        let b = solve(&prob, &SolverOptions::default());
        assert_eq!(a.primal_value.to_bits(), b.primal_value.to_bits());
        assert_eq!(a.values[0], b.values[0]);
    }

    #[test]
    fn fully_determined_problem_short_circuits() {
        let cell = Cell::new(0, 0, 0);
        let prob = tiny(vec![pin(cell, 1.0)], vec![(cell, 2.0)]);
        let sol = solve(&prob, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_eq!(sol.primal_value, 2.0);
        assert_eq!(sol.dual_value, 2.0);
        // stationarity with Y = 0 pins the multiplier to the objective coef
        assert!((sol.dual_multipliers[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn determined_negative_cell_reports_infeasible() {
        let cell = Cell::new(0, 0, 0);
        let prob = tiny(vec![pin(cell, -1.0)], vec![(cell, 1.0)]);
        let sol = solve(&prob, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn contradictory_pins_report_infeasible() {
        let cell = Cell::new(0, 0, 0);
        let prob = tiny(vec![pin(cell, 0.0), pin(cell, 1.0)], vec![(cell, 1.0)]);
        let sol = solve(&prob, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn certify_recomputes_from_scratch() {
        let prob = build_sequential(&chsh(), 1).unwrap();
        let sol = solve(&prob, &SolverOptions::default());
        let rep = certify(&prob, &sol).unwrap();
        assert!((rep.objective_recomputed - sol.primal_value).abs() < 1e-12);
        assert!(rep.max_constraint_residual < 1e-9);
        assert!(rep.duality_gap < 1e-6);
        assert_eq!(rep.min_eig_per_block.len(), prob.blocks.len());
        for &e in &rep.min_eig_per_block {
            assert!(e > -1e-9);
        }
    }

    #[test]
    fn certify_rejects_mismatched_shapes() {
        let prob = build_sequential(&chsh(), 1).unwrap();
        let mut sol = solve(&prob, &SolverOptions::default());
        sol.values.pop();
        assert!(matches!(
            certify(&prob, &sol),
            Err(CertifyError::ShapeMismatch(_))
        ));
    }
}
