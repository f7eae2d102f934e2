//! Reduction of a MomentProblem to an explicit free-parameter form.
//!
//! Equality classes are consumed in two layers. Two-cell difference classes
//! and single-cell zero fixes go into a union-find over cells (layer 1); every
//! other class becomes a sparse row over the surviving cell variables and is
//! eliminated by sparse Gaussian elimination with degree-decreasing pivoting
//! (layer 2). The result is an affine parameterization
//!
//!   X(t) = G0 + Σ_j t_j G_j      (per block, symmetric)
//!
//! whose free coordinates t are exactly the undetermined moments. Every
//! elementary row operation is logged so that dual multipliers for the
//! original classes can be recovered later by replaying the log backwards
//! (the transpose of the elimination).

use crate::relax::{Cell, EqClass, MomentProblem};
use nalgebra::DMatrix;
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReduceError {
    #[error("contradictory equality classes: 0 = {0:.3e}")]
    Contradiction(f64),
}

#[derive(Debug, Clone, Copy)]
enum Route {
    /// Consumed by the union-find (two cells, opposite coefficients, zero
    /// constant).
    Union,
    /// Single cell pinned to zero.
    FixZero,
    /// Layer-2 row, by local row id.
    Row(usize),
}

#[derive(Debug, Clone, Copy)]
enum Op {
    /// row[dst] -= c * row[src]
    Axpy { src: u32, dst: u32, c: f64 },
    /// row[row] *= s
    Scale { row: u32, s: f64 },
}

/// Drop entries that are numerically extinct relative to the row scale.
const PRUNE_REL: f64 = 1e-11;
/// An empty row with |rhs| above this is a contradiction.
const INFEAS_TOL: f64 = 1e-8;

struct UnionFind {
    parent: Vec<u32>,
    rank: Vec<u8>,
    zero: Vec<bool>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
            zero: vec![false; n],
        }
    }

    fn find(&mut self, i: u32) -> u32 {
        let mut r = i;
        while self.parent[r as usize] != r {
            r = self.parent[r as usize];
        }
        let mut c = i;
        while self.parent[c as usize] != r {
            let next = self.parent[c as usize];
            self.parent[c as usize] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let z = self.zero[ra as usize] || self.zero[rb as usize];
        let (hi, lo) = if self.rank[ra as usize] >= self.rank[rb as usize] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[lo as usize] = hi;
        if self.rank[hi as usize] == self.rank[lo as usize] {
            self.rank[hi as usize] += 1;
        }
        self.zero[hi as usize] = z;
    }
}

/// The reduced problem plus everything needed to rebuild block values and
/// recover per-class dual multipliers.
pub struct Reduced {
    /// Number of free parameters.
    pub m: usize,
    /// One representative cell per free parameter (its first cell in block
    /// scan order); the parameter equals the moment stored there.
    pub free_cells: Vec<Cell>,
    /// Constant term per block, upper-triangle entries.
    pub g0: Vec<Vec<(u32, u32, f64)>>,
    /// Coefficient matrices per free parameter: (block, row, col, value).
    pub gvar: Vec<Vec<(u32, u32, u32, f64)>>,
    /// Objective linear part on t and its constant part from pinned moments
    /// (the functional's own constant is NOT included here).
    pub d: Vec<f64>,
    pub c_lin0: f64,
    block_sides: Vec<usize>,
    routing: Vec<Route>,
    log: Vec<Op>,
    n_rows: usize,
    pivot_var_of_row: Vec<Option<u32>>,
    /// var id -> member cells, for aggregating stationarity right-hand sides
    var_members: Vec<Vec<Cell>>,
    n_vars: usize,
}

fn cell_id(base: &[usize], sides: &[usize], c: &Cell) -> u32 {
    // upper-triangle linear index within the block
    let n = sides[c.block];
    let (i, j) = (c.row, c.col);
    (base[c.block] + i * n - i * (i + 1) / 2 + j) as u32
}

pub fn reduce(prob: &MomentProblem) -> Result<Reduced, ReduceError> {
    let sides: Vec<usize> = prob.blocks.iter().map(|b| b.side).collect();
    let mut cell_base = Vec::with_capacity(sides.len());
    let mut total = 0usize;
    for &s in &sides {
        cell_base.push(total);
        total += s * (s + 1) / 2;
    }

    // layer 1: route classes, union cells, mark zeros
    let mut uf = UnionFind::new(total);
    let mut routing = Vec::with_capacity(prob.eq_classes.len());
    let mut n_rows = 0usize;
    for class in &prob.eq_classes {
        let route = classify(class);
        match route {
            Route::Union => {
                let a = cell_id(&cell_base, &sides, &class.cells[0].0);
                let b = cell_id(&cell_base, &sides, &class.cells[1].0);
                uf.union(a, b);
            }
            Route::FixZero => {
                let a = cell_id(&cell_base, &sides, &class.cells[0].0);
                let r = uf.find(a);
                uf.zero[r as usize] = true;
            }
            Route::Row(_) => {
                routing.push(Route::Row(n_rows));
                n_rows += 1;
                continue;
            }
        }
        routing.push(route);
    }
    // zero flags may have been set after unions landed on a different root
    for i in 0..total as u32 {
        let r = uf.find(i);
        if uf.zero[i as usize] {
            uf.zero[r as usize] = true;
        }
    }

    // var ids in first-encounter scan order
    let mut var_of_root: HashMap<u32, u32> = HashMap::new();
    let mut var_members: Vec<Vec<Cell>> = Vec::new();
    let mut first_cell: Vec<Cell> = Vec::new();
    for (b, &side) in sides.iter().enumerate() {
        for i in 0..side {
            for j in i..side {
                let cell = Cell::new(b, i, j);
                let id = cell_id(&cell_base, &sides, &cell);
                let root = uf.find(id);
                if uf.zero[root as usize] {
                    continue;
                }
                let v = *var_of_root.entry(root).or_insert_with(|| {
                    var_members.push(Vec::new());
                    first_cell.push(cell);
                    (var_members.len() - 1) as u32
                });
                var_members[v as usize].push(cell);
            }
        }
    }
    let n_vars = var_members.len();

    // layer 2: build rows over vars
    type Row = BTreeMap<u32, f64>;
    let mut rows: Vec<(Row, f64)> = Vec::with_capacity(n_rows);
    for (class, route) in prob.eq_classes.iter().zip(&routing) {
        if !matches!(route, Route::Row(_)) {
            continue;
        }
        let mut row: Row = BTreeMap::new();
        for (cell, coef) in &class.cells {
            let id = cell_id(&cell_base, &sides, cell);
            let root = uf.find(id);
            if uf.zero[root as usize] {
                continue;
            }
            let v = var_of_root[&root];
            let e = row.entry(v).or_insert(0.0);
            *e += coef;
            if *e == 0.0 {
                row.remove(&v);
            }
        }
        rows.push((row, class.constant));
    }

    // sparse elimination with degree-decreasing (largest-var) pivoting
    let mut log: Vec<Op> = Vec::new();
    let mut pivots: BTreeMap<u32, u32> = BTreeMap::new(); // var -> row id
    let mut pivot_var_of_row: Vec<Option<u32>> = vec![None; n_rows];
    let mut occurrences: HashMap<u32, Vec<u32>> = HashMap::new(); // var -> pivot rows containing it
    for k in 0..n_rows {
        // reduce row k against existing pivots, largest var first
        loop {
            let hit = rows[k]
                .0
                .iter()
                .rev()
                .find_map(|(&v, _)| pivots.get(&v).map(|&p| (v, p)));
            let Some((v, p)) = hit else { break };
            let c = rows[k].0[&v];
            let src = std::mem::take(&mut rows[p as usize].0);
            let src_rhs = rows[p as usize].1;
            axpy(&mut rows[k], &src, src_rhs, c);
            rows[p as usize].0 = src;
            log.push(Op::Axpy {
                src: p,
                dst: k as u32,
                c,
            });
        }
        prune(&mut rows[k].0);
        if rows[k].0.is_empty() {
            if rows[k].1.abs() > INFEAS_TOL {
                return Err(ReduceError::Contradiction(rows[k].1));
            }
            continue; // redundant row, multiplier 0
        }
        // normalize on the largest remaining var
        let (&pv, &pc) = rows[k].0.iter().next_back().unwrap();
        let s = 1.0 / pc;
        for val in rows[k].0.values_mut() {
            *val *= s;
        }
        rows[k].1 *= s;
        log.push(Op::Scale { row: k as u32, s });
        // substitute into pivot rows that still mention pv, keeping every
        // pivot row expressed over unpivoted vars only
        if let Some(rowids) = occurrences.remove(&pv) {
            for q in rowids {
                let c = match rows[q as usize].0.get(&pv) {
                    Some(&c) => c,
                    None => continue, // stale occurrence entry
                };
                let src = std::mem::take(&mut rows[k].0);
                let src_rhs = rows[k].1;
                axpy(&mut rows[q as usize], &src, src_rhs, c);
                prune(&mut rows[q as usize].0);
                log.push(Op::Axpy {
                    src: k as u32,
                    dst: q,
                    c,
                });
                for &v in src.keys() {
                    if v != pv && rows[q as usize].0.contains_key(&v) {
                        occurrences.entry(v).or_default().push(q);
                    }
                }
                rows[k].0 = src;
            }
        }
        pivots.insert(pv, k as u32);
        pivot_var_of_row[k] = Some(pv);
        for (&v, _) in rows[k].0.iter() {
            if v != pv {
                occurrences.entry(v).or_default().push(k as u32);
            }
        }
    }

    // free parameters: unpivoted vars in var-id order
    let mut t_of_var: HashMap<u32, usize> = HashMap::new();
    let mut free_cells = Vec::new();
    for v in 0..n_vars as u32 {
        if !pivots.contains_key(&v) {
            t_of_var.insert(v, free_cells.len());
            free_cells.push(first_cell[v as usize]);
        }
    }
    let m = free_cells.len();

    // expression per var: var = expr_rhs - Σ expr_coef · t
    //   free var v: rhs 0, coef 1 on its own t
    let expr = |v: u32,
                rows: &Vec<(Row, f64)>,
                pivots: &BTreeMap<u32, u32>,
                t_of_var: &HashMap<u32, usize>|
     -> (f64, Vec<(usize, f64)>) {
        match pivots.get(&v) {
            None => (0.0, vec![(t_of_var[&v], 1.0)]),
            Some(&p) => {
                let (row, rhs) = &rows[p as usize];
                let mut terms = Vec::with_capacity(row.len() - 1);
                for (&u, &c) in row {
                    if u == v {
                        continue;
                    }
                    debug_assert!(!pivots.contains_key(&u), "pivot row not fully reduced");
                    terms.push((t_of_var[&u], -c));
                }
                (*rhs, terms)
            }
        }
    };

    // assemble G0 and the G_j from the per-var expressions
    let mut g0: Vec<Vec<(u32, u32, f64)>> = sides.iter().map(|_| Vec::new()).collect();
    let mut gvar: Vec<Vec<(u32, u32, u32, f64)>> = vec![Vec::new(); m];
    for (b, &side) in sides.iter().enumerate() {
        for i in 0..side {
            for j in i..side {
                let cell = Cell::new(b, i, j);
                let id = cell_id(&cell_base, &sides, &cell);
                let root = uf.find(id);
                if uf.zero[root as usize] {
                    continue;
                }
                let v = var_of_root[&root];
                let (rhs, terms) = expr(v, &rows, &pivots, &t_of_var);
                if rhs != 0.0 {
                    g0[b].push((i as u32, j as u32, rhs));
                }
                for (t, c) in terms {
                    if c != 0.0 {
                        gvar[t].push((b as u32, i as u32, j as u32, c));
                    }
                }
            }
        }
    }

    // objective in t coordinates
    let mut d = vec![0.0; m];
    let mut c_lin0 = 0.0;
    for (cell, coef) in &prob.objective {
        let id = cell_id(&cell_base, &sides, cell);
        let root = uf.find(id);
        if uf.zero[root as usize] {
            continue;
        }
        let v = var_of_root[&root];
        let (rhs, terms) = expr(v, &rows, &pivots, &t_of_var);
        c_lin0 += coef * rhs;
        for (t, c) in terms {
            d[t] += coef * c;
        }
    }

    Ok(Reduced {
        m,
        free_cells,
        g0,
        gvar,
        d,
        c_lin0,
        block_sides: sides,
        routing,
        log,
        n_rows,
        pivot_var_of_row,
        var_members,
        n_vars,
    })
}

fn classify(class: &EqClass) -> Route {
    if class.cells.len() == 2
        && class.constant == 0.0
        && class.cells[0].1 != 0.0
        && class.cells[0].1 == -class.cells[1].1
        && class.cells[0].0 != class.cells[1].0
    {
        return Route::Union;
    }
    if class.cells.len() == 1 && class.constant == 0.0 && class.cells[0].1 != 0.0 {
        return Route::FixZero;
    }
    Route::Row(0)
}

fn axpy(dst: &mut (BTreeMap<u32, f64>, f64), src: &BTreeMap<u32, f64>, src_rhs: f64, c: f64) {
    for (&v, &val) in src {
        let e = dst.0.entry(v).or_insert(0.0);
        *e -= c * val;
        if *e == 0.0 {
            dst.0.remove(&v);
        }
    }
    dst.1 -= c * src_rhs;
}

fn prune(row: &mut BTreeMap<u32, f64>) {
    let max = row.values().fold(0.0f64, |a, v| a.max(v.abs()));
    if max == 0.0 {
        row.clear();
        return;
    }
    let tol = PRUNE_REL * max.max(1.0);
    row.retain(|_, v| v.abs() > tol);
}

impl Reduced {
    pub fn block_sides(&self) -> &[usize] {
        &self.block_sides
    }

    /// Rebuild full symmetric block values from the free parameters.
    pub fn block_values(&self, t: &[f64]) -> Vec<DMatrix<f64>> {
        let mut out: Vec<DMatrix<f64>> = self
            .block_sides
            .iter()
            .map(|&s| DMatrix::zeros(s, s))
            .collect();
        for (b, entries) in self.g0.iter().enumerate() {
            for &(i, j, v) in entries {
                out[b][(i as usize, j as usize)] = v;
                out[b][(j as usize, i as usize)] = v;
            }
        }
        for (j, entries) in self.gvar.iter().enumerate() {
            let tj = t[j];
            if tj == 0.0 {
                continue;
            }
            for &(b, r, c, v) in entries {
                out[b as usize][(r as usize, c as usize)] += tj * v;
                if r != c {
                    out[b as usize][(c as usize, r as usize)] += tj * v;
                }
            }
        }
        out
    }

    /// Read free parameters off explicit block values (the projection of a
    /// feasible point onto the parameterization).
    pub fn free_values(&self, values: &[DMatrix<f64>]) -> Vec<f64> {
        self.free_cells
            .iter()
            .map(|c| values[c.block][(c.row, c.col)])
            .collect()
    }

    /// Dual multipliers per original class from the dual block matrices.
    ///
    /// Works backwards from stationarity: for every cell, the multipliers of
    /// the classes touching it must reproduce objective + dual slack there.
    /// Layer-2 multipliers come from replaying the elimination log
    /// transposed; chain and zero classes then read off their cell directly.
    pub fn recover_multipliers(&self, prob: &MomentProblem, y_full: &[DMatrix<f64>]) -> Vec<f64> {
        let mut obj: HashMap<Cell, f64> = HashMap::new();
        for (cell, coef) in &prob.objective {
            *obj.entry(*cell).or_insert(0.0) += coef;
        }
        let rhs_at = |c: &Cell| -> f64 {
            let w = if c.row == c.col { 1.0 } else { 2.0 };
            obj.get(c).copied().unwrap_or(0.0) + w * y_full[c.block][(c.row, c.col)]
        };

        // aggregated stationarity per var
        let mut rhs_var = vec![0.0; self.n_vars];
        for (v, members) in self.var_members.iter().enumerate() {
            rhs_var[v] = members.iter().map(rhs_at).sum();
        }

        // layer-2 multipliers: transpose replay of the elimination
        let mut lambda = vec![0.0; self.n_rows];
        for (k, pv) in self.pivot_var_of_row.iter().enumerate() {
            if let Some(v) = pv {
                lambda[k] = rhs_var[*v as usize];
            }
        }
        for op in self.log.iter().rev() {
            match *op {
                Op::Axpy { src, dst, c } => {
                    lambda[src as usize] -= c * lambda[dst as usize];
                }
                Op::Scale { row, s } => {
                    lambda[row as usize] *= s;
                }
            }
        }

        // residual right-hand side after subtracting layer-2 contributions
        let mut correction: HashMap<Cell, f64> = HashMap::new();
        for (class, route) in prob.eq_classes.iter().zip(&self.routing) {
            if let Route::Row(k) = route {
                let nu = lambda[*k];
                if nu != 0.0 {
                    for (cell, coef) in &class.cells {
                        *correction.entry(*cell).or_insert(0.0) += nu * coef;
                    }
                }
            }
        }

        // chains and zero fixes: one pass in class order
        let mut out = vec![0.0; prob.eq_classes.len()];
        for (idx, (class, route)) in prob.eq_classes.iter().zip(&self.routing).enumerate() {
            match route {
                Route::Row(k) => out[idx] = lambda[*k],
                Route::Union | Route::FixZero => {
                    let (cell, coef) = &class.cells[0];
                    let resid = rhs_at(cell) - correction.get(cell).copied().unwrap_or(0.0);
                    let mu = resid / coef;
                    out[idx] = mu;
                    for (c2, w2) in &class.cells {
                        *correction.entry(*c2).or_insert(0.0) += mu * w2;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relax::{
        build_sequential, build_standard, BlockInfo, ClassKind, HierarchyKind, ProblemMeta,
    };
    use crate::scenario::{load_game_str, Scenario};

    fn chsh() -> crate::scenario::BellFunctional {
        load_game_str(include_str!("../../data/games/chsh.json")).unwrap()
    }

    /// A bare problem with no metadata words, for contrived class sets.
    fn bare(blocks: Vec<usize>, eq_classes: Vec<EqClass>, objective: Vec<(Cell, f64)>) -> MomentProblem {
        MomentProblem {
            blocks: blocks
                .iter()
                .map(|&side| BlockInfo {
                    label: format!("B{side}"),
                    side,
                })
                .collect(),
            eq_classes,
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

    fn fix(cell: Cell, value: f64) -> EqClass {
        EqClass {
            kind: ClassKind::Normalization,
            cells: vec![(cell, 1.0)],
            constant: value,
        }
    }

    #[test]
    fn contradictory_fixes_are_detected() {
        let p = bare(
            vec![1],
            vec![fix(Cell::new(0, 0, 0), 1.0), fix(Cell::new(0, 0, 0), 2.0)],
            vec![],
        );
        assert!(matches!(reduce(&p), Err(ReduceError::Contradiction(_))));
    }

    #[test]
    fn single_fixed_cell_has_no_free_parameters() {
        let p = bare(vec![1], vec![fix(Cell::new(0, 0, 0), 1.0)], vec![]);
        let r = reduce(&p).unwrap();
        assert_eq!(r.m, 0);
        let vals = r.block_values(&[]);
        assert_eq!(vals[0][(0, 0)], 1.0);
    }

    #[test]
    fn chain_merges_cells_into_one_parameter() {
        let chain = EqClass {
            kind: ClassKind::Consistency,
            cells: vec![(Cell::new(0, 0, 1), 1.0), (Cell::new(0, 1, 1), -1.0)],
            constant: 0.0,
        };
        let p = bare(vec![2], vec![fix(Cell::new(0, 0, 0), 1.0), chain], vec![]);
        let r = reduce(&p).unwrap();
        assert_eq!(r.m, 1);
        let vals = r.block_values(&[0.7]);
        assert_eq!(vals[0][(0, 1)], 0.7);
        assert_eq!(vals[0][(1, 0)], 0.7);
        assert_eq!(vals[0][(1, 1)], 0.7);
    }

    #[test]
    fn row_elimination_substitutes_largest_var() {
        // x22 + x01 = 1 with x00 fixed: x22 is eliminated in favor of x01
        let row = EqClass {
            kind: ClassKind::Completeness,
            cells: vec![(Cell::new(0, 2, 2), 1.0), (Cell::new(0, 0, 1), 1.0)],
            constant: 1.0,
        };
        let p = bare(vec![3], vec![fix(Cell::new(0, 0, 0), 1.0), row], vec![]);
        let r = reduce(&p).unwrap();
        // free: all upper-tri cells except x00 (fixed) and x22 (pivoted): 4
        assert_eq!(r.m, 4);
        let idx = r
            .free_cells
            .iter()
            .position(|c| (c.row, c.col) == (0, 1))
            .unwrap();
        let mut t = vec![0.0; 4];
        t[idx] = 0.25;
        let vals = r.block_values(&t);
        assert!((vals[0][(2, 2)] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn round_trip_values_through_parameters() {
        let prob = build_sequential(&chsh(), 1).unwrap();
        let r = reduce(&prob).unwrap();
        assert!(r.m > 0);
        // a deterministic synthetic parameter vector
        let t: Vec<f64> = (0..r.m).map(|i| 0.01 * (i as f64 + 1.0)).collect();
        let vals = r.block_values(&t);
        let back = r.free_values(&vals);
        for (a, b) in t.iter().zip(&back) {
            assert!((a - b).abs() < 1e-13);
        }
        // every equality class holds on the reconstruction
        for class in &prob.eq_classes {
            let lhs: f64 = class
                .cells
                .iter()
                .map(|(c, w)| w * vals[c.block][(c.row, c.col)])
                .sum();
            assert!(
                (lhs - class.constant).abs() < 1e-10,
                "class violated: {:?}",
                class.kind
            );
        }
    }

    #[test]
    fn standard_block_reduces_to_expected_free_count() {
        // CHSH level 1: 4 free marginals, 4 cross products, one same-party
        // second moment per side
        let prob = build_standard(&chsh(), 1).unwrap();
        let r = reduce(&prob).unwrap();
        assert_eq!(r.m, 10);
    }

    #[test]
    fn sequential_chsh_level1_free_count_is_stable() {
        // 8 no-signaling distribution parameters plus one second-order
        // moment per (a,x) family, tied across x by no-signaling: 8 + 3
        let prob = build_sequential(&chsh(), 1).unwrap();
        let r = reduce(&prob).unwrap();
        assert_eq!(r.m, 11);
    }
}
