//! Moment relaxations of Bell games as block SDPs.
//!
//! Three builders produce [`MomentProblem`]s in a common solver-neutral form:
//!
//! * [`build_sequential`]: one subnormalized block Θ(a|x) per Alice
//!   outcome/input pair, indexed by Bob words, under a strong no-signaling
//!   condition tying the Alice-averaged blocks together across inputs.
//! * [`build_standard`]: a single block Γ over commuting both-party words
//!   with operator completeness for both parties.
//! * [`build_modified`]: like the standard block but Alice completeness is
//!   imposed only weakly, against Bob words on both sides.
//!
//! Every equality the relaxation imposes is recorded as an [`EqClass`], a
//! scalar linear equation over matrix cells. Entries of a block at (row, col)
//! are moments of the canonical word w_row* · w_col; cells whose canonical
//! product coincides are tied by two-cell chain classes, so each class stays
//! small and the dual of every class is a single real multiplier.

use crate::algebra::{
    adjoint, canonicalize, enumerate_basis, multiply, Letter, Parties, Party, Word, WordBasis,
};
use crate::scenario::{BellFunctional, Correlation, Scenario};
use nalgebra::DMatrix;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use thiserror::Error;

/// Which relaxation a problem encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HierarchyKind {
    Sequential,
    Standard,
    Modified,
}

impl fmt::Display for HierarchyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            HierarchyKind::Sequential => "sequential",
            HierarchyKind::Standard => "standard",
            HierarchyKind::Modified => "modified",
        };
        write!(f, "{s}")
    }
}

/// One matrix entry reference. Classes and objectives only reference the
/// upper triangle (row ≤ col); the matrix variable is symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub block: usize,
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(block: usize, row: usize, col: usize) -> Self {
        let (row, col) = if row <= col { (row, col) } else { (col, row) };
        Cell { block, row, col }
    }
}

/// Provenance of an equality class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassKind {
    /// Two cells carry the same canonical word product.
    Consistency,
    /// The cell's word product annihilates (orthogonal outcomes).
    Zero,
    /// POVM completeness at one letter occurrence inside a word.
    Completeness,
    /// Alice-averaged sequential blocks agree across inputs, cell by cell.
    NoSignaling,
    /// Total mass of the relaxation is 1.
    Normalization,
    /// Alice completeness against Bob words only.
    WeakAlice,
}

/// A scalar equation Σᵢ coefᵢ · X\[cellᵢ\] = constant.
#[derive(Debug, Clone)]
pub struct EqClass {
    pub kind: ClassKind,
    pub cells: Vec<(Cell, f64)>,
    pub constant: f64,
}

/// A PSD block of the problem.
#[derive(Debug, Clone)]
pub struct BlockInfo {
    pub label: String,
    pub side: usize,
}

/// Construction data a solver does not need but post-processing does.
#[derive(Debug, Clone)]
pub struct ProblemMeta {
    pub scenario: Scenario,
    pub kind: HierarchyKind,
    pub level: usize,
    /// One word basis per block (sequential blocks share one basis, cloned).
    pub bases: Vec<WordBasis>,
    /// For sequential problems, the (a, x) pair indexing each block.
    pub block_ax: Vec<(usize, usize)>,
}

/// A block SDP: maximize the objective over PSD blocks subject to the
/// equality classes.
#[derive(Debug, Clone)]
pub struct MomentProblem {
    pub blocks: Vec<BlockInfo>,
    pub eq_classes: Vec<EqClass>,
    pub objective: Vec<(Cell, f64)>,
    pub objective_constant: f64,
    pub meta: ProblemMeta,
}

/// Solver termination state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    NearOptimal,
    Infeasible,
    NumericalTrouble,
}

/// Feasibility and duality metrics of a returned solution.
#[derive(Debug, Clone, Copy, Default)]
pub struct Residuals {
    pub max_eq_residual: f64,
    pub min_block_eig: f64,
    pub duality_gap: f64,
}

/// A solved [`MomentProblem`].
#[derive(Debug, Clone)]
pub struct MomentSolution {
    pub values: Vec<DMatrix<f64>>,
    pub primal_value: f64,
    pub dual_value: f64,
    pub dual_multipliers: Vec<f64>,
    /// Dual slack blocks Y ⪰ 0, one per primal block, in the full
    /// (uncompressed) coordinates. Certificate assembly reads these.
    pub dual_matrices: Vec<DMatrix<f64>>,
    pub status: SolveStatus,
    pub residuals: Residuals,
}

#[derive(Debug, Error)]
pub enum RelaxError {
    #[error("hierarchy level must be at least 1")]
    LevelTooSmall,
}

/// Internal index of one block's cell structure: which canonical word each
/// upper-triangle cell carries, a representative cell per word, and the
/// annihilated cells.
struct BlockStructure {
    /// Distinct word keys, sorted. A key is min(u, u*) so that a word and its
    /// adjoint (the transposed cell) share one key.
    keys: Vec<Word>,
    key_index: HashMap<Word, usize>,
    /// key index -> lexicographically smallest (row, col) cell carrying it.
    repr: Vec<(usize, usize)>,
    /// key index -> all (row, col) cells carrying it, in (row, col) order.
    cells_of_key: Vec<Vec<(usize, usize)>>,
    zero_cells: Vec<(usize, usize)>,
    commute: bool,
}

impl BlockStructure {
    fn build(basis: &WordBasis, commute: bool) -> Self {
        let side = basis.len();
        let mut by_key: BTreeMap<Word, Vec<(usize, usize)>> = BTreeMap::new();
        let mut zero_cells = Vec::new();
        for i in 0..side {
            for j in i..side {
                let u = multiply(&adjoint(&basis.words[i], commute), &basis.words[j], commute);
                if u.is_zero() {
                    zero_cells.push((i, j));
                    continue;
                }
                let ustar = adjoint(&u, commute);
                let key = if ustar < u { ustar } else { u };
                by_key.entry(key).or_default().push((i, j));
            }
        }
        let mut keys = Vec::with_capacity(by_key.len());
        let mut repr = Vec::with_capacity(by_key.len());
        let mut cells_of_key = Vec::with_capacity(by_key.len());
        let mut key_index = HashMap::with_capacity(by_key.len());
        for (k, mut cells) in by_key {
            cells.sort();
            key_index.insert(k.clone(), keys.len());
            keys.push(k);
            repr.push(cells[0]);
            cells_of_key.push(cells);
        }
        BlockStructure {
            keys,
            key_index,
            repr,
            cells_of_key,
            zero_cells,
            commute,
        }
    }

    /// Key index of a canonical word, if it is represented in this block.
    fn key_of(&self, u: &Word) -> Option<usize> {
        let ustar = adjoint(u, self.commute);
        let key = if &ustar < u { &ustar } else { u };
        self.key_index.get(key).copied()
    }

    /// Chain classes tying every non-representative cell to its
    /// representative, for the given block index.
    fn consistency_classes(&self, block: usize) -> Vec<EqClass> {
        let mut out = Vec::new();
        for (k, cells) in self.cells_of_key.iter().enumerate() {
            let (r0, c0) = self.repr[k];
            for &(r, c) in &cells[1..] {
                out.push(EqClass {
                    kind: ClassKind::Consistency,
                    cells: vec![
                        (Cell::new(block, r, c), 1.0),
                        (Cell::new(block, r0, c0), -1.0),
                    ],
                    constant: 0.0,
                });
            }
        }
        out
    }

    fn zero_classes(&self, block: usize) -> Vec<EqClass> {
        self.zero_cells
            .iter()
            .map(|&(r, c)| EqClass {
                kind: ClassKind::Zero,
                cells: vec![(Cell::new(block, r, c), 1.0)],
                constant: 0.0,
            })
            .collect()
    }

    /// POVM completeness classes from every letter occurrence in every
    /// represented word: replacing the occurrence by each outcome of the same
    /// party/input and summing equals the word with the occurrence deleted.
    /// Generated per occurrence, deduplicated by equation signature; parties
    /// not listed in `parties` are skipped.
    fn completeness_signatures(
        &self,
        scn: &Scenario,
        parties: &[Party],
    ) -> Vec<BTreeMap<usize, f64>> {
        let mut seen: HashSet<Vec<(usize, i64)>> = HashSet::new();
        let mut out = Vec::new();
        for key in &self.keys {
            let letters = key.letters();
            for p in 0..letters.len() {
                let l = letters[p];
                if !parties.contains(&l.party) {
                    continue;
                }
                let n_out = match l.party {
                    Party::Alice => scn.n_a,
                    Party::Bob => scn.n_b,
                };
                let mut sig: BTreeMap<usize, f64> = BTreeMap::new();
                for o in 0..n_out {
                    let mut raw = letters.to_vec();
                    raw[p] = Letter {
                        party: l.party,
                        input: l.input,
                        outcome: o,
                    };
                    let w = canonicalize(&raw, self.commute);
                    if w.is_zero() {
                        continue;
                    }
                    let k = self
                        .key_of(&w)
                        .expect("outcome variant stays within entry degree");
                    *sig.entry(k).or_insert(0.0) += 1.0;
                }
                let mut raw = letters.to_vec();
                raw.remove(p);
                let d = canonicalize(&raw, self.commute);
                if !d.is_zero() {
                    let k = self.key_of(&d).expect("deletion lowers the degree");
                    *sig.entry(k).or_insert(0.0) -= 1.0;
                }
                sig.retain(|_, v| *v != 0.0);
                if sig.is_empty() {
                    continue;
                }
                let fingerprint: Vec<(usize, i64)> =
                    sig.iter().map(|(&k, &v)| (k, v as i64)).collect();
                if seen.insert(fingerprint) {
                    out.push(sig);
                }
            }
        }
        out
    }

    fn signature_to_class(&self, block: usize, sig: &BTreeMap<usize, f64>, kind: ClassKind) -> EqClass {
        let cells = sig
            .iter()
            .map(|(&k, &coef)| {
                let (r, c) = self.repr[k];
                (Cell::new(block, r, c), coef)
            })
            .collect();
        EqClass {
            kind,
            cells,
            constant: 0.0,
        }
    }
}

fn seq_block_index(scn: &Scenario, a: usize, x: usize) -> usize {
    a * scn.n_x + x
}

/// Sequential relaxation at level n: blocks Θ(a|x) over Bob words of degree
/// ≤ n, with within-block moment consistency, Bob completeness up to entry
/// degree 2n, strong no-signaling across inputs, and total mass 1.
pub fn build_sequential(f: &BellFunctional, n: usize) -> Result<MomentProblem, RelaxError> {
    if n == 0 {
        return Err(RelaxError::LevelTooSmall);
    }
    let scn = f.scenario;
    let basis = enumerate_basis(&scn, Parties::BobOnly, n, false);
    let structure = BlockStructure::build(&basis, false);
    let side = basis.len();
    let n_blocks = scn.n_a * scn.n_x;

    let mut blocks = Vec::with_capacity(n_blocks);
    let mut block_ax = Vec::with_capacity(n_blocks);
    for a in 0..scn.n_a {
        for x in 0..scn.n_x {
            blocks.push(BlockInfo {
                label: format!("Theta({a}|{x})"),
                side,
            });
            block_ax.push((a, x));
        }
    }

    let mut eq_classes = Vec::new();

    // normalization: Σ_a Θ(a|0)_{1,1} = 1
    eq_classes.push(EqClass {
        kind: ClassKind::Normalization,
        cells: (0..scn.n_a)
            .map(|a| (Cell::new(seq_block_index(&scn, a, 0), 0, 0), 1.0))
            .collect(),
        constant: 1.0,
    });

    let completeness = structure.completeness_signatures(&scn, &[Party::Bob]);
    for b in 0..n_blocks {
        eq_classes.extend(structure.zero_classes(b));
        eq_classes.extend(structure.consistency_classes(b));
        for sig in &completeness {
            eq_classes.push(structure.signature_to_class(b, sig, ClassKind::Completeness));
        }
    }

    // strong no-signaling: Σ_a Θ(a|x)_{i,j} = Σ_a Θ(a|0)_{i,j} for x ≠ 0
    for x in 1..scn.n_x {
        for i in 0..side {
            for j in i..side {
                let mut cells = Vec::with_capacity(2 * scn.n_a);
                for a in 0..scn.n_a {
                    cells.push((Cell::new(seq_block_index(&scn, a, x), i, j), 1.0));
                }
                for a in 0..scn.n_a {
                    cells.push((Cell::new(seq_block_index(&scn, a, 0), i, j), -1.0));
                }
                eq_classes.push(EqClass {
                    kind: ClassKind::NoSignaling,
                    cells,
                    constant: 0.0,
                });
            }
        }
    }

    // objective: p(ab|xy) = Θ(a|x)_{1, B(b|y)}
    let mut objective = Vec::new();
    for a in 0..scn.n_a {
        for b in 0..scn.n_b {
            for x in 0..scn.n_x {
                for y in 0..scn.n_y {
                    let c = f.coeff(a, b, x, y);
                    if c != 0.0 {
                        let col = basis
                            .position(&Word::letter(Letter::bob(b, y)))
                            .expect("degree-1 Bob letter is in every level-n basis");
                        objective.push((Cell::new(seq_block_index(&scn, a, x), 0, col), c));
                    }
                }
            }
        }
    }

    Ok(MomentProblem {
        blocks,
        eq_classes,
        objective,
        objective_constant: f.constant,
        meta: ProblemMeta {
            scenario: scn,
            kind: HierarchyKind::Sequential,
            level: n,
            bases: vec![basis; n_blocks],
            block_ax,
        },
    })
}

fn build_single_block(
    f: &BellFunctional,
    n: usize,
    kind: HierarchyKind,
) -> Result<MomentProblem, RelaxError> {
    if n == 0 {
        return Err(RelaxError::LevelTooSmall);
    }
    let scn = f.scenario;
    let basis = enumerate_basis(&scn, Parties::Both, n, true);
    let structure = BlockStructure::build(&basis, true);
    let side = basis.len();
    let label = match kind {
        HierarchyKind::Standard => "Gamma",
        HierarchyKind::Modified => "GammaTilde",
        HierarchyKind::Sequential => unreachable!(),
    };

    let mut eq_classes = Vec::new();
    eq_classes.push(EqClass {
        kind: ClassKind::Normalization,
        cells: vec![(Cell::new(0, 0, 0), 1.0)],
        constant: 1.0,
    });
    eq_classes.extend(structure.zero_classes(0));
    eq_classes.extend(structure.consistency_classes(0));

    let parties: &[Party] = match kind {
        HierarchyKind::Standard => &[Party::Alice, Party::Bob],
        HierarchyKind::Modified => &[Party::Bob],
        HierarchyKind::Sequential => unreachable!(),
    };
    for sig in structure.completeness_signatures(&scn, parties) {
        eq_classes.push(structure.signature_to_class(0, &sig, ClassKind::Completeness));
    }

    if kind == HierarchyKind::Modified {
        // Σ_a Γ̃_{b₁, A(a|x)·b₂} = Γ̃_{b₁, b₂}, deg b₁ ≤ n, deg b₂ ≤ n−1
        let bob = enumerate_basis(&scn, Parties::BobOnly, n, false);
        let mut seen: HashSet<Vec<(usize, i64)>> = HashSet::new();
        for b1 in &bob.words {
            for b2 in bob.words.iter().filter(|w| w.degree() + 1 <= n) {
                for x in 0..scn.n_x {
                    let mut sig: BTreeMap<usize, f64> = BTreeMap::new();
                    for a in 0..scn.n_a {
                        let mut raw = adjoint(b1, false).letters().to_vec();
                        raw.push(Letter::alice(a, x));
                        raw.extend_from_slice(b2.letters());
                        let w = canonicalize(&raw, true);
                        if w.is_zero() {
                            continue;
                        }
                        let k = structure.key_of(&w).expect("degree ≤ 2n by construction");
                        *sig.entry(k).or_insert(0.0) += 1.0;
                    }
                    let target = multiply(&adjoint(b1, false), b2, false);
                    if !target.is_zero() {
                        let k = structure.key_of(&target).expect("Bob word of degree ≤ 2n−1");
                        *sig.entry(k).or_insert(0.0) -= 1.0;
                    }
                    sig.retain(|_, v| *v != 0.0);
                    if sig.is_empty() {
                        continue;
                    }
                    let fp: Vec<(usize, i64)> = sig.iter().map(|(&k, &v)| (k, v as i64)).collect();
                    if seen.insert(fp) {
                        eq_classes.push(structure.signature_to_class(0, &sig, ClassKind::WeakAlice));
                    }
                }
            }
        }

        // The weak classes close under positivity: with z the column defect
        // Σ_a col(A(a|x)b₂) − col(b₂), the scalar class at (b₂, b₂) plus the
        // zero cells and idempotence chains give zᵀΓ̃z = 0, and Γ̃ ⪰ 0 then
        // forces Γ̃z = 0. Emit that face row by row so the solved span is
        // exact. Columns built from Alice-containing words stay unforced.
        for b2 in bob.words.iter().filter(|w| w.degree() + 1 <= n) {
            let base_col = basis.position(b2).expect("Bob word of degree < n");
            for x in 0..scn.n_x {
                let cols: Vec<usize> = (0..scn.n_a)
                    .map(|a| {
                        let mut raw = vec![Letter::alice(a, x)];
                        raw.extend_from_slice(b2.letters());
                        basis
                            .position(&canonicalize(&raw, true))
                            .expect("degree ≤ n word")
                    })
                    .collect();
                for v in 0..side {
                    let mut cells: Vec<(Cell, f64)> =
                        cols.iter().map(|&c| (Cell::new(0, v, c), 1.0)).collect();
                    cells.push((Cell::new(0, v, base_col), -1.0));
                    eq_classes.push(EqClass {
                        kind: ClassKind::WeakAlice,
                        cells,
                        constant: 0.0,
                    });
                }
            }
        }
    }

    // objective: p(ab|xy) = Γ_{A(a|x), B(b|y)}
    let mut objective = Vec::new();
    for a in 0..scn.n_a {
        for b in 0..scn.n_b {
            for x in 0..scn.n_x {
                for y in 0..scn.n_y {
                    let c = f.coeff(a, b, x, y);
                    if c != 0.0 {
                        let row = basis
                            .position(&Word::letter(Letter::alice(a, x)))
                            .expect("degree-1 Alice letter is in the basis");
                        let col = basis
                            .position(&Word::letter(Letter::bob(b, y)))
                            .expect("degree-1 Bob letter is in the basis");
                        objective.push((Cell::new(0, row, col), c));
                    }
                }
            }
        }
    }

    Ok(MomentProblem {
        blocks: vec![BlockInfo {
            label: label.to_string(),
            side,
        }],
        eq_classes,
        objective,
        objective_constant: f.constant,
        meta: ProblemMeta {
            scenario: scn,
            kind,
            level: n,
            bases: vec![basis],
            block_ax: Vec::new(),
        },
    })
}

/// Standard commuting-operator relaxation at level n: one block Γ over
/// both-party words with completeness for both parties.
pub fn build_standard(f: &BellFunctional, n: usize) -> Result<MomentProblem, RelaxError> {
    build_single_block(f, n, HierarchyKind::Standard)
}

/// Standard block with Alice completeness weakened to hold only against Bob
/// words (degree ≤ n on the left, ≤ n−1 on the right).
pub fn build_modified(f: &BellFunctional, n: usize) -> Result<MomentProblem, RelaxError> {
    build_single_block(f, n, HierarchyKind::Modified)
}

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("cell {0:?} outside its block")]
    CellOutOfRange(Cell),
    #[error("equality class {0} is empty")]
    EmptyClass(usize),
    #[error("expected exactly one normalization class, found {0}")]
    BadNormalization(usize),
}

impl MomentProblem {
    /// Structural invariants: references in range, classes nonempty, exactly
    /// one normalization class with target 1.
    pub fn validate(&self) -> Result<(), ProblemError> {
        let in_range = |c: &Cell| {
            self.blocks
                .get(c.block)
                .map(|b| c.row < b.side && c.col < b.side)
                .unwrap_or(false)
        };
        for (i, class) in self.eq_classes.iter().enumerate() {
            if class.cells.is_empty() {
                return Err(ProblemError::EmptyClass(i));
            }
            for (c, _) in &class.cells {
                if !in_range(c) {
                    return Err(ProblemError::CellOutOfRange(*c));
                }
            }
        }
        for (c, _) in &self.objective {
            if !in_range(c) {
                return Err(ProblemError::CellOutOfRange(*c));
            }
        }
        let norm: Vec<&EqClass> = self
            .eq_classes
            .iter()
            .filter(|c| c.kind == ClassKind::Normalization)
            .collect();
        if norm.len() != 1 || norm[0].constant != 1.0 {
            return Err(ProblemError::BadNormalization(norm.len()));
        }
        Ok(())
    }

    /// The cell holding p(ab|xy) in this relaxation.
    pub fn prob_cell(&self, a: usize, b: usize, x: usize, y: usize) -> Cell {
        let scn = &self.meta.scenario;
        match self.meta.kind {
            HierarchyKind::Sequential => {
                let col = self.meta.bases[0]
                    .position(&Word::letter(Letter::bob(b, y)))
                    .expect("degree-1 Bob letter present");
                Cell::new(seq_block_index(scn, a, x), 0, col)
            }
            HierarchyKind::Standard | HierarchyKind::Modified => {
                let row = self.meta.bases[0]
                    .position(&Word::letter(Letter::alice(a, x)))
                    .expect("degree-1 Alice letter present");
                let col = self.meta.bases[0]
                    .position(&Word::letter(Letter::bob(b, y)))
                    .expect("degree-1 Bob letter present");
                Cell::new(0, row, col)
            }
        }
    }

    /// Reads the behavior p(ab|xy) out of a solution's block values.
    pub fn correlation_from(&self, sol: &MomentSolution) -> Correlation {
        let scn = self.meta.scenario;
        let mut corr = Correlation::uniform(scn);
        for a in 0..scn.n_a {
            for b in 0..scn.n_b {
                for x in 0..scn.n_x {
                    for y in 0..scn.n_y {
                        let c = self.prob_cell(a, b, x, y);
                        corr.set(a, b, x, y, sol.values[c.block][(c.row, c.col)]);
                    }
                }
            }
        }
        corr
    }

    /// Objective value of explicit block values (without solving).
    pub fn objective_of(&self, values: &[DMatrix<f64>]) -> f64 {
        let mut v = self.objective_constant;
        for (c, coef) in &self.objective {
            v += coef * values[c.block][(c.row, c.col)];
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::load_game_str;

    fn chsh() -> BellFunctional {
        load_game_str(include_str!("../data/games/chsh.json")).unwrap()
    }

    fn i3322() -> BellFunctional {
        load_game_str(include_str!("../data/games/i3322.json")).unwrap()
    }

    #[test]
    fn level_zero_rejected() {
        assert!(matches!(
            build_sequential(&chsh(), 0),
            Err(RelaxError::LevelTooSmall)
        ));
        assert!(matches!(build_standard(&chsh(), 0), Err(RelaxError::LevelTooSmall)));
        assert!(matches!(build_modified(&chsh(), 0), Err(RelaxError::LevelTooSmall)));
    }

    #[test]
    fn chsh_sequential_level1_shape() {
        let prob = build_sequential(&chsh(), 1).unwrap();
        assert_eq!(prob.blocks.len(), 4);
        assert!(prob.blocks.iter().all(|b| b.side == 5));
        assert_eq!(prob.blocks[1].label, "Theta(0|1)");
        prob.validate().unwrap();
    }

    #[test]
    fn chsh_sequential_level1_no_signaling_count() {
        let prob = build_sequential(&chsh(), 1).unwrap();
        let ns = prob
            .eq_classes
            .iter()
            .filter(|c| c.kind == ClassKind::NoSignaling)
            .count();
        assert_eq!(ns, 15);
    }

    #[test]
    fn normalization_class_fixes_total_mass() {
        for prob in [
            build_sequential(&chsh(), 1).unwrap(),
            build_standard(&chsh(), 1).unwrap(),
            build_modified(&i3322(), 1).unwrap(),
        ] {
            let norm: Vec<&EqClass> = prob
                .eq_classes
                .iter()
                .filter(|c| c.kind == ClassKind::Normalization)
                .collect();
            assert_eq!(norm.len(), 1);
            assert_eq!(norm[0].constant, 1.0);
            assert!(norm[0].cells.iter().all(|(c, w)| c.row == 0 && c.col == 0 && *w == 1.0));
        }
    }

    #[test]
    fn chsh_standard_level1_is_one_9_block() {
        let prob = build_standard(&chsh(), 1).unwrap();
        assert_eq!(prob.blocks.len(), 1);
        assert_eq!(prob.blocks[0].side, 9);
        prob.validate().unwrap();
    }

    #[test]
    fn projectivity_identifies_diagonal_with_first_row() {
        // Γ_{A(0|0), A(0|0)} carries the word A(0|0), same as Γ_{1, A(0|0)}
        let prob = build_standard(&chsh(), 1).unwrap();
        let pos = prob.meta.bases[0]
            .position(&Word::letter(Letter::alice(0, 0)))
            .unwrap();
        let found = prob.eq_classes.iter().any(|cl| {
            cl.kind == ClassKind::Consistency
                && cl.cells.iter().any(|(c, _)| (c.row, c.col) == (0, pos))
                && cl.cells.iter().any(|(c, _)| (c.row, c.col) == (pos, pos))
        });
        assert!(found);
    }

    #[test]
    fn chsh_standard_level2_has_mixed_cell_outside_objective() {
        let prob = build_standard(&chsh(), 2).unwrap();
        let basis = &prob.meta.bases[0];
        let row = basis.position(&Word::letter(Letter::alice(0, 0))).unwrap();
        let col = basis
            .position(&canonicalize(
                &[Letter::bob(0, 0), Letter::bob(0, 1)],
                true,
            ))
            .unwrap();
        assert!(row < prob.blocks[0].side && col < prob.blocks[0].side);
        assert!(!prob
            .objective
            .iter()
            .any(|(c, _)| (c.row, c.col) == (row, col) || (c.row, c.col) == (col, row)));
    }

    #[test]
    fn chsh_objective_reads_eight_quarter_cells() {
        let prob = build_sequential(&chsh(), 1).unwrap();
        assert_eq!(prob.objective.len(), 8);
        assert!(prob.objective.iter().all(|(_, c)| *c == 0.25));
        let total: f64 = prob.objective.iter().map(|(_, c)| c).sum();
        assert!((total - 2.0).abs() < 1e-15);
    }

    /// Normalized signature of a class equation over word keys, for
    /// comparing equations across problems independent of cell choices.
    fn class_signatures(prob: &MomentProblem) -> HashSet<Vec<(usize, i64)>> {
        let structure = BlockStructure::build(&prob.meta.bases[0], true);
        let mut out = HashSet::new();
        for cl in &prob.eq_classes {
            let mut sig: BTreeMap<(usize, usize), f64> = BTreeMap::new();
            for (c, w) in &cl.cells {
                let basis = &prob.meta.bases[c.block];
                let u = multiply(
                    &adjoint(&basis.words[c.row], true),
                    &basis.words[c.col],
                    true,
                );
                if u.is_zero() {
                    continue;
                }
                let k = structure.key_of(&u).unwrap();
                *sig.entry((c.block, k)).or_insert(0.0) += w;
            }
            sig.retain(|_, v| *v != 0.0);
            out.insert(sig.iter().map(|(&(_, k), &v)| (k, v as i64)).collect());
        }
        out
    }

    #[test]
    fn alice_replacement_class_present_in_standard_absent_in_modified() {
        // Σ_a σ(A(0|1)·A(a|0)·A(0|1)) = σ(A(0|1)) follows from Alice operator
        // completeness rewriting inside a word. The weak classes and the face
        // they force only ever sum an Alice letter sitting next to a Bob-only
        // tail, so conjugation by an Alice word stays out of reach.
        let std2 = build_standard(&chsh(), 2).unwrap();
        let mod2 = build_modified(&chsh(), 2).unwrap();
        let structure = BlockStructure::build(&std2.meta.bases[0], true);
        let mut sig: BTreeMap<usize, f64> = BTreeMap::new();
        for a in 0..2 {
            let w = canonicalize(
                &[Letter::alice(0, 1), Letter::alice(a, 0), Letter::alice(0, 1)],
                true,
            );
            *sig.entry(structure.key_of(&w).unwrap()).or_insert(0.0) += 1.0;
        }
        let tgt = Word::letter(Letter::alice(0, 1));
        *sig.entry(structure.key_of(&tgt).unwrap()).or_insert(0.0) -= 1.0;
        let wanted: Vec<(usize, i64)> = sig.iter().map(|(&k, &v)| (k, v as i64)).collect();
        assert!(class_signatures(&std2).contains(&wanted));
        assert!(!class_signatures(&mod2).contains(&wanted));
    }

    #[test]
    fn modified_level2_weak_class_instance_present() {
        // Σ_a Γ̃_{B(0|0), A(a|0)·B(0|1)} = Γ̃_{B(0|0), B(0|1)}
        let prob = build_modified(&chsh(), 2).unwrap();
        let structure = BlockStructure::build(&prob.meta.bases[0], true);
        let lhs: Vec<usize> = (0..2)
            .map(|a| {
                let w = canonicalize(
                    &[Letter::bob(0, 0), Letter::alice(a, 0), Letter::bob(0, 1)],
                    true,
                );
                structure.key_of(&w).unwrap()
            })
            .collect();
        let rhs = structure
            .key_of(&canonicalize(&[Letter::bob(0, 0), Letter::bob(0, 1)], true))
            .unwrap();
        let as_cells: Vec<(Cell, f64)> = lhs
            .iter()
            .map(|&k| {
                let (r, c) = structure.repr[k];
                (Cell::new(0, r, c), 1.0)
            })
            .chain(std::iter::once({
                let (r, c) = structure.repr[rhs];
                (Cell::new(0, r, c), -1.0)
            }))
            .collect();
        let found = prob.eq_classes.iter().any(|cl| {
            cl.kind == ClassKind::WeakAlice && {
                let mut a = cl.cells.clone();
                let mut b = as_cells.clone();
                a.sort_by(|x, y| x.0.cmp(&y.0));
                b.sort_by(|x, y| x.0.cmp(&y.0));
                a.len() == b.len()
                    && a.iter()
                        .zip(&b)
                        .all(|((c1, w1), (c2, w2))| c1 == c2 && (w1 - w2).abs() < 1e-15)
            }
        });
        assert!(found);
    }

    #[test]
    fn modified_level1_weakens_but_keeps_column_sums() {
        // at n=1 the weak classes are exactly Σ_a Γ̃_{b₁, A(a|x)} = Γ̃_{b₁, 1}
        let prob = build_modified(&chsh(), 1).unwrap();
        let weak = prob
            .eq_classes
            .iter()
            .filter(|c| c.kind == ClassKind::WeakAlice)
            .count();
        // b₁ ranges over {1, B(0|0), B(1|0), B(0|1), B(1|1)}, x over {0,1};
        // b₁ = 1 duplicates nothing, so 10 candidate classes minus dedup
        assert!(weak >= 2, "expected weak Alice classes, found {weak}");
        // and no Completeness class replaces an Alice letter
        let basis = &prob.meta.bases[0];
        let a00 = basis.position(&Word::letter(Letter::alice(0, 0))).unwrap();
        let a10 = basis.position(&Word::letter(Letter::alice(1, 0))).unwrap();
        for cl in &prob.eq_classes {
            if cl.kind == ClassKind::Completeness {
                let touches_both = cl.cells.iter().any(|(c, _)| c.row == 0 && c.col == a00)
                    && cl.cells.iter().any(|(c, _)| c.row == 0 && c.col == a10);
                assert!(!touches_both);
            }
        }
    }

    #[test]
    fn sequential_completeness_replicated_per_block() {
        let prob = build_sequential(&chsh(), 1).unwrap();
        let mut per_block = vec![0usize; prob.blocks.len()];
        for cl in &prob.eq_classes {
            if cl.kind == ClassKind::Completeness {
                per_block[cl.cells[0].0.block] += 1;
            }
        }
        assert!(per_block.iter().all(|&c| c == per_block[0] && c > 0));
    }

    #[test]
    fn all_builders_validate_on_both_games() {
        for game in [chsh(), i3322()] {
            for n in 1..=2 {
                build_sequential(&game, n).unwrap().validate().unwrap();
                build_standard(&game, n).unwrap().validate().unwrap();
                build_modified(&game, n).unwrap().validate().unwrap();
            }
        }
    }

    #[test]
    fn zero_classes_match_annihilating_pairs() {
        // CHSH level 1 Bob basis: B(0|y) vs B(1|y) annihilate, 2 cells per block
        let prob = build_sequential(&chsh(), 1).unwrap();
        let zeros = prob
            .eq_classes
            .iter()
            .filter(|c| c.kind == ClassKind::Zero)
            .count();
        assert_eq!(zeros, 8);
    }

    #[test]
    fn no_class_forces_conflicting_constants() {
        // cells fixed by zero classes never appear in the normalization class,
        // and no two single-cell classes disagree
        for prob in [
            build_sequential(&i3322(), 2).unwrap(),
            build_standard(&i3322(), 2).unwrap(),
            build_modified(&chsh(), 2).unwrap(),
        ] {
            let mut fixed: HashMap<Cell, f64> = HashMap::new();
            for cl in &prob.eq_classes {
                if cl.cells.len() == 1 {
                    let (c, w) = cl.cells[0];
                    let v = cl.constant / w;
                    if let Some(prev) = fixed.insert(c, v) {
                        assert_eq!(prev, v, "conflicting constants at {c:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn prob_cells_are_distinct_and_in_range() {
        for prob in [
            build_sequential(&i3322(), 1).unwrap(),
            build_standard(&i3322(), 1).unwrap(),
        ] {
            let scn = prob.meta.scenario;
            let mut seen = HashSet::new();
            for a in 0..scn.n_a {
                for b in 0..scn.n_b {
                    for x in 0..scn.n_x {
                        for y in 0..scn.n_y {
                            let c = prob.prob_cell(a, b, x, y);
                            assert!(c.block < prob.blocks.len());
                            assert!(c.row < prob.blocks[c.block].side);
                            assert!(c.col < prob.blocks[c.block].side);
                            assert!(seen.insert(c), "duplicate probability cell {c:?}");
                        }
                    }
                }
            }
        }
    }
}
