//! Per-block range compression of the parameterized problem.
//!
//! Every reachable block value lives in the joint column span of that
//! block's G0 and G_j slices, and only the part of the dual variable inside
//! the same span is constrained. An orthonormal basis Q of the span turns a
//! side-s block into a side-r block with r often much smaller (operator
//! completeness makes whole column families linearly dependent). The span is
//! found exactly by accumulating R = Σ G Gᵀ and eigencutting; each matrix is
//! then checked against its projection and compression is skipped wholesale
//! if any mass would be lost.

use super::reduce::Reduced;
use nalgebra::{DMatrix, SymmetricEigen};

/// Relative eigenvalue cutoff for the span rank.
const CUT_REL: f64 = 1e-10;
/// Per-matrix reconstruction tolerance (relative, Frobenius).
const GUARD_REL: f64 = 1e-7;

pub struct Compressed {
    /// Orthonormal span basis per block (side x r); identity when skipped.
    pub q: Vec<DMatrix<f64>>,
    /// Compressed side per block.
    pub sides: Vec<usize>,
    pub g0: Vec<DMatrix<f64>>,
    /// Per free parameter, per block.
    pub gvar: Vec<Vec<DMatrix<f64>>>,
    /// True when the reconstruction guard failed and Q is the identity.
    pub skipped: bool,
}

pub fn compress(red: &Reduced) -> Compressed {
    compress_parts(red.block_sides(), &red.g0, &red.gvar)
}

/// As [`compress`], but from raw sparse parts (e.g. a parsed SDPA file).
pub fn compress_parts(
    sides: &[usize],
    g0: &[Vec<(u32, u32, f64)>],
    gvar: &[Vec<(u32, u32, u32, f64)>],
) -> Compressed {
    let n_blocks = g0.len();
    let m = gvar.len();
    // split the per-parameter entry lists by block once
    let mut split: Vec<Vec<Vec<(u32, u32, f64)>>> =
        (0..n_blocks).map(|_| vec![Vec::new(); m]).collect();
    for (j, entries) in gvar.iter().enumerate() {
        for &(b, r, c, v) in entries {
            split[b as usize][j].push((r, c, v));
        }
    }

    let sides_full: Vec<usize> = sides.to_vec();

    let mut q_blocks = Vec::with_capacity(n_blocks);
    for b in 0..n_blocks {
        let side = sides_full[b];
        let mut r_acc = DMatrix::<f64>::zeros(side, side);
        accumulate_outer(&mut r_acc, &g0[b]);
        for entries in &split[b] {
            accumulate_outer(&mut r_acc, entries);
        }
        let eig = SymmetricEigen::new(r_acc);
        let lam_max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v));
        let mut keep: Vec<usize> = (0..side)
            .filter(|&i| eig.eigenvalues[i] > CUT_REL * lam_max && eig.eigenvalues[i] > 0.0)
            .collect();
        keep.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap()
        });
        let mut q = DMatrix::<f64>::zeros(side, keep.len());
        for (col, &i) in keep.iter().enumerate() {
            q.set_column(col, &eig.eigenvectors.column(i));
        }
        q_blocks.push(q);
    }

    // project every matrix and verify nothing is lost
    let mut g0_c = Vec::with_capacity(n_blocks);
    let mut gvar_c: Vec<Vec<DMatrix<f64>>> = vec![Vec::with_capacity(n_blocks); m];
    let mut ok = true;
    'outer: for b in 0..n_blocks {
        let q = &q_blocks[b];
        let qt = q.transpose();
        let (gt, pass) = project(&g0[b], q, &qt);
        if !pass {
            ok = false;
            break 'outer;
        }
        g0_c.push(gt);
        for (j, entries) in split[b].iter().enumerate() {
            let (gt, pass) = project(entries, q, &qt);
            if !pass {
                ok = false;
                break 'outer;
            }
            gvar_c[j].push(gt);
        }
    }

    if ok {
        let sides = q_blocks.iter().map(|q| q.ncols()).collect();
        return Compressed {
            q: q_blocks,
            sides,
            g0: g0_c,
            gvar: gvar_c,
            skipped: false,
        };
    }

    // identity fallback: keep the original frame
    let q: Vec<DMatrix<f64>> = sides_full
        .iter()
        .map(|&s| DMatrix::identity(s, s))
        .collect();
    let g0 = (0..n_blocks)
        .map(|b| densify(&g0[b], sides_full[b]))
        .collect();
    let gvar = (0..m)
        .map(|j| {
            (0..n_blocks)
                .map(|b| densify(&split[b][j], sides_full[b]))
                .collect()
        })
        .collect();
    Compressed {
        q,
        sides: sides_full,
        g0,
        gvar,
        skipped: true,
    }
}

/// R += G Gᵀ for a sparse symmetric G given by upper-triangle entries.
fn accumulate_outer(r: &mut DMatrix<f64>, entries: &[(u32, u32, f64)]) {
    if entries.is_empty() {
        return;
    }
    // bucket the symmetric expansion by column
    let side = r.nrows();
    let mut cols: Vec<Vec<(u32, f64)>> = vec![Vec::new(); side];
    for &(i, j, v) in entries {
        cols[j as usize].push((i, v));
        if i != j {
            cols[i as usize].push((j, v));
        }
    }
    for col in &cols {
        for &(p, vp) in col {
            for &(qi, vq) in col {
                r[(p as usize, qi as usize)] += vp * vq;
            }
        }
    }
}

fn densify(entries: &[(u32, u32, f64)], side: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(side, side);
    for &(i, j, v) in entries {
        m[(i as usize, j as usize)] = v;
        m[(j as usize, i as usize)] = v;
    }
    m
}

/// Project a sparse symmetric matrix onto the span: G̃ = Qᵀ G Q, together
/// with a mass-preservation check (Pythagoras: any lost mass shows up as
/// ‖G‖² − ‖G̃‖²).
fn project(
    entries: &[(u32, u32, f64)],
    q: &DMatrix<f64>,
    qt: &DMatrix<f64>,
) -> (DMatrix<f64>, bool) {
    let (side, r) = (q.nrows(), q.ncols());
    // bt = (Qᵀ G), built column-contiguously
    let mut bt = DMatrix::<f64>::zeros(r, side);
    let mut norm2 = 0.0;
    for &(i, j, v) in entries {
        let (iu, ju) = (i as usize, j as usize);
        for k in 0..r {
            bt[(k, iu)] += v * qt[(k, ju)];
        }
        norm2 += v * v;
        if iu != ju {
            for k in 0..r {
                bt[(k, ju)] += v * qt[(k, iu)];
            }
            norm2 += v * v;
        }
    }
    let gt = &bt * q;
    let gt = (&gt + gt.transpose()) * 0.5;
    let lost = (norm2 - gt.norm_squared()).max(0.0).sqrt();
    let pass = lost <= GUARD_REL * (norm2.sqrt() + 1.0);
    (gt, pass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relax::{build_sequential, build_standard};
    use crate::scenario::load_game_str;
    use crate::sdp::reduce::reduce;

    fn chsh() -> crate::scenario::BellFunctional {
        load_game_str(include_str!("../../data/games/chsh.json")).unwrap()
    }

    #[test]
    fn standard_chsh_level1_compresses_to_reduced_word_count() {
        // completeness collapses each binary pair to one generator: the span
        // of reachable matrices is indexed by {1, A0, A1, B0, B1} x itself
        // restricted to degree <= 1: side 9 -> 5
        let prob = build_standard(&chsh(), 1).unwrap();
        let red = reduce(&prob).unwrap();
        let c = compress(&red);
        assert!(!c.skipped);
        assert_eq!(c.sides, vec![5]);
    }

    #[test]
    fn sequential_chsh_level1_blocks_shrink() {
        let prob = build_sequential(&chsh(), 1).unwrap();
        let red = reduce(&prob).unwrap();
        let c = compress(&red);
        assert!(!c.skipped);
        // each block over {1, B00, B10, B01, B11} collapses the two
        // completeness pairs: side 5 -> 3
        assert_eq!(c.sides, vec![3, 3, 3, 3]);
    }

    #[test]
    fn compressed_values_reproduce_originals() {
        let prob = build_sequential(&chsh(), 1).unwrap();
        let red = reduce(&prob).unwrap();
        let c = compress(&red);
        let t: Vec<f64> = (0..red.m).map(|i| 0.01 * (i as f64 + 1.0)).collect();
        let full = red.block_values(&t);
        for b in 0..full.len() {
            let mut xt = c.g0[b].clone();
            for (j, tv) in t.iter().enumerate() {
                xt += &c.gvar[j][b] * *tv;
            }
            let back = &c.q[b] * &xt * c.q[b].transpose();
            assert!((&back - &full[b]).norm() < 1e-10, "block {b} mismatch");
        }
    }
}
