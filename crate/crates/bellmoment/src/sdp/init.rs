//! Strictly feasible starting points from random finite models.
//!
//! Random projective measurements on a tensor product H_A ⊗ H_B together
//! with a random state satisfy every equality class of all three hierarchy
//! flavors exactly (consistency, completeness, zero products, no-signaling,
//! normalization are operator identities there). Reading the free moments
//! off such a model therefore lands strictly inside the feasible region for
//! generic draws, which is exactly what the interior-point loop needs.

use crate::algebra::{Letter, Party, Word};
use crate::relax::{HierarchyKind, MomentProblem};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Full-frame block values of a deterministic pseudo-random feasible model.
/// `attempt` doubles the model dimensions, for retries when a draw is too
/// close to the boundary.
pub fn interior_start(prob: &MomentProblem, attempt: u32) -> Vec<DMatrix<f64>> {
    let scn = prob.meta.scenario;
    let max_side = prob.blocks.iter().map(|b| b.side).max().unwrap_or(1);
    let grow = 1usize << attempt.min(3);
    let d_a = (2 * scn.n_a * scn.n_x.min(2) * grow).next_power_of_two().min(64);
    // the tensor dimension bounds the model rank; aim above the block side
    let d_b = ((2 * max_side * grow).div_ceil(d_a))
        .next_power_of_two()
        .clamp(8, 1024);

    let mut seed = 0x9e3779b97f4a7c15u64 ^ (attempt as u64).wrapping_mul(0xbf58476d1ce4e5b9);
    seed ^= (prob.meta.level as u64).wrapping_mul(0x94d049bb133111eb);
    seed ^= match prob.meta.kind {
        HierarchyKind::Sequential => 1,
        HierarchyKind::Standard => 2,
        HierarchyKind::Modified => 3,
    } << 32;
    seed ^= ((scn.n_x as u64) << 8) ^ ((scn.n_y as u64) << 16) ^ ((scn.n_a as u64) << 24);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let alice = random_pvms(&mut rng, d_a, scn.n_x, scn.n_a);
    let bob = random_pvms(&mut rng, d_b, scn.n_y, scn.n_b);
    let xi = random_state(&mut rng, d_a, d_b);

    match prob.meta.kind {
        HierarchyKind::Sequential => {
            let basis = &prob.meta.bases[0];
            // Ψ_i = Ξ π_B(v_i)ᵀ, shared by all blocks
            let psi: Vec<DMatrix<f64>> = basis
                .words
                .iter()
                .map(|w| apply_bob(&xi, w, &bob))
                .collect();
            prob.meta
                .block_ax
                .iter()
                .map(|&(a, x)| {
                    let p = &alice[x][a];
                    let phi: Vec<DMatrix<f64>> = psi.iter().map(|m| p * m).collect();
                    gram_against(&phi, &psi)
                })
                .collect()
        }
        HierarchyKind::Standard | HierarchyKind::Modified => {
            let basis = &prob.meta.bases[0];
            let phi: Vec<DMatrix<f64>> = basis
                .words
                .iter()
                .map(|w| {
                    let m = apply_bob(&xi, w, &bob);
                    apply_alice(&m, w, &alice)
                })
                .collect();
            vec![gram(&phi)]
        }
    }
}

/// One random projective measurement per input: P_{a|x} = U_x E_a U_xᵀ with
/// E_a a balanced diagonal 0/1 partition.
fn random_pvms(rng: &mut ChaCha20Rng, dim: usize, n_inputs: usize, n_out: usize) -> Vec<Vec<DMatrix<f64>>> {
    (0..n_inputs)
        .map(|_| {
            let u = random_orthogonal(rng, dim);
            (0..n_out)
                .map(|a| {
                    let lo = a * dim / n_out;
                    let hi = (a + 1) * dim / n_out;
                    let mut e = DMatrix::<f64>::zeros(dim, dim);
                    for k in lo..hi {
                        e[(k, k)] = 1.0;
                    }
                    &u * e * u.transpose()
                })
                .collect()
        })
        .collect()
}

fn random_orthogonal(rng: &mut ChaCha20Rng, dim: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

fn random_state(rng: &mut ChaCha20Rng, d_a: usize, d_b: usize) -> DMatrix<f64> {
    let mut xi = DMatrix::from_fn(d_a, d_b, |_, _| rng.sample::<f64, _>(StandardNormal));
    let n = xi.norm();
    xi /= n;
    xi
}

/// Ξ · π_B(bob part of w)ᵀ, applying letters right to left.
fn apply_bob(xi: &DMatrix<f64>, w: &Word, bob: &[Vec<DMatrix<f64>>]) -> DMatrix<f64> {
    let mut m = xi.clone();
    let letters: Vec<&Letter> = w.party_letters(Party::Bob).collect();
    for l in letters.iter().rev() {
        m = &m * &bob[l.input][l.outcome];
    }
    m
}

/// π_A(alice part of w) · M, applying letters right to left.
fn apply_alice(m: &DMatrix<f64>, w: &Word, alice: &[Vec<DMatrix<f64>>]) -> DMatrix<f64> {
    let mut out = m.clone();
    let letters: Vec<&Letter> = w.party_letters(Party::Alice).collect();
    for l in letters.iter().rev() {
        out = &alice[l.input][l.outcome] * out;
    }
    out
}

fn gram(phi: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = phi.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = phi[i].dot(&phi[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Gram of ⟨φ_i, ψ_j⟩ symmetrized; with φ_i = P ψ_i and P a projector this
/// equals ⟨P ψ_i, P ψ_j⟩, hence PSD.
fn gram_against(phi: &[DMatrix<f64>], psi: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = phi.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            g[(i, j)] = phi[i].dot(&psi[j]);
        }
    }
    (&g + g.transpose()) * 0.5
}
