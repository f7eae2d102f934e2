//! Nesterov-Todd predictor-corrector interior-point loop.
//!
//! The problem arrives in explicit form: maximize dᵀt subject to
//! S(t) = G0 + Σ_j t_j G_j ⪰ 0 blockwise, with a strictly feasible t0.
//! Dual feasibility (⟨G_j, Y⟩ = −d_j, Y ⪰ 0) is reached along the way from
//! an infeasible multiple-of-identity start.
//!
//! Per iteration the NT scaling is built from a factor F with W = F Fᵀ and
//! F⁻¹ S F⁻ᵀ = Fᵀ Y F = V diagonal, which makes every Lyapunov solve
//! elementwise. The Schur complement is the Gram matrix of the scaled
//! constraint slices and is assembled once per iteration.

use super::SolverOptions;
use crate::relax::SolveStatus;
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

pub struct IpmInput<'a> {
    pub sides: &'a [usize],
    pub g0: &'a [DMatrix<f64>],
    /// Per free parameter, per block.
    pub gvar: &'a [Vec<DMatrix<f64>>],
    pub d: &'a [f64],
}

pub struct IpmOutcome {
    pub t: Vec<f64>,
    pub y: Vec<DMatrix<f64>>,
    pub status: SolveStatus,
    pub iterations: usize,
    /// dᵀt and Σ⟨G0, Y⟩ at the returned iterate.
    pub primal_obj: f64,
    pub dual_obj: f64,
    pub complementarity: f64,
    pub dual_infeas: f64,
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

pub fn run(input: &IpmInput, t0: Vec<f64>, opts: &SolverOptions) -> IpmOutcome {
    let m = input.d.len();
    let n_blocks = input.sides.len();
    let n_total: usize = input.sides.iter().sum();
    let svec_len: usize = input.sides.iter().map(|&r| r * (r + 1) / 2).sum();

    let mut t = t0;
    let tau = 1.0 + input.d.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let mut y: Vec<DMatrix<f64>> = input
        .sides
        .iter()
        .map(|&r| DMatrix::identity(r, r) * tau)
        .collect();

    let mut best: Option<(Vec<f64>, Vec<DMatrix<f64>>, f64, f64)> = None; // t, y, gap_rel, rd_rel
    let scale0 = 1.0 + dot(input.d, &t).abs();
    let mut diverging = 0usize;
    let mut last_mu = f64::INFINITY;
    let mut stalls = 0usize;
    let mut status = SolveStatus::NumericalTrouble;
    let mut iterations = 0usize;

    for iter in 0..opts.max_iters {
        iterations = iter + 1;
        let s_blocks = build_s(input, &t);
        let chol_s: Vec<Cholesky<f64, nalgebra::Dyn>> = match s_blocks
            .iter()
            .map(|s| Cholesky::new(s.clone()))
            .collect::<Option<Vec<_>>>()
        {
            Some(c) => c,
            None => break, // boundary breach survived backtracking: give up
        };

        let pobj = dot(input.d, &t);
        let dobj: f64 = input
            .g0
            .iter()
            .zip(&y)
            .map(|(g, yb)| frob(g, yb))
            .sum();
        let comp: f64 = s_blocks.iter().zip(&y).map(|(s, yb)| frob(s, yb)).sum();
        let mu = comp / n_total as f64;
        let mut rd = DVector::zeros(m);
        for j in 0..m {
            let mut v = -input.d[j];
            for b in 0..n_blocks {
                v -= frob(&input.gvar[j][b], &y[b]);
            }
            rd[j] = v;
        }
        let rd_inf = rd.amax();
        let scale = 1.0 + pobj.abs().max(dobj.abs());
        let gap_rel = comp / scale;
        let rd_rel = rd_inf / (1.0 + tau);
        if std::env::var("IPM_TRACE").is_ok() {
            eprintln!("[ipm] it {iter} mu {mu:.3e} gap {gap_rel:.3e} rd {rd_rel:.3e} pobj {pobj:.6} dobj {dobj:.6}");
        }

        if best
            .as_ref()
            .map(|(_, _, g, r)| gap_rel.max(rd_rel) < g.max(*r))
            .unwrap_or(true)
        {
            best = Some((t.clone(), y.clone(), gap_rel, rd_rel));
        }

        if gap_rel <= opts.gap_tol && rd_rel <= opts.feas_tol {
            status = SolveStatus::Optimal;
            break;
        }
        if dobj < -1e8 * scale0 {
            diverging += 1;
            if diverging >= 3 {
                status = SolveStatus::Infeasible;
                break;
            }
        } else {
            diverging = 0;
        }
        if mu > last_mu * 0.999 {
            stalls += 1;
            if stalls >= 6 {
                break;
            }
        } else {
            stalls = 0;
        }
        last_mu = mu;

        // NT scaling per block: with M = Lᵀ Y L = U Λ Uᵀ the factor
        // F = L U Λ^{-1/4} satisfies F⁻¹SF⁻ᵀ = FᵀYF = Λ^{1/2}, so the
        // scaled frame is diagonal and only F⁻¹ = Λ^{1/4} Uᵀ L⁻¹ is needed.
        let mut f_inv = Vec::with_capacity(n_blocks);
        let mut v_diag: Vec<DVector<f64>> = Vec::with_capacity(n_blocks);
        let mut scaling_ok = true;
        for b in 0..n_blocks {
            let l = chol_s[b].l();
            let mmat = l.transpose() * &y[b] * &l;
            let eig = SymmetricEigen::new((&mmat + mmat.transpose()) * 0.5);
            if eig.eigenvalues.iter().any(|&v| v <= 0.0) {
                scaling_ok = false;
                break;
            }
            let lam_q: DVector<f64> = eig.eigenvalues.map(|v| v.powf(0.25));
            let linv = invert_lower(&l);
            let mut ut_linv = eig.eigenvectors.transpose() * linv;
            scale_rows(&mut ut_linv, &lam_q);
            f_inv.push(ut_linv);
            v_diag.push(eig.eigenvalues.map(|v| v.sqrt()));
        }
        if !scaling_ok {
            break;
        }

        // scaled constraint slices, svec-flattened: column j = svec(Ĝ_j)
        let mut phi_raw = vec![0.0f64; svec_len * m];
        phi_raw
            .par_chunks_mut(svec_len)
            .enumerate()
            .for_each(|(j, col)| {
                let mut off = 0usize;
                for b in 0..n_blocks {
                    let g_hat = &f_inv[b] * &input.gvar[j][b] * f_inv[b].transpose();
                    off = svec_into(&g_hat, col, off);
                }
            });
        let phi = DMatrix::from_vec(svec_len, m, phi_raw);
        let phi_t = phi.transpose();
        let schur = &phi_t * &phi;
        let schur_chol = match Cholesky::new(schur.clone()).or_else(|| {
            let ridge = 1e-12 * (schur.trace() / m as f64 + 1.0);
            Cholesky::new(&schur + DMatrix::identity(m, m) * ridge)
        }) {
            Some(c) => c,
            None => break,
        };

        // predictor: target V∘(ΔŜ+ΔŶ) = -V², i.e. ΔŜ+ΔŶ = -V
        let neg_v = svec_diag(&v_diag, svec_len, -1.0);
        let mut rhs_aff = phi.tr_mul(&neg_v);
        rhs_aff -= &rd;
        let dt_aff = schur_chol.solve(&rhs_aff);
        let ds_aff = unsvec(&(&phi * &dt_aff), input.sides);
        let dy_aff: Vec<DMatrix<f64>> = ds_aff
            .iter()
            .zip(&v_diag)
            .map(|(ds, v)| {
                let mut k = -ds;
                for i in 0..v.len() {
                    k[(i, i)] -= v[i];
                }
                k
            })
            .collect();

        let ap_aff = max_step(&v_diag, &ds_aff, 1.0);
        let ad_aff = max_step(&v_diag, &dy_aff, 1.0);
        let mut mu_aff = 0.0;
        for b in 0..n_blocks {
            let sa = add_diag(&(ds_aff[b].clone() * ap_aff), &v_diag[b]);
            let ya = add_diag(&(dy_aff[b].clone() * ad_aff), &v_diag[b]);
            mu_aff += frob(&sa, &ya);
        }
        mu_aff /= n_total as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(1e-10, 1.0);

        // corrector with Mehrotra second-order term, solved elementwise in
        // the diagonal V frame
        let mut tvecs: Vec<DMatrix<f64>> = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let v = &v_diag[b];
            let r = v.len();
            let cross = &ds_aff[b] * &dy_aff[b];
            let mut k = DMatrix::zeros(r, r);
            for i in 0..r {
                for jj in 0..r {
                    let sym = 0.5 * (cross[(i, jj)] + cross[(jj, i)]);
                    let mut val = -sym;
                    if i == jj {
                        val += sigma * mu - v[i] * v[i];
                    }
                    k[(i, jj)] = 2.0 * val / (v[i] + v[jj]);
                }
            }
            tvecs.push(k);
        }
        let t_svec = svec_all(&tvecs, svec_len);
        let mut rhs = phi.tr_mul(&t_svec);
        rhs -= &rd;
        let dt = schur_chol.solve(&rhs);
        let ds_hat = unsvec(&(&phi * &dt), input.sides);
        let dy_hat: Vec<DMatrix<f64>> = tvecs
            .iter()
            .zip(&ds_hat)
            .map(|(tv, ds)| tv - ds)
            .collect();

        let mut ap = (opts.step_fraction * max_step(&v_diag, &ds_hat, 2.0)).min(1.0);
        let ad_capped = (opts.step_fraction * max_step(&v_diag, &dy_hat, 2.0)).min(1.0);

        // primal update with backtracking against rounding at the boundary
        let mut accepted = false;
        for _ in 0..12 {
            let t_new: Vec<f64> = t.iter().zip(dt.iter()).map(|(a, b)| a + ap * b).collect();
            let s_new = build_s(input, &t_new);
            if s_new.iter().all(|s| Cholesky::new(s.clone()).is_some()) {
                t = t_new;
                accepted = true;
                break;
            }
            ap *= 0.5;
        }
        if !accepted {
            break;
        }

        // dual update, unscaled through F⁻ᵀ · ΔŶ · F⁻¹
        let mut ok = false;
        let mut ad_try = ad_capped;
        for _ in 0..12 {
            let mut y_new = Vec::with_capacity(n_blocks);
            let mut pd = true;
            for b in 0..n_blocks {
                let dy = f_inv[b].transpose() * &dy_hat[b] * &f_inv[b];
                let yb = &y[b] + (&dy + dy.transpose()) * (0.5 * ad_try);
                if Cholesky::new(yb.clone()).is_none() {
                    pd = false;
                    break;
                }
                y_new.push(yb);
            }
            if pd {
                y = y_new;
                ok = true;
                break;
            }
            ad_try *= 0.5;
        }
        if !ok {
            break;
        }

        if ap < 1e-7 && ad_try < 1e-7 {
            break;
        }
    }

    let (t_best, y_best, gap_rel, rd_rel) = best.unwrap_or((t, y, f64::INFINITY, f64::INFINITY));
    if status != SolveStatus::Optimal && status != SolveStatus::Infeasible {
        status = if gap_rel <= 1e4 * opts.gap_tol && rd_rel <= 1e4 * opts.feas_tol {
            SolveStatus::NearOptimal
        } else {
            SolveStatus::NumericalTrouble
        };
    }
    let s_final = build_s(input, &t_best);
    let pobj = dot(input.d, &t_best);
    let dobj: f64 = input
        .g0
        .iter()
        .zip(&y_best)
        .map(|(g, yb)| frob(g, yb))
        .sum();
    let comp: f64 = s_final.iter().zip(&y_best).map(|(s, yb)| frob(s, yb)).sum();
    let mut rd_inf = 0.0f64;
    for j in 0..input.d.len() {
        let mut v = -input.d[j];
        for b in 0..n_blocks {
            v -= frob(&input.gvar[j][b], &y_best[b]);
        }
        rd_inf = rd_inf.max(v.abs());
    }
    IpmOutcome {
        t: t_best,
        y: y_best,
        status,
        iterations,
        primal_obj: pobj,
        dual_obj: dobj,
        complementarity: comp,
        dual_infeas: rd_inf,
    }
}

fn build_s(input: &IpmInput, t: &[f64]) -> Vec<DMatrix<f64>> {
    let mut s: Vec<DMatrix<f64>> = input.g0.to_vec();
    for (j, &tj) in t.iter().enumerate() {
        if tj == 0.0 {
            continue;
        }
        for (b, sb) in s.iter_mut().enumerate() {
            sb.zip_apply(&input.gvar[j][b], |a, g| *a += tj * g);
        }
    }
    s
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn scale_rows(m: &mut DMatrix<f64>, s: &DVector<f64>) {
    for (r, &sr) in s.iter().enumerate() {
        m.row_mut(r).scale_mut(sr);
    }
}

fn invert_lower(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::identity(n, n);
    l.solve_lower_triangular_mut(&mut inv);
    inv
}

/// svec with √2 off-diagonal weights, upper triangle, column-major order.
fn svec_into(m: &DMatrix<f64>, out: &mut [f64], mut off: usize) -> usize {
    let r = m.nrows();
    for j in 0..r {
        for i in 0..=j {
            out[off] = if i == j {
                m[(i, j)]
            } else {
                SQRT2 * 0.5 * (m[(i, j)] + m[(j, i)])
            };
            off += 1;
        }
    }
    off
}

fn svec_all(blocks: &[DMatrix<f64>], len: usize) -> DVector<f64> {
    let mut out = vec![0.0; len];
    let mut off = 0;
    for b in blocks {
        off = svec_into(b, &mut out, off);
    }
    DVector::from_vec(out)
}

/// svec of a block-diagonal matrix with the given diagonals, scaled.
fn svec_diag(diags: &[DVector<f64>], len: usize, scale: f64) -> DVector<f64> {
    let mut out = DVector::zeros(len);
    let mut off = 0;
    for d in diags {
        for j in 0..d.len() {
            for i in 0..=j {
                if i == j {
                    out[off] = scale * d[j];
                }
                off += 1;
            }
        }
    }
    debug_assert_eq!(off, len);
    out
}

fn unsvec(v: &DVector<f64>, sides: &[usize]) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(sides.len());
    let mut off = 0;
    for &r in sides {
        let mut m = DMatrix::zeros(r, r);
        for j in 0..r {
            for i in 0..=j {
                let val = v[off];
                off += 1;
                if i == j {
                    m[(i, j)] = val;
                } else {
                    let w = val / SQRT2;
                    m[(i, j)] = w;
                    m[(j, i)] = w;
                }
            }
        }
        out.push(m);
    }
    out
}

fn add_diag(m: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for i in 0..d.len() {
        out[(i, i)] += d[i];
    }
    out
}

/// Largest α ≤ cap with V + αΔ ⪰ 0 across all blocks, where V is diagonal.
fn max_step(v_diag: &[DVector<f64>], delta: &[DMatrix<f64>], cap: f64) -> f64 {
    let mut alpha = cap;
    for (v, d) in v_diag.iter().zip(delta) {
        let r = v.len();
        let mut n = d.clone();
        for i in 0..r {
            for j in 0..r {
                n[(i, j)] /= (v[i] * v[j]).sqrt();
            }
        }
        let eig = SymmetricEigen::new((&n + n.transpose()) * 0.5);
        let lam_min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &x| a.min(x));
        if lam_min < 0.0 {
            alpha = alpha.min(-1.0 / lam_min);
        }
    }
    alpha
}
