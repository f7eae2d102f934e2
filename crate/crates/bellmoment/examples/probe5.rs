use bellmoment::relax::build_standard;
use bellmoment::scenario::load_game_str;
use bellmoment::sdp::{solve, SolverOptions};
use bellmoment::strategy::{almost_commuting_from_npa, commutator_residuals, sequentialize, signaling_residual};

fn main() {
    let chsh = load_game_str(include_str!("../data/games/chsh.json")).unwrap();
    let i3322 = load_game_str(include_str!("../data/games/i3322.json")).unwrap();
    for (name, f, levels) in [("chsh", &chsh, vec![1usize, 2]), ("i3322", &i3322, vec![1, 2])] {
        for n in levels {
            let prob = build_standard(f, n).unwrap();
            let sol = solve(&prob, &SolverOptions::tight());
            let g = &sol.values[0];
            let gamma = (g + g.transpose()) * 0.5;
            let mut eigs = gamma.clone().symmetric_eigen().eigenvalues.as_slice().to_vec();
            eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let shown: Vec<String> = eigs.iter().map(|v| format!("{v:.2e}")).collect();
            println!("{name} n={n}: status={:?} gap={:.2e} side={} eigs=[{}]", sol.status, sol.residuals.duality_gap, g.nrows(), shown.join(" "));
            for rel_tol in [1e-8, 1e-6, 1e-4, 1e-3] {
                print!("  rel_tol={rel_tol:.0e}: ");
                match almost_commuting_from_npa(&prob, &sol, rel_tol) {
                    Ok(s) => {
                        let rep = commutator_residuals(&s, 2 * n);
                        print!("dim={} score={:.9} weighted={:.2e} frob={:.2e} ", s.dim, s.score(f).unwrap(), rep.weighted, rep.frobenius);
                        match sequentialize(&s) {
                            Ok(seq) => println!("sig@{}={:.2e}", 2 * n - 2, signaling_residual(&seq, 2 * n - 2)),
                            Err(e) => println!("seq-err: {e}"),
                        }
                    }
                    Err(e) => println!("build-err: {e}"),
                }
            }
        }
    }
}
