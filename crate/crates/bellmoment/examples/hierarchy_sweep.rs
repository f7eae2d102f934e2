//! Solve levels 1..n of all three hierarchies for one game.
//!
//! Usage: hierarchy_sweep [game.json] [max_level]

use bellmoment::{build_modified, build_sequential, build_standard, solve, SolverOptions};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let game = match args.get(1) {
        Some(p) => bellmoment::load_game(p).expect("readable game file"),
        None => {
            bellmoment::scenario::load_game_str(include_str!("../data/games/chsh.json")).unwrap()
        }
    };
    let max_level: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let opts = SolverOptions::default();

    let s = game.scenario;
    println!(
        "game: {} ({} {} | {} {})",
        game.name, s.n_x, s.n_y, s.n_a, s.n_b
    );
    for n in 1..=max_level {
        for (name, built) in [
            ("sequential", build_sequential(&game, n)),
            ("standard", build_standard(&game, n)),
            ("modified", build_modified(&game, n)),
        ] {
            let prob = built.expect("level is at least 1");
            let sides: Vec<usize> = prob.blocks.iter().map(|b| b.side).collect();
            let start = Instant::now();
            let sol = solve(&prob, &opts);
            println!(
                "{name:>10} n={n}  bound {:.7}  {:?}  gap {:.1e}  eq {:.1e}  blocks {}x{}  {:.2?}",
                sol.primal_value,
                sol.status,
                sol.residuals.duality_gap,
                sol.residuals.max_eq_residual,
                sides.len(),
                sides.iter().max().unwrap(),
                start.elapsed()
            );
        }
    }
}
