//! SDPA sparse-format export and a matching parser.
//!
//! The parameterized form maximize dᵀt, G0 + Σ t_j G_j ⪰ 0 maps onto the
//! SDPA primal minimize cᵀx, Σ x_i F_i − F0 ⪰ 0 via x = t, c = −d,
//! F0 = −G0, F_j = G_j. The affine offset dropped by that mapping (the
//! functional constant plus the pinned-moment part of the objective) is
//! recorded in a leading comment line so the bound can be reconstructed as
//! offset − (SDPA optimum). Output is byte-deterministic: entries are
//! emitted in a fixed order and all numbers use C's %.17g rendering.

use super::reduce::{reduce, ReduceError};
use crate::relax::MomentProblem;
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdpaError {
    #[error("problem reduction failed: {0}")]
    Reduce(#[from] ReduceError),
    #[error("malformed SDPA input: {0}")]
    Parse(String),
}

/// A parsed SDPA sparse problem, dense per block.
pub struct SdpaProblem {
    pub m: usize,
    pub block_sizes: Vec<usize>,
    /// Additive offset recovered from the leading comment, 0 when absent.
    pub offset: f64,
    pub c: Vec<f64>,
    pub f0: Vec<DMatrix<f64>>,
    /// Constraint matrices F_1..F_m.
    pub f: Vec<Vec<DMatrix<f64>>>,
}

pub fn export_sdpa(prob: &MomentProblem) -> Result<String, SdpaError> {
    let red = reduce(prob)?;
    let offset = prob.objective_constant + red.c_lin0;
    let sides = red.block_sides().to_vec();

    let mut out = String::new();
    out.push_str("*offset ");
    out.push_str(&fmt_g17(offset));
    out.push('\n');
    out.push_str(&format!("{}\n", red.m));
    out.push_str(&format!("{}\n", sides.len()));
    let size_line: Vec<String> = sides.iter().map(|s| s.to_string()).collect();
    out.push_str(&size_line.join(" "));
    out.push('\n');
    let c_line: Vec<String> = red.d.iter().map(|&v| fmt_g17(-v)).collect();
    out.push_str(&c_line.join(" "));
    out.push('\n');

    // F0 = -G0
    for (b, entries) in red.g0.iter().enumerate() {
        for &(i, j, v) in entries {
            push_entry(&mut out, 0, b, i, j, -v);
        }
    }
    // F_k = G_k
    for (k, entries) in red.gvar.iter().enumerate() {
        for &(b, i, j, v) in entries {
            push_entry(&mut out, k + 1, b as usize, i, j, v);
        }
    }
    Ok(out)
}

fn push_entry(out: &mut String, k: usize, block: usize, i: u32, j: u32, v: f64) {
    if v == 0.0 {
        return;
    }
    out.push_str(&format!(
        "{} {} {} {} {}\n",
        k,
        block + 1,
        i + 1,
        j + 1,
        fmt_g17(v)
    ));
}

pub fn parse_sdpa(text: &str) -> Result<SdpaProblem, SdpaError> {
    let bad = |msg: &str| SdpaError::Parse(msg.to_string());
    let mut offset = 0.0f64;
    let mut data_lines = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() && data_lines.len() > 3 {
            continue;
        }
        if trimmed.starts_with('*') || trimmed.starts_with('"') {
            if let Some(rest) = trimmed.strip_prefix("*offset") {
                offset = rest
                    .trim()
                    .parse()
                    .map_err(|_| bad("unreadable offset comment"))?;
            }
            continue;
        }
        data_lines.push(line.to_string());
    }
    if data_lines.len() < 4 {
        return Err(bad("missing header lines"));
    }
    let m: usize = data_lines[0]
        .trim()
        .parse()
        .map_err(|_| bad("bad constraint count"))?;
    let n_blocks: usize = data_lines[1]
        .trim()
        .parse()
        .map_err(|_| bad("bad block count"))?;
    let sizes: Vec<i64> = tokens(&data_lines[2])
        .iter()
        .map(|t| t.parse().map_err(|_| bad("bad block size")))
        .collect::<Result<_, _>>()?;
    if sizes.len() != n_blocks {
        return Err(bad("block size count mismatch"));
    }
    // negative sizes denote diagonal blocks; treat |s| as a full block
    let block_sizes: Vec<usize> = sizes.iter().map(|&s| s.unsigned_abs() as usize).collect();
    let c: Vec<f64> = tokens(&data_lines[3])
        .iter()
        .map(|t| t.parse().map_err(|_| bad("bad objective entry")))
        .collect::<Result<_, _>>()?;
    if c.len() != m {
        return Err(bad("objective length mismatch"));
    }

    let mut f0: Vec<DMatrix<f64>> = block_sizes
        .iter()
        .map(|&s| DMatrix::zeros(s, s))
        .collect();
    let mut f: Vec<Vec<DMatrix<f64>>> = (0..m)
        .map(|_| block_sizes.iter().map(|&s| DMatrix::zeros(s, s)).collect())
        .collect();
    for line in &data_lines[4..] {
        let toks = tokens(line);
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 5 {
            return Err(bad("entry line does not have 5 fields"));
        }
        let k: usize = toks[0].parse().map_err(|_| bad("bad entry index"))?;
        let b: usize = toks[1].parse().map_err(|_| bad("bad entry block"))?;
        let i: usize = toks[2].parse().map_err(|_| bad("bad entry row"))?;
        let j: usize = toks[3].parse().map_err(|_| bad("bad entry col"))?;
        let v: f64 = toks[4].parse().map_err(|_| bad("bad entry value"))?;
        if k > m || b == 0 || b > block_sizes.len() {
            return Err(bad("entry indices out of range"));
        }
        let side = block_sizes[b - 1];
        if i == 0 || j == 0 || i > side || j > side {
            return Err(bad("entry position out of range"));
        }
        let target = if k == 0 { &mut f0[b - 1] } else { &mut f[k - 1][b - 1] };
        target[(i - 1, j - 1)] = v;
        target[(j - 1, i - 1)] = v;
    }
    Ok(SdpaProblem {
        m,
        block_sizes,
        offset,
        c,
        f0,
        f,
    })
}

fn tokens(line: &str) -> Vec<String> {
    line.replace(['(', ')', '{', '}', ','], " ")
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

/// C's "%.17g": 17 significant digits, fixed style for exponents in
/// [-4, 17), scientific otherwise, trailing zeros stripped, -0 normalized.
pub fn fmt_g17(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let formatted = format!("{:.16e}", v);
    let (mant, exp_str) = formatted
        .split_once('e')
        .expect("{:e} always contains an exponent");
    let exp: i32 = exp_str.parse().expect("exponent is an integer");
    let negative = mant.starts_with('-');
    let digits: String = mant.chars().filter(|c| c.is_ascii_digit()).collect();
    debug_assert_eq!(digits.len(), 17);
    let sign = if negative { "-" } else { "" };

    let body = if (-4..17).contains(&exp) {
        if exp >= 0 {
            let split = (exp + 1) as usize;
            let int_part = &digits[..split];
            let frac_part = digits[split..].trim_end_matches('0');
            if frac_part.is_empty() {
                int_part.to_string()
            } else {
                format!("{int_part}.{frac_part}")
            }
        } else {
            let zeros = "0".repeat((-exp - 1) as usize);
            let frac = format!("{zeros}{digits}");
            let frac = frac.trim_end_matches('0');
            format!("0.{frac}")
        }
    } else {
        let head = &digits[..1];
        let tail = digits[1..].trim_end_matches('0');
        let mant_str = if tail.is_empty() {
            head.to_string()
        } else {
            format!("{head}.{tail}")
        };
        let exp_sign = if exp < 0 { '-' } else { '+' };
        format!("{mant_str}e{exp_sign}{:02}", exp.abs())
    };
    format!("{sign}{body}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relax::{build_sequential, build_standard};
    use crate::scenario::load_game_str;

    fn chsh() -> crate::scenario::BellFunctional {
        load_game_str(include_str!("../../data/games/chsh.json")).unwrap()
    }

    #[test]
    fn g17_styles_match_c() {
        assert_eq!(fmt_g17(0.0), "0");
        assert_eq!(fmt_g17(-0.0), "0");
        assert_eq!(fmt_g17(1.0), "1");
        assert_eq!(fmt_g17(-2.0), "-2");
        assert_eq!(fmt_g17(0.25), "0.25");
        assert_eq!(fmt_g17(-0.5), "-0.5");
        // reference strings printed by C's printf("%.17g", v)
        assert_eq!(fmt_g17(1e-7), "9.9999999999999995e-08");
        assert_eq!(fmt_g17(1.5e20), "1.5e+20");
        assert_eq!(fmt_g17(1e16), "10000000000000000");
        assert_eq!(fmt_g17(1e15), "1000000000000000");
        assert_eq!(fmt_g17(0.0001), "0.0001");
        assert_eq!(fmt_g17(0.00001), "1.0000000000000001e-05");
        assert_eq!(fmt_g17(0.8535533905932737), "0.85355339059327373");
        assert_eq!(fmt_g17(2f64.sqrt()), "1.4142135623730951");
    }

    #[test]
    fn g17_round_trips_doubles_exactly() {
        let vals = [
            0.8535533905932737,
            1.0 / 3.0,
            -7.25e-13,
            999983.0,
            2f64.sqrt(),
            f64::MIN_POSITIVE,
            1.7976931348623157e308,
        ];
        for &v in &vals {
            let s = fmt_g17(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v} -> {s}");
        }
    }

    #[test]
    fn export_is_deterministic_and_has_expected_header() {
        let prob = build_sequential(&chsh(), 1).unwrap();
        let a = export_sdpa(&prob).unwrap();
        let b = export_sdpa(&prob).unwrap();
        assert_eq!(a, b);
        let lines: Vec<&str> = a.lines().collect();
        assert!(lines[0].starts_with("*offset "));
        assert_eq!(lines[1], "11");
        assert_eq!(lines[2], "4");
        assert_eq!(lines[3], "5 5 5 5");
    }

    #[test]
    fn parse_reproduces_export_exactly() {
        let prob = build_standard(&chsh(), 1).unwrap();
        let red = reduce(&prob).unwrap();
        let text = export_sdpa(&prob).unwrap();
        let parsed = parse_sdpa(&text).unwrap();
        assert_eq!(parsed.m, red.m);
        assert_eq!(parsed.block_sizes, red.block_sides());
        assert_eq!(parsed.offset, prob.objective_constant + red.c_lin0);
        for (j, &dv) in red.d.iter().enumerate() {
            assert_eq!(parsed.c[j], -dv);
        }
        // F0 = -G0 and F_j = G_j, entry for entry
        for (b, entries) in red.g0.iter().enumerate() {
            for &(i, j, v) in entries {
                assert_eq!(parsed.f0[b][(i as usize, j as usize)], -v);
            }
        }
        for (k, entries) in red.gvar.iter().enumerate() {
            for &(b, i, j, v) in entries {
                assert_eq!(parsed.f[k][b as usize][(i as usize, j as usize)], v);
            }
        }
    }

    #[test]
    fn parsed_file_resolves_to_the_same_bound() {
        use super::super::{compress::compress_parts, init::interior_start, ipm, SolverOptions};
        let prob = build_sequential(&chsh(), 1).unwrap();
        let text = export_sdpa(&prob).unwrap();
        let parsed = parse_sdpa(&text).unwrap();

        // S(x) = Σ x_i F_i - F0, maximize -cᵀx; the exported offset turns
        // the SDPA optimum back into the moment bound. The moment matrices
        // carry forced column relations, so compress onto the joint range
        // first, exactly as solve() does.
        let sparsify = |mat: &DMatrix<f64>, sign: f64| -> Vec<(u32, u32, f64)> {
            let mut out = Vec::new();
            for i in 0..mat.nrows() {
                for j in i..mat.ncols() {
                    if mat[(i, j)] != 0.0 {
                        out.push((i as u32, j as u32, sign * mat[(i, j)]));
                    }
                }
            }
            out
        };
        let g0: Vec<Vec<(u32, u32, f64)>> = parsed.f0.iter().map(|f| sparsify(f, -1.0)).collect();
        let gvar: Vec<Vec<(u32, u32, u32, f64)>> = parsed
            .f
            .iter()
            .map(|blocks| {
                let mut out = Vec::new();
                for (b, mat) in blocks.iter().enumerate() {
                    for (i, j, v) in sparsify(mat, 1.0) {
                        out.push((b as u32, i, j, v));
                    }
                }
                out
            })
            .collect();
        let comp = compress_parts(&parsed.block_sizes, &g0, &gvar);
        let d: Vec<f64> = parsed.c.iter().map(|&v| -v).collect();

        let red = reduce(&prob).unwrap();
        let t0 = red.free_values(&interior_start(&prob, 0));
        let input = ipm::IpmInput {
            sides: &comp.sides,
            g0: &comp.g0,
            gvar: &comp.gvar,
            d: &d,
        };
        let out = ipm::run(&input, t0, &SolverOptions::default());
        let bound = parsed.offset + out.primal_obj;
        assert!((bound - 0.8535533905932737).abs() < 1e-6, "bound {bound}");
    }

    #[test]
    fn fixed_problem_exports_zero_constraints() {
        use crate::relax::{BlockInfo, Cell, ClassKind, EqClass, HierarchyKind, ProblemMeta};
        use crate::scenario::Scenario;
        let prob = MomentProblem {
            blocks: vec![BlockInfo {
                label: "B".into(),
                side: 1,
            }],
            eq_classes: vec![EqClass {
                kind: ClassKind::Normalization,
                cells: vec![(Cell::new(0, 0, 0), 1.0)],
                constant: 1.0,
            }],
            objective: vec![(Cell::new(0, 0, 0), 2.0)],
            objective_constant: 0.0,
            meta: ProblemMeta {
                scenario: Scenario::new(1, 1, 1, 1).unwrap(),
                kind: HierarchyKind::Standard,
                level: 1,
                bases: Vec::new(),
                block_ax: Vec::new(),
            },
        };
        let text = export_sdpa(&prob).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "0", "no free parameters");
        assert!(lines[0].contains("*offset 2"));
        let parsed = parse_sdpa(&text).unwrap();
        assert_eq!(parsed.m, 0);
        assert_eq!(parsed.f0[0][(0, 0)], -1.0);
    }
}
