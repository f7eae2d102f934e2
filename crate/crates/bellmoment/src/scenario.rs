//! Bell scenarios, functionals (games), and correlations.
//!
//! A [`Scenario`] fixes the four alphabet sizes, a [`BellFunctional`] carries
//! the score coefficients β over joint cells (a, b, x, y) plus a constant
//! offset, and a [`Correlation`] is an explicit table p(ab|xy). Games are
//! ingested from JSON files; predicate/distribution games are normalized into
//! coefficient form by [`BellFunctional::from_predicate`].

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Alphabet sizes of a bipartite Bell scenario: Alice has `n_x` inputs and
/// `n_a` outputs, Bob `n_y` inputs and `n_b` outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(rename = "nX")]
    pub n_x: usize,
    #[serde(rename = "nY")]
    pub n_y: usize,
    #[serde(rename = "nA")]
    pub n_a: usize,
    #[serde(rename = "nB")]
    pub n_b: usize,
}

impl Scenario {
    pub fn new(n_x: usize, n_y: usize, n_a: usize, n_b: usize) -> Result<Self, ScenarioError> {
        if n_x == 0 || n_y == 0 || n_a == 0 || n_b == 0 {
            return Err(ScenarioError::SchemaError(
                "all four alphabet sizes must be >= 1".into(),
            ));
        }
        Ok(Scenario { n_x, n_y, n_a, n_b })
    }

    /// Number of joint probability cells nA·nB·nX·nY.
    pub fn cell_count(&self) -> usize {
        self.n_a * self.n_b * self.n_x * self.n_y
    }

    /// Dense index of the cell (a, b, x, y).
    pub fn cell_index(&self, a: usize, b: usize, x: usize, y: usize) -> usize {
        debug_assert!(a < self.n_a && b < self.n_b && x < self.n_x && y < self.n_y);
        ((a * self.n_b + b) * self.n_x + x) * self.n_y + y
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("scenario mismatch: {0}")]
    ScenarioMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A Bell functional: score(p) = constant + Σ coeffs[a,b,x,y]·p(ab|xy).
#[derive(Debug, Clone, PartialEq)]
pub struct BellFunctional {
    pub scenario: Scenario,
    /// Dense coefficient table indexed by [`Scenario::cell_index`].
    pub coeffs: Vec<f64>,
    pub constant: f64,
    pub name: String,
}

impl BellFunctional {
    pub fn new(scenario: Scenario, name: &str) -> Self {
        BellFunctional {
            scenario,
            coeffs: vec![0.0; scenario.cell_count()],
            constant: 0.0,
            name: name.to_string(),
        }
    }

    pub fn coeff(&self, a: usize, b: usize, x: usize, y: usize) -> f64 {
        self.coeffs[self.scenario.cell_index(a, b, x, y)]
    }

    pub fn set_coeff(&mut self, a: usize, b: usize, x: usize, y: usize, c: f64) {
        let i = self.scenario.cell_index(a, b, x, y);
        self.coeffs[i] = c;
    }

    /// Normalizes a (predicate, question-distribution) game into coefficient
    /// form: coeffs[a,b,x,y] = π(x,y)·V(a,b,x,y).
    pub fn from_predicate<V, P>(scenario: Scenario, name: &str, predicate: V, pi: P) -> Self
    where
        V: Fn(usize, usize, usize, usize) -> f64,
        P: Fn(usize, usize) -> f64,
    {
        let mut f = BellFunctional::new(scenario, name);
        for a in 0..scenario.n_a {
            for b in 0..scenario.n_b {
                for x in 0..scenario.n_x {
                    for y in 0..scenario.n_y {
                        f.set_coeff(a, b, x, y, pi(x, y) * predicate(a, b, x, y));
                    }
                }
            }
        }
        f
    }
}

/// An explicit correlation table p(ab|xy).
#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub scenario: Scenario,
    pub p: Vec<f64>,
}

impl Correlation {
    pub fn new(scenario: Scenario) -> Self {
        Correlation {
            scenario,
            p: vec![0.0; scenario.cell_count()],
        }
    }

    /// Uniform correlation p ≡ 1/(nA·nB).
    pub fn uniform(scenario: Scenario) -> Self {
        let v = 1.0 / (scenario.n_a * scenario.n_b) as f64;
        Correlation {
            scenario,
            p: vec![v; scenario.cell_count()],
        }
    }

    /// The deterministic local strategy a = f(x), b = g(y).
    pub fn deterministic<F, G>(scenario: Scenario, f: F, g: G) -> Self
    where
        F: Fn(usize) -> usize,
        G: Fn(usize) -> usize,
    {
        let mut c = Correlation::new(scenario);
        for x in 0..scenario.n_x {
            for y in 0..scenario.n_y {
                let i = scenario.cell_index(f(x), g(y), x, y);
                c.p[i] = 1.0;
            }
        }
        c
    }

    pub fn get(&self, a: usize, b: usize, x: usize, y: usize) -> f64 {
        self.p[self.scenario.cell_index(a, b, x, y)]
    }

    pub fn set(&mut self, a: usize, b: usize, x: usize, y: usize, v: f64) {
        let i = self.scenario.cell_index(a, b, x, y);
        self.p[i] = v;
    }

    /// Checks entrywise nonnegativity and per-(x,y) normalization within `tol`.
    /// Advisory: validity is queryable, never enforced.
    pub fn is_valid(&self, tol: f64) -> bool {
        if self.p.iter().any(|&v| v < -tol) {
            return false;
        }
        for x in 0..self.scenario.n_x {
            for y in 0..self.scenario.n_y {
                let mut s = 0.0;
                for a in 0..self.scenario.n_a {
                    for b in 0..self.scenario.n_b {
                        s += self.get(a, b, x, y);
                    }
                }
                if (s - 1.0).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// score(f, p) = constant + Σ coeffs·p. Linear in p.
pub fn score(f: &BellFunctional, p: &Correlation) -> Result<f64, ScenarioError> {
    if f.scenario != p.scenario {
        return Err(ScenarioError::ScenarioMismatch(format!(
            "functional scenario {:?} vs correlation scenario {:?}",
            f.scenario, p.scenario
        )));
    }
    let dot: f64 = f.coeffs.iter().zip(&p.p).map(|(c, v)| c * v).sum();
    Ok(f.constant + dot)
}

#[derive(Serialize, Deserialize)]
struct GameFileEntry {
    a: usize,
    b: usize,
    x: usize,
    y: usize,
    c: f64,
}

#[derive(Serialize, Deserialize)]
struct GameFile {
    name: String,
    #[serde(rename = "nX")]
    n_x: usize,
    #[serde(rename = "nY")]
    n_y: usize,
    #[serde(rename = "nA")]
    n_a: usize,
    #[serde(rename = "nB")]
    n_b: usize,
    #[serde(default)]
    constant: f64,
    #[serde(default)]
    coeffs: Vec<GameFileEntry>,
}

/// Loads a game description file. Omitted cells default to coefficient 0.
pub fn load_game<P: AsRef<Path>>(path: P) -> Result<BellFunctional, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    load_game_str(&text)
}

pub fn load_game_str(text: &str) -> Result<BellFunctional, ScenarioError> {
    let file: GameFile =
        serde_json::from_str(text).map_err(|e| ScenarioError::ParseError(e.to_string()))?;
    let scenario = Scenario::new(file.n_x, file.n_y, file.n_a, file.n_b)?;
    let mut f = BellFunctional::new(scenario, &file.name);
    f.constant = file.constant;
    for e in &file.coeffs {
        if e.a >= scenario.n_a || e.b >= scenario.n_b || e.x >= scenario.n_x || e.y >= scenario.n_y
        {
            return Err(ScenarioError::SchemaError(format!(
                "coefficient index (a={}, b={}, x={}, y={}) out of bounds for {:?}",
                e.a, e.b, e.x, e.y, scenario
            )));
        }
        f.set_coeff(e.a, e.b, e.x, e.y, e.c);
    }
    Ok(f)
}

/// Writes a game in the schema accepted by [`load_game`]. All cells are
/// listed, including zeros, so load ∘ save is the identity.
pub fn save_game<P: AsRef<Path>>(f: &BellFunctional, path: P) -> Result<(), ScenarioError> {
    std::fs::write(path, save_game_str(f))?;
    Ok(())
}

pub fn save_game_str(f: &BellFunctional) -> String {
    let s = f.scenario;
    let mut coeffs = Vec::with_capacity(s.cell_count());
    for a in 0..s.n_a {
        for b in 0..s.n_b {
            for x in 0..s.n_x {
                for y in 0..s.n_y {
                    coeffs.push(GameFileEntry {
                        a,
                        b,
                        x,
                        y,
                        c: f.coeff(a, b, x, y),
                    });
                }
            }
        }
    }
    let file = GameFile {
        name: f.name.clone(),
        n_x: s.n_x,
        n_y: s.n_y,
        n_a: s.n_a,
        n_b: s.n_b,
        constant: f.constant,
        coeffs,
    };
    serde_json::to_string_pretty(&file).expect("game serialization cannot fail")
}
