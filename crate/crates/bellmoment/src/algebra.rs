//! Canonical noncommutative words over measurement letters.
//!
//! Letters are the projective measurement symbols A(a|x), B(b|y). Words are
//! reduced to a canonical form under: idempotence of adjacent equal letters,
//! annihilation of adjacent same-party same-input different-outcome letters,
//! and (optionally) stable cross-party commutation that sorts Alice letters
//! before Bob letters. All outcome letters are retained; POVM completeness is
//! a linear constraint on moments, not a rewrite rule.

use crate::scenario::Scenario;
use std::collections::HashMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Party {
    Alice,
    Bob,
}

/// One measurement symbol. Ordering is (party, input, outcome), which fixes
/// the lexicographic word order and hence every moment-matrix layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Letter {
    pub party: Party,
    pub input: usize,
    pub outcome: usize,
}

impl Letter {
    pub fn alice(outcome: usize, input: usize) -> Self {
        Letter {
            party: Party::Alice,
            input,
            outcome,
        }
    }

    pub fn bob(outcome: usize, input: usize) -> Self {
        Letter {
            party: Party::Bob,
            input,
            outcome,
        }
    }

    pub fn in_bounds(&self, scn: &Scenario) -> bool {
        match self.party {
            Party::Alice => self.input < scn.n_x && self.outcome < scn.n_a,
            Party::Bob => self.input < scn.n_y && self.outcome < scn.n_b,
        }
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.party {
            Party::Alice => 'A',
            Party::Bob => 'B',
        };
        write!(f, "{}({}|{})", p, self.outcome, self.input)
    }
}

/// A canonical word. The empty sequence with `is_zero = false` is the
/// identity; `is_zero = true` (with empty letters) is the zero element.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Word {
    letters: Vec<Letter>,
    is_zero: bool,
}

/// Length-then-lex, the same order bases are enumerated in. Zero sorts last.
impl Ord for Word {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.is_zero, self.letters.len(), &self.letters).cmp(&(
            other.is_zero,
            other.letters.len(),
            &other.letters,
        ))
    }
}

impl PartialOrd for Word {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Word {
    pub fn one() -> Self {
        Word {
            letters: Vec::new(),
            is_zero: false,
        }
    }

    pub fn zero() -> Self {
        Word {
            letters: Vec::new(),
            is_zero: true,
        }
    }

    pub fn letter(l: Letter) -> Self {
        Word {
            letters: vec![l],
            is_zero: false,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.is_zero
    }

    pub fn is_one(&self) -> bool {
        !self.is_zero && self.letters.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.letters.len()
    }

    pub fn letters(&self) -> &[Letter] {
        &self.letters
    }

    /// Letters of the given party, in order.
    pub fn party_letters(&self, party: Party) -> impl Iterator<Item = &Letter> {
        self.letters.iter().filter(move |l| l.party == party)
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero {
            return write!(f, "0");
        }
        if self.letters.is_empty() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self.letters.iter().map(|l| l.to_string()).collect();
        write!(f, "{}", parts.join("·"))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlgebraError {
    #[error("letter {letter} out of bounds for scenario {scenario:?}")]
    IndexOutOfBounds { letter: String, scenario: Scenario },
}

/// Reduces a raw letter sequence to canonical form.
///
/// With `commute_parties` the word is first stably split into its Alice and
/// Bob subsequences (each party's internal order preserved), which is exactly
/// the fixed point of sorting under [A, B] = 0.
pub fn canonicalize(raw: &[Letter], commute_parties: bool) -> Word {
    if commute_parties {
        let alice: Vec<Letter> = raw.iter().copied().filter(|l| l.party == Party::Alice).collect();
        let bob: Vec<Letter> = raw.iter().copied().filter(|l| l.party == Party::Bob).collect();
        let a = reduce_adjacent(&alice);
        let b = reduce_adjacent(&bob);
        match (a, b) {
            (Some(mut aw), Some(bw)) => {
                aw.extend(bw);
                Word {
                    letters: aw,
                    is_zero: false,
                }
            }
            _ => Word::zero(),
        }
    } else {
        match reduce_adjacent(raw) {
            Some(letters) => Word {
                letters,
                is_zero: false,
            },
            None => Word::zero(),
        }
    }
}

/// Bounds-checked canonicalization against a scenario.
pub fn canonicalize_in(
    raw: &[Letter],
    scn: &Scenario,
    commute_parties: bool,
) -> Result<Word, AlgebraError> {
    for l in raw {
        if !l.in_bounds(scn) {
            return Err(AlgebraError::IndexOutOfBounds {
                letter: l.to_string(),
                scenario: *scn,
            });
        }
    }
    Ok(canonicalize(raw, commute_parties))
}

/// Adjacent-pair reduction to a fixed point. `None` means the zero word.
fn reduce_adjacent(raw: &[Letter]) -> Option<Vec<Letter>> {
    let mut out: Vec<Letter> = Vec::with_capacity(raw.len());
    for &l in raw {
        loop {
            match out.last() {
                Some(&last) if last == l => {
                    // idempotent: drop the duplicate
                    break;
                }
                Some(&last)
                    if last.party == l.party
                        && last.input == l.input
                        && last.outcome != l.outcome =>
                {
                    return None;
                }
                _ => {
                    out.push(l);
                    break;
                }
            }
        }
    }
    Some(out)
}

/// canonicalize(w1 ++ w2); zero absorbs.
pub fn multiply(w1: &Word, w2: &Word, commute_parties: bool) -> Word {
    if w1.is_zero || w2.is_zero {
        return Word::zero();
    }
    let mut raw = Vec::with_capacity(w1.letters.len() + w2.letters.len());
    raw.extend_from_slice(&w1.letters);
    raw.extend_from_slice(&w2.letters);
    canonicalize(&raw, commute_parties)
}

/// Reversal (letters are self-adjoint projections), then re-canonicalization.
pub fn adjoint(w: &Word, commute_parties: bool) -> Word {
    if w.is_zero {
        return Word::zero();
    }
    let rev: Vec<Letter> = w.letters.iter().rev().copied().collect();
    canonicalize(&rev, commute_parties)
}

/// Which parties' letters a basis draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parties {
    AliceOnly,
    BobOnly,
    Both,
}

impl Parties {
    fn letters(&self, scn: &Scenario) -> Vec<Letter> {
        let mut out = Vec::new();
        if matches!(self, Parties::AliceOnly | Parties::Both) {
            for x in 0..scn.n_x {
                for a in 0..scn.n_a {
                    out.push(Letter::alice(a, x));
                }
            }
        }
        if matches!(self, Parties::BobOnly | Parties::Both) {
            for y in 0..scn.n_y {
                for b in 0..scn.n_b {
                    out.push(Letter::bob(b, y));
                }
            }
        }
        out.sort();
        out
    }
}

/// An ordered enumeration of all canonical words up to a degree.
#[derive(Debug, Clone)]
pub struct WordBasis {
    pub words: Vec<Word>,
    pub index: HashMap<Word, usize>,
    pub degree: usize,
}

impl WordBasis {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn position(&self, w: &Word) -> Option<usize> {
        self.index.get(w).copied()
    }
}

/// All distinct canonical words of length ≤ `degree` over the selected
/// parties' letters, sorted by (length, lexicographic). 𝟙 is at position 0
/// and lower-degree bases are prefixes of higher-degree ones.
pub fn enumerate_basis(
    scn: &Scenario,
    parties: Parties,
    degree: usize,
    commute_parties: bool,
) -> WordBasis {
    let letters = parties.letters(scn);
    let mut words = vec![Word::one()];
    let mut prev_layer = vec![Word::one()];
    for d in 1..=degree {
        let mut layer = Vec::new();
        for w in &prev_layer {
            for &l in &letters {
                let ext = multiply(w, &Word::letter(l), commute_parties);
                if !ext.is_zero() && ext.degree() == d {
                    layer.push(ext);
                }
            }
        }
        layer.sort();
        layer.dedup();
        words.extend(layer.iter().cloned());
        prev_layer = layer;
    }
    let mut index = HashMap::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        index.insert(w.clone(), i);
    }
    WordBasis {
        words,
        index,
        degree,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chsh_scn() -> Scenario {
        Scenario::new(2, 2, 2, 2).unwrap()
    }

    fn i3322_scn() -> Scenario {
        Scenario::new(3, 3, 2, 2).unwrap()
    }

    #[test]
    fn idempotent_letters_collapse() {
        let b = Letter::bob(0, 0);
        assert_eq!(canonicalize(&[b, b], false), Word::letter(b));
    }

    #[test]
    fn orthogonal_outcomes_annihilate() {
        let w = canonicalize(&[Letter::bob(0, 0), Letter::bob(1, 0)], false);
        assert!(w.is_zero());
    }

    #[test]
    fn commutation_sorts_alice_first() {
        let w = canonicalize(&[Letter::bob(0, 1), Letter::alice(0, 0)], true);
        assert_eq!(
            w.letters(),
            &[Letter::alice(0, 0), Letter::bob(0, 1)]
        );
    }

    #[test]
    fn canonicalize_is_idempotent_on_samples() {
        let scn = chsh_scn();
        let letters = Parties::Both.letters(&scn);
        // all raw strings of length <= 3
        let mut stack = vec![Vec::new()];
        while let Some(raw) = stack.pop() {
            let w = canonicalize(&raw, true);
            if !w.is_zero() {
                assert_eq!(canonicalize(w.letters(), true), w);
            }
            if raw.len() < 3 {
                for &l in &letters {
                    let mut next = raw.clone();
                    next.push(l);
                    stack.push(next);
                }
            }
        }
    }

    #[test]
    fn multiply_is_associative_on_low_degree_words() {
        let scn = chsh_scn();
        for commute in [false, true] {
            let basis = enumerate_basis(&scn, Parties::Both, 2, commute);
            for w1 in &basis.words {
                for w2 in &basis.words {
                    for w3 in &basis.words {
                        let left = multiply(&multiply(w1, w2, commute), w3, commute);
                        let right = multiply(w1, &multiply(w2, w3, commute), commute);
                        assert_eq!(left, right);
                    }
                }
            }
        }
    }

    #[test]
    fn adjoint_is_involutive_antihomomorphism() {
        let scn = chsh_scn();
        for commute in [false, true] {
            let basis = enumerate_basis(&scn, Parties::Both, 2, commute);
            for w1 in &basis.words {
                assert_eq!(adjoint(&adjoint(w1, commute), commute), *w1);
                for w2 in &basis.words {
                    let lhs = adjoint(&multiply(w1, w2, commute), commute);
                    let rhs = multiply(&adjoint(w2, commute), &adjoint(w1, commute), commute);
                    assert_eq!(lhs, rhs);
                }
            }
        }
    }

    #[test]
    fn adjoint_reverses_letters() {
        let w = canonicalize(&[Letter::bob(0, 0), Letter::bob(0, 1)], false);
        let rev = adjoint(&w, false);
        assert_eq!(rev.letters(), &[Letter::bob(0, 1), Letter::bob(0, 0)]);
    }

    #[test]
    fn adjoint_of_sorted_cross_party_word_is_itself() {
        let w = canonicalize(&[Letter::alice(0, 0), Letter::bob(0, 1)], true);
        assert_eq!(adjoint(&w, true), w);
    }

    #[test]
    fn chsh_bob_level1_has_5_words() {
        let basis = enumerate_basis(&chsh_scn(), Parties::BobOnly, 1, false);
        assert_eq!(basis.len(), 5);
        assert!(basis.words[0].is_one());
    }

    #[test]
    fn chsh_both_level1_has_9_words() {
        let basis = enumerate_basis(&chsh_scn(), Parties::Both, 1, true);
        assert_eq!(basis.len(), 9);
    }

    #[test]
    fn degree_zero_is_identity_only() {
        let basis = enumerate_basis(&chsh_scn(), Parties::Both, 0, true);
        assert_eq!(basis.words, vec![Word::one()]);
    }

    /// Independent oracle: enumerate every raw letter string up to the degree,
    /// canonicalize, and dedupe. The BFS enumeration must agree exactly.
    fn oracle_counts(scn: &Scenario, parties: Parties, degree: usize, commute: bool) -> Vec<Word> {
        let letters = parties.letters(scn);
        let mut found: Vec<Word> = Vec::new();
        let mut frontier = vec![Vec::<Letter>::new()];
        for _ in 0..=degree {
            let mut next = Vec::new();
            for raw in &frontier {
                let w = canonicalize(raw, commute);
                if !w.is_zero() && w.degree() <= degree {
                    found.push(w);
                }
                if raw.len() < degree {
                    for &l in &letters {
                        let mut r = raw.clone();
                        r.push(l);
                        next.push(r);
                    }
                }
            }
            frontier = next;
        }
        found.sort();
        found.dedup();
        found
    }

    #[test]
    fn enumeration_matches_brute_force_oracle() {
        let cases = [
            (chsh_scn(), Parties::BobOnly, 3, false),
            (chsh_scn(), Parties::Both, 2, true),
            (chsh_scn(), Parties::Both, 2, false),
            (i3322_scn(), Parties::BobOnly, 2, false),
            (i3322_scn(), Parties::Both, 1, true),
        ];
        for (scn, parties, degree, commute) in cases {
            let basis = enumerate_basis(&scn, parties, degree, commute);
            let oracle = oracle_counts(&scn, parties, degree, commute);
            let mut sorted = basis.words.clone();
            sorted.sort();
            assert_eq!(sorted, oracle, "mismatch for {scn:?} {parties:?} n={degree}");
        }
    }

    #[test]
    fn frozen_basis_sizes() {
        let chsh = chsh_scn();
        let i3322 = i3322_scn();
        // Bob-only chains
        for (n, expect) in [(1, 5), (2, 13), (3, 29), (4, 61)] {
            assert_eq!(enumerate_basis(&chsh, Parties::BobOnly, n, false).len(), expect);
        }
        for (n, expect) in [(1, 7), (2, 31), (3, 127)] {
            assert_eq!(enumerate_basis(&i3322, Parties::BobOnly, n, false).len(), expect);
        }
        // Commuting both-party bases
        for (n, expect) in [(1, 9), (2, 41), (3, 137)] {
            assert_eq!(enumerate_basis(&chsh, Parties::Both, n, true).len(), expect);
        }
        for (n, expect) in [(1, 13), (2, 97)] {
            assert_eq!(enumerate_basis(&i3322, Parties::Both, n, true).len(), expect);
        }
    }

    #[test]
    fn lower_degree_basis_is_prefix_of_higher() {
        let scn = chsh_scn();
        let b2 = enumerate_basis(&scn, Parties::Both, 2, true);
        let b3 = enumerate_basis(&scn, Parties::Both, 3, true);
        assert!(b2.len() <= b3.len());
        assert_eq!(&b3.words[..b2.len()], &b2.words[..]);
    }

    #[test]
    fn bounds_check_rejects_out_of_scenario_letter() {
        let scn = chsh_scn();
        let err = canonicalize_in(&[Letter::bob(0, 5)], &scn, false);
        assert!(matches!(err, Err(AlgebraError::IndexOutOfBounds { .. })));
    }

    #[test]
    fn rendering() {
        assert_eq!(Word::one().to_string(), "1");
        assert_eq!(Word::zero().to_string(), "0");
        let w = canonicalize(&[Letter::alice(0, 1), Letter::bob(1, 0)], true);
        assert_eq!(w.to_string(), "A(0|1)·B(1|0)");
    }
}
