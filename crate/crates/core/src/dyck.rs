//! Ground truth for bounded-depth Dyck languages.
//!
//! Everything in this module is plain stack code: the pushdown oracle, the
//! legal-continuation oracle, depth profiles, a seeded sampler and an
//! exhaustive enumerator. The network constructions are checked against it.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One symbol of `γ Σ* ω`. Bracket types are numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Token {
    Start,
    End,
    Open(u32),
    Close(u32),
}

impl Token {
    /// Integer code used by corpus files and embedding tables:
    /// `0 = Start`, `1 = End`, `2i = Open(i)`, `2i+1 = Close(i)`.
    pub fn id(self) -> usize {
        match self {
            Token::Start => 0,
            Token::End => 1,
            Token::Open(i) => 2 * i as usize,
            Token::Close(i) => 2 * i as usize + 1,
        }
    }

    pub fn from_id(id: usize) -> Option<Token> {
        match id {
            0 => Some(Token::Start),
            1 => Some(Token::End),
            _ if id % 2 == 0 => Some(Token::Open((id / 2) as u32)),
            _ => Some(Token::Close((id / 2) as u32)),
        }
    }

    pub fn type_index(self) -> Option<u32> {
        match self {
            Token::Open(i) | Token::Close(i) => Some(i),
            Token::Start | Token::End => None,
        }
    }

    pub fn is_open(self) -> bool {
        matches!(self, Token::Open(_))
    }

    pub fn is_close(self) -> bool {
        matches!(self, Token::Close(_))
    }

    pub fn is_bracket(self) -> bool {
        self.type_index().is_some()
    }

    /// True for brackets whose type index lies in `1..=k`, and for markers.
    pub fn in_vocabulary(self, k: u32) -> bool {
        match self.type_index() {
            Some(i) => (1..=k).contains(&i),
            None => true,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Start => write!(f, "^"),
            Token::End => write!(f, "$"),
            Token::Open(i) => write!(f, "<{i}"),
            Token::Close(i) => write!(f, ">{i}"),
        }
    }
}

/// The `2k` bracket tokens, opens first.
pub fn brackets(k: u32) -> Vec<Token> {
    (1..=k)
        .map(Token::Open)
        .chain((1..=k).map(Token::Close))
        .collect()
}

/// Render a token sequence as `^ <1 >1 $`.
pub fn render(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Surround an interior string with the start and end markers.
pub fn wrap(interior: &[Token]) -> Vec<Token> {
    let mut out = Vec::with_capacity(interior.len() + 2);
    out.push(Token::Start);
    out.extend_from_slice(interior);
    out.push(Token::End);
    out
}

/// Opens minus closes over each prefix. Markers count zero.
pub fn depth_profile(tokens: &[Token]) -> Vec<i64> {
    let mut depth = 0i64;
    tokens
        .iter()
        .map(|t| {
            match t {
                Token::Open(_) => depth += 1,
                Token::Close(_) => depth -= 1,
                Token::Start | Token::End => {}
            }
            depth
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    TypeMismatch,
    Underflow,
    DepthExceeded,
    Unclosed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub member: bool,
    /// Index into the full sequence, `Start` included.
    pub first_violation: Option<usize>,
    pub violation_kind: Option<ViolationKind>,
}

impl OracleVerdict {
    fn accept() -> Self {
        OracleVerdict {
            member: true,
            first_violation: None,
            violation_kind: None,
        }
    }

    fn reject(at: usize, kind: ViolationKind) -> Self {
        OracleVerdict {
            member: false,
            first_violation: Some(at),
            violation_kind: Some(kind),
        }
    }
}

fn check_vocabulary(tokens: &[Token], k: u32) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if let Some((i, t)) = tokens.iter().enumerate().find(|(_, t)| !t.in_vocabulary(k)) {
        return Err(Error::invalid(format!(
            "token {t} at position {i} is outside the vocabulary of {k} bracket types"
        )));
    }
    Ok(())
}

/// Pushdown recognizer for `γ Dyck_{k,D} ω`.
pub fn oracle_recognize(tokens: &[Token], k: u32, depth: u32) -> Result<OracleVerdict> {
    check_vocabulary(tokens, k)?;
    let n = tokens.len();
    if n < 2 || tokens[0] != Token::Start || tokens[n - 1] != Token::End {
        return Err(Error::invalid("sequence must be wrapped as Start ... End"));
    }
    if let Some(i) = tokens[1..n - 1].iter().position(|t| !t.is_bracket()) {
        return Err(Error::invalid(format!(
            "marker inside the string at position {}",
            i + 1
        )));
    }

    let mut stack: Vec<u32> = Vec::with_capacity(depth as usize);
    for (pos, &tok) in tokens.iter().enumerate().take(n - 1).skip(1) {
        match tok {
            Token::Open(i) => {
                if stack.len() == depth as usize {
                    return Ok(OracleVerdict::reject(pos, ViolationKind::DepthExceeded));
                }
                stack.push(i);
            }
            Token::Close(i) => match stack.pop() {
                None => return Ok(OracleVerdict::reject(pos, ViolationKind::Underflow)),
                Some(top) if top != i => {
                    return Ok(OracleVerdict::reject(pos, ViolationKind::TypeMismatch))
                }
                Some(_) => {}
            },
            Token::Start | Token::End => unreachable!(),
        }
    }
    if stack.is_empty() {
        Ok(OracleVerdict::accept())
    } else {
        Ok(OracleVerdict::reject(n - 1, ViolationKind::Unclosed))
    }
}

/// Stack of open types after scanning a prefix that starts with `Start`.
fn scan_prefix(prefix: &[Token], k: u32, depth: u32) -> Result<Vec<u32>> {
    check_vocabulary(prefix, k)?;
    if prefix.first() != Some(&Token::Start) {
        return Err(Error::invalid("prefix must begin with Start"));
    }
    let mut stack = Vec::new();
    for (pos, &tok) in prefix.iter().enumerate().skip(1) {
        match tok {
            Token::Open(i) => {
                if stack.len() == depth as usize {
                    return Err(Error::invalid(format!(
                        "depth bound exceeded at position {pos}"
                    )));
                }
                stack.push(i);
            }
            Token::Close(i) => {
                if stack.pop() != Some(i) {
                    return Err(Error::invalid(format!("unmatched close at position {pos}")));
                }
            }
            Token::Start | Token::End => {
                return Err(Error::invalid(format!(
                    "marker inside the prefix at position {pos}"
                )))
            }
        }
    }
    Ok(stack)
}

/// Tokens `t` such that `prefix · t` still extends to a member of total
/// length (markers included) at most `n_max`.
pub fn legal_next_tokens(
    prefix: &[Token],
    k: u32,
    depth: u32,
    n_max: usize,
) -> Result<BTreeSet<Token>> {
    let stack = scan_prefix(prefix, k, depth)?;
    let len = prefix.len();
    let d = stack.len();
    // Shortest completion closes everything and appends End.
    if len + d + 1 > n_max {
        return Err(Error::invalid(format!(
            "prefix of length {len} at depth {d} cannot finish within {n_max} tokens"
        )));
    }

    let mut legal = BTreeSet::new();
    if d < depth as usize && len + d + 3 <= n_max {
        legal.extend((1..=k).map(Token::Open));
    }
    match stack.last() {
        Some(&top) => {
            legal.insert(Token::Close(top));
        }
        None => {
            legal.insert(Token::End);
        }
    }
    Ok(legal)
}

/// A sequence together with its cached depth profile and oracle verdict.
#[derive(Clone, Debug, PartialEq)]
pub struct DyckInstance {
    pub tokens: Vec<Token>,
    pub k: u32,
    pub depth_bound: u32,
    pub depth_profile: Vec<i64>,
    pub verdict: OracleVerdict,
}

impl DyckInstance {
    pub fn new(tokens: Vec<Token>, k: u32, depth_bound: u32) -> Result<Self> {
        let verdict = oracle_recognize(&tokens, k, depth_bound)?;
        let depth_profile = depth_profile(&tokens);
        Ok(DyckInstance {
            tokens,
            k,
            depth_bound,
            depth_profile,
            verdict,
        })
    }

    pub fn interior(&self) -> &[Token] {
        &self.tokens[1..self.tokens.len() - 1]
    }
}

/// Probability of pushing when both push and pop are allowed.
pub const PUSH_PROBABILITY: f64 = 0.5;

/// Probability of stopping at depth zero once the minimum length is met.
///
/// With this rate a string makes about `D + 1` excursions from the empty
/// stack, each of which visits depth `d` in `O(d^2)` expected steps.
pub fn end_probability(depth: u32) -> f64 {
    1.0 / (depth as f64 + 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub k: u32,
    pub depth: u32,
    /// Interior length bounds, inclusive.
    pub min_len: usize,
    pub max_len: usize,
}

impl SamplerConfig {
    pub fn new(k: u32, depth: u32, min_len: usize, max_len: usize) -> Result<Self> {
        let cfg = SamplerConfig {
            k,
            depth,
            min_len,
            max_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Smallest nonempty even length inside the range.
    fn shortest(&self) -> usize {
        let lo = self.min_len.max(2);
        lo + lo % 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.depth == 0 {
            return Err(Error::invalid("k and D must be at least 1"));
        }
        if self.shortest() > self.max_len {
            return Err(Error::invalid(format!(
                "no nonempty balanced string has a length in {}..={}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// Seeded generator of members of `Dyck_{k,D}` by random stack decisions.
pub struct Sampler {
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(cfg: SamplerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Sampler {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> SamplerConfig {
        self.cfg
    }

    /// One wrapped member string.
    pub fn sample(&mut self) -> Vec<Token> {
        let SamplerConfig {
            k,
            depth,
            min_len,
            max_len,
        } = self.cfg;
        let mut out = vec![Token::Start];
        let mut stack: Vec<u32> = Vec::new();
        let mut len = 0usize;
        loop {
            let d = stack.len();
            // A push must leave room to close everything.
            let can_push = d < depth as usize && len + 1 + (d + 1) <= max_len;
            if d == 0 {
                let can_end = len >= min_len.max(2);
                let push = match (can_push, can_end) {
                    (true, true) => !self.rng.gen_bool(end_probability(depth)),
                    (true, false) => true,
                    (false, _) => false,
                };
                if !push {
                    break;
                }
            } else if !(can_push && self.rng.gen_bool(PUSH_PROBABILITY)) {
                let top = stack.pop().expect("nonempty stack");
                out.push(Token::Close(top));
                len += 1;
                continue;
            }
            let ty = self.rng.gen_range(1..=k);
            stack.push(ty);
            out.push(Token::Open(ty));
            len += 1;
        }
        out.push(Token::End);
        out
    }

    /// Members until at least `num_tokens` tokens (markers included) are drawn.
    pub fn corpus(&mut self, num_tokens: usize) -> Vec<DyckInstance> {
        let mut total = 0;
        let mut out = Vec::new();
        while total < num_tokens {
            let tokens = self.sample();
            total += tokens.len();
            let verdict = OracleVerdict::accept();
            out.push(DyckInstance {
                depth_profile: depth_profile(&tokens),
                tokens,
                k: self.cfg.k,
                depth_bound: self.cfg.depth,
                verdict,
            });
        }
        out
    }
}

impl Iterator for Sampler {
    type Item = Vec<Token>;

    fn next(&mut self) -> Option<Vec<Token>> {
        Some(self.sample())
    }
}

/// Deterministic corpus of members with lengths in `[min_len, max_len]`.
pub fn sample_corpus(
    k: u32,
    depth: u32,
    length_range: (usize, usize),
    num_tokens: usize,
    seed: u64,
) -> Result<Vec<DyckInstance>> {
    let cfg = SamplerConfig::new(k, depth, length_range.0, length_range.1)?;
    Ok(Sampler::new(cfg, seed)?.corpus(num_tokens))
}

/// Replace one interior token by a different bracket. Returns `None` for an
/// empty interior.
pub fn mutate_one<R: Rng + ?Sized>(tokens: &[Token], k: u32, rng: &mut R) -> Option<Vec<Token>> {
    if tokens.len() < 3 {
        return None;
    }
    let pos = rng.gen_range(1..tokens.len() - 1);
    let choices: Vec<Token> = brackets(k)
        .into_iter()
        .filter(|t| *t != tokens[pos])
        .collect();
    let mut out = tokens.to_vec();
    out[pos] = choices[rng.gen_range(0..choices.len())];
    Some(out)
}

/// Every bracket sequence of length `1..=max_len` over `2k` symbols, each once.
pub fn enumerate_strings(k: u32, max_len: usize) -> impl Iterator<Item = Vec<Token>> {
    let alphabet = brackets(k);
    (1..=max_len).flat_map(move |len| {
        let alphabet = alphabet.clone();
        let base = alphabet.len();
        let mut digits = vec![0usize; len];
        let mut done = base == 0;
        std::iter::from_fn(move || {
            if done {
                return None;
            }
            let item = digits.iter().map(|&d| alphabet[d]).collect();
            // odometer increment, last digit fastest
            done = true;
            for d in digits.iter_mut().rev() {
                *d += 1;
                if *d < base {
                    done = false;
                    break;
                }
                *d = 0;
            }
            Some(item)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Token::{Close, End, Open, Start};

    #[test]
    fn token_ids_round_trip() {
        for t in [Start, End, Open(1), Close(1), Open(7), Close(7)] {
            assert_eq!(Token::from_id(t.id()), Some(t));
        }
        assert_eq!(Open(3).id(), 6);
        assert_eq!(Close(3).id(), 7);
    }

    #[test]
    fn depth_profile_examples() {
        assert_eq!(depth_profile(&[Open(1), Close(1)]), vec![1, 0]);
        assert_eq!(depth_profile(&[Open(1), Open(2), Close(2)]), vec![1, 2, 1]);
        assert_eq!(depth_profile(&[Close(1)]), vec![-1]);
        assert_eq!(depth_profile(&[Start, Open(1), End]), vec![0, 1, 1]);
    }

    #[test]
    fn oracle_examples() {
        let v = oracle_recognize(&wrap(&[Open(1), Open(2), Close(2), Close(1)]), 2, 2).unwrap();
        assert!(v.member);
        assert_eq!(v.first_violation, None);

        let v = oracle_recognize(&wrap(&[Open(1), Open(2), Close(1), Close(2)]), 2, 2).unwrap();
        assert!(!v.member);
        assert_eq!(v.violation_kind, Some(ViolationKind::TypeMismatch));
        assert_eq!(v.first_violation, Some(3));

        let v = oracle_recognize(&wrap(&[Open(1), Open(1), Open(1)]), 1, 2).unwrap();
        assert_eq!(v.violation_kind, Some(ViolationKind::DepthExceeded));
        assert_eq!(v.first_violation, Some(3));

        let v = oracle_recognize(&wrap(&[Close(1)]), 1, 2).unwrap();
        assert_eq!(v.violation_kind, Some(ViolationKind::Underflow));

        let v = oracle_recognize(&wrap(&[Open(1)]), 1, 2).unwrap();
        assert_eq!(v.violation_kind, Some(ViolationKind::Unclosed));
        assert_eq!(v.first_violation, Some(2));

        assert!(oracle_recognize(&wrap(&[]), 1, 1).unwrap().member);
    }

    #[test]
    fn oracle_rejects_bad_wrapping() {
        assert!(oracle_recognize(&[Open(1), Close(1)], 1, 1).is_err());
        assert!(oracle_recognize(&[Start, Open(1), Close(1)], 1, 1).is_err());
        assert!(oracle_recognize(&[Start, End, End], 1, 1).is_err());
        assert!(oracle_recognize(&wrap(&[Open(3), Close(3)]), 2, 1).is_err());
    }

    #[test]
    fn legal_next_examples() {
        let set = legal_next_tokens(&[Start], 2, 3, 100).unwrap();
        assert_eq!(set, [Open(1), Open(2), End].into_iter().collect());

        let set = legal_next_tokens(&[Start, Open(1), Open(2)], 2, 2, 100).unwrap();
        assert_eq!(set, [Close(2)].into_iter().collect());

        let set = legal_next_tokens(&[Start, Open(1)], 2, 5, 4).unwrap();
        assert_eq!(set, [Close(1)].into_iter().collect());

        assert!(legal_next_tokens(&[Start, Close(1)], 2, 2, 10).is_err());
        assert!(legal_next_tokens(&[Open(1)], 2, 2, 10).is_err());
        assert!(legal_next_tokens(&[Start, Open(1), Open(1)], 2, 2, 4).is_err());
    }

    #[test]
    fn enumerate_counts() {
        let all: Vec<_> = enumerate_strings(1, 2).collect();
        assert_eq!(all.len(), 6);
        assert_eq!(all.iter().filter(|s| s.len() == 1).count(), 2);
        let set: BTreeSet<_> = all.iter().cloned().collect();
        assert_eq!(set.len(), 6);

        let single: BTreeSet<_> = enumerate_strings(2, 1).collect();
        let expected: BTreeSet<_> = [Open(1), Open(2), Close(1), Close(2)]
            .into_iter()
            .map(|t| vec![t])
            .collect();
        assert_eq!(single, expected);

        let members = enumerate_strings(1, 4)
            .filter(|s| s.len() == 4)
            .filter(|s| oracle_recognize(&wrap(s), 1, 4).unwrap().member)
            .count();
        assert_eq!(members, 2);
    }

    #[test]
    fn sampler_is_deterministic_and_valid() {
        let a = sample_corpus(8, 10, (1, 700), 20_000, 7).unwrap();
        let b = sample_corpus(8, 10, (1, 700), 20_000, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().map(|i| i.tokens.len()).sum::<usize>() >= 20_000);
        for inst in &a {
            let n = inst.interior().len();
            assert!((2..=700).contains(&n));
            assert!(oracle_recognize(&inst.tokens, 8, 10).unwrap().member);
        }
    }

    #[test]
    fn sampler_unique_short_string() {
        for inst in sample_corpus(1, 1, (2, 2), 40, 3).unwrap() {
            assert_eq!(inst.tokens, wrap(&[Open(1), Close(1)]));
        }
    }

    #[test]
    fn sampler_rejects_infeasible_ranges() {
        assert!(SamplerConfig::new(2, 2, 0, 1).is_err());
        assert!(SamplerConfig::new(2, 2, 3, 3).is_err());
        assert!(SamplerConfig::new(0, 2, 2, 4).is_err());
        assert!(SamplerConfig::new(2, 2, 3, 4).is_ok());
    }

    #[test]
    fn mutation_changes_exactly_one_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = wrap(&[Open(1), Close(1), Open(2), Close(2)]);
        for _ in 0..50 {
            let m = mutate_one(&base, 2, &mut rng).unwrap();
            let diffs = base.iter().zip(&m).filter(|(a, b)| a != b).count();
            assert_eq!(diffs, 1);
            assert_eq!(m[0], Start);
            assert_eq!(*m.last().unwrap(), End);
        }
        assert!(mutate_one(&wrap(&[]), 2, &mut rng).is_none());
    }
}
