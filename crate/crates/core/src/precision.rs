//! Running the constructions in low-precision fixed point.
//!
//! [`run_sweep`] measures accuracy over a grid of fractional bit widths and
//! input lengths. [`find_adversarial_pair`] looks for a member and a
//! non-member whose quantized forward passes are identical at the readout
//! position, which happens once `2^f < n` makes position encodings collide.
//! This demonstrates the failure mode behind the precision lower bound; it
//! is not a proof of it.
//!
//! Quantization applies to every stored scalar and every attention score.
//! Dot products accumulate in `f64` and are rounded once.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dyck::{mutate_one, oracle_recognize, Sampler, SamplerConfig, Token};
use crate::error::{Error, Result};
use crate::generator::{build_generator, default_epsilon, produces};
use crate::recognizer::{build_recognizer, recognize};
use crate::tensor::{quantize, ForwardOptions, Network, NumericConfig};

/// Soft attention weights are rounded to multiples of `1/(C n)`.
pub const DEFAULT_ROUNDING: u32 = 4;

pub const MIN_TRIALS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Construction {
    Recognizer,
    Generator,
}

impl Construction {
    pub fn build(self, k: u32, depth: u32, n_max: usize) -> Result<Network> {
        match self {
            Construction::Recognizer => build_recognizer(k, depth, n_max),
            Construction::Generator => build_generator(k, depth, n_max),
        }
    }

    /// Recognizer verdict, or for the generator whether every step of the
    /// string stays at or above the default epsilon.
    pub fn accepts(
        self,
        net: &Network,
        k: u32,
        tokens: &[Token],
        cfg: &NumericConfig,
    ) -> Result<bool> {
        match self {
            Construction::Recognizer => recognize(net, tokens, cfg),
            Construction::Generator => produces(net, tokens, cfg, default_epsilon(k)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureExample {
    pub id: String,
    pub p: u32,
    pub n: usize,
    pub trial: usize,
    pub tokens: Vec<usize>,
    pub oracle_member: bool,
    pub network_accepts: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub p: u32,
    pub n: usize,
    pub trials: usize,
    pub correct: usize,
    pub first_failure: Option<FailureExample>,
}

impl SweepCell {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.trials as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionSweep {
    /// Fractional bits.
    pub p_values: Vec<u32>,
    /// Total string lengths, markers included.
    pub n_values: Vec<usize>,
    pub trials_per_cell: usize,
    pub rounding: u32,
    /// Row-major over `p_values` then `n_values` once filled.
    pub results: Vec<SweepCell>,
}

impl PrecisionSweep {
    pub fn new(p_values: Vec<u32>, n_values: Vec<usize>, trials_per_cell: usize) -> Self {
        PrecisionSweep {
            p_values,
            n_values,
            trials_per_cell,
            rounding: DEFAULT_ROUNDING,
            results: Vec::new(),
        }
    }

    pub fn cell(&self, p: u32, n: usize) -> Option<&SweepCell> {
        self.results.iter().find(|c| c.p == p && c.n == n)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            p: u32,
            n: usize,
            trials: usize,
            accuracy: f64,
            failure_example_id: &'a str,
        }
        let mut w = csv::Writer::from_writer(out);
        for c in &self.results {
            w.serialize(Row {
                p: c.p,
                n: c.n,
                trials: c.trials,
                accuracy: c.accuracy(),
                failure_example_id: c.first_failure.as_ref().map_or("", |f| f.id.as_str()),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_failures_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for f in self.results.iter().filter_map(|c| c.first_failure.as_ref()) {
            serde_json::to_writer(&mut out, f)?;
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn cell_rng(seed: u64, p: u32, n: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((p as u64) << 32) | n as u64);
    rng
}

/// Members have interior length `n - 2`, rounded down to even.
fn length_sampler<R: Rng>(k: u32, depth: u32, n: usize, rng: &mut R) -> Result<Sampler> {
    if n < 4 {
        return Err(Error::invalid(format!(
            "length {n} leaves no room for a bracket pair"
        )));
    }
    let interior = (n - 2) & !1;
    Sampler::new(SamplerConfig::new(k, depth, interior, interior)?, rng.gen())
}

/// `count` strings of length `n` paired with oracle membership: members at
/// even indices, single-token mutations of members at odd ones.
pub fn balanced_strings<R: Rng>(
    k: u32,
    depth: u32,
    n: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<(Vec<Token>, bool)>> {
    let mut sampler = length_sampler(k, depth, n, rng)?;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let s = sampler.sample();
        if out.len() % 2 == 0 {
            out.push((s, true));
        } else if let Some(m) = mutate_one(&s, k, rng) {
            if !oracle_recognize(&m, k, depth)?.member {
                out.push((m, false));
            }
        }
    }
    Ok(out)
}

pub fn run_sweep(
    construction: Construction,
    k: u32,
    depth: u32,
    mut sweep: PrecisionSweep,
    seed: u64,
) -> Result<PrecisionSweep> {
    if sweep.trials_per_cell < MIN_TRIALS {
        return Err(Error::invalid(format!(
            "at least {MIN_TRIALS} trials per cell are needed, got {}",
            sweep.trials_per_cell
        )));
    }
    let mut nets: BTreeMap<usize, Network> = BTreeMap::new();
    sweep.results.clear();
    for &p in &sweep.p_values {
        let cfg = NumericConfig::fixed(p).with_rounding(sweep.rounding);
        for &n in &sweep.n_values {
            let net = match nets.entry(n) {
                Entry::Occupied(e) => e.into_mut(),
                Entry::Vacant(e) => e.insert(construction.build(k, depth, n)?),
            };
            let strings = balanced_strings(
                k,
                depth,
                n,
                sweep.trials_per_cell,
                &mut cell_rng(seed, p, n),
            )?;
            let mut cell = SweepCell {
                p,
                n,
                trials: sweep.trials_per_cell,
                correct: 0,
                first_failure: None,
            };
            for (trial, (s, member)) in strings.into_iter().enumerate() {
                let accepts = construction.accepts(net, k, &s, &cfg)?;
                if accepts == member {
                    cell.correct += 1;
                } else if cell.first_failure.is_none() {
                    cell.first_failure = Some(FailureExample {
                        id: format!("p{p}-n{n}-t{trial}"),
                        p,
                        n,
                        trial,
                        tokens: s.iter().map(|t| t.id()).collect(),
                        oracle_member: member,
                        network_accepts: accepts,
                    });
                }
            }
            sweep.results.push(cell);
        }
    }
    Ok(sweep)
}

/// Bit patterns of everything computed at the last position: the state
/// entering each layer, each layer's attention output and the readout.
pub fn readout_trace(net: &Network, tokens: &[Token], cfg: &NumericConfig) -> Result<Vec<u64>> {
    let ids: Vec<usize> = tokens.iter().map(|t| t.id()).collect();
    let out = net.forward(
        &ids,
        cfg,
        ForwardOptions {
            last_only: true,
            keep_trace: true,
        },
    )?;
    let mut bits = Vec::new();
    let mut push = |v: &[f64]| {
        bits.push(v.len() as u64);
        bits.extend(v.iter().map(|x| x.to_bits()));
    };
    for (l, states) in out.states.iter().enumerate() {
        push(states.last().expect("nonempty"));
        if let Some(rec) = out.attention.get(l).and_then(|a| a.last()) {
            push(&rec.output);
        }
    }
    push(out.last_readout());
    Ok(bits)
}

/// Groups of positions whose quantized encodings coincide, singletons left out.
pub fn colliding_positions(net: &Network, n: usize, cfg: &NumericConfig) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let q = quantize(net.positional.value(i, n), cfg).value;
        groups.entry(q.to_bits()).or_default().push(i);
    }
    groups.into_values().filter(|g| g.len() > 1).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialPair {
    pub member: Vec<Token>,
    pub non_member: Vec<Token>,
    /// Positions where the two strings differ.
    pub edited: Vec<usize>,
    /// The common verdict of the quantized network.
    pub verdict: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AdversarialSearch {
    Found(AdversarialPair),
    NotFound {
        strings_tried: usize,
        candidates_tried: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchBudget {
    /// Member strings to start from.
    pub strings: usize,
    pub seed: u64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            strings: 200,
            seed: 0,
        }
    }
}

pub fn find_adversarial_pair(
    frac_bits: u32,
    k: u32,
    depth: u32,
    n: usize,
) -> Result<AdversarialSearch> {
    find_adversarial_pair_with(frac_bits, k, depth, n, SearchBudget::default())
}

/// Edits members inside groups of colliding positions, by swapping two
/// tokens or substituting one, and keeps the first edit that the oracle
/// rejects but whose recognizer trace at the readout position is
/// bit-identical to the member's.
pub fn find_adversarial_pair_with(
    frac_bits: u32,
    k: u32,
    depth: u32,
    n: usize,
    budget: SearchBudget,
) -> Result<AdversarialSearch> {
    let net = build_recognizer(k, depth, n)?;
    let cfg = NumericConfig::fixed(frac_bits);
    let groups: Vec<Vec<usize>> = colliding_positions(&net, n, &cfg)
        .into_iter()
        .map(|g| {
            g.into_iter()
                .filter(|&i| i > 0 && i < n - 1)
                .collect::<Vec<_>>()
        })
        .filter(|g| g.len() > 1)
        .collect();
    if groups.is_empty() {
        return Ok(AdversarialSearch::NotFound {
            strings_tried: 0,
            candidates_tried: 0,
        });
    }
    let alphabet = crate::dyck::brackets(k);
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut sampler = length_sampler(k, depth, n, &mut rng)?;
    let mut candidates_tried = 0;
    for _ in 0..budget.strings {
        let member = sampler.sample();
        if member.len() != n {
            continue;
        }
        let reference = readout_trace(&net, &member, &cfg)?;
        for g in &groups {
            let mut edits: Vec<(Vec<Token>, Vec<usize>)> = Vec::new();
            for (a, &i) in g.iter().enumerate() {
                for &j in &g[a + 1..] {
                    if member[i] != member[j] {
                        let mut s = member.clone();
                        s.swap(i, j);
                        edits.push((s, vec![i, j]));
                    }
                }
                for &t in &alphabet {
                    if t != member[i] {
                        let mut s = member.clone();
                        s[i] = t;
                        edits.push((s, vec![i]));
                    }
                }
            }
            for (s, edited) in edits {
                if oracle_recognize(&s, k, depth)?.member {
                    continue;
                }
                candidates_tried += 1;
                if readout_trace(&net, &s, &cfg)? == reference {
                    let verdict = recognize(&net, &s, &cfg)?;
                    return Ok(AdversarialSearch::Found(AdversarialPair {
                        member,
                        non_member: s,
                        edited,
                        verdict,
                    }));
                }
            }
        }
    }
    Ok(AdversarialSearch::NotFound {
        strings_tried: budget.strings,
        candidates_tried,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adversarial_pair_at_four_bits() {
        let found = match find_adversarial_pair(4, 1, 2, 64).unwrap() {
            AdversarialSearch::Found(pair) => pair,
            other => panic!("{other:?}"),
        };
        assert!(oracle_recognize(&found.member, 1, 2).unwrap().member);
        assert!(!oracle_recognize(&found.non_member, 1, 2).unwrap().member);
        let net = build_recognizer(1, 2, 64).unwrap();
        let cfg = NumericConfig::fixed(4);
        assert_eq!(
            readout_trace(&net, &found.member, &cfg).unwrap(),
            readout_trace(&net, &found.non_member, &cfg).unwrap()
        );
        assert_eq!(recognize(&net, &found.member, &cfg).unwrap(), found.verdict);
        assert_eq!(
            recognize(&net, &found.non_member, &cfg).unwrap(),
            found.verdict
        );
    }

    #[test]
    fn no_pair_without_collisions() {
        let net = build_recognizer(1, 2, 64).unwrap();
        assert!(colliding_positions(&net, 64, &NumericConfig::fixed(8)).is_empty());
        // (i + 1) / 4 rounded to an integer takes the values 0..=16, each at least twice
        assert_eq!(
            colliding_positions(&net, 64, &NumericConfig::fixed(4)).len(),
            17
        );
        assert!(matches!(
            find_adversarial_pair(8, 1, 2, 64).unwrap(),
            AdversarialSearch::NotFound {
                candidates_tried: 0,
                ..
            }
        ));
    }

    #[test]
    fn sweep_shape_and_determinism() {
        let sweep = PrecisionSweep::new(vec![4, 12], vec![32, 64], 100);
        let a = run_sweep(Construction::Recognizer, 2, 2, sweep.clone(), 7).unwrap();
        let b = run_sweep(Construction::Recognizer, 2, 2, sweep, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.results.len(), 4);
        for c in &a.results {
            assert!((0.0..=1.0).contains(&c.accuracy()));
            if let Some(f) = &c.first_failure {
                let tokens: Vec<Token> = f
                    .tokens
                    .iter()
                    .map(|&i| Token::from_id(i).unwrap())
                    .collect();
                assert_eq!(
                    oracle_recognize(&tokens, 2, 2).unwrap().member,
                    f.oracle_member
                );
                assert_ne!(f.oracle_member, f.network_accepts);
            }
        }
        assert_eq!(a.cell(12, 64).unwrap().accuracy(), 1.0);
        assert_eq!(a.cell(12, 32).unwrap().accuracy(), 1.0);
    }

    #[test]
    fn generator_sweep_at_high_precision() {
        let sweep = PrecisionSweep::new(vec![20], vec![40], 100);
        let s = run_sweep(Construction::Generator, 2, 3, sweep, 1).unwrap();
        assert_eq!(s.results[0].accuracy(), 1.0);
    }

    #[test]
    fn too_few_trials() {
        let sweep = PrecisionSweep::new(vec![8], vec![32], 10);
        assert!(run_sweep(Construction::Recognizer, 1, 2, sweep, 0).is_err());
    }

    #[test]
    fn csv_and_jsonl() {
        let sweep = PrecisionSweep {
            p_values: vec![3],
            n_values: vec![8],
            trials_per_cell: 2,
            rounding: DEFAULT_ROUNDING,
            results: vec![SweepCell {
                p: 3,
                n: 8,
                trials: 2,
                correct: 1,
                first_failure: Some(FailureExample {
                    id: "p3-n8-t1".into(),
                    p: 3,
                    n: 8,
                    trial: 1,
                    tokens: vec![0, 2, 3, 1],
                    oracle_member: true,
                    network_accepts: false,
                }),
            }],
        };
        let mut csv_out = Vec::new();
        sweep.write_csv(&mut csv_out).unwrap();
        assert_eq!(
            String::from_utf8(csv_out).unwrap(),
            "p,n,trials,accuracy,failure_example_id\n3,8,2,0.5,p3-n8-t1\n"
        );
        let mut jsonl = Vec::new();
        sweep.write_failures_jsonl(&mut jsonl).unwrap();
        let line = String::from_utf8(jsonl).unwrap();
        let back: FailureExample = serde_json::from_str(line.trim_end()).unwrap();
        assert_eq!(back.id, "p3-n8-t1");
    }
}
