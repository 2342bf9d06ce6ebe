//! Two-layer soft-attention generator.
//!
//! Layer 1 counts depth. A uniform head over the prefix averages `2o - 1`
//! (with the start marker counted as an open) and a second uniform head
//! averages the start flag, giving `(d + 1) / i` and `1 / i`. The FFN turns
//! these into the unit vector `(cos θ(d), sin θ(d))` with a linear map, a
//! group layer norm, a ReLU and the residual, where
//! `θ(d) = atan(d / (D + 2 - d))`.
//!
//! Layer 2 finds the most recent open bracket at the current depth (the
//! start marker at depth 0) by scoring `20 D² ⟨d_i, d_j⟩ + p_j + 2 o_j`,
//! copies its type code, and decides whether another open bracket still
//! fits under both the depth bound and the length budget.
//!
//! The decoder gives every legal token the score `w` (the code width) and
//! every illegal token at most `w - 1`; the next-token distribution is
//! uniform over the legal set.

use std::collections::{BTreeMap, BTreeSet};

use crate::dyck::Token;
use crate::encoding::{code_bits, code_width, type_code, vocabulary};
use crate::error::{Error, Result};
use crate::gates::CircuitBuilder;
use crate::tensor::{
    AttentionHead, Decoder, FeedForward, FfnOp, Forward, ForwardOptions, Layer, Linear, Masking,
    Network, NormGroup, NumericConfig, PositionScale, PositionalEncoding, ReadoutRule, Selection,
};

/// Coordinates of `[t, o, p, s, d_cos, d_sin]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub code_width: usize,
}

impl Layout {
    pub fn for_k(k: u32) -> Self {
        Layout {
            code_width: code_width(k),
        }
    }

    pub fn o(&self) -> usize {
        self.code_width
    }

    pub fn p(&self) -> usize {
        self.code_width + 1
    }

    /// Start-marker flag.
    pub fn s(&self) -> usize {
        self.code_width + 2
    }

    pub fn dc(&self) -> usize {
        self.code_width + 3
    }

    pub fn ds(&self) -> usize {
        self.code_width + 4
    }

    pub fn width(&self) -> usize {
        self.code_width + 5
    }
}

pub fn theta(d: f64, depth: u32) -> f64 {
    d.atan2(depth as f64 + 2.0 - d)
}

/// `(cos θ(d), sin θ(d))` for `0 <= d <= D + 1`.
pub fn depth_vector(d: u32, depth: u32) -> Result<(f64, f64)> {
    if d > depth + 1 {
        return Err(Error::invalid(format!(
            "depth {d} outside 0..={}",
            depth + 1
        )));
    }
    let t = theta(d as f64, depth);
    Ok((t.cos(), t.sin()))
}

/// Smallest `1 - ⟨d_vec(a), d_vec(b)⟩` over `a != b` in `0..=D+1`.
pub fn depth_vector_gap(depth: u32) -> f64 {
    let vs: Vec<(f64, f64)> = (0..=depth + 1)
        .map(|d| depth_vector(d, depth).expect("in range"))
        .collect();
    let mut gap = f64::INFINITY;
    for (i, a) in vs.iter().enumerate() {
        for b in &vs[i + 1..] {
            gap = gap.min(1.0 - (a.0 * b.0 + a.1 * b.1));
        }
    }
    gap
}

/// Smallest step of `sin θ(x)` between consecutive integers in `-1..=D+1`.
fn sine_step(depth: u32) -> f64 {
    let lo = -1;
    let hi = depth as i64 + 1;
    (lo..hi)
        .map(|x| theta((x + 1) as f64, depth).sin() - theta(x as f64, depth).sin())
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MatchSelection {
    Hard,
    /// Softmax with every score multiplied by `temperature`.
    Soft {
        temperature: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorOptions {
    pub matching: MatchSelection,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions {
            matching: MatchSelection::Hard,
        }
    }
}

fn embedding(k: u32, layout: Layout) -> Vec<Vec<f64>> {
    vocabulary(k)
        .into_iter()
        .map(|t| {
            let mut x = code_bits(type_code(t, k), layout.code_width);
            x.push((t.is_open() || t == Token::Start) as u8 as f64);
            x.push(0.0);
            x.push((t == Token::Start) as u8 as f64);
            x.push(0.0);
            x.push(0.0);
            x
        })
        .collect()
}

fn uniform_head(name: &str, width: usize, value: Linear) -> AttentionHead {
    AttentionHead {
        name: name.into(),
        query: Linear::constant(width, &[1.0]),
        key: Linear::constant(width, &[1.0]),
        value,
        masking: Masking::Future { strict: false },
        selection: Selection::Soft,
        temperature: 1.0,
    }
}

fn depth_layer(layout: Layout, depth: u32) -> Layer {
    let width = layout.width();
    let mut count = Linear::zeros(1, width);
    count.set(0, layout.o(), 2.0);
    count.set_bias(0, -1.0);
    let heads = vec![
        AttentionHead::identity("self", Linear::identity(width)),
        uniform_head("depth", width, count),
        uniform_head("start", width, Linear::select(width, &[layout.s()])),
    ];

    // a = [x, A, B] with A = (d + 1) / i and B = 1 / i
    let (a_slot, b_slot) = (width, width + 1);
    let d2 = depth as f64 + 2.0;
    let mut spread = Linear::zeros(width + 2, width + 2);
    // u = A - B = d / i, v = (D + 2) B - u = (D + 2 - d) / i
    for (row, sign) in [(layout.dc(), 1.0), (a_slot, -1.0)] {
        spread.set(row, a_slot, -sign);
        spread.set(row, b_slot, sign * (d2 + 1.0));
    }
    for (row, sign) in [(layout.ds(), 1.0), (b_slot, -1.0)] {
        spread.set(row, a_slot, sign);
        spread.set(row, b_slot, -sign);
    }
    let norm = NormGroup::uniform(
        vec![layout.dc(), layout.ds(), a_slot, b_slot],
        std::f64::consts::FRAC_1_SQRT_2,
    );
    let keep: Vec<usize> = (0..width).collect();
    Layer {
        heads,
        ffn: FeedForward {
            ops: vec![
                FfnOp::Affine {
                    linear: spread,
                    relu: false,
                },
                FfnOp::LayerNorm { groups: vec![norm] },
                FfnOp::Relu,
                FfnOp::Residual,
                FfnOp::Affine {
                    linear: Linear::select(width + 2, &keep),
                    relu: false,
                },
            ],
        },
    }
}

fn match_layer(
    layout: Layout,
    depth: u32,
    n_max: usize,
    matching: MatchSelection,
) -> Result<Layer> {
    let width = layout.width();
    let w = layout.code_width;
    let scale = 20.0 * (depth as f64).powi(2);
    let mut query = Linear::zeros(4, width);
    query.set(0, layout.dc(), scale);
    query.set(1, layout.ds(), scale);
    query.set_bias(2, 1.0);
    query.set_bias(3, 2.0);
    let key = Linear::select(width, &[layout.dc(), layout.ds(), layout.p(), layout.o()]);
    let (selection, temperature) = match matching {
        MatchSelection::Hard => (Selection::Hard, 1.0),
        MatchSelection::Soft { temperature } => (Selection::Soft, temperature),
    };
    let heads = vec![
        AttentionHead::identity("self", Linear::identity(width)),
        AttentionHead {
            name: "match".into(),
            query,
            key,
            value: Linear::select(width, &(0..w).collect::<Vec<_>>()),
            masking: Masking::Future { strict: false },
            selection,
            temperature,
        },
    ];

    // a = [x_i, t_j]; X = n - 3 - i is the largest depth an open bracket
    // may reach from here and still be closed in time
    let n = n_max as f64;
    let d = depth as f64;
    let in_width = width + w;
    let mut gather = Linear::zeros(w + 3, in_width);
    for b in 0..w {
        gather.set(b, width + b, 1.0);
    }
    gather.set(w, layout.ds(), 1.0);
    gather.set(w + 1, layout.p(), -n);
    gather.set_bias(w + 1, n - 2.0);
    gather.set(w + 2, layout.p(), -n);
    gather.set_bias(w + 2, n - 2.0 - d);

    // X' = clamp(X, -1, D - 1) = r1 - 1 - r2, laid out as (X', D+2-X', -X', -(D+2-X'))
    let mut budget = Linear::zeros(w + 5, w + 3);
    for b in 0..=w {
        budget.set(b, b, 1.0);
    }
    for (row, sign, offset) in [
        (w + 1, 1.0, 0.0),
        (w + 2, -1.0, d + 2.0),
        (w + 3, -1.0, 0.0),
        (w + 4, 1.0, -(d + 2.0)),
    ] {
        budget.set(row, w + 1, sign);
        budget.set(row, w + 2, -sign);
        budget.set_bias(row, -sign + offset);
    }
    let norm = NormGroup::uniform((w + 1..w + 5).collect(), std::f64::consts::FRAC_1_SQRT_2);

    // open is legal iff sin θ(d) <= sin θ(X')
    let step = sine_step(depth);
    let mut b = CircuitBuilder::new();
    let z = b.inputs(w, false);
    let ds = b.input(false);
    let sin_x = b.input(true);
    let _rest = b.inputs(3, true);
    let open_ok = b.greater_than_expr(&[(sin_x, 1.0), (ds, -1.0)], 0.75 * step, 0.5 * step);
    b.output(open_ok);
    for &bit in &z {
        b.output(bit);
    }

    let mut ops = vec![
        FfnOp::Affine {
            linear: gather,
            relu: true,
        },
        FfnOp::Affine {
            linear: budget,
            relu: false,
        },
        FfnOp::LayerNorm { groups: vec![norm] },
    ];
    ops.extend(
        b.compile()?
            .into_iter()
            .map(|linear| FfnOp::Affine { linear, relu: true }),
    );
    Ok(Layer {
        heads,
        ffn: FeedForward { ops },
    })
}

/// Rows: `Open(1..=k)`, `Close(1..=k)`, `End`.
fn decoder(k: u32, layout: Layout) -> Decoder {
    let w = layout.code_width;
    let rows = 2 * k as usize + 1;
    let mut lin = Linear::zeros(rows, w + 1);
    let mut labels = Vec::with_capacity(rows);
    for i in 1..=k {
        let r = labels.len();
        lin.set(r, 0, w as f64);
        labels.push(Token::Open(i).id());
    }
    let mut agree = |r: usize, code: u32| {
        let bits = code_bits(code, w);
        for (b, &bit) in bits.iter().enumerate() {
            lin.set(r, 1 + b, 2.0 * bit - 1.0);
        }
        lin.set_bias(r, bits.iter().map(|b| 1.0 - b).sum());
    };
    for i in 1..=k {
        agree(labels.len(), type_code(Token::Close(i), k));
        labels.push(Token::Close(i).id());
    }
    agree(labels.len(), type_code(Token::Start, k));
    labels.push(Token::End.id());
    Decoder {
        linear: lin,
        readout: ReadoutRule::ArgmaxUniform {
            legal_score: w as f64,
            tolerance: 0.5,
        },
        labels,
    }
}

pub fn build_generator(k: u32, depth: u32, n_max: usize) -> Result<Network> {
    build_generator_with(k, depth, n_max, GeneratorOptions::default())
}

pub fn build_generator_with(
    k: u32,
    depth: u32,
    n_max: usize,
    opts: GeneratorOptions,
) -> Result<Network> {
    if k == 0 || depth == 0 {
        return Err(Error::invalid("k and D must be at least 1"));
    }
    if n_max < 2 {
        return Err(Error::invalid("n_max must be at least 2"));
    }
    let layout = Layout::for_k(k);
    let net = Network {
        name: format!("generator k={k} D={depth} n={n_max}"),
        vocab_size: 2 * k as usize + 2,
        embedding: embedding(k, layout),
        positional: PositionalEncoding {
            coord: layout.p(),
            scale: PositionScale::Fixed(n_max),
        },
        n_max,
        layers: vec![
            depth_layer(layout, depth),
            match_layer(layout, depth, n_max, opts.matching)?,
        ],
        decoder: decoder(k, layout),
    };
    net.validate()?;
    Ok(net)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NextTokenReadout {
    /// Decoder score per candidate token.
    pub scores: Vec<(Token, f64)>,
    pub legal_set: BTreeSet<Token>,
    /// Probability per candidate token, in the order of `scores`.
    pub distribution: Vec<(Token, f64)>,
    /// Position picked by the matching head (hard mode).
    pub attended: Option<usize>,
}

impl NextTokenReadout {
    fn from_scores(net: &Network, row: &[f64], attended: Option<usize>) -> Result<Self> {
        let (legal_score, tolerance) = match net.decoder.readout {
            ReadoutRule::ArgmaxUniform {
                legal_score,
                tolerance,
            } => (legal_score, tolerance),
            ReadoutRule::Threshold { .. } => {
                return Err(Error::MalformedNetwork("not a generator".into()))
            }
        };
        let scores: Vec<(Token, f64)> = net
            .decoder
            .labels
            .iter()
            .zip(row)
            .map(|(&id, &s)| (Token::from_id(id).expect("label is a token"), s))
            .collect();
        let legal_set: BTreeSet<Token> = scores
            .iter()
            .filter(|(_, s)| *s >= legal_score - tolerance)
            .map(|&(t, _)| t)
            .collect();
        let support: BTreeSet<Token> = if legal_set.is_empty() {
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            scores
                .iter()
                .filter(|(_, s)| *s == best)
                .map(|&(t, _)| t)
                .collect()
        } else {
            legal_set.clone()
        };
        let mass = 1.0 / support.len() as f64;
        let distribution = scores
            .iter()
            .map(|&(t, _)| (t, if support.contains(&t) { mass } else { 0.0 }))
            .collect();
        Ok(NextTokenReadout {
            scores,
            legal_set,
            distribution,
            attended,
        })
    }

    pub fn probability(&self, token: Token) -> f64 {
        self.distribution
            .iter()
            .find(|(t, _)| *t == token)
            .map_or(0.0, |&(_, p)| p)
    }
}

fn ids(tokens: &[Token]) -> Vec<usize> {
    tokens.iter().map(|t| t.id()).collect()
}

fn match_selections(out: &Forward) -> Vec<Option<usize>> {
    out.attention
        .last()
        .map(|records| {
            records
                .iter()
                .map(|r| r.selected.get(1).copied().flatten())
                .collect()
        })
        .unwrap_or_default()
}

/// Readout after the whole prefix.
pub fn next_token(
    net: &Network,
    prefix: &[Token],
    cfg: &NumericConfig,
) -> Result<NextTokenReadout> {
    let out = net.forward(
        &ids(prefix),
        cfg,
        ForwardOptions {
            last_only: true,
            keep_trace: true,
        },
    )?;
    let attended = match_selections(&out).last().copied().flatten();
    NextTokenReadout::from_scores(net, out.last_readout(), attended)
}

/// Readouts after every prefix `tokens[..=i]`, from one pass. The network
/// only looks backwards and positions are scaled by the fixed `n_max`, so
/// these equal the per-prefix readouts.
pub fn prefix_readouts(
    net: &Network,
    tokens: &[Token],
    cfg: &NumericConfig,
) -> Result<Vec<NextTokenReadout>> {
    let out = net.forward(
        &ids(tokens),
        cfg,
        ForwardOptions {
            last_only: false,
            keep_trace: true,
        },
    )?;
    let attended = match_selections(&out);
    out.readout
        .iter()
        .zip(attended)
        .map(|(row, a)| NextTokenReadout::from_scores(net, row, a))
        .collect()
}

/// Source of next-token distributions over a string's prefixes.
pub trait LanguageModel {
    /// `result[i]` is the distribution after `tokens[..=i]`.
    fn distributions(&self, tokens: &[Token]) -> Result<Vec<Vec<(Token, f64)>>>;
}

pub struct NetworkModel<'a> {
    pub net: &'a Network,
    pub cfg: NumericConfig,
}

impl LanguageModel for NetworkModel<'_> {
    fn distributions(&self, tokens: &[Token]) -> Result<Vec<Vec<(Token, f64)>>> {
        Ok(prefix_readouts(self.net, tokens, &self.cfg)?
            .into_iter()
            .map(|r| r.distribution)
            .collect())
    }
}

/// Uniform over every bracket and the end marker, whatever the prefix.
pub struct UniformBaseline {
    pub k: u32,
}

impl LanguageModel for UniformBaseline {
    fn distributions(&self, tokens: &[Token]) -> Result<Vec<Vec<(Token, f64)>>> {
        let mut support: Vec<Token> = crate::dyck::brackets(self.k);
        support.push(Token::End);
        let p = 1.0 / support.len() as f64;
        let row: Vec<(Token, f64)> = support.into_iter().map(|t| (t, p)).collect();
        Ok(vec![row; tokens.len()])
    }
}

/// Per-step probability of each token after the first, or `None` for the
/// first step when the string does not begin with the start marker.
fn step_probabilities(model: &dyn LanguageModel, tokens: &[Token]) -> Result<Option<Vec<f64>>> {
    if tokens.first() != Some(&Token::Start) {
        return Ok(None);
    }
    let dists = model.distributions(&tokens[..tokens.len() - 1])?;
    Ok(Some(
        dists
            .iter()
            .zip(&tokens[1..])
            .map(|(d, t)| d.iter().find(|(u, _)| u == t).map_or(0.0, |&(_, p)| p))
            .collect(),
    ))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationCheck {
    pub members: usize,
    pub non_members: usize,
    /// Members with some step below epsilon.
    pub member_failures: Vec<usize>,
    /// Non-members with every step at or above epsilon.
    pub non_member_failures: Vec<usize>,
}

impl GenerationCheck {
    pub fn holds(&self) -> bool {
        self.member_failures.is_empty() && self.non_member_failures.is_empty()
    }
}

pub fn default_epsilon(k: u32) -> f64 {
    1.0 / (2.0 * k as f64 + 2.0)
}

/// Checks that members are produced with every step at probability at
/// least `epsilon` and non-members are not.
pub fn check_generation(
    model: &dyn LanguageModel,
    k: u32,
    depth: u32,
    strings: &[Vec<Token>],
    epsilon: f64,
) -> Result<GenerationCheck> {
    let mut check = GenerationCheck::default();
    for (idx, s) in strings.iter().enumerate() {
        let member = crate::dyck::oracle_recognize(s, k, depth)
            .map(|v| v.member)
            .unwrap_or(false);
        let all_above = match step_probabilities(model, s)? {
            Some(steps) => steps.iter().all(|&p| p >= epsilon),
            None => false,
        };
        if member {
            check.members += 1;
            if !all_above {
                check.member_failures.push(idx);
            }
        } else {
            check.non_members += 1;
            if all_above {
                check.non_member_failures.push(idx);
            }
        }
    }
    Ok(check)
}

/// Whether the network produces `tokens` with every step at probability at
/// least `epsilon`.
pub fn produces(
    net: &Network,
    tokens: &[Token],
    cfg: &NumericConfig,
    epsilon: f64,
) -> Result<bool> {
    let model = NetworkModel { net, cfg: *cfg };
    Ok(
        step_probabilities(&model, tokens)?
            .is_some_and(|steps| steps.iter().all(|&p| p >= epsilon)),
    )
}

pub fn generates(
    net: &Network,
    k: u32,
    depth: u32,
    strings: &[Vec<Token>],
    cfg: &NumericConfig,
) -> Result<bool> {
    let model = NetworkModel { net, cfg: *cfg };
    Ok(check_generation(&model, k, depth, strings, default_epsilon(k))?.holds())
}

/// Probability a close bracket must get, renormalized over close brackets,
/// to count as confidently correct.
pub const CONFIDENCE: f64 = 0.8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Bucket {
    pub count: usize,
    pub correct: usize,
}

impl Bucket {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CloseBracketReport {
    /// Keyed by the distance from the open bracket to its close.
    pub buckets: BTreeMap<usize, Bucket>,
    /// Bucket accuracies averaged with bucket counts as weights.
    pub expectation: f64,
}

pub fn close_bracket_accuracy(
    model: &dyn LanguageModel,
    corpus: &[Vec<Token>],
) -> Result<CloseBracketReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let mut buckets: BTreeMap<usize, Bucket> = BTreeMap::new();
    for s in corpus {
        let dists = model.distributions(s)?;
        let mut stack = Vec::new();
        for (pos, &t) in s.iter().enumerate() {
            match t {
                Token::Open(_) => stack.push(pos),
                Token::Close(_) => {
                    let open = stack
                        .pop()
                        .ok_or_else(|| Error::invalid("corpus string is not well nested"))?;
                    let dist = &dists[pos - 1];
                    let close_mass: f64 = dist
                        .iter()
                        .filter(|(u, _)| u.is_close())
                        .map(|&(_, p)| p)
                        .sum();
                    let mine = dist.iter().find(|(u, _)| *u == t).map_or(0.0, |&(_, p)| p);
                    let confident = close_mass > 0.0 && mine / close_mass > CONFIDENCE;
                    let b = buckets.entry(pos - open).or_default();
                    b.count += 1;
                    b.correct += confident as usize;
                }
                _ => {}
            }
        }
    }
    let total: usize = buckets.values().map(|b| b.count).sum();
    if total == 0 {
        return Err(Error::invalid("corpus has no close brackets"));
    }
    let expectation = buckets
        .values()
        .map(|b| b.count as f64 * b.accuracy())
        .sum::<f64>()
        / total as f64;
    Ok(CloseBracketReport {
        buckets,
        expectation,
    })
}
