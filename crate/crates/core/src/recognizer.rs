//! Hard-attention recognizer with `D + 1` layers.
//!
//! Each position carries `[t, o, p, m, e]`: type code bits, an open flag, the
//! position `i / n`, a matched bit and an error bit. Every matching layer
//! looks at the nearest unmatched token on each side and marks a position
//! matched when it and that neighbour form a pair of the same type, or
//! erroneous when the neighbour cannot be its partner. Pairs nested `h`
//! deep inside are matched by layer `h`. The last layer checks that every
//! position is matched and none is erroneous.
//!
//! The start and end markers enter already matched, so they never pair with
//! anything and never raise errors.

use crate::dyck::Token;
use crate::encoding::{code_bits, code_width, decode_bits, type_code, vocabulary};
use crate::error::{Error, Result};
use crate::gates::CircuitBuilder;
use crate::tensor::{
    AttentionHead, Decoder, FeedForward, ForwardOptions, Layer, Linear, Masking, Network,
    NumericConfig, PositionScale, PositionalEncoding, ReadoutRule, Selection,
};

/// Coordinates of the per-position state.
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

    pub fn m(&self) -> usize {
        self.code_width + 2
    }

    pub fn e(&self) -> usize {
        self.code_width + 3
    }

    pub fn width(&self) -> usize {
        self.code_width + 4
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecognizerState {
    pub code: u32,
    pub open: bool,
    pub position: f64,
    pub matched: bool,
    pub error: bool,
}

impl RecognizerState {
    fn decode(x: &[f64], layout: Layout) -> Self {
        RecognizerState {
            code: decode_bits(&x[..layout.code_width]),
            open: x[layout.o()] > 0.5,
            position: x[layout.p()],
            matched: x[layout.m()] > 0.5,
            error: x[layout.e()] > 0.5,
        }
    }
}

fn check_params(k: u32, depth: u32, n_max: usize) -> Result<()> {
    if k == 0 || depth == 0 {
        return Err(Error::invalid("k and D must be at least 1"));
    }
    if n_max < 2 {
        return Err(Error::invalid("n_max must be at least 2"));
    }
    Ok(())
}

fn embedding(k: u32, layout: Layout) -> Vec<Vec<f64>> {
    vocabulary(k)
        .into_iter()
        .map(|t| {
            let mut x = code_bits(type_code(t, k), layout.code_width);
            x.push((t.is_open() || t == Token::Start) as u8 as f64);
            x.push(0.0);
            x.push(if t.is_bracket() { 0.0 } else { 1.0 });
            x.push(0.0);
            x
        })
        .collect()
}

/// FFN of a matching layer, reading `[x_i, x_left, x_right]`.
fn matching_ffn(layout: Layout) -> Result<FeedForward> {
    let width = layout.width();
    let w = layout.code_width;
    let mut b = CircuitBuilder::new();
    let me = b.inputs(width, false);
    let left = b.inputs(width, false);
    let right = b.inputs(width, false);

    let (o, m, e) = (me[layout.o()], me[layout.m()], me[layout.e()]);
    let (o1, m1) = (left[layout.o()], left[layout.m()]);
    let (o2, m2) = (right[layout.o()], right[layout.m()]);

    let s1 = b.same_lits(&me[..w], &left[..w]);
    let s2 = b.same_lits(&me[..w], &right[..w]);

    // open bracket looking right for its close
    let match_r = b.and_lits(&[m.neg(), o.pos(), o2.neg(), m2.neg(), s2.pos()]);
    let err_r1 = b.and_lits(&[m.neg(), o.pos(), m2.pos()]);
    let err_r2 = b.and_lits(&[m.neg(), o.pos(), o2.neg(), s2.neg()]);

    // close bracket looking left for its open
    let match_l = b.and_lits(&[m.neg(), o.neg(), o1.pos(), m1.neg(), s1.pos()]);
    let err_l1 = b.and_lits(&[m.neg(), o.neg(), m1.pos()]);
    let err_l2 = b.and_lits(&[m.neg(), o.neg(), o1.pos(), s1.neg()]);

    let m_next = b.or_lits(&[m.pos(), match_r.pos(), match_l.pos()]);
    let e_next = b.or_lits(&[
        e.pos(),
        err_r1.pos(),
        err_r2.pos(),
        err_l1.pos(),
        err_l2.pos(),
    ]);

    for &bit in &me[..w] {
        b.output(bit);
    }
    b.output(o);
    b.output(me[layout.p()]);
    b.output(m_next);
    b.output(e_next);
    Ok(FeedForward::relu_mlp(b.compile()?))
}

fn matching_layer(layout: Layout, ffn: FeedForward) -> Layer {
    let width = layout.width();
    let mut left_key = Linear::zeros(1, width);
    left_key.set(0, layout.p(), 1.0);
    left_key.set(0, layout.m(), -1.0);
    let mut right_key = Linear::zeros(1, width);
    right_key.set(0, layout.p(), -1.0);
    right_key.set(0, layout.m(), -1.0);
    right_key.set_bias(0, 1.0);
    let hard = |name: &str, key: Linear, masking: Masking| AttentionHead {
        name: name.into(),
        query: Linear::constant(width, &[1.0]),
        key,
        value: Linear::identity(width),
        masking,
        selection: Selection::Hard,
        temperature: 1.0,
    };
    Layer {
        heads: vec![
            AttentionHead::identity("self", Linear::identity(width)),
            hard("left", left_key, Masking::Future { strict: true }),
            hard("right", right_key, Masking::Past { strict: true }),
        ],
        ffn,
    }
}

fn final_layer(layout: Layout) -> Result<Layer> {
    let width = layout.width();
    let mut key = Linear::zeros(1, width);
    key.set(0, layout.e(), 1.0);
    key.set(0, layout.m(), -1.0);
    key.set_bias(0, 1.0);
    let head = AttentionHead {
        name: "worst".into(),
        query: Linear::constant(width, &[1.0]),
        key,
        value: Linear::select(width, &[layout.e(), layout.m()]),
        masking: Masking::None,
        selection: Selection::Hard,
        temperature: 1.0,
    };
    let mut b = CircuitBuilder::new();
    let e = b.input(false);
    let m = b.input(false);
    let ok = b.and_lits(&[e.neg(), m.pos()]);
    b.output(ok);
    Ok(Layer {
        heads: vec![head],
        ffn: FeedForward::relu_mlp(b.compile()?),
    })
}

pub fn build_recognizer(k: u32, depth: u32, n_max: usize) -> Result<Network> {
    build_recognizer_with_layers(k, depth, n_max, depth as usize)
}

/// Recognizer for `Dyck_{k,depth}` with `matching_layers` matching layers
/// instead of `depth`. Fewer layers leave deeply nested pairs unmatched.
pub fn build_recognizer_with_layers(
    k: u32,
    depth: u32,
    n_max: usize,
    matching_layers: usize,
) -> Result<Network> {
    check_params(k, depth, n_max)?;
    let layout = Layout::for_k(k);
    let ffn = matching_ffn(layout)?;
    let mut layers: Vec<Layer> = (0..matching_layers)
        .map(|_| matching_layer(layout, ffn.clone()))
        .collect();
    layers.push(final_layer(layout)?);
    let net = Network {
        name: format!("recognizer k={k} D={depth}"),
        vocab_size: 2 * k as usize + 2,
        embedding: embedding(k, layout),
        positional: PositionalEncoding {
            coord: layout.p(),
            scale: PositionScale::InputLength,
        },
        n_max,
        layers,
        decoder: Decoder {
            linear: Linear::identity(1),
            readout: ReadoutRule::Threshold { at: 0.5 },
            labels: vec![Token::End.id()],
        },
    };
    net.validate()?;
    Ok(net)
}

fn ids(tokens: &[Token]) -> Vec<usize> {
    tokens.iter().map(|t| t.id()).collect()
}

/// Accept/reject read from the final position.
pub fn recognize(net: &Network, tokens: &[Token], cfg: &NumericConfig) -> Result<bool> {
    let out = net.forward(
        &ids(tokens),
        cfg,
        ForwardOptions {
            last_only: true,
            keep_trace: false,
        },
    )?;
    let at = match net.decoder.readout {
        ReadoutRule::Threshold { at } => at,
        ReadoutRule::ArgmaxUniform { .. } => {
            return Err(Error::MalformedNetwork("not a recognizer".into()))
        }
    };
    Ok(out.last_readout()[0] >= at)
}

/// Decoded states before the first layer and after every matching layer.
pub fn trace_states(
    net: &Network,
    tokens: &[Token],
    cfg: &NumericConfig,
) -> Result<Vec<Vec<RecognizerState>>> {
    let width = net.input_width();
    if width < 5 {
        return Err(Error::MalformedNetwork("not a recognizer".into()));
    }
    let layout = Layout {
        code_width: width - 4,
    };
    let out = net.forward(
        &ids(tokens),
        cfg,
        ForwardOptions {
            last_only: false,
            keep_trace: true,
        },
    )?;
    Ok(out
        .states
        .iter()
        .filter(|layer| layer.first().is_some_and(|x| x.len() == width))
        .map(|layer| {
            layer
                .iter()
                .map(|x| RecognizerState::decode(x, layout))
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyck::{oracle_recognize, wrap, Token::*};

    fn f64cfg() -> NumericConfig {
        NumericConfig::float64()
    }

    #[test]
    fn shape() {
        for (k, d) in [(1, 1), (2, 3), (8, 10), (30, 2)] {
            let net = build_recognizer(k, d, 64).unwrap();
            assert_eq!(net.layers.len(), d as usize + 1);
            assert_eq!(net.memory_size(), code_width(k) + 4);
            for layer in &net.layers[..d as usize] {
                assert_eq!(layer.heads.len(), 3);
                assert!(layer.heads.iter().all(|h| h.selection == Selection::Hard));
            }
        }
    }

    #[test]
    fn marker_embeddings() {
        let net = build_recognizer(2, 2, 16).unwrap();
        let l = Layout::for_k(2);
        assert_eq!(net.embedding[Start.id()][l.o()], 1.0);
        assert_eq!(net.embedding[End.id()][l.o()], 0.0);
        assert_eq!(net.embedding[Open(1).id()][l.o()], 1.0);
        assert_eq!(net.embedding[Close(2).id()][l.m()], 0.0);
    }

    #[test]
    fn examples() {
        let net = build_recognizer(2, 2, 32).unwrap();
        let cases = [
            (vec![Open(1), Open(2), Close(2), Close(1)], true),
            (vec![Open(1), Close(2)], false),
            (vec![Open(1)], false),
            (vec![Open(1), Open(2), Close(1), Close(2)], false),
            (
                vec![Open(1), Open(1), Open(1), Close(1), Close(1), Close(1)],
                false,
            ),
            (vec![Close(1), Open(1)], false),
            (vec![Open(2), Close(2), Open(1), Close(1)], true),
        ];
        for (interior, want) in cases {
            let w = wrap(&interior);
            assert_eq!(oracle_recognize(&w, 2, 2).unwrap().member, want);
            assert_eq!(
                recognize(&net, &w, &f64cfg()).unwrap(),
                want,
                "{interior:?}"
            );
        }
    }

    #[test]
    fn gating_keeps_matched_tokens_quiet() {
        // after layer 1 the inner pair is matched; the outer pair must not
        // flag it as a mismatched neighbour at layer 2
        let net = build_recognizer(2, 2, 32).unwrap();
        let w = wrap(&[Open(2), Open(1), Close(1), Close(2)]);
        assert!(recognize(&net, &w, &f64cfg()).unwrap());
    }

    #[test]
    fn flat_pairs_match_in_one_layer() {
        let net = build_recognizer(2, 2, 32).unwrap();
        let w = wrap(&[Open(1), Close(1), Open(2), Close(2)]);
        let states = trace_states(&net, &w, &f64cfg()).unwrap();
        assert_eq!(states.len(), 3);
        assert!(states[1][1..5].iter().all(|s| s.matched && !s.error));
    }

    #[test]
    fn nesting_matches_layer_by_layer() {
        let net = build_recognizer(2, 2, 32).unwrap();
        let w = wrap(&[Open(1), Open(2), Close(2), Close(1)]);
        let states = trace_states(&net, &w, &f64cfg()).unwrap();
        let matched =
            |l: usize| -> Vec<bool> { states[l][1..5].iter().map(|s| s.matched).collect() };
        assert_eq!(matched(0), vec![false; 4]);
        assert_eq!(matched(1), vec![false, true, true, false]);
        assert_eq!(matched(2), vec![true; 4]);
        for layer in &states {
            for (i, s) in layer.iter().enumerate() {
                assert!(!s.error);
                assert_eq!(s.position, (i + 1) as f64 / 6.0);
                assert_eq!(s.code, type_code(w[i], 2));
                assert_eq!(s.open, w[i].is_open() || w[i] == Start);
            }
        }
    }

    #[test]
    fn mismatch_sets_error() {
        let net = build_recognizer(2, 2, 32).unwrap();
        let w = wrap(&[Open(1), Close(2)]);
        let states = trace_states(&net, &w, &f64cfg()).unwrap();
        assert!(states[1][1].error && states[1][2].error);
    }

    #[test]
    fn one_layer_short_rejects_depth_d() {
        let w = wrap(&[Open(1), Open(1), Open(2), Close(2), Close(1), Close(1)]);
        let full = build_recognizer(2, 3, 32).unwrap();
        let short = build_recognizer_with_layers(2, 3, 32, 2).unwrap();
        assert!(recognize(&full, &w, &f64cfg()).unwrap());
        assert!(!recognize(&short, &w, &f64cfg()).unwrap());
        let states = trace_states(&short, &w, &f64cfg()).unwrap();
        assert!(states.last().unwrap().iter().any(|s| !s.matched));
    }

    #[test]
    fn overflow_is_an_error() {
        let net = build_recognizer(1, 1, 4).unwrap();
        let w = wrap(&[Open(1), Close(1), Open(1), Close(1)]);
        assert!(matches!(
            recognize(&net, &w, &f64cfg()),
            Err(Error::LengthOverflow { .. })
        ));
    }

    #[test]
    fn bits_only_increase() {
        let net = build_recognizer(2, 3, 32).unwrap();
        for s in crate::dyck::enumerate_strings(2, 6) {
            let w = wrap(&s);
            let states = trace_states(&net, &w, &f64cfg()).unwrap();
            for pair in states.windows(2) {
                for (a, b) in pair[0].iter().zip(&pair[1]) {
                    assert!(b.matched >= a.matched && b.error >= a.error);
                }
            }
        }
    }

    #[test]
    fn ffn_matches_boolean_update() {
        // all combinations of the bits the update reads, with types equal or not
        let layout = Layout::for_k(1);
        let ffn = matching_ffn(layout).unwrap();
        for mask in 0..(1 << 7) {
            let bit = |i: usize| (mask >> i) & 1 == 1;
            let (o, m, e, o1, m1, o2, m2) =
                (bit(0), bit(1), bit(2), bit(3), bit(4), bit(5), bit(6));
            for (s1, s2) in [(true, true), (true, false), (false, true), (false, false)] {
                let mk = |code: u32, o: bool, m: bool, e: bool| {
                    let mut x = code_bits(code, layout.code_width);
                    x.extend([o as u8 as f64, 0.5, m as u8 as f64, e as u8 as f64]);
                    x
                };
                let mut a = mk(0, o, m, e);
                a.extend(mk(if s1 { 0 } else { 1 }, o1, m1, false));
                a.extend(mk(if s2 { 0 } else { 2 }, o2, m2, false));
                let y = ffn.eval(&a, &f64cfg());
                let um = !m;
                let match_r = um && o && !o2 && !m2 && s2;
                let err_r = um && o && (m2 || (!o2 && !s2));
                let match_l = um && !o && o1 && !m1 && s1;
                let err_l = um && !o && (m1 || (o1 && !s1));
                assert_eq!(y[layout.m()], (m || match_r || match_l) as u8 as f64);
                assert_eq!(y[layout.e()], (e || err_r || err_l) as u8 as f64);
                assert_eq!(&y[..layout.m()], &a[..layout.m()]);
            }
        }
    }
}
