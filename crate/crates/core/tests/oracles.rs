use dycklab::dyck::{
    brackets, enumerate_strings, legal_next_tokens, oracle_recognize, wrap, Token,
};
use dycklab::generator::{build_generator, next_token};
use dycklab::recognizer::{build_recognizer, recognize};
use dycklab::{Network, NumericConfig};
use proptest::prelude::*;

/// Grammar `S -> (open_i S close_i)*` with a depth counter.
fn descent(tokens: &[Token], depth: u32) -> bool {
    fn seq(t: &[Token], pos: &mut usize, level: u32, depth: u32) -> bool {
        while let Some(&Token::Open(i)) = t.get(*pos) {
            if level + 1 > depth {
                return false;
            }
            *pos += 1;
            if !seq(t, pos, level + 1, depth) {
                return false;
            }
            if t.get(*pos) != Some(&Token::Close(i)) {
                return false;
            }
            *pos += 1;
        }
        true
    }
    let [Token::Start, inner @ .., Token::End] = tokens else {
        return false;
    };
    let mut pos = 0;
    seq(inner, &mut pos, 0, depth) && pos == inner.len()
}

fn interior(k: u32, max_len: usize) -> impl Strategy<Value = Vec<Token>> {
    let alphabet = brackets(k);
    prop::collection::vec(prop::sample::select(alphabet), 0..=max_len)
}

/// Whether some member of length at most `n_max` begins with `prefix`.
fn completions_exist(prefix: &[Token], k: u32, depth: u32, n_max: usize) -> bool {
    if prefix.last() == Some(&Token::End) {
        return prefix.len() <= n_max && oracle_recognize(prefix, k, depth).unwrap().member;
    }
    let room = n_max.saturating_sub(prefix.len() + 1);
    let closes = |tail: &[Token]| {
        let mut s = prefix.to_vec();
        s.extend(tail);
        s.push(Token::End);
        oracle_recognize(&s, k, depth).unwrap().member
    };
    closes(&[]) || enumerate_strings(k, room).any(|tail| closes(&tail))
}

#[test]
fn legal_sets_match_completion_search() {
    let (k, depth, n_max) = (2, 2, 9);
    for body in enumerate_strings(k, 5) {
        let mut prefix = vec![Token::Start];
        prefix.extend(&body);
        let Ok(legal) = legal_next_tokens(&prefix, k, depth, n_max) else {
            assert!(!completions_exist(&prefix, k, depth, n_max), "{prefix:?}");
            continue;
        };
        let mut candidates = brackets(k);
        candidates.push(Token::End);
        for t in candidates {
            let mut ext = prefix.clone();
            ext.push(t);
            assert_eq!(
                legal.contains(&t),
                completions_exist(&ext, k, depth, n_max),
                "{ext:?}"
            );
        }
    }
}

#[test]
fn exported_networks_reload() {
    let nets: Vec<Network> = vec![
        build_recognizer(2, 3, 64).unwrap(),
        build_generator(2, 3, 64).unwrap(),
    ];
    for net in nets {
        let json = net.to_json().unwrap();
        let back = Network::from_json(&json).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_json().unwrap(), json);
    }
    let rec = Network::from_json(&build_recognizer(2, 3, 64).unwrap().to_json().unwrap()).unwrap();
    let s = wrap(&[
        Token::Open(1),
        Token::Open(2),
        Token::Close(2),
        Token::Close(1),
    ]);
    assert!(recognize(&rec, &s, &NumericConfig::float64()).unwrap());
}

proptest! {
    #[test]
    fn oracle_agrees_with_descent(k in 1u32..=3, depth in 1u32..=4, body in interior(3, 14)) {
        let body: Vec<Token> = body.into_iter().filter(|t| t.in_vocabulary(k)).collect();
        let s = wrap(&body);
        prop_assert_eq!(oracle_recognize(&s, k, depth).unwrap().member, descent(&s, depth));
    }

    #[test]
    fn recognizer_agrees_with_descent(k in 1u32..=3, depth in 1u32..=4, body in interior(3, 24)) {
        let body: Vec<Token> = body.into_iter().filter(|t| t.in_vocabulary(k)).collect();
        let s = wrap(&body);
        let net = build_recognizer(k, depth, 32).unwrap();
        prop_assert_eq!(recognize(&net, &s, &NumericConfig::float64()).unwrap(), descent(&s, depth));
    }

    #[test]
    fn generator_legal_sets_on_random_prefixes(depth in 1u32..=4, body in interior(3, 20)) {
        let n_max = 40;
        let net = build_generator(3, depth, n_max).unwrap();
        // longest valid prefix of the random string
        let mut prefix = vec![Token::Start];
        for t in body {
            prefix.push(t);
            if legal_next_tokens(&prefix, 3, depth, n_max).is_err() {
                prefix.pop();
                break;
            }
        }
        let want = legal_next_tokens(&prefix, 3, depth, n_max).unwrap();
        let got = next_token(&net, &prefix, &NumericConfig::float64()).unwrap();
        prop_assert_eq!(got.legal_set, want);
    }
}
