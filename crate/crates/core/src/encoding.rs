//! Binary type codes shared by the constructions.
//!
//! Bracket type `i` gets code `i - 1`, the start marker `k` and the end
//! marker `k + 1`, written little-endian in `code_width(k)` bits.

use crate::dyck::Token;

/// `ceil(log2(k + 2))`, at least 1.
pub fn code_width(k: u32) -> usize {
    let symbols = k as u64 + 2;
    (64 - (symbols - 1).leading_zeros() as usize).max(1)
}

pub fn type_code(token: Token, k: u32) -> u32 {
    match token {
        Token::Open(i) | Token::Close(i) => i - 1,
        Token::Start => k,
        Token::End => k + 1,
    }
}

pub fn code_bits(code: u32, width: usize) -> Vec<f64> {
    (0..width).map(|b| ((code >> b) & 1) as f64).collect()
}

/// Inverse of [`code_bits`], thresholding at 1/2.
pub fn decode_bits(bits: &[f64]) -> u32 {
    bits.iter()
        .enumerate()
        .map(|(b, &v)| ((v > 0.5) as u32) << b)
        .sum()
}

/// Every token code for bracket types `1..=k`, in code order.
pub fn vocabulary(k: u32) -> Vec<Token> {
    (0..2 * k as usize + 2)
        .map(|id| Token::from_id(id).expect("valid id"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths() {
        assert_eq!(code_width(1), 2);
        assert_eq!(code_width(2), 2);
        assert_eq!(code_width(3), 3);
        assert_eq!(code_width(6), 3);
        assert_eq!(code_width(7), 4);
        assert_eq!(code_width(8), 4);
    }

    #[test]
    fn codes_are_distinct_and_round_trip() {
        for k in 1..20 {
            let w = code_width(k);
            let mut seen = std::collections::BTreeSet::new();
            for t in vocabulary(k) {
                let c = type_code(t, k);
                assert!(c < 1 << w);
                assert_eq!(decode_bits(&code_bits(c, w)), c);
                if !t.is_close() {
                    assert!(seen.insert(c));
                }
            }
        }
    }
}
