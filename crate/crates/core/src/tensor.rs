//! Minimal transformer substrate with explicit weights.
//!
//! A [`Network`] is an embedding table, a scalar positional encoding, a stack
//! of [`Layer`]s (multi-head attention followed by a [`FeedForward`]) and a
//! linear [`Decoder`]. Every scalar produced during a forward pass goes
//! through [`NumericConfig`], so the same weights can be run in plain `f64`
//! or in simulated fixed point.

use std::cell::Cell;
use std::ops::Range;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::dyck::Token;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arithmetic {
    Float64,
    /// One sign bit, `int_bits` integer bits and `frac_bits` fractional bits.
    FixedPoint {
        int_bits: u32,
        frac_bits: u32,
    },
}

/// Integer bits used when only the fractional width is given.
pub const DEFAULT_INT_BITS: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericConfig {
    pub arithmetic: Arithmetic,
    /// When set to `C`, soft attention weights are rounded to the nearest
    /// multiple of `1/(C n)` for an input of length `n`.
    pub attention_rounding: Option<u32>,
}

impl Default for NumericConfig {
    fn default() -> Self {
        Self::float64()
    }
}

impl NumericConfig {
    pub fn float64() -> Self {
        NumericConfig {
            arithmetic: Arithmetic::Float64,
            attention_rounding: None,
        }
    }

    pub fn fixed(frac_bits: u32) -> Self {
        Self::fixed_with(DEFAULT_INT_BITS, frac_bits)
    }

    pub fn fixed_with(int_bits: u32, frac_bits: u32) -> Self {
        NumericConfig {
            arithmetic: Arithmetic::FixedPoint {
                int_bits,
                frac_bits,
            },
            attention_rounding: None,
        }
    }

    pub fn with_rounding(mut self, c: u32) -> Self {
        self.attention_rounding = Some(c);
        self
    }

    /// Total bits per scalar, sign included. `None` for `f64`.
    pub fn precision_bits(&self) -> Option<u32> {
        match self.arithmetic {
            Arithmetic::Float64 => None,
            Arithmetic::FixedPoint {
                int_bits,
                frac_bits,
            } => Some(1 + int_bits + frac_bits),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quantized {
    pub value: f64,
    pub saturated: bool,
}

/// Nearest representable value, ties to even. Saturates at the range ends.
pub fn quantize(x: f64, cfg: &NumericConfig) -> Quantized {
    match Grid::of(cfg) {
        None => Quantized {
            value: x,
            saturated: false,
        },
        Some(g) => g.round(x),
    }
}

/// Ties-to-even rounding without a libm call on targets lacking SSE4.1.
#[inline]
fn round_half_even(y: f64) -> f64 {
    const SHIFT: f64 = 6755399441055744.0; // 1.5 * 2^52
    if y.abs() < 4503599627370496.0 {
        (y + SHIFT) - SHIFT
    } else {
        y.round_ties_even()
    }
}

#[derive(Clone, Copy, Debug)]
struct Grid {
    scale: f64,
    lo: f64,
    hi: f64,
}

impl Grid {
    fn of(cfg: &NumericConfig) -> Option<Grid> {
        match cfg.arithmetic {
            Arithmetic::Float64 => None,
            Arithmetic::FixedPoint {
                int_bits,
                frac_bits,
            } => {
                let scale = (frac_bits as f64).exp2();
                let top = (int_bits as f64).exp2();
                Some(Grid {
                    scale,
                    lo: -top,
                    hi: top - 1.0 / scale,
                })
            }
        }
    }

    #[inline]
    fn round(&self, x: f64) -> Quantized {
        let v = round_half_even(x * self.scale) / self.scale;
        if v > self.hi {
            Quantized {
                value: self.hi,
                saturated: true,
            }
        } else if v < self.lo || v.is_nan() {
            Quantized {
                value: self.lo,
                saturated: true,
            }
        } else {
            Quantized {
                value: v,
                saturated: false,
            }
        }
    }
}

/// Per-pass arithmetic: applies the numeric mode and counts saturations.
pub(crate) struct Arith<'a> {
    cfg: &'a NumericConfig,
    grid: Option<Grid>,
    saturated: Cell<usize>,
}

impl<'a> Arith<'a> {
    pub(crate) fn new(cfg: &'a NumericConfig) -> Self {
        Arith {
            cfg,
            grid: Grid::of(cfg),
            saturated: Cell::new(0),
        }
    }

    fn is_exact(&self) -> bool {
        self.grid.is_none()
    }

    #[inline]
    fn q(&self, x: f64) -> f64 {
        match &self.grid {
            None => x,
            Some(g) => {
                let r = g.round(x);
                if r.saturated {
                    self.saturated.set(self.saturated.get() + 1);
                }
                r.value
            }
        }
    }

    fn q_vec(&self, v: &mut [f64]) {
        if !self.is_exact() {
            for x in v.iter_mut() {
                *x = self.q(*x);
            }
        }
    }

    fn q_owned(&self, mut v: Vec<f64>) -> Vec<f64> {
        self.q_vec(&mut v);
        v
    }
}

#[derive(Clone, Debug, Default)]
struct Csr {
    starts: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl Csr {
    #[inline]
    fn row(&self, r: usize, bias: f64, x: &[f64]) -> f64 {
        let mut acc = bias;
        for &(c, w) in &self.entries[self.starts[r]..self.starts[r + 1]] {
            acc += w * x[c];
        }
        acc
    }
}

/// Affine map `y = W x + b`, `W` stored row-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(skip)]
    sparse: OnceLock<Csr>,
}

impl PartialEq for Linear {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.weight == other.weight
            && self.bias == other.bias
    }
}

impl Linear {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Linear {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
            sparse: OnceLock::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut l = Self::zeros(n, n);
        for i in 0..n {
            l.set(i, i, 1.0);
        }
        l
    }

    /// Copies input coordinates `coords` (in order) to the output.
    pub fn select(cols: usize, coords: &[usize]) -> Self {
        let mut l = Self::zeros(coords.len(), cols);
        for (r, &c) in coords.iter().enumerate() {
            l.set(r, c, 1.0);
        }
        l
    }

    /// Output independent of the input.
    pub fn constant(cols: usize, values: &[f64]) -> Self {
        let mut l = Self::zeros(values.len(), cols);
        l.bias.copy_from_slice(values);
        l
    }

    pub fn from_rows(rows: &[Vec<f64>], bias: &[f64]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) || bias.len() != rows.len() {
            return Err(Error::MalformedNetwork("ragged matrix".into()));
        }
        Ok(Linear {
            rows: rows.len(),
            cols,
            weight: rows.concat(),
            bias: bias.to_vec(),
            sparse: OnceLock::new(),
        })
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.weight[r * self.cols + c] = v;
        self.sparse = OnceLock::new();
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.weight[r * self.cols + c]
    }

    pub fn set_bias(&mut self, r: usize, v: f64) {
        self.bias[r] = v;
    }

    /// True when every weight is zero, i.e. the output is the bias.
    pub fn is_constant(&self) -> bool {
        self.weight.iter().all(|&w| w == 0.0)
    }

    fn csr(&self) -> &Csr {
        self.sparse.get_or_init(|| {
            let mut starts = Vec::with_capacity(self.rows + 1);
            let mut entries = Vec::new();
            for r in 0..self.rows {
                starts.push(entries.len());
                for c in 0..self.cols {
                    let w = self.weight[r * self.cols + c];
                    if w != 0.0 {
                        entries.push((c, w));
                    }
                }
            }
            starts.push(entries.len());
            Csr { starts, entries }
        })
    }

    /// Exact `f64` evaluation.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut out = Vec::with_capacity(self.rows);
        self.apply_into(x, &mut out);
        out
    }

    /// Row `r` of `W x + b`.
    pub fn apply_row(&self, r: usize, x: &[f64]) -> f64 {
        self.csr().row(r, self.bias[r], x)
    }

    fn apply_into(&self, x: &[f64], out: &mut Vec<f64>) {
        let csr = self.csr();
        out.clear();
        for (r, &b) in self.bias.iter().enumerate() {
            out.push(csr.row(r, b, x));
        }
    }

    fn apply_relu_into(&self, x: &[f64], out: &mut Vec<f64>) {
        let csr = self.csr();
        out.clear();
        for (r, &b) in self.bias.iter().enumerate() {
            out.push(csr.row(r, b, x).max(0.0));
        }
    }

    /// Accumulates in `f64`, then rounds each output once.
    pub(crate) fn apply_q(&self, x: &[f64], ar: &Arith) -> Vec<f64> {
        let mut y = self.apply(x);
        ar.q_vec(&mut y);
        y
    }

    pub fn nonzeros(&self) -> usize {
        self.csr().entries.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Masking {
    None,
    /// Hides `j > i`; `strict` also hides `j = i`.
    Future {
        strict: bool,
    },
    /// Hides `j < i`; `strict` also hides `j = i`.
    Past {
        strict: bool,
    },
    /// Only `j = i` is visible.
    SelfOnly,
}

impl Masking {
    pub fn window(self, i: usize, n: usize) -> Range<usize> {
        match self {
            Masking::None => 0..n,
            Masking::Future { strict: true } => 0..i,
            Masking::Future { strict: false } => 0..i + 1,
            Masking::Past { strict: true } => i + 1..n,
            Masking::Past { strict: false } => i..n,
            Masking::SelfOnly => i..i + 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    Soft,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub name: String,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub masking: Masking,
    pub selection: Selection,
    /// Multiplies every score before selection.
    pub temperature: f64,
}

impl AttentionHead {
    /// Head that returns `V x_i` at every position.
    pub fn identity(name: &str, value: Linear) -> Self {
        let d = value.cols;
        AttentionHead {
            name: name.into(),
            query: Linear::zeros(0, d),
            key: Linear::zeros(0, d),
            value,
            masking: Masking::SelfOnly,
            selection: Selection::Hard,
            temperature: 1.0,
        }
    }

    pub fn input_width(&self) -> usize {
        self.value.cols
    }

    pub fn output_width(&self) -> usize {
        self.value.rows
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub value: Vec<f64>,
    /// Every position was masked; `value` is the zero vector.
    pub empty: bool,
    /// Chosen position (hard) or the position with the largest weight (soft).
    pub selected: Option<usize>,
}

fn empty_output(width: usize) -> AttentionOutput {
    AttentionOutput {
        value: vec![0.0; width],
        empty: true,
        selected: None,
    }
}

/// Keys (and, for soft heads, values) of one head over a whole sequence.
struct Projected {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl AttentionHead {
    fn project(&self, inputs: &[Vec<f64>], ar: &Arith) -> Projected {
        let attends = self.masking != Masking::SelfOnly;
        let keys = if attends {
            inputs.iter().map(|x| self.key.apply_q(x, ar)).collect()
        } else {
            Vec::new()
        };
        let values = if attends && self.selection == Selection::Soft {
            inputs.iter().map(|x| self.value.apply_q(x, ar)).collect()
        } else {
            Vec::new()
        };
        Projected { keys, values }
    }

    fn value_at(&self, inputs: &[Vec<f64>], proj: &Projected, j: usize, ar: &Arith) -> Vec<f64> {
        match proj.values.get(j) {
            Some(v) => v.clone(),
            None => self.value.apply_q(&inputs[j], ar),
        }
    }

    fn score(&self, q: &[f64], k: &[f64], ar: &Arith) -> f64 {
        let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
        ar.q(dot * self.temperature)
    }

    /// Scores of every position against a constant query.
    fn constant_scores(&self, inputs: &[Vec<f64>], ar: &Arith) -> Vec<f64> {
        let q = ar.q_owned(self.query.bias.clone());
        inputs
            .iter()
            .map(|x| {
                let dot: f64 = (0..self.key.rows)
                    .map(|r| q[r] * ar.q(self.key.apply_row(r, x)))
                    .sum();
                ar.q(dot * self.temperature)
            })
            .collect()
    }

    fn attend_one(
        &self,
        inputs: &[Vec<f64>],
        proj: &Projected,
        i: usize,
        ar: &Arith,
    ) -> AttentionOutput {
        let n = inputs.len();
        let window = self.masking.window(i, n);
        if window.is_empty() {
            return empty_output(self.output_width());
        }
        if self.masking == Masking::SelfOnly {
            return AttentionOutput {
                value: self.value_at(inputs, proj, i, ar),
                empty: false,
                selected: Some(i),
            };
        }
        let q = self.query.apply_q(&inputs[i], ar);
        let scores: Vec<(usize, f64)> = window
            .map(|j| (j, self.score(&q, &proj.keys[j], ar)))
            .collect();
        match self.selection {
            Selection::Hard => {
                let (best, _) = scores.iter().fold(
                    scores[0],
                    |acc, &(j, s)| {
                        if s > acc.1 {
                            (j, s)
                        } else {
                            acc
                        }
                    },
                );
                AttentionOutput {
                    value: self.value_at(inputs, proj, best, ar),
                    empty: false,
                    selected: Some(best),
                }
            }
            Selection::Soft => {
                let max = scores
                    .iter()
                    .map(|&(_, s)| s)
                    .fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|&(_, s)| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                let grid = ar.cfg.attention_rounding.map(|c| c as f64 * n as f64);
                let mut out = vec![0.0; self.output_width()];
                let mut best = (scores[0].0, f64::NEG_INFINITY);
                for (&(j, _), e) in scores.iter().zip(&exps) {
                    let mut alpha = ar.q(e / total);
                    if let Some(g) = grid {
                        alpha = ar.q((alpha * g).round_ties_even() / g);
                    }
                    if alpha > best.1 {
                        best = (j, alpha);
                    }
                    for (o, v) in out.iter_mut().zip(&proj.values[j]) {
                        *o += alpha * v;
                    }
                }
                ar.q_vec(&mut out);
                AttentionOutput {
                    value: out,
                    empty: false,
                    selected: Some(best.0),
                }
            }
        }
    }

    /// Outputs at `positions`, using linear scans when the query is constant.
    fn attend_many(
        &self,
        inputs: &[Vec<f64>],
        positions: &[usize],
        ar: &Arith,
    ) -> Vec<AttentionOutput> {
        let constant_query = self.query.is_constant() && self.masking != Masking::SelfOnly;
        if constant_query {
            match self.selection {
                Selection::Hard => return self.hard_scan(inputs, positions, ar),
                Selection::Soft if ar.is_exact() && ar.cfg.attention_rounding.is_none() => {
                    return self.soft_scan(inputs, positions, ar)
                }
                Selection::Soft => {}
            }
        }
        let proj = self.project(inputs, ar);
        positions
            .iter()
            .map(|&i| self.attend_one(inputs, &proj, i, ar))
            .collect()
    }

    /// Argmax over windows with a position-independent query; lowest index wins ties.
    fn hard_scan(
        &self,
        inputs: &[Vec<f64>],
        positions: &[usize],
        ar: &Arith,
    ) -> Vec<AttentionOutput> {
        let n = inputs.len();
        let scores = self.constant_scores(inputs, ar);
        // prefix[t] = best index in 0..=t, suffix[t] = best index in t..n
        let mut prefix: Vec<usize> = Vec::with_capacity(n);
        for (j, &s) in scores.iter().enumerate() {
            let best = match prefix.last() {
                Some(&b) if scores[b] >= s => b,
                _ => j,
            };
            prefix.push(best);
        }
        let mut suffix = vec![0usize; n];
        for j in (0..n).rev() {
            suffix[j] = if j + 1 < n && scores[suffix[j + 1]] > scores[j] {
                suffix[j + 1]
            } else {
                j
            };
        }
        positions
            .iter()
            .map(|&i| {
                let w = self.masking.window(i, n);
                if w.is_empty() {
                    return empty_output(self.output_width());
                }
                let best = match self.masking {
                    Masking::None | Masking::Future { .. } => prefix[w.end - 1],
                    Masking::Past { .. } => suffix[w.start],
                    Masking::SelfOnly => i,
                };
                AttentionOutput {
                    value: self.value.apply_q(&inputs[best], ar),
                    empty: false,
                    selected: Some(best),
                }
            })
            .collect()
    }

    /// Online softmax over growing (or shrinking) windows, `f64` only.
    fn soft_scan(
        &self,
        inputs: &[Vec<f64>],
        positions: &[usize],
        ar: &Arith,
    ) -> Vec<AttentionOutput> {
        let n = inputs.len();
        let width = self.output_width();
        let scores = self.constant_scores(inputs, ar);
        let values: Vec<Vec<f64>> = inputs.iter().map(|x| self.value.apply_q(x, ar)).collect();

        #[derive(Clone)]
        struct Acc {
            max: f64,
            total: f64,
            sum: Vec<f64>,
            best: usize,
        }
        // ties keep the lowest index in either direction
        let absorb = |acc: &mut Acc, j: usize, backward: bool| {
            let s = scores[j];
            if s > acc.max || (backward && s == acc.max) {
                if s > acc.max {
                    let r = (acc.max - s).exp();
                    acc.total *= r;
                    acc.sum.iter_mut().for_each(|v| *v *= r);
                    acc.max = s;
                }
                acc.best = j;
            }
            let e = (s - acc.max).exp();
            acc.total += e;
            for (a, v) in acc.sum.iter_mut().zip(&values[j]) {
                *a += e * v;
            }
        };
        let fresh = Acc {
            max: f64::NEG_INFINITY,
            total: 0.0,
            sum: vec![0.0; width],
            best: 0,
        };
        let finish = |acc: &Acc| AttentionOutput {
            value: acc.sum.iter().map(|v| v / acc.total).collect(),
            empty: false,
            selected: Some(acc.best),
        };

        // outputs[t] covers 0..t (growing windows) or t..n (shrinking)
        let mut outputs: Vec<Option<AttentionOutput>> = vec![None; n + 1];
        let mut acc = fresh;
        match self.masking {
            Masking::None | Masking::Future { .. } => {
                for j in 0..n {
                    absorb(&mut acc, j, false);
                    outputs[j + 1] = Some(finish(&acc));
                }
            }
            Masking::Past { .. } => {
                for j in (0..n).rev() {
                    absorb(&mut acc, j, true);
                    outputs[j] = Some(finish(&acc));
                }
            }
            Masking::SelfOnly => unreachable!(),
        }
        positions
            .iter()
            .map(|&i| {
                let w = self.masking.window(i, n);
                let slot = match self.masking {
                    Masking::Past { .. } => w.start,
                    _ => w.end,
                };
                match &outputs[slot] {
                    Some(o) if !w.is_empty() => o.clone(),
                    _ => empty_output(width),
                }
            })
            .collect()
    }
}

/// Output of `head` at position `i`.
pub fn attend(
    head: &AttentionHead,
    inputs: &[Vec<f64>],
    i: usize,
    cfg: &NumericConfig,
) -> Result<AttentionOutput> {
    if i >= inputs.len() {
        return Err(Error::invalid(format!(
            "position {i} outside a sequence of {}",
            inputs.len()
        )));
    }
    let ar = Arith::new(cfg);
    let proj = head.project(inputs, &ar);
    Ok(head.attend_one(inputs, &proj, i, &ar))
}

/// Zero mean and unit RMS over `coords`, then a per-coordinate gain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormGroup {
    pub coords: Vec<usize>,
    pub gains: Vec<f64>,
}

impl NormGroup {
    pub fn uniform(coords: Vec<usize>, gain: f64) -> Self {
        let gains = vec![gain; coords.len()];
        NormGroup { coords, gains }
    }

    /// A group with zero spread maps to zeros.
    pub fn apply(&self, x: &mut [f64]) {
        let m = self.coords.len() as f64;
        let mean = self.coords.iter().map(|&c| x[c]).sum::<f64>() / m;
        let var = self
            .coords
            .iter()
            .map(|&c| (x[c] - mean).powi(2))
            .sum::<f64>()
            / m;
        let rms = var.sqrt();
        for (&c, &g) in self.coords.iter().zip(&self.gains) {
            x[c] = if rms > 0.0 {
                g * (x[c] - mean) / rms
            } else {
                0.0
            };
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FfnOp {
    Affine {
        linear: Linear,
        relu: bool,
    },
    LayerNorm {
        groups: Vec<NormGroup>,
    },
    Relu,
    /// Adds the block input back in.
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub ops: Vec<FfnOp>,
}

impl FeedForward {
    /// Plain ReLU MLP: every layer is affine followed by ReLU.
    pub fn relu_mlp(layers: Vec<Linear>) -> Self {
        FeedForward {
            ops: layers
                .into_iter()
                .map(|linear| FfnOp::Affine { linear, relu: true })
                .collect(),
        }
    }

    pub fn eval(&self, input: &[f64], cfg: &NumericConfig) -> Vec<f64> {
        self.apply(input, &Arith::new(cfg))
    }

    fn apply(&self, input: &[f64], ar: &Arith) -> Vec<f64> {
        let widest = self
            .ops
            .iter()
            .map(|op| match op {
                FfnOp::Affine { linear, .. } => linear.rows,
                _ => 0,
            })
            .max()
            .unwrap_or(0)
            .max(input.len());
        let mut x = Vec::with_capacity(widest);
        x.extend_from_slice(input);
        let mut spare = Vec::with_capacity(widest);
        for op in &self.ops {
            match op {
                FfnOp::Affine { linear, relu } => {
                    if *relu {
                        linear.apply_relu_into(&x, &mut spare);
                    } else {
                        linear.apply_into(&x, &mut spare);
                    }
                    std::mem::swap(&mut x, &mut spare);
                }
                FfnOp::LayerNorm { groups } => groups.iter().for_each(|g| g.apply(&mut x)),
                FfnOp::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
                FfnOp::Residual => x.iter_mut().zip(input).for_each(|(v, a)| *v += a),
            }
            ar.q_vec(&mut x);
        }
        x
    }

    /// Output width for an input of width `input`, or a description of the
    /// first inconsistency.
    fn check(&self, input: usize) -> std::result::Result<usize, String> {
        let mut w = input;
        for (idx, op) in self.ops.iter().enumerate() {
            match op {
                FfnOp::Affine { linear, .. } => {
                    if linear.cols != w
                        || linear.weight.len() != linear.rows * linear.cols
                        || linear.bias.len() != linear.rows
                    {
                        return Err(format!("op {idx}: affine map does not accept width {w}"));
                    }
                    w = linear.rows;
                }
                FfnOp::LayerNorm { groups } => {
                    for g in groups {
                        if g.coords.is_empty()
                            || g.coords.len() != g.gains.len()
                            || g.coords.iter().any(|&c| c >= w)
                        {
                            return Err(format!("op {idx}: bad layer-norm group"));
                        }
                    }
                }
                FfnOp::Relu => {}
                FfnOp::Residual => {
                    if w != input {
                        return Err(format!(
                            "op {idx}: residual width {w} != input width {input}"
                        ));
                    }
                }
            }
        }
        Ok(w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub heads: Vec<AttentionHead>,
    pub ffn: FeedForward,
}

impl Layer {
    pub fn attention_width(&self) -> usize {
        self.heads.iter().map(AttentionHead::output_width).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionScale {
    /// `p_i = i / len` for the actual input length.
    InputLength,
    /// `p_i = i / n` for a fixed `n`.
    Fixed(usize),
}

/// Adds `i / n` (positions counted from 1) to coordinate `coord`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub coord: usize,
    pub scale: PositionScale,
}

impl PositionalEncoding {
    pub fn value(&self, i: usize, len: usize) -> f64 {
        let n = match self.scale {
            PositionScale::InputLength => len,
            PositionScale::Fixed(n) => n,
        };
        (i + 1) as f64 / n as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ReadoutRule {
    /// Single output; accept iff it is at least `at`.
    Threshold { at: f64 },
    /// Tokens scoring within `tolerance` of `legal_score` are legal; the
    /// next-token distribution is uniform over the top-scoring tokens.
    ArgmaxUniform { legal_score: f64, tolerance: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub linear: Linear,
    pub readout: ReadoutRule,
    /// Token code for each decoder row.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub name: String,
    pub vocab_size: usize,
    /// One row per token code.
    pub embedding: Vec<Vec<f64>>,
    pub positional: PositionalEncoding,
    pub n_max: usize,
    pub layers: Vec<Layer>,
    pub decoder: Decoder,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Compute the last layer only at the final position.
    pub last_only: bool,
    /// Keep every layer's states and attention outputs.
    pub keep_trace: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// Concatenated head outputs.
    pub output: Vec<f64>,
    pub selected: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    /// With `keep_trace`, `states[l][i]` for every layer input `l = 0..=L`
    /// (positions restricted to `final_positions` at `l = L`); otherwise just
    /// the last layer.
    pub states: Vec<Vec<Vec<f64>>>,
    /// With `keep_trace`, attention records per layer and position.
    pub attention: Vec<Vec<AttentionRecord>>,
    pub final_positions: Vec<usize>,
    /// Decoder output for each of `final_positions`.
    pub readout: Vec<Vec<f64>>,
    pub empty_attention: usize,
    pub saturated: usize,
}

impl Forward {
    pub fn last_state(&self) -> &[f64] {
        self.states
            .last()
            .and_then(|s| s.last())
            .expect("nonempty forward")
    }

    pub fn last_readout(&self) -> &[f64] {
        self.readout.last().expect("nonempty forward")
    }
}

impl Network {
    pub fn input_width(&self) -> usize {
        self.embedding.first().map_or(0, Vec::len)
    }

    /// Representation width after embedding and after each layer.
    pub fn widths(&self) -> Vec<usize> {
        let mut out = vec![self.input_width()];
        for layer in &self.layers {
            out.push(layer.ffn.check(layer.attention_width()).unwrap_or(0));
        }
        out
    }

    /// Scalars per token per layer: the widest representation.
    pub fn memory_size(&self) -> usize {
        self.widths().into_iter().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::MalformedNetwork(m));
        let d0 = self.input_width();
        if self.embedding.len() != self.vocab_size || self.embedding.iter().any(|r| r.len() != d0) {
            return bad("embedding table shape".into());
        }
        if self.positional.coord >= d0 {
            return bad("positional coordinate outside the embedding".into());
        }
        if self.n_max == 0 {
            return bad("n_max must be positive".into());
        }
        let mut w = d0;
        for (li, layer) in self.layers.iter().enumerate() {
            for h in &layer.heads {
                let ok = h.value.cols == w
                    && h.query.cols == w
                    && h.key.cols == w
                    && h.query.rows == h.key.rows
                    && [&h.query, &h.key, &h.value]
                        .iter()
                        .all(|l| l.weight.len() == l.rows * l.cols && l.bias.len() == l.rows);
                if !ok {
                    return bad(format!(
                        "layer {li}: head `{}` does not fit width {w}",
                        h.name
                    ));
                }
            }
            w = match layer.ffn.check(layer.attention_width()) {
                Ok(w) => w,
                Err(m) => return bad(format!("layer {li}: {m}")),
            };
        }
        let dec = &self.decoder.linear;
        if dec.cols != w || dec.labels_mismatch(&self.decoder.labels) {
            return bad("decoder shape".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Network = serde_json::from_str(text)?;
        net.validate()?;
        Ok(net)
    }

    fn embed(&self, ids: &[usize], ar: &Arith) -> Result<Vec<Vec<f64>>> {
        let len = ids.len();
        ids.iter()
            .enumerate()
            .map(|(i, &id)| {
                let mut x = self
                    .embedding
                    .get(id)
                    .ok_or_else(|| {
                        Error::invalid(format!("token code {id} outside the vocabulary"))
                    })?
                    .clone();
                x[self.positional.coord] += self.positional.value(i, len);
                ar.q_vec(&mut x);
                Ok(x)
            })
            .collect()
    }

    pub fn forward(
        &self,
        ids: &[usize],
        cfg: &NumericConfig,
        opts: ForwardOptions,
    ) -> Result<Forward> {
        if ids.is_empty() {
            return Err(Error::invalid("empty input"));
        }
        if ids.len() > self.n_max {
            return Err(Error::LengthOverflow {
                len: ids.len(),
                max: self.n_max,
            });
        }
        let ar = Arith::new(cfg);
        let n = ids.len();
        let mut x = self.embed(ids, &ar)?;
        let mut states = Vec::new();
        let mut attention = Vec::new();
        let mut empty = 0;
        let all: Vec<usize> = (0..n).collect();
        let mut positions = all.clone();

        for (li, layer) in self.layers.iter().enumerate() {
            if opts.last_only && li + 1 == self.layers.len() {
                positions = vec![n - 1];
            }
            let outs: Vec<Vec<AttentionOutput>> = layer
                .heads
                .iter()
                .map(|h| h.attend_many(&x, &positions, &ar))
                .collect();
            let mut records = Vec::with_capacity(positions.len());
            let mut next = Vec::with_capacity(positions.len());
            for p in 0..positions.len() {
                let mut a = Vec::with_capacity(layer.attention_width());
                let mut selected = Vec::with_capacity(layer.heads.len());
                for head_out in &outs {
                    let o = &head_out[p];
                    empty += o.empty as usize;
                    a.extend_from_slice(&o.value);
                    selected.push(o.selected);
                }
                next.push(layer.ffn.apply(&a, &ar));
                if opts.keep_trace {
                    records.push(AttentionRecord {
                        output: a,
                        selected,
                    });
                }
            }
            if opts.keep_trace {
                states.push(std::mem::replace(&mut x, next));
                attention.push(records);
            } else {
                x = next;
            }
        }
        let readout = x
            .iter()
            .map(|s| self.decoder.linear.apply_q(s, &ar))
            .collect();
        states.push(x);
        Ok(Forward {
            states,
            attention,
            final_positions: positions,
            readout,
            empty_attention: empty,
            saturated: ar.saturated.get(),
        })
    }
}

impl Linear {
    fn labels_mismatch(&self, labels: &[usize]) -> bool {
        labels.len() != self.rows
            || self.weight.len() != self.rows * self.cols
            || self.bias.len() != self.rows
    }
}

/// Full forward pass over a token sequence, keeping the trace.
pub fn run_network(net: &Network, tokens: &[Token], cfg: &NumericConfig) -> Result<Forward> {
    let ids: Vec<usize> = tokens.iter().map(|t| t.id()).collect();
    net.forward(
        &ids,
        cfg,
        ForwardOptions {
            last_only: false,
            keep_trace: true,
        },
    )
}
