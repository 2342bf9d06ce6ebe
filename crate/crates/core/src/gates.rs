//! Boolean and comparison gates as stacks of `Linear` + ReLU layers.
//!
//! Gates are built on a [`CircuitBuilder`], a small DAG of ReLU nodes that
//! compiles into layers. Shared subexpressions are computed once and values
//! needed later are carried forward with `relu(x) = x` (or a `relu(x)`,
//! `relu(-x)` pair for signed inputs).
//!
//! Inside the gap band the comparison gates interpolate linearly:
//! `GREATERTHAN(x, y) = (x - y) / c` for `y < x < y + c`, and
//! `EQUAL(x, y) = 1 - |x - y| / c` for `|x - y| < c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeedForward, Linear};

/// Handle to a value in a [`CircuitBuilder`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Wire(usize);

/// A wire or its negation. Negations are folded into the consuming gate as
/// `1 - x`, which agrees with NOT on `{0, 1}` and saves a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lit {
    Pos(Wire),
    Neg(Wire),
}

impl Wire {
    pub fn pos(self) -> Lit {
        Lit::Pos(self)
    }

    pub fn neg(self) -> Lit {
        Lit::Neg(self)
    }
}

/// `sum of literals` as affine terms plus a constant.
fn lit_terms(lits: &[Lit], sign: f64) -> (Vec<(Wire, f64)>, f64) {
    let mut constant = 0.0;
    let terms = lits
        .iter()
        .map(|&l| match l {
            Lit::Pos(w) => (w, sign),
            Lit::Neg(w) => {
                constant += sign;
                (w, -sign)
            }
        })
        .collect();
    (terms, constant)
}

#[derive(Clone, Debug)]
enum Node {
    Input { index: usize, signed: bool },
    Relu { terms: Vec<(Wire, f64)>, bias: f64 },
}

#[derive(Clone, Debug, Default)]
pub struct CircuitBuilder {
    nodes: Vec<Node>,
    inputs: usize,
    outputs: Vec<Wire>,
}

impl CircuitBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Next input coordinate. `signed` inputs may be negative.
    pub fn input(&mut self, signed: bool) -> Wire {
        let index = self.inputs;
        self.inputs += 1;
        self.push(Node::Input { index, signed })
    }

    pub fn inputs(&mut self, n: usize, signed: bool) -> Vec<Wire> {
        (0..n).map(|_| self.input(signed)).collect()
    }

    fn push(&mut self, node: Node) -> Wire {
        self.nodes.push(node);
        Wire(self.nodes.len() - 1)
    }

    /// `relu(sum w * x + bias)`.
    pub fn relu(&mut self, terms: &[(Wire, f64)], bias: f64) -> Wire {
        self.push(Node::Relu {
            terms: terms.to_vec(),
            bias,
        })
    }

    pub fn and(&mut self, xs: &[Wire]) -> Wire {
        let terms: Vec<_> = xs.iter().map(|&x| (x, 1.0)).collect();
        self.relu(&terms, 1.0 - xs.len() as f64)
    }

    pub fn or(&mut self, xs: &[Wire]) -> Wire {
        let terms: Vec<_> = xs.iter().map(|&x| (x, -1.0)).collect();
        let inner = self.relu(&terms, 1.0);
        self.relu(&[(inner, -1.0)], 1.0)
    }

    pub fn not(&mut self, x: Wire) -> Wire {
        self.relu(&[(x, -1.0)], 1.0)
    }

    /// AND over literals, one layer deep.
    pub fn and_lits(&mut self, lits: &[Lit]) -> Wire {
        let (terms, constant) = lit_terms(lits, 1.0);
        self.relu(&terms, constant + 1.0 - lits.len() as f64)
    }

    /// OR over literals, two layers deep.
    pub fn or_lits(&mut self, lits: &[Lit]) -> Wire {
        let (terms, constant) = lit_terms(lits, -1.0);
        let inner = self.relu(&terms, 1.0 + constant);
        self.relu(&[(inner, -1.0)], 1.0)
    }

    /// SAME with negations folded in, three layers deep.
    pub fn same_lits(&mut self, xs: &[Wire], ys: &[Wire]) -> Wire {
        assert_eq!(xs.len(), ys.len(), "SAME needs equal widths");
        let mut clauses = Vec::with_capacity(2 * xs.len());
        for (&x, &y) in xs.iter().zip(ys) {
            clauses.push(self.or_lits(&[x.pos(), y.neg()]).pos());
            clauses.push(self.or_lits(&[x.neg(), y.pos()]).pos());
        }
        self.and_lits(&clauses)
    }

    /// 1 iff `xs` and `ys` agree on every bit.
    pub fn same(&mut self, xs: &[Wire], ys: &[Wire]) -> Wire {
        assert_eq!(xs.len(), ys.len(), "SAME needs equal widths");
        let bits: Vec<Wire> = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| {
                let ny = self.not(y);
                let nx = self.not(x);
                let a = self.or(&[x, ny]);
                let b = self.or(&[nx, y]);
                self.and(&[a, b])
            })
            .collect();
        self.and(&bits)
    }

    /// 1 when `sum w * x + bias >= c`, 0 when it is `<= 0`.
    pub fn greater_than_expr(&mut self, terms: &[(Wire, f64)], bias: f64, c: f64) -> Wire {
        let h = self.relu(terms, bias);
        let z1 = self.relu(&[(h, -1.0 / c)], 1.0);
        self.relu(&[(z1, -1.0)], 1.0)
    }

    pub fn greater_than(&mut self, x: Wire, y: Wire, c: f64) -> Wire {
        self.greater_than_expr(&[(x, 1.0), (y, -1.0)], 0.0, c)
    }

    pub fn equal(&mut self, x: Wire, y: Wire, c: f64) -> Wire {
        let z1 = self.greater_than(x, y, c);
        let z2 = self.greater_than(y, x, c);
        let n1 = self.not(z1);
        let n2 = self.not(z2);
        self.and(&[n1, n2])
    }

    pub fn output(&mut self, w: Wire) {
        self.outputs.push(w);
    }

    pub fn input_width(&self) -> usize {
        self.inputs
    }

    fn is_signed(&self, w: Wire) -> bool {
        matches!(self.nodes[w.0], Node::Input { signed: true, .. })
    }

    /// Layers to be applied as `x <- relu(L x)` in order. The last layer's
    /// rows are the outputs in the order they were declared.
    pub fn compile(&self) -> Result<Vec<Linear>> {
        if self.outputs.is_empty() {
            return Err(Error::invalid("circuit has no outputs"));
        }
        if let Some(&w) = self.outputs.iter().find(|&&w| self.is_signed(w)) {
            return Err(Error::invalid(format!(
                "signed input {w:?} cannot be an output"
            )));
        }
        let n = self.nodes.len();
        let mut level = vec![0usize; n];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Node::Relu { terms, .. } = node {
                level[i] = 1 + terms.iter().map(|(w, _)| level[w.0]).max().unwrap_or(0);
            }
        }
        let depth = self
            .outputs
            .iter()
            .map(|w| level[w.0])
            .max()
            .unwrap_or(0)
            .max(1);

        // last level at which each live wire is read
        let mut alive = vec![false; n];
        let mut needed = vec![0usize; n];
        for &w in &self.outputs {
            alive[w.0] = true;
            needed[w.0] = depth;
        }
        for i in (0..n).rev() {
            if !alive[i] {
                continue;
            }
            if let Node::Relu { terms, .. } = &self.nodes[i] {
                for (w, _) in terms {
                    alive[w.0] = true;
                    needed[w.0] = needed[w.0].max(level[i]);
                }
            }
        }

        // where each wire lives in the current representation
        #[derive(Clone, Copy)]
        enum Slot {
            Absent,
            Row(usize),
            Pair(usize, usize),
        }
        let mut slots: Vec<Slot> = (0..n)
            .map(|i| match self.nodes[i] {
                Node::Input { index, .. } => Slot::Row(index),
                Node::Relu { .. } => Slot::Absent,
            })
            .collect();
        let mut width = self.inputs;
        let mut layers = Vec::with_capacity(depth);

        for l in 1..=depth {
            let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
            let mut next = vec![Slot::Absent; n];
            let expand = |terms: &[(Wire, f64)], slots: &[Slot]| -> Vec<(usize, f64)> {
                let mut out = Vec::new();
                for &(w, c) in terms {
                    match slots[w.0] {
                        Slot::Row(r) => out.push((r, c)),
                        Slot::Pair(p, q) => {
                            out.push((p, c));
                            out.push((q, -c));
                        }
                        Slot::Absent => unreachable!("wire read before it is available"),
                    }
                }
                out
            };
            let emit =
                |i: usize, rows: &mut Vec<(Vec<(usize, f64)>, f64)>, next: &mut Vec<Slot>| {
                    if !matches!(next[i], Slot::Absent) {
                        return;
                    }
                    let slot = match &self.nodes[i] {
                        Node::Relu { terms, bias } if level[i] == l => {
                            rows.push((expand(terms, &slots), *bias));
                            Slot::Row(rows.len() - 1)
                        }
                        _ => match slots[i] {
                            Slot::Row(r) if self.is_signed(Wire(i)) => {
                                rows.push((vec![(r, 1.0)], 0.0));
                                rows.push((vec![(r, -1.0)], 0.0));
                                Slot::Pair(rows.len() - 2, rows.len() - 1)
                            }
                            Slot::Row(r) => {
                                rows.push((vec![(r, 1.0)], 0.0));
                                Slot::Row(rows.len() - 1)
                            }
                            Slot::Pair(p, q) => {
                                rows.push((vec![(p, 1.0)], 0.0));
                                rows.push((vec![(q, 1.0)], 0.0));
                                Slot::Pair(rows.len() - 2, rows.len() - 1)
                            }
                            Slot::Absent => unreachable!(),
                        },
                    };
                    next[i] = slot;
                };
            if l == depth {
                for &w in &self.outputs {
                    // repeated outputs get their own row
                    next[w.0] = Slot::Absent;
                    emit(w.0, &mut rows, &mut next);
                }
            } else {
                for i in 0..n {
                    let computed_here = level[i] == l;
                    let carried = level[i] < l && needed[i] > l;
                    if alive[i] && (computed_here || carried) {
                        emit(i, &mut rows, &mut next);
                    }
                }
            }
            let mut lin = Linear::zeros(rows.len(), width);
            for (r, (terms, bias)) in rows.iter().enumerate() {
                for &(c, w) in terms {
                    lin.set(r, c, lin.get(r, c) + w);
                }
                lin.set_bias(r, *bias);
            }
            width = rows.len();
            layers.push(lin);
            slots = next;
        }
        Ok(layers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GateKind {
    And,
    Or,
    Not,
    Same,
    GreaterThan { c: f64 },
    Equal { c: f64 },
}

impl GateKind {
    pub fn is_logic(self) -> bool {
        matches!(
            self,
            GateKind::And | GateKind::Or | GateKind::Not | GateKind::Same
        )
    }

    pub fn gap(self) -> Option<f64> {
        match self {
            GateKind::GreaterThan { c } | GateKind::Equal { c } => Some(c),
            _ => None,
        }
    }
}

/// A single gate compiled to ReLU layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateCircuit {
    pub kind: GateKind,
    /// Operand count; for SAME the number of bits per operand.
    pub arity: usize,
    pub layers: Vec<Linear>,
}

/// `arity` is ignored for NOT (1), GREATERTHAN and EQUAL (2).
pub fn build_gate(kind: GateKind, arity: usize) -> Result<GateCircuit> {
    let mut b = CircuitBuilder::new();
    let (arity, out) = match kind {
        GateKind::And | GateKind::Or | GateKind::Same if arity == 0 => {
            return Err(Error::invalid("gate arity must be at least 1"))
        }
        GateKind::And => {
            let xs = b.inputs(arity, false);
            (arity, b.and(&xs))
        }
        GateKind::Or => {
            let xs = b.inputs(arity, false);
            (arity, b.or(&xs))
        }
        GateKind::Not => {
            let x = b.input(false);
            (1, b.not(x))
        }
        GateKind::Same => {
            let xs = b.inputs(arity, false);
            let ys = b.inputs(arity, false);
            (arity, b.same(&xs, &ys))
        }
        GateKind::GreaterThan { c } | GateKind::Equal { c } if !(c > 0.0) => {
            return Err(Error::invalid(format!("gap must be positive, got {c}")))
        }
        GateKind::GreaterThan { c } => {
            let x = b.input(true);
            let y = b.input(true);
            (2, b.greater_than(x, y, c))
        }
        GateKind::Equal { c } => {
            let x = b.input(true);
            let y = b.input(true);
            (2, b.equal(x, y, c))
        }
    };
    b.output(out);
    Ok(GateCircuit {
        kind,
        arity,
        layers: b.compile()?,
    })
}

impl GateCircuit {
    pub fn input_width(&self) -> usize {
        self.layers[0].cols
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Activations after each layer.
    pub fn activations(&self, inputs: &[f64]) -> Vec<Vec<f64>> {
        let mut x = inputs.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            x = l.apply(&x).into_iter().map(|v| v.max(0.0)).collect();
            out.push(x.clone());
        }
        out
    }

    /// Unchecked evaluation.
    pub fn eval(&self, inputs: &[f64]) -> f64 {
        self.activations(inputs).last().expect("at least one layer")[0]
    }

    pub fn to_ffn(&self) -> FeedForward {
        FeedForward::relu_mlp(self.layers.clone())
    }
}

/// Evaluates `g`, rejecting non-boolean inputs to logic gates.
pub fn eval_gate(g: &GateCircuit, inputs: &[f64]) -> Result<f64> {
    if inputs.len() != g.input_width() {
        return Err(Error::invalid(format!(
            "gate takes {} inputs, got {}",
            g.input_width(),
            inputs.len()
        )));
    }
    if g.kind.is_logic() {
        if let Some(x) = inputs.iter().find(|&&x| x != 0.0 && x != 1.0) {
            return Err(Error::invalid(format!(
                "logic gate input {x} is not boolean"
            )));
        }
    }
    Ok(g.eval(inputs))
}
