//! Reverse-mode differentiation over dense matrices.
//!
//! A [`GradientTape`] records every primitive applied to [`Var`] handles
//! together with its forward value. [`GradientTape::backward`] walks the
//! record in reverse and accumulates vector-Jacobian products, giving the
//! exact gradient of a scalar output with respect to every recorded node.
//!
//! Binary element-wise primitives broadcast their right operand when it has
//! a single row, a single column, or is `1 x 1`.

use std::cell::RefCell;

use ndarray::{Array2, Axis};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Silu(usize),
    Square(usize),
    Scale(usize, f64),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Record of forward intermediates for one scalar computation.
#[derive(Debug, Default)]
pub struct GradientTape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t GradientTape,
    id: usize,
}

/// Gradients of one scalar with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to the leaf `v`; zeros when `v` does not
    /// affect the output. Intermediate gradients are not retained.
    pub fn wrt(&self, v: Var<'_>) -> Array2<f64> {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.id]),
        }
    }
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a leaf (parameter, input or constant).
    pub fn leaf(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse accumulation from a `1 x 1` output.
    pub fn backward(&self, out: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[out.id].value.dim(),
            (1, 1),
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.id] = Some(Array2::ones((1, 1)));
        for id in (0..=out.id).rev() {
            let node = &nodes[id];
            // leaves keep their gradient; intermediates are consumed
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&nodes[b].value.t());
                    let gb = nodes[a].value.t().dot(&g);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Add(a, b) => {
                    let gb = reduce_to(&g, nodes[b].value.dim());
                    accumulate(&mut grads, a, g);
                    accumulate(&mut grads, b, gb);
                }
                Op::Sub(a, b) => {
                    let gb = -reduce_to(&g, nodes[b].value.dim());
                    accumulate(&mut grads, a, g);
                    accumulate(&mut grads, b, gb);
                }
                Op::Mul(a, b) => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    let ga = &g * bv;
                    let gb = reduce_to(&(&g * av), bv.dim());
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Silu(a) => {
                    let mut ga = nodes[a].value.clone();
                    ga.zip_mut_with(&g, |x, &gi| {
                        let s = sigmoid(*x);
                        *x = gi * s * (1.0 + *x * (1.0 - s));
                    });
                    accumulate(&mut grads, a, ga);
                }
                Op::Square(a) => {
                    let ga = &g * &nodes[a].value * 2.0;
                    accumulate(&mut grads, a, ga);
                }
                Op::Scale(a, k) => accumulate(&mut grads, a, g * k),
                Op::Sum(a) => {
                    let ga = Array2::from_elem(nodes[a].value.dim(), g[[0, 0]]);
                    accumulate(&mut grads, a, ga);
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.dim()).collect();
        Gradients { grads, shapes }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: usize, g: Array2<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Sum a broadcast gradient back down to the operand's shape.
fn reduce_to(g: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut out = g.clone();
    if shape.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn broadcast(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let (n, m) = a.dim();
    let (bn, bm) = b.dim();
    assert!(
        (bn == n || bn == 1) && (bm == m || bm == 1),
        "cannot broadcast {:?} onto {:?}",
        b.dim(),
        a.dim()
    );
    Array2::from_shape_fn((n, m), |(i, j)| {
        f(a[[i, j]], b[[if bn == 1 { 0 } else { i }, if bm == 1 { 0 } else { j }]])
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Array2<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[[0, 0]]
    }

    fn unary(self, f: impl Fn(&Array2<f64>) -> Array2<f64>, op: Op) -> Var<'t> {
        let value = f(&self.tape.nodes.borrow()[self.id].value);
        self.tape.push(value, op)
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl Fn(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
        op: Op,
    ) -> Var<'t> {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)
        };
        self.tape.push(value, op)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, |a, b| a.dot(b), Op::MatMul(self.id, rhs.id))
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, |a, b| broadcast(a, b, |x, y| x + y), Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, |a, b| broadcast(a, b, |x, y| x - y), Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, |a, b| broadcast(a, b, |x, y| x * y), Op::Mul(self.id, rhs.id))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(self) -> Var<'t> {
        self.unary(|a| a.mapv(silu), Op::Silu(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|a| a.mapv(|x| x * x), Op::Square(self.id))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(|a| a * k, Op::Scale(self.id, k))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(self) -> Var<'t> {
        self.unary(|a| Array2::from_elem((1, 1), a.sum()), Op::Sum(self.id))
    }
}
