use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::{self, ConvGeom};
use super::tensor::{Parameter, Tensor};
use crate::error::{Error, Result};
use crate::grid::DenseGrid;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape_id: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    KernelConv {
        input: Var,
        kernel: Vec<f64>,
        geom: ConvGeom,
    },
    Relu(Var),
    SumAll(Var),
    Abs(Var),
    SqDiffSum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Add(Var, Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run record of one forward pass.
///
/// Nodes are appended in evaluation order, so every node's parents have a
/// smaller index. [`Tape::backward`] may run once; build a fresh tape for the
/// next pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        let index = self.nodes.len();
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            shape,
            data,
            grad,
            requires_grad,
            op,
        });
        Var {
            tape_id: self.id,
            index,
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape_id != self.id {
            return Err(Error::invalid("variable belongs to a different tape"));
        }
        self.nodes
            .get(v.index)
            .ok_or_else(|| Error::invalid("dangling variable"))
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(Error::invalid("tape already consumed by backward; run a new forward pass"))
        } else {
            Ok(())
        }
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let shape = value.shape().to_vec();
        self.push(shape, value.into_data(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a snapshot of a trainable parameter.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.leaf(p.value.clone(), true)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[self.checked(v)].data
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[self.checked(v)].grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.checked(v)].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.checked(v)].requires_grad
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[self.checked(v)];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape matches data")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.data(v)[0]
    }

    fn checked(&self, v: Var) -> usize {
        assert_eq!(v.tape_id, self.id, "variable belongs to a different tape");
        v.index
    }

    /// Adds this node's gradient into the parameter's accumulator.
    pub fn accumulate_grad(&self, v: Var, p: &mut Parameter) -> Result<()> {
        let n = self.node(v)?;
        if n.grad.len() != p.grad.len() {
            return Err(Error::invalid(format!(
                "gradient length {} does not match parameter length {}",
                n.grad.len(),
                p.grad.len()
            )));
        }
        for (a, g) in p.grad.iter_mut().zip(&n.grad) {
            *a += g;
        }
        Ok(())
    }

    /// Same-size cross-correlation with a trainable weight and bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var> {
        self.check_open()?;
        let (xi, wi, bi) = (self.node(input)?, self.node(weight)?, self.node(bias)?);
        if xi.shape.len() != 3 {
            return Err(Error::invalid(format!("conv2d input must be [C,H,W], got {:?}", xi.shape)));
        }
        if wi.shape.len() != 4 {
            return Err(Error::invalid(format!(
                "conv2d weight must be [Cout,Cin,kH,kW], got {:?}",
                wi.shape
            )));
        }
        let (cin, h, w) = (xi.shape[0], xi.shape[1], xi.shape[2]);
        let (cout, wcin, kh, kw) = (wi.shape[0], wi.shape[1], wi.shape[2], wi.shape[3]);
        if wcin != cin {
            return Err(Error::invalid(format!(
                "conv2d weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("conv2d kernel {kh}x{kw} must have odd sides")));
        }
        if dilation == 0 {
            return Err(Error::invalid("dilation must be at least 1"));
        }
        if bi.shape != [cout] {
            return Err(Error::invalid(format!(
                "conv2d bias must have shape [{cout}], got {:?}",
                bi.shape
            )));
        }
        let geom = ConvGeom {
            cin,
            cout,
            h,
            w,
            kh,
            kw,
            dilation,
        };
        let mut out = vec![0.0; cout * h * w];
        conv::forward(&geom, &xi.data, &wi.data, Some(&bi.data), &mut out);
        let rg = xi.requires_grad || wi.requires_grad || bi.requires_grad;
        Ok(self.push(
            vec![cout, h, w],
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Convolves a single-channel map with a fixed kernel. The kernel gets no
    /// gradient.
    pub fn kernel_convolve(&mut self, input: Var, kernel: &DenseGrid) -> Result<Var> {
        self.check_open()?;
        let xi = self.node(input)?;
        if xi.shape.len() != 3 || xi.shape[0] != 1 {
            return Err(Error::invalid(format!(
                "kernel_convolve input must be [1,H,W], got {:?}",
                xi.shape
            )));
        }
        let (kh, kw) = (kernel.rows(), kernel.cols());
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("kernel {kh}x{kw} must have odd sides")));
        }
        let geom = ConvGeom {
            cin: 1,
            cout: 1,
            h: xi.shape[1],
            w: xi.shape[2],
            kh,
            kw,
            dilation: 1,
        };
        let mut out = vec![0.0; xi.data.len()];
        conv::forward(&geom, &xi.data, kernel.values(), None, &mut out);
        let rg = xi.requires_grad;
        let shape = xi.shape.clone();
        Ok(self.push(
            shape,
            out,
            rg,
            Op::KernelConv {
                input,
                kernel: kernel.values().to_vec(),
                geom,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let n = self.node(x)?;
        let data = n.data.iter().map(|&v| v.max(0.0)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, data, rg, Op::Relu(x)))
    }

    /// Sum of every element; the discrete integral of a map.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let n = self.node(x)?;
        let s = n.data.iter().sum();
        let rg = n.requires_grad;
        Ok(self.push(vec![1], vec![s], rg, Op::SumAll(x)))
    }

    /// `|x|` of a scalar. Subgradient at 0 is 0.
    pub fn abs_scalar(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let n = self.node(x)?;
        if n.data.len() != 1 {
            return Err(Error::invalid(format!("abs_scalar needs a scalar, got {:?}", n.shape)));
        }
        let v = n.data[0].abs();
        let rg = n.requires_grad;
        Ok(self.push(vec![1], vec![v], rg, Op::Abs(x)))
    }

    /// `sum((a - b)^2)` over all elements.
    pub fn sq_diff_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape != nb.shape {
            return Err(Error::invalid(format!(
                "sq_diff_sum shape mismatch {:?} vs {:?}",
                na.shape, nb.shape
            )));
        }
        let s = na
            .data
            .iter()
            .zip(&nb.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(vec![1], vec![s], rg, Op::SqDiffSum(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check_open()?;
        let n = self.node(x)?;
        let data = n.data.iter().map(|v| v * c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, data, rg, Op::Scale(x, c)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check_open()?;
        let n = self.node(x)?;
        let data = n.data.iter().map(|v| v + c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, data, rg, Op::AddScalar(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape != nb.shape {
            return Err(Error::invalid(format!(
                "add shape mismatch {:?} vs {:?}",
                na.shape, nb.shape
            )));
        }
        let data = na.data.iter().zip(&nb.data).map(|(x, y)| x + y).collect();
        let rg = na.requires_grad || nb.requires_grad;
        let shape = na.shape.clone();
        Ok(self.push(shape, data, rg, Op::Add(a, b)))
    }

    /// Sums a non-empty list of same-shaped values.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::invalid("add_all needs at least one term"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Copies `x` into a node that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let n = self.node(x)?;
        let (shape, data) = (n.shape.clone(), n.data.clone());
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    /// Reverse accumulation from a scalar loss. Grads of every node are reset
    /// first; the tape can not be differentiated twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_open()?;
        let root = self.node(loss)?;
        if root.data.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        self.consumed = true;
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
        if !self.nodes[loss.index].requires_grad {
            return Ok(());
        }
        self.nodes[loss.index].grad[0] = 1.0;

        for i in (0..=loss.index).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            propagate(node, before);
        }
        Ok(())
    }
}

fn propagate(node: &Node, parents: &mut [Node]) {
    let g = &node.grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let (xi, wi, bi) = (input.index, weight.index, bias.index);
            if parents[xi].requires_grad {
                let wdata = std::mem::take(&mut parents[wi].data);
                conv::backward_input(geom, &wdata, g, &mut parents[xi].grad);
                parents[wi].data = wdata;
            }
            if parents[wi].requires_grad {
                let xdata = std::mem::take(&mut parents[xi].data);
                conv::backward_weight(geom, &xdata, g, &mut parents[wi].grad);
                parents[xi].data = xdata;
            }
            if parents[bi].requires_grad {
                conv::backward_bias(geom, g, &mut parents[bi].grad);
            }
        }
        Op::KernelConv {
            input,
            kernel,
            geom,
        } => {
            let p = &mut parents[input.index];
            if p.requires_grad {
                conv::backward_input(geom, kernel, g, &mut p.grad);
            }
        }
        Op::Relu(x) => {
            let p = &mut parents[x.index];
            if p.requires_grad {
                for ((pg, &pd), &og) in p.grad.iter_mut().zip(&p.data).zip(g) {
                    if pd > 0.0 {
                        *pg += og;
                    }
                }
            }
        }
        Op::SumAll(x) => {
            let p = &mut parents[x.index];
            if p.requires_grad {
                let og = g[0];
                p.grad.iter_mut().for_each(|pg| *pg += og);
            }
        }
        Op::Abs(x) => {
            let p = &mut parents[x.index];
            if p.requires_grad {
                let v = p.data[0];
                let sign = if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                p.grad[0] += sign * g[0];
            }
        }
        Op::SqDiffSum(a, b) => {
            let og = g[0];
            // a and b may be the same node.
            let diff: Vec<f64> = parents[a.index]
                .data
                .iter()
                .zip(&parents[b.index].data)
                .map(|(x, y)| 2.0 * og * (x - y))
                .collect();
            if parents[a.index].requires_grad {
                for (pg, d) in parents[a.index].grad.iter_mut().zip(&diff) {
                    *pg += d;
                }
            }
            if parents[b.index].requires_grad {
                for (pg, d) in parents[b.index].grad.iter_mut().zip(&diff) {
                    *pg -= d;
                }
            }
        }
        Op::Scale(x, c) => {
            let p = &mut parents[x.index];
            if p.requires_grad {
                for (pg, og) in p.grad.iter_mut().zip(g) {
                    *pg += c * og;
                }
            }
        }
        Op::AddScalar(x) => {
            let p = &mut parents[x.index];
            if p.requires_grad {
                for (pg, og) in p.grad.iter_mut().zip(g) {
                    *pg += og;
                }
            }
        }
        Op::Add(a, b) => {
            for idx in [a.index, b.index] {
                let p = &mut parents[idx];
                if p.requires_grad {
                    for (pg, og) in p.grad.iter_mut().zip(g) {
                        *pg += og;
                    }
                }
            }
        }
    }
}
