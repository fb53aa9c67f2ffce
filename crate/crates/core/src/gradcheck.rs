//! Central finite differences, used as an independent oracle for the
//! reverse-mode gradients.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, GraphBuilder, NodeId};
use crate::seed::rng;
use crate::tensor::Tensor;

/// `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)` for every element `i`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients
/// from turning rounding noise into large relative errors.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// A randomly shaped dense network with its leaf values.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    pub graph: Graph,
    /// Scalar output to differentiate.
    pub output: String,
    pub leaves: Vec<(String, Tensor)>,
    /// Outputs holding every ReLU input, for kink screening.
    pub relu_inputs: Vec<String>,
    pub ops: Vec<&'static str>,
}

impl RandomGraph {
    /// Smallest distance of any ReLU input from its kink at 0.
    pub fn kink_margin(&self) -> Result<f64> {
        let bindings = self.bindings();
        let names: Vec<&str> = self.relu_inputs.iter().map(String::as_str).collect();
        if names.is_empty() {
            return Ok(f64::INFINITY);
        }
        let eval = self.graph.evaluate(&bindings, &names)?;
        let mut margin = f64::INFINITY;
        for n in &names {
            for v in self.graph.value(&eval, n)?.data() {
                margin = margin.min(v.abs());
            }
        }
        Ok(margin)
    }

    pub fn bindings(&self) -> Bindings<'_> {
        self.leaves.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    /// Largest elementwise [`rel_err`] between reverse-mode and central
    /// finite-difference gradients over every leaf.
    pub fn max_grad_error(&self, eps: f64, floor: f64) -> Result<f64> {
        let names: Vec<&str> = self.leaves.iter().map(|(n, _)| n.as_str()).collect();
        let grads = self.graph.grad(&self.bindings(), &self.output, None, &names)?;
        let mut worst: f64 = 0.0;
        for (li, (name, value)) in self.leaves.iter().enumerate() {
            let f = |probe: &Tensor| -> Result<f64> {
                let mut b = self.bindings();
                b.insert(names[li], probe);
                let out = self.graph.forward(&b)?;
                Ok(out[&self.output].data()[0])
            };
            let fd = finite_diff_grad(f, value, eps)?;
            for (a, b) in grads[name].data().iter().zip(fd.data()) {
                worst = worst.max(rel_err(*a, *b, floor));
            }
        }
        Ok(worst)
    }
}

/// Builds a dense network `[1, d0] -> ... -> scalar` with 1 to `max_layers`
/// layers of width 1 to `max_width`, each an affine map followed by a
/// randomly chosen elementwise or row-wise op, ending in a weighted sum.
pub fn random_graph(seed: u64, max_layers: usize, max_width: usize) -> Result<RandomGraph> {
    if max_layers == 0 || max_width == 0 {
        return Err(Error::InvalidArgument("need at least one layer of width >= 1".into()));
    }
    let mut r = rng(seed);
    let mut b = GraphBuilder::new();
    let mut leaves = Vec::new();
    let mut relu_inputs = Vec::new();
    let mut ops = Vec::new();
    let mut values: BTreeMap<String, Tensor> = BTreeMap::new();
    let draw = |r: &mut rand_chacha::ChaCha8Rng, shape: &[usize], scale: f64| {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..=scale)).collect())
    };
    let layers = r.random_range(1..=max_layers);
    let mut width = r.random_range(1..=max_width);
    let x = b.input("x", &[1, width])?;
    values.insert("x".into(), draw(&mut r, &[1, width], 1.0)?);
    let mut h: NodeId = x;
    for k in 0..layers {
        let next = r.random_range(1..=max_width);
        let (wn, bn) = (format!("w{k}"), format!("b{k}"));
        let w = b.param(&wn, &[width, next])?;
        let bias = b.param(&bn, &[next])?;
        values.insert(wn, draw(&mut r, &[width, next], 1.0)?);
        values.insert(bn, draw(&mut r, &[next], 0.5)?);
        let z = b.matmul(h, w)?;
        let z = b.add_bias(z, bias)?;
        let op = [
            "tanh",
            "softplus",
            "relu",
            "exp",
            "softmax",
            "layer_norm",
            "square",
            "identity",
        ][r.random_range(0..8)];
        ops.push(op);
        h = match op {
            "tanh" => b.tanh(z),
            "softplus" => {
                let beta = r.random_range(0.5..4.0);
                b.softplus(z, beta)?
            }
            "relu" => {
                let name = format!("relu_in{k}");
                b.output(&name, z);
                relu_inputs.push(name);
                b.relu(z)
            }
            "exp" => {
                let s = b.scale(z, 0.5);
                b.exp(s)
            }
            "softmax" => b.softmax(z)?,
            "layer_norm" => {
                let (gn, en) = (format!("ln_g{k}"), format!("ln_b{k}"));
                let g = b.param(&gn, &[next])?;
                let e = b.param(&en, &[next])?;
                values.insert(gn, draw(&mut r, &[next], 1.0)?);
                values.insert(en, draw(&mut r, &[next], 0.5)?);
                b.layer_norm(z, g, e, 1e-5)?
            }
            "square" => b.mul(z, z)?,
            _ => z,
        };
        width = next;
    }
    let c = b.constant(draw(&mut r, &[1, width], 1.0)?);
    let weighted = b.mul(h, c)?;
    let y = b.sum(weighted, None)?;
    b.output("y", y);
    leaves.extend(values);
    Ok(RandomGraph {
        graph: b.build(),
        output: "y".into(),
        leaves,
        relu_inputs,
        ops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_linear() {
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);

        let w = Tensor::vector(vec![2.0, -1.0, 0.5]);
        let x = Tensor::vector(vec![0.3, 0.7, -1.1]);
        let g = finite_diff_grad(|t| t.dot(&w), &x, 1e-3).unwrap();
        for (a, b) in g.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
