use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numcore::{Matrix, NodeId, Tape};

/// Visits the named tensors of a parameter container in a fixed order.
///
/// The visit order defines the gradient key of each tensor: the n-th
/// visited tensor is registered on a tape under key `n`.
pub trait ParamTree {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }

    fn num_tensors(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    /// Copies of all tensors in visit order.
    fn flatten(&self) -> Vec<Matrix> {
        let mut out = Vec::new();
        self.visit(&mut |_, m| out.push(m.clone()));
        out
    }

    /// Overwrites all tensors in visit order; shapes must already agree.
    fn assign(&mut self, values: &[Matrix]) {
        let mut i = 0;
        self.visit_mut(&mut |name, m| {
            assert_eq!(m.shape(), values[i].shape(), "assign shape for {name}");
            m.clone_from(&values[i]);
            i += 1;
        });
        assert_eq!(i, values.len(), "assign count");
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, m| ok &= m.is_finite());
        ok
    }

    fn l2_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, m| s += m.as_slice().iter().map(|x| x * x).sum::<f64>());
        s.sqrt()
    }
}

/// Fully connected layer `y = x W + b` acting on row vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// in x out
    pub weight: Matrix,
    /// 1 x out
    pub bias: Matrix,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    /// Uniform weights in `±1/sqrt(fan_in)`, zero bias.
    pub fn uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Dense {
            weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.as_slice().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (yj, wij) in y.iter_mut().zip(self.weight.row(i)) {
                *yj += xi * wij;
            }
        }
        y
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Tanh multilayer perceptron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    /// Whether the final layer is followed by tanh as well.
    pub activate_last: bool,
}

impl Mlp {
    /// Hidden layers get fan-in scaled uniform weights; the output layer is
    /// zero when `zero_last` is set.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activate_last: bool,
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                if zero_last && i + 1 == n {
                    Dense::zeros(sizes[i], sizes[i + 1])
                } else {
                    Dense::uniform(sizes[i], sizes[i + 1], rng)
                }
            })
            .collect();
        Mlp {
            layers,
            activate_last,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").fan_out()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i + 1 < n || self.activate_last {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        h
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.{i}"), f);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

/// Node ids of a [`Dense`] layer registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DenseNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl DenseNodes {
    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let y = tape.matmul(x, self.weight);
        tape.add_row(y, self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct MlpNodes {
    pub layers: Vec<DenseNodes>,
    pub activate_last: bool,
}

impl MlpNodes {
    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let n = self.layers.len();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, h);
            if i + 1 < n || self.activate_last {
                h = tape.tanh(h);
            }
        }
        h
    }
}

/// Registers tensors on a tape in [`ParamTree`] visit order.
pub(crate) struct Registrar<'a> {
    pub tape: &'a mut Tape,
    pub next_key: usize,
    /// When false tensors become constants (no gradient bookkeeping).
    pub differentiable: bool,
}

impl Registrar<'_> {
    pub fn tensor(&mut self, m: &Matrix) -> NodeId {
        let id = if self.differentiable {
            self.tape.param(m.clone(), self.next_key)
        } else {
            self.tape.constant(m.clone())
        };
        self.next_key += 1;
        id
    }

    pub fn dense(&mut self, d: &Dense) -> DenseNodes {
        DenseNodes {
            weight: self.tensor(&d.weight),
            bias: self.tensor(&d.bias),
        }
    }

    pub fn mlp(&mut self, m: &Mlp) -> MlpNodes {
        MlpNodes {
            layers: m.layers.iter().map(|l| self.dense(l)).collect(),
            activate_last: m.activate_last,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_tape_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[3, 5, 4, 2], false, false, &mut rng);
        let x = [0.3, -1.2, 0.8];
        let plain = mlp.forward(&x);
        let mut tape = Tape::new();
        let nodes = Registrar {
            tape: &mut tape,
            next_key: 0,
            differentiable: true,
        }
        .mlp(&mlp);
        let xin = tape.constant(Matrix::row_vector(&x));
        let out = nodes.apply(&mut tape, xin);
        for (a, b) in tape.value(out).as_slice().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_last_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[2, 4, 3], false, true, &mut rng);
        assert_eq!(mlp.forward(&[1.0, -1.0]), vec![0.0; 3]);
    }
}
