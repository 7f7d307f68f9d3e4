//! Fully connected ReLU networks evaluated column-per-sample.
//!
//! Activations for a batch of `n` samples are stored sample-major: the
//! features of sample `j` occupy `[j·width, (j+1)·width)`. Every product
//! goes through the same GEMM kernel so a batch of one and a batch of many
//! produce bitwise identical columns.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// One affine layer, weights row-major `outputs × inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Kaiming-normal weights (fan-in), zero bias.
    pub fn kaiming(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    pub fn w(&self, o: usize, i: usize) -> f64 {
        self.weight[o * self.inputs + i]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// `C ← A·B + beta·C` with explicit strides, thin wrapper over `dgemm`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slice lengths cover every element addressed by the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Activations recorded during a forward pass: `acts[0]` is the input,
/// `acts[i + 1]` is the output of layer `i` (after ReLU for hidden layers).
#[derive(Clone, Debug)]
pub struct Trace {
    pub n: usize,
    pub acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn kaiming(sizes: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            layers: sizes.windows(2).map(|w| Dense::kaiming(w[0], w[1], rng)).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(f64::is_finite)
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    fn layer_forward(layer: &Dense, input: &[f64], n: usize, relu: bool) -> Vec<f64> {
        let mut out = Vec::with_capacity(layer.outputs * n);
        for _ in 0..n {
            out.extend_from_slice(&layer.bias);
        }
        gemm(
            layer.outputs,
            layer.inputs,
            n,
            &layer.weight,
            layer.inputs as isize,
            1,
            input,
            1,
            layer.inputs as isize,
            1.0,
            &mut out,
            1,
            layer.outputs as isize,
        );
        if relu {
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        out
    }

    pub fn forward(&self, input: &[f64], n: usize) -> Vec<f64> {
        assert_eq!(input.len(), self.input_dim() * n, "input batch has wrong size");
        let last = self.layers.len() - 1;
        let mut cur: Option<Vec<f64>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let src = cur.as_deref().unwrap_or(input);
            cur = Some(Self::layer_forward(layer, src, n, i != last));
        }
        cur.unwrap_or_else(|| input.to_vec())
    }

    pub fn forward_traced(&self, input: Vec<f64>, n: usize) -> Trace {
        assert_eq!(input.len(), self.input_dim() * n, "input batch has wrong size");
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let out = Self::layer_forward(layer, acts.last().unwrap(), n, i != last);
            acts.push(out);
        }
        Trace { n, acts }
    }

    /// Reverse pass. `grad_out` is `∂loss/∂output` (sample-major). Returns
    /// `∂loss/∂input`; parameter gradients are accumulated into `grads`.
    pub fn backward(&self, trace: &Trace, grad_out: Vec<f64>, mut grads: Option<&mut Mlp>) -> Vec<f64> {
        let n = trace.n;
        let mut delta = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.acts[i];
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[i];
                // dW += δ · inputᵀ
                gemm(
                    layer.outputs,
                    n,
                    layer.inputs,
                    &delta,
                    1,
                    layer.outputs as isize,
                    input,
                    layer.inputs as isize,
                    1,
                    1.0,
                    &mut gl.weight,
                    layer.inputs as isize,
                    1,
                );
                for col in delta.chunks_exact(layer.outputs) {
                    for (b, d) in gl.bias.iter_mut().zip(col) {
                        *b += d;
                    }
                }
            }
            let mut prev = vec![0.0; layer.inputs * n];
            // Wᵀ · δ
            gemm(
                layer.inputs,
                layer.outputs,
                n,
                &layer.weight,
                1,
                layer.inputs as isize,
                &delta,
                1,
                layer.outputs as isize,
                0.0,
                &mut prev,
                1,
                layer.inputs as isize,
            );
            if i > 0 {
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        delta
    }
}
