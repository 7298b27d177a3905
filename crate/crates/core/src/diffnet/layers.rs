use rand::Rng;

use super::{Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        zero: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let init = if zero { Init::Zeros } else { Init::FanIn(inputs) };
        let weight = store.add(&format!("{name}.weight"), outputs, inputs, init, rng)?;
        let bias = store.add(&format!("{name}.bias"), 1, outputs, Init::Zeros, rng)?;
        Ok(Linear {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    /// Look up an existing layer, e.g. one restored from a checkpoint.
    pub fn bind(store: &ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Linear {
            weight: store.require(&format!("{name}.weight"), outputs, inputs)?,
            bias: store.require(&format!("{name}.bias"), 1, outputs)?,
            inputs,
            outputs,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        tape.affine(x, self.weight, Some(self.bias))
    }
}

/// Multi-layer perceptron with a shared hidden activation and linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = inputs;
        for (i, &h) in hidden.iter().chain(std::iter::once(&outputs)).enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), width, h, false, rng)?);
            width = h;
        }
        Ok(Mlp { layers, activation })
    }

    pub fn bind(
        store: &ParamStore,
        name: &str,
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        activation: Activation,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = inputs;
        for (i, &h) in hidden.iter().chain(std::iter::once(&outputs)).enumerate() {
            layers.push(Linear::bind(store, &format!("{name}.{i}"), width, h)?);
            width = h;
        }
        Ok(Mlp { layers, activation })
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.outputs).collect()
    }

    pub fn output_layer(&self) -> &Linear {
        &self.layers[self.layers.len() - 1]
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }
}

/// Gated recurrent unit:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `c = tanh(W_c x + U_c (r ⊙ h) + b_c)`, `h' = (1 - z) ⊙ h + z ⊙ c`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
    pub inputs: usize,
    pub hidden: usize,
}

const GATES: [&str; 3] = ["z", "r", "c"];

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut ids = Vec::with_capacity(9);
        for g in GATES {
            ids.push(store.add(&format!("{name}.w_{g}"), hidden, inputs, Init::FanIn(inputs), rng)?);
            ids.push(store.add(&format!("{name}.u_{g}"), hidden, hidden, Init::FanIn(hidden), rng)?);
            ids.push(store.add(&format!("{name}.b_{g}"), 1, hidden, Init::Zeros, rng)?);
        }
        Ok(Self::from_ids(&ids, inputs, hidden))
    }

    pub fn bind(store: &ParamStore, name: &str, inputs: usize, hidden: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(9);
        for g in GATES {
            ids.push(store.require(&format!("{name}.w_{g}"), hidden, inputs)?);
            ids.push(store.require(&format!("{name}.u_{g}"), hidden, hidden)?);
            ids.push(store.require(&format!("{name}.b_{g}"), 1, hidden)?);
        }
        Ok(Self::from_ids(&ids, inputs, hidden))
    }

    fn from_ids(ids: &[ParamId], inputs: usize, hidden: usize) -> Self {
        GruCell {
            w: [ids[0], ids[3], ids[6]],
            u: [ids[1], ids[4], ids[7]],
            b: [ids[2], ids[5], ids[8]],
            inputs,
            hidden,
        }
    }

    pub fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Result<Var> {
        let hv = tape.value(h);
        if hv.cols() != self.hidden {
            return Err(Error::shape("gru hidden", self.hidden, hv.cols()));
        }
        let gate = |tape: &mut Tape<'_>, k: usize, hin: Var| -> Result<Var> {
            let a = tape.affine(x, self.w[k], Some(self.b[k]))?;
            let b = tape.affine(hin, self.u[k], None)?;
            tape.add(a, b)
        };
        let z_pre = gate(tape, 0, h)?;
        let z = tape.sigmoid(z_pre);
        let r_pre = gate(tape, 1, h)?;
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h)?;
        let c_pre = gate(tape, 2, rh)?;
        let c = tape.tanh(c_pre);
        let keep = tape.one_minus(z);
        let old = tape.mul(keep, h)?;
        let new = tape.mul(z, c)?;
        tape.add(old, new)
    }
}

/// `m = mu + exp(log_sigma) ⊙ noise`, differentiable in `mu` and `log_sigma`.
pub fn gaussian_reparam_sample(
    tape: &mut Tape<'_>,
    mu: Var,
    log_sigma: Var,
    noise: &[f64],
) -> Result<Var> {
    let rows = tape.value(mu).rows();
    let eps = tape.input(Tensor::from_vec(rows, noise.len() / rows.max(1), noise.to_vec())?);
    let sigma = tape.exp(log_sigma);
    let spread = tape.mul(sigma, eps)?;
    tape.add(mu, spread)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn gru_with(value: f64, inputs: usize, hidden: usize) -> (ParamStore, GruCell) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = GruCell::new(&mut store, "gru", inputs, hidden, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let is_bias = store.name(id).contains(".b_");
            store.value_mut(id).fill(if is_bias { 0.0 } else { value });
        }
        (store, cell)
    }

    #[test]
    fn zero_weight_gru_halves_hidden() {
        let (store, cell) = gru_with(0.0, 2, 3);
        let mut tape = Tape::new(&store);
        let x = tape.row(vec![0.7, -0.2]);
        let h = tape.row(vec![1.0, -2.0, 0.5]);
        let out = cell.step(&mut tape, x, h).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -1.0, 0.25]);

        let x0 = tape.row(vec![0.0, 0.0]);
        let h0 = tape.row(vec![0.0; 3]);
        let out0 = cell.step(&mut tape, x0, h0).unwrap();
        assert_eq!(tape.value(out0).data(), &[0.0; 3]);
    }

    #[test]
    fn scalar_gru_hand_worked() {
        let (store, cell) = gru_with(1.0, 1, 1);
        let mut tape = Tape::new(&store);
        let x = tape.row(vec![1.0]);
        let h = tape.row(vec![0.0]);
        let out = cell.step(&mut tape, x, h).unwrap();
        let out = tape.value(out).item();
        let expected = sigmoid(1.0) * 1.0f64.tanh();
        assert!((out - expected).abs() < 1e-15);
        assert!((out - 0.5568).abs() < 1e-4);
    }

    #[test]
    fn reparam_sample_and_gradient() {
        let mut store = ParamStore::new();
        let ls = store.insert("log_sigma", Tensor::scalar(0.0)).unwrap();
        let mut tape = Tape::new(&store);
        let mu = tape.row(vec![0.0]);
        let one = tape.row(vec![1.0]);
        let log_sigma = tape.affine(one, ls, None).unwrap();
        let m = gaussian_reparam_sample(&mut tape, mu, log_sigma, &[2.0]).unwrap();
        assert_eq!(tape.value(m).item(), 2.0);
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(ls).item(), 2.0);

        let mut tape = Tape::new(&store);
        let mu = tape.row(vec![0.4, -1.0]);
        let lsig = tape.row(vec![0.3, 0.1]);
        let m = gaussian_reparam_sample(&mut tape, mu, lsig, &[0.0, 0.0]).unwrap();
        assert_eq!(tape.value(m).data(), &[0.4, -1.0]);
    }

    #[test]
    fn categorical_helpers() {
        let p = softmax(&[1.0, 0.0, 0.0, 0.0]);
        assert!((p[0] - 0.4754).abs() < 1e-4 && (p[1] - 0.1749).abs() < 1e-4);
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(argmax(&[0.0, 0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3, 0.2]), 1);
        let shifted = softmax(&[101.0, 100.0, 100.0, 100.0]);
        for (a, b) in p.iter().zip(&shifted) {
            assert!((a - b).abs() <= 1e-12);
        }
        let ls = log_softmax(&[0.3, -2.0, 1.0, 4.0]);
        for (l, q) in ls.iter().zip(softmax(&[0.3, -2.0, 1.0, 4.0])) {
            assert!((l - q.ln()).abs() <= 1e-9);
        }
    }
}
