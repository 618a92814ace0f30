//! Fully connected layers and shared MLPs.
//!
//! A shared MLP applies the same stack to every row of an `[rows, width]`
//! input, which is exactly a 1×1 convolution over the point dimension.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers `<name>.w` `[fan_in, fan_out]` with Glorot-uniform values
    /// and a zero `<name>.b`.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::Invalid(format!("{name}: zero layer width")));
        }
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let weight = format!("{name}.w");
        let bias = format!("{name}.b");
        store.insert(&weight, Tensor::new(vec![fan_in, fan_out], w)?, true)?;
        store.insert(&bias, Tensor::zeros(&[fan_out]), true)?;
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store.expect(&self.weight));
        let b = tape.param(store.expect(&self.bias));
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Stack of [`Linear`] layers with ReLU between them and, when `relu_last`
/// is set, after the final layer too.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub name: String,
    layers: Vec<Linear>,
    relu_last: bool,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_width: usize,
        widths: &[usize],
        relu_last: bool,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config(format!("{name}: MLP needs at least one layer")));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_width;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(store, rng, &format!("{name}.{i}"), prev, w)?);
            prev = w;
        }
        Ok(Mlp {
            name: name.to_string(),
            layers,
            relu_last,
        })
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// Applies the stack to `x: [rows, in_width]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_width() {
            return Err(Error::Invalid(format!(
                "{}: expects input width {}, got shape {:?}",
                self.name,
                self.in_width(),
                shape
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i < last || self.relu_last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Sets every weight and bias of the stack to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for l in &self.layers {
            for n in [&l.weight, &l.bias] {
                let p = store.get_mut(n).expect("registered parameter");
                p.tensor = Tensor::zeros(p.tensor.shape());
            }
        }
    }
}

/// Adds `U(-scale, scale)` noise to every bias (`*.b`) parameter.
pub fn jitter_biases<R: Rng>(store: &mut ParamStore, rng: &mut R, scale: f64) {
    for p in store.iter_mut().filter(|p| p.name.ends_with(".b")) {
        for v in p.tensor.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{check_param_gradients, FdOptions};

    #[test]
    fn mlp_shapes_and_names() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, &mut rng, "enc", 5, &[8, 3], false).unwrap();
        assert_eq!(store.count_trainable(), 5 * 8 + 8 + 8 * 3 + 3);
        assert!(store.get("enc.1.w").is_some());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[7, 5]));
        let y = mlp.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[7, 3]);
        let bad = tape.constant(Tensor::ones(&[7, 4]));
        let err = mlp.forward(&mut tape, &store, bad).unwrap_err().to_string();
        assert!(err.contains("expects input width 5"), "{err}");
    }

    #[test]
    fn zeroed_mlp_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut store, &mut rng, "m", 3, &[4, 2], true).unwrap();
        mlp.zero(&mut store);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3], 0.7));
        let y = mlp.forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::new(&mut store, &mut rng, "m", 3, &[6, 2], false).unwrap();
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![4, 3], x).unwrap();
        let err = check_param_gradients(&store, None, FdOptions::default(), |tape, s| {
            let xv = tape.constant(x.clone());
            let y = mlp.forward(tape, s, xv)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
