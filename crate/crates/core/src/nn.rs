//! Dense layers and MLPs expressed on the tape.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{linear, Init, ParameterStore, Tape, Var};

/// Weight and bias nodes of one affine layer.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: Var,
    pub b: Var,
}

impl Dense {
    pub fn bind(tape: &mut Tape, store: &ParameterStore, prefix: &str, trainable: bool) -> Result<Self> {
        Ok(Dense {
            w: tape.param(store, &format!("{prefix}.w"), trainable)?,
            b: tape.param(store, &format!("{prefix}.b"), trainable)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        linear(tape, x, self.w, self.b)
    }
}

pub fn init_dense(
    store: &mut ParameterStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    init: Init,
    rng: &mut impl Rng,
) -> Result<()> {
    store.init_matrix(&format!("{prefix}.w"), fan_in, fan_out, init, rng)?;
    store.init_zeros(&format!("{prefix}.b"), &[fan_out])
}

/// Stack of dense layers with relu between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    /// Apply relu after the last layer as well.
    pub relu_out: bool,
}

impl Mlp {
    pub fn bind(tape: &mut Tape, store: &ParameterStore, prefix: &str, depth: usize, relu_out: bool, trainable: bool) -> Result<Self> {
        let layers = (1..=depth)
            .map(|i| Dense::bind(tape, store, &format!("{prefix}.fc{i}"), trainable))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers, relu_out })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < self.layers.len() || self.relu_out {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Forward pass that also returns the input to the last layer.
    pub fn forward_with_penultimate(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            let z = layer.forward(tape, h)?;
            h = tape.relu(z);
        }
        let mut out = self.layers[last].forward(tape, h)?;
        if self.relu_out {
            out = tape.relu(out);
        }
        Ok((out, h))
    }
}

/// Registers `prefix.fc1 … fcN` for the given widths. Hidden layers (and the
/// output when `relu_out`) use He init, a linear output uses Xavier.
pub fn init_mlp(store: &mut ParameterStore, prefix: &str, widths: &[usize], relu_out: bool, rng: &mut impl Rng) -> Result<()> {
    let n = widths.len() - 1;
    for i in 0..n {
        let init = if i + 1 < n || relu_out { Init::He } else { Init::Xavier };
        init_dense(store, &format!("{prefix}.fc{}", i + 1), widths[i], widths[i + 1], init, rng)?;
    }
    Ok(())
}

/// Scalar parameter count of an MLP with the given widths.
pub fn mlp_param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count_matches_store() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_mlp(&mut store, "m", &[5, 7, 3], false, &mut rng).unwrap();
        assert_eq!(store.count_with_prefix("m."), mlp_param_count(&[5, 7, 3]));
        assert_eq!(store.value("m.fc2.w").unwrap().shape(), &[7, 3]);
    }
}
