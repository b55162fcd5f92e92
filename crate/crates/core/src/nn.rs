//! Linear layers and small MLPs with paired tape / pure evaluation.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::mat::{Mat, Real};
use crate::params::{glorot, zeros, ParamGroup, ParamId, ParamStore};

/// Fully-connected layer, `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let w = if zero_init {
            zeros(in_dim, out_dim)
        } else {
            glorot(rng, in_dim, out_dim)
        };
        Ok(Self {
            w: store.register(&format!("{name}/w"), group, w)?,
            b: store.register(&format!("{name}/b"), group, zeros(1, out_dim))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }

    pub fn apply_pure<T: Real>(&self, store: &ParamStore, x: &Mat<T>) -> Mat<T> {
        let w = Mat::<T>::from_value(store.value(self.w));
        let b = Mat::<T>::from_value(store.value(self.b));
        x.dot(&w).add_row_vec(&b)
    }
}

/// MLP with tanh hidden activations and a linear output layer.
///
/// Smooth activations keep every loss compatible with finite-difference
/// gradient checking.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists layer widths input-first, e.g. `[16, 256, 128]`.
    /// `zero_init_last` zeroes the output layer so the net starts at 0.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        dims: &[usize],
        zero_init_last: bool,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let last = i == dims.len() - 2;
            layers.push(Linear::new(
                store,
                rng,
                &format!("{name}/fc{i}"),
                group,
                dims[i],
                dims[i + 1],
                last && zero_init_last,
            )?);
        }
        Ok(Self { layers })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, h);
            if i + 1 < n {
                h = tape.tanh(h);
            }
        }
        h
    }

    pub fn apply_pure<T: Real>(&self, store: &ParamStore, x: &Mat<T>) -> Mat<T> {
        let mut h = x.clone();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply_pure(store, &h);
            if i + 1 < n {
                h = h.map(|v| v.tanh());
            }
        }
        h
    }
}

/// Sinusoidal embedding of a scalar: `[sin(2^f pi t), cos(2^f pi t)]` for
/// `f = 0..n_freqs`, giving `2 * n_freqs` features.
pub fn time_embedding(t: f64, n_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n_freqs);
    for f in 0..n_freqs {
        let w = (1u64 << f) as f64 * std::f64::consts::PI;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_and_pure_paths_agree() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(
            &mut store,
            &mut rng,
            "m",
            ParamGroup::Transforms,
            &[3, 16, 2],
            false,
        )
        .unwrap();
        let x = crate::params::glorot(&mut rng, 5, 3);
        let pure = mlp.apply_pure::<f64>(&store, &Mat::from_value(&x));
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x);
        let y = mlp.apply(&mut tape, xv);
        let taped = tape.value(y);
        for r in 0..5 {
            for c in 0..2 {
                assert!((taped[(r, c)] - pure.at(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_init_last_layer_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::new(
            &mut store,
            &mut rng,
            "z",
            ParamGroup::Transforms,
            &[2, 8, 3],
            true,
        )
        .unwrap();
        let x = crate::params::glorot(&mut rng, 4, 2);
        let out = mlp.apply_pure::<f64>(&store, &Mat::from_value(&x));
        assert!(out.data.iter().all(|&v| v == 0.0));
    }
}
