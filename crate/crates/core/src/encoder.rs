//! MLP encoder producing `D×N` features, plus its EMA momentum twin.
//!
//! Each layer computes `W·X + b·1ᵀ`, then optionally standardizes every
//! output feature over the batch, then applies its activation. Both views of
//! a batch go through the same bound parameters, so their adjoints
//! accumulate on the same leaves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub standardize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `output_dim × input_dim`.
    pub weight: DenseMatrix,
    /// `output_dim × 1`.
    pub bias: DenseMatrix,
    pub activation: Activation,
    pub standardize: bool,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            input_dim: self.weight.cols(),
            output_dim: self.weight.rows(),
            activation: self.activation,
            standardize: self.standardize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    layers: Vec<Layer>,
}

/// Default miniature shape: `input→64→64` backbone, `64→64→embed`
/// projector, with batch standardization and ReLU on every hidden layer.
pub fn default_architecture(input_dim: usize, embed_dim: usize) -> Vec<LayerSpec> {
    mlp_architecture(input_dim, &[64, 64, 64], embed_dim)
}

/// Hidden layers get standardize + ReLU; the output layer is plain affine.
pub fn mlp_architecture(input_dim: usize, hidden: &[usize], output_dim: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input_dim;
    for &h in hidden {
        specs.push(LayerSpec {
            input_dim: prev,
            output_dim: h,
            activation: Activation::Relu,
            standardize: true,
        });
        prev = h;
    }
    specs.push(LayerSpec {
        input_dim: prev,
        output_dim,
        activation: Activation::None,
        standardize: false,
    });
    specs
}

/// Glorot-uniform weights, zero biases, reproducible from `seed`.
pub fn init_params(specs: &[LayerSpec], seed: u64) -> Result<EncoderState> {
    if specs.is_empty() {
        return Err(Error::Contract("encoder needs at least one layer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(specs.len());
    for s in specs {
        if s.input_dim == 0 || s.output_dim == 0 {
            return Err(Error::Contract(format!("layer with zero width: {s:?}")));
        }
        let bound = (6.0 / (s.input_dim + s.output_dim) as f64).sqrt();
        let weight = DenseMatrix::from_fn(s.output_dim, s.input_dim, |_, _| {
            rng.random_range(-bound..=bound)
        });
        layers.push(Layer {
            weight,
            bias: DenseMatrix::zeros(s.output_dim, 1),
            activation: s.activation,
            standardize: s.standardize,
        });
    }
    EncoderState::from_layers(layers)
}

/// Parameter leaves of an encoder on one tape.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl BoundEncoder {
    /// `(weight, bias)` pairs in layer order.
    pub fn params(&self) -> impl Iterator<Item = Var> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [*w, *b])
    }
}

impl EncoderState {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("encoder needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (l.weight.rows(), 1) {
                return Err(Error::Contract(format!("layer {i}: bias shape does not match weight rows")));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::Numeric(format!("layer {i}: non-finite parameter")));
            }
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(Error::Contract(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.weight.cols(),
                    i - 1,
                    layers[i - 1].weight.rows()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    /// Flat list of parameter matrices in `(weight, bias)` layer order.
    pub fn params(&self) -> Vec<&DenseMatrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn same_shape(&self, other: &EncoderState) -> bool {
        self.specs() == other.specs()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundEncoder {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            weights.push(tape.leaf(l.weight.clone()));
            biases.push(tape.leaf(l.bias.clone()));
        }
        BoundEncoder { weights, biases }
    }

    /// Runs the first `depth` layers with bound parameters.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        bound: &BoundEncoder,
        input: Var,
        depth: usize,
    ) -> Result<Var> {
        let rows = tape.value(input).rows();
        if rows != self.input_dim() {
            return Err(Error::dim(
                "encoder_forward",
                format!("encoder expects {} input rows, batch has {rows}", self.input_dim()),
            ));
        }
        let mut h = input;
        for (i, layer) in self.layers.iter().take(depth).enumerate() {
            let lin = tape.matmul(bound.weights[i], h)?;
            h = tape.add_column(lin, bound.biases[i])?;
            if layer.standardize {
                h = tape.batch_standardize(h)?;
            }
            if layer.activation == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Plain forward pass to the output (no gradient bookkeeping needed).
    pub fn embed(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        self.embed_to_depth(batch, self.layers.len())
    }

    /// Plain forward pass through the first `depth` layers.
    pub fn embed_to_depth(&self, batch: &DenseMatrix, depth: usize) -> Result<DenseMatrix> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone());
        let bound = self.bind(&mut tape);
        let out = self.forward_bound(&mut tape, &bound, x, depth.min(self.layers.len()))?;
        Ok(tape.value(out).clone())
    }
}

/// Records `state` on `tape` and runs it on `batch`.
pub fn encoder_forward(
    state: &EncoderState,
    batch: &DenseMatrix,
    tape: &mut Tape,
) -> Result<(Var, BoundEncoder)> {
    let x = tape.leaf(batch.clone());
    let bound = state.bind(tape);
    let out = state.forward_bound(tape, &bound, x, state.layers.len())?;
    Ok((out, bound))
}

/// EMA copy of the online encoder. Never receives gradient updates.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumTwin {
    pub params: EncoderState,
    pub momentum: f64,
}

impl MomentumTwin {
    pub fn new(online: &EncoderState, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1], got {momentum}")));
        }
        Ok(Self {
            params: online.clone(),
            momentum,
        })
    }

    /// `p_ema ← m·p_ema + (1 − m)·p_online` for every parameter.
    pub fn ema_update(&mut self, online: &EncoderState) -> Result<()> {
        if !self.params.same_shape(online) {
            return Err(Error::Contract("EMA twin and online encoder differ in shape".into()));
        }
        let m = self.momentum;
        for (p, q) in self.params.params_mut().into_iter().zip(online.params()) {
            for (a, b) in p.data_mut().iter_mut().zip(q.data()) {
                *a = m * *a + (1.0 - m) * b;
            }
        }
        Ok(())
    }

    /// Twin forward pass; the output sits behind a stop-gradient.
    pub fn forward(&self, batch: &DenseMatrix, tape: &mut Tape) -> Result<(Var, BoundEncoder)> {
        let (out, bound) = encoder_forward(&self.params, batch, tape)?;
        Ok((tape.stop_gradient(out), bound))
    }
}

pub fn ema_update(twin: &mut MomentumTwin, online: &EncoderState) -> Result<()> {
    twin.ema_update(online)
}

pub fn twin_forward(twin: &MomentumTwin, batch: &DenseMatrix, tape: &mut Tape) -> Result<(Var, BoundEncoder)> {
    twin.forward(batch, tape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(weight: &[&[f64]], bias: &[f64], act: Activation) -> EncoderState {
        EncoderState::from_layers(vec![Layer {
            weight: DenseMatrix::from_rows(weight).unwrap(),
            bias: DenseMatrix::from_columns(&[bias]).unwrap(),
            activation: act,
            standardize: false,
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input() {
        let e = single(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0], Activation::None);
        let x = DenseMatrix::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, -1.0]]).unwrap();
        assert_eq!(e.embed(&x).unwrap(), x);
    }

    #[test]
    fn scalar_relu_layer() {
        let e = single(&[&[2.0]], &[1.0], Activation::Relu);
        let x = DenseMatrix::from_rows(&[&[-3.0, 4.0]]).unwrap();
        assert_eq!(e.embed(&x).unwrap().data(), &[0.0, 9.0]);
    }

    #[test]
    fn wrong_input_rows() {
        let e = single(&[&[2.0]], &[1.0], Activation::Relu);
        assert!(matches!(
            e.embed(&DenseMatrix::zeros(2, 3)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn init_is_reproducible_and_bounded() {
        let specs = mlp_architecture(64, &[], 32);
        let a = init_params(&specs, 7).unwrap();
        let b = init_params(&specs, 7).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 96.0).sqrt();
        assert!((bound - 0.25).abs() < 1e-12);
        assert!(a.layers()[0].weight.max_abs() <= bound);
        assert!(a.layers()[0].bias.data().iter().all(|&v| v == 0.0));
        assert_ne!(init_params(&specs, 8).unwrap(), a);
        assert!(matches!(init_params(&[], 0), Err(Error::Contract(_))));
    }

    #[test]
    fn default_architecture_chains() {
        let s = default_architecture(16, 8);
        let e = init_params(&s, 0).unwrap();
        assert_eq!(e.input_dim(), 16);
        assert_eq!(e.output_dim(), 8);
        assert_eq!(e.layers().len(), 4);
        assert!(e.layers()[..3].iter().all(|l| l.standardize));
        assert!(!e.layers()[3].standardize);
    }

    #[test]
    fn ema_edge_momenta() {
        let online = init_params(&mlp_architecture(3, &[4], 2), 1).unwrap();
        let other = init_params(&mlp_architecture(3, &[4], 2), 2).unwrap();

        let mut keep = MomentumTwin::new(&other, 1.0).unwrap();
        keep.ema_update(&online).unwrap();
        assert_eq!(keep.params, other);

        let mut copy = MomentumTwin::new(&other, 0.0).unwrap();
        copy.ema_update(&online).unwrap();
        assert_eq!(copy.params, online);

        let mut fixed = MomentumTwin::new(&online, 0.37).unwrap();
        fixed.ema_update(&online).unwrap();
        assert_eq!(fixed.params, online);

        let wrong = init_params(&mlp_architecture(3, &[5], 2), 1).unwrap();
        assert!(matches!(keep.ema_update(&wrong), Err(Error::Contract(_))));
    }

    #[test]
    fn ema_scalar_step() {
        let zero = single(&[&[0.0]], &[0.0], Activation::None);
        let one = single(&[&[1.0]], &[0.0], Activation::None);
        let mut twin = MomentumTwin::new(&zero, 0.99).unwrap();
        twin.ema_update(&one).unwrap();
        assert!((twin.params.layers()[0].weight.get(0, 0) - 0.01).abs() < 1e-15);
    }
}
